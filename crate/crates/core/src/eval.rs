//! Confusion matrices, binary metrics, per-class accuracy and table rendering.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Counts under benign = 0 (negative), malicious = 1 (positive).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub fn new(tp: u64, fp: u64, tn: u64, fn_: u64) -> Self {
        Self { tp, fp, tn, fn_ }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

pub fn confusion(y_true: &[u8], y_pred: &[u8]) -> Result<ConfusionMatrix> {
    if y_true.len() != y_pred.len() {
        return Err(Error::DimensionMismatch {
            expected: y_true.len(),
            got: y_pred.len(),
        });
    }
    let mut cm = ConfusionMatrix::default();
    for (i, (&t, &p)) in y_true.iter().zip(y_pred).enumerate() {
        match (t, p) {
            (1, 1) => cm.tp += 1,
            (0, 1) => cm.fp += 1,
            (0, 0) => cm.tn += 1,
            (1, 0) => cm.fn_ += 1,
            _ => {
                return Err(Error::InvalidInput(format!(
                    "row {i}: labels must be 0 or 1, got ({t}, {p})"
                )))
            }
        }
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DegenerateFlags {
    pub precision: bool,
    pub recall: bool,
    pub f1: bool,
}

impl DegenerateFlags {
    pub fn any(&self) -> bool {
        self.precision || self.recall || self.f1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: String,
    pub test_set: String,
    pub threshold: f64,
    pub provenance_hash: String,
    pub confusion: ConfusionMatrix,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Metrics whose denominator was zero and were reported as 0.
    pub degenerate: DegenerateFlags,
    pub per_class_accuracy: BTreeMap<String, f64>,
}

fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

/// Accuracy, precision, recall and F1 from a confusion matrix. Zero
/// denominators yield 0 with the matching degenerate flag.
pub fn metrics(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    if cm.total() == 0 {
        return Err(Error::EmptyDataset("confusion matrix has no rows".into()));
    }
    let accuracy = (cm.tp + cm.tn) as f64 / cm.total() as f64;
    let (precision, dp) = ratio(cm.tp, cm.tp + cm.fp);
    let (recall, dr) = ratio(cm.tp, cm.tp + cm.fn_);
    let (f1, df) = if precision + recall > 0.0 {
        (2.0 * precision * recall / (precision + recall), false)
    } else {
        (0.0, true)
    };
    Ok(MetricsReport {
        model: String::new(),
        test_set: String::new(),
        threshold: f64::NAN,
        provenance_hash: String::new(),
        confusion: *cm,
        accuracy,
        precision,
        recall,
        f1,
        degenerate: DegenerateFlags {
            precision: dp,
            recall: dr,
            f1: df,
        },
        per_class_accuracy: BTreeMap::new(),
    })
}

/// Fraction of each true class given the correct binary verdict: predicted 1
/// for attack classes, predicted 0 for `benign_label`. Classes absent from
/// `true_class` are absent from the map.
pub fn per_class_accuracy<S: AsRef<str>>(
    true_class: &[S],
    y_pred: &[u8],
    benign_label: &str,
) -> Result<BTreeMap<String, f64>> {
    if true_class.len() != y_pred.len() {
        return Err(Error::DimensionMismatch {
            expected: true_class.len(),
            got: y_pred.len(),
        });
    }
    let mut tally: BTreeMap<&str, (u64, u64)> = BTreeMap::new();
    for (c, &p) in true_class.iter().zip(y_pred) {
        let c = c.as_ref();
        let correct = if c == benign_label { p == 0 } else { p == 1 };
        let e = tally.entry(c).or_insert((0, 0));
        e.0 += u64::from(correct);
        e.1 += 1;
    }
    Ok(tally
        .into_iter()
        .map(|(c, (ok, n))| (c.to_string(), ok as f64 / n as f64))
        .collect())
}

/// Half-up rounding to 4 decimals of the shortest round-trip decimal form.
pub fn round4(v: f64) -> String {
    if !v.is_finite() {
        return format!("{v}");
    }
    let s = format!("{}", v.abs());
    let (int_part, frac_part) = s.split_once('.').unwrap_or((&s, ""));
    let mut digits: Vec<u8> = int_part
        .bytes()
        .chain(frac_part.bytes().chain(std::iter::repeat(b'0')).take(4))
        .map(|b| b - b'0')
        .collect();
    let round_up = frac_part.as_bytes().get(4).is_some_and(|&b| b >= b'5');
    if round_up {
        let mut i = digits.len();
        loop {
            if i == 0 {
                digits.insert(0, 1);
                break;
            }
            i -= 1;
            if digits[i] == 9 {
                digits[i] = 0;
            } else {
                digits[i] += 1;
                break;
            }
        }
    }
    let split = digits.len() - 4;
    let int: String = digits[..split].iter().map(|d| (d + b'0') as char).collect();
    let frac: String = digits[split..].iter().map(|d| (d + b'0') as char).collect();
    let negative = v < 0.0 && digits.iter().any(|&d| d != 0);
    format!("{}{int}.{frac}", if negative { "-" } else { "" })
}

pub const METRICS_CSV_HEADER: &str = "model,test_set,accuracy,precision,recall,f1,threshold,provenance_hash";
pub const PER_CLASS_CSV_HEADER: &str = "class,model,accuracy";

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// One row per report; metrics at 4 decimals.
pub fn metrics_csv(reports: &[MetricsReport]) -> String {
    let mut out = String::from(METRICS_CSV_HEADER);
    out.push('\n');
    for r in reports {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            csv_field(&r.model),
            csv_field(&r.test_set),
            round4(r.accuracy),
            round4(r.precision),
            round4(r.recall),
            round4(r.f1),
            r.threshold,
            r.provenance_hash
        );
    }
    out
}

/// One row per (class, model) pair.
pub fn per_class_csv(reports: &[MetricsReport]) -> String {
    let mut out = String::from(PER_CLASS_CSV_HEADER);
    out.push('\n');
    for r in reports {
        for (class, acc) in &r.per_class_accuracy {
            let _ = writeln!(out, "{},{},{}", csv_field(class), csv_field(&r.model), round4(*acc));
        }
    }
    out
}

/// A parsed row of [`metrics_csv`] output.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub model: String,
    pub test_set: String,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub threshold: f64,
    pub provenance_hash: String,
}

pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if header.join(",") != METRICS_CSV_HEADER {
        return Err(Error::Parse {
            row: 1,
            message: format!("unexpected metrics header {:?}", header.join(",")),
        });
    }
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let num = |j: usize| -> Result<f64> {
            rec[j].parse().map_err(|_| Error::Parse {
                row: i + 2,
                message: format!("column {j}: not a number {:?}", &rec[j]),
            })
        };
        rows.push(MetricsRow {
            model: rec[0].to_string(),
            test_set: rec[1].to_string(),
            accuracy: num(2)?,
            precision: num(3)?,
            recall: num(4)?,
            f1: num(5)?,
            threshold: num(6)?,
            provenance_hash: rec[7].to_string(),
        });
    }
    Ok(rows)
}

fn aligned(header: &[String], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: &[String]| -> String {
        let mut s = String::new();
        for (i, (c, w)) in cells.iter().zip(&widths).enumerate() {
            if i == 0 {
                let _ = write!(s, "{c:<w$}");
            } else {
                let _ = write!(s, "  {c:>w$}");
            }
        }
        s.trim_end().to_string()
    };
    let mut out = line(header);
    out.push('\n');
    let total: usize = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
    out.push_str(&"-".repeat(total));
    out.push('\n');
    for row in rows {
        out.push_str(&line(row));
        out.push('\n');
    }
    out
}

impl From<&MetricsReport> for MetricsRow {
    fn from(r: &MetricsReport) -> Self {
        Self {
            model: r.model.clone(),
            test_set: r.test_set.clone(),
            accuracy: r.accuracy,
            precision: r.precision,
            recall: r.recall,
            f1: r.f1,
            threshold: r.threshold,
            provenance_hash: r.provenance_hash.clone(),
        }
    }
}

/// A parsed row of [`per_class_csv`] output.
#[derive(Debug, Clone, PartialEq)]
pub struct PerClassRow {
    pub class: String,
    pub model: String,
    pub accuracy: f64,
}

pub fn parse_per_class_csv(text: &str) -> Result<Vec<PerClassRow>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    if header.join(",") != PER_CLASS_CSV_HEADER {
        return Err(Error::Parse {
            row: 1,
            message: format!("unexpected per-class header {:?}", header.join(",")),
        });
    }
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        rows.push(PerClassRow {
            class: rec[0].to_string(),
            model: rec[1].to_string(),
            accuracy: rec[2].parse().map_err(|_| Error::Parse {
                row: i + 2,
                message: format!("not a number {:?}", &rec[2]),
            })?,
        });
    }
    Ok(rows)
}

/// Model x metric grid.
pub fn render_metric_rows(title: &str, rows: &[MetricsRow]) -> String {
    let header: Vec<String> = ["Model", "Accuracy", "Precision", "Recall", "F1-score"]
        .into_iter()
        .map(String::from)
        .collect();
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.model.clone(),
                round4(r.accuracy),
                round4(r.precision),
                round4(r.recall),
                round4(r.f1),
            ]
        })
        .collect();
    format!("{title}\n{}", aligned(&header, &cells))
}

/// Model x metric grid for one test set.
pub fn render_metrics_table(title: &str, reports: &[MetricsReport]) -> String {
    let rows: Vec<MetricsRow> = reports.iter().map(MetricsRow::from).collect();
    render_metric_rows(title, &rows)
}

/// Class x model grid; models keep first-seen order, missing entries print
/// as `-`.
pub fn render_per_class_rows(title: &str, rows: &[PerClassRow]) -> String {
    let mut models: Vec<&str> = Vec::new();
    let mut grid: BTreeMap<&str, BTreeMap<&str, f64>> = BTreeMap::new();
    for r in rows {
        if !models.contains(&r.model.as_str()) {
            models.push(&r.model);
        }
        grid.entry(&r.class).or_default().insert(&r.model, r.accuracy);
    }
    let mut header = vec!["Class".to_string()];
    header.extend(models.iter().map(|m| m.to_string()));
    let cells: Vec<Vec<String>> = grid
        .into_iter()
        .map(|(class, by_model)| {
            let mut row = vec![class.to_string()];
            row.extend(
                models
                    .iter()
                    .map(|m| by_model.get(m).map_or_else(|| "-".to_string(), |v| round4(*v))),
            );
            row
        })
        .collect();
    format!("{title}\n{}", aligned(&header, &cells))
}

/// Class x model grid of per-class accuracy.
pub fn render_per_class_table(title: &str, reports: &[MetricsReport]) -> String {
    let rows: Vec<PerClassRow> = reports
        .iter()
        .flat_map(|r| {
            r.per_class_accuracy.iter().map(|(c, a)| PerClassRow {
                class: c.clone(),
                model: r.model.clone(),
                accuracy: *a,
            })
        })
        .collect();
    render_per_class_rows(title, &rows)
}

/// Rendered tables for every test set present in `reports`, grouped in
/// first-seen order.
pub fn render_tables(reports: &[MetricsReport]) -> String {
    let mut sets: Vec<&str> = Vec::new();
    for r in reports {
        if !sets.contains(&r.test_set.as_str()) {
            sets.push(&r.test_set);
        }
    }
    let mut out = String::new();
    for set in sets {
        let group: Vec<MetricsReport> = reports
            .iter()
            .filter(|r| r.test_set == set)
            .cloned()
            .collect();
        out.push_str(&render_metrics_table(&format!("Performance on {set}"), &group));
        out.push('\n');
        if group.iter().any(|r| !r.per_class_accuracy.is_empty()) {
            out.push_str(&render_per_class_table(
                &format!("Per-class accuracy on {set}"),
                &group,
            ));
            out.push('\n');
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confusion_example() {
        let cm = confusion(&[0, 0, 1, 1], &[0, 1, 1, 1]).unwrap();
        assert_eq!(cm, ConfusionMatrix::new(2, 1, 1, 0));
        assert!(confusion(&[0, 1], &[0]).is_err());
        assert!(confusion(&[2], &[0]).is_err());
    }

    #[test]
    fn perfect_predictions() {
        let y = [0u8, 1, 1, 0, 1];
        let cm = confusion(&y, &y).unwrap();
        assert_eq!((cm.fp, cm.fn_), (0, 0));
        assert_eq!(metrics(&cm).unwrap().accuracy, 1.0);
    }

    #[test]
    fn degenerate_denominators() {
        let m = metrics(&ConfusionMatrix::new(0, 0, 5, 0)).unwrap();
        assert_eq!(m.accuracy, 1.0);
        assert_eq!((m.precision, m.recall, m.f1), (0.0, 0.0, 0.0));
        assert!(m.degenerate.precision && m.degenerate.recall && m.degenerate.f1);
        assert!(metrics(&ConfusionMatrix::default()).is_err());
    }

    #[test]
    fn per_class_semantics() {
        let classes = ["BENIGN", "BENIGN", "DDoS", "DDoS", "Bot"];
        let pred = [0u8, 1, 1, 1, 0];
        let acc = per_class_accuracy(&classes, &pred, "BENIGN").unwrap();
        assert_eq!(acc["BENIGN"], 0.5);
        assert_eq!(acc["DDoS"], 1.0);
        assert_eq!(acc["Bot"], 0.0);
        assert!(!acc.contains_key("PortScan"));
    }

    #[test]
    fn half_up_rounding() {
        assert_eq!(round4(0.12345), "0.1235");
        assert_eq!(round4(0.12344), "0.1234");
        assert_eq!(round4(0.99995), "1.0000");
        assert_eq!(round4(1.0), "1.0000");
        assert_eq!(round4(0.0), "0.0000");
        assert_eq!(round4(-0.00004), "0.0000");
        assert_eq!(round4(-2.5), "-2.5000");
        assert_eq!(round4(1e-7), "0.0000");
    }

    #[test]
    fn tables_have_one_row_per_report() {
        let mut r = metrics(&ConfusionMatrix::new(3, 1, 5, 1)).unwrap();
        r.model = "MLP".into();
        r.test_set = "overall".into();
        let table = render_metrics_table("t", &[r.clone()]);
        assert_eq!(table.lines().count(), 4);
        let csv = metrics_csv(&[r.clone(), r]);
        assert_eq!(csv.lines().count(), 3);
    }
}
