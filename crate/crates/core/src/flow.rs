//! Flow-record data model, CSV ingestion and cleaning.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::{Read, Write};

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Default name of the class column in CICIDS2017 exports.
pub const DEFAULT_LABEL_COLUMN: &str = "Label";

/// One flow: its numeric features and class label.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowRecord {
    pub features: Vec<f64>,
    pub label: String,
}

/// An ordered, immutable collection of flow records sharing one feature layout.
///
/// Features are stored row-major in a single matrix; labels are class
/// ordinals into `classes`, which lists class names in order of first
/// appearance.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    feature_names: Vec<String>,
    features: Array2<f64>,
    labels: Vec<u32>,
    classes: Vec<String>,
    duplicate_columns: Vec<usize>,
}

impl LabeledDataset {
    /// Builds a dataset from a feature matrix and one label per row.
    pub fn new<S: AsRef<str>>(
        feature_names: Vec<String>,
        features: Array2<f64>,
        labels: &[S],
    ) -> Result<Self> {
        if features.ncols() != feature_names.len() {
            return Err(Error::DimensionMismatch {
                expected: feature_names.len(),
                got: features.ncols(),
            });
        }
        if features.nrows() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: features.nrows(),
                got: labels.len(),
            });
        }
        let mut seen = HashSet::new();
        for name in &feature_names {
            if !seen.insert(name.as_str()) {
                return Err(Error::Config(format!("duplicate feature name {name:?}")));
            }
        }
        let (labels, classes) = intern_labels(labels.iter().map(|l| l.as_ref()));
        Ok(Self {
            feature_names,
            features,
            labels,
            classes,
            duplicate_columns: Vec::new(),
        })
    }

    pub fn from_records(feature_names: Vec<String>, records: &[FlowRecord]) -> Result<Self> {
        let d = feature_names.len();
        let mut data = Vec::with_capacity(records.len() * d);
        for r in records {
            if r.features.len() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: r.features.len(),
                });
            }
            data.extend_from_slice(&r.features);
        }
        let features = Array2::from_shape_vec((records.len(), d), data)
            .map_err(|e| Error::InvalidInput(e.to_string()))?;
        let labels: Vec<&str> = records.iter().map(|r| r.label.as_str()).collect();
        Self::new(feature_names, features, &labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn features(&self) -> ArrayView2<'_, f64> {
        self.features.view()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.features.row(i)
    }

    pub fn label(&self, i: usize) -> &str {
        &self.classes[self.labels[i] as usize]
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> + '_ {
        self.labels.iter().map(|&c| self.classes[c as usize].as_str())
    }

    /// Class names in order of first appearance.
    pub fn classes(&self) -> &[String] {
        &self.classes
    }

    pub fn class_index(&self) -> BTreeMap<String, usize> {
        self.classes
            .iter()
            .enumerate()
            .map(|(i, c)| (c.clone(), i))
            .collect()
    }

    pub fn record(&self, i: usize) -> FlowRecord {
        FlowRecord {
            features: self.features.row(i).to_vec(),
            label: self.label(i).to_string(),
        }
    }

    /// Columns that were renamed on ingest because their header repeated an
    /// earlier name.
    pub fn duplicate_columns(&self) -> &[usize] {
        &self.duplicate_columns
    }

    /// Binary targets: 0 for `benign_label`, 1 for everything else.
    pub fn binary_targets(&self, benign_label: &str) -> Vec<u8> {
        self.labels().map(|l| u8::from(l != benign_label)).collect()
    }

    /// New dataset containing the given rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let features = self.features.select(Axis(0), rows);
        let (labels, classes) = intern_labels(rows.iter().map(|&r| self.label(r)));
        Self {
            feature_names: self.feature_names.clone(),
            features,
            labels,
            classes,
            duplicate_columns: self.duplicate_columns.clone(),
        }
    }

    /// SHA-256 over names, labels and the exact bit patterns of every feature.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.n_features() as u64).to_le_bytes());
        for name in &self.feature_names {
            h.update((name.len() as u64).to_le_bytes());
            h.update(name.as_bytes());
        }
        h.update((self.len() as u64).to_le_bytes());
        for (i, row) in self.features.outer_iter().enumerate() {
            for v in row {
                h.update(v.to_bits().to_le_bytes());
            }
            let label = self.label(i);
            h.update((label.len() as u64).to_le_bytes());
            h.update(label.as_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Writes the canonical CSV form: feature columns then `Label`, floats in
    /// shortest round-trip notation.
    pub fn write_csv<W: Write>(&self, sink: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        let mut header: Vec<&str> = self.feature_names.iter().map(String::as_str).collect();
        header.push(DEFAULT_LABEL_COLUMN);
        w.write_record(&header)?;
        let mut cells = Vec::with_capacity(self.n_features() + 1);
        for (i, row) in self.features.outer_iter().enumerate() {
            cells.clear();
            cells.extend(row.iter().map(|v| format_float(*v)));
            cells.push(self.label(i).to_string());
            w.write_record(&cells)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn intern_labels<'a>(labels: impl Iterator<Item = &'a str>) -> (Vec<u32>, Vec<String>) {
    let mut classes: Vec<String> = Vec::new();
    let mut index: HashMap<&str, u32> = HashMap::new();
    let mut out = Vec::new();
    for l in labels {
        let id = match index.get(l) {
            Some(&id) => id,
            None => {
                let id = classes.len() as u32;
                classes.push(l.to_string());
                index.insert(l, id);
                id
            }
        };
        out.push(id);
    }
    (out, classes)
}

fn format_float(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else if v.is_infinite() {
        if v > 0.0 { "Infinity" } else { "-Infinity" }.into()
    } else {
        format!("{v}")
    }
}

fn parse_cell(raw: &[u8]) -> Option<f64> {
    let s = std::str::from_utf8(raw).ok()?.trim();
    if s.is_empty() {
        return Some(f64::NAN);
    }
    match s {
        "NaN" | "nan" => Some(f64::NAN),
        "Infinity" | "inf" | "+Infinity" => Some(f64::INFINITY),
        "-Infinity" | "-inf" => Some(f64::NEG_INFINITY),
        _ => {
            // Reject the other spellings `f64::from_str` would accept.
            if s.bytes().any(|b| b.is_ascii_alphabetic() && b != b'e' && b != b'E') {
                return None;
            }
            s.parse().ok()
        }
    }
}

/// Parses a header-bearing comma-separated flow export.
///
/// Header names are trimmed. A header that repeats an earlier name is renamed
/// `name.1`, `name.2`, ... and remembered so [`clean`] can drop it. Empty
/// cells read as NaN; `NaN` and `Infinity` tokens are accepted.
pub fn parse_flow_csv<R: Read>(source: R, label_column: &str) -> Result<LabeledDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .has_headers(true)
        .from_reader(source);
    let header = reader.byte_headers()?.clone();
    let names: Vec<String> = header
        .iter()
        .map(|h| String::from_utf8_lossy(h).trim().to_string())
        .collect();
    let label_col = names
        .iter()
        .position(|n| n == label_column.trim())
        .ok_or_else(|| Error::Config(format!("label column {label_column:?} not found in header")))?;

    let mut feature_names = Vec::with_capacity(names.len() - 1);
    let mut duplicate_columns = Vec::new();
    let mut taken: HashSet<String> = HashSet::new();
    for (i, name) in names.iter().enumerate() {
        if i == label_col {
            continue;
        }
        let mut unique = name.clone();
        if taken.contains(&unique) {
            let mut n = 1;
            while taken.contains(&format!("{name}.{n}")) {
                n += 1;
            }
            unique = format!("{name}.{n}");
            duplicate_columns.push(feature_names.len());
        }
        taken.insert(unique.clone());
        feature_names.push(unique);
    }

    let d = feature_names.len();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut record = csv::ByteRecord::new();
    while reader.read_byte_record(&mut record)? {
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        if record.len() != names.len() {
            return Err(Error::Parse {
                row: line,
                message: format!("expected {} fields, found {}", names.len(), record.len()),
            });
        }
        for (i, cell) in record.iter().enumerate() {
            if i == label_col {
                labels.push(String::from_utf8_lossy(cell).trim().to_string());
                continue;
            }
            let v = parse_cell(cell).ok_or_else(|| Error::Parse {
                row: line,
                message: format!(
                    "column {:?}: non-numeric value {:?}",
                    names[i],
                    String::from_utf8_lossy(cell)
                ),
            })?;
            data.push(v);
        }
    }
    let features = Array2::from_shape_vec((labels.len(), d), data)
        .map_err(|e| Error::InvalidInput(e.to_string()))?;
    let mut ds = LabeledDataset::new(feature_names, features, &labels)?;
    ds.duplicate_columns = duplicate_columns;
    Ok(ds)
}

/// What [`clean`] changed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CleanReport {
    pub rows_in: usize,
    pub rows_dropped_nonfinite: usize,
    pub columns_dropped_duplicate: Vec<String>,
    pub rows_out: usize,
}

impl fmt::Display for CleanReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "rows_in = {}", self.rows_in)?;
        writeln!(f, "rows_dropped_nonfinite = {}", self.rows_dropped_nonfinite)?;
        writeln!(
            f,
            "columns_dropped_duplicate = {}",
            self.columns_dropped_duplicate.join(";")
        )?;
        writeln!(f, "rows_out = {}", self.rows_out)
    }
}

/// Drops rows with any non-finite feature and columns renamed as duplicates.
/// Values are never imputed.
pub fn clean(dataset: &LabeledDataset) -> Result<(LabeledDataset, CleanReport)> {
    let dropped_cols: HashSet<usize> = dataset.duplicate_columns.iter().copied().collect();
    let keep_cols: Vec<usize> = (0..dataset.n_features())
        .filter(|j| !dropped_cols.contains(j))
        .collect();
    let keep_rows: Vec<usize> = dataset
        .features
        .outer_iter()
        .enumerate()
        .filter(|(_, row)| keep_cols.iter().all(|&j| row[j].is_finite()))
        .map(|(i, _)| i)
        .collect();

    let report = CleanReport {
        rows_in: dataset.len(),
        rows_dropped_nonfinite: dataset.len() - keep_rows.len(),
        columns_dropped_duplicate: dataset
            .duplicate_columns
            .iter()
            .map(|&j| dataset.feature_names[j].clone())
            .collect(),
        rows_out: keep_rows.len(),
    };
    if keep_rows.is_empty() {
        return Err(Error::EmptyDataset("no rows survive cleaning".into()));
    }

    let features = dataset
        .features
        .select(Axis(0), &keep_rows)
        .select(Axis(1), &keep_cols);
    let (labels, classes) = intern_labels(keep_rows.iter().map(|&r| dataset.label(r)));
    let cleaned = LabeledDataset {
        feature_names: keep_cols
            .iter()
            .map(|&j| dataset.feature_names[j].clone())
            .collect(),
        features,
        labels,
        classes,
        duplicate_columns: Vec::new(),
    };
    Ok((cleaned, report))
}

/// Number of records per class label.
pub fn label_counts(dataset: &LabeledDataset) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for l in dataset.labels() {
        *counts.entry(l.to_string()).or_insert(0) += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<LabeledDataset> {
        parse_flow_csv(text.as_bytes(), "Label")
    }

    #[test]
    fn parses_small_file_in_order() {
        let ds = parse("a,b,Label\n1,2,BENIGN\n3,4,DDoS\n5,6,BENIGN\n").unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.n_features(), 2);
        assert_eq!(ds.feature_names(), ["a", "b"]);
        assert_eq!(ds.record(1).features, vec![3.0, 4.0]);
        assert_eq!(ds.labels().collect::<Vec<_>>(), ["BENIGN", "DDoS", "BENIGN"]);
    }

    #[test]
    fn trims_header_and_label_whitespace() {
        let ds = parse(" Flow Duration, Total Fwd Packets, Label\n1,2, DoS Hulk \n").unwrap();
        assert_eq!(ds.feature_names(), ["Flow Duration", "Total Fwd Packets"]);
        assert_eq!(ds.label(0), "DoS Hulk");
    }

    #[test]
    fn duplicate_header_gets_suffix() {
        let ds = parse("x,x,Label\n1,1,A\n").unwrap();
        assert_eq!(ds.feature_names(), ["x", "x.1"]);
        assert_eq!(ds.duplicate_columns(), [1]);
        let (cleaned, report) = clean(&ds).unwrap();
        assert_eq!(cleaned.feature_names(), ["x"]);
        assert_eq!(report.columns_dropped_duplicate, vec!["x.1".to_string()]);
    }

    #[test]
    fn missing_label_column_is_config_error() {
        assert!(matches!(parse("a,b\n1,2\n"), Err(Error::Config(_))));
    }

    #[test]
    fn ragged_row_reports_line() {
        match parse("a,b,Label\n1,2,A\n1,A\n") {
            Err(Error::Parse { row, .. }) => assert_eq!(row, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_numeric_cell_rejected() {
        assert!(matches!(parse("a,Label\nhello,A\n"), Err(Error::Parse { .. })));
        assert!(matches!(parse("a,Label\ninfinity,A\n"), Err(Error::Parse { .. })));
    }

    #[test]
    fn sentinels_accepted_and_cleaned() {
        let ds = parse("a,b,Label\n1,2,A\n1,Infinity,A\n3,NaN,B\n4,5,B\n6,7,A\n").unwrap();
        let (cleaned, report) = clean(&ds).unwrap();
        assert_eq!(report.rows_in, 5);
        assert_eq!(report.rows_dropped_nonfinite, 2);
        assert_eq!(report.rows_out, 3);
        assert_eq!(cleaned.record(1).features, vec![4.0, 5.0]);
        assert!(cleaned.features().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn clean_is_noop_on_finite_data() {
        let ds = parse("a,Label\n1,A\n2,B\n").unwrap();
        let (cleaned, report) = clean(&ds).unwrap();
        assert_eq!(cleaned, ds);
        assert_eq!(report.rows_dropped_nonfinite, 0);
    }

    #[test]
    fn clean_rejects_all_nonfinite() {
        let ds = parse("a,Label\nNaN,A\n").unwrap();
        assert!(matches!(clean(&ds), Err(Error::EmptyDataset(_))));
    }

    #[test]
    fn counts_labels() {
        let mut text = String::from("a,Label\n");
        for i in 0..15 {
            text.push_str(&format!("{i},{}\n", if i < 10 { "A" } else { "B" }));
        }
        let counts = label_counts(&parse(&text).unwrap());
        assert_eq!(counts["A"], 10);
        assert_eq!(counts["B"], 5);
        assert!(label_counts(&parse("a,Label\n").unwrap()).is_empty());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let ds = parse("a,b,Label\n0.1,1e-300,A\n-3.25,123456789.125,B\n").unwrap();
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let again = parse_flow_csv(buf.as_slice(), "Label").unwrap();
        assert_eq!(again.content_hash(), ds.content_hash());
    }
}
