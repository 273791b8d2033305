//! Versioned model files.
//!
//! A file is one magic line `FLOWGATE-MODEL <version>` followed by a JSON
//! document. Floats round-trip exactly; non-finite values are written as the
//! strings `"inf"`, `"-inf"` and `"nan"`. Files from a newer format version
//! are rejected rather than guessed at.

use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cnn::{Cnn1DModel, CnnArchitecture};
use crate::detector::{Detector, DetectorKind};
use crate::error::{Error, Result};
use crate::lof::LofModel;
use crate::loss::FocalLossConfig;
use crate::mlp::MlpModel;
use crate::ocsvm::OcsvmModel;
use crate::scaler::{apply_scaler, ScalerParams};
use crate::train::Trainable;

pub const MAGIC: &str = "FLOWGATE-MODEL";
pub const FORMAT_VERSION: u32 = 1;

mod floats {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    fn encode(v: f64) -> Repr {
        if v.is_finite() {
            Repr::Num(v)
        } else if v.is_nan() {
            Repr::Text("nan".into())
        } else if v > 0.0 {
            Repr::Text("inf".into())
        } else {
            Repr::Text("-inf".into())
        }
    }

    fn decode<E: serde::de::Error>(r: Repr) -> Result<f64, E> {
        match r {
            Repr::Num(v) => Ok(v),
            Repr::Text(s) => match s.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(E::custom(format!("unexpected float token {other:?}"))),
            },
        }
    }

    pub fn serialize<S: Serializer>(v: &[f64], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter().map(|x| encode(*x)))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<f64>, D::Error> {
        Vec::<Repr>::deserialize(d)?.into_iter().map(decode).collect()
    }
}

/// Row-major matrix for the file body.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Matrix {
    rows: usize,
    cols: usize,
    #[serde(with = "floats")]
    data: Vec<f64>,
}

impl Matrix {
    fn from_array(a: &Array2<f64>) -> Self {
        Self {
            rows: a.nrows(),
            cols: a.ncols(),
            data: a.iter().copied().collect(),
        }
    }

    fn into_array(self) -> Result<Array2<f64>> {
        Array2::from_shape_vec((self.rows, self.cols), self.data)
            .map_err(|e| Error::ModelFormat(format!("bad matrix shape: {e}")))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum Body {
    Mlp {
        layer_sizes: Vec<usize>,
        #[serde(with = "floats")]
        params: Vec<f64>,
    },
    Cnn1d {
        input_len: usize,
        architecture: CnnArchitecture,
        focal: FocalLossConfig,
        #[serde(with = "floats")]
        params: Vec<f64>,
    },
    Ocsvm {
        gamma: f64,
        nu: f64,
        rho: f64,
        n_train: usize,
        iterations: usize,
        kkt_residual: f64,
        #[serde(with = "floats")]
        alphas: Vec<f64>,
        support_vectors: Matrix,
    },
    Lof {
        k: usize,
        leaf_size: usize,
        train: Matrix,
        #[serde(with = "floats")]
        k_distance: Vec<f64>,
        #[serde(with = "floats")]
        lrd: Vec<f64>,
    },
}

/// Where a model's training data came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelProvenance {
    /// Name of the split subset the model was fit on.
    pub training_subset: String,
    /// Content hash of that subset as written by the split step.
    pub training_hash: String,
    /// Rows actually used, after any subsampling.
    pub training_rows: usize,
    pub subsample: Option<usize>,
    pub seed: u64,
    pub feature_names: Vec<String>,
    pub tool_version: String,
    /// Snapshot of the detector configuration.
    pub config: serde_json::Value,
}

#[derive(Debug, Clone)]
pub enum TrainedModel {
    Mlp(MlpModel),
    Cnn(Cnn1DModel),
    Ocsvm(OcsvmModel),
    Lof(LofModel),
}

impl TrainedModel {
    pub fn input_dim(&self) -> usize {
        match self {
            TrainedModel::Mlp(m) => m.input_dim(),
            TrainedModel::Cnn(m) => m.input_len,
            TrainedModel::Ocsvm(m) => m.dim(),
            TrainedModel::Lof(m) => m.dim(),
        }
    }

    fn body(&self) -> Body {
        match self {
            TrainedModel::Mlp(m) => Body::Mlp {
                layer_sizes: m.layer_sizes(),
                params: m.flat_params(),
            },
            TrainedModel::Cnn(m) => Body::Cnn1d {
                input_len: m.input_len,
                architecture: m.architecture.clone(),
                focal: m.focal,
                params: m.flat_params(),
            },
            TrainedModel::Ocsvm(m) => Body::Ocsvm {
                gamma: m.gamma,
                nu: m.nu,
                rho: m.rho,
                n_train: m.n_train,
                iterations: m.iterations,
                kkt_residual: m.kkt_residual,
                alphas: m.alphas.clone(),
                support_vectors: Matrix::from_array(&m.support_vectors),
            },
            TrainedModel::Lof(m) => Body::Lof {
                k: m.k(),
                leaf_size: m.leaf_size(),
                train: Matrix::from_array(m.train()),
                k_distance: m.k_distances().to_vec(),
                lrd: m.training_lrd().to_vec(),
            },
        }
    }

    fn from_body(body: Body) -> Result<Self> {
        Ok(match body {
            Body::Mlp {
                layer_sizes,
                params,
            } => TrainedModel::Mlp(MlpModel::from_flat(&layer_sizes, &params)?),
            Body::Cnn1d {
                input_len,
                architecture,
                focal,
                params,
            } => TrainedModel::Cnn(Cnn1DModel::from_flat(input_len, &architecture, focal, &params)?),
            Body::Ocsvm {
                gamma,
                nu,
                rho,
                n_train,
                iterations,
                kkt_residual,
                alphas,
                support_vectors,
            } => {
                let support_vectors = support_vectors.into_array()?;
                if support_vectors.nrows() != alphas.len() {
                    return Err(Error::ModelFormat(
                        "support vector count does not match alphas".into(),
                    ));
                }
                TrainedModel::Ocsvm(OcsvmModel {
                    support_vectors,
                    alphas,
                    rho,
                    gamma,
                    nu,
                    n_train,
                    iterations,
                    kkt_residual,
                })
            }
            Body::Lof {
                k,
                leaf_size,
                train,
                k_distance,
                lrd,
            } => TrainedModel::Lof(LofModel::from_parts(train.into_array()?, k, leaf_size, k_distance, lrd)?),
        })
    }
}

impl Detector for TrainedModel {
    fn kind(&self) -> DetectorKind {
        match self {
            TrainedModel::Mlp(_) => DetectorKind::Mlp,
            TrainedModel::Cnn(_) => DetectorKind::Cnn1d,
            TrainedModel::Ocsvm(_) => DetectorKind::Ocsvm,
            TrainedModel::Lof(_) => DetectorKind::Lof,
        }
    }

    fn score(&self, x: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        match self {
            TrainedModel::Mlp(m) => m.score(x),
            TrainedModel::Cnn(m) => m.score(x),
            TrainedModel::Ocsvm(m) => m.score(x),
            TrainedModel::Lof(m) => m.score(x),
        }
    }
}

/// SHA-256 hex digest of a serialized model file.
pub fn file_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Serialize, Deserialize)]
struct FileDoc {
    format_version: u32,
    scaler: ScalerParams,
    scaler_hash: String,
    provenance: ModelProvenance,
    model: Body,
}

/// A trained detector together with the scaler it expects raw features to
/// pass through.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub model: TrainedModel,
    pub scaler: ScalerParams,
    pub provenance: ModelProvenance,
}

impl ModelBundle {
    pub fn new(model: TrainedModel, scaler: ScalerParams, provenance: ModelProvenance) -> Result<Self> {
        if scaler.dim() != model.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: model.input_dim(),
                got: scaler.dim(),
            });
        }
        Ok(Self {
            model,
            scaler,
            provenance,
        })
    }

    pub fn kind(&self) -> DetectorKind {
        self.model.kind()
    }

    /// Scales raw feature rows and scores them.
    pub fn score_raw(&self, x: ArrayView2<'_, f64>) -> Result<Vec<f64>> {
        let scaled = apply_scaler(&self.scaler, x)?;
        self.model.score(scaled.view())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let doc = FileDoc {
            format_version: FORMAT_VERSION,
            scaler: self.scaler.clone(),
            scaler_hash: self.scaler.content_hash(),
            provenance: self.provenance.clone(),
            model: self.model.body(),
        };
        let mut out = format!("{MAGIC} {FORMAT_VERSION}\n").into_bytes();
        serde_json::to_writer(&mut out, &doc).map_err(|e| Error::ModelFormat(e.to_string()))?;
        out.push(b'\n');
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let text = std::str::from_utf8(bytes).map_err(|_| Error::ModelFormat("model file is not UTF-8".into()))?;
        let (header, body) = text
            .split_once('\n')
            .ok_or_else(|| Error::ModelFormat("missing header line".into()))?;
        let version = header
            .strip_prefix(MAGIC)
            .and_then(|rest| rest.trim().parse::<u32>().ok())
            .ok_or_else(|| Error::ModelFormat("not a flowgate model file".into()))?;
        if version > FORMAT_VERSION {
            return Err(Error::ModelFormat(format!(
                "model format version {version} is newer than supported version {FORMAT_VERSION}"
            )));
        }
        let doc: FileDoc = serde_json::from_str(body).map_err(|e| Error::ModelFormat(e.to_string()))?;
        if doc.format_version != version {
            return Err(Error::ModelFormat("header and body versions disagree".into()));
        }
        if doc.scaler.content_hash() != doc.scaler_hash {
            return Err(Error::Provenance("stored scaler does not match its recorded hash".into()));
        }
        Self::new(TrainedModel::from_body(doc.model)?, doc.scaler, doc.provenance)
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes()?;
        fs::write(path, &bytes)?;
        Ok(file_hash(&bytes))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lof::{fit_lof, LofConfig};
    use crate::ocsvm::{fit_ocsvm, OcsvmConfig};
    use crate::scaler::fit_scaler;
    use ndarray::array;

    fn provenance() -> ModelProvenance {
        ModelProvenance {
            training_subset: "benign_train".into(),
            training_hash: "abc".into(),
            training_rows: 6,
            subsample: None,
            seed: 42,
            feature_names: vec!["a".into(), "b".into()],
            tool_version: "test".into(),
            config: serde_json::Value::Null,
        }
    }

    fn data() -> Array2<f64> {
        array![[0.0, 0.0], [0.0, 0.0], [1.0, 0.5], [0.2, 0.1], [3.0, 2.0], [0.5, 0.5]]
    }

    fn round_trip(model: TrainedModel) {
        let x = data();
        let bundle = ModelBundle::new(model, fit_scaler(x.view()).unwrap(), provenance()).unwrap();
        let back = ModelBundle::from_bytes(&bundle.to_bytes().unwrap()).unwrap();
        let probe = array![[0.1, 0.2], [5.0, -1.0], [0.0, 0.0]];
        assert_eq!(bundle.score_raw(probe.view()).unwrap(), back.score_raw(probe.view()).unwrap());
        assert_eq!(back.provenance, bundle.provenance);
        assert_eq!(bundle.to_bytes().unwrap(), back.to_bytes().unwrap());
    }

    #[test]
    fn every_kind_round_trips_bit_exactly() {
        let x = data();
        round_trip(TrainedModel::Mlp(MlpModel::new(2, &[3], 1)));
        round_trip(TrainedModel::Cnn(
            Cnn1DModel::new(
                2,
                &CnnArchitecture {
                    blocks: vec![crate::cnn::ConvBlockSpec {
                        filters: 2,
                        kernel: 1,
                        pool: 1,
                        stride: 1,
                    }],
                    dense_units: 3,
                    dropout: 0.0,
                },
                FocalLossConfig::default(),
                1,
            )
            .unwrap(),
        ));
        round_trip(TrainedModel::Ocsvm(fit_ocsvm(x.view(), &OcsvmConfig::default()).unwrap()));
        // The duplicated origin gives it an infinite lrd.
        let lof = fit_lof(x.view(), &LofConfig { k: 1, ..LofConfig::default() }).unwrap();
        assert!(lof.training_lrd().iter().any(|v| v.is_infinite()));
        round_trip(TrainedModel::Lof(lof));
    }

    #[test]
    fn newer_version_fails_closed() {
        let x = data();
        let bundle = ModelBundle::new(
            TrainedModel::Mlp(MlpModel::new(2, &[3], 1)),
            fit_scaler(x.view()).unwrap(),
            provenance(),
        )
        .unwrap();
        let text = String::from_utf8(bundle.to_bytes().unwrap()).unwrap();
        let bumped = text.replacen(&format!("{MAGIC} 1"), &format!("{MAGIC} 2"), 1);
        let err = ModelBundle::from_bytes(bumped.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("newer"));
    }

    #[test]
    fn corrupted_files_are_rejected() {
        assert!(ModelBundle::from_bytes(b"garbage").is_err());
        assert!(ModelBundle::from_bytes(b"FLOWGATE-MODEL 1\n{\"format_version\":1}").is_err());
        let x = data();
        let bundle = ModelBundle::new(
            TrainedModel::Mlp(MlpModel::new(2, &[3], 1)),
            fit_scaler(x.view()).unwrap(),
            provenance(),
        )
        .unwrap();
        let bytes = bundle.to_bytes().unwrap();
        let truncated = &bytes[..bytes.len() / 2];
        assert!(ModelBundle::from_bytes(truncated).is_err());
    }

    #[test]
    fn tampered_scaler_is_rejected() {
        let x = data();
        let bundle = ModelBundle::new(
            TrainedModel::Mlp(MlpModel::new(2, &[3], 1)),
            fit_scaler(x.view()).unwrap(),
            provenance(),
        )
        .unwrap();
        let mut doc: serde_json::Value = {
            let text = String::from_utf8(bundle.to_bytes().unwrap()).unwrap();
            serde_json::from_str(text.split_once('\n').unwrap().1).unwrap()
        };
        doc["scaler"]["mean"][0] = serde_json::json!(123.0);
        let forged = format!("{MAGIC} 1\n{doc}");
        assert!(matches!(ModelBundle::from_bytes(forged.as_bytes()), Err(Error::Provenance(_))));
    }
}
