//! Flow-record anomaly detection toolkit.
//!
//! Four detectors share one contract ([`detector::Detector`]): a supervised
//! MLP and 1-D CNN trained on benign plus known-attack flows, and a
//! one-class SVM and Local Outlier Factor trained on benign flows only. The
//! [`split`] module builds the known/unknown-attack evaluation sets, and
//! [`eval`] turns predictions into confusion matrices and report tables.

pub mod bench;
pub mod cnn;
pub mod detector;
pub mod error;
pub mod eval;
pub mod flow;
pub mod kdtree;
pub mod lof;
pub mod loss;
pub mod mlp;
pub mod model_io;
pub mod ocsvm;
pub mod pipeline;
pub mod oracle;
pub mod rng;
pub mod scaler;
pub mod split;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
