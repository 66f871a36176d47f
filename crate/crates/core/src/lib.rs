//! Multi-view deep one-class classification toolkit.
//!
//! Trains a model on data from a single positive class, described by two or
//! more views (feature sets), and scores test data by how anomalous each view
//! looks. Higher score = more anomalous; the detection target is the negative
//! class (label -1).
//!
//! The crate is self-contained: dense f64 tensors, a reverse-mode autodiff
//! tape, MLP encoders/decoders with Adam, four fusion functions (SUM, MAX,
//! NN, low-rank TF), three alignment measures (DIS, SIM, DCCA), two tailored
//! deep OCC models (DAE, DSVDD) and two cross-view prediction tasks (PPRD,
//! SPRD), plus late fusion, threshold-free metrics and dataset handling.

pub mod alignment;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod methods;
pub mod nn;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::Tensor;
