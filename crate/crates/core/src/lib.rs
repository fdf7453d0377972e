//! Importance-weighted training under subpopulation shift.
//!
//! Closed-form correction weights for training sets whose label/attribute
//! mix differs from the test law, three estimators of the one unknown those
//! weights need, a weighted softmax trainer, synthetic data generators and an
//! exact enumeration oracle for discrete models.

pub mod data;
pub mod error;
pub mod estimators;
pub mod eval;
pub mod io;
pub mod oracle;
pub mod synthgen;
pub mod trainer;
pub mod weights;

pub use data::{Dataset, DatasetRole, Group, RunRecord, Sample, TrainStats};
pub use error::{DbaError, Result};
