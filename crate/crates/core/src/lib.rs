//! Robust federated aggregation.
//!
//! The aggregation step of federated averaging is replaced by an approximate
//! weighted geometric median, computed by the smoothed Weiszfeld iteration
//! through a call-counted secure average oracle. Around it sit a deterministic
//! federated-learning simulator, corruption models and synthetic tasks.
//!
//! Numeric code is generic over [`Scalar`] (`f32` / `f64`); the aliases at the
//! crate root fix the scalar to `f64` for the common case.

pub mod corruption;
pub mod error;
pub mod fl;
pub mod geomed;
pub mod linalg;
pub mod scalar;
pub mod secure_avg;
pub mod tasks;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use secure_avg::{Contribution, OracleMode, SecureAverageOracle};

pub type PointSet = geomed::WeightedPointSet<f64>;
pub type GmResult = geomed::GmResult<f64>;
pub type WeiszfeldConfig = geomed::WeiszfeldConfig<f64>;
pub type Dataset = tasks::Dataset<f64>;
pub type FederatedTask = tasks::FederatedTask<f64>;
pub type RunOutput = fl::RunOutput<f64>;
pub type DoublingReport = fl::DoublingReport<f64>;
