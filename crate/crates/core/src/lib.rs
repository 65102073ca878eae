//! Cross-modal deep hashing with an information-bottleneck regularizer.
//!
//! Three MLP encoders map labels, modality-1 features and modality-2
//! features into a shared `{-1, +1}^c` code space. The modality encoders are
//! trained against label-derived codes, with a matrix-based Rényi mutual
//! information penalty that discourages codes from carrying input detail
//! unrelated to the labels. Codes are packed into `u64` words and searched
//! by Hamming distance; retrieval quality is measured by MAP.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the common choices.

mod binio;
pub mod dataio;
pub mod error;
pub mod eval;
pub mod hamming;
pub mod losses;
pub mod nets;
pub mod numkit;
pub mod optim;
pub mod renyi;
pub mod scalar;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Matrix64 = numkit::Matrix<f64>;
pub type Matrix32 = numkit::Matrix<f32>;
pub type Mlp64 = nets::Mlp<f64>;
pub type Mlp32 = nets::Mlp<f32>;
pub type Dataset64 = dataio::DatasetBundle<f64>;
pub type Dataset32 = dataio::DatasetBundle<f32>;
pub type TrainState64 = trainer::TrainState<f64>;
pub type TrainState32 = trainer::TrainState<f32>;
