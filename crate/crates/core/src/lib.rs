//! Privacy-audited adversarial training at desk scale.
//!
//! The crate trains small ReLU classifiers with standard, PGD-AT or TRADES
//! objectives, optionally adding the DeMem penalty (λ times the mini-batch
//! variance of per-sample losses) and DP-SGD. It then measures what the
//! trained models leak: per-sample memorization scores from shadow ensembles,
//! LiRA membership inference, and true-positive rates at low false-positive
//! rates.

pub mod attacks;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod lab;
pub mod loss;
pub mod memorization;
pub mod mia;
pub mod models;
pub mod seed;
pub mod tensor;
pub mod trainers;

pub use autodiff::{Gradients, Tape, Var};
pub use data::{generate_dataset, load_csv, Dataset, DatasetKind};
pub use error::{Error, Result};
pub use loss::{batch_variance, kl_divergence, softmax_cross_entropy, BatchLosses};
pub use models::{Model, ModelConfig};
pub use tensor::Tensor;
