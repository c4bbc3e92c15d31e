//! One-shot federated distillation of query-based segmentation models.

pub mod autodiff;
pub mod baselines;
pub mod checkpoint;
pub mod client_trainer;
pub mod dataset_io;
pub mod distill;
pub mod error;
pub mod harness;
pub mod inconsistency;
pub mod matching;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod scenegen;
pub mod segmodel;
pub mod tensor;
pub mod training;

pub use error::{Error, Result, TensorError};
pub use tensor::Tensor;
