//! Joint training and pruning of neural networks.
//!
//! Every convolution and linear weight tensor `w` is replaced in the forward
//! pass by its apparent weight `w ⊙ h_t(w)` (see [`reparam`]), and a
//! differentiable budget loss (see [`budget`]) pulls the surrogate parameter
//! count towards a target. After training, the smallest apparent weights are
//! zeroed to meet the exact pruning rate ([`pruning::effective_prune`]) with no
//! fine-tuning. A global magnitude-pruning baseline is provided for comparison.

pub mod autodiff;
pub mod budget;
pub mod data_io;
mod error;
pub mod models;
pub mod pruning;
pub mod reparam;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Graph, Var};
pub use budget::BudgetSpec;
pub use data_io::{Checkpoint, Dataset};
pub use error::{Error, Result};
pub use models::{Model, ModelSpec};
pub use pruning::PruneReport;
pub use reparam::{Crispness, ReparamConfig, Temperature};
pub use tensor::Tensor;
pub use trainer::{TrainConfig, TrainHistory, TrainMode};

/// Floating-point type used for all tensors.
#[cfg(not(feature = "f32"))]
pub type Real = f64;

/// Floating-point type used for all tensors.
#[cfg(feature = "f32")]
pub type Real = f32;
