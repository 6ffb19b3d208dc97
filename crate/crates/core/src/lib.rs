//! Multi-scale convolutional classifier for dermoscopic lesion images.
//!
//! A small convolutional backbone is applied, with shared weights, to a
//! coarse whole-image view and a fine center-crop view; the pooled features
//! are concatenated and classified into melanoma / seborrheic keratosis /
//! nevus. Everything needed to train and evaluate it lives here: `f64`
//! tensors with reverse-mode autodiff, Adam, image preprocessing, a
//! class-balanced sampler, synthetic data, two-stage fine-tuning, dihedral
//! test-time augmentation, geometric ensembling and ROC-AUC.

pub mod config;
pub mod data;
pub mod dihedral;
pub mod graph;
pub mod image;
pub mod infer;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod optim;
pub mod param;
pub mod pipeline;
pub mod tensor;
pub mod train;
pub mod weights;

pub use config::RunConfig;
pub use data::{ClassLabel, ManifestEntry};
pub use dihedral::Dihedral;
pub use graph::Graph;
pub use image::{ImageBuffer, NormalizedImage};
pub use infer::{PredictionRecord, Predictor};
pub use metrics::EvalReport;
pub use model::{FreezeStage, Mode, ModelConfig, ModelInput, ModelParams};
pub use param::{Gradients, ParamId, ParamSet, Parameter};
pub use pipeline::{InputSpec, PreparedSet};
pub use tensor::{Tensor, TensorError};
