//! Desk-scale harness for multi-label chest-radiograph-style image
//! classification: a small f64 tensor library with reverse-mode autodiff,
//! DenseNet / ViT / DeiT model builders, a patient-grouped data pipeline with
//! synthetic data, a distillation-capable trainer, AUROC/F1 evaluation with
//! cross-validated data-fraction sweeps, and attention / Grad-CAM saliency.

pub mod data;
pub mod error;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod rng;
pub mod saliency;
pub mod sweep;
pub mod tensor;
pub mod testkit;
pub mod train;

pub use error::{Error, Result};
