//! Desk-scale laboratory for adversarially robust out-of-distribution
//! detection.
//!
//! The crate trains small ReLU classifiers under outlier-exposure and
//! adversarial-training objectives (OE, SAT, TRADES, HAT, ALOE and the joint
//! helper-based objective), attacks them with classification and
//! entropy-targeting detection adversaries, scores them with MSP, entropy,
//! energy and GEN detectors, and reports AUROC / FPR95 / AUPR.

pub mod attacks;
pub mod autodiff;
pub mod datasets;
pub mod detection;
pub mod error;
pub mod experiments;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod tensor;

pub use autodiff::{Gradients, Graph, Var};
pub use error::{Error, Result};
pub use model::{Checkpoint, Mlp, MlpGrads, Sgd, SgdConfig};
pub use tensor::Tensor;
