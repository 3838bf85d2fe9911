//! Adversarial training with vanilla-feature distillation.
//!
//! The crate builds small layer-tapped classifiers on a reverse-mode
//! autodiff tensor core, attacks them with gradient-based adversaries, and
//! trains robust students that distill a standard teacher's intermediate
//! features. Everything is generic over the scalar type; `f64` is the
//! default precision and `f32` is selectable through the same interfaces.

pub mod attacks;
pub mod data;
pub mod error;
pub mod evalkit;
pub mod losses;
pub mod models;
pub mod scalar;
pub mod seeding;
pub mod tensor;
pub mod trainer;

pub use attacks::{AttackKind, AttackSpec, NormKind};
pub use data::{synthesize, Dataset, SplitTag, SynthKind, SynthSpec};
pub use error::{Error, Result};
pub use evalkit::{
    evaluate, export_features, render_table, reports_csv, sweep, Accuracy, EvalReport,
    SweepResult, SweepSpec, ThreatModel,
};
pub use losses::{Gamma, LossSpec, Phi, Reduction};
pub use models::{ArchDescriptor, ArchId, TappedModel};
pub use scalar::Scalar;
pub use tensor::{ParameterSet, Sgd, SgdConfig, Tensor};
pub use trainer::{
    load_checkpoint, save_checkpoint, train_vanilla, train_vfd_adv, Checkpoint, TrainConfig,
    TrainRun,
};

/// Default-precision tensor.
pub type Tensor64 = Tensor<f64>;
/// Single-precision tensor.
pub type Tensor32 = Tensor<f32>;
/// Default-precision model.
pub type Model64 = TappedModel<f64>;
/// Single-precision model.
pub type Model32 = TappedModel<f32>;
