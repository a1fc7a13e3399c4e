//! Training loops: single-objective and adversarial steps, validation,
//! early stopping and the full fit procedure.

pub mod batch;
mod config;
mod fit;
mod trainer;

pub use batch::{collate, Batch};
pub use config::{LossKind, Preset, TrainConfig};
pub use fit::{early_stop, fit, FitOptions, FitReport, FitResult, StopReason, ValRecord};
pub use trainer::{Adversary, Decode, Network, StepOutcome, Trainer, UpdateRecord, Validation, DETECTOR, DISCRIMINATOR};
