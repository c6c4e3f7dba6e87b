//! Training-free bias correction for transformer classifiers.
//!
//! A small encoder classifier is trained on data where a confounding token
//! predicts the label in most examples. Mean residual-stream activations of
//! the majority and minority groups of one class are differenced to obtain a
//! bias direction, which is then projected out of the residual stream at
//! inference time. Worst-group and average-group accuracy measure the effect.
//!
//! ```text
//! data::generate -> data::split -> train::train_erm
//!     -> steering::extract_candidates -> steering::sweep_single_layer
//!     -> eval::group_accuracies (with model::InterventionSpec)
//! ```

pub mod data;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod format;
pub mod model;
pub mod numeric;
pub mod steering;
pub mod train;

pub use data::{ActivationDump, BiasConfig, Example, GroupedDataset};
pub use error::{Error, Result};
pub use eval::{EvalReport, LayerProfile};
pub use experiment::RunConfig;
pub use model::{ForwardTrace, HookPoint, InterventionSpec, ModelConfig, ModelParams};
pub use steering::{CandidateVector, MeanField, SteeringField, SweepResult, UnitDirection};
pub use train::{TrainConfig, TrainReport};
