//! Test-time refinement of uncertain classifier predictions by pushing the
//! top-ranked classes apart with a single gradient step.
//!
//! Layers, bottom up: [`gradcore`] (reverse-mode tape), [`network`] (MLP,
//! training, checkpoints), [`focus`] (gate, losses, refinement), [`theory`]
//! (three-class linear toy model) and [`bench`] (synthetic data, evaluation,
//! sweeps and statistics).

pub mod bench;
pub mod dataset;
pub mod error;
pub mod focus;
pub mod gradcore;
pub mod network;
pub mod output;
pub mod theory;

pub use dataset::LabeledSample;
pub use error::{Error, Result};
pub use focus::{focus_predict, focus_predict_in_place, FocusConfig, FocusOutcome, LossKind};
pub use network::{init_params, MlpSpec, Parameters};
