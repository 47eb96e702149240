//! Interaction-hotspot learning from weakly labeled interaction clips.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense tensors and a reverse-mode autodiff tape
//! - [`net`]: frame encoder, LSTM aggregator, classifier, anticipation module
//!   and the supervised image-to-heatmap baseline network
//! - [`train`]: losses, active-frame selection, Adam, the training loop and
//!   checkpoints
//! - [`hotspot`]: gradient-weighted hotspot maps, baselines and clustering
//! - [`metrics`]: ground-truth construction and the KLD / SIM / AUC-J metrics
//! - [`data`]: the procedural interaction-clip generator and dataset files
//! - [`config`]: the run configuration shared by every command

pub mod config;
pub mod data;
pub mod error;
pub mod hotspot;
pub mod metrics;
pub mod net;
pub mod parallel;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Real, Tape, Tensor, Var};
