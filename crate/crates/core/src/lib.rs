//! Collaborative panoptic annotation: a pool of scored segment proposals, a
//! depth-ordered active set, assistants that react to annotator-fixed
//! segments, a simulated annotator, and the training loops behind them.

pub mod context;
pub mod engine;
pub mod error;
pub mod geometry;
pub mod init;
pub mod io;
pub mod mask;
pub mod metrics;
pub mod nn;
pub mod proposal;
pub mod render;
pub mod state;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
