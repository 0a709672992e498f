//! Instruction-conditioned, history-aware multi-view manipulation policy with
//! a synthetic tabletop simulator, behavioral-cloning trainer and evaluation
//! harness.

pub mod checkpoint;
pub mod config;
pub mod episode;
pub mod error;
pub mod eval;
pub mod graph;
pub mod instruction;
pub mod kernels;
pub mod model;
pub mod params;
pub mod sim;
pub mod tensor;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::{PolicyConfig, RunConfig, TrainConfig, Variant};
pub use episode::{Action, Episode, Observation, Split};
pub use error::{Error, Result};
pub use eval::{EvalReport, Outcome};
pub use model::{Policy, Prediction};
pub use sim::{TaskKind, TaskSpec};
