use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("image size {0}x{1} is not a positive multiple of 16")]
    ImageSize(usize, usize),
    #[error("unknown color `{0}`")]
    UnknownColor(String),
    #[error("unknown task `{0}`")]
    UnknownTask(String),
    #[error("invalid task spec: {0}")]
    InvalidTask(String),
    #[error("goal object `{0}` is missing from the scene")]
    MissingGoalObject(String),
    #[error("invalid action: {0}")]
    InvalidAction(String),
    #[error("could not place objects for {task} (seed {seed}) after {attempts} attempts")]
    Placement { task: String, seed: u64, attempts: usize },

    #[error("bad container: {0}")]
    BadContainer(String),
    #[error("unsupported format version {found} (this build reads {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("truncated file: {0}")]
    Truncated(String),
    #[error("checksum mismatch: header says {expected:08x}, payload hashes to {found:08x}")]
    Checksum { expected: u32, found: u32 },

    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("instruction is empty")]
    EmptyInstruction,
    #[error("instruction has {0} tokens, the limit is {1}")]
    InstructionTooLong(usize, usize),
    #[error("step {step} is out of range (max {max})")]
    StepOutOfRange { step: usize, max: usize },
    #[error("task id {0} is out of range for {1} tasks")]
    TaskOutOfRange(usize, usize),
    #[error("missing skip activations for the heatmap decoder")]
    MissingSkips,

    #[error("config key `{key}`: {msg}")]
    Config { key: String, msg: String },
    #[error("empty dataset: no episodes to train on")]
    EmptyDataset,
    #[error("non-finite loss at iteration {iteration} (episodes {episodes:?})")]
    NonFiniteLoss { iteration: u64, episodes: Vec<String> },
    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),

    #[error("{task} variation {variation} seed {seed}: {source}")]
    Episode { task: String, variation: u32, seed: u64, source: Box<Error> },
    #[error("step {step}: {source}")]
    AtStep { step: usize, source: Box<Error> },
    #[error("{path}: {source}")]
    File { path: PathBuf, source: Box<Error> },

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(key: &str, msg: impl Into<String>) -> Self {
        Error::Config { key: key.to_string(), msg: msg.into() }
    }

    pub fn at_step(self, step: usize) -> Self {
        Error::AtStep { step, source: Box::new(self) }
    }

    pub fn in_file(self, path: impl Into<PathBuf>) -> Self {
        Error::File { path: path.into(), source: Box::new(self) }
    }

    /// Innermost error, with provenance wrappers stripped.
    pub fn root(&self) -> &Error {
        match self {
            Error::Episode { source, .. } | Error::AtStep { source, .. } | Error::File { source, .. } => source.root(),
            e => e,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
