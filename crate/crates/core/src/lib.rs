//! Goal-directed episodic control on episodic water-maze tasks.
//!
//! The agent keeps a fixed echo-state reservoir as working memory, writes
//! `(key, reservoir state)` pairs to a bounded episodic buffer at the end of
//! every trial, retrieves by softmax over query-key similarity, and fuses the
//! retrieved memory with working memory through a two-slot cross-attention
//! before a Q-value head. Trainable pieces (input filter, query/key networks,
//! embedding, Q head, optional gate) learn online with double Q-learning.

pub mod agent;
pub mod analysis;
pub mod checkpoint;
pub mod config;
pub mod harness;
pub mod maze;
pub mod memory;
pub mod nn;
pub mod parallel;
pub mod plot;
pub mod reservoir;
pub mod trainer;

use std::path::PathBuf;

pub use agent::{Agent, AgentParams, ForwardTrace};
pub use config::{CellName, Condition, Preset, RunConfig};
pub use maze::{Action, EpisodeType, GridPos, Observation, Variant, WaterMaze};
pub use memory::{EpisodicMemory, RetrievalMode};
pub use reservoir::{Reservoir, ReservoirState};

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config error at `{key}`: {msg}")]
    Config { key: String, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: PathBuf, msg: String },
    #[error("csv {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("run {cell}/{seed} failed: {msg}")]
    Run {
        cell: String,
        seed: u64,
        msg: String,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
