//! Deterministic egocentric gridworld: M colored objects on a grid, an agent
//! with discrete motion, pseudo-3D RGB rendering, paired sound emission,
//! success detection, and offline pair collection.

mod dataset;
mod env;
mod pairs;
mod render;

pub use dataset::{load_pairs, load_unlabeled_pairs, write_pairs, UnlabeledPair};
pub use env::{
    heard_intent, Action, DomainParams, Env, EnvConfig, EnvState, Heading, Observation, StepResult, ACTION_COUNT,
};
pub use pairs::{collect_pairs, VisualAudioPair};
pub use render::{render, ObsImage};

use thiserror::Error;

use crate::audio::AudioError;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("grid {grid}x{grid} too small to place {needed} objects plus the agent")]
    Placement { grid: usize, needed: usize },
    #[error("step called after episode is done")]
    EpisodeDone,
    #[error("rejection budget of {budget} draws exceeded while balancing classes (still missing {missing:?})")]
    RejectionBudget { budget: u64, missing: Vec<usize> },
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error("dataset io error on {path}: {message}")]
    DatasetIo { path: std::path::PathBuf, message: String },
}
