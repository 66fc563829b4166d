//! Timed process interventions: two exactly enumerable synthetic processes,
//! the perfect intervention-timing policy by backward induction, and two
//! learned timing policies — a direct causal-uplift regressor trained on
//! randomized data and an online Q-learner — evaluated against each other on
//! exact counterfactuals.
//!
//! Layout:
//! - [`process`]: trace generators, outcomes, counterfactual tables, exact
//!   enumeration, and the step-wise episode environment.
//! - [`policies`]: the perfect policy, baselines, and exact/sampled policy
//!   evaluation.
//! - [`nn`]: a small sequence regressor (two LSTM layers and a dense stack)
//!   with Adam, plus feature encoding and standardization.
//! - [`ci`]: the causal-uplift learner — randomized data generation, prefix
//!   expansion, training, and threshold selection.
//! - [`rl`]: the online Q-learner (neural and tabular) with replay memory.
//! - [`harness`]: experiment configuration, multi-seed runs, and reports.

use std::path::{Path, PathBuf};

pub mod ci;
pub mod nn;
pub mod policies;
pub mod process;
pub mod rl;
pub mod rng;

pub use ci::{
    build_rct_dataset, ci_decision_map, ci_model, ite_batch, select_threshold,
    select_threshold_exact, tabular_ci, tabular_ite_map, train_ci, validation_ites, CiDataset,
    CiModel, ThresholdChoice, TrainReport,
};
pub use nn::{
    encode, feature_dim, regressor::RegressorState, regressor::SequenceRegressor, side_dim,
    tabular::TabularEstimator, EncodeMode, EncodedPrefix, Standardizer, Stats, TensorBlob,
};
pub use policies::{
    enumerate_prefixes, evaluate_policy_exact, evaluate_policy_sampled, evaluate_rct_exact,
    evaluate_rct_sampled, rct_option, sample_test_set, AlwaysAtK, MapPolicy, NeverPolicy,
    NodeValue, PerfectPolicy, Policy, PrefixKey,
};
pub use process::{
    counterfactual_table, enumerate_state_space, outcome, outcome_gross, sample_trace, Action,
    Activity, CounterfactualTable, Enumeration, Episode, Event, InterventionOption, LatentTrace,
    LoggedCase, PrefixObservation, ProcessId, ProcessSpec,
};
pub use rl::{
    act, bellman_residual_tabular, export_rl_curve, extract_policy, train_rl, CurvePoint,
    EpsilonSchedule, LearningRate, QAgent, ReplayMemory, RlConfig, RlMode, RlOutcome, TabularQ,
    Transition,
};

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("intervention index {index} out of range (1..={max})")]
    InvalidOption { index: usize, max: usize },

    #[error("episode is already finished")]
    EpisodeDone,

    #[error("standardizer used before fitting")]
    UnfittedStandardizer,

    #[error("policy has no decision for prefix {0}")]
    PolicyUndefined(String),

    #[error("no data recorded for the queried cell")]
    NoData,

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("validation set is empty")]
    EmptyValidation,

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Wrap any error raised while touching `path`.
    pub fn io(path: &Path, source: impl Into<Box<dyn std::error::Error + Send + Sync>>) -> Self {
        Error::Io { path: path.to_path_buf(), source: std::io::Error::other(source) }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
