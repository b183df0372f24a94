//! Sequential recommendation with listwise preference optimization toward
//! tail items: a SASRec encoder trained with cross-entropy plus a listwise
//! term over Gumbel-sampled head negatives, with per-batch tail reweighting.
//!
//! Everything runs in `f64` on a small reverse-mode tape ([`engine`]).

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod catalog;
pub mod config;
pub mod data;
pub mod engine;
pub mod eval;
pub mod losses;
pub mod model;
pub mod sampler;
pub mod trainer;

pub use catalog::{Catalog, CatalogError, ItemId};
pub use config::{ConfigError, Preset, RunConfig};
pub use data::{DataError, DatasetSplits, InteractionRecord, Role, SequenceExample, SyntheticSpec};
pub use engine::{EngineError, Graph, Tensor, Var};
pub use eval::{EvalError, MetricsReport, ProbDiagnostics, CUTOFFS};
pub use losses::{LossConfig, LossError};
pub use model::{ModelDims, ModelError, ModelParams};
pub use sampler::{SamplerError, SamplerKind, SamplingStrategy};
pub use trainer::{LossKind, TrainConfig, TrainError, TrainHistory, TrainOutcome};

/// Any error raised by this crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors caused by invalid input or configuration rather
    /// than by a failure while running.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Config(_) | Error::Loss(_) | Error::Sampler(_) => true,
            Error::Data(e) => !matches!(e, DataError::Io(_)),
            Error::Model(e) => matches!(
                e,
                ModelError::InvalidDims(_)
                    | ModelError::HistoryTooLong { .. }
                    | ModelError::InvalidItem { .. }
                    | ModelError::EmptyHistory
            ),
            Error::Train(e) => matches!(
                e,
                TrainError::InvalidConfig(_)
                    | TrainError::InvalidRatio(_)
                    | TrainError::EmptySplit
                    | TrainError::Sampler(_)
                    | TrainError::Loss(_)
            ),
            Error::Catalog(_) => true,
            Error::Eval(e) => {
                matches!(e, EvalError::EmptySplit | EvalError::InvalidTarget { .. } | EvalError::NoTailItems)
            }
            Error::Engine(_) | Error::Io(_) => false,
        }
    }

    /// Short machine-parsable class name.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Config(_) => "ConfigError",
            Error::Data(DataError::EmptyAfterFilter) => "EmptyAfterFilter",
            Error::Data(DataError::InvalidSpec(_)) => "InvalidSpec",
            Error::Data(_) => "DataError",
            Error::Catalog(_) => "CatalogError",
            Error::Model(_) => "ModelError",
            Error::Loss(_) => "LossError",
            Error::Sampler(_) | Error::Train(TrainError::Sampler(_)) => "SamplerError",
            Error::Train(TrainError::NonFiniteGradient { .. } | TrainError::NonFiniteLoss { .. }) => "NonFinite",
            Error::Train(_) => "TrainError",
            Error::Eval(_) => "EvalError",
            Error::Engine(_) => "EngineError",
            Error::Io(_) => "IoError",
        }
    }
}
