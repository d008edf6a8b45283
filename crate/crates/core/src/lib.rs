//! Tabular deep learning benchmark harness.
//!
//! The crate bundles a small reverse-mode autodiff engine, three tabular
//! architectures built on it (a residual MLP, its multi-path ResNeXt variant
//! and a minimal FT-Transformer), an AdamW training loop with early stopping,
//! a Tree-structured Parzen Estimator, and the nested cross-validation
//! protocol that ties them together. Rank statistics (Friedman, Nemenyi
//! critical difference, win counts) summarise the resulting result matrix.

pub mod autodiff;
pub mod data;
pub mod error;
pub mod hpo;
pub mod metrics;
pub mod models;
pub mod protocol;
pub mod stats;
pub mod train;

pub use error::{Error, Result};

pub use autodiff::{Mode, ParameterSet, Tape, Tensor, Var};
pub use data::{ColumnKind, ColumnSchema, Dataset, Features, FoldPlan, PreprocessorState};
pub use hpo::{Budget, ParamSpec, ParamValue, SearchSpace, StudyState, Trial, TrialStatus};
pub use metrics::PredictionSet;
pub use models::{Architecture, InputSchema, ModelConfig, ModelInstance};
pub use protocol::{BenchmarkTask, DatasetResult, MethodMode, OuterFoldResult, RunManifest};
pub use stats::{RankSummary, ResultMatrix, SummaryStats};
pub use train::{TrainConfig, TrainReport};
