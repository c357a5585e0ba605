//! Semi-supervised classification with top-K expert fusion and ambiguous
//! pseudo-label consistency.
//!
//! The crate is self-contained: a small reverse-mode autodiff [`tape`], an
//! MLP backbone and Adam in [`nn`], expert banks in [`eaf`], the
//! positive/negative class partition and its smooth margin loss in
//! [`partition`], synthetic data in [`data`], and the training loop in
//! [`train`].

pub mod config;
pub mod data;
pub mod eaf;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod partition;
pub mod tape;
pub mod tensor;
pub mod train;
pub mod verify;

pub use config::{LossScores, Method, PartitionSource, RunConfig, UnsupLoss};
pub use data::{AugmentConfig, Dataset, SslSplit, Strength, SyntheticSpec};
pub use eaf::{BankConfig, ExpertBank, ExpertKind, GateDecision};
pub use error::{LeafError, Result};
pub use gradcheck::{grad_check, grad_check_many};
pub use experiment::{run_experiment, AblationRow, SummaryRow, SweepCell, Variant};
pub use metrics::Metrics;
pub use model::{LeafModel, ModelSpec};
pub use nn::{AdamState, LinearLayer, MlpEncoder, ParamId, ParamStore};
pub use partition::{ambiguous_consistency_loss, hinge_oracle, partition, ConsistencyParams, Partition};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
pub use train::{evaluate, train, train_fixed_threshold, EpochSummary, StepReport, TrainOutput};
pub use verify::{CheckResult, OracleSizes, SuiteReport};
