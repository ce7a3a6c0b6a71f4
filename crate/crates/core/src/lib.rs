//! Adaptive discovering and merging for class-incremental novel class discovery.
//!
//! The crate bundles a small deterministic tensor engine ([`tensor`], [`ops`],
//! [`autograd`], [`optim`]), the branch folding and merging algebra
//! ([`reparam`]), the discovery objectives ([`discovery`]), the end-to-end
//! experiment loop ([`pipeline`]) and the evaluation protocol ([`eval`]).

pub mod autograd;
pub mod discovery;
pub mod error;
pub mod eval;
pub mod ops;
pub mod optim;
pub mod pipeline;
pub mod reparam;
pub mod tensor;

pub use autograd::{Gradients, Tape, Var};
pub use discovery::{JointHead, LossWeights, PrototypeStore, TripletBatch};
pub use error::{Error, Result};
pub use eval::{hungarian_assign, AssignmentResult, MetricsReport};
pub use ops::{BnParams, ConvSpec};
pub use pipeline::{ExperimentConfig, Model, TaskStream};
pub use reparam::{ConvBnUnit, DualBranchLayer, FoldedConv, MergeMode};
pub use tensor::{Param, Scalar, Tensor};
