//! The operator algebra: AST, registry of named entities, and the interpreter.

pub mod ast;
mod desugar;
mod exec;
pub mod registry;
mod report;

pub use ast::{FuseRule, GenSpec, MergePolicy, Node, Op, Payload, Pipeline, RefinerRef, Span, SwitchArm};
pub use desugar::{desugar, desugar_all, desugar_pipeline};
pub use exec::{diff_key, execute, merge_key, run_pipeline, switch_id, view_key};
pub use registry::{
    Agent, AgentOutput, Registry, RefinerBody, RefinerSpec, SourceDef, SourceKind, Transform, DEFAULT_RETRY_REFINER,
    DIFF_AGENT,
};
pub use report::{cache_hit_rate, Event, NoGenEvents, RunOptions, RunReport, StateDelta, TraceRecord};

use crate::state::ConditionError;
use crate::store::StoreError;

/// Hard failures that abort a run. Backend, agent and refiner failures are
/// soft: they set an `error:*` metric and leave the state otherwise unchanged.
#[derive(Debug, thiserror::Error)]
pub enum AlgebraError {
    #[error("unknown source '{0}'")]
    UnknownSource(String),
    #[error("unknown agent '{0}'")]
    UnknownAgent(String),
    #[error("unknown refiner '{0}'")]
    UnknownRefiner(String),
    #[error("refiner '{id}' takes {expected} argument(s), got {got}")]
    RefinerArity { id: String, expected: usize, got: usize },
    #[error("GEN '{0}' names no prompt and no prompt is in focus")]
    NoPrompt(String),
    #[error("{0} names no prompt key and no prompt is in focus")]
    MissingKey(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Condition(#[from] ConditionError),
    #[error("retrieval from '{name}' failed: {message}")]
    Retrieval { name: String, message: String },
    #[error("GEN '{label}' cannot stream: {detail}")]
    BadStream { label: String, detail: String },
    #[error("fused output for '{label}' is malformed: {detail}")]
    FusedOutput { label: String, detail: String },
    #[error("FUSE body has the wrong shape: {0}")]
    FuseShape(String),
    #[error("DELEGATE payload: {0}")]
    Payload(String),
    #[error("{0} has no core-operator equivalent")]
    NotDerived(String),
    #[error("pipeline '{0}' has no operators")]
    EmptyPipeline(String),
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("event log: {0}")]
    Log(String),
}
