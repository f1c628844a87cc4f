//! Batch normalization, the backbone/classifier/auxiliary-head model and
//! its on-disk checkpoint format.

pub mod bn;
pub mod checkpoint;
pub mod model;

pub use bn::{AffineVars, BatchStats, BnMode, BnState, Branch};
pub use model::{
    AffineSnapshot, BackboneSpec, BnTap, ByolTargetState, Model, ModelConfig, ParamGrads, ParamKey, ParamView, Scope,
    Session, SslHeadSpec, TaskHead,
};
