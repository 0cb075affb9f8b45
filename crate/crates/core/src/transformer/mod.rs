//! Toy encoder and encoder-decoder stacks, parameter storage, FLOPs
//! accounting and checkpoints.

pub mod checkpoint;
pub mod flops;
mod model;
mod params;
mod spec;

pub use flops::{estimate_flops, FlopsReport};
pub(crate) use model::attention_sites;
pub use model::{
    count_params, pool, pool_graph, CrossContext, Model, ParamCount, PoolMode, Stack, LN_EPS, PAD_TOKEN,
};
pub use params::{AttnRecord, GradMode, Graph, ParamGrads, ParamStore};
pub use spec::{ModelKind, ModelSpec};
