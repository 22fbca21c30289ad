//! Toy ViT backbone with adapter-injected linear maps, exit heads and
//! structural fusion.

mod config;
mod linear;
mod vit;

pub use config::{AdapterKind, AdapterSpec, ModelConfig, Placement};
pub use linear::{
    expand_groupwise, fuse_layer, fuse_parallel_lowrank, fuse_sequential_rep, Adapter, LinearWithAdapter, SiteNames,
};
pub use vit::{
    batch_chunks, block_prefix, concat_rows, head_prefix, EVAL_CHUNK, DynAdapterModel, ForwardOpts, Pooling, StageDropout, StagePass,
};
