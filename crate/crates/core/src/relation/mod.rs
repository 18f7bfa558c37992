//! Relation attention over object sets and learned duplicate removal.

mod block;
mod dedup;

pub use block::{embed_pair, geometry_embedding, sinusoid, HeadOutputs, RelationBlock, RelationConfig, MAX_WAVELENGTH, POSITION_SCALE};
pub use dedup::{class_ranks, classical_nms, dedup_targets, DedupConfig, DuplicateRemoval, GateMode};
