//! Hierarchical classification: binary decomposition, per-node data,
//! traversal and the end-to-end pipeline.

mod baseline;
mod metrics;
mod pipeline;
mod tree;

pub use baseline::*;
pub use metrics::*;
pub use pipeline::*;
pub use tree::*;
