//! Graph classification with saliency-aware regularized graph neural
//! networks, built from scratch on a dense-tensor reverse-mode autodiff
//! engine.
//!
//! The model couples two interdependent parts:
//!
//! * a **backbone** GNN (GCN, GraphSAGE, GIN or GAT) that refines per-node
//!   features by neighborhood aggregation, and
//! * a **graph neural memory** that distills a compact vector representation
//!   of the whole graph by cross-attending over node features, layer by
//!   layer.
//!
//! The memory vector scores a **global saliency** distribution over nodes,
//! which in turn regularizes the backbone's aggregation weights, so message
//! passing favors nodes that matter for classification. Training is
//! end-to-end; everything differentiates through one tape.
//!
//! See the `book/` guide for a narrative walkthrough, or start with
//! [`model::SarGnnModel`] and the `sargnn` CLI.

pub mod backbone;
pub mod error;
pub mod graph;
pub mod memory;
pub mod model;
pub mod saliency;
pub mod tensor;

pub use error::{Error, Result};
