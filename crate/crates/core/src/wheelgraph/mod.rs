//! Wheel-shaped interaction graph between the intent node and slot nodes,
//! plus the attention and averaging layers that run over it.

mod attention;
mod layers;
mod topology;

pub use attention::{parse_attention_dump, render_attention, AttentionMatrix, DumpLine};
pub use layers::{
    gat_layer, gcn_layer, initial_states, intent_init, propagate, split_states, GatLayerParams, LayerConfig,
    MessagePassing, NodeActivation, Propagated, UpdateGru,
};
pub use topology::{expected_edge_count, TopologyFlags, WheelGraph, INTENT_NODE};

use crate::autodiff::TensorError;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GraphError {
    #[error("{0}")]
    Domain(String),
    #[error("node {node} has no in-neighbors")]
    EmptyNeighborhood { node: usize },
    #[error("node states have shape {found:?}, expected {expected:?}")]
    States { expected: Vec<usize>, found: Vec<usize> },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}
