use std::str::FromStr;

use rand::Rng;

use super::{AttentionMatrix, GraphError, WheelGraph};
use crate::autodiff::{Graph, Tensor, Var};
use crate::encoder::GruParams;
use crate::init;

/// Output nonlinearity applied after neighbor aggregation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NodeActivation {
    #[default]
    Tanh,
    Sigmoid,
    Identity,
}

impl FromStr for NodeActivation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "tanh" => Ok(Self::Tanh),
            "sigmoid" => Ok(Self::Sigmoid),
            "identity" => Ok(Self::Identity),
            _ => Err(format!("unknown activation {s:?} (tanh, sigmoid, identity)")),
        }
    }
}

impl NodeActivation {
    pub fn name(self) -> &'static str {
        match self {
            Self::Tanh => "tanh",
            Self::Sigmoid => "sigmoid",
            Self::Identity => "identity",
        }
    }
}

/// Neighbor weighting: learned attention, or uniform averaging.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MessagePassing {
    #[default]
    Gat,
    Gcn,
}

impl FromStr for MessagePassing {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "gat" => Ok(Self::Gat),
            "gcn" => Ok(Self::Gcn),
            _ => Err(format!("unknown message passing {s:?} (gat, gcn)")),
        }
    }
}

impl MessagePassing {
    pub fn name(self) -> &'static str {
        match self {
            Self::Gat => "gat",
            Self::Gcn => "gcn",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerConfig {
    pub activation: NodeActivation,
    pub leaky_slope: f64,
}

impl Default for LayerConfig {
    fn default() -> Self {
        Self {
            activation: NodeActivation::Tanh,
            leaky_slope: 0.01,
        }
    }
}

/// Node-update recurrence: one GRU for all nodes, or separate GRUs for the
/// intent node and the slot nodes.
#[derive(Debug, Clone)]
pub enum UpdateGru {
    Shared(GruParams),
    Split { intent: GruParams, slot: GruParams },
}

#[derive(Debug, Clone)]
pub struct GatLayerParams {
    /// `d×d` node projection.
    pub w: Tensor,
    /// `2d×1` attention vector; the first half scores the target node, the
    /// second half the source. Absent for uniform averaging.
    pub a: Option<Tensor>,
    pub update: UpdateGru,
}

impl GatLayerParams {
    pub fn init<R: Rng + ?Sized>(
        rng: &mut R,
        dim: usize,
        passing: MessagePassing,
        shared_update: bool,
        gru_bias: bool,
    ) -> Self {
        let w = init::uniform(rng, vec![dim, dim], dim);
        let a = (passing == MessagePassing::Gat).then(|| init::uniform(rng, vec![2 * dim, 1], 2 * dim));
        let update = if shared_update {
            UpdateGru::Shared(GruParams::init(rng, dim, dim, gru_bias))
        } else {
            UpdateGru::Split {
                intent: GruParams::init(rng, dim, dim, gru_bias),
                slot: GruParams::init(rng, dim, dim, gru_bias),
            }
        };
        Self { w, a, update }
    }

    pub fn dim(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}.W"), &self.w));
        if let Some(a) = &self.a {
            out.push((format!("{prefix}.a"), a));
        }
        match &self.update {
            UpdateGru::Shared(p) => p.named(&format!("{prefix}.update"), out),
            UpdateGru::Split { intent, slot } => {
                intent.named(&format!("{prefix}.update_intent"), out);
                slot.named(&format!("{prefix}.update_slot"), out);
            }
        }
    }

    pub fn named_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((format!("{prefix}.W"), &mut self.w));
        if let Some(a) = &mut self.a {
            out.push((format!("{prefix}.a"), a));
        }
        match &mut self.update {
            UpdateGru::Shared(p) => p.named_mut(&format!("{prefix}.update"), out),
            UpdateGru::Split { intent, slot } => {
                intent.named_mut(&format!("{prefix}.update_intent"), out);
                slot.named_mut(&format!("{prefix}.update_slot"), out);
            }
        }
    }
}

fn activate(g: &mut Graph<'_>, x: Var, act: NodeActivation) -> Result<Var, GraphError> {
    Ok(match act {
        NodeActivation::Tanh => g.tanh(x)?,
        NodeActivation::Sigmoid => g.sigmoid(x)?,
        NodeActivation::Identity => x,
    })
}

fn check_states(g: &Graph<'_>, graph: &WheelGraph, h: Var, dim: usize) -> Result<(), GraphError> {
    let s = g.shape(h);
    if s.len() != 2 || s[0] != graph.node_count() || s[1] != dim {
        return Err(GraphError::States {
            expected: vec![graph.node_count(), dim],
            found: s.to_vec(),
        });
    }
    graph.check_nonempty()
}

/// Intent-node initial state: elementwise maximum over the encoder rows.
pub fn intent_init(g: &mut Graph<'_>, encoded: Var) -> Result<Var, GraphError> {
    Ok(g.max_over_time(encoded)?)
}

/// Initial node states: the intent state on row 0 followed by the encoder
/// rows, one per slot node.
pub fn initial_states(g: &mut Graph<'_>, encoded: Var) -> Result<Var, GraphError> {
    let intent = intent_init(g, encoded)?;
    Ok(g.stack_rows(&[intent, encoded])?)
}

/// One graph-attention layer:
///
/// ```text
/// z_i  = h_i·W
/// e_ij = LeakyReLU(a · [z_i ‖ z_j])        for j ∈ N(i)
/// α_ij = softmax_{j ∈ N(i)}(e_ij)
/// out_i = σ(Σ_j α_ij z_j)
/// ```
pub fn gat_layer<'p>(
    g: &mut Graph<'p>,
    p: &'p GatLayerParams,
    graph: &WheelGraph,
    h: Var,
    cfg: &LayerConfig,
) -> Result<(Var, AttentionMatrix), GraphError> {
    let dim = p.dim();
    check_states(g, graph, h, dim)?;
    let a =
        p.a.as_ref()
            .ok_or_else(|| GraphError::Domain("attention layer has no attention vector".into()))?;
    let edges = graph.edges();
    let offsets = graph.offsets();

    let w = g.leaf(&p.w);
    let z = g.matmul(h, w)?;
    let av = g.leaf(a);
    let a_target = g.slice_rows(av, 0, dim)?;
    let a_source = g.slice_rows(av, dim, dim)?;
    let s_target = g.matmul(z, a_target)?;
    let s_source = g.matmul(z, a_source)?;
    let e = g.edge_scores(s_target, s_source, &edges)?;
    let e = g.leaky_relu(e, cfg.leaky_slope)?;
    let alpha = g.segment_softmax(e, &offsets)?;
    let agg = g.edge_aggregate(alpha, z, &edges)?;
    let out = activate(g, agg, cfg.activation)?;

    let attention = AttentionMatrix::from_edges(graph.node_count(), &edges, g.value(alpha));
    Ok((out, attention))
}

/// Uniform-weight counterpart of [`gat_layer`]:
/// `out_i = σ(Σ_{j ∈ N(i)} z_j / |N(i)|)`.
pub fn gcn_layer<'p>(
    g: &mut Graph<'p>,
    p: &'p GatLayerParams,
    graph: &WheelGraph,
    h: Var,
    cfg: &LayerConfig,
) -> Result<Var, GraphError> {
    check_states(g, graph, h, p.dim())?;
    let edges = graph.edges();
    let weights: Vec<f64> = edges
        .iter()
        .map(|&(t, _)| 1.0 / graph.in_neighbors(t).len() as f64)
        .collect();
    let w = g.leaf(&p.w);
    let z = g.matmul(h, w)?;
    let wv = g.constant(vec![edges.len()], weights)?;
    let agg = g.edge_aggregate(wv, z, &edges)?;
    activate(g, agg, cfg.activation)
}

fn update<'p>(g: &mut Graph<'p>, gru: &'p UpdateGru, messages: Var, h: Var) -> Result<Var, GraphError> {
    Ok(match gru {
        UpdateGru::Shared(p) => p.step(g, messages, h)?,
        UpdateGru::Split { intent, slot } => {
            let n = g.shape(h)[0];
            let (mi, hi) = (g.slice_rows(messages, 0, 1)?, g.slice_rows(h, 0, 1)?);
            let (ms, hs) = (g.slice_rows(messages, 1, n - 1)?, g.slice_rows(h, 1, n - 1)?);
            let new_i = intent.step(g, mi, hi)?;
            let new_s = slot.step(g, ms, hs)?;
            g.stack_rows(&[new_i, new_s])?
        }
    })
}

#[derive(Debug)]
pub struct Propagated {
    /// Final node states, `(T+1)×d`.
    pub states: Var,
    /// Attention of each layer (empty under uniform averaging).
    pub attention: Vec<AttentionMatrix>,
}

/// Runs `layers.len()` rounds of `h ← GRU(message_passing(h), h)`, each
/// node treating the aggregated message as GRU input and its previous
/// state as the hidden state.
pub fn propagate<'p>(
    g: &mut Graph<'p>,
    layers: &'p [GatLayerParams],
    graph: &WheelGraph,
    h0: Var,
    passing: MessagePassing,
    cfg: &LayerConfig,
) -> Result<Propagated, GraphError> {
    if layers.is_empty() {
        return Err(GraphError::Domain("propagation needs at least one layer".into()));
    }
    let mut h = h0;
    let mut attention = Vec::new();
    for p in layers {
        let messages = match passing {
            MessagePassing::Gat => {
                let (m, att) = gat_layer(g, p, graph, h, cfg)?;
                attention.push(att);
                m
            }
            MessagePassing::Gcn => gcn_layer(g, p, graph, h, cfg)?,
        };
        h = update(g, &p.update, messages, h)?;
    }
    Ok(Propagated { states: h, attention })
}

/// Splits final states into the intent row (`1×d`) and slot rows (`T×d`).
pub fn split_states(g: &mut Graph<'_>, states: Var) -> Result<(Var, Var), GraphError> {
    let n = g.shape(states)[0];
    let intent = g.slice_rows(states, 0, 1)?;
    let slots = g.slice_rows(states, 1, n - 1)?;
    Ok((intent, slots))
}
