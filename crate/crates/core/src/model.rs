//! The joint model: encoder, wheel-graph propagation and two softmax heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Parameters, Tensor, TensorError, Var};
use crate::dataset::UNSEEN_ID;
use crate::encoder::{encode, EncoderParams};
use crate::init;
use crate::training::RunMode;
use crate::wheelgraph::{
    initial_states, propagate, split_states, AttentionMatrix, GatLayerParams, GraphError, LayerConfig, MessagePassing,
    TopologyFlags, WheelGraph,
};

/// Probabilities below this are clamped before taking the log.
pub const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("invalid label: {0}")]
    Label(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    /// Node state width; the BiGRU output feeds the slot nodes directly, so
    /// this must be `2 * hidden_dim`.
    pub node_dim: usize,
    pub encoder_layers: usize,
    pub graph_layers: usize,
    pub flags: TopologyFlags,
    pub passing: MessagePassing,
    pub layer: LayerConfig,
    pub gru_bias: bool,
    pub shared_update: bool,
    pub dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 1024,
            hidden_dim: 512,
            node_dim: 1024,
            encoder_layers: 2,
            graph_layers: 1,
            flags: TopologyFlags::default(),
            passing: MessagePassing::Gat,
            layer: LayerConfig::default(),
            gru_bias: true,
            shared_update: true,
            dropout: 0.2,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        for (name, v) in [
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("node_dim", self.node_dim),
            ("encoder_layers", self.encoder_layers),
            ("graph_layers", self.graph_layers),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.node_dim != 2 * self.hidden_dim {
            return bad(format!(
                "node_dim ({}) must equal 2 * hidden_dim ({})",
                self.node_dim,
                2 * self.hidden_dim
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if !self.layer.leaky_slope.is_finite() {
            return bad("leaky_slope must be finite".into());
        }
        Ok(())
    }
}

/// Label-space sizes the model is built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Sizes {
    pub vocab: usize,
    pub intents: usize,
    pub slots: usize,
}

#[derive(Debug, Clone)]
pub struct OutputHeads {
    /// `d×n_I`
    pub intent_w: Tensor,
    pub intent_b: Tensor,
    /// `d×n_S`
    pub slot_w: Tensor,
    pub slot_b: Tensor,
}

#[derive(Debug, Clone)]
pub struct WheelGat {
    pub config: ModelConfig,
    pub sizes: Sizes,
    pub encoder: EncoderParams,
    pub graph: Vec<GatLayerParams>,
    pub heads: OutputHeads,
}

/// Graph handles produced by one forward pass.
#[derive(Debug)]
pub struct Forward {
    /// `1×n_I`
    pub intent_probs: Var,
    /// `T×n_S`
    pub slot_probs: Var,
    /// Per graph layer; empty under uniform averaging.
    pub attention: Vec<AttentionMatrix>,
}

/// Output distributions and their argmax labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub intent_dist: Vec<f64>,
    pub slot_dists: Vec<Vec<f64>>,
    pub intent: usize,
    pub slots: Vec<usize>,
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

impl Forward {
    pub fn prediction(&self, g: &Graph<'_>) -> Prediction {
        let intent_dist = g.value(self.intent_probs).to_vec();
        let n_s = g.shape(self.slot_probs)[1];
        let slot_dists: Vec<Vec<f64>> = g.value(self.slot_probs).chunks(n_s).map(<[f64]>::to_vec).collect();
        Prediction {
            intent: argmax(&intent_dist),
            slots: slot_dists.iter().map(|d| argmax(d)).collect(),
            intent_dist,
            slot_dists,
        }
    }
}

impl WheelGat {
    /// Fresh parameters drawn from a generator seeded with `seed`.
    pub fn init(config: ModelConfig, sizes: Sizes, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        if sizes.vocab == 0 || sizes.intents == 0 || sizes.slots == 0 {
            return Err(ModelError::Config(format!("empty label space: {sizes:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = EncoderParams::init(
            &mut rng,
            sizes.vocab,
            config.embed_dim,
            config.hidden_dim,
            config.encoder_layers,
            config.gru_bias,
        );
        let graph = (0..config.graph_layers)
            .map(|_| {
                GatLayerParams::init(
                    &mut rng,
                    config.node_dim,
                    config.passing,
                    config.shared_update,
                    config.gru_bias,
                )
            })
            .collect();
        let d = config.node_dim;
        let heads = OutputHeads {
            intent_w: init::uniform(&mut rng, vec![d, sizes.intents], d),
            intent_b: init::uniform(&mut rng, vec![sizes.intents], d),
            slot_w: init::uniform(&mut rng, vec![d, sizes.slots], d),
            slot_b: init::uniform(&mut rng, vec![sizes.slots], d),
        };
        Ok(Self {
            config,
            sizes,
            encoder,
            graph,
            heads,
        })
    }

    /// Records the forward computation for one utterance.
    pub fn forward<'p>(
        &'p self,
        g: &mut Graph<'p>,
        token_ids: &[usize],
        mode: &mut RunMode<'_>,
    ) -> Result<Forward, ModelError> {
        if let Some(&bad) = token_ids.iter().find(|&&t| t >= self.sizes.vocab) {
            return Err(ModelError::Label(format!(
                "token id {bad} outside vocabulary of {}",
                self.sizes.vocab
            )));
        }
        let wheel = WheelGraph::build(token_ids.len(), self.config.flags)?;
        let encoded = encode(g, &self.encoder, token_ids, self.config.dropout, mode)?;
        let h0 = initial_states(g, encoded)?;
        let out = propagate(g, &self.graph, &wheel, h0, self.config.passing, &self.config.layer)?;
        let (h_intent, h_slots) = split_states(g, out.states)?;

        let head = |g: &mut Graph<'p>, h: Var, w: &'p Tensor, b: &'p Tensor| -> Result<Var, TensorError> {
            let wv = g.leaf(w);
            let bv = g.leaf(b);
            let logits = g.matmul(h, wv)?;
            let logits = g.add(logits, bv)?;
            g.softmax(logits)
        };
        let intent_probs = head(g, h_intent, &self.heads.intent_w, &self.heads.intent_b)?;
        let slot_probs = head(g, h_slots, &self.heads.slot_w, &self.heads.slot_b)?;
        Ok(Forward {
            intent_probs,
            slot_probs,
            attention: out.attention,
        })
    }

    /// Evaluation-mode prediction.
    pub fn predict(&self, token_ids: &[usize]) -> Result<Prediction, ModelError> {
        let mut g = Graph::new();
        let fwd = self.forward(&mut g, token_ids, &mut RunMode::Eval)?;
        Ok(fwd.prediction(&g))
    }

    /// Evaluation-mode prediction plus the attention of the last graph layer.
    pub fn predict_with_attention(
        &self,
        token_ids: &[usize],
    ) -> Result<(Prediction, Option<AttentionMatrix>), ModelError> {
        let mut g = Graph::new();
        let mut fwd = self.forward(&mut g, token_ids, &mut RunMode::Eval)?;
        Ok((fwd.prediction(&g), fwd.attention.pop()))
    }
}

impl Parameters for WheelGat {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.encoder.named(&mut out);
        for (l, layer) in self.graph.iter().enumerate() {
            layer.named(&format!("graph.l{}", l + 1), &mut out);
        }
        out.push(("heads.intent.W".into(), &self.heads.intent_w));
        out.push(("heads.intent.b".into(), &self.heads.intent_b));
        out.push(("heads.slot.W".into(), &self.heads.slot_w));
        out.push(("heads.slot.b".into(), &self.heads.slot_b));
        out
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        self.encoder.named_mut(&mut out);
        for (l, layer) in self.graph.iter_mut().enumerate() {
            layer.named_mut(&format!("graph.l{}", l + 1), &mut out);
        }
        out.push(("heads.intent.W".into(), &mut self.heads.intent_w));
        out.push(("heads.intent.b".into(), &mut self.heads.intent_b));
        out.push(("heads.slot.W".into(), &mut self.heads.slot_w));
        out.push(("heads.slot.b".into(), &mut self.heads.slot_b));
        out
    }
}

/// Weight of the intent term; the slot term gets `1 - alpha`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub alpha: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { alpha: 0.1 }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct JointLoss {
    pub total: Var,
    pub intent: Var,
    pub slot: Var,
}

impl JointLoss {
    /// Number of gold probabilities that fell below the clamp.
    pub fn clamped(&self, g: &Graph<'_>) -> usize {
        g.clamped_count(self.intent) + g.clamped_count(self.slot)
    }
}

/// `L = α·(−log y^I[gold]) + (1−α)·Σ_t −log y^S_t[gold_t]`.
pub fn joint_loss(
    g: &mut Graph<'_>,
    fwd: &Forward,
    gold_intent: usize,
    gold_slots: &[usize],
    cfg: LossConfig,
) -> Result<JointLoss, ModelError> {
    if !(0.0..=1.0).contains(&cfg.alpha) {
        return Err(ModelError::Config(format!(
            "alpha must lie in [0, 1], got {}",
            cfg.alpha
        )));
    }
    if gold_intent == UNSEEN_ID || gold_slots.contains(&UNSEEN_ID) {
        return Err(ModelError::Label(
            "label unseen in training cannot enter the loss".into(),
        ));
    }
    let intent = g.nll(fwd.intent_probs, &[gold_intent], PROB_CLAMP)?;
    let slot = g.nll(fwd.slot_probs, gold_slots, PROB_CLAMP)?;
    let a = g.scale(intent, cfg.alpha)?;
    let b = g.scale(slot, 1.0 - cfg.alpha)?;
    let total = g.add(a, b)?;
    Ok(JointLoss { total, intent, slot })
}
