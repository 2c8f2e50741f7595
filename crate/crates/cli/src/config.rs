//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use wheelgat::dataset::Layout;
use wheelgat::model::ModelConfig;
use wheelgat::training::TrainConfig;
use wheelgat::wheelgraph::MessagePassing;

use crate::CliError;

/// Every setting a run depends on.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data_dir: Option<PathBuf>,
    pub layout: Layout,
    pub lowercase: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data_dir: None,
            layout: Layout::Conll,
            lowercase: true,
        }
    }
}

/// Documented keys, in echo order.
pub const KEYS: &[&str] = &[
    "data_dir",
    "layout",
    "lowercase",
    "embed_dim",
    "hidden_dim",
    "node_dim",
    "encoder_layers",
    "graph_layers",
    "intent_to_slot",
    "slot_to_intent",
    "head_tail",
    "self_loops",
    "message_passing",
    "activation",
    "leaky_slope",
    "gru_bias",
    "shared_update",
    "dropout",
    "learning_rate",
    "l2_decay",
    "decoupled_decay",
    "adam_beta1",
    "adam_beta2",
    "adam_eps",
    "batch_size",
    "clip_max_norm",
    "alpha",
    "max_epochs",
    "seed",
    "selection_metric",
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value
        .parse()
        .map_err(|_| CliError::Usage(format!("invalid value {value:?} for {key}")))
}

fn parse_with<T, E: std::fmt::Display>(value: &str, f: impl FnOnce(&str) -> Result<T, E>) -> Result<T, CliError> {
    f(value).map_err(|e| CliError::Usage(e.to_string()))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "data_dir" => self.data_dir = Some(PathBuf::from(value)),
            "layout" => self.layout = parse_with(value, Layout::from_str)?,
            "lowercase" => self.lowercase = parse(key, value)?,
            "embed_dim" => m.embed_dim = parse(key, value)?,
            "hidden_dim" => m.hidden_dim = parse(key, value)?,
            "node_dim" => m.node_dim = parse(key, value)?,
            "encoder_layers" => m.encoder_layers = parse(key, value)?,
            "graph_layers" => m.graph_layers = parse(key, value)?,
            "intent_to_slot" => m.flags.intent_to_slot = parse(key, value)?,
            "slot_to_intent" => m.flags.slot_to_intent = parse(key, value)?,
            "head_tail" => m.flags.head_tail = parse(key, value)?,
            "self_loops" => m.flags.self_loops = parse(key, value)?,
            "message_passing" => m.passing = parse_with(value, str::parse)?,
            "activation" => m.layer.activation = parse_with(value, str::parse)?,
            "leaky_slope" => m.layer.leaky_slope = parse(key, value)?,
            "gru_bias" => m.gru_bias = parse(key, value)?,
            "shared_update" => m.shared_update = parse(key, value)?,
            "dropout" => m.dropout = parse(key, value)?,
            "learning_rate" => t.adam.lr = parse(key, value)?,
            "l2_decay" => t.adam.l2 = parse(key, value)?,
            "decoupled_decay" => t.adam.decoupled = parse(key, value)?,
            "adam_beta1" => t.adam.beta1 = parse(key, value)?,
            "adam_beta2" => t.adam.beta2 = parse(key, value)?,
            "adam_eps" => t.adam.eps = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "clip_max_norm" => t.clip_max_norm = parse(key, value)?,
            "alpha" => t.loss.alpha = parse(key, value)?,
            "max_epochs" => t.max_epochs = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "selection_metric" => t.selection = parse_with(value, str::parse)?,
            _ => return Err(CliError::Usage(format!("unknown configuration key {key:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let m = &self.model;
        let t = &self.train;
        Some(match key {
            "data_dir" => self
                .data_dir
                .as_ref()
                .map_or(String::new(), |p| p.display().to_string()),
            "layout" => self.layout.to_string(),
            "lowercase" => self.lowercase.to_string(),
            "embed_dim" => m.embed_dim.to_string(),
            "hidden_dim" => m.hidden_dim.to_string(),
            "node_dim" => m.node_dim.to_string(),
            "encoder_layers" => m.encoder_layers.to_string(),
            "graph_layers" => m.graph_layers.to_string(),
            "intent_to_slot" => m.flags.intent_to_slot.to_string(),
            "slot_to_intent" => m.flags.slot_to_intent.to_string(),
            "head_tail" => m.flags.head_tail.to_string(),
            "self_loops" => m.flags.self_loops.to_string(),
            "message_passing" => m.passing.name().to_string(),
            "activation" => m.layer.activation.name().to_string(),
            "leaky_slope" => m.layer.leaky_slope.to_string(),
            "gru_bias" => m.gru_bias.to_string(),
            "shared_update" => m.shared_update.to_string(),
            "dropout" => m.dropout.to_string(),
            "learning_rate" => t.adam.lr.to_string(),
            "l2_decay" => t.adam.l2.to_string(),
            "decoupled_decay" => t.adam.decoupled.to_string(),
            "adam_beta1" => t.adam.beta1.to_string(),
            "adam_beta2" => t.adam.beta2.to_string(),
            "adam_eps" => t.adam.eps.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "clip_max_norm" => t.clip_max_norm.to_string(),
            "alpha" => t.loss.alpha.to_string(),
            "max_epochs" => t.max_epochs.to_string(),
            "seed" => t.seed.to_string(),
            "selection_metric" => t.selection.name().to_string(),
            _ => return None,
        })
    }

    /// Applies `key = value` lines. Blank lines and `#` comments are
    /// ignored; an empty value for `data_dir` leaves it unset.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), CliError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("{origin}:{}: expected `key = value`", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if k == "data_dir" && v.is_empty() {
                self.data_dir = None;
                continue;
            }
            self.set(k, v)
                .map_err(|e| CliError::Usage(format!("{origin}:{}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let mut c = Self::default();
        c.apply_text(&text, &path.display().to_string())?;
        Ok(c)
    }

    /// All keys with their resolved values, one `key = value` per line.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for k in KEYS {
            let _ = writeln!(out, "{k} = {}", self.get(k).expect("documented key"));
        }
        out
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        self.train.validate().map_err(|e| CliError::Usage(e.to_string()))
    }

    pub fn apply_variant(&mut self, v: Variant) {
        let m = &mut self.model;
        match v {
            Variant::Full => {}
            Variant::NoIntentToSlot => m.flags.intent_to_slot = false,
            Variant::NoSlotToIntent => m.flags.slot_to_intent = false,
            Variant::NoHeadTail => m.flags.head_tail = false,
            Variant::Gcn => m.passing = MessagePassing::Gcn,
        }
    }
}

/// Ablation settings, each relative to the configured model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Variant {
    Full,
    #[value(name = "no-i2s")]
    NoIntentToSlot,
    #[value(name = "no-s2i")]
    NoSlotToIntent,
    #[value(name = "no-headtail")]
    NoHeadTail,
    Gcn,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoIntentToSlot,
        Variant::NoSlotToIntent,
        Variant::NoHeadTail,
        Variant::Gcn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoIntentToSlot => "no-i2s",
            Variant::NoSlotToIntent => "no-s2i",
            Variant::NoHeadTail => "no-headtail",
            Variant::Gcn => "gcn",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "Wheel-GAT",
            Variant::NoIntentToSlot => "w/o intent->slot",
            Variant::NoSlotToIntent => "w/o slot->intent",
            Variant::NoHeadTail => "w/o head<->tail",
            Variant::Gcn => "GCN instead of GAT",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn echo_round_trips() {
        let mut c = RunConfig::default();
        c.set("embed_dim", "64").unwrap();
        c.set("message_passing", "gcn").unwrap();
        c.set("data_dir", "/tmp/x").unwrap();
        c.set("leaky_slope", "0.015").unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&c.render(), "echo").unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn every_key_renders() {
        let c = RunConfig::default();
        for k in KEYS {
            assert!(c.get(k).is_some(), "{k}");
        }
        assert_eq!(c.render().lines().count(), KEYS.len());
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        let mut c = RunConfig::default();
        assert!(c.apply_text("colour = blue\n", "f").is_err());
        assert!(c.apply_text("embed_dim = big\n", "f").is_err());
        assert!(c.apply_text("just words\n", "f").is_err());
        assert!(c.apply_text("# comment\n\nseed = 4\n", "f").is_ok());
        assert_eq!(c.train.seed, 4);
    }

    #[test]
    fn variants_toggle_one_setting() {
        let base = RunConfig::default();
        for v in Variant::ALL {
            let mut c = base.clone();
            c.apply_variant(v);
            let changed = KEYS.iter().filter(|k| c.get(k) != base.get(k)).count();
            assert_eq!(changed, usize::from(v != Variant::Full), "{v:?}");
        }
    }
}
