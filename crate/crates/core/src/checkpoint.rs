//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"WGATCKPT"  u32 version  u64 header_len  header (UTF-8)
//! u32 tensor_count
//! per tensor: u32 name_len, name, u32 ndim, u64 dims[ndim], f64 data[prod(dims)]
//! ```
//!
//! The header holds `key=value` hyperparameter lines followed by the
//! `[tokens] N`, `[slots] N` and `[intents] N` sections, one entry per line.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{self, Read, Write};
use std::path::Path;

use crate::autodiff::{Parameters, Tensor};
use crate::dataset::{Table, Vocab};
use crate::model::{ModelConfig, Sizes, WheelGat};
use crate::wheelgraph::TopologyFlags;

pub const MAGIC: &[u8; 8] = b"WGATCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("checkpoint does not match: {0}")]
    Mismatch(String),
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: WheelGat,
    pub vocab: Vocab,
    /// Epoch the parameters were taken from (1-based; 0 = untrained).
    pub epoch: usize,
}

fn fmt_err(m: impl Into<String>) -> CheckpointError {
    CheckpointError::Format(m.into())
}

fn config_lines(c: &ModelConfig, lowercase: bool) -> Vec<(&'static str, String)> {
    vec![
        ("embed_dim", c.embed_dim.to_string()),
        ("hidden_dim", c.hidden_dim.to_string()),
        ("node_dim", c.node_dim.to_string()),
        ("encoder_layers", c.encoder_layers.to_string()),
        ("graph_layers", c.graph_layers.to_string()),
        ("intent_to_slot", c.flags.intent_to_slot.to_string()),
        ("slot_to_intent", c.flags.slot_to_intent.to_string()),
        ("head_tail", c.flags.head_tail.to_string()),
        ("self_loops", c.flags.self_loops.to_string()),
        ("message_passing", c.passing.name().to_string()),
        ("activation", c.layer.activation.name().to_string()),
        ("leaky_slope", c.layer.leaky_slope.to_string()),
        ("gru_bias", c.gru_bias.to_string()),
        ("shared_update", c.shared_update.to_string()),
        ("dropout", c.dropout.to_string()),
        ("lowercase", lowercase.to_string()),
    ]
}

fn write_header(ck: &Checkpoint) -> String {
    let mut h = String::new();
    for (k, v) in config_lines(&ck.model.config, ck.vocab.lowercase) {
        let _ = writeln!(h, "{k}={v}");
    }
    let _ = writeln!(h, "epoch={}", ck.epoch);
    for (name, table) in [
        ("tokens", &ck.vocab.tokens),
        ("slots", &ck.vocab.slots),
        ("intents", &ck.vocab.intents),
    ] {
        let _ = writeln!(h, "[{name}] {}", table.len());
        for item in table.items() {
            let _ = writeln!(h, "{item}");
        }
    }
    h
}

struct Header {
    config: ModelConfig,
    lowercase: bool,
    epoch: usize,
    tables: Vec<Vec<String>>,
}

fn parse_header(text: &str) -> Result<Header, CheckpointError> {
    let mut lines = text.lines();
    let mut kv = BTreeMap::new();
    let mut first_section = None;
    for line in lines.by_ref() {
        if line.starts_with('[') {
            first_section = Some(line);
            break;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| fmt_err(format!("header line {line:?} is not key=value")))?;
        kv.insert(k.to_string(), v.to_string());
    }

    let mut tables = Vec::new();
    let mut section = first_section;
    for expected in ["tokens", "slots", "intents"] {
        let line = section.ok_or_else(|| fmt_err(format!("missing [{expected}] section")))?;
        let count = line
            .strip_prefix(&format!("[{expected}] "))
            .and_then(|n| n.parse::<usize>().ok())
            .ok_or_else(|| fmt_err(format!("expected `[{expected}] N`, found {line:?}")))?;
        let mut items = Vec::with_capacity(count);
        for _ in 0..count {
            items.push(
                lines
                    .next()
                    .ok_or_else(|| fmt_err(format!("[{expected}] section truncated")))?
                    .to_string(),
            );
        }
        tables.push(items);
        section = lines.next();
    }
    if let Some(extra) = section {
        return Err(fmt_err(format!("unexpected header line {extra:?}")));
    }

    let mut take = |k: &str| kv.remove(k).ok_or_else(|| fmt_err(format!("header is missing {k}")));
    fn parse<T: std::str::FromStr>(k: &str, v: String) -> Result<T, CheckpointError> {
        v.parse().map_err(|_| fmt_err(format!("bad value {v:?} for {k}")))
    }
    let config = ModelConfig {
        embed_dim: parse("embed_dim", take("embed_dim")?)?,
        hidden_dim: parse("hidden_dim", take("hidden_dim")?)?,
        node_dim: parse("node_dim", take("node_dim")?)?,
        encoder_layers: parse("encoder_layers", take("encoder_layers")?)?,
        graph_layers: parse("graph_layers", take("graph_layers")?)?,
        flags: TopologyFlags {
            intent_to_slot: parse("intent_to_slot", take("intent_to_slot")?)?,
            slot_to_intent: parse("slot_to_intent", take("slot_to_intent")?)?,
            head_tail: parse("head_tail", take("head_tail")?)?,
            self_loops: parse("self_loops", take("self_loops")?)?,
        },
        passing: parse("message_passing", take("message_passing")?)?,
        layer: crate::wheelgraph::LayerConfig {
            activation: parse("activation", take("activation")?)?,
            leaky_slope: parse("leaky_slope", take("leaky_slope")?)?,
        },
        gru_bias: parse("gru_bias", take("gru_bias")?)?,
        shared_update: parse("shared_update", take("shared_update")?)?,
        dropout: parse("dropout", take("dropout")?)?,
    };
    let lowercase = parse("lowercase", take("lowercase")?)?;
    let epoch = parse("epoch", take("epoch")?)?;
    if let Some(k) = kv.keys().next() {
        return Err(fmt_err(format!("unknown header key {k}")));
    }
    Ok(Header {
        config,
        lowercase,
        epoch,
        tables,
    })
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = write_header(self);
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        let params = self.model.named_params();
        out.extend_from_slice(&(params.len() as u32).to_le_bytes());
        for (name, t) in params {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = bytes;
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(fmt_err("not a checkpoint file (bad magic)"));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(fmt_err(format!("unsupported version {version}")));
        }
        let header_len = read_u64(&mut r)? as usize;
        if header_len > r.len() {
            return Err(fmt_err("header length exceeds file size"));
        }
        let (header_bytes, rest) = r.split_at(header_len);
        r = rest;
        let header = std::str::from_utf8(header_bytes).map_err(|_| fmt_err("header is not UTF-8"))?;
        let Header {
            config,
            lowercase,
            epoch,
            mut tables,
        } = parse_header(header)?;
        let table = |items: Vec<String>| Table::from_items(items).map_err(fmt_err);
        let intents = table(tables.pop().expect("three tables"))?;
        let slots = table(tables.pop().expect("three tables"))?;
        let tokens = table(tables.pop().expect("three tables"))?;
        let vocab = Vocab::from_tables(tokens, slots, intents, lowercase).map_err(|e| fmt_err(e.to_string()))?;
        let sizes = Sizes {
            vocab: vocab.tokens.len(),
            intents: vocab.intents.len(),
            slots: vocab.slots.len(),
        };
        let mut model = WheelGat::init(config, sizes, 0).map_err(|e| CheckpointError::Mismatch(e.to_string()))?;

        let count = read_u32(&mut r)? as usize;
        let mut loaded: BTreeMap<String, Tensor> = BTreeMap::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r)? as usize;
            let name = String::from_utf8(take_bytes(&mut r, name_len)?.to_vec())
                .map_err(|_| fmt_err("tensor name is not UTF-8"))?;
            let ndim = read_u32(&mut r)? as usize;
            let shape = (0..ndim)
                .map(|_| read_u64(&mut r).map(|d| d as usize))
                .collect::<Result<Vec<_>, _>>()?;
            let n = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|n| n.checked_mul(8).is_some_and(|b| b <= r.len()))
                .ok_or_else(|| fmt_err(format!("tensor {name} is truncated")))?;
            let data = take_bytes(&mut r, n * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::param(shape, data).map_err(|e| fmt_err(e.to_string()))?;
            if loaded.insert(name.clone(), t).is_some() {
                return Err(fmt_err(format!("tensor {name} appears twice")));
            }
        }
        if !r.is_empty() {
            return Err(fmt_err("trailing bytes after tensors"));
        }

        for (name, slot) in model.named_params_mut() {
            let t = loaded
                .remove(&name)
                .ok_or_else(|| CheckpointError::Mismatch(format!("missing tensor {name}")))?;
            if t.shape() != slot.shape() {
                return Err(CheckpointError::Mismatch(format!(
                    "tensor {name} has shape {:?}, configuration implies {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        if let Some(name) = loaded.keys().next() {
            return Err(CheckpointError::Mismatch(format!("unexpected tensor {name}")));
        }
        Ok(Self { model, vocab, epoch })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let io_err = |source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut f = std::fs::File::create(path).map_err(io_err)?;
        f.write_all(&self.to_bytes()).map_err(io_err)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }

    /// Fails unless `config` describes the same architecture as the stored
    /// model. Dropout is a training-time setting and is not compared.
    pub fn check_config(&self, config: &ModelConfig) -> Result<(), CheckpointError> {
        let stored = config_lines(&self.model.config, false);
        let given = config_lines(config, false);
        for ((k, a), (_, b)) in stored.iter().zip(&given) {
            if *k != "dropout" && a != b {
                return Err(CheckpointError::Mismatch(format!(
                    "{k} is {a} in the checkpoint but {b} in the configuration"
                )));
            }
        }
        Ok(())
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<(), CheckpointError> {
    r.read_exact(buf).map_err(|_| fmt_err("unexpected end of file"))
}

fn take_bytes<'a>(r: &mut &'a [u8], n: usize) -> Result<&'a [u8], CheckpointError> {
    if n > r.len() {
        return Err(fmt_err("unexpected end of file"));
    }
    let (head, tail) = r.split_at(n);
    *r = tail;
    Ok(head)
}

fn read_u32(r: &mut &[u8]) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> Result<u64, CheckpointError> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}
