use std::collections::BTreeMap;
use std::fmt::Write;

use super::INTENT_NODE;

/// Attention weights keyed by `(target, source)` edge. Only existing edges
/// have entries.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMatrix {
    node_count: usize,
    weights: BTreeMap<(usize, usize), f64>,
}

impl AttentionMatrix {
    pub fn from_edges(node_count: usize, edges: &[(usize, usize)], alpha: &[f64]) -> Self {
        let weights = edges.iter().copied().zip(alpha.iter().copied()).collect();
        Self { node_count, weights }
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn get(&self, target: usize, source: usize) -> Option<f64> {
        self.weights.get(&(target, source)).copied()
    }

    /// `(source, α)` pairs for one target, sources ascending.
    pub fn row(&self, target: usize) -> Vec<(usize, f64)> {
        self.weights
            .range((target, 0)..(target + 1, 0))
            .map(|(&(_, s), &w)| (s, w))
            .collect()
    }

    pub fn entries(&self) -> impl Iterator<Item = ((usize, usize), f64)> + '_ {
        self.weights.iter().map(|(k, v)| (*k, *v))
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

fn node_label(node: usize, tokens: &[String]) -> String {
    if node == INTENT_NODE {
        "INTENT".to_string()
    } else {
        format!("tok[{}]={}", node - 1, tokens[node - 1])
    }
}

/// Text dump of one utterance's attention:
///
/// ```text
/// # <utterance text> | intent=<gold>
/// INTENT <- tok[0]=play: 0.123456
/// tok[0]=play <- INTENT: 0.500000
/// ```
///
/// The intent row comes first, then one row per slot node in token order.
pub fn render_attention(att: &AttentionMatrix, tokens: &[String], intent: &str) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# {} | intent={}", tokens.join(" "), intent);
    for target in 0..att.node_count() {
        for (source, w) in att.row(target) {
            let _ = writeln!(
                out,
                "{} <- {}: {:.6}",
                node_label(target, tokens),
                node_label(source, tokens),
                w
            );
        }
    }
    out
}

/// One parsed line of an attention dump.
#[derive(Debug, Clone, PartialEq)]
pub struct DumpLine {
    pub target: String,
    pub source: String,
    pub weight: f64,
}

/// Parses blocks written by [`render_attention`] into `(header, lines)`.
pub fn parse_attention_dump(text: &str) -> Result<Vec<(String, Vec<DumpLine>)>, String> {
    let mut blocks: Vec<(String, Vec<DumpLine>)> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        if let Some(h) = line.strip_prefix("# ") {
            blocks.push((h.to_string(), Vec::new()));
            continue;
        }
        let block = blocks
            .last_mut()
            .ok_or_else(|| format!("line {}: entry before any header", i + 1))?;
        let (edge, weight) = line
            .rsplit_once(": ")
            .ok_or_else(|| format!("line {}: missing weight", i + 1))?;
        let (target, source) = edge
            .split_once(" <- ")
            .ok_or_else(|| format!("line {}: missing `<-`", i + 1))?;
        let weight = weight.parse().map_err(|e| format!("line {}: bad weight: {e}", i + 1))?;
        block.1.push(DumpLine {
            target: target.to_string(),
            source: source.to_string(),
            weight,
        });
    }
    Ok(blocks)
}
