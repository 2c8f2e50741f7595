use std::collections::BTreeSet;

use super::GraphError;

/// Node 0 is the intent node; slot node `t + 1` stands for token `t`.
pub const INTENT_NODE: usize = 0;

/// Which edge families make up the wheel. The rim between adjacent slot
/// nodes is always present.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TopologyFlags {
    pub intent_to_slot: bool,
    pub slot_to_intent: bool,
    pub head_tail: bool,
    pub self_loops: bool,
}

impl Default for TopologyFlags {
    fn default() -> Self {
        Self {
            intent_to_slot: true,
            slot_to_intent: true,
            head_tail: true,
            self_loops: true,
        }
    }
}

impl TopologyFlags {
    /// Every combination of the four flags.
    pub fn all_combinations() -> impl Iterator<Item = TopologyFlags> {
        (0u8..16).map(|b| TopologyFlags {
            intent_to_slot: b & 1 != 0,
            slot_to_intent: b & 2 != 0,
            head_tail: b & 4 != 0,
            self_loops: b & 8 != 0,
        })
    }
}

/// Directed graph over one intent node and `T` slot nodes, stored as
/// in-neighborhoods: `in_neighbors[i]` lists every `j` with an edge `j → i`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WheelGraph {
    tokens: usize,
    flags: TopologyFlags,
    in_neighbors: Vec<Vec<usize>>,
}

impl WheelGraph {
    pub fn build(tokens: usize, flags: TopologyFlags) -> Result<Self, GraphError> {
        if tokens < 1 {
            return Err(GraphError::Domain("a wheel graph needs at least one token".into()));
        }
        let n = tokens + 1;
        let mut sets: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
        let mut edge = |src: usize, dst: usize| {
            sets[dst].insert(src);
        };
        for s in 1..=tokens {
            if flags.intent_to_slot {
                edge(INTENT_NODE, s);
            }
            if flags.slot_to_intent {
                edge(s, INTENT_NODE);
            }
        }
        for s in 1..tokens {
            edge(s, s + 1);
            edge(s + 1, s);
        }
        if flags.head_tail && tokens >= 2 {
            edge(1, tokens);
            edge(tokens, 1);
        }
        if flags.self_loops {
            for i in 0..n {
                edge(i, i);
            }
        }
        Ok(Self {
            tokens,
            flags,
            in_neighbors: sets.into_iter().map(|s| s.into_iter().collect()).collect(),
        })
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn node_count(&self) -> usize {
        self.tokens + 1
    }

    pub fn flags(&self) -> TopologyFlags {
        self.flags
    }

    /// `N(i)`, ascending.
    pub fn in_neighbors(&self, node: usize) -> &[usize] {
        &self.in_neighbors[node]
    }

    pub fn edge_count(&self) -> usize {
        self.in_neighbors.iter().map(Vec::len).sum()
    }

    /// `(target, source)` pairs grouped by target, targets ascending.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.in_neighbors
            .iter()
            .enumerate()
            .flat_map(|(t, srcs)| srcs.iter().map(move |&s| (t, s)))
            .collect()
    }

    /// Segment boundaries of `edges()`: target `i` owns
    /// `offsets[i]..offsets[i + 1]`.
    pub fn offsets(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.in_neighbors.len() + 1);
        let mut acc = 0;
        out.push(0);
        for srcs in &self.in_neighbors {
            acc += srcs.len();
            out.push(acc);
        }
        out
    }

    /// Fails if some node has no in-neighbor to aggregate over.
    pub fn check_nonempty(&self) -> Result<(), GraphError> {
        match self.in_neighbors.iter().position(Vec::is_empty) {
            Some(node) => Err(GraphError::EmptyNeighborhood { node }),
            None => Ok(()),
        }
    }
}

/// Closed-form edge count for the given flags.
pub fn expected_edge_count(tokens: usize, flags: TopologyFlags) -> usize {
    let t = tokens;
    let spokes = t * (flags.intent_to_slot as usize + flags.slot_to_intent as usize);
    let rim = 2 * t.saturating_sub(1);
    let head_tail = if flags.head_tail && t >= 3 { 2 } else { 0 };
    let selfs = if flags.self_loops { t + 1 } else { 0 };
    spokes + rim + head_tail + selfs
}
