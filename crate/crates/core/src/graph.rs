//! The per-token computation graph of the transformer.
//!
//! Sources write into the residual stream (the embedding, each attention
//! head's output, each MLP's output); destinations read from it (each
//! head's Q/K/V input, each MLP's input, and the final logits). An edge
//! src→dst exists whenever the source's contribution is part of the
//! destination's input, and a node's total input is exactly the sum of its
//! incoming edge activations. Edges are instantiated once per token
//! position.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum NodeId {
    Embed,
    AttnQ { layer: usize, head: usize },
    AttnK { layer: usize, head: usize },
    AttnV { layer: usize, head: usize },
    AttnO { layer: usize, head: usize },
    MlpIn { layer: usize },
    MlpOut { layer: usize },
    Logits,
}

impl NodeId {
    pub fn is_source(self) -> bool {
        matches!(self, NodeId::Embed | NodeId::AttnO { .. } | NodeId::MlpOut { .. })
    }

    pub fn is_destination(self) -> bool {
        matches!(
            self,
            NodeId::AttnQ { .. }
                | NodeId::AttnK { .. }
                | NodeId::AttnV { .. }
                | NodeId::MlpIn { .. }
                | NodeId::Logits
        )
    }

    /// Stage at which a source's contribution becomes available.
    fn source_stage(self) -> Option<usize> {
        match self {
            NodeId::Embed => Some(0),
            NodeId::AttnO { layer, .. } => Some(2 * layer + 1),
            NodeId::MlpOut { layer } => Some(2 * layer + 2),
            _ => None,
        }
    }

    /// Stage at which a destination consumes its input.
    fn dest_stage(self) -> Option<usize> {
        match self {
            NodeId::AttnQ { layer, .. } | NodeId::AttnK { layer, .. } | NodeId::AttnV { layer, .. } => {
                Some(2 * layer + 1)
            }
            NodeId::MlpIn { layer } => Some(2 * layer + 2),
            NodeId::Logits => Some(usize::MAX),
            _ => None,
        }
    }

    /// Deterministic ordering key: stage, then kind, then head.
    pub fn sort_key(self) -> (usize, u8, usize) {
        match self {
            NodeId::Embed => (0, 0, 0),
            NodeId::AttnQ { layer, head } => (2 * layer + 1, 1, head),
            NodeId::AttnK { layer, head } => (2 * layer + 1, 2, head),
            NodeId::AttnV { layer, head } => (2 * layer + 1, 3, head),
            NodeId::AttnO { layer, head } => (2 * layer + 1, 4, head),
            NodeId::MlpIn { layer } => (2 * layer + 2, 5, 0),
            NodeId::MlpOut { layer } => (2 * layer + 2, 6, 0),
            NodeId::Logits => (usize::MAX, 7, 0),
        }
    }
}

impl PartialOrd for NodeId {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for NodeId {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.sort_key().cmp(&other.sort_key())
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NodeId::Embed => f.write_str("embed"),
            NodeId::AttnQ { layer, head } => write!(f, "A.{layer}.{head}.Q"),
            NodeId::AttnK { layer, head } => write!(f, "A.{layer}.{head}.K"),
            NodeId::AttnV { layer, head } => write!(f, "A.{layer}.{head}.V"),
            NodeId::AttnO { layer, head } => write!(f, "A.{layer}.{head}.O"),
            NodeId::MlpIn { layer } => write!(f, "MLP in {layer}"),
            NodeId::MlpOut { layer } => write!(f, "MLP out {layer}"),
            NodeId::Logits => f.write_str("logits"),
        }
    }
}

impl FromStr for NodeId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "embed" => return Ok(NodeId::Embed),
            "logits" => return Ok(NodeId::Logits),
            _ => {}
        }
        if let Some(rest) = s.strip_prefix("A.") {
            let parts: Vec<&str> = rest.split('.').collect();
            if parts.len() == 3 {
                let layer = parts[0].parse().map_err(|_| Error::UnknownEdge(s.to_string()))?;
                let head = parts[1].parse().map_err(|_| Error::UnknownEdge(s.to_string()))?;
                return match parts[2] {
                    "Q" => Ok(NodeId::AttnQ { layer, head }),
                    "K" => Ok(NodeId::AttnK { layer, head }),
                    "V" => Ok(NodeId::AttnV { layer, head }),
                    "O" => Ok(NodeId::AttnO { layer, head }),
                    _ => Err(Error::UnknownEdge(s.to_string())),
                };
            }
        }
        if let Some(layer) = s.strip_prefix("MLP in ") {
            let layer = layer.parse().map_err(|_| Error::UnknownEdge(s.to_string()))?;
            return Ok(NodeId::MlpIn { layer });
        }
        if let Some(layer) = s.strip_prefix("MLP out ") {
            let layer = layer.parse().map_err(|_| Error::UnknownEdge(s.to_string()))?;
            return Ok(NodeId::MlpOut { layer });
        }
        Err(Error::UnknownEdge(s.to_string()))
    }
}

impl From<NodeId> for String {
    fn from(n: NodeId) -> String {
        n.to_string()
    }
}

impl TryFrom<String> for NodeId {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Edge {
    pub src: NodeId,
    pub dst: NodeId,
}

impl Edge {
    pub fn new(src: NodeId, dst: NodeId) -> Edge {
        Edge { src, dst }
    }
}

impl fmt::Display for Edge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} -> {}", self.src, self.dst)
    }
}

#[derive(Debug, Clone)]
pub struct ComputationGraph {
    pub n_layers: usize,
    pub n_heads: usize,
    nodes: Vec<NodeId>,
    sources: Vec<NodeId>,
    destinations: Vec<NodeId>,
    edges: Vec<Edge>,
}

impl ComputationGraph {
    pub fn new(config: &ModelConfig) -> ComputationGraph {
        let (l_total, h_total) = (config.n_layers, config.n_heads);
        let mut sources = vec![NodeId::Embed];
        let mut destinations = Vec::new();
        for layer in 0..l_total {
            for head in 0..h_total {
                destinations.push(NodeId::AttnQ { layer, head });
                destinations.push(NodeId::AttnK { layer, head });
                destinations.push(NodeId::AttnV { layer, head });
                sources.push(NodeId::AttnO { layer, head });
            }
            destinations.push(NodeId::MlpIn { layer });
            sources.push(NodeId::MlpOut { layer });
        }
        destinations.push(NodeId::Logits);

        let mut nodes: Vec<NodeId> = sources.iter().chain(&destinations).copied().collect();
        nodes.sort();

        let mut edges = Vec::new();
        for &src in &sources {
            for &dst in &destinations {
                if src.source_stage().unwrap() < dst.dest_stage().unwrap() {
                    edges.push(Edge::new(src, dst));
                }
            }
        }
        edges.sort();
        ComputationGraph { n_layers: l_total, n_heads: h_total, nodes, sources, destinations, edges }
    }

    pub fn nodes(&self) -> &[NodeId] {
        &self.nodes
    }

    pub fn sources(&self) -> &[NodeId] {
        &self.sources
    }

    pub fn destinations(&self) -> &[NodeId] {
        &self.destinations
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn has_edge(&self, edge: &Edge) -> bool {
        match (edge.src.source_stage(), edge.dst.dest_stage()) {
            (Some(s), Some(d)) => s < d && self.contains_node(edge.src) && self.contains_node(edge.dst),
            _ => false,
        }
    }

    fn contains_node(&self, n: NodeId) -> bool {
        let (layer, head) = match n {
            NodeId::Embed | NodeId::Logits => return true,
            NodeId::AttnQ { layer, head }
            | NodeId::AttnK { layer, head }
            | NodeId::AttnV { layer, head }
            | NodeId::AttnO { layer, head } => (layer, head),
            NodeId::MlpIn { layer } | NodeId::MlpOut { layer } => (layer, 0),
        };
        layer < self.n_layers && head < self.n_heads
    }

    /// All attention heads as (layer, head) pairs.
    pub fn attention_heads(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.n_layers * self.n_heads);
        for layer in 0..self.n_layers {
            for head in 0..self.n_heads {
                out.push((layer, head));
            }
        }
        out
    }

    /// Sources feeding a destination.
    pub fn predecessors(&self, dst: NodeId) -> Vec<NodeId> {
        let Some(d) = dst.dest_stage() else { return Vec::new() };
        self.sources
            .iter()
            .copied()
            .filter(|s| s.source_stage().unwrap() < d)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn cfg(layers: usize, heads: usize) -> ModelConfig {
        ModelConfig {
            n_layers: layers,
            n_heads: heads,
            d_model: heads * 4,
            d_head: 4,
            d_mlp: 8,
            vocab_size: 10,
            max_seq_len: 8,
            seed: 0,
            norm: Default::default(),
            activation: Default::default(),
            attention: Default::default(),
        }
    }

    #[test]
    fn edge_count_for_two_layers_four_heads() {
        let g = ComputationGraph::new(&cfg(2, 4));
        // embed→27 dests, 4×(A0 head→15), M0→14, 4×(A1 head→2), M1→1
        assert_eq!(g.edges().len(), 27 + 60 + 14 + 8 + 1);
        assert_eq!(g.sources().len(), 11);
        assert_eq!(g.destinations().len(), 27);
    }

    #[test]
    fn node_names_round_trip() {
        let g = ComputationGraph::new(&cfg(2, 4));
        for &n in g.nodes() {
            let s = n.to_string();
            let back: NodeId = s.parse().unwrap();
            assert_eq!(back, n);
        }
        assert_eq!(NodeId::AttnK { layer: 12, head: 2 }.to_string(), "A.12.2.K");
    }

    #[test]
    fn attention_output_feeds_same_layer_mlp_but_not_same_layer_qkv() {
        let g = ComputationGraph::new(&cfg(2, 2));
        let o = NodeId::AttnO { layer: 0, head: 1 };
        assert!(g.has_edge(&Edge::new(o, NodeId::MlpIn { layer: 0 })));
        assert!(!g.has_edge(&Edge::new(o, NodeId::AttnQ { layer: 0, head: 0 })));
        assert!(g.has_edge(&Edge::new(o, NodeId::AttnV { layer: 1, head: 0 })));
        assert!(g.has_edge(&Edge::new(NodeId::MlpOut { layer: 1 }, NodeId::Logits)));
        assert!(!g.has_edge(&Edge::new(NodeId::MlpOut { layer: 1 }, NodeId::MlpIn { layer: 1 })));
    }

    #[test]
    fn predecessors_cover_incoming_edges() {
        let g = ComputationGraph::new(&cfg(2, 2));
        for &dst in g.destinations() {
            let preds = g.predecessors(dst);
            let incoming = g.edges().iter().filter(|e| e.dst == dst).count();
            assert_eq!(preds.len(), incoming);
        }
    }
}
