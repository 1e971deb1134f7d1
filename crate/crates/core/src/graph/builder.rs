use std::collections::HashMap;

use super::{infer_channels, GraphError, LayerKind, LayerSpec, NetworkGraph, Node, NodeId};

/// Incremental graph construction with channel bookkeeping.
///
/// Ids may not contain whitespace, `[`, `]`, `,` or `=` so the text format
/// stays unambiguous.
#[derive(Debug, Clone, Default)]
pub struct GraphBuilder {
    nodes: Vec<Node>,
    inputs: Vec<NodeId>,
    channels: HashMap<NodeId, usize>,
}

pub(crate) fn valid_id(id: &str) -> bool {
    !id.is_empty()
        && !id
            .chars()
            .any(|c| c.is_whitespace() || matches!(c, '[' | ']' | ',' | '=' | '#'))
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Starts from an existing graph (its outputs are dropped; call
    /// [`finish`](Self::finish) with the new ones).
    pub fn from_graph(graph: &NetworkGraph) -> Result<Self, GraphError> {
        let mut b = Self::new();
        let order = super::topological_order(graph)?;
        for i in order {
            let n = &graph.nodes()[i];
            let ins: Vec<usize> = n.inputs.iter().map(|id| b.channels[id]).collect();
            let c = if n.layer.kind == LayerKind::Input {
                n.layer.out_channels
            } else {
                infer_channels(&n.layer, &ins)?
            };
            b.channels.insert(n.id.clone(), c);
        }
        b.nodes = graph.nodes().to_vec();
        b.inputs = graph.inputs().to_vec();
        Ok(b)
    }

    pub fn input(&mut self, id: &str, channels: usize) -> NodeId {
        assert!(valid_id(id), "invalid node id `{id}`");
        assert!(!self.channels.contains_key(id), "duplicate node id `{id}`");
        self.nodes.push(Node {
            id: id.to_string(),
            layer: LayerSpec::input(channels),
            inputs: Vec::new(),
        });
        self.inputs.push(id.to_string());
        self.channels.insert(id.to_string(), channels);
        id.to_string()
    }

    /// Appends a node. Fails on unknown inputs, duplicate ids, or channel
    /// arithmetic violations (group divisibility, depthwise shape).
    pub fn push(&mut self, id: &str, layer: LayerSpec, inputs: &[&NodeId]) -> Result<NodeId, GraphError> {
        if !valid_id(id) {
            return Err(GraphError::InvalidLayer(format!("invalid node id `{id}`")));
        }
        if self.channels.contains_key(id) {
            return Err(GraphError::InvalidLayer(format!("duplicate node id `{id}`")));
        }
        let mut ins = Vec::with_capacity(inputs.len());
        for &i in inputs {
            ins.push(
                *self
                    .channels
                    .get(i.as_str())
                    .ok_or_else(|| GraphError::UnknownNode(i.clone()))?,
            );
        }
        let c = infer_channels(&layer, &ins)?;
        self.nodes.push(Node {
            id: id.to_string(),
            layer,
            inputs: inputs.iter().map(|s| (*s).clone()).collect(),
        });
        self.channels.insert(id.to_string(), c);
        Ok(id.to_string())
    }

    pub fn channels(&self, id: &str) -> Option<usize> {
        self.channels.get(id).copied()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.channels.contains_key(id)
    }

    pub fn finish(self, outputs: &[&NodeId]) -> NetworkGraph {
        NetworkGraph::new(
            self.nodes,
            self.inputs,
            outputs.iter().map(|s| (*s).clone()).collect(),
        )
    }
}
