use std::collections::{BTreeMap, HashMap};

use super::{EncoderDescriptor, Tap, ZooError};
use crate::graph::{effective_stride, NetworkGraph, Node, NodeId};

/// Dilation rates given to convs whose original output stride was 16 and 32.
pub const DILATION_RATES: [(usize, usize); 2] = [(16, 2), (32, 4)];

/// Turns a stride-32 encoder into a stride-8 one.
///
/// The downsampling layers at the 8->16 and 16->32 transitions run at stride
/// 1. Pools that cannot keep the resolution at stride 1 (2x2 pools) are
/// bypassed. Every conv with a spatial kernel that originally produced stride
/// 16 gets dilation 2, stride 32 gets dilation 4, with "same" padding. No
/// weights are added or removed, so parameter counts are unchanged.
pub fn apply_dilation_conversion(encoder: &EncoderDescriptor) -> Result<EncoderDescriptor, ZooError> {
    if encoder.output_stride != 32 {
        return Err(ZooError::Structure(format!(
            "dilation conversion needs a stride-32 encoder, `{}` has stride {}",
            encoder.name, encoder.output_stride
        )));
    }
    let g = &encoder.graph;
    let mut out_stride: HashMap<&str, usize> = HashMap::new();
    for n in g.nodes() {
        out_stride.insert(n.id.as_str(), effective_stride(g, &n.id)?);
    }
    let in_stride = |n: &Node| -> usize {
        n.data_inputs()
            .first()
            .map_or(1, |id| out_stride[id.as_str()])
    };

    let mut transitions = [0usize; 2];
    let mut bypass: HashMap<NodeId, NodeId> = HashMap::new();
    let mut nodes: Vec<Node> = Vec::with_capacity(g.len());
    for n in g.nodes() {
        let before = in_stride(n);
        let after = out_stride[n.id.as_str()];
        let mut layer = n.layer;
        let downsamples = after > before;
        if downsamples && (before == 8 || before == 16) {
            transitions[usize::from(before == 16)] += 1;
            if layer.kind.is_pool() {
                let keeps_size = layer.kernel.0 == 2 * layer.padding.0 + 1
                    && layer.kernel.1 == 2 * layer.padding.1 + 1;
                if !keeps_size {
                    bypass.insert(n.id.clone(), n.inputs[0].clone());
                    continue;
                }
            }
            layer.stride = (1, 1);
        }
        if layer.kind.is_forward_conv() && (layer.kernel.0 > 1 || layer.kernel.1 > 1) {
            if let Some(&(_, rate)) = DILATION_RATES.iter().find(|(s, _)| *s == after) {
                if layer.kernel.0 % 2 == 0 || layer.kernel.1 % 2 == 0 {
                    return Err(ZooError::Structure(format!(
                        "cannot dilate even kernel at `{}`",
                        n.id
                    )));
                }
                layer = layer.with_dilation(rate);
            }
        }
        nodes.push(Node {
            id: n.id.clone(),
            layer,
            inputs: n.inputs.clone(),
        });
    }
    if transitions.contains(&0) {
        return Err(ZooError::Structure(format!(
            "`{}` lacks an identifiable stride 8->16 or 16->32 transition",
            encoder.name
        )));
    }

    let resolve = |id: &NodeId| -> NodeId {
        let mut cur = id.clone();
        while let Some(next) = bypass.get(&cur) {
            cur = next.clone();
        }
        cur
    };
    for n in &mut nodes {
        for inp in &mut n.inputs {
            *inp = resolve(inp);
        }
    }
    let output = resolve(&encoder.output);
    let graph = NetworkGraph::new(nodes, g.inputs().to_vec(), vec![output.clone()]);
    let output_stride = effective_stride(&graph, &output)?;

    let mut taps: BTreeMap<usize, Tap> = encoder
        .taps
        .iter()
        .filter(|(s, _)| **s < 8)
        .map(|(s, t)| {
            (
                *s,
                Tap {
                    node: resolve(&t.node),
                    channels: t.channels,
                },
            )
        })
        .collect();
    taps.insert(
        output_stride,
        Tap {
            node: output.clone(),
            channels: encoder.output_channels,
        },
    );

    Ok(EncoderDescriptor {
        name: format!("{}-dilated", encoder.name),
        graph,
        taps,
        output,
        output_channels: encoder.output_channels,
        output_stride,
        width_multiplier: encoder.width_multiplier,
        groups: encoder.groups,
    })
}
