//! Line-oriented text form of a [`NetworkGraph`].
//!
//! ```text
//! # comment
//! inputs=[image]
//! image input out=3
//! stem conv kernel=3x3 stride=2x2 pad=1x1 out=32 inputs=[image]
//! outputs=[stem]
//! ```
//!
//! One node per line: `id kind key=value... inputs=[ids]`. Keys equal to
//! their default are omitted. `inputs=[..]`/`outputs=[..]` lines on their own
//! declare the graph inputs and outputs; without an `inputs=` line every
//! `input` node is a graph input, in file order.

use std::collections::HashSet;
use std::fmt::Write as _;

use thiserror::Error;

use super::builder::valid_id;
use super::{LayerKind, LayerSpec, NetworkGraph, Node, NodeId};

/// Largest numeric value accepted for any layer field.
pub const MAX_FIELD_VALUE: usize = 1 << 20;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("line {line}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub message: String,
}

pub(super) fn write_graph(g: &NetworkGraph) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "inputs=[{}]", g.inputs().join(","));
    for n in g.nodes() {
        out.push_str(&n.id);
        out.push(' ');
        out.push_str(n.layer.kind.as_str());
        let d = LayerSpec::bare(n.layer.kind);
        let l = &n.layer;
        if l.kernel != d.kernel {
            let _ = write!(out, " kernel={}x{}", l.kernel.0, l.kernel.1);
        }
        if l.stride != d.stride {
            let _ = write!(out, " stride={}x{}", l.stride.0, l.stride.1);
        }
        if l.padding != d.padding {
            let _ = write!(out, " pad={}x{}", l.padding.0, l.padding.1);
        }
        if l.dilation != d.dilation {
            let _ = write!(out, " dilation={}", l.dilation);
        }
        if l.out_channels != d.out_channels {
            let _ = write!(out, " out={}", l.out_channels);
        }
        if l.groups != d.groups {
            let _ = write!(out, " groups={}", l.groups);
        }
        if l.has_bias != d.has_bias {
            let _ = write!(out, " bias={}", l.has_bias);
        }
        if !n.inputs.is_empty() {
            let _ = write!(out, " inputs=[{}]", n.inputs.join(","));
        }
        out.push('\n');
    }
    let _ = writeln!(out, "outputs=[{}]", g.outputs().join(","));
    out
}

fn err(line: usize, message: impl Into<String>) -> ParseError {
    ParseError {
        line,
        message: message.into(),
    }
}

fn parse_num(line: usize, key: &str, v: &str) -> Result<usize, ParseError> {
    let n: usize = v
        .parse()
        .map_err(|_| err(line, format!("`{key}` expects an integer, got `{v}`")))?;
    if n > MAX_FIELD_VALUE {
        return Err(err(line, format!("`{key}`={n} exceeds {MAX_FIELD_VALUE}")));
    }
    Ok(n)
}

fn parse_pair(line: usize, key: &str, v: &str) -> Result<(usize, usize), ParseError> {
    match v.split_once('x') {
        Some((a, b)) => Ok((parse_num(line, key, a)?, parse_num(line, key, b)?)),
        None => {
            let n = parse_num(line, key, v)?;
            Ok((n, n))
        }
    }
}

fn parse_list(line: usize, v: &str) -> Result<Vec<NodeId>, ParseError> {
    let inner = v
        .strip_prefix('[')
        .and_then(|s| s.strip_suffix(']'))
        .ok_or_else(|| err(line, format!("expected `[id,...]`, got `{v}`")))?;
    if inner.is_empty() {
        return Ok(Vec::new());
    }
    inner
        .split(',')
        .map(|id| {
            if valid_id(id) {
                Ok(id.to_string())
            } else {
                Err(err(line, format!("invalid node id `{id}`")))
            }
        })
        .collect()
}

/// Parses the text form. Structural problems (cycles, dangling inputs, shape
/// errors) are left for [`validate_graph`](super::validate_graph); only
/// syntax is checked here.
pub fn parse_graph(text: &str) -> Result<NetworkGraph, ParseError> {
    let mut nodes = Vec::new();
    let mut inputs: Option<Vec<NodeId>> = None;
    let mut outputs: Option<Vec<NodeId>> = None;

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if let Some(rest) = content.strip_prefix("inputs=") {
            if inputs.replace(parse_list(line, rest)?).is_some() {
                return Err(err(line, "duplicate `inputs=` line"));
            }
            continue;
        }
        if let Some(rest) = content.strip_prefix("outputs=") {
            if outputs.replace(parse_list(line, rest)?).is_some() {
                return Err(err(line, "duplicate `outputs=` line"));
            }
            continue;
        }

        let mut tokens = content.split_whitespace();
        let id = tokens.next().ok_or_else(|| err(line, "missing node id"))?;
        if !valid_id(id) {
            return Err(err(line, format!("invalid node id `{id}`")));
        }
        let kind: LayerKind = tokens
            .next()
            .ok_or_else(|| err(line, "missing layer kind"))?
            .parse()
            .map_err(|e: String| err(line, e))?;
        let mut layer = LayerSpec::bare(kind);
        let mut node_inputs = Vec::new();
        let mut seen = HashSet::new();
        for tok in tokens {
            let (key, value) = tok
                .split_once('=')
                .ok_or_else(|| err(line, format!("expected key=value, got `{tok}`")))?;
            if !seen.insert(key) {
                return Err(err(line, format!("duplicate key `{key}`")));
            }
            match key {
                "kernel" => layer.kernel = parse_pair(line, key, value)?,
                "stride" => layer.stride = parse_pair(line, key, value)?,
                "pad" => layer.padding = parse_pair(line, key, value)?,
                "dilation" => layer.dilation = parse_num(line, key, value)?,
                "out" => layer.out_channels = parse_num(line, key, value)?,
                "groups" => layer.groups = parse_num(line, key, value)?,
                "bias" => {
                    layer.has_bias = match value {
                        "true" | "1" => true,
                        "false" | "0" => false,
                        _ => return Err(err(line, format!("`bias` expects true/false, got `{value}`"))),
                    }
                }
                "inputs" => node_inputs = parse_list(line, value)?,
                _ => return Err(err(line, format!("unknown key `{key}`"))),
            }
        }
        nodes.push(Node {
            id: id.to_string(),
            layer,
            inputs: node_inputs,
        });
    }

    let inputs = inputs.unwrap_or_else(|| {
        nodes
            .iter()
            .filter(|n| n.layer.kind == LayerKind::Input)
            .map(|n| n.id.clone())
            .collect()
    });
    Ok(NetworkGraph::new(nodes, inputs, outputs.unwrap_or_default()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::GraphBuilder;
    use proptest::prelude::*;

    #[test]
    fn parses_the_documented_example() {
        let g = parse_graph(
            "# comment\ninputs=[image]\nimage input out=3\nstem conv kernel=3x3 stride=2x2 pad=1x1 out=32 inputs=[image]\noutputs=[stem]\n",
        )
        .unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!(g.node("stem").unwrap().layer, LayerSpec::conv(32, 3, 2, 1));
        assert_eq!(g.outputs(), ["stem".to_string()]);
    }

    #[test]
    fn rejects_malformed_lines() {
        for (text, line) in [
            ("a input\nb conv kernel=3 kernel=3 inputs=[a]", 2),
            ("a input\nb frobnicate inputs=[a]", 2),
            ("a input out=x", 1),
            ("a input\nb conv wat=1", 2),
            ("a input\nb conv inputs=a", 2),
            ("a input out=99999999999", 1),
            ("inputs=[a]\ninputs=[a]", 2),
            ("a input\nb relu inputs=[a,,b]", 2),
        ] {
            let e = parse_graph(text).unwrap_err();
            assert_eq!(e.line, line, "{text:?}: {e}");
        }
    }

    #[test]
    fn inputs_default_to_input_nodes() {
        let g = parse_graph("x input out=3\ny relu inputs=[x]\n").unwrap();
        assert_eq!(g.inputs(), ["x".to_string()]);
        assert!(g.outputs().is_empty());
    }

    fn arb_layer() -> impl Strategy<Value = LayerSpec> {
        (
            proptest::sample::select(LayerKind::ALL.to_vec()),
            (1usize..8, 1usize..8),
            (1usize..4, 1usize..4),
            (0usize..3, 0usize..3),
            1usize..5,
            0usize..64,
            1usize..5,
            any::<bool>(),
        )
            .prop_map(|(kind, kernel, stride, padding, dilation, out_channels, groups, has_bias)| LayerSpec {
                kind,
                kernel,
                stride,
                padding,
                dilation,
                out_channels,
                groups,
                has_bias,
            })
    }

    proptest! {
        #[test]
        fn text_round_trip_is_lossless(layers in proptest::collection::vec(arb_layer(), 1..12)) {
            let mut nodes = vec![Node { id: "in".into(), layer: LayerSpec::input(3), inputs: vec![] }];
            for (i, l) in layers.iter().enumerate() {
                let prev = nodes.last().unwrap().id.clone();
                let mut ins = vec![prev];
                if i % 3 == 2 {
                    ins.push("in".into());
                }
                nodes.push(Node { id: format!("n{i}/x"), layer: *l, inputs: ins });
            }
            let last = nodes.last().unwrap().id.clone();
            let g = NetworkGraph::new(nodes, vec!["in".into()], vec![last]);
            let back = parse_graph(&g.to_text()).unwrap();
            prop_assert_eq!(back, g);
        }
    }

    #[test]
    fn builder_graph_round_trips() {
        let mut b = GraphBuilder::new();
        let x = b.input("image", 3);
        let c = b.push("c", LayerSpec::conv(8, 3, 2, 1).with_bias(true), &[&x]).unwrap();
        let u = b.push("u", LayerSpec::transposed_conv(8, 4, 2, 1), &[&c, &x]).unwrap();
        let g = b.finish(&[&u]);
        assert_eq!(parse_graph(&g.to_text()).unwrap(), g);
    }
}
