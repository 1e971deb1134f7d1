use std::collections::{HashMap, HashSet, VecDeque};
use std::fmt;

use super::{infer_shape, GraphError, LayerKind, NetworkGraph, NodeId, TensorShape};

/// Spatial size used when validating a graph without explicit input shapes.
pub const PROBE_HEIGHT: usize = 64;
pub const PROBE_WIDTH: usize = 128;

/// Node indices in an order where every node follows all of its inputs
/// (size references included). Ties keep declaration order.
pub fn topological_order(graph: &NetworkGraph) -> Result<Vec<usize>, GraphError> {
    let nodes = graph.nodes();
    let mut indegree = vec![0usize; nodes.len()];
    let mut consumers: Vec<Vec<usize>> = vec![Vec::new(); nodes.len()];
    for (i, node) in nodes.iter().enumerate() {
        for inp in &node.inputs {
            let j = graph
                .position(inp)
                .ok_or_else(|| GraphError::UnknownNode(inp.clone()))?;
            indegree[i] += 1;
            consumers[j].push(i);
        }
    }
    let mut ready: VecDeque<usize> = (0..nodes.len()).filter(|&i| indegree[i] == 0).collect();
    let mut order = Vec::with_capacity(nodes.len());
    while let Some(i) = ready.pop_front() {
        order.push(i);
        for &c in &consumers[i] {
            indegree[c] -= 1;
            if indegree[c] == 0 {
                ready.push_back(c);
            }
        }
    }
    if order.len() != nodes.len() {
        let stuck = (0..nodes.len()).find(|&i| indegree[i] > 0).unwrap_or(0);
        return Err(GraphError::Cycle(nodes[stuck].id.clone()));
    }
    Ok(order)
}

/// Shape of every node given one shape per declared graph input.
pub fn infer_shapes(
    graph: &NetworkGraph,
    input_shapes: &[TensorShape],
) -> Result<HashMap<NodeId, TensorShape>, GraphError> {
    if graph.inputs().len() != input_shapes.len() {
        return Err(GraphError::InputArity {
            declared: graph.inputs().len(),
            given: input_shapes.len(),
        });
    }
    let order = topological_order(graph)?;
    let mut shapes: HashMap<NodeId, TensorShape> = HashMap::with_capacity(graph.len());
    for i in order {
        let node = &graph.nodes()[i];
        let ins: Vec<TensorShape> = if node.layer.kind == LayerKind::Input {
            let slot = graph
                .inputs()
                .iter()
                .position(|id| *id == node.id)
                .ok_or_else(|| GraphError::UnknownNode(node.id.clone()))?;
            vec![input_shapes[slot]]
        } else {
            node.inputs.iter().map(|id| shapes[id]).collect()
        };
        let out = infer_shape(&node.layer, &ins).map_err(|e| annotate(&node.id, e))?;
        shapes.insert(node.id.clone(), out);
    }
    Ok(shapes)
}

fn annotate(node: &str, err: GraphError) -> GraphError {
    match err {
        GraphError::ShapeMismatch(m) => GraphError::ShapeMismatch(format!("at `{node}`: {m}")),
        GraphError::InvalidLayer(m) => GraphError::InvalidLayer(format!("at `{node}`: {m}")),
        other => other,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    DuplicateId { node: NodeId },
    DanglingInput { node: NodeId, missing: NodeId },
    Cycle { nodes: Vec<NodeId> },
    MissingGraphInput { id: NodeId },
    UndeclaredInput { node: NodeId },
    MissingOutput { id: NodeId },
    Unreachable { node: NodeId },
    ShapeMismatch { node: NodeId, detail: String },
    GroupDivisibility { node: NodeId, detail: String },
    InvalidLayer { node: NodeId, detail: String },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DuplicateId { node } => write!(f, "duplicate node id `{node}`"),
            Violation::DanglingInput { node, missing } => {
                write!(f, "`{node}` references missing node `{missing}`")
            }
            Violation::Cycle { nodes } => write!(f, "cycle among [{}]", nodes.join(",")),
            Violation::MissingGraphInput { id } => {
                write!(f, "declared input `{id}` is not an input node")
            }
            Violation::UndeclaredInput { node } => {
                write!(f, "input node `{node}` is not listed in the graph inputs")
            }
            Violation::MissingOutput { id } => write!(f, "declared output `{id}` does not exist"),
            Violation::Unreachable { node } => write!(f, "`{node}` is not reachable from any input"),
            Violation::ShapeMismatch { node, detail } => write!(f, "`{node}`: {detail}"),
            Violation::GroupDivisibility { node, detail } => write!(f, "`{node}`: {detail}"),
            Violation::InvalidLayer { node, detail } => write!(f, "`{node}`: {detail}"),
        }
    }
}

/// Every structural problem found in a graph; empty means valid.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return f.write_str("valid");
        }
        for v in &self.violations {
            writeln!(f, "{v}")?;
        }
        Ok(())
    }
}

/// Validates with every input probed at `1 x C x 64 x 128`.
pub fn validate_graph(graph: &NetworkGraph) -> ValidationReport {
    let probes: Vec<TensorShape> = graph
        .input_channels()
        .into_iter()
        .map(|c| TensorShape::new(1, c.max(1), PROBE_HEIGHT, PROBE_WIDTH))
        .collect();
    validate_graph_at(graph, &probes)
}

/// Collects every violation rather than stopping at the first one. Shape
/// errors are reported once, at the node where they originate; nodes
/// downstream of a failed node are not shape-checked.
pub fn validate_graph_at(graph: &NetworkGraph, input_shapes: &[TensorShape]) -> ValidationReport {
    let nodes = graph.nodes();
    let mut violations = Vec::new();

    let mut seen = HashSet::new();
    for n in nodes {
        if !seen.insert(n.id.as_str()) {
            violations.push(Violation::DuplicateId { node: n.id.clone() });
        }
    }
    for n in nodes {
        for inp in &n.inputs {
            if graph.node(inp).is_none() {
                violations.push(Violation::DanglingInput {
                    node: n.id.clone(),
                    missing: inp.clone(),
                });
            }
        }
    }
    for id in graph.inputs() {
        match graph.node(id) {
            Some(n) if n.layer.kind == LayerKind::Input => {}
            _ => violations.push(Violation::MissingGraphInput { id: id.clone() }),
        }
    }
    for n in nodes {
        if n.layer.kind == LayerKind::Input && !graph.inputs().contains(&n.id) {
            violations.push(Violation::UndeclaredInput { node: n.id.clone() });
        }
    }
    for id in graph.outputs() {
        if graph.node(id).is_none() {
            violations.push(Violation::MissingOutput { id: id.clone() });
        }
    }

    // Kahn's algorithm over resolvable edges; leftovers sit on a cycle or
    // downstream of one.
    let n = nodes.len();
    let mut indegree = vec![0usize; n];
    let mut consumers: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, node) in nodes.iter().enumerate() {
        for inp in &node.inputs {
            if let Some(j) = graph.position(inp) {
                indegree[i] += 1;
                consumers[j].push(i);
            }
        }
    }
    let mut ready: VecDeque<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(i) = ready.pop_front() {
        order.push(i);
        for &c in &consumers[i] {
            indegree[c] -= 1;
            if indegree[c] == 0 {
                ready.push_back(c);
            }
        }
    }
    if order.len() != n {
        let cyc: Vec<NodeId> = (0..n)
            .filter(|&i| indegree[i] > 0)
            .map(|i| nodes[i].id.clone())
            .collect();
        violations.push(Violation::Cycle { nodes: cyc });
    }

    // Reachability along data edges from declared inputs.
    let mut reach = vec![false; n];
    let mut queue: VecDeque<usize> = graph
        .inputs()
        .iter()
        .filter_map(|id| graph.position(id))
        .collect();
    for &i in &queue {
        reach[i] = true;
    }
    let mut data_consumers: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, node) in nodes.iter().enumerate() {
        for inp in node.data_inputs() {
            if let Some(j) = graph.position(inp) {
                data_consumers[j].push(i);
            }
        }
    }
    while let Some(i) = queue.pop_front() {
        for &c in &data_consumers[i] {
            if !reach[c] {
                reach[c] = true;
                queue.push_back(c);
            }
        }
    }
    for (i, node) in nodes.iter().enumerate() {
        if !reach[i] && node.layer.kind != LayerKind::Input {
            violations.push(Violation::Unreachable {
                node: node.id.clone(),
            });
        }
    }

    // Shape checks in topological order.
    let arity_ok = graph.inputs().len() == input_shapes.len();
    let mut shapes: HashMap<usize, TensorShape> = HashMap::new();
    for &i in &order {
        let node = &nodes[i];
        let ins: Option<Vec<TensorShape>> = if node.layer.kind == LayerKind::Input {
            if !arity_ok {
                None
            } else {
                graph
                    .inputs()
                    .iter()
                    .position(|id| *id == node.id)
                    .map(|slot| vec![input_shapes[slot]])
            }
        } else {
            node.inputs
                .iter()
                .map(|id| graph.position(id).and_then(|j| shapes.get(&j).copied()))
                .collect()
        };
        let Some(ins) = ins else { continue };
        match infer_shape(&node.layer, &ins) {
            Ok(s) => {
                shapes.insert(i, s);
            }
            Err(e) => {
                let detail = e.to_string();
                let node_id = node.id.clone();
                violations.push(match e {
                    GraphError::GroupDivisibility { .. } | GraphError::DepthwiseChannels { .. } => {
                        Violation::GroupDivisibility { node: node_id, detail }
                    }
                    GraphError::InvalidLayer(_) | GraphError::InputCount { .. } | GraphError::NoInputs { .. } => {
                        Violation::InvalidLayer { node: node_id, detail }
                    }
                    _ => Violation::ShapeMismatch { node: node_id, detail },
                });
            }
        }
    }

    ValidationReport { violations }
}

/// Exact rational stride, kept reduced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Ratio {
    num: u64,
    den: u64,
}

impl Ratio {
    const ONE: Ratio = Ratio { num: 1, den: 1 };

    fn new(num: u64, den: u64) -> Self {
        let g = gcd(num, den).max(1);
        Ratio {
            num: num / g,
            den: den / g,
        }
    }

    fn mul(self, k: usize) -> Self {
        Ratio::new(self.num * k as u64, self.den)
    }

    fn div(self, k: usize) -> Self {
        Ratio::new(self.num, self.den * k as u64)
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

fn strides_to(graph: &NetworkGraph, target: &str) -> Result<(Ratio, Ratio), GraphError> {
    graph
        .node(target)
        .ok_or_else(|| GraphError::UnknownNode(target.to_string()))?;
    let order = topological_order(graph)?;
    let mut acc: HashMap<&str, (Ratio, Ratio)> = HashMap::new();
    for i in order {
        let node = &graph.nodes()[i];
        let base = match node.data_inputs() {
            [] => (Ratio::ONE, Ratio::ONE),
            [first, rest @ ..] => {
                let s0 = acc[first.as_str()];
                for other in rest {
                    let s = acc[other.as_str()];
                    if s != s0 {
                        return Err(GraphError::InconsistentStride {
                            node: node.id.clone(),
                            a: format!("{}x{}", s0.0, s0.1),
                            b: format!("{}x{}", s.0, s.1),
                        });
                    }
                }
                s0
            }
        };
        let l = &node.layer;
        let s = match l.kind {
            k if k.is_forward_conv() || k.is_pool() => (base.0.mul(l.stride.0), base.1.mul(l.stride.1)),
            LayerKind::TransposedConv | LayerKind::BilinearResize => {
                (base.0.div(l.stride.0), base.1.div(l.stride.1))
            }
            _ => base,
        };
        acc.insert(node.id.as_str(), s);
        if node.id == target {
            return Ok(s);
        }
    }
    unreachable!("target node is part of the topological order")
}

/// Cumulative downsampling factor `(rows, cols)` from the graph input to `node`.
pub fn effective_stride_hw(graph: &NetworkGraph, node: &str) -> Result<(usize, usize), GraphError> {
    let (h, w) = strides_to(graph, node)?;
    for r in [h, w] {
        if r.den != 1 {
            return Err(GraphError::NonIntegralStride {
                node: node.to_string(),
                stride: r.to_string(),
            });
        }
    }
    Ok((h.num as usize, w.num as usize))
}

/// Cumulative downsampling factor at `node`; rows and columns must agree.
pub fn effective_stride(graph: &NetworkGraph, node: &str) -> Result<usize, GraphError> {
    let (h, w) = effective_stride_hw(graph, node)?;
    if h != w {
        return Err(GraphError::InconsistentStride {
            node: node.to_string(),
            a: h.to_string(),
            b: w.to_string(),
        });
    }
    Ok(h)
}

/// Receptive field `(rows, cols)` in input pixels of one activation at `node`.
///
/// Each layer adds `dilation * (k - 1) * jump`, where `jump` is the product of
/// the strides before it. Fusion nodes take the largest field among their
/// inputs. A global pool sees the whole image and reports `usize::MAX`.
pub fn receptive_field(graph: &NetworkGraph, node: &str) -> Result<(usize, usize), GraphError> {
    graph
        .node(node)
        .ok_or_else(|| GraphError::UnknownNode(node.to_string()))?;
    let order = topological_order(graph)?;
    // (rf, jump) per axis
    let mut acc: HashMap<&str, [(f64, f64); 2]> = HashMap::new();
    for i in order {
        let n = &graph.nodes()[i];
        let mut base = [(1.0f64, 1.0f64); 2];
        for (k, inp) in n.data_inputs().iter().enumerate() {
            let s = acc[inp.as_str()];
            if k == 0 {
                base = s;
            } else {
                for ax in 0..2 {
                    base[ax].0 = base[ax].0.max(s[ax].0);
                }
            }
        }
        let l = &n.layer;
        let kernel = [l.kernel.0, l.kernel.1];
        let stride = [l.stride.0, l.stride.1];
        let mut out = base;
        for ax in 0..2 {
            let (rf, jump) = base[ax];
            out[ax] = match l.kind {
                k if k.is_forward_conv() || k.is_pool() => {
                    let d = if k.is_pool() { 1 } else { l.dilation };
                    (rf + (d * (kernel[ax] - 1)) as f64 * jump, jump * stride[ax] as f64)
                }
                LayerKind::TransposedConv => {
                    let span = l.dilation * (kernel[ax] - 1) + 1;
                    let taps = span.div_ceil(stride[ax]);
                    (rf + (taps - 1) as f64 * jump, jump / stride[ax] as f64)
                }
                LayerKind::BilinearResize => (rf + jump, jump / stride[ax] as f64),
                LayerKind::GlobalPool => (f64::INFINITY, jump),
                _ => (rf, jump),
            };
        }
        acc.insert(n.id.as_str(), out);
        if n.id == node {
            let conv = |v: f64| if v.is_finite() { v.ceil() as usize } else { usize::MAX };
            return Ok((conv(out[0].0), conv(out[1].0)));
        }
    }
    unreachable!("target node is part of the topological order")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{GraphBuilder, LayerSpec, Node};

    fn chain(layers: &[LayerSpec]) -> NetworkGraph {
        let mut b = GraphBuilder::new();
        let mut cur = b.input("input", 1);
        for (i, l) in layers.iter().enumerate() {
            cur = b.push(&format!("l{i}"), *l, &[&cur]).unwrap();
        }
        b.finish(&[&cur])
    }

    #[test]
    fn receptive_field_of_plain_and_dilated_convs() {
        let g = chain(&[LayerSpec::conv(1, 3, 1, 1)]);
        assert_eq!(receptive_field(&g, "l0").unwrap(), (3, 3));
        let g = chain(&[LayerSpec::conv(1, 3, 1, 1), LayerSpec::conv(1, 3, 1, 1)]);
        assert_eq!(receptive_field(&g, "l1").unwrap(), (5, 5));
        let g = chain(&[LayerSpec::conv(1, 3, 1, 1).with_dilation(2)]);
        assert_eq!(receptive_field(&g, "l0").unwrap(), (5, 5));
        let g = chain(&[LayerSpec::conv(1, 3, 2, 1), LayerSpec::conv(1, 3, 1, 1)]);
        assert_eq!(receptive_field(&g, "l1").unwrap(), (7, 7));
        assert_eq!(receptive_field(&g, "input").unwrap(), (1, 1));
    }

    #[test]
    fn stride_accumulates_and_upsampling_divides() {
        let g = chain(&[
            LayerSpec::conv(4, 3, 2, 1),
            LayerSpec::max_pool(2, 2, 0),
            LayerSpec::transposed_conv(4, 4, 2, 1),
        ]);
        assert_eq!(effective_stride(&g, "input").unwrap(), 1);
        assert_eq!(effective_stride(&g, "l1").unwrap(), 4);
        assert_eq!(effective_stride(&g, "l2").unwrap(), 2);
        assert!(matches!(
            effective_stride(&g, "nope"),
            Err(GraphError::UnknownNode(_))
        ));
    }

    #[test]
    fn inconsistent_paths_are_reported() {
        let mut b = GraphBuilder::new();
        let x = b.input("input", 4);
        let a = b.push("a", LayerSpec::conv(4, 3, 2, 1), &[&x]).unwrap();
        let up = b.push("up", LayerSpec::bilinear_resize(2), &[&a]).unwrap();
        let p = b.push("p", LayerSpec::max_pool(2, 2, 0), &[&x]).unwrap();
        // shapes differ too, so bypass the builder's channel bookkeeping only
        let g = b.finish(&[&up]);
        let (mut nodes, inputs, _) = g.into_parts();
        nodes.push(Node {
            id: "sum".into(),
            layer: LayerSpec::add(),
            inputs: vec![up.clone(), p.clone()],
        });
        let g = NetworkGraph::new(nodes, inputs, vec!["sum".into()]);
        assert!(matches!(
            effective_stride(&g, "sum"),
            Err(GraphError::InconsistentStride { .. })
        ));
    }

    #[test]
    fn validation_reports_add_mismatch_and_dangling_input() {
        let mut b = GraphBuilder::new();
        let x = b.input("input", 8);
        let p = b.push("pool", LayerSpec::max_pool(2, 2, 0), &[&x]).unwrap();
        let g = b.finish(&[&p]);
        let (mut nodes, inputs, _) = g.clone().into_parts();
        nodes.push(Node {
            id: "sum".into(),
            layer: LayerSpec::add(),
            inputs: vec![x.clone(), p.clone()],
        });
        let g2 = NetworkGraph::new(nodes, inputs.clone(), vec!["sum".into()]);
        let r = validate_graph_at(&g2, &[TensorShape::new(1, 8, 32, 32)]);
        assert_eq!(r.violations.len(), 1, "{r}");
        assert!(matches!(r.violations[0], Violation::ShapeMismatch { .. }));

        let (mut nodes, inputs, _) = g.into_parts();
        nodes.push(Node {
            id: "bad".into(),
            layer: LayerSpec::relu(),
            inputs: vec!["ghost".into()],
        });
        let g3 = NetworkGraph::new(nodes, inputs, vec!["bad".into()]);
        let r = validate_graph(&g3);
        let dangling = r
            .violations
            .iter()
            .filter(|v| matches!(v, Violation::DanglingInput { .. }))
            .count();
        assert_eq!(dangling, 1, "{r}");
    }

    #[test]
    fn validation_finds_cycles() {
        let nodes = vec![
            Node {
                id: "input".into(),
                layer: LayerSpec::input(1),
                inputs: vec![],
            },
            Node {
                id: "a".into(),
                layer: LayerSpec::add(),
                inputs: vec!["input".into(), "b".into()],
            },
            Node {
                id: "b".into(),
                layer: LayerSpec::relu(),
                inputs: vec!["a".into()],
            },
        ];
        let g = NetworkGraph::new(nodes, vec!["input".into()], vec!["b".into()]);
        let r = validate_graph(&g);
        assert!(r.violations.iter().any(|v| matches!(v, Violation::Cycle { .. })), "{r}");
        assert!(topological_order(&g).is_err());
    }
}
