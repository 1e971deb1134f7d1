//! Analytic compute cost of layers and whole networks.
//!
//! Convention: one multiply-accumulate counts as two FLOPs. Conv-family
//! layers contribute `2 * MACs` FLOPs (bias additions are not counted);
//! other layers contribute element operations only:
//!
//! | kind | ops |
//! |---|---|
//! | batchnorm | 2 per element (folded scale + shift) |
//! | relu | 1 per element |
//! | elementwise-add | 1 per element per extra input |
//! | max/avg pool | 1 per window element per output |
//! | bilinear-resize | 4 per output element |
//! | global-pool | 1 per input element |
//! | input, concat, channel-shuffle | 0 |

use std::fmt::Write as _;

use thiserror::Error;

use crate::graph::{infer_shape, infer_shapes, GraphError, LayerKind, LayerSpec, NetworkGraph, TensorShape};

pub const FLOPS_CONVENTION: &str = "flops = 2xMAC";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CostError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("cannot compare reports at different resolutions ({0} vs {1})")]
    MixedResolution(String, String),
    #[error("no reports to compare")]
    Empty,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LayerCost {
    pub macs: u64,
    pub flops: u64,
    pub params: u64,
    pub activation_elems: u64,
}

impl std::ops::AddAssign for LayerCost {
    fn add_assign(&mut self, o: Self) {
        self.macs += o.macs;
        self.flops += o.flops;
        self.params += o.params;
        self.activation_elems += o.activation_elems;
    }
}

/// Learned parameters of a layer given its input channel count.
pub fn layer_params(layer: &LayerSpec, in_channels: usize) -> u64 {
    let bias = |c: usize| if layer.has_bias { c as u64 } else { 0 };
    match layer.kind {
        k if k.is_conv_family() => {
            let (kh, kw) = layer.kernel;
            (kh * kw * in_channels * layer.out_channels / layer.groups) as u64 + bias(layer.out_channels)
        }
        LayerKind::BatchNorm => 2 * in_channels as u64,
        _ => 0,
    }
}

/// Cost of one layer. `inputs` are the layer's input shapes (a size
/// reference, if any, second).
pub fn layer_cost(layer: &LayerSpec, inputs: &[TensorShape]) -> Result<LayerCost, GraphError> {
    let out = infer_shape(layer, inputs)?;
    let inp = inputs[0];
    let out_elems = out.numel() as u64;
    let (kh, kw) = layer.kernel;
    let k2 = (kh * kw) as u64;
    let macs = match layer.kind {
        k if k.is_forward_conv() => {
            out_elems * k2 * (inp.channels / layer.groups) as u64
        }
        LayerKind::TransposedConv => {
            inp.numel() as u64 * k2 * (layer.out_channels / layer.groups) as u64
        }
        _ => 0,
    };
    let ops = match layer.kind {
        k if k.is_conv_family() => 2 * macs,
        LayerKind::BatchNorm => 2 * out_elems,
        LayerKind::Relu => out_elems,
        LayerKind::ElementwiseAdd => (inputs.len() as u64 - 1) * out_elems,
        LayerKind::MaxPool | LayerKind::AvgPool => out_elems * k2,
        LayerKind::BilinearResize => 4 * out_elems,
        LayerKind::GlobalPool => inp.numel() as u64,
        _ => 0,
    };
    Ok(LayerCost {
        macs,
        flops: ops,
        params: layer_params(layer, inp.channels),
        activation_elems: out_elems,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerCostRow {
    pub layer_id: String,
    pub kind: LayerKind,
    pub cost: LayerCost,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostReport {
    pub model: String,
    pub input: TensorShape,
    pub layers: Vec<LayerCostRow>,
    pub totals: LayerCost,
    pub convention: &'static str,
}

impl CostReport {
    pub fn gflops(&self) -> f64 {
        self.totals.flops as f64 / 1e9
    }

    pub fn gmacs(&self) -> f64 {
        self.totals.macs as f64 / 1e9
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.input.height, self.input.width)
    }

    /// `layer_id,kind,macs,flops,params,activation_elems`, one row per layer,
    /// then a `TOTAL` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer_id,kind,macs,flops,params,activation_elems\n");
        for r in &self.layers {
            let c = r.cost;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.layer_id, r.kind, c.macs, c.flops, c.params, c.activation_elems
            );
        }
        let t = self.totals;
        let _ = writeln!(s, "TOTAL,,{},{},{},{}", t.macs, t.flops, t.params, t.activation_elems);
        s
    }
}

/// Shape-infers every node for one input shape and sums the layer costs in
/// graph order.
pub fn network_cost(model: &str, graph: &NetworkGraph, input: TensorShape) -> Result<CostReport, CostError> {
    let input_shapes: Vec<TensorShape> = graph
        .input_channels()
        .into_iter()
        .map(|c| TensorShape { channels: c, ..input })
        .collect();
    let shapes = infer_shapes(graph, &input_shapes)?;
    let mut layers = Vec::with_capacity(graph.len());
    let mut totals = LayerCost::default();
    for n in graph.nodes() {
        let ins: Vec<TensorShape> = if n.layer.kind == LayerKind::Input {
            vec![shapes[&n.id]]
        } else {
            n.inputs.iter().map(|id| shapes[id]).collect()
        };
        let cost = layer_cost(&n.layer, &ins)?;
        totals += cost;
        layers.push(LayerCostRow {
            layer_id: n.id.clone(),
            kind: n.layer.kind,
            cost,
        });
    }
    Ok(CostReport {
        model: model.to_string(),
        input,
        layers,
        totals,
        convention: FLOPS_CONVENTION,
    })
}

/// A published figure carried alongside computed rows but never computed.
#[derive(Debug, Clone, PartialEq)]
pub struct ExternalReference {
    pub model: String,
    pub gflops: Option<f64>,
}

/// Reference rows for networks whose internals are not modelled.
pub fn external_references() -> Vec<ExternalReference> {
    vec![
        ExternalReference {
            model: "ENet".into(),
            gflops: Some(3.83),
        },
        ExternalReference {
            model: "DeepLab".into(),
            gflops: None,
        },
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub model: String,
    pub gflops: Option<f64>,
    pub gmacs: Option<f64>,
    pub params: Option<u64>,
    /// GFLOPs divided by the smallest GFLOPs in the table.
    pub ratio_to_smallest: Option<f64>,
    pub external: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonTable {
    pub resolution: (usize, usize),
    pub convention: &'static str,
    /// Ascending by GFLOPs; rows without a figure last.
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    pub fn row(&self, model: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.model == model)
    }

    /// GFLOPs ratio `a / b`.
    pub fn ratio(&self, a: &str, b: &str) -> Option<f64> {
        Some(self.row(a)?.gflops? / self.row(b)?.gflops?)
    }
}

/// Sorts reports by GFLOPs and attaches ratios to the cheapest model.
/// External references are merged in and flagged.
pub fn compare_models(
    reports: &[CostReport],
    externals: &[ExternalReference],
) -> Result<ComparisonTable, CostError> {
    let first = reports.first().ok_or(CostError::Empty)?;
    let res = first.resolution();
    for r in reports {
        if r.resolution() != res {
            return Err(CostError::MixedResolution(
                format!("{}x{}", res.0, res.1),
                format!("{}x{}", r.input.height, r.input.width),
            ));
        }
    }
    let mut rows: Vec<ComparisonRow> = reports
        .iter()
        .map(|r| ComparisonRow {
            model: r.model.clone(),
            gflops: Some(r.gflops()),
            gmacs: Some(r.gmacs()),
            params: Some(r.totals.params),
            ratio_to_smallest: None,
            external: false,
        })
        .chain(externals.iter().map(|e| ComparisonRow {
            model: e.model.clone(),
            gflops: e.gflops,
            gmacs: None,
            params: None,
            ratio_to_smallest: None,
            external: true,
        }))
        .collect();
    // stable: ties keep input order
    rows.sort_by(|a, b| match (a.gflops, b.gflops) {
        (Some(x), Some(y)) => x.total_cmp(&y),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => std::cmp::Ordering::Equal,
    });
    let smallest = rows.iter().filter_map(|r| r.gflops).next();
    if let Some(min) = smallest {
        for r in &mut rows {
            r.ratio_to_smallest = r.gflops.map(|g| g / min);
        }
    }
    Ok(ComparisonTable {
        resolution: res,
        convention: FLOPS_CONVENTION,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::meta_arch::{build_model, DecoderKind};
    use crate::zoo::{EncoderKind, EncoderOptions};

    #[test]
    fn worked_layer_examples() {
        let c = layer_cost(&LayerSpec::conv(16, 3, 1, 1), &[TensorShape::new(1, 3, 32, 32)]).unwrap();
        assert_eq!(c.macs, 442_368);
        assert_eq!(c.flops, 2 * c.macs);
        assert_eq!(c.params, 432);
        let c = layer_cost(&LayerSpec::depthwise(16, 3, 1, 1), &[TensorShape::new(1, 16, 32, 32)]).unwrap();
        assert_eq!(c.macs, 147_456);
        let g = layer_cost(&LayerSpec::grouped_conv(6, 3, 1, 1, 3), &[TensorShape::new(1, 6, 8, 8)]).unwrap();
        let s = layer_cost(&LayerSpec::conv(6, 3, 1, 1), &[TensorShape::new(1, 6, 8, 8)]).unwrap();
        assert_eq!(g.macs, 6_912);
        assert_eq!(s.macs, 20_736);
        assert_eq!(3 * g.macs, s.macs);
    }

    #[test]
    fn comparing_a_report_with_itself() {
        let m = build_model(EncoderKind::ShuffleNet, DecoderKind::SkipNet, &EncoderOptions::default(), 20).unwrap();
        let r = network_cost("a", &m.graph, TensorShape::new(1, 3, 64, 128)).unwrap();
        let t = compare_models(&[r.clone(), CostReport { model: "b".into(), ..r.clone() }], &[]).unwrap();
        assert_eq!(t.ratio("a", "b"), Some(1.0));
        assert_eq!(t.rows[0].ratio_to_smallest, Some(1.0));
        let other = network_cost("c", &m.graph, TensorShape::new(1, 3, 96, 128)).unwrap();
        assert!(matches!(compare_models(&[r, other], &[]), Err(CostError::MixedResolution(..))));
        assert!(matches!(compare_models(&[], &[]), Err(CostError::Empty)));
    }

    #[test]
    fn totals_are_layer_sums_and_csv_has_total_row() {
        let m = build_model(EncoderKind::MobileNet, DecoderKind::SkipNet, &EncoderOptions::default(), 20).unwrap();
        let r = network_cost("m", &m.graph, TensorShape::new(1, 3, 64, 64)).unwrap();
        let mut sum = LayerCost::default();
        for l in &r.layers {
            sum += l.cost;
        }
        assert_eq!(sum, r.totals);
        let csv = r.to_csv();
        assert!(csv.starts_with("layer_id,kind,macs,flops,params,activation_elems\n"));
        assert_eq!(csv.lines().count(), r.layers.len() + 2);
    }
}
