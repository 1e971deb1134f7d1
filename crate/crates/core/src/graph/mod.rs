//! Declarative DAG representation of convolutional networks.
//!
//! Every encoder and decoder in the crate is first described as a
//! [`NetworkGraph`]: an ordered list of nodes, each carrying a [`LayerSpec`]
//! and the ids of the nodes feeding it. Tensors are laid out as
//! `(batch, channels, height, width)` throughout.
//!
//! `transposed-conv` and `bilinear-resize` nodes accept an optional second
//! input that acts purely as a *size reference*: the node's spatial output
//! size is taken from it instead of from the stride arithmetic. No data
//! flows along that edge. This lets decoders align an upsampled map with a
//! skip connection whose size was rounded by strided layers (e.g. 23 rows at
//! stride 16 for a 360-row image).

mod analysis;
mod builder;
mod text;

pub use analysis::{
    effective_stride, effective_stride_hw, infer_shapes, receptive_field, topological_order,
    validate_graph, validate_graph_at, ValidationReport, Violation, PROBE_HEIGHT, PROBE_WIDTH,
};
pub use builder::GraphBuilder;
pub use text::{parse_graph, ParseError};

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

pub type NodeId = String;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GraphError {
    #[error("layer `{kind}` received no inputs")]
    NoInputs { kind: LayerKind },
    #[error("layer `{kind}` expects {expected} inputs, got {got}")]
    InputCount {
        kind: LayerKind,
        expected: &'static str,
        got: usize,
    },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("groups={groups} must divide input channels {in_channels} and output channels {out_channels}")]
    GroupDivisibility {
        groups: usize,
        in_channels: usize,
        out_channels: usize,
    },
    #[error("depthwise conv needs groups = input channels = output channels (groups={groups}, in={in_channels}, out={out_channels})")]
    DepthwiseChannels {
        groups: usize,
        in_channels: usize,
        out_channels: usize,
    },
    #[error("invalid layer parameters: {0}")]
    InvalidLayer(String),
    #[error("layer output would be empty for input {0}")]
    EmptyOutput(TensorShape),
    #[error("unknown node `{0}`")]
    UnknownNode(NodeId),
    #[error("graph contains a cycle through `{0}`")]
    Cycle(NodeId),
    #[error("node `{node}` is reached with inconsistent strides {a} and {b}")]
    InconsistentStride { node: NodeId, a: String, b: String },
    #[error("node `{node}` has non-integral effective stride {stride}")]
    NonIntegralStride { node: NodeId, stride: String },
    #[error("graph declares {declared} inputs but {given} input shapes were supplied")]
    InputArity { declared: usize, given: usize },
}

/// Shape of an activation tensor, `(batch, channels, height, width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorShape {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl TensorShape {
    pub const fn new(batch: usize, channels: usize, height: usize, width: usize) -> Self {
        Self {
            batch,
            channels,
            height,
            width,
        }
    }

    pub fn numel(&self) -> usize {
        self.batch * self.channels * self.height * self.width
    }

    pub fn spatial(&self) -> usize {
        self.height * self.width
    }

    pub fn is_valid(&self) -> bool {
        self.batch >= 1 && self.channels >= 1 && self.height >= 1 && self.width >= 1
    }
}

impl fmt::Display for TensorShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "({},{},{},{})",
            self.batch, self.channels, self.height, self.width
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Input,
    Conv,
    DepthwiseConv,
    GroupedConv,
    TransposedConv,
    MaxPool,
    AvgPool,
    BatchNorm,
    Relu,
    ElementwiseAdd,
    Concat,
    ChannelShuffle,
    BilinearResize,
    GlobalPool,
}

impl LayerKind {
    pub const ALL: [LayerKind; 14] = [
        LayerKind::Input,
        LayerKind::Conv,
        LayerKind::DepthwiseConv,
        LayerKind::GroupedConv,
        LayerKind::TransposedConv,
        LayerKind::MaxPool,
        LayerKind::AvgPool,
        LayerKind::BatchNorm,
        LayerKind::Relu,
        LayerKind::ElementwiseAdd,
        LayerKind::Concat,
        LayerKind::ChannelShuffle,
        LayerKind::BilinearResize,
        LayerKind::GlobalPool,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::Input => "input",
            LayerKind::Conv => "conv",
            LayerKind::DepthwiseConv => "depthwise-conv",
            LayerKind::GroupedConv => "grouped-conv",
            LayerKind::TransposedConv => "transposed-conv",
            LayerKind::MaxPool => "max-pool",
            LayerKind::AvgPool => "avg-pool",
            LayerKind::BatchNorm => "batchnorm",
            LayerKind::Relu => "relu",
            LayerKind::ElementwiseAdd => "elementwise-add",
            LayerKind::Concat => "concat",
            LayerKind::ChannelShuffle => "channel-shuffle",
            LayerKind::BilinearResize => "bilinear-resize",
            LayerKind::GlobalPool => "global-pool",
        }
    }

    /// Forward convolutions (the kinds that slide a learned kernel over the input).
    pub fn is_forward_conv(self) -> bool {
        matches!(
            self,
            LayerKind::Conv | LayerKind::DepthwiseConv | LayerKind::GroupedConv
        )
    }

    /// All kinds carrying a learned kernel, including transposed convolution.
    pub fn is_conv_family(self) -> bool {
        self.is_forward_conv() || self == LayerKind::TransposedConv
    }

    pub fn is_pool(self) -> bool {
        matches!(self, LayerKind::MaxPool | LayerKind::AvgPool)
    }

    /// Kinds whose optional second input is a size reference.
    pub fn accepts_size_reference(self) -> bool {
        matches!(self, LayerKind::TransposedConv | LayerKind::BilinearResize)
    }
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LayerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        LayerKind::ALL
            .iter()
            .copied()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown layer kind `{s}`"))
    }
}

/// One layer's hyper-parameters. Fields that do not apply to a kind keep
/// their defaults (`kernel 1x1`, `stride 1x1`, `padding 0x0`, `dilation 1`,
/// `out_channels 0`, `groups 1`, no bias).
///
/// * `out_channels` is meaningful for conv kinds and for `input` (the image
///   channel count); other kinds derive channels from their inputs.
/// * `stride` is the upsampling factor for `transposed-conv` and
///   `bilinear-resize`.
/// * `groups` is the group count for `grouped-conv`/`depthwise-conv` and the
///   shuffle group count for `channel-shuffle`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: usize,
    pub out_channels: usize,
    pub groups: usize,
    pub has_bias: bool,
}

impl LayerSpec {
    pub const fn bare(kind: LayerKind) -> Self {
        Self {
            kind,
            kernel: (1, 1),
            stride: (1, 1),
            padding: (0, 0),
            dilation: 1,
            out_channels: 0,
            groups: 1,
            has_bias: false,
        }
    }

    pub fn input(channels: usize) -> Self {
        Self {
            out_channels: channels,
            ..Self::bare(LayerKind::Input)
        }
    }

    pub fn conv(out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kernel: (kernel, kernel),
            stride: (stride, stride),
            padding: (padding, padding),
            out_channels,
            ..Self::bare(LayerKind::Conv)
        }
    }

    pub fn grouped_conv(
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Self {
        Self {
            kind: LayerKind::GroupedConv,
            groups,
            ..Self::conv(out_channels, kernel, stride, padding)
        }
    }

    /// Depthwise convolution over `channels` channels (one filter per channel).
    pub fn depthwise(channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kind: LayerKind::DepthwiseConv,
            groups: channels,
            ..Self::conv(channels, kernel, stride, padding)
        }
    }

    pub fn transposed_conv(
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Self {
        Self {
            kind: LayerKind::TransposedConv,
            ..Self::conv(out_channels, kernel, stride, padding)
        }
    }

    pub fn max_pool(kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kernel: (kernel, kernel),
            stride: (stride, stride),
            padding: (padding, padding),
            ..Self::bare(LayerKind::MaxPool)
        }
    }

    pub fn avg_pool(kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            kind: LayerKind::AvgPool,
            ..Self::max_pool(kernel, stride, padding)
        }
    }

    pub fn batchnorm() -> Self {
        Self::bare(LayerKind::BatchNorm)
    }

    pub fn relu() -> Self {
        Self::bare(LayerKind::Relu)
    }

    pub fn add() -> Self {
        Self::bare(LayerKind::ElementwiseAdd)
    }

    pub fn concat() -> Self {
        Self::bare(LayerKind::Concat)
    }

    pub fn channel_shuffle(groups: usize) -> Self {
        Self {
            groups,
            ..Self::bare(LayerKind::ChannelShuffle)
        }
    }

    pub fn bilinear_resize(factor: usize) -> Self {
        Self {
            stride: (factor, factor),
            ..Self::bare(LayerKind::BilinearResize)
        }
    }

    pub fn global_pool() -> Self {
        Self::bare(LayerKind::GlobalPool)
    }

    pub fn with_bias(mut self, has_bias: bool) -> Self {
        self.has_bias = has_bias;
        self
    }

    /// Sets the dilation rate and re-derives "same" padding for odd kernels.
    pub fn with_dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self.padding = (
            dilation * (self.kernel.0.saturating_sub(1)) / 2,
            dilation * (self.kernel.1.saturating_sub(1)) / 2,
        );
        self
    }

    /// Extent of the dilated kernel along each axis.
    pub fn effective_kernel(&self) -> (usize, usize) {
        (
            self.dilation * (self.kernel.0 - 1) + 1,
            self.dilation * (self.kernel.1 - 1) + 1,
        )
    }

    fn check_common(&self) -> Result<(), GraphError> {
        let k = self.kind;
        if self.kernel.0 == 0 || self.kernel.1 == 0 {
            return Err(GraphError::InvalidLayer(format!("{k}: kernel must be >= 1")));
        }
        if self.stride.0 == 0 || self.stride.1 == 0 {
            return Err(GraphError::InvalidLayer(format!("{k}: stride must be >= 1")));
        }
        if self.dilation == 0 {
            return Err(GraphError::InvalidLayer(format!("{k}: dilation must be >= 1")));
        }
        if self.dilation > 1 && !k.is_conv_family() {
            return Err(GraphError::InvalidLayer(format!(
                "{k}: dilation {} only valid for conv kinds",
                self.dilation
            )));
        }
        if self.groups == 0 {
            return Err(GraphError::InvalidLayer(format!("{k}: groups must be >= 1")));
        }
        if k.is_conv_family() && self.out_channels == 0 {
            return Err(GraphError::InvalidLayer(format!("{k}: out_channels must be >= 1")));
        }
        Ok(())
    }
}

fn conv_out(size: usize, kernel: usize, stride: usize, pad: usize, dilation: usize) -> Option<usize> {
    let span = dilation * (kernel - 1) + 1;
    let padded = size + 2 * pad;
    if padded < span {
        None
    } else {
        Some((padded - span) / stride + 1)
    }
}

/// Spatial size produced by a transposed conv without a size reference.
fn transposed_out(size: usize, kernel: usize, stride: usize, pad: usize, dilation: usize) -> Option<usize> {
    let raw = (size - 1) * stride + dilation * (kernel - 1) + 1;
    raw.checked_sub(2 * pad).filter(|&v| v > 0)
}

/// Channel count a layer produces given its input channel counts.
pub fn infer_channels(layer: &LayerSpec, input_channels: &[usize]) -> Result<usize, GraphError> {
    let data = if layer.kind.accepts_size_reference() && input_channels.len() == 2 {
        &input_channels[..1]
    } else {
        input_channels
    };
    infer_shape(
        layer,
        &data
            .iter()
            .map(|&c| TensorShape::new(1, c, 64, 64))
            .collect::<Vec<_>>(),
    )
    .map(|s| s.channels)
}

/// Output shape of a single layer.
///
/// For conv kinds `out = floor((in + 2p - d(k-1) - 1) / s) + 1`; for
/// transposed conv `out = (in - 1)s - 2p + d(k-1) + 1` unless a size
/// reference input fixes it.
pub fn infer_shape(layer: &LayerSpec, inputs: &[TensorShape]) -> Result<TensorShape, GraphError> {
    use LayerKind::*;
    layer.check_common()?;
    let kind = layer.kind;
    let first = *inputs.first().ok_or(GraphError::NoInputs { kind })?;
    if let Some(bad) = inputs.iter().find(|s| !s.is_valid()) {
        return Err(GraphError::ShapeMismatch(format!("degenerate input shape {bad}")));
    }
    let single = |expected: &'static str| -> Result<(), GraphError> {
        if inputs.len() != 1 {
            Err(GraphError::InputCount {
                kind,
                expected,
                got: inputs.len(),
            })
        } else {
            Ok(())
        }
    };
    match kind {
        Input => {
            single("1")?;
            if layer.out_channels != 0 && layer.out_channels != first.channels {
                return Err(GraphError::ShapeMismatch(format!(
                    "input declares {} channels but was fed {first}",
                    layer.out_channels
                )));
            }
            Ok(first)
        }
        Conv | GroupedConv | DepthwiseConv => {
            single("1")?;
            let (cin, cout, g) = (first.channels, layer.out_channels, layer.groups);
            if kind == DepthwiseConv && !(g == cin && cout == cin) {
                return Err(GraphError::DepthwiseChannels {
                    groups: g,
                    in_channels: cin,
                    out_channels: cout,
                });
            }
            if cin % g != 0 || cout % g != 0 {
                return Err(GraphError::GroupDivisibility {
                    groups: g,
                    in_channels: cin,
                    out_channels: cout,
                });
            }
            let h = conv_out(first.height, layer.kernel.0, layer.stride.0, layer.padding.0, layer.dilation);
            let w = conv_out(first.width, layer.kernel.1, layer.stride.1, layer.padding.1, layer.dilation);
            match (h, w) {
                (Some(h), Some(w)) => Ok(TensorShape::new(first.batch, cout, h, w)),
                _ => Err(GraphError::EmptyOutput(first)),
            }
        }
        TransposedConv => {
            if inputs.len() > 2 {
                return Err(GraphError::InputCount {
                    kind,
                    expected: "1 or 2",
                    got: inputs.len(),
                });
            }
            let (cin, cout, g) = (first.channels, layer.out_channels, layer.groups);
            if cin % g != 0 || cout % g != 0 {
                return Err(GraphError::GroupDivisibility {
                    groups: g,
                    in_channels: cin,
                    out_channels: cout,
                });
            }
            let (h, w) = match inputs.get(1) {
                Some(reference) => {
                    // The target must be reachable by cropping the raw scatter.
                    let raw_h = (first.height - 1) * layer.stride.0 + layer.effective_kernel().0;
                    let raw_w = (first.width - 1) * layer.stride.1 + layer.effective_kernel().1;
                    let lo_h = ((first.height - 1) * layer.stride.0 + 1).saturating_sub(layer.padding.0);
                    let lo_w = ((first.width - 1) * layer.stride.1 + 1).saturating_sub(layer.padding.1);
                    if reference.height + layer.padding.0 > raw_h
                        || reference.width + layer.padding.1 > raw_w
                        || reference.height < lo_h
                        || reference.width < lo_w
                    {
                        return Err(GraphError::ShapeMismatch(format!(
                            "transposed conv from {first} cannot produce the reference size {}x{}",
                            reference.height, reference.width
                        )));
                    }
                    (reference.height, reference.width)
                }
                None => {
                    let h = transposed_out(first.height, layer.kernel.0, layer.stride.0, layer.padding.0, layer.dilation);
                    let w = transposed_out(first.width, layer.kernel.1, layer.stride.1, layer.padding.1, layer.dilation);
                    match (h, w) {
                        (Some(h), Some(w)) => (h, w),
                        _ => return Err(GraphError::EmptyOutput(first)),
                    }
                }
            };
            Ok(TensorShape::new(first.batch, cout, h, w))
        }
        MaxPool | AvgPool => {
            single("1")?;
            if layer.padding.0 * 2 >= layer.kernel.0 + 1 || layer.padding.1 * 2 >= layer.kernel.1 + 1 {
                return Err(GraphError::InvalidLayer(format!(
                    "{kind}: padding must be at most half the kernel"
                )));
            }
            let h = conv_out(first.height, layer.kernel.0, layer.stride.0, layer.padding.0, 1);
            let w = conv_out(first.width, layer.kernel.1, layer.stride.1, layer.padding.1, 1);
            match (h, w) {
                (Some(h), Some(w)) => Ok(TensorShape::new(first.batch, first.channels, h, w)),
                _ => Err(GraphError::EmptyOutput(first)),
            }
        }
        BatchNorm | Relu => {
            single("1")?;
            Ok(first)
        }
        ElementwiseAdd => {
            if inputs.len() < 2 {
                return Err(GraphError::InputCount {
                    kind,
                    expected: ">= 2",
                    got: inputs.len(),
                });
            }
            if let Some(other) = inputs.iter().find(|s| **s != first) {
                return Err(GraphError::ShapeMismatch(format!(
                    "elementwise-add of {first} and {other}"
                )));
            }
            Ok(first)
        }
        Concat => {
            let mut channels = 0;
            for s in inputs {
                if (s.batch, s.height, s.width) != (first.batch, first.height, first.width) {
                    return Err(GraphError::ShapeMismatch(format!("concat of {first} and {s}")));
                }
                channels += s.channels;
            }
            Ok(TensorShape { channels, ..first })
        }
        ChannelShuffle => {
            single("1")?;
            if first.channels % layer.groups != 0 {
                return Err(GraphError::GroupDivisibility {
                    groups: layer.groups,
                    in_channels: first.channels,
                    out_channels: first.channels,
                });
            }
            Ok(first)
        }
        BilinearResize => {
            if inputs.len() > 2 {
                return Err(GraphError::InputCount {
                    kind,
                    expected: "1 or 2",
                    got: inputs.len(),
                });
            }
            let (h, w) = match inputs.get(1) {
                Some(r) => (r.height, r.width),
                None => (first.height * layer.stride.0, first.width * layer.stride.1),
            };
            Ok(TensorShape::new(first.batch, first.channels, h, w))
        }
        GlobalPool => {
            single("1")?;
            Ok(TensorShape::new(first.batch, first.channels, 1, 1))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Node {
    pub id: NodeId,
    pub layer: LayerSpec,
    pub inputs: Vec<NodeId>,
}

impl Node {
    /// Inputs that carry data (excludes a trailing size reference).
    pub fn data_inputs(&self) -> &[NodeId] {
        if self.layer.kind.accepts_size_reference() && self.inputs.len() == 2 {
            &self.inputs[..1]
        } else {
            &self.inputs
        }
    }

    pub fn size_reference(&self) -> Option<&NodeId> {
        if self.layer.kind.accepts_size_reference() && self.inputs.len() == 2 {
            self.inputs.get(1)
        } else {
            None
        }
    }
}

/// An immutable network description.
///
/// Construction does not validate; run [`validate_graph`] to get the list of
/// structural violations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkGraph {
    nodes: Vec<Node>,
    inputs: Vec<NodeId>,
    outputs: Vec<NodeId>,
    index: HashMap<NodeId, usize>,
}

impl NetworkGraph {
    pub fn new(nodes: Vec<Node>, inputs: Vec<NodeId>, outputs: Vec<NodeId>) -> Self {
        let mut index = HashMap::with_capacity(nodes.len());
        for (i, n) in nodes.iter().enumerate() {
            index.entry(n.id.clone()).or_insert(i);
        }
        Self {
            nodes,
            inputs,
            outputs,
            index,
        }
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn inputs(&self) -> &[NodeId] {
        &self.inputs
    }

    pub fn outputs(&self) -> &[NodeId] {
        &self.outputs
    }

    pub fn node(&self, id: &str) -> Option<&Node> {
        self.index.get(id).map(|&i| &self.nodes[i])
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Channel count declared by each graph input.
    pub fn input_channels(&self) -> Vec<usize> {
        self.inputs
            .iter()
            .map(|id| self.node(id).map_or(0, |n| n.layer.out_channels))
            .collect()
    }

    pub fn to_text(&self) -> String {
        text::write_graph(self)
    }

    /// Shape of every node for a single image of `height x width`.
    pub fn shapes_at(
        &self,
        batch: usize,
        height: usize,
        width: usize,
    ) -> Result<HashMap<NodeId, TensorShape>, GraphError> {
        let inputs: Vec<TensorShape> = self
            .input_channels()
            .into_iter()
            .map(|c| TensorShape::new(batch, c, height, width))
            .collect();
        infer_shapes(self, &inputs)
    }

    #[cfg(test)]
    pub(crate) fn into_parts(self) -> (Vec<Node>, Vec<NodeId>, Vec<NodeId>) {
        (self.nodes, self.inputs, self.outputs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_conv_keeps_resolution() {
        let s = infer_shape(&LayerSpec::conv(16, 3, 1, 1), &[TensorShape::new(1, 3, 64, 128)]).unwrap();
        assert_eq!(s, TensorShape::new(1, 16, 64, 128));
    }

    #[test]
    fn dilated_same_padding_keeps_resolution() {
        let layer = LayerSpec {
            padding: (2, 2),
            dilation: 2,
            ..LayerSpec::conv(8, 3, 1, 1)
        };
        let s = infer_shape(&layer, &[TensorShape::new(1, 8, 32, 32)]).unwrap();
        assert_eq!(s, TensorShape::new(1, 8, 32, 32));
    }

    /// Materialises the scatter of every input pixel through the kernel and
    /// measures the covered extent after cropping `p` on each side.
    fn scatter_extent(input: usize, k: usize, s: usize, p: usize) -> usize {
        let mut hit = vec![false; (input - 1) * s + k];
        for i in 0..input {
            for t in 0..k {
                hit[i * s + t] = true;
            }
        }
        let covered = hit.iter().filter(|&&h| h).count();
        covered - 2 * p
    }

    #[test]
    fn transposed_conv_matches_scatter_pattern() {
        assert_eq!(scatter_extent(16, 4, 2, 1), 32);
        assert_eq!(scatter_extent(32, 4, 2, 1), 64);
        let s = infer_shape(
            &LayerSpec::transposed_conv(20, 4, 2, 1),
            &[TensorShape::new(1, 20, 16, 32)],
        )
        .unwrap();
        assert_eq!(s, TensorShape::new(1, 20, 32, 64));
        for (n, k, st, p) in [(3, 3, 2, 0), (5, 16, 8, 4), (7, 4, 2, 1), (2, 5, 3, 1)] {
            let s = infer_shape(
                &LayerSpec::transposed_conv(1, k, st, p),
                &[TensorShape::new(1, 1, n, n)],
            )
            .unwrap();
            assert_eq!(s.height, scatter_extent(n, k, st, p), "n={n} k={k} s={st} p={p}");
        }
    }

    #[test]
    fn transposed_conv_follows_size_reference() {
        let s = infer_shape(
            &LayerSpec::transposed_conv(20, 4, 2, 1),
            &[TensorShape::new(1, 20, 12, 20), TensorShape::new(1, 20, 23, 40)],
        )
        .unwrap();
        assert_eq!((s.height, s.width), (23, 40));
        let err = infer_shape(
            &LayerSpec::transposed_conv(20, 4, 2, 1),
            &[TensorShape::new(1, 20, 12, 20), TensorShape::new(1, 20, 30, 40)],
        );
        assert!(matches!(err, Err(GraphError::ShapeMismatch(_))));
    }

    #[test]
    fn add_rejects_unequal_shapes() {
        let err = infer_shape(
            &LayerSpec::add(),
            &[TensorShape::new(1, 8, 16, 16), TensorShape::new(1, 8, 32, 32)],
        );
        assert!(matches!(err, Err(GraphError::ShapeMismatch(_))));
    }

    #[test]
    fn grouped_conv_checks_divisibility() {
        let err = infer_shape(&LayerSpec::grouped_conv(6, 1, 1, 0, 3), &[TensorShape::new(1, 8, 4, 4)]);
        assert!(matches!(err, Err(GraphError::GroupDivisibility { .. })));
        let err = infer_shape(&LayerSpec::depthwise(8, 3, 1, 1), &[TensorShape::new(1, 6, 4, 4)]);
        assert!(matches!(err, Err(GraphError::DepthwiseChannels { .. })));
    }

    #[test]
    fn dilation_rejected_outside_conv_kinds() {
        let layer = LayerSpec {
            dilation: 2,
            ..LayerSpec::max_pool(2, 2, 0)
        };
        assert!(matches!(
            infer_shape(&layer, &[TensorShape::new(1, 1, 8, 8)]),
            Err(GraphError::InvalidLayer(_))
        ));
    }

    #[test]
    fn pooling_and_concat() {
        let s = infer_shape(&LayerSpec::max_pool(3, 2, 1), &[TensorShape::new(2, 24, 45, 80)]).unwrap();
        assert_eq!(s, TensorShape::new(2, 24, 23, 40));
        let s = infer_shape(
            &LayerSpec::concat(),
            &[TensorShape::new(1, 24, 8, 8), TensorShape::new(1, 216, 8, 8)],
        )
        .unwrap();
        assert_eq!(s.channels, 240);
        let s = infer_shape(&LayerSpec::global_pool(), &[TensorShape::new(1, 24, 8, 8)]).unwrap();
        assert_eq!(s, TensorShape::new(1, 24, 1, 1));
    }

    #[test]
    fn kind_names_round_trip() {
        for k in LayerKind::ALL {
            assert_eq!(k.as_str().parse::<LayerKind>().unwrap(), k);
        }
    }
}
