//! Feature-extraction backbones with multi-resolution taps.
//!
//! Channel schedules follow the standard configurations: VGG16 (config D),
//! ResNet-18, MobileNet v1 and ShuffleNet v1. Every encoder reads a 3-channel
//! `image` input, prefixes its nodes with `enc/` and downsamples by 32.

pub mod blocks;
mod dilation;

pub use dilation::apply_dilation_conversion;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::graph::{effective_stride, GraphBuilder, GraphError, LayerSpec, NetworkGraph, NodeId};
use blocks::{basic_block, conv_bn_relu, depthwise_separable, shuffle_unit};

pub const IMAGE_INPUT: &str = "image";
pub const IMAGE_CHANNELS: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ZooError {
    #[error("{0}")]
    Domain(String),
    #[error("encoder structure: {0}")]
    Structure(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tap {
    pub node: NodeId,
    pub channels: usize,
}

/// An encoder graph plus the nodes decoders may fuse from, keyed by stride.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderDescriptor {
    pub name: String,
    pub graph: NetworkGraph,
    pub taps: BTreeMap<usize, Tap>,
    /// Final feature node.
    pub output: NodeId,
    pub output_channels: usize,
    pub output_stride: usize,
    pub width_multiplier: Option<f64>,
    pub groups: Option<usize>,
}

impl EncoderDescriptor {
    pub fn tap(&self, stride: usize) -> Option<&Tap> {
        self.taps.get(&stride)
    }

    fn from_builder(
        name: &str,
        b: GraphBuilder,
        taps: &[(usize, &NodeId)],
        output: &NodeId,
    ) -> Result<Self, ZooError> {
        let tap_map = taps
            .iter()
            .map(|&(s, id)| {
                let channels = b
                    .channels(id)
                    .ok_or_else(|| GraphError::UnknownNode(id.clone()))?;
                Ok((
                    s,
                    Tap {
                        node: id.clone(),
                        channels,
                    },
                ))
            })
            .collect::<Result<BTreeMap<_, _>, ZooError>>()?;
        let output_channels = b
            .channels(output)
            .ok_or_else(|| GraphError::UnknownNode(output.clone()))?;
        let graph = b.finish(&[output]);
        let output_stride = effective_stride(&graph, output)?;
        Ok(Self {
            name: name.to_string(),
            graph,
            taps: tap_map,
            output: output.clone(),
            output_channels,
            output_stride,
            width_multiplier: None,
            groups: None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EncoderKind {
    Vgg16,
    ResNet18,
    MobileNet,
    ShuffleNet,
}

impl EncoderKind {
    pub const ALL: [EncoderKind; 4] = [
        EncoderKind::Vgg16,
        EncoderKind::ResNet18,
        EncoderKind::MobileNet,
        EncoderKind::ShuffleNet,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EncoderKind::Vgg16 => "vgg16",
            EncoderKind::ResNet18 => "resnet18",
            EncoderKind::MobileNet => "mobilenet",
            EncoderKind::ShuffleNet => "shufflenet",
        }
    }

    /// Human-facing name used in report tables.
    pub fn display_name(self) -> &'static str {
        match self {
            EncoderKind::Vgg16 => "VGG16",
            EncoderKind::ResNet18 => "ResNet18",
            EncoderKind::MobileNet => "MobileNet",
            EncoderKind::ShuffleNet => "ShuffleNet",
        }
    }
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EncoderKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.to_ascii_lowercase();
        EncoderKind::ALL
            .into_iter()
            .find(|k| k.as_str() == lower)
            .ok_or_else(|| format!("unknown encoder `{s}`"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EncoderOptions {
    /// MobileNet channel scaling.
    pub width_multiplier: f64,
    /// ShuffleNet group count.
    pub groups: usize,
    /// Insert batchnorm after every VGG conv.
    pub vgg_batchnorm: bool,
}

impl Default for EncoderOptions {
    fn default() -> Self {
        Self {
            width_multiplier: 1.0,
            groups: 3,
            vgg_batchnorm: true,
        }
    }
}

pub fn build_encoder(kind: EncoderKind, opts: &EncoderOptions) -> Result<EncoderDescriptor, ZooError> {
    match kind {
        EncoderKind::Vgg16 => build_vgg16_with(opts.vgg_batchnorm),
        EncoderKind::ResNet18 => build_resnet18(),
        EncoderKind::MobileNet => build_mobilenet(opts.width_multiplier),
        EncoderKind::ShuffleNet => build_shufflenet(opts.groups),
    }
}

/// VGG16 with batchnorm after every conv.
pub fn build_vgg16() -> Result<EncoderDescriptor, ZooError> {
    build_vgg16_with(true)
}

/// VGG16 configuration D: 13 3x3 convs in five stages, each closed by a 2x2
/// max-pool. Taps sit on the pool outputs.
pub fn build_vgg16_with(batchnorm: bool) -> Result<EncoderDescriptor, ZooError> {
    const STAGES: [(usize, usize); 5] = [(64, 2), (128, 2), (256, 3), (512, 3), (512, 3)];
    let mut b = GraphBuilder::new();
    let mut cur = b.input(IMAGE_INPUT, IMAGE_CHANNELS);
    let mut pools = Vec::new();
    for (si, &(width, convs)) in STAGES.iter().enumerate() {
        for ci in 0..convs {
            cur = conv_bn_relu(
                &mut b,
                &format!("enc/conv{}_{}", si + 1, ci + 1),
                &cur,
                LayerSpec::conv(width, 3, 1, 1),
                batchnorm,
                true,
            )?;
        }
        cur = b.push(&format!("enc/pool{}", si + 1), LayerSpec::max_pool(2, 2, 0), &[&cur])?;
        pools.push(cur.clone());
    }
    let taps: Vec<(usize, &NodeId)> = [2, 4, 8, 16, 32].into_iter().zip(pools.iter()).collect();
    EncoderDescriptor::from_builder("vgg16", b, &taps, &cur)
}

/// ResNet-18: 7x7/2 stem, 3x3/2 max-pool, then four stages of two basic
/// blocks (64, 128, 256, 512 channels).
pub fn build_resnet18() -> Result<EncoderDescriptor, ZooError> {
    let mut b = GraphBuilder::new();
    let x = b.input(IMAGE_INPUT, IMAGE_CHANNELS);
    let stem = conv_bn_relu(&mut b, "enc/stem", &x, LayerSpec::conv(64, 7, 2, 3), true, true)?;
    let mut cur = b.push("enc/stem_pool", LayerSpec::max_pool(3, 2, 1), &[&stem])?;
    let mut stage_outputs = Vec::new();
    for (si, width) in [64usize, 128, 256, 512].into_iter().enumerate() {
        for bi in 0..2 {
            let stride = if si > 0 && bi == 0 { 2 } else { 1 };
            cur = basic_block(&mut b, &format!("enc/layer{}/block{}", si + 1, bi + 1), &cur, width, stride)?;
        }
        stage_outputs.push(cur.clone());
    }
    let taps = [
        (2, &stem),
        (4, &stage_outputs[0]),
        (8, &stage_outputs[1]),
        (16, &stage_outputs[2]),
        (32, &stage_outputs[3]),
    ];
    EncoderDescriptor::from_builder("resnet18", b, &taps, &cur)
}

/// Channel count scaled by a width multiplier: nearest integer, at least 1.
pub fn scale_channels(channels: usize, width_multiplier: f64) -> usize {
    ((channels as f64 * width_multiplier).round() as usize).max(1)
}

/// MobileNet v1: 3x3/2 stem then 13 depthwise separable blocks.
pub fn build_mobilenet(width_multiplier: f64) -> Result<EncoderDescriptor, ZooError> {
    if !(width_multiplier > 0.0 && width_multiplier <= 1.0) {
        return Err(ZooError::Domain(format!(
            "width multiplier must lie in (0, 1], got {width_multiplier}"
        )));
    }
    const BLOCKS: [(usize, usize); 13] = [
        (64, 1),
        (128, 2),
        (128, 1),
        (256, 2),
        (256, 1),
        (512, 2),
        (512, 1),
        (512, 1),
        (512, 1),
        (512, 1),
        (512, 1),
        (1024, 2),
        (1024, 1),
    ];
    let a = width_multiplier;
    let mut b = GraphBuilder::new();
    let x = b.input(IMAGE_INPUT, IMAGE_CHANNELS);
    let mut cur = conv_bn_relu(
        &mut b,
        "enc/stem",
        &x,
        LayerSpec::conv(scale_channels(32, a), 3, 2, 1),
        true,
        true,
    )?;
    let mut outs = Vec::new();
    for (i, &(c, s)) in BLOCKS.iter().enumerate() {
        cur = depthwise_separable(&mut b, &format!("enc/block{}", i + 1), &cur, scale_channels(c, a), s)?;
        outs.push(cur.clone());
    }
    // last block at each stride: 1 -> 2, 3 -> 4, 5 -> 8, 11 -> 16, 13 -> 32
    let taps = [
        (2, &outs[0]),
        (4, &outs[2]),
        (8, &outs[4]),
        (16, &outs[10]),
        (32, &outs[12]),
    ];
    let mut d = EncoderDescriptor::from_builder("mobilenet", b, &taps, &cur)?;
    d.width_multiplier = Some(width_multiplier);
    Ok(d)
}

/// Output channels of the three ShuffleNet stages for a group count.
pub fn shufflenet_stage_channels(groups: usize) -> Option<[usize; 3]> {
    match groups {
        1 => Some([144, 288, 576]),
        2 => Some([200, 400, 800]),
        3 => Some([240, 480, 960]),
        4 => Some([272, 544, 1088]),
        8 => Some([384, 768, 1536]),
        _ => None,
    }
}

/// ShuffleNet v1 (1x): 3x3/2 stem (24 channels), 3x3/2 max-pool, then stages
/// of 4, 8 and 4 shuffle units, the first of each strided.
pub fn build_shufflenet(groups: usize) -> Result<EncoderDescriptor, ZooError> {
    let stage_channels = shufflenet_stage_channels(groups).ok_or_else(|| {
        ZooError::Domain(format!("ShuffleNet groups must be one of 1,2,3,4,8; got {groups}"))
    })?;
    let mut b = GraphBuilder::new();
    let x = b.input(IMAGE_INPUT, IMAGE_CHANNELS);
    let stem = conv_bn_relu(&mut b, "enc/stem", &x, LayerSpec::conv(24, 3, 2, 1), true, true)?;
    let pool = b.push("enc/stem_pool", LayerSpec::max_pool(3, 2, 1), &[&stem])?;
    let mut cur = pool.clone();
    let mut outs = Vec::new();
    for (si, (&width, repeats)) in stage_channels.iter().zip([4usize, 8, 4]).enumerate() {
        for ui in 0..repeats {
            let stride = if ui == 0 { 2 } else { 1 };
            // the very first 1x1 sees only 24 channels and stays ungrouped
            let first_groups = if si == 0 && ui == 0 { 1 } else { groups };
            cur = shuffle_unit(
                &mut b,
                &format!("enc/stage{}/unit{}", si + 2, ui + 1),
                &cur,
                width,
                groups,
                stride,
                first_groups,
            )?;
        }
        outs.push(cur.clone());
    }
    let taps = [(2, &stem), (4, &pool), (8, &outs[0]), (16, &outs[1]), (32, &outs[2])];
    let mut d = EncoderDescriptor::from_builder("shufflenet", b, &taps, &cur)?;
    d.groups = Some(groups);
    Ok(d)
}

/// Permutation applied by a channel shuffle: output channel `j` reads input
/// channel `perm[j]`. Equivalent to reshaping `0..n` into `groups` rows,
/// transposing and flattening.
pub fn channel_shuffle(channels: usize, groups: usize) -> Result<Vec<usize>, ZooError> {
    if groups == 0 || channels % groups != 0 {
        return Err(ZooError::Domain(format!(
            "channel shuffle needs groups dividing channels (n={channels}, g={groups})"
        )));
    }
    let per_group = channels / groups;
    Ok((0..channels)
        .map(|j| (j % groups) * per_group + j / groups)
        .collect())
}
