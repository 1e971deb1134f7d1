//! Decoding meta-architectures.
//!
//! A decoder builder takes an [`EncoderDescriptor`] and appends its own
//! nodes (prefixed `dec/`) to a copy of the encoder graph, producing a full
//! segmentation network whose single output has `num_classes` channels at
//! input resolution. Upsampling layers carry a size reference to the map
//! they are fused with, so any input resolution works, not only multiples
//! of 32.
//!
//! Transposed convs use kernel 4 for x2 and kernel 16 for x8 (twice the
//! stride), start from bilinear weights and carry no bias.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::graph::{GraphBuilder, GraphError, LayerSpec, NetworkGraph, NodeId};
use crate::zoo::{
    apply_dilation_conversion, blocks::conv_bn_relu, build_encoder, build_vgg16, EncoderDescriptor,
    EncoderKind, EncoderOptions, ZooError, IMAGE_INPUT,
};

/// 19 evaluated classes plus the ignore class.
pub const DEFAULT_NUM_CLASSES: usize = 20;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetaArchError {
    #[error("encoder `{encoder}` has no tap at stride {stride}")]
    MissingTap { encoder: String, stride: usize },
    #[error("num_classes must be >= 1")]
    NoClasses,
    #[error(transparent)]
    Zoo(#[from] ZooError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DecoderKind {
    SkipNet,
    UNet,
    Dilation,
}

impl DecoderKind {
    pub const ALL: [DecoderKind; 3] = [DecoderKind::SkipNet, DecoderKind::UNet, DecoderKind::Dilation];

    pub fn as_str(self) -> &'static str {
        match self {
            DecoderKind::SkipNet => "skipnet",
            DecoderKind::UNet => "unet",
            DecoderKind::Dilation => "dilation",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            DecoderKind::SkipNet => "SkipNet",
            DecoderKind::UNet => "UNet",
            DecoderKind::Dilation => "Dilation",
        }
    }
}

impl fmt::Display for DecoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DecoderKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.to_ascii_lowercase();
        DecoderKind::ALL
            .into_iter()
            .find(|k| k.as_str() == lower)
            .ok_or_else(|| format!("unknown decoder `{s}`"))
    }
}

/// How the Dilation Frontend returns from stride 8 to full resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DilationUpsample {
    /// Fixed bilinear resize (no parameters).
    #[default]
    Bilinear,
    /// Learned x8 transposed conv, kernel 16.
    Transposed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationModel {
    pub encoder_name: String,
    pub decoder_name: String,
    pub graph: NetworkGraph,
    pub num_classes: usize,
    /// Convs that produce class scores directly.
    pub scoring_nodes: Vec<NodeId>,
}

impl SegmentationModel {
    /// `Decoder-Encoder`, e.g. `SkipNet-MobileNet`.
    pub fn id(&self) -> String {
        format!("{}-{}", self.decoder_name, self.encoder_name)
    }

    pub fn output(&self) -> &NodeId {
        &self.graph.outputs()[0]
    }
}

fn require_tap(enc: &EncoderDescriptor, stride: usize) -> Result<(NodeId, usize), MetaArchError> {
    enc.tap(stride)
        .map(|t| (t.node.clone(), t.channels))
        .ok_or_else(|| MetaArchError::MissingTap {
            encoder: enc.name.clone(),
            stride,
        })
}

fn display_encoder_name(enc: &EncoderDescriptor) -> String {
    let base = enc.name.trim_end_matches("-dilated");
    base.parse::<EncoderKind>()
        .map(|k| k.display_name().to_string())
        .unwrap_or_else(|_| base.to_string())
}

fn score_conv(num_classes: usize) -> LayerSpec {
    LayerSpec::conv(num_classes, 1, 1, 0).with_bias(true)
}

fn upsample_x2(channels: usize) -> LayerSpec {
    LayerSpec::transposed_conv(channels, 4, 2, 1)
}

fn upsample_x8(channels: usize) -> LayerSpec {
    LayerSpec::transposed_conv(channels, 16, 8, 4)
}

/// FCN-8s style decoding in label space: 1x1 score convs on the stride 8, 16
/// and 32 taps; the stride-32 heatmap is upsampled x2 and added to the
/// stride-16 one, upsampled x2 again and added to the stride-8 one, then
/// upsampled x8 to full resolution.
pub fn build_skipnet(enc: &EncoderDescriptor, num_classes: usize) -> Result<SegmentationModel, MetaArchError> {
    if num_classes == 0 {
        return Err(MetaArchError::NoClasses);
    }
    let (t8, _) = require_tap(enc, 8)?;
    let (t16, _) = require_tap(enc, 16)?;
    let (t32, _) = require_tap(enc, 32)?;
    let mut b = GraphBuilder::from_graph(&enc.graph)?;
    let image = IMAGE_INPUT.to_string();
    let s32 = b.push("dec/score32", score_conv(num_classes), &[&t32])?;
    let s16 = b.push("dec/score16", score_conv(num_classes), &[&t16])?;
    let s8 = b.push("dec/score8", score_conv(num_classes), &[&t8])?;
    let up32 = b.push("dec/up32", upsample_x2(num_classes), &[&s32, &s16])?;
    let f16 = b.push("dec/fuse16", LayerSpec::add(), &[&up32, &s16])?;
    let up16 = b.push("dec/up16", upsample_x2(num_classes), &[&f16, &s8])?;
    let f8 = b.push("dec/fuse8", LayerSpec::add(), &[&up16, &s8])?;
    let out = b.push("dec/up8", upsample_x8(num_classes), &[&f8, &image])?;
    Ok(SegmentationModel {
        encoder_name: display_encoder_name(enc),
        decoder_name: DecoderKind::SkipNet.display_name().into(),
        graph: b.finish(&[&out]),
        num_classes,
        scoring_nodes: vec![s32, s16, s8],
    })
}

/// Stage-wise decoding in feature space.
///
/// From the stride-32 tap, each x2 transposed conv halves the channel count
/// and is fused by elementwise addition with the encoder tap of the same
/// stride (through a 1x1 projection when the tap width differs). After the
/// highest-resolution tap the features are upsampled to stride 1 (x2 steps,
/// halving each time) and a 1x1 conv produces the class scores. Missing
/// intermediate strides are bridged by stacked x2 upsamplings without fusion.
pub fn build_unet(enc: &EncoderDescriptor, num_classes: usize) -> Result<SegmentationModel, MetaArchError> {
    if num_classes == 0 {
        return Err(MetaArchError::NoClasses);
    }
    let (top, mut channels) = require_tap(enc, 32)?;
    for s in [8, 16] {
        require_tap(enc, s)?;
    }
    let mut b = GraphBuilder::from_graph(&enc.graph)?;
    let image = IMAGE_INPUT.to_string();
    let mut cur = top;
    let mut stride = 32usize;
    let mut step = 0usize;
    let fuse_strides: Vec<usize> = enc.taps.keys().rev().copied().filter(|&s| s < 32).collect();
    let mut targets: Vec<Option<usize>> = fuse_strides.iter().map(|&s| Some(s)).collect();
    targets.push(None); // final climb to stride 1
    for target in targets {
        let goal = target.unwrap_or(1);
        while stride > goal {
            step += 1;
            channels = (channels / 2).max(1);
            let next = stride / 2;
            let reference = if next == goal {
                match target {
                    Some(s) => Some(enc.taps[&s].node.clone()),
                    None => Some(image.clone()),
                }
            } else {
                None
            };
            let id = format!("dec/up{step}");
            cur = match &reference {
                Some(r) => b.push(&id, upsample_x2(channels), &[&cur, r])?,
                None => b.push(&id, upsample_x2(channels), &[&cur])?,
            };
            stride = next;
        }
        if let Some(s) = target {
            let tap = &enc.taps[&s];
            let skip = if tap.channels == channels {
                tap.node.clone()
            } else {
                b.push(
                    &format!("dec/proj{s}"),
                    LayerSpec::conv(channels, 1, 1, 0).with_bias(true),
                    &[&tap.node],
                )?
            };
            cur = b.push(&format!("dec/fuse{s}"), LayerSpec::add(), &[&cur, &skip])?;
        }
    }
    let out = b.push("dec/classifier", score_conv(num_classes), &[&cur])?;
    Ok(SegmentationModel {
        encoder_name: display_encoder_name(enc),
        decoder_name: DecoderKind::UNet.display_name().into(),
        graph: b.finish(&[&out]),
        num_classes,
        scoring_nodes: vec![out],
    })
}

pub fn build_dilation_frontend(
    enc: &EncoderDescriptor,
    num_classes: usize,
) -> Result<SegmentationModel, MetaArchError> {
    build_dilation_frontend_with(enc, num_classes, DilationUpsample::default())
}

/// Converts the encoder to stride 8 with dilated convolutions, scores the
/// stride-8 features with a 1x1 conv and upsamples x8 once.
pub fn build_dilation_frontend_with(
    enc: &EncoderDescriptor,
    num_classes: usize,
    upsample: DilationUpsample,
) -> Result<SegmentationModel, MetaArchError> {
    if num_classes == 0 {
        return Err(MetaArchError::NoClasses);
    }
    let converted = apply_dilation_conversion(enc)?;
    let mut b = GraphBuilder::from_graph(&converted.graph)?;
    let image = IMAGE_INPUT.to_string();
    let score = b.push("dec/score8", score_conv(num_classes), &[&converted.output])?;
    let out = match upsample {
        DilationUpsample::Bilinear => b.push("dec/resize8", LayerSpec::bilinear_resize(8), &[&score, &image])?,
        DilationUpsample::Transposed => b.push("dec/up8", upsample_x8(num_classes), &[&score, &image])?,
    };
    Ok(SegmentationModel {
        encoder_name: display_encoder_name(enc),
        decoder_name: DecoderKind::Dilation.display_name().into(),
        graph: b.finish(&[&out]),
        num_classes,
        scoring_nodes: vec![score],
    })
}

/// SegNet-style reference used only for cost comparison: the VGG16 encoder
/// (with batchnorm) and a mirrored decoder where each unpooling is modelled
/// as a x2 bilinear resize followed by the stage's conv stack, 13 decoder
/// convs in total, the last one producing class scores.
pub fn build_segnet_reference(num_classes: usize) -> Result<SegmentationModel, MetaArchError> {
    if num_classes == 0 {
        return Err(MetaArchError::NoClasses);
    }
    let enc = build_vgg16()?;
    let mut b = GraphBuilder::from_graph(&enc.graph)?;
    // (stage, encoder node giving the pre-pool size, decoder widths)
    let stages: [(usize, &str, &[usize]); 5] = [
        (5, "enc/conv5_3_relu", &[512, 512, 512]),
        (4, "enc/conv4_3_relu", &[512, 512, 256]),
        (3, "enc/conv3_3_relu", &[256, 256, 128]),
        (2, "enc/conv2_2_relu", &[128, 64]),
        (1, "enc/conv1_2_relu", &[64, 0]),
    ];
    let mut cur = enc.output.clone();
    for (stage, reference, widths) in stages {
        let reference = reference.to_string();
        cur = b.push(&format!("dec/unpool{stage}"), LayerSpec::bilinear_resize(2), &[&cur, &reference])?;
        for (i, &w) in widths.iter().enumerate() {
            let name = format!("dec/conv{stage}_{}_D", widths.len() - i);
            cur = if w == 0 {
                b.push(&name, LayerSpec::conv(num_classes, 3, 1, 1).with_bias(true), &[&cur])?
            } else {
                conv_bn_relu(&mut b, &name, &cur, LayerSpec::conv(w, 3, 1, 1), true, true)?
            };
        }
    }
    Ok(SegmentationModel {
        encoder_name: "VGG16".into(),
        decoder_name: "SegNet".into(),
        graph: b.finish(&[&cur]),
        num_classes,
        scoring_nodes: vec![cur],
    })
}

pub fn build_decoder(
    kind: DecoderKind,
    enc: &EncoderDescriptor,
    num_classes: usize,
) -> Result<SegmentationModel, MetaArchError> {
    match kind {
        DecoderKind::SkipNet => build_skipnet(enc, num_classes),
        DecoderKind::UNet => build_unet(enc, num_classes),
        DecoderKind::Dilation => build_dilation_frontend(enc, num_classes),
    }
}

/// Builds an encoder/decoder pairing from registry names.
pub fn build_model(
    encoder: EncoderKind,
    decoder: DecoderKind,
    opts: &EncoderOptions,
    num_classes: usize,
) -> Result<SegmentationModel, MetaArchError> {
    let enc = build_encoder(encoder, opts)?;
    build_decoder(decoder, &enc, num_classes)
}
