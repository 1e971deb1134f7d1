//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use segbench_core::engine::{Executor, Mode, ModelParams, Tensor};
use segbench_core::graph::{GraphBuilder, LayerKind, LayerSpec, NetworkGraph, TensorShape};
use segbench_core::training::{weighted_cross_entropy, LossConfig};
use segbench_core::zoo::blocks::{basic_block, depthwise_separable, shuffle_unit};

pub fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// `|a - b| / (1 + max(|a|, |b|))`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / (1.0 + a.abs().max(b.abs()))
}

fn objective(ex: &Executor, p: &ModelParams, x: &[Tensor], r: &[Tensor], mode: Mode) -> f64 {
    let tape = ex.forward(p, x, mode).unwrap();
    tape.outputs().iter().zip(r).map(|(y, r)| y.dot(r)).sum()
}

/// How many finite-difference probes to spend on a graph.
#[derive(Debug, Clone, Copy)]
pub struct Probe {
    /// Probes per parameter tensor.
    pub per_tensor: usize,
    /// Only every `tensor_stride`-th parameter tensor is probed.
    pub tensor_stride: usize,
    /// Probes per input tensor.
    pub per_input: usize,
}

pub const DENSE: Probe = Probe {
    per_tensor: 7,
    tensor_stride: 1,
    per_input: 11,
};

pub const SPARSE: Probe = Probe {
    per_tensor: 2,
    tensor_stride: 4,
    per_input: 11,
};

/// Largest relative error between central differences (h = 1e-6) and the
/// reverse pass of `sum(r * y)`, with randomly perturbed parameters and
/// buffers so every term is generic.
pub fn graph_fd_error(graph: &NetworkGraph, input_shape: &[usize], mode: Mode, seed: u64, probe: Probe) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ex = Executor::new(graph).unwrap();
    let mut p = ModelParams::init(graph, seed).unwrap();
    for t in p.parameters.values_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    for (name, t) in p.buffers.iter_mut() {
        for v in t.data_mut() {
            *v = if name.ends_with("running_var") {
                rng.random_range(0.5..2.0)
            } else {
                rng.random_range(-0.5..0.5)
            };
        }
    }
    let x: Vec<Tensor> = graph.inputs().iter().map(|_| random_tensor(input_shape, &mut rng)).collect();
    let tape = ex.forward(&p, &x, mode).unwrap();
    let r: Vec<Tensor> = tape.outputs().iter().map(|y| random_tensor(y.shape(), &mut rng)).collect();
    let grads = ex.backward(&p, &tape, &r).unwrap();

    let h = 1e-6;
    let mut worst = 0.0f64;
    let names: Vec<String> = p.parameters.keys().cloned().collect();
    for name in names.into_iter().step_by(probe.tensor_stride) {
        let n = p.parameters[&name].numel();
        for i in (0..n).step_by((n / probe.per_tensor).max(1)) {
            let orig = p.parameters[&name].data()[i];
            p.parameters.get_mut(&name).unwrap().data_mut()[i] = orig + h;
            let up = objective(&ex, &p, &x, &r, mode);
            p.parameters.get_mut(&name).unwrap().data_mut()[i] = orig - h;
            let down = objective(&ex, &p, &x, &r, mode);
            p.parameters.get_mut(&name).unwrap().data_mut()[i] = orig;
            worst = worst.max(rel_err((up - down) / (2.0 * h), grads.parameters[&name].data()[i]));
        }
    }
    for k in 0..x.len() {
        let n = x[k].numel();
        for i in (0..n).step_by((n / probe.per_input).max(1)) {
            let mut xp = x.clone();
            xp[k].data_mut()[i] += h;
            let up = objective(&ex, &p, &xp, &r, mode);
            xp[k].data_mut()[i] -= 2.0 * h;
            let down = objective(&ex, &p, &xp, &r, mode);
            worst = worst.max(rel_err((up - down) / (2.0 * h), grads.inputs[k].data()[i]));
        }
    }
    worst
}

/// The primitive blocks at tiny sizes, with an input shape for each.
pub fn primitive_blocks() -> Vec<(&'static str, NetworkGraph, Vec<usize>)> {
    let mut out = Vec::new();

    let mut b = GraphBuilder::new();
    let x = b.input("x", 4);
    let y = depthwise_separable(&mut b, "ds", &x, 6, 2).unwrap();
    out.push(("depthwise-separable", b.finish(&[&y]), vec![2, 4, 7, 6]));

    let mut b = GraphBuilder::new();
    let x = b.input("x", 12);
    let y = shuffle_unit(&mut b, "su", &x, 12, 3, 1, 3).unwrap();
    out.push(("shuffle-unit", b.finish(&[&y]), vec![2, 12, 5, 6]));

    let mut b = GraphBuilder::new();
    let x = b.input("x", 12);
    let y = shuffle_unit(&mut b, "su", &x, 24, 3, 2, 3).unwrap();
    out.push(("shuffle-unit-strided", b.finish(&[&y]), vec![2, 12, 6, 5]));

    let mut b = GraphBuilder::new();
    let x = b.input("x", 4);
    let y = basic_block(&mut b, "rb", &x, 4, 1).unwrap();
    out.push(("residual-block", b.finish(&[&y]), vec![2, 4, 5, 5]));

    let mut b = GraphBuilder::new();
    let x = b.input("x", 3);
    let y = basic_block(&mut b, "rb", &x, 5, 2).unwrap();
    out.push(("residual-block-projection", b.finish(&[&y]), vec![2, 3, 6, 6]));

    let mut b = GraphBuilder::new();
    let x = b.input("x", 3);
    let y = b
        .push("up", LayerSpec::transposed_conv(4, 4, 2, 1).with_bias(true), &[&x])
        .unwrap();
    out.push(("transposed-conv", b.finish(&[&y]), vec![2, 3, 4, 5]));

    out
}

/// Largest relative error of the weighted cross-entropy logit gradient on
/// random `(2, 4, 6, 6)` logits with some ignored pixels.
pub fn cross_entropy_fd_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let logits = random_tensor(&[2, 4, 6, 6], &mut rng);
    let labels: Vec<u8> = (0..72)
        .map(|_| if rng.random_bool(0.1) { 255 } else { rng.random_range(0..4) })
        .collect();
    let cfg = LossConfig {
        class_weights: (0..4).map(|_| rng.random_range(0.5..3.0)).collect(),
        ignore_index: 255,
        weight_constant_c: 1.02,
    };
    let (_, grad) = weighted_cross_entropy(&logits, &labels, &cfg).unwrap();
    // entries are O(1 / pixels), so errors are relative to the largest one
    let scale = grad.data().iter().fold(0.0f64, |m, g| m.max(g.abs()));
    let h = 1e-6;
    let mut worst = 0.0f64;
    for i in 0..logits.numel() {
        let mut up = logits.clone();
        up.data_mut()[i] += h;
        let mut down = logits.clone();
        down.data_mut()[i] -= h;
        let fd = (weighted_cross_entropy(&up, &labels, &cfg).unwrap().0
            - weighted_cross_entropy(&down, &labels, &cfg).unwrap().0)
            / (2.0 * h);
        worst = worst.max((fd - grad.data()[i]).abs() / scale);
    }
    worst
}

/// Window start positions along one axis, found by sliding until the
/// window leaves the padded extent.
fn window_starts(size: usize, kernel_extent: usize, stride: usize, pad: usize) -> Vec<isize> {
    let mut starts = Vec::new();
    let mut s = -(pad as isize);
    while s + kernel_extent as isize <= (size + pad) as isize {
        starts.push(s);
        s += stride as isize;
    }
    starts
}

/// Multiply counts of a direct loop-nest evaluation (padded taps
/// included) plus element ops of pools and a brute-force parameter count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LoopCount {
    pub macs: u64,
    pub pool_ops: u64,
    pub params: u64,
}

pub fn loop_nest_count(layer: &LayerSpec, input: TensorShape) -> LoopCount {
    let (kh, kw) = layer.kernel;
    let (sh, sw) = layer.stride;
    let (ph, pw) = layer.padding;
    let d = layer.dilation;
    let mut c = LoopCount::default();
    let cin = input.channels;
    match layer.kind {
        LayerKind::Conv | LayerKind::GroupedConv | LayerKind::DepthwiseConv => {
            let g = layer.groups;
            let rows = window_starts(input.height, d * (kh - 1) + 1, sh, ph);
            let cols = window_starts(input.width, d * (kw - 1) + 1, sw, pw);
            for _n in 0..input.batch {
                for oc in 0..layer.out_channels {
                    let group = oc / (layer.out_channels / g);
                    for _ in &rows {
                        for _ in &cols {
                            for ic in 0..cin {
                                if ic / (cin / g) != group {
                                    continue;
                                }
                                for _ky in 0..kh {
                                    for _kx in 0..kw {
                                        c.macs += 1;
                                    }
                                }
                            }
                        }
                    }
                }
            }
            for oc in 0..layer.out_channels {
                for ic in 0..cin {
                    if ic / (cin / g) == oc / (layer.out_channels / g) {
                        c.params += (kh * kw) as u64;
                    }
                }
            }
        }
        LayerKind::TransposedConv => {
            let g = layer.groups;
            for _n in 0..input.batch {
                for ic in 0..cin {
                    for _y in 0..input.height {
                        for _x in 0..input.width {
                            for _ky in 0..kh {
                                for _kx in 0..kw {
                                    for oc in 0..layer.out_channels {
                                        if oc / (layer.out_channels / g) == ic / (cin / g) {
                                            c.macs += 1;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            for ic in 0..cin {
                for oc in 0..layer.out_channels {
                    if oc / (layer.out_channels / g) == ic / (cin / g) {
                        c.params += (kh * kw) as u64;
                    }
                }
            }
        }
        LayerKind::MaxPool | LayerKind::AvgPool => {
            let rows = window_starts(input.height, kh, sh, ph);
            let cols = window_starts(input.width, kw, sw, pw);
            for _ in 0..input.batch * cin {
                for _ in &rows {
                    for _ in &cols {
                        c.pool_ops += (kh * kw) as u64;
                    }
                }
            }
        }
        _ => {}
    }
    if layer.has_bias && layer.kind.is_conv_family() {
        c.params += layer.out_channels as u64;
    }
    c
}

fn divisors(n: usize) -> Vec<usize> {
    (1..=n).filter(|d| n % d == 0).collect()
}

/// A random tiny conv-family or pooling layer with its input shape. All
/// dims stay at or below 8.
pub fn random_layer(rng: &mut ChaCha8Rng) -> (LayerSpec, TensorShape) {
    loop {
        let input = TensorShape::new(
            rng.random_range(1..=2),
            rng.random_range(1..=8),
            rng.random_range(1..=8),
            rng.random_range(1..=8),
        );
        let k = rng.random_range(1..=5);
        let s = rng.random_range(1..=3);
        let p = rng.random_range(0..=2);
        let cin = input.channels;
        let mut layer = match rng.random_range(0..6) {
            0 => LayerSpec::conv(rng.random_range(1..=8), k, s, p),
            1 => {
                let gs = divisors(cin);
                let g = gs[rng.random_range(0..gs.len())];
                LayerSpec::grouped_conv(g * rng.random_range(1..=(8 / g).max(1)), k, s, p, g)
            }
            2 => LayerSpec::depthwise(cin, k, s, p),
            3 => {
                let gs = divisors(cin);
                let g = gs[rng.random_range(0..gs.len())];
                LayerSpec {
                    groups: g,
                    ..LayerSpec::transposed_conv(g * rng.random_range(1..=3), k, s, p)
                }
            }
            4 => LayerSpec::max_pool(k, s, p),
            _ => LayerSpec::avg_pool(k, s, p),
        };
        if layer.kind.is_conv_family() && rng.random_bool(0.4) {
            layer = layer.with_dilation(rng.random_range(2..=3));
        }
        if layer.kind.is_conv_family() {
            layer = layer.with_bias(rng.random_bool(0.5));
        }
        if segbench_core::graph::infer_shape(&layer, &[input]).is_ok() {
            return (layer, input);
        }
    }
}

/// Set-based IoU: per class, `|pred ∩ truth| / |pred ∪ truth|` over the
/// non-ignored pixel indices; mean over classes with a non-empty union.
pub fn brute_force_iou(pred: &[u8], label: &[u8], k: usize, ignore: u8) -> (Vec<Option<f64>>, Option<f64>) {
    let ious: Vec<Option<f64>> = (0..k as u8)
        .map(|c| {
            let p: BTreeSet<usize> = (0..pred.len()).filter(|&i| label[i] != ignore && pred[i] == c).collect();
            let t: BTreeSet<usize> = (0..pred.len()).filter(|&i| label[i] == c).collect();
            let union = p.union(&t).count();
            (union > 0).then(|| p.intersection(&t).count() as f64 / union as f64)
        })
        .collect();
    let present: Vec<f64> = ious.iter().flatten().copied().collect();
    let mean = (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
    (ious, mean)
}
