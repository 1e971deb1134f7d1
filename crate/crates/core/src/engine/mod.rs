//! Reference CPU executor for [`NetworkGraph`]s: forward, reverse-mode
//! gradients and parameter storage. Everything is computed in `f64`.

pub mod kernels;
mod tensor;

use std::collections::{BTreeMap, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

pub use tensor::Tensor;

use crate::graph::{
    infer_channels, infer_shape, topological_order, GraphError, LayerKind, LayerSpec, NetworkGraph, Node, NodeId,
    TensorShape,
};
use crate::meta_arch::SegmentationModel;
use kernels::{BnCache, Geom};

/// Momentum of the running batchnorm statistics.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("graph has {declared} inputs but {given} tensors were supplied")]
    InputArity { declared: usize, given: usize },
    #[error("input `{node}` has {expected} channels, tensor has shape {got:?}")]
    InputShape {
        node: NodeId,
        expected: usize,
        got: Vec<usize>,
    },
    #[error("missing parameter `{0}`")]
    MissingParameter(String),
    #[error("parameter `{name}` has shape {got:?}, expected {expected:?}")]
    ParameterShape {
        name: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("expected {expected} output gradients, got {got}")]
    GradientArity { expected: usize, got: usize },
    #[error("gradient for output `{node}` has shape {got:?}, expected {expected:?}")]
    GradientShape {
        node: NodeId,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
}

pub type Result<T> = std::result::Result<T, EngineError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batchnorm uses batch statistics.
    Train,
    /// Batchnorm uses running statistics.
    Eval,
}

pub fn weight_name(node: &str) -> String {
    format!("{node}.weight")
}

pub fn bias_name(node: &str) -> String {
    format!("{node}.bias")
}

fn bn_names(node: &str) -> [String; 4] {
    [
        format!("{node}.gamma"),
        format!("{node}.beta"),
        format!("{node}.running_mean"),
        format!("{node}.running_var"),
    ]
}

/// Channel count produced by every node.
pub fn node_channels(graph: &NetworkGraph) -> Result<HashMap<NodeId, usize>> {
    let order = topological_order(graph)?;
    let mut ch: HashMap<NodeId, usize> = HashMap::with_capacity(graph.len());
    for i in order {
        let n = &graph.nodes()[i];
        let c = if n.layer.kind == LayerKind::Input {
            n.layer.out_channels
        } else {
            let ins: Vec<usize> = n.data_inputs().iter().map(|id| ch[id]).collect();
            infer_channels(&n.layer, &ins)?
        };
        ch.insert(n.id.clone(), c);
    }
    Ok(ch)
}

/// Expected shapes of learned parameters and of buffers, keyed by name.
pub type ShapeMap = BTreeMap<String, Vec<usize>>;

pub fn parameter_shapes(graph: &NetworkGraph) -> Result<(ShapeMap, ShapeMap)> {
    let ch = node_channels(graph)?;
    let mut params = BTreeMap::new();
    let mut buffers = BTreeMap::new();
    for n in graph.nodes() {
        let l = &n.layer;
        let (kh, kw) = l.kernel;
        match l.kind {
            LayerKind::TransposedConv => {
                let cin = ch[&n.inputs[0]];
                params.insert(weight_name(&n.id), vec![cin, l.out_channels / l.groups, kh, kw]);
            }
            k if k.is_forward_conv() => {
                let cin = ch[&n.inputs[0]];
                params.insert(weight_name(&n.id), vec![l.out_channels, cin / l.groups, kh, kw]);
            }
            LayerKind::BatchNorm => {
                let c = ch[&n.inputs[0]];
                let [g, b, m, v] = bn_names(&n.id);
                params.insert(g, vec![c]);
                params.insert(b, vec![c]);
                buffers.insert(m, vec![c]);
                buffers.insert(v, vec![c]);
            }
            _ => {}
        }
        if l.kind.is_conv_family() && l.has_bias {
            params.insert(bias_name(&n.id), vec![l.out_channels]);
        }
    }
    Ok((params, buffers))
}

/// 1-D bilinear interpolation kernel of size `k`.
pub fn bilinear_kernel_1d(k: usize) -> Vec<f64> {
    let f = k.div_ceil(2) as f64;
    let center = if k % 2 == 1 { f - 1.0 } else { f - 0.5 };
    (0..k).map(|i| 1.0 - (i as f64 - center).abs() / f).collect()
}

/// Learned parameters and non-learned buffers of a model.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelParams {
    pub parameters: BTreeMap<String, Tensor>,
    pub buffers: BTreeMap<String, Tensor>,
}

impl ModelParams {
    /// Seeded initialisation: He-normal forward convs, bilinear transposed
    /// convs, zero biases, unit batchnorm.
    pub fn init(graph: &NetworkGraph, seed: u64) -> Result<Self> {
        let (pshapes, bshapes) = parameter_shapes(graph)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut parameters = BTreeMap::new();
        for n in graph.nodes() {
            let l = &n.layer;
            if l.kind.is_conv_family() {
                let name = weight_name(&n.id);
                let shape = &pshapes[&name];
                let w = if l.kind == LayerKind::TransposedConv {
                    bilinear_weights(shape, l.groups)
                } else {
                    let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
                    let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
                    let data = (0..shape.iter().product::<usize>()).map(|_| normal.sample(&mut rng)).collect();
                    Tensor::from_vec(shape, data)
                };
                parameters.insert(name, w);
                if l.has_bias {
                    parameters.insert(bias_name(&n.id), Tensor::zeros(&[l.out_channels]));
                }
            } else if l.kind == LayerKind::BatchNorm {
                let [g, b, _, _] = bn_names(&n.id);
                let c = pshapes[&g].clone();
                parameters.insert(g, Tensor::filled(&c, 1.0));
                parameters.insert(b, Tensor::zeros(&c));
            }
        }
        let buffers = bshapes
            .into_iter()
            .map(|(name, shape)| {
                let v = if name.ends_with(".running_var") { 1.0 } else { 0.0 };
                (name, Tensor::filled(&shape, v))
            })
            .collect();
        Ok(Self { parameters, buffers })
    }

    /// [`ModelParams::init`] with the class-scoring convs zeroed, so an
    /// untrained model predicts uniform class probabilities.
    pub fn for_model(model: &SegmentationModel, seed: u64) -> Result<Self> {
        let mut p = Self::init(&model.graph, seed)?;
        for node in &model.scoring_nodes {
            if let Some(w) = p.parameters.get_mut(&weight_name(node)) {
                w.data_mut().fill(0.0);
            }
        }
        Ok(p)
    }

    pub fn num_parameters(&self) -> usize {
        self.parameters.values().map(Tensor::numel).sum()
    }

    /// Checks that every expected tensor is present with the right shape.
    pub fn check(&self, graph: &NetworkGraph) -> Result<()> {
        let (p, b) = parameter_shapes(graph)?;
        for (expected, store) in [(&p, &self.parameters), (&b, &self.buffers)] {
            for (name, shape) in expected {
                let t = store.get(name).ok_or_else(|| EngineError::MissingParameter(name.clone()))?;
                if t.shape() != shape.as_slice() {
                    return Err(EngineError::ParameterShape {
                        name: name.clone(),
                        expected: shape.clone(),
                        got: t.shape().to_vec(),
                    });
                }
            }
        }
        Ok(())
    }

    fn param(&self, name: &str) -> Result<&Tensor> {
        self.parameters
            .get(name)
            .ok_or_else(|| EngineError::MissingParameter(name.to_string()))
    }

    fn buffer(&self, name: &str) -> Result<&Tensor> {
        self.buffers
            .get(name)
            .ok_or_else(|| EngineError::MissingParameter(name.to_string()))
    }

    /// Folds the batch statistics recorded on a training tape into the
    /// running averages.
    pub fn update_running_stats(&mut self, tape: &Tape, momentum: f64) {
        for (node, cache) in &tape.bn_stats() {
            let [_, _, m, v] = bn_names(node);
            if let Some(rm) = self.buffers.get_mut(&m) {
                for (r, b) in rm.data_mut().iter_mut().zip(&cache.batch_mean) {
                    *r = (1.0 - momentum) * *r + momentum * b;
                }
            }
            if let Some(rv) = self.buffers.get_mut(&v) {
                for (r, b) in rv.data_mut().iter_mut().zip(&cache.batch_var) {
                    *r = (1.0 - momentum) * *r + momentum * b;
                }
            }
        }
    }
}

fn bilinear_weights(shape: &[usize], groups: usize) -> Tensor {
    let (cin, cout_g, kh, kw) = (shape[0], shape[1], shape[2], shape[3]);
    let fy = bilinear_kernel_1d(kh);
    let fx = bilinear_kernel_1d(kw);
    let cin_g = cin / groups;
    let mut t = Tensor::zeros(shape);
    for ci in 0..cin {
        let local = ci % cin_g;
        for co in 0..cout_g {
            let scale = if cin_g == cout_g {
                if local == co { 1.0 } else { 0.0 }
            } else {
                1.0 / cin_g as f64
            };
            if scale == 0.0 {
                continue;
            }
            for i in 0..kh {
                for j in 0..kw {
                    t.data_mut()[((ci * cout_g + co) * kh + i) * kw + j] = scale * fy[i] * fx[j];
                }
            }
        }
    }
    t
}

fn geom(l: &LayerSpec) -> Geom {
    Geom {
        kh: l.kernel.0,
        kw: l.kernel.1,
        sh: l.stride.0,
        sw: l.stride.1,
        ph: l.padding.0,
        pw: l.padding.1,
        dil: l.dilation,
    }
}

#[derive(Debug, Clone)]
enum Cache {
    None,
    MaxArg(Vec<u32>),
    Bn(BnCache),
}

/// Activations and saved state of one forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    mode: Mode,
    ids: Vec<NodeId>,
    values: Vec<Tensor>,
    caches: Vec<Cache>,
    outputs: Vec<usize>,
}

impl Tape {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn value(&self, id: &str) -> Option<&Tensor> {
        self.ids.iter().position(|n| n == id).map(|i| &self.values[i])
    }

    /// Values of the graph outputs, in declaration order.
    pub fn outputs(&self) -> Vec<&Tensor> {
        self.outputs.iter().map(|&i| &self.values[i]).collect()
    }

    fn bn_stats(&self) -> Vec<(&NodeId, &BnCache)> {
        if self.mode != Mode::Train {
            return Vec::new();
        }
        self.ids
            .iter()
            .zip(&self.caches)
            .filter_map(|(id, c)| match c {
                Cache::Bn(b) => Some((id, b)),
                _ => None,
            })
            .collect()
    }
}

/// Gradients of a scalar objective.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub parameters: BTreeMap<String, Tensor>,
    /// One entry per graph input.
    pub inputs: Vec<Tensor>,
}

/// Runs a graph in a fixed topological order.
#[derive(Debug, Clone)]
pub struct Executor<'g> {
    graph: &'g NetworkGraph,
    order: Vec<usize>,
    /// Node index by id.
    index: HashMap<&'g str, usize>,
}

impl<'g> Executor<'g> {
    pub fn new(graph: &'g NetworkGraph) -> Result<Self> {
        let order = topological_order(graph)?;
        let index = graph.nodes().iter().enumerate().map(|(i, n)| (n.id.as_str(), i)).collect();
        Ok(Self { graph, order, index })
    }

    pub fn graph(&self) -> &NetworkGraph {
        self.graph
    }

    fn check_inputs(&self, inputs: &[Tensor]) -> Result<()> {
        let declared = self.graph.inputs();
        if declared.len() != inputs.len() {
            return Err(EngineError::InputArity {
                declared: declared.len(),
                given: inputs.len(),
            });
        }
        for (id, t) in declared.iter().zip(inputs) {
            let c = self.graph.node(id).map_or(0, |n| n.layer.out_channels);
            if t.shape().len() != 4 || t.shape()[1] != c {
                return Err(EngineError::InputShape {
                    node: id.clone(),
                    expected: c,
                    got: t.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    /// Forward pass keeping every activation for [`Executor::backward`].
    pub fn forward(&self, params: &ModelParams, inputs: &[Tensor], mode: Mode) -> Result<Tape> {
        self.check_inputs(inputs)?;
        let nodes = self.graph.nodes();
        let mut values: Vec<Option<Tensor>> = vec![None; nodes.len()];
        let mut caches: Vec<Cache> = vec![Cache::None; nodes.len()];
        for &i in &self.order {
            let (v, c) = self.eval_node(&nodes[i], &values, params, inputs, mode)?;
            values[i] = Some(v);
            caches[i] = c;
        }
        let outputs = self.output_positions()?;
        Ok(Tape {
            mode,
            ids: nodes.iter().map(|n| n.id.clone()).collect(),
            values: values.into_iter().map(|v| v.expect("every node evaluated")).collect(),
            caches,
            outputs,
        })
    }

    /// Eval-mode forward that frees each activation after its last use.
    pub fn infer(&self, params: &ModelParams, inputs: &[Tensor]) -> Result<Vec<Tensor>> {
        self.check_inputs(inputs)?;
        let nodes = self.graph.nodes();
        let outputs = self.output_positions()?;
        let mut last_use = vec![0usize; nodes.len()];
        for (step, &i) in self.order.iter().enumerate() {
            for id in &nodes[i].inputs {
                last_use[self.index[id.as_str()]] = step;
            }
        }
        for &o in &outputs {
            last_use[o] = usize::MAX;
        }
        let mut values: Vec<Option<Tensor>> = vec![None; nodes.len()];
        for (step, &i) in self.order.iter().enumerate() {
            let (v, _) = self.eval_node(&nodes[i], &values, params, inputs, Mode::Eval)?;
            values[i] = Some(v);
            for id in &nodes[i].inputs {
                let j = self.index[id.as_str()];
                if last_use[j] == step {
                    values[j] = None;
                }
            }
        }
        Ok(outputs.iter().map(|&o| values[o].take().expect("output kept")).collect())
    }

    fn output_positions(&self) -> Result<Vec<usize>> {
        self.graph
            .outputs()
            .iter()
            .map(|id| {
                self.index
                    .get(id.as_str())
                    .copied()
                    .ok_or_else(|| GraphError::UnknownNode(id.clone()).into())
            })
            .collect()
    }

    fn value<'v>(&self, values: &'v [Option<Tensor>], id: &str) -> Result<&'v Tensor> {
        self.index
            .get(id)
            .and_then(|&i| values[i].as_ref())
            .ok_or_else(|| GraphError::UnknownNode(id.to_string()).into())
    }

    fn eval_node(
        &self,
        n: &Node,
        values: &[Option<Tensor>],
        params: &ModelParams,
        inputs: &[Tensor],
        mode: Mode,
    ) -> Result<(Tensor, Cache)> {
        let l = &n.layer;
        if l.kind == LayerKind::Input {
            let pos = self.graph.inputs().iter().position(|id| *id == n.id).ok_or_else(|| {
                EngineError::Graph(GraphError::ShapeMismatch(format!("input node `{}` is not declared", n.id)))
            })?;
            return Ok((inputs[pos].clone(), Cache::None));
        }
        let ins: Vec<&Tensor> = n
            .inputs
            .iter()
            .map(|id| self.value(values, id))
            .collect::<Result<_>>()?;
        let shapes: Vec<TensorShape> = ins.iter().map(|t| t.tensor_shape()).collect();
        let out = infer_shape(l, &shapes)?;
        let x = ins[0];
        let g = geom(l);
        let bias = || -> Result<Option<&[f64]>> {
            if l.has_bias {
                Ok(Some(params.param(&bias_name(&n.id))?.data()))
            } else {
                Ok(None)
            }
        };
        let y = match l.kind {
            LayerKind::Input => unreachable!(),
            LayerKind::Conv | LayerKind::GroupedConv | LayerKind::DepthwiseConv => {
                let w = self.checked_weight(params, n, x)?;
                kernels::conv_forward(x, w.data(), bias()?, l.out_channels, l.groups, &g, out.height, out.width)
            }
            LayerKind::TransposedConv => {
                let w = self.checked_weight(params, n, x)?;
                kernels::conv_transpose_forward(x, w.data(), bias()?, l.out_channels, l.groups, &g, out.height, out.width)
            }
            LayerKind::MaxPool => {
                let (y, arg) = kernels::max_pool_forward(x, &g, out.height, out.width);
                return Ok((y, Cache::MaxArg(arg)));
            }
            LayerKind::AvgPool => kernels::avg_pool_forward(x, &g, out.height, out.width),
            LayerKind::BatchNorm => {
                let [gn, bn, mn, vn] = bn_names(&n.id);
                let gamma = params.param(&gn)?;
                let beta = params.param(&bn)?;
                let c = x.shape()[1];
                for (name, t) in [(&gn, gamma), (&bn, beta)] {
                    if t.shape() != [c] {
                        return Err(EngineError::ParameterShape {
                            name: name.clone(),
                            expected: vec![c],
                            got: t.shape().to_vec(),
                        });
                    }
                }
                let running = match mode {
                    Mode::Train => None,
                    Mode::Eval => Some((params.buffer(&mn)?.data(), params.buffer(&vn)?.data())),
                };
                let (y, cache) = kernels::batchnorm_forward(x, gamma.data(), beta.data(), running);
                return Ok((y, Cache::Bn(cache)));
            }
            LayerKind::Relu => {
                let mut y = x.clone();
                for v in y.data_mut() {
                    *v = v.max(0.0);
                }
                y
            }
            LayerKind::ElementwiseAdd => {
                let mut y = x.clone();
                for t in &ins[1..] {
                    y.add_assign(t);
                }
                y
            }
            LayerKind::Concat => concat(&ins),
            LayerKind::ChannelShuffle => {
                let perm = shuffle_perm(x.shape()[1], l.groups);
                kernels::permute_channels(x, &perm)
            }
            LayerKind::BilinearResize => kernels::bilinear_forward(x, out.height, out.width),
            LayerKind::GlobalPool => {
                let (nb, c, h, w) = x.dims4();
                let plane = h * w;
                let data = x.data().chunks(plane).map(|p| p.iter().sum::<f64>() / plane as f64).collect();
                Tensor::from_vec(&[nb, c, 1, 1], data)
            }
        };
        Ok((y, Cache::None))
    }

    fn checked_weight<'p>(&self, params: &'p ModelParams, n: &Node, x: &Tensor) -> Result<&'p Tensor> {
        let name = weight_name(&n.id);
        let w = params.param(&name)?;
        let l = &n.layer;
        let cin = x.shape()[1];
        let expected = if l.kind == LayerKind::TransposedConv {
            vec![cin, l.out_channels / l.groups, l.kernel.0, l.kernel.1]
        } else {
            vec![l.out_channels, cin / l.groups, l.kernel.0, l.kernel.1]
        };
        if w.shape() != expected.as_slice() {
            return Err(EngineError::ParameterShape {
                name,
                expected,
                got: w.shape().to_vec(),
            });
        }
        if l.has_bias {
            let b = params.param(&bias_name(&n.id))?;
            if b.shape() != [l.out_channels] {
                return Err(EngineError::ParameterShape {
                    name: bias_name(&n.id),
                    expected: vec![l.out_channels],
                    got: b.shape().to_vec(),
                });
            }
        }
        Ok(w)
    }

    /// Reverse pass. `output_grads` holds `dL/d(output)` for every graph
    /// output, in declaration order.
    pub fn backward(&self, params: &ModelParams, tape: &Tape, output_grads: &[Tensor]) -> Result<Gradients> {
        let nodes = self.graph.nodes();
        if output_grads.len() != tape.outputs.len() {
            return Err(EngineError::GradientArity {
                expected: tape.outputs.len(),
                got: output_grads.len(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        for (&o, g) in tape.outputs.iter().zip(output_grads) {
            if g.shape() != tape.values[o].shape() {
                return Err(EngineError::GradientShape {
                    node: nodes[o].id.clone(),
                    expected: tape.values[o].shape().to_vec(),
                    got: g.shape().to_vec(),
                });
            }
            accumulate(&mut grads[o], g.clone());
        }
        let mut pgrads: BTreeMap<String, Tensor> = BTreeMap::new();
        for &i in self.order.iter().rev() {
            let n = &nodes[i];
            let Some(dy) = grads[i].take() else { continue };
            if n.layer.kind == LayerKind::Input {
                grads[i] = Some(dy);
                continue;
            }
            let data_ins: Vec<usize> = n.data_inputs().iter().map(|id| self.index[id.as_str()]).collect();
            let xs: Vec<&Tensor> = data_ins.iter().map(|&j| &tape.values[j]).collect();
            let dxs = self.node_backward(n, &xs, &tape.values[i], &tape.caches[i], &dy, params, tape.mode, &mut pgrads)?;
            for (j, dx) in data_ins.into_iter().zip(dxs) {
                accumulate(&mut grads[j], dx);
            }
            grads[i] = None;
        }
        let inputs = self
            .graph
            .inputs()
            .iter()
            .map(|id| {
                let j = self.index[id.as_str()];
                grads[j].take().unwrap_or_else(|| Tensor::zeros(tape.values[j].shape()))
            })
            .collect();
        // parameters that received no gradient (unused branches) get zeros
        for (name, p) in &params.parameters {
            pgrads.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
        }
        Ok(Gradients {
            parameters: pgrads,
            inputs,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn node_backward(
        &self,
        n: &Node,
        xs: &[&Tensor],
        y: &Tensor,
        cache: &Cache,
        dy: &Tensor,
        params: &ModelParams,
        mode: Mode,
        pgrads: &mut BTreeMap<String, Tensor>,
    ) -> Result<Vec<Tensor>> {
        let l = &n.layer;
        let x = xs[0];
        let g = geom(l);
        let mut put = |name: String, shape: &[usize], data: Vec<f64>| {
            let t = Tensor::from_vec(shape, data);
            accumulate_map(pgrads, name, t);
        };
        Ok(match l.kind {
            LayerKind::Input => unreachable!(),
            LayerKind::Conv | LayerKind::GroupedConv | LayerKind::DepthwiseConv | LayerKind::TransposedConv => {
                let w = params.param(&weight_name(&n.id))?;
                let (dx, dw, db) = if l.kind == LayerKind::TransposedConv {
                    kernels::conv_transpose_backward(x, w.data(), dy, l.groups, &g, true, l.has_bias)
                } else {
                    kernels::conv_backward(x, w.data(), dy, l.groups, &g, true, l.has_bias)
                };
                put(weight_name(&n.id), w.shape(), dw);
                if let Some(db) = db {
                    put(bias_name(&n.id), &[l.out_channels], db);
                }
                vec![dx.expect("requested")]
            }
            LayerKind::MaxPool => {
                let Cache::MaxArg(arg) = cache else { unreachable!("max pool caches argmax") };
                vec![kernels::max_pool_backward(x.shape(), dy, arg)]
            }
            LayerKind::AvgPool => vec![kernels::avg_pool_backward(x.shape(), dy, &g)],
            LayerKind::BatchNorm => {
                let Cache::Bn(c) = cache else { unreachable!("batchnorm caches statistics") };
                let [gn, bn, _, _] = bn_names(&n.id);
                let gamma = params.param(&gn)?;
                let (dx, dg, db) = kernels::batchnorm_backward(dy, gamma.data(), c, mode == Mode::Train);
                let ch = [gamma.numel()];
                put(gn, &ch, dg);
                put(bn, &ch, db);
                vec![dx]
            }
            LayerKind::Relu => {
                let mut dx = dy.clone();
                for (d, &v) in dx.data_mut().iter_mut().zip(y.data()) {
                    if v <= 0.0 {
                        *d = 0.0;
                    }
                }
                vec![dx]
            }
            LayerKind::ElementwiseAdd => vec![dy.clone(); xs.len()],
            LayerKind::Concat => split_channels(dy, xs),
            LayerKind::ChannelShuffle => {
                let perm = shuffle_perm(x.shape()[1], l.groups);
                vec![kernels::permute_channels(dy, &kernels::invert_permutation(&perm))]
            }
            LayerKind::BilinearResize => vec![kernels::bilinear_backward(x.shape(), dy)],
            LayerKind::GlobalPool => {
                let (_, _, h, w) = x.dims4();
                let plane = h * w;
                let mut dx = Tensor::zeros(x.shape());
                for (chunk, &gv) in dx.data_mut().chunks_mut(plane).zip(dy.data()) {
                    chunk.fill(gv / plane as f64);
                }
                vec![dx]
            }
        })
    }
}

fn accumulate(slot: &mut Option<Tensor>, t: Tensor) {
    match slot {
        Some(s) => s.add_assign(&t),
        None => *slot = Some(t),
    }
}

fn accumulate_map(map: &mut BTreeMap<String, Tensor>, name: String, t: Tensor) {
    match map.get_mut(&name) {
        Some(s) => s.add_assign(&t),
        None => {
            map.insert(name, t);
        }
    }
}

fn shuffle_perm(channels: usize, groups: usize) -> Vec<usize> {
    crate::zoo::channel_shuffle(channels, groups).expect("shape inference checked divisibility")
}

fn concat(ins: &[&Tensor]) -> Tensor {
    let (n, _, h, w) = ins[0].dims4();
    let plane = h * w;
    let total: usize = ins.iter().map(|t| t.shape()[1]).sum();
    let mut y = Tensor::zeros(&[n, total, h, w]);
    for b in 0..n {
        let mut off = 0;
        for t in ins {
            let c = t.shape()[1];
            let src = &t.data()[b * c * plane..(b + 1) * c * plane];
            let d = (b * total + off) * plane;
            y.data_mut()[d..d + c * plane].copy_from_slice(src);
            off += c;
        }
    }
    y
}

fn split_channels(dy: &Tensor, xs: &[&Tensor]) -> Vec<Tensor> {
    let (n, total, h, w) = dy.dims4();
    let plane = h * w;
    let mut off = 0;
    xs.iter()
        .map(|x| {
            let c = x.shape()[1];
            let mut dx = Tensor::zeros(x.shape());
            for b in 0..n {
                let s = (b * total + off) * plane;
                dx.data_mut()[b * c * plane..(b + 1) * c * plane].copy_from_slice(&dy.data()[s..s + c * plane]);
            }
            off += c;
            dx
        })
        .collect()
}
