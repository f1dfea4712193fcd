//! Executable networks built from phenotypes.
//!
//! [`Network::build`] instantiates layers by pushing a dummy sample through
//! them one at a time, so every dimension a layer sees comes from an actual
//! tensor rather than from the static shape checker.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::Rng;

use super::ops::{self, BatchNormCache, ConvGeom};
use super::{Tensor, TrainError};
use crate::catalog::{Activation, LayerSpec};
use crate::genome::Phenotype;
use crate::scalar::Scalar;
use crate::shapecheck::{ShapeError, ShapeErrorKind, TensorShape};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// A named parameter array. Non-trainable blocks hold batch-norm running
/// statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlock<S> {
    pub layer: usize,
    pub name: &'static str,
    pub shape: Vec<usize>,
    pub values: Vec<S>,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq)]
enum Op {
    Conv { geom: ConvGeom, weight: usize, bias: usize },
    MaxPool,
    AvgPool,
    GlobalAvgPool,
    Act(Activation),
    Dropout { rate: f64 },
    BatchNorm {
        momentum: f64,
        epsilon: f64,
        gamma: usize,
        beta: usize,
        mean: usize,
        var: usize,
    },
    Dense { inputs: usize, weight: usize, bias: usize },
    Add,
    Flatten,
    Softmax,
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Conv { .. } => "conv",
            Op::MaxPool => "maxpool",
            Op::AvgPool => "avgpool",
            Op::GlobalAvgPool => "globalavgpool",
            Op::Act(_) => "activation",
            Op::Dropout { .. } => "dropout",
            Op::BatchNorm { .. } => "batchnorm",
            Op::Dense { .. } => "dense",
            Op::Add => "add",
            Op::Flatten => "flatten",
            Op::Softmax => "softmax",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Node {
    op: Op,
    inputs: Vec<usize>,
    out_shape: TensorShape,
}

#[derive(Debug, Clone, PartialEq)]
enum Aux<S> {
    None,
    Argmax(Vec<usize>),
    Mask(Vec<S>),
    Norm(BatchNormCache<S>),
}

/// Activations of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardPass<S> {
    slots: Vec<Tensor<S>>,
    aux: Vec<Aux<S>>,
    mode: Mode,
}

impl<S: Scalar> ForwardPass<S> {
    /// Class probabilities, `(batch, classes)`.
    pub fn probabilities(&self) -> &Tensor<S> {
        self.slots.last().expect("network has a head")
    }

    pub fn logits(&self) -> &Tensor<S> {
        &self.slots[self.slots.len() - 2]
    }

    /// Output of evolved layer `i` (or of head layer `layers + j`).
    pub fn layer_output(&self, i: usize) -> &Tensor<S> {
        &self.slots[i + 1]
    }
}

#[derive(Debug, Clone)]
pub struct Gradients<S> {
    /// One entry per parameter block; zeros for non-trainable blocks.
    pub params: Vec<Vec<S>>,
    pub input: Option<Tensor<S>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network<S> {
    input_shape: TensorShape,
    evolved: usize,
    nodes: Vec<Node>,
    params: Vec<ParamBlock<S>>,
}

fn spatial(x: TensorShape) -> Result<(usize, usize, usize), ShapeErrorKind> {
    match x {
        TensorShape::Spatial { h, w, c } => Ok((h, w, c)),
        TensorShape::Flat(_) => Err(ShapeErrorKind::RankMismatch),
    }
}

fn uniform_init<S: Scalar, R: Rng + ?Sized>(n: usize, limit: f64, rng: &mut R) -> Vec<S> {
    (0..n)
        .map(|_| S::from_f64_lossy(rng.gen_range(-limit..=limit)))
        .collect()
}

/// He-uniform when the consumer is a ReLU-family activation, Glorot-uniform otherwise.
fn init_limit(fan_in: usize, fan_out: usize, relu_family: bool) -> f64 {
    if relu_family {
        (6.0 / fan_in as f64).sqrt()
    } else {
        (6.0 / (fan_in + fan_out) as f64).sqrt()
    }
}

impl<S: Scalar> Network<S> {
    /// Instantiates the phenotype (plus head) by executing it layer by layer
    /// on a zero sample of `input_shape`. Fails with the first layer whose
    /// kernel rejects the tensor it receives.
    pub fn build<R: Rng + ?Sized>(p: &Phenotype, input_shape: TensorShape, rng: &mut R) -> Result<Self, ShapeError> {
        let n = p.layers.len();
        let mut relu_fed = vec![false; n + 1];
        for layer in &p.layers {
            if let LayerSpec::Activation { which } = layer.spec {
                if which.is_relu_family() {
                    for &s in &layer.inputs {
                        if s <= n {
                            relu_fed[s] = true;
                        }
                    }
                }
            }
        }

        let mut net = Network {
            input_shape,
            evolved: n,
            nodes: Vec::with_capacity(n + 3),
            params: Vec::new(),
        };
        let mut slots: Vec<Tensor<S>> = vec![Tensor::zeros(1, input_shape)];
        let specs = p
            .layers
            .iter()
            .map(|l| (Some(l.spec), l.inputs.clone()))
            .chain([(None, vec![n]), (None, vec![n + 1]), (None, vec![n + 2])]);
        let mut rng_dropout = rand::rngs::mock::StepRng::new(0, 0);
        for (i, (spec, inputs)) in specs.enumerate() {
            let err = |reason| ShapeError { at_layer: i, reason };
            if inputs.iter().any(|&s| s > i) {
                return Err(err(ShapeErrorKind::DanglingInput));
            }
            let ins: Vec<&Tensor<S>> = inputs.iter().map(|&s| &slots[s]).collect();
            let op = match spec {
                Some(spec) => net.instantiate(i, &spec, &ins, relu_fed[i + 1], rng).map_err(err)?,
                None if i == n => Op::Flatten,
                None if i == n + 1 => {
                    let features = match ins[0].shape() {
                        TensorShape::Flat(f) => f,
                        TensorShape::Spatial { .. } => return Err(err(ShapeErrorKind::RankMismatch)),
                    };
                    let classes = p.head.classes;
                    let limit = init_limit(features, classes, false);
                    let weight = net.push_param(i, "weight", vec![features, classes], uniform_init(features * classes, limit, rng), true);
                    let bias = net.push_param(i, "bias", vec![classes], vec![S::zero(); classes], true);
                    Op::Dense {
                        inputs: features,
                        weight,
                        bias,
                    }
                }
                None => Op::Softmax,
            };
            let placeholder = Node {
                op,
                inputs: inputs.clone(),
                out_shape: ins[0].shape(),
            };
            let (out, _) = net.apply(&placeholder, &ins, Mode::Infer, &mut rng_dropout).map_err(err)?;
            net.nodes.push(Node {
                out_shape: out.shape(),
                ..placeholder
            });
            slots.push(out);
        }
        Ok(net)
    }

    fn push_param(&mut self, layer: usize, name: &'static str, shape: Vec<usize>, values: Vec<S>, trainable: bool) -> usize {
        self.params.push(ParamBlock {
            layer,
            name,
            shape,
            values,
            trainable,
        });
        self.params.len() - 1
    }

    fn instantiate<R: Rng + ?Sized>(
        &mut self,
        layer: usize,
        spec: &LayerSpec,
        ins: &[&Tensor<S>],
        relu_fed: bool,
        rng: &mut R,
    ) -> Result<Op, ShapeErrorKind> {
        if ins.len() != spec.arity() {
            return Err(ShapeErrorKind::DanglingInput);
        }
        let x = ins[0].shape();
        Ok(match *spec {
            LayerSpec::Conv { filters, kernel } => {
                let (h, w, cin) = spatial(x)?;
                let geom = ConvGeom {
                    h,
                    w,
                    cin,
                    kernel,
                    filters,
                };
                let fan_in = kernel * kernel * cin;
                let limit = init_limit(fan_in, kernel * kernel * filters, relu_fed);
                let weight = self.push_param(layer, "weight", vec![kernel, kernel, cin, filters], uniform_init(fan_in * filters, limit, rng), true);
                let bias = self.push_param(layer, "bias", vec![filters], vec![S::zero(); filters], true);
                Op::Conv { geom, weight, bias }
            }
            LayerSpec::MaxPool => Op::MaxPool,
            LayerSpec::AvgPool => Op::AvgPool,
            LayerSpec::GlobalAvgPool => Op::GlobalAvgPool,
            LayerSpec::Activation { which } => Op::Act(which),
            LayerSpec::Dropout { rate } => Op::Dropout { rate },
            LayerSpec::BatchNorm { momentum, epsilon } => {
                let c = x.last_dim();
                let gamma = self.push_param(layer, "gamma", vec![c], vec![S::one(); c], true);
                let beta = self.push_param(layer, "beta", vec![c], vec![S::zero(); c], true);
                let mean = self.push_param(layer, "running_mean", vec![c], vec![S::zero(); c], false);
                let var = self.push_param(layer, "running_var", vec![c], vec![S::one(); c], false);
                Op::BatchNorm {
                    momentum,
                    epsilon,
                    gamma,
                    beta,
                    mean,
                    var,
                }
            }
            LayerSpec::Dense { units } => {
                let inputs = match x {
                    TensorShape::Flat(f) => f,
                    TensorShape::Spatial { .. } => return Err(ShapeErrorKind::RankMismatch),
                };
                let limit = init_limit(inputs, units, relu_fed);
                let weight = self.push_param(layer, "weight", vec![inputs, units], uniform_init(inputs * units, limit, rng), true);
                let bias = self.push_param(layer, "bias", vec![units], vec![S::zero(); units], true);
                Op::Dense { inputs, weight, bias }
            }
            LayerSpec::Add => Op::Add,
        })
    }

    /// Runs one node's kernel on concrete input tensors.
    fn apply<R: Rng + ?Sized>(
        &self,
        node: &Node,
        ins: &[&Tensor<S>],
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Tensor<S>, Aux<S>), ShapeErrorKind> {
        let x = ins[0];
        let batch = x.batch();
        let shape = x.shape();
        Ok(match &node.op {
            Op::Conv { geom, weight, bias } => {
                let (h, w, c) = spatial(shape)?;
                if (h, w, c) != (geom.h, geom.w, geom.cin) {
                    return Err(ShapeErrorKind::RankMismatch);
                }
                let out_shape = TensorShape::Spatial {
                    h,
                    w,
                    c: geom.filters,
                };
                let mut y = Tensor::zeros(batch, out_shape);
                ops::conv_forward(
                    x.data(),
                    batch,
                    geom,
                    &self.params[*weight].values,
                    &self.params[*bias].values,
                    y.data_mut(),
                );
                (y, Aux::None)
            }
            Op::MaxPool | Op::AvgPool => {
                let (h, w, c) = spatial(shape)?;
                let (oh, ow) = (h / 2, w / 2);
                if oh == 0 || ow == 0 {
                    return Err(ShapeErrorKind::SpatialUnderflow);
                }
                let mut y = Tensor::zeros(batch, TensorShape::Spatial { h: oh, w: ow, c });
                if node.op == Op::MaxPool {
                    let mut arg = vec![0; y.data().len()];
                    ops::maxpool_forward(x.data(), batch, (h, w, c), y.data_mut(), &mut arg);
                    (y, Aux::Argmax(arg))
                } else {
                    ops::avgpool_forward(x.data(), batch, (h, w, c), y.data_mut());
                    (y, Aux::None)
                }
            }
            Op::GlobalAvgPool => {
                let (h, w, c) = spatial(shape)?;
                let mut y = Tensor::zeros(batch, TensorShape::Flat(c));
                ops::global_avgpool_forward(x.data(), batch, (h, w, c), y.data_mut());
                (y, Aux::None)
            }
            Op::Act(a) => {
                let mut y = Tensor::zeros(batch, shape);
                ops::activation_forward(*a, x.data(), shape.last_dim(), y.data_mut());
                (y, Aux::None)
            }
            Op::Dropout { rate } => match mode {
                Mode::Infer => (x.clone(), Aux::None),
                Mode::Train => {
                    let keep = S::from_f64_lossy(1.0 / (1.0 - rate));
                    let mask: Vec<S> = (0..x.data().len())
                        .map(|_| if rng.gen::<f64>() < *rate { S::zero() } else { keep })
                        .collect();
                    let data = x.data().iter().zip(&mask).map(|(v, m)| *v * *m).collect();
                    (Tensor::new(batch, shape, data), Aux::Mask(mask))
                }
            },
            Op::BatchNorm {
                epsilon,
                gamma,
                beta,
                mean,
                var,
                ..
            } => {
                let c = shape.last_dim();
                if c != self.params[*gamma].values.len() {
                    return Err(ShapeErrorKind::RankMismatch);
                }
                let eps = S::from_f64_lossy(*epsilon);
                let mut y = Tensor::zeros(batch, shape);
                match mode {
                    Mode::Train => {
                        let cache = ops::batchnorm_forward_train(
                            x.data(),
                            c,
                            eps,
                            &self.params[*gamma].values,
                            &self.params[*beta].values,
                            y.data_mut(),
                        );
                        (y, Aux::Norm(cache))
                    }
                    Mode::Infer => {
                        ops::batchnorm_forward_infer(
                            x.data(),
                            c,
                            eps,
                            &self.params[*gamma].values,
                            &self.params[*beta].values,
                            &self.params[*mean].values,
                            &self.params[*var].values,
                            y.data_mut(),
                        );
                        (y, Aux::None)
                    }
                }
            }
            Op::Dense { inputs, weight, bias } => {
                match shape {
                    TensorShape::Flat(f) if f == *inputs => {}
                    _ => return Err(ShapeErrorKind::RankMismatch),
                }
                let units = self.params[*bias].values.len();
                let mut y = Tensor::zeros(batch, TensorShape::Flat(units));
                ops::dense_forward(
                    x.data(),
                    batch,
                    *inputs,
                    &self.params[*weight].values,
                    &self.params[*bias].values,
                    y.data_mut(),
                );
                (y, Aux::None)
            }
            Op::Add => {
                let other = ins[1];
                if other.shape() != shape || other.batch() != batch {
                    return Err(ShapeErrorKind::ResidualShapeConflict);
                }
                let data = x.data().iter().zip(other.data()).map(|(a, b)| *a + *b).collect();
                (Tensor::new(batch, shape, data), Aux::None)
            }
            Op::Flatten => (x.clone().reshaped(TensorShape::Flat(shape.numel())), Aux::None),
            Op::Softmax => {
                let mut y = Tensor::zeros(batch, shape);
                ops::softmax_rows(x.data(), shape.last_dim(), y.data_mut());
                (y, Aux::None)
            }
        })
    }

    pub fn input_shape(&self) -> TensorShape {
        self.input_shape
    }

    pub fn output_shape(&self) -> TensorShape {
        self.nodes.last().expect("head present").out_shape
    }

    /// Number of evolved (non-head) layers.
    pub fn evolved_layers(&self) -> usize {
        self.evolved
    }

    /// Per-sample output shape of every layer, head included.
    pub fn layer_shapes(&self) -> Vec<TensorShape> {
        self.nodes.iter().map(|n| n.out_shape).collect()
    }

    pub fn layer_kinds(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.kind()).collect()
    }

    pub fn params(&self) -> &[ParamBlock<S>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [ParamBlock<S>] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.values.len()).sum()
    }

    pub fn forward<R: Rng + ?Sized>(&self, x: Tensor<S>, mode: Mode, rng: &mut R) -> Result<ForwardPass<S>, ShapeError> {
        if x.shape() != self.input_shape {
            let reason = if x.shape().rank() != self.input_shape.rank() {
                ShapeErrorKind::RankMismatch
            } else {
                ShapeErrorKind::SpatialUnderflow
            };
            return Err(ShapeError { at_layer: 0, reason });
        }
        let mut slots = Vec::with_capacity(self.nodes.len() + 1);
        let mut aux = Vec::with_capacity(self.nodes.len());
        slots.push(x);
        for (i, node) in self.nodes.iter().enumerate() {
            let ins: Vec<&Tensor<S>> = node.inputs.iter().map(|&s| &slots[s]).collect();
            let (y, a) = self
                .apply(node, &ins, mode, rng)
                .map_err(|reason| ShapeError { at_layer: i, reason })?;
            slots.push(y);
            aux.push(a);
        }
        Ok(ForwardPass { slots, aux, mode })
    }

    /// Inference-mode class probabilities.
    pub fn predict(&self, x: Tensor<S>) -> Result<Tensor<S>, ShapeError> {
        let mut unused = rand::rngs::mock::StepRng::new(0, 0);
        let pass = self.forward(x, Mode::Infer, &mut unused)?;
        Ok(pass.slots.into_iter().last().expect("head present"))
    }

    /// Mean categorical cross-entropy and its gradients.
    pub fn backward(&self, pass: &ForwardPass<S>, labels: &[usize], want_input_grad: bool) -> Result<(f64, Gradients<S>), TrainError> {
        let logits = pass.logits();
        let probs = pass.probabilities();
        let batch = logits.batch();
        assert_eq!(labels.len(), batch, "one label per sample");
        let classes = logits.shape().numel();

        let mut loss = S::zero();
        for (row, &y) in logits.data().chunks(classes).zip(labels) {
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let lse = row.iter().fold(S::zero(), |acc, v| acc + (*v - max).exp()).ln() + max;
            loss += lse - row[y];
        }
        let loss = loss.to_f64_lossy() / batch as f64;
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss(loss));
        }

        let inv_batch = S::one() / S::from_usize_lossy(batch);
        let mut grads: Vec<Option<Vec<S>>> = vec![None; pass.slots.len()];
        let mut dlogits: Vec<S> = probs.data().iter().map(|p| *p * inv_batch).collect();
        for (n, &y) in labels.iter().enumerate() {
            dlogits[n * classes + y] -= inv_batch;
        }
        let logits_slot = pass.slots.len() - 2;
        grads[logits_slot] = Some(dlogits);

        let mut pgrads: Vec<Vec<S>> = self.params.iter().map(|p| vec![S::zero(); p.values.len()]).collect();
        // the final softmax is folded into the loss gradient above
        for i in (0..self.nodes.len() - 1).rev() {
            let Some(dy) = grads[i + 1].take() else {
                continue;
            };
            let node = &self.nodes[i];
            let wants = |s: usize| s != 0 || want_input_grad;
            let x = &pass.slots[node.inputs[0]];
            let xs = x.shape();
            let batch = x.batch();
            let dx_for = |slot: usize, grads: &mut Vec<Option<Vec<S>>>| -> Option<Vec<S>> {
                if !wants(slot) {
                    return None;
                }
                Some(grads[slot].take().unwrap_or_else(|| vec![S::zero(); pass.slots[slot].data().len()]))
            };
            match &node.op {
                Op::Conv { geom, weight, bias } => {
                    let slot = node.inputs[0];
                    let mut dx = dx_for(slot, &mut grads);
                    let (dw, db) = two_mut(&mut pgrads, *weight, *bias);
                    ops::conv_backward(
                        x.data(),
                        &dy,
                        batch,
                        geom,
                        &self.params[*weight].values,
                        dw,
                        db,
                        dx.as_deref_mut(),
                    );
                    grads[slot] = dx;
                }
                Op::MaxPool => {
                    let slot = node.inputs[0];
                    if let Some(mut dx) = dx_for(slot, &mut grads) {
                        let Aux::Argmax(arg) = &pass.aux[i] else {
                            unreachable!("maxpool records argmax")
                        };
                        ops::maxpool_backward(&dy, arg, &mut dx);
                        grads[slot] = Some(dx);
                    }
                }
                Op::AvgPool => {
                    let slot = node.inputs[0];
                    if let Some(mut dx) = dx_for(slot, &mut grads) {
                        let dims = spatial(xs).expect("built on spatial input");
                        ops::avgpool_backward(&dy, batch, dims, &mut dx);
                        grads[slot] = Some(dx);
                    }
                }
                Op::GlobalAvgPool => {
                    let slot = node.inputs[0];
                    if let Some(mut dx) = dx_for(slot, &mut grads) {
                        let dims = spatial(xs).expect("built on spatial input");
                        ops::global_avgpool_backward(&dy, batch, dims, &mut dx);
                        grads[slot] = Some(dx);
                    }
                }
                Op::Act(a) => {
                    let slot = node.inputs[0];
                    if let Some(mut dx) = dx_for(slot, &mut grads) {
                        ops::activation_backward(*a, x.data(), pass.slots[i + 1].data(), &dy, xs.last_dim(), &mut dx);
                        grads[slot] = Some(dx);
                    }
                }
                Op::Dropout { .. } => {
                    let slot = node.inputs[0];
                    if let Some(mut dx) = dx_for(slot, &mut grads) {
                        match &pass.aux[i] {
                            Aux::Mask(mask) => {
                                for ((d, g), m) in dx.iter_mut().zip(&dy).zip(mask) {
                                    *d += *g * *m;
                                }
                            }
                            _ => add_into(&mut dx, &dy),
                        }
                        grads[slot] = Some(dx);
                    }
                }
                Op::BatchNorm {
                    epsilon,
                    gamma,
                    beta,
                    mean,
                    var,
                    ..
                } => {
                    let slot = node.inputs[0];
                    let c = xs.last_dim();
                    let mut dx = dx_for(slot, &mut grads).unwrap_or_default();
                    let need_dx = !dx.is_empty();
                    let (dg, dbeta) = two_mut(&mut pgrads, *gamma, *beta);
                    let gvals = &self.params[*gamma].values;
                    match &pass.aux[i] {
                        Aux::Norm(cache) => {
                            let mut scratch;
                            let target = if need_dx {
                                &mut dx
                            } else {
                                scratch = vec![S::zero(); dy.len()];
                                &mut scratch
                            };
                            ops::batchnorm_backward_train(cache, &dy, c, gvals, dg, dbeta, target);
                        }
                        _ => {
                            // inference mode: affine map with frozen statistics
                            let eps = S::from_f64_lossy(*epsilon);
                            let rm = &self.params[*mean].values;
                            let rv = &self.params[*var].values;
                            for (k, g) in dy.iter().enumerate() {
                                let j = k % c;
                                let inv = S::one() / (rv[j] + eps).sqrt();
                                dg[j] += *g * (x.data()[k] - rm[j]) * inv;
                                dbeta[j] += *g;
                                if need_dx {
                                    dx[k] += *g * gvals[j] * inv;
                                }
                            }
                        }
                    }
                    if need_dx {
                        grads[slot] = Some(dx);
                    }
                }
                Op::Dense { inputs, weight, bias } => {
                    let slot = node.inputs[0];
                    let mut dx = dx_for(slot, &mut grads);
                    let (dw, db) = two_mut(&mut pgrads, *weight, *bias);
                    ops::dense_backward(
                        x.data(),
                        &dy,
                        batch,
                        *inputs,
                        &self.params[*weight].values,
                        dw,
                        db,
                        dx.as_deref_mut(),
                    );
                    grads[slot] = dx;
                }
                Op::Add => {
                    for &slot in &node.inputs {
                        if let Some(mut dx) = dx_for(slot, &mut grads) {
                            add_into(&mut dx, &dy);
                            grads[slot] = Some(dx);
                        }
                    }
                }
                Op::Flatten => {
                    let slot = node.inputs[0];
                    if let Some(mut dx) = dx_for(slot, &mut grads) {
                        add_into(&mut dx, &dy);
                        grads[slot] = Some(dx);
                    }
                }
                Op::Softmax => unreachable!("only the head ends in softmax"),
            }
        }
        let input = if want_input_grad {
            let shape = pass.slots[0].shape();
            let data = grads[0]
                .take()
                .unwrap_or_else(|| vec![S::zero(); pass.slots[0].data().len()]);
            Some(Tensor::new(pass.slots[0].batch(), shape, data))
        } else {
            None
        };
        Ok((loss, Gradients { params: pgrads, input }))
    }

    /// Folds a training pass's batch statistics into the running averages.
    pub fn update_running_stats(&mut self, pass: &ForwardPass<S>) {
        if pass.mode != Mode::Train {
            return;
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Op::BatchNorm { momentum, mean, var, .. }, Aux::Norm(cache)) = (&node.op, &pass.aux[i]) {
                let m = S::from_f64_lossy(*momentum);
                let one_m = S::one() - m;
                for (r, b) in self.params[*mean].values.iter_mut().zip(&cache.mean) {
                    *r = m * *r + one_m * *b;
                }
                for (r, b) in self.params[*var].values.iter_mut().zip(&cache.var) {
                    *r = m * *r + one_m * *b;
                }
            }
        }
    }

    /// Flat little-endian blob plus a manifest with one
    /// `layer name shape byte_offset` line per block.
    pub fn save_params(&self, blob: &Path, manifest: &Path) -> std::io::Result<()> {
        let width = std::mem::size_of::<S>();
        let mut bytes = Vec::new();
        let mut text = format!("# dtype=f{} blocks={}\n", width * 8, self.params.len());
        for p in &self.params {
            let shape = p.shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x");
            writeln!(text, "{} {} {} {}", p.layer, p.name, shape, bytes.len()).unwrap();
            for v in &p.values {
                if width == 4 {
                    bytes.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
                } else {
                    bytes.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
                }
            }
        }
        fs::File::create(blob)?.write_all(&bytes)?;
        fs::write(manifest, text)
    }

    /// Loads values written by [`Network::save_params`] into a network with
    /// the same architecture.
    pub fn load_params(&mut self, blob: &Path, manifest: &Path) -> std::io::Result<()> {
        let invalid = |m: String| std::io::Error::new(std::io::ErrorKind::InvalidData, m);
        let bytes = fs::read(blob)?;
        let text = fs::read_to_string(manifest)?;
        let width = if text.starts_with("# dtype=f64") { 8 } else { 4 };
        let lines: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
        if lines.len() != self.params.len() {
            return Err(invalid(format!("manifest lists {} blocks, network has {}", lines.len(), self.params.len())));
        }
        for (p, line) in self.params.iter_mut().zip(lines) {
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 4 || fields[1] != p.name {
                return Err(invalid(format!("manifest line `{line}` does not match block {}", p.name)));
            }
            let offset: usize = fields[3].parse().map_err(|_| invalid(format!("bad offset in `{line}`")))?;
            let end = offset + p.values.len() * width;
            let chunk = bytes.get(offset..end).ok_or_else(|| invalid("blob too short".into()))?;
            for (v, b) in p.values.iter_mut().zip(chunk.chunks(width)) {
                let x = if width == 4 {
                    f32::from_le_bytes(b.try_into().unwrap()) as f64
                } else {
                    f64::from_le_bytes(b.try_into().unwrap())
                };
                *v = S::from_f64_lossy(x);
            }
        }
        Ok(())
    }
}

fn add_into<S: Scalar>(dst: &mut [S], src: &[S]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

fn two_mut<T>(v: &mut [T], a: usize, b: usize) -> (&mut T, &mut T) {
    assert!(a < b, "parameter blocks are allocated weight-then-bias");
    let (lo, hi) = v.split_at_mut(b);
    (&mut lo[a], &mut hi[0])
}
