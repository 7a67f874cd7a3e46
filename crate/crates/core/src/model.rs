//! Whole-network forward and backward passes over a [`NetworkDef`] and its
//! [`WeightStore`].

use thiserror::Error;

use crate::graph::{self, GraphError, ShapeTable};
use crate::netcfg::{Activation, ConvSpec, LayerKind, NetworkDef, WeightError, WeightStore};
use crate::nnops::{
    self, activate, activation_backward, batchnorm_backward, batchnorm_forward, conv2d_backward, conv2d_forward,
    BnParams, ConvGeom, OpError, Tensor, DEFAULT_EPSILON,
};

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Weights(#[from] WeightError),
    #[error("layer {layer}: {source}")]
    Op { layer: usize, source: OpError },
    #[error("input shape {actual:?} does not match network input {expected:?}")]
    InputShape { expected: Vec<usize>, actual: Vec<usize> },
    #[error("expected {expected} output gradients, got {actual}")]
    GradientCount { expected: usize, actual: usize },
}

fn op(layer: usize) -> impl Fn(OpError) -> ModelError {
    move |source| ModelError::Op { layer, source }
}

/// A network definition bound to aligned weights.
#[derive(Debug, Clone)]
pub struct Model {
    pub net: NetworkDef,
    pub weights: WeightStore,
    pub epsilon: f32,
    shapes: ShapeTable,
    last_use: Vec<usize>,
}

/// Per-layer intermediates kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub input: Tensor,
    pub outputs: Vec<Tensor>,
    /// Convolution output before normalization (conv layers only).
    pub conv_raw: Vec<Option<Tensor>>,
    /// Pre-activation values (conv and shortcut layers).
    pub pre_act: Vec<Option<Tensor>>,
}

impl ForwardCache {
    /// Tensors at the network output layers, in order.
    pub fn heads(&self, model: &Model) -> Vec<Tensor> {
        model.output_layers().iter().map(|&o| self.outputs[o].clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads {
    pub kernel: Vec<f32>,
    /// Gradient of β (batch-normalized) or of the plain bias.
    pub biases: Vec<f32>,
    pub gamma: Option<Vec<f32>>,
}

impl ConvGrads {
    fn add(&mut self, other: &ConvGrads) {
        fn acc(a: &mut [f32], b: &[f32]) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        acc(&mut self.kernel, &other.kernel);
        acc(&mut self.biases, &other.biases);
        if let (Some(a), Some(b)) = (&mut self.gamma, &other.gamma) {
            acc(a, b);
        }
    }

    fn scale(&mut self, s: f32) {
        for v in self
            .kernel
            .iter_mut()
            .chain(self.biases.iter_mut())
            .chain(self.gamma.iter_mut().flatten())
        {
            *v *= s;
        }
    }
}

/// Parameter gradients, aligned with [`WeightStore::convs`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub convs: Vec<Option<ConvGrads>>,
    pub input: Option<Tensor>,
}

impl Gradients {
    /// Element-wise sum; `other` is added in place.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (a, b) in self.convs.iter_mut().zip(&other.convs) {
            if let (Some(a), Some(b)) = (a, b) {
                a.add(b);
            }
        }
    }

    pub fn scale(&mut self, s: f32) {
        for g in self.convs.iter_mut().flatten() {
            g.scale(s);
        }
    }
}

impl Model {
    pub fn new(net: NetworkDef, weights: WeightStore) -> Result<Self, ModelError> {
        let shapes = graph::infer_shapes(&net)?;
        weights.check_aligned(&net)?;
        let n = net.layers.len();
        let mut last_use: Vec<usize> = (0..n).collect();
        for i in 0..n {
            for src in net.inputs_of(i) {
                last_use[src] = last_use[src].max(i);
            }
        }
        for &o in &shapes.outputs {
            last_use[o] = usize::MAX;
        }
        Ok(Model {
            net,
            weights,
            epsilon: DEFAULT_EPSILON,
            shapes,
            last_use,
        })
    }

    pub fn shapes(&self) -> &ShapeTable {
        &self.shapes
    }

    pub fn output_layers(&self) -> &[usize] {
        &self.shapes.outputs
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.net.input_channels, self.net.input_height, self.net.input_width]
    }

    pub fn bn_params(&self, layer: usize) -> Option<BnParams> {
        let w = self.weights.conv(layer)?;
        let bn = w.bn.as_ref()?;
        Some(BnParams {
            gamma: bn.gamma.clone(),
            beta: w.biases.clone(),
            mean: bn.mean.clone(),
            var: bn.var.clone(),
            epsilon: self.epsilon,
        })
    }

    fn geom(&self, layer: usize, c: &ConvSpec) -> ConvGeom {
        ConvGeom {
            in_channels: self.shapes.input_of(&self.net, layer).c,
            out_channels: c.filters,
            size: c.size,
            stride: c.stride,
            pad: c.padding(),
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<(), ModelError> {
        if x.shape() != self.input_shape() {
            return Err(ModelError::InputShape {
                expected: self.input_shape().to_vec(),
                actual: x.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Conv layer: returns (raw conv output, pre-activation, output).
    fn conv_layer(&self, i: usize, c: &ConvSpec, x: &Tensor) -> Result<(Tensor, Tensor, Tensor), ModelError> {
        let w = self.weights.conv(i).ok_or(WeightError::MisalignedStore { layer: i })?;
        let z = conv2d_forward(x, &w.kernel, self.geom(i, c)).map_err(op(i))?;
        let a = match self.bn_params(i) {
            Some(p) => batchnorm_forward(&z, &p).map_err(op(i))?,
            None => {
                let mut a = z.clone();
                let hw = a.h() * a.w();
                for (ch, plane) in a.data_mut().chunks_mut(hw.max(1)).enumerate() {
                    let b = w.biases[ch];
                    for v in plane {
                        *v += b;
                    }
                }
                a
            }
        };
        let y = activate(&a, c.activation);
        Ok((z, a, y))
    }

    fn simple_layer(
        &self,
        i: usize,
        outputs: &[Option<Tensor>],
        input: &Tensor,
    ) -> Result<(Option<Tensor>, Tensor), ModelError> {
        let prev = || {
            if i == 0 {
                input
            } else {
                outputs[i - 1].as_ref().expect("previous output retained")
            }
        };
        let get = |j: usize| outputs[j].as_ref().expect("referenced output retained");
        Ok(match &self.net.layers[i].kind {
            LayerKind::Convolutional(_) => unreachable!("handled by conv_layer"),
            LayerKind::Maxpool(m) => (None, nnops::maxpool_forward(prev(), m.size, m.stride)),
            LayerKind::Upsample { stride } => (None, nnops::upsample_forward(prev(), *stride)),
            LayerKind::Route(r) => {
                let srcs: Vec<&Tensor> = r.layers.iter().map(|&j| get(j)).collect();
                let cat = nnops::route_concat(&srcs).map_err(op(i))?;
                if r.groups > 1 {
                    (None, nnops::route_group(&cat, r.groups, r.group_id))
                } else {
                    (None, cat)
                }
            }
            LayerKind::Shortcut(s) => {
                let sum = nnops::shortcut_add(prev(), get(s.from)).map_err(op(i))?;
                if s.activation == Activation::Linear {
                    (None, sum)
                } else {
                    let y = activate(&sum, s.activation);
                    (Some(sum), y)
                }
            }
            LayerKind::Yolo(_) => (None, prev().clone()),
        })
    }

    /// Runs the network and returns the tensors at the output layers (raw yolo
    /// head logits), in layer order.
    pub fn forward(&self, x: &Tensor) -> Result<Vec<Tensor>, ModelError> {
        self.check_input(x)?;
        let n = self.net.layers.len();
        let mut outputs: Vec<Option<Tensor>> = vec![None; n];
        for i in 0..n {
            let y = match &self.net.layers[i].kind {
                LayerKind::Convolutional(c) => {
                    let inp = if i == 0 { x } else { outputs[i - 1].as_ref().unwrap() };
                    self.conv_layer(i, c, inp)?.2
                }
                _ => self.simple_layer(i, &outputs, x)?.1,
            };
            outputs[i] = Some(y);
            for src in self.net.inputs_of(i) {
                if self.last_use[src] == i {
                    outputs[src] = None;
                }
            }
        }
        Ok(self
            .output_layers()
            .iter()
            .map(|&o| outputs[o].take().expect("output retained"))
            .collect())
    }

    pub fn forward_cached(&self, x: &Tensor) -> Result<ForwardCache, ModelError> {
        self.check_input(x)?;
        let n = self.net.layers.len();
        let mut outputs: Vec<Option<Tensor>> = vec![None; n];
        let mut conv_raw = vec![None; n];
        let mut pre_act = vec![None; n];
        for i in 0..n {
            let y = match &self.net.layers[i].kind {
                LayerKind::Convolutional(c) => {
                    let inp = if i == 0 { x } else { outputs[i - 1].as_ref().unwrap() };
                    let (z, a, y) = self.conv_layer(i, c, inp)?;
                    conv_raw[i] = Some(z);
                    pre_act[i] = Some(a);
                    y
                }
                _ => {
                    let (pre, y) = self.simple_layer(i, &outputs, x)?;
                    pre_act[i] = pre;
                    y
                }
            };
            outputs[i] = Some(y);
        }
        Ok(ForwardCache {
            input: x.clone(),
            outputs: outputs.into_iter().map(Option::unwrap).collect(),
            conv_raw,
            pre_act,
        })
    }

    /// Back-propagates gradients given at the output layers.
    ///
    /// `want_input_grad` also returns the gradient with respect to the image.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_outputs: &[Tensor],
        want_input_grad: bool,
    ) -> Result<Gradients, ModelError> {
        let outs = self.output_layers();
        if grad_outputs.len() != outs.len() {
            return Err(ModelError::GradientCount {
                expected: outs.len(),
                actual: grad_outputs.len(),
            });
        }
        let n = self.net.layers.len();
        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        let mut input_grad: Option<Tensor> = None;
        for (&o, g) in outs.iter().zip(grad_outputs) {
            add_into(&mut grads[o], g.clone());
        }
        let mut conv_grads: Vec<Option<ConvGrads>> = vec![None; n];

        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else {
                if let LayerKind::Convolutional(c) = &self.net.layers[i].kind {
                    conv_grads[i] = Some(self.zero_grads(i, c));
                }
                continue;
            };
            let input_of = |i: usize| -> &Tensor {
                if i == 0 {
                    &cache.input
                } else {
                    &cache.outputs[i - 1]
                }
            };
            let mut send_prev = |grads: &mut Vec<Option<Tensor>>, t: Tensor| {
                if i == 0 {
                    add_into(&mut input_grad, t);
                } else {
                    add_into(&mut grads[i - 1], t);
                }
            };
            match &self.net.layers[i].kind {
                LayerKind::Convolutional(c) => {
                    let a = cache.pre_act[i].as_ref().ok_or(ModelError::Op {
                        layer: i,
                        source: OpError::MissingCache { layer: i },
                    })?;
                    let z = cache.conv_raw[i].as_ref().ok_or(ModelError::Op {
                        layer: i,
                        source: OpError::MissingCache { layer: i },
                    })?;
                    let ga = activation_backward(a, c.activation, &g).map_err(op(i))?;
                    let (gz, biases, gamma) = match self.bn_params(i) {
                        Some(p) => {
                            let (gz, dg, db) = batchnorm_backward(z, &p, &ga).map_err(op(i))?;
                            (gz, db, Some(dg))
                        }
                        None => {
                            let hw = ga.h() * ga.w();
                            let db = ga.data().chunks(hw.max(1)).map(|p| p.iter().sum()).collect();
                            (ga, db, None)
                        }
                    };
                    let w = self.weights.conv(i).expect("aligned");
                    let need_x = i > 0 || want_input_grad;
                    let (gx, gk) =
                        conv2d_backward(input_of(i), &w.kernel, self.geom(i, c), &gz, need_x).map_err(op(i))?;
                    conv_grads[i] = Some(ConvGrads {
                        kernel: gk,
                        biases,
                        gamma,
                    });
                    if let Some(gx) = gx {
                        send_prev(&mut grads, gx);
                    }
                }
                LayerKind::Maxpool(m) => {
                    let gx = nnops::maxpool_backward(input_of(i), m.size, m.stride, &g).map_err(op(i))?;
                    send_prev(&mut grads, gx);
                }
                LayerKind::Upsample { stride } => {
                    send_prev(&mut grads, nnops::upsample_backward(&g, *stride));
                }
                LayerKind::Yolo(_) => send_prev(&mut grads, g),
                LayerKind::Shortcut(s) => {
                    let g = match &cache.pre_act[i] {
                        Some(pre) => activation_backward(pre, s.activation, &g).map_err(op(i))?,
                        None => g,
                    };
                    add_into(&mut grads[s.from], g.clone());
                    send_prev(&mut grads, g);
                }
                LayerKind::Route(r) => {
                    let hw = g.h() * g.w();
                    let total: usize = r.layers.iter().map(|&j| cache.outputs[j].c()).sum();
                    // Gradient of the full concatenation, then split by source.
                    let mut full = vec![0.0f32; total * hw];
                    let per = total / r.groups;
                    full[r.group_id * per * hw..(r.group_id + 1) * per * hw].copy_from_slice(g.data());
                    let mut off = 0;
                    for &j in &r.layers {
                        let c = cache.outputs[j].c();
                        let part = Tensor::chw(c, g.h(), g.w(), full[off..off + c * hw].to_vec()).map_err(op(i))?;
                        add_into(&mut grads[j], part);
                        off += c * hw;
                    }
                }
            }
        }
        Ok(Gradients {
            convs: conv_grads,
            input: input_grad,
        })
    }

    fn zero_grads(&self, i: usize, c: &ConvSpec) -> ConvGrads {
        let w = self.weights.conv(i).expect("aligned");
        ConvGrads {
            kernel: vec![0.0; w.kernel.len()],
            biases: vec![0.0; c.filters],
            gamma: c.batch_normalize.then(|| vec![0.0; c.filters]),
        }
    }
}

fn add_into(slot: &mut Option<Tensor>, t: Tensor) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(t.data()) {
                *a += b;
            }
        }
        None => *slot = Some(t),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netcfg::parse_cfg;
    use crate::rng::SplitMix64;

    fn random_store(net: &NetworkDef, seed: u64) -> WeightStore {
        let mut g = SplitMix64::new(seed);
        let mut store = WeightStore::zeros(net).unwrap();
        for w in store.convs.iter_mut().flatten() {
            for v in w.kernel.iter_mut().chain(w.biases.iter_mut()) {
                *v = g.uniform_f32(-0.5, 0.5);
            }
            if let Some(bn) = &mut w.bn {
                for v in &mut bn.gamma {
                    *v = g.uniform_f32(0.5, 1.5);
                }
                for v in &mut bn.mean {
                    *v = g.uniform_f32(-0.1, 0.1);
                }
                for v in &mut bn.var {
                    *v = g.uniform_f32(0.5, 1.5);
                }
            }
        }
        store
    }

    const SMALL: &str = "[net]\nwidth=6\nheight=6\nchannels=2\n\
        [convolutional]\nbatch_normalize=1\nfilters=3\nsize=3\npad=1\nactivation=mish\n\
        [maxpool]\nsize=2\nstride=2\n\
        [convolutional]\nbatch_normalize=1\nfilters=3\nsize=1\nactivation=leaky\n\
        [shortcut]\nfrom=-2\nactivation=leaky\n\
        [upsample]\nstride=2\n\
        [route]\nlayers=-1,0\n\
        [route]\nlayers=-1\ngroups=2\ngroup_id=1\n\
        [convolutional]\nfilters=2\nsize=3\nstride=2\npad=1\nactivation=sigmoid\n";

    fn loss(model: &Model, x: &Tensor, probe: &Tensor) -> f64 {
        let out = model.forward(x).unwrap();
        out[0]
            .data()
            .iter()
            .zip(probe.data())
            .map(|(a, b)| f64::from(*a) * f64::from(*b))
            .sum()
    }

    #[test]
    fn forward_and_cached_forward_agree() {
        let net = parse_cfg(SMALL).unwrap();
        let model = Model::new(net.clone(), random_store(&net, 3)).unwrap();
        let mut g = SplitMix64::new(9);
        let x = Tensor::chw(2, 6, 6, (0..72).map(|_| g.uniform_f32(-1.0, 1.0)).collect()).unwrap();
        let a = model.forward(&x).unwrap();
        let b = model.forward_cached(&x).unwrap().heads(&model);
        assert_eq!(a, b);
        assert_eq!(a[0].shape(), &[2, 3, 3]);
    }

    #[test]
    fn backward_matches_finite_differences_through_every_layer_kind() {
        let net = parse_cfg(SMALL).unwrap();
        let store = random_store(&net, 5);
        let model = Model::new(net.clone(), store.clone()).unwrap();
        let mut g = SplitMix64::new(17);
        let x = Tensor::chw(2, 6, 6, (0..72).map(|_| g.uniform_f32(-1.0, 1.0)).collect()).unwrap();
        let probe = Tensor::chw(2, 3, 3, (0..18).map(|_| g.uniform_f32(-1.0, 1.0)).collect()).unwrap();
        let cache = model.forward_cached(&x).unwrap();
        let grads = model.backward(&cache, std::slice::from_ref(&probe), true).unwrap();

        let h = 1e-2f32;
        let mut checked = 0;
        for layer in [0usize, 2, 7] {
            for idx in [0usize, 3, 7] {
                let mut plus = store.clone();
                plus.convs[layer].as_mut().unwrap().kernel[idx] += h;
                let mut minus = store.clone();
                minus.convs[layer].as_mut().unwrap().kernel[idx] -= h;
                let lp = loss(&Model::new(net.clone(), plus).unwrap(), &x, &probe);
                let lm = loss(&Model::new(net.clone(), minus).unwrap(), &x, &probe);
                let fd = (lp - lm) / (2.0 * f64::from(h));
                let an = f64::from(grads.convs[layer].as_ref().unwrap().kernel[idx]);
                assert!(
                    (fd - an).abs() < 2e-3 * (1.0 + an.abs()),
                    "layer {layer} idx {idx}: fd {fd} analytic {an}"
                );
                checked += 1;
            }
        }
        assert_eq!(checked, 9);
        let gx = grads.input.unwrap();
        assert_eq!(gx.shape(), x.shape());
    }

    #[test]
    fn wrong_input_shape() {
        let net = parse_cfg(SMALL).unwrap();
        let model = Model::new(net.clone(), random_store(&net, 3)).unwrap();
        assert!(matches!(
            model.forward(&Tensor::zeros(&[3, 6, 6])),
            Err(ModelError::InputShape { .. })
        ));
    }
}
