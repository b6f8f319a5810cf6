//! Runtime models: parameter storage, initialization, and batched
//! forward/backward execution of a [`ModelSpec`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};
use crate::layers::{
    decomposed_backward_opt, decomposed_forward, DecomposedCache, DecomposedGrads,
    DecomposedLayer, LayerSpec,
};
use crate::model::ModelSpec;
use crate::ops::{
    self, BatchNormState, BnCache, BnMode, KernelBank2D, MaxPoolIndices,
};
use crate::tensor::Tensor;

/// Weight initialization scheme.
///
/// Xavier draws uniform `(+/- sqrt(6 / (fan_in + fan_out)))`; Kaiming
/// draws normal with standard deviation `sqrt(2 / fan_in)`. Biases
/// start at zero under both.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitScheme {
    Xavier,
    Kaiming,
}

/// One instantiated layer with its parameters.
#[derive(Clone, Debug)]
pub enum RtLayer {
    Conv2d(KernelBank2D),
    Decomposed(DecomposedLayer),
    Relu,
    Tanh,
    Maxpool { window: usize, stride: usize },
    Batchnorm(BatchNormState),
    Linear { weights: Vec<f32>, bias: Vec<f32>, in_len: usize, out_len: usize },
    AvgpoolGlobal,
}

impl RtLayer {
    /// Short role-plus-index name used in weight files and reports.
    pub fn kind_name(&self) -> &'static str {
        match self {
            RtLayer::Conv2d(_) => "conv2d",
            RtLayer::Decomposed(_) => "decomposed",
            RtLayer::Relu => "relu",
            RtLayer::Tanh => "tanh",
            RtLayer::Maxpool { .. } => "maxpool",
            RtLayer::Batchnorm(_) => "batchnorm",
            RtLayer::Linear { .. } => "linear",
            RtLayer::AvgpoolGlobal => "avgpool_global",
        }
    }
}

/// Instantiated model: the spec plus parameter arrays per expanded
/// layer. Instantiation is deterministic given (spec, scheme, seed).
#[derive(Clone, Debug)]
pub struct Model {
    spec: ModelSpec,
    layers: Vec<RtLayer>,
    seed: u64,
}

/// Per-layer values saved by a training-mode forward pass.
pub enum LayerCache {
    None,
    Pre(Tensor),
    Maxpool(MaxPoolIndices),
    Batchnorm(BnCache),
    Decomposed(DecomposedCache),
    InShape([usize; 4]),
}

/// Per-layer parameter gradients, aligned with `Model::layers`.
pub enum LayerGrads {
    None,
    Conv { weights: Vec<f32>, bias: Vec<f32> },
    Decomposed(DecomposedGrads),
    Batchnorm { gamma: Vec<f32>, beta: Vec<f32> },
    Linear { weights: Vec<f32>, bias: Vec<f32> },
}

/// Batch-norm defaults: running statistics momentum and variance floor.
pub const BN_MOMENTUM: f32 = 0.1;
pub const BN_EPS: f32 = 1e-5;

/// Build a model from a spec with freshly initialized parameters.
pub fn instantiate(spec: &ModelSpec, scheme: InitScheme, seed: u64) -> Result<Model> {
    let resolved = spec.resolve()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::with_capacity(resolved.len());
    for r in &resolved {
        let [c, h, w] = r.in_shape;
        let layer = match r.spec {
            LayerSpec::Conv2d { in_channels, out, k, stride, pad } => {
                let mut bank = KernelBank2D::new(out, in_channels, k, k, stride, pad)?;
                let fan_in = in_channels * k * k;
                let fan_out = out * k * k;
                fill(&mut rng, scheme, fan_in, fan_out, bank.weights_mut());
                RtLayer::Conv2d(bank)
            }
            LayerSpec::Decomposed { in_channels, l, out, k, nl, stride, pad } => {
                let mut layer = DecomposedLayer::new(in_channels, l, out, k, nl, stride, pad)?;
                // 1D kernels: vertical fan_in C*d, horizontal fan_in L*d.
                fill(&mut rng, scheme, in_channels * k, l * k, layer.vertical_mut());
                fill(&mut rng, scheme, l * k, out * k, layer.horizontal_mut());
                RtLayer::Decomposed(layer)
            }
            LayerSpec::Relu => RtLayer::Relu,
            LayerSpec::Tanh => RtLayer::Tanh,
            LayerSpec::Maxpool { k, stride } => RtLayer::Maxpool { window: k, stride },
            LayerSpec::Batchnorm => RtLayer::Batchnorm(BatchNormState::new(c, BN_MOMENTUM, BN_EPS)),
            LayerSpec::Linear { out } => {
                let in_len = c * h * w;
                let mut weights = vec![0.0f32; out * in_len];
                fill(&mut rng, scheme, in_len, out, &mut weights);
                RtLayer::Linear { weights, bias: vec![0.0; out], in_len, out_len: out }
            }
            LayerSpec::AvgpoolGlobal => RtLayer::AvgpoolGlobal,
        };
        layers.push(layer);
    }
    Ok(Model { spec: spec.clone(), layers, seed })
}

fn fill(rng: &mut ChaCha8Rng, scheme: InitScheme, fan_in: usize, fan_out: usize, out: &mut [f32]) {
    match scheme {
        InitScheme::Xavier => {
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-a, a);
            for v in out {
                *v = dist.sample(rng) as f32;
            }
        }
        InitScheme::Kaiming => {
            let std = (2.0 / fan_in as f64).sqrt();
            let dist = Normal::new(0.0, std).expect("positive std");
            for v in out {
                *v = dist.sample(rng) as f32;
            }
        }
    }
}

impl Model {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn layers(&self) -> &[RtLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [RtLayer] {
        &mut self.layers
    }

    /// Rebuild from parts; layer kinds must match the spec's expansion.
    pub(crate) fn from_parts(spec: ModelSpec, layers: Vec<RtLayer>, seed: u64) -> Model {
        Model { spec, layers, seed }
    }

    /// Total trainable parameter count.
    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match l {
                RtLayer::Conv2d(bank) => bank.weights().len() + bank.bias().len(),
                RtLayer::Decomposed(d) => d.param_count(),
                RtLayer::Batchnorm(bn) => bn.gamma.len() + bn.beta.len(),
                RtLayer::Linear { weights, bias, .. } => weights.len() + bias.len(),
                _ => 0,
            })
            .sum()
    }

    /// Inference forward pass (batch norm uses running statistics).
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let mut x = input.clone();
        for layer in &self.layers {
            x = match layer {
                RtLayer::Conv2d(bank) => ops::conv2d(&x, bank)?,
                RtLayer::Decomposed(d) => decomposed_forward(&x, d)?.0,
                RtLayer::Relu => ops::relu(&x),
                RtLayer::Tanh => ops::tanh(&x),
                RtLayer::Maxpool { window, stride } => ops::maxpool(&x, *window, *stride)?.0,
                RtLayer::Batchnorm(bn) => {
                    let mut state = bn.clone();
                    ops::batchnorm(&x, &mut state, BnMode::Infer)?.0
                }
                RtLayer::Linear { weights, bias, .. } => ops::linear(&x, weights, bias)?,
                RtLayer::AvgpoolGlobal => ops::global_avg_pool(&x),
            };
        }
        Ok(x)
    }

    /// Training forward pass: updates batch-norm running statistics and
    /// returns per-layer caches for [`Model::backward`], plus the layer
    /// inputs the backward pass reuses.
    pub fn forward_train(&mut self, input: &Tensor) -> Result<(Tensor, Vec<Tensor>, Vec<LayerCache>)> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut x = input.clone();
        for layer in &mut self.layers {
            inputs.push(x.clone());
            let (next, cache) = match layer {
                RtLayer::Conv2d(bank) => (ops::conv2d(&x, bank)?, LayerCache::None),
                RtLayer::Decomposed(d) => {
                    let (y, c) = decomposed_forward(&x, d)?;
                    (y, LayerCache::Decomposed(c))
                }
                RtLayer::Relu => (ops::relu(&x), LayerCache::Pre(x.clone())),
                RtLayer::Tanh => (ops::tanh(&x), LayerCache::Pre(x.clone())),
                RtLayer::Maxpool { window, stride } => {
                    let (y, idx) = ops::maxpool(&x, *window, *stride)?;
                    (y, LayerCache::Maxpool(idx))
                }
                RtLayer::Batchnorm(bn) => {
                    let (y, c) = ops::batchnorm(&x, bn, BnMode::Train)?;
                    (y, LayerCache::Batchnorm(c))
                }
                RtLayer::Linear { weights, bias, .. } => {
                    (ops::linear(&x, weights, bias)?, LayerCache::None)
                }
                RtLayer::AvgpoolGlobal => {
                    (ops::global_avg_pool(&x), LayerCache::InShape(x.shape()))
                }
            };
            caches.push(cache);
            x = next;
        }
        Ok((x, inputs, caches))
    }

    /// Backward pass from the loss gradient at the logits. Gradients of
    /// the first layer's input are skipped (nothing consumes them).
    pub fn backward(
        &self,
        inputs: &[Tensor],
        caches: &[LayerCache],
        grad_logits: &Tensor,
    ) -> Result<Vec<LayerGrads>> {
        if inputs.len() != self.layers.len() || caches.len() != self.layers.len() {
            return Err(Error::Input(
                "backward needs the caches of a matching forward pass".into(),
            ));
        }
        let mut grads: Vec<LayerGrads> = Vec::with_capacity(self.layers.len());
        let mut g = grad_logits.clone();
        for idx in (0..self.layers.len()).rev() {
            let need_input_grad = idx > 0;
            let layer_input = &inputs[idx];
            let (grad, next_g) = match (&self.layers[idx], &caches[idx]) {
                (RtLayer::Conv2d(bank), _) => {
                    let (gin, gw, gb) = ops::conv2d_backward_geom(
                        layer_input,
                        bank.weights(),
                        bank.geom(),
                        &g,
                        need_input_grad,
                    )?;
                    (LayerGrads::Conv { weights: gw, bias: gb }, gin)
                }
                (RtLayer::Decomposed(d), LayerCache::Decomposed(cache)) => {
                    let (gin, dg) =
                        decomposed_backward_opt(layer_input, d, cache, &g, need_input_grad)?;
                    (LayerGrads::Decomposed(dg), gin)
                }
                (RtLayer::Relu, LayerCache::Pre(pre)) => {
                    (LayerGrads::None, Some(ops::relu_backward(pre, &g)))
                }
                (RtLayer::Tanh, LayerCache::Pre(pre)) => {
                    (LayerGrads::None, Some(ops::tanh_backward(pre, &g)))
                }
                (RtLayer::Maxpool { .. }, LayerCache::Maxpool(idxs)) => {
                    (LayerGrads::None, Some(ops::maxpool_backward(idxs, &g)?))
                }
                (RtLayer::Batchnorm(bn), LayerCache::Batchnorm(cache)) => {
                    let (gin, gg, gb) = ops::batchnorm_backward(cache, bn, &g)?;
                    (LayerGrads::Batchnorm { gamma: gg, beta: gb }, Some(gin))
                }
                (RtLayer::Linear { weights, .. }, _) => {
                    let (gin, gw, gb) = ops::linear_backward(layer_input, weights, &g)?;
                    (LayerGrads::Linear { weights: gw, bias: gb }, Some(gin))
                }
                (RtLayer::AvgpoolGlobal, LayerCache::InShape(shape)) => (
                    LayerGrads::None,
                    Some(ops::global_avg_pool_backward(*shape, &g)),
                ),
                _ => {
                    return Err(Error::Input(format!(
                        "layer {idx}: cache does not match the layer kind"
                    )))
                }
            };
            grads.push(grad);
            if let Some(next) = next_g {
                g = next;
            } else if idx != 0 {
                return Err(Error::Input(format!(
                    "layer {idx}: missing input gradient mid-network"
                )));
            }
        }
        grads.reverse();
        Ok(grads)
    }
}
