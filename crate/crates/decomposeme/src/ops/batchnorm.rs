//! Per-channel batch normalization.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Whether a forward pass normalizes with batch statistics (and updates
/// the running estimates) or with the stored running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Infer,
}

/// Learnable scale/shift plus running statistics for one channel axis.
///
/// Population (biased) variance is used both for normalization and for
/// the running estimate.
#[derive(Clone, Debug)]
pub struct BatchNormState {
    pub gamma: Vec<f32>,
    pub beta: Vec<f32>,
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub momentum: f32,
    pub eps: f32,
}

impl BatchNormState {
    /// Fresh state: gamma 1, beta 0, running mean 0, running var 1.
    pub fn new(channels: usize, momentum: f32, eps: f32) -> Self {
        BatchNormState {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum,
            eps,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

/// Values the backward pass needs from the forward pass.
#[derive(Clone, Debug)]
pub struct BnCache {
    mode: BnMode,
    inv_std: Vec<f64>,
    x_hat: Tensor,
}

/// Normalize per channel over the (N, H, W) axes.
///
/// Train mode uses batch statistics and folds them into the running
/// estimates with `running <- (1 - momentum) * running + momentum * batch`;
/// infer mode normalizes with the running statistics unchanged.
pub fn batchnorm(
    input: &Tensor,
    state: &mut BatchNormState,
    mode: BnMode,
) -> Result<(Tensor, BnCache)> {
    let [n, c, h, w] = input.shape();
    if c != state.channels() {
        return Err(Error::Dimension(format!(
            "channel axis: input has {} planes but batch norm tracks {}",
            c,
            state.channels()
        )));
    }
    if state.eps <= 0.0 {
        return Err(Error::Input("batch norm eps must be > 0".into()));
    }
    let area = h * w;
    let count = (n * area) as f64;

    let (mean, var): (Vec<f64>, Vec<f64>) = match mode {
        BnMode::Train => {
            let mut mean = vec![0.0f64; c];
            let mut var = vec![0.0f64; c];
            for ci in 0..c {
                let mut sum = 0.0f64;
                for ni in 0..n {
                    let plane = &input.sample(ni)[ci * area..(ci + 1) * area];
                    sum += plane.iter().map(|&v| f64::from(v)).sum::<f64>();
                }
                let mu = sum / count;
                let mut sq = 0.0f64;
                for ni in 0..n {
                    let plane = &input.sample(ni)[ci * area..(ci + 1) * area];
                    sq += plane
                        .iter()
                        .map(|&v| {
                            let d = f64::from(v) - mu;
                            d * d
                        })
                        .sum::<f64>();
                }
                mean[ci] = mu;
                var[ci] = sq / count;
            }
            let m = f64::from(state.momentum);
            for ci in 0..c {
                state.running_mean[ci] =
                    ((1.0 - m) * f64::from(state.running_mean[ci]) + m * mean[ci]) as f32;
                state.running_var[ci] =
                    ((1.0 - m) * f64::from(state.running_var[ci]) + m * var[ci]) as f32;
            }
            (mean, var)
        }
        BnMode::Infer => (
            state.running_mean.iter().map(|&v| f64::from(v)).collect(),
            state.running_var.iter().map(|&v| f64::from(v)).collect(),
        ),
    };

    let inv_std: Vec<f64> = var
        .iter()
        .map(|&v| 1.0 / (v + f64::from(state.eps)).sqrt())
        .collect();

    let mut x_hat = Tensor::zeros(n, c, h, w);
    let mut out = Tensor::zeros(n, c, h, w);
    for ni in 0..n {
        for ci in 0..c {
            let src = &input.sample(ni)[ci * area..(ci + 1) * area];
            let (g, b) = (f64::from(state.gamma[ci]), f64::from(state.beta[ci]));
            let xh = &mut x_hat.sample_mut(ni)[ci * area..(ci + 1) * area];
            for (dst, &v) in xh.iter_mut().zip(src) {
                *dst = ((f64::from(v) - mean[ci]) * inv_std[ci]) as f32;
            }
            let dst = &mut out.sample_mut(ni)[ci * area..(ci + 1) * area];
            for (o, &v) in dst.iter_mut().zip(x_hat.sample(ni)[ci * area..(ci + 1) * area].iter())
            {
                *o = (g * f64::from(v) + b) as f32;
            }
        }
    }

    Ok((
        out,
        BnCache {
            mode,
            inv_std,
            x_hat,
        },
    ))
}

/// Exact gradients for input, gamma and beta.
pub fn batchnorm_backward(
    cache: &BnCache,
    state: &BatchNormState,
    grad_out: &Tensor,
) -> Result<(Tensor, Vec<f32>, Vec<f32>)> {
    let [n, c, h, w] = cache.x_hat.shape();
    if grad_out.shape() != cache.x_hat.shape() {
        return Err(Error::Dimension(format!(
            "grad_out shape {:?} does not match batch norm input shape {:?}",
            grad_out.shape(),
            cache.x_hat.shape()
        )));
    }
    let area = h * w;
    let count = (n * area) as f64;

    let mut grad_gamma = vec![0.0f32; c];
    let mut grad_beta = vec![0.0f32; c];
    let mut grad_in = Tensor::zeros(n, c, h, w);

    for ci in 0..c {
        let mut sum_dy = 0.0f64;
        let mut sum_dy_xhat = 0.0f64;
        for ni in 0..n {
            let dy = &grad_out.sample(ni)[ci * area..(ci + 1) * area];
            let xh = &cache.x_hat.sample(ni)[ci * area..(ci + 1) * area];
            for (&g, &x) in dy.iter().zip(xh) {
                sum_dy += f64::from(g);
                sum_dy_xhat += f64::from(g) * f64::from(x);
            }
        }
        grad_gamma[ci] = sum_dy_xhat as f32;
        grad_beta[ci] = sum_dy as f32;

        let g_scale = f64::from(state.gamma[ci]) * cache.inv_std[ci];
        for ni in 0..n {
            let dy = &grad_out.sample(ni)[ci * area..(ci + 1) * area];
            let xh = &cache.x_hat.sample(ni)[ci * area..(ci + 1) * area];
            let dst = &mut grad_in.sample_mut(ni)[ci * area..(ci + 1) * area];
            match cache.mode {
                BnMode::Train => {
                    for ((d, &g), &x) in dst.iter_mut().zip(dy).zip(xh) {
                        let centered = f64::from(g) - sum_dy / count
                            - f64::from(x) * sum_dy_xhat / count;
                        *d = (g_scale * centered) as f32;
                    }
                }
                BnMode::Infer => {
                    for (d, &g) in dst.iter_mut().zip(dy) {
                        *d = (g_scale * f64::from(g)) as f32;
                    }
                }
            }
        }
    }
    Ok((grad_in, grad_gamma, grad_beta))
}
