//! Layer descriptions and the decomposed convolutional layer.
//!
//! A decomposed layer replaces one `d x d` 2D convolution with `L`
//! shared vertical `d x 1` kernels, a pointwise nonlinearity, and
//! `F x L` horizontal `1 x d` kernels. The two 1D stages run through
//! the same convolution engine as ordinary 2D banks.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{self, ConvGeom};
use crate::tensor::Tensor;

/// Pointwise nonlinearity selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    Relu,
    Tanh,
    Identity,
}

impl Nonlinearity {
    pub fn apply(self, t: &Tensor) -> Tensor {
        match self {
            Nonlinearity::Relu => ops::relu(t),
            Nonlinearity::Tanh => ops::tanh(t),
            Nonlinearity::Identity => t.clone(),
        }
    }

    /// Gradient through the nonlinearity given its pre-activation input.
    pub fn backward(self, pre: &Tensor, grad_out: &Tensor) -> Tensor {
        match self {
            Nonlinearity::Relu => ops::relu_backward(pre, grad_out),
            Nonlinearity::Tanh => ops::tanh_backward(pre, grad_out),
            Nonlinearity::Identity => grad_out.clone(),
        }
    }
}

/// Declarative description of one layer in a model.
///
/// Field names follow the model-spec JSON schema; strides and padding
/// default to 1 and 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        #[serde(rename = "in")]
        in_channels: usize,
        out: usize,
        k: usize,
        #[serde(default = "default_stride")]
        stride: usize,
        #[serde(default)]
        pad: usize,
    },
    Decomposed {
        #[serde(rename = "in")]
        in_channels: usize,
        #[serde(rename = "L")]
        l: usize,
        out: usize,
        k: usize,
        #[serde(default = "default_nl")]
        nl: Nonlinearity,
        #[serde(default = "default_stride")]
        stride: usize,
        #[serde(default)]
        pad: usize,
    },
    Relu,
    Tanh,
    Maxpool {
        k: usize,
        stride: usize,
    },
    Batchnorm,
    Linear {
        out: usize,
    },
    AvgpoolGlobal,
}

fn default_stride() -> usize {
    1
}

fn default_nl() -> Nonlinearity {
    Nonlinearity::Relu
}

impl LayerSpec {
    /// Validate the extents that must be positive for this kind.
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Validation(format!("{what} must be >= 1")));
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out,
                k,
                stride,
                ..
            } => {
                if in_channels < 1 || out < 1 || k < 1 {
                    return bad("conv2d in/out/k");
                }
                if stride < 1 {
                    return bad("conv2d stride");
                }
            }
            LayerSpec::Decomposed {
                in_channels,
                l,
                out,
                k,
                stride,
                ..
            } => {
                if in_channels < 1 || l < 1 || out < 1 || k < 1 {
                    return bad("decomposed in/L/out/k");
                }
                if stride < 1 {
                    return bad("decomposed stride");
                }
            }
            LayerSpec::Maxpool { k, stride } => {
                if k < 1 || stride < 1 {
                    return bad("maxpool k/stride");
                }
            }
            LayerSpec::Linear { out } => {
                if out < 1 {
                    return bad("linear out");
                }
            }
            _ => {}
        }
        Ok(())
    }
}

/// Parameter count of a layer description.
///
/// `fan_in` is the resolved input: channel count for convolutional and
/// batch-norm layers, flattened sample length for linear layers.
pub fn layer_param_count(layer: &LayerSpec, fan_in: usize) -> usize {
    match *layer {
        LayerSpec::Conv2d { out, k, .. } => conv2d_param_count(fan_in, out, k, k),
        LayerSpec::Decomposed { l, out, k, .. } => decomposed_param_count(fan_in, l, out, k),
        LayerSpec::Linear { out } => fan_in * out + out,
        LayerSpec::Batchnorm => 2 * fan_in,
        _ => 0,
    }
}

/// `C*F*dv*dh + F` weights-plus-bias of a 2D bank.
pub fn conv2d_param_count(c: usize, f: usize, dv: usize, dh: usize) -> usize {
    c * f * dv * dh + f
}

/// `L*C*d + L + F*L*d + F` of a decomposed layer with kernel length `d`.
pub fn decomposed_param_count(c: usize, l: usize, f: usize, d: usize) -> usize {
    l * c * d + l + f * l * d + f
}

/// The decomposed layer: two consecutive 1D convolution stages with a
/// pointwise nonlinearity after each.
///
/// In the default order the first stage applies the vertical `dv x 1`
/// kernels (shape `(L, C, dv, 1)`) and the second the horizontal
/// `1 x dh` kernels (shape `(F, L, 1, dh)`). With `horizontal_first`
/// the stages swap, and with them the channel shapes: horizontal
/// becomes `(L, C, 1, dh)` and vertical `(F, L, dv, 1)`. The `bias_mid`
/// vector (length `L`) always belongs to the first stage and
/// `bias_out` (length `F`) to the second.
#[derive(Clone, Debug, PartialEq)]
pub struct DecomposedLayer {
    vertical: Vec<f32>,
    horizontal: Vec<f32>,
    bias_mid: Vec<f32>,
    bias_out: Vec<f32>,
    nonlinearity: Nonlinearity,
    in_channels: usize,
    mid_channels: usize,
    filters: usize,
    dv: usize,
    dh: usize,
    stride: usize,
    padding: usize,
    horizontal_first: bool,
}

/// Forward-pass values retained for the backward pass; nothing is
/// recomputed at backward time.
#[derive(Clone, Debug)]
pub struct DecomposedCache {
    /// Pre-activation of the first 1D stage.
    pre_first: Tensor,
    /// Nonlinearity output feeding the second stage (the intermediate
    /// activation with exactly `L` channels).
    mid: Tensor,
    /// Pre-activation of the second 1D stage.
    pre_second: Tensor,
}

impl DecomposedCache {
    /// The intermediate activation between the two 1D stages.
    pub fn intermediate(&self) -> &Tensor {
        &self.mid
    }
}

/// Gradients for the four parameter arrays of a decomposed layer.
#[derive(Clone, Debug)]
pub struct DecomposedGrads {
    pub vertical: Vec<f32>,
    pub horizontal: Vec<f32>,
    pub bias_mid: Vec<f32>,
    pub bias_out: Vec<f32>,
}

impl DecomposedLayer {
    /// Zero-initialized layer with square kernels of length `d`, default
    /// (vertical then horizontal) order.
    pub fn new(
        in_channels: usize,
        mid_channels: usize,
        filters: usize,
        d: usize,
        nonlinearity: Nonlinearity,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        Self::with_order(
            in_channels,
            mid_channels,
            filters,
            d,
            d,
            nonlinearity,
            stride,
            padding,
            false,
        )
    }

    /// Zero-initialized layer with distinct vertical/horizontal lengths.
    #[allow(clippy::too_many_arguments)]
    pub fn new_rect(
        in_channels: usize,
        mid_channels: usize,
        filters: usize,
        dv: usize,
        dh: usize,
        nonlinearity: Nonlinearity,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        Self::with_order(
            in_channels,
            mid_channels,
            filters,
            dv,
            dh,
            nonlinearity,
            stride,
            padding,
            false,
        )
    }

    /// Full constructor; `horizontal_first` selects the transposed
    /// (horizontal then vertical) kernel order.
    #[allow(clippy::too_many_arguments)]
    pub fn with_order(
        in_channels: usize,
        mid_channels: usize,
        filters: usize,
        dv: usize,
        dh: usize,
        nonlinearity: Nonlinearity,
        stride: usize,
        padding: usize,
        horizontal_first: bool,
    ) -> Result<Self> {
        if in_channels < 1 || mid_channels < 1 || filters < 1 || dv < 1 || dh < 1 {
            return Err(Error::Input(format!(
                "decomposed layer extents must be >= 1 (got C={in_channels}, L={mid_channels}, \
                 F={filters}, dv={dv}, dh={dh})"
            )));
        }
        if stride < 1 {
            return Err(Error::Input("stride must be >= 1".into()));
        }
        let (vertical_len, horizontal_len) = if horizontal_first {
            (filters * mid_channels * dv, mid_channels * in_channels * dh)
        } else {
            (mid_channels * in_channels * dv, filters * mid_channels * dh)
        };
        Ok(DecomposedLayer {
            vertical: vec![0.0; vertical_len],
            horizontal: vec![0.0; horizontal_len],
            bias_mid: vec![0.0; mid_channels],
            bias_out: vec![0.0; filters],
            nonlinearity,
            in_channels,
            mid_channels,
            filters,
            dv,
            dh,
            stride,
            padding,
            horizontal_first,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    /// The sharing budget L: channel count of the intermediate activation.
    pub fn mid_channels(&self) -> usize {
        self.mid_channels
    }

    pub fn filters(&self) -> usize {
        self.filters
    }

    pub fn kernel_v(&self) -> usize {
        self.dv
    }

    pub fn kernel_h(&self) -> usize {
        self.dh
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn padding(&self) -> usize {
        self.padding
    }

    pub fn nonlinearity(&self) -> Nonlinearity {
        self.nonlinearity
    }

    pub fn set_nonlinearity(&mut self, nl: Nonlinearity) {
        self.nonlinearity = nl;
    }

    pub fn horizontal_first(&self) -> bool {
        self.horizontal_first
    }

    /// The vertical (`dv x 1`) kernel array.
    pub fn vertical(&self) -> &[f32] {
        &self.vertical
    }

    pub fn vertical_mut(&mut self) -> &mut [f32] {
        &mut self.vertical
    }

    /// The horizontal (`1 x dh`) kernel array.
    pub fn horizontal(&self) -> &[f32] {
        &self.horizontal
    }

    pub fn horizontal_mut(&mut self) -> &mut [f32] {
        &mut self.horizontal
    }

    /// First-stage bias, one entry per intermediate channel.
    pub fn bias_mid(&self) -> &[f32] {
        &self.bias_mid
    }

    pub fn bias_mid_mut(&mut self) -> &mut [f32] {
        &mut self.bias_mid
    }

    /// Second-stage bias, one entry per output filter.
    pub fn bias_out(&self) -> &[f32] {
        &self.bias_out
    }

    pub fn bias_out_mut(&mut self) -> &mut [f32] {
        &mut self.bias_out
    }

    /// Total parameters across both kernel arrays and both biases.
    pub fn param_count(&self) -> usize {
        self.vertical.len() + self.bias_mid.len() + self.horizontal.len() + self.bias_out.len()
    }

    fn first_geom(&self) -> ConvGeom {
        if self.horizontal_first {
            ConvGeom {
                in_channels: self.in_channels,
                filters: self.mid_channels,
                kh: 1,
                kw: self.dh,
                stride_v: 1,
                stride_h: self.stride,
                pad_v: 0,
                pad_h: self.padding,
            }
        } else {
            ConvGeom {
                in_channels: self.in_channels,
                filters: self.mid_channels,
                kh: self.dv,
                kw: 1,
                stride_v: self.stride,
                stride_h: 1,
                pad_v: self.padding,
                pad_h: 0,
            }
        }
    }

    fn second_geom(&self) -> ConvGeom {
        if self.horizontal_first {
            ConvGeom {
                in_channels: self.mid_channels,
                filters: self.filters,
                kh: self.dv,
                kw: 1,
                stride_v: self.stride,
                stride_h: 1,
                pad_v: self.padding,
                pad_h: 0,
            }
        } else {
            ConvGeom {
                in_channels: self.mid_channels,
                filters: self.filters,
                kh: 1,
                kw: self.dh,
                stride_v: 1,
                stride_h: self.stride,
                pad_v: 0,
                pad_h: self.padding,
            }
        }
    }

    fn first_kernels(&self) -> &[f32] {
        if self.horizontal_first {
            &self.horizontal
        } else {
            &self.vertical
        }
    }

    fn second_kernels(&self) -> &[f32] {
        if self.horizontal_first {
            &self.vertical
        } else {
            &self.horizontal
        }
    }

    /// Copy of the layer with stride 1 and no padding; used to probe
    /// the layer's effective linear map.
    pub(crate) fn with_unit_geometry(mut self) -> Self {
        self.stride = 1;
        self.padding = 0;
        self
    }
}

/// Forward pass: `phi(b_out + conv2(phi(b_mid + conv1(x))))`. Returns
/// the output and the cached intermediates the backward pass needs.
pub fn decomposed_forward(
    input: &Tensor,
    layer: &DecomposedLayer,
) -> Result<(Tensor, DecomposedCache)> {
    let pre_first = ops::conv2d_geom(
        input,
        layer.first_kernels(),
        &layer.bias_mid,
        layer.first_geom(),
    )?;
    let mid = layer.nonlinearity.apply(&pre_first);
    let pre_second = ops::conv2d_geom(
        &mid,
        layer.second_kernels(),
        &layer.bias_out,
        layer.second_geom(),
    )?;
    let output = layer.nonlinearity.apply(&pre_second);
    Ok((
        output,
        DecomposedCache {
            pre_first,
            mid,
            pre_second,
        },
    ))
}

/// Backward pass: exact chain rule through both 1D stages and both
/// nonlinearity applications, using only the cached forward values.
pub fn decomposed_backward(
    input: &Tensor,
    layer: &DecomposedLayer,
    cache: &DecomposedCache,
    grad_out: &Tensor,
) -> Result<(Tensor, DecomposedGrads)> {
    decomposed_backward_opt(input, layer, cache, grad_out, true)
        .map(|(gin, grads)| (gin.expect("grad_input requested"), grads))
}

pub(crate) fn decomposed_backward_opt(
    input: &Tensor,
    layer: &DecomposedLayer,
    cache: &DecomposedCache,
    grad_out: &Tensor,
    need_grad_input: bool,
) -> Result<(Option<Tensor>, DecomposedGrads)> {
    if grad_out.shape() != cache.pre_second.shape() {
        return Err(Error::Dimension(format!(
            "grad_out shape {:?} does not match decomposed output shape {:?}",
            grad_out.shape(),
            cache.pre_second.shape()
        )));
    }

    let g_pre_second = layer.nonlinearity.backward(&cache.pre_second, grad_out);
    let (g_mid, gw_second, gb_second) = ops::conv2d_backward_geom(
        &cache.mid,
        layer.second_kernels(),
        layer.second_geom(),
        &g_pre_second,
        true,
    )?;
    let g_pre_first = layer
        .nonlinearity
        .backward(&cache.pre_first, &g_mid.expect("mid gradient"));
    let (g_in, gw_first, gb_first) = ops::conv2d_backward_geom(
        input,
        layer.first_kernels(),
        layer.first_geom(),
        &g_pre_first,
        need_grad_input,
    )?;

    let (vertical, horizontal) = if layer.horizontal_first {
        (gw_second, gw_first)
    } else {
        (gw_first, gw_second)
    };
    Ok((
        g_in,
        DecomposedGrads {
            vertical,
            horizontal,
            bias_mid: gb_first,
            bias_out: gb_second,
        },
    ))
}
