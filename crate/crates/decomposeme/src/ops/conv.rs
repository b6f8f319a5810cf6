//! 2D convolution (cross-correlation convention, no kernel flip).
//!
//! The forward path is im2col plus f64-accumulated row kernels; the
//! backward path returns exact gradients of `sum(grad_out * output)`
//! with respect to input, weights and bias. Batches are processed in a
//! fixed number of chunks (see [`super::kernels`]) so multi-threaded
//! results are bit-identical to single-threaded ones.

use rayon::prelude::*;

use super::kernels::{axpy_f64, batch_chunk_ranges, dot_f64, split_by_ranges, sum_f64};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Weights of one 2D convolutional layer: `filters` kernels over
/// `in_channels` planes of spatial size `kh x kw`, plus a per-filter
/// bias. 1D banks are the special cases `kw == 1` (vertical) and
/// `kh == 1` (horizontal).
#[derive(Clone, Debug, PartialEq)]
pub struct KernelBank2D {
    weights: Vec<f32>,
    bias: Vec<f32>,
    filters: usize,
    in_channels: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
}

impl KernelBank2D {
    /// Zero-initialized bank; all extents must be at least 1.
    pub fn new(
        filters: usize,
        in_channels: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if filters < 1 || in_channels < 1 || kh < 1 || kw < 1 {
            return Err(Error::Input(format!(
                "kernel bank extents must be >= 1 (got F={filters}, C={in_channels}, \
                 kh={kh}, kw={kw})"
            )));
        }
        if stride < 1 {
            return Err(Error::Input("stride must be >= 1".into()));
        }
        Ok(KernelBank2D {
            weights: vec![0.0; filters * in_channels * kh * kw],
            bias: vec![0.0; filters],
            filters,
            in_channels,
            kh,
            kw,
            stride,
            padding,
        })
    }

    /// Bank with explicit weights (length `F*C*kh*kw`, row-major) and bias.
    pub fn from_parts(
        filters: usize,
        in_channels: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        padding: usize,
        weights: Vec<f32>,
        bias: Vec<f32>,
    ) -> Result<Self> {
        let mut bank = Self::new(filters, in_channels, kh, kw, stride, padding)?;
        if weights.len() != bank.weights.len() {
            return Err(Error::Dimension(format!(
                "weight buffer has {} elements, bank {}x{}x{}x{} needs {}",
                weights.len(),
                filters,
                in_channels,
                kh,
                kw,
                bank.weights.len()
            )));
        }
        if bias.len() != filters {
            return Err(Error::Dimension(format!(
                "bias has {} entries for {} filters",
                bias.len(),
                filters
            )));
        }
        bank.weights = weights;
        bank.bias = bias;
        Ok(bank)
    }

    pub fn filters(&self) -> usize {
        self.filters
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    /// Kernel height (the vertical extent d_v).
    pub fn kernel_h(&self) -> usize {
        self.kh
    }

    /// Kernel width (the horizontal extent d_h).
    pub fn kernel_w(&self) -> usize {
        self.kw
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn padding(&self) -> usize {
        self.padding
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f32] {
        &mut self.weights
    }

    pub fn bias(&self) -> &[f32] {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut [f32] {
        &mut self.bias
    }

    pub fn weight_at(&self, f: usize, c: usize, i: usize, j: usize) -> f32 {
        self.weights[((f * self.in_channels + c) * self.kh + i) * self.kw + j]
    }

    pub fn weight_at_mut(&mut self, f: usize, c: usize, i: usize, j: usize) -> &mut f32 {
        &mut self.weights[((f * self.in_channels + c) * self.kh + i) * self.kw + j]
    }

    /// The 2D kernel of filter `f`, input plane `c`, as a `kh*kw` slice.
    pub fn kernel_slice(&self, f: usize, c: usize) -> &[f32] {
        let start = (f * self.in_channels + c) * self.kh * self.kw;
        &self.weights[start..start + self.kh * self.kw]
    }

    pub(crate) fn geom(&self) -> ConvGeom {
        ConvGeom {
            in_channels: self.in_channels,
            filters: self.filters,
            kh: self.kh,
            kw: self.kw,
            stride_v: self.stride,
            stride_h: self.stride,
            pad_v: self.padding,
            pad_h: self.padding,
        }
    }
}

/// Per-axis convolution geometry. The public [`KernelBank2D`] carries a
/// single stride and padding; the per-axis form exists so a decomposed
/// layer can pad/stride only along the axis its 1D kernels act on.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub in_channels: usize,
    pub filters: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride_v: usize,
    pub stride_h: usize,
    pub pad_v: usize,
    pub pad_h: usize,
}

impl ConvGeom {
    /// Output spatial dims; errors when the sizes do not divide evenly
    /// or the padded input is smaller than the kernel.
    pub fn out_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let out_h = out_extent(h, self.kh, self.stride_v, self.pad_v, "height")?;
        let out_w = out_extent(w, self.kw, self.stride_h, self.pad_h, "width")?;
        Ok((out_h, out_w))
    }
}

fn out_extent(input: usize, kernel: usize, stride: usize, pad: usize, axis: &str) -> Result<usize> {
    let padded = input + 2 * pad;
    if padded < kernel {
        return Err(Error::Config(format!(
            "{axis} axis: padded input extent {padded} is smaller than kernel extent {kernel}"
        )));
    }
    let span = padded - kernel;
    if span % stride != 0 {
        return Err(Error::Config(format!(
            "{axis} axis: output extent ({padded} - {kernel})/{stride} + 1 is not an integer"
        )));
    }
    Ok(span / stride + 1)
}

/// Cross-correlate `input` with `bank`.
///
/// Output shape is `(N, F, H_out, W_out)`; each element is
/// `bias[f]` plus the inner product of the input window with filter `f`.
pub fn conv2d(input: &Tensor, bank: &KernelBank2D) -> Result<Tensor> {
    conv2d_geom(input, &bank.weights, &bank.bias, bank.geom())
}

/// Gradients of `sum(grad_out * conv2d(input, bank))` with respect to
/// input, weights and bias.
pub fn conv2d_backward(
    input: &Tensor,
    bank: &KernelBank2D,
    grad_out: &Tensor,
) -> Result<(Tensor, Vec<f32>, Vec<f32>)> {
    let (grad_in, grad_w, grad_b) =
        conv2d_backward_geom(input, &bank.weights, bank.geom(), grad_out, true)?;
    Ok((grad_in.expect("grad_input requested"), grad_w, grad_b))
}

pub(crate) fn conv2d_geom(
    input: &Tensor,
    weights: &[f32],
    bias: &[f32],
    geom: ConvGeom,
) -> Result<Tensor> {
    check_channels(input, &geom)?;
    debug_assert_eq!(
        weights.len(),
        geom.filters * geom.in_channels * geom.kh * geom.kw
    );
    let [n, c, h, w] = input.shape();
    let (out_h, out_w) = geom.out_dims(h, w)?;
    let (f, k, m) = (geom.filters, c * geom.kh * geom.kw, out_h * out_w);

    let mut output = Tensor::zeros(n, f, out_h, out_w);
    let ranges = batch_chunk_ranges(n);
    let out_slices = split_by_ranges(output.data_mut(), &ranges, f * m);

    ranges
        .into_par_iter()
        .zip(out_slices)
        .for_each(|(range, out_chunk)| {
            let mut col = vec![0.0f32; k * m];
            let mut acc = vec![0.0f64; m];
            for (local, sample) in range.enumerate() {
                im2col(input.sample(sample), c, h, w, &geom, out_h, out_w, &mut col);
                let out_sample = &mut out_chunk[local * f * m..(local + 1) * f * m];
                for fi in 0..f {
                    acc.fill(0.0);
                    let w_row = &weights[fi * k..(fi + 1) * k];
                    for (ki, wk) in w_row.iter().enumerate() {
                        if *wk != 0.0 {
                            axpy_f64(&mut acc, &col[ki * m..(ki + 1) * m], f64::from(*wk));
                        }
                    }
                    let b = f64::from(bias[fi]);
                    for (o, a) in out_sample[fi * m..(fi + 1) * m].iter_mut().zip(&acc) {
                        *o = (b + *a) as f32;
                    }
                }
            }
        });

    Ok(output)
}

pub(crate) fn conv2d_backward_geom(
    input: &Tensor,
    weights: &[f32],
    geom: ConvGeom,
    grad_out: &Tensor,
    need_grad_input: bool,
) -> Result<(Option<Tensor>, Vec<f32>, Vec<f32>)> {
    check_channels(input, &geom)?;
    let [n, c, h, w] = input.shape();
    let (out_h, out_w) = geom.out_dims(h, w)?;
    let expected = [n, geom.filters, out_h, out_w];
    if grad_out.shape() != expected {
        return Err(Error::Dimension(format!(
            "grad_out shape {:?} does not match convolution output shape {:?}",
            grad_out.shape(),
            expected
        )));
    }
    let (f, k, m) = (geom.filters, c * geom.kh * geom.kw, out_h * out_w);
    let sample_in = c * h * w;

    let mut grad_input = need_grad_input.then(|| Tensor::zeros(n, c, h, w));
    let ranges = batch_chunk_ranges(n);
    let gin_slices = match grad_input.as_mut() {
        Some(t) => split_by_ranges(t.data_mut(), &ranges, sample_in)
            .into_iter()
            .map(Some)
            .collect(),
        None => ranges.iter().map(|_| None).collect::<Vec<_>>(),
    };

    let partials: Vec<(Vec<f64>, Vec<f64>)> = ranges
        .into_par_iter()
        .zip(gin_slices)
        .map(|(range, mut gin_chunk)| {
            let mut col = vec![0.0f32; k * m];
            let mut gcol = vec![0.0f64; k * m];
            let mut gin = vec![0.0f64; sample_in];
            let mut gw = vec![0.0f64; f * k];
            let mut gb = vec![0.0f64; f];
            for (local, sample) in range.enumerate() {
                im2col(input.sample(sample), c, h, w, &geom, out_h, out_w, &mut col);
                let gout = grad_out.sample(sample);
                for fi in 0..f {
                    let g_row = &gout[fi * m..(fi + 1) * m];
                    gb[fi] += sum_f64(g_row);
                    let gw_row = &mut gw[fi * k..(fi + 1) * k];
                    for (ki, gw_k) in gw_row.iter_mut().enumerate() {
                        *gw_k += dot_f64(g_row, &col[ki * m..(ki + 1) * m]);
                    }
                }
                if let Some(gin_chunk) = gin_chunk.as_mut() {
                    gcol.fill(0.0);
                    for fi in 0..f {
                        let g_row = &gout[fi * m..(fi + 1) * m];
                        let w_row = &weights[fi * k..(fi + 1) * k];
                        for (ki, wk) in w_row.iter().enumerate() {
                            if *wk != 0.0 {
                                axpy_into_f64(
                                    &mut gcol[ki * m..(ki + 1) * m],
                                    g_row,
                                    f64::from(*wk),
                                );
                            }
                        }
                    }
                    gin.fill(0.0);
                    col2im(&gcol, c, h, w, &geom, out_h, out_w, &mut gin);
                    let dst = &mut gin_chunk[local * sample_in..(local + 1) * sample_in];
                    for (d, s) in dst.iter_mut().zip(&gin) {
                        *d = *s as f32;
                    }
                }
            }
            (gw, gb)
        })
        .collect();

    // Chunk partials are reduced in chunk order; the grouping depends
    // only on the batch size, never on thread scheduling.
    let mut gw_total = vec![0.0f64; f * k];
    let mut gb_total = vec![0.0f64; f];
    for (gw, gb) in &partials {
        for (t, p) in gw_total.iter_mut().zip(gw) {
            *t += *p;
        }
        for (t, p) in gb_total.iter_mut().zip(gb) {
            *t += *p;
        }
    }
    let grad_w = gw_total.iter().map(|v| *v as f32).collect();
    let grad_b = gb_total.iter().map(|v| *v as f32).collect();
    Ok((grad_input, grad_w, grad_b))
}

fn axpy_into_f64(acc: &mut [f64], x: &[f32], a: f64) {
    for (acc_i, x_i) in acc.iter_mut().zip(x) {
        *acc_i += a * f64::from(*x_i);
    }
}

fn check_channels(input: &Tensor, geom: &ConvGeom) -> Result<()> {
    if input.channels() != geom.in_channels {
        return Err(Error::Dimension(format!(
            "channel axis: input has {} planes but the kernel bank expects {}",
            input.channels(),
            geom.in_channels
        )));
    }
    Ok(())
}

/// Unfold one sample into a `(C*kh*kw) x (out_h*out_w)` column matrix,
/// row-major with the output position fastest. Padded positions read 0.
#[allow(clippy::too_many_arguments)]
fn im2col(
    sample: &[f32],
    c: usize,
    h: usize,
    w: usize,
    geom: &ConvGeom,
    out_h: usize,
    out_w: usize,
    col: &mut [f32],
) {
    let m = out_h * out_w;
    for ci in 0..c {
        let plane = &sample[ci * h * w..(ci + 1) * h * w];
        for i in 0..geom.kh {
            for j in 0..geom.kw {
                let row_idx = (ci * geom.kh + i) * geom.kw + j;
                let row = &mut col[row_idx * m..(row_idx + 1) * m];
                for oh in 0..out_h {
                    let ih = (oh * geom.stride_v + i) as isize - geom.pad_v as isize;
                    let dst = &mut row[oh * out_w..(oh + 1) * out_w];
                    if ih < 0 || ih >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[ih as usize * w..(ih as usize + 1) * w];
                    if geom.stride_h == 1 {
                        copy_row_padded(src, dst, j as isize - geom.pad_h as isize);
                    } else {
                        for (ow, d) in dst.iter_mut().enumerate() {
                            let iw = (ow * geom.stride_h + j) as isize - geom.pad_h as isize;
                            *d = if iw >= 0 && (iw as usize) < w {
                                src[iw as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Copy `dst.len()` values from `src` starting at (possibly negative)
/// `offset`; positions outside `src` become 0.
fn copy_row_padded(src: &[f32], dst: &mut [f32], offset: isize) {
    let n = dst.len();
    let lo = (-offset).clamp(0, n as isize) as usize;
    let hi_signed = src.len() as isize - offset;
    let hi = hi_signed.clamp(0, n as isize) as usize;
    dst[..lo].fill(0.0);
    if hi > lo {
        let s0 = (offset + lo as isize) as usize;
        dst[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
    }
    dst[hi.max(lo)..].fill(0.0);
}

/// Scatter-add a column-matrix gradient back onto the input plane grid.
#[allow(clippy::too_many_arguments)]
fn col2im(
    gcol: &[f64],
    c: usize,
    h: usize,
    w: usize,
    geom: &ConvGeom,
    out_h: usize,
    out_w: usize,
    gin: &mut [f64],
) {
    let m = out_h * out_w;
    for ci in 0..c {
        let plane = &mut gin[ci * h * w..(ci + 1) * h * w];
        for i in 0..geom.kh {
            for j in 0..geom.kw {
                let row_idx = (ci * geom.kh + i) * geom.kw + j;
                let row = &gcol[row_idx * m..(row_idx + 1) * m];
                for oh in 0..out_h {
                    let ih = (oh * geom.stride_v + i) as isize - geom.pad_v as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[ih as usize * w..(ih as usize + 1) * w];
                    let src = &row[oh * out_w..(oh + 1) * out_w];
                    for (ow, g) in src.iter().enumerate() {
                        let iw = (ow * geom.stride_h + j) as isize - geom.pad_h as isize;
                        if iw >= 0 && (iw as usize) < w {
                            dst[iw as usize] += *g;
                        }
                    }
                }
            }
        }
    }
}
