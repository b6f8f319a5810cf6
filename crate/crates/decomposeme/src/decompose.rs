//! Low-rank factorization of 2D kernel banks and construction of
//! equivalent or truncated decomposed layers.
//!
//! Every 2D kernel is a weighted sum of outer products of 1D vectors;
//! [`svd_small`] computes that factorization for the tiny matrices
//! convolution kernels are, and [`build_decomposed_pair`] rebuilds a
//! kernel bank as a decomposed layer, one intermediate channel per kept
//! (filter, component) pair.

use crate::error::{Error, Result};
use crate::layers::{DecomposedLayer, Nonlinearity};
use crate::ops::KernelBank2D;
use crate::tensor::Tensor;

/// Singular components of one 2D kernel: `sigma[k] * v[k] * h[k]^T`
/// summed over `k` reconstructs the kernel. `v` are unit vectors of the
/// kernel height, `h` of the kernel width; `sigma` is non-negative and
/// descending.
#[derive(Clone, Debug)]
pub struct RankComponents {
    pub sigma: Vec<f32>,
    pub v: Vec<Vec<f32>>,
    pub h: Vec<Vec<f32>>,
}

impl RankComponents {
    /// Number of stored components.
    pub fn len(&self) -> usize {
        self.sigma.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sigma.is_empty()
    }

    /// Sum of `sigma[k] v[k] h[k]^T` as a dense `dv x dh` matrix.
    pub fn reconstruct(&self) -> Vec<f32> {
        let (dv, dh) = (self.v[0].len(), self.h[0].len());
        let mut out = vec![0.0f64; dv * dh];
        for k in 0..self.len() {
            let s = f64::from(self.sigma[k]);
            for (i, &vi) in self.v[k].iter().enumerate() {
                for (j, &hj) in self.h[k].iter().enumerate() {
                    out[i * dh + j] += s * f64::from(vi) * f64::from(hj);
                }
            }
        }
        out.iter().map(|&x| x as f32).collect()
    }
}

const MAX_KERNEL_EXTENT: usize = 32;

/// Full SVD of a small `dv x dh` matrix via one-sided Jacobi rotations.
///
/// Returns `min(dv, dh)` components sorted by descending singular
/// value. The sign convention makes the first nonzero element of each
/// `v[k]` positive (the sign is absorbed into `h[k]`), so outputs are
/// unique and reproducible.
pub fn svd_small(matrix: &[f32], dv: usize, dh: usize) -> Result<RankComponents> {
    if dv > MAX_KERNEL_EXTENT || dh > MAX_KERNEL_EXTENT {
        return Err(Error::Config(format!(
            "svd_small handles kernels up to {MAX_KERNEL_EXTENT} per side (got {dv}x{dh})"
        )));
    }
    if matrix.len() != dv * dh {
        return Err(Error::Dimension(format!(
            "matrix buffer has {} elements, expected {dv}x{dh} = {}",
            matrix.len(),
            dv * dh
        )));
    }

    // Columns of the matrix in f64; one-sided Jacobi orthogonalizes them.
    let mut cols: Vec<Vec<f64>> = (0..dh)
        .map(|j| (0..dv).map(|i| f64::from(matrix[i * dh + j])).collect())
        .collect();
    let mut vmat: Vec<Vec<f64>> = (0..dh)
        .map(|j| {
            let mut e = vec![0.0; dh];
            e[j] = 1.0;
            e
        })
        .collect();

    let frob_sq: f64 = cols.iter().flatten().map(|x| x * x).sum();
    let tol = 1e-14 * frob_sq.max(f64::MIN_POSITIVE);
    for _sweep in 0..60 {
        let mut rotated = false;
        for p in 0..dh {
            for q in (p + 1)..dh {
                let alpha: f64 = cols[p].iter().map(|x| x * x).sum();
                let beta: f64 = cols[q].iter().map(|x| x * x).sum();
                let gamma: f64 = cols[p].iter().zip(&cols[q]).map(|(a, b)| a * b).sum();
                if gamma.abs() <= tol || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..dv {
                    let (ap, aq) = (cols[p][i], cols[q][i]);
                    cols[p][i] = c * ap - s * aq;
                    cols[q][i] = s * ap + c * aq;
                }
                for i in 0..dh {
                    let (vp, vq) = (vmat[p][i], vmat[q][i]);
                    vmat[p][i] = c * vp - s * vq;
                    vmat[q][i] = s * vp + c * vq;
                }
            }
        }
        if !rotated {
            break;
        }
    }

    let k = dv.min(dh);
    let mut order: Vec<usize> = (0..dh).collect();
    let norms: Vec<f64> = cols
        .iter()
        .map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect();
    order.sort_by(|&a, &b| norms[b].partial_cmp(&norms[a]).unwrap().then(a.cmp(&b)));

    let mut sigma = Vec::with_capacity(k);
    let mut v = Vec::with_capacity(k);
    let mut h = Vec::with_capacity(k);
    for &j in order.iter().take(k) {
        let s = norms[j];
        if s > 0.0 {
            let mut u: Vec<f64> = cols[j].iter().map(|x| x / s).collect();
            let mut w = vmat[j].clone();
            // Sign fix: first element of v with visible magnitude goes positive.
            if let Some(first) = u.iter().find(|x| x.abs() > 1e-9) {
                if *first < 0.0 {
                    for x in u.iter_mut() {
                        *x = -*x;
                    }
                    for x in w.iter_mut() {
                        *x = -*x;
                    }
                }
            }
            sigma.push(s as f32);
            v.push(u.iter().map(|&x| x as f32).collect());
            h.push(w.iter().map(|&x| x as f32).collect());
        } else {
            sigma.push(0.0);
            v.push(vec![0.0; dv]);
            h.push(vec![0.0; dh]);
        }
    }
    Ok(RankComponents { sigma, v, h })
}

/// Best rank-`rank` approximation of a kernel: [`svd_small`] truncated
/// to the leading components.
pub fn decompose_kernel(matrix: &[f32], dv: usize, dh: usize, rank: usize) -> Result<RankComponents> {
    let max_rank = dv.min(dh);
    if rank < 1 || rank > max_rank {
        return Err(Error::Input(format!(
            "rank {rank} is outside [1, {max_rank}] for a {dv}x{dh} kernel"
        )));
    }
    let mut full = svd_small(matrix, dv, dh)?;
    full.sigma.truncate(rank);
    full.v.truncate(rank);
    full.h.truncate(rank);
    Ok(full)
}

/// How many components each filter of a bank keeps when converting.
#[derive(Clone, Debug)]
pub enum RankPolicy {
    /// Keep every component with a nonzero singular value: the layer
    /// reproduces the bank exactly (under the identity nonlinearity).
    Full,
    /// Keep the top `ranks[i]` components of filter `i` (pooled over
    /// its input planes, sorted by singular value).
    PerFilter(Vec<usize>),
    /// A total intermediate-channel budget, allocated greedily by
    /// singular value with at least one channel per nonzero filter.
    Budget(usize),
}

/// One kept component: source filter, source input plane, and the
/// sigma-weighted vertical / unit horizontal kernel pair.
struct KeptComponent {
    filter: usize,
    plane: usize,
    sigma: f64,
    v: Vec<f32>,
    h: Vec<f32>,
}

/// Convert a 2D kernel bank into a decomposed layer.
///
/// Each kept (filter, component) pair becomes one intermediate channel:
/// its vertical kernel is the sigma-weighted `v` placed in the source
/// input plane, and its horizontal kernel connects the channel to its
/// source filter only. The first-stage bias is zero and the
/// second-stage bias is the bank bias, so at full rank with the
/// identity nonlinearity the layer reproduces `conv2d(.., bank)`.
pub fn build_decomposed_pair(
    bank: &KernelBank2D,
    ranks: &RankPolicy,
    nonlinearity: Nonlinearity,
) -> Result<DecomposedLayer> {
    let (f, c) = (bank.filters(), bank.in_channels());
    let (dv, dh) = (bank.kernel_h(), bank.kernel_w());

    // All components of every filter, each filter's list sorted by
    // descending singular value.
    let mut per_filter: Vec<Vec<KeptComponent>> = Vec::with_capacity(f);
    for fi in 0..f {
        let mut comps = Vec::new();
        for ci in 0..c {
            let parts = svd_small(bank.kernel_slice(fi, ci), dv, dh)?;
            for k in 0..parts.len() {
                if parts.sigma[k] > 0.0 {
                    comps.push(KeptComponent {
                        filter: fi,
                        plane: ci,
                        sigma: f64::from(parts.sigma[k]),
                        v: parts.v[k].clone(),
                        h: parts.h[k].clone(),
                    });
                }
            }
        }
        comps.sort_by(|a, b| b.sigma.partial_cmp(&a.sigma).unwrap().then(a.plane.cmp(&b.plane)));
        per_filter.push(comps);
    }

    let kept: Vec<KeptComponent> = match ranks {
        RankPolicy::Full => per_filter.into_iter().flatten().collect(),
        RankPolicy::PerFilter(r) => {
            if r.len() != f {
                return Err(Error::Input(format!(
                    "{} per-filter ranks for {f} filters",
                    r.len()
                )));
            }
            if let Some(&bad) = r.iter().find(|&&x| x < 1) {
                return Err(Error::Input(format!(
                    "per-filter rank must be >= 1 (got {bad})"
                )));
            }
            per_filter
                .into_iter()
                .zip(r)
                .flat_map(|(comps, &take)| comps.into_iter().take(take))
                .collect()
        }
        RankPolicy::Budget(budget) => {
            let nonzero_filters = per_filter.iter().filter(|c| !c.is_empty()).count();
            if *budget < nonzero_filters {
                return Err(Error::Infeasible(format!(
                    "budget {budget} cannot cover {nonzero_filters} filters with nonzero kernels"
                )));
            }
            // One channel per nonzero filter first, then greedy by sigma.
            let mut kept = Vec::new();
            let mut rest = Vec::new();
            for comps in per_filter {
                let mut it = comps.into_iter();
                if let Some(first) = it.next() {
                    kept.push(first);
                }
                rest.extend(it);
            }
            rest.sort_by(|a, b| {
                b.sigma
                    .partial_cmp(&a.sigma)
                    .unwrap()
                    .then(a.filter.cmp(&b.filter))
                    .then(a.plane.cmp(&b.plane))
            });
            kept.extend(rest.into_iter().take(budget - kept.len()));
            kept.sort_by(|a, b| a.filter.cmp(&b.filter).then(b.sigma.partial_cmp(&a.sigma).unwrap()));
            kept
        }
    };

    // A bank can be all zeros; the layer still needs one channel.
    let l = kept.len().max(1);
    let mut layer = DecomposedLayer::new_rect(
        c,
        l,
        f,
        dv,
        dh,
        nonlinearity,
        bank.stride(),
        bank.padding(),
    )?;
    for (ch, comp) in kept.iter().enumerate() {
        // vertical: (L, C, dv) with the sigma weight folded in.
        for (i, &vi) in comp.v.iter().enumerate() {
            layer.vertical_mut()[(ch * c + comp.plane) * dv + i] = (comp.sigma * f64::from(vi)) as f32;
        }
        // horizontal: (F, L, dh), connecting channel ch to its filter.
        for (j, &hj) in comp.h.iter().enumerate() {
            layer.horizontal_mut()[(comp.filter * l + ch) * dh + j] = hj;
        }
    }
    layer.bias_out_mut().copy_from_slice(bank.bias());
    Ok(layer)
}

/// Frobenius norm of the difference between a bank's weights and the
/// effective kernels of a decomposed layer, measured by pushing
/// canonical basis impulses through the layer.
///
/// Only defined for the identity nonlinearity; under ReLU the layer is
/// not a linear map and has no kernel to reconstruct.
pub fn reconstruction_error(bank: &KernelBank2D, layer: &DecomposedLayer) -> Result<f64> {
    if layer.nonlinearity() != Nonlinearity::Identity {
        return Err(Error::Semantic(
            "reconstruction is undefined for a non-identity nonlinearity".into(),
        ));
    }
    let (f, c) = (bank.filters(), bank.in_channels());
    let (dv, dh) = (bank.kernel_h(), bank.kernel_w());
    if layer.in_channels() != c || layer.filters() != f || layer.kernel_v() != dv
        || layer.kernel_h() != dh
    {
        return Err(Error::Dimension(format!(
            "layer (C={}, F={}, {}x{}) is not shaped like the bank (C={c}, F={f}, {dv}x{dh})",
            layer.in_channels(),
            layer.filters(),
            layer.kernel_v(),
            layer.kernel_h()
        )));
    }

    let probe_layer = layer.clone().with_unit_geometry();
    // Bias contribution, subtracted from every impulse response.
    let zero = Tensor::zeros(1, c, dv, dh);
    let (base, _) = crate::layers::decomposed_forward(&zero, &probe_layer)?;

    let mut err_sq = 0.0f64;
    for ci in 0..c {
        for i in 0..dv {
            for j in 0..dh {
                let mut impulse = Tensor::zeros(1, c, dv, dh);
                impulse.set(0, ci, i, j, 1.0);
                let (resp, _) = crate::layers::decomposed_forward(&impulse, &probe_layer)?;
                for fi in 0..f {
                    let effective = f64::from(resp.at(0, fi, 0, 0)) - f64::from(base.at(0, fi, 0, 0));
                    let want = f64::from(bank.weight_at(fi, ci, i, j));
                    err_sq += (want - effective) * (want - effective);
                }
            }
        }
    }
    Ok(err_sq.sqrt())
}

/// Convert every 2D convolutional layer of an instantiated model into
/// a decomposed layer with the identity nonlinearity, carrying the
/// weights over. `rank` keeps the top components per filter (`None`
/// keeps all of them, reproducing the model exactly); the returned
/// model's spec reflects the new layer kinds and intermediate widths.
pub fn decompose_model_weights(
    model: &crate::net::Model,
    rank: Option<usize>,
) -> Result<crate::net::Model> {
    use crate::layers::LayerSpec;
    use crate::net::RtLayer;

    let mut spec = model.spec().clone();
    let body_len = spec.layers.len();
    let mut layers = Vec::with_capacity(model.layers().len());
    for (idx, layer) in model.layers().iter().enumerate() {
        match layer {
            RtLayer::Conv2d(bank) if idx < body_len => {
                let policy = match rank {
                    None => RankPolicy::Full,
                    Some(r) => {
                        if r < 1 {
                            return Err(Error::Input("rank must be >= 1".into()));
                        }
                        RankPolicy::PerFilter(vec![r; bank.filters()])
                    }
                };
                let converted = build_decomposed_pair(bank, &policy, Nonlinearity::Identity)?;
                spec.layers[idx] = LayerSpec::Decomposed {
                    in_channels: converted.in_channels(),
                    l: converted.mid_channels(),
                    out: converted.filters(),
                    k: converted.kernel_v(),
                    nl: Nonlinearity::Identity,
                    stride: converted.stride(),
                    pad: converted.padding(),
                };
                layers.push(RtLayer::Decomposed(converted));
            }
            other => layers.push(other.clone()),
        }
    }
    spec.validate()?;
    Ok(crate::net::Model::from_parts(spec, layers, model.seed()))
}
