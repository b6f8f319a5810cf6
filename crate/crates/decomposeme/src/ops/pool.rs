//! Max pooling and global average pooling.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Recorded argmax positions of a max-pool forward pass, one per output
/// element, as flat offsets into the corresponding input sample.
#[derive(Clone, Debug)]
pub struct MaxPoolIndices {
    input_shape: [usize; 4],
    indices: Vec<u32>,
}

/// Max over each `window x window` patch, stepping by `stride`.
///
/// Ties go to the first element in scan order (row-major within the
/// window), which makes the backward pass deterministic.
pub fn maxpool(input: &Tensor, window: usize, stride: usize) -> Result<(Tensor, MaxPoolIndices)> {
    if window < 1 || stride < 1 {
        return Err(Error::Input("pool window and stride must be >= 1".into()));
    }
    let [n, c, h, w] = input.shape();
    let out_h = pool_extent(h, window, stride, "height")?;
    let out_w = pool_extent(w, window, stride, "width")?;
    let mut out = Tensor::zeros(n, c, out_h, out_w);
    let mut indices = vec![0u32; n * c * out_h * out_w];
    let sample_len = c * h * w;
    let mut idx = 0;
    for ni in 0..n {
        let sample = input.sample(ni);
        for ci in 0..c {
            let plane = &sample[ci * h * w..(ci + 1) * h * w];
            for oh in 0..out_h {
                for ow in 0..out_w {
                    let (h0, w0) = (oh * stride, ow * stride);
                    let mut best = f32::NEG_INFINITY;
                    let mut best_at = 0usize;
                    for i in 0..window {
                        for j in 0..window {
                            let at = (h0 + i) * w + (w0 + j);
                            if plane[at] > best {
                                best = plane[at];
                                best_at = at;
                            }
                        }
                    }
                    out.set(ni, ci, oh, ow, best);
                    indices[idx] = (ci * h * w + best_at) as u32;
                    idx += 1;
                }
            }
        }
    }
    debug_assert!(sample_len <= u32::MAX as usize);
    Ok((
        out,
        MaxPoolIndices {
            input_shape: input.shape(),
            indices,
        },
    ))
}

/// Route `grad_out` back to the recorded argmax positions.
pub fn maxpool_backward(indices: &MaxPoolIndices, grad_out: &Tensor) -> Result<Tensor> {
    if grad_out.len() != indices.indices.len() {
        return Err(Error::Dimension(format!(
            "grad_out has {} elements but the pool recorded {} argmax positions",
            grad_out.len(),
            indices.indices.len()
        )));
    }
    let [n, c, h, w] = indices.input_shape;
    let mut grad_in = Tensor::zeros(n, c, h, w);
    let per_sample_out = grad_out.sample_len();
    for ni in 0..n {
        let gout = grad_out.sample(ni);
        let gin = grad_in.sample_mut(ni);
        let idx = &indices.indices[ni * per_sample_out..(ni + 1) * per_sample_out];
        for (g, at) in gout.iter().zip(idx) {
            gin[*at as usize] += g;
        }
    }
    Ok(grad_in)
}

fn pool_extent(input: usize, window: usize, stride: usize, axis: &str) -> Result<usize> {
    if input < window {
        return Err(Error::Config(format!(
            "{axis} axis: input extent {input} is smaller than pool window {window}"
        )));
    }
    let span = input - window;
    if span % stride != 0 {
        return Err(Error::Config(format!(
            "{axis} axis: pool output extent ({input} - {window})/{stride} + 1 is not an integer"
        )));
    }
    Ok(span / stride + 1)
}

/// Mean over the spatial grid of each channel; output is `(N, C, 1, 1)`.
pub fn global_avg_pool(input: &Tensor) -> Tensor {
    let [n, c, h, w] = input.shape();
    let area = (h * w) as f64;
    let mut out = Tensor::zeros(n, c, 1, 1);
    for ni in 0..n {
        for ci in 0..c {
            let plane = &input.sample(ni)[ci * h * w..(ci + 1) * h * w];
            let sum: f64 = plane.iter().map(|&v| f64::from(v)).sum();
            out.set(ni, ci, 0, 0, (sum / area) as f32);
        }
    }
    out
}

/// Spread each channel gradient uniformly over the spatial grid.
pub fn global_avg_pool_backward(input_shape: [usize; 4], grad_out: &Tensor) -> Tensor {
    let [n, c, h, w] = input_shape;
    let scale = 1.0 / (h * w) as f32;
    let mut grad_in = Tensor::zeros(n, c, h, w);
    for ni in 0..n {
        for ci in 0..c {
            let g = grad_out.at(ni, ci, 0, 0) * scale;
            grad_in.sample_mut(ni)[ci * h * w..(ci + 1) * h * w].fill(g);
        }
    }
    grad_in
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_by_two_window_takes_the_max() {
        let t = Tensor::from_vec([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (out, _) = maxpool(&t, 2, 2).unwrap();
        assert_eq!(out.shape(), [1, 1, 1, 1]);
        assert_eq!(out.data(), &[4.0]);
    }

    #[test]
    fn constant_input_routes_gradient_to_first_window_element() {
        let t = Tensor::full([1, 1, 4, 4], 2.5);
        let (out, idx) = maxpool(&t, 2, 2).unwrap();
        assert!(out.data().iter().all(|&v| v == 2.5));
        let grad_out = Tensor::full([1, 1, 2, 2], 1.0);
        let gin = maxpool_backward(&idx, &grad_out).unwrap();
        for oh in 0..2 {
            for ow in 0..2 {
                for i in 0..2 {
                    for j in 0..2 {
                        let expected = if i == 0 && j == 0 { 1.0 } else { 0.0 };
                        assert_eq!(gin.at(0, 0, oh * 2 + i, ow * 2 + j), expected);
                    }
                }
            }
        }
    }

    #[test]
    fn matches_naive_per_window_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let t = Tensor::from_vec(
            [1, 1, 8, 8],
            (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let (out, _) = maxpool(&t, 2, 2).unwrap();
        for oh in 0..4 {
            for ow in 0..4 {
                let mut best = f32::NEG_INFINITY;
                for i in 0..2 {
                    for j in 0..2 {
                        best = best.max(t.at(0, 0, oh * 2 + i, ow * 2 + j));
                    }
                }
                assert_eq!(out.at(0, 0, oh, ow), best);
            }
        }
    }

    #[test]
    fn gradient_mass_is_conserved_for_non_overlapping_windows() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let t = Tensor::from_vec(
            [2, 3, 6, 6],
            (0..2 * 3 * 36).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let (_, idx) = maxpool(&t, 2, 2).unwrap();
        let grad_out = Tensor::from_vec(
            [2, 3, 3, 3],
            (0..2 * 3 * 9).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let gin = maxpool_backward(&idx, &grad_out).unwrap();
        let s_in: f64 = gin.data().iter().map(|&v| f64::from(v)).sum();
        let s_out: f64 = grad_out.data().iter().map(|&v| f64::from(v)).sum();
        assert!((s_in - s_out).abs() < 1e-5);
    }

    #[test]
    fn non_integral_pool_output_is_a_configuration_error() {
        let t = Tensor::zeros(1, 1, 5, 5);
        assert!(matches!(maxpool(&t, 2, 2), Err(Error::Config(_))));
    }

    #[test]
    fn global_avg_pool_means_and_backward_spread() {
        let t = Tensor::from_vec([1, 2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, -1.0, -1.0, 1.0, 1.0])
            .unwrap();
        let out = global_avg_pool(&t);
        assert_eq!(out.data(), &[2.5, 0.0]);
        let g = Tensor::from_vec([1, 2, 1, 1], vec![4.0, 8.0]).unwrap();
        let gin = global_avg_pool_backward(t.shape(), &g);
        assert!(gin.sample(0)[..4].iter().all(|&v| v == 1.0));
        assert!(gin.sample(0)[4..].iter().all(|&v| v == 2.0));
    }
}
