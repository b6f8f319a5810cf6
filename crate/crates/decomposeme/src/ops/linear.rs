//! Fully connected layer over flattened samples.

use rayon::prelude::*;

use super::kernels::{axpy_f64, batch_chunk_ranges, dot_f64, split_by_ranges};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-sample affine map `y = W x + b`.
///
/// `weights` is row-major `(out, in)`; each sample of `input` is
/// flattened to length `in`. Output shape is `(N, out, 1, 1)`.
pub fn linear(input: &Tensor, weights: &[f32], bias: &[f32]) -> Result<Tensor> {
    let (n, in_len, out_len) = check_dims(input, weights, bias.len())?;
    let mut output = Tensor::zeros(n, out_len, 1, 1);
    let ranges = batch_chunk_ranges(n);
    let out_slices = split_by_ranges(output.data_mut(), &ranges, out_len);
    ranges
        .into_par_iter()
        .zip(out_slices)
        .for_each(|(range, out_chunk)| {
            for (local, sample) in range.enumerate() {
                let x = input.sample(sample);
                let y = &mut out_chunk[local * out_len..(local + 1) * out_len];
                for (o, y_o) in y.iter_mut().enumerate() {
                    let w_row = &weights[o * in_len..(o + 1) * in_len];
                    *y_o = (f64::from(bias[o]) + dot_f64(w_row, x)) as f32;
                }
            }
        });
    Ok(output)
}

/// Gradients of `sum(grad_out * linear(input))` with respect to the
/// input, the weight matrix and the bias.
pub fn linear_backward(
    input: &Tensor,
    weights: &[f32],
    grad_out: &Tensor,
) -> Result<(Tensor, Vec<f32>, Vec<f32>)> {
    let out_len = weights.len() / input.sample_len();
    let (n, in_len, _) = check_dims(input, weights, out_len)?;
    if grad_out.shape() != [n, out_len, 1, 1] {
        return Err(Error::Dimension(format!(
            "grad_out shape {:?} does not match linear output shape {:?}",
            grad_out.shape(),
            [n, out_len, 1, 1]
        )));
    }

    let [n_, c, h, w] = input.shape();
    let mut grad_input = Tensor::zeros(n_, c, h, w);
    let ranges = batch_chunk_ranges(n);
    let gin_slices = split_by_ranges(grad_input.data_mut(), &ranges, in_len);

    let partials: Vec<(Vec<f64>, Vec<f64>)> = ranges
        .into_par_iter()
        .zip(gin_slices)
        .map(|(range, gin_chunk)| {
            let mut gw = vec![0.0f64; out_len * in_len];
            let mut gb = vec![0.0f64; out_len];
            let mut gx = vec![0.0f64; in_len];
            for (local, sample) in range.enumerate() {
                let x = input.sample(sample);
                let g = grad_out.sample(sample);
                gx.fill(0.0);
                for (o, &g_o) in g.iter().enumerate() {
                    gb[o] += f64::from(g_o);
                    if g_o != 0.0 {
                        let gf = f64::from(g_o);
                        axpy_f64(&mut gw[o * in_len..(o + 1) * in_len], x, gf);
                        let w_row = &weights[o * in_len..(o + 1) * in_len];
                        axpy_f64(&mut gx, w_row, gf);
                    }
                }
                let dst = &mut gin_chunk[local * in_len..(local + 1) * in_len];
                for (d, s) in dst.iter_mut().zip(&gx) {
                    *d = *s as f32;
                }
            }
            (gw, gb)
        })
        .collect();

    let mut gw_total = vec![0.0f64; out_len * in_len];
    let mut gb_total = vec![0.0f64; out_len];
    for (gw, gb) in &partials {
        for (t, p) in gw_total.iter_mut().zip(gw) {
            *t += *p;
        }
        for (t, p) in gb_total.iter_mut().zip(gb) {
            *t += *p;
        }
    }
    Ok((
        grad_input,
        gw_total.iter().map(|v| *v as f32).collect(),
        gb_total.iter().map(|v| *v as f32).collect(),
    ))
}

fn check_dims(input: &Tensor, weights: &[f32], out_len: usize) -> Result<(usize, usize, usize)> {
    let in_len = input.sample_len();
    if out_len == 0 || weights.len() != out_len * in_len {
        return Err(Error::Dimension(format!(
            "weight matrix of {} elements does not factor as out x in with in = {} \
             (flattened sample length)",
            weights.len(),
            in_len
        )));
    }
    Ok((input.batch(), in_len, out_len))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_weights_flatten_the_input() {
        let input = Tensor::from_vec([1, 2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut weights = vec![0.0f32; 16];
        for i in 0..4 {
            weights[i * 4 + i] = 1.0;
        }
        let out = linear(&input, &weights, &[0.0; 4]).unwrap();
        assert_eq!(out.data(), input.data());
    }

    #[test]
    fn zero_weights_output_the_bias() {
        let input = Tensor::full([3, 1, 2, 2], 9.0);
        let bias = vec![0.5, -1.5];
        let out = linear(&input, &vec![0.0; 2 * 4], &bias).unwrap();
        for s in 0..3 {
            assert_eq!(out.sample(s), &bias[..]);
        }
    }

    #[test]
    fn matches_matrix_product_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let input = Tensor::from_vec(
            [4, 1, 1, 10],
            (0..40).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let weights: Vec<f32> = (0..5 * 10).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let bias: Vec<f32> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let out = linear(&input, &weights, &bias).unwrap();
        for n in 0..4 {
            for o in 0..5 {
                let mut acc = f64::from(bias[o]);
                for i in 0..10 {
                    acc += f64::from(weights[o * 10 + i]) * f64::from(input.sample(n)[i]);
                }
                assert!((f64::from(out.at(n, o, 0, 0)) - acc).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let input = Tensor::zeros(1, 1, 1, 3);
        let err = linear(&input, &[0.0; 10], &[0.0; 2]).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
    }

    #[test]
    fn backward_matches_outer_product_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let input = Tensor::from_vec(
            [2, 1, 1, 3],
            (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let weights: Vec<f32> = (0..2 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let grad_out = Tensor::from_vec(
            [2, 2, 1, 1],
            (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let (gin, gw, gb) = linear_backward(&input, &weights, &grad_out).unwrap();
        for o in 0..2 {
            let expected: f64 = (0..2).map(|n| f64::from(grad_out.at(n, o, 0, 0))).sum();
            assert!((f64::from(gb[o]) - expected).abs() < 1e-6);
            for i in 0..3 {
                let expected: f64 = (0..2)
                    .map(|n| {
                        f64::from(grad_out.at(n, o, 0, 0)) * f64::from(input.sample(n)[i])
                    })
                    .sum();
                assert!((f64::from(gw[o * 3 + i]) - expected).abs() < 1e-6);
            }
        }
        for n in 0..2 {
            for i in 0..3 {
                let expected: f64 = (0..2)
                    .map(|o| {
                        f64::from(grad_out.at(n, o, 0, 0)) * f64::from(weights[o * 3 + i])
                    })
                    .sum();
                assert!((f64::from(gin.sample(n)[i]) - expected).abs() < 1e-6);
            }
        }
    }
}
