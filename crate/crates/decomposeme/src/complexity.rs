//! Analytic parameter and multiply-accumulate accounting.
//!
//! MACs count multiplicative work only (one MAC = one multiply plus one
//! add); bias additions and nonlinearities are excluded. Parameter
//! totals follow the ConvP/FCP convention: ConvP sums 2D-convolutional
//! and decomposed layers, FCP sums fully connected layers.

use crate::error::Result;
use crate::layers::{layer_param_count, LayerSpec};
use crate::model::ModelSpec;

/// Cost of one layer of the expanded model.
#[derive(Clone, Debug)]
pub struct LayerCost {
    pub name: String,
    pub kind: &'static str,
    pub params: usize,
    pub macs: u64,
    pub out_shape: [usize; 3],
}

/// Per-layer costs plus category totals.
#[derive(Clone, Debug)]
pub struct CostReport {
    pub model: String,
    pub rows: Vec<LayerCost>,
    /// Parameters in conv2d and decomposed layers.
    pub conv_params: usize,
    /// Parameters in fully connected layers.
    pub fc_params: usize,
    /// Parameters in every layer (including batch norm).
    pub total_params: usize,
    pub total_macs: u64,
}

/// Analytic MAC and parameter counts for a spec, optionally overriding
/// the spec's input shape.
pub fn count_macs(spec: &ModelSpec, input_shape: Option<[usize; 3]>) -> Result<CostReport> {
    let mut spec = spec.clone();
    if let Some(shape) = input_shape {
        spec.input_shape = shape;
    }
    let resolved = spec.resolve()?;

    let mut rows = Vec::with_capacity(resolved.len());
    let mut conv_params = 0usize;
    let mut fc_params = 0usize;
    let mut total_params = 0usize;
    let mut total_macs = 0u64;
    for (idx, r) in resolved.iter().enumerate() {
        let [c, h, w] = r.in_shape;
        let [oc, oh, ow] = r.out_shape;
        let (kind, macs, fan_in) = match r.spec {
            LayerSpec::Conv2d { out, k, .. } => {
                ("conv2d", (c * out * k * k * oh * ow) as u64, c)
            }
            LayerSpec::Decomposed { l, out, k, stride, pad, .. } => {
                // Vertical stage output is (oh, w); horizontal reduces w.
                let _ = stride;
                let _ = pad;
                let vertical = (c * l * k * oh * w) as u64;
                let horizontal = (l * out * k * oh * ow) as u64;
                ("decomposed", vertical + horizontal, c)
            }
            LayerSpec::Linear { out } => ("linear", (c * h * w * out) as u64, c * h * w),
            LayerSpec::Relu => ("relu", 0, c),
            LayerSpec::Tanh => ("tanh", 0, c),
            LayerSpec::Maxpool { .. } => ("maxpool", 0, c),
            LayerSpec::Batchnorm => ("batchnorm", 0, c),
            LayerSpec::AvgpoolGlobal => ("avgpool_global", 0, c),
        };
        let params = layer_param_count(&r.spec, fan_in);
        match r.spec {
            LayerSpec::Conv2d { .. } | LayerSpec::Decomposed { .. } => conv_params += params,
            LayerSpec::Linear { .. } => fc_params += params,
            _ => {}
        }
        total_params += params;
        total_macs += macs;
        rows.push(LayerCost {
            name: format!("{kind}{idx}"),
            kind,
            params,
            macs,
            out_shape: [oc, oh, ow],
        });
    }
    Ok(CostReport {
        model: spec.name.clone(),
        rows,
        conv_params,
        fc_params,
        total_params,
        total_macs,
    })
}

/// Per-pixel MAC ratio of a `C -> F`, `d x d` convolution against its
/// decomposed form with `L` intermediate channels:
/// `C*F*d^2 / (L*(C+F)*d) = C*F*d / (L*(C+F))`.
pub fn predicted_speedup(c: usize, f: usize, d: usize, l: usize) -> f64 {
    assert!(c > 0 && f > 0 && d > 0 && l > 0, "extents must be positive");
    (c * f * d) as f64 / (l * (c + f)) as f64
}

/// CostReport as CSV: one row per layer, then category totals.
pub fn report_to_csv(report: &CostReport) -> String {
    let mut out = String::from("layer,kind,params,macs,out_c,out_h,out_w\n");
    for row in &report.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            row.name, row.kind, row.params, row.macs, row.out_shape[0], row.out_shape[1],
            row.out_shape[2]
        ));
    }
    out.push_str(&format!("TOTAL_CONVP,,{},,,,\n", report.conv_params));
    out.push_str(&format!("TOTAL_FCP,,{},,,,\n", report.fc_params));
    out.push_str(&format!("TOTAL_MACS,,,{},,,\n", report.total_macs));
    out
}

/// Side-by-side totals for two specs, with `a / b` ratios. Layer pairs
/// where `a` is a conv2d and `b` a decomposed layer of the same kernel
/// size also report the analytic per-pixel speedup.
#[derive(Clone, Debug)]
pub struct SpecComparison {
    pub name_a: String,
    pub name_b: String,
    pub rows: Vec<(String, f64, f64)>,
}

impl SpecComparison {
    pub fn ratio(&self, metric: &str) -> Option<f64> {
        self.rows
            .iter()
            .find(|(name, _, _)| name == metric)
            .map(|(_, a, b)| if *b == 0.0 { f64::INFINITY } else { a / b })
    }
}

/// Compare two specs' parameter and MAC totals.
pub fn compare_specs(
    a: &ModelSpec,
    b: &ModelSpec,
    input_shape: Option<[usize; 3]>,
) -> Result<SpecComparison> {
    let ra = count_macs(a, input_shape)?;
    let rb = count_macs(b, input_shape)?;
    let mut rows = vec![
        (
            "conv_params".to_string(),
            ra.conv_params as f64,
            rb.conv_params as f64,
        ),
        (
            "fc_params".to_string(),
            ra.fc_params as f64,
            rb.fc_params as f64,
        ),
        (
            "total_params".to_string(),
            ra.total_params as f64,
            rb.total_params as f64,
        ),
        (
            "total_macs".to_string(),
            ra.total_macs as f64,
            rb.total_macs as f64,
        ),
    ];
    for (idx, (la, lb)) in a.layers.iter().zip(&b.layers).enumerate() {
        if let (
            LayerSpec::Conv2d { in_channels, out, k, .. },
            LayerSpec::Decomposed { l, k: kb, .. },
        ) = (la, lb)
        {
            if k == kb {
                rows.push((
                    format!("layer{idx}_predicted_speedup"),
                    predicted_speedup(*in_channels, *out, *k, *l),
                    1.0,
                ));
            }
        }
    }
    Ok(SpecComparison {
        name_a: ra.model,
        name_b: rb.model,
        rows,
    })
}

/// SpecComparison as CSV.
pub fn comparison_to_csv(cmp: &SpecComparison) -> String {
    let mut out = format!("metric,{},{},ratio\n", cmp.name_a, cmp.name_b);
    for (name, a, b) in &cmp.rows {
        let ratio = if *b == 0.0 { f64::INFINITY } else { a / b };
        out.push_str(&format!("{name},{a},{b},{ratio:.6}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{builtin, HeadStyle};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bare_spec(layers: Vec<LayerSpec>, input: [usize; 3]) -> ModelSpec {
        ModelSpec {
            name: "t".into(),
            input_shape: input,
            num_classes: 2,
            head: HeadStyle::Compact,
            head_units: Vec::new(),
            layers,
        }
    }

    /// Reference convolution that literally counts multiplications.
    fn instrumented_conv_macs(c: usize, f: usize, k: usize, h: usize, w: usize, stride: usize, pad: usize) -> u64 {
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        let mut count = 0u64;
        for _f in 0..f {
            for _oh in 0..oh {
                for _ow in 0..ow {
                    for _c in 0..c {
                        for _i in 0..k {
                            for _j in 0..k {
                                count += 1; // one multiply
                            }
                        }
                    }
                }
            }
        }
        count
    }

    fn instrumented_decomposed_macs(
        c: usize,
        l: usize,
        f: usize,
        k: usize,
        h: usize,
        w: usize,
        stride: usize,
        pad: usize,
    ) -> u64 {
        let oh = (h + 2 * pad - k) / stride + 1;
        let ow = (w + 2 * pad - k) / stride + 1;
        let mut count = 0u64;
        // Vertical stage: L filters over C planes, kernel k x 1, on (h, w).
        for _l in 0..l {
            for _oh in 0..oh {
                for _ow in 0..w {
                    for _c in 0..c {
                        for _i in 0..k {
                            count += 1;
                        }
                    }
                }
            }
        }
        // Horizontal stage: F filters over L planes, kernel 1 x k, on (oh, w).
        for _f in 0..f {
            for _oh in 0..oh {
                for _ow in 0..ow {
                    for _l in 0..l {
                        for _j in 0..k {
                            count += 1;
                        }
                    }
                }
            }
        }
        count
    }

    #[test]
    fn one_by_one_conv_on_4x4_is_16_macs() {
        let spec = bare_spec(
            vec![LayerSpec::Conv2d { in_channels: 1, out: 1, k: 1, stride: 1, pad: 0 }],
            [1, 4, 4],
        );
        let report = count_macs(&spec, None).unwrap();
        assert_eq!(report.rows[0].macs, 16);
    }

    #[test]
    fn conv_macs_match_instrumented_reference() {
        let spec = bare_spec(
            vec![LayerSpec::Conv2d { in_channels: 3, out: 2, k: 3, stride: 1, pad: 0 }],
            [3, 5, 5],
        );
        let report = count_macs(&spec, None).unwrap();
        assert_eq!(report.rows[0].macs, 486);
        assert_eq!(report.rows[0].macs, instrumented_conv_macs(3, 2, 3, 5, 5, 1, 0));
    }

    #[test]
    fn conv_and_decomposed_macs_match_instrumented_reference_on_random_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        for _ in 0..20 {
            let c = rng.gen_range(1..6);
            let f = rng.gen_range(1..6);
            let l = rng.gen_range(1..6);
            let k = [1usize, 3, 5][rng.gen_range(0..3)];
            let pad = rng.gen_range(0..2usize);
            let h = k + rng.gen_range(0..6) + 2;
            let w = k + rng.gen_range(0..6) + 2;
            let conv = bare_spec(
                vec![LayerSpec::Conv2d { in_channels: c, out: f, k, stride: 1, pad }],
                [c, h, w],
            );
            let report = count_macs(&conv, None).unwrap();
            assert_eq!(
                report.rows[0].macs,
                instrumented_conv_macs(c, f, k, h, w, 1, pad),
                "conv C={c} F={f} k={k} h={h} w={w} pad={pad}"
            );
            let dec = bare_spec(
                vec![LayerSpec::Decomposed {
                    in_channels: c,
                    l,
                    out: f,
                    k,
                    nl: crate::layers::Nonlinearity::Relu,
                    stride: 1,
                    pad,
                }],
                [c, h, w],
            );
            let report = count_macs(&dec, None).unwrap();
            assert_eq!(
                report.rows[0].macs,
                instrumented_decomposed_macs(c, l, f, k, h, w, 1, pad),
                "dec C={c} L={l} F={f} k={k} h={h} w={w} pad={pad}"
            );
        }
    }

    #[test]
    fn vgg_style_per_pixel_mac_ratio_is_1_5() {
        let conv = bare_spec(
            vec![LayerSpec::Conv2d { in_channels: 256, out: 256, k: 3, stride: 1, pad: 1 }],
            [256, 14, 14],
        );
        let dec = bare_spec(
            vec![LayerSpec::Decomposed {
                in_channels: 256,
                l: 256,
                out: 256,
                k: 3,
                nl: crate::layers::Nonlinearity::Relu,
                stride: 1,
                pad: 1,
            }],
            [256, 14, 14],
        );
        let a = count_macs(&conv, None).unwrap().rows[0].macs as f64;
        let b = count_macs(&dec, None).unwrap().rows[0].macs as f64;
        assert!((a / b - 1.5).abs() < 1e-9);
    }

    #[test]
    fn predicted_speedup_worked_cases() {
        assert!((predicted_speedup(256, 256, 3, 256) - 1.5).abs() < 1e-12);
        let first_layer = predicted_speedup(3, 64, 11, 64);
        assert!((first_layer - 2112.0 / 4288.0).abs() < 1e-12);
        assert!(first_layer < 1.0);
        // Break-even: L(C+F) == CFd exactly.
        assert!((predicted_speedup(4, 4, 2, 4) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn speedup_exceeds_one_iff_decomposed_work_is_smaller() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        for _ in 0..1000 {
            let c = rng.gen_range(1..64usize);
            let f = rng.gen_range(1..64usize);
            let d = rng.gen_range(1..12usize);
            let l = rng.gen_range(1..64usize);
            let faster = predicted_speedup(c, f, d, l) > 1.0;
            let condition = l * (c + f) < c * f * d;
            assert_eq!(faster, condition, "C={c} F={f} d={d} L={l}");
        }
    }

    #[test]
    fn totals_equal_sum_of_rows() {
        let spec = builtin("lenet-dec2").unwrap();
        let report = count_macs(&spec, None).unwrap();
        let macs: u64 = report.rows.iter().map(|r| r.macs).sum();
        let params: usize = report.rows.iter().map(|r| r.params).sum();
        assert_eq!(macs, report.total_macs);
        assert_eq!(params, report.total_params);
        assert_eq!(
            report.conv_params,
            report
                .rows
                .iter()
                .filter(|r| r.kind == "conv2d" || r.kind == "decomposed")
                .map(|r| r.params)
                .sum::<usize>()
        );
        assert_eq!(
            report.fc_params,
            report
                .rows
                .iter()
                .filter(|r| r.kind == "linear")
                .map(|r| r.params)
                .sum::<usize>()
        );
    }

    #[test]
    fn comparing_a_spec_with_itself_gives_unit_ratios() {
        let spec = builtin("lenet").unwrap();
        let cmp = compare_specs(&spec, &spec, None).unwrap();
        for metric in ["conv_params", "fc_params", "total_params", "total_macs"] {
            assert!((cmp.ratio(metric).unwrap() - 1.0).abs() < 1e-12, "{metric}");
        }
    }

    #[test]
    fn lenet_dec2_halves_conv_parameters_at_least() {
        let a = builtin("lenet").unwrap();
        let b = builtin("lenet-dec2").unwrap();
        let cmp = compare_specs(&a, &b, None).unwrap();
        assert!(cmp.ratio("conv_params").unwrap() >= 2.0);
    }

    #[test]
    fn decomposing_never_changes_output_shape_rows() {
        let a = builtin("cifar10-quick").unwrap();
        let b = builtin("cifar10-quick-dec3").unwrap();
        let ra = count_macs(&a, None).unwrap();
        let rb = count_macs(&b, None).unwrap();
        for (x, y) in ra.rows.iter().zip(&rb.rows) {
            assert_eq!(x.out_shape, y.out_shape);
        }
    }

    #[test]
    fn csv_shape_is_stable() {
        let spec = builtin("lenet").unwrap();
        let report = count_macs(&spec, None).unwrap();
        let csv = report_to_csv(&report);
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "layer,kind,params,macs,out_c,out_h,out_w"
        );
        let body: Vec<&str> = csv.lines().collect();
        assert!(body[body.len() - 3].starts_with("TOTAL_CONVP,,"));
        assert!(body[body.len() - 2].starts_with("TOTAL_FCP,,"));
        assert!(body[body.len() - 1].starts_with("TOTAL_MACS,,,"));
    }
}
