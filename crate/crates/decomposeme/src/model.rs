//! Declarative model specifications, built-in models, and the
//! structural transforms: per-layer decomposition and consecutive-layer
//! fusion.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::layers::{LayerSpec, Nonlinearity};

/// Classifier tail style.
///
/// `Full` appends hidden fully connected layers (sizes in
/// `ModelSpec::head_units`, each followed by ReLU) and the classifier;
/// `Compact` connects the last layer directly to one `num_classes`
/// unit layer; `CompactAvg` inserts global average pooling first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadStyle {
    Full,
    Compact,
    CompactAvg,
}

/// Ordered, declarative layer list plus input geometry and head style.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    /// (C, H, W) of one input sample.
    pub input_shape: [usize; 3],
    pub num_classes: usize,
    pub head: HeadStyle,
    /// Hidden layer sizes of the full head; ignored by compact heads.
    #[serde(default = "default_head_units", skip_serializing_if = "head_units_skipped")]
    pub head_units: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

fn default_head_units() -> Vec<usize> {
    vec![4096, 4096]
}

fn head_units_skipped(units: &[usize]) -> bool {
    units.is_empty()
}

/// One layer of the expanded (body + head) sequence with its resolved
/// input and output shapes, each as (C, H, W).
#[derive(Clone, Debug)]
pub struct ResolvedLayer {
    pub spec: LayerSpec,
    pub in_shape: [usize; 3],
    pub out_shape: [usize; 3],
}

impl ModelSpec {
    /// The body layers followed by the head layers the style implies.
    pub fn expanded_layers(&self) -> Vec<LayerSpec> {
        let mut layers = self.layers.clone();
        match self.head {
            HeadStyle::Full => {
                for &units in &self.head_units {
                    layers.push(LayerSpec::Linear { out: units });
                    layers.push(LayerSpec::Relu);
                }
                layers.push(LayerSpec::Linear {
                    out: self.num_classes,
                });
            }
            HeadStyle::Compact => {
                layers.push(LayerSpec::Linear {
                    out: self.num_classes,
                });
            }
            HeadStyle::CompactAvg => {
                layers.push(LayerSpec::AvgpoolGlobal);
                layers.push(LayerSpec::Linear {
                    out: self.num_classes,
                });
            }
        }
        layers
    }

    /// Validate extents, channel chaining and spatial chaining.
    pub fn validate(&self) -> Result<()> {
        self.resolve().map(|_| ())
    }

    /// Shape-propagate the expanded layer list from the input shape.
    pub fn resolve(&self) -> Result<Vec<ResolvedLayer>> {
        if self.layers.is_empty() {
            return Err(Error::Validation(format!(
                "model '{}' has an empty layer list",
                self.name
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::Validation("num_classes must be >= 2".into()));
        }
        if self.input_shape.iter().any(|&d| d == 0) {
            return Err(Error::Validation("input_shape extents must be >= 1".into()));
        }
        if self.head == HeadStyle::Full && self.head_units.iter().any(|&u| u == 0) {
            return Err(Error::Validation("head_units must be >= 1".into()));
        }

        let mut resolved = Vec::new();
        let mut shape = self.input_shape;
        for (idx, layer) in self.expanded_layers().into_iter().enumerate() {
            layer.validate()?;
            let [c, h, w] = shape;
            let out = match layer {
                LayerSpec::Conv2d {
                    in_channels,
                    out,
                    k,
                    stride,
                    pad,
                } => {
                    if in_channels != c {
                        return Err(Error::Validation(format!(
                            "layer {idx}: conv2d expects {in_channels} input channels but \
                             receives {c}"
                        )));
                    }
                    let oh = axis_extent(h, k, stride, pad, "height")
                        .map_err(|e| Error::Validation(format!("layer {idx}: {e}")))?;
                    let ow = axis_extent(w, k, stride, pad, "width")
                        .map_err(|e| Error::Validation(format!("layer {idx}: {e}")))?;
                    [out, oh, ow]
                }
                LayerSpec::Decomposed {
                    in_channels,
                    out,
                    k,
                    stride,
                    pad,
                    ..
                } => {
                    if in_channels != c {
                        return Err(Error::Validation(format!(
                            "layer {idx}: decomposed layer expects {in_channels} input channels \
                             but receives {c}"
                        )));
                    }
                    // Vertical stage strides/pads the height axis only,
                    // the horizontal stage the width axis only.
                    let oh = axis_extent(h, k, stride, pad, "height")
                        .map_err(|e| Error::Validation(format!("layer {idx}: {e}")))?;
                    let ow = axis_extent(w, k, stride, pad, "width")
                        .map_err(|e| Error::Validation(format!("layer {idx}: {e}")))?;
                    [out, oh, ow]
                }
                LayerSpec::Maxpool { k, stride } => {
                    let oh = pool_extent(h, k, stride)
                        .map_err(|e| Error::Validation(format!("layer {idx}: {e}")))?;
                    let ow = pool_extent(w, k, stride)
                        .map_err(|e| Error::Validation(format!("layer {idx}: {e}")))?;
                    [c, oh, ow]
                }
                LayerSpec::Linear { out } => [out, 1, 1],
                LayerSpec::AvgpoolGlobal => [c, 1, 1],
                LayerSpec::Relu | LayerSpec::Tanh | LayerSpec::Batchnorm => shape,
            };
            resolved.push(ResolvedLayer {
                spec: layer,
                in_shape: shape,
                out_shape: out,
            });
            shape = out;
        }
        Ok(resolved)
    }
}

fn axis_extent(input: usize, k: usize, stride: usize, pad: usize, axis: &str) -> Result<usize> {
    let padded = input + 2 * pad;
    if padded < k {
        return Err(Error::Config(format!(
            "{axis}: padded extent {padded} smaller than kernel {k}"
        )));
    }
    if (padded - k) % stride != 0 {
        return Err(Error::Config(format!(
            "{axis}: output extent ({padded} - {k})/{stride} + 1 is not an integer"
        )));
    }
    Ok((padded - k) / stride + 1)
}

fn pool_extent(input: usize, k: usize, stride: usize) -> Result<usize> {
    if input < k {
        return Err(Error::Config(format!(
            "input extent {input} smaller than pool window {k}"
        )));
    }
    if (input - k) % stride != 0 {
        return Err(Error::Config(format!(
            "pool output extent ({input} - {k})/{stride} + 1 is not an integer"
        )));
    }
    Ok((input - k) / stride + 1)
}

// ── Parsing ──────────────────────────────────────────────────────────

/// Parse a model-spec document (or resolve a built-in name).
///
/// The document is UTF-8 JSON; schema violations report a JSON pointer
/// to the offending element, and unknown keys are rejected.
pub fn parse_model_spec(text: &[u8]) -> Result<ModelSpec> {
    let as_str = std::str::from_utf8(text)
        .map_err(|e| Error::Format(format!("model spec is not UTF-8: {e}")))?;
    let trimmed = as_str.trim();
    if !trimmed.starts_with('{') {
        if let Some(spec) = builtin(trimmed) {
            return Ok(spec);
        }
        return Err(Error::Parse {
            pointer: "".into(),
            message: format!("'{trimmed}' is neither a built-in model name nor a JSON document"),
        });
    }
    let value: Value = serde_json::from_str(trimmed).map_err(|e| Error::Parse {
        pointer: "".into(),
        message: e.to_string(),
    })?;
    let spec = spec_from_value(&value)?;
    spec.validate()?;
    Ok(spec)
}

/// Canonical serialization: defaults materialized, stable field order,
/// two-space indentation.
pub fn serialize_model_spec(spec: &ModelSpec) -> String {
    let mut out = serde_json::to_string_pretty(spec).expect("model specs serialize");
    out.push('\n');
    out
}

fn spec_from_value(value: &Value) -> Result<ModelSpec> {
    let obj = expect_object(value, "")?;
    check_keys(
        obj,
        &["name", "input_shape", "num_classes", "head", "head_units", "layers"],
        "",
    )?;
    let name = require_string(obj, "name", "")?;
    let input_shape = {
        let arr = require_array(obj, "input_shape", "")?;
        if arr.len() != 3 {
            return Err(parse_err("/input_shape", "expected [C, H, W]"));
        }
        let mut dims = [0usize; 3];
        for (i, v) in arr.iter().enumerate() {
            dims[i] = usize_value(v, &format!("/input_shape/{i}"))?;
        }
        dims
    };
    let num_classes = usize_field(obj, "num_classes", "")?;
    let head = match require_string(obj, "head", "")?.as_str() {
        "full" => HeadStyle::Full,
        "compact" => HeadStyle::Compact,
        "compact_avg" => HeadStyle::CompactAvg,
        other => {
            return Err(parse_err(
                "/head",
                &format!("expected full|compact|compact_avg, found '{other}'"),
            ))
        }
    };
    let head_units = match obj.get("head_units") {
        None => {
            if head == HeadStyle::Full {
                default_head_units()
            } else {
                Vec::new()
            }
        }
        Some(v) => {
            let arr = v
                .as_array()
                .ok_or_else(|| parse_err("/head_units", "expected an array"))?;
            let mut units = Vec::new();
            for (i, u) in arr.iter().enumerate() {
                units.push(usize_value(u, &format!("/head_units/{i}"))?);
            }
            units
        }
    };
    let layers_value = require_array(obj, "layers", "")?;
    let mut layers = Vec::new();
    for (i, v) in layers_value.iter().enumerate() {
        layers.push(layer_from_value(v, &format!("/layers/{i}"))?);
    }
    Ok(ModelSpec {
        name,
        input_shape,
        num_classes,
        head,
        head_units,
        layers,
    })
}

fn layer_from_value(value: &Value, at: &str) -> Result<LayerSpec> {
    let obj = expect_object(value, at)?;
    let kind = require_string(obj, "kind", at)?;
    let layer = match kind.as_str() {
        "conv2d" => {
            check_keys(obj, &["kind", "in", "out", "k", "stride", "pad"], at)?;
            LayerSpec::Conv2d {
                in_channels: usize_field(obj, "in", at)?,
                out: usize_field(obj, "out", at)?,
                k: usize_field(obj, "k", at)?,
                stride: optional_usize(obj, "stride", at)?.unwrap_or(1),
                pad: optional_usize(obj, "pad", at)?.unwrap_or(0),
            }
        }
        "decomposed" => {
            check_keys(obj, &["kind", "in", "L", "out", "k", "nl", "stride", "pad"], at)?;
            let nl = match obj.get("nl") {
                None => Nonlinearity::Relu,
                Some(v) => match v.as_str() {
                    Some("relu") => Nonlinearity::Relu,
                    Some("tanh") => Nonlinearity::Tanh,
                    Some("identity") => Nonlinearity::Identity,
                    _ => {
                        return Err(parse_err(
                            &format!("{at}/nl"),
                            "expected relu|tanh|identity",
                        ))
                    }
                },
            };
            LayerSpec::Decomposed {
                in_channels: usize_field(obj, "in", at)?,
                l: usize_field(obj, "L", at)?,
                out: usize_field(obj, "out", at)?,
                k: usize_field(obj, "k", at)?,
                nl,
                stride: optional_usize(obj, "stride", at)?.unwrap_or(1),
                pad: optional_usize(obj, "pad", at)?.unwrap_or(0),
            }
        }
        "relu" => {
            check_keys(obj, &["kind"], at)?;
            LayerSpec::Relu
        }
        "tanh" => {
            check_keys(obj, &["kind"], at)?;
            LayerSpec::Tanh
        }
        "maxpool" => {
            check_keys(obj, &["kind", "k", "stride"], at)?;
            LayerSpec::Maxpool {
                k: usize_field(obj, "k", at)?,
                stride: usize_field(obj, "stride", at)?,
            }
        }
        "batchnorm" => {
            check_keys(obj, &["kind"], at)?;
            LayerSpec::Batchnorm
        }
        "linear" => {
            check_keys(obj, &["kind", "out"], at)?;
            LayerSpec::Linear {
                out: usize_field(obj, "out", at)?,
            }
        }
        "avgpool_global" => {
            check_keys(obj, &["kind"], at)?;
            LayerSpec::AvgpoolGlobal
        }
        other => {
            return Err(parse_err(
                &format!("{at}/kind"),
                &format!("unknown layer kind '{other}'"),
            ))
        }
    };
    Ok(layer)
}

fn parse_err(pointer: &str, message: &str) -> Error {
    Error::Parse {
        pointer: pointer.to_string(),
        message: message.to_string(),
    }
}

fn expect_object<'v>(
    value: &'v Value,
    at: &str,
) -> Result<&'v serde_json::Map<String, Value>> {
    value
        .as_object()
        .ok_or_else(|| parse_err(at, "expected an object"))
}

fn check_keys(
    obj: &serde_json::Map<String, Value>,
    allowed: &[&str],
    at: &str,
) -> Result<()> {
    for key in obj.keys() {
        if !allowed.contains(&key.as_str()) {
            return Err(parse_err(&format!("{at}/{key}"), "unknown key"));
        }
    }
    Ok(())
}

fn require_string(
    obj: &serde_json::Map<String, Value>,
    key: &str,
    at: &str,
) -> Result<String> {
    obj.get(key)
        .ok_or_else(|| parse_err(&format!("{at}/{key}"), "missing required key"))?
        .as_str()
        .map(str::to_string)
        .ok_or_else(|| parse_err(&format!("{at}/{key}"), "expected a string"))
}

fn require_array<'v>(
    obj: &'v serde_json::Map<String, Value>,
    key: &str,
    at: &str,
) -> Result<&'v Vec<Value>> {
    obj.get(key)
        .ok_or_else(|| parse_err(&format!("{at}/{key}"), "missing required key"))?
        .as_array()
        .ok_or_else(|| parse_err(&format!("{at}/{key}"), "expected an array"))
}

fn usize_field(obj: &serde_json::Map<String, Value>, key: &str, at: &str) -> Result<usize> {
    let v = obj
        .get(key)
        .ok_or_else(|| parse_err(&format!("{at}/{key}"), "missing required key"))?;
    usize_value(v, &format!("{at}/{key}"))
}

fn optional_usize(
    obj: &serde_json::Map<String, Value>,
    key: &str,
    at: &str,
) -> Result<Option<usize>> {
    match obj.get(key) {
        None => Ok(None),
        Some(v) => usize_value(v, &format!("{at}/{key}")).map(Some),
    }
}

fn usize_value(v: &Value, at: &str) -> Result<usize> {
    v.as_u64()
        .map(|x| x as usize)
        .ok_or_else(|| parse_err(at, "expected a non-negative integer"))
}

// ── Built-in models ──────────────────────────────────────────────────

/// Names that [`parse_model_spec`] resolves without a document.
pub const BUILTIN_NAMES: &[&str] = &[
    "lenet",
    "lenet-dec1",
    "lenet-dec2",
    "lenet-dec2k9",
    "cifar10-quick",
    "cifar10-quick5",
    "cifar10-quick-dec1",
    "cifar10-quick-dec3",
];

/// Resolve a built-in model by name.
pub fn builtin(name: &str) -> Option<ModelSpec> {
    let spec = match name {
        "lenet" => lenet(),
        "lenet-dec1" => {
            let mut spec = decompose_model(&lenet(), &[0], &LPolicy::MatchOutput).ok()?;
            spec.name = "lenet-dec1".into();
            spec
        }
        "lenet-dec2" => {
            let mut mapping = BTreeMap::new();
            mapping.insert(0usize, 8usize);
            mapping.insert(2usize, 24usize);
            let mut spec =
                decompose_model(&lenet(), &[0, 2], &LPolicy::Explicit(mapping)).ok()?;
            spec.name = "lenet-dec2".into();
            spec
        }
        "lenet-dec2k9" => lenet_dec2k9(),
        "cifar10-quick" => cifar10_quick(),
        "cifar10-quick5" => cifar10_quick5(),
        "cifar10-quick-dec1" => {
            let mut spec =
                decompose_model(&cifar10_quick(), &[0], &LPolicy::MatchOutput).ok()?;
            spec.name = "cifar10-quick-dec1".into();
            spec
        }
        "cifar10-quick-dec3" => {
            let mut spec =
                decompose_model(&cifar10_quick(), &[0, 3, 6], &LPolicy::MatchOutput).ok()?;
            spec.name = "cifar10-quick-dec3".into();
            spec
        }
        _ => return None,
    };
    Some(spec)
}

fn lenet() -> ModelSpec {
    ModelSpec {
        name: "lenet".into(),
        input_shape: [1, 28, 28],
        num_classes: 10,
        head: HeadStyle::Full,
        head_units: vec![500],
        layers: vec![
            LayerSpec::Conv2d {
                in_channels: 1,
                out: 20,
                k: 5,
                stride: 1,
                pad: 0,
            },
            LayerSpec::Maxpool { k: 2, stride: 2 },
            LayerSpec::Conv2d {
                in_channels: 20,
                out: 50,
                k: 5,
                stride: 1,
                pad: 0,
            },
            LayerSpec::Maxpool { k: 2, stride: 2 },
        ],
    }
}

fn lenet_dec2k9() -> ModelSpec {
    // Same spatial flow as lenet: 9x9 kernels with padding 2 give the
    // same output extents as 5x5 kernels with no padding.
    ModelSpec {
        name: "lenet-dec2k9".into(),
        input_shape: [1, 28, 28],
        num_classes: 10,
        head: HeadStyle::Full,
        head_units: vec![500],
        layers: vec![
            LayerSpec::Decomposed {
                in_channels: 1,
                l: 8,
                out: 20,
                k: 9,
                nl: Nonlinearity::Relu,
                stride: 1,
                pad: 2,
            },
            LayerSpec::Maxpool { k: 2, stride: 2 },
            LayerSpec::Decomposed {
                in_channels: 20,
                l: 24,
                out: 50,
                k: 9,
                nl: Nonlinearity::Relu,
                stride: 1,
                pad: 2,
            },
            LayerSpec::Maxpool { k: 2, stride: 2 },
        ],
    }
}

fn cifar10_quick() -> ModelSpec {
    ModelSpec {
        name: "cifar10-quick".into(),
        input_shape: [3, 32, 32],
        num_classes: 10,
        head: HeadStyle::Compact,
        head_units: Vec::new(),
        layers: vec![
            LayerSpec::Conv2d {
                in_channels: 3,
                out: 32,
                k: 5,
                stride: 1,
                pad: 2,
            },
            LayerSpec::Relu,
            LayerSpec::Maxpool { k: 2, stride: 2 },
            LayerSpec::Conv2d {
                in_channels: 32,
                out: 32,
                k: 5,
                stride: 1,
                pad: 2,
            },
            LayerSpec::Relu,
            LayerSpec::Maxpool { k: 2, stride: 2 },
            LayerSpec::Conv2d {
                in_channels: 32,
                out: 64,
                k: 5,
                stride: 1,
                pad: 2,
            },
            LayerSpec::Relu,
            LayerSpec::Maxpool { k: 2, stride: 2 },
            LayerSpec::Linear { out: 64 },
            LayerSpec::Relu,
        ],
    }
}

fn cifar10_quick5() -> ModelSpec {
    ModelSpec {
        name: "cifar10-quick5".into(),
        input_shape: [3, 32, 32],
        num_classes: 10,
        head: HeadStyle::Compact,
        head_units: Vec::new(),
        layers: vec![
            LayerSpec::Conv2d {
                in_channels: 3,
                out: 32,
                k: 5,
                stride: 1,
                pad: 2,
            },
            LayerSpec::Relu,
            LayerSpec::Maxpool { k: 2, stride: 2 },
            LayerSpec::Conv2d {
                in_channels: 32,
                out: 32,
                k: 5,
                stride: 1,
                pad: 2,
            },
            LayerSpec::Relu,
            LayerSpec::Conv2d {
                in_channels: 32,
                out: 32,
                k: 5,
                stride: 1,
                pad: 2,
            },
            LayerSpec::Relu,
            LayerSpec::Maxpool { k: 2, stride: 2 },
            LayerSpec::Conv2d {
                in_channels: 32,
                out: 64,
                k: 5,
                stride: 1,
                pad: 2,
            },
            LayerSpec::Relu,
            LayerSpec::Conv2d {
                in_channels: 64,
                out: 64,
                k: 5,
                stride: 1,
                pad: 2,
            },
            LayerSpec::Relu,
            LayerSpec::Maxpool { k: 2, stride: 2 },
            LayerSpec::Linear { out: 64 },
            LayerSpec::Relu,
        ],
    }
}

// ── Structural transforms ────────────────────────────────────────────

/// How the intermediate channel count L is chosen when decomposing.
#[derive(Clone, Debug)]
pub enum LPolicy {
    /// `L = F`: keep the layer's output filter count through the
    /// intermediate stage.
    MatchOutput,
    /// Explicit L per layer index.
    Explicit(BTreeMap<usize, usize>),
}

/// Replace the selected conv2d layers with decomposed layers (ReLU
/// in-between); unselected layers are untouched.
pub fn decompose_model(
    spec: &ModelSpec,
    layer_indices: &[usize],
    policy: &LPolicy,
) -> Result<ModelSpec> {
    let mut out = spec.clone();
    for &idx in layer_indices {
        let Some(layer) = out.layers.get(idx) else {
            return Err(Error::Input(format!(
                "layer index {idx} is out of range (model has {} layers)",
                out.layers.len()
            )));
        };
        let LayerSpec::Conv2d {
            in_channels,
            out: filters,
            k,
            stride,
            pad,
        } = *layer
        else {
            return Err(Error::Input(format!(
                "layer {idx} is not a conv2d layer and cannot be decomposed"
            )));
        };
        let l = match policy {
            LPolicy::MatchOutput => filters,
            LPolicy::Explicit(map) => *map.get(&idx).ok_or_else(|| {
                Error::Input(format!("no explicit L given for layer {idx}"))
            })?,
        };
        if l < 1 {
            return Err(Error::Input(format!("layer {idx}: L must be >= 1")));
        }
        out.layers[idx] = LayerSpec::Decomposed {
            in_channels,
            l,
            out: filters,
            k,
            nl: Nonlinearity::Relu,
            stride,
            pad,
        };
    }
    out.validate()?;
    Ok(out)
}

/// Fuse a contiguous run of stride-1 conv2d layers (ReLU interleaving
/// allowed) into one decomposed layer whose kernel preserves the
/// receptive field: `d = sum(k_i - 1) + 1`, padding the sum of the
/// originals, `L` the group's output channel count. Weights are freshly
/// initialized later; the fusion is structural.
pub fn fuse_consecutive(
    spec: &ModelSpec,
    range: std::ops::Range<usize>,
) -> Result<ModelSpec> {
    if range.start >= range.end || range.end > spec.layers.len() {
        return Err(Error::Input(format!(
            "fuse range {range:?} is empty or out of bounds (model has {} layers)",
            spec.layers.len()
        )));
    }
    let mut first_in = None;
    let mut last_out = None;
    let mut fused_k = 1usize;
    let mut fused_pad = 0usize;
    let mut convs = 0usize;
    for idx in range.clone() {
        match spec.layers[idx] {
            LayerSpec::Conv2d {
                in_channels,
                out,
                k,
                stride,
                pad,
            } => {
                if stride != 1 {
                    return Err(Error::Input(format!(
                        "layer {idx} has stride {stride}; only stride-1 groups fuse"
                    )));
                }
                if first_in.is_none() {
                    first_in = Some(in_channels);
                }
                last_out = Some(out);
                fused_k += k - 1;
                fused_pad += pad;
                convs += 1;
            }
            LayerSpec::Relu => {}
            ref other => {
                return Err(Error::Input(format!(
                    "layer {idx} ({other:?}) cannot be part of a fused convolution group"
                )));
            }
        }
    }
    if convs == 0 {
        return Err(Error::Input("fuse range contains no conv2d layer".into()));
    }

    let fused = LayerSpec::Decomposed {
        in_channels: first_in.expect("at least one conv"),
        l: last_out.expect("at least one conv"),
        out: last_out.expect("at least one conv"),
        k: fused_k,
        nl: Nonlinearity::Relu,
        stride: 1,
        pad: fused_pad,
    };
    let mut out = spec.clone();
    out.layers.splice(range, [fused]);
    out.validate()?;
    Ok(out)
}

/// Receptive-field extent of one output activation of layer
/// `layer_index` (an index into `spec.layers`), measured in input
/// pixels. A decomposed layer counts as its two 1D stages; vertical and
/// horizontal extents are tracked separately and the larger is
/// returned.
pub fn receptive_field(spec: &ModelSpec, layer_index: usize) -> Result<usize> {
    if layer_index >= spec.layers.len() {
        return Err(Error::Input(format!(
            "layer index {layer_index} out of range (model has {} layers)",
            spec.layers.len()
        )));
    }
    let mut rf_v = 1usize;
    let mut rf_h = 1usize;
    let mut jump_v = 1usize;
    let mut jump_h = 1usize;
    for layer in &spec.layers[..=layer_index] {
        match *layer {
            LayerSpec::Conv2d { k, stride, .. } => {
                rf_v += (k - 1) * jump_v;
                rf_h += (k - 1) * jump_h;
                jump_v *= stride;
                jump_h *= stride;
            }
            LayerSpec::Decomposed { k, stride, .. } => {
                // Vertical stage.
                rf_v += (k - 1) * jump_v;
                jump_v *= stride;
                // Horizontal stage.
                rf_h += (k - 1) * jump_h;
                jump_h *= stride;
            }
            LayerSpec::Maxpool { k, stride } => {
                rf_v += (k - 1) * jump_v;
                rf_h += (k - 1) * jump_h;
                jump_v *= stride;
                jump_h *= stride;
            }
            LayerSpec::Relu | LayerSpec::Tanh | LayerSpec::Batchnorm => {}
            LayerSpec::Linear { .. } | LayerSpec::AvgpoolGlobal => {
                return Err(Error::Input(
                    "receptive field is defined for the spatial stack only".into(),
                ));
            }
        }
    }
    Ok(rf_v.max(rf_h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops;
    use crate::tensor::Tensor;

    #[test]
    fn builtins_resolve_and_validate() {
        for name in BUILTIN_NAMES {
            let spec = builtin(name).unwrap_or_else(|| panic!("missing builtin {name}"));
            assert_eq!(&spec.name, name);
            spec.validate().unwrap_or_else(|e| panic!("{name}: {e}"));
        }
    }

    #[test]
    fn lenet_shape_flow() {
        let spec = builtin("lenet").unwrap();
        let resolved = spec.resolve().unwrap();
        // conv -> pool -> conv -> pool -> fc500 -> relu -> fc10
        assert_eq!(resolved[0].out_shape, [20, 24, 24]);
        assert_eq!(resolved[1].out_shape, [20, 12, 12]);
        assert_eq!(resolved[2].out_shape, [50, 8, 8]);
        assert_eq!(resolved[3].out_shape, [50, 4, 4]);
        assert_eq!(resolved[4].out_shape, [500, 1, 1]);
        assert_eq!(resolved.last().unwrap().out_shape, [10, 1, 1]);
    }

    #[test]
    fn dec_variants_preserve_every_output_shape() {
        let base = builtin("lenet").unwrap().resolve().unwrap();
        for name in ["lenet-dec1", "lenet-dec2", "lenet-dec2k9"] {
            let dec = builtin(name).unwrap().resolve().unwrap();
            assert_eq!(base.len(), dec.len(), "{name}");
            for (b, d) in base.iter().zip(&dec) {
                assert_eq!(b.out_shape, d.out_shape, "{name}");
            }
        }
    }

    #[test]
    fn parse_resolves_builtin_names() {
        let spec = parse_model_spec(b"lenet").unwrap();
        assert_eq!(spec.name, "lenet");
        assert_eq!(spec.layers.len(), 4);
    }

    #[test]
    fn empty_layer_list_is_a_validation_error() {
        let doc = br#"{"name":"x","input_shape":[1,8,8],"num_classes":2,"head":"compact","layers":[]}"#;
        assert!(matches!(
            parse_model_spec(doc),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn unknown_keys_are_rejected_with_a_pointer() {
        let doc = br#"{"name":"x","input_shape":[1,8,8],"num_classes":2,"head":"compact",
                       "layers":[{"kind":"relu","bogus":1}]}"#;
        match parse_model_spec(doc) {
            Err(Error::Parse { pointer, .. }) => assert_eq!(pointer, "/layers/0/bogus"),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn inconsistent_channels_are_a_validation_error() {
        let doc = br#"{"name":"x","input_shape":[1,8,8],"num_classes":2,"head":"compact",
                       "layers":[{"kind":"conv2d","in":3,"out":4,"k":3}]}"#;
        match parse_model_spec(doc) {
            Err(Error::Validation(msg)) => assert!(msg.contains("layer 0"), "{msg}"),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn serialize_then_parse_round_trips() {
        for name in BUILTIN_NAMES {
            let spec = builtin(name).unwrap();
            let text = serialize_model_spec(&spec);
            let back = parse_model_spec(text.as_bytes()).unwrap();
            assert_eq!(spec, back, "{name}");
        }
    }

    #[test]
    fn decompose_model_with_empty_index_set_is_identity() {
        let spec = builtin("lenet").unwrap();
        let out = decompose_model(&spec, &[], &LPolicy::MatchOutput).unwrap();
        assert_eq!(spec, out);
    }

    #[test]
    fn decompose_model_match_output_drops_parameters_on_lenet() {
        let spec = builtin("lenet").unwrap();
        let dec = decompose_model(&spec, &[0, 2], &LPolicy::MatchOutput).unwrap();
        let count = |s: &ModelSpec| -> usize {
            s.resolve()
                .unwrap()
                .iter()
                .map(|r| crate::layers::layer_param_count(&r.spec, r.in_shape[0]))
                .sum()
        };
        // Conv-stack totals only (the head is unchanged).
        let conv_count = |s: &ModelSpec| -> usize {
            s.resolve()
                .unwrap()
                .iter()
                .filter(|r| {
                    matches!(
                        r.spec,
                        LayerSpec::Conv2d { .. } | LayerSpec::Decomposed { .. }
                    )
                })
                .map(|r| crate::layers::layer_param_count(&r.spec, r.in_shape[0]))
                .sum()
        };
        assert!(conv_count(&dec) < conv_count(&spec));
        assert!(count(&dec) < count(&spec));
    }

    #[test]
    fn decompose_model_rejects_non_conv_targets() {
        let spec = builtin("lenet").unwrap();
        assert!(matches!(
            decompose_model(&spec, &[1], &LPolicy::MatchOutput),
            Err(Error::Input(_))
        ));
        assert!(matches!(
            decompose_model(&spec, &[9], &LPolicy::MatchOutput),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn vgg_style_decomposition_parameter_arithmetic() {
        // One 256->256 3x3 conv, decomposed with L=256.
        let doc = ModelSpec {
            name: "one".into(),
            input_shape: [256, 16, 16],
            num_classes: 10,
            head: HeadStyle::Compact,
            head_units: Vec::new(),
            layers: vec![LayerSpec::Conv2d {
                in_channels: 256,
                out: 256,
                k: 3,
                stride: 1,
                pad: 1,
            }],
        };
        let dec = decompose_model(&doc, &[0], &LPolicy::MatchOutput).unwrap();
        let base_params = crate::layers::layer_param_count(&doc.layers[0], 256);
        let dec_params = crate::layers::layer_param_count(&dec.layers[0], 256);
        assert_eq!(base_params, 590_080);
        // L*C*d + L + F*L*d + F = 2*196608 + 512.
        assert_eq!(dec_params, 393_728);
        assert!(dec_params < base_params);
    }

    #[test]
    fn fuse_four_three_by_three_layers_gives_nine() {
        let spec = ModelSpec {
            name: "chain".into(),
            input_shape: [8, 20, 20],
            num_classes: 2,
            head: HeadStyle::Compact,
            head_units: Vec::new(),
            layers: vec![
                LayerSpec::Conv2d { in_channels: 8, out: 8, k: 3, stride: 1, pad: 1 },
                LayerSpec::Relu,
                LayerSpec::Conv2d { in_channels: 8, out: 8, k: 3, stride: 1, pad: 1 },
                LayerSpec::Relu,
                LayerSpec::Conv2d { in_channels: 8, out: 8, k: 3, stride: 1, pad: 1 },
                LayerSpec::Relu,
                LayerSpec::Conv2d { in_channels: 8, out: 16, k: 3, stride: 1, pad: 1 },
            ],
        };
        let fused = fuse_consecutive(&spec, 0..7).unwrap();
        assert_eq!(fused.layers.len(), 1);
        match fused.layers[0] {
            LayerSpec::Decomposed { k, l, out, in_channels, pad, .. } => {
                assert_eq!(k, 9);
                assert_eq!(l, 16);
                assert_eq!(out, 16);
                assert_eq!(in_channels, 8);
                assert_eq!(pad, 4);
            }
            ref other => panic!("expected decomposed, got {other:?}"),
        }
        // Receptive field at the group boundary is preserved exactly.
        assert_eq!(
            receptive_field(&spec, 6).unwrap(),
            receptive_field(&fused, 0).unwrap()
        );
        assert_eq!(receptive_field(&fused, 0).unwrap(), 9);
    }

    #[test]
    fn fuse_two_three_by_three_layers_gives_five() {
        let spec = ModelSpec {
            name: "chain".into(),
            input_shape: [4, 12, 12],
            num_classes: 2,
            head: HeadStyle::Compact,
            head_units: Vec::new(),
            layers: vec![
                LayerSpec::Conv2d { in_channels: 4, out: 4, k: 3, stride: 1, pad: 1 },
                LayerSpec::Relu,
                LayerSpec::Conv2d { in_channels: 4, out: 4, k: 3, stride: 1, pad: 1 },
            ],
        };
        let fused = fuse_consecutive(&spec, 0..3).unwrap();
        match fused.layers[0] {
            LayerSpec::Decomposed { k, .. } => assert_eq!(k, 5),
            ref other => panic!("expected decomposed, got {other:?}"),
        }
    }

    #[test]
    fn fuse_single_layer_keeps_kernel_size() {
        let spec = ModelSpec {
            name: "one".into(),
            input_shape: [4, 12, 12],
            num_classes: 2,
            head: HeadStyle::Compact,
            head_units: Vec::new(),
            layers: vec![LayerSpec::Conv2d {
                in_channels: 4,
                out: 6,
                k: 5,
                stride: 1,
                pad: 2,
            }],
        };
        let fused = fuse_consecutive(&spec, 0..1).unwrap();
        match fused.layers[0] {
            LayerSpec::Decomposed { k, .. } => assert_eq!(k, 5),
            ref other => panic!("expected decomposed, got {other:?}"),
        }
    }

    #[test]
    fn fuse_rejects_strided_and_non_conv_groups() {
        let spec = ModelSpec {
            name: "bad".into(),
            input_shape: [4, 12, 12],
            num_classes: 2,
            head: HeadStyle::Compact,
            head_units: Vec::new(),
            layers: vec![
                LayerSpec::Conv2d { in_channels: 4, out: 4, k: 3, stride: 2, pad: 1 },
                LayerSpec::Maxpool { k: 2, stride: 2 },
            ],
        };
        assert!(matches!(
            fuse_consecutive(&spec, 0..1),
            Err(Error::Input(_))
        ));
        assert!(matches!(
            fuse_consecutive(&spec, 1..2),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn receptive_field_base_cases() {
        let single = ModelSpec {
            name: "single".into(),
            input_shape: [1, 12, 12],
            num_classes: 2,
            head: HeadStyle::Compact,
            head_units: Vec::new(),
            layers: vec![LayerSpec::Conv2d {
                in_channels: 1,
                out: 1,
                k: 5,
                stride: 1,
                pad: 0,
            }],
        };
        assert_eq!(receptive_field(&single, 0).unwrap(), 5);
    }

    /// Brute-force influence-extent oracle: forward an actual network
    /// twice, perturbing one input pixel, and record which outputs move.
    fn measured_rf(layers: &[LayerSpec], input_hw: usize) -> usize {
        let run = |input: &Tensor| -> Tensor {
            let mut x = input.clone();
            for layer in layers {
                x = match *layer {
                    LayerSpec::Conv2d { in_channels, out, k, stride, pad } => {
                        let mut bank =
                            ops::KernelBank2D::new(out, in_channels, k, k, stride, pad).unwrap();
                        bank.weights_mut().fill(1.0);
                        ops::conv2d(&x, &bank).unwrap()
                    }
                    LayerSpec::Maxpool { k, stride } => ops::maxpool(&x, k, stride).unwrap().0,
                    _ => panic!("oracle handles conv/pool chains only"),
                };
            }
            x
        };
        // Strictly positive, distinct base values so every max is unique
        // and any in-field positive perturbation must propagate.
        let base = Tensor::from_vec(
            [1, 1, input_hw, input_hw],
            (0..input_hw * input_hw)
                .map(|i| 1.0 + (i as f32) * 1e-4)
                .collect(),
        )
        .unwrap();
        let reference = run(&base);
        let [_, _, oh, ow] = reference.shape();
        let (coh, cow) = (oh / 2, ow / 2);
        let mut cols = Vec::new();
        for px in 0..input_hw {
            let mut probe = base.clone();
            probe.set(0, 0, input_hw / 2, px, probe.at(0, 0, input_hw / 2, px) + 1000.0);
            let out = run(&probe);
            if (out.at(0, 0, coh, cow) - reference.at(0, 0, coh, cow)).abs() > 1e-3 {
                cols.push(px);
            }
        }
        cols.len()
    }

    #[test]
    fn receptive_field_matches_brute_force_oracle() {
        let chain = vec![
            LayerSpec::Conv2d { in_channels: 1, out: 1, k: 3, stride: 1, pad: 0 },
            LayerSpec::Maxpool { k: 2, stride: 2 },
            LayerSpec::Conv2d { in_channels: 1, out: 1, k: 3, stride: 1, pad: 0 },
        ];
        let spec = ModelSpec {
            name: "chain".into(),
            input_shape: [1, 22, 22],
            num_classes: 2,
            head: HeadStyle::Compact,
            head_units: Vec::new(),
            layers: chain.clone(),
        };
        let analytic = receptive_field(&spec, 2).unwrap();
        let measured = measured_rf(&chain, 22);
        assert_eq!(analytic, measured);
        assert_eq!(analytic, 8);
    }
}
