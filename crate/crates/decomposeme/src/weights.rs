//! Weight serialization in the DMW1 container.
//!
//! Layout: magic bytes `D M W 1`; little-endian u32 layer count; per
//! layer a u16 name length plus UTF-8 name and a u8 tensor count; per
//! tensor a u8 rank, `rank` u32 dims, and the row-major f32 payload.
//! Round trips preserve every 32-bit pattern.

use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::net::{instantiate, InitScheme, Model, RtLayer};

const MAGIC: &[u8; 4] = b"DMW1";

struct TensorRecord<'a> {
    dims: Vec<u32>,
    data: &'a [f32],
}

fn layer_tensors(layer: &RtLayer) -> Vec<TensorRecord<'_>> {
    match layer {
        RtLayer::Conv2d(bank) => vec![
            TensorRecord {
                dims: vec![
                    bank.filters() as u32,
                    bank.in_channels() as u32,
                    bank.kernel_h() as u32,
                    bank.kernel_w() as u32,
                ],
                data: bank.weights(),
            },
            TensorRecord {
                dims: vec![bank.bias().len() as u32],
                data: bank.bias(),
            },
        ],
        RtLayer::Decomposed(d) => {
            let (v_dims, h_dims) = if d.horizontal_first() {
                (
                    vec![d.filters() as u32, d.mid_channels() as u32, d.kernel_v() as u32, 1],
                    vec![d.mid_channels() as u32, d.in_channels() as u32, 1, d.kernel_h() as u32],
                )
            } else {
                (
                    vec![d.mid_channels() as u32, d.in_channels() as u32, d.kernel_v() as u32, 1],
                    vec![d.filters() as u32, d.mid_channels() as u32, 1, d.kernel_h() as u32],
                )
            };
            vec![
                TensorRecord { dims: v_dims, data: d.vertical() },
                TensorRecord { dims: h_dims, data: d.horizontal() },
                TensorRecord {
                    dims: vec![d.bias_mid().len() as u32],
                    data: d.bias_mid(),
                },
                TensorRecord {
                    dims: vec![d.bias_out().len() as u32],
                    data: d.bias_out(),
                },
            ]
        }
        RtLayer::Batchnorm(bn) => vec![
            TensorRecord { dims: vec![bn.gamma.len() as u32], data: &bn.gamma },
            TensorRecord { dims: vec![bn.beta.len() as u32], data: &bn.beta },
            TensorRecord { dims: vec![bn.running_mean.len() as u32], data: &bn.running_mean },
            TensorRecord { dims: vec![bn.running_var.len() as u32], data: &bn.running_var },
        ],
        RtLayer::Linear { weights, bias, in_len, out_len } => vec![
            TensorRecord {
                dims: vec![*out_len as u32, *in_len as u32],
                data: weights,
            },
            TensorRecord { dims: vec![bias.len() as u32], data: bias },
        ],
        RtLayer::Relu | RtLayer::Tanh | RtLayer::Maxpool { .. } | RtLayer::AvgpoolGlobal => {
            Vec::new()
        }
    }
}

fn layer_name(layer: &RtLayer, idx: usize) -> String {
    format!("{}{}", layer.kind_name(), idx)
}

/// Serialize a model's parameters.
pub fn save_weights(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend((model.layers().len() as u32).to_le_bytes());
    for (idx, layer) in model.layers().iter().enumerate() {
        let name = layer_name(layer, idx);
        out.extend((name.len() as u16).to_le_bytes());
        out.extend(name.as_bytes());
        let tensors = layer_tensors(layer);
        out.push(tensors.len() as u8);
        for t in tensors {
            out.push(t.dims.len() as u8);
            for d in &t.dims {
                out.extend(d.to_le_bytes());
            }
            for v in t.data {
                out.extend(v.to_bits().to_le_bytes());
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "weight file truncated at byte {} while reading {what}",
                self.bytes.len()
            )));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Deserialize weights into a model of the given spec; every tensor
/// shape must match the spec exactly.
pub fn load_weights(bytes: &[u8], spec: &ModelSpec) -> Result<Model> {
    let mut model = instantiate(spec, InitScheme::Kaiming, 0)?;
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:02x?}; expected 'DMW1'",
            magic
        )));
    }
    let layer_count = r.u32("layer count")? as usize;
    if layer_count != model.layers().len() {
        return Err(Error::Format(format!(
            "file has {layer_count} layers but the spec expands to {}",
            model.layers().len()
        )));
    }
    for idx in 0..layer_count {
        let expected_name = layer_name(&model.layers()[idx], idx);
        let name_len = r.u16(&format!("name length of layer {idx}"))? as usize;
        let name_bytes = r.take(name_len, &format!("name of layer {idx}"))?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|_| Error::Format(format!("layer {idx} name is not UTF-8")))?;
        if name != expected_name {
            return Err(Error::Format(format!(
                "layer {idx} is '{name}' in the file but the spec expects '{expected_name}'"
            )));
        }
        let tensor_count = r.u8(&format!("tensor count of {name}"))? as usize;
        let mut buffers: Vec<Vec<f32>> = Vec::with_capacity(tensor_count);
        let mut dims_list: Vec<Vec<u32>> = Vec::with_capacity(tensor_count);
        for t in 0..tensor_count {
            let what = format!("tensor {t} of {name}");
            let rank = r.u8(&what)? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u32(&what)?);
            }
            let len: usize = dims.iter().map(|&d| d as usize).product();
            let payload = r.take(len * 4, &what)?;
            let data = payload
                .chunks_exact(4)
                .map(|b| f32::from_bits(u32::from_le_bytes([b[0], b[1], b[2], b[3]])))
                .collect();
            buffers.push(data);
            dims_list.push(dims);
        }
        apply_tensors(&mut model.layers_mut()[idx], &expected_name, dims_list, buffers)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after the last layer",
            bytes.len() - r.pos
        )));
    }
    Ok(model)
}

fn apply_tensors(
    layer: &mut RtLayer,
    name: &str,
    dims: Vec<Vec<u32>>,
    data: Vec<Vec<f32>>,
) -> Result<()> {
    let expected: Vec<(Vec<u32>, usize)> = layer_tensors(layer)
        .iter()
        .map(|t| (t.dims.clone(), t.data.len()))
        .collect();
    if dims.len() != expected.len() {
        return Err(Error::Format(format!(
            "{name}: file holds {} tensors, layer has {}",
            dims.len(),
            expected.len()
        )));
    }
    for (t, ((got_dims, buf), (want_dims, want_len))) in
        dims.iter().zip(&data).zip(&expected).enumerate()
    {
        if got_dims != want_dims || buf.len() != *want_len {
            return Err(Error::Format(format!(
                "{name}: tensor {t} has dims {got_dims:?}, expected {want_dims:?}"
            )));
        }
    }
    let mut it = data.into_iter();
    let mut next = || it.next().expect("tensor count checked");
    match layer {
        RtLayer::Conv2d(bank) => {
            bank.weights_mut().copy_from_slice(&next());
            bank.bias_mut().copy_from_slice(&next());
        }
        RtLayer::Decomposed(d) => {
            d.vertical_mut().copy_from_slice(&next());
            d.horizontal_mut().copy_from_slice(&next());
            d.bias_mid_mut().copy_from_slice(&next());
            d.bias_out_mut().copy_from_slice(&next());
        }
        RtLayer::Batchnorm(bn) => {
            bn.gamma.copy_from_slice(&next());
            bn.beta.copy_from_slice(&next());
            bn.running_mean.copy_from_slice(&next());
            bn.running_var.copy_from_slice(&next());
        }
        RtLayer::Linear { weights, bias, .. } => {
            weights.copy_from_slice(&next());
            bias.copy_from_slice(&next());
        }
        _ => {}
    }
    Ok(())
}
