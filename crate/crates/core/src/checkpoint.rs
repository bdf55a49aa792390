//! EFLX checkpoint files.
//!
//! ```text
//! offset 0   "EFLX"
//! offset 4   u32 LE   format version (1)
//! offset 8   u64 LE   header length in bytes
//! offset 16  UTF-8 JSON header, space-padded so the first payload is 64-byte aligned
//! ...        tensor payloads, little-endian, each starting at a multiple of 64
//! ```
//!
//! The header maps tensor names to `{"dtype", "shape", "offset"}`, where
//! `offset` is absolute from the start of the file. The reserved key
//! `__metadata__` holds the model config, the surviving MLP channel ids of
//! every layer, and the activation scaling mode of quantized layers.
//!
//! Tensor names follow the layer names used everywhere else, with `.weight`
//! and `.bias` suffixes. A quantized layer stores an i8 `.weight`, an f32
//! `.bias`, and f32 auxiliaries `.weight_scales`, `.eq_scales`, `.act_scale`
//! and `.alpha`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    attn_output_name, intermediate_name, key_name, output_name, query_name, value_name, EncoderLayer,
    LayerNorm, Linear, ModelConfig, Projection, VitModel, CLASSIFIER, PATCH_EMBED,
};
use crate::quantizer::{ActivationScaling, QuantParams, QuantizedLinear};
use crate::tensor::{Dtype, Tensor};

pub const MAGIC: &[u8; 4] = b"EFLX";
pub const VERSION: u32 = 1;
pub const ALIGNMENT: usize = 64;
const PREAMBLE: usize = 16;
const METADATA_KEY: &str = "__metadata__";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Metadata {
    config: ModelConfig,
    mlp_channels: Vec<Vec<usize>>,
    #[serde(default)]
    quantized: BTreeMap<String, ActivationScaling>,
}

fn norm_names(layer: usize) -> (String, String) {
    (
        format!("encoder.layer.{layer}.layernorm_before"),
        format!("encoder.layer.{layer}.layernorm_after"),
    )
}

fn scalar(v: f32) -> Tensor {
    Tensor::from_f32(vec![1], vec![v]).expect("one element")
}

fn push_projection(out: &mut Vec<(String, Tensor)>, name: &str, p: &Projection) -> Result<()> {
    match p {
        Projection::Float(l) => {
            out.push((format!("{name}.weight"), l.weight.clone()));
            out.push((format!("{name}.bias"), l.bias.clone()));
        }
        Projection::Quantized(q) => {
            let pr = &q.params;
            out.push((format!("{name}.weight"), q.q_weight.clone()));
            out.push((format!("{name}.bias"), q.bias.clone()));
            out.push((
                format!("{name}.weight_scales"),
                Tensor::from_f32(vec![pr.weight_scales.len()], pr.weight_scales.clone())?,
            ));
            out.push((
                format!("{name}.eq_scales"),
                Tensor::from_f32(vec![pr.eq_scales.len()], pr.eq_scales.clone())?,
            ));
            out.push((format!("{name}.act_scale"), scalar(pr.act_scale)));
            out.push((format!("{name}.alpha"), scalar(pr.alpha)));
        }
    }
    Ok(())
}

fn push_norm(out: &mut Vec<(String, Tensor)>, name: &str, n: &LayerNorm) {
    out.push((format!("{name}.weight"), n.gamma.clone()));
    out.push((format!("{name}.bias"), n.beta.clone()));
}

/// Named tensors of `model` in execution order.
fn collect_tensors(model: &VitModel) -> Result<Vec<(String, Tensor)>> {
    let mut out = Vec::new();
    push_projection(&mut out, PATCH_EMBED, &model.patch_embed)?;
    out.push(("embeddings.cls_token".into(), model.cls_token.clone()));
    out.push(("embeddings.position_embeddings".into(), model.pos_embed.clone()));
    for (l, layer) in model.layers.iter().enumerate() {
        let (before, after) = norm_names(l);
        push_norm(&mut out, &before, &layer.norm_before);
        push_projection(&mut out, &query_name(l), &layer.query)?;
        push_projection(&mut out, &key_name(l), &layer.key)?;
        push_projection(&mut out, &value_name(l), &layer.value)?;
        push_projection(&mut out, &attn_output_name(l), &layer.attn_output)?;
        push_norm(&mut out, &after, &layer.norm_after);
        push_projection(&mut out, &intermediate_name(l), &layer.intermediate)?;
        push_projection(&mut out, &output_name(l), &layer.output)?;
    }
    push_norm(&mut out, "layernorm", &model.final_norm);
    push_projection(&mut out, CLASSIFIER, &model.head)?;
    Ok(out)
}

fn align(n: usize) -> usize {
    n.div_ceil(ALIGNMENT) * ALIGNMENT
}

/// Serializes `model` into EFLX bytes.
pub fn to_bytes(model: &VitModel) -> Result<Vec<u8>> {
    let tensors = collect_tensors(model)?;
    let quantized = model
        .projections()
        .into_iter()
        .filter_map(|(n, p)| match p {
            Projection::Quantized(q) => Some((n, q.params.scaling)),
            Projection::Float(_) => None,
        })
        .collect();
    let meta = Metadata {
        config: model.config,
        mlp_channels: model.layers.iter().map(|l| l.mlp_channels.clone()).collect(),
        quantized,
    };

    // Payload offsets depend on the header length, which depends on the
    // offsets' digit counts; iterate until the aligned data start is stable.
    let mut data_start = align(PREAMBLE);
    let (header, entries) = loop {
        let mut entries = BTreeMap::new();
        let mut cursor = data_start;
        for (name, t) in &tensors {
            entries.insert(
                name.clone(),
                TensorEntry {
                    dtype: t.dtype(),
                    shape: t.shape().to_vec(),
                    offset: cursor as u64,
                },
            );
            cursor = align(cursor + t.byte_size());
        }
        let mut doc = serde_json::Map::new();
        doc.insert(METADATA_KEY.into(), serde_json::to_value(&meta).map_err(internal)?);
        for (name, e) in &entries {
            doc.insert(name.clone(), serde_json::to_value(e).map_err(internal)?);
        }
        let header = serde_json::to_string(&doc).map_err(internal)?;
        let needed = align(PREAMBLE + header.len());
        if needed == data_start {
            break (header, entries);
        }
        data_start = needed;
    };

    let mut buf = Vec::with_capacity(data_start + tensors.iter().map(|(_, t)| align(t.byte_size())).sum::<usize>());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let header_len = data_start - PREAMBLE;
    buf.extend_from_slice(&(header_len as u64).to_le_bytes());
    buf.extend_from_slice(header.as_bytes());
    buf.resize(data_start, b' ');
    for (name, t) in &tensors {
        let offset = entries[name].offset as usize;
        buf.resize(offset, 0);
        buf.extend_from_slice(&t.to_le_bytes());
    }
    Ok(buf)
}

fn internal(e: serde_json::Error) -> Error {
    Error::Internal(format!("checkpoint header serialization: {e}"))
}

pub fn save_checkpoint(model: &VitModel, path: &Path) -> Result<()> {
    let bytes = to_bytes(model)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<VitModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// Parses the header and checks every payload range for alignment, bounds
/// and overlap.
pub fn read_header(bytes: &[u8]) -> Result<BTreeMap<String, TensorEntry>> {
    read_parts(bytes).map(|(_, entries)| entries)
}

fn read_parts(bytes: &[u8]) -> Result<(Metadata, BTreeMap<String, TensorEntry>)> {
    if bytes.len() < PREAMBLE || &bytes[..4] != MAGIC {
        return Err(Error::Format("not an EFLX checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Format(format!("unsupported EFLX version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let header_end = usize::try_from(header_len)
        .ok()
        .and_then(|n| n.checked_add(PREAMBLE))
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| Error::Format(format!("header length {header_len} exceeds file size {}", bytes.len())))?;
    let header = std::str::from_utf8(&bytes[PREAMBLE..header_end])
        .map_err(|e| Error::Format(format!("header is not UTF-8: {e}")))?;
    let mut doc: serde_json::Map<String, serde_json::Value> =
        serde_json::from_str(header.trim_end()).map_err(|e| Error::Format(format!("header JSON: {e}")))?;
    let meta_value = doc
        .remove(METADATA_KEY)
        .ok_or_else(|| Error::Format("header has no __metadata__ entry".into()))?;
    let meta: Metadata =
        serde_json::from_value(meta_value).map_err(|e| Error::Format(format!("header metadata: {e}")))?;
    let mut entries = BTreeMap::new();
    for (name, v) in doc {
        let e: TensorEntry =
            serde_json::from_value(v).map_err(|e| Error::Format(format!("header entry `{name}`: {e}")))?;
        entries.insert(name, e);
    }

    let mut ranges = Vec::with_capacity(entries.len());
    for (name, e) in &entries {
        let n = e.shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        let len = n
            .and_then(|n| n.checked_mul(e.dtype.bytes_per_element()))
            .ok_or_else(|| Error::Format(format!("`{name}` shape {:?} overflows", e.shape)))?;
        let start = e.offset;
        let end = start.checked_add(len as u64);
        if start < header_end as u64 || end.is_none_or(|end| end > bytes.len() as u64) {
            return Err(Error::Format(format!(
                "`{name}` payload at offset {start} ({len} bytes) is out of bounds"
            )));
        }
        if start % ALIGNMENT as u64 != 0 {
            return Err(Error::Format(format!("`{name}` offset {start} is not {ALIGNMENT}-byte aligned")));
        }
        ranges.push((start, end.expect("checked"), name.as_str()));
    }
    ranges.sort_unstable();
    for w in ranges.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(Error::Format(format!("payloads of `{}` and `{}` overlap", w[0].2, w[1].2)));
        }
    }
    Ok((meta, entries))
}

struct Reader<'a> {
    bytes: &'a [u8],
    entries: BTreeMap<String, TensorEntry>,
}

impl Reader<'_> {
    fn take(&mut self, name: &str) -> Result<Tensor> {
        let e = self
            .entries
            .remove(name)
            .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor `{name}`")))?;
        let len: usize = e.shape.iter().product::<usize>() * e.dtype.bytes_per_element();
        let start = e.offset as usize;
        Tensor::from_le_bytes(e.shape, e.dtype, &self.bytes[start..start + len])
            .map_err(|err| Error::Format(format!("`{name}`: {err}")))
    }

    fn take_vec(&mut self, name: &str) -> Result<Vec<f32>> {
        Ok(self.take(name)?.as_f32().map_err(|e| Error::Format(format!("`{name}`: {e}")))?.to_vec())
    }

    fn take_scalar(&mut self, name: &str) -> Result<f32> {
        match self.take_vec(name)?.as_slice() {
            [v] => Ok(*v),
            other => Err(Error::Format(format!("`{name}` holds {} values, expected 1", other.len()))),
        }
    }

    fn projection(&mut self, name: &str, scaling: Option<ActivationScaling>) -> Result<Projection> {
        let weight = self.take(&format!("{name}.weight"))?;
        let bias = self.take(&format!("{name}.bias"))?;
        let format = |e: Error| Error::Format(format!("`{name}`: {e}"));
        match (weight.dtype(), scaling) {
            (Dtype::I8, Some(scaling)) => {
                let params = QuantParams {
                    weight_scales: self.take_vec(&format!("{name}.weight_scales"))?,
                    eq_scales: self.take_vec(&format!("{name}.eq_scales"))?,
                    act_scale: self.take_scalar(&format!("{name}.act_scale"))?,
                    alpha: self.take_scalar(&format!("{name}.alpha"))?,
                    scaling,
                };
                let q = QuantizedLinear {
                    q_weight: weight,
                    bias,
                    params,
                };
                if q.params.weight_scales.len() != q.out_features() || q.params.eq_scales.len() != q.in_features() {
                    return Err(Error::Format(format!("`{name}` quantization parameters do not match its shape")));
                }
                Ok(Projection::Quantized(q))
            }
            (Dtype::I8, None) | (_, Some(_)) => Err(Error::Format(format!(
                "`{name}` weight dtype {} disagrees with the quantized-layer metadata",
                weight.dtype()
            ))),
            _ => Ok(Projection::Float(Linear::new(weight, bias).map_err(format)?)),
        }
    }

    fn norm(&mut self, name: &str) -> Result<LayerNorm> {
        Ok(LayerNorm {
            gamma: self.take(&format!("{name}.weight"))?,
            beta: self.take(&format!("{name}.bias"))?,
        })
    }
}

/// Parses EFLX bytes into a model; the inverse of [`to_bytes`].
pub fn from_bytes(bytes: &[u8]) -> Result<VitModel> {
    let (meta, entries) = read_parts(bytes)?;
    let config = meta.config;
    config.validate().map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
    if meta.mlp_channels.len() != config.num_layers {
        return Err(Error::Format("channel maps do not match the layer count".into()));
    }
    let mut r = Reader { bytes, entries };
    let scaling = |name: &str| meta.quantized.get(name).copied();
    let patch_embed = r.projection(PATCH_EMBED, scaling(PATCH_EMBED))?;
    let cls_token = r.take("embeddings.cls_token")?;
    let pos_embed = r.take("embeddings.position_embeddings")?;
    let mut layers = Vec::with_capacity(config.num_layers);
    for (l, channels) in meta.mlp_channels.iter().enumerate() {
        let (before, after) = norm_names(l);
        let norm_before = r.norm(&before)?;
        let mut proj = |name: String| r.projection(&name, scaling(&name));
        let query = proj(query_name(l))?;
        let key = proj(key_name(l))?;
        let value = proj(value_name(l))?;
        let attn_output = proj(attn_output_name(l))?;
        let norm_after = r.norm(&after)?;
        let mut proj = |name: String| r.projection(&name, scaling(&name));
        let intermediate = proj(intermediate_name(l))?;
        let output = proj(output_name(l))?;
        layers.push(EncoderLayer {
            norm_before,
            query,
            key,
            value,
            attn_output,
            norm_after,
            intermediate,
            output,
            mlp_channels: channels.clone(),
        });
    }
    let final_norm = r.norm("layernorm")?;
    let head = r.projection(CLASSIFIER, scaling(CLASSIFIER))?;
    if let Some(extra) = r.entries.keys().next() {
        return Err(Error::Format(format!("unexpected tensor `{extra}` in checkpoint")));
    }
    let model = VitModel {
        config,
        patch_embed,
        cls_token,
        pos_embed,
        layers,
        final_norm,
        head,
    };
    model
        .check_consistency()
        .map_err(|e| Error::Format(format!("checkpoint is inconsistent: {e}")))?;
    Ok(model)
}
