//! Persistent formats: the binary model file (magic "FFM1", little-endian,
//! canonical tensor order, optional per-tensor int8 payloads with per-column
//! scales) and the line-delimited JSON dataset. Round-trips are bit-exact.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

use crate::encoder::{Activation, EncoderError, EncoderWeights, Model, ModelConfig, TensorView};
use crate::qgemm::{quantize_weight_per_column, QuantError, QuantizedWeight};
use crate::runtime::Example;

pub const MAGIC: &[u8; 4] = b"FFM1";
pub const VERSION: u32 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_I8: u8 = 1;

#[derive(Debug, Error)]
pub enum ModelIoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("not a model file (bad magic)")]
    BadMagic,
    #[error("unsupported model file version {0}")]
    BadVersion(u32),
    #[error("model file truncated or malformed: {0}")]
    Malformed(String),
    #[error("tensor {name}: {problem}")]
    BadTensor { name: String, problem: String },
    #[error("line {line}: {source}")]
    Json { line: usize, source: serde_json::Error },
    #[error("line {line}: token {token} out of range for vocab {vocab}")]
    TokenOutOfRange { line: usize, token: u32, vocab: usize },
    #[error("line {line}: label {label} out of range for {classes} classes")]
    LabelOutOfRange { line: usize, label: u32, classes: usize },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Quant(#[from] QuantError),
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelIoError> {
        if self.pos + n > self.buf.len() {
            return Err(ModelIoError::Malformed(format!(
                "need {n} bytes at offset {}, file has {}",
                self.pos,
                self.buf.len()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ModelIoError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, ModelIoError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, ModelIoError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32, ModelIoError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32_vec(&mut self, n: usize) -> Result<Vec<f32>, ModelIoError> {
        let bytes = self.take(n * 4)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

/// Serialize the model. Tensors named in `prequant` are written as int8
/// values plus per-column scales; everything else as raw f32.
pub fn model_to_bytes(model: &Model) -> Vec<u8> {
    let cfg = &model.config;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    for v in [
        cfg.num_layers,
        cfg.hidden,
        cfg.num_heads,
        cfg.ffn_size,
        cfg.vocab,
        cfg.max_seq_len,
        cfg.num_classes,
    ] {
        put_u32(&mut out, v as u32);
    }
    out.push(match cfg.activation {
        Activation::Gelu => 0,
        Activation::Relu => 1,
    });
    out.extend_from_slice(&cfg.ln_eps.to_le_bytes());

    let views = model.weights.named_views();
    put_u32(&mut out, views.len() as u32);
    for (name, view) in views {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let quantized = model.prequant.as_ref().and_then(|m| m.get(&name));
        match (view, quantized) {
            (TensorView::Mat(_), Some(q)) => {
                out.push(DTYPE_I8);
                out.push(2);
                put_u32(&mut out, q.k as u32);
                put_u32(&mut out, q.n as u32);
                out.extend(q.values.iter().map(|&v| v as u8));
                for &s in &q.col_scales {
                    out.extend_from_slice(&s.to_le_bytes());
                }
            }
            (TensorView::Mat(m), None) => {
                out.push(DTYPE_F32);
                out.push(2);
                put_u32(&mut out, m.rows() as u32);
                put_u32(&mut out, m.cols() as u32);
                for &v in m.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            (TensorView::Vec(v), _) => {
                out.push(DTYPE_F32);
                out.push(1);
                put_u32(&mut out, v.len() as u32);
                for &x in v {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
    }
    out
}

struct RawTensor {
    name: String,
    dims: Vec<usize>,
    f32_data: Vec<f32>,
    quantized: Option<QuantizedWeight>,
}

/// Deserialize a model. The head width is not stored: it is recovered from
/// the Q projection's column count, which is what lets pruned models break
/// the hidden/heads divisibility rule.
pub fn model_from_bytes(buf: &[u8]) -> Result<Model, ModelIoError> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(ModelIoError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(ModelIoError::BadVersion(version));
    }
    let num_layers = r.u32()? as usize;
    let hidden = r.u32()? as usize;
    let num_heads = r.u32()? as usize;
    let ffn_size = r.u32()? as usize;
    let vocab = r.u32()? as usize;
    let max_seq_len = r.u32()? as usize;
    let num_classes = r.u32()? as usize;
    let activation = match r.u8()? {
        0 => Activation::Gelu,
        1 => Activation::Relu,
        other => return Err(ModelIoError::Malformed(format!("unknown activation code {other}"))),
    };
    let ln_eps = r.f32()?;

    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|e| ModelIoError::Malformed(format!("tensor name not UTF-8: {e}")))?;
        let dtype = r.u8()?;
        let rank = r.u8()? as usize;
        if !(1..=2).contains(&rank) {
            return Err(ModelIoError::BadTensor { name, problem: format!("rank {rank}") });
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32()? as usize);
        }
        let len: usize = dims.iter().product();
        match dtype {
            DTYPE_F32 => {
                let f32_data = r.f32_vec(len)?;
                tensors.push(RawTensor { name, dims, f32_data, quantized: None });
            }
            DTYPE_I8 => {
                if rank != 2 {
                    return Err(ModelIoError::BadTensor { name, problem: "int8 tensor must be rank 2".into() });
                }
                let values: Vec<i8> = r.take(len)?.iter().map(|&b| b as i8).collect();
                let col_scales = r.f32_vec(dims[1])?;
                let q = QuantizedWeight { values, k: dims[0], n: dims[1], col_scales };
                let f32_data = (0..len)
                    .map(|i| q.values[i] as f32 * q.col_scales[i % q.n])
                    .collect();
                tensors.push(RawTensor { name, dims, f32_data, quantized: Some(q) });
            }
            other => {
                return Err(ModelIoError::BadTensor { name, problem: format!("unknown dtype {other}") })
            }
        }
    }
    if r.pos != buf.len() {
        return Err(ModelIoError::Malformed(format!("{} trailing bytes", buf.len() - r.pos)));
    }

    // head_dim from the stored Q projection: columns = heads * head_dim.
    let head_dim = match tensors.iter().find(|t| t.name == "layer0.attn.wq") {
        Some(t) if t.dims.len() == 2 && t.dims[1] % num_heads == 0 => t.dims[1] / num_heads,
        Some(t) => {
            return Err(ModelIoError::BadTensor {
                name: t.name.clone(),
                problem: format!("{} columns not divisible by {num_heads} heads", t.dims[1]),
            })
        }
        None if num_layers == 0 => hidden / num_heads,
        None => return Err(ModelIoError::Malformed("missing layer0.attn.wq".into())),
    };
    let cfg = ModelConfig {
        num_layers,
        hidden,
        num_heads,
        head_dim,
        ffn_size,
        vocab,
        max_seq_len,
        num_classes,
        activation,
        ln_eps,
    };
    cfg.validate()?;

    let expected = EncoderWeights::<f32>::named_shapes(&cfg);
    if tensors.len() != expected.len() {
        return Err(ModelIoError::Malformed(format!(
            "{} tensors, expected {}",
            tensors.len(),
            expected.len()
        )));
    }
    let mut weights = EncoderWeights::<f32>::zeros(&cfg);
    let mut prequant: HashMap<String, QuantizedWeight> = HashMap::new();
    {
        let slices = weights.param_slices_mut();
        for (tensor, ((want_name, want_shape), (_, slice))) in
            tensors.into_iter().zip(expected.iter().zip(slices))
        {
            if tensor.name != *want_name {
                return Err(ModelIoError::BadTensor {
                    name: tensor.name,
                    problem: format!("out of order, expected {want_name}"),
                });
            }
            if tensor.dims != *want_shape {
                return Err(ModelIoError::BadTensor {
                    name: tensor.name,
                    problem: format!("shape {:?}, expected {:?}", tensor.dims, want_shape),
                });
            }
            slice.copy_from_slice(&tensor.f32_data);
            if let Some(q) = tensor.quantized {
                prequant.insert(tensor.name, q);
            }
        }
    }
    let mut model = Model::new(cfg, weights)?;
    if !prequant.is_empty() {
        model.prequant = Some(prequant);
    }
    Ok(model)
}

pub fn save_model(model: &Model, path: &Path) -> Result<(), ModelIoError> {
    Ok(fs::write(path, model_to_bytes(model))?)
}

pub fn load_model(path: &Path) -> Result<Model, ModelIoError> {
    model_from_bytes(&fs::read(path)?)
}

/// Convert every constant weight matrix to a stored int8 payload. The f32
/// weights are replaced by their dequantized values so the in-memory model
/// matches what a save/load round-trip produces.
pub fn quantize_model(model: &Model) -> Result<Model, ModelIoError> {
    let mut out = model.clone();
    let mut prequant = HashMap::new();
    for (name, view) in model.weights.named_views() {
        if let TensorView::Mat(m) = view {
            if name.starts_with("embeddings.") {
                continue; // lookup tables are never multiplied
            }
            prequant.insert(name, quantize_weight_per_column(m)?);
        }
    }
    {
        let slices = out.weights.param_slices_mut();
        for (name, slice) in slices {
            if let Some(q) = prequant.get(&name) {
                for (i, v) in slice.iter_mut().enumerate() {
                    *v = q.values[i] as f32 * q.col_scales[i % q.n];
                }
            }
        }
    }
    out.prequant = Some(prequant);
    Ok(out)
}

#[derive(Deserialize)]
struct Record {
    tokens: Vec<u32>,
    label: u32,
}

/// Parse a line-delimited JSON dataset; errors carry 1-based line numbers.
pub fn dataset_from_str(text: &str) -> Result<Vec<Example>, ModelIoError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record =
            serde_json::from_str(line).map_err(|source| ModelIoError::Json { line: i + 1, source })?;
        out.push(Example { tokens: rec.tokens, label: rec.label });
    }
    Ok(out)
}

pub fn load_dataset(path: &Path) -> Result<Vec<Example>, ModelIoError> {
    dataset_from_str(&fs::read_to_string(path)?)
}

pub fn dataset_to_string(data: &[Example]) -> String {
    let mut s = String::new();
    for e in data {
        s.push_str(&serde_json::json!({"tokens": e.tokens, "label": e.label}).to_string());
        s.push('\n');
    }
    s
}

pub fn save_dataset(data: &[Example], path: &Path) -> Result<(), ModelIoError> {
    Ok(fs::write(path, dataset_to_string(data))?)
}

/// Every token must fit the model's vocabulary and every label its classes;
/// violations name the offending line.
pub fn validate_dataset(data: &[Example], cfg: &ModelConfig) -> Result<(), ModelIoError> {
    for (i, e) in data.iter().enumerate() {
        if let Some(&t) = e.tokens.iter().find(|&&t| t as usize >= cfg.vocab) {
            return Err(ModelIoError::TokenOutOfRange { line: i + 1, token: t, vocab: cfg.vocab });
        }
        if e.label as usize >= cfg.num_classes {
            return Err(ModelIoError::LabelOutOfRange {
                line: i + 1,
                label: e.label,
                classes: cfg.num_classes,
            });
        }
    }
    Ok(())
}
