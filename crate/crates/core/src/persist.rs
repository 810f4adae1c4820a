//! Checkpoint container for dense and quantized models.
//!
//! Layout (little-endian, packed):
//!
//! ```text
//! magic        4 bytes  "SHKT"
//! version      u32      1
//! config_len   u32      followed by that many bytes of UTF-8 JSON config
//! tensor_count u32
//! per tensor:
//!   name_len u32, name (UTF-8)
//!   dtype    u8    0 = f32, 1 = f64, 2 = Q4B, 3 = Q5B
//!   rank     u8
//!   dims     u64 x rank
//!   payload_len u64, payload
//! ```
//!
//! Tensors appear in [`crate::model::tensor_names`] order. Dense matrices are
//! stored with the shapes the model uses (`wq [dim x dim]`,
//! `wk [dim x kv_dim]`, `wdown [ffn_dim x dim]`, ...). Quantized projections
//! are stored transposed, `[out x in]`, so blocks run along the input axis;
//! the quantized embedding and head keep `[vocab x dim]`. Norm gains in a
//! quantized file stay f32.

use std::path::Path;

use crate::error::{Error, Result};
use crate::layers::{AttentionWeights, FfnWeights, NormWeight};
use crate::model::{tensor_names, Block, Model, ModelConfig, SamplingMode, Transformer, LAYER_PARTS};
use crate::quant::{QFormat, QModel, QTensor, BLOCK};
use crate::tensor::{Element, Tensor, Width};

pub const MAGIC: [u8; 4] = *b"SHKT";
pub const VERSION: u32 = 1;

/// Element encoding of one stored tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
    Q4B,
    Q5B,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
            DType::Q4B => 2,
            DType::Q5B => 3,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            0 => DType::F32,
            1 => DType::F64,
            2 => DType::Q4B,
            3 => DType::Q5B,
            _ => return None,
        })
    }

    /// Payload bytes for a tensor of `dims`, or `None` if the shape cannot
    /// hold this dtype.
    pub fn payload_len(self, dims: &[u64]) -> Option<u64> {
        let n = dims.iter().try_fold(1u64, |a, &d| a.checked_mul(d))?;
        match self {
            DType::F32 => n.checked_mul(4),
            DType::F64 => n.checked_mul(8),
            DType::Q4B | DType::Q5B => {
                let fmt = if self == DType::Q4B { QFormat::Q4B } else { QFormat::Q5B };
                if dims.len() != 2 || dims[1] % BLOCK as u64 != 0 {
                    return None;
                }
                (n / BLOCK as u64).checked_mul(fmt.block_bytes() as u64)
            }
        }
    }
}

/// How a model's weights are stored.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Storage {
    Dense(Width),
    Quantized(QFormat),
}

impl Storage {
    pub fn name(self) -> &'static str {
        match self {
            Storage::Dense(Width::F32) => "f32",
            Storage::Dense(Width::F64) => "f64",
            Storage::Quantized(f) => f.name(),
        }
    }

    fn matrix_dtype(self) -> DType {
        match self {
            Storage::Dense(Width::F32) => DType::F32,
            Storage::Dense(Width::F64) => DType::F64,
            Storage::Quantized(QFormat::Q4B) => DType::Q4B,
            Storage::Quantized(QFormat::Q5B) => DType::Q5B,
        }
    }

    fn norm_dtype(self) -> DType {
        match self {
            Storage::Dense(Width::F64) => DType::F64,
            _ => DType::F32,
        }
    }
}

/// Name, dtype and dims of one stored tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub dtype: DType,
    pub dims: Vec<u64>,
}

/// The exact tensor records a checkpoint of `config` under `storage` holds.
pub fn tensor_specs(config: &ModelConfig, storage: Storage) -> Vec<TensorSpec> {
    let quant = matches!(storage, Storage::Quantized(_));
    let (d, f, v) = (config.dim as u64, config.ffn_dim as u64, config.vocab_size as u64);
    // Dense matrices are [in x out]; quantized projections [out x in].
    let mat = |i: u64, o: u64| if quant { vec![o, i] } else { vec![i, o] };
    tensor_names(config)
        .into_iter()
        .map(|name| {
            let (dtype, dims) = if name == "embed" || name == "head" {
                (storage.matrix_dtype(), vec![v, d])
            } else if name == "final_norm" {
                (storage.norm_dtype(), vec![d])
            } else {
                let mut it = name.splitn(3, '.').skip(1);
                let layer: usize = it.next().and_then(|s| s.parse().ok()).expect("layer index");
                let part = it.next().expect("layer part");
                let kv = config.kv_dim_at(layer) as u64;
                match part {
                    "wq" | "wo" => (storage.matrix_dtype(), mat(d, d)),
                    "wk" | "wv" => (storage.matrix_dtype(), mat(d, kv)),
                    "wgate" | "wup" => (storage.matrix_dtype(), mat(d, f)),
                    "wdown" => (storage.matrix_dtype(), mat(f, d)),
                    _ => (storage.norm_dtype(), vec![d]),
                }
            };
            TensorSpec { name, dtype, dims }
        })
        .collect()
}

/// Exact file length of a checkpoint of `config` under `storage`.
pub fn encoded_len(config: &ModelConfig, storage: Storage) -> u64 {
    let header = 4 + 4 + 4 + config.to_json().len() as u64 + 4;
    let records: u64 = tensor_specs(config, storage)
        .iter()
        .map(|s| {
            4 + s.name.len() as u64
                + 2
                + 8 * s.dims.len() as u64
                + 8
                + s.dtype.payload_len(&s.dims).expect("valid spec")
        })
        .sum();
    header + records
}

/// A model of any supported storage kind.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyModel {
    F32(Model<f32>),
    F64(Model<f64>),
    Quant(QModel),
}

impl AnyModel {
    pub fn config(&self) -> &ModelConfig {
        match self {
            AnyModel::F32(m) => &m.config,
            AnyModel::F64(m) => &m.config,
            AnyModel::Quant(m) => &m.config,
        }
    }

    pub fn storage(&self) -> Storage {
        match self {
            AnyModel::F32(_) => Storage::Dense(Width::F32),
            AnyModel::F64(_) => Storage::Dense(Width::F64),
            AnyModel::Quant(m) => Storage::Quantized(m.token_embedding.format()),
        }
    }

    /// Dense copy at width `T`; quantized models are dequantized.
    pub fn to_dense<T: Element>(&self) -> Result<Model<T>> {
        Ok(match self {
            AnyModel::F32(m) => m.cast(),
            AnyModel::F64(m) => m.cast(),
            AnyModel::Quant(q) => crate::quant::dequantize_model(q)?.cast(),
        })
    }

    pub fn encoded_len(&self) -> u64 {
        encoded_len(self.config(), self.storage())
    }

    /// Decodes with whichever representation the model holds.
    pub fn generate(&self, prompt: &[usize], max_new: usize, mode: SamplingMode, seed: u64) -> Result<Vec<usize>> {
        match self {
            AnyModel::F32(m) => m.generate(prompt, max_new, mode, seed),
            AnyModel::F64(m) => m.generate(prompt, max_new, mode, seed),
            AnyModel::Quant(m) => m.generate(prompt, max_new, mode, seed),
        }
    }
}

impl From<Model<f32>> for AnyModel {
    fn from(m: Model<f32>) -> Self {
        AnyModel::F32(m)
    }
}

impl From<Model<f64>> for AnyModel {
    fn from(m: Model<f64>) -> Self {
        AnyModel::F64(m)
    }
}

impl From<QModel> for AnyModel {
    fn from(m: QModel) -> Self {
        AnyModel::Quant(m)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_record(out: &mut Vec<u8>, spec: &TensorSpec, payload: &[u8]) {
    put_u32(out, spec.name.len() as u32);
    out.extend_from_slice(spec.name.as_bytes());
    out.push(spec.dtype.code());
    out.push(spec.dims.len() as u8);
    for &d in &spec.dims {
        put_u64(out, d);
    }
    put_u64(out, payload.len() as u64);
    out.extend_from_slice(payload);
}

fn dense_payload<T: Element>(t: &Tensor<T>) -> Vec<u8> {
    let mut p = Vec::with_capacity(t.len() * T::WIDTH.bytes());
    for &v in t.data() {
        v.write_le(&mut p);
    }
    p
}

/// Serializes `model` to the checkpoint byte stream.
pub fn encode(model: &AnyModel) -> Vec<u8> {
    let config = model.config();
    let json = config.to_json();
    let specs = tensor_specs(config, model.storage());
    let payloads: Vec<Vec<u8>> = match model {
        AnyModel::F32(m) => m.visit(dense_payload, dense_payload).into_iter().map(|(_, p)| p).collect(),
        AnyModel::F64(m) => m.visit(dense_payload, dense_payload).into_iter().map(|(_, p)| p).collect(),
        AnyModel::Quant(m) => m
            .visit(|q: &QTensor| q.bytes().to_vec(), dense_payload)
            .into_iter()
            .map(|(_, p)| p)
            .collect(),
    };
    let mut out = Vec::with_capacity(model.encoded_len() as usize);
    out.extend_from_slice(&MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, json.len() as u32);
    out.extend_from_slice(json.as_bytes());
    put_u32(&mut out, specs.len() as u32);
    for (spec, payload) in specs.iter().zip(&payloads) {
        put_record(&mut out, spec, payload);
    }
    out
}

pub fn save_checkpoint(model: &AnyModel, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode(model))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<AnyModel> {
    decode(&std::fs::read(path)?)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: u64, ctx: &str) -> Result<&'a [u8]> {
        let remaining = (self.buf.len() - self.pos) as u64;
        if n > remaining {
            return Err(Error::Truncated(ctx.to_string()));
        }
        let s = &self.buf[self.pos..self.pos + n as usize];
        self.pos += n as usize;
        Ok(s)
    }

    fn u8(&mut self, ctx: &str) -> Result<u8> {
        Ok(self.take(1, ctx)?[0])
    }

    fn u32(&mut self, ctx: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, ctx)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, ctx: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, ctx)?.try_into().expect("8 bytes")))
    }
}

struct Record<'a> {
    name: String,
    dtype: DType,
    dims: Vec<u64>,
    payload: &'a [u8],
}

fn read_record<'a>(r: &mut Reader<'a>, index: u32) -> Result<Record<'a>> {
    let ctx = format!("tensor #{index} header");
    let name_len = r.u32(&ctx)?;
    let name = std::str::from_utf8(r.take(name_len as u64, &ctx)?)
        .map_err(|_| Error::PayloadMismatch {
            name: format!("#{index}"),
            reason: "name is not UTF-8".into(),
        })?
        .to_string();
    let ctx = format!("tensor {name} header");
    let code = r.u8(&ctx)?;
    let dtype = DType::from_code(code).ok_or_else(|| Error::PayloadMismatch {
        name: name.clone(),
        reason: format!("unknown dtype {code}"),
    })?;
    let rank = r.u8(&ctx)?;
    let dims = (0..rank).map(|_| r.u64(&ctx)).collect::<Result<Vec<_>>>()?;
    let payload_len = r.u64(&ctx)?;
    let expected = dtype.payload_len(&dims);
    if expected != Some(payload_len) {
        return Err(Error::PayloadMismatch {
            name,
            reason: format!("payload_len {payload_len} does not match {dtype:?} {dims:?}"),
        });
    }
    let payload = r.take(payload_len, &name)?;
    Ok(Record {
        name,
        dtype,
        dims,
        payload,
    })
}

/// Parses a checkpoint byte stream. Never reads past a declared length.
pub fn decode(bytes: &[u8]) -> Result<AnyModel> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "header")?.try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let version = r.u32("header")?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let config_len = r.u32("header")?;
    let json = std::str::from_utf8(r.take(config_len as u64, "config")?)
        .map_err(|_| Error::InvalidConfig("config is not UTF-8".into()))?;
    let config = ModelConfig::from_json(json)?;
    let count = r.u32("header")?;
    let mut records = Vec::with_capacity(count.min(1 << 16) as usize);
    for i in 0..count {
        let rec = read_record(&mut r, i)?;
        if records.iter().any(|x: &Record| x.name == rec.name) {
            return Err(Error::TensorSet(format!("duplicate tensor {}", rec.name)));
        }
        records.push(rec);
    }
    if r.pos != bytes.len() {
        return Err(Error::TensorSet(format!(
            "{} trailing bytes after last tensor",
            bytes.len() - r.pos
        )));
    }

    let storage = match records.first().map(|r| r.dtype) {
        Some(DType::F32) => Storage::Dense(Width::F32),
        Some(DType::F64) => Storage::Dense(Width::F64),
        Some(DType::Q4B) => Storage::Quantized(QFormat::Q4B),
        Some(DType::Q5B) => Storage::Quantized(QFormat::Q5B),
        None => return Err(Error::TensorSet("no tensors".into())),
    };
    let specs = tensor_specs(&config, storage);
    if specs.len() != records.len() {
        return Err(Error::TensorSet(format!(
            "{} tensors stored, config requires {}",
            records.len(),
            specs.len()
        )));
    }
    for (spec, rec) in specs.iter().zip(&records) {
        if spec.name != rec.name {
            return Err(Error::TensorSet(format!(
                "expected tensor {}, found {}",
                spec.name, rec.name
            )));
        }
        if spec.dtype != rec.dtype || spec.dims != rec.dims {
            return Err(Error::PayloadMismatch {
                name: rec.name.clone(),
                reason: format!(
                    "stored {:?} {:?}, config requires {:?} {:?}",
                    rec.dtype, rec.dims, spec.dtype, spec.dims
                ),
            });
        }
    }

    let mut recs = records.into_iter();
    Ok(match storage {
        Storage::Dense(Width::F32) => AnyModel::F32(assemble(&config, &mut recs, dense_tensor, dense_tensor)?),
        Storage::Dense(Width::F64) => AnyModel::F64(assemble(&config, &mut recs, dense_tensor, dense_tensor)?),
        Storage::Quantized(fmt) => AnyModel::Quant(assemble(
            &config,
            &mut recs,
            |rec: Record| {
                QTensor::from_bytes(rec.dims[0] as usize, rec.dims[1] as usize, fmt, rec.payload.to_vec())
            },
            dense_tensor::<f32>,
        )?),
    })
}

fn dense_tensor<T: Element>(rec: Record) -> Result<Tensor<T>> {
    let dims: Vec<usize> = rec.dims.iter().map(|&d| d as usize).collect();
    let data = rec
        .payload
        .chunks_exact(T::WIDTH.bytes())
        .map(T::read_le)
        .collect();
    Tensor::from_vec(&dims, data).map_err(|e| Error::PayloadMismatch {
        name: rec.name.clone(),
        reason: e.to_string(),
    })
}

fn assemble<'a, T: Element, W>(
    config: &ModelConfig,
    recs: &mut impl Iterator<Item = Record<'a>>,
    matrix: impl Fn(Record<'a>) -> Result<W>,
    norm: impl Fn(Record<'a>) -> Result<Tensor<T>>,
) -> Result<Transformer<T, W>> {
    let mut next = || recs.next().ok_or_else(|| Error::TensorSet("missing tensor".into()));
    let gain = |t: Tensor<T>| NormWeight {
        gain: t,
        eps: config.norm_eps,
    };
    let token_embedding = matrix(next()?)?;
    let mut blocks = Vec::with_capacity(config.n_layers);
    for l in 0..config.n_layers {
        debug_assert_eq!(LAYER_PARTS.len(), 9);
        let w_q = matrix(next()?)?;
        let w_k = matrix(next()?)?;
        let w_v = matrix(next()?)?;
        let w_o = matrix(next()?)?;
        let w_gate = matrix(next()?)?;
        let w_up = matrix(next()?)?;
        let w_down = matrix(next()?)?;
        let norm_attn = gain(norm(next()?)?);
        let norm_ffn = gain(norm(next()?)?);
        blocks.push(Block {
            attn: AttentionWeights {
                w_q,
                w_k,
                w_v,
                w_o,
                n_heads: config.n_heads,
                kv_heads: config.kv_heads_at(l),
            },
            ffn: FfnWeights { w_gate, w_up, w_down },
            norm_attn,
            norm_ffn,
        });
    }
    let final_norm = gain(norm(next()?)?);
    let output_head = if config.tie_embeddings {
        None
    } else {
        Some(matrix(next()?)?)
    };
    Ok(Transformer {
        config: config.clone(),
        token_embedding,
        blocks,
        final_norm,
        output_head,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;

    fn tiny() -> ModelConfig {
        ModelConfig {
            n_layers: 1,
            dim: 4,
            ffn_dim: 6,
            n_heads: 2,
            kv_heads: 1.into(),
            vocab_size: 5,
            context_length: 8,
            rope_theta: 10_000.0,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let m: AnyModel = init_model::<f32>(&tiny(), 1).unwrap().into();
        let bytes = encode(&m);
        assert_eq!(bytes.len() as u64, m.encoded_len());
        let back = decode(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(encode(&back), bytes);
    }

    #[test]
    fn negative_zero_survives() {
        let mut m = init_model::<f32>(&tiny(), 1).unwrap();
        m.token_embedding.data_mut()[0] = -0.0;
        let back = decode(&encode(&AnyModel::F32(m))).unwrap();
        let AnyModel::F32(back) = back else { panic!("width changed") };
        assert_eq!(back.token_embedding.data()[0].to_bits(), (-0.0f32).to_bits());
    }

    #[test]
    fn distinct_errors() {
        let bytes = encode(&init_model::<f64>(&tiny(), 2).unwrap().into());

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::BadMagic(_))));

        let mut v2 = bytes.clone();
        v2[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(decode(&v2), Err(Error::UnsupportedVersion(2))));

        let cut = &bytes[..bytes.len() - 3];
        match decode(cut) {
            Err(Error::Truncated(name)) => assert_eq!(name, "head"),
            other => panic!("expected truncation, got {other:?}"),
        }

        let mut extra = bytes.clone();
        extra.push(0);
        assert!(matches!(decode(&extra), Err(Error::TensorSet(_))));
    }

    #[test]
    fn every_truncation_errors() {
        let bytes = encode(&init_model::<f32>(&tiny(), 3).unwrap().into());
        for n in 0..bytes.len() {
            assert!(decode(&bytes[..n]).is_err(), "prefix {n} parsed");
        }
    }

    #[test]
    fn spec_payload_lengths() {
        assert_eq!(DType::F32.payload_len(&[3, 4]), Some(48));
        assert_eq!(DType::Q4B.payload_len(&[2, 64]), Some(80));
        assert_eq!(DType::Q5B.payload_len(&[2, 64]), Some(96));
        assert_eq!(DType::Q4B.payload_len(&[2, 48]), None);
        assert_eq!(DType::F64.payload_len(&[u64::MAX, 2]), None);
    }
}
