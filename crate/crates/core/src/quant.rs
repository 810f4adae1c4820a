//! 4-bit and 5-bit asymmetric block quantization.
//!
//! A block covers 32 consecutive weights of one row and stores a binary16
//! `scale` and `minv`; weight `i` decodes as `minv + code_i * scale`.
//!
//! Byte layouts (all little-endian, no padding):
//!
//! ```text
//! Q4B (20 bytes): scale:f16 | minv:f16 | qs[16]
//! Q5B (24 bytes): scale:f16 | minv:f16 | qs[16] | qh:u32
//! ```
//!
//! `qs` packs the low four bits of code `i` into byte `i / 2`, even `i` in the
//! low nibble. In Q5B, bit `i` of `qh` is the fifth bit of code `i`.

use half::f16;

use crate::error::{Error, Result};
use crate::layers::{AttentionWeights, FfnWeights, Linear, NormWeight};
use crate::model::{Block, Model, ModelConfig, TokenTable, Transformer};
use crate::tensor::{Element, Tensor};

/// Weights per block.
pub const BLOCK: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum QFormat {
    Q4B,
    Q5B,
}

impl QFormat {
    /// Largest code value.
    pub fn levels(self) -> u8 {
        match self {
            QFormat::Q4B => 15,
            QFormat::Q5B => 31,
        }
    }

    pub fn block_bytes(self) -> usize {
        match self {
            QFormat::Q4B => 20,
            QFormat::Q5B => 24,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            QFormat::Q4B => "q4b",
            QFormat::Q5B => "q5b",
        }
    }
}

impl std::str::FromStr for QFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "q4b" => Ok(QFormat::Q4B),
            "q5b" => Ok(QFormat::Q5B),
            other => Err(Error::InvalidArgument(format!("unknown quant format {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QBlock4 {
    pub scale: f16,
    pub minv: f16,
    pub qs: [u8; 16],
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QBlock5 {
    pub scale: f16,
    pub minv: f16,
    pub qs: [u8; 16],
    pub qh: u32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum QBlock {
    Q4(QBlock4),
    Q5(QBlock5),
}

impl QBlock {
    pub fn format(&self) -> QFormat {
        match self {
            QBlock::Q4(_) => QFormat::Q4B,
            QBlock::Q5(_) => QFormat::Q5B,
        }
    }

    pub fn scale(&self) -> f16 {
        match self {
            QBlock::Q4(b) => b.scale,
            QBlock::Q5(b) => b.scale,
        }
    }

    pub fn minv(&self) -> f16 {
        match self {
            QBlock::Q4(b) => b.minv,
            QBlock::Q5(b) => b.minv,
        }
    }

    pub fn code(&self, i: usize) -> u8 {
        match self {
            QBlock::Q4(b) => nibble(&b.qs, i),
            QBlock::Q5(b) => nibble(&b.qs, i) | ((((b.qh >> i) & 1) as u8) << 4),
        }
    }

    pub fn to_bytes(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.scale().to_le_bytes());
        out.extend_from_slice(&self.minv().to_le_bytes());
        match self {
            QBlock::Q4(b) => out.extend_from_slice(&b.qs),
            QBlock::Q5(b) => {
                out.extend_from_slice(&b.qs);
                out.extend_from_slice(&b.qh.to_le_bytes());
            }
        }
    }

    /// Decodes one block from exactly `format.block_bytes()` bytes.
    pub fn from_bytes(bytes: &[u8], format: QFormat) -> Result<Self> {
        if bytes.len() != format.block_bytes() {
            return Err(Error::InvalidArgument(format!(
                "{} bytes for a {} block",
                bytes.len(),
                format.name()
            )));
        }
        let scale = f16::from_le_bytes([bytes[0], bytes[1]]);
        let minv = f16::from_le_bytes([bytes[2], bytes[3]]);
        let qs: [u8; 16] = bytes[4..20].try_into().expect("16 bytes");
        Ok(match format {
            QFormat::Q4B => QBlock::Q4(QBlock4 { scale, minv, qs }),
            QFormat::Q5B => QBlock::Q5(QBlock5 {
                scale,
                minv,
                qs,
                qh: u32::from_le_bytes(bytes[20..24].try_into().expect("4 bytes")),
            }),
        })
    }
}

fn nibble(qs: &[u8; 16], i: usize) -> u8 {
    let b = qs[i / 2];
    if i % 2 == 0 {
        b & 0x0f
    } else {
        b >> 4
    }
}

/// Quantizes 32 values. Codes use round-half-away-from-zero against the
/// binary16-rounded `minv` and `scale`, so decoding lands on the stored lattice.
pub fn quantize_block(values: &[f32], format: QFormat) -> Result<QBlock> {
    if values.len() != BLOCK {
        return Err(Error::InvalidArgument(format!(
            "block of {} values, expected {BLOCK}",
            values.len()
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("quantize_block input"));
    }
    let min = values.iter().copied().fold(f32::INFINITY, f32::min);
    let max = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let levels = format.levels();
    let minv = f16::from_f32(min);
    if !minv.is_finite() {
        return Err(Error::Unrepresentable(min));
    }
    let scale = if max == min {
        f16::ZERO
    } else {
        let s = (max - min) / levels as f32;
        let h = f16::from_f32(s);
        if !h.is_finite() {
            return Err(Error::Unrepresentable(s));
        }
        h
    };
    let (m, s) = (minv.to_f32(), scale.to_f32());
    let mut qs = [0u8; 16];
    let mut qh = 0u32;
    for (i, &v) in values.iter().enumerate() {
        let code = if s == 0.0 {
            0
        } else {
            ((v - m) / s).round().clamp(0.0, levels as f32) as u8
        };
        qs[i / 2] |= (code & 0x0f) << (4 * (i % 2));
        qh |= ((code >> 4) as u32 & 1) << i;
    }
    Ok(match format {
        QFormat::Q4B => QBlock::Q4(QBlock4 { scale, minv, qs }),
        QFormat::Q5B => QBlock::Q5(QBlock5 { scale, minv, qs, qh }),
    })
}

pub fn dequantize_block(block: &QBlock) -> [f32; BLOCK] {
    let (m, s) = (block.minv().to_f32(), block.scale().to_f32());
    std::array::from_fn(|i| m + block.code(i) as f32 * s)
}

/// Row-major block-quantized matrix; blocks run along each row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QTensor {
    rows: usize,
    cols: usize,
    format: QFormat,
    /// Packed blocks, exactly as stored on disk.
    data: Vec<u8>,
}

impl QTensor {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn format(&self) -> QFormat {
        self.format
    }

    pub fn bytes(&self) -> &[u8] {
        &self.data
    }

    pub fn n_blocks(&self) -> usize {
        self.rows * self.cols / BLOCK
    }

    pub fn from_bytes(rows: usize, cols: usize, format: QFormat, data: Vec<u8>) -> Result<Self> {
        if rows == 0 || cols == 0 || cols % BLOCK != 0 {
            return Err(Error::InvalidShape {
                shape: vec![rows, cols],
                reason: format!("columns must be a positive multiple of {BLOCK}"),
            });
        }
        let want = rows * cols / BLOCK * format.block_bytes();
        if data.len() != want {
            return Err(Error::InvalidArgument(format!(
                "{} payload bytes, expected {want}",
                data.len()
            )));
        }
        Ok(Self {
            rows,
            cols,
            format,
            data,
        })
    }

    pub fn block(&self, index: usize) -> QBlock {
        let bb = self.format.block_bytes();
        QBlock::from_bytes(&self.data[index * bb..(index + 1) * bb], self.format)
            .expect("stored block has format size")
    }

    pub fn dequantize_row(&self, r: usize, out: &mut [f32]) {
        let per_row = self.cols / BLOCK;
        for b in 0..per_row {
            let vals = dequantize_block(&self.block(r * per_row + b));
            out[b * BLOCK..(b + 1) * BLOCK].copy_from_slice(&vals);
        }
    }

    pub fn dequantize(&self) -> Tensor<f32> {
        let mut data = vec![0.0f32; self.rows * self.cols];
        for r in 0..self.rows {
            self.dequantize_row(r, &mut data[r * self.cols..(r + 1) * self.cols]);
        }
        Tensor::from_vec(&[self.rows, self.cols], data).expect("finite lattice values")
    }

    /// `self · x` into `out`, decoding each block on the fly. Each output
    /// accumulates in f32 over its row's blocks in order.
    fn matvec_into(&self, x: &[f32], out: &mut [f32]) {
        let bb = self.format.block_bytes();
        let per_row = self.cols / BLOCK;
        let q5 = self.format == QFormat::Q5B;
        for (r, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0f32;
            for b in 0..per_row {
                let raw = &self.data[(r * per_row + b) * bb..][..bb];
                let s = f16::from_le_bytes([raw[0], raw[1]]).to_f32();
                let m = f16::from_le_bytes([raw[2], raw[3]]).to_f32();
                let qs = &raw[4..20];
                let qh = if q5 {
                    u32::from_le_bytes(raw[20..24].try_into().expect("4 bytes"))
                } else {
                    0
                };
                let xs = &x[b * BLOCK..(b + 1) * BLOCK];
                for (i, &xv) in xs.iter().enumerate() {
                    let lo = (qs[i / 2] >> (4 * (i % 2))) & 0x0f;
                    let code = lo | ((((qh >> i) & 1) as u8) << 4);
                    acc += (m + code as f32 * s) * xv;
                }
            }
            *o = acc;
        }
    }
}

pub fn quantize_tensor<T: Element>(t: &Tensor<T>, format: QFormat) -> Result<QTensor> {
    let (rows, cols) = t.dims2()?;
    if cols % BLOCK != 0 {
        return Err(Error::InvalidShape {
            shape: t.shape().to_vec(),
            reason: format!("columns must be a multiple of {BLOCK}"),
        });
    }
    let mut data = Vec::with_capacity(rows * cols / BLOCK * format.block_bytes());
    let mut buf = [0f32; BLOCK];
    for chunk in t.data().chunks(BLOCK) {
        for (b, &v) in buf.iter_mut().zip(chunk) {
            *b = v.as_f64() as f32;
        }
        quantize_block(&buf, format)?.to_bytes(&mut data);
    }
    Ok(QTensor {
        rows,
        cols,
        format,
        data,
    })
}

/// `q [r x c] · x [c]`.
pub fn qmatvec(q: &QTensor, x: &Tensor<f32>) -> Result<Tensor<f32>> {
    if x.len() != q.cols {
        return Err(Error::ShapeMismatch {
            op: "qmatvec",
            left: vec![q.rows, q.cols],
            right: x.shape().to_vec(),
        });
    }
    let mut out = vec![0.0f32; q.rows];
    q.matvec_into(x.data(), &mut out);
    Tensor::from_vec(&[q.rows], out)
}

/// Stored as `[out x in]`, so `apply` is one matvec per input row.
impl Linear<f32> for QTensor {
    fn in_dim(&self) -> usize {
        self.cols
    }
    fn out_dim(&self) -> usize {
        self.rows
    }
    fn apply(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let (t, c) = x.dims2()?;
        if c != self.cols {
            return Err(Error::ShapeMismatch {
                op: "quantized linear",
                left: x.shape().to_vec(),
                right: vec![self.rows, self.cols],
            });
        }
        let mut out = vec![0.0f32; t * self.rows];
        for r in 0..t {
            self.matvec_into(x.row(r), &mut out[r * self.rows..(r + 1) * self.rows]);
        }
        Tensor::from_vec(&[t, self.rows], out)
    }
}

impl TokenTable<f32> for QTensor {
    fn vocab(&self) -> usize {
        self.rows
    }
    fn embed_row(&self, id: usize, out: &mut [f32]) -> Result<()> {
        self.dequantize_row(id, out);
        Ok(())
    }
    fn project_out(&self, h: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.apply(h)
    }
}

/// Model with every matrix block-quantized and f32 norm gains.
pub type QModel = Transformer<f32, QTensor>;

fn check_quantizable(config: &ModelConfig) -> Result<()> {
    config.validate()?;
    for (name, d) in [("dim", config.dim), ("ffn_dim", config.ffn_dim)] {
        if d % BLOCK != 0 {
            return Err(Error::InvalidConfig(format!(
                "{name} {d} is not a multiple of {BLOCK}"
            )));
        }
    }
    Ok(())
}

/// Quantizes every matrix of `model`. Projections are transposed to
/// `[out x in]` first so blocks run along the contraction axis; the
/// embedding and head are already `[vocab x dim]`.
pub fn quantize_model<T: Element>(model: &Model<T>, format: QFormat) -> Result<QModel> {
    check_quantizable(&model.config)?;
    let proj = |w: &Tensor<T>| quantize_tensor(&w.transpose()?, format);
    let norm = |n: &NormWeight<T>| NormWeight {
        gain: n.gain.cast::<f32>(),
        eps: n.eps,
    };
    let blocks = model
        .blocks
        .iter()
        .map(|b| {
            Ok(Block {
                attn: AttentionWeights {
                    w_q: proj(&b.attn.w_q)?,
                    w_k: proj(&b.attn.w_k)?,
                    w_v: proj(&b.attn.w_v)?,
                    w_o: proj(&b.attn.w_o)?,
                    n_heads: b.attn.n_heads,
                    kv_heads: b.attn.kv_heads,
                },
                ffn: FfnWeights {
                    w_gate: proj(&b.ffn.w_gate)?,
                    w_up: proj(&b.ffn.w_up)?,
                    w_down: proj(&b.ffn.w_down)?,
                },
                norm_attn: norm(&b.norm_attn),
                norm_ffn: norm(&b.norm_ffn),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Transformer {
        config: model.config.clone(),
        token_embedding: quantize_tensor(&model.token_embedding, format)?,
        blocks,
        final_norm: norm(&model.final_norm),
        output_head: model
            .output_head
            .as_ref()
            .map(|h| quantize_tensor(h, format))
            .transpose()?,
    })
}

/// Dense f32 model holding exactly the dequantized weights.
pub fn dequantize_model(q: &QModel) -> Result<Model<f32>> {
    let proj = |w: &QTensor| w.dequantize().transpose();
    let blocks = q
        .blocks
        .iter()
        .map(|b| {
            Ok(Block {
                attn: AttentionWeights {
                    w_q: proj(&b.attn.w_q)?,
                    w_k: proj(&b.attn.w_k)?,
                    w_v: proj(&b.attn.w_v)?,
                    w_o: proj(&b.attn.w_o)?,
                    n_heads: b.attn.n_heads,
                    kv_heads: b.attn.kv_heads,
                },
                ffn: FfnWeights {
                    w_gate: proj(&b.ffn.w_gate)?,
                    w_up: proj(&b.ffn.w_up)?,
                    w_down: proj(&b.ffn.w_down)?,
                },
                norm_attn: b.norm_attn.clone(),
                norm_ffn: b.norm_ffn.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Transformer {
        config: q.config.clone(),
        token_embedding: q.token_embedding.dequantize(),
        blocks,
        final_norm: q.final_norm.clone(),
        output_head: q.output_head.as_ref().map(|h| h.dequantize()),
    })
}

/// Exact byte length of the checkpoint file holding `config` quantized to
/// `format`: packed blocks for every matrix, f32 norm gains, and the
/// container header and per-tensor records.
pub fn predicted_size(config: &ModelConfig, format: QFormat) -> Result<u64> {
    check_quantizable(config)?;
    Ok(crate::persist::encoded_len(
        config,
        crate::persist::Storage::Quantized(format),
    ))
}
