//! Analytic gradients for the dense f64 model.
//!
//! [`forward_tape`] runs the same computation as `Transformer::forward`
//! while keeping the activations each backward step needs. [`backward`]
//! consumes the tape and a logits gradient and returns a model-shaped
//! gradient.

use crate::error::{Error, Result};
use crate::layers::{
    attend, rope_in_place, sigmoid, silu, AttentionWeights, FfnWeights, HeadLayout, NormWeight,
};
use crate::model::Model;
use crate::tensor::{matmul, matmul_at, matmul_bt, Tensor};

/// Saved activations of one attention call.
#[derive(Debug, Clone)]
pub struct AttentionTape {
    pub layout: HeadLayout,
    pub positions: Vec<usize>,
    /// Rotated queries `[T x n_heads x head_dim]`.
    pub q: Vec<f64>,
    /// Rotated keys `[T x kv_heads x head_dim]`.
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    /// Attention weights `[n_heads x T x T]`.
    pub probs: Vec<f64>,
    /// Concatenated head outputs before `w_o`, `[T x dim]`.
    pub heads: Tensor<f64>,
}

/// Attention forward that records what [`attention_backward`] needs.
pub fn attention_forward_tape(
    x: &Tensor<f64>,
    w: &AttentionWeights<Tensor<f64>>,
    positions: &[usize],
    theta: f64,
    window: Option<usize>,
) -> Result<(Tensor<f64>, AttentionTape)> {
    let (t_len, dim) = x.dims2()?;
    let layout = HeadLayout::new(dim, w.n_heads, w.kv_heads)?;
    let mut q = matmul(x, &w.w_q)?.into_vec();
    let mut k = matmul(x, &w.w_k)?.into_vec();
    let v = matmul(x, &w.w_v)?.into_vec();
    rope_in_place(&mut q, positions, layout.n_heads, layout.head_dim, theta, false);
    rope_in_place(&mut k, positions, layout.kv_heads, layout.head_dim, theta, false);
    let mut probs = Vec::new();
    let heads = attend(&q, positions, &k, &v, positions, layout, window, Some(&mut probs))?;
    let heads = Tensor::from_vec(&[t_len, dim], heads)?;
    let y = matmul(&heads, &w.w_o)?;
    Ok((
        y,
        AttentionTape {
            layout,
            positions: positions.to_vec(),
            q,
            k,
            v,
            probs,
            heads,
        },
    ))
}

/// Gradients of one attention layer.
#[derive(Debug, Clone)]
pub struct AttentionGrads {
    pub dx: Tensor<f64>,
    pub w_q: Tensor<f64>,
    pub w_k: Tensor<f64>,
    pub w_v: Tensor<f64>,
    pub w_o: Tensor<f64>,
}

pub fn attention_backward(
    x: &Tensor<f64>,
    w: &AttentionWeights<Tensor<f64>>,
    tape: &AttentionTape,
    theta: f64,
    dy: &Tensor<f64>,
) -> Result<AttentionGrads> {
    let (t_len, dim) = x.dims2()?;
    let HeadLayout {
        n_heads,
        kv_heads,
        head_dim: hd,
    } = tape.layout;
    let group = tape.layout.group();
    let scale = 1.0 / (hd as f64).sqrt();

    let d_wo = matmul_at(&tape.heads, dy)?;
    let d_heads = matmul_bt(dy, &w.w_o)?;
    let d_heads = d_heads.data();

    let mut dq = vec![0.0; t_len * n_heads * hd];
    let mut dk = vec![0.0; t_len * kv_heads * hd];
    let mut dv = vec![0.0; t_len * kv_heads * hd];
    let mut dp = vec![0.0; t_len];
    for h in 0..n_heads {
        let kvh = h / group;
        for t in 0..t_len {
            let p = &tape.probs[(h * t_len + t) * t_len..][..t_len];
            let go = &d_heads[(t * n_heads + h) * hd..][..hd];
            let mut weighted = 0.0;
            for j in 0..t_len {
                if p[j] == 0.0 {
                    dp[j] = 0.0;
                    continue;
                }
                let vj = &tape.v[(j * kv_heads + kvh) * hd..][..hd];
                dp[j] = go.iter().zip(vj).map(|(a, b)| a * b).sum();
                weighted += p[j] * dp[j];
                let dvj = &mut dv[(j * kv_heads + kvh) * hd..][..hd];
                for (d, &g) in dvj.iter_mut().zip(go) {
                    *d += p[j] * g;
                }
            }
            let qt = tape.q[(t * n_heads + h) * hd..][..hd].to_vec();
            for j in 0..t_len {
                if p[j] == 0.0 {
                    continue;
                }
                let ds = p[j] * (dp[j] - weighted) * scale;
                let kj = &tape.k[(j * kv_heads + kvh) * hd..][..hd];
                let dqt = &mut dq[(t * n_heads + h) * hd..][..hd];
                for (d, &kv) in dqt.iter_mut().zip(kj) {
                    *d += ds * kv;
                }
                let dkj = &mut dk[(j * kv_heads + kvh) * hd..][..hd];
                for (d, &qv) in dkj.iter_mut().zip(&qt) {
                    *d += ds * qv;
                }
            }
        }
    }
    rope_in_place(&mut dq, &tape.positions, n_heads, hd, theta, true);
    rope_in_place(&mut dk, &tape.positions, kv_heads, hd, theta, true);
    let kvd = kv_heads * hd;
    let dq = Tensor::from_vec(&[t_len, dim], dq)?;
    let dk = Tensor::from_vec(&[t_len, kvd], dk)?;
    let dv = Tensor::from_vec(&[t_len, kvd], dv)?;

    let mut dx = matmul_bt(&dq, &w.w_q)?;
    dx.add_assign(&matmul_bt(&dk, &w.w_k)?)?;
    dx.add_assign(&matmul_bt(&dv, &w.w_v)?)?;
    Ok(AttentionGrads {
        dx,
        w_q: matmul_at(x, &dq)?,
        w_k: matmul_at(x, &dk)?,
        w_v: matmul_at(x, &dv)?,
        w_o: d_wo,
    })
}

/// Gradient of rmsnorm with respect to its input and gain.
pub fn rmsnorm_backward(
    x: &Tensor<f64>,
    w: &NormWeight<f64>,
    dy: &Tensor<f64>,
) -> Result<(Tensor<f64>, Tensor<f64>)> {
    let (rows, dim) = x.dims2()?;
    let gain = w.gain.data();
    let mut dx = Tensor::zeros(&[rows, dim])?;
    let mut dgain = Tensor::zeros(&[dim])?;
    for r in 0..rows {
        let xr = x.row(r);
        let gr = dy.row(r);
        let ms = xr.iter().map(|v| v * v).sum::<f64>() / dim as f64;
        let inv = 1.0 / (ms + w.eps).sqrt();
        let mut proj = 0.0;
        for i in 0..dim {
            dgain.data_mut()[i] += gr[i] * xr[i] * inv;
            proj += gr[i] * gain[i] * xr[i];
        }
        let coef = inv * inv * inv * proj / dim as f64;
        for (i, d) in dx.row_mut(r).iter_mut().enumerate() {
            *d = inv * gain[i] * gr[i] - xr[i] * coef;
        }
    }
    Ok((dx, dgain))
}

/// Gradient of the rotary embedding: the inverse rotation.
pub fn rope_backward(dy: &Tensor<f64>, positions: &[usize], theta: f64) -> Result<Tensor<f64>> {
    let &[_, heads, hd] = dy.shape() else {
        return Err(Error::InvalidShape {
            shape: dy.shape().to_vec(),
            reason: "rope expects [T x heads x head_dim]".into(),
        });
    };
    let mut out = dy.clone();
    rope_in_place(out.data_mut(), positions, heads, hd, theta, true);
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct FfnGrads {
    pub dx: Tensor<f64>,
    pub w_gate: Tensor<f64>,
    pub w_up: Tensor<f64>,
    pub w_down: Tensor<f64>,
}

/// SwiGLU backward. `gate` and `up` are the saved pre-activations `x·w_gate`
/// and `x·w_up`.
pub fn swiglu_backward(
    x: &Tensor<f64>,
    w: &FfnWeights<Tensor<f64>>,
    gate: &Tensor<f64>,
    up: &Tensor<f64>,
    dy: &Tensor<f64>,
) -> Result<FfnGrads> {
    let mut m = gate.clone();
    for (g, &u) in m.data_mut().iter_mut().zip(up.data()) {
        *g = silu(*g) * u;
    }
    let w_down = matmul_at(&m, dy)?;
    let dm = matmul_bt(dy, &w.w_down)?;
    let mut dz = dm.clone();
    let mut du = dm;
    for (((dzi, dui), &z), &u) in dz
        .data_mut()
        .iter_mut()
        .zip(du.data_mut())
        .zip(gate.data())
        .zip(up.data())
    {
        let s = sigmoid(z);
        let dsilu = s * (1.0 + z * (1.0 - s));
        *dzi *= u * dsilu;
        *dui *= z * s;
    }
    let mut dx = matmul_bt(&dz, &w.w_gate)?;
    dx.add_assign(&matmul_bt(&du, &w.w_up)?)?;
    Ok(FfnGrads {
        dx,
        w_gate: matmul_at(x, &dz)?,
        w_up: matmul_at(x, &du)?,
        w_down,
    })
}

#[derive(Debug, Clone)]
struct LayerTape {
    x: Tensor<f64>,
    a: Tensor<f64>,
    attn: AttentionTape,
    h1: Tensor<f64>,
    b: Tensor<f64>,
    gate: Tensor<f64>,
    up: Tensor<f64>,
}

/// Activations saved by [`forward_tape`].
#[derive(Debug, Clone)]
pub struct Tape {
    tokens: Vec<usize>,
    layers: Vec<LayerTape>,
    h_last: Tensor<f64>,
    h_final: Tensor<f64>,
}

/// Full-sequence forward (no cache) that keeps activations for [`backward`].
pub fn forward_tape(model: &Model<f64>, tokens: &[usize]) -> Result<(Tensor<f64>, Tape)> {
    let cfg = &model.config;
    if tokens.is_empty() {
        return Err(Error::InvalidArgument("empty token sequence".into()));
    }
    if let Some(&id) = tokens.iter().find(|&&id| id >= cfg.vocab_size) {
        return Err(Error::TokenOutOfRange {
            id,
            vocab: cfg.vocab_size,
        });
    }
    if tokens.len() > cfg.context_length {
        return Err(Error::ContextOverflow {
            needed: tokens.len(),
            context: cfg.context_length,
        });
    }
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let mut h = Tensor::zeros(&[tokens.len(), cfg.dim])?;
    for (t, &id) in tokens.iter().enumerate() {
        h.row_mut(t).copy_from_slice(model.token_embedding.row(id));
    }
    let mut layers = Vec::with_capacity(model.blocks.len());
    for block in &model.blocks {
        let x = h.clone();
        let a = crate::layers::rmsnorm(&x, &block.norm_attn)?;
        let (att, attn) = attention_forward_tape(&a, &block.attn, &positions, cfg.rope_theta, cfg.window)?;
        h.add_assign(&att)?;
        let h1 = h.clone();
        let b = crate::layers::rmsnorm(&h1, &block.norm_ffn)?;
        let gate = matmul(&b, &block.ffn.w_gate)?;
        let up = matmul(&b, &block.ffn.w_up)?;
        let mut m = gate.clone();
        for (g, &u) in m.data_mut().iter_mut().zip(up.data()) {
            *g = silu(*g) * u;
        }
        h.add_assign(&matmul(&m, &block.ffn.w_down)?)?;
        layers.push(LayerTape {
            x,
            a,
            attn,
            h1,
            b,
            gate,
            up,
        });
    }
    let h_final = crate::layers::rmsnorm(&h, &model.final_norm)?;
    let logits = matmul_bt(&h_final, model.head())?;
    Ok((
        logits,
        Tape {
            tokens: tokens.to_vec(),
            layers,
            h_last: h,
            h_final,
        },
    ))
}

/// Gradient of a scalar objective with respect to every parameter, given
/// its gradient `dlogits` with respect to the logits of [`forward_tape`].
pub fn backward(model: &Model<f64>, tape: &Tape, dlogits: &Tensor<f64>) -> Result<Model<f64>> {
    let mut grads = model.zeros_like();
    accumulate_backward(model, tape, dlogits, &mut grads)?;
    Ok(grads)
}

/// As [`backward`], adding into `grads`.
pub fn accumulate_backward(
    model: &Model<f64>,
    tape: &Tape,
    dlogits: &Tensor<f64>,
    grads: &mut Model<f64>,
) -> Result<()> {
    let theta = model.config.rope_theta;
    let (d_final, d_head) = output_head_backward(&tape.h_final, model.head(), dlogits)?;
    match grads.output_head.as_mut() {
        Some(g) => g.add_assign(&d_head)?,
        None => grads.token_embedding.add_assign(&d_head)?,
    }
    let (mut dh, d_gain) = rmsnorm_backward(&tape.h_last, &model.final_norm, &d_final)?;
    grads.final_norm.gain.add_assign(&d_gain)?;

    for (l, (block, lt)) in model.blocks.iter().zip(&tape.layers).enumerate().rev() {
        let g = &mut grads.blocks[l];
        let ffn = swiglu_backward(&lt.b, &block.ffn, &lt.gate, &lt.up, &dh)?;
        g.ffn.w_gate.add_assign(&ffn.w_gate)?;
        g.ffn.w_up.add_assign(&ffn.w_up)?;
        g.ffn.w_down.add_assign(&ffn.w_down)?;
        let (d_h1, d_gain) = rmsnorm_backward(&lt.h1, &block.norm_ffn, &ffn.dx)?;
        g.norm_ffn.gain.add_assign(&d_gain)?;
        dh.add_assign(&d_h1)?;

        let att = attention_backward(&lt.a, &block.attn, &lt.attn, theta, &dh)?;
        g.attn.w_q.add_assign(&att.w_q)?;
        g.attn.w_k.add_assign(&att.w_k)?;
        g.attn.w_v.add_assign(&att.w_v)?;
        g.attn.w_o.add_assign(&att.w_o)?;
        let (d_x, d_gain) = rmsnorm_backward(&lt.x, &block.norm_attn, &att.dx)?;
        g.norm_attn.gain.add_assign(&d_gain)?;
        dh.add_assign(&d_x)?;
    }

    embedding_backward(&tape.tokens, &dh, &mut grads.token_embedding)
}

/// Scatters row `t` of `dy` into row `tokens[t]` of the embedding gradient.
pub fn embedding_backward(tokens: &[usize], dy: &Tensor<f64>, grad: &mut Tensor<f64>) -> Result<()> {
    let (vocab, dim) = grad.dims2()?;
    if dy.shape() != [tokens.len(), dim] {
        return Err(Error::ShapeMismatch {
            op: "embedding_backward",
            left: dy.shape().to_vec(),
            right: vec![tokens.len(), dim],
        });
    }
    for (t, &id) in tokens.iter().enumerate() {
        if id >= vocab {
            return Err(Error::TokenOutOfRange { id, vocab });
        }
        for (d, &s) in grad.row_mut(id).iter_mut().zip(dy.row(t)) {
            *d += s;
        }
    }
    Ok(())
}

/// Backward of `logits = h · tableᵀ`: returns `(dh, dtable)`.
pub fn output_head_backward(
    h: &Tensor<f64>,
    table: &Tensor<f64>,
    dlogits: &Tensor<f64>,
) -> Result<(Tensor<f64>, Tensor<f64>)> {
    Ok((matmul(dlogits, table)?, matmul_at(dlogits, h)?))
}

/// Mean next-token cross-entropy over `sequence` (inputs `sequence[..n-1]`,
/// targets `sequence[1..]`), accumulating `weight * gradient` into `grads`.
pub fn lm_loss_grad(model: &Model<f64>, sequence: &[usize], weight: f64, grads: &mut Model<f64>) -> Result<f64> {
    if sequence.len() < 2 {
        return Err(Error::InvalidArgument("sequence needs at least two tokens".into()));
    }
    let (logits, tape) = forward_tape(model, &sequence[..sequence.len() - 1])?;
    let (loss, dlogits) = super::loss::cross_entropy(&logits, &sequence[1..])?;
    accumulate_backward(model, &tape, &dlogits.map(|v| v * weight), grads)?;
    Ok(loss)
}
