//! Transformer building blocks: RMS pre-normalization, rotary position
//! embeddings, the SwiGLU feed-forward, and grouped-query attention with an
//! optional sliding window.
//!
//! Weight matrices are abstracted behind [`Linear`] so the same block code
//! drives dense `Tensor` weights and block-quantized weights.

use crate::error::{Error, Result};
use crate::kvcache::KVCache;
use crate::tensor::{matmul, softmax_in_place, Element, Tensor};

/// A linear map `x · W` for a logical weight `W [in x out]`.
pub trait Linear<T: Element> {
    fn in_dim(&self) -> usize;
    fn out_dim(&self) -> usize;
    /// `x [rows x in]` to `[rows x out]`.
    fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>>;
}

impl<T: Element> Linear<T> for Tensor<T> {
    fn in_dim(&self) -> usize {
        self.shape()[0]
    }
    fn out_dim(&self) -> usize {
        self.shape()[1]
    }
    fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        matmul(x, self)
    }
}

/// Per-channel gain for RMS normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct NormWeight<T: Element> {
    pub gain: Tensor<T>,
    pub eps: f64,
}

impl<T: Element> NormWeight<T> {
    pub fn ones(dim: usize, eps: f64) -> Result<Self> {
        if !(eps > 0.0) {
            return Err(Error::InvalidArgument(format!("norm eps must be positive, got {eps}")));
        }
        Ok(Self {
            gain: Tensor::ones(&[dim])?,
            eps,
        })
    }
}

/// Query, key, value and output projections for one attention layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionWeights<W> {
    pub w_q: W,
    pub w_k: W,
    pub w_v: W,
    pub w_o: W,
    pub n_heads: usize,
    pub kv_heads: usize,
}

impl<W> AttentionWeights<W> {
    pub fn group_size(&self) -> usize {
        self.n_heads / self.kv_heads
    }
}

/// SwiGLU feed-forward weights.
#[derive(Debug, Clone, PartialEq)]
pub struct FfnWeights<W> {
    pub w_gate: W,
    pub w_up: W,
    pub w_down: W,
}

/// Attention head layout shared by the projections.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadLayout {
    pub n_heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
}

impl HeadLayout {
    pub fn new(dim: usize, n_heads: usize, kv_heads: usize) -> Result<Self> {
        if n_heads == 0 || kv_heads == 0 || dim % n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "n_heads {n_heads} must divide dim {dim}"
            )));
        }
        if n_heads % kv_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "kv_heads {kv_heads} must divide n_heads {n_heads}"
            )));
        }
        let head_dim = dim / n_heads;
        if head_dim % 2 != 0 {
            return Err(Error::InvalidConfig(format!(
                "head_dim {head_dim} must be even for rotary embeddings"
            )));
        }
        Ok(Self {
            n_heads,
            kv_heads,
            head_dim,
        })
    }

    pub fn group(&self) -> usize {
        self.n_heads / self.kv_heads
    }

    pub fn kv_dim(&self) -> usize {
        self.kv_heads * self.head_dim
    }
}

pub fn rmsnorm<T: Element>(x: &Tensor<T>, w: &NormWeight<T>) -> Result<Tensor<T>> {
    let (rows, dim) = x.dims2()?;
    if w.gain.len() != dim {
        return Err(Error::ShapeMismatch {
            op: "rmsnorm",
            left: x.shape().to_vec(),
            right: w.gain.shape().to_vec(),
        });
    }
    let mut out = x.clone();
    let eps = T::from_f64(w.eps);
    let n = T::from_f64(dim as f64);
    for r in 0..rows {
        let row = out.row_mut(r);
        let ms = row.iter().map(|&v| v * v).sum::<T>() / n;
        let inv = (ms + eps).sqrt().recip();
        for (v, &g) in row.iter_mut().zip(w.gain.data()) {
            *v = *v * inv * g;
        }
    }
    Ok(out)
}

/// Inverse frequencies `theta^(-2i/head_dim)` for each rotated pair.
pub(crate) fn rope_frequencies(head_dim: usize, theta: f64) -> Vec<f64> {
    (0..head_dim / 2)
        .map(|i| theta.powf(-2.0 * i as f64 / head_dim as f64))
        .collect()
}

/// Rotates adjacent pairs `(2i, 2i+1)` of every head vector in place.
/// `data` is `[positions.len() x heads x head_dim]`. `inverse` rotates by
/// the negated angle, which is also the transpose used in backprop.
pub(crate) fn rope_in_place<T: Element>(
    data: &mut [T],
    positions: &[usize],
    heads: usize,
    head_dim: usize,
    theta: f64,
    inverse: bool,
) {
    let freqs = rope_frequencies(head_dim, theta);
    let sign = if inverse { -1.0 } else { 1.0 };
    for (t, &m) in positions.iter().enumerate() {
        for (i, &f) in freqs.iter().enumerate() {
            let angle = sign * m as f64 * f;
            let (sin, cos) = angle.sin_cos();
            let (sin, cos) = (T::from_f64(sin), T::from_f64(cos));
            for h in 0..heads {
                let base = (t * heads + h) * head_dim + 2 * i;
                let (a, b) = (data[base], data[base + 1]);
                data[base] = a * cos - b * sin;
                data[base + 1] = a * sin + b * cos;
            }
        }
    }
}

/// Rotary embedding of `x [T x heads x head_dim]` at absolute `positions`.
pub fn rope_apply<T: Element>(x: &Tensor<T>, positions: &[usize], theta: f64) -> Result<Tensor<T>> {
    let &[t, heads, head_dim] = x.shape() else {
        return Err(Error::InvalidShape {
            shape: x.shape().to_vec(),
            reason: "rope expects [T x heads x head_dim]".into(),
        });
    };
    if head_dim % 2 != 0 {
        return Err(Error::InvalidArgument(format!("rope head_dim {head_dim} is odd")));
    }
    if positions.len() != t {
        return Err(Error::InvalidArgument(format!(
            "{} positions for {t} rows",
            positions.len()
        )));
    }
    let mut out = x.clone();
    rope_in_place(out.data_mut(), positions, heads, head_dim, theta, false);
    Ok(out)
}

pub fn sigmoid<T: Element>(z: T) -> T {
    (T::one() + (-z).exp()).recip()
}

pub fn silu<T: Element>(z: T) -> T {
    z * sigmoid(z)
}

pub fn swiglu_ffn<T: Element, W: Linear<T>>(x: &Tensor<T>, w: &FfnWeights<W>) -> Result<Tensor<T>> {
    let mut gate = w.w_gate.apply(x)?;
    let up = w.w_up.apply(x)?;
    if gate.shape() != up.shape() {
        return Err(Error::ShapeMismatch {
            op: "swiglu",
            left: gate.shape().to_vec(),
            right: up.shape().to_vec(),
        });
    }
    for (g, &u) in gate.data_mut().iter_mut().zip(up.data()) {
        *g = silu(*g) * u;
    }
    w.w_down.apply(&gate)
}

/// Whether a key at `key_pos` is visible from a query at `query_pos`.
/// The window, when set, keeps exactly `w` positions: the query itself and
/// its `w - 1` predecessors.
pub fn visible(query_pos: usize, key_pos: usize, window: Option<usize>) -> bool {
    key_pos <= query_pos && window.is_none_or(|w| key_pos + w > query_pos)
}

/// Scaled dot-product attention with grouped KV heads.
///
/// `q` is `[T x n_heads x head_dim]`; `keys` and `values` are
/// `[n x kv_heads x head_dim]`. Query head `h` reads KV head `h / group`.
/// Returns the concatenated head outputs `[T x n_heads*head_dim]`. When
/// `probs` is given it receives the attention weights as `[n_heads x T x n]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attend<T: Element>(
    q: &[T],
    q_pos: &[usize],
    keys: &[T],
    values: &[T],
    k_pos: &[usize],
    layout: HeadLayout,
    window: Option<usize>,
    mut probs: Option<&mut Vec<T>>,
) -> Result<Vec<T>> {
    let HeadLayout {
        n_heads,
        kv_heads,
        head_dim,
    } = layout;
    let t_len = q_pos.len();
    let n = k_pos.len();
    let group = layout.group();
    let scale = T::from_f64(1.0 / (head_dim as f64).sqrt());
    let mut out = vec![T::zero(); t_len * n_heads * head_dim];
    if let Some(p) = probs.as_deref_mut() {
        p.clear();
        p.resize(n_heads * t_len * n, T::zero());
    }
    let mut scores = vec![T::zero(); n];
    for h in 0..n_heads {
        let kvh = h / group;
        for (t, &qp) in q_pos.iter().enumerate() {
            let qv = &q[(t * n_heads + h) * head_dim..][..head_dim];
            for (j, &kp) in k_pos.iter().enumerate() {
                scores[j] = if visible(qp, kp, window) {
                    let kv = &keys[(j * kv_heads + kvh) * head_dim..][..head_dim];
                    crate::tensor::dot(qv, kv) * scale
                } else {
                    T::neg_infinity()
                };
            }
            softmax_in_place(&mut scores).map_err(|_| Error::FullyMaskedRow { row: t })?;
            let o = &mut out[(t * n_heads + h) * head_dim..][..head_dim];
            for (j, &p) in scores.iter().enumerate() {
                if p == T::zero() {
                    continue;
                }
                let vv = &values[(j * kv_heads + kvh) * head_dim..][..head_dim];
                for (oi, &vi) in o.iter_mut().zip(vv) {
                    *oi += p * vi;
                }
            }
            if let Some(pb) = probs.as_deref_mut() {
                pb[(h * t_len + t) * n..][..n].copy_from_slice(&scores);
            }
        }
    }
    Ok(out)
}

/// Grouped-query attention over `x [T x dim]`.
///
/// Without a cache, attends over the rows of `x` at `positions`. With a
/// cache, the new rotated keys and values are attended together with the
/// cached ones and then appended to `layer` of the cache; `positions` must
/// continue the cached sequence.
#[allow(clippy::too_many_arguments)]
pub fn vgqa_attention<T: Element, W: Linear<T>>(
    x: &Tensor<T>,
    w: &AttentionWeights<W>,
    positions: &[usize],
    theta: f64,
    window: Option<usize>,
    cache: Option<(&mut KVCache<T>, usize)>,
) -> Result<Tensor<T>> {
    let (t_len, dim) = x.dims2()?;
    let layout = HeadLayout::new(dim, w.n_heads, w.kv_heads)?;
    if positions.len() != t_len {
        return Err(Error::InvalidArgument(format!(
            "{} positions for {t_len} rows",
            positions.len()
        )));
    }
    let hd = layout.head_dim;
    let mut q = w.w_q.apply(x)?.into_vec();
    let mut k = w.w_k.apply(x)?.into_vec();
    let v = w.w_v.apply(x)?.into_vec();
    if q.len() != t_len * dim || k.len() != t_len * layout.kv_dim() || v.len() != k.len() {
        return Err(Error::InvalidShape {
            shape: vec![t_len, dim],
            reason: "projection widths disagree with head layout".into(),
        });
    }
    rope_in_place(&mut q, positions, layout.n_heads, hd, theta, false);
    rope_in_place(&mut k, positions, layout.kv_heads, hd, theta, false);

    let heads_out = match cache {
        None => attend(&q, positions, &k, &v, positions, layout, window, None)?,
        Some((cache, layer)) => {
            let view = cache.view(layer)?;
            if view.kv_heads != layout.kv_heads || view.head_dim != hd {
                return Err(Error::CacheMismatch(format!(
                    "layer {layer} caches {}x{} heads, attention produces {}x{}",
                    view.kv_heads, view.head_dim, layout.kv_heads, hd
                )));
            }
            let expected = cache.layer_len_seen(layer)?;
            if positions[0] != expected || positions.windows(2).any(|p| p[1] != p[0] + 1) {
                return Err(Error::CacheMismatch(format!(
                    "positions must continue from {expected}, got {:?}..",
                    positions[0]
                )));
            }
            let mut keys = view.keys;
            keys.extend_from_slice(&k);
            let mut values = view.values;
            values.extend_from_slice(&v);
            let mut k_pos = view.positions;
            k_pos.extend_from_slice(positions);
            let out = attend(&q, positions, &keys, &values, &k_pos, layout, window, None)?;
            let kvd = layout.kv_dim();
            for t in 0..t_len {
                cache.append(layer, &k[t * kvd..(t + 1) * kvd], &v[t * kvd..(t + 1) * kvd])?;
            }
            out
        }
    };
    let heads_out = Tensor::from_vec(&[t_len, dim], heads_out)?;
    w.w_o.apply(&heads_out)
}
