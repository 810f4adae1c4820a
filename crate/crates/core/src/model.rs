//! Decoder-only transformer: configuration, parameter accounting,
//! initialization, the forward pass and the decode loop.
//!
//! Each block is pre-normalized:
//!
//! ```text
//! h += attention(rmsnorm(h))
//! h += swiglu(rmsnorm(h))
//! logits = rmsnorm(h) · headᵀ
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kvcache::KVCache;
use crate::layers::{
    rmsnorm, swiglu_ffn, vgqa_attention, AttentionWeights, FfnWeights, HeadLayout, Linear,
    NormWeight,
};
use crate::tensor::{matmul_bt, Element, Rng, Tensor};

/// Standard deviation of the normal weight initialization.
pub const INIT_STD: f64 = 0.02;

/// Key/value head count: one value for every layer, or one per layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum KvHeads {
    Uniform(usize),
    PerLayer(Vec<usize>),
}

impl From<usize> for KvHeads {
    fn from(n: usize) -> Self {
        KvHeads::Uniform(n)
    }
}

fn default_eps() -> f64 {
    1e-5
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub dim: usize,
    pub ffn_dim: usize,
    pub n_heads: usize,
    pub kv_heads: KvHeads,
    pub vocab_size: usize,
    pub context_length: usize,
    pub rope_theta: f64,
    #[serde(default)]
    pub window: Option<usize>,
    #[serde(default = "default_eps")]
    pub norm_eps: f64,
    #[serde(default)]
    pub tie_embeddings: bool,
    #[serde(default)]
    pub eos_id: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::table1()
    }
}

impl ModelConfig {
    /// The published 2.5B-parameter architecture.
    pub fn table1() -> Self {
        Self {
            n_layers: 16,
            dim: 4096,
            ffn_dim: 4096,
            n_heads: 32,
            kv_heads: KvHeads::Uniform(8),
            vocab_size: 128_256,
            context_length: 4096,
            rope_theta: 500_000.0,
            window: None,
            norm_eps: default_eps(),
            tie_embeddings: false,
            eos_id: None,
        }
    }

    /// Desk-scale model over the byte tokenizer's 259-entry vocabulary.
    /// Matrix widths are multiples of 32 so it quantizes.
    pub fn toy() -> Self {
        Self {
            n_layers: 2,
            dim: 64,
            ffn_dim: 128,
            n_heads: 4,
            kv_heads: KvHeads::Uniform(2),
            vocab_size: crate::tokenizer::BYTE_VOCAB_SIZE,
            context_length: 1024,
            rope_theta: 500_000.0,
            window: None,
            norm_eps: default_eps(),
            tie_embeddings: false,
            eos_id: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn kv_heads_at(&self, layer: usize) -> usize {
        match &self.kv_heads {
            KvHeads::Uniform(n) => *n,
            KvHeads::PerLayer(v) => v[layer],
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.n_heads
    }

    pub fn kv_dim_at(&self, layer: usize) -> usize {
        self.kv_heads_at(layer) * self.head_dim()
    }

    pub fn layout_at(&self, layer: usize) -> Result<HeadLayout> {
        HeadLayout::new(self.dim, self.n_heads, self.kv_heads_at(layer))
    }

    pub fn cache_capacity(&self) -> usize {
        self.window.unwrap_or(self.context_length)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_layers == 0 || self.dim == 0 || self.ffn_dim == 0 || self.vocab_size == 0 {
            return bad("n_layers, dim, ffn_dim and vocab_size must be positive".into());
        }
        if self.context_length == 0 {
            return bad("context_length must be at least 1".into());
        }
        if !(self.rope_theta.is_finite() && self.rope_theta > 1.0) {
            return bad(format!("rope_theta must exceed 1, got {}", self.rope_theta));
        }
        if !(self.norm_eps.is_finite() && self.norm_eps > 0.0) {
            return bad(format!("norm_eps must be positive, got {}", self.norm_eps));
        }
        if self.window == Some(0) {
            return bad("window must be at least 1".into());
        }
        if let KvHeads::PerLayer(v) = &self.kv_heads {
            if v.len() != self.n_layers {
                return bad(format!("{} kv_heads entries for {} layers", v.len(), self.n_layers));
            }
        }
        if let Some(eos) = self.eos_id {
            if eos >= self.vocab_size {
                return bad(format!("eos_id {eos} outside vocabulary"));
            }
        }
        for l in 0..self.n_layers {
            self.layout_at(l)?;
        }
        Ok(())
    }
}

/// Closed-form count of stored scalars for `config`.
pub fn param_count(config: &ModelConfig) -> Result<u64> {
    config.validate()?;
    let dim = config.dim as u64;
    let embed = config.vocab_size as u64 * dim;
    let layers: u64 = (0..config.n_layers)
        .map(|l| {
            let kv = config.kv_dim_at(l) as u64;
            2 * dim * dim + 2 * dim * kv + 3 * dim * config.ffn_dim as u64 + 2 * dim
        })
        .sum();
    let head = if config.tie_embeddings { 0 } else { embed };
    Ok(embed + layers + dim + head)
}

/// Embedding table and output head: rows are tokens.
pub trait TokenTable<T: Element> {
    fn vocab(&self) -> usize;
    /// Writes the embedding of `id` into `out`.
    fn embed_row(&self, id: usize, out: &mut [T]) -> Result<()>;
    /// `h [rows x dim]` times the table transposed, giving `[rows x vocab]`.
    fn project_out(&self, h: &Tensor<T>) -> Result<Tensor<T>>;
}

impl<T: Element> TokenTable<T> for Tensor<T> {
    fn vocab(&self) -> usize {
        self.shape()[0]
    }
    fn embed_row(&self, id: usize, out: &mut [T]) -> Result<()> {
        out.copy_from_slice(self.row(id));
        Ok(())
    }
    fn project_out(&self, h: &Tensor<T>) -> Result<Tensor<T>> {
        matmul_bt(h, self)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<T: Element, W> {
    pub attn: AttentionWeights<W>,
    pub ffn: FfnWeights<W>,
    pub norm_attn: NormWeight<T>,
    pub norm_ffn: NormWeight<T>,
}

/// A decoder stack over weight storage `W`.
#[derive(Debug, Clone, PartialEq)]
pub struct Transformer<T: Element, W> {
    pub config: ModelConfig,
    pub token_embedding: W,
    pub blocks: Vec<Block<T, W>>,
    pub final_norm: NormWeight<T>,
    /// `None` when the head is tied to the embedding.
    pub output_head: Option<W>,
}

/// Dense model.
pub type Model<T> = Transformer<T, Tensor<T>>;

impl<T: Element, W: Linear<T> + TokenTable<T>> Transformer<T, W> {
    pub fn head(&self) -> &W {
        self.output_head.as_ref().unwrap_or(&self.token_embedding)
    }

    fn check_tokens(&self, tokens: &[usize], start: usize) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::InvalidArgument("empty token sequence".into()));
        }
        let vocab = self.config.vocab_size;
        if let Some(&id) = tokens.iter().find(|&&id| id >= vocab) {
            return Err(Error::TokenOutOfRange { id, vocab });
        }
        let needed = start + tokens.len();
        if needed > self.config.context_length {
            return Err(Error::ContextOverflow {
                needed,
                context: self.config.context_length,
            });
        }
        Ok(())
    }

    /// Logits `[T x vocab]` for `tokens`. With a cache, `tokens` extend the
    /// cached sequence and the cache is advanced past them.
    pub fn forward(&self, tokens: &[usize], mut cache: Option<&mut KVCache<T>>) -> Result<Tensor<T>> {
        let start = cache.as_ref().map_or(0, |c| c.tokens_seen());
        self.check_tokens(tokens, start)?;
        if let Some(c) = cache.as_ref() {
            if c.n_layers() != self.blocks.len() {
                return Err(Error::CacheMismatch(format!(
                    "cache has {} layers, model has {}",
                    c.n_layers(),
                    self.blocks.len()
                )));
            }
        }
        let dim = self.config.dim;
        let positions: Vec<usize> = (start..start + tokens.len()).collect();
        let mut h = Tensor::zeros(&[tokens.len(), dim])?;
        for (t, &id) in tokens.iter().enumerate() {
            self.token_embedding.embed_row(id, h.row_mut(t))?;
        }
        for (l, block) in self.blocks.iter().enumerate() {
            let a = rmsnorm(&h, &block.norm_attn)?;
            let layer_cache = cache.as_deref_mut().map(|c| (c, l));
            let att = vgqa_attention(
                &a,
                &block.attn,
                &positions,
                self.config.rope_theta,
                self.config.window,
                layer_cache,
            )?;
            h.add_assign(&att)?;
            let b = rmsnorm(&h, &block.norm_ffn)?;
            h.add_assign(&swiglu_ffn(&b, &block.ffn)?)?;
        }
        if let Some(c) = cache {
            c.advance(tokens.len())?;
        }
        let hf = rmsnorm(&h, &self.final_norm)?;
        self.head().project_out(&hf)
    }

    pub fn session(&self) -> Result<Session<'_, T, W>> {
        Ok(Session {
            model: self,
            cache: KVCache::new(&self.config)?,
        })
    }

    /// Autoregressive decoding: prefill `prompt`, then emit up to `max_new`
    /// ids, stopping early on the configured EOS id (which is not emitted).
    pub fn generate(&self, prompt: &[usize], max_new: usize, mode: SamplingMode, seed: u64) -> Result<Vec<usize>> {
        if prompt.is_empty() {
            return Err(Error::InvalidArgument("prompt must not be empty".into()));
        }
        if max_new == 0 {
            return Err(Error::InvalidArgument("max_new must be at least 1".into()));
        }
        mode.validate()?;
        let mut rng = Rng::new(seed);
        let mut session = self.session()?;
        let mut logits = session.feed(prompt)?;
        let mut out = Vec::with_capacity(max_new);
        loop {
            let next = select_token(&logits, mode, &mut rng)?;
            if Some(next) == self.config.eos_id {
                break;
            }
            out.push(next);
            if out.len() == max_new {
                break;
            }
            logits = session.feed(&[next])?;
        }
        Ok(out)
    }
}

/// A decoding session owning its cache.
pub struct Session<'m, T: Element, W> {
    model: &'m Transformer<T, W>,
    cache: KVCache<T>,
}

impl<T: Element, W: Linear<T> + TokenTable<T>> Session<'_, T, W> {
    /// Runs `tokens` through the model and returns the last position's logits.
    pub fn feed(&mut self, tokens: &[usize]) -> Result<Vec<T>> {
        let logits = self.model.forward(tokens, Some(&mut self.cache))?;
        Ok(logits.row(tokens.len() - 1).to_vec())
    }

    pub fn tokens_seen(&self) -> usize {
        self.cache.tokens_seen()
    }

    pub fn cache(&self) -> &KVCache<T> {
        &self.cache
    }
}

/// Next-token selection rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SamplingMode {
    Greedy,
    /// Keep the `top_k` largest logits, divide by `temperature`, sample.
    Sample { temperature: f64, top_k: usize },
}

impl SamplingMode {
    fn validate(&self) -> Result<()> {
        match *self {
            SamplingMode::Greedy => Ok(()),
            SamplingMode::Sample { temperature, top_k } => {
                if !(temperature.is_finite() && temperature > 0.0) {
                    return Err(Error::InvalidArgument(format!(
                        "temperature must be positive, got {temperature}"
                    )));
                }
                if top_k == 0 {
                    return Err(Error::InvalidArgument("top_k must be at least 1".into()));
                }
                Ok(())
            }
        }
    }
}

/// Argmax with the lowest index winning ties.
pub fn argmax<T: Element>(logits: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}

pub fn select_token<T: Element>(logits: &[T], mode: SamplingMode, rng: &mut Rng) -> Result<usize> {
    mode.validate()?;
    match mode {
        SamplingMode::Greedy => Ok(argmax(logits)),
        SamplingMode::Sample { temperature, top_k } => {
            let mut order: Vec<usize> = (0..logits.len()).collect();
            order.sort_by(|&a, &b| {
                logits[b]
                    .partial_cmp(&logits[a])
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.cmp(&b))
            });
            order.truncate(top_k.min(logits.len()));
            let scaled: Vec<f64> = order.iter().map(|&i| logits[i].as_f64() / temperature).collect();
            let max = scaled[0];
            let weights: Vec<f64> = scaled.iter().map(|s| (s - max).exp()).collect();
            let total: f64 = weights.iter().sum();
            let mut u = rng.uniform() * total;
            for (&i, &w) in order.iter().zip(&weights) {
                if u < w {
                    return Ok(i);
                }
                u -= w;
            }
            Ok(order[0])
        }
    }
}

/// Random initialization: matrices normal(0, 0.02²), norm gains 1.
pub fn init_model<T: Element>(config: &ModelConfig, seed: u64) -> Result<Model<T>> {
    config.validate()?;
    let mut rng = Rng::new(seed);
    let (dim, vocab, ffn) = (config.dim, config.vocab_size, config.ffn_dim);
    let token_embedding = Tensor::randn(&[vocab, dim], INIT_STD, &mut rng)?;
    let mut blocks = Vec::with_capacity(config.n_layers);
    for l in 0..config.n_layers {
        let kv = config.kv_dim_at(l);
        let attn = AttentionWeights {
            w_q: Tensor::randn(&[dim, dim], INIT_STD, &mut rng)?,
            w_k: Tensor::randn(&[dim, kv], INIT_STD, &mut rng)?,
            w_v: Tensor::randn(&[dim, kv], INIT_STD, &mut rng)?,
            w_o: Tensor::randn(&[dim, dim], INIT_STD, &mut rng)?,
            n_heads: config.n_heads,
            kv_heads: config.kv_heads_at(l),
        };
        let ffn = FfnWeights {
            w_gate: Tensor::randn(&[dim, ffn], INIT_STD, &mut rng)?,
            w_up: Tensor::randn(&[dim, ffn], INIT_STD, &mut rng)?,
            w_down: Tensor::randn(&[ffn, dim], INIT_STD, &mut rng)?,
        };
        blocks.push(Block {
            attn,
            ffn,
            norm_attn: NormWeight::ones(dim, config.norm_eps)?,
            norm_ffn: NormWeight::ones(dim, config.norm_eps)?,
        });
    }
    let final_norm = NormWeight::ones(dim, config.norm_eps)?;
    let output_head = if config.tie_embeddings {
        None
    } else {
        Some(Tensor::randn(&[vocab, dim], INIT_STD, &mut rng)?)
    };
    Ok(Transformer {
        config: config.clone(),
        token_embedding,
        blocks,
        final_norm,
        output_head,
    })
}

/// Canonical tensor names in storage order: `embed`, then per layer
/// `layer.{i}.{wq,wk,wv,wo,wgate,wup,wdown,norm_attn,norm_ffn}`, then
/// `final_norm` and, unless tied, `head`.
pub fn tensor_names(config: &ModelConfig) -> Vec<String> {
    let mut names = vec!["embed".to_string()];
    for l in 0..config.n_layers {
        for part in LAYER_PARTS {
            names.push(format!("layer.{l}.{part}"));
        }
    }
    names.push("final_norm".into());
    if !config.tie_embeddings {
        names.push("head".into());
    }
    names
}

pub(crate) const LAYER_PARTS: [&str; 9] = [
    "wq",
    "wk",
    "wv",
    "wo",
    "wgate",
    "wup",
    "wdown",
    "norm_attn",
    "norm_ffn",
];

impl<T: Element, W> Transformer<T, W> {
    /// Every stored tensor in canonical order, paired with its name. Matrices
    /// go through `matrix`, norm gains through `norm`.
    pub(crate) fn visit<'a, R>(
        &'a self,
        mut matrix: impl FnMut(&'a W) -> R,
        mut norm: impl FnMut(&'a Tensor<T>) -> R,
    ) -> Vec<(String, R)> {
        let names = tensor_names(&self.config);
        let mut items = Vec::with_capacity(names.len());
        items.push(matrix(&self.token_embedding));
        for b in &self.blocks {
            items.push(matrix(&b.attn.w_q));
            items.push(matrix(&b.attn.w_k));
            items.push(matrix(&b.attn.w_v));
            items.push(matrix(&b.attn.w_o));
            items.push(matrix(&b.ffn.w_gate));
            items.push(matrix(&b.ffn.w_up));
            items.push(matrix(&b.ffn.w_down));
            items.push(norm(&b.norm_attn.gain));
            items.push(norm(&b.norm_ffn.gain));
        }
        items.push(norm(&self.final_norm.gain));
        if let Some(h) = &self.output_head {
            items.push(matrix(h));
        }
        names.into_iter().zip(items).collect()
    }
}

impl<T: Element> Model<T> {
    pub fn tensors(&self) -> Vec<(String, &Tensor<T>)> {
        self.visit(|m| m, |n| n)
    }

    /// Mutable access to every tensor in canonical order.
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.token_embedding];
        for b in &mut self.blocks {
            out.push(&mut b.attn.w_q);
            out.push(&mut b.attn.w_k);
            out.push(&mut b.attn.w_v);
            out.push(&mut b.attn.w_o);
            out.push(&mut b.ffn.w_gate);
            out.push(&mut b.ffn.w_up);
            out.push(&mut b.ffn.w_down);
            out.push(&mut b.norm_attn.gain);
            out.push(&mut b.norm_ffn.gain);
        }
        out.push(&mut self.final_norm.gain);
        if let Some(h) = &mut self.output_head {
            out.push(h);
        }
        out
    }

    /// Number of stored scalars.
    pub fn num_scalars(&self) -> u64 {
        self.tensors().iter().map(|(_, t)| t.len() as u64).sum()
    }

    /// Same architecture with every scalar set to zero; used as a gradient
    /// accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(T::zero());
        }
        z
    }

    pub fn cast<U: Element>(&self) -> Model<U> {
        let norm = |n: &NormWeight<T>| NormWeight {
            gain: n.gain.cast(),
            eps: n.eps,
        };
        Transformer {
            config: self.config.clone(),
            token_embedding: self.token_embedding.cast(),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    attn: AttentionWeights {
                        w_q: b.attn.w_q.cast(),
                        w_k: b.attn.w_k.cast(),
                        w_v: b.attn.w_v.cast(),
                        w_o: b.attn.w_o.cast(),
                        n_heads: b.attn.n_heads,
                        kv_heads: b.attn.kv_heads,
                    },
                    ffn: FfnWeights {
                        w_gate: b.ffn.w_gate.cast(),
                        w_up: b.ffn.w_up.cast(),
                        w_down: b.ffn.w_down.cast(),
                    },
                    norm_attn: norm(&b.norm_attn),
                    norm_ffn: norm(&b.norm_ffn),
                })
                .collect(),
            final_norm: norm(&self.final_norm),
            output_head: self.output_head.as_ref().map(|h| h.cast()),
        }
    }

    /// All scalars concatenated in canonical order.
    pub fn to_flat(&self) -> Vec<T> {
        self.tensors().iter().flat_map(|(_, t)| t.data().iter().copied()).collect()
    }

    /// Overwrites every scalar from `flat` (canonical order).
    pub fn set_flat(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() as u64 != self.num_scalars() {
            return Err(Error::InvalidArgument(format!(
                "{} values for {} parameters",
                flat.len(),
                self.num_scalars()
            )));
        }
        let mut off = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }
}
