//! Decode-throughput benchmark: one warmup run, then `repeats` timed runs of
//! prefill plus greedy decoding, reporting the median run.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::model::{argmax, TokenTable, Transformer};
use crate::persist::AnyModel;
use crate::tensor::{Element, Rng};

pub const DEFAULT_GEN_TOKENS: usize = 512;
pub const DEFAULT_PROMPT_TOKENS: usize = 32;
pub const DEFAULT_REPEATS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub prefill_tokens: usize,
    pub generated_tokens: usize,
    pub prefill_seconds: f64,
    pub decode_seconds: f64,
    pub decode_tokens_per_sec: f64,
    pub model_format: String,
    pub model_bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BenchOptions {
    pub prompt_tokens: usize,
    pub gen_tokens: usize,
    pub repeats: usize,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            prompt_tokens: DEFAULT_PROMPT_TOKENS,
            gen_tokens: DEFAULT_GEN_TOKENS,
            repeats: DEFAULT_REPEATS,
            seed: 0,
        }
    }
}

struct Run {
    generated: usize,
    prefill_seconds: f64,
    decode_seconds: f64,
}

fn timed_run<T: Element, W: Linear<T> + TokenTable<T>>(
    model: &Transformer<T, W>,
    prompt: &[usize],
    gen_tokens: usize,
) -> Result<Run> {
    let mut session = model.session()?;
    let start = Instant::now();
    let mut logits = session.feed(prompt)?;
    let prefill_seconds = start.elapsed().as_secs_f64();
    let start = Instant::now();
    let mut generated = 0;
    while generated < gen_tokens {
        let next = argmax(&logits);
        if Some(next) == model.config.eos_id {
            break;
        }
        generated += 1;
        if generated < gen_tokens {
            logits = session.feed(&[next])?;
        }
    }
    Ok(Run {
        generated,
        prefill_seconds,
        decode_seconds: start.elapsed().as_secs_f64(),
    })
}

fn measure<T: Element, W: Linear<T> + TokenTable<T>>(
    model: &Transformer<T, W>,
    prompt: &[usize],
    opts: BenchOptions,
) -> Result<Run> {
    timed_run(model, prompt, opts.gen_tokens)?;
    let mut runs = (0..opts.repeats)
        .map(|_| timed_run(model, prompt, opts.gen_tokens))
        .collect::<Result<Vec<_>>>()?;
    runs.sort_by(|a, b| {
        let rate = |r: &Run| r.generated as f64 / r.decode_seconds.max(f64::MIN_POSITIVE);
        rate(a).total_cmp(&rate(b))
    });
    Ok(runs.swap_remove(opts.repeats / 2))
}

/// The prompt [`bench`] uses: `opts.prompt_tokens` ids drawn from the byte
/// range with `opts.seed`.
pub fn bench_prompt(vocab_size: usize, opts: BenchOptions) -> Vec<usize> {
    let mut rng = Rng::new(opts.seed);
    let pool = vocab_size.min(256);
    (0..opts.prompt_tokens).map(|_| rng.below(pool)).collect()
}

/// Benchmarks `model` with the deterministic prompt from [`bench_prompt`].
pub fn bench(model: &AnyModel, opts: BenchOptions) -> Result<BenchReport> {
    let cfg = model.config();
    if opts.prompt_tokens == 0 || opts.gen_tokens == 0 || opts.repeats == 0 {
        return Err(Error::InvalidArgument(
            "prompt tokens, generated tokens and repeats must all be positive".into(),
        ));
    }
    let needed = opts.prompt_tokens + opts.gen_tokens - 1;
    if needed > cfg.context_length {
        return Err(Error::ContextOverflow {
            needed,
            context: cfg.context_length,
        });
    }
    let prompt = bench_prompt(cfg.vocab_size, opts);
    let run = match model {
        AnyModel::F32(m) => measure(m, &prompt, opts)?,
        AnyModel::F64(m) => measure(m, &prompt, opts)?,
        AnyModel::Quant(m) => measure(m, &prompt, opts)?,
    };
    let decode_tokens_per_sec = if run.decode_seconds > 0.0 {
        run.generated as f64 / run.decode_seconds
    } else {
        0.0
    };
    Ok(BenchReport {
        prefill_tokens: prompt.len(),
        generated_tokens: run.generated,
        prefill_seconds: run.prefill_seconds,
        decode_seconds: run.decode_seconds,
        decode_tokens_per_sec,
        model_format: model.storage().name().to_string(),
        model_bytes: model.encoded_len(),
    })
}
