//! Training: next-token cross-entropy (CPT and SFT), direct preference
//! optimization, AdamW, warmup plus cosine schedules, gradient
//! accumulation and a finite-difference gradient checker.
//!
//! All training runs on `Model<f64>`.

pub mod backprop;
pub mod dpo;
pub mod gradcheck;
pub mod loss;
pub mod optim;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;

pub use dpo::{sequence_logprob, DpoObjective, PreferencePair};
pub use gradcheck::{grad_check, gradcheck_suite, GradCheckReport};
pub use loss::{cross_entropy, dpo_loss, DpoOutput, PairLogps};
pub use optim::{adamw_step, AdamWConfig, AdamWState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Cpt,
    Sft,
    Dpo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Cosine,
    Constant,
}

/// Hyperparameters of one training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperProfile {
    pub name: String,
    pub stage: Stage,
    pub peak_lr: f64,
    pub warmup_ratio: f64,
    pub schedule: Schedule,
    pub max_seq: usize,
    pub grad_accum: usize,
    pub beta: Option<f64>,
    pub max_prompt: Option<usize>,
    pub adamw: AdamWConfig,
}

pub const PROFILE_NAMES: [&str; 4] = ["sec41_cpt", "table1_peak", "sft", "dpo"];

impl HyperProfile {
    fn base(name: &str, stage: Stage, peak_lr: f64, warmup_ratio: f64, schedule: Schedule) -> Self {
        Self {
            name: name.to_string(),
            stage,
            peak_lr,
            warmup_ratio,
            schedule,
            max_seq: 4096,
            grad_accum: 1,
            beta: None,
            max_prompt: None,
            adamw: AdamWConfig::default(),
        }
    }

    /// Continued pretraining: peak 2.0e-4, 10% warmup, cosine decay.
    pub fn sec41_cpt() -> Self {
        Self::base("sec41_cpt", Stage::Cpt, 2.0e-4, 0.1, Schedule::Cosine)
    }

    /// Continued pretraining at the 3.6e-5 peak.
    pub fn table1_peak() -> Self {
        Self::base("table1_peak", Stage::Cpt, 3.6e-5, 0.1, Schedule::Cosine)
    }

    /// Supervised fine-tuning: peak 2.0e-5, cosine decay, no warmup.
    pub fn sft() -> Self {
        Self::base("sft", Stage::Sft, 2.0e-5, 0.0, Schedule::Cosine)
    }

    /// Preference optimization: lr 5.0e-7 held constant, β 0.01,
    /// prompts up to 1024 tokens, two accumulation steps.
    pub fn dpo() -> Self {
        Self {
            grad_accum: 2,
            beta: Some(0.01),
            max_prompt: Some(1024),
            ..Self::base("dpo", Stage::Dpo, 5.0e-7, 0.0, Schedule::Constant)
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "sec41_cpt" => Ok(Self::sec41_cpt()),
            "table1_peak" => Ok(Self::table1_peak()),
            "sft" => Ok(Self::sft()),
            "dpo" => Ok(Self::dpo()),
            other => Err(Error::InvalidArgument(format!(
                "unknown profile {other:?}; expected one of {PROFILE_NAMES:?}"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(format!("profile {}: {what}", self.name)));
        if !(self.peak_lr.is_finite() && self.peak_lr >= 0.0) {
            return bad("peak_lr must be finite and non-negative");
        }
        if !(0.0..=1.0).contains(&self.warmup_ratio) {
            return bad("warmup_ratio must lie in [0, 1]");
        }
        if self.grad_accum == 0 || self.max_seq == 0 {
            return bad("grad_accum and max_seq must be positive");
        }
        if self.stage == Stage::Dpo && !self.beta.is_some_and(|b| b > 0.0) {
            return bad("preference stage needs beta > 0");
        }
        Ok(())
    }

    pub fn warmup_steps(&self, total_steps: usize) -> usize {
        (self.warmup_ratio * total_steps as f64).round() as usize
    }
}

/// Learning rate at `step` of `total_steps`: linear ramp from 0 to the peak
/// over the warmup steps, then cosine decay to 0 at `total_steps` (or the
/// peak held, for a constant schedule).
pub fn lr_at(step: usize, total_steps: usize, profile: &HyperProfile) -> Result<f64> {
    if total_steps == 0 || step > total_steps {
        return Err(Error::InvalidArgument(format!(
            "step {step} outside 0..={total_steps}"
        )));
    }
    let peak = profile.peak_lr;
    let warm = profile.warmup_steps(total_steps);
    if step < warm {
        return Ok(peak * step as f64 / warm as f64);
    }
    if profile.schedule == Schedule::Constant || total_steps == warm {
        return Ok(peak);
    }
    let progress = (step - warm) as f64 / (total_steps - warm) as f64;
    Ok(peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub margin: Option<f64>,
}

/// Loss and optional preference margin of one micro-batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MicroStats {
    pub loss: f64,
    pub margin: Option<f64>,
}

/// A differentiable training objective evaluated one micro-batch at a time.
pub trait Objective {
    /// Evaluates micro-batch `micro` (of `accum`) at optimizer step `step`
    /// and adds `weight` times its gradient into `grads`.
    fn accumulate(
        &mut self,
        model: &Model<f64>,
        step: usize,
        micro: usize,
        accum: usize,
        weight: f64,
        grads: &mut Model<f64>,
    ) -> Result<MicroStats>;
}

/// Runs `total_steps` optimizer steps (numbered from 1). Each step averages
/// the gradients of `profile.grad_accum` micro-batches and applies AdamW at
/// `lr_at(step)`. Every record is passed to `on_step` as it is produced.
pub fn train_loop<O: Objective>(
    model: &mut Model<f64>,
    objective: &mut O,
    profile: &HyperProfile,
    total_steps: usize,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<Vec<StepRecord>> {
    profile.validate()?;
    let mut state = AdamWState::for_model(model, profile.adamw)?;
    let accum = profile.grad_accum;
    let weight = 1.0 / accum as f64;
    let mut log = Vec::with_capacity(total_steps);
    let mut grads = model.zeros_like();
    for step in 1..=total_steps {
        for t in grads.tensors_mut() {
            t.fill(0.0);
        }
        let mut loss = 0.0;
        let mut margin: Option<f64> = None;
        for micro in 0..accum {
            let stats = objective.accumulate(model, step, micro, accum, weight, &mut grads)?;
            loss += stats.loss * weight;
            if let Some(m) = stats.margin {
                *margin.get_or_insert(0.0) += m * weight;
            }
        }
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        let lr = lr_at(step, total_steps, profile)?;
        optim::adamw_step_model(model, &grads, &mut state, lr)?;
        let rec = StepRecord {
            step,
            loss,
            lr,
            margin,
        };
        on_step(&rec);
        log.push(rec);
    }
    Ok(log)
}

/// Next-token cross-entropy over batches of token sequences. The micro-batch
/// loss is the mean over its sequences of each sequence's token-mean loss.
pub struct LmObjective<F> {
    batches: F,
    max_seq: usize,
}

impl<F> LmObjective<F>
where
    F: FnMut(usize, usize) -> Vec<Vec<usize>>,
{
    /// `batches(step, micro)` returns the sequences of one micro-batch.
    pub fn new(batches: F, max_seq: usize) -> Self {
        Self { batches, max_seq }
    }
}

impl<F> Objective for LmObjective<F>
where
    F: FnMut(usize, usize) -> Vec<Vec<usize>>,
{
    fn accumulate(
        &mut self,
        model: &Model<f64>,
        step: usize,
        micro: usize,
        _accum: usize,
        weight: f64,
        grads: &mut Model<f64>,
    ) -> Result<MicroStats> {
        let batch = (self.batches)(step, micro);
        if batch.is_empty() {
            return Err(Error::InvalidArgument(format!("empty batch at step {step}")));
        }
        if let Some(s) = batch.iter().find(|s| s.len() > self.max_seq) {
            return Err(Error::InvalidArgument(format!(
                "sequence of {} tokens exceeds max_seq {}",
                s.len(),
                self.max_seq
            )));
        }
        let w = weight / batch.len() as f64;
        let mut loss = 0.0;
        for seq in &batch {
            loss += backprop::lm_loss_grad(model, seq, w, grads)?;
        }
        Ok(MicroStats {
            loss: loss / batch.len() as f64,
            margin: None,
        })
    }
}

/// Mean next-token loss of `sequences` under `model` (no gradient).
pub fn eval_lm_loss(model: &Model<f64>, sequences: &[Vec<usize>]) -> Result<f64> {
    if sequences.is_empty() {
        return Err(Error::InvalidArgument("no sequences".into()));
    }
    let mut total = 0.0;
    for seq in sequences {
        if seq.len() < 2 {
            return Err(Error::InvalidArgument("sequence needs at least two tokens".into()));
        }
        let logits = model.forward(&seq[..seq.len() - 1], None)?;
        total += cross_entropy(&logits, &seq[1..])?.0;
    }
    Ok(total / sequences.len() as f64)
}
