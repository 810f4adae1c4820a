use serde::{Deserialize, Serialize};

use super::backprop::{accumulate_backward, forward_tape};
use super::loss::{dpo_loss, log_prob, log_sum_exp, PairLogps};
use super::{MicroStats, Objective};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tensor::Tensor;

/// Longest prompt accepted by the preference stage, in tokens.
pub const MAX_PROMPT: usize = 1024;

/// A prompt with a preferred and a dispreferred completion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub prompt: Vec<usize>,
    pub chosen: Vec<usize>,
    pub rejected: Vec<usize>,
}

impl PreferencePair {
    pub fn new(prompt: Vec<usize>, chosen: Vec<usize>, rejected: Vec<usize>) -> Result<Self> {
        let pair = Self {
            prompt,
            chosen,
            rejected,
        };
        pair.validate(MAX_PROMPT)?;
        Ok(pair)
    }

    pub fn validate(&self, max_prompt: usize) -> Result<()> {
        if self.prompt.is_empty() {
            return Err(Error::InvalidArgument("empty prompt".into()));
        }
        if self.prompt.len() > max_prompt {
            return Err(Error::InvalidArgument(format!(
                "prompt of {} tokens exceeds the {max_prompt}-token limit",
                self.prompt.len()
            )));
        }
        if self.chosen.is_empty() || self.rejected.is_empty() {
            return Err(Error::InvalidArgument("empty completion".into()));
        }
        if self.chosen == self.rejected {
            return Err(Error::InvalidArgument("chosen and rejected completions are identical".into()));
        }
        Ok(())
    }
}

fn check_inputs(model: &Model<f64>, prompt: &[usize], completion: &[usize]) -> Result<Vec<usize>> {
    if prompt.is_empty() {
        return Err(Error::InvalidArgument("sequence_logprob needs a non-empty prompt".into()));
    }
    let needed = prompt.len() + completion.len();
    if needed > model.config.context_length + 1 {
        return Err(Error::ContextOverflow {
            needed,
            context: model.config.context_length,
        });
    }
    let mut input = prompt.to_vec();
    input.extend_from_slice(&completion[..completion.len() - 1]);
    Ok(input)
}

/// `Σ log p(completion[i] | prompt, completion[..i])`. Prompt tokens
/// contribute nothing; an empty completion scores 0.
pub fn sequence_logprob(model: &Model<f64>, prompt: &[usize], completion: &[usize]) -> Result<f64> {
    if completion.is_empty() {
        return Ok(0.0);
    }
    let input = check_inputs(model, prompt, completion)?;
    let logits = model.forward(&input, None)?;
    let start = prompt.len() - 1;
    Ok(completion
        .iter()
        .enumerate()
        .map(|(i, &tok)| log_prob(logits.row(start + i), tok))
        .sum())
}

/// [`sequence_logprob`] that also adds `weight` times its gradient into
/// `grads`.
pub fn sequence_logprob_grad(
    model: &Model<f64>,
    prompt: &[usize],
    completion: &[usize],
    weight: f64,
    grads: &mut Model<f64>,
) -> Result<f64> {
    if completion.is_empty() {
        return Ok(0.0);
    }
    let input = check_inputs(model, prompt, completion)?;
    let (logits, tape) = forward_tape(model, &input)?;
    let (rows, vocab) = logits.dims2()?;
    let start = prompt.len() - 1;
    let mut dlogits = Tensor::zeros(&[rows, vocab])?;
    let mut total = 0.0;
    for (i, &tok) in completion.iter().enumerate() {
        let row = logits.row(start + i);
        let (lse, max) = log_sum_exp(row);
        total += row[tok] - max - lse;
        for (d, &v) in dlogits.row_mut(start + i).iter_mut().zip(row) {
            *d = -weight * (v - max - lse).exp();
        }
        dlogits.row_mut(start + i)[tok] += weight;
    }
    accumulate_backward(model, &tape, &dlogits, grads)?;
    Ok(total)
}

/// Preference objective against a frozen reference model. Micro-batch `k`
/// of `accum` holds the pairs whose index is congruent to `k` modulo
/// `accum`; its loss and margin are means over those pairs.
pub struct DpoObjective {
    pairs: Vec<PreferencePair>,
    reference: Vec<PairLogps>,
    beta: f64,
}

impl DpoObjective {
    /// Scores every pair under `reference` once; the reference is not kept.
    pub fn new(reference: &Model<f64>, pairs: Vec<PreferencePair>, beta: f64, max_prompt: usize) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::InvalidArgument("no preference pairs".into()));
        }
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::InvalidArgument(format!("beta must be positive, got {beta}")));
        }
        let mut ref_logps = Vec::with_capacity(pairs.len());
        for p in &pairs {
            p.validate(max_prompt)?;
            ref_logps.push(PairLogps {
                chosen: sequence_logprob(reference, &p.prompt, &p.chosen)?,
                rejected: sequence_logprob(reference, &p.prompt, &p.rejected)?,
            });
        }
        Ok(Self {
            pairs,
            reference: ref_logps,
            beta,
        })
    }

    pub fn pairs(&self) -> &[PreferencePair] {
        &self.pairs
    }

    /// Mean loss and margin over all pairs for `policy`, without gradients.
    pub fn evaluate(&self, policy: &Model<f64>) -> Result<MicroStats> {
        let mut loss = 0.0;
        let mut margin = 0.0;
        for (p, r) in self.pairs.iter().zip(&self.reference) {
            let pol = PairLogps {
                chosen: sequence_logprob(policy, &p.prompt, &p.chosen)?,
                rejected: sequence_logprob(policy, &p.prompt, &p.rejected)?,
            };
            let out = dpo_loss(pol, *r, self.beta)?;
            loss += out.loss;
            margin += out.margin;
        }
        let n = self.pairs.len() as f64;
        Ok(MicroStats {
            loss: loss / n,
            margin: Some(margin / n),
        })
    }
}

impl Objective for DpoObjective {
    fn accumulate(
        &mut self,
        model: &Model<f64>,
        _step: usize,
        micro: usize,
        accum: usize,
        weight: f64,
        grads: &mut Model<f64>,
    ) -> Result<MicroStats> {
        if self.pairs.len() < accum {
            return Err(Error::InvalidArgument(format!(
                "{} preference pairs cannot fill {accum} accumulation steps",
                self.pairs.len()
            )));
        }
        let members: Vec<usize> = (micro..self.pairs.len()).step_by(accum).collect();
        let w = weight / members.len() as f64;
        let mut loss = 0.0;
        let mut margin = 0.0;
        for &i in &members {
            let p = &self.pairs[i];
            // Score first to learn the loss derivative, then backpropagate
            // each completion with that derivative as its weight.
            let pol = PairLogps {
                chosen: sequence_logprob(model, &p.prompt, &p.chosen)?,
                rejected: sequence_logprob(model, &p.prompt, &p.rejected)?,
            };
            let out = dpo_loss(pol, self.reference[i], self.beta)?;
            sequence_logprob_grad(model, &p.prompt, &p.chosen, w * out.d_chosen, grads)?;
            sequence_logprob_grad(model, &p.prompt, &p.rejected, w * out.d_rejected, grads)?;
            loss += out.loss;
            margin += out.margin;
        }
        let n = members.len() as f64;
        Ok(MicroStats {
            loss: loss / n,
            margin: Some(margin / n),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, ModelConfig};
    use crate::train::{train_loop, HyperProfile};

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            dim: 16,
            ffn_dim: 32,
            n_heads: 4,
            kv_heads: 2.into(),
            vocab_size: 17,
            context_length: 32,
            rope_theta: 500_000.0,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn empty_and_single_token_completions() {
        let m = init_model::<f64>(&cfg(), 1).unwrap();
        assert_eq!(sequence_logprob(&m, &[1, 2], &[]).unwrap(), 0.0);
        let logits = m.forward(&[1, 2, 3], None).unwrap();
        let want = log_prob(logits.row(2), 9);
        assert!((sequence_logprob(&m, &[1, 2, 3], &[9]).unwrap() - want).abs() < 1e-14);
    }

    #[test]
    fn matches_stepwise_probabilities() {
        let m = init_model::<f64>(&cfg(), 2).unwrap();
        let prompt = [4, 1, 7];
        let completion = [3, 3, 12];
        let mut session = m.session().unwrap();
        let mut logits = session.feed(&prompt).unwrap();
        let mut product = 1.0;
        for &tok in &completion {
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|v| (v - max).exp()).sum();
            product *= (logits[tok] - max).exp() / z;
            logits = session.feed(&[tok]).unwrap();
        }
        let got = sequence_logprob(&m, &prompt, &completion).unwrap();
        assert!((got - product.ln()).abs() < 1e-10);
    }

    #[test]
    fn gradient_version_agrees_on_value() {
        let m = init_model::<f64>(&cfg(), 3).unwrap();
        let mut g = m.zeros_like();
        let a = sequence_logprob(&m, &[2, 5], &[1, 8, 6]).unwrap();
        let b = sequence_logprob_grad(&m, &[2, 5], &[1, 8, 6], 1.0, &mut g).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn overflow_and_invalid_pairs() {
        let m = init_model::<f64>(&cfg(), 4).unwrap();
        assert!(matches!(
            sequence_logprob(&m, &[1; 30], &[2; 5]),
            Err(Error::ContextOverflow { .. })
        ));
        assert!(PreferencePair::new(vec![1; 1024], vec![2], vec![3]).is_ok());
        assert!(PreferencePair::new(vec![1; 1025], vec![2], vec![3]).is_err());
        assert!(PreferencePair::new(vec![1], vec![2], vec![2]).is_err());
        assert!(PreferencePair::new(vec![], vec![2], vec![3]).is_err());
    }

    #[test]
    fn one_step_increases_margin() {
        let m0 = init_model::<f64>(&cfg(), 5).unwrap();
        let pairs = vec![
            PreferencePair::new(vec![1, 2, 3], vec![4, 5], vec![6, 7]).unwrap(),
            PreferencePair::new(vec![3, 2, 1], vec![8, 9], vec![10, 11]).unwrap(),
        ];
        let mut obj = DpoObjective::new(&m0, pairs, 0.01, MAX_PROMPT).unwrap();
        let start = obj.evaluate(&m0).unwrap();
        assert!((start.loss - std::f64::consts::LN_2).abs() < 1e-12);
        let mut m = m0.clone();
        train_loop(&mut m, &mut obj, &HyperProfile::dpo(), 1, |_| {}).unwrap();
        assert!(obj.evaluate(&m).unwrap().margin.unwrap() > 0.0);
    }
}
