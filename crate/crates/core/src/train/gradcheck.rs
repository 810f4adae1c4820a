//! Central-difference gradient checking.

use serde::{Deserialize, Serialize};

use super::backprop::{
    attention_backward, attention_forward_tape, embedding_backward, lm_loss_grad, output_head_backward,
    rmsnorm_backward, rope_backward, swiglu_backward,
};
use super::dpo::{sequence_logprob, sequence_logprob_grad};
use super::loss::{cross_entropy, dpo_loss, PairLogps};
use crate::error::{Error, Result};
use crate::layers::{rmsnorm, rope_apply, swiglu_ffn, vgqa_attention, AttentionWeights, FfnWeights, NormWeight};
use crate::model::{init_model, Model, ModelConfig};
use crate::tensor::{matmul_bt, Rng, Tensor};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;
/// Minimum number of coordinates compared per check.
pub const MIN_COORDS: usize = 64;
/// Denominator floor of the relative error, so that gradients near zero are
/// compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

/// `|a - n| / max(|a|, |n|, REL_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares `analytic[i]` against `(L(p + h·e_i) - L(p - h·e_i)) / 2h` for
/// every `i` in `coords`.
pub fn grad_check(
    name: &str,
    mut loss_fn: impl FnMut(&[f64]) -> Result<f64>,
    params: &[f64],
    analytic: &[f64],
    coords: &[usize],
    h: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("step {h} must be positive")));
    }
    if params.len() != analytic.len() {
        return Err(Error::InvalidArgument(format!(
            "{} parameters but {} gradient entries",
            params.len(),
            analytic.len()
        )));
    }
    let mut p = params.to_vec();
    let mut max_rel_err: f64 = 0.0;
    for &i in coords {
        if i >= p.len() {
            return Err(Error::InvalidArgument(format!("coordinate {i} out of range")));
        }
        let orig = p[i];
        p[i] = orig + h;
        let plus = loss_fn(&p)?;
        p[i] = orig - h;
        let minus = loss_fn(&p)?;
        p[i] = orig;
        if !(plus.is_finite() && minus.is_finite()) {
            return Err(Error::NonFinite("grad_check loss"));
        }
        let numeric = (plus - minus) / (2.0 * h);
        max_rel_err = max_rel_err.max(relative_error(analytic[i], numeric));
    }
    Ok(GradCheckReport {
        name: name.to_string(),
        checked: coords.len(),
        max_rel_err,
        passed: max_rel_err <= tol,
    })
}

/// Every coordinate when there are at most `n`, else `n` distinct random ones.
pub fn sample_coords(len: usize, n: usize, rng: &mut Rng) -> Vec<usize> {
    if len <= n {
        return (0..len).collect();
    }
    let mut picked = std::collections::BTreeSet::new();
    while picked.len() < n {
        picked.insert(rng.below(len));
    }
    picked.into_iter().collect()
}

/// Flat parameter vector of several tensors.
fn flatten(parts: &[&Tensor<f64>]) -> Vec<f64> {
    parts.iter().flat_map(|t| t.data().iter().copied()).collect()
}

/// Splits a flat vector back into tensors shaped like `like`.
fn unflatten(flat: &[f64], like: &[&Tensor<f64>]) -> Result<Vec<Tensor<f64>>> {
    let mut out = Vec::with_capacity(like.len());
    let mut at = 0;
    for t in like {
        out.push(Tensor::from_vec(t.shape(), flat[at..at + t.len()].to_vec())?);
        at += t.len();
    }
    Ok(out)
}

fn weighted_sum(y: &Tensor<f64>, c: &Tensor<f64>) -> f64 {
    y.data().iter().zip(c.data()).map(|(a, b)| a * b).sum()
}

fn randn(shape: &[usize], std: f64, rng: &mut Rng) -> Result<Tensor<f64>> {
    Tensor::randn(shape, std, rng)
}

struct Suite<'a> {
    rng: Rng,
    sabotage: Option<&'a str>,
    reports: Vec<GradCheckReport>,
}

impl Suite<'_> {
    fn run(
        &mut self,
        name: &str,
        loss_fn: impl FnMut(&[f64]) -> Result<f64>,
        params: &[f64],
        mut analytic: Vec<f64>,
        coords: Option<Vec<usize>>,
    ) -> Result<()> {
        if self.sabotage == Some(name) {
            for g in &mut analytic {
                *g *= 1.01;
            }
        }
        let coords = coords.unwrap_or_else(|| sample_coords(params.len(), MIN_COORDS, &mut self.rng));
        let report = grad_check(name, loss_fn, params, &analytic, &coords, DEFAULT_STEP, DEFAULT_TOL)?;
        match self.reports.iter_mut().find(|r| r.name == name) {
            Some(r) => {
                r.checked += report.checked;
                r.max_rel_err = r.max_rel_err.max(report.max_rel_err);
                r.passed &= report.passed;
            }
            None => self.reports.push(report),
        }
        Ok(())
    }
}

/// Op names accepted by [`gradcheck_suite`]'s `sabotage` argument.
pub const SUITE_OPS: [&str; 10] = [
    "rmsnorm",
    "rope",
    "swiglu",
    "attention",
    "embedding",
    "output_head",
    "cross_entropy",
    "dpo_loss",
    "model_cross_entropy",
    "model_dpo",
];

/// Checks every analytic backward on three random shapes, then both losses
/// end to end through a model built from `config`. `sabotage` names an op
/// whose analytic gradient is deliberately scaled by 1.01, to exercise the
/// failure path.
pub fn gradcheck_suite(config: &ModelConfig, seed: u64, sabotage: Option<&str>) -> Result<Vec<GradCheckReport>> {
    if let Some(op) = sabotage {
        if !SUITE_OPS.contains(&op) {
            return Err(Error::InvalidArgument(format!("unknown op {op:?}; expected one of {SUITE_OPS:?}")));
        }
    }
    config.validate()?;
    let mut s = Suite {
        rng: Rng::new(seed),
        sabotage,
        reports: Vec::new(),
    };
    // (rows, dim, n_heads, kv_heads, ffn, window)
    let shapes = [
        (3usize, 8usize, 2usize, 1usize, 12usize, None),
        (5, 16, 4, 2, 24, Some(3)),
        (7, 12, 3, 3, 20, Some(2)),
    ];
    for (si, &(rows, dim, n_heads, kv_heads, ffn, window)) in shapes.iter().enumerate() {
        let rng = &mut s.rng;

        let x = randn(&[rows, dim], 1.0, rng)?;
        let gain = randn(&[dim], 0.5, rng)?.map(|g| 1.0 + g);
        let c = randn(&[rows, dim], 1.0, rng)?;
        let eps = 1e-5;
        let norm = NormWeight { gain: gain.clone(), eps };
        let (dx, dg) = rmsnorm_backward(&x, &norm, &c)?;
        let like = [&x, &gain];
        s.run(
            "rmsnorm",
            |p| {
                let t = unflatten(p, &like)?;
                let w = NormWeight { gain: t[1].clone(), eps };
                Ok(weighted_sum(&rmsnorm(&t[0], &w)?, &c))
            },
            &flatten(&like),
            flatten(&[&dx, &dg]),
            None,
        )?;

        let rng = &mut s.rng;
        let hd = dim / n_heads * 2;
        let xr = randn(&[rows, n_heads, hd], 1.0, rng)?;
        let cr = randn(&[rows, n_heads, hd], 1.0, rng)?;
        let positions: Vec<usize> = (0..rows).map(|i| 3 * i + 1).collect();
        let theta = 10_000.0;
        let dxr = rope_backward(&cr, &positions, theta)?;
        s.run(
            "rope",
            |p| {
                let t = Tensor::from_vec(xr.shape(), p.to_vec())?;
                Ok(weighted_sum(&rope_apply(&t, &positions, theta)?, &cr))
            },
            xr.data(),
            dxr.into_vec(),
            None,
        )?;

        let rng = &mut s.rng;
        let w = FfnWeights {
            w_gate: randn(&[dim, ffn], 0.3, rng)?,
            w_up: randn(&[dim, ffn], 0.3, rng)?,
            w_down: randn(&[ffn, dim], 0.3, rng)?,
        };
        let gate = crate::tensor::matmul(&x, &w.w_gate)?;
        let up = crate::tensor::matmul(&x, &w.w_up)?;
        let g = swiglu_backward(&x, &w, &gate, &up, &c)?;
        let like = [&x, &w.w_gate, &w.w_up, &w.w_down];
        s.run(
            "swiglu",
            |p| {
                let t = unflatten(p, &like)?;
                let [x, w_gate, w_up, w_down] = <[Tensor<f64>; 4]>::try_from(t).expect("four tensors");
                Ok(weighted_sum(&swiglu_ffn(&x, &FfnWeights { w_gate, w_up, w_down })?, &c))
            },
            &flatten(&like),
            flatten(&[&g.dx, &g.w_gate, &g.w_up, &g.w_down]),
            None,
        )?;

        let rng = &mut s.rng;
        let kvd = dim / n_heads * kv_heads;
        let aw = AttentionWeights {
            w_q: randn(&[dim, dim], 0.4, rng)?,
            w_k: randn(&[dim, kvd], 0.4, rng)?,
            w_v: randn(&[dim, kvd], 0.4, rng)?,
            w_o: randn(&[dim, dim], 0.4, rng)?,
            n_heads,
            kv_heads,
        };
        let positions: Vec<usize> = (0..rows).collect();
        let (_, tape) = attention_forward_tape(&x, &aw, &positions, theta, window)?;
        let g = attention_backward(&x, &aw, &tape, theta, &c)?;
        let like = [&x, &aw.w_q, &aw.w_k, &aw.w_v, &aw.w_o];
        s.run(
            "attention",
            |p| {
                let t = unflatten(p, &like)?;
                let [x, w_q, w_k, w_v, w_o] = <[Tensor<f64>; 5]>::try_from(t).expect("five tensors");
                let w = AttentionWeights {
                    w_q,
                    w_k,
                    w_v,
                    w_o,
                    n_heads,
                    kv_heads,
                };
                Ok(weighted_sum(&vgqa_attention(&x, &w, &positions, theta, window, None)?, &c))
            },
            &flatten(&like),
            flatten(&[&g.dx, &g.w_q, &g.w_k, &g.w_v, &g.w_o]),
            None,
        )?;

        let rng = &mut s.rng;
        let vocab = 2 * rows + 3;
        let table = randn(&[vocab, dim], 1.0, rng)?;
        let tokens: Vec<usize> = (0..rows).map(|_| rng.below(vocab)).collect();
        let mut dtable = Tensor::zeros(&[vocab, dim])?;
        embedding_backward(&tokens, &c, &mut dtable)?;
        let embed = |t: &Tensor<f64>| -> Result<Tensor<f64>> {
            let mut out = Tensor::zeros(&[tokens.len(), dim])?;
            for (r, &id) in tokens.iter().enumerate() {
                out.row_mut(r).copy_from_slice(t.row(id));
            }
            Ok(out)
        };
        // Half the coordinates from looked-up rows, so most are non-trivial.
        let mut coords: Vec<usize> = tokens.iter().flat_map(|&id| (0..dim).map(move |j| id * dim + j)).collect();
        coords.sort_unstable();
        coords.dedup();
        coords.extend(sample_coords(table.len(), MIN_COORDS, &mut s.rng));
        coords.sort_unstable();
        coords.dedup();
        s.run(
            "embedding",
            |p| Ok(weighted_sum(&embed(&Tensor::from_vec(table.shape(), p.to_vec())?)?, &c)),
            table.data(),
            dtable.into_vec(),
            Some(coords),
        )?;

        let rng = &mut s.rng;
        let cl = randn(&[rows, vocab], 1.0, rng)?;
        let (dh, dt) = output_head_backward(&x, &table, &cl)?;
        let like = [&x, &table];
        s.run(
            "output_head",
            |p| {
                let t = unflatten(p, &like)?;
                Ok(weighted_sum(&matmul_bt(&t[0], &t[1])?, &cl))
            },
            &flatten(&like),
            flatten(&[&dh, &dt]),
            None,
        )?;

        let rng = &mut s.rng;
        let logits = randn(&[rows, vocab], 2.0, rng)?;
        let targets: Vec<usize> = (0..rows).map(|_| rng.below(vocab)).collect();
        let (_, dl) = cross_entropy(&logits, &targets)?;
        s.run(
            "cross_entropy",
            |p| Ok(cross_entropy(&Tensor::from_vec(logits.shape(), p.to_vec())?, &targets)?.0),
            logits.data(),
            dl.into_vec(),
            None,
        )?;

        let rng = &mut s.rng;
        let beta = [0.01, 0.5, 3.0][si];
        let pol = [rng.normal() * 5.0, rng.normal() * 5.0];
        let reference = PairLogps {
            chosen: rng.normal() * 5.0,
            rejected: rng.normal() * 5.0,
        };
        let at = |p: &[f64]| PairLogps {
            chosen: p[0],
            rejected: p[1],
        };
        let out = dpo_loss(at(&pol), reference, beta)?;
        s.run(
            "dpo_loss",
            |p| Ok(dpo_loss(at(p), reference, beta)?.loss),
            &pol,
            vec![out.d_chosen, out.d_rejected],
            None,
        )?;
    }

    model_checks(&mut s, config, seed)?;
    Ok(s.reports)
}

/// Coordinates spread over every tensor of the model: a few per tensor,
/// with embedding coordinates drawn from rows of `used` tokens.
fn model_coords(model: &Model<f64>, used: &[usize], rng: &mut Rng) -> Vec<usize> {
    let tensors = model.tensors();
    let per = MIN_COORDS.div_ceil(tensors.len()).max(3);
    let mut coords = Vec::new();
    let mut offset = 0;
    for (name, t) in &tensors {
        if name == "embed" {
            let dim = model.config.dim;
            for _ in 0..per {
                let id = used[rng.below(used.len())];
                coords.push(offset + id * dim + rng.below(dim));
            }
        } else {
            coords.extend(sample_coords(t.len(), per, rng).into_iter().map(|i| offset + i));
        }
        offset += t.len();
    }
    coords.sort_unstable();
    coords.dedup();
    coords
}

fn model_checks(s: &mut Suite<'_>, config: &ModelConfig, seed: u64) -> Result<()> {
    let model = init_model::<f64>(config, seed)?;
    let vocab = config.vocab_size;
    let len = config.context_length.min(12);
    let seq: Vec<usize> = (0..len).map(|_| s.rng.below(vocab)).collect();

    let mut grads = model.zeros_like();
    lm_loss_grad(&model, &seq, 1.0, &mut grads)?;
    let coords = model_coords(&model, &seq, &mut s.rng);
    let mut probe = model.clone();
    s.run(
        "model_cross_entropy",
        |p| {
            probe.set_flat(p)?;
            let logits = probe.forward(&seq[..seq.len() - 1], None)?;
            Ok(cross_entropy(&logits, &seq[1..])?.0)
        },
        &model.to_flat(),
        grads.to_flat(),
        Some(coords),
    )?;

    let reference = init_model::<f64>(config, seed.wrapping_add(1))?;
    let prompt: Vec<usize> = seq[..len / 2].to_vec();
    let chosen: Vec<usize> = seq[len / 2..].to_vec();
    let rejected: Vec<usize> = chosen.iter().map(|&t| (t + 1) % vocab).collect();
    let beta = 0.5;
    let ref_logps = PairLogps {
        chosen: sequence_logprob(&reference, &prompt, &chosen)?,
        rejected: sequence_logprob(&reference, &prompt, &rejected)?,
    };
    let dpo_of = |m: &Model<f64>| -> Result<f64> {
        let pol = PairLogps {
            chosen: sequence_logprob(m, &prompt, &chosen)?,
            rejected: sequence_logprob(m, &prompt, &rejected)?,
        };
        Ok(dpo_loss(pol, ref_logps, beta)?.loss)
    };
    let pol = PairLogps {
        chosen: sequence_logprob(&model, &prompt, &chosen)?,
        rejected: sequence_logprob(&model, &prompt, &rejected)?,
    };
    let out = dpo_loss(pol, ref_logps, beta)?;
    let mut grads = model.zeros_like();
    sequence_logprob_grad(&model, &prompt, &chosen, out.d_chosen, &mut grads)?;
    sequence_logprob_grad(&model, &prompt, &rejected, out.d_rejected, &mut grads)?;
    let mut used = seq.clone();
    used.extend(&rejected);
    let coords = model_coords(&model, &used, &mut s.rng);
    s.run(
        "model_dpo",
        |p| {
            probe.set_flat(p)?;
            dpo_of(&probe)
        },
        &model.to_flat(),
        grads.to_flat(),
        Some(coords),
    )?;
    Ok(())
}
