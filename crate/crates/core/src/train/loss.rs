use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Mean next-token cross-entropy and its gradient `(softmax - onehot) / T`.
pub fn cross_entropy(logits: &Tensor<f64>, targets: &[usize]) -> Result<(f64, Tensor<f64>)> {
    let (t_len, vocab) = logits.dims2()?;
    if targets.len() != t_len {
        return Err(Error::InvalidArgument(format!(
            "{} targets for {t_len} logit rows",
            targets.len()
        )));
    }
    if let Some(&id) = targets.iter().find(|&&id| id >= vocab) {
        return Err(Error::TokenOutOfRange { id, vocab });
    }
    let mut grad = logits.clone();
    let mut loss = 0.0;
    let inv_t = 1.0 / t_len as f64;
    for (r, &target) in targets.iter().enumerate() {
        let row = grad.row_mut(r);
        let (lse, max) = log_sum_exp(row);
        loss += lse - (row[target] - max);
        for v in row.iter_mut() {
            *v = (*v - max - lse).exp() * inv_t;
        }
        row[target] -= inv_t;
    }
    Ok((loss * inv_t, grad))
}

/// `(ln Σ exp(v - max), max)` for a row.
pub(crate) fn log_sum_exp(row: &[f64]) -> (f64, f64) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
    (sum.ln(), max)
}

/// `log softmax(row)[index]`.
pub(crate) fn log_prob(row: &[f64], index: usize) -> f64 {
    let (lse, max) = log_sum_exp(row);
    row[index] - max - lse
}

/// `-ln σ(x)`, evaluated without overflow.
pub fn neg_log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Log-probabilities of the chosen and rejected completions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairLogps {
    pub chosen: f64,
    pub rejected: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DpoOutput {
    pub loss: f64,
    /// `(policy_chosen - ref_chosen) - (policy_rejected - ref_rejected)`
    pub margin: f64,
    /// d loss / d policy_chosen
    pub d_chosen: f64,
    /// d loss / d policy_rejected
    pub d_rejected: f64,
}

/// Preference loss `-ln σ(β · margin)` and its gradient with respect to the
/// policy log-probabilities.
pub fn dpo_loss(policy: PairLogps, reference: PairLogps, beta: f64) -> Result<DpoOutput> {
    let vals = [policy.chosen, policy.rejected, reference.chosen, reference.rejected, beta];
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("dpo_loss input"));
    }
    if beta <= 0.0 {
        return Err(Error::InvalidArgument(format!("beta must be positive, got {beta}")));
    }
    let margin = (policy.chosen - reference.chosen) - (policy.rejected - reference.rejected);
    let x = beta * margin;
    let g = beta * sigmoid(-x);
    Ok(DpoOutput {
        loss: neg_log_sigmoid(x),
        margin,
        d_chosen: -g,
        d_rejected: g,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_ln_vocab() {
        let logits = Tensor::<f64>::zeros(&[2, 128_256]).unwrap();
        let (loss, grad) = cross_entropy(&logits, &[5, 77]).unwrap();
        assert!((loss - 11.7617835).abs() < 1e-5);
        assert!((loss - (128_256f64).ln()).abs() < 1e-12);
        for r in 0..2 {
            let s: f64 = grad.row(r).iter().sum();
            // 128k-term naive sum: rounding alone reaches ~1e-11.
            assert!(s.abs() < 1e-10, "{s}");
        }
    }

    #[test]
    fn confident_prediction_has_tiny_loss() {
        let mut logits = Tensor::<f64>::zeros(&[1, 10]).unwrap();
        logits.data_mut()[3] = 30.0;
        let (loss, _) = cross_entropy(&logits, &[3]).unwrap();
        assert!(loss < 1e-9 && loss >= 0.0);
    }

    #[test]
    fn invalid_target_rejected() {
        let logits = Tensor::<f64>::zeros(&[1, 4]).unwrap();
        assert!(cross_entropy(&logits, &[4]).is_err());
        assert!(cross_entropy(&logits, &[0, 1]).is_err());
    }

    #[test]
    fn dpo_point_values() {
        let p = PairLogps {
            chosen: -3.0,
            rejected: -4.0,
        };
        let out = dpo_loss(p, p, 0.01).unwrap();
        assert!((out.loss - std::f64::consts::LN_2).abs() < 1e-9);
        assert_eq!(out.margin, 0.0);

        let pol = PairLogps {
            chosen: 50.0,
            rejected: -50.0,
        };
        let zero = PairLogps {
            chosen: 0.0,
            rejected: 0.0,
        };
        let out = dpo_loss(pol, zero, 0.01).unwrap();
        assert_eq!(out.margin, 100.0);
        assert!((out.loss - 0.313262).abs() < 1e-6);
        assert!(out.d_chosen < 0.0 && out.d_rejected > 0.0);
        assert_eq!(out.d_chosen, -out.d_rejected);
    }

    #[test]
    fn dpo_monotone_in_margin() {
        let zero = PairLogps {
            chosen: 0.0,
            rejected: 0.0,
        };
        let loss = |m: f64| {
            dpo_loss(PairLogps { chosen: m, rejected: 0.0 }, zero, 0.01)
                .unwrap()
                .loss
        };
        assert!(loss(-10.0) > loss(0.0) && loss(0.0) > loss(10.0));
    }

    #[test]
    fn dpo_rejects_bad_input() {
        let p = PairLogps {
            chosen: f64::NAN,
            rejected: 0.0,
        };
        assert!(dpo_loss(p, p, 0.01).is_err());
        let q = PairLogps {
            chosen: 0.0,
            rejected: 0.0,
        };
        assert!(dpo_loss(q, q, 0.0).is_err());
    }

    #[test]
    fn stable_log_sigmoid() {
        assert!((neg_log_sigmoid(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(neg_log_sigmoid(-1000.0).is_finite());
        assert!((neg_log_sigmoid(-1000.0) - 1000.0).abs() < 1e-9);
        assert!(neg_log_sigmoid(1000.0) >= 0.0);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn cross_entropy_non_negative(
                row in prop::collection::vec(-30.0f64..30.0, 2..20),
                pick in 0usize..100,
            ) {
                let n = row.len();
                let t = Tensor::from_vec(&[1, n], row).unwrap();
                let (loss, grad) = cross_entropy(&t, &[pick % n]).unwrap();
                prop_assert!(loss >= 0.0);
                prop_assert!(grad.data().iter().sum::<f64>().abs() < 1e-12);
            }
        }
    }
}
