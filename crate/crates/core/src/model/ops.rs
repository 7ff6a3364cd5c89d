use ndarray::ArrayView1;

use super::bundle::ModelBundle;
use super::engine::{forward, ValueOverride};
use crate::{Error, Result, TokenId};

fn check_finite(logits: ArrayView1<'_, f64>) -> Result<()> {
    if logits.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric { layer: None, what: "non-finite logits".into() })
    }
}

/// Log-softmax with max subtraction.
pub fn log_softmax(logits: ArrayView1<'_, f64>) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|&x| x - lse).collect()
}

/// Log-probability of `target` under the softmax of `logits`.
pub fn log_prob(logits: ArrayView1<'_, f64>, target: TokenId) -> Result<f64> {
    if target as usize >= logits.len() {
        return Err(Error::Input(format!("target token {target} outside vocabulary of {}", logits.len())));
    }
    check_finite(logits)?;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
    Ok((logits[target as usize] - lse).min(0.0))
}

/// KL(softmax(p) || softmax(q)).
pub fn kl_divergence(p_logits: ArrayView1<'_, f64>, q_logits: ArrayView1<'_, f64>) -> Result<f64> {
    if p_logits.len() != q_logits.len() {
        return Err(Error::Input(format!("vocab sizes differ: {} vs {}", p_logits.len(), q_logits.len())));
    }
    check_finite(p_logits)?;
    check_finite(q_logits)?;
    let lp = log_softmax(p_logits);
    let lq = log_softmax(q_logits);
    let kl: f64 = lp.iter().zip(&lq).map(|(a, b)| a.exp() * (a - b)).sum();
    Ok(kl.max(0.0))
}

/// Index of the largest logit; ties go to the lowest token id.
pub fn argmax(logits: ArrayView1<'_, f64>) -> TokenId {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best as TokenId
}

/// Greedy continuation of `prompt` by `n_tokens` tokens.
pub fn greedy_decode(
    model: &ModelBundle,
    prompt: &[TokenId],
    n_tokens: usize,
    value_override: Option<&ValueOverride>,
) -> Result<Vec<TokenId>> {
    let mut seq = prompt.to_vec();
    for _ in 0..n_tokens {
        let out = forward(model, &seq, &[], value_override, None)?;
        seq.push(argmax(out.last_logits()));
    }
    Ok(seq.split_off(prompt.len()))
}

/// Teacher-forced score of `target` as the continuation of `prompt`.
#[derive(Debug, Clone, PartialEq)]
pub struct ContinuationScore {
    /// Summed log-probability of the target tokens.
    pub log_prob: f64,
    /// Whether every target token is the argmax at its position, i.e.
    /// whether greedy decoding reproduces the target.
    pub greedy_match: bool,
}

pub fn score_continuation(
    model: &ModelBundle,
    prompt: &[TokenId],
    target: &[TokenId],
    value_override: Option<&ValueOverride>,
) -> Result<ContinuationScore> {
    if target.is_empty() {
        return Err(Error::Input("target is empty".into()));
    }
    let mut seq = prompt.to_vec();
    seq.extend_from_slice(&target[..target.len() - 1]);
    let out = forward(model, &seq, &[], value_override, None)?;
    let mut lp = 0.0;
    let mut greedy_match = true;
    for (i, &t) in target.iter().enumerate() {
        let row = out.logits_at(prompt.len() - 1 + i).expect("full forward");
        lp += log_prob(row, t)?;
        greedy_match &= argmax(row) == t;
    }
    Ok(ContinuationScore { log_prob: lp, greedy_match })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, Array1};
    use proptest::prelude::*;

    #[test]
    fn uniform_logits_give_log_one_over_v() {
        let z = Array1::<f64>::zeros(37);
        let lp = log_prob(z.view(), 5).unwrap();
        assert!((lp - (1.0f64 / 37.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn saturated_logit_is_near_zero() {
        let mut z = Array1::<f64>::zeros(10);
        z[3] = 1000.0;
        assert!(log_prob(z.view(), 3).unwrap().abs() < 1e-12);
    }

    #[test]
    fn matches_brute_force_softmax() {
        let z = arr1(&[0.3, -1.2, 2.2, 0.0, 0.7, -0.4, 1.9, -2.5]);
        let denom: f64 = z.iter().map(|v: &f64| v.exp()).sum();
        for t in 0..8 {
            let expected = (z[t].exp() / denom).ln();
            assert!((log_prob(z.view(), t as u32).unwrap() - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn out_of_vocab_target_is_input_error() {
        let z = Array1::<f64>::zeros(4);
        assert!(matches!(log_prob(z.view(), 4), Err(Error::Input(_))));
    }

    #[test]
    fn two_point_kl() {
        let p = arr1(&[0.75f64.ln(), 0.25f64.ln()]);
        let q = arr1(&[0.5f64.ln(), 0.5f64.ln()]);
        let expected = 0.75 * 1.5f64.ln() + 0.25 * 0.5f64.ln();
        let kl = kl_divergence(p.view(), q.view()).unwrap();
        assert!((kl - expected).abs() < 1e-12);
        assert!((kl - 0.1308).abs() < 1e-4);
    }

    #[test]
    fn kl_of_identical_is_zero_and_rejects_nan() {
        let p = arr1(&[0.1, 2.0, -3.0]);
        assert_eq!(kl_divergence(p.view(), p.view()).unwrap(), 0.0);
        let bad = arr1(&[0.1, f64::NAN, -3.0]);
        assert!(matches!(kl_divergence(p.view(), bad.view()), Err(Error::Numeric { .. })));
    }

    #[test]
    fn argmax_ties_pick_lowest_id() {
        assert_eq!(argmax(arr1(&[1.0, 3.0, 3.0, 2.0]).view()), 1);
    }

    proptest! {
        #[test]
        fn kl_is_nonnegative(p in prop::collection::vec(-20.0f64..20.0, 6),
                             q in prop::collection::vec(-20.0f64..20.0, 6)) {
            let kl = kl_divergence(Array1::from(p).view(), Array1::from(q).view()).unwrap();
            prop_assert!(kl >= 0.0);
        }

        #[test]
        fn softmax_normalizes(z in prop::collection::vec(-50.0f64..50.0, 1..40)) {
            let z = Array1::from(z);
            let total: f64 = (0..z.len()).map(|t| log_prob(z.view(), t as u32).unwrap().exp()).sum();
            prop_assert!((total - 1.0).abs() <= 1e-5);
        }
    }
}
