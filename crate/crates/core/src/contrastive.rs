//! Intent-wise contrastive objective.
//!
//! The behavior distribution `p(k|e)` is a softmax over `cos(z_{e,k}, b_k)/τ`.
//! Each intent runs an NT-Xent subtask between the anchor slices and the
//! augmented-view slices of the same behaviors, and the subtask
//! log-likelihoods are combined under `p(k|e)`.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};

/// Norm floor used by every cosine similarity.
pub const COSINE_EPS: f64 = 1e-12;

/// Added to excluded logits; large enough that `exp` underflows to zero.
const MASKED_LOGIT: f64 = -1e30;

/// How the per-intent subtasks are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum IclForm {
    /// `Σ_k p(k|e) · (−log p(e'|e,k))`, an upper bound on the exact form.
    #[default]
    Expectation,
    /// `−log Σ_k p(k|e) · p(e'|e,k)`.
    ExactLogExpectation,
}

fn check_positive_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

/// `P[e, k] = softmax_k(cos(z_{e,k}, b_k) / τ)` as a `B x K` matrix.
pub fn intent_confidence(tape: &mut Tape, slices: &[Var], bases: Var, tau: f64) -> Result<Var> {
    check_positive_tau(tau)?;
    let (k, dd) = tape.shape(bases);
    if slices.len() != k {
        return Err(Error::shape("intent_confidence", format!("{} slices for {k} bases", slices.len())));
    }
    let unit_bases = tape.normalize_rows(bases, COSINE_EPS);
    let mut columns = Vec::with_capacity(k);
    let batch = tape.shape(slices[0]).0;
    for (intent, &slice) in slices.iter().enumerate() {
        if tape.shape(slice) != (batch, dd) {
            return Err(Error::shape(
                "intent_confidence",
                format!("slice {intent} is {:?}, expected ({batch}, {dd})", tape.shape(slice)),
            ));
        }
        let unit = tape.normalize_rows(slice, COSINE_EPS);
        let basis = tape.gather_rows(unit_bases, &[intent]);
        columns.push(tape.matmul_nt(unit, basis));
    }
    let cosines = tape.concat_cols(&columns);
    let logits = tape.scale(cosines, 1.0 / tau);
    Ok(tape.softmax_rows(logits))
}

/// `log p(e'|e,k)` for every anchor: a log-softmax over the batch of
/// temperature-scaled cosine similarities to the augmented slices, read at
/// the positive pair. Returns a `B x 1` column.
///
/// With `strict` the positive is left out of the denominator.
pub fn subtask_logprob(tape: &mut Tape, anchors: Var, positives: Var, tau: f64, strict: bool) -> Result<Var> {
    check_positive_tau(tau)?;
    let (batch, dd) = tape.shape(anchors);
    if tape.shape(positives) != (batch, dd) {
        return Err(Error::shape(
            "subtask_logprob",
            format!("anchors {:?} vs positives {:?}", (batch, dd), tape.shape(positives)),
        ));
    }
    if batch < 2 {
        return Err(Error::shape("subtask_logprob", "contrastive batch needs at least two behaviors"));
    }
    let a = tape.normalize_rows(anchors, COSINE_EPS);
    let p = tape.normalize_rows(positives, COSINE_EPS);
    let cos = tape.matmul_nt(a, p);
    let logits = tape.scale(cos, 1.0 / tau);
    let positive = tape.diagonal(logits);
    let denominator = if strict {
        let mask = Array2::from_shape_fn((batch, batch), |(i, j)| if i == j { MASKED_LOGIT } else { 0.0 });
        let masked = tape.add_const(logits, &mask);
        tape.logsumexp_rows(masked)
    } else {
        tape.logsumexp_rows(logits)
    };
    Ok(tape.sub(positive, denominator))
}

/// Mean over the batch of the combined subtask loss. `probs` and `logprobs`
/// are both `B x K`.
pub fn icl_loss(tape: &mut Tape, probs: Var, logprobs: Var, form: IclForm) -> Result<Var> {
    if tape.shape(probs) != tape.shape(logprobs) {
        return Err(Error::shape(
            "icl_loss",
            format!("{:?} vs {:?}", tape.shape(probs), tape.shape(logprobs)),
        ));
    }
    let per_behavior = match form {
        IclForm::Expectation => {
            let weighted = tape.mul(probs, logprobs);
            tape.row_sum(weighted)
        }
        IclForm::ExactLogExpectation => {
            let log_p = tape.log(probs);
            let joint = tape.add(log_p, logprobs);
            tape.logsumexp_rows(joint)
        }
    };
    let mean = tape.mean(per_behavior);
    Ok(tape.neg(mean))
}

/// Plain-matrix wrapper around [`intent_confidence`].
pub fn intent_confidence_values(slices: &[Array2<f64>], bases: &Array2<f64>, tau: f64) -> Result<Array2<f64>> {
    if slices.is_empty() {
        return Err(Error::shape("intent_confidence", "no slices"));
    }
    let mut tape = Tape::new();
    let vars: Vec<_> = slices.iter().map(|s| tape.constant(s.clone())).collect();
    let b = tape.constant(bases.clone());
    let out = intent_confidence(&mut tape, &vars, b, tau)?;
    Ok(tape.value(out).clone())
}

/// Plain-matrix wrapper around [`subtask_logprob`]; returns one value per anchor.
pub fn subtask_logprob_values(anchors: &Array2<f64>, positives: &Array2<f64>, tau: f64, strict: bool) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let a = tape.constant(anchors.clone());
    let p = tape.constant(positives.clone());
    let out = subtask_logprob(&mut tape, a, p, tau, strict)?;
    Ok(tape.value(out).iter().copied().collect())
}

/// Plain-matrix wrapper around [`icl_loss`].
pub fn icl_loss_value(probs: &Array2<f64>, logprobs: &Array2<f64>, form: IclForm) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(probs.clone());
    let l = tape.constant(logprobs.clone());
    let out = icl_loss(&mut tape, p, l, form)?;
    Ok(tape.scalar_value(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn equal_cosines_give_uniform_rows() {
        let slice = array![[1.0, 0.0]];
        let bases = array![[2.0, 0.0], [3.0, 0.0], [0.5, 0.0]];
        let p = intent_confidence_values(&[slice.clone(), slice.clone(), slice], &bases, 0.2).unwrap();
        for &v in p.iter() {
            assert_abs_diff_eq!(v, 1.0 / 3.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn two_intents_opposite_cosines() {
        let bases = array![[1.0, 0.0], [1.0, 0.0]];
        let p = intent_confidence_values(&[array![[1.0, 0.0]], array![[-1.0, 0.0]]], &bases, 1.0).unwrap();
        // σ(2) for the first intent.
        assert_abs_diff_eq!(p[[0, 0]], 1.0 / (1.0 + (-2.0f64).exp()), epsilon = 1e-12);
        assert_abs_diff_eq!(p[[0, 0]], 0.8808, epsilon = 1e-4);
        assert_abs_diff_eq!(p[[0, 1]], 0.1192, epsilon = 1e-4);
    }

    #[test]
    fn confidence_is_scale_invariant() {
        let bases = array![[1.0, 0.5], [-0.3, 1.0]];
        let s0 = array![[0.2, 0.9], [1.0, -1.0]];
        let s1 = array![[0.4, -0.1], [0.3, 0.3]];
        let a = intent_confidence_values(&[s0.clone(), s1.clone()], &bases, 0.5).unwrap();
        let b = intent_confidence_values(&[s0 * 7.0, s1], &(&bases * 0.01), 0.5).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_norm_slices_do_not_panic() {
        let p = intent_confidence_values(&[array![[0.0, 0.0]], array![[1.0, 0.0]]], &array![[0.0, 0.0], [1.0, 0.0]], 0.2)
            .unwrap();
        assert!(p.iter().all(|v| v.is_finite()));
        assert!(intent_confidence_values(&[array![[1.0]]], &array![[1.0]], 0.0).is_err());
    }

    #[test]
    fn two_behavior_subtask() {
        let anchors = array![[1.0, 0.0], [0.0, 1.0]];
        let positives = anchors.clone();
        let lp = subtask_logprob_values(&anchors, &positives, 1.0, false).unwrap();
        assert_abs_diff_eq!(lp[0], -(1.0 + (-1.0f64).exp()).ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(lp[0], -0.3133, epsilon = 1e-4);
        // Without the positive in the denominator: log(e / e^0) = 1.
        let strict = subtask_logprob_values(&anchors, &positives, 1.0, true).unwrap();
        assert_abs_diff_eq!(strict[0], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn identical_vectors_give_uniform_logprob() {
        let b = 5;
        let all = Array2::from_elem((b, 3), 0.7);
        let lp = subtask_logprob_values(&all, &all, 0.2, false).unwrap();
        for v in lp {
            assert_abs_diff_eq!(v, -(b as f64).ln(), epsilon = 1e-12);
        }
    }

    #[test]
    fn subtask_rejects_single_behavior() {
        let one = array![[1.0, 2.0]];
        assert!(subtask_logprob_values(&one, &one, 0.2, false).is_err());
    }

    #[test]
    fn one_hot_expectation_selects() {
        let probs = array![[1.0, 0.0], [0.0, 1.0]];
        let logprobs = array![[-0.5, -3.0], [-2.0, -0.25]];
        let loss = icl_loss_value(&probs, &logprobs, IclForm::Expectation).unwrap();
        assert_abs_diff_eq!(loss, (0.5 + 0.25) / 2.0, epsilon = 1e-15);
    }

    #[test]
    fn exact_form_is_below_the_bound() {
        let probs = array![[0.3, 0.7], [0.5, 0.5]];
        let logprobs = array![[-0.5, -3.0], [-2.0, -0.25]];
        let bound = icl_loss_value(&probs, &logprobs, IclForm::Expectation).unwrap();
        let exact = icl_loss_value(&probs, &logprobs, IclForm::ExactLogExpectation).unwrap();
        assert!(exact <= bound);
        let direct = -((0.3 * (-0.5f64).exp() + 0.7 * (-3.0f64).exp()).ln()
            + (0.5 * (-2.0f64).exp() + 0.5 * (-0.25f64).exp()).ln())
            / 2.0;
        assert_abs_diff_eq!(exact, direct, epsilon = 1e-12);
    }
}
