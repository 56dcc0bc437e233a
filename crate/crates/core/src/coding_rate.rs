//! Coding rate, soft-group compactness and the rate-reduction loss.
//!
//! Memberships are passed as an `F x K` matrix whose column `k` is the
//! diagonal of `Π_k`.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};

/// Groups with less total membership than this are skipped.
pub const MIN_GROUP_TRACE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateReport {
    pub total: f64,
    pub compact: f64,
}

impl RateReport {
    /// `ΔR = R − R_c`.
    pub fn reduction(&self) -> f64 {
        self.total - self.compact
    }
}

fn check_epsilon(eps: f64) -> Result<()> {
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::Config(format!("coding-rate tolerance must be positive, got {eps}")));
    }
    Ok(())
}

fn check_finite(tape: &Tape, z: Var, what: &str) -> Result<()> {
    if tape.value(z).iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{what} has non-finite entries")));
    }
    Ok(())
}

/// `½ log det(I + d/(F ε²) ZᵀZ)` in nats.
pub fn coding_rate(tape: &mut Tape, z: Var, eps: f64) -> Result<Var> {
    check_epsilon(eps)?;
    check_finite(tape, z, "Z")?;
    let (f, d) = tape.shape(z);
    if f == 0 {
        return Err(Error::shape("coding_rate", "Z has no rows"));
    }
    let gram = tape.matmul_tn(z, z);
    let scaled = tape.scale(gram, 1.0 / (f as f64 * (eps * eps / d as f64)));
    let shifted = tape.add_const(scaled, &Array2::eye(d));
    let logdet = tape.logdet_spd(shifted)?;
    Ok(tape.scale(logdet, 0.5))
}

/// `Σ_k tr(Π_k)/(2F) · log det(I + d/(tr(Π_k) ε²) Zᵀ Π_k Z)` in nats.
pub fn group_compactness(tape: &mut Tape, z: Var, memberships: Var, eps: f64) -> Result<Var> {
    check_epsilon(eps)?;
    check_finite(tape, z, "Z")?;
    check_finite(tape, memberships, "Π")?;
    let (f, d) = tape.shape(z);
    let (pf, k) = tape.shape(memberships);
    if f == 0 || pf != f || k == 0 {
        return Err(Error::shape("group_compactness", format!("Z is {f}x{d}, Π is {pf}x{k}")));
    }
    let eye = Array2::eye(d);
    let mut total = tape.scalar(0.0);
    for group in 0..k {
        let weights = tape.slice_cols(memberships, group, group + 1);
        let trace = tape.sum(weights);
        let tr = tape.scalar_value(trace);
        if tr < MIN_GROUP_TRACE {
            log::debug!("degenerate membership group {group} (trace {tr:.3e})");
            continue;
        }
        let gram = tape.weighted_gram(z, weights);
        let denom = tape.scale(trace, eps * eps / d as f64);
        let coef = tape.recip(denom);
        let scaled = tape.scale_by(gram, coef);
        let shifted = tape.add_const(scaled, &eye);
        let logdet = tape.logdet_spd(shifted)?;
        let half = tape.scale(logdet, 0.5);
        let share = tape.divide(trace, f as f64);
        let term = tape.scale_by(half, share);
        total = tape.add(total, term);
    }
    Ok(total)
}

/// `L_ΔR = −R(Z) + R_c(Z | Π)`, with the report of both parts.
pub fn rate_reduction_loss(tape: &mut Tape, z: Var, memberships: Var, eps: f64) -> Result<(Var, RateReport)> {
    let r = coding_rate(tape, z, eps)?;
    let rc = group_compactness(tape, z, memberships, eps)?;
    let report = RateReport {
        total: tape.scalar_value(r),
        compact: tape.scalar_value(rc),
    };
    Ok((tape.sub(rc, r), report))
}

/// Plain-matrix wrapper around [`coding_rate`].
pub fn coding_rate_value(z: &Array2<f64>, eps: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let out = coding_rate(&mut tape, zv, eps)?;
    Ok(tape.scalar_value(out))
}

/// Plain-matrix wrapper around [`group_compactness`].
pub fn group_compactness_value(z: &Array2<f64>, memberships: &Array2<f64>, eps: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let pv = tape.constant(memberships.clone());
    let out = group_compactness(&mut tape, zv, pv, eps)?;
    Ok(tape.scalar_value(out))
}

/// Both rates for plain matrices.
pub fn rate_report(z: &Array2<f64>, memberships: &Array2<f64>, eps: f64) -> Result<RateReport> {
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let pv = tape.constant(memberships.clone());
    Ok(rate_reduction_loss(&mut tape, zv, pv, eps)?.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn zero_features_cost_nothing() {
        let z = Array2::zeros((5, 3));
        let p = Array2::from_elem((5, 2), 0.5);
        assert_eq!(coding_rate_value(&z, 0.5).unwrap(), 0.0);
        assert_eq!(group_compactness_value(&z, &p, 0.5).unwrap(), 0.0);
        assert_eq!(rate_report(&z, &p, 0.5).unwrap().reduction(), 0.0);
    }

    #[test]
    fn two_orthogonal_pairs_give_log_two() {
        let z = array![[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]];
        assert_abs_diff_eq!(coding_rate_value(&z, 1.0).unwrap(), 2f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(coding_rate_value(&z, 1.0).unwrap(), 0.6931, epsilon = 1e-4);
    }

    #[test]
    fn single_group_matches_coding_rate() {
        let z = array![[0.3, -1.0, 0.2], [1.1, 0.4, -0.7], [0.0, 0.9, 0.5]];
        let p = Array2::ones((3, 1));
        let r = coding_rate_value(&z, 0.5).unwrap();
        assert_abs_diff_eq!(group_compactness_value(&z, &p, 0.5).unwrap(), r, epsilon = 1e-12);
        assert!(rate_report(&z, &p, 0.5).unwrap().reduction().abs() < 1e-12);
    }

    #[test]
    fn empty_group_is_skipped() {
        let z = array![[1.0, 0.0], [0.0, 2.0]];
        let p = array![[1.0, 0.0], [1.0, 0.0]];
        let rc = group_compactness_value(&z, &p, 1.0).unwrap();
        assert_abs_diff_eq!(rc, coding_rate_value(&z, 1.0).unwrap(), epsilon = 1e-12);
    }

    #[test]
    fn rate_decreases_with_tolerance() {
        let z = array![[0.3, -1.0], [1.1, 0.4], [0.2, 0.2]];
        let rates: Vec<_> = [0.1, 0.5, 1.0].iter().map(|&e| coding_rate_value(&z, e).unwrap()).collect();
        assert!(rates[0] > rates[1] && rates[1] > rates[2]);
    }

    #[test]
    fn invalid_inputs_are_errors() {
        let z = array![[f64::NAN, 0.0]];
        assert!(matches!(coding_rate_value(&z, 0.5), Err(Error::NonFinite(_))));
        assert!(coding_rate_value(&array![[1.0]], 0.0).is_err());
        assert!(group_compactness_value(&array![[1.0]], &array![[0.5], [0.5]], 0.5).is_err());
    }
}
