//! Per-example moving-average estimators `u_i ≈ g_i(θ)`, kept as `ū_i = log u_i`.

use crate::error::{Error, Result};
use crate::numeric::{log_mean_exp, softplus};

fn check_gamma(gamma: f64) -> Result<()> {
    if gamma > 0.0 && gamma <= 1.0 {
        Ok(())
    } else {
        Err(Error::Input(format!("gamma must lie in (0, 1], got {gamma}")))
    }
}

/// `u ← (1−γ)·u + γ·mean`. Linear-domain reference, used to cross-check
/// [`update_u_log`].
pub fn update_u_linear(u: f64, batch_mean_weight: f64, gamma: f64) -> Result<f64> {
    check_gamma(gamma)?;
    if !u.is_finite() || !batch_mean_weight.is_finite() || u <= 0.0 || batch_mean_weight < 0.0 {
        return Err(Error::NonFinite(format!(
            "linear update needs u > 0 and mean >= 0, got u={u} mean={batch_mean_weight}"
        )));
    }
    Ok((1.0 - gamma) * u + gamma * batch_mean_weight)
}

/// Log-domain update:
///
/// ```text
/// b = log(1−γ) + ū
/// w = log γ + logMeanExp(log_weights)
/// ū ← max(b, w) − log σ(|b − w|)
/// ```
///
/// `γ = 1` skips `b` (it would be `−∞`) and returns `logMeanExp` directly.
pub fn update_u_log(log_u: f64, log_weights: &[f64], gamma: f64) -> Result<f64> {
    check_gamma(gamma)?;
    if log_weights.is_empty() {
        return Err(Error::Input("estimator update needs at least one weight".into()));
    }
    if !log_u.is_finite() {
        return Err(Error::NonFinite(format!("estimator state {log_u}")));
    }
    if let Some(w) = log_weights.iter().find(|w| !w.is_finite()) {
        return Err(Error::NonFinite(format!("log weight {w}")));
    }
    let batch = log_mean_exp(log_weights);
    if gamma == 1.0 {
        return Ok(batch);
    }
    let b = (1.0 - gamma).ln() + log_u;
    let w = gamma.ln() + batch;
    // −log σ(d) = softplus(−d)
    Ok(b.max(w) + softplus(-(b - w).abs()))
}

/// `ū_1..ū_n`, initialized to zero (`u = 1`).
#[derive(Clone, Debug, PartialEq)]
pub struct EstimatorState {
    log_u: Vec<f64>,
}

impl EstimatorState {
    pub fn new(n: usize) -> Self {
        EstimatorState { log_u: vec![0.0; n] }
    }

    pub fn len(&self) -> usize {
        self.log_u.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_u.is_empty()
    }

    pub fn log_u(&self, i: usize) -> f64 {
        self.log_u[i]
    }

    pub fn values(&self) -> &[f64] {
        &self.log_u
    }

    pub fn set(&mut self, i: usize, log_u: f64) -> Result<()> {
        self.check_index(i)?;
        self.log_u[i] = log_u;
        Ok(())
    }

    pub(crate) fn check_index(&self, i: usize) -> Result<()> {
        if i < self.log_u.len() {
            Ok(())
        } else {
            Err(Error::StateMismatch {
                state: self.log_u.len(),
                index: i,
            })
        }
    }

    /// Apply [`update_u_log`] to entry `i` and return the new `ū_i`.
    pub fn update(&mut self, i: usize, log_weights: &[f64], gamma: f64) -> Result<f64> {
        self.check_index(i)?;
        let next = update_u_log(self.log_u[i], log_weights, gamma)?;
        self.log_u[i] = next;
        Ok(next)
    }

    /// `(mean, min, max)` over all entries.
    pub fn stats(&self) -> (f64, f64, f64) {
        if self.log_u.is_empty() {
            return (0.0, 0.0, 0.0);
        }
        let n = self.log_u.len() as f64;
        let mean = self.log_u.iter().sum::<f64>() / n;
        let min = self.log_u.iter().copied().fold(f64::INFINITY, f64::min);
        let max = self.log_u.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (mean, min, max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn linear_examples() {
        assert_eq!(update_u_linear(5.0, 3.0, 1.0).unwrap(), 3.0);
        assert!((update_u_linear(1.0, 3.0, 0.85).unwrap() - 2.70).abs() < 1e-15);
        let (u0, m1, m2) = (2.0, 5.0, 7.0);
        let two = update_u_linear(update_u_linear(u0, m1, 0.5).unwrap(), m2, 0.5).unwrap();
        assert!((two - (0.25 * u0 + 0.25 * m1 + 0.5 * m2)).abs() < 1e-15);
    }

    #[test]
    fn equal_branches_add_ln2() {
        // γ = 0.5 and ū = log-weight makes b = w
        let out = update_u_log(-3.0, &[-3.0], 0.5).unwrap();
        let b = 0.5f64.ln() - 3.0;
        assert!((out - (b + std::f64::consts::LN_2)).abs() < 1e-15);
    }

    #[test]
    fn extreme_magnitudes_stay_finite() {
        // Reference from a 50-digit evaluation of
        // log(0.15·e^{−5000} + 0.85·e^{−6000}).
        let out = update_u_log(-5000.0, &[-6000.0], 0.85).unwrap();
        assert!((out - (-5001.897_119_984_886)).abs() < 1e-9, "{out}");
        for (u, w) in [(-1e6, 1e6), (1e6, -1e6), (-1e6, -1e6), (1e6, 1e6)] {
            assert!(update_u_log(u, &[w, w - 3.0], 0.9).unwrap().is_finite());
        }
    }

    #[test]
    fn gamma_one_is_batch_mean() {
        let out = update_u_log(123.0, &[0.0, 2f64.ln()], 1.0).unwrap();
        assert!((out - 1.5f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn rejects_non_finite_and_bad_gamma() {
        assert!(update_u_log(0.0, &[f64::NAN], 0.5).is_err());
        assert!(update_u_log(f64::INFINITY, &[0.0], 0.5).is_err());
        assert!(update_u_log(0.0, &[], 0.5).is_err());
        assert!(update_u_log(0.0, &[0.0], 0.0).is_err());
        assert!(update_u_log(0.0, &[0.0], 1.5).is_err());
        assert!(update_u_linear(f64::NAN, 1.0, 0.5).is_err());
        let mut st = EstimatorState::new(2);
        assert!(matches!(st.update(2, &[0.0], 0.5), Err(Error::StateMismatch { .. })));
    }

    proptest! {
        #[test]
        fn log_update_matches_linear(
            log_u in -30.0f64..30.0,
            ws in proptest::collection::vec(-30.0f64..30.0, 1..6),
            gamma in 0.01f64..0.99,
        ) {
            let mean = ws.iter().map(|w| w.exp()).sum::<f64>() / ws.len() as f64;
            let lin = update_u_linear(log_u.exp(), mean, gamma).unwrap();
            let lg = update_u_log(log_u, &ws, gamma).unwrap();
            prop_assert!((lg.exp() - lin).abs() <= 1e-12 * lin);
        }

        #[test]
        fn geometric_contraction(
            u0 in 0.01f64..100.0,
            target in 0.01f64..100.0,
            gamma in 0.05f64..0.95,
            steps in 1usize..40,
        ) {
            let mut lu = u0.ln();
            for _ in 0..steps {
                lu = update_u_log(lu, &[target.ln()], gamma).unwrap();
            }
            let bound = (1.0 - gamma).powi(steps as i32) * (u0 - target).abs();
            prop_assert!((lu.exp() - target).abs() <= bound * (1.0 + 1e-9) + 1e-12 * target);
        }
    }
}
