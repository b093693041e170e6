//! Noise schedule: the cumulative signal-retention sequence and the
//! closed-form constants governing step-difference decay and total drift.
//!
//! The schedule stores the cumulative coefficients directly (index 0 is the
//! near-1 end) and never exposes per-step increments. The stochasticity scale
//! is fixed to zero: every reverse step is deterministic.

use serde::{Deserialize, Serialize};

use crate::error::{PieError, Result};

/// Cumulative signal-retention sequence `alphabar[0..=T]`, strictly
/// decreasing, all entries in (0, 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleJson", into = "ScheduleJson")]
pub struct NoiseSchedule {
    alphabar: Vec<f64>,
    /// Reverse-step stochasticity scale. Always zero: the sampler is the
    /// deterministic one.
    eta: f64,
}

#[derive(Serialize, Deserialize)]
struct ScheduleJson {
    alphabar: Vec<f64>,
}

impl TryFrom<ScheduleJson> for NoiseSchedule {
    type Error = PieError;
    fn try_from(j: ScheduleJson) -> Result<Self> {
        NoiseSchedule::from_alphabars(j.alphabar)
    }
}

impl From<NoiseSchedule> for ScheduleJson {
    fn from(s: NoiseSchedule) -> Self {
        ScheduleJson {
            alphabar: s.alphabar,
        }
    }
}

fn check_alphabars(values: &[f64]) -> Result<()> {
    if values.len() < 3 {
        return Err(PieError::invalid(format!(
            "schedule needs at least 3 entries, got {}",
            values.len()
        )));
    }
    if !values.iter().all(|v| v.is_finite() && *v > 0.0 && *v < 1.0) {
        return Err(PieError::invalid(
            "schedule entries must lie strictly inside (0, 1)".to_string(),
        ));
    }
    if !values.windows(2).all(|w| w[1] < w[0]) {
        return Err(PieError::invalid(
            "schedule must be strictly decreasing".to_string(),
        ));
    }
    Ok(())
}

impl NoiseSchedule {
    /// Geometric interpolation between the two endpoints: `alphabar[t]`
    /// follows a straight line in log space from `ab_start` down to `ab_end`.
    pub fn linear(t_steps: usize, ab_start: f64, ab_end: f64) -> Result<Self> {
        if t_steps < 2 {
            return Err(PieError::invalid(format!(
                "schedule needs T >= 2, got {t_steps}"
            )));
        }
        if !(ab_end > 0.0 && ab_start > ab_end && ab_start < 1.0) {
            return Err(PieError::invalid(format!(
                "schedule endpoints must satisfy 1 > start > end > 0, got ({ab_start}, {ab_end})"
            )));
        }
        let log_ratio = (ab_end / ab_start).ln();
        let alphabar: Vec<f64> = (0..=t_steps)
            .map(|t| ab_start * (log_ratio * t as f64 / t_steps as f64).exp())
            .collect();
        Self::from_alphabars(alphabar)
    }

    /// Cosine-shaped interpolation between the endpoints: gentle near the
    /// retention end, which keeps first-order inversion accurate there.
    pub fn cosine(t_steps: usize, ab_start: f64, ab_end: f64) -> Result<Self> {
        if t_steps < 2 {
            return Err(PieError::invalid(format!(
                "schedule needs T >= 2, got {t_steps}"
            )));
        }
        if !(ab_end > 0.0 && ab_start > ab_end && ab_start < 1.0) {
            return Err(PieError::invalid(format!(
                "schedule endpoints must satisfy 1 > start > end > 0, got ({ab_start}, {ab_end})"
            )));
        }
        let alphabar: Vec<f64> = (0..=t_steps)
            .map(|t| {
                let x = t as f64 / t_steps as f64;
                let c = (std::f64::consts::FRAC_PI_2 * x).cos().powi(2);
                ab_end + (ab_start - ab_end) * c
            })
            .collect();
        Self::from_alphabars(alphabar)
    }

    /// Wrap an explicit sequence verbatim; `T = len - 1`.
    pub fn from_alphabars(values: Vec<f64>) -> Result<Self> {
        check_alphabars(&values)?;
        Ok(NoiseSchedule {
            alphabar: values,
            eta: 0.0,
        })
    }

    /// Number of diffusion steps `T`.
    pub fn t_steps(&self) -> usize {
        self.alphabar.len() - 1
    }

    /// Cumulative coefficient at step `t` (0 <= t <= T).
    pub fn alphabar(&self, t: usize) -> f64 {
        self.alphabar[t]
    }

    pub fn alphabars(&self) -> &[f64] {
        &self.alphabar
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    /// Magnitude of the per-iteration denoiser coefficient derived from the
    /// first two schedule entries (the "base learning rate" of the unit-step
    /// edit recursion).
    pub fn step_coefficient(&self) -> f64 {
        step_coefficient_from(self.alphabar[0], self.alphabar[1])
    }

    /// Smallest iteration count `n` past which the per-step difference
    /// envelope falls below `delta`, given bounds `input_bound` on the start
    /// norm and `denoiser_bound` on the denoiser output norm.
    ///
    /// Returns 1 when the bound is non-positive (any step already suffices).
    pub fn convergence_steps(&self, input_bound: f64, denoiser_bound: f64, delta: f64) -> usize {
        assert!(input_bound > 0.0 || denoiser_bound > 0.0);
        assert!(delta > 0.0);
        let ab0 = self.alphabar[0];
        let envelope = self.envelope_base(input_bound, denoiser_bound);
        let log_envelope = envelope.ln();
        let bound = (2.0 / ab0.ln()) * (delta.ln() - log_envelope);
        if bound <= 0.0 {
            return 1;
        }
        bound.floor() as usize + 1
    }

    /// The step-difference envelope constant
    /// `(1/sqrt(ab0) - 1) * input_bound + step_coefficient * denoiser_bound`.
    pub fn envelope_base(&self, input_bound: f64, denoiser_bound: f64) -> f64 {
        let ab0 = self.alphabar[0];
        (1.0 / ab0.sqrt() - 1.0) * input_bound + self.step_coefficient() * denoiser_bound
    }

    /// Total-drift bound: the geometric sum of the per-step envelope as the
    /// iteration count grows without limit.
    pub fn drift_bound(&self, input_bound: f64, denoiser_bound: f64) -> f64 {
        assert!(input_bound >= 0.0 && denoiser_bound >= 0.0);
        let ab0 = self.alphabar[0];
        self.envelope_base(input_bound, denoiser_bound) / (1.0 - ab0.sqrt())
    }
}

/// Closed form of the per-iteration denoiser coefficient from the first two
/// cumulative entries. Absolute value: the two published forms disagree on
/// sign and the constant multiplies a norm.
pub(crate) fn step_coefficient_from(ab0: f64, ab1: f64) -> f64 {
    (((ab0 - ab0 * ab1).sqrt() - (ab1 - ab0 * ab1).sqrt()) / ab1.sqrt()).abs()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn linear_schedule_endpoints_and_midpoint() {
        let s = NoiseSchedule::linear(2, 0.9, 0.1).unwrap();
        assert_eq!(s.alphabar(0), 0.9);
        // geometric midpoint sqrt(0.9 * 0.1)
        assert_relative_eq!(s.alphabar(1), 0.3, max_relative = 1e-15);
        assert_relative_eq!(s.alphabar(2), 0.1, max_relative = 1e-15);
    }

    #[test]
    fn default_paper_scale_schedule() {
        let s = NoiseSchedule::linear(50, 0.9999, 0.0047).unwrap();
        assert_eq!(s.t_steps(), 50);
        assert_eq!(s.alphabar(0), 0.9999);
        assert_relative_eq!(s.alphabar(50), 0.0047, max_relative = 1e-12);
        assert!(s.alphabars().windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn linear_schedule_rejects_bad_endpoints() {
        assert!(NoiseSchedule::linear(2, 0.1, 0.9).is_err());
        assert!(NoiseSchedule::linear(2, 1.0, 0.5).is_err());
        assert!(NoiseSchedule::linear(2, 0.9, 0.0).is_err());
        assert!(NoiseSchedule::linear(1, 0.9, 0.1).is_err());
    }

    #[test]
    fn from_alphabars_validation() {
        let s = NoiseSchedule::from_alphabars(vec![0.9999, 0.9995, 0.5]).unwrap();
        assert_eq!(s.t_steps(), 2);
        assert_eq!(s.alphabar(1), 0.9995);

        assert!(NoiseSchedule::from_alphabars(vec![1.0, 0.5]).is_err());
        assert!(NoiseSchedule::from_alphabars(vec![0.9, 0.9, 0.5]).is_err());
        assert!(NoiseSchedule::from_alphabars(vec![0.9, 0.5, 0.5]).is_err());
    }

    #[test]
    fn step_coefficient_values() {
        // extended-precision arithmetic of the closed form
        let s = NoiseSchedule::from_alphabars(vec![0.9999, 0.9995, 0.5]).unwrap();
        assert_relative_eq!(
            s.step_coefficient(),
            0.012365153700567877,
            max_relative = 1e-12
        );

        let s = NoiseSchedule::from_alphabars(vec![0.9, 0.5, 0.1]).unwrap();
        assert_relative_eq!(
            s.step_coefficient(),
            0.6324555320336759,
            max_relative = 1e-12
        );
    }

    #[test]
    fn step_coefficient_is_zero_for_equal_entries() {
        // hypothetical equal values, bypassing the monotonicity invariant
        assert_eq!(step_coefficient_from(0.7, 0.7), 0.0);
    }

    #[test]
    fn step_coefficient_ignores_tail_entries() {
        let a = NoiseSchedule::from_alphabars(vec![0.9, 0.5, 0.4, 0.3]).unwrap();
        let b = NoiseSchedule::from_alphabars(vec![0.9, 0.5, 0.01]).unwrap();
        assert_eq!(a.step_coefficient(), b.step_coefficient());
    }

    #[test]
    fn convergence_steps_values() {
        let s = NoiseSchedule::from_alphabars(vec![0.9999, 0.9995, 0.5]).unwrap();
        // frozen from extended-precision evaluation of the closed form
        assert_eq!(s.convergence_steps(1.0, 1.0, 1e-6), 188_525);

        // bound exactly 1 -> smallest integer strictly above is 2
        let s = NoiseSchedule::from_alphabars(vec![0.25, 0.2, 0.1]).unwrap();
        assert_eq!(s.convergence_steps(1.0, 0.0, 0.5), 2);

        // delta at least the envelope constant -> bound <= 0 -> 1
        let s = NoiseSchedule::from_alphabars(vec![0.9999, 0.9995, 0.5]).unwrap();
        let c = s.envelope_base(1.0, 1.0);
        assert_eq!(s.convergence_steps(1.0, 1.0, c), 1);
        assert_eq!(s.convergence_steps(1.0, 1.0, c * 10.0), 1);
    }

    #[test]
    fn convergence_steps_monotonicity() {
        let s = NoiseSchedule::from_alphabars(vec![0.9999, 0.9995, 0.5]).unwrap();
        let mut prev = usize::MAX;
        for delta in [1e-8, 1e-6, 1e-4, 1e-2, 1.0] {
            let n = s.convergence_steps(1.0, 1.0, delta);
            assert!(n <= prev, "not non-increasing in delta");
            prev = n;
        }
        let mut prev = 0;
        for c1 in [0.5, 1.0, 2.0, 8.0] {
            let n = s.convergence_steps(c1, 1.0, 1e-6);
            assert!(n >= prev, "not non-decreasing in input bound");
            prev = n;
        }
        let mut prev = 0;
        for c2 in [0.5, 1.0, 2.0, 8.0] {
            let n = s.convergence_steps(1.0, c2, 1e-6);
            assert!(n >= prev, "not non-decreasing in denoiser bound");
            prev = n;
        }
    }

    #[test]
    fn drift_bound_values() {
        let s = NoiseSchedule::from_alphabars(vec![0.9999, 0.9995, 0.5]).unwrap();
        // frozen from extended-precision evaluation
        assert_relative_eq!(s.drift_bound(1.0, 1.0), 248.29694128368542, max_relative = 1e-12);
        assert_eq!(s.drift_bound(0.0, 0.0), 0.0);

        let s = NoiseSchedule::from_alphabars(vec![0.25, 0.2, 0.1]).unwrap();
        assert_relative_eq!(s.drift_bound(1.0, 0.0), 2.0, max_relative = 1e-15);
    }

    #[test]
    fn drift_bound_dominates_single_step_envelope() {
        for (ab0, ab1) in [(0.9999, 0.9995), (0.9, 0.5), (0.5, 0.25)] {
            let s = NoiseSchedule::from_alphabars(vec![ab0, ab1, ab1 / 2.0]).unwrap();
            assert!(s.drift_bound(1.0, 1.0) >= s.envelope_base(1.0, 1.0));
        }
    }

    #[test]
    fn json_roundtrip_under_alphabar_key() {
        let s = NoiseSchedule::linear(4, 0.99, 0.1).unwrap();
        let json = serde_json::to_string(&s).unwrap();
        assert!(json.starts_with("{\"alphabar\":["));
        let back: NoiseSchedule = serde_json::from_str(&json).unwrap();
        assert_eq!(back, s);

        // deserialization revalidates
        let bad: std::result::Result<NoiseSchedule, _> =
            serde_json::from_str("{\"alphabar\":[0.5,0.9,0.1]}");
        assert!(bad.is_err());
    }
}
