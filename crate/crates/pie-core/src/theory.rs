//! Convergence diagnostics for the unit-step edit recursion.
//!
//! The editing recursion at its smallest noise level has a closed-form
//! envelope: step differences shrink geometrically and the total drift from
//! the start stays under a schedule-derived constant. This module runs the
//! unit-step iteration, measures the constants, checks the envelope and the
//! drift bound, fits the decay rate, and computes the exact fixed point for
//! affine denoisers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{PieError, Result};
use crate::metrics;
use crate::oracle::{Condition, Denoiser, GaussianWorldOracle};
use crate::pie::{NoiseMode, StepRecord, Trajectory};
use crate::schedule::NoiseSchedule;
use crate::state::State;

/// Per-step envelope check plus drift summary for one trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    /// Observed step-difference norms, index n = 1..=N.
    pub observed: Vec<f64>,
    /// Geometric envelope values for the same indices.
    pub envelope: Vec<f64>,
    /// Step indices (1-based) where the observed difference exceeds the
    /// envelope.
    pub violations: Vec<usize>,
    /// Bound on the start-state norm used for the envelope.
    pub input_bound: f64,
    /// Bound on the denoiser output norm used for the envelope.
    pub denoiser_bound: f64,
    /// Euclidean distance from the first to the last state.
    pub total_drift: f64,
    /// Schedule-derived bound on the total drift.
    pub drift_bound: f64,
    /// Whether the total drift stayed within the bound.
    pub drift_within_bound: bool,
    /// Bound minus observed drift.
    pub drift_slack: f64,
}

fn draw_noise(shape: crate::state::Shape, rng: &mut impl Rng) -> State {
    let values = (0..shape.len())
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    State::new(shape, values).expect("normal draws are finite")
}

/// Iterate the unit-step edit recursion for `n_steps` steps: re-noise by one
/// level, query the denoiser there, and combine. No mask, no blend.
pub fn unit_step_iterate(
    x0: &State,
    y: Condition,
    d: &dyn Denoiser,
    s: &NoiseSchedule,
    n_steps: usize,
    noise_mode: NoiseMode,
    seed: u64,
) -> Result<Trajectory> {
    let ab0 = s.alphabar(0);
    let ab1 = s.alphabar(1);
    let noise_coef = (ab0 * (1.0 - ab1) / ab1).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fixed_eps = match noise_mode {
        NoiseMode::FixedSeed => Some(draw_noise(x0.shape(), &mut rng)),
        _ => None,
    };

    let mut states = Vec::with_capacity(n_steps + 1);
    let mut records = Vec::with_capacity(n_steps + 1);
    states.push(x0.clone());
    records.push(StepRecord {
        step_diff_norm: 0.0,
        conf: None,
        similarity: metrics::similarity(x0, x0).ok(),
        eps_norm: None,
    });
    for _ in 0..n_steps {
        let prev = states.last().unwrap();
        let eps = match noise_mode {
            NoiseMode::Zero => State::zeros(prev.shape()),
            NoiseMode::FixedSeed => fixed_eps.clone().expect("drawn above"),
            NoiseMode::Fresh => draw_noise(prev.shape(), &mut rng),
        };
        let x1 = crate::ddim::forward_noise(prev, 1, &eps, s)?;
        let eps_hat = d.epsilon(&x1, 1, y)?;
        // sqrt(ab0) x + noise_coef (eps - eps_hat) + sqrt(1 - ab0) eps_hat
        let next = prev
            .scale(ab0.sqrt())
            .add(&eps.scale(noise_coef))?
            .add(&eps_hat.scale((1.0 - ab0).sqrt() - noise_coef))?;
        records.push(StepRecord {
            step_diff_norm: next.distance(prev)?,
            conf: None,
            similarity: metrics::similarity(&next, x0).ok(),
            eps_norm: Some(eps_hat.norm()),
        });
        states.push(next);
    }
    Ok(Trajectory {
        states,
        records,
        config: None,
        seed,
    })
}

/// Euclidean norms of consecutive state differences.
pub fn step_differences(traj: &Trajectory) -> Vec<f64> {
    traj.states
        .windows(2)
        .map(|w| w[1].distance(&w[0]).expect("trajectory shapes are equal"))
        .collect()
}

fn build_report(traj: &Trajectory, input_bound: f64, denoiser_bound: f64, s: &NoiseSchedule) -> BoundReport {
    let ab0 = s.alphabar(0);
    let base = s.envelope_base(input_bound, denoiser_bound);
    let observed = step_differences(traj);
    let envelope: Vec<f64> = (1..=observed.len())
        .map(|n| ab0.sqrt().powi(n as i32) * base)
        .collect();
    let violations = observed
        .iter()
        .zip(&envelope)
        .enumerate()
        .filter_map(|(i, (o, e))| (o > e).then_some(i + 1))
        .collect();
    let total_drift = traj
        .final_state()
        .distance(traj.initial())
        .expect("trajectory shapes are equal");
    let drift_bound = s.drift_bound(input_bound, denoiser_bound);
    BoundReport {
        observed,
        envelope,
        violations,
        input_bound,
        denoiser_bound,
        total_drift,
        drift_bound,
        drift_within_bound: total_drift <= drift_bound,
        drift_slack: drift_bound - total_drift,
    }
}

/// Check every step difference against the geometric envelope
/// `sqrt(ab0)^n * ((1/sqrt(ab0) - 1) * input_bound + coef * denoiser_bound)`.
pub fn check_step_envelope(
    traj: &Trajectory,
    input_bound: f64,
    denoiser_bound: f64,
    s: &NoiseSchedule,
) -> BoundReport {
    build_report(traj, input_bound, denoiser_bound, s)
}

/// Check the total drift of the trajectory against the schedule's drift
/// bound; the report carries the slack.
pub fn check_total_drift(
    traj: &Trajectory,
    input_bound: f64,
    denoiser_bound: f64,
    s: &NoiseSchedule,
) -> BoundReport {
    build_report(traj, input_bound, denoiser_bound, s)
}

/// Least-squares fit of the decay ratio of a positive, geometrically
/// shrinking sequence. Needs at least 3 nonzero entries.
pub fn geometric_ratio_fit(diffs: &[f64]) -> Result<f64> {
    let points: Vec<(f64, f64)> = diffs
        .iter()
        .enumerate()
        .filter(|(_, d)| **d > 0.0)
        .map(|(i, d)| (i as f64, d.ln()))
        .collect();
    if points.len() < 3 {
        return Err(PieError::UndefinedRatio);
    }
    let n = points.len() as f64;
    let sx: f64 = points.iter().map(|(x, _)| x).sum();
    let sy: f64 = points.iter().map(|(_, y)| y).sum();
    let sxx: f64 = points.iter().map(|(x, _)| x * x).sum();
    let sxy: f64 = points.iter().map(|(x, y)| x * y).sum();
    let slope = (sxy - sx * sy / n) / (sxx - sx * sx / n);
    Ok(slope.exp())
}

/// Measured envelope constants from a trajectory with recorded denoiser
/// evaluations: the start-state norm, and the largest observed denoiser
/// output norm inflated by a 5% margin.
pub fn measure_constants(traj: &Trajectory) -> Result<(f64, f64)> {
    let c1 = traj.initial().norm();
    let sup = traj
        .records
        .iter()
        .filter_map(|r| r.eps_norm)
        .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v))));
    match sup {
        Some(sup) => Ok((c1, sup * 1.05)),
        None => Err(PieError::invalid(
            "trajectory has no recorded denoiser evaluations",
        )),
    }
}

/// Coefficients of the zero-noise unit-step iteration for an affine denoiser
/// `eps(x) = slope * (x - center)` queried at the one-step-noised state:
/// returns the contraction factor and the constant offset.
pub fn unit_step_affine_map(slope: f64, center: &[f64], s: &NoiseSchedule) -> (f64, Vec<f64>) {
    let ab0 = s.alphabar(0);
    let ab1 = s.alphabar(1);
    let noise_coef = (ab0 * (1.0 - ab1) / ab1).sqrt();
    let eps_coef = (1.0 - ab0).sqrt() - noise_coef;
    let rho = ab0.sqrt() + eps_coef * slope * ab1.sqrt();
    let offset = center.iter().map(|&c| -eps_coef * slope * c).collect();
    (rho, offset)
}

/// Closed-form fixed point of the zero-noise unit-step iteration for the
/// conditional Gaussian oracle. Errors when the iteration does not contract.
pub fn fixed_point_gaussian(
    o: &GaussianWorldOracle,
    y: Condition,
    s: &NoiseSchedule,
) -> Result<State> {
    let ab1 = s.alphabar(1);
    let (slope, center) = o.affine_coefficients(ab1, y)?;
    let (rho, offset) = unit_step_affine_map(slope, &center, s);
    if rho.abs() >= 1.0 {
        return Err(PieError::NoFixedPoint { rho });
    }
    State::flat(offset.iter().map(|&b| b / (1.0 - rho)).collect())
}
