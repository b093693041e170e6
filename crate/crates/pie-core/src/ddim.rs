//! Deterministic sampler machinery: forward noising, reverse steps, full
//! denoising loops, inversion, and pure sampling.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::oracle::{Condition, Denoiser};
use crate::schedule::NoiseSchedule;
use crate::state::State;

/// `sqrt(ab_t) * x0 + sqrt(1 - ab_t) * eps`.
pub fn forward_noise(x0: &State, t: usize, eps: &State, s: &NoiseSchedule) -> Result<State> {
    let ab = s.alphabar(t);
    forward_noise_at(x0, ab, eps)
}

pub(crate) fn forward_noise_at(x0: &State, ab: f64, eps: &State) -> Result<State> {
    x0.affine_combine(ab.sqrt(), eps, (1.0 - ab).sqrt())
}

/// One deterministic reverse step from level `t` to `t - 1` with the given
/// noise estimate.
pub fn reverse_step(x_t: &State, t: usize, eps_hat: &State, s: &NoiseSchedule) -> Result<State> {
    assert!(t >= 1, "reverse step needs t >= 1");
    reverse_step_at(x_t, s.alphabar(t - 1), s.alphabar(t), eps_hat)
}

pub(crate) fn reverse_step_at(x_t: &State, ab_prev: f64, ab_t: f64, eps_hat: &State) -> Result<State> {
    // sqrt(ab_prev) * (x_t - sqrt(1 - ab_t) eps) / sqrt(ab_t) + sqrt(1 - ab_prev) eps
    let scale = (ab_prev / ab_t).sqrt();
    let eps_coef = (1.0 - ab_prev).sqrt() - scale * (1.0 - ab_t).sqrt();
    x_t.affine_combine(scale, eps_hat, eps_coef)
}

/// Run the reverse recursion from level `k` down to 0, querying the denoiser
/// at each level. `k = 0` returns the input unchanged.
pub fn denoise_from(
    x_k: &State,
    k: usize,
    d: &dyn Denoiser,
    y: Condition,
    s: &NoiseSchedule,
) -> Result<State> {
    let mut x = x_k.clone();
    for t in (1..=k).rev() {
        let eps_hat = d.epsilon(&x, t, y)?;
        x = reverse_step(&x, t, &eps_hat, s)?;
    }
    Ok(x)
}

/// Denoising loop that clips the implied clean-state estimate to a value
/// range at every level before stepping. Keeps chains driven by imperfect
/// learned predictors from amplifying their errors; the analytic-oracle
/// paths never need it.
pub fn denoise_from_clipped(
    x_k: &State,
    k: usize,
    d: &dyn Denoiser,
    y: Condition,
    s: &NoiseSchedule,
    range: (f64, f64),
) -> Result<State> {
    let (lo, hi) = range;
    let mut x = x_k.clone();
    for t in (1..=k).rev() {
        let eps_hat = d.epsilon(&x, t, y)?;
        let ab_t = s.alphabar(t);
        let ab_prev = s.alphabar(t - 1);
        let x0_hat = crate::oracle::predict_x0(&x, t, &eps_hat, s)?.map(|v| v.clamp(lo, hi));
        // effective noise consistent with the clipped estimate
        let eps_eff = x.affine_combine(
            1.0 / (1.0 - ab_t).sqrt(),
            &x0_hat,
            -ab_t.sqrt() / (1.0 - ab_t).sqrt(),
        )?;
        x = x0_hat.affine_combine(ab_prev.sqrt(), &eps_eff, (1.0 - ab_prev).sqrt())?;
    }
    Ok(x)
}

/// Options for [`invert_with`]: optionally refine each inverted level by
/// fixed-point iteration so the noise estimate is evaluated at the level it
/// belongs to.
#[derive(Debug, Clone, Copy)]
pub struct InvertOptions {
    pub refine: bool,
    pub max_refine_iters: usize,
    pub refine_tolerance: f64,
}

impl Default for InvertOptions {
    fn default() -> Self {
        InvertOptions {
            refine: false,
            max_refine_iters: 10,
            refine_tolerance: 1e-10,
        }
    }
}

/// Invert the reverse recursion: walk a clean state up to level `k` so that
/// denoising it comes back to (approximately) the input. The plain form
/// evaluates the noise estimate at the previous level's state.
pub fn invert(x0: &State, k: usize, d: &dyn Denoiser, y: Condition, s: &NoiseSchedule) -> Result<State> {
    invert_with(x0, k, d, y, s, &InvertOptions::default())
}

pub fn invert_with(
    x0: &State,
    k: usize,
    d: &dyn Denoiser,
    y: Condition,
    s: &NoiseSchedule,
    opts: &InvertOptions,
) -> Result<State> {
    let mut x = x0.clone();
    for t in 1..=k {
        let eps_hat = d.epsilon(&x, t, y)?;
        let mut x_t = invert_step(&x, t, &eps_hat, s)?;
        if opts.refine {
            for _ in 0..opts.max_refine_iters {
                let eps_ref = d.epsilon(&x_t, t, y)?;
                let next = invert_step(&x, t, &eps_ref, s)?;
                let delta = next.distance(&x_t)?;
                x_t = next;
                if delta <= opts.refine_tolerance {
                    break;
                }
            }
        }
        x = x_t;
    }
    Ok(x)
}

/// Solve the reverse step for `x_t` given `x_{t-1}` and a noise estimate.
fn invert_step(x_prev: &State, t: usize, eps_hat: &State, s: &NoiseSchedule) -> Result<State> {
    let ab_prev = s.alphabar(t - 1);
    let ab_t = s.alphabar(t);
    let scale = (ab_t / ab_prev).sqrt();
    let eps_coef = (1.0 - ab_t).sqrt() - scale * (1.0 - ab_prev).sqrt();
    x_prev.affine_combine(scale, eps_hat, eps_coef)
}

/// Draw a standard-normal terminal state and denoise it all the way down.
/// Deterministic per seed.
pub fn sample(d: &dyn Denoiser, y: Condition, s: &NoiseSchedule, rng: &mut impl Rng) -> Result<State> {
    let shape = d.state_shape();
    let values = (0..shape.len())
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    let x_t = State::new(shape, values)?;
    denoise_from(&x_t, s.t_steps(), d, y, s)
}

/// Range-clipped variant of [`sample`] for learned predictors over bounded
/// data.
pub fn sample_clipped(
    d: &dyn Denoiser,
    y: Condition,
    s: &NoiseSchedule,
    range: (f64, f64),
    rng: &mut impl Rng,
) -> Result<State> {
    let shape = d.state_shape();
    let values = (0..shape.len())
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    let x_t = State::new(shape, values)?;
    denoise_from_clipped(&x_t, s.t_steps(), d, y, s, range)
}
