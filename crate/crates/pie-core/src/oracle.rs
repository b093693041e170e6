//! Closed-form optimal noise predictors for labeled Gaussian worlds.
//!
//! These stand in for a trained backbone: for isotropic Gaussian class
//! conditionals the Bayes-optimal noise prediction has a closed form that is
//! affine in the input, which makes every editing iteration exactly
//! analyzable.

use serde::{Deserialize, Serialize};

use crate::error::{PieError, Result};
use crate::schedule::NoiseSchedule;
use crate::state::{Shape, State};
use crate::synth::LatentWorld;

/// Discrete class label selecting the conditioning target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Condition(pub usize);

/// Conditional noise predictor. Implementations must be deterministic in
/// `(x, t, y)` and return a state of the same shape as `x`.
pub trait Denoiser {
    fn epsilon(&self, x: &State, t: usize, y: Condition) -> Result<State>;

    /// Shape of the states this denoiser operates on.
    fn state_shape(&self) -> Shape;
}

/// Bayes-optimal conditional noise predictor for a [`LatentWorld`] under a
/// fixed noise schedule.
#[derive(Debug, Clone)]
pub struct GaussianWorldOracle {
    world: LatentWorld,
    schedule: NoiseSchedule,
}

impl GaussianWorldOracle {
    pub fn new(world: LatentWorld, schedule: NoiseSchedule) -> Result<Self> {
        if world.var() <= 0.0 {
            return Err(PieError::invalid(
                "oracle world needs strictly positive variance",
            ));
        }
        Ok(GaussianWorldOracle { world, schedule })
    }

    pub fn world(&self) -> &LatentWorld {
        &self.world
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    /// Affine coefficients `(slope, center)` of the conditional prediction at
    /// retention level `ab`: `eps(x) = slope * (x - sqrt(ab) * mean_y)`.
    pub fn affine_coefficients(&self, ab: f64, y: Condition) -> Result<(f64, Vec<f64>)> {
        let mean = self.world.mean(y)?;
        let marginal_var = ab * self.world.var() + (1.0 - ab);
        let slope = (1.0 - ab).sqrt() / marginal_var;
        let center = mean.iter().map(|&m| ab.sqrt() * m).collect();
        Ok((slope, center))
    }

    /// Conditional prediction: the posterior-mean noise estimate given that
    /// `x` was produced by noising a class-`y` draw to level `t`.
    pub fn epsilon_gaussian(&self, x: &State, t: usize, y: Condition) -> Result<State> {
        self.epsilon_gaussian_at(x, self.schedule.alphabar(t), y)
    }

    fn epsilon_gaussian_at(&self, x: &State, ab: f64, y: Condition) -> Result<State> {
        let (slope, center) = self.affine_coefficients(ab, y)?;
        if x.len() != center.len() {
            return Err(PieError::ShapeMismatch {
                left: x.shape().to_string(),
                right: format!("flat({})", center.len()),
            });
        }
        let values = x
            .values()
            .iter()
            .zip(&center)
            .map(|(&v, &c)| slope * (v - c))
            .collect();
        State::new(x.shape(), values)
    }

    /// Marginal-mixture prediction: responsibility-weighted combination of
    /// the per-class predictions. Reduces to [`Self::epsilon_gaussian`] when
    /// the condition is given.
    pub fn epsilon_gmm(&self, x: &State, t: usize, y: Option<Condition>) -> Result<State> {
        if let Some(y) = y {
            return self.epsilon_gaussian(x, t, y);
        }
        let ab = self.schedule.alphabar(t);
        let resp = self.responsibilities_at(x, ab)?;
        let mut out = State::zeros(x.shape());
        for (c, &r) in resp.iter().enumerate() {
            let eps_c = self.epsilon_gaussian_at(x, ab, Condition(c))?;
            out = out.zip_map(&eps_c, |acc, e| acc + r * e)?;
        }
        Ok(out)
    }

    /// Class responsibilities under the level-`t` marginals; sums to 1.
    pub fn posterior_responsibilities(&self, x: &State, t: usize) -> Result<Vec<f64>> {
        self.responsibilities_at(x, self.schedule.alphabar(t))
    }

    pub(crate) fn responsibilities_at(&self, x: &State, ab: f64) -> Result<Vec<f64>> {
        responsibilities(&self.world, x, ab)
    }
}

/// Softmax of per-class log-densities plus log-priors at retention level
/// `ab` (`ab = 1` gives data-time responsibilities). Classes with zero prior
/// get zero responsibility.
pub(crate) fn responsibilities(world: &LatentWorld, x: &State, ab: f64) -> Result<Vec<f64>> {
    let marginal_var = ab * world.var() + (1.0 - ab);
    if marginal_var <= 0.0 {
        return Err(PieError::invalid("degenerate marginal variance"));
    }
    let mut logits = Vec::with_capacity(world.n_classes());
    for class in world.classes() {
        if class.prior == 0.0 {
            logits.push(f64::NEG_INFINITY);
            continue;
        }
        let sq_dist: f64 = x
            .values()
            .iter()
            .zip(&class.mean)
            .map(|(&v, &m)| {
                let d = v - ab.sqrt() * m;
                d * d
            })
            .sum();
        logits.push(class.prior.ln() - 0.5 * sq_dist / marginal_var);
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut weights: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    Ok(weights)
}

impl Denoiser for GaussianWorldOracle {
    fn epsilon(&self, x: &State, t: usize, y: Condition) -> Result<State> {
        self.epsilon_gaussian(x, t, y)
    }

    fn state_shape(&self) -> Shape {
        Shape::Flat(self.world.dim())
    }
}

/// Unconditioned wrapper: always predicts with the marginal mixture,
/// ignoring the conditioning label. Models an uncontrollable generator.
#[derive(Debug, Clone)]
pub struct MarginalOracle(pub GaussianWorldOracle);

impl Denoiser for MarginalOracle {
    fn epsilon(&self, x: &State, t: usize, _y: Condition) -> Result<State> {
        self.0.epsilon_gmm(x, t, None)
    }

    fn state_shape(&self) -> Shape {
        self.0.state_shape()
    }
}

/// Invert the forward-noising relation for an estimated noise:
/// `(x_t - sqrt(1 - ab_t) * eps_hat) / sqrt(ab_t)`.
pub fn predict_x0(x_t: &State, t: usize, eps_hat: &State, s: &NoiseSchedule) -> Result<State> {
    let ab = s.alphabar(t);
    x_t.affine_combine(1.0 / ab.sqrt(), eps_hat, -(1.0 - ab).sqrt() / ab.sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ddim::forward_noise;
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn world_2d() -> LatentWorld {
        LatentWorld::two_class(2, 4.0, 1.0)
    }

    fn schedule() -> NoiseSchedule {
        NoiseSchedule::linear(50, 0.9999, 0.0047).unwrap()
    }

    fn oracle() -> GaussianWorldOracle {
        GaussianWorldOracle::new(world_2d(), schedule()).unwrap()
    }

    /// Schedule-free check of the closed form at ab = 0.5 on a zero-mean
    /// class: coefficient is sqrt(0.5).
    #[test]
    fn epsilon_closed_form_coefficient() {
        let o = oracle();
        let x = State::flat(vec![1.0, 0.0]).unwrap();
        let eps = o
            .epsilon_gaussian_at(&x, 0.5, Condition(0))
            .unwrap();
        assert_relative_eq!(eps.values()[0], 0.5f64.sqrt(), max_relative = 1e-12);
        assert_eq!(eps.values()[1], 0.0);
    }

    #[test]
    fn epsilon_zero_at_scaled_mean() {
        let o = oracle();
        let t = 20;
        let ab = o.schedule().alphabar(t);
        let y = Condition(1);
        let mean = o.world().mean(y).unwrap().to_vec();
        let x = State::flat(mean.iter().map(|m| ab.sqrt() * m).collect()).unwrap();
        let eps = o.epsilon_gaussian(&x, t, y).unwrap();
        assert!(eps.norm() < 1e-12);
    }

    #[test]
    fn epsilon_vanishes_near_full_retention() {
        let o = oracle();
        let ab: f64 = 1.0 - 1e-12;
        let y = Condition(1);
        let mean = o.world().mean(y).unwrap().to_vec();
        let x = State::flat(mean.iter().map(|m| ab.sqrt() * m + 0.5).collect()).unwrap();
        let eps = o.epsilon_gaussian_at(&x, ab, y).unwrap();
        assert!(eps.norm() < 1e-5, "norm {}", eps.norm());
    }

    #[test]
    fn epsilon_unknown_class() {
        let o = oracle();
        let x = State::flat(vec![0.0, 0.0]).unwrap();
        assert!(o.epsilon_gaussian(&x, 1, Condition(5)).is_err());
    }

    /// Monte-Carlo regression oracle: the analytic prediction must match the
    /// least-squares affine fit of eps on x_t.
    #[test]
    fn epsilon_matches_monte_carlo_regression() {
        let world = LatentWorld::two_class(1, 3.0, 1.0);
        let o = GaussianWorldOracle::new(world, schedule()).unwrap();
        let t = 25;
        let ab = o.schedule().alphabar(t);
        let y = Condition(1);
        let mu = 3.0;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 100_000;
        // regress eps on x_t: eps ~ a * x_t + b
        let (mut sx, mut sy, mut sxx, mut sxy) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
        for _ in 0..n {
            let x0 = mu + <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
            let e: f64 = StandardNormal.sample(&mut rng);
            let xt = ab.sqrt() * x0 + (1.0 - ab).sqrt() * e;
            sx += xt;
            sy += e;
            sxx += xt * xt;
            sxy += xt * e;
        }
        let nf = n as f64;
        let a_fit = (sxy / nf - sx / nf * sy / nf) / (sxx / nf - (sx / nf) * (sx / nf));
        let b_fit = sy / nf - a_fit * sx / nf;

        let (slope, center) = o.affine_coefficients(ab, y).unwrap();
        let b_analytic = -slope * center[0];
        assert!((a_fit - slope).abs() < 1e-2, "{a_fit} vs {slope}");
        assert!((b_fit - b_analytic).abs() < 1e-2, "{b_fit} vs {b_analytic}");
    }

    #[test]
    fn lipschitz_constant_of_conditional_prediction() {
        let o = oracle();
        let t = 30;
        let ab = o.schedule().alphabar(t);
        let lip = (1.0 - ab).sqrt() / (ab * o.world().var() + 1.0 - ab);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let a = State::flat((0..2).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap();
            let b = State::flat((0..2).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap();
            let ea = o.epsilon_gaussian(&a, t, Condition(0)).unwrap();
            let eb = o.epsilon_gaussian(&b, t, Condition(0)).unwrap();
            let lhs = ea.distance(&eb).unwrap();
            let rhs = lip * a.distance(&b).unwrap();
            assert!(lhs <= rhs + 1e-12, "{lhs} > {rhs}");
        }
    }

    #[test]
    fn gmm_reduces_to_conditional_for_single_effective_class() {
        // prior mass 1 on one class
        let world = LatentWorld::new(
            2,
            1.0,
            vec![
                crate::synth::ClassSpec {
                    name: "a".into(),
                    mean: vec![0.0, 0.0],
                    prior: 1.0,
                },
                crate::synth::ClassSpec {
                    name: "b".into(),
                    mean: vec![4.0, 0.0],
                    prior: 0.0,
                },
            ],
        )
        .unwrap();
        let o = GaussianWorldOracle::new(world, schedule()).unwrap();
        let x = State::flat(vec![0.3, -0.7]).unwrap();
        let gmm = o.epsilon_gmm(&x, 10, None).unwrap();
        let cond = o.epsilon_gaussian(&x, 10, Condition(0)).unwrap();
        assert_relative_eq!(gmm.values()[0], cond.values()[0], max_relative = 1e-12);
        assert_relative_eq!(gmm.values()[1], cond.values()[1], max_relative = 1e-12);
    }

    #[test]
    fn gmm_cancels_between_symmetric_classes() {
        let world = LatentWorld::new(
            1,
            1.0,
            vec![
                crate::synth::ClassSpec {
                    name: "neg".into(),
                    mean: vec![-2.0],
                    prior: 0.5,
                },
                crate::synth::ClassSpec {
                    name: "pos".into(),
                    mean: vec![2.0],
                    prior: 0.5,
                },
            ],
        )
        .unwrap();
        let o = GaussianWorldOracle::new(world, schedule()).unwrap();
        let x = State::flat(vec![0.0]).unwrap();
        let eps = o.epsilon_gmm(&x, 25, None).unwrap();
        assert!(eps.values()[0].abs() < 1e-12);
    }

    #[test]
    fn gmm_saturates_far_from_the_other_class() {
        let o = oracle();
        let t = 1;
        let ab = o.schedule().alphabar(t);
        let std = (ab * 1.0 + (1.0 - ab)).sqrt();
        // more than 10 combined standard deviations toward class 1
        let x = State::flat(vec![4.0 + 12.0 * std, 0.0]).unwrap();
        let gmm = o.epsilon_gmm(&x, t, None).unwrap();
        let cond = o.epsilon_gaussian(&x, t, Condition(1)).unwrap();
        assert!(gmm.distance(&cond).unwrap() < 1e-9);
    }

    #[test]
    fn responsibilities_basics() {
        let o = oracle();
        // equidistant between the two level-t class centers, equal priors
        let t = 25;
        let ab = o.schedule().alphabar(t);
        let x = State::flat(vec![ab.sqrt() * 2.0, 0.0]).unwrap();
        let r = o.posterior_responsibilities(&x, t).unwrap();
        assert_relative_eq!(r[0], 0.5, max_relative = 1e-12);
        assert_relative_eq!(r[1], 0.5, max_relative = 1e-12);
        assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn responsibilities_degenerate_prior() {
        let world = LatentWorld::new(
            1,
            1.0,
            vec![
                crate::synth::ClassSpec {
                    name: "only".into(),
                    mean: vec![0.0],
                    prior: 1.0,
                },
                crate::synth::ClassSpec {
                    name: "never".into(),
                    mean: vec![4.0],
                    prior: 0.0,
                },
            ],
        )
        .unwrap();
        let o = GaussianWorldOracle::new(world, schedule()).unwrap();
        let x = State::flat(vec![100.0]).unwrap();
        let r = o.posterior_responsibilities(&x, 10).unwrap();
        assert_eq!(r, vec![1.0, 0.0]);
    }

    /// Frozen from direct density evaluation: classes at 0 and 4, unit
    /// variance, data-time, x = 1 -> logistic of the half squared-distance
    /// gap.
    #[test]
    fn responsibilities_data_time_value() {
        let world = LatentWorld::new(
            1,
            1.0,
            vec![
                crate::synth::ClassSpec {
                    name: "a".into(),
                    mean: vec![0.0],
                    prior: 0.5,
                },
                crate::synth::ClassSpec {
                    name: "b".into(),
                    mean: vec![4.0],
                    prior: 0.5,
                },
            ],
        )
        .unwrap();
        let x = State::flat(vec![1.0]).unwrap();
        let r = responsibilities(&world, &x, 1.0).unwrap();
        assert_relative_eq!(r[0], 0.9820137900379084, max_relative = 1e-12);
        assert_relative_eq!(r[1], 0.0179862099620916, max_relative = 1e-10);
    }

    #[test]
    fn responsibilities_are_permutation_equivariant() {
        let w1 = LatentWorld::new(
            1,
            1.0,
            vec![
                crate::synth::ClassSpec {
                    name: "a".into(),
                    mean: vec![0.0],
                    prior: 0.3,
                },
                crate::synth::ClassSpec {
                    name: "b".into(),
                    mean: vec![4.0],
                    prior: 0.7,
                },
            ],
        )
        .unwrap();
        let w2 = LatentWorld::new(
            1,
            1.0,
            vec![
                crate::synth::ClassSpec {
                    name: "b".into(),
                    mean: vec![4.0],
                    prior: 0.7,
                },
                crate::synth::ClassSpec {
                    name: "a".into(),
                    mean: vec![0.0],
                    prior: 0.3,
                },
            ],
        )
        .unwrap();
        let x = State::flat(vec![1.7]).unwrap();
        let r1 = responsibilities(&w1, &x, 0.9).unwrap();
        let r2 = responsibilities(&w2, &x, 0.9).unwrap();
        assert_relative_eq!(r1[0], r2[1], max_relative = 1e-14);
        assert_relative_eq!(r1[1], r2[0], max_relative = 1e-14);
    }

    #[test]
    fn predict_x0_values() {
        let s = NoiseSchedule::from_alphabars(vec![0.9, 0.25, 0.1]).unwrap();
        // pure rescale when eps_hat is zero
        let x = State::flat(vec![1.0]).unwrap();
        let z = State::zeros(x.shape());
        let got = predict_x0(&x, 1, &z, &s).unwrap();
        assert_relative_eq!(got.values()[0], 2.0, max_relative = 1e-12);

        // hand arithmetic: (1 - sqrt(0.75) * 0.5) / 0.5
        let eps = State::flat(vec![0.5]).unwrap();
        let got = predict_x0(&x, 1, &eps, &s).unwrap();
        assert_relative_eq!(got.values()[0], 1.1339745962155614, max_relative = 1e-12);
    }

    #[test]
    fn predict_x0_inverts_forward_noise_with_true_eps() {
        let s = schedule();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for t in [1usize, 10, 25, 50] {
            let x0 = State::flat((0..4).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap();
            let eps = State::flat((0..4).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap();
            let xt = forward_noise(&x0, t, &eps, &s).unwrap();
            let back = predict_x0(&xt, t, &eps, &s).unwrap();
            assert!(back.distance(&x0).unwrap() < 1e-9);
        }
    }
}
