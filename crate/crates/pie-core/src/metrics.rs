//! Evaluation metrics and the two comparison baselines.
//!
//! Confidence scores (exact posterior on latent worlds, trained logistic
//! probe on images), cosine similarity to the source, an unbiased
//! polynomial-kernel two-sample discrepancy, rank correlation, and the
//! latent-extrapolation and noise-space-interpolation baselines.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::ddim::{denoise_from, invert, InvertOptions};
use crate::error::{PieError, Result};
use crate::oracle::{responsibilities, Condition, Denoiser};
use crate::pie::{blend, RoiMask, StepRecord, Trajectory};
use crate::schedule::NoiseSchedule;
use crate::state::State;
use crate::synth::LatentWorld;

/// Exact posterior probability of `disease_class` at data time.
pub fn bayes_confidence(w: &LatentWorld, x: &State, disease_class: Condition) -> Result<f64> {
    if disease_class.0 >= w.n_classes() {
        return Err(PieError::UnknownClass(format!("index {}", disease_class.0)));
    }
    let r = responsibilities(w, x, 1.0)?;
    Ok(r[disease_class.0])
}

/// Conditional log-density of `x` under class `y` of the world (data time).
pub fn class_log_density(w: &LatentWorld, x: &State, y: Condition) -> Result<f64> {
    let mean = w.mean(y)?;
    let var = w.var();
    if var <= 0.0 {
        return Err(PieError::invalid("log density needs positive variance"));
    }
    let sq: f64 = x
        .values()
        .iter()
        .zip(mean)
        .map(|(&v, &m)| (v - m) * (v - m))
        .sum();
    let d = x.len() as f64;
    Ok(-0.5 * sq / var - 0.5 * d * (2.0 * std::f64::consts::PI * var).ln())
}

/// Binary logistic probe over flattened states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearClassifier {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LinearClassifier {
    pub fn zeros(dim: usize) -> Self {
        LinearClassifier {
            weights: vec![0.0; dim],
            bias: 0.0,
        }
    }

    /// Probability that `x` belongs to the positive class.
    pub fn confidence(&self, x: &State) -> f64 {
        let z: f64 = self
            .weights
            .iter()
            .zip(x.values())
            .map(|(w, v)| w * v)
            .sum::<f64>()
            + self.bias;
        1.0 / (1.0 + (-z).exp())
    }
}

/// Logistic training settings. Full-batch gradient descent; the seed only
/// drives the train/holdout split.
#[derive(Debug, Clone, Copy)]
pub struct ClassifierTrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        ClassifierTrainConfig {
            epochs: 300,
            learning_rate: 0.5,
            holdout_fraction: 0.2,
            seed: 0,
        }
    }
}

/// A trained probe plus its accuracy on the training and held-out splits.
#[derive(Debug, Clone)]
pub struct ClassifierReport {
    pub model: LinearClassifier,
    pub train_accuracy: f64,
    pub holdout_accuracy: f64,
}

fn accuracy(model: &LinearClassifier, items: &[(&State, bool)]) -> f64 {
    if items.is_empty() {
        return 1.0;
    }
    let correct = items
        .iter()
        .filter(|(x, positive)| (model.confidence(x) >= 0.5) == *positive)
        .count();
    correct as f64 / items.len() as f64
}

/// Train a logistic probe; `positive` marks the class treated as label 1.
/// Deterministic per seed. Errors when only one class is present.
pub fn train_classifier(
    items: &[(State, Condition)],
    positive: Condition,
    cfg: &ClassifierTrainConfig,
) -> Result<ClassifierReport> {
    if items.is_empty() {
        return Err(PieError::invalid("empty training set"));
    }
    let n_pos = items.iter().filter(|(_, y)| *y == positive).count();
    if n_pos == 0 || n_pos == items.len() {
        return Err(PieError::invalid(
            "training set must contain both classes",
        ));
    }
    let dim = items[0].0.len();
    for (x, _) in items {
        if x.len() != dim {
            return Err(PieError::ShapeMismatch {
                left: format!("flat({dim})"),
                right: x.shape().to_string(),
            });
        }
    }

    // deterministic shuffled split
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let n_hold = ((items.len() as f64) * cfg.holdout_fraction).floor() as usize;
    let (hold_idx, train_idx) = order.split_at(n_hold);

    // fall back to training on everything if the split lost a class
    let train: Vec<(&State, bool)> = {
        let t = train_idx
            .iter()
            .map(|&i| (&items[i].0, items[i].1 == positive))
            .collect::<Vec<_>>();
        if t.iter().any(|(_, p)| *p) && t.iter().any(|(_, p)| !*p) {
            t
        } else {
            items.iter().map(|(x, y)| (x, *y == positive)).collect()
        }
    };
    let holdout: Vec<(&State, bool)> = hold_idx
        .iter()
        .map(|&i| (&items[i].0, items[i].1 == positive))
        .collect();

    let mut model = LinearClassifier::zeros(dim);
    let n = train.len() as f64;
    for _ in 0..cfg.epochs {
        let mut grad_w = vec![0.0f64; dim];
        let mut grad_b = 0.0f64;
        for (x, positive) in &train {
            let p = model.confidence(x);
            let err = p - if *positive { 1.0 } else { 0.0 };
            for (g, v) in grad_w.iter_mut().zip(x.values()) {
                *g += err * v;
            }
            grad_b += err;
        }
        for (w, g) in model.weights.iter_mut().zip(&grad_w) {
            *w -= cfg.learning_rate * g / n;
        }
        model.bias -= cfg.learning_rate * grad_b / n;
    }

    Ok(ClassifierReport {
        train_accuracy: accuracy(&model, &train),
        holdout_accuracy: accuracy(&model, &holdout),
        model,
    })
}

/// Cosine similarity of mean-centered flattened states, in [-1, 1]. Errors
/// when either input centers to the zero vector.
pub fn similarity(a: &State, b: &State) -> Result<f64> {
    a.check_same_shape(b)?;
    let center = |s: &State| -> Vec<f64> {
        let mean = s.values().iter().sum::<f64>() / s.len() as f64;
        s.values().iter().map(|v| v - mean).collect()
    };
    let ca = center(a);
    let cb = center(b);
    let na: f64 = ca.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = cb.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(PieError::UndefinedSimilarity);
    }
    let dot: f64 = ca.iter().zip(&cb).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Cubic polynomial kernel `(x . y / d + 1)^3` over flattened states.
fn poly3(a: &State, b: &State) -> f64 {
    let d = a.len() as f64;
    let dot: f64 = a
        .values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| x * y)
        .sum();
    (dot / d + 1.0).powi(3)
}

/// Unbiased squared maximum mean discrepancy with the cubic polynomial
/// kernel. Diagonal terms are excluded, so the estimate can be slightly
/// negative for matching distributions.
pub fn mmd_poly(a: &[State], b: &[State]) -> Result<f64> {
    let m = a.len();
    let n = b.len();
    if m < 2 || n < 2 {
        return Err(PieError::invalid(format!(
            "mmd needs at least 2 samples per set, got {m} and {n}"
        )));
    }
    let mut kaa = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                kaa += poly3(&a[i], &a[j]);
            }
        }
    }
    let mut kbb = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                kbb += poly3(&b[i], &b[j]);
            }
        }
    }
    let mut kab = 0.0;
    for x in a {
        for y in b {
            kab += poly3(x, y);
        }
    }
    Ok(kaa / (m * (m - 1)) as f64 + kbb / (n * (n - 1)) as f64 - 2.0 * kab / (m * n) as f64)
}

/// Spearman rank correlation of two equally long sequences. Ties get their
/// average rank.
pub fn spearman(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(PieError::invalid("spearman needs two equal series, len >= 2"));
    }
    let rank = |v: &[f64]| -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).expect("finite metric values"));
        let mut ranks = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                ranks[k] = avg;
            }
            i = j + 1;
        }
        ranks
    };
    let rx = rank(xs);
    let ry = rank(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return Err(PieError::invalid("spearman undefined for constant series"));
    }
    Ok(cov / (vx * vy).sqrt())
}

/// One latent-extrapolation update: add the weighted mean of the pair
/// differences to the state.
pub fn extrapolation_step(x: &State, pairs: &[(State, State)], weights: &[f64]) -> Result<State> {
    if pairs.is_empty() {
        return Err(PieError::invalid("extrapolation needs at least one pair"));
    }
    if weights.len() != pairs.len() {
        return Err(PieError::invalid(format!(
            "{} weights for {} pairs",
            weights.len(),
            pairs.len()
        )));
    }
    let mut delta = State::zeros(x.shape());
    for ((a, b), &w) in pairs.iter().zip(weights) {
        let diff = b.sub(a)?;
        delta = delta.zip_map(&diff, |acc, d| acc + w * d)?;
    }
    let m = pairs.len() as f64;
    x.zip_map(&delta, |v, d| v + d / m)
}

/// Extrapolation update followed by the same anchored region blend the
/// editing step uses.
pub fn extrapolation_step_masked(
    x: &State,
    x_base: &State,
    pairs: &[(State, State)],
    weights: &[f64],
    m: &RoiMask,
    beta1: f64,
    beta2: f64,
) -> Result<State> {
    let raw = extrapolation_step(x, pairs, weights)?;
    blend(&raw, x_base, m, beta1, beta2)
}

/// Spherical interpolation between two noise vectors.
fn slerp(a: &State, b: &State, lambda: f64) -> Result<State> {
    let na = a.norm();
    let nb = b.norm();
    if na == 0.0 || nb == 0.0 {
        return a.affine_combine(1.0 - lambda, b, lambda);
    }
    let cos = (a.dot(b)? / (na * nb)).clamp(-1.0, 1.0);
    let omega = cos.acos();
    if omega.sin().abs() < 1e-10 {
        return a.affine_combine(1.0 - lambda, b, lambda);
    }
    let wa = ((1.0 - lambda) * omega).sin() / omega.sin();
    let wb = (lambda * omega).sin() / omega.sin();
    a.affine_combine(wa, b, wb)
}

/// Noise-space interpolation walk: invert the start once, slerp its noise
/// map toward one fresh draw, denoise every waypoint under `y`. Waypoint
/// parameters run from 0 (pure inverted start) to 1 in `steps - 1`
/// increments; a single step stays at 0.
pub fn interpolation_walk(
    x_start: &State,
    y: Condition,
    d: &dyn Denoiser,
    s: &NoiseSchedule,
    steps: usize,
    seed: u64,
) -> Result<Trajectory> {
    assert!(steps >= 1, "walk needs at least one step");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = s.t_steps();
    let e0 = invert(x_start, t, d, y, s)?;
    let target = State::new(
        x_start.shape(),
        (0..x_start.len())
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect(),
    )?;

    let mut states = Vec::with_capacity(steps + 1);
    let mut records = Vec::with_capacity(steps + 1);
    states.push(x_start.clone());
    records.push(StepRecord {
        step_diff_norm: 0.0,
        conf: None,
        similarity: similarity(x_start, x_start).ok(),
        eps_norm: None,
    });
    for i in 0..steps {
        let lambda = if steps == 1 {
            0.0
        } else {
            i as f64 / (steps - 1) as f64
        };
        let waypoint = slerp(&e0, &target, lambda)?;
        let state = denoise_from(&waypoint, t, d, y, s)?;
        let prev = states.last().unwrap();
        records.push(StepRecord {
            step_diff_norm: state.distance(prev)?,
            conf: None,
            similarity: similarity(&state, x_start).ok(),
            eps_norm: None,
        });
        states.push(state);
    }
    Ok(Trajectory {
        states,
        records,
        config: None,
        seed,
    })
}

/// Refined-inversion variant of the walk used where the roundtrip must be
/// tight on affine worlds.
pub fn interpolation_walk_refined(
    x_start: &State,
    y: Condition,
    d: &dyn Denoiser,
    s: &NoiseSchedule,
    steps: usize,
    seed: u64,
) -> Result<Trajectory> {
    assert!(steps >= 1);
    let opts = InvertOptions {
        refine: true,
        ..InvertOptions::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let t = s.t_steps();
    let e0 = crate::ddim::invert_with(x_start, t, d, y, s, &opts)?;
    let target = State::new(
        x_start.shape(),
        (0..x_start.len())
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect(),
    )?;
    let mut states = vec![x_start.clone()];
    let mut records = vec![StepRecord {
        step_diff_norm: 0.0,
        conf: None,
        similarity: similarity(x_start, x_start).ok(),
        eps_norm: None,
    }];
    for i in 0..steps {
        let lambda = if steps == 1 {
            0.0
        } else {
            i as f64 / (steps - 1) as f64
        };
        let waypoint = slerp(&e0, &target, lambda)?;
        let state = denoise_from(&waypoint, t, d, y, s)?;
        let prev = states.last().unwrap();
        records.push(StepRecord {
            step_diff_norm: state.distance(prev)?,
            conf: None,
            similarity: similarity(&state, x_start).ok(),
            eps_norm: None,
        });
        states.push(state);
    }
    Ok(Trajectory {
        states,
        records,
        config: None,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::GaussianWorldOracle;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand_distr::Distribution;

    fn schedule() -> NoiseSchedule {
        NoiseSchedule::linear(50, 0.9999, 0.0047).unwrap()
    }

    #[test]
    fn bayes_confidence_basics() {
        let w = LatentWorld::two_class(1, 4.0, 1.0);
        let disease = w.class_index("disease").unwrap();
        // midpoint of two equal-prior classes
        let mid = State::flat(vec![2.0]).unwrap();
        assert_relative_eq!(
            bayes_confidence(&w, &mid, disease).unwrap(),
            0.5,
            max_relative = 1e-12
        );
        // frozen from direct density evaluation at x = 3
        let x = State::flat(vec![3.0]).unwrap();
        assert_relative_eq!(
            bayes_confidence(&w, &x, disease).unwrap(),
            0.9820137900379084,
            max_relative = 1e-12
        );
        assert!(bayes_confidence(&w, &x, Condition(7)).is_err());
    }

    #[test]
    fn bayes_confidence_degenerate_prior() {
        let w = LatentWorld::two_class_with_priors(1, 4.0, 1.0, 0.0);
        let disease = w.class_index("disease").unwrap();
        for v in [-10.0, 0.0, 2.0, 50.0] {
            let x = State::flat(vec![v]).unwrap();
            assert_eq!(bayes_confidence(&w, &x, disease).unwrap(), 1.0);
        }
    }

    #[test]
    fn classifier_trivial_cases() {
        let zero = LinearClassifier::zeros(3);
        let x = State::flat(vec![1.0, -5.0, 2.0]).unwrap();
        assert_eq!(zero.confidence(&x), 0.5);

        // linearly separable 2-point dataset
        let items = vec![
            (State::flat(vec![-1.0]).unwrap(), Condition(0)),
            (State::flat(vec![1.0]).unwrap(), Condition(1)),
        ];
        let cfg = ClassifierTrainConfig {
            holdout_fraction: 0.0,
            ..ClassifierTrainConfig::default()
        };
        let report = train_classifier(&items, Condition(1), &cfg).unwrap();
        assert_eq!(report.train_accuracy, 1.0);
    }

    #[test]
    fn classifier_rejects_single_class() {
        let items = vec![
            (State::flat(vec![0.0]).unwrap(), Condition(0)),
            (State::flat(vec![1.0]).unwrap(), Condition(0)),
        ];
        assert!(train_classifier(&items, Condition(0), &ClassifierTrainConfig::default()).is_err());
        assert!(train_classifier(&items, Condition(1), &ClassifierTrainConfig::default()).is_err());
    }

    #[test]
    fn classifier_is_seed_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let items: Vec<(State, Condition)> = (0..50)
            .map(|i| {
                let c = i % 2;
                let x = State::flat(vec![
                    c as f64 * 3.0 + <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng),
                    <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng),
                ])
                .unwrap();
                (x, Condition(c))
            })
            .collect();
        let cfg = ClassifierTrainConfig::default();
        let a = train_classifier(&items, Condition(1), &cfg).unwrap();
        let b = train_classifier(&items, Condition(1), &cfg).unwrap();
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn similarity_basics() {
        let a = State::flat(vec![1.0, 2.0, 4.0]).unwrap();
        assert_relative_eq!(similarity(&a, &a).unwrap(), 1.0, max_relative = 1e-12);
        let neg = a.scale(-1.0);
        assert_relative_eq!(similarity(&a, &neg).unwrap(), -1.0, max_relative = 1e-12);

        // orthogonal after centering
        let b = State::flat(vec![0.0, 1.0, 0.0]).unwrap();
        let c = State::flat(vec![1.0, 0.0, -1.0]).unwrap();
        assert!(similarity(&b, &c).unwrap().abs() < 1e-12);

        // constant vectors center to zero
        let flat = State::flat(vec![3.0, 3.0]).unwrap();
        assert!(matches!(
            similarity(&flat, &a.clone()),
            Err(PieError::ShapeMismatch { .. })
        ));
        let flat3 = State::flat(vec![3.0, 3.0, 3.0]).unwrap();
        assert!(matches!(
            similarity(&flat3, &a),
            Err(PieError::UndefinedSimilarity)
        ));
    }

    proptest! {
        /// Scale invariance: similarity(a, c*b) = sign(c) * similarity(a, b).
        #[test]
        fn similarity_scale_invariance(seed in 0u64..500, c in prop::sample::select(vec![-3.0, -0.5, 0.25, 2.0, 10.0])) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = State::flat((0..6).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap();
            let b = State::flat((0..6).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap();
            let lhs = similarity(&a, &b.scale(c)).unwrap();
            let rhs = c.signum() * similarity(&a, &b).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-10);
        }
    }

    #[test]
    fn mmd_identical_multisets_nonpositive() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a: Vec<State> = (0..40)
            .map(|_| State::flat((0..3).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap())
            .collect();
        let v = mmd_poly(&a, &a).unwrap();
        assert!(v <= 1e-9, "mmd(A, A) = {v}");
    }

    #[test]
    fn mmd_is_symmetric_and_needs_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let draw = |rng: &mut ChaCha8Rng, shift: f64, n: usize| -> Vec<State> {
            (0..n)
                .map(|_| {
                    State::flat(
                        (0..3)
                            .map(|_| shift + <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
                            .collect(),
                    )
                    .unwrap()
                })
                .collect()
        };
        let a = draw(&mut rng, 0.0, 30);
        let b = draw(&mut rng, 1.0, 25);
        let ab = mmd_poly(&a, &b).unwrap();
        let ba = mmd_poly(&b, &a).unwrap();
        assert_relative_eq!(ab, ba, max_relative = 1e-12);
        assert!(mmd_poly(&a[..1], &b).is_err());
    }

    #[test]
    fn mmd_same_distribution_within_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut draw = |n: usize| -> Vec<State> {
            (0..n)
                .map(|_| {
                    State::flat((0..4).map(|_| StandardNormal.sample(&mut rng)).collect()).unwrap()
                })
                .collect()
        };
        let a = draw(500);
        let b = draw(500);
        let observed = mmd_poly(&a, &b).unwrap();

        // bootstrap scale of the null from disjoint same-distribution splits
        let mut null = Vec::new();
        for _ in 0..20 {
            let x = draw(500);
            let y = draw(500);
            null.push(mmd_poly(&x, &y).unwrap());
        }
        let mean = null.iter().sum::<f64>() / null.len() as f64;
        let sd = (null.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / null.len() as f64)
            .sqrt();
        assert!(
            (observed - mean).abs() < 3.0 * sd + 1e-12,
            "observed {observed}, null {mean} +/- {sd}"
        );
    }

    #[test]
    fn mmd_separates_distant_classes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut draw = |shift: f64, n: usize| -> Vec<State> {
            (0..n)
                .map(|_| {
                    State::flat(
                        (0..4)
                            .map(|_| shift + <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng))
                            .collect(),
                    )
                    .unwrap()
                })
                .collect()
        };
        let a = draw(0.0, 200);
        let b = draw(6.0, 200); // 6 sigma apart
        let observed = mmd_poly(&a, &b).unwrap();
        // null scale from same-distribution pairs
        let mut null = Vec::new();
        for _ in 0..20 {
            let x = draw(0.0, 200);
            let y = draw(0.0, 200);
            null.push(mmd_poly(&x, &y).unwrap());
        }
        let mean = null.iter().sum::<f64>() / null.len() as f64;
        let sd = (null.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / null.len() as f64)
            .sqrt();
        let z = (observed - mean) / sd;
        assert!(z > 5.0, "z = {z}");
    }

    #[test]
    fn spearman_basics() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let up = [10.0, 20.0, 25.0, 90.0];
        let down = [5.0, 4.0, 3.0, 1.0];
        assert_relative_eq!(spearman(&x, &up).unwrap(), 1.0, max_relative = 1e-12);
        assert_relative_eq!(spearman(&x, &down).unwrap(), -1.0, max_relative = 1e-12);
        assert!(spearman(&x, &[1.0, 1.0, 1.0, 1.0]).is_err());
        assert!(spearman(&x, &down[..3]).is_err());
    }

    #[test]
    fn extrapolation_single_pair_collapses() {
        let x = State::flat(vec![1.0, 1.0]).unwrap();
        let p = State::flat(vec![0.0, 0.0]).unwrap();
        let q = State::flat(vec![2.0, -1.0]).unwrap();
        let got = extrapolation_step(&x, &[(p, q)], &[1.0]).unwrap();
        assert_eq!(got.values(), &[3.0, 0.0]);
    }

    #[test]
    fn extrapolation_identical_pairs_do_nothing() {
        let x = State::flat(vec![1.0, 1.0]).unwrap();
        let p = State::flat(vec![0.5, 0.5]).unwrap();
        let pairs = vec![(p.clone(), p.clone()), (p.clone(), p)];
        let got = extrapolation_step(&x, &pairs, &[1.0, 1.0]).unwrap();
        assert_eq!(got, x);
        assert!(extrapolation_step(&x, &[], &[]).is_err());
    }

    /// Full-weight extrapolation overshoots the target mean along the
    /// mean-difference line while its confidence keeps rising.
    #[test]
    fn extrapolation_full_weight_overshoots() {
        let w = LatentWorld::two_class(4, 4.0, 1.0);
        let healthy = w.class_index("healthy").unwrap();
        let disease = w.class_index("disease").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut x = w.sample_latent(healthy, &mut rng).unwrap();
        let start_conf = bayes_confidence(&w, &x, disease).unwrap();
        for _ in 0..10 {
            let pairs: Vec<(State, State)> = (0..16)
                .map(|_| {
                    (
                        w.sample_latent(healthy, &mut rng).unwrap(),
                        w.sample_latent(disease, &mut rng).unwrap(),
                    )
                })
                .collect();
            let weights = vec![1.0; pairs.len()];
            x = extrapolation_step(&x, &pairs, &weights).unwrap();
        }
        // overshot the disease mean along the first coordinate
        assert!(x.values()[0] > 4.0 * 2.0, "first coord {}", x.values()[0]);
        assert!(bayes_confidence(&w, &x, disease).unwrap() > start_conf);
        assert!(bayes_confidence(&w, &x, disease).unwrap() > 0.9);
        // and it is far off the class manifold
        let mu = State::flat(vec![4.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(x.distance(&mu).unwrap() > 10.0);
    }

    #[test]
    fn walk_single_step_stays_near_start() {
        let w = LatentWorld::two_class(2, 4.0, 1.0);
        let o = GaussianWorldOracle::new(w.clone(), schedule()).unwrap();
        let s = o.schedule().clone();
        let disease = w.class_index("disease").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x0 = w.sample_latent(disease, &mut rng).unwrap();
        let traj = interpolation_walk_refined(&x0, disease, &o, &s, 1, 11).unwrap();
        assert_eq!(traj.states.len(), 2);
        let rel = traj.states[1].distance(&x0).unwrap() / x0.norm();
        assert!(rel <= 1e-2, "relative roundtrip error {rel}");
    }

    #[test]
    fn walk_is_seed_deterministic_and_finite() {
        let w = LatentWorld::two_class(2, 4.0, 1.0);
        let o = GaussianWorldOracle::new(w.clone(), schedule()).unwrap();
        let s = o.schedule().clone();
        let y = w.class_index("disease").unwrap();
        let x0 = State::flat(vec![0.5, -0.5]).unwrap();
        let a = interpolation_walk(&x0, y, &o, &s, 5, 21).unwrap();
        let b = interpolation_walk(&x0, y, &o, &s, 5, 21).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.states.len(), 6);
        for state in &a.states {
            assert_eq!(state.shape(), x0.shape());
            assert!(state.values().iter().all(|v| v.is_finite()));
        }
    }
}
