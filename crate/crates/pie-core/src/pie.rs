//! The progressive editing step and its multi-step recursion.
//!
//! One step re-noises the current state to level `k = round(gamma * T)`,
//! denoises it back under the conditioning label, and then blends the edit
//! against the original input inside/outside the region of interest with the
//! weights `beta2`/`beta1`. Iterating the step produces a progression
//! trajectory anchored to the original input.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::ddim::forward_noise;
use crate::error::{PieError, Result};
use crate::metrics;
use crate::oracle::{Condition, Denoiser};
use crate::schedule::NoiseSchedule;
use crate::state::State;

/// How the per-step noise draw is produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseMode {
    /// Fresh standard-normal draw every step.
    Fresh,
    /// One draw at trajectory start, reused every step.
    FixedSeed,
    /// No noise. Makes the contraction analysis exact.
    Zero,
}

/// Editing configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PieConfig {
    /// Noise strength in [0, 1]; the re-noising level is `round(gamma * T)`,
    /// clamped to [0, T].
    pub gamma: f64,
    /// Number of editing steps.
    pub steps: usize,
    /// Blend weight outside the region of interest.
    pub beta1: f64,
    /// Blend weight inside the region of interest.
    pub beta2: f64,
    pub noise_mode: NoiseMode,
}

impl Default for PieConfig {
    fn default() -> Self {
        PieConfig {
            gamma: 0.5,
            steps: 10,
            beta1: 0.1,
            beta2: 0.75,
            noise_mode: NoiseMode::Fresh,
        }
    }
}

impl PieConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("gamma", self.gamma), ("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(PieError::invalid(format!("{name} must be in [0, 1], got {v}")));
            }
        }
        Ok(())
    }

    /// Re-noising level: `gamma * T` rounded half-up, clamped to [0, T].
    pub fn noise_level(&self, t_steps: usize) -> usize {
        let k = (self.gamma * t_steps as f64 + 0.5).floor();
        (k.max(0.0) as usize).min(t_steps)
    }
}

/// Per-cell region weights in [0, 1], shape-matched to the states they gate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiMask(State);

impl RoiMask {
    pub fn new(weights: State) -> Result<Self> {
        if let Some(v) = weights.values().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(PieError::invalid(format!(
                "mask weights must be in [0, 1], found {v}"
            )));
        }
        Ok(RoiMask(weights))
    }

    /// All-ones mask of the given shape: every cell is fully editable.
    pub fn full(shape: crate::state::Shape) -> Self {
        RoiMask(State::zeros(shape).map(|_| 1.0))
    }

    pub fn state(&self) -> &State {
        &self.0
    }

    pub fn values(&self) -> &[f64] {
        self.0.values()
    }
}

/// Per-state record along a trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    /// Euclidean distance to the previous state (0 for the first).
    pub step_diff_norm: f64,
    /// Target-class confidence, filled by a scorer pass.
    pub conf: Option<f64>,
    /// Cosine similarity to the original input.
    pub similarity: Option<f64>,
    /// Largest denoiser output norm observed while producing this state.
    pub eps_norm: Option<f64>,
}

/// An edit trajectory: the initial state plus one state per step, with
/// per-state records, the configuration, and the seed that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Vec<State>,
    pub records: Vec<StepRecord>,
    pub config: Option<PieConfig>,
    pub seed: u64,
}

impl Trajectory {
    pub fn len_steps(&self) -> usize {
        self.states.len() - 1
    }

    pub fn initial(&self) -> &State {
        &self.states[0]
    }

    pub fn final_state(&self) -> &State {
        self.states.last().expect("trajectory is never empty")
    }

    /// Fill the per-state confidence records with a scoring function.
    pub fn score_confidence(&mut self, score: impl Fn(&State) -> Option<f64>) {
        for (state, record) in self.states.iter().zip(&mut self.records) {
            record.conf = score(state);
        }
    }

    pub fn final_conf(&self) -> Option<f64> {
        self.records.last().and_then(|r| r.conf)
    }

    pub fn final_similarity(&self) -> Option<f64> {
        self.records.last().and_then(|r| r.similarity)
    }
}

/// Line-8 blend: per cell,
/// `(b1*(e - b) + b) * (1 - m) + (b2*(e - b) + b) * m`,
/// algebraically `b + (b1*(1 - m) + b2*m) * (e - b)`. The second form is the
/// one implemented: it keeps the identities `mix = 0 -> base` and
/// `mix = 1 -> edit` exact per cell.
pub fn blend(x_edit: &State, x_base: &State, m: &RoiMask, beta1: f64, beta2: f64) -> Result<State> {
    x_base.check_same_shape(m.state())?;
    x_edit.zip_map(x_base, |_, _| 0.0)?; // shape check only
    let values = x_edit
        .values()
        .iter()
        .zip(x_base.values())
        .zip(m.values())
        .map(|((&e, &b), &m)| {
            let mix = beta1 * (1.0 - m) + beta2 * m;
            if mix == 0.0 {
                b
            } else if mix == 1.0 {
                e
            } else {
                b + mix * (e - b)
            }
        })
        .collect();
    State::new(x_edit.shape(), values)
}

fn draw_noise(shape: crate::state::Shape, rng: &mut impl Rng) -> State {
    let values = (0..shape.len())
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    State::new(shape, values).expect("normal draws are finite")
}

/// One editing step: re-noise the previous state, denoise under `y`, blend
/// against the original input `x_base`. The returned `eps_sup` is the
/// largest denoiser output norm seen in the denoising loop.
pub fn pie_step(
    x_prev: &State,
    x_base: &State,
    y: Condition,
    m: &RoiMask,
    c: &PieConfig,
    d: &dyn Denoiser,
    s: &NoiseSchedule,
    rng: &mut impl Rng,
    fixed_eps: Option<&State>,
) -> Result<(State, f64)> {
    c.validate()?;
    let k = c.noise_level(s.t_steps());
    // level 0 is identity: no noising, no reverse loop
    if k == 0 {
        return Ok((blend(x_prev, x_base, m, c.beta1, c.beta2)?, 0.0));
    }
    let eps = match c.noise_mode {
        NoiseMode::Zero => State::zeros(x_prev.shape()),
        NoiseMode::FixedSeed => fixed_eps
            .cloned()
            .unwrap_or_else(|| draw_noise(x_prev.shape(), rng)),
        NoiseMode::Fresh => draw_noise(x_prev.shape(), rng),
    };
    let mut x = forward_noise(x_prev, k, &eps, s)?;
    let mut eps_sup = 0.0f64;
    for t in (1..=k).rev() {
        let eps_hat = d.epsilon(&x, t, y)?;
        eps_sup = eps_sup.max(eps_hat.norm());
        x = crate::ddim::reverse_step(&x, t, &eps_hat, s)?;
    }
    Ok((blend(&x, x_base, m, c.beta1, c.beta2)?, eps_sup))
}

/// Run the editing recursion for `c.steps` steps, anchoring every blend to
/// the original input. Deterministic per seed.
pub fn run_progression(
    x0: &State,
    y: Condition,
    m: &RoiMask,
    c: &PieConfig,
    d: &dyn Denoiser,
    s: &NoiseSchedule,
    seed: u64,
) -> Result<Trajectory> {
    c.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fixed_eps = match c.noise_mode {
        NoiseMode::FixedSeed => Some(draw_noise(x0.shape(), &mut rng)),
        _ => None,
    };
    let mut states = Vec::with_capacity(c.steps + 1);
    let mut records = Vec::with_capacity(c.steps + 1);
    states.push(x0.clone());
    records.push(StepRecord {
        step_diff_norm: 0.0,
        conf: None,
        similarity: metrics::similarity(x0, x0).ok(),
        eps_norm: None,
    });
    for _ in 0..c.steps {
        let prev = states.last().unwrap();
        let (next, eps_sup) = pie_step(prev, x0, y, m, c, d, s, &mut rng, fixed_eps.as_ref())?;
        records.push(StepRecord {
            step_diff_norm: next.distance(prev)?,
            conf: None,
            similarity: metrics::similarity(&next, x0).ok(),
            eps_norm: Some(eps_sup),
        });
        states.push(next);
    }
    Ok(Trajectory {
        states,
        records,
        config: Some(*c),
        seed,
    })
}

/// Per-cell absolute difference between state `n` and the initial state.
pub fn diff_heatmap(traj: &Trajectory, n: usize) -> Result<State> {
    let state = traj
        .states
        .get(n)
        .ok_or_else(|| PieError::invalid(format!("step index {n} out of range")))?;
    state.zip_map(traj.initial(), |a, b| (a - b).abs())
}
