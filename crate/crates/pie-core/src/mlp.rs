//! Small trainable noise predictor for the image regime.
//!
//! Two tanh hidden layers over `[flattened state, sinusoidal time features,
//! one-hot class]`, trained with momentum SGD on the mean squared
//! noise-prediction error. Gradients are hand-derived reverse-mode through
//! the fixed architecture; a finite-difference check pins them down.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::ddim::forward_noise;
use crate::error::{PieError, Result};
use crate::oracle::{Condition, Denoiser};
use crate::schedule::NoiseSchedule;
use crate::state::{Shape, State};

const CHECKPOINT_MAGIC: &[u8; 7] = b"PIEMLP1";

/// Architecture description; all sizes fixed after construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MlpSpec {
    /// Shape of the states the model operates on (flattened internally).
    pub shape: Shape,
    /// Sinusoidal time-feature count (pairs of sin/cos at geometric
    /// frequencies from 1 to T).
    pub time_features: usize,
    pub n_classes: usize,
    pub hidden1: usize,
    pub hidden2: usize,
    /// Step count of the schedule the time features are scaled by.
    pub t_steps: usize,
}

impl MlpSpec {
    pub fn new(shape: Shape, n_classes: usize, t_steps: usize) -> Self {
        MlpSpec {
            shape,
            time_features: 16,
            n_classes,
            hidden1: 256,
            hidden2: 256,
            t_steps,
        }
    }

    fn dim(&self) -> usize {
        self.shape.len()
    }

    fn input_dim(&self) -> usize {
        self.dim() + self.time_features + self.n_classes
    }

    /// Parameter count: three dense layers with biases.
    fn n_params(&self) -> usize {
        let (d, f) = (self.dim(), self.input_dim());
        f * self.hidden1 + self.hidden1 + self.hidden1 * self.hidden2 + self.hidden2
            + self.hidden2 * d + d
    }
}

/// Dense tanh-tanh-linear noise predictor with a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpDenoiser {
    spec: MlpSpec,
    params: Vec<f64>,
}

/// Offsets of each layer inside the flat parameter vector, in declaration
/// order: w1, b1, w2, b2, w3, b3.
struct Layout {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    w3: usize,
    b3: usize,
}

impl MlpDenoiser {
    fn layout(spec: &MlpSpec) -> Layout {
        let f = spec.input_dim();
        let (h1, h2, d) = (spec.hidden1, spec.hidden2, spec.dim());
        let w1 = 0;
        let b1 = w1 + f * h1;
        let w2 = b1 + h1;
        let b2 = w2 + h1 * h2;
        let w3 = b2 + h2;
        let b3 = w3 + h2 * d;
        Layout { w1, b1, w2, b2, w3, b3 }
    }

    /// Zero-initialized model (its output is identically zero).
    pub fn zeros(spec: MlpSpec) -> Self {
        MlpDenoiser {
            params: vec![0.0; spec.n_params()],
            spec,
        }
    }

    /// Random init scaled by fan-in; deterministic per seed.
    pub fn random_init(spec: MlpSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layout = Self::layout(&spec);
        let mut params = vec![0.0; spec.n_params()];
        let f = spec.input_dim();
        let mut fill = |from: usize, to: usize, fan_in: usize, rng: &mut ChaCha8Rng| {
            let scale = 1.0 / (fan_in as f64).sqrt();
            for p in &mut params[from..to] {
                *p = scale * rng.sample::<f64, _>(StandardNormal);
            }
        };
        fill(layout.w1, layout.b1, f, &mut rng);
        fill(layout.w2, layout.b2, spec.hidden1, &mut rng);
        fill(layout.w3, layout.b3, spec.hidden2, &mut rng);
        MlpDenoiser { spec, params }
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Sinusoidal features of `t / T` at geometric frequencies from 1 to T.
    fn time_embedding(&self, t: usize) -> Vec<f64> {
        let pairs = self.spec.time_features / 2;
        let tau = t as f64 / self.spec.t_steps as f64;
        let mut out = Vec::with_capacity(self.spec.time_features);
        for j in 0..pairs {
            let freq = if pairs > 1 {
                (self.spec.t_steps as f64).powf(j as f64 / (pairs - 1) as f64)
            } else {
                1.0
            };
            let phase = 2.0 * std::f64::consts::PI * freq * tau;
            out.push(phase.sin());
            out.push(phase.cos());
        }
        // odd feature counts keep one extra raw ramp
        if out.len() < self.spec.time_features {
            out.push(tau);
        }
        out
    }

    fn build_input(&self, x: &State, t: usize, y: Condition) -> Result<Vec<f64>> {
        if x.len() != self.spec.dim() {
            return Err(PieError::ShapeMismatch {
                left: x.shape().to_string(),
                right: self.spec.shape.to_string(),
            });
        }
        if y.0 >= self.spec.n_classes {
            return Err(PieError::UnknownClass(format!("index {}", y.0)));
        }
        let mut input = Vec::with_capacity(self.spec.input_dim());
        input.extend_from_slice(x.values());
        input.extend(self.time_embedding(t));
        let mut one_hot = vec![0.0; self.spec.n_classes];
        one_hot[y.0] = 1.0;
        input.extend(one_hot);
        Ok(input)
    }

    /// Forward pass returning the activations needed by backprop.
    fn forward_full(&self, input: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let spec = &self.spec;
        let layout = Self::layout(spec);
        let p = &self.params;
        let f = spec.input_dim();
        let (h1, h2, d) = (spec.hidden1, spec.hidden2, spec.dim());

        let mut a1 = vec![0.0; h1];
        for i in 0..h1 {
            let row = &p[layout.w1 + i * f..layout.w1 + (i + 1) * f];
            let z: f64 = row.iter().zip(input).map(|(w, v)| w * v).sum::<f64>() + p[layout.b1 + i];
            a1[i] = z.tanh();
        }
        let mut a2 = vec![0.0; h2];
        for i in 0..h2 {
            let row = &p[layout.w2 + i * h1..layout.w2 + (i + 1) * h1];
            let z: f64 = row.iter().zip(&a1).map(|(w, v)| w * v).sum::<f64>() + p[layout.b2 + i];
            a2[i] = z.tanh();
        }
        let mut out = vec![0.0; d];
        for i in 0..d {
            let row = &p[layout.w3 + i * h2..layout.w3 + (i + 1) * h2];
            out[i] = row.iter().zip(&a2).map(|(w, v)| w * v).sum::<f64>() + p[layout.b3 + i];
        }
        (a1, a2, out)
    }

    /// Deterministic forward pass: predicted noise of the same shape as `x`.
    pub fn forward(&self, x: &State, t: usize, y: Condition) -> Result<State> {
        let input = self.build_input(x, t, y)?;
        let (_, _, out) = self.forward_full(&input);
        State::new(x.shape(), out)
    }
}

impl Denoiser for MlpDenoiser {
    fn epsilon(&self, x: &State, t: usize, y: Condition) -> Result<State> {
        self.forward(x, t, y)
    }

    fn state_shape(&self) -> Shape {
        self.spec.shape
    }
}

/// One training example: clean state, step index, the noise that was mixed
/// in, and the conditioning label.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub x0: State,
    pub t: usize,
    pub eps: State,
    pub y: Condition,
}

/// Mean squared noise-prediction error over the batch (normalized by the
/// state dimension) and its gradient in the flat parameter vector.
pub fn loss_and_grad(
    model: &MlpDenoiser,
    batch: &[TrainItem],
    s: &NoiseSchedule,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(PieError::invalid("empty batch"));
    }
    let spec = &model.spec;
    let layout = MlpDenoiser::layout(spec);
    let p = &model.params;
    let f = spec.input_dim();
    let (h1, h2, d) = (spec.hidden1, spec.hidden2, spec.dim());
    let mut grad = vec![0.0; p.len()];
    let mut loss = 0.0;
    let norm = 1.0 / (batch.len() as f64 * d as f64);

    for item in batch {
        let x_t = forward_noise(&item.x0, item.t, &item.eps, s)?;
        let input = model.build_input(&x_t, item.t, item.y)?;
        let (a1, a2, out) = model.forward_full(&input);

        // loss contribution: |eps - out|^2 / (B * D)
        let mut delta_out = vec![0.0; d];
        for i in 0..d {
            let err = out[i] - item.eps.values()[i];
            loss += err * err * norm;
            delta_out[i] = 2.0 * err * norm;
        }

        // output layer
        let mut delta_a2 = vec![0.0; h2];
        for i in 0..d {
            let g = delta_out[i];
            let row = layout.w3 + i * h2;
            for j in 0..h2 {
                grad[row + j] += g * a2[j];
                delta_a2[j] += g * p[row + j];
            }
            grad[layout.b3 + i] += g;
        }

        // second hidden layer
        let mut delta_a1 = vec![0.0; h1];
        for i in 0..h2 {
            let g = delta_a2[i] * (1.0 - a2[i] * a2[i]);
            let row = layout.w2 + i * h1;
            for j in 0..h1 {
                grad[row + j] += g * a1[j];
                delta_a1[j] += g * p[row + j];
            }
            grad[layout.b2 + i] += g;
        }

        // first hidden layer
        for i in 0..h1 {
            let g = delta_a1[i] * (1.0 - a1[i] * a1[i]);
            let row = layout.w1 + i * f;
            for (gw, v) in grad[row..row + f].iter_mut().zip(&input) {
                *gw += g * v;
            }
            grad[layout.b1 + i] += g;
        }
    }
    Ok((loss, grad))
}

/// Training settings: momentum SGD over uniformly resampled batches.
#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch: 16,
            learning_rate: 2e-3,
            momentum: 0.9,
            seed: 0,
        }
    }
}

/// Train on a labeled dataset of clean states. Each step draws a batch of
/// (example, step index, fresh noise) and descends the noise-prediction
/// loss. Deterministic per seed; errors if the loss leaves the reals.
pub fn train(
    model: &mut MlpDenoiser,
    dataset: &[(State, Condition)],
    s: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    if dataset.is_empty() {
        return Err(PieError::invalid("empty dataset"));
    }
    if cfg.learning_rate < 0.0 {
        return Err(PieError::invalid("learning rate must be >= 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut velocity = vec![0.0f64; model.params.len()];
    let mut curve = Vec::with_capacity(cfg.steps);
    let t_max = s.t_steps();
    for step in 0..cfg.steps {
        let batch: Vec<TrainItem> = (0..cfg.batch)
            .map(|_| {
                let idx = rng.random_range(0..dataset.len());
                let (x0, y) = &dataset[idx];
                let t = rng.random_range(1..=t_max);
                let eps = State::new(
                    x0.shape(),
                    (0..x0.len())
                        .map(|_| rng.sample::<f64, _>(StandardNormal))
                        .collect(),
                )
                .expect("normal draws are finite");
                TrainItem {
                    x0: x0.clone(),
                    t,
                    eps,
                    y: *y,
                }
            })
            .collect();
        let (loss, grad) = loss_and_grad(model, &batch, s)?;
        if !loss.is_finite() {
            return Err(PieError::TrainingDiverged { step });
        }
        curve.push(loss);
        for ((param, v), g) in model.params.iter_mut().zip(&mut velocity).zip(&grad) {
            *v = cfg.momentum * *v - cfg.learning_rate * g;
            *param += *v;
        }
    }
    Ok(curve)
}

fn shape_tag(shape: Shape) -> (u32, u32, u32) {
    match shape {
        Shape::Flat(d) => (0, d as u32, 1),
        Shape::Grid { rows, cols } => (1, rows as u32, cols as u32),
    }
}

impl MlpDenoiser {
    /// Serialize to the flat binary checkpoint format: magic `PIEMLP1`, then
    /// little-endian u32 dims (shape tag, rows, cols, time features, class
    /// count, hidden1, hidden2, schedule steps), then the f64 parameters in
    /// declaration order.
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut buf = Vec::with_capacity(7 + 8 * 4 + self.params.len() * 8);
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        let (tag, rows, cols) = shape_tag(self.spec.shape);
        for dim in [
            tag,
            rows,
            cols,
            self.spec.time_features as u32,
            self.spec.n_classes as u32,
            self.spec.hidden1 as u32,
            self.spec.hidden2 as u32,
            self.spec.t_steps as u32,
        ] {
            buf.extend_from_slice(&dim.to_le_bytes());
        }
        for p in &self.params {
            buf.extend_from_slice(&p.to_le_bytes());
        }
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        if bytes.len() < 7 || &bytes[..7] != CHECKPOINT_MAGIC {
            return Err(PieError::Parse {
                offset: 0,
                message: "bad checkpoint magic".to_string(),
            });
        }
        let mut pos = 7usize;
        let mut dims = [0u32; 8];
        for d in &mut dims {
            let end = pos + 4;
            if end > bytes.len() {
                return Err(PieError::Parse {
                    offset: pos,
                    message: "truncated checkpoint header".to_string(),
                });
            }
            *d = u32::from_le_bytes(bytes[pos..end].try_into().expect("4 bytes"));
            pos = end;
        }
        let shape = match dims[0] {
            0 => Shape::Flat(dims[1] as usize),
            1 => Shape::Grid {
                rows: dims[1] as usize,
                cols: dims[2] as usize,
            },
            other => {
                return Err(PieError::Parse {
                    offset: 7,
                    message: format!("unknown shape tag {other}"),
                })
            }
        };
        let spec = MlpSpec {
            shape,
            time_features: dims[3] as usize,
            n_classes: dims[4] as usize,
            hidden1: dims[5] as usize,
            hidden2: dims[6] as usize,
            t_steps: dims[7] as usize,
        };
        let expected = spec.n_params();
        let payload = &bytes[pos..];
        if payload.len() != expected * 8 {
            return Err(PieError::Parse {
                offset: pos,
                message: format!(
                    "checkpoint payload has {} bytes, expected {}",
                    payload.len(),
                    expected * 8
                ),
            });
        }
        let params = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(MlpDenoiser { spec, params })
    }
}
