//! Experiment configuration: JSON schema, validation with pointer-style
//! error locations, and construction of the configured objects.

use std::path::{Path, PathBuf};

use pie_core::mlp::MlpDenoiser;
use pie_core::synth::{BlobImageSpec, ClassSpec};
use pie_core::{
    Condition, Denoiser, GaussianWorldOracle, LatentWorld, MarginalOracle, NoiseSchedule,
    PieConfig, RoiMask, Shape, State,
};
use serde::Deserialize;

use crate::CliError;

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum WorldSpec {
    /// Two-class isotropic latent world.
    Latent {
        dim: usize,
        #[serde(default = "default_var")]
        var: f64,
        #[serde(default = "default_separation")]
        separation: f64,
        #[serde(default = "default_healthy_prior")]
        healthy_prior: f64,
    },
    /// Fully specified latent world.
    LatentCustom {
        dim: usize,
        var: f64,
        classes: Vec<ClassSpec>,
    },
    /// Rendered blob-image world with a labeled dataset.
    Blob {
        #[serde(default)]
        spec: BlobImageSpec,
        #[serde(default = "default_n_per_severity")]
        n_per_severity: usize,
        #[serde(default = "default_severities")]
        severities: Vec<f64>,
        /// Seed for dataset rendering and classifier training.
        #[serde(default)]
        data_seed: u64,
    },
}

fn default_var() -> f64 {
    1.0
}
fn default_separation() -> f64 {
    4.0
}
fn default_healthy_prior() -> f64 {
    0.5
}
fn default_n_per_severity() -> usize {
    40
}
fn default_severities() -> Vec<f64> {
    vec![0.0, 0.1, 0.2, 0.3, 0.4, 0.6, 0.7, 0.8, 0.9, 1.0]
}

#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum ScheduleSpec {
    Explicit {
        alphabar: Vec<f64>,
    },
    Ramp {
        #[serde(default = "default_ramp")]
        ramp: String,
        t_steps: usize,
        #[serde(default = "default_ab_start")]
        ab_start: f64,
        #[serde(default = "default_ab_end")]
        ab_end: f64,
    },
}

fn default_ramp() -> String {
    "geometric".to_string()
}
fn default_ab_start() -> f64 {
    0.9999
}
fn default_ab_end() -> f64 {
    0.0047
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DenoiserSpec {
    /// Conditional analytic oracle for the latent world.
    Oracle,
    /// Marginal-mixture analytic oracle (ignores the condition).
    MarginalOracle,
    /// Trained checkpoint.
    Mlp { checkpoint: PathBuf },
}

impl Default for DenoiserSpec {
    fn default() -> Self {
        DenoiserSpec::Oracle
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MaskSpec {
    /// Every cell fully editable.
    Full,
    /// Soft-edged disk over grid states.
    Disk {
        center: (f64, f64),
        radius: f64,
        #[serde(default)]
        soft_edge: f64,
    },
}

impl Default for MaskSpec {
    fn default() -> Self {
        MaskSpec::Full
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum StartSpec {
    /// Draw the start from a world class.
    ClassSample { class: String },
    /// Render a blob image at a fixed severity.
    Blob { severity: f64 },
}

impl Default for StartSpec {
    fn default() -> Self {
        StartSpec::ClassSample {
            class: "healthy".to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Pie,
    Theory,
    Extrapolation,
    Interpolation,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Pie => "pie",
            Method::Theory => "theory",
            Method::Extrapolation => "extrapolation",
            Method::Interpolation => "interpolation",
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtrapolationSpec {
    /// Direction pairs sampled per step.
    #[serde(default = "default_pairs")]
    pub pairs: usize,
    /// Per-pair stage-fraction weight; defaults to 1/steps.
    #[serde(default)]
    pub weight: Option<f64>,
}

fn default_pairs() -> usize {
    16
}

impl Default for ExtrapolationSpec {
    fn default() -> Self {
        ExtrapolationSpec {
            pairs: default_pairs(),
            weight: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct SweepGrids {
    #[serde(default)]
    pub gamma: Vec<f64>,
    #[serde(default)]
    pub steps: Vec<usize>,
    #[serde(default)]
    pub beta1: Vec<f64>,
    #[serde(default)]
    pub beta2: Vec<f64>,
    #[serde(default)]
    pub mask: Vec<bool>,
}

/// Parsed and validated experiment configuration.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub world: WorldSpec,
    pub schedule: NoiseSchedule,
    pub denoiser: DenoiserSpec,
    pub method: Method,
    pub condition: String,
    pub pie: PieConfig,
    pub mask: MaskSpec,
    pub start: StartSpec,
    pub extrapolation: ExtrapolationSpec,
    /// Blend baseline trajectories with the same mask-anchored rule.
    pub blend_baselines: bool,
    pub seeds: Vec<u64>,
    pub sweeps: SweepGrids,
    pub output_dir: PathBuf,
}

fn config_err(pointer: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{pointer}: {msg}"))
}

fn section<'a>(
    value: &'a serde_json::Value,
    key: &str,
    required: bool,
) -> Result<Option<&'a serde_json::Value>, CliError> {
    match value.get(key) {
        Some(v) => Ok(Some(v)),
        None if required => Err(config_err(&format!("/{key}"), "missing required key")),
        None => Ok(None),
    }
}

fn parse_section<T: serde::de::DeserializeOwned>(
    value: &serde_json::Value,
    key: &str,
) -> Result<T, CliError> {
    serde_json::from_value(value.clone()).map_err(|e| config_err(&format!("/{key}"), e))
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("/: {e}")))?;
        Self::from_value(&value)
    }

    pub fn from_value(value: &serde_json::Value) -> Result<Self, CliError> {
        if !value.is_object() {
            return Err(CliError::Config("/: config must be a JSON object".into()));
        }
        let world: WorldSpec =
            parse_section(section(value, "world", true)?.expect("required"), "world")?;
        let schedule_spec: ScheduleSpec = parse_section(
            section(value, "schedule", true)?.expect("required"),
            "schedule",
        )?;
        let method: Method =
            parse_section(section(value, "method", true)?.expect("required"), "method")?;
        let condition: String = parse_section(
            section(value, "condition", true)?.expect("required"),
            "condition",
        )?;
        let seeds: Vec<u64> =
            parse_section(section(value, "seeds", true)?.expect("required"), "seeds")?;
        let output_dir: PathBuf = parse_section(
            section(value, "output_dir", true)?.expect("required"),
            "output_dir",
        )?;

        let denoiser = match section(value, "denoiser", false)? {
            Some(v) => parse_section(v, "denoiser")?,
            None => DenoiserSpec::default(),
        };
        let pie: PieConfig = match section(value, "pie", false)? {
            Some(v) => parse_section(v, "pie")?,
            None => PieConfig::default(),
        };
        pie.validate()
            .map_err(|e| config_err("/pie", e))?;
        let mask = match section(value, "mask", false)? {
            Some(v) => parse_section(v, "mask")?,
            None => MaskSpec::default(),
        };
        let start = match section(value, "start", false)? {
            Some(v) => parse_section(v, "start")?,
            None => StartSpec::default(),
        };
        let extrapolation = match section(value, "extrapolation", false)? {
            Some(v) => parse_section(v, "extrapolation")?,
            None => ExtrapolationSpec::default(),
        };
        let blend_baselines = match section(value, "blend_baselines", false)? {
            Some(v) => parse_section(v, "blend_baselines")?,
            None => true,
        };
        let sweeps = match section(value, "sweeps", false)? {
            Some(v) => parse_section(v, "sweeps")?,
            None => SweepGrids::default(),
        };

        if seeds.is_empty() {
            return Err(config_err("/seeds", "at least one seed required"));
        }
        let schedule = match schedule_spec {
            ScheduleSpec::Explicit { alphabar } => NoiseSchedule::from_alphabars(alphabar),
            ScheduleSpec::Ramp {
                ramp,
                t_steps,
                ab_start,
                ab_end,
            } => match ramp.as_str() {
                "geometric" => NoiseSchedule::linear(t_steps, ab_start, ab_end),
                "cosine" => NoiseSchedule::cosine(t_steps, ab_start, ab_end),
                other => {
                    return Err(config_err(
                        "/schedule/ramp",
                        format!("unknown ramp '{other}', expected geometric or cosine"),
                    ))
                }
            },
        }
        .map_err(|e| config_err("/schedule", e))?;

        Ok(ExperimentConfig {
            world,
            schedule,
            denoiser,
            method,
            condition,
            pie,
            mask,
            start,
            extrapolation,
            blend_baselines,
            seeds,
            sweeps,
            output_dir,
        })
    }

    /// Apply the `PIE_SEED` environment override (comma-separated list).
    pub fn apply_seed_override(&mut self, raw: Option<String>) -> Result<(), CliError> {
        if let Some(raw) = raw {
            let seeds: Result<Vec<u64>, _> =
                raw.split(',').map(|s| s.trim().parse::<u64>()).collect();
            self.seeds = seeds
                .map_err(|e| CliError::Config(format!("PIE_SEED: {e}")))?;
            if self.seeds.is_empty() {
                return Err(CliError::Config("PIE_SEED: empty seed list".into()));
            }
        }
        Ok(())
    }

    pub fn latent_world(&self) -> Result<Option<LatentWorld>, CliError> {
        match &self.world {
            WorldSpec::Latent {
                dim,
                var,
                separation,
                healthy_prior,
            } => Ok(Some(LatentWorld::two_class_with_priors(
                *dim,
                *separation,
                *var,
                *healthy_prior,
            ))),
            WorldSpec::LatentCustom { dim, var, classes } => {
                LatentWorld::new(*dim, *var, classes.clone())
                    .map(Some)
                    .map_err(|e| config_err("/world", e))
            }
            WorldSpec::Blob { .. } => Ok(None),
        }
    }

    pub fn state_shape(&self) -> Shape {
        match &self.world {
            WorldSpec::Latent { dim, .. } | WorldSpec::LatentCustom { dim, .. } => {
                Shape::Flat(*dim)
            }
            WorldSpec::Blob { spec, .. } => Shape::Grid {
                rows: spec.grid,
                cols: spec.grid,
            },
        }
    }

    pub fn is_image_regime(&self) -> bool {
        matches!(self.world, WorldSpec::Blob { .. })
    }

    /// Build the configured denoiser. Latent worlds pass their world here.
    pub fn build_denoiser(
        &self,
        latent: Option<&LatentWorld>,
    ) -> Result<Box<dyn Denoiser + Send + Sync>, CliError> {
        match &self.denoiser {
            DenoiserSpec::Oracle => {
                let world = latent
                    .ok_or_else(|| config_err("/denoiser", "oracle needs a latent world"))?;
                Ok(Box::new(
                    GaussianWorldOracle::new(world.clone(), self.schedule.clone())
                        .map_err(|e| config_err("/denoiser", e))?,
                ))
            }
            DenoiserSpec::MarginalOracle => {
                let world = latent
                    .ok_or_else(|| config_err("/denoiser", "oracle needs a latent world"))?;
                Ok(Box::new(MarginalOracle(
                    GaussianWorldOracle::new(world.clone(), self.schedule.clone())
                        .map_err(|e| config_err("/denoiser", e))?,
                )))
            }
            DenoiserSpec::Mlp { checkpoint } => {
                let model = MlpDenoiser::load(checkpoint)
                    .map_err(|e| config_err("/denoiser/checkpoint", e))?;
                if model.spec().shape != self.state_shape() {
                    return Err(config_err(
                        "/denoiser/checkpoint",
                        format!(
                            "checkpoint shape {:?} does not match world shape {:?}",
                            model.spec().shape,
                            self.state_shape()
                        ),
                    ));
                }
                Ok(Box::new(model))
            }
        }
    }

    pub fn build_mask(&self, masked: bool) -> Result<RoiMask, CliError> {
        if !masked {
            return Ok(RoiMask::full(self.state_shape()));
        }
        match &self.mask {
            MaskSpec::Full => Ok(RoiMask::full(self.state_shape())),
            MaskSpec::Disk {
                center,
                radius,
                soft_edge,
            } => match self.state_shape() {
                Shape::Grid { rows, .. } => {
                    pie_core::synth::disk_mask(rows, *center, *radius, *soft_edge)
                        .map_err(|e| config_err("/mask", e))
                }
                Shape::Flat(_) => Err(config_err("/mask", "disk mask needs a grid world")),
            },
        }
    }

    /// Resolve the conditioning label. Blob worlds use the fixed
    /// healthy/disease convention.
    pub fn condition_index(&self, latent: Option<&LatentWorld>) -> Result<Condition, CliError> {
        match latent {
            Some(w) => w
                .class_index(&self.condition)
                .map_err(|e| config_err("/condition", e)),
            None => match self.condition.as_str() {
                "healthy" => Ok(pie_core::synth::HEALTHY),
                "disease" => Ok(pie_core::synth::DISEASE),
                other => Err(config_err(
                    "/condition",
                    format!("unknown class '{other}' for the blob world"),
                )),
            },
        }
    }

    /// Start state for one run.
    pub fn start_state(
        &self,
        latent: Option<&LatentWorld>,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Result<State, CliError> {
        match (&self.start, latent, &self.world) {
            (StartSpec::ClassSample { class }, Some(w), _) => {
                let y = w
                    .class_index(class)
                    .map_err(|e| config_err("/start/class", e))?;
                w.sample_latent(y, rng)
                    .map_err(|e| CliError::Runtime(e.to_string()))
            }
            (StartSpec::Blob { severity }, _, WorldSpec::Blob { spec, .. }) => {
                pie_core::synth::render_blob(spec, *severity, rng)
                    .map_err(|e| CliError::Runtime(e.to_string()))
            }
            (StartSpec::Blob { .. }, _, _) => {
                Err(config_err("/start", "blob start needs a blob world"))
            }
            (StartSpec::ClassSample { .. }, None, _) => Err(config_err(
                "/start",
                "class_sample start needs a latent world",
            )),
        }
    }
}
