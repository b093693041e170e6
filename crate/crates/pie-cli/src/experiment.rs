//! Experiment execution and artifact writing.
//!
//! Every artifact is a pure function of (config, seeds): no timestamps, no
//! machine state, rows sorted by key before writing.

use std::path::Path;

use pie_core::metrics::{
    self, bayes_confidence, extrapolation_step_masked, interpolation_walk, mmd_poly,
    train_classifier, ClassifierTrainConfig, LinearClassifier,
};
use pie_core::pie::{blend, diff_heatmap, run_progression, StepRecord, Trajectory};
use pie_core::synth::{make_dataset, write_image};
use pie_core::theory::{check_step_envelope, measure_constants, unit_step_iterate, BoundReport};
use pie_core::{Condition, Denoiser, LatentWorld, State};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{ExperimentConfig, Method, StartSpec, WorldSpec};
use crate::CliError;

/// Derive independent substreams from one seed.
fn substream(seed: u64, stream: u64) -> u64 {
    // splitmix64 over the combined words
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Confidence scorer for trajectories: exact posterior on latent worlds,
/// trained logistic probe on image worlds.
pub enum Scorer {
    Bayes { world: LatentWorld, target: Condition },
    Probe { model: LinearClassifier, positive_is_target: bool },
}

impl Scorer {
    pub fn score(&self, x: &State) -> Option<f64> {
        match self {
            Scorer::Bayes { world, target } => bayes_confidence(world, x, *target).ok(),
            Scorer::Probe {
                model,
                positive_is_target,
            } => {
                let p = model.confidence(x);
                Some(if *positive_is_target { p } else { 1.0 - p })
            }
        }
    }
}

/// Everything shared across the runs of one experiment.
pub struct Bench {
    pub config: ExperimentConfig,
    pub latent: Option<LatentWorld>,
    pub denoiser: Box<dyn Denoiser + Send + Sync>,
    pub condition: Condition,
    pub scorer: Scorer,
    pub reference: Vec<State>,
}

impl Bench {
    pub fn build(config: ExperimentConfig) -> Result<Self, CliError> {
        let latent = config.latent_world()?;
        let condition = config.condition_index(latent.as_ref())?;
        let denoiser = config.build_denoiser(latent.as_ref())?;

        let (scorer, reference) = match &config.world {
            WorldSpec::Blob {
                spec,
                n_per_severity,
                severities,
                data_seed,
            } => {
                let mut rng = ChaCha8Rng::seed_from_u64(substream(*data_seed, 101));
                let dataset = make_dataset(spec, *n_per_severity, severities, &mut rng)
                    .map_err(|e| CliError::Runtime(e.to_string()))?;
                let items: Vec<(State, Condition)> = dataset
                    .iter()
                    .map(|s| (s.state.clone(), s.class))
                    .collect();
                let report = train_classifier(
                    &items,
                    pie_core::synth::DISEASE,
                    &ClassifierTrainConfig {
                        seed: substream(*data_seed, 102),
                        ..ClassifierTrainConfig::default()
                    },
                )
                .map_err(|e| CliError::Runtime(e.to_string()))?;
                let reference: Vec<State> = dataset
                    .iter()
                    .filter(|s| s.class == condition)
                    .take(64)
                    .map(|s| s.state.clone())
                    .collect();
                (
                    Scorer::Probe {
                        model: report.model,
                        positive_is_target: condition == pie_core::synth::DISEASE,
                    },
                    reference,
                )
            }
            _ => {
                let world = latent.clone().expect("latent world");
                let mut rng = ChaCha8Rng::seed_from_u64(substream(0xD1CE, 103));
                let reference: Vec<State> = (0..64)
                    .map(|_| world.sample_latent(condition, &mut rng))
                    .collect::<Result<_, _>>()
                    .map_err(|e| CliError::Runtime(e.to_string()))?;
                (
                    Scorer::Bayes {
                        world: world.clone(),
                        target: condition,
                    },
                    reference,
                )
            }
        };

        Ok(Bench {
            config,
            latent,
            denoiser,
            condition,
            scorer,
            reference,
        })
    }

    /// Sample source/target direction pairs for the extrapolation baseline.
    fn direction_pairs(&self, rng: &mut ChaCha8Rng) -> Result<Vec<(State, State)>, CliError> {
        let n = self.config.extrapolation.pairs;
        match (&self.latent, &self.config.world) {
            (Some(world), _) => {
                let source = match &self.config.start {
                    StartSpec::ClassSample { class } => world
                        .class_index(class)
                        .map_err(|e| CliError::Runtime(e.to_string()))?,
                    _ => pie_core::synth::HEALTHY,
                };
                (0..n)
                    .map(|_| {
                        let a = world
                            .sample_latent(source, rng)
                            .map_err(|e| CliError::Runtime(e.to_string()))?;
                        let b = world
                            .sample_latent(self.condition, rng)
                            .map_err(|e| CliError::Runtime(e.to_string()))?;
                        Ok((a, b))
                    })
                    .collect()
            }
            (None, WorldSpec::Blob { spec, .. }) => (0..n)
                .map(|_| {
                    use rand::Rng as _;
                    let lo: f64 = rng.random_range(0.0..0.5);
                    let hi: f64 = rng.random_range(0.5..1.0);
                    let a = pie_core::synth::render_blob(spec, lo, rng)
                        .map_err(|e| CliError::Runtime(e.to_string()))?;
                    let b = pie_core::synth::render_blob(spec, hi, rng)
                        .map_err(|e| CliError::Runtime(e.to_string()))?;
                    Ok((a, b))
                })
                .collect(),
            _ => unreachable!("world is either latent or blob"),
        }
    }

    /// Execute one run with the given seed; `masked` selects the configured
    /// mask or the all-ones mask.
    pub fn run_one(&self, seed: u64, masked: bool) -> Result<Trajectory, CliError> {
        let c = &self.config;
        let mask = c.build_mask(masked)?;
        let mut start_rng = ChaCha8Rng::seed_from_u64(substream(seed, 1));
        let x0 = c.start_state(self.latent.as_ref(), &mut start_rng)?;
        let traj_seed = substream(seed, 2);
        let mut traj = match c.method {
            Method::Pie => run_progression(
                &x0,
                self.condition,
                &mask,
                &c.pie,
                self.denoiser.as_ref(),
                &c.schedule,
                traj_seed,
            )
            .map_err(|e| CliError::Runtime(e.to_string()))?,
            Method::Theory => unit_step_iterate(
                &x0,
                self.condition,
                self.denoiser.as_ref(),
                &c.schedule,
                c.pie.steps,
                c.pie.noise_mode,
                traj_seed,
            )
            .map_err(|e| CliError::Runtime(e.to_string()))?,
            Method::Extrapolation => {
                let mut rng = ChaCha8Rng::seed_from_u64(traj_seed);
                let weight = c
                    .extrapolation
                    .weight
                    .unwrap_or(1.0 / c.pie.steps.max(1) as f64);
                let mut states = vec![x0.clone()];
                let mut records = vec![StepRecord {
                    step_diff_norm: 0.0,
                    conf: None,
                    similarity: metrics::similarity(&x0, &x0).ok(),
                    eps_norm: None,
                }];
                for _ in 0..c.pie.steps {
                    let pairs = self.direction_pairs(&mut rng)?;
                    let weights = vec![weight; pairs.len()];
                    let prev = states.last().unwrap().clone();
                    let next = if c.blend_baselines {
                        extrapolation_step_masked(
                            &prev, &x0, &pairs, &weights, &mask, c.pie.beta1, c.pie.beta2,
                        )
                    } else {
                        metrics::extrapolation_step(&prev, &pairs, &weights)
                    }
                    .map_err(|e| CliError::Runtime(e.to_string()))?;
                    records.push(StepRecord {
                        step_diff_norm: next.distance(&prev).unwrap_or(f64::NAN),
                        conf: None,
                        similarity: metrics::similarity(&next, &x0).ok(),
                        eps_norm: None,
                    });
                    states.push(next);
                }
                Trajectory {
                    states,
                    records,
                    config: Some(c.pie),
                    seed: traj_seed,
                }
            }
            Method::Interpolation => {
                let walk = interpolation_walk(
                    &x0,
                    self.condition,
                    self.denoiser.as_ref(),
                    &c.schedule,
                    c.pie.steps.max(1),
                    traj_seed,
                )
                .map_err(|e| CliError::Runtime(e.to_string()))?;
                if c.blend_baselines {
                    let mut states = vec![x0.clone()];
                    let mut records = vec![walk.records[0].clone()];
                    for state in &walk.states[1..] {
                        let blended = blend(state, &x0, &mask, c.pie.beta1, c.pie.beta2)
                            .map_err(|e| CliError::Runtime(e.to_string()))?;
                        let prev = states.last().unwrap();
                        records.push(StepRecord {
                            step_diff_norm: blended.distance(prev).unwrap_or(f64::NAN),
                            conf: None,
                            similarity: metrics::similarity(&blended, &x0).ok(),
                            eps_norm: None,
                        });
                        states.push(blended);
                    }
                    Trajectory {
                        states,
                        records,
                        config: Some(c.pie),
                        seed: traj_seed,
                    }
                } else {
                    walk
                }
            }
        };
        traj.score_confidence(|x| self.scorer.score(x));
        Ok(traj)
    }
}

#[derive(Serialize)]
struct PerSeedSummary {
    seed: u64,
    final_conf: Option<f64>,
    final_similarity: Option<f64>,
    total_drift: f64,
}

#[derive(Serialize)]
struct RunReport {
    method: &'static str,
    condition: String,
    seeds: Vec<u64>,
    per_seed: Vec<PerSeedSummary>,
    mean_final_conf: Option<f64>,
    mean_final_similarity: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mmd_final_vs_reference: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    envelope_violations: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    drift_within_bound: Option<bool>,
}

#[derive(Serialize)]
struct TheoryRunEntry {
    seed: u64,
    #[serde(flatten)]
    report: BoundReport,
}

#[derive(Serialize)]
struct TheoryReportFile {
    runs: Vec<TheoryRunEntry>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn mean_of(values: &[Option<f64>]) -> Option<f64> {
    let xs: Vec<f64> = values.iter().flatten().copied().collect();
    if xs.is_empty() {
        None
    } else {
        Some(xs.iter().sum::<f64>() / xs.len() as f64)
    }
}

fn write_trajectories_csv(path: &Path, rows: &[(u64, Trajectory)]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::Runtime(e.to_string()))?;
    w.write_record(["run_id", "step", "conf", "similarity", "step_diff_norm"])
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    for (seed, traj) in rows {
        for (step, record) in traj.records.iter().enumerate() {
            w.write_record([
                seed.to_string(),
                step.to_string(),
                fmt_opt(record.conf),
                fmt_opt(record.similarity),
                record.step_diff_norm.to_string(),
            ])
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        }
    }
    w.flush().map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text =
        serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(())
}

fn clamp_unit(state: &State) -> State {
    state.map(|v| v.clamp(0.0, 1.0))
}

/// Run the configured experiment and write its artifact tree.
pub fn run_experiment(config: ExperimentConfig) -> Result<std::path::PathBuf, CliError> {
    let out = config.output_dir.clone();
    std::fs::create_dir_all(&out).map_err(|e| CliError::Runtime(e.to_string()))?;
    let image_regime = config.is_image_regime();
    let method = config.method;
    let condition = config.condition.clone();
    let bench = Bench::build(config)?;

    let mut runs: Vec<(u64, Trajectory)> = bench
        .config
        .seeds
        .par_iter()
        .map(|&seed| bench.run_one(seed, true).map(|t| (seed, t)))
        .collect::<Result<_, _>>()?;
    runs.sort_by_key(|(seed, _)| *seed);

    write_trajectories_csv(&out.join("trajectories.csv"), &runs)?;

    // theory runs additionally get the bound report
    let (envelope_violations, drift_within_bound) = if method == Method::Theory {
        let mut entries = Vec::new();
        let mut violations = 0usize;
        let mut drift_ok = true;
        for (seed, traj) in &runs {
            let (c1, c2) =
                measure_constants(traj).map_err(|e| CliError::Runtime(e.to_string()))?;
            let report = check_step_envelope(traj, c1, c2, &bench.config.schedule);
            violations += report.violations.len();
            drift_ok &= report.drift_within_bound;
            entries.push(TheoryRunEntry {
                seed: *seed,
                report,
            });
        }
        write_json(&out.join("bound_report.json"), &TheoryReportFile { runs: entries })?;
        (Some(violations), Some(drift_ok))
    } else {
        (None, None)
    };

    if image_regime {
        for (seed, traj) in &runs {
            let dir = out.join(format!("run_{seed:04}"));
            std::fs::create_dir_all(&dir).map_err(|e| CliError::Runtime(e.to_string()))?;
            for (step, state) in traj.states.iter().enumerate() {
                write_image(&dir.join(format!("step_{step:02}.pgm")), &clamp_unit(state))
                    .map_err(|e| CliError::Runtime(e.to_string()))?;
                let heat = diff_heatmap(traj, step)
                    .map_err(|e| CliError::Runtime(e.to_string()))?;
                write_image(&dir.join(format!("diff_{step:02}.pgm")), &clamp_unit(&heat))
                    .map_err(|e| CliError::Runtime(e.to_string()))?;
            }
        }
    }

    let per_seed: Vec<PerSeedSummary> = runs
        .iter()
        .map(|(seed, t)| PerSeedSummary {
            seed: *seed,
            final_conf: t.final_conf(),
            final_similarity: t.final_similarity(),
            total_drift: t
                .final_state()
                .distance(t.initial())
                .unwrap_or(f64::NAN),
        })
        .collect();
    let finals: Vec<State> = runs.iter().map(|(_, t)| t.final_state().clone()).collect();
    let mmd = if finals.len() >= 2 && bench.reference.len() >= 2 {
        mmd_poly(&finals, &bench.reference).ok()
    } else {
        None
    };
    let report = RunReport {
        method: method.name(),
        condition,
        seeds: bench.config.seeds.clone(),
        mean_final_conf: mean_of(&per_seed.iter().map(|p| p.final_conf).collect::<Vec<_>>()),
        mean_final_similarity: mean_of(
            &per_seed
                .iter()
                .map(|p| p.final_similarity)
                .collect::<Vec<_>>(),
        ),
        per_seed,
        mmd_final_vs_reference: mmd,
        envelope_violations,
        drift_within_bound,
    };
    write_json(&out.join("report.json"), &report)?;
    Ok(out)
}

/// One grid axis of a sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GridPoint {
    Gamma(f64),
    Steps(usize),
    Beta1(f64),
    Beta2(f64),
    Mask(bool),
}

impl GridPoint {
    fn value_string(&self) -> String {
        match self {
            GridPoint::Gamma(v) | GridPoint::Beta1(v) | GridPoint::Beta2(v) => v.to_string(),
            GridPoint::Steps(v) => v.to_string(),
            GridPoint::Mask(v) => v.to_string(),
        }
    }

    fn apply(&self, config: &mut ExperimentConfig) -> bool {
        match self {
            GridPoint::Gamma(v) => config.pie.gamma = *v,
            GridPoint::Steps(v) => config.pie.steps = *v,
            GridPoint::Beta1(v) => config.pie.beta1 = *v,
            GridPoint::Beta2(v) => config.pie.beta2 = *v,
            GridPoint::Mask(masked) => return *masked,
        }
        true
    }
}

pub fn grid_points(config: &ExperimentConfig, grid: &str) -> Result<Vec<GridPoint>, CliError> {
    let points: Vec<GridPoint> = match grid {
        "gamma" => config.sweeps.gamma.iter().map(|&v| GridPoint::Gamma(v)).collect(),
        "steps" => config.sweeps.steps.iter().map(|&v| GridPoint::Steps(v)).collect(),
        "beta1" => config.sweeps.beta1.iter().map(|&v| GridPoint::Beta1(v)).collect(),
        "beta2" => config.sweeps.beta2.iter().map(|&v| GridPoint::Beta2(v)).collect(),
        "mask" => config.sweeps.mask.iter().map(|&v| GridPoint::Mask(v)).collect(),
        other => {
            return Err(CliError::Config(format!(
                "/sweeps: unknown grid '{other}' (expected gamma, steps, beta1, beta2, or mask)"
            )))
        }
    };
    if points.is_empty() {
        return Err(CliError::Config(format!("/sweeps/{grid}: grid is empty")));
    }
    Ok(points)
}

/// Run a sweep over one named grid and write `sweep_<grid>.csv`.
pub fn sweep(config: ExperimentConfig, grid: &str) -> Result<std::path::PathBuf, CliError> {
    let points = grid_points(&config, grid)?;
    let out = config.output_dir.clone();
    std::fs::create_dir_all(&out).map_err(|e| CliError::Runtime(e.to_string()))?;

    struct Row {
        value: String,
        order: usize,
        seed: u64,
        final_conf: Option<f64>,
        final_similarity: Option<f64>,
        mmd: Option<f64>,
    }

    let mut rows: Vec<Row> = Vec::new();
    for (order, point) in points.iter().enumerate() {
        let mut point_config = config.clone();
        let masked = point.apply(&mut point_config);
        let bench = Bench::build(point_config)?;
        let mut runs: Vec<(u64, Trajectory)> = bench
            .config
            .seeds
            .par_iter()
            .map(|&seed| bench.run_one(seed, masked).map(|t| (seed, t)))
            .collect::<Result<_, _>>()?;
        runs.sort_by_key(|(seed, _)| *seed);
        let finals: Vec<State> = runs.iter().map(|(_, t)| t.final_state().clone()).collect();
        let mmd = if finals.len() >= 2 && bench.reference.len() >= 2 {
            mmd_poly(&finals, &bench.reference).ok()
        } else {
            None
        };
        for (seed, traj) in &runs {
            rows.push(Row {
                value: point.value_string(),
                order,
                seed: *seed,
                final_conf: traj.final_conf(),
                final_similarity: traj.final_similarity(),
                mmd,
            });
        }
    }
    rows.sort_by(|a, b| (a.order, a.seed).cmp(&(b.order, b.seed)));

    let path = out.join(format!("sweep_{grid}.csv"));
    let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::Runtime(e.to_string()))?;
    w.write_record(["grid", "value", "seed", "final_conf", "final_similarity", "mmd"])
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    for row in &rows {
        w.write_record([
            grid.to_string(),
            row.value.clone(),
            row.seed.to_string(),
            fmt_opt(row.final_conf),
            fmt_opt(row.final_similarity),
            fmt_opt(row.mmd),
        ])
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    // aggregated mean/std rows per grid value, in grid order
    for (order, point) in points.iter().enumerate() {
        let group: Vec<&Row> = rows.iter().filter(|r| r.order == order).collect();
        let confs: Vec<f64> = group.iter().filter_map(|r| r.final_conf).collect();
        let sims: Vec<f64> = group.iter().filter_map(|r| r.final_similarity).collect();
        let stats = |xs: &[f64]| -> (Option<f64>, Option<f64>) {
            if xs.is_empty() {
                return (None, None);
            }
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / xs.len() as f64;
            (Some(mean), Some(var.sqrt()))
        };
        let (conf_mean, conf_std) = stats(&confs);
        let (sim_mean, sim_std) = stats(&sims);
        let mmd = group.first().and_then(|r| r.mmd);
        for (tag, conf, sim) in [("mean", conf_mean, sim_mean), ("std", conf_std, sim_std)] {
            w.write_record([
                grid.to_string(),
                point.value_string(),
                tag.to_string(),
                fmt_opt(conf),
                fmt_opt(sim),
                if tag == "mean" { fmt_opt(mmd) } else { String::new() },
            ])
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        }
    }
    w.flush().map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(path)
}
