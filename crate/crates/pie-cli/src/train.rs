//! Checkpoint training for the image regime.

use std::path::Path;

use pie_core::mlp::{train, MlpDenoiser, MlpSpec, TrainConfig};
use pie_core::synth::make_dataset;
use pie_core::{Condition, State};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ExperimentConfig, WorldSpec};
use crate::CliError;

/// Render the configured blob dataset, train a denoiser on it, and save the
/// checkpoint plus a `loss_curve.csv` next to it.
pub fn train_checkpoint(
    config: &ExperimentConfig,
    out: &Path,
    steps: usize,
    batch: usize,
    learning_rate: f64,
    seed: u64,
) -> Result<(), CliError> {
    let WorldSpec::Blob {
        spec,
        n_per_severity,
        severities,
        data_seed,
    } = &config.world
    else {
        return Err(CliError::Config(
            "/world: train needs a blob world".into(),
        ));
    };
    let mut rng = ChaCha8Rng::seed_from_u64(*data_seed);
    let dataset = make_dataset(spec, *n_per_severity, severities, &mut rng)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    let items: Vec<(State, Condition)> = dataset
        .into_iter()
        .map(|s| (s.state, s.class))
        .collect();

    let mlp_spec = MlpSpec::new(config.state_shape(), 2, config.schedule.t_steps());
    let mut model = MlpDenoiser::random_init(mlp_spec, seed);
    let curve = train(
        &mut model,
        &items,
        &config.schedule,
        &TrainConfig {
            steps,
            batch,
            learning_rate,
            momentum: 0.9,
            seed,
        },
    )
    .map_err(|e| CliError::Runtime(e.to_string()))?;

    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| CliError::Runtime(e.to_string()))?;
        }
    }
    model
        .save(out)
        .map_err(|e| CliError::Runtime(e.to_string()))?;

    let curve_path = out.with_extension("loss.csv");
    let mut w = csv::Writer::from_path(&curve_path).map_err(|e| CliError::Runtime(e.to_string()))?;
    w.write_record(["step", "loss"])
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    for (i, loss) in curve.iter().enumerate() {
        w.write_record([i.to_string(), loss.to_string()])
            .map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    w.flush().map_err(|e| CliError::Runtime(e.to_string()))?;
    println!(
        "checkpoint written to {} (final smoothed loss {:.5})",
        out.display(),
        curve.iter().rev().take(50).sum::<f64>() / curve.len().min(50) as f64
    );
    Ok(())
}
