//! Artifact-tree summarization (`report`) and trend/bound verification
//! (`check`).

use std::collections::BTreeMap;
use std::path::Path;

use pie_core::metrics::spearman;
use serde::Serialize;

use crate::CliError;

#[derive(Debug, Clone, Serialize)]
pub struct SweepTrend {
    pub grid: String,
    /// Spearman correlation of per-seed final confidence against the grid
    /// value (numeric grids only).
    pub spearman_conf: Option<f64>,
    pub spearman_similarity: Option<f64>,
    /// Mean final confidence per grid value, in file order.
    pub mean_conf_by_value: Vec<(String, f64)>,
    pub mean_similarity_by_value: Vec<(String, f64)>,
}

#[derive(Debug, Serialize)]
pub struct Summary {
    pub files: Vec<String>,
    pub trajectory_rows: Option<usize>,
    pub mean_final_conf: Option<f64>,
    pub mean_final_similarity: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub envelope_violations: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub drift_within_bound: Option<bool>,
    pub trends: Vec<SweepTrend>,
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn list_files(dir: &Path) -> Result<Vec<String>, CliError> {
    let mut files = Vec::new();
    fn walk(base: &Path, dir: &Path, out: &mut Vec<String>) -> std::io::Result<()> {
        for entry in std::fs::read_dir(dir)? {
            let entry = entry?;
            let path = entry.path();
            if path.is_dir() {
                walk(base, &path, out)?;
            } else if path
                .file_name()
                .map(|n| n != "summary.json")
                .unwrap_or(true)
            {
                out.push(
                    path.strip_prefix(base)
                        .expect("under base")
                        .to_string_lossy()
                        .into_owned(),
                );
            }
        }
        Ok(())
    }
    walk(dir, dir, &mut files).map_err(runtime)?;
    files.sort();
    Ok(files)
}

struct SweepData {
    grid: String,
    /// (value-string, per-seed final confs, per-seed final similarities)
    groups: Vec<(String, Vec<f64>, Vec<f64>)>,
}

fn read_sweep_csv(path: &Path) -> Result<SweepData, CliError> {
    let mut reader = csv::Reader::from_path(path).map_err(runtime)?;
    let mut grid = String::new();
    let mut groups: Vec<(String, Vec<f64>, Vec<f64>)> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(runtime)?;
        let seed = &record[2];
        if seed == "mean" || seed == "std" {
            continue;
        }
        grid = record[0].to_string();
        let value = record[1].to_string();
        let conf: Option<f64> = record[3].parse().ok();
        let sim: Option<f64> = record[4].parse().ok();
        let group = match groups.iter_mut().find(|(v, _, _)| *v == value) {
            Some(g) => g,
            None => {
                groups.push((value.clone(), Vec::new(), Vec::new()));
                groups.last_mut().expect("just pushed")
            }
        };
        if let Some(c) = conf {
            group.1.push(c);
        }
        if let Some(s) = sim {
            group.2.push(s);
        }
    }
    Ok(SweepData { grid, groups })
}

fn sweep_trend(data: &SweepData) -> SweepTrend {
    // rank correlation of the grid value against the per-value mean score,
    // one point per grid row (numeric grids only)
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    let mut xs = Vec::new();
    let mut confs = Vec::new();
    let mut sims = Vec::new();
    let numeric = data
        .groups
        .iter()
        .all(|(v, _, _)| v.parse::<f64>().is_ok());
    if numeric {
        for (value, conf, sim) in &data.groups {
            if conf.is_empty() || sim.is_empty() {
                continue;
            }
            xs.push(value.parse::<f64>().expect("checked"));
            confs.push(mean(conf));
            sims.push(mean(sim));
        }
    }
    SweepTrend {
        grid: data.grid.clone(),
        spearman_conf: if numeric { spearman(&xs, &confs).ok() } else { None },
        spearman_similarity: if numeric { spearman(&xs, &sims).ok() } else { None },
        mean_conf_by_value: data
            .groups
            .iter()
            .map(|(v, c, _)| (v.clone(), mean(c)))
            .collect(),
        mean_similarity_by_value: data
            .groups
            .iter()
            .map(|(v, _, s)| (v.clone(), mean(s)))
            .collect(),
    }
}

fn csv_row_count(path: &Path) -> Result<usize, CliError> {
    let mut reader = csv::Reader::from_path(path).map_err(runtime)?;
    Ok(reader.records().filter_map(|r| r.ok()).count())
}

fn trajectory_means(path: &Path) -> Result<(Option<f64>, Option<f64>), CliError> {
    // means over the final step of each run
    let mut reader = csv::Reader::from_path(path).map_err(runtime)?;
    let mut last: BTreeMap<String, (usize, Option<f64>, Option<f64>)> = BTreeMap::new();
    for record in reader.records() {
        let record = record.map_err(runtime)?;
        let run = record[0].to_string();
        let step: usize = record[1].parse().map_err(runtime)?;
        let conf: Option<f64> = record[2].parse().ok();
        let sim: Option<f64> = record[3].parse().ok();
        let entry = last.entry(run).or_insert((0, None, None));
        if step >= entry.0 {
            *entry = (step, conf, sim);
        }
    }
    let confs: Vec<f64> = last.values().filter_map(|(_, c, _)| *c).collect();
    let sims: Vec<f64> = last.values().filter_map(|(_, _, s)| *s).collect();
    let mean = |v: &[f64]| {
        if v.is_empty() {
            None
        } else {
            Some(v.iter().sum::<f64>() / v.len() as f64)
        }
    };
    Ok((mean(&confs), mean(&sims)))
}

fn bound_report_stats(path: &Path) -> Result<(usize, bool), CliError> {
    let text = std::fs::read_to_string(path).map_err(runtime)?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(runtime)?;
    let runs = value
        .get("runs")
        .and_then(|r| r.as_array())
        .ok_or_else(|| CliError::Runtime("bound_report.json has no runs array".into()))?;
    let mut violations = 0usize;
    let mut drift_ok = true;
    for run in runs {
        violations += run
            .get("violations")
            .and_then(|v| v.as_array())
            .map(|v| v.len())
            .unwrap_or(0);
        drift_ok &= run
            .get("drift_within_bound")
            .and_then(|v| v.as_bool())
            .unwrap_or(false);
    }
    Ok((violations, drift_ok))
}

/// Build the deterministic summary of an artifact directory.
pub fn summarize(dir: &Path) -> Result<Summary, CliError> {
    if !dir.is_dir() {
        return Err(CliError::Runtime(format!(
            "missing artifact directory {}",
            dir.display()
        )));
    }
    let files = list_files(dir)?;
    if files.is_empty() {
        return Err(CliError::Runtime(format!(
            "no artifacts in {}",
            dir.display()
        )));
    }

    let traj_path = dir.join("trajectories.csv");
    let (trajectory_rows, mean_final_conf, mean_final_similarity) = if traj_path.exists() {
        let rows = csv_row_count(&traj_path)?;
        let (conf, sim) = trajectory_means(&traj_path)?;
        (Some(rows), conf, sim)
    } else {
        (None, None, None)
    };

    let bound_path = dir.join("bound_report.json");
    let (envelope_violations, drift_within_bound) = if bound_path.exists() {
        let (v, ok) = bound_report_stats(&bound_path)?;
        (Some(v), Some(ok))
    } else {
        (None, None)
    };

    let mut trends = Vec::new();
    for file in &files {
        if file.starts_with("sweep_") && file.ends_with(".csv") {
            let data = read_sweep_csv(&dir.join(file))?;
            trends.push(sweep_trend(&data));
        }
    }

    Ok(Summary {
        files,
        trajectory_rows,
        mean_final_conf,
        mean_final_similarity,
        envelope_violations,
        drift_within_bound,
        trends,
    })
}

/// Write `summary.json` into the directory and return the rendered text.
pub fn report(dir: &Path) -> Result<String, CliError> {
    let summary = summarize(dir)?;
    let mut text = serde_json::to_string_pretty(&summary).map_err(runtime)?;
    text.push('\n');
    std::fs::write(dir.join("summary.json"), &text).map_err(runtime)?;
    Ok(text)
}

/// One named check outcome.
pub struct CheckLine {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

/// Evaluate the trend and bound assertions the artifacts support.
pub fn check(dir: &Path) -> Result<Vec<CheckLine>, CliError> {
    let summary = summarize(dir)?;
    let mut lines = Vec::new();

    if let Some(violations) = summary.envelope_violations {
        lines.push(CheckLine {
            name: "envelope_violations_zero".into(),
            pass: violations == 0,
            detail: format!("{violations} violations"),
        });
    }
    if let Some(ok) = summary.drift_within_bound {
        lines.push(CheckLine {
            name: "total_drift_within_bound".into(),
            pass: ok,
            detail: format!("within bound: {ok}"),
        });
    }
    for trend in &summary.trends {
        match trend.grid.as_str() {
            "gamma" => {
                if let Some(rho) = trend.spearman_conf {
                    lines.push(CheckLine {
                        name: "gamma_conf_rank_correlation".into(),
                        pass: rho >= 0.9,
                        detail: format!("spearman {rho:.3} (need >= 0.9)"),
                    });
                }
                if let Some(rho) = trend.spearman_similarity {
                    lines.push(CheckLine {
                        name: "gamma_similarity_rank_correlation".into(),
                        pass: rho <= -0.5,
                        detail: format!("spearman {rho:.3} (need <= -0.5)"),
                    });
                }
            }
            "steps" => {
                let lookup = |v: &str| -> Option<f64> {
                    trend
                        .mean_conf_by_value
                        .iter()
                        .find(|(value, _)| value == v)
                        .map(|(_, c)| *c)
                };
                if let (Some(c1), Some(c10)) = (lookup("1"), lookup("10")) {
                    lines.push(CheckLine {
                        name: "steps_conf_gain_1_to_10".into(),
                        pass: c10 - c1 >= 0.2,
                        detail: format!("conf(10) - conf(1) = {:.3} (need >= 0.2)", c10 - c1),
                    });
                }
                if let (Some(c10), Some(c20)) = (lookup("10"), lookup("20")) {
                    lines.push(CheckLine {
                        name: "steps_conf_plateau_10_to_20".into(),
                        pass: (c20 - c10).abs() <= 0.05,
                        detail: format!("|conf(20) - conf(10)| = {:.3} (need <= 0.05)", (c20 - c10).abs()),
                    });
                }
            }
            "beta2" => {
                if let Some(rho) = trend.spearman_conf {
                    lines.push(CheckLine {
                        name: "beta2_conf_rank_correlation".into(),
                        pass: rho >= 0.0,
                        detail: format!("spearman {rho:.3} (need >= 0)"),
                    });
                }
            }
            "mask" => {
                let lookup = |v: &str| -> Option<f64> {
                    trend
                        .mean_similarity_by_value
                        .iter()
                        .find(|(value, _)| value == v)
                        .map(|(_, s)| *s)
                };
                if let (Some(with), Some(without)) = (lookup("true"), lookup("false")) {
                    lines.push(CheckLine {
                        name: "mask_preserves_similarity".into(),
                        pass: with > without,
                        detail: format!("similarity with {with:.3} vs without {without:.3}"),
                    });
                }
            }
            _ => {}
        }
    }

    if lines.is_empty() {
        return Err(CliError::Runtime(
            "no checkable artifacts (need bound_report.json or sweep_*.csv)".into(),
        ));
    }
    Ok(lines)
}
