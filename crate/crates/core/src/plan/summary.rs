//! Rounds-to-target-accuracy summaries across seeds.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::io::read_metrics_csv;
use crate::engine::RoundRecord;
use crate::error::{invalid, Result};
use crate::selection::Strategy;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum TargetSpec {
    Fixed { accuracy: f64 },
    /// Median test accuracy of `strategy` after `round` rounds.
    Calibrated { strategy: Strategy, round: usize },
    None,
}

/// Number of rounds until test accuracy first reaches `target`.
pub fn rounds_to_target(records: &[RoundRecord], target: f64) -> Option<usize> {
    records.iter().position(|r| r.test_accuracy >= target).map(|i| i + 1)
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategySummary {
    pub strategy: Strategy,
    pub seeds: Vec<u64>,
    /// `None` where the target was never reached.
    pub rounds: Vec<Option<usize>>,
    pub reached: Vec<bool>,
    /// Mean and sample std over the seeds that reached the target.
    pub mean: Option<f64>,
    pub std: Option<f64>,
    /// Median with unreached seeds counted as never; `None` if that median
    /// falls on an unreached seed.
    pub median: Option<f64>,
    pub final_accuracy_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub target_spec: TargetSpec,
    pub target_accuracy: Option<f64>,
    pub strategies: Vec<StrategySummary>,
}

impl Summary {
    pub fn strategy(&self, s: Strategy) -> Option<&StrategySummary> {
        self.strategies.iter().find(|x| x.strategy == s)
    }
}

/// `cells` holds `(strategy, seed, records)` per run.
pub fn summarize_records(cells: &[(Strategy, u64, Vec<RoundRecord>)], spec: TargetSpec) -> Result<Summary> {
    let target = match spec {
        TargetSpec::Fixed { accuracy } => Some(accuracy),
        TargetSpec::None => None,
        TargetSpec::Calibrated { strategy, round } => {
            let mut accs = Vec::new();
            for (s, seed, recs) in cells.iter().filter(|c| c.0 == strategy) {
                let r = recs.get(round.wrapping_sub(1)).ok_or_else(|| {
                    invalid(format!("{s} seed {seed} has {} rounds, calibration needs {round}", recs.len()))
                })?;
                accs.push(r.test_accuracy);
            }
            if accs.is_empty() {
                return Err(invalid(format!("no {strategy} runs to calibrate the target on")));
            }
            accs.sort_by(f64::total_cmp);
            Some(median(&accs))
        }
    };

    let mut order: Vec<Strategy> = Vec::new();
    for (s, _, _) in cells {
        if !order.contains(s) {
            order.push(*s);
        }
    }
    let strategies = order
        .into_iter()
        .map(|strategy| {
            let mine: Vec<&(Strategy, u64, Vec<RoundRecord>)> = cells.iter().filter(|c| c.0 == strategy).collect();
            let rounds: Vec<Option<usize>> =
                mine.iter().map(|(_, _, r)| target.and_then(|t| rounds_to_target(r, t))).collect();
            let hit: Vec<f64> = rounds.iter().flatten().map(|&r| r as f64).collect();
            let mean = (!hit.is_empty()).then(|| hit.iter().sum::<f64>() / hit.len() as f64);
            let std = mean.map(|m| {
                if hit.len() < 2 {
                    0.0
                } else {
                    (hit.iter().map(|h| (h - m).powi(2)).sum::<f64>() / (hit.len() - 1) as f64).sqrt()
                }
            });
            let mut all: Vec<f64> = rounds.iter().map(|r| r.map_or(f64::INFINITY, |v| v as f64)).collect();
            all.sort_by(f64::total_cmp);
            let med = (target.is_some() && !all.is_empty()).then(|| median(&all)).filter(|m| m.is_finite());
            let finals: Vec<f64> = mine.iter().filter_map(|(_, _, r)| r.last().map(|x| x.test_accuracy)).collect();
            StrategySummary {
                strategy,
                seeds: mine.iter().map(|c| c.1).collect(),
                reached: rounds.iter().map(Option::is_some).collect(),
                rounds,
                mean,
                std,
                median: med,
                final_accuracy_mean: finals.iter().sum::<f64>() / finals.len().max(1) as f64,
            }
        })
        .collect();
    Ok(Summary { target_spec: spec, target_accuracy: target, strategies })
}

fn seed_from_dir(dir: &Path) -> Option<u64> {
    dir.file_name()?.to_str()?.strip_prefix("seed-")?.parse().ok()
}

/// Run directories below `dir`: itself if it holds `metrics.csv`, otherwise
/// `dir/<strategy>/seed-*`.
pub fn find_cells(dir: &Path) -> Result<Vec<PathBuf>> {
    if dir.join("metrics.csv").is_file() {
        return Ok(vec![dir.to_path_buf()]);
    }
    let mut cells = Vec::new();
    let mut strategies: Vec<PathBuf> =
        std::fs::read_dir(dir)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect();
    strategies.sort();
    for s in strategies {
        let mut seeds: Vec<PathBuf> = std::fs::read_dir(&s)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("metrics.csv").is_file())
            .collect();
        seeds.sort_by_key(|p| (seed_from_dir(p), p.clone()));
        cells.extend(seeds);
    }
    Ok(cells)
}

/// Summarizes every run found under `dirs`.
pub fn summarize_dirs(dirs: &[PathBuf], spec: TargetSpec) -> Result<Summary> {
    let mut cells = Vec::new();
    for dir in dirs {
        for (i, cell) in find_cells(dir)?.into_iter().enumerate() {
            let records = read_metrics_csv(cell.join("metrics.csv"))?;
            let Some(first) = records.first() else { continue };
            let seed = seed_from_dir(&cell).unwrap_or(i as u64);
            cells.push((first.strategy, seed, records));
        }
    }
    if cells.is_empty() {
        return Err(invalid("no metrics.csv files found"));
    }
    summarize_records(&cells, spec)
}
