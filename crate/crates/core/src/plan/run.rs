//! Drives a plan: one output directory per (strategy, seed) cell.
//!
//! Cell layout (`<out>/<strategy>/seed-<s>/`):
//!
//! | file | contents |
//! |---|---|
//! | `metrics.csv` | one row per round |
//! | `selection_trace.jsonl` | picks per round, FedGP criteria per iteration |
//! | `loss_samples.jsonl` | GP training samples |
//! | `partition.json`, `clients.csv` | client assignments, sizes, dominant labels |
//! | `embeddings_warmup.csv`, `embeddings_final.csv` | raw and unit-length embeddings |
//! | `projection.csv`, `clustering.json` | 2-D PCA of the embeddings, label clustering |
//! | `normality_samples.jsonl`, `normality.json` | probes at the last warm-up round |
//! | `stationarity_samples.jsonl`, `stationarity.json` | periodic covariance probes |
//! | `config.json`, `final_model.bin`, `checkpoints/` | parameters and their config |
//! | `run_info.json` | seeds per stream and wall-clock timings |
//! | `FAILED` | error message, present only if the cell failed |

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::Serialize;

use super::io::{read_embeddings_csv, read_jsonl, write_embeddings_csv, write_jsonl, write_metrics_csv};
use super::summary::{find_cells, summarize_records, Summary};
use super::{DataSource, ExperimentPlan, Scheme};
use crate::datagen::{gen_synthetic_split, load_idx, partition_dirichlet, partition_shards, LabeledDataset, Partition};
use crate::diagnostics::{
    clustering_statistic, export_projected_embeddings, normality_test, samples_matrix, stationarity_series,
    ClusteringStatistic, DiagnosticProbes, NormalityReport, StationarityPoint,
};
use crate::engine::{run_experiment, LossSample, RoundContext, RoundObserver, RoundRecord};
use crate::error::{Error, Result};
use crate::gp::EmbeddingMatrix;
use crate::model::{ModelSpec, ParamVector};
use crate::rng::{derive_seed, Stream};
use crate::selection::Strategy;

pub struct CellData {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    pub partition: Partition,
    pub spec: ModelSpec,
}

/// Dataset, partition and model shape for one seed. Strategies that share a
/// seed see the same data.
pub fn build_cell_data(plan: &ExperimentPlan, seed: u64) -> Result<CellData> {
    let d = &plan.dataset;
    let (train, test) = match d.source {
        DataSource::Synthetic => gen_synthetic_split(
            d.num_classes,
            d.dim,
            d.per_class,
            d.test_per_class,
            d.class_separation,
            derive_seed(seed, Stream::Data, 0, 0),
        )?,
        DataSource::Idx => {
            let need = |p: &Option<PathBuf>| p.clone().ok_or_else(|| Error::Validation("missing idx path".into()));
            (
                load_idx(need(&d.train_images)?, need(&d.train_labels)?)?,
                load_idx(need(&d.test_images)?, need(&d.test_labels)?)?,
            )
        }
    };
    let n = plan.federated.num_clients;
    let pseed = derive_seed(seed, Stream::Partition, 0, 0);
    let partition = match plan.partition.scheme {
        Scheme::OneShard => partition_shards(&train, n, 1, pseed)?,
        Scheme::TwoShards => partition_shards(&train, n, 2, pseed)?,
        Scheme::Dirichlet => partition_dirichlet(&train, n, plan.partition.alpha, pseed)?,
    };
    let classes = train.num_classes().max(test.num_classes());
    let spec = match plan.model.architecture {
        crate::model::Architecture::Logreg => ModelSpec::logreg(train.dim(), classes),
        crate::model::Architecture::Mlp => ModelSpec::mlp(train.dim(), plan.model.hidden_dims.clone(), classes),
    };
    Ok(CellData { train, test, partition, spec })
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn write_clients_csv(path: &Path, partition: &Partition, data: &LabeledDataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["client_id", "size", "dominant_label"])?;
    for (k, (size, label)) in partition.sizes().iter().zip(partition.dominant_labels(data)).enumerate() {
        w.write_record([k.to_string(), size.to_string(), label.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn read_dominant_labels(path: &Path) -> Result<Vec<usize>> {
    let mut r = csv::Reader::from_path(path)?;
    r.records()
        .map(|row| {
            let row = row?;
            row.get(2).and_then(|v| v.parse().ok()).ok_or_else(|| {
                Error::Parse {
                    path: path.to_path_buf(),
                    kind: crate::error::ParseErrorKind::Malformed("bad dominant_label".into()),
                }
            })
        })
        .collect()
}

/// Writes every seed's partition under `<out>/partitions/`.
pub fn write_partitions(plan: &ExperimentPlan, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let dir = out_dir.join("partitions");
    fs::create_dir_all(&dir)?;
    let mut written = Vec::new();
    for &seed in &plan.experiment.seeds {
        let data = build_cell_data(plan, seed)?;
        let path = dir.join(format!("seed-{seed}.json"));
        fs::write(&path, data.partition.to_json()?)?;
        write_clients_csv(&dir.join(format!("seed-{seed}.clients.csv")), &data.partition, &data.train)?;
        written.push(path);
    }
    Ok(written)
}

struct CellObserver {
    probes: DiagnosticProbes,
    checkpoint_every: usize,
    checkpoint_dir: PathBuf,
}

impl RoundObserver for CellObserver {
    fn before_selection(&mut self, ctx: &mut RoundContext<'_>, x: Option<&EmbeddingMatrix>) -> Result<()> {
        self.probes.before_selection(ctx, x)
    }

    fn after_round(&mut self, record: &RoundRecord, params: &ParamVector) -> Result<()> {
        if self.checkpoint_every > 0 && (record.round + 1) % self.checkpoint_every == 0 {
            fs::create_dir_all(&self.checkpoint_dir)?;
            params.save(self.checkpoint_dir.join(format!("round-{:05}.bin", record.round)))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CellOutcome {
    pub strategy: Strategy,
    pub seed: u64,
    pub dir: PathBuf,
    #[serde(skip)]
    pub records: Vec<RoundRecord>,
    pub normality: Option<NormalityReport>,
    pub stationarity: Vec<StationarityPoint>,
    pub clustering: Option<ClusteringStatistic>,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct PlanOutcome {
    pub out_dir: PathBuf,
    pub cells: Vec<CellOutcome>,
    pub summary: Option<Summary>,
}

impl PlanOutcome {
    pub fn failed(&self) -> Vec<&CellOutcome> {
        self.cells.iter().filter(|c| c.error.is_some()).collect()
    }

    pub fn cell(&self, strategy: Strategy, seed: u64) -> Option<&CellOutcome> {
        self.cells.iter().find(|c| c.strategy == strategy && c.seed == seed)
    }
}

#[derive(Serialize)]
struct RunInfo {
    strategy: Strategy,
    seed: u64,
    stream_seeds: BTreeMap<&'static str, u64>,
    started_unix_s: u64,
    wall_ms: f64,
    round_elapsed_ms: Vec<f64>,
}

#[derive(Serialize)]
struct StationarityFile<'a> {
    samples_per_probe: usize,
    fraction_at_least_0_9: Option<f64>,
    points: &'a [StationarityPoint],
}

fn write_stationarity(dir: &Path, points: &[StationarityPoint], samples_per_probe: usize) -> Result<()> {
    let frac = (!points.is_empty())
        .then(|| points.iter().filter(|p| p.similarity >= 0.9).count() as f64 / points.len() as f64);
    write_json(
        &dir.join("stationarity.json"),
        &StationarityFile { samples_per_probe, fraction_at_least_0_9: frac, points },
    )
}

fn group_by_round(samples: Vec<LossSample>) -> Vec<(usize, Vec<LossSample>)> {
    let mut grouped: BTreeMap<usize, Vec<LossSample>> = BTreeMap::new();
    for s in samples {
        grouped.entry(s.round).or_default().push(s);
    }
    grouped.into_iter().collect()
}

fn embedding_reports(
    dir: &Path,
    x: &EmbeddingMatrix,
    labels: &[usize],
) -> Result<Option<ClusteringStatistic>> {
    export_projected_embeddings(x, labels, dir.join("projection.csv"))?;
    match clustering_statistic(x, labels) {
        Ok(stat) => {
            write_json(&dir.join("clustering.json"), &stat)?;
            Ok(Some(stat))
        }
        Err(e) => {
            log::warn!("clustering statistic skipped: {e}");
            Ok(None)
        }
    }
}

fn run_cell(plan: &ExperimentPlan, strategy: Strategy, seed: u64, dir: &Path) -> Result<CellOutcome> {
    let started = Instant::now();
    let started_unix_s = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let data = build_cell_data(plan, seed)?;
    fs::write(dir.join("partition.json"), data.partition.to_json()?)?;
    write_clients_csv(&dir.join("clients.csv"), &data.partition, &data.train)?;
    let cfg = plan.fl_config(strategy, seed);
    write_json(&dir.join("config.json"), &cfg)?;

    let settings = plan.probe_settings();
    let mut observer = CellObserver {
        probes: DiagnosticProbes::new(settings, seed),
        checkpoint_every: plan.experiment.checkpoint_interval,
        checkpoint_dir: dir.join("checkpoints"),
    };
    let out = run_experiment(&cfg, &data.spec, &data.train, &data.partition, &data.test, &mut observer)?;

    write_metrics_csv(dir.join("metrics.csv"), &out.records, plan.experiment.record_elapsed)?;
    write_jsonl(dir.join("selection_trace.jsonl"), &out.traces)?;
    write_jsonl(dir.join("loss_samples.jsonl"), &out.loss_samples)?;
    out.final_params.save(dir.join("final_model.bin"))?;

    let labels = data.partition.dominant_labels(&data.train);
    if let Some(x) = &out.embeddings_warmup {
        write_embeddings_csv(dir.join("embeddings_warmup.csv"), x)?;
    }
    if let Some(x) = &out.embeddings_final {
        write_embeddings_csv(dir.join("embeddings_final.csv"), x)?;
    }
    let clustering = match out.embeddings_warmup.as_ref().or(out.embeddings_final.as_ref()) {
        Some(x) => embedding_reports(dir, x, &labels)?,
        None => None,
    };

    let probes = observer.probes;
    let normality = match &probes.normality {
        Some(samples) => {
            write_jsonl(dir.join("normality_samples.jsonl"), samples)?;
            let report = normality_test(&samples_matrix(samples)?)?;
            write_json(&dir.join("normality.json"), &report)?;
            Some(report)
        }
        None => None,
    };
    let stationarity = if probes.stationarity.is_empty() {
        Vec::new()
    } else {
        let flat: Vec<&LossSample> = probes.stationarity.iter().flat_map(|(_, s)| s).collect();
        write_jsonl(dir.join("stationarity_samples.jsonl"), &flat)?;
        let points = stationarity_series(&probes.stationarity)?;
        write_stationarity(dir, &points, settings.stationarity_samples)?;
        points
    };

    let stream_seeds = Stream::ALL.iter().map(|s| (s.name(), derive_seed(seed, *s, 0, 0))).collect();
    write_json(
        &dir.join("run_info.json"),
        &RunInfo {
            strategy,
            seed,
            stream_seeds,
            started_unix_s,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
            round_elapsed_ms: out.records.iter().map(|r| r.elapsed_ms.unwrap_or(0.0)).collect(),
        },
    )?;
    Ok(CellOutcome {
        strategy,
        seed,
        dir: dir.to_path_buf(),
        records: out.records,
        normality,
        stationarity,
        clustering,
        error: None,
    })
}

fn run_cell_logged(plan: &ExperimentPlan, strategy: Strategy, seed: u64, out_dir: &Path) -> CellOutcome {
    let dir = out_dir.join(strategy.name()).join(format!("seed-{seed}"));
    let failed = |dir: &Path, e: &Error| {
        let msg = e.to_string();
        log::error!("{strategy} seed {seed} failed: {msg}");
        let _ = fs::write(dir.join("FAILED"), format!("{msg}\n"));
        CellOutcome {
            strategy,
            seed,
            dir: dir.to_path_buf(),
            records: Vec::new(),
            normality: None,
            stationarity: Vec::new(),
            clustering: None,
            error: Some(msg),
        }
    };
    if let Err(e) = fs::create_dir_all(&dir) {
        return failed(&dir, &e.into());
    }
    let _ = fs::remove_file(dir.join("FAILED"));
    log::info!("running {strategy} seed {seed}");
    run_cell(plan, strategy, seed, &dir).unwrap_or_else(|e| failed(&dir, &e))
}

/// Runs every (strategy, seed) cell and writes `plan.resolved.toml` and
/// `summary.json` into `out_dir`. Failed cells are reported in the outcome,
/// not as an error.
pub fn run_plan(plan: &ExperimentPlan, out_dir: &Path) -> Result<PlanOutcome> {
    plan.validate()?;
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("plan.resolved.toml"), plan.to_toml()?)?;
    let jobs: Vec<(Strategy, u64)> = plan
        .experiment
        .strategies
        .iter()
        .flat_map(|&s| plan.experiment.seeds.iter().map(move |&seed| (s, seed)))
        .collect();
    #[cfg(feature = "parallel")]
    let cells: Vec<CellOutcome> = {
        use rayon::prelude::*;
        jobs.par_iter().map(|&(s, seed)| run_cell_logged(plan, s, seed, out_dir)).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let cells: Vec<CellOutcome> = jobs.iter().map(|&(s, seed)| run_cell_logged(plan, s, seed, out_dir)).collect();

    let done: Vec<(Strategy, u64, Vec<RoundRecord>)> =
        cells.iter().filter(|c| c.error.is_none()).map(|c| (c.strategy, c.seed, c.records.clone())).collect();
    let summary = if done.is_empty() {
        None
    } else {
        match summarize_records(&done, plan.target()) {
            Ok(s) => {
                write_json(&out_dir.join("summary.json"), &s)?;
                Some(s)
            }
            Err(e) => {
                log::error!("summary failed: {e}");
                None
            }
        }
    };
    Ok(PlanOutcome { out_dir: out_dir.to_path_buf(), cells, summary })
}

#[derive(Debug, Clone, Serialize)]
pub struct DiagnoseOutcome {
    pub dir: PathBuf,
    pub normality: Option<NormalityReport>,
    pub stationarity: Vec<StationarityPoint>,
    pub clustering: Option<ClusteringStatistic>,
}

/// Recomputes the diagnostic reports of every run below `dir` from the
/// stored samples and embeddings.
pub fn diagnose_dir(dir: &Path) -> Result<Vec<DiagnoseOutcome>> {
    let cells = find_cells(dir)?;
    if cells.is_empty() {
        return Err(Error::InvalidArgument(format!("no runs found under {}", dir.display())));
    }
    cells
        .into_iter()
        .map(|cell| {
            let normality = match cell.join("normality_samples.jsonl") {
                p if p.is_file() => {
                    let samples: Vec<LossSample> = read_jsonl(&p)?;
                    let report = normality_test(&samples_matrix(&samples)?)?;
                    write_json(&cell.join("normality.json"), &report)?;
                    Some(report)
                }
                _ => None,
            };
            let stationarity = match cell.join("stationarity_samples.jsonl") {
                p if p.is_file() => {
                    let grouped = group_by_round(read_jsonl(&p)?);
                    let per_probe = grouped.iter().map(|(_, s)| s.len()).min().unwrap_or(0);
                    let points = stationarity_series(&grouped)?;
                    write_stationarity(&cell, &points, per_probe)?;
                    points
                }
                _ => Vec::new(),
            };
            let emb = ["embeddings_warmup.csv", "embeddings_final.csv"].iter().map(|f| cell.join(f)).find(|p| p.is_file());
            let clustering = match emb {
                Some(p) => {
                    let x = read_embeddings_csv(&p)?;
                    let labels = read_dominant_labels(&cell.join("clients.csv"))?;
                    embedding_reports(&cell, &x, &labels)?
                }
                None => None,
            };
            Ok(DiagnoseOutcome { dir: cell, normality, stationarity, clustering })
        })
        .collect()
}
