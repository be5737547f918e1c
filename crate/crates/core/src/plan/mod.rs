//! Experiment plans: a sectioned TOML file, command-line overrides, and the
//! runner that turns a plan into per-(strategy, seed) output directories.
//!
//! Every key name is unique across sections, so an override may name a key
//! bare (`beta=0.5`) or qualified (`fedgp.beta=0.5`).

mod io;
mod run;
mod summary;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diagnostics::ProbeSettings;
use crate::engine::FlConfig;
use crate::error::{invalid, Error, Result};
use crate::model::Architecture;
use crate::selection::{AflParams, Strategy};

pub use io::{read_embeddings_csv, read_jsonl, read_metrics_csv, write_embeddings_csv, write_jsonl, write_metrics_csv};
pub use run::{build_cell_data, diagnose_dir, run_plan, write_partitions, CellData, CellOutcome, DiagnoseOutcome, PlanOutcome};
pub use summary::{find_cells, rounds_to_target, summarize_dirs, summarize_records, StrategySummary, Summary, TargetSpec};

/// Environment variable naming the root that relative output directories
/// are resolved against.
pub const OUTPUT_ROOT_ENV: &str = "FEDGP_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub name: String,
    pub strategies: Vec<Strategy>,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Fixed accuracy target for the summary.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_accuracy: Option<f64>,
    /// Otherwise the target is the median accuracy of `calibrate_strategy`
    /// after this many rounds.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub calibrate_round: Option<usize>,
    pub calibrate_strategy: Strategy,
    pub record_elapsed: bool,
    /// Rounds between model checkpoints; 0 disables them.
    pub checkpoint_interval: usize,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            strategies: vec![Strategy::Rand],
            seeds: vec![0],
            output_dir: PathBuf::from("runs"),
            target_accuracy: None,
            calibrate_round: None,
            calibrate_strategy: Strategy::Rand,
            record_elapsed: false,
            checkpoint_interval: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic,
    Idx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub source: DataSource,
    pub num_classes: usize,
    pub dim: usize,
    pub per_class: usize,
    pub test_per_class: usize,
    pub class_separation: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_images: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_labels: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_images: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_labels: Option<PathBuf>,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            num_classes: 10,
            dim: 20,
            per_class: 100,
            test_per_class: 20,
            class_separation: 3.0,
            train_images: None,
            train_labels: None,
            test_images: None,
            test_labels: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scheme {
    #[serde(rename = "1spc")]
    OneShard,
    #[serde(rename = "2spc")]
    TwoShards,
    #[serde(rename = "dir")]
    Dirichlet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionSection {
    pub scheme: Scheme,
    pub alpha: f64,
}

impl Default for PartitionSection {
    fn default() -> Self {
        Self { scheme: Scheme::TwoShards, alpha: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub architecture: Architecture,
    pub hidden_dims: Vec<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { architecture: Architecture::Mlp, hidden_dims: vec![16] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederatedSection {
    pub num_clients: usize,
    pub clients_per_round: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_halving_rounds: Vec<usize>,
    pub weight_decay: f64,
    pub total_rounds: usize,
}

impl Default for FederatedSection {
    fn default() -> Self {
        let c = FlConfig::default();
        Self {
            num_clients: c.num_clients,
            clients_per_round: c.clients_per_round,
            local_epochs: c.local_epochs,
            batch_size: c.batch_size,
            lr: c.lr,
            lr_halving_rounds: c.lr_halving_rounds,
            weight_decay: c.weight_decay,
            total_rounds: c.total_rounds,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FedgpSection {
    pub warmup_rounds: usize,
    pub gp_interval: usize,
    pub probes_per_gp_round: usize,
    pub history_depth: usize,
    pub warmup_history_depth: usize,
    pub discount_base: f64,
    pub beta: f64,
    pub embed_dim: usize,
    pub embed_init_std: f64,
    pub jitter: f64,
    pub gp_steps: usize,
    pub gp_lr: f64,
}

impl Default for FedgpSection {
    fn default() -> Self {
        let c = FlConfig::default();
        Self {
            warmup_rounds: c.warmup_rounds,
            gp_interval: c.gp_interval,
            probes_per_gp_round: c.probes_per_gp_round,
            history_depth: c.history_depth,
            warmup_history_depth: c.warmup_history_depth,
            discount_base: c.discount_base,
            beta: c.anneal,
            embed_dim: c.embed_dim,
            embed_init_std: c.embed_init_std,
            jitter: c.jitter,
            gp_steps: c.gp_steps,
            gp_lr: c.gp_lr,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselinesSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub powd_d: Option<usize>,
    pub afl_alpha1: f64,
    pub afl_alpha2: f64,
    pub afl_alpha3: f64,
}

impl Default for BaselinesSection {
    fn default() -> Self {
        let a = AflParams::default();
        Self { powd_d: None, afl_alpha1: a.alpha1, afl_alpha2: a.alpha2, afl_alpha3: a.alpha3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticsSection {
    /// Probe normality at the last warm-up round.
    pub normality: bool,
    pub normality_samples: usize,
    /// Rounds between covariance probes; 0 disables them.
    pub stationarity_interval: usize,
    pub stationarity_samples: usize,
}

impl Default for DiagnosticsSection {
    fn default() -> Self {
        Self { normality: false, normality_samples: 500, stationarity_interval: 0, stationarity_samples: 200 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentPlan {
    pub experiment: ExperimentSection,
    pub dataset: DatasetSection,
    pub partition: PartitionSection,
    pub model: ModelSection,
    pub federated: FederatedSection,
    pub fedgp: FedgpSection,
    pub baselines: BaselinesSection,
    pub diagnostics: DiagnosticsSection,
}

/// `(section, key)` pairs accepted in plan files and overrides.
pub const PLAN_KEYS: &[(&str, &str)] = &[
    ("experiment", "name"),
    ("experiment", "strategies"),
    ("experiment", "strategy"),
    ("experiment", "seeds"),
    ("experiment", "seed"),
    ("experiment", "output_dir"),
    ("experiment", "target_accuracy"),
    ("experiment", "calibrate_round"),
    ("experiment", "calibrate_strategy"),
    ("experiment", "record_elapsed"),
    ("experiment", "checkpoint_interval"),
    ("dataset", "source"),
    ("dataset", "num_classes"),
    ("dataset", "dim"),
    ("dataset", "per_class"),
    ("dataset", "test_per_class"),
    ("dataset", "class_separation"),
    ("dataset", "train_images"),
    ("dataset", "train_labels"),
    ("dataset", "test_images"),
    ("dataset", "test_labels"),
    ("partition", "scheme"),
    ("partition", "alpha"),
    ("model", "architecture"),
    ("model", "hidden_dims"),
    ("federated", "num_clients"),
    ("federated", "clients_per_round"),
    ("federated", "local_epochs"),
    ("federated", "batch_size"),
    ("federated", "lr"),
    ("federated", "lr_halving_rounds"),
    ("federated", "weight_decay"),
    ("federated", "total_rounds"),
    ("fedgp", "warmup_rounds"),
    ("fedgp", "gp_interval"),
    ("fedgp", "probes_per_gp_round"),
    ("fedgp", "history_depth"),
    ("fedgp", "warmup_history_depth"),
    ("fedgp", "discount_base"),
    ("fedgp", "beta"),
    ("fedgp", "embed_dim"),
    ("fedgp", "embed_init_std"),
    ("fedgp", "jitter"),
    ("fedgp", "gp_steps"),
    ("fedgp", "gp_lr"),
    ("baselines", "powd_d"),
    ("baselines", "afl_alpha1"),
    ("baselines", "afl_alpha2"),
    ("baselines", "afl_alpha3"),
    ("diagnostics", "normality"),
    ("diagnostics", "normality_samples"),
    ("diagnostics", "stationarity_interval"),
    ("diagnostics", "stationarity_samples"),
];

fn section_of(key: &str) -> Option<&'static str> {
    PLAN_KEYS.iter().find(|(_, k)| *k == key).map(|(s, _)| *s)
}

/// Parses an override value as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let raw = raw.trim();
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key v present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn split_override(item: &str) -> Result<(&str, &str)> {
    let item = item.trim_start_matches('-');
    item.split_once('=').ok_or_else(|| invalid(format!("override {item:?} is not key=value")))
}

/// Builds a plan from TOML text and `key=value` overrides.
pub fn parse_plan_str(text: &str, overrides: &[String]) -> Result<ExperimentPlan> {
    let raw: toml::Table = text.parse()?;
    let mut sections = toml::Table::new();
    let mut unknown = Vec::new();
    // `strategy` and `seed` are one-element shorthands for the list keys
    let put = |section: &str, key: &str, value: toml::Value, sections: &mut toml::Table| {
        let (key, value) = match key {
            "strategy" => ("strategies", toml::Value::Array(vec![value])),
            "seed" => ("seeds", toml::Value::Array(vec![value])),
            k => (k, value),
        };
        let entry = sections.entry(section.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        entry.as_table_mut().expect("section tables").insert(key.to_string(), value);
    };
    for (name, value) in raw {
        match value {
            toml::Value::Table(table) if PLAN_KEYS.iter().any(|(s, _)| *s == name) => {
                for (key, v) in table {
                    if PLAN_KEYS.contains(&(name.as_str(), key.as_str())) {
                        put(&name, &key, v, &mut sections);
                    } else {
                        unknown.push(format!("{name}.{key}"));
                    }
                }
            }
            v => match section_of(&name) {
                Some(section) => put(section, &name, v, &mut sections),
                None => unknown.push(name),
            },
        }
    }
    for item in overrides {
        let (key, value) = split_override(item)?;
        let (section, key) = match key.split_once('.') {
            Some((s, k)) if PLAN_KEYS.contains(&(s, k)) => (s, k),
            Some(_) => {
                unknown.push(key.to_string());
                continue;
            }
            None => match section_of(key) {
                Some(s) => (s, key),
                None => {
                    unknown.push(key.to_string());
                    continue;
                }
            },
        };
        put(section, key, parse_value(value), &mut sections);
    }
    if !unknown.is_empty() {
        return Err(Error::UnknownKeys(unknown));
    }
    let plan: ExperimentPlan =
        toml::Value::Table(sections).try_into().map_err(|e: toml::de::Error| Error::Validation(e.to_string()))?;
    plan.validate()?;
    Ok(plan)
}

pub fn parse_plan(path: impl AsRef<Path>, overrides: &[String]) -> Result<ExperimentPlan> {
    let text = std::fs::read_to_string(path.as_ref())?;
    parse_plan_str(&text, overrides)
}

impl ExperimentPlan {
    pub fn validate(&self) -> Result<()> {
        let e = &self.experiment;
        if e.strategies.is_empty() {
            return Err(Error::Validation("strategies must not be empty".into()));
        }
        if e.seeds.is_empty() {
            return Err(Error::Validation("seeds must not be empty".into()));
        }
        for s in &e.strategies {
            self.fl_config(*s, 0).validate().map_err(|err| Error::Validation(err.to_string()))?;
        }
        if let Some(t) = e.target_accuracy {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Validation(format!("target_accuracy {t} outside [0, 1]")));
            }
        }
        if let Some(r) = e.calibrate_round {
            if r == 0 || r > self.federated.total_rounds {
                return Err(Error::Validation(format!(
                    "calibrate_round ({r}) must lie in 1..=total_rounds ({})",
                    self.federated.total_rounds
                )));
            }
            if !e.strategies.contains(&e.calibrate_strategy) {
                return Err(Error::Validation(format!(
                    "calibrate_strategy {} is not among the strategies",
                    e.calibrate_strategy
                )));
            }
        }
        let d = &self.dataset;
        match d.source {
            DataSource::Synthetic => {
                if d.num_classes < 2 || d.dim < 2 || d.per_class < 1 || d.test_per_class < 1 {
                    return Err(Error::Validation(
                        "synthetic data needs num_classes >= 2, dim >= 2, per_class >= 1, test_per_class >= 1".into(),
                    ));
                }
                let n = self.federated.num_clients;
                let total = d.num_classes * d.per_class;
                let shards = match self.partition.scheme {
                    Scheme::OneShard => Some(n),
                    Scheme::TwoShards => Some(2 * n),
                    Scheme::Dirichlet => None,
                };
                if let Some(s) = shards {
                    if total % s != 0 {
                        return Err(Error::Validation(format!(
                            "{total} training examples do not split into {s} equal shards"
                        )));
                    }
                }
            }
            DataSource::Idx => {
                if d.train_images.is_none() || d.train_labels.is_none() || d.test_images.is_none() || d.test_labels.is_none() {
                    return Err(Error::Validation(
                        "idx source needs train_images, train_labels, test_images and test_labels".into(),
                    ));
                }
            }
        }
        if self.partition.scheme == Scheme::Dirichlet && !(self.partition.alpha > 0.0) {
            return Err(Error::Validation("partition alpha must be > 0".into()));
        }
        match self.model.architecture {
            Architecture::Mlp if self.model.hidden_dims.is_empty() || self.model.hidden_dims.contains(&0) => {
                Err(Error::Validation("mlp needs positive hidden_dims".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn fl_config(&self, strategy: Strategy, seed: u64) -> FlConfig {
        let (f, g, b) = (&self.federated, &self.fedgp, &self.baselines);
        FlConfig {
            num_clients: f.num_clients,
            clients_per_round: f.clients_per_round,
            local_epochs: f.local_epochs,
            batch_size: f.batch_size,
            lr: f.lr,
            lr_halving_rounds: f.lr_halving_rounds.clone(),
            weight_decay: f.weight_decay,
            total_rounds: f.total_rounds,
            warmup_rounds: g.warmup_rounds,
            gp_interval: g.gp_interval,
            probes_per_gp_round: g.probes_per_gp_round,
            history_depth: g.history_depth,
            warmup_history_depth: g.warmup_history_depth,
            discount_base: g.discount_base,
            anneal: g.beta,
            embed_dim: g.embed_dim,
            embed_init_std: g.embed_init_std,
            jitter: g.jitter,
            gp_steps: g.gp_steps,
            gp_lr: g.gp_lr,
            powd_d: b.powd_d,
            afl: AflParams { alpha1: b.afl_alpha1, alpha2: b.afl_alpha2, alpha3: b.afl_alpha3 },
            seed,
            strategy,
        }
    }

    pub fn probe_settings(&self) -> ProbeSettings {
        let d = &self.diagnostics;
        ProbeSettings {
            normality_round: (d.normality && self.fedgp.warmup_rounds > 0).then(|| self.fedgp.warmup_rounds - 1),
            normality_samples: d.normality_samples,
            stationarity_interval: (d.stationarity_interval > 0).then_some(d.stationarity_interval),
            stationarity_samples: d.stationarity_samples,
        }
    }

    pub fn target(&self) -> TargetSpec {
        match (self.experiment.target_accuracy, self.experiment.calibrate_round) {
            (Some(accuracy), _) => TargetSpec::Fixed { accuracy },
            (None, Some(r)) => TargetSpec::Calibrated { strategy: self.experiment.calibrate_strategy, round: r },
            (None, None) => TargetSpec::None,
        }
    }

    /// The plan's output directory, placed under `root` when it is relative.
    pub fn output_dir(&self, root: Option<&Path>) -> PathBuf {
        match root {
            Some(r) if self.experiment.output_dir.is_relative() => r.join(&self.experiment.output_dir),
            _ => self.experiment.output_dir.clone(),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Validation(e.to_string()))
    }
}
