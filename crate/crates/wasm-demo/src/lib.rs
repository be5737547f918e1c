//! JSON-in, JSON-out wrappers around fedgp-core for the static page in
//! `www/`. The plain functions work natively too; the `wasm_*` exports only
//! forward to them.

use fedgp_core::datagen::{gen_synthetic_split, partition_dirichlet, partition_shards, LabeledDataset, Partition};
use fedgp_core::engine::{run_experiment, FlConfig, NoObserver};
use fedgp_core::gp::{EmbeddingMatrix, GpState};
use fedgp_core::model::ModelSpec;
use fedgp_core::selection::{fedgp_select_traced, SelectionContext, Strategy};
use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

type DemoResult<T> = Result<T, String>;

fn parse<'a, T: Deserialize<'a>>(json: &'a str) -> DemoResult<T> {
    serde_json::from_str(json).map_err(|e| format!("bad request: {e}"))
}

fn to_json<T: Serialize>(value: &T) -> DemoResult<String> {
    serde_json::to_string(value).map_err(|e| e.to_string())
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionRequest {
    pub num_classes: usize,
    pub per_class: usize,
    pub num_clients: usize,
    /// `1spc`, `2spc` or `dir`.
    pub scheme: String,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for PartitionRequest {
    fn default() -> Self {
        Self { num_classes: 10, per_class: 60, num_clients: 30, scheme: "dir".into(), alpha: 0.2, seed: 0 }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ClientSummary {
    pub id: usize,
    pub size: usize,
    pub label_counts: Vec<usize>,
    pub dominant_label: usize,
}

fn build_partition(req: &PartitionRequest) -> DemoResult<(LabeledDataset, LabeledDataset, Partition)> {
    let (train, test) =
        gen_synthetic_split(req.num_classes, 8, req.per_class, 10, 3.0, req.seed).map_err(|e| e.to_string())?;
    let partition = match req.scheme.as_str() {
        "1spc" => partition_shards(&train, req.num_clients, 1, req.seed + 1),
        "2spc" => partition_shards(&train, req.num_clients, 2, req.seed + 1),
        "dir" => partition_dirichlet(&train, req.num_clients, req.alpha, req.seed + 1),
        other => return Err(format!("unknown scheme {other:?}")),
    }
    .map_err(|e| e.to_string())?;
    Ok((train, test, partition))
}

/// Label counts of every client under the requested scheme.
pub fn partition_clients(json: &str) -> DemoResult<String> {
    let req: PartitionRequest = parse(json)?;
    let (train, _, partition) = build_partition(&req)?;
    let dominant = partition.dominant_labels(&train);
    let clients: Vec<ClientSummary> = partition
        .label_counts(&train)
        .into_iter()
        .enumerate()
        .map(|(id, label_counts)| ClientSummary {
            id,
            size: label_counts.iter().sum(),
            label_counts,
            dominant_label: dominant[id],
        })
        .collect();
    to_json(&clients)
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectRequest {
    pub num_clients: usize,
    /// Clients are spread round-robin over this many embedding clusters.
    pub groups: usize,
    pub embed_dim: usize,
    pub noise: f64,
    pub clients_per_round: usize,
    pub beta: f64,
    /// Times each client was already picked since the last refit.
    pub tau: Option<Vec<u32>>,
    pub seed: u64,
}

impl Default for SelectRequest {
    fn default() -> Self {
        Self {
            num_clients: 12,
            groups: 4,
            embed_dim: 4,
            noise: 0.2,
            clients_per_round: 3,
            beta: 0.95,
            tau: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SelectResponse {
    pub selected: Vec<usize>,
    /// Per greedy iteration: `(client, expected weighted loss)` of every candidate.
    pub steps: Vec<Vec<(usize, f64)>>,
    pub correlation: Vec<Vec<f64>>,
    pub groups: Vec<usize>,
}

/// Greedy FedGP selection on clustered synthetic embeddings.
pub fn select_clients(json: &str) -> DemoResult<String> {
    let req: SelectRequest = parse(json)?;
    let n = req.num_clients;
    if req.groups == 0 || n == 0 {
        return Err("num_clients and groups must be positive".into());
    }
    let err = |e: fedgp_core::Error| e.to_string();
    let centers = EmbeddingMatrix::random(req.embed_dim, req.groups, 1.0, req.seed).map_err(err)?;
    let noise = EmbeddingMatrix::random(req.embed_dim, n, req.noise.max(1e-6), req.seed + 1).map_err(err)?;
    let groups: Vec<usize> = (0..n).map(|k| k % req.groups).collect();
    let mut x = noise.into_inner();
    for (k, &g) in groups.iter().enumerate() {
        let c = centers.matrix().column(g).clone_owned();
        x.column_mut(k).zip_apply(&c, |v, c| *v += c);
    }
    let x = EmbeddingMatrix::new(x).map_err(err)?;
    let state = GpState::prior(&x, 1e-3);
    let tau = req.tau.unwrap_or_else(|| vec![0; n]);
    if tau.len() != n {
        return Err(format!("tau has {} entries for {n} clients", tau.len()));
    }
    let p = vec![1.0 / n as f64; n];
    let traced =
        fedgp_select_traced(&state, &p, &SelectionContext::with_tau(tau, req.beta), req.clients_per_round).map_err(err)?;
    let cov = state.cov();
    let correlation = (0..n)
        .map(|i| (0..n).map(|j| cov[(i, j)] / (cov[(i, i)] * cov[(j, j)]).sqrt()).collect())
        .collect();
    to_json(&SelectResponse {
        selected: traced.clients,
        steps: traced.steps.into_iter().map(|s| s.criteria).collect(),
        correlation,
        groups,
    })
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateRequest {
    pub partition: PartitionRequest,
    pub strategies: Vec<Strategy>,
    pub clients_per_round: usize,
    pub total_rounds: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for SimulateRequest {
    fn default() -> Self {
        Self {
            partition: PartitionRequest { num_clients: 20, per_class: 40, scheme: "1spc".into(), ..Default::default() },
            strategies: vec![Strategy::Rand, Strategy::Fedgp],
            clients_per_round: 4,
            total_rounds: 40,
            lr: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Curve {
    pub strategy: Strategy,
    pub test_accuracy: Vec<f64>,
    pub train_loss: Vec<f64>,
}

/// Short FedAvg runs of a logistic-regression model, one curve per strategy.
pub fn simulate(json: &str) -> DemoResult<String> {
    let req: SimulateRequest = parse(json)?;
    let (train, test, partition) = build_partition(&req.partition)?;
    let spec = ModelSpec::logreg(train.dim(), train.num_classes());
    let curves = req
        .strategies
        .iter()
        .map(|&strategy| {
            let cfg = FlConfig {
                num_clients: req.partition.num_clients,
                clients_per_round: req.clients_per_round,
                total_rounds: req.total_rounds,
                lr: req.lr,
                warmup_rounds: 5.min(req.total_rounds),
                gp_interval: 5,
                embed_dim: 5,
                gp_steps: 100,
                strategy,
                seed: req.seed,
                ..Default::default()
            };
            let out = run_experiment(&cfg, &spec, &train, &partition, &test, &mut NoObserver).map_err(|e| e.to_string())?;
            Ok(Curve {
                strategy,
                test_accuracy: out.records.iter().map(|r| r.test_accuracy).collect(),
                train_loss: out.records.iter().map(|r| r.global_train_loss).collect(),
            })
        })
        .collect::<DemoResult<Vec<Curve>>>()?;
    to_json(&curves)
}

#[wasm_bindgen]
pub fn wasm_partition(json: &str) -> Result<String, JsError> {
    partition_clients(json).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn wasm_select(json: &str) -> Result<String, JsError> {
    select_clients(json).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn wasm_simulate(json: &str) -> Result<String, JsError> {
    simulate(json).map_err(|e| JsError::new(&e))
}
