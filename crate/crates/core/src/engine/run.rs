use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::local::{aggregate, evaluate_all_losses, global_loss, local_update, ClientData};
use super::{FlConfig, LossSample, Phase, RoundRecord};
use crate::datagen::{LabeledDataset, Partition};
use crate::error::{invalid, Error, Result};
use crate::gp::{train_embeddings, EmbeddingMatrix, GpState, TrainOptions, WeightedSample};
use crate::model::{evaluate, init_params, ModelSpec, ParamVector};
use crate::rng::{derive_seed, indexed_rng, stream_rng, Rng, Stream};
use crate::selection::{
    afl_select, fedgp_select_traced, powd_select, random_select, SelectionContext, SelectionStep, Strategy,
};

/// Cumulative gradients of the current round, computed on first use.
#[derive(Debug, Clone)]
pub struct GradientCache {
    grads: Vec<Option<ParamVector>>,
}

impl GradientCache {
    pub fn new(num_clients: usize) -> Self {
        Self { grads: vec![None; num_clients] }
    }

    pub fn get(&self, k: usize) -> Option<&ParamVector> {
        self.grads.get(k).and_then(Option::as_ref)
    }
}

#[derive(Clone, Copy)]
struct Env<'a> {
    cfg: &'a FlConfig,
    spec: &'a ModelSpec,
    data: &'a LabeledDataset,
    partition: &'a Partition,
}

/// Read access to the state at the start of a round plus the means to
/// evaluate hypothetical selections against it.
pub struct RoundContext<'a> {
    round: usize,
    phase: Phase,
    lr: f64,
    env: Env<'a>,
    params: &'a ParamVector,
    losses: &'a [f64],
    cache: &'a mut GradientCache,
}

impl RoundContext<'_> {
    pub fn round(&self) -> usize {
        self.round
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn params(&self) -> &ParamVector {
        self.params
    }

    /// Client losses at the current global model.
    pub fn losses(&self) -> &[f64] {
        self.losses
    }

    pub fn config(&self) -> &FlConfig {
        self.env.cfg
    }

    pub fn partition(&self) -> &Partition {
        self.env.partition
    }

    fn ensure(&mut self, selection: &[usize]) -> Result<()> {
        let missing: Vec<usize> = selection.iter().copied().filter(|&k| self.cache.get(k).is_none()).collect();
        let env = self.env;
        let (params, lr, round) = (self.params, self.lr, self.round);
        let sgd = env.cfg.local_sgd();
        let seed = env.cfg.seed;
        let run = |k: usize| -> Result<ParamVector> {
            let client = ClientData { id: k, data: env.data, indices: env.partition.client(k) };
            let mut rng = indexed_rng(seed, Stream::ClientShuffle, round as u64, k as u64);
            local_update(params, env.spec, client, &sgd, lr, &mut rng)
        };
        #[cfg(feature = "parallel")]
        let computed: Vec<Result<ParamVector>> = {
            use rayon::prelude::*;
            missing.par_iter().map(|&k| run(k)).collect()
        };
        #[cfg(not(feature = "parallel"))]
        let computed: Vec<Result<ParamVector>> = missing.iter().map(|&k| run(k)).collect();
        for (k, g) in missing.into_iter().zip(computed) {
            self.cache.grads[k] = Some(g?);
        }
        Ok(())
    }

    /// Global model that aggregating `selection` would produce.
    pub fn candidate(&mut self, selection: &[usize]) -> Result<ParamVector> {
        let n = self.env.partition.num_clients();
        if selection.is_empty() || selection.iter().any(|&k| k >= n) {
            return Err(invalid("selection must be a non-empty set of valid client ids"));
        }
        self.ensure(selection)?;
        let mut order = selection.to_vec();
        order.sort_unstable();
        let grads: Vec<&ParamVector> = order.iter().map(|&k| self.cache.get(k).expect("ensured")).collect();
        aggregate(self.params, &grads, self.lr)
    }

    /// Loss change of every client if `selection` were aggregated; the
    /// candidate model is returned alongside.
    pub fn probe(&mut self, selection: &[usize]) -> Result<(LossSample, ParamVector)> {
        let candidate = self.candidate(selection)?;
        let after = evaluate_all_losses(&candidate, self.env.spec, self.env.data, self.env.partition)?;
        let delta: Vec<f64> = after.iter().zip(self.losses).map(|(a, b)| a - b).collect();
        let mut sel = selection.to_vec();
        sel.sort_unstable();
        Ok((LossSample { round: self.round, selection: sel, delta_losses: delta }, candidate))
    }
}

/// Draws a uniform `C`-subset and measures the loss change it induces.
pub fn collect_probe(ctx: &mut RoundContext<'_>, rng: &mut Rng) -> Result<(LossSample, ParamVector)> {
    let cfg = ctx.config();
    let selection = random_select(cfg.num_clients, cfg.clients_per_round, rng)?;
    ctx.probe(&selection)
}

/// Hooks into the round loop. Diagnostics use them to draw extra probes
/// without touching the training streams.
pub trait RoundObserver {
    /// Called after any GP refit and before the round's selection.
    fn before_selection(&mut self, _ctx: &mut RoundContext<'_>, _embeddings: Option<&EmbeddingMatrix>) -> Result<()> {
        Ok(())
    }

    fn after_round(&mut self, _record: &RoundRecord, _params: &ParamVector) -> Result<()> {
        Ok(())
    }
}

pub struct NoObserver;

impl RoundObserver for NoObserver {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionTrace {
    pub round: usize,
    pub strategy: Strategy,
    /// In selection order.
    pub selected: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub steps: Option<Vec<SelectionStep>>,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub records: Vec<RoundRecord>,
    pub loss_samples: Vec<LossSample>,
    pub traces: Vec<SelectionTrace>,
    /// Embeddings after the last warm-up refit.
    pub embeddings_warmup: Option<EmbeddingMatrix>,
    pub embeddings_final: Option<EmbeddingMatrix>,
    pub final_params: ParamVector,
}

fn check_inputs(cfg: &FlConfig, spec: &ModelSpec, partition: &Partition, test: &LabeledDataset) -> Result<()> {
    cfg.validate()?;
    spec.validate()?;
    if partition.num_clients() != cfg.num_clients {
        return Err(invalid(format!(
            "partition has {} clients, config expects {}",
            partition.num_clients(),
            cfg.num_clients
        )));
    }
    if let Some(k) = (0..partition.num_clients()).find(|&k| partition.client(k).is_empty()) {
        return Err(invalid(format!("client {k} has no data")));
    }
    if test.is_empty() {
        return Err(invalid("test set is empty"));
    }
    Ok(())
}

/// Training samples for a refit at round `t`: rounds `t - m * spacing` for
/// `m = 0..=depth`, weighted `theta^(t - round)`.
fn training_window(
    history: &BTreeMap<usize, Vec<Vec<f64>>>,
    t: usize,
    depth: usize,
    spacing: usize,
    theta: f64,
) -> Vec<WeightedSample> {
    let mut out = Vec::new();
    for m in 0..=depth {
        let Some(r) = t.checked_sub(m * spacing) else { break };
        if let Some(deltas) = history.get(&r) {
            let w = theta.powi((t - r) as i32);
            out.extend(deltas.iter().map(|d| WeightedSample::new(nalgebra::DVector::from_column_slice(d), w)));
        }
    }
    out
}

// wasm32-unknown-unknown has no clock behind `Instant`.
#[cfg(not(target_arch = "wasm32"))]
fn stopwatch() -> impl Fn() -> Option<f64> {
    let started = std::time::Instant::now();
    move || Some(started.elapsed().as_secs_f64() * 1e3)
}

#[cfg(target_arch = "wasm32")]
fn stopwatch() -> impl Fn() -> Option<f64> {
    || None
}

/// Runs FedAvg for `cfg.total_rounds` rounds with the configured strategy.
pub fn run_experiment(
    cfg: &FlConfig,
    spec: &ModelSpec,
    train: &LabeledDataset,
    partition: &Partition,
    test: &LabeledDataset,
    observer: &mut dyn RoundObserver,
) -> Result<ExperimentOutput> {
    check_inputs(cfg, spec, partition, test)?;
    let env = Env { cfg, spec, data: train, partition };
    let n = cfg.num_clients;
    let fedgp = cfg.strategy == Strategy::Fedgp;
    let test_idx = test.all_indices();
    let keep = cfg.warmup_history_depth.max(cfg.history_depth * cfg.gp_interval);
    let train_opts = TrainOptions { steps: cfg.gp_steps, lr: cfg.gp_lr };

    let mut params = init_params(spec, derive_seed(cfg.seed, Stream::ModelInit, 0, 0))?;
    let mut embeddings = if fedgp {
        Some(EmbeddingMatrix::random(
            cfg.embed_dim,
            n,
            cfg.embed_init_std,
            derive_seed(cfg.seed, Stream::GpInit, 0, 0),
        )?)
    } else {
        None
    };
    let mut anneal = SelectionContext::new(n, cfg.anneal);
    let mut strategy_rng = stream_rng(cfg.seed, Stream::Strategy);
    let mut losses = evaluate_all_losses(&params, spec, train, partition)?;
    let mut history: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();

    let mut out = ExperimentOutput {
        records: Vec::with_capacity(cfg.total_rounds),
        loss_samples: Vec::new(),
        traces: Vec::with_capacity(cfg.total_rounds),
        embeddings_warmup: None,
        embeddings_final: None,
        final_params: params.clone(),
    };

    for t in 0..cfg.total_rounds {
        let elapsed = stopwatch();
        let wrap = |e: Error| Error::Round { round: t, source: Box::new(e) };
        let phase = cfg.phase_at(t);
        let gp_trained = cfg.is_gp_round(t);
        let mut cache = GradientCache::new(n);
        let mut ctx = RoundContext { round: t, phase, lr: cfg.lr_at(t), env, params: &params, losses: &losses, cache: &mut cache };

        let mut forced: Option<(Vec<usize>, ParamVector)> = None;
        if gp_trained {
            let s = if phase == Phase::Warmup { 1 } else { cfg.probes_per_gp_round };
            let mut probe_rng = indexed_rng(cfg.seed, Stream::Probe, t as u64, 0);
            let mut deltas = Vec::with_capacity(s);
            for _ in 0..s {
                let (sample, candidate) = collect_probe(&mut ctx, &mut probe_rng).map_err(wrap)?;
                if phase == Phase::Warmup {
                    forced = Some((sample.selection.clone(), candidate));
                }
                deltas.push(sample.delta_losses.clone());
                out.loss_samples.push(sample);
            }
            history.insert(t, deltas);
            let (depth, spacing) = match phase {
                Phase::Warmup => (cfg.warmup_history_depth, 1),
                Phase::Normal => (cfg.history_depth, cfg.gp_interval),
            };
            let window = training_window(&history, t, depth, spacing, cfg.discount_base);
            let x = embeddings.as_ref().expect("fedgp has embeddings");
            let trained = train_embeddings(x, cfg.jitter, &window, train_opts).map_err(wrap)?;
            if phase == Phase::Warmup && t + 1 == cfg.warmup_rounds {
                out.embeddings_warmup = Some(trained.clone());
            }
            embeddings = Some(trained);
            anneal.reset();
            let oldest = t.saturating_sub(keep);
            history.retain(|&r, _| r >= oldest);
        }

        observer.before_selection(&mut ctx, embeddings.as_ref()).map_err(wrap)?;

        let (selected, next, steps) = match forced {
            Some((sel, candidate)) => (sel, candidate, None),
            None => {
                let c = cfg.clients_per_round;
                let (sel, steps) = match cfg.strategy {
                    Strategy::Rand => (random_select(n, c, &mut strategy_rng), None),
                    Strategy::Afl => (afl_select(&losses, c, cfg.afl, &mut strategy_rng), None),
                    Strategy::Powd => {
                        (powd_select(|k| losses[k], n, c, cfg.powd_candidates(), &mut strategy_rng), None)
                    }
                    Strategy::Fedgp => {
                        let x = embeddings.as_ref().expect("fedgp has embeddings");
                        let prior = GpState::prior(x, cfg.jitter);
                        let traced = fedgp_select_traced(&prior, partition.weights(), &anneal, c).map_err(wrap)?;
                        (Ok(traced.clients), Some(traced.steps))
                    }
                };
                let sel = sel.map_err(wrap)?;
                let candidate = ctx.candidate(&sel).map_err(wrap)?;
                (sel, candidate, steps)
            }
        };
        drop(ctx);
        if fedgp {
            anneal.record_selection(&selected);
        }

        params = next;
        losses = evaluate_all_losses(&params, spec, train, partition).map_err(wrap)?;
        let (_, test_accuracy) = evaluate(&params, spec, test, &test_idx).map_err(wrap)?;
        let record = RoundRecord {
            round: t,
            phase,
            strategy: cfg.strategy,
            global_train_loss: global_loss(&losses, partition),
            test_accuracy,
            selected: selected.clone(),
            gp_trained,
            elapsed_ms: elapsed(),
        };
        observer.after_round(&record, &params).map_err(wrap)?;
        out.traces.push(SelectionTrace { round: t, strategy: cfg.strategy, selected, steps });
        out.records.push(record);
    }
    out.embeddings_final = embeddings;
    out.final_params = params;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{gen_synthetic, partition_shards};

    fn small(strategy: Strategy) -> (FlConfig, ModelSpec, LabeledDataset, Partition, LabeledDataset) {
        let data = gen_synthetic(4, 5, 20, 3.0, 3).unwrap();
        let test = gen_synthetic(4, 5, 5, 3.0, 3).unwrap();
        let partition = partition_shards(&data, 8, 1, 4).unwrap();
        let cfg = FlConfig {
            num_clients: 8,
            clients_per_round: 2,
            total_rounds: 6,
            warmup_rounds: 3,
            gp_interval: 2,
            embed_dim: 3,
            gp_steps: 20,
            batch_size: 5,
            lr: 0.1,
            strategy,
            seed: 11,
            ..Default::default()
        };
        (cfg, ModelSpec::logreg(5, 4), data, partition, test)
    }

    #[test]
    fn every_strategy_runs_and_is_reproducible() {
        for s in [Strategy::Rand, Strategy::Afl, Strategy::Powd, Strategy::Fedgp] {
            let (cfg, spec, data, part, test) = small(s);
            let a = run_experiment(&cfg, &spec, &data, &part, &test, &mut NoObserver).unwrap();
            let b = run_experiment(&cfg, &spec, &data, &part, &test, &mut NoObserver).unwrap();
            assert_eq!(a.records.len(), 6);
            for (ra, rb) in a.records.iter().zip(&b.records) {
                assert_eq!(ra.selected, rb.selected);
                assert_eq!(ra.global_train_loss.to_bits(), rb.global_train_loss.to_bits());
                assert_eq!(ra.selected.len(), 2);
            }
        }
    }

    #[test]
    fn fedgp_schedule_flags_and_samples() {
        let (cfg, spec, data, part, test) = small(Strategy::Fedgp);
        let out = run_experiment(&cfg, &spec, &data, &part, &test, &mut NoObserver).unwrap();
        let flags: Vec<bool> = out.records.iter().map(|r| r.gp_trained).collect();
        assert_eq!(flags, vec![true, true, true, false, true, false]);
        assert_eq!(out.loss_samples.len(), 4);
        assert!(out.embeddings_warmup.is_some());
        for r in &out.records[..3] {
            assert_eq!(r.phase, Phase::Warmup);
        }
        // warm-up rounds apply the probe selection
        for (r, s) in out.records[..3].iter().zip(&out.loss_samples) {
            let mut sel = r.selected.clone();
            sel.sort_unstable();
            assert_eq!(sel, s.selection);
        }
    }

    #[test]
    fn training_window_spacing_and_discount() {
        let mut h = BTreeMap::new();
        for r in [0usize, 5, 10, 14, 20] {
            h.insert(r, vec![vec![r as f64]]);
        }
        let w = training_window(&h, 20, 1, 10, 0.9);
        assert_eq!(w.len(), 2);
        assert_eq!(w[0].weight, 1.0);
        assert!((w[1].weight - 0.9f64.powi(10)).abs() < 1e-15);
        assert_eq!(w[1].delta_losses[0], 10.0);
    }

    #[test]
    fn partition_size_mismatch_is_rejected() {
        let (mut cfg, spec, data, part, test) = small(Strategy::Rand);
        cfg.num_clients = 9;
        assert!(run_experiment(&cfg, &spec, &data, &part, &test, &mut NoObserver).is_err());
    }
}
