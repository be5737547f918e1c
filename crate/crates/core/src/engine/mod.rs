//! FedAvg simulation with the two-phase GP schedule.
//!
//! A round starts from the global model `w`. Selected clients run local SGD
//! and report their cumulative gradient (the sum of their step directions);
//! the server applies `w - lr / C * sum_k g_k`. FedGP rounds additionally
//! draw uniform probe selections, record the induced change of every
//! client's loss and refit the client embeddings on the recent samples.

mod local;
mod run;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::selection::{AflParams, Strategy};

pub use local::{aggregate, evaluate_all_losses, global_loss, local_update, ClientData, LocalSgd};
pub use run::{
    collect_probe, run_experiment, ExperimentOutput, GradientCache, NoObserver, RoundContext, RoundObserver,
    SelectionTrace,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlConfig {
    pub num_clients: usize,
    pub clients_per_round: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_halving_rounds: Vec<usize>,
    pub weight_decay: f64,
    pub total_rounds: usize,
    pub warmup_rounds: usize,
    pub gp_interval: usize,
    pub probes_per_gp_round: usize,
    pub history_depth: usize,
    pub warmup_history_depth: usize,
    pub discount_base: f64,
    pub anneal: f64,
    pub embed_dim: usize,
    pub embed_init_std: f64,
    pub jitter: f64,
    pub gp_steps: usize,
    pub gp_lr: f64,
    pub powd_d: Option<usize>,
    pub afl: AflParams,
    pub seed: u64,
    pub strategy: Strategy,
}

impl Default for FlConfig {
    fn default() -> Self {
        Self {
            num_clients: 100,
            clients_per_round: 10,
            local_epochs: 1,
            batch_size: 10,
            lr: 0.05,
            lr_halving_rounds: Vec::new(),
            weight_decay: 0.0,
            total_rounds: 100,
            warmup_rounds: 15,
            gp_interval: 10,
            probes_per_gp_round: 1,
            history_depth: 1,
            warmup_history_depth: 10,
            discount_base: 0.9,
            anneal: 0.95,
            embed_dim: 15,
            embed_init_std: 0.1,
            jitter: 1e-3,
            gp_steps: 500,
            gp_lr: 0.01,
            powd_d: None,
            afl: AflParams::default(),
            seed: 0,
            strategy: Strategy::Rand,
        }
    }
}

impl FlConfig {
    pub fn validate(&self) -> Result<()> {
        let (n, c) = (self.num_clients, self.clients_per_round);
        if c < 1 || c > n {
            return Err(invalid(format!(
                "clients_per_round ({c}) must be between 1 and num_clients ({n})"
            )));
        }
        let checks: [(bool, &str); 12] = [
            (self.local_epochs >= 1, "local_epochs must be >= 1"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (self.lr.is_finite() && self.lr >= 0.0, "lr must be finite and >= 0"),
            (self.weight_decay.is_finite() && self.weight_decay >= 0.0, "weight_decay must be >= 0"),
            (self.gp_interval >= 1, "gp_interval must be >= 1"),
            (self.probes_per_gp_round >= 1, "probes_per_gp_round must be >= 1"),
            (self.anneal > 0.0 && self.anneal <= 1.0, "anneal must lie in (0, 1]"),
            (self.discount_base > 0.0 && self.discount_base <= 1.0, "discount_base must lie in (0, 1]"),
            (self.embed_dim >= 1, "embed_dim must be >= 1"),
            (self.jitter > 0.0, "jitter must be > 0"),
            (self.gp_steps >= 1 && self.gp_lr > 0.0, "gp_steps must be >= 1 and gp_lr > 0"),
            (self.embed_init_std > 0.0, "embed_init_std must be > 0"),
        ];
        if let Some((_, msg)) = checks.iter().find(|(ok, _)| !ok) {
            return Err(invalid(*msg));
        }
        let d = self.powd_candidates();
        if self.strategy == Strategy::Powd && (d < c || d > n) {
            return Err(invalid(format!("powd_d ({d}) must lie between clients_per_round ({c}) and num_clients ({n})")));
        }
        let a = self.afl;
        if !(0.0..=1.0).contains(&a.alpha1) || !(0.0..=1.0).contains(&a.alpha3) || !a.alpha2.is_finite() {
            return Err(invalid("afl alpha1 and alpha3 must lie in [0, 1], alpha2 finite"));
        }
        Ok(())
    }

    /// Pow-d candidate count, `2C` capped at `N` unless set.
    pub fn powd_candidates(&self) -> usize {
        self.powd_d.unwrap_or((2 * self.clients_per_round).min(self.num_clients))
    }

    /// `lr` halved once for every listed round `<= t`.
    pub fn lr_at(&self, t: usize) -> f64 {
        let halvings = self.lr_halving_rounds.iter().filter(|&&h| h <= t).count();
        self.lr * 0.5f64.powi(halvings as i32)
    }

    pub fn phase_at(&self, t: usize) -> Phase {
        if self.strategy == Strategy::Fedgp && t < self.warmup_rounds {
            Phase::Warmup
        } else {
            Phase::Normal
        }
    }

    /// Whether the GP is refit at round `t`.
    pub fn is_gp_round(&self, t: usize) -> bool {
        self.strategy == Strategy::Fedgp && (self.phase_at(t) == Phase::Warmup || t % self.gp_interval == 0)
    }

    pub fn local_sgd(&self) -> LocalSgd {
        LocalSgd { epochs: self.local_epochs, batch_size: self.batch_size, weight_decay: self.weight_decay }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Warmup,
    Normal,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Warmup => "warmup",
            Phase::Normal => "normal",
        }
    }
}

/// One observed loss-change vector and the selection that caused it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossSample {
    pub round: usize,
    pub selection: Vec<usize>,
    pub delta_losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub phase: Phase,
    pub strategy: Strategy,
    pub global_train_loss: f64,
    pub test_accuracy: f64,
    pub selected: Vec<usize>,
    pub gp_trained: bool,
    /// Wall time of the round; `None` when read back from a file that omits it.
    pub elapsed_ms: Option<f64>,
}
