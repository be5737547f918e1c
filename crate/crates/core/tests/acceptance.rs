//! End-to-end acceptance checks. Each test prints one `criterion N: PASS|FAIL`
//! line with its measurements before asserting.

mod common;

use std::fs;
use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use common::*;
use fedgp_core::datagen::{gen_synthetic, partition_dirichlet_detailed, solve_balance_qp};
use fedgp_core::diagnostics::covariance_similarity;
use fedgp_core::gp::{
    covariance_from_embeddings, log_likelihood, neg_log_likelihood_grad, train_embeddings, EmbeddingMatrix, GpState,
    TrainOptions, WeightedSample,
};
use fedgp_core::model::{init_params, loss_and_grad, ModelSpec, ParamVector};
use fedgp_core::plan::{find_cells, parse_plan_str, run_plan, ExperimentPlan, PlanOutcome};
use fedgp_core::selection::{fedgp_select, first_pick_criterion, lemma3_pair, SelectionContext, Strategy};
use fedgp_core::Error;
use nalgebra::{DMatrix, DVector};
use rand::Rng as _;

const DESK_PLAN: &str = include_str!("../../../configs/desk_1spc.toml");

fn report(n: u32, pass: bool, elapsed: Duration, limit: Duration, detail: String) {
    let ok = pass && elapsed <= limit;
    println!(
        "criterion {n}: {} ({detail}; {:.2}s of {:.0}s)",
        if ok { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        limit.as_secs_f64()
    );
    assert!(pass, "criterion {n} failed: {detail}");
    assert!(elapsed <= limit, "criterion {n} exceeded its time budget");
}

#[test]
fn criterion_01_conditioning_matches_schur_complement() {
    let start = Instant::now();
    let mut r = rng(101);
    let mut worst: f64 = 0.0;
    for _ in 0..500 {
        let n = r.random_range(2..=6);
        let cov = random_pd(n, &mut r);
        let mu = random_vector(n, &mut r);
        let k = r.random_range(0..n);
        let v: f64 = r.random_range(-3.0..3.0);
        let post = GpState::new(mu.clone(), cov.clone()).unwrap().condition(k, v).unwrap();
        let (m, c) = schur_condition(&mu, &cov, &[k], &[v]);
        worst = worst.max((post.mean() - &m).amax() / m.amax().max(1.0));
        worst = worst.max(max_rel_matrix(post.cov(), &c));
    }
    report(1, worst <= 1e-9, start.elapsed(), Duration::from_secs(5), format!("max rel err {worst:.2e} over 500"));
}

#[test]
fn criterion_02_two_pick_greedy_matches_closed_form() {
    let start = Instant::now();
    let mut r = rng(102);
    let (mut agree, mut ties) = (0, 0);
    let n = 5;
    for i in 0..200 {
        let mut cov = random_pd(n, &mut r);
        let mut p = random_weights(n, &mut r);
        if i % 10 == 0 {
            // duplicate a client to force exact criterion ties
            let (a, b) = (r.random_range(0..n), r.random_range(0..n));
            if a != b {
                for j in 0..n {
                    let v = cov[(a, j)];
                    cov[(b, j)] = v;
                    cov[(j, b)] = v;
                }
                cov[(b, b)] = cov[(a, a)];
                cov[(a, b)] = cov[(a, a)];
                cov[(b, a)] = cov[(a, a)];
                p[b] = p[a];
            }
            ties += 1;
        }
        let tau: Vec<u32> = (0..n).map(|_| r.random_range(0..3)).collect();
        let beta = if i % 2 == 0 { 0.5 } else { 0.95 };
        let state = GpState::new(DVector::zeros(n), cov.clone()).unwrap();
        let picks = fedgp_select(&state, &p, &SelectionContext::with_tau(tau.clone(), beta), 2);
        let pair = lemma3_pair(&cov, &p, &tau, beta);
        if let (Ok(picks), Ok((k1, k2))) = (picks, pair) {
            agree += (picks == vec![k1, k2]) as usize;
        }
    }
    report(
        2,
        agree == 200,
        start.elapsed(),
        Duration::from_secs(5),
        format!("{agree}/200 agree, {ties} tie instances"),
    );
}

#[test]
fn criterion_03_invariances_and_annealing() {
    let start = Instant::now();
    let mut r = rng(103);
    let (mut invariant, mut annealed) = (0, 0);
    for _ in 0..100 {
        let n = r.random_range(3..=8);
        let c = r.random_range(1..=n);
        let cov = random_pd(n, &mut r);
        let mu = random_vector(n, &mut r);
        let p = random_weights(n, &mut r);
        let tau: Vec<u32> = (0..n).map(|_| r.random_range(0..3)).collect();
        let ctx = SelectionContext::with_tau(tau.clone(), 0.95);
        let base = fedgp_select(&GpState::new(mu.clone(), cov.clone()).unwrap(), &p, &ctx, c).unwrap();
        let shift: f64 = r.random_range(-10.0..10.0);
        let a = fedgp_select(&GpState::new(mu.map(|m| m + shift), cov.clone()).unwrap(), &p, &ctx, c).unwrap();
        let scale: f64 = r.random_range(0.01..100.0);
        let ps: Vec<f64> = p.iter().map(|w| w * scale).collect();
        let b = fedgp_select(&GpState::new(mu.clone(), cov.clone()).unwrap(), &ps, &ctx, c).unwrap();
        invariant += (a == base && b == base) as usize;

        let k = base[0];
        let before = first_pick_criterion(&cov, &p, &tau, 0.95, k);
        let mut bumped = tau.clone();
        bumped[k] += 1;
        annealed += (first_pick_criterion(&cov, &p, &bumped, 0.95, k) < before) as usize;
    }
    report(
        3,
        invariant == 100 && annealed == 100,
        start.elapsed(),
        Duration::from_secs(5),
        format!("{invariant}/100 invariant, {annealed}/100 strictly annealed"),
    );
}

#[test]
fn criterion_04_likelihood_gradient() {
    let start = Instant::now();
    let mut r = rng(104);
    let mut worst: f64 = 0.0;
    let jitter = 1e-2;
    let h = 1e-6;
    for _ in 0..20 {
        let x0 = gaussian_matrix(2, 3, &mut r);
        let samples: Vec<WeightedSample> =
            (0..5).map(|m| WeightedSample::new(random_vector(3, &mut r), 0.9f64.powi(m))).collect();
        let (_, g) = neg_log_likelihood_grad(&EmbeddingMatrix::new(x0.clone()).unwrap(), jitter, &samples).unwrap();
        let f = |x: DMatrix<f64>| -log_likelihood(&EmbeddingMatrix::new(x).unwrap(), jitter, &samples).unwrap();
        for i in 0..2 {
            for j in 0..3 {
                let (mut xp, mut xm) = (x0.clone(), x0.clone());
                xp[(i, j)] += h;
                xm[(i, j)] -= h;
                worst = worst.max(((f(xp) - f(xm)) / (2.0 * h) - g[(i, j)]).abs());
            }
        }
    }
    report(4, worst <= 1e-4, start.elapsed(), Duration::from_secs(10), format!("max abs err {worst:.2e}"));
}

#[test]
fn criterion_05_planted_embeddings_are_recovered() {
    let start = Instant::now();
    let (n, d, jitter) = (20, 5, 1e-3);
    let mut r = rng(105);
    let planted = EmbeddingMatrix::new(gaussian_matrix(d, n, &mut r)).unwrap();
    let truth = covariance_from_embeddings(&planted, jitter);
    let chol = truth.clone().cholesky().unwrap();
    let samples: Vec<WeightedSample> =
        (0..200).map(|_| WeightedSample::new(chol.l() * random_vector(n, &mut r), 1.0)).collect();
    let init = EmbeddingMatrix::random(d, n, 0.1, 7).unwrap();
    let trained = train_embeddings(&init, jitter, &samples, TrainOptions { steps: 500, lr: 0.01 }).unwrap();
    let sim = covariance_similarity(&covariance_from_embeddings(&trained, jitter), &truth).unwrap();
    let before = log_likelihood(&init, jitter, &samples).unwrap();
    let after = log_likelihood(&trained, jitter, &samples).unwrap();
    report(
        5,
        sim >= 0.9 && after >= before,
        start.elapsed(),
        Duration::from_secs(30),
        format!("covariance similarity {sim:.4}, log-likelihood {before:.1} -> {after:.1}"),
    );
}

fn model_fd_error(spec: &ModelSpec) -> f64 {
    let data = gen_synthetic(spec.num_classes, spec.input_dim, 4, 2.0, 3).unwrap();
    let idx = data.all_indices();
    let params = init_params(spec, 9).unwrap();
    let (_, grad) = loss_and_grad(&params, spec, &data, &idx, 1e-3).unwrap();
    let h = 1e-6;
    let loss = |v: Vec<f64>| {
        let p = ParamVector::new(v, params.layout().to_vec()).unwrap();
        loss_and_grad(&p, spec, &data, &idx, 1e-3).unwrap().0
    };
    (0..params.len())
        .map(|i| {
            let (mut a, mut b) = (params.values().to_vec(), params.values().to_vec());
            a[i] += h;
            b[i] -= h;
            ((loss(a) - loss(b)) / (2.0 * h) - grad.values()[i]).abs()
        })
        .fold(0.0, f64::max)
}

#[test]
fn criterion_06_model_gradients() {
    let start = Instant::now();
    let logreg = model_fd_error(&ModelSpec::logreg(6, 4));
    let mlp = model_fd_error(&ModelSpec::mlp(6, vec![8], 4));
    report(
        6,
        logreg <= 1e-4 && mlp <= 1e-4,
        start.elapsed(),
        Duration::from_secs(10),
        format!("logreg {logreg:.2e}, mlp {mlp:.2e}"),
    );
}

struct DeskRun {
    plan: ExperimentPlan,
    outcome: PlanOutcome,
    elapsed: Duration,
    _dir: tempfile::TempDir,
}

fn desk_plan() -> ExperimentPlan {
    let plan = parse_plan_str(DESK_PLAN, &[]).unwrap();
    let (f, g) = (&plan.federated, &plan.fedgp);
    assert_eq!((plan.dataset.num_classes, f.num_clients, f.clients_per_round), (10, 30, 3));
    assert_eq!((f.total_rounds, g.warmup_rounds, g.gp_interval, g.beta), (150, 15, 10, 0.95));
    assert_eq!(plan.model.hidden_dims, vec![16]);
    assert_eq!(plan.experiment.seeds.len(), 5);
    assert_eq!(plan.experiment.calibrate_round, Some(100));
    plan
}

fn desk_run() -> &'static DeskRun {
    static RUN: OnceLock<DeskRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let plan = desk_plan();
        let dir = tempfile::tempdir().unwrap();
        let start = Instant::now();
        let outcome = run_plan(&plan, &dir.path().join("desk")).unwrap();
        let elapsed = start.elapsed();
        assert!(outcome.failed().is_empty(), "{:?}", outcome.failed());
        DeskRun { plan, outcome, elapsed, _dir: dir }
    })
}

fn fedgp_cells(run: &DeskRun) -> Vec<&fedgp_core::plan::CellOutcome> {
    run.outcome.cells.iter().filter(|c| c.strategy == Strategy::Fedgp).collect()
}

#[test]
fn criterion_07_desk_scale_convergence() {
    let run = desk_run();
    let summary = run.outcome.summary.as_ref().unwrap();
    let rand = summary.strategy(Strategy::Rand).unwrap();
    let fedgp = summary.strategy(Strategy::Fedgp).unwrap();
    let pass = match (fedgp.median, rand.median) {
        (Some(f), Some(r)) => f <= 0.8 * r && f <= r,
        _ => false,
    };
    report(
        7,
        pass,
        run.elapsed,
        Duration::from_secs(15 * 60),
        format!(
            "target {:?}, rand rounds {:?} median {:?}, fedgp rounds {:?} median {:?}",
            summary.target_accuracy, rand.rounds, rand.median, fedgp.rounds, fedgp.median
        ),
    );
}

#[test]
fn criterion_08_normality_at_end_of_warmup() {
    let run = desk_run();
    assert_eq!(run.plan.probe_settings().normality_round, Some(run.plan.fedgp.warmup_rounds - 1));
    assert_eq!(run.plan.diagnostics.normality_samples, 500);
    let cells = fedgp_cells(run);
    let passed = cells.iter().filter(|c| c.normality.as_ref().is_some_and(|n| n.pass)).count();
    let worst: Vec<String> = cells
        .iter()
        .filter_map(|c| c.normality.as_ref())
        .map(|n| {
            let s = n.components.iter().map(|c| c.skewness.abs()).fold(0.0, f64::max);
            let k = n.components.iter().map(|c| c.excess_kurtosis.abs()).fold(0.0, f64::max);
            format!("{s:.2}/{k:.2}")
        })
        .collect();
    report(
        8,
        passed >= 4,
        run.elapsed,
        Duration::from_secs(10 * 60),
        format!("{passed}/5 seeds pass; max |skew|/|exkurt| per seed {worst:?}"),
    );
}

#[test]
fn criterion_09_stationarity() {
    let run = desk_run();
    let points: Vec<f64> = fedgp_cells(run).iter().flat_map(|c| c.stationarity.iter().map(|p| p.similarity)).collect();
    let high = points.iter().filter(|&&s| s >= 0.9).count();
    report(
        9,
        !points.is_empty() && 2 * high > points.len(),
        run.elapsed,
        Duration::from_secs(15 * 60),
        format!("{high}/{} probe pairs with similarity >= 0.9", points.len()),
    );
}

#[test]
fn criterion_10_embedding_clustering() {
    let run = desk_run();
    let gaps: Vec<f64> = fedgp_cells(run).iter().filter_map(|c| c.clustering.as_ref().map(|s| s.gap)).collect();
    let passed = gaps.iter().filter(|&&g| g >= 0.1).count();
    report(
        10,
        passed >= 4,
        run.elapsed,
        Duration::from_secs(15 * 60),
        format!("{passed}/5 seeds with gap >= 0.1; gaps {gaps:.3?}"),
    );
}

#[test]
fn criterion_11_balance_qp_and_dirichlet_totals() {
    let start = Instant::now();
    let mut r = rng(111);
    let (mut solved, mut worst) = (0, 0.0f64);
    while solved < 100 {
        let labels = r.random_range(2..=6);
        let clients = r.random_range(labels + 1..=15);
        let mut q = DMatrix::from_fn(labels, clients, |_, _| r.random_range(0.05..1.0));
        for mut col in q.column_iter_mut() {
            let s = col.sum();
            col /= s;
        }
        let d = &q * DVector::from_fn(clients, |_, _| r.random_range(20.0..200.0));
        let closed = q.transpose() * (&q * q.transpose()).try_inverse().unwrap() * &d;
        if closed.min() < 2.0 {
            continue;
        }
        let x = solve_balance_qp(&q, &d).unwrap();
        worst = worst.max(x.iter().zip(closed.iter()).map(|(a, b)| (a - b).abs() / b).fold(0.0, f64::max));
        solved += 1;
    }

    let (mut partitions, mut exact) = (0, 0);
    for seed in 0..30u64 {
        let data = gen_synthetic(10, 3, 40, 2.0, seed).unwrap();
        for (clients, alpha) in [(30, 1.0), (50, 0.2), (100, 0.2)] {
            match partition_dirichlet_detailed(&data, clients, alpha, seed + 1000) {
                Ok(det) => {
                    partitions += 1;
                    let counts = det.partition.label_counts(&data);
                    let totals = data.label_counts();
                    let conserved = (0..10).all(|c| counts.iter().map(|k| k[c]).sum::<usize>() == totals[c]);
                    let nonempty = det.partition.sizes().iter().all(|&s| s >= 1);
                    exact += (conserved && nonempty) as usize;
                }
                Err(Error::Infeasible { .. }) => {}
                Err(e) => panic!("{e}"),
            }
        }
    }
    report(
        11,
        worst <= 1e-6 && partitions > 0 && exact == partitions,
        start.elapsed(),
        Duration::from_secs(5),
        format!("QP max rel err {worst:.2e}; {exact}/{partitions} Dirichlet partitions exact"),
    );
}

#[test]
fn criterion_12_reruns_are_byte_identical() {
    let run = desk_run();
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let again = run_plan(&run.plan, &dir.path().join("again")).unwrap();
    let elapsed = start.elapsed();
    let read = |root: &PathBuf| -> Vec<(PathBuf, Vec<u8>)> {
        find_cells(root)
            .unwrap()
            .into_iter()
            .map(|c| (c.strip_prefix(root).unwrap().to_path_buf(), fs::read(c.join("metrics.csv")).unwrap()))
            .collect()
    };
    let (a, b) = (read(&run.outcome.out_dir), read(&again.out_dir));
    let identical = a.len() == 10 && a == b;
    report(
        12,
        identical,
        elapsed,
        run.elapsed + Duration::from_secs(60),
        format!("{} metrics files compared, identical: {identical}", a.len()),
    );
}
