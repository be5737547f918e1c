mod common;

use common::*;
use fedgp_core::Error;
use fedgp_core::datagen::{
    gen_synthetic, gen_synthetic_split, partition_dirichlet, partition_dirichlet_detailed, partition_shards,
    solve_balance_qp, QP_FLOOR,
};
use nalgebra::{DMatrix, DVector};
use rand::Rng as _;

/// Columns on the simplex, like per-client label mixes.
fn random_fractions(labels: usize, clients: usize, r: &mut fedgp_core::rng::Rng) -> DMatrix<f64> {
    let mut q = DMatrix::from_fn(labels, clients, |_, _| r.random_range(0.05..1.0));
    for mut col in q.column_iter_mut() {
        let s = col.sum();
        col /= s;
    }
    q
}

#[test]
fn qp_matches_kkt_closed_form_when_floor_is_inactive() {
    let mut r = rng(31);
    let mut solved = 0;
    while solved < 100 {
        let labels = r.random_range(2..=5);
        let clients = r.random_range(labels + 1..=12);
        let q = random_fractions(labels, clients, &mut r);
        let x_true = DVector::from_fn(clients, |_, _| r.random_range(20.0..200.0));
        let d = &q * x_true;
        // minimum-norm solution of Qx = d: x = Q'(QQ')^-1 d
        let gram = &q * q.transpose();
        let closed = q.transpose() * gram.try_inverse().unwrap() * &d;
        if closed.iter().any(|&v| v < QP_FLOOR + 1.0) {
            continue;
        }
        let x = solve_balance_qp(&q, &d).unwrap();
        for (a, b) in x.iter().zip(closed.iter()) {
            assert!((a - b).abs() <= 1e-6 * b.abs(), "{a} vs {b}");
        }
        solved += 1;
    }
}

#[test]
fn qp_result_is_feasible_when_floor_binds() {
    let mut r = rng(32);
    for _ in 0..50 {
        let q = random_fractions(3, 10, &mut r);
        let d = DVector::from_fn(3, |_, _| r.random_range(20.0..60.0));
        let Ok(x) = solve_balance_qp(&q, &d) else { continue };
        assert!(x.iter().all(|&v| v >= QP_FLOOR - 1e-9));
        let resid = (&q * &x - &d).amax();
        assert!(resid <= 1e-6 * d.amax());
    }
}

/// KKT check without the solver's multipliers: fit `nu` on the clients above
/// the floor, then every pinned client must have `(Q'nu)_k <= floor`.
fn assert_kkt(q: &DMatrix<f64>, d: &DVector<f64>, x: &DVector<f64>) {
    assert!(x.iter().all(|&v| v >= QP_FLOOR - 1e-9));
    assert!((q * x - d).amax() <= 1e-6 * d.amax());
    let free: Vec<usize> = (0..x.len()).filter(|&k| x[k] > QP_FLOOR + 1e-7).collect();
    let qf = q.select_columns(&free);
    let xf = DVector::from_iterator(free.len(), free.iter().map(|&k| x[k]));
    let nu = qf.transpose().svd(true, true).solve(&xf, 1e-12).unwrap();
    assert!((qf.transpose() * &nu - &xf).amax() <= 1e-5 * xf.amax(), "free sizes off the row space");
    let z = q.transpose() * nu;
    for k in (0..x.len()).filter(|k| !free.contains(k)) {
        assert!(z[k] <= QP_FLOOR + 1e-5, "client {k} pinned with multiplier {}", z[k]);
    }
}

#[test]
fn qp_solves_a_thin_feasible_set() {
    // 10 labels, 30 clients; the largest attainable floor is only about 1.149.
    #[derive(serde::Deserialize)]
    struct Instance {
        q: Vec<Vec<f64>>,
        d: Vec<f64>,
    }
    let inst: Instance = serde_json::from_str(include_str!("data/thin_qp.json")).unwrap();
    let q = DMatrix::from_fn(inst.q.len(), inst.q[0].len(), |i, j| inst.q[i][j]);
    let d = DVector::from_vec(inst.d);
    let x = solve_balance_qp(&q, &d).unwrap();
    assert_kkt(&q, &d, &x);
}

#[test]
fn qp_satisfies_kkt_on_random_mixes() {
    let mut r = rng(33);
    let mut pinned = 0;
    for _ in 0..200 {
        let labels = r.random_range(2..=8);
        let clients = r.random_range(labels..=30);
        let q = random_fractions(labels, clients, &mut r);
        // feasible by construction; small sizes make the floor bind often
        let x_true = DVector::from_fn(clients, |_, _| r.random_range(1.0..6.0));
        let d = &q * x_true;
        let x = solve_balance_qp(&q, &d).unwrap();
        assert_kkt(&q, &d, &x);
        pinned += x.iter().filter(|&&v| v <= QP_FLOOR + 1e-7).count();
    }
    assert!(pinned > 0);
}

#[test]
fn dirichlet_partitions_conserve_labels_and_keep_clients_nonempty() {
    let (mut generated, mut infeasible) = (0, 0);
    for seed in 0..20u64 {
        let data = gen_synthetic(10, 4, 30 + seed as usize, 3.0, seed).unwrap();
        for (clients, alpha) in [(30, 0.5), (60, 0.2), (40, 5.0)] {
            // very small concentrations can leave a label no client can absorb
            let det = match partition_dirichlet_detailed(&data, clients, alpha, seed * 7 + 1) {
                Ok(det) => det,
                Err(Error::Infeasible { .. }) => {
                    infeasible += 1;
                    continue;
                }
                Err(e) => panic!("{e}"),
            };
            generated += 1;
            let counts = det.partition.label_counts(&data);
            let totals = data.label_counts();
            for c in 0..10 {
                let assigned: usize = counts.iter().map(|k| k[c]).sum();
                assert_eq!(assigned, totals[c]);
            }
            assert!(det.partition.sizes().iter().all(|&s| s >= 1));
            assert_eq!(det.partition.sizes().iter().sum::<usize>(), data.len());
            let mut all: Vec<usize> = det.partition.assignments().iter().flatten().copied().collect();
            all.sort_unstable();
            assert_eq!(all, data.all_indices());
        }
    }
    assert!(generated >= 50 && infeasible <= 10, "{generated} generated, {infeasible} infeasible");
}

#[test]
fn generators_are_deterministic_in_their_seed() {
    let a = gen_synthetic_split(5, 6, 10, 4, 2.0, 99).unwrap();
    let b = gen_synthetic_split(5, 6, 10, 4, 2.0, 99).unwrap();
    let c = gen_synthetic_split(5, 6, 10, 4, 2.0, 100).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.0, c.0);
    let pa = partition_dirichlet(&a.0, 20, 0.5, 1).unwrap();
    let pb = partition_dirichlet(&a.0, 20, 0.5, 1).unwrap();
    assert_eq!(pa, pb);
    assert_eq!(partition_shards(&a.0, 5, 2, 3).unwrap(), partition_shards(&a.0, 5, 2, 3).unwrap());
}

#[test]
fn one_shard_per_client_gives_label_pure_clients() {
    let data = gen_synthetic(10, 4, 60, 3.0, 2).unwrap();
    let p = partition_shards(&data, 30, 1, 5).unwrap();
    for counts in p.label_counts(&data) {
        assert_eq!(counts.iter().filter(|&&c| c > 0).count(), 1);
        assert_eq!(counts.iter().sum::<usize>(), 20);
    }
    let dom = p.dominant_labels(&data);
    for label in 0..10 {
        assert_eq!(dom.iter().filter(|&&l| l == label).count(), 3);
    }
}

#[test]
fn partition_json_round_trips() {
    let data = gen_synthetic(3, 2, 8, 1.0, 0).unwrap();
    let p = partition_dirichlet(&data, 4, 1.0, 2).unwrap();
    let back = fedgp_core::datagen::Partition::from_json(&p.to_json().unwrap(), data.len()).unwrap();
    assert_eq!(p, back);
    let w: f64 = back.weights().iter().sum();
    assert!(rel_err(w, 1.0) < 1e-12);
}
