use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand::SeedableRng;
use rand_distr::{Distribution, Gamma};

use super::{solve_balance_qp, LabeledDataset, Partition};
use crate::error::{invalid, Error, Result};
use crate::rng::Rng;

/// Label-sorted shards dealt to clients through one seeded permutation.
///
/// With `shards_per_client = 1` every client holds a single shard (1SPC), with
/// 2 it holds two (2SPC). Shards are label-pure whenever each label's count
/// is a multiple of the shard size.
pub fn partition_shards(
    data: &LabeledDataset,
    num_clients: usize,
    shards_per_client: usize,
    seed: u64,
) -> Result<Partition> {
    if num_clients == 0 || shards_per_client == 0 {
        return Err(invalid("num_clients and shards_per_client must be positive"));
    }
    let shards = num_clients * shards_per_client;
    if data.is_empty() || data.len() % shards != 0 {
        return Err(invalid(format!(
            "{} examples cannot be split into {shards} equal shards",
            data.len()
        )));
    }
    let shard_len = data.len() / shards;

    let mut order = data.all_indices();
    order.sort_by_key(|&i| (data.label(i), i));

    let mut perm: Vec<usize> = (0..shards).collect();
    perm.shuffle(&mut Rng::seed_from_u64(seed));

    let assignments = (0..num_clients)
        .map(|k| {
            let mut idx: Vec<usize> = perm[k * shards_per_client..(k + 1) * shards_per_client]
                .iter()
                .flat_map(|&s| order[s * shard_len..(s + 1) * shard_len].iter().copied())
                .collect();
            idx.sort_unstable();
            idx
        })
        .collect();
    Partition::from_assignments(assignments, data.len())
}

/// Intermediate quantities of a Dirichlet partition.
#[derive(Debug, Clone)]
pub struct DirichletPartition {
    pub partition: Partition,
    /// Labels that appear in the data (rows of `fractions`).
    pub labels: Vec<usize>,
    /// L x N matrix; column k is client k's label mix `q_k`.
    pub fractions: DMatrix<f64>,
    /// QP client sizes before rounding.
    pub sizes: DVector<f64>,
    /// `counts[c][k]`: examples of `labels[c]` given to client k.
    pub counts: Vec<Vec<usize>>,
}

pub fn partition_dirichlet(data: &LabeledDataset, num_clients: usize, alpha: f64, seed: u64) -> Result<Partition> {
    Ok(partition_dirichlet_detailed(data, num_clients, alpha, seed)?.partition)
}

/// Per-client label mixes `q_k ~ Dir(alpha * prior)`, sizes from the balance
/// QP, then largest-remainder rounding per label so label totals are exact.
pub fn partition_dirichlet_detailed(
    data: &LabeledDataset,
    num_clients: usize,
    alpha: f64,
    seed: u64,
) -> Result<DirichletPartition> {
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(invalid(format!("alpha must be positive, got {alpha}")));
    }
    if num_clients == 0 || data.len() < num_clients {
        return Err(invalid(format!(
            "{} examples cannot cover {num_clients} clients",
            data.len()
        )));
    }
    let all_counts = data.label_counts();
    let labels: Vec<usize> = (0..data.num_classes()).filter(|&c| all_counts[c] > 0).collect();
    let totals: Vec<usize> = labels.iter().map(|&c| all_counts[c]).collect();
    let n = data.len() as f64;
    let concentration: Vec<f64> = totals.iter().map(|&t| alpha * t as f64 / n).collect();

    let mut rng = Rng::seed_from_u64(seed);
    let mut fractions = DMatrix::zeros(labels.len(), num_clients);
    for k in 0..num_clients {
        let q = sample_dirichlet(&concentration, &mut rng)?;
        fractions.set_column(k, &DVector::from_vec(q));
    }

    let d = DVector::from_iterator(totals.len(), totals.iter().map(|&t| t as f64));
    let sizes = solve_balance_qp(&fractions, &d)?;

    let mut counts: Vec<Vec<usize>> = (0..labels.len())
        .map(|c| {
            let targets: Vec<f64> = (0..num_clients).map(|k| (fractions[(c, k)] * sizes[k]).max(0.0)).collect();
            largest_remainder(&targets, totals[c])
        })
        .collect();
    fill_empty_clients(&mut counts, &fractions);

    let mut assignments = vec![Vec::new(); num_clients];
    for (c, &label) in labels.iter().enumerate() {
        let mut pool: Vec<usize> = data.all_indices().into_iter().filter(|&i| data.label(i) == label).collect();
        pool.shuffle(&mut rng);
        let mut cursor = 0;
        for (k, &take) in counts[c].iter().enumerate() {
            assignments[k].extend_from_slice(&pool[cursor..cursor + take]);
            cursor += take;
        }
    }
    for a in &mut assignments {
        a.sort_unstable();
    }
    let partition = Partition::from_assignments(assignments, data.len())?;
    Ok(DirichletPartition { partition, labels, fractions, sizes, counts })
}

/// Dirichlet draw computed in log space so tiny concentrations do not
/// underflow every gamma variate to zero.
fn sample_dirichlet(concentration: &[f64], rng: &mut Rng) -> Result<Vec<f64>> {
    let mut logs = Vec::with_capacity(concentration.len());
    for &a in concentration {
        // Gamma(a) = Gamma(a + 1) * U^(1/a)
        let boosted = Gamma::new(a + 1.0, 1.0).map_err(|e| Error::Numeric(format!("gamma({a}): {e}")))?;
        let g: f64 = boosted.sample(rng);
        let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
        logs.push(g.ln() + u.ln() / a);
    }
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    Ok(weights.into_iter().map(|w| w / total).collect())
}

/// Integer apportionment of `targets` summing to exactly `total`.
/// Ties on the fractional part go to the lower index.
fn largest_remainder(targets: &[f64], total: usize) -> Vec<usize> {
    let mut counts: Vec<usize> = targets.iter().map(|t| t.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..targets.len()).collect();
    let frac = |i: usize| targets[i] - targets[i].floor();
    if assigned <= total {
        order.sort_by(|&a, &b| frac(b).total_cmp(&frac(a)).then(a.cmp(&b)));
        for &i in order.iter().cycle().take(total - assigned) {
            counts[i] += 1;
        }
    } else {
        order.sort_by(|&a, &b| frac(a).total_cmp(&frac(b)).then(a.cmp(&b)));
        let mut excess = assigned - total;
        while excess > 0 {
            for &i in &order {
                if excess > 0 && counts[i] > 0 {
                    counts[i] -= 1;
                    excess -= 1;
                }
            }
        }
    }
    counts
}

/// Gives every client left empty by rounding one example of its strongest
/// label, taken from the client holding most of that label.
fn fill_empty_clients(counts: &mut [Vec<usize>], fractions: &DMatrix<f64>) {
    let clients = fractions.ncols();
    for k in 0..clients {
        if counts.iter().any(|row| row[k] > 0) {
            continue;
        }
        let mut labels_by_weight: Vec<usize> = (0..counts.len()).collect();
        labels_by_weight.sort_by(|&a, &b| fractions[(b, k)].total_cmp(&fractions[(a, k)]).then(a.cmp(&b)));
        for c in labels_by_weight {
            let size = |j: usize, counts: &[Vec<usize>]| counts.iter().map(|r| r[j]).sum::<usize>();
            let donor = (0..clients)
                .filter(|&j| j != k && counts[c][j] > 0 && size(j, counts) > 1)
                .max_by(|&a, &b| counts[c][a].cmp(&counts[c][b]).then(b.cmp(&a)));
            if let Some(j) = donor {
                counts[c][j] -= 1;
                counts[c][k] += 1;
                break;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::gen_synthetic;

    fn label_entropy(counts: &[usize]) -> f64 {
        let total: usize = counts.iter().sum();
        counts
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / total as f64;
                -p * p.ln()
            })
            .sum()
    }

    #[test]
    fn one_shard_per_client_is_pure_and_balanced() {
        let data = gen_synthetic(10, 2, 10, 1.0, 0).unwrap();
        let p = partition_shards(&data, 10, 1, 3).unwrap();
        assert!(p.weights().iter().all(|&w| (w - 0.1).abs() < 1e-15));
        for counts in p.label_counts(&data) {
            assert_eq!(counts.iter().sum::<usize>(), 10);
            assert_eq!(label_entropy(&counts), 0.0);
        }
    }

    #[test]
    fn two_shards_per_client_hold_at_most_two_labels() {
        let data = gen_synthetic(10, 2, 200, 1.0, 1).unwrap();
        let p = partition_shards(&data, 100, 2, 5).unwrap();
        assert_eq!(p.num_clients(), 100);
        for counts in p.label_counts(&data) {
            assert!(counts.iter().filter(|&&c| c > 0).count() <= 2);
        }
        assert!(p.sizes().iter().all(|&s| s == 20));
    }

    #[test]
    fn shards_reject_indivisible() {
        let data = gen_synthetic(3, 2, 7, 1.0, 0).unwrap();
        assert!(partition_shards(&data, 2, 2, 0).is_err());
    }

    #[test]
    fn largest_remainder_is_exact() {
        assert_eq!(largest_remainder(&[1.5, 1.5, 1.0], 4), vec![2, 1, 1]);
        assert_eq!(largest_remainder(&[0.2, 0.3, 0.5], 1), vec![0, 0, 1]);
        assert_eq!(largest_remainder(&[2.0, 2.0000001], 3), vec![1, 2]);
        assert_eq!(largest_remainder(&[0.0, 0.0], 0), vec![0, 0]);
    }

    #[test]
    fn dirichlet_large_alpha_tracks_prior() {
        let data = gen_synthetic(10, 2, 400, 1.0, 2).unwrap();
        let detail = partition_dirichlet_detailed(&data, 20, 1e6, 9).unwrap();
        for q in detail.fractions.iter() {
            assert!((q - 0.1).abs() < 0.02, "{q}");
        }
        let per_client = detail.partition.label_counts(&data);
        for c in 0..10 {
            assert_eq!(per_client.iter().map(|row| row[c]).sum::<usize>(), 400);
        }
    }

    #[test]
    fn dirichlet_small_alpha_is_heterogeneous_and_conserves_labels() {
        let data = gen_synthetic(10, 2, 500, 1.0, 4).unwrap();
        let detail = partition_dirichlet_detailed(&data, 100, 0.2, 8).unwrap();
        let p = &detail.partition;
        assert!(detail.sizes.iter().all(|&x| x > 0.0));
        assert!(p.sizes().iter().all(|&s| s >= 1));

        let per_client = p.label_counts(&data);
        for c in 0..10 {
            let assigned: usize = per_client.iter().map(|row| row[c]).sum();
            assert_eq!(assigned, 500);
        }

        let mut significant: Vec<usize> = per_client
            .iter()
            .map(|row| {
                let total: usize = row.iter().sum();
                row.iter().filter(|&&c| c as f64 / total as f64 > 0.05).count()
            })
            .collect();
        significant.sort_unstable();
        assert!(significant[50] <= 3, "median labels per client {}", significant[50]);
    }

    #[test]
    fn dirichlet_is_deterministic() {
        let data = gen_synthetic(5, 2, 100, 1.0, 4).unwrap();
        let a = partition_dirichlet(&data, 20, 0.5, 1).unwrap();
        let b = partition_dirichlet(&data, 20, 0.5, 1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dirichlet_samples_are_simplex_points() {
        let mut rng = Rng::seed_from_u64(0);
        for _ in 0..200 {
            let q = sample_dirichlet(&[0.02; 10], &mut rng).unwrap();
            assert!(q.iter().all(|v| v.is_finite() && *v >= 0.0));
            assert!((q.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
