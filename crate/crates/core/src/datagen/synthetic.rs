use rand::Rng as _;
use rand::SeedableRng;
use rand_distr::StandardNormal;

use super::LabeledDataset;
use crate::error::{invalid, Result};
use crate::rng::Rng;

const PLACEMENT_TRIES: usize = 200;

/// Isotropic unit-variance Gaussian blobs, one mean per class, class-major order.
pub fn gen_synthetic(
    num_classes: usize,
    dim: usize,
    per_class: usize,
    class_separation: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    Ok(gen_synthetic_split(num_classes, dim, per_class, 0, class_separation, seed)?.0)
}

/// Like [`gen_synthetic`] but also draws `test_per_class` held-out examples
/// per class from the same class means.
pub fn gen_synthetic_split(
    num_classes: usize,
    dim: usize,
    per_class: usize,
    test_per_class: usize,
    class_separation: f64,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    if num_classes < 2 {
        return Err(invalid(format!("num_classes must be >= 2, got {num_classes}")));
    }
    if dim < 2 {
        return Err(invalid(format!("dim must be >= 2, got {dim}")));
    }
    if per_class < 1 {
        return Err(invalid("per_class must be >= 1"));
    }
    if !(class_separation.is_finite() && class_separation >= 0.0) {
        return Err(invalid(format!("class_separation must be finite and >= 0, got {class_separation}")));
    }

    let mut rng = Rng::seed_from_u64(seed);
    let means = place_means(num_classes, dim, class_separation, &mut rng);
    let train = draw(&means, dim, per_class, &mut rng)?;
    let test = draw(&means, dim, test_per_class, &mut rng)?;
    Ok((train, test))
}

fn place_means(num_classes: usize, dim: usize, sep: f64, rng: &mut Rng) -> Vec<Vec<f64>> {
    let mut radius = (sep / std::f64::consts::SQRT_2).max(1e-3);
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(num_classes);
    while means.len() < num_classes {
        let mut placed = false;
        for _ in 0..PLACEMENT_TRIES {
            let candidate = random_direction(dim, rng)
                .into_iter()
                .map(|v| v * radius)
                .collect::<Vec<_>>();
            if means.iter().all(|m| distance(m, &candidate) >= sep) {
                means.push(candidate);
                placed = true;
                break;
            }
        }
        if !placed {
            radius *= 1.1;
        }
    }
    means
}

fn random_direction(dim: usize, rng: &mut Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn draw(means: &[Vec<f64>], dim: usize, per_class: usize, rng: &mut Rng) -> Result<LabeledDataset> {
    let mut features = Vec::with_capacity(means.len() * per_class * dim);
    let mut labels = Vec::with_capacity(means.len() * per_class);
    for (c, mean) in means.iter().enumerate() {
        for _ in 0..per_class {
            features.extend(mean.iter().map(|m| m + rng.sample::<f64, _>(StandardNormal)));
            labels.push(c);
        }
    }
    LabeledDataset::new(features, dim, labels, means.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_instance() {
        let d = gen_synthetic(2, 2, 1, 4.0, 0).unwrap();
        assert_eq!(d.len(), 2);
        let mut labels = d.labels().to_vec();
        labels.sort();
        assert_eq!(labels, vec![0, 1]);
    }

    #[test]
    fn counts_per_label() {
        let d = gen_synthetic(10, 20, 100, 3.0, 7).unwrap();
        assert_eq!(d.len(), 1000);
        assert_eq!(d.label_counts(), vec![100; 10]);
    }

    #[test]
    fn deterministic() {
        let a = gen_synthetic(3, 5, 10, 2.0, 11).unwrap();
        let b = gen_synthetic(3, 5, 10, 2.0, 11).unwrap();
        assert_eq!(a.features().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                   b.features().iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        assert_eq!(a.labels(), b.labels());
    }

    #[test]
    fn means_respect_separation() {
        let mut rng = Rng::seed_from_u64(3);
        for &(k, dim, sep) in &[(10usize, 2usize, 3.0), (10, 20, 3.0), (4, 3, 10.0)] {
            let means = place_means(k, dim, sep, &mut rng);
            for i in 0..k {
                for j in 0..i {
                    assert!(distance(&means[i], &means[j]) >= sep);
                }
            }
        }
    }

    #[test]
    fn rejects_bad_sizes() {
        assert!(gen_synthetic(1, 2, 1, 1.0, 0).is_err());
        assert!(gen_synthetic(2, 1, 1, 1.0, 0).is_err());
        assert!(gen_synthetic(2, 2, 0, 1.0, 0).is_err());
    }
}
