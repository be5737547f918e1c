//! Checks of the modelling assumptions: normality of loss changes, drift of
//! their covariance across rounds, and structure in the learned embeddings.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::engine::{collect_probe, LossSample, RoundContext, RoundObserver};
use crate::error::{invalid, Result};
use crate::gp::EmbeddingMatrix;
use crate::rng::{indexed_rng, Stream};

pub const SKEW_LIMIT: f64 = 0.5;
pub const EXCESS_KURTOSIS_LIMIT: f64 = 1.0;
pub const NORMALITY_MIN_SAMPLES: usize = 100;

/// Rows of `samples` are observations.
pub fn samples_matrix(samples: &[LossSample]) -> Result<DMatrix<f64>> {
    let n = samples.first().map(|s| s.delta_losses.len()).ok_or_else(|| invalid("no samples"))?;
    if samples.iter().any(|s| s.delta_losses.len() != n) {
        return Err(invalid("samples have different lengths"));
    }
    Ok(DMatrix::from_fn(samples.len(), n, |i, j| samples[i].delta_losses[j]))
}

fn centered(samples: &DMatrix<f64>) -> DMatrix<f64> {
    let mean = samples.row_mean();
    let mut c = samples.clone();
    for mut row in c.row_iter_mut() {
        row -= &mean;
    }
    c
}

/// Unbiased covariance of the rows (`S - 1` denominator).
pub fn sample_covariance(samples: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let s = samples.nrows();
    if s < 2 {
        return Err(invalid("covariance needs at least two samples"));
    }
    let c = centered(samples);
    Ok(c.transpose() * &c / (s - 1) as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    /// S x k scores.
    pub projections: DMatrix<f64>,
    /// Non-increasing.
    pub explained_variance: Vec<f64>,
    /// N x k unit directions.
    pub components: DMatrix<f64>,
}

pub fn pca_components(samples: &DMatrix<f64>, k: usize) -> Result<Pca> {
    let (s, n) = samples.shape();
    if k == 0 || k > s || k > n {
        return Err(invalid(format!("cannot take {k} components of {s} x {n} samples")));
    }
    let c = centered(samples);
    let denom = (s.max(2) - 1) as f64;
    let cov = c.transpose() * &c / denom;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let components = DMatrix::from_fn(n, k, |i, j| eig.eigenvectors[(i, order[j])]);
    let projections = &c * &components;
    let explained_variance = order[..k].iter().map(|&j| eig.eigenvalues[j].max(0.0)).collect();
    Ok(Pca { projections, explained_variance, components })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

pub fn histogram(values: &[f64], bins: usize) -> Histogram {
    let bins = bins.max(1);
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if values.is_empty() {
        return Histogram { edges: vec![0.0; bins + 1], counts: vec![0; bins] };
    }
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let edges = (0..=bins).map(|i| lo + width * i as f64).collect();
    let mut counts = vec![0; bins];
    for &v in values {
        let b = (((v - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    Histogram { edges, counts }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentStats {
    pub explained_variance: f64,
    pub mean: f64,
    pub std: f64,
    pub skewness: f64,
    pub excess_kurtosis: f64,
    pub histogram: Histogram,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalityReport {
    pub num_samples: usize,
    pub components: Vec<ComponentStats>,
    pub pass: bool,
}

/// Mean, population std, skewness and excess kurtosis. Zero-variance data
/// gets skewness and excess kurtosis 0.
pub fn moments(values: &[f64]) -> (f64, f64, f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let m = |p: i32| values.iter().map(|v| (v - mean).powi(p)).sum::<f64>() / n;
    let m2 = m(2);
    let scale = values.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(f64::MIN_POSITIVE);
    if m2.sqrt() <= 1e-12 * scale || m2 == 0.0 {
        return (mean, 0.0, 0.0, 0.0);
    }
    (mean, m2.sqrt(), m(3) / m2.powf(1.5), m(4) / (m2 * m2) - 3.0)
}

pub fn normality_test(samples: &DMatrix<f64>) -> Result<NormalityReport> {
    let s = samples.nrows();
    if s < NORMALITY_MIN_SAMPLES {
        return Err(invalid(format!("normality test needs >= {NORMALITY_MIN_SAMPLES} samples, got {s}")));
    }
    let k = 3.min(samples.ncols());
    let pca = pca_components(samples, k)?;
    let bins = (s as f64).sqrt().ceil() as usize;
    let components: Vec<ComponentStats> = (0..k)
        .map(|j| {
            let col: Vec<f64> = pca.projections.column(j).iter().copied().collect();
            let (mean, std, skewness, excess_kurtosis) = moments(&col);
            ComponentStats {
                explained_variance: pca.explained_variance[j],
                mean,
                std,
                skewness,
                excess_kurtosis,
                histogram: histogram(&col, bins),
                pass: skewness.abs() <= SKEW_LIMIT && excess_kurtosis.abs() <= EXCESS_KURTOSIS_LIMIT,
            }
        })
        .collect();
    let pass = components.iter().all(|c| c.pass);
    Ok(NormalityReport { num_samples: s, components, pass })
}

/// `tr(A'B) / sqrt(tr(A'A) tr(B'B))`.
pub fn covariance_similarity(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(invalid("covariance_similarity needs equal shapes"));
    }
    let (aa, bb) = (a.dot(a), b.dot(b));
    if aa == 0.0 || bb == 0.0 {
        return Err(invalid("covariance_similarity of a zero matrix"));
    }
    Ok(a.dot(b) / (aa * bb).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationarityPoint {
    /// Round of the later probe.
    pub round: usize,
    pub previous_round: usize,
    pub similarity: f64,
    pub samples_per_probe: usize,
    pub low_confidence: bool,
}

/// Similarity of each probe covariance to the one before it. Probes with
/// fewer than `N + 1` samples are flagged low-confidence; a single-sample
/// probe uses the outer product of its raw sample.
pub fn stationarity_series(probes: &[(usize, Vec<LossSample>)]) -> Result<Vec<StationarityPoint>> {
    let covs: Vec<(usize, usize, DMatrix<f64>)> = probes
        .iter()
        .map(|(round, samples)| {
            let m = samples_matrix(samples)?;
            let cov = if m.nrows() >= 2 { sample_covariance(&m)? } else { m.transpose() * &m };
            Ok((*round, m.nrows(), cov))
        })
        .collect::<Result<_>>()?;
    covs.windows(2)
        .map(|w| {
            let (r0, s0, a) = &w[0];
            let (r1, s1, b) = &w[1];
            let n = a.nrows();
            Ok(StationarityPoint {
                round: *r1,
                previous_round: *r0,
                similarity: covariance_similarity(a, b)?,
                samples_per_probe: (*s0).min(*s1),
                low_confidence: (*s0).min(*s1) < n + 1,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeSettings {
    /// Round at which `normality_samples` probes are drawn.
    pub normality_round: Option<usize>,
    pub normality_samples: usize,
    /// Every this many rounds, `stationarity_samples` probes are drawn.
    pub stationarity_interval: Option<usize>,
    pub stationarity_samples: usize,
}

/// Draws diagnostic probes from their own stream; probe models are discarded.
#[derive(Debug, Clone)]
pub struct DiagnosticProbes {
    settings: ProbeSettings,
    seed: u64,
    pub normality: Option<Vec<LossSample>>,
    pub stationarity: Vec<(usize, Vec<LossSample>)>,
}

impl DiagnosticProbes {
    pub fn new(settings: ProbeSettings, seed: u64) -> Self {
        Self { settings, seed, normality: None, stationarity: Vec::new() }
    }

    fn draw(&self, ctx: &mut RoundContext<'_>, count: usize, tag: u64) -> Result<Vec<LossSample>> {
        let mut rng = indexed_rng(self.seed, Stream::Diagnostics, ctx.round() as u64, tag);
        (0..count).map(|_| collect_probe(ctx, &mut rng).map(|(s, _)| s)).collect()
    }
}

impl RoundObserver for DiagnosticProbes {
    fn before_selection(&mut self, ctx: &mut RoundContext<'_>, _: Option<&EmbeddingMatrix>) -> Result<()> {
        let t = ctx.round();
        if self.settings.normality_round == Some(t) && self.settings.normality_samples > 0 {
            self.normality = Some(self.draw(ctx, self.settings.normality_samples, 1)?);
        }
        if let Some(every) = self.settings.stationarity_interval {
            if every > 0 && t % every == 0 && self.settings.stationarity_samples > 0 {
                let samples = self.draw(ctx, self.settings.stationarity_samples, 2)?;
                self.stationarity.push((t, samples));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusteringStatistic {
    pub intra_label: f64,
    pub inter_label: f64,
    pub gap: f64,
}

/// Mean pairwise cosine similarity of normalized embeddings within and
/// across labels.
pub fn clustering_statistic(x: &EmbeddingMatrix, labels: &[usize]) -> Result<ClusteringStatistic> {
    let n = x.num_clients();
    if labels.len() != n {
        return Err(invalid("one label per client required"));
    }
    let u = x.normalized();
    let (mut intra, mut ni, mut inter, mut ne) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..n {
        for j in i + 1..n {
            let c = u.column(i).dot(&u.column(j));
            if labels[i] == labels[j] {
                intra += c;
                ni += 1;
            } else {
                inter += c;
                ne += 1;
            }
        }
    }
    if ni == 0 || ne == 0 {
        return Err(invalid("need both same-label and different-label client pairs"));
    }
    let (intra, inter) = (intra / ni as f64, inter / ne as f64);
    Ok(ClusteringStatistic { intra_label: intra, inter_label: inter, gap: intra - inter })
}

/// 2-D PCA coordinates of the unit-normalized embeddings, one per client.
pub fn project_embeddings(x: &EmbeddingMatrix) -> Result<Vec<[f64; 2]>> {
    let n = x.num_clients();
    let u = x.normalized();
    for (k, col) in u.column_iter().enumerate() {
        if col.iter().all(|v| *v == 0.0) {
            log::warn!("client {k} has a zero embedding; exported at the origin");
        }
    }
    let points = u.transpose();
    let k = 2.min(x.dim()).min(n);
    let scores = if n >= 1 {
        let pca = pca_components(&points, k.max(1))?;
        pca.projections
    } else {
        DMatrix::zeros(0, 2)
    };
    let mut out: Vec<[f64; 2]> = (0..n)
        .map(|i| [scores[(i, 0)], if scores.ncols() > 1 { scores[(i, 1)] } else { 0.0 }])
        .collect();
    for (k, col) in u.column_iter().enumerate() {
        if col.iter().all(|v| *v == 0.0) {
            out[k] = [0.0, 0.0];
        }
    }
    Ok(out)
}

pub fn export_projected_embeddings(
    x: &EmbeddingMatrix,
    dominant_labels: &[usize],
    path: impl AsRef<Path>,
) -> Result<()> {
    if dominant_labels.len() != x.num_clients() {
        return Err(invalid("one label per client required"));
    }
    let points = project_embeddings(x)?;
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["client_id", "dominant_label", "u", "v"])?;
    for (k, p) in points.iter().enumerate() {
        w.write_record([k.to_string(), dominant_labels[k].to_string(), p[0].to_string(), p[1].to_string()])?;
    }
    w.flush()?;
    Ok(())
}
