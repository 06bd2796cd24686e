//! Evaluation metrics over evaluator feature vectors and joint positions.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::RotationMatrix3;
use crate::Vec3;

pub const COVARIANCE_JITTER: f64 = 1e-6;
pub const DEFAULT_POOL_SIZE: usize = 32;
pub const DEFAULT_DIVERSITY_PAIRS: usize = 300;

fn check_rows(feats: &[Vec<f64>], min: usize) -> Result<usize> {
    if feats.len() < min {
        return Err(Error::InsufficientSamples {
            needed: min,
            found: feats.len(),
        });
    }
    let k = feats[0].len();
    if feats.iter().any(|f| f.len() != k) {
        return Err(Error::shape(format!("features of width {k}"), "ragged rows"));
    }
    Ok(k)
}

fn mean_cov(feats: &[Vec<f64>], k: usize) -> (DVector<f64>, DMatrix<f64>) {
    let n = feats.len() as f64;
    let mut mu = DVector::zeros(k);
    for f in feats {
        mu += DVector::from_column_slice(f);
    }
    mu /= n;
    let mut cov = DMatrix::zeros(k, k);
    for f in feats {
        let d = DVector::from_column_slice(f) - &mu;
        cov += &d * d.transpose();
    }
    cov /= n - 1.0;
    for i in 0..k {
        cov[(i, i)] += COVARIANCE_JITTER;
    }
    (mu, cov)
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let vals = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&vals) * eig.eigenvectors.transpose()
}

/// Trace of `(Σa Σb)^{1/2}` through the symmetric form `Σa^{1/2} Σb Σa^{1/2}`.
fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let ra = sym_sqrt(a);
    let inner = &ra * b * &ra;
    let sym = (&inner + inner.transpose()) * 0.5;
    SymmetricEigen::new(sym).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum()
}

/// Fréchet distance between Gaussian fits of two feature sets.
pub fn fid(feats_a: &[Vec<f64>], feats_b: &[Vec<f64>]) -> Result<f64> {
    let k = check_rows(feats_a, 2)?;
    let kb = check_rows(feats_b, 2)?;
    if k != kb {
        return Err(Error::shape(k, kb));
    }
    let (mu_a, cov_a) = mean_cov(feats_a, k);
    let (mu_b, cov_b) = mean_cov(feats_b, k);
    let mean_term = (&mu_a - &mu_b).norm_squared();
    // symmetrize the cross term so fid(a, b) == fid(b, a) up to rounding
    let cross = 0.5 * (trace_sqrt_product(&cov_a, &cov_b) + trace_sqrt_product(&cov_b, &cov_a));
    Ok((mean_term + cov_a.trace() + cov_b.trace() - 2.0 * cross).max(0.0))
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Fraction of motions whose paired text ranks within `top_k` among itself
/// and `pool_size − 1` distractor texts. Each motion draws its distractors
/// as a prefix of its own seeded permutation, so larger pools are supersets.
pub fn r_precision(
    motion_embs: &[Vec<f64>],
    text_embs: &[Vec<f64>],
    pool_size: usize,
    top_k: usize,
    seed: u64,
) -> Result<f64> {
    let n = motion_embs.len();
    if n != text_embs.len() {
        return Err(Error::shape(n, text_embs.len()));
    }
    if pool_size == 0 || pool_size > n {
        return Err(Error::InvalidArgument(format!("pool of {pool_size} exceeds {n} pairs")));
    }
    let mut hits = 0usize;
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        others.shuffle(&mut rng);
        let own = dist(&motion_embs[i], &text_embs[i]);
        let better = others[..pool_size - 1]
            .iter()
            .filter(|&&j| dist(&motion_embs[i], &text_embs[j]) < own)
            .count();
        if better < top_k {
            hits += 1;
        }
    }
    Ok(hits as f64 / n as f64)
}

/// Mean Euclidean distance between paired motion and text embeddings.
pub fn mm_dist(motion_embs: &[Vec<f64>], text_embs: &[Vec<f64>]) -> Result<f64> {
    if motion_embs.len() != text_embs.len() {
        return Err(Error::shape(motion_embs.len(), text_embs.len()));
    }
    if motion_embs.is_empty() {
        return Err(Error::InsufficientSamples { needed: 1, found: 0 });
    }
    let total: f64 = motion_embs.iter().zip(text_embs).map(|(m, t)| dist(m, t)).sum();
    Ok(total / motion_embs.len() as f64)
}

/// Mean distance over disjoint random pairs; the pair count is capped at `n / 2`.
pub fn diversity(feats: &[Vec<f64>], n_pairs: usize, seed: u64) -> Result<f64> {
    check_rows(feats, 2)?;
    let pairs = n_pairs.min(feats.len() / 2).max(1);
    let mut idx: Vec<usize> = (0..feats.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let total: f64 = (0..pairs).map(|p| dist(&feats[idx[2 * p]], &feats[idx[2 * p + 1]])).sum();
    Ok(total / pairs as f64)
}

/// Mean per-joint position error over `frames × joints` arrays.
pub fn mpjpe(gt: &[Vec<Vec3>], recon: &[Vec<Vec3>]) -> Result<f64> {
    if gt.len() != recon.len() || gt.iter().zip(recon).any(|(a, b)| a.len() != b.len()) {
        return Err(Error::shape("matching frames and joints", "mismatch"));
    }
    let count: usize = gt.iter().map(|f| f.len()).sum();
    if count == 0 {
        return Err(Error::InsufficientSamples { needed: 1, found: 0 });
    }
    let total: f64 = gt
        .iter()
        .zip(recon)
        .flat_map(|(a, b)| a.iter().zip(b).map(|(p, q)| (p - q).norm()))
        .sum();
    Ok(total / count as f64)
}

/// Mean geodesic angle between ground-truth and reconstructed relative root
/// rotations, over every ordered agent pair and frame. Inputs are indexed
/// `[agent][frame]`.
pub fn mroe(gt: &[Vec<RotationMatrix3>], recon: &[Vec<RotationMatrix3>]) -> Result<f64> {
    if gt.len() != recon.len() || gt.len() < 2 {
        return Err(Error::shape("at least two agents on both sides", format!("{} vs {}", gt.len(), recon.len())));
    }
    let frames = gt[0].len();
    if gt.iter().chain(recon).any(|a| a.len() != frames) || frames == 0 {
        return Err(Error::shape(frames, "ragged frames"));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for a in 0..gt.len() {
        for b in 0..gt.len() {
            if a == b {
                continue;
            }
            for t in 0..frames {
                let rel_gt = gt[a][t].transpose() * gt[b][t];
                let rel_rc = recon[a][t].transpose() * recon[b][t];
                total += rel_gt.angle_to(&rel_rc);
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub metric: String,
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub repeats: usize,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricTable {
    pub rows: Vec<MetricSummary>,
}

pub const TABLE_COLUMNS: [&str; 4] = ["R@Top3", "FID", "MM Dist", "Diversity"];

impl MetricTable {
    pub fn get(&self, metric: &str) -> Option<&MetricSummary> {
        self.rows.iter().find(|r| r.metric == metric)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Human-readable table, `mean ±half-width` per metric.
    pub fn render(&self) -> String {
        let mut header = String::new();
        let mut values = String::new();
        for r in &self.rows {
            let cell = format!("{:.3} ±{:.3}", r.mean, (r.ci_high - r.ci_low) / 2.0);
            let w = r.metric.len().max(cell.len()) + 2;
            let _ = write!(header, "{:>w$}", r.metric);
            let _ = write!(values, "{:>w$}", cell);
        }
        format!("{header}\n{values}\n")
    }
}

/// Mean and 95% interval (`±1.96·stderr`) of each metric over seeded repeats.
pub fn eval_protocol<F>(seeds: &[u64], mut run: F) -> Result<MetricTable>
where
    F: FnMut(u64) -> Result<BTreeMap<String, f64>>,
{
    if seeds.is_empty() {
        return Err(Error::InsufficientSamples { needed: 1, found: 0 });
    }
    let mut samples: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut order: Vec<String> = Vec::new();
    for &seed in seeds {
        let values = run(seed).map_err(|e| Error::InvalidArgument(format!("repeat with seed {seed} failed: {e}")))?;
        for (k, v) in values {
            if !samples.contains_key(&k) {
                order.push(k.clone());
            }
            samples.entry(k).or_default().push(v);
        }
    }
    // report the benchmark columns first
    order.sort_by_key(|k| TABLE_COLUMNS.iter().position(|c| c == k).unwrap_or(usize::MAX));
    let rows = order
        .into_iter()
        .map(|metric| {
            let xs = &samples[&metric];
            let n = xs.len() as f64;
            let mean = xs.iter().sum::<f64>() / n;
            let half = if xs.len() > 1 {
                let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
                1.96 * (var / n).sqrt()
            } else {
                0.0
            };
            MetricSummary {
                metric,
                mean,
                ci_low: mean - half,
                ci_high: mean + half,
                repeats: xs.len(),
                seeds: seeds.to_vec(),
            }
        })
        .collect();
    Ok(MetricTable { rows })
}
