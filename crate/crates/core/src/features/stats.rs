//! Embedding statistics describing context/candidate complexity and
//! context-candidate alignment.

use std::collections::BTreeSet;

use indexmap::IndexMap;
use nalgebra::DMatrix;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::EmbeddingDump;
use crate::error::{Error, Result};

pub const COMPLEXITY_FEATURES: [&str; 6] = [
    "ctx_drift_mean",
    "ctx_coherence",
    "cand_pairwise_cos_mean",
    "cand_pairwise_cos_std",
    "cand_cluster_entropy",
    "cand_spectral_entropy",
];

pub const ALIGNMENT_FEATURES: [&str; 5] = [
    "align_centroid_cos",
    "align_max_cos",
    "align_top_margin",
    "align_cos_std",
    "align_softmax_entropy",
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureFlag {
    /// A zero-norm embedding took part in a cosine; that cosine was set to 0.
    ZeroNormVector,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct NamedFeatures {
    pub values: IndexMap<String, f64>,
    pub flags: BTreeSet<FeatureFlag>,
}

impl NamedFeatures {
    fn push(&mut self, name: &str, value: f64) {
        self.values.insert(name.to_string(), value);
    }
}

/// k-means settings for the candidate cluster-size entropy.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KMeansConfig {
    pub max_k: usize,
    pub restarts: usize,
    pub max_iter: usize,
    pub seed: u64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        KMeansConfig {
            max_k: 5,
            restarts: 10,
            max_iter: 100,
            seed: 0x5EED,
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity; `None` when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        None
    } else {
        Some((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
    }
}

fn cos_flagged(a: &[f64], b: &[f64], flags: &mut BTreeSet<FeatureFlag>) -> f64 {
    cosine(a, b).unwrap_or_else(|| {
        flags.insert(FeatureFlag::ZeroNormVector);
        0.0
    })
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = norm(v);
    if n == 0.0 {
        v.to_vec()
    } else {
        v.iter().map(|x| x / n).collect()
    }
}

fn mean_vec(vs: &[Vec<f64>]) -> Vec<f64> {
    let mut acc = vec![0.0; vs.first().map_or(0, Vec::len)];
    for v in vs {
        for (a, x) in acc.iter_mut().zip(v) {
            *a += x;
        }
    }
    let n = vs.len().max(1) as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    acc
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.max(0.0).sqrt())
}

/// Shannon entropy (nats) of a probability vector; zero entries contribute 0.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn kmeans_once(points: &[Vec<f64>], k: usize, max_iter: usize, rng: &mut ChaCha8Rng) -> (Vec<usize>, f64) {
    let n = points.len();
    // k-means++ seeding
    let mut centers = vec![points[rng.random_range(0..n)].clone()];
    while centers.len() < k {
        let d2: Vec<f64> = points
            .iter()
            .map(|p| centers.iter().map(|c| sq_dist(p, c)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, d) in d2.iter().enumerate() {
                if target < *d {
                    idx = i;
                    break;
                }
                target -= d;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        centers.push(points[pick].clone());
    }

    let nearest = |p: &[f64], centers: &[Vec<f64>]| -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for (j, c) in centers.iter().enumerate() {
            let d = sq_dist(p, c);
            if d < best.1 {
                best = (j, d);
            }
        }
        best
    };

    let mut assign: Vec<usize> = points.iter().map(|p| nearest(p, &centers).0).collect();
    for _ in 0..max_iter {
        let dim = points[0].len();
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assign) {
            counts[a] += 1;
            for (s, x) in sums[a].iter_mut().zip(p) {
                *s += x;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                centers[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centers).0).collect();
        if next == assign {
            break;
        }
        assign = next;
    }
    let inertia = points.iter().zip(&assign).map(|(p, &a)| sq_dist(p, &centers[a])).sum();
    (assign, inertia)
}

/// Entropy (nats) of the cluster-size proportions of the best-of-`restarts`
/// k-means run (lowest inertia, earliest run on ties).
pub fn kmeans_cluster_entropy(points: &[Vec<f64>], k: usize, cfg: &KMeansConfig) -> f64 {
    let n = points.len();
    if n == 0 || k <= 1 {
        return 0.0;
    }
    let k = k.min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(Vec<usize>, f64)> = None;
    for _ in 0..cfg.restarts.max(1) {
        let run = kmeans_once(points, k, cfg.max_iter, &mut rng);
        if best.as_ref().is_none_or(|b| run.1 < b.1) {
            best = Some(run);
        }
    }
    let (assign, _) = best.expect("at least one restart");
    let mut counts = vec![0usize; k];
    for a in assign {
        counts[a] += 1;
    }
    let p: Vec<f64> = counts.iter().map(|&c| c as f64 / n as f64).collect();
    entropy(&p)
}

/// Entropy of the normalised eigenvalue spectrum of the sample covariance.
pub fn spectral_entropy(points: &[Vec<f64>]) -> f64 {
    let n = points.len();
    if n < 2 {
        return 0.0;
    }
    let d = points[0].len();
    let mu = mean_vec(points);
    let centered = DMatrix::from_fn(n, d, |i, j| points[i][j] - mu[j]);
    // Nonzero eigenvalues of X^T X and X X^T coincide; decompose the smaller.
    let gram = if n <= d {
        &centered * centered.transpose()
    } else {
        centered.transpose() * &centered
    };
    let eig = gram.symmetric_eigenvalues();
    let lambdas: Vec<f64> = eig.iter().map(|&l| l.max(0.0)).collect();
    let total: f64 = lambdas.iter().sum();
    if total <= 1e-12 * n as f64 {
        return 0.0;
    }
    let p: Vec<f64> = lambdas.iter().map(|l| l / total).collect();
    entropy(&p)
}

/// Context coherence, context drift and candidate dispersion statistics.
///
/// Candidate vectors are L2-normalised before clustering and the spectral
/// decomposition, so every statistic is invariant to per-vector positive
/// rescaling.
pub fn complexity_features(dump: &EmbeddingDump, kmeans: &KMeansConfig) -> Result<NamedFeatures> {
    let n = dump.candidates.len();
    if n < 2 {
        return Err(Error::invalid(format!("`{}` needs at least 2 candidates", dump.instance_id)));
    }
    let mut out = NamedFeatures::default();
    let history: &[Vec<f64>] = dump.history.as_deref().unwrap_or(&[]);

    let drift = if history.len() < 2 {
        0.0
    } else {
        let d: Vec<f64> = history
            .windows(2)
            .map(|w| 1.0 - cos_flagged(&w[0], &w[1], &mut out.flags))
            .collect();
        mean_std(&d).0
    };
    let coherence = if history.len() <= 1 {
        1.0
    } else {
        let mut sims = Vec::new();
        for i in 0..history.len() {
            for j in i + 1..history.len() {
                sims.push(cos_flagged(&history[i], &history[j], &mut out.flags));
            }
        }
        mean_std(&sims).0
    };

    let mut sims = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            sims.push(cos_flagged(&dump.candidates[i], &dump.candidates[j], &mut out.flags));
        }
    }
    let (cos_mean, cos_std) = mean_std(&sims);

    let units: Vec<Vec<f64>> = dump.candidates.iter().map(|v| unit(v)).collect();
    let k = kmeans.max_k.min(n - 1);
    let cluster = kmeans_cluster_entropy(&units, k, kmeans);
    let spectral = spectral_entropy(&units);

    for (name, v) in COMPLEXITY_FEATURES
        .iter()
        .zip([drift, coherence, cos_mean, cos_std, cluster, spectral])
    {
        out.push(name, v);
    }
    Ok(out)
}

/// The context vector used for alignment: the query embedding for IR, the
/// mean of unit-normalised history embeddings for Rec.
pub fn context_vector(dump: &EmbeddingDump) -> Result<Vec<f64>> {
    match (&dump.context, &dump.history) {
        (Some(c), _) => Ok(c.clone()),
        (None, Some(h)) if !h.is_empty() => {
            let units: Vec<Vec<f64>> = h.iter().map(|v| unit(v)).collect();
            Ok(mean_vec(&units))
        }
        _ => Err(Error::invalid(format!("`{}` has no context embedding", dump.instance_id))),
    }
}

/// How strongly and how decisively the candidates align with the context.
pub fn alignment_features(dump: &EmbeddingDump) -> Result<NamedFeatures> {
    let n = dump.candidates.len();
    if n < 2 {
        return Err(Error::invalid(format!("`{}` needs at least 2 candidates", dump.instance_id)));
    }
    let mut out = NamedFeatures::default();
    let ctx = context_vector(dump)?;
    let cos: Vec<f64> = dump
        .candidates
        .iter()
        .map(|c| cos_flagged(&ctx, c, &mut out.flags))
        .collect();
    let units: Vec<Vec<f64>> = dump.candidates.iter().map(|v| unit(v)).collect();
    let centroid = cos_flagged(&ctx, &mean_vec(&units), &mut out.flags);

    let mut sorted = cos.clone();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let (_, std) = mean_std(&cos);
    let values = [
        centroid,
        sorted[0],
        sorted[0] - sorted[1],
        std,
        entropy(&softmax(&cos)),
    ];
    for (name, v) in ALIGNMENT_FEATURES.iter().zip(values) {
        out.push(name, v);
    }
    Ok(out)
}
