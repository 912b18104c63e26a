//! k-means with k-means++ seeding and Lloyd iterations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KMeansConfig {
    pub n_clusters: usize,
    pub restarts: usize,
    pub max_iter: usize,
    /// Stop once no center moves farther than this.
    pub tol: f64,
    pub seed: u64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            n_clusters: 10,
            restarts: 5,
            max_iter: 300,
            tol: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    pub centers: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    /// Within-cluster sum of squared distances.
    pub wcss: f64,
    pub iterations: usize,
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn nearest(point: &[f64], centers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centers.iter().enumerate() {
        let d = squared_distance(point, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn plus_plus_init(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>> {
    let mut centers = vec![points[rng.random_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| squared_distance(p, &centers[0])).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "only {} distinct points for {k} clusters",
                centers.len()
            )));
        }
        let mut u = rng.random::<f64>() * total;
        let mut pick = d2.iter().rposition(|&d| d > 0.0).expect("total > 0");
        for (i, &d) in d2.iter().enumerate() {
            if u < d {
                pick = i;
                break;
            }
            u -= d;
        }
        centers.push(points[pick].clone());
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(squared_distance(p, centers.last().expect("just pushed")));
        }
    }
    Ok(centers)
}

fn lloyd(points: &[Vec<f64>], mut centers: Vec<Vec<f64>>, config: &KMeansConfig) -> Result<KMeansFit> {
    let dim = points[0].len();
    let k = centers.len();
    let mut labels = vec![0; points.len()];
    let mut previous = f64::INFINITY;
    let mut iterations = 0;
    loop {
        let mut objective = 0.0;
        for (label, p) in labels.iter_mut().zip(points) {
            let (c, d) = nearest(p, &centers);
            *label = c;
            objective += d;
        }
        if objective > previous * (1.0 + 1e-12) + 1e-12 {
            return Err(Error::ContractViolation(format!(
                "k-means objective increased from {previous} to {objective}"
            )));
        }
        previous = objective;
        if iterations == config.max_iter {
            break;
        }
        iterations += 1;
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (&label, p) in labels.iter().zip(points) {
            counts[label] += 1;
            for (s, x) in sums[label].iter_mut().zip(p) {
                *s += x;
            }
        }
        let mut shift: f64 = 0.0;
        for c in 0..k {
            // an emptied cluster keeps its previous center
            if counts[c] == 0 {
                continue;
            }
            let updated: Vec<f64> = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            shift = shift.max(squared_distance(&updated, &centers[c]).sqrt());
            centers[c] = updated;
        }
        if shift < config.tol {
            // final assignment against the settled centers
            let mut objective = 0.0;
            for (label, p) in labels.iter_mut().zip(points) {
                let (c, d) = nearest(p, &centers);
                *label = c;
                objective += d;
            }
            previous = objective;
            break;
        }
    }
    Ok(KMeansFit {
        centers,
        labels,
        wcss: previous,
        iterations,
    })
}

/// Best of `restarts` k-means++ / Lloyd runs by within-cluster sum of squares.
pub fn kmeans(points: &[Vec<f64>], config: &KMeansConfig) -> Result<KMeansFit> {
    let k = config.n_clusters;
    if k == 0 || config.restarts == 0 {
        return Err(Error::InvalidArgument("k-means needs k > 0 and at least one restart".into()));
    }
    if points.len() < k {
        return Err(Error::InvalidArgument(format!(
            "{} points cannot form {k} clusters",
            points.len()
        )));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim || p.iter().any(|x| !x.is_finite())) {
        return Err(Error::InvalidArgument("k-means points must be finite and equal-length".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut best: Option<KMeansFit> = None;
    for _ in 0..config.restarts {
        let init = plus_plus_init(points, k, &mut rng)?;
        let fit = lloyd(points, init, config)?;
        if best.as_ref().is_none_or(|b| fit.wcss < b.wcss) {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Within-cluster sum of squares for each `k` in `ks`.
pub fn wcss_curve(points: &[Vec<f64>], ks: impl IntoIterator<Item = usize>, config: &KMeansConfig) -> Result<Vec<(usize, f64)>> {
    ks.into_iter()
        .map(|k| {
            let fit = kmeans(points, &KMeansConfig { n_clusters: k, ..*config })?;
            Ok((k, fit.wcss))
        })
        .collect()
}
