//! Classical reference clusterers.

use std::collections::BTreeMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{misclassification_rate, SetClusterer};
use crate::data::{Family, LabeledSet};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DbscanParams {
    pub eps: f64,
    pub min_pts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "name")]
pub enum Baseline {
    /// Lloyd iterations from k-means++ seeds, given the true `k`.
    Kmeans { restarts: usize },
    /// Parameters per generator family; `fallback` covers families without an entry.
    Dbscan {
        per_family: BTreeMap<Family, DbscanParams>,
        fallback: DbscanParams,
    },
    /// Uniform labels over the true `k`.
    Random,
}

fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)
}

/// Lloyd's algorithm with k-means++ seeding; keeps the lowest-inertia restart.
pub fn kmeans(points: &[[f64; 2]], k: usize, restarts: usize, seed: u64) -> Result<Vec<usize>> {
    let n = points.len();
    if k < 1 || k > n {
        return Err(Error::InvalidParameter(format!("k-means needs 1 <= k <= n, got k={k}, n={n}")));
    }
    if restarts < 1 {
        return Err(Error::InvalidParameter("k-means needs at least one restart".into()));
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    for r in 0..restarts as u64 {
        let mut rng = seed::rng(seed::child(seed, r));
        let mut centres = vec![points[rng.random_range(0..n)]];
        while centres.len() < k {
            let d: Vec<f64> = points
                .iter()
                .map(|&p| centres.iter().map(|&c| dist2(p, c)).fold(f64::INFINITY, f64::min))
                .collect();
            let total: f64 = d.iter().sum();
            let next = if total > 0.0 {
                let mut u = rng.random_range(0.0..total);
                d.iter()
                    .position(|&v| {
                        u -= v;
                        u < 0.0
                    })
                    .unwrap_or(n - 1)
            } else {
                rng.random_range(0..n)
            };
            centres.push(points[next]);
        }
        let mut labels = vec![0usize; n];
        for _ in 0..100 {
            let mut changed = false;
            for (i, &p) in points.iter().enumerate() {
                let mut bi = 0;
                for c in 1..k {
                    if dist2(p, centres[c]) < dist2(p, centres[bi]) {
                        bi = c;
                    }
                }
                if labels[i] != bi {
                    labels[i] = bi;
                    changed = true;
                }
            }
            let mut sums = vec![[0.0f64; 2]; k];
            let mut counts = vec![0usize; k];
            for (i, &p) in points.iter().enumerate() {
                sums[labels[i]][0] += p[0];
                sums[labels[i]][1] += p[1];
                counts[labels[i]] += 1;
            }
            for c in 0..k {
                if counts[c] > 0 {
                    centres[c] = [sums[c][0] / counts[c] as f64, sums[c][1] / counts[c] as f64];
                }
            }
            if !changed {
                break;
            }
        }
        let inertia: f64 = points.iter().zip(&labels).map(|(&p, &l)| dist2(p, centres[l])).sum();
        if best.as_ref().is_none_or(|(b, _)| inertia < *b) {
            best = Some((inertia, labels));
        }
    }
    Ok(best.expect("at least one restart").1)
}

/// DBSCAN; noise points share one extra label.
pub fn dbscan(points: &[[f64; 2]], params: DbscanParams) -> Result<Vec<usize>> {
    if !(params.eps > 0.0) || params.min_pts < 1 {
        return Err(Error::InvalidParameter(format!(
            "DBSCAN needs eps > 0 and min_pts >= 1, got eps={}, min_pts={}",
            params.eps, params.min_pts
        )));
    }
    let n = points.len();
    let eps2 = params.eps * params.eps;
    let neighbours: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| dist2(points[i], points[j]) <= eps2).collect())
        .collect();
    let core: Vec<bool> = neighbours.iter().map(|nb| nb.len() >= params.min_pts).collect();
    let mut labels: Vec<Option<usize>> = vec![None; n];
    let mut next = 0;
    for i in 0..n {
        if labels[i].is_some() || !core[i] {
            continue;
        }
        labels[i] = Some(next);
        let mut stack = vec![i];
        while let Some(p) = stack.pop() {
            for &q in &neighbours[p] {
                if labels[q].is_none() {
                    labels[q] = Some(next);
                    if core[q] {
                        stack.push(q);
                    }
                }
            }
        }
        next += 1;
    }
    Ok(labels.into_iter().map(|l| l.unwrap_or(next)).collect())
}

pub fn random_labels(n: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 1 {
        return Err(Error::InvalidParameter("random baseline needs k >= 1".into()));
    }
    let mut rng = seed::rng(seed);
    Ok((0..n).map(|_| rng.random_range(0..k)).collect())
}

pub fn run_baseline(baseline: &Baseline, set: &LabeledSet, seed: u64) -> Result<Vec<usize>> {
    if set.is_empty() {
        return Err(Error::Empty("set"));
    }
    match baseline {
        Baseline::Kmeans { restarts } => kmeans(&set.points, set.k, *restarts, seed),
        Baseline::Dbscan { per_family, fallback } => dbscan(&set.points, *per_family.get(&set.family).unwrap_or(fallback)),
        Baseline::Random => random_labels(set.len(), set.k, seed),
    }
}

/// Grid-searches DBSCAN parameters minimizing mean MR on `sets` (validation episodes),
/// separately for every family present.
pub fn tune_dbscan(sets: &[LabeledSet]) -> Result<BTreeMap<Family, DbscanParams>> {
    const EPS: [f64; 12] = [0.02, 0.04, 0.06, 0.08, 0.1, 0.13, 0.16, 0.2, 0.25, 0.3, 0.4, 0.5];
    const MIN_PTS: [usize; 5] = [1, 2, 3, 4, 6];
    let mut by_family: BTreeMap<Family, Vec<&LabeledSet>> = BTreeMap::new();
    for s in sets {
        by_family.entry(s.family).or_default().push(s);
    }
    let mut out = BTreeMap::new();
    for (family, group) in by_family {
        let mut best: Option<(f64, DbscanParams)> = None;
        for &eps in &EPS {
            for &min_pts in &MIN_PTS {
                let params = DbscanParams { eps, min_pts };
                let mut total = 0.0;
                for s in &group {
                    total += misclassification_rate(&dbscan(&s.points, params)?, &s.labels)?;
                }
                if best.is_none_or(|(b, _)| total < b) {
                    best = Some((total, params));
                }
            }
        }
        out.insert(family, best.expect("non-empty grid").1);
    }
    Ok(out)
}

/// Adapts a [`Baseline`] to the evaluation loop; `k_pred` is the number of distinct labels.
#[derive(Debug, Clone)]
pub struct BaselineClusterer {
    pub baseline: Baseline,
}

impl BaselineClusterer {
    pub fn new(baseline: Baseline) -> Self {
        Self { baseline }
    }
}

impl SetClusterer for BaselineClusterer {
    fn name(&self) -> String {
        match self.baseline {
            Baseline::Kmeans { .. } => "kmeans",
            Baseline::Dbscan { .. } => "dbscan",
            Baseline::Random => "random",
        }
        .into()
    }

    fn cluster(&self, set: &LabeledSet, seed: u64) -> Result<(usize, Vec<usize>)> {
        let labels = run_baseline(&self.baseline, set, seed)?;
        let distinct: std::collections::BTreeSet<usize> = labels.iter().copied().collect();
        Ok((distinct.len(), labels))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn two_blobs(seed: u64) -> (Vec<[f64; 2]>, Vec<usize>) {
        let mut rng = seed::rng(seed);
        let std = 0.05;
        let mut pts = Vec::new();
        let mut labels = Vec::new();
        for i in 0..30 {
            let c = if i % 2 == 0 { [-0.5, 0.0] } else { [0.5, 0.0] };
            let nx: f64 = StandardNormal.sample(&mut rng);
            let ny: f64 = StandardNormal.sample(&mut rng);
            pts.push([c[0] + std * nx, c[1] + std * ny]);
            labels.push(i % 2);
        }
        (pts, labels)
    }

    /// Optimal 2-partition by exhaustive search over all splits (small n).
    fn brute_two_means(points: &[[f64; 2]]) -> Vec<usize> {
        let n = points.len();
        let mut best = (f64::INFINITY, vec![0; n]);
        for mask in 1u32..(1 << (n - 1)) {
            let labels: Vec<usize> = (0..n).map(|i| ((mask >> i) & 1) as usize).collect();
            let mut cost = 0.0;
            for c in 0..2 {
                let members: Vec<_> = points.iter().zip(&labels).filter(|(_, &l)| l == c).map(|(p, _)| *p).collect();
                let m = members.len() as f64;
                let mean = [members.iter().map(|p| p[0]).sum::<f64>() / m, members.iter().map(|p| p[1]).sum::<f64>() / m];
                cost += members.iter().map(|&p| dist2(p, mean)).sum::<f64>();
            }
            if cost < best.0 {
                best = (cost, labels);
            }
        }
        best.1
    }

    #[test]
    fn kmeans_single_cluster() {
        let (pts, _) = two_blobs(1);
        assert!(kmeans(&pts, 1, 3, 0).unwrap().iter().all(|&l| l == 0));
        assert!(kmeans(&pts, 0, 3, 0).is_err());
    }

    #[test]
    fn kmeans_separated_blobs() {
        for s in 0..5 {
            let (pts, truth) = two_blobs(s);
            let labels = kmeans(&pts, 2, 5, s).unwrap();
            assert_eq!(misclassification_rate(&labels, &truth).unwrap(), 0.0);
            let small = &pts[..12];
            let brute = brute_two_means(small);
            let km = kmeans(small, 2, 5, s).unwrap();
            assert_eq!(misclassification_rate(&km, &brute).unwrap(), 0.0);
        }
    }

    #[test]
    fn dbscan_finds_blobs_and_noise() {
        let (mut pts, truth) = two_blobs(3);
        let labels = dbscan(&pts, DbscanParams { eps: 0.2, min_pts: 3 }).unwrap();
        assert_eq!(misclassification_rate(&labels, &truth).unwrap(), 0.0);
        pts.push([5.0, 5.0]);
        let labels = dbscan(&pts, DbscanParams { eps: 0.2, min_pts: 3 }).unwrap();
        assert_eq!(labels[30], 2);
        assert!(dbscan(&pts, DbscanParams { eps: 0.0, min_pts: 3 }).is_err());
        assert!(dbscan(&pts, DbscanParams { eps: -1.0, min_pts: 3 }).is_err());
    }

    #[test]
    fn random_labels_within_range() {
        let l = random_labels(100, 3, 4).unwrap();
        assert!(l.iter().all(|&v| v < 3));
        assert_eq!(l, random_labels(100, 3, 4).unwrap());
        assert!(random_labels(5, 0, 0).is_err());
    }
}
