//! Training objective.
//!
//! With `P_ij(k) = sum_l P(l|x_i,k) P(l|x_j,k)` and `P_ij = sum_k P(k) P_ij(k)`:
//!
//! ```text
//! L_ca  = -2 / (n (n - 1)) * sum_{i<j} [phi1 y_ij log P_ij + phi2 (1 - y_ij) log(1 - P_ij)]
//! L_cc  = -log P(k_true)
//! L_tot = L_cc + lambda * L_ca
//! ```
//!
//! `phi1 = c sqrt(1 - phi)`, `phi2 = c sqrt(phi)` with `phi1 + phi2 = 2`, where `phi` is
//! the prior probability that two elements of a training set share a cluster.
//! Probabilities are clamped to `[EPS, 1 - EPS]` before every log.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{PairwiseLabels, SizePolicy};
use crate::error::{Error, Result};
use crate::model::{ClusteringOutput, OutputGrad};
use crate::real::Real;

pub const EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub phi: f64,
    pub phi1: f64,
    pub phi2: f64,
    pub c: f64,
}

impl LossWeights {
    pub fn from_phi(phi: f64) -> Result<Self> {
        if !(phi > 0.0 && phi < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "same-cluster prior phi={phi} is degenerate (needs 0 < phi < 1)"
            )));
        }
        let (a, b) = ((1.0 - phi).sqrt(), phi.sqrt());
        let c = 2.0 / (a + b);
        Ok(Self {
            phi,
            phi1: c * a,
            phi2: c * b,
            c,
        })
    }

    /// Unit weights on both pair classes.
    pub fn unweighted() -> Self {
        Self {
            phi: 0.5,
            phi1: 1.0,
            phi2: 1.0,
            c: 2.0f64.sqrt(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub l_ca: f64,
    pub l_cc: f64,
    pub lambda: f64,
    pub l_tot: f64,
}

/// Partition-size model under which the same-cluster prior is taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorModel {
    /// Independent uniform assignment without the non-empty condition:
    /// `phi = (1 / k_max) sum_k 1 / k`.
    IndependentUniform,
    /// Independent uniform assignment redrawn until no cluster is empty (what the
    /// generator does); `P(same | k) = S(n-1, k) / S(n, k)` with Stirling numbers.
    IndependentUniformNonEmpty,
    /// Cluster sizes differ by at most one.
    Balanced,
}

impl PriorModel {
    pub fn for_generator(policy: SizePolicy) -> Self {
        match policy {
            SizePolicy::IndependentUniform => PriorModel::IndependentUniformNonEmpty,
            SizePolicy::Balanced => PriorModel::Balanced,
        }
    }

    /// Probability that two fixed distinct elements share a cluster, given `k`.
    pub fn same_cluster_given_k(self, n: usize, k: usize) -> f64 {
        match self {
            PriorModel::IndependentUniform => 1.0 / k as f64,
            PriorModel::IndependentUniformNonEmpty => stirling_ratio(n, k),
            PriorModel::Balanced => {
                let (q, r) = (n / k, n % k);
                let pairs = |s: usize| (s * s.saturating_sub(1)) as f64;
                let same = r as f64 * pairs(q + 1) + (k - r) as f64 * pairs(q);
                same / (n * (n - 1)) as f64
            }
        }
    }
}

/// `S(n-1, k) / S(n, k)` through the inclusion-exclusion sums scaled by `k^-n`.
fn stirling_ratio(n: usize, k: usize) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    let mut binom = 1.0;
    for j in 0..=k {
        if j > 0 {
            binom *= (k - j + 1) as f64 / j as f64;
        }
        let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
        let base = 1.0 - j as f64 / k as f64;
        num += sign * binom * base.powi(n as i32 - 1);
        den += sign * binom * base.powi(n as i32);
    }
    num / (k as f64 * den)
}

/// Same-cluster prior for `k ~ Uniform{1..k_max}` and the derived pair weights.
pub fn class_balance_weights(n: usize, k_max: usize, model: PriorModel) -> Result<LossWeights> {
    if k_max < 2 {
        return Err(Error::InvalidParameter(format!(
            "k_max={k_max} makes phi = 1 and the weighting degenerate"
        )));
    }
    if n < 2 {
        return Err(Error::InvalidParameter(format!("n={n} has no pairs")));
    }
    if model != PriorModel::IndependentUniform && n < k_max {
        return Err(Error::InvalidK { k: k_max, n, k_max });
    }
    let phi = (1..=k_max).map(|k| model.same_cluster_given_k(n, k)).sum::<f64>() / k_max as f64;
    LossWeights::from_phi(phi)
}

fn check_index(i: usize, n: usize) -> Result<()> {
    if i >= n {
        return Err(Error::IndexOutOfRange { index: i, n });
    }
    Ok(())
}

fn check_pair(i: usize, j: usize, n: usize) -> Result<()> {
    check_index(i, n)?;
    check_index(j, n)?;
    if i == j {
        return Err(Error::InvalidParameter("pair probability needs i != j".into()));
    }
    Ok(())
}

pub fn pair_prob_given_k<T: Real>(out: &ClusteringOutput<T>, i: usize, j: usize, k: usize) -> Result<T> {
    check_pair(i, j, out.n())?;
    if k < 1 || k > out.k_max() {
        return Err(Error::IndexOutOfRange { index: k, n: out.k_max() });
    }
    Ok(out.assignment(i, k).dot(&out.assignment(j, k)))
}

pub fn pair_prob<T: Real>(out: &ClusteringOutput<T>, i: usize, j: usize) -> Result<T> {
    check_pair(i, j, out.n())?;
    let mut total = T::zero();
    for k in 1..=out.k_max() {
        total += out.count_dist[k - 1] * out.assignment(i, k).dot(&out.assignment(j, k));
    }
    Ok(total)
}

/// All `P_ij` at once; the diagonal is meaningless and left as computed.
pub fn pair_prob_matrix<T: Real>(out: &ClusteringOutput<T>) -> Array2<T> {
    let n = out.n();
    let mut p = Array2::<T>::zeros((n, n));
    for (k_idx, a) in out.assignments.iter().enumerate() {
        p.scaled_add(out.count_dist[k_idx], &a.dot(&a.t()));
    }
    p
}

fn clamp_prob<T: Real>(p: T) -> (T, bool) {
    let eps = T::from_f64_lossy(EPS);
    let hi = T::one() - eps;
    if p < eps {
        (eps, true)
    } else if p > hi {
        (hi, true)
    } else {
        (p, false)
    }
}

fn check_labels<T: Real>(out: &ClusteringOutput<T>, y: &PairwiseLabels) -> Result<usize> {
    let n = out.n();
    if y.n() != n {
        return Err(Error::LengthMismatch { pred: n, truth: y.n() });
    }
    if n < 2 {
        return Err(Error::SequenceTooShort { min: 2, actual: n });
    }
    Ok(n)
}

/// Weighted pairwise binary cross-entropy over all `i < j`.
pub fn assignment_loss<T: Real>(out: &ClusteringOutput<T>, y: &PairwiseLabels, w: &LossWeights) -> Result<T> {
    let n = check_labels(out, y)?;
    let p = pair_prob_matrix(out);
    let (phi1, phi2) = (T::from_f64_lossy(w.phi1), T::from_f64_lossy(w.phi2));
    let mut acc = T::zero();
    for i in 0..n {
        for j in i + 1..n {
            let (pij, _) = clamp_prob(p[[i, j]]);
            acc += if y.same(i, j) {
                phi1 * pij.ln()
            } else {
                phi2 * (T::one() - pij).ln()
            };
        }
    }
    Ok(-T::from_f64_lossy(2.0 / (n * (n - 1)) as f64) * acc)
}

/// `-log P(true_k)` with `P(true_k)` clamped below at `EPS`.
pub fn count_loss<T: Real>(count_dist: ndarray::ArrayView1<T>, true_k: usize) -> Result<T> {
    if true_k < 1 || true_k > count_dist.len() {
        return Err(Error::IndexOutOfRange {
            index: true_k,
            n: count_dist.len(),
        });
    }
    let p = count_dist[true_k - 1].max(T::from_f64_lossy(EPS));
    Ok(-p.ln())
}

pub fn total_loss(l_ca: f64, l_cc: f64, lambda: f64) -> LossValues {
    LossValues {
        l_ca,
        l_cc,
        lambda,
        l_tot: l_cc + lambda * l_ca,
    }
}

/// Loss of one set and its gradient w.r.t. the output probabilities.
pub fn set_loss_and_grad<T: Real>(
    out: &ClusteringOutput<T>,
    y: &PairwiseLabels,
    true_k: usize,
    w: &LossWeights,
    lambda: f64,
) -> Result<(LossValues, OutputGrad<T>)> {
    let n = check_labels(out, y)?;
    let k_max = out.k_max();
    let l_cc = count_loss(out.count_dist.view(), true_k)?;

    let p = pair_prob_matrix(out);
    let (phi1, phi2) = (T::from_f64_lossy(w.phi1), T::from_f64_lossy(w.phi2));
    let pre = T::from_f64_lossy(2.0 / (n * (n - 1)) as f64);
    let lam = T::from_f64_lossy(lambda);
    let mut acc = T::zero();
    // dL_tot / dP_ij, mirrored so that row sums cover both pair orientations.
    let mut dp = Array2::<T>::zeros((n, n));
    for i in 0..n {
        for j in i + 1..n {
            let (pij, clamped) = clamp_prob(p[[i, j]]);
            let g = if y.same(i, j) {
                acc += phi1 * pij.ln();
                -pre * phi1 / pij
            } else {
                acc += phi2 * (T::one() - pij).ln();
                pre * phi2 / (T::one() - pij)
            };
            let g = if clamped { T::zero() } else { lam * g };
            dp[[i, j]] = g;
            dp[[j, i]] = g;
        }
    }
    let l_ca = -pre * acc;

    let mut grad = OutputGrad::zeros(n, k_max);
    for k in 1..=k_max {
        let a = &out.assignments[k - 1];
        let s = a.dot(&a.t());
        // dp is symmetric with a zero diagonal, so the upper triangle is half the total.
        let half: T = (&dp * &s).sum() / T::from_f64_lossy(2.0);
        grad.count_dist[k - 1] = half;
        grad.assignments[k - 1] = dp.dot(a) * out.count_dist[k - 1];
    }
    let pk = out.count_dist[true_k - 1];
    if pk > T::from_f64_lossy(EPS) {
        grad.count_dist[true_k - 1] -= T::one() / pk;
    }
    let values = total_loss(l_ca.as_f64(), l_cc.as_f64(), lambda);
    Ok((values, grad))
}

/// Mean loss over a batch of sets with the gradient already scaled by `1 / N`.
pub fn batch_loss_and_grad<T: Real>(
    outputs: &[ClusteringOutput<T>],
    labels: &[PairwiseLabels],
    true_ks: &[usize],
    w: &LossWeights,
    lambda: f64,
) -> Result<(LossValues, Vec<OutputGrad<T>>)> {
    if outputs.is_empty() || outputs.len() != labels.len() || outputs.len() != true_ks.len() {
        return Err(Error::Shape("batch outputs, labels and cluster counts must align".into()));
    }
    let scale = 1.0 / outputs.len() as f64;
    let (mut l_ca, mut l_cc) = (0.0, 0.0);
    let mut grads = Vec::with_capacity(outputs.len());
    for ((out, y), &k) in outputs.iter().zip(labels).zip(true_ks) {
        let (v, mut g) = set_loss_and_grad(out, y, k, w, lambda)?;
        l_ca += v.l_ca;
        l_cc += v.l_cc;
        let s = T::from_f64_lossy(scale);
        g.count_dist.mapv_inplace(|x| x * s);
        g.assignments.iter_mut().for_each(|a| a.mapv_inplace(|x| x * s));
        grads.push(g);
    }
    Ok((total_loss(l_ca * scale, l_cc * scale, lambda), grads))
}
