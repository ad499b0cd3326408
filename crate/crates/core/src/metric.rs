//! Explicit metric block: quadratic-form dissimilarities `(zi - zj)^T A (zi - zj)`.
//!
//! In the trainable modes `A` is pulled back onto the PSD cone after every optimizer
//! step, so the dissimilarity stays non-negative.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::layers::{leaky, Dense};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetricMode {
    /// The block is bypassed entirely.
    #[default]
    None,
    /// `A = I`, never updated.
    Euclidean,
    /// Trainable diagonal `A`.
    Diagonal,
    /// Trainable full `A`.
    Full,
}

impl MetricMode {
    pub fn is_active(self) -> bool {
        self != MetricMode::None
    }

    pub fn is_trainable(self) -> bool {
        matches!(self, MetricMode::Diagonal | MetricMode::Full)
    }
}

impl std::str::FromStr for MetricMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(MetricMode::None),
            "euclidean" => Ok(MetricMode::Euclidean),
            "diagonal" => Ok(MetricMode::Diagonal),
            "full" => Ok(MetricMode::Full),
            other => Err(Error::InvalidConfig {
                key: "metric.mode".into(),
                reason: format!("unknown mode `{other}`"),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricMatrix<T> {
    pub a: Array2<T>,
    pub mode: MetricMode,
}

impl<T: Real> MetricMatrix<T> {
    pub fn identity(dim: usize, mode: MetricMode) -> Self {
        Self {
            a: Array2::eye(dim),
            mode,
        }
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    /// Restores the mode invariants after an update.
    pub fn project(&mut self) -> Result<()> {
        project_in_place(&mut self.a, self.mode)
    }

    /// Checks the mode invariants: symmetry, PSD, identity / diagonal structure.
    pub fn check_invariants(&self) -> Result<()> {
        check_metric(&self.a, self.mode)
    }
}

pub(crate) fn check_metric<T: Real>(a: &Array2<T>, mode: MetricMode) -> Result<()> {
    let d = a.nrows();
    match mode {
        MetricMode::None => Ok(()),
        MetricMode::Euclidean => {
            if *a != Array2::<T>::eye(d) {
                return Err(Error::InvalidParameter("euclidean metric must stay the identity".into()));
            }
            Ok(())
        }
        MetricMode::Diagonal | MetricMode::Full => {
            for i in 0..d {
                for j in 0..d {
                    if mode == MetricMode::Diagonal && i != j && a[[i, j]] != T::zero() {
                        return Err(Error::InvalidParameter(format!(
                            "diagonal metric has off-diagonal entry at ({i},{j})"
                        )));
                    }
                    if (a[[i, j]] - a[[j, i]]).abs().as_f64() > 1e-9 {
                        return Err(Error::InvalidParameter("metric matrix is not symmetric".into()));
                    }
                }
            }
            let lo = min_eigenvalue(&a.mapv(|v| v.as_f64()))?;
            if lo < -1e-8 {
                return Err(Error::InvalidParameter(format!(
                    "metric matrix has eigenvalue {lo:e} < -1e-8"
                )));
            }
            Ok(())
        }
    }
}

fn to_nalgebra(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

pub fn min_eigenvalue(a: &Array2<f64>) -> Result<f64> {
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("matrix".into()));
    }
    let m = to_nalgebra(a);
    let sym = (&m + m.transpose()) * 0.5;
    Ok(SymmetricEigen::new(sym).eigenvalues.iter().copied().fold(f64::INFINITY, f64::min))
}

/// Frobenius-nearest PSD matrix to the symmetric part of `a`: symmetrize,
/// eigendecompose, clamp negative eigenvalues to zero and reconstruct.
pub fn project_psd(a: &Array2<f64>) -> Result<Array2<f64>> {
    if a.nrows() != a.ncols() {
        return Err(Error::Shape(format!("project_psd needs a square matrix, got {:?}", a.dim())));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("project_psd input".into()));
    }
    let m = to_nalgebra(a);
    let sym = (&m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let clamped = eig.eigenvalues.map(|v| v.max(0.0));
    let rebuilt = &eig.eigenvectors * DMatrix::from_diagonal(&clamped) * eig.eigenvectors.transpose();
    let n = a.nrows();
    Ok(Array2::from_shape_fn((n, n), |(i, j)| 0.5 * (rebuilt[(i, j)] + rebuilt[(j, i)])))
}

pub fn project_in_place<T: Real>(a: &mut Array2<T>, mode: MetricMode) -> Result<()> {
    let d = a.nrows();
    match mode {
        MetricMode::None => {}
        MetricMode::Euclidean => a.assign(&Array2::eye(d)),
        MetricMode::Diagonal => {
            for i in 0..d {
                for j in 0..d {
                    if i != j {
                        a[[i, j]] = T::zero();
                    } else if !(a[[i, i]] >= T::zero()) {
                        if !a[[i, i]].is_finite() {
                            return Err(Error::NonFinite("metric matrix".into()));
                        }
                        a[[i, i]] = T::zero();
                    }
                }
            }
        }
        MetricMode::Full => {
            let projected = project_psd(&a.mapv(|v| v.as_f64()))?;
            for i in 0..d {
                for j in 0..d {
                    a[[i, j]] = T::from_f64_lossy(projected[[i.min(j), i.max(j)]]);
                }
            }
            // Rounding to the storage precision can push a zero eigenvalue slightly
            // negative; a diagonal shift of that size restores PSD.
            for _ in 0..4 {
                let lo = min_eigenvalue(&a.mapv(|v| v.as_f64()))?;
                if lo >= 0.0 {
                    break;
                }
                let shift = T::from_f64_lossy(-2.0 * lo) + T::epsilon();
                for i in 0..d {
                    a[[i, i]] += shift;
                }
            }
        }
    }
    Ok(())
}

/// `(zi - zj)^T A (zi - zj)`.
pub fn dissimilarity<T: Real>(metric: &MetricMatrix<T>, zi: ArrayView1<T>, zj: ArrayView1<T>) -> Result<T> {
    let d = metric.dim();
    for len in [zi.len(), zj.len()] {
        if len != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                actual: len,
            });
        }
    }
    let delta: Array1<T> = &zi - &zj;
    Ok(delta.dot(&metric.a.dot(&delta)))
}

/// Cached pair differences for [`distance_backward`].
pub struct DistanceCache<T> {
    pairs: Vec<(usize, usize)>,
    delta: Array2<T>,
    q: Array2<T>,
}

/// All pairwise dissimilarities of the rows of `h` under `a`; exactly symmetric with a
/// zero diagonal.
pub fn distance_matrix<T: Real>(a: &Array2<T>, h: &ArrayView2<T>) -> (Array2<T>, DistanceCache<T>) {
    let n = h.nrows();
    let d = h.ncols();
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    let mut delta = Array2::<T>::zeros((pairs.len(), d));
    for (p, &(i, j)) in pairs.iter().enumerate() {
        let mut row = delta.row_mut(p);
        row.assign(&h.row(i));
        row -= &h.row(j);
    }
    let q = delta.dot(a);
    let mut out = Array2::<T>::zeros((n, n));
    for (p, &(i, j)) in pairs.iter().enumerate() {
        let v = q.row(p).dot(&delta.row(p));
        out[[i, j]] = v;
        out[[j, i]] = v;
    }
    (out, DistanceCache { pairs, delta, q })
}

/// Gradients of [`distance_matrix`]: returns `(dA, dH)`.
pub fn distance_backward<T: Real>(a: &Array2<T>, cache: &DistanceCache<T>, d_out: &Array2<T>, n: usize) -> (Array2<T>, Array2<T>) {
    let d = a.nrows();
    let mut weighted = cache.delta.clone();
    let g: Vec<T> = cache.pairs.iter().map(|&(i, j)| d_out[[i, j]] + d_out[[j, i]]).collect();
    for (p, &gp) in g.iter().enumerate() {
        weighted.row_mut(p).mapv_inplace(|v| v * gp);
    }
    let d_a = weighted.t().dot(&cache.delta);
    let mut d_delta = &cache.q + &cache.delta.dot(&a.t());
    for (p, &gp) in g.iter().enumerate() {
        d_delta.row_mut(p).mapv_inplace(|v| v * gp);
    }
    let mut d_h = Array2::<T>::zeros((n, d));
    for (p, &(i, j)) in cache.pairs.iter().enumerate() {
        let row = d_delta.row(p);
        let mut hi = d_h.row_mut(i);
        hi += &row;
        let mut hj = d_h.row_mut(j);
        hj -= &row;
    }
    (d_a, d_h)
}

/// Zeroes the gradient entries a mode does not train.
pub fn mask_gradient<T: Real>(grad: &mut Array2<T>, mode: MetricMode) {
    match mode {
        MetricMode::None | MetricMode::Euclidean => grad.fill(T::zero()),
        MetricMode::Diagonal => {
            for ((i, j), v) in grad.indexed_iter_mut() {
                if i != j {
                    *v = T::zero();
                }
            }
        }
        MetricMode::Full => {}
    }
}

/// Raw distance rows for each element, optionally followed by the element's own
/// embedding, projected to the trunk width by a shared FC + LeakyReLU.
pub fn metric_block_forward<T: Real>(
    metric: &MetricMatrix<T>,
    rows: &Dense<T>,
    embeddings: ArrayView2<T>,
    slope: T,
    concat: bool,
) -> Result<Array2<T>> {
    let n = embeddings.nrows();
    if n < 2 {
        return Err(Error::SequenceTooShort { min: 2, actual: n });
    }
    if embeddings.ncols() != metric.dim() {
        return Err(Error::DimensionMismatch {
            expected: metric.dim(),
            actual: embeddings.ncols(),
        });
    }
    let (dist, _) = distance_matrix(&metric.a, &embeddings);
    let input = if concat {
        ndarray::concatenate(ndarray::Axis(1), &[dist.view(), embeddings])
            .map_err(|e| Error::Shape(e.to_string()))?
    } else {
        dist
    };
    if input.ncols() != rows.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: rows.input_dim(),
            actual: input.ncols(),
        });
    }
    Ok(leaky(&rows.apply(&input.view()), slope))
}
