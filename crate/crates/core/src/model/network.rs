//! Batched forward and backward passes of the full network.

use ndarray::{s, Array1, Array2, ArrayView2};

use super::layers::{leaky, leaky_backward, BiLstmCache};
use super::params::Params;
use super::{group_offset, ClusteringOutput, ModelConfig};
use crate::error::{Error, Result};
use crate::metric::{distance_backward, distance_matrix, mask_gradient, DistanceCache};
use crate::real::Real;

struct MetricCache<T> {
    distances: Vec<DistanceCache<T>>,
    row_input: Array2<T>,
    row_pre: Array2<T>,
}

/// Activations kept by [`forward_batch`] for [`backward_batch`].
pub struct ForwardCache<T> {
    steps: usize,
    batch: usize,
    z: Array2<T>,
    proj_pre: Array2<T>,
    metric: Option<MetricCache<T>>,
    trunk: Vec<BiLstmCache<T>>,
    y: Array2<T>,
    assign_probs: Array2<T>,
    count_rnn: BiLstmCache<T>,
    count_v: Array2<T>,
    count_pre: Array2<T>,
    count_u: Array2<T>,
    count_probs: Array2<T>,
}

impl<T> ForwardCache<T> {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn steps(&self) -> usize {
        self.steps
    }
}

/// Gradient of a scalar objective w.r.t. one set's [`ClusteringOutput`].
#[derive(Debug, Clone)]
pub struct OutputGrad<T> {
    pub count_dist: Array1<T>,
    /// Index `k - 1`, shape `(n, k)`.
    pub assignments: Vec<Array2<T>>,
}

impl<T: Real> OutputGrad<T> {
    pub fn zeros(n: usize, k_max: usize) -> Self {
        Self {
            count_dist: Array1::zeros(k_max),
            assignments: (1..=k_max).map(|k| Array2::zeros((n, k))).collect(),
        }
    }
}

fn softmax_groups<T: Real>(logits: &mut Array2<T>, k_max: usize) {
    for mut row in logits.rows_mut() {
        for k in 1..=k_max {
            let off = group_offset(k);
            softmax_in_place(row.slice_mut(s![off..off + k]));
        }
    }
}

pub(crate) fn softmax_in_place<T: Real>(mut v: ndarray::ArrayViewMut1<T>) {
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    v.mapv_inplace(|x| (x - max).exp());
    let sum: T = v.iter().copied().sum();
    v.mapv_inplace(|x| x / sum);
}

/// `dz = p * (dp - <p, dp>)`.
fn softmax_backward<T: Real>(p: ndarray::ArrayView1<T>, dp: ndarray::ArrayView1<T>, mut dz: ndarray::ArrayViewMut1<T>) {
    let dot: T = p.iter().zip(dp.iter()).map(|(&a, &b)| a * b).sum();
    for ((z, &pi), &gi) in dz.iter_mut().zip(p.iter()).zip(dp.iter()) {
        *z = pi * (gi - dot);
    }
}

pub(crate) fn validate_inputs<T: Real>(config: &ModelConfig, inputs: &[ArrayView2<T>]) -> Result<usize> {
    let first = inputs.first().ok_or(Error::Empty("batch"))?;
    let n = first.nrows();
    if n < 2 {
        return Err(Error::SequenceTooShort { min: 2, actual: n });
    }
    let e = config.embedding.output_dim();
    for x in inputs {
        if x.nrows() != n {
            return Err(Error::Shape(format!(
                "all sets in a batch need the same size: {} vs {n}",
                x.nrows()
            )));
        }
        if x.ncols() != e {
            return Err(Error::DimensionMismatch {
                expected: e,
                actual: x.ncols(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("input set".into()));
        }
    }
    if config.metric.mode.is_active() && n != config.metric.set_size {
        return Err(Error::DimensionMismatch {
            expected: config.metric.set_size,
            actual: n,
        });
    }
    Ok(n)
}

pub fn forward_batch<T: Real>(
    params: &Params<T>,
    config: &ModelConfig,
    inputs: &[ArrayView2<T>],
) -> Result<(Vec<ClusteringOutput<T>>, ForwardCache<T>)> {
    let steps = validate_inputs(config, inputs)?;
    let batch = inputs.len();
    let slope = T::from_f64_lossy(config.leaky_slope);
    let d = config.fc_units;
    let k_max = config.k_max;

    let mut z = Array2::<T>::zeros((steps * batch, config.embedding.output_dim()));
    for (b, x) in inputs.iter().enumerate() {
        for t in 0..steps {
            z.row_mut(t * batch + b).assign(&x.row(t));
        }
    }
    let proj_pre = params.projection.apply(&z.view());
    let h0 = leaky(&proj_pre, slope);

    let (x0, metric) = match &params.metric {
        Some(mp) if config.metric.mode.is_active() => {
            let width = config.metric_row_input();
            let mut row_input = Array2::<T>::zeros((steps * batch, width));
            let mut distances = Vec::with_capacity(batch);
            for b in 0..batch {
                let hb = gather(&h0, b, steps, batch);
                let (dist, dc) = distance_matrix(&mp.a, &hb.view());
                for t in 0..steps {
                    let r = t * batch + b;
                    row_input.slice_mut(s![r, ..steps]).assign(&dist.row(t));
                    if config.metric.concat {
                        row_input.slice_mut(s![r, steps..]).assign(&h0.row(r));
                    }
                }
                distances.push(dc);
            }
            let row_pre = mp.rows.apply(&row_input.view());
            let x0 = leaky(&row_pre, slope);
            (
                x0,
                Some(MetricCache {
                    distances,
                    row_input,
                    row_pre,
                }),
            )
        }
        _ => (h0, None),
    };
    debug_assert_eq!(x0.ncols(), d);

    let mut x = x0;
    let mut trunk = Vec::with_capacity(params.trunk.len());
    for layer in &params.trunk {
        let (out, cache) = layer.forward(&x, steps, batch);
        x += &out;
        trunk.push(cache);
    }
    let y = x;

    let mut assign_probs = params.assignment.apply(&y.view());
    softmax_groups(&mut assign_probs, k_max);

    let (o, count_rnn) = params.count_rnn.forward(&y, steps, batch);
    let width = o.ncols();
    let mut count_v = Array2::<T>::zeros((batch, 2 * width));
    for b in 0..batch {
        count_v.slice_mut(s![b, ..width]).assign(&o.row(b));
        count_v.slice_mut(s![b, width..]).assign(&o.row((steps - 1) * batch + b));
    }
    let count_pre = params.count_hidden.apply(&count_v.view());
    let count_u = leaky(&count_pre, slope);
    let mut count_probs = params.count_out.apply(&count_u.view());
    for row in count_probs.rows_mut() {
        softmax_in_place(row);
    }

    let outputs = (0..batch)
        .map(|b| ClusteringOutput {
            count_dist: count_probs.row(b).to_owned(),
            assignments: (1..=k_max)
                .map(|k| {
                    let off = group_offset(k);
                    let mut a = Array2::zeros((steps, k));
                    for t in 0..steps {
                        a.row_mut(t).assign(&assign_probs.slice(s![t * batch + b, off..off + k]));
                    }
                    a
                })
                .collect(),
        })
        .collect();

    let cache = ForwardCache {
        steps,
        batch,
        z,
        proj_pre,
        metric,
        trunk,
        y,
        assign_probs,
        count_rnn,
        count_v,
        count_pre,
        count_u,
        count_probs,
    };
    Ok((outputs, cache))
}

fn gather<T: Real>(m: &Array2<T>, b: usize, steps: usize, batch: usize) -> Array2<T> {
    let mut out = Array2::zeros((steps, m.ncols()));
    for t in 0..steps {
        out.row_mut(t).assign(&m.row(t * batch + b));
    }
    out
}

/// Parameter gradients given per-set output gradients.
pub fn backward_batch<T: Real>(
    params: &Params<T>,
    config: &ModelConfig,
    cache: &ForwardCache<T>,
    grads: &[OutputGrad<T>],
) -> Params<T> {
    let (steps, batch) = (cache.steps, cache.batch);
    assert_eq!(grads.len(), batch, "one output gradient per set");
    let slope = T::from_f64_lossy(config.leaky_slope);
    let k_max = config.k_max;
    let mut g = params.zeros_like();

    // Count head.
    let mut d_logits = Array2::<T>::zeros((batch, k_max));
    for b in 0..batch {
        softmax_backward(
            cache.count_probs.row(b),
            grads[b].count_dist.view(),
            d_logits.row_mut(b),
        );
    }
    let du = params.count_out.backward(&cache.count_u.view(), &d_logits, &mut g.count_out);
    let dpre = leaky_backward(&cache.count_pre, &du, slope);
    let dv = params.count_hidden.backward(&cache.count_v.view(), &dpre, &mut g.count_hidden);
    let width = dv.ncols() / 2;
    let mut d_o = Array2::<T>::zeros((steps * batch, width));
    for b in 0..batch {
        let mut first = d_o.row_mut(b);
        first += &dv.slice(s![b, ..width]);
        let mut last = d_o.row_mut((steps - 1) * batch + b);
        last += &dv.slice(s![b, width..]);
    }
    let mut dy = params.count_rnn.backward(&cache.count_rnn, &d_o, &mut g.count_rnn);

    // Assignment head.
    let total = cache.assign_probs.ncols();
    let mut d_assign = Array2::<T>::zeros((steps * batch, total));
    for b in 0..batch {
        for k in 1..=k_max {
            let off = group_offset(k);
            let dp = &grads[b].assignments[k - 1];
            for t in 0..steps {
                let r = t * batch + b;
                softmax_backward(
                    cache.assign_probs.slice(s![r, off..off + k]),
                    dp.row(t),
                    d_assign.slice_mut(s![r, off..off + k]),
                );
            }
        }
    }
    dy += &params.assignment.backward(&cache.y.view(), &d_assign, &mut g.assignment);

    // Residual trunk.
    let mut dx = dy;
    for (l, layer) in params.trunk.iter().enumerate().rev() {
        let inner = layer.backward(&cache.trunk[l], &dx, &mut g.trunk[l]);
        dx += &inner;
    }

    let dh0 = match (&params.metric, &cache.metric, &mut g.metric) {
        (Some(mp), Some(mc), Some(gm)) => {
            let d_row_pre = leaky_backward(&mc.row_pre, &dx, slope);
            let d_row_input = mp.rows.backward(&mc.row_input.view(), &d_row_pre, &mut gm.rows);
            let mut dh0 = Array2::<T>::zeros((steps * batch, config.fc_units));
            for b in 0..batch {
                let mut d_dist = Array2::<T>::zeros((steps, steps));
                for t in 0..steps {
                    d_dist.row_mut(t).assign(&d_row_input.slice(s![t * batch + b, ..steps]));
                }
                let (da, dhb) = distance_backward(&mp.a, &mc.distances[b], &d_dist, steps);
                gm.a += &da;
                for t in 0..steps {
                    let mut row = dh0.row_mut(t * batch + b);
                    row += &dhb.row(t);
                }
            }
            if config.metric.concat {
                dh0 += &d_row_input.slice(s![.., steps..]);
            }
            mask_gradient(&mut gm.a, config.metric.mode);
            dh0
        }
        _ => dx,
    };

    let dproj = leaky_backward(&cache.proj_pre, &dh0, slope);
    params
        .projection
        .backward_params(&cache.z.view(), &dproj, &mut g.projection);
    g
}
