//! The clustering network.
//!
//! ```text
//! raw -> embed -> FC+LeakyReLU -> [metric block] -> m x RBDLSTM -+-> assignment head
//!                                                               +-> count head
//! ```
//!
//! The assignment head emits `k_max (k_max + 1) / 2` logits per element, split into
//! groups of size `1, 2, ..., k_max`; group `k` is softmax-normalized on its own and
//! gives `P(. | x_i, k)`. The count head runs one more bidirectional LSTM, joins its
//! first and last output vectors, and maps them through a hidden FC layer to a
//! softmax over `1..=k_max`.

pub mod embed;
pub mod layers;
pub mod network;
pub mod params;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

pub use embed::{Embedder, EmbeddingSpec, IdentityEmbedding, LinearEmbedding};
pub use layers::{BiLstm, Dense, Lstm};
pub use network::{backward_batch, forward_batch, ForwardCache, OutputGrad};
pub use params::{MetricParams, Params};

use crate::error::{Error, Result};
use crate::metric::MetricMode;
use crate::real::Real;

/// Metric block settings (`metric.*` configuration keys).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricConfig {
    pub mode: MetricMode,
    /// Append the element's own projected embedding to its distance row.
    pub concat: bool,
    /// Set size the row projection is built for; required when the block is active.
    pub set_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub k_max: usize,
    /// Number of residual bidirectional LSTM layers.
    pub layers: usize,
    pub fc_units: usize,
    /// Hidden width per direction of the count-head LSTM.
    pub count_units: usize,
    pub leaky_slope: f64,
    pub embedding: EmbeddingSpec,
    pub metric: MetricConfig,
    /// Parameter initialization seed.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// CPU-sized network.
    pub fn desk() -> Self {
        Self {
            k_max: 5,
            layers: 4,
            fc_units: 64,
            count_units: 32,
            leaky_slope: 0.3,
            embedding: EmbeddingSpec::Identity2d,
            metric: MetricConfig::default(),
            seed: 0,
        }
    }

    /// The full-size architecture: 14 layers, 288 projection units, 128 count units.
    pub fn full() -> Self {
        Self {
            k_max: 5,
            layers: 14,
            fc_units: 288,
            count_units: 128,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: String| {
            Err(Error::InvalidConfig {
                key: format!("model.{key}"),
                reason,
            })
        };
        if self.k_max < 2 {
            return bad("k_max", format!("must be >= 2, got {}", self.k_max));
        }
        if self.layers < 1 {
            return bad("layers", "must be >= 1".into());
        }
        if self.fc_units == 0 || self.fc_units % 2 != 0 {
            return bad("fc_units", format!("must be positive and even, got {}", self.fc_units));
        }
        if self.count_units == 0 {
            return bad("count_units", "must be >= 1".into());
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return bad("leaky_slope", format!("must lie in (0, 1), got {}", self.leaky_slope));
        }
        if self.embedding.output_dim() == 0 {
            return bad("embedding", "output dimension must be positive".into());
        }
        if self.metric.mode.is_active() && self.metric.set_size < 2 {
            return Err(Error::InvalidConfig {
                key: "metric.set_size".into(),
                reason: "the metric block needs the set size (>= 2)".into(),
            });
        }
        Ok(())
    }

    pub fn assignment_logits(&self) -> usize {
        self.k_max * (self.k_max + 1) / 2
    }

    pub(crate) fn metric_row_input(&self) -> usize {
        self.metric.set_size + if self.metric.concat { self.fc_units } else { 0 }
    }
}

/// Offset of group `k` (1-based) in the assignment logits.
pub fn group_offset(k: usize) -> usize {
    k * (k - 1) / 2
}

/// Two-fold probabilistic output for one set.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusteringOutput<T> {
    /// `P(k)` for `k = 1..=k_max`.
    pub count_dist: Array1<T>,
    /// `assignments[k - 1][[i, l]] = P(l | x_i, k)`, shape `(n, k)`.
    pub assignments: Vec<Array2<T>>,
}

impl<T: Real> ClusteringOutput<T> {
    pub fn n(&self) -> usize {
        self.assignments.first().map_or(0, |a| a.nrows())
    }

    pub fn k_max(&self) -> usize {
        self.count_dist.len()
    }

    pub fn assignment(&self, i: usize, k: usize) -> ArrayView1<'_, T> {
        self.assignments[k - 1].row(i)
    }

    pub fn to_f64(&self) -> ClusteringOutput<f64> {
        ClusteringOutput {
            count_dist: self.count_dist.mapv(|v| v.as_f64()),
            assignments: self.assignments.iter().map(|a| a.mapv(|v| v.as_f64())).collect(),
        }
    }

    /// Checks every distribution is a simplex within `tol`.
    pub fn validate(&self, tol: f64) -> Result<()> {
        let simplex = |v: ArrayView1<T>, what: String| -> Result<()> {
            let sum: f64 = v.iter().map(|x| x.as_f64()).sum();
            if v.iter().any(|x| !(x.as_f64() >= 0.0)) || (sum - 1.0).abs() > tol {
                return Err(Error::InvalidParameter(format!("{what} is not a distribution (sum {sum})")));
            }
            Ok(())
        };
        simplex(self.count_dist.view(), "count distribution".into())?;
        if self.assignments.len() != self.k_max() {
            return Err(Error::Shape("one assignment matrix per k".into()));
        }
        for (idx, a) in self.assignments.iter().enumerate() {
            if a.ncols() != idx + 1 || a.nrows() != self.n() {
                return Err(Error::Shape(format!("assignment block k={} has shape {:?}", idx + 1, a.dim())));
            }
            for (i, row) in a.rows().into_iter().enumerate() {
                simplex(row, format!("P(.|x_{i}, k={})", idx + 1))?;
            }
        }
        Ok(())
    }
}

/// A configured network with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: Params<T>,
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = Params::init(&config);
        Ok(Self { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: Params<T>) -> Result<Self> {
        config.validate()?;
        let expected = Params::<T>::zeros(&config);
        let want: Vec<_> = expected.tensors().iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect();
        let got: Vec<_> = params.tensors().iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect();
        if want != got {
            return Err(Error::Shape("parameter layout does not match the configuration".into()));
        }
        Ok(Self { config, params })
    }

    /// Clusters one set of already-embedded points (identity embedding for 2D input).
    pub fn forward(&self, raw: ArrayView2<T>) -> Result<ClusteringOutput<T>> {
        forward(&self.params, &self.config, raw)
    }

    pub fn forward_with(&self, embedder: &dyn Embedder<T>, raw: ArrayView2<T>) -> Result<ClusteringOutput<T>> {
        let z = embed::embed(embedder, raw)?;
        self.forward(z.view())
    }

    pub fn forward_batch(&self, inputs: &[ArrayView2<T>]) -> Result<Vec<ClusteringOutput<T>>> {
        Ok(forward_batch(&self.params, &self.config, inputs)?.0)
    }
}

/// Full forward pass on one set.
pub fn forward<T: Real>(params: &Params<T>, config: &ModelConfig, raw: ArrayView2<T>) -> Result<ClusteringOutput<T>> {
    let (mut out, _) = forward_batch(params, config, &[raw])?;
    Ok(out.remove(0))
}

/// One residual bidirectional LSTM layer on a single sequence:
/// `out[t] = in[t] + [fwd[t], bwd[t]]`.
pub fn rbdlstm_forward<T: Real>(layer: &BiLstm<T>, seq: ArrayView2<T>) -> Result<Array2<T>> {
    let d = seq.ncols();
    if d % 2 != 0 {
        return Err(Error::Shape(format!("residual BiLSTM needs an even width, got {d}")));
    }
    if seq.nrows() == 0 {
        return Err(Error::Empty("sequence"));
    }
    if layer.fwd.input_dim() != d || layer.output_dim() != d {
        return Err(Error::DimensionMismatch {
            expected: layer.output_dim(),
            actual: d,
        });
    }
    let x = seq.to_owned();
    let (out, _) = layer.forward(&x, seq.nrows(), 1);
    Ok(x + out)
}

/// Per-element, per-k assignment distributions.
pub fn assignment_head<T: Real>(head: &Dense<T>, k_max: usize, features: ArrayView2<T>) -> Result<Vec<Array2<T>>> {
    if features.nrows() == 0 {
        return Err(Error::Empty("features"));
    }
    if head.output_dim() != k_max * (k_max + 1) / 2 {
        return Err(Error::Shape(format!(
            "assignment head has {} outputs, expected {}",
            head.output_dim(),
            k_max * (k_max + 1) / 2
        )));
    }
    let logits = head.apply(&features);
    Ok((1..=k_max)
        .map(|k| {
            let off = group_offset(k);
            let mut a = logits.slice(ndarray::s![.., off..off + k]).to_owned();
            for row in a.rows_mut() {
                network::softmax_in_place(row);
            }
            a
        })
        .collect())
}

/// Distribution over the cluster count from the trunk features of one set.
pub fn count_head<T: Real>(params: &Params<T>, leaky_slope: f64, features: ArrayView2<T>) -> Result<Array1<T>> {
    let n = features.nrows();
    if n < 2 {
        return Err(Error::SequenceTooShort { min: 2, actual: n });
    }
    let slope = T::from_f64_lossy(leaky_slope);
    let (o, _) = params.count_rnn.forward(&features.to_owned(), n, 1);
    let v = ndarray::concatenate(ndarray::Axis(0), &[o.row(0), o.row(n - 1)]).expect("1-d concat");
    let v = v.insert_axis(ndarray::Axis(0));
    let u = layers::leaky(&params.count_hidden.apply(&v.view()), slope);
    let mut logits = params.count_out.apply(&u.view()).row(0).to_owned();
    network::softmax_in_place(logits.view_mut());
    Ok(logits)
}
