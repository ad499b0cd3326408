use ndarray::{Array2, ArrayViewD, ArrayViewMutD};

use super::layers::{BiLstm, Dense, Lstm};
use super::ModelConfig;
use crate::metric::MetricMode;
use crate::real::Real;
use crate::seed;

/// Metric block weights: the quadratic form and the row projection.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricParams<T> {
    pub a: Array2<T>,
    pub rows: Dense<T>,
}

/// All trainable tensors of the network. The same layout doubles as the gradient
/// container.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub projection: Dense<T>,
    pub metric: Option<MetricParams<T>>,
    pub trunk: Vec<BiLstm<T>>,
    pub assignment: Dense<T>,
    pub count_rnn: BiLstm<T>,
    pub count_hidden: Dense<T>,
    pub count_out: Dense<T>,
}

pub type NamedTensors<'a, T> = Vec<(String, ArrayViewD<'a, T>)>;
pub type NamedTensorsMut<'a, T> = Vec<(String, ArrayViewMutD<'a, T>)>;

fn dense_views<'a, T>(prefix: &str, d: &'a Dense<T>, out: &mut NamedTensors<'a, T>) {
    out.push((format!("{prefix}.w"), d.w.view().into_dyn()));
    out.push((format!("{prefix}.b"), d.b.view().into_dyn()));
}

fn dense_views_mut<'a, T>(prefix: &str, d: &'a mut Dense<T>, out: &mut NamedTensorsMut<'a, T>) {
    out.push((format!("{prefix}.w"), d.w.view_mut().into_dyn()));
    out.push((format!("{prefix}.b"), d.b.view_mut().into_dyn()));
}

fn lstm_views<'a, T>(prefix: &str, l: &'a Lstm<T>, out: &mut NamedTensors<'a, T>) {
    out.push((format!("{prefix}.w_x"), l.w_x.view().into_dyn()));
    out.push((format!("{prefix}.w_h"), l.w_h.view().into_dyn()));
    out.push((format!("{prefix}.b"), l.b.view().into_dyn()));
}

fn lstm_views_mut<'a, T>(prefix: &str, l: &'a mut Lstm<T>, out: &mut NamedTensorsMut<'a, T>) {
    out.push((format!("{prefix}.w_x"), l.w_x.view_mut().into_dyn()));
    out.push((format!("{prefix}.w_h"), l.w_h.view_mut().into_dyn()));
    out.push((format!("{prefix}.b"), l.b.view_mut().into_dyn()));
}

impl<T: Real> Params<T> {
    /// Fresh parameters drawn from `config.seed`.
    pub fn init(config: &ModelConfig) -> Self {
        let mut rng = seed::rng(config.seed);
        let d = config.fc_units;
        let projection = Dense::init(config.embedding.output_dim(), d, &mut rng);
        let metric = config.metric.mode.is_active().then(|| MetricParams {
            a: Array2::eye(d),
            rows: Dense::init(config.metric_row_input(), d, &mut rng),
        });
        let trunk = (0..config.layers).map(|_| BiLstm::init(d, d / 2, &mut rng)).collect();
        let assignment = Dense::init(d, config.assignment_logits(), &mut rng);
        let cu = config.count_units;
        let count_rnn = BiLstm::init(d, cu, &mut rng);
        let count_hidden = Dense::init(4 * cu, 2 * cu, &mut rng);
        let count_out = Dense::init(2 * cu, config.k_max, &mut rng);
        Self {
            projection,
            metric,
            trunk,
            assignment,
            count_rnn,
            count_hidden,
            count_out,
        }
    }

    /// All-zero tensors with the layout implied by `config`.
    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.fc_units;
        let cu = config.count_units;
        Self {
            projection: Dense::zeros(config.embedding.output_dim(), d),
            metric: config.metric.mode.is_active().then(|| MetricParams {
                a: Array2::zeros((d, d)),
                rows: Dense::zeros(config.metric_row_input(), d),
            }),
            trunk: (0..config.layers).map(|_| BiLstm::zeros(d, d / 2)).collect(),
            assignment: Dense::zeros(d, config.assignment_logits()),
            count_rnn: BiLstm::zeros(d, cu),
            count_hidden: Dense::zeros(4 * cu, 2 * cu),
            count_out: Dense::zeros(2 * cu, config.k_max),
        }
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.for_each_mut(|_, mut t| t.fill(T::zero()));
        z
    }

    pub fn tensors(&self) -> NamedTensors<'_, T> {
        let mut out = Vec::new();
        dense_views("projection", &self.projection, &mut out);
        if let Some(m) = &self.metric {
            out.push(("metric.a".to_string(), m.a.view().into_dyn()));
            dense_views("metric.rows", &m.rows, &mut out);
        }
        for (i, layer) in self.trunk.iter().enumerate() {
            lstm_views(&format!("trunk.{i}.fwd"), &layer.fwd, &mut out);
            lstm_views(&format!("trunk.{i}.bwd"), &layer.bwd, &mut out);
        }
        dense_views("assignment", &self.assignment, &mut out);
        lstm_views("count.rnn.fwd", &self.count_rnn.fwd, &mut out);
        lstm_views("count.rnn.bwd", &self.count_rnn.bwd, &mut out);
        dense_views("count.hidden", &self.count_hidden, &mut out);
        dense_views("count.out", &self.count_out, &mut out);
        out
    }

    pub fn tensors_mut(&mut self) -> NamedTensorsMut<'_, T> {
        let mut out = Vec::new();
        dense_views_mut("projection", &mut self.projection, &mut out);
        if let Some(m) = &mut self.metric {
            out.push(("metric.a".to_string(), m.a.view_mut().into_dyn()));
            dense_views_mut("metric.rows", &mut m.rows, &mut out);
        }
        for (i, layer) in self.trunk.iter_mut().enumerate() {
            lstm_views_mut(&format!("trunk.{i}.fwd"), &mut layer.fwd, &mut out);
            lstm_views_mut(&format!("trunk.{i}.bwd"), &mut layer.bwd, &mut out);
        }
        dense_views_mut("assignment", &mut self.assignment, &mut out);
        lstm_views_mut("count.rnn.fwd", &mut self.count_rnn.fwd, &mut out);
        lstm_views_mut("count.rnn.bwd", &mut self.count_rnn.bwd, &mut out);
        dense_views_mut("count.hidden", &mut self.count_hidden, &mut out);
        dense_views_mut("count.out", &mut self.count_out, &mut out);
        out
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, ArrayViewMutD<'_, T>)) {
        for (name, t) in self.tensors_mut() {
            f(&name, t);
        }
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn add_assign(&mut self, other: &Params<T>) {
        let others = other.tensors();
        for ((_, mut t), (_, o)) in self.tensors_mut().into_iter().zip(others) {
            t += &o;
        }
    }

    pub fn scale(&mut self, factor: T) {
        self.for_each_mut(|_, mut t| t.mapv_inplace(|v| v * factor));
    }

    pub fn norm_sq(&self) -> T {
        self.tensors()
            .iter()
            .map(|(_, t)| t.iter().map(|&v| v * v).sum::<T>())
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    pub fn metric_mode_mask(&mut self, mode: MetricMode) {
        if let Some(m) = &mut self.metric {
            crate::metric::mask_gradient(&mut m.a, mode);
        }
    }

    /// Element-wise precision conversion.
    pub fn cast<U: Real>(&self) -> Params<U> {
        let conv_dense = |d: &Dense<T>| Dense {
            w: d.w.mapv(|v| U::from_f64_lossy(v.as_f64())),
            b: d.b.mapv(|v| U::from_f64_lossy(v.as_f64())),
        };
        let conv_lstm = |l: &Lstm<T>| Lstm {
            w_x: l.w_x.mapv(|v| U::from_f64_lossy(v.as_f64())),
            w_h: l.w_h.mapv(|v| U::from_f64_lossy(v.as_f64())),
            b: l.b.mapv(|v| U::from_f64_lossy(v.as_f64())),
        };
        let conv_bi = |b: &BiLstm<T>| BiLstm {
            fwd: conv_lstm(&b.fwd),
            bwd: conv_lstm(&b.bwd),
        };
        Params {
            projection: conv_dense(&self.projection),
            metric: self.metric.as_ref().map(|m| MetricParams {
                a: m.a.mapv(|v| U::from_f64_lossy(v.as_f64())),
                rows: conv_dense(&m.rows),
            }),
            trunk: self.trunk.iter().map(conv_bi).collect(),
            assignment: conv_dense(&self.assignment),
            count_rnn: conv_bi(&self.count_rnn),
            count_hidden: conv_dense(&self.count_hidden),
            count_out: conv_dense(&self.count_out),
        }
    }
}
