//! Dense and LSTM layers with explicit backward passes.
//!
//! Sequence batches are stored time-major: row `t * batch + b` holds timestep `t` of
//! sequence `b`, so one timestep of the whole batch is a contiguous row block.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng as _;

use crate::real::{leaky_relu, leaky_relu_grad, sigmoid, Real};
use crate::seed::Rng;

pub(crate) fn uniform_matrix<T: Real>(rows: usize, cols: usize, scale: f64, rng: &mut Rng) -> Array2<T> {
    Array2::from_shape_simple_fn((rows, cols), || {
        T::from_f64_lossy(rng.random_range(-scale..=scale))
    })
}

/// Fully connected layer `y = x W + b` with `W` of shape `(in, out)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub w: Array2<T>,
    pub b: Array1<T>,
}

impl<T: Real> Dense<T> {
    pub fn init(input: usize, output: usize, rng: &mut Rng) -> Self {
        let scale = 1.0 / (input.max(1) as f64).sqrt();
        Self {
            w: uniform_matrix(input, output, scale, rng),
            b: Array1::zeros(output),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            w: Array2::zeros((input, output)),
            b: Array1::zeros(output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn apply(&self, x: &ArrayView2<T>) -> Array2<T> {
        x.dot(&self.w) + &self.b
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&self, x: &ArrayView2<T>, dy: &Array2<T>, grad: &mut Dense<T>) -> Array2<T> {
        grad.w += &x.t().dot(dy);
        grad.b += &dy.sum_axis(Axis(0));
        dy.dot(&self.w.t())
    }

    pub fn backward_params(&self, x: &ArrayView2<T>, dy: &Array2<T>, grad: &mut Dense<T>) {
        grad.w += &x.t().dot(dy);
        grad.b += &dy.sum_axis(Axis(0));
    }
}

pub(crate) fn leaky<T: Real>(pre: &Array2<T>, slope: T) -> Array2<T> {
    pre.mapv(|v| leaky_relu(v, slope))
}

pub(crate) fn leaky_backward<T: Real>(pre: &Array2<T>, dy: &Array2<T>, slope: T) -> Array2<T> {
    let mut out = dy.clone();
    out.zip_mut_with(pre, |g, &p| *g *= leaky_relu_grad(p, slope));
    out
}

/// One LSTM direction. Gate column blocks are ordered input, forget, cell, output.
#[derive(Debug, Clone, PartialEq)]
pub struct Lstm<T> {
    pub w_x: Array2<T>,
    pub w_h: Array2<T>,
    pub b: Array1<T>,
}

pub struct LstmCache<T> {
    x: Array2<T>,
    /// Activated gates per row: `[i, f, g, o]`.
    gates: Array2<T>,
    c: Array2<T>,
    tanh_c: Array2<T>,
    h: Array2<T>,
    steps: usize,
    batch: usize,
    reverse: bool,
}

impl<T: Real> Lstm<T> {
    pub fn init(input: usize, hidden: usize, rng: &mut Rng) -> Self {
        let scale = 1.0 / ((input + hidden) as f64).sqrt();
        let mut b = Array1::zeros(4 * hidden);
        b.slice_mut(s![hidden..2 * hidden]).fill(T::one());
        Self {
            w_x: uniform_matrix(input, 4 * hidden, scale, rng),
            w_h: uniform_matrix(hidden, 4 * hidden, scale, rng),
            b,
        }
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w_x: Array2::zeros((input, 4 * hidden)),
            w_h: Array2::zeros((hidden, 4 * hidden)),
            b: Array1::zeros(4 * hidden),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_h.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.w_x.nrows()
    }

    fn order(steps: usize, reverse: bool) -> impl Iterator<Item = usize> {
        (0..steps).map(move |s| if reverse { steps - 1 - s } else { s })
    }

    pub fn forward(&self, x: &Array2<T>, steps: usize, batch: usize, reverse: bool) -> (Array2<T>, LstmCache<T>) {
        let hd = self.hidden();
        let rows = steps * batch;
        debug_assert_eq!(x.nrows(), rows);
        let pre = x.dot(&self.w_x) + &self.b;
        let mut gates = Array2::<T>::zeros((rows, 4 * hd));
        let mut c_all = Array2::<T>::zeros((rows, hd));
        let mut tanh_all = Array2::<T>::zeros((rows, hd));
        let mut h_all = Array2::<T>::zeros((rows, hd));
        let mut h_prev = Array2::<T>::zeros((batch, hd));
        let mut c_prev = Array2::<T>::zeros((batch, hd));

        for t in Self::order(steps, reverse) {
            let block = t * batch..(t + 1) * batch;
            let mut z = pre.slice(s![block.clone(), ..]).to_owned();
            z += &h_prev.dot(&self.w_h);
            for b in 0..batch {
                let zr = z.row(b);
                let row = t * batch + b;
                for j in 0..hd {
                    let ig = sigmoid(zr[j]);
                    let fg = sigmoid(zr[hd + j]);
                    let gg = zr[2 * hd + j].tanh();
                    let og = sigmoid(zr[3 * hd + j]);
                    let c = fg * c_prev[[b, j]] + ig * gg;
                    let tc = c.tanh();
                    gates[[row, j]] = ig;
                    gates[[row, hd + j]] = fg;
                    gates[[row, 2 * hd + j]] = gg;
                    gates[[row, 3 * hd + j]] = og;
                    c_all[[row, j]] = c;
                    tanh_all[[row, j]] = tc;
                    h_all[[row, j]] = og * tc;
                }
            }
            h_prev = h_all.slice(s![block.clone(), ..]).to_owned();
            c_prev = c_all.slice(s![block, ..]).to_owned();
        }
        let cache = LstmCache {
            x: x.clone(),
            gates,
            c: c_all,
            tanh_c: tanh_all,
            h: h_all.clone(),
            steps,
            batch,
            reverse,
        };
        (h_all, cache)
    }

    /// Backpropagation through time. `dh` is the gradient w.r.t. every output row.
    pub fn backward(&self, cache: &LstmCache<T>, dh: &ArrayView2<T>, grad: &mut Lstm<T>) -> Array2<T> {
        let hd = self.hidden();
        let (steps, batch) = (cache.steps, cache.batch);
        let rows = steps * batch;
        let mut dz_all = Array2::<T>::zeros((rows, 4 * hd));
        let mut dh_next = Array2::<T>::zeros((batch, hd));
        let mut dc_next = Array2::<T>::zeros((batch, hd));
        let order: Vec<usize> = Self::order(steps, cache.reverse).collect();
        let one = T::one();

        for (pos, &t) in order.iter().enumerate().rev() {
            let prev = if pos == 0 { None } else { Some(order[pos - 1]) };
            let mut dz = Array2::<T>::zeros((batch, 4 * hd));
            for b in 0..batch {
                let row = t * batch + b;
                for j in 0..hd {
                    let ig = cache.gates[[row, j]];
                    let fg = cache.gates[[row, hd + j]];
                    let gg = cache.gates[[row, 2 * hd + j]];
                    let og = cache.gates[[row, 3 * hd + j]];
                    let tc = cache.tanh_c[[row, j]];
                    let c_prev = match prev {
                        Some(p) => cache.c[[p * batch + b, j]],
                        None => T::zero(),
                    };
                    let dhv = dh[[row, j]] + dh_next[[b, j]];
                    let d_o = dhv * tc;
                    let dc = dc_next[[b, j]] + dhv * og * (one - tc * tc);
                    let d_i = dc * gg;
                    let d_g = dc * ig;
                    let d_f = dc * c_prev;
                    dc_next[[b, j]] = dc * fg;
                    dz[[b, j]] = d_i * ig * (one - ig);
                    dz[[b, hd + j]] = d_f * fg * (one - fg);
                    dz[[b, 2 * hd + j]] = d_g * (one - gg * gg);
                    dz[[b, 3 * hd + j]] = d_o * og * (one - og);
                }
            }
            if let Some(p) = prev {
                let h_prev = cache.h.slice(s![p * batch..(p + 1) * batch, ..]);
                grad.w_h += &h_prev.t().dot(&dz);
            }
            dh_next = dz.dot(&self.w_h.t());
            dz_all.slice_mut(s![t * batch..(t + 1) * batch, ..]).assign(&dz);
        }
        grad.w_x += &cache.x.t().dot(&dz_all);
        grad.b += &dz_all.sum_axis(Axis(0));
        dz_all.dot(&self.w_x.t())
    }
}

/// Bidirectional LSTM; the output concatenates forward and backward hidden states.
#[derive(Debug, Clone, PartialEq)]
pub struct BiLstm<T> {
    pub fwd: Lstm<T>,
    pub bwd: Lstm<T>,
}

pub struct BiLstmCache<T> {
    fwd: LstmCache<T>,
    bwd: LstmCache<T>,
}

impl<T: Real> BiLstm<T> {
    pub fn init(input: usize, hidden: usize, rng: &mut Rng) -> Self {
        let fwd = Lstm::init(input, hidden, rng);
        let bwd = Lstm::init(input, hidden, rng);
        Self { fwd, bwd }
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            fwd: Lstm::zeros(input, hidden),
            bwd: Lstm::zeros(input, hidden),
        }
    }

    pub fn output_dim(&self) -> usize {
        2 * self.fwd.hidden()
    }

    pub fn forward(&self, x: &Array2<T>, steps: usize, batch: usize) -> (Array2<T>, BiLstmCache<T>) {
        let (hf, cf) = self.fwd.forward(x, steps, batch, false);
        let (hb, cb) = self.bwd.forward(x, steps, batch, true);
        let out = ndarray::concatenate(Axis(1), &[hf.view(), hb.view()]).expect("equal rows");
        (out, BiLstmCache { fwd: cf, bwd: cb })
    }

    pub fn backward(&self, cache: &BiLstmCache<T>, dy: &Array2<T>, grad: &mut BiLstm<T>) -> Array2<T> {
        let h = self.fwd.hidden();
        let mut dx = self.fwd.backward(&cache.fwd, &dy.slice(s![.., ..h]), &mut grad.fwd);
        dx += &self.bwd.backward(&cache.bwd, &dy.slice(s![.., h..]), &mut grad.bwd);
        dx
    }
}
