use crate::error::{Error, Result};
use crate::model::Params;
use crate::real::Real;

/// Adadelta accumulators: running means of squared gradients (`v`) and squared
/// updates (`u`), plus the number of steps taken.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub v: Params<T>,
    pub u: Params<T>,
    pub step: u64,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(params: &Params<T>) -> Self {
        Self {
            v: params.zeros_like(),
            u: params.zeros_like(),
            step: 0,
        }
    }
}

/// ```text
/// v <- rho v + (1 - rho) g^2
/// d  = sqrt(u + eps) / sqrt(v + eps) * g
/// u <- rho u + (1 - rho) d^2
/// x <- x - lr d
/// ```
pub fn adadelta_step<T: Real>(
    state: &mut OptimizerState<T>,
    params: &mut Params<T>,
    grads: &Params<T>,
    rho: f64,
    eps: f64,
    lr: f64,
) -> Result<()> {
    let shapes = |p: &Params<T>| p.tensors().iter().map(|(_, t)| t.shape().to_vec()).collect::<Vec<_>>();
    let want = shapes(params);
    if shapes(grads) != want || shapes(&state.v) != want || shapes(&state.u) != want {
        return Err(Error::Shape("optimizer state, parameters and gradients disagree".into()));
    }
    if !grads.all_finite() {
        return Err(Error::NonFinite(format!("gradient at step {}", state.step)));
    }
    let (rho, eps, lr) = (T::from_f64_lossy(rho), T::from_f64_lossy(eps), T::from_f64_lossy(lr));
    let one_minus = T::one() - rho;
    let g_all = grads.tensors();
    let v_all = state.v.tensors_mut();
    let u_all = state.u.tensors_mut();
    for ((((_, mut x), (_, g)), (_, mut v)), (_, mut u)) in params.tensors_mut().into_iter().zip(g_all).zip(v_all).zip(u_all) {
        ndarray::Zip::from(&mut x)
            .and(&g)
            .and(&mut v)
            .and(&mut u)
            .for_each(|x, &g, v, u| {
                *v = rho * *v + one_minus * g * g;
                let d = (*u + eps).sqrt() / (*v + eps).sqrt() * g;
                *u = rho * *u + one_minus * d * d;
                *x -= lr * d;
            });
    }
    state.step += 1;
    Ok(())
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut Params<T>, max_norm: f64) -> f64 {
    let norm = grads
        .tensors()
        .iter()
        .map(|(_, t)| t.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        grads.scale(T::from_f64_lossy(max_norm / norm));
    }
    norm
}
