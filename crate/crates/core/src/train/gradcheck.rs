//! Central finite-difference verification of the analytic gradient of `L_tot`.

use serde::{Deserialize, Serialize};

use super::batch_gradient;
use crate::data::MiniBatch;
use crate::error::Result;
use crate::loss::LossWeights;
use crate::metric::MetricMode;
use crate::model::{Model, Params};
use crate::seed;

const STEP: f64 = 1e-5;
/// Gradients smaller than this are compared in absolute terms.
const FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupError {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub groups: Vec<GroupError>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Compares the model's own analytic gradient with finite differences, checking at
/// most `per_tensor` coordinates of every tensor (a fixed pseudo-random sample).
pub fn gradient_check(
    model: &Model<f64>,
    batch: &MiniBatch,
    weights: &LossWeights,
    lambda: f64,
    tolerance: f64,
    per_tensor: usize,
) -> Result<GradCheckReport> {
    let (_, mut analytic) = batch_gradient(model, batch, weights, lambda)?;
    analytic.metric_mode_mask(model.config.metric.mode);
    gradient_check_against(model, batch, weights, lambda, &analytic, tolerance, per_tensor)
}

/// Same as [`gradient_check`] but against a caller-supplied gradient.
pub fn gradient_check_against(
    model: &Model<f64>,
    batch: &MiniBatch,
    weights: &LossWeights,
    lambda: f64,
    analytic: &Params<f64>,
    tolerance: f64,
    per_tensor: usize,
) -> Result<GradCheckReport> {
    let loss = |p: &Params<f64>| -> Result<f64> {
        let m = Model {
            config: model.config.clone(),
            params: p.clone(),
        };
        Ok(batch_gradient(&m, batch, weights, lambda)?.0.l_tot)
    };
    let mode = model.config.metric.mode;
    let d = model.config.fc_units;
    let analytic_flat: Vec<Vec<f64>> = analytic.tensors().iter().map(|(_, t)| t.iter().copied().collect()).collect();
    let names: Vec<(String, usize)> = model.params.tensors().iter().map(|(n, t)| (n.clone(), t.len())).collect();

    let mut groups = Vec::new();
    let mut params = model.params.clone();
    for (ti, (name, len)) in names.iter().enumerate() {
        let mut coords = if *len <= per_tensor {
            (0..*len).collect()
        } else {
            let mut rng = seed::rng(seed::derive(0x6772_6164, ti as u64));
            rand::seq::index::sample(&mut rng, *len, per_tensor).into_vec()
        };
        coords.sort_unstable();
        let mut worst: f64 = 0.0;
        let mut checked = 0;
        for idx in coords {
            if name == "metric.a" {
                let on_diagonal = idx % (d + 1) == 0;
                if mode == MetricMode::Euclidean || (mode == MetricMode::Diagonal && !on_diagonal) {
                    continue;
                }
            }
            let original = coord(&mut params, ti, idx, None);
            coord(&mut params, ti, idx, Some(original + STEP));
            let plus = loss(&params)?;
            coord(&mut params, ti, idx, Some(original - STEP));
            let minus = loss(&params)?;
            coord(&mut params, ti, idx, Some(original));
            let numeric = (plus - minus) / (2.0 * STEP);
            let a = analytic_flat[ti][idx];
            let rel = (numeric - a).abs() / numeric.abs().max(a.abs()).max(FLOOR);
            worst = worst.max(rel);
            checked += 1;
        }
        groups.push(GroupError {
            name: name.clone(),
            max_rel_error: worst,
            checked,
        });
    }
    let max_rel_error = groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        groups,
        max_rel_error,
        tolerance,
        pass: max_rel_error <= tolerance,
    })
}

/// Reads coordinate `idx` of tensor `ti`, optionally overwriting it.
fn coord(params: &mut Params<f64>, ti: usize, idx: usize, value: Option<f64>) -> f64 {
    let mut tensors = params.tensors_mut();
    let slot = tensors[ti].1.iter_mut().nth(idx).expect("index within tensor");
    let old = *slot;
    if let Some(v) = value {
        *slot = v;
    }
    old
}
