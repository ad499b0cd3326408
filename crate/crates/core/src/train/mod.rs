//! Training loop with Adadelta, per-step metric projection, validation-based early
//! stopping and resumable checkpoints.

mod gradcheck;
mod optim;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

pub use gradcheck::{gradient_check, gradient_check_against, GradCheckReport, GroupError};
pub use optim::{adadelta_step, clip_global_norm, OptimizerState};

use crate::data::{compose_minibatch, GeneratorSpec, LabeledSet, MiniBatch};
use crate::error::{Error, Result};
use crate::eval::{episode_sets, evaluate_sets, EvalReport};
use crate::loss::{batch_loss_and_grad, class_balance_weights, LossValues, LossWeights, PriorModel};
use crate::metric::project_in_place;
use crate::model::{backward_batch, forward_batch, Model, Params};
use crate::real::Real;
use crate::seed::{self, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Sets per mini-batch (`N`).
    pub batch_sets: usize,
    /// Points per set (`n`).
    pub set_size: usize,
    pub lambda: f64,
    pub learning_rate: f64,
    pub adadelta_rho: f64,
    pub adadelta_eps: f64,
    pub steps: u64,
    pub seed: u64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub clip_norm: f64,
    /// Steps between validations; 0 disables validation and early stopping.
    pub validation_interval: u64,
    pub validation_episodes: usize,
    /// Validations without MR improvement before stopping; 0 never stops early.
    pub patience: usize,
    /// Steps between checkpoints; 0 disables periodic checkpoints.
    pub checkpoint_interval: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_sets: 200,
            set_size: 72,
            lambda: 5.0,
            learning_rate: 5.0,
            adadelta_rho: 0.95,
            adadelta_eps: 1e-8,
            steps: 3000,
            seed: 0,
            clip_norm: 10.0,
            validation_interval: 100,
            validation_episodes: 100,
            patience: 10,
            checkpoint_interval: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, reason: &str| {
            Err(Error::InvalidConfig {
                key: format!("train.{key}"),
                reason: reason.into(),
            })
        };
        if self.batch_sets < 1 {
            return bad("batch_sets", "must be >= 1");
        }
        if self.set_size < 2 {
            return bad("set_size", "must be >= 2");
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return bad("lambda", "must be finite and >= 0");
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad("learning_rate", "must be finite and > 0");
        }
        if !(self.adadelta_rho > 0.0 && self.adadelta_rho < 1.0) {
            return bad("adadelta_rho", "must lie in (0, 1)");
        }
        if !(self.adadelta_eps > 0.0) {
            return bad("adadelta_eps", "must be > 0");
        }
        if !(self.clip_norm >= 0.0) {
            return bad("clip_norm", "must be >= 0");
        }
        if self.validation_interval > 0 && self.validation_episodes < 1 {
            return bad("validation_episodes", "must be >= 1 when validating");
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, recorded in saved models.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub l_ca: f64,
    pub l_cc: f64,
    pub l_tot: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub step: u64,
    pub mr_mean: f64,
    pub nmi_mean: f64,
    pub count_accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub steps: Vec<StepRecord>,
    pub validations: Vec<ValidationRecord>,
    /// Seconds since the start of the run, one entry per step record.
    pub elapsed: Vec<f64>,
    pub stopped_early: bool,
    pub best_step: Option<u64>,
}

#[derive(Serialize)]
struct ValidationLine<'a> {
    step: u64,
    validation: &'a ValidationRecord,
}

impl TrainHistory {
    /// Line-delimited JSON: step records interleaved with validation records.
    /// Wall-clock data is left out so equal-seed runs produce identical logs.
    pub fn to_log(&self) -> String {
        let mut out = String::new();
        let mut vals = self.validations.iter().peekable();
        for rec in &self.steps {
            out.push_str(&serde_json::to_string(rec).expect("record serializes"));
            out.push('\n');
            while let Some(v) = vals.next_if(|v| v.step <= rec.step) {
                out.push_str(&serde_json::to_string(&ValidationLine { step: v.step, validation: v }).expect("serializes"));
                out.push('\n');
            }
        }
        for v in vals {
            out.push_str(&serde_json::to_string(&ValidationLine { step: v.step, validation: v }).expect("serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write_log(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_log().as_bytes())?;
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer_pretty(f, self)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EarlyStopping {
    /// Lowest validation MR so far; `None` before the first validation.
    pub best_mr: Option<f64>,
    pub best_step: Option<u64>,
    pub bad_validations: usize,
}

/// Mini-batch of step `step`.
pub fn training_batch(spec: &GeneratorSpec, config: &TrainConfig, step: u64) -> Result<MiniBatch> {
    let s = seed::stream_seed(Stream::Train, config.seed, step);
    compose_minibatch(spec, config.batch_sets, config.set_size, s)
}

pub(crate) fn set_matrices<T: Real>(sets: &[LabeledSet]) -> Vec<Array2<T>> {
    sets.iter().map(|s| s.point_matrix().mapv(T::from_f64_lossy)).collect()
}

/// Loss and parameter gradient of one mini-batch.
pub fn batch_gradient<T: Real>(
    model: &Model<T>,
    batch: &MiniBatch,
    weights: &LossWeights,
    lambda: f64,
) -> Result<(LossValues, Params<T>)> {
    let mats = set_matrices::<T>(&batch.sets);
    let views: Vec<ArrayView2<T>> = mats.iter().map(|m| m.view()).collect();
    let (outs, cache) = forward_batch(&model.params, &model.config, &views)?;
    let ks: Vec<usize> = batch.sets.iter().map(|s| s.k).collect();
    let (values, grads) = batch_loss_and_grad(&outs, &batch.pairwise, &ks, weights, lambda)?;
    Ok((values, backward_batch(&model.params, &model.config, &cache, &grads)))
}

/// Resumable training state.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub model: Model<T>,
    pub config: TrainConfig,
    pub spec: GeneratorSpec,
    pub weights: LossWeights,
    pub optimizer: OptimizerState<T>,
    pub history: TrainHistory,
    pub early: EarlyStopping,
    /// Parameters at the best validation so far.
    pub best: Option<Params<T>>,
    /// Where periodic checkpoints go when `checkpoint_interval > 0`.
    pub checkpoint_path: Option<PathBuf>,
    validation_sets: Vec<LabeledSet>,
    started: Instant,
    elapsed_offset: f64,
}

impl<T: Real> Trainer<T> {
    pub fn new(model: Model<T>, config: TrainConfig, spec: GeneratorSpec) -> Result<Self> {
        config.validate()?;
        spec.validate()?;
        if spec.k_max != model.config.k_max {
            return Err(Error::InvalidConfig {
                key: "data.k_max".into(),
                reason: format!("generator k_max {} differs from model k_max {}", spec.k_max, model.config.k_max),
            });
        }
        if model.config.embedding.input_dim() != 2 || model.config.embedding.output_dim() != 2 {
            return Err(Error::InvalidConfig {
                key: "model.embedding".into(),
                reason: "training on generated 2D sets needs the identity-2d embedding".into(),
            });
        }
        if model.config.metric.mode.is_active() && model.config.metric.set_size != config.set_size {
            return Err(Error::InvalidConfig {
                key: "metric.set_size".into(),
                reason: format!(
                    "metric block built for n={} but training uses n={}",
                    model.config.metric.set_size, config.set_size
                ),
            });
        }
        let weights = class_balance_weights(config.set_size, spec.k_max, PriorModel::for_generator(spec.size_policy))?;
        let optimizer = OptimizerState::new(&model.params);
        let validation_sets = if config.validation_interval > 0 {
            episode_sets(&spec, config.set_size, Stream::Validation, config.seed, config.validation_episodes)?
        } else {
            Vec::new()
        };
        Ok(Self {
            model,
            config,
            spec,
            weights,
            optimizer,
            history: TrainHistory::default(),
            early: EarlyStopping::default(),
            best: None,
            checkpoint_path: None,
            validation_sets,
            started: Instant::now(),
            elapsed_offset: 0.0,
        })
    }

    /// Rebuilds a trainer from checkpointed state.
    #[allow(clippy::too_many_arguments)]
    pub fn restore(
        model: Model<T>,
        config: TrainConfig,
        spec: GeneratorSpec,
        optimizer: OptimizerState<T>,
        history: TrainHistory,
        early: EarlyStopping,
        best: Option<Params<T>>,
    ) -> Result<Self> {
        let mut t = Self::new(model, config, spec)?;
        t.elapsed_offset = history.elapsed.last().copied().unwrap_or(0.0);
        t.optimizer = optimizer;
        t.history = history;
        t.early = early;
        t.best = best;
        Ok(t)
    }

    pub fn step(&self) -> u64 {
        self.optimizer.step
    }

    pub fn finished(&self) -> bool {
        self.step() >= self.config.steps || self.history.stopped_early
    }

    /// One optimization step.
    pub fn train_step(&mut self) -> Result<LossValues> {
        let step = self.step();
        let batch = training_batch(&self.spec, &self.config, step)?;
        let (values, mut grad) = batch_gradient(&self.model, &batch, &self.weights, self.config.lambda)?;
        if !values.l_tot.is_finite() || !grad.all_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                batch_seed: batch.seed,
            });
        }
        grad.metric_mode_mask(self.model.config.metric.mode);
        if self.config.clip_norm > 0.0 {
            clip_global_norm(&mut grad, self.config.clip_norm);
        }
        adadelta_step(
            &mut self.optimizer,
            &mut self.model.params,
            &grad,
            self.config.adadelta_rho,
            self.config.adadelta_eps,
            self.config.learning_rate,
        )?;
        if let Some(m) = &mut self.model.params.metric {
            project_in_place(&mut m.a, self.model.config.metric.mode)?;
        }
        self.history.steps.push(StepRecord {
            step,
            l_ca: values.l_ca,
            l_cc: values.l_cc,
            l_tot: values.l_tot,
        });
        self.history
            .elapsed
            .push(self.elapsed_offset + self.started.elapsed().as_secs_f64());
        Ok(values)
    }

    /// Scores the current parameters on the fixed validation episodes.
    pub fn validate(&self) -> Result<EvalReport> {
        if self.validation_sets.is_empty() {
            return Err(Error::Empty("validation episodes"));
        }
        evaluate_sets(&self.model, &self.validation_sets, self.config.seed)
    }

    fn after_step(&mut self) -> Result<()> {
        let step = self.step();
        let interval = self.config.validation_interval;
        if interval > 0 && (step % interval == 0 || step == self.config.steps) {
            let r = self.validate()?;
            self.history.validations.push(ValidationRecord {
                step,
                mr_mean: r.mr_mean,
                nmi_mean: r.nmi_mean,
                count_accuracy: r.count_accuracy,
            });
            if self.early.best_mr.is_none_or(|b| r.mr_mean < b) {
                self.early = EarlyStopping {
                    best_mr: Some(r.mr_mean),
                    best_step: Some(step),
                    bad_validations: 0,
                };
                self.best = Some(self.model.params.clone());
            } else {
                self.early.bad_validations += 1;
                if self.config.patience > 0 && self.early.bad_validations >= self.config.patience {
                    self.history.stopped_early = true;
                }
            }
            self.history.best_step = self.early.best_step;
        }
        if let Some(path) = &self.checkpoint_path {
            let every = self.config.checkpoint_interval;
            if every > 0 && step % every == 0 {
                crate::checkpoint::save_checkpoint(path, self)?;
            }
        }
        Ok(())
    }

    /// Runs until the step budget is spent or early stopping triggers.
    pub fn run(&mut self) -> Result<()> {
        self.run_until(self.config.steps)
    }

    /// Runs up to (not including) step `stop`, bounded by the configured budget.
    pub fn run_until(&mut self, stop: u64) -> Result<()> {
        while self.step() < stop.min(self.config.steps) && !self.history.stopped_early {
            self.train_step()?;
            self.after_step()?;
        }
        Ok(())
    }

    /// The model to ship: best validated parameters when validation ran, else the last.
    pub fn into_result(self) -> (Model<T>, TrainHistory) {
        let Self { mut model, best, history, .. } = self;
        if let Some(best) = best {
            model.params = best;
        }
        (model, history)
    }
}

/// Trains `model` on sets drawn from `spec`.
pub fn train<T: Real>(model: Model<T>, config: TrainConfig, spec: GeneratorSpec) -> Result<(Model<T>, TrainHistory)> {
    let mut trainer = Trainer::new(model, config, spec)?;
    trainer.run()?;
    Ok(trainer.into_result())
}

#[cfg(test)]
mod tests;
