use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{loss_and_grad, loss_batch, ModelParams};
use crate::optim::{clip_global, OptimizerState};
use crate::probes::{
    directional_probe, fd_step, sample_gradient_noise, CurvatureReport, NoiseReport, SmoothnessRecord,
    SmoothnessTrace,
};
use crate::rng::{stream, Purpose};
use crate::tasks::{sample_batch, TaskBatch};

use super::config::ExperimentConfig;

/// A run is declared diverged once its minibatch loss exceeds this multiple
/// of the first minibatch loss on [`DIVERGENCE_PATIENCE`] consecutive
/// iterations, or any loss or gradient turns non-finite.
pub const DIVERGENCE_FACTOR: f64 = 1e6;

/// Consecutive blown-up minibatches needed to call a run diverged. Single
/// outlier prompts can push one minibatch past the factor while the clipped
/// iterates stay healthy.
pub const DIVERGENCE_PATIENCE: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    /// Minibatch loss at the parameters the step started from.
    pub loss: f64,
    /// Minibatch gradient norm before clipping.
    pub grad_norm: f64,
    pub step_norm: f64,
    pub dir_smooth: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub iter: usize,
    pub eval_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSnapshot {
    pub iter: usize,
    pub report: NoiseReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub name: String,
    pub seed: u64,
    pub optimizer: String,
    pub lr: f64,
    pub rows: Vec<TraceRow>,
    pub evals: Vec<EvalRow>,
    pub curvature: Vec<CurvatureReport>,
    pub smoothness: SmoothnessTrace,
    pub noise: Vec<NoiseSnapshot>,
    /// Iteration at which the run blew up; rows stop just before it.
    pub diverged_at: Option<usize>,
    pub wall_clock_secs: f64,
}

impl TrainTrace {
    pub fn diverged(&self) -> bool {
        self.diverged_at.is_some()
    }

    /// Last evaluation loss, or the last minibatch loss without evaluations.
    pub fn final_loss(&self) -> Option<f64> {
        match self.evals.last() {
            Some(e) => Some(e.eval_loss),
            None => self.rows.last().map(|r| r.loss),
        }
    }

    pub fn eval_at(&self, iter: usize) -> Option<f64> {
        self.evals.iter().find(|e| e.iter == iter).map(|e| e.eval_loss)
    }

    pub fn curvature_at(&self, iter: usize) -> Option<&CurvatureReport> {
        self.curvature.iter().find(|c| c.iteration == iter)
    }
}

fn is_numeric(e: &Error) -> bool {
    matches!(e, Error::NumericOverflow { .. } | Error::NonFinite(_))
}

/// Trains one model from `(config, seed)`.
///
/// Iteration `t` samples a fresh minibatch, takes the gradient at
/// `θ_{t−1}`, clips it and steps to `θ_t`. Directional smoothness at `t` is
/// measured at `θ_{t−1}` along the step just taken; evaluation, curvature and
/// noise probes scheduled at `t` see `θ_t`. Divergence ends the run early and
/// is recorded in the trace rather than returned as an error.
pub fn run_training(config: &ExperimentConfig, seed: u64) -> Result<TrainTrace> {
    config.validate()?;
    let start = Instant::now();
    let layout = config.layout()?;
    let probes = &config.probes;
    let mut params = ModelParams::init(layout, config.model.init_std, &mut stream(seed, Purpose::Init))?;
    let mut state = OptimizerState::new(config.optimizer.optimizer_kind(), &layout)?;
    let lr = config.optimizer.lr;

    let eval_batch = if probes.eval_every > 0 {
        Some(sample_batch(&config.task, probes.eval_batch, &mut stream(config.eval_seed, Purpose::EvalData))?)
    } else {
        None
    };
    let curvature_batch = if probes.needs_curvature_batch() {
        Some(sample_batch(
            &config.task,
            probes.curvature_batch,
            &mut stream(config.eval_seed, Purpose::CurvatureData),
        )?)
    } else {
        None
    };
    let mut train_rng = stream(seed, Purpose::TrainData);
    let mut noise_rng = stream(seed, Purpose::Noise);

    let mut trace = TrainTrace {
        name: config.name.clone(),
        seed,
        optimizer: config.optimizer.kind.as_str().to_string(),
        lr,
        rows: Vec::with_capacity(config.iterations),
        evals: Vec::new(),
        curvature: Vec::new(),
        smoothness: SmoothnessTrace::default(),
        noise: Vec::new(),
        diverged_at: None,
        wall_clock_secs: 0.0,
    };

    let outcome = (|| -> Result<()> {
        checkpoint(config, &params, 0, eval_batch.as_ref(), curvature_batch.as_ref(), &mut noise_rng, &mut trace)?;
        let mut first_loss = None;
        let mut blown_up = 0;
        for t in 1..=config.iterations {
            let batch = sample_batch(&config.task, config.batch_size, &mut train_rng)?;
            let (loss, grad) = loss_and_grad(&params, &batch)?;
            let reference = *first_loss.get_or_insert(loss);
            blown_up = if loss > DIVERGENCE_FACTOR * reference { blown_up + 1 } else { 0 };
            if !loss.is_finite() || !grad.is_finite() || blown_up >= DIVERGENCE_PATIENCE {
                trace.diverged_at = Some(t);
                return Ok(());
            }
            let grad_norm = grad.norm();
            let clipped = clip_global(&grad, config.clip_threshold)?;
            let previous = params.clone();
            state.step(&mut params, &clipped, lr)?;
            let step = params.delta_from(&previous);
            let step_norm = step.norm();

            let mut dir_smooth = None;
            if probes.smoothness_every > 0 && t % probes.smoothness_every == 0 && step_norm > 0.0 {
                let batch = curvature_batch.as_ref().expect("curvature batch");
                let probe = directional_probe(&previous, batch, step.as_slice(), fd_step(&previous))?;
                dir_smooth = Some(probe.smoothness);
                trace.smoothness.records.push(SmoothnessRecord {
                    iteration: t,
                    grad_norm: probe.grad_norm,
                    directional_smoothness: probe.smoothness,
                });
            }
            trace.rows.push(TraceRow {
                iter: t,
                loss,
                grad_norm,
                step_norm,
                dir_smooth,
            });
            checkpoint(config, &params, t, eval_batch.as_ref(), curvature_batch.as_ref(), &mut noise_rng, &mut trace)?;
        }
        Ok(())
    })();

    match outcome {
        Ok(()) => {}
        Err(e) if is_numeric(&e) => {
            // a probe or step hit a non-finite value: treat as divergence at the next row
            trace.diverged_at = Some(trace.rows.len() + 1);
        }
        Err(e) => return Err(e),
    }
    trace.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(trace)
}

fn checkpoint(
    config: &ExperimentConfig,
    params: &ModelParams,
    t: usize,
    eval_batch: Option<&TaskBatch>,
    curvature_batch: Option<&TaskBatch>,
    noise_rng: &mut crate::rng::LabRng,
    trace: &mut TrainTrace,
) -> Result<()> {
    let probes = &config.probes;
    if let Some(batch) = eval_batch {
        if t % probes.eval_every == 0 || t == config.iterations {
            let eval_loss = loss_batch(params, batch)?;
            if !eval_loss.is_finite() {
                return Err(Error::NonFinite(format!("evaluation loss at iteration {t}")));
            }
            trace.evals.push(EvalRow { iter: t, eval_loss });
        }
    }
    if probes.curvature_iters.contains(&t) {
        let batch = curvature_batch.expect("curvature batch");
        trace.curvature.push(CurvatureReport::measure(params, batch, t)?);
    }
    if probes.noise_iters.contains(&t) {
        let report = sample_gradient_noise(params, &config.task, probes.noise_samples, probes.noise_batch, noise_rng)?;
        trace.noise.push(NoiseSnapshot { iter: t, report });
    }
    Ok(())
}
