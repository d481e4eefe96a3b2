//! Multi-step rollout MSE training for either world model.
//!
//! Rollouts are closed-loop (the model feeds on its own predictions) because
//! validation and deployment are closed-loop; teacher forcing would hide the
//! compounding-error failure mode this laboratory exists to measure. The loss
//! is computed in standardized state units so meters, radians, and their
//! rates are commensurable, with configurable per-group weights.

use crate::autodiff::Real;
use crate::nn::{clip_gradient_norm, AdamState, NnError};
use crate::replay::{ReplayBuffer, ReplayError, SequenceSample, StoredEpisode};
use crate::rng::stream;
use crate::types::{state_delta, Episode, State12, GROUP_RANGES};
use crate::worldmodel::{
    physics_rollout_tape, rnn_rollout_tape, AnyModel, ModelError, RolloutStart, TapeRollout,
    WorldModel,
};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::time::Instant;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("replay buffer is empty")]
    EmptyBuffer,
    #[error(transparent)]
    Replay(#[from] ReplayError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("no held-out episode is long enough for {horizon}-step validation")]
    NoValidationEpisode { horizon: usize },
}

/// Per-group loss weights (position, velocity, attitude, rates).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub position: f64,
    pub velocity: f64,
    pub attitude: f64,
    pub rates: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            position: 1.0,
            velocity: 1.0,
            attitude: 1.0,
            rates: 1.0,
        }
    }
}

impl LossWeights {
    pub fn per_dim(&self) -> [f64; 12] {
        let by_group = [self.position, self.velocity, self.attitude, self.rates];
        let mut out = [0.0; 12];
        for (g, (lo, hi)) in GROUP_RANGES.iter().enumerate() {
            for d in *lo..*hi {
                out[d] = by_group[g];
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Training rollout horizon, steps.
    pub horizon: usize,
    pub batch: usize,
    pub total_updates: u64,
    pub lr: f64,
    pub grad_clip: f64,
    pub validation_period: u64,
    pub validation_horizon: usize,
    pub validation_rollouts: usize,
    /// History window for recurrent hidden-state initialization.
    pub history: usize,
    pub weights: LossWeights,
    pub seed: u64,
    /// Fraction of episodes held out from training batches.
    pub holdout_fraction: f64,
    /// Interleave one fresh excitation cycle per 50 updates (the training
    /// loop stays on a frozen buffer when off).
    pub online_collect: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            horizon: 16,
            batch: 32,
            total_updates: 5000,
            lr: 3e-4,
            grad_clip: 10.0,
            validation_period: 250,
            validation_horizon: 128,
            validation_rollouts: 8,
            history: 8,
            weights: LossWeights::default(),
            seed: 0,
            holdout_fraction: 0.1,
            online_collect: false,
        }
    }
}

/// Updates between fresh excitation cycles when `online_collect` is on.
pub const ONLINE_COLLECT_PERIOD: u64 = 50;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogEntry {
    pub update: u64,
    pub loss: f64,
    pub grad_norm: f64,
    pub skipped: bool,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValidationEntry {
    pub update: u64,
    /// Raw-unit per-group RMSE (position, velocity, attitude, rates).
    pub group_rmse: [f64; 4],
    /// Standardized overall RMSE used for best-checkpoint selection.
    pub overall: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub entries: Vec<LogEntry>,
    pub validations: Vec<ValidationEntry>,
}

impl TrainLog {
    /// CSV with one row per update; validation columns are filled on the
    /// updates where validation ran.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "update,loss,grad_norm,skipped,wall_ms,val_pos,val_vel,val_att,val_rate,val_overall\n",
        );
        let mut by_update: std::collections::HashMap<u64, &ValidationEntry> =
            std::collections::HashMap::new();
        for v in &self.validations {
            by_update.insert(v.update, v);
        }
        for e in &self.entries {
            let val = by_update.get(&e.update);
            let val_cols = match val {
                Some(v) => format!(
                    "{:.9e},{:.9e},{:.9e},{:.9e},{:.9e}",
                    v.group_rmse[0], v.group_rmse[1], v.group_rmse[2], v.group_rmse[3], v.overall
                ),
                None => ",,,,".to_string(),
            };
            out.push_str(&format!(
                "{},{:.9e},{:.9e},{},{:.1},{}\n",
                e.update, e.loss, e.grad_norm, e.skipped as u8, e.wall_ms, val_cols
            ));
        }
        out
    }
}

/// Combined per-dimension factor so that
/// loss = mean over items/steps of sum_d factor[d] * err[d]^2
/// equals the weighted dimension-mean of standardized squared errors.
fn dim_factors(weights: &LossWeights, state_scale: &[f64; 12]) -> [f64; 12] {
    let w = weights.per_dim();
    let mut out = [0.0; 12];
    for d in 0..12 {
        out[d] = w[d] / (state_scale[d] * state_scale[d]) / 12.0;
    }
    out
}

fn item_start(item: &SequenceSample) -> RolloutStart {
    RolloutStart {
        state: item.init_state,
        history: item.history.clone(),
        provenance: Some((item.episode_id, item.start)),
    }
}

/// Mean standardized, weighted, squared one-step error of `pred` against
/// `truth`, accumulated per step (attitude wrapped).
fn plain_item_loss(pred: &[State12], truth: &[State12], factors: &[f64; 12]) -> (f64, usize) {
    let n = pred.len().min(truth.len());
    let mut acc = 0.0;
    for k in 0..n {
        let d = state_delta(&pred[k], &truth[k]);
        for i in 0..12 {
            acc += factors[i] * d[i] * d[i];
        }
    }
    (acc, n)
}

/// Rollout MSE of a model over a sampled batch, in standardized units.
/// Truncated rollouts contribute their completed steps.
pub fn rollout_loss(
    model: &AnyModel,
    batch: &[SequenceSample],
    weights: &LossWeights,
    dt: f64,
) -> Result<f64, TrainError> {
    let factors = dim_factors(weights, &model.norm().state_scale);
    let mut total = 0.0;
    let mut steps = 0usize;
    for item in batch {
        let pred = match model.rollout(&item_start(item), &item.actions, dt) {
            Ok(states) => states,
            Err(ModelError::Truncated { partial, .. }) => partial,
            Err(e) => return Err(e.into()),
        };
        let (acc, n) = plain_item_loss(&pred, &item.truth, &factors);
        total += acc;
        steps += n;
    }
    if steps == 0 {
        return Ok(0.0);
    }
    Ok(total / steps as f64)
}

/// Per-item tape build: unscaled loss sum, number of steps, and the gradient
/// of the loss sum with respect to the flat parameters.
fn item_loss_grad(
    model: &AnyModel,
    item: &SequenceSample,
    factors: &[f64; 12],
    dt: f64,
) -> Result<(f64, usize, Vec<f64>), TrainError> {
    let tape = crate::autodiff::Tape::new();
    let rollout: TapeRollout = match model {
        AnyModel::Physics(m) => physics_rollout_tape(&tape, m, &item.init_state, &item.actions, dt)?,
        AnyModel::Rnn(m) => {
            rnn_rollout_tape(&tape, m, &item.history, &item.init_state, &item.actions)?
        }
    };
    let n = rollout.states.len().min(item.truth.len());
    if n == 0 {
        return Ok((0.0, 0, vec![0.0; model.param_count()]));
    }
    let mut loss = tape.constant_scalar(0.0);
    for (k, pred) in rollout.states.iter().take(n).enumerate() {
        let truth = item.truth[k].to_flat();
        for i in 0..12 {
            let mut d = pred[i] - tape.constant_scalar(truth[i]);
            if (6..9).contains(&i) {
                d = tape.wrap_angle(d);
            }
            loss = loss + (d * d).scale(factors[i]);
        }
    }
    let value = tape.value_scalar(loss);
    let grads = tape.backward(loss).map_err(|_| NnError::NonFiniteGradient)?;
    Ok((value, n, grads.wrt(rollout.theta).to_vec()))
}

/// Loss and its gradient with respect to the flat parameters over a batch;
/// the differentiable mirror of [`rollout_loss`].
pub fn loss_and_grad(
    model: &AnyModel,
    batch: &[SequenceSample],
    weights: &LossWeights,
    dt: f64,
) -> Result<(f64, Vec<f64>), TrainError> {
    let factors = dim_factors(weights, &model.norm().state_scale);
    let per_item: Result<Vec<_>, TrainError> = batch
        .par_iter()
        .map(|item| item_loss_grad(model, item, &factors, dt))
        .collect();
    let per_item = per_item?;
    let total_steps: usize = per_item.iter().map(|(_, n, _)| n).sum();
    let mut grad = vec![0.0; model.param_count()];
    let mut loss = 0.0;
    if total_steps == 0 {
        return Ok((0.0, grad));
    }
    let inv = 1.0 / total_steps as f64;
    for (l, _, g) in &per_item {
        loss += l * inv;
        for (acc, gi) in grad.iter_mut().zip(g) {
            *acc += gi * inv;
        }
    }
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy)]
pub struct StepResult {
    pub loss: f64,
    pub grad_norm: f64,
    pub skipped: bool,
}

/// One Adam update on the batch gradient with norm clipping. A non-finite
/// gradient skips the update (parameters untouched) and reports it.
pub fn train_step(
    model: &mut AnyModel,
    batch: &[SequenceSample],
    opt: &mut AdamState,
    cfg: &TrainConfig,
    dt: f64,
) -> Result<StepResult, TrainError> {
    let (loss, mut grad) = loss_and_grad(model, batch, &cfg.weights, dt)?;
    let grad_norm = clip_gradient_norm(&mut grad, cfg.grad_clip);
    let mut params = model.params_flat();
    match opt.update(&mut params, &grad) {
        Ok(()) => {
            model.set_params_flat(&params);
            Ok(StepResult {
                loss,
                grad_norm,
                skipped: false,
            })
        }
        Err(NnError::NonFiniteGradient) => Ok(StepResult {
            loss,
            grad_norm,
            skipped: true,
        }),
        Err(e) => Err(e.into()),
    }
}

/// Episode ids held out of training: every k-th stored episode where
/// k = round(1 / holdout_fraction), or the last episode when the buffer is
/// too small for that rule to pick one.
pub fn holdout_ids(buffer: &ReplayBuffer, holdout_fraction: f64) -> Vec<u64> {
    if holdout_fraction <= 0.0 {
        return Vec::new();
    }
    let k = (1.0 / holdout_fraction).round().max(1.0) as usize;
    let mut out: Vec<u64> = buffer
        .episodes()
        .enumerate()
        .filter(|(i, _)| (i + 1) % k == 0)
        .map(|(_, e)| e.id)
        .collect();
    if out.is_empty() {
        if let Some(last) = buffer.episodes().last() {
            if buffer.len_episodes() >= 2 {
                out.push(last.id);
            }
        }
    }
    out
}

/// Validation on held-out 128-step windows: raw per-group RMSE plus the
/// standardized overall RMSE used to pick the best checkpoint.
pub fn validate(
    model: &AnyModel,
    buffer: &ReplayBuffer,
    holdout: &[u64],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    dt: f64,
) -> Result<ValidationEntry, TrainError> {
    let filter = |e: &StoredEpisode| holdout.contains(&e.id);
    let batch = buffer
        .sample_sequences_filtered(
            rng,
            cfg.validation_rollouts,
            cfg.validation_horizon,
            cfg.history,
            filter,
        )
        .map_err(|e| match e {
            ReplayError::NoEligibleEpisode { required, .. } => {
                TrainError::NoValidationEpisode { horizon: required }
            }
            other => TrainError::Replay(other),
        })?;
    let scale = model.norm().state_scale;
    let mut sq = [0.0f64; 12];
    let mut std_sq = 0.0;
    let mut n = 0usize;
    for item in &batch {
        let pred = match model.rollout(&item_start(item), &item.actions, dt) {
            Ok(states) => states,
            Err(ModelError::Truncated { partial, .. }) => partial,
            Err(e) => return Err(e.into()),
        };
        for (k, p) in pred.iter().enumerate() {
            let d = state_delta(p, &item.truth[k]);
            for i in 0..12 {
                sq[i] += d[i] * d[i];
                std_sq += (d[i] / scale[i]) * (d[i] / scale[i]);
            }
            n += 1;
        }
    }
    if n == 0 {
        return Err(TrainError::NoValidationEpisode {
            horizon: cfg.validation_horizon,
        });
    }
    let mut group_rmse = [0.0; 4];
    for (g, (lo, hi)) in GROUP_RANGES.iter().enumerate() {
        let mse: f64 = sq[*lo..*hi].iter().sum::<f64>() / ((hi - lo) * n) as f64;
        group_rmse[g] = mse.sqrt();
    }
    Ok(ValidationEntry {
        update: 0,
        group_rmse,
        overall: (std_sq / (12 * n) as f64).sqrt(),
    })
}

/// Everything a finished training run hands back.
pub struct TrainOutcome {
    /// Model at the best held-out validation score.
    pub best: AnyModel,
    pub best_update: u64,
    pub last: AnyModel,
    pub log: TrainLog,
    pub adam: AdamState,
    pub rng: ChaCha8Rng,
    pub holdout: Vec<u64>,
}

/// Runs the full training loop on a loaded buffer. `fresh_episodes`, when
/// provided, is polled every [`ONLINE_COLLECT_PERIOD`] updates while
/// `online_collect` is set and its episodes join the training pool.
pub fn train_world_model(
    mut model: AnyModel,
    buffer: &mut ReplayBuffer,
    cfg: &TrainConfig,
    dt: f64,
    mut fresh_episodes: Option<&mut dyn FnMut() -> Vec<Episode>>,
) -> Result<TrainOutcome, TrainError> {
    if buffer.is_empty() {
        return Err(TrainError::EmptyBuffer);
    }
    let holdout = holdout_ids(buffer, cfg.holdout_fraction);
    let mut batch_rng = stream(cfg.seed, "train-batch");
    let mut val_rng = stream(cfg.seed, "train-validation");
    let mut opt = AdamState::new(model.param_count(), cfg.lr);
    let mut log = TrainLog::default();
    let mut best = model.clone();
    let mut best_update = 0u64;
    let mut best_score = f64::INFINITY;

    if cfg.total_updates == 0 {
        return Ok(TrainOutcome {
            best,
            best_update,
            last: model,
            log,
            adam: opt,
            rng: batch_rng,
            holdout,
        });
    }

    let train_filter = |holdout: &[u64]| {
        let held: Vec<u64> = holdout.to_vec();
        move |e: &StoredEpisode| !held.contains(&e.id)
    };

    for update in 1..=cfg.total_updates {
        if cfg.online_collect && update % ONLINE_COLLECT_PERIOD == 0 {
            if let Some(collect) = fresh_episodes.as_mut() {
                for episode in collect() {
                    buffer.append(episode)?;
                }
            }
        }
        let started = Instant::now();
        let batch = buffer.sample_sequences_filtered(
            &mut batch_rng,
            cfg.batch,
            cfg.horizon,
            cfg.history,
            train_filter(&holdout),
        )?;
        let step = train_step(&mut model, &batch, &mut opt, cfg, dt)?;
        log.entries.push(LogEntry {
            update,
            loss: step.loss,
            grad_norm: step.grad_norm,
            skipped: step.skipped,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        });

        let is_last = update == cfg.total_updates;
        if update % cfg.validation_period == 0 || is_last {
            let mut entry = validate(&model, buffer, &holdout, cfg, &mut val_rng, dt)?;
            entry.update = update;
            if entry.overall < best_score {
                best_score = entry.overall;
                best = model.clone();
                best_update = update;
            }
            log.validations.push(entry);
        }
    }
    Ok(TrainOutcome {
        best,
        best_update,
        last: model,
        log,
        adam: opt,
        rng: batch_rng,
        holdout,
    })
}

/// True when the mean of `losses` over the later half of each 200-update
/// window never rises above the earlier half for more than `tolerance` of
/// window starts. Adam transients are allowed to violate a few windows.
pub fn loss_windows_non_increasing(losses: &[f64], tolerance: f64) -> bool {
    let w = 200;
    if losses.len() < w {
        return true;
    }
    let mut violations = 0usize;
    let mut windows = 0usize;
    for start in 0..=losses.len() - w {
        let first: f64 = losses[start..start + w / 2].iter().sum::<f64>() / (w / 2) as f64;
        let second: f64 =
            losses[start + w / 2..start + w].iter().sum::<f64>() / (w / 2) as f64;
        windows += 1;
        if second > first {
            violations += 1;
        }
    }
    (violations as f64) <= tolerance * windows as f64
}
