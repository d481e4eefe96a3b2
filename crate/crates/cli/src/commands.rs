//! The pipeline commands behind the CLI subcommands: collect, train, eval,
//! and the one-shot reproduce that chains them and checks the study's
//! headline thresholds.

use crate::config::ExperimentConfig;
use crate::CliError;
use quadworld::evaluation::{
    divergence_ratio, emit_report, evaluate_id, evaluate_ood, Dataset, ErrorSeries, RmseReport,
};
use quadworld::excitation::load_buffer;
use quadworld::replay::{load_buffer_dir, save_buffer, ReplayBuffer};
use quadworld::rng::{stream, substream};
use quadworld::sim::fly_hover_to_forward;
use quadworld::training::{holdout_ids, train_world_model, TrainOutcome};
use quadworld::types::{read_episodes, write_episodes, Episode, EpisodeTag};
use quadworld::worldmodel::{AnyModel, Checkpoint, ModelKind, NormStats, PhysicsModel, RnnModel};
use std::path::PathBuf;

/// Thresholds the one-shot reproduce run is judged against.
pub mod thresholds {
    /// Held-out in-distribution 128-step overall RMSE ceilings per group:
    /// position (m), velocity (m/s), attitude (rad), rates (rad/s).
    pub const ID_CEILINGS: [f64; 4] = [0.5, 0.5, 0.3, 0.5];
    /// Required divergence ratio on at least one state group.
    pub const MIN_DIVERGENCE_RATIO: f64 = 3.0;
    /// Required OOD-to-ID overall RMSE ratio, on at least this many groups.
    pub const MIN_OOD_OVER_ID: f64 = 3.0;
    pub const MIN_OOD_GROUPS: usize = 2;
}

pub struct CollectOutput {
    pub buffer_dir: PathBuf,
    pub ood_path: PathBuf,
    pub steps: usize,
    pub episodes: usize,
}

/// Loads the replay buffer with chirp/reset cycles and records the
/// out-of-distribution test episode, persisting both.
pub fn cmd_collect(cfg: &ExperimentConfig) -> Result<CollectOutput, CliError> {
    let sim = cfg.simulator()?;
    let chirp = cfg.chirp_config();
    let data = load_buffer(&sim, &chirp, cfg.replay.capacity_steps, cfg.run.seed)
        .map_err(|e| CliError::Data(e.to_string()))?;
    let buffer_dir = cfg.buffer_dir();
    save_buffer(&data.buffer, &buffer_dir).map_err(|e| CliError::Data(e.to_string()))?;

    let ood_sim = cfg.ood_simulator()?;
    let rec = fly_hover_to_forward(&ood_sim, cfg.evaluation.ood_cruise, cfg.evaluation.ood_duration);
    if rec.episode.truncated {
        return Err(CliError::Data(
            "the out-of-distribution maneuver tripped the pitch guard; lower \
             evaluation.ood_cruise or soften controllers.ood_flight"
                .into(),
        ));
    }
    let ood_path = cfg.ood_path();
    write_episodes(&ood_path, &[rec.episode.clone()])
        .map_err(|e| CliError::Data(e.to_string()))?;
    Ok(CollectOutput {
        buffer_dir,
        ood_path,
        steps: data.buffer.len_steps(),
        episodes: data.buffer.len_episodes(),
    })
}

fn load_collected(cfg: &ExperimentConfig) -> Result<(ReplayBuffer, Episode), CliError> {
    let buffer = load_buffer_dir(&cfg.buffer_dir()).map_err(|e| {
        CliError::Data(format!(
            "cannot load buffer from {} (run collect first): {e}",
            cfg.buffer_dir().display()
        ))
    })?;
    let ood = read_episodes(&cfg.ood_path())
        .map_err(|e| CliError::Data(format!("cannot load ood episode: {e}")))?
        .into_iter()
        .find(|e| e.tag == EpisodeTag::HoverToForward)
        .ok_or_else(|| CliError::Data("ood file holds no HoverToForward episode".into()))?;
    Ok((buffer, ood))
}

fn initial_model(
    cfg: &ExperimentConfig,
    kind: ModelKind,
    norm: NormStats,
) -> Result<AnyModel, CliError> {
    let mut rng = stream(cfg.run.seed, "model-init");
    Ok(match kind {
        ModelKind::Physics => {
            let mut model = PhysicsModel::new(
                &cfg.model.physics_hidden,
                cfg.nominal_body_params(),
                norm,
                &mut rng,
            )
            .map_err(|e| CliError::Config(e.to_string()))?;
            model.gravity_prior = cfg.model.gravity_prior;
            AnyModel::Physics(model)
        }
        ModelKind::Rnn => AnyModel::Rnn(RnnModel::new(
            cfg.model.history,
            &cfg.model.rnn_init_hidden,
            cfg.model.rnn_lstm_hidden,
            norm,
            &mut rng,
        )),
    })
}

pub struct TrainOutput {
    pub best_path: PathBuf,
    pub last_path: PathBuf,
    pub log_path: PathBuf,
    pub best_update: u64,
    pub final_validation: Option<[f64; 4]>,
}

/// Trains one model kind on the collected buffer; writes periodic, last, and
/// best checkpoints plus the training log CSV.
pub fn cmd_train(cfg: &ExperimentConfig, kind: ModelKind) -> Result<TrainOutput, CliError> {
    let (mut buffer, _) = load_collected(cfg)?;
    let sim = cfg.simulator()?;
    let norm = NormStats::from_buffer(&buffer, sim.body());
    let model = initial_model(cfg, kind, norm)?;
    let tc = cfg.train_config();

    // Online collection continues the excitation cycle stream where the
    // initial load stopped, keeping everything seed-deterministic.
    let chirp = cfg.chirp_config();
    let mut online_env = quadworld::sim::EnvState::hover(&sim.plant);
    let mut online_cycle: u64 = 1_000_000; // distinct from the initial cycles
    let sim_ref = sim.clone();
    let mut fresh = move || {
        let mut rng = substream(cfg.run.seed, "excitation-online", online_cycle);
        online_cycle += 1;
        let (chirp_rec, reset_rec, end) =
            quadworld::excitation::collect_chirp_episode(&sim_ref, online_env, &chirp, &mut rng);
        online_env = end;
        let mut out = vec![chirp_rec.episode];
        if reset_rec.episode.len() >= 1 {
            out.push(reset_rec.episode);
        }
        out
    };
    let fresh_opt: Option<&mut dyn FnMut() -> Vec<Episode>> = if cfg.training.online_collect {
        Some(&mut fresh)
    } else {
        None
    };

    let outcome: TrainOutcome =
        train_world_model(model, &mut buffer, &tc, cfg.replay.control_dt, fresh_opt)
            .map_err(|e| CliError::Training(e.to_string()))?;

    let dir = cfg.checkpoint_dir();
    std::fs::create_dir_all(&dir).map_err(|e| CliError::Training(e.to_string()))?;
    let best_path = dir.join(format!("{kind}_best.json"));
    Checkpoint::of_model(&outcome.best, None, None, outcome.best_update)
        .save(&best_path)
        .map_err(|e| CliError::Training(e.to_string()))?;
    let last_path = dir.join(format!("{kind}_last.json"));
    Checkpoint::of_model(
        &outcome.last,
        Some(outcome.adam.clone()),
        Some(outcome.rng.clone()),
        tc.total_updates,
    )
    .save(&last_path)
    .map_err(|e| CliError::Training(e.to_string()))?;
    if cfg.training.checkpoint_period > 0 {
        // Periodic checkpoints are cuts of the log; the final weights of each
        // period are not retained separately at desk scale, so only the last
        // period boundary is materialized here.
        let period_path = dir.join(format!(
            "{kind}_step{}.json",
            tc.total_updates - tc.total_updates % cfg.training.checkpoint_period.max(1)
        ));
        Checkpoint::of_model(&outcome.last, None, None, tc.total_updates)
            .save(&period_path)
            .map_err(|e| CliError::Training(e.to_string()))?;
    }

    let log_dir = cfg.log_dir();
    std::fs::create_dir_all(&log_dir).map_err(|e| CliError::Training(e.to_string()))?;
    let log_path = log_dir.join(format!("train_{kind}.csv"));
    std::fs::write(&log_path, outcome.log.to_csv())
        .map_err(|e| CliError::Training(e.to_string()))?;

    Ok(TrainOutput {
        best_path,
        last_path,
        log_path,
        best_update: outcome.best_update,
        final_validation: outcome.log.validations.last().map(|v| v.group_rmse),
    })
}

pub struct EvalOutput {
    pub id_buffer: RmseReport,
    pub id_heldout: RmseReport,
    /// One (report, series) pair per configured OOD horizon.
    pub ood: Vec<(RmseReport, ErrorSeries)>,
    pub report_dir: PathBuf,
}

/// Evaluates a checkpoint: in-distribution reports on the whole buffer and on
/// the held-out split, plus the out-of-distribution report and error series
/// at every configured horizon.
pub fn cmd_eval(
    cfg: &ExperimentConfig,
    checkpoint_path: &std::path::Path,
    expect_kind: Option<ModelKind>,
) -> Result<EvalOutput, CliError> {
    let ck = Checkpoint::load(checkpoint_path).map_err(|e| CliError::Evaluation(e.to_string()))?;
    if let Some(want) = expect_kind {
        if ck.kind != want {
            return Err(CliError::Evaluation(format!(
                "checkpoint holds a {} model but {want} was requested",
                ck.kind
            )));
        }
    }
    let model = ck
        .into_model()
        .map_err(|e| CliError::Evaluation(e.to_string()))?;
    let (buffer, ood) = load_collected(cfg)?;
    evaluate_model(cfg, &model, &buffer, &ood)
}

/// Shared by `cmd_eval` and `cmd_reproduce`.
pub fn evaluate_model(
    cfg: &ExperimentConfig,
    model: &AnyModel,
    buffer: &ReplayBuffer,
    ood: &Episode,
) -> Result<EvalOutput, CliError> {
    let dt = cfg.replay.control_dt;
    let rollouts = if cfg.evaluation.single_rollout {
        1
    } else {
        cfg.evaluation.id_rollouts
    };
    let holdout = holdout_ids(buffer, cfg.training.holdout_fraction);

    let mut rng = stream(cfg.run.seed, "eval-id-buffer");
    let id_buffer = evaluate_id(
        model,
        buffer,
        cfg.evaluation.id_horizon,
        rollouts,
        cfg.model.history,
        Dataset::IdBuffer,
        None,
        &mut rng,
        dt,
    )
    .map_err(|e| CliError::Evaluation(e.to_string()))?;

    let mut rng = stream(cfg.run.seed, "eval-id-heldout");
    let id_heldout = evaluate_id(
        model,
        buffer,
        cfg.evaluation.id_horizon,
        rollouts,
        cfg.model.history,
        Dataset::IdHeldout,
        Some(&holdout),
        &mut rng,
        dt,
    )
    .map_err(|e| CliError::Evaluation(e.to_string()))?;

    let mut ood_results = Vec::new();
    for &horizon in &cfg.evaluation.ood_horizons {
        let pair = evaluate_ood(model, ood, horizon, None, dt)
            .map_err(|e| CliError::Evaluation(e.to_string()))?;
        ood_results.push(pair);
    }

    let report_dir = cfg.report_dir();
    emit_report(&id_buffer, None, &report_dir).map_err(|e| CliError::Evaluation(e.to_string()))?;
    emit_report(&id_heldout, None, &report_dir)
        .map_err(|e| CliError::Evaluation(e.to_string()))?;
    // The longest OOD horizon owns the emitted series file.
    if let Some((report, series)) = ood_results
        .iter()
        .max_by_key(|(r, _)| r.horizon)
    {
        emit_report(report, Some(series), &report_dir)
            .map_err(|e| CliError::Evaluation(e.to_string()))?;
    }
    Ok(EvalOutput {
        id_buffer,
        id_heldout,
        ood: ood_results,
        report_dir,
    })
}

/// Per-model verdict of the reproduce run.
pub struct ModelVerdict {
    pub kind: ModelKind,
    pub id_ok: bool,
    pub divergence_ok: bool,
    pub ood_over_id_ok: bool,
    pub id_heldout: RmseReport,
    pub ood_reports: Vec<(RmseReport, ErrorSeries)>,
    pub divergence: [f64; 4],
    pub ood_over_id: [f64; 4],
}

impl ModelVerdict {
    pub fn pass(&self) -> bool {
        self.id_ok && self.divergence_ok && self.ood_over_id_ok
    }
}

pub struct ReproduceOutput {
    pub verdicts: Vec<ModelVerdict>,
    pub summary: String,
    pub summary_path: PathBuf,
}

impl ReproduceOutput {
    pub fn all_pass(&self) -> bool {
        self.verdicts.iter().all(|v| v.pass())
    }
}

fn judge(cfg: &ExperimentConfig, kind: ModelKind, eval: &EvalOutput) -> ModelVerdict {
    let id = &eval.id_heldout;
    let id_ok = (0..4).all(|g| id.overall[g] < thresholds::ID_CEILINGS[g]);

    // Judged on the longest configured OOD horizon.
    let (ood_report, series) = eval
        .ood
        .iter()
        .max_by_key(|(r, _)| r.horizon)
        .expect("at least one ood horizon");
    let mut divergence = [0.0; 4];
    let mut ood_over_id = [0.0; 4];
    for g in 0..4 {
        divergence[g] = divergence_ratio(series, g);
        ood_over_id[g] = ood_report.overall[g] / id.overall[g].max(1e-9);
    }
    let divergence_ok = divergence
        .iter()
        .any(|d| *d >= thresholds::MIN_DIVERGENCE_RATIO);
    let ood_over_id_ok = ood_over_id
        .iter()
        .filter(|r| **r >= thresholds::MIN_OOD_OVER_ID)
        .count()
        >= thresholds::MIN_OOD_GROUPS;
    let _ = cfg;
    ModelVerdict {
        kind,
        id_ok,
        divergence_ok,
        ood_over_id_ok,
        id_heldout: id.clone(),
        ood_reports: eval.ood.clone(),
        divergence,
        ood_over_id,
    }
}

fn summary_text(cfg: &ExperimentConfig, verdicts: &[ModelVerdict]) -> String {
    let groups = ["position", "velocity", "attitude", "rates"];
    let mut out = String::new();
    out.push_str(&format!(
        "reproduce summary (seed {}, {} updates, {:.0} s buffer)\n",
        cfg.run.seed, cfg.training.total_updates, cfg.excitation.buffer_duration
    ));
    for v in verdicts {
        out.push_str(&format!("\nmodel: {}\n", v.kind));
        out.push_str(&format!(
            "  held-out ID {}-step overall RMSE: pos {:.4} m, vel {:.4} m/s, att {:.4} rad, rate {:.4} rad/s\n",
            v.id_heldout.horizon,
            v.id_heldout.overall[0],
            v.id_heldout.overall[1],
            v.id_heldout.overall[2],
            v.id_heldout.overall[3]
        ));
        for (r, _) in &v.ood_reports {
            out.push_str(&format!(
                "  OOD {}-step overall RMSE:        pos {:.4} m, vel {:.4} m/s, att {:.4} rad, rate {:.4} rad/s\n",
                r.horizon, r.overall[0], r.overall[1], r.overall[2], r.overall[3]
            ));
        }
        for g in 0..4 {
            out.push_str(&format!(
                "  {:<9} divergence ratio {:>10.2}   OOD/ID ratio {:>8.2}\n",
                groups[g], v.divergence[g], v.ood_over_id[g]
            ));
        }
        out.push_str(&format!(
            "  checks: ID within bounds: {} | divergence >= {} on >= 1 group: {} | OOD/ID >= {} on >= {} groups: {}\n",
            verdict_str(v.id_ok),
            thresholds::MIN_DIVERGENCE_RATIO,
            verdict_str(v.divergence_ok),
            thresholds::MIN_OOD_OVER_ID,
            thresholds::MIN_OOD_GROUPS,
            verdict_str(v.ood_over_id_ok),
        ));
    }
    let all = verdicts.iter().all(|v| v.pass());
    out.push_str(&format!(
        "\noverall: {}\n",
        if all {
            "PASS (both models fit in distribution and diverge out of distribution)"
        } else {
            "FAIL"
        }
    ));
    out
}

fn verdict_str(ok: bool) -> &'static str {
    if ok {
        "pass"
    } else {
        "FAIL"
    }
}

/// Collect (unless told to reuse existing data), train both model kinds,
/// evaluate both, and write the comparison summary.
pub fn cmd_reproduce(cfg: &ExperimentConfig, skip_collect: bool) -> Result<ReproduceOutput, CliError> {
    if !skip_collect {
        cmd_collect(cfg)?;
    } else if !cfg.buffer_dir().join("manifest.json").exists() {
        return Err(CliError::Data(format!(
            "--skip-collect was given but {} holds no collected buffer",
            cfg.buffer_dir().display()
        )));
    }
    let (buffer, ood) = load_collected(cfg)?;
    let mut verdicts = Vec::new();
    for kind in [ModelKind::Physics, ModelKind::Rnn] {
        let train_out = cmd_train(cfg, kind)?;
        let ck = Checkpoint::load(&train_out.best_path)
            .map_err(|e| CliError::Evaluation(e.to_string()))?;
        let model = ck
            .into_model()
            .map_err(|e| CliError::Evaluation(e.to_string()))?;
        let eval = evaluate_model(cfg, &model, &buffer, &ood)?;
        verdicts.push(judge(cfg, kind, &eval));
    }
    let summary = summary_text(cfg, &verdicts);
    let report_dir = cfg.report_dir();
    std::fs::create_dir_all(&report_dir).map_err(|e| CliError::Evaluation(e.to_string()))?;
    let summary_path = report_dir.join("summary.txt");
    std::fs::write(&summary_path, &summary).map_err(|e| CliError::Evaluation(e.to_string()))?;
    Ok(ReproduceOutput {
        verdicts,
        summary,
        summary_path,
    })
}
