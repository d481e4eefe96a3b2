//! Result artifacts: per-axis RMSE tables for in-distribution rollouts and
//! error-over-time series for the out-of-distribution maneuver, plus their
//! CSV/plain-text renderings.

use crate::replay::ReplayBuffer;
use crate::types::{
    state_delta, Episode, EpisodeTag, State12, GROUP_AXIS_LABELS, GROUP_NAMES, GROUP_RANGES,
    GROUP_UNITS,
};
use crate::worldmodel::{ModelError, RolloutStart, WorldModel};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("prediction and truth lengths differ: {pred} vs {truth}")]
    LengthMismatch { pred: usize, truth: usize },
    #[error("cannot evaluate an empty rollout")]
    Empty,
    #[error("episode is not tagged HoverToForward")]
    NotOod,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Replay(#[from] crate::replay::ReplayError),
    #[error("report i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("report parse: {0}")]
    Parse(String),
}

/// Which data a report was computed on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dataset {
    IdBuffer,
    IdHeldout,
    Ood,
}

impl std::fmt::Display for Dataset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Dataset::IdBuffer => write!(f, "id_buffer"),
            Dataset::IdHeldout => write!(f, "id_heldout"),
            Dataset::Ood => write!(f, "ood"),
        }
    }
}

/// Per-axis RMSE in the four reported state groups, plus the per-group
/// overall value (root of the mean of the three per-axis MSEs).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmseReport {
    pub model: String,
    pub dataset: Dataset,
    pub horizon: usize,
    pub rollouts: usize,
    pub per_axis: [[f64; 3]; 4],
    pub overall: [f64; 4],
}

impl RmseReport {
    fn from_sums(
        model: &str,
        dataset: Dataset,
        horizon: usize,
        rollouts: usize,
        sq: &[f64; 12],
        n: usize,
    ) -> Self {
        let mut per_axis = [[0.0; 3]; 4];
        let mut overall = [0.0; 4];
        for (g, (lo, _)) in GROUP_RANGES.iter().enumerate() {
            let mut group_mse = 0.0;
            for a in 0..3 {
                let mse = sq[lo + a] / n as f64;
                per_axis[g][a] = mse.sqrt();
                group_mse += mse;
            }
            overall[g] = (group_mse / 3.0).sqrt();
        }
        Self {
            model: model.to_string(),
            dataset,
            horizon,
            rollouts,
            per_axis,
            overall,
        }
    }

    /// The defining identity: overall^2 equals the mean of the per-axis MSEs.
    pub fn overall_consistent_within(&self, tol: f64) -> bool {
        for g in 0..4 {
            let mean_mse: f64 =
                self.per_axis[g].iter().map(|r| r * r).sum::<f64>() / 3.0;
            if (self.overall[g] * self.overall[g] - mean_mse).abs() > tol {
                return false;
            }
        }
        true
    }
}

/// Per-step absolute error (attitude wrapped) over a rollout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorSeries {
    pub dt: f64,
    pub errors: Vec<[f64; 12]>,
    /// Set when the model rollout stopped early at the pitch guard.
    pub truncated_at: Option<usize>,
}

impl ErrorSeries {
    /// Root-mean-square error of one state group at one step.
    pub fn group_error(&self, step: usize, group: usize) -> f64 {
        let (lo, hi) = GROUP_RANGES[group];
        let e = &self.errors[step];
        (e[lo..hi].iter().map(|v| v * v).sum::<f64>() / (hi - lo) as f64).sqrt()
    }
}

/// Guard in the divergence-ratio denominator.
pub const DIVERGENCE_EPS: f64 = 1e-6;

/// Mean final-quarter group error over mean first-quarter group error.
pub fn divergence_ratio(series: &ErrorSeries, group: usize) -> f64 {
    let n = series.errors.len();
    if n < 4 {
        return 0.0;
    }
    let q = n / 4;
    let first: f64 = (0..q).map(|k| series.group_error(k, group)).sum::<f64>() / q as f64;
    let last: f64 = (n - q..n).map(|k| series.group_error(k, group)).sum::<f64>() / q as f64;
    last / (first + DIVERGENCE_EPS)
}

/// Per-axis RMSE of a predicted trajectory against ground truth.
pub fn rmse_report(
    pred: &[State12],
    truth: &[State12],
    model: &str,
    dataset: Dataset,
) -> Result<RmseReport, EvalError> {
    if pred.len() != truth.len() {
        return Err(EvalError::LengthMismatch {
            pred: pred.len(),
            truth: truth.len(),
        });
    }
    if pred.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut sq = [0.0; 12];
    for (p, t) in pred.iter().zip(truth) {
        let d = state_delta(p, t);
        for i in 0..12 {
            sq[i] += d[i] * d[i];
        }
    }
    Ok(RmseReport::from_sums(
        model,
        dataset,
        pred.len(),
        1,
        &sq,
        pred.len(),
    ))
}

/// RMSE over `n_rollouts` windows sampled from the buffer (optionally
/// restricted to a held-out id set). The physics model starts from the
/// ground-truth window start; the recurrent model additionally receives the
/// preceding history window. Truncated rollouts contribute the steps they
/// completed.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_id(
    model: &dyn WorldModel,
    buffer: &ReplayBuffer,
    horizon: usize,
    n_rollouts: usize,
    history: usize,
    dataset: Dataset,
    restrict_to: Option<&[u64]>,
    rng: &mut ChaCha8Rng,
    dt: f64,
) -> Result<RmseReport, EvalError> {
    let batch = buffer.sample_sequences_filtered(rng, n_rollouts, horizon, history, |e| {
        restrict_to.map_or(true, |ids| ids.contains(&e.id))
    })?;
    let mut sq = [0.0; 12];
    let mut n = 0usize;
    for item in &batch {
        let start = RolloutStart {
            state: item.init_state,
            history: item.history.clone(),
            provenance: Some((item.episode_id, item.start)),
        };
        let pred = match model.rollout(&start, &item.actions, dt) {
            Ok(states) => states,
            Err(ModelError::Truncated { partial, .. }) => partial,
            Err(e) => return Err(e.into()),
        };
        for (k, p) in pred.iter().enumerate() {
            let d = state_delta(p, &item.truth[k]);
            for i in 0..12 {
                sq[i] += d[i] * d[i];
            }
            n += 1;
        }
    }
    if n == 0 {
        return Err(EvalError::Empty);
    }
    Ok(RmseReport::from_sums(
        model.kind_name(),
        dataset,
        horizon,
        n_rollouts,
        &sq,
        n,
    ))
}

/// Single closed-loop rollout along the recorded out-of-distribution episode:
/// the report plus the per-step error series. `provenance` names the episode
/// for oracle models. Early truncation zero-fills nothing: the series simply
/// stops and records where.
pub fn evaluate_ood(
    model: &dyn WorldModel,
    ood: &Episode,
    horizon: usize,
    provenance: Option<(u64, usize)>,
    dt: f64,
) -> Result<(RmseReport, ErrorSeries), EvalError> {
    if ood.tag != EpisodeTag::HoverToForward {
        return Err(EvalError::NotOod);
    }
    let horizon = horizon.min(ood.len());
    if horizon == 0 {
        return Err(EvalError::Empty);
    }
    let start = RolloutStart {
        state: ood.states[0],
        history: Vec::new(),
        provenance,
    };
    let (pred, truncated_at) = match model.rollout(&start, &ood.actions[..horizon], dt) {
        Ok(states) => (states, None),
        Err(ModelError::Truncated { partial, step }) => (partial, Some(step)),
        Err(e) => return Err(e.into()),
    };
    let mut errors = Vec::with_capacity(pred.len());
    let mut sq = [0.0; 12];
    for (k, p) in pred.iter().enumerate() {
        let d = state_delta(p, &ood.states[k + 1]);
        let mut abs = [0.0; 12];
        for i in 0..12 {
            abs[i] = d[i].abs();
            sq[i] += d[i] * d[i];
        }
        errors.push(abs);
    }
    if errors.is_empty() {
        return Err(EvalError::Empty);
    }
    let report = RmseReport::from_sums(
        model.kind_name(),
        Dataset::Ood,
        horizon,
        1,
        &sq,
        errors.len(),
    );
    Ok((
        report,
        ErrorSeries {
            dt: ood.dt,
            errors,
            truncated_at,
        },
    ))
}

fn fmt_f(v: f64) -> String {
    format!("{v:.12e}")
}

/// CSV rendering of a report, one row per state group mirroring the table
/// layout: axis labels, per-axis RMSE, and the group overall.
pub fn rmse_to_csv(report: &RmseReport) -> String {
    let mut out = String::from(
        "group,unit,axis_a,rmse_a,axis_b,rmse_b,axis_c,rmse_c,overall\n",
    );
    for g in 0..4 {
        let l = GROUP_AXIS_LABELS[g];
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            GROUP_NAMES[g],
            GROUP_UNITS[g],
            l[0],
            fmt_f(report.per_axis[g][0]),
            l[1],
            fmt_f(report.per_axis[g][1]),
            l[2],
            fmt_f(report.per_axis[g][2]),
            fmt_f(report.overall[g]),
        ));
    }
    out
}

/// Parses the CSV written by [`rmse_to_csv`] back into the numeric fields.
pub fn rmse_from_csv(
    text: &str,
    model: &str,
    dataset: Dataset,
    horizon: usize,
    rollouts: usize,
) -> Result<RmseReport, EvalError> {
    let mut per_axis = [[0.0; 3]; 4];
    let mut overall = [0.0; 4];
    let mut rows = 0;
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != 9 {
            return Err(EvalError::Parse(format!(
                "row {i}: expected 9 cells, got {}",
                cells.len()
            )));
        }
        let g = GROUP_NAMES
            .iter()
            .position(|n| *n == cells[0])
            .ok_or_else(|| EvalError::Parse(format!("unknown group `{}`", cells[0])))?;
        for (a, cell) in [cells[3], cells[5], cells[7]].iter().enumerate() {
            per_axis[g][a] = cell
                .parse()
                .map_err(|e| EvalError::Parse(format!("row {i}: {e}")))?;
        }
        overall[g] = cells[8]
            .parse()
            .map_err(|e| EvalError::Parse(format!("row {i}: {e}")))?;
        rows += 1;
    }
    if rows != 4 {
        return Err(EvalError::Parse(format!("expected 4 group rows, got {rows}")));
    }
    Ok(RmseReport {
        model: model.to_string(),
        dataset,
        horizon,
        rollouts,
        per_axis,
        overall,
    })
}

/// CSV rendering of an error series: one row per step with the twelve
/// absolute errors in the repo-wide state ordering.
pub fn series_to_csv(series: &ErrorSeries) -> String {
    let mut out = String::from(
        "step,t,err_n,err_e,err_d,err_u,err_v,err_w,err_roll,err_pitch,err_yaw,err_p,err_q,err_r\n",
    );
    for (k, e) in series.errors.iter().enumerate() {
        let t = (k + 1) as f64 * series.dt;
        let cells: Vec<String> = e.iter().map(|v| fmt_f(*v)).collect();
        out.push_str(&format!("{},{:.6},{}\n", k, t, cells.join(",")));
    }
    out
}

/// Plain-text table in the report layout, group headings verbatim.
pub fn rmse_to_text(report: &RmseReport) -> String {
    let mut out = format!(
        "{} rollout RMSE, model = {}, dataset = {}, horizon = {} steps, rollouts = {}\n\n",
        match report.dataset {
            Dataset::Ood => "Out-of-distribution",
            _ => "In-distribution",
        },
        report.model,
        report.dataset,
        report.horizon,
        report.rollouts,
    );
    for g in 0..4 {
        let l = GROUP_AXIS_LABELS[g];
        out.push_str(&format!(
            "{:<24}{:>10}{:>10}{:>10}{:>10}\n",
            format!("{} ({})", GROUP_NAMES[g], GROUP_UNITS[g]),
            l[0],
            l[1],
            l[2],
            "Overall"
        ));
        out.push_str(&format!(
            "{:<24}{:>10.3}{:>10.3}{:>10.3}{:>10.3}\n",
            "RMSE",
            report.per_axis[g][0],
            report.per_axis[g][1],
            report.per_axis[g][2],
            report.overall[g]
        ));
        out.push('\n');
    }
    out
}

/// Paths produced by [`emit_report`].
pub struct EmittedReport {
    pub rmse_csv: PathBuf,
    pub table_txt: PathBuf,
    pub series_csv: Option<PathBuf>,
}

/// Writes the CSV table, the text table, and (when given) the error series
/// under `dir`, using the documented naming scheme.
pub fn emit_report(
    report: &RmseReport,
    series: Option<&ErrorSeries>,
    dir: &Path,
) -> Result<EmittedReport, EvalError> {
    std::fs::create_dir_all(dir)?;
    let rmse_csv = dir.join(format!("rmse_{}_{}.csv", report.dataset, report.model));
    std::fs::write(&rmse_csv, rmse_to_csv(report))?;
    let table_txt = dir.join(format!("table_{}_{}.txt", report.dataset, report.model));
    std::fs::write(&table_txt, rmse_to_text(report))?;
    let series_csv = match series {
        Some(s) => {
            let path = dir.join(format!("series_ood_{}.csv", report.model));
            std::fs::write(&path, series_to_csv(s))?;
            Some(path)
        }
        None => None,
    };
    Ok(EmittedReport {
        rmse_csv,
        table_txt,
        series_csv,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::replay::sampling_rng;
    use crate::types::Action;

    fn states_with_n_offset(n: usize, offset: f64) -> Vec<State12> {
        (0..n)
            .map(|k| {
                let mut s = State12::zero();
                s.pos_e[0] = offset + 0.01 * k as f64;
                s
            })
            .collect()
    }

    #[test]
    fn identical_trajectories_report_zero() {
        let t = states_with_n_offset(20, 0.0);
        let r = rmse_report(&t, &t, "physics", Dataset::IdBuffer).unwrap();
        assert_eq!(r.per_axis, [[0.0; 3]; 4]);
        assert_eq!(r.overall, [0.0; 4]);
    }

    /// Closed form: a constant 0.1 m error on N only.
    #[test]
    fn single_axis_error_closed_form() {
        let truth = states_with_n_offset(10, 0.0);
        let pred = states_with_n_offset(10, 0.1);
        let r = rmse_report(&pred, &truth, "physics", Dataset::IdBuffer).unwrap();
        assert!((r.per_axis[0][0] - 0.1).abs() < 1e-12);
        assert_eq!(r.per_axis[0][1], 0.0);
        assert_eq!(r.per_axis[0][2], 0.0);
        let want_overall = (0.01f64 / 3.0).sqrt();
        assert!((r.overall[0] - want_overall).abs() < 1e-12);
        assert!((want_overall - 0.0577).abs() < 1e-4);
    }

    #[test]
    fn report_layout_matches_table_ordering() {
        assert_eq!(GROUP_NAMES[0], "Position (Earth)");
        assert_eq!(GROUP_NAMES[1], "Velocity (Body)");
        assert_eq!(GROUP_NAMES[2], "Attitude");
        assert_eq!(GROUP_NAMES[3], "Angular Velocity");
        assert_eq!(GROUP_AXIS_LABELS[0], ["N", "E", "D"]);
        assert_eq!(GROUP_AXIS_LABELS[1], ["F", "R", "D"]);
        assert_eq!(GROUP_AXIS_LABELS[2], ["x", "y", "z"]);
        assert_eq!(GROUP_AXIS_LABELS[3], ["x", "y", "z"]);
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let a = states_with_n_offset(5, 0.0);
        let b = states_with_n_offset(4, 0.0);
        assert!(matches!(
            rmse_report(&a, &b, "m", Dataset::IdBuffer),
            Err(EvalError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn rmse_is_permutation_invariant_in_time() {
        let truth = states_with_n_offset(16, 0.0);
        let mut pred = states_with_n_offset(16, 0.0);
        for (k, p) in pred.iter_mut().enumerate() {
            p.vel_b[1] = 0.02 * (k as f64) - 0.1;
        }
        let base = rmse_report(&pred, &truth, "m", Dataset::IdBuffer).unwrap();
        // Shuffle the paired steps with a fixed permutation.
        let perm: Vec<usize> = (0..16).map(|k| (k * 7) % 16).collect();
        let pred_p: Vec<State12> = perm.iter().map(|&k| pred[k]).collect();
        let truth_p: Vec<State12> = perm.iter().map(|&k| truth[k]).collect();
        let shuffled = rmse_report(&pred_p, &truth_p, "m", Dataset::IdBuffer).unwrap();
        for g in 0..4 {
            for a in 0..3 {
                assert!((base.per_axis[g][a] - shuffled.per_axis[g][a]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn overall_identity_holds() {
        let truth = states_with_n_offset(8, 0.0);
        let mut pred = truth.clone();
        for (k, p) in pred.iter_mut().enumerate() {
            p.att[2] = 0.05 * k as f64;
            p.rate_b[0] = -0.02 * k as f64;
        }
        let r = rmse_report(&pred, &truth, "m", Dataset::IdBuffer).unwrap();
        assert!(r.overall_consistent_within(1e-9));
    }

    #[test]
    fn attitude_errors_are_wrapped() {
        let mut truth = vec![State12::zero()];
        truth[0].att[2] = 3.1;
        let mut pred = vec![State12::zero()];
        pred[0].att[2] = -3.1;
        let r = rmse_report(&pred, &truth, "m", Dataset::IdBuffer).unwrap();
        assert!(r.per_axis[2][2] < 0.1, "yaw rmse {}", r.per_axis[2][2]);
    }

    /// Closed form: at horizon 1 a zero-delta model's error is exactly the
    /// one-step truth delta.
    #[test]
    fn horizon_one_identity_model_closed_form() {
        use crate::worldmodel::{NormStats, RnnModel};
        let mut rng = crate::rng::stream(1, "em");
        let mut model = RnnModel::new(2, &[4], 3, NormStats::identity(), &mut rng);
        for w in &mut model.head.theta {
            *w = 0.0;
        }
        let mut buf = ReplayBuffer::new(1000);
        let mut states = vec![State12::zero(); 9];
        for (k, s) in states.iter_mut().enumerate() {
            s.vel_b[0] = 0.3 * k as f64;
        }
        buf.append(Episode {
            dt: 0.05,
            tag: EpisodeTag::Chirp,
            states,
            actions: vec![Action::zero(); 8],
            truncated: false,
        })
        .unwrap();
        let r = evaluate_id(
            &model,
            &buf,
            1,
            16,
            2,
            Dataset::IdBuffer,
            None,
            &mut sampling_rng(3, 0),
            0.05,
        )
        .unwrap();
        // Every one-step forward-velocity delta is 0.3.
        assert!((r.per_axis[1][0] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn ood_requires_the_right_tag() {
        use crate::worldmodel::{NormStats, PhysicsModel};
        let mut rng = crate::rng::stream(2, "em");
        let model = PhysicsModel::new(
            &[4],
            crate::types::RigidBodyParams::default(),
            NormStats::identity(),
            &mut rng,
        )
        .unwrap();
        let e = Episode {
            dt: 0.05,
            tag: EpisodeTag::Chirp,
            states: vec![State12::zero(); 3],
            actions: vec![Action::zero(); 2],
            truncated: false,
        };
        assert!(matches!(
            evaluate_ood(&model, &e, 2, None, 0.05),
            Err(EvalError::NotOod)
        ));
    }

    #[test]
    fn oracle_ood_series_is_flat_zero() {
        use crate::sim::{fly_hover_to_forward, Simulator};
        use crate::worldmodel::OracleModel;
        let sim = Simulator::default();
        let rec = fly_hover_to_forward(&sim, 2.0, 3.0);
        let mut traces = std::collections::HashMap::new();
        traces.insert(5u64, rec.trace.clone());
        let oracle = OracleModel {
            sim: Simulator::default(),
            traces,
        };
        let (report, series) =
            evaluate_ood(&oracle, &rec.episode, 60, Some((5, 0)), 0.05).unwrap();
        for g in 0..4 {
            assert!(report.overall[g] < 1e-12);
        }
        for e in &series.errors {
            assert!(e.iter().all(|v| *v == 0.0));
        }
        assert!(series.truncated_at.is_none());
    }

    #[test]
    fn divergence_ratio_grows_with_monotone_error() {
        let mut errors = Vec::new();
        for k in 0..40 {
            let mut e = [0.0; 12];
            e[0] = 0.01 * k as f64;
            errors.push(e);
        }
        let series = ErrorSeries {
            dt: 0.05,
            errors,
            truncated_at: None,
        };
        assert!(divergence_ratio(&series, 0) >= 1.0);
        assert!(divergence_ratio(&series, 0) > 3.0);
        // Untouched groups divide near-zero by epsilon and stay finite.
        assert!(divergence_ratio(&series, 1).is_finite());
    }

    #[test]
    fn emitted_csv_round_trips() {
        let truth = states_with_n_offset(12, 0.0);
        let mut pred = truth.clone();
        for (k, p) in pred.iter_mut().enumerate() {
            p.pos_e[2] = 0.003 * k as f64;
            p.att[0] = -0.002 * k as f64;
        }
        let report = rmse_report(&pred, &truth, "physics", Dataset::IdHeldout).unwrap();
        let csv = rmse_to_csv(&report);
        let back = rmse_from_csv(&csv, "physics", Dataset::IdHeldout, 12, 1).unwrap();
        for g in 0..4 {
            for a in 0..3 {
                assert!((back.per_axis[g][a] - report.per_axis[g][a]).abs() < 1e-12);
            }
            assert!((back.overall[g] - report.overall[g]).abs() < 1e-12);
        }
    }

    #[test]
    fn text_table_contains_group_headings_verbatim() {
        let truth = states_with_n_offset(4, 0.0);
        let report = rmse_report(&truth, &truth, "rnn", Dataset::IdBuffer).unwrap();
        let text = rmse_to_text(&report);
        for name in GROUP_NAMES {
            assert!(text.contains(name), "missing heading {name}");
        }
    }

    #[test]
    fn empty_series_renders_header_only() {
        let series = ErrorSeries {
            dt: 0.05,
            errors: Vec::new(),
            truncated_at: Some(0),
        };
        let csv = series_to_csv(&series);
        assert_eq!(csv.lines().count(), 1);
        assert!(csv.starts_with("step,t,err_n"));
    }

    #[test]
    fn emit_writes_the_documented_paths() {
        let dir = std::env::temp_dir().join("quadworld_eval_emit");
        std::fs::remove_dir_all(&dir).ok();
        let truth = states_with_n_offset(6, 0.0);
        let report = rmse_report(&truth, &truth, "physics", Dataset::Ood).unwrap();
        let series = ErrorSeries {
            dt: 0.05,
            errors: vec![[0.0; 12]; 6],
            truncated_at: None,
        };
        let emitted = emit_report(&report, Some(&series), &dir).unwrap();
        assert!(emitted.rmse_csv.ends_with("rmse_ood_physics.csv"));
        assert!(emitted.table_txt.ends_with("table_ood_physics.txt"));
        assert!(emitted
            .series_csv
            .as_ref()
            .unwrap()
            .ends_with("series_ood_physics.csv"));
        for p in [&emitted.rmse_csv, &emitted.table_txt] {
            assert!(p.exists());
        }
        std::fs::remove_dir_all(&dir).ok();
    }
}
