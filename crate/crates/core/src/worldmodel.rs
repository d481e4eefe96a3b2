//! The two world models under study, behind one rollout interface.
//!
//! The physics-structured model maps normalized state/action features through
//! an MLP to a net body wrench and integrates it with the differentiable RK4
//! step; the recurrent baseline initializes an LSTM from a history window and
//! predicts next-state deltas. Both expose plain rollouts for evaluation and
//! tape rollouts for training, and both read the same 16 features: body
//! velocity, attitude as sin/cos pairs, body rates, and the action. Earth
//! position is deliberately absent, so predictions are translation-invariant.

use crate::autodiff::{Real, Tape, Var};
use crate::dynamics::{rk4_step, DynError, RigidBody};
use crate::math::matvec3_t;
use crate::nn::{LstmOnTape, LstmParams, MlpOnTape, MlpParams, MlpSpec, NnError};
use crate::replay::{HistoryStep, ReplayBuffer};
use crate::sim::{EnvState, SimError, Simulator};
use crate::types::{wrap_finite, Action, RigidBodyParams, State12, Wrench};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

pub const FEATURE_DIM: usize = 16;
/// Features plus a validity flag, per history slot.
pub const HISTORY_SLOT_DIM: usize = FEATURE_DIM + 1;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("rollout truncated at step {step}")]
    Truncated { step: usize, partial: Vec<State12> },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("history window length {got} exceeds configured {expected}")]
    HistoryLength { expected: usize, got: usize },
    #[error("oracle rollout requires episode provenance")]
    MissingProvenance,
    #[error("oracle has no trace for episode {0}")]
    UnknownEpisode(u64),
    #[error("oracle trace too short: start {start} + horizon {horizon} > {len}")]
    TraceTooShort {
        start: usize,
        horizon: usize,
        len: usize,
    },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Dynamics(#[from] DynError),
}

/// Model input features: vel_b (3), sin/cos of roll, pitch, yaw (6),
/// rate_b (3), action (4).
pub fn features(x: &State12, a: &Action) -> [f64; FEATURE_DIM] {
    [
        x.vel_b[0],
        x.vel_b[1],
        x.vel_b[2],
        x.att[0].sin(),
        x.att[0].cos(),
        x.att[1].sin(),
        x.att[1].cos(),
        x.att[2].sin(),
        x.att[2].cos(),
        x.rate_b[0],
        x.rate_b[1],
        x.rate_b[2],
        a.rate_sp[0],
        a.rate_sp[1],
        a.rate_sp[2],
        a.thrust,
    ]
}

/// Frozen normalization statistics, computed once from the initial buffer.
///
/// Features are standardized with mean and scale; model outputs use zero-mean
/// scaling only, so zero-initialized output layers predict exactly zero wrench
/// (physics model) or zero delta (recurrent model).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub feat_mean: [f64; FEATURE_DIM],
    pub feat_scale: [f64; FEATURE_DIM],
    pub wrench_scale: [f64; 6],
    pub delta_scale: [f64; 12],
    /// Per-dimension state scale used to standardize the training loss.
    pub state_scale: [f64; 12],
}

const FEAT_SCALE_FLOOR: f64 = 1e-2;
const WRENCH_SCALE_FLOOR: f64 = 5e-2;
const DELTA_SCALE_FLOOR: f64 = 1e-4;
const STATE_SCALE_FLOOR: f64 = 5e-2;

fn std_dev(sum: f64, sum_sq: f64, n: f64) -> f64 {
    let mean = sum / n;
    (sum_sq / n - mean * mean).max(0.0).sqrt()
}

impl NormStats {
    /// Unit scales and zero means; useful for tests and hand-built models.
    pub fn identity() -> Self {
        Self {
            feat_mean: [0.0; FEATURE_DIM],
            feat_scale: [1.0; FEATURE_DIM],
            wrench_scale: [1.0; 6],
            delta_scale: [1.0; 12],
            state_scale: [1.0; 12],
        }
    }

    /// Feature, implied-wrench, state-delta, and state statistics over every
    /// transition in the buffer. The implied wrench comes from inverse
    /// dynamics on finite differences of the stored states.
    pub fn from_buffer(buf: &ReplayBuffer, body: &RigidBody) -> Self {
        let mut n = 0.0;
        let mut f_sum = [0.0; FEATURE_DIM];
        let mut f_sq = [0.0; FEATURE_DIM];
        let mut w_sq = [0.0; 6];
        let mut d_sq = [0.0; 12];
        let mut s_sum = [0.0; 12];
        let mut s_sq = [0.0; 12];
        for stored in buf.episodes() {
            let e = &stored.episode;
            for k in 0..e.len() {
                let (s0, s1) = (&e.states[k], &e.states[k + 1]);
                let f = features(s0, &e.actions[k]);
                for i in 0..FEATURE_DIM {
                    f_sum[i] += f[i];
                    f_sq[i] += f[i] * f[i];
                }
                let delta = crate::types::state_delta(s1, s0);
                for i in 0..12 {
                    d_sq[i] += delta[i] * delta[i];
                }
                let flat = s0.to_flat();
                for i in 0..12 {
                    s_sum[i] += flat[i];
                    s_sq[i] += flat[i] * flat[i];
                }
                let w = implied_wrench(s0, s1, e.dt, body);
                for i in 0..3 {
                    w_sq[i] += w.force_b[i] * w.force_b[i];
                    w_sq[i + 3] += w.moment_b[i] * w.moment_b[i];
                }
                n += 1.0;
            }
        }
        assert!(n > 0.0, "normalization needs a nonempty buffer");
        let mut out = Self::identity();
        for i in 0..FEATURE_DIM {
            out.feat_mean[i] = f_sum[i] / n;
            out.feat_scale[i] = std_dev(f_sum[i], f_sq[i], n).max(FEAT_SCALE_FLOOR);
        }
        for i in 0..6 {
            out.wrench_scale[i] = (w_sq[i] / n).sqrt().max(WRENCH_SCALE_FLOOR);
        }
        for i in 0..12 {
            out.delta_scale[i] = (d_sq[i] / n).sqrt().max(DELTA_SCALE_FLOOR);
            out.state_scale[i] = std_dev(s_sum[i], s_sq[i], n).max(STATE_SCALE_FLOOR);
        }
        out
    }

    pub fn normalize_features(&self, f: &[f64; FEATURE_DIM]) -> [f64; FEATURE_DIM] {
        let mut out = [0.0; FEATURE_DIM];
        for i in 0..FEATURE_DIM {
            out[i] = (f[i] - self.feat_mean[i]) / self.feat_scale[i];
        }
        out
    }

    pub fn denormalize_features(&self, f: &[f64; FEATURE_DIM]) -> [f64; FEATURE_DIM] {
        let mut out = [0.0; FEATURE_DIM];
        for i in 0..FEATURE_DIM {
            out[i] = f[i] * self.feat_scale[i] + self.feat_mean[i];
        }
        out
    }
}

/// Net wrench that would explain the observed one-step state change, from
/// finite differences of velocity and rate.
pub fn implied_wrench(s0: &State12, s1: &State12, dt: f64, body: &RigidBody) -> Wrench {
    let m = body.params.mass;
    let mut force = [0.0; 3];
    let mut vdot = [0.0; 3];
    let mut wdot = [0.0; 3];
    for i in 0..3 {
        vdot[i] = (s1.vel_b[i] - s0.vel_b[i]) / dt;
        wdot[i] = (s1.rate_b[i] - s0.rate_b[i]) / dt;
    }
    let omega = s0.rate_b;
    let coriolis = crate::math::cross3(omega, s0.vel_b);
    for i in 0..3 {
        force[i] = m * (vdot[i] + coriolis[i]);
    }
    let i_omega = crate::math::matvec3(&body.params.inertia, omega);
    let gyro = crate::math::cross3(omega, i_omega);
    let i_wdot = crate::math::matvec3(&body.params.inertia, wdot);
    let moment = [
        i_wdot[0] + gyro[0],
        i_wdot[1] + gyro[1],
        i_wdot[2] + gyro[2],
    ];
    Wrench {
        force_b: force,
        moment_b: moment,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    Physics,
    Rnn,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ModelKind::Physics => write!(f, "physics"),
            ModelKind::Rnn => write!(f, "rnn"),
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "physics" => Ok(ModelKind::Physics),
            "rnn" => Ok(ModelKind::Rnn),
            other => Err(format!("unknown model kind `{other}` (physics|rnn)")),
        }
    }
}

/// Where a rollout begins: the start state, the preceding history window for
/// recurrent initialization, and (for harness oracles) which stored episode
/// and offset it came from.
#[derive(Debug, Clone, Default)]
pub struct RolloutStart {
    pub state: State12,
    pub history: Vec<HistoryStep>,
    pub provenance: Option<(u64, usize)>,
}

impl RolloutStart {
    pub fn from_state(state: State12) -> Self {
        Self {
            state,
            history: Vec::new(),
            provenance: None,
        }
    }
}

/// Common closed-loop rollout interface: the model consumes its own previous
/// prediction, never the ground truth.
pub trait WorldModel {
    fn kind_name(&self) -> &'static str;
    fn rollout(
        &self,
        start: &RolloutStart,
        actions: &[Action],
        dt: f64,
    ) -> Result<Vec<State12>, ModelError>;
}

/// MLP-to-wrench model integrated through the 6DOF RK4 step.
#[derive(Debug, Clone)]
pub struct PhysicsModel {
    pub mlp: MlpParams,
    body: RigidBody,
    pub norm: NormStats,
    /// Add gravity analytically and let the MLP predict only the non-gravity
    /// wrench. Off by default: the net output is the full net wrench.
    pub gravity_prior: bool,
}

impl PhysicsModel {
    /// Fresh model with Xavier hidden layers and a zeroed output layer, so the
    /// initial prediction from any state is a zero net wrench (drift-free).
    pub fn new(
        hidden: &[usize],
        body: RigidBodyParams,
        norm: NormStats,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Result<Self, ModelError> {
        let mut widths = vec![FEATURE_DIM];
        widths.extend_from_slice(hidden);
        widths.push(6);
        let mut mlp = MlpParams::xavier(MlpSpec::new(&widths), rng);
        mlp.zero_output_layer();
        Ok(Self {
            mlp,
            body: RigidBody::new(body)?,
            norm,
            gravity_prior: false,
        })
    }

    pub fn from_parts(
        mlp: MlpParams,
        body: RigidBodyParams,
        norm: NormStats,
        gravity_prior: bool,
    ) -> Result<Self, ModelError> {
        Ok(Self {
            mlp,
            body: RigidBody::new(body)?,
            norm,
            gravity_prior,
        })
    }

    pub fn body(&self) -> &RigidBody {
        &self.body
    }

    /// The net wrench the MLP predicts for one state/action pair.
    pub fn predicted_wrench(&self, x: &State12, a: &Action) -> Result<Wrench, ModelError> {
        let feat = self.norm.normalize_features(&features(x, a));
        let out = self.mlp.forward(&feat)?;
        let mut w = Wrench {
            force_b: [
                out[0] * self.norm.wrench_scale[0],
                out[1] * self.norm.wrench_scale[1],
                out[2] * self.norm.wrench_scale[2],
            ],
            moment_b: [
                out[3] * self.norm.wrench_scale[3],
                out[4] * self.norm.wrench_scale[4],
                out[5] * self.norm.wrench_scale[5],
            ],
        };
        if self.gravity_prior {
            let r = crate::math::dcm_from_att(&x.att);
            let g_b = matvec3_t(&r, [0.0, 0.0, self.body.params.mass * self.body.params.gravity]);
            for i in 0..3 {
                w.force_b[i] += g_b[i];
            }
        }
        Ok(w)
    }

    /// One predicted step: wrench from the MLP, then one RK4 step.
    pub fn predict_step(&self, x: &State12, a: &Action, dt: f64) -> Result<State12, ModelError> {
        let w = self.predicted_wrench(x, a)?;
        Ok(crate::dynamics::rk4_step_state(x, &w, dt, &self.body)?)
    }
}

impl WorldModel for PhysicsModel {
    fn kind_name(&self) -> &'static str {
        "physics"
    }

    fn rollout(
        &self,
        start: &RolloutStart,
        actions: &[Action],
        dt: f64,
    ) -> Result<Vec<State12>, ModelError> {
        let mut out = Vec::with_capacity(actions.len());
        let mut x = start.state;
        for (step, a) in actions.iter().enumerate() {
            match self.predict_step(&x, a, dt) {
                Ok(next) => {
                    x = next;
                    out.push(next);
                }
                Err(ModelError::Dynamics(DynError::Singularity { .. })) => {
                    return Err(ModelError::Truncated { step, partial: out })
                }
                Err(e) => return Err(e),
            }
        }
        Ok(out)
    }
}

/// MLP-initialized LSTM that predicts next-state deltas.
#[derive(Debug, Clone)]
pub struct RnnModel {
    pub init_mlp: MlpParams,
    pub lstm: LstmParams,
    pub head: MlpParams,
    pub history: usize,
    pub norm: NormStats,
}

impl RnnModel {
    pub fn new(
        history: usize,
        init_hidden: &[usize],
        lstm_hidden: usize,
        norm: NormStats,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Self {
        let mut widths = vec![history * HISTORY_SLOT_DIM];
        widths.extend_from_slice(init_hidden);
        widths.push(2 * lstm_hidden);
        let init_mlp = MlpParams::xavier(MlpSpec::new(&widths), rng);
        let lstm = LstmParams::xavier(FEATURE_DIM, lstm_hidden, rng);
        let head = MlpParams::xavier(MlpSpec::new(&[lstm_hidden, 12]), rng);
        Self {
            init_mlp,
            lstm,
            head,
            history,
            norm,
        }
    }

    pub fn hidden_size(&self) -> usize {
        self.lstm.hidden_size
    }

    /// Flat parameter vector: initializer, then LSTM, then head.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out =
            Vec::with_capacity(self.init_mlp.theta.len() + self.lstm.theta.len() + self.head.theta.len());
        out.extend_from_slice(&self.init_mlp.theta);
        out.extend_from_slice(&self.lstm.theta);
        out.extend_from_slice(&self.head.theta);
        out
    }

    pub fn set_flat_params(&mut self, theta: &[f64]) {
        let (n1, n2) = (self.init_mlp.theta.len(), self.lstm.theta.len());
        assert_eq!(theta.len(), n1 + n2 + self.head.theta.len());
        self.init_mlp.theta.copy_from_slice(&theta[..n1]);
        self.lstm.theta.copy_from_slice(&theta[n1..n1 + n2]);
        self.head.theta.copy_from_slice(&theta[n1 + n2..]);
    }

    /// Normalized, masked history window flattened for the initializer.
    /// The window must already have the configured length.
    fn flatten_history(&self, window: &[HistoryStep]) -> Result<Vec<f64>, ModelError> {
        if window.len() != self.history {
            return Err(ModelError::HistoryLength {
                expected: self.history,
                got: window.len(),
            });
        }
        let mut flat = Vec::with_capacity(self.history * HISTORY_SLOT_DIM);
        for h in window {
            if h.valid {
                let f = self.norm.normalize_features(&features(&h.state, &h.action));
                flat.extend_from_slice(&f);
                flat.push(1.0);
            } else {
                flat.extend_from_slice(&[0.0; FEATURE_DIM]);
                flat.push(0.0);
            }
        }
        Ok(flat)
    }

    /// Left-pads (masked) or truncates a history to the configured length.
    pub fn fit_history(&self, history: &[HistoryStep]) -> Vec<HistoryStep> {
        let mut window = Vec::with_capacity(self.history);
        let take = history.len().min(self.history);
        for _ in 0..self.history - take {
            window.push(HistoryStep {
                state: State12::zero(),
                action: Action::zero(),
                valid: false,
            });
        }
        window.extend_from_slice(&history[history.len() - take..]);
        window
    }

    /// Initial hidden state from a history window: (h0, c0) is the split
    /// output of the initializer MLP.
    pub fn init_hidden(&self, window: &[HistoryStep]) -> Result<(Vec<f64>, Vec<f64>), ModelError> {
        let flat = self.flatten_history(window)?;
        let out = self.init_mlp.forward(&flat)?;
        let nh = self.hidden_size();
        Ok((out[..nh].to_vec(), out[nh..].to_vec()))
    }

    /// One predicted step: LSTM update, head to a scaled state delta, applied
    /// to the current state with wrapped attitude.
    pub fn predict_step(
        &self,
        h: &[f64],
        c: &[f64],
        x: &State12,
        a: &Action,
    ) -> Result<(State12, Vec<f64>, Vec<f64>), ModelError> {
        let feat = self.norm.normalize_features(&features(x, a));
        let (h1, c1) = self.lstm.step(h, c, &feat)?;
        let raw = self.head.forward(&h1)?;
        let mut flat = x.to_flat();
        for i in 0..12 {
            flat[i] += raw[i] * self.norm.delta_scale[i];
            if (6..9).contains(&i) {
                flat[i] = wrap_finite(flat[i]);
            }
        }
        Ok((State12::from_flat(&flat), h1, c1))
    }
}

impl WorldModel for RnnModel {
    fn kind_name(&self) -> &'static str {
        "rnn"
    }

    fn rollout(
        &self,
        start: &RolloutStart,
        actions: &[Action],
        dt: f64,
    ) -> Result<Vec<State12>, ModelError> {
        let _ = dt; // the recurrent model is tied to the training rate
        let window = self.fit_history(&start.history);
        let (mut h, mut c) = self.init_hidden(&window)?;
        let mut out = Vec::with_capacity(actions.len());
        let mut x = start.state;
        for a in actions {
            let (next, h1, c1) = self.predict_step(&h, &c, &x, a)?;
            x = next;
            h = h1;
            c = c1;
            out.push(next);
        }
        Ok(out)
    }
}

/// The true plant wrapped as a world model. Requires rollout provenance and
/// the environment traces recorded at collection time, so it can resume the
/// exact simulator state (including motor lag) at any episode offset.
pub struct OracleModel {
    pub sim: Simulator,
    pub traces: HashMap<u64, Vec<EnvState>>,
}

impl WorldModel for OracleModel {
    fn kind_name(&self) -> &'static str {
        "oracle"
    }

    fn rollout(
        &self,
        start: &RolloutStart,
        actions: &[Action],
        _dt: f64,
    ) -> Result<Vec<State12>, ModelError> {
        let (episode, offset) = start.provenance.ok_or(ModelError::MissingProvenance)?;
        let trace = self
            .traces
            .get(&episode)
            .ok_or(ModelError::UnknownEpisode(episode))?;
        if offset >= trace.len() {
            return Err(ModelError::TraceTooShort {
                start: offset,
                horizon: actions.len(),
                len: trace.len(),
            });
        }
        let mut env = trace[offset];
        let mut out = Vec::with_capacity(actions.len());
        for (step, a) in actions.iter().enumerate() {
            match self.sim.step(&env, a) {
                Ok(next) => {
                    env = next;
                    out.push(next.state);
                }
                Err(SimError::PitchGuard { .. }) => {
                    return Err(ModelError::Truncated { step, partial: out })
                }
                Err(e) => return Err(e.into()),
            }
        }
        Ok(out)
    }
}

/// A trained model of either kind.
#[derive(Debug, Clone)]
pub enum AnyModel {
    Physics(PhysicsModel),
    Rnn(RnnModel),
}

impl AnyModel {
    pub fn kind(&self) -> ModelKind {
        match self {
            AnyModel::Physics(_) => ModelKind::Physics,
            AnyModel::Rnn(_) => ModelKind::Rnn,
        }
    }

    /// All trainable parameters as one flat vector; layout matches the tape
    /// rollouts' lifted parameter node.
    pub fn params_flat(&self) -> Vec<f64> {
        match self {
            AnyModel::Physics(m) => m.mlp.theta.clone(),
            AnyModel::Rnn(m) => m.flat_params(),
        }
    }

    pub fn set_params_flat(&mut self, theta: &[f64]) {
        match self {
            AnyModel::Physics(m) => {
                assert_eq!(theta.len(), m.mlp.theta.len());
                m.mlp.theta.copy_from_slice(theta);
            }
            AnyModel::Rnn(m) => m.set_flat_params(theta),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            AnyModel::Physics(m) => m.mlp.theta.len(),
            AnyModel::Rnn(m) => {
                m.init_mlp.theta.len() + m.lstm.theta.len() + m.head.theta.len()
            }
        }
    }

    pub fn norm(&self) -> &NormStats {
        match self {
            AnyModel::Physics(m) => &m.norm,
            AnyModel::Rnn(m) => &m.norm,
        }
    }
}

impl WorldModel for AnyModel {
    fn kind_name(&self) -> &'static str {
        match self {
            AnyModel::Physics(_) => "physics",
            AnyModel::Rnn(_) => "rnn",
        }
    }

    fn rollout(
        &self,
        start: &RolloutStart,
        actions: &[Action],
        dt: f64,
    ) -> Result<Vec<State12>, ModelError> {
        match self {
            AnyModel::Physics(m) => m.rollout(start, actions, dt),
            AnyModel::Rnn(m) => m.rollout(start, actions, dt),
        }
    }
}

// ---------------------------------------------------------------------------
// Tape-side rollouts for training.
// ---------------------------------------------------------------------------

/// Feature vector node built from the per-component state variables.
fn features_on_tape<'t>(
    tape: &'t Tape,
    state: &[Var<'t>; 12],
    action: &Action,
    norm: &NormStats,
) -> Var<'t> {
    let act = tape.constant(&action.to_flat());
    let raw = tape.concat(&[
        state[3],
        state[4],
        state[5],
        state[6].sin(),
        state[6].cos(),
        state[7].sin(),
        state[7].cos(),
        state[8].sin(),
        state[8].cos(),
        state[9],
        state[10],
        state[11],
        act,
    ]);
    let mean = tape.constant(&norm.feat_mean);
    let mut inv = [0.0; FEATURE_DIM];
    for i in 0..FEATURE_DIM {
        inv[i] = 1.0 / norm.feat_scale[i];
    }
    let inv_scale = tape.constant(&inv);
    (raw - mean) * inv_scale
}

fn state_consts<'t>(tape: &'t Tape, x: &State12) -> [Var<'t>; 12] {
    let flat = x.to_flat();
    let mut out = [tape.constant_scalar(flat[0]); 12];
    for i in 1..12 {
        out[i] = tape.constant_scalar(flat[i]);
    }
    out
}

/// A rollout recorded on a tape: the lifted parameter node (for gradient
/// extraction), the predicted per-step states, and where the rollout stopped
/// if the integrator hit the pitch guard.
pub struct TapeRollout<'t> {
    pub theta: Var<'t>,
    pub states: Vec<[Var<'t>; 12]>,
    pub truncated_at: Option<usize>,
}

/// Closed-loop physics-model rollout recorded on a tape. A pitch-guard hit
/// truncates the rollout; the states predicted before it remain usable for
/// the loss.
pub fn physics_rollout_tape<'t>(
    tape: &'t Tape,
    model: &PhysicsModel,
    x0: &State12,
    actions: &[Action],
    dt: f64,
) -> Result<TapeRollout<'t>, ModelError> {
    let theta = tape.input(&model.mlp.theta);
    let mlp = MlpOnTape::bind(tape, &model.mlp.spec, theta, 0);
    let w_scale = tape.constant(&model.norm.wrench_scale);
    let mut state = state_consts(tape, x0);
    let mut out = Vec::with_capacity(actions.len());
    for (step, a) in actions.iter().enumerate() {
        let feat = features_on_tape(tape, &state, a, &model.norm);
        let wrench = mlp.forward(tape, feat) * w_scale;
        let mut force = [
            tape.index(wrench, 0),
            tape.index(wrench, 1),
            tape.index(wrench, 2),
        ];
        let moment = [
            tape.index(wrench, 3),
            tape.index(wrench, 4),
            tape.index(wrench, 5),
        ];
        if model.gravity_prior {
            let mg = model.body.params.mass * model.body.params.gravity;
            let (sp, cp) = (state[6].sin(), state[6].cos());
            let (st, ct) = (state[7].sin(), state[7].cos());
            force[0] = force[0] + (-st).scale(mg);
            force[1] = force[1] + (sp * ct).scale(mg);
            force[2] = force[2] + (cp * ct).scale(mg);
        }
        match rk4_step(&state, &force, &moment, dt, &model.body) {
            Ok(next) => {
                state = next;
                out.push(next);
            }
            Err(DynError::Singularity { .. }) => {
                return Ok(TapeRollout {
                    theta,
                    states: out,
                    truncated_at: Some(step),
                })
            }
            Err(e) => return Err(e.into()),
        }
    }
    Ok(TapeRollout {
        theta,
        states: out,
        truncated_at: None,
    })
}

/// Closed-loop recurrent rollout recorded on a tape; parameter layout matches
/// [`RnnModel::flat_params`].
pub fn rnn_rollout_tape<'t>(
    tape: &'t Tape,
    model: &RnnModel,
    history: &[HistoryStep],
    x0: &State12,
    actions: &[Action],
) -> Result<TapeRollout<'t>, ModelError> {
    let window = model.fit_history(history);
    let flat_hist = model.flatten_history(&window)?;
    let theta_values = model.flat_params();
    let theta = tape.input(&theta_values);
    let (n1, n2) = (model.init_mlp.theta.len(), model.lstm.theta.len());
    let init = MlpOnTape::bind(tape, &model.init_mlp.spec, theta, 0);
    let lstm = LstmOnTape::bind(tape, &model.lstm, theta, n1);
    let head = MlpOnTape::bind(tape, &model.head.spec, theta, n1 + n2);

    let hist_in = tape.constant(&flat_hist);
    let hc = init.forward(tape, hist_in);
    let nh = model.hidden_size();
    let mut h = tape.slice(hc, 0, nh);
    let mut c = tape.slice(hc, nh, nh);
    let d_scale = tape.constant(&model.norm.delta_scale);

    let mut state = state_consts(tape, x0);
    let mut out = Vec::with_capacity(actions.len());
    for a in actions {
        let feat = features_on_tape(tape, &state, a, &model.norm);
        let (h1, c1) = lstm.step(tape, h, c, feat);
        h = h1;
        c = c1;
        let delta = head.forward(tape, h1) * d_scale;
        let mut next = state;
        for i in 0..12 {
            next[i] = state[i] + tape.index(delta, i);
            if (6..9).contains(&i) {
                next[i] = next[i].wrap_angle();
            }
        }
        state = next;
        out.push(next);
    }
    Ok(TapeRollout {
        theta,
        states: out,
        truncated_at: None,
    })
}

// ---------------------------------------------------------------------------
// Checkpoints.
// ---------------------------------------------------------------------------

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint parse: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint is malformed: {0}")]
    Malformed(String),
}

/// Versioned container for a trained model, its optimizer state, the training
/// PRNG, and the update counter.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub kind: ModelKind,
    pub norm: NormStats,
    pub updates: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub physics: Option<PhysicsCheckpoint>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rnn: Option<RnnCheckpoint>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub adam: Option<crate::nn::AdamState>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rng: Option<rand_chacha::ChaCha8Rng>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhysicsCheckpoint {
    pub mlp: MlpParams,
    pub body: RigidBodyParams,
    pub gravity_prior: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RnnCheckpoint {
    pub init_mlp: MlpParams,
    pub lstm: LstmParams,
    pub head: MlpParams,
    pub history: usize,
}

pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn of_model(
        model: &AnyModel,
        adam: Option<crate::nn::AdamState>,
        rng: Option<rand_chacha::ChaCha8Rng>,
        updates: u64,
    ) -> Self {
        match model {
            AnyModel::Physics(m) => Self {
                version: CHECKPOINT_VERSION,
                kind: ModelKind::Physics,
                norm: m.norm.clone(),
                updates,
                physics: Some(PhysicsCheckpoint {
                    mlp: m.mlp.clone(),
                    body: m.body.params.clone(),
                    gravity_prior: m.gravity_prior,
                }),
                rnn: None,
                adam,
                rng,
            },
            AnyModel::Rnn(m) => Self {
                version: CHECKPOINT_VERSION,
                kind: ModelKind::Rnn,
                norm: m.norm.clone(),
                updates,
                physics: None,
                rnn: Some(RnnCheckpoint {
                    init_mlp: m.init_mlp.clone(),
                    lstm: m.lstm.clone(),
                    head: m.head.clone(),
                    history: m.history,
                }),
                adam,
                rng,
            },
        }
    }

    pub fn into_model(self) -> Result<AnyModel, CheckpointError> {
        if self.version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version(self.version));
        }
        match self.kind {
            ModelKind::Physics => {
                let p = self
                    .physics
                    .ok_or_else(|| CheckpointError::Malformed("missing physics body".into()))?;
                let model = PhysicsModel::from_parts(p.mlp, p.body, self.norm, p.gravity_prior)
                    .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
                Ok(AnyModel::Physics(model))
            }
            ModelKind::Rnn => {
                let r = self
                    .rnn
                    .ok_or_else(|| CheckpointError::Malformed("missing rnn body".into()))?;
                Ok(AnyModel::Rnn(RnnModel {
                    init_mlp: r.init_mlp,
                    lstm: r.lstm,
                    head: r.head,
                    history: r.history,
                    norm: self.norm,
                }))
            }
        }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), CheckpointError> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, CheckpointError> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}
