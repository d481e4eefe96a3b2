//! The experiment configuration file: one TOML document holding every number
//! in the pipeline. Unknown keys are rejected so typos fail loudly, and
//! `config print-default` emits the canonical file with commentary on every
//! value that is an assumption rather than a published quantity.

use crate::CliError;
use quadworld::excitation::ChirpConfig;
use quadworld::sim::{ControllerGains, PlantParams, PosGains, RateGains, Simulator};
use quadworld::training::{LossWeights, TrainConfig};
use quadworld::types::RigidBodyParams;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run: RunSection,
    pub plant: PlantSection,
    pub controllers: ControllerSection,
    pub excitation: ExcitationSection,
    pub replay: ReplaySection,
    pub model: ModelSection,
    pub training: TrainingSection,
    pub evaluation: EvaluationSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    /// Output root; the QUADWORLD_OUT environment variable overrides it.
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantSection {
    pub mass: f64,
    pub inertia_diag: [f64; 3],
    pub gravity: f64,
    pub arm_length: f64,
    pub thrust_coeff: f64,
    pub torque_coeff: f64,
    pub motor_tau: f64,
    pub lin_drag: [f64; 3],
    pub ang_drag: [f64; 3],
    pub max_thrust: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerSection {
    pub rate: RateSection,
    pub position: PositionSection,
    /// Flight profile used only for the out-of-distribution maneuver.
    pub ood_flight: PositionSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateSection {
    pub kp: [f64; 3],
    pub ki: [f64; 3],
    pub kd: [f64; 3],
    pub output_limit: [f64; 3],
    pub integral_limit: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PositionSection {
    pub kp_pos: f64,
    pub vel_limit: f64,
    pub kp_vel: f64,
    pub accel_limit: f64,
    pub kp_att: f64,
    pub rate_limit: f64,
    pub tilt_limit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExcitationSection {
    pub f0: f64,
    pub f1: f64,
    pub sweep_duration: f64,
    pub amplitude: [f64; 3],
    pub trim_bounds: [f64; 3],
    pub reset_duration: f64,
    pub buffer_duration: f64,
    pub store_resets: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplaySection {
    pub capacity_steps: usize,
    pub control_dt: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub physics_hidden: Vec<usize>,
    pub rnn_init_hidden: Vec<usize>,
    pub rnn_lstm_hidden: usize,
    pub history: usize,
    pub gravity_prior: bool,
    /// Percentage error applied to the nominal mass/inertia handed to the
    /// physics model, for robustness studies.
    pub mass_error_pct: f64,
    pub inertia_error_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub horizon: usize,
    pub batch: usize,
    pub total_updates: u64,
    pub lr: f64,
    pub grad_clip: f64,
    pub validation_period: u64,
    pub validation_horizon: usize,
    pub validation_rollouts: usize,
    pub holdout_fraction: f64,
    pub online_collect: bool,
    pub checkpoint_period: u64,
    pub loss_weights: WeightsSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightsSection {
    pub position: f64,
    pub velocity: f64,
    pub attitude: f64,
    pub rates: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationSection {
    pub id_horizon: usize,
    pub id_rollouts: usize,
    /// Paper-faithful single-rollout mode (one sampled window instead of the
    /// averaged default).
    pub single_rollout: bool,
    pub ood_cruise: f64,
    pub ood_duration: f64,
    pub ood_horizons: Vec<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        toml::from_str(DEFAULT_CONFIG_TOML).expect("canonical default config parses")
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.plant_params()
            .validate()
            .map_err(|e| CliError::Config(format!("plant: {e}")))?;
        if !(self.replay.control_dt > 0.0) {
            return Err(CliError::Config("replay.control_dt must be positive".into()));
        }
        let chirp = self.chirp_config();
        chirp
            .validate()
            .map_err(|e| CliError::Config(format!("excitation: {e}")))?;
        if self.training.total_updates > 0 && self.training.validation_period == 0 {
            return Err(CliError::Config(
                "training.validation_period must be positive".into(),
            ));
        }
        if self.evaluation.ood_horizons.is_empty() {
            return Err(CliError::Config(
                "evaluation.ood_horizons must not be empty".into(),
            ));
        }
        Ok(())
    }

    /// Output root, honoring the QUADWORLD_OUT override.
    pub fn out_root(&self) -> PathBuf {
        match std::env::var_os("QUADWORLD_OUT") {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.run.out_dir.clone(),
        }
    }

    pub fn run_id(&self) -> String {
        format!("seed{}", self.run.seed)
    }

    pub fn buffer_dir(&self) -> PathBuf {
        self.out_root().join("buffer")
    }

    pub fn ood_path(&self) -> PathBuf {
        self.out_root().join("ood.jsonl")
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.out_root().join("checkpoints")
    }

    pub fn log_dir(&self) -> PathBuf {
        self.out_root().join("logs")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.out_root().join("reports").join(self.run_id())
    }

    pub fn body_params(&self) -> RigidBodyParams {
        RigidBodyParams {
            mass: self.plant.mass,
            inertia: [
                [self.plant.inertia_diag[0], 0.0, 0.0],
                [0.0, self.plant.inertia_diag[1], 0.0],
                [0.0, 0.0, self.plant.inertia_diag[2]],
            ],
            gravity: self.plant.gravity,
        }
    }

    /// Nominal rigid-body parameters handed to the physics model, with the
    /// configured mismatch applied.
    pub fn nominal_body_params(&self) -> RigidBodyParams {
        let mut body = self.body_params();
        body.mass *= 1.0 + self.model.mass_error_pct / 100.0;
        for row in body.inertia.iter_mut() {
            for v in row.iter_mut() {
                *v *= 1.0 + self.model.inertia_error_pct / 100.0;
            }
        }
        body
    }

    pub fn plant_params(&self) -> PlantParams {
        PlantParams {
            body: self.body_params(),
            arm_length: self.plant.arm_length,
            thrust_coeff: self.plant.thrust_coeff,
            torque_coeff: self.plant.torque_coeff,
            motor_tau: self.plant.motor_tau,
            lin_drag: self.plant.lin_drag,
            ang_drag: self.plant.ang_drag,
            max_thrust: self.plant.max_thrust,
        }
    }

    fn pos_gains(section: &PositionSection) -> PosGains {
        PosGains {
            kp_pos: section.kp_pos,
            vel_limit: section.vel_limit,
            kp_vel: section.kp_vel,
            accel_limit: section.accel_limit,
            kp_att: section.kp_att,
            rate_limit: section.rate_limit,
            tilt_limit: section.tilt_limit,
        }
    }

    pub fn controller_gains(&self) -> ControllerGains {
        ControllerGains {
            rate: RateGains {
                kp: self.controllers.rate.kp,
                ki: self.controllers.rate.ki,
                kd: self.controllers.rate.kd,
                output_limit: self.controllers.rate.output_limit,
                integral_limit: self.controllers.rate.integral_limit,
            },
            pos: Self::pos_gains(&self.controllers.position),
        }
    }

    /// Simulator used for data collection and resets.
    pub fn simulator(&self) -> Result<Simulator, CliError> {
        Simulator::new(
            self.plant_params(),
            self.controller_gains(),
            self.replay.control_dt,
        )
        .map_err(|e| CliError::Config(format!("simulator: {e}")))
    }

    /// Simulator flying the out-of-distribution maneuver profile.
    pub fn ood_simulator(&self) -> Result<Simulator, CliError> {
        let mut gains = self.controller_gains();
        gains.pos = Self::pos_gains(&self.controllers.ood_flight);
        Simulator::new(self.plant_params(), gains, self.replay.control_dt)
            .map_err(|e| CliError::Config(format!("simulator: {e}")))
    }

    pub fn chirp_config(&self) -> ChirpConfig {
        ChirpConfig {
            f0: self.excitation.f0,
            f1: self.excitation.f1,
            sweep_duration: self.excitation.sweep_duration,
            amplitude: self.excitation.amplitude,
            trim_bounds: self.excitation.trim_bounds,
            reset_duration: self.excitation.reset_duration,
            buffer_duration: self.excitation.buffer_duration,
            store_resets: self.excitation.store_resets,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            horizon: self.training.horizon,
            batch: self.training.batch,
            total_updates: self.training.total_updates,
            lr: self.training.lr,
            grad_clip: self.training.grad_clip,
            validation_period: self.training.validation_period,
            validation_horizon: self.training.validation_horizon,
            validation_rollouts: self.training.validation_rollouts,
            history: self.model.history,
            weights: LossWeights {
                position: self.training.loss_weights.position,
                velocity: self.training.loss_weights.velocity,
                attitude: self.training.loss_weights.attitude,
                rates: self.training.loss_weights.rates,
            },
            seed: self.run.seed,
            holdout_fraction: self.training.holdout_fraction,
            online_collect: self.training.online_collect,
        }
    }
}

/// Canonical default configuration. Comments call out which numbers are
/// assumptions chosen for this laboratory rather than published quantities.
pub const DEFAULT_CONFIG_TOML: &str = r#"# quadworld experiment configuration.
# Every number the pipeline uses lives here; command-line flags only override
# paths, the seed, and the model kind. Values marked "assumption" fill gaps
# the source study leaves open and were tuned once for this desk-scale plant.

[run]
seed = 42
out_dir = "runs/default"        # QUADWORLD_OUT environment variable overrides

[plant]                          # ground-truth vehicle (assumption: the study
mass = 1.0                       # used an unspecified simulator vehicle; this
inertia_diag = [0.01, 0.01, 0.02] # is a representative 450-class quadcopter)
gravity = 9.81
arm_length = 0.16                # m
thrust_coeff = 5.0               # N per unit squared motor command, per motor
torque_coeff = 0.02              # N*m yaw reaction per N of thrust
motor_tau = 0.01                 # s; assumption: fast motors keep the 12-dim
                                 # state effectively Markov at the 20 Hz rate
lin_drag = [0.1, 0.1, 0.2]       # N*s/m
ang_drag = [0.01, 0.01, 0.02]    # N*m*s/rad
max_thrust = 20.0                # N total

[controllers.rate]               # inner loop; part of the environment, frozen
kp = [0.1, 0.1, 0.15]
ki = [0.0, 0.0, 0.0]             # assumption: no integrator, so the controller
                                 # carries no hidden state the models cannot see
kd = [0.002, 0.002, 0.0]
output_limit = [0.3, 0.3, 0.2]
integral_limit = [0.1, 0.1, 0.1]

[controllers.position]           # outer loop for resets and trim holding
kp_pos = 1.2
vel_limit = 1.0                  # m/s; assumption: gentle resets
kp_vel = 2.2
accel_limit = 1.5                # m/s^2
kp_att = 6.0
rate_limit = 2.5                 # rad/s
tilt_limit = 0.45                # rad

[controllers.ood_flight]         # sporty profile flown only for the
kp_pos = 1.2                     # out-of-distribution maneuver, so the
vel_limit = 6.0                  # hover-to-forward transition is sharp
kp_vel = 4.0
accel_limit = 9.0
kp_att = 8.0
rate_limit = 3.0
tilt_limit = 0.45

[excitation]
f0 = 0.5                         # Hz; assumption (sweep band not published)
f1 = 4.0                         # Hz
sweep_duration = 2.5             # s, published
amplitude = [0.8, 0.8, 0.4]      # rad/s per axis; assumption
trim_bounds = [2.0, 2.0, 0.5]    # m/s half-widths; assumption
reset_duration = 7.2             # s; assumption: full-length reset recordings
                                 # leave room for 128-step validation windows
buffer_duration = 100.0          # s of stored flight, published
store_resets = true

[replay]
capacity_steps = 100000
control_dt = 0.05                # s (20 Hz), published

[model]
physics_hidden = [128, 128]      # assumption: sizes not published
rnn_init_hidden = [128, 128]
rnn_lstm_hidden = 128
history = 8                      # steps; assumption: window length unpublished
gravity_prior = false            # predict the full net force, gravity included
mass_error_pct = 0.0             # mismatch knobs for robustness studies
inertia_error_pct = 0.0

[training]
horizon = 16                     # steps; assumption: training horizon
                                 # unpublished (validation horizon is 128)
batch = 64                       # assumption
total_updates = 5000             # published
lr = 2e-4                        # assumption: optimizer & rate unpublished
grad_clip = 10.0
validation_period = 250
validation_horizon = 128         # published
validation_rollouts = 8
holdout_fraction = 0.1           # held-out split is this lab's addition
online_collect = false           # true interleaves fresh chirps during training
checkpoint_period = 1000

[training.loss_weights]
position = 1.0
velocity = 1.0
attitude = 1.0
rates = 1.0

[evaluation]
id_horizon = 128                 # published
id_rollouts = 20                 # averaged; assumption (single rollout in the
single_rollout = false           # source; set single_rollout for that mode)
ood_cruise = 5.0                 # m/s; assumption: fast enough that the
                                 # transition leaves the excitation envelope
ood_duration = 6.4               # s = 128 steps
ood_horizons = [50, 128]         # both reported horizons
"#;
