//! Ground-truth quadcopter plant and the controllers that fly it.
//!
//! The plant layers motor lag, thrust/torque mixing, and linear/angular drag
//! on top of the shared 6DOF core, integrated with an inner substep for
//! fidelity. An inner-loop rate controller consumes rate setpoints plus
//! normalized thrust (the [`Action`] vocabulary), and outer position/velocity
//! loops are used for resets and the hover-to-forward maneuver. Controller
//! gains are part of the environment: tuned once, stored in the default
//! config, and never learned.

use crate::dynamics::{rk4_step_state, DynError, RigidBody};
use crate::math::{dcm_from_att, matvec3, matvec3_t, norm3, scale3, sub3};
use crate::types::{wrap_finite, Action, Episode, EpisodeTag, RigidBodyParams, State12, Wrench};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("plant hit the pitch guard at t = {t:.2} s")]
    PitchGuard { t: f64 },
    #[error(transparent)]
    Dynamics(#[from] DynError),
}

/// Physical parameters of the simulated vehicle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantParams {
    pub body: RigidBodyParams,
    /// Motor arm length, m (center to motor).
    pub arm_length: f64,
    /// Thrust per motor, N per unit squared normalized command.
    pub thrust_coeff: f64,
    /// Yaw reaction torque per Newton of motor thrust, m.
    pub torque_coeff: f64,
    /// First-order motor lag time constant, s.
    pub motor_tau: f64,
    /// Linear drag per body axis, N*s/m.
    pub lin_drag: [f64; 3],
    /// Angular drag per body axis, N*m*s/rad.
    pub ang_drag: [f64; 3],
    /// Cap on total thrust, N.
    pub max_thrust: f64,
}

impl Default for PlantParams {
    fn default() -> Self {
        Self {
            body: RigidBodyParams::default(),
            arm_length: 0.16,
            thrust_coeff: 5.0,
            torque_coeff: 0.02,
            motor_tau: 0.05,
            lin_drag: [0.1, 0.1, 0.2],
            ang_drag: [0.01, 0.01, 0.02],
            max_thrust: 20.0,
        }
    }
}

impl PlantParams {
    pub fn validate(&self) -> Result<(), crate::types::TypeError> {
        RigidBodyParams::new(self.body.mass, self.body.inertia, self.body.gravity)?;
        let positive = [
            self.arm_length,
            self.thrust_coeff,
            self.torque_coeff,
            self.motor_tau,
            self.max_thrust,
        ];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(crate::types::TypeError::NonFinite("plant parameter"));
        }
        for v in self.lin_drag.iter().chain(self.ang_drag.iter()) {
            if !(v.is_finite() && *v >= 0.0) {
                return Err(crate::types::TypeError::NonFinite("drag coefficient"));
            }
        }
        assert!(
            self.max_thrust > self.body.mass * self.body.gravity,
            "hover must be feasible: max thrust {} N vs weight {} N",
            self.max_thrust,
            self.body.mass * self.body.gravity
        );
        Ok(())
    }

    /// Normalized per-motor command that balances gravity when level.
    pub fn hover_command(&self) -> f64 {
        (self.body.mass * self.body.gravity / (4.0 * self.thrust_coeff)).sqrt()
    }
}

/// X-configuration motor geometry: (x, y) offsets in units of arm/sqrt(2)
/// and spin direction sign used for the yaw reaction torque.
///
/// index 0: front-right, 1: back-left (both spin +), 2: front-left,
/// 3: back-right (both spin -).
pub const MOTOR_LAYOUT: [(f64, f64, f64); 4] = [
    (1.0, 1.0, 1.0),
    (-1.0, -1.0, 1.0),
    (1.0, -1.0, -1.0),
    (-1.0, 1.0, -1.0),
];

/// Full simulator state: rigid-body state, motor lag states, controller
/// memory, and simulation time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub state: State12,
    /// Motor commands actually acting on the airframe, in [0, 1].
    pub motors: [f64; 4],
    pub t: f64,
    /// Rate-loop integrator per axis.
    pub rate_integral: [f64; 3],
    /// Previous rate error, for the derivative term.
    pub prev_rate_err: [f64; 3],
}

impl EnvState {
    pub fn at_rest() -> Self {
        Self {
            state: State12::zero(),
            motors: [0.0; 4],
            t: 0.0,
            rate_integral: [0.0; 3],
            prev_rate_err: [0.0; 3],
        }
    }

    /// Level at the origin with motors settled at the hover command.
    pub fn hover(plant: &PlantParams) -> Self {
        let mut s = Self::at_rest();
        s.motors = [plant.hover_command(); 4];
        s
    }
}

/// Rate-loop PID gains, output limits, and integrator clamps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateGains {
    pub kp: [f64; 3],
    pub ki: [f64; 3],
    pub kd: [f64; 3],
    /// Mixer authority limit per axis (normalized command units).
    pub output_limit: [f64; 3],
    /// Clamp on the integrator contribution (normalized command units).
    pub integral_limit: [f64; 3],
}

impl Default for RateGains {
    fn default() -> Self {
        Self {
            kp: [0.08, 0.08, 0.15],
            ki: [0.2, 0.2, 0.1],
            kd: [0.002, 0.002, 0.0],
            output_limit: [0.3, 0.3, 0.2],
            integral_limit: [0.1, 0.1, 0.1],
        }
    }
}

/// Outer-loop cascade gains: position -> velocity -> attitude -> rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosGains {
    pub kp_pos: f64,
    /// Velocity setpoint clamp, m/s.
    pub vel_limit: f64,
    pub kp_vel: f64,
    /// Horizontal acceleration clamp, m/s^2.
    pub accel_limit: f64,
    /// Attitude error to rate setpoint gain, 1/s.
    pub kp_att: f64,
    /// Rate setpoint clamp, rad/s.
    pub rate_limit: f64,
    /// Roll/pitch setpoint clamp, rad.
    pub tilt_limit: f64,
}

impl Default for PosGains {
    fn default() -> Self {
        Self {
            kp_pos: 1.2,
            vel_limit: 2.5,
            kp_vel: 2.2,
            accel_limit: 6.0,
            kp_att: 6.0,
            rate_limit: 2.5,
            tilt_limit: 0.45,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ControllerGains {
    pub rate: RateGains,
    pub pos: PosGains,
}

/// Net body wrench produced by the plant at the current motor state:
/// rotor thrust, gravity rotated into the body frame, and drag.
pub fn plant_wrench(s: &EnvState, p: &PlantParams) -> Wrench {
    let att = s.state.att;
    let r = dcm_from_att(&att);

    // Per-motor thrust with the total capped at max_thrust.
    let mut thrust: [f64; 4] = [0.0; 4];
    for (i, m) in s.motors.iter().enumerate() {
        thrust[i] = p.thrust_coeff * m * m;
    }
    let total: f64 = thrust.iter().sum();
    if total > p.max_thrust {
        let k = p.max_thrust / total;
        for t in &mut thrust {
            *t *= k;
        }
    }
    let total = total.min(p.max_thrust);

    let gravity_b = matvec3_t(&r, [0.0, 0.0, p.body.mass * p.body.gravity]);
    let drag = [
        p.lin_drag[0] * s.state.vel_b[0],
        p.lin_drag[1] * s.state.vel_b[1],
        p.lin_drag[2] * s.state.vel_b[2],
    ];
    let force_b = [
        gravity_b[0] - drag[0],
        gravity_b[1] - drag[1],
        -total + gravity_b[2] - drag[2],
    ];

    let d = p.arm_length / std::f64::consts::SQRT_2;
    let mut moment_b = [0.0; 3];
    for (i, (mx, my, spin)) in MOTOR_LAYOUT.iter().enumerate() {
        moment_b[0] += -(my * d) * thrust[i];
        moment_b[1] += (mx * d) * thrust[i];
        moment_b[2] += spin * p.torque_coeff * thrust[i];
    }
    for axis in 0..3 {
        moment_b[axis] -= p.ang_drag[axis] * s.state.rate_b[axis];
    }
    Wrench { force_b, moment_b }
}

/// Inner-loop rate PID plus mixer. Returns the four motor commands and the
/// updated controller memory (integrator, previous error).
pub fn rate_controller(
    s: &EnvState,
    a: &Action,
    g: &RateGains,
    dt: f64,
) -> ([f64; 4], [f64; 3], [f64; 3]) {
    let thrust = a.thrust.clamp(0.0, 1.0);
    let mut demand = [0.0; 3];
    let mut integral = s.rate_integral;
    let mut err = [0.0; 3];
    for axis in 0..3 {
        err[axis] = a.rate_sp[axis] - s.state.rate_b[axis];
        integral[axis] = (integral[axis] + g.ki[axis] * err[axis] * dt)
            .clamp(-g.integral_limit[axis], g.integral_limit[axis]);
        let deriv = if dt > 0.0 {
            (err[axis] - s.prev_rate_err[axis]) / dt
        } else {
            0.0
        };
        let raw = g.kp[axis] * err[axis] + integral[axis] + g.kd[axis] * deriv;
        // Torque authority is limited by available thrust: no thrust, no
        // torque. This also makes zero-thrust commands shut the motors off.
        let limit = g.output_limit[axis].min(thrust);
        demand[axis] = raw.clamp(-limit, limit);
    }

    let mut motors = [0.0; 4];
    for (i, (mx, my, spin)) in MOTOR_LAYOUT.iter().enumerate() {
        let mix = -my.signum() * demand[0] + mx.signum() * demand[1] + spin * demand[2];
        motors[i] = (thrust + mix).clamp(0.0, 1.0);
    }
    (motors, integral, err)
}

/// Velocity-loop entry of the cascade: earth-frame velocity setpoint to an
/// [`Action`] (attitude setpoints resolved to rate setpoints plus thrust).
pub fn velocity_controller(
    s: &EnvState,
    vel_sp_e: [f64; 3],
    target_yaw: f64,
    p: &PlantParams,
    g: &PosGains,
) -> Action {
    let r = dcm_from_att(&s.state.att);
    let vel_e = matvec3(&r, s.state.vel_b);
    let mut accel = [0.0; 3];
    for axis in 0..3 {
        accel[axis] =
            (g.kp_vel * (vel_sp_e[axis] - vel_e[axis])).clamp(-g.accel_limit, g.accel_limit);
    }

    // Specific force the rotors must supply, earth frame (NED, down positive):
    // f = m (a_des - g e_z). Hover is (0, 0, -m g).
    let m = p.body.mass;
    let f_e = [
        m * accel[0],
        m * accel[1],
        m * (accel[2] - p.body.gravity),
    ];
    // Resolve in the yaw frame so roll/pitch setpoints are yaw-independent.
    let yaw = s.state.att[2];
    let (sy, cy) = (yaw.sin(), yaw.cos());
    let f_yaw = [cy * f_e[0] + sy * f_e[1], -sy * f_e[0] + cy * f_e[1], f_e[2]];

    let up = (-f_yaw[2]).max(0.1 * m * p.body.gravity);
    let pitch_des = (-f_yaw[0]).atan2(up).clamp(-g.tilt_limit, g.tilt_limit);
    let roll_des = (f_yaw[1] * pitch_des.cos())
        .atan2(up)
        .clamp(-g.tilt_limit, g.tilt_limit);

    let mut rate_sp = [0.0; 3];
    let att_des = [roll_des, pitch_des, target_yaw];
    for axis in 0..3 {
        let err = wrap_finite(att_des[axis] - s.state.att[axis]);
        rate_sp[axis] = (g.kp_att * err).clamp(-g.rate_limit, g.rate_limit);
    }

    let force_mag = norm3(f_e).min(p.max_thrust);
    let per_motor = force_mag / 4.0;
    let thrust = (per_motor / p.thrust_coeff).sqrt().clamp(0.0, 1.0);
    Action::new(rate_sp, thrust)
}

/// Cascaded position hold: position error to velocity setpoint, then the
/// velocity loop.
pub fn position_controller(
    s: &EnvState,
    target_pos_e: [f64; 3],
    target_yaw: f64,
    p: &PlantParams,
    g: &PosGains,
) -> Action {
    let err = sub3(target_pos_e, s.state.pos_e);
    let mut vel_sp = scale3(err, g.kp_pos);
    let speed = norm3(vel_sp);
    if speed > g.vel_limit {
        vel_sp = scale3(vel_sp, g.vel_limit / speed);
    }
    velocity_controller(s, vel_sp, target_yaw, p, g)
}

/// Number of physics substeps per control period.
pub const SUBSTEPS: usize = 10;

/// Advances the environment one control period: run the rate controller once,
/// then integrate motor lag and rigid-body dynamics at dt/10.
pub fn step_env(
    s: &EnvState,
    a: &Action,
    p: &PlantParams,
    gains: &ControllerGains,
    dt: f64,
    body: &RigidBody,
) -> Result<EnvState, SimError> {
    assert!(dt > 0.0, "control period must be positive");
    let (cmds, integral, prev_err) = rate_controller(s, a, &gains.rate, dt);
    let mut next = *s;
    next.rate_integral = integral;
    next.prev_rate_err = prev_err;

    let dt_sub = dt / SUBSTEPS as f64;
    let lag = 1.0 - (-dt_sub / p.motor_tau).exp();
    for _ in 0..SUBSTEPS {
        for i in 0..4 {
            next.motors[i] += (cmds[i] - next.motors[i]) * lag;
        }
        let w = plant_wrench(&next, p);
        next.state = rk4_step_state(&next.state, &w, dt_sub, body).map_err(|e| match e {
            DynError::Singularity { .. } => SimError::PitchGuard { t: next.t },
            other => SimError::Dynamics(other),
        })?;
        if next.state.att[1].abs() >= crate::types::PITCH_GUARD {
            return Err(SimError::PitchGuard { t: next.t });
        }
    }
    next.t += dt;
    Ok(next)
}

/// A plant plus its frozen controller gains and control period.
#[derive(Debug, Clone)]
pub struct Simulator {
    pub plant: PlantParams,
    pub gains: ControllerGains,
    pub dt: f64,
    body: RigidBody,
}

impl Simulator {
    pub fn new(plant: PlantParams, gains: ControllerGains, dt: f64) -> Result<Self, SimError> {
        plant.validate().map_err(DynError::BadParams)?;
        let body = RigidBody::new(plant.body.clone())?;
        Ok(Self {
            plant,
            gains,
            dt,
            body,
        })
    }

    pub fn body(&self) -> &RigidBody {
        &self.body
    }

    pub fn step(&self, s: &EnvState, a: &Action) -> Result<EnvState, SimError> {
        step_env(s, a, &self.plant, &self.gains, self.dt, &self.body)
    }
}

impl Default for Simulator {
    fn default() -> Self {
        Self::new(
            PlantParams::default(),
            ControllerGains::default(),
            crate::types::DEFAULT_DT,
        )
        .expect("default simulator")
    }
}

/// Outcome of recording a closed-loop maneuver.
pub struct Recording {
    pub episode: Episode,
    /// Environment state at each recorded state index (length = states).
    pub trace: Vec<EnvState>,
}

/// Records an episode by applying `policy` at every control step. Truncates
/// (with the flag set) if the plant trips the pitch guard.
pub fn record_episode<F>(
    sim: &Simulator,
    start: EnvState,
    steps: usize,
    tag: EpisodeTag,
    mut policy: F,
) -> Recording
where
    F: FnMut(&EnvState, usize) -> Action,
{
    let mut states = Vec::with_capacity(steps + 1);
    let mut actions = Vec::with_capacity(steps);
    let mut trace = Vec::with_capacity(steps + 1);
    let mut env = start;
    states.push(env.state);
    trace.push(env);
    let mut truncated = false;
    for k in 0..steps {
        let a = policy(&env, k);
        match sim.step(&env, &a) {
            Ok(next) => {
                actions.push(a);
                states.push(next.state);
                env = next;
                trace.push(env);
            }
            Err(SimError::PitchGuard { .. }) => {
                truncated = true;
                break;
            }
            Err(e) => panic!("plant integration failed: {e}"),
        }
    }
    Recording {
        episode: Episode {
            dt: sim.dt,
            tag,
            states,
            actions,
            truncated,
        },
        trace,
    }
}

/// Flies the out-of-distribution test maneuver: hold hover for one second,
/// then ramp to a forward cruise and hold it. Records at the control rate.
pub fn fly_hover_to_forward(sim: &Simulator, cruise: f64, duration: f64) -> Recording {
    let steps = (duration / sim.dt).round() as usize;
    let ramp_time = 1.5;
    let hold = 1.0;
    let plant = sim.plant.clone();
    let gains = sim.gains.pos.clone();
    let mut rec = record_episode(
        sim,
        EnvState::hover(&sim.plant),
        steps,
        EpisodeTag::HoverToForward,
        move |env, _| {
            let t = env.t;
            let forward = if t < hold {
                0.0
            } else {
                cruise * ((t - hold) / ramp_time).min(1.0)
            };
            // Altitude hold through the vertical velocity channel.
            let vz_sp = (-env.state.pos_e[2]) * 1.2;
            velocity_controller(env, [forward, 0.0, vz_sp], 0.0, &plant, &gains)
        },
    );
    rec.episode.tag = EpisodeTag::HoverToForward;
    rec
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hover_motors_balance_gravity_exactly() {
        let p = PlantParams::default();
        let s = EnvState::hover(&p);
        let w = plant_wrench(&s, &p);
        for v in w.force_b.iter().chain(w.moment_b.iter()) {
            assert!(v.abs() < 1e-12, "wrench {w:?}");
        }
    }

    #[test]
    fn dead_motors_leave_pure_gravity() {
        let p = PlantParams::default();
        let s = EnvState::at_rest();
        let w = plant_wrench(&s, &p);
        assert_eq!(w.force_b, [0.0, 0.0, p.body.mass * p.body.gravity]);
        assert_eq!(w.moment_b, [0.0; 3]);
    }

    /// Oracle: evaluate the mixer algebra directly for a diagonal split.
    #[test]
    fn diagonal_motor_split_produces_pure_yaw() {
        let p = PlantParams::default();
        let mut s = EnvState::hover(&p);
        let h = p.hover_command();
        // Push the two spin-positive motors (0: FR, 1: BL) up, the others down.
        let delta = 0.05;
        s.motors = [h + delta, h + delta, h - delta, h - delta];
        let w = plant_wrench(&s, &p);
        // Thrust changes cancel pairwise on roll and pitch.
        assert!(w.moment_b[0].abs() < 1e-12);
        assert!(w.moment_b[1].abs() < 1e-12);
        // Yaw torque: spin-positive motors gained thrust.
        let t_up = p.thrust_coeff * (h + delta) * (h + delta);
        let t_dn = p.thrust_coeff * (h - delta) * (h - delta);
        let want = p.torque_coeff * (2.0 * t_up - 2.0 * t_dn);
        assert!((w.moment_b[2] - want).abs() < 1e-12);
        // Net vertical force only changes at second order but not sign.
        assert!(w.force_b[0].abs() < 1e-12 && w.force_b[1].abs() < 1e-12);
    }

    #[test]
    fn rate_controller_idles_at_tracked_setpoint() {
        let p = PlantParams::default();
        let s = EnvState::hover(&p);
        let a = Action::new([0.0; 3], p.hover_command());
        let (motors, _, _) = rate_controller(&s, &a, &RateGains::default(), 0.05);
        for m in motors {
            assert!((m - p.hover_command()).abs() < 1e-12);
        }
    }

    /// Oracle: trace the sign of a positive roll-rate error through the mixer.
    #[test]
    fn roll_error_splits_left_right_motors() {
        let p = PlantParams::default();
        let mut s = EnvState::hover(&p);
        s.state.rate_b = [-1.0, 0.0, 0.0]; // setpoint 0, so error is +1
        let a = Action::new([0.0; 3], p.hover_command());
        let (motors, _, _) = rate_controller(&s, &a, &RateGains::default(), 0.05);
        // Positive roll demand: left motors (indices 1, 2 have y < 0) rise.
        assert!(motors[1] > motors[0]);
        assert!(motors[2] > motors[3]);
        let w = plant_wrench(
            &EnvState {
                motors,
                ..EnvState::hover(&p)
            },
            &p,
        );
        assert!(w.moment_b[0] > 0.0, "roll moment {}", w.moment_b[0]);
    }

    #[test]
    fn zero_thrust_shuts_motors_despite_rate_error() {
        let _p = PlantParams::default();
        let mut s = EnvState::at_rest();
        s.state.rate_b = [3.0, -2.0, 1.0];
        let a = Action::new([0.0; 3], 0.0);
        let (motors, _, _) = rate_controller(&s, &a, &RateGains::default(), 0.05);
        assert_eq!(motors, [0.0; 4]);
    }

    #[test]
    fn position_controller_is_quiet_at_the_target() {
        let p = PlantParams::default();
        let s = EnvState::hover(&p);
        let a = position_controller(&s, [0.0; 3], 0.0, &p, &PosGains::default());
        for r in a.rate_sp {
            assert!(r.abs() < 1e-9);
        }
        assert!((a.thrust - p.hover_command()).abs() < 1e-9);
    }

    /// Oracle: sign-trace through the cascade for a target one meter north.
    #[test]
    fn north_target_commands_nose_down_pitch() {
        let p = PlantParams::default();
        let s = EnvState::hover(&p);
        let a = position_controller(&s, [1.0, 0.0, 0.0], 0.0, &p, &PosGains::default());
        // Forward acceleration needs a negative pitch angle, so the pitch
        // rate command from level must be negative.
        assert!(a.rate_sp[1] < -1e-3, "pitch rate {}", a.rate_sp[1]);
        assert!(a.rate_sp[0].abs() < 1e-9);
    }

    #[test]
    fn target_below_lowers_thrust() {
        let p = PlantParams::default();
        let s = EnvState::hover(&p);
        let a = position_controller(&s, [0.0, 0.0, 1.0], 0.0, &p, &PosGains::default());
        assert!(a.thrust < p.hover_command());
    }

    #[test]
    fn hover_step_is_an_equilibrium() {
        let sim = Simulator::default();
        let s = EnvState::hover(&sim.plant);
        let a = Action::new([0.0; 3], sim.plant.hover_command());
        let next = sim.step(&s, &a).unwrap();
        let before = s.state.to_flat();
        let after = next.state.to_flat();
        for i in 0..12 {
            assert!(
                (after[i] - before[i]).abs() < 1e-6,
                "component {i} drifted to {}",
                after[i]
            );
        }
    }

    /// Oracle: closed form for fall with linear drag,
    /// v(t) = (m g / c)(1 - exp(-c t / m)).
    #[test]
    fn powerless_fall_matches_linear_drag_solution() {
        let sim = Simulator::default();
        let mut env = EnvState::at_rest();
        let a = Action::new([0.0; 3], 0.0);
        for _ in 0..20 {
            env = sim.step(&env, &a).unwrap();
        }
        let (m, g, c) = (1.0, 9.81, sim.plant.lin_drag[2]);
        let want = m * g / c * (1.0 - (-c / m).exp());
        let got = env.state.vel_b[2];
        let rel = (got - want).abs() / want;
        assert!(rel < 0.02, "v = {got}, analytic {want}, rel {rel}");
    }

    #[test]
    fn stepping_is_deterministic() {
        let sim = Simulator::default();
        let mut a_env = EnvState::hover(&sim.plant);
        let mut b_env = a_env;
        let a = Action::new([0.4, -0.2, 0.1], 0.72);
        for _ in 0..40 {
            a_env = sim.step(&a_env, &a).unwrap();
            b_env = sim.step(&b_env, &a).unwrap();
        }
        let fa = a_env.state.to_flat();
        let fb = b_env.state.to_flat();
        for i in 0..12 {
            assert_eq!(fa[i].to_bits(), fb[i].to_bits());
        }
    }

    #[test]
    fn open_loop_hover_holds_position_for_ten_seconds() {
        let sim = Simulator::default();
        let mut env = EnvState::hover(&sim.plant);
        let a = Action::new([0.0; 3], sim.plant.hover_command());
        for _ in 0..200 {
            env = sim.step(&env, &a).unwrap();
        }
        assert!(
            norm3(env.state.pos_e) < 0.05,
            "drift {:?}",
            env.state.pos_e
        );
    }

    #[test]
    fn roll_rate_step_tracks_within_half_second() {
        let sim = Simulator::default();
        let mut env = EnvState::hover(&sim.plant);
        let a = Action::new([1.0, 0.0, 0.0], sim.plant.hover_command());
        let mut settled = f64::INFINITY;
        for k in 0..20 {
            env = sim.step(&env, &a).unwrap();
            let err = (1.0 - env.state.rate_b[0]).abs();
            if k as f64 * sim.dt >= 0.5 {
                settled = settled.min(err);
                assert!(err < 0.05, "error {err} at t={:.2}", env.t);
            }
        }
        assert!(settled < 0.05);
    }

    #[test]
    fn plant_states_stay_finite_until_truncation() {
        let sim = Simulator::default();
        let mut env = EnvState::hover(&sim.plant);
        // Aggressive pitch command until the guard trips.
        let a = Action::new([0.0, 2.5, 0.0], sim.plant.hover_command());
        for _ in 0..400 {
            match sim.step(&env, &a) {
                Ok(next) => {
                    env = next;
                    assert!(env.state.validate().is_ok());
                }
                Err(SimError::PitchGuard { .. }) => return,
                Err(e) => panic!("unexpected {e}"),
            }
        }
        panic!("pitch guard never tripped");
    }

    #[test]
    fn unpowered_drag_free_fall_conserves_energy() {
        let mut plant = PlantParams::default();
        plant.lin_drag = [0.0; 3];
        plant.ang_drag = [0.0; 3];
        let sim = Simulator::new(plant, ControllerGains::default(), 0.05).unwrap();
        let mut env = EnvState::at_rest();
        let a = Action::new([0.0; 3], 0.0);
        // NED: altitude is -p_D, so potential energy is -g * p_D per unit mass.
        let energy = |s: &State12| 0.5 * norm3(s.vel_b).powi(2) - 9.81 * s.pos_e[2];
        let e0 = energy(&env.state);
        for _ in 0..20 {
            env = sim.step(&env, &a).unwrap();
        }
        let e1 = energy(&env.state);
        // Both start at zero; compare against the kinetic scale instead of e0.
        let scale = 0.5 * norm3(env.state.vel_b).powi(2);
        assert!(
            (e1 - e0).abs() / scale < 1e-3,
            "energy drifted from {e0} to {e1}"
        );
    }

    #[test]
    fn hover_to_forward_zero_cruise_stays_put() {
        let sim = Simulator::default();
        let rec = fly_hover_to_forward(&sim, 0.0, 6.4);
        for s in &rec.episode.states {
            assert!(norm3(s.pos_e) < 0.1, "wandered to {:?}", s.pos_e);
        }
    }

    #[test]
    fn hover_to_forward_reaches_cruise() {
        let sim = Simulator::default();
        let rec = fly_hover_to_forward(&sim, 3.0, 6.4);
        assert_eq!(rec.episode.len(), 128);
        assert!(!rec.episode.truncated);
        // Mean forward body velocity over the final second.
        let tail: Vec<f64> = rec.episode.states[109..]
            .iter()
            .map(|s| s.vel_b[0])
            .collect();
        let mean = tail.iter().sum::<f64>() / tail.len() as f64;
        assert!(
            (mean - 3.0).abs() / 3.0 < 0.2,
            "final-second forward speed {mean}"
        );
    }

    #[test]
    fn hover_to_forward_is_reproducible() {
        let sim = Simulator::default();
        let a = fly_hover_to_forward(&sim, 3.0, 6.4);
        let b = fly_hover_to_forward(&sim, 3.0, 6.4);
        assert_eq!(a.episode, b.episode);
    }

    #[test]
    fn recording_satisfies_episode_invariant() {
        let sim = Simulator::default();
        let rec = fly_hover_to_forward(&sim, 2.0, 3.0);
        rec.episode.validate().unwrap();
        assert_eq!(rec.trace.len(), rec.episode.states.len());
    }
}
