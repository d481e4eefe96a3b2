//! Flat-earth 6DOF rigid-body equations of motion and the classical RK4
//! integrator.
//!
//! Everything here is generic over [`Real`], so the exact same expressions run
//! on plain `f64` inside the simulator and on tape variables when the training
//! loop needs gradients through the integrator. The wrench is held constant
//! across the four RK4 stages (zero-order hold), and attitude is wrapped after
//! the full step, never inside stages, to keep the step differentiable.

use crate::autodiff::Real;
use crate::math::{inv3, Mat3};
use crate::types::{RigidBodyParams, State12, TypeError, Wrench, PITCH_GUARD};

#[derive(Debug, thiserror::Error)]
pub enum DynError {
    #[error("pitch {pitch:.4} rad reached the Euler singularity guard")]
    Singularity { pitch: f64 },
    #[error("pitch guard tripped at rollout step {step}")]
    SingularityAtStep { step: usize },
    #[error(transparent)]
    BadParams(#[from] TypeError),
}

/// Rigid-body parameters with the inertia inverse computed once and cached.
#[derive(Debug, Clone)]
pub struct RigidBody {
    pub params: RigidBodyParams,
    inv_inertia: Mat3,
}

impl RigidBody {
    pub fn new(params: RigidBodyParams) -> Result<Self, DynError> {
        // Re-validate so a hand-built params struct cannot smuggle in a
        // non-invertible inertia.
        let checked = RigidBodyParams::new(params.mass, params.inertia, params.gravity)?;
        let inv_inertia = inv3(&checked.inertia).ok_or(TypeError::BadInertia)?;
        Ok(Self {
            params: checked,
            inv_inertia,
        })
    }

    pub fn inv_inertia(&self) -> &Mat3 {
        &self.inv_inertia
    }
}

impl Default for RigidBody {
    fn default() -> Self {
        Self::new(RigidBodyParams::default()).expect("default params invert")
    }
}

fn cross<S: Real>(a: &[S; 3], b: &[S; 3]) -> [S; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn matvec_const<S: Real>(m: &Mat3, v: &[S; 3]) -> [S; 3] {
    let mut out = [v[0]; 3];
    for (i, row) in m.iter().enumerate() {
        out[i] = v[0].scale(row[0]) + v[1].scale(row[1]) + v[2].scale(row[2]);
    }
    out
}

fn guard_pitch<S: Real>(att: &[S; 3]) -> Result<(), DynError> {
    let pitch = att[1].value();
    if pitch.abs() >= PITCH_GUARD {
        return Err(DynError::Singularity { pitch });
    }
    Ok(())
}

/// Z-Y-X Euler direction-cosine matrix mapping body FRD vectors into earth
/// NED: `R = Rz(yaw) * Ry(pitch) * Rx(roll)`.
pub fn dcm_body_to_earth<S: Real>(att: &[S; 3]) -> Result<[[S; 3]; 3], DynError> {
    guard_pitch(att)?;
    let (sp, cp) = (att[0].sin(), att[0].cos());
    let (st, ct) = (att[1].sin(), att[1].cos());
    let (ss, cs) = (att[2].sin(), att[2].cos());
    Ok([
        [ct * cs, sp * st * cs - cp * ss, cp * st * cs + sp * ss],
        [ct * ss, sp * st * ss + cp * cs, cp * st * ss - sp * cs],
        [-st, sp * ct, cp * ct],
    ])
}

/// Time derivative of the 12-dim state under a net body wrench.
///
/// `force` is the net body-frame force including gravity. Implements
/// pdot_e = R(att) vel_b; vdot_b = force/m - rate x vel_b;
/// attdot = E(att) rate_b; ratedot = I^-1 (moment - rate x (I rate)).
pub fn state_derivative<S: Real>(
    x: &[S; 12],
    force: &[S; 3],
    moment: &[S; 3],
    body: &RigidBody,
) -> Result<[S; 12], DynError> {
    let vel = [x[3], x[4], x[5]];
    let att = [x[6], x[7], x[8]];
    let rate = [x[9], x[10], x[11]];

    let r = dcm_body_to_earth(&att)?;
    let pos_dot = [
        r[0][0] * vel[0] + r[0][1] * vel[1] + r[0][2] * vel[2],
        r[1][0] * vel[0] + r[1][1] * vel[1] + r[1][2] * vel[2],
        r[2][0] * vel[0] + r[2][1] * vel[1] + r[2][2] * vel[2],
    ];

    let inv_m = 1.0 / body.params.mass;
    let coriolis = cross(&rate, &vel);
    let vel_dot = [
        force[0].scale(inv_m) - coriolis[0],
        force[1].scale(inv_m) - coriolis[1],
        force[2].scale(inv_m) - coriolis[2],
    ];

    // Euler-rate matrix E(att):
    // [1, sin(roll) tan(pitch), cos(roll) tan(pitch)]
    // [0, cos(roll),            -sin(roll)          ]
    // [0, sin(roll)/cos(pitch), cos(roll)/cos(pitch)]
    let (sp, cp) = (att[0].sin(), att[0].cos());
    let tt = att[1].tan();
    let ct = att[1].cos();
    let att_dot = [
        rate[0] + sp * tt * rate[1] + cp * tt * rate[2],
        cp * rate[1] - sp * rate[2],
        (sp * rate[1] + cp * rate[2]) / ct,
    ];

    let ang_mom = matvec_const(&body.params.inertia, &rate);
    let gyro = cross(&rate, &ang_mom);
    let torque = [moment[0] - gyro[0], moment[1] - gyro[1], moment[2] - gyro[2]];
    let rate_dot = matvec_const(body.inv_inertia(), &torque);

    Ok([
        pos_dot[0], pos_dot[1], pos_dot[2], vel_dot[0], vel_dot[1], vel_dot[2],
        att_dot[0], att_dot[1], att_dot[2], rate_dot[0], rate_dot[1], rate_dot[2],
    ])
}

fn add_scaled<S: Real>(x: &[S; 12], k: &[S; 12], c: f64) -> [S; 12] {
    let mut out = *x;
    for i in 0..12 {
        out[i] = x[i] + k[i].scale(c);
    }
    out
}

/// One classical RK4 step with the wrench held constant across stages.
/// Attitude components are wrapped after the full update.
pub fn rk4_step<S: Real>(
    x: &[S; 12],
    force: &[S; 3],
    moment: &[S; 3],
    dt: f64,
    body: &RigidBody,
) -> Result<[S; 12], DynError> {
    let k1 = state_derivative(x, force, moment, body)?;
    let k2 = state_derivative(&add_scaled(x, &k1, dt / 2.0), force, moment, body)?;
    let k3 = state_derivative(&add_scaled(x, &k2, dt / 2.0), force, moment, body)?;
    let k4 = state_derivative(&add_scaled(x, &k3, dt), force, moment, body)?;
    let mut out = *x;
    for i in 0..12 {
        let combo = k1[i] + k2[i].scale(2.0) + k3[i].scale(2.0) + k4[i];
        out[i] = x[i] + combo.scale(dt / 6.0);
    }
    for i in 6..9 {
        out[i] = out[i].wrap_angle();
    }
    Ok(out)
}

/// Plain-number step on the domain types.
pub fn rk4_step_state(
    x: &State12,
    w: &Wrench,
    dt: f64,
    body: &RigidBody,
) -> Result<State12, DynError> {
    let flat = rk4_step(&x.to_flat(), &w.force_b, &w.moment_b, dt, body)?;
    Ok(State12::from_flat(&flat))
}

/// Repeated [`rk4_step_state`]; `result[k]` is the state after applying
/// `wrenches[k]`, starting from `x0`. Errors carry the failing step index.
pub fn integrate_rollout(
    x0: &State12,
    wrenches: &[Wrench],
    dt: f64,
    body: &RigidBody,
) -> Result<Vec<State12>, DynError> {
    assert!(!wrenches.is_empty(), "rollout needs at least one wrench");
    let mut out = Vec::with_capacity(wrenches.len());
    let mut current = *x0;
    for (step, w) in wrenches.iter().enumerate() {
        current = rk4_step_state(&current, w, dt, body).map_err(|e| match e {
            DynError::Singularity { .. } => DynError::SingularityAtStep { step },
            other => other,
        })?;
        out.push(current);
    }
    Ok(out)
}
