//! Data-collection protocol: chirp excitation on the rate setpoints around a
//! randomized velocity trim, followed by a position-controller reset, repeated
//! until the replay buffer holds the configured amount of flight.
//!
//! Chirp and reset portions are stored as separate tagged episodes. Reset
//! episodes always run for the full configured reset duration (flight back to
//! the origin, then hover hold), which keeps them long enough to cut 128-step
//! validation windows from.

use crate::replay::{ReplayBuffer, ReplayError};
use crate::rng::substream;
use crate::sim::{record_episode, velocity_controller, EnvState, Recording, Simulator};
use crate::types::{Action, EpisodeTag};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

#[derive(Debug, thiserror::Error)]
pub enum ExcitationError {
    #[error("chirp time {t} outside [0, {duration}]")]
    TimeOutOfRange { t: f64, duration: f64 },
    #[error("buffer-load duration must be positive, got {0}")]
    BadDuration(f64),
    #[error(transparent)]
    Replay(#[from] ReplayError),
}

/// Chirp excitation and buffer-loading knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChirpConfig {
    /// Sweep start frequency, Hz.
    pub f0: f64,
    /// Sweep end frequency, Hz.
    pub f1: f64,
    /// Sweep length, s.
    pub sweep_duration: f64,
    /// Rate-setpoint amplitude per axis, rad/s.
    pub amplitude: [f64; 3],
    /// Half-widths of the body-velocity trim box, m/s.
    pub trim_bounds: [f64; 3],
    /// Reset recording length, s. The position controller flies back to the
    /// origin and holds hover for whatever remains of this window.
    pub reset_duration: f64,
    /// Total flight time to accumulate in the buffer, s.
    pub buffer_duration: f64,
    /// Store reset segments in the buffer too.
    pub store_resets: bool,
}

impl Default for ChirpConfig {
    fn default() -> Self {
        Self {
            f0: 0.5,
            f1: 4.0,
            sweep_duration: 2.5,
            amplitude: [0.8, 0.8, 0.4],
            trim_bounds: [2.0, 2.0, 0.5],
            reset_duration: 7.2,
            buffer_duration: 100.0,
            store_resets: true,
        }
    }
}

impl ChirpConfig {
    pub fn validate(&self) -> Result<(), ExcitationError> {
        if !(self.f0 > 0.0 && self.f1 >= self.f0) {
            return Err(ExcitationError::BadDuration(self.f0));
        }
        if !(self.sweep_duration > 0.0) {
            return Err(ExcitationError::BadDuration(self.sweep_duration));
        }
        if self.amplitude.iter().any(|a| *a < 0.0) {
            return Err(ExcitationError::BadDuration(-1.0));
        }
        Ok(())
    }
}

/// Phase of the linear-frequency sweep at time `t`:
/// `2 pi (f0 t + (f1 - f0) t^2 / (2 T))`.
fn sweep_phase(t: f64, f0: f64, f1: f64, duration: f64) -> f64 {
    2.0 * PI * (f0 * t + (f1 - f0) * t * t / (2.0 * duration))
}

/// Instantaneous sweep frequency at time `t`, Hz.
pub fn instantaneous_frequency(t: f64, cfg: &ChirpConfig) -> f64 {
    cfg.f0 + (cfg.f1 - cfg.f0) * t / cfg.sweep_duration
}

/// Zero-phase chirp value per axis at time `t` in `[0, T]`.
pub fn chirp_value(t: f64, cfg: &ChirpConfig) -> Result<[f64; 3], ExcitationError> {
    chirp_value_phased(t, cfg, &[0.0; 3])
}

/// Chirp value with a per-axis phase offset, used during collection so the
/// three axes are excited simultaneously but incoherently.
pub fn chirp_value_phased(
    t: f64,
    cfg: &ChirpConfig,
    phase: &[f64; 3],
) -> Result<[f64; 3], ExcitationError> {
    if !(0.0..=cfg.sweep_duration).contains(&t) {
        return Err(ExcitationError::TimeOutOfRange {
            t,
            duration: cfg.sweep_duration,
        });
    }
    let base = sweep_phase(t, cfg.f0, cfg.f1, cfg.sweep_duration);
    let mut out = [0.0; 3];
    for axis in 0..3 {
        out[axis] = cfg.amplitude[axis] * (base + phase[axis]).sin();
    }
    Ok(out)
}

/// Uniform sample from the trim box; the box is centered on zero.
pub fn sample_trim(rng: &mut ChaCha8Rng, cfg: &ChirpConfig) -> [f64; 3] {
    let mut out = [0.0; 3];
    for axis in 0..3 {
        let b = cfg.trim_bounds[axis];
        out[axis] = if b > 0.0 { rng.gen_range(-b..b) } else { 0.0 };
    }
    out
}

/// One excitation cycle: chirp around a sampled trim, then a full-length
/// reset. Returns both recordings and the environment state the next cycle
/// starts from.
pub fn collect_chirp_episode(
    sim: &Simulator,
    start: EnvState,
    cfg: &ChirpConfig,
    rng: &mut ChaCha8Rng,
) -> (Recording, Recording, EnvState) {
    let trim = sample_trim(rng, cfg);
    let mut phase = [0.0; 3];
    for p in &mut phase {
        *p = rng.gen_range(0.0..2.0 * PI);
    }

    // The trim is commanded through the velocity loop in the yaw frame at
    // episode start (equal to the body frame up to the tilt wobble).
    let yaw0 = start.state.att[2];
    let (sy, cy) = (yaw0.sin(), yaw0.cos());
    let vel_sp = [
        cy * trim[0] - sy * trim[1],
        sy * trim[0] + cy * trim[1],
        trim[2],
    ];

    let chirp_steps = (cfg.sweep_duration / sim.dt).round() as usize;
    let plant = sim.plant.clone();
    let pos_gains = sim.gains.pos.clone();
    let cfg_clone = cfg.clone();
    let t0 = start.t;
    let chirp_rec = record_episode(sim, start, chirp_steps, EpisodeTag::Chirp, |env, _| {
        let base = velocity_controller(env, vel_sp, yaw0, &plant, &pos_gains);
        let t = (env.t - t0).clamp(0.0, cfg_clone.sweep_duration);
        let chirp = chirp_value_phased(t, &cfg_clone, &phase).expect("t clamped into range");
        Action::new(
            [
                base.rate_sp[0] + chirp[0],
                base.rate_sp[1] + chirp[1],
                base.rate_sp[2] + chirp[2],
            ],
            base.thrust,
        )
    });

    let after_chirp = *chirp_rec.trace.last().expect("nonempty trace");
    let reset_steps = (cfg.reset_duration / sim.dt).round() as usize;
    let plant = sim.plant.clone();
    let pos_gains = sim.gains.pos.clone();
    let reset_rec = record_episode(
        sim,
        after_chirp,
        reset_steps,
        EpisodeTag::Reset,
        |env, _| crate::sim::position_controller(env, [0.0; 3], 0.0, &plant, &pos_gains),
    );
    let end = *reset_rec.trace.last().expect("nonempty trace");
    (chirp_rec, reset_rec, end)
}

/// Buffer plus the per-episode environment traces, kept in memory for
/// harness-level oracles that need the plant's full internal state.
pub struct CollectedData {
    pub buffer: ReplayBuffer,
    /// Environment trace per stored episode id.
    pub traces: std::collections::HashMap<u64, Vec<EnvState>>,
}

/// Repeats chirp-and-reset cycles from hover until `buffer_duration` of
/// flight time is stored. Deterministic for a given seed.
pub fn load_buffer(
    sim: &Simulator,
    cfg: &ChirpConfig,
    capacity_steps: usize,
    seed: u64,
) -> Result<CollectedData, ExcitationError> {
    if !(cfg.buffer_duration > 0.0) {
        return Err(ExcitationError::BadDuration(cfg.buffer_duration));
    }
    cfg.validate()?;
    let mut buffer = ReplayBuffer::new(capacity_steps);
    let mut traces = std::collections::HashMap::new();
    let mut env = EnvState::hover(&sim.plant);
    let mut cycle = 0u64;
    while buffer.total_duration() < cfg.buffer_duration {
        let mut rng = substream(seed, "excitation-cycle", cycle);
        let (chirp_rec, reset_rec, end) = collect_chirp_episode(sim, env, cfg, &mut rng);
        if chirp_rec.episode.truncated {
            // Shortened by the pitch guard; stored if long enough, then the
            // reset still brings the vehicle home.
            if chirp_rec.episode.len() >= 1 {
                let id = buffer.append(chirp_rec.episode.clone())?;
                traces.insert(id, chirp_rec.trace);
            }
        } else {
            let id = buffer.append(chirp_rec.episode.clone())?;
            traces.insert(id, chirp_rec.trace);
        }
        if cfg.store_resets && reset_rec.episode.len() >= 1 {
            let id = buffer.append(reset_rec.episode.clone())?;
            traces.insert(id, reset_rec.trace);
        }
        env = end;
        cycle += 1;
    }
    Ok(CollectedData { buffer, traces })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::norm3;

    #[test]
    fn chirp_starts_at_zero() {
        let cfg = ChirpConfig::default();
        assert_eq!(chirp_value(0.0, &cfg).unwrap(), [0.0; 3]);
        let cfg2 = ChirpConfig {
            f0: 3.0,
            f1: 3.0,
            amplitude: [0.1, 5.0, 2.0],
            ..ChirpConfig::default()
        };
        assert_eq!(chirp_value(0.0, &cfg2).unwrap(), [0.0; 3]);
    }

    #[test]
    fn constant_frequency_chirp_is_a_sine() {
        let cfg = ChirpConfig {
            f0: 1.0,
            f1: 1.0,
            amplitude: [1.0, 1.0, 1.0],
            ..ChirpConfig::default()
        };
        let v = chirp_value(0.25, &cfg).unwrap();
        for axis in 0..3 {
            assert!((v[axis] - 1.0).abs() < 1e-12, "axis {axis}: {}", v[axis]);
        }
    }

    /// Oracle: evaluate the closed form with scalar arithmetic.
    #[test]
    fn default_sweep_endpoint_matches_closed_form() {
        let cfg = ChirpConfig {
            f0: 0.5,
            f1: 4.0,
            sweep_duration: 2.5,
            amplitude: [0.8, 0.8, 0.8],
            ..ChirpConfig::default()
        };
        let t: f64 = 2.5;
        // phase = 2 pi (0.5 * 2.5 + 3.5 * 2.5^2 / 5) = 2 pi * 5.625
        let want = 0.8 * (2.0 * PI * 5.625).sin();
        let got = chirp_value(t, &cfg).unwrap();
        assert!((got[0] - want).abs() < 1e-12, "{} vs {want}", got[0]);
        // and the numeric value itself, computed independently:
        assert!((want - (-0.565685424949238)).abs() < 1e-12);
    }

    #[test]
    fn chirp_rejects_time_outside_sweep() {
        let cfg = ChirpConfig::default();
        assert!(chirp_value(-0.1, &cfg).is_err());
        assert!(chirp_value(2.6, &cfg).is_err());
    }

    /// Instantaneous frequency endpoints, estimated from zero-crossing
    /// spacing of a dense evaluation of a gentle sweep.
    #[test]
    fn zero_crossing_spacing_recovers_endpoint_frequencies() {
        let cfg = ChirpConfig {
            f0: 2.0,
            f1: 2.5,
            sweep_duration: 10.0,
            amplitude: [1.0, 1.0, 1.0],
            ..ChirpConfig::default()
        };
        let dt = 1e-4;
        let mut crossings = Vec::new();
        let mut prev = chirp_value(0.0, &cfg).unwrap()[0];
        let steps = (cfg.sweep_duration / dt) as usize;
        for k in 1..=steps {
            let t = k as f64 * dt;
            let v = chirp_value(t, &cfg).unwrap()[0];
            if prev <= 0.0 && v > 0.0 || prev >= 0.0 && v < 0.0 {
                crossings.push(t);
            }
            prev = v;
        }
        let first_half_period = crossings[1] - crossings[0];
        let last_half_period = crossings[crossings.len() - 1] - crossings[crossings.len() - 2];
        let f_start = 0.5 / first_half_period;
        let f_end = 0.5 / last_half_period;
        assert!((f_start - cfg.f0).abs() / cfg.f0 < 0.1, "start {f_start}");
        assert!((f_end - cfg.f1).abs() / cfg.f1 < 0.1, "end {f_end}");
        // The analytic instantaneous frequency hits the endpoints exactly.
        assert_eq!(instantaneous_frequency(0.0, &cfg), cfg.f0);
        assert_eq!(instantaneous_frequency(cfg.sweep_duration, &cfg), cfg.f1);
    }

    #[test]
    fn zero_size_trim_box_returns_center() {
        let cfg = ChirpConfig {
            trim_bounds: [0.0; 3],
            ..ChirpConfig::default()
        };
        let mut rng = substream(1, "t", 0);
        assert_eq!(sample_trim(&mut rng, &cfg), [0.0; 3]);
    }

    #[test]
    fn trim_sampling_is_seed_deterministic() {
        let cfg = ChirpConfig::default();
        let a = sample_trim(&mut substream(5, "trim", 2), &cfg);
        let b = sample_trim(&mut substream(5, "trim", 2), &cfg);
        assert_eq!(a, b);
    }

    #[test]
    fn trim_samples_center_on_zero() {
        let cfg = ChirpConfig::default();
        let mut rng = substream(9, "trim", 0);
        let mut mean = [0.0; 3];
        let n = 10_000;
        for _ in 0..n {
            let s = sample_trim(&mut rng, &cfg);
            for axis in 0..3 {
                mean[axis] += s[axis] / n as f64;
            }
        }
        for axis in 0..3 {
            assert!(mean[axis].abs() < 0.1, "axis {axis} mean {}", mean[axis]);
        }
    }

    #[test]
    fn quiet_chirp_stays_near_hover() {
        let sim = Simulator::default();
        let cfg = ChirpConfig {
            amplitude: [0.0; 3],
            trim_bounds: [0.0; 3],
            ..ChirpConfig::default()
        };
        let mut rng = substream(0, "quiet", 0);
        let (chirp_rec, _, _) =
            collect_chirp_episode(&sim, EnvState::hover(&sim.plant), &cfg, &mut rng);
        for s in &chirp_rec.episode.states {
            assert!(norm3(s.pos_e) < 0.1, "drifted to {:?}", s.pos_e);
            assert!(s.att[0].abs() < 0.1 && s.att[1].abs() < 0.1);
        }
    }

    #[test]
    fn default_chirp_episode_has_fifty_actions() {
        let sim = Simulator::default();
        let cfg = ChirpConfig::default();
        let mut rng = substream(0, "len", 0);
        let (chirp_rec, reset_rec, _) =
            collect_chirp_episode(&sim, EnvState::hover(&sim.plant), &cfg, &mut rng);
        assert_eq!(chirp_rec.episode.len(), 50);
        assert_eq!(reset_rec.episode.len(), 144);
        assert!(!chirp_rec.episode.truncated);
    }

    #[test]
    fn different_seeds_fly_different_episodes() {
        let sim = Simulator::default();
        let cfg = ChirpConfig::default();
        let (a, _, _) = collect_chirp_episode(
            &sim,
            EnvState::hover(&sim.plant),
            &cfg,
            &mut substream(1, "s", 0),
        );
        let (b, _, _) = collect_chirp_episode(
            &sim,
            EnvState::hover(&sim.plant),
            &cfg,
            &mut substream(2, "s", 0),
        );
        assert_ne!(a.episode, b.episode);
    }

    #[test]
    fn buffer_load_accumulates_the_requested_flight_time() {
        let sim = Simulator::default();
        let cfg = ChirpConfig::default();
        let data = load_buffer(&sim, &cfg, 100_000, 42).unwrap();
        let steps = data.buffer.len_steps();
        // 100 s at 20 Hz, rounded up to whole cycles.
        assert!(steps >= 2000, "only {steps} steps stored");
        assert!(steps <= 2000 + 194, "{steps} steps is more than one extra cycle");
        assert!(data.buffer.total_duration() >= cfg.buffer_duration);
        // Every stored episode keeps the length invariant and is tagged.
        for e in data.buffer.episodes() {
            e.episode.validate().unwrap();
            assert!(matches!(
                e.episode.tag,
                EpisodeTag::Chirp | EpisodeTag::Reset
            ));
            assert!(data.traces.contains_key(&e.id));
        }
    }

    #[test]
    fn zero_duration_load_is_rejected() {
        let sim = Simulator::default();
        let cfg = ChirpConfig {
            buffer_duration: 0.0,
            ..ChirpConfig::default()
        };
        assert!(matches!(
            load_buffer(&sim, &cfg, 1000, 0),
            Err(ExcitationError::BadDuration(_))
        ));
    }

    #[test]
    fn buffer_load_is_deterministic() {
        let sim = Simulator::default();
        let cfg = ChirpConfig {
            buffer_duration: 20.0,
            ..ChirpConfig::default()
        };
        let a = load_buffer(&sim, &cfg, 100_000, 7).unwrap();
        let b = load_buffer(&sim, &cfg, 100_000, 7).unwrap();
        assert_eq!(a.buffer.len_steps(), b.buffer.len_steps());
        for (x, y) in a.buffer.episodes().zip(b.buffer.episodes()) {
            assert_eq!(x.episode, y.episode);
        }
    }

    #[test]
    fn buffer_is_dominated_by_chirp_and_reset_steps() {
        let sim = Simulator::default();
        let cfg = ChirpConfig {
            buffer_duration: 30.0,
            ..ChirpConfig::default()
        };
        let data = load_buffer(&sim, &cfg, 100_000, 3).unwrap();
        let tagged: usize = data
            .buffer
            .episodes()
            .filter(|e| matches!(e.episode.tag, EpisodeTag::Chirp | EpisodeTag::Reset))
            .map(|e| e.episode.len())
            .sum();
        let frac = tagged as f64 / data.buffer.len_steps() as f64;
        assert!(frac >= 0.9, "chirp/reset fraction {frac}");
    }
}
