// Scratch calibration harness; not part of the deliverable surface.
use quadworld::excitation::{load_buffer, ChirpConfig};
use quadworld::replay::sampling_rng;
use quadworld::sim::{fly_hover_to_forward, Simulator};
use quadworld::training::{train_world_model, LossWeights, TrainConfig};
use quadworld::types::RigidBodyParams;
use quadworld::worldmodel::{AnyModel, NormStats, PhysicsModel, RnnModel, WorldModel as _};
use std::time::Instant;

fn main() {
    let updates: u64 = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(300);
    let kind = std::env::args().nth(2).unwrap_or_else(|| "physics".into());

    let tau: f64 = std::env::var("TAU").ok().and_then(|s| s.parse().ok()).unwrap_or(0.05);
    let ki: f64 = std::env::var("KI").ok().and_then(|s| s.parse().ok()).unwrap_or(0.2);
    let kp_mul: f64 = std::env::var("KPM").ok().and_then(|s| s.parse().ok()).unwrap_or(1.0);
    let mut plant = quadworld::sim::PlantParams::default();
    plant.motor_tau = tau;
    let mut gains = quadworld::sim::ControllerGains::default();
    gains.rate.ki = [ki, ki, ki * 0.5];
    for v in gains.rate.kp.iter_mut() { *v *= kp_mul; }
    if let Ok(vl) = std::env::var("VLIM") { gains.pos.vel_limit = vl.parse().unwrap(); }
    if let Ok(al) = std::env::var("ALIM") { gains.pos.accel_limit = al.parse().unwrap(); }
    if let Ok(h) = std::env::var("HOR") { std::env::set_var("HOR_PARSED", h); }
    let sim = Simulator::new(plant, gains, 0.05).unwrap();
    println!("tau={tau} ki={ki} kpm={kp_mul}");
    let cfg = ChirpConfig::default();
    let t0 = Instant::now();
    let data = load_buffer(&sim, &cfg, 100_000, 42).unwrap();
    println!(
        "collected {} steps in {} episodes, {:.1} s flight, wall {:.2} s",
        data.buffer.len_steps(),
        data.buffer.len_episodes(),
        data.buffer.total_duration(),
        t0.elapsed().as_secs_f64()
    );
    let norm = NormStats::from_buffer(&data.buffer, sim.body());
    println!("wrench_scale {:?}", norm.wrench_scale);
    println!("state_scale  {:?}", norm.state_scale);

    let mut rng = quadworld::rng::stream(42, "model-init");
    let model = match kind.as_str() {
        "physics" => AnyModel::Physics(
            PhysicsModel::new(&[128, 128], RigidBodyParams::default(), norm, &mut rng).unwrap(),
        ),
        _ => {
            let lstm: usize = std::env::var("LSTM").ok().and_then(|s| s.parse().ok()).unwrap_or(128);
            let init: usize = std::env::var("INIT").ok().and_then(|s| s.parse().ok()).unwrap_or(128);
            AnyModel::Rnn(RnnModel::new(8, &[init, init], lstm, norm, &mut rng))
        }
    };
    println!("{} params: {}", kind, model.param_count());

    let horizon: usize = std::env::var("HOR").ok().and_then(|s| s.parse().ok()).unwrap_or(16);
    let batch: usize = std::env::var("BATCH").ok().and_then(|s| s.parse().ok()).unwrap_or(32);
    let lr: f64 = std::env::var("LR").ok().and_then(|s| s.parse().ok()).unwrap_or(3e-4);
    let online: bool = std::env::var("ONLINE").map(|s| s == "1").unwrap_or(false);
    let tc = TrainConfig {
        horizon,
        batch,
        lr,
        total_updates: updates,
        validation_period: 100,
        weights: LossWeights::default(),
        seed: 42,
        online_collect: online,
        ..TrainConfig::default()
    };
    let mut buffer = data.buffer;
    let chirp_cfg = cfg.clone();
    let sim_ref = sim.clone();
    let mut online_env = quadworld::sim::EnvState::hover(&sim.plant);
    let mut cycle: u64 = 1_000_000;
    let mut fresh = move || {
        let mut rng = quadworld::rng::substream(42, "excitation-online", cycle);
        cycle += 1;
        let (c, r, end) = quadworld::excitation::collect_chirp_episode(&sim_ref, online_env, &chirp_cfg, &mut rng);
        online_env = end;
        vec![c.episode, r.episode]
    };
    let fresh_opt: Option<&mut dyn FnMut() -> Vec<quadworld::types::Episode>> =
        if online { Some(&mut fresh) } else { None };
    let t0 = Instant::now();
    let out = train_world_model(model, &mut buffer, &tc, sim.dt, fresh_opt).unwrap();
    let wall = t0.elapsed().as_secs_f64();
    println!(
        "{} updates in {:.1} s ({:.1} ms/update)",
        updates,
        wall,
        1e3 * wall / updates as f64
    );
    for v in &out.log.validations {
        println!(
            "val @{}: pos {:.3} vel {:.3} att {:.3} rate {:.3} | overall(std) {:.4}",
            v.update, v.group_rmse[0], v.group_rmse[1], v.group_rmse[2], v.group_rmse[3], v.overall
        );
    }
    let first = &out.log.entries[..20.min(out.log.entries.len())];
    let last = &out.log.entries[out.log.entries.len().saturating_sub(20)..];
    let mean = |es: &[quadworld::training::LogEntry]| {
        es.iter().map(|e| e.loss).sum::<f64>() / es.len() as f64
    };
    println!("loss first20 {:.5} last20 {:.5}", mean(first), mean(last));

    // OOD divergence picture with the best checkpoint.
    let rec = fly_hover_to_forward(&sim, 3.0, 6.4);
    let (report, series) =
        quadworld::evaluation::evaluate_ood(&out.best, &rec.episode, 128, None, sim.dt).unwrap();
    println!(
        "OOD overall: pos {:.3} vel {:.3} att {:.3} rate {:.3}",
        report.overall[0], report.overall[1], report.overall[2], report.overall[3]
    );
    for g in 0..4 {
        println!(
            "  group {} divergence ratio {:.2}",
            g,
            quadworld::evaluation::divergence_ratio(&series, g)
        );
    }
    // Markov floor: the same evaluation with the cheating baseline.
    let floor = MarkovFloor { sim: sim.clone() };
    let id_floor = quadworld::evaluation::evaluate_id(
        &floor,
        &buffer,
        128,
        20,
        8,
        quadworld::evaluation::Dataset::IdHeldout,
        Some(&out.holdout),
        &mut sampling_rng(42, 9),
        sim.dt,
    )
    .unwrap();
    println!(
        "MARKOV FLOOR ID held-out overall: pos {:.3} vel {:.3} att {:.3} rate {:.3}",
        id_floor.overall[0], id_floor.overall[1], id_floor.overall[2], id_floor.overall[3]
    );
    let (ood_floor, _) =
        quadworld::evaluation::evaluate_ood(&floor, &rec.episode, 128, None, sim.dt).unwrap();
    println!(
        "MARKOV FLOOR OOD overall: pos {:.3} vel {:.3} att {:.3} rate {:.3}",
        ood_floor.overall[0], ood_floor.overall[1], ood_floor.overall[2], ood_floor.overall[3]
    );

    // OOD difficulty versus cruise speed, aggressive transition profile.
    for cruise in [3.0f64, 4.0, 5.0, 6.0] {
        let mut agg = sim.clone();
        agg.gains.pos = quadworld::sim::PosGains {
            kp_pos: 1.2,
            vel_limit: cruise.max(2.5),
            kp_vel: 4.0,
            accel_limit: 9.0,
            kp_att: 8.0,
            rate_limit: 3.0,
            tilt_limit: 0.45,
        };
        let rec2 = fly_hover_to_forward(&agg, cruise, 6.4);
        let (r2, s2) =
            quadworld::evaluation::evaluate_ood(&out.best, &rec2.episode, 128, None, sim.dt)
                .unwrap();
        let vmax = rec2
            .episode
            .states
            .iter()
            .map(|s| s.vel_b[0])
            .fold(0.0f64, f64::max);
        println!(
            "cruise {cruise}: reached {vmax:.2} m/s; OOD pos {:.3} vel {:.3} att {:.3} rate {:.3}; div {:.0}/{:.0}/{:.0}/{:.0}",
            r2.overall[0], r2.overall[1], r2.overall[2], r2.overall[3],
            quadworld::evaluation::divergence_ratio(&s2, 0),
            quadworld::evaluation::divergence_ratio(&s2, 1),
            quadworld::evaluation::divergence_ratio(&s2, 2),
            quadworld::evaluation::divergence_ratio(&s2, 3),
        );
    }

    // Per-offset window difficulty across the held-out episodes.
    for hid in &out.holdout {
        let stored = buffer.get(*hid).unwrap();
        let n = stored.episode.len();
        if n < 128 { continue; }
        print!("episode {} ({:?}) per-offset pos RMSE:", hid, stored.episode.tag);
        for k in 0..=(n - 128) {
            let start = quadworld::worldmodel::RolloutStart {
                state: stored.episode.states[k],
                history: Vec::new(),
                provenance: Some((*hid, k)),
            };
            let pred = match out.best.rollout(&start, &stored.episode.actions[k..k + 128], sim.dt) {
                Ok(p) => p,
                Err(quadworld::worldmodel::ModelError::Truncated { partial, .. }) => partial,
                Err(e) => panic!("{e}"),
            };
            let mut sq = 0.0;
            for (j, p) in pred.iter().enumerate() {
                let d = quadworld::types::state_delta(p, &stored.episode.states[k + 1 + j]);
                sq += (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]) / 3.0;
            }
            print!(" {:.2}", (sq / pred.len() as f64).sqrt());
        }
        println!();
    }

    // Per-step error profile of the first held-out episode at offset 0.
    if let Some(hid) = out.holdout.first() {
        let stored = buffer.get(*hid).unwrap();
        if stored.episode.len() >= 128 {
            let start = quadworld::worldmodel::RolloutStart {
                state: stored.episode.states[0],
                history: Vec::new(),
                provenance: Some((*hid, 0)),
            };
            let pred = match out.best.rollout(&start, &stored.episode.actions[..128], sim.dt) {
                Ok(p) => p,
                Err(quadworld::worldmodel::ModelError::Truncated { partial, .. }) => partial,
                Err(e) => panic!("{e}"),
            };
            print!("per-step |pos err| ep {hid} k0:");
            for (j, p) in pred.iter().enumerate().step_by(8) {
                let d = quadworld::types::state_delta(p, &stored.episode.states[1 + j]);
                print!(" {:.2}", (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt());
            }
            println!();
        }
    }

    // Held-out ID at 128.
    let id = quadworld::evaluation::evaluate_id(
        &out.best,
        &buffer,
        128,
        20,
        8,
        quadworld::evaluation::Dataset::IdHeldout,
        Some(&out.holdout),
        &mut sampling_rng(42, 1),
        sim.dt,
    )
    .unwrap();
    println!(
        "ID held-out overall: pos {:.3} vel {:.3} att {:.3} rate {:.3}",
        id.overall[0], id.overall[1], id.overall[2], id.overall[3]
    );
}

/// Best-possible memoryless model: true plant physics evaluated from
/// (state, action) alone, motors assumed equal to the commanded mix
/// (no lag state), wrench held over the control period.
struct MarkovFloor {
    sim: Simulator,
}

impl quadworld::worldmodel::WorldModel for MarkovFloor {
    fn kind_name(&self) -> &'static str {
        "markov-floor"
    }
    fn rollout(
        &self,
        start: &quadworld::worldmodel::RolloutStart,
        actions: &[quadworld::types::Action],
        dt: f64,
    ) -> Result<Vec<quadworld::types::State12>, quadworld::worldmodel::ModelError> {
        let mut out = Vec::with_capacity(actions.len());
        let mut env = quadworld::sim::EnvState::at_rest();
        env.state = start.state;
        for (step, a) in actions.iter().enumerate() {
            let (cmds, integ, prev) =
                quadworld::sim::rate_controller(&env, a, &self.sim.gains.rate, dt);
            env.motors = cmds;
            env.rate_integral = integ;
            env.prev_rate_err = prev;
            let w = quadworld::sim::plant_wrench(&env, &self.sim.plant);
            match quadworld::dynamics::rk4_step_state(&env.state, &w, dt, self.sim.body()) {
                Ok(next) => {
                    env.state = next;
                    out.push(next);
                }
                Err(_) => {
                    return Err(quadworld::worldmodel::ModelError::Truncated {
                        step,
                        partial: out,
                    })
                }
            }
        }
        Ok(out)
    }
}
