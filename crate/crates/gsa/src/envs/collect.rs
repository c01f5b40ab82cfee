//! Scripted data collectors: waypoint explorers and noisy goal experts.
//!
//! Both run proportional controllers appropriate to each embodiment. The
//! expert steers to the goal (detouring through the corridor gap when a
//! wall separates it from the goal); the explorer steers to random
//! waypoints resampled every 20 steps. Expert actions get Gaussian noise of
//! scale sigma before clipping. Collected records are reward-free.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand::SeedableRng;

use crate::datastore::{RecordMeta, TrajectoryRecord};

use super::{Embodiment, Task, ToyEnv, GAP_HALF_WIDTH, UNIFIED_ACTION_DIM};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CollectMode {
    Explore,
    NoisyExpert,
}

impl CollectMode {
    pub fn tag(self) -> &'static str {
        match self {
            CollectMode::Explore => "explore",
            CollectMode::NoisyExpert => "noisy_expert",
        }
    }
}

/// Zero-pads a native action to the unified width.
pub fn pad_action(action: &[f64], unified_dim: usize) -> Vec<f32> {
    assert!(
        action.len() <= unified_dim,
        "native action dim {} exceeds unified dim {}",
        action.len(),
        unified_dim
    );
    let mut out = vec![0.0f32; unified_dim];
    for (o, &a) in out.iter_mut().zip(action) {
        *o = a as f32;
    }
    out
}

fn wrap_angle(a: f64) -> f64 {
    let mut a = a;
    while a > std::f64::consts::PI {
        a -= 2.0 * std::f64::consts::PI;
    }
    while a < -std::f64::consts::PI {
        a += 2.0 * std::f64::consts::PI;
    }
    a
}

/// Steering target: the goal itself, or a gap waypoint while the wall is in
/// the way.
fn steering_target(env: &ToyEnv, destination: [f64; 2]) -> [f64; 2] {
    if !env.task.has_wall() {
        return destination;
    }
    let pos = env.position();
    let same_side = (pos[0] < 0.0) == (destination[0] < 0.0);
    if same_side {
        return destination;
    }
    let margin = GAP_HALF_WIDTH * 0.6;
    if pos[1].abs() < margin && pos[0].abs() < 0.25 {
        // Lined up with the gap: aim just past the wall.
        let side = if pos[0] < 0.0 { 1.0 } else { -1.0 };
        [side * 0.3, 0.0]
    } else {
        // Approach the gap mouth on the current side.
        let side = if pos[0] < 0.0 { -1.0 } else { 1.0 };
        [side * 0.12, 0.0]
    }
}

/// Proportional controller toward `target`, native action per embodiment.
pub fn control_toward(env: &ToyEnv, target: [f64; 2]) -> Vec<f64> {
    let pos = env.position();
    let dx = target[0] - pos[0];
    let dy = target[1] - pos[1];
    match env.embodiment {
        Embodiment::VelocityPoint => {
            vec![(8.0 * dx).clamp(-1.0, 1.0), (8.0 * dy).clamp(-1.0, 1.0)]
        }
        Embodiment::ForcePoint => {
            // PD control: push toward the target, damp velocity.
            let obs = env.observe_velocity();
            vec![
                (10.0 * dx - 6.0 * obs[0]).clamp(-1.0, 1.0),
                (10.0 * dy - 6.0 * obs[1]).clamp(-1.0, 1.0),
            ]
        }
        Embodiment::Car => {
            let (heading, speed) = env.observe_heading_speed();
            let dist = (dx * dx + dy * dy).sqrt();
            let bearing = dy.atan2(dx);
            let err = wrap_angle(bearing - heading);
            let steer = (3.0 * err).clamp(-1.0, 1.0);
            // Throttle forward when roughly aligned, brake near the target.
            let aligned = err.abs() < std::f64::consts::FRAC_PI_2;
            let throttle = if aligned {
                (4.0 * dist * err.cos() - 1.5 * speed).clamp(-1.0, 1.0)
            } else {
                (-0.5 * speed).clamp(-1.0, 1.0)
            };
            let brake = if dist < 0.08 { 1.0 } else { -1.0 };
            vec![throttle, steer, brake]
        }
    }
}

/// Rolls out `n_traj` reward-free episodes. Explore mode ignores `sigma`;
/// expert mode perturbs controller actions with N(0, sigma^2) per entry.
pub fn scripted_collect(
    env: &mut ToyEnv,
    mode: CollectMode,
    sigma: f64,
    n_traj: usize,
    seed: u64,
) -> Vec<TrajectoryRecord> {
    assert!(sigma >= 0.0);
    let obs_len = env.obs_mode.obs_len();
    let mut out = Vec::with_capacity(n_traj);
    for i in 0..n_traj {
        let ep_seed = seed
            .wrapping_mul(0x9E3779B97F4A7C15)
            .wrapping_add(i as u64);
        let mut rng = ChaCha12Rng::seed_from_u64(ep_seed);
        let mut obs = env.reset(ep_seed);
        let mut observations = Vec::with_capacity((env.episode_len + 1) * obs_len);
        let mut actions = Vec::with_capacity(env.episode_len * UNIFIED_ACTION_DIM);
        observations.extend_from_slice(&obs);

        let mut waypoint = [0.0f64; 2];
        for t in 0..env.episode_len {
            let destination = match mode {
                CollectMode::NoisyExpert => env.goal(),
                CollectMode::Explore => {
                    if t % 20 == 0 {
                        waypoint = [rng.gen_range(-0.9..0.9), rng.gen_range(-0.9..0.9)];
                    }
                    waypoint
                }
            };
            let target = steering_target(env, destination);
            let mut action = control_toward(env, target);
            if mode == CollectMode::NoisyExpert && sigma > 0.0 {
                for a in action.iter_mut() {
                    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
                    let u2: f64 = rng.gen();
                    let n = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
                    *a = (*a + sigma * n).clamp(-1.0, 1.0);
                }
            }
            actions.extend(pad_action(&action, UNIFIED_ACTION_DIM));
            let (next_obs, _reward, done) = env.step(&action);
            obs = next_obs;
            observations.extend_from_slice(&obs);
            if done {
                break;
            }
        }

        out.push(TrajectoryRecord {
            trajectory_id: i as u64,
            embodiment_id: env.embodiment.index(),
            obs_len,
            action_dim: UNIFIED_ACTION_DIM,
            observations,
            actions,
            rewards: None,
            meta: RecordMeta {
                source: format!(
                    "{}:{}",
                    mode.tag(),
                    super::env_id(env.embodiment, env.task)
                ),
                sigma: sigma as f32,
            },
        });
    }
    out
}

/// Success rate of the scripted expert at a given noise level; used for
/// calibration checks and tests.
pub fn expert_success_rate(
    embodiment: Embodiment,
    task: Task,
    sigma: f64,
    n_traj: usize,
    seed: u64,
) -> f64 {
    let mut env = ToyEnv::new(embodiment, task, super::ObsMode::Vector);
    let mut successes = 0usize;
    for i in 0..n_traj {
        let ep_seed = seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(i as u64);
        let mut rng = ChaCha12Rng::seed_from_u64(ep_seed);
        env.reset(ep_seed);
        let mut reached = false;
        for _ in 0..env.episode_len {
            let target = steering_target(&env, env.goal());
            let mut action = control_toward(&env, target);
            if sigma > 0.0 {
                for a in action.iter_mut() {
                    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
                    let u2: f64 = rng.gen();
                    let n = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
                    *a = (*a + sigma * n).clamp(-1.0, 1.0);
                }
            }
            let (_, _, done) = env.step(&action);
            if env.in_goal() {
                reached = true;
            }
            if done {
                break;
            }
        }
        if reached {
            successes += 1;
        }
    }
    successes as f64 / n_traj as f64
}
