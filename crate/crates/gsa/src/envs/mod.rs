//! Self-contained deterministic toy environments.
//!
//! Three embodiments share a [-1,1]^2 arena but differ in dynamics and
//! native action dimension:
//!
//! - e1: velocity point, 2-dim actions set the velocity directly
//! - e2: force point with drag, 2-dim actions accelerate
//! - e3: throttle/steer/brake car, 3-dim actions
//!
//! Tasks: dense-reach (reward exp(-4 d)), sparse-reach (reward 1 inside the
//! goal radius), corridor (sparse goal behind a wall with a narrow gap).
//! Observations are either a rendered grayscale image or a compact state
//! vector; both encode the embodiment so trajectories from different bodies
//! are distinguishable from their first frame.

pub mod collect;
pub mod tabular;

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand::SeedableRng;
use thiserror::Error;

/// Unified action width: every embodiment's native action is zero-padded
/// to this many entries.
pub const UNIFIED_ACTION_DIM: usize = 3;

/// Integration step size.
pub const DT: f64 = 0.05;
/// Drag coefficient for the force-point embodiment.
pub const DRAG: f64 = 0.1;
/// Goal radius for sparse rewards and success accounting.
pub const GOAL_RADIUS: f64 = 0.1;
/// Half-width of the corridor gap.
pub const GAP_HALF_WIDTH: f64 = 0.1;
/// Disc radius in pixels at the default render size.
pub const DISC_RADIUS_PX: f64 = 1.5;

/// Width of the vector-mode observation:
/// [x, y, vx, vy, cos h, sin h, gx, gy, e1, e2, e3].
pub const VECTOR_OBS_DIM: usize = 11;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("unknown environment id `{0}` (expected e{{1|2|3}}-{{dense|sparse|corridor}})")]
    UnknownId(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Embodiment {
    VelocityPoint,
    ForcePoint,
    Car,
}

impl Embodiment {
    pub fn index(self) -> u16 {
        match self {
            Embodiment::VelocityPoint => 0,
            Embodiment::ForcePoint => 1,
            Embodiment::Car => 2,
        }
    }

    pub fn from_index(i: u16) -> Option<Self> {
        match i {
            0 => Some(Embodiment::VelocityPoint),
            1 => Some(Embodiment::ForcePoint),
            2 => Some(Embodiment::Car),
            _ => None,
        }
    }

    pub fn native_action_dim(self) -> usize {
        match self {
            Embodiment::VelocityPoint | Embodiment::ForcePoint => 2,
            Embodiment::Car => 3,
        }
    }

    /// Render intensity of the agent marker; paired with a distinct marker
    /// shape so the body is identifiable from pixels.
    fn agent_intensity(self) -> f32 {
        match self {
            Embodiment::VelocityPoint => 255.0,
            Embodiment::ForcePoint => 210.0,
            Embodiment::Car => 170.0,
        }
    }

    /// Whether a pixel at offset (dx, dy) world units from the agent center
    /// belongs to the agent marker. Bodies differ in shape as well as
    /// intensity: small disc, large disc, square.
    fn agent_covers(self, dx: f64, dy: f64, disc_r: f64) -> bool {
        match self {
            Embodiment::VelocityPoint => (dx * dx + dy * dy).sqrt() <= disc_r,
            Embodiment::ForcePoint => (dx * dx + dy * dy).sqrt() <= disc_r * 1.8,
            Embodiment::Car => dx.abs().max(dy.abs()) <= disc_r * 1.3,
        }
    }

    fn tag(self) -> &'static str {
        match self {
            Embodiment::VelocityPoint => "e1",
            Embodiment::ForcePoint => "e2",
            Embodiment::Car => "e3",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    DenseReach,
    SparseReach,
    Corridor,
}

impl Task {
    pub fn has_wall(self) -> bool {
        matches!(self, Task::Corridor)
    }

    fn tag(self) -> &'static str {
        match self {
            Task::DenseReach => "dense",
            Task::SparseReach => "sparse",
            Task::Corridor => "corridor",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObsMode {
    /// G x G grayscale image, values in [0, 255].
    Image { size: usize },
    /// Compact state vector of width `VECTOR_OBS_DIM`.
    Vector,
}

impl ObsMode {
    pub fn obs_len(self) -> usize {
        match self {
            ObsMode::Image { size } => size * size,
            ObsMode::Vector => VECTOR_OBS_DIM,
        }
    }
}

/// Environment/task selection by string id, e.g. "e1-corridor".
pub fn parse_env_id(id: &str) -> Result<(Embodiment, Task), EnvError> {
    let (emb, task) = id
        .split_once('-')
        .ok_or_else(|| EnvError::UnknownId(id.to_string()))?;
    let embodiment = match emb {
        "e1" => Embodiment::VelocityPoint,
        "e2" => Embodiment::ForcePoint,
        "e3" => Embodiment::Car,
        _ => return Err(EnvError::UnknownId(id.to_string())),
    };
    let task = match task {
        "dense" => Task::DenseReach,
        "sparse" => Task::SparseReach,
        "corridor" => Task::Corridor,
        _ => return Err(EnvError::UnknownId(id.to_string())),
    };
    Ok((embodiment, task))
}

pub fn env_id(embodiment: Embodiment, task: Task) -> String {
    format!("{}-{}", embodiment.tag(), task.tag())
}

#[derive(Clone, Debug)]
pub struct ToyEnv {
    pub embodiment: Embodiment,
    pub task: Task,
    pub obs_mode: ObsMode,
    pub episode_len: usize,
    pub action_repeat: usize,

    pos: [f64; 2],
    vel: [f64; 2],
    heading: f64,
    speed: f64,
    goal: [f64; 2],
    t: usize,
    /// Count of action entries clipped back into [-1, 1].
    pub clip_warnings: u64,
}

impl ToyEnv {
    pub fn new(embodiment: Embodiment, task: Task, obs_mode: ObsMode) -> Self {
        Self {
            embodiment,
            task,
            obs_mode,
            episode_len: 100,
            action_repeat: 1,
            pos: [0.0; 2],
            vel: [0.0; 2],
            heading: 0.0,
            speed: 0.0,
            goal: [0.5, 0.0],
            t: 0,
            clip_warnings: 0,
        }
    }

    pub fn from_id(id: &str, obs_mode: ObsMode) -> Result<Self, EnvError> {
        let (embodiment, task) = parse_env_id(id)?;
        Ok(Self::new(embodiment, task, obs_mode))
    }

    pub fn position(&self) -> [f64; 2] {
        self.pos
    }

    pub fn goal(&self) -> [f64; 2] {
        self.goal
    }

    pub fn goal_distance(&self) -> f64 {
        dist(self.pos, self.goal)
    }

    /// Internal velocity, used by the scripted PD controller.
    pub fn observe_velocity(&self) -> [f64; 2] {
        self.vel
    }

    /// Internal heading and signed speed, used by the scripted car controller.
    pub fn observe_heading_speed(&self) -> (f64, f64) {
        (self.heading, self.speed)
    }

    pub fn in_goal(&self) -> bool {
        self.goal_distance() < GOAL_RADIUS
    }

    /// Reset state from a seed. The same seed always produces the same
    /// start/goal configuration.
    pub fn reset(&mut self, seed: u64) -> Vec<f32> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        match self.task {
            Task::Corridor => {
                // Start well left of the wall, goal well right: far enough
                // that undirected random walks essentially never connect
                // them through the gap within one episode.
                self.pos = [
                    rng.gen_range(-0.8..-0.55),
                    rng.gen_range(-0.3..0.3),
                ];
                self.goal = [rng.gen_range(0.55..0.8), rng.gen_range(-0.3..0.3)];
            }
            _ => {
                self.pos = [rng.gen_range(-0.7..-0.3), rng.gen_range(-0.4..0.4)];
                self.goal = [rng.gen_range(0.3..0.7), rng.gen_range(-0.4..0.4)];
            }
        }
        self.vel = [0.0; 2];
        self.speed = 0.0;
        self.heading = 0.0;
        self.t = 0;
        self.observe()
    }

    /// Advance one control step. Actions outside [-1,1] are clipped and
    /// counted. Episodes are fixed-length: `done` only at `episode_len`.
    pub fn step(&mut self, action: &[f64]) -> (Vec<f32>, f64, bool) {
        assert_eq!(
            action.len(),
            self.embodiment.native_action_dim(),
            "action dim {} does not match embodiment {:?}",
            action.len(),
            self.embodiment
        );
        let mut a = [0.0f64; 3];
        for (i, &ai) in action.iter().enumerate() {
            if !(-1.0..=1.0).contains(&ai) {
                self.clip_warnings += 1;
            }
            a[i] = ai.clamp(-1.0, 1.0);
        }

        for _ in 0..self.action_repeat {
            self.integrate(&a);
        }
        self.t += 1;

        let reward = match self.task {
            Task::DenseReach => (-4.0 * self.goal_distance()).exp(),
            Task::SparseReach | Task::Corridor => {
                if self.in_goal() {
                    1.0
                } else {
                    0.0
                }
            }
        };
        let done = self.t >= self.episode_len;
        (self.observe(), reward, done)
    }

    fn integrate(&mut self, a: &[f64; 3]) {
        let old = self.pos;
        match self.embodiment {
            Embodiment::VelocityPoint => {
                self.pos[0] += DT * a[0];
                self.pos[1] += DT * a[1];
            }
            Embodiment::ForcePoint => {
                self.vel[0] += DT * a[0] - DRAG * self.vel[0];
                self.vel[1] += DT * a[1] - DRAG * self.vel[1];
                self.pos[0] += DT * self.vel[0];
                self.pos[1] += DT * self.vel[1];
            }
            Embodiment::Car => {
                let throttle = a[0];
                let steer = a[1];
                let brake = (a[2].max(0.0) + 0.0) * 0.5;
                self.heading += 0.25 * steer;
                self.speed = (self.speed + DT * 2.0 * throttle) * (1.0 - DRAG - 0.4 * brake);
                self.speed = self.speed.clamp(-1.0, 1.0);
                self.pos[0] += DT * self.speed * self.heading.cos();
                self.pos[1] += DT * self.speed * self.heading.sin();
            }
        }

        if self.task.has_wall() {
            self.enforce_wall(old);
        }

        for i in 0..2 {
            if self.pos[i] < -1.0 || self.pos[i] > 1.0 {
                self.pos[i] = self.pos[i].clamp(-1.0, 1.0);
                self.vel[i] = 0.0;
            }
        }
    }

    /// Block movement through the x=0 wall outside the gap.
    fn enforce_wall(&mut self, old: [f64; 2]) {
        let crossed = (old[0] < 0.0) != (self.pos[0] < 0.0) || self.pos[0] == 0.0;
        if !crossed {
            return;
        }
        let denom = self.pos[0] - old[0];
        let frac = if denom.abs() < 1e-12 {
            0.0
        } else {
            (0.0 - old[0]) / denom
        };
        let y_cross = old[1] + frac * (self.pos[1] - old[1]);
        if y_cross.abs() < GAP_HALF_WIDTH {
            return;
        }
        // Stop at the wall on the original side.
        let side = if old[0] < 0.0 { -1.0 } else { 1.0 };
        self.pos[0] = side * 1e-3;
        self.pos[1] = y_cross;
        self.vel = [0.0; 2];
        self.speed = 0.0;
    }

    pub fn observe(&self) -> Vec<f32> {
        match self.obs_mode {
            ObsMode::Image { size } => self.render(size),
            ObsMode::Vector => self.vector_obs(),
        }
    }

    fn vector_obs(&self) -> Vec<f32> {
        let (vx, vy) = match self.embodiment {
            Embodiment::VelocityPoint => (0.0, 0.0),
            Embodiment::ForcePoint => (self.vel[0], self.vel[1]),
            Embodiment::Car => (
                self.speed * self.heading.cos(),
                self.speed * self.heading.sin(),
            ),
        };
        let mut obs = vec![
            self.pos[0] as f32,
            self.pos[1] as f32,
            vx as f32,
            vy as f32,
            self.heading.cos() as f32,
            self.heading.sin() as f32,
            self.goal[0] as f32,
            self.goal[1] as f32,
            0.0,
            0.0,
            0.0,
        ];
        obs[8 + self.embodiment.index() as usize] = 1.0;
        obs
    }

    /// Rasterize the scene: agent and goal as filled discs, the corridor
    /// wall as a vertical bar with its gap left open. Values in [0, 255].
    pub fn render(&self, size: usize) -> Vec<f32> {
        let g = size as f64;
        let mut img = vec![0.0f32; size * size];
        let to_world = |p: usize| -> f64 { (p as f64 + 0.5) / g * 2.0 - 1.0 };
        let disc_r = DISC_RADIUS_PX / g * 2.0;

        for py in 0..size {
            let wy = to_world(py);
            for px in 0..size {
                let wx = to_world(px);
                let mut v = 0.0f32;
                if self.task.has_wall() {
                    let half_px = 2.0 / g * 0.75;
                    if wx.abs() < half_px && wy.abs() >= GAP_HALF_WIDTH {
                        v = 80.0;
                    }
                }
                if dist([wx, wy], self.goal) <= disc_r {
                    v = 120.0;
                }
                if self
                    .embodiment
                    .agent_covers(wx - self.pos[0], wy - self.pos[1], disc_r)
                {
                    v = self.embodiment.agent_intensity();
                }
                img[py * size + px] = v;
            }
        }
        img
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}
