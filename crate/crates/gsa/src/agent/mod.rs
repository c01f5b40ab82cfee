//! Imagination-based actor-critic on latent states, plus the
//! behavior-cloned prior policy used for execution guidance.

pub mod returns;
pub mod rollout;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::numerics::{
    Activation, Bound, Conv2dLayer, ConvMeta, GaussianVars, Mlp, ParamSet, Real, Tape, Tensor, Var,
};
use crate::worldmodel::ObsLayout;

pub use returns::lambda_returns;
pub use rollout::{
    actor_critic_update, bc_train, imagine_rollout, rollout_losses_on_tape, AgentUpdate,
    BcDataset, ImaginedRollout, RolloutNoise,
};

#[derive(Clone, Copy, Debug)]
pub struct AgentConfig {
    pub state_dim: usize,
    pub action_dim: usize,
    pub hidden: usize,
    pub gamma: f64,
    pub lam: f64,
    /// Actor entropy coefficient.
    pub entropy_coef: f64,
    pub lr: f64,
    pub target_fraction: f64,
    pub horizon: usize,
}

impl AgentConfig {
    pub fn for_state(state_dim: usize, action_dim: usize, hidden: usize) -> Self {
        Self {
            state_dim,
            action_dim,
            hidden,
            gamma: 0.99,
            lam: 0.95,
            entropy_coef: 1e-4,
            lr: 8e-5,
            target_fraction: 0.02,
            horizon: 16,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActionMode {
    Sample,
    Mean,
}

/// Policy head over latent states; actions are tanh-squashed into [-1,1]^A.
pub struct Actor<R: Real> {
    pub params: ParamSet<R>,
    net: Mlp,
    pub action_dim: usize,
    pub state_dim: usize,
}

impl<R: Real> Actor<R> {
    pub fn new(cfg: &AgentConfig, seed: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let net = Mlp::new(
            &mut ps,
            &mut rng,
            "actor",
            &[cfg.state_dim, cfg.hidden, cfg.hidden, 2 * cfg.action_dim],
            Activation::Silu,
        );
        Self {
            params: ps,
            net,
            action_dim: cfg.action_dim,
            state_dim: cfg.state_dim,
        }
    }

    pub fn dist_on_tape(&self, tape: &mut Tape<R>, bound: &Bound, state: Var) -> GaussianVars {
        assert_eq!(
            tape.value(state).cols(),
            self.state_dim,
            "actor input width {} does not match state dim {}",
            tape.value(state).cols(),
            self.state_dim
        );
        let out = self.net.forward(tape, bound, state);
        GaussianVars::from_head(tape, out, self.action_dim)
    }

    /// Tanh-squashed action for a batch of state features.
    pub fn select_action(
        &self,
        state: &Tensor<R>,
        mode: ActionMode,
        rng: &mut ChaCha12Rng,
    ) -> Tensor<R> {
        let mut tape: Tape<R> = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let s = tape.constant(state.clone());
        let dist = self.dist_on_tape(&mut tape, &bound, s);
        let u = match mode {
            ActionMode::Mean => dist.mean,
            ActionMode::Sample => {
                let noise = crate::numerics::standard_normal::<R>(
                    rng,
                    &[state.rows(), self.action_dim],
                );
                dist.sample_with(&mut tape, &noise)
            }
        };
        let a = tape.tanh(u);
        tape.value(a).clone()
    }
}

/// Return estimator: a unit-variance Gaussian over the return whose mean is
/// the net output, plus an EMA target copy used for bootstrap values.
pub struct Critic<R: Real> {
    pub params: ParamSet<R>,
    pub target: ParamSet<R>,
    net: Mlp,
    pub state_dim: usize,
}

impl<R: Real> Critic<R> {
    pub fn new(cfg: &AgentConfig, seed: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let net = Mlp::new(
            &mut ps,
            &mut rng,
            "critic",
            &[cfg.state_dim, cfg.hidden, cfg.hidden, 1],
            Activation::Silu,
        );
        let target = ps.clone();
        Self {
            params: ps,
            target,
            net,
            state_dim: cfg.state_dim,
        }
    }

    pub fn value_on_tape(&self, tape: &mut Tape<R>, bound: &Bound, state: Var) -> Var {
        self.net.forward(tape, bound, state)
    }

    /// Expected values under the live critic.
    pub fn values(&self, states: &Tensor<R>) -> Tensor<R> {
        let mut tape: Tape<R> = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let s = tape.constant(states.clone());
        let v = self.value_on_tape(&mut tape, &bound, s);
        tape.value(v).clone()
    }

    /// target <- (1 - fraction) * target + fraction * critic, per parameter.
    pub fn update_target(&mut self, fraction: f64) {
        assert!(
            fraction > 0.0 && fraction <= 1.0,
            "target update fraction must be in (0, 1]"
        );
        let f = R::from_f64(fraction);
        for i in 0..self.params.len() {
            let id = crate::numerics::ParamId(i);
            let src = self.params.get(id).value.clone();
            let dst = &mut self.target.get_mut(id).value;
            // d + f (s - d): exact fixed point when critic == target.
            for (d, &s) in dst.data_mut().iter_mut().zip(src.data()) {
                *d += f * (s - *d);
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct BcConfig {
    pub obs: ObsLayout,
    pub action_dim: usize,
    pub hidden: usize,
    pub feat_dim: usize,
    pub conv_channels: [usize; 2],
    pub lr: f64,
    /// Fixed log standard deviation of the action head. Cloning with a
    /// learned variance lets the NLL absorb the saturated pre-tanh targets
    /// of bang-bang expert actions into per-state variance instead of
    /// fitting their means; a fixed, moderate std makes the loss a plain
    /// regression on means and keeps sampled guidance actions jittered.
    pub log_std: f64,
}

impl BcConfig {
    pub fn for_obs(obs: ObsLayout, action_dim: usize, hidden: usize) -> Self {
        Self {
            obs,
            action_dim,
            hidden,
            feat_dim: hidden,
            conv_channels: [16, 32],
            lr: 3e-4,
            log_std: (0.3f64).ln(),
        }
    }
}

enum BcEncoder {
    Vector(Mlp),
    Image {
        conv1: Conv2dLayer,
        conv2: Conv2dLayer,
        dense: crate::numerics::Linear,
    },
}

/// Behavior-cloned prior policy, observation to tanh-squashed action, with
/// its own small encoder (independent of the world model).
pub struct BcPolicy<R: Real> {
    pub params: ParamSet<R>,
    pub cfg: BcConfig,
    encoder: BcEncoder,
    head: Mlp,
}

impl<R: Real> BcPolicy<R> {
    pub fn new(cfg: BcConfig, seed: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let encoder = match cfg.obs {
            ObsLayout::Vector { dim } => BcEncoder::Vector(Mlp::new(
                &mut ps,
                &mut rng,
                "bc.enc",
                &[dim, cfg.hidden, cfg.feat_dim],
                Activation::Silu,
            )),
            ObsLayout::Image { size } => {
                let [c1, c2] = cfg.conv_channels;
                let meta1 = ConvMeta {
                    in_h: size,
                    in_w: size,
                    in_c: 1,
                    out_c: c1,
                    kernel: 4,
                    stride: 2,
                    pad: 1,
                };
                let meta2 = ConvMeta {
                    in_h: size / 2,
                    in_w: size / 2,
                    in_c: c1,
                    out_c: c2,
                    kernel: 4,
                    stride: 2,
                    pad: 1,
                };
                let conv1 =
                    Conv2dLayer::new(&mut ps, &mut rng, "bc.enc.conv1", meta1, Activation::Silu);
                let conv2 =
                    Conv2dLayer::new(&mut ps, &mut rng, "bc.enc.conv2", meta2, Activation::Silu);
                let flat = c2 * (size / 4) * (size / 4);
                let dense = crate::numerics::Linear::new(
                    &mut ps,
                    &mut rng,
                    "bc.enc.dense",
                    flat,
                    cfg.feat_dim,
                    Activation::Silu,
                );
                BcEncoder::Image { conv1, conv2, dense }
            }
        };
        let head = Mlp::new(
            &mut ps,
            &mut rng,
            "bc.head",
            &[cfg.feat_dim, cfg.hidden, cfg.action_dim],
            Activation::Silu,
        );
        Self {
            params: ps,
            cfg,
            encoder,
            head,
        }
    }

    pub fn dist_on_tape(&self, tape: &mut Tape<R>, bound: &Bound, obs: Var) -> GaussianVars {
        let feat = match &self.encoder {
            BcEncoder::Vector(mlp) => mlp.forward(tape, bound, obs),
            BcEncoder::Image { conv1, conv2, dense } => {
                let scaled = tape.scale(obs, 1.0 / 255.0);
                let centered = tape.offset(scaled, -0.5);
                let h1 = conv1.forward(tape, bound, centered);
                let h2 = conv2.forward(tape, bound, h1);
                dense.forward(tape, bound, h2)
            }
        };
        let mean = self.head.forward(tape, bound, feat);
        GaussianVars::with_fixed_std(tape, mean, self.cfg.log_std)
    }

    pub fn select_action(
        &self,
        obs: &Tensor<R>,
        mode: ActionMode,
        rng: &mut ChaCha12Rng,
    ) -> Tensor<R> {
        let mut tape: Tape<R> = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let o = tape.constant(obs.clone());
        let dist = self.dist_on_tape(&mut tape, &bound, o);
        let u = match mode {
            ActionMode::Mean => dist.mean,
            ActionMode::Sample => {
                let noise = crate::numerics::standard_normal::<R>(
                    rng,
                    &[obs.rows(), self.cfg.action_dim],
                );
                dist.sample_with(&mut tape, &noise)
            }
        };
        let a = tape.tanh(u);
        tape.value(a).clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> AgentConfig {
        AgentConfig::for_state(8, 3, 12)
    }

    fn rng(seed: u64) -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(seed)
    }

    #[test]
    fn mean_mode_is_deterministic() {
        let actor: Actor<f64> = Actor::new(&cfg(), 1);
        let s = Tensor::from_rows(1, 8, vec![0.1; 8]);
        let a = actor.select_action(&s, ActionMode::Mean, &mut rng(0));
        let b = actor.select_action(&s, ActionMode::Mean, &mut rng(99));
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn sampled_actions_stay_in_bounds() {
        let actor: Actor<f64> = Actor::new(&cfg(), 2);
        let mut r = rng(5);
        let s = Tensor::from_rows(1, 8, vec![0.4; 8]);
        for _ in 0..10_000 {
            let a = actor.select_action(&s, ActionMode::Sample, &mut r);
            for &x in a.data() {
                assert!((-1.0..=1.0).contains(&x));
            }
        }
    }

    #[test]
    fn tight_log_std_sampling_approaches_mean_action() {
        // Force log_std to its clamp minimum: samples collapse onto the mean.
        let mut actor: Actor<f64> = Actor::new(&cfg(), 3);
        // Push the log-std half of the output bias strongly negative.
        let n = actor.params.len();
        let bias_id = crate::numerics::ParamId(n - 1);
        let bias = &mut actor.params.get_mut(bias_id).value;
        for i in 3..6 {
            bias.data_mut()[i] = -30.0; // clamps to LOG_STD_MIN
        }
        let s = Tensor::from_rows(1, 8, vec![0.2; 8]);
        let mean = actor.select_action(&s, ActionMode::Mean, &mut rng(0));
        let mut r = rng(7);
        let n = 1000;
        let mut avg = vec![0.0f64; 3];
        for _ in 0..n {
            let a = actor.select_action(&s, ActionMode::Sample, &mut r);
            for (acc, &x) in avg.iter_mut().zip(a.data()) {
                *acc += x / n as f64;
            }
        }
        let max_dev = avg
            .iter()
            .zip(mean.data())
            .map(|(a, m)| (a - m).abs())
            .fold(0.0f64, f64::max);
        assert!(max_dev < 1e-2, "max deviation {max_dev}");
    }

    #[test]
    fn target_update_boundary_cases() {
        let mut critic: Critic<f64> = Critic::new(&cfg(), 4);
        // fraction 1: target equals critic exactly.
        for p in critic.params.iter_mut() {
            for v in p.value.data_mut() {
                *v += 0.25;
            }
        }
        critic.update_target(1.0);
        for (p, t) in critic.params.iter().zip(critic.target.iter()) {
            assert_eq!(p.value.data(), t.value.data());
        }
        // critic == target: update is a fixed point.
        let before: Vec<Vec<u64>> = critic
            .target
            .iter()
            .map(|p| p.value.data().iter().map(|x| x.to_bits()).collect())
            .collect();
        critic.update_target(0.02);
        let after: Vec<Vec<u64>> = critic
            .target
            .iter()
            .map(|p| p.value.data().iter().map(|x| x.to_bits()).collect())
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn target_gap_decays_geometrically() {
        let mut critic: Critic<f64> = Critic::new(&cfg(), 5);
        for p in critic.params.iter_mut() {
            for v in p.value.data_mut() {
                *v += 1.0;
            }
        }
        let gap = |c: &Critic<f64>| -> f64 {
            c.params
                .iter()
                .zip(c.target.iter())
                .flat_map(|(p, t)| {
                    p.value
                        .data()
                        .iter()
                        .zip(t.value.data())
                        .map(|(a, b)| (a - b).abs())
                })
                .fold(0.0, f64::max)
        };
        let g0 = gap(&critic);
        for _ in 0..50 {
            critic.update_target(0.02);
        }
        let want = g0 * 0.98f64.powi(50);
        assert!((gap(&critic) - want).abs() < 1e-6, "{} vs {want}", gap(&critic));
    }

    #[test]
    fn bc_policy_actions_bounded_both_obs_modes() {
        for obs in [ObsLayout::Vector { dim: 6 }, ObsLayout::Image { size: 8 }] {
            let bc: BcPolicy<f64> = BcPolicy::new(BcConfig::for_obs(obs, 3, 8), 6);
            let o = Tensor::filled(&[1, obs.obs_len()], 0.3);
            let mut r = rng(1);
            for _ in 0..100 {
                let a = bc.select_action(&o, ActionMode::Sample, &mut r);
                assert!(a.data().iter().all(|x| (-1.0..=1.0).contains(x)));
            }
        }
    }
}
