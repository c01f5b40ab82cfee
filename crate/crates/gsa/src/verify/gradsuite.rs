//! Reusable gradient-check harnesses: every differentiable loss in the
//! crate against the central finite-difference oracle, on tiny f64 models
//! with frozen noise. Each function returns the worst relative error.

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::agent::rollout::{bc_loss_on_tape, rollout_losses_on_tape, RolloutBounds, RolloutNoise};
use crate::agent::{Actor, AgentConfig, BcConfig, BcPolicy, Critic};
use crate::datastore::SeqBatch;
use crate::numerics::{finite_diff_grad, max_rel_error, ParamId, ParamSet, Tape, Tensor};
use crate::worldmodel::{wm_loss_on_tape, LatentState, ObsLayout, SeqNoise, WorldModel, WorldModelConfig};

pub const GRAD_EPSILON: f64 = 1e-5;

fn tiny_wm_cfg(obs: ObsLayout) -> WorldModelConfig {
    WorldModelConfig {
        obs,
        action_dim: 3,
        deter_dim: 6,
        stoch_dim: 3,
        hidden: 8,
        feat_dim: 6,
        conv_channels: [2, 3],
        beta: 1.0,
        free_bits: 1.0,
    }
}

fn realistic_obs(rng: &mut ChaCha12Rng, rows: usize, obs: ObsLayout) -> Tensor<f64> {
    match obs {
        // Pixels live in [0, 255]; vectors are unit-scale env states.
        ObsLayout::Image { size } => {
            crate::numerics::standard_normal::<f64>(rng, &[rows, size * size])
                .map(|x| (x.abs() * 80.0).min(255.0))
        }
        ObsLayout::Vector { dim } => {
            crate::numerics::standard_normal::<f64>(rng, &[rows, dim]).map(|x| x.tanh())
        }
    }
}

fn two_step_batch(obs: ObsLayout, b: usize, with_rewards: bool, seed: u64) -> SeqBatch<f64> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let len = 2;
    let obs_t = realistic_obs(&mut rng, len * b, obs);
    let actions = crate::numerics::standard_normal::<f64>(&mut rng, &[len * b, 3]).map(|x| x.tanh());
    let rewards = crate::numerics::standard_normal::<f64>(&mut rng, &[len * b, 1]);
    let mut is_first = vec![false; len * b];
    for bb in 0..b {
        is_first[bb] = true;
    }
    if b > 1 {
        is_first[len * b - 1] = true; // one mid-window reset
    }
    SeqBatch {
        obs: obs_t,
        actions,
        rewards,
        is_first,
        reward_mask: vec![with_rewards; b],
        has_rewards: with_rewards,
        batch: b,
        len,
    }
}

/// Sequence-model loss (reconstruction + KL + reward NLL) against finite
/// differences. Covers both the floored and unfloored KL paths.
pub fn check_wm_loss(obs: ObsLayout, beta: f64, free_bits: f64, with_rewards: bool) -> f64 {
    let wm: WorldModel<f64> = WorldModel::new(tiny_wm_cfg(obs), 42);
    let batch = two_step_batch(obs, 2, with_rewards, 7);
    let noise = SeqNoise::draw(
        &mut ChaCha12Rng::seed_from_u64(11),
        batch.len,
        batch.batch,
        wm.cfg.stoch_dim,
    );

    let mut tape: Tape<f64> = Tape::new();
    let bound = wm.params.bind(&mut tape, true);
    let vars = wm_loss_on_tape(&wm, &mut tape, &bound, &batch, beta, free_bits, &noise);
    let grads = tape.backward(vars.total);
    let analytic: Vec<Tensor<f64>> = (0..wm.params.len())
        .map(|i| grads.get(bound.var(ParamId(i)), wm.params.get(ParamId(i)).value.shape()))
        .collect();

    let mut probe = |ps: &ParamSet<f64>| {
        let mut wm2: WorldModel<f64> = WorldModel::new(tiny_wm_cfg(obs), 42);
        wm2.params = ps.clone();
        let mut tape: Tape<f64> = Tape::new();
        let bound = wm2.params.bind(&mut tape, false);
        let vars = wm_loss_on_tape(&wm2, &mut tape, &bound, &batch, beta, free_bits, &noise);
        tape.value(vars.total).item()
    };
    let numeric = finite_diff_grad(&mut probe, &wm.params, GRAD_EPSILON).unwrap();
    max_rel_error(&analytic, &numeric)
}

fn rollout_fixture() -> (
    WorldModel<f64>,
    Actor<f64>,
    Critic<f64>,
    AgentConfig,
    LatentState<f64>,
    RolloutNoise<f64>,
) {
    let wm = WorldModel::new(tiny_wm_cfg(ObsLayout::Vector { dim: 4 }), 51);
    let cfg = AgentConfig {
        horizon: 3,
        ..AgentConfig::for_state(9, 3, 8)
    };
    let actor = Actor::new(&cfg, 52);
    let mut critic = Critic::new(&cfg, 53);
    // Decorrelate the target from the live critic.
    for p in critic.target.iter_mut() {
        for v in p.value.data_mut() {
            *v *= 0.9;
        }
    }
    let mut rng = ChaCha12Rng::seed_from_u64(54);
    let starts = wm.imagine_step(
        &wm.initial_state(2),
        &crate::numerics::standard_normal::<f64>(&mut rng, &[2, 3]).map(|x| x.tanh()),
        &mut rng,
    );
    let noise = RolloutNoise::draw(&mut rng, cfg.horizon, 2, 3, wm.cfg.stoch_dim);
    (wm, actor, critic, cfg, starts, noise)
}

/// Actor loss through the imagined dynamics (reparameterized), and critic
/// NLL on detached targets, against finite differences. Returns
/// (actor error, critic error).
pub fn check_actor_critic_losses() -> (f64, f64) {
    let (wm, actor, critic, cfg, starts, noise) = rollout_fixture();

    let build = |actor: &Actor<f64>, critic: &Critic<f64>, trainable: bool| {
        let mut tape: Tape<f64> = Tape::new();
        let bounds = RolloutBounds {
            wm: wm.params.bind(&mut tape, false),
            actor: actor.params.bind(&mut tape, trainable),
            critic: critic.params.bind(&mut tape, trainable),
            target: critic.target.bind(&mut tape, false),
        };
        let vars =
            rollout_losses_on_tape(&wm, actor, critic, &mut tape, &bounds, &starts, &cfg, &noise, false);
        (tape, bounds, vars)
    };

    let (mut tape, bounds, vars) = build(&actor, &critic, true);
    let actor_grads = tape.backward(vars.actor_loss);
    let analytic_actor: Vec<Tensor<f64>> = (0..actor.params.len())
        .map(|i| {
            actor_grads.get(
                bounds.actor.var(ParamId(i)),
                actor.params.get(ParamId(i)).value.shape(),
            )
        })
        .collect();
    let critic_grads = tape.backward(vars.critic_loss);
    let analytic_critic: Vec<Tensor<f64>> = (0..critic.params.len())
        .map(|i| {
            critic_grads.get(
                bounds.critic.var(ParamId(i)),
                critic.params.get(ParamId(i)).value.shape(),
            )
        })
        .collect();

    let mut actor_probe = |ps: &ParamSet<f64>| {
        let mut a2 = Actor::new(&cfg, 52);
        a2.params = ps.clone();
        let (tape, _, vars) = build(&a2, &critic, false);
        tape.value(vars.actor_loss).item()
    };
    let numeric_actor = finite_diff_grad(&mut actor_probe, &actor.params, GRAD_EPSILON).unwrap();

    let mut critic_probe = |ps: &ParamSet<f64>| {
        let mut c2 = Critic::new(&cfg, 53);
        c2.params = ps.clone();
        c2.target = critic.target.clone();
        let (tape, _, vars) = build(&actor, &c2, false);
        tape.value(vars.critic_loss).item()
    };
    let numeric_critic = finite_diff_grad(&mut critic_probe, &critic.params, GRAD_EPSILON).unwrap();

    (
        max_rel_error(&analytic_actor, &numeric_actor),
        max_rel_error(&analytic_critic, &numeric_critic),
    )
}

/// Behavior-cloning NLL against finite differences.
pub fn check_bc_loss(obs: ObsLayout) -> f64 {
    let bc: BcPolicy<f64> = BcPolicy::new(BcConfig::for_obs(obs, 3, 8), 61);
    let mut rng = ChaCha12Rng::seed_from_u64(62);
    let n = 4;
    let obs_t = realistic_obs(&mut rng, n, obs);
    let actions = crate::numerics::standard_normal::<f64>(&mut rng, &[n, 3]).map(|x| (x * 0.7).tanh());

    let mut tape: Tape<f64> = Tape::new();
    let bound = bc.params.bind(&mut tape, true);
    let loss = bc_loss_on_tape(&bc, &mut tape, &bound, &obs_t, &actions);
    let grads = tape.backward(loss);
    let analytic: Vec<Tensor<f64>> = (0..bc.params.len())
        .map(|i| grads.get(bound.var(ParamId(i)), bc.params.get(ParamId(i)).value.shape()))
        .collect();

    let mut probe = |ps: &ParamSet<f64>| {
        let mut bc2: BcPolicy<f64> = BcPolicy::new(BcConfig::for_obs(obs, 3, 8), 61);
        bc2.params = ps.clone();
        let mut tape: Tape<f64> = Tape::new();
        let bound = bc2.params.bind(&mut tape, false);
        let loss = bc_loss_on_tape(&bc2, &mut tape, &bound, &obs_t, &actions);
        tape.value(loss).item()
    };
    let numeric = finite_diff_grad(&mut probe, &bc.params, GRAD_EPSILON).unwrap();
    max_rel_error(&analytic, &numeric)
}

/// Reparameterized-sampling identity: the gradient of a frozen-noise sample
/// mean with respect to the distribution mean is exactly one per entry.
pub fn check_reparam_identity() -> f64 {
    let mut ps: ParamSet<f64> = ParamSet::new();
    ps.add("mean", Tensor::from_rows(1, 3, vec![0.2, -0.7, 1.1]));
    let noise = [0.37f64, -1.2, 0.05];
    let log_std = [-0.5f64, 0.1, 0.3];
    let mut f = |ps: &ParamSet<f64>| {
        let mean = &ps.by_name("mean").unwrap().value;
        (0..3)
            .map(|i| mean.data()[i] + log_std[i].exp() * noise[i])
            .sum()
    };
    let g = finite_diff_grad(&mut f, &ps, GRAD_EPSILON).unwrap();
    g[0].data()
        .iter()
        .map(|x| (x - 1.0).abs())
        .fold(0.0, f64::max)
}
