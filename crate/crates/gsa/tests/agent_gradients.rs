//! Actor, critic, and behavior-cloning losses against the
//! finite-difference oracle, plus the entropy-coefficient identity.

use gsa::agent::rollout::{rollout_losses_on_tape, RolloutBounds, RolloutNoise};
use gsa::agent::{Actor, AgentConfig, Critic};
use gsa::numerics::Tape;
use gsa::verify::{check_actor_critic_losses, check_bc_loss};
use gsa::worldmodel::{ObsLayout, WorldModel, WorldModelConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

const TOL: f64 = 1e-4;

#[test]
fn actor_and_critic_losses_match_finite_differences() {
    let (actor_err, critic_err) = check_actor_critic_losses();
    assert!(actor_err < TOL, "actor loss error {actor_err}");
    assert!(critic_err < TOL, "critic loss error {critic_err}");
}

#[test]
fn bc_nll_matches_finite_differences_both_modes() {
    for obs in [ObsLayout::Vector { dim: 4 }, ObsLayout::Image { size: 8 }] {
        let err = check_bc_loss(obs);
        assert!(err < TOL, "{obs:?}: {err}");
    }
}

#[test]
fn entropy_coefficient_gradient_identity() {
    // d actor_loss / d eta = -entropy_sum, by central differences over eta.
    let cfg = WorldModelConfig {
        obs: ObsLayout::Vector { dim: 4 },
        action_dim: 3,
        deter_dim: 5,
        stoch_dim: 2,
        hidden: 8,
        feat_dim: 5,
        conv_channels: [2, 3],
        beta: 1.0,
        free_bits: 1.0,
    };
    let wm: WorldModel<f64> = WorldModel::new(cfg, 51);
    let acfg = AgentConfig {
        horizon: 3,
        ..AgentConfig::for_state(7, 3, 8)
    };
    let actor = Actor::new(&acfg, 52);
    let critic = Critic::new(&acfg, 53);
    let mut rng = ChaCha12Rng::seed_from_u64(54);
    let starts = wm.imagine_step(
        &wm.initial_state(2),
        &gsa::numerics::standard_normal::<f64>(&mut rng, &[2, 3]).map(|x| x.tanh()),
        &mut rng,
    );
    let noise = RolloutNoise::draw(&mut rng, acfg.horizon, 2, 3, wm.cfg.stoch_dim);

    let eval = |eta: f64| {
        let mut c = acfg;
        c.entropy_coef = eta;
        let mut tape: Tape<f64> = Tape::new();
        let bounds = RolloutBounds {
            wm: wm.params.bind(&mut tape, false),
            actor: actor.params.bind(&mut tape, false),
            critic: critic.params.bind(&mut tape, false),
            target: critic.target.bind(&mut tape, false),
        };
        let vars =
            rollout_losses_on_tape(&wm, &actor, &critic, &mut tape, &bounds, &starts, &c, &noise, false);
        (
            tape.value(vars.actor_loss).item(),
            tape.value(vars.entropy_sum).item(),
        )
    };
    let eps = 1e-6;
    let (lp, _) = eval(1e-4 + eps);
    let (lm, _) = eval(1e-4 - eps);
    let (_, entropy) = eval(1e-4);
    let fd = (lp - lm) / (2.0 * eps);
    assert!((fd + entropy).abs() < 1e-8, "d/d eta {fd} vs -entropy {}", -entropy);
}
