//! Independent oracles and statistical diagnostics: a sliced Wasserstein
//! estimator for distribution shift, a forward-expansion twin of the
//! lambda-return recursion, harnesses for the retrieval and guidance
//! guarantees, and a held-out forgetting probe.

pub mod gradsuite;
pub mod props;
pub mod wasserstein;

use rand_chacha::ChaCha12Rng;

use crate::datastore::SeqBatch;
use crate::worldmodel::{wm_eval_loss, WmLossComponents, WorldModel};

pub use gradsuite::{check_actor_critic_losses, check_bc_loss, check_reparam_identity, check_wm_loss};
pub use props::{prop1_harness, prop3_harness, retrieval_oracle_check, Prop1Report, Prop3Report};
pub use wasserstein::{sliced_wasserstein, ShiftReport};

/// Direct forward expansion of the lambda-return: for each t, the
/// exponentially weighted mixture of n-step bootstrapped returns,
///
///   V^l_t = (1 - l) sum_{n=1}^{H-t-1} l^{n-1} G^n_t + l^{H-t-1} G^{H-t}_t,
///   G^n_t = sum_{k=0}^{n-1} gamma^k r_{t+k} + gamma^n v_{t+n},
///
/// O(H^2), sharing nothing with the recursion it cross-checks.
pub fn lambda_return_oracle(rewards: &[f64], values: &[f64], gamma: f64, lam: f64) -> Vec<f64> {
    assert!((0.0..1.0).contains(&gamma));
    assert!((0.0..=1.0).contains(&lam));
    assert_eq!(values.len(), rewards.len() + 1);
    let h = rewards.len();
    let n_step = |t: usize, n: usize| -> f64 {
        let mut acc = 0.0;
        let mut disc = 1.0;
        for k in 0..n {
            acc += disc * rewards[t + k];
            disc *= gamma;
        }
        acc + disc * values[t + n]
    };
    (0..h)
        .map(|t| {
            let span = h - t;
            let mut total = 0.0;
            let mut weight = 1.0 - lam;
            let mut lpow = 1.0;
            for n in 1..span {
                total += weight * lpow * n_step(t, n);
                lpow *= lam;
            }
            weight = lpow; // l^{span-1}
            total += weight * n_step(t, span);
            let _ = &mut weight;
            total
        })
        .collect()
}

/// Reconstruction-quality drift of a fine-tuned model on held-out offline
/// data: loss(after) - loss(before) on the same batch and noise seed.
/// Read-only on both models.
pub struct ForgettingReport {
    pub before: WmLossComponents,
    pub after: WmLossComponents,
}

impl ForgettingReport {
    pub fn delta(&self) -> f64 {
        self.after.total - self.before.total
    }

    pub fn recon_delta(&self) -> f64 {
        self.after.recon - self.before.recon
    }
}

pub fn forgetting_probe(
    wm_before: &WorldModel<f32>,
    wm_after: &WorldModel<f32>,
    heldout: &SeqBatch<f32>,
    seed: u64,
) -> ForgettingReport {
    assert_eq!(
        wm_before.cfg.obs, wm_after.cfg.obs,
        "checkpoints must share an observation layout"
    );
    assert_eq!(wm_before.cfg.deter_dim, wm_after.cfg.deter_dim);
    assert_eq!(wm_before.cfg.stoch_dim, wm_after.cfg.stoch_dim);
    use rand::SeedableRng;
    let before = wm_eval_loss(wm_before, heldout, &mut ChaCha12Rng::seed_from_u64(seed));
    let after = wm_eval_loss(wm_after, heldout, &mut ChaCha12Rng::seed_from_u64(seed));
    ForgettingReport { before, after }
}
