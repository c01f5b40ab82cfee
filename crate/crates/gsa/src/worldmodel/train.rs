//! World-model optimization loop.

use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::datastore::{DataError, SeqBatch};
use crate::numerics::{adam_step, AdamConfig, OptimError, Real, Tape};

use super::{wm_loss_on_tape, SeqNoise, WorldModel};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at step {step} (components: recon {recon}, kl {kl}, reward {reward})")]
    NonFiniteLoss {
        step: usize,
        recon: f64,
        kl: f64,
        reward: f64,
    },
    #[error("optimizer: {0}")]
    Optim(#[from] OptimError),
    #[error("data: {0}")]
    Data(#[from] DataError),
}

#[derive(Clone, Copy, Debug, Default)]
pub struct WmLossComponents {
    pub total: f64,
    pub recon: f64,
    /// Floored KL (the term entering the loss).
    pub kl: f64,
    /// Unfloored KL.
    pub kl_raw: f64,
    pub reward_nll: f64,
}

/// One gradient step on a batch. Returns the loss components and the
/// posterior states of the batch (time-major, computed before the update;
/// these seed imagination rollouts). Parameters are untouched if the loss
/// or any gradient is non-finite.
pub fn wm_train_step<R: Real>(
    wm: &mut WorldModel<R>,
    batch: &SeqBatch<R>,
    adam: &AdamConfig,
    step: usize,
    rng: &mut ChaCha12Rng,
) -> Result<(WmLossComponents, crate::worldmodel::LatentState<R>), TrainError> {
    let noise = SeqNoise::draw(rng, batch.len, batch.batch, wm.cfg.stoch_dim);
    let mut tape: Tape<R> = Tape::new();
    let bound = wm.params.bind(&mut tape, true);
    let vars = wm_loss_on_tape(
        wm,
        &mut tape,
        &bound,
        batch,
        wm.cfg.beta,
        wm.cfg.free_bits,
        &noise,
    );
    let components = WmLossComponents {
        total: tape.value(vars.total).item().to_f64(),
        recon: tape.value(vars.recon).item().to_f64(),
        kl: tape.value(vars.kl).item().to_f64(),
        kl_raw: tape.value(vars.kl_raw).item().to_f64(),
        reward_nll: tape.value(vars.reward_nll).item().to_f64(),
    };
    if !components.total.is_finite() {
        return Err(TrainError::NonFiniteLoss {
            step,
            recon: components.recon,
            kl: components.kl,
            reward: components.reward_nll,
        });
    }
    let states = {
        let per_step: Vec<crate::worldmodel::LatentState<R>> = vars
            .posterior_states
            .iter()
            .map(|s| crate::worldmodel::LatentState {
                h: tape.value(s.h).clone(),
                z: tape.value(s.z).clone(),
            })
            .collect();
        crate::worldmodel::LatentState::stack(&per_step)
    };
    let grads_by_var = tape.backward(vars.total);
    let grads: Vec<_> = (0..wm.params.len())
        .map(|i| {
            let id = crate::numerics::ParamId(i);
            grads_by_var.get(bound.var(id), wm.params.get(id).value.shape())
        })
        .collect();
    adam_step(&mut wm.params, &grads, adam)?;
    Ok((components, states))
}

/// Runs `n_steps` optimizer updates with batches pulled from `next_batch`,
/// recording the loss trace.
pub fn train_steps<R: Real, F>(
    wm: &mut WorldModel<R>,
    mut next_batch: F,
    n_steps: usize,
    adam: &AdamConfig,
    rng: &mut ChaCha12Rng,
) -> Result<Vec<WmLossComponents>, TrainError>
where
    F: FnMut(&mut ChaCha12Rng) -> Result<SeqBatch<R>, DataError>,
{
    let mut trace = Vec::with_capacity(n_steps);
    for step in 0..n_steps {
        let batch = next_batch(rng)?;
        let (components, _) = wm_train_step(wm, &batch, adam, step, rng)?;
        trace.push(components);
    }
    Ok(trace)
}

/// Loss components without updating parameters.
pub fn wm_eval_loss<R: Real>(
    wm: &WorldModel<R>,
    batch: &SeqBatch<R>,
    rng: &mut ChaCha12Rng,
) -> WmLossComponents {
    let noise = SeqNoise::draw(rng, batch.len, batch.batch, wm.cfg.stoch_dim);
    let mut tape: Tape<R> = Tape::new();
    let bound = wm.params.bind(&mut tape, false);
    let vars = wm_loss_on_tape(
        wm,
        &mut tape,
        &bound,
        batch,
        wm.cfg.beta,
        wm.cfg.free_bits,
        &noise,
    );
    WmLossComponents {
        total: tape.value(vars.total).item().to_f64(),
        recon: tape.value(vars.recon).item().to_f64(),
        kl: tape.value(vars.kl).item().to_f64(),
        kl_raw: tape.value(vars.kl_raw).item().to_f64(),
        reward_nll: tape.value(vars.reward_nll).item().to_f64(),
    }
}
