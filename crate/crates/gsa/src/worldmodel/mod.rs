//! Recurrent latent world model.
//!
//! A GRU carries the deterministic state h; a stochastic latent z is drawn
//! from the posterior (given h and the encoded observation) during
//! observation and from the prior (given h alone) during imagination. The
//! decoder and reward head read the joint state s = [h, z]. Training
//! minimizes reconstruction NLL plus beta * KL(posterior || prior) floored
//! by free bits, with a reward NLL term on reward-labeled rows.

pub mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::datastore::index::ObsEncoder;
use crate::datastore::{SeqBatch, StoreHeader};
use crate::numerics::gaussian::LN_2PI;
use crate::numerics::{
    Activation, Bound, Conv2dLayer, ConvMeta, GaussianVars, GruCell, Mlp, ParamId, ParamSet, Real,
    Tape, Tensor, Var,
};

pub use train::{train_steps, wm_eval_loss, wm_train_step, TrainError, WmLossComponents};

/// Observation layout the model is built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObsLayout {
    Vector { dim: usize },
    Image { size: usize },
}

impl ObsLayout {
    pub fn obs_len(self) -> usize {
        match self {
            ObsLayout::Vector { dim } => dim,
            ObsLayout::Image { size } => size * size,
        }
    }

    pub fn from_store_header(h: &StoreHeader) -> Self {
        if h.obs_mode == 1 {
            ObsLayout::Image { size: h.obs_shape[0] }
        } else {
            ObsLayout::Vector { dim: h.obs_len() }
        }
    }

    pub fn shape(self) -> Vec<usize> {
        match self {
            ObsLayout::Vector { dim } => vec![dim],
            ObsLayout::Image { size } => vec![size, size],
        }
    }
}

#[derive(Clone, Debug)]
pub struct WorldModelConfig {
    pub obs: ObsLayout,
    pub action_dim: usize,
    /// Deterministic state width (h).
    pub deter_dim: usize,
    /// Stochastic latent width (z).
    pub stoch_dim: usize,
    /// MLP hidden width.
    pub hidden: usize,
    /// Encoder feature width (the retrieval embedding).
    pub feat_dim: usize,
    /// Conv channels for image encoders.
    pub conv_channels: [usize; 2],
    /// KL coefficient.
    pub beta: f64,
    /// KL floor in nats per step; 0 disables the floor.
    pub free_bits: f64,
}

impl Default for WorldModelConfig {
    fn default() -> Self {
        Self {
            obs: ObsLayout::Image { size: 16 },
            action_dim: 3,
            deter_dim: 128,
            stoch_dim: 16,
            hidden: 128,
            feat_dim: 128,
            conv_channels: [16, 32],
            beta: 1.0,
            free_bits: 1.0,
        }
    }
}

impl WorldModelConfig {
    pub fn state_dim(&self) -> usize {
        self.deter_dim + self.stoch_dim
    }
}

/// Deterministic-plus-stochastic latent state, off-tape.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentState<R: Real> {
    /// `[batch, deter_dim]`
    pub h: Tensor<R>,
    /// `[batch, stoch_dim]`
    pub z: Tensor<R>,
}

impl<R: Real> LatentState<R> {
    pub fn batch(&self) -> usize {
        self.h.rows()
    }

    /// s = [h, z].
    pub fn feature(&self) -> Tensor<R> {
        let b = self.h.rows();
        let (dh, dz) = (self.h.cols(), self.z.cols());
        let mut data = Vec::with_capacity(b * (dh + dz));
        for r in 0..b {
            data.extend_from_slice(&self.h.data()[r * dh..(r + 1) * dh]);
            data.extend_from_slice(&self.z.data()[r * dz..(r + 1) * dz]);
        }
        Tensor::from_rows(b, dh + dz, data)
    }

    pub fn all_finite(&self) -> bool {
        self.h.all_finite() && self.z.all_finite()
    }

    /// Single-row view of one batch entry.
    pub fn row(&self, b: usize) -> LatentState<R> {
        let (dh, dz) = (self.h.cols(), self.z.cols());
        LatentState {
            h: Tensor::from_rows(1, dh, self.h.data()[b * dh..(b + 1) * dh].to_vec()),
            z: Tensor::from_rows(1, dz, self.z.data()[b * dz..(b + 1) * dz].to_vec()),
        }
    }

    /// Stacks rows of several states into one batch.
    pub fn stack(states: &[LatentState<R>]) -> LatentState<R> {
        let dh = states[0].h.cols();
        let dz = states[0].z.cols();
        let total: usize = states.iter().map(|s| s.batch()).sum();
        let mut h = Vec::with_capacity(total * dh);
        let mut z = Vec::with_capacity(total * dz);
        for s in states {
            h.extend_from_slice(s.h.data());
            z.extend_from_slice(s.z.data());
        }
        LatentState {
            h: Tensor::from_rows(total, dh, h),
            z: Tensor::from_rows(total, dz, z),
        }
    }
}

/// On-tape latent state.
#[derive(Clone, Copy, Debug)]
pub struct LatentVars {
    pub h: Var,
    pub z: Var,
}

impl LatentVars {
    pub fn feature<R: Real>(&self, tape: &mut Tape<R>) -> Var {
        tape.concat_cols(self.h, self.z)
    }
}

enum Encoder {
    Vector(Mlp),
    Image {
        conv1: Conv2dLayer,
        conv2: Conv2dLayer,
        dense: crate::numerics::Linear,
    },
}

pub struct WorldModel<R: Real> {
    pub cfg: WorldModelConfig,
    pub params: ParamSet<R>,
    encoder: Encoder,
    cell: GruCell,
    posterior: Mlp,
    prior: Mlp,
    decoder: Mlp,
    reward: Mlp,
    init_h: ParamId,
    init_z: ParamId,
}

impl<R: Real> WorldModel<R> {
    pub fn new(cfg: WorldModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut ps = ParamSet::new();
        let encoder = match cfg.obs {
            ObsLayout::Vector { dim } => Encoder::Vector(Mlp::new(
                &mut ps,
                &mut rng,
                "enc",
                &[dim, cfg.hidden, cfg.feat_dim],
                Activation::Silu,
            )),
            ObsLayout::Image { size } => {
                assert!(size % 4 == 0, "image size must be divisible by 4");
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
                let conv1 = Conv2dLayer::new(&mut ps, &mut rng, "enc.conv1", meta1, Activation::Silu);
                let conv2 = Conv2dLayer::new(&mut ps, &mut rng, "enc.conv2", meta2, Activation::Silu);
                let flat = c2 * (size / 4) * (size / 4);
                let dense = crate::numerics::Linear::new(
                    &mut ps,
                    &mut rng,
                    "enc.dense",
                    flat,
                    cfg.feat_dim,
                    Activation::None,
                );
                Encoder::Image { conv1, conv2, dense }
            }
        };
        let cell = GruCell::new(
            &mut ps,
            &mut rng,
            "seq",
            cfg.stoch_dim + cfg.action_dim,
            cfg.deter_dim,
        );
        let posterior = Mlp::new(
            &mut ps,
            &mut rng,
            "post",
            &[cfg.deter_dim + cfg.feat_dim, cfg.hidden, 2 * cfg.stoch_dim],
            Activation::Silu,
        );
        let prior = Mlp::new(
            &mut ps,
            &mut rng,
            "prior",
            &[cfg.deter_dim, cfg.hidden, 2 * cfg.stoch_dim],
            Activation::Silu,
        );
        let decoder = Mlp::new(
            &mut ps,
            &mut rng,
            "dec",
            &[cfg.state_dim(), cfg.hidden, cfg.obs.obs_len()],
            Activation::Silu,
        );
        let reward = Mlp::new(
            &mut ps,
            &mut rng,
            "reward",
            &[cfg.state_dim(), cfg.hidden, 1],
            Activation::Silu,
        );
        let init_h = ps.add("init.h", Tensor::zeros(&[1, cfg.deter_dim]));
        let init_z = ps.add("init.z", Tensor::zeros(&[1, cfg.stoch_dim]));

        Self {
            cfg,
            params: ps,
            encoder,
            cell,
            posterior,
            prior,
            decoder,
            reward,
            init_h,
            init_z,
        }
    }

    /// Learned initial state broadcast to a batch.
    pub fn initial_state(&self, batch: usize) -> LatentState<R> {
        let h1 = &self.params.get(self.init_h).value;
        let z1 = &self.params.get(self.init_z).value;
        let mut h = Vec::with_capacity(batch * h1.len());
        let mut z = Vec::with_capacity(batch * z1.len());
        for _ in 0..batch {
            h.extend_from_slice(h1.data());
            z.extend_from_slice(z1.data());
        }
        LatentState {
            h: Tensor::from_rows(batch, h1.len(), h),
            z: Tensor::from_rows(batch, z1.len(), z),
        }
    }

    fn check_obs_width(&self, got: usize) {
        assert_eq!(
            got,
            self.cfg.obs.obs_len(),
            "observation width {} does not match configured layout {:?}",
            got,
            self.cfg.obs
        );
    }

    /// Encoder features, on tape. Image pixels are normalized from [0,255]
    /// to [-0.5, 0.5] here; the decoder predicts in the normalized space.
    pub fn encode_on_tape(&self, tape: &mut Tape<R>, bound: &Bound, obs: Var) -> Var {
        self.check_obs_width(tape.value(obs).cols());
        match &self.encoder {
            Encoder::Vector(mlp) => mlp.forward(tape, bound, obs),
            Encoder::Image { conv1, conv2, dense } => {
                let scaled = tape.scale(obs, 1.0 / 255.0);
                let centered = tape.offset(scaled, -0.5);
                let h1 = conv1.forward(tape, bound, centered);
                let h2 = conv2.forward(tape, bound, h1);
                dense.forward(tape, bound, h2)
            }
        }
    }

    fn normalize_target(&self, tape: &mut Tape<R>, obs: Var) -> Var {
        match self.cfg.obs {
            ObsLayout::Vector { .. } => obs,
            ObsLayout::Image { .. } => {
                let scaled = tape.scale(obs, 1.0 / 255.0);
                tape.offset(scaled, -0.5)
            }
        }
    }

    /// h_t from (h_{t-1}, z_{t-1}, a_{t-1}).
    pub fn sequence_step(
        &self,
        tape: &mut Tape<R>,
        bound: &Bound,
        prev: LatentVars,
        prev_action: Var,
    ) -> Var {
        assert_eq!(
            tape.value(prev_action).cols(),
            self.cfg.action_dim,
            "action width {} does not match unified dim {}",
            tape.value(prev_action).cols(),
            self.cfg.action_dim
        );
        let x = tape.concat_cols(prev.z, prev_action);
        self.cell.step(tape, bound, x, prev.h)
    }

    pub fn prior_head(&self, tape: &mut Tape<R>, bound: &Bound, h: Var) -> GaussianVars {
        let out = self.prior.forward(tape, bound, h);
        GaussianVars::from_head(tape, out, self.cfg.stoch_dim)
    }

    pub fn posterior_head(
        &self,
        tape: &mut Tape<R>,
        bound: &Bound,
        h: Var,
        feat: Var,
    ) -> GaussianVars {
        let joint = tape.concat_cols(h, feat);
        let out = self.posterior.forward(tape, bound, joint);
        GaussianVars::from_head(tape, out, self.cfg.stoch_dim)
    }

    pub fn decode_on_tape(&self, tape: &mut Tape<R>, bound: &Bound, state: Var) -> Var {
        self.decoder.forward(tape, bound, state)
    }

    /// Reward mean at states; the reward distribution is a unit-variance
    /// Gaussian so this is its expectation.
    pub fn reward_head(&self, tape: &mut Tape<R>, bound: &Bound, state: Var) -> Var {
        self.reward.forward(tape, bound, state)
    }

    /// Filtering step: advance the recurrence with the previous action and
    /// condition on the new observation. `is_first` replaces the previous
    /// state with the learned initial state and zeroes the action.
    pub fn observe_step(
        &self,
        prev: &LatentState<R>,
        prev_action: &Tensor<R>,
        obs: &Tensor<R>,
        is_first: bool,
        rng: &mut ChaCha12Rng,
    ) -> (LatentState<R>, crate::numerics::DiagGaussian<R>, crate::numerics::DiagGaussian<R>) {
        self.check_obs_width(obs.cols());
        let batch = obs.rows();
        let mut tape: Tape<R> = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let (prev_state, action) = if is_first {
            let init = self.initial_state(batch);
            (init, Tensor::zeros(&[batch, self.cfg.action_dim]))
        } else {
            (prev.clone(), prev_action.clone())
        };
        let prev_vars = LatentVars {
            h: tape.constant(prev_state.h),
            z: tape.constant(prev_state.z),
        };
        let a = tape.constant(action);
        let h = self.sequence_step(&mut tape, &bound, prev_vars, a);
        let o = tape.constant(obs.clone());
        let feat = self.encode_on_tape(&mut tape, &bound, o);
        let post = self.posterior_head(&mut tape, &bound, h, feat);
        let prior = self.prior_head(&mut tape, &bound, h);
        let noise = crate::numerics::standard_normal::<R>(rng, &[batch, self.cfg.stoch_dim]);
        let z = post.sample_with(&mut tape, &noise);
        let state = LatentState {
            h: tape.value(h).clone(),
            z: tape.value(z).clone(),
        };
        assert!(state.all_finite(), "non-finite activations in observe_step");
        let post_stats = post.detach(&mut tape);
        let prior_stats = prior.detach(&mut tape);
        (state, prior_stats, post_stats)
    }

    /// Imagination step: advance the recurrence and draw z from the prior
    /// (no observation).
    pub fn imagine_step(
        &self,
        state: &LatentState<R>,
        action: &Tensor<R>,
        rng: &mut ChaCha12Rng,
    ) -> LatentState<R> {
        let batch = state.batch();
        let mut tape: Tape<R> = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let prev = LatentVars {
            h: tape.constant(state.h.clone()),
            z: tape.constant(state.z.clone()),
        };
        let a = tape.constant(action.clone());
        let h = self.sequence_step(&mut tape, &bound, prev, a);
        let prior = self.prior_head(&mut tape, &bound, h);
        let noise = crate::numerics::standard_normal::<R>(rng, &[batch, self.cfg.stoch_dim]);
        let z = prior.sample_with(&mut tape, &noise);
        let next = LatentState {
            h: tape.value(h).clone(),
            z: tape.value(z).clone(),
        };
        assert!(next.all_finite(), "non-finite activations in imagine_step");
        next
    }

    /// Decoded observation (normalized space for images).
    pub fn decode(&self, state: &LatentState<R>) -> Tensor<R> {
        let mut tape: Tape<R> = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let s = {
            let f = state.feature();
            tape.constant(f)
        };
        let out = self.decode_on_tape(&mut tape, &bound, s);
        tape.value(out).clone()
    }

    /// Predicted reward at states.
    pub fn predict_reward(&self, state: &LatentState<R>) -> Tensor<R> {
        let mut tape: Tape<R> = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let s = {
            let f = state.feature();
            tape.constant(f)
        };
        let out = self.reward_head(&mut tape, &bound, s);
        tape.value(out).clone()
    }

    /// Deterministic pre-posterior feature embedding of one observation.
    pub fn encode_obs(&self, obs: &Tensor<R>) -> Tensor<R> {
        let mut tape: Tape<R> = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let o = tape.constant(obs.clone());
        let feat = self.encode_on_tape(&mut tape, &bound, o);
        tape.value(feat).clone()
    }

    pub fn cast<S: Real>(&self) -> WorldModel<S> {
        let mut out = WorldModel::new(self.cfg.clone(), 0);
        out.params = self.params.cast();
        out
    }

    /// Rebuilds a model around restored parameters. Names must match the
    /// architecture implied by `cfg` exactly.
    pub fn from_params(cfg: WorldModelConfig, params: ParamSet<R>) -> Self {
        let mut wm = Self::new(cfg, 0);
        assert_eq!(
            wm.params.len(),
            params.len(),
            "restored parameter count does not match architecture"
        );
        for (a, b) in wm.params.iter().zip(params.iter()) {
            assert_eq!(a.name, b.name, "restored parameter order mismatch");
            assert_eq!(a.value.shape(), b.value.shape(), "shape mismatch for {}", a.name);
        }
        wm.params = params;
        wm
    }
}

/// Per-step pre-drawn posterior noise for a sequence rollout.
pub struct SeqNoise<R: Real> {
    pub z: Vec<Tensor<R>>,
}

impl<R: Real> SeqNoise<R> {
    pub fn draw(rng: &mut ChaCha12Rng, len: usize, batch: usize, stoch: usize) -> Self {
        Self {
            z: (0..len)
                .map(|_| crate::numerics::standard_normal(rng, &[batch, stoch]))
                .collect(),
        }
    }
}

/// Everything the sequence loss exposes on its tape.
pub struct WmLossVars {
    pub total: Var,
    pub recon: Var,
    /// Floored KL term (the one entering the loss).
    pub kl: Var,
    /// Unfloored mean KL, for collapse diagnostics.
    pub kl_raw: Var,
    pub reward_nll: Var,
    /// Posterior state per timestep, time-major (imagination starts).
    pub posterior_states: Vec<LatentVars>,
}

/// Sequence loss of the world model on a batch:
/// mean over slots of [recon NLL + beta * max(KL, free_bits)] plus the
/// reward NLL averaged over reward-carrying rows.
pub fn wm_loss_on_tape<R: Real>(
    wm: &WorldModel<R>,
    tape: &mut Tape<R>,
    bound: &Bound,
    batch: &SeqBatch<R>,
    beta: f64,
    free_bits: f64,
    noise: &SeqNoise<R>,
) -> WmLossVars {
    assert!(beta >= 0.0, "beta must be nonnegative");
    let b = batch.batch;
    let len = batch.len;
    let stoch = wm.cfg.stoch_dim;
    let deter = wm.cfg.deter_dim;
    let a_dim = wm.cfg.action_dim;

    let obs_all = tape.constant(batch.obs.clone());
    let feat_all = wm.encode_on_tape(tape, bound, obs_all);

    let init_h1 = bound.var(wm.init_h);
    let init_z1 = bound.var(wm.init_z);
    let init_h = tape.broadcast_rows(init_h1, b);
    let init_z = tape.broadcast_rows(init_z1, b);

    let mut h = init_h;
    let mut z = init_z;
    let mut kl_rows: Vec<Var> = Vec::with_capacity(len);
    let mut states: Vec<LatentVars> = Vec::with_capacity(len);

    for t in 0..len {
        // Reset masking: keep previous state where the slot continues an
        // episode, substitute the learned initial state at is_first slots.
        let mask: Vec<R> = (0..b)
            .map(|bb| {
                if batch.is_first[t * b + bb] {
                    R::ONE
                } else {
                    R::ZERO
                }
            })
            .collect();
        let expand = |tape: &mut Tape<R>, dim: usize, invert: bool| {
            let mut data = Vec::with_capacity(b * dim);
            for &m in &mask {
                let v = if invert { R::ONE - m } else { m };
                for _ in 0..dim {
                    data.push(v);
                }
            }
            tape.constant(Tensor::from_rows(b, dim, data))
        };

        let keep_h = expand(tape, deter, true);
        let take_h = expand(tape, deter, false);
        let keep_z = expand(tape, stoch, true);
        let take_z = expand(tape, stoch, false);
        let keep_a = expand(tape, a_dim, true);

        let h_kept = tape.mul(h, keep_h);
        let h_init = tape.mul(init_h, take_h);
        let h_prev = tape.add(h_kept, h_init);
        let z_kept = tape.mul(z, keep_z);
        let z_init = tape.mul(init_z, take_z);
        let z_prev = tape.add(z_kept, z_init);

        let action_rows = tape.constant(slice_slot(&batch.actions, t, b, a_dim));
        let action = tape.mul(action_rows, keep_a);

        let prev = LatentVars { h: h_prev, z: z_prev };
        let h_t = wm.sequence_step(tape, bound, prev, action);
        let feat_t = tape.slice_rows(feat_all, t * b, b);
        let post = wm.posterior_head(tape, bound, h_t, feat_t);
        let prior = wm.prior_head(tape, bound, h_t);
        let z_t = post.sample_with(tape, &noise.z[t]);

        kl_rows.push(post.kl(tape, &prior));
        states.push(LatentVars { h: h_t, z: z_t });
        h = h_t;
        z = z_t;
    }

    // Batched heads over all timesteps.
    let state_rows: Vec<Var> = states
        .iter()
        .map(|s| tape.concat_cols(s.h, s.z))
        .collect();
    let all_states = tape.concat_rows(&state_rows);
    let decoded = wm.decode_on_tape(tape, bound, all_states);
    let target = {
        let raw = tape.constant(batch.obs.clone());
        wm.normalize_target(tape, raw)
    };
    let diff = tape.sub(decoded, target);
    let sq = tape.square(diff);
    let half_sq = tape.scale(sq, 0.5);
    let shifted = tape.offset(half_sq, 0.5 * LN_2PI);
    let recon_rows = tape.row_sum(shifted);
    let recon = tape.mean_all(recon_rows);

    let kl_all = tape.concat_rows(&kl_rows);
    let kl_raw = tape.mean_all(kl_all);
    let kl_floored_rows = tape.clamp_min(kl_all, free_bits);
    let kl = tape.mean_all(kl_floored_rows);

    // Reward NLL over unmasked (reward-carrying) rows, normalized by their
    // count so the per-sample scale does not depend on the mix ratio.
    let unmasked = batch.reward_mask.iter().filter(|&&m| m).count();
    let reward_nll = if batch.has_rewards && unmasked > 0 {
        let pred = wm.reward_head(tape, bound, all_states);
        let target_r = tape.constant(batch.rewards.clone());
        let rdiff = tape.sub(pred, target_r);
        let rsq = tape.square(rdiff);
        let rhalf = tape.scale(rsq, 0.5);
        let rnll = tape.offset(rhalf, 0.5 * LN_2PI);
        let mut mask = Vec::with_capacity(len * b);
        for _t in 0..len {
            for bb in 0..b {
                mask.push(if batch.reward_mask[bb] { R::ONE } else { R::ZERO });
            }
        }
        let mask_t = tape.constant(Tensor::from_rows(len * b, 1, mask));
        let masked = tape.mul(rnll, mask_t);
        let total = tape.sum_all(masked);
        tape.scale(total, 1.0 / (unmasked * len) as f64)
    } else {
        tape.constant(Tensor::scalar(R::ZERO))
    };

    let kl_term = tape.scale(kl, beta);
    let partial = tape.add(recon, kl_term);
    let total = tape.add(partial, reward_nll);

    WmLossVars {
        total,
        recon,
        kl,
        kl_raw,
        reward_nll,
        posterior_states: states,
    }
}

fn slice_slot<R: Real>(t: &Tensor<R>, step: usize, batch: usize, cols: usize) -> Tensor<R> {
    Tensor::from_rows(
        batch,
        cols,
        t.data()[step * batch * cols..(step + 1) * batch * cols].to_vec(),
    )
}

/// World-model encoder plus the checksum of the checkpoint it came from;
/// this is what retrieval indexes are built against.
pub struct EncoderHandle<'a> {
    pub wm: &'a WorldModel<f32>,
    pub checksum: [u8; 32],
}

impl ObsEncoder for EncoderHandle<'_> {
    fn embed(&self, obs: &[f32]) -> Vec<f32> {
        let t = Tensor::from_rows(1, obs.len(), obs.to_vec());
        self.wm.encode_obs(&t).data().to_vec()
    }
    fn embed_width(&self) -> usize {
        self.wm.cfg.feat_dim
    }
    fn weight_checksum(&self) -> [u8; 32] {
        self.checksum
    }
}
