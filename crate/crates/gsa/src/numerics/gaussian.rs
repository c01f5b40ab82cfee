//! Diagonal Gaussians, plain and on-tape.
//!
//! The on-tape variant (`GaussianVars`) carries mean/log-std nodes so KL,
//! log-likelihood, sampling and entropy stay differentiable; the plain
//! variant (`DiagGaussian`) is for action selection and reporting.

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use super::tape::{Tape, Var};
use super::tensor::{Real, Tensor};

pub const LN_2PI: f64 = 1.8378770664093453;

/// Bounds applied to every learned log-std head.
pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;

/// Plain diagonal Gaussian.
#[derive(Clone, Debug)]
pub struct DiagGaussian<R: Real> {
    pub mean: Tensor<R>,
    pub log_std: Tensor<R>,
}

impl<R: Real> DiagGaussian<R> {
    pub fn new(mean: Tensor<R>, log_std: Tensor<R>) -> Self {
        assert_eq!(mean.shape(), log_std.shape(), "mean/log_std shape mismatch");
        assert!(log_std.all_finite(), "non-finite log_std");
        Self { mean, log_std }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Reparameterized sample: mean + exp(log_std) * noise.
    pub fn sample(&self, rng: &mut ChaCha12Rng) -> Tensor<R> {
        let noise = standard_normal::<R>(rng, self.mean.shape());
        let mut out = self.mean.clone();
        for ((o, &ls), &n) in out
            .data_mut()
            .iter_mut()
            .zip(self.log_std.data())
            .zip(noise.data())
        {
            *o += ls.exp() * n;
        }
        out
    }

    /// Log density at `x`, summed over dimensions.
    pub fn log_prob(&self, x: &Tensor<R>) -> R {
        assert_eq!(x.shape(), self.mean.shape());
        let mut total = R::ZERO;
        let half = R::from_f64(0.5);
        let c = R::from_f64(LN_2PI);
        for ((&xi, &mu), &ls) in x
            .data()
            .iter()
            .zip(self.mean.data())
            .zip(self.log_std.data())
        {
            let z = (xi - mu) / ls.exp();
            total += -(half * z * z) - ls - half * c;
        }
        total
    }

    /// Closed-form KL(self || other), summed over dimensions.
    pub fn kl(&self, other: &Self) -> R {
        assert_eq!(
            self.mean.len(),
            other.mean.len(),
            "kl dimensionality mismatch: {} vs {}",
            self.mean.len(),
            other.mean.len()
        );
        let half = R::from_f64(0.5);
        let mut total = R::ZERO;
        for i in 0..self.mean.len() {
            let (mq, lq) = (self.mean.data()[i], self.log_std.data()[i]);
            let (mp, lp) = (other.mean.data()[i], other.log_std.data()[i]);
            let var_q = (lq + lq).exp();
            let var_p = (lp + lp).exp();
            let d = mq - mp;
            total += lp - lq + half * ((var_q + d * d) / var_p) - half;
        }
        total
    }
}

/// Standard-normal tensor drawn via Box-Muller from a seeded stream.
pub fn standard_normal<R: Real>(rng: &mut ChaCha12Rng, shape: &[usize]) -> Tensor<R> {
    let n = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen::<f64>();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        data.push(R::from_f64(r * theta.cos()));
        if data.len() < n {
            data.push(R::from_f64(r * theta.sin()));
        }
    }
    Tensor::new(shape.to_vec(), data)
}

/// Diagonal Gaussian whose statistics live on a tape. Rows are batch
/// entries, columns are dimensions.
#[derive(Clone, Copy, Debug)]
pub struct GaussianVars {
    pub mean: Var,
    pub log_std: Var,
}

impl GaussianVars {
    /// Split the last layer's output `[.., 2d]` into mean and clamped
    /// log-std halves.
    pub fn from_head<R: Real>(tape: &mut Tape<R>, head_out: Var, dim: usize) -> Self {
        let mean = tape.slice_cols(head_out, 0, dim);
        let raw = tape.slice_cols(head_out, dim, dim);
        let log_std = tape.clamp(raw, LOG_STD_MIN, LOG_STD_MAX);
        Self { mean, log_std }
    }

    pub fn with_fixed_std<R: Real>(tape: &mut Tape<R>, mean: Var, log_std_value: f64) -> Self {
        let shape = tape.value(mean).shape().to_vec();
        let log_std = tape.constant(Tensor::filled(&shape, R::from_f64(log_std_value)));
        Self { mean, log_std }
    }

    /// Reparameterized sample with externally supplied noise.
    pub fn sample_with<R: Real>(&self, tape: &mut Tape<R>, noise: &Tensor<R>) -> Var {
        let std = tape.exp(self.log_std);
        let eps = tape.constant(noise.clone());
        let scaled = tape.mul(std, eps);
        tape.add(self.mean, scaled)
    }

    /// Per-row log density of `x`: `[m, d] -> [m, 1]`.
    pub fn log_prob<R: Real>(&self, tape: &mut Tape<R>, x: Var) -> Var {
        let neg_mean = tape.neg(self.mean);
        let diff = tape.add(x, neg_mean);
        let std = tape.exp(self.log_std);
        let neg_two_ls = tape.scale(self.log_std, -2.0);
        let inv_var = tape.exp(neg_two_ls);
        let _ = std;
        let sq = tape.square(diff);
        let z2 = tape.mul(sq, inv_var);
        let half_z2 = tape.scale(z2, -0.5);
        let neg_ls = tape.neg(self.log_std);
        let per_dim = tape.add(half_z2, neg_ls);
        let shifted = tape.offset(per_dim, -0.5 * LN_2PI);
        tape.row_sum(shifted)
    }

    /// Per-row KL(self || other): `[m, 1]`.
    pub fn kl<R: Real>(&self, tape: &mut Tape<R>, other: &GaussianVars) -> Var {
        let dq = tape.value(self.mean).cols();
        let dp = tape.value(other.mean).cols();
        assert_eq!(dq, dp, "kl dimensionality mismatch: {dq} vs {dp}");
        // lp - lq + 0.5 * (exp(2 lq) + (mq - mp)^2) / exp(2 lp) - 0.5
        let ls_diff = tape.sub(other.log_std, self.log_std);
        let two_lq = tape.scale(self.log_std, 2.0);
        let var_q = tape.exp(two_lq);
        let mean_diff = tape.sub(self.mean, other.mean);
        let d2 = tape.square(mean_diff);
        let num = tape.add(var_q, d2);
        let neg_two_lp = tape.scale(other.log_std, -2.0);
        let inv_var_p = tape.exp(neg_two_lp);
        let ratio = tape.mul(num, inv_var_p);
        let half_ratio = tape.scale(ratio, 0.5);
        let sum = tape.add(ls_diff, half_ratio);
        let per_dim = tape.offset(sum, -0.5);
        tape.row_sum(per_dim)
    }

    /// Analytic per-row entropy: sum(log_std + 0.5 ln(2 pi e)).
    pub fn entropy<R: Real>(&self, tape: &mut Tape<R>) -> Var {
        let shifted = tape.offset(self.log_std, 0.5 * (LN_2PI + 1.0));
        tape.row_sum(shifted)
    }

    pub fn detach<R: Real>(&self, tape: &mut Tape<R>) -> DiagGaussian<R> {
        DiagGaussian::new(tape.value(self.mean).clone(), tape.value(self.log_std).clone())
    }
}

/// Per-row log|d tanh(u)/du| correction for tanh-squashed Gaussians,
/// computed stably as 2 (ln 2 - u - softplus(-2u)) per dimension.
pub fn tanh_log_det<R: Real>(tape: &mut Tape<R>, pre_tanh: Var) -> Var {
    let neg2u = tape.scale(pre_tanh, -2.0);
    let sp = tape.softplus(neg2u);
    let upsp = tape.add(pre_tanh, sp);
    let neg = tape.neg(upsp);
    let per_dim = tape.offset(neg, std::f64::consts::LN_2);
    let doubled = tape.scale(per_dim, 2.0);
    tape.row_sum(doubled)
}
