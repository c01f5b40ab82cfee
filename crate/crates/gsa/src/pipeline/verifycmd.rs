//! The verification battery behind `gsa verify`: every check prints one
//! pass/fail line; any failure makes the command exit nonzero.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::agent::lambda_returns;
use crate::datastore::index::TruncEncoder;
use crate::numerics::{adam_step, AdamConfig, DiagGaussian, ParamSet, Tensor};
use crate::verify::{
    check_actor_critic_losses, check_bc_loss, check_reparam_identity, check_wm_loss,
    lambda_return_oracle, prop1_harness, prop3_harness, retrieval_oracle_check,
    sliced_wasserstein,
};
use crate::worldmodel::ObsLayout;

pub struct CheckResult {
    pub name: &'static str,
    pub pass: bool,
    pub detail: String,
}

fn check(name: &'static str, pass: bool, detail: String) -> CheckResult {
    CheckResult { name, pass, detail }
}

const GRAD_TOL: f64 = 1e-4;

pub fn run_battery() -> Vec<CheckResult> {
    let mut out = Vec::new();

    // Gradient suite.
    let e = check_wm_loss(ObsLayout::Vector { dim: 5 }, 1.0, 1.0, true);
    out.push(check(
        "grad_wm_vector_free_bits",
        e < GRAD_TOL,
        format!("max rel err {e:.3e} (bound {GRAD_TOL:.0e})"),
    ));
    let e = check_wm_loss(ObsLayout::Vector { dim: 5 }, 1.0, 0.0, true);
    out.push(check(
        "grad_wm_vector_no_floor",
        e < GRAD_TOL,
        format!("max rel err {e:.3e}"),
    ));
    let e = check_wm_loss(ObsLayout::Image { size: 8 }, 1.0, 1.0, true);
    out.push(check(
        "grad_wm_image",
        e < GRAD_TOL,
        format!("max rel err {e:.3e}"),
    ));
    let (actor_err, critic_err) = check_actor_critic_losses();
    out.push(check(
        "grad_actor_through_dynamics",
        actor_err < GRAD_TOL,
        format!("max rel err {actor_err:.3e}"),
    ));
    out.push(check(
        "grad_critic_nll",
        critic_err < GRAD_TOL,
        format!("max rel err {critic_err:.3e}"),
    ));
    let e = check_bc_loss(ObsLayout::Vector { dim: 4 });
    out.push(check("grad_bc_vector", e < GRAD_TOL, format!("max rel err {e:.3e}")));
    let e = check_bc_loss(ObsLayout::Image { size: 8 });
    out.push(check("grad_bc_image", e < GRAD_TOL, format!("max rel err {e:.3e}")));
    let e = check_reparam_identity();
    out.push(check(
        "grad_reparam_identity",
        e < 1e-8,
        format!("max |d sample/d mean - 1| = {e:.3e}"),
    ));

    // Optimizer against a scalar reference recurrence.
    out.push(adam_oracle_check());

    // Closed-form KL against Monte Carlo.
    out.push(kl_monte_carlo_check());

    // Lambda-return recursion against the forward-expansion oracle.
    out.push(lambda_oracle_check());

    // Exact retrieval against the exhaustive scan.
    let mut worst: Option<String> = None;
    for seed in 0..5 {
        if let Err(e) = retrieval_oracle_check(1000, 20, 256, seed) {
            worst = Some(e);
            break;
        }
    }
    out.push(check(
        "retrieval_matches_brute_force",
        worst.is_none(),
        worst.unwrap_or_else(|| "1000 trajectories, 20 queries x 5 seeds, k=256".into()),
    ));

    // Retrieval reduces mean embedding distance (strictly, by construction).
    let p1 = prop1_harness(17);
    out.push(check(
        "retrieval_reduces_distance",
        p1.pass,
        format!(
            "{}/{} constructed stores strict, equality case checked: {}",
            p1.strict_cases, p1.cases, p1.equality_case_checked
        ),
    ));

    // Guidance improvement bound on tabular MDPs.
    let p3 = prop3_harness(23);
    out.push(check(
        "guidance_improvement_bound",
        p3.pass,
        format!(
            "{} checks, {} violations, worst margin {:.3e}",
            p3.checks, p3.violations, p3.worst_margin
        ),
    ));

    // Sliced Wasserstein estimator self-checks.
    out.push(wasserstein_checks());

    out
}

fn adam_oracle_check() -> CheckResult {
    let cfg = AdamConfig {
        lr: 1e-4,
        ..AdamConfig::default()
    };
    let mut ps: ParamSet<f64> = ParamSet::new();
    ps.add("x", Tensor::scalar(0.0));
    let mut x = 0.0f64;
    let (mut m, mut v) = (0.0f64, 0.0f64);
    let mut worst = 0.0f64;
    for t in 1..=25 {
        let g = x - 3.0;
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
        x -= cfg.lr * (m / (1.0 - cfg.beta1.powi(t))) / ((v / (1.0 - cfg.beta2.powi(t))).sqrt() + cfg.eps);

        let g_t = ps.by_name("x").unwrap().value.item() - 3.0;
        adam_step(&mut ps, &[Tensor::scalar(g_t)], &cfg).unwrap();
        worst = worst.max((ps.by_name("x").unwrap().value.item() - x).abs());
    }
    check(
        "adam_scalar_oracle",
        worst < 1e-12,
        format!("max deviation {worst:.3e} over 25 steps"),
    )
}

fn kl_monte_carlo_check() -> CheckResult {
    let mut rng = ChaCha12Rng::seed_from_u64(71);
    let dim = 8;
    let q: DiagGaussian<f64> = DiagGaussian::new(
        crate::numerics::standard_normal(&mut rng, &[1, dim]),
        crate::numerics::standard_normal::<f64>(&mut rng, &[1, dim]).map(|x| x * 0.3),
    );
    let p = DiagGaussian::new(
        crate::numerics::standard_normal(&mut rng, &[1, dim]),
        crate::numerics::standard_normal::<f64>(&mut rng, &[1, dim]).map(|x| x * 0.3),
    );
    let analytic = q.kl(&p);
    let n = 100_000;
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..n {
        let x = q.sample(&mut rng);
        let v = q.log_prob(&x) - p.log_prob(&x);
        sum += v;
        sum_sq += v * v;
    }
    let mc = sum / n as f64;
    let se = (((sum_sq / n as f64) - mc * mc).max(0.0) / n as f64).sqrt();
    check(
        "kl_monte_carlo",
        (analytic - mc).abs() <= 3.0 * se,
        format!("analytic {analytic:.5} vs mc {mc:.5} +- {:.5}", 3.0 * se),
    )
}

fn lambda_oracle_check() -> CheckResult {
    let mut rng = ChaCha12Rng::seed_from_u64(41);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let h = 16;
        let rewards: Vec<f64> = (0..h).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let values: Vec<f64> = (0..=h).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let a = lambda_returns(&rewards, &values, 0.99, 0.95);
        let b = lambda_return_oracle(&rewards, &values, 0.99, 0.95);
        for (x, y) in a.iter().zip(&b) {
            worst = worst.max((x - y).abs());
        }
    }
    // Boundary cases and the single-step hand value.
    let rewards = [0.25, -0.5];
    let values = [0.1, 0.2, 0.3];
    for lam in [0.0, 1.0] {
        let a = lambda_returns(&rewards, &values, 0.9, lam);
        let b = lambda_return_oracle(&rewards, &values, 0.9, lam);
        for (x, y) in a.iter().zip(&b) {
            worst = worst.max((x - y).abs());
        }
    }
    let hand = lambda_returns(&[1.0], &[0.0, 2.0], 0.99, 0.95)[0];
    worst = worst.max((hand - 2.98).abs());
    check(
        "lambda_return_oracle",
        worst < 1e-10,
        format!("max |recursion - expansion| = {worst:.3e} over 100 instances + boundaries"),
    )
}

fn wasserstein_checks() -> CheckResult {
    let mut rng = ChaCha12Rng::seed_from_u64(5);
    let x: Vec<f64> = (0..800).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let identical = sliced_wasserstein(&x, &x, 8, 32, 7).estimate;

    let a = vec![0.0; 40];
    let b = vec![2.5; 40];
    let translated = sliced_wasserstein(&a, &b, 1, 8, 3).estimate;

    let sym_a = sliced_wasserstein(&x, &b_repeat(&x), 8, 16, 9).estimate;
    let sym_b = sliced_wasserstein(&b_repeat(&x), &x, 8, 16, 9).estimate;

    let pass = identical == 0.0 && (translated - 2.5).abs() < 1e-12 && (sym_a - sym_b).abs() < 1e-9;
    check(
        "sliced_wasserstein_estimator",
        pass,
        format!(
            "identical {identical:.1e}, translation err {:.1e}, asymmetry {:.1e}",
            (translated - 2.5).abs(),
            (sym_a - sym_b).abs()
        ),
    )
}

fn b_repeat(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| v * 0.8 + 0.1).collect()
}

/// Runs the battery and verifies the report structure itself: every check
/// name appears exactly once.
pub fn battery_names_unique(results: &[CheckResult]) -> bool {
    let mut names: Vec<&str> = results.iter().map(|r| r.name).collect();
    names.sort_unstable();
    names.windows(2).all(|w| w[0] != w[1])
}

// The truncation encoder is deliberately used by `retrieval_oracle_check`;
// referencing it here keeps the dependency explicit.
#[allow(dead_code)]
fn _anchor(_: TruncEncoder) {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn battery_passes_and_names_are_unique() {
        let results = run_battery();
        assert!(battery_names_unique(&results));
        for r in &results {
            assert!(r.pass, "{}: {}", r.name, r.detail);
        }
    }
}
