//! Exact policy evaluation and the guidance improvement bound on random
//! tabular MDPs.
//!
//! Run with: cargo run --release --example tabular_guarantees

use gsa::envs::tabular::{
    exact_advantage, exact_policy_eval, mix_policies, random_mdp, TabularPolicy,
};
use gsa::verify::{prop1_harness, prop3_harness};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

fn main() {
    let mut rng = ChaCha12Rng::seed_from_u64(11);
    let mdp = random_mdp(&mut rng, 5, 2, 0.9);
    let explore = TabularPolicy::random(&mut rng, 5, 2);
    let adv = exact_advantage(&mdp, &explore).unwrap();
    let greedy: Vec<usize> = (0..5)
        .map(|s| if adv[s * 2] >= adv[s * 2 + 1] { 0 } else { 1 })
        .collect();
    let guide = TabularPolicy::deterministic(&greedy, 2);
    let delta = (0..5)
        .map(|s| adv[s * 2 + greedy[s]])
        .fold(f64::INFINITY, f64::min);
    let eta_e = exact_policy_eval(&mdp, &explore).unwrap();

    println!("improvement of the per-state mixture over the exploration policy");
    println!("(bound: alpha * delta / (1 - gamma), delta = {delta:.4}):");
    println!("alpha   improvement   bound      margin");
    for i in 1..=9 {
        let alpha = i as f64 / 10.0;
        let mixed = mix_policies(&explore, &guide, alpha);
        let gain = exact_policy_eval(&mdp, &mixed).unwrap() - eta_e;
        let bound = alpha * delta / (1.0 - mdp.gamma);
        println!("{alpha:.1}     {gain:>9.4}    {bound:>8.4}   {:.2e}", gain - bound);
    }

    let p1 = prop1_harness(3);
    println!(
        "\nretrieval distance check: {}/{} constructed stores strict",
        p1.strict_cases, p1.cases
    );
    let p3 = prop3_harness(4);
    println!(
        "mixture bound sweep: {} checks, {} violations, worst margin {:.2e}",
        p3.checks, p3.violations, p3.worst_margin
    );
}
