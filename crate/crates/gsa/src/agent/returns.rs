//! Lambda-returns by backward recursion.

/// V^l_t = r_t + gamma * [(1 - lambda) v_{t+1} + lambda V^l_{t+1}] for
/// t < H, bootstrapped with V^l_H = v_H. `rewards` has length H (reward
/// received on arrival at state t+1), `values` length H+1.
pub fn lambda_returns(rewards: &[f64], values: &[f64], gamma: f64, lam: f64) -> Vec<f64> {
    assert!((0.0..1.0).contains(&gamma), "gamma must be in [0,1)");
    assert!((0.0..=1.0).contains(&lam), "lambda must be in [0,1]");
    assert_eq!(
        values.len(),
        rewards.len() + 1,
        "values must have one more entry than rewards ({} vs {})",
        values.len(),
        rewards.len()
    );
    let h = rewards.len();
    let mut out = vec![0.0; h];
    let mut next = values[h];
    for t in (0..h).rev() {
        let v = rewards[t] + gamma * ((1.0 - lam) * values[t + 1] + lam * next);
        out[t] = v;
        next = v;
    }
    out
}
