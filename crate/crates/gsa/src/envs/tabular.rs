//! Exact tabular MDPs: policy evaluation by linear solve, advantages, and
//! per-state policy mixtures.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MdpError {
    #[error("singular evaluation system (pivot {0:.3e})")]
    Singular(f64),
    #[error("transition rows must sum to 1 (state {state}, action {action}: {sum})")]
    BadTransition { state: usize, action: usize, sum: f64 },
}

/// Finite MDP with dense transition tensor P[s][a][s'] and reward R[s][a].
#[derive(Clone, Debug)]
pub struct TabularMdp {
    pub n_states: usize,
    pub n_actions: usize,
    /// Row-major [s, a, s'].
    pub transition: Vec<f64>,
    /// Row-major [s, a].
    pub reward: Vec<f64>,
    pub start: Vec<f64>,
    pub gamma: f64,
}

impl TabularMdp {
    pub fn p(&self, s: usize, a: usize, s2: usize) -> f64 {
        self.transition[(s * self.n_actions + a) * self.n_states + s2]
    }

    pub fn r(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.n_actions + a]
    }

    pub fn validate(&self) -> Result<(), MdpError> {
        for s in 0..self.n_states {
            for a in 0..self.n_actions {
                let sum: f64 = (0..self.n_states).map(|s2| self.p(s, a, s2)).sum();
                if (sum - 1.0).abs() > 1e-12 {
                    return Err(MdpError::BadTransition { state: s, action: a, sum });
                }
            }
        }
        Ok(())
    }
}

/// Stochastic policy, row-major [s, a].
#[derive(Clone, Debug, PartialEq)]
pub struct TabularPolicy {
    pub probs: Vec<f64>,
    pub n_states: usize,
    pub n_actions: usize,
}

impl TabularPolicy {
    pub fn p(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }

    pub fn uniform(n_states: usize, n_actions: usize) -> Self {
        Self {
            probs: vec![1.0 / n_actions as f64; n_states * n_actions],
            n_states,
            n_actions,
        }
    }

    pub fn random(rng: &mut ChaCha12Rng, n_states: usize, n_actions: usize) -> Self {
        let mut probs = vec![0.0; n_states * n_actions];
        for s in 0..n_states {
            let mut total = 0.0;
            for a in 0..n_actions {
                let w: f64 = rng.gen_range(0.05..1.0);
                probs[s * n_actions + a] = w;
                total += w;
            }
            for a in 0..n_actions {
                probs[s * n_actions + a] /= total;
            }
        }
        Self {
            probs,
            n_states,
            n_actions,
        }
    }

    /// Deterministic policy taking `actions[s]` in state s.
    pub fn deterministic(actions: &[usize], n_actions: usize) -> Self {
        let n_states = actions.len();
        let mut probs = vec![0.0; n_states * n_actions];
        for (s, &a) in actions.iter().enumerate() {
            probs[s * n_actions + a] = 1.0;
        }
        Self {
            probs,
            n_states,
            n_actions,
        }
    }
}

/// Solve A x = b by Gaussian elimination with partial pivoting.
fn solve_linear(mut a: Vec<f64>, mut b: Vec<f64>, n: usize) -> Result<Vec<f64>, MdpError> {
    for col in 0..n {
        let mut pivot = col;
        for row in col + 1..n {
            if a[row * n + col].abs() > a[pivot * n + col].abs() {
                pivot = row;
            }
        }
        let p = a[pivot * n + col];
        if p.abs() < 1e-12 {
            return Err(MdpError::Singular(p.abs()));
        }
        if pivot != col {
            for k in 0..n {
                a.swap(col * n + k, pivot * n + k);
            }
            b.swap(col, pivot);
        }
        for row in col + 1..n {
            let f = a[row * n + col] / a[col * n + col];
            if f == 0.0 {
                continue;
            }
            for k in col..n {
                a[row * n + k] -= f * a[col * n + k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for k in row + 1..n {
            acc -= a[row * n + k] * x[k];
        }
        x[row] = acc / a[row * n + row];
    }
    Ok(x)
}

/// State values V_pi from the Bellman evaluation equations
/// (I - gamma P_pi) V = R_pi.
pub fn policy_state_values(mdp: &TabularMdp, policy: &TabularPolicy) -> Result<Vec<f64>, MdpError> {
    let n = mdp.n_states;
    let mut a = vec![0.0; n * n];
    let mut b = vec![0.0; n];
    for s in 0..n {
        a[s * n + s] = 1.0;
        for act in 0..mdp.n_actions {
            let pa = policy.p(s, act);
            b[s] += pa * mdp.r(s, act);
            for s2 in 0..n {
                a[s * n + s2] -= mdp.gamma * pa * mdp.p(s, act, s2);
            }
        }
    }
    solve_linear(a, b, n)
}

/// Expected discounted return from the start distribution.
pub fn exact_policy_eval(mdp: &TabularMdp, policy: &TabularPolicy) -> Result<f64, MdpError> {
    let v = policy_state_values(mdp, policy)?;
    Ok(mdp.start.iter().zip(&v).map(|(p, v)| p * v).sum())
}

/// Advantage A_pi(s, a) = Q_pi(s, a) - V_pi(s).
pub fn exact_advantage(mdp: &TabularMdp, policy: &TabularPolicy) -> Result<Vec<f64>, MdpError> {
    let v = policy_state_values(mdp, policy)?;
    let mut adv = vec![0.0; mdp.n_states * mdp.n_actions];
    for s in 0..mdp.n_states {
        for a in 0..mdp.n_actions {
            let mut q = mdp.r(s, a);
            for s2 in 0..mdp.n_states {
                q += mdp.gamma * mdp.p(s, a, s2) * v[s2];
            }
            adv[s * mdp.n_actions + a] = q - v[s];
        }
    }
    Ok(adv)
}

/// Per-state convex combination (1 - alpha) pe + alpha pg.
pub fn mix_policies(pe: &TabularPolicy, pg: &TabularPolicy, alpha: f64) -> TabularPolicy {
    assert!((0.0..=1.0).contains(&alpha), "alpha must be in [0,1]");
    assert_eq!(pe.n_states, pg.n_states);
    assert_eq!(pe.n_actions, pg.n_actions);
    TabularPolicy {
        probs: pe
            .probs
            .iter()
            .zip(&pg.probs)
            .map(|(&e, &g)| (1.0 - alpha) * e + alpha * g)
            .collect(),
        n_states: pe.n_states,
        n_actions: pe.n_actions,
    }
}

/// Random dense ergodic MDP with rewards in [0, 1].
pub fn random_mdp(rng: &mut ChaCha12Rng, n_states: usize, n_actions: usize, gamma: f64) -> TabularMdp {
    let mut transition = vec![0.0; n_states * n_actions * n_states];
    for s in 0..n_states {
        for a in 0..n_actions {
            let row = (s * n_actions + a) * n_states;
            let mut total = 0.0;
            for s2 in 0..n_states {
                let w: f64 = rng.gen_range(0.01..1.0);
                transition[row + s2] = w;
                total += w;
            }
            for s2 in 0..n_states {
                transition[row + s2] /= total;
            }
        }
    }
    let reward = (0..n_states * n_actions).map(|_| rng.gen_range(0.0..1.0)).collect();
    let mut start = vec![0.0; n_states];
    let mut total = 0.0;
    for s in start.iter_mut() {
        *s = rng.gen_range(0.1..1.0);
        total += *s;
    }
    for s in start.iter_mut() {
        *s /= total;
    }
    TabularMdp {
        n_states,
        n_actions,
        transition,
        reward,
        start,
        gamma,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn single_state_mdp(gamma: f64) -> TabularMdp {
        TabularMdp {
            n_states: 1,
            n_actions: 1,
            transition: vec![1.0],
            reward: vec![1.0],
            start: vec![1.0],
            gamma,
        }
    }

    #[test]
    fn geometric_series_return() {
        // Single absorbing state, R = 1, gamma = 0.99: eta = 1/(1-gamma) = 100.
        let mdp = single_state_mdp(0.99);
        let pi = TabularPolicy::uniform(1, 1);
        let eta = exact_policy_eval(&mdp, &pi).unwrap();
        assert!((eta - 100.0).abs() < 1e-9, "eta = {eta}");
    }

    #[test]
    fn alpha_zero_mixture_is_identity() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let mdp = random_mdp(&mut rng, 4, 3, 0.9);
        let pe = TabularPolicy::random(&mut rng, 4, 3);
        let pg = TabularPolicy::random(&mut rng, 4, 3);
        let mixed = mix_policies(&pe, &pg, 0.0);
        assert_eq!(mixed, pe);
        let d = exact_policy_eval(&mdp, &mixed).unwrap() - exact_policy_eval(&mdp, &pe).unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn advantage_under_own_policy_averages_to_zero() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let mdp = random_mdp(&mut rng, 6, 3, 0.95);
        mdp.validate().unwrap();
        let pi = TabularPolicy::random(&mut rng, 6, 3);
        let adv = exact_advantage(&mdp, &pi).unwrap();
        for s in 0..6 {
            let mean: f64 = (0..3).map(|a| pi.p(s, a) * adv[s * 3 + a]).sum();
            assert!(mean.abs() < 1e-10, "state {s}: {mean}");
        }
    }

    #[test]
    fn eval_matches_truncated_monte_carlo() {
        // Random 5-state 2-action MDP at gamma 0.9: exact linear-solve value
        // must sit within 3 standard errors of a long truncated rollout.
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let mdp = random_mdp(&mut rng, 5, 2, 0.9);
        let pi = TabularPolicy::random(&mut rng, 5, 2);
        let eta = exact_policy_eval(&mdp, &pi).unwrap();

        let episode_len = 400; // gamma^400 ~ 5e-19
        let episodes = 2500; // 1e6 steps total
        let sample_discrete = |rng: &mut ChaCha12Rng, probs: &[f64]| -> usize {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            for (i, &p) in probs.iter().enumerate() {
                acc += p;
                if u < acc {
                    return i;
                }
            }
            probs.len() - 1
        };

        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        for _ in 0..episodes {
            let mut s = sample_discrete(&mut rng, &mdp.start);
            let mut ret = 0.0;
            let mut disc = 1.0;
            for _ in 0..episode_len {
                let row = &pi.probs[s * 2..(s + 1) * 2];
                let a = sample_discrete(&mut rng, row);
                ret += disc * mdp.r(s, a);
                disc *= mdp.gamma;
                let trow = &mdp.transition[(s * 2 + a) * 5..(s * 2 + a + 1) * 5];
                s = sample_discrete(&mut rng, trow);
            }
            sum += ret;
            sum_sq += ret * ret;
        }
        let mean = sum / episodes as f64;
        let var = (sum_sq / episodes as f64 - mean * mean).max(0.0);
        let se = (var / episodes as f64).sqrt();
        assert!(
            (eta - mean).abs() <= 3.0 * se,
            "exact {eta} vs mc {mean} (se {se})"
        );
    }

    #[test]
    fn transition_validation_catches_bad_rows() {
        let mut mdp = single_state_mdp(0.9);
        mdp.transition[0] = 0.5;
        assert!(matches!(mdp.validate(), Err(MdpError::BadTransition { .. })));
    }
}
