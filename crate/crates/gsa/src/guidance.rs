//! Execution-guidance control: when to hand data collection to the
//! behavior-cloned prior instead of the live policy.
//!
//! A linear schedule maps the global step to a probability of deploying
//! the prior this episode; when deployed, a start step and duration are
//! drawn from a coarse grid and the prior acts inside that window.

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ScheduleError {
    #[error("malformed schedule `{text}`: {reason} at position {pos}")]
    Malformed {
        text: String,
        reason: String,
        pos: usize,
    },
}

/// Linearly interpolated deployment probability, clamped past the horizon.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GuidanceSchedule {
    pub start_value: f64,
    pub end_value: f64,
    pub horizon: u64,
}

impl GuidanceSchedule {
    pub fn constant(p: f64) -> Self {
        Self {
            start_value: p,
            end_value: p,
            horizon: 1,
        }
    }

    pub fn off() -> Self {
        Self::constant(0.0)
    }

    pub fn probability(&self, step: u64) -> f64 {
        if self.horizon == 0 {
            return self.end_value.clamp(0.0, 1.0);
        }
        let frac = (step as f64 / self.horizon as f64).min(1.0);
        (self.start_value + (self.end_value - self.start_value) * frac).clamp(0.0, 1.0)
    }
}

/// Parses "linear(p0,p1,N)".
pub fn parse_schedule(text: &str) -> Result<GuidanceSchedule, ScheduleError> {
    let err = |reason: &str, pos: usize| ScheduleError::Malformed {
        text: text.to_string(),
        reason: reason.to_string(),
        pos,
    };
    let trimmed = text.trim();
    let Some(rest) = trimmed.strip_prefix("linear(") else {
        return Err(err("expected `linear(`", 0));
    };
    let Some(body) = rest.strip_suffix(')') else {
        return Err(err("expected closing `)`", trimmed.len().saturating_sub(1)));
    };
    let parts: Vec<&str> = body.split(',').collect();
    if parts.len() != 3 {
        return Err(err(
            &format!("expected 3 comma-separated fields, found {}", parts.len()),
            "linear(".len(),
        ));
    }
    let mut pos = "linear(".len();
    let mut values = [0.0f64; 2];
    for (i, part) in parts[..2].iter().enumerate() {
        values[i] = part
            .trim()
            .parse::<f64>()
            .map_err(|_| err(&format!("`{}` is not a number", part.trim()), pos))?;
        pos += part.len() + 1;
    }
    let horizon = parts[2]
        .trim()
        .parse::<u64>()
        .map_err(|_| err(&format!("`{}` is not a step count", parts[2].trim()), pos))?;
    for (i, v) in values.iter().enumerate() {
        if !(0.0..=1.0).contains(v) {
            return Err(err(&format!("probability {v} outside [0,1]"), "linear(".len() + i));
        }
    }
    Ok(GuidanceSchedule {
        start_value: values[0],
        end_value: values[1],
        horizon,
    })
}

/// Per-episode decision: whether the prior acts, and over which window.
/// The window is [start, start + duration).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GuidancePlan {
    pub use_prior: bool,
    pub start: usize,
    pub duration: usize,
}

impl GuidancePlan {
    pub fn none() -> Self {
        Self {
            use_prior: false,
            start: 0,
            duration: 0,
        }
    }

    /// Whether the prior acts at step `t` of the episode. The window is
    /// half-open by default; `inclusive_end` extends it by one step.
    pub fn prior_active(&self, t: usize, inclusive_end: bool) -> bool {
        if !self.use_prior {
            return false;
        }
        let end = self.start + self.duration;
        t >= self.start && (t < end || (inclusive_end && t == end))
    }
}

/// Draws a plan: Bernoulli(schedule probability at `global_step`), then
/// start and duration from the grid {0, s, 2s, ..} with stride
/// episode_len/10, both capped at episode_len/2 and truncated so the
/// window fits inside the episode.
pub fn plan_episode(
    schedule: &GuidanceSchedule,
    global_step: u64,
    episode_len: usize,
    rng: &mut ChaCha12Rng,
) -> GuidancePlan {
    assert!(episode_len > 0, "episode length must be positive");
    let p = schedule.probability(global_step);
    let use_prior = rng.gen_range(0.0..1.0) < p;
    if !use_prior {
        return GuidancePlan::none();
    }
    let stride = (episode_len / 10).max(1);
    let half = episode_len / 2;
    let start_choices = half / stride + 1; // {0, s, .., half}
    let dur_choices = (half / stride).max(1); // {s, .., half}
    let start = stride * rng.gen_range(0..start_choices);
    let duration = stride * (1 + rng.gen_range(0..dur_choices));
    let duration = duration.min(episode_len - start);
    GuidancePlan {
        use_prior: true,
        start,
        duration,
    }
}

/// Which policy produced an action.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActionSource {
    Prior,
    Policy,
}

/// Routes one step through the plan: the prior during its active window,
/// the live policy otherwise.
pub fn guided_action<A>(
    plan: &GuidancePlan,
    t: usize,
    inclusive_end: bool,
    prior: impl FnOnce() -> A,
    policy: impl FnOnce() -> A,
) -> (A, ActionSource) {
    if plan.prior_active(t, inclusive_end) {
        (prior(), ActionSource::Prior)
    } else {
        (policy(), ActionSource::Policy)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn schedule_endpoints_and_midpoint() {
        let s = parse_schedule("linear(1,0,50000)").unwrap();
        assert_eq!(s.probability(0), 1.0);
        assert_eq!(s.probability(50_000), 0.0);
        assert_eq!(s.probability(25_000), 0.5);
        assert_eq!(s.probability(80_000), 0.0, "clamped past the horizon");
    }

    #[test]
    fn malformed_schedules_report_position() {
        for (text, needle) in [
            ("linea(1,0,5)", "expected `linear(`"),
            ("linear(1,0,5", "closing"),
            ("linear(1,0)", "3 comma-separated"),
            ("linear(a,0,5)", "not a number"),
            ("linear(1,0,x)", "not a step count"),
            ("linear(2,0,5)", "outside [0,1]"),
        ] {
            let e = parse_schedule(text).unwrap_err();
            let msg = e.to_string();
            assert!(msg.contains(needle), "{text}: {msg}");
            assert!(msg.contains("position"), "{text}: {msg}");
        }
    }

    #[test]
    fn probability_zero_never_deploys() {
        let s = GuidanceSchedule::off();
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        for step in 0..10_000u64 {
            assert!(!plan_episode(&s, step, 100, &mut rng).use_prior);
        }
    }

    #[test]
    fn probability_one_always_deploys() {
        let s = GuidanceSchedule::constant(1.0);
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        for step in 0..10_000u64 {
            assert!(plan_episode(&s, step, 100, &mut rng).use_prior);
        }
    }

    #[test]
    fn half_probability_rate_and_window_constraints() {
        let s = GuidanceSchedule::constant(0.5);
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let n = 10_000;
        let mut deployed = 0;
        for _ in 0..n {
            let plan = plan_episode(&s, 0, 100, &mut rng);
            if plan.use_prior {
                deployed += 1;
                assert!(plan.start + plan.duration <= 100);
                assert!(plan.duration >= 1);
                assert_eq!(plan.start % 10, 0, "start on the grid");
            }
        }
        let sigma = (n as f64 * 0.25).sqrt();
        let dev = (deployed as f64 - n as f64 * 0.5).abs();
        assert!(dev <= 5.0 * sigma, "rate deviates {dev} > 5 sigma {sigma}");
    }

    #[test]
    fn window_boundary_flips_source() {
        let plan = GuidancePlan {
            use_prior: true,
            start: 0,
            duration: 50,
        };
        for t in 0..100 {
            let (_, src) = guided_action(&plan, t, false, || 0u8, || 1u8);
            if t < 50 {
                assert_eq!(src, ActionSource::Prior);
            } else {
                assert_eq!(src, ActionSource::Policy, "flip exactly at t = duration");
            }
        }
        // Inclusive-endpoint variant keeps the prior one extra step.
        let (_, src) = guided_action(&plan, 50, true, || 0u8, || 1u8);
        assert_eq!(src, ActionSource::Prior);
    }

    #[test]
    fn disabled_plan_always_uses_policy() {
        let plan = GuidancePlan::none();
        for t in 0..100 {
            let (_, src) = guided_action(&plan, t, false, || 0u8, || 1u8);
            assert_eq!(src, ActionSource::Policy);
        }
    }

    #[test]
    fn source_tags_match_plan_windows() {
        // Replay audit: for random plans, the per-step source tag must equal
        // membership of t in [start, start + duration).
        let s = GuidanceSchedule::constant(1.0);
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        for _ in 0..100 {
            let plan = plan_episode(&s, 0, 100, &mut rng);
            for t in 0..100 {
                let (_, src) = guided_action(&plan, t, false, || (), || ());
                let inside = t >= plan.start && t < plan.start + plan.duration;
                assert_eq!(src == ActionSource::Prior, inside);
            }
        }
    }

    #[test]
    fn bc_step_fraction_tracks_schedule_times_expected_window() {
        // With deployment probability p and window length E[H], the fraction
        // of prior-sourced steps converges to p * E[H] / episode_len.
        let s = GuidanceSchedule::constant(0.6);
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let episode_len = 100;
        let episodes = 10_000;
        let mut prior_steps = 0usize;
        for _ in 0..episodes {
            let plan = plan_episode(&s, 0, episode_len, &mut rng);
            for t in 0..episode_len {
                if plan.prior_active(t, false) {
                    prior_steps += 1;
                }
            }
        }
        // E[duration] given deployment: start uniform on {0,10..50}, duration
        // uniform on {10..50} truncated to 100 - start. Enumerate exactly.
        let mut expect_len = 0.0;
        let starts = [0, 10, 20, 30, 40, 50];
        let durs = [10, 20, 30, 40, 50];
        for &st in &starts {
            for &d in &durs {
                expect_len += (d.min(episode_len - st)) as f64 / (starts.len() * durs.len()) as f64;
            }
        }
        let expected = 0.6 * expect_len / episode_len as f64;
        let total = (episodes * episode_len) as f64;
        let got = prior_steps as f64 / total;
        // Binomial-style 5-sigma band on the per-episode window length.
        let per_ep_sigma = 0.25f64; // conservative bound on sd of fraction per episode
        let band = 5.0 * per_ep_sigma / (episodes as f64).sqrt();
        assert!(
            (got - expected).abs() <= band,
            "fraction {got} vs expected {expected} (band {band})"
        );
    }
}
