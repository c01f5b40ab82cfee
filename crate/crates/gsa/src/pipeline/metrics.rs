//! Append-only per-episode and per-evaluation logs, written as headered
//! CSV. Wall-clock timings go to a separate file so the training metrics
//! stay bitwise reproducible.

use std::fmt::Write as _;
use std::path::Path;

#[derive(Clone, Debug, Default)]
pub struct EpisodeRecord {
    pub step: u64,
    pub episode: u64,
    pub ep_return: f64,
    pub success: bool,
    pub wm_total: f64,
    pub wm_recon: f64,
    pub wm_kl: f64,
    pub wm_kl_raw: f64,
    pub wm_reward_nll: f64,
    pub actor_loss: f64,
    pub critic_loss: f64,
    pub entropy: f64,
    pub bc_fraction: f64,
}

#[derive(Clone, Debug, Default)]
pub struct EvalRecord {
    pub step: u64,
    pub success_rate: f64,
    pub mean_return: f64,
}

/// In-memory log with monotone step columns; flushed to CSV per episode.
#[derive(Default)]
pub struct MetricsLog {
    pub episodes: Vec<EpisodeRecord>,
    pub evals: Vec<EvalRecord>,
    /// (step, wall seconds since run start); excluded from determinism.
    pub timings: Vec<(u64, f64)>,
}

impl MetricsLog {
    pub fn push_episode(&mut self, rec: EpisodeRecord) {
        if let Some(last) = self.episodes.last() {
            assert!(rec.step >= last.step, "step column must be monotone");
        }
        self.episodes.push(rec);
    }

    pub fn push_eval(&mut self, rec: EvalRecord) {
        if let Some(last) = self.evals.last() {
            assert!(rec.step >= last.step, "step column must be monotone");
        }
        self.evals.push(rec);
    }

    pub fn episodes_csv(&self) -> String {
        let mut out = String::from(
            "step,episode,ep_return,success,wm_total,wm_recon,wm_kl,wm_kl_raw,wm_reward_nll,actor_loss,critic_loss,entropy,bc_fraction\n",
        );
        for r in &self.episodes {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.step,
                r.episode,
                r.ep_return,
                r.success as u8,
                r.wm_total,
                r.wm_recon,
                r.wm_kl,
                r.wm_kl_raw,
                r.wm_reward_nll,
                r.actor_loss,
                r.critic_loss,
                r.entropy,
                r.bc_fraction
            );
        }
        out
    }

    pub fn evals_csv(&self) -> String {
        let mut out = String::from("step,success_rate,mean_return\n");
        for r in &self.evals {
            let _ = writeln!(out, "{},{},{}", r.step, r.success_rate, r.mean_return);
        }
        out
    }

    pub fn timings_csv(&self) -> String {
        let mut out = String::from("step,wall_seconds\n");
        for (step, secs) in &self.timings {
            let _ = writeln!(out, "{},{:.3}", step, secs);
        }
        out
    }

    pub fn flush(&self, dir: &Path) -> std::io::Result<()> {
        std::fs::write(dir.join("metrics.csv"), self.episodes_csv())?;
        std::fs::write(dir.join("eval.csv"), self.evals_csv())?;
        std::fs::write(dir.join("timing.csv"), self.timings_csv())?;
        Ok(())
    }
}

/// Parses an eval.csv back into records (for plotting and acceptance).
pub fn read_eval_csv(path: &Path) -> std::io::Result<Vec<EvalRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in text.lines().skip(1) {
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 3 {
            continue;
        }
        out.push(EvalRecord {
            step: parts[0].parse().unwrap_or(0),
            success_rate: parts[1].parse().unwrap_or(0.0),
            mean_return: parts[2].parse().unwrap_or(0.0),
        });
    }
    Ok(out)
}
