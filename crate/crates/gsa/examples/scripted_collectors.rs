//! The corpus collectors: waypoint explorers and noisy goal experts across
//! embodiments, with goal-reaching rates per noise level.
//!
//! Run with: cargo run --release --example scripted_collectors

use gsa::envs::collect::expert_success_rate;
use gsa::envs::{Embodiment, Task};

fn main() {
    println!("scripted-expert goal-reaching rate by action-noise scale:");
    println!("{:<28} sigma:  0.0   0.1   0.5   1.0   2.0", "embodiment/task");
    for emb in [Embodiment::VelocityPoint, Embodiment::ForcePoint, Embodiment::Car] {
        for task in [Task::DenseReach, Task::Corridor] {
            let rates: Vec<String> = [0.0, 0.1, 0.5, 1.0, 2.0]
                .iter()
                .map(|&s| format!("{:.2}", expert_success_rate(emb, task, s, 50, 42)))
                .collect();
            println!("{:<28}        {}", format!("{emb:?}/{task:?}"), rates.join("  "));
        }
    }
}
