//! Guidance schedules and per-episode prior windows.
//!
//! Run with: cargo run --release --example guidance_windows

use gsa::guidance::{parse_schedule, plan_episode};
use gsa::pipeline::seeds;

fn main() {
    let schedule = parse_schedule("linear(1,0,15000)").unwrap();
    println!("deployment probability along training:");
    for step in [0u64, 3750, 7500, 11250, 15000, 20000] {
        println!("  step {step:>6}: {:.2}", schedule.probability(step));
    }

    println!("\nper-episode plans at step 3750 (episode length 100):");
    for ep in 0..8u64 {
        let plan = plan_episode(&schedule, 3750, 100, &mut seeds::stream(5, "guidance", ep));
        if plan.use_prior {
            println!(
                "  episode {ep}: prior acts on [{}, {})",
                plan.start,
                plan.start + plan.duration
            );
        } else {
            println!("  episode {ep}: policy only");
        }
    }
}
