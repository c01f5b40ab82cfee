//! Generalist-to-specialist adaptation for continuous control.
//!
//! Pre-trains a recurrent latent world model on non-curated offline
//! trajectories (reward-free, mixed quality, multiple embodiments), then
//! fine-tunes an imagination-based actor-critic online, replaying retrieved
//! task-relevant offline trajectories (experience rehearsal) and scheduling
//! a behavior-cloned prior policy during data collection (execution
//! guidance). Everything is deterministic given a seed and runs on a single
//! CPU core at desk scale.
//!
//! See the `examples/` directory for runnable entry points per capability,
//! and the `gsa` binary for the end-to-end pipeline.

pub mod datastore;
pub mod worldmodel;
pub mod agent;
pub mod checkpoint;
pub mod envs;
pub mod guidance;
pub mod numerics;
pub mod pipeline;
pub mod verify;
