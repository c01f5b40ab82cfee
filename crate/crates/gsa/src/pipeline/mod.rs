//! End-to-end orchestration: configuration, corpus generation,
//! pre-training, retrieval, behavior cloning, guided fine-tuning,
//! evaluation, verification, and plotting.

pub mod commands;
pub mod config;
pub mod metrics;
pub mod plot;
pub mod seeds;
pub mod verifycmd;

pub use commands::{
    cmd_eval, cmd_finetune, cmd_gen_data, cmd_pretrain, cmd_retrieve, corpus_jobs,
    evaluate_policy, max_threads, store_header, wm_from_checkpoint, EvalReport, FinetuneReport,
    PipelineError, PretrainReport,
};
pub use config::{ConfigError, RunConfig};
pub use metrics::{read_eval_csv, EpisodeRecord, EvalRecord, MetricsLog};
pub use plot::{aggregate, area_under_curve, cmd_plot, PlotGroup};
pub use verifycmd::{battery_names_unique, run_battery, CheckResult};
