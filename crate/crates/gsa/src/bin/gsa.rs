//! Command-line front end. All substance lives in the library; see the
//! `examples/` directory for programmatic entry points.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use gsa::pipeline::{self, RunConfig};

#[derive(Parser)]
#[command(
    name = "gsa",
    about = "World-model pre-training on non-curated trajectories with retrieval-based rehearsal and guided online fine-tuning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonOpts {
    /// Configuration file (flat key = value lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run seed (overrides the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Task id, e.g. e1-corridor.
    #[arg(long)]
    task: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Skip world-model pre-training (random initialization).
    #[arg(long)]
    no_pretrain: bool,
    /// Disable experience rehearsal (offline mix ratio forced to 0).
    #[arg(long)]
    no_rehearsal: bool,
    /// Disable execution guidance (no prior policy during collection).
    #[arg(long)]
    no_guidance: bool,
    /// Guidance schedule, e.g. linear(1,0,15000).
    #[arg(long)]
    guidance_schedule: Option<String>,
    /// Number of initial resets used as retrieval queries.
    #[arg(long)]
    retrieval_queries: Option<usize>,
}

impl CommonOpts {
    fn build_config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)
                .with_context(|| format!("loading config {}", path.display()))?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(task) = &self.task {
            cfg.task = task.clone();
        }
        if let Some(s) = &self.guidance_schedule {
            cfg.guidance_schedule = s.clone();
        }
        if let Some(q) = self.retrieval_queries {
            cfg.retrieval_queries = q;
        }
        cfg.no_pretrain |= self.no_pretrain;
        cfg.no_rehearsal |= self.no_rehearsal;
        cfg.no_guidance |= self.no_guidance;
        Ok(cfg)
    }

    fn out_dir(&self) -> Result<PathBuf> {
        self.out.clone().context("--out is required")
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the offline corpus (explore + noisy-expert collectors over
    /// every embodiment and task).
    GenData {
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Pre-train the world model on a corpus store.
    Pretrain {
        #[command(flatten)]
        common: CommonOpts,
        /// Corpus store file.
        #[arg(long)]
        store: PathBuf,
    },
    /// Build a retrieval index (and optionally show the top matches for a
    /// task's first reset).
    Retrieve {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        store: PathBuf,
        /// World-model checkpoint whose encoder defines the embedding.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Print the top matches for this task's initial observation.
        #[arg(long)]
        query_task: Option<String>,
    },
    /// Train the behavior-cloned prior on retrieved trajectories and report
    /// its environment success rate.
    Bc {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Evaluation episodes for the trained prior.
        #[arg(long, default_value_t = 20)]
        eval_episodes: usize,
    },
    /// Online fine-tuning with rehearsal and guidance (the full loop).
    Finetune {
        #[command(flatten)]
        common: CommonOpts,
        /// Corpus store (needed unless rehearsal and guidance are both off).
        #[arg(long)]
        store: Option<PathBuf>,
        /// Pre-trained world-model checkpoint (needed unless --no-pretrain).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a fine-tuned checkpoint.
    Eval {
        /// Agent checkpoint from finetune.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Task id; must match the checkpoint's task.
        #[arg(long)]
        task: Option<String>,
        #[arg(long, default_value_t = 20)]
        episodes: usize,
    },
    /// Run the verification battery (gradient checks, oracles, guarantees).
    Verify,
    /// Plot learning curves from one or more run directories.
    Plot {
        /// Run directories (each holding an eval.csv).
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    match run() {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn run() -> Result<ExitCode> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenData { common } => {
            let cfg = common.build_config()?;
            let out = common.out_dir()?;
            std::fs::create_dir_all(&out)?;
            let path = out.join("corpus.gsa1");
            let (count, configs) = pipeline::cmd_gen_data(&cfg, &path)?;
            println!(
                "wrote {count} trajectories from {configs} collector configs to {}",
                path.display()
            );
        }
        Command::Pretrain { common, store } => {
            let cfg = common.build_config()?;
            let out = common.out_dir()?;
            let report = pipeline::cmd_pretrain(&cfg, &store, &out)?;
            println!(
                "pretrained {} steps: loss {:.4} -> {:.4}; checkpoint {}",
                cfg.pretrain_steps,
                report.first_loss,
                report.final_loss,
                report.checkpoint.display()
            );
        }
        Command::Retrieve {
            common,
            store,
            checkpoint,
            query_task,
        } => {
            let cfg = common.build_config()?;
            let out = common.out_dir()?;
            std::fs::create_dir_all(&out)?;
            let index_path = out.join("index.gsai");
            let n = pipeline::cmd_retrieve(
                &cfg,
                &store,
                &checkpoint,
                &index_path,
                query_task.as_deref(),
            )?;
            println!("indexed {n} trajectories into {}", index_path.display());
        }
        Command::Bc {
            common,
            store,
            checkpoint,
            eval_episodes,
        } => {
            let cfg = common.build_config()?;
            let out = common.out_dir()?;
            let report = train_prior(&cfg, &store, &checkpoint, &out, eval_episodes)?;
            println!(
                "bc prior on {}: success rate {:.2} over {} episodes (nll {:.3} -> {:.3})",
                cfg.task, report.success_rate, eval_episodes, report.first_nll, report.final_nll
            );
        }
        Command::Finetune {
            common,
            store,
            checkpoint,
        } => {
            let cfg = common.build_config()?;
            let out = common.out_dir()?;
            let report =
                pipeline::cmd_finetune(&cfg, &out, store.as_deref(), checkpoint.as_deref())?;
            println!(
                "finetuned {} episodes on {}: final success {:.2}, best {:.2}; checkpoint {}",
                report.episodes,
                cfg.task,
                report.final_success,
                report.best_success,
                report.checkpoint.display()
            );
        }
        Command::Eval {
            checkpoint,
            task,
            episodes,
        } => {
            let report = pipeline::cmd_eval(&checkpoint, task.as_deref(), episodes)?;
            println!(
                "eval over {} episodes: success rate {:.2}, mean return {:.2}",
                report.episodes, report.success_rate, report.mean_return
            );
        }
        Command::Verify => {
            let results = pipeline::run_battery();
            let unique = pipeline::battery_names_unique(&results);
            let mut failed = !unique;
            for r in &results {
                println!(
                    "{} {} - {}",
                    if r.pass { "PASS" } else { "FAIL" },
                    r.name,
                    r.detail
                );
                failed |= !r.pass;
            }
            if !unique {
                println!("FAIL battery_structure - duplicate check names");
            }
            return Ok(if failed {
                ExitCode::FAILURE
            } else {
                ExitCode::SUCCESS
            });
        }
        Command::Plot { runs, out } => {
            let summary = pipeline::cmd_plot(&runs, &out)?;
            print!("{summary}");
            println!("wrote {}", out.join("curves.svg").display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

struct BcReport {
    success_rate: f64,
    first_nll: f64,
    final_nll: f64,
}

/// Standalone prior training: retrieval from the first reset, behavior
/// cloning on the retrieved set, then a greedy evaluation.
fn train_prior(
    cfg: &RunConfig,
    store_path: &std::path::Path,
    checkpoint_path: &std::path::Path,
    out: &std::path::Path,
    eval_episodes: usize,
) -> Result<BcReport> {
    use gsa::agent::{bc_train, ActionMode, BcDataset, BcPolicy};
    use gsa::datastore::{build_index, load_store};
    use gsa::envs::ToyEnv;
    use gsa::numerics::Tensor;
    use gsa::pipeline::seeds;
    use gsa::worldmodel::EncoderHandle;

    std::fs::create_dir_all(out)?;
    let store = load_store(store_path)?;
    let (wm, checksum) = pipeline::wm_from_checkpoint(checkpoint_path)?;
    let encoder = EncoderHandle { wm: &wm, checksum };
    let index = build_index(&store, &encoder)?;
    let retrieved = pipeline::commands::retrieve_for_task(cfg, &store, &index, &wm, checksum)?;

    let mut policy: BcPolicy<f32> =
        BcPolicy::new(cfg.bc_config(), seeds::derive(cfg.seed, "init_bc", 0));
    let dataset = BcDataset::from_records(&retrieved);
    let adam = gsa::numerics::AdamConfig {
        lr: cfg.bc_lr,
        ..Default::default()
    };
    let trace = bc_train(
        &mut policy,
        &dataset,
        cfg.bc_steps,
        cfg.bc_batch,
        &adam,
        &mut seeds::stream(cfg.seed, "bc", 0),
    )?;

    let mut successes = 0;
    for ep in 0..eval_episodes {
        let mut env = ToyEnv::from_id(&cfg.task, pipeline::commands::env_obs_mode(cfg))?;
        env.episode_len = cfg.episode_len;
        let mut obs = env.reset(seeds::derive(cfg.seed, "eval_ep", ep as u64));
        let mut rng = seeds::stream(cfg.seed, "bc_eval", ep as u64);
        let mut reached = false;
        for _ in 0..cfg.episode_len {
            let obs_t = Tensor::from_rows(1, obs.len(), obs.clone());
            let action = policy.select_action(&obs_t, ActionMode::Mean, &mut rng);
            let native: Vec<f64> = action.data()[..env.embodiment.native_action_dim()]
                .iter()
                .map(|&x| x as f64)
                .collect();
            let (next, _, done) = env.step(&native);
            reached |= env.in_goal();
            obs = next;
            if done {
                break;
            }
        }
        successes += reached as usize;
    }
    Ok(BcReport {
        success_rate: successes as f64 / eval_episodes.max(1) as f64,
        first_nll: trace.first().copied().unwrap_or(0.0),
        final_nll: trace.last().copied().unwrap_or(0.0),
    })
}
