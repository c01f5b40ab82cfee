//! Pipeline commands: corpus generation, pre-training, retrieval, behavior
//! cloning, guided fine-tuning, and evaluation.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::agent::{
    actor_critic_update, bc_train, ActionMode, Actor, BcDataset, BcPolicy, Critic,
};
use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError};
use crate::datastore::{
    build_index, fileio, load_store, mixed_sample, retrieve_topk, sample_sequences, DataError,
    OfflineStore, OnlineBuffer, RecordMeta, RetrievalIndex, SeqBatch, StoreFileWriter, StoreHeader,
    TrajectoryRecord,
};
use crate::envs::collect::{pad_action, scripted_collect, CollectMode};
use crate::envs::{Embodiment, EnvError, ObsMode, Task, ToyEnv, UNIFIED_ACTION_DIM};
use crate::guidance::{parse_schedule, plan_episode, GuidancePlan, GuidanceSchedule, ScheduleError};
use crate::numerics::Tensor;
use crate::worldmodel::{wm_train_step, EncoderHandle, LatentState, TrainError, WorldModel};

use super::config::RunConfig;
use super::metrics::{EpisodeRecord, EvalRecord, MetricsLog};
use super::seeds;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("data: {0}")]
    Data(#[from] DataError),
    #[error("training: {0}")]
    Train(#[from] TrainError),
    #[error("checkpoint: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("environment: {0}")]
    Env(#[from] EnvError),
    #[error("schedule: {0}")]
    Schedule(#[from] ScheduleError),
    #[error("config: {0}")]
    Config(#[from] super::config::ConfigError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Invalid(String),
    #[error(
        "non-finite loss at env step {step} (episode {episode}, batch {batch_id}); \
         diagnostic bundle written to {bundle}"
    )]
    Diverged {
        step: u64,
        episode: u64,
        batch_id: u64,
        bundle: String,
    },
}

/// Parallelism cap for embarrassingly parallel stages (corpus generation),
/// from `GSA_THREADS`; training itself is single-threaded by design.
pub fn max_threads() -> usize {
    std::env::var("GSA_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

pub fn env_obs_mode(cfg: &RunConfig) -> ObsMode {
    match cfg.obs_mode.as_str() {
        "vector" => ObsMode::Vector,
        _ => ObsMode::Image {
            size: cfg.image_size,
        },
    }
}

pub fn store_header(cfg: &RunConfig) -> StoreHeader {
    match env_obs_mode(cfg) {
        ObsMode::Vector => StoreHeader {
            obs_mode: 0,
            obs_shape: vec![crate::envs::VECTOR_OBS_DIM],
            action_dim: UNIFIED_ACTION_DIM,
        },
        ObsMode::Image { size } => StoreHeader {
            obs_mode: 1,
            obs_shape: vec![size, size],
            action_dim: UNIFIED_ACTION_DIM,
        },
    }
}

fn make_env(cfg: &RunConfig, task: &str) -> Result<ToyEnv, PipelineError> {
    let mut env = ToyEnv::from_id(task, env_obs_mode(cfg))?;
    env.episode_len = cfg.episode_len;
    env.action_repeat = cfg.action_repeat;
    Ok(env)
}

/// One collector configuration of the corpus.
#[derive(Clone, Debug)]
pub struct CorpusJob {
    pub embodiment: Embodiment,
    pub task: Task,
    pub mode: CollectMode,
    pub sigma: f64,
    pub n_traj: usize,
    pub seed: u64,
}

/// The corpus layout: per (embodiment, task) pair, one explore collector
/// plus one noisy-expert collector per sigma in the sweep. Trajectory
/// budgets per pair are split `explore_fraction` to the explorer and the
/// rest evenly across the sigmas.
pub fn corpus_jobs(cfg: &RunConfig) -> Vec<CorpusJob> {
    let mut jobs = Vec::new();
    let per_pair = cfg.data_trajectories_per_pair;
    let n_explore = ((per_pair as f64) * cfg.data_explore_fraction).round() as usize;
    let n_sigmas = cfg.data_sigmas.len().max(1);
    let per_sigma = (per_pair - n_explore) / n_sigmas;
    for emb in [
        Embodiment::VelocityPoint,
        Embodiment::ForcePoint,
        Embodiment::Car,
    ] {
        for task in [Task::DenseReach, Task::SparseReach, Task::Corridor] {
            let pair_tag = (emb.index() as u64) * 10 + task as u64;
            jobs.push(CorpusJob {
                embodiment: emb,
                task,
                mode: CollectMode::Explore,
                sigma: 0.0,
                n_traj: n_explore,
                seed: seeds::derive(cfg.seed, "gen_explore", pair_tag),
            });
            for (si, &sigma) in cfg.data_sigmas.iter().enumerate() {
                jobs.push(CorpusJob {
                    embodiment: emb,
                    task,
                    mode: CollectMode::NoisyExpert,
                    sigma,
                    n_traj: per_sigma,
                    seed: seeds::derive(cfg.seed, "gen_expert", pair_tag * 100 + si as u64),
                });
            }
        }
    }
    jobs
}

/// Generates the offline corpus and streams it into a store file. Returns
/// (trajectory count, collector-config count).
pub fn cmd_gen_data(cfg: &RunConfig, out_path: &Path) -> Result<(usize, usize), PipelineError> {
    let jobs = corpus_jobs(cfg);
    let header = store_header(cfg);
    let obs_mode = env_obs_mode(cfg);
    let threads = max_threads().min(jobs.len().max(1));

    let run_job = |job: &CorpusJob| -> Vec<TrajectoryRecord> {
        let mut env = ToyEnv::new(job.embodiment, job.task, obs_mode);
        env.episode_len = cfg.episode_len;
        env.action_repeat = cfg.action_repeat;
        scripted_collect(&mut env, job.mode, job.sigma, job.n_traj, job.seed)
    };

    // Job results land in job order regardless of scheduling, so the store
    // bytes do not depend on the thread count.
    let mut results: Vec<Option<Vec<TrajectoryRecord>>> = (0..jobs.len()).map(|_| None).collect();
    if threads <= 1 {
        for (i, job) in jobs.iter().enumerate() {
            results[i] = Some(run_job(job));
        }
    } else {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let slots: Vec<std::sync::Mutex<Option<Vec<TrajectoryRecord>>>> =
            (0..jobs.len()).map(|_| std::sync::Mutex::new(None)).collect();
        std::thread::scope(|scope| {
            for _ in 0..threads {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                    if i >= jobs.len() {
                        break;
                    }
                    *slots[i].lock().unwrap() = Some(run_job(&jobs[i]));
                });
            }
        });
        for (i, slot) in slots.into_iter().enumerate() {
            results[i] = slot.into_inner().unwrap();
        }
    }

    let mut writer = StoreFileWriter::create(out_path, header)?;
    let mut count = 0usize;
    for recs in results.into_iter().flatten() {
        for rec in recs {
            writer.append(
                rec.embodiment_id,
                rec.observations,
                rec.actions,
                None,
                rec.meta,
            )?;
            count += 1;
        }
    }
    writer.finish()?;
    Ok((count, jobs.len()))
}

/// Restores a world model from a checkpoint file.
pub fn wm_from_checkpoint(path: &Path) -> Result<(WorldModel<f32>, [u8; 32]), PipelineError> {
    let (ckpt, checksum) = load_checkpoint(path)?;
    let cfg = RunConfig::parse(&ckpt.config_text)?;
    let params = ckpt.set("wm")?.clone();
    Ok((WorldModel::from_params(cfg.wm_config(), params), checksum))
}

pub struct PretrainReport {
    pub first_loss: f64,
    pub final_loss: f64,
    pub checkpoint: PathBuf,
    pub checksum: [u8; 32],
}

/// Task-agnostic world-model pre-training on uniform store samples.
pub fn cmd_pretrain(
    cfg: &RunConfig,
    store_path: &Path,
    out_dir: &Path,
) -> Result<PretrainReport, PipelineError> {
    std::fs::create_dir_all(out_dir)?;
    let store = load_store(store_path)?;
    if store.is_empty() {
        return Err(PipelineError::Invalid("empty offline store".into()));
    }
    let mut wm: WorldModel<f32> =
        WorldModel::new(cfg.wm_config(), seeds::derive(cfg.seed, "init_wm", 0));
    let adam = cfg.wm_adam();
    let mut rng = seeds::stream(cfg.seed, "pretrain", 0);
    let (batch, seq) = (cfg.wm_batch, cfg.wm_seq_len);
    let mut trace_csv = String::from("step,total,recon,kl,kl_raw\n");
    let mut first = 0.0;
    let mut last = 0.0;
    for step in 0..cfg.pretrain_steps {
        let batch_data: SeqBatch<f32> = sample_sequences(&store, batch, seq, &mut rng)?;
        let (components, _) = wm_train_step(&mut wm, &batch_data, &adam, step, &mut rng)?;
        if step == 0 {
            first = components.total;
        }
        last = components.total;
        if step % 50 == 0 || step + 1 == cfg.pretrain_steps {
            trace_csv.push_str(&format!(
                "{},{},{},{},{}\n",
                step, components.total, components.recon, components.kl, components.kl_raw
            ));
        }
    }

    let ckpt = Checkpoint {
        config_text: cfg.to_text(),
        sets: vec![("wm".to_string(), wm.params.clone())],
    };
    let path = out_dir.join("wm.gsac");
    let checksum = save_checkpoint(&ckpt, &path)?;
    std::fs::write(out_dir.join("pretrain_trace.csv"), trace_csv)?;
    Ok(PretrainReport {
        first_loss: first,
        final_loss: last,
        checkpoint: path,
        checksum,
    })
}

/// Builds the retrieval index for a store against a world-model encoder and
/// writes it next to the given path.
pub fn cmd_retrieve(
    cfg: &RunConfig,
    store_path: &Path,
    checkpoint_path: &Path,
    index_out: &Path,
    query_task: Option<&str>,
) -> Result<usize, PipelineError> {
    let store = load_store(store_path)?;
    let (wm, checksum) = wm_from_checkpoint(checkpoint_path)?;
    let encoder = EncoderHandle {
        wm: &wm,
        checksum,
    };
    let index = build_index(&store, &encoder)?;
    fileio::save_index(&index, index_out)?;

    if let Some(task) = query_task {
        let mut env = make_env(cfg, task)?;
        let obs = env.reset(seeds::derive(cfg.seed, "reset", 0));
        let top = retrieve_topk(&index, &obs, &encoder, cfg.retrieval_k)?;
        println!("top-{} for {} (first reset):", top.len(), task);
        for (rank, (id, dist)) in top.iter().take(10).enumerate() {
            let rec = store.record(*id)?;
            println!("  #{rank} id {id} dist {dist:.4} source {}", rec.meta.source);
        }
    }
    Ok(index.len())
}

/// Retrieves the rehearsal set for a task: one or more initial resets are
/// embedded and queried; per-query top-k lists merge by minimum distance.
pub fn retrieve_for_task(
    cfg: &RunConfig,
    store: &OfflineStore,
    index: &RetrievalIndex,
    wm: &WorldModel<f32>,
    checksum: [u8; 32],
) -> Result<Vec<TrajectoryRecord>, PipelineError> {
    let encoder = EncoderHandle { wm, checksum };
    let mut merged: std::collections::BTreeMap<u64, f32> = std::collections::BTreeMap::new();
    for q in 0..cfg.retrieval_queries.max(1) {
        let mut env = make_env(cfg, &cfg.task)?;
        let obs = env.reset(seeds::derive(cfg.seed, "reset", q as u64));
        for (id, dist) in retrieve_topk(index, &obs, &encoder, cfg.retrieval_k)? {
            let entry = merged.entry(id).or_insert(dist);
            if dist < *entry {
                *entry = dist;
            }
        }
    }
    let mut ranked: Vec<(u64, f32)> = merged.into_iter().collect();
    ranked.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    ranked.truncate(cfg.retrieval_k);
    ranked
        .iter()
        .map(|(id, _)| store.record(*id).map_err(PipelineError::from))
        .collect()
}

pub struct FinetuneReport {
    pub final_success: f64,
    pub best_success: f64,
    pub episodes: u64,
    pub checkpoint: PathBuf,
}

struct FilterState {
    state: LatentState<f32>,
    prev_action: Tensor<f32>,
}

fn observe(
    wm: &WorldModel<f32>,
    filter: &mut FilterState,
    obs: &[f32],
    is_first: bool,
    rng: &mut ChaCha12Rng,
) {
    let obs_t = Tensor::from_rows(1, obs.len(), obs.to_vec());
    let (state, _, _) = wm.observe_step(&filter.state, &filter.prev_action, &obs_t, is_first, rng);
    filter.state = state;
}

/// Deterministic evaluation: mean actions, fresh env instances, fixed
/// per-episode seeds. Read-only on all models.
pub fn evaluate_policy(
    cfg: &RunConfig,
    wm: &WorldModel<f32>,
    actor: &Actor<f32>,
    n_episodes: usize,
) -> Result<(f64, f64), PipelineError> {
    if n_episodes == 0 {
        return Ok((0.0, 0.0));
    }
    let mut successes = 0usize;
    let mut return_sum = 0.0;
    for ep in 0..n_episodes {
        let mut env = make_env(cfg, &cfg.task)?;
        let seed = seeds::derive(cfg.seed, "eval_ep", ep as u64);
        let mut obs = env.reset(seed);
        // Observation noise for the filter is not used in mean mode, but the
        // posterior sample still needs a stream; keep it per-episode fixed.
        let mut rng = seeds::stream(cfg.seed, "eval_filter", ep as u64);
        let mut filter = FilterState {
            state: wm.initial_state(1),
            prev_action: Tensor::zeros(&[1, UNIFIED_ACTION_DIM]),
        };
        observe(wm, &mut filter, &obs, true, &mut rng);
        let mut reached = false;
        let mut ep_return = 0.0;
        for _ in 0..cfg.episode_len {
            let action = actor.select_action(&filter.state.feature(), ActionMode::Mean, &mut rng);
            let native: Vec<f64> = action.data()[..env.embodiment.native_action_dim()]
                .iter()
                .map(|&x| x as f64)
                .collect();
            let (next_obs, reward, done) = env.step(&native);
            ep_return += reward;
            reached |= env.in_goal();
            filter.prev_action = Tensor::from_rows(1, UNIFIED_ACTION_DIM, action.data().to_vec());
            obs = next_obs;
            observe(wm, &mut filter, &obs, false, &mut rng);
            if done {
                break;
            }
        }
        successes += reached as usize;
        return_sum += ep_return;
    }
    Ok((
        successes as f64 / n_episodes as f64,
        return_sum / n_episodes as f64,
    ))
}

/// Online fine-tuning: single initial reset, retrieval, behavior cloning,
/// then the episode loop alternating guided collection with world-model and
/// actor-critic updates on rehearsal-mixed batches.
pub fn cmd_finetune(
    cfg: &RunConfig,
    out_dir: &Path,
    store_path: Option<&Path>,
    checkpoint_path: Option<&Path>,
) -> Result<FinetuneReport, PipelineError> {
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("config.cfg"), cfg.to_text())?;
    write_manifest(cfg, out_dir)?;
    let started = Instant::now();

    let needs_store = !(cfg.no_rehearsal && cfg.no_guidance);
    let store = match (needs_store, store_path) {
        (true, Some(p)) => Some(load_store(p)?),
        (true, None) => {
            return Err(PipelineError::Invalid(
                "rehearsal or guidance enabled but no store supplied".into(),
            ))
        }
        (false, _) => None,
    };

    // World model: pre-trained checkpoint unless ablated away.
    let (mut wm, wm_checksum) = if cfg.no_pretrain {
        let wm: WorldModel<f32> =
            WorldModel::new(cfg.wm_config(), seeds::derive(cfg.seed, "init_wm", 0));
        let ckpt = Checkpoint {
            config_text: cfg.to_text(),
            sets: vec![("wm".to_string(), wm.params.clone())],
        };
        let sum = ckpt.checksum();
        (wm, sum)
    } else {
        let path = checkpoint_path.ok_or_else(|| {
            PipelineError::Invalid("pretraining enabled but no checkpoint supplied".into())
        })?;
        wm_from_checkpoint(path)?
    };

    // Experience retrieval from the first reset(s), then behavior cloning.
    let retrieved: Vec<TrajectoryRecord> = match (&store, needs_store) {
        (Some(store), true) => {
            let encoder = EncoderHandle {
                wm: &wm,
                checksum: wm_checksum,
            };
            let index = build_index(store, &encoder)?;
            fileio::save_index(&index, &out_dir.join("index.gsai"))?;
            retrieve_for_task(cfg, store, &index, &wm, wm_checksum)?
        }
        _ => Vec::new(),
    };

    let bc: Option<BcPolicy<f32>> = if !cfg.no_guidance {
        let mut policy = BcPolicy::new(cfg.bc_config(), seeds::derive(cfg.seed, "init_bc", 0));
        let dataset = BcDataset::from_records(&retrieved);
        if dataset.is_empty() {
            return Err(PipelineError::Invalid(
                "guidance enabled but the retrieved set is empty".into(),
            ));
        }
        let adam = crate::numerics::AdamConfig {
            lr: cfg.bc_lr,
            ..crate::numerics::AdamConfig::default()
        };
        let trace = bc_train(
            &mut policy,
            &dataset,
            cfg.bc_steps,
            cfg.bc_batch,
            &adam,
            &mut seeds::stream(cfg.seed, "bc", 0),
        )?;
        let mut csv = String::from("step,nll\n");
        for (i, v) in trace.iter().enumerate() {
            if i % 20 == 0 || i + 1 == trace.len() {
                csv.push_str(&format!("{},{}\n", i, v));
            }
        }
        std::fs::write(out_dir.join("bc_trace.csv"), csv)?;
        Some(policy)
    } else {
        None
    };

    let rehearsal: Vec<TrajectoryRecord> = if cfg.no_rehearsal { Vec::new() } else { retrieved };
    let schedule: GuidanceSchedule = if cfg.no_guidance {
        GuidanceSchedule::off()
    } else {
        parse_schedule(&cfg.guidance_schedule)?
    };

    let agent_cfg = cfg.agent_config();
    let mut actor: Actor<f32> = Actor::new(&agent_cfg, seeds::derive(cfg.seed, "init_actor", 0));
    let mut critic: Critic<f32> = Critic::new(&agent_cfg, seeds::derive(cfg.seed, "init_critic", 0));
    let wm_adam = cfg.wm_adam();
    let agent_adam = cfg.agent_adam();

    let mut env = make_env(cfg, &cfg.task)?;
    let mut online = OnlineBuffer::new(cfg.run_buffer_capacity);
    let mut log = MetricsLog::default();

    let mut collect_rng = seeds::stream(cfg.seed, "collect", 0);
    let mut train_rng = seeds::stream(cfg.seed, "train", 0);

    let mut global_step: u64 = 0;
    let mut episode: u64 = 0;
    let mut grad_step: usize = 0;
    let mut best_success = 0.0f64;
    let mut final_success = 0.0f64;
    let mut next_eval = cfg.run_eval_every as u64;
    let mut snapshot_done = cfg.run_snapshot_step == 0;

    while (global_step as usize) < cfg.run_total_steps {
        // Per-episode guidance decision (own stream, so disabling guidance
        // leaves every other stream untouched).
        let plan: GuidancePlan = if cfg.no_guidance {
            GuidancePlan::none()
        } else {
            plan_episode(
                &schedule,
                global_step,
                cfg.episode_len,
                &mut seeds::stream(cfg.seed, "guidance", episode),
            )
        };

        // Collect one episode.
        let obs0 = env.reset(seeds::derive(cfg.seed, "reset", episode));
        let obs_len = obs0.len();
        let mut filter = FilterState {
            state: wm.initial_state(1),
            prev_action: Tensor::zeros(&[1, UNIFIED_ACTION_DIM]),
        };
        observe(&wm, &mut filter, &obs0, true, &mut collect_rng);
        let mut observations = obs0;
        let mut actions: Vec<f32> = Vec::with_capacity(cfg.episode_len * UNIFIED_ACTION_DIM);
        let mut rewards: Vec<f32> = Vec::with_capacity(cfg.episode_len);
        let mut ep_return = 0.0;
        let mut reached = false;
        let mut bc_steps = 0usize;
        let native_dim = env.embodiment.native_action_dim();

        for t in 0..cfg.episode_len {
            let warmup = (global_step as usize) < cfg.run_warmup_steps;
            let unified: Vec<f32> = if warmup {
                let mut a = vec![0.0f32; UNIFIED_ACTION_DIM];
                for slot in a.iter_mut().take(native_dim) {
                    *slot = collect_rng.gen_range(-1.0f32..1.0);
                }
                a
            } else if plan.prior_active(t, cfg.guidance_inclusive_end) {
                bc_steps += 1;
                let policy = bc.as_ref().expect("plan active without a prior");
                let obs_t = Tensor::from_rows(
                    1,
                    obs_len,
                    observations[observations.len() - obs_len..].to_vec(),
                );
                policy
                    .select_action(&obs_t, ActionMode::Sample, &mut collect_rng)
                    .data()
                    .to_vec()
            } else {
                actor
                    .select_action(&filter.state.feature(), ActionMode::Sample, &mut collect_rng)
                    .data()
                    .to_vec()
            };
            let native: Vec<f64> = unified[..native_dim].iter().map(|&x| x as f64).collect();
            let (next_obs, reward, done) = env.step(&native);
            ep_return += reward;
            reached |= env.in_goal();
            actions.extend(pad_action(&native, UNIFIED_ACTION_DIM));
            rewards.push(reward as f32);
            observations.extend_from_slice(&next_obs);
            filter.prev_action = Tensor::from_rows(1, UNIFIED_ACTION_DIM, unified);
            observe(&wm, &mut filter, &next_obs, false, &mut collect_rng);
            global_step += 1;
            if done {
                break;
            }
        }

        online.push(TrajectoryRecord {
            trajectory_id: 0,
            embodiment_id: env.embodiment.index(),
            obs_len,
            action_dim: UNIFIED_ACTION_DIM,
            observations,
            actions,
            rewards: Some(rewards),
            meta: RecordMeta {
                source: "online".into(),
                sigma: 0.0,
            },
        });

        // Model updates: one gradient step per `update_every` env steps,
        // once past warm-up.
        let mut wm_acc = crate::worldmodel::WmLossComponents::default();
        let mut agent_acc = crate::agent::AgentUpdate::default();
        let mut n_updates = 0usize;
        if (global_step as usize) > cfg.run_warmup_steps {
            n_updates = cfg.episode_len / cfg.run_update_every.max(1);
            let ratio = if cfg.no_rehearsal { 0.0 } else { cfg.rehearsal_ratio };
            for _ in 0..n_updates {
                let batch: SeqBatch<f32> = mixed_sample(
                    &online,
                    &rehearsal,
                    ratio,
                    cfg.wm_batch,
                    cfg.wm_seq_len,
                    &mut train_rng,
                )?;
                let (components, states) =
                    match wm_train_step(&mut wm, &batch, &wm_adam, grad_step, &mut train_rng) {
                        Ok(v) => v,
                        Err(TrainError::NonFiniteLoss { .. }) => {
                            return Err(diverged(cfg, out_dir, global_step, episode, grad_step));
                        }
                        Err(e) => return Err(e.into()),
                    };
                wm_acc.total += components.total;
                wm_acc.recon += components.recon;
                wm_acc.kl += components.kl;
                wm_acc.kl_raw += components.kl_raw;
                wm_acc.reward_nll += components.reward_nll;

                // Imagination starts: subsample posterior states.
                let total_rows = states.batch();
                let take = cfg.agent_imag_starts.min(total_rows);
                let rows: Vec<LatentState<f32>> = (0..take)
                    .map(|_| states.row(train_rng.gen_range(0..total_rows)))
                    .collect();
                let starts = LatentState::stack(&rows);
                let update = match actor_critic_update(
                    &wm,
                    &mut actor,
                    &mut critic,
                    &starts,
                    &agent_cfg,
                    &agent_adam,
                    grad_step,
                    &mut train_rng,
                ) {
                    Ok(v) => v,
                    Err(TrainError::NonFiniteLoss { .. }) => {
                        return Err(diverged(cfg, out_dir, global_step, episode, grad_step));
                    }
                    Err(e) => return Err(e.into()),
                };
                agent_acc.actor_loss += update.actor_loss;
                agent_acc.critic_loss += update.critic_loss;
                agent_acc.entropy += update.entropy;
                grad_step += 1;
            }
        }
        let denom = n_updates.max(1) as f64;
        episode += 1;

        log.push_episode(EpisodeRecord {
            step: global_step,
            episode,
            ep_return,
            success: reached,
            wm_total: wm_acc.total / denom,
            wm_recon: wm_acc.recon / denom,
            wm_kl: wm_acc.kl / denom,
            wm_kl_raw: wm_acc.kl_raw / denom,
            wm_reward_nll: wm_acc.reward_nll / denom,
            actor_loss: agent_acc.actor_loss / denom,
            critic_loss: agent_acc.critic_loss / denom,
            entropy: agent_acc.entropy / denom,
            bc_fraction: bc_steps as f64 / cfg.episode_len as f64,
        });
        log.timings.push((global_step, started.elapsed().as_secs_f64()));

        if !snapshot_done && (global_step as usize) >= cfg.run_snapshot_step {
            snapshot_done = true;
            write_obs_snapshot(cfg, &online, out_dir)?;
        }

        if global_step >= next_eval || (global_step as usize) >= cfg.run_total_steps {
            let (succ, ret) = evaluate_policy(cfg, &wm, &actor, cfg.run_eval_episodes)?;
            log.push_eval(EvalRecord {
                step: global_step,
                success_rate: succ,
                mean_return: ret,
            });
            best_success = best_success.max(succ);
            final_success = succ;
            while next_eval <= global_step {
                next_eval += cfg.run_eval_every as u64;
            }
            log.flush(out_dir)?;
        }
    }

    log.flush(out_dir)?;
    let mut sets = vec![
        ("wm".to_string(), wm.params.clone()),
        ("actor".to_string(), actor.params.clone()),
        ("critic".to_string(), critic.params.clone()),
        ("critic_target".to_string(), critic.target.clone()),
    ];
    if let Some(policy) = &bc {
        sets.push(("bc".to_string(), policy.params.clone()));
    }
    let ckpt = Checkpoint {
        config_text: cfg.to_text(),
        sets,
    };
    let ckpt_path = out_dir.join("agent.gsac");
    save_checkpoint(&ckpt, &ckpt_path)?;

    Ok(FinetuneReport {
        final_success,
        best_success,
        episodes: episode,
        checkpoint: ckpt_path,
    })
}

fn diverged(
    cfg: &RunConfig,
    out_dir: &Path,
    step: u64,
    episode: u64,
    batch_id: usize,
) -> PipelineError {
    let bundle = out_dir.join("divergence.txt");
    let _ = std::fs::write(
        &bundle,
        format!(
            "non-finite loss\nstep = {step}\nepisode = {episode}\nbatch_id = {batch_id}\n\n{}",
            cfg.to_text()
        ),
    );
    PipelineError::Diverged {
        step,
        episode,
        batch_id: batch_id as u64,
        bundle: bundle.display().to_string(),
    }
}

/// Saves a subsample of collected observations as single-frame records for
/// the distribution-shift diagnostic.
fn write_obs_snapshot(
    cfg: &RunConfig,
    online: &OnlineBuffer,
    out_dir: &Path,
) -> Result<(), PipelineError> {
    let mut frames: Vec<Vec<f32>> = Vec::new();
    for rec in online.records() {
        for t in 0..=rec.len() {
            frames.push(rec.obs(t).to_vec());
        }
    }
    if frames.is_empty() {
        return Ok(());
    }
    let mut rng = seeds::stream(cfg.seed, "snapshot", 0);
    let take = 2000.min(frames.len());
    let mut writer = StoreFileWriter::create(
        &out_dir.join("online_obs_snapshot.gsa1"),
        store_header(cfg),
    )?;
    for _ in 0..take {
        let i = rng.gen_range(0..frames.len());
        writer.append(0, frames[i].clone(), Vec::new(), None, RecordMeta::default())?;
    }
    writer.finish()?;
    Ok(())
}

fn write_manifest(cfg: &RunConfig, out_dir: &Path) -> Result<(), PipelineError> {
    let manifest = format!(
        "code_manifest = {}\nseed = {}\ntask = {}\n",
        env!("GSA_CODE_MANIFEST"),
        cfg.seed,
        cfg.task
    );
    std::fs::write(out_dir.join("manifest.txt"), manifest)?;
    Ok(())
}

pub struct EvalReport {
    pub episodes: usize,
    pub success_rate: f64,
    pub mean_return: f64,
}

/// Evaluates a fine-tuned checkpoint on its task.
pub fn cmd_eval(
    checkpoint_path: &Path,
    task_override: Option<&str>,
    n_episodes: usize,
) -> Result<EvalReport, PipelineError> {
    let (ckpt, _) = load_checkpoint(checkpoint_path)?;
    let mut cfg = RunConfig::parse(&ckpt.config_text)?;
    if let Some(task) = task_override {
        if task != cfg.task {
            return Err(PipelineError::Invalid(format!(
                "checkpoint was trained on {} but {task} was requested",
                cfg.task
            )));
        }
        cfg.task = task.to_string();
    }
    if n_episodes == 0 {
        return Ok(EvalReport {
            episodes: 0,
            success_rate: 0.0,
            mean_return: 0.0,
        });
    }
    let wm = WorldModel::from_params(cfg.wm_config(), ckpt.set("wm")?.clone());
    let agent_cfg = cfg.agent_config();
    let mut actor: Actor<f32> = Actor::new(&agent_cfg, 0);
    actor.params = ckpt.set("actor")?.clone();
    let (success_rate, mean_return) = evaluate_policy(&cfg, &wm, &actor, n_episodes)?;
    Ok(EvalReport {
        episodes: n_episodes,
        success_rate,
        mean_return,
    })
}
