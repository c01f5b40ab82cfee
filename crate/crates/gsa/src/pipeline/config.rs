//! Run configuration: flat `key = value` text with dotted namespaces.
//!
//! Every run serializes its full configuration into the run directory
//! before training starts; a run is reproducible from that snapshot plus
//! the seed. Unknown keys are rejected so typos cannot silently fall back
//! to defaults.

use thiserror::Error;

use crate::agent::{AgentConfig, BcConfig};
use crate::worldmodel::{ObsLayout, WorldModelConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got `{text}`")]
    BadLine { line: usize, text: String },
    #[error("line {line}: unknown key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: value `{value}` for `{key}`: {reason}")]
    BadValue {
        line: usize,
        key: String,
        value: String,
        reason: String,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub task: String,
    pub seed: u64,
    /// "image" or "vector".
    pub obs_mode: String,
    pub image_size: usize,
    pub episode_len: usize,
    pub action_repeat: usize,

    pub wm_deter_dim: usize,
    pub wm_stoch_dim: usize,
    pub wm_hidden: usize,
    pub wm_feat_dim: usize,
    pub wm_conv1: usize,
    pub wm_conv2: usize,
    pub wm_beta: f64,
    pub wm_free_bits: f64,
    pub wm_lr: f64,
    pub wm_adam_eps: f64,
    pub wm_grad_clip: f64,
    pub wm_batch: usize,
    pub wm_seq_len: usize,

    pub agent_hidden: usize,
    pub agent_gamma: f64,
    pub agent_lambda: f64,
    pub agent_entropy_coef: f64,
    pub agent_lr: f64,
    pub agent_target_fraction: f64,
    pub agent_horizon: usize,
    pub agent_imag_starts: usize,

    pub bc_hidden: usize,
    pub bc_steps: usize,
    pub bc_batch: usize,
    pub bc_lr: f64,

    pub data_trajectories_per_pair: usize,
    pub data_explore_fraction: f64,
    pub data_sigmas: Vec<f64>,

    pub retrieval_k: usize,
    pub retrieval_queries: usize,

    pub rehearsal_ratio: f64,
    pub guidance_schedule: String,
    pub guidance_inclusive_end: bool,

    pub run_total_steps: usize,
    /// Environment steps per gradient step.
    pub run_update_every: usize,
    pub run_warmup_steps: usize,
    pub run_buffer_capacity: usize,
    pub run_eval_every: usize,
    pub run_eval_episodes: usize,
    /// Step at which to snapshot collected observations for the
    /// distribution-shift diagnostic; 0 disables.
    pub run_snapshot_step: usize,

    pub pretrain_steps: usize,

    pub no_pretrain: bool,
    pub no_rehearsal: bool,
    pub no_guidance: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: "e1-corridor".into(),
            seed: 0,
            obs_mode: "image".into(),
            image_size: 16,
            episode_len: 100,
            action_repeat: 1,

            wm_deter_dim: 128,
            wm_stoch_dim: 16,
            wm_hidden: 128,
            wm_feat_dim: 128,
            wm_conv1: 16,
            wm_conv2: 32,
            wm_beta: 1.0,
            wm_free_bits: 1.0,
            wm_lr: 1e-4,
            wm_adam_eps: 1e-5,
            wm_grad_clip: 100.0,
            wm_batch: 16,
            wm_seq_len: 64,

            agent_hidden: 128,
            agent_gamma: 0.99,
            agent_lambda: 0.95,
            agent_entropy_coef: 1e-4,
            agent_lr: 8e-5,
            agent_target_fraction: 0.02,
            agent_horizon: 16,
            agent_imag_starts: 64,

            bc_hidden: 128,
            bc_steps: 6000,
            bc_batch: 64,
            bc_lr: 3e-4,

            data_trajectories_per_pair: 200,
            data_explore_fraction: 0.25,
            data_sigmas: vec![0.1, 0.3, 0.5, 1.0, 2.0],

            retrieval_k: 256,
            retrieval_queries: 1,

            rehearsal_ratio: 0.25,
            guidance_schedule: "linear(1,0,15000)".into(),
            guidance_inclusive_end: false,

            run_total_steps: 30_000,
            run_update_every: 2,
            run_warmup_steps: 1500,
            run_buffer_capacity: 1000,
            run_eval_every: 1500,
            run_eval_episodes: 20,
            run_snapshot_step: 5000,

            pretrain_steps: 20_000,

            no_pretrain: false,
            no_rehearsal: false,
            no_guidance: false,
        }
    }
}

macro_rules! config_keys {
    ($($key:literal => $field:ident : $kind:ident),+ $(,)?) => {
        impl RunConfig {
            pub fn apply(&mut self, key: &str, value: &str, line: usize) -> Result<(), ConfigError> {
                match key {
                    $($key => self.$field = parse_value!($kind, key, value, line)?,)+
                    _ => {
                        return Err(ConfigError::UnknownKey {
                            line,
                            key: key.to_string(),
                        })
                    }
                }
                Ok(())
            }

            /// Full snapshot, every key in a fixed order.
            pub fn to_text(&self) -> String {
                let mut out = String::new();
                $(out.push_str(&format!("{} = {}\n", $key, emit_value!($kind, &self.$field)));)+
                out
            }
        }
    };
}

macro_rules! parse_value {
    (string, $key:expr, $value:expr, $line:expr) => {
        Ok::<String, ConfigError>($value.to_string())
    };
    (usize, $key:expr, $value:expr, $line:expr) => {
        $value.parse::<usize>().map_err(|e| ConfigError::BadValue {
            line: $line,
            key: $key.to_string(),
            value: $value.to_string(),
            reason: e.to_string(),
        })
    };
    (u64, $key:expr, $value:expr, $line:expr) => {
        $value.parse::<u64>().map_err(|e| ConfigError::BadValue {
            line: $line,
            key: $key.to_string(),
            value: $value.to_string(),
            reason: e.to_string(),
        })
    };
    (f64, $key:expr, $value:expr, $line:expr) => {
        $value.parse::<f64>().map_err(|e| ConfigError::BadValue {
            line: $line,
            key: $key.to_string(),
            value: $value.to_string(),
            reason: e.to_string(),
        })
    };
    (bool, $key:expr, $value:expr, $line:expr) => {
        $value.parse::<bool>().map_err(|e| ConfigError::BadValue {
            line: $line,
            key: $key.to_string(),
            value: $value.to_string(),
            reason: e.to_string(),
        })
    };
    (f64list, $key:expr, $value:expr, $line:expr) => {
        $value
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<Result<Vec<f64>, _>>()
            .map_err(|e| ConfigError::BadValue {
                line: $line,
                key: $key.to_string(),
                value: $value.to_string(),
                reason: e.to_string(),
            })
    };
}

macro_rules! emit_value {
    (string, $v:expr) => {
        $v.clone()
    };
    (usize, $v:expr) => {
        $v.to_string()
    };
    (u64, $v:expr) => {
        $v.to_string()
    };
    (f64, $v:expr) => {
        format!("{}", $v)
    };
    (bool, $v:expr) => {
        $v.to_string()
    };
    (f64list, $v:expr) => {
        $v.iter()
            .map(|x| format!("{}", x))
            .collect::<Vec<_>>()
            .join(",")
    };
}

config_keys! {
    "task" => task: string,
    "seed" => seed: u64,
    "obs_mode" => obs_mode: string,
    "image_size" => image_size: usize,
    "episode_len" => episode_len: usize,
    "action_repeat" => action_repeat: usize,
    "worldmodel.deter_dim" => wm_deter_dim: usize,
    "worldmodel.stoch_dim" => wm_stoch_dim: usize,
    "worldmodel.hidden" => wm_hidden: usize,
    "worldmodel.feat_dim" => wm_feat_dim: usize,
    "worldmodel.conv1" => wm_conv1: usize,
    "worldmodel.conv2" => wm_conv2: usize,
    "worldmodel.beta" => wm_beta: f64,
    "worldmodel.free_bits" => wm_free_bits: f64,
    "worldmodel.lr" => wm_lr: f64,
    "worldmodel.adam_eps" => wm_adam_eps: f64,
    "worldmodel.grad_clip" => wm_grad_clip: f64,
    "worldmodel.batch" => wm_batch: usize,
    "worldmodel.seq_len" => wm_seq_len: usize,
    "agent.hidden" => agent_hidden: usize,
    "agent.gamma" => agent_gamma: f64,
    "agent.lambda" => agent_lambda: f64,
    "agent.entropy_coef" => agent_entropy_coef: f64,
    "agent.lr" => agent_lr: f64,
    "agent.target_fraction" => agent_target_fraction: f64,
    "agent.horizon" => agent_horizon: usize,
    "agent.imag_starts" => agent_imag_starts: usize,
    "bc.hidden" => bc_hidden: usize,
    "bc.steps" => bc_steps: usize,
    "bc.batch" => bc_batch: usize,
    "bc.lr" => bc_lr: f64,
    "data.trajectories_per_pair" => data_trajectories_per_pair: usize,
    "data.explore_fraction" => data_explore_fraction: f64,
    "data.sigmas" => data_sigmas: f64list,
    "retrieval.k" => retrieval_k: usize,
    "retrieval.queries" => retrieval_queries: usize,
    "rehearsal.ratio" => rehearsal_ratio: f64,
    "guidance.schedule" => guidance_schedule: string,
    "guidance.inclusive_end" => guidance_inclusive_end: bool,
    "run.total_steps" => run_total_steps: usize,
    "run.update_every" => run_update_every: usize,
    "run.warmup_steps" => run_warmup_steps: usize,
    "run.buffer_capacity" => run_buffer_capacity: usize,
    "run.eval_every" => run_eval_every: usize,
    "run.eval_episodes" => run_eval_episodes: usize,
    "run.snapshot_step" => run_snapshot_step: usize,
    "pretrain.steps" => pretrain_steps: usize,
    "no_pretrain" => no_pretrain: bool,
    "no_rehearsal" => no_rehearsal: bool,
    "no_guidance" => no_guidance: bool,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Applies `key = value` lines on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let stripped = match raw.find('#') {
                Some(p) => &raw[..p],
                None => raw,
            };
            let trimmed = stripped.trim();
            if trimmed.is_empty() {
                continue;
            }
            let Some((key, value)) = trimmed.split_once('=') else {
                return Err(ConfigError::BadLine {
                    line,
                    text: trimmed.to_string(),
                });
            };
            self.apply(key.trim(), value.trim(), line)?;
        }
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn obs_layout(&self) -> ObsLayout {
        match self.obs_mode.as_str() {
            "vector" => ObsLayout::Vector {
                dim: crate::envs::VECTOR_OBS_DIM,
            },
            _ => ObsLayout::Image {
                size: self.image_size,
            },
        }
    }

    pub fn wm_config(&self) -> WorldModelConfig {
        WorldModelConfig {
            obs: self.obs_layout(),
            action_dim: crate::envs::UNIFIED_ACTION_DIM,
            deter_dim: self.wm_deter_dim,
            stoch_dim: self.wm_stoch_dim,
            hidden: self.wm_hidden,
            feat_dim: self.wm_feat_dim,
            conv_channels: [self.wm_conv1, self.wm_conv2],
            beta: self.wm_beta,
            free_bits: self.wm_free_bits,
        }
    }

    pub fn agent_config(&self) -> AgentConfig {
        AgentConfig {
            state_dim: self.wm_deter_dim + self.wm_stoch_dim,
            action_dim: crate::envs::UNIFIED_ACTION_DIM,
            hidden: self.agent_hidden,
            gamma: self.agent_gamma,
            lam: self.agent_lambda,
            entropy_coef: self.agent_entropy_coef,
            lr: self.agent_lr,
            target_fraction: self.agent_target_fraction,
            horizon: self.agent_horizon,
        }
    }

    pub fn bc_config(&self) -> BcConfig {
        let mut cfg = BcConfig::for_obs(
            self.obs_layout(),
            crate::envs::UNIFIED_ACTION_DIM,
            self.bc_hidden,
        );
        cfg.lr = self.bc_lr;
        cfg
    }

    pub fn wm_adam(&self) -> crate::numerics::AdamConfig {
        crate::numerics::AdamConfig {
            lr: self.wm_lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: self.wm_adam_eps,
            clip: self.wm_grad_clip,
        }
    }

    pub fn agent_adam(&self) -> crate::numerics::AdamConfig {
        crate::numerics::AdamConfig {
            lr: self.agent_lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: self.wm_adam_eps,
            clip: self.wm_grad_clip,
        }
    }
}
