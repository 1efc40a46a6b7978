//! Experiment configuration: TOML round-trip with the published parameter
//! names preserved as keys, validation, and a content hash that stamps
//! every output file.

use crate::gridworld::TopologyKind;
use crate::harness::{HarnessError, Result};
use crate::models::Hyper;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::Path;

/// Reinforcement-learning settings (agent side; the generative model is
/// frozen during RL).
#[derive(Clone, Copy, Debug)]
pub struct RlSettings {
    pub gamma: f64,
    pub alpha: f64,
    pub dyna_rollout_length: usize,
    pub dyna_rollout_probability: f64,
    pub tau: f64,
}

/// Dataset and evaluation scale knobs.
#[derive(Clone, Debug)]
pub struct ScaleSettings {
    pub topologies: Vec<TopologyKind>,
    pub train_pattern_maps: usize,
    pub test_pattern_maps: usize,
    pub train_episodes: usize,
    pub episode_length: usize,
    pub p_repeat: f64,
    pub rollout_warmup: usize,
    pub rollout_horizon: usize,
    pub rollout_seeds: usize,
    pub place_field_episodes: usize,
    pub rl_seeds: usize,
    pub rl_episodes: usize,
    pub rl_max_steps: usize,
    pub goal_switch_episode: usize,
}

#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    pub hyper: Hyper,
    pub rl: RlSettings,
    pub scale: ScaleSettings,
    pub master_seed: u64,
    pub workers: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            hyper: Hyper::default(),
            rl: RlSettings {
                gamma: 0.99,
                alpha: 0.1,
                dyna_rollout_length: 5,
                dyna_rollout_probability: 0.2,
                tau: 0.001,
            },
            scale: ScaleSettings {
                topologies: TopologyKind::ALL.to_vec(),
                train_pattern_maps: 100,
                test_pattern_maps: 5,
                train_episodes: 1000,
                episode_length: 50,
                p_repeat: 0.7,
                rollout_warmup: 30,
                rollout_horizon: 20,
                rollout_seeds: 5,
                place_field_episodes: 40,
                rl_seeds: 5,
                rl_episodes: 100,
                rl_max_steps: 100,
                goal_switch_episode: 50,
            },
            master_seed: 20260816,
            workers: 1,
        }
    }
}

// --- serialized form ------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct GenerativeSection {
    #[serde(rename = "z total size")]
    z_total_size: usize,
    #[serde(rename = "z number distributions")]
    z_number_distributions: usize,
    #[serde(rename = "s total size")]
    s_total_size: usize,
    #[serde(rename = "s number distributions")]
    s_number_distributions: usize,
    #[serde(rename = "Learning rate")]
    learning_rate: f64,
    #[serde(rename = "h size")]
    h_size: usize,
    beta_z: f64,
    beta_s: f64,
    #[serde(rename = "Iterations")]
    iterations: u64,
    #[serde(rename = "Batch size")]
    batch_size: usize,
    #[serde(rename = "Gumbel temperature")]
    gumbel_temperature: f64,
    #[serde(rename = "DND top k")]
    dnd_top_k: usize,
    #[serde(rename = "DND kappa")]
    dnd_kappa: f64,
}

#[derive(Serialize, Deserialize)]
struct ReinforcementSection {
    gamma: f64,
    alpha: f64,
    #[serde(rename = "Dyna rollout length")]
    dyna_rollout_length: usize,
    #[serde(rename = "Dyna rollout frequency")]
    dyna_rollout_frequency: f64,
    tau: f64,
}

#[derive(Serialize, Deserialize)]
struct ExperimentSection {
    topologies: Vec<String>,
    train_pattern_maps: usize,
    test_pattern_maps: usize,
    train_episodes: usize,
    episode_length: usize,
    p_repeat: f64,
    rollout_warmup: usize,
    rollout_horizon: usize,
    rollout_seeds: usize,
    place_field_episodes: usize,
    rl_seeds: usize,
    rl_episodes: usize,
    rl_max_steps: usize,
    goal_switch_episode: usize,
    master_seed: u64,
    workers: usize,
}

#[derive(Serialize, Deserialize)]
struct ConfigFile {
    generative: GenerativeSection,
    reinforcement: ReinforcementSection,
    experiment: ExperimentSection,
}

impl ExperimentConfig {
    fn to_file(&self) -> ConfigFile {
        ConfigFile {
            generative: GenerativeSection {
                z_total_size: self.hyper.z_total(),
                z_number_distributions: self.hyper.z_groups,
                s_total_size: self.hyper.s_categories,
                s_number_distributions: 1,
                learning_rate: self.hyper.learning_rate,
                h_size: self.hyper.hidden,
                beta_z: self.hyper.beta_z,
                beta_s: self.hyper.beta_s,
                iterations: self.hyper.iterations,
                batch_size: self.hyper.batch_size,
                gumbel_temperature: self.hyper.temperature,
                dnd_top_k: self.hyper.dnd_top_k,
                dnd_kappa: self.hyper.dnd_kappa,
            },
            reinforcement: ReinforcementSection {
                gamma: self.rl.gamma,
                alpha: self.rl.alpha,
                dyna_rollout_length: self.rl.dyna_rollout_length,
                dyna_rollout_frequency: self.rl.dyna_rollout_probability,
                tau: self.rl.tau,
            },
            experiment: ExperimentSection {
                topologies: self.scale.topologies.iter().map(|t| t.name().to_string()).collect(),
                train_pattern_maps: self.scale.train_pattern_maps,
                test_pattern_maps: self.scale.test_pattern_maps,
                train_episodes: self.scale.train_episodes,
                episode_length: self.scale.episode_length,
                p_repeat: self.scale.p_repeat,
                rollout_warmup: self.scale.rollout_warmup,
                rollout_horizon: self.scale.rollout_horizon,
                rollout_seeds: self.scale.rollout_seeds,
                place_field_episodes: self.scale.place_field_episodes,
                rl_seeds: self.scale.rl_seeds,
                rl_episodes: self.scale.rl_episodes,
                rl_max_steps: self.scale.rl_max_steps,
                goal_switch_episode: self.scale.goal_switch_episode,
                master_seed: self.master_seed,
                workers: self.workers,
            },
        }
    }

    fn from_file(file: ConfigFile) -> Result<ExperimentConfig> {
        let g = &file.generative;
        if g.z_number_distributions == 0 || !g.z_total_size.is_multiple_of(g.z_number_distributions) {
            return Err(HarnessError::Config(format!(
                "z total size {} not divisible by z number distributions {}",
                g.z_total_size, g.z_number_distributions
            )));
        }
        if g.s_number_distributions != 1 {
            return Err(HarnessError::Config(
                "s number distributions must be 1".to_string(),
            ));
        }
        let topologies = file
            .experiment
            .topologies
            .iter()
            .map(|name| {
                TopologyKind::from_name(name).ok_or_else(|| {
                    HarnessError::Config(format!("unknown topology {name:?}"))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let config = ExperimentConfig {
            hyper: Hyper {
                hidden: g.h_size,
                z_groups: g.z_number_distributions,
                z_categories: g.z_total_size / g.z_number_distributions,
                s_categories: g.s_total_size,
                temperature: g.gumbel_temperature,
                beta_z: g.beta_z,
                beta_s: g.beta_s,
                dnd_top_k: g.dnd_top_k,
                dnd_kappa: g.dnd_kappa,
                learning_rate: g.learning_rate,
                iterations: g.iterations,
                batch_size: g.batch_size,
            },
            rl: RlSettings {
                gamma: file.reinforcement.gamma,
                alpha: file.reinforcement.alpha,
                dyna_rollout_length: file.reinforcement.dyna_rollout_length,
                dyna_rollout_probability: file.reinforcement.dyna_rollout_frequency,
                tau: file.reinforcement.tau,
            },
            scale: ScaleSettings {
                topologies,
                train_pattern_maps: file.experiment.train_pattern_maps,
                test_pattern_maps: file.experiment.test_pattern_maps,
                train_episodes: file.experiment.train_episodes,
                episode_length: file.experiment.episode_length,
                p_repeat: file.experiment.p_repeat,
                rollout_warmup: file.experiment.rollout_warmup,
                rollout_horizon: file.experiment.rollout_horizon,
                rollout_seeds: file.experiment.rollout_seeds,
                place_field_episodes: file.experiment.place_field_episodes,
                rl_seeds: file.experiment.rl_seeds,
                rl_episodes: file.experiment.rl_episodes,
                rl_max_steps: file.experiment.rl_max_steps,
                goal_switch_episode: file.experiment.goal_switch_episode,
            },
            master_seed: file.experiment.master_seed,
            workers: file.experiment.workers,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.scale;
        let checks: [(bool, &str); 12] = [
            (!s.topologies.is_empty(), "topologies must be nonempty"),
            (s.episode_length >= 2, "episode_length must be at least 2"),
            (s.train_episodes > 0, "train_episodes must be positive"),
            (s.train_pattern_maps > 0, "train_pattern_maps must be positive"),
            (s.test_pattern_maps > 0, "test_pattern_maps must be positive"),
            ((0.0..=1.0).contains(&s.p_repeat), "p_repeat must lie in [0, 1]"),
            (s.rollout_warmup > 0, "rollout_warmup must be positive"),
            (s.rollout_horizon > 0, "rollout_horizon must be positive"),
            (
                s.rollout_warmup + s.rollout_horizon <= s.episode_length,
                "rollout_warmup + rollout_horizon must fit in episode_length",
            ),
            (s.goal_switch_episode <= s.rl_episodes, "goal switch must fall inside the session"),
            (self.hyper.batch_size > 0, "Batch size must be positive"),
            (self.hyper.temperature > 0.0, "Gumbel temperature must be positive"),
        ];
        for (ok, message) in checks {
            if !ok {
                return Err(HarnessError::Config(message.to_string()));
            }
        }
        let r = &self.rl;
        if !(0.0..1.0).contains(&r.gamma) {
            return Err(HarnessError::Config("gamma must lie in [0, 1)".to_string()));
        }
        if !(0.0..=1.0).contains(&r.dyna_rollout_probability) {
            return Err(HarnessError::Config(
                "Dyna rollout frequency must lie in [0, 1]".to_string(),
            ));
        }
        if r.tau <= 0.0 {
            return Err(HarnessError::Config("tau must be positive".to_string()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(&self.to_file()).expect("config serialization cannot fail")
    }

    pub fn from_toml(text: &str) -> Result<ExperimentConfig> {
        let file: ConfigFile = toml::from_str(text)
            .map_err(|e| HarnessError::Config(format!("parse failure: {e}")))?;
        ExperimentConfig::from_file(file)
    }

    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            HarnessError::Config(format!("cannot read {}: {e}", path.display()))
        })?;
        ExperimentConfig::from_toml(&text)
    }

    /// Serialized form with the worker count pinned. Scheduling never changes
    /// results (every job carries its own derived seed), so it must not
    /// change the recorded identity of an experiment either.
    pub fn canonical_toml(&self) -> String {
        let mut pinned = self.clone();
        pinned.workers = 1;
        pinned.to_toml()
    }

    /// Content hash over the canonical serialized form; stamped into every
    /// output file so results and their settings can never separate.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.canonical_toml().as_bytes());
        let digest = hasher.finalize();
        let mut hex = String::with_capacity(16);
        for byte in &digest[..8] {
            hex.push_str(&format!("{byte:02x}"));
        }
        hex
    }
}
