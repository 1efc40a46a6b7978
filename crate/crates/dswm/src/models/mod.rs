//! The dual-stream world model, the single-stream baseline, their losses,
//! and the training loop.

pub mod dswm;
pub mod layers;
pub mod training;
pub mod world;

pub use dswm::{DswmModel, DswmStepOutput, LatentSample, LossTerms};
pub use training::{train_dswm, train_world, DswmTrainer, LossRow, TrainerAccess, WorldTrainer};
pub use world::{WorldModel, WorldStepOutput};

/// Which of the two generative models an artifact belongs to.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub enum ModelKind {
    Dswm,
    World,
}

impl ModelKind {
    pub const ALL: [ModelKind; 2] = [ModelKind::Dswm, ModelKind::World];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Dswm => "dswm",
            ModelKind::World => "world",
        }
    }

    pub fn from_name(name: &str) -> Option<ModelKind> {
        ModelKind::ALL.into_iter().find(|k| k.name() == name)
    }
}

use crate::gridworld::{ACTION_COUNT, OBS_DIM};

/// Model/training hyperparameters. Defaults follow the published table:
/// 128-dim z over 8 distributions, 49-dim s over 1, hidden size 256,
/// batch 3, 5000 iterations at learning rate 5e-4, β = 0.001.
#[derive(Clone, Copy, Debug)]
pub struct Hyper {
    pub hidden: usize,
    pub z_groups: usize,
    pub z_categories: usize,
    pub s_categories: usize,
    pub temperature: f64,
    pub beta_z: f64,
    pub beta_s: f64,
    pub dnd_top_k: usize,
    pub dnd_kappa: f64,
    pub learning_rate: f64,
    pub iterations: u64,
    pub batch_size: usize,
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper {
            hidden: 256,
            z_groups: 8,
            z_categories: 16,
            s_categories: 49,
            temperature: 1.0,
            beta_z: 0.001,
            beta_s: 0.001,
            dnd_top_k: 5,
            dnd_kappa: 0.1,
            learning_rate: 5e-4,
            iterations: 5000,
            batch_size: 3,
        }
    }
}

impl Hyper {
    /// Total z sample width (groups × categories).
    pub fn z_total(&self) -> usize {
        self.z_groups * self.z_categories
    }

    /// Context-encoder input width: observation plus previous-action onehot.
    pub fn context_input(&self) -> usize {
        OBS_DIM + ACTION_COUNT
    }

    /// DSWM GRU input width: s sample plus action onehot.
    pub fn gru_input(&self) -> usize {
        self.s_categories + ACTION_COUNT
    }

    /// WORLD GRU input width: z sample plus action onehot.
    pub fn world_gru_input(&self) -> usize {
        self.z_total() + ACTION_COUNT
    }
}
