//! Training loops for both models.
//!
//! Each iteration draws a batch of episodes, runs every episode on its own
//! fresh tape (memory and hidden state reset per episode), scales each
//! episode's summed loss by 1/batch, and accumulates gradients additively
//! before a single Adam step. All randomness — batch sampling and Gumbel
//! noise — flows from the trainer's one seeded RNG, so (dataset, seed,
//! config) pins training bit-for-bit, and a checkpointed RNG position
//! resumes it mid-run.

use crate::gridworld::{Action, EpisodeDataset, EpisodeRecord, ACTION_COUNT};
use crate::models::dswm::DswmModel;
use crate::models::world::WorldModel;
use crate::models::Hyper;
use crate::numerics::adam::AdamState;
use crate::numerics::params::{zero_grads, Lease, ParamSet};
use crate::numerics::tape::{Tape, Var};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One loss-curve sample: per-term means over the iteration's batch, each
/// term summed over an episode's steps. The baseline model reports its
/// latent-consistency KL in `l_s` and has no position or s-entropy terms.
#[derive(Clone, Copy, Debug)]
pub struct LossRow {
    pub iteration: u64,
    pub l_obs: f64,
    pub l_pos: f64,
    pub l_s: f64,
    pub neg_entropy_z: f64,
    pub neg_entropy_s: f64,
    pub total: f64,
}

impl LossRow {
    fn zero(iteration: u64) -> LossRow {
        LossRow {
            iteration,
            l_obs: 0.0,
            l_pos: 0.0,
            l_s: 0.0,
            neg_entropy_z: 0.0,
            neg_entropy_s: 0.0,
            total: 0.0,
        }
    }
}

/// A forward pass over one episode: the tape, the parameter lease on it,
/// the scalar root (summed losses over steps t = 0..len−2), and per-term
/// value sums for curve reporting.
pub struct EpisodePass {
    pub tape: Tape,
    pub lease: Lease,
    pub root: Var,
    pub terms: LossRow,
}

pub fn action_onehot_leaf(tape: &mut Tape, action: Option<Action>) -> Var {
    let v = match action {
        Some(a) => a.onehot().to_vec(),
        None => vec![0.0; ACTION_COUNT],
    };
    tape.leaf(v)
}

/// Unrolled DSWM pass: 50 inference+generation steps, with step t's losses
/// assembled once step t+1's inference provides the next context posterior.
/// The final step contributes inference-only terms.
pub fn dswm_episode_pass(
    model: &DswmModel,
    episode: &EpisodeRecord,
    rng: &mut ChaCha8Rng,
) -> EpisodePass {
    let hyper = model.hyper;
    let mut tape = Tape::new();
    let lease = model.params.lease_all(&mut tape);
    let mut store = model.new_store();
    let mut h = model.initial_hidden(&mut tape);
    let mut prev: Option<(crate::models::dswm::DswmStepOutput, Var)> = None;
    let mut step_totals = Vec::with_capacity(episode.steps.len());
    let mut terms = LossRow::zero(0);
    for (t, step) in episode.steps.iter().enumerate() {
        let o_leaf = tape.leaf(step.observation.to_f64());
        let a_prev = action_onehot_leaf(
            &mut tape,
            if t == 0 { None } else { Some(episode.steps[t - 1].action) },
        );
        let a_t = action_onehot_leaf(&mut tape, Some(step.action));
        let out =
            model.dswm_step(&mut tape, &lease, rng, &mut store, o_leaf, a_prev, a_t, h);
        if let Some((prev_out, prev_o)) = prev.take() {
            let losses = model.compute_losses(
                &mut tape,
                &lease,
                &prev_out,
                &out.s,
                prev_o,
                o_leaf,
                (step.position.r(), step.position.c()),
                hyper.beta_z,
                hyper.beta_s,
            );
            terms.l_obs += tape.item(losses.l_obs);
            terms.l_pos += tape.item(losses.l_pos);
            terms.l_s += tape.item(losses.l_s);
            terms.neg_entropy_z += tape.item(losses.neg_entropy_z);
            terms.neg_entropy_s += tape.item(losses.neg_entropy_s);
            terms.total += tape.item(losses.total);
            step_totals.push(losses.total);
        }
        h = out.h;
        prev = Some((out, o_leaf));
    }
    let root = tape.add_n(&step_totals);
    EpisodePass { tape, lease, root, terms }
}

/// Unrolled baseline pass, same batching and loss alignment as the DSWM.
pub fn world_episode_pass(
    model: &WorldModel,
    episode: &EpisodeRecord,
    rng: &mut ChaCha8Rng,
) -> EpisodePass {
    let hyper = model.hyper;
    let mut tape = Tape::new();
    let lease = model.params.lease_all(&mut tape);
    let mut h = model.initial_hidden(&mut tape);
    let mut prev: Option<(crate::models::world::WorldStepOutput, Var)> = None;
    let mut step_totals = Vec::with_capacity(episode.steps.len());
    let mut terms = LossRow::zero(0);
    for step in episode.steps.iter() {
        let o_leaf = tape.leaf(step.observation.to_f64());
        let a_t = action_onehot_leaf(&mut tape, Some(step.action));
        let out = model.world_step(&mut tape, &lease, rng, o_leaf, a_t, h);
        if let Some((prev_out, prev_o)) = prev.take() {
            let losses = model.compute_losses(
                &mut tape,
                &prev_out,
                &out.z,
                prev_o,
                o_leaf,
                hyper.beta_z,
            );
            terms.l_obs += tape.item(losses.l_obs);
            terms.l_s += tape.item(losses.l_z);
            terms.neg_entropy_z += tape.item(losses.neg_entropy_z);
            terms.total += tape.item(losses.total);
            step_totals.push(losses.total);
        }
        h = out.h;
        prev = Some((out, o_leaf));
    }
    let root = tape.add_n(&step_totals);
    EpisodePass { tape, lease, root, terms }
}

fn accumulate_scaled(acc: &mut LossRow, pass: &LossRow, scale: f64) {
    acc.l_obs += pass.l_obs * scale;
    acc.l_pos += pass.l_pos * scale;
    acc.l_s += pass.l_s * scale;
    acc.neg_entropy_z += pass.neg_entropy_z * scale;
    acc.neg_entropy_s += pass.neg_entropy_s * scale;
    acc.total += pass.total * scale;
}

/// Uniform access to either trainer's persistent state, for checkpointing
/// and generic training loops.
pub trait TrainerAccess {
    fn step_iteration(&mut self, dataset: &EpisodeDataset) -> LossRow;
    fn iteration(&self) -> u64;
    fn params(&self) -> &ParamSet;
    fn adam(&self) -> &AdamState;
    fn rng(&self) -> &ChaCha8Rng;
    /// Mutable handles in one call so restore can touch everything at once.
    fn state_mut(&mut self) -> (&mut ParamSet, &mut AdamState, &mut ChaCha8Rng, &mut u64);
}

macro_rules! trainer_impl {
    ($trainer:ident, $model:ty, $pass:ident) => {
        pub struct $trainer {
            pub model: $model,
            pub adam: AdamState,
            pub rng: ChaCha8Rng,
            pub iteration: u64,
            pub curve: Vec<LossRow>,
        }

        impl TrainerAccess for $trainer {
            fn step_iteration(&mut self, dataset: &EpisodeDataset) -> LossRow {
                $trainer::step_iteration(self, dataset)
            }
            fn iteration(&self) -> u64 {
                self.iteration
            }
            fn params(&self) -> &ParamSet {
                &self.model.params
            }
            fn adam(&self) -> &AdamState {
                &self.adam
            }
            fn rng(&self) -> &ChaCha8Rng {
                &self.rng
            }
            fn state_mut(&mut self) -> (&mut ParamSet, &mut AdamState, &mut ChaCha8Rng, &mut u64) {
                (&mut self.model.params, &mut self.adam, &mut self.rng, &mut self.iteration)
            }
        }

        impl $trainer {
            /// Seeded construction: the RNG initializes the parameters and
            /// then keeps driving batch sampling and noise draws.
            pub fn new(hyper: Hyper, seed: u64) -> $trainer {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let model = <$model>::new(hyper, &mut rng);
                let adam = AdamState::new(hyper.learning_rate, &model.params);
                $trainer { model, adam, rng, iteration: 0, curve: Vec::new() }
            }

            /// One batch: sample episode indices, run each on a fresh tape,
            /// average gradients, apply Adam, record the loss row.
            pub fn step_iteration(&mut self, dataset: &EpisodeDataset) -> LossRow {
                let batch = self.model.hyper.batch_size;
                let indices: Vec<usize> = (0..batch)
                    .map(|_| self.rng.gen_range(0..dataset.episodes.len()))
                    .collect();
                let mut grads = zero_grads(&self.model.params);
                let mut row = LossRow::zero(self.iteration + 1);
                let inv = 1.0 / batch as f64;
                for idx in indices {
                    let mut pass =
                        $pass(&self.model, &dataset.episodes[idx], &mut self.rng);
                    let scaled = pass.tape.scale(pass.root, inv);
                    pass.tape.backward(scaled);
                    pass.lease.accumulate_grads(&pass.tape, &mut grads);
                    accumulate_scaled(&mut row, &pass.terms, inv);
                }
                self.adam.step(&mut self.model.params, &grads);
                self.iteration += 1;
                self.curve.push(row);
                row
            }

            /// Run until the iteration counter reaches `until`, reporting
            /// each row to `progress`.
            pub fn run(
                &mut self,
                dataset: &EpisodeDataset,
                until: u64,
                mut progress: impl FnMut(&LossRow),
            ) {
                while self.iteration < until {
                    let row = self.step_iteration(dataset);
                    progress(&row);
                }
            }
        }
    };
}

trainer_impl!(DswmTrainer, DswmModel, dswm_episode_pass);
trainer_impl!(WorldTrainer, WorldModel, world_episode_pass);

/// Train a DSWM from scratch for the configured iteration count.
pub fn train_dswm(dataset: &EpisodeDataset, hyper: Hyper, seed: u64) -> (DswmModel, Vec<LossRow>) {
    let mut trainer = DswmTrainer::new(hyper, seed);
    trainer.run(dataset, hyper.iterations, |_| {});
    (trainer.model, trainer.curve)
}

/// Train the baseline from scratch for the configured iteration count.
pub fn train_world(dataset: &EpisodeDataset, hyper: Hyper, seed: u64) -> (WorldModel, Vec<LossRow>) {
    let mut trainer = WorldTrainer::new(hyper, seed);
    trainer.run(dataset, hyper.iterations, |_| {});
    (trainer.model, trainer.curve)
}
