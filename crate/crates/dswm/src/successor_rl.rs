//! Successor-similarity reinforcement learning: per-action successor
//! matrices with cosine-similarity Q-values, a set-based reward vector, and
//! optional Dyna updates imagined through a frozen dual-stream model.

use crate::dnd::DndStore;
use crate::gridworld::{
    render_observation, step_dynamics, Action, GoalTask, Observation, PatternMap, Position,
    Topology, ACTION_COUNT, GRID,
};
use crate::models::dswm::LatentSample;
use crate::models::training::action_onehot_leaf;
use crate::models::{DswmModel, WorldModel};
use crate::numerics::params::Lease;
use crate::numerics::tape::{Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Which feature space the agent learns successor weights over.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BasisKind {
    /// Concatenated group probabilities of the baseline's content code.
    WorldZ,
    /// Context probabilities of the dual-stream model.
    DswmS,
    /// Position onehot over the full grid.
    Onehot,
}

/// A feature basis, carrying the frozen model it reads from when one is
/// needed.
pub enum FeatureBasis<'a> {
    WorldZ(&'a WorldModel),
    DswmS(&'a DswmModel),
    Onehot,
}

impl FeatureBasis<'_> {
    pub fn kind(&self) -> BasisKind {
        match self {
            FeatureBasis::WorldZ(_) => BasisKind::WorldZ,
            FeatureBasis::DswmS(_) => BasisKind::DswmS,
            FeatureBasis::Onehot => BasisKind::Onehot,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            FeatureBasis::WorldZ(m) => m.hyper.z_total(),
            FeatureBasis::DswmS(m) => m.hyper.s_categories,
            FeatureBasis::Onehot => GRID * GRID,
        }
    }
}

/// The four agent variants of the results table: a basis plus whether Dyna
/// imagination is enabled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AgentVariant {
    DswmDyna,
    Dswm,
    World,
    Onehot,
}

impl AgentVariant {
    pub const ALL: [AgentVariant; 4] =
        [AgentVariant::DswmDyna, AgentVariant::Dswm, AgentVariant::World, AgentVariant::Onehot];

    pub fn name(self) -> &'static str {
        match self {
            AgentVariant::DswmDyna => "dswm+dyna",
            AgentVariant::Dswm => "dswm",
            AgentVariant::World => "world",
            AgentVariant::Onehot => "onehot",
        }
    }

    pub fn basis_kind(self) -> BasisKind {
        match self {
            AgentVariant::DswmDyna | AgentVariant::Dswm => BasisKind::DswmS,
            AgentVariant::World => BasisKind::WorldZ,
            AgentVariant::Onehot => BasisKind::Onehot,
        }
    }

    pub fn use_dyna(self) -> bool {
        self == AgentVariant::DswmDyna
    }
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = out.iter().sum();
    for o in &mut out {
        *o /= total;
    }
    out
}

/// Softmax within each contiguous group of `logits`, concatenated.
fn grouped_softmax(logits: &[f64], groups: usize) -> Vec<f64> {
    assert_eq!(logits.len() % groups, 0);
    let categories = logits.len() / groups;
    let mut out = Vec::with_capacity(logits.len());
    for g in 0..groups {
        out.extend(softmax(&logits[g * categories..(g + 1) * categories]));
    }
    out
}

fn position_onehot(pos: Position) -> Vec<f64> {
    let mut phi = vec![0.0; GRID * GRID];
    phi[pos.cell_index()] = 1.0;
    phi
}

/// Feature vector of a state: group probabilities (WorldZ), context
/// probabilities (DswmS), or a position onehot. Probabilities come from the
/// frozen encoder logits, so the map is deterministic.
pub fn featurize(
    basis: &FeatureBasis,
    o: &Observation,
    a_prev: Option<Action>,
    pos: Position,
) -> Vec<f64> {
    match basis {
        FeatureBasis::Onehot => position_onehot(pos),
        FeatureBasis::DswmS(model) => {
            let mut tape = Tape::new();
            let lease = model.params.lease_all(&mut tape);
            let o_leaf = tape.leaf(o.to_f64());
            let a_leaf = action_onehot_leaf(&mut tape, a_prev);
            let logits = model.context_logits(&mut tape, &lease, o_leaf, a_leaf);
            softmax(tape.value(logits))
        }
        FeatureBasis::WorldZ(model) => {
            let mut tape = Tape::new();
            let lease = model.params.lease_all(&mut tape);
            let o_leaf = tape.leaf(o.to_f64());
            let logits = model.encode_logits(&mut tape, &lease, o_leaf);
            grouped_softmax(tape.value(logits), model.hyper.z_groups)
        }
    }
}

/// Per-action successor matrices: ψ(s, a) = Ψ_a·φ(s).
#[derive(Clone, Debug, PartialEq)]
pub struct SfWeights {
    dim: usize,
    /// ACTION_COUNT row-major d×d matrices.
    weights: Vec<f64>,
}

impl SfWeights {
    pub fn zeros(dim: usize) -> SfWeights {
        SfWeights { dim, weights: vec![0.0; ACTION_COUNT * dim * dim] }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// ψ(s, a) = Ψ_a·φ.
    pub fn psi(&self, action: Action, phi: &[f64]) -> Vec<f64> {
        assert_eq!(phi.len(), self.dim);
        let base = action.index() * self.dim * self.dim;
        let mut out = vec![0.0; self.dim];
        for (i, o) in out.iter_mut().enumerate() {
            let row = &self.weights[base + i * self.dim..base + (i + 1) * self.dim];
            *o = row.iter().zip(phi).map(|(w, p)| w * p).sum();
        }
        out
    }
}

/// Cosine similarity with the zero-vector convention: either operand at zero
/// norm gives 0.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// Q(s, a) = cos(Ψ_a·φ, w) for each action.
pub fn q_values(psi: &SfWeights, w: &[f64], phi: &[f64]) -> [f64; ACTION_COUNT] {
    let mut q = [0.0; ACTION_COUNT];
    for (a, q_a) in q.iter_mut().enumerate() {
        *q_a = cosine(&psi.psi(Action::from_index(a), phi), w);
    }
    q
}

/// Lowest-index argmax.
pub fn greedy_action(q: &[f64; ACTION_COUNT]) -> Action {
    let mut best = 0;
    for a in 1..ACTION_COUNT {
        if q[a] > q[best] {
            best = a;
        }
    }
    Action::from_index(best)
}

/// Sample from softmax(q/τ). τ must be positive.
pub fn policy_sample<R: Rng>(q: &[f64; ACTION_COUNT], tau: f64, rng: &mut R) -> Action {
    assert!(tau > 0.0, "policy temperature must be positive, got {tau}");
    let scaled: Vec<f64> = q.iter().map(|v| v / tau).collect();
    let probs = softmax(&scaled);
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (a, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return Action::from_index(a);
        }
    }
    Action::from_index(ACTION_COUNT - 1)
}

/// One TD step on the successor weights:
/// δ = φ_t + γ·Ψ_{a_max}·φ_{t+1} − Ψ_{a_t}·φ_t, then Ψ_{a_t} += α·δ·φ_tᵀ.
pub fn sf_td_update(
    psi: &mut SfWeights,
    phi_t: &[f64],
    a_t: Action,
    phi_next: &[f64],
    a_max: Action,
    gamma: f64,
    alpha: f64,
) {
    let d = psi.dim;
    assert_eq!(phi_t.len(), d);
    assert_eq!(phi_next.len(), d);
    let bootstrap = psi.psi(a_max, phi_next);
    let current = psi.psi(a_t, phi_t);
    let delta: Vec<f64> = (0..d).map(|i| phi_t[i] + gamma * bootstrap[i] - current[i]).collect();
    let base = a_t.index() * d * d;
    for (i, &de) in delta.iter().enumerate() {
        if de == 0.0 {
            continue;
        }
        let row = &mut psi.weights[base + i * d..base + (i + 1) * d];
        for (wij, &p) in row.iter_mut().zip(phi_t) {
            *wij += alpha * de * p;
        }
    }
}

/// Set-based reward rule: reward sets w to the arrival feature; a confident
/// reward prediction (cos > 0.9) that goes unrewarded zeroes w; anything
/// else leaves w alone.
pub fn reward_update(w: &mut Vec<f64>, phi_next: &[f64], rewarded: bool, predicted: f64) {
    if rewarded {
        w.clear();
        w.extend_from_slice(phi_next);
    } else if predicted > 0.9 {
        w.iter_mut().for_each(|x| *x = 0.0);
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DynaConfig {
    pub rollout_length: usize,
    /// Chance per real environment step of running one imagined rollout.
    pub rollout_probability: f64,
}

impl Default for DynaConfig {
    fn default() -> Self {
        DynaConfig { rollout_length: 5, rollout_probability: 0.2 }
    }
}

/// One imagined rollout through the frozen forward model, starting from the
/// agent's current inferred context sample and pre-step hidden state. Applies
/// `rollout_length` TD updates on imagined transitions; never touches w and
/// never reads the environment.
#[allow(clippy::too_many_arguments)]
pub fn dyna_rollout(
    psi: &mut SfWeights,
    w: &[f64],
    model: &DswmModel,
    tape: &mut Tape,
    lease: &Lease,
    start_s: Var,
    start_h: Var,
    start_phi: &[f64],
    config: &DynaConfig,
    tau: f64,
    gamma: f64,
    alpha: f64,
    rng: &mut ChaCha8Rng,
) {
    let mut s_sample = start_s;
    let mut h = start_h;
    let mut phi = start_phi.to_vec();
    for _ in 0..config.rollout_length {
        let q = q_values(psi, w, &phi);
        let action = policy_sample(&q, tau, rng);
        let a_leaf = action_onehot_leaf(tape, Some(action));
        let (h_next, pred_s) = model.forward_context(tape, lease, rng, s_sample, a_leaf, h);
        let phi_next = softmax(tape.value(pred_s.logits));
        let a_max = greedy_action(&q_values(psi, w, &phi_next));
        sf_td_update(psi, &phi, action, &phi_next, a_max, gamma, alpha);
        s_sample = pred_s.sample;
        h = h_next;
        phi = phi_next;
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SessionParams {
    pub episodes: u32,
    pub gamma: f64,
    pub alpha: f64,
    pub tau: f64,
    pub use_dyna: bool,
    pub dyna: DynaConfig,
}

/// A post-switch arrival at the phase-1 goal: what the agent predicted there
/// and whether the zeroing rule fired.
#[derive(Clone, Copy, Debug)]
pub struct OldGoalVisit {
    pub episode: u32,
    pub step: u32,
    pub predicted: f64,
    pub zeroed: bool,
}

#[derive(Clone, Debug)]
pub struct SessionOutcome {
    /// Steps to reach the goal per episode; the cap when never reached.
    pub steps: Vec<u32>,
    /// Total reward per episode (1 exactly when the goal was reached).
    pub rewards: Vec<f64>,
    /// Every post-switch visit to the abandoned goal.
    pub old_goal_revisits: Vec<OldGoalVisit>,
    /// How many imagined rollouts actually ran.
    pub dyna_invocations: u32,
}

/// Per-episode feature stream: owns whatever model state the basis needs,
/// reset at every episode boundary.
enum Stream<'m> {
    Onehot,
    World {
        model: &'m WorldModel,
        tape: Tape,
        lease: Lease,
    },
    Dswm {
        model: &'m DswmModel,
        tape: Tape,
        lease: Lease,
        store: DndStore,
        h_prev: Var,
        h_pending: Var,
        s: LatentSample,
    },
}

impl<'m> Stream<'m> {
    /// Fresh per-episode state; returns the stream and φ of the start state.
    fn begin(
        basis: &FeatureBasis<'m>,
        o0: &Observation,
        pos0: Position,
        rng: &mut ChaCha8Rng,
    ) -> (Stream<'m>, Vec<f64>) {
        match basis {
            FeatureBasis::Onehot => (Stream::Onehot, position_onehot(pos0)),
            FeatureBasis::WorldZ(model) => {
                let mut tape = Tape::new();
                let lease = model.params.lease_all(&mut tape);
                let o_leaf = tape.leaf(o0.to_f64());
                let z = model.encode(&mut tape, &lease, rng, o_leaf);
                let phi = grouped_softmax(tape.value(z.logits), model.hyper.z_groups);
                (Stream::World { model, tape, lease }, phi)
            }
            FeatureBasis::DswmS(model) => {
                let mut tape = Tape::new();
                let lease = model.params.lease_all(&mut tape);
                let mut store = model.new_store();
                let h0 = model.initial_hidden(&mut tape);
                let o_leaf = tape.leaf(o0.to_f64());
                let a_leaf = action_onehot_leaf(&mut tape, None);
                let z = model.encode_content(&mut tape, &lease, rng, o_leaf);
                let s = model.encode_context(&mut tape, &lease, rng, o_leaf, a_leaf);
                store.write(&tape, s.sample, z.sample);
                let phi = softmax(tape.value(s.logits));
                (
                    Stream::Dswm { model, tape, lease, store, h_prev: h0, h_pending: h0, s },
                    phi,
                )
            }
        }
    }

    /// Advance the model with the chosen action (before the environment
    /// step). The dual-stream GRU result is held pending so Dyna can still
    /// start from the pre-step hidden state.
    fn act(&mut self, action: Action, rng: &mut ChaCha8Rng) {
        if let Stream::Dswm { model, tape, lease, h_prev, h_pending, s, .. } = self {
            let a_leaf = action_onehot_leaf(tape, Some(action));
            let (h_next, _) = model.forward_context(tape, lease, rng, s.sample, a_leaf, *h_prev);
            *h_pending = h_next;
        }
    }

    /// Observe the environment's next state and return its features,
    /// running the inference phase (encode, dictionary write) for the
    /// dual-stream basis.
    fn observe(
        &mut self,
        o_next: &Observation,
        a_taken: Action,
        pos_next: Position,
        rng: &mut ChaCha8Rng,
    ) -> Vec<f64> {
        match self {
            Stream::Onehot => position_onehot(pos_next),
            Stream::World { model, tape, lease } => {
                let o_leaf = tape.leaf(o_next.to_f64());
                let z = model.encode(tape, lease, rng, o_leaf);
                grouped_softmax(tape.value(z.logits), model.hyper.z_groups)
            }
            Stream::Dswm { model, tape, lease, store, s, .. } => {
                let o_leaf = tape.leaf(o_next.to_f64());
                let a_leaf = action_onehot_leaf(tape, Some(a_taken));
                let z = model.encode_content(tape, lease, rng, o_leaf);
                let s_next = model.encode_context(tape, lease, rng, o_leaf, a_leaf);
                store.write(tape, s_next.sample, z.sample);
                *s = s_next;
                softmax(tape.value(s_next.logits))
            }
        }
    }

    /// Run one imagined Dyna rollout from the pre-step (s, h). Only the
    /// dual-stream basis can imagine.
    #[allow(clippy::too_many_arguments)]
    fn dyna(
        &mut self,
        psi: &mut SfWeights,
        w: &[f64],
        phi: &[f64],
        config: &DynaConfig,
        tau: f64,
        gamma: f64,
        alpha: f64,
        rng: &mut ChaCha8Rng,
    ) {
        match self {
            Stream::Dswm { model, tape, lease, h_prev, s, .. } => {
                dyna_rollout(
                    psi, w, model, tape, lease, s.sample, *h_prev, phi, config, tau, gamma,
                    alpha, rng,
                );
            }
            _ => panic!("Dyna imagination requires the dual-stream context basis"),
        }
    }

    /// Commit the pending hidden state after the step completes.
    fn finish_step(&mut self) {
        if let Stream::Dswm { h_prev, h_pending, .. } = self {
            *h_prev = *h_pending;
        }
    }
}

/// One RL session: `params.episodes` goal-seeking episodes on a single
/// pattern map, with successor weights and reward vector starting at zero
/// and persisting across episodes. Model state (dictionary, hidden state)
/// resets every episode. The goal moves at the task's switch episode.
pub fn run_session(
    topology: &Topology,
    pattern: &PatternMap,
    task: &GoalTask,
    basis: &FeatureBasis,
    params: &SessionParams,
    seed: u64,
) -> SessionOutcome {
    assert!(
        !params.use_dyna || basis.kind() == BasisKind::DswmS,
        "Dyna imagination requires the dual-stream context basis"
    );
    assert!(
        (0.0..=1.0).contains(&params.dyna.rollout_probability),
        "rollout probability must be in [0, 1]"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut psi = SfWeights::zeros(basis.dim());
    let mut w = vec![0.0; basis.dim()];

    let mut outcome = SessionOutcome {
        steps: Vec::with_capacity(params.episodes as usize),
        rewards: Vec::with_capacity(params.episodes as usize),
        old_goal_revisits: Vec::new(),
        dyna_invocations: 0,
    };

    for episode in 0..params.episodes {
        let goal = task.goal_for_episode(episode);
        let mut pos = task.start;
        let o0 = render_observation(topology, pattern, pos);
        let (mut stream, mut phi) = Stream::begin(basis, &o0, pos, &mut rng);
        let mut steps_to_goal = task.max_steps;
        let mut reward_total = 0.0;

        for step in 1..=task.max_steps {
            let q = q_values(&psi, &w, &phi);
            let action = policy_sample(&q, params.tau, &mut rng);
            stream.act(action, &mut rng);

            let pos_next = step_dynamics(pos, action, topology);
            let rewarded = pos_next == goal;
            let o_next = render_observation(topology, pattern, pos_next);
            let phi_next = stream.observe(&o_next, action, pos_next, &mut rng);

            let predicted = cosine(&phi_next, &w);
            reward_update(&mut w, &phi_next, rewarded, predicted);
            if episode >= task.switch_episode && pos_next == task.goal_phase1 {
                outcome.old_goal_revisits.push(OldGoalVisit {
                    episode,
                    step,
                    predicted,
                    zeroed: !rewarded && predicted > 0.9,
                });
            }
            if rewarded {
                // The episode ends here, so the successor sum from the goal
                // is the goal's own feature. Anchor every action map at the
                // arrival feature (γ = 0 makes the bootstrap term — and the
                // a_max argument — irrelevant; α = 1 is exact for onehots and
                // contractive for simplex features). Without this the goal
                // feature never enters any ψ and the cosine Q-field stays
                // flat at zero.
                for a in Action::ALL {
                    sf_td_update(&mut psi, &phi_next, a, &phi_next, a, 0.0, 1.0);
                }
            }
            let a_max = greedy_action(&q_values(&psi, &w, &phi_next));
            sf_td_update(&mut psi, &phi, action, &phi_next, a_max, params.gamma, params.alpha);

            if params.use_dyna && rng.gen::<f64>() < params.dyna.rollout_probability {
                outcome.dyna_invocations += 1;
                stream.dyna(
                    &mut psi,
                    &w,
                    &phi,
                    &params.dyna,
                    params.tau,
                    params.gamma,
                    params.alpha,
                    &mut rng,
                );
            }

            stream.finish_step();
            pos = pos_next;
            phi = phi_next;
            if rewarded {
                reward_total += task.reward_at_goal;
                steps_to_goal = step;
                break;
            }
        }
        outcome.steps.push(steps_to_goal);
        outcome.rewards.push(reward_total);
    }
    outcome
}

/// Median of a slice (mean of the two middle values for even lengths).
pub fn median(values: &[f64]) -> f64 {
    assert!(!values.is_empty());
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

/// Pool the last `window` episodes of every outcome and return (mean,
/// median) of steps-to-goal.
pub fn final_window_stats(outcomes: &[SessionOutcome], window: usize) -> (f64, f64) {
    let mut pooled = Vec::new();
    for outcome in outcomes {
        let n = outcome.steps.len();
        let from = n.saturating_sub(window);
        pooled.extend(outcome.steps[from..].iter().map(|&s| s as f64));
    }
    assert!(!pooled.is_empty());
    let mean = pooled.iter().sum::<f64>() / pooled.len() as f64;
    (mean, median(&pooled))
}
