use dswm::gridworld::{
    build_topology, collect_dataset, generate_pattern_map, Action, EpisodeDataset, Observation,
    TopologyKind, OBS_DIM,
};
use dswm::models::training::{action_onehot_leaf, dswm_episode_pass, world_episode_pass};
use dswm::models::{DswmModel, DswmTrainer, Hyper, LatentSample, WorldModel, WorldTrainer};
use dswm::numerics::params::ParamSet;
use dswm::numerics::tape::Tape;
use dswm::numerics::FD_STEP;
use proptest::prelude::*;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_hyper() -> Hyper {
    Hyper {
        hidden: 16,
        z_groups: 2,
        z_categories: 4,
        s_categories: 6,
        dnd_top_k: 3,
        learning_rate: 3e-3,
        iterations: 30,
        batch_size: 2,
        ..Hyper::default()
    }
}

fn tiny_dataset(n_episodes: usize, episode_len: usize, seed: u64) -> EpisodeDataset {
    let topology = build_topology(TopologyKind::Open);
    let mut rng = ChaCha8Rng::seed_from_u64(900 + seed);
    let patterns = vec![generate_pattern_map(&topology, &mut rng)];
    collect_dataset(&topology, &patterns, n_episodes, episode_len, 0.7, seed)
}

fn sample_observation(seed: u64) -> Observation {
    let topology = build_topology(TopologyKind::Open);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pattern = generate_pattern_map(&topology, &mut rng);
    let pos = dswm::gridworld::Position::new(5, 5);
    dswm::gridworld::render_observation(&topology, &pattern, pos)
}

fn assert_simplex(chunk: &[f64], tol: f64) {
    let sum: f64 = chunk.iter().sum();
    assert!((sum - 1.0).abs() < tol, "simplex sum {sum}");
    assert!(chunk.iter().all(|&p| (0.0..=1.0).contains(&p)));
}

#[test]
fn content_encoding_has_eight_simplex_groups_of_sixteen() {
    let hyper = Hyper::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let model = DswmModel::new(hyper, &mut rng);
    let mut tape = Tape::new();
    let lease = model.params.lease_all(&mut tape);
    let o = tape.leaf(sample_observation(2).to_f64());
    let z = model.encode_content(&mut tape, &lease, &mut rng, o);
    assert_eq!(tape.value(z.logits).len(), 128);
    let sample = tape.value(z.sample).to_vec();
    assert_eq!(sample.len(), 128);
    for g in 0..8 {
        assert_simplex(&sample[g * 16..(g + 1) * 16], 1e-9);
    }
}

#[test]
fn context_encoding_is_a_49_dim_simplex() {
    let hyper = Hyper::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = DswmModel::new(hyper, &mut rng);
    let mut tape = Tape::new();
    let lease = model.params.lease_all(&mut tape);
    let o = tape.leaf(sample_observation(4).to_f64());
    let a_prev = action_onehot_leaf(&mut tape, Some(Action::North));
    let s = model.encode_context(&mut tape, &lease, &mut rng, o, a_prev);
    assert_eq!(tape.value(s.logits).len(), 49);
    assert_simplex(tape.value(s.sample), 1e-9);
}

#[test]
fn encoding_is_deterministic_given_seed() {
    let hyper = small_hyper();
    let mut init = ChaCha8Rng::seed_from_u64(5);
    let model = DswmModel::new(hyper, &mut init);
    let obs = sample_observation(6);
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut tape = Tape::new();
        let lease = model.params.lease_all(&mut tape);
        let o = tape.leaf(obs.to_f64());
        let a_prev = action_onehot_leaf(&mut tape, None);
        let z = model.encode_content(&mut tape, &lease, &mut rng, o);
        let s = model.encode_context(&mut tape, &lease, &mut rng, o, a_prev);
        (tape.value(z.sample).to_vec(), tape.value(s.sample).to_vec())
    };
    assert_eq!(run(), run());
}

#[test]
fn first_step_prediction_reads_back_the_written_content() {
    let hyper = small_hyper();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let model = DswmModel::new(hyper, &mut rng);
    let mut tape = Tape::new();
    let lease = model.params.lease_all(&mut tape);
    let mut store = model.new_store();
    let h0 = model.initial_hidden(&mut tape);
    let o = tape.leaf(sample_observation(9).to_f64());
    let a_prev = action_onehot_leaf(&mut tape, None);
    let a_t = action_onehot_leaf(&mut tape, Some(Action::East));
    let out = model.dswm_step(&mut tape, &lease, &mut rng, &mut store, o, a_prev, a_t, h0);
    assert_eq!(store.len(), 1);
    // A singleton store returns its only value untouched by mixing weights.
    assert_eq!(tape.value(out.z_star), tape.value(out.z.sample));
    assert!(tape.value(out.pred_obs).iter().all(|&x| x > 0.0 && x < 1.0));
    assert!(tape.value(out.recon_obs).iter().all(|&x| x > 0.0 && x < 1.0));
}

#[test]
fn fifty_step_episode_writes_fifty_entries_and_reads_each_step() {
    let hyper = small_hyper();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let model = DswmModel::new(hyper, &mut rng);
    let dataset = tiny_dataset(1, 50, 11);
    let mut tape = Tape::new();
    let lease = model.params.lease_all(&mut tape);
    let mut store = model.new_store();
    let mut h = model.initial_hidden(&mut tape);
    let episode = &dataset.episodes[0];
    for (t, step) in episode.steps.iter().enumerate() {
        let o = tape.leaf(step.observation.to_f64());
        let prev = if t == 0 { None } else { Some(episode.steps[t - 1].action) };
        let a_prev = action_onehot_leaf(&mut tape, prev);
        let a_t = action_onehot_leaf(&mut tape, Some(step.action));
        let out = model.dswm_step(&mut tape, &lease, &mut rng, &mut store, o, a_prev, a_t, h);
        assert_eq!(store.len(), t + 1);
        // Every step performs a read: the predicted content is present and
        // decodes to a bounded observation.
        assert_eq!(tape.value(out.z_star).len(), hyper.z_total());
        assert!(tape.value(out.pred_obs).iter().all(|&x| x > 0.0 && x < 1.0));
        h = out.h;
    }
    assert_eq!(store.len(), 50);
}

#[test]
fn loss_total_is_the_weighted_sum_of_parts() {
    let hyper = small_hyper();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let model = DswmModel::new(hyper, &mut rng);
    let dataset = tiny_dataset(1, 6, 13);
    let pass = dswm_episode_pass(&model, &dataset.episodes[0], &mut rng);
    let terms = pass.terms;
    let weighted = terms.l_obs
        + terms.l_pos
        + terms.l_s
        + hyper.beta_z * terms.neg_entropy_z
        + hyper.beta_s * terms.neg_entropy_s;
    assert!(
        (terms.total - weighted).abs() <= 1e-12 * terms.total.abs().max(1.0),
        "total {} vs weighted sum {}",
        terms.total,
        weighted
    );
    assert!(terms.l_obs >= 0.0);
    assert!(terms.l_pos >= 0.0);
    assert!(terms.l_s >= 0.0, "KL must be nonnegative, got {}", terms.l_s);
}

#[test]
fn perfect_prediction_and_matching_logits_zero_their_terms() {
    let hyper = small_hyper();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let model = DswmModel::new(hyper, &mut rng);
    let mut tape = Tape::new();
    let lease = model.params.lease_all(&mut tape);
    let o_t = tape.leaf(vec![0.25; OBS_DIM]);
    let o_next = tape.leaf(vec![0.75; OBS_DIM]);
    let logits = tape.leaf(vec![0.3; hyper.s_categories]);
    let sample = tape.leaf(vec![1.0 / hyper.s_categories as f64; hyper.s_categories]);
    let z_logits = tape.leaf(vec![0.1; hyper.z_total()]);
    let z_sample = tape.leaf(vec![1.0 / hyper.z_categories as f64; hyper.z_total()]);
    let h = model.initial_hidden(&mut tape);
    let step = dswm::models::DswmStepOutput {
        z: LatentSample { logits: z_logits, sample: z_sample },
        s: LatentSample { logits, sample },
        h,
        pred_s: LatentSample { logits, sample },
        z_star: z_sample,
        pred_obs: o_next,
        recon_obs: o_t,
    };
    let next_s = LatentSample { logits, sample };
    let losses = model.compute_losses(
        &mut tape,
        &lease,
        &step,
        &next_s,
        o_t,
        o_next,
        (3, 4),
        hyper.beta_z,
        hyper.beta_s,
    );
    assert_eq!(tape.item(losses.l_obs), 0.0);
    assert_eq!(tape.item(losses.l_s), 0.0);
}

#[test]
fn episodes_are_isolated_from_preceding_passes() {
    let hyper = small_hyper();
    let mut init = ChaCha8Rng::seed_from_u64(15);
    let model = DswmModel::new(hyper, &mut init);
    let dataset = tiny_dataset(2, 8, 16);
    let fresh = || ChaCha8Rng::seed_from_u64(400);
    let alone = dswm_episode_pass(&model, &dataset.episodes[1], &mut fresh());
    let mut other_rng = ChaCha8Rng::seed_from_u64(401);
    let _ = dswm_episode_pass(&model, &dataset.episodes[0], &mut other_rng);
    let after = dswm_episode_pass(&model, &dataset.episodes[1], &mut fresh());
    assert_eq!(alone.terms.total.to_bits(), after.terms.total.to_bits());
    assert_eq!(alone.terms.l_obs.to_bits(), after.terms.l_obs.to_bits());
}

fn episode_total_with_params(
    model_seed: u64,
    dataset: &EpisodeDataset,
    mutate: impl FnOnce(&mut ParamSet),
    kind: ModelKind,
) -> f64 {
    match kind {
        ModelKind::Dswm => {
            let mut init = ChaCha8Rng::seed_from_u64(model_seed);
            let mut model = DswmModel::new(small_hyper(), &mut init);
            mutate(&mut model.params);
            let mut rng = ChaCha8Rng::seed_from_u64(500);
            let pass = dswm_episode_pass(&model, &dataset.episodes[0], &mut rng);
            pass.terms.total
        }
        ModelKind::World => {
            let mut init = ChaCha8Rng::seed_from_u64(model_seed);
            let mut model = WorldModel::new(small_hyper(), &mut init);
            mutate(&mut model.params);
            let mut rng = ChaCha8Rng::seed_from_u64(500);
            let pass = world_episode_pass(&model, &dataset.episodes[0], &mut rng);
            pass.terms.total
        }
    }
}

#[derive(Clone, Copy)]
enum ModelKind {
    Dswm,
    World,
}

fn end_to_end_fd(kind: ModelKind) {
    let model_seed = 17;
    let dataset = tiny_dataset(1, 3, 18);
    // Analytic gradients from one backward pass.
    let (grads, names): (Vec<Vec<f64>>, Vec<String>) = {
        let mut init = ChaCha8Rng::seed_from_u64(model_seed);
        let mut rng = ChaCha8Rng::seed_from_u64(500);
        match kind {
            ModelKind::Dswm => {
                let model = DswmModel::new(small_hyper(), &mut init);
                let mut pass = dswm_episode_pass(&model, &dataset.episodes[0], &mut rng);
                pass.tape.backward(pass.root);
                let g = pass.lease.collect_grads(&pass.tape);
                let n = model.params.iter().map(|(n, _)| n.to_string()).collect();
                (g, n)
            }
            ModelKind::World => {
                let model = WorldModel::new(small_hyper(), &mut init);
                let mut pass = world_episode_pass(&model, &dataset.episodes[0], &mut rng);
                pass.tape.backward(pass.root);
                let g = pass.lease.collect_grads(&pass.tape);
                let n = model.params.iter().map(|(n, _)| n.to_string()).collect();
                (g, n)
            }
        }
    };
    // Probe a deterministic spread of coordinates across all parameters.
    let mut probe_rng = ChaCha8Rng::seed_from_u64(19);
    let mut worst: (f64, String) = (0.0, String::new());
    for _ in 0..24 {
        let pi = probe_rng.gen_range(0..grads.len());
        let ci = probe_rng.gen_range(0..grads[pi].len());
        let name = names[pi].clone();
        let shift = |delta: f64| {
            let shift_name = name.clone();
            move |params: &mut ParamSet| {
                let id = params.ids().nth(pi).unwrap();
                assert_eq!(params.name(id), shift_name);
                params.tensor_mut(id).data_mut()[ci] += delta;
            }
        };
        let up = episode_total_with_params(model_seed, &dataset, shift(FD_STEP), kind);
        let down = episode_total_with_params(model_seed, &dataset, shift(-FD_STEP), kind);
        let numeric = (up - down) / (2.0 * FD_STEP);
        let analytic = grads[pi][ci];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0);
        if rel > worst.0 {
            worst = (rel, format!("{name}[{ci}]"));
        }
    }
    assert!(worst.0 < 1e-4, "worst fd mismatch {} at {}", worst.0, worst.1);
}

#[test]
fn episode_loss_gradient_matches_finite_differences() {
    end_to_end_fd(ModelKind::Dswm);
}

#[test]
fn baseline_episode_loss_gradient_matches_finite_differences() {
    end_to_end_fd(ModelKind::World);
}

#[test]
fn training_reduces_the_loss_on_a_tiny_problem() {
    let dataset = tiny_dataset(4, 8, 20);
    let mut trainer = DswmTrainer::new(small_hyper(), 21);
    trainer.run(&dataset, 30, |_| {});
    let first: f64 = trainer.curve[..5].iter().map(|r| r.total).sum::<f64>() / 5.0;
    let last: f64 = trainer.curve[25..].iter().map(|r| r.total).sum::<f64>() / 5.0;
    assert!(
        last < first,
        "loss should fall over 30 iterations: first-5 mean {first}, last-5 mean {last}"
    );
}

#[test]
fn training_is_reproducible_bit_for_bit() {
    let dataset = tiny_dataset(3, 6, 22);
    let run = || {
        let mut trainer = DswmTrainer::new(small_hyper(), 23);
        trainer.run(&dataset, 5, |_| {});
        let totals: Vec<u64> = trainer.curve.iter().map(|r| r.total.to_bits()).collect();
        let params: Vec<Vec<u64>> = trainer
            .model
            .params
            .iter()
            .map(|(_, t)| t.data().iter().map(|x| x.to_bits()).collect())
            .collect();
        (totals, params)
    };
    assert_eq!(run(), run());
}

#[test]
fn baseline_training_is_reproducible_and_reduces_loss() {
    let dataset = tiny_dataset(4, 8, 24);
    let run = || {
        let mut trainer = WorldTrainer::new(small_hyper(), 25);
        trainer.run(&dataset, 30, |_| {});
        (
            trainer.curve.iter().map(|r| r.total.to_bits()).collect::<Vec<_>>(),
            trainer.curve[..5].iter().map(|r| r.total).sum::<f64>() / 5.0,
            trainer.curve[25..].iter().map(|r| r.total).sum::<f64>() / 5.0,
        )
    };
    let (bits_a, first, last) = run();
    let (bits_b, _, _) = run();
    assert_eq!(bits_a, bits_b);
    assert!(last < first, "baseline loss should fall: {first} -> {last}");
}

#[test]
fn baseline_latents_match_dswm_content_capacity() {
    let hyper = Hyper::default();
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    let model = WorldModel::new(hyper, &mut rng);
    let mut tape = Tape::new();
    let lease = model.params.lease_all(&mut tape);
    let o = tape.leaf(sample_observation(27).to_f64());
    let a_t = action_onehot_leaf(&mut tape, Some(Action::South));
    let h0 = model.initial_hidden(&mut tape);
    let out = model.world_step(&mut tape, &lease, &mut rng, o, a_t, h0);
    assert_eq!(tape.value(out.z.sample).len(), 128);
    assert_eq!(tape.value(out.pred_z.sample).len(), 128);
    for g in 0..8 {
        assert_simplex(&tape.value(out.pred_z.sample)[g * 16..(g + 1) * 16], 1e-9);
    }
    assert!(tape.value(out.pred_obs).iter().all(|&x| x > 0.0 && x < 1.0));
}

#[test]
fn baseline_predictions_are_stateless_across_episodes() {
    let hyper = small_hyper();
    let mut init = ChaCha8Rng::seed_from_u64(28);
    let model = WorldModel::new(hyper, &mut init);
    let dataset = tiny_dataset(1, 5, 29);
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(600);
        let mut tape = Tape::new();
        let lease = model.params.lease_all(&mut tape);
        let mut h = model.initial_hidden(&mut tape);
        let mut preds = Vec::new();
        for step in &dataset.episodes[0].steps {
            let o = tape.leaf(step.observation.to_f64());
            let a = action_onehot_leaf(&mut tape, Some(step.action));
            let out = model.world_step(&mut tape, &lease, &mut rng, o, a, h);
            preds.push(tape.value(out.pred_obs).to_vec());
            h = out.h;
        }
        preds
    };
    assert_eq!(run(), run());
}

#[test]
fn update_gate_saturation_carries_the_hidden_state() {
    let mut params = ParamSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(30);
    let gru = dswm::models::layers::Gru::new(&mut params, "g", 3, 4, &mut rng);
    let (b_iz, b_hz) = gru.update_gate_biases();
    for id in [b_iz, b_hz] {
        for b in params.tensor_mut(id).data_mut() {
            *b = 60.0;
        }
    }
    let mut tape = Tape::new();
    let lease = params.lease_all(&mut tape);
    let x = tape.leaf(vec![0.3, -0.8, 1.2]);
    let h_prev = tape.leaf(vec![0.5, -0.25, 0.125, 0.75]);
    let h = gru.apply(&mut tape, &lease, x, h_prev);
    for (a, b) in tape.value(h).iter().zip(tape.value(h_prev)) {
        assert!((a - b).abs() < 1e-9, "saturated update gate must carry h: {a} vs {b}");
    }
}

#[test]
fn zero_weight_gru_halves_the_hidden_state() {
    let mut params = ParamSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let gru = dswm::models::layers::Gru::new(&mut params, "g", 3, 4, &mut rng);
    for id in params.ids().collect::<Vec<_>>() {
        for w in params.tensor_mut(id).data_mut() {
            *w = 0.0;
        }
    }
    let mut tape = Tape::new();
    let lease = params.lease_all(&mut tape);
    let x = tape.leaf(vec![1.0, 2.0, 3.0]);
    let h_prev = tape.leaf(vec![0.4, -0.6, 0.8, -1.0]);
    let h_var = gru.apply(&mut tape, &lease, x, h_prev);
    let h = tape.value(h_var).to_vec();
    // r = z = σ(0) = ½ and n = tanh(0) = 0, so h' = ½·h.
    for (a, b) in h.iter().zip(tape.value(h_prev)) {
        assert!((a - b / 2.0).abs() < 1e-12);
    }
}

#[test]
fn unrolled_gru_gradient_matches_finite_differences() {
    let in_dim = 3;
    let hidden = 4;
    let steps = 5;
    let inputs: Vec<Vec<f64>> = {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        (0..steps).map(|_| (0..in_dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
    };
    let probe: Vec<f64> = {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        (0..hidden).map(|_| rng.gen_range(-1.0..1.0)).collect()
    };
    let loss_of = |mutate: &dyn Fn(&mut ParamSet)| -> (f64, Vec<Vec<f64>>) {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let gru = dswm::models::layers::Gru::new(&mut params, "g", in_dim, hidden, &mut rng);
        mutate(&mut params);
        let mut tape = Tape::new();
        let lease = params.lease_all(&mut tape);
        let mut h = tape.leaf(vec![0.0; hidden]);
        for x in &inputs {
            let xv = tape.leaf(x.clone());
            h = gru.apply(&mut tape, &lease, xv, h);
        }
        let target = tape.leaf(probe.clone());
        let loss = tape.mse(h, target);
        tape.backward(loss);
        (tape.item(loss), lease.collect_grads(&tape))
    };
    let (_, grads) = loss_of(&|_| {});
    let mut probe_rng = ChaCha8Rng::seed_from_u64(35);
    for _ in 0..16 {
        let pi = probe_rng.gen_range(0..grads.len());
        let ci = probe_rng.gen_range(0..grads[pi].len());
        let (up, _) = loss_of(&|p: &mut ParamSet| {
            let id = p.ids().nth(pi).unwrap();
            p.tensor_mut(id).data_mut()[ci] += FD_STEP;
        });
        let (down, _) = loss_of(&|p: &mut ParamSet| {
            let id = p.ids().nth(pi).unwrap();
            p.tensor_mut(id).data_mut()[ci] -= FD_STEP;
        });
        let numeric = (up - down) / (2.0 * FD_STEP);
        let analytic = grads[pi][ci];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0);
        assert!(rel < 1e-4, "gru fd mismatch {rel} at param {pi}[{ci}]");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]
    #[test]
    fn context_logits_stay_finite_for_all_observations(bits in proptest::collection::vec(0u8..=1, OBS_DIM), seed in 0u64..1000) {
        let hyper = small_hyper();
        let mut init = ChaCha8Rng::seed_from_u64(36);
        let model = DswmModel::new(hyper, &mut init);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tape = Tape::new();
        let lease = model.params.lease_all(&mut tape);
        let mut arr = [0u8; OBS_DIM];
        arr.copy_from_slice(&bits);
        let o = tape.leaf(Observation::from_bits(arr).to_f64());
        let a_prev = action_onehot_leaf(&mut tape, Some(Action::West));
        let s = model.encode_context(&mut tape, &lease, &mut rng, o, a_prev);
        prop_assert!(tape.value(s.logits).iter().all(|x| x.is_finite()));
        let sum: f64 = tape.value(s.sample).iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-9);
    }
}
