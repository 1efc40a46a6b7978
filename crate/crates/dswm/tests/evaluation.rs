use dswm::evaluation::{
    aggregate_rollouts, export_field_images, masked_win_fraction, mean_observation,
    place_field_maps, rollout_eval, score_predictions, EvalError, EvalModel, FieldVariant,
    PlaceFieldMap, RolloutPlan, RolloutResult,
};
use dswm::gridworld::{
    build_topology, collect_dataset, generate_pattern_map, record_episode, Position, TopologyKind,
    GRID, OBS_DIM, WINDOW,
};
use dswm::models::{DswmModel, Hyper, ModelKind, WorldModel};
use rand::SeedableRng;
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

fn plan() -> RolloutPlan {
    RolloutPlan { warmup: 6, horizon: 4, p_repeat: 0.7 }
}

fn open_fixture() -> (dswm::gridworld::Topology, dswm::gridworld::PatternMap, Vec<f64>) {
    let topology = build_topology(TopologyKind::Open);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let pattern = generate_pattern_map(&topology, &mut rng);
    let dataset = collect_dataset(&topology, std::slice::from_ref(&pattern), 20, 10, 0.7, 5);
    let mean = mean_observation(&dataset);
    (topology, pattern, mean)
}

#[test]
fn every_observation_carries_exactly_25_active_components() {
    let topology = build_topology(TopologyKind::Rooms);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let pattern = generate_pattern_map(&topology, &mut rng);
    let dataset = collect_dataset(&topology, &[pattern], 10, 12, 0.7, 9);
    for ep in &dataset.episodes {
        for step in &ep.steps {
            let ones: u32 = step.observation.bits().iter().map(|&b| b as u32).sum();
            assert_eq!(ones, (WINDOW * WINDOW) as u32);
        }
    }
}

#[test]
fn mean_observation_averages_componentwise() {
    let (topology, pattern, _) = open_fixture();
    let dataset = collect_dataset(&topology, &[pattern], 3, 4, 0.7, 2);
    let mean = mean_observation(&dataset);
    assert_eq!(mean.len(), OBS_DIM);
    let mut expect = vec![0.0; OBS_DIM];
    let mut n = 0.0;
    for ep in &dataset.episodes {
        for step in &ep.steps {
            for (e, &b) in expect.iter_mut().zip(step.observation.bits().iter()) {
                *e += b as f64;
            }
            n += 1.0;
        }
    }
    for (m, e) in mean.iter().zip(&expect) {
        assert!((m - e / n).abs() < 1e-12);
    }
    // All-zeros constant prediction: squared error is the number of active
    // components, exactly 25 per step.
    let zeros = vec![0.0; OBS_DIM];
    let step = &dataset.episodes[0].steps[0];
    let truth = step.observation.to_f64();
    let err: f64 = zeros.iter().zip(&truth).map(|(p, t)| (p - t) * (p - t)).sum();
    assert_eq!(err, 25.0);
}

#[test]
fn perfect_oracle_predictions_score_zero() {
    let (topology, pattern, mean) = open_fixture();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let episode = record_episode(&topology, &pattern, 0, Position::new(5, 5), 10, 0.7, &mut rng);
    let predicted: Vec<Vec<f64>> =
        episode.steps[6..].iter().map(|s| s.observation.to_f64()).collect();
    let (step_mse, masked) = score_predictions(&topology, &episode.steps, 6, &predicted, &mean);
    assert_eq!(step_mse.len(), 4);
    assert!(step_mse.iter().all(|&e| e == 0.0));
    let masked = masked.expect("warmup windows overlap the prediction windows");
    assert_eq!(masked.model_mse, 0.0);
    assert!(masked.baseline_mse > 0.0);
}

#[test]
fn rollout_refuses_topology_mismatch() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let model = DswmModel::new(small_hyper(), &mut rng);
    let (topology, pattern, mean) = open_fixture();
    let tagged = EvalModel::Dswm { model: &model, trained_on: TopologyKind::Rooms };
    let err = rollout_eval(&tagged, &topology, &pattern, 0, 7, &plan(), &mean).unwrap_err();
    assert!(matches!(err, EvalError::TopologyMismatch { .. }));
}

#[test]
fn rollout_is_deterministic_and_pairs_across_models() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let dswm = DswmModel::new(small_hyper(), &mut rng);
    let world = WorldModel::new(small_hyper(), &mut rng);
    let (topology, pattern, mean) = open_fixture();

    let tagged = EvalModel::Dswm { model: &dswm, trained_on: TopologyKind::Open };
    let a = rollout_eval(&tagged, &topology, &pattern, 0, 7, &plan(), &mean).unwrap();
    let b = rollout_eval(&tagged, &topology, &pattern, 0, 7, &plan(), &mean).unwrap();
    assert_eq!(a.step_mse, b.step_mse, "same seed must reproduce bitwise");

    // The behavior trajectory depends only on the seed, so the visited-region
    // mask (a pure function of the trajectory) must agree across models.
    let w_tagged = EvalModel::World { model: &world, trained_on: TopologyKind::Open };
    let w = rollout_eval(&w_tagged, &topology, &pattern, 0, 7, &plan(), &mean).unwrap();
    assert_eq!(a.step_mse.len(), w.step_mse.len());
    assert_eq!(
        a.masked.map(|m| m.components),
        w.masked.map(|m| m.components),
        "mask must depend only on the shared trajectory"
    );
    assert!(a.mean_mse >= 0.0 && w.mean_mse >= 0.0);

    let c = rollout_eval(&tagged, &topology, &pattern, 0, 8, &plan(), &mean).unwrap();
    assert_ne!(a.step_mse, c.step_mse, "different seeds should differ");
}

fn synthetic_result(model: ModelKind, map_id: u32, seed: u64, mean_mse: f64) -> RolloutResult {
    RolloutResult {
        model,
        topology: TopologyKind::Open,
        map_id,
        seed,
        step_mse: vec![mean_mse; 4],
        mean_mse,
        masked: None,
    }
}

#[test]
fn identical_result_sets_aggregate_to_zero_difference() {
    let mut results = Vec::new();
    for map in 0..3 {
        for seed in 0..2 {
            let v = 1.0 + map as f64 + seed as f64 * 0.1;
            results.push(synthetic_result(ModelKind::Dswm, map, seed, v));
            results.push(synthetic_result(ModelKind::World, map, seed, v));
        }
    }
    let report = aggregate_rollouts(&results).unwrap();
    assert_eq!(report.mean_difference, 0.0);
    assert_eq!(report.pairs, 6);
    assert!(report.p_value > 0.5, "no signal should not reject");
}

#[test]
fn aggregate_stats_use_stderr_std_over_sqrt_n() {
    let values = [1.0, 2.0, 3.0, 4.0];
    let mut results = Vec::new();
    for (i, &v) in values.iter().enumerate() {
        results.push(synthetic_result(ModelKind::Dswm, i as u32, 0, v));
        results.push(synthetic_result(ModelKind::World, i as u32, 0, v + 1.0));
    }
    let report = aggregate_rollouts(&results).unwrap();
    let dswm_row = report
        .stats
        .iter()
        .find(|s| s.model == ModelKind::Dswm && s.topology == TopologyKind::Open)
        .unwrap();
    assert_eq!(dswm_row.n, 4);
    assert!((dswm_row.mean - 2.5).abs() < 1e-12);
    let expect_std = (values.iter().map(|v| (v - 2.5f64).powi(2)).sum::<f64>() / 3.0).sqrt();
    assert!((dswm_row.std - expect_std).abs() < 1e-12);
    assert!((dswm_row.stderr - expect_std / 2.0).abs() < 1e-12);
    assert!((report.mean_difference + 1.0).abs() < 1e-12);
}

#[test]
fn consistent_advantage_reaches_significance() {
    let mut results = Vec::new();
    for map in 0..5 {
        for seed in 0..8 {
            let jitter = (map * 7 + seed) as f64 * 0.01;
            results.push(synthetic_result(ModelKind::Dswm, map, seed as u64, 1.0 + jitter));
            results.push(synthetic_result(ModelKind::World, map, seed as u64, 2.0 + jitter));
        }
    }
    let report = aggregate_rollouts(&results).unwrap();
    assert!(report.mean_difference < 0.0);
    assert!(report.p_value < 0.05, "p={} for a uniform advantage", report.p_value);
}

#[test]
fn unpaired_and_duplicate_results_are_errors() {
    let mut results = vec![synthetic_result(ModelKind::Dswm, 0, 0, 1.0)];
    assert!(matches!(aggregate_rollouts(&results), Err(EvalError::Unpaired(_))));
    results.push(synthetic_result(ModelKind::Dswm, 0, 0, 1.5));
    assert!(matches!(aggregate_rollouts(&results), Err(EvalError::Unpaired(_))));
    assert!(matches!(aggregate_rollouts(&[]), Err(EvalError::Empty)));
}

#[test]
fn masked_win_fraction_counts_strict_wins() {
    let mut results = Vec::new();
    for (i, (model_mse, baseline)) in
        [(0.1, 0.5), (0.5, 0.5), (0.2, 0.1)].into_iter().enumerate()
    {
        let mut r = synthetic_result(ModelKind::Dswm, i as u32, 0, 1.0);
        r.masked = Some(dswm::evaluation::MaskedStats {
            model_mse,
            baseline_mse: baseline,
            components: 10,
        });
        results.push(r);
    }
    results.push(synthetic_result(ModelKind::Dswm, 9, 0, 1.0)); // no mask: excluded
    let (wins, evaluable) = masked_win_fraction(&results, ModelKind::Dswm);
    assert_eq!((wins, evaluable), (1, 3));
}

#[test]
fn place_fields_live_on_the_simplex() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let model = DswmModel::new(small_hyper(), &mut rng);
    let topology = build_topology(TopologyKind::Open);
    let mut map_rng = ChaCha8Rng::seed_from_u64(12);
    let patterns = vec![
        generate_pattern_map(&topology, &mut map_rng),
        generate_pattern_map(&topology, &mut map_rng),
    ];
    let maps = place_field_maps(&model, &topology, &patterns, 4, 8, 0.7, 31);
    let units = small_hyper().s_categories;
    assert_eq!(maps.len(), units * 2);

    for map in &maps {
        assert!(map.activation.iter().all(|&a| (0.0..=1.0).contains(&a)));
        if let Some(f) = map.footprint {
            assert!(f > 0.0 && f <= 1.0);
        } else {
            let peak = map.activation.iter().cloned().fold(0.0f64, f64::max);
            assert_eq!(peak, 0.0, "footprint may only be missing for silent units");
        }
    }
    // Per visited cell, the inferred activations of all units sum to one.
    let inferred: Vec<_> = maps.iter().filter(|m| m.variant == FieldVariant::Inferred).collect();
    for cell in 0..GRID * GRID {
        let total: f64 = inferred.iter().map(|m| m.activation[cell]).sum();
        assert!(
            total.abs() < 1e-9 || (total - 1.0).abs() < 1e-9,
            "cell {cell}: unit activations sum to {total}, expected 0 (unvisited) or 1"
        );
    }
    // Determinism.
    let again = place_field_maps(&model, &topology, &patterns, 4, 8, 0.7, 31);
    for (a, b) in maps.iter().zip(&again) {
        assert_eq!(a.activation, b.activation);
    }
}

#[test]
fn field_images_are_deterministic_with_black_walls_and_bright_peak() {
    let topology = build_topology(TopologyKind::Rooms);
    let free = topology.free_cells();
    let mut activation = vec![0.0; GRID * GRID];
    for (i, p) in free.iter().enumerate() {
        activation[p.cell_index()] = 0.2 + 0.6 * (i as f64 / free.len() as f64);
    }
    let peak_cell = free.last().unwrap().cell_index();
    let uniform = PlaceFieldMap {
        unit: 0,
        variant: FieldVariant::Inferred,
        activation: {
            let mut a = vec![0.0; GRID * GRID];
            for p in &free {
                a[p.cell_index()] = 0.4;
            }
            a
        },
        footprint: Some(1.0),
    };
    let graded = PlaceFieldMap {
        unit: 1,
        variant: FieldVariant::Generated,
        activation,
        footprint: Some(0.5),
    };

    let dir = tempfile::tempdir().unwrap();
    let names = export_field_images(&[uniform, graded], &topology, dir.path()).unwrap();
    assert_eq!(names.len(), 2);
    let bytes_a = std::fs::read(dir.path().join(&names[0])).unwrap();
    let bytes_b = std::fs::read(dir.path().join(&names[1])).unwrap();
    let names2 = export_field_images(
        &[
            PlaceFieldMap {
                unit: 0,
                variant: FieldVariant::Inferred,
                activation: {
                    let mut a = vec![0.0; GRID * GRID];
                    for p in &free {
                        a[p.cell_index()] = 0.4;
                    }
                    a
                },
                footprint: Some(1.0),
            },
        ],
        &topology,
        dir.path(),
    )
    .unwrap();
    assert_eq!(std::fs::read(dir.path().join(&names2[0])).unwrap(), bytes_a);

    let parse = |bytes: &[u8]| -> (usize, Vec<u8>) {
        let text = String::from_utf8_lossy(&bytes[..15]).to_string();
        assert!(text.starts_with("P5\n"));
        let header_end = bytes.windows(1).enumerate().filter(|(_, w)| w[0] == b'\n').nth(2).unwrap().0 + 1;
        let side: usize = text.split_whitespace().nth(1).unwrap().parse().unwrap();
        (side, bytes[header_end..].to_vec())
    };
    let (side, pixels_a) = parse(&bytes_a);
    assert_eq!(pixels_a.len(), side * side);
    let scale = side / GRID;

    // Uniform activation: every free-cell pixel identical (and at peak).
    for p in &free {
        let px = pixels_a[(p.r() * scale) * side + p.c() * scale];
        assert_eq!(px, 255);
    }
    // Walls stay black.
    for r in 0..GRID {
        for c in 0..GRID {
            if topology.is_wall(r as isize, c as isize) {
                assert_eq!(pixels_a[(r * scale) * side + c * scale], 0);
            }
        }
    }
    // Graded map: the peak cell is the brightest pixel.
    let (_, pixels_b) = parse(&bytes_b);
    let peak_px = pixels_b[(peak_cell / GRID * scale) * side + (peak_cell % GRID) * scale];
    assert_eq!(peak_px, 255);
    assert!(pixels_b.iter().all(|&px| px <= peak_px));
}

#[test]
fn trained_rollouts_at_tiny_scale_stay_finite() {
    let hyper = small_hyper();
    let topology = build_topology(TopologyKind::Open);
    let mut map_rng = ChaCha8Rng::seed_from_u64(40);
    let train_maps: Vec<_> = (0..3).map(|_| generate_pattern_map(&topology, &mut map_rng)).collect();
    let test_map = generate_pattern_map(&topology, &mut map_rng);
    let dataset = collect_dataset(&topology, &train_maps, 6, 10, 0.7, 41);
    let mean = mean_observation(&dataset);

    let (model, _) = dswm::models::train_dswm(&dataset, hyper, 42);
    let tagged = EvalModel::Dswm { model: &model, trained_on: TopologyKind::Open };
    let plan = RolloutPlan { warmup: 6, horizon: 4, p_repeat: 0.7 };
    for seed in 0..3 {
        let r = rollout_eval(&tagged, &topology, &test_map, 0, seed, &plan, &mean).unwrap();
        assert_eq!(r.step_mse.len(), 4);
        assert!(r.step_mse.iter().all(|e| e.is_finite() && *e >= 0.0));
        assert!(r.mean_mse <= 75.0, "squared error cannot exceed the component count");
    }
}
