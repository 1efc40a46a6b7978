//! Environment semantics: topology construction, pattern maps, dynamics,
//! observation rendering, the behavioral policy, and dataset collection.

use dswm::gridworld::*;
use proptest::prelude::*;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn free_cell_counts_per_topology() {
    let expected = [
        (TopologyKind::Open, 81),
        (TopologyKind::Rooms, 68),
        (TopologyKind::Ring, 72),
        (TopologyKind::Hallway, 65),
    ];
    for (kind, count) in expected {
        let topo = build_topology(kind);
        assert_eq!(topo.free_cells().len(), count, "{}", kind.name());
        assert!(topo.is_wall(0, 0), "{}: corner must be wall", kind.name());
    }
}

#[test]
fn all_free_cells_are_connected() {
    for kind in TopologyKind::ALL {
        let topo = build_topology(kind);
        let free = topo.free_cells();
        let dist = bfs_distances(&topo, free[0]);
        for cell in &free {
            assert!(
                dist[cell.r()][cell.c()].is_some(),
                "{}: {:?} unreachable",
                kind.name(),
                cell
            );
        }
    }
}

#[test]
fn pattern_map_colors_free_cells_only_and_is_deterministic() {
    for kind in TopologyKind::ALL {
        let topo = build_topology(kind);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let map = generate_pattern_map(&topo, &mut rng);
        for r in 0..GRID {
            for c in 0..GRID {
                let color = map.color(r, c);
                if topo.is_wall(r as isize, c as isize) {
                    assert_eq!(color, CellColor::Blank);
                } else {
                    assert_ne!(color, CellColor::Blank);
                }
            }
        }
        let mut rng2 = ChaCha8Rng::seed_from_u64(7);
        let map2 = generate_pattern_map(&topo, &mut rng2);
        for r in 0..GRID {
            for c in 0..GRID {
                assert_eq!(map.color(r, c), map2.color(r, c));
            }
        }
    }
}

#[test]
fn pattern_map_red_fraction_concentrates_near_half() {
    let topo = build_topology(TopologyKind::Open);
    let n_maps = 1000;
    let mut red = 0usize;
    let mut total = 0usize;
    let mut per_cell_red = [[0usize; GRID]; GRID];
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    for _ in 0..n_maps {
        let map = generate_pattern_map(&topo, &mut rng);
        for cell in topo.free_cells() {
            total += 1;
            if map.color(cell.r(), cell.c()) == CellColor::Red {
                red += 1;
                per_cell_red[cell.r()][cell.c()] += 1;
            }
        }
    }
    let fraction = red as f64 / total as f64;
    assert!((0.45..=0.55).contains(&fraction), "red fraction {fraction}");
    // Per-cell frequency within 3σ of the binomial mean.
    let sigma = (0.25 / n_maps as f64).sqrt();
    for cell in topo.free_cells() {
        let freq = per_cell_red[cell.r()][cell.c()] as f64 / n_maps as f64;
        assert!(
            (freq - 0.5).abs() <= 3.0 * sigma,
            "cell {:?} red frequency {freq} outside 3σ",
            cell
        );
    }
}

#[test]
fn step_dynamics_blocks_walls_and_moves_into_free_cells() {
    let topo = build_topology(TopologyKind::Open);
    // Adjacent to the north border wall.
    let pos = Position::new(1, 5);
    assert_eq!(step_dynamics(pos, Action::North, &topo), pos);
    // Open interior move.
    let mid = Position::new(5, 5);
    assert_eq!(step_dynamics(mid, Action::East, &topo), Position::new(5, 6));
    // Inverse actions cancel.
    let there = step_dynamics(mid, Action::North, &topo);
    assert_eq!(step_dynamics(there, Action::South, &topo), mid);
}

#[test]
fn observation_center_cell_shows_own_content() {
    let topo = build_topology(TopologyKind::Open);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let map = generate_pattern_map(&topo, &mut rng);
    for cell in topo.free_cells() {
        let obs = render_observation(&topo, &map, cell);
        let expected = match map.color(cell.r(), cell.c()) {
            CellColor::Red => CH_RED,
            CellColor::Green => CH_GREEN,
            CellColor::Blank => unreachable!(),
        };
        assert_eq!(obs.get(2, 2, expected), 1);
    }
}

#[test]
fn observation_at_corner_shows_border_walls() {
    let topo = build_topology(TopologyKind::Open);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let map = generate_pattern_map(&topo, &mut rng);
    let obs = render_observation(&topo, &map, Position::new(1, 1));
    // Window rows 0-1 map to grid rows -1 and 0: both entirely wall.
    for wc in 0..WINDOW {
        assert_eq!(obs.get(0, wc, CH_WALL), 1);
        assert_eq!(obs.get(1, wc, CH_WALL), 1);
    }
    for wr in 0..WINDOW {
        assert_eq!(obs.get(wr, 0, CH_WALL), 1);
        assert_eq!(obs.get(wr, 1, CH_WALL), 1);
    }
}

#[test]
fn observation_color_count_matches_in_window_free_cells() {
    for kind in TopologyKind::ALL {
        let topo = build_topology(kind);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let map = generate_pattern_map(&topo, &mut rng);
        for cell in topo.free_cells() {
            let obs = render_observation(&topo, &map, cell);
            let mut colored = 0;
            let mut free_in_window = 0;
            for wr in 0..WINDOW {
                for wc in 0..WINDOW {
                    colored += (obs.get(wr, wc, CH_RED) + obs.get(wr, wc, CH_GREEN)) as usize;
                    let gr = cell.r() as isize + wr as isize - 2;
                    let gc = cell.c() as isize + wc as isize - 2;
                    if !topo.is_wall(gr, gc) {
                        free_in_window += 1;
                    }
                }
            }
            assert_eq!(colored, free_in_window);
            // Exactly one channel active per window cell.
            let active: usize = obs.bits().iter().map(|&b| b as usize).sum();
            assert_eq!(active, WINDOW * WINDOW);
        }
    }
}

#[test]
fn render_observation_is_pure() {
    let topo = build_topology(TopologyKind::Rooms);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let map = generate_pattern_map(&topo, &mut rng);
    let pos = Position::new(3, 3);
    assert_eq!(render_observation(&topo, &map, pos), render_observation(&topo, &map, pos));
}

#[test]
fn policy_without_stickiness_is_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut counts = [0usize; 4];
    let n = 100_000;
    let mut prev = None;
    for _ in 0..n {
        let a = semi_random_action(&mut rng, prev, 0.0);
        counts[a.index()] += 1;
        prev = Some(a);
    }
    for (i, &c) in counts.iter().enumerate() {
        let freq = c as f64 / n as f64;
        assert!((freq - 0.25).abs() < 0.02, "action {i}: frequency {freq}");
    }
}

#[test]
fn policy_with_full_stickiness_always_repeats() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let first = semi_random_action(&mut rng, None, 1.0);
    let mut prev = first;
    for _ in 0..100 {
        let a = semi_random_action(&mut rng, Some(prev), 1.0);
        assert_eq!(a, prev);
        prev = a;
    }
    let _ = first;
}

#[test]
fn policy_mean_run_length_matches_geometric_prediction() {
    // P(same as previous) = 0.7 + 0.3/4 = 0.775 → mean run length 1/0.225.
    let expected = 1.0 / (1.0 - 0.775);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let n = 200_000;
    let mut prev: Option<Action> = None;
    let mut runs = 0usize;
    for _ in 0..n {
        let a = semi_random_action(&mut rng, prev, 0.7);
        if prev != Some(a) {
            runs += 1;
        }
        prev = Some(a);
    }
    let mean_run = n as f64 / runs as f64;
    assert!(
        (mean_run - expected).abs() < 0.15,
        "mean run length {mean_run}, expected ≈ {expected}"
    );
}

#[test]
fn dataset_records_consistent_transitions() {
    let topo = build_topology(TopologyKind::Hallway);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let pool: Vec<_> = (0..10).map(|_| generate_pattern_map(&topo, &mut rng)).collect();
    let ds = collect_dataset(&topo, &pool, 20, 50, 0.7, 99);
    assert_eq!(ds.episodes.len(), 20);
    for ep in &ds.episodes {
        assert_eq!(ep.steps.len(), 50);
        let pattern = &pool[ep.pattern_map_id as usize];
        for t in 0..ep.steps.len() {
            let step = &ep.steps[t];
            assert!(topo.is_free(step.position), "position on wall");
            assert_eq!(
                step.observation,
                render_observation(&topo, pattern, step.position),
                "recorded observation mismatch"
            );
            if t + 1 < ep.steps.len() {
                assert_eq!(
                    ep.steps[t + 1].position,
                    step_dynamics(step.position, step.action, &topo),
                    "position inconsistent with dynamics"
                );
            }
        }
    }
}

#[test]
fn dataset_is_deterministic_and_order_independent() {
    let topo = build_topology(TopologyKind::Open);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let pool: Vec<_> = (0..5).map(|_| generate_pattern_map(&topo, &mut rng)).collect();
    let a = collect_dataset(&topo, &pool, 8, 10, 0.7, 42);
    let b = collect_dataset(&topo, &pool, 8, 10, 0.7, 42);
    for (ea, eb) in a.episodes.iter().zip(&b.episodes) {
        assert_eq!(ea.pattern_map_id, eb.pattern_map_id);
        for (sa, sb) in ea.steps.iter().zip(&eb.steps) {
            assert_eq!(sa.position, sb.position);
            assert_eq!(sa.action, sb.action);
        }
    }
    // A larger collection shares every prefix episode (per-episode streams).
    let c = collect_dataset(&topo, &pool, 12, 10, 0.7, 42);
    for (ea, ec) in a.episodes.iter().zip(&c.episodes) {
        assert_eq!(ea.pattern_map_id, ec.pattern_map_id);
        for (sa, sc) in ea.steps.iter().zip(&ec.steps) {
            assert_eq!(sa.position, sc.position);
        }
    }
}

#[test]
fn smallest_dataset_has_one_transition() {
    let topo = build_topology(TopologyKind::Open);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let pool = vec![generate_pattern_map(&topo, &mut rng)];
    let ds = collect_dataset(&topo, &pool, 1, 1, 0.7, 1);
    assert_eq!(ds.episodes.len(), 1);
    assert_eq!(ds.episodes[0].steps.len(), 1);
}

#[test]
fn canonical_task_distances_equal_optimal_everywhere() {
    for kind in TopologyKind::ALL {
        let topo = build_topology(kind);
        let task = GoalTask::canonical(&topo);
        assert_eq!(task.goal_for_episode(0), task.goal_phase1);
        assert_eq!(task.goal_for_episode(49), task.goal_phase1);
        assert_eq!(task.goal_for_episode(50), task.goal_phase2);
        let d1 = bfs_distance(&topo, task.start, task.goal_phase1).unwrap();
        let d2 = bfs_distance(&topo, task.start, task.goal_phase2).unwrap();
        assert_eq!(d1, kind.optimal_steps(), "{} phase 1", kind.name());
        assert_eq!(d2, kind.optimal_steps(), "{} phase 2", kind.name());
    }
}

#[test]
fn optimal_policy_reaches_goal_in_optimal_steps() {
    for (kind, expect) in [(TopologyKind::Open, 5), (TopologyKind::Rooms, 7)] {
        let topo = build_topology(kind);
        let task = GoalTask::canonical(&topo);
        let out = goal_episode(&topo, task.start, task.goal_phase1, task.max_steps, 1.0, |p| {
            bfs_optimal_action(&topo, p, task.goal_phase1)
        });
        assert_eq!(out.steps_to_goal, expect, "{}", kind.name());
        assert_eq!(out.total_reward, 1.0);
    }
}

#[test]
fn hopeless_policy_times_out_with_zero_reward() {
    let topo = build_topology(TopologyKind::Open);
    let task = GoalTask::canonical(&topo);
    // Walking into the north wall forever never reaches (1,6).
    let out = goal_episode(&topo, task.start, task.goal_phase1, task.max_steps, 1.0, |_| {
        Action::North
    });
    assert_eq!(out.steps_to_goal, 100);
    assert_eq!(out.total_reward, 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn long_walks_stay_on_free_cells(kind_idx in 0usize..4, seed in 0u64..500) {
        let topo = build_topology(TopologyKind::ALL[kind_idx]);
        let free = topo.free_cells();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pos = free[rng.gen_range(0..free.len())];
        let mut prev = None;
        for _ in 0..200 {
            let a = semi_random_action(&mut rng, prev, 0.7);
            pos = step_dynamics(pos, a, &topo);
            prop_assert!(topo.is_free(pos));
            prev = Some(a);
        }
    }
}
