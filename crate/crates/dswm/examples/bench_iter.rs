use dswm::gridworld::{build_topology, collect_dataset, generate_pattern_map, TopologyKind};
use dswm::models::{DswmTrainer, Hyper, WorldTrainer};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn main() {
    let topology = build_topology(TopologyKind::Open);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let patterns: Vec<_> = (0..10).map(|_| generate_pattern_map(&topology, &mut rng)).collect();
    let dataset = collect_dataset(&topology, &patterns, 100, 50, 0.7, 2);
    let hyper = Hyper::default();

    let mut trainer = DswmTrainer::new(hyper, 3);
    let t0 = Instant::now();
    trainer.run(&dataset, 10, |_| {});
    let dswm_per = t0.elapsed().as_secs_f64() / 10.0;
    println!("dswm: {:.3} s/iter -> {:.1} min for 5000", dswm_per, dswm_per * 5000.0 / 60.0);

    let mut wtrainer = WorldTrainer::new(hyper, 3);
    let t1 = Instant::now();
    wtrainer.run(&dataset, 10, |_| {});
    let world_per = t1.elapsed().as_secs_f64() / 10.0;
    println!("world: {:.3} s/iter -> {:.1} min for 5000", world_per, world_per * 5000.0 / 60.0);
}
