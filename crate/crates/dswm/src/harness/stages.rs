//! Pipeline stages. Each stage checks the manifest, does its work, writes
//! stamped outputs, and records completion. Independent jobs inside a stage
//! run on a small worker pool when `workers > 1`.

use crate::evaluation::{
    aggregate_rollouts, export_field_images, masked_win_fraction, mean_observation,
    place_field_maps, rollout_eval, sample_stats, EvalModel, MaskedStats, RolloutPlan,
    RolloutResult,
};
use crate::gridworld::{
    build_topology, collect_dataset, generate_pattern_map, EpisodeDataset, GoalTask, PatternMap,
    Topology, TopologyKind,
};
use crate::harness::config::ExperimentConfig;
use crate::harness::io::{
    load_checkpoint, load_dataset, load_map_pools, read_stamped_csv, save_checkpoint,
    save_dataset, save_map_pools, write_csv, CheckpointMeta, LoadedCheckpoint, LossCsvWriter,
    MapPools,
};
use crate::harness::manifest::Manifest;
use crate::harness::seeds::derive_seed;
use crate::harness::{HarnessError, Result};
use crate::models::{
    DswmModel, DswmTrainer, LossRow, ModelKind, TrainerAccess, WorldModel, WorldTrainer,
};
use crate::successor_rl::{
    final_window_stats, run_session, AgentVariant, BasisKind, DynaConfig, FeatureBasis,
    SessionOutcome, SessionParams,
};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

const CHECKPOINT_EVERY: u64 = 500;

/// Relative locations of every artifact in an output tree.
pub struct OutputPaths;

impl OutputPaths {
    pub fn config_copy() -> PathBuf {
        PathBuf::from("config.toml")
    }
    pub fn manifest() -> PathBuf {
        PathBuf::from("manifest.json")
    }
    pub fn maps(topology: TopologyKind) -> PathBuf {
        PathBuf::from("datasets").join(format!("maps_{}.bin", topology.name()))
    }
    pub fn dataset(topology: TopologyKind) -> PathBuf {
        PathBuf::from("datasets").join(format!("dataset_{}.bin", topology.name()))
    }
    pub fn checkpoint(kind: ModelKind, topology: TopologyKind) -> PathBuf {
        PathBuf::from("models").join(format!("checkpoint_{}_{}.bin", kind.name(), topology.name()))
    }
    pub fn loss_csv(kind: ModelKind, topology: TopologyKind) -> PathBuf {
        PathBuf::from("models").join(format!("loss_{}_{}.csv", kind.name(), topology.name()))
    }
    pub fn rollout_results(topology: TopologyKind) -> PathBuf {
        PathBuf::from("eval").join(format!("rollouts_{}.csv", topology.name()))
    }
    pub fn masked_stats(topology: TopologyKind) -> PathBuf {
        PathBuf::from("eval").join(format!("masked_{}.csv", topology.name()))
    }
    pub fn rollout_summary() -> PathBuf {
        PathBuf::from("eval").join("rollout_summary.csv")
    }
    pub fn field_dir(topology: TopologyKind) -> PathBuf {
        PathBuf::from("eval").join("fields").join(topology.name())
    }
    pub fn rl_curves(topology: TopologyKind) -> PathBuf {
        PathBuf::from("rl").join(format!("curves_{}.csv", topology.name()))
    }
    pub fn rl_revisits(topology: TopologyKind) -> PathBuf {
        PathBuf::from("rl").join(format!("revisits_{}.csv", topology.name()))
    }
    pub fn rl_summary() -> PathBuf {
        PathBuf::from("rl").join("summary.csv")
    }
}

/// Shared state for a pipeline run over one output directory.
pub struct StageContext {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl StageContext {
    /// Open (or initialize) an output directory: persist the config copy and
    /// load any manifest left by previous runs with the same config.
    pub fn open(config: ExperimentConfig, root: &Path) -> Result<StageContext> {
        config.validate()?;
        let config_hash = config.hash();
        std::fs::create_dir_all(root).map_err(HarnessError::io(root))?;
        crate::harness::io::atomic_write(
            &root.join(OutputPaths::config_copy()),
            config.canonical_toml().as_bytes(),
        )?;
        let manifest =
            Manifest::load_or_new(&root.join(OutputPaths::manifest()), &config_hash, config.master_seed);
        Ok(StageContext { config, config_hash, root: root.to_path_buf(), manifest })
    }

    pub fn save_manifest(&self) -> Result<()> {
        self.manifest.save(&self.root.join(OutputPaths::manifest()))
    }

    fn skip(&self, stage: &str) -> bool {
        self.manifest.is_complete(&self.root, stage)
    }

    fn record(&mut self, stage: &str, files: Vec<PathBuf>) -> Result<()> {
        self.manifest.record(stage, files);
        self.save_manifest()
    }

    pub fn topology(&self, kind: TopologyKind) -> Topology {
        build_topology(kind)
    }

    /// Load the persisted map pools for one topology, verifying provenance.
    pub fn load_maps(&self, kind: TopologyKind) -> Result<MapPools> {
        let path = self.root.join(OutputPaths::maps(kind));
        if !path.is_file() {
            return Err(HarnessError::MissingPrerequisite(format!(
                "map pool for {} (run make-datasets first)",
                kind.name()
            )));
        }
        let pools = load_map_pools(&path, &self.topology(kind))?;
        self.check_hash(&path, &pools.config_hash)?;
        Ok(pools)
    }

    pub fn load_dataset(&self, kind: TopologyKind) -> Result<EpisodeDataset> {
        let path = self.root.join(OutputPaths::dataset(kind));
        if !path.is_file() {
            return Err(HarnessError::MissingPrerequisite(format!(
                "dataset for {} (run make-datasets first)",
                kind.name()
            )));
        }
        let (dataset, hash, _) = load_dataset(&path)?;
        self.check_hash(&path, &hash)?;
        if dataset.topology_kind != kind {
            return Err(HarnessError::Format {
                path,
                reason: "dataset topology mismatch".to_string(),
            });
        }
        Ok(dataset)
    }

    fn check_hash(&self, path: &Path, found: &str) -> Result<()> {
        if found != self.config_hash {
            return Err(HarnessError::MissingPrerequisite(format!(
                "{} was produced under config {} but the current config is {}; regenerate it",
                path.display(),
                found,
                self.config_hash
            )));
        }
        Ok(())
    }
}

/// Run `jobs` through `work`, at most `workers` at a time. The first error
/// wins; remaining queued jobs are abandoned.
pub fn run_jobs<J, F>(workers: usize, jobs: Vec<J>, work: F) -> Result<()>
where
    J: Send,
    F: Fn(J) -> Result<()> + Sync,
{
    if workers <= 1 {
        for job in jobs {
            work(job)?;
        }
        return Ok(());
    }
    let queue = Mutex::new(jobs.into_iter());
    let failure: Mutex<Option<HarnessError>> = Mutex::new(None);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                if failure.lock().unwrap().is_some() {
                    return;
                }
                let job = queue.lock().unwrap().next();
                match job {
                    Some(job) => {
                        if let Err(e) = work(job) {
                            failure.lock().unwrap().get_or_insert(e);
                            return;
                        }
                    }
                    None => return,
                }
            });
        }
    });
    match failure.into_inner().unwrap() {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

// --- datasets ---------------------------------------------------------------

/// Generate and persist, per topology: the train/test pattern-map pools and
/// the training episode dataset.
pub fn stage_make_datasets(ctx: &mut StageContext, log: &dyn Fn(&str)) -> Result<()> {
    for kind in ctx.config.scale.topologies.clone() {
        let stage = format!("datasets/{}", kind.name());
        if ctx.skip(&stage) {
            log(&format!("datasets {}: already complete, skipping", kind.name()));
            continue;
        }
        let topology = ctx.topology(kind);
        let scale = ctx.config.scale.clone();
        let maps_seed = derive_seed(ctx.config.master_seed, "maps", kind.name(), 0);
        let mut rng = ChaCha8Rng::seed_from_u64(maps_seed);
        let total = scale.train_pattern_maps + scale.test_pattern_maps;
        let mut maps: Vec<PatternMap> =
            (0..total).map(|_| generate_pattern_map(&topology, &mut rng)).collect();
        let test = maps.split_off(scale.train_pattern_maps);
        let pools = MapPools {
            topology_kind: kind,
            config_hash: ctx.config_hash.clone(),
            seed: maps_seed,
            train: maps,
            test,
        };
        let data_seed = derive_seed(ctx.config.master_seed, "dataset", kind.name(), 0);
        let dataset = collect_dataset(
            &topology,
            &pools.train,
            scale.train_episodes,
            scale.episode_length,
            scale.p_repeat,
            data_seed,
        );
        let maps_rel = OutputPaths::maps(kind);
        let data_rel = OutputPaths::dataset(kind);
        save_map_pools(&ctx.root.join(&maps_rel), &pools)?;
        save_dataset(&ctx.root.join(&data_rel), &dataset, &ctx.config_hash, data_seed)?;
        ctx.record(&stage, vec![maps_rel, data_rel])?;
        log(&format!(
            "datasets {}: {} train maps, {} test maps, {} episodes x {} steps",
            kind.name(),
            scale.train_pattern_maps,
            scale.test_pattern_maps,
            scale.train_episodes,
            scale.episode_length
        ));
    }
    Ok(())
}

// --- training ---------------------------------------------------------------

fn apply_checkpoint<T: TrainerAccess>(trainer: &mut T, ck: &LoadedCheckpoint, path: &Path) -> Result<()> {
    let (params, adam, rng, iteration) = trainer.state_mut();
    if ck.params.len() != params.len() {
        return Err(HarnessError::Format {
            path: path.to_path_buf(),
            reason: format!("expected {} parameters, found {}", params.len(), ck.params.len()),
        });
    }
    for (name, values) in &ck.params {
        if !params.restore(name, values) {
            return Err(HarnessError::Format {
                path: path.to_path_buf(),
                reason: format!("unknown parameter {name:?}"),
            });
        }
    }
    adam.restore(ck.adam_m.clone(), ck.adam_v.clone(), ck.adam_step);
    *rng = ChaCha8Rng::from_seed(ck.rng_seed);
    rng.set_stream(ck.rng_stream);
    rng.set_word_pos(ck.rng_word_pos);
    *iteration = ck.meta.iteration;
    Ok(())
}

fn drive_training<T: TrainerAccess>(
    trainer: &mut T,
    ctx: &StageContext,
    dataset: &EpisodeDataset,
    meta_template: &CheckpointMeta,
    progress: &dyn Fn(&LossRow),
) -> Result<()> {
    let target = ctx.config.hyper.iterations;
    let ck_path = ctx.root.join(OutputPaths::checkpoint(meta_template.kind, meta_template.topology_kind));
    let csv_path = ctx.root.join(OutputPaths::loss_csv(meta_template.kind, meta_template.topology_kind));
    let mut csv = LossCsvWriter::open(
        &csv_path,
        &ctx.config_hash,
        ctx.config.master_seed,
        trainer.iteration(),
    )?;
    let save = |trainer: &T, iteration: u64| -> Result<()> {
        let meta = CheckpointMeta { iteration, ..meta_template.clone() };
        save_checkpoint(&ck_path, &meta, trainer.params(), trainer.adam(), trainer.rng())
    };
    while trainer.iteration() < target {
        let row = trainer.step_iteration(dataset);
        csv.append(&row)?;
        progress(&row);
        if trainer.iteration().is_multiple_of(CHECKPOINT_EVERY) {
            save(trainer, trainer.iteration())?;
        }
    }
    save(trainer, trainer.iteration())
}

/// Train one model kind on one topology, resuming from any checkpoint left
/// by an earlier (possibly interrupted) run.
pub fn stage_train(
    ctx: &mut StageContext,
    kind: ModelKind,
    topology: TopologyKind,
    log: &dyn Fn(&str),
) -> Result<()> {
    let stage = format!("train/{}/{}", kind.name(), topology.name());
    if ctx.skip(&stage) {
        log(&format!("train {}/{}: already complete, skipping", kind.name(), topology.name()));
        return Ok(());
    }
    let dataset = ctx.load_dataset(topology)?;
    let seed = derive_seed(ctx.config.master_seed, &format!("train_{}", kind.name()), topology.name(), 0);
    let meta = CheckpointMeta {
        kind,
        topology_kind: topology,
        config_hash: ctx.config_hash.clone(),
        seed,
        iteration: 0,
    };
    let ck_path = ctx.root.join(OutputPaths::checkpoint(kind, topology));
    let resume = if ck_path.is_file() {
        let ck = load_checkpoint(&ck_path)?;
        if ck.meta.config_hash != ctx.config_hash
            || ck.meta.kind != kind
            || ck.meta.topology_kind != topology
            || ck.meta.seed != seed
        {
            return Err(HarnessError::MissingPrerequisite(format!(
                "{} belongs to a different run; remove it or change --out",
                ck_path.display()
            )));
        }
        Some(ck)
    } else {
        None
    };
    let label = format!("train {}/{}", kind.name(), topology.name());
    let target = ctx.config.hyper.iterations;
    let progress = |row: &LossRow| {
        if row.iteration.is_multiple_of(100) || row.iteration == target {
            log(&format!("{label}: iteration {}/{} total={:.4}", row.iteration, target, row.total));
        }
    };
    match kind {
        ModelKind::Dswm => {
            let mut trainer = DswmTrainer::new(ctx.config.hyper, seed);
            if let Some(ck) = &resume {
                apply_checkpoint(&mut trainer, ck, &ck_path)?;
                log(&format!("{label}: resuming from iteration {}", trainer.iteration));
            }
            drive_training(&mut trainer, ctx, &dataset, &meta, &progress)?;
        }
        ModelKind::World => {
            let mut trainer = WorldTrainer::new(ctx.config.hyper, seed);
            if let Some(ck) = &resume {
                apply_checkpoint(&mut trainer, ck, &ck_path)?;
                log(&format!("{label}: resuming from iteration {}", trainer.iteration));
            }
            drive_training(&mut trainer, ctx, &dataset, &meta, &progress)?;
        }
    }
    ctx.record(
        &stage,
        vec![OutputPaths::checkpoint(kind, topology), OutputPaths::loss_csv(kind, topology)],
    )
}

/// Load a trained DSWM checkpoint into a model (no optimizer state).
pub fn load_trained_dswm(ctx: &StageContext, topology: TopologyKind) -> Result<DswmModel> {
    let path = ctx.root.join(OutputPaths::checkpoint(ModelKind::Dswm, topology));
    let ck = load_trained_checkpoint(ctx, &path, ModelKind::Dswm, topology)?;
    let mut init = ChaCha8Rng::seed_from_u64(ck.meta.seed);
    let mut model = DswmModel::new(ctx.config.hyper, &mut init);
    restore_model_params(&mut model.params, &ck, &path)?;
    Ok(model)
}

/// Load a trained baseline checkpoint into a model.
pub fn load_trained_world(ctx: &StageContext, topology: TopologyKind) -> Result<WorldModel> {
    let path = ctx.root.join(OutputPaths::checkpoint(ModelKind::World, topology));
    let ck = load_trained_checkpoint(ctx, &path, ModelKind::World, topology)?;
    let mut init = ChaCha8Rng::seed_from_u64(ck.meta.seed);
    let mut model = WorldModel::new(ctx.config.hyper, &mut init);
    restore_model_params(&mut model.params, &ck, &path)?;
    Ok(model)
}

fn load_trained_checkpoint(
    ctx: &StageContext,
    path: &Path,
    kind: ModelKind,
    topology: TopologyKind,
) -> Result<LoadedCheckpoint> {
    if !path.is_file() {
        return Err(HarnessError::MissingPrerequisite(format!(
            "trained {} checkpoint for {} (run train first)",
            kind.name(),
            topology.name()
        )));
    }
    let ck = load_checkpoint(path)?;
    ctx.check_hash(path, &ck.meta.config_hash)?;
    if ck.meta.iteration < ctx.config.hyper.iterations {
        return Err(HarnessError::MissingPrerequisite(format!(
            "{} stopped at iteration {} of {}; finish training first",
            path.display(),
            ck.meta.iteration,
            ctx.config.hyper.iterations
        )));
    }
    Ok(ck)
}

fn restore_model_params(
    params: &mut crate::numerics::params::ParamSet,
    ck: &LoadedCheckpoint,
    path: &Path,
) -> Result<()> {
    if ck.params.len() != params.len() {
        return Err(HarnessError::Format {
            path: path.to_path_buf(),
            reason: format!("expected {} parameters, found {}", params.len(), ck.params.len()),
        });
    }
    for (name, values) in &ck.params {
        if !params.restore(name, values) {
            return Err(HarnessError::Format {
                path: path.to_path_buf(),
                reason: format!("unknown parameter {name:?}"),
            });
        }
    }
    Ok(())
}

/// All (model, topology) training jobs for the current config.
pub fn training_jobs(config: &ExperimentConfig) -> Vec<(ModelKind, TopologyKind)> {
    let mut jobs = Vec::new();
    for &kind in &ModelKind::ALL {
        for &topology in &config.scale.topologies {
            jobs.push((kind, topology));
        }
    }
    jobs
}

// --- rollout evaluation -------------------------------------------------------

const ROLLOUT_CSV_HEADER: &str = "model,topology,map_id,seed,step_index,mse";
const MASKED_CSV_HEADER: &str = "model,topology,map_id,seed,model_mse,baseline_mse,components";
const ROLLOUT_SUMMARY_HEADER: &str = "scope,topology,model,map_id,n,mean,std,stderr,p_value";
const RL_CURVES_HEADER: &str = "basis,topology,seed,episode,steps_to_goal,total_reward";
const RL_REVISITS_HEADER: &str = "basis,topology,seed,episode,step,predicted,zeroed";
/// Episodes pooled for the end-of-session performance statistics.
const FINAL_WINDOW: usize = 20;

fn format_error(path: &Path, reason: String) -> HarnessError {
    HarnessError::Format { path: path.to_path_buf(), reason }
}

fn split_row<'a>(path: &Path, row: &'a str, columns: usize) -> Result<Vec<&'a str>> {
    let cols: Vec<&str> = row.split(',').collect();
    if cols.len() != columns {
        return Err(format_error(
            path,
            format!("expected {columns} columns, found {} in {row:?}", cols.len()),
        ));
    }
    Ok(cols)
}

fn parse_col<T: std::str::FromStr>(path: &Path, raw: &str) -> Result<T> {
    raw.parse().map_err(|_| format_error(path, format!("bad value {raw:?}")))
}

/// Paired rollout evaluation of both trained models on one topology's
/// held-out maps, plus the place-field images. Writes the per-step and
/// masked-comparison CSVs and records the stage.
fn eval_rollouts_for(
    ctx: &mut StageContext,
    kind: TopologyKind,
    log: &dyn Fn(&str),
) -> Result<Vec<RolloutResult>> {
    let stage = format!("eval/{}", kind.name());
    let scale = ctx.config.scale.clone();
    let master = ctx.config.master_seed;
    let topology = ctx.topology(kind);
    let pools = ctx.load_maps(kind)?;
    let dataset = ctx.load_dataset(kind)?;
    let mean_obs = mean_observation(&dataset);
    let dswm = load_trained_dswm(ctx, kind)?;
    let world = load_trained_world(ctx, kind)?;
    let plan = RolloutPlan {
        warmup: scale.rollout_warmup,
        horizon: scale.rollout_horizon,
        p_repeat: scale.p_repeat,
    };

    let jobs: Vec<(usize, usize)> = (0..pools.test.len())
        .flat_map(|map_idx| (0..scale.rollout_seeds).map(move |seed_idx| (map_idx, seed_idx)))
        .collect();
    let collected: Mutex<BTreeMap<(usize, usize), [RolloutResult; 2]>> =
        Mutex::new(BTreeMap::new());
    run_jobs(ctx.config.workers, jobs, |(map_idx, seed_idx)| {
        let pattern = &pools.test[map_idx];
        // Held-out maps are numbered after the training pool.
        let map_id = (pools.train.len() + map_idx) as u32;
        let seed = derive_seed(
            master,
            "rollout",
            kind.name(),
            (map_idx * scale.rollout_seeds + seed_idx) as u64,
        );
        let run = |model: EvalModel| {
            rollout_eval(&model, &topology, pattern, map_id, seed, &plan, &mean_obs)
                .map_err(|e| HarnessError::FailedAssertion(e.to_string()))
        };
        let pair = [
            run(EvalModel::Dswm { model: &dswm, trained_on: kind })?,
            run(EvalModel::World { model: &world, trained_on: kind })?,
        ];
        collected.lock().unwrap().insert((map_idx, seed_idx), pair);
        Ok(())
    })?;
    let results: Vec<RolloutResult> =
        collected.into_inner().unwrap().into_values().flatten().collect();

    let mut rollout_rows = Vec::new();
    let mut masked_rows = Vec::new();
    for r in &results {
        for (step_index, mse) in r.step_mse.iter().enumerate() {
            rollout_rows.push(format!(
                "{},{},{},{},{},{}",
                r.model.name(),
                kind.name(),
                r.map_id,
                r.seed,
                step_index,
                mse
            ));
        }
        if let Some(m) = r.masked {
            masked_rows.push(format!(
                "{},{},{},{},{},{},{}",
                r.model.name(),
                kind.name(),
                r.map_id,
                r.seed,
                m.model_mse,
                m.baseline_mse,
                m.components
            ));
        }
    }
    let rollouts_rel = OutputPaths::rollout_results(kind);
    let masked_rel = OutputPaths::masked_stats(kind);
    write_csv(
        &ctx.root.join(&rollouts_rel),
        &ctx.config_hash,
        master,
        ROLLOUT_CSV_HEADER,
        &rollout_rows,
    )?;
    write_csv(&ctx.root.join(&masked_rel), &ctx.config_hash, master, MASKED_CSV_HEADER, &masked_rows)?;

    let fields_seed = derive_seed(master, "fields", kind.name(), 0);
    let field_maps = place_field_maps(
        &dswm,
        &topology,
        &pools.test,
        scale.place_field_episodes,
        scale.episode_length,
        scale.p_repeat,
        fields_seed,
    );
    let dir_rel = OutputPaths::field_dir(kind);
    let image_names = export_field_images(&field_maps, &topology, &ctx.root.join(&dir_rel))
        .map_err(HarnessError::io(ctx.root.join(&dir_rel)))?;

    let mut files = vec![rollouts_rel, masked_rel];
    files.extend(image_names.iter().map(|name| dir_rel.join(name)));
    ctx.record(&stage, files)?;

    let mean_of = |model: ModelKind| {
        let values: Vec<f64> =
            results.iter().filter(|r| r.model == model).map(|r| r.mean_mse).collect();
        values.iter().sum::<f64>() / values.len() as f64
    };
    log(&format!(
        "eval {}: {} paired rollouts; mean mse dswm {:.3} vs world {:.3}; {} field images",
        kind.name(),
        results.len() / 2,
        mean_of(ModelKind::Dswm),
        mean_of(ModelKind::World),
        image_names.len()
    ));
    Ok(results)
}

/// Rebuild rollout results from the stamped CSVs of a completed stage.
fn load_rollout_csvs(ctx: &StageContext, kind: TopologyKind) -> Result<Vec<RolloutResult>> {
    let rollouts_path = ctx.root.join(OutputPaths::rollout_results(kind));
    let step_rows = read_stamped_csv(&rollouts_path, &ctx.config_hash, ROLLOUT_CSV_HEADER)?;
    let mut steps: BTreeMap<(usize, u32, u64), Vec<f64>> = BTreeMap::new();
    for row in &step_rows {
        let cols = split_row(&rollouts_path, row, 6)?;
        let model = ModelKind::from_name(cols[0])
            .ok_or_else(|| format_error(&rollouts_path, format!("unknown model {:?}", cols[0])))?;
        if cols[1] != kind.name() {
            return Err(format_error(
                &rollouts_path,
                format!("row for topology {:?} in the {} file", cols[1], kind.name()),
            ));
        }
        let map_id: u32 = parse_col(&rollouts_path, cols[2])?;
        let seed: u64 = parse_col(&rollouts_path, cols[3])?;
        let step_index: usize = parse_col(&rollouts_path, cols[4])?;
        let mse: f64 = parse_col(&rollouts_path, cols[5])?;
        let series = steps.entry((model as usize, map_id, seed)).or_default();
        if series.len() != step_index {
            return Err(format_error(
                &rollouts_path,
                format!("step {step_index} arrived out of order"),
            ));
        }
        series.push(mse);
    }

    let masked_path = ctx.root.join(OutputPaths::masked_stats(kind));
    let masked_rows = read_stamped_csv(&masked_path, &ctx.config_hash, MASKED_CSV_HEADER)?;
    let mut masked: BTreeMap<(usize, u32, u64), MaskedStats> = BTreeMap::new();
    for row in &masked_rows {
        let cols = split_row(&masked_path, row, 7)?;
        let model = ModelKind::from_name(cols[0])
            .ok_or_else(|| format_error(&masked_path, format!("unknown model {:?}", cols[0])))?;
        let map_id: u32 = parse_col(&masked_path, cols[2])?;
        let seed: u64 = parse_col(&masked_path, cols[3])?;
        let stats = MaskedStats {
            model_mse: parse_col(&masked_path, cols[4])?,
            baseline_mse: parse_col(&masked_path, cols[5])?,
            components: parse_col(&masked_path, cols[6])?,
        };
        if masked.insert((model as usize, map_id, seed), stats).is_some() {
            return Err(format_error(&masked_path, format!("duplicate row {row:?}")));
        }
    }

    let mut results = Vec::with_capacity(steps.len());
    for ((slot, map_id, seed), step_mse) in steps {
        let mean_mse = step_mse.iter().sum::<f64>() / step_mse.len() as f64;
        results.push(RolloutResult {
            model: ModelKind::ALL[slot],
            topology: kind,
            map_id,
            seed,
            mean_mse,
            masked: masked.remove(&(slot, map_id, seed)),
            step_mse,
        });
    }
    if let Some((slot, map_id, seed)) = masked.keys().next() {
        return Err(format_error(
            &masked_path,
            format!(
                "masked row for {} map {} seed {} has no rollout",
                ModelKind::ALL[*slot].name(),
                map_id,
                seed
            ),
        ));
    }
    Ok(results)
}

fn write_rollout_summary(
    ctx: &mut StageContext,
    mut results: Vec<RolloutResult>,
    log: &dyn Fn(&str),
) -> Result<()> {
    // Canonical order, so the summary bytes do not depend on whether the
    // results were just computed or reloaded from a finished stage's CSVs.
    results.sort_by_key(|r| (r.topology.index(), r.map_id, r.model as usize, r.seed));
    let report =
        aggregate_rollouts(&results).map_err(|e| HarnessError::FailedAssertion(e.to_string()))?;

    let mut rows = Vec::new();
    let mut per_map: BTreeMap<(usize, u32, usize), Vec<f64>> = BTreeMap::new();
    for r in &results {
        per_map
            .entry((r.topology.index(), r.map_id, r.model as usize))
            .or_default()
            .push(r.mean_mse);
    }
    for ((topo_idx, map_id, slot), values) in &per_map {
        let (mean, std, stderr) = sample_stats(values);
        rows.push(format!(
            "map,{},{},{},{},{},{},{},",
            TopologyKind::ALL[*topo_idx].name(),
            ModelKind::ALL[*slot].name(),
            map_id,
            values.len(),
            mean,
            std,
            stderr
        ));
    }
    for s in &report.stats {
        rows.push(format!(
            "topology,{},{},,{},{},{},{},",
            s.topology.name(),
            s.model.name(),
            s.n,
            s.mean,
            s.std,
            s.stderr
        ));
    }
    rows.push(format!("aggregate,all,dswm,,{},{},,,", report.pairs, report.dswm_mean));
    rows.push(format!("aggregate,all,world,,{},{},,,", report.pairs, report.world_mean));
    rows.push(format!(
        "paired,all,dswm-world,,{},{},,,{}",
        report.pairs, report.mean_difference, report.p_value
    ));

    let summary_rel = OutputPaths::rollout_summary();
    write_csv(
        &ctx.root.join(&summary_rel),
        &ctx.config_hash,
        ctx.config.master_seed,
        ROLLOUT_SUMMARY_HEADER,
        &rows,
    )?;
    let (wins, evaluable) = masked_win_fraction(&results, ModelKind::Dswm);
    log(&format!(
        "rollout summary: dswm {:.4} vs world {:.4} (difference {:+.4}, p = {:.4}, {} pairs)",
        report.dswm_mean, report.world_mean, report.mean_difference, report.p_value, report.pairs
    ));
    log(&format!(
        "masked comparison: dswm beats the dataset-mean constant on {wins}/{evaluable} rollouts"
    ));
    if report.dswm_mean >= report.world_mean {
        return Err(HarnessError::FailedAssertion(format!(
            "dual-stream mean rollout mse {} does not beat the baseline's {}",
            report.dswm_mean, report.world_mean
        )));
    }
    ctx.record("eval/summary", vec![summary_rel])
}

/// Paired rollout evaluation over every requested topology, plus
/// place-field images. When the request covers all configured topologies,
/// also writes the cross-topology summary and fails with a result assertion
/// unless the dual-stream model beats the single-stream baseline.
pub fn stage_eval_rollouts(
    ctx: &mut StageContext,
    topologies: &[TopologyKind],
    log: &dyn Fn(&str),
) -> Result<()> {
    let configured = ctx.config.scale.topologies.clone();
    let covers_all = configured.iter().all(|k| topologies.contains(k));
    let mut all_results = Vec::new();
    let mut any_ran = false;
    for &kind in topologies {
        let stage = format!("eval/{}", kind.name());
        if ctx.skip(&stage) {
            log(&format!("eval {}: already complete, skipping", kind.name()));
            if covers_all {
                all_results.extend(load_rollout_csvs(ctx, kind)?);
            }
            continue;
        }
        any_ran = true;
        all_results.extend(eval_rollouts_for(ctx, kind, log)?);
    }
    if !covers_all {
        log("rollout summary: skipped (needs every configured topology)");
        return Ok(());
    }
    if !any_ran && ctx.skip("eval/summary") {
        log("eval summary: already complete, skipping");
        return Ok(());
    }
    write_rollout_summary(ctx, all_results, log)
}

// --- agent sessions -----------------------------------------------------------

fn rl_summary_header() -> String {
    let mut header = String::from("topology,optimal,statistic");
    for variant in AgentVariant::ALL {
        header.push(',');
        header.push_str(variant.name());
    }
    header
}

/// Goal-seeking sessions for every feature basis on one topology's first
/// held-out map. Writes the learning curves and old-goal revisit CSVs and
/// records the stage. Returns outcomes grouped per variant.
fn train_agents_for(
    ctx: &mut StageContext,
    kind: TopologyKind,
    log: &dyn Fn(&str),
) -> Result<Vec<Vec<SessionOutcome>>> {
    let stage = format!("rl/{}", kind.name());
    let scale = ctx.config.scale.clone();
    let rl = ctx.config.rl;
    let master = ctx.config.master_seed;
    let topology = ctx.topology(kind);
    let pools = ctx.load_maps(kind)?;
    let pattern = pools.test.first().ok_or_else(|| {
        HarnessError::MissingPrerequisite(format!("held-out map for {}", kind.name()))
    })?;
    let mut task = GoalTask::canonical(&topology);
    task.switch_episode = scale.goal_switch_episode as u32;
    task.max_steps = scale.rl_max_steps as u32;
    let dswm = load_trained_dswm(ctx, kind)?;
    let world = load_trained_world(ctx, kind)?;

    let jobs: Vec<(usize, usize)> = (0..AgentVariant::ALL.len())
        .flat_map(|variant_idx| (0..scale.rl_seeds).map(move |seed_idx| (variant_idx, seed_idx)))
        .collect();
    let collected: Mutex<BTreeMap<(usize, usize), SessionOutcome>> = Mutex::new(BTreeMap::new());
    run_jobs(ctx.config.workers, jobs, |(variant_idx, seed_idx)| {
        let variant = AgentVariant::ALL[variant_idx];
        let basis = match variant.basis_kind() {
            BasisKind::DswmS => FeatureBasis::DswmS(&dswm),
            BasisKind::WorldZ => FeatureBasis::WorldZ(&world),
            BasisKind::Onehot => FeatureBasis::Onehot,
        };
        let params = SessionParams {
            episodes: scale.rl_episodes as u32,
            gamma: rl.gamma,
            alpha: rl.alpha,
            tau: rl.tau,
            use_dyna: variant.use_dyna(),
            dyna: DynaConfig {
                rollout_length: rl.dyna_rollout_length,
                rollout_probability: rl.dyna_rollout_probability,
            },
        };
        let seed = derive_seed(
            master,
            "agents",
            kind.name(),
            (variant_idx * scale.rl_seeds + seed_idx) as u64,
        );
        let outcome = run_session(&topology, pattern, &task, &basis, &params, seed);
        collected.lock().unwrap().insert((variant_idx, seed_idx), outcome);
        Ok(())
    })?;

    let mut curve_rows = Vec::new();
    let mut revisit_rows = Vec::new();
    let mut grouped: Vec<Vec<SessionOutcome>> = vec![Vec::new(); AgentVariant::ALL.len()];
    for ((variant_idx, seed_idx), outcome) in collected.into_inner().unwrap() {
        let name = AgentVariant::ALL[variant_idx].name();
        for (episode, (steps, reward)) in outcome.steps.iter().zip(&outcome.rewards).enumerate() {
            curve_rows.push(format!(
                "{},{},{},{},{},{}",
                name,
                kind.name(),
                seed_idx,
                episode,
                steps,
                reward
            ));
        }
        for v in &outcome.old_goal_revisits {
            revisit_rows.push(format!(
                "{},{},{},{},{},{},{}",
                name,
                kind.name(),
                seed_idx,
                v.episode,
                v.step,
                v.predicted,
                v.zeroed
            ));
        }
        grouped[variant_idx].push(outcome);
    }
    let curves_rel = OutputPaths::rl_curves(kind);
    let revisits_rel = OutputPaths::rl_revisits(kind);
    write_csv(&ctx.root.join(&curves_rel), &ctx.config_hash, master, RL_CURVES_HEADER, &curve_rows)?;
    write_csv(
        &ctx.root.join(&revisits_rel),
        &ctx.config_hash,
        master,
        RL_REVISITS_HEADER,
        &revisit_rows,
    )?;
    ctx.record(&stage, vec![curves_rel, revisits_rel])?;

    for (variant, outcomes) in AgentVariant::ALL.iter().zip(&grouped) {
        let (mean, median) = final_window_stats(outcomes, FINAL_WINDOW);
        let imagined: u32 = outcomes.iter().map(|o| o.dyna_invocations).sum();
        let extra = if variant.use_dyna() {
            format!(", {imagined} imagined rollouts")
        } else {
            String::new()
        };
        log(&format!(
            "rl {}/{}: final-{FINAL_WINDOW} steps mean {:.2}, median {:.1}{}",
            kind.name(),
            variant.name(),
            mean,
            median,
            extra
        ));
    }
    Ok(grouped)
}

/// Rebuild per-variant session outcomes from a completed stage's curves CSV
/// (revisit details are not needed for the summary).
fn load_rl_curves(ctx: &StageContext, kind: TopologyKind) -> Result<Vec<Vec<SessionOutcome>>> {
    let path = ctx.root.join(OutputPaths::rl_curves(kind));
    let rows = read_stamped_csv(&path, &ctx.config_hash, RL_CURVES_HEADER)?;
    let mut table: BTreeMap<(usize, usize), SessionOutcome> = BTreeMap::new();
    for row in &rows {
        let cols = split_row(&path, row, 6)?;
        let variant_idx = AgentVariant::ALL
            .iter()
            .position(|v| v.name() == cols[0])
            .ok_or_else(|| format_error(&path, format!("unknown basis {:?}", cols[0])))?;
        if cols[1] != kind.name() {
            return Err(format_error(
                &path,
                format!("row for topology {:?} in the {} file", cols[1], kind.name()),
            ));
        }
        let seed_idx: usize = parse_col(&path, cols[2])?;
        let episode: usize = parse_col(&path, cols[3])?;
        let steps: u32 = parse_col(&path, cols[4])?;
        let reward: f64 = parse_col(&path, cols[5])?;
        let outcome = table.entry((variant_idx, seed_idx)).or_insert_with(|| SessionOutcome {
            steps: Vec::new(),
            rewards: Vec::new(),
            old_goal_revisits: Vec::new(),
            dyna_invocations: 0,
        });
        if outcome.steps.len() != episode {
            return Err(format_error(&path, format!("episode {episode} arrived out of order")));
        }
        outcome.steps.push(steps);
        outcome.rewards.push(reward);
    }
    let mut grouped = vec![Vec::new(); AgentVariant::ALL.len()];
    for ((variant_idx, _), outcome) in table {
        grouped[variant_idx].push(outcome);
    }
    Ok(grouped)
}

/// Reinforcement-learning sessions per topology and feature basis. When the
/// request covers all configured topologies, also writes the end-of-session
/// summary table.
pub fn stage_train_agents(
    ctx: &mut StageContext,
    topologies: &[TopologyKind],
    log: &dyn Fn(&str),
) -> Result<()> {
    let configured = ctx.config.scale.topologies.clone();
    let covers_all = configured.iter().all(|k| topologies.contains(k));
    let mut by_topology: BTreeMap<usize, Vec<Vec<SessionOutcome>>> = BTreeMap::new();
    let mut any_ran = false;
    for &kind in topologies {
        let stage = format!("rl/{}", kind.name());
        if ctx.skip(&stage) {
            log(&format!("rl {}: already complete, skipping", kind.name()));
            if covers_all {
                by_topology.insert(kind.index(), load_rl_curves(ctx, kind)?);
            }
            continue;
        }
        any_ran = true;
        by_topology.insert(kind.index(), train_agents_for(ctx, kind, log)?);
    }
    if !covers_all {
        log("rl summary: skipped (needs every configured topology)");
        return Ok(());
    }
    if !any_ran && ctx.skip("rl/summary") {
        log("rl summary: already complete, skipping");
        return Ok(());
    }

    let mut rows = Vec::new();
    for &kind in &configured {
        let grouped = &by_topology[&kind.index()];
        for pick_median in [false, true] {
            let mut row = format!(
                "{},{},{}",
                kind.name(),
                kind.optimal_steps(),
                if pick_median { "median" } else { "mean" }
            );
            for outcomes in grouped {
                let (mean, median) = final_window_stats(outcomes, FINAL_WINDOW);
                let value = if pick_median { median } else { mean };
                row.push_str(&format!(",{value}"));
            }
            rows.push(row);
        }
    }
    let summary_rel = OutputPaths::rl_summary();
    write_csv(
        &ctx.root.join(&summary_rel),
        &ctx.config_hash,
        ctx.config.master_seed,
        &rl_summary_header(),
        &rows,
    )?;
    ctx.record("rl/summary", vec![summary_rel])?;
    log(&format!(
        "rl summary: final-{FINAL_WINDOW} statistics over {} topologies x {} bases",
        configured.len(),
        AgentVariant::ALL.len()
    ));
    Ok(())
}
