//! On-disk formats: pattern-map pools, episode datasets, training
//! checkpoints (parameters + optimizer + RNG position, for bitwise
//! resume), and stamped CSVs. All binary values are little-endian; all
//! writes go through a temp-file rename so readers never see partial
//! files.

use crate::gridworld::{
    Action, EpisodeDataset, EpisodeRecord, Observation, PatternMap, Position, StepRecord,
    Topology, TopologyKind, GRID, OBS_DIM,
};
use crate::harness::{HarnessError, Result};
use crate::models::{LossRow, ModelKind};
use crate::numerics::adam::AdamState;
use crate::numerics::params::ParamSet;
use rand_chacha::ChaCha8Rng;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

const MAPS_MAGIC: &[u8; 8] = b"DSWMMP01";
const DATASET_MAGIC: &[u8; 8] = b"DSWMDS01";
const CHECKPOINT_MAGIC: &[u8; 8] = b"DSWMCK01";

pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(HarnessError::io(parent))?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(HarnessError::io(&tmp))?;
    std::fs::rename(&tmp, path).map_err(HarnessError::io(path))?;
    Ok(())
}

// --- little-endian buffer codec --------------------------------------------

#[derive(Default)]
struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u128(&mut self, v: u128) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn bytes(&mut self, v: &[u8]) {
        self.buf.extend_from_slice(v);
    }
    fn str(&mut self, v: &str) {
        assert!(v.len() <= u16::MAX as usize);
        self.buf.extend_from_slice(&(v.len() as u16).to_le_bytes());
        self.buf.extend_from_slice(v.as_bytes());
    }
    fn f64s(&mut self, vs: &[f64]) {
        self.u32(vs.len() as u32);
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Decoder<'a> {
    data: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Decoder<'a> {
    fn new(data: &'a [u8], path: &'a Path) -> Self {
        Decoder { data, pos: 0, path }
    }

    fn fail<T>(&self, reason: impl Into<String>) -> Result<T> {
        Err(HarnessError::Format { path: self.path.to_path_buf(), reason: reason.into() })
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return self.fail(format!("truncated at byte {}", self.pos));
        }
        let slice = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.take(16)?.try_into().unwrap()))
    }
    fn str(&mut self) -> Result<String> {
        let len = u16::from_le_bytes(self.take(2)?.try_into().unwrap()) as usize;
        let bytes = self.take(len)?;
        match std::str::from_utf8(bytes) {
            Ok(s) => Ok(s.to_string()),
            Err(_) => self.fail("invalid utf-8 string"),
        }
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let len = self.u32()? as usize;
        let bytes = self.take(len * 8)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
    fn magic(&mut self, expected: &[u8; 8]) -> Result<()> {
        let got = self.take(8)?;
        if got != expected {
            return self.fail(format!("bad magic {got:?}"));
        }
        Ok(())
    }
    fn finish(&self) -> Result<()> {
        if self.pos != self.data.len() {
            return self.fail(format!("{} trailing bytes", self.data.len() - self.pos));
        }
        Ok(())
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(HarnessError::io(path))
}

// --- pattern-map pools ------------------------------------------------------

pub struct MapPools {
    pub topology_kind: TopologyKind,
    pub config_hash: String,
    pub seed: u64,
    pub train: Vec<PatternMap>,
    pub test: Vec<PatternMap>,
}

pub fn save_map_pools(path: &Path, pools: &MapPools) -> Result<()> {
    let mut e = Encoder::default();
    e.bytes(MAPS_MAGIC);
    e.str(&pools.config_hash);
    e.str(pools.topology_kind.name());
    e.u64(pools.seed);
    e.u32(pools.train.len() as u32);
    e.u32(pools.test.len() as u32);
    for map in pools.train.iter().chain(&pools.test) {
        e.bytes(&map.cell_codes());
    }
    atomic_write(path, &e.buf)
}

pub fn load_map_pools(path: &Path, topology: &Topology) -> Result<MapPools> {
    let data = read_file(path)?;
    let mut d = Decoder::new(&data, path);
    d.magic(MAPS_MAGIC)?;
    let config_hash = d.str()?;
    let name = d.str()?;
    let kind = match TopologyKind::from_name(&name) {
        Some(kind) if kind == topology.kind => kind,
        _ => return d.fail(format!("topology mismatch: file has {name:?}")),
    };
    let seed = d.u64()?;
    let n_train = d.u32()? as usize;
    let n_test = d.u32()? as usize;
    let read_map = |d: &mut Decoder| -> Result<PatternMap> {
        let codes = d.take(GRID * GRID)?;
        PatternMap::from_cell_codes(topology, codes)
            .map_err(|e| HarnessError::Format { path: path.to_path_buf(), reason: e.to_string() })
    };
    let train = (0..n_train).map(|_| read_map(&mut d)).collect::<Result<Vec<_>>>()?;
    let test = (0..n_test).map(|_| read_map(&mut d)).collect::<Result<Vec<_>>>()?;
    d.finish()?;
    Ok(MapPools { topology_kind: kind, config_hash, seed, train, test })
}

// --- episode datasets -------------------------------------------------------

pub fn save_dataset(path: &Path, dataset: &EpisodeDataset, config_hash: &str, seed: u64) -> Result<()> {
    let mut e = Encoder::default();
    e.bytes(DATASET_MAGIC);
    e.str(config_hash);
    e.str(dataset.topology_kind.name());
    e.u64(seed);
    e.u32(dataset.episode_length as u32);
    e.u32(dataset.episodes.len() as u32);
    for episode in &dataset.episodes {
        e.u32(episode.pattern_map_id);
        for step in &episode.steps {
            e.bytes(step.observation.bits());
            e.u8(step.action.index() as u8);
            e.u8(step.position.r() as u8);
            e.u8(step.position.c() as u8);
        }
    }
    atomic_write(path, &e.buf)
}

pub fn load_dataset(path: &Path) -> Result<(EpisodeDataset, String, u64)> {
    let data = read_file(path)?;
    let mut d = Decoder::new(&data, path);
    d.magic(DATASET_MAGIC)?;
    let config_hash = d.str()?;
    let name = d.str()?;
    let Some(topology_kind) = TopologyKind::from_name(&name) else {
        return d.fail(format!("unknown topology {name:?}"));
    };
    let seed = d.u64()?;
    let episode_length = d.u32()? as usize;
    let n_episodes = d.u32()? as usize;
    let mut episodes = Vec::with_capacity(n_episodes);
    for _ in 0..n_episodes {
        let pattern_map_id = d.u32()?;
        let mut steps = Vec::with_capacity(episode_length);
        for _ in 0..episode_length {
            let raw = d.take(OBS_DIM)?;
            if raw.iter().any(|&b| b > 1) {
                return d.fail("observation bytes must be 0 or 1");
            }
            let mut bits = [0u8; OBS_DIM];
            bits.copy_from_slice(raw);
            let action_index = d.u8()? as usize;
            if action_index >= Action::ALL.len() {
                return d.fail(format!("invalid action index {action_index}"));
            }
            let action = Action::from_index(action_index);
            let (r, c) = (d.u8()? as usize, d.u8()? as usize);
            if r >= GRID || c >= GRID {
                return d.fail(format!("position ({r}, {c}) out of range"));
            }
            steps.push(StepRecord {
                observation: Observation::from_bits(bits),
                action,
                position: Position::new(r, c),
            });
        }
        episodes.push(EpisodeRecord { pattern_map_id, steps });
    }
    d.finish()?;
    Ok((EpisodeDataset { topology_kind, episode_length, episodes }, config_hash, seed))
}

// --- training checkpoints ---------------------------------------------------

#[derive(Clone, Debug)]
pub struct CheckpointMeta {
    pub kind: ModelKind,
    pub topology_kind: TopologyKind,
    pub config_hash: String,
    pub seed: u64,
    pub iteration: u64,
}

pub struct LoadedCheckpoint {
    pub meta: CheckpointMeta,
    pub params: Vec<(String, Vec<f64>)>,
    pub adam_m: Vec<Vec<f64>>,
    pub adam_v: Vec<Vec<f64>>,
    pub adam_step: u64,
    pub rng_seed: [u8; 32],
    pub rng_stream: u64,
    pub rng_word_pos: u128,
}

pub fn save_checkpoint(
    path: &Path,
    meta: &CheckpointMeta,
    params: &ParamSet,
    adam: &AdamState,
    rng: &ChaCha8Rng,
) -> Result<()> {
    let mut e = Encoder::default();
    e.bytes(CHECKPOINT_MAGIC);
    e.str(&meta.config_hash);
    e.u8(match meta.kind {
        ModelKind::Dswm => 0,
        ModelKind::World => 1,
    });
    e.str(meta.topology_kind.name());
    e.u64(meta.seed);
    e.u64(meta.iteration);
    e.bytes(&rng.get_seed());
    e.u64(rng.get_stream());
    e.u128(rng.get_word_pos());
    let (m, v, adam_step) = adam.moments();
    e.u64(adam_step);
    e.u32(params.len() as u32);
    for (name, tensor) in params.iter() {
        e.str(name);
        e.f64s(tensor.data());
    }
    for moment in m.iter().chain(v.iter()) {
        e.f64s(moment);
    }
    atomic_write(path, &e.buf)
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let data = read_file(path)?;
    let mut d = Decoder::new(&data, path);
    d.magic(CHECKPOINT_MAGIC)?;
    let config_hash = d.str()?;
    let kind = match d.u8()? {
        0 => ModelKind::Dswm,
        1 => ModelKind::World,
        other => return d.fail(format!("unknown model kind tag {other}")),
    };
    let name = d.str()?;
    let Some(topology_kind) = TopologyKind::from_name(&name) else {
        return d.fail(format!("unknown topology {name:?}"));
    };
    let seed = d.u64()?;
    let iteration = d.u64()?;
    let rng_seed: [u8; 32] = d.take(32)?.try_into().unwrap();
    let rng_stream = d.u64()?;
    let rng_word_pos = d.u128()?;
    let adam_step = d.u64()?;
    let n_params = d.u32()? as usize;
    let mut params = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let name = d.str()?;
        let data = d.f64s()?;
        params.push((name, data));
    }
    let adam_m = (0..n_params).map(|_| d.f64s()).collect::<Result<Vec<_>>>()?;
    let adam_v = (0..n_params).map(|_| d.f64s()).collect::<Result<Vec<_>>>()?;
    d.finish()?;
    Ok(LoadedCheckpoint {
        meta: CheckpointMeta { kind, topology_kind, config_hash, seed, iteration },
        params,
        adam_m,
        adam_v,
        adam_step,
        rng_seed,
        rng_stream,
        rng_word_pos,
    })
}

// --- CSV --------------------------------------------------------------------

pub fn stamp_line(config_hash: &str, master_seed: u64) -> String {
    format!("# config_hash={config_hash} master_seed={master_seed}\n")
}

/// Write a complete stamped CSV in one shot.
pub fn write_csv(
    path: &Path,
    config_hash: &str,
    master_seed: u64,
    header: &str,
    rows: &[String],
) -> Result<()> {
    let mut text = stamp_line(config_hash, master_seed);
    text.push_str(header);
    text.push('\n');
    for row in rows {
        text.push_str(row);
        text.push('\n');
    }
    atomic_write(path, text.as_bytes())
}

/// Read a stamped CSV back: check the stamp's config hash and the header,
/// return the data rows.
pub fn read_stamped_csv(path: &Path, expected_hash: &str, header: &str) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(HarnessError::io(path))?;
    let mut lines = text.lines();
    let fail = |reason: String| HarnessError::Format { path: path.to_path_buf(), reason };
    let stamp = lines.next().ok_or_else(|| fail("empty file".into()))?;
    let found_hash = stamp
        .strip_prefix("# config_hash=")
        .and_then(|rest| rest.split_whitespace().next())
        .ok_or_else(|| fail(format!("bad stamp line {stamp:?}")))?;
    if found_hash != expected_hash {
        return Err(fail(format!(
            "stamped with config {found_hash} but the current config is {expected_hash}"
        )));
    }
    match lines.next() {
        Some(found) if found == header => {}
        other => return Err(fail(format!("expected header {header:?}, found {other:?}"))),
    }
    Ok(lines.map(str::to_string).collect())
}

pub const LOSS_CSV_HEADER: &str = "iteration,l_obs,l_pos,l_s,neg_entropy_z,neg_entropy_s,total";

/// Incremental loss-curve writer that survives training restarts: on resume
/// it keeps rows up to the checkpointed iteration and drops any later rows
/// from an interrupted run.
pub struct LossCsvWriter {
    out: BufWriter<File>,
    path: PathBuf,
}

impl LossCsvWriter {
    pub fn open(
        path: &Path,
        config_hash: &str,
        master_seed: u64,
        resume_iteration: u64,
    ) -> Result<LossCsvWriter> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(HarnessError::io(parent))?;
        }
        let mut keep = stamp_line(config_hash, master_seed);
        keep.push_str(LOSS_CSV_HEADER);
        keep.push('\n');
        if resume_iteration > 0 {
            let existing = std::fs::read_to_string(path).map_err(HarnessError::io(path))?;
            for line in existing.lines().skip(2) {
                let iteration: u64 = line
                    .split(',')
                    .next()
                    .and_then(|f| f.parse().ok())
                    .ok_or_else(|| HarnessError::Format {
                        path: path.to_path_buf(),
                        reason: format!("bad loss row {line:?}"),
                    })?;
                if iteration <= resume_iteration {
                    keep.push_str(line);
                    keep.push('\n');
                }
            }
        }
        std::fs::write(path, keep).map_err(HarnessError::io(path))?;
        let file = OpenOptions::new().append(true).open(path).map_err(HarnessError::io(path))?;
        Ok(LossCsvWriter { out: BufWriter::new(file), path: path.to_path_buf() })
    }

    pub fn append(&mut self, row: &LossRow) -> Result<()> {
        let line = format!(
            "{},{},{},{},{},{},{}\n",
            row.iteration,
            row.l_obs,
            row.l_pos,
            row.l_s,
            row.neg_entropy_z,
            row.neg_entropy_s,
            row.total
        );
        self.out
            .write_all(line.as_bytes())
            .and_then(|_| self.out.flush())
            .map_err(HarnessError::io(&self.path))
    }
}
