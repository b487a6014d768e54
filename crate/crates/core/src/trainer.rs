//! Training loop, checkpoint files, and end-to-end evaluation.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::diffkit::{AdamConfig, AdamState, Graph, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::events::{Dataset, EventSequence, NormStats, NormalizedDataset};
use crate::model::{Model, ModelConfig};
use crate::objectives::{smash_graph, LossWeights, Mode, NoiseConfig, Perturbation, Reduction, Targets};
use crate::rng::{derive_seed, rng_for};
use crate::sampler::{EventSampler, SampleRecord, SampleSet};
use crate::uq::{LevelGrid, MetricsReport, Truth};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    pub batch_size: usize,
    pub alpha: f64,
    pub sigma_t: f64,
    #[serde(default)]
    pub sigma_x: Vec<f64>,
    pub num_perturbations: usize,
    pub seed: u64,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default)]
    pub reduction: Reduction,
}

fn default_epochs() -> usize {
    150
}

impl TrainConfig {
    /// Earthquake training defaults.
    pub fn earthquake(seed: u64) -> Self {
        TrainConfig {
            lr: 1e-3,
            epochs: 150,
            batch_size: 16,
            alpha: 0.5,
            sigma_t: 0.2,
            sigma_x: vec![0.25, 0.25],
            num_perturbations: 300,
            seed,
            mode: Mode::Stpp,
            reduction: Reduction::Mean,
        }
    }

    pub fn noise(&self) -> NoiseConfig {
        NoiseConfig {
            sigma_t: self.sigma_t,
            sigma_x: if self.mode == Mode::Tpp { Vec::new() } else { self.sigma_x.clone() },
            num_perturbations: self.num_perturbations,
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights { alpha: self.alpha }
    }

    pub fn validate(&self, spatial_dim: usize) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig("lr must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be at least 1".into()));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidConfig("alpha must be finite and non-negative".into()));
        }
        if self.mode == Mode::Stpp && spatial_dim == 0 {
            return Err(Error::InvalidConfig("stpp mode needs spatial data (d ≥ 1)".into()));
        }
        self.noise().validate(if self.mode == Mode::Tpp { 0 } else { spatial_dim })
    }
}

/// Drops locations for TPP mode, so one corpus serves both modes.
pub fn dataset_for_mode(ds: &Dataset, mode: Mode) -> Result<Dataset> {
    match mode {
        Mode::Stpp => Ok(ds.clone()),
        Mode::Tpp => {
            let sequences = ds
                .sequences
                .iter()
                .map(|s| EventSequence {
                    events: s
                        .events
                        .iter()
                        .map(|e| crate::events::Event {
                            t: e.t,
                            k: e.k,
                            x: Vec::new(),
                        })
                        .collect(),
                    horizon: s.horizon,
                })
                .collect();
            Dataset::new(sequences, ds.num_marks, 0)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,valid_loss\n");
        for r in &self.epochs {
            s.push_str(&format!("{},{},{}\n", r.epoch, r.train_loss, r.valid_loss));
        }
        s
    }
}

const TAG_INIT: u64 = 0x1A17;
const TAG_SHUFFLE: u64 = 0x5F1E;
const TAG_NOISE: u64 = 0xD05E;
const TAG_VALID: u64 = 0x7A11;

/// Loss of one sequence, optionally accumulating its gradient into `grads`
/// scaled by `grad_scale`. `None` for sequences without targets.
fn sequence_loss(
    model: &Model,
    seq: &crate::events::NormalizedSequence,
    noise: &NoiseConfig,
    cfg: &TrainConfig,
    rng: &mut crate::rng::Rng,
    grads: Option<(&mut ParamStore, f64)>,
) -> Result<Option<f64>> {
    let t = Targets::of(seq);
    if t.is_empty() {
        return Ok(None);
    }
    let p = Perturbation::draw(&t, noise, rng);
    let mut g = Graph::new(&model.params);
    let parts = smash_graph(&mut g, model, seq, &p, noise, cfg.weights(), cfg.mode, cfg.reduction)?
        .expect("targets present");
    let v = g.scalar(parts.total);
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("loss value {v}")));
    }
    if let Some((store, scale)) = grads {
        let loss = g.scale(parts.total, scale);
        g.backward(loss)?.accumulate(store);
    }
    Ok(Some(v))
}

/// Mean loss over a dataset with perturbations fixed by `seed`.
pub fn dataset_loss(model: &Model, ds: &NormalizedDataset, cfg: &TrainConfig, seed: u64) -> Result<f64> {
    let noise = cfg.noise();
    let mut total = 0.0;
    let mut n = 0usize;
    for (i, seq) in ds.sequences.iter().enumerate() {
        let mut rng = rng_for(seed, &[TAG_VALID, i as u64]);
        if let Some(v) = sequence_loss(model, seq, &noise, cfg, &mut rng, None)? {
            total += v;
            n += 1;
        }
    }
    Ok(if n == 0 { f64::NAN } else { total / n as f64 })
}

/// Trains from a fresh initialization; returns the best-validation model.
pub fn train(
    train: &NormalizedDataset,
    valid: &NormalizedDataset,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<(Model, History)> {
    let model = Model::new(model_cfg.clone(), derive_seed(cfg.seed, &[TAG_INIT]))?;
    train_from(model, train, valid, cfg, on_epoch)
}

/// Trains starting from `model`.
pub fn train_from(
    mut model: Model,
    train: &NormalizedDataset,
    valid: &NormalizedDataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(Model, History)> {
    let mc = &model.config;
    if train.num_marks != mc.num_marks || train.spatial_dim != mc.spatial_dim {
        return Err(Error::InvalidConfig(format!(
            "data has M={} d={}, model has M={} d={}",
            train.num_marks, train.spatial_dim, mc.num_marks, mc.spatial_dim
        )));
    }
    cfg.validate(mc.spatial_dim)?;
    let noise = cfg.noise();
    let mut adam = AdamState::new(
        &model.params,
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
    );
    let mut history = History::default();
    let mut best: Option<(f64, ParamStore)> = None;
    let mut order: Vec<usize> = (0..train.sequences.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.sort_unstable();
        order.shuffle(&mut rng_for(cfg.seed, &[TAG_SHUFFLE, epoch as u64]));
        let mut sum = 0.0;
        let mut count = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            model.params.zero_grad();
            let active = batch.iter().filter(|&&i| train.sequences[i].len() > 1).count();
            if active == 0 {
                continue;
            }
            let scale = 1.0 / active as f64;
            let mut grads = model.params.clone();
            for &i in batch {
                let mut rng = rng_for(cfg.seed, &[TAG_NOISE, epoch as u64, i as u64]);
                let v = sequence_loss(&model, &train.sequences[i], &noise, cfg, &mut rng, Some((&mut grads, scale)))
                    .map_err(|e| Error::Diverged {
                        epoch,
                        sequence: i,
                        msg: e.to_string(),
                    })?;
                if let Some(v) = v {
                    sum += v;
                    count += 1;
                }
            }
            for (p, g) in model.params.iter_mut().zip(grads.iter()) {
                p.grad = g.grad.clone();
            }
            adam.step(&mut model.params).map_err(|e| Error::Diverged {
                epoch,
                sequence: batch[0],
                msg: e.to_string(),
            })?;
        }
        let train_loss = if count == 0 { f64::NAN } else { sum / count as f64 };
        let valid_loss = if valid.sequences.is_empty() {
            train_loss
        } else {
            dataset_loss(&model, valid, cfg, cfg.seed)?
        };
        let rec = EpochRecord {
            epoch,
            train_loss,
            valid_loss,
        };
        on_epoch(&rec);
        history.epochs.push(rec);
        if best.as_ref().is_none_or(|(b, _)| valid_loss < *b) {
            history.best_epoch = epoch;
            best = Some((valid_loss, model.params.clone()));
        }
    }
    if let Some((_, params)) = best {
        model.params = params;
    }
    model.params.zero_grad();
    Ok((model, history))
}

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SMPP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    model_config: ModelConfig,
    stats: NormStats,
    train_config: Option<TrainConfig>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub stats: NormStats,
    pub train_config: Option<TrainConfig>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = CheckpointHeader {
            model_config: self.model.config.clone(),
            stats: self.stats.clone(),
            train_config: self.train_config.clone(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(self.model.params.len() as u32).to_le_bytes());
        for p in self.model.params.iter() {
            out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.extend_from_slice(&2u32.to_le_bytes());
            out.extend_from_slice(&(p.value.rows as u64).to_le_bytes());
            out.extend_from_slice(&(p.value.cols as u64).to_le_bytes());
            for v in &p.value.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic bytes".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "version {version} (this build reads version {CHECKPOINT_VERSION})"
            )));
        }
        let len = read_u32(&mut r)? as usize;
        let mut json = vec![0u8; len];
        read_exact(&mut r, &mut json)?;
        let header: CheckpointHeader =
            serde_json::from_slice(&json).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let count = read_u32(&mut r)? as usize;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let nlen = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; nlen];
            read_exact(&mut r, &mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
            let rank = read_u32(&mut r)?;
            if rank != 2 {
                return Err(Error::Checkpoint(format!("parameter {name} has rank {rank}")));
            }
            let rows = read_u64(&mut r)? as usize;
            let cols = read_u64(&mut r)? as usize;
            let n = rows.checked_mul(cols).ok_or_else(|| Error::Checkpoint("dimension overflow".into()))?;
            if n.saturating_mul(8) > r.len() {
                return Err(Error::Checkpoint("truncated file".into()));
            }
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                let mut b = [0u8; 8];
                read_exact(&mut r, &mut b)?;
                data.push(f64::from_le_bytes(b));
            }
            params
                .insert(&name, Tensor::from_vec(rows, cols, data)?)
                .map_err(|e| Error::Checkpoint(e.to_string()))?;
        }
        if !r.is_empty() {
            return Err(Error::Checkpoint("trailing bytes after parameters".into()));
        }
        let model = Model {
            config: header.model_config,
            params,
        };
        model.check_shapes()?;
        Ok(Checkpoint {
            model,
            stats: header.stats,
            train_config: header.train_config,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(&bytes))
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    ckpt.save(path)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::load(path)
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|_| Error::Checkpoint("truncated file".into()))
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut &[u8]) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Metrics plus the per-event samples they were computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub records: Vec<SampleRecord>,
}

impl Evaluation {
    pub fn samples_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&r.to_json_line());
            s.push('\n');
        }
        s
    }
}

/// Draws `q` samples for every event with at least one predecessor.
pub fn draw_samples(sampler: &dyn EventSampler, test: &Dataset, q: usize, seed: u64) -> Result<(Vec<SampleSet>, Vec<Truth>, Vec<SampleRecord>)> {
    let mut sets = Vec::new();
    let mut truths = Vec::new();
    let mut records = Vec::new();
    for (si, seq) in test.sequences.iter().enumerate() {
        let s = sampler.sample_sequence(seq, si, q, seed)?;
        for (j, set) in s.into_iter().enumerate() {
            let i = j + 1;
            let e = &seq.events[i];
            truths.push(Truth {
                gap: e.t - seq.events[i - 1].t,
                mark: e.k,
                loc: e.x.clone(),
            });
            records.push(SampleRecord::new(si, seq, i, &set));
            sets.push(set);
        }
    }
    if sets.is_empty() {
        return Err(Error::InvalidData("test data has no event with a predecessor".into()));
    }
    Ok((sets, truths, records))
}

/// Samples every predictable test event and scores the samples.
pub fn evaluate(
    sampler: &dyn EventSampler,
    test: &Dataset,
    q: usize,
    time_grid: &LevelGrid,
    space_grid: Option<&LevelGrid>,
    seed: u64,
) -> Result<Evaluation> {
    let (sets, truths, records) = draw_samples(sampler, test, q, seed)?;
    let space_grid = if test.spatial_dim > 0 { space_grid } else { None };
    let report = MetricsReport::compute(&sets, &truths, time_grid, space_grid)?;
    Ok(Evaluation { report, records })
}

/// Default sample count per event for each mode.
pub fn default_num_samples(mode: Mode) -> usize {
    match mode {
        Mode::Stpp => 300,
        Mode::Tpp => 100,
    }
}
