//! Pretraining loop: seeded mini-batches, combined loss, Adam, queue updates,
//! JSON-lines logging and resumable checkpoints.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::data::{strip_alignment, Dataset};
use crate::encoder::{decode_checkpoint, encode_checkpoint, init_encoder, EncoderConfig, EncoderParams, Reader};
use crate::error::{Error, Result};
use crate::losses::{clamp_log_tau, combined_loss, LossConfig, LossContext, TemperatureVars};
use crate::queue::{FeatureQueue, QueueEntry};
use crate::rng::SeededRng;
use crate::tensor::{AdamConfig, AdamState, Graph, Tensor};

const STATE_MAGIC: &[u8; 4] = b"PRTS";
const STATE_VERSION: u32 = 1;

// RNG stream ids under the run seed.
const STREAM_INIT: u64 = 0;
const STREAM_STRIP: u64 = 7;
const STREAM_EPOCH: u64 = 1 << 20;
const STREAM_STEP: u64 = 1 << 40;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub loss: LossConfig,
    pub queue_capacity: usize,
    /// Write a checkpoint every this many optimizer steps; 0 writes only the
    /// final one.
    pub checkpoint_every: usize,
    pub augment: AugmentConfig,
    pub encoder: EncoderConfig,
    /// Share of segments keeping their video/text embeddings.
    pub aligned_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            epochs: 20,
            lr: 1e-4,
            seed: 0,
            loss: LossConfig::default(),
            queue_capacity: 4096,
            checkpoint_every: 0,
            augment: AugmentConfig::default(),
            encoder: EncoderConfig::default(),
            aligned_fraction: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::config("batch_size", "must be at least 2"));
        }
        if self.epochs < 1 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config("lr", "must be a positive real"));
        }
        if self.queue_capacity == 0 {
            return Err(Error::config("queue_capacity", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.aligned_fraction) {
            return Err(Error::config("aligned_fraction", "must lie in [0, 1]"));
        }
        self.loss.validate()?;
        self.augment.validate()?;
        self.encoder.validate()
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }

    /// Everything that must match between a checkpoint and a resuming run;
    /// the epoch count may grow.
    fn resume_key(&self) -> Self {
        Self {
            epochs: 0,
            checkpoint_every: 0,
            ..self.clone()
        }
    }
}

/// One JSON-lines training log record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub total: f64,
    pub l_ss: f64,
    pub l_mm: f64,
    pub l_nn: f64,
    /// Shared temperature, or the self-supervised one when per-term.
    pub tau: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau_terms: Option<Vec<f64>>,
    /// Share of batch rows with a video embedding.
    pub aligned_fraction: f64,
    pub mm_starved: bool,
    pub nn_starved: bool,
    pub queue_size: usize,
}

/// Output locations and resume source for [`pretrain`].
#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub checkpoint_dir: Option<PathBuf>,
    pub log_path: Option<PathBuf>,
    pub resume_from: Option<PathBuf>,
    /// Stop (after checkpointing) once this many optimizer steps are done.
    pub stop_after_steps: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct PretrainOutcome {
    pub params: EncoderParams,
    pub log_tau: Vec<Tensor>,
    pub log: Vec<StepRecord>,
    pub final_checkpoint: Option<PathBuf>,
    pub warnings: Vec<String>,
    /// Video-aligned segments in the training split after stripping.
    pub aligned_train: usize,
}

/// Full mutable state of a run between optimizer steps.
struct TrainState {
    params: EncoderParams,
    log_tau: Vec<Tensor>,
    adam: AdamState,
    queue: FeatureQueue,
    step: u64,
    epoch: usize,
    /// Next batch within `epoch`.
    batch: usize,
}

impl TrainState {
    fn fresh(cfg: &TrainConfig) -> Result<Self> {
        let params = init_encoder(&cfg.encoder, &mut SeededRng::derive(cfg.seed, STREAM_INIT))?;
        let log_tau = cfg.loss.initial_log_taus();
        let adam = AdamState::new(cfg.adam(), &Self::slots(&params, &log_tau));
        Ok(Self {
            params,
            log_tau,
            adam,
            queue: FeatureQueue::new(cfg.queue_capacity)?,
            step: 0,
            epoch: 0,
            batch: 0,
        })
    }

    fn slots<'a>(params: &'a EncoderParams, log_tau: &'a [Tensor]) -> Vec<&'a Tensor> {
        let mut v = params.tensors();
        v.extend(log_tau.iter());
        v
    }

    fn encode(&self, cfg: &TrainConfig) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(STATE_MAGIC);
        out.extend_from_slice(&STATE_VERSION.to_le_bytes());
        let cfg_json = serde_json::to_vec(&cfg.resume_key())?;
        out.extend_from_slice(&(cfg_json.len() as u64).to_le_bytes());
        out.extend_from_slice(&cfg_json);
        for x in [self.step, self.epoch as u64, self.batch as u64, self.adam.step] {
            out.extend_from_slice(&x.to_le_bytes());
        }
        let put = |out: &mut Vec<u8>, v: &[f64]| v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        out.extend_from_slice(&(self.log_tau.len() as u64).to_le_bytes());
        for t in &self.log_tau {
            put(&mut out, t.data());
        }
        for slot in self.adam.m.iter().chain(&self.adam.v) {
            put(&mut out, slot);
        }
        let d = self.queue.iter().next().map_or(0, |e| e.z_v.len());
        for x in [self.queue.capacity() as u64, self.queue.len() as u64, d as u64] {
            out.extend_from_slice(&x.to_le_bytes());
        }
        for e in self.queue.iter() {
            out.extend_from_slice(&e.insert_step.to_le_bytes());
            put(&mut out, &e.z_m);
            put(&mut out, &e.z_v);
            match &e.z_t {
                Some(t) => {
                    out.push(1);
                    put(&mut out, t);
                }
                None => out.push(0),
            }
        }
        Ok(out)
    }

    /// Parses the appendix; when `expect` is given its resume key must match
    /// the stored config. Returns the stored config too.
    fn decode(params: EncoderParams, bytes: &[u8], expect: Option<&TrainConfig>) -> Result<(Self, TrainConfig)> {
        let bad = |m: &str| Error::CorruptCheckpoint(format!("training state: {m}"));
        let mut r = Reader::new(bytes);
        if r.take(4)? != STATE_MAGIC {
            return Err(bad("missing or unknown appendix"));
        }
        if r.u32()? != STATE_VERSION {
            return Err(bad("unsupported version"));
        }
        let len = r.u64()? as usize;
        let stored: TrainConfig = serde_json::from_slice(r.take(len)?).map_err(|e| bad(&e.to_string()))?;
        if expect.is_some_and(|c| c.resume_key() != stored) {
            return Err(Error::config("resume", "checkpoint was written under a different training config"));
        }
        let cfg = &stored;
        let (step, epoch, batch, adam_step) = (r.u64()?, r.u64()? as usize, r.u64()? as usize, r.u64()?);
        let n_tau = r.u64()? as usize;
        if n_tau != cfg.loss.tau_count() {
            return Err(bad("temperature count differs from config"));
        }
        let log_tau = (0..n_tau)
            .map(|_| Ok(Tensor::scalar(r.f64s(1)?[0])))
            .collect::<Result<Vec<_>>>()?;
        let mut adam = AdamState::new(cfg.adam(), &Self::slots(&params, &log_tau));
        adam.step = adam_step;
        for slot in adam.m.iter_mut().chain(adam.v.iter_mut()) {
            let n = slot.len();
            slot.copy_from_slice(&r.f64s(n)?);
        }
        let (cap, len, d) = (r.u64()? as usize, r.u64()? as usize, r.u64()? as usize);
        let mut entries = Vec::with_capacity(len);
        for _ in 0..len {
            let insert_step = r.u64()?;
            let z_m = r.f64s(d)?;
            let z_v = r.f64s(d)?;
            let z_t = match r.take(1)?[0] {
                0 => None,
                1 => Some(r.f64s(d)?),
                _ => return Err(bad("bad text flag")),
            };
            entries.push(QueueEntry {
                z_m,
                z_v,
                z_t,
                insert_step,
            });
        }
        if !r.is_done() {
            return Err(bad("trailing bytes"));
        }
        let mut queue = FeatureQueue::new(cap)?;
        queue.push_batch(entries)?;
        let state = Self {
            params,
            log_tau,
            adam,
            queue,
            step,
            epoch,
            batch,
        };
        Ok((state, stored))
    }

    fn write_checkpoint(&self, cfg: &TrainConfig, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let bytes = encode_checkpoint(&self.params, &self.encode(cfg)?)?;
        let path = dir.join(format!("ckpt-{:08}.bin", self.step));
        fs::write(&path, &bytes)?;
        fs::write(dir.join("latest.bin"), &bytes)?;
        Ok(path)
    }
}

/// Training rows of `dataset` after alignment stripping under the run seed.
pub fn prepare_training_data(dataset: &Dataset, cfg: &TrainConfig) -> Result<Dataset> {
    if cfg.aligned_fraction < 1.0 {
        strip_alignment(dataset, cfg.aligned_fraction, &mut SeededRng::derive(cfg.seed, STREAM_STRIP))
    } else {
        Ok(dataset.clone())
    }
}

/// Contents of a checkpoint written by [`pretrain`].
#[derive(Clone, Debug)]
pub struct TrainingCheckpoint {
    pub params: EncoderParams,
    pub log_tau: Vec<Tensor>,
    pub queue: FeatureQueue,
    /// Optimizer steps completed.
    pub step: u64,
    pub epoch: usize,
    /// Training config with `epochs` and `checkpoint_every` zeroed.
    pub config: TrainConfig,
}

pub fn load_training_checkpoint(path: &Path) -> Result<TrainingCheckpoint> {
    let (params, appendix) = decode_checkpoint(&fs::read(path)?)?;
    let (state, config) = TrainState::decode(params, &appendix, None)?;
    Ok(TrainingCheckpoint {
        params: state.params,
        log_tau: state.log_tau,
        queue: state.queue,
        step: state.step,
        epoch: state.epoch,
        config,
    })
}

/// Pretrains an encoder on the training split of `dataset` with the
/// combined objective. Every draw comes from streams derived from
/// `cfg.seed`, so the run (and any resumed continuation) is bit-reproducible.
pub fn pretrain(dataset: &Dataset, cfg: &TrainConfig, opts: &RunOptions) -> Result<PretrainOutcome> {
    cfg.validate()?;
    dataset.validate()?;
    let t = dataset.segment_len();
    if cfg.encoder.output_len(t).is_none() {
        return Err(Error::config(
            "encoder",
            format!("segments of length {t} are shorter than the encoder minimum {}", cfg.encoder.min_input_len()),
        ));
    }
    let data = prepare_training_data(dataset, cfg)?;
    let train = data.train_indices();
    if train.len() < cfg.batch_size {
        return Err(Error::Data(format!(
            "{} training segments, fewer than one batch of {}",
            train.len(),
            cfg.batch_size
        )));
    }
    let aligned_train = train.iter().filter(|&&i| data.segments[i].video_emb.is_some()).count();
    let needs_alignment = cfg.loss.beta > 0.0 || (cfg.loss.gamma > 0.0 && cfg.loss.retrieval() == crate::losses::NnRetrieval::Video);
    if needs_alignment && aligned_train == 0 {
        return Err(Error::Data("multimodal or neighbor loss enabled but no training segment is aligned".into()));
    }
    if needs_alignment && data.embed_dim() != cfg.encoder.embed_dim {
        return Err(Error::config(
            "encoder.embed_dim",
            format!("is {}, dataset embeddings have dimension {}", cfg.encoder.embed_dim, data.embed_dim()),
        ));
    }
    log::info!(
        "pretraining on {} segments ({} aligned), {} epochs",
        train.len(),
        aligned_train,
        cfg.epochs
    );

    let mut state = match &opts.resume_from {
        Some(p) => {
            let (params, appendix) = decode_checkpoint(&fs::read(p)?)?;
            if params.config != cfg.encoder {
                return Err(Error::config("encoder", "checkpoint encoder config differs"));
            }
            TrainState::decode(params, &appendix, Some(cfg))?.0
        }
        None => TrainState::fresh(cfg)?,
    };

    let mut log_file = match &opts.log_path {
        Some(p) => {
            if let Some(parent) = p.parent() {
                fs::create_dir_all(parent)?;
            }
            let f = fs::OpenOptions::new()
                .create(true)
                .append(opts.resume_from.is_some())
                .write(true)
                .truncate(opts.resume_from.is_none())
                .open(p)?;
            Some(std::io::BufWriter::new(f))
        }
        None => None,
    };

    let batches_per_epoch = train.len() / cfg.batch_size;
    let mut log = Vec::new();
    let mut warnings = Vec::new();
    let mut last_ckpt: Option<PathBuf> = None;
    let mut stopped = false;

    while state.epoch < cfg.epochs && !stopped {
        let mut order = train.clone();
        SeededRng::derive(cfg.seed, STREAM_EPOCH + state.epoch as u64).shuffle(&mut order);
        let mut all_mm_starved = cfg.loss.beta > 0.0;
        while state.batch < batches_per_epoch {
            let idx = &order[state.batch * cfg.batch_size..(state.batch + 1) * cfg.batch_size];
            let rec = train_step(&data, idx, cfg, &mut state).map_err(|e| match e {
                Error::NonFinite { .. } | Error::Divergence { .. } => Error::Divergence {
                    step: state.step,
                    last_checkpoint: last_ckpt.clone(),
                },
                other => other,
            })?;
            all_mm_starved &= rec.mm_starved;
            if let Some(f) = log_file.as_mut() {
                serde_json::to_writer(&mut *f, &rec)?;
                f.write_all(b"\n")?;
            }
            log.push(rec);
            state.batch += 1;
            if state.batch == batches_per_epoch {
                state.batch = 0;
                state.epoch += 1;
            }
            if let Some(dir) = &opts.checkpoint_dir {
                if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every as u64 == 0 {
                    last_ckpt = Some(state.write_checkpoint(cfg, dir)?);
                }
            }
            if opts.stop_after_steps.is_some_and(|s| state.step >= s) {
                stopped = true;
                break;
            }
            if state.batch == 0 {
                break;
            }
        }
        if all_mm_starved && !stopped {
            let w = format!("epoch {}: multimodal loss starved on every step", state.epoch);
            log::warn!("{w}");
            warnings.push(w);
        }
    }
    if let Some(f) = log_file.as_mut() {
        f.flush()?;
    }
    let final_checkpoint = match &opts.checkpoint_dir {
        Some(dir) => Some(state.write_checkpoint(cfg, dir)?),
        None => None,
    };
    Ok(PretrainOutcome {
        params: state.params,
        log_tau: state.log_tau,
        log,
        final_checkpoint,
        warnings,
        aligned_train,
    })
}

fn train_step(data: &Dataset, idx: &[usize], cfg: &TrainConfig, state: &mut TrainState) -> Result<StepRecord> {
    let batch = data.batch_view(idx);
    let mut rng = SeededRng::derive(cfg.seed, STREAM_STEP + state.step);
    let mut graph = Graph::new();
    let enc = state.params.bind(&mut graph);
    let (taus, tau_vars) = TemperatureVars::bind(&mut graph, &state.log_tau)?;
    let mut ctx = LossContext::new(&mut graph, &enc, &batch)?;
    if cfg.loss.gamma > 0.0 {
        // queue refresh needs the multimodal embeddings even during warm-up
        ctx.mm_embeddings()?;
    }
    let out = combined_loss(&mut ctx, &state.queue, &mut rng, &cfg.loss, &cfg.augment, taus)?;
    let total = graph.value(out.total).item();
    if !total.is_finite() {
        return Err(Error::NonFinite { op: "combined_loss" });
    }
    graph.backward(out.total)?;
    let mut grads = enc.grads(&graph);
    grads.extend(tau_vars.iter().map(|&v| graph.grad_or_zeros(v)));

    let entries: Vec<QueueEntry> = match out.mm_embeddings {
        Some(mm) if cfg.loss.gamma > 0.0 => {
            let z = graph.value(mm);
            (0..batch.len())
                .filter_map(|i| {
                    batch.video[i].as_ref().map(|v| QueueEntry {
                        z_m: z.row(i).to_vec(),
                        z_v: v.clone(),
                        z_t: batch.text[i].clone(),
                        insert_step: state.step,
                    })
                })
                .collect()
        }
        _ => Vec::new(),
    };

    {
        let mut slots = state.params.tensors_mut();
        slots.extend(state.log_tau.iter_mut());
        state.adam.step(&mut slots, &grads)?;
    }
    clamp_log_tau(&mut state.log_tau);
    state.queue.push_batch(entries)?;

    let taus_now: Vec<f64> = state.log_tau.iter().map(|t| t.item().exp()).collect();
    let rec = StepRecord {
        step: state.step,
        epoch: state.epoch,
        total,
        l_ss: out.parts.l_ss,
        l_mm: out.parts.l_mm,
        l_nn: out.parts.l_nn,
        tau: taus_now[0],
        tau_terms: (taus_now.len() > 1).then_some(taus_now),
        aligned_fraction: batch.aligned_fraction(),
        mm_starved: out.mm_starved,
        nn_starved: out.nn_starved,
        queue_size: state.queue.len(),
    };
    state.step += 1;
    Ok(rec)
}

/// Parses a JSON-lines training log.
pub fn read_log(path: &Path) -> Result<Vec<StepRecord>> {
    fs::read_to_string(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                line: i + 1,
                reason: e.to_string(),
            })
        })
        .collect()
}
