//! Training, evaluation, inference and ablation sweeps.

use std::io;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{self, Chunk, DataError, Frames, Labels};
use crate::fsam::MappingSpec;
use crate::model::{self, ArchConfig, ForwardOptions, ModelError, ModelParams};
use crate::signal::{self, ChunkMetrics, MetricConfig, MetricsReport, SignalError, SignalTrace};
use crate::tensor::{Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("non-finite value at step {step}: {source}")]
    NonFinite { step: usize, source: TensorError },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Signal(#[from] SignalError),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    std::fs::write(path, text).map_err(io_err(path))
}

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(io_err(path))
}

/// Frames per chunk; the network sees `CHUNK_LEN − 1` differences.
pub const CHUNK_LEN: usize = 161;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub max_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_frac: f64,
    /// Initial learning rate is `max_lr / div_factor`.
    pub div_factor: f64,
    /// Final learning rate is `max_lr / final_div_factor`.
    pub final_div_factor: f64,
    pub seed: u64,
    pub use_fsam: bool,
    /// Dataset directory holding `dataset.json`.
    pub data: PathBuf,
    /// Architecture file; the default plan when absent.
    pub arch: Option<PathBuf>,
    /// Cap on training chunks (taken in dataset order).
    pub max_train_chunks: Option<usize>,
    /// Cap on held-out chunks used for evaluation.
    pub max_eval_chunks: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 4,
            max_lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            warmup_frac: 0.3,
            div_factor: 25.0,
            final_div_factor: 1e4,
            seed: 0,
            use_fsam: true,
            data: PathBuf::from("data"),
            arch: None,
            max_train_chunks: None,
            max_eval_chunks: None,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.max_lr > 0.0) || !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(HarnessError::Config(
                "batch_size must be >= 1, max_lr > 0 and warmup_frac in [0, 1)".into(),
            ));
        }
        Ok(())
    }

    pub fn resolve_arch(&self) -> Result<ArchConfig> {
        match &self.arch {
            Some(p) => ArchConfig::from_toml(&read_text(p)?).map_err(HarnessError::Config),
            None => Ok(model::default_arch()),
        }
    }
}

/// Cosine one-cycle schedule: `max_lr / div` rising to `max_lr` at step
/// `warmup_frac · total`, then falling to `max_lr / final_div` at the last step.
pub fn one_cycle_lr(step: usize, total_steps: usize, cfg: &TrainConfig) -> Result<f64> {
    if step >= total_steps {
        return Err(HarnessError::Config(format!("step {step} outside schedule of {total_steps}")));
    }
    let (lo, hi, fin) = (cfg.max_lr / cfg.div_factor, cfg.max_lr, cfg.max_lr / cfg.final_div_factor);
    let s = step as f64;
    let warm = cfg.warmup_frac * total_steps as f64;
    let cos = |a: f64, b: f64, p: f64| b + (a - b) * 0.5 * (1.0 + (std::f64::consts::PI * p).cos());
    if s <= warm && warm > 0.0 {
        return Ok(cos(lo, hi, s / warm));
    }
    let last = (total_steps - 1) as f64;
    if last <= warm {
        return Ok(fin);
    }
    Ok(cos(hi, fin, (s - warm) / (last - warm)))
}

/// Adam with optional decoupled weight decay.
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    t: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig, sizes: &[usize]) -> Self {
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor<f32>], grads: &[Vec<f32>], lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let step = (lr / bc1) as f32;
        let (eps, wd, lr32) = (self.eps as f32, self.weight_decay as f32, lr as f32);
        let inv_bc2 = (1.0 / bc2) as f32;
        for (i, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let g = grads[i][j];
                m[j] = b1 * m[j] + (1.0 - b1) * g;
                v[j] = b2 * v[j] + (1.0 - b2) * g * g;
                if wd != 0.0 {
                    *w -= lr32 * wd * *w;
                }
                *w -= step * m[j] / ((v[j] * inv_bc2).sqrt() + eps);
            }
        }
    }
}

/// Loads the clips of a dataset directory, split by their holdout flag.
pub struct Dataset {
    pub train: Vec<Chunk>,
    pub eval: Vec<Chunk>,
}

pub fn load_dataset(dir: &Path, arch: &ArchConfig) -> Result<Dataset> {
    let index = data::read_index(dir)?;
    let [c, t, h, w] = arch.input;
    let (mut train, mut eval) = (Vec::new(), Vec::new());
    for e in &index.clips {
        let frames = Frames::read(&dir.join(&e.frames))?;
        let labels = Labels::read(&dir.join(&e.labels))?;
        if frames.c != c || frames.h != h || frames.w != w {
            return Err(ModelError::Input {
                expected: vec![c, h, w],
                got: vec![frames.c, frames.h, frames.w],
            }
            .into());
        }
        let chunks = data::chunk_dataset(&frames, &labels, t)?;
        if e.holdout { &mut eval } else { &mut train }.extend(chunks);
    }
    Ok(Dataset { train, eval })
}

fn target(chunk: &Chunk) -> Vec<f32> {
    // the k-th difference spans frames k and k + 1; pair it with label k + 1
    chunk.labels[1..].to_vec()
}

fn batch_input(chunk: &Chunk) -> Tensor<f32> {
    let mut shape = vec![1];
    shape.extend_from_slice(chunk.frames.shape());
    chunk.frames.reshape(&shape).expect("same length")
}

/// Loss and per-tensor gradients for one chunk.
fn sample_grad(params: &ModelParams<f32>, arch: &ArchConfig, chunk: &Chunk, use_fsam: bool) -> std::result::Result<(f64, Vec<Vec<f32>>), ModelError> {
    let mut tape = Tape::new();
    let x = tape.constant(batch_input(chunk))?;
    let vars = params.register(&mut tape)?;
    let y = model::model_forward(&mut tape, x, &vars, arch, use_fsam)?;
    let len = arch.output_len();
    let g = Tensor::new(vec![1, len], target(chunk))?;
    let loss = tape.neg_pearson(y, &g)?;
    let value = tape.value(loss).data()[0] as f64;
    tape.backward(loss)?;
    let grads = vars
        .flat()
        .iter()
        .map(|&v| match tape.grad(v) {
            Some(g) => g.data().to_vec(),
            None => vec![0.0; tape.value(v).len()],
        })
        .collect();
    Ok((value, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: TrainConfig,
    pub arch: ArchConfig,
    pub seed: u64,
    pub train_chunks: usize,
    pub total_steps: usize,
    pub epoch_losses: Vec<f64>,
    pub checkpoint: PathBuf,
    pub loss_log: PathBuf,
    pub report: Option<PathBuf>,
    pub wall_clock_s: f64,
}

pub const CHECKPOINT_FILE: &str = "model.fpck";
pub const LOSS_LOG_FILE: &str = "loss_log.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const REPORT_STEM: &str = "report";

/// Trains from scratch, writes the checkpoint, the loss log and the manifest
/// into `out`, then evaluates on the held-out split.
pub fn train(cfg: &TrainConfig, arch: &ArchConfig, out: &Path) -> Result<(RunManifest, ModelParams<f32>)> {
    let start = Instant::now();
    cfg.validate()?;
    arch.validate()?;
    let mut ds = load_dataset(&cfg.data, arch)?;
    if let Some(n) = cfg.max_train_chunks {
        ds.train.truncate(n);
    }
    if let Some(n) = cfg.max_eval_chunks {
        ds.eval.truncate(n);
    }
    let mut params = model::param_init::<f32>(arch, cfg.seed);
    let mut manifest = fit(cfg, arch, &ds, &mut params, out)?;
    if ds.eval.len() >= 2 {
        let report = evaluate_chunks(&params, arch, &ds.eval, cfg.use_fsam, &MetricConfig::default())?;
        let stem = out.join(REPORT_STEM);
        report.write(&stem)?;
        manifest.report = Some(stem.with_extension("json"));
    }
    manifest.wall_clock_s = start.elapsed().as_secs_f64();
    write_text(
        &out.join(MANIFEST_FILE),
        &serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )?;
    Ok((manifest, params))
}

fn fit(cfg: &TrainConfig, arch: &ArchConfig, ds: &Dataset, params: &mut ModelParams<f32>, out: &Path) -> Result<RunManifest> {
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let n = ds.train.len();
    if n == 0 && cfg.epochs > 0 {
        return Err(HarnessError::Config("no training chunks".into()));
    }
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total = cfg.epochs * steps_per_epoch;
    let sizes: Vec<usize> = params.named().iter().map(|(_, t)| t.len()).collect();
    let mut adam = Adam::new(cfg, &sizes);
    let mut log = String::from("epoch,step,lr,loss\n");
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_5eed);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: Vec<Vec<f32>> = sizes.iter().map(|&s| vec![0.0; s]).collect();
            let mut batch_loss = 0.0;
            for &i in batch {
                let (loss, grads) = sample_grad(params, arch, &ds.train[i], cfg.use_fsam).map_err(|e| match e {
                    ModelError::Tensor(source @ TensorError::NonFinite { .. }) => HarnessError::NonFinite { step, source },
                    e => e.into(),
                })?;
                batch_loss += loss;
                for (a, g) in acc.iter_mut().zip(&grads) {
                    a.iter_mut().zip(g).for_each(|(a, g)| *a += g);
                }
            }
            let scale = 1.0 / batch.len() as f32;
            acc.iter_mut().for_each(|a| a.iter_mut().for_each(|g| *g *= scale));
            let lr = one_cycle_lr(step, total, cfg)?;
            let mut tensors: Vec<&mut Tensor<f32>> = params.named_mut().into_iter().map(|(_, t)| t).collect();
            adam.step(&mut tensors, &acc, lr);
            let mean = batch_loss / batch.len() as f64;
            log.push_str(&format!("{epoch},{step},{lr:.6e},{mean:.9}\n"));
            epoch_loss += batch_loss;
            step += 1;
        }
        epoch_losses.push(epoch_loss / n as f64);
    }
    if !params.is_finite() {
        return Err(HarnessError::NonFinite {
            step,
            source: TensorError::NonFinite { op: "adam" },
        });
    }
    let checkpoint = out.join(CHECKPOINT_FILE);
    write_checkpoint(&checkpoint, arch, params)?;
    let loss_log = out.join(LOSS_LOG_FILE);
    write_text(&loss_log, &log)?;
    Ok(RunManifest {
        config: cfg.clone(),
        arch: arch.clone(),
        seed: cfg.seed,
        train_chunks: n,
        total_steps: total,
        epoch_losses,
        checkpoint,
        loss_log,
        report: None,
        wall_clock_s: 0.0,
    })
}

const CKPT_MAGIC: &[u8; 4] = b"FPCK";
const CKPT_VERSION: u32 = 1;

/// `FPCK`, version, arch JSON, then `(name, shape, f32 data)` blobs.
pub fn encode_checkpoint(arch: &ArchConfig, params: &ModelParams<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    let u32le = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
    out.extend_from_slice(CKPT_MAGIC);
    u32le(&mut out, CKPT_VERSION as usize);
    let json = serde_json::to_vec(arch).expect("arch serializes");
    u32le(&mut out, json.len());
    out.extend_from_slice(&json);
    out.extend_from_slice(&params.seed.to_le_bytes());
    let named = params.named();
    u32le(&mut out, named.len());
    for (name, t) in named {
        u32le(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        u32le(&mut out, t.ndim());
        t.shape().iter().for_each(|&d| u32le(&mut out, d));
        t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| HarnessError::Checkpoint("truncated".into()))?;
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ArchConfig, ModelParams<f32>)> {
    let bad = |m: String| HarnessError::Checkpoint(m);
    let mut r = Cursor { bytes, pos: 0 };
    if r.take(4)? != CKPT_MAGIC {
        return Err(bad("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CKPT_VERSION as usize {
        return Err(bad(format!("unsupported version {version}")));
    }
    let len = r.u32()?;
    let arch: ArchConfig = serde_json::from_slice(r.take(len)?).map_err(|e| bad(format!("arch: {e}")))?;
    arch.validate()?;
    let seed = u64::from_le_bytes(r.take(8)?.try_into().unwrap());
    let mut params = model::param_init::<f32>(&arch, seed);
    let count = r.u32()?;
    let mut slots = params.named_mut();
    if count != slots.len() {
        return Err(bad(format!("{count} tensors stored, architecture has {}", slots.len())));
    }
    for (name, slot) in slots.iter_mut() {
        let n = r.u32()?;
        let stored = std::str::from_utf8(r.take(n)?).map_err(|_| bad("tensor name is not UTF-8".into()))?;
        if stored != name {
            return Err(bad(format!("expected tensor '{name}', found '{stored}'")));
        }
        let ndim = r.u32()?;
        let shape = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        if shape != slot.shape() {
            return Err(ModelError::Param(name.clone()).into());
        }
        let data = r
            .take(4 * slot.len())?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        **slot = Tensor::new(shape, data).map_err(ModelError::from)?;
    }
    drop(slots);
    if r.pos != bytes.len() {
        return Err(bad("trailing bytes".into()));
    }
    Ok((arch, params))
}

pub fn write_checkpoint(path: &Path, arch: &ArchConfig, params: &ModelParams<f32>) -> Result<()> {
    std::fs::write(path, encode_checkpoint(arch, params)).map_err(io_err(path))
}

pub fn read_checkpoint(path: &Path) -> Result<(ArchConfig, ModelParams<f32>)> {
    decode_checkpoint(&std::fs::read(path).map_err(io_err(path))?)
}

/// Runs the model on one `[C, T, H, W]` chunk.
pub fn infer_chunk(params: &ModelParams<f32>, arch: &ArchConfig, frames: &Tensor<f32>, use_fsam: bool) -> Result<Vec<f32>> {
    Ok(model::predict(params, arch, frames, use_fsam)?.remove(0))
}

fn trace(x: &[f32], fs: f64) -> SignalTrace {
    SignalTrace::new(x.iter().map(|&v| v as f64).collect(), fs)
}

/// Per-chunk metrics of the model against the aligned labels.
pub fn chunk_results(
    params: &ModelParams<f32>,
    arch: &ArchConfig,
    chunks: &[Chunk],
    use_fsam: bool,
    mcfg: &MetricConfig,
) -> Result<Vec<ChunkMetrics>> {
    chunks
        .iter()
        .map(|c| {
            let est = infer_chunk(params, arch, &c.frames, use_fsam)?;
            Ok(signal::chunk_metrics(&trace(&est, c.fs), &trace(&target(c), c.fs), mcfg)?)
        })
        .collect()
}

pub fn evaluate_chunks(
    params: &ModelParams<f32>,
    arch: &ArchConfig,
    chunks: &[Chunk],
    use_fsam: bool,
    mcfg: &MetricConfig,
) -> Result<MetricsReport> {
    Ok(signal::summarize(&chunk_results(params, arch, chunks, use_fsam, mcfg)?)?)
}

/// Evaluates a checkpoint on the held-out clips of `data`.
pub fn evaluate(checkpoint: &Path, data: &Path, use_fsam: bool) -> Result<MetricsReport> {
    let (arch, params) = read_checkpoint(checkpoint)?;
    let ds = load_dataset(data, &arch)?;
    evaluate_chunks(&params, &arch, &ds.eval, use_fsam, &MetricConfig::default())
}

/// The labels scored against themselves: a reference for the metric stack.
pub fn evaluate_oracle(chunks: &[Chunk], mcfg: &MetricConfig) -> Result<MetricsReport> {
    let results = chunks
        .iter()
        .map(|c| {
            let g = trace(&target(c), c.fs);
            Ok(signal::chunk_metrics(&g, &g, mcfg)?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(signal::summarize(&results)?)
}

/// Splits a clip into `[C, T, H, W]` chunks of the architecture's length.
pub fn clip_chunks(frames: &Frames, chunk: usize) -> Result<Vec<Tensor<f32>>> {
    let labels = Labels {
        fs: 30.0,
        values: (0..frames.t).map(|i| (i % 2) as f32).collect(),
    };
    Ok(data::chunk_dataset(frames, &labels, chunk)?.into_iter().map(|c| c.frames).collect())
}

/// rPPG estimate for a whole clip, chunk by chunk, as `t,value` CSV rows.
pub fn infer_clip(params: &ModelParams<f32>, arch: &ArchConfig, frames: &Frames, fs: f64, use_fsam: bool) -> Result<String> {
    let [c, t, h, w] = arch.input;
    if frames.c != c || frames.h != h || frames.w != w {
        return Err(ModelError::Input {
            expected: vec![c, h, w],
            got: vec![frames.c, frames.h, frames.w],
        }
        .into());
    }
    let mut csv = String::from("t,value\n");
    for (k, chunk) in clip_chunks(frames, t)?.iter().enumerate() {
        for (i, v) in infer_chunk(params, arch, chunk, use_fsam)?.iter().enumerate() {
            let frame = k * t + i + 1;
            csv.push_str(&format!("{:.6},{v}\n", frame as f64 / fs));
        }
    }
    Ok(csv)
}

/// Cosine attention map of the embedding entering FSAM for the first chunk
/// of a clip, against its aligned labels.
pub fn attention_map(params: &ModelParams<f32>, arch: &ArchConfig, frames: &Frames, labels: &Labels, use_fsam: bool) -> Result<Tensor<f64>> {
    let chunks = data::chunk_dataset(frames, labels, arch.input[1])?;
    let chunk = &chunks[0];
    let mut tape = Tape::no_grad();
    let x = tape.constant(batch_input(chunk)).map_err(ModelError::from)?;
    let vars = params.register(&mut tape)?;
    let opts = ForwardOptions {
        use_fsam,
        capture_embedding: true,
        capture_recons: false,
    };
    let out = model::forward(&mut tape, x, &vars, arch, opts)?;
    let emb = out.embedding.expect("captured");
    let s = emb.shape()[1..].to_vec();
    let emb = emb.reshape(&s).map_err(ModelError::from)?;
    let g: Vec<f64> = target(chunk).iter().map(|&v| v as f64).collect();
    Ok(signal::cosine_attention_map(&emb, &g)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub train: TrainConfig,
    pub mappings: Vec<MappingSpec>,
    pub ranks: Vec<usize>,
    pub steps: Vec<usize>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig {
                epochs: 1,
                max_train_chunks: Some(4),
                max_eval_chunks: Some(4),
                ..TrainConfig::default()
            },
            mappings: vec![MappingSpec::TauToM, MappingSpec::KappaToM, MappingSpec::TauKappaToM],
            ranks: vec![1, 2, 4, 8, 16],
            steps: vec![4, 6, 8],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub name: String,
    pub mapping: MappingSpec,
    pub rank: usize,
    pub steps: usize,
    pub report: PathBuf,
    pub mae_hr: f64,
}

/// Trains and evaluates one model per mapping (rank 1, default steps) and
/// one per `(rank, steps)` pair under the default mapping.
pub fn sweep(cfg: &SweepConfig, base: &ArchConfig, out: &Path) -> Result<Vec<SweepCell>> {
    let mut cells = Vec::new();
    let default_steps = base.fsam.nmf.steps;
    let mut grid: Vec<(String, MappingSpec, usize, usize)> = cfg
        .mappings
        .iter()
        .map(|&m| (format!("mapping_{m}"), m, 1, default_steps))
        .collect();
    for &r in &cfg.ranks {
        for &s in &cfg.steps {
            grid.push((format!("rank{r}_steps{s}"), MappingSpec::TauToM, r, s));
        }
    }
    let mut tc = cfg.train.clone();
    tc.use_fsam = true;
    let mut ds = load_dataset(&tc.data, base)?;
    if let Some(n) = tc.max_train_chunks {
        ds.train.truncate(n);
    }
    if let Some(n) = tc.max_eval_chunks {
        ds.eval.truncate(n);
    }
    for (name, mapping, rank, steps) in grid {
        let mut arch = base.clone();
        arch.fsam.mapping = mapping;
        arch.fsam.nmf.rank = rank;
        arch.fsam.nmf.steps = steps;
        arch.validate()?;
        let dir = out.join(&name);
        let mut params = model::param_init::<f32>(&arch, tc.seed);
        fit(&tc, &arch, &ds, &mut params, &dir)?;
        let report = evaluate_chunks(&params, &arch, &ds.eval, true, &MetricConfig::default())?;
        let stem = dir.join(REPORT_STEM);
        report.write(&stem)?;
        cells.push(SweepCell {
            name,
            mapping,
            rank,
            steps,
            report: stem.with_extension("json"),
            mae_hr: report.mae_hr.value,
        });
    }
    write_text(
        &out.join("sweep.json"),
        &serde_json::to_string_pretty(&cells).expect("cells serialize"),
    )?;
    Ok(cells)
}
