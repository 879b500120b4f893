//! Clip and label file formats, the synthetic pulsatile-video generator and
//! preprocessing (chunking, standardization, resize).
//!
//! `FPV1` frames: magic, then `T, H, W, C` and a dtype tag (`0` = u8,
//! `1` = f32) as little-endian u32, then the `T×H×W×C` payload.
//! `FPL1` labels: magic, `T` as u32, `fs` as f32, then `T` f32 samples.

use std::f64::consts::PI;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("bad magic {found:?}, expected {expected:?}")]
    BadMagic { found: [u8; 4], expected: [u8; 4] },
    #[error("truncated file: expected {expected} payload bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("unknown dtype tag {0}")]
    DtypeTag(u32),
    #[error("invalid header: {0}")]
    Header(String),
    #[error("invalid synthetic config: {0}")]
    Config(String),
    #[error("clip has {frames} frames, shorter than one chunk of {chunk}")]
    TooShort { frames: usize, chunk: usize },
    #[error("frames and labels disagree: {frames} vs {labels} samples")]
    Alignment { frames: usize, labels: usize },
    #[error("labels have zero variance in chunk {0}")]
    FlatLabels(usize),
}

pub type Result<T> = std::result::Result<T, DataError>;

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

const FRAMES_MAGIC: [u8; 4] = *b"FPV1";
const LABELS_MAGIC: [u8; 4] = *b"FPL1";

#[derive(Debug, Clone, PartialEq)]
pub enum FrameData {
    U8(Vec<u8>),
    F32(Vec<f32>),
}

impl FrameData {
    fn len(&self) -> usize {
        match self {
            Self::U8(v) => v.len(),
            Self::F32(v) => v.len(),
        }
    }

    fn tag(&self) -> u32 {
        match self {
            Self::U8(_) => 0,
            Self::F32(_) => 1,
        }
    }
}

/// Row-major `T×H×W×C` frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Frames {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: FrameData,
}

impl Frames {
    pub fn new(dims: [usize; 4], data: FrameData) -> Result<Self> {
        let [t, h, w, c] = dims;
        if data.len() != t * h * w * c {
            return Err(DataError::Header(format!(
                "payload of {} samples does not match {t}x{h}x{w}x{c}",
                data.len()
            )));
        }
        Ok(Self { t, h, w, c, data })
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.t, self.h, self.w, self.c]
    }

    /// All samples as f32; u8 values become exact integers in `[0, 255]`.
    pub fn to_f32(&self) -> Vec<f32> {
        match &self.data {
            FrameData::U8(v) => v.iter().map(|&b| b as f32).collect(),
            FrameData::F32(v) => v.clone(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + self.data.len() * 4);
        out.extend_from_slice(&FRAMES_MAGIC);
        for v in [self.t, self.h, self.w, self.c] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.extend_from_slice(&self.data.tag().to_le_bytes());
        match &self.data {
            FrameData::U8(v) => out.extend_from_slice(v),
            FrameData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, FRAMES_MAGIC)?;
        let dims = [r.u32()?, r.u32()?, r.u32()?, r.u32()?].map(|v| v as usize);
        let tag = r.u32()?;
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| DataError::Header(format!("dimensions {dims:?} overflow")))?;
        let data = match tag {
            0 => FrameData::U8(r.payload(n)?.to_vec()),
            1 => FrameData::F32(f32s(r.payload(n.checked_mul(4).ok_or(DataError::Header("overflow".into()))?)?)),
            t => return Err(DataError::DtypeTag(t)),
        };
        r.finish()?;
        Self::new(dims, data)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_file(path, &self.encode())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&read_file(path)?)
    }
}

/// A label trace sampled at `fs`.
#[derive(Debug, Clone, PartialEq)]
pub struct Labels {
    pub fs: f32,
    pub values: Vec<f32>,
}

impl Labels {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.values.len());
        out.extend_from_slice(&LABELS_MAGIC);
        out.extend_from_slice(&(self.values.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.fs.to_le_bytes());
        self.values.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, LABELS_MAGIC)?;
        let t = r.u32()? as usize;
        let fs = f32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if !(fs > 0.0 && fs.is_finite()) {
            return Err(DataError::Header(format!("sampling rate {fs} must be positive")));
        }
        let values = f32s(r.payload(t * 4)?);
        r.finish()?;
        Ok(Self { fs, values })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_file(path, &self.encode())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&read_file(path)?)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,value\n");
        for (i, v) in self.values.iter().enumerate() {
            s.push_str(&format!("{},{}\n", i as f64 / self.fs as f64, v));
        }
        s
    }
}

fn f32s(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect()
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(io_err(path))?;
    Ok(buf)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(bytes))
        .map_err(io_err(path))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8], magic: [u8; 4]) -> Result<Self> {
        let mut r = Self { bytes, pos: 0 };
        let found: [u8; 4] = r.take(4)?.try_into().unwrap();
        if found != magic {
            return Err(DataError::BadMagic { found, expected: magic });
        }
        Ok(r)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let rest = self.bytes.len() - self.pos;
        if rest < n {
            return Err(DataError::Header(format!("header cut short at byte {}", self.bytes.len())));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn payload(&mut self, n: usize) -> Result<&'a [u8]> {
        let rest = self.bytes.len() - self.pos;
        if rest < n {
            return Err(DataError::Truncated { expected: n, found: rest });
        }
        self.take(n)
    }

    fn finish(self) -> Result<()> {
        let rest = self.bytes.len() - self.pos;
        if rest != 0 {
            return Err(DataError::Header(format!("{rest} trailing bytes after payload")));
        }
        Ok(())
    }
}

/// Skin region as an ellipse in fractions of the frame size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
}

impl Ellipse {
    pub fn contains(&self, y: f64, x: f64) -> bool {
        let dx = (x - self.cx) / self.rx;
        let dy = (y - self.cy) / self.ry;
        dx * dx + dy * dy <= 1.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub duration_s: f64,
    pub fs: f64,
    pub height: usize,
    pub width: usize,
    pub hr_bpm: f64,
    /// BPM per second.
    pub hr_drift: f64,
    /// Pulse amplitude in u8 levels.
    pub amplitude: f64,
    pub harmonic_ratio: f64,
    /// Relative pulse strength per color channel.
    pub channel_gains: [f64; 3],
    /// Background color per channel.
    pub base: [f64; 3],
    /// Extra color offset inside the skin region.
    pub skin_offset: [f64; 3],
    pub mask: Ellipse,
    pub illum_amp: f64,
    pub illum_freq: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            duration_s: 16.0,
            fs: 30.0,
            height: 72,
            width: 72,
            hr_bpm: 72.0,
            hr_drift: 0.0,
            amplitude: 4.0,
            harmonic_ratio: 0.3,
            channel_gains: [0.6, 1.0, 0.4],
            base: [90.0, 80.0, 70.0],
            skin_offset: [60.0, 30.0, 20.0],
            mask: Ellipse {
                cx: 0.5,
                cy: 0.5,
                rx: 0.32,
                ry: 0.4,
            },
            illum_amp: 2.0,
            illum_freq: 0.1,
            noise_sigma: 2.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn frames(&self) -> usize {
        (self.duration_s * self.fs).round() as usize
    }

    /// Instantaneous heart rate at time `t`, in BPM.
    pub fn hr_at(&self, t: f64) -> f64 {
        self.hr_bpm + self.hr_drift * t
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(DataError::Config(m));
        if !(self.fs > 0.0) || self.frames() < 2 || self.height == 0 || self.width == 0 {
            return bad("need fs > 0, at least 2 frames and a non-empty frame".into());
        }
        let end = self.hr_at(self.duration_s);
        for hr in [self.hr_bpm, end] {
            if !(36.0..=198.0).contains(&hr) {
                return bad(format!("heart rate {hr} BPM lies outside the 0.6-3.3 Hz band"));
            }
        }
        if !(0.0..=1.0).contains(&self.harmonic_ratio) || self.noise_sigma < 0.0 || self.amplitude < 0.0 {
            return bad("harmonic ratio must be in [0, 1], amplitude and noise nonnegative".into());
        }
        let swing = self.amplitude * (1.0 + self.harmonic_ratio) + self.illum_amp.abs() + 4.0 * self.noise_sigma;
        for c in 0..3 {
            let lo = self.base[c].min(self.base[c] + self.skin_offset[c]) - swing * self.channel_gains[c].abs().max(1.0);
            let hi = self.base[c].max(self.base[c] + self.skin_offset[c]) + swing * self.channel_gains[c].abs().max(1.0);
            if lo < 0.0 || hi > 255.0 {
                return bad(format!("channel {c} would clip under u8 quantization ([{lo:.1}, {hi:.1}])"));
            }
        }
        Ok(())
    }
}

/// Pulse waveform and its phase integral sampled at the clip's frame times.
pub fn synth_bvp(cfg: &SynthConfig) -> Vec<f64> {
    let dt = 1.0 / cfg.fs;
    let mut phase = 0.0f64;
    (0..cfg.frames())
        .map(|i| {
            let v = phase.sin() + cfg.harmonic_ratio * (2.0 * phase).sin();
            // midpoint rule for ∫ 2π f(t) dt
            phase += 2.0 * PI * cfg.hr_at((i as f64 + 0.5) * dt) / 60.0 * dt;
            v
        })
        .collect()
}

fn standardize(x: &[f64]) -> Option<Vec<f64>> {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
    (var > 0.0).then(|| x.iter().map(|v| (v - m) / var.sqrt()).collect())
}

/// Renders a clip as u8 frames plus its standardized pulse labels.
pub fn generate_synthetic_clip(cfg: &SynthConfig) -> Result<(Frames, Labels)> {
    cfg.validate()?;
    let (t, h, w) = (cfg.frames(), cfg.height, cfg.width);
    let bvp = synth_bvp(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let mask: Vec<bool> = (0..h * w)
        .map(|p| cfg.mask.contains((p / w) as f64 / h as f64, (p % w) as f64 / w as f64))
        .collect();
    let mut data = Vec::with_capacity(t * h * w * 3);
    for (i, &pulse) in bvp.iter().enumerate() {
        let drift = cfg.illum_amp * (2.0 * PI * cfg.illum_freq * i as f64 / cfg.fs).sin();
        for &skin in &mask {
            for c in 0..3 {
                let mut v = cfg.base[c] + drift;
                if skin {
                    v += cfg.skin_offset[c] + cfg.amplitude * cfg.channel_gains[c] * pulse;
                }
                if cfg.noise_sigma > 0.0 {
                    v += noise.sample(&mut rng);
                }
                data.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    let labels = standardize(&bvp).unwrap_or_else(|| vec![0.0; t]);
    Ok((
        Frames::new([t, h, w, 3], FrameData::U8(data))?,
        Labels {
            fs: cfg.fs as f32,
            values: labels.into_iter().map(|v| v as f32).collect(),
        },
    ))
}

/// A collection of synthetic clips with heart rates spread over a range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub clips: usize,
    pub frames: usize,
    pub hr_min: f64,
    pub hr_max: f64,
    /// Every `holdout_every`-th clip (1-based) is held out for evaluation.
    pub holdout_every: usize,
    pub seed: u64,
    pub clip: SynthConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            clips: 16,
            frames: 480,
            hr_min: 50.0,
            hr_max: 150.0,
            holdout_every: 4,
            seed: 0,
            clip: SynthConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipEntry {
    pub name: String,
    pub frames: String,
    pub labels: String,
    pub hr_bpm: f64,
    pub holdout: bool,
}

/// `dataset.json`: the clip listing written by [`write_dataset`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub config: DatasetConfig,
    pub clips: Vec<ClipEntry>,
}

pub const INDEX_FILE: &str = "dataset.json";

impl DatasetConfig {
    /// Per-clip generator configs: stratified, seeded heart rates.
    pub fn clip_configs(&self) -> Vec<SynthConfig> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let span = self.hr_max - self.hr_min;
        (0..self.clips)
            .map(|i| {
                let u: f64 = rng.random();
                SynthConfig {
                    hr_bpm: self.hr_min + span * (i as f64 + u) / self.clips as f64,
                    duration_s: self.frames as f64 / self.clip.fs,
                    seed: self.seed.wrapping_mul(1_000_003).wrapping_add(i as u64 + 1),
                    ..self.clip.clone()
                }
            })
            .collect()
    }

    pub fn is_holdout(&self, i: usize) -> bool {
        self.holdout_every > 0 && (i + 1) % self.holdout_every == 0
    }
}

/// Generates every clip into `dir` and writes the index.
pub fn write_dataset(cfg: &DatasetConfig, dir: &Path) -> Result<DatasetIndex> {
    if cfg.clips == 0 {
        return Err(DataError::Config("dataset needs at least one clip".into()));
    }
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut clips = Vec::with_capacity(cfg.clips);
    for (i, c) in cfg.clip_configs().iter().enumerate() {
        let (frames, labels) = generate_synthetic_clip(c)?;
        let name = format!("clip_{i:03}");
        let entry = ClipEntry {
            frames: format!("{name}.fpv"),
            labels: format!("{name}.fpl"),
            name,
            hr_bpm: c.hr_bpm,
            holdout: cfg.is_holdout(i),
        };
        frames.write(&dir.join(&entry.frames))?;
        labels.write(&dir.join(&entry.labels))?;
        clips.push(entry);
    }
    let index = DatasetIndex {
        config: cfg.clone(),
        clips,
    };
    let path = dir.join(INDEX_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(&index).expect("index serializes")).map_err(io_err(&path))?;
    Ok(index)
}

pub fn read_index(dir: &Path) -> Result<DatasetIndex> {
    let path = dir.join(INDEX_FILE);
    let text = std::fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(|e| DataError::Header(format!("{}: {e}", path.display())))
}

/// One training/evaluation unit: frames as `[C, T, H, W]` and aligned labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Chunk {
    pub frames: Tensor<f32>,
    pub labels: Vec<f32>,
    pub fs: f64,
}

/// Non-overlapping chunks of `chunk_len` frames (remainder dropped) with
/// labels standardized per chunk.
pub fn chunk_dataset(frames: &Frames, labels: &Labels, chunk_len: usize) -> Result<Vec<Chunk>> {
    if frames.t != labels.values.len() {
        return Err(DataError::Alignment {
            frames: frames.t,
            labels: labels.values.len(),
        });
    }
    if chunk_len == 0 || frames.t < chunk_len {
        return Err(DataError::TooShort {
            frames: frames.t,
            chunk: chunk_len,
        });
    }
    let [_, h, w, c] = frames.dims();
    let plane = h * w;
    let all = frames.to_f32();
    (0..frames.t / chunk_len)
        .map(|k| {
            let t0 = k * chunk_len;
            let mut data = vec![0.0f32; c * chunk_len * plane];
            for t in 0..chunk_len {
                let src = &all[(t0 + t) * plane * c..(t0 + t + 1) * plane * c];
                for (p, px) in src.chunks_exact(c).enumerate() {
                    for (ch, &v) in px.iter().enumerate() {
                        data[(ch * chunk_len + t) * plane + p] = v;
                    }
                }
            }
            let lab: Vec<f64> = labels.values[t0..t0 + chunk_len].iter().map(|&v| v as f64).collect();
            let z = standardize(&lab).ok_or(DataError::FlatLabels(k))?;
            Ok(Chunk {
                frames: Tensor::new(vec![c, chunk_len, h, w], data).expect("sized above"),
                labels: z.into_iter().map(|v| v as f32).collect(),
                fs: labels.fs as f64,
            })
        })
        .collect()
}

/// Bilinear resize of every frame and channel, sampling at pixel centers
/// (corner alignment off) with edge clamping.
pub fn resize_bilinear(frames: &Frames, out_h: usize, out_w: usize) -> Result<Frames> {
    if out_h == 0 || out_w == 0 {
        return Err(DataError::Header("output size must be at least 1x1".into()));
    }
    let [t, h, w, c] = frames.dims();
    if (out_h, out_w) == (h, w) {
        return Ok(Frames::new([t, h, w, c], FrameData::F32(frames.to_f32()))?);
    }
    let src = frames.to_f32();
    let axis = |o: usize, n: usize, len: usize| {
        let x = ((o as f64 + 0.5) * n as f64 / len as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = x.floor() as usize;
        (i0, (i0 + 1).min(n - 1), (x - i0 as f64) as f32)
    };
    let ys: Vec<_> = (0..out_h).map(|o| axis(o, h, out_h)).collect();
    let xs: Vec<_> = (0..out_w).map(|o| axis(o, w, out_w)).collect();
    let mut out = Vec::with_capacity(t * out_h * out_w * c);
    for f in src.chunks_exact(h * w * c) {
        let px = |y: usize, x: usize, ch: usize| f[(y * w + x) * c + ch];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                for ch in 0..c {
                    let top = px(y0, x0, ch) * (1.0 - fx) + px(y0, x1, ch) * fx;
                    let bot = px(y1, x0, ch) * (1.0 - fx) + px(y1, x1, ch) * fx;
                    out.push(top * (1.0 - fy) + bot * fy);
                }
            }
        }
    }
    Frames::new([t, out_h, out_w, c], FrameData::F32(out))
}
