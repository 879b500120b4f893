//! Pulse-signal evaluation: Pearson loss, FFT bandpass, spectral-peak heart
//! rate, SNR, MACC, aggregated error metrics and cosine attention maps.

use std::fmt::Write as _;
use std::io;
use std::path::Path;

use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Error)]
pub enum SignalError {
    #[error("signal lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("signal has zero variance")]
    ZeroVariance,
    #[error("sampling rate {fs} Hz must exceed twice the band edge {hi} Hz")]
    SampleRate { fs: f64, hi: f64 },
    #[error("signal too short: {got} samples, need {need}")]
    TooShort { got: usize, need: usize },
    #[error("no spectral bins inside [{lo}, {hi}] Hz")]
    EmptyBand { lo: f64, hi: f64 },
    #[error("frequency {0} Hz lies outside the evaluation band")]
    OutOfBand(f64),
    #[error("need at least 2 chunks, got {0}")]
    TooFewChunks(usize),
    #[error("map has shape {got:?}, expected {expected}")]
    Shape { got: Vec<usize>, expected: &'static str },
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, SignalError>;

/// A uniformly sampled waveform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalTrace {
    pub samples: Vec<f64>,
    pub fs: f64,
}

impl SignalTrace {
    pub fn new(samples: Vec<f64>, fs: f64) -> Self {
        assert!(fs > 0.0, "sampling rate must be positive");
        Self { samples, fs }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.fs
    }
}

/// Band edges and metric constants, in Hz unless noted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricConfig {
    pub lo: f64,
    pub hi: f64,
    /// Half width of the SNR windows around the fundamental and first harmonic.
    pub snr_half_width: f64,
    pub snr_min_db: f64,
    pub snr_max_db: f64,
    /// MACC lag search range in seconds.
    pub macc_max_lag_s: f64,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            lo: 0.6,
            hi: 3.3,
            snr_half_width: 0.1,
            snr_min_db: -20.0,
            snr_max_db: 60.0,
            macc_max_lag_s: 1.0,
        }
    }
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Sample standard deviation (n − 1 denominator).
fn sample_std(x: &[f64]) -> f64 {
    if x.len() < 2 {
        return 0.0;
    }
    let m = mean(x);
    (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64).sqrt()
}

/// Pearson correlation, `None` when either side has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let (ma, mb) = (mean(a), mean(b));
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// `1 − pearson(r, g)`.
pub fn neg_pearson_loss(r: &SignalTrace, g: &SignalTrace) -> Result<f64> {
    if r.len() != g.len() {
        return Err(SignalError::LengthMismatch(r.len(), g.len()));
    }
    pearson(&r.samples, &g.samples)
        .map(|p| 1.0 - p)
        .ok_or(SignalError::ZeroVariance)
}

fn spectrum(x: &[f64], nfft: usize) -> Vec<Complex<f64>> {
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    buf.resize(nfft, Complex::new(0.0, 0.0));
    FftPlanner::new().plan_fft_forward(nfft).process(&mut buf);
    buf
}

/// Zero-phase FFT mask keeping `|f| ∈ [lo, hi]`.
pub fn bandpass(x: &SignalTrace, lo: f64, hi: f64) -> Result<SignalTrace> {
    if x.fs <= 2.0 * hi {
        return Err(SignalError::SampleRate { fs: x.fs, hi });
    }
    let n = x.len();
    if n == 0 {
        return Err(SignalError::TooShort { got: 0, need: 1 });
    }
    let mut buf = spectrum(&x.samples, n);
    for (k, c) in buf.iter_mut().enumerate() {
        let f = k.min(n - k) as f64 * x.fs / n as f64;
        if f < lo || f > hi {
            *c = Complex::new(0.0, 0.0);
        }
    }
    FftPlanner::new().plan_fft_inverse(n).process(&mut buf);
    let samples = buf.iter().map(|c| c.re / n as f64).collect();
    Ok(SignalTrace { samples, fs: x.fs })
}

/// Heart rate in BPM from the highest power bin inside `[lo, hi]`, with the
/// spectrum zero padded to four times the next power of two.
pub fn estimate_hr_fft_band(x: &SignalTrace, lo: f64, hi: f64) -> Result<f64> {
    let need = (2.0 * x.fs).ceil() as usize;
    if x.len() < need.max(2) {
        return Err(SignalError::TooShort { got: x.len(), need: need.max(2) });
    }
    let m = mean(&x.samples);
    let centered: Vec<f64> = x.samples.iter().map(|v| v - m).collect();
    let nfft = 4 * x.len().next_power_of_two();
    let spec = spectrum(&centered, nfft);
    let df = x.fs / nfft as f64;
    let mut best: Option<(usize, f64)> = None;
    for (k, c) in spec.iter().enumerate().take(nfft / 2 + 1) {
        let f = k as f64 * df;
        if f < lo || f > hi {
            continue;
        }
        let p = c.norm_sqr();
        if best.is_none_or(|(_, bp)| p > bp) {
            best = Some((k, p));
        }
    }
    best.map(|(k, _)| 60.0 * k as f64 * df)
        .ok_or(SignalError::EmptyBand { lo, hi })
}

pub fn estimate_hr_fft(x: &SignalTrace) -> Result<f64> {
    let c = MetricConfig::default();
    estimate_hr_fft_band(x, c.lo, c.hi)
}

fn hann(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// Hann-windowed power spectrum on `nfft = next_pow2(n)` bins up to Nyquist,
/// returned as `(frequency, power)` pairs.
pub fn power_spectrum(x: &SignalTrace) -> Vec<(f64, f64)> {
    let m = mean(&x.samples);
    let w = hann(x.len());
    let windowed: Vec<f64> = x.samples.iter().zip(&w).map(|(v, w)| (v - m) * w).collect();
    let nfft = x.len().next_power_of_two();
    let spec = spectrum(&windowed, nfft);
    let df = x.fs / nfft as f64;
    spec.iter()
        .take(nfft / 2 + 1)
        .enumerate()
        .map(|(k, c)| (k as f64 * df, c.norm_sqr()))
        .collect()
}

/// Power near `f` and `2f` over the remaining in-band power, in dB and
/// clamped to the configured range.
pub fn snr_db_with(r: &SignalTrace, hr_gt: f64, cfg: &MetricConfig) -> Result<f64> {
    let f0 = hr_gt / 60.0;
    if !(cfg.lo..=cfg.hi).contains(&f0) {
        return Err(SignalError::OutOfBand(f0));
    }
    if r.len() < 2 {
        return Err(SignalError::TooShort { got: r.len(), need: 2 });
    }
    let (mut sig, mut noise) = (0.0, 0.0);
    for (f, p) in power_spectrum(r) {
        if f < cfg.lo || f > cfg.hi {
            continue;
        }
        if (f - f0).abs() <= cfg.snr_half_width || (f - 2.0 * f0).abs() <= cfg.snr_half_width {
            sig += p;
        } else {
            noise += p;
        }
    }
    if noise <= 0.0 {
        return Ok(cfg.snr_max_db);
    }
    if sig <= 0.0 {
        return Ok(cfg.snr_min_db);
    }
    Ok((10.0 * (sig / noise).log10()).clamp(cfg.snr_min_db, cfg.snr_max_db))
}

pub fn snr_db(r: &SignalTrace, hr_gt: f64) -> Result<f64> {
    snr_db_with(r, hr_gt, &MetricConfig::default())
}

fn zscore(x: &[f64]) -> Result<Vec<f64>> {
    let m = mean(x);
    let var = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / x.len() as f64;
    if var <= 1e-24 {
        return Err(SignalError::ZeroVariance);
    }
    let s = var.sqrt();
    Ok(x.iter().map(|v| (v - m) / s).collect())
}

/// Maximum Pearson correlation over integer lags `|ℓ| ≤ max_lag_s · fs`
/// between the bandpassed, standardized signals, floored at 0.
pub fn macc_with(r: &SignalTrace, g: &SignalTrace, cfg: &MetricConfig) -> Result<f64> {
    if r.len() != g.len() {
        return Err(SignalError::LengthMismatch(r.len(), g.len()));
    }
    let need = (2.0 * r.fs).ceil() as usize;
    if r.len() < need {
        return Err(SignalError::TooShort { got: r.len(), need });
    }
    let a = zscore(&bandpass(r, cfg.lo, cfg.hi)?.samples)?;
    let b = zscore(&bandpass(g, cfg.lo, cfg.hi)?.samples)?;
    let max_lag = ((cfg.macc_max_lag_s * r.fs).round() as usize).min(r.len() - 2);
    let n = a.len();
    let mut best = 0.0f64;
    for lag in 0..=max_lag {
        // positive lag shifts b later than a, then the mirrored case
        for (x, y) in [(&a[lag..], &b[..n - lag]), (&a[..n - lag], &b[lag..])] {
            if let Some(p) = pearson(x, y) {
                best = best.max(p);
            }
        }
    }
    Ok(best.min(1.0))
}

pub fn macc(r: &SignalTrace, g: &SignalTrace) -> Result<f64> {
    macc_with(r, g, &MetricConfig::default())
}

/// Per-chunk evaluation results.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChunkMetrics {
    pub hr_est: f64,
    pub hr_gt: f64,
    pub snr_db: f64,
    pub macc: f64,
}

/// A metric value with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mae_hr: Estimate,
    pub rmse_hr: Estimate,
    pub mape_hr: Estimate,
    pub corr_hr: Estimate,
    pub snr_db: Estimate,
    pub macc: Estimate,
    pub n_chunks: usize,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value,se\n");
        for (name, e) in self.rows() {
            writeln!(s, "{name},{},{}", e.value, e.se).unwrap();
        }
        writeln!(s, "n_chunks,{},0", self.n_chunks).unwrap();
        s
    }

    pub fn rows(&self) -> [(&'static str, Estimate); 6] {
        [
            ("mae_hr", self.mae_hr),
            ("rmse_hr", self.rmse_hr),
            ("mape_hr", self.mape_hr),
            ("corr_hr", self.corr_hr),
            ("snr_db", self.snr_db),
            ("macc", self.macc),
        ]
    }

    /// Writes `<stem>.json` and `<stem>.csv` next to each other.
    pub fn write(&self, stem: &Path) -> Result<()> {
        std::fs::write(stem.with_extension("json"), self.to_json())?;
        std::fs::write(stem.with_extension("csv"), self.to_csv())?;
        Ok(())
    }
}

fn mean_se(x: &[f64]) -> Estimate {
    Estimate {
        value: mean(x),
        se: sample_std(x) / (x.len() as f64).sqrt(),
    }
}

/// Aggregates per-chunk results into a report.
pub fn summarize(chunks: &[ChunkMetrics]) -> Result<MetricsReport> {
    let n = chunks.len();
    if n < 2 {
        return Err(SignalError::TooFewChunks(n));
    }
    let est: Vec<f64> = chunks.iter().map(|c| c.hr_est).collect();
    let gt: Vec<f64> = chunks.iter().map(|c| c.hr_gt).collect();
    let abs_err: Vec<f64> = est.iter().zip(&gt).map(|(e, g)| (e - g).abs()).collect();
    let sq_err: Vec<f64> = abs_err.iter().map(|e| e * e).collect();
    let pct_err: Vec<f64> = abs_err.iter().zip(&gt).map(|(e, g)| 100.0 * e / g).collect();
    let rn = (n as f64).sqrt();
    let rmse = Estimate {
        value: mean(&sq_err).sqrt(),
        se: sample_std(&sq_err).sqrt() / rn,
    };
    let r = match pearson(&est, &gt) {
        Some(r) => r,
        None if est == gt => 1.0,
        None => 0.0,
    };
    let corr = Estimate {
        value: r,
        se: if n > 2 { ((1.0 - r * r).max(0.0) / (n - 2) as f64).sqrt() } else { 0.0 },
    };
    let snr: Vec<f64> = chunks.iter().map(|c| c.snr_db).collect();
    let mac: Vec<f64> = chunks.iter().map(|c| c.macc).collect();
    Ok(MetricsReport {
        mae_hr: mean_se(&abs_err),
        rmse_hr: rmse,
        mape_hr: mean_se(&pct_err),
        corr_hr: corr,
        snr_db: mean_se(&snr),
        macc: mean_se(&mac),
        n_chunks: n,
    })
}

/// Metrics for one `(estimate, ground truth)` chunk. Both signals are
/// bandpassed before the heart rates are read off.
pub fn chunk_metrics(est: &SignalTrace, gt: &SignalTrace, cfg: &MetricConfig) -> Result<ChunkMetrics> {
    if est.len() != gt.len() {
        return Err(SignalError::LengthMismatch(est.len(), gt.len()));
    }
    let est_bp = bandpass(est, cfg.lo, cfg.hi)?;
    let gt_bp = bandpass(gt, cfg.lo, cfg.hi)?;
    let hr_est = estimate_hr_fft_band(&est_bp, cfg.lo, cfg.hi)?;
    let hr_gt = estimate_hr_fft_band(&gt_bp, cfg.lo, cfg.hi)?;
    Ok(ChunkMetrics {
        hr_est,
        hr_gt,
        snr_db: snr_db_with(&est_bp, hr_gt, cfg)?,
        macc: macc_with(est, gt, cfg).or_else(|e| match e {
            SignalError::ZeroVariance => Ok(0.0),
            e => Err(e),
        })?,
    })
}

pub fn aggregate_metrics(pairs: &[(SignalTrace, SignalTrace)], cfg: &MetricConfig) -> Result<MetricsReport> {
    let chunks = pairs
        .iter()
        .map(|(e, g)| chunk_metrics(e, g, cfg))
        .collect::<Result<Vec<_>>>()?;
    summarize(&chunks)
}

/// `|cos|` between each temporal vector `e[c, :, a, b]` and `g`, as a
/// `[κ, α, β]` map. Zero-norm vectors map to 0.
pub fn cosine_attention_map<T: Scalar>(e: &Tensor<T>, g: &[f64]) -> Result<Tensor<f64>> {
    let &[k, t, a, b] = e.shape() else {
        return Err(SignalError::Shape {
            got: e.shape().to_vec(),
            expected: "[κ, τ, α, β]",
        });
    };
    if g.len() != t {
        return Err(SignalError::LengthMismatch(t, g.len()));
    }
    let gn = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    let plane = a * b;
    let data = e.data();
    let mut out = vec![0.0; k * plane];
    for c in 0..k {
        for p in 0..plane {
            let (mut dot, mut nn) = (0.0, 0.0);
            for (ti, gv) in g.iter().enumerate() {
                let v = data[(c * t + ti) * plane + p].as_f64();
                dot += v * gv;
                nn += v * v;
            }
            let denom = nn.sqrt() * gn;
            out[c * plane + p] = if denom > 0.0 { (dot / denom).abs().min(1.0) } else { 0.0 };
        }
    }
    Ok(Tensor::new(vec![k, a, b], out).expect("sized above"))
}

/// 8-bit binary PGM of an `[α, β]` tile with values in `[0, 1]`.
pub fn pgm_bytes(tile: &[f64], height: usize, width: usize) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(tile.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

/// Writes one `<prefix>_c<k>.pgm` per channel and `<prefix>.txt` holding the
/// map as whitespace-separated rows (channels separated by blank lines).
pub fn write_attention_map(map: &Tensor<f64>, dir: &Path, prefix: &str) -> Result<Vec<std::path::PathBuf>> {
    let &[k, a, b] = map.shape() else {
        return Err(SignalError::Shape {
            got: map.shape().to_vec(),
            expected: "[κ, α, β]",
        });
    };
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::with_capacity(k + 1);
    let mut text = String::new();
    for (c, tile) in map.data().chunks(a * b).enumerate() {
        let path = dir.join(format!("{prefix}_c{c}.pgm"));
        std::fs::write(&path, pgm_bytes(tile, a, b))?;
        written.push(path);
        if c > 0 {
            text.push('\n');
        }
        for row in tile.chunks(b) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
            text.push_str(&line.join(" "));
            text.push('\n');
        }
    }
    let path = dir.join(format!("{prefix}.txt"));
    std::fs::write(&path, text)?;
    written.push(path);
    Ok(written)
}
