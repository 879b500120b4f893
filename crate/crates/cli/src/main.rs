use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use factorizephys::data::{self, DatasetConfig, Frames, Labels};
use factorizephys::fsam::MappingSpec;
use factorizephys::harness::{self, HarnessError, SweepConfig, TrainConfig};
use factorizephys::model::ArchConfig;
use factorizephys::nmf::{self, NmfConfig};
use factorizephys::signal;
use factorizephys::tensor::Tensor;
use serde_json::json;

#[derive(Parser)]
#[command(name = "factorizephys", version, about = "NMF attention rPPG toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model and write checkpoint, loss log, manifest and report.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[command(flatten)]
        arch: ArchFlags,
    },
    /// Evaluate a checkpoint on the held-out clips of a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        no_fsam: bool,
    },
    /// Write the rPPG estimate of a clip as CSV.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        clip: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 30.0)]
        fs: f64,
        #[arg(long)]
        no_fsam: bool,
    },
    /// Factorize a nonnegative CSV matrix into W, H and WH.
    Factorize {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        rank: usize,
        #[arg(long, default_value_t = 6)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Export cosine attention maps of a clip's embedding as PGM tiles.
    Attnmap {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        clip: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        no_fsam: bool,
    },
    /// Mapping ablation and rank x steps grid, one report per cell.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Args)]
struct ArchFlags {
    #[arg(long)]
    no_fsam: bool,
    #[arg(long)]
    rank: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    mapping: Option<MappingSpec>,
}

impl ArchFlags {
    fn apply(&self, arch: &mut ArchConfig) {
        if let Some(r) = self.rank {
            arch.fsam.nmf.rank = r;
        }
        if let Some(s) = self.steps {
            arch.fsam.nmf.steps = s;
        }
        if let Some(m) = self.mapping {
            arch.fsam.mapping = m;
        }
    }
}

/// Failure reported as a single JSON line on stderr.
struct Failure {
    kind: &'static str,
    message: String,
    code: u8,
}

impl Failure {
    fn new(kind: &'static str, message: impl ToString) -> Self {
        Self {
            kind,
            message: message.to_string(),
            code: 1,
        }
    }
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        let kind = match &e {
            HarnessError::Io { .. } => "io",
            HarnessError::Config(_) => "config",
            HarnessError::Checkpoint(_) => "checkpoint",
            HarnessError::NonFinite { .. } => "non_finite",
            HarnessError::Data(data::DataError::Io { .. }) => "io",
            HarnessError::Data(_) => "data",
            HarnessError::Model(_) => "shape",
            HarnessError::Signal(_) => "metrics",
        };
        Self::new(kind, e)
    }
}

impl From<data::DataError> for Failure {
    fn from(e: data::DataError) -> Self {
        HarnessError::from(e).into()
    }
}

type CmdResult = Result<serde_json::Value, Failure>;

fn read_toml<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, Failure> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = harness::read_text(p)?;
            toml::from_str(&text).map_err(|e| Failure::new("config", format!("{}: {}", p.display(), e.message())))
        }
    }
}

fn synth(config: Option<&Path>, out: &Path, seed: Option<u64>) -> CmdResult {
    let mut cfg: DatasetConfig = read_toml(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let index = data::write_dataset(&cfg, out)?;
    Ok(json!({
        "clips": index.clips.len(),
        "holdout": index.clips.iter().filter(|c| c.holdout).count(),
        "dir": out,
    }))
}

fn train(config: Option<&Path>, out: &Path, data: Option<PathBuf>, seed: Option<u64>, epochs: Option<usize>, flags: &ArchFlags) -> CmdResult {
    let mut cfg: TrainConfig = read_toml(config)?;
    if let Some(d) = data {
        cfg.data = d;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    if flags.no_fsam {
        cfg.use_fsam = false;
    }
    let mut arch = cfg.resolve_arch()?;
    flags.apply(&mut arch);
    let (manifest, _) = harness::train(&cfg, &arch, out)?;
    Ok(json!({
        "epoch_losses": manifest.epoch_losses,
        "checkpoint": manifest.checkpoint,
        "loss_log": manifest.loss_log,
        "report": manifest.report,
    }))
}

fn eval(checkpoint: &Path, data: &Path, out: &Path, no_fsam: bool) -> CmdResult {
    let report = harness::evaluate(checkpoint, data, !no_fsam)?;
    let stem = if out.extension().is_some() {
        out.with_extension("")
    } else {
        out.join(harness::REPORT_STEM)
    };
    if let Some(dir) = stem.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Failure::new("io", format!("{}: {e}", dir.display())))?;
    }
    report.write(&stem).map_err(|e| Failure::new("io", e))?;
    Ok(json!({
        "report": stem.with_extension("json"),
        "mae_hr": report.mae_hr.value,
        "macc": report.macc.value,
        "n_chunks": report.n_chunks,
    }))
}

fn infer(checkpoint: &Path, clip: &Path, out: &Path, fs: f64, no_fsam: bool) -> CmdResult {
    let (arch, params) = harness::read_checkpoint(checkpoint)?;
    let frames = Frames::read(clip)?;
    let csv = harness::infer_clip(&params, &arch, &frames, fs, !no_fsam)?;
    harness::write_text(out, &csv)?;
    Ok(json!({ "out": out, "samples": csv.lines().count() - 1 }))
}

fn parse_matrix(text: &str) -> Result<Tensor<f64>, Failure> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let row = line
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| Failure::new("config", format!("line {}: {e}", i + 1)))?;
        rows.push(row);
    }
    let n = rows.first().map_or(0, |r| r.len());
    if n == 0 || rows.iter().any(|r| r.len() != n) {
        return Err(Failure::new("config", "matrix must be non-empty with equal row lengths"));
    }
    let m = rows.len();
    Tensor::new(vec![m, n], rows.concat()).map_err(|e| Failure::new("shape", e))
}

fn matrix_csv(t: &Tensor<f64>) -> String {
    let n = t.shape()[1];
    t.data()
        .chunks(n)
        .map(|r| r.iter().map(|v| format!("{v:e}")).collect::<Vec<_>>().join(",") + "\n")
        .collect()
}

fn factorize(input: &Path, out: &Path, rank: usize, steps: usize, seed: u64) -> CmdResult {
    let v = parse_matrix(&harness::read_text(input)?)?;
    let cfg = NmfConfig {
        rank,
        steps,
        seed,
        ..Default::default()
    };
    let (fp, recon) = nmf::factorize(&v, &cfg).map_err(|e| match e {
        nmf::NmfError::Config(_) => Failure::new("config", e),
        _ => Failure::new("data", e),
    })?;
    let err = nmf::reconstruction_error(&v, &fp).map_err(|e| Failure::new("shape", e))?;
    harness::write_text(&out.join("W.csv"), &matrix_csv(&fp.w))?;
    harness::write_text(&out.join("H.csv"), &matrix_csv(&fp.h))?;
    harness::write_text(&out.join("V_hat.csv"), &matrix_csv(&recon))?;
    let norm = v.sq_norm();
    Ok(json!({
        "error": err,
        "relative_error": if norm > 0.0 { err / norm } else { err },
        "rank": rank,
        "steps": steps,
    }))
}

fn attnmap(checkpoint: &Path, clip: &Path, labels: &Path, out: &Path, no_fsam: bool) -> CmdResult {
    let (arch, params) = harness::read_checkpoint(checkpoint)?;
    let frames = Frames::read(clip)?;
    let labels = Labels::read(labels)?;
    let map = harness::attention_map(&params, &arch, &frames, &labels, !no_fsam)?;
    let files = signal::write_attention_map(&map, out, "attention").map_err(|e| Failure::new("io", e))?;
    let mean = map.data().iter().sum::<f64>() / map.len() as f64;
    Ok(json!({ "files": files.len(), "mean_similarity": mean, "dir": out }))
}

fn sweep(config: Option<&Path>, out: &Path, data: Option<PathBuf>, seed: Option<u64>) -> CmdResult {
    let mut cfg: SweepConfig = read_toml(config)?;
    if let Some(d) = data {
        cfg.train.data = d;
    }
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let arch = cfg.train.resolve_arch()?;
    let cells = harness::sweep(&cfg, &arch, out)?;
    Ok(json!({ "cells": cells.len(), "index": out.join("sweep.json") }))
}

fn run(cmd: Command) -> CmdResult {
    match cmd {
        Command::Synth { config, out, seed } => synth(config.as_deref(), &out, seed),
        Command::Train {
            config,
            out,
            data,
            seed,
            epochs,
            arch,
        } => train(config.as_deref(), &out, data, seed, epochs, &arch),
        Command::Eval {
            checkpoint,
            data,
            out,
            no_fsam,
        } => eval(&checkpoint, &data, &out, no_fsam),
        Command::Infer {
            checkpoint,
            clip,
            out,
            fs,
            no_fsam,
        } => infer(&checkpoint, &clip, &out, fs, no_fsam),
        Command::Factorize {
            input,
            out,
            rank,
            steps,
            seed,
        } => factorize(&input, &out, rank, steps, seed),
        Command::Attnmap {
            checkpoint,
            clip,
            labels,
            out,
            no_fsam,
        } => attnmap(&checkpoint, &clip, &labels, &out, no_fsam),
        Command::Sweep { config, out, data, seed } => sweep(config.as_deref(), &out, data, seed),
    }
}

fn fail(f: Failure) -> ExitCode {
    let line = json!({ "error": f.kind, "message": f.message.replace('\n', " ") });
    eprintln!("{line}");
    ExitCode::from(f.code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("usage error").trim_start_matches("error: ");
            return fail(Failure {
                kind: "usage",
                message: first.to_string(),
                code: 2,
            });
        }
    };
    match run(cli.cmd) {
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(f) => fail(f),
    }
}
