//! Command-line driver: `sgsr train | eval | infer | ablate`.
//!
//! Conventions shared by all subcommands:
//! - run settings live in a JSON config; `--override key=value` (dotted
//!   paths) and dedicated flags patch it, flags winning;
//! - relative paths inside a config resolve against the config file's
//!   directory, so a run directory stays portable;
//! - the fully resolved config (plus its SHA-256) is written to the output
//!   directory before any compute starts;
//! - exit codes: 0 success, 2 config/IO problem, 3 incompatible inputs,
//!   4 numeric failure.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use sgsr::checkpoint::{sha256_hex, Checkpoint};
use sgsr::data::{bicubic_upscale, load_png, save_png, Dataset, DatasetManifest};
use sgsr::metrics::EvalReport;
use sgsr::model::{ablation_grid, build_model, GaMode, Model, ModelConfig};
use sgsr::train::{TrainConfig, Trainer};
use sgsr::FeatureMap;

/// Everything a run needs, resolvable before compute starts.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    model: ModelConfig,
    train: TrainConfig,
    /// Manifest of training images (text: `hr [lr]` per line, or JSON).
    train_manifest: Option<PathBuf>,
    /// Manifest of evaluation images.
    eval_manifest: Option<PathBuf>,
    /// Where logs, checkpoints, reports, and the resolved config go.
    out_dir: Option<PathBuf>,
}

#[derive(Parser)]
#[command(
    name = "sgsr",
    version,
    about = "Subgraph-based single-image super-resolution"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model from a JSON run config.
    Train {
        /// Run config (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Patch a config field, e.g. `--override model.channels=32`.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Shorten the schedule to N iterations, repositioning the
        /// halving milestones at their default relative positions.
        #[arg(long)]
        total_iters: Option<u64>,
        /// Output directory (overrides `out_dir` in the config).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint (or a model-free baseline) against a manifest.
    Eval {
        /// Trained model snapshot; optional when `--baseline` is given.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Manifest of evaluation images.
        #[arg(long)]
        manifest: PathBuf,
        /// Upscaling factor; defaults to the checkpoint's factor.
        #[arg(long)]
        scale: Option<usize>,
        /// Score a reference path instead of a model.
        #[arg(long)]
        baseline: Option<Baseline>,
        /// Directory for the CSV report; omitted = CSV on stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Super-resolve one PNG with a trained checkpoint.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input PNG (8-bit RGB).
        #[arg(long)]
        input: PathBuf,
        /// Output PNG path.
        #[arg(long)]
        output: PathBuf,
    },
    /// Train and score every row of the component-ablation grid.
    Ablate {
        /// Run config (JSON); the model section is the full-model base.
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Baseline {
    /// Bicubic upscaling of the low-resolution input.
    Bicubic,
    /// The ground truth itself; a calibration path whose PSNR is infinite.
    Identity,
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Train { config, overrides, total_iters, out } => {
            cmd_train(&config, &overrides, total_iters, out.as_deref())
        }
        Cmd::Eval { checkpoint, manifest, scale, baseline, out } => {
            cmd_eval(checkpoint.as_deref(), &manifest, scale, baseline, out.as_deref())
        }
        Cmd::Infer { checkpoint, input, output } => cmd_infer(&checkpoint, &input, &output),
        Cmd::Ablate { config, overrides, out } => cmd_ablate(&config, &overrides, out.as_deref()),
    };
    if let Err(err) = result {
        eprintln!("error: {err:#}");
        std::process::exit(exit_code_for(&err));
    }
}

fn exit_code_for(err: &anyhow::Error) -> i32 {
    match err.downcast_ref::<sgsr::Error>() {
        Some(sgsr::Error::Incompatible(_))
        | Some(sgsr::Error::Shape(_))
        | Some(sgsr::Error::Dimension(_)) => 3,
        Some(sgsr::Error::Numeric(_)) => 4,
        _ => 2,
    }
}

/// Loads a run config, applies dotted-path overrides, validates, and
/// resolves its relative paths against the config file's directory.
fn load_run_config(path: &Path, overrides: &[String]) -> anyhow::Result<RunConfig> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let mut doc: serde_json::Value = serde_json::from_str(&text)
        .with_context(|| format!("parsing config {}", path.display()))?;
    for clause in overrides {
        apply_override(&mut doc, clause)?;
    }
    let mut cfg: RunConfig = serde_json::from_value(doc)
        .with_context(|| format!("interpreting config {}", path.display()))?;
    cfg.model.validate()?;
    cfg.train.validate()?;

    let base = path.parent().unwrap_or(Path::new("."));
    let anchor = |p: PathBuf| if p.is_absolute() { p } else { base.join(p) };
    cfg.train_manifest = cfg.train_manifest.map(anchor);
    cfg.eval_manifest = cfg.eval_manifest.map(anchor);
    cfg.out_dir = cfg.out_dir.map(anchor);
    Ok(cfg)
}

/// Sets `key=value` in a JSON document; the key is a dotted path and the
/// value is parsed as JSON, falling back to a plain string.
fn apply_override(doc: &mut serde_json::Value, clause: &str) -> anyhow::Result<()> {
    let (key, raw) = clause
        .split_once('=')
        .with_context(|| format!("override {clause:?} is not of the form key=value"))?;
    let value: serde_json::Value =
        serde_json::from_str(raw).unwrap_or(serde_json::Value::String(raw.to_string()));
    let mut cursor = doc;
    let parts: Vec<&str> = key.split('.').collect();
    let (last, parents) = parts.split_last().expect("split always yields one part");
    for part in parents {
        cursor = cursor
            .as_object_mut()
            .with_context(|| format!("override {key:?}: {part:?} is not an object"))?
            .entry(part.to_string())
            .or_insert_with(|| serde_json::Value::Object(serde_json::Map::new()));
    }
    cursor
        .as_object_mut()
        .with_context(|| format!("override {key:?}: target is not an object"))?
        .insert(last.to_string(), value);
    Ok(())
}

/// Writes the resolved config (with its own SHA-256) into the run
/// directory; every failed run stays diagnosable from this file.
fn write_resolved_config(cfg: &RunConfig, out_dir: &Path) -> anyhow::Result<PathBuf> {
    fs::create_dir_all(out_dir)
        .with_context(|| format!("creating output directory {}", out_dir.display()))?;
    let canonical = serde_json::to_string(cfg)?;
    let mut doc = serde_json::to_value(cfg)?;
    doc.as_object_mut()
        .expect("run config serializes to an object")
        .insert(
            "config_sha256".to_string(),
            serde_json::Value::String(sha256_hex(canonical.as_bytes())),
        );
    let path = out_dir.join("resolved_config.json");
    fs::write(&path, serde_json::to_string_pretty(&doc)?)
        .with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn cmd_train(
    config: &Path,
    overrides: &[String],
    total_iters: Option<u64>,
    out: Option<&Path>,
) -> anyhow::Result<()> {
    let mut cfg = load_run_config(config, overrides)?;
    if let Some(total) = total_iters {
        cfg.train.total_iters = total;
        cfg.train.milestones = TrainConfig::scaled_milestones(total);
        cfg.train.validate()?;
    }
    if let Some(dir) = out {
        cfg.out_dir = Some(dir.to_path_buf());
    }
    let out_dir = cfg
        .out_dir
        .clone()
        .context("no output directory: set out_dir in the config or pass --out")?;
    let manifest_path = cfg
        .train_manifest
        .clone()
        .context("config has no train_manifest")?;

    write_resolved_config(&cfg, &out_dir)?;
    let manifest = DatasetManifest::load(&manifest_path, cfg.model.scale)?;
    let data = Dataset::load(&manifest)?;
    let model = build_model(&cfg.model)?;
    let mut trainer = Trainer::new(model, cfg.train.clone())?;
    let summary = trainer.run(&data, cfg.train.total_iters, Some(&out_dir))?;
    println!(
        "trained {} iterations on {} images; final loss {:.6}; {} checkpoint(s) in {}",
        summary.iterations_run,
        data.pairs.len(),
        summary.final_loss,
        summary.checkpoints_written,
        out_dir.display()
    );
    Ok(())
}

/// Super-resolves every pair with the given model (or baseline) and
/// returns `(id, sr)` outputs aligned with the dataset order.
fn super_resolve_all(
    data: &Dataset,
    model: Option<&Model>,
    baseline: Option<Baseline>,
) -> anyhow::Result<Vec<(String, FeatureMap)>> {
    let mut out = Vec::with_capacity(data.pairs.len());
    for pair in &data.pairs {
        let sr = match (baseline, model) {
            (Some(Baseline::Bicubic), _) => bicubic_upscale(&pair.lr, data.scale)?,
            (Some(Baseline::Identity), _) => pair.hr.clone(),
            (None, Some(m)) => m.forward(&pair.lr)?,
            (None, None) => anyhow::bail!("either a checkpoint or --baseline is required"),
        };
        out.push((pair.id.clone(), sr));
    }
    Ok(out)
}

fn cmd_eval(
    checkpoint: Option<&Path>,
    manifest: &Path,
    scale: Option<usize>,
    baseline: Option<Baseline>,
    out: Option<&Path>,
) -> anyhow::Result<()> {
    let (model, scale) = match (baseline, checkpoint) {
        (Some(_), _) => {
            let s = scale.context("--scale is required for a baseline evaluation")?;
            (None, s)
        }
        (None, Some(path)) => {
            let ckpt = Checkpoint::load(path)?;
            let model = ckpt.into_model()?;
            let model_scale = model.cfg.scale;
            if let Some(s) = scale {
                if s != model_scale {
                    return Err(sgsr::Error::Incompatible(format!(
                        "requested scale {s} but checkpoint {} was trained for scale {model_scale}",
                        path.display()
                    ))
                    .into());
                }
            }
            (Some(model), model_scale)
        }
        (None, None) => anyhow::bail!("pass --checkpoint or --baseline"),
    };

    let manifest = DatasetManifest::load(manifest, scale)?;
    let data = Dataset::load(&manifest)?;
    let outputs = super_resolve_all(&data, model.as_ref(), baseline)?;
    let report = EvalReport::evaluate(
        outputs
            .iter()
            .zip(&data.pairs)
            .map(|((id, sr), pair)| (id.as_str(), sr, &pair.hr)),
        scale,
    )?;

    match out {
        Some(dir) => {
            fs::create_dir_all(dir)
                .with_context(|| format!("creating output directory {}", dir.display()))?;
            let path = dir.join("eval_report.csv");
            let mut file = fs::File::create(&path)?;
            report.write_csv(&mut file)?;
            println!(
                "wrote {}; mean PSNR {:.6} dB, mean SSIM {:.6} over {} image(s)",
                path.display(),
                report.mean_psnr,
                report.mean_ssim,
                report.rows.len()
            );
        }
        None => {
            let mut stdout = std::io::stdout().lock();
            report.write_csv(&mut stdout)?;
        }
    }
    Ok(())
}

fn cmd_infer(checkpoint: &Path, input: &Path, output: &Path) -> anyhow::Result<()> {
    let model = Checkpoint::load(checkpoint)?.into_model()?;
    let lr = load_png(input)?;
    let sr = model.forward(&lr)?;
    save_png(output, &sr)?;
    let (_, h, w) = lr.shape();
    let (_, sh, sw) = sr.shape();
    println!(
        "wrote {} ({h}x{w} -> {sh}x{sw}, x{})",
        output.display(),
        model.cfg.scale
    );
    Ok(())
}

fn ga_mode_name(mode: GaMode) -> &'static str {
    match mode {
        GaMode::Add => "add",
        GaMode::Concat => "concat",
        GaMode::Aggregation => "aggregation",
    }
}

fn cmd_ablate(config: &Path, overrides: &[String], out: Option<&Path>) -> anyhow::Result<()> {
    let mut cfg = load_run_config(config, overrides)?;
    if let Some(dir) = out {
        cfg.out_dir = Some(dir.to_path_buf());
    }
    let out_dir = cfg
        .out_dir
        .clone()
        .context("no output directory: set out_dir in the config or pass --out")?;
    let manifest_path = cfg
        .train_manifest
        .clone()
        .context("config has no train_manifest")?;

    write_resolved_config(&cfg, &out_dir)?;
    let manifest = DatasetManifest::load(&manifest_path, cfg.model.scale)?;
    let data = Dataset::load(&manifest)?;

    // identical configs across families (the full model appears in every
    // family) train once and share their scores
    let mut cache: HashMap<String, (f64, f64)> = HashMap::new();
    let mut families: Vec<(&'static str, Vec<String>)> = Vec::new();
    for run in ablation_grid(&cfg.model) {
        let key = serde_json::to_string(&run.config)?;
        let (mean_psnr, mean_ssim) = match cache.get(&key) {
            Some(&scores) => scores,
            None => {
                let model = build_model(&run.config)?;
                let mut trainer = Trainer::new(model, cfg.train.clone())?;
                trainer.run(&data, cfg.train.total_iters, None)?;
                let outputs = super_resolve_all(&data, Some(&trainer.model), None)?;
                let report = EvalReport::evaluate(
                    outputs
                        .iter()
                        .zip(&data.pairs)
                        .map(|((id, sr), pair)| (id.as_str(), sr, &pair.hr)),
                    data.scale,
                )?;
                let scores = (report.mean_psnr, report.mean_ssim);
                cache.insert(key, scores);
                scores
            }
        };
        let row = format!(
            "{},{},{},{},{},{},{:.6},{:.6}",
            run.label,
            run.config.use_cssb,
            run.config.use_sab,
            run.config.use_nss,
            run.config.use_sgb,
            ga_mode_name(run.config.ga_mode),
            mean_psnr,
            mean_ssim
        );
        match families.iter_mut().find(|(f, _)| *f == run.family) {
            Some((_, rows)) => rows.push(row),
            None => families.push((run.family, vec![row])),
        }
        println!("{} / {}: PSNR {:.4} dB, SSIM {:.6}", run.family, run.label, mean_psnr, mean_ssim);
    }

    for (family, rows) in &families {
        let path = out_dir.join(format!("ablation_{family}.csv"));
        let mut text =
            String::from("label,use_cssb,use_sab,use_nss,use_sgb,ga_mode,mean_psnr,mean_ssim\n");
        for row in rows {
            text.push_str(row);
            text.push('\n');
        }
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    }
    println!(
        "wrote {} family report(s) to {}",
        families.len(),
        out_dir.display()
    );
    Ok(())
}
