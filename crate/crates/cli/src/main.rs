//! `fse`: synthesize shadow pairs, train, evaluate, restore images and
//! tabulate reports.
//!
//! Exit codes: 0 success, 2 usage or validation error, 3 numerical failure.

mod run_config;

use std::fs::{self, File};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fse_core::checkpoint::CheckpointBundle;
use fse_core::imaging::{
    load_image, load_mask, load_paired_dataset, resize_image, save_image, save_mask, ImageTensor,
};
use fse_core::metrics::{render_table, MetricReport};
use fse_core::perceptual::{resolve_backend, FeatureExtractor};
use fse_core::pipeline::fse_infer;
use fse_core::synth::{procedural_face, sample_spec, synthesize_pair, Hardness, ShadowSpec};
use fse_core::train::{evaluate_with, LossRecord, Trainer};
use fse_core::FseError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use run_config::RunConfigFile;
use serde_json::json;

/// Environment variable naming the default output root.
const OUTPUT_ROOT_ENV: &str = "FSE_OUTPUT_ROOT";
const DEFAULT_OUTPUT_ROOT: &str = "fse-output";
const IMAGE_EXTS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Parser)]
#[command(name = "fse", version, about = "Facial shadow removal toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a paired dataset by casting synthetic shadows on clean faces.
    Synth(SynthArgs),
    /// Train from a TOML run configuration.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a paired dataset.
    Eval(EvalArgs),
    /// Remove shadows from images.
    Infer(InferArgs),
    /// Render metric reports as an aligned table.
    Report(ReportArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Directory of shadow-free images.
    #[arg(long, required_unless_present = "procedural")]
    clean: Option<PathBuf>,
    /// Use this many procedurally drawn faces instead of `--clean`.
    #[arg(long, conflicts_with = "clean")]
    procedural: Option<usize>,
    /// Side length of procedural faces.
    #[arg(long, default_value_t = 64)]
    size: usize,
    /// Shadow variants per clean image.
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Continue from this checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Feature-extractor file, or `fallback` for the random-feature proxy.
    #[arg(long)]
    perceptual_backend: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Paired dataset root (shadow/, target/).
    #[arg(long)]
    data: PathBuf,
    /// Resize every pair to this square size before restoring.
    #[arg(long)]
    resolution: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    perceptual_backend: Option<String>,
    /// Also write the predicted masks.
    #[arg(long)]
    save_mask: bool,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Image files or directories of images.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Initial shadow mask (single input only); zeros when absent.
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long)]
    resolution: Option<usize>,
    #[arg(long)]
    save_mask: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Report files, optionally labelled `METHOD/DATASET=PATH`. Unlabelled
    /// files use the parent directory as method and the stem as dataset.
    #[arg(required = true)]
    reports: Vec<String>,
    /// Also write the table here.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Report(a) => cmd_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &FseError) -> u8 {
    match e {
        FseError::Numeric(_) | FseError::NonFiniteLoss { .. } | FseError::Tensor(_) => 3,
        _ => 2,
    }
}

type Result<T> = fse_core::Result<T>;

fn io_err(path: &Path, e: std::io::Error) -> FseError {
    FseError::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| io_err(path, e))
}

/// `--out`, else `$FSE_OUTPUT_ROOT/<command>`, else `./fse-output/<command>`.
fn output_dir(flag: Option<PathBuf>, command: &str) -> PathBuf {
    flag.unwrap_or_else(|| {
        let root = std::env::var_os(OUTPUT_ROOT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT));
        root.join(command)
    })
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTS.contains(&e.to_ascii_lowercase().as_str()))
}

fn stem(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Image files directly inside `dir`, sorted by name.
fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = fs::read_dir(dir).map_err(|e| io_err(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let p = entry.map_err(|e| io_err(dir, e))?.path();
        if p.is_file() && is_image(&p) {
            files.push(p);
        }
    }
    files.sort();
    Ok(files)
}

fn backend(selector: Option<&str>) -> Result<Box<dyn FeatureExtractor>> {
    let b = resolve_backend(selector, true)?;
    if b.is_proxy() {
        log::warn!("perceptual distance uses the random-feature proxy, not a pretrained network");
    }
    Ok(b)
}

// ---------------------------------------------------------------------------
// synth

/// Text histogram of `values` over `bins` equal cells spanning `[lo, hi]`.
fn histogram(title: &str, values: &[f64], lo: f64, hi: f64, bins: usize) -> String {
    let mut counts = vec![0usize; bins];
    for &v in values {
        let i = (((v - lo) / (hi - lo)) * bins as f64).floor().clamp(0.0, (bins - 1) as f64);
        counts[i as usize] += 1;
    }
    let width = (hi - lo) / bins as f64;
    let mut out = format!("{title}\n");
    for (i, c) in counts.iter().enumerate() {
        let a = lo + i as f64 * width;
        out.push_str(&format!("  [{:>6.2}, {:>6.2}) {:>5} {}\n", a, a + width, c, "#".repeat(*c)));
    }
    out
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    if a.count == 0 {
        return Err(FseError::Config("count must be positive".into()));
    }
    let mut clean: Vec<(String, ImageTensor)> = Vec::new();
    match (&a.clean, a.procedural) {
        (Some(dir), _) => {
            if !dir.is_dir() {
                return Err(FseError::Config(format!(
                    "clean image directory {} does not exist",
                    dir.display()
                )));
            }
            let files = list_images(dir)?;
            if files.is_empty() {
                return Err(FseError::Config(format!("no images found in {}", dir.display())));
            }
            for f in files {
                clean.push((stem(&f), load_image(&f)?));
            }
        }
        (None, Some(0)) => return Err(FseError::Config("procedural count must be positive".into())),
        (None, Some(n)) => {
            for i in 0..n {
                clean.push((format!("face{i:04}"), procedural_face(a.seed.wrapping_add(i as u64), a.size)?));
            }
        }
        (None, None) => unreachable!("clap requires --clean or --procedural"),
    }

    let out = output_dir(a.out, "synth");
    for sub in ["shadow", "target", "mask", "spec"] {
        create_dir(&out.join(sub))?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut specs: Vec<ShadowSpec> = Vec::new();
    for (name, img) in &clean {
        let (_, _, h, w) = img.dims();
        for k in 0..a.count {
            let spec = sample_spec(rng.gen(), (h, w))?;
            let id = format!("{name}_{k:03}");
            let pair = synthesize_pair(img, &spec, &id)?;
            save_image(&pair.shadow, &out.join("shadow").join(format!("{id}.png")))?;
            save_image(&pair.target, &out.join("target").join(format!("{id}.png")))?;
            if let Some(m) = &pair.mask {
                save_mask(m, &out.join("mask").join(format!("{id}.png")))?;
            }
            let record = json!({"id": id, "source": name, "size": [h, w], "spec": spec});
            let text = serde_json::to_string_pretty(&record)
                .map_err(|e| FseError::Format(format!("cannot encode spec `{id}`: {e}")))?;
            write_file(&out.join("spec").join(format!("{id}.json")), &text)?;
            specs.push(spec);
        }
    }

    let opacities: Vec<f64> = specs.iter().map(|s| s.opacity).collect();
    let feathers: Vec<f64> = specs.iter().map(|s| s.feather_radius).collect();
    let hard = specs.iter().filter(|s| s.hardness == Hardness::Hard).count();
    println!("wrote {} pairs to {}", specs.len(), out.display());
    println!("hardness: {hard} hard, {} soft", specs.len() - hard);
    print!("{}", histogram("opacity", &opacities, 0.15, 0.45, 6));
    print!("{}", histogram("feather radius (px)", &feathers, 5.0, 50.0, 9));
    Ok(())
}

// ---------------------------------------------------------------------------
// train

/// Keeps the records of steps `1..=keep` from an existing loss log.
fn truncate_log(path: &Path, keep: usize) -> Result<Vec<String>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut lines = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| io_err(path, e))?;
        let rec = LossRecord::parse(&line)?;
        if rec.step <= keep {
            lines.push(line);
        }
    }
    Ok(lines)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg = RunConfigFile::load(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    let out = a.out.or(cfg.output.clone()).unwrap_or_else(|| output_dir(None, "train"));
    create_dir(&out)?;
    let selector = a.perceptual_backend.or(cfg.perceptual_backend.clone());
    let backend = backend(selector.as_deref())?;
    let data = load_paired_dataset(&cfg.data.train_dir, cfg.data.manifest.as_deref())?;
    if data.is_empty() {
        return Err(FseError::Config(format!(
            "training dataset {} is empty",
            cfg.data.train_dir.display()
        )));
    }

    let log_path = out.join("loss.log");
    let mut trainer = match &a.resume {
        Some(path) => {
            let bundle = CheckpointBundle::load(path)?;
            if bundle.fse_config != cfg.model {
                log::warn!("model settings in {} differ from the checkpoint; the checkpoint wins", a.config.display());
            }
            let mut t = Trainer::resume(bundle, backend.as_ref())?;
            t.set_total_steps(cfg.train.total_steps)?;
            log::info!("resuming at step {} of {}", t.step_count(), cfg.train.total_steps);
            t
        }
        None => Trainer::new(cfg.model.clone(), cfg.train.clone(), backend.as_ref())?,
    };
    let kept = truncate_log(&log_path, trainer.step_count())?;
    let mut log_file = File::create(&log_path).map_err(|e| io_err(&log_path, e))?;
    for line in &kept {
        writeln!(log_file, "{line}").map_err(|e| io_err(&log_path, e))?;
    }
    let resolved = json!({
        "profile": cfg.profile,
        "model": cfg.model,
        "train": trainer.config(),
        "data": cfg.data.train_dir,
        "pairs": data.len(),
        "perceptual_backend": backend.name(),
    });
    write_file(&out.join("run.json"), &serde_json::to_string_pretty(&resolved).unwrap_or_default())?;

    let ckpt_dir = out.join("checkpoints");
    let every = trainer.config().checkpoint_every;
    let total = trainer.config().total_steps;
    trainer.run(&data, |rec, t| {
        writeln!(log_file, "{rec}").map_err(|e| io_err(&log_path, e))?;
        log_file.flush().map_err(|e| io_err(&log_path, e))?;
        if rec.step % 50 == 0 || rec.step == total {
            log::info!("step {}/{total}: loss {:.5} (lr {:.2e})", rec.step, rec.total, rec.lr);
        }
        if every > 0 && rec.step % every == 0 {
            create_dir(&ckpt_dir)?;
            t.checkpoint()?.save(&ckpt_dir.join(format!("step-{:06}.fse", rec.step)))?;
        }
        Ok(())
    })?;
    let path = out.join("checkpoint.fse");
    trainer.into_checkpoint().save(&path)?;
    println!("checkpoint written to {}", path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// eval

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let ckpt = CheckpointBundle::load(&a.checkpoint)?;
    let data = load_paired_dataset(&a.data, None)?;
    if data.is_empty() {
        return Err(FseError::Config(format!("no pairs found in {}", a.data.display())));
    }
    let backend = backend(a.perceptual_backend.as_deref())?;
    let out = output_dir(a.out, "eval");
    let restored_dir = out.join("restored");
    create_dir(&restored_dir)?;
    if a.save_mask {
        create_dir(&out.join("mask"))?;
    }
    let report = evaluate_with(
        &ckpt.params,
        &ckpt.fse_config,
        &ckpt.train_config.stages,
        &data,
        a.resolution,
        backend.as_ref(),
        |pair, o| {
            save_image(&o.restored, &restored_dir.join(format!("{}.png", pair.id)))?;
            if a.save_mask {
                save_mask(&o.mask, &out.join("mask").join(format!("{}.png", pair.id)))?;
            }
            Ok(())
        },
    )?;
    let text = report.to_text();
    write_file(&out.join("report.txt"), &text)?;
    print!("{text}");
    if report.proxy {
        println!("note: lpips_proxy comes from the random-feature fallback extractor");
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// infer

fn collect_inputs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            files.extend(list_images(p)?);
        } else {
            files.push(p.clone());
        }
    }
    Ok(files)
}

fn cmd_infer(a: InferArgs) -> Result<()> {
    let ckpt = CheckpointBundle::load(&a.checkpoint)?;
    let files = collect_inputs(&a.inputs)?;
    if files.is_empty() {
        return Err(FseError::Config("no input images found".into()));
    }
    if a.mask.is_some() && files.len() != 1 {
        return Err(FseError::Config("--mask needs exactly one input image".into()));
    }
    if a.resolution == Some(0) {
        return Err(FseError::Config("resolution must be positive".into()));
    }
    let out = output_dir(a.out, "infer");
    create_dir(&out)?;
    for f in &files {
        let img = load_image(f)?;
        let img = match a.resolution {
            Some(r) => resize_image(&img, r, r)?,
            None => img,
        };
        let mask = a.mask.as_deref().map(load_mask).transpose()?;
        let o = fse_infer(&ckpt.params, &ckpt.fse_config, &img, mask.as_ref(), &ckpt.train_config.stages)?;
        let name = stem(f);
        save_image(&o.restored, &out.join(format!("{name}.png")))?;
        if a.save_mask {
            save_mask(&o.mask, &out.join(format!("{name}_mask.png")))?;
        }
    }
    println!("restored {} image(s) into {}", files.len(), out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// report

fn parse_report_arg(arg: &str) -> Result<(String, String, PathBuf)> {
    if let Some((label, path)) = arg.split_once('=') {
        let (m, d) = label.split_once('/').ok_or_else(|| {
            FseError::Config(format!("report label `{label}` must look like METHOD/DATASET"))
        })?;
        return Ok((m.to_string(), d.to_string(), PathBuf::from(path)));
    }
    let path = PathBuf::from(arg);
    let method = path
        .parent()
        .and_then(|p| p.file_name())
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "method".into());
    Ok((method, stem(&path), path))
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    let mut rows = Vec::new();
    for arg in &a.reports {
        let (method, dataset, path) = parse_report_arg(arg)?;
        let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
        let report = MetricReport::from_text(&text)
            .map_err(|e| FseError::Format(format!("{}: {e}", path.display())))?;
        rows.push((method, dataset, report));
    }
    let table = render_table(&rows);
    print!("{table}");
    if let Some(path) = a.out {
        write_file(&path, &table)?;
    }
    Ok(())
}
