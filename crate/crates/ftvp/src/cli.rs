use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use ftvp_core::network::NetConfig;
use ftvp_core::raster::RgbImage;
use ftvp_core::synth::{ClassSet, DriveConfig, SynthConfig};
use ftvp_core::train::{evaluate, run_ablation, stitch_panorama, train, EvalReport, Suite, TrainSample};
use ftvp_core::verify::gradcheck_suite;
use rayon::prelude::*;
use serde_json::json;

use crate::artifacts::{write_ablation_csv, write_eval_report, write_json, write_loss_csv, RunManifest};
use crate::checkpoint::Checkpoint;
use crate::config::{resolve, to_toml, Layered, Overrides};
use crate::dataset::{export_dataset, import_dataset, Dataset};
use crate::error::{AppError, IoContext, Result};
use crate::{drive_samples, generate_samples, palette_for, png, predict, to_train};

#[derive(Debug, Parser)]
#[command(name = "ftvp", version, about = "Front-view image to top-view semantic layout")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Synth(SynthArgs),
    /// Train a model on a dataset.
    Train(TrainArgs),
    /// Evaluate a checkpoint.
    Eval(EvalArgs),
    /// Predict the top-view mask of one image.
    Infer(InferArgs),
    /// Train and evaluate an ablation suite.
    Ablate(AblateArgs),
    /// Predict every frame of a drive and stitch a global map.
    Stitch(StitchArgs),
    /// Finite-difference check of every gradient.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 10)]
    pub count: usize,
    /// 3 (background, road, vehicle) or 8.
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    /// Image side in pixels; masks are a quarter of it.
    #[arg(long, default_value_t = 256)]
    pub size: usize,
    /// Frames of one drive instead of independent scenes.
    #[arg(long)]
    pub drive: bool,
    #[arg(long)]
    pub out: PathBuf,
    /// Replace an existing dataset in `--out`.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML file with `[net]` and `[train]` sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Base layer: desk or paper-kitti.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub lambda_cycle: Option<f64>,
}

impl ConfigArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            preset: self.preset.clone(),
            seed: self.seed,
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr0: self.lr,
            lambda_cycle: self.lambda_cycle,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Validation dataset for best-checkpoint selection; defaults to the
    /// training data.
    #[arg(long)]
    pub val: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Directory for `eval.json`; the report always goes to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// accretion or kv-combos.
    #[arg(long)]
    pub suite: String,
    #[arg(long)]
    pub data: PathBuf,
    /// Held-out dataset; without it the last sixth of `--data` is held out.
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct StitchArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Pose-ordered frames, e.g. from `synth --drive`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of consecutive seeds to check.
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => synth(&a),
        Command::Train(a) => train_cmd(&a),
        Command::Eval(a) => eval_cmd(&a),
        Command::Infer(a) => infer_cmd(&a),
        Command::Ablate(a) => ablate_cmd(&a),
        Command::Stitch(a) => stitch_cmd(&a),
        Command::Gradcheck(a) => gradcheck_cmd(&a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).at(dir)
}

fn is_non_empty(dir: &Path) -> bool {
    fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(false)
}

fn synth(a: &SynthArgs) -> Result<()> {
    let classes = ClassSet::from_count(a.classes).map_err(|e| AppError::config(e.to_string()))?;
    if a.size == 0 || !a.size.is_multiple_of(4) {
        return Err(AppError::config(format!("--size {} must be a positive multiple of 4", a.size)));
    }
    if is_non_empty(&a.out) {
        if !a.force {
            return Err(AppError::config(format!("{} is not empty; pass --force to replace it", a.out.display())));
        }
        for entry in ["images", "masks"] {
            let p = a.out.join(entry);
            if p.is_dir() {
                fs::remove_dir_all(&p).at(&p)?;
            }
        }
    }
    create_dir(&a.out)?;
    let cfg = SynthConfig::for_image(a.size).with_classes(classes);
    let drive = a.drive.then(|| DriveConfig { frames: a.count, ..DriveConfig::default() });
    let samples = match &drive {
        Some(dc) => drive_samples(a.seed, &cfg, dc)?,
        None => generate_samples(a.seed, a.count, &cfg)?,
    };
    let manifest = export_dataset(&samples, &cfg, a.seed, drive.as_ref(), &a.out)?;
    println!("{:<12} {:>9}", "class", "share %");
    for (p, f) in manifest.palette.iter().zip(&manifest.class_frequencies) {
        println!("{:<12} {:>9.3}", p.name, 100.0 * f);
    }
    let config = json!({ "synth": cfg, "count": a.count, "drive": drive });
    let mut run = RunManifest::new("synth", config, Some(a.seed));
    for out in ["manifest.json", "poses.csv", "images/", "masks/"] {
        run.output(out);
    }
    run.finish(&a.out)?;
    println!("wrote {} samples to {}", samples.len(), a.out.display());
    Ok(())
}

/// Fill in input size and class count from the dataset unless the config
/// file pinned them, then check the two agree.
fn adopt_dataset(layered: &mut Layered, data: &Dataset) -> Result<()> {
    let m = &data.manifest;
    let pinned_size = layered.file_sets("net", "input_size");
    let pinned_classes = layered.file_sets("net", "num_classes");
    let net = &mut layered.config.net;
    if !pinned_size {
        net.input_size = m.camera.image_size;
    }
    if !pinned_classes {
        net.num_classes = m.num_classes();
    }
    check_compatible(&layered.config.net, m)?;
    layered.config.validate()
}

fn check_compatible(net: &NetConfig, m: &crate::dataset::Manifest) -> Result<()> {
    if net.input_size != m.camera.image_size {
        return Err(AppError::config(format!(
            "dataset images are {0}x{0} but net.input_size is {1}; remove input_size from the config or set it to {0}",
            m.camera.image_size, net.input_size
        )));
    }
    if net.num_classes != m.num_classes() {
        return Err(AppError::config(format!(
            "dataset has {} classes but net.num_classes is {}",
            m.num_classes(),
            net.num_classes
        )));
    }
    if net.output_side() != m.grid.side {
        return Err(AppError::config(format!(
            "dataset masks are {0}x{0} but the network outputs {1}x{1}",
            m.grid.side,
            net.output_side()
        )));
    }
    Ok(())
}

fn data_matches(net: &NetConfig, m: &crate::dataset::Manifest) -> Result<()> {
    check_compatible(net, m).map_err(|e| match e {
        AppError::Config(msg) => AppError::Data(format!("checkpoint and dataset disagree: {msg}")),
        other => other,
    })
}

fn train_cmd(a: &TrainArgs) -> Result<()> {
    let mut layered = resolve(a.cfg.config.as_deref(), &a.cfg.overrides())?;
    let data = import_dataset(&a.data)?;
    adopt_dataset(&mut layered, &data)?;
    let val = match &a.val {
        Some(dir) => {
            let v = import_dataset(dir)?;
            check_compatible(&layered.config.net, &v.manifest)?;
            Some(to_train(&v.samples))
        }
        None => None,
    };
    let cfg = layered.config.clone();
    create_dir(&a.out)?;
    fs::write(a.out.join("config.toml"), to_toml(&cfg)).at(&a.out.join("config.toml"))?;
    let mut run =
        RunManifest::new("train", serde_json::to_value(&cfg).expect("config serializes"), Some(cfg.train.seed));
    run.output("config.toml");

    let train_set = to_train(&data.samples);
    let val_set: &[TrainSample] = val.as_deref().unwrap_or(&train_set);
    let mut periodic = Vec::new();
    let mut write_error = None;
    let out = train(&cfg.net, &cfg.train, &train_set, Some(val_set), &mut |e| {
        println!(
            "epoch {:>3}  loss {:.5}  cycle {:.5}  lr {:.3e}{}",
            e.record.epoch,
            e.record.total,
            e.record.cycle_total,
            e.record.lr,
            e.eval.map_or(String::new(), |r| format!("  mIoU {:.2}", r.miou))
        );
        if e.checkpoint_due {
            let name = format!("epoch-{:04}.ckpt", e.record.epoch);
            if let Err(err) = (Checkpoint { net: cfg.net.clone(), params: e.params.clone() }).save(&a.out.join(&name)) {
                let msg = err.to_string();
                write_error = Some(err);
                return Err(ftvp_core::Error::Interrupted(msg));
            }
            periodic.push(name);
        }
        Ok(())
    });
    let out = match (out, write_error) {
        (_, Some(err)) => return Err(err),
        (out, None) => out?,
    };
    periodic.into_iter().for_each(|p| run.output(p));
    write_loss_csv(&a.out.join("loss.csv"), &out.history)?;
    run.output("loss.csv");
    Checkpoint { net: cfg.net.clone(), params: out.params.clone() }.save(&a.out.join("final.ckpt"))?;
    run.output("final.ckpt");
    if let Some(best) = &out.best {
        Checkpoint { net: cfg.net.clone(), params: best.params.clone() }.save(&a.out.join("best.ckpt"))?;
        run.output("best.ckpt");
        println!("best mIoU {:.2} at epoch {}", best.miou, best.epoch);
    }
    run.finish(&a.out)?;
    Ok(())
}

fn print_report(r: &EvalReport) {
    println!("{}", serde_json::to_string_pretty(r).expect("report serializes"));
}

fn eval_cmd(a: &EvalArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let data = import_dataset(&a.data)?;
    data_matches(&ckpt.net, &data.manifest)?;
    let report = evaluate(&ckpt.params, &ckpt.net, &to_train(&data.samples))?;
    print_report(&report);
    if let Some(out) = &a.out {
        create_dir(out)?;
        write_eval_report(&out.join("eval.json"), &report)?;
        let config = json!({ "ckpt": a.ckpt, "data": a.data, "net": ckpt.net });
        let mut run = RunManifest::new("eval", config, None);
        run.output("eval.json");
        run.finish(out)?;
    }
    Ok(())
}

fn infer_cmd(a: &InferArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let image = png::read_rgb(&a.image)?;
    let mask = predict(&ckpt.params, &ckpt.net, &image)?;
    create_dir(&a.out)?;
    png::write_mask(&a.out.join("mask.png"), &mask)?;
    png::write_rgb(&a.out.join("mask_color.png"), &RgbImage::colorize(&mask, &palette_for(ckpt.net.num_classes)))?;
    let mut run = RunManifest::new("infer", json!({ "ckpt": a.ckpt, "image": a.image, "net": ckpt.net }), None);
    run.output("mask.png");
    run.output("mask_color.png");
    run.finish(&a.out)?;
    println!("{}x{} mask written to {}", mask.width(), mask.height(), a.out.display());
    Ok(())
}

fn ablate_cmd(a: &AblateArgs) -> Result<()> {
    let suite = Suite::parse(&a.suite)
        .map_err(|_| AppError::config(format!("unknown suite `{}`; expected accretion or kv-combos", a.suite)))?;
    let mut layered = resolve(a.cfg.config.as_deref(), &a.cfg.overrides())?;
    let data = import_dataset(&a.data)?;
    adopt_dataset(&mut layered, &data)?;
    let cfg = layered.config.clone();
    let all = to_train(&data.samples);
    let (train_set, test_set) = match &a.test {
        Some(dir) => {
            let t = import_dataset(dir)?;
            check_compatible(&cfg.net, &t.manifest)?;
            (all, to_train(&t.samples))
        }
        None => {
            if all.len() < 2 {
                return Err(AppError::data("need at least two samples to hold some out"));
            }
            let cut = all.len() - (all.len() / 6).max(1);
            (all[..cut].to_vec(), all[cut..].to_vec())
        }
    };
    create_dir(&a.out)?;
    fs::write(a.out.join("config.toml"), to_toml(&cfg)).at(&a.out.join("config.toml"))?;
    let rows = run_ablation(suite, &cfg.net, &cfg.train, &train_set, &test_set, &mut |r| {
        println!("{:<28} mIoU {:>6.2}  mAP {:>6.2}", r.label, r.miou, r.map);
        Ok(())
    })?;
    write_ablation_csv(&a.out.join("ablation.csv"), suite, &rows)?;
    let config =
        json!({ "suite": suite.name(), "run": cfg, "train_samples": train_set.len(), "test_samples": test_set.len() });
    let mut run = RunManifest::new("ablate", config, Some(cfg.train.seed));
    run.output("config.toml");
    run.output("ablation.csv");
    run.finish(&a.out)?;
    Ok(())
}

fn stitch_cmd(a: &StitchArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let data = import_dataset(&a.data)?;
    data_matches(&ckpt.net, &data.manifest)?;
    let grid = data.manifest.grid;
    let predicted =
        data.samples.par_iter().map(|s| predict(&ckpt.params, &ckpt.net, &s.image)).collect::<Result<Vec<_>>>()?;
    let poses: Vec<_> = data.samples.iter().map(|s| s.pose).collect();
    let truth: Vec<_> = data.samples.iter().map(|s| s.mask.clone()).collect();
    let pano = stitch_panorama(&predicted, &poses, &grid)?;
    let reference = stitch_panorama(&truth, &poses, &grid)?;
    let observed = pano.observed();
    let agree = pano
        .mask
        .data()
        .iter()
        .zip(reference.mask.data())
        .filter(|(p, t)| p == t && **t != ftvp_core::raster::UNOBSERVED)
        .count();
    create_dir(&a.out)?;
    let colors = palette_for(ckpt.net.num_classes);
    png::write_mask(&a.out.join("panorama.png"), &pano.mask)?;
    png::write_rgb(&a.out.join("panorama_color.png"), &RgbImage::colorize(&pano.mask, &colors))?;
    png::write_rgb(&a.out.join("panorama_truth_color.png"), &RgbImage::colorize(&reference.mask, &colors))?;
    let summary = json!({
        "frames": data.samples.len(),
        "origin": pano.origin,
        "resolution": pano.resolution,
        "width": pano.mask.width(),
        "height": pano.mask.height(),
        "observed_cells": observed,
        "agreement": if observed == 0 { 0.0 } else { agree as f64 / observed as f64 },
    });
    write_json(&a.out.join("stitch.json"), &summary)?;
    let mut run = RunManifest::new("stitch", json!({ "ckpt": a.ckpt, "data": a.data, "net": ckpt.net }), None);
    for o in ["panorama.png", "panorama_color.png", "panorama_truth_color.png", "stitch.json"] {
        run.output(o);
    }
    run.finish(&a.out)?;
    println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
    Ok(())
}

fn gradcheck_cmd(a: &GradcheckArgs) -> Result<()> {
    let mut failed = Vec::new();
    println!("{:<24} {:>5} {:>12} {:>9}", "case", "seed", "max rel err", "tol");
    for seed in a.seed..a.seed + a.seeds.max(1) {
        for case in gradcheck_suite(seed)? {
            let status = if case.passed() { "ok" } else { "FAIL" };
            println!(
                "{:<24} {:>5} {:>12.3e} {:>9.0e} {status}",
                case.name,
                seed,
                case.report.max_rel_error,
                case.tolerance()
            );
            if !case.passed() {
                failed.push(format!("{} (seed {seed})", case.name));
            }
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(AppError::Numeric(format!("gradient check failed: {}", failed.join(", "))))
    }
}
