use std::io::{self, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use image::codecs::png::{CompressionType, FilterType, PngEncoder};
use image::{ExtendedColorType, ImageEncoder};

use uadseg::model::{load_checkpoint, ModelState};
use uadseg::pipeline::{
    evaluate_predictions, generate_dataset, is_volume_dir, overlay_rgb, reconstruct_case, run_experiment,
    segment_cases, train_model, write_report, Manifest, PipelineConfig, Split,
};
use uadseg::postproc::{serve_refiner, BuiltinRefiner, RefinerMode};
use uadseg::volume::{load_labels, load_volume, save_volume};
use uadseg::{Error, Modality, Result};

#[derive(Parser)]
#[command(name = "uadseg", version, about = "Label-free brain anomaly segmentation")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Run configuration (JSON). Without it the toy preset is used.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the configured seed (data, initialisation, training, prompts).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the refinement mode.
    #[arg(long, global = true, value_enum)]
    refiner: Option<RefinerArg>,
    /// Command line of an external refiner, split like a shell would.
    #[arg(long, global = true)]
    refiner_cmd: Option<String>,
    /// Override the worker count (0 = one per CPU).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum RefinerArg {
    Off,
    Builtin,
    External,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a seeded phantom dataset.
    Phantom {
        /// Defaults to `paths.dataset`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        n_train: Option<usize>,
        #[arg(long)]
        n_val: Option<usize>,
        /// Healthy test phantoms.
        #[arg(long)]
        n_healthy: Option<usize>,
        /// Tumour test phantoms.
        #[arg(long)]
        n_tumor: Option<usize>,
        #[arg(long)]
        force: bool,
    },
    /// Train the autoencoder on the healthy slices of a dataset.
    Train {
        /// Defaults to `paths.dataset`.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Defaults to `paths.checkpoint`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Continue from the checkpoint already in `--checkpoint`.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Write the normalised reconstruction of one case.
    Reconstruct {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        case: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Segment a case directory, or every test case of a dataset.
    Segment {
        /// Defaults to `paths.checkpoint`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// A case directory, a dataset with a manifest, or a directory of
        /// cases. Defaults to `paths.dataset`.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Defaults to `paths.predictions`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the six intermediate stages under `<out>/debug/<case>`.
        #[arg(long)]
        debug: bool,
        #[arg(long)]
        force: bool,
    },
    /// Score predictions against ground truth.
    Evaluate {
        /// Defaults to `paths.predictions`.
        #[arg(long)]
        pred: Option<PathBuf>,
        /// Defaults to `paths.dataset`.
        #[arg(long)]
        gt: Option<PathBuf>,
        /// Write report.json and report.txt here (default `paths.report`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render label overlays as PNG, one per slice.
    Overlay {
        #[arg(long)]
        case: PathBuf,
        /// Prediction directory (labels of this case).
        #[arg(long)]
        pred: Option<PathBuf>,
        /// Ground-truth directory; rendered to the right of the prediction.
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Half-open slice range `start:end`; defaults to every slice.
        #[arg(long)]
        z: Option<String>,
        #[arg(long, default_value = "t2f")]
        modality: String,
    },
    /// Full phantom experiment: data, training, segmentation, evaluation.
    E2e {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        debug: bool,
        #[arg(long)]
        force: bool,
    },
    /// Serve the built-in refiner over the line protocol on stdin/stdout.
    #[command(hide = true)]
    ServeRefiner {
        #[arg(long, default_value_t = 1.0)]
        tolerance: f64,
    },
}

fn load_config(g: &Global) -> Result<PipelineConfig> {
    let mut cfg = match &g.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::toy(),
    };
    if let Some(seed) = g.seed {
        cfg.seed = seed;
        cfg.train.seed = seed;
    }
    if let Some(cmd) = &g.refiner_cmd {
        cfg.postproc.refiner_cmd =
            shlex::split(cmd).ok_or_else(|| Error::InvalidConfig(format!("cannot parse --refiner-cmd `{cmd}`")))?;
    }
    if let Some(r) = g.refiner {
        cfg.postproc.refiner = match r {
            RefinerArg::Off => RefinerMode::Off,
            RefinerArg::Builtin => RefinerMode::Builtin,
            RefinerArg::External => RefinerMode::External,
        };
    }
    if let Some(w) = g.workers {
        cfg.workers = w;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn checkpoint_state(cfg: &PipelineConfig, dir: &Path) -> Result<ModelState> {
    let state = load_checkpoint(dir)?;
    if state.config != cfg.model {
        log::warn!("checkpoint model differs from the configured model; using the checkpoint's");
    }
    Ok(state)
}

fn case_name(dir: &Path) -> Result<String> {
    dir.canonicalize()
        .ok()
        .and_then(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .ok_or_else(|| Error::Data(format!("cannot name case directory {}", dir.display())))
}

/// Dataset root and case names selected by a `--input` path.
fn select_cases(input: &Path) -> Result<(PathBuf, Vec<String>)> {
    if is_volume_dir(input) {
        let root = input
            .canonicalize()
            .map_err(|e| Error::Data(format!("{}: {e}", input.display())))?;
        let parent = root.parent().unwrap_or(Path::new("/")).to_path_buf();
        return Ok((parent, vec![case_name(input)?]));
    }
    if let Ok(m) = Manifest::load(input) {
        let cases = m.split(Split::Test).iter().map(|c| c.name.clone()).collect();
        return Ok((input.to_path_buf(), cases));
    }
    let mut cases = Vec::new();
    for entry in std::fs::read_dir(input).map_err(|e| Error::Data(format!("{}: {e}", input.display())))? {
        let entry = entry.map_err(|e| Error::Data(format!("{}: {e}", input.display())))?;
        if is_volume_dir(&entry.path()) {
            cases.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    cases.sort();
    if cases.is_empty() {
        return Err(Error::Empty(format!("no case volumes under {}", input.display())));
    }
    Ok((input.to_path_buf(), cases))
}

fn parse_z_range(spec: Option<&str>, depth: usize) -> Result<std::ops::Range<usize>> {
    let Some(spec) = spec else { return Ok(0..depth) };
    let bad = || {
        Error::InvalidConfig(format!(
            "bad slice range `{spec}` (expected start:end within 0..{depth})"
        ))
    };
    let (a, b) = spec.split_once(':').ok_or_else(bad)?;
    let a: usize = if a.is_empty() { 0 } else { a.parse().map_err(|_| bad())? };
    let b: usize = if b.is_empty() {
        depth
    } else {
        b.parse().map_err(|_| bad())?
    };
    if a >= b || b > depth {
        return Err(bad());
    }
    Ok(a..b)
}

fn write_png(path: &Path, rgb: &[u8], w: usize, h: usize) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    PngEncoder::new_with_quality(BufWriter::new(file), CompressionType::Default, FilterType::Adaptive)
        .write_image(rgb, w as u32, h as u32, ExtendedColorType::Rgb8)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn overlay(
    case: &Path,
    pred: Option<&Path>,
    gt: Option<&Path>,
    out: &Path,
    z: Option<&str>,
    modality: &str,
) -> Result<usize> {
    let vol = load_volume(case)?;
    let m: Modality = modality.parse()?;
    let base = vol.modality(m)?;
    let dims = vol.dims();
    let (lo, hi) = base.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    let pred = pred.map(load_labels).transpose()?;
    let gt = gt.map(load_labels).transpose()?;
    for l in pred.iter().chain(gt.iter()) {
        if l.dims() != dims {
            return Err(Error::Data("label volume does not match the case volume".into()));
        }
    }
    let range = parse_z_range(z, dims.d)?;
    std::fs::create_dir_all(out).map_err(|e| Error::Data(format!("{}: {e}", out.display())))?;
    let panels = if gt.is_some() { 2 } else { 1 };
    let width = dims.w * panels;
    let mut written = 0;
    for z in range {
        let plane = &base[z * dims.plane()..(z + 1) * dims.plane()];
        let left = overlay_rgb(plane, pred.as_ref().map(|l| l.slice(z)), lo, hi);
        let right = gt.as_ref().map(|g| overlay_rgb(plane, Some(g.slice(z)), lo, hi));
        let mut rgb = Vec::with_capacity(width * dims.h * 3);
        for y in 0..dims.h {
            rgb.extend_from_slice(&left[y * dims.w * 3..(y + 1) * dims.w * 3]);
            if let Some(r) = &right {
                rgb.extend_from_slice(&r[y * dims.w * 3..(y + 1) * dims.w * 3]);
            }
        }
        write_png(&out.join(format!("slice_{z:03}.png")), &rgb, width, dims.h)?;
        written += 1;
    }
    Ok(written)
}

fn run(cli: Cli) -> Result<()> {
    if let Command::ServeRefiner { tolerance } = cli.command {
        let mut refiner = BuiltinRefiner { tolerance };
        return serve_refiner(&mut refiner, io::stdin().lock(), io::stdout().lock());
    }
    let mut cfg = load_config(&cli.global)?;
    match cli.command {
        Command::Phantom {
            out,
            n_train,
            n_val,
            n_healthy,
            n_tumor,
            force,
        } => {
            let out = out.unwrap_or_else(|| cfg.paths.dataset.clone());
            let d = &mut cfg.dataset;
            d.n_train = n_train.unwrap_or(d.n_train);
            d.n_val = n_val.unwrap_or(d.n_val);
            d.n_test_healthy = n_healthy.unwrap_or(d.n_test_healthy);
            d.n_test_tumor = n_tumor.unwrap_or(d.n_test_tumor);
            let m = generate_dataset(&cfg, &out, force)?;
            println!("wrote {} cases to {}", m.cases.len(), out.display());
        }
        Command::Train {
            dataset,
            checkpoint,
            resume,
            epochs,
        } => {
            let dataset = dataset.unwrap_or_else(|| cfg.paths.dataset.clone());
            let checkpoint = checkpoint.unwrap_or_else(|| cfg.paths.checkpoint.clone());
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            let (state, history) = train_model(&cfg, &dataset, &checkpoint, resume)?;
            for r in &history {
                println!(
                    "epoch {:>3}  train {:.6}  val {:.6}{}",
                    r.epoch,
                    r.train_loss,
                    r.val_loss,
                    if r.saved { "  saved" } else { "" }
                );
            }
            println!(
                "best checkpoint: epoch {}, val loss {:.6}",
                state.epoch,
                state.best_val_loss.unwrap_or(f64::NAN)
            );
        }
        Command::Reconstruct { checkpoint, case, out } => {
            let state = checkpoint_state(&cfg, &checkpoint)?;
            let (_, recon) = reconstruct_case(&state, &load_volume(&case)?, cfg.inference_batch)?;
            save_volume(&recon, &out)?;
            println!("wrote reconstruction to {}", out.display());
        }
        Command::Segment {
            checkpoint,
            input,
            out,
            debug,
            force,
        } => {
            let checkpoint = checkpoint.unwrap_or_else(|| cfg.paths.checkpoint.clone());
            let input = input.unwrap_or_else(|| cfg.paths.dataset.clone());
            let out = out.unwrap_or_else(|| cfg.paths.predictions.clone());
            let state = checkpoint_state(&cfg, &checkpoint)?;
            let (root, cases) = select_cases(&input)?;
            uadseg::pipeline::prepare_output_dir(&out, force)?;
            let debug_dir = debug.then(|| out.join("debug"));
            let segs = segment_cases(&cfg, &state, &root, &cases, &out, debug_dir.as_deref())?;
            for s in &segs {
                println!("{}: {} tumour voxels", s.name, s.predicted_wt_voxels);
            }
        }
        Command::Evaluate { pred, gt, out } => {
            let pred = pred.unwrap_or_else(|| cfg.paths.predictions.clone());
            let gt = gt.unwrap_or_else(|| cfg.paths.dataset.clone());
            let report = evaluate_predictions(&pred, &gt, &cfg.metrics)?;
            write_report(&report, &out.unwrap_or_else(|| cfg.paths.report.clone()))?;
            print!("{}", report.table());
        }
        Command::Overlay {
            case,
            pred,
            gt,
            out,
            z,
            modality,
        } => {
            let n = overlay(&case, pred.as_deref(), gt.as_deref(), &out, z.as_deref(), &modality)?;
            println!("wrote {n} images to {}", out.display());
        }
        Command::E2e { out, debug, force } => {
            let s = run_experiment(&cfg, &out, force, debug)?;
            print!(
                "{}",
                std::fs::read_to_string(out.join("report/report.txt")).unwrap_or_default()
            );
            println!("slice AUROC            {:.4}", s.slice_auroc);
            println!("detection rate         {:.4}", s.detection_rate);
            println!("mean WT Dice           {:.4}", s.mean_wt_dice);
            println!("max healthy WT / brain {:.4}%", 100.0 * s.max_healthy_wt_fraction);
        }
        Command::ServeRefiner { .. } => unreachable!(),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(if cli.global.verbose {
            log::LevelFilter::Info
        } else {
            log::LevelFilter::Warn
        })
        .target(env_logger::Target::Stderr)
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config() {
                2
            } else if e.is_data() {
                3
            } else {
                4
            })
        }
    }
}
