//! `ntir2dc`: train, translate and evaluate nighttime-thermal to
//! daytime-color translators.
//!
//! Exit codes: 0 success, 1 internal error, 2 invalid configuration or
//! arguments, 3 data / checkpoint errors, 4 non-finite loss.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;
use ntir2dc::checkpoint;
use ntir2dc::config::TrainConfig;
use ntir2dc::data::{list_images, load_dataset, preprocess, Domain, Image};
use ntir2dc::metrics::{apce, miou, write_apce_reports, ThresholdSweep};
use ntir2dc::training::{run, Direction, OutputLayout, TrainData, TrainState};
use ntir2dc::{synthetic, Error, Result};

/// Nighttime thermal infrared to daytime color image translation.
#[derive(Parser, Debug)]
#[command(version, about)]
struct Cli {
    /// Flat `key = value` configuration file, applied over the defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Configuration override `key=value`; repeatable, applied after the file.
    #[arg(long = "override", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Random seed; overrides the configured `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train both translators; writes checkpoints/, samples/, logs/ under --out.
    Train {
        /// Continue from <out>/checkpoints/latest.ckpt when it exists.
        #[arg(long)]
        resume: bool,
    },
    /// Translate every image of a directory with a trained checkpoint.
    Translate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// `a2b` (thermal to color) or `b2a`.
        #[arg(long, default_value = "a2b")]
        direction: String,
    },
    /// Average precision of Canny edges between same-named images; writes
    /// apce.csv and report.json to <out>/reports.
    EvalApce {
        /// Source images.
        #[arg(long)]
        sources: PathBuf,
        /// Translated images.
        #[arg(long)]
        outputs: PathBuf,
    },
    /// Per-class IoU between same-named 8-bit label PNGs; writes
    /// miou.json to <out>/reports.
    EvalMiou {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        classes: usize,
        #[arg(long, default_value_t = 255)]
        ignore_label: u32,
    },
    /// Write a synthetic unpaired corpus (A/, B/) to --out.
    GenSynthetic {
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::UnknownKey(_) | Error::EpochOutOfRange { .. } => 2,
        Error::NonFinite { .. } => 4,
        Error::Io { .. }
        | Error::Decode { .. }
        | Error::EmptyDirectory(_)
        | Error::ZeroIntensityRange
        | Error::InvalidIntensity(_)
        | Error::ImageTooSmall { .. }
        | Error::EmptyDomain(_)
        | Error::NoMeasurableEdges
        | Error::LabelOutOfRange { .. }
        | Error::MismatchedFiles { .. }
        | Error::Checkpoint(_)
        | Error::CheckpointVersion { .. }
        | Error::ShapeMismatch { .. }
        | Error::SpatialNotDivisible { .. } => 3,
        _ => 1,
    }
}

fn load_config(cli: &Cli) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = &cli.config {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.apply_text(&text)?;
    }
    for kv in &cli.overrides {
        cfg.apply_override(kv)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })
}

fn cmd_train(cli: &Cli, resume: bool) -> Result<()> {
    let mut cfg = load_config(cli)?;
    let layout = OutputLayout::new(&cli.out);
    if cfg.edge_cache.is_none() {
        cfg.edge_cache = Some(cli.out.join("edges"));
    }
    let (dir_a, dir_b) = match (&cfg.data_a, &cfg.data_b) {
        (Some(a), Some(b)) => (a.clone(), b.clone()),
        _ => return Err(Error::Config("data_a and data_b must be set".into())),
    };
    let raw = load_dataset::<f32>(&dir_a, &dir_b, cfg.skip_undecodable)?;
    let data = TrainData::prepare(&raw, &cfg)?;
    layout.create()?;
    let latest = layout.latest_checkpoint();
    let mut state = if resume && latest.exists() {
        let state = checkpoint::load::<f32>(&latest)?;
        info!("resuming from {} at iteration {}", latest.display(), state.iteration);
        state
    } else {
        TrainState::<f32>::new(cfg)?
    };
    write(&layout.logs().join("config.cfg"), &state.cfg.to_kv())?;
    info!(
        "training on {} A / {} B images for {} iterations, eta {:.3}",
        data.sizes().0,
        data.sizes().1,
        state.total_iterations(&data),
        data.eta
    );
    run(&mut state, &data, None, Some(&layout))?;
    info!("done; checkpoint {}", latest.display());
    Ok(())
}

fn same_named(left: &Path, right: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    let l = list_images(left)?;
    let r = list_images(right)?;
    if l.is_empty() {
        return Err(Error::EmptyDirectory(left.to_path_buf()));
    }
    let names = |v: &[PathBuf]| v.iter().map(|p| p.file_name().unwrap_or_default().to_os_string()).collect::<Vec<_>>();
    if names(&l) != names(&r) {
        return Err(Error::MismatchedFiles {
            left: left.to_path_buf(),
            right: right.to_path_buf(),
            detail: format!("{} vs {} files, or differing names", l.len(), r.len()),
        });
    }
    Ok(l.into_iter().zip(r).collect())
}

fn open_image(path: &Path, domain: Domain) -> Result<Image<f32>> {
    let img = image::open(path).map_err(|e| Error::Decode { path: path.to_path_buf(), reason: e.to_string() })?;
    let id = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
    Ok(Image::from_dynamic(&img, domain, id).0)
}

fn cmd_translate(checkpoint: &Path, input: &Path, output: &Path, direction: &str) -> Result<()> {
    let direction: Direction = direction.parse()?;
    let state = checkpoint::load::<f32>(checkpoint)?;
    let files = list_images(input)?;
    if files.is_empty() {
        return Err(Error::EmptyDirectory(input.to_path_buf()));
    }
    fs::create_dir_all(output).map_err(|e| Error::Io { path: output.to_path_buf(), source: e })?;
    let domain = match direction {
        Direction::AtoB => Domain::A,
        Direction::BtoA => Domain::B,
    };
    for path in &files {
        let img = preprocess(&open_image(path, domain)?.to_rgb(), &state.cfg.preprocess);
        let out = state.translate(&img.pixels, direction)?;
        let name = Path::new(path.file_name().unwrap_or_default()).with_extension("png");
        let dest = output.join(name);
        ntir2dc::data::to_dynamic(&out)
            .save(&dest)
            .map_err(|e| Error::Decode { path: dest.clone(), reason: e.to_string() })?;
    }
    info!("translated {} images into {}", files.len(), output.display());
    Ok(())
}

fn cmd_eval_apce(out: &Path, sources: &Path, outputs: &Path) -> Result<()> {
    let pairs = same_named(sources, outputs)?;
    let mut src = Vec::new();
    let mut dst = Vec::new();
    for (s, o) in &pairs {
        src.push(open_image(s, Domain::B)?.pixels);
        dst.push(open_image(o, Domain::B)?.pixels);
    }
    let sweep = ThresholdSweep::default();
    let report = apce(&src, &dst, &sweep)?;
    let dir = OutputLayout::new(out).reports();
    write_apce_reports(&report, &sweep, &dir)?;
    println!("apce {:.6} over {} images ({} skipped terms)", report.apce, report.n_i, report.skipped_pairs);
    Ok(())
}

fn read_labels(path: &Path) -> Result<(Vec<u32>, (u32, u32))> {
    let img = image::open(path).map_err(|e| Error::Decode { path: path.to_path_buf(), reason: e.to_string() })?;
    let gray = img.to_luma8();
    Ok((gray.as_raw().iter().map(|&v| v as u32).collect(), gray.dimensions()))
}

fn cmd_eval_miou(out: &Path, pred: &Path, gt: &Path, classes: usize, ignore: u32) -> Result<()> {
    let mut all_pred = Vec::new();
    let mut all_gt = Vec::new();
    for (p, g) in same_named(pred, gt)? {
        let (pv, pd) = read_labels(&p)?;
        let (gv, gd) = read_labels(&g)?;
        if pd != gd {
            return Err(Error::MismatchedFiles {
                left: p,
                right: g,
                detail: format!("label maps {pd:?} vs {gd:?}"),
            });
        }
        all_pred.extend(pv);
        all_gt.extend(gv);
    }
    let report = miou(&all_pred, &all_gt, classes, ignore)?;
    let dir = OutputLayout::new(out).reports();
    fs::create_dir_all(&dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
    let json = serde_json::to_string_pretty(&report).expect("plain JSON values");
    write(&dir.join("miou.json"), &(json + "\n"))?;
    println!("miou {:.6}", report.miou);
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train { resume } => cmd_train(cli, *resume),
        Command::Translate { checkpoint, input, output, direction } => {
            cmd_translate(checkpoint, input, output, direction)
        }
        Command::EvalApce { sources, outputs } => cmd_eval_apce(&cli.out, sources, outputs),
        Command::EvalMiou { pred, gt, classes, ignore_label } => {
            cmd_eval_miou(&cli.out, pred, gt, *classes, *ignore_label)
        }
        Command::GenSynthetic { count, width, height } => {
            synthetic::generate(&cli.out, *count, *width, *height, cli.seed.unwrap_or(0))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
