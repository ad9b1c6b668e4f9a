//! `mfuse` command-line interface.
//!
//! Exit codes: 0 success, 1 generic failure, 2 mismatched inputs,
//! 3 checkpoint error, 4 configuration error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::warn;

use crate::checkpoint::Checkpoint;
use crate::error::Error;
use crate::fusion::{self, ColorMode};
use crate::gradcheck::{self, GradOp, GradcheckOptions};
use crate::imageio;
use crate::metrics::{self, BinaryMask};
use crate::raster::Image;
use crate::ssim::SsimConstants;
use crate::train::{self, TrainConfig};

#[derive(Debug, Parser)]
#[command(
    name = "mfuse",
    version,
    about = "Unsupervised multi-focus image fusion"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a fusion network from a key=value config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Fuse two registered images.
    Fuse {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        in1: PathBuf,
        #[arg(long)]
        in2: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = ColorArg::Luma)]
        color: ColorArg,
    },
    /// Fuse and score every pair of a dataset directory.
    Eval {
        /// Required for `--method net`.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, value_enum, default_value_t = Method::Net)]
        method: Method,
    },
    /// Write synthetic multi-focus pairs from sharp images.
    Synth {
        /// Directory of sharp source images.
        #[arg(long, required_unless_present = "scenes")]
        src: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        sigma: f64,
        #[arg(long)]
        seed: u64,
        /// Generate this many procedural scenes instead of reading `--src`.
        #[arg(long, conflicts_with = "src")]
        scenes: Option<usize>,
        /// Side length of generated scenes.
        #[arg(long, default_value_t = 128)]
        size: usize,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = gradcheck::DEFAULT_INSTANCES)]
        instances: usize,
        /// Debug hook: perturb the analytic gradient of one op.
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ColorArg {
    Luma,
    Color,
}

/// How `eval` produces the fused image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Method {
    /// The trained network.
    Net,
    /// The first source unchanged.
    First,
    /// Pixelwise average of the sources.
    Average,
    /// Per-pixel copy from the locally sharper source.
    MaxStd,
}

/// A failed command with its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Failure {
            code,
            message: message.into(),
        }
    }
}

pub const EXIT_GENERIC: u8 = 1;
pub const EXIT_MISMATCH: u8 = 2;
pub const EXIT_CHECKPOINT: u8 = 3;
pub const EXIT_CONFIG: u8 = 4;

fn classify(e: &Error) -> u8 {
    match e {
        Error::PairSizeMismatch { .. } | Error::ShapeMismatch { .. } => EXIT_MISMATCH,
        Error::Checkpoint(_) => EXIT_CHECKPOINT,
        Error::Config(_) | Error::ConfigParse { .. } => EXIT_CONFIG,
        _ => EXIT_GENERIC,
    }
}

fn fail(e: Error) -> Failure {
    Failure::new(classify(&e), e.to_string())
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint, Failure> {
    Checkpoint::load(path).map_err(|e| Failure::new(EXIT_CHECKPOINT, e.to_string()))
}

/// Parses arguments and runs the command.
pub fn main_with_args<I, S>(args: I) -> ExitCode
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_GENERIC } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

pub fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train { config, resume } => cmd_train(&config, resume.as_deref()),
        Command::Fuse {
            ckpt,
            in1,
            in2,
            out,
            color,
        } => {
            let mode = match color {
                ColorArg::Luma => ColorMode::Luma,
                ColorArg::Color => ColorMode::Color,
            };
            cmd_fuse(&ckpt, &in1, &in2, &out, mode)
        }
        Command::Eval {
            ckpt,
            data,
            report,
            method,
        } => cmd_eval(ckpt.as_deref(), &data, &report, method),
        Command::Synth {
            src,
            out,
            sigma,
            seed,
            scenes,
            size,
        } => cmd_synth(src.as_deref(), &out, sigma, seed, scenes, size),
        Command::Gradcheck {
            seed,
            instances,
            corrupt,
        } => cmd_gradcheck(seed, instances, corrupt.as_deref()),
    }
}

pub fn cmd_train(config: &Path, resume: Option<&Path>) -> Result<(), Failure> {
    let mut cfg =
        TrainConfig::load(config).map_err(|e| Failure::new(EXIT_CONFIG, e.to_string()))?;
    if cfg.out_dir.is_none() {
        cfg.out_dir = Some(PathBuf::from("mfuse-run"));
    }
    cfg.validate()
        .map_err(|e| Failure::new(EXIT_CONFIG, e.to_string()))?;
    if !cfg.data_dir.is_dir() {
        return Err(Failure::new(
            EXIT_CONFIG,
            format!("data_dir {} is not a directory", cfg.data_dir.display()),
        ));
    }
    let resume = resume.map(load_checkpoint).transpose()?;
    let total = cfg.total_steps();
    let ckpt = train::train_with(&cfg, resume, |r| {
        println!(
            "step {}/{}  lr {:.6e}  loss {:.6}",
            r.step + 1,
            total,
            r.lr,
            r.loss
        );
    })
    .map_err(|e| match e {
        Error::Dataset(_) => Failure::new(EXIT_CONFIG, e.to_string()),
        e => fail(e),
    })?;
    let out = cfg.out_dir.as_deref().expect("set above");
    println!(
        "finished at step {}; checkpoint {}",
        ckpt.step,
        out.join(train::FINAL_CHECKPOINT).display()
    );
    Ok(())
}

pub fn cmd_fuse(
    ckpt: &Path,
    in1: &Path,
    in2: &Path,
    out: &Path,
    mode: ColorMode,
) -> Result<(), Failure> {
    let ckpt = load_checkpoint(ckpt)?;
    fusion::fuse_files(&ckpt.weights, in1, in2, out, mode).map_err(fail)
}

pub fn cmd_eval(
    ckpt: Option<&Path>,
    data: &Path,
    report: &Path,
    method: Method,
) -> Result<(), Failure> {
    let weights = match (method, ckpt) {
        (Method::Net, Some(p)) => Some(load_checkpoint(p)?.weights),
        (Method::Net, None) => {
            return Err(Failure::new(
                EXIT_CHECKPOINT,
                "--ckpt is required for --method net",
            ))
        }
        _ => None,
    };
    let pairs = imageio::load_dataset(data).map_err(fail)?;
    let window = SsimConstants::default().window;
    let mut rows = Vec::with_capacity(pairs.len());
    for p in &pairs {
        let fused = match method {
            Method::Net => weights.as_ref().expect("loaded").fuse(&p.first, &p.second),
            Method::First => Ok(p.first.clone()),
            Method::Average => Image::average(&p.first, &p.second),
            Method::MaxStd => metrics::max_std_fusion(&p.first, &p.second, window),
        }
        .map_err(fail)?;
        let r = metrics::evaluate(&p.first, &p.second, &fused).map_err(fail)?;
        rows.push((p.name.clone(), r));
    }
    let table = metrics::render_report(&rows);
    fs::write(report, &table).map_err(|e| fail(e.into()))?;
    print!("{table}");
    Ok(())
}

fn source_images(src: &Path) -> Result<Vec<PathBuf>, Failure> {
    let entries = fs::read_dir(src)
        .map_err(|e| Failure::new(EXIT_GENERIC, format!("cannot read {}: {e}", src.display())))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| imageio::EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    files.sort();
    Ok(files)
}

pub fn cmd_synth(
    src: Option<&Path>,
    out: &Path,
    sigma: f64,
    seed: u64,
    scenes: Option<usize>,
    size: usize,
) -> Result<(), Failure> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Failure::new(EXIT_GENERIC, "--sigma must be positive"));
    }
    let sharp: Vec<(String, Option<Image>)> = match (scenes, src) {
        (Some(n), _) => (0..n)
            .map(|i| {
                let img = metrics::synthetic_scene(size, size, seed.wrapping_add(i as u64));
                (format!("scene{i:03}"), Some(img))
            })
            .collect(),
        (None, Some(src)) => source_images(src)?
            .into_iter()
            .map(|p| {
                let name = p
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default();
                match imageio::load_luma(&p) {
                    Ok(img) => (name, Some(img)),
                    Err(e) => {
                        warn!("skipping {}: {e}", p.display());
                        eprintln!("warning: skipping {}: {e}", p.display());
                        (name, None)
                    }
                }
            })
            .collect(),
        (None, None) => {
            return Err(Failure::new(
                EXIT_GENERIC,
                "either --src or --scenes is required",
            ))
        }
    };
    fs::create_dir_all(out).map_err(|e| fail(e.into()))?;
    let mut written = 0;
    for (i, (name, img)) in sharp.iter().enumerate() {
        let Some(img) = img else { continue };
        let mask_seed = seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(i as u64);
        let mask = BinaryMask::random_half_plane(img.width(), img.height(), mask_seed);
        let (p1, p2) = metrics::synth_pair(img, &mask, sigma).map_err(fail)?;
        imageio::save_luma(&out.join(format!("{name}_1.png")), &p1).map_err(fail)?;
        imageio::save_luma(&out.join(format!("{name}_2.png")), &p2).map_err(fail)?;
        written += 1;
    }
    if written == 0 {
        return Err(Failure::new(EXIT_GENERIC, "no source image could be read"));
    }
    println!("wrote {written} pair(s) to {}", out.display());
    Ok(())
}

pub fn cmd_gradcheck(seed: u64, instances: usize, corrupt: Option<&str>) -> Result<(), Failure> {
    let corrupt = corrupt
        .map(|s| {
            GradOp::parse(s).ok_or_else(|| Failure::new(EXIT_GENERIC, format!("unknown op {s:?}")))
        })
        .transpose()?;
    let opts = GradcheckOptions {
        seed,
        instances,
        corrupt,
    };
    let report = gradcheck::run_gradcheck(&opts).map_err(fail)?;
    print!("{report}");
    if report.passed() {
        println!("all gradients within {:e}", gradcheck::TOLERANCE);
        Ok(())
    } else {
        Err(Failure::new(EXIT_GENERIC, "gradient check failed"))
    }
}
