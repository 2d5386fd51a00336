//! `latis` command-line front end.
//!
//! Exit codes: 0 success, 1 usage or data error, 2 flag parse error,
//! 3 numeric divergence, 4 gradcheck failure.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use latis::data::{list_images, load_image, make_pair, save_image, BitDepth, Dataset};
use latis::layers::{model_info, REFERENCE_LR_SIZE};
use latis::losses::LossSchedule;
use latis::metrics::{bicubic_resize, psnr, shave, ssim};
use latis::training::{
    default_batch, load_checkpoint, save_checkpoint, Checkpoint, TrainConfig, Trainer, LOG_HEADER,
};
use latis::{checks, Error, Image, Latis, ModelConfig, Parameters};

#[derive(Parser)]
#[command(name = "latis", version, about = "Thermal image super-resolution")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on HR images and write a checkpoint.
    Train(TrainArgs),
    /// Super-resolve one image.
    Sr(SrArgs),
    /// Report PSNR/SSIM over a directory of HR images as CSV.
    Eval(EvalArgs),
    /// Run the finite-difference gradient suite.
    Gradcheck(GradcheckArgs),
    /// Print parameter count and FLOPs at 80x64 input.
    Info(InfoArgs),
    /// Write an untrained checkpoint.
    Init(InitArgs),
}

/// Architecture flags shared by every command that builds a model.
#[derive(Args, Clone, Default)]
struct ModelArgs {
    /// JSON file with ModelConfig fields; flags take precedence.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Disable the channel shuffle in CSConv.
    #[arg(long)]
    no_shuffle: bool,
    /// Drop the CBAM attention from every block.
    #[arg(long)]
    no_cbam: bool,
    /// Drop the GFE layer norm.
    #[arg(long)]
    no_layernorm: bool,
    /// Predict the HR image directly instead of a bicubic residual.
    #[arg(long)]
    no_residual: bool,
    /// Number of LGFB blocks.
    #[arg(long, value_name = "K")]
    num_lgfb: Option<usize>,
}

impl ModelArgs {
    fn is_default(&self) -> bool {
        self.config.is_none()
            && !(self.no_shuffle || self.no_cbam || self.no_layernorm || self.no_residual)
            && self.num_lgfb.is_none()
    }

    /// Defaults, then the config file, then flags.
    fn build(&self, scale: Option<usize>) -> latis::Result<ModelConfig> {
        let mut cfg = match &self.config {
            Some(path) => serde_json::from_str::<ModelConfig>(&fs::read_to_string(path)?)?,
            None => ModelConfig::default(),
        };
        if let Some(s) = scale {
            cfg.scale = s;
        }
        cfg.use_channel_shuffle &= !self.no_shuffle;
        cfg.use_cbam &= !self.no_cbam;
        cfg.use_layer_norm &= !self.no_layernorm;
        cfg.use_bicubic_residual &= !self.no_residual;
        if let Some(k) = self.num_lgfb {
            cfg.num_lgfb = k;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn scale_arg(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(v @ 2..=4) => Ok(v),
        _ => Err(format!("scale must be 2, 3 or 4, got `{s}`")),
    }
}

#[derive(Args)]
struct TrainArgs {
    /// Directory of HR images or a manifest file listing them.
    #[arg(long, value_name = "DIR|FILE")]
    data: PathBuf,
    #[arg(long, value_parser = scale_arg)]
    scale: usize,
    /// Checkpoint written after every epoch.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    /// Defaults to 64, 48 or 32 for scale 2, 3 or 4.
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    /// Seeds weights and crop sampling.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    steps_per_epoch: usize,
    /// HR crop side in pixels; defaults to 32 LR pixels times the scale.
    #[arg(long)]
    crop: Option<usize>,
    /// Weight of the histogram loss.
    #[arg(long, default_value_t = 0.125)]
    lambda_p: f64,
    /// Epochs during which the histogram loss is active.
    #[arg(long, default_value_t = 5)]
    n_epochs: usize,
    /// Train with the content loss only.
    #[arg(long)]
    no_emd: bool,
    /// Continue from a checkpoint written by an earlier run with the same seed.
    #[arg(long, value_name = "FILE")]
    resume: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
}

#[derive(Args)]
struct SrArgs {
    #[arg(long, value_name = "FILE")]
    model: PathBuf,
    #[arg(long, value_name = "FILE")]
    input: PathBuf,
    /// `.png` or `.pgm`.
    #[arg(long, value_name = "FILE")]
    output: PathBuf,
    /// Fail unless the checkpoint upscales by this factor.
    #[arg(long, value_parser = scale_arg)]
    scale: Option<usize>,
    #[arg(long, value_enum, default_value_t = Depth::Eight)]
    bit_depth: Depth,
}

#[derive(Clone, Copy, ValueEnum)]
enum Depth {
    #[value(name = "8")]
    Eight,
    #[value(name = "16")]
    Sixteen,
}

impl From<Depth> for BitDepth {
    fn from(d: Depth) -> Self {
        match d {
            Depth::Eight => BitDepth::Eight,
            Depth::Sixteen => BitDepth::Sixteen,
        }
    }
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum Baseline {
    /// Bicubic upsampling of the LR image.
    Bicubic,
    /// The HR image itself.
    Identity,
}

#[derive(Args)]
struct EvalArgs {
    /// Required unless `--baseline` is given.
    #[arg(long, value_name = "FILE", required_unless_present = "baseline", conflicts_with = "baseline")]
    model: Option<PathBuf>,
    /// Directory of HR images or a manifest file listing them.
    #[arg(long, value_name = "DIR|FILE")]
    hr: PathBuf,
    #[arg(long, value_parser = scale_arg)]
    scale: usize,
    #[arg(long, value_enum)]
    baseline: Option<Baseline>,
    /// Border pixels excluded from the metrics; defaults to the scale.
    #[arg(long)]
    shave: Option<usize>,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Run a single entry of the suite.
    #[arg(long, value_name = "NAME")]
    op: Option<String>,
}

#[derive(Args)]
struct InfoArgs {
    #[arg(long, value_parser = scale_arg, required_unless_present = "model")]
    scale: Option<usize>,
    /// Read the configuration from a checkpoint.
    #[arg(long, value_name = "FILE", conflicts_with = "scale")]
    model: Option<PathBuf>,
    #[command(flatten)]
    arch: ModelArgs,
}

#[derive(Args)]
struct InitArgs {
    #[arg(long, value_parser = scale_arg)]
    scale: usize,
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// All-zero weights, so the model reproduces bicubic upsampling.
    #[arg(long)]
    zero: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    model: ModelArgs,
}

enum Failure {
    Usage(String),
    Latis(Error),
    Gradcheck(Vec<String>),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Latis(e)
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Latis(e.into())
    }
}

type CmdResult = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = configure_threads().and_then(|()| match cli.command {
        Command::Train(a) => train(a),
        Command::Sr(a) => sr(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Info(a) => info(a),
        Command::Init(a) => init(a),
    });
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Latis(e)) => {
            eprintln!("error: {e}");
            match e {
                Error::Diverged { .. } | Error::NonFinite { .. } => ExitCode::from(3),
                _ => ExitCode::from(1),
            }
        }
        Err(Failure::Gradcheck(names)) => {
            eprintln!("gradcheck failed: {}", names.join(", "));
            ExitCode::from(4)
        }
    }
}

fn configure_threads() -> CmdResult {
    let Ok(raw) = std::env::var("LATIS_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Usage(format!("LATIS_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Usage(format!("cannot configure thread pool: {e}")))
}

fn same_file(a: &Path, b: &Path) -> bool {
    match (fs::canonicalize(a), fs::canonicalize(b)) {
        (Ok(x), Ok(y)) => x == y,
        _ => a == b,
    }
}

fn train(a: TrainArgs) -> CmdResult {
    let schedule = if a.no_emd {
        LossSchedule::content_only()
    } else {
        LossSchedule { lambda_p: a.lambda_p, cutoff_epochs: a.n_epochs }
    };
    let mut cfg = TrainConfig {
        epochs: a.epochs,
        steps_per_epoch: a.steps_per_epoch,
        batch: a.batch.unwrap_or_else(|| default_batch(a.scale)),
        seed: a.seed,
        schedule,
        ..TrainConfig::default()
    };
    cfg.adam.lr = a.lr;
    cfg.validate()?;
    if a.crop == Some(0) {
        return Err(Failure::Usage("--crop must be positive".into()));
    }
    if a.resume.as_deref().is_some_and(|r| same_file(r, &a.out)) {
        return Err(Failure::Usage("--out must differ from --resume".into()));
    }
    let model = a.model.build(Some(a.scale))?;

    let ds = Dataset::open(&a.data, a.scale, a.crop, a.seed).map_err(|e| in_file(&a.data, e))?;
    let mut trainer = match &a.resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            ckpt.check_config(&model)?;
            Trainer::resume(ckpt, cfg)?
        }
        None => Trainer::new(model, cfg)?,
    };
    eprintln!(
        "training x{} on {} images, batch {}, {} steps per epoch, from epoch {}",
        a.scale,
        ds.len(),
        trainer.config().batch,
        trainer.config().steps_per_epoch,
        trainer.epoch()
    );

    let stdout = io::stdout();
    let mut out = stdout.lock();
    writeln!(out, "{LOG_HEADER}")?;
    while trainer.epoch() < trainer.config().epochs {
        let summary = trainer.run_epoch(&ds, |log| {
            // a closed pipe must not abort training
            let _ = writeln!(out, "{log}");
        })?;
        eprintln!("{summary}");
        save_checkpoint(&a.out, &trainer.checkpoint())?;
    }
    out.flush()?;
    save_checkpoint(&a.out, &trainer.checkpoint())?;
    eprintln!("wrote {}", a.out.display());
    Ok(())
}

fn load_model(path: &Path, scale: Option<usize>) -> Result<Latis<f32>, Failure> {
    let ckpt = load_checkpoint(path)?;
    if let Some(s) = scale {
        if ckpt.config.scale != s {
            return Err(Failure::Usage(format!(
                "checkpoint {} upscales by {}, expected {s}",
                path.display(),
                ckpt.config.scale
            )));
        }
    }
    Ok(Latis { config: ckpt.config, params: ckpt.params })
}

fn in_file(path: &Path, e: Error) -> Error {
    match e {
        Error::Io(io) => Error::Io(io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    }
}

fn super_resolve(model: &Latis<f32>, lr: &Image<f32>) -> latis::Result<Image<f32>> {
    let y = model.predict(&lr.to_tensor())?;
    if !y.is_finite() {
        return Err(Error::NonFinite { op: "model output".into(), node: 0 });
    }
    Image::from_tensor(&y)
}

fn sr(a: SrArgs) -> CmdResult {
    if same_file(&a.input, &a.output) {
        return Err(Failure::Usage("--output must differ from --input".into()));
    }
    let model = load_model(&a.model, a.scale)?;
    let lr: Image<f32> = load_image(&a.input).map_err(|e| in_file(&a.input, e))?;
    let out = super_resolve(&model, &lr)?;
    save_image(&a.output, &out, a.bit_depth.into())?;
    eprintln!(
        "{}x{} -> {}x{}: wrote {}",
        lr.height(),
        lr.width(),
        out.height(),
        out.width(),
        a.output.display()
    );
    Ok(())
}

fn clamp01(img: &Image<f32>) -> Image<f32> {
    Image::from_fn(img.height(), img.width(), |y, x| img.get(y, x).clamp(0.0, 1.0))
}

fn fmt_metric(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.6}")
    } else {
        "inf".into()
    }
}

fn eval(a: EvalArgs) -> CmdResult {
    let model = a.model.as_deref().map(|p| load_model(p, Some(a.scale))).transpose()?;
    let files = list_images(&a.hr).map_err(|e| in_file(&a.hr, e))?;
    let border = a.shave.unwrap_or(a.scale);

    let rows: Vec<latis::Result<(String, f64, f64)>> = files
        .par_iter()
        .map(|path| {
            let src: Image<f32> = load_image(path).map_err(|e| in_file(path, e))?;
            let (lr, hr) = make_pair(&src, a.scale)?;
            let sr = match (&model, a.baseline) {
                (Some(m), _) => super_resolve(m, &lr)?,
                (None, Some(Baseline::Identity)) => hr.clone(),
                (None, _) => bicubic_resize(&lr, hr.height(), hr.width())?,
            };
            let (sr, hr) = (shave(&clamp01(&sr), border)?, shave(&hr, border)?);
            let name = path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into());
            Ok((name, psnr(&sr, &hr)?, ssim(&sr, &hr)?))
        })
        .collect();

    let stdout = io::stdout();
    let mut out = stdout.lock();
    writeln!(out, "file,psnr_db,ssim")?;
    let (mut total_p, mut total_s) = (0.0, 0.0);
    let n = rows.len();
    for row in rows {
        let (name, p, s) = row?;
        writeln!(out, "{name},{},{}", fmt_metric(p), fmt_metric(s))?;
        total_p += p;
        total_s += s;
    }
    writeln!(out, "mean,{},{}", fmt_metric(total_p / n as f64), fmt_metric(total_s / n as f64))?;
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> CmdResult {
    let names: Vec<&str> = match &a.op {
        Some(op) => match checks::CHECKS.iter().find(|&&n| n == op) {
            Some(&n) => vec![n],
            None => {
                return Err(Failure::Usage(format!(
                    "unknown op `{op}`; expected one of {}",
                    checks::CHECKS.join(", ")
                )))
            }
        },
        None => checks::CHECKS.to_vec(),
    };
    let stdout = io::stdout();
    let mut out = stdout.lock();
    writeln!(out, "op,max_rel_error,tolerance,oracle_error,checked,skipped,seconds,status")?;
    let mut failed = Vec::new();
    for name in names {
        eprintln!("checking {name}");
        let r = checks::run_check(name)?;
        let status = if r.passed() { "PASS" } else { "FAIL" };
        if !r.passed() {
            failed.push(name.to_string());
        }
        writeln!(
            out,
            "{name},{:.3e},{:.0e},{},{},{},{:.2},{status}",
            r.report.max_rel_error,
            r.tolerance,
            r.oracle_error.map_or_else(|| "-".into(), |e| format!("{e:.3e}")),
            r.report.checked,
            r.report.skipped,
            r.elapsed.as_secs_f64(),
        )?;
        out.flush()?;
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Gradcheck(failed))
    }
}

fn info(a: InfoArgs) -> CmdResult {
    let cfg = match &a.model {
        Some(path) => {
            if !a.arch.is_default() {
                return Err(Failure::Usage("architecture flags cannot be combined with --model".into()));
            }
            load_checkpoint(path)?.config
        }
        None => a.arch.build(a.scale)?,
    };
    let m = model_info(&cfg, REFERENCE_LR_SIZE)?;
    let (h, w) = REFERENCE_LR_SIZE;
    println!("scale,params,flops,gflops,full_flops,lr_size");
    println!(
        "{},{},{},{:.4},{},{}x{}",
        cfg.scale,
        m.params,
        m.flops,
        m.flops as f64 / 1e9,
        m.full_flops,
        h,
        w
    );
    Ok(())
}

fn init(a: InitArgs) -> CmdResult {
    let cfg = a.model.build(Some(a.scale))?;
    let params = if a.zero { Parameters::zeros(&cfg)? } else { Parameters::init(&cfg, a.seed)? };
    let count = params.count();
    save_checkpoint(&a.out, &Checkpoint::from_params(cfg, params, a.seed))?;
    eprintln!("wrote {} ({count} parameters)", a.out.display());
    Ok(())
}
