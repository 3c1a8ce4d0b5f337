//! `nrsr`: sensor simulation, training, reconstruction and evaluation of
//! LFCR+VDSR models for non-regularly sampled images.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 numerical
//! failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use nrsr_core::checkpoint::Checkpoint;
use nrsr_core::eval::{
    curve_checkpoint_name, curve_csv, evaluate, shift_curve, EvalReport, Method, Reconstructor,
};
use nrsr_core::gradsuite::{self, Target, TOLERANCE};
use nrsr_core::image::{read_dataset, read_gray, write_pgm};
use nrsr_core::sensor::{MaskKind, MeasurementGrid, SamplingMask, Sensor, SensorKind};
use nrsr_core::train::{shift_set_for_factor, train_pipeline, Stage, TrainConfig};
use nrsr_core::Error;

const EXIT_USAGE: u8 = 2;
const EXIT_NUMERICAL: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "nrsr", version, about = "Non-regular sensor simulation and LFCR+VDSR reconstruction")]
struct Cli {
    /// Worker threads; 1 gives the strict single-threaded mode
    #[arg(long, global = true, env = "NRSR_THREADS")]
    threads: Option<usize>,

    /// Seed for mask generation, initialization and shuffling
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a periodic sampling mask
    Mask(MaskArgs),
    /// Simulate a sensor read-out of an image
    Sample(SampleArgs),
    /// Train the LFCR and then the VDSR on a directory of images
    Train(TrainArgs),
    /// Reconstruct a high-resolution image from an image or a read-out
    Reconstruct(ReconstructArgs),
    /// Score reconstruction methods on a dataset (PSNR and SSIM)
    Evaluate(EvaluateArgs),
    /// Compare analytic gradients with central differences
    Gradcheck(GradcheckArgs),
    /// PSNR gain per shift-augmentation factor
    Curves(CurvesArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SensorArg {
    #[value(alias = "qs")]
    Quarter,
    #[value(alias = "tqs")]
    ThreeQuarter,
    #[value(alias = "lr")]
    LowResolution,
}

impl From<SensorArg> for SensorKind {
    fn from(s: SensorArg) -> Self {
        match s {
            SensorArg::Quarter => SensorKind::Quarter,
            SensorArg::ThreeQuarter => SensorKind::ThreeQuarter,
            SensorArg::LowResolution => SensorKind::LowResolution,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MaskArg {
    Quarter,
    ThreeQuarter,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum StageArg {
    /// LFCR output only
    Lfcr,
    /// LFCR followed by VDSR
    #[value(alias = "lfcr+vdsr")]
    Vdsr,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Self {
        match s {
            StageArg::Lfcr => Stage::Lfcr,
            StageArg::Vdsr => Stage::Vdsr,
        }
    }
}

#[derive(Args, Debug)]
struct SensorOpts {
    /// Sensor layout
    #[arg(long, value_enum)]
    sensor: Option<SensorArg>,

    /// Mask file; masked sensors without one use a mask generated from --seed
    #[arg(long)]
    mask: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct MaskArgs {
    /// Mask layout
    #[arg(long, value_enum)]
    kind: MaskArg,

    /// Output mask file
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[command(flatten)]
    sensor: SensorOpts,

    /// Input PGM/PPM image
    #[arg(long = "in")]
    input: PathBuf,

    /// Output prefix; writes <prefix>.f32 and <prefix>.json
    #[arg(long)]
    out: PathBuf,

    /// Also write the read-out as an 8-bit PGM
    #[arg(long)]
    preview: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    sensor: SensorOpts,

    /// Directory of PGM/PPM training images
    #[arg(long)]
    data: PathBuf,

    /// key=value configuration file
    #[arg(long)]
    config: Option<PathBuf>,

    /// Configuration override, repeatable
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Epochs per phase
    #[arg(long)]
    epochs: Option<usize>,

    /// Shift augmentation factor (1, 2, 4, 8 or 16)
    #[arg(long = "shift-da")]
    shift_da: Option<usize>,

    /// Last phase to train
    #[arg(long, value_enum, default_value = "vdsr")]
    stage: StageArg,

    /// Per-epoch checkpoint to continue from
    #[arg(long)]
    resume: Option<PathBuf>,

    /// Output directory for checkpoints, logs and model.nrsr
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct ReconstructArgs {
    #[command(flatten)]
    sensor: SensorOpts,

    /// Trained checkpoint
    #[arg(long)]
    checkpoint: PathBuf,

    /// Reference image (simulated through the sensor) or read-out .json
    #[arg(long = "in")]
    input: PathBuf,

    /// Output PGM
    #[arg(long)]
    out: PathBuf,

    /// Output of the LFCR alone or of LFCR+VDSR
    #[arg(long, value_enum, default_value = "vdsr")]
    stage: StageArg,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[command(flatten)]
    sensor: SensorOpts,

    /// Directory of reference images
    #[arg(long)]
    dataset: PathBuf,

    /// Comma-separated methods: reference, bicubic, lfcr, lfcr+vdsr
    #[arg(long, value_delimiter = ',', default_value = "bicubic,lfcr,lfcr+vdsr")]
    methods: Vec<String>,

    /// Checkpoint for the lfcr and lfcr+vdsr methods
    #[arg(long)]
    checkpoint: Option<PathBuf>,

    /// Per-image CSV
    #[arg(long)]
    out: Option<PathBuf>,

    /// Summary JSON with dataset means
    #[arg(long)]
    summary: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// Operation or network to check, or `all`
    #[arg(long, default_value = "all")]
    target: String,

    /// Number of seeds per target, starting at --seed
    #[arg(long, default_value_t = 20)]
    seeds: u64,
}

#[derive(Args, Debug)]
struct CurvesArgs {
    #[command(flatten)]
    sensor: SensorOpts,

    /// Directory of evaluation images
    #[arg(long)]
    dataset: PathBuf,

    /// Directory holding <sensor>_sd<factor>.nrsr checkpoints
    #[arg(long)]
    checkpoint_dir: PathBuf,

    /// Shift augmentation factors
    #[arg(long = "shift-da-list", value_delimiter = ',', default_value = "1,4,8,16")]
    factors: Vec<usize>,

    /// Train the LFCR for every missing factor on this image directory
    #[arg(long)]
    train: Option<PathBuf>,

    /// key=value configuration file for --train
    #[arg(long)]
    config: Option<PathBuf>,

    /// Epochs for --train
    #[arg(long)]
    epochs: Option<usize>,

    /// Output CSV
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let numerical = e
                .chain()
                .any(|c| c.downcast_ref::<Error>().is_some_and(Error::is_numerical));
            ExitCode::from(if numerical { EXIT_NUMERICAL } else { EXIT_USAGE })
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let parallel = cli.threads != Some(1);
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let seed = cli.seed;
    match cli.command {
        Command::Mask(a) => cmd_mask(a, seed.unwrap_or(0)),
        Command::Sample(a) => cmd_sample(a, seed.unwrap_or(0)),
        Command::Train(a) => cmd_train(a, seed, parallel),
        Command::Reconstruct(a) => cmd_reconstruct(a, seed.unwrap_or(0)),
        Command::Evaluate(a) => cmd_evaluate(a, seed.unwrap_or(0)),
        Command::Gradcheck(a) => cmd_gradcheck(a, seed.unwrap_or(0)),
        Command::Curves(a) => cmd_curves(a, seed, parallel),
    }
}

/// Sensor from the flags, falling back to (and checked against) a
/// checkpoint's sensor.
fn resolve_sensor(opts: &SensorOpts, seed: u64, ckpt: Option<&Checkpoint>) -> anyhow::Result<Sensor> {
    let stored = ckpt.map(Checkpoint::sensor).transpose()?;
    let kind = match (opts.sensor, &stored) {
        (Some(k), _) => SensorKind::from(k),
        (None, Some(s)) => s.kind(),
        (None, None) => bail!("--sensor is required"),
    };
    let sensor = match (&opts.mask, &stored) {
        (_, _) if kind == SensorKind::LowResolution => Sensor::LowResolution,
        (Some(path), _) => {
            let m = SamplingMask::load(path).with_context(|| format!("reading mask {}", path.display()))?;
            Sensor::new(kind, Some(m))?
        }
        (None, Some(s)) if s.kind() == kind => s.clone(),
        (None, _) => {
            let mk = MaskKind::try_from(kind)?;
            log::info!("no --mask given, using the {kind} mask generated from seed {seed}");
            Sensor::Masked(SamplingMask::generate(mk, seed))
        }
    };
    if let Some(c) = ckpt {
        c.check_sensor(&sensor)?;
    }
    Ok(sensor)
}

fn cmd_mask(a: MaskArgs, seed: u64) -> anyhow::Result<()> {
    let kind = match a.kind {
        MaskArg::Quarter => MaskKind::Quarter,
        MaskArg::ThreeQuarter => MaskKind::ThreeQuarter,
    };
    let mask = SamplingMask::generate(kind, seed);
    mask.save(&a.out)?;
    let h = mask.histogram();
    println!("wrote {} mask (seed {seed}) to {}", kind, a.out.display());
    println!("quadrant histogram: tl={} tr={} bl={} br={}", h[0], h[1], h[2], h[3]);
    Ok(())
}

fn cmd_sample(a: SampleArgs, seed: u64) -> anyhow::Result<()> {
    let sensor = resolve_sensor(&a.sensor, seed, None)?;
    let f = read_gray(&a.input)?;
    let grid = sensor.measure(&f)?;
    grid.save(&a.out)?;
    if let Some(p) = &a.preview {
        write_pgm(&grid.values, p)?;
    }
    println!(
        "{} read-out {}x{} of {}x{} image written to {}.json",
        sensor.kind(),
        grid.values.width(),
        grid.values.height(),
        f.width(),
        f.height(),
        a.out.display()
    );
    Ok(())
}

fn load_config(path: Option<&Path>, overrides: &[String]) -> anyhow::Result<TrainConfig> {
    let mut config = match path {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .with_context(|| format!("--set `{o}` is not KEY=VALUE"))?;
        config.set(k.trim(), v.trim())?;
    }
    Ok(config)
}

fn cmd_train(a: TrainArgs, seed: Option<u64>, parallel: bool) -> anyhow::Result<()> {
    let mut config = load_config(a.config.as_deref(), &a.overrides)?;
    if let Some(e) = a.epochs {
        config.epochs = e;
        config.vdsr_epochs = None;
    }
    if let Some(f) = a.shift_da {
        config.shift_set = shift_set_for_factor(f)?;
    }
    if let Some(s) = seed {
        config.seed = s;
    }
    config.validate()?;
    let resume = a
        .resume
        .as_deref()
        .map(Checkpoint::load)
        .transpose()
        .context("reading --resume checkpoint")?;
    let sensor = resolve_sensor(&a.sensor, config.seed, resume.as_ref())?;
    let images: Vec<_> = read_dataset(&a.data)?.into_iter().map(|(_, img)| img).collect();
    if images.is_empty() {
        bail!("no readable images in {}", a.data.display());
    }
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    fs::write(a.out.join("config.txt"), config.to_string())
        .with_context(|| format!("writing config to {}", a.out.display()))?;
    let samples = nrsr_core::train::extract_patches(&images, &config).len() * config.augmentation_factor();
    println!("samples per epoch: {samples}");
    let report = train_pipeline(
        &images,
        sensor,
        &config,
        a.stage.into(),
        resume.as_ref(),
        Some(&a.out),
        parallel,
    )?;
    for (name, r) in [("lfcr", &report.lfcr_report), ("vdsr", &report.vdsr_report)] {
        if let Some(r) = r {
            if let Some(loss) = r.epoch_losses.last() {
                println!("{name}: {} epochs, final step {}, last epoch loss {loss:.6e}", r.epoch_losses.len(), r.final_step);
            }
        }
    }
    if let Some(p) = &report.model_path {
        println!("model written to {}", p.display());
    }
    Ok(())
}

fn cmd_reconstruct(a: ReconstructArgs, seed: u64) -> anyhow::Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let sensor = resolve_sensor(&a.sensor, seed, Some(&ckpt))?;
    let rec = Reconstructor::from_checkpoint(&ckpt, Some(&sensor))?;
    let is_readout = a.input.extension().is_some_and(|e| e == "json");
    let out = if is_readout {
        let grid = MeasurementGrid::load(&a.input)?;
        rec.reconstruct_grid(&grid, a.stage.into())?
    } else {
        rec.reconstruct(&read_gray(&a.input)?, a.stage.into())?
    };
    write_pgm(&out, &a.out)?;
    println!("wrote {}x{} reconstruction to {}", out.width(), out.height(), a.out.display());
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs, seed: u64) -> anyhow::Result<()> {
    let methods = a
        .methods
        .iter()
        .map(|m| m.parse::<Method>())
        .collect::<Result<Vec<_>, _>>()?;
    let ckpt = match &a.checkpoint {
        Some(p) if p.exists() => Some(Checkpoint::load(p)?),
        Some(p) => {
            log::warn!("checkpoint {} not found; model rows are absent", p.display());
            None
        }
        None => None,
    };
    let sensor = resolve_sensor(&a.sensor, seed, ckpt.as_ref())?;
    let model = ckpt
        .as_ref()
        .map(|c| Reconstructor::from_checkpoint(c, Some(&sensor)))
        .transpose()?;
    let images = read_dataset(&a.dataset)?;
    if images.is_empty() {
        bail!("no readable images in {}", a.dataset.display());
    }
    let mut reports: Vec<EvalReport> = Vec::new();
    let mut absent = Vec::new();
    for m in methods {
        let available = match m {
            Method::Lfcr => model.is_some(),
            Method::LfcrVdsr => model.as_ref().is_some_and(|r| r.vdsr.is_some()),
            _ => true,
        };
        if available {
            reports.push(evaluate(m, &images, &sensor, model.as_ref())?);
        } else {
            absent.push(m);
        }
    }
    println!("{:<10} {:<15} {:>6} {:>10} {:>8}", "method", "sensor", "images", "PSNR [dB]", "SSIM");
    for r in &reports {
        let p = r.mean_psnr();
        let p = if p.is_finite() { format!("{p:.2}") } else { "inf".into() };
        println!("{:<10} {:<15} {:>6} {:>10} {:>8.4}", r.method, r.sensor, r.rows.len(), p, r.mean_ssim());
    }
    for m in &absent {
        println!("{:<10} {:<15} {:>6} {:>10} {:>8}", m, sensor.kind(), "-", "absent", "absent");
    }
    if let Some(p) = &a.out {
        let mut csv = String::from("image,method,sensor,psnr_db,ssim\n");
        for r in &reports {
            csv.extend(r.to_csv().lines().skip(1).map(|l| format!("{l}\n")));
        }
        fs::write(p, csv).with_context(|| format!("writing {}", p.display()))?;
    }
    if let Some(p) = &a.summary {
        let mut rows: Vec<serde_json::Value> = reports.iter().map(EvalReport::summary_json).collect();
        rows.extend(absent.iter().map(|m| {
            serde_json::json!({"method": m.as_str(), "sensor": sensor.kind().as_str(), "absent": true})
        }));
        fs::write(p, serde_json::to_string_pretty(&rows)? + "\n")
            .with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs, seed: u64) -> anyhow::Result<()> {
    let targets: Vec<Target> = if a.target == "all" {
        Target::ALL.to_vec()
    } else {
        vec![a.target.parse()?]
    };
    if a.seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    println!("{:<16} {:>6} {:>12} {:>8} {:>6}  result", "target", "seeds", "max_rel_err", "checked", "kinks");
    let mut failed = Vec::new();
    for t in targets {
        let mut report = gradsuite::run(t, seed)?;
        for s in seed + 1..seed + a.seeds {
            report = report.merge(gradsuite::run(t, s)?);
        }
        let ok = report.passes(TOLERANCE);
        println!(
            "{:<16} {:>6} {:>12.3e} {:>8} {:>6}  {}",
            t.as_str(),
            a.seeds,
            report.max_rel_error,
            report.checked,
            report.skipped_kinks,
            if ok { "PASS" } else { "FAIL" }
        );
        if !ok {
            failed.push(t.as_str());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::GradCheck(format!("{} (tolerance {TOLERANCE:e})", failed.join(", "))).into())
    }
}

fn cmd_curves(a: CurvesArgs, seed: Option<u64>, parallel: bool) -> anyhow::Result<()> {
    let kind: SensorKind = a.sensor.sensor.context("--sensor is required")?.into();
    fs::create_dir_all(&a.checkpoint_dir)
        .with_context(|| format!("creating {}", a.checkpoint_dir.display()))?;
    let path_of = |f: usize| a.checkpoint_dir.join(curve_checkpoint_name(kind, f));
    if let Some(data) = &a.train {
        let mut config = load_config(a.config.as_deref(), &[])?;
        if let Some(e) = a.epochs {
            config.epochs = e;
        }
        if let Some(s) = seed {
            config.seed = s;
        }
        let sensor = resolve_sensor(&a.sensor, config.seed, None)?;
        let images: Vec<_> = read_dataset(data)?.into_iter().map(|(_, img)| img).collect();
        for &f in &a.factors {
            if path_of(f).exists() {
                continue;
            }
            let c = TrainConfig {
                shift_set: shift_set_for_factor(f)?,
                ..config.clone()
            };
            log::info!("training LFCR with shift factor {f}");
            let run = train_pipeline(&images, sensor.clone(), &c, Stage::Lfcr, None, None, parallel)?;
            run.checkpoint().save(&path_of(f))?;
        }
    }
    let mut models = Vec::new();
    for &f in &a.factors {
        let p = path_of(f);
        let ckpt = if p.exists() { Some(Checkpoint::load(&p)?) } else { None };
        if ckpt.is_none() {
            log::warn!("{} not found; factor {f} is absent", p.display());
        }
        models.push((f, ckpt));
    }
    let first = models.iter().find_map(|(_, c)| c.as_ref());
    let sensor = resolve_sensor(&a.sensor, seed.unwrap_or(0), first)?;
    let models = models
        .into_iter()
        .map(|(f, c)| Ok((f, c.map(|c| Reconstructor::from_checkpoint(&c, Some(&sensor))).transpose()?)))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let images = read_dataset(&a.dataset)?;
    if images.is_empty() {
        bail!("no readable images in {}", a.dataset.display());
    }
    let csv = curve_csv(&shift_curve(&images, &sensor, &models)?);
    print!("{csv}");
    if let Some(p) = &a.out {
        fs::write(p, &csv).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}
