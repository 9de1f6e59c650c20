mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::ConfigFile;
use torq::io::{self, DType};
use torq::metrics::{self, ArmReport, CalibReport, ComparisonReport, Method, REPORT_SCHEMA};
use torq::synth::{self, DEFAULT_BLOCKS, DEFAULT_LANES, DEFAULT_SEED, DEFAULT_TOKENS};
use torq::{
    BlockShape, BlockTensor, CalibrationConfig, Distribution, FormatKind, MxFormat, RotationBundle, ScaleMode, Stages,
    SynthConfig, TorqError,
};

const EXIT_USAGE: u8 = 2;
const EXIT_CONVERGENCE: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "torq", version, about = "Rotation calibration for microscaling quantization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a seeded synthetic activation tensor.
    Synth(SynthArgs),
    /// Fit a rotation bundle on a calibration tensor.
    Calibrate(CalibrateArgs),
    /// Quantize a tensor through a bundle and write the reconstruction.
    Quantize(QuantizeArgs),
    /// Run RTN, inter-only, intra-only and full calibration on held-out data.
    Compare(CompareArgs),
    /// Print a report and optionally export its histograms.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct ShapeArgs {
    #[arg(long)]
    blocks: Option<usize>,
    #[arg(long)]
    lanes: Option<usize>,
    /// key = value file; flags take precedence over its entries.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    tokens: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// gaussian, lognormal, laplace or outlier_mixture.
    #[arg(long)]
    dist: Option<String>,
    /// Outlier channel probability (outlier_mixture).
    #[arg(long)]
    p: Option<f64>,
    /// Outlier channel gain (outlier_mixture).
    #[arg(long)]
    outlier_scale: Option<f64>,
    /// Store f64 instead of f32.
    #[arg(long)]
    f64: bool,
    #[command(flatten)]
    shape: ShapeArgs,
}

#[derive(Debug, Args)]
struct CalibrateArgs {
    #[arg(long)]
    input: PathBuf,
    /// Where to write the bundle.
    #[arg(long)]
    bundle: PathBuf,
    /// Where to write the JSON report.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Prefix for `<prefix>.before.csv` and `<prefix>.after.csv`.
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    format: Option<String>,
    /// calibrated, dynamic or aligned.
    #[arg(long)]
    scale_mode: Option<String>,
    /// Include per-stage wall-clock times in the report.
    #[arg(long)]
    timing: bool,
    #[command(flatten)]
    shape: ShapeArgs,
}

#[derive(Debug, Args)]
struct QuantizeArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    bundle: PathBuf,
    /// Reconstructed tensor.
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
    #[arg(long)]
    scale_mode: Option<String>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CompareArgs {
    /// Calibration tensor. Without `--eval` its second half is held out.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    eval: Option<PathBuf>,
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    format: Option<String>,
    #[arg(long)]
    scale_mode: Option<String>,
    #[command(flatten)]
    shape: ShapeArgs,
}

#[derive(Debug, Args)]
struct ReportArgs {
    #[arg(long)]
    input: PathBuf,
    /// Prefix for the histogram CSV files.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug)]
enum Failure {
    Usage(TorqError),
    NotConverged,
}

impl From<TorqError> for Failure {
    fn from(e: TorqError) -> Self {
        Failure::Usage(e)
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("torq: {e}");
        return ExitCode::from(EXIT_USAGE);
    }
    let outcome = match cli.command {
        Command::Synth(a) => synth_cmd(a),
        Command::Calibrate(a) => calibrate_cmd(a),
        Command::Quantize(a) => quantize_cmd(a),
        Command::Compare(a) => compare_cmd(a),
        Command::Report(a) => report_cmd(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("torq: {e}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::NotConverged) => {
            eprintln!("torq: warning: equalization did not converge; outputs are flagged");
            ExitCode::from(EXIT_CONVERGENCE)
        }
    }
}

fn configure_threads() -> Result<(), TorqError> {
    let Ok(raw) = std::env::var("TORQ_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| TorqError::InvalidInput(format!("TORQ_THREADS must be a positive integer, got '{raw}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| TorqError::InvalidInput(e.to_string()))
}

fn load_config(path: Option<&Path>) -> Result<ConfigFile, TorqError> {
    path.map(ConfigFile::load).transpose().map(Option::unwrap_or_default)
}

fn resolve_shape(args: &ShapeArgs, cfg: &ConfigFile) -> Result<BlockShape, TorqError> {
    let blocks = cfg.pick(args.blocks, "blocks")?.unwrap_or(DEFAULT_BLOCKS);
    let lanes = cfg.pick(args.lanes, "lanes")?.unwrap_or(DEFAULT_LANES);
    BlockShape::new(blocks, lanes)
}

fn resolve_format(flag: Option<&String>, cfg: &ConfigFile) -> Result<MxFormat, TorqError> {
    let name = cfg.pick(flag.cloned(), "format")?.unwrap_or_else(|| "mxfp4".into());
    Ok(MxFormat::from_kind(name.parse::<FormatKind>()?))
}

fn resolve_scale_mode(flag: Option<&String>, cfg: &ConfigFile) -> Result<ScaleMode, TorqError> {
    Ok(match cfg.pick(flag.cloned(), "scale_mode")? {
        Some(s) => s.parse()?,
        None => ScaleMode::default(),
    })
}

fn load_tensor(path: &Path, shape: BlockShape) -> Result<(BlockTensor, DType), TorqError> {
    let raw = io::read_tensor(path)?;
    let dtype = raw.dtype;
    Ok((raw.into_blocks(shape)?, dtype))
}

fn dataset_name(path: &Path) -> String {
    path.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn synth_cmd(a: SynthArgs) -> Outcome {
    let cfg = load_config(a.shape.config.as_deref())?;
    let shape = resolve_shape(&a.shape, &cfg)?;
    let name = cfg.pick(a.dist, "dist")?.unwrap_or_else(|| "outlier_mixture".into());
    let mut dist = Distribution::by_name(&name)?;
    match &mut dist {
        Distribution::OutlierMixture { p, scale } => {
            *p = a.p.unwrap_or(*p);
            *scale = a.outlier_scale.unwrap_or(*scale);
        }
        _ if a.p.is_some() || a.outlier_scale.is_some() => {
            return Err(TorqError::InvalidInput("--p and --outlier-scale apply to outlier_mixture only".into()).into());
        }
        _ => {}
    }
    let synth_cfg = SynthConfig {
        tokens: cfg.pick(a.tokens, "tokens")?.unwrap_or(DEFAULT_TOKENS),
        shape,
        seed: cfg.pick(a.seed, "seed")?.unwrap_or(DEFAULT_SEED),
        dist,
    };
    let data = synth::generate(&synth_cfg)?;
    let dtype = if a.f64 { DType::F64 } else { DType::F32 };
    io::write_tensor(&a.output, &data, dtype)?;
    Ok(())
}

fn calibrate_cmd(a: CalibrateArgs) -> Outcome {
    let cfg = load_config(a.shape.config.as_deref())?;
    let shape = resolve_shape(&a.shape, &cfg)?;
    let fmt = resolve_format(a.format.as_ref(), &cfg)?;
    let mode = resolve_scale_mode(a.scale_mode.as_ref(), &cfg)?;
    let mut calib_cfg = cfg.calibration()?;
    calib_cfg.strict = false;
    let (data, _) = load_tensor(&a.input, shape)?;

    let (bundle, timing) = torq::calibrate_timed(&data, &calib_cfg, &fmt, &dataset_name(&a.input))?;
    io::write_bundle(&a.bundle, &bundle)?;
    if let Some(out) = &a.output {
        let positions = metrics::position_diagnostics(&data, &bundle, &calib_cfg.inter, calib_cfg.ridge)?;
        let report = CalibReport::build(&data, &bundle, mode, Some(positions), a.timing.then_some(timing))?;
        metrics::emit_report(&report, out, a.csv.as_deref())?;
    }
    if bundle.meta.converged {
        Ok(())
    } else {
        Err(Failure::NotConverged)
    }
}

fn quantize_cmd(a: QuantizeArgs) -> Outcome {
    let cfg = load_config(a.config.as_deref())?;
    let mode = resolve_scale_mode(a.scale_mode.as_ref(), &cfg)?;
    let bundle = io::read_bundle(&a.bundle)?;
    let (data, dtype) = load_tensor(&a.input, bundle.shape)?;
    let rebuilt = data
        .samples()
        .map(|x| torq::round_trip(&x, &bundle, mode))
        .collect::<Result<Vec<_>, _>>()?;
    let rebuilt = BlockTensor::from_samples(bundle.shape, &rebuilt)?;
    io::write_tensor(&a.output, &rebuilt, dtype)?;
    if let Some(path) = &a.report {
        let report = CalibReport::build(&data, &bundle, mode, None, None)?;
        metrics::emit_report(&report, path, a.csv.as_deref())?;
    }
    if bundle.meta.converged {
        Ok(())
    } else {
        Err(Failure::NotConverged)
    }
}

/// Arm names in report order.
pub const ARMS: [&str; 4] = ["rtn", "inter_only", "intra_only", "full"];

fn compare_cmd(a: CompareArgs) -> Outcome {
    let cfg = load_config(a.shape.config.as_deref())?;
    let shape = resolve_shape(&a.shape, &cfg)?;
    let fmt = resolve_format(a.format.as_ref(), &cfg)?;
    let mode = resolve_scale_mode(a.scale_mode.as_ref(), &cfg)?;
    let base = cfg.calibration()?;
    let (input, _) = load_tensor(&a.input, shape)?;
    let (calib, eval) = match &a.eval {
        Some(path) => (input, load_tensor(path, shape)?.0),
        None => {
            let head = input.tokens() / 2;
            synth::split_tokens(&input, head)?
        }
    };
    let dataset = dataset_name(&a.input);

    let mut converged = true;
    let mut arms = Vec::with_capacity(ARMS.len());
    for (name, stages) in ARMS.iter().zip([(false, false), (true, false), (false, true), (true, true)]) {
        let bundle = if stages == (false, false) {
            RotationBundle::identity(shape, fmt.kind())
        } else {
            let arm_cfg = CalibrationConfig {
                stages: Stages {
                    inter: stages.0,
                    intra: stages.1,
                },
                strict: false,
                ..base
            };
            torq::calibrate(&calib, &arm_cfg, &fmt, &dataset)?
        };
        converged &= bundle.meta.converged;
        arms.push(ArmReport {
            name: name.to_string(),
            stats: metrics::evaluate(&eval, &fmt, Method::Rotated(&bundle, mode))?,
        });
    }
    let report = ComparisonReport {
        schema: REPORT_SCHEMA.to_string(),
        format: fmt.name().to_string(),
        blocks: shape.blocks(),
        lanes: shape.lanes(),
        calibration_tokens: calib.tokens(),
        eval_tokens: eval.tokens(),
        scale_mode: mode,
        arms,
    };
    io::write_atomic(&a.output, metrics::to_report_json(&report)?.as_bytes())?;
    if converged {
        Ok(())
    } else {
        Err(Failure::NotConverged)
    }
}

fn report_cmd(a: ReportArgs) -> Outcome {
    let text = std::fs::read_to_string(&a.input).map_err(|e| TorqError::Io {
        path: a.input.clone(),
        source: e,
    })?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| TorqError::Malformed(format!("{}: {e}", a.input.display())))?;
    if value.get("schema").and_then(|s| s.as_str()) != Some(REPORT_SCHEMA) {
        return Err(TorqError::Malformed(format!("{}: not a {REPORT_SCHEMA} report", a.input.display())).into());
    }
    if value.get("arms").is_some() {
        let report: ComparisonReport =
            serde_json::from_value(value).map_err(|e| TorqError::Malformed(e.to_string()))?;
        if a.output.is_some() {
            return Err(TorqError::InvalidInput("comparison reports carry no before/after histograms".into()).into());
        }
        println!(
            "{} {}x{}, {} calibration / {} eval tokens",
            report.format, report.blocks, report.lanes, report.calibration_tokens, report.eval_tokens
        );
        println!("{:<12} {:>14} {:>12} {:>10}", "arm", "mse", "code_loss", "cv");
        for arm in &report.arms {
            println!(
                "{:<12} {:>14.6e} {:>12.6} {:>10.4}",
                arm.name, arm.stats.mse, arm.stats.code_loss, arm.stats.spread.cv
            );
        }
        return Ok(());
    }

    let report = metrics::read_report(&a.input)?;
    println!(
        "{} {}x{}, {} tokens, {} inter steps, converged: {}",
        report.format, report.blocks, report.lanes, report.tokens, report.inter_steps, report.converged
    );
    println!("{:<8} {:>14} {:>12} {:>10}", "", "mse", "code_loss", "cv");
    for (label, s) in [("before", &report.before), ("after", &report.after)] {
        println!("{:<8} {:>14.6e} {:>12.6} {:>10.4}", label, s.mse, s.code_loss, s.spread.cv);
    }
    if let Some(prefix) = &a.output {
        let fmt = MxFormat::by_name(&report.format)?;
        for (label, s) in [("before", &report.before), ("after", &report.after)] {
            let path = PathBuf::from(format!("{}.{label}.csv", prefix.display()));
            io::write_atomic(&path, metrics::histogram_csv(&s.occupancy, &fmt).as_bytes())?;
        }
    }
    Ok(())
}
