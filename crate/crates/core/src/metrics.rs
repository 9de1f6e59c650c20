//! Evaluation quantities and machine-readable reports.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::block::{block_variances, estimate_covariances, BlockShape, BlockTensor};
use crate::error::{Result, TorqError};
use crate::format::{clip_to_pow2, MxFormat};
use crate::inter::{self, EqualizationConfig};
use crate::pipeline::{self, RotationBundle, ScaleMode};

pub const REPORT_SCHEMA: &str = "torq-report/1";

/// Histogram resolution of the log-magnitude density estimate.
pub const KL_BINS: usize = 32;

/// Mean squared elementwise difference.
pub fn quantization_mse(x: &DMatrix<f64>, xhat: &DMatrix<f64>) -> Result<f64> {
    if x.shape() != xhat.shape() {
        return Err(TorqError::Shape(format!(
            "cannot compare {:?} with {:?}",
            x.shape(),
            xhat.shape()
        )));
    }
    if x.is_empty() {
        return Err(TorqError::InvalidInput("mse of empty matrices".into()));
    }
    let sum: f64 = x.iter().zip(xhat.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sum / x.len() as f64)
}

/// Factors of the asymptotic block-MSE lower bound
/// `(Δ_min² / 12) K · exp(2 Var(log2|a|)) · exp(KL(f_U || U[L, U]))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundDiagnostics {
    pub granularity: f64,
    pub shape_factor: f64,
    pub matching_factor: f64,
    pub bound: f64,
    pub log2_variance: f64,
    pub kl: f64,
    pub nonzero: usize,
    pub zeros: usize,
}

/// Bound diagnostics for one normalized block `a = z / s`.
///
/// Zeros are excluded from the log-magnitude population and counted
/// separately. The density of `u = log2|a|` is a 32-bin histogram on
/// `[L, U]`; values outside the range fall into the edge bins and empty bins
/// contribute nothing to the divergence.
pub fn bound_diagnostics(normalized_block: &[f64], fmt: &MxFormat) -> Result<BoundDiagnostics> {
    bound_for_population(normalized_block, normalized_block.len(), fmt)
}

fn bound_for_population(values: &[f64], lanes: usize, fmt: &MxFormat) -> Result<BoundDiagnostics> {
    let logs: Vec<f64> = values
        .iter()
        .filter(|v| **v != 0.0)
        .map(|v| v.abs().log2())
        .collect();
    let zeros = values.len() - logs.len();
    if logs.len() < 2 {
        return Err(TorqError::Undefined(format!(
            "need at least 2 nonzero magnitudes, got {}",
            logs.len()
        )));
    }
    let n = logs.len() as f64;
    let mean = logs.iter().sum::<f64>() / n;
    let log2_variance = logs.iter().map(|u| (u - mean) * (u - mean)).sum::<f64>() / n;

    let (lo, hi) = fmt.log_magnitude_range();
    let width = (hi - lo) / KL_BINS as f64;
    let mut counts = [0usize; KL_BINS];
    for u in &logs {
        let idx = ((u - lo) / width).floor();
        let idx = if idx < 0.0 { 0 } else { (idx as usize).min(KL_BINS - 1) };
        counts[idx] += 1;
    }
    // plug-in estimate: sum p_i ln(p_i / (1 / bins))
    let kl: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            p * (p * KL_BINS as f64).ln()
        })
        .sum();

    let step = fmt.min_step();
    let granularity = step * step / 12.0 * lanes as f64;
    let shape_factor = (2.0 * log2_variance).exp();
    let matching_factor = kl.exp();
    Ok(BoundDiagnostics {
        granularity,
        shape_factor,
        matching_factor,
        bound: granularity * shape_factor * matching_factor,
        log2_variance,
        kl,
        nonzero: logs.len(),
        zeros,
    })
}

/// Per-block bound factors averaged over all blocks, plus the same factors
/// for the pooled population of every normalized magnitude.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundSummary {
    pub blocks: usize,
    pub undefined_blocks: usize,
    pub mean_granularity: Option<f64>,
    pub mean_shape_factor: Option<f64>,
    pub mean_matching_factor: Option<f64>,
    pub mean_bound: Option<f64>,
    /// Sum of per-block bounds over defined blocks.
    pub total_bound: f64,
    pub pooled: Option<BoundDiagnostics>,
}

/// Spread of the block-energy population `{||z_{t,b}||^2}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceSpread {
    /// Coefficient of variation (population standard deviation / mean).
    pub cv: f64,
    pub max_over_mean: f64,
}

/// Block-energy spread of a tensor. An all-zero population reports `cv = 0`
/// and `max_over_mean = 1`.
pub fn variance_spread(data: &BlockTensor) -> Result<VarianceSpread> {
    let energies = block_variances(data);
    spread_of(energies.as_slice())
}

fn spread_of(values: &[f64]) -> Result<VarianceSpread> {
    if values.len() < 2 {
        return Err(TorqError::InvalidInput("spread needs at least two blocks".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if mean == 0.0 {
        return Ok(VarianceSpread {
            cv: 0.0,
            max_over_mean: 1.0,
        });
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(VarianceSpread {
        cv: var.sqrt() / mean,
        max_over_mean: max / mean,
    })
}

/// How an evaluation arm transforms and scales the data.
#[derive(Debug, Clone, Copy)]
pub enum Method<'a> {
    /// No rotation, the format's default scale rule.
    Rtn,
    /// Bundle rotations with the given scale source.
    Rotated(&'a RotationBundle, ScaleMode),
}

/// Quality statistics of one quantization method on one tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmStats {
    pub mse: f64,
    pub code_loss: f64,
    pub occupancy: Vec<f64>,
    pub spread: VarianceSpread,
    pub bound: BoundSummary,
}

/// Quantizes every sample of `data` with `method`, reconstructs it in the
/// original coordinates and gathers the statistics.
pub fn evaluate(data: &BlockTensor, fmt: &MxFormat, method: Method<'_>) -> Result<ArmStats> {
    let shape = data.shape();
    if let Method::Rotated(bundle, _) = method {
        if bundle.shape != shape {
            return Err(TorqError::Shape(format!(
                "bundle shape {:?} does not match data shape {:?}",
                bundle.shape, shape
            )));
        }
    }
    let mut sq_err = 0.0;
    let mut counts = vec![0u64; fmt.bins()];
    let mut energies = Vec::with_capacity(data.tokens() * shape.blocks());
    let mut normalized_all = Vec::with_capacity(data.tokens() * shape.dim());
    let mut per_block = Vec::new();
    let mut undefined = 0usize;
    let mut row = vec![0.0; shape.lanes()];

    for x in data.samples() {
        let (z, zhat, scales, recon) = match method {
            Method::Rtn => {
                let (zhat, _) = pipeline::rtn_baseline(&x, fmt)?;
                let scales: Vec<f64> = (0..shape.blocks())
                    .map(|b| fmt.default_scale(&x.row(b).iter().copied().collect::<Vec<_>>()))
                    .collect::<Result<_>>()?;
                (x.clone(), zhat.clone(), scales, zhat)
            }
            Method::Rotated(bundle, mode) => {
                let z = &bundle.r_inter * &x * &bundle.r_intra;
                let q = pipeline::forward_quantize(&x, bundle, mode)?;
                let recon = pipeline::inverse_matrix(&q.dequantized, bundle)?;
                (z, q.dequantized, q.scales, recon)
            }
        };
        let _ = zhat;
        sq_err += x
            .iter()
            .zip(recon.iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
        for b in 0..shape.blocks() {
            let mut energy = 0.0;
            for (k, r) in row.iter_mut().enumerate() {
                let v = z[(b, k)];
                energy += v * v;
                *r = v / scales[b];
            }
            energies.push(energy);
            for r in &row {
                counts[fmt.bin_index(r.abs())] += 1;
            }
            normalized_all.extend_from_slice(&row);
            match bound_diagnostics(&row, fmt) {
                Ok(d) => per_block.push(d),
                Err(TorqError::Undefined(_)) => undefined += 1,
                Err(e) => return Err(e),
            }
        }
    }

    let total = normalized_all.len() as u64;
    let mean_of = |f: fn(&BoundDiagnostics) -> f64| -> Option<f64> {
        (!per_block.is_empty()).then(|| per_block.iter().map(f).sum::<f64>() / per_block.len() as f64)
    };
    let bound = BoundSummary {
        blocks: per_block.len() + undefined,
        undefined_blocks: undefined,
        mean_granularity: mean_of(|d| d.granularity),
        mean_shape_factor: mean_of(|d| d.shape_factor),
        mean_matching_factor: mean_of(|d| d.matching_factor),
        mean_bound: mean_of(|d| d.bound),
        total_bound: per_block.iter().map(|d| d.bound).sum(),
        pooled: bound_for_population(&normalized_all, shape.lanes(), fmt).ok(),
    };

    Ok(ArmStats {
        mse: sq_err / (data.tokens() * shape.dim()) as f64,
        code_loss: crate::intra::loss_from_counts(&counts, total),
        occupancy: counts.iter().map(|&c| c as f64 / total as f64).collect(),
        spread: spread_of(&energies)?,
        bound,
    })
}

/// How far the single pooled rotation is from equalizing each lane's own
/// covariance, next to what per-lane rotations would achieve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionDiagnostics {
    /// `max_k max_b |(R Σ_k R^T)_bb - c_k| / c_k` for the pooled rotation.
    pub pooled_relative_spread: f64,
    /// The same quantity when every lane gets its own rotation.
    pub per_position_relative_spread: f64,
}

pub fn position_diagnostics(
    data: &BlockTensor,
    bundle: &RotationBundle,
    cfg: &EqualizationConfig,
    ridge: f64,
) -> Result<PositionDiagnostics> {
    let cov = estimate_covariances(data, ridge);
    let relative = |r: &DMatrix<f64>, sigma: &DMatrix<f64>| {
        let c = inter::equalization_target(sigma);
        let pushed = r * sigma * r.transpose();
        (0..pushed.nrows())
            .map(|i| (pushed[(i, i)] - c).abs() / c.abs().max(f64::MIN_POSITIVE))
            .fold(0.0, f64::max)
    };
    let pooled = cov
        .per_position
        .iter()
        .map(|s| relative(&bundle.r_inter, s))
        .fold(0.0, f64::max);
    let per = inter::per_position_rotations(&cov, cfg)?
        .iter()
        .zip(&cov.per_position)
        .map(|(rot, s)| relative(&rot.matrix, s))
        .fold(0.0, f64::max);
    Ok(PositionDiagnostics {
        pooled_relative_spread: pooled,
        per_position_relative_spread: per,
    })
}

/// Wall-clock time of the calibration stages, in milliseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub covariance_ms: f64,
    pub inter_ms: f64,
    pub intra_ms: f64,
    pub total_ms: f64,
}

/// Before/after statistics of a calibrated bundle on one tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibReport {
    pub schema: String,
    pub format: String,
    pub blocks: usize,
    pub lanes: usize,
    pub tokens: usize,
    pub dataset: String,
    pub scale_mode: ScaleMode,
    pub bundle_parameters: usize,
    pub inter_steps: usize,
    pub achieved_spread: f64,
    pub converged: bool,
    pub loss_trace: Vec<f64>,
    pub s_step_trace: Vec<f64>,
    pub before: ArmStats,
    pub after: ArmStats,
    pub positions: Option<PositionDiagnostics>,
    pub timing: Option<StageTiming>,
}

impl CalibReport {
    /// RTN on the raw data versus the bundle's forward path.
    pub fn build(
        data: &BlockTensor,
        bundle: &RotationBundle,
        mode: ScaleMode,
        positions: Option<PositionDiagnostics>,
        timing: Option<StageTiming>,
    ) -> Result<Self> {
        let fmt = bundle.mx_format();
        let shape: BlockShape = data.shape();
        Ok(Self {
            schema: REPORT_SCHEMA.to_string(),
            format: fmt.name().to_string(),
            blocks: shape.blocks(),
            lanes: shape.lanes(),
            tokens: data.tokens(),
            dataset: bundle.meta.dataset.clone(),
            scale_mode: mode,
            bundle_parameters: bundle.parameter_count(),
            inter_steps: bundle.meta.inter_steps,
            achieved_spread: bundle.meta.achieved_spread,
            converged: bundle.meta.converged,
            loss_trace: bundle.meta.loss_trace.clone(),
            s_step_trace: bundle.meta.s_step_trace.clone(),
            before: evaluate(data, &fmt, Method::Rtn)?,
            after: evaluate(data, &fmt, Method::Rotated(bundle, mode))?,
            positions,
            timing,
        })
    }
}

/// One arm of an ablation comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub name: String,
    pub stats: ArmStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub schema: String,
    pub format: String,
    pub blocks: usize,
    pub lanes: usize,
    pub calibration_tokens: usize,
    pub eval_tokens: usize,
    pub scale_mode: ScaleMode,
    pub arms: Vec<ArmReport>,
}

/// Serializes `value` as deterministic JSON: keys sorted, two-space indent,
/// every float written with 17 significant digits, missing optionals as
/// `null`.
pub fn to_report_json<T: Serialize>(value: &T) -> Result<String> {
    let v = serde_json::to_value(value)
        .map_err(|e| TorqError::InvalidInput(format!("report serialization failed: {e}")))?;
    let mut out = String::new();
    write_value(&mut out, &v, 0);
    out.push('\n');
    Ok(out)
}

fn write_value(out: &mut String, v: &Value, indent: usize) {
    let pad = |out: &mut String, n: usize| out.extend(std::iter::repeat(' ').take(n));
    match v {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => {
            if n.is_f64() {
                let f = n.as_f64().expect("f64 number");
                let _ = write!(out, "{f:.16e}");
            } else {
                let _ = write!(out, "{n}");
            }
        }
        Value::String(s) => out.push_str(&Value::String(s.clone()).to_string()),
        Value::Array(items) => {
            if items.is_empty() {
                out.push_str("[]");
                return;
            }
            out.push_str("[\n");
            for (i, item) in items.iter().enumerate() {
                pad(out, indent + 2);
                write_value(out, item, indent + 2);
                if i + 1 < items.len() {
                    out.push(',');
                }
                out.push('\n');
            }
            pad(out, indent);
            out.push(']');
        }
        Value::Object(map) => {
            if map.is_empty() {
                out.push_str("{}");
                return;
            }
            out.push_str("{\n");
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            for (i, key) in keys.iter().enumerate() {
                pad(out, indent + 2);
                out.push_str(&Value::String((*key).clone()).to_string());
                out.push_str(": ");
                write_value(out, &map[key.as_str()], indent + 2);
                if i + 1 < keys.len() {
                    out.push(',');
                }
                out.push('\n');
            }
            pad(out, indent);
            out.push('}');
        }
    }
}

/// `bin_index,lower_bound,upper_bound,probability` rows for an occupancy
/// histogram.
pub fn histogram_csv(hist: &[f64], fmt: &MxFormat) -> String {
    let mut out = String::from("bin_index,lower_bound,upper_bound,probability\n");
    let bounds = fmt.boundaries();
    for (j, p) in hist.iter().enumerate() {
        let lower = if j == 0 { 0.0 } else { bounds[j - 1] };
        let upper = bounds
            .get(j)
            .map_or_else(|| "inf".to_string(), |u| format!("{u:.16e}"));
        let _ = writeln!(out, "{j},{lower:.16e},{upper},{p:.16e}");
    }
    out
}

/// Writes the report JSON to `path` and, when `csv_prefix` is given, the
/// before/after occupancy histograms to `<prefix>.before.csv` and
/// `<prefix>.after.csv`.
pub fn emit_report(report: &CalibReport, path: &Path, csv_prefix: Option<&Path>) -> Result<()> {
    crate::io::write_atomic(path, to_report_json(report)?.as_bytes())?;
    if let Some(prefix) = csv_prefix {
        let fmt = MxFormat::by_name(&report.format)?;
        for (tag, hist) in [("before", &report.before.occupancy), ("after", &report.after.occupancy)] {
            let mut p = prefix.as_os_str().to_owned();
            p.push(format!(".{tag}.csv"));
            crate::io::write_atomic(Path::new(&p), histogram_csv(hist, &fmt).as_bytes())?;
        }
    }
    Ok(())
}

/// Parses a report written by [`emit_report`].
pub fn read_report(path: &Path) -> Result<CalibReport> {
    let text = std::fs::read_to_string(path).map_err(|e| TorqError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| TorqError::Malformed(format!("{}: {e}", path.display())))
}

/// The S-step rule as a standalone per-block scale, for callers outside the
/// pipeline.
pub fn aligned_scale(block: &[f64], fmt: &MxFormat, mode: crate::format::Pow2Mode) -> Result<f64> {
    let max = crate::format::max_abs(block)?;
    Ok(if max == 0.0 { 1.0 } else { clip_to_pow2(max / fmt.c_max(), mode) })
}
