//! Calibration and inference paths.
//!
//! A token `x` of length `d = B K` is viewed as the `B x K` matrix `X`. The
//! forward path is
//!
//! ```text
//! Z = R_inter X R_intra,   Ẑ_b = s_b Q(z_b / s_b)   (per row b)
//! ```
//!
//! and the inverse returns `vec(R_inter^T Ẑ R_intra^T)`. Here `vec` stacks
//! columns (column-major), and `Ẑ` already carries the scales, so no extra
//! `S` factor appears in the inverse. Because
//! `vec(A M B) = (B^T ⊗ A) vec(M)`, the inverse folds into a following linear
//! layer `W` as `W' = W (R_intra ⊗ R_inter^T)`, which [`fuse_weights`]
//! computes row by row without forming the Kronecker product.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::block::{estimate_covariances, BlockShape, BlockTensor, DEFAULT_RIDGE};
use crate::error::{Result, TorqError};
use crate::format::{clip_to_pow2, FormatKind, MxFormat, Pow2Mode};
use crate::inter::{self, EqualizationConfig, InterRotation};
use crate::intra::{self, IntraConfig, ScaleVector};
use crate::metrics::StageTiming;
use std::time::Instant;

/// Which rotation stages a calibration runs. Disabled stages contribute an
/// identity rotation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stages {
    pub inter: bool,
    pub intra: bool,
}

impl Default for Stages {
    fn default() -> Self {
        Self {
            inter: true,
            intra: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationConfig {
    pub inter: EqualizationConfig,
    pub intra: IntraConfig,
    pub ridge: f64,
    pub stages: Stages,
    /// Fail on an unconverged equalization instead of keeping the partial
    /// rotation and flagging it in the metadata.
    pub strict: bool,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            inter: EqualizationConfig::default(),
            intra: IntraConfig::default(),
            ridge: DEFAULT_RIDGE,
            stages: Stages::default(),
            strict: true,
        }
    }
}

impl CalibrationConfig {
    /// Short hex digest of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Provenance stored alongside the rotations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibMeta {
    pub tokens: usize,
    pub dataset: String,
    pub config_hash: String,
    pub stages: Stages,
    pub pow2_mode: Pow2Mode,
    pub inter_steps: usize,
    pub achieved_spread: f64,
    pub converged: bool,
    pub loss_trace: Vec<f64>,
    pub s_step_trace: Vec<f64>,
}

/// Everything needed to quantize and de-rotate activations of one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct RotationBundle {
    pub shape: BlockShape,
    pub r_inter: DMatrix<f64>,
    pub r_intra: DMatrix<f64>,
    /// One deployment scale per block.
    pub scales: ScaleVector,
    pub format: FormatKind,
    pub meta: CalibMeta,
}

impl RotationBundle {
    /// Identity rotations and unit scales.
    pub fn identity(shape: BlockShape, format: FormatKind) -> Self {
        Self {
            shape,
            r_inter: DMatrix::identity(shape.blocks(), shape.blocks()),
            r_intra: DMatrix::identity(shape.lanes(), shape.lanes()),
            scales: ScaleVector::ones(shape.blocks()),
            format,
            meta: CalibMeta {
                tokens: 0,
                dataset: String::new(),
                config_hash: String::new(),
                stages: Stages {
                    inter: false,
                    intra: false,
                },
                pow2_mode: Pow2Mode::Round,
                inter_steps: 0,
                achieved_spread: 0.0,
                converged: true,
                loss_trace: Vec::new(),
                s_step_trace: Vec::new(),
            },
        }
    }

    /// Stored rotation and scale parameters: `B^2 + K^2 + B`.
    pub fn parameter_count(&self) -> usize {
        self.r_inter.len() + self.r_intra.len() + self.scales.len()
    }

    pub fn mx_format(&self) -> MxFormat {
        MxFormat::from_kind(self.format)
    }

    /// Checks dimensions, orthogonality (1e-10) and scale validity.
    pub fn validate(&self) -> Result<()> {
        let (b, k) = (self.shape.blocks(), self.shape.lanes());
        if self.r_inter.shape() != (b, b) || self.r_intra.shape() != (k, k) {
            return Err(TorqError::Shape(format!(
                "bundle matrices {:?} / {:?} do not match B={b}, K={k}",
                self.r_inter.shape(),
                self.r_intra.shape()
            )));
        }
        if self.scales.len() != b {
            return Err(TorqError::Shape(format!(
                "bundle has {} scales for {b} blocks",
                self.scales.len()
            )));
        }
        ScaleVector::new(self.scales.as_slice().to_vec())?;
        for (name, m) in [("r_inter", &self.r_inter), ("r_intra", &self.r_intra)] {
            let err = orthogonality_error(m);
            if !(err <= 1e-10) {
                return Err(TorqError::InvalidInput(format!(
                    "{name} is not orthogonal (||R^T R - I||_max = {err:e})"
                )));
            }
        }
        Ok(())
    }

    fn check_sample(&self, x: &DMatrix<f64>) -> Result<()> {
        if x.shape() != (self.shape.blocks(), self.shape.lanes()) {
            return Err(TorqError::Shape(format!(
                "sample is {}x{}, bundle expects {}x{}",
                x.nrows(),
                x.ncols(),
                self.shape.blocks(),
                self.shape.lanes()
            )));
        }
        Ok(())
    }
}

/// `||R^T R - I||_max`.
pub fn orthogonality_error(r: &DMatrix<f64>) -> f64 {
    let n = r.ncols();
    (r.transpose() * r - DMatrix::<f64>::identity(n, n)).amax()
}

/// Calibrates a bundle: equalize the pooled block covariance, rotate, then
/// align the stacked blocks with the codebook.
///
/// Deployment scales are the S-step rule applied to each block's largest
/// rotated magnitude over all calibration samples.
pub fn calibrate(
    calib: &BlockTensor,
    cfg: &CalibrationConfig,
    fmt: &MxFormat,
    dataset: &str,
) -> Result<RotationBundle> {
    calibrate_timed(calib, cfg, fmt, dataset).map(|(bundle, _)| bundle)
}

/// [`calibrate`] that also reports the wall-clock time of each stage.
pub fn calibrate_timed(
    calib: &BlockTensor,
    cfg: &CalibrationConfig,
    fmt: &MxFormat,
    dataset: &str,
) -> Result<(RotationBundle, StageTiming)> {
    let ms = |d: std::time::Duration| d.as_secs_f64() * 1e3;
    let start = Instant::now();
    let mut timing = StageTiming::default();
    let shape = calib.shape();
    let inter_rot = if cfg.stages.inter {
        let t0 = Instant::now();
        let cov = estimate_covariances(calib, cfg.ridge);
        timing.covariance_ms = ms(t0.elapsed());
        let t1 = Instant::now();
        let rot = inter::equalize(&cov.pooled, &cfg.inter)?;
        timing.inter_ms = ms(t1.elapsed());
        if cfg.strict && !rot.converged {
            return Err(TorqError::Convergence {
                achieved_spread: rot.achieved_spread,
                steps: rot.steps.len(),
            });
        }
        rot
    } else {
        InterRotation::identity(shape.blocks())
    };

    let rotated = inter::apply_inter_tensor(calib, &inter_rot)?;
    let stacked = rotated.stacked_blocks();
    let t2 = Instant::now();
    let intra_rot = if cfg.stages.intra {
        intra::build_intra_rotation(&stacked, &cfg.intra, fmt)?
    } else {
        intra::IntraRotation::identity(shape.lanes(), stacked.nrows())
    };
    timing.intra_ms = ms(t2.elapsed());

    let z = &stacked * &intra_rot.matrix;
    let mut block_max = vec![0.0f64; shape.blocks()];
    for (row, values) in z.row_iter().enumerate() {
        let b = row % shape.blocks();
        block_max[b] = values.iter().fold(block_max[b], |m, v| m.max(v.abs()));
    }
    let scales = ScaleVector::new(
        block_max
            .into_iter()
            .map(|m| {
                if m == 0.0 {
                    1.0
                } else {
                    clip_to_pow2(m / fmt.c_max(), cfg.intra.pow2_mode)
                }
            })
            .collect(),
    )?;

    let bundle = RotationBundle {
        shape,
        r_inter: inter_rot.matrix,
        r_intra: intra_rot.matrix,
        scales,
        format: fmt.kind(),
        meta: CalibMeta {
            tokens: calib.tokens(),
            dataset: dataset.to_string(),
            config_hash: cfg.hash(),
            stages: cfg.stages,
            pow2_mode: cfg.intra.pow2_mode,
            inter_steps: inter_rot.steps.len(),
            achieved_spread: inter_rot.achieved_spread,
            converged: inter_rot.converged,
            loss_trace: intra_rot.loss_trace,
            s_step_trace: intra_rot.s_step_trace,
        },
    };
    timing.total_ms = ms(start.elapsed());
    Ok((bundle, timing))
}

/// Where the per-block scales of the forward path come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleMode {
    /// Use the calibrated scales stored in the bundle.
    Calibrated,
    /// Recompute each block's scale online with the format's default rule.
    DynamicDefault,
    /// Recompute each block's scale online with the S-step rule (block max
    /// onto `c_max`, power-of-two rounding from the bundle).
    #[default]
    DynamicAligned,
}

impl std::str::FromStr for ScaleMode {
    type Err = TorqError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "calibrated" => Ok(ScaleMode::Calibrated),
            "dynamic" | "dynamic_default" => Ok(ScaleMode::DynamicDefault),
            "aligned" | "dynamic_aligned" => Ok(ScaleMode::DynamicAligned),
            _ => Err(TorqError::InvalidInput(format!("unknown scale mode '{s}'"))),
        }
    }
}

/// Output of the forward path for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Quantized {
    /// `Ẑ`, dequantized (scales applied), `B x K`.
    pub dequantized: DMatrix<f64>,
    /// Signed codeword indices, row-major `B x K`.
    pub codes: Vec<u8>,
    pub scales: Vec<f64>,
}

/// Rotates one `B x K` sample and quantizes it block by block.
pub fn forward_quantize(
    x: &DMatrix<f64>,
    bundle: &RotationBundle,
    mode: ScaleMode,
) -> Result<Quantized> {
    bundle.check_sample(x)?;
    let fmt = bundle.mx_format();
    let z = &bundle.r_inter * x * &bundle.r_intra;
    quantize_rows(&z, &fmt, |b, row| match mode {
        ScaleMode::Calibrated => Ok(bundle.scales.as_slice()[b]),
        ScaleMode::DynamicDefault => fmt.default_scale(row),
        ScaleMode::DynamicAligned => {
            let max = crate::format::max_abs(row)?;
            Ok(if max == 0.0 {
                1.0
            } else {
                clip_to_pow2(max / fmt.c_max(), bundle.meta.pow2_mode)
            })
        }
    })
}

fn quantize_rows<F>(z: &DMatrix<f64>, fmt: &MxFormat, mut scale_of: F) -> Result<Quantized>
where
    F: FnMut(usize, &[f64]) -> Result<f64>,
{
    let (nb, nk) = z.shape();
    let mut dequantized = DMatrix::zeros(nb, nk);
    let mut codes = Vec::with_capacity(nb * nk);
    let mut scales = Vec::with_capacity(nb);
    let mut row = vec![0.0; nk];
    for b in 0..nb {
        for (k, r) in row.iter_mut().enumerate() {
            *r = z[(b, k)];
        }
        let s = scale_of(b, &row)?;
        let q = fmt.quantize_block(&row, s)?;
        for (k, v) in q.dequantized.iter().enumerate() {
            dequantized[(b, k)] = *v;
        }
        codes.extend_from_slice(&q.codes);
        scales.push(s);
    }
    Ok(Quantized {
        dequantized,
        codes,
        scales,
    })
}

/// Column-major `vec` of a matrix.
pub fn vec_col_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.as_slice().to_vec()
}

/// Explicit inverse: `vec(R_inter^T Ẑ R_intra^T)` (column-major).
pub fn explicit_inverse(zhat: &DMatrix<f64>, bundle: &RotationBundle) -> Result<Vec<f64>> {
    bundle.check_sample(zhat)?;
    let x = bundle.r_inter.transpose() * zhat * bundle.r_intra.transpose();
    Ok(vec_col_major(&x))
}

/// Explicit inverse returned as a `B x K` matrix.
pub fn inverse_matrix(zhat: &DMatrix<f64>, bundle: &RotationBundle) -> Result<DMatrix<f64>> {
    bundle.check_sample(zhat)?;
    Ok(bundle.r_inter.transpose() * zhat * bundle.r_intra.transpose())
}

/// A linear layer's weights with the inverse rotations folded in.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedWeights {
    pub original_shape: (usize, usize),
    /// `W' = W (R_intra ⊗ R_inter^T)`, so `W' vec(Ẑ) = W explicit_inverse(Ẑ)`.
    pub fused: DMatrix<f64>,
}

/// Folds the inverse rotations into `w` (`d' x d`, acting on column-major
/// `vec` inputs).
///
/// Row `r` of `W'` is `vec(R_inter W_r R_intra)` where `W_r` is row `r` of `w`
/// reshaped column-major to `B x K`.
pub fn fuse_weights(w: &DMatrix<f64>, bundle: &RotationBundle) -> Result<FusedWeights> {
    let (nb, nk) = (bundle.shape.blocks(), bundle.shape.lanes());
    if w.ncols() != nb * nk {
        return Err(TorqError::Shape(format!(
            "weight has {} columns, expected d = {}",
            w.ncols(),
            nb * nk
        )));
    }
    let mut fused = DMatrix::zeros(w.nrows(), w.ncols());
    for r in 0..w.nrows() {
        let row: Vec<f64> = w.row(r).iter().copied().collect();
        let wm = DMatrix::from_column_slice(nb, nk, &row);
        let folded = &bundle.r_inter * wm * &bundle.r_intra;
        for (c, v) in folded.as_slice().iter().enumerate() {
            fused[(r, c)] = *v;
        }
    }
    Ok(FusedWeights {
        original_shape: w.shape(),
        fused,
    })
}

/// Round-to-nearest with the format's default scale and no rotation.
pub fn rtn_baseline(x: &DMatrix<f64>, fmt: &MxFormat) -> Result<(DMatrix<f64>, f64)> {
    let q = quantize_rows(x, fmt, |_, row| fmt.default_scale(row))?;
    let mse = crate::metrics::quantization_mse(x, &q.dequantized)?;
    Ok((q.dequantized, mse))
}

/// Forward then explicit inverse, as a `B x K` reconstruction of `x`.
pub fn round_trip(x: &DMatrix<f64>, bundle: &RotationBundle, mode: ScaleMode) -> Result<DMatrix<f64>> {
    let q = forward_quantize(x, bundle, mode)?;
    inverse_matrix(&q.dequantized, bundle)
}
