//! Two-level orthogonal rotations for microscaling 4-bit block quantization.
//!
//! A token of dimension `d = B K` is split into `B` blocks of `K` lanes. Each
//! block shares one scale, so a single outlier coarsens every lane in its
//! block. Two rotations fight this:
//!
//! * an inter-block rotation `R_inter` (`B x B`), built from at most `B - 1`
//!   Givens steps, that equalizes the expected energy of all blocks;
//! * an intra-block rotation `R_intra` (`K x K`) that spreads normalized
//!   magnitudes evenly over the codebook bins, alternating a scale step with
//!   exact per-pair angle searches.
//!
//! ```
//! use torq::{calibrate, synth, CalibrationConfig, Distribution, MxFormat, ScaleMode, SynthConfig};
//!
//! let shape = torq::BlockShape::new(8, 8).unwrap();
//! let data = synth::generate(&SynthConfig {
//!     tokens: 64,
//!     shape,
//!     seed: 7,
//!     dist: Distribution::OutlierMixture { p: 0.05, scale: 20.0 },
//! })
//! .unwrap();
//! let fmt = MxFormat::mxfp4();
//! let bundle = calibrate(&data, &CalibrationConfig::default(), &fmt, "demo").unwrap();
//! let xhat = torq::round_trip(&data.sample(0), &bundle, ScaleMode::DynamicAligned).unwrap();
//! assert_eq!(xhat.shape(), (8, 8));
//! ```

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN

pub mod block;
pub mod error;
pub mod format;
pub mod inter;
pub mod intra;
pub mod io;
pub mod metrics;
pub mod pipeline;
pub mod synth;

pub use block::{block_variances, estimate_covariances, reshape_tokens, BlockShape, BlockTensor, PositionCovariance};
pub use error::{Result, TorqError};
pub use format::{clip_to_pow2, FormatKind, MxFormat, Pow2Mode, QuantizedBlock};
pub use inter::{build_inter_rotation, equalize, AngleMode, EqualizationConfig, GivensStep, InterRotation};
pub use intra::{build_intra_rotation, code_loss, IntraConfig, IntraRotation, ScaleVector};
pub use metrics::{
    bound_diagnostics, evaluate, quantization_mse, variance_spread, ArmStats, BoundDiagnostics, CalibReport,
    ComparisonReport, Method, VarianceSpread,
};
pub use pipeline::{
    calibrate, calibrate_timed, forward_quantize, fuse_weights, round_trip, rtn_baseline, CalibrationConfig,
    RotationBundle, ScaleMode, Stages,
};
pub use synth::{Distribution, SynthConfig};
