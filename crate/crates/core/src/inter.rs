//! Inter-block variance equalization.
//!
//! Given a symmetric `B x B` block covariance `Sigma`, build an orthogonal
//! `R` whose push-forward `R Sigma R^T` has every diagonal entry equal to
//! `c = tr(Sigma) / B`. Such an `R` exists for any `Sigma` because the
//! constant vector is majorized by the spectrum (Schur-Horn); it is built
//! here from a sequence of plane rotations.
//!
//! Each step takes the block furthest above `c` and the block furthest below
//! it and rotates in their plane by the angle that sets the first one to `c`
//! exactly. That block is then pinned, so at most `B - 1` steps are needed.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::str::FromStr;

use crate::block::{BlockTensor, PositionCovariance};
use crate::error::{Result, TorqError};

/// Relative tolerance used when no explicit epsilon is configured.
pub const DEFAULT_RELATIVE_EPSILON: f64 = 1e-8;

/// Angle rule for a single equalizing step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AngleMode {
    /// Solve for the angle that moves the driven diagonal entry onto the
    /// target.
    #[default]
    ExactTransfer,
    /// `theta = atan(2 s_ij / (s_ii - s_jj)) / 2`, the diagonalizing Jacobi
    /// angle. Stalls whenever the off-diagonal entry vanishes; kept for
    /// comparison runs.
    Diagonalizing,
}

impl FromStr for AngleMode {
    type Err = TorqError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" | "exact_transfer" => Ok(AngleMode::ExactTransfer),
            "arctan" | "diagonalizing" => Ok(AngleMode::Diagonalizing),
            _ => Err(TorqError::InvalidInput(format!("unknown angle mode '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EqualizationConfig {
    /// Absolute convergence threshold on `max_i |s_ii - c|`. `None` means
    /// `1e-8 * c`.
    pub epsilon: Option<f64>,
    /// Step cap. `None` means `4 * B^2`.
    pub max_sweeps: Option<usize>,
    pub angle_mode: AngleMode,
}

impl Default for EqualizationConfig {
    fn default() -> Self {
        Self {
            epsilon: None,
            max_sweeps: None,
            angle_mode: AngleMode::ExactTransfer,
        }
    }
}

impl EqualizationConfig {
    fn resolve(&self, blocks: usize, target: f64) -> Result<(f64, usize)> {
        let epsilon = self
            .epsilon
            .unwrap_or(DEFAULT_RELATIVE_EPSILON * target.abs());
        let max_sweeps = self.max_sweeps.unwrap_or(4 * blocks * blocks);
        if !(epsilon > 0.0) {
            return Err(TorqError::InvalidInput(format!(
                "equalization epsilon must be positive, got {epsilon}"
            )));
        }
        if max_sweeps < blocks {
            return Err(TorqError::InvalidInput(format!(
                "max_sweeps {max_sweeps} is below the block count {blocks}"
            )));
        }
        Ok((epsilon, max_sweeps))
    }
}

/// A plane rotation acting on coordinates `i < j`.
///
/// As a matrix, column `i` is `(cos θ) e_i + (sin θ) e_j` and column `j` is
/// `-(sin θ) e_i + (cos θ) e_j`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GivensStep {
    pub i: usize,
    pub j: usize,
    pub theta: f64,
}

impl GivensStep {
    /// Normalizes an arbitrary ordered pair so that `i < j`.
    pub fn new(a: usize, b: usize, theta: f64) -> Self {
        if a < b {
            Self { i: a, j: b, theta }
        } else {
            Self {
                i: b,
                j: a,
                theta: -theta,
            }
        }
    }

    pub fn to_matrix(&self, n: usize) -> DMatrix<f64> {
        let mut g = DMatrix::identity(n, n);
        let (s, c) = self.theta.sin_cos();
        g[(self.i, self.i)] = c;
        g[(self.j, self.i)] = s;
        g[(self.i, self.j)] = -s;
        g[(self.j, self.j)] = c;
        g
    }
}

/// Result of the equalizing construction.
#[derive(Debug, Clone, PartialEq)]
pub struct InterRotation {
    /// `R` with `diag(R Sigma R^T) ≈ c 1`.
    pub matrix: DMatrix<f64>,
    pub steps: Vec<GivensStep>,
    /// `max_i |(R Sigma R^T)_ii - c|` after the last step.
    pub achieved_spread: f64,
    pub converged: bool,
}

impl InterRotation {
    pub fn identity(blocks: usize) -> Self {
        Self {
            matrix: DMatrix::identity(blocks, blocks),
            steps: Vec::new(),
            achieved_spread: 0.0,
            converged: true,
        }
    }
}

/// `tr(Sigma) / B`.
pub fn equalization_target(sigma: &DMatrix<f64>) -> f64 {
    sigma.trace() / sigma.nrows() as f64
}

fn max_deviation(sigma: &DMatrix<f64>, c: f64) -> f64 {
    (0..sigma.nrows())
        .map(|i| (sigma[(i, i)] - c).abs())
        .fold(0.0, f64::max)
}

/// Picks the block furthest above `c` (by more than `tolerance`) and the
/// block furthest below it. Lowest index wins ties. Returns `None` when no
/// entry exceeds the target by more than `tolerance`.
pub fn select_pair(sigma: &DMatrix<f64>, c: f64, tolerance: f64) -> Option<(usize, usize)> {
    select_unpinned_pair(sigma, c, tolerance, &vec![false; sigma.nrows()])
}

fn select_unpinned_pair(
    sigma: &DMatrix<f64>,
    c: f64,
    tolerance: f64,
    pinned: &[bool],
) -> Option<(usize, usize)> {
    let mut above: Option<(usize, f64)> = None;
    let mut below: Option<(usize, f64)> = None;
    for (idx, _) in pinned.iter().enumerate().filter(|(_, &p)| !p) {
        let dev = sigma[(idx, idx)] - c;
        if dev > tolerance && above.map_or(true, |(_, best)| dev > best) {
            above = Some((idx, dev));
        }
        if dev < 0.0 && below.map_or(true, |(_, best)| dev < best) {
            below = Some((idx, dev));
        }
    }
    // mirror case: only deficits are large, so drive the largest deficit
    if above.is_none() {
        let deficit = below.filter(|&(_, dev)| -dev > tolerance)?;
        let surplus = pinned
            .iter()
            .enumerate()
            .filter(|(_, &p)| !p)
            .map(|(idx, _)| (idx, sigma[(idx, idx)] - c))
            .filter(|&(_, dev)| dev > 0.0)
            .fold(None::<(usize, f64)>, |acc, (idx, dev)| match acc {
                Some((_, best)) if best >= dev => acc,
                _ => Some((idx, dev)),
            })?;
        return Some((deficit.0, surplus.0));
    }
    Some((above?.0, below?.0))
}

/// Angle of the plane rotation on `(i, j)` that drives `Sigma_ii` towards `c`.
///
/// With `t = tan θ`, the rotated entry `(G^T Sigma G)_ii` equals `c` iff
/// `(s_jj - c) t^2 + 2 s_ij t + (s_ii - c) = 0`. The straddling precondition
/// makes the discriminant positive; the root of smaller magnitude is used.
pub fn equalizing_angle(
    sigma: &DMatrix<f64>,
    i: usize,
    j: usize,
    c: f64,
    mode: AngleMode,
) -> Result<f64> {
    let (sii, sjj, sij) = (sigma[(i, i)], sigma[(j, j)], sigma[(i, j)]);
    if i == j || !((sii - c) * (sjj - c) < 0.0) {
        return Err(TorqError::NoTransferPossible { i, j });
    }
    Ok(match mode {
        AngleMode::ExactTransfer => {
            let a = sjj - c;
            let c0 = sii - c;
            let disc = (sij * sij - a * c0).sqrt();
            // c0 / q is the small root of a t^2 + 2 b t + c0 with
            // q = -(b + sign(b) sqrt(D)); cancellation-free.
            let q = -(sij + disc.copysign(sij));
            (c0 / q).atan()
        }
        AngleMode::Diagonalizing => 0.5 * (2.0 * sij).atan2(sii - sjj),
    })
}

/// `Sigma <- G^T Sigma G` for the plane rotation on `(i, j)`.
fn rotate_congruence(sigma: &mut DMatrix<f64>, i: usize, j: usize, theta: f64) {
    let (s, c) = theta.sin_cos();
    let n = sigma.nrows();
    // columns
    for r in 0..n {
        let (a, b) = (sigma[(r, i)], sigma[(r, j)]);
        sigma[(r, i)] = c * a + s * b;
        sigma[(r, j)] = -s * a + c * b;
    }
    // rows
    for col in 0..n {
        let (a, b) = (sigma[(i, col)], sigma[(j, col)]);
        sigma[(i, col)] = c * a + s * b;
        sigma[(j, col)] = -s * a + c * b;
    }
    // restore exact symmetry of the touched entries
    for r in 0..n {
        sigma[(i, r)] = sigma[(r, i)];
        sigma[(j, r)] = sigma[(r, j)];
    }
}

fn check_symmetric(sigma: &DMatrix<f64>) -> Result<()> {
    if !sigma.is_square() || sigma.nrows() < 2 {
        return Err(TorqError::Shape(format!(
            "covariance must be square with B >= 2, got {}x{}",
            sigma.nrows(),
            sigma.ncols()
        )));
    }
    if sigma.iter().any(|v| !v.is_finite()) {
        return Err(TorqError::InvalidInput("covariance has non-finite entries".into()));
    }
    let scale = sigma.amax().max(f64::MIN_POSITIVE);
    let asym = (sigma - sigma.transpose()).amax();
    if asym > 1e-10 * scale {
        return Err(TorqError::InvalidInput(format!(
            "covariance is not symmetric (max asymmetry {asym:e})"
        )));
    }
    Ok(())
}

/// Runs the construction and always returns the rotation reached, with
/// `converged` reporting whether the spread fell within epsilon.
pub fn equalize(sigma: &DMatrix<f64>, cfg: &EqualizationConfig) -> Result<InterRotation> {
    check_symmetric(sigma)?;
    let n = sigma.nrows();
    let c = equalization_target(sigma);
    let (epsilon, max_sweeps) = cfg.resolve(n, c)?;

    let mut work = sigma.clone();
    // accumulated as R = G_m^T ... G_1^T so that work = R sigma R^T
    let mut r = DMatrix::<f64>::identity(n, n);
    let mut pinned = vec![false; n];
    let mut steps = Vec::new();

    while max_deviation(&work, c) > epsilon && steps.len() < max_sweeps {
        let Some((driven, partner)) = select_unpinned_pair(&work, c, epsilon, &pinned) else {
            break;
        };
        let theta = equalizing_angle(&work, driven, partner, c, cfg.angle_mode)?;
        rotate_congruence(&mut work, driven, partner, theta);
        let (s, cs) = theta.sin_cos();
        for col in 0..n {
            let (a, b) = (r[(driven, col)], r[(partner, col)]);
            r[(driven, col)] = cs * a + s * b;
            r[(partner, col)] = -s * a + cs * b;
        }
        if cfg.angle_mode == AngleMode::ExactTransfer {
            pinned[driven] = true;
        }
        steps.push(GivensStep::new(driven, partner, theta));
    }

    let achieved_spread = max_deviation(&work, c);
    Ok(InterRotation {
        matrix: r,
        steps,
        achieved_spread,
        converged: achieved_spread <= epsilon,
    })
}

/// Builds `R_inter` for `sigma`, failing with [`TorqError::Convergence`] if
/// the step cap is reached first.
pub fn build_inter_rotation(
    sigma: &DMatrix<f64>,
    cfg: &EqualizationConfig,
) -> Result<InterRotation> {
    let rot = equalize(sigma, cfg)?;
    if rot.converged {
        Ok(rot)
    } else {
        Err(TorqError::Convergence {
            achieved_spread: rot.achieved_spread,
            steps: rot.steps.len(),
        })
    }
}

/// One rotation per lane, each equalizing its own `Sigma_k`. Analysis mode;
/// the deployable path uses a single rotation of the pooled covariance.
pub fn per_position_rotations(
    cov: &PositionCovariance,
    cfg: &EqualizationConfig,
) -> Result<Vec<InterRotation>> {
    cov.per_position
        .par_iter()
        .map(|sigma| equalize(sigma, cfg))
        .collect()
}

/// `Y = R X` for a single `B x K` sample.
pub fn apply_inter(x: &DMatrix<f64>, rot: &InterRotation) -> Result<DMatrix<f64>> {
    if x.nrows() != rot.matrix.ncols() {
        return Err(TorqError::Shape(format!(
            "sample has {} blocks, rotation expects {}",
            x.nrows(),
            rot.matrix.ncols()
        )));
    }
    Ok(&rot.matrix * x)
}

/// [`apply_inter`] over every sample of a tensor.
pub fn apply_inter_tensor(data: &BlockTensor, rot: &InterRotation) -> Result<BlockTensor> {
    if data.shape().blocks() != rot.matrix.ncols() {
        return Err(TorqError::Shape(format!(
            "tensor has {} blocks, rotation expects {}",
            data.shape().blocks(),
            rot.matrix.ncols()
        )));
    }
    data.map_samples(|m| &rot.matrix * m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_4;

    fn diag(values: &[f64]) -> DMatrix<f64> {
        DMatrix::from_diagonal(&nalgebra::DVector::from_row_slice(values))
    }

    /// Diagonal of `G^T S G` for the 2x2 case, written out by hand.
    fn rotated_first_diagonal(s: &DMatrix<f64>, theta: f64) -> f64 {
        let (sn, cs) = theta.sin_cos();
        cs * cs * s[(0, 0)] + 2.0 * cs * sn * s[(0, 1)] + sn * sn * s[(1, 1)]
    }

    #[test]
    fn targets() {
        assert_eq!(equalization_target(&diag(&[2.0, 0.0])), 1.0);
        assert_eq!(equalization_target(&DMatrix::identity(5, 5)), 1.0);
    }

    #[test]
    fn pair_selection() {
        assert_eq!(select_pair(&diag(&[2.0, 0.0]), 1.0, 1e-12), Some((0, 1)));
        assert_eq!(select_pair(&diag(&[1.0, 1.0, 1.0]), 1.0, 1e-12), None);
        let s = diag(&[3.0, 1.0, 1.0, 1.0]);
        assert_eq!(select_pair(&s, 1.5, 1e-12), Some((0, 1)));
        let s = diag(&[1.0, 0.5, 2.5, 0.2]);
        // deviations -0.05, -0.55, 1.45, -0.85 around c = 1.05
        assert_eq!(select_pair(&s, 1.05, 1e-12), Some((2, 3)));
    }

    #[test]
    fn exact_angle_on_diagonal() {
        let s = diag(&[2.0, 0.0]);
        let theta = equalizing_angle(&s, 0, 1, 1.0, AngleMode::ExactTransfer).unwrap();
        assert!((theta.abs() - FRAC_PI_4).abs() < 1e-15);
        assert!((rotated_first_diagonal(&s, theta) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn printed_angle_stalls_on_diagonal() {
        let s = diag(&[2.0, 0.0]);
        let theta = equalizing_angle(&s, 0, 1, 1.0, AngleMode::Diagonalizing).unwrap();
        assert_eq!(theta, 0.0);
        let cfg = EqualizationConfig {
            angle_mode: AngleMode::Diagonalizing,
            ..Default::default()
        };
        assert!(matches!(
            build_inter_rotation(&s, &cfg),
            Err(TorqError::Convergence { .. })
        ));
    }

    #[test]
    fn exact_angle_with_coupling() {
        let s = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 0.0]);
        let theta = equalizing_angle(&s, 0, 1, 1.0, AngleMode::ExactTransfer).unwrap();
        assert!((theta.tan() - (1.0 - 2f64.sqrt())).abs() < 1e-15);
        assert!((rotated_first_diagonal(&s, theta) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn angle_requires_straddle() {
        let s = diag(&[2.0, 1.5]);
        assert!(matches!(
            equalizing_angle(&s, 0, 1, 1.0, AngleMode::ExactTransfer),
            Err(TorqError::NoTransferPossible { i: 0, j: 1 })
        ));
    }

    #[test]
    fn already_equal_is_identity() {
        let rot = build_inter_rotation(&(DMatrix::identity(6, 6) * 3.0), &Default::default())
            .unwrap();
        assert!(rot.steps.is_empty());
        assert_eq!(rot.matrix, DMatrix::identity(6, 6));
    }

    #[test]
    fn single_spike_spreads_evenly() {
        let s = diag(&[4.0, 0.0, 0.0, 0.0]);
        let rot = build_inter_rotation(&s, &Default::default()).unwrap();
        let out = &rot.matrix * &s * rot.matrix.transpose();
        for i in 0..4 {
            assert!((out[(i, i)] - 1.0).abs() < 1e-10);
        }
        assert!(rot.steps.len() <= 3);
    }

    #[test]
    fn deficit_only_case_still_converges() {
        // one block far below, the rest barely above the target
        let s = diag(&[0.0, 1.0 + 1.0 / 3.0, 1.0 + 1.0 / 3.0, 1.0 + 1.0 / 3.0]);
        let cfg = EqualizationConfig {
            epsilon: Some(0.5),
            ..Default::default()
        };
        let rot = build_inter_rotation(&s, &cfg).unwrap();
        assert!(rot.achieved_spread <= 0.5);
    }

    #[test]
    fn givens_step_normalization() {
        let a = GivensStep::new(3, 1, 0.4).to_matrix(5);
        let b = GivensStep {
            i: 1,
            j: 3,
            theta: -0.4,
        }
        .to_matrix(5);
        assert_eq!(a, b);
        let g = GivensStep::new(0, 2, 0.3).to_matrix(3);
        assert!((g.transpose() * &g - DMatrix::identity(3, 3)).amax() < 1e-15);
    }

    #[test]
    fn apply_checks_shape() {
        let rot = InterRotation::identity(3);
        let x = DMatrix::from_element(3, 2, 1.5);
        assert_eq!(apply_inter(&x, &rot).unwrap(), x);
        assert!(apply_inter(&DMatrix::zeros(4, 2), &rot).is_err());
    }

    #[test]
    fn rejects_asymmetric_input() {
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(build_inter_rotation(&s, &Default::default()).is_err());
    }
}
