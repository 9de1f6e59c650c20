//! Intra-block codebook alignment.
//!
//! Works in normalized space: every row (block) is divided by its shared
//! scale, so magnitudes are directly comparable with the codebook. The goal
//! is an orthogonal `K x K` rotation that spreads the normalized magnitudes
//! evenly over the `J` codeword bins, measured by the occupancy loss
//!
//! ```text
//! L_code = sum_j (p_j - 1/J)^2
//! ```
//!
//! where `p_j` is the fraction of all entries falling into bin `j`.
//!
//! The rotation is grown by alternating two steps:
//!
//! * **S-step**: with the rotation fixed, pick each row's scale so that its
//!   largest magnitude lands on `c_max` (rounded to a power of two).
//! * **R-step**: with the scales fixed, pick column pairs whose histograms
//!   are the most imbalanced and most complementary, and rotate each pair by
//!   the globally optimal plane angle.
//!
//! `L_code` is piecewise constant in the plane angle: it only changes where
//! some entry's magnitude crosses a decision boundary. Those crossing angles
//! are known in closed form, so the optimal angle is found exactly by
//! sweeping the sorted crossings and evaluating one point per interval.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_PI_2, PI, TAU};

use crate::error::{Result, TorqError};
use crate::format::{clip_to_pow2, MxFormat, Pow2Mode};

/// Critical angles closer than this are merged.
pub const ANGLE_DEDUP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntraConfig {
    /// Outer S-step / R-step alternations.
    pub max_iter: usize,
    /// Stop once an alternation improves the post-R-step loss by less.
    pub epsilon: f64,
    /// Candidate pool size. `None` means `K / 2`.
    pub k_top: Option<usize>,
    /// Disjoint pairs rotated per R-step. `None` means `K / 4`.
    pub pairs: Option<usize>,
    /// Weight of the complementarity term in the pair score.
    pub lambda: f64,
    /// Rows used to build the critical-angle set. `None` uses all rows.
    pub angle_sample_blocks: Option<usize>,
    pub pow2_mode: Pow2Mode,
}

impl Default for IntraConfig {
    fn default() -> Self {
        Self {
            max_iter: 10,
            epsilon: 1e-6,
            k_top: None,
            pairs: None,
            lambda: 1.0,
            angle_sample_blocks: None,
            pow2_mode: Pow2Mode::Round,
        }
    }
}

impl IntraConfig {
    /// Pool size for `lanes` columns.
    pub fn resolved_k_top(&self, lanes: usize) -> usize {
        self.k_top.unwrap_or((lanes / 2).max(2)).clamp(2.min(lanes), lanes)
    }

    /// Pairs per R-step for `lanes` columns.
    pub fn resolved_pairs(&self, lanes: usize) -> usize {
        let cap = self.resolved_k_top(lanes) / 2;
        self.pairs.unwrap_or((lanes / 4).max(1)).min(cap)
    }

    pub fn validate(&self, lanes: usize) -> Result<()> {
        if self.max_iter < 1 {
            return Err(TorqError::InvalidInput("intra.max_iter must be >= 1".into()));
        }
        if !(self.lambda > 0.0) {
            return Err(TorqError::InvalidInput("intra.lambda must be positive".into()));
        }
        if !(self.epsilon >= 0.0) {
            return Err(TorqError::InvalidInput("intra.epsilon must be >= 0".into()));
        }
        if let Some(k) = self.k_top {
            if k < 2 || k > lanes {
                return Err(TorqError::InvalidInput(format!(
                    "intra.k_top must lie in [2, {lanes}], got {k}"
                )));
            }
        }
        if let Some(p) = self.pairs {
            let cap = self.resolved_k_top(lanes) / 2;
            if p < 1 || p > cap {
                return Err(TorqError::InvalidInput(format!(
                    "intra.pairs must lie in [1, {cap}], got {p}"
                )));
            }
        }
        if self.angle_sample_blocks == Some(0) {
            return Err(TorqError::InvalidInput(
                "intra.angle_sample_blocks must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Per-row power-of-two scales.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleVector {
    scales: Vec<f64>,
}

impl ScaleVector {
    pub fn new(scales: Vec<f64>) -> Result<Self> {
        for &s in &scales {
            if !(s > 0.0 && s.is_finite()) || crate::format::pow2_floor(s) != s {
                return Err(TorqError::InvalidScale(s));
            }
        }
        Ok(Self { scales })
    }

    pub fn ones(len: usize) -> Self {
        Self {
            scales: vec![1.0; len],
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.scales
    }

    pub fn len(&self) -> usize {
        self.scales.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scales.is_empty()
    }

    /// Divides row `i` of `m` by scale `i`.
    pub fn normalize(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = m.clone();
        for (i, s) in self.scales.iter().enumerate() {
            out.row_mut(i).unscale_mut(*s);
        }
        out
    }
}

/// Occupancy histograms of a normalized matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct OccupancyState {
    pub per_column_hist: Vec<Vec<f64>>,
    pub global_hist: Vec<f64>,
    pub loss: f64,
}

impl OccupancyState {
    pub fn measure(normalized: &DMatrix<f64>, fmt: &MxFormat) -> Result<Self> {
        let counts = ColumnCounts::new(normalized, fmt)?;
        let rows = normalized.nrows() as f64;
        let per_column_hist = counts
            .per_column
            .iter()
            .map(|c| c.iter().map(|&n| n as f64 / rows).collect())
            .collect();
        let total = counts.total();
        let pooled = counts.pooled();
        Ok(Self {
            per_column_hist,
            global_hist: pooled.iter().map(|&n| n as f64 / total as f64).collect(),
            loss: loss_from_counts(&pooled, total),
        })
    }
}

/// The result of [`build_intra_rotation`].
#[derive(Debug, Clone, PartialEq)]
pub struct IntraRotation {
    pub matrix: DMatrix<f64>,
    /// `L_code` after each R-step.
    pub loss_trace: Vec<f64>,
    /// `L_code` after each S-step, before the R-step of the same iteration.
    pub s_step_trace: Vec<f64>,
    /// Row scales from a final S-step under `matrix`.
    pub final_scales: ScaleVector,
}

impl IntraRotation {
    pub fn identity(lanes: usize, rows: usize) -> Self {
        Self {
            matrix: DMatrix::identity(lanes, lanes),
            loss_trace: Vec::new(),
            s_step_trace: Vec::new(),
            final_scales: ScaleVector::ones(rows),
        }
    }
}

/// `sum_j (count_j / total - 1/J)^2`.
pub fn loss_from_counts(counts: &[u64], total: u64) -> f64 {
    let uniform = 1.0 / counts.len() as f64;
    let n = total as f64;
    counts
        .iter()
        .map(|&c| {
            let d = c as f64 / n - uniform;
            d * d
        })
        .sum()
}

/// Pooled occupancy loss of all entries of a normalized matrix.
pub fn code_loss(normalized: &DMatrix<f64>, fmt: &MxFormat) -> Result<f64> {
    if normalized.is_empty() {
        return Err(TorqError::InvalidInput("occupancy loss of an empty matrix".into()));
    }
    if normalized.iter().any(|v| !v.is_finite()) {
        return Err(TorqError::InvalidInput("matrix contains non-finite values".into()));
    }
    let counts = fmt.occupancy_counts(normalized.as_slice());
    Ok(loss_from_counts(&counts, normalized.len() as u64))
}

/// `h = sum_j (p_j - 1/J)^2` for one column histogram.
pub fn imbalance_score(hist: &[f64]) -> f64 {
    let uniform = 1.0 / hist.len() as f64;
    hist.iter().map(|p| (p - uniform) * (p - uniform)).sum()
}

/// Negated inner product of the two deviation-from-uniform vectors.
pub fn complementarity(hist_k: &[f64], hist_l: &[f64]) -> f64 {
    let uniform = 1.0 / hist_k.len() as f64;
    -hist_k
        .iter()
        .zip(hist_l)
        .map(|(a, b)| (a - uniform) * (b - uniform))
        .sum::<f64>()
}

/// Row scales for `data * rot`: `clip_to_pow2(max_i |z_i| / c_max)`, 1 for
/// all-zero rows.
pub fn s_step(data: &DMatrix<f64>, rot: &DMatrix<f64>, fmt: &MxFormat, mode: Pow2Mode) -> ScaleVector {
    row_scales(&(data * rot), fmt, mode)
}

/// The S-step rule applied to an already rotated matrix.
pub fn row_scales(z: &DMatrix<f64>, fmt: &MxFormat, mode: Pow2Mode) -> ScaleVector {
    let mut max = vec![0.0f64; z.nrows()];
    for col in z.column_iter() {
        for (m, v) in max.iter_mut().zip(col.iter()) {
            *m = m.max(v.abs());
        }
    }
    let c_max = fmt.c_max();
    ScaleVector {
        scales: max
            .into_iter()
            .map(|m| if m == 0.0 { 1.0 } else { clip_to_pow2(m / c_max, mode) })
            .collect(),
    }
}

/// Selects up to `P` disjoint column pairs.
///
/// Columns are ranked by imbalance (descending, lower index first on ties)
/// and the top `k_top` form the pool. Every pool pair gets the score
/// `h_k + h_l + lambda * c_kl`, and pairs are accepted greedily by score
/// while both columns are unused.
pub fn select_pairs(hists: &[Vec<f64>], cfg: &IntraConfig) -> Vec<(usize, usize)> {
    let lanes = hists.len();
    if lanes < 2 {
        return Vec::new();
    }
    let want = cfg.pairs.unwrap_or_else(|| cfg.resolved_pairs(lanes));
    if want == 0 {
        return Vec::new();
    }
    let h: Vec<f64> = hists.iter().map(|p| imbalance_score(p)).collect();
    let mut order: Vec<usize> = (0..lanes).collect();
    order.sort_by(|&a, &b| h[b].total_cmp(&h[a]).then(a.cmp(&b)));
    let mut pool: Vec<usize> = order[..cfg.resolved_k_top(lanes)].to_vec();
    pool.sort_unstable();

    let mut scored = Vec::with_capacity(pool.len() * pool.len() / 2);
    for (x, &k) in pool.iter().enumerate() {
        for &l in &pool[x + 1..] {
            let score = h[k] + h[l] + cfg.lambda * complementarity(&hists[k], &hists[l]);
            scored.push((score, k, l));
        }
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut used = vec![false; lanes];
    let mut pairs = Vec::with_capacity(want);
    for (_, k, l) in scored {
        if pairs.len() == want {
            break;
        }
        if !used[k] && !used[l] {
            used[k] = true;
            used[l] = true;
            pairs.push((k, l));
        }
    }
    pairs
}

#[inline]
fn fold_angle(theta: f64) -> f64 {
    let t = theta.rem_euclid(TAU);
    if t >= TAU {
        0.0
    } else {
        t
    }
}

/// Appends every angle at which row `(u, v)` crosses a boundary under the
/// plane rotation `(u, v) -> (u cos θ + v sin θ, -u sin θ + v cos θ)`.
///
/// The first coordinate has magnitude `r |cos(φ - θ)|` and the second
/// `r |sin(φ - θ)|`; each crosses `d` at `θ = φ ± α (+ π)` and
/// `θ = φ - π/2 ± α (+ π)` respectively, with `α = acos(d / r)`.
#[inline]
fn push_row_crossings(u: f64, v: f64, boundaries: &[f64], mut push: impl FnMut(f64)) {
    let r = u.hypot(v);
    if r == 0.0 {
        return;
    }
    let phi = v.atan2(u);
    for &d in boundaries {
        if r < d {
            break;
        }
        let alpha = (d / r).min(1.0).acos();
        for base in [phi, phi - FRAC_PI_2] {
            for shift in [0.0, PI] {
                push(fold_angle(base + alpha + shift));
                push(fold_angle(base - alpha + shift));
            }
        }
    }
}

fn sort_dedup(angles: &mut Vec<f64>) {
    angles.sort_by(f64::total_cmp);
    let mut out: Vec<f64> = Vec::with_capacity(angles.len());
    for &a in angles.iter() {
        match out.last() {
            Some(&last) if a - last <= ANGLE_DEDUP => {}
            _ => out.push(a),
        }
    }
    *angles = out;
}

/// Sorted, de-duplicated crossing angles in `[0, 2π)` for two normalized
/// columns against an explicit boundary list.
pub fn critical_angles_for(u: &[f64], v: &[f64], boundaries: &[f64]) -> Vec<f64> {
    let mut angles = Vec::new();
    for (&a, &b) in u.iter().zip(v) {
        push_row_crossings(a, b, boundaries, |t| angles.push(t));
    }
    sort_dedup(&mut angles);
    angles
}

/// [`critical_angles_for`] with the format's decision boundaries.
pub fn critical_angles(u: &[f64], v: &[f64], fmt: &MxFormat) -> Vec<f64> {
    critical_angles_for(u, v, fmt.boundaries())
}

/// Bin counts per column.
#[derive(Debug, Clone)]
struct ColumnCounts {
    per_column: Vec<Vec<u64>>,
    rows: usize,
}

impl ColumnCounts {
    fn new(m: &DMatrix<f64>, fmt: &MxFormat) -> Result<Self> {
        if m.is_empty() {
            return Err(TorqError::InvalidInput("occupancy of an empty matrix".into()));
        }
        let per_column = m
            .column_iter()
            .map(|c| fmt.occupancy_counts(c.as_slice()))
            .collect();
        Ok(Self {
            per_column,
            rows: m.nrows(),
        })
    }

    fn total(&self) -> u64 {
        (self.rows * self.per_column.len()) as u64
    }

    fn pooled(&self) -> Vec<u64> {
        let mut out = vec![0u64; self.per_column[0].len()];
        for c in &self.per_column {
            for (o, n) in out.iter_mut().zip(c) {
                *o += n;
            }
        }
        out
    }

    fn pooled_without(&self, p: usize, q: usize) -> Vec<u64> {
        let mut out = self.pooled();
        for col in [p, q] {
            for (o, n) in out.iter_mut().zip(&self.per_column[col]) {
                *o -= n;
            }
        }
        out
    }
}

fn column(m: &DMatrix<f64>, c: usize) -> &[f64] {
    let n = m.nrows();
    &m.as_slice()[c * n..(c + 1) * n]
}

#[inline]
fn rotated_bins(u: f64, v: f64, theta: f64, fmt: &MxFormat) -> (usize, usize) {
    let (s, c) = theta.sin_cos();
    (
        fmt.bin_index((c * u + s * v).abs()),
        fmt.bin_index((-s * u + c * v).abs()),
    )
}

/// Pooled counts with columns `(u, v)` rotated by `theta`, on top of `base`.
fn counts_at(u: &[f64], v: &[f64], base: &[u64], theta: f64, fmt: &MxFormat) -> Vec<u64> {
    let mut counts = base.to_vec();
    for (&a, &b) in u.iter().zip(v) {
        let (x, y) = rotated_bins(a, b, theta, fmt);
        counts[x] += 1;
        counts[y] += 1;
    }
    counts
}

/// Optimal plane angle for one column pair and the loss it attains.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AngleSolution {
    pub theta: f64,
    pub loss: f64,
    /// Number of distinct critical angles enumerated.
    pub critical: usize,
}

/// Exact minimizer of the pooled loss over the rotation angle of one pair.
///
/// `base` holds the pooled bin counts of every column except the pair and
/// `total` the entry count of the whole matrix.
fn solve_pair(u: &[f64], v: &[f64], base: &[u64], total: u64, fmt: &MxFormat) -> AngleSolution {
    let loss_zero = loss_from_counts(&counts_at(u, v, base, 0.0, fmt), total);
    let mut events: Vec<(f64, u32)> = Vec::new();
    for (row, (&a, &b)) in u.iter().zip(v).enumerate() {
        push_row_crossings(a, b, fmt.boundaries(), |t| events.push((t, row as u32)));
    }
    if events.is_empty() {
        return AngleSolution {
            theta: 0.0,
            loss: loss_zero,
            critical: 0,
        };
    }
    events.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));

    // group boundaries: starts[g]..starts[g+1] share one critical angle
    let mut starts = vec![0usize];
    let mut anchor = events[0].0;
    for (idx, ev) in events.iter().enumerate().skip(1) {
        if ev.0 - anchor > ANGLE_DEDUP {
            starts.push(idx);
            anchor = ev.0;
        }
    }
    let groups = starts.len();
    starts.push(events.len());
    let tau = |g: usize| events[starts[g]].0;

    // start inside the wrap-around interval (tau_last, tau_first + 2π)
    let wrap_mid = fold_angle(0.5 * (tau(groups - 1) + tau(0) + TAU));
    let mut bins: Vec<(usize, usize)> = u
        .iter()
        .zip(v)
        .map(|(&a, &b)| rotated_bins(a, b, wrap_mid, fmt))
        .collect();
    let mut counts = base.to_vec();
    for &(x, y) in &bins {
        counts[x] += 1;
        counts[y] += 1;
    }

    let mut best = (loss_zero, 0.0);
    let consider = |loss: f64, theta: f64, best: &mut (f64, f64)| {
        if loss < best.0 || (loss == best.0 && theta < best.1) {
            *best = (loss, theta);
        }
    };
    consider(loss_from_counts(&counts, total), wrap_mid, &mut best);

    // crossing tau_g enters the interval (tau_g, tau_{g+1})
    for g in 0..groups - 1 {
        let mid = 0.5 * (tau(g) + tau(g + 1));
        for &(_, row) in &events[starts[g]..starts[g + 1]] {
            let row = row as usize;
            let (ox, oy) = bins[row];
            let (nx, ny) = rotated_bins(u[row], v[row], mid, fmt);
            counts[ox] -= 1;
            counts[oy] -= 1;
            counts[nx] += 1;
            counts[ny] += 1;
            bins[row] = (nx, ny);
        }
        consider(loss_from_counts(&counts, total), mid, &mut best);
    }

    // re-evaluate the winner directly; fall back to the no-op if rounding in
    // the sweep ever disagrees with it
    let (_, theta) = best;
    let loss = loss_from_counts(&counts_at(u, v, base, theta, fmt), total);
    if loss <= loss_zero {
        AngleSolution {
            theta,
            loss,
            critical: groups,
        }
    } else {
        AngleSolution {
            theta: 0.0,
            loss: loss_zero,
            critical: groups,
        }
    }
}

/// Evenly strided row subset of size `n` (all rows when `n >= rows`).
fn sample_rows(rows: usize, n: usize) -> Vec<usize> {
    if n >= rows {
        return (0..rows).collect();
    }
    (0..n).map(|i| i * rows / n).collect()
}

/// Best angle for rotating columns `(p, q)` of the normalized matrix `z`,
/// judged by the pooled loss of the whole matrix with every other column
/// unchanged.
///
/// Candidates are the midpoints of the intervals between consecutive
/// critical angles (including the wrap-around interval) plus `θ = 0`; ties
/// resolve to the smaller angle.
pub fn best_angle(
    z: &DMatrix<f64>,
    pair: (usize, usize),
    fmt: &MxFormat,
    sample_blocks: Option<usize>,
) -> Result<AngleSolution> {
    let (p, q) = pair;
    if p == q || p >= z.ncols() || q >= z.ncols() {
        return Err(TorqError::InvalidInput(format!(
            "invalid column pair ({p}, {q}) for {} columns",
            z.ncols()
        )));
    }
    let counts = ColumnCounts::new(z, fmt)?;
    Ok(best_angle_with_counts(z, pair, &counts, fmt, sample_blocks))
}

fn best_angle_with_counts(
    z: &DMatrix<f64>,
    (p, q): (usize, usize),
    counts: &ColumnCounts,
    fmt: &MxFormat,
    sample_blocks: Option<usize>,
) -> AngleSolution {
    let (u, v) = (column(z, p), column(z, q));
    let base = counts.pooled_without(p, q);
    let total = counts.total();
    match sample_blocks {
        Some(n) if n < z.nrows() => {
            // solve on a row subset, then accept only if the full loss agrees
            let rows = sample_rows(z.nrows(), n);
            let su: Vec<f64> = rows.iter().map(|&r| u[r]).collect();
            let sv: Vec<f64> = rows.iter().map(|&r| v[r]).collect();
            let sub = z.select_rows(rows.iter());
            let sub_counts = ColumnCounts::new(&sub, fmt).expect("non-empty subset");
            let sub_base = sub_counts.pooled_without(p, q);
            let candidate = solve_pair(&su, &sv, &sub_base, sub_counts.total(), fmt);
            let loss_zero = loss_from_counts(&counts_at(u, v, &base, 0.0, fmt), total);
            let loss = loss_from_counts(&counts_at(u, v, &base, candidate.theta, fmt), total);
            if loss < loss_zero {
                AngleSolution {
                    theta: candidate.theta,
                    loss,
                    critical: candidate.critical,
                }
            } else {
                AngleSolution {
                    theta: 0.0,
                    loss: loss_zero,
                    critical: candidate.critical,
                }
            }
        }
        _ => solve_pair(u, v, &base, total, fmt),
    }
}

/// Rotates columns `(p, q)` of `m` in place: `m <- m G_(p,q)(θ)`.
pub fn rotate_columns(m: &mut DMatrix<f64>, p: usize, q: usize, theta: f64) {
    let (s, c) = theta.sin_cos();
    let n = m.nrows();
    let data = m.as_mut_slice();
    for r in 0..n {
        let (a, b) = (data[p * n + r], data[q * n + r]);
        data[p * n + r] = c * a + s * b;
        data[q * n + r] = -s * a + c * b;
    }
}

/// Outcome of one R-step.
#[derive(Debug, Clone, PartialEq)]
pub struct RStep {
    pub rotation: DMatrix<f64>,
    pub pairs: Vec<(usize, usize)>,
    pub angles: Vec<f64>,
    pub loss_before: f64,
    pub loss_after: f64,
}

/// One R-step on `normalized` (already divided by the fixed scales) under
/// the current rotation `rot`. Pairs are chosen once from the starting
/// histograms and then solved one after another, each seeing the columns
/// left by the previous rotation.
pub fn r_step(
    normalized: &DMatrix<f64>,
    rot: &DMatrix<f64>,
    cfg: &IntraConfig,
    fmt: &MxFormat,
) -> Result<RStep> {
    if rot.nrows() != normalized.ncols() || !rot.is_square() {
        return Err(TorqError::Shape(format!(
            "rotation is {}x{}, data has {} columns",
            rot.nrows(),
            rot.ncols(),
            normalized.ncols()
        )));
    }
    let mut z = normalized * rot;
    let mut rotation = rot.clone();
    let mut counts = ColumnCounts::new(&z, fmt)?;
    let loss_before = loss_from_counts(&counts.pooled(), counts.total());
    let rows = z.nrows() as f64;
    let hists: Vec<Vec<f64>> = counts
        .per_column
        .iter()
        .map(|c| c.iter().map(|&n| n as f64 / rows).collect())
        .collect();
    let pairs = select_pairs(&hists, cfg);

    let mut angles = Vec::with_capacity(pairs.len());
    let mut loss = loss_before;
    for &(p, q) in &pairs {
        let (u, v) = (column(&z, p), column(&z, q));
        if u.iter().chain(v).all(|&x| x == 0.0) {
            angles.push(0.0);
            continue;
        }
        let sol = best_angle_with_counts(&z, (p, q), &counts, fmt, cfg.angle_sample_blocks);
        if sol.theta != 0.0 && sol.loss < loss {
            rotate_columns(&mut z, p, q, sol.theta);
            rotate_columns(&mut rotation, p, q, sol.theta);
            counts.per_column[p] = fmt.occupancy_counts(column(&z, p));
            counts.per_column[q] = fmt.occupancy_counts(column(&z, q));
            loss = sol.loss;
            angles.push(sol.theta);
        } else {
            angles.push(0.0);
        }
    }

    Ok(RStep {
        rotation,
        pairs,
        angles,
        loss_before,
        loss_after: loss,
    })
}

/// Alternates S-steps and R-steps on `data` (rows are blocks, typically all
/// calibration blocks stacked) and returns the rotation with the lowest
/// post-R-step loss seen.
pub fn build_intra_rotation(
    data: &DMatrix<f64>,
    cfg: &IntraConfig,
    fmt: &MxFormat,
) -> Result<IntraRotation> {
    let lanes = data.ncols();
    if data.is_empty() || lanes < 2 {
        return Err(TorqError::Shape(format!(
            "intra calibration needs at least one row and two columns, got {}x{}",
            data.nrows(),
            lanes
        )));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(TorqError::InvalidInput("calibration data contains non-finite values".into()));
    }
    cfg.validate(lanes)?;

    let mut rotation = DMatrix::<f64>::identity(lanes, lanes);
    let mut loss_trace = Vec::with_capacity(cfg.max_iter);
    let mut s_step_trace = Vec::with_capacity(cfg.max_iter);
    let mut best: Option<(f64, DMatrix<f64>)> = None;

    for _ in 0..cfg.max_iter {
        let scales = s_step(data, &rotation, fmt, cfg.pow2_mode);
        let normalized = scales.normalize(data);
        let step = r_step(&normalized, &rotation, cfg, fmt)?;
        s_step_trace.push(step.loss_before);
        loss_trace.push(step.loss_after);

        let reference = best.as_ref().map_or(step.loss_before, |(l, _)| *l);
        let improvement = reference - step.loss_after;
        if best.as_ref().map_or(true, |(l, _)| step.loss_after < *l) {
            best = Some((step.loss_after, step.rotation.clone()));
        }
        rotation = step.rotation;
        if improvement <= cfg.epsilon {
            break;
        }
    }

    let matrix = best.map(|(_, m)| m).unwrap_or(rotation);
    let final_scales = s_step(data, &matrix, fmt, cfg.pow2_mode);
    Ok(IntraRotation {
        matrix,
        loss_trace,
        s_step_trace,
        final_scales,
    })
}
