//! Microscaling block formats.
//!
//! A format is a sign-symmetric codebook of `J` non-negative magnitudes
//! together with the `J - 1` decision boundaries that nearest-neighbor
//! rounding induces between them. Every block of `K` values shares a single
//! positive scale `s`; element `z` is stored as the code nearest to `z / s`
//! and read back as `s * codeword`.
//!
//! Rounding conventions used throughout the crate:
//!
//! * a magnitude lying exactly on a boundary rounds to the smaller codeword;
//! * magnitudes above the largest codeword saturate to it;
//! * signed zero is collapsed into a single zero code.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, TorqError};

/// The supported block formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FormatKind {
    /// OCP MXFP4: e2m1 elements with a power-of-two shared scale.
    Mxfp4,
    /// Symmetric 4-bit integers with a power-of-two shared scale.
    Mxint4,
    /// e2m1 elements with a real-valued scale (the FP8 scale encoding is not
    /// modelled). Usually paired with 16-lane blocks.
    Nvfp4,
}

impl FormatKind {
    pub fn name(self) -> &'static str {
        match self {
            FormatKind::Mxfp4 => "mxfp4",
            FormatKind::Mxint4 => "mxint4",
            FormatKind::Nvfp4 => "nvfp4",
        }
    }

    /// Stable numeric tag used by the binary bundle format.
    pub fn tag(self) -> u32 {
        match self {
            FormatKind::Mxfp4 => 0,
            FormatKind::Mxint4 => 1,
            FormatKind::Nvfp4 => 2,
        }
    }

    pub fn from_tag(tag: u32) -> Result<Self> {
        match tag {
            0 => Ok(FormatKind::Mxfp4),
            1 => Ok(FormatKind::Mxint4),
            2 => Ok(FormatKind::Nvfp4),
            other => Err(TorqError::Malformed(format!("unknown format tag {other}"))),
        }
    }
}

impl fmt::Display for FormatKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FormatKind {
    type Err = TorqError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mxfp4" | "mxfp4_e2m1" => Ok(FormatKind::Mxfp4),
            "mxint4" => Ok(FormatKind::Mxint4),
            "nvfp4" | "nvfp4_e2m1" => Ok(FormatKind::Nvfp4),
            _ => Err(TorqError::UnknownFormat(s.to_string())),
        }
    }
}

/// How a block scale is chosen when no calibrated scale is supplied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleRule {
    /// `s = 2^floor(log2 max|z|)`.
    Pow2FloorOfMax,
    /// `s = max|z| / c_max`, a real scale that maps the block maximum onto
    /// the largest codeword.
    MaxToCodeword,
}

/// A microscaling format definition.
#[derive(Debug, Clone, PartialEq)]
pub struct MxFormat {
    kind: FormatKind,
    codewords: Vec<f64>,
    boundaries: Vec<f64>,
    scale_rule: ScaleRule,
    e_min: i32,
    e_max: i32,
}

const E2M1_MAGNITUDES: [f64; 8] = [0.0, 0.5, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0];

impl MxFormat {
    /// MXFP4 with the e2m1 codebook `{0, 0.5, 1, 1.5, 2, 3, 4, 6}`.
    pub fn mxfp4() -> Self {
        Self::from_parts(
            FormatKind::Mxfp4,
            E2M1_MAGNITUDES.to_vec(),
            ScaleRule::Pow2FloorOfMax,
            -1,
            2,
        )
    }

    /// Symmetric INT4 magnitudes `{0, 1, ..., 7}`.
    pub fn mxint4() -> Self {
        Self::from_parts(
            FormatKind::Mxint4,
            (0..8).map(f64::from).collect(),
            ScaleRule::Pow2FloorOfMax,
            0,
            2,
        )
    }

    /// e2m1 codebook with a real-valued max-to-codeword scale.
    pub fn nvfp4() -> Self {
        Self::from_parts(
            FormatKind::Nvfp4,
            E2M1_MAGNITUDES.to_vec(),
            ScaleRule::MaxToCodeword,
            -1,
            2,
        )
    }

    pub fn from_kind(kind: FormatKind) -> Self {
        match kind {
            FormatKind::Mxfp4 => Self::mxfp4(),
            FormatKind::Mxint4 => Self::mxint4(),
            FormatKind::Nvfp4 => Self::nvfp4(),
        }
    }

    /// Looks a format up by its CLI name (`mxfp4`, `mxint4`, `nvfp4`).
    pub fn by_name(name: &str) -> Result<Self> {
        name.parse().map(Self::from_kind)
    }

    fn from_parts(
        kind: FormatKind,
        codewords: Vec<f64>,
        scale_rule: ScaleRule,
        e_min: i32,
        e_max: i32,
    ) -> Self {
        let boundaries = codewords.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect();
        Self {
            kind,
            codewords,
            boundaries,
            scale_rule,
            e_min,
            e_max,
        }
    }

    pub fn kind(&self) -> FormatKind {
        self.kind
    }

    pub fn name(&self) -> &'static str {
        self.kind.name()
    }

    /// Non-negative codeword magnitudes, strictly increasing, starting at 0.
    pub fn codewords(&self) -> &[f64] {
        &self.codewords
    }

    /// Decision thresholds `d_1 .. d_{J-1}` between consecutive magnitudes.
    pub fn boundaries(&self) -> &[f64] {
        &self.boundaries
    }

    /// Number of magnitude bins `J`.
    pub fn bins(&self) -> usize {
        self.codewords.len()
    }

    pub fn c_max(&self) -> f64 {
        *self.codewords.last().expect("codebook is never empty")
    }

    /// Smallest positive codeword.
    pub fn min_step(&self) -> f64 {
        self.codewords[1]
    }

    pub fn scale_rule(&self) -> ScaleRule {
        self.scale_rule
    }

    pub fn e_min(&self) -> i32 {
        self.e_min
    }

    pub fn e_max(&self) -> i32 {
        self.e_max
    }

    /// The interval `[L, U]` of log2-magnitudes the codebook spans:
    /// `L = e_min`, `U = e_max + log2 1.5` for the e2m1 formats and
    /// `[0, log2 c_max]` for integers.
    pub fn log_magnitude_range(&self) -> (f64, f64) {
        match self.kind {
            FormatKind::Mxfp4 | FormatKind::Nvfp4 => {
                (f64::from(self.e_min), f64::from(self.e_max) + 1.5f64.log2())
            }
            FormatKind::Mxint4 => (0.0, self.c_max().log2()),
        }
    }

    /// The full signed codeword table in ascending order, zero collapsed.
    pub fn signed_codewords(&self) -> Vec<f64> {
        let neg = self.codewords[1..].iter().rev().map(|c| -c);
        neg.chain(self.codewords.iter().copied()).collect()
    }

    /// Magnitude bin of `|value|`: the number of boundaries strictly below it.
    #[inline]
    pub fn bin_index(&self, magnitude: f64) -> usize {
        self.boundaries.partition_point(|&d| d < magnitude)
    }

    /// Nearest signed codeword, saturating at `±c_max`.
    #[inline]
    pub fn project(&self, value: f64) -> f64 {
        let magnitude = self.codewords[self.bin_index(value.abs())];
        if value < 0.0 {
            -magnitude
        } else {
            magnitude
        }
    }

    /// Index into [`signed_codewords`](Self::signed_codewords) of the
    /// projection of `value`.
    #[inline]
    pub fn code(&self, value: f64) -> u8 {
        let zero = self.codewords.len() - 1;
        let bin = self.bin_index(value.abs());
        let idx = if value < 0.0 { zero - bin } else { zero + bin };
        idx as u8
    }

    /// Shared scale for `block` under this format's default rule. All-zero
    /// blocks get scale 1.
    pub fn default_scale(&self, block: &[f64]) -> Result<f64> {
        let max = max_abs(block)?;
        if max == 0.0 {
            return Ok(1.0);
        }
        Ok(match self.scale_rule {
            ScaleRule::Pow2FloorOfMax => pow2_floor(max),
            ScaleRule::MaxToCodeword => max / self.c_max(),
        })
    }

    /// Quantizes one block with the given shared scale.
    pub fn quantize_block(&self, block: &[f64], scale: f64) -> Result<QuantizedBlock> {
        if !(scale.is_finite() && scale > 0.0) {
            return Err(TorqError::InvalidScale(scale));
        }
        if block.iter().any(|v| !v.is_finite()) {
            return Err(TorqError::InvalidInput("block contains non-finite values".into()));
        }
        let table = self.signed_codewords();
        let codes: Vec<u8> = block.iter().map(|&v| self.code(v / scale)).collect();
        let dequantized = codes.iter().map(|&c| scale * table[c as usize]).collect();
        Ok(QuantizedBlock {
            scale,
            codes,
            dequantized,
        })
    }

    /// Bin counts of `|v|` over the `J` magnitude bins.
    pub fn occupancy_counts(&self, values: &[f64]) -> Vec<u64> {
        let mut counts = vec![0u64; self.bins()];
        for v in values {
            counts[self.bin_index(v.abs())] += 1;
        }
        counts
    }

    /// Empirical occupancy probabilities of the `J` magnitude bins. Binning
    /// follows the quantizer, so a magnitude sitting on `d_j` is counted in
    /// bin `j - 1`.
    pub fn occupancy_histogram(&self, values: &[f64]) -> Result<Vec<f64>> {
        if values.is_empty() {
            return Err(TorqError::InvalidInput("occupancy of an empty set".into()));
        }
        let n = values.len() as f64;
        Ok(self
            .occupancy_counts(values)
            .into_iter()
            .map(|c| c as f64 / n)
            .collect())
    }
}

impl Default for MxFormat {
    fn default() -> Self {
        Self::mxfp4()
    }
}

/// One quantized block.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedBlock {
    pub scale: f64,
    /// Indices into the signed codeword table.
    pub codes: Vec<u8>,
    pub dequantized: Vec<f64>,
}

/// Rounding mode of the power-of-two scale projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pow2Mode {
    /// `2^round(log2 x)`.
    #[default]
    Round,
    /// `2^floor(log2 x)`.
    Floor,
    /// `2^ceil(log2 x)`. A block max mapped this way never exceeds `c_max`.
    Ceil,
}

impl FromStr for Pow2Mode {
    type Err = TorqError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "round" => Ok(Pow2Mode::Round),
            "floor" => Ok(Pow2Mode::Floor),
            "ceil" => Ok(Pow2Mode::Ceil),
            _ => Err(TorqError::InvalidInput(format!(
                "pow2 mode must be 'round', 'floor' or 'ceil', got '{s}'"
            ))),
        }
    }
}

/// Projects a positive ratio onto a power of two. Non-positive input maps
/// to 1.
pub fn clip_to_pow2(x: f64, mode: Pow2Mode) -> f64 {
    if !(x > 0.0) || !x.is_finite() {
        return 1.0;
    }
    let floor = pow2_floor(x);
    match mode {
        Pow2Mode::Floor => floor,
        Pow2Mode::Ceil if x == floor => floor,
        Pow2Mode::Ceil => 2.0 * floor,
        // log2(x / floor) >= 1/2  <=>  x / floor >= sqrt(2); the ratio is
        // exact because floor is a power of two.
        Pow2Mode::Round if x / floor >= std::f64::consts::SQRT_2 => 2.0 * floor,
        Pow2Mode::Round => floor,
    }
}

/// `2^floor(log2 x)` for finite `x > 0`, computed from the exponent bits.
pub fn pow2_floor(x: f64) -> f64 {
    debug_assert!(x > 0.0 && x.is_finite());
    let bits = x.to_bits();
    let exp = ((bits >> 52) & 0x7ff) as i32;
    if exp == 0 {
        // subnormal: fall back to the float routine
        return 2f64.powi(x.log2().floor() as i32);
    }
    f64::from_bits((exp as u64) << 52)
}

/// Largest magnitude of a block, rejecting non-finite entries.
pub fn max_abs(block: &[f64]) -> Result<f64> {
    let mut max = 0.0f64;
    for &v in block {
        if !v.is_finite() {
            return Err(TorqError::InvalidInput("block contains non-finite values".into()));
        }
        max = max.max(v.abs());
    }
    Ok(max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_force(fmt: &MxFormat, v: f64) -> f64 {
        // exhaustive argmin; ties go to the smaller magnitude
        let mut best = 0.0f64;
        let mut best_err = f64::INFINITY;
        for c in fmt.signed_codewords() {
            let err = (v - c).abs();
            if err < best_err || (err == best_err && c.abs() < best.abs()) {
                best = c;
                best_err = err;
            }
        }
        best
    }

    #[test]
    fn e2m1_tables() {
        let f = MxFormat::mxfp4();
        assert_eq!(f.bins(), 8);
        assert_eq!(f.c_max(), 6.0);
        assert_eq!(f.min_step(), 0.5);
        assert_eq!(
            f.boundaries(),
            &[0.25, 0.75, 1.25, 1.75, 2.5, 3.5, 5.0]
        );
        assert_eq!(f.signed_codewords().len(), 15);
        let (l, u) = f.log_magnitude_range();
        assert_eq!(l, -1.0);
        assert!((u - 6f64.log2()).abs() < 1e-15);
    }

    #[test]
    fn default_scale_examples() {
        let f = MxFormat::mxfp4();
        assert_eq!(f.default_scale(&[6.0, -1.0]).unwrap(), 4.0);
        assert_eq!(f.default_scale(&[1.0, 0.5]).unwrap(), 1.0);
        assert_eq!(f.default_scale(&[0.0; 4]).unwrap(), 1.0);
        assert_eq!(f.default_scale(&[-8.0]).unwrap(), 8.0);
        assert_eq!(f.default_scale(&[7.999999999999999]).unwrap(), 4.0);
        assert!(matches!(
            f.default_scale(&[1.0, f64::NAN]),
            Err(TorqError::InvalidInput(_))
        ));
        assert!(f.default_scale(&[f64::INFINITY]).is_err());
    }

    #[test]
    fn nvfp4_scale_maps_max_to_cmax() {
        let f = MxFormat::nvfp4();
        assert_eq!(f.default_scale(&[3.0, -1.0]).unwrap(), 0.5);
        assert_eq!(f.default_scale(&[0.0]).unwrap(), 1.0);
    }

    #[test]
    fn projection_examples() {
        let f = MxFormat::mxfp4();
        assert_eq!(f.project(1.5), 1.5);
        assert_eq!(f.project(2.4), 2.0);
        assert_eq!(f.project(-7.0), -6.0);
        assert_eq!(f.project(-0.0), 0.0);
        // ties go down
        assert_eq!(f.project(2.5), 2.0);
        assert_eq!(f.project(-0.25), 0.0);
    }

    #[test]
    fn boundary_adjacency() {
        for f in [MxFormat::mxfp4(), MxFormat::mxint4()] {
            for (j, &d) in f.boundaries().iter().enumerate() {
                let eps = 1e-9 * d;
                assert_eq!(f.project(d - eps), f.codewords()[j]);
                assert_eq!(f.project(d + eps), f.codewords()[j + 1]);
            }
        }
    }

    #[test]
    fn quantize_block_fixed_points() {
        let f = MxFormat::mxfp4();
        for s in [0.125, 1.0, 4.0, 3.0] {
            let block: Vec<f64> = f.signed_codewords().iter().map(|c| s * c).collect();
            let q = f.quantize_block(&block, s).unwrap();
            assert_eq!(q.dequantized, block);
        }
        let q = f.quantize_block(&[0.0; 8], 1.0).unwrap();
        assert!(q.dequantized.iter().all(|&v| v == 0.0));
        assert_eq!(q.codes, vec![7; 8]);
    }

    #[test]
    fn quantize_block_rejects_bad_scales() {
        let f = MxFormat::mxfp4();
        for s in [0.0, -1.0, f64::NAN, f64::INFINITY] {
            assert!(matches!(
                f.quantize_block(&[1.0], s),
                Err(TorqError::InvalidScale(_))
            ));
        }
    }

    #[test]
    fn quantize_matches_brute_force() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let f = MxFormat::mxfp4();
        for _ in 0..200 {
            let block: Vec<f64> = (0..32).map(|_| rng.random_range(-20.0..20.0)).collect();
            let s = f.default_scale(&block).unwrap();
            let q = f.quantize_block(&block, s).unwrap();
            for (x, y) in block.iter().zip(&q.dequantized) {
                assert_eq!(*y, s * brute_force(&f, x / s));
                assert!(y.abs() <= s * f.c_max());
            }
            let again = f.quantize_block(&q.dequantized, s).unwrap();
            assert_eq!(again.dequantized, q.dequantized);
        }
    }

    #[test]
    fn occupancy_examples() {
        let f = MxFormat::mxfp4();
        let h = f.occupancy_histogram(&[0.1, 0.2, -0.05]).unwrap();
        assert_eq!(h[0], 1.0);
        assert!(h[1..].iter().all(|&p| p == 0.0));

        let h = f.occupancy_histogram(f.codewords()).unwrap();
        assert!(h.iter().all(|&p| p == 1.0 / 8.0));

        let h = f.occupancy_histogram(&[0.1, 0.6, 5.5]).unwrap();
        let third = 1.0 / 3.0;
        assert_eq!(h, vec![third, third, 0.0, 0.0, 0.0, 0.0, 0.0, third]);

        assert!(f.occupancy_histogram(&[]).is_err());
    }

    #[test]
    fn pow2_projection() {
        assert_eq!(clip_to_pow2(1.0, Pow2Mode::Round), 1.0);
        assert_eq!(clip_to_pow2(2.0, Pow2Mode::Round), 2.0);
        assert_eq!(clip_to_pow2(1.41, Pow2Mode::Round), 1.0);
        assert_eq!(clip_to_pow2(1.42, Pow2Mode::Round), 2.0);
        assert_eq!(clip_to_pow2(0.7, Pow2Mode::Round), 0.5);
        assert_eq!(clip_to_pow2(1.99, Pow2Mode::Floor), 1.0);
        assert_eq!(clip_to_pow2(0.0, Pow2Mode::Round), 1.0);
        assert_eq!(pow2_floor(6.0), 4.0);
        assert_eq!(pow2_floor(0.375), 0.25);
    }

    #[test]
    fn format_names() {
        assert_eq!(MxFormat::by_name("mxfp4").unwrap().kind(), FormatKind::Mxfp4);
        assert_eq!(MxFormat::by_name("NVFP4").unwrap().kind(), FormatKind::Nvfp4);
        assert!(MxFormat::by_name("fp8").is_err());
        for k in [FormatKind::Mxfp4, FormatKind::Mxint4, FormatKind::Nvfp4] {
            assert_eq!(FormatKind::from_tag(k.tag()).unwrap(), k);
        }
    }
}
