//! Seeded synthetic activations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, LogNormal, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::block::{BlockShape, BlockTensor};
use crate::error::{Result, TorqError};

pub const DEFAULT_SEED: u64 = 42;
pub const DEFAULT_TOKENS: usize = 128;
pub const DEFAULT_BLOCKS: usize = 64;
pub const DEFAULT_LANES: usize = 32;
pub const DEFAULT_OUTLIER_P: f64 = 0.01;
pub const DEFAULT_OUTLIER_SCALE: f64 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Distribution {
    Gaussian { std: f64 },
    /// Magnitude `exp(N(mu, sigma))` with a fair random sign.
    LogNormal { mu: f64, sigma: f64 },
    Laplace { scale: f64 },
    /// Standard normal entries. Each channel is an outlier channel with
    /// probability `p`; its entries are multiplied by `scale` in every token.
    OutlierMixture { p: f64, scale: f64 },
}

impl Distribution {
    /// Default parameters for a distribution name.
    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "gaussian" => Ok(Distribution::Gaussian { std: 1.0 }),
            "lognormal" => Ok(Distribution::LogNormal { mu: 0.0, sigma: 1.0 }),
            "laplace" => Ok(Distribution::Laplace { scale: 1.0 }),
            "outlier_mixture" => Ok(Distribution::OutlierMixture {
                p: DEFAULT_OUTLIER_P,
                scale: DEFAULT_OUTLIER_SCALE,
            }),
            _ => Err(TorqError::InvalidInput(format!(
                "unknown distribution '{name}' (expected gaussian, lognormal, laplace or outlier_mixture)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Distribution::Gaussian { .. } => "gaussian",
            Distribution::LogNormal { .. } => "lognormal",
            Distribution::Laplace { .. } => "laplace",
            Distribution::OutlierMixture { .. } => "outlier_mixture",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(TorqError::InvalidInput(format!("{}: {what}", self.name())));
        match *self {
            Distribution::Gaussian { std } if !(std.is_finite() && std > 0.0) => bad("std must be positive"),
            Distribution::LogNormal { mu, sigma } if !(mu.is_finite() && sigma.is_finite() && sigma > 0.0) => {
                bad("sigma must be positive")
            }
            Distribution::Laplace { scale } if !(scale.is_finite() && scale > 0.0) => bad("scale must be positive"),
            Distribution::OutlierMixture { p, scale } if !((0.0..=1.0).contains(&p) && scale.is_finite() && scale > 0.0) => {
                bad("p must lie in [0, 1] and scale must be positive")
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub tokens: usize,
    pub shape: BlockShape,
    pub seed: u64,
    pub dist: Distribution,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            tokens: DEFAULT_TOKENS,
            shape: BlockShape::new(DEFAULT_BLOCKS, DEFAULT_LANES).expect("valid default shape"),
            seed: DEFAULT_SEED,
            dist: Distribution::OutlierMixture {
                p: DEFAULT_OUTLIER_P,
                scale: DEFAULT_OUTLIER_SCALE,
            },
        }
    }
}

/// Draws a `T x d` tensor. Identical configs give identical values.
pub fn generate(cfg: &SynthConfig) -> Result<BlockTensor> {
    cfg.dist.validate()?;
    if cfg.tokens == 0 {
        return Err(TorqError::InvalidInput("tokens must be positive".into()));
    }
    let d = cfg.shape.dim();
    let n = cfg.tokens * d;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let data: Vec<f64> = match cfg.dist {
        Distribution::Gaussian { std } => {
            let normal = Normal::new(0.0, std).map_err(|e| TorqError::InvalidInput(e.to_string()))?;
            (0..n).map(|_| normal.sample(&mut rng)).collect()
        }
        Distribution::LogNormal { mu, sigma } => {
            let ln = LogNormal::new(mu, sigma).map_err(|e| TorqError::InvalidInput(e.to_string()))?;
            (0..n)
                .map(|_| {
                    let m: f64 = ln.sample(&mut rng);
                    if rng.random::<bool>() {
                        m
                    } else {
                        -m
                    }
                })
                .collect()
        }
        Distribution::Laplace { scale } => (0..n)
            .map(|_| {
                // inverse CDF on u in (-1/2, 1/2)
                let u: f64 = rng.random::<f64>() - 0.5;
                -scale * u.signum() * (1.0 - 2.0 * u.abs()).max(f64::MIN_POSITIVE).ln()
            })
            .collect(),
        Distribution::OutlierMixture { p, scale } => {
            let gain: Vec<f64> = (0..d)
                .map(|_| if rng.random_bool(p) { scale } else { 1.0 })
                .collect();
            (0..n)
                .map(|i| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z * gain[i % d]
                })
                .collect()
        }
    };
    BlockTensor::from_flat(data, cfg.shape)
}

/// Splits a tensor into its first `head` tokens and the rest.
pub fn split_tokens(data: &BlockTensor, head: usize) -> Result<(BlockTensor, BlockTensor)> {
    if head == 0 || head >= data.tokens() {
        return Err(TorqError::InvalidInput(format!(
            "cannot split {} tokens at {head}",
            data.tokens()
        )));
    }
    let d = data.shape().dim();
    let (a, b) = data.flatten().split_at(head * d);
    Ok((
        BlockTensor::from_flat(a.to_vec(), data.shape())?,
        BlockTensor::from_flat(b.to_vec(), data.shape())?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(dist: Distribution) -> SynthConfig {
        SynthConfig {
            tokens: 16,
            shape: BlockShape::new(4, 8).unwrap(),
            seed: 3,
            dist,
        }
    }

    #[test]
    fn deterministic_per_seed() {
        for name in ["gaussian", "lognormal", "laplace", "outlier_mixture"] {
            let c = cfg(Distribution::by_name(name).unwrap());
            assert_eq!(generate(&c).unwrap(), generate(&c).unwrap());
            let other = SynthConfig { seed: 4, ..c };
            assert_ne!(generate(&c).unwrap(), generate(&other).unwrap());
        }
    }

    #[test]
    fn outlier_channels_are_persistent() {
        let c = SynthConfig {
            tokens: 400,
            dist: Distribution::OutlierMixture { p: 0.25, scale: 100.0 },
            ..cfg(Distribution::by_name("gaussian").unwrap())
        };
        let t = generate(&c).unwrap();
        let d = c.shape.dim();
        let mut loud = 0;
        for ch in 0..d {
            let ms = (0..t.tokens()).map(|tok| t.token(tok)[ch].powi(2)).sum::<f64>() / t.tokens() as f64;
            assert!(!(2.0..=5000.0).contains(&ms), "channel {ch} has mean square {ms}");
            loud += usize::from(ms > 5000.0);
        }
        assert!(loud > 0 && loud < d);
    }

    #[test]
    fn laplace_moments() {
        let c = SynthConfig {
            tokens: 2000,
            ..cfg(Distribution::Laplace { scale: 2.0 })
        };
        let t = generate(&c).unwrap();
        let v = t.flatten();
        let mean_abs = v.iter().map(|x| x.abs()).sum::<f64>() / v.len() as f64;
        assert!((mean_abs - 2.0).abs() < 0.1, "{mean_abs}");
    }

    #[test]
    fn invalid_parameters() {
        assert!(Distribution::by_name("cauchy").is_err());
        assert!(generate(&cfg(Distribution::Gaussian { std: -1.0 })).is_err());
        assert!(generate(&cfg(Distribution::OutlierMixture { p: 1.5, scale: 2.0 })).is_err());
        assert!(generate(&SynthConfig { tokens: 0, ..cfg(Distribution::Laplace { scale: 1.0 }) }).is_err());
    }

    #[test]
    fn split_keeps_order() {
        let t = generate(&cfg(Distribution::Gaussian { std: 1.0 })).unwrap();
        let (a, b) = split_tokens(&t, 10).unwrap();
        assert_eq!(a.tokens(), 10);
        assert_eq!(b.tokens(), 6);
        assert_eq!(b.token(0), t.token(10));
        assert!(split_tokens(&t, 16).is_err());
    }
}
