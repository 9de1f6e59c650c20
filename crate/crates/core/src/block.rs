//! Calibration activations in block layout and their second-moment
//! statistics.
//!
//! A token vector of length `d = B * K` is cut into `B` contiguous chunks of
//! `K` lanes: element `i` lands in block `i / K`, lane `i % K`. Each token is
//! therefore a `B x K` matrix whose rows are the quantization blocks.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TorqError};

/// Default ridge added to covariance diagonals.
pub const DEFAULT_RIDGE: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BlockShape {
    blocks: usize,
    lanes: usize,
}

impl BlockShape {
    pub fn new(blocks: usize, lanes: usize) -> Result<Self> {
        if blocks < 2 || lanes < 2 {
            return Err(TorqError::Shape(format!(
                "need at least 2 blocks and 2 lanes, got B={blocks}, K={lanes}"
            )));
        }
        Ok(Self { blocks, lanes })
    }

    /// Number of blocks `B` per token.
    pub fn blocks(&self) -> usize {
        self.blocks
    }

    /// Lanes `K` per block.
    pub fn lanes(&self) -> usize {
        self.lanes
    }

    /// Feature dimension `d = B * K`.
    pub fn dim(&self) -> usize {
        self.blocks * self.lanes
    }
}

/// `T` token samples, each viewed as a `B x K` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockTensor {
    shape: BlockShape,
    tokens: usize,
    // token-major, each token in its original element order
    data: Vec<f64>,
}

/// Reshapes a row-major `T x columns` token matrix into block layout.
pub fn reshape_tokens(flat: &[f64], columns: usize, shape: BlockShape) -> Result<BlockTensor> {
    if columns != shape.dim() {
        return Err(TorqError::Shape(format!(
            "token width {columns} does not match B*K = {}",
            shape.dim()
        )));
    }
    BlockTensor::from_flat(flat.to_vec(), shape)
}

impl BlockTensor {
    /// Takes ownership of a row-major `T x d` buffer.
    pub fn from_flat(data: Vec<f64>, shape: BlockShape) -> Result<Self> {
        let d = shape.dim();
        if data.is_empty() || data.len() % d != 0 {
            return Err(TorqError::Shape(format!(
                "buffer of {} values is not a positive multiple of d = {d}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TorqError::InvalidInput("tensor contains non-finite values".into()));
        }
        Ok(Self {
            shape,
            tokens: data.len() / d,
            data,
        })
    }

    /// Builds a tensor from `B x K` sample matrices.
    pub fn from_samples(shape: BlockShape, samples: &[DMatrix<f64>]) -> Result<Self> {
        let mut data = Vec::with_capacity(samples.len() * shape.dim());
        for m in samples {
            if m.nrows() != shape.blocks() || m.ncols() != shape.lanes() {
                return Err(TorqError::Shape(format!(
                    "sample is {}x{}, expected {}x{}",
                    m.nrows(),
                    m.ncols(),
                    shape.blocks(),
                    shape.lanes()
                )));
            }
            for b in 0..shape.blocks() {
                data.extend(m.row(b).iter());
            }
        }
        Self::from_flat(data, shape)
    }

    pub fn shape(&self) -> BlockShape {
        self.shape
    }

    /// Number of samples `T`.
    pub fn tokens(&self) -> usize {
        self.tokens
    }

    /// The row-major `T x d` buffer; inverse of [`reshape_tokens`].
    pub fn flatten(&self) -> &[f64] {
        &self.data
    }

    pub fn token(&self, t: usize) -> &[f64] {
        let d = self.shape.dim();
        &self.data[t * d..(t + 1) * d]
    }

    /// Lanes of block `b` of sample `t`.
    pub fn block(&self, t: usize, b: usize) -> &[f64] {
        let k = self.shape.lanes();
        &self.token(t)[b * k..(b + 1) * k]
    }

    /// Sample `t` as a `B x K` matrix.
    pub fn sample(&self, t: usize) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.shape.blocks(), self.shape.lanes(), self.token(t))
    }

    pub fn samples(&self) -> impl Iterator<Item = DMatrix<f64>> + '_ {
        (0..self.tokens).map(|t| self.sample(t))
    }

    /// Applies `f` to every sample matrix.
    pub fn map_samples<F>(&self, f: F) -> Result<Self>
    where
        F: Fn(&DMatrix<f64>) -> DMatrix<f64>,
    {
        let mapped: Vec<_> = self.samples().map(|m| f(&m)).collect();
        Self::from_samples(self.shape, &mapped)
    }

    /// All blocks stacked as a `(T*B) x K` matrix; row `t*B + b` holds block
    /// `b` of sample `t`.
    pub fn stacked_blocks(&self) -> DMatrix<f64> {
        let rows = self.tokens * self.shape.blocks();
        DMatrix::from_row_slice(rows, self.shape.lanes(), &self.data)
    }
}

/// Per-lane block covariances and their average.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionCovariance {
    /// `Sigma_k` for each lane `k`, each `B x B`.
    pub per_position: Vec<DMatrix<f64>>,
    /// `(1/K) sum_k Sigma_k`.
    pub pooled: DMatrix<f64>,
    pub ridge: f64,
}

/// Uncentered second moments `Sigma_k = (1/T) sum_t x_t[:,k] x_t[:,k]^T + ridge*I`.
///
/// Lanes are processed in parallel; within a lane the samples are summed in
/// order, so the result does not depend on the thread count.
pub fn estimate_covariances(data: &BlockTensor, ridge: f64) -> PositionCovariance {
    let shape = data.shape();
    let (nb, nk) = (shape.blocks(), shape.lanes());
    let inv_t = 1.0 / data.tokens() as f64;

    let per_position: Vec<DMatrix<f64>> = (0..nk)
        .into_par_iter()
        .map(|k| {
            let mut sigma = DMatrix::<f64>::zeros(nb, nb);
            let mut column = vec![0.0; nb];
            for t in 0..data.tokens() {
                let token = data.token(t);
                for (b, c) in column.iter_mut().enumerate() {
                    *c = token[b * nk + k];
                }
                for j in 0..nb {
                    let cj = column[j];
                    if cj == 0.0 {
                        continue;
                    }
                    for i in 0..nb {
                        sigma[(i, j)] += column[i] * cj;
                    }
                }
            }
            sigma *= inv_t;
            for i in 0..nb {
                sigma[(i, i)] += ridge;
            }
            sigma
        })
        .collect();

    let mut pooled = DMatrix::<f64>::zeros(nb, nb);
    for sigma in &per_position {
        pooled += sigma;
    }
    pooled /= nk as f64;

    PositionCovariance {
        per_position,
        pooled,
        ridge,
    }
}

/// `T x B` matrix of block energies `||z_{t,b}||^2`.
pub fn block_variances(data: &BlockTensor) -> DMatrix<f64> {
    let nb = data.shape().blocks();
    DMatrix::from_fn(data.tokens(), nb, |t, b| {
        data.block(t, b).iter().map(|v| v * v).sum()
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(seed: u64, t: usize, shape: BlockShape) -> BlockTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..t * shape.dim())
            .map(|_| rng.random_range(-3.0..3.0))
            .collect();
        BlockTensor::from_flat(data, shape).unwrap()
    }

    #[test]
    fn layout_is_contiguous_chunks() {
        let shape = BlockShape::new(2, 2).unwrap();
        let x = reshape_tokens(&[1.0, 2.0, 3.0, 4.0], 4, shape).unwrap();
        assert_eq!(x.sample(0), DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(x.block(0, 1), &[3.0, 4.0]);
    }

    #[test]
    fn reshape_flatten_round_trip() {
        let shape = BlockShape::new(4, 8).unwrap();
        let x = random_tensor(1, 5, shape);
        let y = reshape_tokens(x.flatten(), 32, shape).unwrap();
        assert_eq!(y.flatten(), x.flatten());
        let from_samples: Vec<_> = x.samples().collect();
        assert_eq!(BlockTensor::from_samples(shape, &from_samples).unwrap(), x);
    }

    #[test]
    fn shape_errors() {
        assert!(BlockShape::new(1, 4).is_err());
        assert!(BlockShape::new(4, 1).is_err());
        let shape = BlockShape::new(2, 2).unwrap();
        assert!(matches!(
            reshape_tokens(&[1.0; 6], 3, shape),
            Err(TorqError::Shape(_))
        ));
        assert!(reshape_tokens(&[], 4, shape).is_err());
        assert!(reshape_tokens(&[f64::NAN, 0.0, 0.0, 0.0], 4, shape).is_err());
    }

    #[test]
    fn single_outer_product() {
        let shape = BlockShape::new(3, 2).unwrap();
        // lane 0 column is [1, 0, 0]
        let x = reshape_tokens(&[1.0, 0.0, 0.0, 0.0, 0.0, 0.0], 6, shape).unwrap();
        let cov = estimate_covariances(&x, 0.0);
        let mut expected = DMatrix::zeros(3, 3);
        expected[(0, 0)] = 1.0;
        assert_eq!(cov.per_position[0], expected);
        assert_eq!(cov.per_position[1], DMatrix::zeros(3, 3));

        let ridged = estimate_covariances(&x, 1e-8);
        for k in 0..2 {
            let expected = &cov.per_position[k] + DMatrix::<f64>::identity(3, 3) * 1e-8;
            assert_eq!(ridged.per_position[k], expected);
        }
    }

    #[test]
    fn covariance_matches_naive_accumulation() {
        let shape = BlockShape::new(5, 4).unwrap();
        let x = random_tensor(2, 17, shape);
        let cov = estimate_covariances(&x, 0.0);
        for k in 0..4 {
            for i in 0..5 {
                for j in 0..5 {
                    let mut acc = 0.0;
                    for t in 0..17 {
                        acc += x.block(t, i)[k] * x.block(t, j)[k];
                    }
                    acc /= 17.0;
                    let got = cov.per_position[k][(i, j)];
                    assert!((got - acc).abs() <= 1e-12 * acc.abs().max(1.0));
                }
            }
        }
        let mut pooled = DMatrix::zeros(5, 5);
        for s in &cov.per_position {
            pooled += s;
        }
        pooled /= 4.0;
        assert!((pooled - &cov.pooled).amax() < 1e-12);
    }

    #[test]
    fn covariance_is_sample_order_invariant() {
        let shape = BlockShape::new(4, 3).unwrap();
        let x = random_tensor(3, 9, shape);
        let mut rev: Vec<_> = x.samples().collect();
        rev.reverse();
        let y = BlockTensor::from_samples(shape, &rev).unwrap();
        let a = estimate_covariances(&x, 0.0);
        let b = estimate_covariances(&y, 0.0);
        for k in 0..3 {
            let scale = a.per_position[k].amax();
            assert!((&a.per_position[k] - &b.per_position[k]).amax() <= 1e-12 * scale);
        }
    }

    #[test]
    fn block_energies() {
        let shape = BlockShape::new(2, 2).unwrap();
        let x = reshape_tokens(&[3.0, 4.0, 0.0, 0.0], 4, shape).unwrap();
        let v = block_variances(&x);
        assert_eq!(v[(0, 0)], 25.0);
        assert_eq!(v[(0, 1)], 0.0);

        let x = random_tensor(4, 6, BlockShape::new(3, 5).unwrap());
        let v = block_variances(&x);
        for t in 0..6 {
            for b in 0..3 {
                let mut acc = 0.0;
                for &e in x.block(t, b) {
                    acc += e * e;
                }
                assert_eq!(v[(t, b)], acc);
            }
        }
    }
}
