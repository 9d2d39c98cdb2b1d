//! Block-exchangeable matrices.
//!
//! A [`BlockExchangeableMatrix`] is the `PT x PT` matrix with the `T x T`
//! block `A` on the diagonal and `B` everywhere else. Writing `J` for the
//! `P x P` all-ones matrix it decomposes as
//!
//! ```text
//! V = (I - J/P) (x) (A - B)  +  (J/P) (x) (A + (P-1)B)
//! ```
//!
//! so its inverse has the same form with diagonal block `C` and off-diagonal
//! block `D`, and only `A - B` and `A + (P-1)B` ever need inverting.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{BlockFactor, Error, Result};

/// Reciprocal condition number below which a factor counts as singular.
pub const RCOND_TOLERANCE: f64 = 1e-12;

/// Largest tolerated asymmetry, relative to the largest entry.
pub const SYMMETRY_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct BlockExchangeableMatrix {
    periods: usize,
    diagonal: DMatrix<f64>,
    off_diagonal: DMatrix<f64>,
}

/// Diagonal (`C`) and off-diagonal (`D`) blocks of the inverse.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockInverse {
    periods: usize,
    diagonal: DMatrix<f64>,
    off_diagonal: DMatrix<f64>,
}

fn symmetrize(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !m.is_square() {
        return Err(Error::Shape(format!("block is {}x{}, not square", m.nrows(), m.ncols())));
    }
    let scale = m.amax().max(1.0);
    let asym = (m - m.transpose()).amax();
    if asym > SYMMETRY_TOLERANCE * scale {
        return Err(Error::Asymmetric { asymmetry: asym });
    }
    Ok((m + m.transpose()) * 0.5)
}

/// Inverse of a symmetric matrix through its eigendecomposition, failing when
/// the reciprocal condition number drops below [`RCOND_TOLERANCE`].
fn symmetric_inverse(m: &DMatrix<f64>, factor: BlockFactor) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(m.clone());
    let max = eig.eigenvalues.amax();
    let min = eig.eigenvalues.iter().fold(f64::INFINITY, |acc, v| acc.min(v.abs()));
    let rcond = if max > 0.0 { min / max } else { 0.0 };
    if !(rcond >= RCOND_TOLERANCE) {
        return Err(Error::SingularBlock { factor, rcond });
    }
    let inv_vals = eig.eigenvalues.map(|v| 1.0 / v);
    let q = &eig.eigenvectors;
    Ok(q * DMatrix::from_diagonal(&inv_vals) * q.transpose())
}

impl BlockExchangeableMatrix {
    /// Validates and symmetrizes `(A, B)` for `periods` blocks.
    ///
    /// `A`, `A - B` and `A + (P-1)B` must be nonsingular; for `P = 1` only `A`
    /// is checked and `B` is ignored.
    pub fn new(periods: usize, diagonal: DMatrix<f64>, off_diagonal: DMatrix<f64>) -> Result<Self> {
        if periods == 0 {
            return Err(Error::Shape("block count must be positive".into()));
        }
        if diagonal.shape() != off_diagonal.shape() {
            return Err(Error::Shape(format!(
                "A is {:?} but B is {:?}",
                diagonal.shape(),
                off_diagonal.shape()
            )));
        }
        let a = symmetrize(&diagonal)?;
        let b = symmetrize(&off_diagonal)?;
        let m = BlockExchangeableMatrix {
            periods,
            diagonal: a,
            off_diagonal: b,
        };
        m.check_factors()?;
        Ok(m)
    }

    fn check_factors(&self) -> Result<()> {
        symmetric_inverse(&self.diagonal, BlockFactor::Diagonal)?;
        if self.periods > 1 {
            symmetric_inverse(&self.within(), BlockFactor::DiagonalMinusOffDiagonal)?;
            symmetric_inverse(&self.between(), BlockFactor::DiagonalPlusOffDiagonals)?;
        }
        Ok(())
    }

    /// `T x T` identity blocks with zero off-diagonal blocks.
    pub fn identity(periods: usize, block: usize) -> Self {
        BlockExchangeableMatrix {
            periods,
            diagonal: DMatrix::identity(block, block),
            off_diagonal: DMatrix::zeros(block, block),
        }
    }

    pub fn periods(&self) -> usize {
        self.periods
    }

    pub fn block_size(&self) -> usize {
        self.diagonal.nrows()
    }

    pub fn diagonal(&self) -> &DMatrix<f64> {
        &self.diagonal
    }

    pub fn off_diagonal(&self) -> &DMatrix<f64> {
        &self.off_diagonal
    }

    /// `A - B`.
    pub fn within(&self) -> DMatrix<f64> {
        &self.diagonal - &self.off_diagonal
    }

    /// `A + (P-1)B`.
    pub fn between(&self) -> DMatrix<f64> {
        &self.diagonal + &self.off_diagonal * (self.periods as f64 - 1.0)
    }

    /// Dense `PT x PT` layout, period-major then timepoint.
    pub fn expand(&self) -> DMatrix<f64> {
        expand_blocks(self.periods, &self.diagonal, &self.off_diagonal)
    }

    /// Structured inverse; never forms the dense matrix.
    pub fn inverse(&self) -> Result<BlockInverse> {
        let t = self.block_size();
        if self.periods == 1 {
            return Ok(BlockInverse {
                periods: 1,
                diagonal: symmetric_inverse(&self.diagonal, BlockFactor::Diagonal)?,
                off_diagonal: DMatrix::zeros(t, t),
            });
        }
        let within_inv = symmetric_inverse(&self.within(), BlockFactor::DiagonalMinusOffDiagonal)?;
        let between_inv = symmetric_inverse(&self.between(), BlockFactor::DiagonalPlusOffDiagonals)?;
        let off = (&between_inv - &within_inv) / self.periods as f64;
        let diag = &within_inv + &off;
        Ok(BlockInverse {
            periods: self.periods,
            diagonal: (&diag + diag.transpose()) * 0.5,
            off_diagonal: (&off + off.transpose()) * 0.5,
        })
    }

    /// `V^{-1} rhs` for a stacked `PT` vector.
    pub fn solve(&self, rhs: &DVector<f64>) -> Result<DVector<f64>> {
        let inv = self.inverse()?;
        if rhs.len() != self.periods * self.block_size() {
            return Err(Error::Shape(format!(
                "rhs has length {}, expected {}",
                rhs.len(),
                self.periods * self.block_size()
            )));
        }
        Ok(inv.apply_vector(rhs))
    }
}

/// Computes the structured inverse of `m`.
pub fn block_inverse(m: &BlockExchangeableMatrix) -> Result<BlockInverse> {
    m.inverse()
}

/// Dense expansion of `m`.
pub fn expand(m: &BlockExchangeableMatrix) -> DMatrix<f64> {
    m.expand()
}

/// Solves `m x = rhs` through the structured inverse.
pub fn solve_block(m: &BlockExchangeableMatrix, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    m.solve(rhs)
}

fn expand_blocks(periods: usize, diag: &DMatrix<f64>, off: &DMatrix<f64>) -> DMatrix<f64> {
    let t = diag.nrows();
    let mut out = DMatrix::zeros(periods * t, periods * t);
    for p in 0..periods {
        for q in 0..periods {
            let block = if p == q { diag } else { off };
            out.view_mut((p * t, q * t), (t, t)).copy_from(block);
        }
    }
    out
}

impl BlockInverse {
    pub fn periods(&self) -> usize {
        self.periods
    }

    /// `C`.
    pub fn diagonal(&self) -> &DMatrix<f64> {
        &self.diagonal
    }

    /// `D`.
    pub fn off_diagonal(&self) -> &DMatrix<f64> {
        &self.off_diagonal
    }

    pub fn expand(&self) -> DMatrix<f64> {
        expand_blocks(self.periods, &self.diagonal, &self.off_diagonal)
    }

    /// Applies the inverse to a stacked vector.
    ///
    /// Block `p` of the result is `(C - D) r_p + D (sum_q r_q)`.
    pub fn apply_vector(&self, rhs: &DVector<f64>) -> DVector<f64> {
        let m = DMatrix::from_column_slice(rhs.len(), 1, rhs.as_slice());
        let out = self.apply_matrix(&m);
        DVector::from_column_slice(out.as_slice())
    }

    /// Applies the inverse column-wise to a `PT x k` matrix.
    pub fn apply_matrix(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        let t = self.diagonal.nrows();
        let k = rhs.ncols();
        debug_assert_eq!(rhs.nrows(), self.periods * t);
        let mut total = DMatrix::zeros(t, k);
        for p in 0..self.periods {
            total += rhs.rows(p * t, t);
        }
        let shared = &self.off_diagonal * total;
        let diff = &self.diagonal - &self.off_diagonal;
        let mut out = DMatrix::zeros(self.periods * t, k);
        for p in 0..self.periods {
            let block = &diff * rhs.rows(p * t, t) + &shared;
            out.rows_mut(p * t, t).copy_from(&block);
        }
        out
    }
}
