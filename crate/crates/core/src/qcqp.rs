//! Parameterized homogenized QCQPs:
//!
//! ```text
//! min  xᵀ Q x   s.t.  xᵀ A_i x = 0  (i = 1..m),   xᵀ A_0 x = 1,
//! ```
//!
//! with `A_0 = e_h e_hᵀ` added automatically. Multiplier vectors are ordered
//! `(λ_1, …, λ_m, λ_0)` everywhere in this crate, matching the row order of
//! [`HomQcqp::constraint_gradients`].

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::scalar::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QcqpError {
    #[error("dimension mismatch: expected {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("entry ({row}, {col}) is outside a {dim}x{dim} matrix")]
    EntryOutOfBounds { row: usize, col: usize, dim: usize },
    #[error("matrix is not symmetric")]
    NotSymmetric,
    #[error("constraint {0} duplicates the homogenizing constraint, which is added automatically")]
    DuplicateHomogenizing(usize),
    #[error("homogenizing index {index} is out of range for dimension {dim}")]
    BadHomogIndex { index: usize, dim: usize },
}

pub type Triplet<T> = (usize, usize, T);

/// Sparse symmetric matrix stored as upper-triangle triplets, optionally with
/// the directions in which it moves per unit change of each parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSymMatrix<T: Real> {
    dim: usize,
    entries: Vec<Triplet<T>>,
    sensitivity: Vec<Vec<Triplet<T>>>,
}

fn normalize_triplets<T: Real>(dim: usize, raw: &[Triplet<T>]) -> Result<Vec<Triplet<T>>, QcqpError> {
    let mut out: Vec<Triplet<T>> = Vec::with_capacity(raw.len());
    for &(r, c, v) in raw {
        if r >= dim || c >= dim {
            return Err(QcqpError::EntryOutOfBounds { row: r, col: c, dim });
        }
        let (r, c) = if r <= c { (r, c) } else { (c, r) };
        out.push((r, c, v));
    }
    out.sort_by_key(|&(r, c, _)| (r, c));
    let mut merged: Vec<Triplet<T>> = Vec::with_capacity(out.len());
    for (r, c, v) in out {
        match merged.last_mut() {
            Some(last) if last.0 == r && last.1 == c => last.2 += v,
            _ => merged.push((r, c, v)),
        }
    }
    Ok(merged)
}

fn triplets_to_dense<T: Real>(dim: usize, entries: &[Triplet<T>]) -> DMatrix<T> {
    let mut m = DMatrix::zeros(dim, dim);
    for &(r, c, v) in entries {
        m[(r, c)] = v;
        m[(c, r)] = v;
    }
    m
}

impl<T: Real> ParamSymMatrix<T> {
    /// Builds from triplets. Lower-triangle entries are mirrored to the upper
    /// triangle and repeated positions are summed.
    pub fn new(dim: usize, triplets: &[Triplet<T>]) -> Result<Self, QcqpError> {
        Ok(Self { dim, entries: normalize_triplets(dim, triplets)?, sensitivity: Vec::new() })
    }

    pub fn zeros(dim: usize) -> Self {
        Self { dim, entries: Vec::new(), sensitivity: Vec::new() }
    }

    /// Reads the upper triangle of an exactly symmetric dense matrix, skipping zeros.
    pub fn from_dense(m: &DMatrix<T>) -> Result<Self, QcqpError> {
        if !m.is_square() {
            return Err(QcqpError::DimensionMismatch { expected: m.nrows(), found: m.ncols() });
        }
        let n = m.nrows();
        let mut entries = Vec::new();
        for r in 0..n {
            for c in r..n {
                if m[(r, c)] != m[(c, r)] {
                    return Err(QcqpError::NotSymmetric);
                }
                if m[(r, c)] != T::zero() {
                    entries.push((r, c, m[(r, c)]));
                }
            }
        }
        Ok(Self { dim: n, entries, sensitivity: Vec::new() })
    }

    /// Attaches per-parameter perturbation directions `∂S/∂θ_k`.
    pub fn with_sensitivity(mut self, per_param: Vec<Vec<Triplet<T>>>) -> Result<Self, QcqpError> {
        self.sensitivity = per_param.iter().map(|t| normalize_triplets(self.dim, t)).collect::<Result<_, _>>()?;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Upper-triangle triplets, sorted row-major.
    pub fn entries(&self) -> &[Triplet<T>] {
        &self.entries
    }

    pub fn n_params(&self) -> usize {
        self.sensitivity.len()
    }

    pub fn sensitivity(&self) -> &[Vec<Triplet<T>>] {
        &self.sensitivity
    }

    pub fn sensitivity_dense(&self, k: usize) -> DMatrix<T> {
        triplets_to_dense(self.dim, &self.sensitivity[k])
    }

    pub fn to_dense(&self) -> DMatrix<T> {
        triplets_to_dense(self.dim, &self.entries)
    }

    /// Number of structurally nonzero entries (upper triangle).
    pub fn nnz(&self) -> usize {
        self.entries.iter().filter(|e| e.2 != T::zero()).count()
    }

    /// `Σ_k ∂ℓ/∂θ_k` contributions given the gradient with respect to the full matrix.
    pub fn chain_gradient(&self, grad: &DMatrix<T>) -> DVector<T> {
        DVector::from_iterator(
            self.sensitivity.len(),
            self.sensitivity.iter().map(|dir| {
                dir.iter().fold(T::zero(), |acc, &(r, c, v)| {
                    if r == c {
                        acc + grad[(r, c)] * v
                    } else {
                        acc + (grad[(r, c)] + grad[(c, r)]) * v
                    }
                })
            }),
        )
    }

    fn is_homogenizing(&self, h: usize) -> bool {
        let nz: Vec<_> = self.entries.iter().filter(|e| e.2 != T::zero()).collect();
        nz.len() == 1 && nz[0].0 == h && nz[0].1 == h
    }
}

/// A homogenized QCQP. Immutable once built.
#[derive(Debug, Clone)]
pub struct HomQcqp<T: Real> {
    n: usize,
    homog_index: usize,
    cost: ParamSymMatrix<T>,
    constraints: Vec<ParamSymMatrix<T>>,
    redundant: Vec<bool>,
    homog: ParamSymMatrix<T>,
    cost_dense: DMatrix<T>,
    constraints_dense: Vec<DMatrix<T>>,
    homog_dense: DMatrix<T>,
}

/// Builds a [`HomQcqp`], appending `A_0 = e_h e_hᵀ`.
pub fn build_hom_qcqp<T: Real>(
    cost: ParamSymMatrix<T>,
    constraints: Vec<ParamSymMatrix<T>>,
    homog_index: usize,
) -> Result<HomQcqp<T>, QcqpError> {
    let n = cost.dim();
    if homog_index >= n {
        return Err(QcqpError::BadHomogIndex { index: homog_index, dim: n });
    }
    for (i, a) in constraints.iter().enumerate() {
        if a.dim() != n {
            return Err(QcqpError::DimensionMismatch { expected: n, found: a.dim() });
        }
        if a.is_homogenizing(homog_index) {
            return Err(QcqpError::DuplicateHomogenizing(i));
        }
    }
    let homog = ParamSymMatrix::new(n, &[(homog_index, homog_index, T::one())])?;
    let redundant = vec![false; constraints.len()];
    Ok(HomQcqp {
        n,
        homog_index,
        cost_dense: cost.to_dense(),
        constraints_dense: constraints.iter().map(ParamSymMatrix::to_dense).collect(),
        homog_dense: homog.to_dense(),
        cost,
        constraints,
        redundant,
        homog,
    })
}

impl<T: Real> HomQcqp<T> {
    /// Marks which constraints are redundant for the QCQP (informational).
    pub fn with_redundant_flags(mut self, flags: Vec<bool>) -> Result<Self, QcqpError> {
        if flags.len() != self.constraints.len() {
            return Err(QcqpError::DimensionMismatch { expected: self.constraints.len(), found: flags.len() });
        }
        self.redundant = flags;
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of user constraints (excluding the homogenizing one).
    pub fn m(&self) -> usize {
        self.constraints.len()
    }

    pub fn homog_index(&self) -> usize {
        self.homog_index
    }

    pub fn cost(&self) -> &ParamSymMatrix<T> {
        &self.cost
    }

    pub fn constraints(&self) -> &[ParamSymMatrix<T>] {
        &self.constraints
    }

    pub fn redundant_flags(&self) -> &[bool] {
        &self.redundant
    }

    pub fn homog_constraint(&self) -> &ParamSymMatrix<T> {
        &self.homog
    }

    pub fn q(&self) -> &DMatrix<T> {
        &self.cost_dense
    }

    pub fn a(&self, i: usize) -> &DMatrix<T> {
        &self.constraints_dense[i]
    }

    pub fn a_all(&self) -> &[DMatrix<T>] {
        &self.constraints_dense
    }

    pub fn a0(&self) -> &DMatrix<T> {
        &self.homog_dense
    }

    fn check_len(&self, len: usize, expected: usize) -> Result<(), QcqpError> {
        if len != expected {
            Err(QcqpError::DimensionMismatch { expected, found: len })
        } else {
            Ok(())
        }
    }

    /// Objective `xᵀQx` and residuals `(xᵀA_1x, …, xᵀA_mx, xᵀA_0x − 1)`.
    pub fn eval_objective_and_residuals(&self, x: &DVector<T>) -> Result<(T, DVector<T>), QcqpError> {
        self.check_len(x.len(), self.n)?;
        let quad = |a: &DMatrix<T>| x.dot(&(a * x));
        let mut res = DVector::zeros(self.m() + 1);
        for (i, a) in self.constraints_dense.iter().enumerate() {
            res[i] = quad(a);
        }
        res[self.m()] = quad(&self.homog_dense) - T::one();
        Ok((quad(&self.cost_dense), res))
    }

    /// `G` with rows `(A_i x)ᵀ` followed by `(A_0 x)ᵀ`. The factor 2 of the true
    /// constraint gradient is carried by the KKT matrix, not here.
    pub fn constraint_gradients(&self, x: &DVector<T>) -> Result<DMatrix<T>, QcqpError> {
        self.check_len(x.len(), self.n)?;
        let m = self.m();
        let mut g = DMatrix::zeros(m + 1, self.n);
        for (i, a) in self.constraints_dense.iter().enumerate() {
            g.set_row(i, &(a * x).transpose());
        }
        g.set_row(m, &(&self.homog_dense * x).transpose());
        Ok(g)
    }

    /// `H = Q + Σ λ_i A_i + λ_0 A_0` with `λ = (λ_1, …, λ_m, λ_0)`.
    pub fn certificate_matrix(&self, lambda: &DVector<T>) -> Result<DMatrix<T>, QcqpError> {
        self.check_len(lambda.len(), self.m() + 1)?;
        let mut h = self.cost_dense.clone();
        for (i, a) in self.constraints_dense.iter().enumerate() {
            h += a * lambda[i];
        }
        h += &self.homog_dense * lambda[self.m()];
        Ok(h)
    }

    /// Copy with a different cost.
    pub fn with_cost(&self, cost: ParamSymMatrix<T>) -> Result<Self, QcqpError> {
        let flags = self.redundant.clone();
        build_hom_qcqp(cost, self.constraints.clone(), self.homog_index)?.with_redundant_flags(flags)
    }

    /// Copy with extra constraints appended (flagged redundant).
    pub fn with_extra_constraints(&self, extra: Vec<ParamSymMatrix<T>>) -> Result<Self, QcqpError> {
        let mut flags = self.redundant.clone();
        flags.extend(std::iter::repeat_n(true, extra.len()));
        let mut all = self.constraints.clone();
        all.extend(extra);
        build_hom_qcqp(self.cost.clone(), all, self.homog_index)?.with_redundant_flags(flags)
    }

    /// Copy keeping only the listed constraints.
    pub fn with_constraint_subset(&self, keep: &[usize]) -> Result<Self, QcqpError> {
        let cons = keep.iter().map(|&i| self.constraints[i].clone()).collect();
        let flags = keep.iter().map(|&i| self.redundant[i]).collect();
        build_hom_qcqp(self.cost.clone(), cons, self.homog_index)?.with_redundant_flags(flags)
    }

    /// `ν = [vec(Q); vec(A_1); …; vec(A_m)]`, column-major.
    pub fn vectorize(&self) -> VectorizedParams<T> {
        VectorizedParams::from_matrices(&self.cost_dense, &self.constraints_dense)
    }
}

/// Concatenated full column-major vectorization of the cost and constraint matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorizedParams<T: Real> {
    n: usize,
    m: usize,
    data: DVector<T>,
}

impl<T: Real> VectorizedParams<T> {
    pub fn from_matrices(q: &DMatrix<T>, a: &[DMatrix<T>]) -> Self {
        let n = q.nrows();
        let nn = n * n;
        let mut data = DVector::zeros((a.len() + 1) * nn);
        data.rows_mut(0, nn).copy_from_slice(q.as_slice());
        for (i, ai) in a.iter().enumerate() {
            data.rows_mut((i + 1) * nn, nn).copy_from_slice(ai.as_slice());
        }
        Self { n, m: a.len(), data }
    }

    pub fn from_vec(n: usize, m: usize, data: DVector<T>) -> Result<Self, QcqpError> {
        let expected = (m + 1) * n * n;
        if data.len() != expected {
            return Err(QcqpError::DimensionMismatch { expected, found: data.len() });
        }
        Ok(Self { n, m, data })
    }

    pub fn as_vector(&self) -> &DVector<T> {
        &self.data
    }

    /// Block `k` as a matrix: `k = 0` is the cost, `k = i` is `A_i`.
    pub fn block(&self, k: usize) -> DMatrix<T> {
        let nn = self.n * self.n;
        DMatrix::from_column_slice(self.n, self.n, &self.data.as_slice()[k * nn..(k + 1) * nn])
    }

    pub fn to_matrices(&self) -> (DMatrix<T>, Vec<DMatrix<T>>) {
        (self.block(0), (1..=self.m).map(|k| self.block(k)).collect())
    }
}
