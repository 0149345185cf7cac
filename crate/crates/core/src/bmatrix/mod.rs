//! The correction matrix `B` used by the improved variance estimator:
//! a symmetric PSD matrix with diagonal `M_w^2`, zero row sums and rank
//! `W - 1`.
//!
//! Constructions assume whole-plot sizes sorted ascending; public entry
//! points sort internally and permute the result back to the caller's
//! whole-plot order.

mod construct;
mod eigen;
mod minimax;

pub use construct::{
    assemble_b, b_balanced, b_naive, b_three, constructive_sign_vector, exists_b,
    find_sign_vectors, lambda_lower_bound, solve_a_segment, steps_b, ASegment,
    EXHAUSTIVE_SIGN_LIMIT,
};
pub use eigen::{eigen_sym, eigen_sym_vectors, SymEigen, SYMMETRY_TOLERANCE};
pub use minimax::{minimax_b, minimize_on_segment};

use crate::error::{Error, Result};

/// How a [`BMatrix`] was obtained.
#[derive(Debug, Clone, PartialEq)]
pub enum Provenance {
    Balanced,
    ThreePlot,
    NaiveExtension,
    /// Sign vector `x` refers to the whole-plot sizes sorted ascending, with
    /// the largest size excluded. `exhaustive` records whether every sign
    /// vector was searched.
    Constructed {
        x: Vec<i8>,
        a1: f64,
        a2: f64,
        exhaustive: bool,
    },
    Explicit,
}

impl Provenance {
    pub fn name(&self) -> &'static str {
        match self {
            Provenance::Balanced => "balanced",
            Provenance::ThreePlot => "three_plot",
            Provenance::NaiveExtension => "naive_extension",
            Provenance::Constructed { .. } => "constructed",
            Provenance::Explicit => "explicit",
        }
    }
}

/// Symmetric `W x W` matrix stored as its packed upper triangle, together
/// with its spectrum.
#[derive(Debug, Clone, PartialEq)]
pub struct BMatrix {
    dim: usize,
    upper: Vec<f64>,
    provenance: Provenance,
    eigenvalues: Vec<f64>,
}

impl BMatrix {
    /// Builds from a dense matrix, rejecting asymmetric input.
    pub fn from_dense(rows: &[Vec<f64>], provenance: Provenance) -> Result<Self> {
        let eigenvalues = eigen_sym(rows)?;
        let dim = rows.len();
        let mut upper = Vec::with_capacity(dim * (dim + 1) / 2);
        for (i, row) in rows.iter().enumerate() {
            upper.extend_from_slice(&row[i..]);
        }
        Ok(BMatrix {
            dim,
            upper,
            provenance,
            eigenvalues,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (i, j) = if i <= j { (i, j) } else { (j, i) };
        let row_start = i * self.dim - (i * i - i) / 2;
        self.upper[row_start + (j - i)]
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        (0..self.dim)
            .map(|i| (0..self.dim).map(|j| self.get(i, j)).collect())
            .collect()
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    /// Eigenvalues, ascending.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn lambda_max(&self) -> f64 {
        *self.eigenvalues.last().expect("non-empty matrix")
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self.get(i, i)).sum()
    }

    pub fn quadratic_form(&self, v: &[f64]) -> f64 {
        let mut terms = Vec::with_capacity(self.dim * self.dim);
        for i in 0..self.dim {
            for j in 0..self.dim {
                terms.push(self.get(i, j) * v[i] * v[j]);
            }
        }
        crate::numeric::compensated_sum(terms)
    }

    /// Reorders rows and columns: entry `(i, j)` of the result is entry
    /// `(perm[i], perm[j])` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: perm.len(),
            });
        }
        let rows: Vec<Vec<f64>> = perm
            .iter()
            .map(|&pi| perm.iter().map(|&pj| self.get(pi, pj)).collect())
            .collect();
        let mut out = Self::from_dense(&rows, self.provenance.clone())?;
        // a permutation leaves the spectrum unchanged
        out.eigenvalues = self.eigenvalues.clone();
        Ok(out)
    }
}

/// Outcome of checking the three conditions on `B`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionReport {
    /// Diagonal equals `M_w^2`.
    pub diagonal: bool,
    /// Every row sums to zero.
    pub row_sums: bool,
    pub psd: bool,
    /// Exactly one eigenvalue is zero.
    pub rank_w_minus_1: bool,
    /// `B e = 0` for the all-ones vector.
    pub kernel_contains_ones: bool,
    pub max_diagonal_error: f64,
    pub max_abs_row_sum: f64,
    pub min_eigenvalue: f64,
    pub second_smallest_eigenvalue: f64,
    pub rank: usize,
}

impl ConditionReport {
    pub fn all_pass(&self) -> bool {
        self.diagonal
            && self.row_sums
            && self.psd
            && self.rank_w_minus_1
            && self.kernel_contains_ones
    }
}

/// Checks diagonal, zero row sums, positive semidefiniteness and rank
/// `W - 1` with tolerances relative to `max M^2` and `trace(B)`.
pub fn verify_c1_c2_c3(b: &BMatrix, sizes: &[usize]) -> Result<ConditionReport> {
    let w = b.dim();
    if sizes.len() != w {
        return Err(Error::DimensionMismatch {
            expected: w,
            got: sizes.len(),
        });
    }
    let max_sq = sizes.iter().map(|&m| (m * m) as f64).fold(0.0, f64::max);
    let trace = b.trace().abs();
    let max_diagonal_error = (0..w)
        .map(|i| (b.get(i, i) - (sizes[i] * sizes[i]) as f64).abs())
        .fold(0.0, f64::max);
    let row_sums: Vec<f64> = (0..w)
        .map(|i| crate::numeric::compensated_sum((0..w).map(|j| b.get(i, j))))
        .collect();
    let max_abs_row_sum = row_sums.iter().fold(0.0_f64, |m, r| m.max(r.abs()));
    let be_norm = row_sums.iter().map(|r| r * r).sum::<f64>().sqrt();

    let ev = b.eigenvalues();
    let min_eigenvalue = ev[0];
    let second_smallest_eigenvalue = ev.get(1).copied().unwrap_or(f64::NAN);
    let nonzero = 1e-8 * trace;
    let rank = ev.iter().filter(|&&l| l.abs() > nonzero).count();

    Ok(ConditionReport {
        diagonal: max_diagonal_error <= 1e-9 * max_sq,
        row_sums: max_abs_row_sum <= 1e-9 * max_sq,
        psd: min_eigenvalue >= -1e-9 * trace,
        rank_w_minus_1: min_eigenvalue.abs() <= 1e-9 * trace
            && second_smallest_eigenvalue > nonzero,
        kernel_contains_ones: be_norm <= 1e-9 * trace,
        max_diagonal_error,
        max_abs_row_sum,
        min_eigenvalue,
        second_smallest_eigenvalue,
        rank,
    })
}
