//! Dense and sparse numerical kernels shared by the mesh and control layers.
//!
//! The centerpiece is a column-pivoted Householder QR used to extract
//! orthonormal null-space bases of constraint matrices. nalgebra's SVD and
//! QR return thin factors only, and the null space of a wide matrix lives in
//! the *full* orthogonal factor, so the kernel is written here from scratch:
//! it factors `A^T` with column pivoting, reads the numerical rank off the
//! diagonal of `R`, and materializes exactly the trailing columns of `Q`
//! that span `null(A)`.
//!
//! Rank is decided by the standard pivoted-QR criterion
//! `|R_kk| > tol * |R_11|`, the QR analog of counting singular values above
//! `tol * sigma_max`. The automatic default tolerance is
//! `max(rows, cols) * machine_epsilon`, and tests cross-check ranks against
//! dense singular values on small systems.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

/// Columns narrower than this skip the rayon scatter (threading overhead
/// dominates below it).
const PAR_MIN_CELLS: usize = 64 * 1024;

/// Orthonormal null-space basis of a constraint matrix, with the rank
/// decision that produced it.
pub struct NullSpace {
    /// Numerical rank of the input matrix.
    pub rank: usize,
    /// `cols x (cols - rank)` matrix with orthonormal columns spanning the
    /// kernel of the input.
    pub basis: DMatrix<f64>,
    /// `|R_kk|` magnitudes from the pivoted QR, non-increasing; useful for
    /// diagnosing near-rank-deficiency.
    pub r_diag: Vec<f64>,
    /// The relative tolerance the rank decision used.
    pub rel_tol: f64,
}

/// Column-pivoted Householder QR of `A^T`, the shared factorization behind
/// [`null_space`] (trailing columns of `Q` span the kernel) and
/// [`least_norm_solve`] (leading columns give the minimum-norm solution).
struct TransposedQr {
    /// `n x m` factored storage: `R` on and above the diagonal, reflector
    /// tails below (each normalized to an implicit leading 1).
    mt: DMatrix<f64>,
    /// Householder scalars, one per completed reflector.
    betas: Vec<f64>,
    /// Column permutation of `A^T` (i.e. row permutation of `A`).
    perm: Vec<usize>,
    rank: usize,
    r_diag: Vec<f64>,
    rel_tol: f64,
}

/// Factors `a^T` with column pivoting. `rel_tol` is relative to the largest
/// diagonal of `R` (equivalently, to the scale of the largest singular
/// value); `None` selects the automatic default `max(rows, cols) * eps`.
fn transposed_qr(a: &DMatrix<f64>, rel_tol: Option<f64>) -> TransposedQr {
    let n = a.ncols(); // variables
    let m = a.nrows(); // constraints
    let rel_tol =
        rel_tol.unwrap_or_else(|| n.max(m).max(1) as f64 * f64::EPSILON);

    if m == 0 || n == 0 {
        return TransposedQr {
            mt: DMatrix::zeros(n, m),
            betas: Vec::new(),
            perm: (0..m).collect(),
            rank: 0,
            r_diag: Vec::new(),
            rel_tol,
        };
    }

    // Factor M = a^T (n x m), column-major storage.
    let mut mt = a.transpose();
    let data = mt.as_mut_slice();
    let kmax = n.min(m);

    // Householder scalars; reflector vectors live below the diagonal of M.
    let mut betas = vec![0.0f64; kmax];
    // Column permutation (of M's columns, i.e. of a's rows) and running
    // squared column norms with originals for the downdating safeguard.
    let mut perm: Vec<usize> = (0..m).collect();
    let mut cnorm2: Vec<f64> = (0..m)
        .map(|j| data[j * n..j * n + n].iter().map(|x| x * x).sum())
        .collect();
    let orig2 = cnorm2.clone();

    let mut r_diag: Vec<f64> = Vec::with_capacity(kmax);
    let mut rank = kmax;

    for k in 0..kmax {
        // Pivot: remaining column with the largest norm.
        let (piv, _) = cnorm2[k..]
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| {
                if v > acc.1 {
                    (i, v)
                } else {
                    acc
                }
            });
        let piv = k + piv;
        if piv != k {
            perm.swap(k, piv);
            cnorm2.swap(k, piv);
            data_swap_columns(data, n, k, piv);
        }

        // Householder vector from column k, rows k..n.
        let col = &mut data[k * n + k..k * n + n];
        let alpha = {
            let nrm: f64 = col.iter().map(|x| x * x).sum::<f64>().sqrt();
            if col[0] >= 0.0 {
                -nrm
            } else {
                nrm
            }
        };
        r_diag.push(alpha.abs());

        // Rank cutoff: once the pivot column is negligible relative to the
        // first, everything remaining is too (pivoting keeps norms
        // non-increasing).
        if alpha.abs() <= rel_tol * r_diag[0] {
            rank = k;
            r_diag.truncate(k);
            break;
        }

        let v0 = col[0] - alpha;
        let beta = -v0 / alpha; // = v0^2-normalized scalar for v normalized to v[0] = 1
        col[0] = alpha; // R_kk; reflector tail stays below in col[1..]
        for x in col[1..].iter_mut() {
            *x /= v0;
        }
        betas[k] = beta;

        // Apply H_k = I - beta * v v^T to trailing columns k+1..m and
        // downdate their norms.
        let (vcol, rest) = data.split_at_mut((k + 1) * n);
        let v = &vcol[k * n + k..k * n + n]; // v[0] is R_kk; implicit v[0] = 1
        let trailing_cols = m - (k + 1);
        let apply = |(jj, colj): (usize, &mut [f64])| {
            let _ = jj;
            let cj = &mut colj[k..];
            let mut w = cj[0];
            for i in 1..v.len() {
                w += v[i] * cj[i];
            }
            w *= beta;
            cj[0] -= w;
            for i in 1..v.len() {
                cj[i] -= w * v[i];
            }
        };
        if trailing_cols * (n - k) >= PAR_MIN_CELLS {
            rest.par_chunks_mut(n).enumerate().for_each(apply);
        } else {
            rest.chunks_mut(n).enumerate().for_each(apply);
        }

        // Norm downdates with recompute safeguard against cancellation.
        for j in k + 1..m {
            let rkj = data[j * n + k];
            let updated = cnorm2[j] - rkj * rkj;
            cnorm2[j] = if updated <= 1e-14 * orig2[perm[j]].max(f64::MIN_POSITIVE) {
                data[j * n + k + 1..j * n + n]
                    .iter()
                    .map(|x| x * x)
                    .sum()
            } else {
                updated
            };
        }
    }

    TransposedQr {
        mt,
        betas,
        perm,
        rank,
        r_diag,
        rel_tol,
    }
}

/// Computes an orthonormal basis of `null(a)` for a dense `a` (rows =
/// constraints, cols = variables) via column-pivoted Householder QR of
/// `a^T`.
///
/// `rel_tol` is relative to the largest diagonal of `R` (equivalently, to
/// the scale of the largest singular value); `None` selects the automatic
/// default `max(rows, cols) * eps`.
pub fn null_space(a: &DMatrix<f64>, rel_tol: Option<f64>) -> NullSpace {
    let n = a.ncols();
    let fac = transposed_qr(a, rel_tol);
    if a.nrows() == 0 || n == 0 {
        return NullSpace {
            rank: 0,
            basis: DMatrix::identity(n, n),
            r_diag: Vec::new(),
            rel_tol: fac.rel_tol,
        };
    }
    let rank = fac.rank;
    let data = fac.mt.as_slice();
    let betas = &fac.betas;

    // Null basis: columns rank..n of Q = H_0 H_1 ... H_{kmax-1}. Compute
    // Q e_j by applying the reflectors in reverse; each touches rows k..n
    // only, so e_j with j >= rank is affected by reflectors k <= j alone.
    let null_dim = n - rank;
    let mut basis = DMatrix::<f64>::zeros(n, null_dim);
    let produce = |(jj, out): (usize, &mut [f64])| {
        out[rank + jj] = 1.0;
        for k in (0..rank).rev() {
            let v = &data[k * n + k..k * n + n];
            let x = &mut out[k..];
            let mut w = x[0];
            for i in 1..v.len() {
                w += v[i] * x[i];
            }
            w *= betas[k];
            x[0] -= w;
            for i in 1..v.len() {
                x[i] -= w * v[i];
            }
        }
    };
    if null_dim * n >= PAR_MIN_CELLS {
        basis
            .as_mut_slice()
            .par_chunks_mut(n)
            .enumerate()
            .for_each(produce);
    } else {
        basis
            .as_mut_slice()
            .chunks_mut(n)
            .enumerate()
            .for_each(produce);
    }

    NullSpace {
        rank,
        basis,
        r_diag: fac.r_diag,
        rel_tol: fac.rel_tol,
    }
}

/// Minimum-norm solution of `a x = b` for a full-row-rank `a` (rows =
/// equations, cols >= rows), via the same column-pivoted QR of `a^T` that
/// [`null_space`] uses: with `a^T P = Q R`, the solution is
/// `x = Q_1 R_1^{-T} P^T b`.
///
/// When `a` is numerically rank-deficient, the pivoted factorization keeps
/// the dominant `rank` equations and drops the (redundant or inconsistent)
/// rest, which is the behavior Gauss-Newton steps want. Direct and
/// deterministic where iterative normal-equation solvers lose accuracy to
/// the squared condition number.
pub fn least_norm_solve(a: &DMatrix<f64>, b: &DVector<f64>, rel_tol: Option<f64>) -> DVector<f64> {
    assert_eq!(a.nrows(), b.len(), "dimension mismatch");
    let n = a.ncols();
    let fac = transposed_qr(a, rel_tol);
    let rank = fac.rank;
    let data = fac.mt.as_slice();

    // Forward substitution on R_1^T y = (P^T b)_1. R's entry (i, j), i <= j,
    // lives at data[i * n + j]... careful: storage is column-major with
    // columns of M = a^T, so R(i, j) = data[j * n + i] for i <= j < m.
    let mut y = DVector::<f64>::zeros(n);
    for i in 0..rank {
        let mut acc = b[fac.perm[i]];
        for j in 0..i {
            acc -= data[i * n + j] * y[j];
        }
        y[i] = acc / data[i * n + i];
    }

    // x = Q [y_1; 0]: apply reflectors in reverse.
    for k in (0..rank).rev() {
        let v = &data[k * n + k..k * n + n];
        let x = &mut y.as_mut_slice()[k..];
        let mut w = x[0];
        for i in 1..v.len() {
            w += v[i] * x[i];
        }
        w *= fac.betas[k];
        x[0] -= w;
        for i in 1..v.len() {
            x[i] -= w * v[i];
        }
    }
    y
}

fn data_swap_columns(data: &mut [f64], n: usize, a: usize, b: usize) {
    let (lo, hi) = (a.min(b), a.max(b));
    let (left, right) = data.split_at_mut(hi * n);
    left[lo * n..lo * n + n].swap_with_slice(&mut right[..n]);
}

/// Orthonormalizes the columns of `a` in place (modified Gram-Schmidt with a
/// second pass). Columns must be linearly independent; returns `false` when
/// a column collapses below `1e-12` of its original norm instead.
pub fn orthonormalize_columns(a: &mut DMatrix<f64>) -> bool {
    let k = a.ncols();
    for j in 0..k {
        let orig = a.column(j).norm();
        // Orthogonalize twice against the already-final columns; the second
        // pass removes the components rounding left behind.
        for _ in 0..2 {
            for i in 0..j {
                let qi = a.column(i).clone_owned();
                let r = qi.dot(&a.column(j));
                a.column_mut(j).axpy(-r, &qi, 1.0);
            }
        }
        let nrm = a.column(j).norm();
        if nrm < 1e-12 * orig.max(f64::MIN_POSITIVE) {
            return false;
        }
        a.column_mut(j).scale_mut(1.0 / nrm);
    }
    true
}

/// Conjugate gradients for a symmetric positive (semi-)definite operator.
///
/// Stops when the residual norm falls below `tol * max(||b||, tiny)` or at
/// `max_iter`; returns the final iterate either way. For consistent
/// semi-definite systems (right-hand side in the range) CG converges to a
/// solution; the caller is responsible for regularizing inconsistent ones.
pub fn cg_solve<F>(apply: F, b: &DVector<f64>, tol: f64, max_iter: usize) -> DVector<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let mut x = DVector::zeros(b.len());
    let mut r = b.clone();
    let mut p = r.clone();
    let mut rs = r.dot(&r);
    let threshold = tol * b.norm().max(f64::MIN_POSITIVE);
    let threshold2 = threshold * threshold;
    for _ in 0..max_iter {
        if rs <= threshold2 {
            break;
        }
        let ap = apply(&p);
        let denom = p.dot(&ap);
        if denom <= 0.0 {
            break; // numerically lost positive-definiteness along p
        }
        let alpha = rs / denom;
        x.axpy(alpha, &p, 1.0);
        r.axpy(-alpha, &ap, 1.0);
        let rs_new = r.dot(&r);
        p = &r + &p * (rs_new / rs);
        rs = rs_new;
    }
    x
}

/// Minimal compressed-sparse-row matrix: just the products the crate needs
/// (`A x`, `A^T x`) plus dense export for tests and small systems.
#[derive(Debug, Clone)]
pub struct CsrMatrix {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    vals: Vec<f64>,
}

impl CsrMatrix {
    /// Builds from (row, col, value) triplets; duplicate entries are summed.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut per_row: Vec<Vec<(usize, f64)>> = vec![Vec::new(); nrows];
        for &(r, c, v) in triplets {
            assert!(r < nrows && c < ncols, "triplet out of bounds");
            per_row[r].push((c, v));
        }
        let mut row_ptr = Vec::with_capacity(nrows + 1);
        let mut col_idx = Vec::new();
        let mut vals = Vec::new();
        row_ptr.push(0);
        for row in &mut per_row {
            row.sort_by_key(|&(c, _)| c);
            let mut i = 0;
            while i < row.len() {
                let c = row[i].0;
                let mut v = row[i].1;
                let mut j = i + 1;
                while j < row.len() && row[j].0 == c {
                    v += row[j].1;
                    j += 1;
                }
                col_idx.push(c);
                vals.push(v);
                i = j;
            }
            row_ptr.push(col_idx.len());
        }
        Self {
            nrows,
            ncols,
            row_ptr,
            col_idx,
            vals,
        }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        assert_eq!(x.len(), self.ncols);
        let mut y = DVector::zeros(self.nrows);
        for r in 0..self.nrows {
            let mut acc = 0.0;
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.vals[k] * x[self.col_idx[k]];
            }
            y[r] = acc;
        }
        y
    }

    pub fn tr_mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        assert_eq!(x.len(), self.nrows);
        let mut y = DVector::zeros(self.ncols);
        for r in 0..self.nrows {
            let xr = x[r];
            if xr == 0.0 {
                continue;
            }
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                y[self.col_idx[k]] += self.vals[k] * xr;
            }
        }
        y
    }

    /// Dense product `self * m` (used to map null-space bases through
    /// sparse selectors).
    pub fn mul_dense(&self, m: &DMatrix<f64>) -> DMatrix<f64> {
        assert_eq!(m.nrows(), self.ncols);
        let mut out = DMatrix::zeros(self.nrows, m.ncols());
        for r in 0..self.nrows {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                let (c, v) = (self.col_idx[k], self.vals[k]);
                for j in 0..m.ncols() {
                    out[(r, j)] += v * m[(c, j)];
                }
            }
        }
        out
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(self.nrows, self.ncols);
        for r in 0..self.nrows {
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                d[(r, self.col_idx[k])] += self.vals[k];
            }
        }
        d
    }

    /// Max absolute entry of `self * x`, without allocating the result.
    pub fn mul_vec_inf_norm(&self, x: &DVector<f64>) -> f64 {
        let mut worst = 0.0f64;
        for r in 0..self.nrows {
            let mut acc = 0.0;
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.vals[k] * x[self.col_idx[k]];
            }
            worst = worst.max(acc.abs());
        }
        worst
    }
}
