//! Sparse LDL' factorization of symmetric quasidefinite matrices.
//!
//! The ADMM KKT matrix `[P + sigma*I, A'; A, -diag(1/rho)]`); is symmetric
//! quasidefinite, so it admits an LDL' factorization under any symmetric
//! permutation without numerical pivoting. This module implements the
//! standard up-looking algorithm (elimination tree, then one triangular
//! solve per row) with AMD fill-reducing ordering and dynamic
//! regularization of near-zero pivots.
//!
//! The factorization object retains the permuted matrix and the symbolic
//! analysis, so numeric refactorization after value updates (step-size
//! changes between ADMM iterations) reuses the pattern.

use crate::sparse::CscMatrix;
use thiserror::Error;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum LdlError {
    #[error("matrix must be square, got {0}x{1}")]
    NotSquare(usize, usize),
    #[error("matrix must be upper triangular")]
    NotUpperTriangular,
    #[error("column {0} has no diagonal entry")]
    MissingDiagonal(usize),
    #[error("zero pivot at column {0}")]
    ZeroPivot(usize),
    #[error("AMD ordering failed")]
    OrderingFailed,
}

const UNKNOWN: usize = usize::MAX;

/// Pivot regularization thresholds; pivots with `d * sign < eps` are
/// replaced by `delta * sign`.
const REG_EPS: f64 = 1e-13;
const REG_DELTA: f64 = 2e-7;

#[derive(Debug, Clone)]
pub struct LdlFactor {
    n: usize,
    perm: Vec<usize>,
    // permuted upper-triangular matrix and the map from input nnz positions
    // to its nnz positions
    triu: CscMatrix,
    input_to_permuted: Vec<usize>,
    dsigns: Vec<i8>,
    // symbolic analysis
    etree: Vec<usize>,
    lnz: Vec<usize>,
    // numeric factor
    l_colptr: Vec<usize>,
    l_rowind: Vec<usize>,
    l_values: Vec<f64>,
    d: Vec<f64>,
    dinv: Vec<f64>,
    regularized: usize,
    work: Vec<f64>,
}

impl LdlFactor {
    /// Factors the symmetric matrix given by its upper triangle.
    ///
    /// `dsigns[i]` gives the expected sign of the i-th pivot in the
    /// original ordering (+1 primal block, -1 dual block).
    pub fn new(upper: &CscMatrix, dsigns: &[i8]) -> Result<Self, LdlError> {
        let n = upper.ncols();
        if upper.nrows() != n {
            return Err(LdlError::NotSquare(upper.nrows(), n));
        }
        if upper.triplets().any(|(r, c, _)| r > c) {
            return Err(LdlError::NotUpperTriangular);
        }
        for c in 0..n {
            let has_diag = (upper.colptr()[c]..upper.colptr()[c + 1])
                .any(|k| upper.rowind()[k] == c);
            if !has_diag {
                return Err(LdlError::MissingDiagonal(c));
            }
        }
        debug_assert_eq!(dsigns.len(), n);

        let (perm, iperm) = amd_ordering(upper)?;
        let (triu, input_to_permuted) = permute_symmetric(upper, &iperm);
        let mut permuted_signs = vec![1i8; n];
        for i in 0..n {
            permuted_signs[i] = dsigns[perm[i]];
        }

        let mut etree = vec![UNKNOWN; n];
        let mut lnz = vec![0usize; n];
        elimination_tree(&triu, &mut etree, &mut lnz);
        let total_lnz: usize = lnz.iter().sum();

        let mut factor = Self {
            n,
            perm,
            triu,
            input_to_permuted,
            dsigns: permuted_signs,
            etree,
            lnz,
            l_colptr: vec![0; n + 1],
            l_rowind: vec![0; total_lnz],
            l_values: vec![0.0; total_lnz],
            d: vec![0.0; n],
            dinv: vec![0.0; n],
            regularized: 0,
            work: vec![0.0; n],
        };
        factor.refactor()?;
        Ok(factor)
    }

    /// Recomputes the numeric factor after value updates.
    pub fn refactor(&mut self) -> Result<(), LdlError> {
        self.regularized = 0;
        factor_numeric(
            &self.triu,
            &self.etree,
            &self.lnz,
            &self.dsigns,
            &mut self.l_colptr,
            &mut self.l_rowind,
            &mut self.l_values,
            &mut self.d,
            &mut self.dinv,
            &mut self.regularized,
        )
    }

    /// Overwrites entries of the underlying matrix. `positions` index into
    /// the nnz order of the upper-triangular input passed to [`new`].
    ///
    /// [`new`]: LdlFactor::new
    pub fn update_values(&mut self, positions: &[usize], values: &[f64]) {
        debug_assert_eq!(positions.len(), values.len());
        for (&pos, &v) in positions.iter().zip(values) {
            let mapped = self.input_to_permuted[pos];
            self.triu.values_mut()[mapped] = v;
        }
    }

    /// Solves `A x = b` in place using the factors.
    pub fn solve_in_place(&mut self, b: &mut [f64]) {
        debug_assert_eq!(b.len(), self.n);
        let x = &mut self.work;
        for i in 0..self.n {
            x[i] = b[self.perm[i]];
        }
        // (L + I) x = b
        for c in 0..self.n {
            let xc = x[c];
            if xc != 0.0 {
                for k in self.l_colptr[c]..self.l_colptr[c + 1] {
                    x[self.l_rowind[k]] -= self.l_values[k] * xc;
                }
            }
        }
        for i in 0..self.n {
            x[i] *= self.dinv[i];
        }
        // (L + I)' x = b
        for c in (0..self.n).rev() {
            let mut acc = x[c];
            for k in self.l_colptr[c]..self.l_colptr[c + 1] {
                acc -= self.l_values[k] * x[self.l_rowind[k]];
            }
            x[c] = acc;
        }
        for i in 0..self.n {
            b[self.perm[i]] = x[i];
        }
    }

    /// Number of pivots that required regularization in the last factor.
    pub fn regularized_pivots(&self) -> usize {
        self.regularized
    }
}

fn amd_ordering(upper: &CscMatrix) -> Result<(Vec<usize>, Vec<usize>), LdlError> {
    let n = upper.ncols();
    if n <= 1 {
        return Ok((vec![0; n], vec![0; n]));
    }
    let control = amd::Control::default();
    let (perm, iperm, _info) = amd::order(n, upper.colptr(), upper.rowind(), &control)
        .map_err(|_| LdlError::OrderingFailed)?;
    Ok((perm, iperm))
}

/// Applies the symmetric permutation `B = P A P'` to an upper-triangular
/// matrix, keeping the result upper triangular, and records where each
/// input entry lands.
fn permute_symmetric(a: &CscMatrix, iperm: &[usize]) -> (CscMatrix, Vec<usize>) {
    let n = a.ncols();
    let nnz = a.nnz();
    let mut counts = vec![0usize; n + 1];
    for (r, c, _) in a.triplets() {
        let (pr, pc) = (iperm[r], iperm[c]);
        counts[pr.max(pc) + 1] += 1;
    }
    for c in 0..n {
        counts[c + 1] += counts[c];
    }
    let colptr = counts.clone();
    let mut next = counts;
    next.truncate(n);

    let mut rowind = vec![0usize; nnz];
    let mut values = vec![0.0; nnz];
    let mut map = vec![0usize; nnz];
    for (k, (r, c, v)) in a.triplets().enumerate() {
        let (pr, pc) = (iperm[r], iperm[c]);
        let col = pr.max(pc);
        let pos = next[col];
        rowind[pos] = pr.min(pc);
        values[pos] = v;
        map[k] = pos;
        next[col] += 1;
    }

    // sort rows within each column, carrying the inverse of the entry map
    let mut inv = vec![0usize; nnz];
    for (k, &pos) in map.iter().enumerate() {
        inv[pos] = k;
    }
    for c in 0..n {
        let lo = colptr[c];
        let hi = colptr[c + 1];
        let mut order: Vec<usize> = (lo..hi).collect();
        order.sort_by_key(|&k| rowind[k]);
        let old_rows: Vec<usize> = order.iter().map(|&k| rowind[k]).collect();
        let old_vals: Vec<f64> = order.iter().map(|&k| values[k]).collect();
        let old_inv: Vec<usize> = order.iter().map(|&k| inv[k]).collect();
        for (offset, k) in (lo..hi).enumerate() {
            rowind[k] = old_rows[offset];
            values[k] = old_vals[offset];
            map[old_inv[offset]] = k;
        }
    }

    let permuted = CscMatrix::from_parts(n, n, colptr, rowind, values);
    (permuted, map)
}

/// Computes the elimination tree and per-column factor counts for an
/// upper-triangular matrix.
fn elimination_tree(a: &CscMatrix, etree: &mut [usize], lnz: &mut [usize]) {
    let n = a.ncols();
    let mut visited = vec![0usize; n];
    etree.fill(UNKNOWN);
    lnz.fill(0);
    for j in 0..n {
        visited[j] = j + 1;
        for k in a.colptr()[j]..a.colptr()[j + 1] {
            let mut i = a.rowind()[k];
            while visited[i] != j + 1 {
                if etree[i] == UNKNOWN {
                    etree[i] = j;
                }
                lnz[i] += 1;
                visited[i] = j + 1;
                i = etree[i];
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn factor_numeric(
    a: &CscMatrix,
    etree: &[usize],
    lnz: &[usize],
    dsigns: &[i8],
    l_colptr: &mut [usize],
    l_rowind: &mut [usize],
    l_values: &mut [f64],
    d: &mut [f64],
    dinv: &mut [f64],
    regularized: &mut usize,
) -> Result<(), LdlError> {
    let n = a.ncols();
    l_colptr[0] = 0;
    for c in 0..n {
        l_colptr[c + 1] = l_colptr[c] + lnz[c];
    }
    let mut next_space: Vec<usize> = l_colptr[..n].to_vec();
    let mut y_vals = vec![0.0f64; n];
    let mut y_used = vec![false; n];
    let mut y_idx = vec![0usize; n];
    let mut path = vec![0usize; n];
    d.fill(0.0);

    for k in 0..n {
        // pattern of row k of L via the elimination tree
        let mut nnz_y = 0usize;
        for p in a.colptr()[k]..a.colptr()[k + 1] {
            let bidx = a.rowind()[p];
            if bidx == k {
                d[k] = a.values()[p];
                continue;
            }
            y_vals[bidx] = a.values()[p];
            if !y_used[bidx] {
                y_used[bidx] = true;
                path[0] = bidx;
                let mut len = 1usize;
                let mut node = etree[bidx];
                while node != UNKNOWN && node < k && !y_used[node] {
                    y_used[node] = true;
                    path[len] = node;
                    len += 1;
                    node = etree[node];
                }
                while len > 0 {
                    len -= 1;
                    y_idx[nnz_y] = path[len];
                    nnz_y += 1;
                }
            }
        }

        // sparse triangular solve along the pattern, filling row k of L
        for i in (0..nnz_y).rev() {
            let cidx = y_idx[i];
            let yc = y_vals[cidx];
            let pos = next_space[cidx];
            for j in l_colptr[cidx]..pos {
                y_vals[l_rowind[j]] -= l_values[j] * yc;
            }
            let lkj = yc * dinv[cidx];
            l_values[pos] = lkj;
            l_rowind[pos] = k;
            d[k] -= yc * lkj;
            next_space[cidx] += 1;
            y_vals[cidx] = 0.0;
            y_used[cidx] = false;
        }

        let sign = f64::from(dsigns[k]);
        if d[k] * sign < REG_EPS {
            d[k] = REG_DELTA * sign;
            *regularized += 1;
        }
        if d[k] == 0.0 {
            return Err(LdlError::ZeroPivot(k));
        }
        dinv[k] = 1.0 / d[k];
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::{DMatrix, DVector};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn upper_of(m: &DMatrix<f64>) -> CscMatrix {
        let n = m.nrows();
        let mut t = Vec::new();
        for c in 0..n {
            for r in 0..=c {
                if m[(r, c)] != 0.0 || r == c {
                    t.push((r, c, m[(r, c)]));
                }
            }
        }
        CscMatrix::from_triplets(n, n, &t).unwrap()
    }

    #[test]
    fn solves_random_quasidefinite_systems() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..20 {
            let np = 5 + trial % 7;
            let m = 3 + trial % 5;
            let n = np + m;
            let g = DMatrix::from_fn(np, np, |_, _| rng.random::<f64>() - 0.5);
            let p = &g * g.transpose() + DMatrix::identity(np, np) * 0.1;
            let a = DMatrix::from_fn(m, np, |_, _| rng.random::<f64>() - 0.5);
            let mut kkt = DMatrix::zeros(n, n);
            kkt.view_mut((0, 0), (np, np)).copy_from(&p);
            kkt.view_mut((0, np), (np, m)).copy_from(&a.transpose());
            kkt.view_mut((np, 0), (m, np)).copy_from(&a);
            for i in 0..m {
                kkt[(np + i, np + i)] = -1.0 - rng.random::<f64>();
            }

            let mut signs = vec![1i8; n];
            for s in signs.iter_mut().skip(np) {
                *s = -1;
            }
            let mut f = LdlFactor::new(&upper_of(&kkt), &signs).unwrap();
            let b = DVector::from_fn(n, |i, _| (i as f64).sin());
            let mut x = b.as_slice().to_vec();
            f.solve_in_place(&mut x);
            let xv = DVector::from_vec(x);
            let res = (&kkt * &xv - &b).amax();
            assert!(res < 1e-9, "residual {res} on trial {trial}");
        }
    }

    #[test]
    fn refactor_after_value_update() {
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let upper = upper_of(&m);
        let mut f = LdlFactor::new(&upper, &[1, 1]).unwrap();
        // entry order in `upper`: (0,0), (0,1), (1,1)
        f.update_values(&[2], &[5.0]);
        f.refactor().unwrap();
        let mut x = vec![1.0, 2.0];
        f.solve_in_place(&mut x);
        let target = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 5.0]);
        let sol = target
            .lu()
            .solve(&DVector::from_vec(vec![1.0, 2.0]))
            .unwrap();
        assert_abs_diff_eq!(x[0], sol[0], epsilon = 1e-12);
        assert_abs_diff_eq!(x[1], sol[1], epsilon = 1e-12);
    }

    #[test]
    fn missing_diagonal_is_rejected() {
        let t = vec![(0, 1, 1.0), (1, 1, 2.0)];
        let a = CscMatrix::from_triplets(2, 2, &t).unwrap();
        assert!(matches!(
            LdlFactor::new(&a, &[1, 1]),
            Err(LdlError::MissingDiagonal(0))
        ));
    }
}
