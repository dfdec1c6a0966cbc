//! Sparse LDLᵀ factorization for quasi-definite matrices.
//!
//! Follows the up-looking elimination-tree algorithm of QDLDL. No numerical
//! pivoting is done: the caller supplies the expected sign of every pivot and
//! pivots that come out too small (or with the wrong sign) are replaced by a
//! signed regularization value.

use crate::sparse::CscMatrix;

const NONE: usize = usize::MAX;

/// Symbolic analysis of an upper-triangular CSC pattern under a fill-reducing
/// permutation.
#[derive(Debug, Clone)]
pub struct LdlSymbolic {
    n: usize,
    /// `perm[k]` is the original index eliminated at step `k`.
    perm: Vec<usize>,
    /// Upper triangle of `P A Pᵀ`.
    pa_colptr: Vec<usize>,
    pa_rowval: Vec<usize>,
    /// Position in the permuted pattern of every entry of the input pattern.
    map: Vec<usize>,
    etree: Vec<usize>,
    l_colptr: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct LdlFactor {
    sym: LdlSymbolic,
    pa_nzval: Vec<f64>,
    l_rowval: Vec<usize>,
    l_nzval: Vec<f64>,
    d: Vec<f64>,
    dinv: Vec<f64>,
    /// Expected pivot signs, in permuted order.
    signs: Vec<f64>,
    pub regularized_pivots: usize,
    work_y: Vec<f64>,
    work_mark: Vec<bool>,
    work_idx: Vec<usize>,
    work_elim: Vec<usize>,
    work_next: Vec<usize>,
    work_x: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DynamicReg {
    pub eps: f64,
    pub delta: f64,
}

impl LdlSymbolic {
    /// `upper` must contain the full diagonal and only entries with `row <= col`.
    pub fn analyse(upper: &CscMatrix) -> Self {
        let n = upper.ncols;
        assert_eq!(upper.nrows, n);
        let perm = if n == 0 {
            Vec::new()
        } else {
            let (p, _, _) = amd::order::<usize>(n, &upper.colptr, &upper.rowval, &amd::Control::default())
                .expect("amd ordering failed on a valid pattern");
            p
        };
        let mut iperm = vec![0usize; n];
        for (k, &p) in perm.iter().enumerate() {
            iperm[p] = k;
        }

        // Permuted upper triangle, keeping a map from input entries.
        let mut counts = vec![0usize; n + 1];
        for j in 0..n {
            for k in upper.colptr[j]..upper.colptr[j + 1] {
                let i = upper.rowval[k];
                debug_assert!(i <= j, "pattern must be upper triangular");
                let (pi, pj) = (iperm[i], iperm[j]);
                counts[pi.max(pj) + 1] += 1;
            }
        }
        for j in 0..n {
            counts[j + 1] += counts[j];
        }
        let nnz = upper.nnz();
        let mut next = counts.clone();
        let mut rows = vec![0usize; nnz];
        let mut map = vec![0usize; nnz];
        for j in 0..n {
            for k in upper.colptr[j]..upper.colptr[j + 1] {
                let i = upper.rowval[k];
                let (pi, pj) = (iperm[i], iperm[j]);
                let col = pi.max(pj);
                let pos = next[col];
                rows[pos] = pi.min(pj);
                map[k] = pos;
                next[col] += 1;
            }
        }
        // Sort rows within each column, carrying the map along.
        let mut inv_map = vec![0usize; nnz];
        for (k, &pos) in map.iter().enumerate() {
            inv_map[pos] = k;
        }
        let mut scratch: Vec<(usize, usize)> = Vec::new();
        for j in 0..n {
            scratch.clear();
            scratch.extend((counts[j]..counts[j + 1]).map(|p| (rows[p], inv_map[p])));
            scratch.sort_unstable();
            for (off, &(r, k)) in scratch.iter().enumerate() {
                let p = counts[j] + off;
                rows[p] = r;
                map[k] = p;
            }
        }

        // Elimination tree and column counts of L.
        let mut etree = vec![NONE; n];
        let mut lnz = vec![0usize; n];
        let mut work = vec![NONE; n];
        for j in 0..n {
            work[j] = j;
            for p in counts[j]..counts[j + 1] {
                let mut i = rows[p];
                while work[i] != j {
                    if etree[i] == NONE {
                        etree[i] = j;
                    }
                    lnz[i] += 1;
                    work[i] = j;
                    i = etree[i];
                }
            }
        }
        let mut l_colptr = vec![0usize; n + 1];
        for i in 0..n {
            l_colptr[i + 1] = l_colptr[i] + lnz[i];
        }

        Self {
            n,
            perm,
            pa_colptr: counts,
            pa_rowval: rows,
            map,
            etree,
            l_colptr,
        }
    }

    pub fn nnz_l(&self) -> usize {
        self.l_colptr[self.n]
    }
}

impl LdlFactor {
    /// `signs[i]` is the expected sign (+1/-1) of the pivot for original index `i`.
    pub fn new(sym: LdlSymbolic, signs: &[f64]) -> Self {
        let n = sym.n;
        let lnz = sym.nnz_l();
        let psigns = sym.perm.iter().map(|&p| signs[p]).collect();
        let nnz = sym.pa_rowval.len();
        Self {
            pa_nzval: vec![0.0; nnz],
            l_rowval: vec![0; lnz],
            l_nzval: vec![0.0; lnz],
            d: vec![0.0; n],
            dinv: vec![0.0; n],
            signs: psigns,
            regularized_pivots: 0,
            work_y: vec![0.0; n],
            work_mark: vec![false; n],
            work_idx: vec![0; n],
            work_elim: vec![0; n],
            work_next: vec![0; n],
            work_x: vec![0.0; n],
            sym,
        }
    }

    /// Numeric factorization of the values `nzval` laid out on the analysed pattern.
    /// Returns `false` on a non-finite pivot.
    pub fn factor(&mut self, nzval: &[f64], reg: DynamicReg) -> bool {
        let n = self.sym.n;
        for v in self.pa_nzval.iter_mut() {
            *v = 0.0;
        }
        for (k, &pos) in self.sym.map.iter().enumerate() {
            self.pa_nzval[pos] += nzval[k];
        }
        self.regularized_pivots = 0;
        let sym = &self.sym;
        for i in 0..n {
            self.work_next[i] = sym.l_colptr[i];
            self.work_mark[i] = false;
            self.work_y[i] = 0.0;
        }

        for k in 0..n {
            let mut nnz_y = 0usize;
            self.d[k] = 0.0;
            for p in sym.pa_colptr[k]..sym.pa_colptr[k + 1] {
                let b = sym.pa_rowval[p];
                if b == k {
                    self.d[k] = self.pa_nzval[p];
                    continue;
                }
                self.work_y[b] = self.pa_nzval[p];
                if !self.work_mark[b] {
                    self.work_mark[b] = true;
                    self.work_elim[0] = b;
                    let mut ne = 1usize;
                    let mut next = sym.etree[b];
                    while next != NONE && next < k {
                        if self.work_mark[next] {
                            break;
                        }
                        self.work_mark[next] = true;
                        self.work_elim[ne] = next;
                        ne += 1;
                        next = sym.etree[next];
                    }
                    while ne > 0 {
                        ne -= 1;
                        self.work_idx[nnz_y] = self.work_elim[ne];
                        nnz_y += 1;
                    }
                }
            }
            for ii in (0..nnz_y).rev() {
                let c = self.work_idx[ii];
                let end = self.work_next[c];
                let yc = self.work_y[c];
                for j in sym.l_colptr[c]..end {
                    self.work_y[self.l_rowval[j]] -= self.l_nzval[j] * yc;
                }
                self.l_rowval[end] = k;
                let lv = yc * self.dinv[c];
                self.l_nzval[end] = lv;
                self.d[k] -= yc * lv;
                self.work_next[c] += 1;
                self.work_y[c] = 0.0;
                self.work_mark[c] = false;
            }
            if !self.d[k].is_finite() {
                return false;
            }
            if self.signs[k] * self.d[k] < reg.eps {
                self.d[k] = self.signs[k] * reg.delta;
                self.regularized_pivots += 1;
            }
            self.dinv[k] = 1.0 / self.d[k];
        }
        true
    }

    /// Solves `A x = b` in place using the current factors.
    pub fn solve(&mut self, b: &mut [f64]) {
        let n = self.sym.n;
        let x = &mut self.work_x;
        for k in 0..n {
            x[k] = b[self.sym.perm[k]];
        }
        let lp = &self.sym.l_colptr;
        for i in 0..n {
            let xi = x[i];
            if xi != 0.0 {
                for j in lp[i]..lp[i + 1] {
                    x[self.l_rowval[j]] -= self.l_nzval[j] * xi;
                }
            }
        }
        for i in 0..n {
            x[i] *= self.dinv[i];
        }
        for i in (0..n).rev() {
            let mut acc = x[i];
            for j in lp[i]..lp[i + 1] {
                acc -= self.l_nzval[j] * x[self.l_rowval[j]];
            }
            x[i] = acc;
        }
        for k in 0..n {
            b[self.sym.perm[k]] = x[k];
        }
    }
}

/// `y = A x` for a symmetric matrix stored as its upper triangle.
pub fn sym_upper_mul(upper: &CscMatrix, nzval: &[f64], x: &[f64], y: &mut [f64]) {
    for v in y.iter_mut() {
        *v = 0.0;
    }
    for j in 0..upper.ncols {
        for k in upper.colptr[j]..upper.colptr[j + 1] {
            let i = upper.rowval[k];
            let v = nzval[k];
            y[i] += v * x[j];
            if i != j {
                y[j] += v * x[i];
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn upper_of(dense: &[Vec<f64>]) -> CscMatrix {
        let n = dense.len();
        let mut trip = Vec::new();
        for j in 0..n {
            for i in 0..=j {
                if dense[i][j] != 0.0 || i == j {
                    trip.push((i, j, dense[i][j]));
                }
            }
        }
        CscMatrix::from_triplets(n, n, &trip)
    }

    #[test]
    fn solves_random_quasidefinite_systems() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let n1 = rng.gen_range(1..6);
            let n2 = rng.gen_range(1..6);
            let n = n1 + n2;
            let mut a = vec![vec![0.0; n]; n];
            for i in 0..n1 {
                a[i][i] = rng.gen_range(0.5..2.0);
            }
            for i in n1..n {
                a[i][i] = -rng.gen_range(0.5..2.0);
            }
            for i in 0..n1 {
                for j in n1..n {
                    if rng.gen_bool(0.5) {
                        let v = rng.gen_range(-1.0..1.0);
                        a[i][j] = v;
                        a[j][i] = v;
                    }
                }
            }
            let upper = upper_of(&a);
            let signs: Vec<f64> = (0..n).map(|i| if i < n1 { 1.0 } else { -1.0 }).collect();
            let mut f = LdlFactor::new(LdlSymbolic::analyse(&upper), &signs);
            assert!(f.factor(&upper.nzval, DynamicReg { eps: 1e-14, delta: 1e-7 }));
            assert_eq!(f.regularized_pivots, 0);
            let b: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut x = b.clone();
            f.solve(&mut x);
            let mut ax = vec![0.0; n];
            sym_upper_mul(&upper, &upper.nzval, &x, &mut ax);
            for i in 0..n {
                assert!((ax[i] - b[i]).abs() < 1e-10, "residual {}", ax[i] - b[i]);
            }
        }
    }

    #[test]
    fn wrong_sign_pivot_is_regularized() {
        let upper = CscMatrix::from_triplets(1, 1, &[(0, 0, -1.0)]);
        let mut f = LdlFactor::new(LdlSymbolic::analyse(&upper), &[1.0]);
        assert!(f.factor(&upper.nzval, DynamicReg { eps: 1e-12, delta: 1e-6 }));
        assert_eq!(f.regularized_pivots, 1);
    }
}
