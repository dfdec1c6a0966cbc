//! Ruiz equilibration of the constraint matrix.

use crate::cones::Cone;
use crate::sparse::{norm_inf, CscMatrix};

const MIN_SCALE: f64 = 1e-4;
const MAX_SCALE: f64 = 1e4;

#[derive(Debug, Clone)]
pub(crate) struct Scaling {
    /// Column scaling: `x = d ∘ x̄`.
    pub d: Vec<f64>,
    /// Row scaling of the equality rows.
    pub e_eq: Vec<f64>,
    /// Row scaling of the cone rows (constant within each second-order block).
    pub e_cone: Vec<f64>,
    pub cost: f64,
}

impl Scaling {
    pub fn identity(n: usize, p: usize, m: usize) -> Self {
        Self {
            d: vec![1.0; n],
            e_eq: vec![1.0; p],
            e_cone: vec![1.0; m],
            cost: 1.0,
        }
    }
}

fn clamp_inv_sqrt(norm: f64) -> f64 {
    if norm == 0.0 {
        1.0
    } else {
        (1.0 / norm.sqrt()).clamp(MIN_SCALE, MAX_SCALE)
    }
}

/// Scales `a_eq`, `g` in place and returns the accumulated scaling.
pub(crate) fn ruiz(a_eq: &mut CscMatrix, g: &mut CscMatrix, cones: &[Cone], c: &[f64], iters: usize) -> Scaling {
    let n = a_eq.ncols;
    let p = a_eq.nrows;
    let m = g.nrows;
    let mut sc = Scaling::identity(n, p, m);
    let mut col = vec![0.0f64; n];
    let mut row_eq = vec![0.0f64; p];
    let mut row_g = vec![0.0f64; m];
    let mut d = vec![0.0; n];

    for _ in 0..iters {
        col.iter_mut().for_each(|v| *v = 0.0);
        row_eq.iter_mut().for_each(|v| *v = 0.0);
        row_g.iter_mut().for_each(|v| *v = 0.0);
        for (mat, rows) in [(&*a_eq, &mut row_eq), (&*g, &mut row_g)] {
            for j in 0..n {
                for k in mat.colptr[j]..mat.colptr[j + 1] {
                    let v = mat.nzval[k].abs();
                    col[j] = col[j].max(v);
                    let r = mat.rowval[k];
                    rows[r] = rows[r].max(v);
                }
            }
        }
        // Second-order blocks share one scale factor.
        let mut start = 0;
        for cone in cones {
            let dim = cone.dim();
            if let Cone::Soc(_) = cone {
                let mx = norm_inf(&row_g[start..start + dim]);
                row_g[start..start + dim].iter_mut().for_each(|v| *v = mx);
            }
            start += dim;
        }
        for j in 0..n {
            d[j] = clamp_inv_sqrt(col[j]);
        }
        let e_eq: Vec<f64> = row_eq.iter().map(|&v| clamp_inv_sqrt(v)).collect();
        let e_g: Vec<f64> = row_g.iter().map(|&v| clamp_inv_sqrt(v)).collect();
        a_eq.scale(&e_eq, &d);
        g.scale(&e_g, &d);
        for j in 0..n {
            sc.d[j] *= d[j];
        }
        for i in 0..p {
            sc.e_eq[i] *= e_eq[i];
        }
        for i in 0..m {
            sc.e_cone[i] *= e_g[i];
        }
    }

    let cnorm = c.iter().zip(&sc.d).fold(0.0f64, |mx, (ci, di)| mx.max((ci * di).abs()));
    sc.cost = if cnorm == 0.0 {
        1.0
    } else {
        (1.0 / cnorm).clamp(MIN_SCALE, MAX_SCALE)
    };
    sc
}
