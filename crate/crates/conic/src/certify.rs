//! Independent optimality check of a primal-dual point against the original
//! (unscaled) program.

use crate::cones::{self, Cone};
use crate::program::ConeProgram;
use crate::sparse::{dot, norm_inf};

#[derive(Debug, Clone, PartialEq)]
pub struct Certificate {
    /// `‖A x + s − b‖∞ / (1 + ‖b‖∞)`
    pub primal_residual: f64,
    /// `‖Aᵀ z + c‖∞ / (1 + ‖c‖∞)`
    pub dual_residual: f64,
    /// Relative duality gap.
    pub gap: f64,
    /// Most negative cone eigenvalue of `s`, and of `z`, clipped at zero.
    pub primal_cone_violation: f64,
    pub dual_cone_violation: f64,
    /// `|sₖᵀ zₖ|` per cone block.
    pub complementarity: Vec<f64>,
}

impl Certificate {
    pub fn passes(&self, tol: f64) -> bool {
        self.primal_residual <= tol
            && self.dual_residual <= tol
            && self.gap <= tol
            && self.primal_cone_violation <= tol
            && self.dual_cone_violation <= tol
    }
}

pub fn certify(prog: &ConeProgram, x: &[f64], s: &[f64], z: &[f64]) -> Certificate {
    let mut r = prog.a.mul(x);
    for i in 0..r.len() {
        r[i] += s[i] - prog.b[i];
    }
    let primal_residual = norm_inf(&r) / (1.0 + norm_inf(&prog.b));
    let mut rd = prog.c.clone();
    prog.a.gemv_t(1.0, z, &mut rd);
    let dual_residual = norm_inf(&rd) / (1.0 + norm_inf(&prog.c));
    let pobj = prog.objective(x);
    let dobj = -dot(&prog.b, z) + prog.c0;
    let gap = (pobj - dobj).abs() / 1f64.max(pobj.abs().min(dobj.abs()));
    let mut pv: f64 = 0.0;
    let mut dv: f64 = 0.0;
    let mut complementarity = Vec::with_capacity(prog.cones.len());
    for (cone, range) in prog.cones.iter().zip(prog.cone_ranges()) {
        let (sk, zk) = (&s[range.clone()], &z[range]);
        match cone {
            Cone::Zero(_) => {
                pv = pv.max(norm_inf(sk));
                complementarity.push(0.0);
            }
            _ => {
                pv = pv.max(-cones::min_eig(*cone, sk));
                dv = dv.max(-cones::min_eig(*cone, zk));
                complementarity.push(dot(sk, zk).abs());
            }
        }
    }
    Certificate {
        primal_residual,
        dual_residual,
        gap,
        primal_cone_violation: pv,
        dual_cone_violation: dv,
        complementarity,
    }
}
