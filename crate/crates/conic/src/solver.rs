//! Homogeneous self-dual embedding interior-point method with Nesterov–Todd
//! scaling and Mehrotra predictor-corrector steps.
//!
//! The equality rows (zero cones) are split off from the conic rows, so the
//! iteration works on
//!
//! ```text
//! minimize cᵀx  s.t.  A x = b,  G x + s = h,  s ∈ K
//! ```
//!
//! with every Newton system reduced to the quasi-definite KKT matrix
//! `[[δI, Aᵀ, Gᵀ], [A, −δI, 0], [G, 0, −W² − δI]]`, factored once per iteration.

use std::time::{Duration, Instant};

use crate::cones::{self, Cone, NtScaling};
use crate::equilibrate::{ruiz, Scaling};
use crate::ldl::{sym_upper_mul, DynamicReg, LdlFactor, LdlSymbolic};
use crate::program::ConeProgram;
use crate::sparse::{dot, norm_inf, CscMatrix};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    /// Relative duality gap tolerance.
    pub gap_tol: f64,
    /// Relative primal and dual residual tolerance.
    pub feas_tol: f64,
    pub max_iter: usize,
    /// Static regularization on the KKT diagonal.
    pub static_reg: f64,
    pub equilibrate: bool,
    /// Tolerance on infeasibility certificates.
    pub infeas_tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            gap_tol: 1e-8,
            feas_tol: 1e-8,
            max_iter: 200,
            static_reg: 1e-9,
            equilibrate: true,
            infeas_tol: 1e-8,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.gap_tol > 0.0 && self.feas_tol > 0.0 && self.infeas_tol > 0.0) {
            return Err("solver tolerances must be positive".into());
        }
        if self.static_reg < 0.0 {
            return Err("static regularization must be nonnegative".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Status {
    Optimal,
    /// Primal infeasible; `z` holds the certificate.
    Infeasible,
    /// Dual infeasible; `x` holds a recession direction.
    Unbounded,
    MaxIter,
    /// The KKT factorization broke down or the iteration stalled.
    NumericalFailure,
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    pub status: Status,
    pub x: Vec<f64>,
    /// Primal slacks, one per row of `A`.
    pub s: Vec<f64>,
    /// Dual variables, one per row of `A` (free on zero-cone rows).
    pub z: Vec<f64>,
    pub objective: f64,
    pub dual_objective: f64,
    /// Relative duality gap at the returned point.
    pub gap: f64,
    pub primal_residual: f64,
    pub dual_residual: f64,
    pub iterations: usize,
    pub solve_time: Duration,
}

const MAX_REFINE: usize = 10;
const STEP_FRACTION: f64 = 0.99;
const MIN_STEP: f64 = 1e-10;
/// Once the tolerances are met, keep iterating towards `POLISH_FACTOR` times
/// the tolerances for at most `POLISH_ITERS` iterations.
const POLISH_FACTOR: f64 = 1e-3;
const POLISH_ITERS: usize = 6;

struct Kkt {
    upper: CscMatrix,
    true_vals: Vec<f64>,
    cone_entries: Vec<Vec<usize>>,
    cone_dims: Vec<usize>,
    static_reg: f64,
    factor: LdlFactor,
    work: Vec<f64>,
    resid: Vec<f64>,
    corr: Vec<f64>,
}

fn find_entry(m: &CscMatrix, row: usize, col: usize) -> usize {
    let lo = m.colptr[col];
    let hi = m.colptr[col + 1];
    lo + m.rowval[lo..hi].binary_search(&row).expect("entry present in KKT pattern")
}

impl Kkt {
    fn new(a_eq: &CscMatrix, g: &CscMatrix, cones: &[Cone], static_reg: f64) -> Self {
        let n = a_eq.ncols;
        let p = a_eq.nrows;
        let m = g.nrows;
        let dim = n + p + m;
        let mut trip: Vec<(usize, usize, f64)> = Vec::new();
        let mut true_trip: Vec<(usize, usize, f64)> = Vec::new();
        for j in 0..n {
            trip.push((j, j, static_reg));
            true_trip.push((j, j, 0.0));
        }
        for (mat, off) in [(a_eq, n), (g, n + p)] {
            for j in 0..n {
                for k in mat.colptr[j]..mat.colptr[j + 1] {
                    trip.push((j, off + mat.rowval[k], mat.nzval[k]));
                    true_trip.push((j, off + mat.rowval[k], mat.nzval[k]));
                }
            }
        }
        for i in 0..p {
            trip.push((n + i, n + i, -static_reg));
            true_trip.push((n + i, n + i, 0.0));
        }
        let mut start = n + p;
        for cone in cones {
            let d = cone.dim();
            for a in 0..d {
                for b in a..d {
                    let (v, tv) = if a == b { (-1.0 - static_reg, -1.0) } else { (0.0, 0.0) };
                    if a == b || matches!(cone, Cone::Soc(_)) {
                        trip.push((start + a, start + b, v));
                        true_trip.push((start + a, start + b, tv));
                    }
                }
            }
            start += d;
        }
        let upper = CscMatrix::from_triplets(dim, dim, &trip);
        let true_vals = CscMatrix::from_triplets(dim, dim, &true_trip).nzval;
        let mut cone_entries = Vec::with_capacity(cones.len());
        let mut start = n + p;
        for cone in cones {
            let d = cone.dim();
            let mut idx = Vec::new();
            for a in 0..d {
                for b in a..d {
                    if a == b || matches!(cone, Cone::Soc(_)) {
                        idx.push(find_entry(&upper, start + a, start + b));
                    }
                }
            }
            cone_entries.push(idx);
            start += d;
        }
        let signs: Vec<f64> = (0..dim).map(|i| if i < n { 1.0 } else { -1.0 }).collect();
        let factor = LdlFactor::new(LdlSymbolic::analyse(&upper), &signs);
        Self {
            upper,
            true_vals,
            cone_entries,
            cone_dims: cones.iter().map(Cone::dim).collect(),
            static_reg,
            factor,
            work: vec![0.0; dim],
            resid: vec![0.0; dim],
            corr: vec![0.0; dim],
        }
    }

    /// Installs `−W²` blocks.
    fn set_scaling(&mut self, scalings: &[NtScaling], cones: &[Cone]) {
        for (k, cone) in cones.iter().enumerate() {
            let d = self.cone_dims[k];
            let entries = &self.cone_entries[k];
            match (&scalings[k], cone) {
                (NtScaling::NonNeg { w }, _) => {
                    for a in 0..d {
                        let v = -w[a] * w[a];
                        self.true_vals[entries[a]] = v;
                        self.upper.nzval[entries[a]] = v - self.static_reg;
                    }
                }
                (sc @ NtScaling::Soc { .. }, _) => {
                    let w2 = sc.squared(d);
                    let mut e = 0;
                    for a in 0..d {
                        for b in a..d {
                            let v = -w2[a * d + b];
                            self.true_vals[entries[e]] = v;
                            self.upper.nzval[entries[e]] = if a == b { v - self.static_reg } else { v };
                            e += 1;
                        }
                    }
                }
                (NtScaling::Zero, _) => {}
            }
        }
    }

    fn factor(&mut self) -> bool {
        self.factor.factor(
            &self.upper.nzval,
            DynamicReg {
                eps: 1e-13,
                delta: 2e-7,
            },
        )
    }

    /// Solves against the unregularized matrix with iterative refinement.
    fn solve(&mut self, rhs: &[f64], out: &mut [f64]) {
        out.copy_from_slice(rhs);
        self.factor.solve(out);
        let tol = 1e-14 * (1.0 + norm_inf(rhs));
        let mut prev = f64::INFINITY;
        for _ in 0..MAX_REFINE {
            sym_upper_mul(&self.upper, &self.true_vals, out, &mut self.work);
            for i in 0..rhs.len() {
                self.resid[i] = rhs[i] - self.work[i];
            }
            let rn = norm_inf(&self.resid);
            if rn > prev {
                // Last correction made things worse: undo it.
                for i in 0..out.len() {
                    out[i] -= self.corr[i];
                }
                break;
            }
            if rn <= tol || rn > 0.9 * prev {
                break;
            }
            prev = rn;
            self.corr.copy_from_slice(&self.resid);
            self.factor.solve(&mut self.corr);
            for i in 0..out.len() {
                out[i] += self.corr[i];
            }
        }
    }
}

/// Iterate of the homogeneous embedding, in equilibrated coordinates.
#[derive(Clone)]
struct Iterate {
    x: Vec<f64>,
    y: Vec<f64>,
    z: Vec<f64>,
    s: Vec<f64>,
    tau: f64,
    kappa: f64,
}

struct Direction {
    x: Vec<f64>,
    y: Vec<f64>,
    z: Vec<f64>,
    s: Vec<f64>,
    tau: f64,
    kappa: f64,
}

struct Problem<'a> {
    prog: &'a ConeProgram,
    n: usize,
    p: usize,
    m: usize,
    eq_rows: Vec<usize>,
    cone_rows: Vec<usize>,
    cones: Vec<Cone>,
    ranges: Vec<std::ops::Range<usize>>,
    /// Unscaled data.
    a_eq: CscMatrix,
    g: CscMatrix,
    b: Vec<f64>,
    h: Vec<f64>,
    /// Equilibrated data.
    a_eq_s: CscMatrix,
    g_s: CscMatrix,
    c_s: Vec<f64>,
    b_s: Vec<f64>,
    h_s: Vec<f64>,
    sc: Scaling,
    degree: usize,
}

impl<'a> Problem<'a> {
    fn new(prog: &'a ConeProgram, equilibrate: bool) -> Self {
        let mut eq_rows = Vec::new();
        let mut cone_rows = Vec::new();
        let mut cones = Vec::new();
        for (cone, range) in prog.cones.iter().zip(prog.cone_ranges()) {
            match cone {
                Cone::Zero(_) => eq_rows.extend(range),
                _ => {
                    cone_rows.extend(range);
                    cones.push(*cone);
                }
            }
        }
        let a_eq = prog.a.select_rows(&eq_rows);
        let g = prog.a.select_rows(&cone_rows);
        let b: Vec<f64> = eq_rows.iter().map(|&r| prog.b[r]).collect();
        let h: Vec<f64> = cone_rows.iter().map(|&r| prog.b[r]).collect();
        let n = prog.num_vars();
        let (p, m) = (b.len(), h.len());
        let mut a_eq_s = a_eq.clone();
        let mut g_s = g.clone();
        let sc = if equilibrate {
            ruiz(&mut a_eq_s, &mut g_s, &cones, &prog.c, 25)
        } else {
            Scaling::identity(n, p, m)
        };
        let c_s = (0..n).map(|j| prog.c[j] * sc.d[j] * sc.cost).collect();
        let b_s = (0..p).map(|i| b[i] * sc.e_eq[i]).collect();
        let h_s = (0..m).map(|i| h[i] * sc.e_cone[i]).collect();
        let mut start = 0;
        let ranges = cones
            .iter()
            .map(|c| {
                let r = start..start + c.dim();
                start += c.dim();
                r
            })
            .collect();
        let degree = cones.iter().map(Cone::degree).sum();
        Self {
            prog,
            n,
            p,
            m,
            eq_rows,
            cone_rows,
            cones,
            ranges,
            a_eq,
            g,
            b,
            h,
            a_eq_s,
            g_s,
            c_s,
            b_s,
            h_s,
            sc,
            degree,
        }
    }

    fn q_dot(&self, x: &[f64], y: &[f64], z: &[f64]) -> f64 {
        dot(&self.c_s, x) + dot(&self.b_s, y) + dot(&self.h_s, z)
    }

    /// Converts a scaled iterate to original coordinates, dividing by `tau`.
    fn unscale(&self, it: &Iterate, divide: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let sc = &self.sc;
        let x = (0..self.n).map(|j| it.x[j] * sc.d[j] / divide).collect();
        let y = (0..self.p).map(|i| it.y[i] * sc.e_eq[i] / (sc.cost * divide)).collect();
        let z = (0..self.m).map(|i| it.z[i] * sc.e_cone[i] / (sc.cost * divide)).collect();
        let s = (0..self.m).map(|i| it.s[i] / (sc.e_cone[i] * divide)).collect();
        (x, y, z, s)
    }

    fn max_step(&self, it: &Iterate, dir: &Direction) -> f64 {
        let mut alpha: f64 = 1.0 / STEP_FRACTION;
        for (cone, r) in self.cones.iter().zip(&self.ranges) {
            alpha = cones::step_to_boundary(*cone, &it.s[r.clone()], &dir.s[r.clone()], alpha);
            alpha = cones::step_to_boundary(*cone, &it.z[r.clone()], &dir.z[r.clone()], alpha);
        }
        if dir.tau < 0.0 {
            alpha = alpha.min(-it.tau / dir.tau);
        }
        if dir.kappa < 0.0 {
            alpha = alpha.min(-it.kappa / dir.kappa);
        }
        alpha.max(0.0)
    }
}

/// Residual metrics at an iterate, in original coordinates.
#[derive(Clone)]
struct Metrics {
    pres: f64,
    dres: f64,
    pobj: f64,
    dobj: f64,
    gap: f64,
}

fn metrics(pb: &Problem, x: &[f64], y: &[f64], z: &[f64], s: &[f64]) -> Metrics {
    let prog = pb.prog;
    let mut r_eq = pb.a_eq.mul(x);
    for i in 0..pb.p {
        r_eq[i] -= pb.b[i];
    }
    let mut r_g = pb.g.mul(x);
    for i in 0..pb.m {
        r_g[i] += s[i] - pb.h[i];
    }
    let pden = 1.0 + norm_inf(&pb.b).max(norm_inf(&pb.h));
    let pres = norm_inf(&r_eq).max(norm_inf(&r_g)) / pden;
    let mut r_d = prog.c.clone();
    pb.a_eq.gemv_t(1.0, y, &mut r_d);
    pb.g.gemv_t(1.0, z, &mut r_d);
    let dres = norm_inf(&r_d) / (1.0 + norm_inf(&prog.c));
    let pobj = dot(&prog.c, x) + prog.c0;
    let dobj = -dot(&pb.b, y) - dot(&pb.h, z) + prog.c0;
    let sz = dot(s, z).abs();
    let gap = (pobj - dobj).abs().max(sz) / 1f64.max(pobj.abs().min(dobj.abs()));
    Metrics {
        pres,
        dres,
        pobj,
        dobj,
        gap,
    }
}

/// Interior-point solve. A run that breaks down numerically is repeated with
/// heavier regularization and then with the equilibration setting flipped;
/// the first optimal run wins, otherwise the original result is returned.
pub fn solve(prog: &ConeProgram, cfg: &SolverConfig) -> SolveResult {
    let start = Instant::now();
    let first = solve_once(prog, cfg);
    if first.status != Status::NumericalFailure {
        return first;
    }
    let retries = [
        SolverConfig {
            static_reg: cfg.static_reg * 100.0,
            ..*cfg
        },
        SolverConfig {
            equilibrate: !cfg.equilibrate,
            ..*cfg
        },
    ];
    for retry in &retries {
        let mut r = solve_once(prog, retry);
        if r.status == Status::Optimal {
            r.iterations += first.iterations;
            r.solve_time = start.elapsed();
            return r;
        }
    }
    SolveResult {
        solve_time: start.elapsed(),
        ..first
    }
}

fn solve_once(prog: &ConeProgram, cfg: &SolverConfig) -> SolveResult {
    let start = Instant::now();
    let pb = Problem::new(prog, cfg.equilibrate);
    let (n, p, m) = (pb.n, pb.p, pb.m);
    let dim = n + p + m;
    let mut kkt = Kkt::new(&pb.a_eq_s, &pb.g_s, &pb.cones, cfg.static_reg);

    // Initial point from two least-squares problems with W = I.
    let mut it = Iterate {
        x: vec![0.0; n],
        y: vec![0.0; p],
        z: vec![0.0; m],
        s: vec![0.0; m],
        tau: 1.0,
        kappa: 1.0,
    };
    let mut sol = vec![0.0; dim];
    let mut rhs = vec![0.0; dim];
    let mut status = Status::MaxIter;
    if !kkt.factor() {
        status = Status::NumericalFailure;
    } else {
        rhs[n..n + p].copy_from_slice(&pb.b_s);
        rhs[n + p..].copy_from_slice(&pb.h_s);
        kkt.solve(&rhs, &mut sol);
        it.x.copy_from_slice(&sol[..n]);
        for i in 0..m {
            it.s[i] = -sol[n + p + i];
        }
        rhs.iter_mut().for_each(|v| *v = 0.0);
        for j in 0..n {
            rhs[j] = -pb.c_s[j];
        }
        kkt.solve(&rhs, &mut sol);
        it.y.copy_from_slice(&sol[n..n + p]);
        it.z.copy_from_slice(&sol[n + p..]);
        for v in [&mut it.s, &mut it.z] {
            let shift = pb
                .cones
                .iter()
                .zip(&pb.ranges)
                .map(|(c, r)| -cones::min_eig(*c, &v[r.clone()]))
                .fold(f64::NEG_INFINITY, f64::max);
            if shift >= 0.0 {
                for (c, r) in pb.cones.iter().zip(&pb.ranges) {
                    cones::add_identity(*c, &mut v[r.clone()], 1.0 + shift);
                }
            }
        }
    }

    let mut rx = vec![0.0; n];
    let mut ry = vec![0.0; p];
    let mut rz = vec![0.0; m];
    let mut lambda = vec![0.0; m];
    let mut scalings: Vec<NtScaling> = Vec::with_capacity(pb.cones.len());
    let mut u2 = vec![0.0; dim];
    let mut iterations = 0;
    let mut small_steps = 0;
    let mut last: Option<Metrics> = None;
    let mut best: Option<(Iterate, Metrics, f64)> = None;
    let mut polish = 0;

    while status == Status::MaxIter {
        // Residuals of the embedding.
        rx.iter_mut().zip(&pb.c_s).for_each(|(r, c)| *r = c * it.tau);
        pb.a_eq_s.gemv_t(1.0, &it.y, &mut rx);
        pb.g_s.gemv_t(1.0, &it.z, &mut rx);
        ry.iter_mut().zip(&pb.b_s).for_each(|(r, b)| *r = b * it.tau);
        pb.a_eq_s.gemv(-1.0, &it.x, &mut ry);
        for i in 0..m {
            rz[i] = pb.h_s[i] * it.tau - it.s[i];
        }
        pb.g_s.gemv(-1.0, &it.x, &mut rz);
        let rtau = -pb.q_dot(&it.x, &it.y, &it.z) - it.kappa;

        let (xu, yu, zu, su) = pb.unscale(&it, it.tau);
        let mt = metrics(&pb, &xu, &yu, &zu, &su);
        let merit = (mt.pres / cfg.feas_tol).max(mt.dres / cfg.feas_tol).max(mt.gap / cfg.gap_tol);
        if merit <= 1.0 {
            if best.as_ref().map_or(true, |(_, _, m)| merit < *m) {
                best = Some((it.clone(), mt.clone(), merit));
            }
            polish += 1;
            if merit <= POLISH_FACTOR || polish > POLISH_ITERS {
                status = Status::Optimal;
                break;
            }
        }
        // Infeasibility certificates use the raw (un-normalized) iterate.
        {
            let (xr, yr, zr, sr) = pb.unscale(&it, 1.0);
            let hz = dot(&pb.b, &yr) + dot(&pb.h, &zr);
            if hz < 0.0 {
                let mut r = vec![0.0; n];
                pb.a_eq.gemv_t(1.0, &yr, &mut r);
                pb.g.gemv_t(1.0, &zr, &mut r);
                if norm_inf(&r) <= cfg.infeas_tol * -hz && it.kappa > it.tau {
                    status = Status::Infeasible;
                    last = Some(mt);
                    break;
                }
            }
            let cx = dot(&prog.c, &xr);
            if cx < 0.0 {
                let r1 = pb.a_eq.mul(&xr);
                let mut r2 = pb.g.mul(&xr);
                for i in 0..m {
                    r2[i] += sr[i];
                }
                if norm_inf(&r1).max(norm_inf(&r2)) <= cfg.infeas_tol * -cx && it.kappa > it.tau {
                    status = Status::Unbounded;
                    last = Some(mt);
                    break;
                }
            }
        }
        last = Some(mt);
        if iterations >= cfg.max_iter {
            break;
        }
        iterations += 1;

        // Scaling and factorization.
        scalings.clear();
        for (c, r) in pb.cones.iter().zip(&pb.ranges) {
            let w = NtScaling::compute(*c, &it.s[r.clone()], &it.z[r.clone()]);
            w.apply(&it.z[r.clone()], &mut lambda[r.clone()]);
            scalings.push(w);
        }
        kkt.set_scaling(&scalings, &pb.cones);
        if !kkt.factor() {
            status = Status::NumericalFailure;
            break;
        }
        rhs[..n].iter_mut().zip(&pb.c_s).for_each(|(r, c)| *r = -c);
        rhs[n..n + p].copy_from_slice(&pb.b_s);
        rhs[n + p..].copy_from_slice(&pb.h_s);
        kkt.solve(&rhs, &mut u2);
        let qu2 = pb.q_dot(&u2[..n], &u2[n..n + p], &u2[n + p..]);

        let mu = (dot(&it.s, &it.z) + it.tau * it.kappa) / (pb.degree as f64 + 1.0);

        // Affine (predictor) direction.
        let mut ds_aff = vec![0.0; m];
        for (c, r) in pb.cones.iter().zip(&pb.ranges) {
            cones::jordan_product(*c, &lambda[r.clone()], &lambda[r.clone()], &mut ds_aff[r.clone()]);
        }
        let aff = direction(
            &pb,
            &mut kkt,
            &it,
            &scalings,
            &lambda,
            &u2,
            qu2,
            [&rx, &ry, &rz],
            rtau,
            &ds_aff,
            it.tau * it.kappa,
        );
        let alpha_aff = pb.max_step(&it, &aff).min(1.0);
        let sigma = (1.0 - alpha_aff).powi(3).clamp(0.0, 1.0);

        // Combined direction with second-order correction.
        let mut ds_comb = vec![0.0; m];
        let mut t1 = vec![0.0; m];
        let mut t2 = vec![0.0; m];
        for (k, (c, r)) in pb.cones.iter().zip(&pb.ranges).enumerate() {
            scalings[k].apply_inv(&aff.s[r.clone()], &mut t1[r.clone()]);
            scalings[k].apply(&aff.z[r.clone()], &mut t2[r.clone()]);
            cones::jordan_product(*c, &t1[r.clone()], &t2[r.clone()], &mut ds_comb[r.clone()]);
            for i in r.clone() {
                ds_comb[i] += ds_aff[i];
            }
            cones::add_identity(*c, &mut ds_comb[r.clone()], -sigma * mu);
        }
        let f = 1.0 - sigma;
        let rxs: Vec<f64> = rx.iter().map(|v| v * f).collect();
        let rys: Vec<f64> = ry.iter().map(|v| v * f).collect();
        let rzs: Vec<f64> = rz.iter().map(|v| v * f).collect();
        let dkappa = it.tau * it.kappa + aff.tau * aff.kappa - sigma * mu;
        let dir = direction(
            &pb,
            &mut kkt,
            &it,
            &scalings,
            &lambda,
            &u2,
            qu2,
            [&rxs, &rys, &rzs],
            rtau * f,
            &ds_comb,
            dkappa,
        );
        let alpha = (STEP_FRACTION * pb.max_step(&it, &dir)).min(1.0);
        if alpha < MIN_STEP || !alpha.is_finite() {
            small_steps += 1;
            if small_steps >= 2 {
                status = Status::NumericalFailure;
                break;
            }
            continue;
        }
        small_steps = 0;
        for i in 0..n {
            it.x[i] += alpha * dir.x[i];
        }
        for i in 0..p {
            it.y[i] += alpha * dir.y[i];
        }
        for i in 0..m {
            it.z[i] += alpha * dir.z[i];
            it.s[i] += alpha * dir.s[i];
        }
        it.tau += alpha * dir.tau;
        it.kappa += alpha * dir.kappa;
        if ![it.tau, it.kappa].iter().all(|v| v.is_finite()) {
            status = Status::NumericalFailure;
            break;
        }
    }

    if let Some((b_it, b_mt, _)) = best {
        // Polishing may stall or break down; the certified iterate stands.
        it = b_it;
        last = Some(b_mt);
        status = Status::Optimal;
    }
    let divide = match status {
        Status::Infeasible | Status::Unbounded => 1.0,
        _ => it.tau,
    };
    let (x, y, zc, sc) = pb.unscale(&it, divide);
    let mt = last.unwrap_or_else(|| metrics(&pb, &x, &y, &zc, &sc));
    let mut z_full = vec![0.0; prog.num_rows()];
    let mut s_full = vec![0.0; prog.num_rows()];
    for (k, &r) in pb.eq_rows.iter().enumerate() {
        z_full[r] = y[k];
    }
    for (k, &r) in pb.cone_rows.iter().enumerate() {
        z_full[r] = zc[k];
        s_full[r] = sc[k];
    }
    SolveResult {
        status,
        x,
        s: s_full,
        z: z_full,
        objective: mt.pobj,
        dual_objective: mt.dobj,
        gap: mt.gap,
        primal_residual: mt.pres,
        dual_residual: mt.dres,
        iterations,
        solve_time: start.elapsed(),
    }
}

/// Solves the linearized embedding for one right-hand side.
#[allow(clippy::too_many_arguments)]
fn direction(
    pb: &Problem,
    kkt: &mut Kkt,
    it: &Iterate,
    scalings: &[NtScaling],
    lambda: &[f64],
    u2: &[f64],
    qu2: f64,
    [dx, dy, dz]: [&[f64]; 3],
    dtau: f64,
    ds: &[f64],
    dkappa: f64,
) -> Direction {
    let (n, p, m) = (pb.n, pb.p, pb.m);
    let dim = n + p + m;
    // wt = W (λ \ ds)
    let mut tmp = vec![0.0; m];
    let mut wt = vec![0.0; m];
    for (k, (c, r)) in pb.cones.iter().zip(&pb.ranges).enumerate() {
        cones::jordan_div(*c, &lambda[r.clone()], &ds[r.clone()], &mut tmp[r.clone()]);
        scalings[k].apply(&tmp[r.clone()], &mut wt[r.clone()]);
    }
    let mut rhs = vec![0.0; dim];
    for i in 0..n {
        rhs[i] = -dx[i];
    }
    rhs[n..n + p].copy_from_slice(dy);
    for i in 0..m {
        rhs[n + p + i] = dz[i] + wt[i];
    }
    let mut u1 = vec![0.0; dim];
    kkt.solve(&rhs, &mut u1);
    let qu1 = pb.q_dot(&u1[..n], &u1[n..n + p], &u1[n + p..]);
    let d_tau = (dtau - qu1 + dkappa / it.tau) / (qu2 - it.kappa / it.tau);
    for i in 0..dim {
        u1[i] += d_tau * u2[i];
    }
    let x = u1[..n].to_vec();
    let y = u1[n..n + p].to_vec();
    let z = u1[n + p..].to_vec();
    // ds = −W(λ \ d_s) − W² dz
    let mut s = vec![0.0; m];
    for (k, r) in pb.ranges.iter().enumerate() {
        scalings[k].apply(&z[r.clone()], &mut tmp[r.clone()]);
        let mut w2dz = vec![0.0; r.len()];
        scalings[k].apply(&tmp[r.clone()], &mut w2dz);
        for (off, i) in r.clone().enumerate() {
            s[i] = -wt[i] - w2dz[off];
        }
    }
    let d_kappa = -(dkappa + it.kappa * d_tau) / it.tau;
    Direction {
        x,
        y,
        z,
        s,
        tau: d_tau,
        kappa: d_kappa,
    }
}
