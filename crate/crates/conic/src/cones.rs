//! Cone definitions and the Jordan-algebra operations the interior-point
//! iteration needs: Nesterov–Todd scaling, Jordan products and their inverses,
//! and step-to-boundary computations.

/// One block of the constraint cone. Blocks appear in row order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Cone {
    /// `s = 0` (equality rows).
    Zero(usize),
    /// `s >= 0` elementwise.
    NonNeg(usize),
    /// `s[0] >= ||s[1..]||`.
    Soc(usize),
}

impl Cone {
    pub fn dim(&self) -> usize {
        match *self {
            Cone::Zero(d) | Cone::NonNeg(d) | Cone::Soc(d) => d,
        }
    }

    /// Barrier degree contributed by the block.
    pub(crate) fn degree(&self) -> usize {
        match *self {
            Cone::Zero(_) => 0,
            Cone::NonNeg(d) => d,
            Cone::Soc(_) => 1,
        }
    }
}

/// Signed distance to the boundary: the smallest "eigenvalue" of `v` in the
/// cone's Jordan algebra. Positive means strictly interior.
pub(crate) fn min_eig(cone: Cone, v: &[f64]) -> f64 {
    match cone {
        Cone::Zero(_) => 0.0,
        Cone::NonNeg(_) => v.iter().copied().fold(f64::INFINITY, f64::min),
        Cone::Soc(_) => v[0] - norm2(&v[1..]),
    }
}

pub(crate) fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Adds `alpha * e` (the cone identity) to `v`.
pub(crate) fn add_identity(cone: Cone, v: &mut [f64], alpha: f64) {
    match cone {
        Cone::Zero(_) => {}
        Cone::NonNeg(_) => v.iter_mut().for_each(|x| *x += alpha),
        Cone::Soc(_) => v[0] += alpha,
    }
}

/// `out = u ∘ v`
pub(crate) fn jordan_product(cone: Cone, u: &[f64], v: &[f64], out: &mut [f64]) {
    match cone {
        Cone::Zero(_) => {}
        Cone::NonNeg(_) => {
            for i in 0..u.len() {
                out[i] = u[i] * v[i];
            }
        }
        Cone::Soc(_) => {
            out[0] = u.iter().zip(v).map(|(a, b)| a * b).sum();
            for i in 1..u.len() {
                out[i] = u[0] * v[i] + v[0] * u[i];
            }
        }
    }
}

/// `out = λ \ v`, the solution `u` of `λ ∘ u = v`.
pub(crate) fn jordan_div(cone: Cone, lambda: &[f64], v: &[f64], out: &mut [f64]) {
    match cone {
        Cone::Zero(_) => {}
        Cone::NonNeg(_) => {
            for i in 0..v.len() {
                out[i] = v[i] / lambda[i];
            }
        }
        Cone::Soc(_) => {
            let l0 = lambda[0];
            let l1 = &lambda[1..];
            let det = l0 * l0 - l1.iter().map(|x| x * x).sum::<f64>();
            let l1v1: f64 = l1.iter().zip(&v[1..]).map(|(a, b)| a * b).sum();
            let u0 = (l0 * v[0] - l1v1) / det;
            out[0] = u0;
            for i in 1..v.len() {
                out[i] = (v[i] - u0 * lambda[i]) / l0;
            }
        }
    }
}

/// Largest `alpha <= cap` keeping `v + alpha * dv` in the closed cone.
pub(crate) fn step_to_boundary(cone: Cone, v: &[f64], dv: &[f64], cap: f64) -> f64 {
    match cone {
        Cone::Zero(_) => cap,
        Cone::NonNeg(_) => {
            let mut a = cap;
            for i in 0..v.len() {
                if dv[i] < 0.0 {
                    a = a.min(-v[i] / dv[i]);
                }
            }
            a
        }
        Cone::Soc(_) => {
            // q(α) = (v0 + α d0)² − ||v1 + α d1||² must stay >= 0 with v0 + α d0 >= 0.
            let a = dv[0] * dv[0] - dv[1..].iter().map(|x| x * x).sum::<f64>();
            let b = v[0] * dv[0] - v[1..].iter().zip(&dv[1..]).map(|(x, y)| x * y).sum::<f64>();
            let c = (v[0] * v[0] - v[1..].iter().map(|x| x * x).sum::<f64>()).max(0.0);
            let mut alpha = cap;
            if dv[0] < 0.0 {
                alpha = alpha.min(-v[0] / dv[0]);
            }
            let scale = a.abs().max(b.abs()).max(c);
            if scale == 0.0 {
                return alpha;
            }
            if a.abs() <= 1e-14 * scale {
                if b < 0.0 {
                    alpha = alpha.min(-c / (2.0 * b));
                }
                return alpha.max(0.0);
            }
            let disc = b * b - a * c;
            if disc < 0.0 {
                return alpha;
            }
            let sq = disc.sqrt();
            // Numerically stable roots of a α² + 2 b α + c.
            let qv = -(b + b.signum() * sq);
            let r1 = qv / a;
            let r2 = if qv != 0.0 { c / qv } else { f64::INFINITY };
            for r in [r1, r2] {
                if r > 0.0 && r.is_finite() {
                    alpha = alpha.min(r);
                }
            }
            alpha.max(0.0)
        }
    }
}

/// Nesterov–Todd scaling for one cone block: a symmetric `W` with
/// `W z = W⁻¹ s = λ`.
#[derive(Debug, Clone)]
pub(crate) enum NtScaling {
    Zero,
    /// `W = diag(w)`.
    NonNeg { w: Vec<f64> },
    /// `W = η [[w0, w1ᵀ], [w1, I + w1 w1ᵀ/(1 + w0)]]`.
    Soc { eta: f64, w: Vec<f64> },
}

impl NtScaling {
    pub(crate) fn compute(cone: Cone, s: &[f64], z: &[f64]) -> Self {
        match cone {
            Cone::Zero(_) => NtScaling::Zero,
            Cone::NonNeg(_) => NtScaling::NonNeg {
                w: s.iter().zip(z).map(|(a, b)| (a / b).sqrt()).collect(),
            },
            Cone::Soc(_) => {
                let s_res = (s[0] * s[0] - dot_tail(s, s)).max(f64::MIN_POSITIVE);
                let z_res = (z[0] * z[0] - dot_tail(z, z)).max(f64::MIN_POSITIVE);
                let sn = s_res.sqrt();
                let zn = z_res.sqrt();
                let sb: Vec<f64> = s.iter().map(|x| x / sn).collect();
                let zb: Vec<f64> = z.iter().map(|x| x / zn).collect();
                let sz: f64 = sb.iter().zip(&zb).map(|(a, b)| a * b).sum();
                let gamma = ((1.0 + sz) / 2.0).sqrt();
                let mut w = vec![0.0; s.len()];
                w[0] = (sb[0] + zb[0]) / (2.0 * gamma);
                for i in 1..s.len() {
                    w[i] = (sb[i] - zb[i]) / (2.0 * gamma);
                }
                // Re-normalize so that w lies on the unit hyperboloid.
                let tail = dot_tail(&w, &w);
                w[0] = (1.0 + tail).sqrt();
                NtScaling::Soc { eta: (sn / zn).sqrt(), w }
            }
        }
    }

    /// `out = W v`
    pub(crate) fn apply(&self, v: &[f64], out: &mut [f64]) {
        match self {
            NtScaling::Zero => {}
            NtScaling::NonNeg { w } => {
                for i in 0..v.len() {
                    out[i] = w[i] * v[i];
                }
            }
            NtScaling::Soc { eta, w } => {
                let w1v1 = dot_tail(w, v);
                out[0] = eta * (w[0] * v[0] + w1v1);
                let coef = v[0] + w1v1 / (1.0 + w[0]);
                for i in 1..v.len() {
                    out[i] = eta * (v[i] + coef * w[i]);
                }
            }
        }
    }

    /// `out = W⁻¹ v`
    pub(crate) fn apply_inv(&self, v: &[f64], out: &mut [f64]) {
        match self {
            NtScaling::Zero => {}
            NtScaling::NonNeg { w } => {
                for i in 0..v.len() {
                    out[i] = v[i] / w[i];
                }
            }
            NtScaling::Soc { eta, w } => {
                let w1v1 = dot_tail(w, v);
                out[0] = (w[0] * v[0] - w1v1) / eta;
                let coef = -v[0] + w1v1 / (1.0 + w[0]);
                for i in 1..v.len() {
                    out[i] = (v[i] + coef * w[i]) / eta;
                }
            }
        }
    }

    /// Dense `W²` for the block, row-major.
    pub(crate) fn squared(&self, dim: usize) -> Vec<f64> {
        match self {
            NtScaling::Zero => Vec::new(),
            NtScaling::NonNeg { w } => {
                let mut m = vec![0.0; dim * dim];
                for i in 0..dim {
                    m[i * dim + i] = w[i] * w[i];
                }
                m
            }
            NtScaling::Soc { .. } => {
                let mut wm = vec![0.0; dim * dim];
                let mut e = vec![0.0; dim];
                let mut col = vec![0.0; dim];
                for j in 0..dim {
                    e.iter_mut().for_each(|x| *x = 0.0);
                    e[j] = 1.0;
                    self.apply(&e, &mut col);
                    for i in 0..dim {
                        wm[i * dim + j] = col[i];
                    }
                }
                let mut m = vec![0.0; dim * dim];
                for i in 0..dim {
                    for j in 0..dim {
                        m[i * dim + j] = (0..dim).map(|k| wm[i * dim + k] * wm[k * dim + j]).sum();
                    }
                }
                m
            }
        }
    }
}

fn dot_tail(a: &[f64], b: &[f64]) -> f64 {
    a[1..].iter().zip(&b[1..]).map(|(x, y)| x * y).sum()
}
