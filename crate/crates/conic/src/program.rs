use crate::cones::Cone;
use crate::sparse::CscMatrix;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ProgramError {
    #[error("cone dimensions sum to {cones} but the constraint matrix has {rows} rows")]
    ConeRowMismatch { cones: usize, rows: usize },
    #[error("objective has {got} entries, expected {expected}")]
    ObjectiveLength { got: usize, expected: usize },
    #[error("right-hand side has {got} entries, expected {expected}")]
    RhsLength { got: usize, expected: usize },
    #[error("second-order cone block {index} has dimension {dim}; need at least 1")]
    EmptySoc { index: usize, dim: usize },
    #[error("non-finite data in {0}")]
    NonFinite(&'static str),
}

/// A conic program in standard form:
///
/// ```text
/// minimize    cᵀx + c0
/// subject to  A x + s = b,   s ∈ K = K₁ × … × Kₚ
/// ```
///
/// The cone blocks in `cones` cover the rows of `A` in order. The dual is
/// `maximize −bᵀz + c0` subject to `Aᵀz + c = 0`, `z ∈ K*`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConeProgram {
    pub c: Vec<f64>,
    pub c0: f64,
    pub a: CscMatrix,
    pub b: Vec<f64>,
    pub cones: Vec<Cone>,
}

impl ConeProgram {
    pub fn new(c: Vec<f64>, c0: f64, a: CscMatrix, b: Vec<f64>, cones: Vec<Cone>) -> Result<Self, ProgramError> {
        let p = Self { c, c0, a, b, cones };
        p.validate()?;
        Ok(p)
    }

    pub fn num_vars(&self) -> usize {
        self.a.ncols
    }

    pub fn num_rows(&self) -> usize {
        self.a.nrows
    }

    pub fn validate(&self) -> Result<(), ProgramError> {
        let total: usize = self.cones.iter().map(Cone::dim).sum();
        if total != self.a.nrows {
            return Err(ProgramError::ConeRowMismatch {
                cones: total,
                rows: self.a.nrows,
            });
        }
        if self.c.len() != self.a.ncols {
            return Err(ProgramError::ObjectiveLength {
                got: self.c.len(),
                expected: self.a.ncols,
            });
        }
        if self.b.len() != self.a.nrows {
            return Err(ProgramError::RhsLength {
                got: self.b.len(),
                expected: self.a.nrows,
            });
        }
        for (index, cone) in self.cones.iter().enumerate() {
            if let Cone::Soc(dim) = *cone {
                if dim == 0 {
                    return Err(ProgramError::EmptySoc { index, dim });
                }
            }
        }
        if !self.c.iter().chain(&self.b).chain(&self.a.nzval).all(|v| v.is_finite()) || !self.c0.is_finite() {
            return Err(ProgramError::NonFinite("problem data"));
        }
        Ok(())
    }

    /// Row ranges of each cone block.
    pub fn cone_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let mut start = 0;
        self.cones
            .iter()
            .map(|c| {
                let r = start..start + c.dim();
                start += c.dim();
                r
            })
            .collect()
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        crate::sparse::dot(&self.c, x) + self.c0
    }

    /// Returns a copy with the objective multiplied by `factor`.
    pub fn with_scaled_objective(&self, factor: f64) -> Self {
        let mut p = self.clone();
        p.c.iter_mut().for_each(|v| *v *= factor);
        p.c0 *= factor;
        p
    }
}

/// Incremental row-wise builder for [`ConeProgram`].
#[derive(Debug, Default, Clone)]
pub struct ProgramBuilder {
    num_vars: usize,
    c: Vec<f64>,
    c0: f64,
    triplets: Vec<(usize, usize, f64)>,
    b: Vec<f64>,
    cones: Vec<Cone>,
}

impl ProgramBuilder {
    pub fn new(num_vars: usize) -> Self {
        Self {
            num_vars,
            c: vec![0.0; num_vars],
            ..Default::default()
        }
    }

    pub fn add_var(&mut self) -> usize {
        self.num_vars += 1;
        self.c.push(0.0);
        self.num_vars - 1
    }

    pub fn num_vars(&self) -> usize {
        self.num_vars
    }

    pub fn num_rows(&self) -> usize {
        self.b.len()
    }

    pub fn add_objective(&mut self, var: usize, coef: f64) {
        self.c[var] += coef;
    }

    pub fn add_objective_constant(&mut self, v: f64) {
        self.c0 += v;
    }

    /// Appends a cone block whose slack rows are the affine expressions
    /// `s_k = constant_k + Σ coef · x`.
    pub fn add_block(&mut self, cone: Cone, rows: &[(f64, Vec<(usize, f64)>)]) -> std::ops::Range<usize> {
        assert_eq!(cone.dim(), rows.len());
        let start = self.b.len();
        for (constant, terms) in rows {
            let r = self.b.len();
            // s = b - A x  ⇒  A = -coef, b = constant
            for &(var, coef) in terms {
                assert!(var < self.num_vars, "variable {var} not declared");
                self.triplets.push((r, var, -coef));
            }
            self.b.push(*constant);
        }
        self.cones.push(cone);
        start..self.b.len()
    }

    pub fn build(self) -> Result<ConeProgram, ProgramError> {
        let a = CscMatrix::from_triplets(self.b.len(), self.num_vars, &self.triplets);
        ConeProgram::new(self.c, self.c0, a, self.b, merge_adjacent(self.cones))
    }
}

/// Merges adjacent zero / nonnegative blocks; second-order blocks stay separate.
fn merge_adjacent(cones: Vec<Cone>) -> Vec<Cone> {
    let mut out: Vec<Cone> = Vec::with_capacity(cones.len());
    for c in cones {
        match (out.last_mut(), c) {
            (Some(Cone::Zero(d)), Cone::Zero(e)) => *d += e,
            (Some(Cone::NonNeg(d)), Cone::NonNeg(e)) => *d += e,
            _ => out.push(c),
        }
    }
    out
}
