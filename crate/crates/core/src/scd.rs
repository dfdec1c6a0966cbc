//! Simultaneous charge/discharge detection, exactness certificates and the
//! complementarity-enforcing fallbacks.

use std::fmt::Write as _;

use conic::{SolverConfig, Status};
use thiserror::Error;

use crate::network::{Feeder, ForecastSeries};
use crate::schedule::{DispatchSchedule, Field};
use crate::socp::{
    solve_relaxation, BuildOptions, BuilderConfig, DualBundle, Mode, ModeAssignment, ObjectiveKind, Relaxation,
    SocpError,
};

/// Default threshold on `P^d·P^c` in pu².
pub const SCD_TOL: f64 = 1e-6;
/// Numerical tolerance of the certificate inequalities.
pub const CERT_TOL: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum ScdError {
    #[error("second stage is infeasible with the first-stage charge/discharge signs")]
    SecondStageInfeasible,
    #[error("{slots} battery mode slots exceed the budget of {budget}")]
    BudgetExceeded { slots: usize, budget: usize },
    #[error("no mode pattern admits a feasible solution")]
    NoFeasiblePattern,
    #[error("solver finished with status {0:?}")]
    Solve(Status),
    #[error(transparent)]
    Build(#[from] SocpError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScdReport {
    /// `P^d·P^c` per `[t][node][phase]`.
    pub products: Field,
    /// Entries above the threshold as `(t, node, phase)`.
    pub flagged: Vec<(usize, usize, usize)>,
    /// `Σ P^d·P^c`, a proxy for the fictitious energy loss.
    pub total: f64,
    pub max: f64,
    pub clean: bool,
}

impl ScdReport {
    /// One record per flagged entry.
    pub fn to_text(&self, feeder: &Feeder) -> String {
        let mut out = format!("scd clean={} total={:e} max={:e}\n", self.clean, self.total, self.max);
        for &(t, k, p) in &self.flagged {
            let _ = writeln!(
                out,
                "scd t={t} node={} phase={} product={:e}",
                feeder.nodes[k].id,
                crate::network::phase_name(p),
                self.products[t][k][p]
            );
        }
        out
    }
}

pub fn detect_scd(schedule: &DispatchSchedule, scd_tol: f64) -> ScdReport {
    let steps = schedule.steps();
    let n = schedule.num_nodes();
    let mut products = vec![vec![[0.0; 3]; n]; steps];
    let mut flagged = Vec::new();
    let mut total = 0.0;
    let mut max: f64 = 0.0;
    for t in 0..steps {
        for k in 0..n {
            for p in 0..3 {
                let v = schedule.p_dis[t][k][p] * schedule.p_ch[t][k][p];
                products[t][k][p] = v;
                total += v;
                max = max.max(v);
                if v > scd_tol {
                    flagged.push((t, k, p));
                }
            }
        }
    }
    ScdReport {
        products,
        clean: flagged.is_empty(),
        flagged,
        total,
        max,
    }
}

/// `Γ(t) = Δt Σ_{τ≥t} (β_up(τ) − β_lo(τ))`, with `β(τ)` the multipliers of
/// the bounds on the state of charge reached after step `τ`. This is the
/// quantity that enters the `P^c`/`P^d` stationarity conditions.
pub fn gamma(duals: &DualBundle, dt: f64) -> Field {
    let steps = duals.steps();
    let n = duals.beta_up.first().map_or(0, Vec::len);
    let mut g = vec![vec![[0.0; 3]; n]; steps];
    for t in (0..steps).rev() {
        for k in 0..n {
            for p in 0..3 {
                let next = if t + 1 < steps { g[t + 1][k][p] } else { 0.0 };
                g[t][k][p] = next + dt * (duals.beta_up[t][k][p] - duals.beta_lo[t][k][p]);
            }
        }
    }
    g
}

/// Outcome of the first sufficient condition, which depends only on the
/// objective's form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum C1 {
    /// `∂f/∂P^c + ∂f/∂P^d` is the given non-negative constant.
    Holds(f64),
    /// The sum depends on the solution (state-of-charge tracking); the
    /// corollary conditions apply instead.
    NotApplicable,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CertificateReport {
    pub c1: C1,
    pub c2: bool,
    /// `Γ(t)` per `[t][node][phase]`.
    pub gamma: Field,
    /// Battery entries where `Γ(t) < α` fails.
    pub c3_violations: Vec<(usize, usize, usize)>,
    pub c3: bool,
    /// Battery entries with `λ_p < 0`.
    pub a1_violations: Vec<(usize, usize, usize)>,
    pub a1: bool,
    pub a2: bool,
    pub theorem: bool,
    pub corollary: bool,
    pub alpha: f64,
}

impl CertificateReport {
    /// The verdict that applies to the configured objective.
    pub fn exact(&self) -> bool {
        match self.c1 {
            C1::Holds(_) => self.theorem || self.corollary,
            C1::NotApplicable => self.corollary,
        }
    }

    pub fn to_text(&self, feeder: &Feeder) -> String {
        let c1 = match self.c1 {
            C1::Holds(v) => format!("holds({v})"),
            C1::NotApplicable => "n/a".into(),
        };
        let mut out = format!(
            "certificate c1={c1} c2={} c3={} a1={} a2={} theorem={} corollary={}\n",
            self.c2, self.c3, self.a1, self.a2, self.theorem, self.corollary
        );
        for &(t, k, p) in &self.c3_violations {
            let _ = writeln!(
                out,
                "c3 t={t} node={} phase={} gamma={:e} alpha={:e}",
                feeder.nodes[k].id,
                crate::network::phase_name(p),
                self.gamma[t][k][p],
                self.alpha
            );
        }
        for &(t, k, p) in &self.a1_violations {
            let _ = writeln!(out, "a1 t={t} node={} phase={}", feeder.nodes[k].id, crate::network::phase_name(p));
        }
        out
    }
}

/// `∂f/∂P^c + ∂f/∂P^d` by objective form.
pub fn c1_for(objective: &ObjectiveKind) -> C1 {
    match objective {
        ObjectiveKind::LossMin | ObjectiveKind::VoltDev { .. } | ObjectiveKind::HeadTrack { .. } => C1::Holds(0.0),
        ObjectiveKind::Degradation => C1::Holds(2.0),
        ObjectiveKind::VBTrack { .. } => C1::Holds(0.0),
        ObjectiveKind::SoCTrack { .. } => C1::NotApplicable,
    }
}

/// Evaluates the sufficient conditions for the relaxed complementarity to be
/// exact.
///
/// Summing the `P^c` and `P^d` stationarity conditions gives
/// `λc_lo + λd_lo = λc_up + λd_up + ∂f/∂P^c + ∂f/∂P^d + (α − Γ(t))(1/η_d − η_c)`,
/// so both lower-bound multipliers cannot vanish together, and the pair
/// cannot be simultaneously positive, once the first condition holds and
/// `Γ(t) < α` strictly.
pub fn check_certificates(feeder: &Feeder, cfg: &BuilderConfig, duals: &DualBundle, dt: f64) -> CertificateReport {
    let g = gamma(duals, dt);
    let alpha = cfg.alpha;
    let mut c3_violations = Vec::new();
    let mut a1_violations = Vec::new();
    for t in 0..duals.steps() {
        for (k, bat) in feeder.battery_nodes() {
            for p in bat.phases.phases() {
                if !(g[t][k][p] < alpha - CERT_TOL) {
                    c3_violations.push((t, k, p));
                }
                if duals.lambda_p[t][k][p] < -CERT_TOL {
                    a1_violations.push((t, k, p));
                }
            }
        }
    }
    let c1 = c1_for(&cfg.objective);
    let c2 = alpha > 0.0;
    let c3 = c3_violations.is_empty();
    let a1 = a1_violations.is_empty();
    CertificateReport {
        theorem: matches!(c1, C1::Holds(v) if v >= 0.0) && c2 && c3,
        corollary: a1 && c2,
        c1,
        c2,
        gamma: g,
        c3_violations,
        c3,
        a1_violations,
        a1,
        a2: c2,
        alpha,
    }
}

/// Sign rule of the second stage: `P^c = 0` where the first stage's net
/// output is non-negative, `P^d = 0` where it is negative.
pub fn sign_modes(feeder: &Feeder, first: &DispatchSchedule) -> ModeAssignment {
    let mut modes = ModeAssignment::new();
    for t in 0..first.steps() {
        for (k, bat) in feeder.battery_nodes() {
            for p in bat.phases.phases() {
                let mode = if first.net_battery(t, k, p) >= 0.0 {
                    Mode::Discharge
                } else {
                    Mode::Charge
                };
                modes.insert((t, k, p), mode);
            }
        }
    }
    modes
}

/// Re-solves with the battery modes fixed by the sign of the first stage's
/// net output. The result satisfies `P^d·P^c = 0` exactly.
pub fn two_step_enforce(
    feeder: &Feeder,
    forecast: &ForecastSeries,
    cfg: &BuilderConfig,
    opts: &BuildOptions,
    first: &DispatchSchedule,
    solver: &SolverConfig,
) -> Result<(DispatchSchedule, Relaxation), ScdError> {
    let mut opts = opts.clone();
    opts.modes = sign_modes(feeder, first);
    let relax = solve_relaxation(feeder, forecast, cfg, &opts, solver)?;
    match relax.result.status {
        Status::Optimal => {}
        Status::Infeasible => return Err(ScdError::SecondStageInfeasible),
        s => return Err(ScdError::Solve(s)),
    }
    let (schedule, _) = relax.problem.extract(&relax.result.x, &relax.result.z)?;
    Ok((schedule, relax))
}

#[derive(Debug, Clone)]
pub struct OracleResult {
    pub schedule: DispatchSchedule,
    /// Optimal value of `f` with complementarity imposed.
    pub objective: f64,
    pub patterns: usize,
    pub feasible_patterns: usize,
    pub best: ModeAssignment,
}

/// Exact optimum under complementarity by enumerating every charge/discharge
/// pattern over the battery slots and solving one relaxation per pattern.
pub fn mi_oracle(
    feeder: &Feeder,
    forecast: &ForecastSeries,
    cfg: &BuilderConfig,
    opts: &BuildOptions,
    mode_budget: usize,
    solver: &SolverConfig,
) -> Result<OracleResult, ScdError> {
    let mut slots = Vec::new();
    for t in 0..forecast.len() {
        for (k, bat) in feeder.battery_nodes() {
            for p in bat.phases.phases() {
                slots.push((t, k, p));
            }
        }
    }
    if slots.len() > mode_budget || slots.len() >= usize::BITS as usize {
        return Err(ScdError::BudgetExceeded {
            slots: slots.len(),
            budget: mode_budget,
        });
    }
    // With complementarity imposed the penalty has no role.
    let cfg = BuilderConfig {
        alpha: 0.0,
        ..cfg.clone()
    };
    let patterns = 1usize << slots.len();
    let solve_one = |mask: usize| -> Result<Option<(f64, DispatchSchedule, ModeAssignment)>, ScdError> {
        let mut o = opts.clone();
        o.modes = slots
            .iter()
            .enumerate()
            .map(|(b, &s)| (s, if mask >> b & 1 == 1 { Mode::Charge } else { Mode::Discharge }))
            .collect();
        let relax = solve_relaxation(feeder, forecast, &cfg, &o, solver)?;
        if relax.result.status != Status::Optimal {
            return Ok(None);
        }
        let (schedule, _) = relax.problem.extract(&relax.result.x, &relax.result.z)?;
        let obj = relax.problem.base_objective_value(&relax.result.x)?;
        Ok(Some((obj, schedule, o.modes)))
    };

    #[cfg(feature = "parallel")]
    let results: Vec<_> = {
        use rayon::prelude::*;
        (0..patterns).into_par_iter().map(solve_one).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let results: Vec<_> = (0..patterns).map(solve_one).collect();

    let mut best: Option<(f64, DispatchSchedule, ModeAssignment)> = None;
    let mut feasible = 0;
    for r in results {
        if let Some(cand) = r? {
            feasible += 1;
            if best.as_ref().map_or(true, |b| cand.0 < b.0) {
                best = Some(cand);
            }
        }
    }
    let (objective, schedule, best) = best.ok_or(ScdError::NoFeasiblePattern)?;
    Ok(OracleResult {
        schedule,
        objective,
        patterns,
        feasible_patterns: feasible,
        best,
    })
}
