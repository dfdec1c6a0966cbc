//! Time-decoupled AC restoration: with battery active powers fixed, each step
//! re-optimizes battery reactive power and solar output against exact power
//! flow. Steps share no data, so they run in any order or in parallel.

use thiserror::Error;

use crate::network::{Feeder, ForecastSeries, C64};
use crate::powerflow::{diag_losses, sweep, PowerFlowResult, SweepConfig};
use crate::schedule::DispatchSchedule;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RestoreConfig {
    /// Central-difference step in pu.
    pub fd_step: f64,
    /// Weight of the exterior quadratic penalty on voltage and line limits.
    pub penalty: f64,
    /// Penalty doublings applied while limits remain violated.
    pub continuation: usize,
    pub ineq_tol: f64,
    /// Stop once an accepted step improves the objective by less than this.
    pub improve_tol: f64,
    pub max_iter: usize,
    /// Re-optimize solar active power too; otherwise only its reactive power.
    pub solar_active: bool,
    pub sweep: SweepConfig,
}

impl Default for RestoreConfig {
    fn default() -> Self {
        Self {
            fd_step: 1e-5,
            penalty: 1e4,
            continuation: 1,
            ineq_tol: 1e-6,
            improve_tol: 1e-10,
            max_iter: 200,
            solar_active: true,
            sweep: SweepConfig::default(),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RestoreError {
    #[error("power flow diverged at step {t}")]
    PowerFlowDiverged { t: usize },
    #[error("no point satisfying the limits found at step {t} (worst violation {violation:e})")]
    InfeasibleAtFixedP {
        t: usize,
        violation: f64,
        best: Box<StepRestore>,
    },
    #[error("relaxed optimum {socp} exceeds restored optimum {dnlp}")]
    OrderingViolated { socp: f64, dnlp: f64 },
    #[error("gap needs finite values and a positive restored optimum (got {socp}, {dnlp})")]
    InvalidGapInput { socp: f64, dnlp: f64 },
    #[error("schedule covers {got} steps, forecast {expected}")]
    HorizonMismatch { got: usize, expected: usize },
}

/// Limit violations at a power-flow state, in pu.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Violations {
    /// `(node, phase, amount)` below `v_min` (negative) or above `v_max`.
    pub voltage: Vec<(usize, usize, f64)>,
    /// `(branch, phase, amount)` above `s_max`.
    pub line: Vec<(usize, usize, f64)>,
}

impl Violations {
    pub fn worst(&self) -> f64 {
        self.voltage
            .iter()
            .chain(&self.line)
            .fold(0.0, |m: f64, &(_, _, v)| m.max(v.abs()))
    }
}

/// Restored set-points and exact state of one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRestore {
    pub t: usize,
    pub p_dis: Vec<[f64; 3]>,
    pub p_ch: Vec<[f64; 3]>,
    pub q_bat: Vec<[f64; 3]>,
    pub p_sol: Vec<[f64; 3]>,
    pub q_sol: Vec<[f64; 3]>,
    pub power_flow: PowerFlowResult,
    /// `Σ R_φφ |i_φ|²` at the restored point.
    pub losses: f64,
    /// Same functional at the projected starting point.
    pub initial_losses: f64,
    pub violations: Violations,
    pub feasible: bool,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RestoreResult {
    pub steps: Vec<Result<StepRestore, RestoreError>>,
}

impl RestoreResult {
    pub fn all_ok(&self) -> bool {
        self.steps.iter().all(Result::is_ok)
    }

    /// `Σ_t` restored losses, if every step succeeded.
    pub fn dnlp_opt(&self) -> Option<f64> {
        self.steps.iter().map(|s| s.as_ref().ok().map(|s| s.losses)).sum()
    }

    /// `base` with the restored set-points and exact voltage magnitudes
    /// written over the successful steps.
    pub fn apply_to(&self, base: &DispatchSchedule) -> DispatchSchedule {
        let mut s = base.clone();
        for r in self.steps.iter().flatten() {
            let t = r.t;
            s.q_bat[t] = r.q_bat.clone();
            s.p_sol[t] = r.p_sol.clone();
            s.q_sol[t] = r.q_sol.clone();
            s.voltage[t] = r.power_flow.voltages.iter().map(|v| [v[0].norm(), v[1].norm(), v[2].norm()]).collect();
        }
        s
    }
}

#[derive(Debug, Clone, Copy)]
enum Slot {
    /// Battery reactive power in `[−r, r]`.
    BatQ { node: usize, phase: usize, r: f64 },
    /// Solar `(p, q)` on the half-disc `p ≥ 0, p² + q² ≤ cap²`.
    Solar { node: usize, phase: usize, cap: f64 },
    /// Solar reactive power with active power fixed.
    SolarQ { node: usize, phase: usize, r: f64 },
}

struct StepProblem<'a> {
    feeder: &'a Feeder,
    t: usize,
    load: &'a [[C64; 3]],
    p_net: Vec<[f64; 3]>,
    p_sol_fixed: Vec<[f64; 3]>,
    slots: Vec<Slot>,
    cfg: &'a RestoreConfig,
}

impl StepProblem<'_> {
    fn dim(&self) -> usize {
        self.slots
            .iter()
            .map(|s| if matches!(s, Slot::Solar { .. }) { 2 } else { 1 })
            .sum()
    }

    fn project(&self, x: &mut [f64]) {
        let mut k = 0;
        for s in &self.slots {
            match *s {
                Slot::BatQ { r, .. } | Slot::SolarQ { r, .. } => {
                    x[k] = x[k].clamp(-r, r);
                    k += 1;
                }
                Slot::Solar { cap, .. } => {
                    let p = x[k].max(0.0);
                    let q = x[k + 1];
                    let norm = p.hypot(q);
                    let scale = if norm > cap { cap / norm } else { 1.0 };
                    x[k] = p * scale;
                    x[k + 1] = q * scale;
                    k += 2;
                }
            }
        }
    }

    /// `(q_bat, p_sol, q_sol)` per node.
    fn setpoints(&self, x: &[f64]) -> (Vec<[f64; 3]>, Vec<[f64; 3]>, Vec<[f64; 3]>) {
        let n = self.feeder.nodes.len();
        let mut qb = vec![[0.0; 3]; n];
        let mut ps = self.p_sol_fixed.clone();
        let mut qs = vec![[0.0; 3]; n];
        let mut k = 0;
        for s in &self.slots {
            match *s {
                Slot::BatQ { node, phase, .. } => {
                    qb[node][phase] = x[k];
                    k += 1;
                }
                Slot::Solar { node, phase, .. } => {
                    ps[node][phase] = x[k];
                    qs[node][phase] = x[k + 1];
                    k += 2;
                }
                Slot::SolarQ { node, phase, .. } => {
                    qs[node][phase] = x[k];
                    k += 1;
                }
            }
        }
        (qb, ps, qs)
    }

    fn flow(&self, x: &[f64]) -> Option<PowerFlowResult> {
        let (qb, ps, qs) = self.setpoints(x);
        let inj: Vec<[C64; 3]> = (0..self.feeder.nodes.len())
            .map(|i| {
                let mut s = [C64::new(0.0, 0.0); 3];
                for p in 0..3 {
                    s[p] = -self.load[i][p] + C64::new(self.p_net[i][p] + ps[i][p], qb[i][p] + qs[i][p]);
                }
                s
            })
            .collect();
        sweep(self.feeder, &inj, &self.cfg.sweep).ok()
    }

    fn violations(&self, pf: &PowerFlowResult) -> Violations {
        let mut v = Violations::default();
        for (i, node) in self.feeder.nodes.iter().enumerate() {
            for p in node.phases.phases() {
                let m = pf.voltages[i][p].norm();
                if m < node.v_min {
                    v.voltage.push((i, p, m - node.v_min));
                } else if m > node.v_max {
                    v.voltage.push((i, p, m - node.v_max));
                }
            }
        }
        for (b, br) in self.feeder.branches.iter().enumerate() {
            for p in br.phases.phases() {
                let over = pf.flows[b][p].norm() - br.s_max;
                if over > 0.0 {
                    v.line.push((b, p, over));
                }
            }
        }
        v
    }

    fn objective(&self, x: &[f64], weight: f64) -> f64 {
        match self.flow(x) {
            Some(pf) => {
                let viol = self.violations(&pf);
                let pen: f64 = viol.voltage.iter().chain(&viol.line).map(|&(_, _, a)| a * a).sum();
                diag_losses(self.feeder, &pf) + weight * pen
            }
            None => f64::INFINITY,
        }
    }

    fn gradient(&self, x: &[f64], weight: f64) -> Vec<f64> {
        let h = self.cfg.fd_step;
        let mut g = vec![0.0; x.len()];
        let mut y = x.to_vec();
        for k in 0..x.len() {
            y[k] = x[k] + h;
            let fp = self.objective(&y, weight);
            y[k] = x[k] - h;
            let fm = self.objective(&y, weight);
            y[k] = x[k];
            g[k] = (fp - fm) / (2.0 * h);
            if !g[k].is_finite() {
                g[k] = 0.0;
            }
        }
        g
    }

    /// Projected gradient with Armijo backtracking. Returns iterations used.
    fn descend(&self, x: &mut Vec<f64>, weight: f64, budget: usize) -> usize {
        const ARMIJO: f64 = 1e-4;
        let mut f = self.objective(x, weight);
        let mut step = 1.0;
        for it in 0..budget {
            let g = self.gradient(x, weight);
            let mut accepted = None;
            for _ in 0..60 {
                let mut xn: Vec<f64> = x.iter().zip(&g).map(|(a, b)| a - step * b).collect();
                self.project(&mut xn);
                let decrease: f64 = g.iter().zip(x.iter().zip(&xn)).map(|(gi, (a, b))| gi * (a - b)).sum();
                if decrease <= 0.0 {
                    break;
                }
                let fnew = self.objective(&xn, weight);
                if fnew <= f - ARMIJO * decrease {
                    accepted = Some((xn, fnew));
                    break;
                }
                step *= 0.5;
            }
            let Some((xn, fnew)) = accepted else { return it };
            let gain = f - fnew;
            *x = xn;
            f = fnew;
            step = (step * 2.0).min(1e3);
            if gain < self.cfg.improve_tol {
                return it + 1;
            }
        }
        budget
    }
}

/// Restores step `t` of `schedule`. The battery active powers are taken as
/// fixed; battery reactive power and solar output start from the schedule's
/// values projected onto the inverter limits.
pub fn restore_timestep(
    feeder: &Feeder,
    forecast: &ForecastSeries,
    schedule: &DispatchSchedule,
    t: usize,
    cfg: &RestoreConfig,
) -> Result<StepRestore, RestoreError> {
    let n = feeder.nodes.len();
    let mut p_net = vec![[0.0; 3]; n];
    let mut slots = Vec::new();
    let mut x0 = Vec::new();
    let mut p_sol_fixed = vec![[0.0; 3]; n];
    for (k, bat) in feeder.battery_nodes() {
        for p in bat.phases.phases() {
            let net = schedule.net_battery(t, k, p);
            p_net[k][p] = net;
            let r = (bat.h_max * bat.h_max - net * net).max(0.0).sqrt();
            slots.push(Slot::BatQ { node: k, phase: p, r });
            x0.push(schedule.q_bat[t][k][p]);
        }
    }
    for (k, sol) in feeder.solar_nodes() {
        for p in sol.phases.phases() {
            let cap = sol.g_max.min(forecast.solar[t][k][p]);
            if cap <= 0.0 {
                continue;
            }
            if cfg.solar_active {
                slots.push(Slot::Solar { node: k, phase: p, cap });
                x0.push(schedule.p_sol[t][k][p]);
                x0.push(schedule.q_sol[t][k][p]);
            } else {
                let ps = schedule.p_sol[t][k][p].clamp(0.0, cap);
                p_sol_fixed[k][p] = ps;
                slots.push(Slot::SolarQ {
                    node: k,
                    phase: p,
                    r: (cap * cap - ps * ps).max(0.0).sqrt(),
                });
                x0.push(schedule.q_sol[t][k][p]);
            }
        }
    }
    let prob = StepProblem {
        feeder,
        t,
        load: &forecast.load[t],
        p_net,
        p_sol_fixed,
        slots,
        cfg,
    };
    debug_assert_eq!(prob.dim(), x0.len());
    let mut x = x0;
    prob.project(&mut x);
    let init = prob.flow(&x).ok_or(RestoreError::PowerFlowDiverged { t })?;
    let initial_losses = diag_losses(feeder, &init);

    let mut weight = cfg.penalty;
    let mut iterations = 0;
    if !x.is_empty() {
        iterations += prob.descend(&mut x, weight, cfg.max_iter);
        for _ in 0..cfg.continuation {
            let pf = prob.flow(&x).ok_or(RestoreError::PowerFlowDiverged { t })?;
            if prob.violations(&pf).worst() <= cfg.ineq_tol {
                break;
            }
            weight *= 2.0;
            iterations += prob.descend(&mut x, weight, cfg.max_iter);
        }
    }
    let pf = prob.flow(&x).ok_or(RestoreError::PowerFlowDiverged { t })?;
    let violations = prob.violations(&pf);
    let (q_bat, p_sol, q_sol) = prob.setpoints(&x);
    let worst = violations.worst();
    let feasible = worst <= cfg.ineq_tol;
    let step = StepRestore {
        t: prob.t,
        p_dis: schedule.p_dis[t].clone(),
        p_ch: schedule.p_ch[t].clone(),
        q_bat,
        p_sol,
        q_sol,
        losses: diag_losses(feeder, &pf),
        power_flow: pf,
        initial_losses,
        violations,
        feasible,
        iterations,
    };
    if feasible {
        Ok(step)
    } else {
        Err(RestoreError::InfeasibleAtFixedP {
            t,
            violation: worst,
            best: Box::new(step),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    Serial,
    /// Falls back to serial when built without the `parallel` feature.
    #[default]
    Parallel,
}

pub fn restore_horizon(
    feeder: &Feeder,
    forecast: &ForecastSeries,
    schedule: &DispatchSchedule,
    cfg: &RestoreConfig,
) -> Result<RestoreResult, RestoreError> {
    restore_horizon_with(feeder, forecast, schedule, cfg, Execution::default())
}

pub fn restore_horizon_with(
    feeder: &Feeder,
    forecast: &ForecastSeries,
    schedule: &DispatchSchedule,
    cfg: &RestoreConfig,
    exec: Execution,
) -> Result<RestoreResult, RestoreError> {
    if schedule.steps() != forecast.len() {
        return Err(RestoreError::HorizonMismatch {
            got: schedule.steps(),
            expected: forecast.len(),
        });
    }
    let one = |t: usize| restore_timestep(feeder, forecast, schedule, t, cfg);
    let steps = match exec {
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            (0..schedule.steps()).into_par_iter().map(one).collect()
        }
        _ => (0..schedule.steps()).map(one).collect(),
    };
    Ok(RestoreResult { steps })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapReport {
    pub socp_opt: f64,
    pub dnlp_opt: f64,
    pub gap_pct: f64,
}

/// `(DNLP − SOCP) / DNLP × 100`, rejecting `DNLP < SOCP − gap_tol`.
pub fn gap(socp_opt: f64, dnlp_opt: f64, gap_tol: f64) -> Result<GapReport, RestoreError> {
    if !(socp_opt.is_finite() && dnlp_opt.is_finite() && dnlp_opt > 0.0) {
        return Err(RestoreError::InvalidGapInput {
            socp: socp_opt,
            dnlp: dnlp_opt,
        });
    }
    if dnlp_opt < socp_opt - gap_tol {
        return Err(RestoreError::OrderingViolated {
            socp: socp_opt,
            dnlp: dnlp_opt,
        });
    }
    Ok(GapReport {
        socp_opt,
        dnlp_opt,
        gap_pct: (dnlp_opt - socp_opt) / dnlp_opt * 100.0,
    })
}
