//! Three-phase forward-backward sweep for radial feeders with constant-power
//! injections.

use thiserror::Error;

use crate::network::{nominal_voltage, Feeder, ForecastSeries, C64};
use crate::schedule::DispatchSchedule;

/// Net complex injection per node and phase (loads negative).
pub type InjectionSet = Vec<[C64; 3]>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepConfig {
    /// Tolerance on the summed nodal power mismatch.
    pub pf_tol: f64,
    pub max_iter: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            pf_tol: 1e-9,
            max_iter: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PowerFlowResult {
    pub voltages: Vec<[C64; 3]>,
    /// Phase currents per branch, flowing away from the slack.
    pub currents: Vec<[C64; 3]>,
    /// Sending-end complex power per branch and phase.
    pub flows: Vec<[C64; 3]>,
    /// Total real losses `Σ Re((V_from − V_to)·i*)`.
    pub losses: f64,
    /// Complex power drawn from the slack bus, including the slack's own load.
    pub head_power: C64,
    /// Summed nodal power mismatch at the returned state.
    pub mismatch: f64,
    pub converged: bool,
    pub iterations: usize,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PowerFlowError {
    #[error("sweep did not converge in {iterations} iterations (mismatch {mismatch:e})")]
    NotConverged { iterations: usize, mismatch: f64 },
    #[error("injection set covers {got} nodes, feeder has {expected}")]
    SizeMismatch { got: usize, expected: usize },
}

/// Runs the sweep and reports non-convergence as an error.
pub fn sweep(feeder: &Feeder, injections: &InjectionSet, cfg: &SweepConfig) -> Result<PowerFlowResult, PowerFlowError> {
    let r = sweep_from(feeder, injections, cfg, None)?;
    if r.converged {
        Ok(r)
    } else {
        Err(PowerFlowError::NotConverged {
            iterations: r.iterations,
            mismatch: r.mismatch,
        })
    }
}

/// Sweep from an optional initial voltage field; the returned result carries
/// its own `converged` flag.
pub fn sweep_from(
    feeder: &Feeder,
    injections: &InjectionSet,
    cfg: &SweepConfig,
    init: Option<&[[C64; 3]]>,
) -> Result<PowerFlowResult, PowerFlowError> {
    let n = feeder.nodes.len();
    if injections.len() != n {
        return Err(PowerFlowError::SizeMismatch {
            got: injections.len(),
            expected: n,
        });
    }
    let zero = C64::new(0.0, 0.0);
    let nominal = nominal_voltage();
    let mut v: Vec<[C64; 3]> = match init {
        Some(v0) => v0.to_vec(),
        None => feeder
            .nodes
            .iter()
            .map(|node| {
                let mut x = [zero; 3];
                for p in node.phases.phases() {
                    x[p] = nominal[p];
                }
                x
            })
            .collect(),
    };
    for p in 0..3 {
        v[feeder.slack][p] = if feeder.nodes[feeder.slack].phases.has(p) { nominal[p] } else { zero };
    }
    let order = feeder.topo_order();
    let mut cur = vec![[zero; 3]; feeder.branches.len()];
    let mut mismatch = f64::INFINITY;
    let mut iterations = 0;
    while iterations < cfg.max_iter {
        iterations += 1;
        // Backward: load currents at the present voltages, summed leaf to root.
        for &k in order.iter().rev() {
            let br = &feeder.branches[k];
            let mut i = [zero; 3];
            for p in br.phases.phases() {
                i[p] = (-injections[br.to][p] / v[br.to][p]).conj();
                for &c in feeder.child_branches(br.to) {
                    i[p] += cur[c][p];
                }
            }
            cur[k] = i;
        }
        // Forward: KVL root to leaf.
        for &k in order {
            let br = &feeder.branches[k];
            let mut vt = [zero; 3];
            for r in br.phases.phases() {
                let mut drop = zero;
                for c in br.phases.phases() {
                    drop += br.z[r][c] * cur[k][c];
                }
                vt[r] = v[br.from][r] - drop;
            }
            v[br.to] = vt;
        }
        mismatch = nodal_mismatch(feeder, injections, &v, &cur);
        if mismatch <= cfg.pf_tol {
            break;
        }
    }
    Ok(assemble(feeder, injections, v, cur, mismatch, iterations, mismatch <= cfg.pf_tol))
}

/// `Σ |V_m·conj(i_in − Σ i_out) + S_m|` over non-slack nodes and phases.
fn nodal_mismatch(feeder: &Feeder, injections: &InjectionSet, v: &[[C64; 3]], cur: &[[C64; 3]]) -> f64 {
    let mut total = 0.0;
    for (m, node) in feeder.nodes.iter().enumerate() {
        let Some(k) = feeder.parent_branch(m) else { continue };
        for p in node.phases.phases() {
            let mut i_net = cur[k][p];
            for &c in feeder.child_branches(m) {
                i_net -= cur[c][p];
            }
            total += (v[m][p] * i_net.conj() + injections[m][p]).norm();
        }
    }
    total
}

fn assemble(
    feeder: &Feeder,
    injections: &InjectionSet,
    voltages: Vec<[C64; 3]>,
    currents: Vec<[C64; 3]>,
    mismatch: f64,
    iterations: usize,
    converged: bool,
) -> PowerFlowResult {
    let zero = C64::new(0.0, 0.0);
    let mut flows = vec![[zero; 3]; feeder.branches.len()];
    let mut losses = 0.0;
    for (k, br) in feeder.branches.iter().enumerate() {
        for p in br.phases.phases() {
            flows[k][p] = voltages[br.from][p] * currents[k][p].conj();
            losses += ((voltages[br.from][p] - voltages[br.to][p]) * currents[k][p].conj()).re;
        }
    }
    let s = feeder.slack;
    let mut head_power = zero;
    for p in feeder.nodes[s].phases.phases() {
        head_power -= injections[s][p];
        for &c in feeder.child_branches(s) {
            head_power += flows[c][p];
        }
    }
    PowerFlowResult {
        voltages,
        currents,
        flows,
        losses,
        head_power,
        mismatch,
        converged,
        iterations,
    }
}

pub fn losses(result: &PowerFlowResult) -> f64 {
    result.losses
}

/// `Σ_l Σ_φ R_φφ |i_φ|²`: the loss functional the relaxation minimizes,
/// evaluated on exact currents.
pub fn diag_losses(feeder: &Feeder, result: &PowerFlowResult) -> f64 {
    let mut total = 0.0;
    for (k, br) in feeder.branches.iter().enumerate() {
        for p in br.phases.phases() {
            total += br.z[p][p].re * result.currents[k][p].norm_sqr();
        }
    }
    total
}

#[derive(Debug, Clone, PartialEq)]
pub struct VoltageErrorReport {
    /// `|V_schedule| − |V_sweep|` per node and phase.
    pub error: Vec<[f64; 3]>,
    pub worst: f64,
    pub worst_at: Option<(usize, usize)>,
    pub sweep: PowerFlowResult,
}

/// Compares magnitudes from `expected` against a sweep of the given injections.
pub fn compare_voltages(
    feeder: &Feeder,
    expected: &[[f64; 3]],
    injections: &InjectionSet,
    cfg: &SweepConfig,
) -> Result<VoltageErrorReport, PowerFlowError> {
    let pf = sweep(feeder, injections, cfg)?;
    let mut error = vec![[0.0; 3]; feeder.nodes.len()];
    let mut worst = 0.0;
    let mut worst_at = None;
    for (i, node) in feeder.nodes.iter().enumerate() {
        for p in node.phases.phases() {
            let e = expected[i][p] - pf.voltages[i][p].norm();
            error[i][p] = e;
            if e.abs() > worst {
                worst = e.abs();
                worst_at = Some((i, p));
            }
        }
    }
    Ok(VoltageErrorReport {
        error,
        worst,
        worst_at,
        sweep: pf,
    })
}

/// Sweeps the loads plus scheduled set-points at step `t` and compares the
/// schedule's voltage magnitudes against the result.
pub fn validate_schedule(
    feeder: &Feeder,
    forecast: &ForecastSeries,
    schedule: &DispatchSchedule,
    t: usize,
    cfg: &SweepConfig,
) -> Result<VoltageErrorReport, PowerFlowError> {
    let inj = schedule.injections(forecast, t);
    compare_voltages(feeder, &schedule.voltage[t], &inj, cfg)
}

/// Injections of the bare forecast load at step `t`.
pub fn load_injections(forecast: &ForecastSeries, t: usize) -> InjectionSet {
    forecast.load[t].iter().map(|s| [-s[0], -s[1], -s[2]]).collect()
}
