//! Receding-horizon loop: solve, certify, enforce if needed, restore, apply
//! the first step to the plant, advance the state of charge, shift.

use std::fmt::Write as _;
use std::io;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use conic::{SolverConfig, Status};
use thiserror::Error;

use crate::network::{phase_name, scale_case, synthetic_forecast, Case, Feeder, ForecastError, ForecastSeries};
use crate::powerflow::{sweep, PowerFlowResult};
use crate::restore::{gap, restore_horizon_with, Execution, GapReport, RestoreConfig, RestoreError, StepRestore};
use crate::scd::{check_certificates, detect_scd, two_step_enforce, CertificateReport, ScdReport, SCD_TOL};
use crate::schedule::DispatchSchedule;
use crate::socp::{solve_relaxation, BuildOptions, BuilderConfig, ObjectiveKind, Relaxation};

/// Per-step wall-time budget; exceeding it is logged, not fatal.
pub const STEP_BUDGET: Duration = Duration::from_secs(60);
/// Tolerance of the SOCP ≤ DNLP ordering check.
pub const GAP_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub horizon: usize,
    /// Step length in hours.
    pub dt: f64,
    pub sim_steps: usize,
    pub case: Option<Case>,
    pub builder: BuilderConfig,
    pub solver: SolverConfig,
    pub restore: RestoreConfig,
    pub exec: Execution,
    /// Seed of the synthetic forecast.
    pub seed: u64,
    /// Minutes after midnight at which the simulation starts.
    pub start_minute: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            horizon: 30,
            dt: 1.0 / 60.0,
            sim_steps: 10,
            case: None,
            builder: BuilderConfig::default(),
            solver: SolverConfig::default(),
            restore: RestoreConfig::default(),
            exec: Execution::default(),
            seed: 1,
            start_minute: 720.0,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum DriverError {
    #[error("invalid run configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Forecast(#[from] ForecastError),
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), DriverError> {
        if self.horizon == 0 || self.sim_steps == 0 {
            return Err(DriverError::InvalidConfig("horizon and sim length must be at least 1".into()));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(DriverError::InvalidConfig(format!("dt = {}", self.dt)));
        }
        self.builder
            .validate()
            .map_err(|e| DriverError::InvalidConfig(e.to_string()))?;
        self.solver.validate().map_err(DriverError::InvalidConfig)
    }

    /// Forecast steps needed to run `sim_steps` windows of length `horizon`.
    pub fn forecast_len(&self) -> usize {
        self.sim_steps + self.horizon - 1
    }
}

/// Seeded synthetic forecast long enough for the run, scaled by the case.
pub fn prepare_forecast(feeder: &Feeder, cfg: &RunConfig) -> Result<ForecastSeries, DriverError> {
    let f = synthetic_forecast(feeder, cfg.forecast_len(), cfg.dt, cfg.start_minute, cfg.seed);
    match cfg.case {
        Some(c) => {
            let (l, s) = c.fractions();
            Ok(scale_case(&f, l, s)?)
        }
        None => Ok(f),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DriverState {
    /// Index of the next step; the forecast window starts here.
    pub k: usize,
    pub soc: Vec<[f64; 3]>,
}

impl DriverState {
    pub fn initial(feeder: &Feeder) -> Self {
        Self {
            k: 0,
            soc: feeder.initial_soc(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Fallback {
    None,
    /// Re-solved with the penalty weight raised to this value.
    RaisedAlpha(f64),
    TwoStep,
}

/// Set-points sent to the plant, `[node][phase]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Applied {
    pub p_dis: Vec<[f64; 3]>,
    pub p_ch: Vec<[f64; 3]>,
    pub q_bat: Vec<[f64; 3]>,
    pub p_sol: Vec<[f64; 3]>,
    pub q_sol: Vec<[f64; 3]>,
}

impl Applied {
    fn zeros(n: usize) -> Self {
        let z = vec![[0.0; 3]; n];
        Self {
            p_dis: z.clone(),
            p_ch: z.clone(),
            q_bat: z.clone(),
            p_sol: z.clone(),
            q_sol: z,
        }
    }

    fn from_schedule(s: &DispatchSchedule, t: usize) -> Self {
        Self {
            p_dis: s.p_dis[t].clone(),
            p_ch: s.p_ch[t].clone(),
            q_bat: s.q_bat[t].clone(),
            p_sol: s.p_sol[t].clone(),
            q_sol: s.q_sol[t].clone(),
        }
    }

    fn from_restore(r: &StepRestore) -> Self {
        Self {
            p_dis: r.p_dis.clone(),
            p_ch: r.p_ch.clone(),
            q_bat: r.q_bat.clone(),
            p_sol: r.p_sol.clone(),
            q_sol: r.q_sol.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub k: usize,
    pub status: Option<Status>,
    pub cut_rounds: usize,
    /// Augmented relaxation objective.
    pub socp_objective: Option<f64>,
    pub certificate: Option<CertificateReport>,
    /// SCD report of the first-stage schedule.
    pub scd: Option<ScdReport>,
    pub fallback: Fallback,
    /// Schedule the restoration started from (after any fallback).
    pub schedule: Option<DispatchSchedule>,
    /// Relaxed loss term summed over the window.
    pub socp_losses: Option<f64>,
    pub dnlp_opt: Option<f64>,
    /// Present only for the loss objective, where the relaxed loss term
    /// bounds the restored losses from below.
    pub gap: Option<GapReport>,
    /// Restoration of the first step.
    pub restored: Option<StepRestore>,
    pub infeasible_steps: Vec<usize>,
    pub applied: Applied,
    pub plant: Option<PowerFlowResult>,
    /// Largest `| |V_restored| − |V_plant| |`.
    pub voltage_error: Option<f64>,
    pub soc_before: Vec<[f64; 3]>,
    pub soc_after: Vec<[f64; 3]>,
    pub errors: Vec<String>,
}

impl StepRecord {
    pub fn failed(&self) -> bool {
        !self.errors.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepTiming {
    /// Build, solve and fallback re-solves.
    pub socp: Duration,
    pub restore: Duration,
    pub total: Duration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub mean_socp_secs: f64,
    pub std_socp_secs: f64,
    /// `sqrt(mean(gap_pct²))` over steps with a gap.
    pub rmse_gap_pct: Option<f64>,
    pub worst_gap_pct: Option<f64>,
    pub failed_steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub records: Vec<StepRecord>,
    /// Kept apart from the records so that repeated runs compare equal.
    pub timing: Vec<StepTiming>,
    pub summary: Summary,
}

impl RunLog {
    pub fn all_ok(&self) -> bool {
        self.summary.failed_steps == 0
    }
}

fn clean_schedule(r: &Relaxation) -> Result<(DispatchSchedule, crate::socp::DualBundle), String> {
    if r.result.status != Status::Optimal {
        return Err(format!("relaxation finished with {:?}", r.result.status));
    }
    r.problem.extract(&r.result.x, &r.result.z).map_err(|e| e.to_string())
}

/// One receding-horizon step starting at `state.k`.
pub fn step(
    feeder: &Feeder,
    forecast: &ForecastSeries,
    state: &DriverState,
    cfg: &RunConfig,
) -> (DriverState, StepRecord, StepTiming) {
    let started = Instant::now();
    let n = feeder.nodes.len();
    let mut rec = StepRecord {
        k: state.k,
        status: None,
        cut_rounds: 0,
        socp_objective: None,
        certificate: None,
        scd: None,
        fallback: Fallback::None,
        schedule: None,
        socp_losses: None,
        dnlp_opt: None,
        gap: None,
        restored: None,
        infeasible_steps: Vec::new(),
        applied: Applied::zeros(n),
        plant: None,
        voltage_error: None,
        soc_before: state.soc.clone(),
        soc_after: state.soc.clone(),
        errors: Vec::new(),
    };
    let mut timing = StepTiming::default();
    let window = match forecast.window(state.k, cfg.horizon) {
        Ok(w) => w,
        Err(e) => {
            rec.errors.push(e.to_string());
            return (next(state, state.soc.clone()), rec, timing);
        }
    };
    let opts = BuildOptions {
        initial_soc: Some(state.soc.clone()),
        ..BuildOptions::default()
    };

    let t_socp = Instant::now();
    let planned = plan(feeder, &window, &opts, cfg, &mut rec);
    timing.socp = t_socp.elapsed();

    let Some((relax, schedule)) = planned else {
        timing.total = started.elapsed();
        return (next(state, state.soc.clone()), rec, timing);
    };

    let t_restore = Instant::now();
    let restored = restore_horizon_with(feeder, &window, &schedule, &cfg.restore, cfg.exec);
    timing.restore = t_restore.elapsed();

    let socp_losses: f64 = (0..cfg.horizon)
        .map(|t| relax.problem.step_losses(feeder, &relax.result.x, t))
        .sum();
    rec.socp_losses = Some(socp_losses);
    let mut applied = Applied::from_schedule(&schedule, 0);
    let mut restored_first_voltages = None;
    match restored {
        Ok(rr) => {
            for (t, s) in rr.steps.iter().enumerate() {
                match s {
                    Err(RestoreError::InfeasibleAtFixedP { best, .. }) => {
                        rec.infeasible_steps.push(t);
                        if t == 0 {
                            applied = Applied::from_restore(best);
                            restored_first_voltages = Some(best.power_flow.voltages.clone());
                        }
                    }
                    Err(e) => rec.errors.push(format!("restore t={t}: {e}")),
                    Ok(r) if t == 0 => {
                        applied = Applied::from_restore(r);
                        restored_first_voltages = Some(r.power_flow.voltages.clone());
                        rec.restored = Some(r.clone());
                    }
                    Ok(_) => {}
                }
            }
            rec.dnlp_opt = rr.dnlp_opt();
            if let (Some(d), ObjectiveKind::LossMin) = (rec.dnlp_opt, &cfg.builder.objective) {
                match gap(socp_losses, d, GAP_TOL) {
                    Ok(g) => rec.gap = Some(g),
                    Err(e) => rec.errors.push(e.to_string()),
                }
            }
        }
        Err(e) => rec.errors.push(e.to_string()),
    }
    if !rec.infeasible_steps.is_empty() {
        log::warn!("step {}: restoration left limit violations at {:?}", state.k, rec.infeasible_steps);
    }
    rec.schedule = Some(schedule);

    // Plant: exact sweep on the applied set-points and the realized load.
    let plant_schedule = applied_schedule(&applied, n);
    let inj = plant_schedule.injections(&window, 0);
    match sweep(feeder, &inj, &cfg.restore.sweep) {
        Ok(pf) => {
            if let Some(v) = &restored_first_voltages {
                let mut worst: f64 = 0.0;
                for (a, b) in v.iter().zip(&pf.voltages) {
                    for p in 0..3 {
                        worst = worst.max((a[p].norm() - b[p].norm()).abs());
                    }
                }
                rec.voltage_error = Some(worst);
            }
            rec.plant = Some(pf);
        }
        Err(e) => rec.errors.push(format!("plant sweep: {e}")),
    }

    let soc = advance_soc(feeder, &state.soc, &applied, cfg.dt, state.k);
    rec.soc_after = soc.clone();
    rec.applied = applied;
    timing.total = started.elapsed();
    if timing.total > STEP_BUDGET {
        log::warn!("step {} took {:?}, over the {:?} budget", state.k, timing.total, STEP_BUDGET);
    }
    (next(state, soc), rec, timing)
}

fn next(state: &DriverState, soc: Vec<[f64; 3]>) -> DriverState {
    DriverState { k: state.k + 1, soc }
}

/// Solves the window and applies the fallback chain when the relaxed
/// schedule charges and discharges at once.
fn plan(
    feeder: &Feeder,
    window: &ForecastSeries,
    opts: &BuildOptions,
    cfg: &RunConfig,
    rec: &mut StepRecord,
) -> Option<(Relaxation, DispatchSchedule)> {
    let relax = match solve_relaxation(feeder, window, &cfg.builder, opts, &cfg.solver) {
        Ok(r) => r,
        Err(e) => {
            rec.errors.push(e.to_string());
            return None;
        }
    };
    rec.status = Some(relax.result.status);
    rec.cut_rounds = relax.rounds;
    let (schedule, duals) = match clean_schedule(&relax) {
        Ok(s) => s,
        Err(e) => {
            rec.errors.push(e);
            return None;
        }
    };
    rec.socp_objective = Some(relax.result.objective);
    rec.certificate = Some(check_certificates(feeder, &cfg.builder, &duals, window.dt));
    let scd = detect_scd(&schedule, SCD_TOL);
    let clean = scd.clean;
    rec.scd = Some(scd);
    if clean {
        return Some((relax, schedule));
    }

    let raised = BuilderConfig {
        alpha: if cfg.builder.alpha > 0.0 { cfg.builder.alpha * 10.0 } else { 0.1 },
        ..cfg.builder.clone()
    };
    log::info!("step {}: SCD detected, re-solving with alpha = {}", rec.k, raised.alpha);
    if let Ok(r) = solve_relaxation(feeder, window, &raised, opts, &cfg.solver) {
        if let Ok((s, _)) = clean_schedule(&r) {
            if detect_scd(&s, SCD_TOL).clean {
                rec.fallback = Fallback::RaisedAlpha(raised.alpha);
                return Some((r, s));
            }
        }
    }
    log::info!("step {}: falling back to the two-step method", rec.k);
    match two_step_enforce(feeder, window, &cfg.builder, opts, &schedule, &cfg.solver) {
        Ok((s, r)) => {
            rec.fallback = Fallback::TwoStep;
            Some((r, s))
        }
        Err(e) => {
            rec.errors.push(format!("two-step enforcement: {e}"));
            None
        }
    }
}

fn applied_schedule(a: &Applied, n: usize) -> DispatchSchedule {
    let mut s = DispatchSchedule::zeros(1, n);
    s.p_dis[0] = a.p_dis.clone();
    s.p_ch[0] = a.p_ch.clone();
    s.q_bat[0] = a.q_bat.clone();
    s.p_sol[0] = a.p_sol.clone();
    s.q_sol[0] = a.q_sol.clone();
    s
}

/// Exact battery recursion with the applied powers, clamped to the energy
/// limits against solver round-off.
fn advance_soc(feeder: &Feeder, soc: &[[f64; 3]], a: &Applied, dt: f64, k: usize) -> Vec<[f64; 3]> {
    let mut out = soc.to_vec();
    for (i, bat) in feeder.battery_nodes() {
        for p in bat.phases.phases() {
            let b = soc[i][p] + bat.eta_c * a.p_ch[i][p] * dt - a.p_dis[i][p] * dt / bat.eta_d;
            let c = b.clamp(bat.b_min, bat.b_max);
            if (c - b).abs() > 1e-9 {
                log::warn!("step {k}: state of charge at node {} clamped from {b} to {c}", feeder.nodes[i].id);
            }
            out[i][p] = c;
        }
    }
    out
}

/// Runs `cfg.sim_steps` receding-horizon steps over `forecast`, which must
/// cover [`RunConfig::forecast_len`] steps.
pub fn run(feeder: &Feeder, forecast: &ForecastSeries, cfg: &RunConfig) -> Result<RunLog, DriverError> {
    cfg.validate()?;
    if forecast.len() < cfg.forecast_len() {
        return Err(DriverError::InvalidConfig(format!(
            "forecast has {} steps, run needs {}",
            forecast.len(),
            cfg.forecast_len()
        )));
    }
    let mut state = DriverState::initial(feeder);
    let mut records = Vec::with_capacity(cfg.sim_steps);
    let mut timing = Vec::with_capacity(cfg.sim_steps);
    for _ in 0..cfg.sim_steps {
        let (s, rec, tm) = step(feeder, forecast, &state, cfg);
        log::info!(
            "step {}: status {:?} gap {:?} in {:?}",
            rec.k,
            rec.status,
            rec.gap.map(|g| g.gap_pct),
            tm.total
        );
        state = s;
        records.push(rec);
        timing.push(tm);
    }
    let summary = summarize(&records, &timing);
    Ok(RunLog {
        records,
        timing,
        summary,
    })
}

fn summarize(records: &[StepRecord], timing: &[StepTiming]) -> Summary {
    let secs: Vec<f64> = timing.iter().map(|t| t.socp.as_secs_f64()).collect();
    let n = secs.len().max(1) as f64;
    let mean = secs.iter().sum::<f64>() / n;
    let var = secs.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n;
    let gaps: Vec<f64> = records.iter().filter_map(|r| r.gap.map(|g| g.gap_pct)).collect();
    let (rmse, worst) = if gaps.is_empty() {
        (None, None)
    } else {
        let ms = gaps.iter().map(|g| g * g).sum::<f64>() / gaps.len() as f64;
        (Some(ms.sqrt()), gaps.iter().copied().reduce(f64::max))
    };
    Summary {
        mean_socp_secs: mean,
        std_socp_secs: var.sqrt(),
        rmse_gap_pct: rmse,
        worst_gap_pct: worst,
        failed_steps: records.iter().filter(|r| r.failed()).count(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportKind {
    Log,
    Soc,
    Power,
    Gap,
    Reactive,
    VoltageError,
}

impl ReportKind {
    pub const ALL: [ReportKind; 6] = [
        ReportKind::Log,
        ReportKind::Soc,
        ReportKind::Power,
        ReportKind::Gap,
        ReportKind::Reactive,
        ReportKind::VoltageError,
    ];

    pub fn file_name(self) -> &'static str {
        match self {
            ReportKind::Log => "run.log",
            ReportKind::Soc => "soc.tsv",
            ReportKind::Power => "battery_power.tsv",
            ReportKind::Gap => "gap.tsv",
            ReportKind::Reactive => "reactive.tsv",
            ReportKind::VoltageError => "voltage_error.tsv",
        }
    }
}

fn battery_slots(feeder: &Feeder) -> Vec<(usize, usize)> {
    feeder
        .battery_nodes()
        .flat_map(|(i, b)| b.phases.phases().map(move |p| (i, p)))
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.10e}"))
}

/// Structured text: a summary record followed by one record per step.
pub fn log_text(log: &RunLog, feeder: &Feeder) -> String {
    let s = &log.summary;
    let mut out = format!(
        "summary steps={} failed={} socp_mean_s={:.4} socp_std_s={:.4} rmse_gap_pct={} worst_gap_pct={}\n",
        log.records.len(),
        s.failed_steps,
        s.mean_socp_secs,
        s.std_socp_secs,
        opt(s.rmse_gap_pct),
        opt(s.worst_gap_pct)
    );
    for (r, tm) in log.records.iter().zip(&log.timing) {
        let _ = writeln!(
            out,
            "step k={} status={:?} cut_rounds={} socp_obj={} socp_losses={} dnlp={} gap_pct={} fallback={:?} socp_s={:.4} restore_s={:.4} total_s={:.4} voltage_error={} ok={}",
            r.k,
            r.status,
            r.cut_rounds,
            opt(r.socp_objective),
            opt(r.socp_losses),
            opt(r.dnlp_opt),
            opt(r.gap.map(|g| g.gap_pct)),
            r.fallback,
            tm.socp.as_secs_f64(),
            tm.restore.as_secs_f64(),
            tm.total.as_secs_f64(),
            opt(r.voltage_error),
            !r.failed()
        );
        if let Some(c) = &r.certificate {
            for line in c.to_text(feeder).lines() {
                let _ = writeln!(out, "  {line}");
            }
        }
        if let Some(scd) = &r.scd {
            for line in scd.to_text(feeder).lines() {
                let _ = writeln!(out, "  {line}");
            }
        }
        for (i, p) in battery_slots(feeder) {
            let _ = writeln!(
                out,
                "  applied node={} phase={} p_dis={:e} p_ch={:e} q={:e} soc={:e}",
                feeder.nodes[i].id,
                phase_name(p),
                r.applied.p_dis[i][p],
                r.applied.p_ch[i][p],
                r.applied.q_bat[i][p],
                r.soc_after[i][p]
            );
        }
        if !r.infeasible_steps.is_empty() {
            let _ = writeln!(out, "  restore_limit_violations t={:?}", r.infeasible_steps);
        }
        for e in &r.errors {
            let _ = writeln!(out, "  error {e}");
        }
    }
    out
}

/// Tab-separated series for one report kind.
pub fn report_text(log: &RunLog, feeder: &Feeder, kind: ReportKind) -> String {
    let slots = battery_slots(feeder);
    let label = |(i, p): (usize, usize)| format!("{}.{}", feeder.nodes[i].id, phase_name(p));
    let mut out = String::new();
    match kind {
        ReportKind::Log => return log_text(log, feeder),
        ReportKind::Soc => {
            let head: Vec<String> = slots.iter().map(|&s| label(s)).collect();
            let _ = writeln!(out, "k\t{}", head.join("\t"));
            if let Some(first) = log.records.first() {
                let row: Vec<String> = slots.iter().map(|&(i, p)| format!("{:e}", first.soc_before[i][p])).collect();
                let _ = writeln!(out, "0\t{}", row.join("\t"));
            }
            for r in &log.records {
                let row: Vec<String> = slots.iter().map(|&(i, p)| format!("{:e}", r.soc_after[i][p])).collect();
                let _ = writeln!(out, "{}\t{}", r.k + 1, row.join("\t"));
            }
        }
        ReportKind::Power => {
            let _ = writeln!(out, "k\tslot\tp_dis\tp_ch");
            for r in &log.records {
                for &(i, p) in &slots {
                    let _ = writeln!(out, "{}\t{}\t{:e}\t{:e}", r.k, label((i, p)), r.applied.p_dis[i][p], r.applied.p_ch[i][p]);
                }
            }
        }
        ReportKind::Gap => {
            let _ = writeln!(out, "k\tsocp_opt\tdnlp_opt\tgap_pct");
            for r in &log.records {
                let g = r.gap;
                let _ = writeln!(
                    out,
                    "{}\t{}\t{}\t{}",
                    r.k,
                    opt(g.map(|g| g.socp_opt)),
                    opt(g.map(|g| g.dnlp_opt)),
                    opt(g.map(|g| g.gap_pct))
                );
            }
        }
        ReportKind::Reactive => {
            let _ = writeln!(out, "k\tdevice\tslot\tq_socp\tq_restored");
            for r in &log.records {
                let Some(s) = &r.schedule else { continue };
                for (i, node) in feeder.nodes.iter().enumerate() {
                    for p in 0..3 {
                        if node.battery.as_ref().is_some_and(|b| b.phases.has(p)) {
                            let _ = writeln!(out, "{}\tbattery\t{}\t{:e}\t{:e}", r.k, label((i, p)), s.q_bat[0][i][p], r.applied.q_bat[i][p]);
                        }
                        if node.solar.as_ref().is_some_and(|b| b.phases.has(p)) {
                            let _ = writeln!(out, "{}\tsolar\t{}\t{:e}\t{:e}", r.k, label((i, p)), s.q_sol[0][i][p], r.applied.q_sol[i][p]);
                        }
                    }
                }
            }
        }
        ReportKind::VoltageError => {
            let _ = writeln!(out, "k\tworst_voltage_error\tplant_mismatch");
            for r in &log.records {
                let _ = writeln!(out, "{}\t{}\t{}", r.k, opt(r.voltage_error), opt(r.plant.as_ref().map(|p| p.mismatch)));
            }
        }
    }
    out
}

/// Writes the requested reports into `dir`, creating it if needed.
pub fn report(log: &RunLog, feeder: &Feeder, kinds: &[ReportKind], dir: &Path) -> io::Result<Vec<PathBuf>> {
    if log.records.is_empty() {
        return Err(io::Error::new(io::ErrorKind::InvalidInput, "empty run log"));
    }
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    for &k in kinds {
        let path = dir.join(k.file_name());
        std::fs::write(&path, report_text(log, feeder, k))?;
        paths.push(path);
    }
    Ok(paths)
}

/// `P^d`/`P^c` traces of a schedule over its horizon, one row per step.
pub fn schedule_tsv(schedule: &DispatchSchedule, feeder: &Feeder) -> String {
    let slots = battery_slots(feeder);
    let mut out = String::from("t");
    for &(i, p) in &slots {
        let l = format!("{}.{}", feeder.nodes[i].id, phase_name(p));
        let _ = write!(out, "\t{l}.p_dis\t{l}.p_ch\t{l}.soc");
    }
    out.push('\n');
    for t in 0..schedule.steps() {
        let _ = write!(out, "{t}");
        for &(i, p) in &slots {
            let _ = write!(
                out,
                "\t{:e}\t{:e}\t{:e}",
                schedule.p_dis[t][i][p],
                schedule.p_ch[t][i][p],
                schedule.soc[t + 1][i][p]
            );
        }
        out.push('\n');
    }
    out
}
