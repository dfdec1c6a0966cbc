//! Multi-period branch-flow SOCP relaxation.
//!
//! Hermitian matrices `W` (node) and `I` (branch) are stored as their diagonal
//! plus the real and imaginary parts of the strict upper triangle; the branch
//! power matrix `S = V i^H` is stored entrywise. Each 2×2 principal minor
//! becomes one 4-dimensional second-order cone.

use std::collections::BTreeMap;
use std::fmt;

use conic::{Cone, ConeProgram, ProgramBuilder, ProgramError, SolveResult, SolverConfig, Status};
use nalgebra::DMatrix;
use thiserror::Error;

use crate::network::{nominal_voltage, Feeder, ForecastSeries, C64};
use crate::powerflow::PowerFlowResult;
use crate::schedule::{DispatchSchedule, Field};

/// Solar availability below this is treated as no solar at all, so the
/// inverter disc never degenerates to a point.
const SOLAR_EPS: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum SocpError {
    #[error("horizon mismatch: {0}")]
    HorizonMismatch(String),
    #[error("objective {0} is missing its reference data")]
    UnsupportedObjective(String),
    #[error("invalid builder configuration: {0}")]
    InvalidConfig(String),
    #[error("vector has {got} entries, expected {expected}")]
    SizeMismatch { got: usize, expected: usize },
    #[error(transparent)]
    Program(#[from] ProgramError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BatteryModel {
    #[default]
    Exact,
    /// `B_{t+1} = η_eq B_t − Δt (P^d − P^c)`.
    Simplified,
}

impl BatteryModel {
    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "exact" => Some(Self::Exact),
            "simplified" => Some(Self::Simplified),
            _ => None,
        }
    }
}

/// Objective `f(x)`. Tracking references given as a single value are held
/// constant over the horizon.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum ObjectiveKind {
    /// `Σ R_φφ I_φφ`
    #[default]
    LossMin,
    /// `Σ (W_φφ − w_nom)²` over non-slack nodes.
    VoltDev { w_nom: f64 },
    /// `Σ_t (P₀ − P_ref,t)²`
    HeadTrack { p_ref: Vec<f64> },
    /// `Σ (P^d + P^c)`
    Degradation,
    /// `Σ (P^d − P^c − P_ref,t)²` per battery phase.
    VBTrack { p_ref: Vec<f64> },
    /// `Σ (B_T − B^d)²` per battery phase.
    SoCTrack { b_target: f64 },
}

impl ObjectiveKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::LossMin => "loss",
            Self::VoltDev { .. } => "voltdev",
            Self::HeadTrack { .. } => "headtrack",
            Self::Degradation => "degradation",
            Self::VBTrack { .. } => "vbtrack",
            Self::SoCTrack { .. } => "soctrack",
        }
    }

    /// Parses `name` or `name=v1,v2,...`: `loss`, `voltdev[=w_nom]`,
    /// `headtrack=p`, `degradation`, `vbtrack=p`, `soctrack=b`.
    pub fn parse(s: &str) -> Result<Self, SocpError> {
        let (name, arg) = match s.split_once('=') {
            Some((n, a)) => (n.trim(), Some(a)),
            None => (s.trim(), None),
        };
        let unsupported = || SocpError::UnsupportedObjective(s.to_string());
        let values = || -> Result<Vec<f64>, SocpError> {
            let a = arg.ok_or_else(unsupported)?;
            a.split(',').map(|v| v.trim().parse::<f64>().map_err(|_| unsupported())).collect()
        };
        let scalar = || -> Result<f64, SocpError> {
            match values()?.as_slice() {
                [v] => Ok(*v),
                _ => Err(unsupported()),
            }
        };
        match name.to_ascii_lowercase().as_str() {
            "loss" | "lossmin" if arg.is_none() => Ok(Self::LossMin),
            "degradation" if arg.is_none() => Ok(Self::Degradation),
            "voltdev" if arg.is_none() => Ok(Self::VoltDev { w_nom: 1.0 }),
            "voltdev" => Ok(Self::VoltDev { w_nom: scalar()? }),
            "headtrack" => Ok(Self::HeadTrack { p_ref: values()? }),
            "vbtrack" => Ok(Self::VBTrack { p_ref: values()? }),
            "soctrack" => Ok(Self::SoCTrack { b_target: scalar()? }),
            _ => Err(unsupported()),
        }
    }

    fn reference(&self, p_ref: &[f64], steps: usize) -> Result<Vec<f64>, SocpError> {
        let ok = p_ref.iter().all(|v| v.is_finite());
        match p_ref.len() {
            1 if ok => Ok(vec![p_ref[0]; steps]),
            n if ok && n >= steps && n > 0 => Ok(p_ref[..steps].to_vec()),
            _ => Err(SocpError::UnsupportedObjective(self.name().into())),
        }
    }
}

impl fmt::Display for ObjectiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuilderConfig {
    /// Weight of the `Σ P^d (1/η_d − η_c)` penalty.
    pub alpha: f64,
    pub battery_model: BatteryModel,
    pub objective: ObjectiveKind,
    /// Rounds of eigenvector cuts added by [`solve_relaxation`] on top of the
    /// 2×2-minor cones. Zero gives the plain minor relaxation.
    pub psd_cut_rounds: usize,
}

impl Default for BuilderConfig {
    fn default() -> Self {
        Self {
            alpha: 0.01,
            battery_model: BatteryModel::Exact,
            objective: ObjectiveKind::LossMin,
            psd_cut_rounds: 3,
        }
    }
}

impl BuilderConfig {
    pub fn validate(&self) -> Result<(), SocpError> {
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(SocpError::InvalidConfig(format!("alpha = {}", self.alpha)));
        }
        Ok(())
    }
}

/// Battery operating mode fixed for one `(t, node, phase)` slot. The variable
/// of the excluded direction is not created.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Mode {
    Charge,
    Discharge,
}

pub type ModeAssignment = BTreeMap<(usize, usize, usize), Mode>;

/// One complex matrix entry as an affine function of at most two variables:
/// `c + x[re] + j·sign·x[im]`.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Entry {
    re: Option<usize>,
    im: Option<usize>,
    im_sign: f64,
    c: C64,
}

impl Entry {
    const ZERO: Entry = Entry {
        re: None,
        im: None,
        im_sign: 1.0,
        c: C64 { re: 0.0, im: 0.0 },
    };

    fn constant(c: C64) -> Self {
        Self { c, ..Self::ZERO }
    }

    fn real(v: usize) -> Self {
        Self { re: Some(v), ..Self::ZERO }
    }

    fn complex(re: usize, im: usize) -> Self {
        Self {
            re: Some(re),
            im: Some(im),
            ..Self::ZERO
        }
    }

    fn conj(self) -> Self {
        Self {
            im_sign: -self.im_sign,
            c: self.c.conj(),
            ..self
        }
    }

    fn value(&self, x: &[f64]) -> C64 {
        let mut v = self.c;
        if let Some(r) = self.re {
            v.re += x[r];
        }
        if let Some(i) = self.im {
            v.im += self.im_sign * x[i];
        }
        v
    }

    fn is_var(&self) -> bool {
        self.re.is_some() || self.im.is_some()
    }
}

/// Real affine expression.
#[derive(Debug, Clone, Default, PartialEq)]
struct Lin {
    terms: Vec<(usize, f64)>,
    c: f64,
}

impl Lin {
    fn var(v: usize, coef: f64) -> Self {
        Self {
            terms: vec![(v, coef)],
            c: 0.0,
        }
    }

    fn add(&mut self, v: usize, coef: f64) {
        if coef != 0.0 {
            self.terms.push((v, coef));
        }
    }

    fn add_opt(&mut self, v: Option<usize>, coef: f64) {
        if let Some(v) = v {
            self.add(v, coef);
        }
    }

    fn eval(&self, x: &[f64]) -> f64 {
        self.c + self.terms.iter().map(|&(v, k)| k * x[v]).sum::<f64>()
    }

    fn row(&self) -> (f64, Vec<(usize, f64)>) {
        (self.c, self.terms.clone())
    }

    fn scaled(&self, k: f64) -> Self {
        Self {
            terms: self.terms.iter().map(|&(v, c)| (v, c * k)).collect(),
            c: self.c * k,
        }
    }
}

/// Complex affine expression.
#[derive(Debug, Clone, Default)]
struct CLin {
    re: Lin,
    im: Lin,
}

impl CLin {
    /// `self += coef · e`
    fn add(&mut self, coef: C64, e: &Entry) {
        let k = coef * e.c;
        self.re.c += k.re;
        self.im.c += k.im;
        if let Some(a) = e.re {
            self.re.add(a, coef.re);
            self.im.add(a, coef.im);
        }
        if let Some(b) = e.im {
            self.re.add(b, -coef.im * e.im_sign);
            self.im.add(b, coef.re * e.im_sign);
        }
    }
}

type Mat = [[Entry; 3]; 3];

const ZERO_MAT: Mat = [[Entry::ZERO; 3]; 3];

/// Addresses one scalar variable of the relaxation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VarKey {
    PDis { t: usize, node: usize, phase: usize },
    PCh { t: usize, node: usize, phase: usize },
    QBat { t: usize, node: usize, phase: usize },
    PSol { t: usize, node: usize, phase: usize },
    QSol { t: usize, node: usize, phase: usize },
    /// State of charge at the end of step `t`.
    Soc { t: usize, node: usize, phase: usize },
    SNet { t: usize, node: usize, phase: usize, imag: bool },
    W { t: usize, node: usize, i: usize, j: usize, imag: bool },
    I { t: usize, branch: usize, i: usize, j: usize, imag: bool },
    S { t: usize, branch: usize, i: usize, j: usize, imag: bool },
}

type Slots = Vec<Vec<[Option<usize>; 3]>>;

fn slots(steps: usize, n: usize) -> Slots {
    vec![vec![[None; 3]; n]; steps]
}

/// Variable and row indices of a built problem.
#[derive(Debug, Clone)]
pub struct Layout {
    w: Vec<Vec<Mat>>,
    i: Vec<Vec<Mat>>,
    s: Vec<Vec<Mat>>,
    snet: Vec<Vec<[Option<(usize, usize)>; 3]>>,
    pd: Slots,
    pc: Slots,
    qb: Slots,
    ps: Slots,
    qs: Slots,
    soc: Slots,
    /// Row of (1e) per slot; its dual is `λ_p`.
    row_real_balance: Slots,
    /// First row of the battery inverter cone.
    row_bat_cone: Slots,
    row_pd_lo: Slots,
    row_pd_up: Slots,
    row_pc_lo: Slots,
    row_pc_up: Slots,
    row_soc_up: Slots,
    row_soc_lo: Slots,
    head: Vec<Lin>,
    /// Epigraph variables `u ≥ r²` of quadratic objective terms.
    epigraphs: Vec<(usize, Lin)>,
    alpha_terms: Vec<(usize, f64)>,
}

impl Layout {
    fn slot(s: &Slots, t: usize, node: usize, phase: usize) -> Option<usize> {
        s.get(t)?.get(node)?.get(phase).copied().flatten()
    }

    fn herm(m: &[Vec<Mat>], t: usize, k: usize, i: usize, j: usize, imag: bool) -> Option<usize> {
        let e = m.get(t)?.get(k)?.get(i)?.get(j)?;
        if imag {
            if i < j {
                e.im
            } else {
                None
            }
        } else if i <= j {
            e.re
        } else {
            None
        }
    }

    pub fn index(&self, key: VarKey) -> Option<usize> {
        use VarKey::*;
        match key {
            PDis { t, node, phase } => Self::slot(&self.pd, t, node, phase),
            PCh { t, node, phase } => Self::slot(&self.pc, t, node, phase),
            QBat { t, node, phase } => Self::slot(&self.qb, t, node, phase),
            PSol { t, node, phase } => Self::slot(&self.ps, t, node, phase),
            QSol { t, node, phase } => Self::slot(&self.qs, t, node, phase),
            Soc { t, node, phase } => Self::slot(&self.soc, t, node, phase),
            SNet { t, node, phase, imag } => self
                .snet
                .get(t)?
                .get(node)?
                .get(phase)
                .copied()
                .flatten()
                .map(|(r, i)| if imag { i } else { r }),
            W { t, node, i, j, imag } => Self::herm(&self.w, t, node, i, j, imag),
            I { t, branch, i, j, imag } => Self::herm(&self.i, t, branch, i, j, imag),
            S { t, branch, i, j, imag } => {
                let e = self.s.get(t)?.get(branch)?.get(i)?.get(j)?;
                if imag {
                    e.im
                } else {
                    e.re
                }
            }
        }
    }
}

/// Row counts by kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProblemCounts {
    pub vars: usize,
    pub equality_rows: usize,
    pub inequality_rows: usize,
    pub soc_blocks: usize,
    pub soc_rows: usize,
}

impl ProblemCounts {
    pub fn linear_rows(&self) -> usize {
        self.equality_rows + self.inequality_rows
    }
}

/// A built relaxation with its layout.
#[derive(Debug, Clone)]
pub struct ConicProblem {
    pub program: ConeProgram,
    pub layout: Layout,
    pub config: BuilderConfig,
    pub steps: usize,
    pub num_nodes: usize,
    pub dt: f64,
    pub initial_soc: Vec<[f64; 3]>,
}

/// Multipliers per `[t][node][phase]`, zero where the row does not exist.
/// `beta_up[t]`/`beta_lo[t]` belong to the bounds on the state of charge at
/// the end of step `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct DualBundle {
    pub lambda_p: Field,
    pub lambda_s: Field,
    pub lambda_d_lo: Field,
    pub lambda_d_up: Field,
    pub lambda_c_lo: Field,
    pub lambda_c_up: Field,
    pub beta_up: Field,
    pub beta_lo: Field,
}

impl DualBundle {
    pub fn zeros(steps: usize, nodes: usize) -> Self {
        let f = vec![vec![[0.0; 3]; nodes]; steps];
        Self {
            lambda_p: f.clone(),
            lambda_s: f.clone(),
            lambda_d_lo: f.clone(),
            lambda_d_up: f.clone(),
            lambda_c_lo: f.clone(),
            lambda_c_up: f.clone(),
            beta_up: f.clone(),
            beta_lo: f,
        }
    }

    pub fn steps(&self) -> usize {
        self.beta_up.len()
    }
}

/// Extra inputs to [`build_with`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BuildOptions {
    /// State of charge before the first step; the feeder's `b_init` if absent.
    pub initial_soc: Option<Vec<[f64; 3]>>,
    pub modes: ModeAssignment,
    pub cuts: Vec<PsdCut>,
}

/// A valid inequality `uᴴ M u ≥ 0` on a positive semidefinite block that is
/// rank one at every exact power-flow state. `Branch` cuts act on
/// `M = [[W_from, S], [Sᴴ, I]]` with `u = (x, y)` indexed by phase; `Node`
/// cuts act on `W`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PsdCut {
    Branch { t: usize, branch: usize, u: [C64; 6] },
    Node { t: usize, node: usize, u: [C64; 3] },
}

pub fn build(feeder: &Feeder, forecast: &ForecastSeries, cfg: &BuilderConfig) -> Result<ConicProblem, SocpError> {
    build_with(feeder, forecast, cfg, &BuildOptions::default())
}

pub fn build_with(
    feeder: &Feeder,
    forecast: &ForecastSeries,
    cfg: &BuilderConfig,
    opts: &BuildOptions,
) -> Result<ConicProblem, SocpError> {
    let default_soc;
    let initial_soc: &[[f64; 3]] = match &opts.initial_soc {
        Some(s) => s,
        None => {
            default_soc = feeder.initial_soc();
            &default_soc
        }
    };
    let modes = &opts.modes;
    cfg.validate()?;
    let steps = forecast.len();
    let n = feeder.nodes.len();
    let nb = feeder.branches.len();
    if steps == 0 {
        return Err(SocpError::HorizonMismatch("empty forecast".into()));
    }
    if forecast.num_nodes() != n {
        return Err(SocpError::HorizonMismatch(format!(
            "forecast covers {} nodes, feeder has {n}",
            forecast.num_nodes()
        )));
    }
    if initial_soc.len() != n {
        return Err(SocpError::SizeMismatch {
            got: initial_soc.len(),
            expected: n,
        });
    }
    if !(forecast.dt > 0.0) {
        return Err(SocpError::HorizonMismatch(format!("step {}", forecast.dt)));
    }
    if cfg.battery_model == BatteryModel::Simplified {
        if let Some((i, _)) = feeder.battery_nodes().find(|(_, b)| b.eta_eq.is_none()) {
            return Err(SocpError::InvalidConfig(format!(
                "battery at {} has no equivalent efficiency",
                feeder.nodes[i].id
            )));
        }
    }
    let refs = match &cfg.objective {
        ObjectiveKind::HeadTrack { p_ref } | ObjectiveKind::VBTrack { p_ref } => cfg.objective.reference(p_ref, steps)?,
        ObjectiveKind::VoltDev { w_nom } if !(w_nom.is_finite() && *w_nom > 0.0) => {
            return Err(SocpError::UnsupportedObjective(cfg.objective.name().into()))
        }
        ObjectiveKind::SoCTrack { b_target } if !b_target.is_finite() => {
            return Err(SocpError::UnsupportedObjective(cfg.objective.name().into()))
        }
        _ => Vec::new(),
    };

    let dt = forecast.dt;
    let mut pb = ProgramBuilder::new(0);
    let der: Vec<bool> = feeder
        .nodes
        .iter()
        .map(|nd| nd.battery.is_some() || nd.solar.is_some())
        .collect();

    let mut lay = Layout {
        w: vec![vec![ZERO_MAT; n]; steps],
        i: vec![vec![ZERO_MAT; nb]; steps],
        s: vec![vec![ZERO_MAT; nb]; steps],
        snet: vec![vec![[None; 3]; n]; steps],
        pd: slots(steps, n),
        pc: slots(steps, n),
        qb: slots(steps, n),
        ps: slots(steps, n),
        qs: slots(steps, n),
        soc: slots(steps, n),
        row_real_balance: slots(steps, n),
        row_bat_cone: slots(steps, n),
        row_pd_lo: slots(steps, n),
        row_pd_up: slots(steps, n),
        row_pc_lo: slots(steps, n),
        row_pc_up: slots(steps, n),
        row_soc_up: slots(steps, n),
        row_soc_lo: slots(steps, n),
        head: Vec::with_capacity(steps),
        epigraphs: Vec::new(),
        alpha_terms: Vec::new(),
    };

    let v0 = nominal_voltage();
    for t in 0..steps {
        // Variables.
        for (k, node) in feeder.nodes.iter().enumerate() {
            let m = &mut lay.w[t][k];
            if k == feeder.slack {
                for i in node.phases.phases() {
                    for j in node.phases.phases() {
                        m[i][j] = Entry::constant(v0[i] * v0[j].conj());
                    }
                }
            } else {
                herm_vars(&mut pb, m, node.phases.phases().collect());
            }
            if der[k] {
                for p in node.phases.phases() {
                    lay.snet[t][k][p] = Some((pb.add_var(), pb.add_var()));
                }
            }
            if let Some(bat) = &node.battery {
                for p in bat.phases.phases() {
                    let mode = modes.get(&(t, k, p));
                    if mode != Some(&Mode::Charge) {
                        lay.pd[t][k][p] = Some(pb.add_var());
                    }
                    if mode != Some(&Mode::Discharge) {
                        lay.pc[t][k][p] = Some(pb.add_var());
                    }
                    lay.qb[t][k][p] = Some(pb.add_var());
                    lay.soc[t][k][p] = Some(pb.add_var());
                }
            }
            if let Some(sol) = &node.solar {
                for p in sol.phases.phases() {
                    if sol.g_max.min(forecast.solar[t][k][p]) > SOLAR_EPS {
                        lay.ps[t][k][p] = Some(pb.add_var());
                        lay.qs[t][k][p] = Some(pb.add_var());
                    }
                }
            }
        }
        for (b, br) in feeder.branches.iter().enumerate() {
            let ph: Vec<usize> = br.phases.phases().collect();
            herm_vars(&mut pb, &mut lay.i[t][b], ph.clone());
            for &i in &ph {
                for &j in &ph {
                    lay.s[t][b][i][j] = Entry::complex(pb.add_var(), pb.add_var());
                }
            }
        }
    }

    for t in 0..steps {
        let w = &lay.w[t];
        let im = &lay.i[t];
        let sm = &lay.s[t];
        let load = &forecast.load[t];

        let mut eq: Vec<(f64, Vec<(usize, f64)>)> = Vec::new();
        // Voltage drop along each branch.
        for (b, br) in feeder.branches.iter().enumerate() {
            let ph: Vec<usize> = br.phases.phases().collect();
            let z = &br.z;
            for (a, &i) in ph.iter().enumerate() {
                for &j in &ph[a..] {
                    let mut e = CLin::default();
                    e.add(C64::new(1.0, 0.0), &w[br.from][i][j]);
                    e.add(C64::new(-1.0, 0.0), &w[br.to][i][j]);
                    for &k in &ph {
                        e.add(-z[j][k].conj(), &sm[b][i][k]);
                        e.add(-z[i][k], &sm[b][j][k].conj());
                        for &l in &ph {
                            e.add(z[i][k] * z[j][l].conj(), &im[b][k][l]);
                        }
                    }
                    eq.push(e.re.row());
                    if i != j {
                        eq.push(e.im.row());
                    }
                }
            }
        }
        // Nodal balance at every node but the slack.
        for (k, node) in feeder.nodes.iter().enumerate() {
            let Some(b) = feeder.parent_branch(k) else { continue };
            for p in node.phases.phases() {
                let mut e = CLin::default();
                e.add(C64::new(1.0, 0.0), &sm[b][p][p]);
                for q in node.phases.phases() {
                    e.add(-feeder.branches[b].z[p][q], &im[b][q][p]);
                }
                for &c in feeder.child_branches(k) {
                    if feeder.branches[c].phases.has(p) {
                        e.add(C64::new(-1.0, 0.0), &sm[c][p][p]);
                    }
                }
                match lay.snet[t][k][p] {
                    Some((r, i)) => e.add(C64::new(1.0, 0.0), &Entry::complex(r, i)),
                    None => e.add(C64::new(1.0, 0.0), &Entry::constant(-load[k][p])),
                }
                eq.push(e.re.row());
                eq.push(e.im.row());
            }
        }
        pb.add_block(Cone::Zero(eq.len()), &eq);

        // DER balance: the real row carries −(1e) so its dual is λ_p.
        for (k, node) in feeder.nodes.iter().enumerate() {
            if !der[k] {
                continue;
            }
            for p in node.phases.phases() {
                let (sr, si) = lay.snet[t][k][p].unwrap();
                let mut re = Lin::var(sr, -1.0);
                re.c = -load[k][p].re;
                re.add_opt(lay.ps[t][k][p], 1.0);
                re.add_opt(lay.pd[t][k][p], 1.0);
                re.add_opt(lay.pc[t][k][p], -1.0);
                let mut imr = Lin::var(si, -1.0);
                imr.c = -load[k][p].im;
                imr.add_opt(lay.qs[t][k][p], 1.0);
                imr.add_opt(lay.qb[t][k][p], 1.0);
                let r = pb.add_block(Cone::Zero(2), &[re.row(), imr.row()]);
                lay.row_real_balance[t][k][p] = Some(r.start);
            }
        }

        // State-of-charge dynamics.
        for (k, bat) in feeder.battery_nodes() {
            for p in bat.phases.phases() {
                let mut e = Lin::var(lay.soc[t][k][p].unwrap(), 1.0);
                let (prev_coef, pc_coef, pd_coef) = match cfg.battery_model {
                    BatteryModel::Exact => (1.0, -bat.eta_c * dt, dt / bat.eta_d),
                    BatteryModel::Simplified => (bat.eta_eq.unwrap(), -dt, dt),
                };
                if t == 0 {
                    e.c = -prev_coef * initial_soc[k][p];
                } else {
                    e.add(lay.soc[t - 1][k][p].unwrap(), -prev_coef);
                }
                e.add_opt(lay.pc[t][k][p], pc_coef);
                e.add_opt(lay.pd[t][k][p], pd_coef);
                pb.add_block(Cone::Zero(1), &[e.row()]);
            }
        }

        // Bounds.
        for (k, node) in feeder.nodes.iter().enumerate() {
            if k == feeder.slack {
                continue;
            }
            for p in node.phases.phases() {
                let wv = w[k][p][p].re.unwrap();
                pb.add_block(
                    Cone::NonNeg(2),
                    &[
                        (-node.v_min * node.v_min, vec![(wv, 1.0)]),
                        (node.v_max * node.v_max, vec![(wv, -1.0)]),
                    ],
                );
            }
        }
        for (k, bat) in feeder.battery_nodes() {
            for p in bat.phases.phases() {
                if let Some(v) = lay.pd[t][k][p] {
                    let r = pb.add_block(Cone::NonNeg(2), &[(0.0, vec![(v, 1.0)]), (bat.p_max, vec![(v, -1.0)])]);
                    lay.row_pd_lo[t][k][p] = Some(r.start);
                    lay.row_pd_up[t][k][p] = Some(r.start + 1);
                }
                if let Some(v) = lay.pc[t][k][p] {
                    let r = pb.add_block(Cone::NonNeg(2), &[(0.0, vec![(v, 1.0)]), (bat.p_max, vec![(v, -1.0)])]);
                    lay.row_pc_lo[t][k][p] = Some(r.start);
                    lay.row_pc_up[t][k][p] = Some(r.start + 1);
                }
                let v = lay.soc[t][k][p].unwrap();
                let r = pb.add_block(Cone::NonNeg(2), &[(bat.b_max, vec![(v, -1.0)]), (-bat.b_min, vec![(v, 1.0)])]);
                lay.row_soc_up[t][k][p] = Some(r.start);
                lay.row_soc_lo[t][k][p] = Some(r.start + 1);
            }
        }
        for (k, _) in feeder.solar_nodes() {
            for p in 0..3 {
                if let Some(v) = lay.ps[t][k][p] {
                    pb.add_block(Cone::NonNeg(1), &[(0.0, vec![(v, 1.0)])]);
                }
            }
        }

        // Line limits.
        for (b, br) in feeder.branches.iter().enumerate() {
            for p in br.phases.phases() {
                let e = &sm[b][p][p];
                pb.add_block(
                    Cone::Soc(3),
                    &[(br.s_max, vec![]), (0.0, vec![(e.re.unwrap(), 1.0)]), (0.0, vec![(e.im.unwrap(), 1.0)])],
                );
            }
        }
        // Inverter discs.
        for (k, sol) in feeder.solar_nodes() {
            for p in sol.phases.phases() {
                if let (Some(ps), Some(qs)) = (lay.ps[t][k][p], lay.qs[t][k][p]) {
                    let cap = sol.g_max.min(forecast.solar[t][k][p]);
                    pb.add_block(Cone::Soc(3), &[(cap, vec![]), (0.0, vec![(ps, 1.0)]), (0.0, vec![(qs, 1.0)])]);
                }
            }
        }
        for (k, bat) in feeder.battery_nodes() {
            for p in bat.phases.phases() {
                let mut net = Lin::default();
                net.add_opt(lay.pd[t][k][p], 1.0);
                net.add_opt(lay.pc[t][k][p], -1.0);
                let r = pb.add_block(
                    Cone::Soc(3),
                    &[(bat.h_max, vec![]), net.row(), (0.0, vec![(lay.qb[t][k][p].unwrap(), 1.0)])],
                );
                lay.row_bat_cone[t][k][p] = Some(r.start);
            }
        }

        // Relaxed rank-one conditions.
        for (k, node) in feeder.nodes.iter().enumerate() {
            if k != feeder.slack {
                minor_cones(&mut pb, &w[k], &node.phases.phases().collect::<Vec<_>>());
            }
        }
        for (b, br) in feeder.branches.iter().enumerate() {
            let ph: Vec<usize> = br.phases.phases().collect();
            minor_cones(&mut pb, &im[b], &ph);
            let wn = &w[br.from];
            for &i in &ph {
                for &j in &ph {
                    let s = &sm[b][i][j];
                    let wii = diag_lin(&wn[i][i]);
                    let ijj = diag_lin(&im[b][j][j]);
                    let mut sum = wii.clone();
                    sum.terms.extend(ijj.terms.iter().copied());
                    sum.c += ijj.c;
                    let mut diff = wii;
                    diff.terms.extend(ijj.terms.iter().map(|&(v, c)| (v, -c)));
                    diff.c -= ijj.c;
                    pb.add_block(
                        Cone::Soc(4),
                        &[
                            sum.row(),
                            (0.0, vec![(s.re.unwrap(), 2.0)]),
                            (0.0, vec![(s.im.unwrap(), 2.0)]),
                            diff.row(),
                        ],
                    );
                }
            }
        }

        for cut in opts.cuts.iter() {
            let row = match *cut {
                PsdCut::Branch { t: ct, branch, u } if ct == t && branch < nb => {
                    let br = &feeder.branches[branch];
                    let mut e = CLin::default();
                    for i in br.phases.phases() {
                        for j in br.phases.phases() {
                            e.add(u[i].conj() * u[j], &w[br.from][i][j]);
                            e.add(u[i].conj() * u[3 + j], &sm[branch][i][j]);
                            e.add(u[3 + i].conj() * u[j], &sm[branch][j][i].conj());
                            e.add(u[3 + i].conj() * u[3 + j], &im[branch][i][j]);
                        }
                    }
                    e.re
                }
                PsdCut::Node { t: ct, node, u } if ct == t && node < n => {
                    let mut e = CLin::default();
                    for i in feeder.nodes[node].phases.phases() {
                        for j in feeder.nodes[node].phases.phases() {
                            e.add(u[i].conj() * u[j], &w[node][i][j]);
                        }
                    }
                    e.re
                }
                _ => continue,
            };
            pb.add_block(Cone::NonNeg(1), &[row.row()]);
        }

        // Head-node real power.
        let mut head = Lin::default();
        for &c in feeder.child_branches(feeder.slack) {
            for p in feeder.branches[c].phases.phases() {
                head.add(sm[c][p][p].re.unwrap(), 1.0);
            }
        }
        for p in feeder.nodes[feeder.slack].phases.phases() {
            match lay.snet[t][feeder.slack][p] {
                Some((r, _)) => head.add(r, -1.0),
                None => head.c += load[feeder.slack][p].re,
            }
        }
        lay.head.push(head);
    }

    // Objective.
    let mut epi = Vec::new();
    match &cfg.objective {
        ObjectiveKind::LossMin => {
            for t in 0..steps {
                for (b, br) in feeder.branches.iter().enumerate() {
                    for p in br.phases.phases() {
                        pb.add_objective(lay.i[t][b][p][p].re.unwrap(), br.z[p][p].re);
                    }
                }
            }
        }
        ObjectiveKind::VoltDev { w_nom } => {
            for t in 0..steps {
                for (k, node) in feeder.nodes.iter().enumerate() {
                    if k == feeder.slack {
                        continue;
                    }
                    for p in node.phases.phases() {
                        let mut r = Lin::var(lay.w[t][k][p][p].re.unwrap(), 1.0);
                        r.c = -w_nom;
                        epi.push(r);
                    }
                }
            }
        }
        ObjectiveKind::HeadTrack { .. } => {
            for t in 0..steps {
                let mut r = lay.head[t].clone();
                r.c -= refs[t];
                epi.push(r);
            }
        }
        ObjectiveKind::Degradation => {
            for t in 0..steps {
                for (k, bat) in feeder.battery_nodes() {
                    for p in bat.phases.phases() {
                        for v in [lay.pd[t][k][p], lay.pc[t][k][p]].into_iter().flatten() {
                            pb.add_objective(v, 1.0);
                        }
                    }
                }
            }
        }
        ObjectiveKind::VBTrack { .. } => {
            for t in 0..steps {
                for (k, bat) in feeder.battery_nodes() {
                    for p in bat.phases.phases() {
                        let mut r = Lin::default();
                        r.add_opt(lay.pd[t][k][p], 1.0);
                        r.add_opt(lay.pc[t][k][p], -1.0);
                        r.c = -refs[t];
                        epi.push(r);
                    }
                }
            }
        }
        ObjectiveKind::SoCTrack { b_target } => {
            for (k, bat) in feeder.battery_nodes() {
                for p in bat.phases.phases() {
                    let mut r = Lin::var(lay.soc[steps - 1][k][p].unwrap(), 1.0);
                    r.c = -b_target;
                    epi.push(r);
                }
            }
        }
    }
    for r in epi {
        // r² ≤ u  ⇔  ‖(2r, u − 1)‖ ≤ u + 1
        let u = pb.add_var();
        pb.add_objective(u, 1.0);
        pb.add_block(
            Cone::Soc(3),
            &[(1.0, vec![(u, 1.0)]), r.scaled(2.0).row(), (-1.0, vec![(u, 1.0)])],
        );
        lay.epigraphs.push((u, r));
    }
    if cfg.alpha > 0.0 {
        for t in 0..steps {
            for (k, bat) in feeder.battery_nodes() {
                for p in bat.phases.phases() {
                    if let Some(v) = lay.pd[t][k][p] {
                        let coef = cfg.alpha * (1.0 / bat.eta_d - bat.eta_c);
                        pb.add_objective(v, coef);
                        lay.alpha_terms.push((v, coef));
                    }
                }
            }
        }
    }

    Ok(ConicProblem {
        program: pb.build()?,
        layout: lay,
        config: cfg.clone(),
        steps,
        num_nodes: n,
        dt,
        initial_soc: initial_soc.to_vec(),
    })
}

/// Eigenvectors of a Hermitian matrix with eigenvalues below `−tol · max diag`.
fn negative_directions(mat: DMatrix<C64>, tol: f64) -> Vec<Vec<C64>> {
    let scale = (0..mat.nrows()).fold(0.0f64, |a, i| a.max(mat[(i, i)].re.abs()));
    let eig = mat.symmetric_eigen();
    let mut out = Vec::new();
    for (k, &lambda) in eig.eigenvalues.iter().enumerate() {
        if lambda < -tol * scale.max(1e-12) {
            out.push(eig.eigenvectors.column(k).iter().copied().collect());
        }
    }
    out
}

/// Relative eigenvalue threshold for separating cuts.
const CUT_TOL: f64 = 1e-6;

/// A solved relaxation together with the problem it was solved on.
#[derive(Debug, Clone)]
pub struct Relaxation {
    pub problem: ConicProblem,
    pub result: SolveResult,
    /// Cut rounds that produced `problem`.
    pub rounds: usize,
}

/// Builds and solves the relaxation, then tightens it for up to
/// `cfg.psd_cut_rounds` rounds with cuts separated at the current optimum.
/// A round whose solve is not optimal is discarded and the previous
/// optimum is returned.
pub fn solve_relaxation(
    feeder: &Feeder,
    forecast: &ForecastSeries,
    cfg: &BuilderConfig,
    opts: &BuildOptions,
    solver: &SolverConfig,
) -> Result<Relaxation, SocpError> {
    let problem = build_with(feeder, forecast, cfg, opts)?;
    let result = conic::solve(&problem.program, solver);
    let mut best = Relaxation {
        problem,
        result,
        rounds: 0,
    };
    let mut opts = opts.clone();
    for round in 1..=cfg.psd_cut_rounds {
        if best.result.status != Status::Optimal {
            break;
        }
        let cuts = best.problem.separate_cuts(feeder, &best.result.x, CUT_TOL);
        if cuts.is_empty() {
            break;
        }
        opts.cuts.extend(cuts);
        let problem = build_with(feeder, forecast, cfg, &opts)?;
        let result = conic::solve(&problem.program, solver);
        if result.status != Status::Optimal {
            log::debug!("cut round {round} ended with {:?}; keeping round {}", result.status, best.rounds);
            break;
        }
        best = Relaxation {
            problem,
            result,
            rounds: round,
        };
    }
    Ok(best)
}

fn herm_vars(pb: &mut ProgramBuilder, m: &mut Mat, ph: Vec<usize>) {
    for (a, &i) in ph.iter().enumerate() {
        m[i][i] = Entry::real(pb.add_var());
        for &j in &ph[a + 1..] {
            let e = Entry::complex(pb.add_var(), pb.add_var());
            m[i][j] = e;
            m[j][i] = e.conj();
        }
    }
}

fn diag_lin(e: &Entry) -> Lin {
    let mut l = Lin {
        terms: Vec::new(),
        c: e.c.re,
    };
    l.add_opt(e.re, 1.0);
    l
}

/// `|M_ij|² ≤ M_ii M_jj` for every unordered phase pair.
fn minor_cones(pb: &mut ProgramBuilder, m: &Mat, ph: &[usize]) {
    for (a, &i) in ph.iter().enumerate() {
        for &j in &ph[a + 1..] {
            let (di, dj) = (m[i][i].re.unwrap(), m[j][j].re.unwrap());
            let e = &m[i][j];
            pb.add_block(
                Cone::Soc(4),
                &[
                    (0.0, vec![(di, 1.0), (dj, 1.0)]),
                    (0.0, vec![(e.re.unwrap(), 2.0)]),
                    (0.0, vec![(e.im.unwrap(), 2.0)]),
                    (0.0, vec![(di, 1.0), (dj, -1.0)]),
                ],
            );
        }
    }
}

impl ConicProblem {
    pub fn counts(&self) -> ProblemCounts {
        let mut c = ProblemCounts {
            vars: self.program.num_vars(),
            equality_rows: 0,
            inequality_rows: 0,
            soc_blocks: 0,
            soc_rows: 0,
        };
        for cone in &self.program.cones {
            match *cone {
                Cone::Zero(d) => c.equality_rows += d,
                Cone::NonNeg(d) => c.inequality_rows += d,
                Cone::Soc(d) => {
                    c.soc_blocks += 1;
                    c.soc_rows += d;
                }
            }
        }
        c
    }

    fn check_x(&self, x: &[f64]) -> Result<(), SocpError> {
        if x.len() != self.program.num_vars() {
            return Err(SocpError::SizeMismatch {
                got: x.len(),
                expected: self.program.num_vars(),
            });
        }
        Ok(())
    }

    /// Augmented objective at `x`.
    pub fn objective_value(&self, x: &[f64]) -> Result<f64, SocpError> {
        self.check_x(x)?;
        Ok(self.program.objective(x))
    }

    /// Objective with the `α` penalty removed.
    pub fn base_objective_value(&self, x: &[f64]) -> Result<f64, SocpError> {
        self.check_x(x)?;
        let pen: f64 = self.layout.alpha_terms.iter().map(|&(v, c)| c * x[v]).sum();
        Ok(self.program.objective(x) - pen)
    }

    /// Head-node real power at step `t`.
    pub fn head_power(&self, x: &[f64], t: usize) -> f64 {
        self.layout.head[t].eval(x)
    }

    /// Relaxed loss functional `Σ R_φφ I_φφ` at step `t`, regardless of the
    /// configured objective.
    pub fn step_losses(&self, feeder: &Feeder, x: &[f64], t: usize) -> f64 {
        let mut total = 0.0;
        for (b, br) in feeder.branches.iter().enumerate() {
            for p in br.phases.phases() {
                total += br.z[p][p].re * x[self.layout.i[t][b][p][p].re.unwrap()];
            }
        }
        total
    }

    pub fn extract(&self, x: &[f64], z: &[f64]) -> Result<(DispatchSchedule, DualBundle), SocpError> {
        self.check_x(x)?;
        if z.len() != self.program.num_rows() {
            return Err(SocpError::SizeMismatch {
                got: z.len(),
                expected: self.program.num_rows(),
            });
        }
        let l = &self.layout;
        let (steps, n) = (self.steps, self.num_nodes);
        let mut sch = DispatchSchedule::zeros(steps, n);
        let mut d = DualBundle::zeros(steps, n);
        let get = |s: &Slots, t: usize, k: usize, p: usize| s[t][k][p].map_or(0.0, |v| x[v]);
        let row = |s: &Slots, t: usize, k: usize, p: usize| s[t][k][p].map_or(0.0, |r| z[r]);
        for k in 0..n {
            for p in 0..3 {
                if l.soc[0][k][p].is_some() {
                    sch.soc[0][k][p] = self.initial_soc[k][p];
                }
            }
        }
        for t in 0..steps {
            for k in 0..n {
                for p in 0..3 {
                    sch.p_dis[t][k][p] = get(&l.pd, t, k, p);
                    sch.p_ch[t][k][p] = get(&l.pc, t, k, p);
                    sch.q_bat[t][k][p] = get(&l.qb, t, k, p);
                    sch.p_sol[t][k][p] = get(&l.ps, t, k, p);
                    sch.q_sol[t][k][p] = get(&l.qs, t, k, p);
                    if l.soc[t][k][p].is_some() {
                        sch.soc[t + 1][k][p] = get(&l.soc, t, k, p);
                    }
                    let w = &l.w[t][k][p][p];
                    if w.is_var() || w.c.re != 0.0 {
                        sch.voltage[t][k][p] = w.value(x).re.max(0.0).sqrt();
                    }

                    d.lambda_p[t][k][p] = row(&l.row_real_balance, t, k, p);
                    d.lambda_d_lo[t][k][p] = row(&l.row_pd_lo, t, k, p);
                    d.lambda_d_up[t][k][p] = row(&l.row_pd_up, t, k, p);
                    d.lambda_c_lo[t][k][p] = row(&l.row_pc_lo, t, k, p);
                    d.lambda_c_up[t][k][p] = row(&l.row_pc_up, t, k, p);
                    d.beta_up[t][k][p] = row(&l.row_soc_up, t, k, p);
                    d.beta_lo[t][k][p] = row(&l.row_soc_lo, t, k, p);
                    if let Some(r) = l.row_bat_cone[t][k][p] {
                        // The cone multiplier z₀ of (h, P^d − P^c, q) relates to
                        // the quadratic form's multiplier by z₀ = 2 λ_s h.
                        let h = self.program.b[r];
                        d.lambda_s[t][k][p] = z[r] / (2.0 * h);
                    }
                }
            }
        }
        Ok((sch, d))
    }

    /// Maps exact power-flow states and a schedule to a primal point of the
    /// relaxation (the image of a rank-one solution).
    pub fn lift(
        &self,
        feeder: &Feeder,
        forecast: &ForecastSeries,
        states: &[PowerFlowResult],
        schedule: &DispatchSchedule,
    ) -> Result<Vec<f64>, SocpError> {
        if states.len() != self.steps || schedule.steps() != self.steps {
            return Err(SocpError::SizeMismatch {
                got: states.len().min(schedule.steps()),
                expected: self.steps,
            });
        }
        let l = &self.layout;
        let mut x = vec![0.0; self.program.num_vars()];
        fn put(x: &mut [f64], e: &Entry, v: C64) {
            if let Some(r) = e.re {
                x[r] = v.re - e.c.re;
            }
            if let Some(i) = e.im {
                x[i] = e.im_sign * (v.im - e.c.im);
            }
        }
        for (t, pf) in states.iter().enumerate() {
            let inj = schedule.injections(forecast, t);
            for k in 0..self.num_nodes {
                let v = &pf.voltages[k];
                for i in 0..3 {
                    for j in 0..3 {
                        put(&mut x, &l.w[t][k][i][j], v[i] * v[j].conj());
                    }
                    if let Some((r, im)) = l.snet[t][k][i] {
                        put(&mut x, &Entry::complex(r, im), inj[k][i]);
                    }
                }
            }
            for (b, br) in feeder.branches.iter().enumerate() {
                let cur = &pf.currents[b];
                let v = &pf.voltages[br.from];
                for i in 0..3 {
                    for j in 0..3 {
                        put(&mut x, &l.i[t][b][i][j], cur[i] * cur[j].conj());
                        put(&mut x, &l.s[t][b][i][j], v[i] * cur[j].conj());
                    }
                }
            }
            for k in 0..self.num_nodes {
                for p in 0..3 {
                    let pairs = [
                        (l.pd[t][k][p], schedule.p_dis[t][k][p]),
                        (l.pc[t][k][p], schedule.p_ch[t][k][p]),
                        (l.qb[t][k][p], schedule.q_bat[t][k][p]),
                        (l.ps[t][k][p], schedule.p_sol[t][k][p]),
                        (l.qs[t][k][p], schedule.q_sol[t][k][p]),
                        (l.soc[t][k][p], schedule.soc[t + 1][k][p]),
                    ];
                    for (v, val) in pairs {
                        if let Some(v) = v {
                            x[v] = val;
                        }
                    }
                }
            }
        }
        for (u, r) in &l.epigraphs {
            let v = r.eval(&x);
            x[*u] = v * v;
        }
        Ok(x)
    }

    /// Cuts from the eigenvectors of every branch block and node `W` whose
    /// eigenvalue at `x` is below `−tol` times the block's largest diagonal.
    pub fn separate_cuts(&self, feeder: &Feeder, x: &[f64], tol: f64) -> Vec<PsdCut> {
        let l = &self.layout;
        let mut cuts = Vec::new();
        for t in 0..self.steps {
            for (b, br) in feeder.branches.iter().enumerate() {
                let ph: Vec<usize> = br.phases.phases().collect();
                let m = ph.len();
                let mat = DMatrix::from_fn(2 * m, 2 * m, |r, c| {
                    let (i, j) = (ph[r % m], ph[c % m]);
                    match (r < m, c < m) {
                        (true, true) => l.w[t][br.from][i][j].value(x),
                        (true, false) => l.s[t][b][i][j].value(x),
                        (false, true) => l.s[t][b][j][i].value(x).conj(),
                        (false, false) => l.i[t][b][i][j].value(x),
                    }
                });
                for v in negative_directions(mat, tol) {
                    let mut u = [C64::new(0.0, 0.0); 6];
                    for (r, z) in v.into_iter().enumerate() {
                        u[if r < m { ph[r] } else { 3 + ph[r - m] }] = z;
                    }
                    cuts.push(PsdCut::Branch { t, branch: b, u });
                }
            }
            for (k, node) in feeder.nodes.iter().enumerate() {
                let ph: Vec<usize> = node.phases.phases().collect();
                if k == feeder.slack || ph.len() < 2 {
                    continue;
                }
                let m = ph.len();
                let mat = DMatrix::from_fn(m, m, |r, c| l.w[t][k][ph[r]][ph[c]].value(x));
                for v in negative_directions(mat, tol) {
                    let mut u = [C64::new(0.0, 0.0); 3];
                    for (r, z) in v.into_iter().enumerate() {
                        u[ph[r]] = z;
                    }
                    cuts.push(PsdCut::Node { t, node: k, u });
                }
            }
        }
        cuts
    }

    /// Sparse text dump of the cone program.
    pub fn dump(&self) -> String {
        conic::dump::dump(&self.program)
    }
}
