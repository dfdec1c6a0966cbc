//! Feeder data model, per-unit conversion and file ingestion.
//!
//! Feeder files are line oriented:
//!
//! ```text
//! [bases]
//! v_base = 2400          # volts, line to neutral
//! s_base = 1000000       # VA
//!
//! [nodes]
//! # id  phases  v_min  v_max  [slack]
//! 650   abc     0.9    1.1    slack
//! 632   abc     0.9    1.1
//!
//! [branches]
//! # from  to  phases  s_max_kva | z11 z12 z13; z21 z22 z23; z31 z32 z33   (ohms)
//! 650 632 abc 5000 | 0.13+0.38j 0.06+0.19j 0.06+0.16j; ...
//!
//! [batteries]
//! # node phases b_min_kwh b_max_kwh p_max_kw h_max_kva eta_c eta_d b_init_kwh [eta_eq]
//! [solar]
//! # node phases g_max_kva
//! [loads]
//! # node phase p_kw q_kvar
//! ```
//!
//! Impedance entries on absent phases are ignored.

use std::collections::HashMap;
use std::fmt;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub type C64 = Complex64;
pub type Mat3 = [[C64; 3]; 3];

pub const ZERO3: Mat3 = [[C64::new(0.0, 0.0); 3]; 3];

#[derive(Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct PhaseMask(u8);

impl PhaseMask {
    pub const A: PhaseMask = PhaseMask(0b001);
    pub const B: PhaseMask = PhaseMask(0b010);
    pub const C: PhaseMask = PhaseMask(0b100);
    pub const ABC: PhaseMask = PhaseMask(0b111);
    pub const NONE: PhaseMask = PhaseMask(0);

    pub fn from_bits(bits: u8) -> Option<Self> {
        (bits <= 0b111).then_some(PhaseMask(bits))
    }

    pub fn single(phase: usize) -> Self {
        PhaseMask(1 << phase)
    }

    pub fn bits(self) -> u8 {
        self.0
    }

    pub fn has(self, phase: usize) -> bool {
        phase < 3 && self.0 & (1 << phase) != 0
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_subset(self, other: PhaseMask) -> bool {
        self.0 & !other.0 == 0
    }

    pub fn phases(self) -> impl Iterator<Item = usize> {
        (0..3).filter(move |&p| self.has(p))
    }

    /// Parses `"abc"`, `"ac"`, `"b"` and so on (case-insensitive).
    pub fn parse(s: &str) -> Option<Self> {
        let mut bits = 0u8;
        for ch in s.chars() {
            let b = match ch.to_ascii_lowercase() {
                'a' => 1,
                'b' => 2,
                'c' => 4,
                _ => return None,
            };
            if bits & b != 0 {
                return None;
            }
            bits |= b;
        }
        (bits != 0).then_some(PhaseMask(bits))
    }
}

impl fmt::Display for PhaseMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in self.phases() {
            write!(f, "{}", phase_name(p))?;
        }
        Ok(())
    }
}

impl fmt::Debug for PhaseMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PhaseMask({self})")
    }
}

pub fn phase_name(p: usize) -> char {
    ['a', 'b', 'c'][p]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bases {
    /// Line-to-neutral voltage base in volts.
    pub v_base: f64,
    /// Per-phase apparent power base in VA.
    pub s_base: f64,
}

impl Bases {
    pub fn z_base(&self) -> f64 {
        self.v_base * self.v_base / self.s_base
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatterySpec {
    pub phases: PhaseMask,
    /// Energy limits in pu·h.
    pub b_min: f64,
    pub b_max: f64,
    pub p_max: f64,
    pub h_max: f64,
    pub eta_c: f64,
    pub eta_d: f64,
    pub b_init: f64,
    pub eta_eq: Option<f64>,
}

impl BatterySpec {
    pub fn validate(&self) -> Result<(), String> {
        let ok = 0.0 <= self.b_min
            && self.b_min < self.b_max
            && self.b_min <= self.b_init
            && self.b_init <= self.b_max
            && self.p_max > 0.0
            && self.h_max > 0.0
            && 0.0 < self.eta_c
            && self.eta_c <= 1.0
            && 0.0 < self.eta_d
            && self.eta_d <= 1.0
            && self.eta_eq.map_or(true, |e| 0.0 < e && e <= 1.0);
        if ok {
            Ok(())
        } else {
            Err(format!("battery ratings out of range: {self:?}"))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolarSpec {
    pub phases: PhaseMask,
    pub g_max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: String,
    pub phases: PhaseMask,
    pub v_min: f64,
    pub v_max: f64,
    pub battery: Option<BatterySpec>,
    pub solar: Option<SolarSpec>,
    /// Nominal per-phase load in pu.
    pub load: [C64; 3],
}

#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub from: usize,
    pub to: usize,
    pub phases: PhaseMask,
    /// Series impedance in pu; entries off `phases` are zero.
    pub z: Mat3,
    pub s_max: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Feeder {
    pub bases: Bases,
    pub nodes: Vec<Node>,
    /// Oriented away from the slack: `from` is the parent.
    pub branches: Vec<Branch>,
    pub slack: usize,
    order: Vec<usize>,
    parent: Vec<Option<usize>>,
    children: Vec<Vec<usize>>,
}

#[derive(Debug, Error, PartialEq)]
pub enum NetworkError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("network is not radial: {0}")]
    NonRadial(String),
    #[error("phase mismatch: {0}")]
    PhaseMismatch(String),
    #[error("duplicate node id {0:?}")]
    DuplicateId(String),
    #[error("no slack node declared")]
    MissingSlack,
    #[error("unknown node {0:?}")]
    UnknownNode(String),
    #[error("base must be positive, got {0}")]
    NonPositiveBase(f64),
    #[error("invalid device: {0}")]
    InvalidDevice(String),
}

pub fn to_per_unit(value: f64, base: f64) -> Result<f64, NetworkError> {
    if base > 0.0 && base.is_finite() {
        Ok(value / base)
    } else {
        Err(NetworkError::NonPositiveBase(base))
    }
}

pub fn from_per_unit(value: f64, base: f64) -> Result<f64, NetworkError> {
    if base > 0.0 && base.is_finite() {
        Ok(value * base)
    } else {
        Err(NetworkError::NonPositiveBase(base))
    }
}

/// Balanced nominal voltage with 120° offsets.
pub fn nominal_voltage() -> [C64; 3] {
    let a = 2.0 * std::f64::consts::PI / 3.0;
    [C64::new(1.0, 0.0), C64::from_polar(1.0, -a), C64::from_polar(1.0, a)]
}

impl Feeder {
    /// Assembles a feeder, orienting branches away from the slack and checking
    /// radiality and phase consistency.
    pub fn new(bases: Bases, nodes: Vec<Node>, mut branches: Vec<Branch>, slack: usize) -> Result<Self, NetworkError> {
        if !(bases.v_base > 0.0) {
            return Err(NetworkError::NonPositiveBase(bases.v_base));
        }
        if !(bases.s_base > 0.0) {
            return Err(NetworkError::NonPositiveBase(bases.s_base));
        }
        let n = nodes.len();
        if slack >= n {
            return Err(NetworkError::MissingSlack);
        }
        if branches.len() + 1 != n {
            return Err(NetworkError::NonRadial(format!(
                "{} branches for {} nodes",
                branches.len(),
                n
            )));
        }
        let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (k, br) in branches.iter().enumerate() {
            if br.from == br.to {
                return Err(NetworkError::NonRadial(format!("self loop at {}", nodes[br.from].id)));
            }
            adj[br.from].push(k);
            adj[br.to].push(k);
        }
        let mut parent: Vec<Option<usize>> = vec![None; n];
        let mut seen = vec![false; n];
        let mut order = Vec::with_capacity(n - 1);
        let mut queue = std::collections::VecDeque::from([slack]);
        seen[slack] = true;
        while let Some(u) = queue.pop_front() {
            for &k in &adj[u] {
                if Some(k) == parent[u] {
                    continue;
                }
                let v = if branches[k].from == u { branches[k].to } else { branches[k].from };
                if seen[v] {
                    return Err(NetworkError::NonRadial(format!("cycle through {}", nodes[v].id)));
                }
                seen[v] = true;
                if branches[k].from != u {
                    let br = &mut branches[k];
                    std::mem::swap(&mut br.from, &mut br.to);
                }
                parent[v] = Some(k);
                order.push(k);
                queue.push_back(v);
            }
        }
        if let Some(v) = seen.iter().position(|s| !s) {
            return Err(NetworkError::NonRadial(format!("{} is disconnected", nodes[v].id)));
        }
        let mut children = vec![Vec::new(); n];
        for &k in &order {
            children[branches[k].from].push(k);
        }

        for (i, node) in nodes.iter().enumerate() {
            if node.phases.is_empty() {
                return Err(NetworkError::PhaseMismatch(format!("{} has no phases", node.id)));
            }
            if !(0.0 < node.v_min && node.v_min < node.v_max) {
                return Err(NetworkError::InvalidDevice(format!("voltage limits at {}", node.id)));
            }
            if let Some(k) = parent[i] {
                if branches[k].phases != node.phases {
                    return Err(NetworkError::PhaseMismatch(format!(
                        "{} has phases {} but is fed by {}",
                        node.id, node.phases, branches[k].phases
                    )));
                }
            }
            if let Some(b) = &node.battery {
                if !b.phases.is_subset(node.phases) {
                    return Err(NetworkError::PhaseMismatch(format!("battery at {}", node.id)));
                }
                b.validate().map_err(NetworkError::InvalidDevice)?;
            }
            if let Some(s) = &node.solar {
                if !s.phases.is_subset(node.phases) {
                    return Err(NetworkError::PhaseMismatch(format!("solar at {}", node.id)));
                }
                if !(s.g_max > 0.0) {
                    return Err(NetworkError::InvalidDevice(format!("solar rating at {}", node.id)));
                }
            }
            for p in 0..3 {
                if !node.phases.has(p) && node.load[p] != C64::new(0.0, 0.0) {
                    return Err(NetworkError::PhaseMismatch(format!("load on absent phase at {}", node.id)));
                }
            }
        }
        for br in &branches {
            if br.phases.is_empty()
                || !br.phases.is_subset(nodes[br.from].phases)
                || !br.phases.is_subset(nodes[br.to].phases)
            {
                return Err(NetworkError::PhaseMismatch(format!(
                    "branch {}-{} phases {}",
                    nodes[br.from].id, nodes[br.to].id, br.phases
                )));
            }
            if br.phases.phases().any(|_| !(br.s_max > 0.0)) {
                return Err(NetworkError::InvalidDevice("line limit must be positive".into()));
            }
        }
        Ok(Self {
            bases,
            nodes,
            branches,
            slack,
            order,
            parent,
            children,
        })
    }

    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    /// Branches root to leaf; every parent branch precedes its children.
    pub fn topo_order(&self) -> &[usize] {
        &self.order
    }

    /// Incoming branch of a node (`None` at the slack).
    pub fn parent_branch(&self, node: usize) -> Option<usize> {
        self.parent[node]
    }

    /// Outgoing branches of a node.
    pub fn child_branches(&self, node: usize) -> &[usize] {
        &self.children[node]
    }

    pub fn battery_nodes(&self) -> impl Iterator<Item = (usize, &BatterySpec)> {
        self.nodes.iter().enumerate().filter_map(|(i, n)| n.battery.as_ref().map(|b| (i, b)))
    }

    pub fn solar_nodes(&self) -> impl Iterator<Item = (usize, &SolarSpec)> {
        self.nodes.iter().enumerate().filter_map(|(i, n)| n.solar.as_ref().map(|s| (i, s)))
    }

    /// Copy with all batteries and solar removed.
    pub fn without_devices(&self) -> Self {
        let mut f = self.clone();
        for n in &mut f.nodes {
            n.battery = None;
            n.solar = None;
        }
        f
    }

    /// Initial state of charge per node and phase.
    pub fn initial_soc(&self) -> Vec<[f64; 3]> {
        self.nodes
            .iter()
            .map(|n| {
                let mut b = [0.0; 3];
                if let Some(bat) = &n.battery {
                    for p in bat.phases.phases() {
                        b[p] = bat.b_init;
                    }
                }
                b
            })
            .collect()
    }
}

fn syntax(line: usize, msg: impl Into<String>) -> NetworkError {
    NetworkError::Syntax { line, msg: msg.into() }
}

pub fn parse_complex(s: &str) -> Option<C64> {
    let s = s.trim();
    if s.is_empty() {
        return None;
    }
    let Some(body) = s.strip_suffix('j').or_else(|| s.strip_suffix('i')) else {
        return s.parse().ok().map(|re| C64::new(re, 0.0));
    };
    // Split at the last sign that is not part of an exponent.
    let bytes = body.as_bytes();
    let mut split = None;
    for k in (1..bytes.len()).rev() {
        if (bytes[k] == b'+' || bytes[k] == b'-') && !matches!(bytes[k - 1], b'e' | b'E') {
            split = Some(k);
            break;
        }
    }
    match split {
        Some(k) => {
            let re: f64 = body[..k].parse().ok()?;
            let im_s = &body[k..];
            let im: f64 = match im_s {
                "+" => 1.0,
                "-" => -1.0,
                _ => im_s.parse().ok()?,
            };
            Some(C64::new(re, im))
        }
        None => {
            let im: f64 = if body.is_empty() { 1.0 } else { body.parse().ok()? };
            Some(C64::new(0.0, im))
        }
    }
}

fn parse_num(tok: Option<&str>, line: usize, what: &str) -> Result<f64, NetworkError> {
    let tok = tok.ok_or_else(|| syntax(line, format!("missing {what}")))?;
    tok.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .ok_or_else(|| syntax(line, format!("bad {what} {tok:?}")))
}

fn parse_mask(tok: Option<&str>, line: usize) -> Result<PhaseMask, NetworkError> {
    let tok = tok.ok_or_else(|| syntax(line, "missing phases"))?;
    PhaseMask::parse(tok).ok_or_else(|| syntax(line, format!("bad phases {tok:?}")))
}

fn parse_impedance(text: &str, mask: PhaseMask, line: usize) -> Result<Mat3, NetworkError> {
    let rows: Vec<&str> = text.split(';').collect();
    if rows.len() != 3 {
        return Err(syntax(line, "impedance needs 3 rows"));
    }
    let mut z = ZERO3;
    for (r, row) in rows.iter().enumerate() {
        let vals: Vec<&str> = row.split_whitespace().collect();
        if vals.len() != 3 {
            return Err(syntax(line, format!("impedance row {} needs 3 entries", r + 1)));
        }
        for (c, v) in vals.iter().enumerate() {
            let zc = parse_complex(v).ok_or_else(|| syntax(line, format!("bad complex {v:?}")))?;
            if mask.has(r) && mask.has(c) {
                z[r][c] = zc;
            }
        }
    }
    Ok(z)
}

/// Parses a feeder file; impedances and ratings are converted to per unit.
pub fn parse_feeder(text: &str) -> Result<Feeder, NetworkError> {
    let mut section = String::new();
    let mut v_base = None;
    let mut s_base = None;
    let mut nodes: Vec<Node> = Vec::new();
    let mut ids: HashMap<String, usize> = HashMap::new();
    let mut slack = None;
    struct RawBranch {
        line: usize,
        from: String,
        to: String,
        phases: PhaseMask,
        s_max_kva: f64,
        z_ohm: Mat3,
    }
    let mut raw_branches = Vec::new();
    // Devices and loads refer to nodes, which may be declared later.
    let mut raw_devices: Vec<(usize, String, String)> = Vec::new();

    for (k, raw) in text.lines().enumerate() {
        let line = k + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if content.starts_with('[') {
            section = content.trim_matches(|c| c == '[' || c == ']').trim().to_ascii_lowercase();
            continue;
        }
        match section.as_str() {
            "bases" => {
                let (key, val) = content.split_once('=').ok_or_else(|| syntax(line, "expected key = value"))?;
                let v = parse_num(Some(val.trim()), line, key.trim())?;
                match key.trim() {
                    "v_base" => v_base = Some(v),
                    "s_base" => s_base = Some(v),
                    other => return Err(syntax(line, format!("unknown base {other:?}"))),
                }
            }
            "nodes" => {
                let mut it = content.split_whitespace();
                let id = it.next().unwrap().to_string();
                let phases = parse_mask(it.next(), line)?;
                let v_min = parse_num(it.next(), line, "v_min")?;
                let v_max = parse_num(it.next(), line, "v_max")?;
                let is_slack = match it.next() {
                    None => false,
                    Some("slack") => true,
                    Some(t) => return Err(syntax(line, format!("unexpected {t:?}"))),
                };
                if ids.contains_key(&id) {
                    return Err(NetworkError::DuplicateId(id));
                }
                if is_slack {
                    if slack.is_some() {
                        return Err(syntax(line, "second slack node"));
                    }
                    slack = Some(nodes.len());
                }
                ids.insert(id.clone(), nodes.len());
                nodes.push(Node {
                    id,
                    phases,
                    v_min,
                    v_max,
                    battery: None,
                    solar: None,
                    load: [C64::new(0.0, 0.0); 3],
                });
            }
            "branches" => {
                let (head, ztext) = content.split_once('|').ok_or_else(|| syntax(line, "missing '|' before impedance"))?;
                let mut it = head.split_whitespace();
                let from = it.next().ok_or_else(|| syntax(line, "missing from"))?.to_string();
                let to = it.next().ok_or_else(|| syntax(line, "missing to"))?.to_string();
                let phases = parse_mask(it.next(), line)?;
                let s_max_kva = parse_num(it.next(), line, "s_max")?;
                let z_ohm = parse_impedance(ztext, phases, line)?;
                raw_branches.push(RawBranch {
                    line,
                    from,
                    to,
                    phases,
                    s_max_kva,
                    z_ohm,
                });
            }
            "batteries" | "solar" | "loads" => {
                raw_devices.push((line, section.clone(), content.to_string()));
            }
            "" => return Err(syntax(line, "content outside a section")),
            other => return Err(syntax(line, format!("unknown section [{other}]"))),
        }
    }

    let bases = Bases {
        v_base: v_base.ok_or_else(|| syntax(0, "missing v_base"))?,
        s_base: s_base.ok_or_else(|| syntax(0, "missing s_base"))?,
    };
    let z_base = to_per_unit(bases.v_base * bases.v_base, bases.s_base)?;
    to_per_unit(1.0, bases.v_base)?;
    let kilo = |v: f64| to_per_unit(v * 1e3, bases.s_base);
    let slack = slack.ok_or(NetworkError::MissingSlack)?;
    let lookup = |id: &str| ids.get(id).copied().ok_or_else(|| NetworkError::UnknownNode(id.to_string()));

    for (line, sec, content) in raw_devices {
        let mut it = content.split_whitespace();
        let node = lookup(it.next().unwrap())?;
        let phases = parse_mask(it.next(), line)?;
        match sec.as_str() {
            "batteries" => {
                if nodes[node].battery.is_some() {
                    return Err(syntax(line, "second battery at node"));
                }
                let b_min = kilo(parse_num(it.next(), line, "b_min")?)?;
                let b_max = kilo(parse_num(it.next(), line, "b_max")?)?;
                let p_max = kilo(parse_num(it.next(), line, "p_max")?)?;
                let h_max = kilo(parse_num(it.next(), line, "h_max")?)?;
                let eta_c = parse_num(it.next(), line, "eta_c")?;
                let eta_d = parse_num(it.next(), line, "eta_d")?;
                let b_init = kilo(parse_num(it.next(), line, "b_init")?)?;
                let eta_eq = it.next().map(|t| parse_num(Some(t), line, "eta_eq")).transpose()?;
                nodes[node].battery = Some(BatterySpec {
                    phases,
                    b_min,
                    b_max,
                    p_max,
                    h_max,
                    eta_c,
                    eta_d,
                    b_init,
                    eta_eq,
                });
            }
            "solar" => {
                if nodes[node].solar.is_some() {
                    return Err(syntax(line, "second solar unit at node"));
                }
                let g_max = kilo(parse_num(it.next(), line, "g_max")?)?;
                nodes[node].solar = Some(SolarSpec { phases, g_max });
            }
            _ => {
                let p = kilo(parse_num(it.next(), line, "p_kw")?)?;
                let q = kilo(parse_num(it.next(), line, "q_kvar")?)?;
                for ph in phases.phases() {
                    nodes[node].load[ph] += C64::new(p, q);
                }
            }
        }
        if it.next().is_some() {
            return Err(syntax(line, "trailing fields"));
        }
    }

    let mut branches = Vec::with_capacity(raw_branches.len());
    for rb in raw_branches {
        let from = lookup(&rb.from)?;
        let to = lookup(&rb.to)?;
        let mut z = ZERO3;
        for r in 0..3 {
            for c in 0..3 {
                z[r][c] = rb.z_ohm[r][c] / z_base;
            }
        }
        if rb.s_max_kva <= 0.0 {
            return Err(syntax(rb.line, "s_max must be positive"));
        }
        branches.push(Branch {
            from,
            to,
            phases: rb.phases,
            z,
            s_max: kilo(rb.s_max_kva)?,
        });
    }
    Feeder::new(bases, nodes, branches, slack)
}

/// Demand and solar availability over a horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastSeries {
    /// Step length in hours.
    pub dt: f64,
    /// `load[t][node][phase]` in pu.
    pub load: Vec<Vec<[C64; 3]>>,
    /// `solar[t][node][phase]`: available solar apparent power in pu.
    pub solar: Vec<Vec<[f64; 3]>>,
}

#[derive(Debug, Error, PartialEq)]
pub enum ForecastError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("series for node {node:?} phase {phase} is missing step {t}")]
    RaggedSeries { node: String, phase: char, t: usize },
    #[error("negative solar availability at node {node:?}, t = {t}")]
    NegativeSolar { node: String, t: usize },
    #[error("unknown node {0:?}")]
    UnknownNode(String),
    #[error("scaling fraction {0} outside (0, 1]")]
    OutOfRangeFraction(f64),
    #[error("window {start}..{end} exceeds series of length {len}")]
    WindowOutOfRange { start: usize, end: usize, len: usize },
    #[error("step length must be positive, got {0}")]
    NonPositiveStep(f64),
}

impl ForecastSeries {
    pub fn zeros(num_nodes: usize, steps: usize, dt: f64) -> Self {
        Self {
            dt,
            load: vec![vec![[C64::new(0.0, 0.0); 3]; num_nodes]; steps],
            solar: vec![vec![[0.0; 3]; num_nodes]; steps],
        }
    }

    pub fn len(&self) -> usize {
        self.load.len()
    }

    pub fn is_empty(&self) -> bool {
        self.load.is_empty()
    }

    pub fn num_nodes(&self) -> usize {
        self.load.first().map_or(0, Vec::len)
    }

    /// Steps `start..start + len`.
    pub fn window(&self, start: usize, len: usize) -> Result<Self, ForecastError> {
        let end = start + len;
        if end > self.len() {
            return Err(ForecastError::WindowOutOfRange {
                start,
                end,
                len: self.len(),
            });
        }
        Ok(Self {
            dt: self.dt,
            load: self.load[start..end].to_vec(),
            solar: self.solar[start..end].to_vec(),
        })
    }

    /// Single-step series at `t`.
    pub fn step(&self, t: usize) -> Self {
        self.window(t, 1).expect("step within series")
    }

    /// Nominal feeder loads held constant, no solar.
    pub fn constant(feeder: &Feeder, steps: usize, dt: f64) -> Self {
        let mut f = Self::zeros(feeder.nodes.len(), steps, dt);
        for t in 0..steps {
            for (i, n) in feeder.nodes.iter().enumerate() {
                f.load[t][i] = n.load;
            }
        }
        f
    }
}

/// Parses `t,node,phase,p_load,q_load,solar_cap` rows (pu). A header line is
/// optional. Rows may be in any order but every `(node, phase)` present must
/// cover all steps `0..T`.
pub fn parse_forecast(text: &str, feeder: &Feeder, dt: f64) -> Result<ForecastSeries, ForecastError> {
    if !(dt > 0.0) {
        return Err(ForecastError::NonPositiveStep(dt));
    }
    let mut rows: Vec<(usize, usize, usize, C64, f64)> = Vec::new();
    for (k, raw) in text.lines().enumerate() {
        let line = k + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() || content.starts_with("t,") {
            continue;
        }
        let cols: Vec<&str> = content.split(',').map(str::trim).collect();
        let err = |msg: &str| ForecastError::Syntax { line, msg: msg.into() };
        if cols.len() != 6 {
            return Err(err("expected 6 columns"));
        }
        let t: usize = cols[0].parse().map_err(|_| err("bad step index"))?;
        let node = feeder
            .node_index(cols[1])
            .ok_or_else(|| ForecastError::UnknownNode(cols[1].to_string()))?;
        let mask = PhaseMask::parse(cols[2]).filter(|m| m.len() == 1).ok_or_else(|| err("bad phase"))?;
        let phase = mask.phases().next().unwrap();
        let num = |s: &str| s.parse::<f64>().ok().filter(|v| v.is_finite());
        let p = num(cols[3]).ok_or_else(|| err("bad p_load"))?;
        let q = num(cols[4]).ok_or_else(|| err("bad q_load"))?;
        let cap = num(cols[5]).ok_or_else(|| err("bad solar_cap"))?;
        if cap < 0.0 {
            return Err(ForecastError::NegativeSolar {
                node: cols[1].to_string(),
                t,
            });
        }
        rows.push((t, node, phase, C64::new(p, q), cap));
    }
    let steps = rows.iter().map(|r| r.0 + 1).max().unwrap_or(0);
    let mut seen: HashMap<(usize, usize), Vec<bool>> = HashMap::new();
    let mut f = ForecastSeries::zeros(feeder.nodes.len(), steps, dt);
    for &(t, node, phase, s, cap) in &rows {
        seen.entry((node, phase)).or_insert_with(|| vec![false; steps])[t] = true;
        f.load[t][node][phase] = s;
        f.solar[t][node][phase] = cap;
    }
    let mut keys: Vec<_> = seen.keys().copied().collect();
    keys.sort_unstable();
    for (node, phase) in keys {
        if let Some(t) = seen[&(node, phase)].iter().position(|s| !s) {
            return Err(ForecastError::RaggedSeries {
                node: feeder.nodes[node].id.clone(),
                phase: phase_name(phase),
                t,
            });
        }
    }
    Ok(f)
}

pub fn write_forecast(feeder: &Feeder, f: &ForecastSeries) -> String {
    let mut out = String::from("t,node,phase,p_load,q_load,solar_cap\n");
    for t in 0..f.len() {
        for (i, n) in feeder.nodes.iter().enumerate() {
            for p in n.phases.phases() {
                let s = f.load[t][i][p];
                out.push_str(&format!(
                    "{t},{},{},{:e},{:e},{:e}\n",
                    n.id,
                    phase_name(p),
                    s.re,
                    s.im,
                    f.solar[t][i][p]
                ));
            }
        }
    }
    out
}

/// Load/solar level combinations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Case {
    LL,
    HL,
    LH,
    HH,
}

impl Case {
    pub const ALL: [Case; 4] = [Case::LL, Case::HL, Case::LH, Case::HH];

    /// `(load fraction, solar fraction)`.
    pub fn fractions(self) -> (f64, f64) {
        match self {
            Case::LL => (0.5, 0.5),
            Case::HL => (1.0, 0.5),
            Case::LH => (0.5, 1.0),
            Case::HH => (1.0, 1.0),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_uppercase().as_str() {
            "LL" => Some(Case::LL),
            "HL" => Some(Case::HL),
            "LH" => Some(Case::LH),
            "HH" => Some(Case::HH),
            _ => None,
        }
    }
}

impl fmt::Display for Case {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

pub fn scale_case(f: &ForecastSeries, load_pct: f64, solar_pct: f64) -> Result<ForecastSeries, ForecastError> {
    for v in [load_pct, solar_pct] {
        if !(v > 0.0 && v <= 1.0) {
            return Err(ForecastError::OutOfRangeFraction(v));
        }
    }
    let mut out = f.clone();
    for t in 0..out.len() {
        for i in 0..out.num_nodes() {
            for p in 0..3 {
                out.load[t][i][p] *= load_pct;
                out.solar[t][i][p] *= solar_pct;
            }
        }
    }
    Ok(out)
}

/// Seeded synthetic profile: nominal loads modulated by a slow daily shape
/// plus noise, and solar availability following a clear-sky bell around
/// midday with cloud dips. `start_minute` is minutes after midnight.
pub fn synthetic_forecast(feeder: &Feeder, steps: usize, dt: f64, start_minute: f64, seed: u64) -> ForecastSeries {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut f = ForecastSeries::zeros(feeder.nodes.len(), steps, dt);
    let mut cloud = 0.0f64;
    for t in 0..steps {
        let hour = (start_minute + t as f64 * dt * 60.0) / 60.0;
        let day = 0.8 + 0.2 * (std::f64::consts::PI * (hour - 7.0) / 12.0).sin().max(0.0);
        let clear = (std::f64::consts::PI * (hour - 6.0) / 12.0).sin().max(0.0);
        cloud = (0.9 * cloud + 0.1 * rng.gen_range(0.0..0.3)).min(0.5);
        for (i, n) in feeder.nodes.iter().enumerate() {
            for p in n.phases.phases() {
                let noise = 1.0 + rng.gen_range(-0.02..0.02);
                f.load[t][i][p] = n.load[p] * (day * noise);
            }
            if let Some(s) = &n.solar {
                for p in s.phases.phases() {
                    f.solar[t][i][p] = (s.g_max * clear * (1.0 - cloud)).clamp(0.0, s.g_max);
                }
            }
        }
    }
    f
}

/// Synthetic radial feeder at the scale of the 123-node test system: a
/// three-phase trunk with two- and single-phase laterals, and `der_nodes`
/// randomly chosen nodes carrying a battery and a solar unit on all of
/// their phases.
pub fn synthetic_feeder(num_nodes: usize, der_nodes: usize, seed: u64) -> Feeder {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bases = Bases {
        v_base: 2400.0,
        s_base: 1e6,
    };
    let z3 = |scale: f64| {
        let mut z = ZERO3;
        for r in 0..3 {
            for c in 0..3 {
                z[r][c] = if r == c {
                    C64::new(0.012, 0.024) * scale
                } else {
                    C64::new(0.004, 0.009) * scale
                };
            }
        }
        z
    };
    let mut nodes = vec![Node {
        id: "n0".into(),
        phases: PhaseMask::ABC,
        v_min: 0.9,
        v_max: 1.1,
        battery: None,
        solar: None,
        load: [C64::new(0.0, 0.0); 3],
    }];
    let mut branches = Vec::new();
    for k in 1..num_nodes {
        // Mostly extend recent nodes so the tree has depth.
        let lo = k.saturating_sub(8);
        let parent = rng.gen_range(lo..k);
        let pm = nodes[parent].phases;
        let phases = if pm == PhaseMask::ABC && rng.gen_bool(0.45) {
            PhaseMask::ABC
        } else if pm.len() >= 2 && rng.gen_bool(0.1) {
            let mut it = pm.phases();
            PhaseMask::single(it.next().unwrap()).union(PhaseMask::single(it.next().unwrap()))
        } else {
            let ph: Vec<usize> = pm.phases().collect();
            PhaseMask::single(ph[rng.gen_range(0..ph.len())])
        };
        let mut z = z3(rng.gen_range(0.3..1.0));
        for r in 0..3 {
            for c in 0..3 {
                if !(phases.has(r) && phases.has(c)) {
                    z[r][c] = C64::new(0.0, 0.0);
                }
            }
        }
        let mut load = [C64::new(0.0, 0.0); 3];
        for p in phases.phases() {
            if rng.gen_bool(0.6) {
                load[p] = C64::new(rng.gen_range(0.005..0.03), rng.gen_range(0.002..0.015));
            }
        }
        nodes.push(Node {
            id: format!("n{k}"),
            phases,
            v_min: 0.9,
            v_max: 1.1,
            battery: None,
            solar: None,
            load,
        });
        branches.push(Branch {
            from: parent,
            to: k,
            phases,
            z,
            s_max: 5.0,
        });
    }
    let mut candidates: Vec<usize> = (1..num_nodes).collect();
    for k in 0..der_nodes.min(candidates.len()) {
        let j = rng.gen_range(k..candidates.len());
        candidates.swap(k, j);
        let node = &mut nodes[candidates[k]];
        node.battery = Some(BatterySpec {
            phases: node.phases,
            b_min: 0.0,
            b_max: 0.04,
            p_max: 0.05,
            h_max: 0.05,
            eta_c: 0.95,
            eta_d: 0.95,
            b_init: 0.02,
            eta_eq: None,
        });
        node.solar = Some(SolarSpec {
            phases: node.phases,
            g_max: 0.1,
        });
    }
    Feeder::new(bases, nodes, branches, 0).expect("synthetic feeder is radial")
}

impl PhaseMask {
    pub fn union(self, other: PhaseMask) -> PhaseMask {
        PhaseMask(self.0 | other.0)
    }
}
