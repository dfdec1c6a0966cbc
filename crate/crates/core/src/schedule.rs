//! Per-node, per-phase, per-step device set-points.

use crate::network::{ForecastSeries, C64};
use crate::network::Feeder;

pub type Field = Vec<Vec<[f64; 3]>>;

fn field(steps: usize, nodes: usize) -> Field {
    vec![vec![[0.0; 3]; nodes]; steps]
}

/// Dispatch over a horizon. Every field is indexed `[t][node][phase]` and is
/// zero where no device exists.
#[derive(Debug, Clone, PartialEq)]
pub struct DispatchSchedule {
    pub p_dis: Field,
    pub p_ch: Field,
    pub q_bat: Field,
    pub p_sol: Field,
    pub q_sol: Field,
    /// State of charge, `steps + 1` entries with the initial state first.
    pub soc: Field,
    /// Voltage magnitudes in pu implied by the schedule's network state.
    pub voltage: Field,
}

impl DispatchSchedule {
    pub fn zeros(steps: usize, nodes: usize) -> Self {
        Self {
            p_dis: field(steps, nodes),
            p_ch: field(steps, nodes),
            q_bat: field(steps, nodes),
            p_sol: field(steps, nodes),
            q_sol: field(steps, nodes),
            soc: field(steps + 1, nodes),
            voltage: field(steps, nodes),
        }
    }

    pub fn steps(&self) -> usize {
        self.p_dis.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.p_dis.first().map_or(0, Vec::len)
    }

    /// Net battery output `P^d − P^c`.
    pub fn net_battery(&self, t: usize, node: usize, phase: usize) -> f64 {
        self.p_dis[t][node][phase] - self.p_ch[t][node][phase]
    }

    /// Net complex injections at step `t`: devices minus load.
    pub fn injections(&self, forecast: &ForecastSeries, t: usize) -> Vec<[C64; 3]> {
        (0..self.num_nodes())
            .map(|i| {
                let mut s = [C64::new(0.0, 0.0); 3];
                for p in 0..3 {
                    s[p] = -forecast.load[t][i][p]
                        + C64::new(self.net_battery(t, i, p) + self.p_sol[t][i][p], self.q_bat[t][i][p] + self.q_sol[t][i][p]);
                }
                s
            })
            .collect()
    }

    /// Copy restricted to step `t` (the state of charge keeps its two endpoints).
    pub fn step(&self, t: usize) -> Self {
        Self {
            p_dis: vec![self.p_dis[t].clone()],
            p_ch: vec![self.p_ch[t].clone()],
            q_bat: vec![self.q_bat[t].clone()],
            p_sol: vec![self.p_sol[t].clone()],
            q_sol: vec![self.q_sol[t].clone()],
            soc: vec![self.soc[t].clone(), self.soc[t + 1].clone()],
            voltage: vec![self.voltage[t].clone()],
        }
    }

    /// Largest `P^d·P^c` over all entries.
    pub fn max_scd_product(&self) -> f64 {
        let mut m: f64 = 0.0;
        for t in 0..self.steps() {
            for i in 0..self.num_nodes() {
                for p in 0..3 {
                    m = m.max(self.p_dis[t][i][p] * self.p_ch[t][i][p]);
                }
            }
        }
        m
    }

    /// State of charge recomputed from the active powers with the exact
    /// battery model, starting from `soc[0]`.
    pub fn soc_from_powers(&self, feeder: &Feeder, dt: f64) -> Field {
        let mut soc = field(self.steps() + 1, self.num_nodes());
        soc[0] = self.soc[0].clone();
        for t in 0..self.steps() {
            for (i, bat) in feeder.battery_nodes() {
                for p in bat.phases.phases() {
                    soc[t + 1][i][p] = soc[t][i][p] + bat.eta_c * self.p_ch[t][i][p] * dt - self.p_dis[t][i][p] * dt / bat.eta_d;
                }
            }
        }
        soc
    }
}
