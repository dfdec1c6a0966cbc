use conic::SolverConfig;
use dispatch::network::*;
use dispatch::powerflow::{diag_losses, sweep, validate_schedule, SweepConfig};
use dispatch::restore::*;
use dispatch::schedule::DispatchSchedule;
use dispatch::socp::*;
use proptest::prelude::*;

const DT: f64 = 1.0 / 60.0;

fn two_node_battery() -> Feeder {
    parse_feeder(include_str!("../fixtures/two_node_battery.feeder")).unwrap()
}

fn ieee13() -> Feeder {
    parse_feeder(include_str!("../fixtures/ieee13.feeder")).unwrap()
}

fn cfg() -> RestoreConfig {
    RestoreConfig::default()
}

/// Exact losses of the 2-node fixture with battery output `p + jq`.
fn two_node_losses(f: &Feeder, fc: &ForecastSeries, p: f64, q: f64) -> f64 {
    let inj = vec![[C64::new(0.0, 0.0); 3], [-fc.load[0][1][0] + C64::new(p, q), C64::new(0.0, 0.0), C64::new(0.0, 0.0)]];
    diag_losses(f, &sweep(f, &inj, &SweepConfig::default()).unwrap())
}

#[test]
fn feeder_without_devices_is_a_plain_sweep() {
    let f = ieee13().without_devices();
    let fc = synthetic_forecast(&f, 2, DT, 720.0, 1);
    let s = DispatchSchedule::zeros(2, f.nodes.len());
    let r = restore_timestep(&f, &fc, &s, 1, &cfg()).unwrap();
    let pf = sweep(&f, &dispatch::powerflow::load_injections(&fc, 1), &SweepConfig::default()).unwrap();
    assert_eq!(r.iterations, 0);
    assert_eq!(r.power_flow, pf);
    assert_eq!(r.losses, diag_losses(&f, &pf));
    assert_eq!(r.losses, r.initial_losses);
}

#[test]
fn reactive_power_matches_grid_search() {
    let f = two_node_battery();
    let fc = ForecastSeries::constant(&f, 1, DT);
    let p = 0.02;
    let mut s = DispatchSchedule::zeros(1, 2);
    s.p_dis[0][1][0] = p;
    let r = restore_timestep(&f, &fc, &s, 0, &cfg()).unwrap();

    let bound = (0.05f64.powi(2) - p * p).sqrt();
    let grid = |lo: f64, hi: f64, n: usize| -> f64 {
        (0..=n)
            .map(|k| lo + (hi - lo) * k as f64 / n as f64)
            .min_by(|a, b| two_node_losses(&f, &fc, p, *a).total_cmp(&two_node_losses(&f, &fc, p, *b)))
            .unwrap()
    };
    let coarse = grid(-bound, bound, 2000);
    let step = 2.0 * bound / 2000.0;
    let fine = grid((coarse - step).max(-bound), (coarse + step).min(bound), 2000);
    assert!((r.q_bat[1][0] - fine).abs() < 1e-4, "{} vs {fine}", r.q_bat[1][0]);
    assert!(r.losses <= two_node_losses(&f, &fc, p, fine) + 1e-10);
    assert!(r.feasible);
}

#[test]
fn active_powers_are_untouched() {
    let f = two_node_battery();
    let fc = ForecastSeries::constant(&f, 2, DT);
    let mut s = DispatchSchedule::zeros(2, 2);
    s.p_dis[0][1][0] = 0.013;
    s.p_ch[1][1][0] = 0.021;
    s.soc[0][1][0] = 0.02;
    s.soc = s.soc_from_powers(&f, DT);
    let rr = restore_horizon(&f, &fc, &s, &cfg()).unwrap();
    let restored = rr.apply_to(&s);
    assert_eq!(restored.p_dis, s.p_dis);
    assert_eq!(restored.p_ch, s.p_ch);
    assert_eq!(restored.soc, s.soc);
    assert_eq!(restored.soc_from_powers(&f, DT), s.soc);
}

#[test]
fn starting_point_is_projected_onto_inverter_limits() {
    let f = two_node_battery();
    let fc = ForecastSeries::constant(&f, 1, DT);
    let mut s = DispatchSchedule::zeros(1, 2);
    s.p_dis[0][1][0] = 0.04;
    s.q_bat[0][1][0] = 0.5;
    let r = restore_timestep(&f, &fc, &s, 0, &cfg()).unwrap();
    let q = r.q_bat[1][0];
    assert!(0.04f64.powi(2) + q * q <= 0.05f64.powi(2) + 1e-15);
}

#[test]
fn diverging_power_flow_is_reported() {
    let f = parse_feeder(include_str!("../fixtures/two_node.feeder")).unwrap();
    let mut fc = ForecastSeries::constant(&f, 1, DT);
    fc.load[0][1][0] = C64::new(30.0, 30.0);
    let s = DispatchSchedule::zeros(1, 2);
    assert_eq!(
        restore_timestep(&f, &fc, &s, 0, &cfg()),
        Err(RestoreError::PowerFlowDiverged { t: 0 })
    );
}

#[test]
fn unreachable_voltage_limit_is_flagged() {
    let text = include_str!("../fixtures/two_node_battery.feeder").replace("load a 0.9 1.1", "load a 0.9999 1.1");
    let f = parse_feeder(&text).unwrap();
    let fc = ForecastSeries::constant(&f, 1, DT);
    let mut s = DispatchSchedule::zeros(1, 2);
    s.p_ch[0][1][0] = 0.05;
    match restore_timestep(&f, &fc, &s, 0, &cfg()) {
        Err(RestoreError::InfeasibleAtFixedP { t, violation, best }) => {
            assert_eq!(t, 0);
            assert!(violation > 1e-6);
            assert!(!best.feasible);
            assert_eq!(best.violations.voltage.len(), 1);
            assert_eq!(best.violations.voltage[0].0, 1);
            assert!(best.violations.voltage[0].2 < 0.0);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn schedule_must_cover_the_forecast() {
    let f = two_node_battery();
    let fc = ForecastSeries::constant(&f, 3, DT);
    let s = DispatchSchedule::zeros(2, 2);
    assert_eq!(
        restore_horizon(&f, &fc, &s, &cfg()),
        Err(RestoreError::HorizonMismatch { got: 2, expected: 3 })
    );
}

#[test]
fn gap_arithmetic() {
    assert_eq!(gap(10.0, 10.0, 1e-8).unwrap().gap_pct, 0.0);
    let g = gap(10.0, 10.2, 1e-8).unwrap();
    assert!((g.gap_pct - 1.9608).abs() < 1e-4);
    assert!((g.gap_pct - 0.2 / 10.2 * 100.0).abs() < 1e-12);
    assert!(gap(10.0, 10.0 - 1e-9, 1e-8).is_ok());
    assert!(matches!(gap(10.0, 9.9, 1e-8), Err(RestoreError::OrderingViolated { .. })));
    assert!(matches!(gap(1.0, 0.0, 1e-8), Err(RestoreError::InvalidGapInput { .. })));
    assert!(matches!(gap(f64::NAN, 1.0, 1e-8), Err(RestoreError::InvalidGapInput { .. })));
}

fn ieee13_schedule(steps: usize, case: Case) -> (Feeder, ForecastSeries, DispatchSchedule, Relaxation) {
    let f = ieee13();
    let (l, s) = case.fractions();
    let fc = scale_case(&synthetic_forecast(&f, steps, DT, 720.0, 2), l, s).unwrap();
    let r = solve_relaxation(&f, &fc, &BuilderConfig::default(), &BuildOptions::default(), &SolverConfig::default()).unwrap();
    let (sch, _) = r.problem.extract(&r.result.x, &r.result.z).unwrap();
    (f, fc, sch, r)
}

#[test]
fn restored_losses_bound_relaxed_losses_per_step() {
    let (f, fc, s, r) = ieee13_schedule(3, Case::HH);
    let rr = restore_horizon(&f, &fc, &s, &cfg()).unwrap();
    assert!(rr.all_ok());
    for (t, step) in rr.steps.iter().enumerate() {
        let step = step.as_ref().unwrap();
        let relaxed = r.problem.step_losses(&f, &r.result.x, t);
        assert!(step.losses >= relaxed - 1e-8, "t={t}: {} < {relaxed}", step.losses);
        assert!(step.losses <= step.initial_losses + 1e-12);
        assert!(step.power_flow.mismatch <= 1e-9);

        // Inverter limits at the restored point.
        for (k, b) in f.battery_nodes() {
            for p in b.phases.phases() {
                let net = s.net_battery(t, k, p);
                assert!(net * net + step.q_bat[k][p].powi(2) <= b.h_max * b.h_max + 1e-12);
            }
        }
        for (k, sol) in f.solar_nodes() {
            for p in sol.phases.phases() {
                let cap = sol.g_max.min(fc.solar[t][k][p]);
                assert!(step.p_sol[k][p] >= 0.0);
                assert!(step.p_sol[k][p].hypot(step.q_sol[k][p]) <= cap + 1e-12);
            }
        }
    }
    let dnlp = rr.dnlp_opt().unwrap();
    let socp: f64 = (0..3).map(|t| r.problem.step_losses(&f, &r.result.x, t)).sum();
    let g = gap(socp, dnlp, 1e-8).unwrap();
    assert!(g.gap_pct <= 5.0, "{g:?}");

    // An independent sweep on the applied set-points reproduces the state.
    let restored = rr.apply_to(&s);
    for t in 0..3 {
        let v = validate_schedule(&f, &fc, &restored, t, &SweepConfig::default()).unwrap();
        assert!(v.worst <= 1e-6, "t={t}: {}", v.worst);
    }
}

#[test]
fn reactive_only_mode_keeps_solar_active_power() {
    let (f, fc, s, _) = ieee13_schedule(1, Case::LH);
    let c = RestoreConfig {
        solar_active: false,
        ..cfg()
    };
    let r = restore_timestep(&f, &fc, &s, 0, &c).unwrap();
    for (k, sol) in f.solar_nodes() {
        for p in sol.phases.phases() {
            let cap = sol.g_max.min(fc.solar[0][k][p]);
            assert_eq!(r.p_sol[k][p], s.p_sol[0][k][p].clamp(0.0, cap));
        }
    }
    let full = restore_timestep(&f, &fc, &s, 0, &cfg()).unwrap();
    // The larger decision set can only help, up to the local method's accuracy.
    assert!(full.losses <= r.losses + 1e-7);
}

#[test]
fn single_step_horizon_equals_single_restoration() {
    let (f, fc, s, _) = ieee13_schedule(1, Case::LL);
    let rr = restore_horizon(&f, &fc, &s, &cfg()).unwrap();
    assert_eq!(rr.steps.len(), 1);
    assert_eq!(rr.steps[0], restore_timestep(&f, &fc, &s, 0, &cfg()));
}

#[test]
fn execution_mode_does_not_change_results() {
    let (f, fc, s, _) = ieee13_schedule(5, Case::HL);
    let a = restore_horizon_with(&f, &fc, &s, &cfg(), Execution::Serial).unwrap();
    let b = restore_horizon_with(&f, &fc, &s, &cfg(), Execution::Parallel).unwrap();
    assert_eq!(a.steps.len(), 5);
    for (x, y) in a.steps.iter().zip(&b.steps) {
        let (x, y) = (x.as_ref().unwrap(), y.as_ref().unwrap());
        assert_eq!(x.losses.to_bits(), y.losses.to_bits());
        assert_eq!(x, y);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn restoration_descends_from_the_projected_start(
        load in 0.02f64..0.3,
        pf in 0.0f64..0.8,
        net in -0.05f64..0.05,
        q0 in -0.05f64..0.05,
    ) {
        let f = two_node_battery();
        let mut fc = ForecastSeries::constant(&f, 1, DT);
        fc.load[0][1][0] = C64::new(load, load * pf);
        let mut s = DispatchSchedule::zeros(1, 2);
        if net >= 0.0 { s.p_dis[0][1][0] = net } else { s.p_ch[0][1][0] = -net }
        s.q_bat[0][1][0] = q0;
        let r = restore_timestep(&f, &fc, &s, 0, &cfg()).unwrap();
        prop_assert!(r.losses <= r.initial_losses + 1e-12);
        prop_assert!(r.power_flow.mismatch <= 1e-9);
        prop_assert!(net * net + r.q_bat[1][0].powi(2) <= 0.05f64.powi(2) + 1e-12);
        // Nothing beats the restored point along the q axis by more than the tolerance.
        let bound = (0.05f64.powi(2) - net * net).max(0.0).sqrt();
        for k in 0..=40 {
            let q = -bound + 2.0 * bound * k as f64 / 40.0;
            prop_assert!(two_node_losses(&f, &fc, net, q) >= r.losses - 1e-9);
        }
    }
}
