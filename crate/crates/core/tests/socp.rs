use conic::{certify, solve, Cone, SolverConfig, Status};
use dispatch::network::*;
use dispatch::powerflow::{sweep, SweepConfig};
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

fn ieee13_low(steps: usize) -> (Feeder, ForecastSeries) {
    let f = ieee13();
    let fc = synthetic_forecast(&f, steps, DT, 720.0, 3);
    let fc = scale_case(&fc, 0.5, 0.5).unwrap();
    (f, fc)
}

fn plain() -> BuilderConfig {
    BuilderConfig {
        psd_cut_rounds: 0,
        ..BuilderConfig::default()
    }
}

/// Largest violation of any cone row at `x`, with slacks `b − A x`.
fn violation(p: &ConicProblem, x: &[f64]) -> f64 {
    let ax = p.program.a.mul(x);
    let s: Vec<f64> = p.program.b.iter().zip(&ax).map(|(b, a)| b - a).collect();
    let z = vec![0.0; s.len()];
    certify(&p.program, x, &s, &z).primal_cone_violation
}

/// Exact states for a schedule: one sweep per step, state of charge by the
/// exact recursion.
fn exact_states(f: &Feeder, fc: &ForecastSeries, s: &mut DispatchSchedule) -> Vec<dispatch::powerflow::PowerFlowResult> {
    s.soc[0] = f.initial_soc();
    s.soc = s.soc_from_powers(f, fc.dt);
    (0..fc.len())
        .map(|t| sweep(f, &s.injections(fc, t), &SweepConfig::default()).unwrap())
        .collect()
}

#[test]
fn two_node_battery_counts_by_hand() {
    let f = two_node_battery();
    let fc = ForecastSeries::constant(&f, 1, DT);
    let p = build(&f, &fc, &plain()).unwrap();
    let c = p.counts();
    // Variables: W_load, I, Re/Im S, Re/Im S_net, P^d, P^c, q, B.
    assert_eq!(c.vars, 10);
    // Voltage drop (1), balance re/im (2), device injection re/im (2), SoC (1).
    assert_eq!(c.equality_rows, 6);
    // Voltage pair, P^d pair, P^c pair, SoC pair.
    assert_eq!(c.inequality_rows, 8);
    // Line limit (3), inverter circle (3), |S|² ≤ W I (4).
    assert_eq!((c.soc_blocks, c.soc_rows), (3, 10));
    assert_eq!(c.linear_rows(), 14);
}

#[test]
fn counts_scale_linearly_in_horizon() {
    let f = ieee13();
    let one = build(&f, &ForecastSeries::constant(&f, 1, DT), &plain()).unwrap().counts();
    let five = build(&f, &ForecastSeries::constant(&f, 5, DT), &plain()).unwrap().counts();
    assert_eq!(five.vars, 5 * one.vars);
    assert_eq!(five.soc_rows, 5 * one.soc_rows);
    assert_eq!(five.equality_rows, 5 * one.equality_rows);
}

#[test]
fn empty_and_mismatched_forecasts_are_rejected() {
    let f = two_node_battery();
    let empty = ForecastSeries::zeros(2, 0, DT);
    assert!(matches!(build(&f, &empty, &plain()), Err(SocpError::HorizonMismatch(_))));
    let wrong = ForecastSeries::zeros(3, 2, DT);
    assert!(matches!(build(&f, &wrong, &plain()), Err(SocpError::HorizonMismatch(_))));
}

#[test]
fn tracking_references_must_cover_the_horizon() {
    let f = two_node_battery();
    let fc = ForecastSeries::constant(&f, 3, DT);
    for objective in [
        ObjectiveKind::HeadTrack { p_ref: vec![0.1, 0.1] },
        ObjectiveKind::VBTrack { p_ref: vec![] },
        ObjectiveKind::HeadTrack { p_ref: vec![f64::NAN] },
    ] {
        let cfg = BuilderConfig { objective, ..plain() };
        assert!(matches!(build(&f, &fc, &cfg), Err(SocpError::UnsupportedObjective(_))));
    }
    let cfg = BuilderConfig {
        objective: ObjectiveKind::HeadTrack { p_ref: vec![0.1] },
        ..plain()
    };
    assert!(build(&f, &fc, &cfg).is_ok());
}

#[test]
fn negative_alpha_is_invalid() {
    let f = two_node_battery();
    let fc = ForecastSeries::constant(&f, 1, DT);
    let cfg = BuilderConfig { alpha: -1.0, ..plain() };
    assert!(matches!(build(&f, &fc, &cfg), Err(SocpError::InvalidConfig(_))));
}

#[test]
fn simplified_model_needs_equivalent_efficiency() {
    let f = two_node_battery();
    let fc = ForecastSeries::constant(&f, 1, DT);
    let cfg = BuilderConfig {
        battery_model: BatteryModel::Simplified,
        ..plain()
    };
    assert!(matches!(build(&f, &fc, &cfg), Err(SocpError::InvalidConfig(_))));
}

#[test]
fn objective_names_parse() {
    assert_eq!(ObjectiveKind::parse("loss").unwrap(), ObjectiveKind::LossMin);
    assert_eq!(ObjectiveKind::parse("degradation").unwrap(), ObjectiveKind::Degradation);
    assert_eq!(ObjectiveKind::parse("voltdev").unwrap(), ObjectiveKind::VoltDev { w_nom: 1.0 });
    assert_eq!(
        ObjectiveKind::parse("headtrack=0.1,0.2").unwrap(),
        ObjectiveKind::HeadTrack { p_ref: vec![0.1, 0.2] }
    );
    assert_eq!(ObjectiveKind::parse("soctrack=0.03").unwrap(), ObjectiveKind::SoCTrack { b_target: 0.03 });
    for bad in ["", "losses", "soctrack", "soctrack=1,2", "headtrack=x", "loss=1"] {
        assert!(ObjectiveKind::parse(bad).is_err(), "{bad}");
    }
    for k in [ObjectiveKind::LossMin, ObjectiveKind::Degradation] {
        assert_eq!(ObjectiveKind::parse(k.name()).unwrap(), k);
    }
}

#[test]
fn zero_point_extracts_to_zero_schedule() {
    let f = two_node_battery();
    let fc = ForecastSeries::constant(&f, 2, DT);
    let p = build(&f, &fc, &plain()).unwrap();
    let x = vec![0.0; p.program.num_vars()];
    let z = vec![0.0; p.program.num_rows()];
    let (s, d) = p.extract(&x, &z).unwrap();
    assert_eq!(s.max_scd_product(), 0.0);
    for t in 0..2 {
        assert_eq!(s.p_dis[t][1][0], 0.0);
        assert_eq!(s.q_bat[t][1][0], 0.0);
        assert_eq!(s.soc[t + 1][1][0], 0.0);
        assert_eq!(d.lambda_p[t][1][0], 0.0);
    }
    // The initial state comes from the feeder, not from x.
    assert_eq!(s.soc[0][1][0], 0.02);
    assert!(matches!(p.extract(&x[1..], &z), Err(SocpError::SizeMismatch { .. })));
}

#[test]
fn layout_round_trip() {
    let f = two_node_battery();
    let fc = ForecastSeries::constant(&f, 2, DT);
    let p = build(&f, &fc, &plain()).unwrap();
    let mut x = vec![0.0; p.program.num_vars()];
    let v = p.layout.index(VarKey::PDis { t: 1, node: 1, phase: 0 }).unwrap();
    x[v] = 0.05;
    let q = p.layout.index(VarKey::QBat { t: 0, node: 1, phase: 0 }).unwrap();
    x[q] = -0.01;
    let (s, _) = p.extract(&x, &vec![0.0; p.program.num_rows()]).unwrap();
    assert_eq!(s.p_dis[1][1][0], 0.05);
    assert_eq!(s.p_dis[0][1][0], 0.0);
    assert_eq!(s.q_bat[0][1][0], -0.01);
    // No device, no variable.
    assert!(p.layout.index(VarKey::PDis { t: 0, node: 0, phase: 0 }).is_none());
    assert!(p.layout.index(VarKey::PSol { t: 0, node: 1, phase: 0 }).is_none());
    assert!(p.layout.index(VarKey::PDis { t: 2, node: 1, phase: 0 }).is_none());
}

#[test]
fn base_objective_is_the_loss_functional() {
    let f = two_node_battery();
    let fc = ForecastSeries::constant(&f, 3, DT);
    for alpha in [0.0, 0.01] {
        let cfg = BuilderConfig { alpha, ..plain() };
        let p = build(&f, &fc, &cfg).unwrap();
        let r = solve(&p.program, &SolverConfig::default());
        assert_eq!(r.status, Status::Optimal);
        let base = p.base_objective_value(&r.x).unwrap();
        let full = p.objective_value(&r.x).unwrap();
        if alpha == 0.0 {
            assert_eq!(base, full);
        } else {
            let (s, _) = p.extract(&r.x, &r.z).unwrap();
            let pen: f64 = (0..3).map(|t| s.p_dis[t][1][0]).sum::<f64>() * alpha * (1.0 / 0.95 - 0.95);
            assert!((full - base - pen).abs() < 1e-12);
        }
        let r_line = f.branches[0].z[0][0].re;
        let losses: f64 = (0..3)
            .map(|t| {
                let i = p.layout.index(VarKey::I { t, branch: 0, i: 0, j: 0, imag: false }).unwrap();
                r_line * r.x[i]
            })
            .sum();
        assert!((base - losses).abs() < 1e-8, "{base} vs {losses}");
    }
}

#[test]
fn exact_states_lift_to_feasible_points() {
    let (f, fc) = ieee13_low(3);
    let p = build(&f, &fc, &plain()).unwrap();
    let mut s = DispatchSchedule::zeros(3, f.nodes.len());
    let k = f.node_index("680").unwrap();
    for t in 0..3 {
        for ph in 0..3 {
            s.p_dis[t][k][ph] = 0.01;
            s.q_bat[t][k][ph] = -0.005;
        }
        for (i, sol) in f.solar_nodes() {
            for ph in sol.phases.phases() {
                let cap = sol.g_max.min(fc.solar[t][i][ph]);
                s.p_sol[t][i][ph] = 0.6 * cap;
                s.q_sol[t][i][ph] = 0.3 * cap;
            }
        }
    }
    let states = exact_states(&f, &fc, &mut s);
    let x = p.lift(&f, &fc, &states, &s).unwrap();
    assert!(violation(&p, &x) < 1e-8, "{}", violation(&p, &x));

    // Sandwich: the relaxed optimum lies below every exact point.
    let r = solve(&p.program, &SolverConfig::default());
    assert_eq!(r.status, Status::Optimal);
    assert!(r.objective <= p.objective_value(&x).unwrap() + 1e-8);
    for t in 0..3 {
        let exact: f64 = dispatch::powerflow::diag_losses(&f, &states[t]);
        assert!((p.step_losses(&f, &x, t) - exact).abs() < 1e-12);
    }
}

#[test]
fn cuts_keep_exact_states_feasible() {
    let (f, fc) = ieee13_low(2);
    let cfg = BuilderConfig {
        psd_cut_rounds: 2,
        ..BuilderConfig::default()
    };
    let relax = solve_relaxation(&f, &fc, &cfg, &BuildOptions::default(), &SolverConfig::default()).unwrap();
    assert_eq!(relax.result.status, Status::Optimal);
    assert!(relax.rounds >= 1);
    let plain_opt = {
        let p = build(&f, &fc, &BuilderConfig { psd_cut_rounds: 0, ..cfg.clone() }).unwrap();
        solve(&p.program, &SolverConfig::default()).objective
    };
    // Cuts only tighten.
    assert!(relax.result.objective >= plain_opt - 1e-9);

    let (mut s, _) = relax.problem.extract(&relax.result.x, &relax.result.z).unwrap();
    let states = exact_states(&f, &fc, &mut s);
    let x = relax.problem.lift(&f, &fc, &states, &s).unwrap();
    assert!(violation(&relax.problem, &x) < 1e-8);
    assert!(relax.result.objective <= relax.problem.objective_value(&x).unwrap() + 1e-8);
}

#[test]
fn relaxation_admits_simultaneous_charge_and_discharge() {
    // Complementarity is not part of the relaxation: an exact state with
    // P^d = P^c > 0 is feasible.
    let f = two_node_battery();
    let fc = ForecastSeries::constant(&f, 2, DT);
    let p = build(&f, &fc, &plain()).unwrap();
    let mut s = DispatchSchedule::zeros(2, 2);
    for t in 0..2 {
        s.p_dis[t][1][0] = 0.03;
        s.p_ch[t][1][0] = 0.03;
    }
    let states = exact_states(&f, &fc, &mut s);
    let x = p.lift(&f, &fc, &states, &s).unwrap();
    assert!(violation(&p, &x) < 1e-9);
    assert!(s.max_scd_product() > 0.0);
    assert!(p.program.cones.iter().all(|c| matches!(c, Cone::Zero(_) | Cone::NonNeg(_) | Cone::Soc(_))));
}

#[test]
fn penalty_trades_losses_for_less_discharge() {
    let (f, fc) = ieee13_low(3);
    let mut last: Option<(f64, f64)> = None;
    for alpha in [0.0, 0.01, 0.1] {
        let p = build(&f, &fc, &BuilderConfig { alpha, ..plain() }).unwrap();
        let r = solve(&p.program, &SolverConfig::default());
        assert_eq!(r.status, Status::Optimal);
        let base = p.base_objective_value(&r.x).unwrap();
        let (s, _) = p.extract(&r.x, &r.z).unwrap();
        let dis: f64 = s.p_dis.iter().flatten().flatten().sum();
        if let Some((b0, d0)) = last {
            assert!(base >= b0 - 1e-8, "{base} < {b0}");
            assert!(dis <= d0 + 1e-7, "{dis} > {d0}");
        }
        last = Some((base, dis));
    }
}

#[test]
fn full_battery_binds_the_upper_energy_limit() {
    let f = two_node_battery();
    let fc = ForecastSeries::constant(&f, 3, DT);
    let cfg = BuilderConfig {
        objective: ObjectiveKind::SoCTrack { b_target: 1.0 },
        ..plain()
    };
    let opts = BuildOptions {
        initial_soc: Some(vec![[0.0; 3], [0.04, 0.0, 0.0]]),
        ..BuildOptions::default()
    };
    let p = build_with(&f, &fc, &cfg, &opts).unwrap();
    let r = solve(&p.program, &SolverConfig::default());
    assert_eq!(r.status, Status::Optimal);
    let (s, d) = p.extract(&r.x, &r.z).unwrap();
    assert!((s.soc[3][1][0] - 0.04).abs() < 1e-7);
    assert!(d.beta_up[2][1][0] > 1e-6, "{:?}", d.beta_up);
    assert!(d.beta_lo.iter().flatten().flatten().all(|&b| b.abs() < 1e-7));
}

#[test]
fn mode_assignment_removes_the_excluded_variable() {
    let f = two_node_battery();
    let fc = ForecastSeries::constant(&f, 2, DT);
    let mut opts = BuildOptions::default();
    opts.modes.insert((0, 1, 0), Mode::Charge);
    opts.modes.insert((1, 1, 0), Mode::Discharge);
    let p = build_with(&f, &fc, &plain(), &opts).unwrap();
    assert!(p.layout.index(VarKey::PDis { t: 0, node: 1, phase: 0 }).is_none());
    assert!(p.layout.index(VarKey::PCh { t: 0, node: 1, phase: 0 }).is_some());
    assert!(p.layout.index(VarKey::PCh { t: 1, node: 1, phase: 0 }).is_none());
    assert_eq!(p.counts().vars, build(&f, &fc, &plain()).unwrap().counts().vars - 2);
}

/// All-three-phase variant of the synthetic 123-node feeder, matching the
/// 3×3 matrix variables the reported problem sizes assume.
fn three_phase_123() -> Feeder {
    let f = synthetic_feeder(123, 16, 7);
    let mut nodes = f.nodes.clone();
    let mut branches = f.branches.clone();
    for n in &mut nodes {
        n.phases = PhaseMask::ABC;
        if let Some(b) = &mut n.battery {
            b.phases = PhaseMask::ABC;
        }
        if let Some(s) = &mut n.solar {
            s.phases = PhaseMask::ABC;
        }
    }
    for b in &mut branches {
        b.phases = PhaseMask::ABC;
        for r in 0..3 {
            for c in 0..3 {
                b.z[r][c] = if r == c { C64::new(0.006, 0.012) } else { C64::new(0.002, 0.0045) };
            }
        }
    }
    Feeder::new(f.bases, nodes, branches, f.slack).unwrap()
}

#[test]
fn problem_size_at_123_node_scale() {
    let f = three_phase_123();
    let fc = synthetic_forecast(&f, 30, DT, 720.0, 1);
    let c = build(&f, &fc, &plain()).unwrap().counts();
    let within = |got: usize, reported: f64| (got as f64 / reported - 1.0).abs() <= 0.35;
    assert!(within(c.vars, 108_000.0), "{c:?}");
    assert!(within(c.equality_rows, 48_000.0), "{c:?}");
    assert!(within(c.soc_blocks, 81_000.0), "{c:?}");
}

fn clarabel_objective(p: &conic::ConeProgram) -> f64 {
    use clarabel::algebra::CscMatrix as CM;
    use clarabel::solver::*;
    let n = p.num_vars();
    let pm = CM::<f64>::zeros((n, n));
    let a = CM::new(p.a.nrows, p.a.ncols, p.a.colptr.clone(), p.a.rowval.clone(), p.a.nzval.clone());
    let cones: Vec<SupportedConeT<f64>> = p
        .cones
        .iter()
        .map(|c| match *c {
            Cone::Zero(d) => ZeroConeT(d),
            Cone::NonNeg(d) => NonnegativeConeT(d),
            Cone::Soc(d) => SecondOrderConeT(d),
        })
        .collect();
    let settings = DefaultSettingsBuilder::default()
        .verbose(false)
        .tol_gap_abs(1e-10)
        .tol_gap_rel(1e-10)
        .tol_feas(1e-10)
        .build()
        .unwrap();
    let mut s = DefaultSolver::new(&pm, &p.c, &a, &p.b, &cones, settings).unwrap();
    s.solve();
    assert!(matches!(s.solution.status, SolverStatus::Solved | SolverStatus::AlmostSolved));
    s.solution.obj_val + p.c0
}

#[test]
fn ieee13_matches_reference_solver() {
    let f = ieee13();
    let fc = synthetic_forecast(&f, 5, DT, 720.0, 1);
    let p = build(&f, &fc, &plain()).unwrap();
    let q = conic::dump::parse(&p.dump()).unwrap();
    let r = solve(&q, &SolverConfig::default());
    assert_eq!(r.status, Status::Optimal);
    assert!(r.gap <= 1e-8 && r.primal_residual <= 1e-8 && r.dual_residual <= 1e-8, "{r:?}");
    let reference = clarabel_objective(&q);
    assert!((r.objective - reference).abs() / reference.abs() < 1e-6, "{} vs {reference}", r.objective);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn rank_one_points_are_feasible(
        pd in prop::collection::vec(0.0f64..0.05, 2),
        pc in prop::collection::vec(0.0f64..0.05, 2),
        q in prop::collection::vec(-1.0f64..1.0, 2),
    ) {
        let f = two_node_battery();
        let fc = ForecastSeries::constant(&f, 2, DT);
        let p = build(&f, &fc, &plain()).unwrap();
        let mut s = DispatchSchedule::zeros(2, 2);
        for t in 0..2 {
            s.p_dis[t][1][0] = pd[t];
            s.p_ch[t][1][0] = pc[t];
            let net: f64 = pd[t] - pc[t];
            s.q_bat[t][1][0] = q[t] * (0.05f64.powi(2) - net * net).sqrt();
        }
        let states = exact_states(&f, &fc, &mut s);
        let x = p.lift(&f, &fc, &states, &s).unwrap();
        prop_assert!(violation(&p, &x) < 1e-9);
        let r = solve(&p.program, &SolverConfig::default());
        prop_assert!(r.objective <= p.objective_value(&x).unwrap() + 1e-8);
    }
}
