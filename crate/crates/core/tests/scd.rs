use conic::SolverConfig;
use dispatch::network::*;
use dispatch::schedule::DispatchSchedule;
use dispatch::scd::*;
use dispatch::socp::*;
use proptest::prelude::*;

const DT: f64 = 1.0 / 60.0;

fn fixture(name: &str) -> Feeder {
    let text = match name {
        "battery" => include_str!("../fixtures/two_node_battery.feeder"),
        "mi" => include_str!("../fixtures/two_node_mi.feeder"),
        "soctrack" => include_str!("../fixtures/two_node_soctrack.feeder"),
        "plain" => include_str!("../fixtures/two_node.feeder"),
        _ => unreachable!(),
    };
    parse_feeder(text).unwrap()
}

fn solver() -> SolverConfig {
    SolverConfig::default()
}

fn relaxed(f: &Feeder, fc: &ForecastSeries, cfg: &BuilderConfig) -> (DispatchSchedule, DualBundle, Relaxation) {
    let r = solve_relaxation(f, fc, cfg, &BuildOptions::default(), &solver()).unwrap();
    assert_eq!(r.result.status, conic::Status::Optimal);
    let (s, d) = r.problem.extract(&r.result.x, &r.result.z).unwrap();
    (s, d, r)
}

#[test]
fn detect_flags_products_above_threshold() {
    let mut s = DispatchSchedule::zeros(2, 2);
    s.p_dis[0][1][0] = 0.1;
    s.p_ch[0][1][0] = 0.05;
    s.p_dis[1][1][0] = 1e-4;
    s.p_ch[1][1][0] = 1e-3;
    let r = detect_scd(&s, SCD_TOL);
    assert_eq!(r.flagged, vec![(0, 1, 0)]);
    assert!(!r.clean);
    assert!((r.products[0][1][0] - 0.005).abs() < 1e-15);
    assert!((r.total - (0.005 + 1e-7)).abs() < 1e-15);
    assert_eq!(r.max, r.products[0][1][0]);

    let clean = detect_scd(&DispatchSchedule::zeros(3, 2), SCD_TOL);
    assert!(clean.clean && clean.total == 0.0);
}

#[test]
fn scd_text_has_one_record_per_flag() {
    let f = fixture("battery");
    let mut s = DispatchSchedule::zeros(2, 2);
    for t in 0..2 {
        s.p_dis[t][1][0] = 0.1;
        s.p_ch[t][1][0] = 0.1;
    }
    let text = detect_scd(&s, SCD_TOL).to_text(&f);
    assert_eq!(text.lines().filter(|l| l.starts_with("scd t=")).count(), 2);
    assert!(text.contains("node=load phase=a"));
}

#[test]
fn gamma_hand_example() {
    let mut d = DualBundle::zeros(3, 1);
    d.beta_up[0][0][0] = 1.0;
    d.beta_up[2][0][0] = 2.0;
    d.beta_lo[1][0][0] = 1.0;
    let g = gamma(&d, 0.5);
    assert_eq!(g[0][0][0], 1.0);
    assert_eq!(g[1][0][0], 0.5);
    assert_eq!(g[2][0][0], 1.0);
}

proptest! {
    #[test]
    fn gamma_is_a_suffix_sum(
        up in prop::collection::vec(0.0f64..10.0, 1..12),
        lo in prop::collection::vec(0.0f64..10.0, 1..12),
        dt in 0.01f64..2.0,
    ) {
        let steps = up.len().min(lo.len());
        let mut d = DualBundle::zeros(steps, 1);
        for t in 0..steps {
            d.beta_up[t][0][1] = up[t];
            d.beta_lo[t][0][1] = lo[t];
        }
        let g = gamma(&d, dt);
        for t in 0..steps {
            let direct: f64 = (t..steps).map(|s| dt * (up[s] - lo[s])).sum();
            prop_assert!((g[t][0][1] - direct).abs() <= 1e-9 * (1.0 + direct.abs()));
            prop_assert_eq!(g[t][0][0], 0.0);
        }
        prop_assert!((g[steps - 1][0][1] - dt * (up[steps - 1] - lo[steps - 1])).abs() < 1e-12);
    }
}

#[test]
fn first_condition_by_objective() {
    assert_eq!(c1_for(&ObjectiveKind::LossMin), C1::Holds(0.0));
    assert_eq!(c1_for(&ObjectiveKind::Degradation), C1::Holds(2.0));
    assert_eq!(c1_for(&ObjectiveKind::VoltDev { w_nom: 1.0 }), C1::Holds(0.0));
    assert_eq!(c1_for(&ObjectiveKind::HeadTrack { p_ref: vec![0.0] }), C1::Holds(0.0));
    assert_eq!(c1_for(&ObjectiveKind::VBTrack { p_ref: vec![0.0] }), C1::Holds(0.0));
    assert_eq!(c1_for(&ObjectiveKind::SoCTrack { b_target: 0.0 }), C1::NotApplicable);
}

#[test]
fn third_condition_is_strict() {
    let f = fixture("battery");
    let cfg = BuilderConfig::default();
    let mut d = DualBundle::zeros(2, 2);
    // Γ(0) = Δt β_up(0) exactly α.
    d.beta_up[0][1][0] = cfg.alpha / DT;
    let r = check_certificates(&f, &cfg, &d, DT);
    assert!(!r.c3 && !r.theorem);
    assert_eq!(r.c3_violations, vec![(0, 1, 0)]);
    // A1 and A2 still hold, so the corollary does.
    assert!(r.corollary && r.exact());

    d.beta_up[0][1][0] = 0.5 * cfg.alpha / DT;
    let r = check_certificates(&f, &cfg, &d, DT);
    assert!(r.c3 && r.theorem && r.exact());
    assert!((r.gamma[0][1][0] - 0.5 * cfg.alpha).abs() < 1e-15);
}

#[test]
fn zero_alpha_fails_both_certificates() {
    let f = fixture("battery");
    let cfg = BuilderConfig {
        alpha: 0.0,
        ..BuilderConfig::default()
    };
    let r = check_certificates(&f, &cfg, &DualBundle::zeros(2, 2), DT);
    assert!(!r.c2 && !r.a2 && !r.theorem && !r.corollary && !r.exact());
}

#[test]
fn soc_tracking_relies_on_positive_prices() {
    let f = fixture("battery");
    let cfg = BuilderConfig {
        objective: ObjectiveKind::SoCTrack { b_target: 0.03 },
        ..BuilderConfig::default()
    };
    let mut d = DualBundle::zeros(2, 2);
    d.lambda_p[1][1][0] = -0.2;
    let r = check_certificates(&f, &cfg, &d, DT);
    assert_eq!(r.c1, C1::NotApplicable);
    assert!(!r.a1 && !r.exact());
    assert_eq!(r.a1_violations, vec![(1, 1, 0)]);
    assert!(r.to_text(&f).contains("a1 t=1 node=load"));

    d.lambda_p[1][1][0] = 0.2;
    assert!(check_certificates(&f, &cfg, &d, DT).exact());
}

#[test]
fn loss_minimization_certifies_on_two_nodes() {
    let f = fixture("battery");
    let fc = ForecastSeries::constant(&f, 4, DT);
    let cfg = BuilderConfig::default();
    let (s, d, _) = relaxed(&f, &fc, &cfg);
    let cert = check_certificates(&f, &cfg, &d, DT);
    assert!(cert.theorem, "{cert:?}");
    assert!(detect_scd(&s, SCD_TOL).clean);
    // Prices of real power at a load bus are positive when losses are minimized.
    assert!(d.lambda_p.iter().all(|t| t[1][0] > 0.0));
}

#[test]
fn pathology_appears_without_penalty() {
    let f = fixture("soctrack");
    let fc = ForecastSeries::constant(&f, 3, DT);
    let cfg = BuilderConfig {
        alpha: 0.0,
        objective: ObjectiveKind::SoCTrack { b_target: 0.0 },
        ..BuilderConfig::default()
    };
    let (first, d, _) = relaxed(&f, &fc, &cfg);
    let scd = detect_scd(&first, SCD_TOL);
    assert_eq!(scd.flagged.len(), 3);
    // Discharge at the rating, charge the excess over the inverter circle.
    for t in 0..3 {
        assert!((first.p_dis[t][1][0] - 0.1).abs() < 1e-6);
        assert!((first.p_ch[t][1][0] - 0.05).abs() < 1e-6);
    }
    assert!(!check_certificates(&f, &cfg, &d, DT).exact());

    let (second, _) = two_step_enforce(&f, &fc, &cfg, &BuildOptions::default(), &first, &solver()).unwrap();
    assert!(detect_scd(&second, SCD_TOL).clean);
    for t in 0..3 {
        assert_eq!(second.p_dis[t][1][0] * second.p_ch[t][1][0], 0.0);
        assert!((second.net_battery(t, 1, 0) - first.net_battery(t, 1, 0)).abs() < 1e-6);
    }
}

#[test]
fn sign_modes_follow_net_output() {
    let f = fixture("battery");
    let mut s = DispatchSchedule::zeros(3, 2);
    s.p_dis[0][1][0] = 0.02;
    s.p_ch[1][1][0] = 0.01;
    let m = sign_modes(&f, &s);
    assert_eq!(m.len(), 3);
    assert_eq!(m[&(0, 1, 0)], Mode::Discharge);
    assert_eq!(m[&(1, 1, 0)], Mode::Charge);
    // A zero net output is treated as discharging with zero power.
    assert_eq!(m[&(2, 1, 0)], Mode::Discharge);
}

#[test]
fn two_step_keeps_a_clean_schedule() {
    let f = fixture("battery");
    let fc = ForecastSeries::constant(&f, 3, DT);
    let cfg = BuilderConfig::default();
    let (first, _, r1) = relaxed(&f, &fc, &cfg);
    let (second, r2) = two_step_enforce(&f, &fc, &cfg, &BuildOptions::default(), &first, &solver()).unwrap();
    assert!(detect_scd(&second, SCD_TOL).clean);
    // Fixing the modes of an already clean optimum costs nothing.
    assert!((r2.result.objective - r1.result.objective).abs() < 1e-8);
}

#[test]
fn oracle_enumerates_every_pattern() {
    let f = fixture("mi");
    let fc = ForecastSeries::constant(&f, 2, DT);
    let o = mi_oracle(&f, &fc, &BuilderConfig::default(), &BuildOptions::default(), 8, &solver()).unwrap();
    assert_eq!(o.patterns, 4);
    assert_eq!(o.feasible_patterns, 4);
    assert!(detect_scd(&o.schedule, 0.0).clean);
    assert_eq!(o.best.len(), 2);

    let err = mi_oracle(&f, &fc, &BuilderConfig::default(), &BuildOptions::default(), 1, &solver()).unwrap_err();
    assert_eq!(err, ScdError::BudgetExceeded { slots: 2, budget: 1 });
}

#[test]
fn oracle_without_batteries_is_one_solve() {
    let f = fixture("plain");
    let fc = ForecastSeries::constant(&f, 2, DT);
    let o = mi_oracle(&f, &fc, &BuilderConfig::default(), &BuildOptions::default(), 4, &solver()).unwrap();
    assert_eq!((o.patterns, o.feasible_patterns), (1, 1));
    let (_, _, r) = relaxed(&f, &fc, &BuilderConfig::default());
    assert!((o.objective - r.result.objective).abs() < 1e-9);
}

#[test]
fn relaxation_bounds_the_oracle_from_below() {
    let f = fixture("soctrack");
    let fc = ForecastSeries::constant(&f, 2, DT);
    let cfg = BuilderConfig {
        alpha: 0.0,
        objective: ObjectiveKind::SoCTrack { b_target: 0.0 },
        ..BuilderConfig::default()
    };
    let (_, _, r) = relaxed(&f, &fc, &cfg);
    let o = mi_oracle(&f, &fc, &cfg, &BuildOptions::default(), 8, &solver()).unwrap();
    // Here complementarity genuinely costs something.
    assert!(r.result.objective < o.objective - 1e-9);
}

#[test]
fn penalized_relaxation_matches_the_oracle() {
    let f = fixture("mi");
    let fc = ForecastSeries::constant(&f, 3, DT);
    let cfg = BuilderConfig::default();
    let (s, _, r) = relaxed(&f, &fc, &cfg);
    assert!(detect_scd(&s, SCD_TOL).clean);
    let base = r.problem.base_objective_value(&r.result.x).unwrap();
    let o = mi_oracle(&f, &fc, &cfg, &BuildOptions::default(), 8, &solver()).unwrap();
    assert_eq!(o.patterns, 8);
    assert!((base - o.objective).abs() <= 1e-6 * o.objective.abs(), "{base} vs {}", o.objective);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    // Whenever the certificate passes, the relaxed schedule is free of
    // simultaneous charging and discharging.
    #[test]
    fn certificate_is_sound(
        load in 0.02f64..0.4,
        pf in 0.0f64..0.6,
        b0 in 0.0f64..0.04,
        alpha in prop::sample::select(vec![0.0, 0.001, 0.01, 0.1]),
        objective in prop::sample::select(vec![
            ObjectiveKind::LossMin,
            ObjectiveKind::Degradation,
            ObjectiveKind::SoCTrack { b_target: 0.0 },
            ObjectiveKind::SoCTrack { b_target: 0.04 },
            ObjectiveKind::VBTrack { p_ref: vec![0.03] },
        ]),
    ) {
        let f = fixture("battery");
        let mut fc = ForecastSeries::constant(&f, 3, DT);
        for t in 0..3 {
            fc.load[t][1][0] = C64::new(load, load * pf);
        }
        let cfg = BuilderConfig { alpha, objective, ..BuilderConfig::default() };
        let opts = BuildOptions { initial_soc: Some(vec![[0.0; 3], [b0, 0.0, 0.0]]), ..BuildOptions::default() };
        let r = solve_relaxation(&f, &fc, &cfg, &opts, &solver()).unwrap();
        prop_assume!(r.result.status == conic::Status::Optimal);
        let (s, d) = r.problem.extract(&r.result.x, &r.result.z).unwrap();
        let cert = check_certificates(&f, &cfg, &d, DT);
        if cert.exact() {
            prop_assert!(detect_scd(&s, SCD_TOL).clean, "{cert:?} {:?}", s.max_scd_product());
        }
    }
}
