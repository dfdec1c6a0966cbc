use dispatch::network::*;
use dispatch::powerflow::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const IEEE13: &str = include_str!("../fixtures/ieee13.feeder");
const TWO_NODE: &str = include_str!("../fixtures/two_node.feeder");
const GOLDEN: &str = include_str!("../fixtures/ieee13_golden.tsv");

fn nominal_loads(f: &Feeder) -> InjectionSet {
    f.nodes.iter().map(|n| [-n.load[0], -n.load[1], -n.load[2]]).collect()
}

/// Receiving-end voltage of a single line feeding a constant-power load from
/// a 1 pu source, from the closed-form biquadratic in |V₂|.
fn two_node_oracle(z: C64, s: C64) -> (f64, f64) {
    let b = 1.0 - 2.0 * (z.re * s.re + z.im * s.im);
    let v2sq = (b + (b * b - 4.0 * z.norm_sqr() * s.norm_sqr()).sqrt()) / 2.0;
    let loss = z.re * s.norm_sqr() / v2sq;
    (v2sq.sqrt(), loss)
}

#[test]
fn two_node_matches_closed_form() {
    let f = parse_feeder(TWO_NODE).unwrap();
    let z = f.branches[0].z[0][0];
    assert!((z - C64::new(0.01, 0.02)).norm() < 1e-15);
    let s = C64::new(0.1, 0.05);
    let r = sweep(&f, &nominal_loads(&f), &SweepConfig::default()).unwrap();
    let (v2, loss) = two_node_oracle(z, s);
    assert!((r.voltages[1][0].norm() - v2).abs() < 1e-9, "{} vs {v2}", r.voltages[1][0].norm());
    assert!((losses(&r) - loss).abs() < 1e-9);
    assert!((diag_losses(&f, &r) - loss).abs() < 1e-9);
}

#[test]
fn two_node_first_iterations_follow_the_recursion() {
    // V₂ ← 1 − z·conj(S/V₂) from a flat start, computed directly.
    let f = parse_feeder(TWO_NODE).unwrap();
    let z = C64::new(0.01, 0.02);
    let s = C64::new(0.1, 0.05);
    let mut v = C64::new(1.0, 0.0);
    for k in 1..=3 {
        v = C64::new(1.0, 0.0) - z * (s / v).conj();
        let cfg = SweepConfig { pf_tol: 0.0, max_iter: k };
        let r = sweep_from(&f, &nominal_loads(&f), &cfg, None).unwrap();
        assert!((r.voltages[1][0] - v).norm() < 1e-15, "iteration {k}");
    }
}

#[test]
fn zero_injection_gives_nominal_voltages() {
    let f = parse_feeder(IEEE13).unwrap();
    let inj = vec![[C64::new(0.0, 0.0); 3]; f.nodes.len()];
    let r = sweep(&f, &inj, &SweepConfig::default()).unwrap();
    let nom = nominal_voltage();
    for (i, n) in f.nodes.iter().enumerate() {
        for p in n.phases.phases() {
            assert_eq!(r.voltages[i][p], nom[p]);
        }
    }
    assert_eq!(losses(&r), 0.0);
}

#[test]
fn ieee13_matches_golden_newton_solution() {
    let f = parse_feeder(IEEE13).unwrap();
    let r = sweep(&f, &nominal_loads(&f), &SweepConfig::default()).unwrap();
    assert!(r.iterations < 20, "{}", r.iterations);
    let mut rows = 0;
    for line in GOLDEN.lines().filter(|l| !l.starts_with('#')) {
        let c: Vec<&str> = line.split('\t').collect();
        let i = f.node_index(c[0]).unwrap();
        let p = "abc".find(c[1]).unwrap();
        let v = C64::new(c[2].parse().unwrap(), c[3].parse().unwrap());
        assert!((r.voltages[i][p] - v).norm() < 1e-6, "{} {}: {} vs {v}", c[0], c[1], r.voltages[i][p]);
        rows += 1;
    }
    assert_eq!(rows, 32);
}

#[test]
fn converged_state_is_a_fixed_point() {
    let f = parse_feeder(IEEE13).unwrap();
    let inj = nominal_loads(&f);
    let cfg = SweepConfig::default();
    let r = sweep(&f, &inj, &cfg).unwrap();
    let again = sweep_from(&f, &inj, &cfg, Some(&r.voltages)).unwrap();
    assert!(again.converged);
    assert_eq!(again.iterations, 1);
}

#[test]
fn non_convergence_is_reported() {
    let f = parse_feeder(TWO_NODE).unwrap();
    // Far beyond the loadability limit of the line.
    let inj = vec![[C64::new(0.0, 0.0); 3], [C64::new(-30.0, -30.0), C64::new(0.0, 0.0), C64::new(0.0, 0.0)]];
    let err = sweep(&f, &inj, &SweepConfig::default()).unwrap_err();
    assert!(matches!(err, PowerFlowError::NotConverged { iterations: 100, .. }));
}

fn random_injections(f: &Feeder, rng: &mut ChaCha8Rng) -> InjectionSet {
    f.nodes
        .iter()
        .map(|n| {
            let mut s = [C64::new(0.0, 0.0); 3];
            for p in n.phases.phases() {
                s[p] = C64::new(rng.gen_range(-0.3..0.15), rng.gen_range(-0.2..0.2));
            }
            s
        })
        .collect()
}

/// Head injection = Σ loads − Σ generation + losses.
fn check_conservation(f: &Feeder, inj: &InjectionSet, r: &PowerFlowResult) {
    let mut net = C64::new(0.0, 0.0);
    for s in inj {
        net += s[0] + s[1] + s[2];
    }
    let mut reactive_loss = 0.0;
    for (k, b) in f.branches.iter().enumerate() {
        for p in b.phases.phases() {
            reactive_loss += ((r.voltages[b.from][p] - r.voltages[b.to][p]) * r.currents[k][p].conj()).im;
        }
    }
    assert!((r.head_power.re - (-net.re + r.losses)).abs() <= 1e-9, "{} vs {}", r.head_power.re, -net.re + r.losses);
    assert!((r.head_power.im - (-net.im + reactive_loss)).abs() <= 1e-9);
}

#[test]
fn conservation_on_random_injection_sets() {
    let f = parse_feeder(IEEE13).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let inj = random_injections(&f, &mut rng);
        let r = sweep(&f, &inj, &SweepConfig::default()).unwrap();
        check_conservation(&f, &inj, &r);
        assert!(r.losses >= 0.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn losses_do_not_grow_when_loads_shrink(k in 0.05f64..1.0) {
        let f = parse_feeder(IEEE13).unwrap();
        let base = nominal_loads(&f);
        let scaled: InjectionSet = base.iter().map(|s| [s[0] * k, s[1] * k, s[2] * k]).collect();
        let cfg = SweepConfig::default();
        let l0 = sweep(&f, &base, &cfg).unwrap().losses;
        let l1 = sweep(&f, &scaled, &cfg).unwrap().losses;
        prop_assert!(l1 <= l0 + 1e-12);
    }

    #[test]
    fn synthetic_feeders_conserve_power(seed in 0u64..1000) {
        let f = synthetic_feeder(40, 3, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inj: InjectionSet = random_injections(&f, &mut rng).iter().map(|s| [s[0] * 0.2, s[1] * 0.2, s[2] * 0.2]).collect();
        let r = sweep(&f, &inj, &SweepConfig::default()).unwrap();
        check_conservation(&f, &inj, &r);
    }
}
