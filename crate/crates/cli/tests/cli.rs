use std::path::Path;
use std::process::{Command, Output};

fn fixture(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../core/fixtures")
        .join(name)
        .to_string_lossy()
        .into_owned()
}

fn dispatch(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dispatch"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn solve_writes_schedule_and_certificate() {
    let dir = tempfile::tempdir().unwrap();
    let o = dispatch(&["solve", "--feeder", &fixture("two_node_battery.feeder"), "--horizon", "3"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("status=Optimal"));
    assert!(text.contains("theorem=true"));
    let tsv = std::fs::read_to_string(dir.path().join("schedule.tsv")).unwrap();
    assert_eq!(tsv.lines().count(), 4);
    assert!(tsv.starts_with("t\tload.a.p_dis\tload.a.p_ch\tload.a.soc"));
}

#[test]
fn simulate_emits_all_reports() {
    let dir = tempfile::tempdir().unwrap();
    let o = dispatch(
        &["simulate", "--case", "HH", "--horizon", "3", "--steps", "2", "--cut-rounds", "1"],
        dir.path(),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("steps=2 failed=0"));
    for f in ["run.log", "soc.tsv", "battery_power.tsv", "gap.tsv", "reactive.tsv", "voltage_error.tsv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn scd_check_runs_the_second_stage() {
    let dir = tempfile::tempdir().unwrap();
    let o = dispatch(
        &[
            "scd-check",
            "--feeder",
            &fixture("two_node_soctrack.feeder"),
            "--horizon",
            "3",
            "--alpha",
            "0",
            "--objective",
            "soctrack=0",
        ],
        dir.path(),
    );
    assert!(o.status.success());
    let text = stdout(&o);
    assert!(text.contains("scd clean=false"));
    assert!(text.contains("two-step:\nscd clean=true"));
    assert!(dir.path().join("second_stage.tsv").exists());
}

#[test]
fn oracle_and_gap_reports() {
    let dir = tempfile::tempdir().unwrap();
    let o = dispatch(&["mi-oracle", "--feeder", &fixture("two_node_mi.feeder"), "--horizon", "3"], dir.path());
    assert!(o.status.success());
    assert!(stdout(&o).contains("patterns=8"));

    let o = dispatch(&["gap-report", "--case", "LL", "--horizon", "2", "--cut-rounds", "1"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("gap_pct"));

    let o = dispatch(&["validate", "--case", "LL", "--horizon", "2", "--cut-rounds", "1"], dir.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o).lines().count(), 3);
}

#[test]
fn bad_input_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let o = dispatch(&["solve", "--objective", "nonsense"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nonsense"));

    let o = dispatch(&["solve", "--case", "XX"], dir.path());
    assert!(!o.status.success());

    let o = dispatch(&["solve", "--feeder", "/nonexistent/feeder"], dir.path());
    assert_eq!(o.status.code(), Some(1));

    let o = dispatch(&["mi-oracle", "--horizon", "30", "--budget", "4"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}
