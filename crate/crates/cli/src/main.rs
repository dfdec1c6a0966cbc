use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use dispatch::driver::{self, prepare_forecast, ReportKind, RunConfig};
use dispatch::network::{parse_feeder, parse_forecast, Case, Feeder, ForecastSeries};
use dispatch::powerflow::validate_schedule;
use dispatch::restore::{gap, restore_horizon_with};
use dispatch::scd::{check_certificates, detect_scd, mi_oracle, two_step_enforce, SCD_TOL};
use dispatch::socp::{solve_relaxation, BatteryModel, BuildOptions, ObjectiveKind, Relaxation};

const IEEE13: &str = include_str!("../../core/fixtures/ieee13.feeder");

#[derive(Parser)]
#[command(name = "dispatch", version, about = "Battery and solar dispatch on unbalanced radial feeders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one multi-period relaxation and print its certificate.
    Solve(Common),
    /// Receding-horizon simulation with restoration and plant sweeps.
    Simulate(Common),
    /// Compare solved and restored voltages against independent sweeps.
    Validate(Common),
    /// Detect simultaneous charging and discharging, enforcing if needed.
    ScdCheck(Common),
    /// Relaxed vs restored losses over one horizon.
    GapReport(Common),
    /// Enumerate charge/discharge patterns for the exact optimum.
    MiOracle {
        #[command(flatten)]
        common: Common,
        /// Largest number of battery slots to enumerate.
        #[arg(long, default_value_t = 12)]
        budget: usize,
    },
}

#[derive(Args, Clone)]
struct Common {
    /// Feeder file; the bundled IEEE 13-node feeder if omitted.
    #[arg(long)]
    feeder: Option<PathBuf>,
    /// Forecast file; a seeded synthetic profile if omitted.
    #[arg(long)]
    forecast: Option<PathBuf>,
    #[arg(long, value_parser = parse_case)]
    case: Option<Case>,
    #[arg(long, default_value_t = 30)]
    horizon: usize,
    /// Simulated steps (simulate only).
    #[arg(long, default_value_t = 10)]
    steps: usize,
    /// Step length in minutes.
    #[arg(long, default_value_t = 1.0)]
    dt_minutes: f64,
    #[arg(long, default_value_t = 0.01)]
    alpha: f64,
    /// loss, voltdev[=w], headtrack=p[,p..], degradation, vbtrack=p[,p..], soctrack=b
    #[arg(long, default_value = "loss")]
    objective: String,
    #[arg(long, default_value = "exact", value_parser = parse_model)]
    battery_model: BatteryModel,
    /// Rounds of eigenvector cuts on top of the minor cones.
    #[arg(long, default_value_t = 3)]
    cut_rounds: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Start of the synthetic profile, minutes after midnight.
    #[arg(long, default_value_t = 720.0)]
    start_minute: f64,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

fn parse_case(s: &str) -> Result<Case, String> {
    Case::parse(s).ok_or_else(|| format!("unknown case {s:?}, expected LL, HL, LH or HH"))
}

fn parse_model(s: &str) -> Result<BatteryModel, String> {
    BatteryModel::parse(s).ok_or_else(|| format!("unknown battery model {s:?}"))
}

impl Common {
    fn run_config(&self, sim_steps: usize) -> Result<RunConfig> {
        let mut cfg = RunConfig {
            horizon: self.horizon,
            dt: self.dt_minutes / 60.0,
            sim_steps,
            case: self.case,
            seed: self.seed,
            start_minute: self.start_minute,
            ..RunConfig::default()
        };
        cfg.builder.alpha = self.alpha;
        cfg.builder.objective = ObjectiveKind::parse(&self.objective)?;
        cfg.builder.battery_model = self.battery_model;
        cfg.builder.psd_cut_rounds = self.cut_rounds;
        cfg.validate()?;
        Ok(cfg)
    }

    fn feeder(&self) -> Result<Feeder> {
        let text = match &self.feeder {
            Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
            None => IEEE13.to_string(),
        };
        Ok(parse_feeder(&text)?)
    }

    fn forecast(&self, feeder: &Feeder, cfg: &RunConfig) -> Result<ForecastSeries> {
        let f = match &self.forecast {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                let f = parse_forecast(&text, feeder, cfg.dt)?;
                match cfg.case {
                    Some(c) => {
                        let (l, s) = c.fractions();
                        dispatch::network::scale_case(&f, l, s)?
                    }
                    None => f,
                }
            }
            None => prepare_forecast(feeder, cfg)?,
        };
        if f.len() < cfg.forecast_len() {
            bail!("forecast covers {} steps, need {}", f.len(), cfg.forecast_len());
        }
        Ok(f)
    }

    /// Feeder, config and the first horizon window.
    fn setup(&self) -> Result<(Feeder, RunConfig, ForecastSeries)> {
        let cfg = self.run_config(1)?;
        let feeder = self.feeder()?;
        let f = self.forecast(&feeder, &cfg)?;
        let w = f.window(0, cfg.horizon)?;
        Ok((feeder, cfg, w))
    }
}

fn write(dir: &Path, name: &str, text: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let p = dir.join(name);
    std::fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?;
    eprintln!("wrote {}", p.display());
    Ok(())
}

fn solve_window(feeder: &Feeder, cfg: &RunConfig, w: &ForecastSeries) -> Result<Relaxation> {
    let r = solve_relaxation(feeder, w, &cfg.builder, &BuildOptions::default(), &cfg.solver)?;
    if r.result.status != conic::Status::Optimal {
        bail!("relaxation finished with status {:?}", r.result.status);
    }
    Ok(r)
}

fn cmd_solve(c: &Common) -> Result<bool> {
    let (feeder, cfg, w) = c.setup()?;
    let r = solve_window(&feeder, &cfg, &w)?;
    let (s, duals) = r.problem.extract(&r.result.x, &r.result.z)?;
    let cert = check_certificates(&feeder, &cfg.builder, &duals, w.dt);
    let scd = detect_scd(&s, SCD_TOL);
    let counts = r.problem.counts();
    let mut log = format!(
        "solve objective={} status={:?} iterations={} gap={:e} cut_rounds={} vars={} eq_rows={} ineq_rows={} soc_blocks={}\n",
        r.result.objective,
        r.result.status,
        r.result.iterations,
        r.result.gap,
        r.rounds,
        counts.vars,
        counts.equality_rows,
        counts.inequality_rows,
        counts.soc_blocks
    );
    log += &cert.to_text(&feeder);
    log += &scd.to_text(&feeder);
    print!("{log}");
    write(&c.out, "run.log", &log)?;
    write(&c.out, "schedule.tsv", &driver::schedule_tsv(&s, &feeder))?;
    Ok(true)
}

fn cmd_simulate(c: &Common) -> Result<bool> {
    let cfg = c.run_config(c.steps)?;
    let feeder = c.feeder()?;
    let f = c.forecast(&feeder, &cfg)?;
    let log = driver::run(&feeder, &f, &cfg)?;
    driver::report(&log, &feeder, &ReportKind::ALL, &c.out)?;
    let s = &log.summary;
    println!(
        "steps={} failed={} socp_mean_s={:.3} socp_std_s={:.3} rmse_gap_pct={:?} worst_gap_pct={:?}",
        log.records.len(),
        s.failed_steps,
        s.mean_socp_secs,
        s.std_socp_secs,
        s.rmse_gap_pct,
        s.worst_gap_pct
    );
    Ok(log.all_ok())
}

fn cmd_validate(c: &Common) -> Result<bool> {
    let (feeder, cfg, w) = c.setup()?;
    let r = solve_window(&feeder, &cfg, &w)?;
    let (s, _) = r.problem.extract(&r.result.x, &r.result.z)?;
    let rr = restore_horizon_with(&feeder, &w, &s, &cfg.restore, cfg.exec)?;
    let restored = rr.apply_to(&s);
    let mut out = String::from("t\trelaxed_worst\trestored_worst\trestored_ok\n");
    let mut ok = rr.all_ok();
    for t in 0..w.len() {
        let relaxed = validate_schedule(&feeder, &w, &s, t, &cfg.restore.sweep)?;
        let exact = validate_schedule(&feeder, &w, &restored, t, &cfg.restore.sweep)?;
        ok &= exact.worst <= 1e-6;
        out += &format!("{t}\t{:e}\t{:e}\t{}\n", relaxed.worst, exact.worst, rr.steps[t].is_ok());
    }
    print!("{out}");
    write(&c.out, "validate.tsv", &out)?;
    Ok(ok)
}

fn cmd_scd_check(c: &Common) -> Result<bool> {
    let (feeder, cfg, w) = c.setup()?;
    let r = solve_window(&feeder, &cfg, &w)?;
    let (s, duals) = r.problem.extract(&r.result.x, &r.result.z)?;
    let cert = check_certificates(&feeder, &cfg.builder, &duals, w.dt);
    let scd = detect_scd(&s, SCD_TOL);
    let mut log = cert.to_text(&feeder) + &scd.to_text(&feeder);
    write(&c.out, "first_stage.tsv", &driver::schedule_tsv(&s, &feeder))?;
    if !scd.clean {
        let (s2, _) = two_step_enforce(&feeder, &w, &cfg.builder, &BuildOptions::default(), &s, &cfg.solver)?;
        let again = detect_scd(&s2, SCD_TOL);
        log += "two-step:\n";
        log += &again.to_text(&feeder);
        write(&c.out, "second_stage.tsv", &driver::schedule_tsv(&s2, &feeder))?;
    }
    print!("{log}");
    write(&c.out, "run.log", &log)?;
    Ok(true)
}

fn cmd_gap_report(c: &Common) -> Result<bool> {
    let (feeder, cfg, w) = c.setup()?;
    let r = solve_window(&feeder, &cfg, &w)?;
    let (s, _) = r.problem.extract(&r.result.x, &r.result.z)?;
    let rr = restore_horizon_with(&feeder, &w, &s, &cfg.restore, cfg.exec)?;
    let mut out = String::from("t\tsocp_loss\tdnlp_loss\n");
    let mut socp = 0.0;
    for (t, step) in rr.steps.iter().enumerate() {
        let l = r.problem.step_losses(&feeder, &r.result.x, t);
        socp += l;
        let d = step.as_ref().map_or_else(|e| format!("error: {e}"), |s| format!("{:e}", s.losses));
        out += &format!("{t}\t{l:e}\t{d}\n");
    }
    let dnlp = rr.dnlp_opt().context("restoration failed on some step")?;
    let g = gap(socp, dnlp, driver::GAP_TOL)?;
    out += &format!("total\t{socp:e}\t{dnlp:e}\ngap_pct\t{}\n", g.gap_pct);
    print!("{out}");
    write(&c.out, "gap.tsv", &out)?;
    Ok(true)
}

fn cmd_mi_oracle(c: &Common, budget: usize) -> Result<bool> {
    let (feeder, cfg, w) = c.setup()?;
    let relaxed = solve_window(&feeder, &cfg, &w)?;
    let base = relaxed.problem.base_objective_value(&relaxed.result.x)?;
    let o = mi_oracle(&feeder, &w, &cfg.builder, &BuildOptions::default(), budget, &cfg.solver)?;
    let rel = (base - o.objective).abs() / o.objective.abs().max(1e-12);
    let text = format!(
        "mi_oracle objective={:e} patterns={} feasible={}\nrelaxation base_objective={:e} relative_difference={:e}\n",
        o.objective, o.patterns, o.feasible_patterns, base, rel
    );
    print!("{text}");
    write(&c.out, "run.log", &text)?;
    write(&c.out, "oracle_schedule.tsv", &driver::schedule_tsv(&o.schedule, &feeder))?;
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let res = match &cli.command {
        Command::Solve(c) => cmd_solve(c),
        Command::Simulate(c) => cmd_simulate(c),
        Command::Validate(c) => cmd_validate(c),
        Command::ScdCheck(c) => cmd_scd_check(c),
        Command::GapReport(c) => cmd_gap_report(c),
        Command::MiOracle { common, budget } => cmd_mi_oracle(common, *budget),
    };
    match res {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
