//! `delayobs`: existence checks, observer design, simulation, root reports and fixture reproduction.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use delayobs::dde::{
    format_roots, rightmost_roots, seeded_histories, simulate, verify_observer, DdeSystem, InputSignal, Root,
    SimulationConfig, VerifyOptions, DEFAULT_NODES,
};
use delayobs::existence::{Condition, Detail};
use delayobs::fixtures::{self, Fixture, PRINT_TOL};
use delayobs::model::{residuals, LoadedProblem, ObserverReport, ProblemFile, TimeDelaySystem};
use delayobs::synthesis::{design_ladder, AttemptOutcome, DesignOptions, DesignOutcome, LadderResult, Stage, StageAttempt};
use delayobs::{Error, Matrix};
use serde_json::{json, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Command {
    Check,
    Design,
    Simulate,
    Roots,
    Reproduce,
}

#[derive(Debug, Parser)]
#[command(name = "delayobs", version, about = "Functional observers for linear systems with delayed measurements")]
struct Cli {
    /// check | design | simulate | roots | reproduce (or use --command)
    #[arg(value_enum, value_name = "COMMAND")]
    command_arg: Option<Command>,
    /// Fixture name for `reproduce`
    #[arg(value_name = "CASE")]
    case: Option<String>,
    #[arg(long = "command", value_enum)]
    command: Option<Command>,
    /// Problem JSON (plant, functional and optional design hints)
    #[arg(long)]
    input: Option<PathBuf>,
    /// Run only this ladder stage (A-minimal, A-augmented, A-extended, B-order-r, B-order-q, B-order-s, C)
    #[arg(long)]
    stage: Option<String>,
    /// JSON matrix used as the free parameter Z
    #[arg(long = "Z-file")]
    z_file: Option<PathBuf>,
    /// Comma-separated λ values replacing the default grid
    #[arg(long = "lambda-grid", value_delimiter = ',')]
    lambda_grid: Option<Vec<f64>>,
    #[arg(long, default_value_t = 0.005)]
    dt: f64,
    /// Simulation horizon
    #[arg(long = "T", default_value_t = 40.0)]
    t_final: f64,
    /// Artifact directory
    #[arg(long, default_value = "delayobs-out")]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

/// Validated run parameters.
#[derive(Debug)]
struct RunConfig {
    command: Command,
    input: Option<PathBuf>,
    case: Option<String>,
    stage: Option<Stage>,
    z: Option<Matrix>,
    lambda_grid: Option<Vec<f64>>,
    sim: SimulationConfig,
    out: PathBuf,
    seed: u64,
}

#[derive(Debug)]
struct Exit {
    code: u8,
    message: String,
}

impl Exit {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    fn validation(message: impl Into<String>) -> Self {
        Self::new(2, message)
    }
}

impl fmt::Display for Exit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for Exit {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::InvalidInput(_)
            | Error::InvalidTolerance(_)
            | Error::Shape(_)
            | Error::InvalidFunctional(_)
            | Error::InvalidDelay(_)
            | Error::Alignment { .. }
            | Error::Parse(_) => 2,
            Error::StructureNotApplicable(_) | Error::Precondition(_) | Error::NoSolution { .. } => 3,
            Error::NoStabilizer(_) => 4,
            _ => 5,
        };
        Exit::new(code, e.to_string())
    }
}

type Run<T> = std::result::Result<T, Exit>;

fn read(path: &Path) -> Run<String> {
    fs::read_to_string(path).map_err(|e| Exit::validation(format!("cannot read {}: {e}", path.display())))
}

fn parse_matrix(text: &str) -> Run<Matrix> {
    let mut de = serde_json::Deserializer::from_str(text);
    delayobs::model::mat::deserialize(&mut de).map_err(|e| Exit::validation(format!("bad Z matrix: {e}")))
}

impl RunConfig {
    fn from_cli(cli: Cli) -> Run<Self> {
        let command = match (cli.command_arg, cli.command) {
            (Some(a), Some(b)) if a != b => {
                return Err(Exit::validation("positional command and --command disagree"))
            }
            (Some(c), _) | (None, Some(c)) => c,
            (None, None) => return Err(Exit::validation("no command given; see --help")),
        };
        let stage = match &cli.stage {
            Some(s) => Some(Stage::parse(s).ok_or_else(|| {
                let known: Vec<&str> = Stage::ALL.iter().map(|s| s.label()).collect();
                Exit::validation(format!("unknown stage {s}; expected one of {}", known.join(", ")))
            })?),
            None => None,
        };
        let z = match &cli.z_file {
            Some(p) => Some(parse_matrix(&read(p)?)?),
            None => None,
        };
        if let Some(g) = &cli.lambda_grid {
            if g.is_empty() || g.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
                return Err(Exit::validation("lambda grid values must be positive"));
            }
        }
        if !(cli.dt > 0.0 && cli.dt.is_finite()) || !(cli.t_final > 0.0 && cli.t_final.is_finite()) {
            return Err(Exit::validation("--dt and --T must be positive"));
        }
        if command != Command::Reproduce {
            match &cli.input {
                Some(p) if p.is_file() => {}
                Some(p) => return Err(Exit::validation(format!("input {} does not exist", p.display()))),
                None => return Err(Exit::validation("--input is required")),
            }
        }
        Ok(Self {
            command,
            input: cli.input,
            case: cli.case,
            stage,
            z,
            lambda_grid: cli.lambda_grid,
            sim: SimulationConfig {
                t_final: cli.t_final,
                dt: cli.dt,
            },
            out: cli.out,
            seed: cli.seed,
        })
    }

    fn load(&self) -> Run<LoadedProblem> {
        let path = self.input.as_ref().ok_or_else(|| Exit::validation("--input is required"))?;
        let loaded = ProblemFile::from_json(&read(path)?)?.load()?;
        if let Some(s) = loaded.shift {
            println!(
                "output re-timed by {:.6} (h = {} < tau); working with h = {}",
                s.shift, s.original_h, loaded.system.h
            );
        }
        Ok(loaded)
    }

    fn design_options(&self, file: &ProblemFile) -> DesignOptions {
        DesignOptions {
            r_rows: file.r.clone(),
            f_d: file.f_d.clone(),
            pin_n_tau: file.pin_n_tau,
            z_override: self.z.clone(),
            lambda_grid: self.lambda_grid.clone(),
            only_stage: self.stage,
            ..DesignOptions::default()
        }
    }

    fn aligned(&self, sys: &TimeDelaySystem) -> Run<()> {
        delayobs::dde::check_alignment(self.sim.dt, &[sys.tau, sys.h])?;
        Ok(())
    }

    fn write(&self, name: &str, contents: &str) -> Run<PathBuf> {
        fs::create_dir_all(&self.out)
            .map_err(|e| Exit::new(5, format!("cannot create {}: {e}", self.out.display())))?;
        let path = self.out.join(name);
        fs::write(&path, contents).map_err(|e| Exit::new(5, format!("cannot write {}: {e}", path.display())))?;
        Ok(path)
    }

    fn write_json(&self, name: &str, v: &Value) -> Run<PathBuf> {
        let text = serde_json::to_string_pretty(v).map_err(Error::from)?;
        self.write(name, &(text + "\n"))
    }
}

fn describe(detail: &Detail) -> String {
    let pairs = |v: &[[f64; 2]]| -> String {
        v.iter()
            .map(|z| format!("{:.4}{:+.4}i", z[0], z[1]))
            .collect::<Vec<_>>()
            .join(", ")
    };
    match detail {
        Detail::Rank {
            lhs,
            rhs,
            sigma_kept,
            sigma_dropped,
        } => {
            let s = |v: &Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.2e}"));
            format!("{lhs} vs {rhs}; sigma kept {} / dropped {}", s(sigma_kept), s(sigma_dropped))
        }
        Detail::Spectrum { eigenvalues } => format!("eigenvalues {}", pairs(eigenvalues)),
        Detail::Detectability {
            eigenvalues,
            undetectable,
        } => {
            if undetectable.is_empty() {
                format!("eigenvalues {}; all unstable modes detectable", pairs(eigenvalues))
            } else {
                format!("undetectable {}", pairs(undetectable))
            }
        }
        Detail::Note { text } => text.clone(),
    }
}

fn print_condition(stage: Stage, c: &Condition) {
    let mark = if c.satisfied { "holds" } else { "FAILS" };
    println!("    {stage} condition {}: {mark} ({})", c.name, describe(&c.detail));
}

fn print_attempt(a: &StageAttempt) {
    println!("  {}: {}", a.stage, outcome_label(a.outcome));
    for r in &a.reports {
        for c in &r.conditions {
            print_condition(a.stage, c);
        }
    }
    for reason in &a.reasons {
        println!("    note: {reason}");
    }
}

fn outcome_label(o: AttemptOutcome) -> &'static str {
    match o {
        AttemptOutcome::Success => "observer found",
        AttemptOutcome::NotApplicable => "not applicable",
        AttemptOutcome::Skipped => "skipped",
        AttemptOutcome::ConditionsFailed => "existence conditions fail",
        AttemptOutcome::StabilizationFailed => "no stabilizing gain (LMI infeasible on the grid)",
        AttemptOutcome::NumericalFailure => "numerical failure",
    }
}

/// Exit for a ladder that produced nothing.
fn ladder_failure(l: &LadderResult) -> Exit {
    if l.failed_numerically() {
        Exit::new(5, "numerical failure in every applicable stage")
    } else if l.failed_on_stabilization() {
        Exit::new(4, "existence holds but no stabilizing gain was found on the lambda grid")
    } else {
        Exit::new(3, "no stage satisfies its existence conditions")
    }
}

fn print_design(d: &DesignOutcome) {
    println!("observer: {} (structure {}, order {})", d.stage, d.observer.structure, d.observer.order);
    for (name, m) in d.observer.named_blocks() {
        if m.iter().any(|&x| x != 0.0) {
            let rows: Vec<String> = m
                .row_iter()
                .map(|r| r.iter().map(|x| format!("{x:.4}")).collect::<Vec<_>>().join(" "))
                .collect();
            println!("  {name:<9} = [{}]", rows.join("; "));
        }
    }
    println!(
        "  residual {:.2e}; Z from {}; spectral abscissa {:.4}",
        d.residual_max_abs, d.z_method, d.spectral_abscissa
    );
    if let Some(c) = &d.certificate {
        println!("  certificate at lambda = {} (margin {:.2e})", c.lambda_used, c.margin);
    }
}

fn cmd_check(cfg: &RunConfig) -> Run<()> {
    let loaded = cfg.load()?;
    let mut opts = cfg.design_options(&loaded.file);
    opts.decay_target = None;
    let stages: Vec<Stage> = cfg.stage.map_or_else(|| Stage::ALL.to_vec(), |s| vec![s]);
    let mut attempts = Vec::new();
    println!("existence checks:");
    for stage in stages {
        opts.only_stage = Some(stage);
        let l = design_ladder(&loaded.system, &loaded.functional, &opts)?;
        let a = l.trace.into_iter().next().expect("one attempt per pinned stage");
        print_attempt(&a);
        attempts.push(a);
    }
    let path = cfg.write_json("check.json", &json!({ "stages": json!(attempts) }))?;
    println!("wrote {}", path.display());
    if attempts.iter().any(|a| a.outcome == AttemptOutcome::Success) {
        return Ok(());
    }
    let any = |o| attempts.iter().any(|a| a.outcome == o);
    Err(if any(AttemptOutcome::NumericalFailure) {
        Exit::new(5, "numerical failure")
    } else if any(AttemptOutcome::StabilizationFailed) {
        Exit::new(4, "no stabilizing gain on the lambda grid")
    } else {
        Exit::new(3, "existence conditions fail")
    })
}

fn run_ladder(cfg: &RunConfig, loaded: &LoadedProblem) -> Run<(LadderResult, DesignOutcome)> {
    let opts = cfg.design_options(&loaded.file);
    let ladder = design_ladder(&loaded.system, &loaded.functional, &opts)?;
    println!("design ladder:");
    for a in &ladder.trace {
        print_attempt(a);
    }
    match ladder.design.clone() {
        Some(d) => Ok((ladder, d)),
        None => {
            let _ = cfg.write_json("design.json", &json!({ "ladder_trace": json!(ladder.trace) }));
            Err(ladder_failure(&ladder))
        }
    }
}

fn cmd_design(cfg: &RunConfig) -> Run<()> {
    let loaded = cfg.load()?;
    cfg.aligned(&loaded.system)?;
    let (ladder, d) = run_ladder(cfg, &loaded)?;
    print_design(&d);
    let opts = VerifyOptions {
        sim: cfg.sim,
        seed: cfg.seed,
        ..VerifyOptions::default()
    };
    let report = verify_observer(&loaded.system, &d.functional, &d.observer, &opts)?;
    println!(
        "verification: residual {:.2e}, abscissa {:.4}, {}/{} simulations pass",
        report.residual_max_abs,
        report.spectral_abscissa,
        report.simulations.iter().filter(|s| s.passed).count(),
        report.simulations.len()
    );
    cfg.write_json(
        "design.json",
        &json!({
            "shift": json!(loaded.shift),
            "ladder_trace": json!(ladder.trace),
            "design": json!(d),
        }),
    )?;
    cfg.write_json("verification.json", &json!(report))?;
    if !report.passed {
        return Err(Exit::new(
            5,
            format!(
                "verification failed; observer withheld (see {})",
                cfg.out.join("verification.json").display()
            ),
        ));
    }
    let obs = ObserverReport {
        observer: d.observer.clone(),
        residual_max_abs: d.residual_max_abs,
    };
    let path = cfg.write_json("observer.json", &json!(obs))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_simulate(cfg: &RunConfig) -> Run<()> {
    let loaded = cfg.load()?;
    cfg.aligned(&loaded.system)?;
    let (_, d) = run_ladder(cfg, &loaded)?;
    let sys = &loaded.system;
    let (phi, rho) = seeded_histories(cfg.seed, 0, sys.n(), d.observer.order, sys.tau.max(sys.h));
    let input = InputSignal::Sine {
        amplitude: 1.0,
        omega: 1.0,
        phase: 0.0,
    };
    let traj = simulate(sys, &d.functional, &d.observer, &phi, &rho, &input, &cfg.sim)?;
    let path = cfg.write("trajectory.csv", &traj.to_csv())?;
    println!("wrote {} ({} rows)", path.display(), traj.rows.len());
    Ok(())
}

fn root_values(roots: &[Root]) -> Value {
    json!(roots)
}

fn cmd_roots(cfg: &RunConfig) -> Run<()> {
    let loaded = cfg.load()?;
    let sys = &loaded.system;
    let dde = DdeSystem::new(vec![(0.0, sys.a.clone()), (sys.tau, sys.a_tau.clone())])?;
    let report = rightmost_roots(&dde, DEFAULT_NODES)?;
    print!("{}", format_roots(&report.roots));
    println!("spectral abscissa {:.6}", report.spectral_abscissa);
    let path = cfg.write_json("roots.json", &root_values(&report.roots))?;
    println!("wrote {}", path.display());
    Ok(())
}

fn matches_roots(found: &[Root], want: &[[f64; 2]]) -> bool {
    want.iter().all(|w| {
        found
            .iter()
            .any(|r| (r.re - w[0]).abs() <= PRINT_TOL && (r.im - w[1]).abs() <= PRINT_TOL)
    })
}

fn cmd_reproduce(cfg: &RunConfig) -> Run<()> {
    let name = cfg
        .case
        .clone()
        .or_else(|| cfg.input.as_ref().map(|p| p.to_string_lossy().into_owned()))
        .ok_or_else(|| Exit::validation(format!("reproduce needs a case: {}", fixtures::NAMES.join(", "))))?;
    let fx: Fixture = fixtures::load(&name)?;
    println!("{}: {}", fx.name, fx.description);
    let loaded = fx.problem.clone().load()?;
    let sys = &loaded.system;
    let mut ok = true;
    let mut out = json!({ "case": fx.name });

    let Some(stage) = fx.stage() else {
        let dde = DdeSystem::new(vec![(0.0, sys.a.clone()), (sys.tau, sys.a_tau.clone())])?;
        let r = rightmost_roots(&dde, DEFAULT_NODES)?;
        print!("{}", format_roots(&r.roots));
        ok &= matches_roots(&r.roots, &fx.roots);
        out["roots"] = root_values(&r.roots);
        out["passed"] = json!(ok);
        cfg.write_json("reproduce.json", &out)?;
        return finish(ok);
    };

    let mut opts = fx.design_options();
    opts.lambda_grid = cfg.lambda_grid.clone();
    opts.only_stage = Some(cfg.stage.unwrap_or(stage));
    let ladder = design_ladder(sys, &loaded.functional, &opts)?;
    let Some(d) = ladder.design.clone() else {
        for a in &ladder.trace {
            print_attempt(a);
        }
        return Err(ladder_failure(&ladder));
    };
    print_design(&d);
    let diffs = fx.diff(&d.observer);
    println!("comparison with printed values (tolerance {PRINT_TOL:.0e}):");
    for b in &diffs {
        println!(
            "  {:<9} {} (max deviation {:.2e})",
            b.name,
            if b.passed { "match" } else { "MISMATCH" },
            b.max_abs_diff
        );
        ok &= b.passed;
    }
    let err_dde = delayobs::dde::error_system(&d.observer, sys)?;
    let roots = rightmost_roots(&err_dde, DEFAULT_NODES)?;
    if !fx.roots.is_empty() {
        let m = matches_roots(&roots.roots, &fx.roots);
        println!("  error-system roots {}", if m { "match" } else { "MISMATCH" });
        ok &= m;
    }
    out["stage"] = json!(d.stage.label());
    out["diffs"] = json!(diffs);
    out["error_roots"] = root_values(&roots.roots);
    if let Some(p) = fx.published_observer(sys.p(), sys.m())? {
        let res = residuals(sys, &d.functional, &p)?.max_abs;
        let pr = rightmost_roots(&delayobs::dde::error_system(&p, sys)?, DEFAULT_NODES)?;
        println!(
            "  printed observer: residual {res:.2e} (print precision), error-system abscissa {:.4}",
            pr.spectral_abscissa
        );
        out["published_residual"] = json!(res);
        out["published_error_roots"] = root_values(&pr.roots);
    }
    out["observer"] = json!(d.observer);
    out["passed"] = json!(ok);
    cfg.write_json("reproduce.json", &out)?;
    finish(ok)
}

fn finish(ok: bool) -> Run<()> {
    if ok {
        println!("reproduced");
        Ok(())
    } else {
        Err(Exit::new(1, "reproduction differs from the printed values"))
    }
}

fn run(cfg: &RunConfig) -> Run<()> {
    match cfg.command {
        Command::Check => cmd_check(cfg),
        Command::Design => cmd_design(cfg),
        Command::Simulate => cmd_simulate(cfg),
        Command::Roots => cmd_roots(cfg),
        Command::Reproduce => cmd_reproduce(cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = RunConfig::from_cli(cli).and_then(|cfg| run(&cfg));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
