//! `hydroreg` command-line front end.
//!
//! Exit status: 0 on success, 1 for bad input (usage, config, data), 2 for
//! internal failures, including a failed gradient check.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hydroreg::adjoint::{check_gradient_fd_with, random_interior_params};
use hydroreg::bayes::{lcurve_csv, ldb_first_guess};
use hydroreg::config::ExperimentConfig;
use hydroreg::io::{fmt_f64, write_discharge, AsciiGrid};
use hydroreg::mapping::{read_control, write_control};
use hydroreg::model::PARAM_NAMES;
use hydroreg::optim::{calibrate, Method};
use hydroreg::protocol::{aggregate_scores, phase_stats_csv, run_protocol};
use hydroreg::synth::SynthConfig;
use hydroreg::{ParameterFields, Setup};

/// Gradient checks pass below this relative error.
const GRADCHECK_TOL: f64 = 1e-5;

#[derive(Debug, Parser)]
#[command(
    name = "hydroreg",
    version,
    about = "Distributed rainfall-runoff calibration and regionalization"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// Experiment (or, for `synth`, domain) configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the model and score every gauge.
    Simulate {
        /// Control file; defaults to the parameter-range midpoint.
        #[arg(long)]
        control: Option<PathBuf>,
    },
    /// Compare adjoint gradients with central finite differences.
    Gradcheck {
        /// Probes per parameter; defaults to `protocol.gradcheck_probes`.
        #[arg(long)]
        probes: Option<usize>,
        /// Also reject probes whose central difference moves when the step
        /// is halved (useful on long series with clamp crossings).
        #[arg(long)]
        reject_unconverged: bool,
    },
    /// Calibrate one method on the donor gauges.
    Calibrate {
        #[arg(long)]
        method: Method,
        /// `p1`, `p2` or `all`.
        #[arg(long, default_value = "all")]
        period: String,
    },
    /// Bayesian first guess of uniform parameters with L-curve selection.
    BayesFg,
    /// Generate a synthetic twin dataset and its protocol config.
    Synth,
    /// Two-fold split-sample comparison of the configured methods.
    Protocol,
    /// Aggregate the score CSVs of a protocol bundle.
    Report {
        /// Bundle directory; defaults to `--out-dir`.
        bundle: Option<PathBuf>,
    },
}

#[derive(Debug)]
enum CliError {
    User(String),
    Internal(String),
}

impl From<hydroreg::Error> for CliError {
    fn from(e: hydroreg::Error) -> Self {
        if e.is_user_error() {
            CliError::User(e.to_string())
        } else {
            CliError::Internal(e.to_string())
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn user(msg: impl Into<String>) -> CliError {
    CliError::User(msg.into())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let outcome = match cli.global.threads {
        Some(0) => Err(user("--threads must be at least 1")),
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n).build() {
            Ok(pool) => pool.install(|| run(&cli)),
            Err(e) => Err(CliError::Internal(e.to_string())),
        },
        None => run(&cli),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::User(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
        Err(CliError::Internal(m)) => {
            eprintln!("internal error: {m}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: &Cli) -> CliResult {
    let g = &cli.global;
    match &cli.command {
        Command::Synth => synth(g),
        Command::Report { bundle } => report(bundle.as_deref().or(g.out_dir.as_deref())),
        cmd => {
            let cfg = load_config(g)?;
            let setup = cfg.load_setup()?;
            match cmd {
                Command::Simulate { control } => simulate(g, &setup, control.as_deref()),
                Command::Gradcheck {
                    probes,
                    reject_unconverged,
                } => gradcheck(g, &cfg, &setup, *probes, *reject_unconverged),
                Command::Calibrate { method, period } => {
                    calibrate_cmd(g, &cfg, &setup, *method, period)
                }
                Command::BayesFg => bayes_fg(g, &cfg, &setup),
                Command::Protocol => protocol(g, &cfg, &setup),
                Command::Synth | Command::Report { .. } => unreachable!(),
            }
        }
    }
}

fn load_config(g: &Global) -> CliResult<ExperimentConfig> {
    let path = g
        .config
        .as_deref()
        .ok_or_else(|| user("--config is required"))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn out_dir(g: &Global) -> CliResult<&Path> {
    g.out_dir
        .as_deref()
        .ok_or_else(|| user("--out-dir is required"))
}

fn write(path: &Path, text: &str) -> CliResult {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| user(format!("{}: {e}", dir.display())))?;
    }
    std::fs::write(path, text).map_err(|e| user(format!("{}: {e}", path.display())))
}

fn write_params(setup: &Setup, params: &ParameterFields, dir: &Path, prefix: &str) -> CliResult {
    for (k, name) in PARAM_NAMES.iter().enumerate() {
        let asc = AsciiGrid::from_plan(&setup.plan, &params.maps[k]).to_text();
        write(&dir.join(format!("{prefix}{name}.asc")), &asc)?;
    }
    Ok(())
}

fn nse_table(setup: &Setup, params: &ParameterFields) -> CliResult<String> {
    let nse = setup.nse_per_gauge(params)?;
    let mut s = String::from("gauge_id,nse\n");
    for (gauge, v) in setup.gauges.gauges().iter().zip(nse) {
        let _ = writeln!(s, "{},{}", gauge.id, fmt_f64(v));
    }
    Ok(s)
}

fn simulate(g: &Global, setup: &Setup, control: Option<&Path>) -> CliResult {
    let params = match control {
        Some(path) => {
            let (ctrl, bounds) = read_control(path)?;
            ctrl.to_params(&setup.plan, &setup.descriptors, bounds)?
        }
        None => setup.uniform_params(setup.bounds.midpoint()),
    };
    let sims = setup.simulate_gauges(&params)?;
    let table = nse_table(setup, &params)?;
    if let Some(dir) = &g.out_dir {
        let series: Vec<(String, Vec<f64>)> = setup
            .gauges
            .gauges()
            .iter()
            .map(|gauge| gauge.id.clone())
            .zip(sims)
            .collect();
        write_discharge(&series, &dir.join("simulated.csv"))?;
        write(&dir.join("nse.csv"), &table)?;
    }
    print!("{table}");
    Ok(())
}

fn gradcheck(
    g: &Global,
    cfg: &ExperimentConfig,
    setup: &Setup,
    probes: Option<usize>,
    strict_fd: bool,
) -> CliResult {
    let n = probes.unwrap_or(cfg.protocol.gradcheck_probes);
    let params = random_interior_params(&setup.plan, setup.bounds, cfg.seed);
    let report = check_gradient_fd_with(setup, &params, n, cfg.seed.wrapping_add(1), strict_fd)?;
    if let Some(dir) = &g.out_dir {
        write(&dir.join("gradcheck.csv"), &report.to_csv(&setup.plan))?;
    }
    for (name, compared, max) in report.per_parameter() {
        println!("{name}: {compared} probes compared, max rel err {max:.3e}");
    }
    let max = report.max_rel_error();
    println!("max relative error: {max:.3e}");
    if max < GRADCHECK_TOL && report.insensitive_ok() {
        Ok(())
    } else {
        Err(CliError::Internal(format!(
            "gradient check failed: {max:.3e} >= {GRADCHECK_TOL:e}"
        )))
    }
}

fn calibrate_cmd(
    g: &Global,
    cfg: &ExperimentConfig,
    setup: &Setup,
    method: Method,
    period: &str,
) -> CliResult {
    let dir = out_dir(g)?;
    let window = match period.to_ascii_lowercase().as_str() {
        "all" => setup.clone(),
        name @ ("p1" | "p2") => {
            let r = if name == "p1" {
                cfg.protocol.p1
            } else {
                cfg.protocol.p2
            };
            let [a, b] = r.ok_or_else(|| user(format!("period {name} is not configured")))?;
            if a >= b || b > setup.forcing.n_steps() {
                return Err(user(format!("period {name} = [{a}, {b}) is out of range")));
            }
            setup.window(a, b)
        }
        other => {
            return Err(user(format!(
                "unknown period '{other}' (expected p1, p2 or all)"
            )))
        }
    };
    let donors: Vec<String> = if cfg.protocol.donors.is_empty() {
        setup
            .gauges
            .gauges()
            .iter()
            .map(|gauge| gauge.id.clone())
            .collect()
    } else {
        cfg.protocol.donors.clone()
    };
    let groups: Vec<(String, Vec<String>)> = if method.is_local() {
        donors
            .iter()
            .map(|d| (format!("{}_{d}", method.name()), vec![d.clone()]))
            .collect()
    } else {
        vec![(method.name().to_string(), donors)]
    };
    let calib = cfg.calibration();
    for (tag, ids) in groups {
        let sub = window.with_gauges(window.gauges.subset(&window.plan, &ids)?);
        let c = calibrate(method, &sub, &calib)?;
        write_params(&sub, &c.params, &dir.join("params"), &format!("{tag}_"))?;
        write_control(
            &c.control,
            &sub.bounds,
            &dir.join(format!("controls/{tag}.json")),
        )?;
        write(&dir.join(format!("reports/{tag}.csv")), &c.report.to_csv())?;
        let table = nse_table(&sub, &c.params)?;
        write(&dir.join(format!("scores/{tag}.csv")), &table)?;
        println!(
            "{tag}: J = {:.6e} after {} iterations ({})",
            c.report.final_j(),
            c.report.iterations,
            c.report.stop_reason
        );
        print!("{table}");
    }
    Ok(())
}

fn donor_setup(cfg: &ExperimentConfig, setup: &Setup) -> CliResult<Setup> {
    if cfg.protocol.donors.is_empty() {
        return Ok(setup.clone());
    }
    Ok(setup.with_gauges(setup.gauges.subset(&setup.plan, &cfg.protocol.donors)?))
}

fn bayes_fg(g: &Global, cfg: &ExperimentConfig, setup: &Setup) -> CliResult {
    let dir = out_dir(g)?;
    let sub = donor_setup(cfg, setup)?;
    let res = ldb_first_guess(&sub, &cfg.calibration().bayes)?;
    write(&dir.join("lcurve.csv"), &lcurve_csv(&res.curve))?;
    write(&dir.join("ensemble.csv"), &res.sample.to_csv())?;
    let mut fg = String::from("param,prior_mean,first_guess\n");
    for (k, name) in PARAM_NAMES.iter().enumerate() {
        let _ = writeln!(
            fg,
            "{name},{},{}",
            fmt_f64(res.estimate.prior_mean[k]),
            fmt_f64(res.estimate.mean[k])
        );
    }
    write(&dir.join("first_guess.csv"), &fg)?;
    println!("alpha* = {}", res.alpha);
    println!("J(prior mean) = {:.6e}", res.j_prior_mean);
    print!("{fg}");
    Ok(())
}

fn synth(g: &Global) -> CliResult {
    let dir = out_dir(g)?;
    let mut cfg = match &g.config {
        Some(p) => SynthConfig::load(p)?,
        None => SynthConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    let (ds, path) = cfg.run(dir)?;
    println!(
        "wrote {}x{} twin with {} gauges to {}",
        ds.plan.nrows(),
        ds.plan.ncols(),
        ds.registry.len(),
        dir.display()
    );
    println!("{}", path.display());
    Ok(())
}

fn protocol(g: &Global, cfg: &ExperimentConfig, setup: &Setup) -> CliResult {
    let dir = out_dir(g)?;
    let outcome = run_protocol(cfg, setup, dir)?;
    for f in &outcome.manifest.failures {
        eprintln!("warning: {} on {} failed: {}", f.method, f.fold, f.error);
    }
    let stats = aggregate_scores(dir)?;
    print!("{}", phase_stats_csv(&stats));
    if outcome.manifest.partial {
        eprintln!("warning: bundle is partial");
    }
    Ok(())
}

fn report(bundle: Option<&Path>) -> CliResult {
    let dir = bundle.ok_or_else(|| user("report needs a bundle directory or --out-dir"))?;
    let text = phase_stats_csv(&aggregate_scores(dir)?);
    write(&dir.join("report.csv"), &text)?;
    print!("{text}");
    Ok(())
}
