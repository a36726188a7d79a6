use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use drift_core::config::Config;
use drift_core::equilibria::{solve_equilibrium, TurnDirection};
use drift_core::harness::{
    best_theta, read_log, run_episode, summarize, tune, write_log, write_trace,
};
use drift_core::planner::ThetaParams;

#[derive(Parser, Debug)]
#[command(name = "drift", version, about = "Drift equilibria, closed-loop 8-track episodes and Bayesian tuning")]
struct Cli {
    /// Configuration file (TOML). Missing keys use built-in defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed for the tuning run; overrides the config file.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Bayesian optimization iterations after the seed design.
    #[arg(long, global = true, value_name = "N")]
    iters: Option<usize>,
    /// Output directory for logs and traces.
    #[arg(long, global = true, value_name = "DIR", default_value = ".")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve the drift equilibrium for a speed, radius and direction.
    Equilibrium {
        /// Speed [m/s]; defaults to episode.v_eq.
        #[arg(long = "V", value_name = "M_PER_S", allow_negative_numbers = true)]
        v: Option<f64>,
        /// Radius [m]; defaults to episode.radius.
        #[arg(long = "R", value_name = "M", allow_negative_numbers = true)]
        r: Option<f64>,
        /// left or right.
        #[arg(long, default_value = "left")]
        dir: TurnDirection,
    },
    /// Run one episode and write its log to <out>/episode.csv.
    Simulate {
        /// Comma-separated c_lr,c_rl,dv_i,k; defaults to the [theta] section.
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
        theta: Option<Vec<f64>>,
    },
    /// Tune theta; writes <out>/trace.csv and <out>/best_theta.toml.
    Tune,
    /// Recompute the objective and summary of a stored episode log.
    Replay {
        log: PathBuf,
    },
}

fn load_config(cli: &Cli) -> Result<Config> {
    let mut cfg = match &cli.config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(iters) = cli.iters {
        cfg.bo.n_iters = iters;
    }
    Ok(cfg)
}

fn create(dir: &Path, name: &str) -> Result<(PathBuf, BufWriter<File>)> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    Ok((path, BufWriter::new(file)))
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    match &cli.command {
        Command::Equilibrium { v, r, dir } => {
            let v = v.unwrap_or(cfg.episode.v_eq);
            let radius = r.unwrap_or(cfg.episode.radius);
            let eq = solve_equilibrium(&cfg.vehicle, v, radius, *dir)?;
            let res = eq.residual(&cfg.vehicle)?;
            println!("direction  {dir}");
            println!(
                "(V, beta, r, delta, F_xr) = ({:.6}, {:.6}, {:.6}, {:.6}, {:.3})",
                eq.v, eq.beta, eq.r, eq.delta, eq.f_xr
            );
            println!("residual   {res:.3e}");
        }
        Command::Simulate { theta } => {
            let mut cfg = cfg;
            if let Some(v) = theta {
                cfg.theta = ThetaParams::from_slice(v)?;
                cfg.validate()?;
            }
            let theta = cfg.theta;
            let ep = cfg.episode();
            let log = run_episode(&ep, &theta)?;
            let (path, mut w) = create(&cli.out, "episode.csv")?;
            write_log(&log, &mut w)?;
            w.flush()?;
            println!("{}", summarize(&log, ep.lambda1, ep.lambda2));
            println!("wrote {} ({} rows)", path.display(), log.records.len());
        }
        Command::Tune => {
            let ep = cfg.episode();
            let state = tune(&ep, &cfg.bo, cfg.seed)?;
            let (trace_path, mut w) = create(&cli.out, "trace.csv")?;
            write_trace(&state, &mut w)?;
            w.flush()?;
            let best = best_theta(&state)?;
            let (best_path, mut w) = create(&cli.out, "best_theta.toml")?;
            writeln!(w, "[theta]")?;
            writeln!(w, "c_lr = {}", best.c_lr)?;
            writeln!(w, "c_rl = {}", best.c_rl)?;
            writeln!(w, "dv_i = {}", best.dv_i)?;
            writeln!(w, "k = {}", best.k)?;
            w.flush()?;
            println!("evaluations     {}", state.history.len());
            println!("best seed J     {:.6}", state.best_seed_value());
            println!("best J          {:.6}", state.best_value);
            println!(
                "best theta      c_lr={:.6} c_rl={:.6} dv_i={:.6} k={:.6}",
                best.c_lr, best.c_rl, best.dv_i, best.k
            );
            println!("wrote {} and {}", trace_path.display(), best_path.display());
        }
        Command::Replay { log } => {
            let file = File::open(log).with_context(|| format!("opening {}", log.display()))?;
            let parsed = read_log(BufReader::new(file))
                .with_context(|| format!("reading {}", log.display()))?;
            let ep = cfg.episode();
            println!("{}", summarize(&parsed, ep.lambda1, ep.lambda2));
            println!("max kkt residual {:.3e}", parsed.max_kkt_residual());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("drift: error: {msg}");
            ExitCode::FAILURE
        }
    }
}
