use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sigctl::benchmark::{tracking_optimum, twap, TrackingBenchmarkParams};
use sigctl::config::{ExperimentConfig, ProblemKind};
use sigctl::experiment::{rows_to_csv, run, run_linearized};
use sigctl::noise::{FbmSampler, TimeGrid};
use sigctl::optim::curve_to_csv;
use sigctl::signature::stream_signatures;
use sigctl::Error;

/// Environment variable overriding the number of worker threads.
const THREADS_VAR: &str = "SIGCTL_THREADS";

#[derive(Parser)]
#[command(name = "sigctl", version, about = "Signature controls for rough stochastic optimal control")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print analytic reference values as CSV.
    Benchmark {
        #[arg(long, default_value = "tracking")]
        problem: String,
        /// Hurst parameters (comma separated).
        #[arg(long = "H", value_delimiter = ',', default_values_t = [0.0625, 0.125, 0.25, 0.5, 0.75])]
        hurst: Vec<f64>,
        #[arg(long)]
        kappa: Option<f64>,
    },
    /// Train policies and print one result row per (H, N).
    Run(Experiment),
    /// Solve the linearized execution problem and print one row per (H, N).
    Linearize(Experiment),
    /// Write the signature stream of one sampled driver path.
    Sigdump {
        #[arg(long = "H", default_value_t = 0.5)]
        hurst: f64,
        #[arg(long, default_value_t = 2)]
        level: usize,
        #[arg(long, default_value_t = 0.01)]
        dt: f64,
        #[arg(long, default_value_t = 1)]
        refine: usize,
        #[arg(long = "T", default_value_t = 1.0)]
        horizon: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Path index within the seeded stream.
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Experiment {
    /// Configuration file (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Extra `key=value` settings applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    problem: Option<String>,
    #[arg(long)]
    policy: Option<String>,
    #[arg(long = "H")]
    hurst: Option<String>,
    #[arg(long = "N")]
    level: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long)]
    iterations: Option<usize>,
    /// Result table destination (stdout by default).
    #[arg(long)]
    output: Option<PathBuf>,
    /// Training-curve destination.
    #[arg(long)]
    curve: Option<PathBuf>,
    /// Directory for trained policy files.
    #[arg(long = "save-policies")]
    save_policies: Option<PathBuf>,
}

impl Experiment {
    fn config(&self, default_problem: Option<&str>) -> Result<ExperimentConfig, Error> {
        let mut cfg = ExperimentConfig::default();
        if let Some(p) = default_problem {
            cfg.set("problem", p)?;
        }
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            cfg.apply(&text)?;
        }
        let mut text = String::new();
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                text.push_str(&format!("{k} = {v}\n"));
            }
        };
        put("problem", self.problem.clone());
        put("policy", self.policy.clone());
        put("hurst", self.hurst.clone());
        put("level", self.level.clone());
        put("seed", self.seed.map(|v| v.to_string()));
        put("dt", self.dt.map(|v| v.to_string()));
        put("iterations", self.iterations.map(|v| v.to_string()));
        put("output", self.output.as_ref().map(|p| p.display().to_string()));
        put("curve", self.curve.as_ref().map(|p| p.display().to_string()));
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got '{kv}'")))?;
            text.push_str(&format!("{} = {}\n", k.trim(), v.trim()));
        }
        cfg.apply(&text)?;
        Ok(cfg)
    }
}

fn emit(path: Option<&str>, text: &str) -> Result<(), Error> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(Error::from),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Io(_) | Error::Shape(_) | Error::Domain(_) | Error::Grid(_) => 2,
        Error::Numeric(_) | Error::Factorization { .. } | Error::Capacity(_) | Error::Training(_) => 3,
        Error::Simulation { .. } => 4,
    }
}

fn configure_threads() -> Result<(), Error> {
    if let Ok(v) = std::env::var(THREADS_VAR) {
        let n: usize = v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{THREADS_VAR} must be a positive integer, got '{v}'")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("{THREADS_VAR}: {e}")))?;
    }
    Ok(())
}

fn execute(cli: Cli) -> Result<(), Error> {
    configure_threads()?;
    match cli.command {
        Command::Benchmark { problem, hurst, kappa } => match problem.parse::<ProblemKind>()? {
            ProblemKind::Tracking => {
                let mut out = String::from("hurst,optimum,error_estimate,order\n");
                for h in hurst {
                    let mut p = TrackingBenchmarkParams::new(h);
                    if let Some(k) = kappa {
                        p.kappa = k;
                    }
                    let est = tracking_optimum(&p)?;
                    out.push_str(&format!("{h},{:.6},{:.2e},{}\n", est.value, est.error_estimate, est.order));
                }
                emit(None, &out)
            }
            ProblemKind::Execution => {
                let mut cfg = ExperimentConfig::parse("problem = execution")?;
                cfg.kappa = kappa.or(cfg.kappa);
                let p = cfg.execution();
                let (u, j) = twap(p.q0, p.x0, p.kappa, p.kappa_terminal, cfg.horizon)?;
                emit(None, &format!("rate,value\n{u:.6},{j:.6}\n"))
            }
        },
        Command::Run(exp) => {
            let cfg = exp.config(None)?;
            let (rows, cells) = run(&cfg)?;
            if let Some(path) = &cfg.curve {
                let mut out = String::from("hurst,level,");
                out.push_str(curve_to_csv(&[]).trim_end());
                out.push('\n');
                for c in &cells {
                    for line in curve_to_csv(&c.curve).lines().skip(1) {
                        out.push_str(&format!("{},{},{line}\n", c.hurst, c.level));
                    }
                }
                emit(Some(path), &out)?;
            }
            if let Some(dir) = &exp.save_policies {
                std::fs::create_dir_all(dir)?;
                for c in &cells {
                    let name = format!("{}_{}_H{}_N{}.policy", cfg.problem, cfg.policy, c.hurst, c.level);
                    std::fs::write(dir.join(name), c.policy.to_text())?;
                }
            }
            emit(cfg.output.as_deref(), &rows_to_csv(&rows))
        }
        Command::Linearize(exp) => {
            let cfg = exp.config(Some("execution"))?;
            emit(cfg.output.as_deref(), &rows_to_csv(&run_linearized(&cfg)?))
        }
        Command::Sigdump {
            hurst,
            level,
            dt,
            refine,
            horizon,
            seed,
            index,
            output,
        } => {
            let grid = TimeGrid::with_step(horizon, dt, refine)?;
            let sampler = FbmSampler::new(hurst, grid.fine(), seed)?;
            let batch = sampler.sample_paths(1, index)?;
            let stream = stream_signatures(grid.fine(), batch.path(0), 1, grid.coarse(), level)?;
            let path = output.map(|p| p.display().to_string());
            emit(path.as_deref(), &stream.to_csv())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("sigctl: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
