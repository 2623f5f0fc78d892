use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use swarm_density::experiment::{run_experiment, ExperimentConfig};
use swarm_density::suites::run_suite;
use swarm_density::Error;

#[derive(Parser)]
#[command(
    name = "swarm-density",
    about = "Distributed density filtering for stochastic swarms"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment described by a TOML config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        agents: Option<usize>,
        #[arg(long, num_args = 2, value_names = ["NX", "NY"])]
        grid: Option<Vec<usize>>,
        #[arg(long)]
        steps: Option<usize>,
        /// Skip consensus and local filters.
        #[arg(long)]
        no_distributed: bool,
    },
    /// Run a validation suite: consensus, riccati, kde, pde or sde.
    Suite { name: String },
    /// Print the version.
    Version,
}

fn exit_for(err: &Error) -> ExitCode {
    eprintln!("error: {err}");
    if err.is_config() {
        ExitCode::from(2)
    } else {
        ExitCode::from(1)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Version => {
            println!("swarm-density {}", env!("CARGO_PKG_VERSION"));
            ExitCode::SUCCESS
        }
        Command::Suite { name } => match run_suite(&name) {
            Ok(report) => {
                println!("{report}");
                if report.passed() {
                    ExitCode::SUCCESS
                } else {
                    ExitCode::from(1)
                }
            }
            Err(e) => exit_for(&e),
        },
        Command::Run {
            config,
            seed,
            out,
            agents,
            grid,
            steps,
            no_distributed,
        } => {
            let mut cfg = match ExperimentConfig::from_file(&config) {
                Ok(c) => c,
                Err(e) => return exit_for(&e),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(n) = agents {
                cfg.agents = n;
                cfg.local_filters = cfg.local_filters.min(n);
            }
            if let Some(g) = grid {
                cfg.nx = g[0];
                cfg.ny = g[1];
            }
            if let Some(k) = steps {
                cfg.steps = k;
            }
            if no_distributed {
                cfg.distributed = false;
            }
            cfg.output_dir = Some(out.or(cfg.output_dir).unwrap_or_else(|| PathBuf::from("out")));
            match run_experiment(&cfg) {
                Ok(report) => {
                    print!("{}", report.summary());
                    ExitCode::SUCCESS
                }
                Err(e) => exit_for(&e),
            }
        }
    }
}
