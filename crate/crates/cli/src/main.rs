use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use delaysched::dp_oracle::DEFAULT_TOL;
use delaysched::simulator::PolicyKind;
use delaysched_cli::commands;
use delaysched_cli::config::{ConfigFile, Preset};
use delaysched_cli::{CliResult, OUTPUT_DIR_ENV};

#[derive(Debug, Parser)]
#[command(name = "delaysched", version, about = "Whittle index scheduling toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Whittle indices of one class: closed form against Algorithm 1, as CSV.
    WhittleTable {
        #[arg(long)]
        rate: u32,
        #[arg(long, default_value_t = 1.0)]
        weight: f64,
        #[arg(long)]
        buffer: usize,
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// Stationary law under a threshold policy: closed form against a linear solve, as CSV.
    Stationary {
        #[arg(long)]
        rate: u32,
        #[arg(long)]
        buffer: usize,
        /// Largest idle state, -1 for always transmitting.
        #[arg(long, allow_hyphen_values = true)]
        threshold: i64,
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// Relaxed-problem solution for a config file, as JSON.
    RelaxedSolve {
        config: PathBuf,
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// Monte-Carlo sweep over N; prints a JSON summary.
    Simulate {
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        preset: Option<Preset>,
        /// Comma-separated policies: whittle, max_weight, fair_theta, relaxed_randomized.
        #[arg(long, value_delimiter = ',')]
        policy: Option<Vec<PolicyKind>>,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        horizon: Option<usize>,
        /// Comma-separated population sizes.
        #[arg(long, value_delimiter = ',')]
        sweep: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Directory for `<preset>.json` and `<preset>.csv`.
        #[arg(long, env = OUTPUT_DIR_ENV)]
        output_dir: Option<PathBuf>,
        /// Per-run CSV.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Fluid map around the relaxed optimum: contraction rate and a perturbed trajectory.
    Fluid {
        config: PathBuf,
        #[arg(long, default_value_t = 50)]
        steps: usize,
        #[arg(long, default_value_t = 0.02)]
        perturbation: f64,
        /// Trajectory CSV (t, class, state, z).
        #[arg(long)]
        trajectory: Option<PathBuf>,
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// Value iteration against the index thresholds and the structural properties.
    DpVerify {
        #[arg(long)]
        rate: u32,
        #[arg(long, default_value_t = 1.0)]
        weight: f64,
        #[arg(long)]
        buffer: usize,
        /// Defaults to the midpoint of every gap between index values.
        #[arg(long)]
        subsidy: Option<f64>,
        #[arg(long, default_value_t = DEFAULT_TOL)]
        tol: f64,
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::WhittleTable { rate, weight, buffer, output } => {
            commands::write_csv(&commands::whittle_table(rate, weight, buffer)?, output.as_deref())
        }
        Command::Stationary { rate, buffer, threshold, output } => {
            commands::write_csv(&commands::stationary_table(rate, buffer, threshold)?, output.as_deref())
        }
        Command::RelaxedSolve { config, output } => commands::write_json(&commands::relaxed_solve(&config)?, output.as_deref()),
        Command::Simulate { config, preset, policy, epsilon, horizon, sweep, seeds, output_dir, trace } => {
            let file = config.as_deref().map(ConfigFile::load).transpose()?.unwrap_or_default();
            let flags = ConfigFile {
                policies: policy,
                epsilon,
                horizon,
                n_sweep: sweep,
                seeds,
                preset,
                ..ConfigFile::default()
            };
            let base = preset.or(file.preset).map(ConfigFile::preset).unwrap_or_default();
            let mut experiment = flags.over(file.over(base)).resolve()?;
            if output_dir.is_some() {
                experiment.output_dir = output_dir;
            }
            let report = commands::simulate(&experiment)?;
            if let Some(dir) = &experiment.output_dir {
                for path in commands::write_simulation_files(&report, dir)? {
                    eprintln!("wrote {}", path.display());
                }
            }
            if let Some(path) = &trace {
                commands::write_runs_csv(&report.runs, path)?;
            }
            commands::write_json(&report, None)
        }
        Command::Fluid { config, steps, perturbation, trajectory, output } => {
            let (report, rows) = commands::fluid(&config, steps, perturbation)?;
            if let Some(path) = &trajectory {
                commands::write_csv(&rows, Some(path))?;
            }
            commands::write_json(&report, output.as_deref())
        }
        Command::DpVerify { rate, weight, buffer, subsidy, tol, output } => {
            commands::write_json(&commands::dp_verify(rate, weight, buffer, subsidy, tol)?, output.as_deref())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
