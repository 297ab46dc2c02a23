use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use active_search::config::ExperimentConfig;
use active_search::experiment::run_experiment;
use active_search::report::{emit_summary, SweepRow};

/// Multi-agent active search simulator.
///
/// Set RUST_LOG (e.g. RUST_LOG=info) for progress output.
#[derive(Parser)]
#[command(version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// TOML config file; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Override a config key, e.g. `--set k=1 --set noise.location_var=0.2`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one batch of trials and write CSVs to the configured output directory.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Run every combination of team size and target count.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,

        /// Team sizes.
        #[arg(long, value_delimiter = ',', default_values_t = vec![1usize, 2, 4])]
        agents: Vec<usize>,

        /// Target counts.
        #[arg(long, value_delimiter = ',', default_values_t = vec![1usize, 5])]
        k: Vec<usize>,
    },
    /// Print the default config as TOML.
    PrintDefaults,
}

fn run(cli: Cli) -> active_search::Result<()> {
    match cli.command {
        Command::PrintDefaults => {
            print!("{}", ExperimentConfig::default().resolved().to_toml());
        }
        Command::Run { config } => {
            let c = ExperimentConfig::load_with_overrides(config.config.as_deref(), &config.overrides)?;
            let result = run_experiment(&c, &c.output)?;
            println!(
                "recovered {}/{} trials; final recovery rate {}",
                result.recovered(),
                c.trials,
                result.curve.final_rate()
            );
        }
        Command::Sweep { config, agents, k } => {
            let base = ExperimentConfig::load_with_overrides(config.config.as_deref(), &config.overrides)?;
            let mut rows = Vec::new();
            for &kk in &k {
                for &j in &agents {
                    let mut c = base.clone();
                    c.k = kk;
                    c.agents = j;
                    c.validate()?;
                    let dir = base.output.join(format!("agents{j}_k{kk}"));
                    let result = run_experiment(&c, &dir)?;
                    let stats = result.per_agent_mean(j);
                    println!(
                        "J = {j}, k = {kk}: recovered {}/{}, mean measurements per agent {}",
                        result.recovered(),
                        c.trials,
                        stats.map_or("n/a".to_string(), |(m, _)| format!("{m:.2}"))
                    );
                    rows.push(SweepRow {
                        agents: j,
                        k: kk,
                        trials: c.trials,
                        recovered: result.recovered(),
                        mean_per_agent: stats.map(|s| s.0),
                        stderr_per_agent: stats.map(|s| s.1),
                    });
                }
            }
            let path = emit_summary(&rows, &base.output)?;
            println!("summary written to {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
