use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use vigil::commands::{self, EvalModes};
use vigil::service::{self, AppState, SessionDefaults};
use vigil::{CliError, FrameworkConfig};

#[derive(Parser)]
#[command(name = "vigil", version, about = "Failure-aware execution of visuomotor policies")]
struct Cli {
    /// JSON config file; omitted sections keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set recovery.pause_ticks=5`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Roll out the policy without anomalies and build the memory bank.
    Collect,
    /// Score validation episodes and pick the anomaly threshold.
    Calibrate,
    /// Fit the start-state mixture used for resets.
    FitSuccess,
    /// Run the standard anomaly suite.
    Eval {
        /// Run with monitoring disabled instead.
        #[arg(long, conflicts_with = "both")]
        baseline: bool,
        /// Run both the baseline and the monitored suite.
        #[arg(long)]
        both: bool,
    },
    /// Tabulate the evaluation reports.
    Report,
    /// Serve live sessions over HTTP.
    Serve {
        #[arg(long)]
        host: Option<String>,
        #[arg(long)]
        port: Option<u16>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = FrameworkConfig::load(cli.config.as_deref(), &cli.overrides)?;
    match cli.command {
        Command::Collect => {
            let s = commands::collect(&cfg)?;
            println!(
                "{} of {} episodes succeeded; bank holds {} frames (dim {})",
                s.successful, s.episodes, s.frames, s.bank_dim
            );
            println!("wrote {} and {}", cfg.paths.bank.display(), cfg.paths.nominal.display());
        }
        Command::Calibrate => {
            let det = commands::calibrate(&cfg)?;
            print!("tau* = {:.6}", det.tau_star);
            if let Some(m) = det.calibration {
                print!(
                    "  precision {:.3}  recall {:.3}  F {:.3}",
                    m.precision, m.recall, m.f_score
                );
            }
            println!("\nwrote {}", cfg.paths.detector.display());
        }
        Command::FitSuccess => {
            let m = commands::fit_success(&cfg)?;
            println!("{} components, BIC {:.3}", m.k(), m.bic());
            println!("wrote {}", cfg.paths.success_model.display());
        }
        Command::Eval { baseline, both } => {
            let modes = EvalModes {
                baseline: baseline || both,
                monitored: !baseline || both,
            };
            for r in commands::eval(&cfg, modes)? {
                println!(
                    "{:<10} {}/{} succeeded ({:.2})",
                    r.label, r.successes, r.n_episodes, r.success_rate
                );
            }
            println!("wrote {}", cfg.paths.eval_dir.display());
        }
        Command::Report => {
            print!("{}", commands::report(&cfg)?);
        }
        Command::Serve { host, port } => {
            let host = host.unwrap_or_else(|| cfg.service.host.clone());
            let port = port.unwrap_or(cfg.service.port);
            let harness = commands::harness(&cfg, Some(commands::load_monitor(&cfg)?));
            let state = AppState::new(harness, SessionDefaults::from_config(&cfg));
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async {
                let listener = service::bind(&host, port)
                    .await
                    .map_err(|e| CliError::Service(format!("cannot listen on {host}:{port}: {e}")))?;
                println!("listening on http://{}", listener.local_addr()?);
                service::serve(listener, state).await?;
                Ok::<_, CliError>(())
            })?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
