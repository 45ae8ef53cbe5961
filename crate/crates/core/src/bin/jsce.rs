use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use jsce_core::harness::{run_sweep, write_outputs, ExperimentConfig, Profile, Scheme, SeedRange};
use jsce_core::validate::{run_suite, Suite};

#[derive(Parser)]
#[command(name = "jsce", version, about = "Self-sensing IRS joint sensing and channel estimation simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum ProfileArg {
    Desk,
    Paper,
}

#[derive(Clone, Copy, ValueEnum)]
enum SuiteArg {
    Gradients,
    Fim,
    Bp,
    Posterior,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a Monte-Carlo sweep.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated schemes (as-tvbi, tp-omp, tp-sbl, sp-tvbi, genie).
        #[arg(long, value_delimiter = ',')]
        scheme: Vec<String>,
        /// Seed range a..b (half open) or a single seed.
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long, value_enum)]
        profile: Option<ProfileArg>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        #[arg(long)]
        emit_plots: bool,
        /// Also write per-iteration traces as JSON lines.
        #[arg(long)]
        traces: bool,
    },
    /// Run one oracle check suite.
    Validate {
        #[arg(long, value_enum)]
        suite: SuiteArg,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
    },
}

fn run() -> jsce_core::Result<bool> {
    match Cli::parse().cmd {
        Cmd::Run { config, scheme, seeds, profile, out, emit_plots, traces } => {
            let mut cfg = match (&config, profile) {
                (Some(p), None) => ExperimentConfig::from_toml(&std::fs::read_to_string(p)?)?,
                (Some(p), Some(pr)) => {
                    let name = match pr {
                        ProfileArg::Desk => "desk",
                        ProfileArg::Paper => "paper",
                    };
                    let text = std::fs::read_to_string(p)?;
                    ExperimentConfig::from_toml(&format!("profile = \"{name}\"\n{}", strip_profile(&text)))?
                }
                (None, pr) => ExperimentConfig::for_profile(match pr {
                    Some(ProfileArg::Paper) => Profile::Paper,
                    _ => Profile::Desk,
                }),
            };
            if !scheme.is_empty() {
                cfg.schemes = scheme.iter().map(|s| s.parse::<Scheme>()).collect::<jsce_core::Result<_>>()?;
            }
            if let Some(s) = seeds {
                cfg.seeds = s.parse::<SeedRange>()?;
            }
            cfg.validate()?;
            if cfg.profile == Profile::Paper {
                eprintln!("warning: the paper profile uses full-size arrays and can take hours");
            }
            let res = run_sweep(&cfg)?;
            write_outputs(&cfg, &res, &out, emit_plots, traces)?;
            for s in &res.summary {
                println!(
                    "{:>8} P_T={:>5.1} dBm N_p={:>3} O={} trials={:>4} failed={:>3} nmse={:.4e} rmse={:.3} m",
                    s.scheme, s.point.p_t_dbm, s.point.n_p, s.point.overlap, s.trials, s.failures, s.mean_nmse, s.mean_rmse
                );
            }
            Ok(true)
        }
        Cmd::Validate { suite, seeds } => {
            let s = match suite {
                SuiteArg::Gradients => Suite::Gradients,
                SuiteArg::Fim => Suite::Fim,
                SuiteArg::Bp => Suite::Bp,
                SuiteArg::Posterior => Suite::Posterior,
            };
            let report = run_suite(s, seeds)?;
            for line in &report.lines {
                println!("{line}");
            }
            Ok(report.passed)
        }
    }
}

/// Drops a top-level `profile = ...` line so the CLI flag wins.
fn strip_profile(text: &str) -> String {
    text.lines().filter(|l| !l.trim_start().starts_with("profile")).collect::<Vec<_>>().join("\n")
}

fn main() -> ExitCode {
    match run() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
