//! `qdc` — run controlled decision-dynamics simulations, solve Lyapunov
//! weights, verify stability properties, and compare the discretization to
//! the exact propagator.
//!
//! Exit codes: 0 success, 2 configuration error, 3 numeric/runtime error,
//! 4 infeasible Lyapunov weights, 5 verification-suite failure.

mod commands;
mod config;
mod verify;

use clap::{Parser, Subcommand};
use qdc_core::CoreError;

#[derive(Parser)]
#[command(name = "qdc", version, about = "Controlled open-quantum decision dynamics")]
struct Cli {
    /// Worker threads for ensemble parallelism (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Output directory (default: $QDC_OUT_DIR or ./qdc-out).
    #[arg(long, global = true)]
    out: Option<std::path::PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a seeded trajectory ensemble and persist records and summary.
    Simulate {
        #[arg(long)]
        config: std::path::PathBuf,
        /// closed | open | fixed=<u>
        #[arg(long, default_value = "closed")]
        policy: String,
        /// Ensemble size override.
        #[arg(long)]
        n: Option<usize>,
        /// Base seed override.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Solve Lyapunov σ-weights for a target action and write the spec.
    SigmaSolve {
        #[arg(long)]
        config: std::path::PathBuf,
        /// Target action override (0-based).
        #[arg(long)]
        target: Option<usize>,
        /// Curvature regularizer override.
        #[arg(long)]
        eps: Option<f64>,
    },
    /// Run a verification suite; prints one pass/fail line per check.
    Verify {
        #[arg(long)]
        config: std::path::PathBuf,
        /// cptp | martingale | supermartingale | curvature | drift |
        /// kushner | residue | constraints
        #[arg(long)]
        suite: String,
        /// Record file from a previous simulate run (kushner suite).
        #[arg(long)]
        records: Option<std::path::PathBuf>,
        /// Previously solved σ-spec to re-verify (curvature suite).
        #[arg(long)]
        sigma: Option<std::path::PathBuf>,
        /// Treat reported constraint violations as failures.
        #[arg(long)]
        strict: bool,
        /// Trace count override for the kushner suite.
        #[arg(long)]
        traces: Option<usize>,
        /// Initial-state count override for the drift suite.
        #[arg(long)]
        states: Option<usize>,
        /// Samples per state override for the drift suite.
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Compare one-step channel errors against the exact propagator over a
    /// dt ladder and fit the convergence order.
    OracleCompare {
        #[arg(long)]
        config: std::path::PathBuf,
        /// Comma-separated dt values, at least three.
        #[arg(long, value_name = "LIST", default_value = "0.04,0.02,0.01,0.005")]
        dt_ladder: String,
    },
    /// Total-probability (sure-thing-principle) diagnostic.
    Stp {
        #[arg(long)]
        config: std::path::PathBuf,
        /// Behavioral mixing weight override.
        #[arg(long)]
        alpha: Option<f64>,
        /// Comma-separated action indices defining event A.
        #[arg(long, default_value = "0")]
        a_actions: String,
        /// Comma-separated action indices defining event B.
        #[arg(long, default_value = "0")]
        b_actions: String,
        /// Unmeasured interactions before the B event.
        #[arg(long, default_value_t = 20)]
        before: u32,
        /// Interactions between the B event and the A readout.
        #[arg(long, default_value_t = 10)]
        between: u32,
    },
}

/// Error wrapper carrying the process exit code.
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    pub fn numeric(message: impl Into<String>) -> Self {
        Self {
            code: 3,
            message: message.into(),
        }
    }

    pub fn suite(message: impl Into<String>) -> Self {
        Self {
            code: 5,
            message: message.into(),
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        let code = match &e {
            CoreError::InvalidConfig { .. }
            | CoreError::InvalidParameter { .. }
            | CoreError::DimensionMismatch { .. } => 2,
            CoreError::InfeasibleWeights { .. } => 4,
            _ => 3,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<config::ConfigError> for CliError {
    fn from(e: config::ConfigError) -> Self {
        Self {
            code: 2,
            message: e.to_string(),
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
        {
            eprintln!("qdc: cannot configure {threads} worker threads: {e}");
            std::process::exit(3);
        }
    }
    let out_dir = cli
        .out
        .or_else(|| std::env::var_os("QDC_OUT_DIR").map(std::path::PathBuf::from))
        .unwrap_or_else(|| std::path::PathBuf::from("qdc-out"));

    let result = match cli.command {
        Command::Simulate {
            config,
            policy,
            n,
            seed,
        } => commands::simulate(&config, &policy, n, seed, &out_dir),
        Command::SigmaSolve {
            config,
            target,
            eps,
        } => commands::sigma_solve(&config, target, eps, &out_dir),
        Command::Verify {
            config,
            suite,
            records,
            sigma,
            strict,
            traces,
            states,
            samples,
        } => verify::run_suite(verify::SuiteArgs {
            config: &config,
            suite: &suite,
            records: records.as_deref(),
            sigma: sigma.as_deref(),
            strict,
            traces,
            states,
            samples,
            out_dir: &out_dir,
        }),
        Command::OracleCompare { config, dt_ladder } => {
            commands::oracle_compare(&config, &dt_ladder, &out_dir)
        }
        Command::Stp {
            config,
            alpha,
            a_actions,
            b_actions,
            before,
            between,
        } => commands::stp(&config, alpha, &a_actions, &b_actions, before, between, &out_dir),
    };

    match result {
        Ok(()) => {}
        Err(e) => {
            eprintln!("qdc: {}", e.message);
            std::process::exit(e.code);
        }
    }
}
