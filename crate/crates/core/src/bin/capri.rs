use std::path::PathBuf;
use std::process::ExitCode;

use capri::harness::{compare_baselines, privacy_audit, run_experiment, ExperimentConfig, Variant, AUDIT_TOLERANCE};
use capri::Error;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "capri", about = "Private contextual kernel bandit simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured privacy mode for every seed and write regret CSVs.
    Run(Common),
    /// Check the per-point sensitivity bound and the noise scale of every epoch.
    Audit(Common),
    /// Compare uniform, non-private, JDP and LDP runs on shared instances.
    Compare(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Replaces the config's seed list with this single seed.
    #[arg(long)]
    seed_override: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig, Error> {
        let mut config = ExperimentConfig::load(&self.config)?;
        if let Some(out) = &self.out {
            config.output = out.clone();
        }
        if let Some(seed) = self.seed_override {
            config.seeds = vec![seed];
        }
        Ok(config)
    }
}

fn execute(command: Command) -> Result<ExitCode, Error> {
    let args = match &command {
        Command::Run(a) | Command::Audit(a) | Command::Compare(a) => a,
    };
    // An unreadable or invalid config is a configuration error.
    let config = match args.load() {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config error: {e}");
            return Ok(ExitCode::from(2));
        }
    };
    match command {
        Command::Run(_) => {
            let report = run_experiment(&config)?;
            for run in &report.runs {
                println!("seed {}: cumulative regret {:.4}", run.seed, run.log.total_regret());
            }
            println!("wrote {}", config.output.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Audit(_) => {
            let report = privacy_audit(&config)?;
            println!(
                "epochs audited: {}, max sensitivity ratio {:.12}, sigma0 mismatches {}",
                report.rows.len(),
                report.max_ratio(),
                report.sigma0_mismatches()
            );
            if report.passed() {
                Ok(ExitCode::SUCCESS)
            } else {
                eprintln!("audit violation: ratio must stay within 1 + {AUDIT_TOLERANCE:e} and sigma0 must match");
                Ok(ExitCode::from(3))
            }
        }
        Command::Compare(_) => {
            let report = compare_baselines(&config)?;
            for v in Variant::ALL {
                println!("{:>10}: mean final regret {:.4}", v.name(), report.mean_final_regret(v));
            }
            println!("wrote {}", config.output.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(code) => code,
        Err(e @ Error::Config { .. }) => {
            eprintln!("config error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
