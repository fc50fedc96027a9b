use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use gtf_tools::{analyze, calibrate, simulate, solve, Mode, Options};

#[derive(Parser)]
#[command(name = "gtf", version, about = "Three-station total-station ground truth: simulate, calibrate, solve, analyze")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; also where inputs are looked up by default.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the seed from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for independent grid points and trials.
    #[arg(long, default_value_t = 1)]
    parallel: usize,
}

impl Common {
    fn options(&self) -> Options {
        Options { config: self.config.clone(), out: self.out.clone(), seed: self.seed, parallel: self.parallel }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Simulate stations, radio link and GNSS; write logs and ground truth.
    Simulate(Common),
    /// Estimate station-to-common transforms from the marker file.
    Calibrate(Common),
    /// Turn the measurement log into a 6-DOF pose CSV.
    Solve(Common),
    /// Write the report CSVs.
    Analyze {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum, default_value = "all")]
        mode: Mode,
    },
}

fn run(cli: Cli) -> u8 {
    let result = match &cli.command {
        Command::Simulate(c) => simulate(&c.options()).map(|s| {
            println!(
                "simulated {:.1} s: {} measurements in {} poll rounds, cycle rate {:.2} Hz, {} failed resyncs",
                s.duration_s,
                s.received,
                s.rounds,
                s.cycle_rate_hz(),
                s.failed_resyncs
            );
            for (id, hz) in &s.station_rates_hz {
                println!("  station {id}: {hz:.3} Hz");
            }
        }),
        Command::Calibrate(c) => calibrate(&c.options()).map(|cal| println!("calibration rms {:.6} m over {} residuals", cal.rms, cal.residuals.len())),
        Command::Solve(c) => solve(&c.options()).map(|s| println!("{} of {} grid points valid", s.valid, s.grid_points)),
        Command::Analyze { common, mode } => analyze(&common.options(), *mode).map(|paths| {
            for p in paths {
                println!("wrote {}", p.display());
            }
        }),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("gtf: {e}");
            e.exit_code() as u8
        }
    }
}

fn main() -> ExitCode {
    ExitCode::from(run(Cli::parse()))
}
