use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, ValueEnum};
use smpc_cli::config::{ScenarioFile, FOURWAY, TRACKING};
use smpc_cli::output::write_json;
use smpc_cli::run::{
    certify, compare, montecarlo, run_simulation, write_certify, write_montecarlo, write_simulation, BoxResult,
    Overrides, Variant,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Certify,
    Simulate,
    Compare,
    Montecarlo,
}

/// Speed advices for human drivers at a signal-free intersection.
#[derive(Debug, Parser)]
#[command(name = "smpc", version)]
struct Args {
    /// Scenario file (JSON). Defaults to the bundled four-way crossing, or
    /// the bundled speed-tracking case in montecarlo mode.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "simulate")]
    mode: Mode,
    /// Master seed for scenario sampling and speed-offset schedules.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Scenario count K.
    #[arg(long)]
    scenarios: Option<usize>,
    /// Prediction horizon N.
    #[arg(long)]
    horizon: Option<usize>,
}

fn load(args: &Args) -> Result<ScenarioFile, String> {
    let parsed = match &args.config {
        Some(p) => ScenarioFile::from_path(p).map_err(|e| format!("{}: {e}", p.display())),
        None if args.mode == Mode::Montecarlo => ScenarioFile::parse(TRACKING).map_err(|e| e.to_string()),
        None => ScenarioFile::parse(FOURWAY).map_err(|e| e.to_string()),
    };
    let mut file = parsed?;
    Overrides {
        seed: args.seed,
        scenarios: args.scenarios,
        horizon: args.horizon,
    }
    .apply(&mut file);
    if file.controller.horizon == 0 || file.controller.scenarios == 0 {
        return Err("--horizon and --scenarios must be >= 1".into());
    }
    Ok(file)
}

fn execute(args: &Args, file: &ScenarioFile) -> BoxResult<()> {
    let start = Instant::now();
    match args.mode {
        Mode::Certify => {
            let r = certify(file)?;
            write_certify(&r, &args.out)?;
            println!(
                "certified kv in [{:.2}, {:.2}]; kv = {} max radius {:.4} over {} models; settling within {} s: {:.1}%",
                r.kv_lo,
                r.kv_hi,
                r.kv_used,
                r.max_sampled_radius,
                r.sampled_models,
                r.settling_limit,
                100.0 * r.settling_fraction
            );
        }
        Mode::Simulate => {
            let run = run_simulation(file, Variant::Stochastic)?;
            write_simulation(&run, &args.out)?;
            let s = &run.summary;
            println!(
                "collisions: {}; crossing order: {}",
                s.collision_count,
                s.crossing_order.join(" ")
            );
        }
        Mode::Compare => {
            let (st, base, summary) = compare(file)?;
            write_simulation(&st, &args.out.join("stochastic"))?;
            write_simulation(&base, &args.out.join("baseline"))?;
            write_json(&args.out.join("summary.json"), &summary)?;
            let pairs = |p: &[[String; 2]]| p.iter().map(|x| format!("({},{})", x[0], x[1])).collect::<Vec<_>>().join(" ");
            println!(
                "scenario MPC collisions: {} {}; baseline collisions: {} {}",
                st.summary.collision_count,
                pairs(&st.summary.collision_pairs),
                base.summary.collision_count,
                pairs(&base.summary.collision_pairs)
            );
        }
        Mode::Montecarlo => {
            let r = montecarlo(file)?;
            write_montecarlo(&r, &args.out)?;
            println!(
                "violations {}/{} = {:.4} (bound {:.4} + {:.4})",
                r.violations, r.checked_steps, r.rate, r.bound, r.margin
            );
        }
    }
    eprintln!("elapsed {:.1} s", start.elapsed().as_secs_f64());
    Ok(())
}

fn main() -> ExitCode {
    let args = Args::parse();
    let file = match load(&args) {
        Ok(f) => f,
        Err(e) => {
            eprintln!("invalid configuration: {e}");
            return ExitCode::from(2);
        }
    };
    match execute(&args, &file) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
