//! Config-driven command-line front end for the igrog toolkit.
//!
//! Every command takes `--config <file.json>` plus overriding flags; dotted
//! flags override config paths (`--recon.iters 40` sets `recon.iters`). All
//! randomness is seeded; reruns with the same seed reproduce outputs
//! bit-exact (timings live in a separate file).

mod commands;
mod imgout;
mod runctx;

use std::process::ExitCode;

const USAGE: &str = "\
usage: igrog <command> --config <file.json> [options] [--<dotted.path> <value> ...]

commands:
  simulate        phantom, coil maps, trajectory, k-space data, calibration
  dcf             Pipe-Menon density compensation for a trajectory
  calibrate-grog  per-axis unit-shift GRAPPA kernels
  train-igrog     implicit kernel network (optionally field-conditioned)
  grid            shift non-Cartesian data onto the integer grid
  recon           CG-SENSE or FISTA reconstruction
  gfactor         pseudo-replica g-factor maps for both gridding methods
  coil-sweep      NRMSE vs virtual coil count (GROG vs implicit kernels)
  tseg-sweep      NRMSE vs time-segment count, corrected and uncorrected
  bench           wall-clock comparison of the fast operators

options:
  --config <file>   JSON config (strict keys)
  --out <dir>       output directory (default: config value or 'out')
  --seed <n>        override the config seed
  --threads <n>     cap internal parallelism
  --window <w>      PNG window (magnitude units)
  --level <l>       PNG level
  --<a.b.c> <v>     override any config path
";

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    match run(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &igrog::Error) -> u8 {
    match e {
        igrog::Error::Numerical(_) => 3,
        _ => 2,
    }
}

fn run(args: &[String]) -> igrog::Result<()> {
    if args.is_empty() || args[0] == "--help" || args[0] == "-h" {
        print!("{USAGE}");
        return Ok(());
    }
    let command = args[0].clone();
    const COMMANDS: [&str; 10] = [
        "simulate", "dcf", "calibrate-grog", "train-igrog", "grid", "recon", "gfactor",
        "coil-sweep", "tseg-sweep", "bench",
    ];
    if !COMMANDS.contains(&command.as_str()) {
        return Err(igrog::Error::InvalidArgument(format!(
            "unknown command {command:?}; see --help"
        )));
    }
    let mut config_path: Option<String> = None;
    let mut out_dir: Option<String> = None;
    let mut seed: Option<u64> = None;
    let mut threads: Option<usize> = None;
    let mut window: Option<f64> = None;
    let mut level: Option<f64> = None;
    let mut overrides: Vec<(String, String)> = Vec::new();

    let mut i = 1;
    while i < args.len() {
        let a = &args[i];
        let stripped = a.strip_prefix("--").ok_or_else(|| {
            igrog::Error::InvalidArgument(format!("unexpected argument {a:?}"))
        })?;
        let value = args
            .get(i + 1)
            .ok_or_else(|| igrog::Error::InvalidArgument(format!("flag {a} needs a value")))?
            .clone();
        match stripped {
            "config" => config_path = Some(value),
            "out" => out_dir = Some(value),
            "seed" => {
                seed = Some(value.parse().map_err(|_| {
                    igrog::Error::InvalidArgument(format!("--seed: bad integer {value:?}"))
                })?)
            }
            "threads" => {
                threads = Some(value.parse().map_err(|_| {
                    igrog::Error::InvalidArgument(format!("--threads: bad integer {value:?}"))
                })?)
            }
            "window" => {
                window = Some(value.parse().map_err(|_| {
                    igrog::Error::InvalidArgument(format!("--window: bad number {value:?}"))
                })?)
            }
            "level" => {
                level = Some(value.parse().map_err(|_| {
                    igrog::Error::InvalidArgument(format!("--level: bad number {value:?}"))
                })?)
            }
            dotted => overrides.push((dotted.to_string(), value)),
        }
        i += 2;
    }

    if let Some(t) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| igrog::Error::InvalidArgument(format!("--threads: {e}")))?;
    }

    let config_path = config_path
        .ok_or_else(|| igrog::Error::InvalidArgument("missing --config <file>".into()))?;
    let ctx = runctx::RunContext::new(
        &command,
        &config_path,
        out_dir.as_deref(),
        seed,
        window,
        level,
        &overrides,
    )?;

    match command.as_str() {
        "simulate" => commands::simulate(&ctx),
        "dcf" => commands::dcf(&ctx),
        "calibrate-grog" => commands::calibrate_grog(&ctx),
        "train-igrog" => commands::train_igrog(&ctx),
        "grid" => commands::grid(&ctx),
        "recon" => commands::recon(&ctx),
        "gfactor" => commands::gfactor(&ctx),
        "coil-sweep" => commands::coil_sweep(&ctx),
        "tseg-sweep" => commands::tseg_sweep(&ctx),
        "bench" => commands::bench(&ctx),
        other => Err(igrog::Error::InvalidArgument(format!(
            "unknown command {other:?}; see --help"
        ))),
    }
}
