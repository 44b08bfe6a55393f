use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use malleable::cli::config::{load_config, ConfigError, ExperimentConfig};
use malleable::cli::experiment::{
    render_csv, render_lower_bound, render_stationary, render_summary, render_trajectory, run_experiment,
};
use malleable::cli::Exit;
use malleable::meanfield::{fluid_classes, fluid_integrate, fluid_stationary, zero_state};
use malleable::relaxopt::{relax_classes, solve_relaxed};

#[derive(Parser)]
#[command(name = "malleable", version, about = "Core allocation for malleable jobs: simulation, lower bound and fluid analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output file; defaults to the config's `out`, then stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config's base seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; falls back to MALLEABLE_THREADS, then all cores.
    #[arg(long)]
    threads: Option<usize>,
    /// Omit the generation-time comment line from CSV output.
    #[arg(long)]
    no_header_timestamp: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate every policy at a single scale.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Scale factor; defaults to the first configured scale.
        #[arg(long)]
        d: Option<f64>,
    },
    /// Simulate every (policy, scale, replica) cell of the configuration.
    Sweep {
        #[command(flatten)]
        common: Common,
    },
    /// Solve the relaxed problem and print its optimum.
    Lowerbound {
        #[command(flatten)]
        common: Common,
    },
    /// Stationary point and trajectory of the fluid model.
    Ode {
        #[command(flatten)]
        common: Common,
        /// Also integrate from N random initial states and report the distance to the fixed point.
        #[arg(long, value_name = "N")]
        probe_attractor: Option<usize>,
        #[arg(long, default_value_t = 500.0)]
        t_end: f64,
        #[arg(long, default_value_t = 0.05)]
        step: f64,
        #[arg(long, default_value_t = 1.0)]
        sample_dt: f64,
    },
    /// Load and validate a configuration without running anything.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

fn load(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig, Exit> {
    let mut cfg = load_config(path).map_err(|e: ConfigError| {
        eprintln!("error [{}]: {e}", e.kind());
        Exit::Config
    })?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn init_threads(threads: Option<usize>) {
    let n = threads.or_else(|| std::env::var("MALLEABLE_THREADS").ok().and_then(|v| v.parse().ok()));
    if let Some(n) = n {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("thread pool already configured: {e}");
        }
    }
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), Exit> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| {
            eprintln!("error: cannot write {}: {e}", p.display());
            Exit::Internal
        }),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn timestamp(enabled: bool) -> Option<u64> {
    enabled.then(|| SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0))
}

fn simulate(common: &Common, cfg: ExperimentConfig) -> Result<(), Exit> {
    init_threads(common.threads);
    let rows = run_experiment(&cfg).map_err(|e| {
        eprintln!("error: {e}");
        Exit::Internal
    })?;
    let csv = render_csv(&rows, cfg.seed, timestamp(!common.no_header_timestamp));
    let out = common.out.clone().or(cfg.out.clone());
    emit(out.as_deref(), &csv)?;
    if out.is_some() {
        print!("{}", render_summary(&rows));
    } else {
        eprint!("{}", render_summary(&rows));
    }
    if rows.iter().any(|r| r.unstable()) {
        return Err(Exit::Unstable);
    }
    if rows.iter().any(|r| r.flags.iter().any(|f| f.starts_with("error"))) {
        return Err(Exit::Internal);
    }
    Ok(())
}

fn ode(common: &Common, cfg: &ExperimentConfig, probe: Option<usize>, t_end: f64, step: f64, sample_dt: f64) -> Result<(), Exit> {
    let internal = |e: &dyn std::fmt::Display| {
        eprintln!("error: {e}");
        Exit::Internal
    };
    let classes = fluid_classes(&cfg.workload, 1.0).map_err(|e| {
        eprintln!("error [workload]: {e}");
        Exit::Config
    })?;
    let n = cfg.workload.n;
    let st = fluid_stationary(&classes, n).map_err(|e| internal(&e))?;
    eprint!("{}", render_stationary(&st));
    let traj = fluid_integrate(&zero_state(&classes), &classes, n, t_end, step, sample_dt).map_err(|e| internal(&e))?;
    if traj.clamped {
        log::warn!("trajectory left the nonnegative orthant and was clamped");
    }
    emit(common.out.as_deref(), &render_trajectory(&traj))?;
    if let Some(count) = probe {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut worst: f64 = 0.0;
        for _ in 0..count {
            let z0: Vec<Vec<f64>> = st.z.iter().map(|zi| zi.iter().map(|z| 2.0 * z * rng.gen::<f64>()).collect()).collect();
            let tr = fluid_integrate(&z0, &classes, n, t_end, step, t_end).map_err(|e| internal(&e))?;
            let gap = tr.last().iter().flatten().zip(st.z.iter().flatten()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            worst = worst.max(gap);
        }
        eprintln!("# attractor probe: {count} starts, max distance to fixed point at t={t_end}: {worst:e}");
    }
    Ok(())
}

fn execute(cli: Cli) -> Result<(), Exit> {
    match cli.command {
        Command::Simulate { common, d } => {
            let mut cfg = load(&common.config, common.seed)?;
            cfg.scales = vec![d.unwrap_or(cfg.scales[0])];
            simulate(&common, cfg)
        }
        Command::Sweep { common } => {
            let cfg = load(&common.config, common.seed)?;
            simulate(&common, cfg)
        }
        Command::Lowerbound { common } => {
            let cfg = load(&common.config, common.seed)?;
            let sol = solve_relaxed(&relax_classes(&cfg.workload, 1.0), cfg.workload.n).map_err(|e| {
                eprintln!("error: {e}");
                Exit::Internal
            })?;
            for w in &sol.warnings {
                log::warn!("{w}");
            }
            emit(common.out.as_deref(), &render_lower_bound(&sol))
        }
        Command::Ode { common, probe_attractor, t_end, step, sample_dt } => {
            let cfg = load(&common.config, common.seed)?;
            ode(&common, &cfg, probe_attractor, t_end, step, sample_dt)
        }
        Command::Validate { config } => {
            let cfg = load(&config, None)?;
            println!(
                "ok: {} classes, n = {}, load = {:.6}, {} scales, {} policies",
                cfg.workload.classes.len(),
                cfg.workload.n,
                cfg.workload.system_load(),
                cfg.scales.len(),
                cfg.policies.len()
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::from(Exit::Success as u8),
        Err(code) => ExitCode::from(code as u8),
    }
}
