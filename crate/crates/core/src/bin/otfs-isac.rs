use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};

use otfs_isac::harness::{analyze, read_csv, run_to_file, ExperimentConfig, Mode};
use otfs_isac::scenario::{LayoutMode, ScenarioFile};

#[derive(Parser)]
#[command(version, about = "Multistatic OTFS sensing and communication experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a sweep and write a results CSV plus a `.meta.json` sidecar.
    Run {
        /// TOML experiment config; defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "results.csv")]
        out: PathBuf,
        /// Override the master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the mode (active, active_kf, passive, passive_kf).
        #[arg(long)]
        mode: Option<Mode>,
        /// Worker threads; all cores when omitted.
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Recompute summary statistics from a results CSV.
    Analyze {
        #[arg(long)]
        input: PathBuf,
    },
    /// Write or check replayable scenario files.
    Scenario {
        #[command(subcommand)]
        action: ScenarioAction,
    },
}

#[derive(Subcommand)]
enum ScenarioAction {
    /// Generate one trial's layout and trajectories from a config.
    Emit {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        trial: u64,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1)]
        n_targets: usize,
        #[arg(long, default_value_t = 1)]
        n_antennas: usize,
    },
    /// Regenerate a scenario from its seeds and confirm it matches.
    Replay {
        #[arg(long)]
        input: PathBuf,
    },
}

fn load_config(path: Option<&PathBuf>) -> anyhow::Result<ExperimentConfig> {
    Ok(match path {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    })
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Run {
            config,
            out,
            seed,
            mode,
            threads,
        } => {
            let mut cfg = load_config(config.as_ref())?;
            if let Some(s) = seed {
                cfg.master_seed = s;
            }
            if let Some(m) = mode {
                cfg.mode = m;
            }
            cfg.validate()?;
            if let Some(t) = threads {
                if t == 0 {
                    bail!("--threads must be at least 1");
                }
                rayon::ThreadPoolBuilder::new()
                    .num_threads(t)
                    .build_global()
                    .context("configuring thread pool")?;
            }
            let res = run_to_file(&cfg, &out)?;
            let failed: usize = res.rows.iter().map(|r| r.failed_trials).sum();
            println!("wrote {} rows to {}", res.rows.len(), out.display());
            if failed > 0 {
                println!("{failed} trials failed and were excluded; see the failed_trials column");
            }
        }
        Command::Analyze { input } => {
            let rows = read_csv(&input).with_context(|| format!("reading {}", input.display()))?;
            println!("{}", analyze(&rows)?);
        }
        Command::Scenario { action } => match action {
            ScenarioAction::Emit {
                config,
                out,
                trial,
                seed,
                n_targets,
                n_antennas,
            } => {
                let cfg = load_config(config.as_ref())?;
                let scen = ScenarioFile::generate(
                    seed.unwrap_or(cfg.master_seed),
                    trial,
                    cfg.layout_mode,
                    cfg.n_receivers,
                    n_antennas,
                    n_targets,
                    &cfg.trajectory,
                )?;
                scen.save(&out)?;
                let mode = match scen.layout_mode {
                    LayoutMode::Random => "random",
                    LayoutMode::OrthogonalOptimal => "orthogonal",
                };
                println!(
                    "wrote {} ({} layout, {} targets, {} steps)",
                    out.display(),
                    mode,
                    scen.trajectories.len(),
                    scen.trajectories.first().map_or(0, |t| t.len())
                );
            }
            ScenarioAction::Replay { input } => {
                let scen = ScenarioFile::load(&input)?;
                scen.verify()?;
                println!("{} replays exactly", input.display());
            }
        },
    }
    Ok(())
}
