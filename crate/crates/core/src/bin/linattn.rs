use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use linattn_core::harness::output::ArtifactWriter;
use linattn_core::harness::{
    default_lr_grid, find_preset, grid_search, noise_at_init, reproduce, run_training, summarize, ExperimentConfig,
    OptimizerName, ReproduceOptions, Target, PRESETS,
};
use linattn_core::{Error, Result};

/// Environment variable naming the directory all artifacts are written under.
const OUTPUT_ROOT_VAR: &str = "LINATTN_OUTPUT_ROOT";

#[derive(Parser)]
#[command(name = "linattn", version, about = "Train linear-attention models on in-context regression and probe their loss landscape")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every seed of a config (or just one) and write traces.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Learning-rate grid search over the config's seeds.
    Grid {
        #[arg(long)]
        config: PathBuf,
    },
    /// Sample minibatch gradient noise.
    ProbeNoise {
        #[arg(long)]
        config: PathBuf,
        /// Probe the freshly initialized model instead of the trained one.
        #[arg(long)]
        at_init: bool,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Hessian diagonals and robust condition numbers at chosen iterations.
    ProbeHessian {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "750,1250")]
        iters: Vec<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Regenerate the data behind one figure or table.
    Reproduce {
        target: String,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        /// Shorter runs for a quick look; checkpoints scale with the run length.
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Built-in experiment settings.
    Presets {
        #[command(subcommand)]
        action: PresetAction,
    },
}

#[derive(Subcommand)]
enum PresetAction {
    List,
    /// Print a preset as a TOML config.
    Show {
        name: String,
        #[arg(long, value_enum, default_value = "adam")]
        optimizer: OptimizerArg,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum OptimizerArg {
    Sgdm,
    Adam,
}

impl From<OptimizerArg> for OptimizerName {
    fn from(a: OptimizerArg) -> Self {
        match a {
            OptimizerArg::Sgdm => OptimizerName::Sgdm,
            OptimizerArg::Adam => OptimizerName::Adam,
        }
    }
}

fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_VAR)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn run_dir(config: &ExperimentConfig) -> PathBuf {
    output_root().join(config.output_dir.as_deref().unwrap_or(&config.name))
}

fn seeds_for(config: &ExperimentConfig, seed: Option<u64>) -> Vec<u64> {
    seed.map_or_else(|| config.seeds.clone(), |s| vec![s])
}

fn train(path: &Path, seed: Option<u64>) -> Result<serde_json::Value> {
    let config = ExperimentConfig::load(path)?;
    let mut out = ArtifactWriter::new(run_dir(&config))?;
    out.write_bytes("config.toml", config.to_toml()?.as_bytes())?;
    let mut traces = Vec::new();
    for s in seeds_for(&config, seed) {
        let trace = run_training(&config, s)?;
        out.trace(&format!("seed{s}"), &trace)?;
        traces.push(trace);
    }
    let complete: Vec<_> = traces.iter().filter(|t| !t.diverged()).cloned().collect();
    let summary = json!({
        "name": config.name,
        "runs": traces.iter().map(|t| json!({
            "seed": t.seed,
            "final_loss": t.final_loss(),
            "diverged_at": t.diverged_at,
            "wall_clock_secs": t.wall_clock_secs,
        })).collect::<Vec<_>>(),
        "summary": if complete.is_empty() { None } else { Some(summarize(&complete)?) },
    });
    if !complete.is_empty() {
        out.summary_curve("summary.csv", &summarize(&complete)?)?;
    }
    out.json("summary.json", &summary)?;
    let dir = out.root().to_path_buf();
    out.finish(&config.name)?;
    Ok(json!({ "output": dir }))
}

fn grid(path: &Path) -> Result<serde_json::Value> {
    let config = ExperimentConfig::load(path)?;
    let lrs = config.optimizer.lr_grid.clone().unwrap_or_else(default_lr_grid);
    let result = grid_search(&config, &lrs, &config.seeds)?;
    let mut out = ArtifactWriter::new(run_dir(&config))?;
    out.json("grid.json", &result)?;
    let dir = out.root().to_path_buf();
    out.finish(&config.name)?;
    Ok(json!({ "output": dir, "best_lr": result.best_lr }))
}

fn probe_noise(path: &Path, at_init: bool, seed: Option<u64>) -> Result<serde_json::Value> {
    let mut config = ExperimentConfig::load(path)?;
    let seed = seed.unwrap_or(config.seeds[0]);
    let report = if at_init {
        noise_at_init(&config, seed)?
    } else {
        config.probes.noise_iters = vec![config.iterations];
        config.probes.smoothness_every = 0;
        config.probes.curvature_iters.clear();
        let trace = run_training(&config, seed)?;
        match trace.noise.into_iter().next() {
            Some(snap) => snap.report,
            None => return Err(Error::NonFinite(format!("run diverged at iteration {:?}", trace.diverged_at))),
        }
    };
    let mut out = ArtifactWriter::new(run_dir(&config))?;
    out.noise(&format!("seed{seed}"), &report)?;
    let summary = json!({
        "seed": seed,
        "at_init": at_init,
        "gaussian_fit": report.gaussian,
        "excess_kurtosis": report.excess_kurtosis,
        "top_decile_qq_slope": report.top_decile_slope,
        "point_mass": report.point_mass,
    });
    out.json(&format!("seed{seed}/noise_summary.json"), &summary)?;
    out.finish(&config.name)?;
    Ok(summary)
}

fn probe_hessian(path: &Path, iters: Vec<usize>, seed: Option<u64>) -> Result<serde_json::Value> {
    let mut config = ExperimentConfig::load(path)?;
    if let Some(&bad) = iters.iter().find(|&&i| i > config.iterations) {
        return Err(Error::Config(format!("checkpoint {bad} is beyond the run length {}", config.iterations)));
    }
    config.probes.curvature_iters = iters;
    config.probes.smoothness_every = 0;
    let mut out = ArtifactWriter::new(run_dir(&config))?;
    let mut runs = Vec::new();
    for s in seeds_for(&config, seed) {
        let trace = run_training(&config, s)?;
        out.curvature(&format!("seed{s}/curvature.csv"), &trace.curvature)?;
        runs.push(json!({
            "seed": s,
            "diverged_at": trace.diverged_at,
            "robust_condition_numbers": trace.curvature.iter().map(|c| json!({
                "iter": c.iteration,
                "value": c.robust_condition_number,
            })).collect::<Vec<_>>(),
        }));
    }
    let summary = json!({ "runs": runs });
    out.json("curvature_summary.json", &summary)?;
    out.finish(&config.name)?;
    Ok(summary)
}

fn run(cli: Cli) -> Result<serde_json::Value> {
    match cli.command {
        Command::Train { config, seed } => train(&config, seed),
        Command::Grid { config } => grid(&config),
        Command::ProbeNoise { config, at_init, seed } => probe_noise(&config, at_init, seed),
        Command::ProbeHessian { config, iters, seed } => probe_hessian(&config, iters, seed),
        Command::Reproduce {
            target,
            seeds,
            iterations,
        } => {
            let target: Target = target.parse()?;
            let mut options = ReproduceOptions::new(output_root());
            if let Some(seeds) = seeds {
                options.seeds = seeds;
            }
            options.iterations = iterations;
            let outcome = reproduce(target, &options)?;
            Ok(json!({ "output": outcome.dir, "summary": outcome.summary }))
        }
        Command::Presets { action } => match action {
            PresetAction::List => Ok(json!(PRESETS
                .iter()
                .map(|p| json!({
                    "name": p.name,
                    "description": p.description,
                    "sgdm_lr": p.lr(OptimizerName::Sgdm),
                    "adam_lr": p.lr(OptimizerName::Adam),
                }))
                .collect::<Vec<_>>())),
            PresetAction::Show { name, optimizer } => {
                let text = find_preset(&name)?.config(optimizer.into()).to_toml()?;
                print!("{text}");
                Ok(serde_json::Value::Null)
            }
        },
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(serde_json::Value::Null) => ExitCode::SUCCESS,
        Ok(value) => {
            println!("{}", serde_json::to_string_pretty(&value).expect("serializable"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            let body = json!({ "error": { "kind": e.kind(), "message": e.to_string() } });
            eprintln!("{body}");
            ExitCode::FAILURE
        }
    }
}
