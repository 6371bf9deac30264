//! End-to-end drivers that regenerate each figure or table's data.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use rayon::prelude::*;
use serde_json::{json, Map, Value};

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::probes::{fit_generalized_smoothness, sample_gradient_noise, NoiseReport};
use crate::rng::{stream, Purpose};
use crate::stats;

use super::config::{default_lr_grid, ExperimentConfig, OptimizerName, ProbeConfig};
use super::output::{ArtifactWriter, Manifest};
use super::presets::find_preset;
use super::summary::{grid_search, summarize, MeanStd};
use super::train::{run_training, TrainTrace};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    Fig2,
    Fig3,
    Table2,
    Fig5,
    Fig6,
    Fig4Left,
    Fig4Right,
    Fig9,
    Fig10,
    Fig11,
    Fig12Mlp,
    Fig13,
}

impl Target {
    pub const ALL: [Target; 12] = [
        Target::Fig2,
        Target::Fig3,
        Target::Table2,
        Target::Fig5,
        Target::Fig6,
        Target::Fig4Left,
        Target::Fig4Right,
        Target::Fig9,
        Target::Fig10,
        Target::Fig11,
        Target::Fig12Mlp,
        Target::Fig13,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Target::Fig2 => "fig2",
            Target::Fig3 => "fig3",
            Target::Table2 => "table2",
            Target::Fig5 => "fig5",
            Target::Fig6 => "fig6",
            Target::Fig4Left => "fig4_left",
            Target::Fig4Right => "fig4_right",
            Target::Fig9 => "fig9",
            Target::Fig10 => "fig10",
            Target::Fig11 => "fig11",
            Target::Fig12Mlp => "fig12_mlp",
            Target::Fig13 => "fig13",
        }
    }
}

impl fmt::Display for Target {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Target {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Target::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::UnknownTarget {
                given: s.to_string(),
                valid: Target::ALL.map(|t| t.as_str()).join(", "),
            })
    }
}

#[derive(Debug, Clone)]
pub struct ReproduceOptions {
    /// Artifacts go to `root/<target>/`.
    pub root: PathBuf,
    pub seeds: Vec<u64>,
    /// Shortens every run; curvature checkpoints are rescaled to the same
    /// fraction of the run.
    pub iterations: Option<usize>,
}

impl ReproduceOptions {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            seeds: (0..6).collect(),
            iterations: None,
        }
    }

    fn apply(&self, mut config: ExperimentConfig) -> ExperimentConfig {
        config.seeds = self.seeds.clone();
        if let Some(n) = self.iterations {
            let full = config.iterations;
            config.probes.curvature_iters = config
                .probes
                .curvature_iters
                .iter()
                .map(|&c| ((c * n + full / 2) / full).clamp(1, n))
                .collect();
            config.probes.curvature_iters.dedup();
            config.iterations = n;
        }
        config
    }
}

#[derive(Debug)]
pub struct ReproduceOutcome {
    pub dir: PathBuf,
    pub summary: Value,
    pub manifest: Manifest,
}

pub fn reproduce(target: Target, options: &ReproduceOptions) -> Result<ReproduceOutcome> {
    if options.seeds.is_empty() {
        return Err(Error::Config("reproduce needs at least one seed".into()));
    }
    let dir = options.root.join(target.as_str());
    let mut out = ArtifactWriter::new(&dir)?;
    let settings = ["setting1", "setting2", "setting3"];
    let depths = ["L2", "L4", "L6", "L8"];
    let body = match target {
        Target::Fig2 => compare(&mut out, options, &settings, ProbeConfig::loss_only())?.json,
        Target::Fig5 => {
            let probes = ProbeConfig {
                curvature_iters: Vec::new(),
                ..ProbeConfig::default()
            };
            compare(&mut out, options, &settings, probes)?.json
        }
        Target::Table2 => curvature_study(&mut out, options, &settings)?,
        Target::Fig3 => noise_study(&mut out, options, &["setting1", "setting2", "setting3", "sphere"])?,
        Target::Fig6 => softmax_study(&mut out, options)?,
        Target::Fig4Left => compare(&mut out, options, &["separate_qk"], ProbeConfig::loss_only())?.json,
        Target::Fig4Right => compare(&mut out, options, &["wide"], ProbeConfig::loss_only())?.json,
        Target::Fig9 => compare(&mut out, options, &depths, ProbeConfig::loss_only())?.json,
        Target::Fig10 => noise_study(&mut out, options, &depths)?,
        Target::Fig11 => curvature_study(&mut out, options, &depths)?,
        Target::Fig12Mlp => {
            let loss = compare(&mut out, options, &["mlp"], ProbeConfig::loss_only())?.json;
            let noise = noise_study(&mut out, options, &["mlp"])?;
            let curvature = curvature_study(&mut out, options, &["mlp"])?;
            json!({ "loss": loss, "noise": noise, "curvature": curvature })
        }
        Target::Fig13 => smoothness_fits(&mut out, options, &settings)?,
    };
    let summary = json!({
        "target": target.as_str(),
        "seeds": options.seeds,
        "iterations": options.iterations,
        "results": body,
    });
    out.json("summary.json", &summary)?;
    let manifest = out.finish(target.as_str())?;
    Ok(ReproduceOutcome { dir, summary, manifest })
}

/// Runs every seed of `config` in parallel, in seed order.
pub fn run_seeds(config: &ExperimentConfig) -> Result<Vec<TrainTrace>> {
    config.seeds.par_iter().map(|&s| run_training(config, s)).collect()
}

struct Group {
    preset: String,
    optimizer: OptimizerName,
    traces: Vec<TrainTrace>,
}

struct Comparison {
    groups: Vec<Group>,
    json: Value,
}

fn timing(traces: &[TrainTrace]) -> Value {
    let secs: Vec<f64> = traces.iter().map(|t| t.wall_clock_secs).collect();
    json!({ "wall_clock_secs_per_run": MeanStd::of(&secs) })
}

fn group_json(traces: &[TrainTrace], optimizer: OptimizerName, lr: f64) -> Result<Value> {
    let complete: Vec<TrainTrace> = traces.iter().filter(|t| !t.diverged()).cloned().collect();
    let mut m = Map::new();
    m.insert("optimizer".into(), json!(optimizer.as_str()));
    m.insert("lr".into(), json!(lr));
    m.insert("runs".into(), json!(traces.len()));
    m.insert("diverged".into(), json!(traces.len() - complete.len()));
    if !complete.is_empty() {
        let s = summarize(&complete)?;
        m.insert("final_log_loss".into(), json!(s.final_log_loss));
        m.insert("final_loss".into(), json!(s.final_loss));
        let at_1250: Vec<f64> = complete.iter().filter_map(|t| t.eval_at(1250)).map(f64::ln).collect();
        if at_1250.len() == complete.len() {
            m.insert("log_eval_loss_at_1250".into(), json!(MeanStd::of(&at_1250)));
        }
        let medians: Vec<f64> = complete
            .iter()
            .filter(|t| !t.smoothness.records.is_empty())
            .map(|t| {
                let xs: Vec<f64> = t.smoothness.records.iter().map(|r| r.directional_smoothness).collect();
                stats::median(&xs)
            })
            .collect::<Result<_>>()?;
        if !medians.is_empty() {
            m.insert("median_dir_smooth".into(), json!(MeanStd::of(&medians)));
        }
    }
    m.insert("timing".into(), timing(traces));
    Ok(Value::Object(m))
}

/// SGDM against Adam on each preset with its tuned learning rates.
fn compare(out: &mut ArtifactWriter, options: &ReproduceOptions, presets: &[&str], probes: ProbeConfig) -> Result<Comparison> {
    let mut groups = Vec::new();
    let mut body = Map::new();
    for &name in presets {
        let preset = find_preset(name)?;
        let mut per_opt = Map::new();
        for opt in OptimizerName::BOTH {
            let mut config = preset.config(opt);
            config.probes = probes.clone();
            let config = options.apply(config);
            let traces = run_seeds(&config)?;
            for t in &traces {
                out.trace(&format!("{name}/{}/seed{}", opt.as_str(), t.seed), t)?;
            }
            let complete: Vec<TrainTrace> = traces.iter().filter(|t| !t.diverged()).cloned().collect();
            if !complete.is_empty() {
                out.summary_curve(&format!("{name}/{}/summary.csv", opt.as_str()), &summarize(&complete)?)?;
            }
            per_opt.insert(opt.as_str().into(), group_json(&traces, opt, config.optimizer.lr)?);
            groups.push(Group {
                preset: name.to_string(),
                optimizer: opt,
                traces,
            });
        }
        body.insert(name.into(), Value::Object(per_opt));
    }
    Ok(Comparison {
        groups,
        json: Value::Object(body),
    })
}

/// Per-seed `R_SGD / R_Adam` at each curvature checkpoint.
pub fn condition_ratios(sgdm: &[TrainTrace], adam: &[TrainTrace], iter: usize) -> (Vec<f64>, usize) {
    let mut ratios = Vec::new();
    let mut skipped = 0;
    for (s, a) in sgdm.iter().zip(adam) {
        let rs = s.curvature_at(iter).and_then(|c| c.robust_condition_number.value());
        let ra = a.curvature_at(iter).and_then(|c| c.robust_condition_number.value());
        match (rs, ra) {
            (Some(x), Some(y)) => ratios.push(x / y),
            _ => skipped += 1,
        }
    }
    (ratios, skipped)
}

fn curvature_study(out: &mut ArtifactWriter, options: &ReproduceOptions, presets: &[&str]) -> Result<Value> {
    let probes = ProbeConfig {
        smoothness_every: 0,
        ..ProbeConfig::default()
    };
    let cmp = compare(out, options, presets, probes)?;
    let mut body = Map::new();
    for &name in presets {
        let pick = |opt| {
            cmp.groups
                .iter()
                .find(|g| g.preset == name && g.optimizer == opt)
                .map(|g| g.traces.as_slice())
                .unwrap_or_default()
        };
        let (sgdm, adam) = (pick(OptimizerName::Sgdm), pick(OptimizerName::Adam));
        let checkpoints: Vec<usize> = sgdm.first().map(|t| t.curvature.iter().map(|c| c.iteration).collect()).unwrap_or_default();
        let mut per_iter = Map::new();
        for iter in checkpoints {
            let (ratios, skipped) = condition_ratios(sgdm, adam, iter);
            let values = |ts: &[TrainTrace]| -> Vec<f64> {
                ts.iter()
                    .filter_map(|t| t.curvature_at(iter).and_then(|c| c.robust_condition_number.value()))
                    .collect()
            };
            let mut entry = Map::new();
            entry.insert("ratio_values".into(), json!(ratios));
            if !ratios.is_empty() {
                entry.insert("ratio".into(), json!(MeanStd::of(&ratios)));
            }
            entry.insert("not_computable".into(), json!(skipped));
            entry.insert("sgdm_condition_numbers".into(), json!(values(sgdm)));
            entry.insert("adam_condition_numbers".into(), json!(values(adam)));
            per_iter.insert(iter.to_string(), Value::Object(entry));
        }
        body.insert(name.into(), Value::Object(per_iter));
    }
    Ok(json!({ "condition_number_ratios": body, "runs": cmp.json }))
}

/// Gradient noise at initialization for each preset.
pub fn noise_at_init(config: &ExperimentConfig, seed: u64) -> Result<NoiseReport> {
    let layout = config.layout()?;
    let params = ModelParams::init(layout, config.model.init_std, &mut stream(seed, Purpose::Init))?;
    sample_gradient_noise(
        &params,
        &config.task,
        config.probes.noise_samples,
        config.probes.noise_batch,
        &mut stream(seed, Purpose::Noise),
    )
}

fn noise_study(out: &mut ArtifactWriter, options: &ReproduceOptions, presets: &[&str]) -> Result<Value> {
    let seed = options.seeds[0];
    let mut body = Map::new();
    for &name in presets {
        let config = find_preset(name)?.config(OptimizerName::Adam);
        let report = noise_at_init(&config, seed)?;
        out.noise(&format!("{name}/noise"), &report)?;
        body.insert(
            name.into(),
            json!({
                "seed": seed,
                "samples": report.sample_count,
                "batch_size": report.batch_size,
                "gaussian_fit": report.gaussian,
                "excess_kurtosis": report.excess_kurtosis,
                "top_decile_qq_slope": report.top_decile_slope,
                "point_mass": report.point_mass,
            }),
        );
    }
    Ok(Value::Object(body))
}

fn smoothness_fits(out: &mut ArtifactWriter, options: &ReproduceOptions, presets: &[&str]) -> Result<Value> {
    let mut body = Map::new();
    for &name in presets {
        let mut config = find_preset(name)?.config(OptimizerName::Adam);
        config.probes.curvature_iters.clear();
        let config = options.apply(config);
        let traces = run_seeds(&config)?;
        let mut fits = Vec::new();
        for t in &traces {
            out.trace(&format!("{name}/adam/seed{}", t.seed), t)?;
            fits.push(match fit_generalized_smoothness(&t.smoothness) {
                Ok(f) => json!({ "seed": t.seed, "l0": f.l0, "l1": f.l1, "r_squared": f.r_squared, "correlation": f.correlation }),
                Err(e) => json!({ "seed": t.seed, "error": e.to_string() }),
            });
        }
        body.insert(name.into(), json!({ "fits": fits, "timing": timing(&traces) }));
    }
    Ok(Value::Object(body))
}

/// Linear against softmax attention, each with its grid-tuned Adam rate.
fn softmax_study(out: &mut ArtifactWriter, options: &ReproduceOptions) -> Result<Value> {
    let grid = default_lr_grid();
    let grid_seeds: Vec<u64> = options.seeds.iter().take(2).copied().collect();
    let mut body = BTreeMap::new();
    for name in ["setting1", "softmax"] {
        let mut config = options.apply(find_preset(name)?.config(OptimizerName::Adam));
        config.probes = ProbeConfig {
            eval_every: config.iterations,
            ..ProbeConfig::loss_only()
        };
        let search = grid_search(&config, &grid, &grid_seeds)?;
        config.optimizer.lr = search.best_lr;
        config.probes = ProbeConfig::loss_only();
        let traces = run_seeds(&config)?;
        for t in &traces {
            out.trace(&format!("{name}/adam/seed{}", t.seed), t)?;
        }
        let mut group = group_json(&traces, OptimizerName::Adam, search.best_lr)?;
        group["grid"] = json!(search.records);
        body.insert(name, group);
    }
    Ok(json!(body))
}
