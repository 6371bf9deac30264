//! Named experiment settings with their tuned learning rates.

use crate::error::{Error, Result};
use crate::model::Variant;
use crate::tasks::{CovariateLaw, TaskSpec};

use super::config::{ExperimentConfig, ModelConfig, OptimizerConfig, OptimizerName, ProbeConfig};

pub struct Preset {
    pub name: &'static str,
    pub description: &'static str,
    layers: usize,
    d: usize,
    n: usize,
    law: CovariateLaw,
    variant: Variant,
    front_mlp: Option<usize>,
    sgdm_lr: f64,
    adam_lr: f64,
}

const HEAVY: CovariateLaw = CovariateLaw::GammaScaledSphere {
    shape: 0.1,
    scale: 10.0,
};

const fn preset(
    name: &'static str,
    description: &'static str,
    layers: usize,
    n: usize,
    law: CovariateLaw,
    sgdm_lr: f64,
    adam_lr: f64,
) -> Preset {
    Preset {
        name,
        description,
        layers,
        d: 5,
        n,
        law,
        variant: Variant::SingleQ,
        front_mlp: None,
        sgdm_lr,
        adam_lr,
    }
}

pub const PRESETS: &[Preset] = &[
    preset("setting1", "L=3, n=20, Gaussian covariates", 3, 20, CovariateLaw::Gaussian, 0.02, 0.005),
    preset("setting2", "L=3, n=5, Gaussian covariates", 3, 5, CovariateLaw::Gaussian, 0.01, 0.02),
    preset("setting3", "L=3, n=20, sqrt(Gamma(0.1, 10))-scaled spherical covariates", 3, 20, HEAVY, 0.02, 0.02),
    preset("sphere", "L=3, n=20, uniform spherical covariates", 3, 20, CovariateLaw::Sphere, 5.0, 0.1),
    preset("heavy", "L=3, n=20, sqrt(Gamma(0.1, 10))-scaled spherical covariates", 3, 20, HEAVY, 0.02, 0.02),
    preset("L2", "setting1 with 2 layers", 2, 20, CovariateLaw::Gaussian, 0.1, 0.1),
    preset("L4", "setting1 with 4 layers", 4, 20, CovariateLaw::Gaussian, 0.05, 0.05),
    preset("L6", "setting1 with 6 layers", 6, 20, CovariateLaw::Gaussian, 0.05, 0.05),
    preset("L8", "setting1 with 8 layers", 8, 20, CovariateLaw::Gaussian, 0.05, 0.02),
    Preset {
        front_mlp: Some(15),
        ..preset(
            "mlp",
            "setting1 with responses through a frozen random ReLU MLP and a 15-unit front MLP",
            3,
            20,
            CovariateLaw::MlpDistorted { mlp_seed: 0 },
            0.05,
            0.01,
        )
    },
    Preset {
        variant: Variant::SeparateQk,
        ..preset("separate_qk", "setting1 with separate key and query matrices", 3, 20, CovariateLaw::Gaussian, 0.02, 0.005)
    },
    Preset {
        d: 20,
        ..preset("wide", "L=8, d=20, n=60, Gaussian covariates", 8, 60, CovariateLaw::Gaussian, 0.05, 0.02)
    },
    Preset {
        variant: Variant::Softmax,
        ..preset("softmax", "setting1 with softmax attention", 3, 20, CovariateLaw::Gaussian, 0.02, 0.005)
    },
];

pub fn find_preset(name: &str) -> Result<&'static Preset> {
    PRESETS.iter().find(|p| p.name == name).ok_or_else(|| {
        let names: Vec<&str> = PRESETS.iter().map(|p| p.name).collect();
        Error::Config(format!("unknown preset `{name}`; known presets: {}", names.join(", ")))
    })
}

impl Preset {
    pub fn lr(&self, optimizer: OptimizerName) -> f64 {
        match optimizer {
            OptimizerName::Sgdm => self.sgdm_lr,
            OptimizerName::Adam => self.adam_lr,
        }
    }

    /// Full config: 2000 iterations, batch 64, seeds 0..6, default probes.
    pub fn config(&self, optimizer: OptimizerName) -> ExperimentConfig {
        ExperimentConfig {
            name: format!("{}-{}", self.name, optimizer.as_str()),
            iterations: 2000,
            batch_size: 64,
            seeds: (0..6).collect(),
            clip_threshold: 1.0,
            eval_seed: 1_000_003,
            output_dir: None,
            task: TaskSpec {
                d: self.d,
                n: self.n,
                covariates: self.law,
            },
            model: ModelConfig {
                layers: self.layers,
                variant: self.variant,
                init_std: 0.02,
                front_mlp: self.front_mlp,
            },
            optimizer: OptimizerConfig::new(optimizer, self.lr(optimizer)),
            probes: ProbeConfig::default(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_is_valid_and_round_trips() {
        for p in PRESETS {
            for opt in OptimizerName::BOTH {
                let c = p.config(opt);
                c.validate().unwrap();
                let back = ExperimentConfig::from_toml(&c.to_toml().unwrap()).unwrap();
                assert_eq!(back, c, "{}", p.name);
            }
        }
    }

    #[test]
    fn tuned_rates() {
        assert_eq!(find_preset("setting1").unwrap().lr(OptimizerName::Adam), 0.005);
        assert_eq!(find_preset("sphere").unwrap().lr(OptimizerName::Sgdm), 5.0);
        assert!(find_preset("setting9").is_err());
    }
}
