//! Heavy-ball SGD, Adam and global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::model::{GradientSet, Layout, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    /// `m ← μ·m + g`, `θ ← θ − lr·m`.
    Sgdm { momentum: f64 },
    /// Bias-corrected Adam with `ε` added after the square root.
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub const fn sgdm() -> Self {
        OptimizerKind::Sgdm { momentum: 0.9 }
    }

    pub const fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.9,
            eps: 1e-8,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            OptimizerKind::Sgdm { .. } => "sgdm",
            OptimizerKind::Adam { .. } => "adam",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..1.0).contains(&v) {
                Ok(())
            } else {
                invalid(format!("{name} must lie in [0, 1), got {v}"))
            }
        };
        match *self {
            OptimizerKind::Sgdm { momentum } => unit("momentum", momentum),
            OptimizerKind::Adam { beta1, beta2, eps } => {
                unit("beta1", beta1)?;
                unit("beta2", beta2)?;
                if eps > 0.0 && eps.is_finite() {
                    Ok(())
                } else {
                    invalid("eps must be positive")
                }
            }
        }
    }
}

/// Moment buffers and step counter for one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub first_moment: Vec<f64>,
    /// Empty for SGDM.
    pub second_moment: Vec<f64>,
    pub step_count: u64,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, layout: &Layout) -> Result<Self> {
        kind.validate()?;
        let len = layout.len();
        let second = match kind {
            OptimizerKind::Adam { .. } => vec![0.0; len],
            OptimizerKind::Sgdm { .. } => Vec::new(),
        };
        Ok(Self {
            kind,
            first_moment: vec![0.0; len],
            second_moment: second,
            step_count: 0,
        })
    }

    /// Dispatches to [`sgdm_step`] or [`adam_step`].
    pub fn step(&mut self, params: &mut ModelParams, g: &GradientSet, lr: f64) -> Result<()> {
        match self.kind {
            OptimizerKind::Sgdm { .. } => sgdm_step(self, params, g, lr),
            OptimizerKind::Adam { .. } => adam_step(self, params, g, lr),
        }
    }
}

fn check_step(state: &OptimizerState, params: &ModelParams, g: &GradientSet, lr: f64) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return invalid(format!("learning rate must be positive, got {lr}"));
    }
    if g.len() != params.len() || state.first_moment.len() != params.len() {
        return invalid(format!(
            "shape mismatch: params {}, gradient {}, state {}",
            params.len(),
            g.len(),
            state.first_moment.len()
        ));
    }
    Ok(())
}

/// Rescales `g` to norm `threshold` when its norm strictly exceeds it.
pub fn clip_global(g: &GradientSet, threshold: f64) -> Result<GradientSet> {
    if !(threshold > 0.0) {
        return invalid(format!("clip threshold must be positive, got {threshold}"));
    }
    if !g.is_finite() {
        return Err(Error::NonFinite("gradient passed to clip_global".into()));
    }
    let norm = g.norm();
    if norm > threshold {
        Ok(g.scaled(threshold / norm))
    } else {
        Ok(g.clone())
    }
}

pub fn sgdm_step(state: &mut OptimizerState, params: &mut ModelParams, g: &GradientSet, lr: f64) -> Result<()> {
    check_step(state, params, g, lr)?;
    let OptimizerKind::Sgdm { momentum } = state.kind else {
        return invalid("sgdm_step called with an Adam state");
    };
    let m = &mut state.first_moment;
    for ((p, mi), gi) in params.as_mut_slice().iter_mut().zip(m.iter_mut()).zip(g.as_slice()) {
        *mi = momentum * *mi + gi;
        *p -= lr * *mi;
    }
    state.step_count += 1;
    Ok(())
}

pub fn adam_step(state: &mut OptimizerState, params: &mut ModelParams, g: &GradientSet, lr: f64) -> Result<()> {
    check_step(state, params, g, lr)?;
    let OptimizerKind::Adam { beta1, beta2, eps } = state.kind else {
        return invalid("adam_step called with an SGDM state");
    };
    state.step_count += 1;
    let t = state.step_count as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    let values = params.as_mut_slice();
    for i in 0..values.len() {
        let gi = g.as_slice()[i];
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        *m = beta1 * *m + (1.0 - beta1) * gi;
        *v = beta2 * *v + (1.0 - beta2) * gi * gi;
        values[i] -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Variant;

    fn scalar_layout() -> Layout {
        // the smallest layout has 8 entries; tests drive them all with the same value
        Layout::new(Variant::SingleQ, 1, 1, None).unwrap()
    }

    fn constant(layout: Layout, v: f64) -> GradientSet {
        GradientSet::from_vec(layout, vec![v; layout.len()]).unwrap()
    }

    #[test]
    fn plain_sgd_step() {
        let layout = scalar_layout();
        let mut state = OptimizerState::new(OptimizerKind::Sgdm { momentum: 0.0 }, &layout).unwrap();
        let mut params = ModelParams::from_vec(layout, vec![1.0; 8]).unwrap();
        state.step(&mut params, &constant(layout, 2.0), 0.1).unwrap();
        assert!(params.as_slice().iter().all(|&p| (p - 0.8).abs() < 1e-15));
    }

    #[test]
    fn heavy_ball_two_steps() {
        let layout = scalar_layout();
        let mut state = OptimizerState::new(OptimizerKind::sgdm(), &layout).unwrap();
        let mut params = ModelParams::zeros(layout);
        let g = constant(layout, 1.0);
        state.step(&mut params, &g, 0.1).unwrap();
        assert!((params.as_slice()[0] + 0.1).abs() < 1e-15);
        state.step(&mut params, &g, 0.1).unwrap();
        assert!((state.first_moment[0] - 1.9).abs() < 1e-15);
        assert!((params.as_slice()[0] + 0.29).abs() < 1e-15);
        assert_eq!(state.step_count, 2);
    }

    #[test]
    fn zero_gradient_keeps_params() {
        let layout = scalar_layout();
        let mut state = OptimizerState::new(OptimizerKind::sgdm(), &layout).unwrap();
        let mut params = ModelParams::from_vec(layout, (0..8).map(f64::from).collect()).unwrap();
        let before = params.clone();
        state.step(&mut params, &GradientSet::zeros(layout), 0.3).unwrap();
        assert_eq!(params, before);
    }

    #[test]
    fn adam_first_step() {
        let layout = scalar_layout();
        for (g, expected) in [(1.0, -0.1 / (1.0 + 1e-8)), (-4.0, 0.1 * 4.0 / (4.0 + 1e-8))] {
            let mut state = OptimizerState::new(OptimizerKind::adam(), &layout).unwrap();
            let mut params = ModelParams::zeros(layout);
            state.step(&mut params, &constant(layout, g), 0.1).unwrap();
            assert!((params.as_slice()[0] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let layout = scalar_layout();
        let other = Layout::new(Variant::SingleQ, 2, 1, None).unwrap();
        let mut state = OptimizerState::new(OptimizerKind::adam(), &layout).unwrap();
        let mut params = ModelParams::zeros(layout);
        assert!(state.step(&mut params, &GradientSet::zeros(other), 0.1).is_err());
        assert!(state.step(&mut params, &GradientSet::zeros(layout), 0.0).is_err());
        assert!(sgdm_step(&mut state, &mut params, &GradientSet::zeros(layout), 0.1).is_err());
        assert!(OptimizerState::new(OptimizerKind::Sgdm { momentum: 1.0 }, &layout).is_err());
        assert!(clip_global(&GradientSet::zeros(layout), 0.0).is_err());
        assert!(clip_global(&constant(layout, f64::NAN), 1.0).is_err());
    }
}
