//! Random linear-regression tasks and prompt assembly.

use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::linalg::{dot, Mat};
use crate::model::{MlpView, Prompt};
use crate::rng::{stream, LabRng, Purpose};

/// Hidden width of the frozen response-distorting MLP.
pub const DISTORTION_HIDDEN: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum CovariateLaw {
    /// x ~ N(0, I_d)
    Gaussian,
    /// x ~ Unif(S^{d-1})
    Sphere,
    /// x = √g · u with g ~ Gamma(shape, scale), u ~ Unif(S^{d-1})
    GammaScaledSphere { shape: f64, scale: f64 },
    /// Gaussian covariates, responses ⟨w, MLP(x)⟩ through a frozen random ReLU MLP
    MlpDistorted { mlp_seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub d: usize,
    pub n: usize,
    pub covariates: CovariateLaw,
}

impl TaskSpec {
    pub fn new(d: usize, n: usize, covariates: CovariateLaw) -> Result<Self> {
        let spec = Self { d, n, covariates };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.n == 0 {
            return invalid(format!("task needs d >= 1 and n >= 1 (got d={}, n={})", self.d, self.n));
        }
        if let CovariateLaw::GammaScaledSphere { shape, scale } = self.covariates {
            if !(shape > 0.0 && scale > 0.0 && shape.is_finite() && scale.is_finite()) {
                return invalid("gamma shape and scale must be positive and finite");
            }
        }
        Ok(())
    }

    /// The frozen distortion MLP for [`CovariateLaw::MlpDistorted`].
    pub fn distortion(&self) -> Option<MlpWeights> {
        match self.covariates {
            CovariateLaw::MlpDistorted { mlp_seed } => Some(MlpWeights::random(
                self.d,
                DISTORTION_HIDDEN,
                &mut stream(mlp_seed, Purpose::TaskMlp),
            )),
            _ => None,
        }
    }
}

/// A batch of prompts with their hidden targets and task vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskBatch {
    pub prompts: Vec<Prompt>,
    pub targets: Vec<f64>,
    pub weights: Vec<Vec<f64>>,
}

impl TaskBatch {
    pub fn new(prompts: Vec<Prompt>, targets: Vec<f64>, weights: Vec<Vec<f64>>) -> Result<Self> {
        if prompts.len() != targets.len() || prompts.len() != weights.len() {
            return invalid("prompts, targets and weights must have equal lengths");
        }
        Ok(Self {
            prompts,
            targets,
            weights,
        })
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    /// The batch concatenated with itself `times` times.
    pub fn repeated(&self, times: usize) -> TaskBatch {
        let cycle = |k: usize| k % self.len();
        let idx = 0..self.len() * times;
        TaskBatch {
            prompts: idx.clone().map(|k| self.prompts[cycle(k)].clone()).collect(),
            targets: idx.clone().map(|k| self.targets[cycle(k)]).collect(),
            weights: idx.map(|k| self.weights[cycle(k)].clone()).collect(),
        }
    }
}

/// Anything that can hand out fresh task batches.
pub trait TaskSource {
    fn sample(&self, count: usize, rng: &mut LabRng) -> Result<TaskBatch>;
}

impl TaskSource for TaskSpec {
    fn sample(&self, count: usize, rng: &mut LabRng) -> Result<TaskBatch> {
        sample_batch(self, count, rng)
    }
}

/// Always returns copies of one task. Useful as a noise-free baseline.
#[derive(Debug, Clone)]
pub struct FrozenTask {
    pub prompt: Prompt,
    pub target: f64,
    pub weight: Vec<f64>,
}

impl TaskSource for FrozenTask {
    fn sample(&self, count: usize, _rng: &mut LabRng) -> Result<TaskBatch> {
        if count == 0 {
            return invalid("batch size must be positive");
        }
        TaskBatch::new(
            vec![self.prompt.clone(); count],
            vec![self.target; count],
            vec![self.weight.clone(); count],
        )
    }
}

/// Draws `count` independent tasks. Per task the generator is consumed in a
/// fixed order: w⋆ first, then covariates 1..=n+1.
pub fn sample_batch<R: Rng + ?Sized>(spec: &TaskSpec, count: usize, rng: &mut R) -> Result<TaskBatch> {
    spec.validate()?;
    if count == 0 {
        return invalid("batch size must be positive");
    }
    let distortion = spec.distortion();
    let mut prompts = Vec::with_capacity(count);
    let mut targets = Vec::with_capacity(count);
    let mut weights = Vec::with_capacity(count);
    let mut xs: Vec<Vec<f64>> = vec![vec![0.0; spec.d]; spec.n + 1];
    let mut mapped = vec![0.0; spec.d];
    let mut pre = vec![0.0; DISTORTION_HIDDEN];
    for _ in 0..count {
        let w: Vec<f64> = (0..spec.d).map(|_| rng.sample(StandardNormal)).collect();
        for x in xs.iter_mut() {
            draw_covariate(&spec.covariates, x, rng)?;
        }
        let mut respond = |x: &[f64]| match &distortion {
            Some(mlp) => {
                mlp.view().apply(x, &mut pre, &mut mapped);
                dot(&w, &mapped)
            }
            None => dot(&w, x),
        };
        let ys: Vec<f64> = xs[..spec.n].iter().map(|x| respond(x)).collect();
        targets.push(respond(&xs[spec.n]));
        prompts.push(build_prompt(&xs, &ys)?);
        weights.push(w);
    }
    TaskBatch::new(prompts, targets, weights)
}

fn draw_covariate<R: Rng + ?Sized>(law: &CovariateLaw, x: &mut [f64], rng: &mut R) -> Result<()> {
    match *law {
        CovariateLaw::Gaussian | CovariateLaw::MlpDistorted { .. } => {
            for v in x.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
        }
        CovariateLaw::Sphere => unit_sphere(x, rng),
        CovariateLaw::GammaScaledSphere { shape, scale } => {
            unit_sphere(x, rng);
            let r = gamma_radial_scale(shape, scale, rng)?;
            for v in x.iter_mut() {
                *v *= r;
            }
        }
    }
    Ok(())
}

fn unit_sphere<R: Rng + ?Sized>(x: &mut [f64], rng: &mut R) {
    loop {
        for v in x.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        let norm = dot(x, x).sqrt();
        if norm > 0.0 {
            for v in x.iter_mut() {
                *v /= norm;
            }
            return;
        }
    }
}

/// `√g` with `g ~ Gamma(shape k, scale θ)` (mean kθ, variance kθ²).
pub fn gamma_radial_scale<R: Rng + ?Sized>(shape: f64, scale: f64, rng: &mut R) -> Result<f64> {
    if !(shape > 0.0 && scale > 0.0) {
        return invalid(format!("gamma parameters must be positive (k={shape}, θ={scale})"));
    }
    let gamma = Gamma::new(shape, scale).map_err(|e| crate::Error::InvalidArgument(e.to_string()))?;
    // small shapes can underflow to exactly zero; the radius must stay positive
    loop {
        let g: f64 = gamma.sample(rng);
        if g > 0.0 {
            return Ok(g.sqrt());
        }
    }
}

/// Packs n+1 covariates and n responses into the (d+1)×(n+1) prompt matrix.
pub fn build_prompt(xs: &[Vec<f64>], ys: &[f64]) -> Result<Prompt> {
    if xs.len() != ys.len() + 1 {
        return invalid(format!(
            "need n+1 covariates for n responses (got {} and {})",
            xs.len(),
            ys.len()
        ));
    }
    let d = xs.first().map_or(0, Vec::len);
    if d == 0 || xs.iter().any(|x| x.len() != d) {
        return invalid("covariates must share a positive dimension");
    }
    let cols = xs.len();
    let mut z = Mat::zeros(d + 1, cols);
    for (c, x) in xs.iter().enumerate() {
        for (r, &v) in x.iter().enumerate() {
            z.set(r, c, v);
        }
    }
    for (c, &y) in ys.iter().enumerate() {
        z.set(d, c, y);
    }
    Prompt::from_matrix(z)
}

/// Owned weights of a one-hidden-layer ReLU MLP `R^d → R^d`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpWeights {
    pub input: usize,
    pub hidden: usize,
    /// hidden × input
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// input × hidden
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl MlpWeights {
    pub fn new(input: usize, hidden: usize, w1: Vec<f64>, b1: Vec<f64>, w2: Vec<f64>, b2: Vec<f64>) -> Result<Self> {
        if w1.len() != hidden * input || b1.len() != hidden || w2.len() != input * hidden || b2.len() != input {
            return invalid(format!(
                "MLP weight shapes do not match input {input}, hidden {hidden}"
            ));
        }
        Ok(Self {
            input,
            hidden,
            w1,
            b1,
            w2,
            b2,
        })
    }

    /// Linear layers initialized uniformly on ±1/√fan_in, weights and biases alike.
    pub fn random<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let mut uniform = |count: usize, fan_in: usize| -> Vec<f64> {
            let b = 1.0 / (fan_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-b, b).expect("valid bound");
            (0..count).map(|_| dist.sample(rng)).collect()
        };
        let w1 = uniform(hidden * input, input);
        let b1 = uniform(hidden, input);
        let w2 = uniform(input * hidden, hidden);
        let b2 = uniform(input, hidden);
        Self {
            input,
            hidden,
            w1,
            b1,
            w2,
            b2,
        }
    }

    pub fn view(&self) -> MlpView<'_> {
        MlpView {
            input: self.input,
            hidden: self.hidden,
            w1: &self.w1,
            b1: &self.b1,
            w2: &self.w2,
            b2: &self.b2,
        }
    }
}

/// `W2·relu(W1·x + b1) + b2`.
pub fn mlp_distort(x: &[f64], mlp: &MlpWeights) -> Result<Vec<f64>> {
    if x.len() != mlp.input {
        return invalid(format!("input has length {}, MLP expects {}", x.len(), mlp.input));
    }
    let mut pre = vec![0.0; mlp.hidden];
    let mut out = vec![0.0; mlp.input];
    mlp.view().apply(x, &mut pre, &mut out);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Purpose};

    fn rng() -> LabRng {
        stream(11, Purpose::Misc)
    }

    #[test]
    fn build_prompt_places_entries() {
        let p = build_prompt(&[vec![1.0], vec![3.0]], &[2.0]).unwrap();
        assert_eq!(p.matrix(), &Mat::from_rows(&[vec![1.0, 3.0], vec![2.0, 0.0]]).unwrap());
        assert_eq!(p.covariate(0), vec![1.0]);
        assert_eq!(p.covariate(1), vec![3.0]);
        assert_eq!(p.responses(), vec![2.0]);
    }

    #[test]
    fn build_prompt_rejects_mismatch() {
        assert!(build_prompt(&[vec![1.0], vec![3.0]], &[2.0, 1.0]).is_err());
        assert!(build_prompt(&[vec![1.0], vec![3.0, 1.0]], &[2.0]).is_err());
    }

    #[test]
    fn sphere_covariates_have_unit_norm() {
        let spec = TaskSpec::new(5, 20, CovariateLaw::Sphere).unwrap();
        let batch = sample_batch(&spec, 50, &mut rng()).unwrap();
        for p in &batch.prompts {
            for i in 0..=spec.n {
                let x = p.covariate(i);
                assert!((dot(&x, &x).sqrt() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn prompts_hide_query_and_show_n_responses() {
        let law = CovariateLaw::GammaScaledSphere { shape: 0.1, scale: 10.0 };
        for covariates in [CovariateLaw::Gaussian, CovariateLaw::Sphere, law, CovariateLaw::MlpDistorted { mlp_seed: 3 }] {
            let spec = TaskSpec::new(4, 7, covariates).unwrap();
            let batch = sample_batch(&spec, 10, &mut rng()).unwrap();
            assert_eq!(batch.len(), 10);
            for (p, w) in batch.prompts.iter().zip(&batch.weights) {
                assert_eq!(p.n(), 7);
                assert_eq!(p.matrix().cols(), 8);
                assert_eq!(p.matrix().get(4, 7), 0.0);
                assert_eq!(p.responses().len(), 7);
                assert_eq!(w.len(), 4);
            }
        }
    }

    #[test]
    fn linear_responses_match_task_vector() {
        let spec = TaskSpec::new(3, 4, CovariateLaw::Gaussian).unwrap();
        let batch = sample_batch(&spec, 5, &mut rng()).unwrap();
        for ((p, w), t) in batch.prompts.iter().zip(&batch.weights).zip(&batch.targets) {
            for (i, y) in p.responses().iter().enumerate() {
                assert!((dot(w, &p.covariate(i)) - y).abs() < 1e-12);
            }
            assert!((dot(w, &p.covariate(4)) - t).abs() < 1e-12);
        }
    }

    #[test]
    fn distorted_responses_go_through_mlp() {
        let spec = TaskSpec::new(5, 3, CovariateLaw::MlpDistorted { mlp_seed: 9 }).unwrap();
        let mlp = spec.distortion().unwrap();
        let batch = sample_batch(&spec, 3, &mut rng()).unwrap();
        for ((p, w), t) in batch.prompts.iter().zip(&batch.weights).zip(&batch.targets) {
            let y0 = dot(w, &mlp_distort(&p.covariate(0), &mlp).unwrap());
            assert!((y0 - p.responses()[0]).abs() < 1e-12);
            let yq = dot(w, &mlp_distort(&p.covariate(3), &mlp).unwrap());
            assert!((yq - t).abs() < 1e-12);
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let spec = TaskSpec::new(5, 20, CovariateLaw::GammaScaledSphere { shape: 0.1, scale: 10.0 }).unwrap();
        let a = sample_batch(&spec, 8, &mut stream(4, Purpose::TrainData)).unwrap();
        let b = sample_batch(&spec, 8, &mut stream(4, Purpose::TrainData)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(TaskSpec::new(0, 3, CovariateLaw::Gaussian).is_err());
        assert!(TaskSpec::new(3, 0, CovariateLaw::Gaussian).is_err());
        assert!(TaskSpec::new(3, 3, CovariateLaw::GammaScaledSphere { shape: 0.0, scale: 1.0 }).is_err());
        let spec = TaskSpec::new(3, 3, CovariateLaw::Gaussian).unwrap();
        assert!(sample_batch(&spec, 0, &mut rng()).is_err());
    }

    #[test]
    fn gamma_scale_rejects_nonpositive_and_stays_positive() {
        assert!(gamma_radial_scale(-1.0, 1.0, &mut rng()).is_err());
        assert!(gamma_radial_scale(1.0, 0.0, &mut rng()).is_err());
        let mut r = rng();
        for _ in 0..10_000 {
            assert!(gamma_radial_scale(0.1, 10.0, &mut r).unwrap() > 0.0);
        }
    }

    #[test]
    fn mlp_special_cases() {
        let zero = MlpWeights::new(2, 2, vec![0.0; 4], vec![0.0; 2], vec![0.0; 4], vec![0.0; 2]).unwrap();
        assert_eq!(mlp_distort(&[1.5, -2.0], &zero).unwrap(), vec![0.0, 0.0]);
        let id = vec![1.0, 0.0, 0.0, 1.0];
        let ident = MlpWeights::new(2, 2, id.clone(), vec![0.0; 2], id, vec![0.0; 2]).unwrap();
        assert_eq!(mlp_distort(&[1.5, 2.0], &ident).unwrap(), vec![1.5, 2.0]);
        assert!(mlp_distort(&[1.0], &ident).is_err());
        assert!(MlpWeights::new(2, 2, vec![0.0; 3], vec![0.0; 2], vec![0.0; 4], vec![0.0; 2]).is_err());
    }

    #[test]
    fn mlp_matches_independent_evaluator() {
        let mlp = MlpWeights::random(5, 5, &mut stream(21, Purpose::TaskMlp));
        let x = [0.3, -1.2, 0.7, 2.0, -0.4];
        // Written against the raw arrays without the shared kernel.
        let mut hidden = [0.0f64; 5];
        for k in 0..5 {
            let mut s = mlp.b1[k];
            for i in 0..5 {
                s += mlp.w1[k * 5 + i] * x[i];
            }
            hidden[k] = if s > 0.0 { s } else { 0.0 };
        }
        let got = mlp_distort(&x, &mlp).unwrap();
        for i in 0..5 {
            let mut s = mlp.b2[i];
            for k in 0..5 {
                s += mlp.w2[i * 5 + k] * hidden[k];
            }
            assert!((s - got[i]).abs() < 1e-12);
        }
    }
}
