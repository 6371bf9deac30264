//! L-layer linear self-attention on regression prompts.
//!
//! Each layer updates the prompt matrix as `Z ← Z + (1/n)·P·Z·M·(Zᵀ Q Z)`,
//! where `M = diag(I_n, 0)` hides the query column from the keys. The
//! prediction is minus the bottom-right entry of the last `Z`.
//!
//! [`forward`] evaluates that recursion literally and keeps every
//! intermediate matrix. Batch losses and gradients go through [`grad`], which
//! uses a much cheaper but algebraically identical route for the linear
//! variants.

pub mod grad;
mod params;

pub use grad::{grad_batch, loss_and_grad, loss_batch, predict_batch};
pub use params::{GradientSet, Layout, MlpView, ModelParams, Variant};

use crate::error::{invalid, Error, Result};
use crate::linalg::Mat;

/// A packed regression prompt: covariates in the first d rows, responses in
/// the last row, and a zero where the query response would be.
#[derive(Debug, Clone, PartialEq)]
pub struct Prompt {
    z: Mat,
}

impl Prompt {
    /// Wraps an already assembled (d+1)×(n+1) matrix.
    pub fn from_matrix(z: Mat) -> Result<Self> {
        if z.rows() < 2 || z.cols() < 2 {
            return invalid("prompt needs d >= 1 and n >= 1");
        }
        if z.get(z.rows() - 1, z.cols() - 1) != 0.0 {
            return invalid("query response entry of a prompt must be zero");
        }
        Ok(Self { z })
    }

    pub fn d(&self) -> usize {
        self.z.rows() - 1
    }

    pub fn n(&self) -> usize {
        self.z.cols() - 1
    }

    pub fn matrix(&self) -> &Mat {
        &self.z
    }

    /// Covariate `i` (0-based, `i <= n`; index n is the query).
    pub fn covariate(&self, i: usize) -> Vec<f64> {
        (0..self.d()).map(|r| self.z.get(r, i)).collect()
    }

    /// The n visible responses.
    pub fn responses(&self) -> Vec<f64> {
        (0..self.n()).map(|j| self.z.get(self.d(), j)).collect()
    }
}

/// Activations `Z_0..Z_L` of one forward pass and the resulting prediction.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub activations: Vec<Mat>,
    pub prediction: f64,
}

/// One attention increment `P·(Z M)·S` before the 1/n factor, where `S` is
/// `Zᵀ Q Z` for [`Variant::SingleQ`] or its masked column softmax for
/// [`Variant::Softmax`].
pub fn attention_increment(z: &Mat, p: &Mat, q: &Mat, variant: Variant) -> Result<Mat> {
    let side = z.rows();
    for (name, m) in [("P", p), ("Q", q)] {
        if m.rows() != side || m.cols() != side {
            return invalid(format!(
                "{name} is {}x{}, expected {side}x{side}",
                m.rows(),
                m.cols()
            ));
        }
    }
    if z.cols() < 2 {
        return invalid("prompt needs at least one context column");
    }
    let zm = mask_query_column(z);
    let scores = z.transpose().matmul(q)?.matmul(z)?;
    let weights = match variant {
        Variant::SingleQ => scores,
        Variant::Softmax => masked_column_softmax(&scores),
        Variant::SeparateQk => {
            return invalid("pass the combined Kᵀ Q for the separate-QK variant");
        }
    };
    p.matmul(&zm)?.matmul(&weights)
}

/// `Z·M`: the query column zeroed.
fn mask_query_column(z: &Mat) -> Mat {
    let mut zm = z.clone();
    let last = z.cols() - 1;
    for r in 0..z.rows() {
        zm.set(r, last, 0.0);
    }
    zm
}

/// Softmax down each column over the n context rows; the query row gets
/// weight zero.
pub(crate) fn masked_column_softmax(scores: &Mat) -> Mat {
    let rows = scores.rows();
    let context = rows - 1;
    let mut out = Mat::zeros(rows, scores.cols());
    for c in 0..scores.cols() {
        let max = (0..context)
            .map(|r| scores.get(r, c))
            .fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for r in 0..context {
            let e = (scores.get(r, c) - max).exp();
            out.set(r, c, e);
            total += e;
        }
        for r in 0..context {
            out.set(r, c, out.get(r, c) / total);
        }
    }
    out
}

pub(crate) fn block_mat(layout: &Layout, slice: &[f64]) -> Mat {
    Mat::from_vec(layout.side(), layout.side(), slice.to_vec()).expect("block size")
}

/// The matrix each layer uses in place of `Q` (`Kᵀ Q` for separate-QK).
pub(crate) fn effective_q(params: &ModelParams, layer: usize) -> Mat {
    let layout = params.layout();
    let q = block_mat(layout, params.q(layer));
    match params.k(layer) {
        Some(k) => block_mat(layout, k)
            .transpose()
            .matmul(&q)
            .expect("square blocks"),
        None => q,
    }
}

/// Runs the front MLP (when present) over every covariate column.
pub(crate) fn embed_prompt(prompt: &Prompt, params: &ModelParams) -> Mat {
    let mut z = prompt.matrix().clone();
    if let Some(mlp) = params.mlp() {
        let d = prompt.d();
        let mut pre = vec![0.0; mlp.hidden];
        let mut out = vec![0.0; d];
        for c in 0..z.cols() {
            let x = prompt.covariate(c);
            mlp.apply(&x, &mut pre, &mut out);
            for (r, &v) in out.iter().enumerate() {
                z.set(r, c, v);
            }
        }
    }
    z
}

/// Literal evaluation of the layer recursion.
pub fn forward(prompt: &Prompt, params: &ModelParams) -> Result<ForwardCache> {
    let layout = params.layout();
    if prompt.d() != layout.dim {
        return invalid(format!(
            "prompt has d = {}, model expects {}",
            prompt.d(),
            layout.dim
        ));
    }
    let n = prompt.n() as f64;
    let inner = match layout.variant {
        Variant::Softmax => Variant::Softmax,
        _ => Variant::SingleQ,
    };
    let mut activations = Vec::with_capacity(layout.layers + 1);
    activations.push(embed_prompt(prompt, params));
    for layer in 0..layout.layers {
        let z = activations.last().expect("nonempty");
        let p = block_mat(layout, params.p(layer));
        let q = effective_q(params, layer);
        let mut next = z.clone();
        next.add_scaled(&attention_increment(z, &p, &q, inner)?, 1.0 / n)?;
        if !next.is_finite() {
            return Err(Error::NumericOverflow { layer });
        }
        activations.push(next);
    }
    let last = activations.last().expect("nonempty");
    let prediction = -last.get(last.rows() - 1, last.cols() - 1);
    Ok(ForwardCache {
        activations,
        prediction,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_prompt() -> Prompt {
        // d = 1, n = 1: x1 = 1, x2 = 3, y1 = 2
        Prompt::from_matrix(Mat::from_rows(&[vec![1.0, 3.0], vec![2.0, 0.0]]).unwrap()).unwrap()
    }

    fn identity_params(layers: usize) -> ModelParams {
        let layout = Layout::new(Variant::SingleQ, layers, 1, None).unwrap();
        let mut v = Vec::new();
        for _ in 0..layers {
            v.extend([1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0]);
        }
        ModelParams::from_vec(layout, v).unwrap()
    }

    /// Brute-force triple loop product, independent of `Mat::matmul`.
    fn brute(a: &[[f64; 2]; 2], b: &[[f64; 2]; 2]) -> [[f64; 2]; 2] {
        let mut c = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    c[i][j] += a[i][k] * b[k][j];
                }
            }
        }
        c
    }

    #[test]
    fn increment_matches_hand_computation() {
        let z = [[1.0, 3.0], [2.0, 0.0]];
        let zt = [[1.0, 2.0], [3.0, 0.0]];
        let zm = [[1.0, 0.0], [2.0, 0.0]];
        let scores = brute(&zt, &z);
        assert_eq!(scores, [[5.0, 3.0], [3.0, 9.0]]);
        let expected = brute(&zm, &scores);
        assert_eq!(expected, [[5.0, 3.0], [10.0, 6.0]]);

        let id = Mat::identity(2);
        let got = attention_increment(tiny_prompt().matrix(), &id, &id, Variant::SingleQ).unwrap();
        assert_eq!(got, Mat::from_rows(&[vec![5.0, 3.0], vec![10.0, 6.0]]).unwrap());
    }

    #[test]
    fn increment_vanishes_for_zero_factors() {
        let z = tiny_prompt().matrix().clone();
        let id = Mat::identity(2);
        let zero = Mat::zeros(2, 2);
        let zz = Mat::zeros(2, 2);
        assert_eq!(attention_increment(&zz, &id, &id, Variant::SingleQ).unwrap(), zero);
        assert_eq!(attention_increment(&z, &zero, &id, Variant::SingleQ).unwrap(), zero);
        assert_eq!(attention_increment(&z, &zero, &id, Variant::Softmax).unwrap(), zero);
    }

    #[test]
    fn increment_rejects_bad_shapes() {
        let z = tiny_prompt().matrix().clone();
        let id = Mat::identity(2);
        assert!(attention_increment(&z, &Mat::identity(3), &id, Variant::SingleQ).is_err());
        assert!(attention_increment(&z, &id, &id, Variant::SeparateQk).is_err());
    }

    #[test]
    fn one_layer_prediction() {
        let cache = forward(&tiny_prompt(), &identity_params(1)).unwrap();
        assert_eq!(cache.activations.len(), 2);
        assert_eq!(cache.prediction, -6.0);
    }

    #[test]
    fn zero_second_layer_changes_nothing() {
        let mut two = identity_params(2);
        let o = two.layout().p_offset(1);
        two.as_mut_slice()[o..o + 4].fill(0.0);
        let one = forward(&tiny_prompt(), &identity_params(1)).unwrap();
        let cache = forward(&tiny_prompt(), &two).unwrap();
        assert_eq!(cache.prediction, one.prediction);
    }

    #[test]
    fn zero_params_predict_zero() {
        let layout = Layout::new(Variant::SingleQ, 3, 1, None).unwrap();
        let cache = forward(&tiny_prompt(), &ModelParams::zeros(layout)).unwrap();
        assert_eq!(cache.prediction, 0.0);
    }

    #[test]
    fn overflow_reports_layer() {
        let layout = Layout::new(Variant::SingleQ, 3, 1, None).unwrap();
        let params = ModelParams::from_vec(layout, vec![1e120; layout.len()]).unwrap();
        match forward(&tiny_prompt(), &params) {
            Err(Error::NumericOverflow { layer }) => assert!(layer < 3),
            other => panic!("expected overflow, got {other:?}"),
        }
    }

    #[test]
    fn prompt_validation() {
        assert!(Prompt::from_matrix(Mat::from_rows(&[vec![1.0, 3.0], vec![2.0, 1.0]]).unwrap()).is_err());
        let p = tiny_prompt();
        assert_eq!(p.covariate(1), vec![3.0]);
        assert_eq!(p.responses(), vec![2.0]);
    }

    #[test]
    fn softmax_columns_sum_to_one_over_context() {
        let s = Mat::from_rows(&[vec![1.0, 2.0, 0.5], vec![0.0, -1.0, 3.0], vec![9.0, 9.0, 9.0]]).unwrap();
        let w = masked_column_softmax(&s);
        for c in 0..3 {
            assert!((w.get(0, c) + w.get(1, c) - 1.0).abs() < 1e-15);
            assert_eq!(w.get(2, c), 0.0);
        }
    }
}
