use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::linalg::{dot, norm2};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// One combined key-query matrix `Q` per layer.
    #[default]
    SingleQ,
    /// Separate key and query matrices; `Kᵀ Q` plays the role of `Q`.
    SeparateQk,
    /// Column-wise softmax over the context positions of `Zᵀ Q Z`.
    Softmax,
}

/// Where each matrix lives inside the flat parameter vector.
///
/// Per layer: `P`, then `K` (separate-QK only), then `Q`; each (d+1)×(d+1),
/// row-major. The optional front MLP follows the last layer as
/// `W1 (h×d)`, `b1 (h)`, `W2 (d×h)`, `b2 (d)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub variant: Variant,
    pub layers: usize,
    pub dim: usize,
    pub mlp_hidden: Option<usize>,
}

impl Layout {
    pub fn new(variant: Variant, layers: usize, dim: usize, mlp_hidden: Option<usize>) -> Result<Self> {
        if layers == 0 {
            return invalid("model needs at least one layer");
        }
        if dim == 0 {
            return invalid("covariate dimension must be positive");
        }
        if mlp_hidden == Some(0) {
            return invalid("front MLP needs at least one hidden unit");
        }
        Ok(Self {
            variant,
            layers,
            dim,
            mlp_hidden,
        })
    }

    /// Side length d+1 of every attention matrix.
    #[inline]
    pub fn side(&self) -> usize {
        self.dim + 1
    }

    #[inline]
    pub fn block(&self) -> usize {
        self.side() * self.side()
    }

    #[inline]
    fn mats_per_layer(&self) -> usize {
        match self.variant {
            Variant::SeparateQk => 3,
            _ => 2,
        }
    }

    #[inline]
    pub fn layer_stride(&self) -> usize {
        self.mats_per_layer() * self.block()
    }

    #[inline]
    pub fn p_offset(&self, layer: usize) -> usize {
        layer * self.layer_stride()
    }

    #[inline]
    pub fn k_offset(&self, layer: usize) -> Option<usize> {
        (self.variant == Variant::SeparateQk).then(|| layer * self.layer_stride() + self.block())
    }

    #[inline]
    pub fn q_offset(&self, layer: usize) -> usize {
        layer * self.layer_stride() + (self.mats_per_layer() - 1) * self.block()
    }

    pub fn attention_len(&self) -> usize {
        self.layers * self.layer_stride()
    }

    pub fn mlp_len(&self) -> usize {
        self.mlp_hidden
            .map_or(0, |h| h * self.dim + h + self.dim * h + self.dim)
    }

    pub fn len(&self) -> usize {
        self.attention_len() + self.mlp_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Borrowed view of front-MLP weights: `x ↦ W2·relu(W1·x + b1) + b2`.
#[derive(Debug, Clone, Copy)]
pub struct MlpView<'a> {
    pub input: usize,
    pub hidden: usize,
    pub w1: &'a [f64],
    pub b1: &'a [f64],
    pub w2: &'a [f64],
    pub b2: &'a [f64],
}

impl<'a> MlpView<'a> {
    pub(crate) fn split(input: usize, hidden: usize, flat: &'a [f64]) -> Self {
        let (w1, rest) = flat.split_at(hidden * input);
        let (b1, rest) = rest.split_at(hidden);
        let (w2, b2) = rest.split_at(input * hidden);
        Self {
            input,
            hidden,
            w1,
            b1,
            w2,
            b2,
        }
    }

    /// Writes the hidden pre-activations into `pre` and the output into `out`.
    pub fn apply(&self, x: &[f64], pre: &mut [f64], out: &mut [f64]) {
        for (k, p) in pre.iter_mut().enumerate() {
            *p = self.b1[k] + dot(&self.w1[k * self.input..(k + 1) * self.input], x);
        }
        for (i, o) in out.iter_mut().enumerate() {
            let row = &self.w2[i * self.hidden..(i + 1) * self.hidden];
            *o = self.b2[i]
                + row
                    .iter()
                    .zip(pre.iter())
                    .map(|(w, &p)| w * p.max(0.0))
                    .sum::<f64>();
        }
    }
}

macro_rules! flat_vector {
    ($name:ident) => {
        impl $name {
            pub fn zeros(layout: Layout) -> Self {
                Self {
                    layout,
                    values: vec![0.0; layout.len()],
                }
            }

            pub fn from_vec(layout: Layout, values: Vec<f64>) -> Result<Self> {
                if values.len() != layout.len() {
                    return invalid(format!(
                        "expected {} values for this layout, got {}",
                        layout.len(),
                        values.len()
                    ));
                }
                Ok(Self { layout, values })
            }

            pub fn layout(&self) -> &Layout {
                &self.layout
            }

            pub fn as_slice(&self) -> &[f64] {
                &self.values
            }

            pub fn as_mut_slice(&mut self) -> &mut [f64] {
                &mut self.values
            }

            pub fn into_vec(self) -> Vec<f64> {
                self.values
            }

            pub fn len(&self) -> usize {
                self.values.len()
            }

            pub fn is_empty(&self) -> bool {
                self.values.is_empty()
            }

            pub fn norm(&self) -> f64 {
                norm2(&self.values)
            }

            pub fn p(&self, layer: usize) -> &[f64] {
                let o = self.layout.p_offset(layer);
                &self.values[o..o + self.layout.block()]
            }

            pub fn q(&self, layer: usize) -> &[f64] {
                let o = self.layout.q_offset(layer);
                &self.values[o..o + self.layout.block()]
            }

            pub fn k(&self, layer: usize) -> Option<&[f64]> {
                let b = self.layout.block();
                self.layout.k_offset(layer).map(|o| &self.values[o..o + b])
            }

            pub fn mlp(&self) -> Option<MlpView<'_>> {
                let hidden = self.layout.mlp_hidden?;
                let start = self.layout.attention_len();
                Some(MlpView::split(self.layout.dim, hidden, &self.values[start..]))
            }
        }

        impl AsRef<[f64]> for $name {
            fn as_ref(&self) -> &[f64] {
                &self.values
            }
        }
    };
}

/// The optimization variable: all attention matrices plus the optional front MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    layout: Layout,
    values: Vec<f64>,
}

/// Same shape as [`ModelParams`]; holds gradients, noise samples or directions.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    layout: Layout,
    values: Vec<f64>,
}

flat_vector!(ModelParams);
flat_vector!(GradientSet);

impl ModelParams {
    /// Attention entries i.i.d. N(0, σ²); front-MLP weights and biases
    /// uniform on ±1/√fan_in.
    pub fn init<R: Rng + ?Sized>(layout: Layout, init_std: f64, rng: &mut R) -> Result<Self> {
        if !(init_std >= 0.0 && init_std.is_finite()) {
            return invalid("init_std must be finite and non-negative");
        }
        let mut values = Vec::with_capacity(layout.len());
        if init_std > 0.0 {
            let normal = Normal::new(0.0, init_std).expect("valid std");
            values.extend((0..layout.attention_len()).map(|_| normal.sample(rng)));
        } else {
            values.resize(layout.attention_len(), 0.0);
        }
        if let Some(h) = layout.mlp_hidden {
            let d = layout.dim;
            push_uniform(&mut values, h * d + h, d, rng);
            push_uniform(&mut values, d * h + d, h, rng);
        }
        Ok(Self { layout, values })
    }

    /// `self + alpha · direction`.
    pub fn offset(&self, direction: &[f64], alpha: f64) -> ModelParams {
        let mut out = self.clone();
        for (v, d) in out.values.iter_mut().zip(direction) {
            *v += alpha * d;
        }
        out
    }

    /// Difference `self − earlier` as a direction vector.
    pub fn delta_from(&self, earlier: &ModelParams) -> GradientSet {
        GradientSet {
            layout: self.layout,
            values: self
                .values
                .iter()
                .zip(&earlier.values)
                .map(|(a, b)| a - b)
                .collect(),
        }
    }
}

fn push_uniform<R: Rng + ?Sized>(values: &mut Vec<f64>, count: usize, fan_in: usize, rng: &mut R) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
    values.extend((0..count).map(|_| dist.sample(rng)));
}

impl GradientSet {
    pub fn scale(&mut self, alpha: f64) {
        for v in &mut self.values {
            *v *= alpha;
        }
    }

    pub fn scaled(&self, alpha: f64) -> GradientSet {
        let mut out = self.clone();
        out.scale(alpha);
        out
    }

    pub fn dot(&self, other: &GradientSet) -> f64 {
        dot(&self.values, &other.values)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}
