//! Batch loss and exact reverse-mode gradients.
//!
//! For the linear variants every layer acts on the prompt by left
//! multiplication: with `A_ℓ = Z_ℓ M Z_ℓᵀ` and `B_ℓ = P_ℓ A_ℓ Q_ℓ`,
//!
//! ```text
//! Z_{ℓ+1} = (I + B_ℓ / n) Z_ℓ,   so   Z_ℓ = T_ℓ Z_0,   A_ℓ = T_ℓ A_0 T_ℓᵀ.
//! ```
//!
//! The forward and backward passes therefore only touch (d+1)×(d+1)
//! "transfer" matrices `T_ℓ`, and the context length enters once through
//! `A_0`. The softmax variant has no such shortcut and is differentiated
//! through the literal recursion.

use crate::error::{invalid, Error, Result};
use crate::linalg::{axpy, dot, gemm_nn, gemm_nt, gemm_tn, Mat};
use crate::tasks::TaskBatch;

use super::{block_mat, effective_q, masked_column_softmax, GradientSet, Layout, ModelParams, Prompt, Variant};

/// Mean squared prediction error over the batch.
pub fn loss_batch(params: &ModelParams, batch: &TaskBatch) -> Result<f64> {
    Ok(evaluate(params, batch, false)?.0)
}

/// Gradient of [`loss_batch`] with respect to every parameter.
pub fn grad_batch(params: &ModelParams, batch: &TaskBatch) -> Result<GradientSet> {
    Ok(evaluate(params, batch, true)?.1)
}

pub fn loss_and_grad(params: &ModelParams, batch: &TaskBatch) -> Result<(f64, GradientSet)> {
    evaluate(params, batch, true)
}

/// Predictions for every prompt in the batch.
pub fn predict_batch(params: &ModelParams, batch: &TaskBatch) -> Result<Vec<f64>> {
    check_batch(params.layout(), batch)?;
    match params.layout().variant {
        Variant::Softmax => batch
            .prompts
            .iter()
            .map(|p| SoftmaxPass::run(params, p).map(|s| s.prediction))
            .collect(),
        _ => {
            let prep = LinearPrep::new(params);
            let mut work = Transfer::new(params.layout(), batch.prompts[0].n());
            batch
                .prompts
                .iter()
                .map(|p| {
                    let z = work.embed(params, p);
                    work.forward(&prep, &z, p.n())
                })
                .collect()
        }
    }
}

fn check_batch(layout: &Layout, batch: &TaskBatch) -> Result<()> {
    if batch.is_empty() {
        return invalid("batch must be nonempty");
    }
    let n = batch.prompts[0].n();
    for p in &batch.prompts {
        if p.d() != layout.dim {
            return invalid(format!("prompt has d = {}, model expects {}", p.d(), layout.dim));
        }
        if p.n() != n {
            return invalid("all prompts in a batch must share the context length");
        }
    }
    Ok(())
}

fn evaluate(params: &ModelParams, batch: &TaskBatch, want_grad: bool) -> Result<(f64, GradientSet)> {
    check_batch(params.layout(), batch)?;
    let (loss, grad) = match params.layout().variant {
        Variant::Softmax => softmax_loss_grad(params, batch, want_grad)?,
        _ => linear_loss_grad(params, batch, want_grad)?,
    };
    if !loss.is_finite() {
        return Err(Error::NonFinite("batch loss".into()));
    }
    Ok((loss, grad))
}

/// Per-batch quantities shared by every prompt.
struct LinearPrep {
    p: Vec<Vec<f64>>,
    qe: Vec<Vec<f64>>,
}

impl LinearPrep {
    fn new(params: &ModelParams) -> Self {
        let layers = params.layout().layers;
        Self {
            p: (0..layers).map(|l| params.p(l).to_vec()).collect(),
            qe: (0..layers)
                .map(|l| effective_q(params, l).as_slice().to_vec())
                .collect(),
        }
    }
}

/// Scratch buffers for one prompt's pass through the transfer recursion.
struct Transfer {
    side: usize,
    layers: usize,
    a0: Vec<f64>,
    u: Vec<f64>,
    t: Vec<Vec<f64>>,
    ta: Vec<Vec<f64>>,
    a: Vec<Vec<f64>>,
    pa: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
    g: Vec<f64>,
    g_next: Vec<f64>,
    db: Vec<f64>,
    dpa: Vec<f64>,
    da: Vec<f64>,
    tmp: Vec<f64>,
    tmp2: Vec<f64>,
    // front MLP
    mlp_pre: Vec<f64>,
    mlp_out: Vec<f64>,
}

impl Transfer {
    fn new(layout: &Layout, n: usize) -> Self {
        let side = layout.side();
        let blk = side * side;
        let layers = layout.layers;
        let hidden = layout.mlp_hidden.unwrap_or(0);
        let mat = || vec![0.0; blk];
        Self {
            side,
            layers,
            a0: mat(),
            u: vec![0.0; side],
            t: (0..=layers).map(|_| mat()).collect(),
            ta: (0..layers).map(|_| mat()).collect(),
            a: (0..layers).map(|_| mat()).collect(),
            pa: (0..layers).map(|_| mat()).collect(),
            b: (0..layers).map(|_| mat()).collect(),
            g: mat(),
            g_next: mat(),
            db: mat(),
            dpa: mat(),
            da: mat(),
            tmp: mat(),
            tmp2: mat(),
            mlp_pre: vec![0.0; hidden * (n + 1)],
            mlp_out: vec![0.0; layout.dim],
        }
    }

    /// The prompt matrix after the front MLP; hidden pre-activations are kept
    /// for the backward pass.
    fn embed(&mut self, params: &ModelParams, prompt: &Prompt) -> Mat {
        let mut z = prompt.matrix().clone();
        if let Some(mlp) = params.mlp() {
            let h = mlp.hidden;
            let cols = z.cols();
            if self.mlp_pre.len() < h * cols {
                self.mlp_pre.resize(h * cols, 0.0);
            }
            for c in 0..cols {
                let x = prompt.covariate(c);
                mlp.apply(&x, &mut self.mlp_pre[c * h..(c + 1) * h], &mut self.mlp_out);
                for (r, &v) in self.mlp_out.iter().enumerate() {
                    z.set(r, c, v);
                }
            }
        }
        z
    }

    fn forward(&mut self, prep: &LinearPrep, z: &Mat, n: usize) -> Result<f64> {
        let s = self.side;
        let zs = z.as_slice();
        let cols = z.cols();
        // A0 = Σ_{j<n} z_j z_jᵀ over context columns
        for r in 0..s {
            for c in r..s {
                let v = dot(&zs[r * cols..r * cols + n], &zs[c * cols..c * cols + n]);
                self.a0[r * s + c] = v;
                self.a0[c * s + r] = v;
            }
        }
        for r in 0..s {
            self.u[r] = zs[r * cols + n];
        }
        let inv_n = 1.0 / n as f64;
        let t0 = &mut self.t[0];
        t0.fill(0.0);
        for i in 0..s {
            t0[i * s + i] = 1.0;
        }
        for l in 0..self.layers {
            let (head, tail) = self.t.split_at_mut(l + 1);
            let t = &head[l];
            gemm_nn(t, &self.a0, &mut self.ta[l], s, s, s);
            gemm_nt(&self.ta[l], t, &mut self.a[l], s, s, s);
            gemm_nn(&prep.p[l], &self.a[l], &mut self.pa[l], s, s, s);
            gemm_nn(&self.pa[l], &prep.qe[l], &mut self.b[l], s, s, s);
            gemm_nn(&self.b[l], t, &mut self.tmp, s, s, s);
            let next = &mut tail[0];
            next.copy_from_slice(t);
            axpy(inv_n, &self.tmp, next);
            if !next.iter().all(|v| v.is_finite()) {
                return Err(Error::NumericOverflow { layer: l });
            }
        }
        let last = &self.t[self.layers][(s - 1) * s..s * s];
        Ok(-dot(last, &self.u))
    }

    /// Accumulates `dpred`-weighted gradients into `dp`, `dqe` and, when
    /// requested, the gradients of `A_0` and of the query column `u`.
    fn backward(
        &mut self,
        prep: &LinearPrep,
        n: usize,
        dpred: f64,
        dp: &mut [Vec<f64>],
        dqe: &mut [Vec<f64>],
        mut input_grads: Option<(&mut [f64], &mut [f64])>,
    ) {
        let s = self.side;
        let inv_n = 1.0 / n as f64;
        // dT_L = -dpred · e_last uᵀ
        self.g.fill(0.0);
        for c in 0..s {
            self.g[(s - 1) * s + c] = -dpred * self.u[c];
        }
        if let Some((_, du)) = input_grads.as_mut() {
            let last = &self.t[self.layers][(s - 1) * s..s * s];
            for (d, &v) in du.iter_mut().zip(last) {
                *d = -dpred * v;
            }
        }
        for l in (0..self.layers).rev() {
            let t = &self.t[l];
            // dB = (1/n) G Tᵀ
            gemm_nt(&self.g, t, &mut self.db, s, s, s);
            self.db.iter_mut().for_each(|v| *v *= inv_n);
            // G_next = G + (1/n) Bᵀ G
            gemm_tn(&self.b[l], &self.g, &mut self.tmp, s, s, s);
            self.g_next.copy_from_slice(&self.g);
            axpy(inv_n, &self.tmp, &mut self.g_next);
            // B = PA · Qe
            gemm_tn(&self.pa[l], &self.db, &mut self.tmp, s, s, s);
            axpy(1.0, &self.tmp, &mut dqe[l]);
            gemm_nt(&self.db, &prep.qe[l], &mut self.dpa, s, s, s);
            // PA = P · A (A symmetric)
            gemm_nn(&self.dpa, &self.a[l], &mut self.tmp, s, s, s);
            axpy(1.0, &self.tmp, &mut dp[l]);
            gemm_tn(&prep.p[l], &self.dpa, &mut self.da, s, s, s);
            // A = T A0 Tᵀ
            if let Some((da0, _)) = input_grads.as_mut() {
                gemm_tn(t, &self.da, &mut self.tmp, s, s, s);
                gemm_nn(&self.tmp, t, &mut self.tmp2, s, s, s);
                axpy(1.0, &self.tmp2, da0);
            }
            for r in 0..s {
                for c in r..s {
                    let v = self.da[r * s + c] + self.da[c * s + r];
                    self.tmp2[r * s + c] = v;
                    self.tmp2[c * s + r] = v;
                }
            }
            gemm_nn(&self.tmp2, &self.ta[l], &mut self.tmp, s, s, s);
            axpy(1.0, &self.tmp, &mut self.g_next);
            std::mem::swap(&mut self.g, &mut self.g_next);
        }
    }
}

fn linear_loss_grad(params: &ModelParams, batch: &TaskBatch, want_grad: bool) -> Result<(f64, GradientSet)> {
    let layout = *params.layout();
    let s = layout.side();
    let blk = s * s;
    let n = batch.prompts[0].n();
    let prep = LinearPrep::new(params);
    let mut work = Transfer::new(&layout, n);
    let mut dp = vec![vec![0.0; blk]; layout.layers];
    let mut dqe = vec![vec![0.0; blk]; layout.layers];
    let mlp = params.mlp();
    let mut mlp_grad = vec![0.0; layout.mlp_len()];
    let mut da0 = vec![0.0; blk];
    let mut du = vec![0.0; s];
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;

    for (prompt, &target) in batch.prompts.iter().zip(&batch.targets) {
        let z = work.embed(params, prompt);
        let pred = work.forward(&prep, &z, n)?;
        let err = pred - target;
        loss += err * err;
        if !want_grad {
            continue;
        }
        let dpred = 2.0 * err * scale;
        match mlp {
            None => work.backward(&prep, n, dpred, &mut dp, &mut dqe, None),
            Some(view) => {
                da0.fill(0.0);
                work.backward(&prep, n, dpred, &mut dp, &mut dqe, Some((&mut da0, &mut du)));
                mlp_backward(&view, prompt, &z, &work.mlp_pre, &da0, &du, &mut mlp_grad);
            }
        }
    }
    loss *= scale;

    let mut grad = GradientSet::zeros(layout);
    if want_grad {
        let out = grad.as_mut_slice();
        for l in 0..layout.layers {
            let po = layout.p_offset(l);
            out[po..po + blk].copy_from_slice(&dp[l]);
            let qo = layout.q_offset(l);
            match layout.k_offset(l) {
                None => out[qo..qo + blk].copy_from_slice(&dqe[l]),
                Some(ko) => {
                    // Qe = Kᵀ Q  ⇒  dK = Q dQeᵀ, dQ = K dQe
                    let k = params.k(l).expect("separate-qk layer");
                    let q = params.q(l);
                    gemm_nt(q, &dqe[l], &mut out[ko..ko + blk], s, s, s);
                    gemm_nn(k, &dqe[l], &mut out[qo..qo + blk], s, s, s);
                }
            }
        }
        let mo = layout.attention_len();
        out[mo..].copy_from_slice(&mlp_grad);
    }
    Ok((loss, grad))
}

/// Backpropagates `dA_0` and the query-column gradient through the front MLP.
fn mlp_backward(
    mlp: &super::MlpView<'_>,
    prompt: &Prompt,
    z: &Mat,
    pre: &[f64],
    da0: &[f64],
    du: &[f64],
    grad: &mut [f64],
) {
    let d = mlp.input;
    let h = mlp.hidden;
    let s = d + 1;
    let cols = z.cols();
    let n = cols - 1;
    let (gw1, rest) = grad.split_at_mut(h * d);
    let (gb1, rest) = rest.split_at_mut(h);
    let (gw2, gb2) = rest.split_at_mut(d * h);
    let mut dx = vec![0.0; d];
    let mut dh = vec![0.0; h];
    for c in 0..cols {
        // dZ0[:, c] = (dA0 + dA0ᵀ) z_c for context columns, du for the query
        for (r, d_r) in dx.iter_mut().enumerate() {
            *d_r = if c < n {
                (0..s)
                    .map(|k| (da0[r * s + k] + da0[k * s + r]) * z.get(k, c))
                    .sum()
            } else {
                du[r]
            };
        }
        let pre_c = &pre[c * h..(c + 1) * h];
        for (i, &g) in dx.iter().enumerate() {
            gb2[i] += g;
            for k in 0..h {
                gw2[i * h + k] += g * pre_c[k].max(0.0);
            }
        }
        for k in 0..h {
            dh[k] = if pre_c[k] > 0.0 {
                (0..d).map(|i| mlp.w2[i * h + k] * dx[i]).sum()
            } else {
                0.0
            };
        }
        let x = prompt.covariate(c);
        for k in 0..h {
            gb1[k] += dh[k];
            for (i, &xi) in x.iter().enumerate() {
                gw1[k * d + i] += dh[k] * xi;
            }
        }
    }
}

/// Cached literal forward pass for the softmax variant.
struct SoftmaxPass {
    zs: Vec<Mat>,
    weights: Vec<Mat>,
    mixed: Vec<Mat>,
    prediction: f64,
}

impl SoftmaxPass {
    fn run(params: &ModelParams, prompt: &Prompt) -> Result<Self> {
        let layout = params.layout();
        let n = prompt.n();
        let z0 = super::embed_prompt(prompt, params);
        let mut zs = vec![z0];
        let mut weights = Vec::with_capacity(layout.layers);
        let mut mixed = Vec::with_capacity(layout.layers);
        for l in 0..layout.layers {
            let z = zs.last().expect("nonempty");
            let q = block_mat(layout, params.q(l));
            let p = block_mat(layout, params.p(l));
            let scores = z.transpose().matmul(&q)?.matmul(z)?;
            let w = masked_column_softmax(&scores);
            let mut zm = z.clone();
            for r in 0..zm.rows() {
                zm.set(r, n, 0.0);
            }
            let y = zm.matmul(&w)?;
            let mut next = z.clone();
            next.add_scaled(&p.matmul(&y)?, 1.0 / n as f64)?;
            if !next.is_finite() {
                return Err(Error::NumericOverflow { layer: l });
            }
            weights.push(w);
            mixed.push(y);
            zs.push(next);
        }
        let last = zs.last().expect("nonempty");
        let prediction = -last.get(last.rows() - 1, last.cols() - 1);
        Ok(Self {
            zs,
            weights,
            mixed,
            prediction,
        })
    }
}

fn softmax_loss_grad(params: &ModelParams, batch: &TaskBatch, want_grad: bool) -> Result<(f64, GradientSet)> {
    let layout = *params.layout();
    if layout.mlp_hidden.is_some() {
        return invalid("the softmax variant does not support a front MLP");
    }
    let s = layout.side();
    let blk = s * s;
    let n = batch.prompts[0].n();
    let cols = n + 1;
    let scale = 1.0 / batch.len() as f64;
    let inv_n = 1.0 / n as f64;
    let mut grad = GradientSet::zeros(layout);
    let mut loss = 0.0;

    let mut g = vec![0.0; s * cols];
    let mut gs = vec![0.0; s * cols];
    let mut dy = vec![0.0; s * cols];
    let mut dzm = vec![0.0; s * cols];
    let mut dw = vec![0.0; cols * cols];
    let mut dscore = vec![0.0; cols * cols];
    let mut qz = vec![0.0; s * cols];
    let mut zds = vec![0.0; s * cols];
    let mut tmp = vec![0.0; s * cols];
    let mut tmp_blk = vec![0.0; blk];

    for (prompt, &target) in batch.prompts.iter().zip(&batch.targets) {
        let pass = SoftmaxPass::run(params, prompt)?;
        let err = pass.prediction - target;
        loss += err * err;
        if !want_grad {
            continue;
        }
        g.fill(0.0);
        g[s * cols - 1] = -2.0 * err * scale;
        let out = grad.as_mut_slice();
        for l in (0..layout.layers).rev() {
            let z = pass.zs[l].as_slice();
            let w = pass.weights[l].as_slice();
            let y = pass.mixed[l].as_slice();
            let p = params.p(l);
            let q = params.q(l);
            gs.iter_mut().zip(&g).for_each(|(a, b)| *a = b * inv_n);
            // inc = P Y / n
            gemm_nt(&gs, y, &mut tmp_blk, s, cols, s);
            let po = layout.p_offset(l);
            axpy(1.0, &tmp_blk, &mut out[po..po + blk]);
            gemm_tn(p, &gs, &mut dy, s, s, cols);
            // Y = ZM W
            gemm_nt(&dy, w, &mut dzm, s, cols, cols);
            let mut zm = pass.zs[l].clone();
            for r in 0..s {
                zm.set(r, n, 0.0);
            }
            gemm_tn(zm.as_slice(), &dy, &mut dw, cols, s, cols);
            for r in 0..s {
                dzm[r * cols + n] = 0.0;
            }
            axpy(1.0, &dzm, &mut g);
            // column softmax over context rows
            for c in 0..cols {
                let inner: f64 = (0..n).map(|k| w[k * cols + c] * dw[k * cols + c]).sum();
                for r in 0..n {
                    dscore[r * cols + c] = w[r * cols + c] * (dw[r * cols + c] - inner);
                }
                dscore[n * cols + c] = 0.0;
            }
            // S = Zᵀ Q Z
            gemm_nn(z, &dscore, &mut zds, s, cols, cols);
            gemm_nt(&zds, z, &mut tmp_blk, s, cols, s);
            let qo = layout.q_offset(l);
            axpy(1.0, &tmp_blk, &mut out[qo..qo + blk]);
            gemm_nn(q, z, &mut qz, s, s, cols);
            gemm_nt(&qz, &dscore, &mut tmp, s, cols, cols);
            axpy(1.0, &tmp, &mut g);
            gemm_tn(q, &zds, &mut tmp, s, s, cols);
            axpy(1.0, &tmp, &mut g);
        }
    }
    Ok((loss * scale, grad))
}
