//! Masked autoregressive network: one conditioner layer of the flow.
//!
//! A single-hidden-layer tanh network maps (context, theta) to per-dimension
//! shift mu_i and log-scale alpha_i. Degree-based masks guarantee that
//! (mu_i, alpha_i) depend only on theta_{<i} and the context: context inputs
//! carry degree 0, theta_i degree i+1, hidden units cycle through degrees
//! 0..dim-1, and connections require non-decreasing degree on the way in and
//! strictly increasing degree on the way out.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::rng::Rng;

/// Log-scales are clamped to this band for numerical stability.
pub const ALPHA_CLAMP: f64 = 7.0;

#[derive(Debug, Clone, PartialEq)]
pub struct MadeLayer {
    pub dim: usize,
    pub context_dim: usize,
    pub hidden: usize,
    /// hidden x (context_dim + dim), stored pre-masked.
    pub w_in: Mat,
    pub b_in: Vec<f64>,
    /// 2*dim x hidden (mu rows then alpha rows), stored pre-masked.
    pub w_out: Mat,
    pub b_out: Vec<f64>,
    mask_in: Vec<u8>,
    mask_out: Vec<u8>,
}

/// Activations cached by a forward evaluation.
#[derive(Debug, Clone)]
pub struct MadeEval {
    pub h: Vec<f64>,
    pub mu: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_raw: Vec<f64>,
}

/// Gradient buffers mirroring the layer's parameter layout.
#[derive(Debug, Clone)]
pub struct MadeGradients {
    pub w_in: Mat,
    pub b_in: Vec<f64>,
    pub w_out: Mat,
    pub b_out: Vec<f64>,
}

impl MadeLayer {
    pub fn zeros(dim: usize, context_dim: usize, hidden: usize) -> Self {
        let in_width = context_dim + dim;
        let hidden_degree = |h: usize| h % dim.max(1);
        let mut mask_in = vec![0u8; hidden * in_width];
        for h in 0..hidden {
            let hd = hidden_degree(h);
            for col in 0..in_width {
                let in_deg = if col < context_dim { 0 } else { col - context_dim + 1 };
                if hd >= in_deg {
                    mask_in[h * in_width + col] = 1;
                }
            }
        }
        let mut mask_out = vec![0u8; 2 * dim * hidden];
        for d in 0..dim {
            for h in 0..hidden {
                if hidden_degree(h) < d + 1 {
                    mask_out[d * hidden + h] = 1;
                    mask_out[(dim + d) * hidden + h] = 1;
                }
            }
        }
        MadeLayer {
            dim,
            context_dim,
            hidden,
            w_in: Mat::zeros(hidden, in_width),
            b_in: vec![0.0; hidden],
            w_out: Mat::zeros(2 * dim, hidden),
            b_out: vec![0.0; 2 * dim],
            mask_in,
            mask_out,
        }
    }

    /// Random input weights, zero output weights: the layer starts as the
    /// identity transform (mu = 0, alpha = 0).
    pub fn random(dim: usize, context_dim: usize, hidden: usize, rng: &mut Rng) -> Self {
        let mut layer = Self::zeros(dim, context_dim, hidden);
        let bound = 1.0 / ((context_dim + dim) as f64).sqrt();
        for (i, w) in layer.w_in.data.iter_mut().enumerate() {
            if layer.mask_in[i] == 1 {
                *w = rng.random_range(-bound..bound);
            }
        }
        layer
    }

    pub fn forward(&self, theta: &[f64], context: &[f64]) -> MadeEval {
        debug_assert_eq!(theta.len(), self.dim);
        debug_assert_eq!(context.len(), self.context_dim);
        let in_width = self.context_dim + self.dim;
        let mut h = self.b_in.clone();
        for k in 0..self.hidden {
            let row = &self.w_in.data[k * in_width..(k + 1) * in_width];
            let mut acc = h[k];
            for (c, &w) in row[..self.context_dim].iter().enumerate() {
                acc += w * context[c];
            }
            for (d, &w) in row[self.context_dim..].iter().enumerate() {
                acc += w * theta[d];
            }
            h[k] = acc.tanh();
        }
        let out: Vec<f64> = {
            let mut o = self.b_out.clone();
            for (r, slot) in o.iter_mut().enumerate() {
                let row = &self.w_out.data[r * self.hidden..(r + 1) * self.hidden];
                for (k, &w) in row.iter().enumerate() {
                    *slot += w * h[k];
                }
            }
            o
        };
        let mu = out[..self.dim].to_vec();
        let alpha_raw = out[self.dim..].to_vec();
        let alpha: Vec<f64> = alpha_raw
            .iter()
            .map(|a| a.clamp(-ALPHA_CLAMP, ALPHA_CLAMP))
            .collect();
        MadeEval {
            h,
            mu,
            alpha,
            alpha_raw,
        }
    }

    /// Backward pass. Given upstream gradients on mu and (clamped) alpha,
    /// returns parameter gradients plus gradients on theta and context.
    pub fn backward(
        &self,
        theta: &[f64],
        context: &[f64],
        eval: &MadeEval,
        d_mu: &[f64],
        d_alpha: &[f64],
    ) -> (MadeGradients, Vec<f64>, Vec<f64>) {
        let in_width = self.context_dim + self.dim;
        let mut g = MadeGradients {
            w_in: Mat::zeros(self.hidden, in_width),
            b_in: vec![0.0; self.hidden],
            w_out: Mat::zeros(2 * self.dim, self.hidden),
            b_out: vec![0.0; 2 * self.dim],
        };
        // Gradient on the raw output: the alpha half passes through the clamp.
        let mut d_out = vec![0.0; 2 * self.dim];
        d_out[..self.dim].copy_from_slice(d_mu);
        for d in 0..self.dim {
            if eval.alpha_raw[d].abs() < ALPHA_CLAMP {
                d_out[self.dim + d] = d_alpha[d];
            }
        }
        let mut d_h = vec![0.0; self.hidden];
        for r in 0..2 * self.dim {
            let dr = d_out[r];
            if dr == 0.0 {
                continue;
            }
            g.b_out[r] = dr;
            let row = &self.w_out.data[r * self.hidden..(r + 1) * self.hidden];
            let grow = &mut g.w_out.data[r * self.hidden..(r + 1) * self.hidden];
            for k in 0..self.hidden {
                grow[k] = dr * eval.h[k];
                d_h[k] += dr * row[k];
            }
        }
        let mut d_theta = vec![0.0; self.dim];
        let mut d_ctx = vec![0.0; self.context_dim];
        for k in 0..self.hidden {
            let d_pre = d_h[k] * (1.0 - eval.h[k] * eval.h[k]);
            if d_pre == 0.0 {
                continue;
            }
            g.b_in[k] = d_pre;
            let row = &self.w_in.data[k * in_width..(k + 1) * in_width];
            let grow = &mut g.w_in.data[k * in_width..(k + 1) * in_width];
            for c in 0..self.context_dim {
                grow[c] = d_pre * context[c];
                d_ctx[c] += d_pre * row[c];
            }
            for d in 0..self.dim {
                grow[self.context_dim + d] = d_pre * theta[d];
                d_theta[d] += d_pre * row[self.context_dim + d];
            }
        }
        g.apply_masks(&self.mask_in, &self.mask_out);
        (g, d_theta, d_ctx)
    }

    /// Flat parameter layout: w_in, b_in, w_out, b_out.
    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.w_in.data);
        out.extend_from_slice(&self.b_in);
        out.extend_from_slice(&self.w_out.data);
        out.extend_from_slice(&self.b_out);
    }

    pub fn unflatten_from(&mut self, flat: &[f64], off: &mut usize) {
        for seg in [
            &mut self.w_in.data,
            &mut self.b_in,
            &mut self.w_out.data,
            &mut self.b_out,
        ] {
            let len = seg.len();
            seg.copy_from_slice(&flat[*off..*off + len]);
            *off += len;
        }
        self.mask_params();
    }

    fn mask_params(&mut self) {
        for (i, w) in self.w_in.data.iter_mut().enumerate() {
            if self.mask_in[i] == 0 {
                *w = 0.0;
            }
        }
        for (i, w) in self.w_out.data.iter_mut().enumerate() {
            if self.mask_out[i] == 0 {
                *w = 0.0;
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.hidden * (self.context_dim + self.dim) + self.hidden
            + 2 * self.dim * self.hidden
            + 2 * self.dim
    }

    /// Indices (in the flat layout) of structurally free parameters,
    /// i.e. everything except masked-out weights.
    pub fn free_param_indices(&self) -> Vec<usize> {
        let mut idx = Vec::new();
        let mut off = 0;
        for (i, &m) in self.mask_in.iter().enumerate() {
            if m == 1 {
                idx.push(off + i);
            }
        }
        off += self.w_in.data.len();
        idx.extend(off..off + self.b_in.len());
        off += self.b_in.len();
        for (i, &m) in self.mask_out.iter().enumerate() {
            if m == 1 {
                idx.push(off + i);
            }
        }
        off += self.w_out.data.len();
        idx.extend(off..off + self.b_out.len());
        idx
    }
}

impl MadeGradients {
    pub fn zeros_like(layer: &MadeLayer) -> Self {
        MadeGradients {
            w_in: Mat::zeros(layer.hidden, layer.context_dim + layer.dim),
            b_in: vec![0.0; layer.hidden],
            w_out: Mat::zeros(2 * layer.dim, layer.hidden),
            b_out: vec![0.0; 2 * layer.dim],
        }
    }

    fn apply_masks(&mut self, mask_in: &[u8], mask_out: &[u8]) {
        for (i, w) in self.w_in.data.iter_mut().enumerate() {
            if mask_in[i] == 0 {
                *w = 0.0;
            }
        }
        for (i, w) in self.w_out.data.iter_mut().enumerate() {
            if mask_out[i] == 0 {
                *w = 0.0;
            }
        }
    }

    pub fn accumulate(&mut self, other: &MadeGradients, scale: f64) {
        for (a, b) in self.w_in.data.iter_mut().zip(other.w_in.data.iter()) {
            *a += scale * b;
        }
        for (a, b) in self.b_in.iter_mut().zip(other.b_in.iter()) {
            *a += scale * b;
        }
        for (a, b) in self.w_out.data.iter_mut().zip(other.w_out.data.iter()) {
            *a += scale * b;
        }
        for (a, b) in self.b_out.iter_mut().zip(other.b_out.iter()) {
            *a += scale * b;
        }
    }

    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.w_in.data);
        out.extend_from_slice(&self.b_in);
        out.extend_from_slice(&self.w_out.data);
        out.extend_from_slice(&self.b_out);
    }
}

/// Dimension check shared by flow entry points.
pub fn check_finite(name: &str, xs: &[f64]) -> Result<()> {
    if let Some(i) = xs.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("{name}[{i}] is not finite")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::master_rng;

    #[test]
    fn zero_layer_is_the_identity_conditioner() {
        let layer = MadeLayer::zeros(3, 2, 8);
        let eval = layer.forward(&[0.4, -1.0, 2.0], &[1.0, 1.0]);
        assert_eq!(eval.mu, vec![0.0; 3]);
        assert_eq!(eval.alpha, vec![0.0; 3]);
    }

    #[test]
    fn masks_enforce_the_autoregressive_property() {
        let mut rng = master_rng(5);
        let mut layer = MadeLayer::random(3, 2, 16, &mut rng);
        for w in layer.w_out.data.iter_mut() {
            *w = rng.random_range(-0.5..0.5);
        }
        layer.mask_params();
        let ctx = [0.3, -0.2];
        let theta = [0.5, -0.4, 0.9];
        let base = layer.forward(&theta, &ctx);
        for perturbed_dim in 0..3 {
            let mut t2 = theta;
            t2[perturbed_dim] += 0.37;
            let out = layer.forward(&t2, &ctx);
            for i in 0..=perturbed_dim {
                assert_eq!(out.mu[i], base.mu[i], "mu[{i}] must not see theta[{perturbed_dim}]");
                assert_eq!(out.alpha[i], base.alpha[i]);
            }
        }
    }

    #[test]
    fn context_reaches_every_output() {
        let mut rng = master_rng(6);
        let mut layer = MadeLayer::random(3, 1, 16, &mut rng);
        for w in layer.w_out.data.iter_mut() {
            *w = rng.random_range(-0.5..0.5);
        }
        layer.mask_params();
        let theta = [0.1, 0.2, 0.3];
        let a = layer.forward(&theta, &[0.0]);
        let b = layer.forward(&theta, &[1.0]);
        for d in 0..3 {
            assert_ne!(a.mu[d], b.mu[d], "context must reach mu[{d}]");
        }
    }

    fn total_out(layer: &MadeLayer, theta: &[f64], ctx: &[f64], wm: &[f64], wa: &[f64]) -> f64 {
        let e = layer.forward(theta, ctx);
        let mut s = 0.0;
        for d in 0..layer.dim {
            s += wm[d] * e.mu[d] + wa[d] * e.alpha[d];
        }
        s
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = master_rng(7);
        let mut layer = MadeLayer::random(3, 2, 10, &mut rng);
        for (i, w) in layer.w_out.data.iter_mut().enumerate() {
            *w = ((i % 7) as f64 - 3.0) * 0.1;
        }
        layer.mask_params();
        let theta = [0.2, -0.6, 1.1];
        let ctx = [0.5, -0.3];
        let wm = [0.7, -0.2, 0.4];
        let wa = [-0.5, 0.3, 0.8];
        let eval = layer.forward(&theta, &ctx);
        let (g, d_theta, d_ctx) = layer.backward(&theta, &ctx, &eval, &wm, &wa);

        let mut flat = Vec::new();
        layer.flatten_into(&mut flat);
        let mut gflat = Vec::new();
        g.flatten_into(&mut gflat);
        let eps = 1e-6;
        for &i in &layer.free_param_indices() {
            let mut lp = layer.clone();
            let mut xp = flat.clone();
            xp[i] += eps;
            lp.unflatten_from(&xp, &mut 0);
            let mut lm = layer.clone();
            let mut xm = flat.clone();
            xm[i] -= eps;
            lm.unflatten_from(&xm, &mut 0);
            let fd = (total_out(&lp, &theta, &ctx, &wm, &wa)
                - total_out(&lm, &theta, &ctx, &wm, &wa))
                / (2.0 * eps);
            let denom = gflat[i].abs().max(fd.abs()).max(1e-8);
            assert!(
                (gflat[i] - fd).abs() / denom < 1e-5,
                "param {i}: analytic {} vs fd {fd}",
                gflat[i]
            );
        }
        // input gradients
        for d in 0..3 {
            let mut tp = theta;
            tp[d] += eps;
            let mut tm = theta;
            tm[d] -= eps;
            let fd = (total_out(&layer, &tp, &ctx, &wm, &wa)
                - total_out(&layer, &tm, &ctx, &wm, &wa))
                / (2.0 * eps);
            assert!((d_theta[d] - fd).abs() < 1e-6, "d_theta[{d}]");
        }
        for c in 0..2 {
            let mut cp = ctx;
            cp[c] += eps;
            let mut cm = ctx;
            cm[c] -= eps;
            let fd = (total_out(&layer, &theta, &cp, &wm, &wa)
                - total_out(&layer, &theta, &cm, &wm, &wa))
                / (2.0 * eps);
            assert!((d_ctx[c] - fd).abs() < 1e-6, "d_ctx[{c}]");
        }
    }
}
