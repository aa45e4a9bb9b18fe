//! Masked autoregressive flow over a standard normal base.
//!
//! Density evaluation pushes a standardized input through each conditioner
//! in parallel across dimensions; sampling inverts the stack layer by layer,
//! dimension by dimension. Order-reversing permutations sit between layers.

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::flow::made::{check_finite, MadeEval, MadeGradients, MadeLayer};
use crate::rng::Rng;

pub const LN_2PI: f64 = 1.8378770664093453;

/// Per-component affine standardizer.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Standardizer {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Fit component-wise mean and standard deviation; zero-spread
    /// components fall back to unit scale.
    pub fn fit(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows
            .first()
            .ok_or_else(|| Error::Validation("cannot fit standardizer on empty data".into()))?
            .len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; dim];
        for row in rows {
            for (m, x) in mean.iter_mut().zip(row.iter()) {
                *m += x;
            }
        }
        for m in mean.iter_mut() {
            *m /= n;
        }
        let mut var = vec![0.0; dim];
        for row in rows {
            for (v, (x, m)) in var.iter_mut().zip(row.iter().zip(mean.iter())) {
                *v += (x - m) * (x - m);
            }
        }
        let std = var
            .iter()
            .map(|v| {
                let s = (v / n).sqrt();
                if s > 0.0 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Standardizer { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(self.std.iter()))
            .map(|(x, (m, s))| (x - m) / s)
            .collect()
    }

    pub fn invert(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.mean.iter().zip(self.std.iter()))
            .map(|(z, (m, s))| z * s + m)
            .collect()
    }

    /// log |d standardized / d raw| = -sum ln std.
    pub fn log_jacobian(&self) -> f64 {
        -self.std.iter().map(|s| s.ln()).sum::<f64>()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FlowConfig {
    pub dim: usize,
    pub context_dim: usize,
    pub layers: usize,
    pub hidden: usize,
}

impl FlowConfig {
    pub fn new(dim: usize, context_dim: usize) -> Self {
        FlowConfig {
            dim,
            context_dim,
            layers: 5,
            hidden: 50,
        }
    }
}

/// Stack of masked autoregressive layers with input/context standardizers.
#[derive(Debug, Clone, PartialEq)]
pub struct MafStack {
    pub layers: Vec<MadeLayer>,
    pub theta_std: Standardizer,
    pub ctx_std: Standardizer,
}

/// Full forward cache for one (theta, context) pair, used by the backward pass.
pub struct FlowTrace {
    /// Input to each layer, post-permutation.
    pub layer_inputs: Vec<Vec<f64>>,
    pub evals: Vec<MadeEval>,
    /// Output of each layer.
    pub layer_outputs: Vec<Vec<f64>>,
    pub ctx_s: Vec<f64>,
    pub log_prob: f64,
}

/// Gradients for every layer of the stack.
pub struct MafGradients {
    pub layers: Vec<MadeGradients>,
}

impl MafGradients {
    pub fn zeros_like(flow: &MafStack) -> Self {
        MafGradients {
            layers: flow.layers.iter().map(MadeGradients::zeros_like).collect(),
        }
    }

    pub fn accumulate(&mut self, other: &MafGradients, scale: f64) {
        for (a, b) in self.layers.iter_mut().zip(other.layers.iter()) {
            a.accumulate(b, scale);
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            l.flatten_into(&mut out);
        }
        out
    }
}

fn reverse(xs: &mut [f64]) {
    xs.reverse();
}

impl MafStack {
    /// Identity-initialized flow: exactly the (standardized) base normal.
    pub fn identity(cfg: &FlowConfig) -> Self {
        MafStack {
            layers: (0..cfg.layers)
                .map(|_| MadeLayer::zeros(cfg.dim, cfg.context_dim, cfg.hidden))
                .collect(),
            theta_std: Standardizer::identity(cfg.dim),
            ctx_std: Standardizer::identity(cfg.context_dim),
        }
    }

    /// Random conditioner inputs, identity transforms at initialization.
    pub fn random(cfg: &FlowConfig, rng: &mut Rng) -> Self {
        MafStack {
            layers: (0..cfg.layers)
                .map(|_| MadeLayer::random(cfg.dim, cfg.context_dim, cfg.hidden, rng))
                .collect(),
            theta_std: Standardizer::identity(cfg.dim),
            ctx_std: Standardizer::identity(cfg.context_dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.layers[0].dim
    }

    pub fn context_dim(&self) -> usize {
        self.layers[0].context_dim
    }

    fn check_inputs(&self, theta: &[f64], context: &[f64]) -> Result<()> {
        if theta.len() != self.dim() {
            return Err(Error::Dimension(format!(
                "theta has {} components, flow expects {}",
                theta.len(),
                self.dim()
            )));
        }
        if context.len() != self.context_dim() {
            return Err(Error::Dimension(format!(
                "context has {} components, flow expects {}",
                context.len(),
                self.context_dim()
            )));
        }
        check_finite("theta", theta)?;
        check_finite("context", context)?;
        Ok(())
    }

    /// Forward (density) pass with full caching.
    pub fn trace(&self, theta: &[f64], context: &[f64]) -> Result<FlowTrace> {
        self.check_inputs(theta, context)?;
        let ctx_s = self.ctx_std.apply(context);
        let mut x = self.theta_std.apply(theta);
        let mut log_det = self.theta_std.log_jacobian();
        let mut layer_inputs = Vec::with_capacity(self.layers.len());
        let mut evals = Vec::with_capacity(self.layers.len());
        let mut layer_outputs = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            if l > 0 {
                reverse(&mut x);
            }
            let eval = layer.forward(&x, &ctx_s);
            let u: Vec<f64> = (0..self.dim())
                .map(|d| (x[d] - eval.mu[d]) * (-eval.alpha[d]).exp())
                .collect();
            log_det -= eval.alpha.iter().sum::<f64>();
            layer_inputs.push(x.clone());
            layer_outputs.push(u.clone());
            evals.push(eval);
            x = u;
        }
        let base: f64 = x.iter().map(|u| -0.5 * (u * u + LN_2PI)).sum();
        Ok(FlowTrace {
            layer_inputs,
            evals,
            layer_outputs,
            ctx_s,
            log_prob: base + log_det,
        })
    }

    /// Exact log-density log q(theta | context).
    pub fn log_prob(&self, theta: &[f64], context: &[f64]) -> Result<f64> {
        Ok(self.trace(theta, context)?.log_prob)
    }

    /// Base noise recovered by the forward transform (for invertibility checks).
    pub fn forward_noise(&self, theta: &[f64], context: &[f64]) -> Result<Vec<f64>> {
        let t = self.trace(theta, context)?;
        Ok(t.layer_outputs.last().unwrap().clone())
    }

    /// Exact sampling by inverting the stack.
    pub fn sample(&self, context: &[f64], rng: &mut Rng, count: usize) -> Result<Vec<Vec<f64>>> {
        check_finite("context", context)?;
        if context.len() != self.context_dim() {
            return Err(Error::Dimension(format!(
                "context has {} components, flow expects {}",
                context.len(),
                self.context_dim()
            )));
        }
        let ctx_s = self.ctx_std.apply(context);
        let dim = self.dim();
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let mut x: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
            for (l, layer) in self.layers.iter().enumerate().rev() {
                // Invert u = (y - mu(y)) * exp(-alpha(y)) dimension by dimension.
                let u = x;
                let mut y = vec![0.0; dim];
                for d in 0..dim {
                    let eval = layer.forward(&y, &ctx_s);
                    y[d] = u[d] * eval.alpha[d].exp() + eval.mu[d];
                }
                if l > 0 {
                    reverse(&mut y);
                }
                x = y;
            }
            out.push(self.theta_std.invert(&x));
        }
        Ok(out)
    }

    /// Mean negative log-density over a batch and exact gradients for all
    /// layer parameters; also returns the per-sample gradient with respect
    /// to the raw (unstandardized) context.
    pub fn nll_and_grads(
        &self,
        batch: &[(Vec<f64>, Vec<f64>)],
    ) -> Result<(f64, MafGradients, Vec<Vec<f64>>)> {
        if batch.is_empty() {
            return Err(Error::Validation(
                "cannot reduce the mean loss of an empty batch".into(),
            ));
        }
        let scale = 1.0 / batch.len() as f64;
        let mut grads = MafGradients::zeros_like(self);
        let mut ctx_grads = Vec::with_capacity(batch.len());
        let mut nll = 0.0;
        let dim = self.dim();
        for (theta, context) in batch {
            let trace = self.trace(theta, context)?;
            nll -= trace.log_prob * scale;
            // d NLL / d u_final
            let mut g: Vec<f64> = trace.layer_outputs.last().unwrap().to_vec();
            let mut d_ctx_s = vec![0.0; self.context_dim()];
            for l in (0..self.layers.len()).rev() {
                let layer = &self.layers[l];
                let eval = &trace.evals[l];
                let y = &trace.layer_inputs[l];
                let u = &trace.layer_outputs[l];
                let mut d_mu = vec![0.0; dim];
                let mut d_alpha = vec![0.0; dim];
                let mut d_y = vec![0.0; dim];
                for d in 0..dim {
                    let e = (-eval.alpha[d]).exp();
                    d_mu[d] = -g[d] * e;
                    // NLL picks up +alpha_d from the log-determinant.
                    d_alpha[d] = -g[d] * u[d] + 1.0;
                    d_y[d] = g[d] * e;
                }
                let (layer_grads, d_y_net, d_ctx_l) =
                    layer.backward(y, &trace.ctx_s, eval, &d_mu, &d_alpha);
                grads.layers[l].accumulate(&layer_grads, scale);
                for d in 0..dim {
                    d_y[d] += d_y_net[d];
                }
                for (a, b) in d_ctx_s.iter_mut().zip(d_ctx_l.iter()) {
                    *a += b;
                }
                if l > 0 {
                    reverse(&mut d_y);
                }
                g = d_y;
            }
            // Undo the context standardization scale.
            let d_ctx_raw: Vec<f64> = d_ctx_s
                .iter()
                .zip(self.ctx_std.std.iter())
                .map(|(d, s)| d / s)
                .collect();
            ctx_grads.push(d_ctx_raw);
        }
        Ok((nll, grads, ctx_grads))
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            l.flatten_into(&mut out);
        }
        out
    }

    pub fn unflatten(&mut self, flat: &[f64]) {
        let mut off = 0;
        for l in &mut self.layers {
            l.unflatten_from(flat, &mut off);
        }
        debug_assert_eq!(off, flat.len());
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.param_count()).sum()
    }

    pub fn free_param_indices(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let mut off = 0;
        for l in &self.layers {
            out.extend(l.free_param_indices().into_iter().map(|i| i + off));
            off += l.param_count();
        }
        out
    }
}
