//! Gated recurrent unit embedding with an exact hand-written backward pass.
//!
//! The unit follows the standard parameterization
//!   z_t = sigma(W_z x_t + U_z h_{t-1} + b_z)
//!   r_t = sigma(W_r x_t + U_r h_{t-1} + b_r)
//!   c_t = tanh(W_h x_t + U_h (r_t . h_{t-1}) + b_h)
//!   h_t = (1 - z_t) . h_{t-1} + z_t . c_t
//! from a zero initial hidden state; the summary is the final hidden state.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::rng::Rng;
use crate::summaries::{SummaryKind, SummaryVector};

#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentEmbedding {
    pub input_size: usize,
    pub hidden_size: usize,
    pub w_z: Mat,
    pub u_z: Mat,
    pub b_z: Vec<f64>,
    pub w_r: Mat,
    pub u_r: Mat,
    pub b_r: Vec<f64>,
    pub w_h: Mat,
    pub u_h: Mat,
    pub b_h: Vec<f64>,
}

/// Per-step activations cached by the forward pass.
#[derive(Debug, Clone)]
pub struct GruState {
    pub z: Vec<Vec<f64>>,
    pub r: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
    pub h: Vec<Vec<f64>>,
}

impl GruState {
    pub fn final_hidden(&self) -> &[f64] {
        self.h.last().expect("at least one step")
    }
}

/// Gradients with the same layout as [`RecurrentEmbedding`].
pub type GruGradients = RecurrentEmbedding;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl RecurrentEmbedding {
    pub fn zeros(input_size: usize, hidden_size: usize) -> Self {
        let w = || Mat::zeros(hidden_size, input_size);
        let u = || Mat::zeros(hidden_size, hidden_size);
        let b = || vec![0.0; hidden_size];
        RecurrentEmbedding {
            input_size,
            hidden_size,
            w_z: w(),
            u_z: u(),
            b_z: b(),
            w_r: w(),
            u_r: u(),
            b_r: b(),
            w_h: w(),
            u_h: u(),
            b_h: b(),
        }
    }

    /// Uniform init scaled by fan-in. The update-gate bias starts negative
    /// so the unit keeps a long memory at init, which helps it integrate
    /// over long noisy sequences instead of tracking the last few steps.
    pub fn random(input_size: usize, hidden_size: usize, rng: &mut Rng) -> Self {
        let mut emb = Self::zeros(input_size, hidden_size);
        let bound_w = 1.0 / (input_size as f64).sqrt();
        let bound_u = 1.0 / (hidden_size as f64).sqrt();
        for m in [&mut emb.w_z, &mut emb.w_r, &mut emb.w_h] {
            for x in m.data.iter_mut() {
                *x = rng.random_range(-bound_w..bound_w);
            }
        }
        for m in [&mut emb.u_z, &mut emb.u_r, &mut emb.u_h] {
            for x in m.data.iter_mut() {
                *x = rng.random_range(-bound_u..bound_u);
            }
        }
        for b in emb.b_z.iter_mut() {
            *b = -4.0;
        }
        emb
    }

    fn check_input(&self, x: &Mat) -> Result<()> {
        if x.cols != self.input_size {
            return Err(Error::Dimension(format!(
                "input width {} != embedding input size {}",
                x.cols, self.input_size
            )));
        }
        if x.rows == 0 {
            return Err(Error::Dimension("input must have at least one step".into()));
        }
        Ok(())
    }

    /// Full forward pass, caching gate activations for the backward pass.
    pub fn forward_cached(&self, x: &Mat) -> Result<GruState> {
        self.check_input(x)?;
        let hsz = self.hidden_size;
        let steps = x.rows;
        let mut state = GruState {
            z: Vec::with_capacity(steps),
            r: Vec::with_capacity(steps),
            c: Vec::with_capacity(steps),
            h: Vec::with_capacity(steps),
        };
        let mut h_prev = vec![0.0; hsz];
        for t in 0..steps {
            let xt = x.row(t);
            let mut z = self.w_z.matvec(xt);
            let mut r = self.w_r.matvec(xt);
            let uz = self.u_z.matvec(&h_prev);
            let ur = self.u_r.matvec(&h_prev);
            for k in 0..hsz {
                z[k] = sigmoid(z[k] + uz[k] + self.b_z[k]);
                r[k] = sigmoid(r[k] + ur[k] + self.b_r[k]);
            }
            let gated: Vec<f64> = (0..hsz).map(|k| r[k] * h_prev[k]).collect();
            let mut c = self.w_h.matvec(xt);
            let uh = self.u_h.matvec(&gated);
            for k in 0..hsz {
                c[k] = (c[k] + uh[k] + self.b_h[k]).tanh();
            }
            let h: Vec<f64> = (0..hsz)
                .map(|k| (1.0 - z[k]) * h_prev[k] + z[k] * c[k])
                .collect();
            state.z.push(z);
            state.r.push(r);
            state.c.push(c);
            h_prev = h.clone();
            state.h.push(h);
        }
        Ok(state)
    }

    /// Backpropagation through time from a gradient on the final hidden state.
    /// Returns parameter gradients and, secondarily, the gradient on the inputs.
    pub fn backward(
        &self,
        x: &Mat,
        cache: &GruState,
        d_final: &[f64],
    ) -> Result<(GruGradients, Mat)> {
        self.check_input(x)?;
        let hsz = self.hidden_size;
        if d_final.len() != hsz {
            return Err(Error::Dimension(format!(
                "output gradient length {} != hidden size {hsz}",
                d_final.len()
            )));
        }
        let mut g = GruGradients::zeros(self.input_size, hsz);
        let mut dx = Mat::zeros(x.rows, x.cols);
        let mut dh = d_final.to_vec();
        for t in (0..x.rows).rev() {
            let xt = x.row(t);
            let h_prev: Vec<f64> = if t == 0 {
                vec![0.0; hsz]
            } else {
                cache.h[t - 1].clone()
            };
            let (z, r, c) = (&cache.z[t], &cache.r[t], &cache.c[t]);

            let mut dpre_h = vec![0.0; hsz];
            let mut dpre_z = vec![0.0; hsz];
            let mut dh_prev = vec![0.0; hsz];
            for k in 0..hsz {
                let dz = dh[k] * (c[k] - h_prev[k]);
                let dc = dh[k] * z[k];
                dh_prev[k] = dh[k] * (1.0 - z[k]);
                dpre_h[k] = dc * (1.0 - c[k] * c[k]);
                dpre_z[k] = dz * z[k] * (1.0 - z[k]);
            }
            let gated: Vec<f64> = (0..hsz).map(|k| r[k] * h_prev[k]).collect();
            g.w_h.add_outer(&dpre_h, xt, 1.0);
            g.u_h.add_outer(&dpre_h, &gated, 1.0);
            for k in 0..hsz {
                g.b_h[k] += dpre_h[k];
            }
            let dgated = self.u_h.matvec_t(&dpre_h);
            let mut dpre_r = vec![0.0; hsz];
            for k in 0..hsz {
                let dr = dgated[k] * h_prev[k];
                dh_prev[k] += dgated[k] * r[k];
                dpre_r[k] = dr * r[k] * (1.0 - r[k]);
            }
            g.w_z.add_outer(&dpre_z, xt, 1.0);
            g.u_z.add_outer(&dpre_z, &h_prev, 1.0);
            g.w_r.add_outer(&dpre_r, xt, 1.0);
            g.u_r.add_outer(&dpre_r, &h_prev, 1.0);
            for k in 0..hsz {
                g.b_z[k] += dpre_z[k];
                g.b_r[k] += dpre_r[k];
            }
            let from_z = self.u_z.matvec_t(&dpre_z);
            let from_r = self.u_r.matvec_t(&dpre_r);
            for k in 0..hsz {
                dh_prev[k] += from_z[k] + from_r[k];
            }

            let dxt = dx.row_mut(t);
            for (m, dpre) in [
                (&self.w_h, &dpre_h),
                (&self.w_z, &dpre_z),
                (&self.w_r, &dpre_r),
            ] {
                let contrib = m.matvec_t(dpre);
                for (a, b) in dxt.iter_mut().zip(contrib.iter()) {
                    *a += b;
                }
            }
            dh = dh_prev;
        }
        Ok((g, dx))
    }

    /// Flat parameter view in a fixed order, for the optimizer.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for m in [&self.w_z, &self.u_z, &self.w_r, &self.u_r, &self.w_h, &self.u_h] {
            out.extend_from_slice(&m.data);
        }
        for b in [&self.b_z, &self.b_r, &self.b_h] {
            out.extend_from_slice(b);
        }
        out
    }

    pub fn unflatten(&mut self, flat: &[f64]) {
        let mut off = 0;
        for m in [
            &mut self.w_z,
            &mut self.u_z,
            &mut self.w_r,
            &mut self.u_r,
            &mut self.w_h,
            &mut self.u_h,
        ] {
            let len = m.data.len();
            m.data.copy_from_slice(&flat[off..off + len]);
            off += len;
        }
        for b in [&mut self.b_z, &mut self.b_r, &mut self.b_h] {
            let len = b.len();
            b.copy_from_slice(&flat[off..off + len]);
            off += len;
        }
        debug_assert_eq!(off, flat.len());
    }

    pub fn param_count(&self) -> usize {
        3 * self.hidden_size * (self.input_size + self.hidden_size + 1)
    }
}

/// Runs the recurrence over the T x (4n) input and returns the final
/// hidden state as a learned summary.
pub fn embed(emb: &RecurrentEmbedding, x: &Mat) -> Result<SummaryVector> {
    let cache = emb.forward_cached(x)?;
    let values = cache.final_hidden().to_vec();
    if let Some(ix) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "embedding output component {ix} is not finite"
        )));
    }
    Ok(SummaryVector {
        values,
        kind: SummaryKind::Learned,
    })
}

/// Gradients of a scalar loss with respect to all embedding parameters,
/// given the loss gradient on the final hidden state.
pub fn embed_backward(
    emb: &RecurrentEmbedding,
    x: &Mat,
    output_gradient: &[f64],
) -> Result<GruGradients> {
    let cache = emb.forward_cached(x)?;
    let (g, _) = emb.backward(x, &cache, output_gradient)?;
    Ok(g)
}
