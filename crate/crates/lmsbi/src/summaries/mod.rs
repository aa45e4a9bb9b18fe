//! Trajectory summaries: the tensor reshape, ten handcrafted statistics,
//! and a trainable recurrent embedding.

pub mod gru;

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::sim::MacroTrajectory;
pub use gru::{GruGradients, GruState, RecurrentEmbedding};

/// Lags used by the autocorrelation statistics.
pub const ACF_LAGS: [usize; 3] = [1, 2, 3];
/// Statistics per reduced sequence: min, max, mean, variance,
/// quantiles {0.25, 0.5, 0.75}, autocorrelations at lags {1, 2, 3}.
pub const STATS_PER_SERIES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SummaryMode {
    /// Reduce each of the 4n indicator columns over time (length 40n).
    PerSeries,
    /// Reduce each time-step row across indicators (length 10T).
    PerStep,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SummaryKind {
    HandcraftedPerSeries,
    HandcraftedPerStep,
    Learned,
}

/// Fixed-length reduction of a trajectory with its provenance tag.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryVector {
    pub values: Vec<f64>,
    pub kind: SummaryKind,
}

impl SummaryVector {
    fn checked(values: Vec<f64>, kind: SummaryKind) -> Result<Self> {
        if let Some(ix) = values.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!(
                "summary component {ix} is not finite"
            )));
        }
        Ok(SummaryVector { values, kind })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// CSV export with a descriptor header line.
    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        let tag = match self.kind {
            SummaryKind::HandcraftedPerSeries => "handcrafted_per_series",
            SummaryKind::HandcraftedPerStep => "handcrafted_per_step",
            SummaryKind::Learned => "learned",
        };
        writeln!(w, "# kind={tag} dim={}", self.values.len())?;
        let fields: Vec<String> = self.values.iter().map(|x| x.to_string()).collect();
        writeln!(w, "{}", fields.join(","))?;
        Ok(())
    }
}

/// Reshapes X_A into the T x (4n) matrix used downstream. Lossless.
pub fn reshape_macro(traj: &MacroTrajectory) -> Result<Mat> {
    if traj.data.len() != traj.steps * 4 * traj.n {
        return Err(Error::Dimension(format!(
            "trajectory claims {} steps of width {} but holds {} values",
            traj.steps,
            4 * traj.n,
            traj.data.len()
        )));
    }
    Mat::from_vec(traj.steps, 4 * traj.n, traj.data.clone())
}

/// Inverse of [`reshape_macro`].
pub fn inverse_reshape(mat: &Mat, n: usize) -> Result<MacroTrajectory> {
    if mat.cols != 4 * n {
        return Err(Error::Dimension(format!(
            "matrix width {} != 4n = {}",
            mat.cols,
            4 * n
        )));
    }
    Ok(MacroTrajectory {
        n,
        steps: mat.rows,
        data: mat.data.clone(),
    })
}

/// Quantile by linear interpolation between closest order statistics.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    if sorted.len() == 1 {
        return sorted[0];
    }
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    let frac = h - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Sample autocorrelation at lag k; zero-variance sequences yield 0.
pub fn autocorrelation(xs: &[f64], k: usize) -> f64 {
    let n = xs.len();
    if k >= n {
        return 0.0;
    }
    let m = xs.iter().sum::<f64>() / n as f64;
    let denom: f64 = xs.iter().map(|x| (x - m) * (x - m)).sum();
    if denom == 0.0 {
        return 0.0;
    }
    let num: f64 = (0..n - k).map(|t| (xs[t] - m) * (xs[t + k] - m)).sum();
    num / denom
}

/// The ten statistics of one sequence, in fixed order.
pub fn ten_statistics(xs: &[f64]) -> [f64; STATS_PER_SERIES] {
    let n = xs.len();
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
    let mut sorted = xs.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    [
        sorted[0],
        sorted[n - 1],
        mean,
        var,
        quantile(&sorted, 0.25),
        quantile(&sorted, 0.5),
        quantile(&sorted, 0.75),
        autocorrelation(xs, ACF_LAGS[0]),
        autocorrelation(xs, ACF_LAGS[1]),
        autocorrelation(xs, ACF_LAGS[2]),
    ]
}

/// Handcrafted summary of a reshaped T x (4n) trajectory matrix.
pub fn handcrafted(x: &Mat, mode: SummaryMode) -> Result<SummaryVector> {
    if x.rows < 4 {
        return Err(Error::Validation(format!(
            "handcrafted statistics need T >= 4 so that autocorrelation lags up to {} are defined; got T = {}",
            ACF_LAGS[2], x.rows
        )));
    }
    match mode {
        SummaryMode::PerSeries => {
            let mut values = Vec::with_capacity(STATS_PER_SERIES * x.cols);
            for c in 0..x.cols {
                values.extend_from_slice(&ten_statistics(&x.column(c)));
            }
            SummaryVector::checked(values, SummaryKind::HandcraftedPerSeries)
        }
        SummaryMode::PerStep => {
            let mut values = Vec::with_capacity(STATS_PER_SERIES * x.rows);
            for r in 0..x.rows {
                values.extend_from_slice(&ten_statistics(x.row(r)));
            }
            SummaryVector::checked(values, SummaryKind::HandcraftedPerStep)
        }
    }
}
