//! Training objective: smoothed ground-truth targets, cross-entropy, and the
//! temperature regularizer.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::matcher::ScoreMap;
use crate::point::Point;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Regularization weight `γ`.
    pub gamma: f64,
    pub beta_thres: f64,
    /// Side of the supported target region.
    pub n_s: usize,
    /// Gaussian kernel size; its standard deviation is `⌊n_k/2⌋`.
    pub n_k: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma: 0.2,
            beta_thres: 0.1,
            n_s: 3,
            n_k: 5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) {
            return Err(Error::Config(format!("gamma must be non-negative, got {}", self.gamma)));
        }
        if !(self.beta_thres > 0.0 && self.beta_thres < 1.0) {
            return Err(Error::Config(format!(
                "beta_thres must lie in (0, 1), got {}",
                self.beta_thres
            )));
        }
        check_window(self.n_s, self.n_k).map_err(|e| Error::Config(e.to_string()))
    }
}

fn check_window(n_s: usize, n_k: usize) -> Result<()> {
    if n_s % 2 == 0 || n_k % 2 == 0 || n_k <= n_s {
        return Err(Error::Domain(format!(
            "n_s and n_k must be odd with n_k > n_s, got n_s={n_s}, n_k={n_k}"
        )));
    }
    Ok(())
}

/// Target distribution over an `h×w` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct GtDistribution {
    pub data: Vec<f64>,
    pub height: usize,
    pub width: usize,
    pub center: Point,
    pub n_s: usize,
    pub n_k: usize,
}

/// The `n_s` integer positions nearest `x` on `[0, n)`, clipped at the edges.
fn support(x: f64, n_s: usize, n: usize) -> std::ops::RangeInclusive<usize> {
    let half = (n_s / 2) as i64;
    let c = (x + 0.5).floor() as i64;
    let lo = (c - half).max(0) as usize;
    let hi = (c + half).min(n as i64 - 1) as usize;
    lo..=hi
}

/// Samples a Gaussian with std `⌊n_k/2⌋` centred on the sub-pixel point `gt`
/// at the `n_s×n_s` cells nearest it, zero elsewhere, normalized to sum 1.
pub fn make_gt_distribution(gt: Point, grid: (usize, usize), n_s: usize, n_k: usize) -> Result<GtDistribution> {
    check_window(n_s, n_k)?;
    let (h, w) = grid;
    let inside = |v: f64, n: usize| v.is_finite() && v >= 0.0 && v <= (n - 1) as f64;
    if h == 0 || w == 0 || !inside(gt.row, h) || !inside(gt.col, w) {
        return Err(Error::OutOfRange(format!(
            "ground truth ({}, {}) outside the {h}×{w} grid",
            gt.row, gt.col
        )));
    }
    let std = (n_k / 2) as f64;
    let denom = 2.0 * std * std;
    let mut data = vec![0.0; h * w];
    let mut total = 0.0;
    for u in support(gt.row, n_s, h) {
        for v in support(gt.col, n_s, w) {
            let du = u as f64 - gt.row;
            let dv = v as f64 - gt.col;
            let g = (-(du * du + dv * dv) / denom).exp();
            data[u * w + v] = g;
            total += g;
        }
    }
    for p in &mut data {
        *p /= total;
    }
    Ok(GtDistribution {
        data,
        height: h,
        width: w,
        center: gt,
        n_s,
        n_k,
    })
}

/// `−Σ gt·log softmax(score)` with the standard (`β = 1`) softmax; any
/// temperature must already be folded into the scores.
pub fn cross_entropy(tape: &mut Tape, score: &ScoreMap, gt: &GtDistribution) -> Result<Var> {
    if (score.height, score.width) != (gt.height, gt.width) {
        return Err(Error::Dimension(format!(
            "score map {}×{} vs target {}×{}",
            score.height, score.width, gt.height, gt.width
        )));
    }
    tape.cross_entropy(score.data, &gt.data)
}

/// `max(0, −log β + log β_thres)` on the tape.
pub fn temperature_regularizer(tape: &mut Tape, beta: Var, beta_thres: f64) -> Result<Var> {
    if tape.numel(beta) != 1 {
        return Err(Error::Dimension("regularizer takes a single temperature".into()));
    }
    let b = tape.item(beta);
    if !(b > 0.0) {
        return Err(Error::Domain(format!("temperature must be positive, got {b}")));
    }
    let log_b = tape.log(beta)?;
    let neg = tape.mul_scalar(log_b, -1.0)?;
    let shifted = tape.add_scalar(neg, beta_thres.ln())?;
    tape.relu(shifted)
}

/// Plain-value form of [`temperature_regularizer`].
pub fn regularizer_value(beta: f64, beta_thres: f64) -> Result<f64> {
    if !(beta > 0.0) {
        return Err(Error::Domain(format!("temperature must be positive, got {beta}")));
    }
    Ok((-beta.ln() + beta_thres.ln()).max(0.0))
}

/// `ce + γ·reg`.
pub fn total_loss(tape: &mut Tape, ce: Var, reg: Var, gamma: f64) -> Result<Var> {
    let weighted = tape.mul_scalar(reg, gamma)?;
    tape.add(ce, weighted)
}
