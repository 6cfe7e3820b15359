//! Inference-time localization: kernel soft-argmax and a nearest-neighbour
//! baseline.

use serde::{Deserialize, Serialize};

use crate::autograd::{softmax_row, Tape};
use crate::error::{Error, Result};
use crate::matcher::{extract_score_map, feature_to_image_coords, image_to_feature_coords, CorrelationTensor};
use crate::point::Point;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalizerConfig {
    /// Std of the suppression mask, in target feature cells.
    pub sigma: f64,
    pub beta_eval: f64,
}

impl Default for LocalizerConfig {
    fn default() -> Self {
        Self {
            sigma: 7.0,
            beta_eval: 1.0,
        }
    }
}

impl LocalizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) || !(self.beta_eval > 0.0) {
            return Err(Error::Config(format!(
                "sigma and beta_eval must be positive, got {} and {}",
                self.sigma, self.beta_eval
            )));
        }
        Ok(())
    }
}

fn check_map(values: &[f64], h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || values.len() != h * w {
        return Err(Error::Dimension(format!(
            "{} values for a {h}×{w} map",
            values.len()
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("score map contains non-finite values".into()));
    }
    Ok(())
}

/// Row-major argmax; ties resolve to the smallest index.
pub fn nearest_neighbor_argmax(values: &[f64], h: usize, w: usize) -> Result<(usize, usize)> {
    check_map(values, h, w)?;
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    Ok((best / w, best % w))
}

/// Masks the map with a Gaussian centred on its argmax, applies a softmax at
/// `β_eval`, and returns the expected `(row, col)` cell coordinate.
pub fn kernel_soft_argmax(values: &[f64], h: usize, w: usize, cfg: &LocalizerConfig) -> Result<Point> {
    cfg.validate()?;
    let (pr, pc) = nearest_neighbor_argmax(values, h, w)?;
    let denom = 2.0 * cfg.sigma * cfg.sigma;
    let masked: Vec<f64> = values
        .iter()
        .enumerate()
        .map(|(i, m)| {
            let dr = (i / w) as f64 - pr as f64;
            let dc = (i % w) as f64 - pc as f64;
            m * (-(dr * dr + dc * dc) / denom).exp()
        })
        .collect();
    let probs = softmax_row(&masked, cfg.beta_eval);
    let (mut row, mut col) = (0.0, 0.0);
    for (i, p) in probs.iter().enumerate() {
        row += p * (i / w) as f64;
        col += p * (i % w) as f64;
    }
    // rounding can push the mean a hair past the last cell
    Ok(Point::new(row.clamp(0.0, (h - 1) as f64), col.clamp(0.0, (w - 1) as f64)))
}

/// Maps an image-A query to its predicted image-B location.
pub fn predict_correspondence(
    tape: &mut Tape,
    c: &CorrelationTensor,
    query: Point,
    ratio_a: usize,
    ratio_b: usize,
    cfg: &LocalizerConfig,
) -> Result<Point> {
    let q = image_to_feature_coords(query, ratio_a, c.source)?;
    let m = extract_score_map(tape, c, q)?;
    let feat = kernel_soft_argmax(m.values(tape), m.height, m.width, cfg)?;
    Ok(feature_to_image_coords(feat, ratio_b))
}

/// [`predict_correspondence`] over many queries.
pub fn predict_many(
    tape: &mut Tape,
    c: &CorrelationTensor,
    queries: &[Point],
    ratio_a: usize,
    ratio_b: usize,
    cfg: &LocalizerConfig,
) -> Result<Vec<Point>> {
    queries
        .iter()
        .map(|q| predict_correspondence(tape, c, *q, ratio_a, ratio_b, cfg))
        .collect()
}
