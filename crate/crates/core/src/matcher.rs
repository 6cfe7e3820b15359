//! Correlation volumes between two feature maps and per-query score maps.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::backbone::FeatureMap;
use crate::error::{Error, Result};
use crate::point::Point;

/// Guard inside `max(‖f‖, eps)` for zero feature vectors.
pub const L2_EPS: f64 = 1e-8;

/// Slack allowed when a converted coordinate lands just outside the grid.
pub const COORD_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    L2,
    None,
}

/// `(h_A·w_A) × (h_B·w_B)` similarity table. Row `i·w_A + j` holds source
/// cell `(i, j)` against every target cell.
#[derive(Clone, Copy, Debug)]
pub struct CorrelationTensor {
    pub data: Var,
    /// The same values viewed as `h_A × w_A × (h_B·w_B)` for sub-pixel lookup.
    grid: Var,
    pub source: (usize, usize),
    pub target: (usize, usize),
    pub normalization: Normalization,
    /// `1 / (β_A·β_B)`.
    pub applied_scale: f64,
}

/// Similarities between one (sub-pixel) source query and every target cell.
#[derive(Clone, Copy, Debug)]
pub struct ScoreMap {
    /// `h_B × w_B`
    pub data: Var,
    pub query: Point,
    pub height: usize,
    pub width: usize,
}

impl ScoreMap {
    pub fn values<'t>(&self, tape: &'t Tape) -> &'t [f64] {
        tape.value(self.data)
    }
}

/// Flattens one feature map into normalized, temperature-divided rows `[hw × C]`.
fn descriptor_rows(tape: &mut Tape, f: &FeatureMap, normalization: Normalization, beta: Var) -> Result<Var> {
    let flat = tape.reshape(f.data, &[f.channels, f.cells()])?;
    let mut rows = tape.transpose(flat)?;
    if normalization == Normalization::L2 {
        rows = tape.l2_normalize(rows, L2_EPS)?;
    }
    tape.div_by(rows, beta)
}

fn check_beta(tape: &Tape, beta: Var, name: &str) -> Result<f64> {
    if tape.numel(beta) != 1 {
        return Err(Error::Dimension(format!("{name} must be a single value")));
    }
    let b = tape.item(beta);
    if !(b > 0.0) {
        return Err(Error::Domain(format!("{name} must be positive, got {b}")));
    }
    Ok(b)
}

/// `C = (F̂_A / β_A)ᵀ (F̂_B / β_B)`, where `F̂` is the per-cell L2-normalized
/// descriptor (or the raw one under [`Normalization::None`]).
pub fn build_correlation(
    tape: &mut Tape,
    fa: &FeatureMap,
    fb: &FeatureMap,
    normalization: Normalization,
    beta_a: Var,
    beta_b: Var,
) -> Result<CorrelationTensor> {
    if fa.channels != fb.channels {
        return Err(Error::Dimension(format!(
            "channel mismatch: {} vs {}",
            fa.channels, fb.channels
        )));
    }
    let ba = check_beta(tape, beta_a, "beta_a")?;
    let bb = check_beta(tape, beta_b, "beta_b")?;
    let a = descriptor_rows(tape, fa, normalization, beta_a)?;
    let b = descriptor_rows(tape, fb, normalization, beta_b)?;
    let bt = tape.transpose(b)?;
    let data = tape.matmul(a, bt)?;
    let grid = tape.reshape(data, &[fa.height, fa.width, fb.cells()])?;
    Ok(CorrelationTensor {
        data,
        grid,
        source: (fa.height, fa.width),
        target: (fb.height, fb.width),
        normalization,
        applied_scale: 1.0 / (ba * bb),
    })
}

/// Bilinearly samples the rows of `c` at the source-feature point `query`.
pub fn extract_score_map(tape: &mut Tape, c: &CorrelationTensor, query: Point) -> Result<ScoreMap> {
    let sampled = tape.bilinear_sample(c.grid, query.row, query.col)?;
    let data = tape.reshape(sampled, &[c.target.0, c.target.1])?;
    Ok(ScoreMap {
        data,
        query,
        height: c.target.0,
        width: c.target.1,
    })
}

/// Image pixel coordinates to feature-cell coordinates, `(p + 0.5)/r − 0.5`.
///
/// Cell `(k, l)` is centred on the middle of its `r×r` patch. Results more
/// than [`COORD_TOLERANCE`] outside the `grid` are rejected.
pub fn image_to_feature_coords(p: Point, ratio: usize, grid: (usize, usize)) -> Result<Point> {
    if ratio == 0 {
        return Err(Error::Config("ratio must be positive".into()));
    }
    let r = ratio as f64;
    let conv = |v: f64, n: usize, axis: &str| -> Result<f64> {
        let f = (v + 0.5) / r - 0.5;
        let max = (n - 1) as f64;
        if !f.is_finite() || f < -COORD_TOLERANCE || f > max + COORD_TOLERANCE {
            return Err(Error::OutOfRange(format!(
                "image {axis} {v} maps to feature {axis} {f}, outside [0, {max}]"
            )));
        }
        Ok(f.clamp(0.0, max))
    };
    Ok(Point::new(conv(p.row, grid.0, "row")?, conv(p.col, grid.1, "col")?))
}

/// Inverse of [`image_to_feature_coords`]: `(f + 0.5)·r − 0.5`.
pub fn feature_to_image_coords(p: Point, ratio: usize) -> Point {
    let r = ratio as f64;
    Point::new((p.row + 0.5) * r - 0.5, (p.col + 0.5) * r - 0.5)
}
