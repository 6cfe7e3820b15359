//! Percentage of correct keypoints.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::point::Point;

/// Keypoint pairs of one image pair, in image pixel coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrespondenceSet {
    pub pairs: Vec<(Point, Point)>,
    /// `(H, W)` of image A.
    pub size_a: (usize, usize),
    /// `(H, W)` of image B.
    pub size_b: (usize, usize),
    /// `(h, w)` of the object box in image B.
    pub bbox_b: Option<(f64, f64)>,
}

impl CorrespondenceSet {
    pub fn validate(&self) -> Result<()> {
        if self.pairs.is_empty() {
            return Err(Error::Domain("correspondence set is empty".into()));
        }
        let inside = |p: &Point, (h, w): (usize, usize)| {
            p.row >= 0.0 && p.col >= 0.0 && p.row <= (h - 1) as f64 && p.col <= (w - 1) as f64
        };
        for (a, b) in &self.pairs {
            if !inside(a, self.size_a) || !inside(b, self.size_b) {
                return Err(Error::OutOfRange(format!(
                    "keypoint pair {a:?} -> {b:?} outside its image"
                )));
            }
        }
        Ok(())
    }

    pub fn targets(&self) -> impl Iterator<Item = Point> + '_ {
        self.pairs.iter().map(|(_, b)| *b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdConvention {
    /// `max(H_B, W_B)`
    Img,
    /// Largest extent of the target keypoints.
    Kps,
    /// `max(h_bbox, w_bbox)`
    Bbox,
}

impl std::str::FromStr for ThresholdConvention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "img" => Ok(Self::Img),
            "kps" => Ok(Self::Kps),
            "bbox" => Ok(Self::Bbox),
            other => Err(Error::Config(format!("unknown threshold convention {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    MeanOverPairs,
    MeanOverKeypoints,
}

pub fn base_threshold(set: &CorrespondenceSet, convention: ThresholdConvention) -> Result<f64> {
    match convention {
        ThresholdConvention::Img => Ok(set.size_b.0.max(set.size_b.1) as f64),
        ThresholdConvention::Kps => {
            if set.pairs.is_empty() {
                return Err(Error::Domain("kps threshold needs at least one keypoint".into()));
            }
            let (mut rmin, mut rmax, mut cmin, mut cmax) =
                (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
            for p in set.targets() {
                rmin = rmin.min(p.row);
                rmax = rmax.max(p.row);
                cmin = cmin.min(p.col);
                cmax = cmax.max(p.col);
            }
            Ok((rmax - rmin).max(cmax - cmin))
        }
        ThresholdConvention::Bbox => match set.bbox_b {
            Some((h, w)) => Ok(h.max(w)),
            None => Err(Error::Config("bbox threshold requested but the pair has no bbox".into())),
        },
    }
}

/// Fraction of predictions within `α·θ` of the ground truth (inclusive).
pub fn pck(preds: &[Point], set: &CorrespondenceSet, alpha: f64, theta: f64) -> Result<f64> {
    Ok(correct_count(preds, set, alpha, theta)? as f64 / preds.len() as f64)
}

fn correct_count(preds: &[Point], set: &CorrespondenceSet, alpha: f64, theta: f64) -> Result<usize> {
    if preds.len() != set.pairs.len() {
        return Err(Error::Dimension(format!(
            "{} predictions for {} keypoints",
            preds.len(),
            set.pairs.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Domain("no keypoints to score".into()));
    }
    if !(alpha > 0.0) || !(theta > 0.0) {
        return Err(Error::Domain(format!(
            "alpha and theta must be positive, got {alpha} and {theta}"
        )));
    }
    let bound = alpha * theta;
    Ok(preds
        .iter()
        .zip(set.targets())
        .filter(|(p, gt)| p.distance(*gt) <= bound)
        .count())
}

/// Per-α summary over a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PckResult {
    pub convention: ThresholdConvention,
    pub alphas: Vec<f64>,
    pub per_alpha: Vec<f64>,
    /// `per_pair[i][a]`: PCK of pair `i` at `alphas[a]`.
    pub per_pair: Vec<Vec<f64>>,
}

/// Scores every pair at every α and averages according to `mode`.
pub fn evaluate(
    preds: &[Vec<Point>],
    sets: &[CorrespondenceSet],
    alphas: &[f64],
    convention: ThresholdConvention,
    mode: Aggregation,
) -> Result<PckResult> {
    if preds.len() != sets.len() {
        return Err(Error::Dimension(format!(
            "{} prediction lists for {} pairs",
            preds.len(),
            sets.len()
        )));
    }
    if sets.is_empty() {
        return Err(Error::Domain("cannot aggregate an empty dataset".into()));
    }
    let mut per_pair = Vec::with_capacity(sets.len());
    let mut hits = vec![0usize; alphas.len()];
    let mut keypoints = 0usize;
    for (p, set) in preds.iter().zip(sets) {
        let theta = base_threshold(set, convention)?;
        let mut row = Vec::with_capacity(alphas.len());
        for (a, &alpha) in alphas.iter().enumerate() {
            let n = correct_count(p, set, alpha, theta)?;
            hits[a] += n;
            row.push(n as f64 / p.len() as f64);
        }
        keypoints += p.len();
        per_pair.push(row);
    }
    let per_alpha = match mode {
        Aggregation::MeanOverPairs => aggregate(&per_pair)?,
        Aggregation::MeanOverKeypoints => hits.iter().map(|h| *h as f64 / keypoints as f64).collect(),
    };
    Ok(PckResult {
        convention,
        alphas: alphas.to_vec(),
        per_alpha,
        per_pair,
    })
}

/// Arithmetic mean of per-pair PCK rows, column by column.
pub fn aggregate(per_pair: &[Vec<f64>]) -> Result<Vec<f64>> {
    let Some(first) = per_pair.first() else {
        return Err(Error::Domain("cannot aggregate an empty dataset".into()));
    };
    let mut sums = vec![0.0; first.len()];
    for row in per_pair {
        if row.len() != sums.len() {
            return Err(Error::Dimension("ragged per-pair PCK table".into()));
        }
        for (s, v) in sums.iter_mut().zip(row) {
            *s += v;
        }
    }
    Ok(sums.into_iter().map(|s| s / per_pair.len() as f64).collect())
}
