//! Explicit-loop reimplementations compared against the library on random
//! 8×8 instances. Each suite panics on the first mismatch.

use rand::Rng;

use super::{random_tensor, rng};

use simsc_core::autograd::{Tape, Tensor};
use simsc_core::eval::{base_threshold, evaluate, pck, Aggregation, CorrespondenceSet, ThresholdConvention};
use simsc_core::localizer::{kernel_soft_argmax, LocalizerConfig};
use simsc_core::matcher::ScoreMap;
use simsc_core::objective::{cross_entropy, make_gt_distribution, GtDistribution};
use simsc_core::point::Point;

pub const SEEDS: u64 = 60;
pub const TOL: f64 = 1e-10;
const H: usize = 8;
const W: usize = 8;

fn close(name: &str, seed: u64, got: f64, want: f64) {
    assert!(
        (got - want).abs() <= TOL,
        "{name} seed {seed}: library {got} vs oracle {want}"
    );
}

fn naive_softmax(z: &[f64], beta: f64) -> Vec<f64> {
    let mut e = vec![0.0; z.len()];
    let mut total = 0.0;
    for i in 0..z.len() {
        e[i] = (z[i] / beta).exp();
        total += e[i];
    }
    for v in e.iter_mut() {
        *v /= total;
    }
    e
}

fn random_map(r: &mut impl Rng) -> Vec<f64> {
    (0..H * W).map(|_| r.gen_range(-1.0..1.0)).collect()
}

pub fn softmax() {
    for seed in 0..SEEDS {
        let mut r = rng(10_000 + seed);
        let rows = r.gen_range(1..4);
        let z = random_tensor(&mut r, &[rows, H * W], -1.0, 1.0);
        let beta: f64 = r.gen_range(0.02..2.0);
        let mut t = Tape::new();
        let zv = t.constant(&z);
        let y = t.softmax_const(zv, beta).unwrap();
        let got = t.value(y).to_vec();
        for k in 0..rows {
            let want = naive_softmax(&z.data()[k * H * W..(k + 1) * H * W], beta);
            for i in 0..H * W {
                close("softmax", seed, got[k * H * W + i], want[i]);
            }
        }
    }
}

pub fn cross_entropy_loss() {
    for seed in 0..SEEDS {
        let mut r = rng(11_000 + seed);
        let scale: f64 = r.gen_range(1.0..20.0);
        let z: Vec<f64> = random_map(&mut r).iter().map(|v| v * scale).collect();
        let mut target = vec![0.0; H * W];
        let mut total = 0.0;
        for v in target.iter_mut() {
            if r.gen_bool(0.3) {
                *v = r.gen_range(0.0..1.0);
                total += *v;
            }
        }
        if total == 0.0 {
            target[0] = 1.0;
            total = 1.0;
        }
        for v in target.iter_mut() {
            *v /= total;
        }
        let gt = make_gt_distribution(Point::new(3.0, 4.0), (H, W), 3, 5).unwrap();
        let gt = GtDistribution { data: target.clone(), ..gt };

        let mut t = Tape::new();
        let data = t.constant(&Tensor::new(vec![H, W], z.clone()).unwrap());
        let map = ScoreMap {
            data,
            query: Point::new(0.0, 0.0),
            height: H,
            width: W,
        };
        let l = cross_entropy(&mut t, &map, &gt).unwrap();
        let p = naive_softmax(&z, 1.0);
        let mut want = 0.0;
        for i in 0..H * W {
            if target[i] > 0.0 {
                want -= target[i] * p[i].ln();
            }
        }
        close("cross_entropy", seed, t.item(l), want);
    }
}

pub fn gt_distribution() {
    for seed in 0..SEEDS {
        let mut r = rng(12_000 + seed);
        let (n_s, n_k) = [(1, 3), (3, 5), (3, 7), (5, 7)][r.gen_range(0..4)];
        let g = Point::new(r.gen_range(0.0..(H - 1) as f64), r.gen_range(0.0..(W - 1) as f64));
        let got = make_gt_distribution(g, (H, W), n_s, n_k).unwrap();

        let nearest_r = (g.row + 0.5).floor();
        let nearest_c = (g.col + 0.5).floor();
        let half = ((n_s - 1) / 2) as f64;
        let std = ((n_k - 1) / 2) as f64;
        let mut want = vec![0.0; H * W];
        let mut total = 0.0;
        for u in 0..H {
            for v in 0..W {
                let (uf, vf) = (u as f64, v as f64);
                if (uf - nearest_r).abs() <= half && (vf - nearest_c).abs() <= half {
                    let d2 = (uf - g.row).powi(2) + (vf - g.col).powi(2);
                    want[u * W + v] = (-d2 / (2.0 * std * std)).exp();
                    total += want[u * W + v];
                }
            }
        }
        for i in 0..H * W {
            close("gt distribution", seed, got.data[i], want[i] / total);
        }
    }
}

pub fn kernel_soft_argmax_localization() {
    for seed in 0..SEEDS {
        let mut r = rng(13_000 + seed);
        let values = random_map(&mut r);
        let cfg = LocalizerConfig {
            sigma: r.gen_range(0.5..8.0),
            beta_eval: r.gen_range(0.02..1.5),
        };
        let got = kernel_soft_argmax(&values, H, W, &cfg).unwrap();

        let mut best = (0, 0);
        for u in 0..H {
            for v in 0..W {
                if values[u * W + v] > values[best.0 * W + best.1] {
                    best = (u, v);
                }
            }
        }
        let mut masked = vec![0.0; H * W];
        for u in 0..H {
            for v in 0..W {
                let d2 = (u as f64 - best.0 as f64).powi(2) + (v as f64 - best.1 as f64).powi(2);
                masked[u * W + v] = values[u * W + v] * (-d2 / (2.0 * cfg.sigma * cfg.sigma)).exp();
            }
        }
        let p = naive_softmax(&masked, cfg.beta_eval);
        let (mut row, mut col) = (0.0, 0.0);
        for u in 0..H {
            for v in 0..W {
                row += p[u * W + v] * u as f64;
                col += p[u * W + v] * v as f64;
            }
        }
        close("kernel soft-argmax row", seed, got.row, row);
        close("kernel soft-argmax col", seed, got.col, col);
    }
}

fn random_set(r: &mut impl Rng, side: usize) -> (CorrespondenceSet, Vec<Point>) {
    let n = r.gen_range(2..12);
    let max = (side - 1) as f64;
    let mut pairs = Vec::new();
    let mut preds = Vec::new();
    for _ in 0..n {
        let a = Point::new(r.gen_range(0.0..max), r.gen_range(0.0..max));
        let b = Point::new(r.gen_range(0.0..max), r.gen_range(0.0..max));
        let off = r.gen_range(0.0..0.3 * side as f64);
        let ang: f64 = r.gen_range(0.0..std::f64::consts::TAU);
        pairs.push((a, b));
        preds.push(Point::new(b.row + off * ang.sin(), b.col + off * ang.cos()));
    }
    let bbox = Some((r.gen_range(5.0..max), r.gen_range(5.0..max)));
    (
        CorrespondenceSet {
            pairs,
            size_a: (side, side),
            size_b: (side, side),
            bbox_b: bbox,
        },
        preds,
    )
}

fn naive_theta(set: &CorrespondenceSet, conv: ThresholdConvention) -> f64 {
    match conv {
        ThresholdConvention::Img => {
            if set.size_b.0 > set.size_b.1 {
                set.size_b.0 as f64
            } else {
                set.size_b.1 as f64
            }
        }
        ThresholdConvention::Kps => {
            let mut best: f64 = 0.0;
            for (_, p) in &set.pairs {
                for (_, q) in &set.pairs {
                    best = best.max((p.row - q.row).abs()).max((p.col - q.col).abs());
                }
            }
            best
        }
        ThresholdConvention::Bbox => {
            let (h, w) = set.bbox_b.unwrap();
            if h > w {
                h
            } else {
                w
            }
        }
    }
}

fn naive_pck(preds: &[Point], set: &CorrespondenceSet, alpha: f64, theta: f64) -> f64 {
    let mut hits = 0;
    for k in 0..preds.len() {
        let g = set.pairs[k].1;
        let d = ((preds[k].row - g.row).powi(2) + (preds[k].col - g.col).powi(2)).sqrt();
        if d <= alpha * theta {
            hits += 1;
        }
    }
    hits as f64 / preds.len() as f64
}

pub fn pck_metric() {
    let alphas = [0.05, 0.1, 0.15];
    let conventions = [ThresholdConvention::Img, ThresholdConvention::Kps, ThresholdConvention::Bbox];
    for seed in 0..SEEDS {
        let mut r = rng(14_000 + seed);
        let npairs = r.gen_range(1..6);
        let (sets, preds): (Vec<_>, Vec<_>) = (0..npairs).map(|_| random_set(&mut r, 64)).unzip();
        for conv in conventions {
            let res = evaluate(&preds, &sets, &alphas, conv, Aggregation::MeanOverPairs).unwrap();
            let res_kp = evaluate(&preds, &sets, &alphas, conv, Aggregation::MeanOverKeypoints).unwrap();
            for (a, &alpha) in alphas.iter().enumerate() {
                let mut mean = 0.0;
                let (mut hits, mut total) = (0.0, 0.0);
                for (set, p) in sets.iter().zip(&preds) {
                    let theta = naive_theta(set, conv);
                    close("theta", seed, base_threshold(set, conv).unwrap(), theta);
                    let want = naive_pck(p, set, alpha, theta);
                    close("pck", seed, pck(p, set, alpha, theta).unwrap(), want);
                    mean += want;
                    hits += want * p.len() as f64;
                    total += p.len() as f64;
                }
                close("pck mean over pairs", seed, res.per_alpha[a], mean / npairs as f64);
                close("pck mean over keypoints", seed, res_kp.per_alpha[a], hits / total);
            }
        }
    }
}
