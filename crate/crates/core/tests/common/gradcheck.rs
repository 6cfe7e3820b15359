//! Central finite differences against the tape's backward pass. Each suite
//! panics on the first mismatch.

use super::{grad_check, random_tensor, rel_err, rng, weighted_sum};
use rand::Rng;

use simsc_core::autograd::{Tape, Tensor, Var};
use simsc_core::backbone::{extract_features, BackboneConfig, BackboneParams, BackboneVars, Image};
use simsc_core::matcher::{build_correlation, extract_score_map, Normalization};
use simsc_core::objective::{cross_entropy, make_gt_distribution, temperature_regularizer, total_loss};
use simsc_core::point::Point;
use simsc_core::temperature::{effective_temperature, TemperatureVars};
use simsc_core::Result;

pub const SEEDS: u64 = 100;
const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;
/// Smaller probe for the full network, whose many ReLUs make kinks likelier.
const COMPOSED_STEP: f64 = 1e-6;
const FLOOR: f64 = 1e-4;

fn check(name: &str, seed: u64, inputs: &[Tensor], build: impl Fn(&mut Tape, &[Var]) -> Result<Var>) {
    check_with_step(name, seed, inputs, STEP, build)
}

fn check_with_step(name: &str, seed: u64, inputs: &[Tensor], step: f64, build: impl Fn(&mut Tape, &[Var]) -> Result<Var>) {
    let (a, n) = grad_check(inputs, step, build);
    for (i, (ai, ni)) in a.iter().zip(&n).enumerate() {
        let e = rel_err(ai, ni, FLOOR);
        assert!(e < TOL, "{name} seed {seed} input {i}: rel err {e:e}\n analytic {ai:?}\n numeric {ni:?}");
    }
}

/// Values bounded away from `0` so a ±STEP probe never crosses a kink.
fn away_from_zero(r: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = r.gen_range(0.05..2.0);
            if r.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

pub fn binary_ops() {
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        let (m, k, n) = (r.gen_range(1..5), r.gen_range(1..5), r.gen_range(1..5));
        let a = random_tensor(&mut r, &[m, k], -2.0, 2.0);
        let b = random_tensor(&mut r, &[k, n], -2.0, 2.0);
        check("matmul", seed, &[a.clone(), b], |t, v| {
            let y = t.matmul(v[0], v[1])?;
            weighted_sum(t, y, seed)
        });

        let c = random_tensor(&mut r, &[m, k], -2.0, 2.0);
        check("add/sub/mul", seed, &[a.clone(), c], |t, v| {
            let s = t.add(v[0], v[1])?;
            let d = t.sub(v[0], v[1])?;
            let p = t.mul(s, d)?;
            weighted_sum(t, p, seed)
        });

        let bias = random_tensor(&mut r, &[k], -1.0, 1.0);
        check("add_row", seed, &[a.clone(), bias], |t, v| {
            let y = t.add_row(v[0], v[1])?;
            weighted_sum(t, y, seed)
        });

        let s = random_tensor(&mut r, &[1], 0.2, 2.0);
        check("div_by", seed, &[a.clone(), s], |t, v| {
            let y = t.div_by(v[0], v[1])?;
            weighted_sum(t, y, seed)
        });

        let (sa, sm) = (r.gen_range(-2.0..2.0), r.gen_range(-2.0..2.0));
        let sd = r.gen_range(0.3..3.0);
        check("scalar ops", seed, &[a], |t, v| {
            let y = t.add_scalar(v[0], sa)?;
            let y = t.mul_scalar(y, sm)?;
            let y = t.div_scalar(y, sd)?;
            weighted_sum(t, y, seed)
        });
    }
}

pub fn unary_ops() {
    for seed in 0..SEEDS {
        let mut r = rng(1000 + seed);
        let n = r.gen_range(1..8);
        let x = random_tensor(&mut r, &[n], -2.0, 2.0);
        check("exp", seed, &[x.clone()], |t, v| {
            let y = t.exp(v[0])?;
            weighted_sum(t, y, seed)
        });
        check("sigmoid", seed, &[x.clone()], |t, v| {
            let y = t.sigmoid(v[0])?;
            weighted_sum(t, y, seed)
        });
        let pos = random_tensor(&mut r, &[n], 0.1, 3.0);
        check("log", seed, &[pos], |t, v| {
            let y = t.log(v[0])?;
            weighted_sum(t, y, seed)
        });
        let kinked = away_from_zero(&mut r, &[n]);
        check("relu", seed, &[kinked.clone()], |t, v| {
            let y = t.relu(v[0])?;
            weighted_sum(t, y, seed)
        });
        check("clamp", seed, &[kinked], |t, v| {
            let y = t.clamp(v[0], -0.01, 0.01)?;
            let z = t.clamp(v[0], -3.0, 3.0)?;
            let s = t.add(y, z)?;
            weighted_sum(t, s, seed)
        });
        check("sum/mean", seed, &[x], |t, v| {
            let w = weighted_sum(t, v[0], seed)?;
            let m = t.mean(v[0])?;
            let s = t.sum(v[0])?;
            let ms = t.mul(m, s)?;
            t.add(w, ms)
        });
    }
}

pub fn shape_ops() {
    for seed in 0..SEEDS {
        let mut r = rng(2000 + seed);
        let (c, h, w) = (r.gen_range(1..4), r.gen_range(1..4), r.gen_range(1..4));
        let x = random_tensor(&mut r, &[c, h, w], -2.0, 2.0);
        check("gap", seed, &[x.clone()], |t, v| {
            let y = t.global_average_pool(v[0])?;
            weighted_sum(t, y, seed)
        });
        check("reshape/transpose", seed, &[x], |t, v| {
            let y = t.reshape(v[0], &[c, h * w])?;
            let y = t.transpose(y)?;
            weighted_sum(t, y, seed)
        });
    }
}

pub fn softmax_and_normalize() {
    for seed in 0..SEEDS {
        let mut r = rng(3000 + seed);
        let (m, n) = (r.gen_range(1..4), r.gen_range(1..10));
        let z = random_tensor(&mut r, &[m, n], -2.0, 2.0);
        let beta = random_tensor(&mut r, &[1], 0.2, 2.0);
        check("softmax", seed, &[z.clone(), beta], |t, v| {
            let y = t.softmax(v[0], v[1])?;
            weighted_sum(t, y, seed)
        });
        let bc = r.gen_range(0.05..1.5);
        check("softmax_const", seed, &[z.clone()], |t, v| {
            let y = t.softmax_const(v[0], bc)?;
            weighted_sum(t, y, seed)
        });
        check("l2_normalize", seed, &[z], |t, v| {
            let y = t.l2_normalize(v[0], 1e-8)?;
            weighted_sum(t, y, seed)
        });
    }
}

pub fn sampling_and_cross_entropy() {
    for seed in 0..SEEDS {
        let mut r = rng(4000 + seed);
        let (h, w, d) = (r.gen_range(2..6), r.gen_range(2..6), r.gen_range(1..5));
        let grid = random_tensor(&mut r, &[h, w, d], -2.0, 2.0);
        let (row, col) = (r.gen_range(0.0..(h - 1) as f64), r.gen_range(0.0..(w - 1) as f64));
        check("bilinear_sample", seed, &[grid], |t, v| {
            let y = t.bilinear_sample(v[0], row, col)?;
            weighted_sum(t, y, seed)
        });

        let n = r.gen_range(2..20);
        let logits = random_tensor(&mut r, &[n], -3.0, 3.0);
        let raw: Vec<f64> = (0..n).map(|_| r.gen_range(0.0..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let target: Vec<f64> = raw.iter().map(|x| x / total).collect();
        check("cross_entropy", seed, &[logits], |t, v| t.cross_entropy(v[0], &target));
    }
}

/// Backbone size used for the composed-loss checks.
fn tiny_config() -> BackboneConfig {
    BackboneConfig {
        in_channels: 1,
        ratio: 4,
        embed_dim: 6,
        width: 5,
        depth: 2,
    }
}

/// Initialized weights with positive random biases, so no cell of these
/// narrow nets ends up as an exact zero vector (where L2 normalization jumps).
fn backbone_tensors(cfg: &BackboneConfig, seed: u64, r: &mut impl Rng) -> Vec<Tensor> {
    let params = BackboneParams::init(cfg.clone(), seed).unwrap();
    params
        .tensors()
        .into_iter()
        .enumerate()
        .map(|(i, t)| {
            if i % 2 == 1 {
                Tensor::new(t.shape().to_vec(), (0..t.len()).map(|_| r.gen_range(0.05..0.5)).collect()).unwrap()
            } else {
                t.clone()
            }
        })
        .collect()
}

fn random_image(r: &mut impl Rng, side: usize) -> Image {
    Image::new(1, side, side, (0..side * side).map(|_| r.gen_range(0.0..1.0)).collect()).unwrap()
}

pub fn composed_total_loss() {
    let cfg = tiny_config();
    let grid = (4, 4);
    for seed in 0..SEEDS {
        let mut r = rng(5000 + seed);
        let c = cfg.width;
        let base = backbone_tensors(&cfg, seed, &mut r);
        let mut inputs = base.clone();
        let nb = inputs.len();
        inputs.push(random_tensor(&mut r, &[c, c], -0.8, 0.8));
        inputs.push(random_tensor(&mut r, &[c], -0.5, 0.5));
        inputs.push(random_tensor(&mut r, &[c, 1], -0.5, 0.5));
        let norm = if seed % 4 == 3 { Normalization::None } else { Normalization::L2 };
        // raw dot products are large, so keep their temperature moderate
        let b2 = if norm == Normalization::L2 { (-2.5, 0.5) } else { (0.5, 3.0) };
        inputs.push(random_tensor(&mut r, &[1], b2.0, b2.1));
        let img_a = random_image(&mut r, 16);
        let img_b = random_image(&mut r, 16);
        let queries: Vec<(Point, Point)> = (0..3)
            .map(|_| {
                (
                    Point::new(r.gen_range(0.0..3.0), r.gen_range(0.0..3.0)),
                    Point::new(r.gen_range(0.0..3.0), r.gen_range(0.0..3.0)),
                )
            })
            .collect();
        let gamma = r.gen_range(0.0..0.5);
        let build = |t: &mut Tape, v: &[Var]| -> Result<Var> {
            let bvars = BackboneVars {
                config: cfg.clone(),
                vars: v[..nb].to_vec(),
            };
            let tvars = TemperatureVars::Mlp {
                w1: v[nb],
                b1: v[nb + 1],
                w2: v[nb + 2],
                b2: v[nb + 3],
            };
            let fa = extract_features(t, &img_a, &bvars)?;
            let fb = extract_features(t, &img_b, &bvars)?;
            // the temperature module sees detached features, so probes of the
            // backbone must not move its input either
            let frozen = BackboneVars {
                config: cfg.clone(),
                vars: base.iter().map(|p| t.constant(p)).collect(),
            };
            let fa0 = extract_features(t, &img_a, &frozen)?;
            let fb0 = extract_features(t, &img_b, &frozen)?;
            let (ba, bb) = effective_temperature(t, &tvars, &fa0, &fb0)?;
            let corr = build_correlation(t, &fa, &fb, norm, ba, bb)?;
            let mut ce = None;
            for (q, g) in &queries {
                let m = extract_score_map(t, &corr, *q)?;
                let gt = make_gt_distribution(*g, grid, 3, 5)?;
                let l = cross_entropy(t, &m, &gt)?;
                ce = Some(match ce {
                    None => l,
                    Some(acc) => t.add(acc, l)?,
                });
            }
            let ce = t.div_scalar(ce.unwrap(), queries.len() as f64)?;
            let ra = temperature_regularizer(t, ba, 0.1)?;
            let rb = temperature_regularizer(t, bb, 0.1)?;
            let reg = t.add(ra, rb)?;
            total_loss(t, ce, reg, gamma)
        };
        check_with_step("total loss", seed, &inputs, COMPOSED_STEP, build);
    }
}

pub fn composed_loss_single_parameter() {
    let cfg = tiny_config();
    for seed in 0..SEEDS {
        let mut r = rng(6000 + seed);
        let mut inputs = backbone_tensors(&cfg, seed, &mut r);
        let nb = inputs.len();
        inputs.push(random_tensor(&mut r, &[1], 0.25, 1.0));
        let img_a = random_image(&mut r, 16);
        let img_b = random_image(&mut r, 16);
        let q = Point::new(r.gen_range(0.0..3.0), r.gen_range(0.0..3.0));
        let g = Point::new(r.gen_range(0.0..3.0), r.gen_range(0.0..3.0));
        let build = |t: &mut Tape, v: &[Var]| -> Result<Var> {
            let bvars = BackboneVars {
                config: cfg.clone(),
                vars: v[..nb].to_vec(),
            };
            let tvars = TemperatureVars::Single(v[nb]);
            let fa = extract_features(t, &img_a, &bvars)?;
            let fb = extract_features(t, &img_b, &bvars)?;
            let (ba, bb) = effective_temperature(t, &tvars, &fa, &fb)?;
            let corr = build_correlation(t, &fa, &fb, Normalization::L2, ba, bb)?;
            let m = extract_score_map(t, &corr, q)?;
            let gt = make_gt_distribution(g, (4, 4), 3, 5)?;
            let ce = cross_entropy(t, &m, &gt)?;
            let ra = temperature_regularizer(t, ba, 0.1)?;
            let rb = temperature_regularizer(t, bb, 0.1)?;
            let reg = t.add(ra, rb)?;
            total_loss(t, ce, reg, 0.2)
        };
        check_with_step("single-param loss", seed, &inputs, COMPOSED_STEP, build);
    }
}
