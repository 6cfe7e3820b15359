#![allow(dead_code)]

pub mod gradcheck;
pub mod oracle;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use simsc_core::autograd::{Tape, Tensor, Var};
use simsc_core::Result;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Largest element-wise `|a − n| / max(|a|, |n|, floor)`.
pub fn rel_err(a: &[f64], n: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), n.len());
    a.iter()
        .zip(n)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Analytic and central-difference gradients of a scalar function of
/// `inputs`, one vector per input.
pub fn grad_check(
    inputs: &[Tensor],
    step: f64,
    build: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let loss = build(&mut tape, &vars).unwrap();
    assert_eq!(tape.numel(loss), 1);
    tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars.iter().map(|v| tape.grad_or_zeros(*v)).collect();

    let eval = |xs: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t)).collect();
        let l = build(&mut tape, &vars).unwrap();
        tape.item(l)
    };
    let mut numeric = Vec::with_capacity(inputs.len());
    let mut xs = inputs.to_vec();
    for i in 0..inputs.len() {
        let mut g = vec![0.0; inputs[i].len()];
        for (j, gj) in g.iter_mut().enumerate() {
            let orig = xs[i].data()[j];
            xs[i].data_mut()[j] = orig + step;
            let up = eval(&xs);
            xs[i].data_mut()[j] = orig - step;
            let down = eval(&xs);
            xs[i].data_mut()[j] = orig;
            *gj = (up - down) / (2.0 * step);
        }
        numeric.push(g);
    }
    (analytic, numeric)
}

/// Reduces any node to a scalar with fixed random weights so every output
/// element contributes a distinct gradient.
pub fn weighted_sum(tape: &mut Tape, v: Var, seed: u64) -> Result<Var> {
    let mut r = rng(seed ^ 0xabcdef);
    let shape = tape.shape(v).to_vec();
    let w = random_tensor(&mut r, &shape, -1.0, 1.0);
    let w = tape.constant(&w);
    let prod = tape.mul(v, w)?;
    tape.sum(prod)
}
