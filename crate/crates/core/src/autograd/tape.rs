// Reverse-mode differentiation over a linear tape.
//
// Nodes are appended in evaluation order, so node ids are already a
// topological order and backward is a single reverse sweep.

use super::kernels;
use super::tensor::{check_shape, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Counters for numerically questionable events seen during a forward pass.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Diagnostics {
    /// Probabilities that underflowed below the cross-entropy clamp where the
    /// target still had mass.
    pub ce_underflows: usize,
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Detach,
    Matmul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddRow { a: Var, bias: Var, cols: usize },
    AddScalar { a: Var },
    MulScalar { a: Var, s: f64 },
    DivByVar { a: Var, s: Var },
    Exp { a: Var },
    Log { a: Var },
    Relu { a: Var },
    Sigmoid { a: Var },
    Clamp { a: Var, lo: f64, hi: f64 },
    Sum { a: Var },
    Mean { a: Var },
    GlobalAvgPool { a: Var, channels: usize, spatial: usize },
    Reshape { a: Var },
    Transpose { a: Var, rows: usize, cols: usize },
    Softmax { z: Var, beta: Var, n: usize },
    L2Normalize { a: Var, n: usize, norms: Vec<f64>, eps: f64 },
    BilinearSample { grid: Var, taps: [(usize, f64); 4], depth: usize },
    CrossEntropy { logits: Var, target: Vec<f64>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Dynamic computation graph. Build a fresh tape for every step.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    diagnostics: Diagnostics,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn diagnostics(&self) -> &Diagnostics {
        &self.diagnostics
    }

    pub(crate) fn diagnostics_mut(&mut self) -> &mut Diagnostics {
        &mut self.diagnostics
    }

    /// Records a leaf that gradients flow into.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.leaf(t.clone(), true)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.leaf(t.clone(), false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.leaf(Tensor::scalar(value), false)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        let shape = t.shape().to_vec();
        self.nodes.push(Node {
            shape,
            data: t.into_data(),
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].data
    }

    /// The single value of a one-element tensor.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].data[0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn numel(&self, v: Var) -> usize {
        self.nodes[v.0].data.len()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.data.clone()).expect("tape nodes keep consistent shapes")
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Gradient of `v`, or zeros when nothing flowed into it.
    pub fn grad_or_zeros(&self, v: Var) -> Vec<f64> {
        match &self.nodes[v.0].grad {
            Some(g) => g.clone(),
            None => vec![0.0; self.nodes[v.0].data.len()],
        }
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    pub(crate) fn push(
        &mut self,
        shape: Vec<usize>,
        data: Vec<f64>,
        op: Op,
        inputs: &[Var],
        name: &'static str,
    ) -> Result<Var> {
        check_shape(&shape)?;
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad =
            !matches!(op, Op::Detach) && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            shape,
            data,
            grad: None,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Back-propagates from a one-element `loss`, accumulating into `grad`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::Dimension(format!(
                "backward needs a one-element loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        // Interior gradients are recomputed on every call; only leaves accumulate.
        for node in &mut self.nodes[..=loss.0] {
            if !matches!(node.op, Op::Leaf) {
                node.grad = None;
            }
        }
        let seed = &mut self.nodes[loss.0];
        match &mut seed.grad {
            Some(g) => g[0] += 1.0,
            None => seed.grad = Some(vec![1.0]),
        }
        for idx in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(idx);
            let node = &rest[0];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = node.grad.as_deref() else {
                continue;
            };
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { op: "backward" });
            }
            propagate(before, node, g);
        }
        Ok(())
    }
}

fn accumulate(nodes: &mut [Node], v: Var) -> Option<&mut Vec<f64>> {
    let node = &mut nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    let len = node.data.len();
    Some(node.grad.get_or_insert_with(|| vec![0.0; len]))
}

fn propagate(nodes: &mut [Node], node: &Node, g: &[f64]) {
    let y = &node.data;
    match &node.op {
        Op::Leaf | Op::Detach => {}
        Op::Matmul { a, b, m, k, n } => {
            if nodes[a.0].requires_grad {
                let bd = nodes[b.0].data.clone();
                let ga = accumulate(nodes, *a).unwrap();
                kernels::matmul_nt_acc(g, &bd, ga, *m, *n, *k);
            }
            if nodes[b.0].requires_grad {
                let ad = nodes[a.0].data.clone();
                let gb = accumulate(nodes, *b).unwrap();
                kernels::matmul_tn_acc(&ad, g, gb, *m, *k, *n);
            }
        }
        Op::Add { a, b } => {
            for v in [*a, *b] {
                if let Some(gv) = accumulate(nodes, v) {
                    add_into(gv, g);
                }
            }
        }
        Op::Sub { a, b } => {
            if let Some(ga) = accumulate(nodes, *a) {
                add_into(ga, g);
            }
            if let Some(gb) = accumulate(nodes, *b) {
                for (d, s) in gb.iter_mut().zip(g) {
                    *d -= s;
                }
            }
        }
        Op::Mul { a, b } => {
            if nodes[a.0].requires_grad {
                let bd = nodes[b.0].data.clone();
                let ga = accumulate(nodes, *a).unwrap();
                for ((d, s), o) in ga.iter_mut().zip(g).zip(&bd) {
                    *d += s * o;
                }
            }
            if nodes[b.0].requires_grad {
                let ad = nodes[a.0].data.clone();
                let gb = accumulate(nodes, *b).unwrap();
                for ((d, s), o) in gb.iter_mut().zip(g).zip(&ad) {
                    *d += s * o;
                }
            }
        }
        Op::AddRow { a, bias, cols } => {
            if let Some(ga) = accumulate(nodes, *a) {
                add_into(ga, g);
            }
            if let Some(gb) = accumulate(nodes, *bias) {
                for row in g.chunks_exact(*cols) {
                    add_into(gb, row);
                }
            }
        }
        Op::AddScalar { a } | Op::Reshape { a } => {
            if let Some(ga) = accumulate(nodes, *a) {
                add_into(ga, g);
            }
        }
        Op::MulScalar { a, s } => {
            if let Some(ga) = accumulate(nodes, *a) {
                for (d, v) in ga.iter_mut().zip(g) {
                    *d += s * v;
                }
            }
        }
        Op::DivByVar { a, s } => {
            let sv = nodes[s.0].data[0];
            if nodes[s.0].requires_grad {
                // d(a/s)/ds = -a/s^2 = -y/s
                let ds: f64 = g.iter().zip(y).map(|(gi, yi)| gi * yi).sum::<f64>() / sv;
                accumulate(nodes, *s).unwrap()[0] -= ds;
            }
            if let Some(ga) = accumulate(nodes, *a) {
                for (d, v) in ga.iter_mut().zip(g) {
                    *d += v / sv;
                }
            }
        }
        Op::Exp { a } => {
            if let Some(ga) = accumulate(nodes, *a) {
                for ((d, s), o) in ga.iter_mut().zip(g).zip(y) {
                    *d += s * o;
                }
            }
        }
        Op::Log { a } => {
            if nodes[a.0].requires_grad {
                let ad = nodes[a.0].data.clone();
                let ga = accumulate(nodes, *a).unwrap();
                for ((d, s), x) in ga.iter_mut().zip(g).zip(&ad) {
                    *d += s / x;
                }
            }
        }
        Op::Relu { a } => {
            if nodes[a.0].requires_grad {
                let ad = nodes[a.0].data.clone();
                let ga = accumulate(nodes, *a).unwrap();
                for ((d, s), x) in ga.iter_mut().zip(g).zip(&ad) {
                    if *x > 0.0 {
                        *d += s;
                    }
                }
            }
        }
        Op::Sigmoid { a } => {
            if let Some(ga) = accumulate(nodes, *a) {
                for ((d, s), o) in ga.iter_mut().zip(g).zip(y) {
                    *d += s * o * (1.0 - o);
                }
            }
        }
        Op::Clamp { a, lo, hi } => {
            if nodes[a.0].requires_grad {
                let ad = nodes[a.0].data.clone();
                let ga = accumulate(nodes, *a).unwrap();
                for ((d, s), x) in ga.iter_mut().zip(g).zip(&ad) {
                    if *x >= *lo && *x <= *hi {
                        *d += s;
                    }
                }
            }
        }
        Op::Sum { a } => {
            if let Some(ga) = accumulate(nodes, *a) {
                for d in ga.iter_mut() {
                    *d += g[0];
                }
            }
        }
        Op::Mean { a } => {
            if let Some(ga) = accumulate(nodes, *a) {
                let scale = g[0] / ga.len() as f64;
                for d in ga.iter_mut() {
                    *d += scale;
                }
            }
        }
        Op::GlobalAvgPool { a, channels, spatial } => {
            if let Some(ga) = accumulate(nodes, *a) {
                for c in 0..*channels {
                    let share = g[c] / *spatial as f64;
                    for d in &mut ga[c * spatial..(c + 1) * spatial] {
                        *d += share;
                    }
                }
            }
        }
        Op::Transpose { a, rows, cols } => {
            if let Some(ga) = accumulate(nodes, *a) {
                for i in 0..*rows {
                    for j in 0..*cols {
                        ga[i * cols + j] += g[j * rows + i];
                    }
                }
            }
        }
        Op::Softmax { z, beta, n } => {
            let b = nodes[beta.0].data[0];
            if nodes[beta.0].requires_grad {
                // dy_i/db = -(1/b^2) y_i (z_i - sum_j y_j z_j)
                let zd = &nodes[z.0].data;
                let mut db = 0.0;
                for ((zr, yr), gr) in zd.chunks_exact(*n).zip(y.chunks_exact(*n)).zip(g.chunks_exact(*n)) {
                    let zbar: f64 = zr.iter().zip(yr).map(|(a, p)| a * p).sum();
                    db += gr
                        .iter()
                        .zip(yr)
                        .zip(zr)
                        .map(|((gi, yi), zi)| gi * yi * (zi - zbar))
                        .sum::<f64>();
                }
                accumulate(nodes, *beta).unwrap()[0] -= db / (b * b);
            }
            if let Some(gz) = accumulate(nodes, *z) {
                for ((dr, yr), gr) in gz.chunks_exact_mut(*n).zip(y.chunks_exact(*n)).zip(g.chunks_exact(*n)) {
                    let gy: f64 = gr.iter().zip(yr).map(|(a, p)| a * p).sum();
                    for ((d, yi), gi) in dr.iter_mut().zip(yr).zip(gr) {
                        *d += yi * (gi - gy) / b;
                    }
                }
            }
        }
        Op::L2Normalize { a, n, norms, eps } => {
            if let Some(ga) = accumulate(nodes, *a) {
                for (((dr, yr), gr), norm) in ga
                    .chunks_exact_mut(*n)
                    .zip(y.chunks_exact(*n))
                    .zip(g.chunks_exact(*n))
                    .zip(norms)
                {
                    if *norm > *eps {
                        let gy: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for ((d, yi), gi) in dr.iter_mut().zip(yr).zip(gr) {
                            *d += (gi - yi * gy) / norm;
                        }
                    } else {
                        for (d, gi) in dr.iter_mut().zip(gr) {
                            *d += gi / eps;
                        }
                    }
                }
            }
        }
        Op::BilinearSample { grid, taps, depth } => {
            if let Some(gg) = accumulate(nodes, *grid) {
                for &(cell, w) in taps {
                    if w == 0.0 {
                        continue;
                    }
                    for (d, s) in gg[cell * depth..(cell + 1) * depth].iter_mut().zip(g) {
                        *d += w * s;
                    }
                }
            }
        }
        Op::CrossEntropy { logits, target, probs } => {
            if let Some(gl) = accumulate(nodes, *logits) {
                let mass: f64 = target.iter().sum();
                for ((d, p), t) in gl.iter_mut().zip(probs).zip(target) {
                    *d += g[0] * (p * mass - t);
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
