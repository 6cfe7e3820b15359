use super::kernels;
use super::tape::{Op, Tape, Var};
use crate::error::{Error, Result};

/// Probabilities below this are clamped before taking the log in
/// [`Tape::cross_entropy`].
pub const CE_PROB_FLOOR: f64 = 1e-300;

impl Tape {
    fn same_shape(&self, a: Var, b: Var, op: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn matrix_dims(&self, v: Var, op: &str) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Dimension(format!("{op}: expected a matrix, got shape {s:?}"))),
        }
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op, name: &'static str) -> Result<Var> {
        let data = self.value(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, data, op, &[a], name)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul: inner dimensions {m}x{k} and {k2}x{n} do not match"
            )));
        }
        let data = kernels::matmul(self.value(a), self.value(b), m, k, n);
        self.push(vec![m, n], data, Op::Matmul { a, b, m, k, n }, &[a, b], "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, data, Op::Add { a, b }, &[a, b], "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let data = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x - y).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, data, Op::Sub { a, b }, &[a, b], "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, data, Op::Mul { a, b }, &[a, b], "mul")
    }

    /// `a[m×n] + bias[n]`, broadcasting the bias over rows.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, cols) = self.matrix_dims(a, "add_row")?;
        if self.numel(bias) != cols {
            return Err(Error::Dimension(format!(
                "add_row: bias of {} values for {cols} columns",
                self.numel(bias)
            )));
        }
        let bv = self.value(bias);
        let data = self
            .value(a)
            .chunks_exact(cols)
            .flat_map(|row| row.iter().zip(bv).map(|(x, b)| x + b))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, data, Op::AddRow { a, bias, cols }, &[a, bias], "add_row")
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.map(a, |x| x + s, Op::AddScalar { a }, "add_scalar")
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.map(a, |x| x * s, Op::MulScalar { a, s }, "mul_scalar")
    }

    pub fn div_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        if s == 0.0 {
            return Err(Error::Domain("div_scalar: division by zero".into()));
        }
        self.map(a, |x| x / s, Op::MulScalar { a, s: 1.0 / s }, "div_scalar")
    }

    /// Divides every element of `a` by the one-element tensor `s`.
    pub fn div_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.numel(s) != 1 {
            return Err(Error::Dimension("div_by: divisor must have one element".into()));
        }
        let sv = self.item(s);
        if sv == 0.0 {
            return Err(Error::Domain("div_by: division by zero".into()));
        }
        self.map(a, |x| x / sv, Op::DivByVar { a, s }, "div_by")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.map(a, f64::exp, Op::Exp { a }, "exp")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some(x) = self.value(a).iter().find(|&&x| x <= 0.0) {
            return Err(Error::Domain(format!("log of non-positive value {x}")));
        }
        self.map(a, f64::ln, Op::Log { a }, "log")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map(a, |x| x.max(0.0), Op::Relu { a }, "relu")
    }

    /// Standard increasing logistic `1 / (1 + e^{-x})`.
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.map(a, logistic, Op::Sigmoid { a }, "sigmoid")
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(Error::Domain(format!("clamp: empty interval [{lo}, {hi}]")));
        }
        self.map(a, |x| x.clamp(lo, hi), Op::Clamp { a, lo, hi }, "clamp")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().sum();
        self.push(vec![1], vec![s], Op::Sum { a }, &[a], "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.numel(a) as f64;
        let s = self.value(a).iter().sum::<f64>() / n;
        self.push(vec![1], vec![s], Op::Mean { a }, &[a], "mean")
    }

    /// Averages a `C×h×w` map over its spatial positions, giving `[C]`.
    pub fn global_average_pool(&mut self, a: Var) -> Result<Var> {
        let (channels, spatial) = match self.shape(a) {
            [c, h, w] => (*c, h * w),
            s => {
                return Err(Error::Dimension(format!(
                    "global_average_pool: expected C×h×w, got {s:?}"
                )))
            }
        };
        let data = self
            .value(a)
            .chunks_exact(spatial)
            .map(|ch| ch.iter().sum::<f64>() / spatial as f64)
            .collect();
        self.push(vec![channels], data, Op::GlobalAvgPool { a, channels, spatial }, &[a], "global_average_pool")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.numel(a) {
            return Err(Error::Dimension(format!(
                "reshape: cannot view {:?} as {shape:?}",
                self.shape(a)
            )));
        }
        let data = self.value(a).to_vec();
        self.push(shape.to_vec(), data, Op::Reshape { a }, &[a], "reshape")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (rows, cols) = self.matrix_dims(a, "transpose")?;
        let src = self.value(a);
        let mut data = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                data[j * rows + i] = src[i * cols + j];
            }
        }
        self.push(vec![cols, rows], data, Op::Transpose { a, rows, cols }, &[a], "transpose")
    }

    /// Passes values through unchanged and stops gradients.
    pub fn detach(&mut self, a: Var) -> Result<Var> {
        let data = self.value(a).to_vec();
        let shape = self.shape(a).to_vec();
        self.push(shape, data, Op::Detach, &[a], "detach")
    }

    /// Temperature softmax over the last axis: `exp(z_i/β) / Σ_j exp(z_j/β)`.
    ///
    /// `beta` is a one-element tensor and receives a gradient when it
    /// requires one.
    pub fn softmax(&mut self, z: Var, beta: Var) -> Result<Var> {
        if self.numel(beta) != 1 {
            return Err(Error::Dimension("softmax: temperature must have one element".into()));
        }
        let b = self.item(beta);
        if !(b > 0.0) {
            return Err(Error::Domain(format!("softmax: temperature must be positive, got {b}")));
        }
        let n = *self.shape(z).last().unwrap();
        let mut data = Vec::with_capacity(self.numel(z));
        for row in self.value(z).chunks_exact(n) {
            data.extend(softmax_row(row, b));
        }
        let shape = self.shape(z).to_vec();
        self.push(shape, data, Op::Softmax { z, beta, n }, &[z, beta], "softmax")
    }

    /// Softmax with a constant temperature.
    pub fn softmax_const(&mut self, z: Var, beta: f64) -> Result<Var> {
        let b = self.scalar(beta);
        self.softmax(z, b)
    }

    /// Divides each vector along the last axis by `max(‖v‖₂, eps)`.
    pub fn l2_normalize(&mut self, a: Var, eps: f64) -> Result<Var> {
        let n = *self.shape(a).last().unwrap();
        let mut norms = Vec::with_capacity(self.numel(a) / n);
        let mut data = Vec::with_capacity(self.numel(a));
        for row in self.value(a).chunks_exact(n) {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            let denom = norm.max(eps);
            data.extend(row.iter().map(|x| x / denom));
            norms.push(norm);
        }
        let shape = self.shape(a).to_vec();
        self.push(shape, data, Op::L2Normalize { a, n, norms, eps }, &[a], "l2_normalize")
    }

    /// Bilinear lookup at the continuous point `(row, col)` of an `h×w` grid
    /// (returning one value) or an `h×w×D` grid (returning `[D]`).
    pub fn bilinear_sample(&mut self, grid: Var, row: f64, col: f64) -> Result<Var> {
        let (h, w, depth) = match self.shape(grid) {
            [h, w] => (*h, *w, 1),
            [h, w, d] => (*h, *w, *d),
            s => {
                return Err(Error::Dimension(format!(
                    "bilinear_sample: expected h×w or h×w×D, got {s:?}"
                )))
            }
        };
        let taps = bilinear_taps(h, w, row, col)?;
        let src = self.value(grid);
        let mut data = vec![0.0; depth];
        for &(cell, wt) in &taps {
            if wt == 0.0 {
                continue;
            }
            for (o, v) in data.iter_mut().zip(&src[cell * depth..(cell + 1) * depth]) {
                *o += wt * v;
            }
        }
        self.push(vec![depth], data, Op::BilinearSample { grid, taps, depth }, &[grid], "bilinear_sample")
    }

    /// `−Σ_i t_i · log(softmax(z)_i)` for a constant target distribution `t`.
    ///
    /// Probabilities below [`CE_PROB_FLOOR`] where the target has mass are
    /// clamped and counted in [`Tape::diagnostics`].
    pub fn cross_entropy(&mut self, logits: Var, target: &[f64]) -> Result<Var> {
        if self.numel(logits) != target.len() {
            return Err(Error::Dimension(format!(
                "cross_entropy: {} logits for a target of {}",
                self.numel(logits),
                target.len()
            )));
        }
        let probs = softmax_row(self.value(logits), 1.0);
        let mut loss = 0.0;
        let mut underflows = 0;
        for (p, t) in probs.iter().zip(target) {
            if *t > 0.0 {
                if *p < CE_PROB_FLOOR {
                    underflows += 1;
                }
                loss -= t * p.max(CE_PROB_FLOOR).ln();
            }
        }
        self.diagnostics_mut().ce_underflows += underflows;
        let target = target.to_vec();
        self.push(vec![1], vec![loss], Op::CrossEntropy { logits, target, probs }, &[logits], "cross_entropy")
    }
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-shifted temperature softmax of one vector.
pub fn softmax_row(z: &[f64], beta: f64) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = z.iter().map(|v| ((v - max) / beta).exp()).collect();
    let total: f64 = out.iter().sum();
    for v in &mut out {
        *v /= total;
    }
    out
}

/// Flat indices and weights of the four neighbours around `(row, col)`.
pub(crate) fn bilinear_taps(h: usize, w: usize, row: f64, col: f64) -> Result<[(usize, f64); 4]> {
    let in_range = |v: f64, n: usize| v.is_finite() && v >= 0.0 && v <= (n - 1) as f64;
    if !in_range(row, h) || !in_range(col, w) {
        return Err(Error::OutOfRange(format!(
            "point ({row}, {col}) outside the {h}×{w} grid"
        )));
    }
    let (r0, fr) = split_coord(row, h);
    let (c0, fc) = split_coord(col, w);
    let r1 = (r0 + 1).min(h - 1);
    let c1 = (c0 + 1).min(w - 1);
    Ok([
        (r0 * w + c0, (1.0 - fr) * (1.0 - fc)),
        (r0 * w + c1, (1.0 - fr) * fc),
        (r1 * w + c0, fr * (1.0 - fc)),
        (r1 * w + c1, fr * fc),
    ])
}

fn split_coord(v: f64, n: usize) -> (usize, f64) {
    if n == 1 {
        return (0, 0.0);
    }
    let base = (v.floor() as usize).min(n - 2);
    (base, v - base as f64)
}
