//! Softmax temperature for training.
//!
//! The learned module pools a feature map (behind a gradient stop), runs a
//! two-layer MLP and squashes the result with the logistic function, giving a
//! partial temperature per image. The effective training temperature is the
//! product `β_A·β_B` because each side's normalized descriptors are divided by
//! its own partial temperature before correlation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Tensor, Var};
use crate::backbone::FeatureMap;
use crate::error::{Error, Result};

/// Bounds that keep a predicted partial temperature strictly inside `(0, 1)`.
pub const PARTIAL_MIN: f64 = 1e-12;
pub const PARTIAL_MAX: f64 = 1.0 - 1e-12;

/// Smallest value the single learnable parameter is projected back to.
pub const SINGLE_PARAM_MIN: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemperatureMode {
    LearnedMlp,
    /// One learnable `β_c` (initial value given) with `β_trn = β_c²`.
    SingleParam(f64),
    /// Fixed training temperature `β_trn`.
    Manual(f64),
    Unit,
}

impl TemperatureMode {
    pub fn validate(&self) -> Result<()> {
        match *self {
            TemperatureMode::SingleParam(b) | TemperatureMode::Manual(b) => {
                if !(b > 0.0 && b <= 1.0) {
                    return Err(Error::Domain(format!(
                        "temperature must lie in (0, 1], got {b}"
                    )));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Whether the correlation tensor already carries the temperature, so
    /// evaluation can use `β_eval = 1`.
    pub fn rescales_correlation(&self) -> bool {
        !matches!(self, TemperatureMode::Unit)
    }

    pub fn label(&self) -> String {
        match self {
            TemperatureMode::LearnedMlp => "learned_mlp".into(),
            TemperatureMode::SingleParam(b) => format!("single_param({b})"),
            TemperatureMode::Manual(b) => format!("manual({b})"),
            TemperatureMode::Unit => "unit".into(),
        }
    }
}

/// Weights of the two-layer temperature MLP.
#[derive(Clone, Debug, PartialEq)]
pub struct TempModuleParams {
    /// `[C × C]`
    pub w1: Tensor,
    pub b1: Tensor,
    /// `[C × 1]`
    pub w2: Tensor,
    pub b2: Tensor,
}

impl TempModuleParams {
    /// Glorot-uniform first layer; the output layer starts at zero so the
    /// initial partial temperature is exactly 0.5.
    pub fn init(channels: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = (6.0 / (2 * channels) as f64).sqrt();
        let w1 = (0..channels * channels).map(|_| rng.gen_range(-a..a)).collect();
        Ok(Self {
            w1: Tensor::new(vec![channels, channels], w1)?,
            b1: Tensor::zeros(vec![channels])?,
            w2: Tensor::zeros(vec![channels, 1])?,
            b2: Tensor::zeros(vec![1])?,
        })
    }

    pub fn zeros(channels: usize) -> Result<Self> {
        Ok(Self {
            w1: Tensor::zeros(vec![channels, channels])?,
            b1: Tensor::zeros(vec![channels])?,
            w2: Tensor::zeros(vec![channels, 1])?,
            b2: Tensor::zeros(vec![1])?,
        })
    }

    pub fn channels(&self) -> usize {
        self.b1.len()
    }
}

/// Temperature state owned by a model.
#[derive(Clone, Debug, PartialEq)]
pub enum TemperatureParams {
    Mlp(TempModuleParams),
    Single { beta_c: Tensor },
    Manual(f64),
    Unit,
}

impl TemperatureParams {
    pub fn init(mode: TemperatureMode, channels: usize, seed: u64) -> Result<Self> {
        mode.validate()?;
        Ok(match mode {
            TemperatureMode::LearnedMlp => TemperatureParams::Mlp(TempModuleParams::init(channels, seed)?),
            TemperatureMode::SingleParam(b) => TemperatureParams::Single {
                beta_c: Tensor::scalar(b),
            },
            TemperatureMode::Manual(b) => TemperatureParams::Manual(b),
            TemperatureMode::Unit => TemperatureParams::Unit,
        })
    }

    pub fn mode(&self) -> TemperatureMode {
        match self {
            TemperatureParams::Mlp(_) => TemperatureMode::LearnedMlp,
            TemperatureParams::Single { beta_c } => TemperatureMode::SingleParam(beta_c.data()[0]),
            TemperatureParams::Manual(b) => TemperatureMode::Manual(*b),
            TemperatureParams::Unit => TemperatureMode::Unit,
        }
    }

    pub fn names(&self) -> Vec<String> {
        match self {
            TemperatureParams::Mlp(_) => ["temp.w1", "temp.b1", "temp.w2", "temp.b2"]
                .map(String::from)
                .to_vec(),
            TemperatureParams::Single { .. } => vec!["temp.beta_c".into()],
            _ => Vec::new(),
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        match self {
            TemperatureParams::Mlp(p) => vec![&p.w1, &p.b1, &p.w2, &p.b2],
            TemperatureParams::Single { beta_c } => vec![beta_c],
            _ => Vec::new(),
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            TemperatureParams::Mlp(p) => vec![&mut p.w1, &mut p.b1, &mut p.w2, &mut p.b2],
            TemperatureParams::Single { beta_c } => vec![beta_c],
            _ => Vec::new(),
        }
    }

    /// Keeps a learnable `β_c` inside `[SINGLE_PARAM_MIN, 1]` after an update.
    pub fn project(&mut self) {
        if let TemperatureParams::Single { beta_c } = self {
            let v = &mut beta_c.data_mut()[0];
            *v = v.clamp(SINGLE_PARAM_MIN, 1.0);
        }
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> TemperatureVars {
        let mut put = |t: &Tensor| if trainable { tape.param(t) } else { tape.constant(t) };
        match self {
            TemperatureParams::Mlp(p) => TemperatureVars::Mlp {
                w1: put(&p.w1),
                b1: put(&p.b1),
                w2: put(&p.w2),
                b2: put(&p.b2),
            },
            TemperatureParams::Single { beta_c } => TemperatureVars::Single(put(beta_c)),
            TemperatureParams::Manual(b) => TemperatureVars::Fixed(b.sqrt()),
            TemperatureParams::Unit => TemperatureVars::Fixed(1.0),
        }
    }
}

/// Temperature parameters registered on a tape.
#[derive(Clone, Copy, Debug)]
pub enum TemperatureVars {
    Mlp { w1: Var, b1: Var, w2: Var, b2: Var },
    Single(Var),
    /// Both partial temperatures fixed to this value.
    Fixed(f64),
}

impl TemperatureVars {
    pub fn vars(&self) -> Vec<Var> {
        match *self {
            TemperatureVars::Mlp { w1, b1, w2, b2 } => vec![w1, b1, w2, b2],
            TemperatureVars::Single(v) => vec![v],
            TemperatureVars::Fixed(_) => Vec::new(),
        }
    }
}

/// `β = sigmoid(W₂ᵀ·relu(W₁ᵀ·gap(f) + b₁) + b₂)`, with `f` detached so no
/// gradient reaches the backbone through this path.
pub fn predict_partial_temperature(
    tape: &mut Tape,
    f: &FeatureMap,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
) -> Result<Var> {
    let c = tape.shape(w1)[0];
    if f.channels != c {
        return Err(Error::Dimension(format!(
            "temperature module expects {c} channels, feature map has {}",
            f.channels
        )));
    }
    let stopped = tape.detach(f.data)?;
    let pooled = tape.global_average_pool(stopped)?;
    let row = tape.reshape(pooled, &[1, c])?;
    let hidden = tape.matmul(row, w1)?;
    let hidden = tape.add_row(hidden, b1)?;
    let hidden = tape.relu(hidden)?;
    let logit = tape.matmul(hidden, w2)?;
    let logit = tape.add_row(logit, b2)?;
    let beta = tape.sigmoid(logit)?;
    let beta = tape.clamp(beta, PARTIAL_MIN, PARTIAL_MAX)?;
    tape.reshape(beta, &[1])
}

/// Partial temperatures `(β_A, β_B)` for one image pair.
pub fn effective_temperature(
    tape: &mut Tape,
    vars: &TemperatureVars,
    fa: &FeatureMap,
    fb: &FeatureMap,
) -> Result<(Var, Var)> {
    match *vars {
        TemperatureVars::Mlp { w1, b1, w2, b2 } => {
            let ba = predict_partial_temperature(tape, fa, w1, b1, w2, b2)?;
            let bb = predict_partial_temperature(tape, fb, w1, b1, w2, b2)?;
            Ok((ba, bb))
        }
        TemperatureVars::Single(beta_c) => Ok((beta_c, beta_c)),
        TemperatureVars::Fixed(b) => {
            if !(b > 0.0) {
                return Err(Error::Domain(format!("temperature must be positive, got {b}")));
            }
            let ba = tape.scalar(b);
            let bb = tape.scalar(b);
            Ok((ba, bb))
        }
    }
}
