//! Toy dense feature extractor.
//!
//! Non-overlapping `r×r` patches are flattened, linearly embedded and pushed
//! per position through a small ReLU MLP. The output is a `C×(H/r)×(W/r)`
//! feature map whose magnitude is unconstrained.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub in_channels: usize,
    /// Image-to-feature spatial ratio `r`.
    pub ratio: usize,
    pub embed_dim: usize,
    /// Output channel width `C` (also the width of every MLP layer).
    pub width: usize,
    /// Number of MLP layers after the patch embedding.
    pub depth: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            ratio: 8,
            embed_dim: 32,
            width: 64,
            depth: 3,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if !matches!(self.in_channels, 1 | 3) {
            return Err(Error::Config(format!(
                "in_channels must be 1 or 3, got {}",
                self.in_channels
            )));
        }
        if self.ratio == 0 || self.embed_dim == 0 || self.width == 0 || self.depth == 0 {
            return Err(Error::Config(
                "ratio, embed_dim, width and depth must all be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn patch_len(&self) -> usize {
        self.in_channels * self.ratio * self.ratio
    }
}

/// Which backbone parameters receive updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneScope {
    LastBlock,
    Full,
}

/// A `channels×H×W` image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Tensor,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        let data = Tensor::new(vec![channels, height, width], data)?;
        if let Some(v) = data.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Domain(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn from_tensor(t: Tensor) -> Result<Self> {
        match *t.shape() {
            [c, h, w] => Self::new(c, h, w, t.into_data()),
            [h, w] => Self::new(1, h, w, t.into_data()),
            _ => Err(Error::Dimension(format!(
                "image tensor must be C×H×W or H×W, got {:?}",
                t.shape()
            ))),
        }
    }

    pub fn pixel(&self, c: usize, row: usize, col: usize) -> f64 {
        self.data.data()[(c * self.height + row) * self.width + col]
    }
}

/// Dense `C×h×w` descriptor grid living on a tape.
#[derive(Clone, Copy, Debug)]
pub struct FeatureMap {
    pub data: Var,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub ratio: usize,
}

impl FeatureMap {
    /// Wraps an existing `C×h×w` tape value.
    pub fn from_var(tape: &Tape, data: Var, ratio: usize) -> Result<Self> {
        match *tape.shape(data) {
            [channels, height, width] => Ok(Self {
                data,
                channels,
                height,
                width,
                ratio,
            }),
            ref s => Err(Error::Dimension(format!("feature map must be C×h×w, got {s:?}"))),
        }
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `[fan_in × fan_out]`
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Glorot-uniform weights, zero bias.
    fn init(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let weight = (0..fan_in * fan_out).map(|_| rng.gen_range(-a..a)).collect();
        Ok(Self {
            weight: Tensor::new(vec![fan_in, fan_out], weight)?,
            bias: Tensor::zeros(vec![fan_out])?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams {
    pub config: BackboneConfig,
    pub embed: Linear,
    pub layers: Vec<Linear>,
}

impl BackboneParams {
    pub fn init(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embed = Linear::init(config.patch_len(), config.embed_dim, &mut rng)?;
        let mut layers = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            let fan_in = if i == 0 { config.embed_dim } else { config.width };
            layers.push(Linear::init(fan_in, config.width, &mut rng)?);
        }
        Ok(Self {
            config,
            embed,
            layers,
        })
    }

    /// Parameter names in storage order.
    pub fn names(&self) -> Vec<String> {
        let mut names = vec!["embed.weight".to_string(), "embed.bias".to_string()];
        for i in 0..self.layers.len() {
            names.push(format!("layer{i}.weight"));
            names.push(format!("layer{i}.bias"));
        }
        names
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.embed.weight, &self.embed.bias];
        for l in &self.layers {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.embed.weight, &mut self.embed.bias];
        for l in &mut self.layers {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out
    }

    /// Index of the first tensor belonging to the last MLP layer.
    pub fn last_block_boundary(&self) -> usize {
        self.tensors().len() - 2
    }

    /// Indices (in [`Self::tensors`] order) of the parameters updated under `scope`.
    pub fn trainable_parameters(&self, scope: FinetuneScope) -> Vec<usize> {
        let n = self.tensors().len();
        match scope {
            FinetuneScope::Full => (0..n).collect(),
            FinetuneScope::LastBlock => (self.last_block_boundary()..n).collect(),
        }
    }

    /// Puts the parameters on `tape`; frozen ones go on as constants.
    pub fn register(&self, tape: &mut Tape, scope: FinetuneScope) -> BackboneVars {
        let trainable = self.trainable_parameters(scope);
        let vars: Vec<Var> = self
            .tensors()
            .into_iter()
            .enumerate()
            .map(|(i, t)| {
                if trainable.contains(&i) {
                    tape.param(t)
                } else {
                    tape.constant(t)
                }
            })
            .collect();
        BackboneVars {
            config: self.config.clone(),
            vars,
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }
}

/// Backbone parameters registered on one tape.
#[derive(Clone, Debug)]
pub struct BackboneVars {
    pub config: BackboneConfig,
    /// Same order as [`BackboneParams::tensors`].
    pub vars: Vec<Var>,
}

/// Rearranges an image into `[(H/r)·(W/r) × channels·r²]` patch rows.
pub fn patchify(img: &Image, ratio: usize) -> Result<Tensor> {
    if ratio == 0 || img.height % ratio != 0 || img.width % ratio != 0 {
        return Err(Error::Dimension(format!(
            "{}×{} image is not divisible by ratio {ratio}",
            img.height, img.width
        )));
    }
    let (h, w) = (img.height / ratio, img.width / ratio);
    let patch_len = img.channels * ratio * ratio;
    let mut out = Vec::with_capacity(h * w * patch_len);
    for i in 0..h {
        for j in 0..w {
            for c in 0..img.channels {
                for di in 0..ratio {
                    for dj in 0..ratio {
                        out.push(img.pixel(c, i * ratio + di, j * ratio + dj));
                    }
                }
            }
        }
    }
    Tensor::new(vec![h * w, patch_len], out)
}

/// Runs the backbone on `img`, producing a `C×(H/r)×(W/r)` feature map.
pub fn extract_features(tape: &mut Tape, img: &Image, params: &BackboneVars) -> Result<FeatureMap> {
    let cfg = &params.config;
    if img.channels != cfg.in_channels {
        return Err(Error::Dimension(format!(
            "backbone expects {} channels, image has {}",
            cfg.in_channels, img.channels
        )));
    }
    let patches = patchify(img, cfg.ratio)?;
    let (h, w) = (img.height / cfg.ratio, img.width / cfg.ratio);
    let x = tape.constant(&patches);
    let mut hidden = tape.matmul(x, params.vars[0])?;
    hidden = tape.add_row(hidden, params.vars[1])?;
    for pair in params.vars[2..].chunks_exact(2) {
        let act = tape.relu(hidden)?;
        hidden = tape.matmul(act, pair[0])?;
        hidden = tape.add_row(hidden, pair[1])?;
    }
    let channels_first = tape.transpose(hidden)?;
    let data = tape.reshape(channels_first, &[cfg.width, h, w])?;
    Ok(FeatureMap {
        data,
        channels: cfg.width,
        height: h,
        width: w,
        ratio: cfg.ratio,
    })
}
