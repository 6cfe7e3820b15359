//! A backbone with its temperature state, and the on-disk weights directory.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::{smt, Tape, Tensor};
use crate::backbone::{extract_features, BackboneConfig, BackboneParams, BackboneVars, FinetuneScope, Image};
use crate::error::{Error, Result};
use crate::localizer::{kernel_soft_argmax, LocalizerConfig};
use crate::matcher::{build_correlation, extract_score_map, feature_to_image_coords, image_to_feature_coords, Normalization};
use crate::point::Point;
use crate::temperature::{effective_temperature, TemperatureMode, TemperatureParams, TemperatureVars};

pub const MANIFEST: &str = "manifest.json";
const WEIGHTS_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub backbone: BackboneParams,
    pub temperature: TemperatureParams,
    pub normalization: Normalization,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub file: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub backbone: BackboneConfig,
    pub normalization: Normalization,
    pub temperature: TemperatureMode,
    pub seed: u64,
    /// Storage order: backbone tensors first, then temperature tensors.
    pub tensors: Vec<TensorEntry>,
}

/// Model parameters registered on a tape.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub backbone: BackboneVars,
    pub temperature: TemperatureVars,
}

/// Per-pair outputs used at inference time.
#[derive(Clone, Debug)]
pub struct PairScores {
    /// `(β_A, β_B)` used to rescale the correlation.
    pub betas: (f64, f64),
    /// One score map per query, row-major over the target grid.
    pub maps: Vec<Vec<f64>>,
    pub target: (usize, usize),
    pub ratio: usize,
}

impl PairScores {
    /// Kernel soft-argmax predictions in image-B pixels.
    pub fn predict(&self, cfg: &LocalizerConfig) -> Result<Vec<Point>> {
        self.maps
            .iter()
            .map(|m| {
                let f = kernel_soft_argmax(m, self.target.0, self.target.1, cfg)?;
                Ok(feature_to_image_coords(f, self.ratio))
            })
            .collect()
    }
}

impl Model {
    pub fn init(backbone: BackboneConfig, mode: TemperatureMode, normalization: Normalization, seed: u64) -> Result<Self> {
        let width = backbone.width;
        Ok(Self {
            backbone: BackboneParams::init(backbone, seed)?,
            temperature: TemperatureParams::init(mode, width, seed.wrapping_add(1))?,
            normalization,
            seed,
        })
    }

    pub fn mode(&self) -> TemperatureMode {
        self.temperature.mode()
    }

    pub fn register(&self, tape: &mut Tape, scope: FinetuneScope, train_temperature: bool) -> ModelVars {
        ModelVars {
            backbone: self.backbone.register(tape, scope),
            temperature: self.temperature.register(tape, train_temperature),
        }
    }

    /// Registers every parameter as a constant.
    pub fn register_frozen(&self, tape: &mut Tape) -> ModelVars {
        let vars = self.backbone.tensors().into_iter().map(|t| tape.constant(t)).collect();
        ModelVars {
            backbone: BackboneVars {
                config: self.backbone.config.clone(),
                vars,
            },
            temperature: self.temperature.register(tape, false),
        }
    }

    /// Score maps of every query in `queries` (image-A pixels).
    pub fn score_pair(&self, image_a: &Image, image_b: &Image, queries: &[Point]) -> Result<PairScores> {
        let mut tape = Tape::new();
        let vars = self.register_frozen(&mut tape);
        let fa = extract_features(&mut tape, image_a, &vars.backbone)?;
        let fb = extract_features(&mut tape, image_b, &vars.backbone)?;
        let (ba, bb) = effective_temperature(&mut tape, &vars.temperature, &fa, &fb)?;
        let c = build_correlation(&mut tape, &fa, &fb, self.normalization, ba, bb)?;
        let mut maps = Vec::with_capacity(queries.len());
        for q in queries {
            let f = image_to_feature_coords(*q, fa.ratio, c.source)?;
            let m = extract_score_map(&mut tape, &c, f)?;
            maps.push(m.values(&tape).to_vec());
        }
        Ok(PairScores {
            betas: (tape.item(ba), tape.item(bb)),
            maps,
            target: c.target,
            ratio: fb.ratio,
        })
    }

    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = self.backbone.names().into_iter().zip(self.backbone.tensors()).collect();
        out.extend(self.temperature.names().into_iter().zip(self.temperature.tensors()));
        out
    }

    pub fn all_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.is_finite())
    }

    /// Writes one SMT1 file per tensor plus `manifest.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut entries = Vec::new();
        for (name, t) in self.named_tensors() {
            let file = format!("{name}.smt");
            smt::save(&dir.join(&file), t)?;
            entries.push(TensorEntry {
                name,
                file,
                shape: t.shape().to_vec(),
            });
        }
        let manifest = Manifest {
            version: WEIGHTS_VERSION,
            backbone: self.backbone.config.clone(),
            normalization: self.normalization,
            temperature: self.mode(),
            seed: self.seed,
            tensors: entries,
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        std::fs::write(dir.join(MANIFEST), text)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let bad = |reason: String| Error::Format {
            path: path.clone(),
            reason,
        };
        let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(&path)?).map_err(|e| bad(e.to_string()))?;
        if manifest.version != WEIGHTS_VERSION {
            return Err(bad(format!("unsupported weights version {}", manifest.version)));
        }
        let mut model = Model::init(manifest.backbone.clone(), manifest.temperature, manifest.normalization, manifest.seed)
            .map_err(|e| bad(e.to_string()))?;
        let names: Vec<String> = model.named_tensors().into_iter().map(|(n, _)| n).collect();
        let listed: Vec<&str> = manifest.tensors.iter().map(|e| e.name.as_str()).collect();
        if names.iter().map(String::as_str).ne(listed.iter().copied()) {
            return Err(bad(format!("expected tensors {names:?}, manifest lists {listed:?}")));
        }
        let mut loaded = Vec::with_capacity(manifest.tensors.len());
        for e in &manifest.tensors {
            let t = smt::load(&dir.join(&e.file))?;
            if t.shape() != e.shape.as_slice() {
                return Err(bad(format!("{} has shape {:?}, manifest says {:?}", e.name, t.shape(), e.shape)));
            }
            loaded.push(t);
        }
        let mut slots = model.backbone.tensors_mut();
        slots.extend(model.temperature.tensors_mut());
        for (slot, t) in slots.into_iter().zip(loaded) {
            if slot.shape() != t.shape() {
                return Err(bad(format!("shape {:?} does not fit {:?}", t.shape(), slot.shape())));
            }
            *slot = t;
        }
        if !model.all_finite() {
            return Err(bad("weights contain non-finite values".into()));
        }
        Ok(model)
    }
}
