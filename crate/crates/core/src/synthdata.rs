//! Procedural correspondence data: a random blob texture seen through a known
//! warp, with photometric jitter on both views.

use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{smt, Tensor};
use crate::backbone::Image;
use crate::error::{Error, Result};
use crate::eval::CorrespondenceSet;
use crate::point::Point;

pub const DATASET_VERSION: u32 = 1;
const MAX_ATTEMPTS: usize = 100;
const INLINE_PREFIX: &str = "base64:";

/// Seed offsets that keep the train, val and test seed ranges apart.
const SPLIT_STRIDE: u64 = 1 << 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WarpKind {
    Affine,
    ThinPerturbation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Square canvas side in pixels.
    pub size: usize,
    /// Backbone ratio the keypoints must stay compatible with.
    pub ratio: usize,
    pub min_keypoints: usize,
    pub max_keypoints: usize,
    /// Minimum pairwise keypoint distance in feature cells, in both images.
    pub min_spacing_cells: f64,
    pub warp: WarpKind,
    pub max_rotation_deg: f64,
    pub min_scale: f64,
    pub max_scale: f64,
    pub max_shear: f64,
    /// Translation bound as a fraction of `size`.
    pub max_translation: f64,
    /// Largest allowed displacement of any pixel, as a fraction of `size`.
    pub max_displacement: f64,
    pub perturb_points: usize,
    /// Peak control-point offset in pixels.
    pub perturb_amplitude: f64,
    pub perturb_radius: f64,
    pub blobs: usize,
    pub min_blob_radius: f64,
    pub max_blob_radius: f64,
    pub brightness: f64,
    pub min_contrast: f64,
    pub max_contrast: f64,
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            size: 64,
            ratio: 8,
            min_keypoints: 4,
            max_keypoints: 10,
            min_spacing_cells: 2.0,
            warp: WarpKind::ThinPerturbation,
            max_rotation_deg: 10.0,
            min_scale: 0.9,
            max_scale: 1.1,
            max_shear: 0.1,
            max_translation: 0.1,
            max_displacement: 0.25,
            perturb_points: 4,
            perturb_amplitude: 2.0,
            perturb_radius: 12.0,
            blobs: 100,
            min_blob_radius: 2.0,
            max_blob_radius: 8.0,
            brightness: 0.1,
            min_contrast: 0.75,
            max_contrast: 1.25,
            noise: 0.02,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.ratio == 0 || self.size == 0 || self.size % self.ratio != 0 {
            return bad(format!("size {} must be a positive multiple of ratio {}", self.size, self.ratio));
        }
        if self.size < 2 * self.ratio {
            return bad(format!("size {} leaves no interior for ratio {}", self.size, self.ratio));
        }
        if self.min_keypoints < 4 || self.max_keypoints > 16 || self.min_keypoints > self.max_keypoints {
            return bad(format!(
                "keypoint count range [{}, {}] must lie inside [4, 16]",
                self.min_keypoints, self.max_keypoints
            ));
        }
        let positive = [
            self.min_scale,
            self.max_scale,
            self.max_displacement,
            self.perturb_radius,
            self.min_blob_radius,
            self.max_blob_radius,
            self.min_contrast,
        ];
        if positive.iter().any(|v| !(*v > 0.0)) {
            return bad("scales, radii, contrast and displacement bounds must be positive".into());
        }
        let non_negative = [
            self.min_spacing_cells,
            self.max_rotation_deg,
            self.max_shear,
            self.max_translation,
            self.perturb_amplitude,
            self.brightness,
            self.noise,
        ];
        if non_negative.iter().any(|v| !(*v >= 0.0)) {
            return bad("jitter and warp magnitudes must be non-negative".into());
        }
        if self.min_scale > self.max_scale
            || self.min_blob_radius > self.max_blob_radius
            || self.min_contrast > self.max_contrast
        {
            return bad("range bounds are reversed".into());
        }
        if self.blobs == 0 {
            return bad("texture needs at least one blob".into());
        }
        // keeps the fixed-point inverse a contraction
        if self.warp == WarpKind::ThinPerturbation && self.perturb_amplitude >= 0.25 * self.perturb_radius {
            return bad("perturb_amplitude must stay below a quarter of perturb_radius".into());
        }
        Ok(())
    }

    /// Inclusive pixel range whose feature coordinates fall inside the grid.
    pub fn keypoint_bounds(&self) -> (f64, f64) {
        let lo = (self.ratio as f64 - 1.0) / 2.0;
        (lo, self.size as f64 - 1.0 - lo)
    }
}

/// Maps image-A pixel coordinates to image-B coordinates:
/// `W(p) = M·[row, col, 1]ᵀ + Σ_k o_k·exp(−‖p − c_k‖² / 2s²)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarpSpec {
    pub kind: WarpKind,
    pub matrix: [[f64; 3]; 2],
    pub centers: Vec<Point>,
    pub offsets: Vec<Point>,
    pub radius: f64,
    pub seed: u64,
}

impl WarpSpec {
    pub fn identity() -> Self {
        Self::affine([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    }

    pub fn translation(dr: f64, dc: f64) -> Self {
        Self::affine([[1.0, 0.0, dr], [0.0, 1.0, dc]])
    }

    pub fn affine(matrix: [[f64; 3]; 2]) -> Self {
        Self {
            kind: WarpKind::Affine,
            matrix,
            centers: Vec::new(),
            offsets: Vec::new(),
            radius: 1.0,
            seed: 0,
        }
    }

    fn bump(&self, p: Point) -> Point {
        let denom = 2.0 * self.radius * self.radius;
        let (mut dr, mut dc) = (0.0, 0.0);
        for (c, o) in self.centers.iter().zip(&self.offsets) {
            let d = p.row - c.row;
            let e = p.col - c.col;
            let k = (-(d * d + e * e) / denom).exp();
            dr += o.row * k;
            dc += o.col * k;
        }
        Point::new(dr, dc)
    }

    pub fn apply(&self, p: Point) -> Point {
        let m = &self.matrix;
        let b = self.bump(p);
        Point::new(
            m[0][0] * p.row + m[0][1] * p.col + m[0][2] + b.row,
            m[1][0] * p.row + m[1][1] * p.col + m[1][2] + b.col,
        )
    }

    /// Solves `W(p) = q` by fixed-point iteration on the linear part.
    pub fn invert(&self, q: Point) -> Result<Point> {
        let m = &self.matrix;
        let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
        if det.abs() < 1e-12 {
            return Err(Error::Domain("warp matrix is singular".into()));
        }
        let solve = |r: f64, c: f64| {
            Point::new((m[1][1] * r - m[0][1] * c) / det, (-m[1][0] * r + m[0][0] * c) / det)
        };
        let mut p = solve(q.row - m[0][2], q.col - m[1][2]);
        if self.centers.is_empty() {
            return Ok(p);
        }
        for _ in 0..200 {
            let b = self.bump(p);
            let next = solve(q.row - m[0][2] - b.row, q.col - m[1][2] - b.col);
            let step = next.distance(p);
            p = next;
            if step < 1e-13 {
                return Ok(p);
            }
        }
        Err(Error::Generation("warp inverse did not converge".into()))
    }
}

/// One generated pair with exact labels.
#[derive(Clone, Debug)]
pub struct SynthPair {
    pub seed: u64,
    pub image_a: Image,
    pub image_b: Image,
    pub keypoints_a: Vec<Point>,
    pub keypoints_b: Vec<Point>,
    pub bbox_b: (f64, f64),
    pub warp: WarpSpec,
}

impl SynthPair {
    pub fn correspondences(&self) -> CorrespondenceSet {
        CorrespondenceSet {
            pairs: self.keypoints_a.iter().copied().zip(self.keypoints_b.iter().copied()).collect(),
            size_a: (self.image_a.height, self.image_a.width),
            size_b: (self.image_b.height, self.image_b.width),
            bbox_b: Some(self.bbox_b),
        }
    }
}

struct Blob {
    row: f64,
    col: f64,
    amp: f64,
    inv2s2: f64,
    reach2: f64,
}

/// Smooth random field defined on the whole plane.
struct Texture {
    blobs: Vec<Blob>,
}

impl Texture {
    fn sample(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> Self {
        let pad = cfg.size as f64 * 0.25;
        let (lo, hi) = (-pad, cfg.size as f64 + pad);
        let (ln_min, ln_max) = (cfg.min_blob_radius.ln(), cfg.max_blob_radius.ln());
        let blobs = (0..cfg.blobs)
            .map(|_| {
                let s = if ln_max > ln_min { rng.gen_range(ln_min..ln_max).exp() } else { cfg.min_blob_radius };
                let amp = rng.gen_range(0.5..1.5) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                Blob {
                    row: rng.gen_range(lo..hi),
                    col: rng.gen_range(lo..hi),
                    amp,
                    inv2s2: 1.0 / (2.0 * s * s),
                    reach2: (4.0 * s) * (4.0 * s),
                }
            })
            .collect();
        Self { blobs }
    }

    fn at(&self, p: Point) -> f64 {
        let mut t = 0.0;
        for b in &self.blobs {
            let d2 = (p.row - b.row).powi(2) + (p.col - b.col).powi(2);
            if d2 < b.reach2 {
                t += b.amp * (-d2 * b.inv2s2).exp();
            }
        }
        0.5 + 0.5 * t.tanh()
    }
}

fn sample_warp(rng: &mut ChaCha8Rng, cfg: &SynthConfig, seed: u64) -> WarpSpec {
    let n = cfg.size as f64;
    let mid = (n - 1.0) / 2.0;
    let theta = rng.gen_range(-1.0..=1.0) * cfg.max_rotation_deg.to_radians();
    let scale = rng.gen_range(cfg.min_scale..=cfg.max_scale);
    let shear = rng.gen_range(-1.0..=1.0) * cfg.max_shear;
    let tr = rng.gen_range(-1.0..=1.0) * cfg.max_translation * n;
    let tc = rng.gen_range(-1.0..=1.0) * cfg.max_translation * n;
    let (s, c) = theta.sin_cos();
    // rotation · scale · shear about the canvas centre
    let a = [[scale * c, scale * (c * shear - s)], [scale * s, scale * (s * shear + c)]];
    let matrix = [
        [a[0][0], a[0][1], mid + tr - a[0][0] * mid - a[0][1] * mid],
        [a[1][0], a[1][1], mid + tc - a[1][0] * mid - a[1][1] * mid],
    ];
    let mut warp = WarpSpec {
        kind: cfg.warp,
        matrix,
        centers: Vec::new(),
        offsets: Vec::new(),
        radius: cfg.perturb_radius,
        seed,
    };
    if cfg.warp == WarpKind::ThinPerturbation {
        for _ in 0..cfg.perturb_points {
            warp.centers.push(Point::new(rng.gen_range(0.0..n), rng.gen_range(0.0..n)));
            let ang = rng.gen_range(0.0..std::f64::consts::TAU);
            let mag = rng.gen_range(0.0..=cfg.perturb_amplitude);
            warp.offsets.push(Point::new(mag * ang.sin(), mag * ang.cos()));
        }
    }
    warp
}

fn max_displacement(warp: &WarpSpec, size: usize) -> f64 {
    let step = (size / 8).max(1);
    let mut worst: f64 = 0.0;
    for r in (0..size).step_by(step).chain(std::iter::once(size - 1)) {
        for c in (0..size).step_by(step).chain(std::iter::once(size - 1)) {
            let p = Point::new(r as f64, c as f64);
            worst = worst.max(warp.apply(p).distance(p));
        }
    }
    worst
}

/// Extent `(h, w)` of the warped canvas inside image B.
fn warped_bbox(warp: &WarpSpec, size: usize) -> (f64, f64) {
    let last = (size - 1) as f64;
    let (mut rmin, mut rmax, mut cmin, mut cmax) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for i in 0..size {
        let t = i as f64;
        for p in [Point::new(0.0, t), Point::new(last, t), Point::new(t, 0.0), Point::new(t, last)] {
            let q = warp.apply(p);
            rmin = rmin.min(q.row);
            rmax = rmax.max(q.row);
            cmin = cmin.min(q.col);
            cmax = cmax.max(q.col);
        }
    }
    let clip = |v: f64| v.clamp(0.0, last);
    (clip(rmax) - clip(rmin), clip(cmax) - clip(cmin))
}

fn sample_keypoints(
    rng: &mut ChaCha8Rng,
    cfg: &SynthConfig,
    warp: &WarpSpec,
) -> Option<(Vec<Point>, Vec<Point>)> {
    let (lo, hi) = cfg.keypoint_bounds();
    let inside = |p: Point| p.row >= lo && p.row <= hi && p.col >= lo && p.col <= hi;
    let spacing = cfg.min_spacing_cells * cfg.ratio as f64;
    let want = rng.gen_range(cfg.min_keypoints..=cfg.max_keypoints);
    let (mut a, mut b): (Vec<Point>, Vec<Point>) = (Vec::new(), Vec::new());
    for _ in 0..want * 50 {
        let p = Point::new(rng.gen_range(lo..=hi), rng.gen_range(lo..=hi));
        let q = warp.apply(p);
        if !inside(q) {
            continue;
        }
        if a.iter().any(|x| x.distance(p) < spacing) || b.iter().any(|y| y.distance(q) < spacing) {
            continue;
        }
        a.push(p);
        b.push(q);
        if a.len() == want {
            return Some((a, b));
        }
    }
    None
}

fn jitter(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> (f64, f64) {
    let contrast = rng.gen_range(cfg.min_contrast..=cfg.max_contrast);
    let brightness = rng.gen_range(-1.0..=1.0) * cfg.brightness;
    (contrast, brightness)
}

fn render(
    rng: &mut ChaCha8Rng,
    cfg: &SynthConfig,
    mut sample: impl FnMut(Point) -> Result<f64>,
) -> Result<Image> {
    let (contrast, brightness) = jitter(rng, cfg);
    let noise = Normal::new(0.0, cfg.noise).map_err(|e| Error::Config(e.to_string()))?;
    let n = cfg.size;
    let mut data = Vec::with_capacity(n * n);
    for r in 0..n {
        for c in 0..n {
            let v = sample(Point::new(r as f64, c as f64))?;
            let v = contrast * (v - 0.5) + 0.5 + brightness + noise.sample(rng);
            data.push(v.clamp(0.0, 1.0));
        }
    }
    Image::new(1, n, n, data)
}

fn try_pair(rng: &mut ChaCha8Rng, cfg: &SynthConfig, seed: u64, warp: Option<&WarpSpec>) -> Result<Option<SynthPair>> {
    let warp = match warp {
        Some(w) => w.clone(),
        None => {
            let w = sample_warp(rng, cfg, seed);
            if max_displacement(&w, cfg.size) > cfg.max_displacement * cfg.size as f64 {
                return Ok(None);
            }
            w
        }
    };
    let Some((keypoints_a, keypoints_b)) = sample_keypoints(rng, cfg, &warp) else {
        return Ok(None);
    };
    let texture = Texture::sample(rng, cfg);
    let image_a = render(rng, cfg, |p| Ok(texture.at(p)))?;
    let image_b = render(rng, cfg, |p| Ok(texture.at(warp.invert(p)?)))?;
    Ok(Some(SynthPair {
        seed,
        image_a,
        image_b,
        keypoints_a,
        keypoints_b,
        bbox_b: warped_bbox(&warp, cfg.size),
        warp,
    }))
}

fn generate(seed: u64, cfg: &SynthConfig, warp: Option<&WarpSpec>) -> Result<SynthPair> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_ATTEMPTS {
        if let Some(pair) = try_pair(&mut rng, cfg, seed, warp)? {
            return Ok(pair);
        }
    }
    Err(Error::Generation(format!(
        "no valid keypoint layout after {MAX_ATTEMPTS} attempts (seed {seed})"
    )))
}

pub fn generate_pair(seed: u64, cfg: &SynthConfig) -> Result<SynthPair> {
    generate(seed, cfg, None)
}

/// Like [`generate_pair`] but with a caller-chosen warp.
pub fn generate_pair_with_warp(seed: u64, cfg: &SynthConfig, warp: &WarpSpec) -> Result<SynthPair> {
    generate(seed, cfg, Some(warp))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    /// Seed of pair `index` in this split.
    pub fn pair_seed(self, base: u64, index: usize) -> u64 {
        let offset = match self {
            Split::Train => 0,
            Split::Val => SPLIT_STRIDE,
            Split::Test => 2 * SPLIT_STRIDE,
        };
        base.wrapping_mul(3 * SPLIT_STRIDE).wrapping_add(offset).wrapping_add(index as u64)
    }
}

/// Image reference inside the dataset file: inline SMT1 bytes or a path
/// relative to the file.
fn encode_image(img: &Image) -> String {
    format!("{INLINE_PREFIX}{}", B64.encode(smt::encode(&img.data)))
}

fn decode_image(field: &str, base_dir: &Path, file: &Path) -> Result<Image> {
    let fmt_err = |reason: String| Error::Format {
        path: file.to_path_buf(),
        reason,
    };
    let tensor = if let Some(b64) = field.strip_prefix(INLINE_PREFIX) {
        let bytes = B64.decode(b64).map_err(|e| fmt_err(format!("bad base64 image: {e}")))?;
        smt::decode(&bytes).map_err(fmt_err)?
    } else {
        smt::load(&base_dir.join(field))?
    };
    let tensor = if tensor.shape().len() == 2 {
        Tensor::new(vec![1, tensor.shape()[0], tensor.shape()[1]], tensor.into_data())?
    } else {
        tensor
    };
    Image::from_tensor(tensor).map_err(|e| fmt_err(e.to_string()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub id: String,
    pub image_a: String,
    pub image_b: String,
    pub keypoints_a: Vec<Point>,
    pub keypoints_b: Vec<Point>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bbox_b: Option<[f64; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetFile {
    pub version: u32,
    /// Generator settings; external datasets may leave this null.
    #[serde(default)]
    pub config: Option<SynthConfig>,
    pub pairs: Vec<PairRecord>,
}

/// A decoded pair ready for training or evaluation.
#[derive(Clone, Debug)]
pub struct LoadedPair {
    pub id: String,
    pub image_a: Image,
    pub image_b: Image,
    pub set: CorrespondenceSet,
}

pub fn pair_record(id: String, pair: &SynthPair) -> PairRecord {
    PairRecord {
        id,
        image_a: encode_image(&pair.image_a),
        image_b: encode_image(&pair.image_b),
        keypoints_a: pair.keypoints_a.clone(),
        keypoints_b: pair.keypoints_b.clone(),
        bbox_b: Some([pair.bbox_b.0, pair.bbox_b.1]),
    }
}

pub fn write_dataset(path: &Path, file: &DatasetFile) -> Result<()> {
    let mut text = serde_json::to_string(file)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Vec<LoadedPair>> {
    let text = std::fs::read_to_string(path)?;
    let file: DatasetFile = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    if file.version != DATASET_VERSION {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("unsupported dataset version {}", file.version),
        });
    }
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::with_capacity(file.pairs.len());
    for rec in file.pairs {
        let image_a = decode_image(&rec.image_a, base, path)?;
        let image_b = decode_image(&rec.image_b, base, path)?;
        if rec.keypoints_a.len() != rec.keypoints_b.len() {
            return Err(Error::Format {
                path: path.to_path_buf(),
                reason: format!("pair {}: keypoint lists differ in length", rec.id),
            });
        }
        let set = CorrespondenceSet {
            pairs: rec.keypoints_a.into_iter().zip(rec.keypoints_b).collect(),
            size_a: (image_a.height, image_a.width),
            size_b: (image_b.height, image_b.width),
            bbox_b: rec.bbox_b.map(|[h, w]| (h, w)),
        };
        set.validate().map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: format!("pair {}: {e}", rec.id),
        })?;
        out.push(LoadedPair {
            id: rec.id,
            image_a,
            image_b,
            set,
        });
    }
    Ok(out)
}

pub fn split_path(dir: &Path, split: Split) -> PathBuf {
    dir.join(format!("{}.json", split.name()))
}

/// Generates one split's pairs in seed order.
pub fn generate_pairs(seed: u64, split: Split, count: usize, cfg: &SynthConfig) -> Result<Vec<SynthPair>> {
    (0..count).map(|i| generate_pair(split.pair_seed(seed, i), cfg)).collect()
}

/// Writes `train.json`, `val.json` and `test.json` under `out_dir`.
pub fn generate_split(
    seed: u64,
    n_train: usize,
    n_val: usize,
    n_test: usize,
    cfg: &SynthConfig,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    for (name, n) in [("n_train", n_train), ("n_val", n_val), ("n_test", n_test)] {
        if n == 0 || n as u64 >= SPLIT_STRIDE {
            return Err(Error::Config(format!("{name} must be in [1, 2^32), got {n}")));
        }
    }
    std::fs::create_dir_all(out_dir)?;
    let mut paths = Vec::new();
    for (split, n) in Split::ALL.into_iter().zip([n_train, n_val, n_test]) {
        let pairs = generate_pairs(seed, split, n, cfg)?
            .iter()
            .enumerate()
            .map(|(i, p)| pair_record(format!("{}-{i:05}", split.name()), p))
            .collect();
        let file = DatasetFile {
            version: DATASET_VERSION,
            config: Some(cfg.clone()),
            pairs,
        };
        let path = split_path(out_dir, split);
        write_dataset(&path, &file)?;
        paths.push(path);
    }
    Ok(paths)
}
