//! Training runs, evaluation sweeps, the manual-temperature grid and the
//! gradient-magnitude comparison.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::backbone::{extract_features, BackboneConfig, FinetuneScope};
use crate::error::{Error, Result};
use crate::eval::{evaluate, Aggregation, PckResult, ThresholdConvention};
use crate::localizer::LocalizerConfig;
use crate::matcher::{build_correlation, extract_score_map, image_to_feature_coords, Normalization};
use crate::model::Model;
use crate::objective::{cross_entropy, make_gt_distribution, temperature_regularizer, LossConfig};
use crate::optim::{clip_global_norm, Adam};
use crate::synthdata::LoadedPair;
use crate::temperature::{effective_temperature, TemperatureMode};

/// Fixed α values reported in training logs.
pub const LOG_ALPHAS: [f64; 3] = [0.05, 0.1, 0.15];

/// Env var capping parallel sweep workers.
pub const THREADS_ENV: &str = "SIMSC_THREADS";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: TemperatureMode,
    pub normalization: Normalization,
    pub finetune_scope: FinetuneScope,
    pub lr_backbone: f64,
    /// Learning rate of the temperature MLP.
    pub lr_temp: f64,
    /// Learning rate of the single learnable temperature.
    pub lr_single: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Stops training after this many optimizer steps when set.
    pub max_steps: Option<usize>,
    pub n_s: usize,
    pub n_k: usize,
    pub sigma: f64,
    pub beta_thres: f64,
    pub gamma: f64,
    /// Inference temperature. Defaults to 1 for modes that rescale the
    /// correlation; unit-mode evaluation must set it.
    pub beta_eval: Option<f64>,
    /// Candidates tried for unit-mode validation when `beta_eval` is unset.
    pub beta_eval_sweep: Vec<f64>,
    pub grad_clip: f64,
    pub seed: u64,
    pub backbone: BackboneConfig,
    pub convention: ThresholdConvention,
    /// Warm-up epochs of the self-supervised patch-identity task.
    pub pretrain_epochs: usize,
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let loss = LossConfig::default();
        Self {
            mode: TemperatureMode::LearnedMlp,
            normalization: Normalization::L2,
            finetune_scope: FinetuneScope::Full,
            lr_backbone: 1e-3,
            lr_temp: 1e-4,
            lr_single: 0.005,
            epochs: 60,
            batch_size: 8,
            max_steps: None,
            n_s: loss.n_s,
            n_k: loss.n_k,
            sigma: LocalizerConfig::default().sigma,
            beta_thres: loss.beta_thres,
            gamma: loss.gamma,
            beta_eval: None,
            beta_eval_sweep: vec![1.0, 0.1, 0.05, 0.02],
            grad_clip: 10.0,
            seed: 0,
            backbone: BackboneConfig::default(),
            convention: ThresholdConvention::Img,
            pretrain_epochs: 0,
            data: None,
            out: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("bad config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            gamma: self.gamma,
            beta_thres: self.beta_thres,
            n_s: self.n_s,
            n_k: self.n_k,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: Error| match e {
            Error::Config(_) => e,
            other => Error::Config(other.to_string()),
        };
        self.mode.validate().map_err(cfg_err)?;
        self.backbone.validate()?;
        self.loss().validate()?;
        LocalizerConfig {
            sigma: self.sigma,
            beta_eval: self.beta_eval.unwrap_or(1.0),
        }
        .validate()?;
        for (name, v) in [("lr_backbone", self.lr_backbone), ("lr_temp", self.lr_temp), ("lr_single", self.lr_single)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be a finite non-negative number, got {v}")));
            }
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::Config(format!("grad_clip must be positive, got {}", self.grad_clip)));
        }
        if self.beta_eval_sweep.is_empty() || self.beta_eval_sweep.iter().any(|b| !(*b > 0.0)) {
            return Err(Error::Config("beta_eval_sweep must hold positive values".into()));
        }
        Ok(())
    }

    /// `β_eval` for evaluating a model trained in `mode`.
    pub fn resolve_beta_eval(&self, mode: TemperatureMode) -> Result<f64> {
        match (self.beta_eval, mode.rescales_correlation()) {
            (Some(b), _) => Ok(b),
            (None, true) => Ok(1.0),
            (None, false) => Err(Error::Config("unit-temperature models need an explicit beta_eval".into())),
        }
    }

    fn validation_betas(&self) -> Vec<f64> {
        match self.resolve_beta_eval(self.mode) {
            Ok(b) => vec![b],
            Err(_) => self.beta_eval_sweep.clone(),
        }
    }
}

/// One row of the training log, written once per epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainLogRow {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub ce: f64,
    pub reg: f64,
    pub beta_a: f64,
    pub beta_b: f64,
    pub beta_trn: f64,
    pub pck: [f64; 3],
    /// Mean `|grad|` per backbone layer (embedding first).
    pub grad_abs: Vec<f64>,
    pub clip_events: usize,
}

impl TrainLogRow {
    pub fn header(layers: usize) -> Vec<String> {
        let mut h: Vec<String> = ["step", "epoch", "loss", "ce", "reg", "beta_a", "beta_b", "beta_trn", "pck_005", "pck_01", "pck_015"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        h.push("grad_embed".into());
        for i in 0..layers.saturating_sub(1) {
            h.push(format!("grad_layer{i}"));
        }
        h.push("clip_events".into());
        h
    }

    pub fn record(&self) -> Vec<String> {
        let mut r = vec![self.step.to_string(), self.epoch.to_string()];
        for v in [self.loss, self.ce, self.reg, self.beta_a, self.beta_b, self.beta_trn] {
            r.push(v.to_string());
        }
        r.extend(self.pck.iter().map(f64::to_string));
        r.extend(self.grad_abs.iter().map(f64::to_string));
        r.push(self.clip_events.to_string());
        r
    }

    pub fn parse(header: &csv::StringRecord, rec: &csv::StringRecord) -> Result<Self> {
        let bad = |m: String| Error::Format {
            path: PathBuf::from("<train log>"),
            reason: m,
        };
        if rec.len() != header.len() || rec.len() < 13 {
            return Err(bad(format!("row has {} fields, header {}", rec.len(), header.len())));
        }
        let f = |i: usize| rec[i].parse::<f64>().map_err(|e| bad(format!("field {}: {e}", &header[i])));
        let u = |i: usize| rec[i].parse::<usize>().map_err(|e| bad(format!("field {}: {e}", &header[i])));
        let n = rec.len();
        Ok(Self {
            step: u(0)?,
            epoch: u(1)?,
            loss: f(2)?,
            ce: f(3)?,
            reg: f(4)?,
            beta_a: f(5)?,
            beta_b: f(6)?,
            beta_trn: f(7)?,
            pck: [f(8)?, f(9)?, f(10)?],
            grad_abs: (11..n - 1).map(f).collect::<Result<_>>()?,
            clip_events: u(n - 1)?,
        })
    }
}

pub fn read_log(path: &Path) -> Result<Vec<TrainLogRow>> {
    let mut rd = csv::Reader::from_path(path).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let header = rd
        .headers()
        .map_err(|e| Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?
        .clone();
    rd.records()
        .map(|r| {
            let r = r.map_err(|e| Error::Format {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })?;
            TrainLogRow::parse(&header, &r)
        })
        .collect()
}

/// Per-step gradient summary handed to observers.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub beta_trn: f64,
    pub grad_abs: Vec<f64>,
    pub grad_norm: f64,
    pub clipped: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub rows: Vec<TrainLogRow>,
    /// Weights with the best validation PCK@0.1.
    pub best: Model,
    pub best_epoch: usize,
    pub best_pck: f64,
    /// Mean effective training temperature over the last epoch.
    pub final_beta_trn: f64,
    pub last: Model,
    pub steps: usize,
}

struct BatchStats {
    loss: f64,
    ce: f64,
    reg: f64,
    beta_a: f64,
    beta_b: f64,
    beta_trn: f64,
}

/// Builds the batch loss on `tape`.
fn batch_loss(
    tape: &mut Tape,
    model: &Model,
    cfg: &ExperimentConfig,
    batch: &[&LoadedPair],
    scope: FinetuneScope,
) -> Result<(Var, BatchStats, Vec<Var>)> {
    let learn_temp = matches!(cfg.mode, TemperatureMode::LearnedMlp | TemperatureMode::SingleParam(_));
    let vars = model.register(tape, scope, learn_temp);
    let mut ce_terms = Vec::new();
    let mut reg_terms = Vec::new();
    let (mut sa, mut sb, mut st) = (0.0, 0.0, 0.0);
    for pair in batch {
        let fa = extract_features(tape, &pair.image_a, &vars.backbone)?;
        let fb = extract_features(tape, &pair.image_b, &vars.backbone)?;
        let (ba, bb) = effective_temperature(tape, &vars.temperature, &fa, &fb)?;
        let (va, vb) = (tape.item(ba), tape.item(bb));
        sa += va;
        sb += vb;
        st += va * vb;
        let c = build_correlation(tape, &fa, &fb, model.normalization, ba, bb)?;
        for (a, b) in &pair.set.pairs {
            let q = image_to_feature_coords(*a, fa.ratio, c.source)?;
            let t = image_to_feature_coords(*b, fb.ratio, c.target)?;
            let m = extract_score_map(tape, &c, q)?;
            let gt = make_gt_distribution(t, c.target, cfg.n_s, cfg.n_k)?;
            ce_terms.push(cross_entropy(tape, &m, &gt)?);
        }
        let ra = temperature_regularizer(tape, ba, cfg.beta_thres)?;
        let rb = temperature_regularizer(tape, bb, cfg.beta_thres)?;
        reg_terms.push(tape.add(ra, rb)?);
    }
    let ce = mean_of(tape, &ce_terms)?;
    let reg = mean_of(tape, &reg_terms)?;
    let weighted = tape.mul_scalar(reg, cfg.gamma)?;
    let loss = tape.add(ce, weighted)?;
    let n = batch.len() as f64;
    let stats = BatchStats {
        loss: tape.item(loss),
        ce: tape.item(ce),
        reg: tape.item(reg),
        beta_a: sa / n,
        beta_b: sb / n,
        beta_trn: st / n,
    };
    let mut params = vars.backbone.vars.clone();
    params.extend(vars.temperature.vars());
    Ok((loss, stats, params))
}

fn mean_of(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    let mut acc = *terms.first().ok_or_else(|| Error::Domain("empty batch".into()))?;
    for t in &terms[1..] {
        acc = tape.add(acc, *t)?;
    }
    tape.div_scalar(acc, terms.len() as f64)
}

/// Mean `|g|` over each layer's weight and bias.
fn layer_grad_abs(grads: &[Vec<f64>], layers: usize) -> Vec<f64> {
    (0..layers)
        .map(|l| {
            let (w, b) = (&grads[2 * l], &grads[2 * l + 1]);
            let n = (w.len() + b.len()) as f64;
            (w.iter().chain(b).map(|g| g.abs()).sum::<f64>()) / n
        })
        .collect()
}

fn is_numeric_failure(e: &Error) -> bool {
    matches!(e, Error::NonFinite { .. } | Error::Domain(_))
}

/// Validation PCK at [`LOG_ALPHAS`], best over `betas`.
pub fn validation_pck(model: &Model, pairs: &[LoadedPair], betas: &[f64], sigma: f64, convention: ThresholdConvention) -> Result<[f64; 3]> {
    let results = evaluate_sweep(model, pairs, betas, &LOG_ALPHAS, sigma, convention)?;
    let best = results
        .iter()
        .max_by(|a, b| a.1.per_alpha[1].total_cmp(&b.1.per_alpha[1]))
        .expect("non-empty sweep");
    Ok([best.1.per_alpha[0], best.1.per_alpha[1], best.1.per_alpha[2]])
}

/// PCK of `model` on `pairs` for each `β_eval` in `betas`.
pub fn evaluate_sweep(
    model: &Model,
    pairs: &[LoadedPair],
    betas: &[f64],
    alphas: &[f64],
    sigma: f64,
    convention: ThresholdConvention,
) -> Result<Vec<(f64, PckResult)>> {
    if pairs.is_empty() {
        return Err(Error::Domain("no pairs to evaluate".into()));
    }
    let scores: Vec<_> = pairs
        .iter()
        .map(|p| {
            let queries: Vec<_> = p.set.pairs.iter().map(|(a, _)| *a).collect();
            model.score_pair(&p.image_a, &p.image_b, &queries)
        })
        .collect::<Result<_>>()?;
    let sets: Vec<_> = pairs.iter().map(|p| p.set.clone()).collect();
    betas
        .iter()
        .map(|&beta_eval| {
            let loc = LocalizerConfig { sigma, beta_eval };
            let preds: Vec<_> = scores.iter().map(|s| s.predict(&loc)).collect::<Result<_>>()?;
            Ok((beta_eval, evaluate(&preds, &sets, alphas, convention, Aggregation::MeanOverPairs)?))
        })
        .collect()
}

/// Trains from a fresh initialization. Rows are appended to `log` as
/// each epoch finishes; `observer` sees every optimizer step.
pub fn train(
    cfg: &ExperimentConfig,
    train_pairs: &[LoadedPair],
    val_pairs: &[LoadedPair],
    log: Option<&Path>,
    mut observer: Option<&mut dyn FnMut(&StepRecord)>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_pairs.is_empty() || val_pairs.is_empty() {
        return Err(Error::Config("training and validation sets must be non-empty".into()));
    }
    let mut model = Model::init(cfg.backbone.clone(), cfg.mode, cfg.normalization, cfg.seed)?;
    if cfg.pretrain_epochs > 0 {
        pretrain(&mut model, cfg, train_pairs)?;
    }
    let layers = cfg.backbone.depth + 1;
    let mut writer = match log {
        Some(p) => {
            let mut w = csv::Writer::from_path(p).map_err(csv_io)?;
            w.write_record(TrainLogRow::header(layers)).map_err(csv_io)?;
            w.flush()?;
            Some(w)
        }
        None => None,
    };
    let trainable = model.backbone.trainable_parameters(cfg.finetune_scope);
    let n_backbone = model.backbone.tensors().len();
    let temp_lr = match cfg.mode {
        TemperatureMode::SingleParam(_) => cfg.lr_single,
        _ => cfg.lr_temp,
    };
    let mut lrs: Vec<f64> = (0..n_backbone).map(|i| if trainable.contains(&i) { cfg.lr_backbone } else { 0.0 }).collect();
    lrs.extend(model.temperature.tensors().iter().map(|_| temp_lr));
    let lengths: Vec<usize> = model
        .backbone
        .tensors()
        .into_iter()
        .chain(model.temperature.tensors())
        .map(|t| t.len())
        .collect();
    let mut adam = Adam::new(&lengths);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_7a1e);
    let mut order: Vec<usize> = (0..train_pairs.len()).collect();
    let val_betas = cfg.validation_betas();
    let mut rows = Vec::new();
    let mut best: Option<(Model, usize, f64)> = None;
    let mut step = 0usize;
    let mut beta_trn_now = model_beta_hint(&model);
    let mut final_beta_trn = beta_trn_now;
    'epochs: for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 6];
        let mut grad_sum = vec![0.0; layers];
        let mut batches = 0usize;
        let mut clip_events = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| step >= m) {
                break;
            }
            let batch: Vec<&LoadedPair> = chunk.iter().map(|i| &train_pairs[*i]).collect();
            let mut tape = Tape::new();
            let diverged = |reason: String, beta_trn: f64| Error::Diverged {
                step: step + 1,
                beta_trn,
                reason,
            };
            let (loss, stats, params) = match batch_loss(&mut tape, &model, cfg, &batch, cfg.finetune_scope) {
                Ok(v) => v,
                Err(e) if is_numeric_failure(&e) => return Err(diverged(e.to_string(), beta_trn_now)),
                Err(e) => return Err(e),
            };
            beta_trn_now = stats.beta_trn;
            tape.backward(loss).map_err(|e| diverged(e.to_string(), beta_trn_now))?;
            let mut grads: Vec<Vec<f64>> = params.iter().map(|v| tape.grad_or_zeros(*v)).collect();
            let grad_abs = layer_grad_abs(&grads, layers);
            let (norm, clipped) = clip_global_norm(&mut grads, cfg.grad_clip);
            if !norm.is_finite() {
                return Err(diverged("non-finite gradient".into(), beta_trn_now));
            }
            {
                let mut slots = model.backbone.tensors_mut();
                slots.extend(model.temperature.tensors_mut());
                adam.step(&mut slots, &grads, &lrs)?;
            }
            model.temperature.project();
            if !model.all_finite() {
                return Err(diverged("non-finite weights after update".into(), beta_trn_now));
            }
            step += 1;
            batches += 1;
            clip_events += usize::from(clipped);
            for (s, v) in sums.iter_mut().zip([stats.loss, stats.ce, stats.reg, stats.beta_a, stats.beta_b, stats.beta_trn]) {
                *s += v;
            }
            for (s, g) in grad_sum.iter_mut().zip(&grad_abs) {
                *s += g;
            }
            if let Some(obs) = observer.as_deref_mut() {
                obs(&StepRecord {
                    step,
                    epoch,
                    loss: stats.loss,
                    beta_trn: stats.beta_trn,
                    grad_abs,
                    grad_norm: norm,
                    clipped,
                });
            }
        }
        if batches == 0 {
            break 'epochs;
        }
        let b = batches as f64;
        let pck = validation_pck(&model, val_pairs, &val_betas, cfg.sigma, cfg.convention)?;
        let row = TrainLogRow {
            step,
            epoch,
            loss: sums[0] / b,
            ce: sums[1] / b,
            reg: sums[2] / b,
            beta_a: sums[3] / b,
            beta_b: sums[4] / b,
            beta_trn: sums[5] / b,
            pck,
            grad_abs: grad_sum.iter().map(|g| g / b).collect(),
            clip_events,
        };
        final_beta_trn = row.beta_trn;
        if let Some(w) = writer.as_mut() {
            w.write_record(row.record()).map_err(csv_io)?;
            w.flush()?;
        }
        if best.as_ref().map_or(true, |(_, _, p)| pck[1] > *p) {
            best = Some((model.clone(), epoch, pck[1]));
        }
        rows.push(row);
    }
    let (best_model, best_epoch, best_pck) = match best {
        Some(b) => b,
        None => {
            let pck = validation_pck(&model, val_pairs, &val_betas, cfg.sigma, cfg.convention)?;
            (model.clone(), 0, pck[1])
        }
    };
    Ok(TrainOutcome {
        rows,
        best: best_model,
        best_epoch,
        best_pck,
        final_beta_trn,
        last: model,
        steps: step,
    })
}

fn model_beta_hint(model: &Model) -> f64 {
    match model.mode() {
        TemperatureMode::Manual(b) => b,
        TemperatureMode::SingleParam(b) => b * b,
        TemperatureMode::Unit => 1.0,
        TemperatureMode::LearnedMlp => 0.25,
    }
}

fn csv_io(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Format {
            path: PathBuf::from("<csv>"),
            reason: format!("{other:?}"),
        },
    }
}

/// Self-supervised warm-up: each training image is matched against a
/// brightness- and contrast-jittered copy of itself at a fixed temperature.
fn pretrain(model: &mut Model, cfg: &ExperimentConfig, pairs: &[LoadedPair]) -> Result<()> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9);
    let lengths: Vec<usize> = model.backbone.tensors().iter().map(|t| t.len()).collect();
    let mut adam = Adam::new(&lengths);
    let lrs = vec![cfg.lr_backbone; lengths.len()];
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    for _ in 0..cfg.pretrain_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let vars = model.backbone.register(&mut tape, FinetuneScope::Full);
            let fixed = tape.scalar(0.1f64.sqrt());
            let mut terms = Vec::new();
            for &i in chunk {
                let img = &pairs[i].image_a;
                let (c, b) = (rng.gen_range(0.75..1.25), rng.gen_range(-0.1..0.1));
                let data = img.data.data().iter().map(|v| (c * (v - 0.5) + 0.5 + b).clamp(0.0, 1.0)).collect();
                let twin = crate::backbone::Image::new(img.channels, img.height, img.width, data)?;
                let fa = extract_features(&mut tape, img, &vars)?;
                let fb = extract_features(&mut tape, &twin, &vars)?;
                let corr = build_correlation(&mut tape, &fa, &fb, Normalization::L2, fixed, fixed)?;
                let (h, w) = corr.source;
                for k in (0..h * w).step_by(3) {
                    let p = crate::point::Point::new((k / w) as f64, (k % w) as f64);
                    let m = extract_score_map(&mut tape, &corr, p)?;
                    let mut target = vec![0.0; h * w];
                    target[k] = 1.0;
                    terms.push(tape.cross_entropy(m.data, &target)?);
                }
            }
            let loss = mean_of(&mut tape, &terms)?;
            tape.backward(loss)?;
            let mut grads: Vec<Vec<f64>> = vars.vars.iter().map(|v| tape.grad_or_zeros(*v)).collect();
            clip_global_norm(&mut grads, cfg.grad_clip);
            adam.step(&mut model.backbone.tensors_mut(), &grads, &lrs)?;
        }
    }
    Ok(())
}

/// Worker count from [`THREADS_ENV`], at least 1.
pub fn thread_budget() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|s| s.trim().parse::<usize>().ok())
        .filter(|n| *n > 0)
        .unwrap_or(1)
}

/// Runs `f` over `items` with at most `threads` workers, keeping input order.
pub fn par_map<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let threads = threads.clamp(1, items.len().max(1));
    if threads == 1 {
        return items.iter().map(&f).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut slots: Vec<Option<R>> = (0..items.len()).map(|_| None).collect();
    let results = std::sync::Mutex::new(&mut slots);
    std::thread::scope(|s| {
        for _ in 0..threads {
            s.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                results.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    slots.into_iter().map(|r| r.expect("every item processed")).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    Diverged,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridRow {
    pub beta: f64,
    pub pck_005: f64,
    pub pck_01: f64,
    pub status: RunStatus,
    pub detail: Option<String>,
}

/// Trains one manual-temperature model per β. Diverged runs are recorded
/// instead of aborting the sweep.
pub fn grid_temp(base: &ExperimentConfig, betas: &[f64], train_pairs: &[LoadedPair], val_pairs: &[LoadedPair], threads: usize) -> Result<Vec<GridRow>> {
    if betas.is_empty() {
        return Err(Error::Config("empty temperature grid".into()));
    }
    for b in betas {
        TemperatureMode::Manual(*b).validate().map_err(|e| Error::Config(e.to_string()))?;
    }
    let runs = par_map(betas, threads, |&beta| {
        let cfg = ExperimentConfig {
            mode: TemperatureMode::Manual(beta),
            beta_eval: Some(1.0),
            ..base.clone()
        };
        (beta, train(&cfg, train_pairs, val_pairs, None, None))
    });
    runs.into_iter()
        .map(|(beta, r)| match r {
            Ok(out) => {
                let pck_005 = out.best_epoch.checked_sub(1).and_then(|i| out.rows.get(i)).map_or(f64::NAN, |r| r.pck[0]);
                Ok(GridRow {
                    beta,
                    pck_005,
                    pck_01: out.best_pck,
                    status: RunStatus::Ok,
                    detail: None,
                })
            }
            Err(e @ Error::Diverged { .. }) => Ok(GridRow {
                beta,
                pck_005: f64::NAN,
                pck_01: f64::NAN,
                status: RunStatus::Diverged,
                detail: Some(e.to_string()),
            }),
            Err(e) => Err(e),
        })
        .collect()
}

pub fn write_grid_csv(path: &Path, rows: &[GridRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_io)?;
    w.write_record(["beta", "pck_005", "pck_01", "status"]).map_err(csv_io)?;
    for r in rows {
        let status = match r.status {
            RunStatus::Ok => "ok",
            RunStatus::Diverged => "diverged",
        };
        w.write_record([r.beta.to_string(), r.pck_005.to_string(), r.pck_01.to_string(), status.to_string()])
            .map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

/// The three configurations compared by [`grad_analysis`].
pub fn grad_configs(base: &ExperimentConfig) -> Vec<(&'static str, ExperimentConfig)> {
    vec![
        (
            "with_l2norm",
            ExperimentConfig {
                mode: TemperatureMode::Unit,
                normalization: Normalization::L2,
                ..base.clone()
            },
        ),
        (
            "no_l2norm",
            ExperimentConfig {
                mode: TemperatureMode::Unit,
                normalization: Normalization::None,
                ..base.clone()
            },
        ),
        (
            "simsc",
            ExperimentConfig {
                mode: TemperatureMode::LearnedMlp,
                normalization: Normalization::L2,
                ..base.clone()
            },
        ),
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradRow {
    pub config: String,
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub beta_trn: f64,
    /// Mean `|grad|` of the backbone's last layer.
    pub grad_last: f64,
}

/// Trains each configuration with identical seeds and records the last
/// layer's mean absolute gradient at every step.
pub fn grad_analysis(
    configs: &[(&str, ExperimentConfig)],
    train_pairs: &[LoadedPair],
    val_pairs: &[LoadedPair],
    threads: usize,
) -> Result<Vec<GradRow>> {
    let runs = par_map(configs, threads, |(name, cfg)| {
        let mut rows = Vec::new();
        let mut obs = |s: &StepRecord| {
            rows.push(GradRow {
                config: name.to_string(),
                step: s.step,
                epoch: s.epoch,
                loss: s.loss,
                beta_trn: s.beta_trn,
                grad_last: *s.grad_abs.last().expect("at least one layer"),
            })
        };
        train(cfg, train_pairs, val_pairs, None, Some(&mut obs)).map(|_| rows)
    });
    let mut out = Vec::new();
    for r in runs {
        out.extend(r?);
    }
    Ok(out)
}

pub fn write_grad_csv(path: &Path, rows: &[GradRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_io)?;
    w.write_record(["config", "step", "epoch", "loss", "beta_trn", "grad_last"]).map_err(csv_io)?;
    for r in rows {
        w.write_record([
            r.config.clone(),
            r.step.to_string(),
            r.epoch.to_string(),
            r.loss.to_string(),
            r.beta_trn.to_string(),
            r.grad_last.to_string(),
        ])
        .map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `value` as pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    Ok(())
}
