//! Two-phase pipeline: classification training that yields fine CAMs,
//! CAM-to-seed conversion, and online retraining of a segmentation decoder
//! with gradient clipping. Everything runs in `f32` on one thread; given the
//! same configs and seeds every run is bit-reproducible.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cam::{AafConfig, CamBundle, CamModel, Fusion};
use crate::data::{LabelMap, Sample};
use crate::decoder::{clip_report, per_pixel_ce, DecoderConfig, GateScope, Prediction, SegDecoder};
use crate::error::{Result, WeakTrError};
use crate::graph::{Graph, Var, IGNORE_LABEL};
use crate::metrics::{agreement, evaluate, EvalReport};
use crate::optim::{AdamW, Optimizer, Schedule, Sgd};
use crate::param::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::{upsample_bilinear, Tensor};
use crate::vit::{Encoder, EncoderConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Cam,
    Retrain,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    AdamW,
    Sgd,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Cosine,
    Polynomial,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub phase: Phase,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub schedule: ScheduleKind,
    /// Multiplier on the learning rate of `encoder.*` parameters.
    pub encoder_lr_scale: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub poly_power: f64,
    #[serde(default)]
    pub hflip: bool,
    pub seed: u64,
    #[serde(default)]
    pub init_checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub out_checkpoint: Option<PathBuf>,
}

impl TrainConfig {
    /// Classification phase: AdamW, warmup then cosine decay.
    pub fn cam() -> Self {
        Self {
            phase: Phase::Cam,
            epochs: 30,
            batch_size: 8,
            optimizer: OptimizerKind::AdamW,
            base_lr: 2e-3,
            warmup_epochs: 2,
            schedule: ScheduleKind::Cosine,
            encoder_lr_scale: 1.0,
            weight_decay: 0.05,
            momentum: 0.9,
            poly_power: 0.9,
            hflip: false,
            seed: 0,
            init_checkpoint: None,
            out_checkpoint: None,
        }
    }

    /// Retraining phase: polynomial decay, slower encoder. Adaptive moments
    /// by default; momentum SGD is selectable.
    pub fn retrain() -> Self {
        Self {
            phase: Phase::Retrain,
            epochs: 10,
            batch_size: 8,
            optimizer: OptimizerKind::AdamW,
            base_lr: 1e-3,
            warmup_epochs: 0,
            schedule: ScheduleKind::Polynomial,
            encoder_lr_scale: 0.1,
            weight_decay: 0.0,
            momentum: 0.9,
            poly_power: 0.9,
            hflip: false,
            seed: 0,
            init_checkpoint: None,
            out_checkpoint: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(WeakTrError::Config("epochs and batch_size must be >= 1".into()));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(WeakTrError::Config(format!("learning rate {}", self.base_lr)));
        }
        if !(self.encoder_lr_scale >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(WeakTrError::Config("encoder_lr_scale >= 0 and momentum in [0,1) required".into()));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, samples: usize) -> usize {
        samples.div_ceil(self.batch_size)
    }

    pub fn lr_schedule(&self, samples: usize) -> Schedule {
        let per = self.steps_per_epoch(samples);
        let warmup_steps = self.warmup_epochs * per;
        let total_steps = self.epochs * per;
        match self.schedule {
            ScheduleKind::Cosine => Schedule::WarmupCosine {
                warmup_steps,
                total_steps,
            },
            ScheduleKind::Polynomial => Schedule::Polynomial {
                warmup_steps,
                total_steps,
                power: self.poly_power,
            },
        }
    }

    fn optimizer(&self, store: &ParamStore<f32>) -> Box<dyn Optimizer<f32>> {
        let scale = self.encoder_lr_scale;
        let group = move |name: &str| if name.starts_with("encoder.") { scale } else { 1.0 };
        match self.optimizer {
            OptimizerKind::AdamW => Box::new(AdamW::new(store, self.weight_decay).with_lr_scale(group, store)),
            OptimizerKind::Sgd => {
                Box::new(Sgd::new(store, self.momentum, self.weight_decay).with_lr_scale(group, store))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedConfig {
    /// β: minimum normalized score for a foreground label.
    pub background_threshold: f64,
    /// Scores in `[lo, hi)` become the ignore label.
    #[serde(default)]
    pub ignore_band: Option<[f64; 2]>,
}

impl Default for SeedConfig {
    fn default() -> Self {
        Self {
            background_threshold: 0.40,
            ignore_band: None,
        }
    }
}

impl SeedConfig {
    pub fn validate(&self) -> Result<()> {
        let b = self.background_threshold;
        if !(b > 0.0 && b < 1.0) {
            return Err(WeakTrError::Config(format!("background threshold {b} outside (0,1)")));
        }
        if let Some([lo, hi]) = self.ignore_band {
            if !(lo <= hi) {
                return Err(WeakTrError::Config(format!("ignore band [{lo}, {hi}]")));
            }
        }
        Ok(())
    }
}

/// Config file of the classification phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CamConfig {
    pub model: EncoderConfig,
    #[serde(default)]
    pub aaf: AafConfig,
    #[serde(default)]
    pub fusion: Fusion,
    pub train: TrainConfig,
}

impl Default for CamConfig {
    fn default() -> Self {
        Self {
            model: EncoderConfig::default(),
            aaf: AafConfig::default(),
            fusion: Fusion::Adaptive,
            train: TrainConfig::cam(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClipMode {
    /// Plain cross-entropy on every non-ignored seed pixel.
    Naive,
    /// Gated gradient clipping.
    #[default]
    Clip,
    /// Upper bound: keep exactly the pixels where seed and ground truth agree.
    GtClip,
}

/// Config file of the retraining phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrainConfig {
    #[serde(default)]
    pub decoder: DecoderConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub mode: ClipMode,
}

impl Default for RetrainConfig {
    fn default() -> Self {
        Self {
            decoder: DecoderConfig::default(),
            train: TrainConfig::retrain(),
            mode: ClipMode::Clip,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

pub struct CamRun {
    pub model: CamModel,
    pub store: ParamStore<f32>,
    pub curve: Vec<EpochLog>,
}

fn batches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch).map(|c| c.to_vec()).collect()
}

fn check_loss(step: usize, loss: f32) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(WeakTrError::Divergence {
            step,
            loss: loss as f64,
        })
    }
}

fn mean_of(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len().max(1) as f64
}

/// Builds the CAM model (initialized from `cfg.model.seed`) and trains it on
/// image-level labels only.
pub fn train_cam(cfg: &CamConfig, samples: &[Sample]) -> Result<CamRun> {
    let mut store = ParamStore::new();
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.model.seed);
    let model = CamModel::new(&cfg.model, &cfg.aaf, cfg.fusion.clone(), &mut store, &mut init_rng)?;
    let curve = train_cam_from(&model, &mut store, &cfg.train, samples)?;
    Ok(CamRun { model, store, curve })
}

/// Trains an existing model in place and returns the per-epoch loss curve.
pub fn train_cam_from(
    model: &CamModel,
    store: &mut ParamStore<f32>,
    train: &TrainConfig,
    samples: &[Sample],
) -> Result<Vec<EpochLog>> {
    train.validate()?;
    if samples.is_empty() {
        return Err(WeakTrError::Config("empty training split".into()));
    }
    let schedule = train.lr_schedule(samples.len());
    let mut opt = train.optimizer(store);
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut curve = Vec::with_capacity(train.epochs);
    let mut step = 0;
    for epoch in 0..train.epochs {
        let mut losses = Vec::with_capacity(samples.len());
        let mut lr = 0.0;
        for batch in batches(samples.len(), train.batch_size, &mut rng) {
            lr = schedule.lr(train.base_lr, step);
            store.zero_grad();
            let inv = 1.0 / batch.len() as f32;
            for &i in &batch {
                let flip = train.hflip && rng.gen_bool(0.5);
                let sample = if flip { samples[i].hflip() } else { samples[i].clone() };
                let mut g = Graph::new();
                let fwd = model.forward(&mut g, store, &sample.image)?;
                let loss = model.loss_var(&mut g, &fwd, &sample.label)?;
                let value = g.value(loss).item();
                check_loss(step, value)?;
                losses.push(value as f64);
                g.backward_into(loss, inv, store)?;
            }
            opt.step(store, lr);
            step += 1;
        }
        curve.push(EpochLog {
            epoch,
            lr,
            loss: mean_of(&losses),
        });
    }
    Ok(curve)
}

/// Per-sample CAM bundles and the three logit vectors.
pub fn infer_cams(
    model: &CamModel,
    store: &ParamStore<f32>,
    samples: &[Sample],
) -> Result<Vec<(CamBundle<f32>, [Tensor<f32>; 3])>> {
    samples
        .iter()
        .map(|s| model.infer_with_logits(store, &s.image))
        .collect()
}

/// Converts an `N×N×C` CAM into an `O×O` seed map. Inactive classes are
/// dropped, each active channel is min-max normalized over its `N×N` values
/// (a constant channel counts as fully on), and each pixel takes its best class if that score
/// reaches β, else background.
pub fn cam_to_seeds(cam: &Tensor<f32>, label: &[f32], cfg: &SeedConfig, o: usize) -> Result<LabelMap> {
    cfg.validate()?;
    let [n, m, c] = *cam.shape() else {
        return Err(WeakTrError::shape(format!("CAM must be N×N×C, got {:?}", cam.shape())));
    };
    if n != m || label.len() != c {
        return Err(WeakTrError::shape(format!(
            "CAM {:?} with {} labels",
            cam.shape(),
            label.len()
        )));
    }
    let active: Vec<usize> = (0..c).filter(|&k| label[k] > 0.5).collect();
    if active.is_empty() {
        return Ok(LabelMap::filled(o, 0));
    }
    let up = upsample_bilinear(cam, o, o)?;
    let data = up.data();
    let mut norm = vec![0f32; o * o * active.len()];
    for (a, &k) in active.iter().enumerate() {
        // Bilinear output stays within the source range, so the source extremes normalize it.
        let channel = cam.data().iter().skip(k).step_by(c);
        let (lo, hi) = channel.fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let range = hi - lo;
        for p in 0..o * o {
            norm[p * active.len() + a] = if range > 0.0 {
                ((data[p * c + k] - lo) / range).clamp(0.0, 1.0)
            } else {
                1.0
            };
        }
    }
    let beta = cfg.background_threshold as f32;
    let labels = norm
        .chunks(active.len())
        .map(|scores| {
            let (best, &score) = scores
                .iter()
                .enumerate()
                .fold((0, &f32::NEG_INFINITY), |acc, x| if *x.1 > *acc.1 { x } else { acc });
            if let Some([lo, hi]) = cfg.ignore_band {
                if score >= lo as f32 && score < hi as f32 {
                    return IGNORE_LABEL;
                }
            }
            if score >= beta {
                active[best] as u8 + 1
            } else {
                0
            }
        })
        .collect();
    LabelMap::new(o, labels)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CamKind {
    Fine,
    Coarse,
}

/// Seed maps for every sample from the fine or coarse CAM.
pub fn seeds_for(
    model: &CamModel,
    store: &ParamStore<f32>,
    samples: &[Sample],
    cfg: &SeedConfig,
    kind: CamKind,
) -> Result<Vec<LabelMap>> {
    samples
        .iter()
        .map(|s| {
            let b = model.infer(store, &s.image)?;
            let cam = match kind {
                CamKind::Fine => &b.cam_fine,
                CamKind::Coarse => &b.cam_coarse,
            };
            cam_to_seeds(cam, &s.label, cfg, s.gt_mask.size)
        })
        .collect()
}

/// Replaces a `rate` fraction of non-ignored pixels by a different label drawn
/// uniformly from `0..=num_classes`.
pub fn corrupt_seeds(seeds: &[LabelMap], rate: f64, num_classes: usize, seed: u64) -> Vec<LabelMap> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    seeds
        .iter()
        .map(|s| {
            let mut out = s.clone();
            for l in out.labels.iter_mut() {
                if *l != IGNORE_LABEL && rng.gen_bool(rate) {
                    let shift = rng.gen_range(1..=num_classes) as u8;
                    *l = (*l + shift) % (num_classes as u8 + 1);
                }
            }
            out
        })
        .collect()
}

/// Encoder plus segmentation decoder sharing one parameter store.
#[derive(Clone, Debug)]
pub struct SegModel {
    pub encoder: Encoder,
    pub decoder: SegDecoder,
    pub enc_cfg: EncoderConfig,
    pub dec_cfg: DecoderConfig,
}

impl SegModel {
    pub fn new<T: Scalar>(
        enc_cfg: &EncoderConfig,
        dec_cfg: &DecoderConfig,
        store: &mut ParamStore<T>,
        seed: u64,
    ) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::new(enc_cfg, store, &mut rng)?;
        let decoder = SegDecoder::new(enc_cfg, dec_cfg, store, &mut rng)?;
        Ok(Self {
            encoder,
            decoder,
            enc_cfg: enc_cfg.clone(),
            dec_cfg: dec_cfg.clone(),
        })
    }

    /// Logits `O×O×C_seg`.
    pub fn forward_var<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, image: &Tensor<T>) -> Result<Var> {
        let enc = self.encoder.forward_var(g, store, image)?;
        self.decoder.forward_var(g, store, enc.tokens, self.enc_cfg.num_classes)
    }

    pub fn predict<T: Scalar>(&self, store: &ParamStore<T>, image: &Tensor<T>) -> Result<Prediction<T>> {
        let mut g = Graph::new();
        let out = self.forward_var(&mut g, store, image)?;
        Ok(Prediction {
            logits: g.value(out).clone(),
        })
    }

    pub fn evaluate(&self, store: &ParamStore<f32>, samples: &[Sample]) -> Result<EvalReport> {
        let preds = samples
            .iter()
            .map(|s| Ok(self.predict(store, &s.image)?.argmax()))
            .collect::<Result<Vec<_>>>()?;
        let gts: Vec<LabelMap> = samples.iter().map(|s| s.gt_mask.clone()).collect();
        evaluate(&preds, &gts, self.decoder.num_classes())
    }
}

/// Diagnostics of one retraining step. Agreement is seed-vs-ground-truth,
/// read-only, over retained pixels and over all non-ignored seed pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub lambda_global: f64,
    pub gated: bool,
    pub gated_fraction: f64,
    pub retained_fraction: f64,
    pub agreement_retained: Option<f64>,
    pub agreement_all: Option<f64>,
}

pub struct RetrainRun {
    pub model: SegModel,
    pub store: ParamStore<f32>,
    pub curve: Vec<EpochLog>,
    pub steps: Vec<StepLog>,
}

fn ratio(counts: (usize, usize)) -> Option<f64> {
    (counts.1 > 0).then(|| counts.0 as f64 / counts.1 as f64)
}

/// Online retraining on `seeds`. Encoder parameters present in `init` are
/// copied before training.
pub fn retrain(
    enc_cfg: &EncoderConfig,
    init: Option<&ParamStore<f32>>,
    cfg: &RetrainConfig,
    samples: &[Sample],
    seeds: &[LabelMap],
) -> Result<RetrainRun> {
    let train = &cfg.train;
    train.validate()?;
    if samples.is_empty() || samples.len() != seeds.len() {
        return Err(WeakTrError::Config(format!(
            "{} samples with {} seed maps",
            samples.len(),
            seeds.len()
        )));
    }
    let mut store = ParamStore::new();
    let model = SegModel::new(enc_cfg, &cfg.decoder, &mut store, enc_cfg.seed)?;
    if let Some(init) = init {
        store.load_matching(init)?;
    }
    let o = cfg.decoder.output_size;
    let c_seg = model.decoder.num_classes();
    let schedule = train.lr_schedule(samples.len());
    let mut opt = train.optimizer(&store);
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut curve = Vec::new();
    let mut steps = Vec::new();
    let mut step = 0;
    for epoch in 0..train.epochs {
        let mut losses = Vec::new();
        let mut lr = 0.0;
        for batch in batches(samples.len(), train.batch_size, &mut rng) {
            lr = schedule.lr(train.base_lr, step);
            store.zero_grad();
            let mut items = Vec::with_capacity(batch.len());
            for &i in &batch {
                let flip = train.hflip && rng.gen_bool(0.5);
                let (image, seed_map, gt) = if flip {
                    let s = samples[i].hflip();
                    (s.image, seeds[i].hflip(), s.gt_mask)
                } else {
                    (samples[i].image.clone(), seeds[i].clone(), samples[i].gt_mask.clone())
                };
                let mut g = Graph::new();
                let logits = model.forward_var(&mut g, &store, &image)?;
                let pred = Prediction {
                    logits: g.value(logits).clone(),
                };
                let ce = per_pixel_ce(&pred, &seed_map)?;
                items.push((g, logits, ce, seed_map, gt));
            }
            let reports = items
                .iter()
                .map(|(_, _, ce, s, _)| clip_report(ce, s, &cfg.decoder, None))
                .collect::<Result<Vec<_>>>()?;
            let batch_lambda = mean_of(&reports.iter().map(|r| r.lambda_global as f64).collect::<Vec<_>>());
            let inv = 1.0 / batch.len() as f32;
            let (mut kept, mut all) = ((0, 0), (0, 0));
            let (mut gated_n, mut retained_px, mut valid_px) = (0usize, 0usize, 0usize);
            let mut batch_loss = 0.0;
            for ((g, logits, ce, seed_map, gt), report) in items.iter_mut().zip(reports) {
                let keep: Vec<bool> = match cfg.mode {
                    ClipMode::Naive => seed_map.valid(),
                    ClipMode::GtClip => seed_map
                        .labels
                        .iter()
                        .zip(&gt.labels)
                        .map(|(&s, &t)| s != IGNORE_LABEL && s == t)
                        .collect(),
                    ClipMode::Clip => {
                        let gate = match cfg.decoder.gate_scope {
                            GateScope::Batch => batch_lambda as f32,
                            GateScope::PerImage => report.lambda_global,
                        };
                        let report = clip_report(ce, seed_map, &cfg.decoder, Some(gate))?;
                        gated_n += usize::from(report.gated);
                        report.retained(seed_map)?
                    }
                };
                if cfg.mode == ClipMode::GtClip {
                    gated_n += 1;
                }
                let valid = seed_map.valid();
                retained_px += keep.iter().filter(|&&k| k).count();
                valid_px += valid.iter().filter(|&&k| k).count();
                if let Some((a, t)) = agreement(seed_map, gt, Some(&keep)) {
                    kept = (kept.0 + a, kept.1 + t);
                }
                if let Some((a, t)) = agreement(seed_map, gt, None) {
                    all = (all.0 + a, all.1 + t);
                }
                let flat = g.reshape(*logits, &[o * o, c_seg])?;
                let per_pixel = g.softmax_cross_entropy(flat, &seed_map.labels)?;
                let mask: Vec<f32> = keep.iter().map(|&k| if k { 1.0 } else { 0.0 }).collect();
                let loss = g.masked_mean(per_pixel, &mask)?;
                let value = g.value(loss).item();
                check_loss(step, value)?;
                batch_loss += value as f64 / batch.len() as f64;
                g.backward_into(loss, inv, &mut store)?;
            }
            opt.step(&mut store, lr);
            losses.push(batch_loss);
            steps.push(StepLog {
                step,
                lr,
                loss: batch_loss,
                lambda_global: batch_lambda,
                gated: gated_n > 0,
                gated_fraction: gated_n as f64 / batch.len() as f64,
                retained_fraction: retained_px as f64 / valid_px.max(1) as f64,
                agreement_retained: ratio(kept),
                agreement_all: ratio(all),
            });
            step += 1;
        }
        curve.push(EpochLog {
            epoch,
            lr,
            loss: mean_of(&losses),
        });
    }
    Ok(RetrainRun {
        model,
        store,
        curve,
        steps,
    })
}
