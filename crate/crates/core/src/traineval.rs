//! Class weighting, the poly schedule, overlap-restricted IoU and the
//! training loop.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{update_running_stats, Ctx};
use crate::error::{Error, Result};
use crate::numcore::{Graph, ParamStore, Sgd, SgdConfig, Var};
use crate::pyfu::{argmax, Head, PyFu};
use crate::rangeview::{augment_with, crop_raster, AugmentOps, Sample};
use crate::IGNORE_LABEL;

pub const POLY_POWER: f64 = 0.9;

/// `base · (1 − (i / i_max)^0.9)`; `i` is clamped to `[0, i_max]`.
pub fn poly_lr(i: usize, i_max: usize, base: f64) -> f64 {
    poly_lr_with(i, i_max, base, POLY_POWER)
}

pub fn poly_lr_with(i: usize, i_max: usize, base: f64, power: f64) -> f64 {
    let frac = i.min(i_max) as f64 / i_max.max(1) as f64;
    base * (1.0 - frac.powf(power))
}

/// Inverse-frequency weights `ln(n / n_c)`. Classes with no samples get the
/// weight of the rarest present class.
pub fn class_weights(hist: &[u64]) -> Result<Vec<f64>> {
    let n: u64 = hist.iter().sum();
    if n == 0 {
        return Err(Error::invalid("class_weights", "histogram is empty"));
    }
    let present: Vec<u64> = hist.iter().copied().filter(|c| *c > 0).collect();
    if present.len() == 1 {
        return Err(Error::invalid(
            "class_weights",
            "a single class holds every sample, so ln(n / n_c) = 0",
        ));
    }
    let rarest = *present.iter().min().expect("non-empty");
    Ok(hist
        .iter()
        .map(|&c| (n as f64 / if c == 0 { rarest } else { c } as f64).ln())
        .collect())
}

pub fn label_histogram(labels: impl IntoIterator<Item = u8>, classes: usize) -> Result<Vec<u64>> {
    let mut hist = vec![0u64; classes];
    for l in labels {
        if l == IGNORE_LABEL {
            continue;
        }
        *hist.get_mut(l as usize).ok_or(Error::LabelOutOfRange {
            label: l as usize,
            classes,
        })? += 1;
    }
    Ok(hist)
}

/// Rows are ground truth, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::invalid("confusion matrix", "rows must form a square"));
        }
        Ok(ConfusionMatrix {
            classes: k,
            counts: rows.concat(),
        })
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::invalid(
                "confusion matrix",
                format!("cannot merge {} and {} classes", self.classes, other.classes),
            ));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Share of counted elements on the diagonal.
    pub fn accuracy(&self) -> f64 {
        let diag: u64 = (0..self.classes).map(|c| self.get(c, c)).sum();
        diag as f64 / self.total().max(1) as f64
    }
}

/// Counts `(target, prediction)` pairs where `mask` (when given) is set and the
/// target is not ignored.
pub fn confusion_update(cm: &mut ConfusionMatrix, predictions: &[u8], targets: &[u8], mask: Option<&[bool]>) -> Result<()> {
    if predictions.len() != targets.len() || mask.is_some_and(|m| m.len() != targets.len()) {
        return Err(Error::invalid(
            "confusion_update",
            format!(
                "{} predictions, {} targets, {:?} mask entries",
                predictions.len(),
                targets.len(),
                mask.map(<[bool]>::len)
            ),
        ));
    }
    let k = cm.classes;
    for (i, (&p, &t)) in predictions.iter().zip(targets).enumerate() {
        if t == IGNORE_LABEL || mask.is_some_and(|m| !m[i]) {
            continue;
        }
        let (p, t) = (p as usize, t as usize);
        if p >= k || t >= k {
            return Err(Error::LabelOutOfRange {
                label: p.max(t),
                classes: k,
            });
        }
        cm.counts[t * k + p] += 1;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IouReport {
    /// `None` for classes neither present nor predicted.
    pub iou: Vec<Option<f64>>,
    pub miou: f64,
}

/// Per-class IoU; absent classes are left out of the mean.
pub fn iou_miou(cm: &ConfusionMatrix) -> Result<IouReport> {
    iou_miou_with(cm, false)
}

/// With `include_absent`, absent classes count as IoU 0 in the mean.
pub fn iou_miou_with(cm: &ConfusionMatrix, include_absent: bool) -> Result<IouReport> {
    if cm.total() == 0 {
        return Err(Error::invalid("iou_miou", "confusion matrix is empty"));
    }
    let k = cm.classes;
    let iou: Vec<Option<f64>> = (0..k)
        .map(|c| {
            let tp = cm.get(c, c);
            let fp: u64 = (0..k).filter(|&t| t != c).map(|t| cm.get(t, c)).sum();
            let fn_: u64 = (0..k).filter(|&p| p != c).map(|p| cm.get(c, p)).sum();
            let denom = tp + fp + fn_;
            (denom > 0).then(|| tp as f64 / denom as f64)
        })
        .collect();
    let counted: Vec<f64> = if include_absent {
        iou.iter().map(|v| v.unwrap_or(0.0)).collect()
    } else {
        iou.iter().flatten().copied().collect()
    };
    let miou = counted.iter().sum::<f64>() / counted.len() as f64;
    Ok(IouReport { iou, miou })
}

/// Range-view pixels whose point also lands in the camera image.
pub fn overlap_mask(sample: &Sample) -> Vec<bool> {
    sample.mapping.coords.iter().map(Option::is_some).collect()
}

/// Targets for `head` and the mask of elements that count toward metrics.
/// `None` when a fused sample has no overlap.
pub fn targets_for(sample: &Sample, head: Head) -> Result<Option<(Vec<u8>, Vec<bool>)>> {
    let w = sample.range.width;
    Ok(match head {
        Head::Lidar => Some((sample.range.labels.clone(), overlap_mask(sample))),
        Head::Fused => sample.mapping.overlap.map(|ov| {
            (
                crop_raster(&sample.range.labels, w, &ov),
                crop_raster(&overlap_mask(sample), w, &ov),
            )
        }),
        Head::Camera => {
            let labels = sample
                .image_labels
                .clone()
                .ok_or_else(|| Error::invalid("camera head", "sample has no image labels"))?;
            let n = labels.len();
            Some((labels, vec![true; n]))
        }
    })
}

fn head_logits(out: &crate::pyfu::Outputs, head: Head) -> Var {
    match head {
        Head::Lidar => out.lidar,
        Head::Camera => out.camera,
        Head::Fused => out.fused,
    }
    .expect("requested head is computed")
}

/// Fixed-statistics predictions for `head`, one class per target element.
pub fn predict_labels(model: &PyFu, store: &ParamStore<f32>, sample: &Sample, head: Head) -> Result<Vec<u8>> {
    let mut g = Graph::new();
    let out = model.forward(&mut Ctx::new(&mut g, store, false), sample, &[head])?;
    let logits = g.value(head_logits(&out, head));
    let s = logits.shape();
    let p = s.plane();
    Ok((0..p)
        .map(|i| argmax((0..s.c).map(|c| logits.data()[c * p + i])) as u8)
        .collect())
}

/// Confusion over `samples` for `head`, restricted to the overlap for the
/// range-view heads.
pub fn evaluate(model: &PyFu, store: &ParamStore<f32>, samples: &[Sample], head: Head) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(model.config.classes);
    for s in samples {
        let Some((targets, mask)) = targets_for(s, head)? else {
            continue;
        };
        let pred = predict_labels(model, store, s, head)?;
        confusion_update(&mut cm, &pred, &targets, Some(&mask))?;
    }
    Ok(cm)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub base_lr: f64,
    /// Total optimizer steps, also the poly schedule's horizon.
    pub iterations: usize,
    pub power: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub clip_norm: Option<f64>,
    /// Samples whose gradients are averaged per step.
    pub batch_size: usize,
    /// Running-statistics blend factor of the normalisation layers.
    pub norm_momentum: f64,
    pub hflip_prob: f64,
    /// Random `(rows, cols)` crop of the range view.
    pub crop: Option<(usize, usize)>,
    /// Uniform class weights when false.
    pub weighted_loss: bool,
    /// Defaults to the configuration's primary head.
    pub head: Option<Head>,
    /// Validation interval in steps; 0 evaluates only after the last step.
    pub eval_every: usize,
    /// From this step on, normalisation uses running statistics, first
    /// recalibrated over the training set, so training sees what evaluation sees.
    pub fixed_stats_from: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 0.07,
            iterations: 2000,
            power: POLY_POWER,
            weight_decay: 1e-4,
            momentum: 0.9,
            clip_norm: None,
            batch_size: 1,
            norm_momentum: 0.1,
            hflip_prob: 0.5,
            crop: None,
            weighted_loss: true,
            head: None,
            eval_every: 0,
            fixed_stats_from: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.base_lr > 0.0) {
            return bad("base_lr must be positive");
        }
        if self.iterations == 0 || self.batch_size == 0 {
            return bad("iterations and batch_size must be ≥ 1");
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) || !(0.0..=1.0).contains(&self.norm_momentum) {
            return bad("hflip_prob and norm_momentum must lie in [0, 1]");
        }
        if !(self.weight_decay >= 0.0) || !(self.momentum >= 0.0) || !(self.power > 0.0) {
            return bad("weight_decay and momentum must be ≥ 0, power > 0");
        }
        Ok(())
    }
}

/// One JSON object per line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub miou: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub iou: Option<Vec<Option<f64>>>,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub class_weights: Vec<f64>,
    /// Drawn samples dropped because augmentation cropped away the overlap.
    pub skipped: usize,
    pub last_eval: Option<IouReport>,
    pub last_accuracy: Option<f64>,
}

/// Class histogram of the training targets, inside the overlap for the
/// range-view heads.
pub fn training_histogram(samples: &[Sample], head: Head, classes: usize) -> Result<Vec<u64>> {
    let mut hist = vec![0u64; classes];
    for s in samples {
        let Some((targets, mask)) = targets_for(s, head)? else {
            continue;
        };
        let h = label_histogram(targets.iter().zip(&mask).filter(|(_, m)| **m).map(|(t, _)| *t), classes)?;
        for (a, b) in hist.iter_mut().zip(h) {
            *a += b;
        }
    }
    Ok(hist)
}

struct Sampler {
    order: Vec<usize>,
    pos: usize,
}

impl Sampler {
    fn next(&mut self, rng: &mut ChaCha8Rng) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// Sets every running statistic reachable from `head` to the mean of the
/// per-sample statistics over `samples`. Returns how many samples were used.
pub fn recalibrate_stats(model: &PyFu, store: &mut ParamStore<f32>, samples: &[Sample], head: Head) -> Result<usize> {
    let mut used = 0;
    for s in samples {
        if head == Head::Fused && s.mapping.overlap.is_none() {
            continue;
        }
        let mut g = Graph::new();
        model.forward(&mut Ctx::new(&mut g, store, true), s, &[head])?;
        let updates = g.take_stat_updates();
        used += 1;
        update_running_stats(store, &updates, 1.0 / used as f64);
    }
    Ok(used)
}

/// Per-run training state: loss weights, optimizer, sampler and RNG.
pub struct Trainer<'a> {
    model: &'a PyFu,
    train: &'a [Sample],
    pub head: Head,
    pub class_weights: Vec<f64>,
    weights: Vec<f32>,
    opt: Sgd<f32>,
    ops: AugmentOps,
    batch_size: usize,
    norm_momentum: f64,
    fixed_stats_from: Option<usize>,
    recalibrated: bool,
    rng: ChaCha8Rng,
    sampler: Sampler,
    /// Drawn samples dropped because augmentation cropped away the overlap.
    pub skipped: usize,
}

impl<'a> Trainer<'a> {
    /// Also sets the store's frozen flags for the trained head.
    pub fn new(model: &'a PyFu, store: &mut ParamStore<f32>, train: &'a [Sample], cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if train.is_empty() {
            return Err(Error::invalid("train_loop", "training set is empty"));
        }
        let head = cfg.head.unwrap_or(model.config.primary_head());
        model.configure_training(store, head)?;
        let k = model.config.classes;
        let class_weights = if cfg.weighted_loss {
            class_weights(&training_histogram(train, head, k)?)?
        } else {
            vec![1.0; k]
        };
        Ok(Trainer {
            model,
            train,
            head,
            weights: class_weights.iter().map(|w| *w as f32).collect(),
            class_weights,
            opt: Sgd::new(SgdConfig {
                weight_decay: cfg.weight_decay,
                momentum: cfg.momentum,
                clip_norm: cfg.clip_norm,
            }),
            ops: AugmentOps {
                hflip_prob: cfg.hflip_prob,
                crop: cfg.crop,
            },
            batch_size: cfg.batch_size,
            norm_momentum: cfg.norm_momentum,
            fixed_stats_from: cfg.fixed_stats_from,
            recalibrated: false,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            sampler: Sampler {
                order: (0..train.len()).collect(),
                pos: train.len(),
            },
            skipped: 0,
        })
    }

    /// Augment, forward, weighted loss, backward for each of `batch_size`
    /// samples, then one SGD update at `lr`. Returns the mean loss.
    pub fn step(&mut self, store: &mut ParamStore<f32>, step: usize, lr: f64) -> Result<f64> {
        let batch_stats = !self.fixed_stats_from.is_some_and(|f| step >= f);
        if !batch_stats && !self.recalibrated {
            recalibrate_stats(self.model, store, self.train, self.head)?;
            self.recalibrated = true;
        }
        let mut loss_sum = 0.0;
        let mut drawn = 0;
        let mut misses = 0;
        while drawn < self.batch_size {
            if misses > 10 * self.train.len() {
                return Err(Error::NoOverlap);
            }
            let idx = self.sampler.next(&mut self.rng);
            let sample = augment_with(self.train[idx].clone(), &self.ops, &mut self.rng)?;
            let Some((targets, _)) = targets_for(&sample, self.head)? else {
                self.skipped += 1;
                misses += 1;
                continue;
            };
            let mut g = Graph::new();
            let out = self.model.forward(&mut Ctx::new(&mut g, store, batch_stats), &sample, &[self.head])?;
            let loss = match g.weighted_cross_entropy(head_logits(&out, self.head), &targets, &self.weights) {
                Err(Error::AllIgnored) => {
                    self.skipped += 1;
                    misses += 1;
                    continue;
                }
                other => other?,
            };
            let value = g.value(loss).data()[0] as f64;
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { step, loss: value });
            }
            let scaled = g.scale(loss, 1.0 / self.batch_size as f32);
            g.backward(scaled)?;
            g.accumulate_param_grads(store);
            let updates = g.take_stat_updates();
            update_running_stats(store, &updates, self.norm_momentum);
            loss_sum += value;
            drawn += 1;
        }
        self.opt.step(store, lr)?;
        Ok(loss_sum / self.batch_size as f64)
    }
}

/// SGD with the poly schedule on weighted cross entropy. Writes one
/// [`LogRecord`] per step (with metrics on evaluation steps) to `log`.
/// Deterministic in `cfg.seed`.
pub fn train_loop(
    model: &PyFu,
    store: &mut ParamStore<f32>,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    log: &mut dyn Write,
) -> Result<TrainReport> {
    let mut trainer = Trainer::new(model, store, train, cfg)?;
    let head = trainer.head;
    let mut report = TrainReport {
        class_weights: trainer.class_weights.clone(),
        ..TrainReport::default()
    };
    for step in 0..cfg.iterations {
        let lr = poly_lr_with(step, cfg.iterations, cfg.base_lr, cfg.power);
        let loss = trainer.step(store, step, lr)?;
        report.losses.push(loss);
        let mut rec = LogRecord {
            step: step + 1,
            lr,
            loss,
            miou: None,
            accuracy: None,
            iou: None,
        };
        let last = step + 1 == cfg.iterations;
        if !val.is_empty() && (last || (cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0)) {
            let cm = evaluate(model, store, val, head)?;
            let r = iou_miou(&cm)?;
            rec.miou = Some(r.miou);
            rec.accuracy = Some(cm.accuracy());
            rec.iou = Some(r.iou.clone());
            report.last_accuracy = Some(cm.accuracy());
            report.last_eval = Some(r);
        }
        let line = serde_json::to_string(&rec).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(log, "{line}").map_err(|e| Error::io("metrics log", e))?;
    }
    report.skipped = trainer.skipped;
    Ok(report)
}

#[cfg(test)]
mod tests;
