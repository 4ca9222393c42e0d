//! Segmentation and classification metrics.

use serde::{Deserialize, Serialize};

use crate::data::LabelMap;
use crate::error::{Result, WeakTrError};
use crate::graph::IGNORE_LABEL;

/// Split-level segmentation scores. Per-class entries are `None` for classes
/// absent from both prediction and ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub num_classes: usize,
    pub per_class_iou: Vec<Option<f64>>,
    pub per_class_precision: Vec<Option<f64>>,
    pub per_class_recall: Vec<Option<f64>>,
    pub miou: f64,
    pub precision: f64,
    pub recall: f64,
    pub pixels: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub fn_: Vec<u64>,
    pub pixels: u64,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Self {
            tp: vec![0; classes],
            fp: vec![0; classes],
            fn_: vec![0; classes],
            pixels: 0,
        }
    }

    pub fn add(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if pred.size != gt.size {
            return Err(WeakTrError::shape(format!(
                "prediction {0}×{0} vs ground truth {1}×{1}",
                pred.size, gt.size
            )));
        }
        let c = self.tp.len();
        for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
            if g == IGNORE_LABEL {
                continue;
            }
            let (p, g) = (p as usize, g as usize);
            if g >= c || (p >= c && p != IGNORE_LABEL as usize) {
                return Err(WeakTrError::domain(format!("label {} outside 0..{c}", p.max(g))));
            }
            self.pixels += 1;
            if p == g {
                self.tp[g] += 1;
            } else {
                self.fn_[g] += 1;
                if p < c {
                    self.fp[p] += 1;
                }
            }
        }
        Ok(())
    }

    pub fn report(&self) -> EvalReport {
        let c = self.tp.len();
        let ratio = |num: u64, den: u64| (den > 0).then(|| num as f64 / den as f64);
        let mut iou = Vec::with_capacity(c);
        let mut precision = Vec::with_capacity(c);
        let mut recall = Vec::with_capacity(c);
        for k in 0..c {
            let (tp, fp, fn_) = (self.tp[k], self.fp[k], self.fn_[k]);
            iou.push(ratio(tp, tp + fp + fn_));
            precision.push(ratio(tp, tp + fp).or((fn_ > 0).then_some(0.0)));
            recall.push(ratio(tp, tp + fn_).or((fp > 0).then_some(0.0)));
        }
        let mean = |v: &[Option<f64>]| {
            let present: Vec<f64> = v.iter().flatten().copied().collect();
            if present.is_empty() {
                0.0
            } else {
                present.iter().sum::<f64>() / present.len() as f64
            }
        };
        EvalReport {
            num_classes: c,
            miou: mean(&iou),
            precision: mean(&precision),
            recall: mean(&recall),
            per_class_iou: iou,
            per_class_precision: precision,
            per_class_recall: recall,
            pixels: self.pixels,
        }
    }
}

/// Aggregates TP/FP/FN over every pair, then scores each class once.
/// Ground-truth pixels equal to the ignore label are skipped.
pub fn evaluate(preds: &[LabelMap], gts: &[LabelMap], num_classes: usize) -> Result<EvalReport> {
    if preds.len() != gts.len() {
        return Err(WeakTrError::shape(format!(
            "{} predictions vs {} ground-truth maps",
            preds.len(),
            gts.len()
        )));
    }
    let mut conf = Confusion::new(num_classes);
    for (p, g) in preds.iter().zip(gts) {
        conf.add(p, g)?;
    }
    Ok(conf.report())
}

/// Fraction of class decisions (`logit > 0`) that match the multi-hot labels.
pub fn multilabel_accuracy(logits: &[Vec<f64>], labels: &[Vec<f32>]) -> f64 {
    let mut hits = 0usize;
    let mut total = 0usize;
    for (l, y) in logits.iter().zip(labels) {
        for (&z, &t) in l.iter().zip(y) {
            hits += usize::from((z > 0.0) == (t > 0.5));
            total += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

/// Fraction of pixels (outside `IGNORE_LABEL` in `a`) where `a` and `b` agree,
/// restricted to `keep` when given. `None` if nothing is counted.
pub fn agreement(a: &LabelMap, b: &LabelMap, keep: Option<&[bool]>) -> Option<(usize, usize)> {
    let mut agree = 0;
    let mut total = 0;
    for (i, (&x, &y)) in a.labels.iter().zip(&b.labels).enumerate() {
        if x == IGNORE_LABEL || keep.is_some_and(|k| !k[i]) {
            continue;
        }
        total += 1;
        agree += usize::from(x == y);
    }
    (total > 0).then_some((agree, total))
}
