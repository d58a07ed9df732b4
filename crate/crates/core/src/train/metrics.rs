use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::raster::ClassMask;
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    /// `tp / (tp + fp + fn)`, undefined when the class is absent from both
    /// prediction and truth.
    pub fn iou(&self) -> Option<f64> {
        let d = self.tp + self.fp + self.fn_;
        (d > 0).then(|| self.tp as f64 / d as f64)
    }
}

/// Area under the step precision–recall curve of `(score, positive)` pairs.
/// Pixels with equal scores enter at the same threshold. `None` without
/// positives.
pub fn average_precision(scored: &mut [(f64, bool)]) -> Option<f64> {
    let positives = scored.iter().filter(|s| s.1).count();
    if positives == 0 {
        return None;
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let (mut tp, mut seen, mut ap, mut prev_recall) = (0usize, 0usize, 0.0, 0.0);
    let mut i = 0;
    while i < scored.len() {
        let t = scored[i].0;
        while i < scored.len() && scored[i].0 == t {
            tp += scored[i].1 as usize;
            seen += 1;
            i += 1;
        }
        let recall = tp as f64 / positives as f64;
        ap += (recall - prev_recall) * (tp as f64 / seen as f64);
        prev_recall = recall;
    }
    Some(ap)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub num_classes: usize,
    pub samples: usize,
    pub confusion: Vec<Confusion>,
    pub iou: Vec<Option<f64>>,
    pub ap: Vec<Option<f64>>,
    /// Mean IoU over the non-background classes, in percent.
    pub miou: f64,
    /// Mean AP over the non-background classes, in percent.
    pub map: f64,
    pub pixel_accuracy: f64,
}

/// Pools confusion counts and per-pixel class scores over a dataset.
#[derive(Clone, Debug)]
pub struct Evaluator {
    num_classes: usize,
    samples: usize,
    correct: u64,
    pixels: u64,
    confusion: Vec<Confusion>,
    scores: Vec<Vec<(f64, bool)>>,
}

impl Evaluator {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            samples: 0,
            correct: 0,
            pixels: 0,
            confusion: vec![Confusion::default(); num_classes],
            scores: vec![Vec::new(); num_classes],
        }
    }

    /// Add one sample: `scores` is `[K, h, w]` class confidence (for AP),
    /// `pred` the hard prediction (for IoU).
    pub fn add<T: Real>(&mut self, scores: &Tensor<T>, pred: &ClassMask, truth: &ClassMask) -> Result<()> {
        let k = self.num_classes;
        let (sk, h, w) = scores.dims3()?;
        if sk != k || (pred.width(), pred.height()) != (w, h) || (truth.width(), truth.height()) != (w, h) {
            return Err(shape_err(
                "evaluate",
                format!(
                    "scores {:?}, prediction {}x{}, truth {}x{}",
                    scores.shape(),
                    pred.width(),
                    pred.height(),
                    truth.width(),
                    truth.height()
                ),
            ));
        }
        truth.check_classes(k)?;
        pred.check_classes(k)?;
        let n = h * w;
        for (p, (&pc, &tc)) in pred.data().iter().zip(truth.data()).enumerate() {
            self.correct += (pc == tc) as u64;
            for c in 0..k {
                let (is_p, is_t) = (pc as usize == c, tc as usize == c);
                let cm = &mut self.confusion[c];
                match (is_p, is_t) {
                    (true, true) => cm.tp += 1,
                    (true, false) => cm.fp += 1,
                    (false, true) => cm.fn_ += 1,
                    (false, false) => cm.tn += 1,
                }
                self.scores[c].push((scores.data()[c * n + p].as_f64(), is_t));
            }
        }
        self.pixels += n as u64;
        self.samples += 1;
        Ok(())
    }

    /// Add one sample from raw logits, scoring with the softmax.
    pub fn add_logits<T: Real>(&mut self, logits: &Tensor<T>, truth: &ClassMask) -> Result<()> {
        let pred = crate::network::predict_mask(logits)?;
        self.add(&softmax_channels(logits)?, &pred, truth)
    }

    /// Fold in counts gathered by another evaluator.
    pub fn merge(&mut self, other: Evaluator) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(shape_err("evaluate", format!("{} vs {} classes", self.num_classes, other.num_classes)));
        }
        for (a, b) in self.confusion.iter_mut().zip(&other.confusion) {
            a.tp += b.tp;
            a.fp += b.fp;
            a.fn_ += b.fn_;
            a.tn += b.tn;
        }
        for (a, b) in self.scores.iter_mut().zip(other.scores) {
            a.extend(b);
        }
        self.samples += other.samples;
        self.correct += other.correct;
        self.pixels += other.pixels;
        Ok(())
    }

    pub fn report(mut self) -> Result<EvalReport> {
        if self.samples == 0 {
            return Err(Error::Empty("evaluation dataset"));
        }
        let iou: Vec<Option<f64>> = self.confusion.iter().map(Confusion::iou).collect();
        let ap: Vec<Option<f64>> = self.scores.iter_mut().map(|s| average_precision(s)).collect();
        Ok(EvalReport {
            num_classes: self.num_classes,
            samples: self.samples,
            miou: 100.0 * mean_defined(&iou[1..]),
            map: 100.0 * mean_defined(&ap[1..]),
            confusion: self.confusion,
            iou,
            ap,
            pixel_accuracy: self.correct as f64 / self.pixels as f64,
        })
    }
}

/// Mean of the defined entries, 0 when none is.
fn mean_defined(v: &[Option<f64>]) -> f64 {
    let defined: Vec<f64> = v.iter().flatten().copied().collect();
    if defined.is_empty() {
        0.0
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    }
}

/// Softmax over the class axis of `[K, h, w]`, in `f64`.
pub fn softmax_channels<T: Real>(logits: &Tensor<T>) -> Result<Tensor<f64>> {
    let (k, h, w) = logits.dims3()?;
    let n = h * w;
    let d = logits.data();
    let mut out = vec![0.0; k * n];
    for p in 0..n {
        let m = (0..k).map(|c| d[c * n + p].as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for c in 0..k {
            let e = libm::exp(d[c * n + p].as_f64() - m);
            out[c * n + p] = e;
            z += e;
        }
        for c in 0..k {
            out[c * n + p] /= z;
        }
    }
    Tensor::new(&[k, h, w], out)
}

/// One-hot `[K, h, w]` scores of a hard mask.
pub fn one_hot(mask: &ClassMask, num_classes: usize) -> Result<Tensor<f64>> {
    mask.check_classes(num_classes)?;
    let n = mask.width() * mask.height();
    let mut out = vec![0.0; num_classes * n];
    for (p, &c) in mask.data().iter().enumerate() {
        out[c as usize * n + p] = 1.0;
    }
    Tensor::new(&[num_classes, mask.height(), mask.width()], out)
}
