use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::metrics::{EvalReport, Evaluator};
use super::optim::{clip_grad_norm, poly_lr, Adam, AdamConfig};
use super::par_map;
use crate::error::{Error, Result};
use crate::network::{class_weights, downsample_targets, forward, init_params, total_loss, NetConfig};
use crate::params::{Ctx, ParamStore};
use crate::raster::ClassMask;
use crate::rng::Rng;
use crate::synth::{class_frequencies, SceneSample};
use crate::tensor::{Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Exponent of the poly decay.
    pub power: f64,
    pub seed: u64,
    /// Epochs between periodic checkpoints; 0 disables them.
    pub checkpoint_every: usize,
    /// Epochs between validation passes when a validation set is given.
    pub eval_every: usize,
    /// Global gradient norm cap.
    pub grad_clip: Option<f64>,
    /// Weight the cross-entropy by inverse square-root class frequency.
    pub class_weighting: bool,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-4,
            batch_size: 6,
            epochs: 50,
            power: 0.9,
            seed: 0,
            checkpoint_every: 10,
            eval_every: 1,
            grad_clip: None,
            class_weighting: true,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("lr0 {} must be positive", self.lr0)));
        }
        if !(self.power >= 0.0) {
            return Err(Error::Config(format!("power {} must be non-negative", self.power)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config(String::from("batch_size and epochs must be positive")));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config(String::from("grad_clip must be positive")));
        }
        Ok(())
    }

    /// Optimizer steps of one epoch over `n` samples.
    pub fn iters_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }
}

/// A sample ready for the network: normalized image and output-scale mask.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub id: String,
    pub image: Tensor<f32>,
    pub mask: ClassMask,
}

impl TrainSample {
    pub fn from_scene(s: &SceneSample) -> Self {
        Self { id: s.id.clone(), image: s.image.to_tensor(), mask: s.mask.clone() }
    }
}

/// Epoch means of the loss terms.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub iter: usize,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    pub total: f64,
    /// Cross-entropy per supervised head, finest first.
    pub seg: Vec<f64>,
    /// Unweighted sum of the cycle losses.
    pub cycle_total: f64,
}

pub struct EpochEnd<'a> {
    pub record: &'a LossRecord,
    pub params: &'a ParamStore<f32>,
    pub eval: Option<&'a EvalReport>,
    /// Whether the checkpoint cadence falls on this epoch.
    pub checkpoint_due: bool,
}

#[derive(Clone, Debug)]
pub struct Best {
    pub epoch: usize,
    pub miou: f64,
    pub params: ParamStore<f32>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ParamStore<f32>,
    pub history: Vec<LossRecord>,
    pub class_weights: Vec<f64>,
    /// Best validation mIoU, when a validation set was given.
    pub best: Option<Best>,
}

struct SampleLoss {
    total: f64,
    seg: Vec<f64>,
    cycle: f64,
}

fn sample_step(
    params: &ParamStore<f32>,
    net: &NetConfig,
    sample: &TrainSample,
    weights: &[f32],
) -> Result<(ParamStore<f32>, SampleLoss)> {
    let mut ctx = Ctx::new(params);
    let x = ctx.tape.constant(sample.image.clone());
    let out = forward(&mut ctx, x, net)?;
    let heads = net.supervised_heads();
    let targets = downsample_targets(&sample.mask, net)?;
    let logits: Vec<Var> = out.logits.iter().take(heads).map(|l| l.1).collect();
    let parts =
        total_loss(&mut ctx.tape, &logits, &targets[..heads], &out.cycle_losses, weights, net.lambda_cycle as f32)?;
    let loss = SampleLoss {
        total: ctx.tape.value(parts.total).item() as f64,
        seg: parts.seg.iter().map(|&v| ctx.tape.value(v).item() as f64).collect(),
        cycle: parts.cycle.map_or(0.0, |v| ctx.tape.value(v).item() as f64),
    };
    let grads = ctx.backward(parts.total)?;
    Ok((grads, loss))
}

/// Hard predictions and scores of `params` over `data`, pooled.
pub fn evaluate(params: &ParamStore<f32>, net: &NetConfig, data: &[TrainSample]) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation dataset"));
    }
    let parts = par_map(data, |s| -> Result<Evaluator> {
        let mut ctx = Ctx::new(params);
        let x = ctx.tape.constant(s.image.clone());
        let out = forward(&mut ctx, x, net)?;
        let mut ev = Evaluator::new(net.num_classes);
        ev.add_logits(ctx.tape.value(out.final_logits()), &s.mask)?;
        Ok(ev)
    });
    let mut total = Evaluator::new(net.num_classes);
    for ev in parts {
        total.merge(ev?)?;
    }
    total.report()
}

/// Adam with poly decay, one step per mini-batch of averaged per-sample
/// gradients. Samples are visited in a seeded shuffle.
pub fn train(
    net: &NetConfig,
    tc: &TrainConfig,
    data: &[TrainSample],
    val: Option<&[TrainSample]>,
    on_epoch: &mut dyn FnMut(EpochEnd<'_>) -> Result<()>,
) -> Result<TrainOutcome> {
    net.validate()?;
    tc.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training dataset"));
    }
    for s in data {
        s.mask.check_classes(net.num_classes)?;
    }
    let mut params = init_params::<f32>(net, tc.seed)?;
    train_from(&mut params, net, tc, data, val, on_epoch).map(|(history, class_weights, best)| TrainOutcome {
        params,
        history,
        class_weights,
        best,
    })
}

/// Like [`train`], starting from the given parameters.
pub fn train_from(
    params: &mut ParamStore<f32>,
    net: &NetConfig,
    tc: &TrainConfig,
    data: &[TrainSample],
    val: Option<&[TrainSample]>,
    on_epoch: &mut dyn FnMut(EpochEnd<'_>) -> Result<()>,
) -> Result<(Vec<LossRecord>, Vec<f64>, Option<Best>)> {
    tc.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training dataset"));
    }
    let weights = if tc.class_weighting {
        class_weights(&class_frequencies(data.iter().map(|s| &s.mask), net.num_classes))
    } else {
        vec![1.0; net.num_classes]
    };
    let w32: Vec<f32> = weights.iter().map(|&w| w as f32).collect();
    let per_epoch = tc.iters_per_epoch(data.len());
    let total_iters = per_epoch * tc.epochs;
    let mut adam = Adam::new(tc.adam);
    let mut shuffle = Rng::derive(tc.seed, 2);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(tc.epochs);
    let mut best: Option<Best> = None;
    let mut iter = 0;
    for epoch in 1..=tc.epochs {
        shuffle.shuffle(&mut order);
        let mut sums = SampleLoss { total: 0.0, seg: vec![0.0; net.supervised_heads()], cycle: 0.0 };
        let mut lr = tc.lr0;
        for batch in order.chunks(tc.batch_size) {
            let results = par_map(batch, |&i| sample_step(params, net, &data[i], &w32));
            let mut grads: Option<ParamStore<f32>> = None;
            for r in results {
                let (g, loss) = r?;
                sums.total += loss.total;
                sums.cycle += loss.cycle;
                sums.seg.iter_mut().zip(&loss.seg).for_each(|(a, b)| *a += b);
                match grads.as_mut() {
                    Some(acc) => acc.accumulate(&g)?,
                    None => grads = Some(g),
                }
            }
            let mut grads = grads.ok_or(Error::Empty("batch"))?;
            grads.scale(1.0 / batch.len() as f32);
            if let Some(c) = tc.grad_clip {
                clip_grad_norm(&mut grads, c);
            }
            lr = poly_lr(iter, total_iters, tc.lr0, tc.power)?;
            adam.step(params, &grads, lr)?;
            params.check_finite()?;
            iter += 1;
        }
        let n = data.len() as f64;
        let record = LossRecord {
            epoch,
            iter,
            lr,
            total: sums.total / n,
            seg: sums.seg.iter().map(|s| s / n).collect(),
            cycle_total: sums.cycle / n,
        };
        if !record.total.is_finite() {
            return Err(Error::NonFinite { op: "epoch loss", node: epoch });
        }
        let eval = match val {
            Some(v) if epoch % tc.eval_every.max(1) == 0 || epoch == tc.epochs => Some(evaluate(params, net, v)?),
            _ => None,
        };
        if let Some(e) = &eval {
            if best.as_ref().is_none_or(|b| e.miou > b.miou) {
                best = Some(Best { epoch, miou: e.miou, params: params.clone() });
            }
        }
        let checkpoint_due = tc.checkpoint_every > 0 && epoch % tc.checkpoint_every == 0;
        on_epoch(EpochEnd { record: &record, params, eval: eval.as_ref(), checkpoint_due })?;
        log::info!("epoch {epoch}: loss {:.5} cycle {:.5} lr {lr:.3e}", record.total, record.cycle_total);
        history.push(record);
    }
    Ok((history, weights, best))
}
