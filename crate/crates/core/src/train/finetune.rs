//! End-to-end fine-tuning of the extractor through the bilinear layer with a
//! softmax classification head.
//!
//! Forward pass per sample: conv + ReLU, symmetric bilinear pooling, signed
//! square root, L2 normalization, dropout (training only), linear head,
//! softmax cross-entropy. The extractor and the head have separate learning
//! rates; both are divided by `lr_decay_factor` when the validation error has
//! not improved by more than `plateau_tol` for `patience` epochs.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{encode_backward, encode_traced, EncodeTrace, FeatureMap};
use crate::error::{Error, Result};
use crate::extractor::{conv_backward, conv_forward, ConvParams, ImagePatch};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxHead {
    pub classes: usize,
    pub dim: usize,
    /// `classes x dim`, row-major.
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl SoftmaxHead {
    pub fn zeros(classes: usize, dim: usize) -> Result<Self> {
        let h = Self {
            classes,
            dim,
            weights: vec![0.0; classes * dim],
            bias: vec![0.0; classes],
        };
        h.validate()?;
        Ok(h)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!("softmax head needs >= 2 classes, got {}", self.classes)));
        }
        if self.dim == 0 || self.weights.len() != self.classes * self.dim || self.bias.len() != self.classes {
            return Err(Error::Shape("softmax head parameter sizes do not match".into()));
        }
        if self.weights.iter().chain(&self.bias).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite softmax parameter".into()));
        }
        Ok(())
    }

    pub fn logits(&self, z: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.dim)
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(z).map(|(w, x)| w * x).sum::<f64>() + b)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr_lower: f64,
    pub lr_last: f64,
    pub lr_decay_factor: f64,
    pub epochs: usize,
    pub dropout_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Epochs without validation improvement before the rates decay.
    pub patience: usize,
    /// Minimum absolute drop in validation error that counts as improvement.
    pub plateau_tol: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_lower: 0.001,
            lr_last: 0.01,
            lr_decay_factor: 10.0,
            epochs: 30,
            dropout_rate: 0.5,
            batch_size: 1,
            seed: 0,
            patience: 3,
            plateau_tol: 1e-4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let rate_ok = |r: f64| r >= 0.0 && r.is_finite();
        if !rate_ok(self.lr_lower) || !rate_ok(self.lr_last) {
            return Err(Error::Config("learning rates must be finite and non-negative".into()));
        }
        if !(self.lr_decay_factor > 1.0) {
            return Err(Error::Config("lr_decay_factor must exceed 1".into()));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.patience == 0 {
            return Err(Error::Config("epochs, batch_size and patience must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config("dropout_rate must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPatch {
    pub image: ImagePatch,
    pub label: usize,
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub extractor: ConvParams,
    pub head: SoftmaxHead,
    /// Mean evaluation-mode cross-entropy on the training set; entry 0 is
    /// before the first update, entry `e` after epoch `e`.
    pub loss_trace: Vec<f64>,
    /// Training accuracy, indexed like `loss_trace`.
    pub accuracy_trace: Vec<f64>,
    /// `(lr_lower, lr_last)` used during each epoch.
    pub lr_trace: Vec<(f64, f64)>,
}

/// Gradients for one sample (or a summed batch).
#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub kernel: Vec<f64>,
    pub conv_bias: Vec<f64>,
    pub head_weights: Vec<f64>,
    pub head_bias: Vec<f64>,
}

impl ModelGrads {
    fn zeros(p: &ConvParams, h: &SoftmaxHead) -> Self {
        Self {
            kernel: vec![0.0; p.kernel.len()],
            conv_bias: vec![0.0; p.bias.len()],
            head_weights: vec![0.0; h.weights.len()],
            head_bias: vec![0.0; h.bias.len()],
        }
    }

    fn accumulate(&mut self, o: &ModelGrads) {
        for (a, b) in [
            (&mut self.kernel, &o.kernel),
            (&mut self.conv_bias, &o.conv_bias),
            (&mut self.head_weights, &o.head_weights),
            (&mut self.head_bias, &o.head_bias),
        ] {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn descriptor(extractor: &ConvParams, image: &ImagePatch) -> Result<(FeatureMap, EncodeTrace)> {
    let f = conv_forward(image, extractor)?;
    let t = encode_traced(&f, &f)?;
    Ok((f, t))
}

fn check_head(extractor: &ConvParams, head: &SoftmaxHead, image: &ImagePatch) -> Result<()> {
    extractor.output_dims(image.height(), image.width())?;
    let dim = extractor.out_channels * extractor.out_channels;
    if head.dim != dim {
        return Err(Error::Shape(format!(
            "head expects {}-d descriptors, extractor produces {dim}",
            head.dim
        )));
    }
    Ok(())
}

/// Class probabilities in evaluation mode (no dropout).
pub fn predict_proba(extractor: &ConvParams, head: &SoftmaxHead, image: &ImagePatch) -> Result<Vec<f64>> {
    check_head(extractor, head, image)?;
    let (_, t) = descriptor(extractor, image)?;
    Ok(softmax(&head.logits(&t.normalized)))
}

/// Cross-entropy and gradients for one sample. `dropout_mask` holds the
/// per-coordinate multiplier (0 or `1/(1-p)`); `None` is evaluation mode.
pub fn sample_loss_and_grads(
    extractor: &ConvParams,
    head: &SoftmaxHead,
    sample: &LabeledPatch,
    dropout_mask: Option<&[f64]>,
) -> Result<(f64, ModelGrads)> {
    check_head(extractor, head, &sample.image)?;
    if sample.label >= head.classes {
        return Err(Error::Data(format!("label {} out of range", sample.label)));
    }
    let (f, trace) = descriptor(extractor, &sample.image)?;
    let z: Vec<f64> = match dropout_mask {
        Some(m) => trace.normalized.iter().zip(m).map(|(a, b)| a * b).collect(),
        None => trace.normalized.clone(),
    };
    let p = softmax(&head.logits(&z));
    let loss = -p[sample.label].max(f64::MIN_POSITIVE).ln();

    let mut g_logits = p;
    g_logits[sample.label] -= 1.0;
    let mut head_weights = vec![0.0; head.weights.len()];
    let mut g_z = vec![0.0; head.dim];
    for (c, gl) in g_logits.iter().enumerate() {
        let row = &head.weights[c * head.dim..(c + 1) * head.dim];
        let grow = &mut head_weights[c * head.dim..(c + 1) * head.dim];
        for k in 0..head.dim {
            grow[k] = gl * z[k];
            g_z[k] += gl * row[k];
        }
    }
    if let Some(m) = dropout_mask {
        g_z.iter_mut().zip(m).for_each(|(g, k)| *g *= k);
    }
    let (ga, gb) = encode_backward(&f, &f, &trace, &g_z)?;
    let g_map = ga.add(&gb)?;
    let cg = conv_backward(&sample.image, extractor, &g_map)?;
    Ok((
        loss,
        ModelGrads {
            kernel: cg.kernel,
            conv_bias: cg.bias,
            head_weights,
            head_bias: g_logits,
        },
    ))
}

/// Mean cross-entropy and accuracy in evaluation mode.
pub fn evaluate(extractor: &ConvParams, head: &SoftmaxHead, data: &[LabeledPatch]) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty set".into()));
    }
    let mut loss = 0.0;
    let mut correct = 0usize;
    for s in data {
        let p = predict_proba(extractor, head, &s.image)?;
        loss -= p[s.label].max(f64::MIN_POSITIVE).ln();
        let pred = p
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc })
            .0;
        correct += (pred == s.label) as usize;
    }
    Ok((loss / data.len() as f64, correct as f64 / data.len() as f64))
}

/// Numeric failures inside the training loop are reported as divergence.
fn diverged(e: Error, epoch: usize, trace: &[f64]) -> Error {
    match e {
        Error::Numeric(reason) => Error::Divergence {
            epoch,
            reason,
            loss_trace: trace.to_vec(),
        },
        other => other,
    }
}

fn check_data(data: &[LabeledPatch], classes: usize) -> Result<()> {
    let mut counts = vec![0usize; classes];
    for s in data {
        if s.label >= classes {
            return Err(Error::Data(format!("label {} outside 0..{classes}", s.label)));
        }
        counts[s.label] += 1;
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Data(format!("class {c} has no samples")));
    }
    Ok(())
}

/// Mini-batch gradient descent with dropout on the descriptor.
///
/// When `validation` is `None` the training error drives the plateau rule.
pub fn finetune_softmax(
    extractor: &ConvParams,
    head: &SoftmaxHead,
    train: &[LabeledPatch],
    validation: Option<&[LabeledPatch]>,
    cfg: &TrainConfig,
) -> Result<FinetuneOutcome> {
    cfg.validate()?;
    extractor.validate()?;
    head.validate()?;
    check_data(train, head.classes)?;
    if let Some(v) = validation {
        if v.is_empty() {
            return Err(Error::Data("validation set is empty".into()));
        }
    }

    let mut ext = extractor.clone();
    let mut hd = head.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (mut lr_lower, mut lr_last) = (cfg.lr_lower, cfg.lr_last);
    let keep = 1.0 - cfg.dropout_rate;

    let (l0, a0) = evaluate(&ext, &hd, train)?;
    let mut loss_trace = vec![l0];
    let mut accuracy_trace = vec![a0];
    let mut lr_trace = Vec::with_capacity(cfg.epochs);
    if !l0.is_finite() {
        return Err(Error::Divergence {
            epoch: 0,
            reason: "initial loss is not finite".into(),
            loss_trace,
        });
    }
    let val_error = |e: &ConvParams, h: &SoftmaxHead, acc_train: f64| -> Result<f64> {
        match validation {
            Some(v) => Ok(1.0 - evaluate(e, h, v)?.1),
            None => Ok(1.0 - acc_train),
        }
    };
    let mut best_err = val_error(&ext, &hd, a0)?;
    let mut stale = 0usize;

    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        lr_trace.push((lr_lower, lr_last));
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let mut acc = ModelGrads::zeros(&ext, &hd);
            for &i in batch {
                let mask: Option<Vec<f64>> = (cfg.dropout_rate > 0.0).then(|| {
                    (0..hd.dim)
                        .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                        .collect()
                });
                let (loss, g) = sample_loss_and_grads(&ext, &hd, &train[i], mask.as_deref())
                    .map_err(|e| diverged(e, epoch, &loss_trace))?;
                if !loss.is_finite() {
                    return Err(Error::Divergence {
                        epoch,
                        reason: "non-finite training loss".into(),
                        loss_trace,
                    });
                }
                acc.accumulate(&g);
            }
            let scale = 1.0 / batch.len() as f64;
            let step = |params: &mut [f64], grads: &[f64], lr: f64| {
                if lr != 0.0 {
                    params.iter_mut().zip(grads).for_each(|(p, g)| *p -= lr * scale * g);
                }
            };
            step(&mut ext.kernel, &acc.kernel, lr_lower);
            step(&mut ext.bias, &acc.conv_bias, lr_lower);
            step(&mut hd.weights, &acc.head_weights, lr_last);
            step(&mut hd.bias, &acc.head_bias, lr_last);
        }

        let (loss, acc) =
            evaluate(&ext, &hd, train).map_err(|e| diverged(e, epoch, &loss_trace))?;
        loss_trace.push(loss);
        accuracy_trace.push(acc);
        if !loss.is_finite() {
            return Err(Error::Divergence {
                epoch,
                reason: "non-finite loss after update".into(),
                loss_trace,
            });
        }
        let err = val_error(&ext, &hd, acc)?;
        if best_err - err > cfg.plateau_tol {
            best_err = err;
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                lr_lower /= cfg.lr_decay_factor;
                lr_last /= cfg.lr_decay_factor;
                stale = 0;
            }
        }
    }

    Ok(FinetuneOutcome {
        extractor: ext,
        head: hd,
        loss_trace,
        accuracy_trace,
        lr_trace,
    })
}
