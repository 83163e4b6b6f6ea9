//! Training loop, evaluation and prediction for [`SegNet`].

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::loss::{one_hot, total_loss_tape, LossConfig};
use super::model::{ModelConfig, SegNet};
use super::optim::{lr_at, Adam};
use crate::autograd::Tape;
use crate::data::{normalize_image, Dataset};
use crate::error::{PsgrError, Result};
use crate::graph::{KChoice, NormMode};
use crate::metrics::{evaluate_masks, MetricReport};
use crate::reason::{Nonlinearity, PsgrConfig};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Flat run configuration; doubles as the JSON config file format.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub ru: f64,
    pub k: KChoice,
    pub norm_mode: NormMode,
    pub gnn_layers: usize,
    pub nonlinearity: Nonlinearity,
    pub lambda: f64,
    pub lr: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub n_classes: usize,
    pub psgr_enabled: bool,
    pub include_local: bool,
    pub use_edge_weights: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            ru: 0.05,
            k: KChoice::Auto,
            norm_mode: NormMode::RandomWalk,
            gnn_layers: 1,
            nonlinearity: Nonlinearity::Sigmoid,
            lambda: 0.5,
            lr: 1e-3,
            epochs: 60,
            warmup_epochs: 5,
            weight_decay: 1e-5,
            batch_size: 8,
            seed: 0,
            n_classes: 2,
            psgr_enabled: true,
            include_local: true,
            use_edge_weights: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(PsgrError::invalid(msg.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be nonnegative");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be nonnegative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.n_classes < 2 {
            return bad("n_classes must be at least 2");
        }
        if let Some(p) = self.psgr_config() {
            p.validate()?;
        } else if !(0.0..=1.0).contains(&self.ru) {
            return bad("ru must lie in [0, 1]");
        }
        Ok(())
    }

    /// `None` when the module is disabled or `ru == 0`.
    pub fn psgr_config(&self) -> Option<PsgrConfig> {
        (self.psgr_enabled && self.ru > 0.0).then(|| PsgrConfig {
            ru: self.ru,
            k: self.k,
            norm_mode: self.norm_mode,
            n_layers: self.gnn_layers,
            nonlinearity: self.nonlinearity,
            use_edge_weights: self.use_edge_weights,
            include_local: self.include_local,
            ..PsgrConfig::default()
        })
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            n_classes: self.n_classes,
            psgr: self.psgr_config(),
            ..ModelConfig::default()
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            lambda: self.lambda,
            ..LossConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Mean total loss over the epoch's batches.
    pub train_loss: f64,
    /// Loss of the epoch's first batch, before its update.
    pub first_batch_loss: f64,
    pub val_dsc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: SegNet<f32>,
    pub log: Vec<EpochLog>,
}

impl TrainOutcome {
    pub fn final_val_dsc(&self) -> Option<f64> {
        self.log.last().and_then(|l| l.val_dsc)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_images: usize,
    pub mean: MetricReport,
    pub per_image: Vec<MetricReport>,
}

fn normalized(data: &Dataset) -> Vec<Vec<f32>> {
    data.images
        .par_iter()
        .map(|img| {
            let mut v = img.data().to_vec();
            normalize_image(&mut v);
            v
        })
        .collect()
}

fn stack(images: &[Vec<f32>], idx: &[usize], h: usize, w: usize) -> Tensor<f32> {
    let data = idx.iter().flat_map(|&i| images[i].iter().copied()).collect();
    Tensor::from_parts(vec![idx.len(), 1, h, w], data)
}

fn check_dataset(data: &Dataset, n_classes: usize) -> Result<()> {
    if data.is_empty() {
        return Err(PsgrError::invalid("dataset is empty"));
    }
    if data.n_classes != n_classes {
        return Err(PsgrError::invalid(format!(
            "dataset has {} classes, config expects {n_classes}",
            data.n_classes
        )));
    }
    if data.height % 8 != 0 || data.width % 8 != 0 {
        return Err(PsgrError::invalid(format!(
            "image size {}x{} is not a multiple of 8",
            data.height, data.width
        )));
    }
    Ok(())
}

/// Per-pixel argmax of `[B, C, H, W]` logits; ties go to the lower class.
fn argmax_masks(logits: &Tensor<f32>) -> Vec<Vec<u8>> {
    let &[b, c, h, w] = logits.shape() else { unreachable!("logits are 4-d") };
    let p = h * w;
    let d = logits.data();
    (0..b)
        .map(|bi| {
            (0..p)
                .map(|i| {
                    let mut best = 0;
                    for k in 1..c {
                        if d[(bi * c + k) * p + i] > d[(bi * c + best) * p + i] {
                            best = k;
                        }
                    }
                    best as u8
                })
                .collect()
        })
        .collect()
}

const EVAL_BATCH: usize = 16;

fn predict_normalized(model: &SegNet<f32>, images: &[Vec<f32>], h: usize, w: usize) -> Result<Vec<Vec<u8>>> {
    let idx: Vec<usize> = (0..images.len()).collect();
    let mut out = Vec::with_capacity(images.len());
    for chunk in idx.chunks(EVAL_BATCH) {
        let mut tape = Tape::new();
        let pass = model.forward(&mut tape, &stack(images, chunk, h, w), false)?;
        out.extend(argmax_masks(tape.value(pass.logits)));
    }
    Ok(out)
}

/// Label masks for every image (normalized internally), eval-mode BN.
pub fn predict(model: &SegNet<f32>, data: &Dataset) -> Result<Vec<Vec<u8>>> {
    check_dataset(data, model.config.n_classes)?;
    predict_normalized(model, &normalized(data), data.height, data.width)
}

/// Metrics of given predictions against the dataset masks.
pub fn score_masks(preds: &[Vec<u8>], data: &Dataset) -> Result<EvalReport> {
    if preds.len() != data.len() {
        return Err(PsgrError::invalid(format!("{} predictions for {} images", preds.len(), data.len())));
    }
    let per_image = preds
        .par_iter()
        .zip(&data.masks)
        .map(|(p, t)| evaluate_masks(p, t, data.height, data.width, data.n_classes))
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        n_images: per_image.len(),
        mean: MetricReport::mean(&per_image),
        per_image,
    })
}

/// Metrics averaged over images.
pub fn evaluate(model: &SegNet<f32>, data: &Dataset) -> Result<EvalReport> {
    let preds = predict(model, data)?;
    score_masks(&preds, data)
}

/// Trains from the seed in `cfg`. Validation DSC is logged per epoch when
/// `val` is given.
pub fn train(train_set: &Dataset, val: Option<&Dataset>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_dataset(train_set, cfg.n_classes)?;
    if let Some(v) = val {
        check_dataset(v, cfg.n_classes)?;
        if (v.height, v.width) != (train_set.height, train_set.width) {
            return Err(PsgrError::invalid("validation images differ in size from training images"));
        }
    }
    let (h, w) = (train_set.height, train_set.width);
    let images = normalized(train_set);
    let val_images = val.map(normalized);
    let loss_cfg = cfg.loss_config();

    let mut model = SegNet::<f32>::new(cfg.model_config(), cfg.seed)?;
    let mut opt = Adam::new(model.params(), cfg.weight_decay);
    let mut shuffle = Rng::derived(cfg.seed, "shuffle");
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let lr = lr_at(cfg.lr, epoch, cfg.epochs, cfg.warmup_epochs);
        shuffle.shuffle(&mut order);
        let mut losses = Vec::new();
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let x = stack(&images, batch, h, w);
            let masks: Vec<&[u8]> = batch.iter().map(|&i| train_set.masks[i].as_slice()).collect();
            let target = one_hot::<f32>(&masks, cfg.n_classes, h, w)?;
            let diverged = |e: PsgrError| match e {
                PsgrError::NonFinite { .. } => PsgrError::Diverged { epoch, step },
                other => other,
            };
            let mut tape = Tape::new();
            let pass = model.forward(&mut tape, &x, true).map_err(diverged)?;
            let loss = total_loss_tape(&mut tape, pass.logits, pass.coarse_logits, &target, &loss_cfg)
                .map_err(diverged)?;
            let value = tape.value(loss).data()[0] as f64;
            if !value.is_finite() {
                return Err(PsgrError::Diverged { epoch, step });
            }
            losses.push(value);
            let grads = tape.backward(loss).map_err(diverged)?;
            let grads: Vec<Tensor<f32>> = pass.params.iter().map(|&v| grads.wrt(v)).collect();
            opt.step(model.params_mut(), &grads, lr)?;
            model.update_running(&pass.bn_stats);
        }
        let val_dsc = match (&val_images, val) {
            (Some(vi), Some(v)) => Some(score_masks(&predict_normalized(&model, vi, h, w)?, v)?.mean.dsc),
            _ => None,
        };
        log.push(EpochLog {
            epoch,
            lr,
            train_loss: losses.iter().sum::<f64>() / losses.len() as f64,
            first_batch_loss: losses[0],
            val_dsc,
        });
    }
    Ok(TrainOutcome { model, log })
}
