//! Segmentation losses: BCE (or cross-entropy) plus Dice, and the deep
//! supervision total `L_seg(main) + λ·L_seg(coarse)`.

use serde::{Deserialize, Serialize};

use crate::autograd::{check::CheckCase, DiceClasses, Tape, Var};
use crate::autograd::image::upsample_planes;
use crate::error::{PsgrError, Result};
use crate::rng::Rng;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda: f64,
    pub dice_epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            dice_epsilon: 1e-5,
        }
    }
}

/// One-hot `[B, C, H, W]` targets from label masks.
pub fn one_hot<T: Scalar>(
    masks: &[&[u8]],
    n_classes: usize,
    height: usize,
    width: usize,
) -> Result<Tensor<T>> {
    let p = height * width;
    let mut out = vec![T::zero(); masks.len() * n_classes * p];
    for (b, m) in masks.iter().enumerate() {
        if m.len() != p {
            return Err(PsgrError::shape("one_hot", format!("mask of {} pixels", m.len())));
        }
        for (i, &l) in m.iter().enumerate() {
            let l = l as usize;
            if l >= n_classes {
                return Err(PsgrError::invalid(format!("label {l} outside {n_classes} classes")));
            }
            out[(b * n_classes + l) * p + i] = T::one();
        }
    }
    Tensor::new(&[masks.len(), n_classes, height, width], out)
}

/// `L_seg` on `[B, C, H, W]` probabilities. Two classes: BCE on the
/// foreground channel plus Dice. More classes: cross-entropy plus Dice
/// averaged over the foreground classes.
pub fn seg_loss_tape<T: Scalar>(
    tape: &mut Tape<T>,
    probs: Var,
    target: &Tensor<T>,
    cfg: &LossConfig,
) -> Result<Var> {
    let c = tape.shape(probs).get(1).copied().unwrap_or(0);
    let first = if c == 2 {
        let fg = tape.select_channels(probs, 1, 2)?;
        let [b, _, h, w] = [target.shape()[0], c, target.shape()[2], target.shape()[3]];
        let fg_target: Vec<T> = (0..b)
            .flat_map(|bi| target.data()[(bi * 2 + 1) * h * w..(bi * 2 + 2) * h * w].to_vec())
            .collect();
        tape.bce(fg, &Tensor::new(&[b, 1, h, w], fg_target)?)?
    } else {
        tape.cross_entropy(probs, target)?
    };
    let dice = tape.dice(probs, target, DiceClasses::Foreground, cfg.dice_epsilon)?;
    tape.add(first, dice)
}

/// Deep-supervised total loss from logits. The coarse logits are
/// upsampled to the target size before the softmax.
pub fn total_loss_tape<T: Scalar>(
    tape: &mut Tape<T>,
    main_logits: Var,
    coarse_logits: Var,
    target: &Tensor<T>,
    cfg: &LossConfig,
) -> Result<Var> {
    if cfg.lambda < 0.0 {
        return Err(PsgrError::invalid("lambda must be nonnegative"));
    }
    let main = tape.softmax_channels(main_logits)?;
    let main_loss = seg_loss_tape(tape, main, target, cfg)?;
    let (h, hc) = (tape.shape(main_logits)[2], tape.shape(coarse_logits)[2]);
    if hc == 0 || h % hc != 0 {
        return Err(PsgrError::shape("total_loss", "coarse size does not divide target size"));
    }
    let up = tape.upsample_bilinear(coarse_logits, h / hc)?;
    let coarse = tape.softmax_channels(up)?;
    let coarse_loss = seg_loss_tape(tape, coarse, target, cfg)?;
    let weighted = tape.scale(coarse_loss, cfg.lambda)?;
    tape.add(main_loss, weighted)
}

fn hwc_to_nchw<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<Tensor<T>> {
    let &[h, w, c] = t.shape() else {
        return Err(PsgrError::shape("loss", format!("{what} must be h×w×c")));
    };
    let data = crate::tensor::transpose_raw(t.data(), h * w, c);
    Tensor::new(&[1, c, h, w], data)
}

fn scalar_loss<T: Scalar>(
    tensors: &[&Tensor<T>],
    f: impl FnOnce(&mut Tape<T>, &[Var], &[Tensor<T>]) -> Result<Var>,
) -> Result<f64> {
    let nchw = tensors
        .iter()
        .map(|t| hwc_to_nchw(t, "input"))
        .collect::<Result<Vec<_>>>()?;
    let mut tape = Tape::new();
    let vars: Vec<Var> = nchw.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars, &nchw)?;
    Ok(tape.value(out).data()[0].as_f64())
}

/// Soft Dice over all channels of `h×w×c` probabilities, averaged over the
/// classes present in the one-hot target.
pub fn dice_loss<T: Scalar>(probs: &Tensor<T>, target: &Tensor<T>, epsilon: f64) -> Result<f64> {
    if probs.shape() != target.shape() {
        return Err(PsgrError::shape("dice_loss", "probabilities and target differ in shape"));
    }
    scalar_loss(&[probs, target], |tape, v, t| {
        tape.dice(v[0], &t[1], DiceClasses::All, epsilon)
    })
}

/// Mean binary cross-entropy with probabilities clamped to `[1e-7, 1 − 1e-7]`.
pub fn bce_loss<T: Scalar>(probs: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(probs.clone());
    let out = tape.bce(p, target)?;
    Ok(tape.value(out).data()[0].as_f64())
}

/// `L_seg(s_main, y) + λ·L_seg(s_coarse, y)` for `h×w×c` probability maps
/// already at the target size and a one-hot `y`.
pub fn total_loss<T: Scalar>(
    s_main: &Tensor<T>,
    s_coarse: &Tensor<T>,
    y: &Tensor<T>,
    cfg: &LossConfig,
) -> Result<f64> {
    if s_main.shape() != y.shape() || s_coarse.shape() != y.shape() {
        return Err(PsgrError::shape("total_loss", "predictions and target differ in shape"));
    }
    if cfg.lambda < 0.0 {
        return Err(PsgrError::invalid("lambda must be nonnegative"));
    }
    let main = scalar_loss(&[s_main, y], |tape, v, t| seg_loss_tape(tape, v[0], &t[1], cfg))?;
    let coarse = scalar_loss(&[s_coarse, y], |tape, v, t| seg_loss_tape(tape, v[0], &t[1], cfg))?;
    Ok(combine(main, coarse, cfg.lambda))
}

/// `main + λ·coarse`.
pub fn combine(main: f64, coarse: f64, lambda: f64) -> f64 {
    main + lambda * coarse
}

/// Bilinear upsampling of an `h×w×c` map by 2, 4 or 8 (half-pixel centers).
pub fn upsample_bilinear<T: Scalar>(t: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    if ![2, 4, 8].contains(&factor) {
        return Err(PsgrError::invalid(format!("unsupported upsampling factor {factor}")));
    }
    let &[h, w, c] = t.shape() else {
        return Err(PsgrError::shape("upsample_bilinear", "expected h×w×c"));
    };
    let planes = crate::tensor::transpose_raw(t.data(), h * w, c);
    let up = upsample_planes(&planes, c, h, w, factor);
    let (oh, ow) = (h * factor, w * factor);
    Tensor::new(&[oh, ow, c], crate::tensor::transpose_raw(&up, c, oh * ow))
}

fn random_one_hot(rng: &mut Rng, b: usize, c: usize, h: usize, w: usize) -> Result<Tensor<f64>> {
    let masks: Vec<Vec<u8>> = (0..b)
        .map(|_| (0..h * w).map(|_| rng.below(c) as u8).collect())
        .collect();
    let refs: Vec<&[u8]> = masks.iter().map(|m| m.as_slice()).collect();
    one_hot(&refs, c, h, w)
}

fn gradcheck_total(rng: &mut Rng, b: usize, c: usize) -> Result<CheckCase> {
    let target = random_one_hot(rng, b, c, 8, 8)?;
    let cfg = LossConfig::default();
    Ok(CheckCase {
        params: vec![
            ("main_logits", rng.normal_tensor(&[b, c, 8, 8])),
            ("coarse_logits", rng.normal_tensor(&[b, c, 2, 2])),
        ],
        forward: Box::new(move |t, v| total_loss_tape(t, v[0], v[1], &target, &cfg)),
    })
}

pub(crate) fn gradcheck_total_loss(rng: &mut Rng) -> Result<CheckCase> {
    gradcheck_total(rng, 2, 2)
}

pub(crate) fn gradcheck_total_loss_multiclass(rng: &mut Rng) -> Result<CheckCase> {
    gradcheck_total(rng, 1, 3)
}
