//! Overlap and distance metrics on integer label masks.
//!
//! Empty-mask conventions: a class absent from both masks scores 1 on DSC,
//! IoU, sensitivity and specificity; a Hausdorff distance involving an empty
//! mask is the image diagonal.

use serde::{Deserialize, Serialize};

use crate::error::{PsgrError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricReport {
    pub miou: f64,
    pub dsc: f64,
    pub sen: f64,
    pub spe: f64,
    /// Pixels.
    pub hd: f64,
    pub mae: f64,
}

impl MetricReport {
    /// Field-wise mean; all zeros for an empty slice.
    pub fn mean(reports: &[MetricReport]) -> MetricReport {
        if reports.is_empty() {
            return MetricReport::default();
        }
        let n = reports.len() as f64;
        let sum = |f: fn(&MetricReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        MetricReport {
            miou: sum(|r| r.miou),
            dsc: sum(|r| r.dsc),
            sen: sum(|r| r.sen),
            spe: sum(|r| r.spe),
            hd: sum(|r| r.hd),
            mae: sum(|r| r.mae),
        }
    }
}

fn check(pred: &[u8], target: &[u8], n_classes: usize) -> Result<()> {
    if pred.len() != target.len() {
        return Err(PsgrError::shape(
            "metrics",
            format!("{} predicted vs {} target pixels", pred.len(), target.len()),
        ));
    }
    if n_classes < 2 {
        return Err(PsgrError::invalid("need at least two classes"));
    }
    if let Some(&bad) = pred.iter().chain(target).find(|&&l| l as usize >= n_classes) {
        return Err(PsgrError::invalid(format!("label {bad} outside {n_classes} classes")));
    }
    Ok(())
}

/// One-vs-rest counts for class `c`.
#[derive(Debug, Clone, Copy, Default)]
struct Counts {
    tp: u64,
    fp: u64,
    fn_: u64,
    tn: u64,
}

fn counts(pred: &[u8], target: &[u8], c: u8) -> Counts {
    let mut k = Counts::default();
    for (&p, &t) in pred.iter().zip(target) {
        match (p == c, t == c) {
            (true, true) => k.tp += 1,
            (true, false) => k.fp += 1,
            (false, true) => k.fn_ += 1,
            (false, false) => k.tn += 1,
        }
    }
    k
}

fn ratio_or_one(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

fn macro_fg(pred: &[u8], target: &[u8], n_classes: usize, f: fn(Counts) -> f64) -> f64 {
    let total: f64 = (1..n_classes).map(|c| f(counts(pred, target, c as u8))).sum();
    total / (n_classes - 1) as f64
}

/// Dice `2|P∩T| / (|P| + |T|)`, macro-averaged over foreground classes.
pub fn dsc(pred: &[u8], target: &[u8], n_classes: usize) -> Result<f64> {
    check(pred, target, n_classes)?;
    Ok(macro_fg(pred, target, n_classes, |k| {
        ratio_or_one(2 * k.tp, 2 * k.tp + k.fp + k.fn_)
    }))
}

/// Intersection over union averaged over all classes, background included.
pub fn miou(pred: &[u8], target: &[u8], n_classes: usize) -> Result<f64> {
    check(pred, target, n_classes)?;
    let total: f64 = (0..n_classes)
        .map(|c| {
            let k = counts(pred, target, c as u8);
            ratio_or_one(k.tp, k.tp + k.fp + k.fn_)
        })
        .sum();
    Ok(total / n_classes as f64)
}

/// `TP / (TP + FN)`, macro-averaged over foreground classes.
pub fn sensitivity(pred: &[u8], target: &[u8], n_classes: usize) -> Result<f64> {
    check(pred, target, n_classes)?;
    Ok(macro_fg(pred, target, n_classes, |k| ratio_or_one(k.tp, k.tp + k.fn_)))
}

/// `TN / (TN + FP)`, macro-averaged over foreground classes.
pub fn specificity(pred: &[u8], target: &[u8], n_classes: usize) -> Result<f64> {
    check(pred, target, n_classes)?;
    Ok(macro_fg(pred, target, n_classes, |k| ratio_or_one(k.tn, k.tn + k.fp)))
}

/// Mean absolute difference of the binarized (any foreground) masks.
pub fn mae(pred: &[u8], target: &[u8]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(PsgrError::shape("mae", "masks must be nonempty and equal length"));
    }
    let diff = pred
        .iter()
        .zip(target)
        .filter(|(&p, &t)| (p > 0) != (t > 0))
        .count();
    Ok(diff as f64 / pred.len() as f64)
}

/// Foreground pixels with at least one background 4-neighbor. Pixels
/// outside the image count as background.
pub fn boundary(mask: &[u8], height: usize, width: usize) -> Vec<(usize, usize)> {
    let fg = |y: isize, x: isize| {
        y >= 0
            && x >= 0
            && (y as usize) < height
            && (x as usize) < width
            && mask[y as usize * width + x as usize] > 0
    };
    let mut out = Vec::new();
    for y in 0..height as isize {
        for x in 0..width as isize {
            if fg(y, x) && [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|&(dy, dx)| !fg(y + dy, x + dx)) {
                out.push((y as usize, x as usize));
            }
        }
    }
    out
}

fn directed(a: &[(usize, usize)], b: &[(usize, usize)]) -> u64 {
    a.iter()
        .map(|&(ay, ax)| {
            b.iter()
                .map(|&(by, bx)| {
                    let dy = ay.abs_diff(by) as u64;
                    let dx = ax.abs_diff(bx) as u64;
                    dy * dy + dx * dx
                })
                .min()
                .unwrap_or(0)
        })
        .max()
        .unwrap_or(0)
}

/// Symmetric Hausdorff distance between the foreground boundaries, in
/// pixels, by exhaustive search over boundary pairs.
pub fn hausdorff(pred: &[u8], target: &[u8], height: usize, width: usize) -> Result<f64> {
    if pred.len() != height * width || target.len() != height * width {
        return Err(PsgrError::shape("hausdorff", "mask size does not match dimensions"));
    }
    let (bp, bt) = (boundary(pred, height, width), boundary(target, height, width));
    if bp.is_empty() || bt.is_empty() {
        return Ok(((height * height + width * width) as f64).sqrt());
    }
    let sq = directed(&bp, &bt).max(directed(&bt, &bp));
    Ok((sq as f64).sqrt())
}

/// All six metrics for one image.
pub fn evaluate_masks(
    pred: &[u8],
    target: &[u8],
    height: usize,
    width: usize,
    n_classes: usize,
) -> Result<MetricReport> {
    Ok(MetricReport {
        miou: miou(pred, target, n_classes)?,
        dsc: dsc(pred, target, n_classes)?,
        sen: sensitivity(pred, target, n_classes)?,
        spe: specificity(pred, target, n_classes)?,
        hd: hausdorff(pred, target, height, width)?,
        mae: mae(pred, target)?,
    })
}
