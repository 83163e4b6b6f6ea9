//! Segmentation losses on probability maps.

use super::ops::dims4;
use super::{Backward, Tape, Var};
use crate::error::{PsgrError, Result};
use crate::tensor::{Scalar, Tensor};

/// Probability clamp applied before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-7;

fn clamp_prob<T: Scalar>(p: T) -> (T, bool) {
    let lo = T::from_f64(PROB_FLOOR);
    let hi = T::from_f64(1.0 - PROB_FLOOR);
    if p < lo {
        (lo, false)
    } else if p > hi {
        (hi, false)
    } else {
        (p, true)
    }
}

fn check_same(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(PsgrError::shape(op, format!("prediction {a:?} vs target {b:?}")));
    }
    Ok(())
}

struct Bce<T> {
    target: Tensor<T>,
}

impl<T: Scalar> Backward<T> for Bce<T> {
    fn name(&self) -> &'static str {
        "bce"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let g = grad.data()[0] / T::from_f64(inputs[0].len() as f64);
        let d = inputs[0]
            .data()
            .iter()
            .zip(self.target.data())
            .map(|(&p, &t)| match clamp_prob(p) {
                (p, true) => g * ((T::one() - t) / (T::one() - p) - t / p),
                _ => T::zero(),
            })
            .collect();
        Ok(vec![Some(Tensor::from_parts(inputs[0].shape().to_vec(), d))])
    }
}

struct CrossEntropy<T> {
    target: Tensor<T>,
    pixels: usize,
}

impl<T: Scalar> Backward<T> for CrossEntropy<T> {
    fn name(&self) -> &'static str {
        "cross_entropy"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let g = grad.data()[0] / T::from_f64(self.pixels as f64);
        let d = inputs[0]
            .data()
            .iter()
            .zip(self.target.data())
            .map(|(&p, &t)| match clamp_prob(p) {
                (p, true) => -g * t / p,
                _ => T::zero(),
            })
            .collect();
        Ok(vec![Some(Tensor::from_parts(inputs[0].shape().to_vec(), d))])
    }
}

/// Which channels of a `[B, C, H, W]` probability map enter the Dice loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiceClasses {
    All,
    /// Channels `1..C`; channel 0 is background.
    Foreground,
}

impl DiceClasses {
    fn first(self, c: usize) -> usize {
        match self {
            DiceClasses::All => 0,
            DiceClasses::Foreground if c > 1 => 1,
            DiceClasses::Foreground => 0,
        }
    }
}

/// Per (sample, class) terms: scale applied to the class loss and the
/// intersection / denominator sums.
struct DiceTerm<T> {
    b: usize,
    c: usize,
    weight: T,
    inter: T,
    denom: T,
}

struct Dice<T> {
    dims: [usize; 4],
    target: Tensor<T>,
    terms: Vec<DiceTerm<T>>,
    eps: T,
}

impl<T: Scalar> Backward<T> for Dice<T> {
    fn name(&self) -> &'static str {
        "dice"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let [_, c, h, w] = self.dims;
        let p = h * w;
        let g = grad.data()[0];
        let t = self.target.data();
        let two = T::from_f64(2.0);
        let mut d = vec![T::zero(); inputs[0].len()];
        for term in &self.terms {
            let base = (term.b * c + term.c) * p;
            let num = two * term.inter + self.eps;
            let den2 = term.denom * term.denom;
            let scale = g * term.weight;
            for i in base..base + p {
                d[i] = -scale * (two * t[i] * term.denom - num) / den2;
            }
        }
        Ok(vec![Some(Tensor::from_parts(self.dims.to_vec(), d))])
    }
}

/// Summed Dice terms per (sample, class) as `(intersection, Σp + Σt)`.
fn dice_sums<T: Scalar>(p: &[T], t: &[T], base: usize, len: usize) -> (T, T, T) {
    let mut inter = T::zero();
    let mut sp = T::zero();
    let mut st = T::zero();
    for i in base..base + len {
        inter = inter + p[i] * t[i];
        sp = sp + p[i];
        st = st + t[i];
    }
    (inter, sp, st)
}

impl<T: Scalar> Tape<T> {
    /// Mean binary cross-entropy between probabilities and a same-shaped
    /// target in `[0, 1]`. Probabilities are clamped to `[1e-7, 1 − 1e-7]`;
    /// the gradient is zero where the clamp is active.
    pub fn bce(&mut self, probs: Var, target: &Tensor<T>) -> Result<Var> {
        check_same("bce", self.shape(probs), target.shape())?;
        let p = self.value(probs);
        let total = p
            .data()
            .iter()
            .zip(target.data())
            .fold(T::zero(), |acc, (&p, &t)| {
                let (p, _) = clamp_prob(p);
                acc - (t * p.ln() + (T::one() - t) * (T::one() - p).ln())
            });
        let loss = total / T::from_f64(p.len() as f64);
        let out = Tensor::checked("bce", vec![], vec![loss])?;
        Ok(self.push(
            out,
            Bce {
                target: target.clone(),
            },
            &[probs],
        ))
    }

    /// Categorical cross-entropy of `[B, C, H, W]` probabilities against a
    /// one-hot target, averaged over pixels.
    pub fn cross_entropy(&mut self, probs: Var, target: &Tensor<T>) -> Result<Var> {
        let [b, _, h, w] = dims4(self.value(probs), "cross_entropy")?;
        check_same("cross_entropy", self.shape(probs), target.shape())?;
        let pixels = b * h * w;
        let total = self
            .value(probs)
            .data()
            .iter()
            .zip(target.data())
            .fold(T::zero(), |acc, (&p, &t)| acc - t * clamp_prob(p).0.ln());
        let out = Tensor::checked("cross_entropy", vec![], vec![total / T::from_f64(pixels as f64)])?;
        Ok(self.push(
            out,
            CrossEntropy {
                target: target.clone(),
                pixels,
            },
            &[probs],
        ))
    }

    /// Soft Dice loss `1 − (2I + ε)/(Σp + Σt + ε)` per class, averaged over
    /// the selected classes present in each sample's target (all selected
    /// classes when none is present), then over samples.
    pub fn dice(
        &mut self,
        probs: Var,
        target: &Tensor<T>,
        classes: DiceClasses,
        eps: f64,
    ) -> Result<Var> {
        let dims = dims4(self.value(probs), "dice")?;
        check_same("dice", self.shape(probs), target.shape())?;
        let [bsz, c, h, w] = dims;
        let p = h * w;
        let eps_t = T::from_f64(eps);
        let pv = self.value(probs).data();
        let tv = target.data();
        let first = classes.first(c);
        let two = T::from_f64(2.0);
        let mut terms = Vec::new();
        let mut loss = T::zero();
        for b in 0..bsz {
            let sums: Vec<(usize, T, T, T)> = (first..c)
                .map(|ch| {
                    let (i, sp, st) = dice_sums(pv, tv, (b * c + ch) * p, p);
                    (ch, i, sp, st)
                })
                .collect();
            let present: Vec<_> = sums.iter().filter(|s| s.3 > T::zero()).copied().collect();
            let used = if present.is_empty() { sums } else { present };
            let weight = T::one() / T::from_f64((used.len() * bsz) as f64);
            for (ch, inter, sp, st) in used {
                let denom = sp + st + eps_t;
                loss = loss + weight * (T::one() - (two * inter + eps_t) / denom);
                terms.push(DiceTerm {
                    b,
                    c: ch,
                    weight,
                    inter,
                    denom,
                });
            }
        }
        let out = Tensor::checked("dice", vec![], vec![loss])?;
        Ok(self.push(
            out,
            Dice {
                dims,
                target: target.clone(),
                terms,
                eps: eps_t,
            },
            &[probs],
        ))
    }
}
