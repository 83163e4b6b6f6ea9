//! Image-shaped operations on `[B, C, H, W]` tensors: convolution, batch
//! normalization, pooling, bilinear upsampling and channel softmax.

use rayon::prelude::*;

use super::ops::{dims4, gemm_bt_acc};
use super::{Backward, Tape, Var};
use crate::error::{PsgrError, Result};
use crate::tensor::{gemm_acc, transpose_raw, Scalar, Tensor};

/// Unfolds one `cin×h×w` image into a `(cin·k·k) × (h·w)` patch matrix for
/// a stride-1 convolution with `pad` zero padding.
fn im2col<T: Scalar>(x: &[T], cin: usize, h: usize, w: usize, k: usize, pad: usize) -> Vec<T> {
    let p = h * w;
    let mut col = vec![T::zero(); cin * k * k * p];
    for ci in 0..cin {
        let plane = &x[ci * p..(ci + 1) * p];
        for ky in 0..k {
            for kx in 0..k {
                let t = (ci * k + ky) * k + kx;
                let row = &mut col[t * p..(t + 1) * p];
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    let dst = &mut row[y * w..(y + 1) * w];
                    let shift = kx as isize - pad as isize;
                    let lo = (-shift).max(0) as usize;
                    let hi = (w as isize - shift).min(w as isize).max(0) as usize;
                    for xx in lo..hi {
                        dst[xx] = src[(xx as isize + shift) as usize];
                    }
                }
            }
        }
    }
    col
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the image.
fn col2im<T: Scalar>(col: &[T], cin: usize, h: usize, w: usize, k: usize, pad: usize) -> Vec<T> {
    let p = h * w;
    let mut x = vec![T::zero(); cin * p];
    for ci in 0..cin {
        let plane = &mut x[ci * p..(ci + 1) * p];
        for ky in 0..k {
            for kx in 0..k {
                let t = (ci * k + ky) * k + kx;
                let row = &col[t * p..(t + 1) * p];
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    let src = &row[y * w..(y + 1) * w];
                    let shift = kx as isize - pad as isize;
                    let lo = (-shift).max(0) as usize;
                    let hi = (w as isize - shift).min(w as isize).max(0) as usize;
                    for xx in lo..hi {
                        let d = &mut dst[(xx as isize + shift) as usize];
                        *d = *d + src[xx];
                    }
                }
            }
        }
    }
    x
}

struct Conv2d {
    dims: [usize; 4],
    cout: usize,
    k: usize,
}

impl Conv2d {
    fn patches<'a, T: Scalar>(&self, x: &'a [T], b: usize) -> std::borrow::Cow<'a, [T]> {
        let [_, cin, h, w] = self.dims;
        let sample = &x[b * cin * h * w..(b + 1) * cin * h * w];
        if self.k == 1 {
            std::borrow::Cow::Borrowed(sample)
        } else {
            std::borrow::Cow::Owned(im2col(sample, cin, h, w, self.k, self.k / 2))
        }
    }
}

impl<T: Scalar> Backward<T> for Conv2d {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let [bsz, cin, h, w] = self.dims;
        let (k, cout) = (self.k, self.cout);
        let p = h * w;
        let kk = cin * k * k;
        let x = inputs[0].data();
        let wt = inputs[1].data();
        let g = grad.data();

        let dx = if needs[0] {
            let w_t = transpose_raw(wt, cout, kk);
            let parts: Vec<Vec<T>> = (0..bsz)
                .into_par_iter()
                .map(|b| {
                    let gb = &g[b * cout * p..(b + 1) * cout * p];
                    let mut dcol = vec![T::zero(); kk * p];
                    gemm_acc(&w_t, gb, &mut dcol, kk, cout, p);
                    if k == 1 {
                        dcol
                    } else {
                        col2im(&dcol, cin, h, w, k, k / 2)
                    }
                })
                .collect();
            Some(Tensor::from_parts(
                self.dims.to_vec(),
                parts.into_iter().flatten().collect(),
            ))
        } else {
            None
        };

        let dw = if needs[1] {
            let parts: Vec<Vec<T>> = (0..bsz)
                .into_par_iter()
                .map(|b| {
                    let gb = &g[b * cout * p..(b + 1) * cout * p];
                    let col = self.patches(x, b);
                    let mut dwb = vec![T::zero(); cout * kk];
                    gemm_bt_acc(gb, &col, &mut dwb, cout, p, kk);
                    dwb
                })
                .collect();
            let mut acc = vec![T::zero(); cout * kk];
            for part in parts {
                for (a, v) in acc.iter_mut().zip(part) {
                    *a = *a + v;
                }
            }
            Some(Tensor::from_parts(inputs[1].shape().to_vec(), acc))
        } else {
            None
        };

        let mut out = vec![dx, dw];
        if inputs.len() == 3 {
            out.push(needs[2].then(|| {
                let mut db = vec![T::zero(); cout];
                for b in 0..bsz {
                    for (co, d) in db.iter_mut().enumerate() {
                        let base = (b * cout + co) * p;
                        *d = g[base..base + p].iter().fold(*d, |acc, &v| acc + v);
                    }
                }
                Tensor::from_parts(vec![cout], db)
            }));
        }
        Ok(out)
    }
}

/// Running-statistics source for [`Tape::batch_norm`].
#[derive(Debug, Clone)]
pub enum BatchNormMode<T> {
    /// Normalize with the statistics of the current batch.
    Train,
    /// Normalize with fixed running statistics.
    Eval { mean: Vec<T>, var: Vec<T> },
}

/// Per-channel batch statistics observed in training mode.
#[derive(Debug, Clone)]
pub struct BatchNormStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance, as used for normalization.
    pub var: Vec<T>,
    /// Number of values per channel.
    pub count: usize,
}

struct BatchNorm<T> {
    dims: [usize; 4],
    inv_std: Vec<T>,
    mean: Vec<T>,
    train: bool,
}

impl<T: Scalar> Backward<T> for BatchNorm<T> {
    fn name(&self) -> &'static str {
        "batch_norm"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let [bsz, c, h, w] = self.dims;
        let p = h * w;
        let m = T::from_f64((bsz * p) as f64);
        let x = inputs[0].data();
        let gamma = inputs[1].data();
        let g = grad.data();
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for b in 0..bsz {
            for ch in 0..c {
                let base = (b * c + ch) * p;
                for i in base..base + p {
                    let xhat = (x[i] - self.mean[ch]) * self.inv_std[ch];
                    dbeta[ch] = dbeta[ch] + g[i];
                    dgamma[ch] = dgamma[ch] + g[i] * xhat;
                }
            }
        }
        let dx = needs[0].then(|| {
            let mut dx = vec![T::zero(); x.len()];
            for b in 0..bsz {
                for ch in 0..c {
                    let base = (b * c + ch) * p;
                    let scale = gamma[ch] * self.inv_std[ch];
                    for i in base..base + p {
                        dx[i] = if self.train {
                            let xhat = (x[i] - self.mean[ch]) * self.inv_std[ch];
                            scale / m * (m * g[i] - dbeta[ch] - xhat * dgamma[ch])
                        } else {
                            scale * g[i]
                        };
                    }
                }
            }
            Tensor::from_parts(self.dims.to_vec(), dx)
        });
        Ok(vec![
            dx,
            needs[1].then(|| Tensor::from_parts(vec![c], dgamma)),
            needs[2].then(|| Tensor::from_parts(vec![c], dbeta)),
        ])
    }
}

struct MaxPool2 {
    dims: [usize; 4],
    argmax: Vec<usize>,
}

impl<T: Scalar> Backward<T> for MaxPool2 {
    fn name(&self) -> &'static str {
        "maxpool2"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let mut dx = vec![T::zero(); self.dims.iter().product()];
        for (&src, &g) in self.argmax.iter().zip(grad.data()) {
            dx[src] = dx[src] + g;
        }
        Ok(vec![Some(Tensor::from_parts(self.dims.to_vec(), dx))])
    }
}

/// Source indices and interpolation weight for each output coordinate of a
/// bilinear upsampling by `factor` (half-pixel centers, edges clamped).
pub fn bilinear_table(n_in: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..n_in * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

#[inline]
fn lerp<T: Scalar>(a: T, b: T, t: T) -> T {
    a + t * (b - a)
}

/// Upsamples `planes` independent `h×w` planes stored back to back.
pub(crate) fn upsample_planes<T: Scalar>(
    data: &[T],
    planes: usize,
    h: usize,
    w: usize,
    factor: usize,
) -> Vec<T> {
    let ty = bilinear_table(h, factor);
    let tx = bilinear_table(w, factor);
    let (oh, ow) = (h * factor, w * factor);
    let mut out = vec![T::zero(); planes * oh * ow];
    out.par_chunks_mut(oh * ow)
        .zip(data.par_chunks(h * w))
        .for_each(|(dst, src)| {
            let mut rows = vec![T::zero(); h * ow];
            for y in 0..h {
                for (xo, &(x0, x1, lx)) in tx.iter().enumerate() {
                    rows[y * ow + xo] =
                        lerp(src[y * w + x0], src[y * w + x1], T::from_f64(lx));
                }
            }
            for (yo, &(y0, y1, ly)) in ty.iter().enumerate() {
                let ly = T::from_f64(ly);
                for xo in 0..ow {
                    dst[yo * ow + xo] = lerp(rows[y0 * ow + xo], rows[y1 * ow + xo], ly);
                }
            }
        });
    out
}

fn upsample_planes_backward<T: Scalar>(
    grad: &[T],
    planes: usize,
    h: usize,
    w: usize,
    factor: usize,
) -> Vec<T> {
    let ty = bilinear_table(h, factor);
    let tx = bilinear_table(w, factor);
    let (oh, ow) = (h * factor, w * factor);
    let mut out = vec![T::zero(); planes * h * w];
    out.par_chunks_mut(h * w)
        .zip(grad.par_chunks(oh * ow))
        .for_each(|(dst, g)| {
            let mut rows = vec![T::zero(); h * ow];
            for (yo, &(y0, y1, ly)) in ty.iter().enumerate() {
                let ly = T::from_f64(ly);
                for xo in 0..ow {
                    let gv = g[yo * ow + xo];
                    rows[y0 * ow + xo] = rows[y0 * ow + xo] + gv * (T::one() - ly);
                    rows[y1 * ow + xo] = rows[y1 * ow + xo] + gv * ly;
                }
            }
            for y in 0..h {
                for (xo, &(x0, x1, lx)) in tx.iter().enumerate() {
                    let lx = T::from_f64(lx);
                    let gv = rows[y * ow + xo];
                    dst[y * w + x0] = dst[y * w + x0] + gv * (T::one() - lx);
                    dst[y * w + x1] = dst[y * w + x1] + gv * lx;
                }
            }
        });
    out
}

struct Upsample {
    dims: [usize; 4],
    factor: usize,
}

impl<T: Scalar> Backward<T> for Upsample {
    fn name(&self) -> &'static str {
        "upsample_bilinear"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let [b, c, h, w] = self.dims;
        let dx = upsample_planes_backward(grad.data(), b * c, h, w, self.factor);
        Ok(vec![Some(Tensor::from_parts(self.dims.to_vec(), dx))])
    }
}

struct SoftmaxChannels {
    dims: [usize; 4],
}

impl<T: Scalar> Backward<T> for SoftmaxChannels {
    fn name(&self) -> &'static str {
        "softmax_channels"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let [bsz, c, h, w] = self.dims;
        let p = h * w;
        let (s, g) = (output.data(), grad.data());
        let mut dx = vec![T::zero(); s.len()];
        for b in 0..bsz {
            let base = b * c * p;
            for px in 0..p {
                let mut dot = T::zero();
                for ch in 0..c {
                    let i = base + ch * p + px;
                    dot = dot + g[i] * s[i];
                }
                for ch in 0..c {
                    let i = base + ch * p + px;
                    dx[i] = s[i] * (g[i] - dot);
                }
            }
        }
        Ok(vec![Some(Tensor::from_parts(self.dims.to_vec(), dx))])
    }
}

/// Channel-wise softmax of `[B, C, H, W]` values, computed without a tape.
pub(crate) fn softmax_channels_raw<T: Scalar>(x: &[T], [bsz, c, h, w]: [usize; 4]) -> Vec<T> {
    let p = h * w;
    let mut out = vec![T::zero(); x.len()];
    for b in 0..bsz {
        let base = b * c * p;
        for px in 0..p {
            let mut mx = T::neg_infinity();
            for ch in 0..c {
                mx = mx.max(x[base + ch * p + px]);
            }
            let mut total = T::zero();
            for ch in 0..c {
                let e = (x[base + ch * p + px] - mx).exp();
                out[base + ch * p + px] = e;
                total = total + e;
            }
            for ch in 0..c {
                let i = base + ch * p + px;
                out[i] = out[i] / total;
            }
        }
    }
    out
}

struct SelectChannels {
    dims: [usize; 4],
    start: usize,
    end: usize,
}

impl<T: Scalar> Backward<T> for SelectChannels {
    fn name(&self) -> &'static str {
        "select_channels"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let [bsz, c, h, w] = self.dims;
        let p = h * w;
        let sel = self.end - self.start;
        let mut dx = vec![T::zero(); bsz * c * p];
        for b in 0..bsz {
            let src = &grad.data()[b * sel * p..(b + 1) * sel * p];
            dx[(b * c + self.start) * p..(b * c + self.end) * p].copy_from_slice(src);
        }
        Ok(vec![Some(Tensor::from_parts(self.dims.to_vec(), dx))])
    }
}

impl<T: Scalar> Tape<T> {
    /// Stride-1 "same" convolution of `x: [B, Cin, H, W]` with an odd
    /// square kernel `weight: [Cout, Cin, k, k]` and optional bias `[Cout]`.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let dims = dims4(self.value(x), "conv2d")?;
        let [bsz, cin, h, w] = dims;
        let (cout, k) = match self.shape(weight) {
            &[co, ci, k1, k2] if ci == cin && k1 == k2 && k1 % 2 == 1 => (co, k1),
            s => {
                return Err(PsgrError::shape(
                    "conv2d",
                    format!("weight {s:?} incompatible with input {dims:?}"),
                ))
            }
        };
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(PsgrError::shape("conv2d", "bias length must equal Cout"));
            }
        }
        let op = Conv2d { dims, cout, k };
        let p = h * w;
        let kk = cin * k * k;
        let xv = self.value(x).data();
        let wv = self.value(weight).data();
        let bv = bias.map(|b| self.value(b).data());
        let parts: Vec<Vec<T>> = (0..bsz)
            .into_par_iter()
            .map(|b| {
                let col = op.patches(xv, b);
                let mut out = vec![T::zero(); cout * p];
                if let Some(bias) = bv {
                    for (co, row) in out.chunks_mut(p).enumerate() {
                        row.fill(bias[co]);
                    }
                }
                gemm_acc(wv, &col, &mut out, cout, kk, p);
                out
            })
            .collect();
        let out = Tensor::checked(
            "conv2d",
            vec![bsz, cout, h, w],
            parts.into_iter().flatten().collect(),
        )?;
        let inputs: Vec<Var> = [Some(x), Some(weight), bias].into_iter().flatten().collect();
        Ok(self.push(out, op, &inputs))
    }

    /// Per-channel normalization followed by the affine map
    /// `gamma · x̂ + beta`. In training mode the batch statistics are
    /// returned so the caller can update running estimates.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: &BatchNormMode<T>,
        eps: f64,
    ) -> Result<(Var, Option<BatchNormStats<T>>)> {
        let dims = dims4(self.value(x), "batch_norm")?;
        let [bsz, c, h, w] = dims;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(PsgrError::shape("batch_norm", "gamma/beta must have length C"));
        }
        let p = h * w;
        let xv = self.value(x).data();
        let (mean, var, stats) = match mode {
            BatchNormMode::Train => {
                let m = T::from_f64((bsz * p) as f64);
                let mut mean = vec![T::zero(); c];
                for b in 0..bsz {
                    for (ch, mu) in mean.iter_mut().enumerate() {
                        let base = (b * c + ch) * p;
                        *mu = xv[base..base + p].iter().fold(*mu, |a, &v| a + v);
                    }
                }
                mean.iter_mut().for_each(|v| *v = *v / m);
                let mut var = vec![T::zero(); c];
                for b in 0..bsz {
                    for (ch, s) in var.iter_mut().enumerate() {
                        let base = (b * c + ch) * p;
                        let mu = mean[ch];
                        *s = xv[base..base + p]
                            .iter()
                            .fold(*s, |a, &v| a + (v - mu) * (v - mu));
                    }
                }
                var.iter_mut().for_each(|v| *v = *v / m);
                let stats = BatchNormStats {
                    mean: mean.clone(),
                    var: var.clone(),
                    count: bsz * p,
                };
                (mean, var, Some(stats))
            }
            BatchNormMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(PsgrError::shape("batch_norm", "running stats length"));
                }
                (mean.clone(), var.clone(), None)
            }
        };
        let eps = T::from_f64(eps);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut out = vec![T::zero(); xv.len()];
        for b in 0..bsz {
            for ch in 0..c {
                let base = (b * c + ch) * p;
                for i in base..base + p {
                    out[i] = g[ch] * ((xv[i] - mean[ch]) * inv_std[ch]) + bt[ch];
                }
            }
        }
        let out = Tensor::checked("batch_norm", dims.to_vec(), out)?;
        let op = BatchNorm {
            dims,
            inv_std,
            mean,
            train: matches!(mode, BatchNormMode::Train),
        };
        Ok((self.push(out, op, &[x, gamma, beta]), stats))
    }

    /// 2×2 max pooling with stride 2. Ties go to the first element in
    /// row-major window order.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let dims = dims4(self.value(x), "maxpool2")?;
        let [bsz, c, h, w] = dims;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(PsgrError::shape("maxpool2", "spatial dims must be even"));
        }
        let (oh, ow) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(bsz * c * oh * ow);
        let mut argmax = Vec::with_capacity(bsz * c * oh * ow);
        for plane in 0..bsz * c {
            let base = plane * h * w;
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = base + 2 * y * w + 2 * xx;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * y + dy) * w + 2 * xx + dx;
                        if xv[i] > xv[best] {
                            best = i;
                        }
                    }
                    out.push(xv[best]);
                    argmax.push(best);
                }
            }
        }
        let out = Tensor::from_parts(vec![bsz, c, oh, ow], out);
        Ok(self.push(out, MaxPool2 { dims, argmax }, &[x]))
    }

    /// Bilinear upsampling by an integer `factor` with half-pixel centers.
    pub fn upsample_bilinear(&mut self, x: Var, factor: usize) -> Result<Var> {
        let dims = dims4(self.value(x), "upsample_bilinear")?;
        let [b, c, h, w] = dims;
        if factor == 0 {
            return Err(PsgrError::invalid("upsampling factor must be positive"));
        }
        let data = upsample_planes(self.value(x).data(), b * c, h, w, factor);
        let out = Tensor::checked("upsample_bilinear", vec![b, c, h * factor, w * factor], data)?;
        Ok(self.push(out, Upsample { dims, factor }, &[x]))
    }

    /// Softmax across the channel axis of `[B, C, H, W]`.
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let dims = dims4(self.value(x), "softmax_channels")?;
        let data = softmax_channels_raw(self.value(x).data(), dims);
        let out = Tensor::checked("softmax_channels", dims.to_vec(), data)?;
        Ok(self.push(out, SoftmaxChannels { dims }, &[x]))
    }

    /// Channels `start..end` of `[B, C, H, W]`.
    pub fn select_channels(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let dims = dims4(self.value(x), "select_channels")?;
        let [bsz, c, h, w] = dims;
        if start >= end || end > c {
            return Err(PsgrError::shape(
                "select_channels",
                format!("range {start}..{end} of {c} channels"),
            ));
        }
        let p = h * w;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(bsz * (end - start) * p);
        for b in 0..bsz {
            out.extend_from_slice(&xv[(b * c + start) * p..(b * c + end) * p]);
        }
        let out = Tensor::from_parts(vec![bsz, end - start, h, w], out);
        Ok(self.push(out, SelectChannels { dims, start, end }, &[x]))
    }
}
