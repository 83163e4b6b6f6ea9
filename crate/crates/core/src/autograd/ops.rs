use super::{Backward, Tape, Var};
use crate::error::{PsgrError, Result};
use crate::tensor::{sigmoid, transpose_raw, Scalar, Tensor};

struct MatMul;

impl<T: Scalar> Backward<T> for MatMul {
    fn name(&self) -> &'static str {
        "matmul"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (a, b) = (inputs[0], inputs[1]);
        let da = if needs[0] {
            Some(grad.matmul(&b.transpose()?)?)
        } else {
            None
        };
        let db = if needs[1] {
            Some(a.transpose()?.matmul(grad)?)
        } else {
            None
        };
        Ok(vec![da, db])
    }
}

struct Transpose;

impl<T: Scalar> Backward<T> for Transpose {
    fn name(&self) -> &'static str {
        "transpose"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(grad.transpose()?)])
    }
}

#[derive(Clone, Copy)]
enum Pointwise {
    Add,
    Sub,
    Mul,
}

impl<T: Scalar> Backward<T> for Pointwise {
    fn name(&self) -> &'static str {
        match self {
            Pointwise::Add => "add",
            Pointwise::Sub => "sub",
            Pointwise::Mul => "mul",
        }
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(match self {
            Pointwise::Add => vec![Some(grad.clone()), Some(grad.clone())],
            Pointwise::Sub => vec![Some(grad.clone()), Some(grad.scale(-1.0)?)],
            Pointwise::Mul => vec![
                needs[0].then(|| grad.mul(inputs[1])).transpose()?,
                needs[1].then(|| grad.mul(inputs[0])).transpose()?,
            ],
        })
    }
}

struct RowBias;

impl<T: Scalar> Backward<T> for RowBias {
    fn name(&self) -> &'static str {
        "add_row_bias"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (m, n) = grad.dims2()?;
        let db = needs[1].then(|| {
            let mut acc = vec![T::zero(); n];
            for i in 0..m {
                for (a, &g) in acc.iter_mut().zip(grad.row(i)) {
                    *a = *a + g;
                }
            }
            Tensor::from_parts(vec![n], acc)
        });
        Ok(vec![Some(grad.clone()), db])
    }
}

struct Scale(f64);

impl<T: Scalar> Backward<T> for Scale {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(grad.scale(self.0)?)])
    }
}

struct SumAll {
    mean: bool,
}

impl<T: Scalar> Backward<T> for SumAll {
    fn name(&self) -> &'static str {
        if self.mean {
            "mean"
        } else {
            "sum"
        }
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let mut g = grad.data()[0];
        if self.mean {
            g = g / T::from_f64(inputs[0].len() as f64);
        }
        Ok(vec![Some(Tensor::full(inputs[0].shape(), g))])
    }
}

struct Relu;

impl<T: Scalar> Backward<T> for Relu {
    fn name(&self) -> &'static str {
        "relu"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let data = inputs[0]
            .data()
            .iter()
            .zip(grad.data())
            .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
            .collect();
        Ok(vec![Some(Tensor::from_parts(grad.shape().to_vec(), data))])
    }
}

struct Sigmoid;

impl<T: Scalar> Backward<T> for Sigmoid {
    fn name(&self) -> &'static str {
        "sigmoid"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        // derivative evaluated at the clamped input, via the stored output
        let data = output
            .data()
            .iter()
            .zip(grad.data())
            .map(|(&s, &g)| g * s * (T::one() - s))
            .collect();
        Ok(vec![Some(Tensor::from_parts(grad.shape().to_vec(), data))])
    }
}

struct Reshape;

impl<T: Scalar> Backward<T> for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        Ok(vec![Some(grad.reshape(inputs[0].shape())?)])
    }
}

/// `[B, C, H, W]` ↔ `[B·H·W, C]`.
struct NchwRows {
    to_rows: bool,
    dims: [usize; 4],
}

pub(crate) fn nchw_to_rows<T: Scalar>(data: &[T], [b, c, h, w]: [usize; 4]) -> Vec<T> {
    let p = h * w;
    let mut out = vec![T::zero(); data.len()];
    for bi in 0..b {
        let plane = transpose_raw(&data[bi * c * p..(bi + 1) * c * p], c, p);
        out[bi * c * p..(bi + 1) * c * p].copy_from_slice(&plane);
    }
    out
}

pub(crate) fn rows_to_nchw<T: Scalar>(data: &[T], [b, c, h, w]: [usize; 4]) -> Vec<T> {
    let p = h * w;
    let mut out = vec![T::zero(); data.len()];
    for bi in 0..b {
        let plane = transpose_raw(&data[bi * c * p..(bi + 1) * c * p], p, c);
        out[bi * c * p..(bi + 1) * c * p].copy_from_slice(&plane);
    }
    out
}

impl<T: Scalar> Backward<T> for NchwRows {
    fn name(&self) -> &'static str {
        if self.to_rows {
            "nchw_to_rows"
        } else {
            "rows_to_nchw"
        }
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let data = if self.to_rows {
            rows_to_nchw(grad.data(), self.dims)
        } else {
            nchw_to_rows(grad.data(), self.dims)
        };
        Ok(vec![Some(Tensor::from_parts(inputs[0].shape().to_vec(), data))])
    }
}

fn same_shape<T: Scalar>(tape: &Tape<T>, op: &'static str, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(PsgrError::shape(
            op,
            format!("{:?} vs {:?}", tape.shape(a), tape.shape(b)),
        ));
    }
    Ok(())
}

impl<T: Scalar> Tape<T> {
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, MatMul, &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        Ok(self.push(out, Transpose, &[a]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "add", a, b)?;
        let out = self.value(a).add(self.value(b))?;
        Ok(self.push(out, Pointwise::Add, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "sub", a, b)?;
        let out = self.value(a).sub(self.value(b))?;
        Ok(self.push(out, Pointwise::Sub, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self, "mul", a, b)?;
        let out = self.value(a).mul(self.value(b))?;
        Ok(self.push(out, Pointwise::Mul, &[a, b]))
    }

    /// `x[i, :] + bias` for every row of an `M×n` matrix.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.value(x).dims2()?;
        if self.shape(bias) != [n] {
            return Err(PsgrError::shape(
                "add_row_bias",
                format!("bias {:?} for {m}×{n} input", self.shape(bias)),
            ));
        }
        let b = self.value(bias).data();
        let data: Vec<T> = self
            .value(x)
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(&v, &bb)| v + bb))
            .collect();
        let out = Tensor::checked("add_row_bias", vec![m, n], data)?;
        Ok(self.push(out, RowBias, &[x, bias]))
    }

    pub fn scale(&mut self, a: Var, alpha: f64) -> Result<Var> {
        let out = self.value(a).scale(alpha)?;
        Ok(self.push(out, Scale(alpha), &[a]))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::checked("sum", vec![], vec![self.value(a).sum()])?;
        Ok(self.push(out, SumAll { mean: false }, &[a]))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let m = v.sum() / T::from_f64(v.len() as f64);
        let out = Tensor::checked("mean", vec![], vec![m])?;
        Ok(self.push(out, SumAll { mean: true }, &[a]))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).relu()?;
        Ok(self.push(out, Relu, &[a]))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let data = self.value(a).data().iter().map(|&v| sigmoid(v)).collect();
        let out = Tensor::checked("sigmoid", self.shape(a).to_vec(), data)?;
        Ok(self.push(out, Sigmoid, &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(out, Reshape, &[a]))
    }

    /// `[B, C, H, W]` to one row per pixel: `[B·H·W, C]`.
    pub fn nchw_to_rows(&mut self, x: Var) -> Result<Var> {
        let dims = dims4(self.value(x), "nchw_to_rows")?;
        let [b, c, h, w] = dims;
        let data = nchw_to_rows(self.value(x).data(), dims);
        let out = Tensor::from_parts(vec![b * h * w, c], data);
        Ok(self.push(out, NchwRows { to_rows: true, dims }, &[x]))
    }

    /// Inverse of [`Tape::nchw_to_rows`].
    pub fn rows_to_nchw(&mut self, x: Var, b: usize, h: usize, w: usize) -> Result<Var> {
        let (m, c) = self.value(x).dims2()?;
        if m != b * h * w {
            return Err(PsgrError::shape(
                "rows_to_nchw",
                format!("{m} rows cannot form {b}×{h}×{w}"),
            ));
        }
        let dims = [b, c, h, w];
        let data = rows_to_nchw(self.value(x).data(), dims);
        let out = Tensor::from_parts(vec![b, c, h, w], data);
        Ok(self.push(out, NchwRows { to_rows: false, dims }, &[x]))
    }
}

pub(crate) fn dims4<T: Scalar>(t: &Tensor<T>, op: &'static str) -> Result<[usize; 4]> {
    match t.shape() {
        &[b, c, h, w] => Ok([b, c, h, w]),
        s => Err(PsgrError::shape(op, format!("expected [B, C, H, W], got {s:?}"))),
    }
}

/// `c += a · bᵀ` for row-major `a: m×k`, `b: n×k`.
///
/// Each entry is a dot product of two contiguous rows, summed in eight
/// interleaved lanes that are then added in lane order, so the result does
/// not depend on how rows are scheduled.
pub(crate) fn gemm_bt_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    const LANES: usize = 8;
    let split = k - k % LANES;
    for (c_row, a_row) in c.chunks_mut(n).zip(a.chunks(k.max(1))) {
        for (cv, b_row) in c_row.iter_mut().zip(b.chunks(k.max(1))) {
            let mut acc = [T::zero(); LANES];
            for (ac, bc) in a_row[..split].chunks_exact(LANES).zip(b_row[..split].chunks_exact(LANES)) {
                for l in 0..LANES {
                    acc[l] = acc[l] + ac[l] * bc[l];
                }
            }
            let mut sum = acc.iter().fold(T::zero(), |s, &x| s + x);
            for t in split..k {
                sum = sum + a_row[t] * b_row[t];
            }
            *cv = *cv + sum;
        }
    }
}
