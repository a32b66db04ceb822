//! Dense row-major `f64` tensors and the raw numeric kernels the tape builds on.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim(
                "tensor",
                format!("shape {shape:?} holds {expected} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; len] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![], data: vec![value] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let len: usize = shape.iter().product();
        Self { shape: shape.to_vec(), data: (0..len).map(&mut f).collect() }
    }

    /// Square identity matrix.
    pub fn eye(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::Usage(format!("item() on tensor of shape {:?}", self.shape)));
        }
        Ok(self.data[0])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.expect_same_shape("zip", other)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self { shape: self.shape.clone(), data })
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.expect_same_shape("add_assign", other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row `i` of the tensor viewed as `[shape[0], rest]`.
    pub fn row(&self, i: usize) -> &[f64] {
        let width = self.row_width();
        &self.data[i * width..(i + 1) * width]
    }

    /// Number of elements per leading-axis slice.
    pub fn row_width(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    /// Gathers leading-axis slices into a new tensor, in the order given.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let width = self.row_width();
        let mut data = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            data.extend_from_slice(self.row(r));
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Self { shape, data }
    }

    pub(crate) fn expect_same_shape(&self, op: &'static str, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim(op, format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(())
    }

    pub(crate) fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape[..] {
            [m, k] => Ok((m, k)),
            _ => Err(Error::dim(op, format!("expected a matrix, got shape {:?}", self.shape))),
        }
    }

    pub(crate) fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [b, c, h, w] => Ok((b, c, h, w)),
            _ => Err(Error::dim(op, format!("expected a 4-d tensor, got shape {:?}", self.shape))),
        }
    }

    /// Matrix transpose.
    pub fn transpose(&self) -> Result<Self> {
        let (m, n) = self.dims2("transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Self::new(vec![n, m], out)
    }

    /// Standard matrix product `[m×k]·[k×p]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Self> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, p) = other.dims2("matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", format!("inner dimensions {k} and {k2} differ")));
        }
        let mut out = vec![0.0; m * p];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * p..(i + 1) * p];
            for (l, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[l * p..(l + 1) * p];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Self::new(vec![m, p], out)
    }

    /// Numerically stable log-softmax along the last axis.
    pub fn log_softmax(&self) -> Result<Self> {
        let k = *self.shape.last().ok_or_else(|| Error::dim("log_softmax", "scalar input"))?;
        if k < 2 {
            return Err(Error::dim("log_softmax", format!("last axis has {k} entries, need at least 2")));
        }
        let mut out = self.data.clone();
        for row in out.chunks_mut(k) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        Self::new(self.shape.clone(), out)
    }

    pub fn softmax(&self) -> Result<Self> {
        Ok(self.log_softmax()?.map(f64::exp))
    }
}

/// Geometry of a 2-d cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

/// Output extent along one spatial axis, or an error when the stride does not tile the padded input.
pub fn conv_out_extent(size: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::config("conv.stride", "stride must be at least 1"));
    }
    if k % 2 == 0 {
        return Err(Error::config("conv.k", format!("kernel size {k} must be odd")));
    }
    let padded = size + 2 * pad;
    if padded < k {
        return Err(Error::config("conv", format!("padded extent {padded} smaller than kernel {k}")));
    }
    if (padded - k) % stride != 0 {
        return Err(Error::config(
            "conv.stride",
            format!("non-integer output size: ({size} + 2·{pad} − {k}) / {stride}"),
        ));
    }
    Ok((padded - k) / stride + 1)
}

impl ConvGeometry {
    pub fn new(x: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Result<Self> {
        let (batch, c_in, h, w) = x.dims4("conv2d")?;
        let (c_out, kc, kh, kw) = kernel.dims4("conv2d")?;
        if kc != c_in {
            return Err(Error::dim("conv2d", format!("kernel expects {kc} input channels, input has {c_in}")));
        }
        if kh != kw {
            return Err(Error::dim("conv2d", format!("kernel must be square, got {kh}×{kw}")));
        }
        let h_out = conv_out_extent(h, kh, stride, pad)?;
        let w_out = conv_out_extent(w, kw, stride, pad)?;
        Ok(Self { batch, c_in, c_out, h, w, k: kh, stride, pad, h_out, w_out })
    }

    /// Input coordinate hit by output position `o` and kernel tap `t`, if inside the unpadded input.
    #[inline]
    fn source(&self, o: usize, t: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + t) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

pub(crate) fn conv2d_forward(x: &Tensor, kernel: &Tensor, g: &ConvGeometry) -> Tensor {
    let mut out = vec![0.0; g.batch * g.c_out * g.h_out * g.w_out];
    let (xd, kd) = (x.data(), kernel.data());
    for b in 0..g.batch {
        for co in 0..g.c_out {
            let o_base = ((b * g.c_out) + co) * g.h_out * g.w_out;
            for ci in 0..g.c_in {
                let x_base = ((b * g.c_in) + ci) * g.h * g.w;
                let k_base = ((co * g.c_in) + ci) * g.k * g.k;
                for ki in 0..g.k {
                    for kj in 0..g.k {
                        let kv = kd[k_base + ki * g.k + kj];
                        for oi in 0..g.h_out {
                            let Some(xi) = g.source(oi, ki, g.h) else { continue };
                            for oj in 0..g.w_out {
                                let Some(xj) = g.source(oj, kj, g.w) else { continue };
                                out[o_base + oi * g.w_out + oj] += kv * xd[x_base + xi * g.w + xj];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor { shape: vec![g.batch, g.c_out, g.h_out, g.w_out], data: out }
}

/// Adjoints of a cross-correlation with respect to its input and kernel.
pub(crate) fn conv2d_backward(
    x: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    g: &ConvGeometry,
    want_x: bool,
    want_k: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let mut dx = want_x.then(|| vec![0.0; x.len()]);
    let mut dk = want_k.then(|| vec![0.0; kernel.len()]);
    let (xd, kd, gd) = (x.data(), kernel.data(), grad_out.data());
    for b in 0..g.batch {
        for co in 0..g.c_out {
            let o_base = ((b * g.c_out) + co) * g.h_out * g.w_out;
            for ci in 0..g.c_in {
                let x_base = ((b * g.c_in) + ci) * g.h * g.w;
                let k_base = ((co * g.c_in) + ci) * g.k * g.k;
                for ki in 0..g.k {
                    for kj in 0..g.k {
                        let kidx = k_base + ki * g.k + kj;
                        let kv = kd[kidx];
                        let mut acc = 0.0;
                        for oi in 0..g.h_out {
                            let Some(xi) = g.source(oi, ki, g.h) else { continue };
                            for oj in 0..g.w_out {
                                let Some(xj) = g.source(oj, kj, g.w) else { continue };
                                let go = gd[o_base + oi * g.w_out + oj];
                                let xidx = x_base + xi * g.w + xj;
                                acc += go * xd[xidx];
                                if let Some(dx) = dx.as_mut() {
                                    dx[xidx] += go * kv;
                                }
                            }
                        }
                        if let Some(dk) = dk.as_mut() {
                            dk[kidx] += acc;
                        }
                    }
                }
            }
        }
    }
    (
        dx.map(|d| Tensor { shape: x.shape.clone(), data: d }),
        dk.map(|d| Tensor { shape: kernel.shape.clone(), data: d }),
    )
}

/// 2×2 max pooling with stride 2. Returns the pooled tensor and the flat source index of each output.
pub(crate) fn maxpool2x2_forward(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (b, c, h, w) = x.dims4("maxpool2x2")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::dim("maxpool2x2", format!("spatial size {h}×{w} is not even")));
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(b * c * ho * wo);
    let mut argmax = Vec::with_capacity(b * c * ho * wo);
    let xd = x.data();
    for plane in 0..b * c {
        let base = plane * h * w;
        for i in 0..ho {
            for j in 0..wo {
                let mut best = base + 2 * i * w + 2 * j;
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * i + di) * w + 2 * j + dj;
                    if xd[idx] > xd[best] {
                        best = idx;
                    }
                }
                out.push(xd[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor { shape: vec![b, c, ho, wo], data: out }, argmax))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_length_must_agree() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert_eq!(Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap().len(), 6);
    }

    #[test]
    fn identity_matmul() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(Tensor::eye(2).matmul(&a).unwrap(), a);
    }

    #[test]
    fn annihilating_matmul() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let b = Tensor::new(vec![2, 2], vec![0.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(a.matmul(&b).unwrap(), Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn matmul_inner_dimension_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(a.matmul(&b), Err(Error::Dimension { .. })));
    }

    #[test]
    fn log_softmax_symmetric_and_stable() {
        let z = Tensor::new(vec![2], vec![0.0, 0.0]).unwrap().log_softmax().unwrap();
        assert_eq!(z.data(), &[0.5f64.ln(), 0.5f64.ln()]);
        let z = Tensor::new(vec![2], vec![1000.0, 0.0]).unwrap().log_softmax().unwrap();
        assert!(z.data()[0].abs() < 1e-12);
        assert!((z.data()[1] + 1000.0).abs() < 1e-9);
        assert!(z.all_finite());
    }

    #[test]
    fn log_softmax_needs_two_classes() {
        assert!(Tensor::new(vec![1, 1], vec![3.0]).unwrap().log_softmax().is_err());
    }

    #[test]
    fn conv_extent_rules() {
        assert_eq!(conv_out_extent(5, 3, 1, 1).unwrap(), 5);
        assert_eq!(conv_out_extent(5, 3, 2, 1).unwrap(), 3);
        assert!(conv_out_extent(6, 3, 2, 1).is_err());
        assert!(conv_out_extent(5, 2, 1, 0).is_err());
        assert!(conv_out_extent(1, 5, 1, 0).is_err());
    }

    #[test]
    fn maxpool_of_constant() {
        let x = Tensor::full(&[1, 2, 4, 4], 3.5);
        let (y, _) = maxpool2x2_forward(&x).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 3.5));
    }
}
