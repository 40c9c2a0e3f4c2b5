//! Forward and backward kernels.
//!
//! Forward functions validate shapes and return errors; the matching
//! `*_backward` functions assume the shapes their forward pass produced.

use crate::error::{Error, Result};
use crate::scalar::{MatRef, Scalar};
use crate::tensor::Tensor;

pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = a.as_matrix_dims("matmul")?;
    let (k2, n) = b.as_matrix_dims("matmul")?;
    if k != k2 {
        return Err(Error::shape(
            "matmul",
            format!("inner extents differ: {m}x{k} times {k2}x{n}"),
        ));
    }
    let mut out = vec![T::zero(); m * n];
    T::gemm(
        T::one(),
        MatRef::new(a.data(), m, k),
        MatRef::new(b.data(), k, n),
        T::zero(),
        &mut out,
    );
    Tensor::from_vec(&[m, n], out)
}

/// Returns `(dA, dB)` for `C = A·B` given `dC`.
pub fn matmul_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    grad_out: &Tensor<T>,
    need_a: bool,
    need_b: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let dc = MatRef::new(grad_out.data(), m, n);
    let da = need_a.then(|| {
        let mut da = vec![T::zero(); m * k];
        T::gemm(T::one(), dc, MatRef::new(b.data(), k, n).t(), T::zero(), &mut da);
        Tensor::from_vec(&[m, k], da).expect("matmul grad shape")
    });
    let db = need_b.then(|| {
        let mut db = vec![T::zero(); k * n];
        T::gemm(T::one(), MatRef::new(a.data(), m, k).t(), dc, T::zero(), &mut db);
        Tensor::from_vec(&[k, n], db).expect("matmul grad shape")
    });
    (da, db)
}

/// Splits `[N, C, rest...]` into `(N, C, prod(rest))`.
fn channel_layout(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::shape(
            op,
            format!("expected at least [N, C], got {shape:?}"),
        ));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

/// Adds a per-channel (axis 1) bias.
pub fn add_bias<T: Scalar>(x: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, inner) = channel_layout(x.shape(), "add_bias")?;
    if bias.shape() != [c] {
        return Err(Error::shape(
            "add_bias",
            format!("bias {:?} does not match {c} channels", bias.shape()),
        ));
    }
    let mut out = x.clone();
    let b = bias.data();
    for (i, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
        let bc = b[i % c];
        for v in chunk {
            *v += bc;
        }
    }
    debug_assert_eq!(out.len(), n * c * inner);
    Ok(out)
}

pub fn add_bias_backward<T: Scalar>(grad_out: &Tensor<T>, channels: usize) -> Tensor<T> {
    let inner = grad_out.len() / grad_out.shape()[0] / channels;
    let mut db = vec![T::zero(); channels];
    for (i, chunk) in grad_out.data().chunks(inner).enumerate() {
        db[i % channels] += chunk.iter().copied().sum::<T>();
    }
    Tensor::from_vec(&[channels], db).expect("bias grad shape")
}

/// Geometry of a 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let [batch, in_channels, height, width] = *input else {
            return Err(Error::shape(
                "conv2d",
                format!("input must be N x C x H x W, got {input:?}"),
            ));
        };
        let [filters, kc, kernel_h, kernel_w] = *kernel else {
            return Err(Error::shape(
                "conv2d",
                format!("kernel must be F x C x kh x kw, got {kernel:?}"),
            ));
        };
        if kc != in_channels {
            return Err(Error::shape(
                "conv2d",
                format!("kernel has {kc} input channels, input has {in_channels}"),
            ));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
        }
        let out_h = out_extent(height, kernel_h, stride, padding)?;
        let out_w = out_extent(width, kernel_w, stride, padding)?;
        Ok(Self {
            batch,
            in_channels,
            height,
            width,
            filters,
            kernel_h,
            kernel_w,
            stride,
            padding,
            out_h,
            out_w,
        })
    }

    fn col_rows(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

fn out_extent(size: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = size + 2 * padding;
    if padded < kernel || !(padded - kernel).is_multiple_of(stride) {
        return Err(Error::shape(
            "conv2d",
            format!(
                "extent {size} with padding {padding}, kernel {kernel}, stride {stride} \
                 does not give an integral output extent"
            ),
        ));
    }
    Ok((padded - kernel) / stride + 1)
}

fn im2col<T: Scalar>(g: &ConvGeometry, image: &[T], cols: &mut [T]) {
    let (ncols, ow) = (g.col_cols(), g.out_w);
    for c in 0..g.in_channels {
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oi in 0..g.out_h {
                    let y = (oi * g.stride + ki) as isize - g.padding as isize;
                    for oj in 0..ow {
                        let x = (oj * g.stride + kj) as isize - g.padding as isize;
                        dst[oi * ow + oj] = if y >= 0
                            && (y as usize) < g.height
                            && x >= 0
                            && (x as usize) < g.width
                        {
                            image[(c * g.height + y as usize) * g.width + x as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &ConvGeometry, cols: &[T], image: &mut [T]) {
    let (ncols, ow) = (g.col_cols(), g.out_w);
    for c in 0..g.in_channels {
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oi in 0..g.out_h {
                    let y = (oi * g.stride + ki) as isize - g.padding as isize;
                    if y < 0 || y as usize >= g.height {
                        continue;
                    }
                    for oj in 0..ow {
                        let x = (oj * g.stride + kj) as isize - g.padding as isize;
                        if x >= 0 && (x as usize) < g.width {
                            image[(c * g.height + y as usize) * g.width + x as usize] +=
                                src[oi * ow + oj];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation (no kernel flip) via im2col and GEMM.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(input.shape(), kernel.shape(), stride, padding)?;
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let image_len = g.in_channels * g.height * g.width;
    let out_len = g.filters * ncols;
    let mut cols = vec![T::zero(); rows * ncols];
    let mut out = vec![T::zero(); g.batch * out_len];
    let kmat = MatRef::new(kernel.data(), g.filters, rows);
    for n in 0..g.batch {
        im2col(&g, &input.data()[n * image_len..(n + 1) * image_len], &mut cols);
        T::gemm(
            T::one(),
            kmat,
            MatRef::new(&cols, rows, ncols),
            T::zero(),
            &mut out[n * out_len..(n + 1) * out_len],
        );
    }
    Tensor::from_vec(&[g.batch, g.filters, g.out_h, g.out_w], out)
}

/// Returns `(d input, d kernel)`.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: usize,
    need_input: bool,
    need_kernel: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let g = ConvGeometry::new(input.shape(), kernel.shape(), stride, padding)
        .expect("geometry validated in forward");
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let image_len = g.in_channels * g.height * g.width;
    let out_len = g.filters * ncols;
    let kmat = MatRef::new(kernel.data(), g.filters, rows);
    let mut cols = vec![T::zero(); rows * ncols];
    let mut dcols = vec![T::zero(); rows * ncols];
    let mut dinput = need_input.then(|| vec![T::zero(); input.len()]);
    let mut dkernel = need_kernel.then(|| vec![T::zero(); kernel.len()]);
    for n in 0..g.batch {
        let dout = MatRef::new(&grad_out.data()[n * out_len..(n + 1) * out_len], g.filters, ncols);
        if let Some(dk) = dkernel.as_mut() {
            im2col(&g, &input.data()[n * image_len..(n + 1) * image_len], &mut cols);
            T::gemm(T::one(), dout, MatRef::new(&cols, rows, ncols).t(), T::one(), dk);
        }
        if let Some(dx) = dinput.as_mut() {
            T::gemm(T::one(), kmat.t(), dout, T::zero(), &mut dcols);
            col2im(&g, &dcols, &mut dx[n * image_len..(n + 1) * image_len]);
        }
    }
    (
        dinput.map(|d| Tensor::from_vec(input.shape(), d).expect("input grad shape")),
        dkernel.map(|d| Tensor::from_vec(kernel.shape(), d).expect("kernel grad shape")),
    )
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn leaky_relu<T: Scalar>(x: &Tensor<T>, slope: T) -> Result<Tensor<T>> {
    check_slope(slope)?;
    Ok(x.map(|v| if v > T::zero() { v } else { slope * v }))
}

pub(crate) fn check_slope<T: Scalar>(slope: T) -> Result<()> {
    if !(slope >= T::zero() && slope < T::one()) {
        return Err(Error::InvalidArgument(format!(
            "leaky relu slope must lie in [0, 1), got {slope}"
        )));
    }
    Ok(())
}

/// Gradient of `relu` (slope 0) or `leaky_relu` with respect to its input.
pub fn leaky_relu_backward<T: Scalar>(x: &Tensor<T>, grad_out: &Tensor<T>, slope: T) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { slope * g })
        .collect();
    Tensor::from_vec(x.shape(), data).expect("activation grad shape")
}

/// Windowed max over the two trailing axes. Trailing partial windows are
/// dropped. Returns the output and, for each output element, the flat input
/// index that produced it.
pub fn maxpool2d<T: Scalar>(
    x: &Tensor<T>,
    size: usize,
    stride: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let [n, c, h, w] = *x.shape() else {
        return Err(Error::shape(
            "maxpool2d",
            format!("expected N x C x H x W, got {:?}", x.shape()),
        ));
    };
    if size == 0 || stride == 0 {
        return Err(Error::InvalidArgument(
            "maxpool2d window and stride must be positive".into(),
        ));
    }
    if h < size || w < size {
        return Err(Error::shape(
            "maxpool2d",
            format!("window {size} larger than spatial extent {h}x{w}"),
        ));
    }
    let (oh, ow) = ((h - size) / stride + 1, (w - size) / stride + 1);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    let data = x.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oi in 0..oh {
            for oj in 0..ow {
                let mut best = base + oi * stride * w + oj * stride;
                for di in 0..size {
                    for dj in 0..size {
                        let idx = base + (oi * stride + di) * w + oj * stride + dj;
                        if data[idx] > data[best] {
                            best = idx;
                        }
                    }
                }
                out.push(data[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::from_vec(&[n, c, oh, ow], out)?, argmax))
}

pub fn maxpool2d_backward<T: Scalar>(
    input_shape: &[usize],
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        d[idx] += g;
    }
    dx
}

/// Per-channel running statistics of a batch-normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }
}

pub const BATCHNORM_MOMENTUM: f64 = 0.1;
pub const BATCHNORM_EPS: f64 = 1e-5;

/// Values saved by a training-mode batch-norm pass for its backward pass.
#[derive(Clone, Debug)]
pub struct BatchNormCache<T> {
    pub normalized: Tensor<T>,
    pub inv_std: Vec<T>,
}

fn check_bn_params<T: Scalar>(
    channels: usize,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<()> {
    if gamma.shape() != [channels] || beta.shape() != [channels] {
        return Err(Error::shape(
            "batchnorm",
            format!(
                "gamma {:?} / beta {:?} do not match {channels} channels",
                gamma.shape(),
                beta.shape()
            ),
        ));
    }
    Ok(())
}

/// Training-mode batch normalization over axis 1. Normalizes with the biased
/// batch variance and folds the unbiased variance into `running`.
pub fn batchnorm_train<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running: Option<&mut RunningStats<T>>,
    momentum: T,
    eps: T,
) -> Result<(Tensor<T>, BatchNormCache<T>)> {
    let (n, c, inner) = channel_layout(x.shape(), "batchnorm")?;
    check_bn_params(c, gamma, beta)?;
    if n < 2 {
        return Err(Error::InvalidArgument(format!(
            "training-mode batch norm needs at least 2 samples, got {n}"
        )));
    }
    let count = n * inner;
    let m = T::lit(count as f64);
    let data = x.data();
    let mut mean = vec![T::zero(); c];
    for (i, chunk) in data.chunks(inner).enumerate() {
        mean[i % c] += chunk.iter().copied().sum::<T>();
    }
    for v in &mut mean {
        *v /= m;
    }
    let mut var = vec![T::zero(); c];
    for (i, chunk) in data.chunks(inner).enumerate() {
        let mu = mean[i % c];
        var[i % c] += chunk.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>();
    }
    for v in &mut var {
        *v /= m;
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();

    let mut normalized = x.clone();
    let mut out = x.clone();
    let (g, b) = (gamma.data(), beta.data());
    for (i, (nchunk, ochunk)) in normalized
        .data_mut()
        .chunks_mut(inner)
        .zip(out.data_mut().chunks_mut(inner))
        .enumerate()
    {
        let ch = i % c;
        for (xn, o) in nchunk.iter_mut().zip(ochunk.iter_mut()) {
            *xn = (*xn - mean[ch]) * inv_std[ch];
            *o = g[ch] * *xn + b[ch];
        }
    }

    if let Some(rs) = running {
        let unbias = m / (m - T::one());
        for ch in 0..c {
            rs.mean[ch] = (T::one() - momentum) * rs.mean[ch] + momentum * mean[ch];
            rs.var[ch] = (T::one() - momentum) * rs.var[ch] + momentum * var[ch] * unbias;
        }
    }
    Ok((out, BatchNormCache { normalized, inv_std }))
}

pub fn batchnorm_eval<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running: &RunningStats<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let (_, c, inner) = channel_layout(x.shape(), "batchnorm")?;
    check_bn_params(c, gamma, beta)?;
    if running.mean.len() != c || running.var.len() != c {
        return Err(Error::shape("batchnorm", "running statistics do not match channels"));
    }
    let mut out = x.clone();
    let (g, b) = (gamma.data(), beta.data());
    for (i, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
        let ch = i % c;
        let inv = T::one() / (running.var[ch] + eps).sqrt();
        for v in chunk {
            *v = g[ch] * ((*v - running.mean[ch]) * inv) + b[ch];
        }
    }
    Ok(out)
}

/// Returns `(d x, d gamma, d beta)`.
pub fn batchnorm_backward<T: Scalar>(
    cache: &BatchNormCache<T>,
    gamma: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let shape = grad_out.shape();
    let (n, c) = (shape[0], shape[1]);
    let inner: usize = shape[2..].iter().product();
    let m = T::lit((n * inner) as f64);
    let xhat = cache.normalized.data();
    let dy = grad_out.data();
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for (i, (xc, gc)) in xhat.chunks(inner).zip(dy.chunks(inner)).enumerate() {
        let ch = i % c;
        for (&xv, &gv) in xc.iter().zip(gc) {
            dgamma[ch] += gv * xv;
            dbeta[ch] += gv;
        }
    }
    let g = gamma.data();
    let mut dx = vec![T::zero(); dy.len()];
    for (i, ((dxc, xc), gc)) in dx
        .chunks_mut(inner)
        .zip(xhat.chunks(inner))
        .zip(dy.chunks(inner))
        .enumerate()
    {
        let ch = i % c;
        // sum(dxhat) = gamma * dbeta, sum(dxhat * xhat) = gamma * dgamma
        let scale = g[ch] * cache.inv_std[ch] / m;
        for ((d, &xv), &gv) in dxc.iter_mut().zip(xc).zip(gc) {
            *d = scale * (m * gv - dbeta[ch] - xv * dgamma[ch]);
        }
    }
    (
        Tensor::from_vec(shape, dx).expect("bn input grad shape"),
        Tensor::from_vec(&[c], dgamma).expect("bn gamma grad shape"),
        Tensor::from_vec(&[c], dbeta).expect("bn beta grad shape"),
    )
}

/// Mean softmax cross-entropy over the batch. Returns the loss and the
/// softmax probabilities.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(T, Tensor<T>)> {
    let (n, k) = logits.as_matrix_dims("softmax_cross_entropy")?;
    if labels.len() != n {
        return Err(Error::shape(
            "softmax_cross_entropy",
            format!("{n} rows of logits but {} labels", labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    let mut probs = logits.clone();
    let mut total = T::zero();
    for (row, &label) in probs.data_mut().chunks_mut(k).zip(labels) {
        let mut top = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[top] {
                top = j;
            }
        }
        let max = row[top];
        let label_shifted = row[label] - max;
        // log-sum-exp = max + ln(1 + sum over the non-max entries)
        let mut rest = T::zero();
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v - max).exp();
            if j != top {
                rest += *v;
            }
        }
        total += rest.ln_1p() - label_shifted;
        let z = T::one() + rest;
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    let loss = total / T::lit(n as f64);
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("cross-entropy loss is {loss}")));
    }
    Ok((loss, probs))
}

pub fn softmax_cross_entropy_backward<T: Scalar>(
    probs: &Tensor<T>,
    labels: &[usize],
    grad_loss: T,
) -> Tensor<T> {
    let k = probs.shape()[1];
    let scale = grad_loss / T::lit(labels.len() as f64);
    let mut d = probs.clone();
    for (row, &label) in d.data_mut().chunks_mut(k).zip(labels) {
        row[label] -= T::one();
        for v in row.iter_mut() {
            *v *= scale;
        }
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn matmul_identity_and_annihilation() {
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let m = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(matmul(&eye, &m).unwrap(), m);
        let out = matmul(&t(&[1, 2], &[1.0, 0.0]), &t(&[2, 1], &[0.0, 5.0])).unwrap();
        assert_eq!(out.data(), &[0.0]);
    }

    #[test]
    fn matmul_shape_mismatch_is_described() {
        let err = matmul(&Tensor::<f64>::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        assert!(err.to_string().contains("2x3 times 2x3"), "{err}");
    }

    #[test]
    fn conv_all_ones_and_zero_kernel() {
        let x = Tensor::<f64>::full(&[1, 1, 3, 3], 1.0);
        let k = Tensor::full(&[1, 1, 3, 3], 1.0);
        assert_eq!(conv2d(&x, &k, 1, 0).unwrap().data(), &[9.0]);

        let x = t(&[1, 2, 4, 4], &(0..32).map(|v| v as f64 - 7.0).collect::<Vec<_>>());
        let out = conv2d(&x, &Tensor::zeros(&[3, 2, 3, 3]), 1, 1).unwrap();
        assert_eq!(out.shape(), &[1, 3, 4, 4]);
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_is_cross_correlation() {
        // 1x1x2x2 input, 1x1x2x2 kernel: no flip means elementwise dot.
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let k = t(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(conv2d(&x, &k, 1, 0).unwrap().data(), &[1.0]);
    }

    #[test]
    fn conv_rejects_non_integral_extent() {
        let x = Tensor::<f64>::zeros(&[1, 1, 6, 6]);
        let k = Tensor::zeros(&[1, 1, 3, 3]);
        assert!(conv2d(&x, &k, 2, 0).is_err());
        assert!(conv2d(&x, &k, 3, 0).is_ok());
    }

    #[test]
    fn relu_examples() {
        assert_eq!(relu(&t(&[3], &[-1.0, 0.0, 2.0])).data(), &[0.0, 0.0, 2.0]);
        assert!(leaky_relu(&t(&[1], &[1.0]), 1.0).is_err());
    }

    #[test]
    fn maxpool_picks_block_max_and_truncates() {
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let (out, idx) = maxpool2d(&x, 2, 2).unwrap();
        assert_eq!(out.data(), &[4.0]);
        assert_eq!(idx, vec![3]);
        let x = Tensor::<f64>::zeros(&[1, 1, 5, 5]);
        assert_eq!(maxpool2d(&x, 2, 2).unwrap().0.shape(), &[1, 1, 2, 2]);
    }

    #[test]
    fn batchnorm_constant_channel_is_zero() {
        let x = Tensor::<f64>::full(&[4, 2], 3.0);
        let gamma = Tensor::full(&[2], 1.0);
        let beta = Tensor::zeros(&[2]);
        let (y, _) = batchnorm_train(&x, &gamma, &beta, None, 0.1, 1e-5).unwrap();
        assert!(y.data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn batchnorm_train_requires_two_samples() {
        let x = Tensor::<f64>::zeros(&[1, 3]);
        let g = Tensor::full(&[3], 1.0);
        let b = Tensor::zeros(&[3]);
        assert!(batchnorm_train(&x, &g, &b, None, 0.1, 1e-5).is_err());
    }

    #[test]
    fn batchnorm_eval_formula() {
        let eps = 1e-5;
        let x = t(&[1, 1], &[1.0]);
        let rs = RunningStats::new(1);
        let y = batchnorm_eval(&x, &t(&[1], &[2.0]), &t(&[1], &[1.0]), &rs, eps).unwrap();
        let expected = 2.0 * (1.0 / (1.0 + eps).sqrt()) + 1.0;
        assert!((y.data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn batchnorm_running_stats_use_momentum() {
        let x = t(&[2, 1], &[1.0, 3.0]);
        let mut rs = RunningStats::new(1);
        batchnorm_train(&x, &t(&[1], &[1.0]), &t(&[1], &[0.0]), Some(&mut rs), 0.1, 1e-5).unwrap();
        assert!((rs.mean[0] - 0.2).abs() < 1e-15);
        // unbiased batch variance of {1, 3} is 2
        assert!((rs.var[0] - (0.9 + 0.2)).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_ln_k() {
        let logits = Tensor::<f64>::zeros(&[3, 10]);
        let (loss, _) = softmax_cross_entropy(&logits, &[0, 4, 9]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_vanishes_with_margin() {
        let mut prev = f64::INFINITY;
        for margin in [1.0, 10.0, 100.0] {
            let logits = t(&[1, 3], &[0.0, margin, 0.0]);
            let (loss, _) = softmax_cross_entropy(&logits, &[1]).unwrap();
            assert!(loss > 0.0 && loss < prev);
            prev = loss;
        }
        let (loss, _) = softmax_cross_entropy(&t(&[1, 3], &[0.0, 1000.0, 0.0]), &[1]).unwrap();
        assert!(loss < 1e-300);
    }

    #[test]
    fn cross_entropy_rejects_bad_label() {
        let logits = Tensor::<f64>::zeros(&[1, 3]);
        assert!(softmax_cross_entropy(&logits, &[3]).is_err());
    }
}
