//! Dense row-major tensors and the numeric kernels behind every op.
//!
//! Kernels here are plain functions over [`Tensor`]; the autodiff tape in
//! [`crate::autodiff`] records calls to them and supplies the matching
//! backward passes.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::Rng;

use crate::error::{Error, Result};

/// Scalar type a tensor can hold. Training runs in `f32`; `f64` exists so
/// finite-difference oracles are not dominated by rounding noise.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Send + Sync + Sum + 'static
{
    /// `c = a * b (+ c if accumulate)` for an `m x k` by `k x n` product with
    /// arbitrary row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        c: &mut [Self],
        accumulate: bool,
    );

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("f64 is representable")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("real converts to f64")
    }
}

fn check_extent(len: usize, rows: usize, cols: usize, (rs, cs): (isize, isize)) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows as isize - 1) * rs + (cols as isize - 1) * cs;
    assert!(rs >= 0 && cs >= 0 && (last as usize) < len, "gemm operand out of bounds");
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_strides: (isize, isize),
                b: &[Self],
                b_strides: (isize, isize),
                c: &mut [Self],
                accumulate: bool,
            ) {
                check_extent(a.len(), m, k, a_strides);
                check_extent(b.len(), k, n, b_strides);
                assert!(c.len() >= m * n, "gemm output too small");
                if m == 0 || n == 0 {
                    return;
                }
                let beta = if accumulate { 1.0 } else { 0.0 };
                if k == 0 {
                    if !accumulate {
                        c[..m * n].iter_mut().for_each(|v| *v = 0.0);
                    }
                    return;
                }
                // SAFETY: operand extents were checked above against the
                // slice lengths and strides; `c` is contiguous row-major.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        a_strides.0,
                        a_strides.1,
                        b.as_ptr(),
                        b_strides.0,
                        b_strides.1,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Dense n-dimensional array, row-major. A shape of `[]` is a scalar.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::invalid(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                numel(&shape),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: (0..numel(shape)).map(&mut f).collect(),
        }
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], low: f64, high: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| T::from_f64_lossy(rng.random_range(low..high)))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
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
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on a tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(Error::invalid(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        same_shape(self, other, "zip_map")?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn norm(&self) -> T {
        self.data.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs().to_f64_lossy())
            .fold(0.0, f64::max)
    }

    /// Element type conversion (for example `f32 -> f64` in gradient checks).
    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&v| U::from_f64_lossy(v.to_f64_lossy()))
                .collect(),
        }
    }

    /// Row `i` of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[T] {
        assert_eq!(self.ndim(), 2);
        let cols = self.shape[1];
        &self.data[i * cols..(i + 1) * cols]
    }

    /// Sub-tensor `i` along the leading axis.
    pub fn index_axis0(&self, i: usize) -> Tensor<T> {
        let inner = numel(&self.shape[1..]);
        Tensor {
            shape: self.shape[1..].to_vec(),
            data: self.data[i * inner..(i + 1) * inner].to_vec(),
        }
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let first = items
            .first()
            .ok_or_else(|| Error::invalid("stack of zero tensors"))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::invalid(format!(
                    "stack: shape {:?} differs from {:?}",
                    t.shape, first.shape
                )));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor { shape, data })
    }
}

pub(crate) fn same_shape<T>(a: &Tensor<T>, b: &Tensor<T>, op: &str) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::invalid(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape, b.shape
        )));
    }
    Ok(())
}

fn expect_ndim<T>(t: &Tensor<T>, ndim: usize, op: &str) -> Result<()> {
    if t.shape.len() != ndim {
        return Err(Error::invalid(format!(
            "{op}: expected a {ndim}-d tensor, got shape {:?}",
            t.shape
        )));
    }
    Ok(())
}

/// `[m,k] x [k,n]`, with either operand optionally transposed.
pub fn matmul_t<T: Real>(a: &Tensor<T>, trans_a: bool, b: &Tensor<T>, trans_b: bool) -> Result<Tensor<T>> {
    expect_ndim(a, 2, "matmul")?;
    expect_ndim(b, 2, "matmul")?;
    let (m, ka) = if trans_a { (a.shape[1], a.shape[0]) } else { (a.shape[0], a.shape[1]) };
    let (kb, n) = if trans_b { (b.shape[1], b.shape[0]) } else { (b.shape[0], b.shape[1]) };
    if ka != kb {
        return Err(Error::invalid(format!(
            "matmul: inner dimensions {ka} and {kb} differ (shapes {:?}, {:?})",
            a.shape, b.shape
        )));
    }
    let a_strides = if trans_a { (1, a.shape[1] as isize) } else { (a.shape[1] as isize, 1) };
    let b_strides = if trans_b { (1, b.shape[1] as isize) } else { (b.shape[1] as isize, 1) };
    let mut out = vec![T::zero(); m * n];
    T::gemm(m, ka, n, &a.data, a_strides, &b.data, b_strides, &mut out, false);
    Tensor::new(vec![m, n], out)
}

pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    matmul_t(a, false, b, false)
}

pub fn transpose<T: Real>(a: &Tensor<T>) -> Result<Tensor<T>> {
    expect_ndim(a, 2, "transpose")?;
    let (r, c) = (a.shape[0], a.shape[1]);
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a.data[i * c + j];
        }
    }
    Tensor::new(vec![c, r], out)
}

/// Geometry of one 2-D convolution call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, padding: usize) -> Result<Self> {
        if input.len() != 4 || kernel.len() != 4 {
            return Err(Error::invalid(format!(
                "conv2d expects 4-d input and kernel, got {input:?} and {kernel:?}"
            )));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be positive"));
        }
        let (batch, in_channels, height, width) = (input[0], input[1], input[2], input[3]);
        let (out_channels, kc, kernel_h, kernel_w) = (kernel[0], kernel[1], kernel[2], kernel[3]);
        if kc != in_channels {
            return Err(Error::invalid(format!(
                "conv2d: kernel expects {kc} input channels, input has {in_channels}"
            )));
        }
        if kernel_h > height + 2 * padding || kernel_w > width + 2 * padding || kernel_h == 0 || kernel_w == 0 {
            return Err(Error::invalid(format!(
                "conv2d: kernel {kernel_h}x{kernel_w} does not fit padded input {height}x{width} (padding {padding})"
            )));
        }
        Ok(ConvGeometry {
            batch,
            in_channels,
            height,
            width,
            out_channels,
            kernel_h,
            kernel_w,
            stride,
            padding,
            out_h: (height + 2 * padding - kernel_h) / stride + 1,
            out_w: (width + 2 * padding - kernel_w) / stride + 1,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.padding == 0
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel_h * self.kernel_w
    }

    fn out_spatial(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfolds the whole batch into a `[C_in*kH*kW, N*H'*W']` column matrix.
fn im2col<T: Real>(input: &[T], g: &ConvGeometry) -> Vec<T> {
    let spatial = g.out_spatial();
    let cols = g.batch * spatial;
    let mut col = vec![T::zero(); g.patch_len() * cols];
    let pad = g.padding as isize;
    for n in 0..g.batch {
        for c in 0..g.in_channels {
            let plane = &input[(n * g.in_channels + c) * g.height * g.width..][..g.height * g.width];
            for ki in 0..g.kernel_h {
                for kj in 0..g.kernel_w {
                    let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                    let dst = &mut col[row * cols + n * spatial..][..spatial];
                    for oy in 0..g.out_h {
                        let y = (oy * g.stride + ki) as isize - pad;
                        if y < 0 || y >= g.height as isize {
                            continue;
                        }
                        let src_row = &plane[y as usize * g.width..][..g.width];
                        for ox in 0..g.out_w {
                            let x = (ox * g.stride + kj) as isize - pad;
                            if x >= 0 && x < g.width as isize {
                                dst[oy * g.out_w + ox] = src_row[x as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im<T: Real>(col: &[T], g: &ConvGeometry) -> Vec<T> {
    let spatial = g.out_spatial();
    let cols = g.batch * spatial;
    let mut out = vec![T::zero(); g.batch * g.in_channels * g.height * g.width];
    let pad = g.padding as isize;
    for n in 0..g.batch {
        for c in 0..g.in_channels {
            let plane = &mut out[(n * g.in_channels + c) * g.height * g.width..][..g.height * g.width];
            for ki in 0..g.kernel_h {
                for kj in 0..g.kernel_w {
                    let row = (c * g.kernel_h + ki) * g.kernel_w + kj;
                    let src = &col[row * cols + n * spatial..][..spatial];
                    for oy in 0..g.out_h {
                        let y = (oy * g.stride + ki) as isize - pad;
                        if y < 0 || y >= g.height as isize {
                            continue;
                        }
                        for ox in 0..g.out_w {
                            let x = (ox * g.stride + kj) as isize - pad;
                            if x >= 0 && x < g.width as isize {
                                let v = &mut plane[y as usize * g.width + x as usize];
                                *v = *v + src[oy * g.out_w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// `[N, C, S]` <-> `[C, N*S]` layout shuffles.
fn batch_major_to_channel_major<T: Real>(data: &[T], batch: usize, channels: usize, spatial: usize) -> Vec<T> {
    let mut out = vec![T::zero(); data.len()];
    for n in 0..batch {
        for c in 0..channels {
            out[(c * batch + n) * spatial..][..spatial]
                .copy_from_slice(&data[(n * channels + c) * spatial..][..spatial]);
        }
    }
    out
}

fn channel_major_to_batch_major<T: Real>(data: &[T], batch: usize, channels: usize, spatial: usize) -> Vec<T> {
    let mut out = vec![T::zero(); data.len()];
    for n in 0..batch {
        for c in 0..channels {
            out[(n * channels + c) * spatial..][..spatial]
                .copy_from_slice(&data[(c * batch + n) * spatial..][..spatial]);
        }
    }
    out
}

/// Cross-correlation of `[N,C_in,H,W]` with `[C_out,C_in,kH,kW]`.
pub fn conv2d<T: Real>(input: &Tensor<T>, kernel: &Tensor<T>, stride: usize, padding: usize) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(&input.shape, &kernel.shape, stride, padding)?;
    Ok(conv2d_with(input, kernel, &g))
}

pub(crate) fn conv2d_with<T: Real>(input: &Tensor<T>, kernel: &Tensor<T>, g: &ConvGeometry) -> Tensor<T> {
    let spatial = g.out_spatial();
    let cols = g.batch * spatial;
    let col_owned;
    let col: &[T] = if g.is_pointwise() {
        col_owned = batch_major_to_channel_major(&input.data, g.batch, g.in_channels, spatial);
        &col_owned
    } else {
        col_owned = im2col(&input.data, g);
        &col_owned
    };
    let k = g.patch_len();
    let mut out = vec![T::zero(); g.out_channels * cols];
    T::gemm(g.out_channels, k, cols, &kernel.data, (k as isize, 1), col, (cols as isize, 1), &mut out, false);
    let data = channel_major_to_batch_major(&out, g.batch, g.out_channels, spatial);
    Tensor {
        shape: vec![g.batch, g.out_channels, g.out_h, g.out_w],
        data,
    }
}

/// Returns `(d input, d kernel)`; either can be skipped.
pub(crate) fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grad_out: &Tensor<T>,
    g: &ConvGeometry,
    need_input: bool,
    need_kernel: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let spatial = g.out_spatial();
    let cols = g.batch * spatial;
    let k = g.patch_len();
    let dy = batch_major_to_channel_major(&grad_out.data, g.batch, g.out_channels, spatial);
    let grad_kernel = need_kernel.then(|| {
        let col = if g.is_pointwise() {
            batch_major_to_channel_major(&input.data, g.batch, g.in_channels, spatial)
        } else {
            im2col(&input.data, g)
        };
        let mut dk = vec![T::zero(); g.out_channels * k];
        // dK = dY [Cout, cols] * col^T [cols, k]
        T::gemm(g.out_channels, cols, k, &dy, (cols as isize, 1), &col, (1, cols as isize), &mut dk, false);
        Tensor {
            shape: kernel.shape.clone(),
            data: dk,
        }
    });
    let grad_input = need_input.then(|| {
        let mut dcol = vec![T::zero(); k * cols];
        // dcol = K^T [k, Cout] * dY [Cout, cols]
        T::gemm(k, g.out_channels, cols, &kernel.data, (1, k as isize), &dy, (cols as isize, 1), &mut dcol, false);
        let data = if g.is_pointwise() {
            channel_major_to_batch_major(&dcol, g.batch, g.in_channels, spatial)
        } else {
            col2im(&dcol, g)
        };
        Tensor {
            shape: input.shape.clone(),
            data,
        }
    });
    (grad_input, grad_kernel)
}

/// Non-overlapping `size x size` max pooling (floor on ragged edges).
/// Returns the pooled tensor and the flat argmax index of each output.
pub fn max_pool2d<T: Real>(input: &Tensor<T>, size: usize) -> Result<(Tensor<T>, Vec<usize>)> {
    expect_ndim(input, 4, "max_pool2d")?;
    let (n, c, h, w) = (input.shape[0], input.shape[1], input.shape[2], input.shape[3]);
    if size == 0 || h < size || w < size {
        return Err(Error::invalid(format!(
            "max_pool2d: window {size} does not fit {h}x{w}"
        )));
    }
    let (oh, ow) = (h / size, w / size);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * size * w + ox * size;
                for dy in 0..size {
                    for dx in 0..size {
                        let idx = base + (oy * size + dy) * w + ox * size + dx;
                        if input.data[idx] > input.data[best] {
                            best = idx;
                        }
                    }
                }
                out.push(input.data[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, oh, ow], out)?, arg))
}

/// `[N,C,H,W] -> [N,C]` spatial mean.
pub fn global_avg_pool<T: Real>(input: &Tensor<T>) -> Result<Tensor<T>> {
    expect_ndim(input, 4, "global_avg_pool")?;
    let (n, c, h, w) = (input.shape[0], input.shape[1], input.shape[2], input.shape[3]);
    if h == 0 || w == 0 {
        return Err(Error::invalid("global_avg_pool on an empty spatial map"));
    }
    let spatial = h * w;
    let scale = T::one() / T::from_usize(spatial).unwrap();
    let data = input
        .data
        .chunks_exact(spatial)
        .map(|plane| plane.iter().copied().sum::<T>() * scale)
        .collect();
    Tensor::new(vec![n, c], data)
}

/// Normalizes each trailing-axis slice to unit length; slices with norm
/// `<= epsilon` are divided by `epsilon` instead.
pub fn l2_normalize<T: Real>(v: &Tensor<T>, epsilon: T) -> Tensor<T> {
    let d = *v.shape.last().unwrap_or(&1);
    let mut out = v.clone();
    if d == 0 {
        return out;
    }
    for row in out.data.chunks_exact_mut(d) {
        let norm = row.iter().map(|&x| x * x).sum::<T>().sqrt();
        let denom = if norm > epsilon { norm } else { epsilon };
        row.iter_mut().for_each(|x| *x = *x / denom);
    }
    out
}

pub fn relu<T: Real>(v: &Tensor<T>) -> Tensor<T> {
    v.map(|x| if x > T::zero() { x } else { T::zero() })
}

pub fn sigmoid_scalar<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Real>(v: &Tensor<T>) -> Tensor<T> {
    v.map(sigmoid_scalar)
}

/// Row-wise softmax of a `[B,N]` tensor.
pub fn softmax_rows<T: Real>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    expect_ndim(logits, 2, "softmax")?;
    let n = logits.shape[1];
    let mut out = logits.clone();
    if n == 0 {
        return Ok(out);
    }
    for row in out.data.chunks_exact_mut(n) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            total = total + *x;
        }
        row.iter_mut().for_each(|x| *x = *x / total);
    }
    Ok(out)
}

/// Mean softmax cross-entropy over the batch, with the softmax probabilities.
pub fn softmax_cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    expect_ndim(logits, 2, "softmax_cross_entropy")?;
    let (b, n) = (logits.shape[0], logits.shape[1]);
    if labels.len() != b || b == 0 {
        return Err(Error::invalid(format!(
            "softmax_cross_entropy: {} labels for a batch of {b}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
        return Err(Error::invalid(format!("label {bad} out of range for {n} classes")));
    }
    let probs = softmax_rows(logits)?;
    let mut loss = T::zero();
    for (i, &label) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
        loss = loss + (lse - row[label]);
    }
    Ok((loss / T::from_usize(b).unwrap(), probs))
}

/// Bilinear resize of a `[C,H,W]` image with corner-aligned sampling:
/// output pixel `i` samples input coordinate `i*(H-1)/(H'-1)`.
pub fn resize_bilinear<T: Real>(image: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    expect_ndim(image, 3, "resize_bilinear")?;
    let (c, h, w) = (image.shape[0], image.shape[1], image.shape[2]);
    if h == 0 || w == 0 || out_h == 0 || out_w == 0 {
        return Err(Error::invalid("resize_bilinear on an empty extent"));
    }
    let coord = |i: usize, src: usize, dst: usize| -> (usize, usize, f64) {
        if dst == 1 || src == 1 {
            return (0, 0, 0.0);
        }
        let pos = i as f64 * (src - 1) as f64 / (dst - 1) as f64;
        let lo = (pos.floor() as usize).min(src - 1);
        let hi = (lo + 1).min(src - 1);
        (lo, hi, pos - lo as f64)
    };
    let ys: Vec<_> = (0..out_h).map(|i| coord(i, h, out_h)).collect();
    let xs: Vec<_> = (0..out_w).map(|j| coord(j, w, out_w)).collect();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &image.data[ch * h * w..][..h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let p = |y: usize, x: usize| plane[y * w + x].to_f64_lossy();
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                out.push(T::from_f64_lossy(top * (1.0 - fy) + bottom * fy));
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}

/// Crops rows `y0..y1` and columns `x0..x1` of a `[C,H,W]` image.
pub fn crop<T: Real>(image: &Tensor<T>, y0: usize, y1: usize, x0: usize, x1: usize) -> Result<Tensor<T>> {
    expect_ndim(image, 3, "crop")?;
    let (c, h, w) = (image.shape[0], image.shape[1], image.shape[2]);
    if y0 >= y1 || x0 >= x1 || y1 > h || x1 > w {
        return Err(Error::invalid(format!(
            "crop [{y0},{y1})x[{x0},{x1}) outside {h}x{w}"
        )));
    }
    let mut out = Vec::with_capacity(c * (y1 - y0) * (x1 - x0));
    for ch in 0..c {
        for y in y0..y1 {
            let start = (ch * h + y) * w;
            out.extend_from_slice(&image.data[start + x0..start + x1]);
        }
    }
    Tensor::new(vec![c, y1 - y0, x1 - x0], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_conv(input: &Tensor<f64>, kernel: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let [n, ci, h, w] = input.shape()[..] else { unreachable!() };
        let [co, _, kh, kw] = kernel.shape()[..] else { unreachable!() };
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let mut out = Tensor::zeros(&[n, co, oh, ow]);
        for b in 0..n {
            for o in 0..co {
                for y in 0..oh {
                    for x in 0..ow {
                        let mut acc = 0.0;
                        for c in 0..ci {
                            for i in 0..kh {
                                for j in 0..kw {
                                    let iy = (y * stride + i) as isize - pad as isize;
                                    let ix = (x * stride + j) as isize - pad as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        acc += input.data()[((b * ci + c) * h + iy as usize) * w + ix as usize]
                                            * kernel.data()[((o * ci + c) * kh + i) * kw + j];
                                    }
                                }
                            }
                        }
                        out.data_mut()[((b * co + o) * oh + y) * ow + x] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_identity_kernel() {
        let x = Tensor::<f32>::full(&[1, 1, 3, 3], 1.0);
        let k = Tensor::<f32>::full(&[1, 1, 1, 1], 1.0);
        assert_eq!(conv2d(&x, &k, 1, 0).unwrap(), x);
    }

    #[test]
    fn conv_per_location_dot() {
        let x = Tensor::<f32>::new(vec![1, 2, 2, 2], vec![1., 2., 3., 4., 1., 1., 1., 1.]).unwrap();
        let k = Tensor::<f32>::new(vec![1, 2, 1, 1], vec![1., -1.]).unwrap();
        let y = conv2d(&x, &k, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[0., 1., 2., 3.]);
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(stride, pad) in &[(1, 1), (2, 1), (1, 0), (2, 0)] {
            let x = Tensor::<f64>::uniform(&[2, 3, 5, 5], -1.0, 1.0, &mut rng);
            let k = Tensor::<f64>::uniform(&[4, 3, 3, 3], -1.0, 1.0, &mut rng);
            let fast = conv2d(&x.cast::<f32>(), &k.cast::<f32>(), stride, pad).unwrap();
            let slow = naive_conv(&x, &k, stride, pad);
            assert!(fast.cast::<f64>().max_abs_diff(&slow) < 1e-5, "stride {stride} pad {pad}");
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::<f32>::zeros(&[1, 2, 4, 4]);
        let k = Tensor::<f32>::zeros(&[1, 3, 1, 1]);
        assert!(matches!(conv2d(&x, &k, 1, 0), Err(Error::InvalidArgument(_))));
        let big = Tensor::<f32>::zeros(&[1, 2, 5, 5]);
        assert!(conv2d(&x, &big, 1, 0).is_err());
    }

    #[test]
    fn gap_examples() {
        let x = Tensor::<f32>::full(&[1, 1, 4, 4], 7.0);
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[7.0]);
        let x = Tensor::<f32>::new(vec![1, 1, 2, 2], vec![1., 2., 3., 4.]).unwrap();
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[2.5]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::<f32>::uniform(&[3, 8, 5, 5], -2.0, 2.0, &mut rng);
        let g = global_avg_pool(&x).unwrap();
        for (i, plane) in x.data().chunks(25).enumerate() {
            let explicit = plane.iter().map(|&v| v as f64).sum::<f64>() / 25.0;
            assert!((g.data()[i] as f64 - explicit).abs() < 1e-6);
        }
    }

    #[test]
    fn l2_normalize_examples() {
        let v = Tensor::<f32>::new(vec![2], vec![3.0, 4.0]).unwrap();
        let n = l2_normalize(&v, 1e-12);
        assert!((n.data()[0] - 0.6).abs() < 1e-7 && (n.data()[1] - 0.8).abs() < 1e-7);
        let e2 = Tensor::<f32>::from_fn(&[5], |i| if i == 2 { 1.0 } else { 0.0 });
        assert_eq!(l2_normalize(&e2, 1e-12), e2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let r = Tensor::<f32>::uniform(&[64], -1.0, 1.0, &mut rng);
        assert!((l2_normalize(&r, 1e-12).norm() - 1.0).abs() < 1e-6);
        let z = Tensor::<f32>::zeros(&[4]);
        assert_eq!(l2_normalize(&z, 1e-12), z);
    }

    #[test]
    fn max_pool_picks_window_max() {
        let x = Tensor::<f32>::new(vec![1, 1, 2, 4], vec![1., 5., 2., 0., 3., 4., 9., 1.]).unwrap();
        let (y, arg) = max_pool2d(&x, 2).unwrap();
        assert_eq!(y.data(), &[5., 9.]);
        assert_eq!(arg, vec![1, 6]);
    }

    #[test]
    fn resize_identity_and_corners() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = Tensor::<f32>::uniform(&[2, 5, 7], 0.0, 1.0, &mut rng);
        let same = resize_bilinear(&img, 5, 7).unwrap();
        assert!(same.max_abs_diff(&img) < 1e-6);
        let up = resize_bilinear(&img, 9, 13).unwrap();
        assert_eq!(up.data()[0], img.data()[0]);
        assert!((up.data()[9 * 13 - 1] - img.data()[5 * 7 - 1]).abs() < 1e-6);
    }

    #[test]
    fn matmul_transposes_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Tensor::<f64>::uniform(&[3, 4], -1.0, 1.0, &mut rng);
        let b = Tensor::<f64>::uniform(&[4, 5], -1.0, 1.0, &mut rng);
        let ab = matmul(&a, &b).unwrap();
        let at = transpose(&a).unwrap();
        let bt = transpose(&b).unwrap();
        assert!(matmul_t(&at, true, &bt, true).unwrap().max_abs_diff(&ab) < 1e-12);
        let mut explicit = Tensor::<f64>::zeros(&[3, 5]);
        for i in 0..3 {
            for j in 0..5 {
                explicit.data_mut()[i * 5 + j] = (0..4).map(|k| a.data()[i * 4 + k] * b.data()[k * 5 + j]).sum();
            }
        }
        assert!(ab.max_abs_diff(&explicit) < 1e-12);
    }
}
