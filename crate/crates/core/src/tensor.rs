//! Dense row-major tensors and the handful of kernels every model is built
//! from. All 2-D activations use a `[time, channels]` layout.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-5;

/// Storage type tag shared by tensors and the weight container.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
    I8,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
            DType::I8 => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
            DType::I8 => "i8",
        }
    }
}

impl Display for DType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Floating-point element type. `f32` is the compute type; `f64` is the
/// high-precision twin used by equivalence oracles.
pub trait Element:
    Float + Default + Debug + Display + Sum + Send + Sync + 'static
{
    const DTYPE: DType;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c += a · b` for `a: [m, k]`, `b: [k, n]`, `c: [m, n]` given as
    /// (row stride, column stride) views into the slices.
    fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        a: (&[Self], isize, isize),
        b: (&[Self], isize, isize),
        c: (&mut [Self], isize, isize),
    );

    /// `c += a · bᵀ` with `a: [m, k]`, `b: [n, k]`, `c: [m, n]`, all row-major.
    fn gemm_nt(m: usize, k: usize, n: usize, a: &[Self], b: &[Self], c: &mut [Self]) {
        Self::gemm_strided(
            m,
            k,
            n,
            (a, k as isize, 1),
            (b, 1, k as isize),
            (c, n as isize, 1),
        );
    }

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

fn check_view(len: usize, rows: usize, cols: usize, rs: isize, cs: isize) {
    assert!(rs >= 0 && cs >= 0, "negative strides are not supported");
    let last = if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs as usize + (cols - 1) * cs as usize + 1
    };
    assert!(last <= len, "matrix view exceeds its slice ({last} > {len})");
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }

    fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        a: (&[f32], isize, isize),
        b: (&[f32], isize, isize),
        c: (&mut [f32], isize, isize),
    ) {
        if m == 0 || n == 0 {
            return;
        }
        check_view(a.0.len(), m, k, a.1, a.2);
        check_view(b.0.len(), k, n, b.1, b.2);
        check_view(c.0.len(), m, n, c.1, c.2);
        // SAFETY: every index reachable through the given shape and strides was
        // checked to lie inside its slice.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.0.as_ptr(),
                a.1,
                a.2,
                b.0.as_ptr(),
                b.1,
                b.2,
                1.0,
                c.0.as_mut_ptr(),
                c.1,
                c.2,
            );
        }
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().expect("4 bytes"))
    }
}

impl Element for f64 {
    const DTYPE: DType = DType::F64;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }

    fn gemm_strided(
        m: usize,
        k: usize,
        n: usize,
        a: (&[f64], isize, isize),
        b: (&[f64], isize, isize),
        c: (&mut [f64], isize, isize),
    ) {
        if m == 0 || n == 0 {
            return;
        }
        check_view(a.0.len(), m, k, a.1, a.2);
        check_view(b.0.len(), k, n, b.1, b.2);
        check_view(c.0.len(), m, n, c.1, c.2);
        // SAFETY: see the f32 implementation.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.0.as_ptr(),
                a.1,
                a.2,
                b.0.as_ptr(),
                b.1,
                b.2,
                1.0,
                c.0.as_mut_ptr(),
                c.1,
                c.2,
            );
        }
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<E = f32> {
    shape: Vec<usize>,
    data: Vec<E>,
}

impl<E: Element> Tensor<E> {
    pub fn new(shape: Vec<usize>, data: Vec<E>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::dim("tensor", format!("zero-sized dimension in {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim(
                "tensor",
                format!("shape {shape:?} needs {expected} elements, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, E::zero())
    }

    pub fn full(shape: &[usize], value: E) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> E) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    /// Builds a 2-D tensor from equal-length rows.
    pub fn from_rows(rows: &[Vec<E>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dim("tensor", "ragged rows"));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn vector(data: Vec<E>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(rows, cols)` of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::dim("dims2", format!("expected 2-D, got {:?}", self.shape))),
        }
    }

    pub fn row(&self, i: usize) -> &[E] {
        let cols = *self.shape.last().expect("non-empty shape");
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data)
    }

    pub fn cast<F: Element>(&self) -> Tensor<F> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| F::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest elementwise `|a - b|`, in f64. Shapes must agree.
    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::dim(
                "max_abs_diff",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max))
    }

    /// Slices rows `[start, end)` of the leading axis.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        let rows = self.shape[0];
        if start >= end || end > rows {
            return Err(Error::dim("slice_rows", format!("{start}..{end} of {rows}")));
        }
        let stride: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(Self {
            shape,
            data: self.data[start * stride..end * stride].to_vec(),
        })
    }
}

/// Elementwise activation applied inside a producing kernel's output loop.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Epilogue {
    #[default]
    None,
    Relu,
}

impl Epilogue {
    fn apply<E: Element>(self, data: &mut [E]) {
        if self == Epilogue::Relu {
            for v in data {
                *v = v.max(E::zero());
            }
        }
    }
}

/// Row-major `[cols, rows]` copy of a `[rows, cols]` matrix, in tiles.
fn transpose<E: Copy>(src: &[E], rows: usize, cols: usize) -> Vec<E> {
    const TILE: usize = 32;
    let mut out = src.to_vec();
    for r0 in (0..rows).step_by(TILE) {
        for c0 in (0..cols).step_by(TILE) {
            for r in r0..(r0 + TILE).min(rows) {
                for c in c0..(c0 + TILE).min(cols) {
                    out[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
    out
}

/// Fully connected layer. Fields are read-only so the `[in_dim, out_dim]`
/// copy used by the GEMM stays in sync with the weight.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearParams<E = f32> {
    /// `[out_dim, in_dim]`
    weight: Tensor<E>,
    /// `[out_dim]`
    bias: Tensor<E>,
    weight_t: Vec<E>,
}

impl<E: Element> LinearParams<E> {
    pub fn new(weight: Tensor<E>, bias: Tensor<E>) -> Result<Self> {
        let (out_dim, in_dim) = weight.dims2()?;
        if bias.shape() != [out_dim] {
            return Err(Error::dim(
                "linear params",
                format!("weight {:?} with bias {:?}", weight.shape(), bias.shape()),
            ));
        }
        let weight_t = transpose(weight.data(), out_dim, in_dim);
        Ok(Self { weight, bias, weight_t })
    }

    pub fn weight(&self) -> &Tensor<E> {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor<E> {
        &self.bias
    }

    pub fn into_parts(self) -> (Tensor<E>, Tensor<E>) {
        (self.weight, self.bias)
    }

    pub fn out_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn cast<F: Element>(&self) -> LinearParams<F> {
        LinearParams {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
            weight_t: self.weight_t.iter().map(|v| F::from_f64(v.as_f64())).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DepthwiseConvParams<E = f32> {
    /// `[channels, kernel_size]`
    pub weight: Tensor<E>,
    /// `[channels]`
    pub bias: Tensor<E>,
}

impl<E: Element> DepthwiseConvParams<E> {
    pub fn new(weight: Tensor<E>, bias: Tensor<E>) -> Result<Self> {
        let (channels, kernel) = weight.dims2()?;
        if kernel % 2 == 0 {
            return Err(Error::dim(
                "depthwise conv params",
                format!("kernel size {kernel} is even; symmetric padding needs an odd kernel"),
            ));
        }
        if bias.shape() != [channels] {
            return Err(Error::dim(
                "depthwise conv params",
                format!("weight {:?} with bias {:?}", weight.shape(), bias.shape()),
            ));
        }
        Ok(Self { weight, bias })
    }

    pub fn channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn kernel_size(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn cast<F: Element>(&self) -> DepthwiseConvParams<F> {
        DepthwiseConvParams {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
        }
    }
}

/// 2-D convolution over a `[height, width, in_channels]` map, used by the
/// ×4 subsampling front-end. Height is the time axis.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2dParams<E = f32> {
    /// `[out_channels, kernel_h, kernel_w, in_channels]`
    weight: Tensor<E>,
    /// `[out_channels]`
    bias: Tensor<E>,
    stride: usize,
    padding: usize,
    /// `[kernel_h * kernel_w * in_channels, out_channels]`
    weight_t: Vec<E>,
}

impl<E: Element> Conv2dParams<E> {
    pub fn new(weight: Tensor<E>, bias: Tensor<E>, stride: usize, padding: usize) -> Result<Self> {
        if weight.shape().len() != 4 || bias.shape() != [weight.shape()[0]] || stride == 0 {
            return Err(Error::dim(
                "conv2d params",
                format!("weight {:?} with bias {:?}", weight.shape(), bias.shape()),
            ));
        }
        let cout = weight.shape()[0];
        let weight_t = transpose(weight.data(), cout, weight.len() / cout);
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
            weight_t,
        })
    }

    pub fn weight(&self) -> &Tensor<E> {
        &self.weight
    }

    pub fn bias(&self) -> &Tensor<E> {
        &self.bias
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn padding(&self) -> usize {
        self.padding
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[3]
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.weight.shape()[1], self.weight.shape()[2])
    }

    pub fn output_len(&self, input: usize, kernel: usize) -> usize {
        (input + 2 * self.padding).saturating_sub(kernel) / self.stride + 1
    }

    pub fn cast<F: Element>(&self) -> Conv2dParams<F> {
        Conv2dParams {
            weight: self.weight.cast(),
            bias: self.bias.cast(),
            stride: self.stride,
            padding: self.padding,
            weight_t: self.weight_t.iter().map(|v| F::from_f64(v.as_f64())).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams<E = f32> {
    pub gamma: Tensor<E>,
    pub beta: Tensor<E>,
    pub eps: f64,
}

impl<E: Element> LayerNormParams<E> {
    pub fn new(gamma: Tensor<E>, beta: Tensor<E>, eps: f64) -> Result<Self> {
        if gamma.shape().len() != 1 || gamma.shape() != beta.shape() {
            return Err(Error::dim(
                "layer norm params",
                format!("gamma {:?} beta {:?}", gamma.shape(), beta.shape()),
            ));
        }
        if !(eps >= 0.0) {
            return Err(Error::InvalidArgument(format!("layer norm eps {eps} < 0")));
        }
        Ok(Self { gamma, beta, eps })
    }

    pub fn identity(dim: usize, eps: f64) -> Self {
        Self {
            gamma: Tensor::full(&[dim], E::one()),
            beta: Tensor::zeros(&[dim]),
            eps,
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.len()
    }

    pub fn cast<F: Element>(&self) -> LayerNormParams<F> {
        LayerNormParams {
            gamma: self.gamma.cast(),
            beta: self.beta.cast(),
            eps: self.eps,
        }
    }
}

/// Inference-mode BatchNorm: a fixed per-channel affine map.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams<E = f32> {
    pub gamma: Tensor<E>,
    pub beta: Tensor<E>,
    pub running_mean: Tensor<E>,
    pub running_var: Tensor<E>,
    pub eps: f64,
}

impl<E: Element> BatchNormParams<E> {
    pub fn new(
        gamma: Tensor<E>,
        beta: Tensor<E>,
        running_mean: Tensor<E>,
        running_var: Tensor<E>,
        eps: f64,
    ) -> Result<Self> {
        let shape = gamma.shape();
        if shape.len() != 1
            || beta.shape() != shape
            || running_mean.shape() != shape
            || running_var.shape() != shape
        {
            return Err(Error::dim(
                "batch norm params",
                format!(
                    "gamma {:?} beta {:?} mean {:?} var {:?}",
                    gamma.shape(),
                    beta.shape(),
                    running_mean.shape(),
                    running_var.shape()
                ),
            ));
        }
        if let Some(v) = running_var.data().iter().find(|v| !(**v >= E::zero())) {
            return Err(Error::InvalidArgument(format!(
                "batch norm running_var must be non-negative, found {v}"
            )));
        }
        if !(eps >= 0.0) {
            return Err(Error::InvalidArgument(format!("batch norm eps {eps} < 0")));
        }
        Ok(Self {
            gamma,
            beta,
            running_mean,
            running_var,
            eps,
        })
    }

    pub fn identity(channels: usize, eps: f64) -> Self {
        Self {
            gamma: Tensor::full(&[channels], E::one()),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], E::one()),
            eps,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Per-channel `(scale, shift)` with `bn(x) = scale * x + shift`,
    /// evaluated in double precision.
    pub fn affine(&self) -> (Vec<f64>, Vec<f64>) {
        let n = self.channels();
        let mut scale = Vec::with_capacity(n);
        let mut shift = Vec::with_capacity(n);
        for c in 0..n {
            let g = self.gamma.data()[c].as_f64();
            let inv = 1.0 / (self.running_var.data()[c].as_f64() + self.eps).sqrt();
            let s = g * inv;
            scale.push(s);
            shift.push(self.beta.data()[c].as_f64() - self.running_mean.data()[c].as_f64() * s);
        }
        (scale, shift)
    }

    pub fn cast<F: Element>(&self) -> BatchNormParams<F> {
        BatchNormParams {
            gamma: self.gamma.cast(),
            beta: self.beta.cast(),
            running_mean: self.running_mean.cast(),
            running_var: self.running_var.cast(),
            eps: self.eps,
        }
    }
}

pub fn linear_forward<E: Element>(x: &Tensor<E>, p: &LinearParams<E>) -> Result<Tensor<E>> {
    linear_forward_with(x, p, Epilogue::None)
}

/// `y = x Wᵀ + b`, with an optional activation clamp applied to the output
/// before it is returned.
pub fn linear_forward_with<E: Element>(
    x: &Tensor<E>,
    p: &LinearParams<E>,
    epilogue: Epilogue,
) -> Result<Tensor<E>> {
    let (rows, in_dim) = x.dims2()?;
    if in_dim != p.in_dim() {
        return Err(Error::dim(
            "linear_forward",
            format!("input {:?} vs weight {:?}", x.shape(), p.weight.shape()),
        ));
    }
    let out_dim = p.out_dim();
    let mut data = Vec::with_capacity(rows * out_dim);
    for _ in 0..rows {
        data.extend_from_slice(p.bias.data());
    }
    E::gemm_strided(
        rows,
        in_dim,
        out_dim,
        (x.data(), in_dim as isize, 1),
        (&p.weight_t, out_dim as isize, 1),
        (&mut data, out_dim as isize, 1),
    );
    epilogue.apply(&mut data);
    Ok(Tensor {
        shape: vec![rows, out_dim],
        data,
    })
}

pub fn depthwise_conv1d<E: Element>(
    x: &Tensor<E>,
    p: &DepthwiseConvParams<E>,
    causal: bool,
) -> Result<Tensor<E>> {
    depthwise_conv1d_with(x, p, causal, Epilogue::None)
}

/// Per-channel 1-D convolution over time. Output length equals input length:
/// symmetric zero padding, or `k - 1` frames of left padding when causal.
pub fn depthwise_conv1d_with<E: Element>(
    x: &Tensor<E>,
    p: &DepthwiseConvParams<E>,
    causal: bool,
    epilogue: Epilogue,
) -> Result<Tensor<E>> {
    let (frames, channels) = x.dims2()?;
    if channels != p.channels() {
        return Err(Error::dim(
            "depthwise_conv1d",
            format!("input {:?} vs weight {:?}", x.shape(), p.weight.shape()),
        ));
    }
    let k = p.kernel_size();
    if k % 2 == 0 {
        return Err(Error::dim("depthwise_conv1d", format!("even kernel size {k}")));
    }
    let pad_left = if causal { k - 1 } else { (k - 1) / 2 };

    // Tap-major copy of the kernel so the inner loop runs over contiguous channels.
    let w = p.weight.data();
    let mut taps = vec![E::zero(); k * channels];
    for c in 0..channels {
        for j in 0..k {
            taps[j * channels + c] = w[c * k + j];
        }
    }

    let mut data = Vec::with_capacity(frames * channels);
    for _ in 0..frames {
        data.extend_from_slice(p.bias.data());
    }
    let xs = x.data();
    for t in 0..frames {
        let out = &mut data[t * channels..(t + 1) * channels];
        for j in 0..k {
            let src = t + j;
            if src < pad_left || src - pad_left >= frames {
                continue;
            }
            let s = src - pad_left;
            let tap = &taps[j * channels..(j + 1) * channels];
            let inp = &xs[s * channels..(s + 1) * channels];
            for ((o, &wv), &xv) in out.iter_mut().zip(tap).zip(inp) {
                *o = *o + wv * xv;
            }
        }
    }
    epilogue.apply(&mut data);
    Ok(Tensor {
        shape: vec![frames, channels],
        data,
    })
}

/// Convolution over a `[height, width, in_channels]` feature map producing
/// `[height', width', out_channels]`, computed as im2col + GEMM in blocks of
/// output rows.
pub fn conv2d<E: Element>(
    x: &Tensor<E>,
    p: &Conv2dParams<E>,
    epilogue: Epilogue,
) -> Result<Tensor<E>> {
    let (height, width, cin) = match x.shape() {
        &[h, w, c] => (h, w, c),
        s => return Err(Error::dim("conv2d", format!("expected [H, W, C], got {s:?}"))),
    };
    if cin != p.in_channels() {
        return Err(Error::dim(
            "conv2d",
            format!("input {:?} vs weight {:?}", x.shape(), p.weight.shape()),
        ));
    }
    let (kh, kw) = p.kernel();
    if height + 2 * p.padding < kh || width + 2 * p.padding < kw {
        return Err(Error::dim("conv2d", format!("input {:?} smaller than kernel", x.shape())));
    }
    let out_h = p.output_len(height, kh);
    let out_w = p.output_len(width, kw);
    let cout = p.out_channels();
    let patch = kh * kw * cin;

    let mut out = Vec::with_capacity(out_h * out_w * cout);
    for _ in 0..out_h * out_w {
        out.extend_from_slice(p.bias.data());
    }

    const ROW_BLOCK: usize = 8;
    let xs = x.data();
    let mut cols = vec![E::zero(); ROW_BLOCK * out_w * patch];
    for h0 in (0..out_h).step_by(ROW_BLOCK) {
        let h1 = (h0 + ROW_BLOCK).min(out_h);
        let m = (h1 - h0) * out_w;
        let block = &mut cols[..m * patch];
        block.fill(E::zero());
        for oh in h0..h1 {
            for ow in 0..out_w {
                let row = &mut block[((oh - h0) * out_w + ow) * patch..][..patch];
                for i in 0..kh {
                    let ih = (oh * p.stride + i) as isize - p.padding as isize;
                    if ih < 0 || ih as usize >= height {
                        continue;
                    }
                    for j in 0..kw {
                        let iw = (ow * p.stride + j) as isize - p.padding as isize;
                        if iw < 0 || iw as usize >= width {
                            continue;
                        }
                        let src = (ih as usize * width + iw as usize) * cin;
                        row[(i * kw + j) * cin..][..cin].copy_from_slice(&xs[src..src + cin]);
                    }
                }
            }
        }
        let dst = &mut out[h0 * out_w * cout..h1 * out_w * cout];
        E::gemm_strided(
            m,
            patch,
            cout,
            (block, patch as isize, 1),
            (&p.weight_t, cout as isize, 1),
            (dst, cout as isize, 1),
        );
    }
    epilogue.apply(&mut out);
    Ok(Tensor {
        shape: vec![out_h, out_w, cout],
        data: out,
    })
}

/// Per-row normalization with population (divisor `d`) variance.
pub fn layer_norm<E: Element>(x: &Tensor<E>, p: &LayerNormParams<E>) -> Result<Tensor<E>> {
    let (rows, dim) = x.dims2()?;
    if dim != p.dim() {
        return Err(Error::dim(
            "layer_norm",
            format!("input {:?} vs gamma {:?}", x.shape(), p.gamma.shape()),
        ));
    }
    let n = E::from_f64(dim as f64);
    let eps = E::from_f64(p.eps);
    let (gamma, beta) = (p.gamma.data(), p.beta.data());
    let mut data = Vec::with_capacity(rows * dim);
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.iter().copied().sum::<E>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<E>() / n;
        let inv = (var + eps).sqrt().recip();
        data.extend(
            row.iter()
                .zip(gamma)
                .zip(beta)
                .map(|((&v, &g), &b)| g * (v - mean) * inv + b),
        );
    }
    Ok(Tensor {
        shape: vec![rows, dim],
        data,
    })
}

pub fn batch_norm_inference<E: Element>(
    x: &Tensor<E>,
    p: &BatchNormParams<E>,
) -> Result<Tensor<E>> {
    let (rows, channels) = x.dims2()?;
    if channels != p.channels() {
        return Err(Error::dim(
            "batch_norm_inference",
            format!("input {:?} vs channels {}", x.shape(), p.channels()),
        ));
    }
    let eps = E::from_f64(p.eps);
    let inv: Vec<E> = p
        .running_var
        .data()
        .iter()
        .map(|&v| (v + eps).sqrt().recip())
        .collect();
    let (gamma, beta, mean) = (p.gamma.data(), p.beta.data(), p.running_mean.data());
    let mut data = Vec::with_capacity(rows * channels);
    for r in 0..rows {
        data.extend(
            x.row(r)
                .iter()
                .enumerate()
                .map(|(c, &v)| gamma[c] * (v - mean[c]) * inv[c] + beta[c]),
        );
    }
    Ok(Tensor {
        shape: vec![rows, channels],
        data,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    Relu,
    Swish,
    Glu,
}

impl ActivationKind {
    /// Approximate arithmetic cost per output element.
    pub fn flops_per_element(self) -> u64 {
        match self {
            ActivationKind::Relu => 1,
            ActivationKind::Swish | ActivationKind::Glu => 4,
        }
    }
}

fn sigmoid<E: Element>(v: E) -> E {
    E::one() / (E::one() + (-v).exp())
}

pub fn activation<E: Element>(x: &Tensor<E>, kind: ActivationKind) -> Result<Tensor<E>> {
    match kind {
        ActivationKind::Relu => Ok(x.map(|v| v.max(E::zero()))),
        ActivationKind::Swish => Ok(x.map(|v| v * sigmoid(v))),
        ActivationKind::Glu => {
            let last = *x.shape().last().expect("non-empty shape");
            if last % 2 != 0 {
                return Err(Error::dim(
                    "glu",
                    format!("last dimension {last} of {:?} is odd", x.shape()),
                ));
            }
            let half = last / 2;
            let rows = x.len() / last;
            let mut data = Vec::with_capacity(rows * half);
            for r in 0..rows {
                let row = &x.data()[r * last..(r + 1) * last];
                let (a, b) = row.split_at(half);
                data.extend(a.iter().zip(b).map(|(&a, &b)| a * sigmoid(b)));
            }
            let mut shape = x.shape().to_vec();
            *shape.last_mut().expect("non-empty shape") = half;
            Ok(Tensor { shape, data })
        }
    }
}

/// Max-subtracted softmax in place. Returns `false` (and zeroes the row) when
/// every entry is `-inf`.
pub(crate) fn softmax_in_place<E: Element>(row: &mut [E]) -> bool {
    let max = row.iter().copied().fold(E::neg_infinity(), E::max);
    if max == E::neg_infinity() {
        row.fill(E::zero());
        return false;
    }
    let mut sum = E::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    let inv = sum.recip();
    for v in row.iter_mut() {
        *v = *v * inv;
    }
    true
}

#[derive(Clone, Debug, PartialEq)]
pub struct SoftmaxOutput<E = f32> {
    pub probs: Tensor<E>,
    /// Rows whose inputs were all `-inf`; they come back as all zeros.
    pub fully_masked_rows: Vec<usize>,
}

pub fn softmax_rows<E: Element>(x: &Tensor<E>) -> Result<SoftmaxOutput<E>> {
    let (rows, cols) = x.dims2()?;
    let mut probs = x.clone();
    let mut fully_masked_rows = Vec::new();
    for r in 0..rows {
        if !softmax_in_place(&mut probs.data[r * cols..(r + 1) * cols]) {
            fully_masked_rows.push(r);
        }
    }
    Ok(SoftmaxOutput {
        probs,
        fully_masked_rows,
    })
}
