//! Convolution, transposed convolution, batch normalization and the small
//! pointwise primitives, as plain forward/backward kernels.
//!
//! All spatial kernels take batched channel-last activations
//! `[n, d, h, w, c]`. Padding is SAME with zero fill and the TensorFlow
//! split (`pad_before = pad_total / 2`). Kernels are stored
//! `[k_d, k_h, k_w, c_in, c_out]` and applied as cross-correlation.
//! Planar (2D) networks use `d = 1` and `k_d = 1`.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::tensor::{gemm, Element, Tensor};

/// Upper bound on the element count of one im2col block.
const COLUMN_BUDGET: usize = 1 << 18;

/// Spatial dimensionality. Planar data is carried as `d = 1` volumes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Dims {
    #[serde(rename = "2d")]
    Two,
    #[default]
    #[serde(rename = "3d")]
    Three,
}

impl Dims {
    /// Full-size (3-wide) kernel extents.
    pub fn kernel3(self) -> [usize; 3] {
        match self {
            Dims::Two => [1, 3, 3],
            Dims::Three => [3, 3, 3],
        }
    }

    pub fn stride2(self) -> [usize; 3] {
        match self {
            Dims::Two => [1, 2, 2],
            Dims::Three => [2, 2, 2],
        }
    }

    /// Spatial axes (of `[d, h, w]`) that are resampled.
    pub fn sampled_axes(self) -> &'static [usize] {
        match self {
            Dims::Two => &[1, 2],
            Dims::Three => &[0, 1, 2],
        }
    }
}

pub const POINTWISE: [usize; 3] = [1, 1, 1];
pub const UNIT_STRIDE: [usize; 3] = [1, 1, 1];

/// Learnable convolution weights plus their static configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T = f32> {
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: [usize; 3],
}

impl<T: Element> ConvParams<T> {
    pub fn new(kernel: Tensor<T>, bias: Tensor<T>, stride: [usize; 3]) -> Result<Self> {
        let ks = kernel.shape();
        if ks.len() != 5 {
            return shape_err(format!("kernel must be [kd, kh, kw, cin, cout], got {ks:?}"));
        }
        if ks[..3].iter().any(|&k| k % 2 == 0) {
            return shape_err(format!("kernel extents must be odd, got {:?}", &ks[..3]));
        }
        if bias.shape() != [ks[4]] {
            return shape_err(format!("bias {:?} does not match c_out {}", bias.shape(), ks[4]));
        }
        if stride.iter().any(|&s| s != 1 && s != 2) {
            return shape_err(format!("stride must be 1 or 2 per axis, got {stride:?}"));
        }
        Ok(ConvParams { kernel, bias, stride })
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.shape()[3]
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[4]
    }

    pub fn extents(&self) -> [usize; 3] {
        let s = self.kernel.shape();
        [s[0], s[1], s[2]]
    }
}

/// Batch normalization parameters and running statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNormConfig {
    pub momentum: f64,
    pub epsilon: f64,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        BatchNormConfig { momentum: 0.997, epsilon: 1e-5 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormParams<T = f32> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub config: BatchNormConfig,
    /// False until the first training-mode update has been folded in.
    pub initialized: bool,
}

impl<T: Element> BatchNormParams<T> {
    pub fn new(channels: usize, config: BatchNormConfig) -> Self {
        BatchNormParams {
            gamma: Tensor::ones(&[channels]),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
            config,
            initialized: false,
        }
    }

    /// `running = momentum * running + (1 - momentum) * batch`.
    pub fn update_running(&mut self, batch_mean: &[f64], batch_var: &[f64]) {
        let m = self.config.momentum;
        for (r, &b) in self.running_mean.data_mut().iter_mut().zip(batch_mean) {
            *r = T::from_f64_lossy(m * r.as_f64() + (1.0 - m) * b);
        }
        for (r, &b) in self.running_var.data_mut().iter_mut().zip(batch_var) {
            *r = T::from_f64_lossy(m * r.as_f64() + (1.0 - m) * b);
        }
        self.initialized = true;
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    Train,
    Infer,
}

/// SAME-padded sampling geometry between a fine grid and a coarse grid.
/// For stride 1 both grids coincide.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub fine: [usize; 3],
    pub coarse: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad_before: [usize; 3],
}

impl ConvGeometry {
    pub fn forward(fine: [usize; 3], kernel: [usize; 3], stride: [usize; 3]) -> Self {
        let mut coarse = [0; 3];
        let mut pad_before = [0; 3];
        for a in 0..3 {
            coarse[a] = fine[a].div_ceil(stride[a]);
            let needed = (coarse[a] - 1) * stride[a] + kernel[a];
            let pad_total = needed.saturating_sub(fine[a]);
            pad_before[a] = pad_total / 2;
        }
        ConvGeometry { fine, coarse, kernel, stride, pad_before }
    }

    /// Geometry of a transposed convolution whose output grid is exactly
    /// `stride` times the input grid.
    pub fn transposed(coarse: [usize; 3], kernel: [usize; 3], stride: [usize; 3]) -> Self {
        let fine = [coarse[0] * stride[0], coarse[1] * stride[1], coarse[2] * stride[2]];
        let g = Self::forward(fine, kernel, stride);
        debug_assert_eq!(g.coarse, coarse);
        g
    }

    pub fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn fine_len(&self) -> usize {
        self.fine.iter().product()
    }

    pub fn coarse_len(&self) -> usize {
        self.coarse.iter().product()
    }

    /// Per-axis table: `table[a][o * k + t]` is the fine index touched by tap
    /// `t` of coarse position `o`, if inside the grid.
    fn tap_tables(&self) -> [Vec<Option<usize>>; 3] {
        std::array::from_fn(|a| {
            let k = self.kernel[a];
            let mut t = Vec::with_capacity(self.coarse[a] * k);
            for o in 0..self.coarse[a] {
                for tap in 0..k {
                    let i = (o * self.stride[a] + tap) as isize - self.pad_before[a] as isize;
                    t.push(if i >= 0 && (i as usize) < self.fine[a] { Some(i as usize) } else { None });
                }
            }
            t
        })
    }

    fn chunk_rows(&self, channels: usize) -> usize {
        (COLUMN_BUDGET / (self.taps() * channels).max(1)).max(1)
    }
}

/// im2col over coarse rows `[start, end)` of one sample.
fn gather<T: Element>(
    fine: &[T],
    g: &ConvGeometry,
    tables: &[Vec<Option<usize>>; 3],
    channels: usize,
    start: usize,
    end: usize,
    col: &mut Vec<T>,
) {
    let [kd, kh, kw] = g.kernel;
    let [_, ch, cw] = g.coarse;
    let [_, fh, fw] = g.fine;
    let width = g.taps() * channels;
    col.clear();
    col.resize((end - start) * width, T::zero());
    for (row, o) in (start..end).enumerate() {
        let (od, rem) = (o / (ch * cw), o % (ch * cw));
        let (oh, ow) = (rem / cw, rem % cw);
        let dst = &mut col[row * width..(row + 1) * width];
        let mut tap = 0;
        for td in 0..kd {
            let id = tables[0][od * kd + td];
            for th in 0..kh {
                let ih = tables[1][oh * kh + th];
                for tw in 0..kw {
                    let iw = tables[2][ow * kw + tw];
                    if let (Some(id), Some(ih), Some(iw)) = (id, ih, iw) {
                        let src = ((id * fh + ih) * fw + iw) * channels;
                        dst[tap * channels..(tap + 1) * channels]
                            .copy_from_slice(&fine[src..src + channels]);
                    }
                    tap += 1;
                }
            }
        }
    }
}

/// col2im: accumulate `col` rows back onto the fine grid of one sample.
fn scatter_add<T: Element>(
    col: &[T],
    g: &ConvGeometry,
    tables: &[Vec<Option<usize>>; 3],
    channels: usize,
    start: usize,
    end: usize,
    fine: &mut [T],
) {
    let [kd, kh, kw] = g.kernel;
    let [_, ch, cw] = g.coarse;
    let [_, fh, fw] = g.fine;
    let width = g.taps() * channels;
    for (row, o) in (start..end).enumerate() {
        let (od, rem) = (o / (ch * cw), o % (ch * cw));
        let (oh, ow) = (rem / cw, rem % cw);
        let src = &col[row * width..(row + 1) * width];
        let mut tap = 0;
        for td in 0..kd {
            let id = tables[0][od * kd + td];
            for th in 0..kh {
                let ih = tables[1][oh * kh + th];
                for tw in 0..kw {
                    let iw = tables[2][ow * kw + tw];
                    if let (Some(id), Some(ih), Some(iw)) = (id, ih, iw) {
                        let dst = ((id * fh + ih) * fw + iw) * channels;
                        for c in 0..channels {
                            fine[dst + c] = fine[dst + c] + src[tap * channels + c];
                        }
                    }
                    tap += 1;
                }
            }
        }
    }
}

fn spatial_of(x: &Tensor<impl Element>, what: &str) -> Result<(usize, [usize; 3], usize)> {
    let s = x.shape();
    if s.len() != 5 {
        return shape_err(format!("{what} expects [n, d, h, w, c], got {s:?}"));
    }
    Ok((s[0], [s[1], s[2], s[3]], s[4]))
}

fn kernel_dims(kernel: &Tensor<impl Element>) -> Result<([usize; 3], usize, usize)> {
    let s = kernel.shape();
    if s.len() != 5 {
        return shape_err(format!("kernel must be [kd, kh, kw, cin, cout], got {s:?}"));
    }
    Ok(([s[0], s[1], s[2]], s[3], s[4]))
}

fn add_bias<T: Element>(out: &mut [T], bias: Option<&Tensor<T>>, c_out: usize) {
    if let Some(b) = bias {
        for row in out.chunks_mut(c_out) {
            for (v, &bb) in row.iter_mut().zip(b.data()) {
                *v = *v + bb;
            }
        }
    }
}

fn channel_sums<T: Element>(t: &Tensor<T>) -> Tensor<T> {
    let c = t.channels();
    let mut acc = vec![T::zero(); c];
    for row in t.data().chunks(c) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a = *a + v;
        }
    }
    Tensor::new(vec![c], acc).expect("channel sums")
}

/// Strided SAME convolution: `[n, d, h, w, c_in] -> [n, ⌈d/s⌉, ⌈h/s⌉, ⌈w/s⌉, c_out]`.
pub fn conv_forward<T: Element>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: [usize; 3],
) -> Result<Tensor<T>> {
    let (n, fine, c_in) = spatial_of(x, "conv")?;
    let (k, kc_in, c_out) = kernel_dims(kernel)?;
    if kc_in != c_in {
        return shape_err(format!("conv input has {c_in} channels, kernel expects {kc_in}"));
    }
    let g = ConvGeometry::forward(fine, k, stride);
    let tables = g.tap_tables();
    let (fl, cl) = (g.fine_len(), g.coarse_len());
    let width = g.taps() * c_in;
    let chunk = g.chunk_rows(c_in);
    let mut out = vec![T::zero(); n * cl * c_out];
    let mut col = Vec::new();
    for s in 0..n {
        let xs = &x.data()[s * fl * c_in..(s + 1) * fl * c_in];
        let os = &mut out[s * cl * c_out..(s + 1) * cl * c_out];
        for start in (0..cl).step_by(chunk) {
            let end = (start + chunk).min(cl);
            gather(xs, &g, &tables, c_in, start, end, &mut col);
            gemm(
                false,
                false,
                end - start,
                width,
                c_out,
                T::one(),
                &col,
                kernel.data(),
                T::zero(),
                &mut os[start * c_out..end * c_out],
            );
        }
    }
    add_bias(&mut out, bias, c_out);
    Tensor::new(vec![n, g.coarse[0], g.coarse[1], g.coarse[2], c_out], out)
}

/// Gradients of [`conv_forward`] with respect to input, kernel and bias.
pub fn conv_backward<T: Element>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    dy: &Tensor<T>,
    stride: [usize; 3],
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, fine, c_in) = spatial_of(x, "conv")?;
    let (k, _, c_out) = kernel_dims(kernel)?;
    let g = ConvGeometry::forward(fine, k, stride);
    let tables = g.tap_tables();
    let (fl, cl) = (g.fine_len(), g.coarse_len());
    let width = g.taps() * c_in;
    let chunk = g.chunk_rows(c_in);
    let mut dx = vec![T::zero(); n * fl * c_in];
    let mut dk = vec![T::zero(); width * c_out];
    let mut col = Vec::new();
    let mut dcol = Vec::new();
    for s in 0..n {
        let xs = &x.data()[s * fl * c_in..(s + 1) * fl * c_in];
        let dys = &dy.data()[s * cl * c_out..(s + 1) * cl * c_out];
        let dxs = &mut dx[s * fl * c_in..(s + 1) * fl * c_in];
        for start in (0..cl).step_by(chunk) {
            let end = (start + chunk).min(cl);
            let rows = end - start;
            let dy_chunk = &dys[start * c_out..end * c_out];
            gather(xs, &g, &tables, c_in, start, end, &mut col);
            gemm(true, false, width, rows, c_out, T::one(), &col, dy_chunk, T::one(), &mut dk);
            dcol.clear();
            dcol.resize(rows * width, T::zero());
            gemm(false, true, rows, c_out, width, T::one(), dy_chunk, kernel.data(), T::zero(), &mut dcol);
            scatter_add(&dcol, &g, &tables, c_in, start, end, dxs);
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        Tensor::new(kernel.shape().to_vec(), dk)?,
        channel_sums(dy),
    ))
}

/// `[taps, c_in, c_out]` kernel rearranged as `[c_in, taps * c_out]`.
fn transpose_taps<T: Element>(kernel: &Tensor<T>) -> Vec<T> {
    let s = kernel.shape();
    let (taps, c_in, c_out) = (s[0] * s[1] * s[2], s[3], s[4]);
    let mut out = vec![T::zero(); kernel.len()];
    for t in 0..taps {
        for ci in 0..c_in {
            for co in 0..c_out {
                out[ci * taps * c_out + t * c_out + co] = kernel.data()[(t * c_in + ci) * c_out + co];
            }
        }
    }
    out
}

fn untranspose_taps<T: Element>(kt: &[T], shape: &[usize]) -> Tensor<T> {
    let (taps, c_in, c_out) = (shape[0] * shape[1] * shape[2], shape[3], shape[4]);
    let mut out = vec![T::zero(); kt.len()];
    for t in 0..taps {
        for ci in 0..c_in {
            for co in 0..c_out {
                out[(t * c_in + ci) * c_out + co] = kt[ci * taps * c_out + t * c_out + co];
            }
        }
    }
    Tensor::new(shape.to_vec(), out).expect("kernel shape")
}

/// Transposed convolution: `[n, d, h, w, c_in] -> [n, s·d, s·h, s·w, c_out]`.
///
/// This is the adjoint of [`conv_forward`] at the same stride with the kernel's
/// channel axes swapped.
pub fn conv_transposed_forward<T: Element>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: [usize; 3],
) -> Result<Tensor<T>> {
    let (n, coarse, c_in) = spatial_of(x, "conv_transposed")?;
    let (k, kc_in, c_out) = kernel_dims(kernel)?;
    if kc_in != c_in {
        return shape_err(format!("conv_transposed input has {c_in} channels, kernel expects {kc_in}"));
    }
    let g = ConvGeometry::transposed(coarse, k, stride);
    let tables = g.tap_tables();
    let (fl, cl) = (g.fine_len(), g.coarse_len());
    let width = g.taps() * c_out;
    let chunk = g.chunk_rows(c_out);
    let kt = transpose_taps(kernel);
    let mut out = vec![T::zero(); n * fl * c_out];
    let mut col = Vec::new();
    for s in 0..n {
        let xs = &x.data()[s * cl * c_in..(s + 1) * cl * c_in];
        let os = &mut out[s * fl * c_out..(s + 1) * fl * c_out];
        for start in (0..cl).step_by(chunk) {
            let end = (start + chunk).min(cl);
            col.clear();
            col.resize((end - start) * width, T::zero());
            gemm(
                false,
                false,
                end - start,
                c_in,
                width,
                T::one(),
                &xs[start * c_in..end * c_in],
                &kt,
                T::zero(),
                &mut col,
            );
            scatter_add(&col, &g, &tables, c_out, start, end, os);
        }
    }
    add_bias(&mut out, bias, c_out);
    Tensor::new(vec![n, g.fine[0], g.fine[1], g.fine[2], c_out], out)
}

/// Gradients of [`conv_transposed_forward`] with respect to input, kernel and bias.
pub fn conv_transposed_backward<T: Element>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    dy: &Tensor<T>,
    stride: [usize; 3],
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, coarse, c_in) = spatial_of(x, "conv_transposed")?;
    let (k, _, c_out) = kernel_dims(kernel)?;
    let g = ConvGeometry::transposed(coarse, k, stride);
    let tables = g.tap_tables();
    let (fl, cl) = (g.fine_len(), g.coarse_len());
    let width = g.taps() * c_out;
    let chunk = g.chunk_rows(c_out);
    let kt = transpose_taps(kernel);
    let mut dx = vec![T::zero(); n * cl * c_in];
    let mut dkt = vec![T::zero(); kt.len()];
    let mut col = Vec::new();
    for s in 0..n {
        let xs = &x.data()[s * cl * c_in..(s + 1) * cl * c_in];
        let dys = &dy.data()[s * fl * c_out..(s + 1) * fl * c_out];
        let dxs = &mut dx[s * cl * c_in..(s + 1) * cl * c_in];
        for start in (0..cl).step_by(chunk) {
            let end = (start + chunk).min(cl);
            let rows = end - start;
            gather(dys, &g, &tables, c_out, start, end, &mut col);
            gemm(false, true, rows, width, c_in, T::one(), &col, &kt, T::zero(), &mut dxs[start * c_in..end * c_in]);
            gemm(true, false, c_in, rows, width, T::one(), &xs[start * c_in..end * c_in], &col, T::one(), &mut dkt);
        }
    }
    Ok((
        Tensor::new(x.shape().to_vec(), dx)?,
        untranspose_taps(&dkt, kernel.shape()),
        channel_sums(dy),
    ))
}

pub fn relu<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Subgradient 0 at the origin.
pub fn relu_backward<T: Element>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    x.zip_map(dy, |v, g| if v > T::zero() { g } else { T::zero() }).expect("relu shapes")
}

/// Saved per-channel statistics of a training-mode batch norm.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Training-mode normalization by batch statistics (biased variance).
pub fn batch_norm_train<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    epsilon: f64,
) -> Result<(Tensor<T>, BatchStats)> {
    let c = x.channels();
    check_channel_vec(gamma, c)?;
    check_channel_vec(beta, c)?;
    let m = (x.len() / c) as f64;
    let mut mean = vec![0.0; c];
    for row in x.data().chunks(c) {
        for (a, v) in mean.iter_mut().zip(row) {
            *a += v.as_f64();
        }
    }
    mean.iter_mut().for_each(|v| *v /= m);
    let mut var = vec![0.0; c];
    for row in x.data().chunks(c) {
        for ((a, v), mu) in var.iter_mut().zip(row).zip(&mean) {
            *a += (v.as_f64() - mu).powi(2);
        }
    }
    var.iter_mut().for_each(|v| *v /= m);
    let y = normalize(x, gamma, beta, &mean, &var, epsilon);
    Ok((y, BatchStats { mean, var }))
}

/// Inference-mode normalization by running statistics.
pub fn batch_norm_infer<T: Element>(x: &Tensor<T>, p: &BatchNormParams<T>) -> Result<Tensor<T>> {
    if !p.initialized {
        return Err(Error::UninitializedStats);
    }
    let c = x.channels();
    check_channel_vec(&p.gamma, c)?;
    let mean: Vec<f64> = p.running_mean.data().iter().map(|v| v.as_f64()).collect();
    let var: Vec<f64> = p.running_var.data().iter().map(|v| v.as_f64()).collect();
    Ok(normalize(x, &p.gamma, &p.beta, &mean, &var, p.config.epsilon))
}

fn check_channel_vec<T: Element>(v: &Tensor<T>, c: usize) -> Result<()> {
    if v.shape() != [c] {
        return shape_err(format!("per-channel parameter {:?} for {c} channels", v.shape()));
    }
    Ok(())
}

fn normalize<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mean: &[f64],
    var: &[f64],
    epsilon: f64,
) -> Tensor<T> {
    let c = x.channels();
    let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + epsilon).sqrt()).collect();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(c) {
        for ch in 0..c {
            let xh = (row[ch].as_f64() - mean[ch]) * inv[ch];
            row[ch] = T::from_f64_lossy(gamma.data()[ch].as_f64() * xh + beta.data()[ch].as_f64());
        }
    }
    out
}

/// Backward of training-mode batch norm: `(dx, dgamma, dbeta)`.
pub fn batch_norm_train_backward<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    stats: &BatchStats,
    epsilon: f64,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let c = x.channels();
    let m = (x.len() / c) as f64;
    let inv: Vec<f64> = stats.var.iter().map(|v| 1.0 / (v + epsilon).sqrt()).collect();
    let mut sum_dy = vec![0.0; c];
    let mut sum_dy_xh = vec![0.0; c];
    for (xr, gr) in x.data().chunks(c).zip(dy.data().chunks(c)) {
        for ch in 0..c {
            let xh = (xr[ch].as_f64() - stats.mean[ch]) * inv[ch];
            sum_dy[ch] += gr[ch].as_f64();
            sum_dy_xh[ch] += gr[ch].as_f64() * xh;
        }
    }
    let mut dx = x.clone();
    for (dr, (xr, gr)) in dx.data_mut().chunks_mut(c).zip(x.data().chunks(c).zip(dy.data().chunks(c))) {
        for ch in 0..c {
            let xh = (xr[ch].as_f64() - stats.mean[ch]) * inv[ch];
            let g = gamma.data()[ch].as_f64();
            let v = g * inv[ch] / m * (m * gr[ch].as_f64() - sum_dy[ch] - xh * sum_dy_xh[ch]);
            dr[ch] = T::from_f64_lossy(v);
        }
    }
    let to_t = |v: Vec<f64>| Tensor::new(vec![c], v.into_iter().map(T::from_f64_lossy).collect()).unwrap();
    (dx, to_t(sum_dy_xh), to_t(sum_dy))
}

/// Backward of inference-mode batch norm: `(dx, dgamma, dbeta)`.
pub fn batch_norm_infer_backward<T: Element>(
    x: &Tensor<T>,
    p: &BatchNormParams<T>,
    gamma: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let c = x.channels();
    let eps = p.config.epsilon;
    let mean: Vec<f64> = p.running_mean.data().iter().map(|v| v.as_f64()).collect();
    let inv: Vec<f64> = p.running_var.data().iter().map(|v| 1.0 / (v.as_f64() + eps).sqrt()).collect();
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    let mut dx = dy.clone();
    for (dr, (xr, gr)) in dx.data_mut().chunks_mut(c).zip(x.data().chunks(c).zip(dy.data().chunks(c))) {
        for ch in 0..c {
            let g = gr[ch].as_f64();
            dgamma[ch] += g * (xr[ch].as_f64() - mean[ch]) * inv[ch];
            dbeta[ch] += g;
            dr[ch] = T::from_f64_lossy(g * gamma.data()[ch].as_f64() * inv[ch]);
        }
    }
    let to_t = |v: Vec<f64>| Tensor::new(vec![c], v.into_iter().map(T::from_f64_lossy).collect()).unwrap();
    (dx, to_t(dgamma), to_t(dbeta))
}

/// Concatenate along the channel (last) axis.
pub fn concat_channels<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
        return shape_err(format!("concat needs equal spatial shapes, got {sa:?} and {sb:?}"));
    }
    let (ca, cb) = (a.channels(), b.channels());
    let mut data = Vec::with_capacity(a.len() + b.len());
    for (ra, rb) in a.data().chunks(ca).zip(b.data().chunks(cb)) {
        data.extend_from_slice(ra);
        data.extend_from_slice(rb);
    }
    let mut shape = sa.to_vec();
    *shape.last_mut().unwrap() = ca + cb;
    Tensor::new(shape, data)
}

/// Split a concatenated gradient back into its two channel groups.
pub fn split_channels<T: Element>(t: &Tensor<T>, ca: usize) -> (Tensor<T>, Tensor<T>) {
    let c = t.channels();
    let cb = c - ca;
    let rows = t.len() / c;
    let mut a = Vec::with_capacity(rows * ca);
    let mut b = Vec::with_capacity(rows * cb);
    for r in t.data().chunks(c) {
        a.extend_from_slice(&r[..ca]);
        b.extend_from_slice(&r[ca..]);
    }
    let mut sa = t.shape().to_vec();
    let mut sb = sa.clone();
    *sa.last_mut().unwrap() = ca;
    *sb.last_mut().unwrap() = cb;
    (Tensor::new(sa, a).unwrap(), Tensor::new(sb, b).unwrap())
}

/// `(outer, len, inner)` strides for iterating along `axis`.
pub(crate) fn axis_layout(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn softmax_axis<T: Element>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.ndim() {
        return shape_err(format!("softmax axis {axis} out of range for {:?}", x.shape()));
    }
    let (outer, len, inner) = axis_layout(x.shape(), axis);
    let mut out = x.clone();
    let d = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * len + k) * inner + i;
            let max = (0..len).map(|k| x.data()[idx(k)].as_f64()).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for k in 0..len {
                let e = (x.data()[idx(k)].as_f64() - max).exp();
                total += e;
                d[idx(k)] = T::from_f64_lossy(e);
            }
            for k in 0..len {
                d[idx(k)] = T::from_f64_lossy(d[idx(k)].as_f64() / total);
            }
        }
    }
    Ok(out)
}

pub fn softmax_axis_backward<T: Element>(y: &Tensor<T>, dy: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, len, inner) = axis_layout(y.shape(), axis);
    let mut dx = dy.clone();
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * len + k) * inner + i;
            let dot: f64 = (0..len).map(|k| y.data()[idx(k)].as_f64() * dy.data()[idx(k)].as_f64()).sum();
            for k in 0..len {
                let v = y.data()[idx(k)].as_f64() * (dy.data()[idx(k)].as_f64() - dot);
                dx.data_mut()[idx(k)] = T::from_f64_lossy(v);
            }
        }
    }
    dx
}

/// Sum along `axis`, keeping it with extent 1.
pub fn sum_axis<T: Element>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.ndim() {
        return shape_err(format!("sum axis {axis} out of range for {:?}", x.shape()));
    }
    let (outer, len, inner) = axis_layout(x.shape(), axis);
    let mut out = vec![T::zero(); outer * inner];
    for o in 0..outer {
        for k in 0..len {
            for i in 0..inner {
                out[o * inner + i] = out[o * inner + i] + x.data()[(o * len + k) * inner + i];
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = 1;
    Tensor::new(shape, out)
}

pub fn sum_axis_backward<T: Element>(x_shape: &[usize], dy: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, len, inner) = axis_layout(x_shape, axis);
    let mut dx = vec![T::zero(); outer * len * inner];
    for o in 0..outer {
        for k in 0..len {
            for i in 0..inner {
                dx[(o * len + k) * inner + i] = dy.data()[o * inner + i];
            }
        }
    }
    Tensor::new(x_shape.to_vec(), dx).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Direct sliding-window evaluation of the SAME cross-correlation.
    fn naive_conv(x: &Tensor<f64>, k: &Tensor<f64>, b: &Tensor<f64>, stride: [usize; 3]) -> Tensor<f64> {
        let s = x.shape();
        let ks = k.shape();
        let (n, d, h, w, ci) = (s[0], s[1], s[2], s[3], s[4]);
        let (kd, kh, kw, co) = (ks[0], ks[1], ks[2], ks[4]);
        let out_ext = |e: usize, st: usize| e.div_ceil(st);
        let pad = |e: usize, st: usize, kk: usize| (((out_ext(e, st) - 1) * st + kk).saturating_sub(e)) / 2;
        let (od, oh, ow) = (out_ext(d, stride[0]), out_ext(h, stride[1]), out_ext(w, stride[2]));
        let (pd, ph, pw) = (pad(d, stride[0], kd), pad(h, stride[1], kh), pad(w, stride[2], kw));
        let mut out = Tensor::zeros(&[n, od, oh, ow, co]);
        for b_ in 0..n {
            for z in 0..od {
                for y in 0..oh {
                    for xx in 0..ow {
                        for c_o in 0..co {
                            let mut acc = b.data()[c_o];
                            for a in 0..kd {
                                for bb in 0..kh {
                                    for cc in 0..kw {
                                        let iz = (z * stride[0] + a) as isize - pd as isize;
                                        let iy = (y * stride[1] + bb) as isize - ph as isize;
                                        let ix = (xx * stride[2] + cc) as isize - pw as isize;
                                        if iz < 0 || iy < 0 || ix < 0 || iz >= d as isize || iy >= h as isize || ix >= w as isize {
                                            continue;
                                        }
                                        for c_i in 0..ci {
                                            acc += x.get(&[b_, iz as usize, iy as usize, ix as usize, c_i])
                                                * k.get(&[a, bb, cc, c_i, c_o]);
                                        }
                                    }
                                }
                            }
                            out.set(&[b_, z, y, xx, c_o], acc);
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn identity_kernel_passes_input_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_t(&[1, 3, 4, 5, 3], &mut rng);
        let mut k = Tensor::zeros(&[1, 1, 1, 3, 3]);
        for c in 0..3 {
            k.set(&[0, 0, 0, c, c], 1.0);
        }
        let y = conv_forward(&x, &k, Some(&Tensor::zeros(&[3])), [1, 1, 1]).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn zero_kernel_gives_bias() {
        let x = Tensor::ones(&[1, 2, 2, 2, 2]);
        let k = Tensor::zeros(&[3, 3, 3, 2, 4]);
        let b = Tensor::new(vec![4], vec![0.5, -1.0, 2.0, 0.0]).unwrap();
        let y = conv_forward::<f64>(&x, &k, Some(&b), [1, 1, 1]).unwrap();
        for row in y.data().chunks(4) {
            assert_eq!(row, b.data());
        }
    }

    #[test]
    fn conv_matches_naive_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for stride in [[1, 1, 1], [2, 2, 2], [1, 2, 2]] {
            let x = rand_t(&[2, 6, 6, 4, 2], &mut rng);
            let k = rand_t(&[3, 3, 3, 2, 3], &mut rng);
            let b = rand_t(&[3], &mut rng);
            let fast = conv_forward(&x, &k, Some(&b), stride).unwrap();
            let slow = naive_conv(&x, &k, &b, stride);
            assert_eq!(fast.shape(), slow.shape());
            assert!(fast.max_abs_diff(&slow).unwrap() < 1e-10);
        }
    }

    #[test]
    fn same_padding_preserves_or_halves_shape() {
        let x = Tensor::<f64>::zeros(&[1, 8, 6, 4, 1]);
        for kk in [1, 3] {
            let k = Tensor::zeros(&[kk, kk, kk, 1, 2]);
            assert_eq!(conv_forward(&x, &k, None, [1, 1, 1]).unwrap().shape(), &[1, 8, 6, 4, 2]);
        }
        let k = Tensor::zeros(&[3, 3, 3, 1, 2]);
        let down = conv_forward(&x, &k, None, [2, 2, 2]).unwrap();
        assert_eq!(down.shape(), &[1, 4, 3, 2, 2]);
        let up = conv_transposed_forward(&down, &Tensor::zeros(&[3, 3, 3, 2, 1]), None, [2, 2, 2]).unwrap();
        assert_eq!(up.shape(), x.shape());
    }

    #[test]
    fn transposed_conv_doubling_and_zero_input() {
        let x = Tensor::<f64>::zeros(&[1, 5, 7, 3, 8]);
        let k = Tensor::from_fn(&[3, 3, 3, 8, 4], |i| i as f64 * 1e-3);
        let y = conv_transposed_forward(&x, &k, None, [2, 2, 2]).unwrap();
        assert_eq!(y.shape(), &[1, 10, 14, 6, 4]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    fn swap_channels(k: &Tensor<f64>) -> Tensor<f64> {
        let s = k.shape();
        let mut out = Tensor::zeros(&[s[0], s[1], s[2], s[4], s[3]]);
        for a in 0..s[0] {
            for b in 0..s[1] {
                for c in 0..s[2] {
                    for i in 0..s[3] {
                        for o in 0..s[4] {
                            out.set(&[a, b, c, o, i], k.get(&[a, b, c, i, o]));
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn transposed_conv_is_adjoint_of_strided_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        // conv maps 3 -> 2 channels at stride 2; the transposed kernel maps 2 -> 3.
        let kt = rand_t(&[3, 3, 3, 2, 3], &mut rng);
        let kc = swap_channels(&kt);
        let x = rand_t(&[1, 4, 4, 2, 3], &mut rng);
        let y = rand_t(&[1, 2, 2, 1, 2], &mut rng);
        let lhs = conv_forward(&x, &kc, None, [2, 2, 2]).unwrap().dot(&y).unwrap();
        let rhs = x.dot(&conv_transposed_forward(&y, &kt, None, [2, 2, 2]).unwrap()).unwrap();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::<f64>::zeros(&[1, 2, 2, 2, 3]);
        let k = Tensor::zeros(&[1, 1, 1, 2, 1]);
        assert_eq!(conv_forward(&x, &k, None, [1, 1, 1]).unwrap_err().name(), "SHAPE_MISMATCH");
        assert_eq!(conv_transposed_forward(&x, &k, None, [2, 2, 2]).unwrap_err().name(), "SHAPE_MISMATCH");
    }

    #[test]
    fn conv_params_validation() {
        let ok = ConvParams::new(Tensor::<f64>::zeros(&[3, 3, 3, 2, 4]), Tensor::zeros(&[4]), [2, 2, 2]);
        assert!(ok.is_ok());
        let even = ConvParams::new(Tensor::<f64>::zeros(&[2, 3, 3, 2, 4]), Tensor::zeros(&[4]), [1, 1, 1]);
        assert!(even.is_err());
        let bias = ConvParams::new(Tensor::<f64>::zeros(&[3, 3, 3, 2, 4]), Tensor::zeros(&[3]), [1, 1, 1]);
        assert!(bias.is_err());
    }

    #[test]
    fn relu_values() {
        let x = Tensor::new(vec![3], vec![-1.0f64, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let g = relu_backward(&x, &Tensor::ones(&[3]));
        assert_eq!(g.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn batch_norm_on_standardized_input() {
        // Exactly zero mean and unit variance per channel.
        let x = Tensor::new(vec![4, 1], vec![1.0f64, -1.0, 1.0, -1.0]).unwrap();
        let (y, stats) = batch_norm_train(&x, &Tensor::ones(&[1]), &Tensor::zeros(&[1]), 1e-5).unwrap();
        assert_eq!(stats.mean, vec![0.0]);
        assert_eq!(stats.var, vec![1.0]);
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-4);
            assert!((a - b * (1.0 - 0.5e-5)).abs() < 1e-9);
        }
    }

    #[test]
    fn batch_norm_infer_needs_stats() {
        let p = BatchNormParams::<f64>::new(2, BatchNormConfig::default());
        let x = Tensor::zeros(&[3, 2]);
        assert_eq!(batch_norm_infer(&x, &p).unwrap_err().name(), "UNINITIALIZED_STATS");
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut p = BatchNormParams::<f64>::new(1, BatchNormConfig { momentum: 0.9, epsilon: 1e-5 });
        p.update_running(&[1.0], &[3.0]);
        assert!((p.running_mean.data()[0] - 0.1).abs() < 1e-12);
        assert!((p.running_var.data()[0] - (0.9 + 0.3)).abs() < 1e-12);
        assert!(p.initialized);
    }

    #[test]
    fn concat_and_split() {
        let a = Tensor::new(vec![2, 1], vec![1.0f64, 2.0]).unwrap();
        let b = Tensor::new(vec![2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let c = concat_channels(&a, &b).unwrap();
        assert_eq!(c.data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let (a2, b2) = split_channels(&c, 1);
        assert_eq!((a2, b2), (a, b));
        let bad = Tensor::zeros(&[3, 2]);
        assert_eq!(concat_channels(&Tensor::<f64>::zeros(&[2, 1]), &bad).unwrap_err().name(), "SHAPE_MISMATCH");
    }

    #[test]
    fn softmax_constant_is_uniform_and_shift_invariant() {
        let x = Tensor::full(&[2, 5, 3], 0.7f64);
        let y = softmax_axis(&x, 1).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rand_t(&[3, 4, 2], &mut rng);
        let y = softmax_axis(&x, 1).unwrap();
        let sums = sum_axis(&y, 1).unwrap();
        assert!(sums.data().iter().all(|&s| (s - 1.0).abs() < 1e-6));
        let shifted = softmax_axis(&x.add_scalar(3.0), 1).unwrap();
        assert!(shifted.max_abs_diff(&y).unwrap() < 1e-12);
    }
}
