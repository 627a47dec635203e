//! Global voxel transformer operators.
//!
//! The attention core computes `Y = V · (Kᵀ Q) / N` on channel-unfolded
//! matrices, so column `j` of `Y` is a weighted mean of the columns of `V`
//! with weights `K[:, i] · Q[:, j] / N` that depend on the input. GVTOs wrap
//! this core with learned projections, in size-preserving, down-sampling and
//! up-sampling form, and close each with a residual connection.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::init;
use crate::nnops::{BatchNormParams, BatchStats, ConvParams, Dims, NormMode, POINTWISE, UNIT_STRIDE};
use crate::tensor::{gemm, Element, Matrix, Tensor};

/// Divisor applied to `Kᵀ Q`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Normalizer {
    /// Number of key locations; each output is a weighted mean over inputs.
    #[default]
    KeyCount,
    /// Number of query locations.
    QueryCount,
}

impl Normalizer {
    pub fn divisor(self, n_q: usize, n_k: usize) -> usize {
        match self {
            Normalizer::KeyCount => n_k,
            Normalizer::QueryCount => n_q,
        }
    }
}

/// Evaluation order of the attention product.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionSchedule {
    /// Materialize `Kᵀ Q` a block of query columns at a time.
    Chunked { columns: usize },
    /// Evaluate `(V Kᵀ) Q`, never forming the location-by-location matrix.
    Reassociated,
}

impl Default for AttentionSchedule {
    fn default() -> Self {
        AttentionSchedule::Chunked { columns: 4096 }
    }
}

fn check_attention_shapes<T: Element>(q: &Matrix<T>, k: &Matrix<T>, v: &Matrix<T>) -> Result<()> {
    if q.rows() != k.rows() || k.rows() != v.rows() {
        return shape_err(format!(
            "attention channel counts differ: q {}, k {}, v {}",
            q.rows(),
            k.rows(),
            v.rows()
        ));
    }
    if k.cols() != v.cols() {
        return shape_err(format!("keys have {} locations, values {}", k.cols(), v.cols()));
    }
    Ok(())
}

/// `Normalize(Kᵀ Q)`: the `[n_k, n_q]` location weights.
pub fn attention_weights<T: Element>(q: &Matrix<T>, k: &Matrix<T>, normalizer: Normalizer) -> Result<Matrix<T>> {
    if q.rows() != k.rows() {
        return shape_err(format!("query channels {} vs key channels {}", q.rows(), k.rows()));
    }
    let (c, nq, nk) = (q.rows(), q.cols(), k.cols());
    let scale = T::one() / T::from_usize(normalizer.divisor(nq, nk)).unwrap();
    let mut w = Matrix::zeros(nk, nq);
    gemm(true, false, nk, c, nq, scale, k.data(), q.data(), T::zero(), w.data_mut());
    Ok(w)
}

/// `Y = V · (Kᵀ Q) / N` for `Q: [c, n_q]`, `K, V: [c, n_k]`.
pub fn attention_core<T: Element>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    normalizer: Normalizer,
    schedule: AttentionSchedule,
) -> Result<Matrix<T>> {
    check_attention_shapes(q, k, v)?;
    let (c, nq, nk) = (q.rows(), q.cols(), k.cols());
    let scale = T::one() / T::from_usize(normalizer.divisor(nq, nk)).unwrap();
    let mut y = Matrix::zeros(c, nq);
    match schedule {
        AttentionSchedule::Reassociated => {
            let mut vk = vec![T::zero(); c * c];
            gemm(false, true, c, nk, c, T::one(), v.data(), k.data(), T::zero(), &mut vk);
            gemm(false, false, c, c, nq, scale, &vk, q.data(), T::zero(), y.data_mut());
        }
        AttentionSchedule::Chunked { columns } => {
            let columns = columns.max(1);
            let mut qc = Vec::new();
            let mut w = Vec::new();
            let mut yc = Vec::new();
            for j0 in (0..nq).step_by(columns) {
                let j1 = (j0 + columns).min(nq);
                let width = j1 - j0;
                qc.clear();
                for r in 0..c {
                    qc.extend_from_slice(&q.data()[r * nq + j0..r * nq + j1]);
                }
                w.clear();
                w.resize(nk * width, T::zero());
                gemm(true, false, nk, c, width, T::one(), k.data(), &qc, T::zero(), &mut w);
                yc.clear();
                yc.resize(c * width, T::zero());
                gemm(false, false, c, nk, width, scale, v.data(), &w, T::zero(), &mut yc);
                for r in 0..c {
                    y.data_mut()[r * nq + j0..r * nq + j1].copy_from_slice(&yc[r * width..(r + 1) * width]);
                }
            }
        }
    }
    Ok(y)
}

/// Gradients of [`attention_core`]: `(dQ, dK, dV)`.
pub fn attention_core_backward<T: Element>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    normalizer: Normalizer,
    dy: &Matrix<T>,
) -> Result<(Matrix<T>, Matrix<T>, Matrix<T>)> {
    check_attention_shapes(q, k, v)?;
    let (c, nq, nk) = (q.rows(), q.cols(), k.cols());
    let s = T::one() / T::from_usize(normalizer.divisor(nq, nk)).unwrap();
    let mut small = vec![T::zero(); c * c];
    // dQ = s (K Vᵀ) dY
    gemm(false, true, c, nk, c, T::one(), k.data(), v.data(), T::zero(), &mut small);
    let mut dq = Matrix::zeros(c, nq);
    gemm(false, false, c, c, nq, s, &small, dy.data(), T::zero(), dq.data_mut());
    // dK = s (Q dYᵀ) V
    gemm(false, true, c, nq, c, T::one(), q.data(), dy.data(), T::zero(), &mut small);
    let mut dk = Matrix::zeros(c, nk);
    gemm(false, false, c, c, nk, s, &small, v.data(), T::zero(), dk.data_mut());
    // dV = s (dY Qᵀ) K
    gemm(false, true, c, nq, c, T::one(), dy.data(), q.data(), T::zero(), &mut small);
    let mut dv = Matrix::zeros(c, nk);
    gemm(false, false, c, c, nk, s, &small, k.data(), T::zero(), dv.data_mut());
    Ok((dq, dk, dv))
}

fn sample_slice<T: Element>(t: &Tensor<T>, s: usize) -> Tensor<T> {
    let per = t.len() / t.shape()[0];
    Tensor::new(t.shape()[1..].to_vec(), t.data()[s * per..(s + 1) * per].to_vec()).unwrap()
}

fn check_batched<T: Element>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<()> {
    if q.ndim() < 3 || k.ndim() < 3 || v.ndim() < 3 {
        return shape_err("attention expects batched channel-last tensors");
    }
    if q.shape()[0] != k.shape()[0] || k.shape() != v.shape() {
        return shape_err(format!("attention operands {:?}, {:?}, {:?}", q.shape(), k.shape(), v.shape()));
    }
    Ok(())
}

/// Batched attention on channel-last tensors: each sample is unfolded,
/// attended and folded back onto the query grid.
pub fn attention_forward<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    normalizer: Normalizer,
    schedule: AttentionSchedule,
) -> Result<Tensor<T>> {
    check_batched(q, k, v)?;
    let n = q.shape()[0];
    let spatial = &q.shape()[1..q.ndim() - 1];
    let mut out = Vec::with_capacity(q.len());
    for s in 0..n {
        let qm = sample_slice(q, s).unfold_channel()?;
        let km = sample_slice(k, s).unfold_channel()?;
        let vm = sample_slice(v, s).unfold_channel()?;
        let y = attention_core(&qm, &km, &vm, normalizer, schedule)?;
        out.extend(Tensor::fold_channel(&y, spatial)?.into_data());
    }
    Tensor::new(q.shape().to_vec(), out)
}

pub fn attention_backward<T: Element>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    normalizer: Normalizer,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    check_batched(q, k, v)?;
    let n = q.shape()[0];
    let q_spatial = &q.shape()[1..q.ndim() - 1];
    let k_spatial = &k.shape()[1..k.ndim() - 1];
    let (mut dq, mut dk, mut dv) = (Vec::new(), Vec::new(), Vec::new());
    for s in 0..n {
        let qm = sample_slice(q, s).unfold_channel()?;
        let km = sample_slice(k, s).unfold_channel()?;
        let vm = sample_slice(v, s).unfold_channel()?;
        let gm = sample_slice(dy, s).unfold_channel()?;
        let (a, b, c) = attention_core_backward(&qm, &km, &vm, normalizer, &gm)?;
        dq.extend(Tensor::fold_channel(&a, q_spatial)?.into_data());
        dk.extend(Tensor::fold_channel(&b, k_spatial)?.into_data());
        dv.extend(Tensor::fold_channel(&c, k_spatial)?.into_data());
    }
    Ok((
        Tensor::new(q.shape().to_vec(), dq)?,
        Tensor::new(k.shape().to_vec(), dk)?,
        Tensor::new(v.shape().to_vec(), dv)?,
    ))
}

// ---------------------------------------------------------------------------
// Operators on the tape

/// A convolution whose weights live on a tape.
#[derive(Clone, Copy, Debug)]
pub struct ConvVars {
    pub kernel: Var,
    pub bias: Var,
    pub stride: [usize; 3],
    pub transposed: bool,
}

impl ConvVars {
    pub fn apply<T: Element>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        if self.transposed {
            tape.conv_transposed(x, self.kernel, Some(self.bias), self.stride)
        } else {
            tape.conv(x, self.kernel, Some(self.bias), self.stride)
        }
    }
}

/// Batch norm whose affine parameters live on a tape; `key` names it when its
/// batch statistics are reported back.
#[derive(Clone, Debug)]
pub struct NormVars<'a, T> {
    pub key: String,
    pub gamma: Var,
    pub beta: Var,
    pub params: &'a BatchNormParams<T>,
    pub mode: NormMode,
}

/// Batch statistics collected in training mode, keyed by [`NormVars::key`].
pub type StatsSink = Vec<(String, BatchStats)>;

/// `relu(bn(x))`, the pre-activation applied before each learned projection.
pub fn preactivate<T: Element>(
    tape: &mut Tape<T>,
    x: Var,
    norm: Option<&NormVars<'_, T>>,
    sink: &mut StatsSink,
) -> Result<Var> {
    let normed = match norm {
        None => x,
        Some(n) => match n.mode {
            NormMode::Train => {
                let (y, stats) = tape.batch_norm_train(x, n.gamma, n.beta, n.params.config.epsilon)?;
                sink.push((n.key.clone(), stats));
                y
            }
            NormMode::Infer => tape.batch_norm_infer(x, n.gamma, n.beta, n.params)?,
        },
    };
    Ok(tape.relu(normed))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GvtoVariant {
    SizePreserving,
    DownV1,
    DownV2,
    UpV1,
    UpV2,
}

impl GvtoVariant {
    pub fn is_down(self) -> bool {
        matches!(self, GvtoVariant::DownV1 | GvtoVariant::DownV2)
    }

    pub fn is_up(self) -> bool {
        matches!(self, GvtoVariant::UpV1 | GvtoVariant::UpV2)
    }

    /// v1 variants carry an explicit residual projection.
    pub fn has_residual_proj(self) -> bool {
        matches!(self, GvtoVariant::DownV1 | GvtoVariant::UpV1)
    }

    pub fn out_channels(self, c: usize) -> usize {
        match self {
            GvtoVariant::SizePreserving => c,
            GvtoVariant::DownV1 | GvtoVariant::DownV2 => 2 * c,
            GvtoVariant::UpV1 | GvtoVariant::UpV2 => c / 2,
        }
    }
}

/// A GVTO whose weights live on a tape.
#[derive(Clone, Debug)]
pub struct GvtoVars<'a, T> {
    pub variant: GvtoVariant,
    pub normalizer: Normalizer,
    pub dims: Dims,
    pub norm: Option<NormVars<'a, T>>,
    pub q_proj: ConvVars,
    pub k_proj: ConvVars,
    pub v_proj: ConvVars,
    pub residual_proj: Option<ConvVars>,
}

fn spatial5<T: Element>(tape: &Tape<T>, x: Var) -> Result<[usize; 5]> {
    let s = tape.value(x).shape();
    if s.len() != 5 {
        return shape_err(format!("expected [n, d, h, w, c], got {s:?}"));
    }
    Ok([s[0], s[1], s[2], s[3], s[4]])
}

/// Record one GVTO on the tape.
pub fn gvto_record<T: Element>(
    tape: &mut Tape<T>,
    x: Var,
    op: &GvtoVars<'_, T>,
    sink: &mut StatsSink,
) -> Result<Var> {
    let shape = spatial5(tape, x)?;
    if op.variant.is_down() {
        for &a in op.dims.sampled_axes() {
            if shape[1 + a] % 2 != 0 {
                return Err(Error::OddExtent { axis: a, extent: shape[1 + a] });
            }
        }
    }
    if op.variant.is_up() && shape[4] % 2 != 0 {
        return Err(Error::OddChannels(shape[4]));
    }
    let a = preactivate(tape, x, op.norm.as_ref(), sink)?;
    let q = op.q_proj.apply(tape, a)?;
    let k = op.k_proj.apply(tape, a)?;
    let v = op.v_proj.apply(tape, a)?;
    let y = tape.attention(q, k, v, op.normalizer)?;
    match op.variant {
        GvtoVariant::SizePreserving => tape.add(x, y),
        GvtoVariant::DownV2 | GvtoVariant::UpV2 => tape.add(q, y),
        GvtoVariant::DownV1 | GvtoVariant::UpV1 => {
            let proj = op
                .residual_proj
                .ok_or_else(|| Error::InvalidSpec("v1 GVTO without residual projection".into()))?;
            let r = proj.apply(tape, a)?;
            tape.add(r, y)
        }
    }
}

/// Two pre-activated convolutions around an identity shortcut.
#[derive(Clone, Debug)]
pub struct ResidualVars<'a, T> {
    pub norm1: Option<NormVars<'a, T>>,
    pub conv1: ConvVars,
    pub norm2: Option<NormVars<'a, T>>,
    pub conv2: ConvVars,
}

pub fn residual_record<T: Element>(
    tape: &mut Tape<T>,
    x: Var,
    block: &ResidualVars<'_, T>,
    sink: &mut StatsSink,
) -> Result<Var> {
    let a = preactivate(tape, x, block.norm1.as_ref(), sink)?;
    let h = block.conv1.apply(tape, a)?;
    let b = preactivate(tape, h, block.norm2.as_ref(), sink)?;
    let r = block.conv2.apply(tape, b)?;
    tape.add(x, r)
}

// ---------------------------------------------------------------------------
// Standalone parameter sets

/// Weights of one GVTO.
#[derive(Clone, Debug, PartialEq)]
pub struct GvtoParams<T = f32> {
    pub variant: GvtoVariant,
    pub normalizer: Normalizer,
    pub dims: Dims,
    pub q_proj: ConvParams<T>,
    pub k_proj: ConvParams<T>,
    pub v_proj: ConvParams<T>,
    pub residual_proj: Option<ConvParams<T>>,
    pub norm: Option<BatchNormParams<T>>,
}

impl<T: Element> GvtoParams<T> {
    /// Randomly initialized GVTO on `channels` input channels.
    pub fn random<R: Rng + ?Sized>(
        rng: &mut R,
        variant: GvtoVariant,
        channels: usize,
        dims: Dims,
        norm: Option<crate::nnops::BatchNormConfig>,
    ) -> Result<Self> {
        if variant.is_up() && channels % 2 != 0 {
            return Err(Error::OddChannels(channels));
        }
        let c_out = variant.out_channels(channels);
        let sampled = if variant == GvtoVariant::SizePreserving { UNIT_STRIDE } else { dims.stride2() };
        let q_kernel = if variant == GvtoVariant::SizePreserving { POINTWISE } else { dims.kernel3() };
        let q_proj = init::conv(rng, q_kernel, channels, c_out, sampled);
        let k_proj = init::conv(rng, POINTWISE, channels, c_out, UNIT_STRIDE);
        let v_proj = init::conv(rng, POINTWISE, channels, c_out, UNIT_STRIDE);
        let residual_proj = variant
            .has_residual_proj()
            .then(|| init::conv(rng, dims.kernel3(), channels, c_out, dims.stride2()));
        let p = GvtoParams {
            variant,
            normalizer: Normalizer::default(),
            dims,
            q_proj,
            k_proj,
            v_proj,
            residual_proj,
            norm: norm.map(|cfg| BatchNormParams::new(channels, cfg)),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let c_q = self.q_proj.out_channels();
        if self.k_proj.out_channels() != c_q || self.v_proj.out_channels() != c_q {
            return Err(Error::InvalidSpec(format!(
                "q/k/v projections disagree on channels: {} / {} / {}",
                c_q,
                self.k_proj.out_channels(),
                self.v_proj.out_channels()
            )));
        }
        if self.k_proj.extents() != POINTWISE || self.v_proj.extents() != POINTWISE {
            return Err(Error::InvalidSpec("key/value projections must be 1x1x1".into()));
        }
        if self.residual_proj.is_some() != self.variant.has_residual_proj() {
            return Err(Error::InvalidSpec(format!(
                "{:?} {} a residual projection",
                self.variant,
                if self.variant.has_residual_proj() { "requires" } else { "must not have" }
            )));
        }
        let c_in = self.q_proj.in_channels();
        if self.variant.out_channels(c_in) != c_q {
            return Err(Error::InvalidSpec(format!(
                "{:?} maps {} channels to {}, projection yields {}",
                self.variant,
                c_in,
                self.variant.out_channels(c_in),
                c_q
            )));
        }
        Ok(())
    }

    /// Register the weights as trainable leaves and record the operator.
    pub fn record<'a>(&'a self, tape: &mut Tape<T>, x: Var, mode: NormMode, sink: &mut StatsSink) -> Result<Var> {
        let leaf = |tape: &mut Tape<T>, p: &ConvParams<T>, transposed: bool| ConvVars {
            kernel: tape.param(p.kernel.clone()),
            bias: tape.param(p.bias.clone()),
            stride: p.stride,
            transposed,
        };
        let up = self.variant.is_up();
        let vars = GvtoVars {
            variant: self.variant,
            normalizer: self.normalizer,
            dims: self.dims,
            norm: self.norm.as_ref().map(|n| NormVars {
                key: "norm".into(),
                gamma: tape.param(n.gamma.clone()),
                beta: tape.param(n.beta.clone()),
                params: n,
                mode,
            }),
            q_proj: leaf(tape, &self.q_proj, up),
            k_proj: leaf(tape, &self.k_proj, false),
            v_proj: leaf(tape, &self.v_proj, false),
            residual_proj: self.residual_proj.as_ref().map(|p| leaf(tape, p, up)),
        };
        gvto_record(tape, x, &vars, sink)
    }

    /// Eager evaluation on `[d, h, w, c]` or `[n, d, h, w, c]`; batch norm, if
    /// present, runs on its running statistics.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (batched, squeeze) = batch(x)?;
        let mut tape = Tape::new();
        let xv = tape.constant(batched);
        let y = self.record(&mut tape, xv, NormMode::Infer, &mut Vec::new())?;
        unbatch(tape.value(y).clone(), squeeze)
    }
}

pub(crate) fn batch<T: Element>(x: &Tensor<T>) -> Result<(Tensor<T>, bool)> {
    match x.ndim() {
        4 => {
            let mut s = vec![1];
            s.extend_from_slice(x.shape());
            Ok((x.clone().reshape(&s)?, true))
        }
        5 => Ok((x.clone(), false)),
        _ => shape_err(format!("expected [d, h, w, c] or [n, d, h, w, c], got {:?}", x.shape())),
    }
}

pub(crate) fn unbatch<T: Element>(y: Tensor<T>, squeeze: bool) -> Result<Tensor<T>> {
    if squeeze {
        let s = y.shape()[1..].to_vec();
        y.reshape(&s)
    } else {
        Ok(y)
    }
}

fn expect_variant<T: Element>(p: &GvtoParams<T>, ok: bool, what: &str) -> Result<()> {
    if !ok {
        return Err(Error::InvalidSpec(format!("{what} called with a {:?} GVTO", p.variant)));
    }
    Ok(())
}

/// Size-preserving GVTO: `[d, h, w, c] -> [d, h, w, c]`.
pub fn gvto_size_preserving<T: Element>(x: &Tensor<T>, p: &GvtoParams<T>) -> Result<Tensor<T>> {
    expect_variant(p, p.variant == GvtoVariant::SizePreserving, "gvto_size_preserving")?;
    p.forward(x)
}

/// Down-sampling GVTO: `[d, h, w, c] -> [d/2, h/2, w/2, 2c]`.
pub fn gvto_down<T: Element>(x: &Tensor<T>, p: &GvtoParams<T>) -> Result<Tensor<T>> {
    expect_variant(p, p.variant.is_down(), "gvto_down")?;
    p.forward(x)
}

/// Up-sampling GVTO: `[d, h, w, c] -> [2d, 2h, 2w, c/2]`.
pub fn gvto_up<T: Element>(x: &Tensor<T>, p: &GvtoParams<T>) -> Result<Tensor<T>> {
    expect_variant(p, p.variant.is_up(), "gvto_up")?;
    p.forward(x)
}

/// Weights of one pre-activation residual block.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualParams<T = f32> {
    pub conv1: ConvParams<T>,
    pub conv2: ConvParams<T>,
    pub norm1: Option<BatchNormParams<T>>,
    pub norm2: Option<BatchNormParams<T>>,
}

impl<T: Element> ResidualParams<T> {
    pub fn random<R: Rng + ?Sized>(
        rng: &mut R,
        channels: usize,
        dims: Dims,
        norm: Option<crate::nnops::BatchNormConfig>,
    ) -> Self {
        ResidualParams {
            conv1: init::conv(rng, dims.kernel3(), channels, channels, UNIT_STRIDE),
            conv2: init::conv(rng, dims.kernel3(), channels, channels, UNIT_STRIDE),
            norm1: norm.clone().map(|c| BatchNormParams::new(channels, c)),
            norm2: norm.map(|c| BatchNormParams::new(channels, c)),
        }
    }
}

/// `x + conv(relu(bn(conv(relu(bn(x))))))`.
pub fn residual_block<T: Element>(x: &Tensor<T>, p: &ResidualParams<T>) -> Result<Tensor<T>> {
    for c in [&p.conv1, &p.conv2] {
        if c.in_channels() != c.out_channels() {
            return shape_err(format!(
                "residual convolutions must preserve channels, got {} -> {}",
                c.in_channels(),
                c.out_channels()
            ));
        }
    }
    let (batched, squeeze) = batch(x)?;
    let mut tape = Tape::new();
    let xv = tape.constant(batched);
    let conv = |tape: &mut Tape<T>, c: &ConvParams<T>| ConvVars {
        kernel: tape.param(c.kernel.clone()),
        bias: tape.param(c.bias.clone()),
        stride: c.stride,
        transposed: false,
    };
    fn norm<'a, T: Element>(tape: &mut Tape<T>, n: &'a Option<BatchNormParams<T>>, key: &str) -> Option<NormVars<'a, T>> {
        n.as_ref().map(|n| NormVars {
            key: key.into(),
            gamma: tape.param(n.gamma.clone()),
            beta: tape.param(n.beta.clone()),
            params: n,
            mode: NormMode::Infer,
        })
    }
    let vars = ResidualVars {
        norm1: norm(&mut tape, &p.norm1, "norm1"),
        conv1: conv(&mut tape, &p.conv1),
        norm2: norm(&mut tape, &p.norm2, "norm2"),
        conv2: conv(&mut tape, &p.conv2),
    };
    let y = residual_record(&mut tape, xv, &vars, &mut Vec::new())?;
    unbatch(tape.value(y).clone(), squeeze)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_m(r: usize, c: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
        Matrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Column j of Y as an explicit weighted sum of the columns of V.
    fn weighted_sum_oracle(q: &Matrix<f64>, k: &Matrix<f64>, v: &Matrix<f64>, n: f64) -> Matrix<f64> {
        let (c, nq, nk) = (q.rows(), q.cols(), k.cols());
        let mut y = Matrix::zeros(c, nq);
        for j in 0..nq {
            for i in 0..nk {
                let mut w = 0.0;
                for r in 0..c {
                    w += k.get(r, i) * q.get(r, j);
                }
                w /= n;
                for r in 0..c {
                    y.data_mut()[r * nq + j] += w * v.get(r, i);
                }
            }
        }
        y
    }

    #[test]
    fn uniform_weights_average_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let q = Matrix::from_fn(1, 3, |_, _| 1.0);
        let k = Matrix::from_fn(1, 5, |_, _| 1.0);
        let v = rand_m(1, 5, &mut rng);
        let mean = v.data().iter().sum::<f64>() / 5.0;
        let y = attention_core(&q, &k, &v, Normalizer::KeyCount, AttentionSchedule::default()).unwrap();
        assert!(y.data().iter().all(|&x| (x - mean).abs() < 1e-15));
    }

    #[test]
    fn zero_values_give_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = rand_m(3, 4, &mut rng);
        let k = rand_m(3, 6, &mut rng);
        let y = attention_core(&q, &k, &Matrix::zeros(3, 6), Normalizer::KeyCount, AttentionSchedule::default()).unwrap();
        assert!(y.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn matches_weighted_sum_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (q, k, v) = (rand_m(3, 4, &mut rng), rand_m(3, 4, &mut rng), rand_m(3, 4, &mut rng));
        for schedule in [AttentionSchedule::default(), AttentionSchedule::Chunked { columns: 1 }, AttentionSchedule::Reassociated] {
            let y = attention_core(&q, &k, &v, Normalizer::KeyCount, schedule).unwrap();
            assert!(y.max_abs_diff(&weighted_sum_oracle(&q, &k, &v, 4.0)) < 1e-12);
        }
        let k6 = rand_m(3, 6, &mut rng);
        let v6 = rand_m(3, 6, &mut rng);
        let y = attention_core(&q, &k6, &v6, Normalizer::QueryCount, AttentionSchedule::default()).unwrap();
        assert!(y.max_abs_diff(&weighted_sum_oracle(&q, &k6, &v6, 4.0)) < 1e-12);
    }

    #[test]
    fn chunk_size_does_not_change_results() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (q, k, v) = (rand_m(5, 37, &mut rng), rand_m(5, 23, &mut rng), rand_m(5, 23, &mut rng));
        let full = attention_core(&q, &k, &v, Normalizer::KeyCount, AttentionSchedule::default()).unwrap();
        for columns in [1, 4, 16, 36] {
            let y = attention_core(&q, &k, &v, Normalizer::KeyCount, AttentionSchedule::Chunked { columns }).unwrap();
            assert_eq!(y, full, "chunk {columns}");
        }
    }

    #[test]
    fn linear_in_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = |m: Matrix<f64>| -> Matrix<f32> { Matrix::new(m.rows(), m.cols(), m.data().iter().map(|&x| x as f32).collect()).unwrap() };
        let (q, k) = (f(rand_m(4, 10, &mut rng)), f(rand_m(4, 12, &mut rng)));
        let (v1, v2) = (f(rand_m(4, 12, &mut rng)), f(rand_m(4, 12, &mut rng)));
        let (a, b) = (0.7f32, -1.3f32);
        let mix = Matrix::new(4, 12, v1.data().iter().zip(v2.data()).map(|(x, y)| a * x + b * y).collect()).unwrap();
        let s = AttentionSchedule::default();
        let lhs = attention_core(&q, &k, &mix, Normalizer::KeyCount, s).unwrap();
        let y1 = attention_core(&q, &k, &v1, Normalizer::KeyCount, s).unwrap();
        let y2 = attention_core(&q, &k, &v2, Normalizer::KeyCount, s).unwrap();
        for i in 0..lhs.data().len() {
            assert!((lhs.data()[i] - (a * y1.data()[i] + b * y2.data()[i])).abs() < 1e-6);
        }
    }

    #[test]
    fn mismatched_operands_are_rejected() {
        let q = Matrix::<f64>::zeros(3, 4);
        let k = Matrix::zeros(2, 4);
        let s = AttentionSchedule::default();
        assert_eq!(attention_core(&q, &k, &k, Normalizer::KeyCount, s).unwrap_err().name(), "SHAPE_MISMATCH");
        let k = Matrix::zeros(3, 4);
        let v = Matrix::zeros(3, 5);
        assert_eq!(attention_core(&q, &k, &v, Normalizer::KeyCount, s).unwrap_err().name(), "SHAPE_MISMATCH");
    }

    fn gvto(variant: GvtoVariant, c: usize, seed: u64) -> GvtoParams<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        GvtoParams::random(&mut rng, variant, c, Dims::Three, None).unwrap()
    }

    fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn shape_contracts() {
        let x = rand_t(&[16, 16, 8, 4], 5);
        let y = gvto_down(&x, &gvto(GvtoVariant::DownV1, 4, 1)).unwrap();
        assert_eq!(y.shape(), &[8, 8, 4, 8]);
        let y = gvto_down(&x, &gvto(GvtoVariant::DownV2, 4, 1)).unwrap();
        assert_eq!(y.shape(), &[8, 8, 4, 8]);
        let x = rand_t(&[4, 4, 2, 8], 6);
        for v in [GvtoVariant::UpV1, GvtoVariant::UpV2] {
            assert_eq!(gvto_up(&x, &gvto(v, 8, 2)).unwrap().shape(), &[8, 8, 4, 4]);
        }
        assert_eq!(gvto_size_preserving(&x, &gvto(GvtoVariant::SizePreserving, 8, 3)).unwrap().shape(), x.shape());
    }

    #[test]
    fn odd_extent_and_channels_are_rejected() {
        let x = rand_t(&[15, 4, 4, 2], 7);
        assert_eq!(gvto_down(&x, &gvto(GvtoVariant::DownV2, 2, 1)).unwrap_err().name(), "ODD_EXTENT");
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = GvtoParams::<f64>::random(&mut rng, GvtoVariant::UpV2, 3, Dims::Three, None).unwrap_err();
        assert_eq!(err.name(), "ODD_CHANNELS");
        assert_eq!(gvto_up(&x, &gvto(GvtoVariant::DownV2, 2, 1)).unwrap_err().name(), "INVALID_SPEC");
    }

    #[test]
    fn zero_value_branch_passes_residual_through() {
        let x = rand_t(&[4, 4, 2, 3], 8);
        let mut p = gvto(GvtoVariant::SizePreserving, 3, 4);
        p.v_proj.kernel = Tensor::zeros(p.v_proj.kernel.shape());
        p.v_proj.bias = Tensor::zeros(&[3]);
        assert_eq!(gvto_size_preserving(&x, &p).unwrap(), x);
    }

    #[test]
    fn validation_catches_bad_params() {
        let mut p = gvto(GvtoVariant::DownV2, 4, 1);
        p.residual_proj = Some(p.q_proj.clone());
        assert_eq!(p.validate().unwrap_err().name(), "INVALID_SPEC");
        let mut p = gvto(GvtoVariant::SizePreserving, 4, 1);
        p.k_proj = gvto(GvtoVariant::DownV2, 4, 2).k_proj;
        assert!(p.validate().is_err());
    }

    #[test]
    fn residual_block_zero_kernels_is_identity() {
        let x = rand_t(&[4, 4, 4, 2], 9);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut p = ResidualParams::random(&mut rng, 2, Dims::Three, None);
        assert_eq!(residual_block(&x, &p).unwrap().shape(), x.shape());
        p.conv2.kernel = Tensor::zeros(p.conv2.kernel.shape());
        assert_eq!(residual_block(&x, &p).unwrap(), x);
    }
}
