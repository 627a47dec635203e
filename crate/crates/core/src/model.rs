//! Declarative network assembly.
//!
//! A [`NetworkSpec`] describes an encoder-decoder: an initial 3-wide
//! convolution, `depth - 1` encoder levels (residual blocks, then a
//! down-sampling operator), a bottom operator, the mirrored decoder
//! (up-sampling operator, skip merge, residual blocks) and a 1×1 output
//! convolution. With a size-preserving GVTO at the bottom this is a GVTNet;
//! with a residual block and strided (transposed) convolutions it is the
//! U-Net baseline.
//!
//! Every spec expands into a flat plan of units. The plan alone fixes the
//! parameter names, their shapes and the order in which the seeded generator
//! fills them, so initialization, counting, recording and receptive-field
//! analysis all walk the same structure.

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::gvto::{
    batch, gvto_record, preactivate, residual_record, unbatch, AttentionSchedule, ConvVars, GvtoVariant, GvtoVars,
    NormVars, Normalizer, ResidualVars, StatsSink,
};
use crate::init;
use crate::nnops::{BatchNormConfig, BatchNormParams, Dims, NormMode, POINTWISE, UNIT_STRIDE};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipMode {
    Add,
    Concat,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BottomOp {
    SizePreservingGvto,
    ResidualBlock,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DownOp {
    StridedConv,
    GvtoDownV1,
    GvtoDownV2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpOp {
    TransposedConv,
    GvtoUpV1,
    GvtoUpV2,
}

/// Encoder-decoder architecture. `down_ops[l]` maps level `l` to `l + 1`,
/// `up_ops[l]` maps level `l + 1` back to `l`, and `blocks_per_level[l]`
/// residual blocks sit at level `l` on both sides.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub depth: usize,
    #[serde(default = "default_features")]
    pub initial_features: usize,
    pub skip_mode: SkipMode,
    pub bottom_op: BottomOp,
    pub down_ops: Vec<DownOp>,
    pub up_ops: Vec<UpOp>,
    pub blocks_per_level: Vec<usize>,
    #[serde(default)]
    pub batch_norm: Option<BatchNormConfig>,
    #[serde(default)]
    pub dims: Dims,
    #[serde(default = "one")]
    pub in_channels: usize,
    #[serde(default = "one")]
    pub out_channels: usize,
    #[serde(default)]
    pub normalizer: Normalizer,
    #[serde(default)]
    pub attention: AttentionSchedule,
}

fn default_features() -> usize {
    32
}

fn one() -> usize {
    1
}

/// First stage of the projection composite: scores every voxel, turns the
/// scores into a distribution along Z and sums the input under it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectionSpec {
    #[serde(default = "default_features")]
    pub features: usize,
    #[serde(default)]
    pub batch_norm: Option<BatchNormConfig>,
    #[serde(default)]
    pub normalizer: Normalizer,
    #[serde(default = "reassociated")]
    pub attention: AttentionSchedule,
}

fn reassociated() -> AttentionSchedule {
    AttentionSchedule::Reassociated
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelSpec {
    Network(NetworkSpec),
    Projection(ProjectionModelSpec),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectionModelSpec {
    pub stage1: ProjectionSpec,
    pub stage2: NetworkSpec,
}

impl From<NetworkSpec> for ModelSpec {
    fn from(s: NetworkSpec) -> Self {
        ModelSpec::Network(s)
    }
}

fn check_bn(cfg: &Option<BatchNormConfig>) -> Result<()> {
    if let Some(c) = cfg {
        if !(c.momentum > 0.0 && c.momentum < 1.0) {
            return Err(Error::InvalidSpec(format!("batch-norm momentum {} outside (0, 1)", c.momentum)));
        }
        if !(c.epsilon > 0.0) {
            return Err(Error::InvalidSpec(format!("batch-norm epsilon {} must be positive", c.epsilon)));
        }
    }
    Ok(())
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::InvalidSpec(format!("depth must be at least 2, got {}", self.depth)));
        }
        let levels = self.depth - 1;
        for (what, len) in [
            ("down_ops", self.down_ops.len()),
            ("up_ops", self.up_ops.len()),
            ("blocks_per_level", self.blocks_per_level.len()),
        ] {
            if len != levels {
                return Err(Error::InvalidSpec(format!("{what} has {len} entries, depth {} needs {levels}", self.depth)));
            }
        }
        if self.initial_features == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::InvalidSpec("channel counts must be positive".into()));
        }
        if self.initial_features.checked_shl(levels as u32).is_none_or(|c| c >> levels != self.initial_features) {
            return Err(Error::InvalidSpec("bottom channel count overflows".into()));
        }
        if let AttentionSchedule::Chunked { columns: 0 } = self.attention {
            return Err(Error::InvalidSpec("attention chunk must hold at least one column".into()));
        }
        check_bn(&self.batch_norm)
    }

    /// GVTNets carry a size-preserving GVTO at the bottom level.
    pub fn is_gvtnet(&self) -> bool {
        self.bottom_op == BottomOp::SizePreservingGvto
    }

    /// True when no GVTO appears anywhere, so every output has a bounded
    /// receptive field.
    pub fn is_local(&self) -> bool {
        self.bottom_op == BottomOp::ResidualBlock
            && self.down_ops.iter().all(|&d| d == DownOp::StridedConv)
            && self.up_ops.iter().all(|&u| u == UpOp::TransposedConv)
    }

    /// Required divisor of each spatial extent `[d, h, w]`.
    pub fn divisor(&self) -> [usize; 3] {
        let f = 1 << (self.depth.saturating_sub(1));
        match self.dims {
            Dims::Three => [f, f, f],
            Dims::Two => [1, f, f],
        }
    }

    fn channels(&self, level: usize) -> usize {
        self.initial_features << level
    }
}

impl ProjectionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.features == 0 {
            return Err(Error::InvalidSpec("projection features must be positive".into()));
        }
        if let AttentionSchedule::Chunked { columns: 0 } = self.attention {
            return Err(Error::InvalidSpec("attention chunk must hold at least one column".into()));
        }
        check_bn(&self.batch_norm)
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            ModelSpec::Network(n) => n.validate(),
            ModelSpec::Projection(p) => {
                p.stage1.validate()?;
                p.stage2.validate()?;
                if p.stage2.dims != Dims::Two {
                    return Err(Error::InvalidSpec("projection stage 2 must be a 2d network".into()));
                }
                if p.stage2.in_channels != 1 {
                    return Err(Error::InvalidSpec("projection stage 2 consumes a single-channel plane".into()));
                }
                Ok(())
            }
        }
    }

    pub fn in_channels(&self) -> usize {
        match self {
            ModelSpec::Network(n) => n.in_channels,
            ModelSpec::Projection(_) => 1,
        }
    }

    pub fn out_channels(&self) -> usize {
        match self {
            ModelSpec::Network(n) => n.out_channels,
            ModelSpec::Projection(p) => p.stage2.out_channels,
        }
    }

    pub fn divisor(&self) -> [usize; 3] {
        match self {
            ModelSpec::Network(n) => n.divisor(),
            ModelSpec::Projection(p) => p.stage2.divisor(),
        }
    }

    /// Output spatial shape for an input of spatial shape `[d, h, w]`.
    pub fn output_spatial(&self, input: [usize; 3]) -> [usize; 3] {
        match self {
            ModelSpec::Network(_) => input,
            ModelSpec::Projection(_) => [1, input[1], input[2]],
        }
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_string(self).expect("spec serializes");
        Sha256::digest(json.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Per-axis bound on how far (in input voxels) an output voxel can see,
    /// or `None` when a GVTO makes the receptive field global.
    pub fn receptive_radius(&self) -> Option<[usize; 3]> {
        match self {
            ModelSpec::Network(n) if n.is_local() => Some(network_plan(n).receptive_radius()),
            _ => None,
        }
    }
}

// ---------------------------------------------------------------------------
// Plans

#[derive(Clone, Debug)]
struct ConvUnit {
    name: String,
    kernel: [usize; 3],
    c_in: usize,
    c_out: usize,
    stride: [usize; 3],
    transposed: bool,
    /// Apply `relu(bn(·))` before the convolution.
    preact: bool,
    norm: bool,
}

#[derive(Clone, Debug)]
enum Unit {
    Conv(ConvUnit),
    Residual { name: String, channels: usize, kernel: [usize; 3], norm: bool },
    Gvto { name: String, variant: GvtoVariant, channels: usize, dims: Dims, norm: bool },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Fill {
    He(usize),
    Zero,
    One,
}

#[derive(Clone, Debug)]
struct Slot {
    name: String,
    shape: Vec<usize>,
    fill: Fill,
    trainable: bool,
}

fn push_bn(out: &mut Vec<Slot>, prefix: &str, c: usize) {
    let slot = |suffix: &str, fill, trainable, shape: Vec<usize>| Slot {
        name: format!("{prefix}.{suffix}"),
        shape,
        fill,
        trainable,
    };
    out.push(slot("gamma", Fill::One, true, vec![c]));
    out.push(slot("beta", Fill::Zero, true, vec![c]));
    out.push(slot("running_mean", Fill::Zero, false, vec![c]));
    out.push(slot("running_var", Fill::One, false, vec![c]));
    out.push(slot("updates", Fill::Zero, false, vec![1]));
}

fn push_conv(out: &mut Vec<Slot>, prefix: &str, kernel: [usize; 3], c_in: usize, c_out: usize) {
    let fan_in = kernel.iter().product::<usize>() * c_in;
    out.push(Slot {
        name: format!("{prefix}.kernel"),
        shape: vec![kernel[0], kernel[1], kernel[2], c_in, c_out],
        fill: Fill::He(fan_in),
        trainable: true,
    });
    out.push(Slot { name: format!("{prefix}.bias"), shape: vec![c_out], fill: Fill::Zero, trainable: true });
}

impl ConvUnit {
    fn plain(name: String, kernel: [usize; 3], c_in: usize, c_out: usize) -> Self {
        ConvUnit { name, kernel, c_in, c_out, stride: UNIT_STRIDE, transposed: false, preact: false, norm: false }
    }

    fn slots(&self, out: &mut Vec<Slot>) {
        if self.preact && self.norm {
            push_bn(out, &format!("{}.norm", self.name), self.c_in);
        }
        push_conv(out, &self.name, self.kernel, self.c_in, self.c_out);
    }

    fn record<T: Element>(&self, tape: &mut Tape<T>, x: Var, ctx: &mut Ctx<'_, T>) -> Result<Var> {
        let input = if self.preact {
            let norm = ctx.norm(&format!("{}.norm", self.name), self.norm);
            preactivate(tape, x, norm.as_ref(), &mut ctx.sink)?
        } else {
            x
        };
        ctx.conv(&self.name, self.stride, self.transposed).apply(tape, input)
    }

    fn grow(&self, rf: &mut Reach) {
        if self.transposed {
            rf.transposed(self.kernel, self.stride);
        } else {
            rf.conv(self.kernel, self.stride);
        }
    }
}

impl Unit {
    fn slots(&self, out: &mut Vec<Slot>) {
        match self {
            Unit::Conv(c) => c.slots(out),
            Unit::Residual { name, channels, kernel, norm } => {
                for i in 1..=2 {
                    if *norm {
                        push_bn(out, &format!("{name}.norm{i}"), *channels);
                    }
                    push_conv(out, &format!("{name}.conv{i}"), *kernel, *channels, *channels);
                }
            }
            Unit::Gvto { name, variant, channels, dims, norm } => {
                let c_out = variant.out_channels(*channels);
                if *norm {
                    push_bn(out, &format!("{name}.norm"), *channels);
                }
                let q_kernel = if *variant == GvtoVariant::SizePreserving { POINTWISE } else { dims.kernel3() };
                push_conv(out, &format!("{name}.q"), q_kernel, *channels, c_out);
                push_conv(out, &format!("{name}.k"), POINTWISE, *channels, c_out);
                push_conv(out, &format!("{name}.v"), POINTWISE, *channels, c_out);
                if variant.has_residual_proj() {
                    push_conv(out, &format!("{name}.residual"), dims.kernel3(), *channels, c_out);
                }
            }
        }
    }

    fn record<T: Element>(&self, tape: &mut Tape<T>, x: Var, ctx: &mut Ctx<'_, T>) -> Result<Var> {
        match self {
            Unit::Conv(c) => c.record(tape, x, ctx),
            Unit::Residual { name, norm, .. } => {
                let vars = ResidualVars {
                    norm1: ctx.norm(&format!("{name}.norm1"), *norm),
                    conv1: ctx.conv(&format!("{name}.conv1"), UNIT_STRIDE, false),
                    norm2: ctx.norm(&format!("{name}.norm2"), *norm),
                    conv2: ctx.conv(&format!("{name}.conv2"), UNIT_STRIDE, false),
                };
                residual_record(tape, x, &vars, &mut ctx.sink)
            }
            Unit::Gvto { name, variant, dims, norm, .. } => {
                let (stride, up) = match variant {
                    GvtoVariant::SizePreserving => (UNIT_STRIDE, false),
                    v => (dims.stride2(), v.is_up()),
                };
                let vars = GvtoVars {
                    variant: *variant,
                    normalizer: ctx.normalizer,
                    dims: *dims,
                    norm: ctx.norm(&format!("{name}.norm"), *norm),
                    q_proj: ctx.conv(&format!("{name}.q"), stride, up),
                    k_proj: ctx.conv(&format!("{name}.k"), UNIT_STRIDE, false),
                    v_proj: ctx.conv(&format!("{name}.v"), UNIT_STRIDE, false),
                    residual_proj: variant
                        .has_residual_proj()
                        .then(|| ctx.conv(&format!("{name}.residual"), stride, up)),
                };
                gvto_record(tape, x, &vars, &mut ctx.sink)
            }
        }
    }

    fn grow(&self, rf: &mut Reach) {
        match self {
            Unit::Conv(c) => c.grow(rf),
            Unit::Residual { kernel, .. } => {
                rf.conv(*kernel, UNIT_STRIDE);
                rf.conv(*kernel, UNIT_STRIDE);
            }
            Unit::Gvto { .. } => unreachable!("receptive fields are only tracked for local networks"),
        }
    }
}

/// Dependency interval of the current feature map, per axis: voxel `i` at
/// jump `s` depends on input coordinates `[s*i - before, s*i + after]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Reach {
    before: [usize; 3],
    after: [usize; 3],
    jump: [usize; 3],
}

impl Reach {
    fn new() -> Self {
        Reach { before: [0; 3], after: [0; 3], jump: [1; 3] }
    }

    /// SAME padding before the first tap, for extents divisible by the stride.
    fn pad_before(k: usize, s: usize) -> usize {
        k.saturating_sub(s) / 2
    }

    fn conv(&mut self, kernel: [usize; 3], stride: [usize; 3]) {
        for a in 0..3 {
            let pb = Self::pad_before(kernel[a], stride[a]);
            self.before[a] += self.jump[a] * pb;
            self.after[a] += self.jump[a] * (kernel[a] - 1 - pb);
            self.jump[a] *= stride[a];
        }
    }

    fn transposed(&mut self, kernel: [usize; 3], stride: [usize; 3]) {
        for a in 0..3 {
            let pb = Self::pad_before(kernel[a], stride[a]);
            self.jump[a] /= stride[a];
            self.before[a] += self.jump[a] * (kernel[a] - 1 - pb);
            self.after[a] += self.jump[a] * pb;
        }
    }

    fn merge(&mut self, other: &Reach) {
        for a in 0..3 {
            self.before[a] = self.before[a].max(other.before[a]);
            self.after[a] = self.after[a].max(other.after[a]);
        }
    }

    fn radius(&self) -> [usize; 3] {
        std::array::from_fn(|a| self.before[a].max(self.after[a]))
    }
}

#[derive(Clone, Debug)]
struct LevelPlan {
    enc_blocks: Vec<Unit>,
    down: Unit,
    up: Unit,
    merge: Option<ConvUnit>,
    dec_blocks: Vec<Unit>,
}

#[derive(Clone, Debug)]
struct NetworkPlan {
    skip_mode: SkipMode,
    initial: ConvUnit,
    levels: Vec<LevelPlan>,
    bottom: Unit,
    output: ConvUnit,
}

fn network_plan(spec: &NetworkSpec) -> NetworkPlan {
    let dims = spec.dims;
    let norm = spec.batch_norm.is_some();
    let k3 = dims.kernel3();
    let residual = |name: String, channels| Unit::Residual { name, channels, kernel: k3, norm };
    let gvto = |name: String, variant, channels| Unit::Gvto { name, variant, channels, dims, norm };
    let levels = (0..spec.depth - 1)
        .map(|l| {
            let c = spec.channels(l);
            let down_name = format!("enc{l}.down");
            let down = match spec.down_ops[l] {
                DownOp::StridedConv => Unit::Conv(ConvUnit {
                    stride: dims.stride2(),
                    preact: true,
                    norm,
                    ..ConvUnit::plain(down_name, k3, c, 2 * c)
                }),
                DownOp::GvtoDownV1 => gvto(down_name, GvtoVariant::DownV1, c),
                DownOp::GvtoDownV2 => gvto(down_name, GvtoVariant::DownV2, c),
            };
            let up_name = format!("dec{l}.up");
            let up = match spec.up_ops[l] {
                UpOp::TransposedConv => Unit::Conv(ConvUnit {
                    stride: dims.stride2(),
                    transposed: true,
                    preact: true,
                    norm,
                    ..ConvUnit::plain(up_name, k3, 2 * c, c)
                }),
                UpOp::GvtoUpV1 => gvto(up_name, GvtoVariant::UpV1, 2 * c),
                UpOp::GvtoUpV2 => gvto(up_name, GvtoVariant::UpV2, 2 * c),
            };
            let merge = (spec.skip_mode == SkipMode::Concat)
                .then(|| ConvUnit::plain(format!("dec{l}.merge"), POINTWISE, 2 * c, c));
            let blocks = |side: &str| {
                (0..spec.blocks_per_level[l]).map(|b| residual(format!("{side}{l}.block{b}"), c)).collect()
            };
            LevelPlan { enc_blocks: blocks("enc"), down, up, merge, dec_blocks: blocks("dec") }
        })
        .collect();
    let c_bottom = spec.channels(spec.depth - 1);
    let bottom = match spec.bottom_op {
        BottomOp::SizePreservingGvto => gvto("bottom".into(), GvtoVariant::SizePreserving, c_bottom),
        BottomOp::ResidualBlock => residual("bottom".into(), c_bottom),
    };
    NetworkPlan {
        skip_mode: spec.skip_mode,
        initial: ConvUnit::plain("initial".into(), k3, spec.in_channels, spec.initial_features),
        levels,
        bottom,
        output: ConvUnit {
            preact: true,
            norm,
            ..ConvUnit::plain("output".into(), POINTWISE, spec.initial_features, spec.out_channels)
        },
    }
}

impl NetworkPlan {
    fn slots(&self, out: &mut Vec<Slot>) {
        self.initial.slots(out);
        for lvl in &self.levels {
            lvl.enc_blocks.iter().for_each(|u| u.slots(out));
            lvl.down.slots(out);
        }
        self.bottom.slots(out);
        for lvl in self.levels.iter().rev() {
            lvl.up.slots(out);
            if let Some(m) = &lvl.merge {
                m.slots(out);
            }
            lvl.dec_blocks.iter().for_each(|u| u.slots(out));
        }
        self.output.slots(out);
    }

    fn record<T: Element>(&self, tape: &mut Tape<T>, x: Var, ctx: &mut Ctx<'_, T>) -> Result<Var> {
        let mut h = self.initial.record(tape, x, ctx)?;
        let mut skips = Vec::with_capacity(self.levels.len());
        for lvl in &self.levels {
            for u in &lvl.enc_blocks {
                h = u.record(tape, h, ctx)?;
            }
            skips.push(h);
            h = lvl.down.record(tape, h, ctx)?;
        }
        h = self.bottom.record(tape, h, ctx)?;
        for lvl in self.levels.iter().rev() {
            let skip = skips.pop().expect("one skip per level");
            h = lvl.up.record(tape, h, ctx)?;
            h = match (&self.skip_mode, &lvl.merge) {
                (SkipMode::Concat, Some(m)) => {
                    let cat = tape.concat_channels(h, skip)?;
                    m.record(tape, cat, ctx)?
                }
                _ => tape.add(h, skip)?,
            };
            for u in &lvl.dec_blocks {
                h = u.record(tape, h, ctx)?;
            }
        }
        self.output.record(tape, h, ctx)
    }

    fn receptive_radius(&self) -> [usize; 3] {
        let mut rf = Reach::new();
        self.initial.grow(&mut rf);
        let mut skips = Vec::new();
        for lvl in &self.levels {
            lvl.enc_blocks.iter().for_each(|u| u.grow(&mut rf));
            skips.push(rf);
            lvl.down.grow(&mut rf);
        }
        self.bottom.grow(&mut rf);
        for lvl in self.levels.iter().rev() {
            lvl.up.grow(&mut rf);
            rf.merge(&skips.pop().expect("one skip per level"));
            lvl.dec_blocks.iter().for_each(|u| u.grow(&mut rf));
        }
        self.output.grow(&mut rf);
        rf.radius()
    }
}

#[derive(Clone, Debug)]
struct ProjectionPlan {
    initial: ConvUnit,
    block: Unit,
    gvto: Unit,
    scores: ConvUnit,
    stage2: NetworkPlan,
}

fn projection_plan(spec: &ProjectionModelSpec) -> ProjectionPlan {
    let s1 = &spec.stage1;
    let f = s1.features;
    let norm = s1.batch_norm.is_some();
    let dims = Dims::Three;
    let mut stage2 = network_plan(&spec.stage2);
    rename_network(&mut stage2, "stage2.");
    ProjectionPlan {
        initial: ConvUnit::plain("stage1.initial".into(), dims.kernel3(), 1, f),
        block: Unit::Residual { name: "stage1.block".into(), channels: f, kernel: dims.kernel3(), norm },
        gvto: Unit::Gvto { name: "stage1.gvto".into(), variant: GvtoVariant::SizePreserving, channels: f, dims, norm },
        scores: ConvUnit { preact: true, norm, ..ConvUnit::plain("stage1.scores".into(), POINTWISE, f, 1) },
        stage2,
    }
}

fn rename_network(plan: &mut NetworkPlan, prefix: &str) {
    fn unit(u: &mut Unit, p: &str) {
        let name = match u {
            Unit::Conv(c) => &mut c.name,
            Unit::Residual { name, .. } | Unit::Gvto { name, .. } => name,
        };
        *name = format!("{p}{name}");
    }
    plan.initial.name = format!("{prefix}{}", plan.initial.name);
    plan.output.name = format!("{prefix}{}", plan.output.name);
    unit(&mut plan.bottom, prefix);
    for lvl in &mut plan.levels {
        lvl.enc_blocks.iter_mut().chain(lvl.dec_blocks.iter_mut()).for_each(|u| unit(u, prefix));
        unit(&mut lvl.down, prefix);
        unit(&mut lvl.up, prefix);
        if let Some(m) = &mut lvl.merge {
            m.name = format!("{prefix}{}", m.name);
        }
    }
}

impl ProjectionPlan {
    fn slots(&self, out: &mut Vec<Slot>) {
        self.initial.slots(out);
        self.block.slots(out);
        self.gvto.slots(out);
        self.scores.slots(out);
        self.stage2.slots(out);
    }

    /// Stage 1 only: returns `(probabilities [n,d,h,w,1], projection [n,1,h,w,1])`.
    fn record_stage1<T: Element>(&self, tape: &mut Tape<T>, x: Var, ctx: &mut Ctx<'_, T>) -> Result<(Var, Var)> {
        let mut h = self.initial.record(tape, x, ctx)?;
        h = self.block.record(tape, h, ctx)?;
        h = self.gvto.record(tape, h, ctx)?;
        let scores = self.scores.record(tape, h, ctx)?;
        let p = tape.softmax_axis(scores, 1)?;
        let weighted = tape.mul(p, x)?;
        let proj = tape.sum_axis(weighted, 1)?;
        Ok((p, proj))
    }
}

enum Plan {
    Network(NetworkPlan),
    Projection(ProjectionPlan),
}

impl Plan {
    fn of(spec: &ModelSpec) -> Plan {
        match spec {
            ModelSpec::Network(n) => Plan::Network(network_plan(n)),
            ModelSpec::Projection(p) => Plan::Projection(projection_plan(p)),
        }
    }

    fn slots(&self) -> Vec<Slot> {
        let mut out = Vec::new();
        match self {
            Plan::Network(n) => n.slots(&mut out),
            Plan::Projection(p) => p.slots(&mut out),
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Parameters

#[derive(Clone, Debug, PartialEq)]
pub struct Entry<T> {
    pub tensor: Tensor<T>,
    /// False for batch-norm running statistics.
    pub trainable: bool,
}

/// Named model tensors in a fixed, spec-determined order.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ModelParams<T = f32> {
    entries: IndexMap<String, Entry<T>>,
}

impl<T: Element> ModelParams<T> {
    pub fn new() -> Self {
        ModelParams { entries: IndexMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>, trainable: bool) {
        self.entries.insert(name.into(), Entry { tensor, trainable });
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name).map(|e| &e.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name).map(|e| &mut e.tensor)
    }

    pub fn entry(&self, name: &str) -> Option<&Entry<T>> {
        self.entries.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Entry<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.iter().filter(|(_, e)| e.trainable).map(|(k, e)| (k, &e.tensor))
    }

    pub fn trainable_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().filter(|(_, e)| e.trainable).map(|(k, e)| (k.as_str(), &mut e.tensor))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of trainable scalars.
    pub fn trainable_scalars(&self) -> usize {
        self.trainable().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<U: Element>(&self) -> ModelParams<U> {
        ModelParams {
            entries: self
                .entries
                .iter()
                .map(|(k, e)| (k.clone(), Entry { tensor: e.tensor.cast(), trainable: e.trainable }))
                .collect(),
        }
    }

    /// Batch-norm parameter sets keyed by their prefix.
    fn norms(&self, spec: &ModelSpec) -> Result<IndexMap<String, BatchNormParams<T>>> {
        let mut out = IndexMap::new();
        for (name, _) in self.entries.iter().filter(|(k, _)| k.ends_with(".gamma")) {
            let prefix = name.trim_end_matches(".gamma");
            let cfg = bn_config_for(spec, prefix);
            let fetch = |s: &str| {
                self.get(&format!("{prefix}.{s}"))
                    .cloned()
                    .ok_or_else(|| Error::SpecMismatch(format!("missing {prefix}.{s}")))
            };
            let updates = fetch("updates")?;
            out.insert(
                prefix.to_string(),
                BatchNormParams {
                    gamma: fetch("gamma")?,
                    beta: fetch("beta")?,
                    running_mean: fetch("running_mean")?,
                    running_var: fetch("running_var")?,
                    config: cfg,
                    initialized: updates.data()[0] > T::zero(),
                },
            );
        }
        Ok(out)
    }
}

fn bn_config_for(spec: &ModelSpec, prefix: &str) -> BatchNormConfig {
    let cfg = match spec {
        ModelSpec::Network(n) => n.batch_norm.clone(),
        ModelSpec::Projection(p) if prefix.starts_with("stage1.") => p.stage1.batch_norm.clone(),
        ModelSpec::Projection(p) => p.stage2.batch_norm.clone(),
    };
    cfg.unwrap_or_default()
}

/// Exact number of trainable scalars `build(spec, ·)` creates.
pub fn count_params(spec: &ModelSpec) -> Result<usize> {
    spec.validate()?;
    Ok(Plan::of(spec).slots().iter().filter(|s| s.trainable).map(|s| s.shape.iter().product::<usize>()).sum())
}

/// Initialize parameters from a seeded generator.
pub fn build<T: Element>(spec: &ModelSpec, seed: u64) -> Result<ModelParams<T>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::new();
    for slot in Plan::of(spec).slots() {
        let t = match slot.fill {
            Fill::He(fan_in) => init::truncated_he(&mut rng, &slot.shape, fan_in),
            Fill::Zero => Tensor::zeros(&slot.shape),
            Fill::One => Tensor::ones(&slot.shape),
        };
        params.insert(slot.name, t, slot.trainable);
    }
    Ok(params)
}

// ---------------------------------------------------------------------------
// Recording

struct Ctx<'a, T> {
    vars: IndexMap<String, Var>,
    norms: &'a IndexMap<String, BatchNormParams<T>>,
    mode: NormMode,
    normalizer: Normalizer,
    sink: StatsSink,
}

impl<'a, T: Element> Ctx<'a, T> {
    fn var(&self, name: &str) -> Var {
        *self.vars.get(name).unwrap_or_else(|| panic!("plan references unknown parameter {name}"))
    }

    fn conv(&self, name: &str, stride: [usize; 3], transposed: bool) -> ConvVars {
        ConvVars {
            kernel: self.var(&format!("{name}.kernel")),
            bias: self.var(&format!("{name}.bias")),
            stride,
            transposed,
        }
    }

    fn norm(&self, prefix: &str, enabled: bool) -> Option<NormVars<'a, T>> {
        let norms: &'a IndexMap<String, BatchNormParams<T>> = self.norms;
        enabled.then(|| NormVars {
            key: prefix.to_string(),
            gamma: self.var(&format!("{prefix}.gamma")),
            beta: self.var(&format!("{prefix}.beta")),
            params: &norms[prefix],
            mode: self.mode,
        })
    }
}

/// Values recorded by [`Model::record`].
#[derive(Debug)]
pub struct Recorded {
    pub output: Var,
    /// Tape leaf for every trainable tensor, by name.
    pub params: IndexMap<String, Var>,
    /// Batch statistics gathered in training mode.
    pub stats: StatsSink,
}

/// A spec together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T = f32> {
    pub spec: ModelSpec,
    pub params: ModelParams<T>,
}

impl<T: Element> Model<T> {
    pub fn build(spec: ModelSpec, seed: u64) -> Result<Self> {
        let params = build(&spec, seed)?;
        Ok(Model { spec, params })
    }

    /// Pair a spec with externally supplied parameters, verifying that names
    /// and shapes match the slots `spec` prescribes.
    pub fn from_parts(spec: ModelSpec, params: ModelParams<T>) -> Result<Self> {
        spec.validate()?;
        let slots = Plan::of(&spec).slots();
        if slots.len() != params.len() {
            return Err(Error::SpecMismatch(format!("spec expects {} tensors, found {}", slots.len(), params.len())));
        }
        for (slot, (name, entry)) in slots.iter().zip(params.iter()) {
            if slot.name != name || slot.shape != entry.tensor.shape() || slot.trainable != entry.trainable {
                return Err(Error::SpecMismatch(format!(
                    "expected {} {:?}, found {} {:?}",
                    slot.name,
                    slot.shape,
                    name,
                    entry.tensor.shape()
                )));
            }
        }
        Ok(Model { spec, params })
    }

    pub fn cast<U: Element>(&self) -> Model<U> {
        Model { spec: self.spec.clone(), params: self.params.cast() }
    }

    fn schedule(&self) -> AttentionSchedule {
        match &self.spec {
            ModelSpec::Network(n) => n.attention,
            ModelSpec::Projection(p) => p.stage1.attention,
        }
    }

    /// Validate a batched `[n, d, h, w, c]` input.
    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 5 {
            return shape_err(format!("expected [n, d, h, w, c], got {shape:?}"));
        }
        if shape[4] != self.spec.in_channels() {
            return shape_err(format!("model takes {} input channels, got {}", self.spec.in_channels(), shape[4]));
        }
        let div = self.spec.divisor();
        for a in 0..3 {
            if shape[1 + a] % div[a] != 0 {
                return Err(Error::IndivisibleExtent { axis: a, extent: shape[1 + a], divisor: div[a] });
            }
        }
        Ok(())
    }

    fn leaves(&self, tape: &mut Tape<T>, trainable: bool) -> IndexMap<String, Var> {
        self.params
            .trainable()
            .map(|(k, t)| {
                let v = if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) };
                (k.to_string(), v)
            })
            .collect()
    }

    /// Record the full model on `tape`. Trainable tensors become gradient
    /// leaves when `mode` is `Train`.
    pub fn record(&self, tape: &mut Tape<T>, x: Var, mode: NormMode) -> Result<Recorded> {
        self.check_input(tape.value(x).shape())?;
        let vars = self.leaves(tape, mode == NormMode::Train);
        self.record_vars(tape, x, vars, mode)
    }

    /// Like [`Model::record`] with every trainable tensor supplied by the
    /// caller as an existing tape node, in [`ModelParams::trainable`] order.
    pub fn record_with(&self, tape: &mut Tape<T>, x: Var, leaves: &[Var], mode: NormMode) -> Result<Recorded> {
        self.check_input(tape.value(x).shape())?;
        let names: Vec<String> = self.params.trainable().map(|(k, _)| k.to_string()).collect();
        if names.len() != leaves.len() {
            return shape_err(format!("expected {} parameter leaves, got {}", names.len(), leaves.len()));
        }
        let vars = names.into_iter().zip(leaves.iter().copied()).collect();
        self.record_vars(tape, x, vars, mode)
    }

    fn record_vars(&self, tape: &mut Tape<T>, x: Var, vars: IndexMap<String, Var>, mode: NormMode) -> Result<Recorded> {
        tape.set_schedule(self.schedule());
        let norms = self.params.norms(&self.spec)?;
        let mut ctx = Ctx { vars, norms: &norms, mode, normalizer: Normalizer::default(), sink: Vec::new() };
        let output = match (&Plan::of(&self.spec), &self.spec) {
            (Plan::Network(plan), ModelSpec::Network(spec)) => {
                ctx.normalizer = spec.normalizer;
                plan.record(tape, x, &mut ctx)?
            }
            (Plan::Projection(plan), ModelSpec::Projection(spec)) => {
                ctx.normalizer = spec.stage1.normalizer;
                let (_, proj) = plan.record_stage1(tape, x, &mut ctx)?;
                ctx.normalizer = spec.stage2.normalizer;
                tape.set_schedule(spec.stage2.attention);
                plan.stage2.record(tape, proj, &mut ctx)?
            }
            _ => unreachable!("plan mirrors spec"),
        };
        Ok(Recorded { output, params: ctx.vars, stats: ctx.sink })
    }

    /// Fold training-mode batch statistics into the running buffers.
    pub fn apply_stats(&mut self, stats: &StatsSink) -> Result<()> {
        for (prefix, s) in stats {
            let cfg = bn_config_for(&self.spec, prefix);
            let mut bn = BatchNormParams::new(s.mean.len(), cfg);
            bn.running_mean = self.params.get(&format!("{prefix}.running_mean")).cloned().expect("running mean");
            bn.running_var = self.params.get(&format!("{prefix}.running_var")).cloned().expect("running var");
            bn.update_running(&s.mean, &s.var);
            *self.params.get_mut(&format!("{prefix}.running_mean")).unwrap() = bn.running_mean;
            *self.params.get_mut(&format!("{prefix}.running_var")).unwrap() = bn.running_var;
            let updates = self.params.get_mut(&format!("{prefix}.updates")).unwrap();
            updates.data_mut()[0] = updates.data()[0] + T::one();
        }
        Ok(())
    }

    /// Inference on `[d, h, w, c]` or `[n, d, h, w, c]`, using running
    /// batch-norm statistics.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (batched, squeeze) = batch(x)?;
        let mut tape = Tape::new();
        let xv = tape.constant(batched);
        let rec = self.record(&mut tape, xv, NormMode::Infer)?;
        unbatch(tape.value(rec.output).clone(), squeeze)
    }

    /// Stage 1 of a projection model on `[n, d, h, w, 1]`:
    /// `(probabilities along Z, projected plane [n, 1, h, w, 1])`.
    pub fn projection_stage1(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let ModelSpec::Projection(spec) = &self.spec else {
            return Err(Error::InvalidSpec("stage 1 exists only on projection models".into()));
        };
        let (batched, squeeze) = batch(x)?;
        self.check_input(batched.shape())?;
        let plan = projection_plan(spec);
        let mut tape = Tape::with_schedule(spec.stage1.attention);
        let xv = tape.constant(batched);
        let norms = self.params.norms(&self.spec)?;
        let vars = self.leaves(&mut tape, false);
        let mut ctx =
            Ctx { vars, norms: &norms, mode: NormMode::Infer, normalizer: spec.stage1.normalizer, sink: Vec::new() };
        let (p, proj) = plan.record_stage1(&mut tape, xv, &mut ctx)?;
        Ok((unbatch(tape.value(p).clone(), squeeze)?, unbatch(tape.value(proj).clone(), squeeze)?))
    }
}

// ---------------------------------------------------------------------------
// Presets

pub mod presets {
    use super::*;

    fn locals(depth: usize) -> (Vec<DownOp>, Vec<UpOp>) {
        (vec![DownOp::StridedConv; depth - 1], vec![UpOp::TransposedConv; depth - 1])
    }

    /// Depth-4 GVTNet with additive skips and batch norm.
    pub fn label_free_gvtnet() -> NetworkSpec {
        NetworkSpec {
            depth: 4,
            initial_features: 32,
            skip_mode: SkipMode::Add,
            bottom_op: BottomOp::SizePreservingGvto,
            down_ops: vec![DownOp::GvtoDownV1; 3],
            up_ops: vec![UpOp::GvtoUpV2; 3],
            blocks_per_level: vec![1; 3],
            batch_norm: Some(BatchNormConfig::default()),
            dims: Dims::Three,
            in_channels: 1,
            out_channels: 1,
            normalizer: Normalizer::KeyCount,
            attention: AttentionSchedule::default(),
        }
    }

    /// Depth-5 all-local counterpart of [`label_free_gvtnet`].
    pub fn label_free_baseline() -> NetworkSpec {
        let (down_ops, up_ops) = locals(5);
        NetworkSpec {
            depth: 5,
            bottom_op: BottomOp::ResidualBlock,
            down_ops,
            up_ops,
            blocks_per_level: vec![0; 4],
            ..label_free_gvtnet()
        }
    }

    /// Depth-3 GVTNet with concatenated skips and up-sampling GVTOs (v2).
    pub fn denoise_gvtnet() -> NetworkSpec {
        NetworkSpec {
            depth: 3,
            initial_features: 32,
            skip_mode: SkipMode::Concat,
            bottom_op: BottomOp::SizePreservingGvto,
            down_ops: vec![DownOp::StridedConv; 2],
            up_ops: vec![UpOp::GvtoUpV2; 2],
            blocks_per_level: vec![1; 2],
            batch_norm: None,
            dims: Dims::Three,
            in_channels: 1,
            out_channels: 1,
            normalizer: Normalizer::KeyCount,
            attention: AttentionSchedule::default(),
        }
    }

    /// All-local counterpart of [`denoise_gvtnet`].
    pub fn denoise_baseline() -> NetworkSpec {
        NetworkSpec { bottom_op: BottomOp::ResidualBlock, up_ops: vec![UpOp::TransposedConv; 2], ..denoise_gvtnet() }
    }

    /// Volume-to-plane projection followed by a planar denoising GVTNet.
    pub fn projection() -> ProjectionModelSpec {
        ProjectionModelSpec {
            stage1: ProjectionSpec {
                features: 32,
                batch_norm: None,
                normalizer: Normalizer::KeyCount,
                attention: AttentionSchedule::Reassociated,
            },
            stage2: NetworkSpec { dims: Dims::Two, ..denoise_gvtnet() },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small(bottom: BottomOp, down: DownOp, up: UpOp, skip: SkipMode, bn: bool) -> NetworkSpec {
        NetworkSpec {
            depth: 3,
            initial_features: 4,
            skip_mode: skip,
            bottom_op: bottom,
            down_ops: vec![down; 2],
            up_ops: vec![up; 2],
            blocks_per_level: vec![1, 0],
            batch_norm: bn.then(BatchNormConfig::default),
            dims: Dims::Three,
            in_channels: 1,
            out_channels: 1,
            normalizer: Normalizer::KeyCount,
            attention: AttentionSchedule::default(),
        }
    }

    fn rand_input(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn single_conv_and_block_counts() {
        let mut slots = Vec::new();
        push_conv(&mut slots, "c", [3, 3, 3], 1, 32);
        assert_eq!(slots.iter().map(|s| s.shape.iter().product::<usize>()).sum::<usize>(), 896);
        let mut slots = Vec::new();
        Unit::Residual { name: "r".into(), channels: 32, kernel: [3, 3, 3], norm: false }.slots(&mut slots);
        assert_eq!(slots.iter().map(|s| s.shape.iter().product::<usize>()).sum::<usize>(), 55_360);
    }

    #[test]
    fn build_is_deterministic_and_counts_match() {
        let spec: ModelSpec = small(BottomOp::SizePreservingGvto, DownOp::GvtoDownV1, UpOp::GvtoUpV2, SkipMode::Concat, true).into();
        let a: ModelParams<f32> = build(&spec, 3).unwrap();
        let b: ModelParams<f32> = build(&spec, 3).unwrap();
        assert_eq!(a, b);
        let c: ModelParams<f32> = build(&spec, 4).unwrap();
        assert_ne!(a, c);
        assert_eq!(a.trainable_scalars(), count_params(&spec).unwrap());
    }

    #[test]
    fn invalid_specs_are_named() {
        let mut s = presets::denoise_gvtnet();
        s.depth = 1;
        let err = count_params(&s.into()).unwrap_err();
        assert_eq!(err.name(), "INVALID_SPEC");
        let mut s = presets::denoise_gvtnet();
        s.up_ops.pop();
        assert!(matches!(count_params(&s.into()), Err(Error::InvalidSpec(m)) if m.contains("up_ops")));
    }

    #[test]
    fn presets_build() {
        for spec in [presets::label_free_gvtnet(), presets::label_free_baseline(), presets::denoise_gvtnet()] {
            let spec: ModelSpec = spec.into();
            build::<f32>(&spec, 0).unwrap();
        }
        build::<f32>(&ModelSpec::Projection(presets::projection()), 0).unwrap();
    }

    #[test]
    fn forward_shapes_and_divisibility() {
        for skip in [SkipMode::Add, SkipMode::Concat] {
            let spec = small(BottomOp::SizePreservingGvto, DownOp::GvtoDownV2, UpOp::GvtoUpV1, skip, false);
            let m = Model::<f64>::build(spec.into(), 1).unwrap();
            let y = m.forward(&rand_input(&[16, 16, 8, 1], 0)).unwrap();
            assert_eq!(y.shape(), &[16, 16, 8, 1]);
            let y = m.forward(&rand_input(&[2, 8, 12, 4, 1], 0)).unwrap();
            assert_eq!(y.shape(), &[2, 8, 12, 4, 1]);
            let err = m.forward(&rand_input(&[20, 20, 10, 1], 0)).unwrap_err();
            assert!(matches!(err, Error::IndivisibleExtent { axis: 2, extent: 10, divisor: 4 }), "{err:?}");
        }
    }

    #[test]
    fn batch_norm_needs_training_first() {
        let spec = small(BottomOp::ResidualBlock, DownOp::StridedConv, UpOp::TransposedConv, SkipMode::Add, true);
        let mut m = Model::<f64>::build(spec.into(), 1).unwrap();
        let x = rand_input(&[2, 4, 4, 4, 1], 2);
        assert_eq!(m.forward(&x).unwrap_err().name(), "UNINITIALIZED_STATS");
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let rec = m.record(&mut tape, xv, NormMode::Train).unwrap();
        assert!(!rec.stats.is_empty());
        m.apply_stats(&rec.stats).unwrap();
        assert_eq!(m.forward(&x).unwrap().shape(), x.shape());
    }

    #[test]
    fn local_radius_bounds_dependencies() {
        let spec = small(BottomOp::ResidualBlock, DownOp::StridedConv, UpOp::TransposedConv, SkipMode::Concat, false);
        let spec: ModelSpec = spec.into();
        let r = spec.receptive_radius().unwrap();
        let m = Model::<f64>::build(spec, 5).unwrap();
        let shape = [48, 48, 48, 1];
        let x = rand_input(&shape, 1);
        let y = m.forward(&x).unwrap();
        let v = [24usize, 24, 24];
        let probe = |offset: isize| {
            let mut xp = x.clone();
            let idx = [(v[0] as isize + offset) as usize, v[1], v[2], 0];
            xp.set(&idx, xp.get(&idx) + 1.0);
            let yp = m.forward(&xp).unwrap();
            yp.get(&[v[0], v[1], v[2], 0]) != y.get(&[v[0], v[1], v[2], 0])
        };
        let r0 = r[0] as isize;
        assert!(!probe(r0 + 1) && !probe(-r0 - 1), "radius {r:?} is not a bound");
        let reach = (0..=r0).rev().find(|&o| probe(o) || probe(-o)).unwrap();
        assert!(reach + 2 >= r0, "radius {r0} far from observed reach {reach}");
    }

    #[test]
    fn gvto_specs_have_no_radius() {
        let spec = small(BottomOp::SizePreservingGvto, DownOp::StridedConv, UpOp::TransposedConv, SkipMode::Add, false);
        assert!(ModelSpec::from(spec).receptive_radius().is_none());
    }

    #[test]
    fn projection_stage1_is_convex() {
        let mut spec = presets::projection();
        spec.stage1.features = 4;
        spec.stage2.initial_features = 4;
        let m = Model::<f64>::build(ModelSpec::Projection(spec), 0).unwrap();
        let plane = rand_input(&[1, 1, 8, 8, 1], 3);
        let x = Tensor::from_fn(&[1, 6, 8, 8, 1], |i| plane.data()[i % 64]);
        let (p, proj) = m.projection_stage1(&x).unwrap();
        assert_eq!(proj.shape(), &[1, 1, 8, 8, 1]);
        assert!(proj.max_abs_diff(&plane).unwrap() < 1e-12);
        for j in 0..64 {
            let s: f64 = (0..6).map(|z| p.data()[z * 64 + j]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert_eq!(m.forward(&x).unwrap().shape(), &[1, 1, 8, 8, 1]);
    }

    #[test]
    fn from_parts_rejects_other_specs() {
        let a: ModelSpec = small(BottomOp::SizePreservingGvto, DownOp::StridedConv, UpOp::TransposedConv, SkipMode::Add, false).into();
        let mut b = small(BottomOp::SizePreservingGvto, DownOp::StridedConv, UpOp::TransposedConv, SkipMode::Add, false);
        b.depth = 2;
        b.down_ops.pop();
        b.up_ops.pop();
        b.blocks_per_level.pop();
        let p: ModelParams<f32> = build(&a, 0).unwrap();
        assert_eq!(Model::from_parts(b.into(), p).unwrap_err().name(), "SPEC_MISMATCH");
    }
}
