//! The registered gradient-check suite: every differentiable primitive, each
//! GVTO variant, the residual block and small end-to-end networks, checked
//! in f64 against central differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{grad_check, GradCheckOptions, GradCheckReport, Tape, Var};
use crate::error::{Error, Result};
use crate::gvto::{
    gvto_record, residual_record, ConvVars, GvtoParams, GvtoVariant, GvtoVars, NormVars, Normalizer,
    ResidualParams, ResidualVars,
};
use crate::model::{presets, BottomOp, DownOp, Model, ModelSpec, NetworkSpec, ProjectionModelSpec, SkipMode, UpOp};
use crate::nnops::{BatchNormConfig, BatchNormParams, ConvParams, Dims, NormMode};
use crate::tensor::Tensor;

type Runner = fn(&GradCheckOptions) -> Result<GradCheckReport>;

/// One named entry of the suite.
#[derive(Clone, Copy)]
pub struct Case {
    pub name: &'static str,
    run: Runner,
}

impl Case {
    pub fn run(&self, opts: &GradCheckOptions) -> Result<GradCheckReport> {
        (self.run)(opts)
    }
}

impl std::fmt::Debug for Case {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Case").field("name", &self.name).finish()
    }
}

const CASES: &[Case] = &[
    Case { name: "add", run: add },
    Case { name: "sub", run: sub },
    Case { name: "mul", run: mul },
    Case { name: "scale", run: scale },
    Case { name: "sum", run: sum },
    Case { name: "relu", run: relu },
    Case { name: "conv", run: conv },
    Case { name: "conv_strided", run: conv_strided },
    Case { name: "conv_2d", run: conv_2d },
    Case { name: "conv_transposed", run: conv_transposed },
    Case { name: "batch_norm_train", run: batch_norm_train },
    Case { name: "batch_norm_infer", run: batch_norm_infer },
    Case { name: "concat_channels", run: concat_channels },
    Case { name: "softmax_axis", run: softmax_axis },
    Case { name: "sum_axis", run: sum_axis },
    Case { name: "attention_key_count", run: attention_key_count },
    Case { name: "attention_query_count", run: attention_query_count },
    Case { name: "mse", run: mse },
    Case { name: "mae", run: mae },
    Case { name: "gvto_size_preserving", run: gvto_size_preserving },
    Case { name: "gvto_down_v1", run: gvto_down_v1 },
    Case { name: "gvto_down_v2", run: gvto_down_v2 },
    Case { name: "gvto_up_v1", run: gvto_up_v1 },
    Case { name: "gvto_up_v2", run: gvto_up_v2 },
    Case { name: "gvto_2d_down_v1", run: gvto_2d_down_v1 },
    Case { name: "residual_block", run: residual_block },
    Case { name: "gvtnet_depth2", run: gvtnet_depth2 },
    Case { name: "baseline_depth2", run: baseline_depth2 },
    Case { name: "projection_net", run: projection_net },
];

/// Every registered case in a fixed order.
pub fn cases() -> &'static [Case] {
    CASES
}

pub fn find(name: &str) -> Option<&'static Case> {
    CASES.iter().find(|c| c.name == name)
}

/// Run the named cases (all of them for `None`).
pub fn run_suite(only: Option<&str>, opts: &GradCheckOptions) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let selected: Vec<&Case> = match only {
        None => CASES.iter().collect(),
        Some(n) => vec![find(n).ok_or_else(|| Error::InvalidConfig(format!("no gradcheck case named {n:?}")))?],
    };
    selected.into_iter().map(|c| Ok((c.name, c.run(opts)?))).collect()
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// `sum(y * w)` with a fixed pseudo-random `w`, so no output coordinate
/// cancels against another.
fn weighted_sum(tape: &mut Tape<f64>, y: Var) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let w = random(&mut rng, tape.value(y).shape());
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn check<F>(params: Vec<Tensor<f64>>, opts: &GradCheckOptions, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    grad_check(&params, |tape, v| {
        let y = f(tape, v)?;
        weighted_sum(tape, y)
    }, opts)
}

fn rng() -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(17)
}

const X: [usize; 5] = [2, 2, 3, 3, 2];

fn add(o: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut r = rng();
    check(vec![random(&mut r, &X), random(&mut r, &X)], o, |t, v| t.add(v[0], v[1]))
}

fn sub(o: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut r = rng();
    check(vec![random(&mut r, &X), random(&mut r, &X)], o, |t, v| t.sub(v[0], v[1]))
}

fn mul(o: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut r = rng();
    check(vec![random(&mut r, &X), random(&mut r, &X)], o, |t, v| t.mul(v[0], v[1]))
}

fn scale(o: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut r = rng();
    check(vec![random(&mut r, &X)], o, |t, v| Ok(t.scale(v[0], -2.5)))
}

fn sum(o: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut r = rng();
    // The weighted sum of a scalar is itself a scaled sum.
    check(vec![random(&mut r, &X)], o, |t, v| Ok(t.sum(v[0])))
}

fn relu(o: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut r = rng();
    check(vec![random(&mut r, &X)], o, |t, v| Ok(t.relu(v[0])))
}

fn conv_case(
    o: &GradCheckOptions,
    x: &[usize],
    kernel: [usize; 5],
    stride: [usize; 3],
    transposed: bool,
) -> Result<GradCheckReport> {
    let mut r = rng();
    let params = vec![random(&mut r, x), random(&mut r, &kernel), random(&mut r, &[kernel[4]])];
    check(params, o, move |t, v| {
        if transposed {
            t.conv_transposed(v[0], v[1], Some(v[2]), stride)
        } else {
            t.conv(v[0], v[1], Some(v[2]), stride)
        }
    })
}

fn conv(o: &GradCheckOptions) -> Result<GradCheckReport> {
    conv_case(o, &[1, 3, 4, 4, 2], [3, 3, 3, 2, 3], [1, 1, 1], false)
}

fn conv_strided(o: &GradCheckOptions) -> Result<GradCheckReport> {
    conv_case(o, &[1, 4, 4, 4, 2], [3, 3, 3, 2, 3], [2, 2, 2], false)
}

fn conv_2d(o: &GradCheckOptions) -> Result<GradCheckReport> {
    conv_case(o, &[2, 1, 4, 6, 2], [1, 3, 3, 2, 2], [1, 2, 2], false)
}

fn conv_transposed(o: &GradCheckOptions) -> Result<GradCheckReport> {
    conv_case(o, &[1, 2, 2, 3, 3], [3, 3, 3, 3, 2], [2, 2, 2], true)
}

fn batch_norm_train(o: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut r = rng();
    let params = vec![random(&mut r, &X), random(&mut r, &[2]), random(&mut r, &[2])];
    check(params, o, |t, v| Ok(t.batch_norm_train(v[0], v[1], v[2], 1e-5)?.0))
}

fn batch_norm_infer(o: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut r = rng();
    let mut bn = BatchNormParams::<f64>::new(2, BatchNormConfig::default());
    bn.running_mean = random(&mut r, &[2]);
    bn.running_var = Tensor::new(vec![2], vec![0.7, 1.9])?;
    bn.initialized = true;
    let params = vec![random(&mut r, &X), random(&mut r, &[2]), random(&mut r, &[2])];
    check(params, o, move |t, v| t.batch_norm_infer(v[0], v[1], v[2], &bn))
}

fn concat_channels(o: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut r = rng();
    check(vec![random(&mut r, &X), random(&mut r, &[2, 2, 3, 3, 3])], o, |t, v| t.concat_channels(v[0], v[1]))
}

fn softmax_axis(o: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut r = rng();
    check(vec![random(&mut r, &[1, 4, 3, 2, 2])], o, |t, v| t.softmax_axis(v[0], 1))
}

fn sum_axis(o: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut r = rng();
    check(vec![random(&mut r, &[1, 4, 3, 2, 2])], o, |t, v| t.sum_axis(v[0], 1))
}

fn attention_case(o: &GradCheckOptions, normalizer: Normalizer) -> Result<GradCheckReport> {
    let mut r = rng();
    // Four query locations against eight keys, three channels.
    let params = vec![random(&mut r, &[1, 1, 2, 2, 3]), random(&mut r, &[1, 2, 2, 2, 3]), random(&mut r, &[1, 2, 2, 2, 3])];
    check(params, o, move |t, v| t.attention(v[0], v[1], v[2], normalizer))
}

fn attention_key_count(o: &GradCheckOptions) -> Result<GradCheckReport> {
    attention_case(o, Normalizer::KeyCount)
}

fn attention_query_count(o: &GradCheckOptions) -> Result<GradCheckReport> {
    attention_case(o, Normalizer::QueryCount)
}

fn mse(o: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut r = rng();
    let target = random(&mut r, &X);
    grad_check(&[random(&mut r, &X)], move |t, v| {
        let y = t.constant(target.clone());
        t.mse(v[0], y)
    }, o)
}

fn mae(o: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut r = rng();
    let target = random(&mut r, &X);
    grad_check(&[random(&mut r, &X)], move |t, v| {
        let y = t.constant(target.clone());
        t.mae(v[0], y)
    }, o)
}

/// Flatten conv weights into randomized leaves: kernel then bias.
fn push_conv(out: &mut Vec<Tensor<f64>>, p: &ConvParams<f64>, r: &mut ChaCha8Rng) {
    out.push(random(r, p.kernel.shape()));
    out.push(random(r, p.bias.shape()));
}

fn conv_vars(v: &[Var], at: &mut usize, p: &ConvParams<f64>, transposed: bool) -> ConvVars {
    let c = ConvVars { kernel: v[*at], bias: v[*at + 1], stride: p.stride, transposed };
    *at += 2;
    c
}

fn norm_vars<'a>(v: &[Var], at: &mut usize, p: &'a BatchNormParams<f64>, key: &str) -> NormVars<'a, f64> {
    let n = NormVars { key: key.into(), gamma: v[*at], beta: v[*at + 1], params: p, mode: NormMode::Train };
    *at += 2;
    n
}

fn push_norm(out: &mut Vec<Tensor<f64>>, p: &BatchNormParams<f64>, r: &mut ChaCha8Rng) {
    let jitter = random(r, p.gamma.shape()).scale(0.3);
    out.push(p.gamma.add(&jitter).expect("same shape"));
    out.push(random(r, p.beta.shape()));
}

fn gvto_case(o: &GradCheckOptions, variant: GvtoVariant, dims: Dims, x: &[usize]) -> Result<GradCheckReport> {
    let mut r = rng();
    let c = x[4];
    let p = GvtoParams::<f64>::random(&mut r, variant, c, dims, Some(BatchNormConfig::default()))?;
    let mut params = vec![random(&mut r, x)];
    for proj in [&p.q_proj, &p.k_proj, &p.v_proj] {
        push_conv(&mut params, proj, &mut r);
    }
    if let Some(rp) = &p.residual_proj {
        push_conv(&mut params, rp, &mut r);
    }
    let bn = p.norm.clone().expect("built with batch norm");
    push_norm(&mut params, &bn, &mut r);
    let up = variant.is_up();
    check(params, o, |t, v| {
        let mut at = 1;
        let q_proj = conv_vars(v, &mut at, &p.q_proj, up);
        let k_proj = conv_vars(v, &mut at, &p.k_proj, false);
        let v_proj = conv_vars(v, &mut at, &p.v_proj, false);
        let residual_proj = p.residual_proj.as_ref().map(|rp| conv_vars(v, &mut at, rp, up));
        let norm = Some(norm_vars(v, &mut at, &bn, "norm"));
        let vars = GvtoVars { variant, normalizer: p.normalizer, dims, norm, q_proj, k_proj, v_proj, residual_proj };
        gvto_record(t, v[0], &vars, &mut Vec::new())
    })
}

fn gvto_size_preserving(o: &GradCheckOptions) -> Result<GradCheckReport> {
    gvto_case(o, GvtoVariant::SizePreserving, Dims::Three, &[2, 2, 2, 3, 2])
}

fn gvto_down_v1(o: &GradCheckOptions) -> Result<GradCheckReport> {
    gvto_case(o, GvtoVariant::DownV1, Dims::Three, &[2, 2, 4, 4, 2])
}

fn gvto_down_v2(o: &GradCheckOptions) -> Result<GradCheckReport> {
    gvto_case(o, GvtoVariant::DownV2, Dims::Three, &[2, 2, 4, 4, 2])
}

fn gvto_up_v1(o: &GradCheckOptions) -> Result<GradCheckReport> {
    gvto_case(o, GvtoVariant::UpV1, Dims::Three, &[2, 1, 2, 2, 4])
}

fn gvto_up_v2(o: &GradCheckOptions) -> Result<GradCheckReport> {
    gvto_case(o, GvtoVariant::UpV2, Dims::Three, &[2, 1, 2, 2, 4])
}

fn gvto_2d_down_v1(o: &GradCheckOptions) -> Result<GradCheckReport> {
    gvto_case(o, GvtoVariant::DownV1, Dims::Two, &[2, 1, 4, 4, 2])
}

fn residual_block(o: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut r = rng();
    let p = ResidualParams::<f64>::random(&mut r, 2, Dims::Three, Some(BatchNormConfig::default()));
    let (n1, n2) = (p.norm1.clone().expect("norm"), p.norm2.clone().expect("norm"));
    let mut params = vec![random(&mut r, &[2, 2, 3, 3, 2])];
    push_norm(&mut params, &n1, &mut r);
    push_conv(&mut params, &p.conv1, &mut r);
    push_norm(&mut params, &n2, &mut r);
    push_conv(&mut params, &p.conv2, &mut r);
    check(params, o, |t, v| {
        let mut at = 1;
        let norm1 = Some(norm_vars(v, &mut at, &n1, "norm1"));
        let conv1 = conv_vars(v, &mut at, &p.conv1, false);
        let norm2 = Some(norm_vars(v, &mut at, &n2, "norm2"));
        let conv2 = conv_vars(v, &mut at, &p.conv2, false);
        residual_record(t, v[0], &ResidualVars { norm1, conv1, norm2, conv2 }, &mut Vec::new())
    })
}

fn model_case(o: &GradCheckOptions, spec: ModelSpec, x: &[usize]) -> Result<GradCheckReport> {
    let model = Model::<f64>::build(spec, 3)?;
    let mut r = rng();
    let mut params = vec![random(&mut r, x)];
    for (_, t) in model.params.trainable() {
        let jitter = random(&mut r, t.shape()).scale(0.05);
        params.push(t.add(&jitter)?);
    }
    check(params, o, |t, v| Ok(model.record_with(t, v[0], &v[1..], NormMode::Train)?.output))
}

/// Depth-2 GVTNet without batch norm on an 8x8x4 single-channel input.
pub fn tiny_gvtnet() -> NetworkSpec {
    NetworkSpec {
        depth: 2,
        initial_features: 2,
        skip_mode: SkipMode::Add,
        bottom_op: BottomOp::SizePreservingGvto,
        down_ops: vec![DownOp::GvtoDownV1],
        up_ops: vec![UpOp::GvtoUpV2],
        blocks_per_level: vec![1],
        batch_norm: None,
        ..presets::label_free_gvtnet()
    }
}

fn gvtnet_depth2(o: &GradCheckOptions) -> Result<GradCheckReport> {
    model_case(o, tiny_gvtnet().into(), &[1, 4, 8, 8, 1])
}

fn baseline_depth2(o: &GradCheckOptions) -> Result<GradCheckReport> {
    let spec = NetworkSpec {
        skip_mode: SkipMode::Concat,
        bottom_op: BottomOp::ResidualBlock,
        down_ops: vec![DownOp::StridedConv],
        up_ops: vec![UpOp::TransposedConv],
        ..tiny_gvtnet()
    };
    model_case(o, spec.into(), &[1, 4, 8, 8, 1])
}

/// Two-stage projection model with a 2-D depth-2 second stage.
pub fn tiny_projection() -> ProjectionModelSpec {
    let mut spec = presets::projection();
    spec.stage1.features = 2;
    spec.stage2 = NetworkSpec { dims: Dims::Two, ..tiny_gvtnet() };
    spec
}

fn projection_net(o: &GradCheckOptions) -> Result<GradCheckReport> {
    model_case(o, ModelSpec::Projection(tiny_projection()), &[1, 4, 4, 4, 1])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut names: Vec<_> = cases().iter().map(|c| c.name).collect();
        names.sort_unstable();
        names.dedup();
        assert_eq!(names.len(), cases().len());
        assert!(find("gvto_up_v2").is_some());
        assert_eq!(run_suite(Some("nope"), &GradCheckOptions::default()).unwrap_err().name(), "INVALID_CONFIG");
    }

    #[test]
    fn primitives_pass() {
        let opts = GradCheckOptions::default();
        for c in &cases()[..19] {
            let rep = c.run(&opts).unwrap();
            assert!(rep.pass, "{}: {:?}", c.name, rep);
            assert!(rep.checked > 0);
        }
    }

    #[test]
    fn a_wrong_gradient_is_caught() {
        // d/dx sum(x^2) is 2x; the supplied gradient is shifted by 0.5.
        let mut r = rng();
        let x = random(&mut r, &[6]);
        let rep = crate::autograd::finite_difference_check(
            &[x.clone()],
            &[x.map(|v| 2.0 * v + 0.5)],
            |p| Ok((p[0].data().iter().map(|v| v * v).sum(), 0)),
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(!rep.pass);
    }
}
