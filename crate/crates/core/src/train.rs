//! Losses, Adam with step decay, registered patch sampling, the training
//! loop and checkpoints.

use std::fs;
use std::io::{BufReader, Read};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::data::{decode_tensor, encode_tensor, PairStore};
use crate::error::{shape_err, Error, Result};
use crate::model::{Model, ModelParams, ModelSpec};
use crate::nnops::NormMode;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Mse,
    Mae,
}

pub fn loss_mse<T: Element>(y: &Tensor<T>, y_hat: &Tensor<T>) -> Result<f64> {
    y.check_same_shape(y_hat)?;
    Ok(y.data().iter().zip(y_hat.data()).map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2)).sum::<f64>()
        / y.len() as f64)
}

pub fn loss_mae<T: Element>(y: &Tensor<T>, y_hat: &Tensor<T>) -> Result<f64> {
    y.check_same_shape(y_hat)?;
    Ok(y.data().iter().zip(y_hat.data()).map(|(a, b)| (a.as_f64() - b.as_f64()).abs()).sum::<f64>()
        / y.len() as f64)
}

/// Multiply the learning rate by `factor` every `every` iterations.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepDecay {
    pub factor: f64,
    pub every: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub lr: f64,
    #[serde(default)]
    pub decay: Option<StepDecay>,
    pub batch_size: usize,
    /// Training patch extents `[d, h, w]`.
    pub patch: [usize; 3],
    pub iterations: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "beta1")]
    pub beta1: f64,
    #[serde(default = "beta2")]
    pub beta2: f64,
    #[serde(default = "adam_eps")]
    pub epsilon: f64,
    /// Checkpoint cadence in iterations.
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
}

fn beta1() -> f64 {
    0.9
}

fn beta2() -> f64 {
    0.999
}

fn adam_eps() -> f64 {
    1e-8
}

impl TrainConfig {
    pub fn new(loss: LossKind, lr: f64, batch_size: usize, patch: [usize; 3], iterations: usize) -> Self {
        TrainConfig {
            loss,
            lr,
            decay: None,
            batch_size,
            patch,
            iterations,
            seed: 0,
            beta1: beta1(),
            beta2: beta2(),
            epsilon: adam_eps(),
            checkpoint_every: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.lr));
        }
        if let Some(d) = self.decay {
            if !(d.factor > 0.0 && d.factor <= 1.0) || d.every == 0 {
                return bad(format!("decay {d:?} needs 0 < factor <= 1 and every >= 1"));
            }
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if self.patch.contains(&0) {
            return bad(format!("patch {:?} has a zero extent", self.patch));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return bad("adam moments need 0 <= beta < 1 and epsilon > 0".into());
        }
        if self.checkpoint_every == Some(0) {
            return bad("checkpoint cadence must be at least 1".into());
        }
        Ok(())
    }

    /// `lr * factor^floor(iter / every)`.
    pub fn effective_lr(&self, iter: usize) -> f64 {
        match self.decay {
            None => self.lr,
            Some(d) => self.lr * d.factor.powi((iter / d.every) as i32),
        }
    }
}

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T = f32> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Element> AdamState<T> {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<T>>) -> Self {
        let m: Vec<Tensor<T>> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        AdamState { v: m.clone(), m, t: 0 }
    }
}

/// One bias-corrected Adam update at iteration `iter` (1-based).
pub fn adam_step<'a, T: Element + 'a>(
    params: impl IntoIterator<Item = &'a mut Tensor<T>>,
    grads: &[Tensor<T>],
    state: &mut AdamState<T>,
    cfg: &TrainConfig,
    iter: usize,
) -> Result<()> {
    if iter == 0 {
        return Err(Error::InvalidConfig("adam iterations are 1-based".into()));
    }
    let params: Vec<&mut Tensor<T>> = params.into_iter().collect();
    if params.len() != grads.len() || params.len() != state.m.len() {
        return shape_err(format!(
            "{} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        ));
    }
    for (i, p) in params.iter().enumerate() {
        if p.shape() != grads[i].shape() || p.shape() != state.m[i].shape() {
            return shape_err(format!("parameter {i}: {:?} vs gradient {:?}", p.shape(), grads[i].shape()));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let lr = cfg.effective_lr(iter);
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, p) in params.into_iter().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (j, w) in p.data_mut().iter_mut().enumerate() {
            let gj = g[j].as_f64();
            let mj = b1 * m[j].as_f64() + (1.0 - b1) * gj;
            let vj = b2 * v[j].as_f64() + (1.0 - b2) * gj * gj;
            m[j] = T::from_f64_lossy(mj);
            v[j] = T::from_f64_lossy(vj);
            let step = lr * (mj / c1) / ((vj / c2).sqrt() + cfg.epsilon);
            *w = T::from_f64_lossy(w.as_f64() - step);
        }
    }
    Ok(())
}

/// A minibatch of registered crops.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `[n, d, h, w, c]`.
    pub input: Tensor<f32>,
    pub target: Tensor<f32>,
    pub pair_indices: Vec<usize>,
    /// Crop origin `[z, y, x]` shared by input and target.
    pub corners: Vec<[usize; 3]>,
}

fn crop(t: &Tensor<f32>, corner: [usize; 3], extent: [usize; 3], out: &mut Vec<f32>) {
    let s = t.shape();
    let c = s[3];
    for z in corner[0]..corner[0] + extent[0] {
        for y in corner[1]..corner[1] + extent[1] {
            let row = ((z * s[1] + y) * s[2] + corner[2]) * c;
            out.extend_from_slice(&t.data()[row..row + extent[2] * c]);
        }
    }
}

/// Draw `batch_size` crops with uniformly random pairs and corners. Planar
/// targets (depth 1 against a deeper input) are cropped in-plane only.
pub fn sample_patches<R: Rng + ?Sized>(
    store: &PairStore,
    patch: [usize; 3],
    batch_size: usize,
    rng: &mut R,
) -> Result<Batch> {
    if store.is_empty() {
        return Err(Error::EmptyInput);
    }
    for p in &store.pairs {
        let s = p.input.shape();
        if s.len() != 4 || (0..3).any(|a| patch[a] > s[a]) {
            return Err(Error::PatchTooLarge(format!("patch {patch:?} exceeds {} of shape {s:?}", p.id)));
        }
        let ts = p.target.shape();
        let planar = ts[0] == 1 && s[0] != 1;
        if ts.len() != 4 || ts[1..3] != s[1..3] || (!planar && ts[0] != s[0]) {
            return shape_err(format!("{}: input {s:?} and target {ts:?} are not registered", p.id));
        }
    }
    let first = &store.pairs[0];
    let planar = first.target.shape()[0] == 1 && first.input.shape()[0] != 1;
    let target_patch = if planar { [1, patch[1], patch[2]] } else { patch };
    let (c_in, c_out) = (first.input.shape()[3], first.target.shape()[3]);
    let mut input = Vec::with_capacity(batch_size * patch.iter().product::<usize>() * c_in);
    let mut target = Vec::with_capacity(batch_size * target_patch.iter().product::<usize>() * c_out);
    let mut pair_indices = Vec::with_capacity(batch_size);
    let mut corners = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let i = rng.random_range(0..store.len());
        let p = &store.pairs[i];
        let s = p.input.shape();
        let corner: [usize; 3] = std::array::from_fn(|a| rng.random_range(0..=s[a] - patch[a]));
        crop(&p.input, corner, patch, &mut input);
        let tc = if planar { [0, corner[1], corner[2]] } else { corner };
        crop(&p.target, tc, target_patch, &mut target);
        pair_indices.push(i);
        corners.push(corner);
    }
    let shape = |e: [usize; 3], c| vec![batch_size, e[0], e[1], e[2], c];
    Ok(Batch {
        input: Tensor::new(shape(patch, c_in), input)?,
        target: Tensor::new(shape(target_patch, c_out), target)?,
        pair_indices,
        corners,
    })
}

/// Progress report passed to the per-iteration callback.
pub struct Step<'a> {
    pub iteration: usize,
    pub loss: f64,
    pub model: &'a Model<f32>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model<f32>,
    /// Minibatch loss per iteration.
    pub losses: Vec<f64>,
}

/// Sample, forward, backpropagate and update for `cfg.iterations` steps.
pub fn train_loop<F>(mut model: Model<f32>, cfg: &TrainConfig, store: &PairStore, mut on_step: F) -> Result<TrainOutcome>
where
    F: FnMut(&Step<'_>) -> Result<()>,
{
    cfg.validate()?;
    let div = model.spec.divisor();
    for a in 0..3 {
        if cfg.patch[a] % div[a] != 0 {
            return Err(Error::IndivisibleExtent { axis: a, extent: cfg.patch[a], divisor: div[a] });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(model.params.trainable().map(|(_, t)| t));
    let mut losses = Vec::with_capacity(cfg.iterations);
    for iteration in 1..=cfg.iterations {
        let batch = sample_patches(store, cfg.patch, cfg.batch_size, &mut rng)?;
        let mut tape = Tape::new();
        let x = tape.constant(batch.input);
        let rec = model.record(&mut tape, x, NormMode::Train)?;
        let y = tape.constant(batch.target);
        let loss = match cfg.loss {
            LossKind::Mse => tape.mse(rec.output, y)?,
            LossKind::Mae => tape.mae(rec.output, y)?,
        };
        let value = tape.value(loss).data()[0] as f64;
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { iteration });
        }
        let mut grads = tape.backward(loss)?;
        let grads: Vec<Tensor<f32>> = rec.params.values().map(|&v| grads.take(v)).collect();
        drop(tape);
        adam_step(model.params.trainable_mut().map(|(_, t)| t), &grads, &mut adam, cfg, iteration)?;
        model.apply_stats(&rec.stats)?;
        losses.push(value);
        on_step(&Step { iteration, loss: value, model: &model })?;
    }
    Ok(TrainOutcome { model, losses })
}

// ---------------------------------------------------------------------------
// Checkpoints

#[derive(Clone, Debug, Serialize, Deserialize)]
struct RecordMeta {
    name: String,
    trainable: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    spec: ModelSpec,
    config: serde_json::Value,
    iteration: usize,
    fingerprint: String,
    records: Vec<RecordMeta>,
}

/// A loaded checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T = f32> {
    pub model: Model<T>,
    /// Whatever configuration the writer attached.
    pub config: serde_json::Value,
    pub iteration: usize,
}

/// Layout: `u64` little-endian header length, JSON header, then one GVTT
/// record per named tensor in header order.
pub fn checkpoint_encode<T: Element>(model: &Model<T>, config: &serde_json::Value, iteration: usize) -> Result<Vec<u8>> {
    let header = Header {
        spec: model.spec.clone(),
        config: config.clone(),
        iteration,
        fingerprint: model.spec.fingerprint(),
        records: model.params.iter().map(|(k, e)| RecordMeta { name: k.to_string(), trainable: e.trainable }).collect(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(8 + json.len() + 4 * model.params.trainable_scalars());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, e) in model.params.iter() {
        encode_tensor(&e.tensor, &mut out)?;
    }
    Ok(out)
}

pub fn checkpoint_decode<T: Element, R: Read>(r: &mut R, expected: Option<&ModelSpec>) -> Result<Checkpoint<T>> {
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    if len > 1 << 30 {
        return Err(Error::Io(format!("implausible header length {len}")));
    }
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| Error::Io(format!("checkpoint header: {e}")))?;
    if header.spec.fingerprint() != header.fingerprint {
        return Err(Error::SpecMismatch("header fingerprint does not match its spec".into()));
    }
    if let Some(spec) = expected {
        if spec.fingerprint() != header.fingerprint {
            return Err(Error::SpecMismatch(format!(
                "checkpoint spec {} differs from requested {}",
                &header.fingerprint[..12],
                &spec.fingerprint()[..12]
            )));
        }
    }
    let mut params = ModelParams::new();
    for meta in header.records {
        let t = decode_tensor(r)?.into_typed::<T>()?;
        params.insert(meta.name, t, meta.trainable);
    }
    let model = Model::from_parts(header.spec, params)?;
    Ok(Checkpoint { model, config: header.config, iteration: header.iteration })
}

pub fn checkpoint_save<T: Element>(
    model: &Model<T>,
    config: &serde_json::Value,
    iteration: usize,
    path: impl AsRef<Path>,
) -> Result<()> {
    fs::write(path, checkpoint_encode(model, config, iteration)?)?;
    Ok(())
}

pub fn checkpoint_load<T: Element>(path: impl AsRef<Path>, expected: Option<&ModelSpec>) -> Result<Checkpoint<T>> {
    let mut f = BufReader::new(fs::File::open(path)?);
    checkpoint_decode(&mut f, expected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, Noise, SyntheticConfig, Task};
    use crate::model::{presets, NetworkSpec};

    fn cfg() -> TrainConfig {
        TrainConfig::new(LossKind::Mse, 1e-3, 2, [4, 8, 8], 3)
    }

    #[test]
    fn loss_examples() {
        let y = Tensor::new(vec![2], vec![0.0f64, 0.0]).unwrap();
        let p = Tensor::new(vec![2], vec![1.0, 3.0]).unwrap();
        assert_eq!(loss_mse(&y, &p).unwrap(), 5.0);
        assert_eq!(loss_mae(&y, &p).unwrap(), 2.0);
        assert_eq!(loss_mse(&y, &y).unwrap(), 0.0);
        assert_eq!(loss_mae(&p, &p).unwrap(), 0.0);
        assert!(loss_mse(&y, &Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn zero_gradients_leave_params() {
        let mut p = vec![Tensor::<f32>::from_fn(&[3], |i| i as f32)];
        let orig = p.clone();
        let mut st = AdamState::new(&p);
        adam_step(p.iter_mut(), &[Tensor::zeros(&[3])], &mut st, &cfg(), 1).unwrap();
        assert_eq!(p, orig);
        assert_eq!(st.t, 1);
        assert!(adam_step(p.iter_mut(), &[Tensor::zeros(&[4])], &mut st, &cfg(), 2).is_err());
    }

    #[test]
    fn adam_descends_a_quadratic() {
        // Independent scalar simulation of bias-corrected Adam on x^2.
        let mut c = cfg();
        c.lr = 0.1;
        let mut p = vec![Tensor::<f64>::full(&[1], 1.0)];
        let mut st = AdamState::new(&p);
        let (mut x, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        let mut prev = 1.0f64;
        // Steps of about lr each: |x| shrinks until the iterate crosses zero at step 12.
        for t in 1..=20 {
            let g = Tensor::full(&[1], 2.0 * p[0].data()[0]);
            adam_step(p.iter_mut(), &[g], &mut st, &c, t).unwrap();
            let gs = 2.0 * x;
            m = 0.9 * m + 0.1 * gs;
            v = 0.999 * v + 0.001 * gs * gs;
            x -= 0.1 * (m / (1.0 - 0.9f64.powi(t as i32))) / ((v / (1.0 - 0.999f64.powi(t as i32))).sqrt() + 1e-8);
            assert!((p[0].data()[0] - x).abs() < 1e-12);
            if t <= 11 {
                assert!(x.abs() < prev, "step {t}");
            }
            prev = x.abs();
        }
    }

    #[test]
    fn step_decay() {
        let mut c = cfg();
        c.decay = Some(StepDecay { factor: 0.7, every: 10_000 });
        assert!((c.effective_lr(25_000) - 0.49 * c.lr).abs() < 1e-15);
        let mut last = f64::INFINITY;
        for it in (0..100_000).step_by(997) {
            assert!(c.effective_lr(it) <= last);
            last = c.effective_lr(it);
        }
        c.decay = Some(StepDecay { factor: 1.5, every: 10 });
        assert_eq!(c.validate().unwrap_err().name(), "INVALID_CONFIG");
    }

    fn store() -> PairStore {
        gen_synthetic(&SyntheticConfig::new(Task::Denoise, [4, 8, 8]), 3).unwrap()
    }

    #[test]
    fn sampling_is_registered_and_seeded() {
        let s = store();
        let a = sample_patches(&s, [2, 4, 4], 5, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = sample_patches(&s, [2, 4, 4], 5, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a, b);
        for (k, (&i, c)) in a.pair_indices.iter().zip(&a.corners).enumerate() {
            let p = &s.pairs[i];
            let off = k * 32;
            assert_eq!(a.input.data()[off], p.input.get(&[c[0], c[1], c[2], 0]));
            assert_eq!(a.target.data()[off + 31], p.target.get(&[c[0] + 1, c[1] + 3, c[2] + 3, 0]));
        }
        let full = sample_patches(&s, [4, 8, 8], 2, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(&full.input.data()[..256], s.pairs[full.pair_indices[0]].input.data());
        let err = sample_patches(&s, [8, 8, 8], 1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert_eq!(err.name(), "PATCH_TOO_LARGE");
    }

    #[test]
    fn planar_targets_crop_in_plane() {
        let s = gen_synthetic(&SyntheticConfig::new(Task::Project, [6, 8, 8]), 2).unwrap();
        let b = sample_patches(&s, [6, 4, 4], 3, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(b.target.shape(), &[3, 1, 4, 4, 1]);
        let (i, c) = (b.pair_indices[0], b.corners[0]);
        assert_eq!(b.target.data()[0], s.pairs[i].target.get(&[0, c[1], c[2], 0]));
    }

    fn tiny_spec() -> ModelSpec {
        NetworkSpec { depth: 2, initial_features: 2, blocks_per_level: vec![0], down_ops: vec![presets::denoise_gvtnet().down_ops[0]], up_ops: vec![presets::denoise_gvtnet().up_ops[0]], ..presets::denoise_gvtnet() }.into()
    }

    #[test]
    fn zero_iterations_keep_build_params() {
        let m = Model::build(tiny_spec(), 4).unwrap();
        let mut c = cfg();
        c.iterations = 0;
        let out = train_loop(m.clone(), &c, &store(), |_| Ok(())).unwrap();
        assert_eq!(out.model, m);
        assert!(out.losses.is_empty());
    }

    #[test]
    fn loop_is_reproducible_and_traced() {
        let m = Model::build(tiny_spec(), 4).unwrap();
        let c = cfg();
        let mut seen = 0;
        let a = train_loop(m.clone(), &c, &store(), |s| {
            seen = s.iteration;
            Ok(())
        })
        .unwrap();
        let b = train_loop(m, &c, &store(), |_| Ok(())).unwrap();
        assert_eq!(a.losses.len(), 3);
        assert_eq!(seen, 3);
        assert_eq!(a.losses, b.losses);
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn nonfinite_loss_aborts() {
        let m = Model::build(tiny_spec(), 4).unwrap();
        let mut s = store();
        s.pairs.iter_mut().for_each(|p| p.target.data_mut()[0] = f32::NAN);
        let mut c = cfg();
        c.batch_size = 8;
        c.patch = [4, 8, 8];
        let err = train_loop(m, &c, &s, |_| Ok(())).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { iteration: 1 }));
    }

    #[test]
    fn checkpoint_round_trip_and_mismatch() {
        let spec: ModelSpec = NetworkSpec { initial_features: 2, ..presets::label_free_gvtnet() }.into();
        let mut m = Model::<f32>::build(spec, 1).unwrap();
        m.params.get_mut("output.bias").unwrap().data_mut()[0] = 0.1234567;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let cfg_json = serde_json::json!({"note": 1});
        checkpoint_save(&m, &cfg_json, 7, &path).unwrap();
        let back: Checkpoint<f32> = checkpoint_load(&path, Some(&m.spec)).unwrap();
        assert_eq!(back.model, m);
        assert_eq!(back.iteration, 7);
        assert_eq!(back.config, cfg_json);

        let bytes = fs::read(&path).unwrap();
        let short = dir.path().join("short.ckpt");
        fs::write(&short, &bytes[..bytes.len() - 3]).unwrap();
        assert_eq!(checkpoint_load::<f32>(&short, None).unwrap_err().name(), "IO_ERROR");

        let ModelSpec::Network(mut other) = m.spec.clone() else { unreachable!() };
        other.depth = 3;
        other.down_ops.pop();
        other.up_ops.pop();
        other.blocks_per_level.pop();
        assert_eq!(checkpoint_load::<f32>(&path, Some(&other.into())).unwrap_err().name(), "SPEC_MISMATCH");
        assert_eq!(checkpoint_load::<f32>(dir.path().join("missing"), None).unwrap_err().name(), "IO_ERROR");
    }

    #[test]
    fn noise_free_pairs_train_towards_identity() {
        let mut dc = SyntheticConfig::new(Task::Denoise, [4, 8, 8]);
        dc.noise = Some(Noise { sigma: 0.0, lambda: None });
        let s = gen_synthetic(&dc, 2).unwrap();
        let m = Model::build(tiny_spec(), 0).unwrap();
        let mut c = cfg();
        c.iterations = 60;
        c.lr = 1e-2;
        let out = train_loop(m, &c, &s, |_| Ok(())).unwrap();
        assert!(out.losses.iter().all(|l| l.is_finite()));
        assert!(out.losses[59] < out.losses[0]);
    }
}
