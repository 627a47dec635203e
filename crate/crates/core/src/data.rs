//! Synthetic registered pairs, the GVTT tensor container, dataset
//! manifests and tiled whole-image inference.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec};
use crate::tensor::{DType, Element, Tensor};

// ---------------------------------------------------------------------------
// GVTT container

pub const MAGIC: [u8; 4] = *b"GVTT";
pub const VERSION: u8 = 1;

fn check_extents(shape: &[usize]) -> Result<()> {
    if shape.contains(&0) {
        return Err(Error::InvalidConfig(format!("tensor shape {shape:?} has a zero extent")));
    }
    if shape.len() > u8::MAX as usize {
        return Err(Error::InvalidConfig(format!("{} axes exceed the container limit", shape.len())));
    }
    Ok(())
}

/// Serialize one tensor: header, little-endian `u64` extents, little-endian
/// row-major payload.
pub fn encode_tensor<T: Element>(t: &Tensor<T>, out: &mut Vec<u8>) -> Result<()> {
    check_extents(t.shape())?;
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&[VERSION, T::DTYPE.code(), t.ndim() as u8, 0]);
    for &e in t.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    out.reserve(t.len() * T::DTYPE.size());
    for &v in t.data() {
        v.write_le(out);
    }
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, n: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

/// A decoded tensor of whichever element type the file declared.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    /// Extract as `T`, failing on a dtype mismatch.
    pub fn into_typed<T: Element>(self) -> Result<Tensor<T>> {
        let found = self.dtype();
        let cast = match self {
            AnyTensor::F32(t) if T::DTYPE == DType::F32 => t.cast(),
            AnyTensor::F64(t) if T::DTYPE == DType::F64 => t.cast(),
            _ => return Err(Error::InvalidConfig(format!("expected {:?} tensor, found {found:?}", T::DTYPE))),
        };
        Ok(cast)
    }

    /// Convert to `T` regardless of the stored type.
    pub fn to_element<T: Element>(&self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

fn decode_payload<T: Element, R: Read>(r: &mut R, shape: Vec<usize>) -> Result<Tensor<T>> {
    let n: usize = shape.iter().product();
    let size = T::DTYPE.size();
    let bytes = read_exact(r, n * size)?;
    let data = bytes.chunks_exact(size).map(T::read_le).collect();
    Tensor::new(shape, data)
}

pub fn decode_tensor<R: Read>(r: &mut R) -> Result<AnyTensor> {
    let head = read_exact(r, 8)?;
    let found: [u8; 4] = head[..4].try_into().expect("4 bytes");
    if found != MAGIC {
        return Err(Error::BadMagic { expected: MAGIC, found });
    }
    if head[4] != VERSION {
        return Err(Error::UnsupportedVersion(head[4]));
    }
    let dtype = DType::from_code(head[5]).ok_or_else(|| Error::Io(format!("unknown dtype code {}", head[5])))?;
    let ndim = head[6] as usize;
    let extents = read_exact(r, 8 * ndim)?;
    let shape: Vec<usize> = extents
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")) as usize)
        .collect();
    check_extents(&shape)?;
    Ok(match dtype {
        DType::F32 => AnyTensor::F32(decode_payload(r, shape)?),
        DType::F64 => AnyTensor::F64(decode_payload(r, shape)?),
    })
}

pub fn tensor_write<T: Element>(t: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    encode_tensor(t, &mut buf)?;
    let mut f = BufWriter::new(fs::File::create(path)?);
    f.write_all(&buf)?;
    f.flush()?;
    Ok(())
}

pub fn tensor_read(path: impl AsRef<Path>) -> Result<AnyTensor> {
    let mut f = BufReader::new(fs::File::open(path)?);
    decode_tensor(&mut f)
}

// ---------------------------------------------------------------------------
// Synthetic data

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Denoise,
    SignalPredict,
    Project,
}

/// Degradation level; C1 has the highest input SNR.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Difficulty {
    C1,
    #[default]
    C2,
    C3,
}

impl Difficulty {
    /// Default `(gaussian sigma, poisson lambda)`.
    pub fn noise(self) -> Noise {
        match self {
            Difficulty::C1 => Noise { sigma: 0.03, lambda: Some(60.0) },
            Difficulty::C2 => Noise { sigma: 0.08, lambda: Some(15.0) },
            Difficulty::C3 => Noise { sigma: 0.2, lambda: Some(4.0) },
        }
    }
}

/// Shot noise `Poisson(lambda * x) / lambda` followed by additive
/// Gaussian noise. `lambda: None` disables the shot-noise stage.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Noise {
    pub sigma: f64,
    pub lambda: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub task: Task,
    /// Volume extents `[d, h, w]`.
    pub shape: [usize; 3],
    #[serde(default = "default_objects")]
    pub objects: usize,
    /// Object radius range in voxels.
    #[serde(default = "default_radius")]
    pub radius: [f64; 2],
    /// Overrides the difficulty's noise model.
    #[serde(default)]
    pub noise: Option<Noise>,
    #[serde(default = "default_blur")]
    pub blur_sigma: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub difficulty: Difficulty,
}

fn default_objects() -> usize {
    12
}

fn default_radius() -> [f64; 2] {
    [1.5, 4.0]
}

fn default_blur() -> f64 {
    1.0
}

impl SyntheticConfig {
    pub fn new(task: Task, shape: [usize; 3]) -> Self {
        SyntheticConfig {
            task,
            shape,
            objects: default_objects(),
            radius: default_radius(),
            noise: None,
            blur_sigma: default_blur(),
            seed: 0,
            difficulty: Difficulty::default(),
        }
    }

    pub fn noise_model(&self) -> Noise {
        self.noise.unwrap_or_else(|| self.difficulty.noise())
    }

    pub fn validate(&self) -> Result<()> {
        if self.shape.contains(&0) {
            return Err(Error::InvalidConfig(format!("volume shape {:?} has a zero extent", self.shape)));
        }
        let n = self.noise_model();
        if !(n.sigma >= 0.0) || n.lambda.is_some_and(|l| !(l > 0.0)) {
            return Err(Error::InvalidConfig(format!("noise parameters must be non-negative, got {n:?}")));
        }
        if !(self.blur_sigma >= 0.0) {
            return Err(Error::InvalidConfig(format!("blur sigma {} must be non-negative", self.blur_sigma)));
        }
        if !(self.radius[0] > 0.0 && self.radius[1] >= self.radius[0]) {
            return Err(Error::InvalidConfig(format!("radius range {:?} is invalid", self.radius)));
        }
        if self.task == Task::Project && self.shape[0] < 3 {
            return Err(Error::InvalidConfig("projection volumes need at least 3 slices".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Pair {
    pub id: String,
    /// `[d, h, w, 1]`.
    pub input: Tensor<f32>,
    /// `[d, h, w, 1]`, or `[1, h, w, 1]` for projection.
    pub target: Tensor<f32>,
    pub difficulty: Difficulty,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairStore {
    pub task: Task,
    pub pairs: Vec<Pair>,
}

impl PairStore {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>, &Tensor<f32>)> {
        self.pairs.iter().map(|p| (p.id.as_str(), &p.input, &p.target))
    }
}

/// Additive rendering of balls, tubes and sheets in `[d, h, w]`, clipped to
/// `[0, 1]`. Edges are smoothed over one voxel.
fn render_objects(rng: &mut ChaCha8Rng, shape: [usize; 3], count: usize, radius: [f64; 2]) -> Vec<f64> {
    let [d, h, w] = shape;
    let mut vol = vec![0.0; d * h * w];
    let ext = [d as f64, h as f64, w as f64];
    let point = |rng: &mut ChaCha8Rng| -> [f64; 3] { std::array::from_fn(|a| rng.random_range(0.0..ext[a])) };
    for _ in 0..count {
        let r = rng.random_range(radius[0]..=radius[1]);
        let intensity = rng.random_range(0.4..1.0);
        let kind = rng.random_range(0..3u8);
        let c = point(rng);
        // Tubes run from c to e; sheets are slabs through c with normal nrm.
        let e = point(rng);
        let nrm = {
            let v: [f64; 3] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            let len = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
            v.map(|x| x / len)
        };
        let (thick, reach) = match kind {
            0 => (r, r),
            1 => (r * 0.5, f64::INFINITY),
            _ => (0.6, r * 3.0),
        };
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let p = [z as f64 + 0.5, y as f64 + 0.5, x as f64 + 0.5];
                    let dist = match kind {
                        0 => dist(&p, &c),
                        1 => segment_dist(&p, &c, &e),
                        _ => {
                            let off: f64 = (0..3).map(|a| (p[a] - c[a]) * nrm[a]).sum();
                            if dist(&p, &c) > reach {
                                f64::INFINITY
                            } else {
                                off.abs()
                            }
                        }
                    };
                    let cover = (thick - dist + 0.5).clamp(0.0, 1.0);
                    vol[(z * h + y) * w + x] += intensity * cover;
                }
            }
        }
    }
    vol.iter_mut().for_each(|v| *v = v.min(1.0));
    vol
}

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>().sqrt()
}

fn segment_dist(p: &[f64; 3], a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let ab: [f64; 3] = std::array::from_fn(|i| b[i] - a[i]);
    let len2: f64 = ab.iter().map(|x| x * x).sum();
    let t = if len2 == 0.0 { 0.0 } else { ((0..3).map(|i| (p[i] - a[i]) * ab[i]).sum::<f64>() / len2).clamp(0.0, 1.0) };
    let q: [f64; 3] = std::array::from_fn(|i| a[i] + t * ab[i]);
    dist(p, &q)
}

/// Separable Gaussian blur with zero padding, truncated at 3 sigma.
fn blur(vol: &[f64], shape: [usize; 3], sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return vol.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = taps.iter().sum();
    let taps: Vec<f64> = taps.iter().map(|t| t / norm).collect();
    let strides = [shape[1] * shape[2], shape[2], 1];
    let mut cur = vol.to_vec();
    for axis in 0..3 {
        let mut next = vec![0.0; cur.len()];
        for (idx, out) in next.iter_mut().enumerate() {
            let pos = (idx / strides[axis]) % shape[axis];
            let mut acc = 0.0;
            for (k, &t) in taps.iter().enumerate() {
                let q = pos as isize + k as isize - radius;
                if q >= 0 && (q as usize) < shape[axis] {
                    acc += t * cur[idx - pos * strides[axis] + q as usize * strides[axis]];
                }
            }
            *out = acc;
        }
        cur = next;
    }
    cur
}

fn degrade(rng: &mut ChaCha8Rng, clean: &[f64], noise: Noise) -> Vec<f64> {
    let gauss = Normal::new(0.0, noise.sigma.max(0.0)).expect("sigma is finite");
    clean
        .iter()
        .map(|&v| {
            let shot = match noise.lambda {
                Some(l) if v > 0.0 => Poisson::new(l * v).expect("positive rate").sample(rng) / l,
                Some(_) => 0.0,
                None => v,
            };
            if noise.sigma > 0.0 {
                shot + gauss.sample(rng)
            } else {
                shot
            }
        })
        .collect()
}

fn to_tensor(shape: [usize; 3], v: Vec<f64>) -> Tensor<f32> {
    Tensor::new(vec![shape[0], shape[1], shape[2], 1], v.into_iter().map(|x| x as f32).collect()).expect("sized")
}

fn gen_pair(cfg: &SyntheticConfig, rng: &mut ChaCha8Rng) -> (Tensor<f32>, Tensor<f32>) {
    let shape = cfg.shape;
    match cfg.task {
        Task::Denoise => {
            let clean = render_objects(rng, shape, cfg.objects, cfg.radius);
            let noisy = degrade(rng, &clean, cfg.noise_model());
            (to_tensor(shape, noisy), to_tensor(shape, clean))
        }
        Task::SignalPredict => {
            // The input is a blurred, saturating view of the same structures,
            // with an independent weaker structure mixed in.
            let clean = render_objects(rng, shape, cfg.objects, cfg.radius);
            let decoy = render_objects(rng, shape, cfg.objects / 2, cfg.radius);
            let mixed: Vec<f64> = clean.iter().zip(&decoy).map(|(c, d)| (2.5 * c).tanh() + 0.3 * d * d).collect();
            let blurred = blur(&mixed, shape, cfg.blur_sigma);
            let noise = Noise { sigma: cfg.noise_model().sigma * 0.5, lambda: None };
            let input = degrade(rng, &blurred, noise);
            (to_tensor(shape, input), to_tensor(shape, clean))
        }
        Task::Project => {
            let [d, h, w] = shape;
            let plane = render_objects(rng, [1, h, w], cfg.objects, cfg.radius);
            // Smooth height field z = f(y, x) in [1, d - 2].
            let waves: Vec<[f64; 3]> = (0..3)
                .map(|_| [rng.random_range(0.5..2.0), rng.random_range(0.5..2.0), rng.random_range(0.0..6.3)])
                .collect();
            let mid = (d as f64 - 1.0) / 2.0;
            let amp = (mid - 1.0).max(0.0) / waves.len() as f64;
            let clutter = render_objects(rng, shape, cfg.objects / 2, cfg.radius);
            let mut vol = vec![0.0; d * h * w];
            for y in 0..h {
                for x in 0..w {
                    let (u, v) = (y as f64 / h as f64, x as f64 / w as f64);
                    let z0 = mid
                        + waves
                            .iter()
                            .map(|[fy, fx, ph]| amp * (std::f64::consts::TAU * (fy * u + fx * v) + ph).sin())
                            .sum::<f64>();
                    for z in 0..d {
                        let g = (-(z as f64 - z0).powi(2) / (2.0 * 0.6f64.powi(2))).exp();
                        let i = (z * h + y) * w + x;
                        let off_surface = if (z as f64 - z0).abs() > 2.0 { 0.5 * clutter[i] } else { 0.0 };
                        vol[i] = plane[y * w + x] * g + off_surface;
                    }
                }
            }
            let noisy = degrade(rng, &vol, cfg.noise_model());
            (to_tensor(shape, noisy), to_tensor([1, h, w], plane))
        }
    }
}

/// Generate `n` registered pairs; each pair draws from its own stream derived
/// from the seed, so prefixes of larger stores agree.
pub fn gen_synthetic(cfg: &SyntheticConfig, n: usize) -> Result<PairStore> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::InvalidConfig("pair count must be at least 1".into()));
    }
    let pairs = (0..n)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i as u64);
            let (input, target) = gen_pair(cfg, &mut rng);
            Pair { id: format!("pair{i:04}"), input, target, difficulty: cfg.difficulty }
        })
        .collect();
    Ok(PairStore { task: cfg.task, pairs })
}

// ---------------------------------------------------------------------------
// Manifests

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub input_path: String,
    pub target_path: String,
    pub task: Task,
    pub difficulty: Difficulty,
}

pub const MANIFEST: &str = "manifest.json";

/// Write every pair as two GVTT files plus `manifest.json` under `dir`.
pub fn write_store(store: &PairStore, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(store.len());
    for p in &store.pairs {
        let input_path = format!("{}_input.gvtt", p.id);
        let target_path = format!("{}_target.gvtt", p.id);
        tensor_write(&p.input, dir.join(&input_path))?;
        tensor_write(&p.target, dir.join(&target_path))?;
        entries.push(ManifestEntry { id: p.id.clone(), input_path, target_path, task: store.task, difficulty: p.difficulty });
    }
    let json = serde_json::to_string_pretty(&entries).expect("manifest serializes");
    fs::write(dir.join(MANIFEST), json + "\n")?;
    Ok(())
}

pub fn read_store(dir: impl AsRef<Path>) -> Result<PairStore> {
    let dir = dir.as_ref();
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    let entries: Vec<ManifestEntry> =
        serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("manifest: {e}")))?;
    let Some(first) = entries.first() else {
        return Err(Error::InvalidConfig("manifest lists no pairs".into()));
    };
    let task = first.task;
    let mut pairs = Vec::with_capacity(entries.len());
    for e in entries {
        if e.task != task {
            return Err(Error::InvalidConfig(format!("manifest mixes tasks {task:?} and {:?}", e.task)));
        }
        pairs.push(Pair {
            input: tensor_read(dir.join(&e.input_path))?.to_element(),
            target: tensor_read(dir.join(&e.target_path))?.to_element(),
            id: e.id,
            difficulty: e.difficulty,
        });
    }
    Ok(PairStore { task, pairs })
}

// ---------------------------------------------------------------------------
// Tiled inference

/// Tile origins along one axis: steps of `patch - overlap`, rounded down to
/// multiples of `divisor`, with the last tile flush against the far edge.
pub fn tile_starts(extent: usize, patch: usize, overlap: usize, divisor: usize) -> Vec<usize> {
    let step = (patch - overlap).max(1);
    let mut starts = Vec::new();
    let mut s = 0;
    while s + patch < extent {
        let aligned = s / divisor * divisor;
        if starts.last() != Some(&aligned) {
            starts.push(aligned);
        }
        s += step;
    }
    let last = extent - patch;
    if starts.last() != Some(&last) {
        starts.push(last);
    }
    starts
}

/// Predict `x: [d, h, w, c]` tile by tile and average overlapping outputs.
pub fn tiled_inference<T: Element>(
    model: &Model<T>,
    x: &Tensor<T>,
    patch: [usize; 3],
    overlap: [usize; 3],
) -> Result<Tensor<T>> {
    if x.ndim() != 4 {
        return Err(Error::ShapeMismatch(format!("expected [d, h, w, c], got {:?}", x.shape())));
    }
    let spatial = [x.shape()[0], x.shape()[1], x.shape()[2]];
    let c_in = x.shape()[3];
    let div = model.spec.divisor();
    let projection = matches!(model.spec, ModelSpec::Projection(_));
    for a in 0..3 {
        if patch[a] > spatial[a] {
            return Err(Error::PatchTooLarge(format!("patch {patch:?} exceeds image {spatial:?}")));
        }
        if projection && a == 0 && patch[0] != spatial[0] {
            return Err(Error::InvalidConfig("projection tiles must span the full depth".into()));
        }
        for e in [patch[a], spatial[a]] {
            if e % div[a] != 0 {
                return Err(Error::IndivisibleExtent { axis: a, extent: e, divisor: div[a] });
            }
        }
        if overlap[a] >= patch[a] {
            return Err(Error::InvalidConfig(format!("overlap {overlap:?} must be below patch {patch:?}")));
        }
    }
    if patch == spatial {
        return model.forward(x);
    }
    let starts: [Vec<usize>; 3] = std::array::from_fn(|a| tile_starts(spatial[a], patch[a], overlap[a], div[a]));
    let out_spatial = model.spec.output_spatial(spatial);
    let out_patch = model.spec.output_spatial(patch);
    let c_out = model.spec.out_channels();
    let n_out = out_spatial.iter().product::<usize>() * c_out;
    let mut sum = vec![0.0f64; n_out];
    let mut count = vec![0u32; n_out];
    let mut tile = Vec::with_capacity(patch.iter().product::<usize>() * c_in);
    for &z0 in &starts[0] {
        for &y0 in &starts[1] {
            for &x0 in &starts[2] {
                tile.clear();
                for z in z0..z0 + patch[0] {
                    for y in y0..y0 + patch[1] {
                        let row = ((z * spatial[1] + y) * spatial[2] + x0) * c_in;
                        tile.extend_from_slice(&x.data()[row..row + patch[2] * c_in]);
                    }
                }
                let input = Tensor::new(vec![patch[0], patch[1], patch[2], c_in], tile.clone())?;
                let pred = model.forward(&input)?;
                let oz0 = if projection { 0 } else { z0 };
                let mut it = pred.data().iter();
                for z in oz0..oz0 + out_patch[0] {
                    for y in y0..y0 + out_patch[1] {
                        let row = ((z * out_spatial[1] + y) * out_spatial[2] + x0) * c_out;
                        for i in row..row + out_patch[2] * c_out {
                            sum[i] += it.next().expect("tile output sized").as_f64();
                            count[i] += 1;
                        }
                    }
                }
            }
        }
    }
    let data = sum.iter().zip(&count).map(|(&s, &c)| T::from_f64_lossy(s / c as f64)).collect();
    Tensor::new(vec![out_spatial[0], out_spatial[1], out_spatial[2], c_out], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::pearson_r;
    use crate::model::presets;
    use proptest::prelude::*;

    #[test]
    fn gvtt_round_trip_is_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t: Tensor<f32> = Tensor::from_fn(&[3, 4, 5, 2], |_| rng.random_range(-1e3..1e3));
        let mut buf = Vec::new();
        encode_tensor(&t, &mut buf).unwrap();
        assert_eq!(buf.len(), 8 + 4 * 8 + t.len() * 4);
        assert_eq!(&buf[..8], b"GVTT\x01\x01\x04\x00");
        let back = decode_tensor(&mut buf.as_slice()).unwrap().into_typed::<f32>().unwrap();
        assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        let t64: Tensor<f64> = t.cast();
        let mut buf = Vec::new();
        encode_tensor(&t64, &mut buf).unwrap();
        assert_eq!(decode_tensor(&mut buf.as_slice()).unwrap(), AnyTensor::F64(t64));
    }

    #[test]
    fn gvtt_errors() {
        let t: Tensor<f32> = Tensor::ones(&[2, 2]);
        let mut buf = Vec::new();
        encode_tensor(&t, &mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert_eq!(decode_tensor(&mut bad.as_slice()).unwrap_err().name(), "BAD_MAGIC");
        let mut bad = buf.clone();
        bad[4] = 2;
        assert_eq!(decode_tensor(&mut bad.as_slice()).unwrap_err().name(), "UNSUPPORTED_VERSION");
        let short = &buf[..buf.len() - 1];
        assert_eq!(decode_tensor(&mut &short[..]).unwrap_err().name(), "IO_ERROR");
        let mut zero = buf.clone();
        zero[8..16].copy_from_slice(&0u64.to_le_bytes());
        assert_eq!(decode_tensor(&mut zero.as_slice()).unwrap_err().name(), "INVALID_CONFIG");
    }

    #[test]
    fn zero_extent_is_refused_on_write() {
        let t: Tensor<f32> = Tensor::new(vec![2, 0], vec![]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(tensor_write(&t, dir.path().join("t.gvtt")).unwrap_err().name(), "INVALID_CONFIG");
    }

    #[test]
    fn noise_off_reproduces_target() {
        let mut cfg = SyntheticConfig::new(Task::Denoise, [8, 16, 16]);
        cfg.noise = Some(Noise { sigma: 0.0, lambda: None });
        let store = gen_synthetic(&cfg, 2).unwrap();
        for p in &store.pairs {
            assert_eq!(p.input, p.target);
            assert!(p.target.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn generation_is_seeded() {
        for task in [Task::Denoise, Task::SignalPredict, Task::Project] {
            let cfg = SyntheticConfig { seed: 9, ..SyntheticConfig::new(task, [8, 16, 16]) };
            let a = gen_synthetic(&cfg, 2).unwrap();
            assert_eq!(a, gen_synthetic(&cfg, 2).unwrap());
            let other = gen_synthetic(&SyntheticConfig { seed: 10, ..cfg.clone() }, 2).unwrap();
            assert_ne!(a, other);
            for p in &a.pairs {
                assert!(p.input.is_finite());
                assert!(p.target.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
        let cfg = SyntheticConfig::new(Task::Project, [6, 16, 16]);
        let s = gen_synthetic(&cfg, 1).unwrap();
        assert_eq!(s.pairs[0].target.shape(), &[1, 16, 16, 1]);
    }

    #[test]
    fn difficulty_orders_snr() {
        let mean_r = |difficulty| {
            let cfg = SyntheticConfig { difficulty, seed: 3, ..SyntheticConfig::new(Task::Denoise, [8, 16, 16]) };
            let s = gen_synthetic(&cfg, 8).unwrap();
            s.pairs.iter().map(|p| pearson_r(&p.target, &p.input).unwrap()).sum::<f64>() / 8.0
        };
        let (c1, c2, c3) = (mean_r(Difficulty::C1), mean_r(Difficulty::C2), mean_r(Difficulty::C3));
        assert!(c1 > c2 && c2 > c3, "{c1} {c2} {c3}");
    }

    #[test]
    fn invalid_configs() {
        let mut cfg = SyntheticConfig::new(Task::Denoise, [8, 0, 16]);
        assert_eq!(gen_synthetic(&cfg, 1).unwrap_err().name(), "INVALID_CONFIG");
        cfg.shape = [8, 8, 8];
        cfg.noise = Some(Noise { sigma: -1.0, lambda: None });
        assert_eq!(gen_synthetic(&cfg, 1).unwrap_err().name(), "INVALID_CONFIG");
        cfg.noise = None;
        assert_eq!(gen_synthetic(&cfg, 0).unwrap_err().name(), "INVALID_CONFIG");
    }

    #[test]
    fn store_round_trip() {
        let cfg = SyntheticConfig::new(Task::SignalPredict, [4, 8, 8]);
        let store = gen_synthetic(&cfg, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_store(&store, dir.path()).unwrap();
        assert_eq!(read_store(dir.path()).unwrap(), store);
    }

    #[test]
    fn tile_starts_cover_and_align() {
        assert_eq!(tile_starts(32, 16, 0, 4), vec![0, 16]);
        assert_eq!(tile_starts(32, 32, 0, 4), vec![0]);
        assert_eq!(tile_starts(40, 16, 4, 4), vec![0, 12, 24]);
        assert_eq!(tile_starts(20, 8, 3, 4), vec![0, 4, 8, 12]);
    }

    proptest! {
        #[test]
        fn tiles_partition_without_overlap(k in 1usize..6, m in 1usize..5, div in 1usize..4) {
            let patch = m * div;
            let extent = k * patch;
            let starts = tile_starts(extent, patch, 0, div);
            let mut cover = vec![0; extent];
            for s in starts {
                for c in &mut cover[s..s + patch] {
                    *c += 1;
                }
            }
            prop_assert!(cover.iter().all(|&c| c == 1));
        }

        #[test]
        fn tiles_cover_with_overlap(extent_units in 2usize..12, patch_units in 1usize..6, overlap in 0usize..8, div in 1usize..4) {
            prop_assume!(patch_units <= extent_units && overlap < patch_units * div);
            let (extent, patch) = (extent_units * div, patch_units * div);
            let starts = tile_starts(extent, patch, overlap, div);
            let mut cover = vec![0; extent];
            for &s in &starts {
                prop_assert!(s % div == 0 && s + patch <= extent);
                for c in &mut cover[s..s + patch] {
                    *c += 1;
                }
            }
            prop_assert!(cover.iter().all(|&c| c >= 1));
        }
    }

    fn tiny(spec: crate::model::NetworkSpec) -> Model<f32> {
        let spec = crate::model::NetworkSpec { initial_features: 4, ..spec };
        Model::build(spec.into(), 0).unwrap()
    }

    #[test]
    fn single_tile_matches_forward_bitwise() {
        let m = tiny(presets::denoise_gvtnet());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Tensor<f32> = Tensor::from_fn(&[8, 16, 16, 1], |_| rng.random_range(0.0..1.0));
        assert_eq!(tiled_inference(&m, &x, [8, 16, 16], [0; 3]).unwrap(), m.forward(&x).unwrap());
        assert_eq!(tiled_inference(&m, &x, [8, 32, 16], [0; 3]).unwrap_err().name(), "PATCH_TOO_LARGE");
        assert_eq!(tiled_inference(&m, &x, [8, 6, 16], [0; 3]).unwrap_err().name(), "INDIVISIBLE_EXTENT");
    }

    #[test]
    fn local_model_is_tile_invariant_in_the_interior() {
        let m = tiny(presets::denoise_baseline());
        let r = m.spec.receptive_radius().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let shape = [8, 64, 8];
        let x: Tensor<f32> = Tensor::from_fn(&[shape[0], shape[1], shape[2], 1], |_| rng.random_range(0.0..1.0));
        let full = m.forward(&x).unwrap();
        let tiled = tiled_inference(&m, &x, [8, 32, 8], [0; 3]).unwrap();
        // Only axis 1 has an interior tile boundary, at 32.
        let mut compared = 0;
        for y in 0..shape[1] {
            if y + r[1] < 32 || y >= 32 + r[1] {
                for z in 0..shape[0] {
                    for xx in 0..shape[2] {
                        assert_eq!(tiled.get(&[z, y, xx, 0]), full.get(&[z, y, xx, 0]));
                        compared += 1;
                    }
                }
            }
        }
        assert!(compared > 0);
        assert_ne!(tiled, full);
    }
}
