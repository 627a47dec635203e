//! Command-line front end: dataset generation, training, inference,
//! evaluation, patch-size sweeps, parameter counting and gradient checks.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use gvtnet::autograd::GradCheckOptions;
use gvtnet::data::{gen_synthetic, read_store, tensor_read, tensor_write, tiled_inference, PairStore, SyntheticConfig};
use gvtnet::metrics::{MetricRecord, MetricReport, NormalizationPolicy};
use gvtnet::model::{count_params, Model, ModelSpec};
use gvtnet::train::{checkpoint_load, checkpoint_save, train_loop, TrainConfig};
use gvtnet::{verify, Error, Result, Tensor};

/// Exit status for malformed command lines.
pub const USAGE_EXIT: i32 = 2;
/// Exit status for domain errors.
pub const ERROR_EXIT: i32 = 1;

/// Evaluation-time inference settings.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Prediction patch `[d, h, w]`; the whole image when absent.
    #[serde(default)]
    pub patch: Option<[usize; 3]>,
    #[serde(default)]
    pub overlap: [usize; 3],
    #[serde(default)]
    pub normalization: NormalizationPolicy,
}

/// One experiment: architecture, training, data and evaluation sections.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub spec: ModelSpec,
    pub train: TrainConfig,
    pub data: SyntheticConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.spec.validate()?;
        cfg.train.validate()?;
        cfg.data.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

#[derive(Parser, Debug)]
#[command(name = "gvtnet", version, about = "Volumetric image-to-image networks with global voxel transformer operators")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset of registered pairs.
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: usize,
    },
    /// Train a model and write a checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict one volume, optionally tile by tile.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Tile extents as DxHxW.
        #[arg(long, value_parser = parse_patch)]
        patch: Option<[usize; 3]>,
        /// Overlap in voxels on every axis.
        #[arg(long, default_value_t = 0)]
        overlap: usize,
    },
    /// Score a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
    },
    /// Score a checkpoint across prediction patch sizes.
    Sweep {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated DxHxW extents; `full` means the whole image.
        #[arg(long, value_parser = parse_sweep_list)]
        patches: SweepList,
        #[arg(long)]
        report: PathBuf,
    },
    /// Print the trainable parameter count of a config's model.
    CountParams {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the gradient verification suite.
    Gradcheck {
        #[arg(long)]
        op: Option<String>,
    },
}

/// A prediction patch in a sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SweepPatch {
    Full,
    Extent([usize; 3]),
}

impl SweepPatch {
    fn resolve(self, spatial: [usize; 3]) -> [usize; 3] {
        match self {
            SweepPatch::Full => spatial,
            SweepPatch::Extent(p) => p,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SweepList(pub Vec<SweepPatch>);

pub fn parse_patch(s: &str) -> std::result::Result<[usize; 3], String> {
    let parts: Vec<&str> = s.split('x').collect();
    if parts.len() != 3 {
        return Err(format!("expected DxHxW, got {s:?}"));
    }
    let mut out = [0; 3];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p.trim().parse().map_err(|_| format!("bad extent {p:?} in {s:?}"))?;
        if *o == 0 {
            return Err(format!("zero extent in {s:?}"));
        }
    }
    Ok(out)
}

pub fn parse_sweep_list(s: &str) -> std::result::Result<SweepList, String> {
    let items = s
        .split(',')
        .map(|p| match p.trim() {
            "full" => Ok(SweepPatch::Full),
            other => parse_patch(other).map(SweepPatch::Extent),
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    if items.is_empty() {
        return Err("empty patch list".into());
    }
    Ok(SweepList(items))
}

fn format_patch(p: [usize; 3]) -> String {
    format!("{}x{}x{}", p[0], p[1], p[2])
}

/// Parse `argv` (program name first) and run it, writing normal output to
/// `out` and diagnostics to `err`. Returns the process exit status.
pub fn dispatch_to<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let text = e.render().to_string();
            if code == 0 {
                let _ = write!(out, "{text}");
            } else {
                let _ = write!(err, "USAGE_ERROR: {text}");
            }
            return if code == 0 { 0 } else { USAGE_EXIT };
        }
    };
    match run(cli.command, out, err) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "{}: {e}", e.name());
            ERROR_EXIT
        }
    }
}

/// [`dispatch_to`] on the process's standard streams.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let (mut out, mut err) = (std::io::stdout().lock(), std::io::stderr().lock());
    dispatch_to(argv, &mut out, &mut err)
}

fn run(cmd: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<i32> {
    match cmd {
        Command::Gen { config, out: dir, n } => {
            let cfg = RunConfig::load(&config)?;
            if n == 0 {
                return Err(Error::InvalidConfig("--n must be at least 1".into()));
            }
            check_divisible(&cfg.spec, cfg.data.shape)?;
            let store = gen_synthetic(&cfg.data, n)?;
            gvtnet::data::write_store(&store, &dir)?;
            writeln!(out, "wrote {n} pairs to {}", dir.display())?;
        }
        Command::Train { config, data, out: ckpt } => {
            let cfg = RunConfig::load(&config)?;
            let store = read_store(&data)?;
            let model = Model::build(cfg.spec.clone(), cfg.train.seed)?;
            let header = serde_json::to_value(&cfg).expect("config serializes");
            let every = cfg.train.checkpoint_every;
            let outcome = train_loop(model, &cfg.train, &store, |step| {
                writeln!(out, "{},{}", step.iteration, step.loss)?;
                if every.is_some_and(|k| step.iteration % k == 0) {
                    checkpoint_save(step.model, &header, step.iteration, &ckpt)?;
                }
                Ok(())
            })?;
            checkpoint_save(&outcome.model, &header, cfg.train.iterations, &ckpt)?;
        }
        Command::Predict { ckpt, input, out: path, patch, overlap } => {
            let (model, _) = load(&ckpt)?;
            let x = as_volume(tensor_read(&input)?.to_element::<f32>())?;
            let spatial = [x.shape()[0], x.shape()[1], x.shape()[2]];
            let y = tiled_inference(&model, &x, patch.unwrap_or(spatial), [overlap; 3])?;
            tensor_write(&y, &path)?;
        }
        Command::Eval { ckpt, data, report } => {
            let (model, cfg) = load(&ckpt)?;
            let store = read_store(&data)?;
            let eval = cfg.map(|c| c.eval).unwrap_or_default();
            let rep = gvtnet::metrics::evaluate(
                store.iter(),
                |x| {
                    let s = x.shape();
                    tiled_inference(&model, x, eval.patch.unwrap_or([s[0], s[1], s[2]]), eval.overlap)
                },
                eval.normalization,
            )?;
            fs::write(&report, rep.to_csv()?)?;
            writeln!(out, "{}", rep.aggregate_json())?;
        }
        Command::Sweep { ckpt, data, patches, report } => {
            let (model, cfg) = load(&ckpt)?;
            let store = read_store(&data)?;
            let eval = cfg.map(|c| c.eval).unwrap_or_default();
            let csv = sweep_csv(&model, &store, &patches.0, eval.overlap, eval.normalization)?;
            fs::write(&report, csv)?;
        }
        Command::CountParams { config } => {
            let cfg = RunConfig::load(&config)?;
            writeln!(out, "{}", count_params(&cfg.spec)?)?;
        }
        Command::Gradcheck { op } => {
            let opts = GradCheckOptions::default();
            let results = verify::run_suite(op.as_deref(), &opts)?;
            let mut all = true;
            for (name, rep) in &results {
                all &= rep.pass;
                writeln!(
                    out,
                    "{} {name} max_rel_err={:.3e} checked={} skipped={}",
                    if rep.pass { "PASS" } else { "FAIL" },
                    rep.max_rel_err,
                    rep.checked,
                    rep.skipped
                )?;
            }
            if !all {
                writeln!(err, "gradient check failed at tolerance {}", opts.tolerance)?;
                return Ok(ERROR_EXIT);
            }
        }
    }
    Ok(0)
}

fn check_divisible(spec: &ModelSpec, shape: [usize; 3]) -> Result<()> {
    let div = spec.divisor();
    for a in 0..3 {
        if shape[a] % div[a] != 0 {
            return Err(Error::IndivisibleExtent { axis: a, extent: shape[a], divisor: div[a] });
        }
    }
    Ok(())
}

fn load(path: &Path) -> Result<(Model<f32>, Option<RunConfig>)> {
    let ck = checkpoint_load::<f32>(path, None)?;
    let cfg = serde_json::from_value(ck.config).ok();
    Ok((ck.model, cfg))
}

/// Accept `[d, h, w]` or `[d, h, w, c]`.
fn as_volume(x: Tensor<f32>) -> Result<Tensor<f32>> {
    match x.ndim() {
        3 => {
            let mut s = x.shape().to_vec();
            s.push(1);
            x.reshape(&s)
        }
        4 => Ok(x),
        _ => Err(Error::ShapeMismatch(format!("expected a [d, h, w(, c)] volume, got {:?}", x.shape()))),
    }
}

/// `id,patch,pearson_r,nrmse,ssim`, one row per image and patch size.
pub fn sweep_csv(
    model: &Model<f32>,
    store: &PairStore,
    patches: &[SweepPatch],
    overlap: [usize; 3],
    policy: NormalizationPolicy,
) -> Result<String> {
    if store.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let io = |e: csv::Error| Error::Io(e.to_string());
    w.write_record(["id", "patch", "pearson_r", "nrmse", "ssim"]).map_err(io)?;
    for &p in patches {
        let mut records = Vec::with_capacity(store.len());
        let mut labels = Vec::with_capacity(store.len());
        for (id, x, y) in store.iter() {
            let s = x.shape();
            let patch = p.resolve([s[0], s[1], s[2]]);
            let pred = tiled_inference(model, x, patch, overlap)?;
            records.push(MetricRecord::compute(id, y, &pred, policy)?);
            labels.push(format_patch(patch));
        }
        let rep = MetricReport { records };
        for (r, label) in rep.records.iter().zip(labels) {
            w.write_record([r.id.clone(), label, r.pearson_r.to_string(), r.nrmse.to_string(), r.ssim.to_string()])
                .map_err(io)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patch_parsing() {
        assert_eq!(parse_patch("16x32x8"), Ok([16, 32, 8]));
        assert!(parse_patch("16x32").is_err());
        assert!(parse_patch("0x4x4").is_err());
        assert!(parse_patch("ax4x4").is_err());
        let l = parse_sweep_list("8x16x16, full").unwrap();
        assert_eq!(l.0, vec![SweepPatch::Extent([8, 16, 16]), SweepPatch::Full]);
        assert_eq!(SweepPatch::Full.resolve([1, 2, 3]), [1, 2, 3]);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = include_str!("../../../presets/denoise.json");
        let mut v: serde_json::Value = serde_json::from_str(text).unwrap();
        assert!(RunConfig::from_json(&v.to_string()).is_ok());
        v["train"]["unexpected"] = serde_json::json!(1);
        assert_eq!(RunConfig::from_json(&v.to_string()).unwrap_err().name(), "INVALID_CONFIG");
    }
}
