//! Image-quality metrics: Pearson correlation, percentile-normalized RMSE
//! with a fitted scale, and global SSIM.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// SSIM stabilizers for dynamic range `L = 1`: `(0.01 L)^2` and `(0.03 L)^2`.
pub const SSIM_C1: f64 = 1e-4;
pub const SSIM_C2: f64 = 9e-4;

/// Lower and upper percentiles used by [`percentile_normalize`] in [`nrmse`].
pub const NORM_LOW: f64 = 0.1;
pub const NORM_HIGH: f64 = 99.9;

fn as_f64<T: Element>(t: &Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|v| v.as_f64()).collect()
}

fn same_shape<T: Element, U: Element>(a: &Tensor<T>, b: &Tensor<U>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(())
}

/// `(mean_a, mean_b, var_a, var_b, cov)` with population normalization.
fn moments(a: &[f64], b: &[f64]) -> (f64, f64, f64, f64, f64) {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        va += dx * dx;
        vb += dy * dy;
        cov += dx * dy;
    }
    (ma, mb, va / n, vb / n, cov / n)
}

pub fn pearson_r<T: Element>(y: &Tensor<T>, y_hat: &Tensor<T>) -> Result<f64> {
    same_shape(y, y_hat)?;
    let (_, _, vy, vp, cov) = moments(&as_f64(y), &as_f64(y_hat));
    if vy == 0.0 || vp == 0.0 {
        return Err(Error::DegenerateInput("pearson_r of a constant image".into()));
    }
    Ok((cov / (vy.sqrt() * vp.sqrt())).clamp(-1.0, 1.0))
}

/// `(y - P_lo) / (P_hi - P_lo)`, unclipped.
pub fn percentile_normalize<T: Element>(y: &Tensor<T>, p_lo: f64, p_hi: f64) -> Result<Tensor<f64>> {
    let lo = y.percentile(p_lo)?;
    let hi = y.percentile(p_hi)?;
    if hi <= lo {
        return Err(Error::DegenerateInput(format!("percentiles {p_lo} and {p_hi} coincide at {lo}")));
    }
    let span = hi - lo;
    Ok(Tensor::new(y.shape().to_vec(), y.data().iter().map(|v| (v.as_f64() - lo) / span).collect())
        .expect("shape preserved"))
}

/// RMSE between `alpha * y_hat` and the percentile-normalized target, where
/// `alpha = Cov(y_hat, t) / Var(y_hat)` and no offset is fitted.
pub fn nrmse<T: Element>(y: &Tensor<T>, y_hat: &Tensor<T>) -> Result<f64> {
    same_shape(y, y_hat)?;
    let t = percentile_normalize(y, NORM_LOW, NORM_HIGH)?;
    let p = as_f64(y_hat);
    let (_, _, vp, _, cov) = moments(&p, t.data());
    if vp == 0.0 {
        return Err(Error::DegenerateInput("nrmse of a constant prediction".into()));
    }
    let alpha = cov / vp;
    let mse = p.iter().zip(t.data()).map(|(&a, &b)| (alpha * a - b).powi(2)).sum::<f64>() / p.len() as f64;
    Ok(mse.sqrt())
}

/// SSIM from global image statistics.
pub fn ssim<T: Element>(y: &Tensor<T>, y_hat: &Tensor<T>) -> Result<f64> {
    same_shape(y, y_hat)?;
    let (my, mp, vy, vp, cov) = moments(&as_f64(y), &as_f64(y_hat));
    Ok(((2.0 * my * mp + SSIM_C1) * (2.0 * cov + SSIM_C2))
        / ((my * my + mp * mp + SSIM_C1) * (vy + vp + SSIM_C2)))
}

/// Optional rescaling applied to prediction and target before Pearson and
/// SSIM are computed. NRMSE always normalizes its target itself.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationPolicy {
    #[default]
    Raw,
    Percentile,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub id: String,
    pub pearson_r: f64,
    pub nrmse: f64,
    pub ssim: f64,
}

impl MetricRecord {
    pub fn compute<T: Element>(
        id: impl Into<String>,
        target: &Tensor<T>,
        prediction: &Tensor<T>,
        policy: NormalizationPolicy,
    ) -> Result<Self> {
        let nrmse = nrmse(target, prediction)?;
        let (pr, ss) = match policy {
            NormalizationPolicy::Raw => (pearson_r(target, prediction)?, ssim(target, prediction)?),
            NormalizationPolicy::Percentile => {
                let t = percentile_normalize(target, NORM_LOW, NORM_HIGH)?;
                let p = percentile_normalize(prediction, NORM_LOW, NORM_HIGH)?;
                (pearson_r(&t, &p)?, ssim(&t, &p)?)
            }
        };
        Ok(MetricRecord { id: id.into(), pearson_r: pr, nrmse, ssim: ss })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Population standard deviation over images.
    pub std: f64,
}

impl Summary {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Summary {
        let v: Vec<f64> = values.into_iter().collect();
        if v.is_empty() {
            return Summary { mean: f64::NAN, std: f64::NAN };
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Summary { mean, std: var.sqrt() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub count: usize,
    pub pearson_r: Summary,
    pub nrmse: Summary,
    pub ssim: Summary,
}

/// Per-image records in dataset order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub records: Vec<MetricRecord>,
}

impl MetricReport {
    pub fn aggregate(&self) -> Aggregate {
        Aggregate {
            count: self.records.len(),
            pearson_r: Summary::of(self.records.iter().map(|r| r.pearson_r)),
            nrmse: Summary::of(self.records.iter().map(|r| r.nrmse)),
            ssim: Summary::of(self.records.iter().map(|r| r.ssim)),
        }
    }

    /// `id,pearson_r,nrmse,ssim`, one row per image.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["id", "pearson_r", "nrmse", "ssim"]).map_err(csv_err)?;
        for r in &self.records {
            w.write_record([r.id.clone(), r.pearson_r.to_string(), r.nrmse.to_string(), r.ssim.to_string()])
                .map_err(csv_err)?;
        }
        finish_csv(w)
    }

    pub fn aggregate_json(&self) -> String {
        serde_json::to_string_pretty(&self.aggregate()).expect("aggregate serializes")
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Io(e.to_string())
}

pub(crate) fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Run `predict` on every input and score it against its target.
pub fn evaluate<'a, T, I, F>(pairs: I, mut predict: F, policy: NormalizationPolicy) -> Result<MetricReport>
where
    T: Element,
    I: IntoIterator<Item = (&'a str, &'a Tensor<T>, &'a Tensor<T>)>,
    F: FnMut(&Tensor<T>) -> Result<Tensor<T>>,
{
    let mut records = Vec::new();
    for (id, input, target) in pairs {
        let pred = predict(input)?;
        records.push(MetricRecord::compute(id, target, &pred, policy)?);
    }
    if records.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(MetricReport { records })
}
