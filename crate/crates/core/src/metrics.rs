//! Fidelity, minimality, crispness, robustness and localization scores for
//! binary evidence masks, plus per-method aggregation and CSV I/O.

use std::fmt;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::classifier::{stack, ClassifierModel};
use crate::error::{Error, Result};
use crate::explainer::{sample_background, BackgroundKind, BackgroundPool};
use crate::tensor::{softmax_slice, Tensor};

/// A mask value counts as crisp when `min(m, 1 − m)` is below this.
pub const CRISP_MARGIN: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    MedCam,
    GradCam,
    Random,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::MedCam, Method::GradCam, Method::Random];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::MedCam => "medcam",
            Method::GradCam => "gradcam",
            Method::Random => "random",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown method `{s}` (medcam, gradcam, random)")))
    }
}

/// One explained image under one method.
#[derive(Clone, Debug, PartialEq)]
pub struct EvidenceReport {
    pub image_id: String,
    pub method: Method,
    /// Class predicted on the unmasked image.
    pub y: usize,
    pub conf_x: f64,
    pub conf_e: f64,
    pub decision_preserved: bool,
    pub area_fraction: f64,
    /// Share of crisp pixels in the continuous mask (1 for binary methods).
    pub bin_fraction: f64,
    pub tv_norm: f64,
    pub rob_pass_rate: f64,
    pub truth_iou: Option<f64>,
    pub wall_seconds: f64,
    pub seed: u64,
}

pub const REPORT_HEADER: [&str; 13] = [
    "image_id",
    "method",
    "y",
    "conf_x",
    "conf_e",
    "decision_preserved",
    "area_fraction",
    "bin_fraction",
    "tv_norm",
    "rob_pass_rate",
    "truth_iou",
    "wall_seconds",
    "seed",
];

impl EvidenceReport {
    fn record(&self) -> Vec<String> {
        vec![
            self.image_id.clone(),
            self.method.to_string(),
            self.y.to_string(),
            self.conf_x.to_string(),
            self.conf_e.to_string(),
            u8::from(self.decision_preserved).to_string(),
            self.area_fraction.to_string(),
            self.bin_fraction.to_string(),
            self.tv_norm.to_string(),
            self.rob_pass_rate.to_string(),
            self.truth_iou.map(|v| v.to_string()).unwrap_or_default(),
            self.wall_seconds.to_string(),
            self.seed.to_string(),
        ]
    }

    fn from_record(rec: &csv::StringRecord, line: usize) -> Result<Self> {
        let field = |i: usize| rec.get(i).unwrap_or("");
        let bad = |i: usize| Error::Data(format!("line {line}: bad `{}` value `{}`", REPORT_HEADER[i], field(i)));
        let float = |i: usize| field(i).parse::<f64>().map_err(|_| bad(i));
        if rec.len() != REPORT_HEADER.len() {
            return Err(Error::Data(format!(
                "line {line}: expected {} fields, got {}",
                REPORT_HEADER.len(),
                rec.len()
            )));
        }
        Ok(Self {
            image_id: field(0).to_string(),
            method: field(1).parse().map_err(|_| bad(1))?,
            y: field(2).parse().map_err(|_| bad(2))?,
            conf_x: float(3)?,
            conf_e: float(4)?,
            decision_preserved: match field(5) {
                "1" | "true" => true,
                "0" | "false" => false,
                _ => return Err(bad(5)),
            },
            area_fraction: float(6)?,
            bin_fraction: float(7)?,
            tv_norm: float(8)?,
            rob_pass_rate: float(9)?,
            truth_iou: match field(10) {
                "" => None,
                _ => Some(float(10)?),
            },
            wall_seconds: float(11)?,
            seed: field(12).parse().map_err(|_| bad(12))?,
        })
    }
}

pub fn write_reports<W: std::io::Write>(out: W, reports: &[EvidenceReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(REPORT_HEADER)?;
    for r in reports {
        w.write_record(r.record())?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

pub fn read_reports<R: std::io::Read>(input: R) -> Result<Vec<EvidenceReport>> {
    let mut rd = csv::Reader::from_reader(input);
    let header = rd.headers()?.clone();
    if header.iter().ne(REPORT_HEADER) {
        return Err(Error::Data(format!("unexpected report header: {header:?}")));
    }
    rd.records()
        .enumerate()
        .map(|(i, rec)| EvidenceReport::from_record(&rec?, i + 2))
        .collect()
}

pub fn save_reports(path: impl AsRef<Path>, reports: &[EvidenceReport]) -> Result<()> {
    let path = path.as_ref();
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_reports(std::io::BufWriter::new(f), reports)
}

pub fn load_reports(path: impl AsRef<Path>) -> Result<Vec<EvidenceReport>> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_reports(std::io::BufReader::new(f))
}

fn check_mask(image: &Tensor, mask: &[bool]) -> Result<(usize, usize)> {
    match *image.shape() {
        [1, _, h, w] if h * w == mask.len() => Ok((h, w)),
        _ => Err(Error::dim(format!(
            "mask of {} pixels does not fit image {:?}",
            mask.len(),
            image.shape()
        ))),
    }
}

/// `m⊙x + (1−m)⊙r` for a binary mask; `r = None` means zeros.
pub fn composite(image: &Tensor, mask: &[bool], background: Option<&Tensor>) -> Result<Tensor> {
    let (h, w) = check_mask(image, mask)?;
    if let Some(r) = background {
        if r.shape() != image.shape() {
            return Err(Error::dim(format!("background {:?} vs image {:?}", r.shape(), image.shape())));
        }
    }
    let plane = h * w;
    let data = image
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| match (mask[i % plane], background) {
            (true, _) => x,
            (false, Some(r)) => r.data()[i],
            (false, None) => 0.0,
        })
        .collect();
    Tensor::new(image.shape().to_vec(), data)
}

/// Classifies `m⊙x`; returns whether the argmax is still `y` and `p(y)`.
pub fn decision_preservation(model: &ClassifierModel, image: &Tensor, mask: &[bool], y: usize) -> Result<(bool, f64)> {
    let e = composite(image, mask, None)?;
    let logits = model.logits(&e)?;
    if y >= logits.numel() {
        return Err(Error::Contract(format!("class {y} out of range")));
    }
    let p = softmax_slice(logits.data());
    Ok((logits.argmax() == y, p[y]))
}

/// Per-trial outcomes `f(ẽ) = y` over `n_trials` fresh backgrounds.
pub fn robustness_trials(
    model: &ClassifierModel,
    image: &Tensor,
    mask: &[bool],
    y: usize,
    n_trials: usize,
    kind: BackgroundKind,
    seed: u64,
    pool: Option<&BackgroundPool<'_>>,
) -> Result<Vec<bool>> {
    if n_trials == 0 {
        return Err(Error::Parameter("robustness needs at least one trial".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let composites = (0..n_trials)
        .map(|_| {
            let r = sample_background(image.shape(), kind, &mut rng, pool)?;
            composite(image, mask, Some(&r))?.reshaped(image.shape()[1..].to_vec())
        })
        .collect::<Result<Vec<_>>>()?;
    let batch = stack(&composites)?;
    Ok(model.predict_batch(&batch)?.into_iter().map(|c| c == y).collect())
}

#[allow(clippy::too_many_arguments)]
pub fn robustness_rate(
    model: &ClassifierModel,
    image: &Tensor,
    mask: &[bool],
    y: usize,
    n_trials: usize,
    kind: BackgroundKind,
    seed: u64,
    pool: Option<&BackgroundPool<'_>>,
) -> Result<f64> {
    let t = robustness_trials(model, image, mask, y, n_trials, kind, seed, pool)?;
    Ok(t.iter().filter(|&&ok| ok).count() as f64 / t.len() as f64)
}

/// Intersection over union; `None` when the truth region is empty.
pub fn truth_iou(mask: &[bool], truth: &[bool]) -> Result<Option<f64>> {
    if mask.len() != truth.len() {
        return Err(Error::dim(format!("mask {} vs truth {} pixels", mask.len(), truth.len())));
    }
    if !truth.iter().any(|&t| t) {
        return Ok(None);
    }
    let inter = mask.iter().zip(truth).filter(|(&a, &b)| a && b).count();
    let union = mask.iter().zip(truth).filter(|(&a, &b)| a || b).count();
    Ok(Some(inter as f64 / union as f64))
}

pub fn area_fraction(mask: &[bool]) -> f64 {
    mask.iter().filter(|&&b| b).count() as f64 / mask.len().max(1) as f64
}

/// Fraction of values with `min(m, 1 − m) < CRISP_MARGIN`.
pub fn crisp_fraction(values: &[f64]) -> f64 {
    let crisp = values.iter().filter(|&&m| m.min(1.0 - m) < CRISP_MARGIN).count();
    crisp as f64 / values.len().max(1) as f64
}

/// Anisotropic total variation of a binary mask per neighbour pair.
pub fn binary_tv(mask: &[bool], height: usize, width: usize) -> f64 {
    let mut diffs = 0usize;
    let mut pairs = 0usize;
    for i in 0..height {
        for j in 0..width {
            let v = mask[i * width + j];
            if j + 1 < width {
                pairs += 1;
                diffs += usize::from(v != mask[i * width + j + 1]);
            }
            if i + 1 < height {
                pairs += 1;
                diffs += usize::from(v != mask[(i + 1) * width + j]);
            }
        }
    }
    if pairs == 0 {
        0.0
    } else {
        diffs as f64 / pairs as f64
    }
}

/// Exactly `round(fraction·n)` pixels marked, uniformly at random.
pub fn random_mask(n_pixels: usize, fraction: f64, seed: u64) -> Vec<bool> {
    let k = ((fraction.clamp(0.0, 1.0) * n_pixels as f64).round() as usize).min(n_pixels);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = vec![false; n_pixels];
    for i in sample(&mut rng, n_pixels, k) {
        mask[i] = true;
    }
    mask
}

#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub method: Method,
    pub metric: &'static str,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
}

pub const SUMMARY_HEADER: [&str; 5] = ["method", "metric", "n", "mean", "std"];

/// Mean and population standard deviation. Values are sorted first so the
/// result does not depend on input order.
fn mean_std(values: &mut [f64]) -> (f64, f64) {
    values.sort_by(f64::total_cmp);
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let mut dev: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
    dev.sort_by(f64::total_cmp);
    (mean, (dev.iter().sum::<f64>() / n).sqrt())
}

type Field = (&'static str, fn(&EvidenceReport) -> Option<f64>);

const FIELDS: [Field; 9] = [
    ("conf_x", |r| Some(r.conf_x)),
    ("conf_e", |r| Some(r.conf_e)),
    ("preservation_rate", |r| Some(f64::from(u8::from(r.decision_preserved)))),
    ("area_fraction", |r| Some(r.area_fraction)),
    ("bin_fraction", |r| Some(r.bin_fraction)),
    ("tv_norm", |r| Some(r.tv_norm)),
    ("rob_pass_rate", |r| Some(r.rob_pass_rate)),
    ("truth_iou", |r| r.truth_iou),
    ("wall_seconds", |r| Some(r.wall_seconds)),
];

/// Per-method summary ordered by method then metric. Each method also gets
/// a `confidence_delta` row, `mean conf_e − mean conf_x`.
pub fn aggregate(reports: &[EvidenceReport]) -> Result<Vec<SummaryRow>> {
    if reports.is_empty() {
        return Err(Error::Data("cannot aggregate zero reports".into()));
    }
    let mut rows = Vec::new();
    for method in Method::ALL {
        let group: Vec<&EvidenceReport> = reports.iter().filter(|r| r.method == method).collect();
        if group.is_empty() {
            continue;
        }
        let mut means = std::collections::HashMap::new();
        for (metric, get) in FIELDS {
            let mut values: Vec<f64> = group.iter().filter_map(|r| get(r)).collect();
            if values.is_empty() {
                continue;
            }
            let (mean, std) = mean_std(&mut values);
            means.insert(metric, mean);
            rows.push(SummaryRow {
                method,
                metric,
                n: values.len(),
                mean,
                std,
            });
        }
        rows.push(SummaryRow {
            method,
            metric: "confidence_delta",
            n: group.len(),
            mean: means["conf_e"] - means["conf_x"],
            std: 0.0,
        });
    }
    Ok(rows)
}

pub fn summary_row(rows: &[SummaryRow], method: Method, metric: &str) -> Option<f64> {
    rows.iter().find(|r| r.method == method && r.metric == metric).map(|r| r.mean)
}

pub fn write_summary<W: std::io::Write>(out: W, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SUMMARY_HEADER)?;
    for r in rows {
        w.write_record([
            r.method.to_string(),
            r.metric.to_string(),
            r.n.to_string(),
            r.mean.to_string(),
            r.std.to_string(),
        ])?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}
