//! Batch comparison of Med-CAM, Grad-CAM and random masks at matched area.
//!
//! For every image the Med-CAM mask sets the area budget; the Grad-CAM
//! heatmap is thresholded to the same number of pixels and a seeded random
//! mask of that size serves as the control.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use crate::classifier::ClassifierModel;
use crate::error::{Error, Result};
use crate::explainer::{explain, BackgroundPool, ExplainerConfig};
use crate::gradcam::{gradcam, Heatmap};
use crate::metrics::{self, EvidenceReport, Method};
use crate::tensor::{softmax_slice, Tensor};

/// Area budget used when Med-CAM is not among the evaluated methods.
pub const FALLBACK_AREA: f64 = 0.1;

const RANDOM_SALT: u64 = 0x0a4d_0e5c_a11e;

/// One image to evaluate.
#[derive(Clone, Debug)]
pub struct EvalItem {
    pub id: String,
    /// `[1, C, H, W]`.
    pub image: Tensor,
    /// Row-major truth region; `None` or all-false means no localization score.
    pub truth: Option<Vec<bool>>,
}

#[derive(Clone, Debug)]
pub struct EvalConfig {
    pub explainer: ExplainerConfig,
    pub methods: Vec<Method>,
    pub layer: String,
    /// Worker threads; rows are sorted afterwards so the count never changes output.
    pub workers: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            explainer: ExplainerConfig::default(),
            methods: Method::ALL.to_vec(),
            layer: crate::gradcam::DEFAULT_LAYER.to_string(),
            workers: 1,
        }
    }
}

/// Evaluates every item under every configured method. Rows come back
/// sorted by image id, methods in the order given within each image.
pub fn evaluate(model: &ClassifierModel, items: &[EvalItem], config: &EvalConfig) -> Result<Vec<EvidenceReport>> {
    if config.methods.is_empty() {
        return Err(Error::Parameter("no methods selected".into()));
    }
    if config.workers == 0 {
        return Err(Error::Parameter("workers must be at least 1".into()));
    }
    config.explainer.validate()?;
    let images: Vec<Tensor> = items.iter().map(|it| it.image.clone()).collect();

    let next = AtomicUsize::new(0);
    let rows: Mutex<Vec<EvidenceReport>> = Mutex::new(Vec::new());
    let failure: Mutex<Option<Error>> = Mutex::new(None);
    std::thread::scope(|s| {
        for _ in 0..config.workers.min(items.len().max(1)) {
            s.spawn(|| loop {
                if failure.lock().unwrap().is_some() {
                    return;
                }
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(item) = items.get(i) else { return };
                let pool = BackgroundPool::new(&images, Some(i));
                match evaluate_one(model, item, i, config, &pool) {
                    Ok(mut r) => rows.lock().unwrap().append(&mut r),
                    Err(e) => {
                        failure.lock().unwrap().get_or_insert(e);
                        return;
                    }
                }
            });
        }
    });
    if let Some(e) = failure.into_inner().unwrap() {
        return Err(e);
    }
    let mut rows = rows.into_inner().unwrap();
    let rank = |m: Method| config.methods.iter().position(|&x| x == m).unwrap_or(usize::MAX);
    rows.sort_by(|a, b| a.image_id.cmp(&b.image_id).then(rank(a.method).cmp(&rank(b.method))));
    Ok(rows)
}

fn evaluate_one(
    model: &ClassifierModel,
    item: &EvalItem,
    index: usize,
    config: &EvalConfig,
    pool: &BackgroundPool<'_>,
) -> Result<Vec<EvidenceReport>> {
    let truth_iou = |mask: &[bool]| match &item.truth {
        Some(t) => metrics::truth_iou(mask, t),
        None => Ok(None),
    };
    let mut out = Vec::with_capacity(config.methods.len());

    let mut budget = FALLBACK_AREA;
    if config.methods.contains(&Method::MedCam) {
        let ex = explain(&item.image, model, &config.explainer, Some(pool))?;
        let mut report = ex.report.clone();
        report.image_id = item.id.clone();
        report.truth_iou = truth_iou(ex.binary_mask())?;
        budget = report.area_fraction;
        out.push(report);
    }

    for &method in &config.methods {
        let started = Instant::now();
        let mask = match method {
            Method::MedCam => continue,
            Method::GradCam => {
                let y = model.logits(&item.image)?.argmax();
                let heat = gradcam(model, &item.image, y, &config.layer)?;
                top_pixels(&heat, budget)
            }
            Method::Random => {
                let n = item.image.shape()[2] * item.image.shape()[3];
                metrics::random_mask(n, budget, config.explainer.seed ^ RANDOM_SALT ^ index as u64)
            }
        };
        let mut report = binary_report(model, &item.image, &mask, method, config, pool, started)?;
        report.image_id = item.id.clone();
        report.truth_iou = truth_iou(&mask)?;
        out.push(report);
    }
    Ok(out)
}

/// Heatmap thresholded to `round(fraction·N)` pixels; zero pixels when the budget rounds to zero.
fn top_pixels(heat: &Heatmap, fraction: f64) -> Vec<bool> {
    let n = heat.values.len();
    if (fraction * n as f64).round() < 1.0 {
        return vec![false; n];
    }
    crate::gradcam::threshold_heatmap(heat, fraction.min(1.0)).expect("fraction checked")
}

/// Scores a fixed binary mask the same way `explain` scores its own.
pub fn binary_report(
    model: &ClassifierModel,
    image: &Tensor,
    mask: &[bool],
    method: Method,
    config: &EvalConfig,
    pool: &BackgroundPool<'_>,
    started: Instant,
) -> Result<EvidenceReport> {
    let (h, w) = (image.shape()[2], image.shape()[3]);
    let logits = model.logits(image)?;
    let y = logits.argmax();
    let conf_x = softmax_slice(logits.data())[y];
    let (decision_preserved, conf_e) = metrics::decision_preservation(model, image, mask, y)?;
    let ex = &config.explainer;
    let rob_pass_rate = if ex.eval_backgrounds == 0 {
        f64::NAN
    } else {
        metrics::robustness_rate(
            model,
            image,
            mask,
            y,
            ex.eval_backgrounds,
            ex.background,
            ex.seed ^ crate::explainer::EVAL_STREAM_SALT,
            Some(pool),
        )?
    };
    Ok(EvidenceReport {
        image_id: String::new(),
        method,
        y,
        conf_x,
        conf_e,
        decision_preserved,
        area_fraction: metrics::area_fraction(mask),
        bin_fraction: 1.0,
        tv_norm: metrics::binary_tv(mask, h, w),
        rob_pass_rate,
        truth_iou: None,
        wall_seconds: started.elapsed().as_secs_f64(),
        seed: ex.seed,
    })
}
