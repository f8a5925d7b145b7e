//! Per-image evidence masks.
//!
//! A fresh [`MaskNet`] is fitted to one image against a frozen classifier so
//! that `e = m⊙x` reproduces the classifier's activations and decision while
//! `m` stays small, binary, smooth and robust to what fills the rest of the
//! frame.

mod background;
pub mod losses;
mod masknet;

use std::collections::BTreeMap;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use background::{sample_background, BackgroundKind, BackgroundPool};
pub use losses::Distance;
pub use masknet::{MaskNet, BOTTLENECK_CHANNELS, DECODER_CHANNELS, ENCODER_CHANNELS};

use crate::classifier::ClassifierModel;
use crate::error::{Error, Result};
use crate::metrics::{self, EvidenceReport, Method};
use crate::tensor::{clip_global_norm, softmax_slice, Adam, Tape, Tensor, Var};

/// Continuous mask in `[0,1]`, optionally with its thresholded form.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub binarized: Option<Vec<bool>>,
}

impl Mask {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::dim(format!(
                "{height}×{width} mask needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Parameter(format!("mask value {v} outside [0,1]")));
        }
        Ok(Self {
            height,
            width,
            values,
            binarized: None,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    /// A mask whose values are exactly 0 or 1, already binarized.
    pub fn from_binary(height: usize, width: usize, bits: &[bool]) -> Result<Self> {
        let mut m = Self::new(height, width, bits.iter().map(|&b| f64::from(u8::from(b))).collect())?;
        m.binarized = Some(bits.to_vec());
        Ok(m)
    }

    /// `[H, W]` view of the continuous values.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.height, self.width], self.values.clone()).expect("mask shape checked on construction")
    }

    /// Sets `binarized[i] = values[i] ≥ threshold`.
    pub fn binarize(&mut self, threshold: f64) -> &[bool] {
        let bits = self.values.iter().map(|&v| v >= threshold).collect();
        self.binarized.insert(bits)
    }

    /// Mean of the continuous values.
    pub fn area(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

/// `e[c,i,j] = m[i,j]·x[c,i,j]` for a `[1,C,H,W]` image.
pub fn apply_mask(image: &Tensor, mask: &Mask) -> Result<Tensor> {
    match *image.shape() {
        [1, _, h, w] if h == mask.height && w == mask.width => {}
        _ => {
            return Err(Error::dim(format!(
                "{}×{} mask does not fit image {:?}",
                mask.height,
                mask.width,
                image.shape()
            )))
        }
    }
    let plane = mask.values.len();
    let data = image
        .data()
        .iter()
        .enumerate()
        .map(|(i, x)| x * mask.values[i % plane])
        .collect();
    Tensor::new(image.shape().to_vec(), data)
}

/// Tape version: `mask` is `[1,1,H,W]`, broadcast over the image channels.
/// Returns `(e, broadcast mask)`.
pub fn apply_mask_on_tape(tape: &mut Tape, image: Var, mask: Var) -> Result<(Var, Var)> {
    let channels = match *tape.shape(image) {
        [1, c, h, w] if tape.shape(mask) == [1, 1, h, w] => c,
        _ => {
            return Err(Error::dim(format!(
                "mask {:?} does not fit image {:?}",
                tape.shape(mask),
                tape.shape(image)
            )))
        }
    };
    let wide = tape.broadcast_channels(mask, channels)?;
    Ok((tape.mul(wide, image)?, wide))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// Group weights 10:100:10.
    Bach,
    /// Group weights 10:150:20.
    Ham,
    /// Tuned for the synthetic corpus.
    Default,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bach" => Ok(Self::Bach),
            "ham" => Ok(Self::Ham),
            "default" => Ok(Self::Default),
            _ => Err(Error::Parameter(format!("unknown preset `{s}` (bach, ham, default)"))),
        }
    }
}

/// Within-group splits: act:ce:kl = 1:1:1 and area:bin:tv = 1:0.5:0.5,
/// each normalized to its group total.
const AM_SPLIT: [f64; 3] = [1.0, 1.0, 1.0];
const MIN_SPLIT: [f64; 3] = [1.0, 0.5, 0.5];

#[derive(Clone, Debug, PartialEq)]
pub struct ExplainerConfig {
    pub lambda_act: f64,
    pub lambda_ce: f64,
    pub lambda_kl: f64,
    pub lambda_area: f64,
    pub lambda_bin: f64,
    pub lambda_tv: f64,
    pub lambda_rob: f64,
    /// Per-tap weights; absent taps weigh 1.
    pub alpha: BTreeMap<String, f64>,
    pub distance: Distance,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
    pub threshold: f64,
    pub rob_samples_per_step: usize,
    pub background: BackgroundKind,
    /// Fresh backgrounds used for the final robustness verdict.
    pub eval_backgrounds: usize,
}

impl Default for ExplainerConfig {
    fn default() -> Self {
        Self::preset(Preset::Default)
    }
}

impl ExplainerConfig {
    /// Builds λs from group totals `am : min : rob`.
    pub fn from_groups(am: f64, min: f64, rob: f64) -> Self {
        let split = |total: f64, s: [f64; 3]| {
            let sum: f64 = s.iter().sum();
            s.map(|w| total * w / sum)
        };
        let [act, ce, kl] = split(am, AM_SPLIT);
        let [area, bin, tv] = split(min, MIN_SPLIT);
        Self {
            lambda_act: act,
            lambda_ce: ce,
            lambda_kl: kl,
            lambda_area: area,
            lambda_bin: bin,
            lambda_tv: tv,
            lambda_rob: rob,
            alpha: BTreeMap::new(),
            distance: Distance::Cosine,
            steps: 300,
            lr: 3e-3,
            seed: 0,
            threshold: 0.5,
            rob_samples_per_step: 1,
            background: BackgroundKind::UniformNoise,
            eval_backgrounds: 20,
        }
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Bach => Self::from_groups(10.0, 100.0, 10.0),
            Preset::Ham => Self::from_groups(10.0, 150.0, 20.0),
            Preset::Default => Self::from_groups(10.0, 100.0, 10.0),
        }
    }

    pub fn lambdas(&self) -> [f64; 7] {
        [
            self.lambda_act,
            self.lambda_kl,
            self.lambda_ce,
            self.lambda_area,
            self.lambda_bin,
            self.lambda_tv,
            self.lambda_rob,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Parameter(msg));
        for (name, v) in LossBreakdown::NAMES.iter().zip(self.lambdas()) {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("lambda_{name} must be a non-negative number, got {v}"));
            }
        }
        if self.lambda_act == 0.0 && self.lambda_ce == 0.0 && self.lambda_kl == 0.0 {
            return bad("one of lambda_act, lambda_ce, lambda_kl must be positive".into());
        }
        if let Some((k, v)) = self.alpha.iter().find(|(_, v)| !(v.is_finite() && **v >= 0.0)) {
            return bad(format!("alpha for `{k}` must be non-negative, got {v}"));
        }
        if self.steps == 0 {
            return bad("steps must be positive".into());
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad(format!("threshold must lie in (0,1), got {}", self.threshold));
        }
        Ok(())
    }
}

/// Loss components for one optimization step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub step: usize,
    pub act: f64,
    pub kl: f64,
    pub ce: f64,
    pub area: f64,
    pub bin: f64,
    pub tv: f64,
    pub rob: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub const NAMES: [&'static str; 7] = ["act", "kl", "ce", "area", "bin", "tv", "rob"];

    pub fn components(&self) -> [f64; 7] {
        [self.act, self.kl, self.ce, self.area, self.bin, self.tv, self.rob]
    }

    /// `Σ λ·component` in the order of [`LossBreakdown::NAMES`].
    pub fn weighted_sum(&self, config: &ExplainerConfig) -> f64 {
        self.components().iter().zip(config.lambdas()).map(|(c, l)| c * l).sum()
    }
}

#[derive(Clone, Debug)]
pub struct Explanation {
    pub mask: Mask,
    /// `e = m⊙x` with the binarized mask.
    pub masked: Tensor,
    pub trajectory: Vec<LossBreakdown>,
    pub report: EvidenceReport,
}

impl Explanation {
    pub fn binary_mask(&self) -> &[bool] {
        self.mask.binarized.as_deref().expect("explain always binarizes")
    }
}

const BACKGROUND_STREAM: u64 = 1;
/// The first steps can see gradients ~1e3 (a half-dimmed image is often
/// misclassified with near-zero probability). Unclipped, that spike inflates
/// Adam's second moment for hundreds of steps while momentum carries the mask
/// into sigmoid saturation at m ≡ 1, where the area term can no longer act.
pub const GRAD_CLIP_NORM: f64 = 20.0;
pub(crate) const EVAL_STREAM_SALT: u64 = 0x5eed_0f_b4c6;

/// Fits a mask for `image` (`[1,C,H,W]`) against the frozen `model`.
///
/// Only the mask network is optimized; the classifier contributes constants.
/// The returned report has `truth_iou = None`; callers holding a truth mask
/// fill it in.
pub fn explain(
    image: &Tensor,
    model: &ClassifierModel,
    config: &ExplainerConfig,
    pool: Option<&BackgroundPool<'_>>,
) -> Result<Explanation> {
    let started = Instant::now();
    config.validate()?;
    if !model.is_frozen() {
        return Err(Error::Contract("explain needs a frozen classifier".into()));
    }
    model.check_input(image.shape())?;
    let (h, w) = (image.shape()[2], image.shape()[3]);

    let (logits_x, acts_x) = model.forward_with_taps(image)?;
    let y = logits_x.argmax();
    let conf_x = softmax_slice(logits_x.data())[y];

    let mut net = MaskNet::new(image.shape()[1], config.seed);
    let mut adam = Adam::new(config.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(BACKGROUND_STREAM);

    let mut trajectory: Vec<LossBreakdown> = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let backgrounds = (0..config.rob_samples_per_step)
            .map(|_| sample_background(image.shape(), config.background, &mut rng, pool))
            .collect::<Result<Vec<_>>>()?;
        let diverged = |detail: String| {
            let last = trajectory
                .last()
                .map_or("none".to_string(), |b| format!("{b:?}"));
            Error::Divergence {
                step,
                detail: format!("{detail}; last finite breakdown: {last}"),
            }
        };
        let (breakdown, grads) = objective_step(image, model, config, &net, &acts_x, &logits_x, y, &backgrounds)
            .map_err(|e| match e {
                Error::Numeric { op, detail } => diverged(format!("{op}: {detail}")),
                other => other,
            })?;
        if !breakdown.total.is_finite() {
            return Err(diverged(format!("total loss {}", breakdown.total)));
        }
        let mut grads = grads;
        clip_global_norm(&mut grads, GRAD_CLIP_NORM);
        let grad_refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
        adam.step(&mut net.params_mut(), &grad_refs)?;
        trajectory.push(LossBreakdown { step, ..breakdown });
    }

    // The final mask comes from the optimized network, not the last pre-update forward.
    let final_values = net.predict(image)?.into_data();
    let mut mask = Mask::new(h, w, final_values)?;
    let bits = mask.binarize(config.threshold).to_vec();
    let masked = metrics::composite(image, &bits, None)?;
    let (decision_preserved, conf_e) = metrics::decision_preservation(model, image, &bits, y)?;
    let rob_pass_rate = if config.eval_backgrounds == 0 {
        f64::NAN
    } else {
        metrics::robustness_rate(
            model,
            image,
            &bits,
            y,
            config.eval_backgrounds,
            config.background,
            config.seed ^ EVAL_STREAM_SALT,
            pool,
        )?
    };
    let report = EvidenceReport {
        image_id: String::new(),
        method: Method::MedCam,
        y,
        conf_x,
        conf_e,
        decision_preserved,
        area_fraction: metrics::area_fraction(&bits),
        bin_fraction: metrics::crisp_fraction(&mask.values),
        tv_norm: metrics::binary_tv(&bits, h, w),
        rob_pass_rate,
        truth_iou: None,
        wall_seconds: started.elapsed().as_secs_f64(),
        seed: config.seed,
    };
    Ok(Explanation {
        mask,
        masked,
        trajectory,
        report,
    })
}

/// One forward/backward pass of the objective. Returns the breakdown, the
/// gradient for every mask-network parameter.
#[allow(clippy::too_many_arguments)]
fn objective_step(
    image: &Tensor,
    model: &ClassifierModel,
    config: &ExplainerConfig,
    net: &MaskNet,
    acts_x: &crate::classifier::ActivationSet,
    logits_x: &Tensor,
    y: usize,
    backgrounds: &[Tensor],
) -> Result<(LossBreakdown, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let net_params = net.bind(&mut tape);
    let cls_params = model.bind(&mut tape);
    let x = tape.constant(image.clone());
    let m = net.forward(&mut tape, &net_params, x)?;
    let (e, wide) = apply_mask_on_tape(&mut tape, x, m)?;
    let out = model.forward_on_tape(&mut tape, &cls_params, e)?;

    let act = losses::act_on_tape(&mut tape, acts_x, &out.taps, &config.alpha, config.distance)?;
    let kl = losses::kl_on_tape(&mut tape, logits_x, out.logits)?;
    let ce = losses::ce_on_tape(&mut tape, out.logits, y)?;
    let area = losses::area_on_tape(&mut tape, m)?;
    let bin = losses::bin_on_tape(&mut tape, m)?;
    let tv = losses::tv_on_tape(&mut tape, m)?;
    let rob = if backgrounds.is_empty() {
        None
    } else {
        Some(losses::rob_on_tape(&mut tape, model, &cls_params, image, wide, backgrounds, y)?)
    };

    let terms = [
        (config.lambda_act, Some(act)),
        (config.lambda_kl, Some(kl)),
        (config.lambda_ce, Some(ce)),
        (config.lambda_area, Some(area)),
        (config.lambda_bin, Some(bin)),
        (config.lambda_tv, Some(tv)),
        (config.lambda_rob, rob),
    ];
    let mut total: Option<Var> = None;
    for (lambda, var) in terms {
        let Some(var) = var.filter(|_| lambda > 0.0) else { continue };
        let weighted = tape.scale(var, lambda)?;
        total = Some(match total {
            None => weighted,
            Some(t) => tape.add(t, weighted)?,
        });
    }
    let total = total.expect("validated config has a positive fidelity weight");
    tape.backward(total)?;

    let value = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item());
    let breakdown = LossBreakdown {
        step: 0,
        act: value(Some(act)),
        kl: value(Some(kl)).max(0.0),
        ce: value(Some(ce)),
        area: value(Some(area)),
        bin: value(Some(bin)),
        tv: value(Some(tv)),
        rob: value(rob),
        total: tape.value(total).item(),
    };
    let grads = net_params
        .iter()
        .map(|&p| {
            tape.grad(p)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; tape.value(p).numel()])
        })
        .collect();
    Ok((breakdown, grads))
}
