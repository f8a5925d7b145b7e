//! Grad-CAM heatmaps over the frozen classifier, the comparison baseline.

use crate::classifier::ClassifierModel;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

/// Deepest tap of the default architecture.
pub const DEFAULT_LAYER: &str = "block3";

#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub height: usize,
    pub width: usize,
    /// Min-max normalized to `[0,1]`, input resolution, row-major.
    pub values: Vec<f64>,
    pub source_layer: String,
    /// The raw map was identically zero; `values` are all zeros.
    pub degenerate: bool,
}

/// Standard Grad-CAM for `target_class` at tap `layer`.
pub fn gradcam(model: &ClassifierModel, image: &Tensor, target_class: usize, layer: &str) -> Result<Heatmap> {
    gradcam_scaled(model, image, target_class, layer, 1.0)
}

/// Grad-CAM of `scale · logit[target_class]`. Any positive `scale` gives the
/// same heatmap; exposed for checking exactly that.
pub fn gradcam_scaled(
    model: &ClassifierModel,
    image: &Tensor,
    target_class: usize,
    layer: &str,
    scale: f64,
) -> Result<Heatmap> {
    if target_class >= model.num_classes() {
        return Err(Error::Contract(format!(
            "target class {target_class} out of range for {} classes",
            model.num_classes()
        )));
    }
    model.tap_index(layer)?;
    let (_, acts) = model.forward_with_taps(image)?;
    let activation = acts.get(layer).expect("tap index checked").clone();

    let mut tape = Tape::new();
    let params = model.bind(&mut tape);
    let a = tape.leaf(activation.clone().with_grad());
    let logits = model.forward_from_tap(&mut tape, &params, layer, a)?;
    let k = tape.value(logits).numel();
    let flat = tape.reshape(logits, vec![k])?;
    let target = tape.select(flat, target_class)?;
    let target = tape.scale(target, scale)?;
    tape.backward(target)?;
    let grad = tape.grad(a).expect("activation is a leaf").to_vec();

    let &[_, channels, h, w] = activation.shape() else {
        return Err(Error::dim(format!("tap `{layer}` is not a feature map")));
    };
    let plane = h * w;
    let mut raw = vec![0.0; plane];
    for c in 0..channels {
        let g = &grad[c * plane..(c + 1) * plane];
        let weight = g.iter().sum::<f64>() / plane as f64;
        let a = &activation.data()[c * plane..(c + 1) * plane];
        raw.iter_mut().zip(a).for_each(|(r, v)| *r += weight * v);
    }
    raw.iter_mut().for_each(|v| *v = v.max(0.0));

    let (height, width) = (image.shape()[2], image.shape()[3]);
    let up: Vec<f64> = (0..height * width)
        .map(|i| raw[(i / width) * h / height * w + (i % width) * w / width])
        .collect();
    let (lo, hi) = up.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let degenerate = hi <= 0.0;
    let values = if degenerate {
        vec![0.0; up.len()]
    } else if hi == lo {
        vec![1.0; up.len()]
    } else {
        up.iter().map(|v| (v - lo) / (hi - lo)).collect()
    };
    Ok(Heatmap {
        height,
        width,
        values,
        source_layer: layer.to_string(),
        degenerate,
    })
}

/// Marks the `round(keep_fraction·H·W)` highest pixels; equal values are
/// taken in row-major order.
pub fn threshold_heatmap(heatmap: &Heatmap, keep_fraction: f64) -> Result<Vec<bool>> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::Parameter(format!("keep fraction must lie in (0,1], got {keep_fraction}")));
    }
    let n = heatmap.values.len();
    let keep = ((keep_fraction * n as f64).round() as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    // stable: ties keep ascending index order
    order.sort_by(|&a, &b| heatmap.values[b].total_cmp(&heatmap.values[a]));
    let mut mask = vec![false; n];
    for &i in &order[..keep] {
        mask[i] = true;
    }
    Ok(mask)
}
