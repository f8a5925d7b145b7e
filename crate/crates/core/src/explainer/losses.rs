//! The seven explanation losses, as tape graphs and as plain values.
//!
//! Mask priors are normalized: area and binarization by pixel count, total
//! variation by the number of horizontal plus vertical neighbour pairs.

use std::collections::BTreeMap;

use crate::classifier::{ActivationSet, BoundParams, ClassifierModel};
use crate::error::{Error, Result};
use crate::tensor::{softmax_slice, Tape, Tensor, Var, LOG_FLOOR};

use super::Mask;

/// Added to the norm product of the cosine distance.
pub const COSINE_STABILIZER: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Distance {
    #[default]
    Mse,
    Cosine,
}

impl std::str::FromStr for Distance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(Self::Mse),
            "cosine" => Ok(Self::Cosine),
            _ => Err(Error::Parameter(format!("unknown distance `{s}` (mse, cosine)"))),
        }
    }
}

/// Per-tap weight; taps missing from the map weigh 1.
pub fn alpha_for(alpha: &BTreeMap<String, f64>, tap: &str) -> f64 {
    alpha.get(tap).copied().unwrap_or(1.0)
}

fn distance_on_tape(tape: &mut Tape, target: &Tensor, current: Var, kind: Distance) -> Result<Var> {
    if tape.shape(current) != target.shape() {
        return Err(Error::Contract(format!(
            "activation shapes differ: {:?} vs {:?}",
            target.shape(),
            tape.shape(current)
        )));
    }
    match kind {
        Distance::Mse => {
            let t = tape.constant(target.clone());
            let d = tape.sub(current, t)?;
            let sq = tape.square(d)?;
            tape.mean(sq)
        }
        Distance::Cosine => {
            let t = tape.constant(target.clone());
            let prod = tape.mul(current, t)?;
            let dot = tape.sum(prod)?;
            let sq = tape.square(current)?;
            let cur_sq = tape.sum(sq)?;
            let cur_norm = tape.sqrt(cur_sq)?;
            let target_norm = target.data().iter().map(|v| v * v).sum::<f64>().sqrt();
            let denom = tape.affine(cur_norm, target_norm, COSINE_STABILIZER)?;
            let cos = tape.div(dot, denom)?;
            tape.affine(cos, -1.0, 1.0)
        }
    }
}

/// `Σ_ℓ α_ℓ · d(φ_ℓ(x), φ_ℓ(e))` with `φ(x)` fixed.
pub fn act_on_tape(
    tape: &mut Tape,
    acts_x: &ActivationSet,
    acts_e: &[(String, Var)],
    alpha: &BTreeMap<String, f64>,
    kind: Distance,
) -> Result<Var> {
    let names_x: Vec<&str> = acts_x.names().collect();
    let names_e: Vec<&str> = acts_e.iter().map(|(n, _)| n.as_str()).collect();
    if names_x != names_e {
        return Err(Error::Contract(format!("activation keys differ: {names_x:?} vs {names_e:?}")));
    }
    let mut total: Option<Var> = None;
    for ((name, target), (_, current)) in acts_x.entries.iter().zip(acts_e) {
        let d = distance_on_tape(tape, target, *current, kind)?;
        let w = tape.scale(d, alpha_for(alpha, name))?;
        total = Some(match total {
            None => w,
            Some(t) => tape.add(t, w)?,
        });
    }
    total.ok_or_else(|| Error::Contract("no activations to match".into()))
}

fn check_finite(op: &str, v: &[f64]) -> Result<()> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric {
            op: op.into(),
            detail: "non-finite logits".into(),
        });
    }
    Ok(())
}

/// `KL(softmax(logits_x) ‖ softmax(logits_e))` with the x side held fixed.
pub fn kl_on_tape(tape: &mut Tape, logits_x: &Tensor, logits_e: Var) -> Result<Var> {
    check_finite("loss_kl", logits_x.data())?;
    if tape.value(logits_e).numel() != logits_x.numel() {
        return Err(Error::dim(format!(
            "loss_kl: {} vs {} logits",
            logits_x.numel(),
            tape.value(logits_e).numel()
        )));
    }
    let p_x = softmax_slice(logits_x.data());
    let entropy_term: f64 = p_x.iter().map(|&p| p * p.max(LOG_FLOOR).ln()).sum();
    let flat = tape.reshape(logits_e, vec![p_x.len()])?;
    let p_e = tape.softmax(flat)?;
    let log_p_e = tape.log(p_e)?;
    let target = tape.constant(Tensor::new(vec![p_x.len()], p_x)?);
    let weighted = tape.mul(log_p_e, target)?;
    let cross = tape.sum(weighted)?;
    tape.affine(cross, -1.0, entropy_term)
}

/// `−log softmax(logits)[y]`, clamped.
pub fn ce_on_tape(tape: &mut Tape, logits: Var, y: usize) -> Result<Var> {
    let n = tape.value(logits).numel();
    if y >= n {
        return Err(Error::Contract(format!("class {y} out of range for {n} logits")));
    }
    let flat = tape.reshape(logits, vec![n])?;
    let p = tape.softmax(flat)?;
    let py = tape.select(p, y)?;
    let log_py = tape.log(py)?;
    tape.scale(log_py, -1.0)
}

/// `‖m‖₁ / (H·W)`.
pub fn area_on_tape(tape: &mut Tape, mask: Var) -> Result<Var> {
    tape.mean(mask)
}

/// `‖m − m²‖₁ / (H·W)`.
pub fn bin_on_tape(tape: &mut Tape, mask: Var) -> Result<Var> {
    let sq = tape.square(mask)?;
    let d = tape.sub(mask, sq)?;
    let s = tape.abs_sum(d)?;
    let n = tape.value(mask).numel() as f64;
    tape.scale(s, 1.0 / n)
}

/// Anisotropic total variation over the last two axes, divided by the
/// number of neighbour pairs.
pub fn tv_on_tape(tape: &mut Tape, mask: Var) -> Result<Var> {
    let shape = tape.shape(mask).to_vec();
    let r = shape.len();
    if r < 2 {
        return Err(Error::dim(format!("loss_tv needs a 2-d mask, got {shape:?}")));
    }
    let (h, w) = (shape[r - 2], shape[r - 1]);
    let outer: usize = shape[..r - 2].iter().product();
    let pairs = outer * (h * w.saturating_sub(1) + h.saturating_sub(1) * w);
    if pairs == 0 {
        return tape.scale(mask, 0.0).and_then(|z| tape.sum(z));
    }
    let mut total: Option<Var> = None;
    for (axis, len) in [(r - 1, w), (r - 2, h)] {
        if len < 2 {
            continue;
        }
        let d = tape.diff(mask, axis)?;
        let s = tape.abs_sum(d)?;
        total = Some(match total {
            None => s,
            Some(t) => tape.add(t, s)?,
        });
    }
    tape.scale(total.unwrap(), 1.0 / pairs as f64)
}

/// `ẽ = m⊙x + (1−m)⊙r` for each background, averaged `−log p_{f(ẽ)}(y)`.
#[allow(clippy::too_many_arguments)]
pub fn rob_on_tape(
    tape: &mut Tape,
    model: &ClassifierModel,
    params: &BoundParams,
    image: &Tensor,
    mask_rgb: Var,
    backgrounds: &[Tensor],
    y: usize,
) -> Result<Var> {
    let mut total: Option<Var> = None;
    for r in backgrounds {
        if r.shape() != image.shape() {
            return Err(Error::dim(format!(
                "background {:?} vs image {:?}",
                r.shape(),
                image.shape()
            )));
        }
        let diff: Vec<f64> = image.data().iter().zip(r.data()).map(|(x, r)| x - r).collect();
        let diff = tape.constant(Tensor::new(image.shape().to_vec(), diff)?);
        let base = tape.constant(r.clone());
        let kept = tape.mul(mask_rgb, diff)?;
        let composite = tape.add(kept, base)?;
        let out = model.forward_on_tape(tape, params, composite)?;
        let ce = ce_on_tape(tape, out.logits, y)?;
        total = Some(match total {
            None => ce,
            Some(t) => tape.add(t, ce)?,
        });
    }
    let total = total.ok_or_else(|| Error::Contract("loss_rob needs at least one background".into()))?;
    tape.scale(total, 1.0 / backgrounds.len() as f64)
}

fn mask_var(tape: &mut Tape, mask: &Mask) -> Result<Var> {
    Ok(tape.constant(mask.to_tensor()))
}

fn eval(f: impl FnOnce(&mut Tape) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::new();
    let v = f(&mut tape)?;
    Ok(tape.value(v).item())
}

pub fn loss_act(acts_x: &ActivationSet, acts_e: &ActivationSet, alpha: &BTreeMap<String, f64>, kind: Distance) -> Result<f64> {
    eval(|tape| {
        let vars: Vec<(String, Var)> = acts_e
            .entries
            .iter()
            .map(|(n, t)| (n.clone(), tape.constant(t.clone())))
            .collect();
        act_on_tape(tape, acts_x, &vars, alpha, kind)
    })
}

pub fn loss_kl(logits_x: &Tensor, logits_e: &Tensor) -> Result<f64> {
    check_finite("loss_kl", logits_e.data())?;
    eval(|tape| {
        let e = tape.constant(logits_e.clone());
        kl_on_tape(tape, logits_x, e)
    })
}

pub fn loss_ce(logits_e: &Tensor, y: usize) -> Result<f64> {
    eval(|tape| {
        let e = tape.constant(logits_e.clone());
        ce_on_tape(tape, e, y)
    })
}

pub fn loss_area(mask: &Mask) -> Result<f64> {
    eval(|tape| {
        let m = mask_var(tape, mask)?;
        area_on_tape(tape, m)
    })
}

pub fn loss_bin(mask: &Mask) -> Result<f64> {
    eval(|tape| {
        let m = mask_var(tape, mask)?;
        bin_on_tape(tape, m)
    })
}

pub fn loss_tv(mask: &Mask) -> Result<f64> {
    eval(|tape| {
        let m = mask_var(tape, mask)?;
        tv_on_tape(tape, m)
    })
}

/// `loss_rob` for a fixed mask, image `[1,3,H,W]` and backgrounds.
pub fn loss_rob(model: &ClassifierModel, image: &Tensor, mask: &Mask, backgrounds: &[Tensor], y: usize) -> Result<f64> {
    eval(|tape| {
        let params = model.bind(tape);
        let channels = match *image.shape() {
            [1, c, h, w] if h == mask.height && w == mask.width => c,
            _ => return Err(Error::dim(format!("{}×{} mask vs image {:?}", mask.height, mask.width, image.shape()))),
        };
        let m = tape.constant(mask.to_tensor().reshaped(vec![1, 1, mask.height, mask.width])?);
        let m = tape.broadcast_channels(m, channels)?;
        rob_on_tape(tape, model, &params, image, m, backgrounds, y)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(values: &[f64]) -> ActivationSet {
        ActivationSet {
            entries: vec![("block1".into(), Tensor::new(vec![values.len()], values.to_vec()).unwrap())],
        }
    }

    fn mask(h: usize, w: usize, v: Vec<f64>) -> Mask {
        Mask::new(h, w, v).unwrap()
    }

    #[test]
    fn act_zero_for_identical() {
        let a = set(&[0.3, 1.2, 0.0]);
        for kind in [Distance::Mse, Distance::Cosine] {
            assert!(loss_act(&a, &a, &BTreeMap::new(), kind).unwrap().abs() < 1e-12);
        }
    }

    #[test]
    fn act_mse_hand_value() {
        let v = loss_act(&set(&[1.0, 2.0]), &set(&[1.0, 4.0]), &BTreeMap::new(), Distance::Mse).unwrap();
        assert!((v - 2.0).abs() < 1e-12);
    }

    #[test]
    fn act_cosine_orthogonal_is_one() {
        // [1,2,3,4] · [2,-1,4,-3] = 0
        let v = loss_act(&set(&[1.0, 2.0, 3.0, 4.0]), &set(&[2.0, -1.0, 4.0, -3.0]), &BTreeMap::new(), Distance::Cosine)
            .unwrap();
        assert!((v - 1.0).abs() < 1e-9);
    }

    #[test]
    fn act_alpha_scales_and_keys_must_match() {
        let alpha = BTreeMap::from([("block1".to_string(), 3.0)]);
        let v = loss_act(&set(&[1.0, 2.0]), &set(&[1.0, 4.0]), &alpha, Distance::Mse).unwrap();
        assert!((v - 6.0).abs() < 1e-12);
        let other = ActivationSet {
            entries: vec![("block9".into(), Tensor::zeros(vec![2]))],
        };
        assert!(matches!(loss_act(&set(&[1.0, 2.0]), &other, &alpha, Distance::Mse), Err(Error::Contract(_))));
    }

    #[test]
    fn kl_values() {
        let x = Tensor::new(vec![3], vec![0.2, -1.0, 2.0]).unwrap();
        assert!(loss_kl(&x, &x).unwrap().abs() < 1e-12);
        // p_x = [0.5, 0.5], p_e = [0.9, 0.1]
        let lx = Tensor::new(vec![2], vec![0.0, 0.0]).unwrap();
        let le = Tensor::new(vec![2], vec![9f64.ln(), 0.0]).unwrap();
        let expected = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        assert!((loss_kl(&lx, &le).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 0.5108).abs() < 1e-4);
        let bad = Tensor::new(vec![2], vec![f64::NAN, 0.0]).unwrap();
        assert!(matches!(loss_kl(&bad, &lx), Err(Error::Numeric { .. })));
        assert!(matches!(loss_kl(&lx, &bad), Err(Error::Numeric { .. })));
    }

    #[test]
    fn ce_values() {
        let confident = Tensor::new(vec![2], vec![0.0, -800.0]).unwrap();
        assert!(loss_ce(&confident, 0).unwrap().abs() < 1e-12);
        let half = Tensor::new(vec![2], vec![1.0, 1.0]).unwrap();
        assert!((loss_ce(&half, 1).unwrap() - 2f64.ln()).abs() < 1e-12);
        let uniform = Tensor::zeros(vec![4]);
        assert!((loss_ce(&uniform, 2).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert!(matches!(loss_ce(&uniform, 4), Err(Error::Contract(_))));
    }

    #[test]
    fn mask_priors() {
        let zero = mask(3, 3, vec![0.0; 9]);
        assert_eq!((loss_area(&zero).unwrap(), loss_bin(&zero).unwrap(), loss_tv(&zero).unwrap()), (0.0, 0.0, 0.0));
        let one = mask(3, 3, vec![1.0; 9]);
        assert_eq!((loss_area(&one).unwrap(), loss_bin(&one).unwrap(), loss_tv(&one).unwrap()), (1.0, 0.0, 0.0));
        let half = mask(2, 2, vec![0.5; 4]);
        assert!((loss_bin(&half).unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(loss_tv(&half).unwrap(), 0.0);
        let stripes = mask(2, 2, vec![0.0, 1.0, 0.0, 1.0]);
        assert!((loss_tv(&stripes).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn tv_matches_pair_enumeration() {
        let (h, w) = (4, 5);
        let values: Vec<f64> = (0..h * w).map(|i| ((i * 7919) % 23) as f64 / 23.0).collect();
        let mut sum = 0.0;
        let mut pairs = 0;
        for i in 0..h {
            for j in 0..w {
                if j + 1 < w {
                    sum += (values[i * w + j] - values[i * w + j + 1]).abs();
                    pairs += 1;
                }
                if i + 1 < h {
                    sum += (values[i * w + j] - values[(i + 1) * w + j]).abs();
                    pairs += 1;
                }
            }
        }
        let got = loss_tv(&mask(h, w, values)).unwrap();
        assert!((got - sum / pairs as f64).abs() < 1e-14);
    }
}
