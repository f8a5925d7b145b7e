//! Lightweight U-Net mask generator.
//!
//! ```text
//! x ─ enc1(16) ───────────────────────────── concat ─ dec2(8) ─ 1×1 ─ σ ─ m
//!       └ pool ─ enc2(32) ──────── concat ─ dec1(16) ┘ up
//!                  └ pool ─ mid(32) ┘ up
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::classifier::{INPUT_MEAN, INPUT_SCALE};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub const ENCODER_CHANNELS: [usize; 2] = [16, 32];
pub const BOTTLENECK_CHANNELS: usize = 32;
pub const DECODER_CHANNELS: [usize; 2] = [16, 8];
const HEAD_INIT_STD: f64 = 0.05;
/// The head bias enters as `HEAD_BIAS_GAIN · b`, so the overall mask level
/// adapts faster than the spatial weights; uniform pressure from the area
/// prior is then absorbed by the bias rather than by the decoder units.
pub const HEAD_BIAS_GAIN: f64 = 5.0;

#[derive(Clone, Debug, PartialEq)]
struct Conv {
    weight: Tensor,
    bias: Tensor,
}

impl Conv {
    fn he(rng: &mut ChaCha8Rng, c_out: usize, c_in: usize, k: usize) -> Self {
        let normal = Normal::new(0.0, (2.0 / (c_in * k * k) as f64).sqrt()).unwrap();
        Self {
            weight: Tensor::from_fn(vec![c_out, c_in, k, k], |_| normal.sample(rng)),
            bias: Tensor::zeros(vec![c_out]),
        }
    }
}

impl Conv {
    /// 1×1 conv with small weights, so the initial mask sits near 0.5.
    fn small(rng: &mut ChaCha8Rng, c_out: usize, c_in: usize, std: f64) -> Self {
        let normal = Normal::new(0.0, std).unwrap();
        Self {
            weight: Tensor::from_fn(vec![c_out, c_in, 1, 1], |_| normal.sample(rng)),
            bias: Tensor::zeros(vec![c_out]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskNet {
    in_channels: usize,
    convs: Vec<Conv>,
}

const ENC1: usize = 0;
const ENC2: usize = 1;
const MID: usize = 2;
const DEC1: usize = 3;
const DEC2: usize = 4;
const HEAD: usize = 5;

impl MaskNet {
    pub fn new(in_channels: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [e1, e2] = ENCODER_CHANNELS;
        let [d1, d2] = DECODER_CHANNELS;
        let convs = vec![
            Conv::he(&mut rng, e1, in_channels, 3),
            Conv::he(&mut rng, e2, e1, 3),
            Conv::he(&mut rng, BOTTLENECK_CHANNELS, e2, 3),
            Conv::he(&mut rng, d1, BOTTLENECK_CHANNELS + e2, 3),
            Conv::he(&mut rng, d2, d1 + e1, 3),
            Conv::small(&mut rng, 1, d2, HEAD_INIT_STD),
        ];
        Self { in_channels, convs }
    }

    pub fn num_parameters(&self) -> usize {
        self.convs.iter().map(|c| c.weight.numel() + c.bias.numel()).sum()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.convs.iter_mut().flat_map(|c| [&mut c.weight, &mut c.bias]).collect()
    }

    /// Registers all parameters as trainable leaves, in `params_mut` order.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.convs
            .iter()
            .flat_map(|c| [c.weight.clone().with_grad(), c.bias.clone().with_grad()])
            .map(|t| tape.leaf(t))
            .collect()
    }

    /// Mask logits → sigmoid; output `[1,1,H,W]`. H and W must be divisible by 4.
    pub fn forward(&self, tape: &mut Tape, params: &[Var], image: Var) -> Result<Var> {
        match *tape.shape(image) {
            [1, c, h, w] if c == self.in_channels && h % 4 == 0 && w % 4 == 0 && h >= 4 && w >= 4 => {}
            ref s => {
                return Err(Error::dim(format!(
                    "mask net expects [1,{},H,W] with H,W divisible by 4, got {s:?}",
                    self.in_channels
                )))
            }
        }
        let conv = |tape: &mut Tape, i: usize, x: Var, pad: usize| -> Result<Var> {
            let c = tape.conv2d(x, params[2 * i], 1, pad)?;
            tape.bias_add(c, params[2 * i + 1])
        };
        let block = |tape: &mut Tape, i: usize, x: Var| -> Result<Var> {
            let c = conv(tape, i, x, 1)?;
            tape.leaky_relu(c)
        };
        let centered = tape.affine(image, 1.0 / INPUT_SCALE, -INPUT_MEAN / INPUT_SCALE)?;
        let skip1 = block(tape, ENC1, centered)?;
        let down1 = tape.avg_pool2(skip1)?;
        let skip2 = block(tape, ENC2, down1)?;
        let down2 = tape.avg_pool2(skip2)?;
        let mid = block(tape, MID, down2)?;

        let up1 = tape.upsample_nearest2x(mid)?;
        let cat1 = tape.concat_channels(up1, skip2)?;
        let dec1 = block(tape, DEC1, cat1)?;
        let up2 = tape.upsample_nearest2x(dec1)?;
        let cat2 = tape.concat_channels(up2, skip1)?;
        let dec2 = block(tape, DEC2, cat2)?;

        let c = tape.conv2d(dec2, params[2 * HEAD], 1, 0)?;
        let b = tape.scale(params[2 * HEAD + 1], HEAD_BIAS_GAIN)?;
        let logits = tape.bias_add(c, b)?;
        tape.sigmoid(logits)
    }

    /// Mask values for `image` without recording gradients.
    pub fn predict(&self, image: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params: Vec<Var> = self
            .convs
            .iter()
            .flat_map(|c| [c.weight.clone(), c.bias.clone()])
            .map(|t| tape.constant(t))
            .collect();
        let x = tape.constant(image.clone());
        let m = self.forward(&mut tape, &params, x)?;
        Ok(tape.value(m).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_shape_and_range() {
        let net = MaskNet::new(3, 0);
        let x = Tensor::from_fn(vec![1, 3, 16, 20], |i| (i % 13) as f64 / 13.0);
        let m = net.predict(&x).unwrap();
        assert_eq!(m.shape(), &[1, 1, 16, 20]);
        assert!(m.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn seeded_initialization() {
        assert_eq!(MaskNet::new(3, 5), MaskNet::new(3, 5));
        assert_ne!(MaskNet::new(3, 5), MaskNet::new(3, 6));
    }

    #[test]
    fn rejects_odd_sizes() {
        let net = MaskNet::new(3, 0);
        assert!(net.predict(&Tensor::zeros(vec![1, 3, 10, 8])).is_err());
        assert!(net.predict(&Tensor::zeros(vec![1, 2, 8, 8])).is_err());
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let net = MaskNet::new(3, 1);
        let mut tape = Tape::new();
        let params = net.bind(&mut tape);
        let x = tape.constant(Tensor::from_fn(vec![1, 3, 8, 8], |i| ((i * 31) % 17) as f64 / 17.0));
        let m = net.forward(&mut tape, &params, x).unwrap();
        let sq = tape.square(m).unwrap();
        let loss = tape.mean(sq).unwrap();
        tape.backward(loss).unwrap();
        for (i, &p) in params.iter().enumerate() {
            let g = tape.grad(p).unwrap_or_else(|| panic!("param {i} has no grad"));
            assert!(g.iter().any(|&v| v != 0.0), "param {i} grad is all zero");
        }
    }
}
