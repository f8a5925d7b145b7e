//! Small CNN classifier with named post-ReLU activation taps.
//!
//! Each block is `conv3×3 → bias → ReLU → [2×2 avg pool]`; the ReLU output of
//! every block is a tap. A global average pool and one linear layer produce
//! the logits.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::synth::SynthImage;
use crate::tensor::{softmax_slice, Adam, Tape, Tensor, Var};

pub const MAGIC: &[u8; 4] = b"EVDX";
pub const FORMAT_VERSION: u8 = 1;

/// Fixed input standardization `(x − mean) / scale` applied before block 1.
pub const INPUT_MEAN: f64 = 0.5;
pub const INPUT_SCALE: f64 = 0.25;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Architecture {
    pub in_channels: usize,
    pub input_size: usize,
    pub kernel: usize,
    /// Output channels and whether a 2×2 average pool follows, per block.
    pub blocks: Vec<(usize, bool)>,
    pub num_classes: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            in_channels: 3,
            input_size: 64,
            kernel: 3,
            blocks: vec![(16, true), (32, true), (64, true)],
            num_classes: 4,
        }
    }
}

pub fn tap_name(block: usize) -> String {
    format!("block{}", block + 1)
}

/// Post-ReLU activations keyed by tap name, in network order.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationSet {
    pub entries: Vec<(String, Tensor)>,
}

impl ActivationSet {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct ConvBlock {
    weight: Tensor,
    bias: Tensor,
    pool: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierModel {
    arch: Architecture,
    blocks: Vec<ConvBlock>,
    head_weight: Tensor,
    head_bias: Tensor,
    tap_names: Vec<String>,
    frozen: bool,
}

/// Parameters registered on one tape.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Tape output of a classifier pass.
#[derive(Clone, Debug)]
pub struct TapeOutput {
    /// `[N, num_classes]`.
    pub logits: Var,
    pub taps: Vec<(String, Var)>,
}

impl ClassifierModel {
    /// He-initialized weights, zero biases.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        if arch.blocks.is_empty() || arch.num_classes < 2 {
            return Err(Error::Parameter("classifier needs a block and two classes".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut blocks = Vec::new();
        let mut c_in = arch.in_channels;
        let mut spatial = arch.input_size;
        for &(c_out, pool) in &arch.blocks {
            let fan_in = c_in * arch.kernel * arch.kernel;
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
            blocks.push(ConvBlock {
                weight: Tensor::from_fn(vec![c_out, c_in, arch.kernel, arch.kernel], |_| normal.sample(&mut rng)),
                bias: Tensor::zeros(vec![c_out]),
                pool,
            });
            if pool {
                spatial /= 2;
            }
            if spatial == 0 {
                return Err(Error::Parameter("too many pooling blocks for input size".into()));
            }
            c_in = c_out;
        }
        let normal = Normal::new(0.0, (1.0 / c_in as f64).sqrt()).unwrap();
        let head_weight = Tensor::from_fn(vec![arch.num_classes, c_in], |_| normal.sample(&mut rng));
        let head_bias = Tensor::zeros(vec![arch.num_classes]);
        let tap_names = (0..arch.blocks.len()).map(tap_name).collect();
        Ok(Self {
            arch,
            blocks,
            head_weight,
            head_bias,
            tap_names,
            frozen: false,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    pub fn tap_names(&self) -> &[String] {
        &self.tap_names
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    fn params(&self) -> Vec<&Tensor> {
        let mut p: Vec<&Tensor> = self.blocks.iter().flat_map(|b| [&b.weight, &b.bias]).collect();
        p.push(&self.head_weight);
        p.push(&self.head_bias);
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p: Vec<&mut Tensor> = self
            .blocks
            .iter_mut()
            .flat_map(|b| [&mut b.weight, &mut b.bias])
            .collect();
        p.push(&mut self.head_weight);
        p.push(&mut self.head_bias);
        p
    }

    /// Registers parameters; they are trainable leaves unless frozen.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let vars = self
            .params()
            .into_iter()
            .map(|p| {
                if self.frozen {
                    tape.constant(p.clone())
                } else {
                    tape.leaf(p.clone().with_grad())
                }
            })
            .collect();
        BoundParams { vars }
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let a = &self.arch;
        match *shape {
            [_, c, h, w] if c == a.in_channels && h == a.input_size && w == a.input_size => Ok(()),
            _ => Err(Error::dim(format!(
                "classifier expects [N,{},{},{}], got {shape:?}",
                a.in_channels, a.input_size, a.input_size
            ))),
        }
    }

    fn head(&self, tape: &mut Tape, params: &BoundParams, features: Var) -> Result<Var> {
        let n = self.blocks.len();
        let pooled = tape.global_avg_pool(features)?;
        tape.linear(pooled, params.vars[2 * n], params.vars[2 * n + 1])
    }

    /// Forward pass on a tape, recording every tap.
    pub fn forward_on_tape(&self, tape: &mut Tape, params: &BoundParams, image: Var) -> Result<TapeOutput> {
        self.check_input(tape.shape(image))?;
        let pad = self.arch.kernel / 2;
        let mut h = tape.affine(image, 1.0 / INPUT_SCALE, -INPUT_MEAN / INPUT_SCALE)?;
        let mut taps = Vec::with_capacity(self.blocks.len());
        for (i, block) in self.blocks.iter().enumerate() {
            let c = tape.conv2d(h, params.vars[2 * i], 1, pad)?;
            let c = tape.bias_add(c, params.vars[2 * i + 1])?;
            let a = tape.relu(c)?;
            taps.push((self.tap_names[i].clone(), a));
            h = if block.pool { tape.avg_pool2(a)? } else { a };
        }
        let logits = self.head(tape, params, h)?;
        Ok(TapeOutput { logits, taps })
    }

    pub fn tap_index(&self, name: &str) -> Result<usize> {
        self.tap_names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| Error::Contract(format!("unknown tap `{name}`; have {:?}", self.tap_names)))
    }

    /// Continues a forward pass from the activation of tap `name`.
    pub fn forward_from_tap(&self, tape: &mut Tape, params: &BoundParams, name: &str, activation: Var) -> Result<Var> {
        let start = self.tap_index(name)?;
        let pad = self.arch.kernel / 2;
        let mut h = if self.blocks[start].pool {
            tape.avg_pool2(activation)?
        } else {
            activation
        };
        for i in start + 1..self.blocks.len() {
            let c = tape.conv2d(h, params.vars[2 * i], 1, pad)?;
            let c = tape.bias_add(c, params.vars[2 * i + 1])?;
            let a = tape.relu(c)?;
            h = if self.blocks[i].pool { tape.avg_pool2(a)? } else { a };
        }
        self.head(tape, params, h)
    }

    /// Logits (`[num_classes]`) and taps for a single `[1,C,H,W]` image.
    pub fn forward_with_taps(&self, image: &Tensor) -> Result<(Tensor, ActivationSet)> {
        self.check_input(image.shape())?;
        if image.shape()[0] != 1 {
            return Err(Error::dim(format!("expected a batch of one, got {:?}", image.shape())));
        }
        let mut tape = Tape::new();
        let params = self.bind_constants(&mut tape);
        let x = tape.constant(image.clone());
        let out = self.forward_on_tape(&mut tape, &params, x)?;
        let logits = tape.value(out.logits).clone().reshaped(vec![self.arch.num_classes])?;
        let entries = out
            .taps
            .iter()
            .map(|(n, v)| (n.clone(), tape.value(*v).clone()))
            .collect();
        Ok((logits, ActivationSet { entries }))
    }

    pub fn logits(&self, image: &Tensor) -> Result<Tensor> {
        Ok(self.forward_with_taps(image)?.0)
    }

    /// Predicted class (lowest index on ties) and softmax probabilities.
    pub fn predict(&self, image: &Tensor) -> Result<(usize, Vec<f64>)> {
        let logits = self.logits(image)?;
        Ok((logits.argmax(), softmax_slice(logits.data())))
    }

    fn bind_constants(&self, tape: &mut Tape) -> BoundParams {
        BoundParams {
            vars: self.params().into_iter().map(|p| tape.constant(p.clone())).collect(),
        }
    }

    /// Batched class predictions for `[N,C,H,W]`.
    pub fn predict_batch(&self, batch: &Tensor) -> Result<Vec<usize>> {
        self.check_input(batch.shape())?;
        let mut tape = Tape::new();
        let params = self.bind_constants(&mut tape);
        let x = tape.constant(batch.clone());
        let out = self.forward_on_tape(&mut tape, &params, x)?;
        let k = self.arch.num_classes;
        Ok(tape.value(out.logits).data().chunks(k).map(crate::tensor::argmax).collect())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(FORMAT_VERSION);
        let put = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
        let a = &self.arch;
        put(&mut out, a.in_channels);
        put(&mut out, a.input_size);
        put(&mut out, a.kernel);
        put(&mut out, a.num_classes);
        put(&mut out, a.blocks.len());
        for &(c, pool) in &a.blocks {
            put(&mut out, c);
            out.push(pool as u8);
        }
        for p in self.params() {
            for v in p.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Loaded models are always frozen.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::Format {
                offset: 0,
                detail: format!(
                    "magic mismatch: expected {:?}, found {:?}",
                    String::from_utf8_lossy(MAGIC),
                    String::from_utf8_lossy(magic)
                ),
            });
        }
        let version = r.take(1)?[0];
        if version != FORMAT_VERSION {
            return Err(Error::Format {
                offset: 4,
                detail: format!("version mismatch: expected {FORMAT_VERSION}, found {version}"),
            });
        }
        let in_channels = r.u32()?;
        let input_size = r.u32()?;
        let kernel = r.u32()?;
        let num_classes = r.u32()?;
        let n_blocks = r.u32()?;
        if n_blocks == 0 || n_blocks > 64 || kernel == 0 || kernel > 15 || num_classes < 2 || num_classes > 1 << 16 {
            return Err(Error::Format {
                offset: r.pos,
                detail: "implausible architecture descriptor".into(),
            });
        }
        let mut blocks = Vec::with_capacity(n_blocks);
        for _ in 0..n_blocks {
            let c = r.u32()?;
            let pool = match r.take(1)?[0] {
                0 => false,
                1 => true,
                b => {
                    return Err(Error::Format {
                        offset: r.pos - 1,
                        detail: format!("bad pool flag {b}"),
                    })
                }
            };
            blocks.push((c, pool));
        }
        let arch = Architecture {
            in_channels,
            input_size,
            kernel,
            blocks,
            num_classes,
        };
        let mut model = Self::new(arch, 0).map_err(|e| Error::Format {
            offset: r.pos,
            detail: e.to_string(),
        })?;
        let expected: usize = model.params().iter().map(|p| p.numel()).sum();
        if r.bytes.len() - r.pos != expected * 8 {
            return Err(Error::Format {
                offset: r.bytes.len(),
                detail: format!(
                    "expected {} weight bytes, found {}",
                    expected * 8,
                    r.bytes.len() - r.pos
                ),
            });
        }
        for p in model.params_mut() {
            for v in p.data_mut() {
                *v = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
            }
        }
        model.frozen = true;
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?)
    }

    /// SHA-256 of the serialized model, hex encoded.
    pub fn weight_digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format {
                offset: self.bytes.len(),
                detail: format!("truncated: needed {n} bytes at offset {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Random horizontal flips.
    pub flip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            learning_rate: 3e-3,
            batch_size: 8,
            seed: 42,
            flip: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    /// Weight digest after every epoch.
    pub epoch_digests: Vec<String>,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
    pub seconds: f64,
}

fn flip_horizontal(data: &mut [f64], width: usize) {
    for row in data.chunks_mut(width) {
        row.reverse();
    }
}

/// A labelled `[C,H,W]` training or test image.
pub trait Labeled {
    fn pixels(&self) -> &Tensor;
    fn label(&self) -> usize;
}

impl Labeled for SynthImage {
    fn pixels(&self) -> &Tensor {
        &self.pixels
    }
    fn label(&self) -> usize {
        self.label
    }
}

impl Labeled for crate::synth::LoadedImage {
    fn pixels(&self) -> &Tensor {
        &self.pixels
    }
    fn label(&self) -> usize {
        self.label
    }
}

/// Fraction of `images` the model labels correctly.
pub fn accuracy<S: Labeled>(model: &ClassifierModel, images: &[S]) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::Data("accuracy of an empty set".into()));
    }
    let mut correct = 0;
    for chunk in images.chunks(32) {
        let batch = stack(chunk.iter().map(Labeled::pixels))?;
        let preds = model.predict_batch(&batch)?;
        correct += preds.iter().zip(chunk).filter(|(p, i)| **p == i.label()).count();
    }
    Ok(correct as f64 / images.len() as f64)
}

/// Stacks `[C,H,W]` tensors into `[N,C,H,W]`.
pub fn stack<'a>(images: impl IntoIterator<Item = &'a Tensor>) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut shape: Option<Vec<usize>> = None;
    let mut n = 0;
    for t in images {
        match &shape {
            None => shape = Some(t.shape().to_vec()),
            Some(s) if s.as_slice() != t.shape() => {
                return Err(Error::dim(format!("cannot stack {s:?} with {:?}", t.shape())))
            }
            _ => {}
        }
        data.extend_from_slice(t.data());
        n += 1;
    }
    let mut full = vec![n];
    full.extend(shape.ok_or_else(|| Error::Data("nothing to stack".into()))?);
    Tensor::new(full, data)
}

/// Trains a fresh classifier and returns it frozen.
pub fn train_classifier<S: Labeled>(
    arch: Architecture,
    train: &[S],
    test: &[S],
    cfg: &TrainConfig,
) -> Result<(ClassifierModel, TrainReport)> {
    let start = std::time::Instant::now();
    let mut per_class = vec![0usize; arch.num_classes];
    for img in train {
        if img.label() >= arch.num_classes {
            return Err(Error::Data(format!("label {} out of range", img.label())));
        }
        per_class[img.label()] += 1;
    }
    if per_class.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(Error::Data("training needs at least two classes".into()));
    }
    if let Some(c) = per_class.iter().position(|&c| c == 0) {
        return Err(Error::Data(format!("class {c} has no training images")));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::Parameter("epochs and batch size must be positive".into()));
    }

    let mut model = ClassifierModel::new(arch, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED);
    let mut opt = Adam::new(cfg.learning_rate);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut report = TrainReport {
        epoch_losses: Vec::new(),
        epoch_digests: Vec::new(),
        train_accuracy: 0.0,
        test_accuracy: None,
        seconds: 0.0,
    };
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut images: Vec<Tensor> = chunk.iter().map(|&i| train[i].pixels().clone()).collect();
            if cfg.flip {
                for img in &mut images {
                    if rand::Rng::random_bool(&mut rng, 0.5) {
                        let w = img.shape()[2];
                        flip_horizontal(img.data_mut(), w);
                    }
                }
            }
            let batch = stack(&images)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| train[i].label()).collect();

            let mut tape = Tape::new();
            let params = model.bind(&mut tape);
            let x = tape.constant(batch);
            let out = model.forward_on_tape(&mut tape, &params, x)?;
            let loss = tape.softmax_cross_entropy(out.logits, labels)?;
            tape.backward(loss)?;
            total += tape.value(loss).item() * chunk.len() as f64;

            let grads: Vec<Vec<f64>> = params
                .vars
                .iter()
                .map(|&v| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_default())
                .collect();
            let grad_refs: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
            opt.step(&mut model.params_mut(), &grad_refs)?;
        }
        report.epoch_losses.push(total / train.len() as f64);
        report.epoch_digests.push(model.weight_digest());
    }
    model.freeze();
    report.train_accuracy = accuracy(&model, train)?;
    if !test.is_empty() {
        report.test_accuracy = Some(accuracy(&model, test)?);
    }
    report.seconds = start.elapsed().as_secs_f64();
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Architecture {
        Architecture {
            in_channels: 3,
            input_size: 8,
            kernel: 3,
            blocks: vec![(4, true), (6, false)],
            num_classes: 3,
        }
    }

    #[test]
    fn taps_are_nonnegative_for_zero_image() {
        let mut m = ClassifierModel::new(Architecture::default(), 3).unwrap();
        m.freeze();
        let (logits, acts) = m.forward_with_taps(&Tensor::zeros(vec![1, 3, 64, 64])).unwrap();
        assert_eq!(logits.numel(), 4);
        assert_eq!(acts.names().collect::<Vec<_>>(), ["block1", "block2", "block3"]);
        for (_, a) in &acts.entries {
            assert!(a.data().iter().all(|&v| v >= 0.0));
        }
        assert_eq!(acts.get("block3").unwrap().shape(), &[1, 64, 16, 16]);
    }

    #[test]
    fn forward_is_deterministic() {
        let m = ClassifierModel::new(tiny(), 1).unwrap();
        let x = Tensor::from_fn(vec![1, 3, 8, 8], |i| (i as f64 * 0.37).sin());
        assert_eq!(m.logits(&x).unwrap(), m.logits(&x).unwrap());
    }

    #[test]
    fn wrong_input_shape() {
        let m = ClassifierModel::new(tiny(), 1).unwrap();
        assert!(matches!(m.logits(&Tensor::zeros(vec![1, 3, 9, 8])), Err(Error::Dimension(_))));
        assert!(matches!(m.logits(&Tensor::zeros(vec![1, 1, 8, 8])), Err(Error::Dimension(_))));
    }

    #[test]
    fn bytes_round_trip() {
        let m = ClassifierModel::new(tiny(), 9).unwrap();
        let back = ClassifierModel::from_bytes(&m.to_bytes()).unwrap();
        assert!(back.is_frozen());
        let x = Tensor::from_fn(vec![1, 3, 8, 8], |i| (i as f64).cos());
        assert_eq!(m.logits(&x).unwrap(), back.logits(&x).unwrap());
    }

    #[test]
    fn corrupt_files() {
        let bytes = ClassifierModel::new(tiny(), 9).unwrap().to_bytes();
        let err = ClassifierModel::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");

        let mut wrong = bytes.clone();
        wrong[..4].copy_from_slice(b"PNG!");
        let err = ClassifierModel::from_bytes(&wrong).unwrap_err().to_string();
        assert!(err.contains("magic mismatch") && err.contains("EVDX") && err.contains("PNG!"), "{err}");

        let mut version = bytes.clone();
        version[4] = 9;
        let err = ClassifierModel::from_bytes(&version).unwrap_err().to_string();
        assert!(err.contains("version mismatch"), "{err}");

        assert!(ClassifierModel::from_bytes(&bytes[..2]).is_err());
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut m = ClassifierModel::new(tiny(), 2).unwrap();
        m.freeze();
        let mut tape = Tape::new();
        let params = m.bind(&mut tape);
        let x = tape.leaf(Tensor::full(vec![1, 3, 8, 8], 0.5).with_grad());
        let out = m.forward_on_tape(&mut tape, &params, x).unwrap();
        let s = tape.sum(out.logits).unwrap();
        tape.backward(s).unwrap();
        assert!(params.vars().iter().all(|&v| tape.grad(v).is_none()));
        assert!(tape.grad(x).is_some());
    }

    #[test]
    fn forward_from_tap_matches_full_pass() {
        let m = ClassifierModel::new(tiny(), 4).unwrap();
        let img = Tensor::from_fn(vec![1, 3, 8, 8], |i| ((i * 7) % 11) as f64 / 11.0);
        let (logits, acts) = m.forward_with_taps(&img).unwrap();
        for name in m.tap_names().to_vec() {
            let mut tape = Tape::new();
            let params = m.bind(&mut tape);
            let a = tape.constant(acts.get(&name).unwrap().clone());
            let l = m.forward_from_tap(&mut tape, &params, &name, a).unwrap();
            assert_eq!(tape.value(l).data(), logits.data());
        }
    }
}
