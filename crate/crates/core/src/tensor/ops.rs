//! Built-in differentiable operations and their [`Tape`] constructors.

use super::conv::{gemm, Conv2d};
use super::tape::{Function, Tape, Var};
use super::Tensor;
use crate::error::{Error, Result};

/// Floor applied before every logarithm.
pub const LOG_FLOOR: f64 = 1e-12;

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Result<Tensor> {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
}

fn nchw(op: &str, t: &Tensor) -> Result<[usize; 4]> {
    match *t.shape() {
        [n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(Error::dim(format!("{op} expects [N,C,H,W], got {:?}", t.shape()))),
    }
}

macro_rules! unary_op {
    ($ty:ident, $name:literal, |$x:ident| $fwd:expr, |$bx:ident, $by:ident| $deriv:expr) => {
        #[derive(Clone, Copy, Debug)]
        pub struct $ty;

        impl Function for $ty {
            fn name(&self) -> &str {
                $name
            }

            fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
                map(inputs[0], |$x| $fwd)
            }

            fn backward(
                &self,
                inputs: &[&Tensor],
                output: &Tensor,
                grad_out: &[f64],
                _needs: &[bool],
            ) -> Vec<Option<Vec<f64>>> {
                let g = inputs[0]
                    .data()
                    .iter()
                    .zip(output.data())
                    .zip(grad_out)
                    .map(|((&$bx, &$by), &g)| g * ($deriv))
                    .collect();
                vec![Some(g)]
            }
        }
    };
}

unary_op!(Relu, "relu", |x| x.max(0.0), |x, _y| if x > 0.0 { 1.0 } else { 0.0 });
/// Negative-side slope of [`LeakyRelu`].
pub const LEAKY_SLOPE: f64 = 0.1;
unary_op!(LeakyRelu, "leaky_relu", |x| if x > 0.0 { x } else { LEAKY_SLOPE * x }, |x, _y| if x > 0.0 {
    1.0
} else {
    LEAKY_SLOPE
});
unary_op!(Sigmoid, "sigmoid", |x| 1.0 / (1.0 + (-x).exp()), |_x, y| y * (1.0 - y));
unary_op!(Square, "square", |x| x * x, |x, _y| 2.0 * x);
unary_op!(Abs, "abs", |x| x.abs(), |x, _y| if x > 0.0 {
    1.0
} else if x < 0.0 {
    -1.0
} else {
    0.0
});
unary_op!(Sqrt, "sqrt", |x| x.max(0.0).sqrt(), |_x, y| if y > 0.0 {
    0.5 / y
} else {
    0.0
});

/// Natural log with the input clamped to at least `floor`.
#[derive(Clone, Copy, Debug)]
pub struct Log {
    pub floor: f64,
}

impl Function for Log {
    fn name(&self) -> &str {
        "log"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        map(inputs[0], |x| x.max(self.floor).ln())
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let d = inputs[0]
            .data()
            .iter()
            .zip(g)
            .map(|(&x, &g)| if x > self.floor { g / x } else { 0.0 })
            .collect();
        vec![Some(d)]
    }
}

/// `scale * x + shift`, elementwise.
#[derive(Clone, Copy, Debug)]
pub struct Affine {
    pub scale: f64,
    pub shift: f64,
}

impl Function for Affine {
    fn name(&self) -> &str {
        "affine"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        map(inputs[0], |x| self.scale * x + self.shift)
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![Some(g.iter().map(|g| g * self.scale).collect())]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

impl Function for Binary {
    fn name(&self) -> &str {
        match self {
            Binary::Add => "add",
            Binary::Sub => "subtract",
            Binary::Mul => "multiply",
            Binary::Div => "divide",
        }
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (a, b) = (inputs[0], inputs[1]);
        same_shape(self.name(), a, b)?;
        let f = match self {
            Binary::Add => |x: f64, y: f64| x + y,
            Binary::Sub => |x: f64, y: f64| x - y,
            Binary::Mul => |x: f64, y: f64| x * y,
            Binary::Div => |x: f64, y: f64| x / y,
        };
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(a.shape().to_vec(), data)?;
        if !out.is_finite() {
            return Err(Error::Numeric {
                op: self.name().into(),
                detail: "non-finite result".into(),
            });
        }
        Ok(out)
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (a, b) = (inputs[0].data(), inputs[1].data());
        let (da, db): (Vec<f64>, Vec<f64>) = match self {
            Binary::Add => (g.to_vec(), g.to_vec()),
            Binary::Sub => (g.to_vec(), g.iter().map(|v| -v).collect()),
            Binary::Mul => (
                g.iter().zip(b).map(|(g, y)| g * y).collect(),
                g.iter().zip(a).map(|(g, x)| g * x).collect(),
            ),
            Binary::Div => (
                g.iter().zip(b).map(|(g, y)| g / y).collect(),
                g.iter()
                    .zip(a.iter().zip(b))
                    .map(|(g, (x, y))| -g * x / (y * y))
                    .collect(),
            ),
        };
        vec![needs[0].then_some(da), needs[1].then_some(db)]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Sum;

impl Function for Sum {
    fn name(&self) -> &str {
        "sum"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        Ok(Tensor::scalar(inputs[0].data().iter().sum()))
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![Some(vec![g[0]; inputs[0].numel()])]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Mean;

impl Function for Mean {
    fn name(&self) -> &str {
        "mean"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let x = inputs[0];
        Ok(Tensor::scalar(x.data().iter().sum::<f64>() / x.numel() as f64))
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let n = inputs[0].numel();
        vec![Some(vec![g[0] / n as f64; n])]
    }
}

/// Sum of absolute values (L1 norm).
#[derive(Clone, Copy, Debug)]
pub struct AbsSum;

impl Function for AbsSum {
    fn name(&self) -> &str {
        "abs_sum"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        Ok(Tensor::scalar(inputs[0].data().iter().map(|v| v.abs()).sum()))
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let d = inputs[0]
            .data()
            .iter()
            .map(|&x| g[0] * if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 })
            .collect();
        vec![Some(d)]
    }
}

/// Softmax over the last axis.
#[derive(Clone, Copy, Debug)]
pub struct Softmax;

impl Function for Softmax {
    fn name(&self) -> &str {
        "softmax"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let x = inputs[0];
        let width = *x.shape().last().unwrap();
        let data = x.data().chunks(width).flat_map(super::softmax_slice).collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    fn backward(&self, _: &[&Tensor], out: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let width = *out.shape().last().unwrap();
        let mut d = Vec::with_capacity(g.len());
        for (p, g) in out.data().chunks(width).zip(g.chunks(width)) {
            let dot: f64 = p.iter().zip(g).map(|(p, g)| p * g).sum();
            d.extend(p.iter().zip(g).map(|(p, g)| p * (g - dot)));
        }
        vec![Some(d)]
    }
}

/// Mean cross-entropy of `[N, K]` logits against integer labels.
#[derive(Clone, Debug)]
pub struct SoftmaxCrossEntropy {
    pub labels: Vec<usize>,
}

impl Function for SoftmaxCrossEntropy {
    fn name(&self) -> &str {
        "softmax_cross_entropy"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let x = inputs[0];
        let &[n, k] = x.shape() else {
            return Err(Error::dim(format!("cross entropy expects [N,K], got {:?}", x.shape())));
        };
        if self.labels.len() != n || self.labels.iter().any(|&y| y >= k) {
            return Err(Error::Contract("cross entropy labels do not match logits".into()));
        }
        let loss: f64 = x
            .data()
            .chunks(k)
            .zip(&self.labels)
            .map(|(row, &y)| -super::softmax_slice(row)[y].max(LOG_FLOOR).ln())
            .sum();
        Ok(Tensor::scalar(loss / n as f64))
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let x = inputs[0];
        let (n, k) = (x.shape()[0], x.shape()[1]);
        let mut d = Vec::with_capacity(n * k);
        for (row, &y) in x.data().chunks(k).zip(&self.labels) {
            let p = super::softmax_slice(row);
            d.extend(
                p.iter()
                    .enumerate()
                    .map(|(i, &p)| g[0] * (p - if i == y { 1.0 } else { 0.0 }) / n as f64),
            );
        }
        vec![Some(d)]
    }
}

/// Picks one element (flat index) as a scalar.
#[derive(Clone, Copy, Debug)]
pub struct Select {
    pub index: usize,
}

impl Function for Select {
    fn name(&self) -> &str {
        "select"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let x = inputs[0];
        x.data()
            .get(self.index)
            .map(|&v| Tensor::scalar(v))
            .ok_or_else(|| Error::Contract(format!("index {} out of range {}", self.index, x.numel())))
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let mut d = vec![0.0; inputs[0].numel()];
        d[self.index] = g[0];
        vec![Some(d)]
    }
}

#[derive(Clone, Debug)]
pub struct Reshape {
    pub shape: Vec<usize>,
}

impl Function for Reshape {
    fn name(&self) -> &str {
        "reshape"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        inputs[0].clone().reshaped(self.shape.clone())
    }

    fn backward(&self, _: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        vec![Some(g.to_vec())]
    }
}

/// Adds a per-channel bias `[C]` to `[N,C,H,W]`.
#[derive(Clone, Copy, Debug)]
pub struct BiasAdd;

impl Function for BiasAdd {
    fn name(&self) -> &str {
        "bias_add"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (x, b) = (inputs[0], inputs[1]);
        let [_, c, h, w] = nchw("bias_add", x)?;
        if b.shape() != [c] {
            return Err(Error::dim(format!("bias shape {:?} for {c} channels", b.shape())));
        }
        let plane = h * w;
        let data = x
            .data()
            .chunks(plane)
            .enumerate()
            .flat_map(|(i, p)| {
                let bias = b.data()[i % c];
                p.iter().map(move |v| v + bias)
            })
            .collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let [_, c, h, w] = nchw("bias_add", inputs[0]).unwrap();
        let db = needs[1].then(|| {
            let mut db = vec![0.0; c];
            for (i, p) in g.chunks(h * w).enumerate() {
                db[i % c] += p.iter().sum::<f64>();
            }
            db
        });
        vec![needs[0].then(|| g.to_vec()), db]
    }
}

/// 2×2 average pooling with stride 2 (odd trailing rows/columns dropped).
#[derive(Clone, Copy, Debug)]
pub struct AvgPool2;

impl Function for AvgPool2 {
    fn name(&self) -> &str {
        "avg_pool2"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let x = inputs[0];
        let [n, c, h, w] = nchw("avg_pool2", x)?;
        let (oh, ow) = (h / 2, w / 2);
        if oh == 0 || ow == 0 {
            return Err(Error::dim(format!("avg_pool2 on {h}x{w} input")));
        }
        let mut out = vec![0.0; n * c * oh * ow];
        for (src, dst) in x.data().chunks(h * w).zip(out.chunks_mut(oh * ow)) {
            for y in 0..oh {
                for xx in 0..ow {
                    let i = 2 * y * w + 2 * xx;
                    dst[y * ow + xx] = 0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
                }
            }
        }
        Tensor::new(vec![n, c, oh, ow], out)
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let [_, _, h, w] = nchw("avg_pool2", inputs[0]).unwrap();
        let (oh, ow) = (h / 2, w / 2);
        let mut d = vec![0.0; inputs[0].numel()];
        for (dst, src) in d.chunks_mut(h * w).zip(g.chunks(oh * ow)) {
            for y in 0..oh {
                for xx in 0..ow {
                    let v = 0.25 * src[y * ow + xx];
                    let i = 2 * y * w + 2 * xx;
                    dst[i] += v;
                    dst[i + 1] += v;
                    dst[i + w] += v;
                    dst[i + w + 1] += v;
                }
            }
        }
        vec![Some(d)]
    }
}

/// `[N,C,H,W]` → `[N,C]` spatial mean.
#[derive(Clone, Copy, Debug)]
pub struct GlobalAvgPool;

impl Function for GlobalAvgPool {
    fn name(&self) -> &str {
        "global_avg_pool"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let x = inputs[0];
        let [n, c, h, w] = nchw("global_avg_pool", x)?;
        let plane = (h * w) as f64;
        let data = x.data().chunks(h * w).map(|p| p.iter().sum::<f64>() / plane).collect();
        Tensor::new(vec![n, c], data)
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let [_, _, h, w] = nchw("global_avg_pool", inputs[0]).unwrap();
        let plane = h * w;
        let d = g.iter().flat_map(|&g| std::iter::repeat_n(g / plane as f64, plane)).collect();
        vec![Some(d)]
    }
}

/// `x[N,I] · w[O,I]ᵀ + b[O]`.
#[derive(Clone, Copy, Debug)]
pub struct Linear;

impl Function for Linear {
    fn name(&self) -> &str {
        "linear"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (x, w, b) = (inputs[0], inputs[1], inputs[2]);
        let (&[n, i], &[o, wi]) = (x.shape(), w.shape()) else {
            return Err(Error::dim(format!("linear: x {:?}, w {:?}", x.shape(), w.shape())));
        };
        if wi != i || b.shape() != [o] {
            return Err(Error::dim(format!(
                "linear: x {:?}, w {:?}, b {:?}",
                x.shape(),
                w.shape(),
                b.shape()
            )));
        }
        let mut out: Vec<f64> = (0..n).flat_map(|_| b.data().iter().copied()).collect();
        gemm(n, i, o, x.data(), (i as isize, 1), w.data(), (1, i as isize), 1.0, &mut out);
        Tensor::new(vec![n, o], out)
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let (n, i, o) = (x.shape()[0], x.shape()[1], w.shape()[0]);
        let dx = needs[0].then(|| {
            let mut dx = vec![0.0; n * i];
            gemm(n, o, i, g, (o as isize, 1), w.data(), (i as isize, 1), 0.0, &mut dx);
            dx
        });
        let dw = needs[1].then(|| {
            let mut dw = vec![0.0; o * i];
            gemm(o, n, i, g, (1, o as isize), x.data(), (i as isize, 1), 0.0, &mut dw);
            dw
        });
        let db = needs[2].then(|| {
            let mut db = vec![0.0; o];
            for row in g.chunks(o) {
                db.iter_mut().zip(row).for_each(|(d, g)| *d += g);
            }
            db
        });
        vec![dx, dw, db]
    }
}

/// Nearest-neighbour 2× upsampling of `[N,C,H,W]`.
#[derive(Clone, Copy, Debug)]
pub struct UpsampleNearest2x;

impl Function for UpsampleNearest2x {
    fn name(&self) -> &str {
        "upsample_nearest2x"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let x = inputs[0];
        let [n, c, h, w] = nchw("upsample_nearest2x", x)?;
        let ow = 2 * w;
        let mut out = vec![0.0; n * c * 4 * h * w];
        for (src, dst) in x.data().chunks(h * w).zip(out.chunks_mut(4 * h * w)) {
            for (i, d) in dst.iter_mut().enumerate() {
                *d = src[(i / ow / 2) * w + (i % ow) / 2];
            }
        }
        Tensor::new(vec![n, c, 2 * h, 2 * w], out)
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let [_, _, h, w] = nchw("upsample_nearest2x", inputs[0]).unwrap();
        let ow = 2 * w;
        let mut d = vec![0.0; inputs[0].numel()];
        for (dst, src) in d.chunks_mut(h * w).zip(g.chunks(4 * h * w)) {
            for (i, g) in src.iter().enumerate() {
                dst[(i / ow / 2) * w + (i % ow) / 2] += g;
            }
        }
        vec![Some(d)]
    }
}

/// Concatenates two `[N,·,H,W]` tensors along the channel axis.
#[derive(Clone, Copy, Debug)]
pub struct ConcatChannels;

impl Function for ConcatChannels {
    fn name(&self) -> &str {
        "concat_channels"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (a, b) = (inputs[0], inputs[1]);
        let [n, ca, h, w] = nchw("concat_channels", a)?;
        let [nb, cb, hb, wb] = nchw("concat_channels", b)?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::dim(format!(
                "concat_channels: {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let (sa, sb) = (ca * h * w, cb * h * w);
        let mut out = Vec::with_capacity(n * (sa + sb));
        for i in 0..n {
            out.extend_from_slice(&a.data()[i * sa..(i + 1) * sa]);
            out.extend_from_slice(&b.data()[i * sb..(i + 1) * sb]);
        }
        Tensor::new(vec![n, ca + cb, h, w], out)
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
        let n = inputs[0].shape()[0];
        let (sa, sb) = (inputs[0].numel() / n, inputs[1].numel() / n);
        let (mut da, mut db) = (Vec::with_capacity(n * sa), Vec::with_capacity(n * sb));
        for chunk in g.chunks(sa + sb) {
            da.extend_from_slice(&chunk[..sa]);
            db.extend_from_slice(&chunk[sa..]);
        }
        vec![needs[0].then_some(da), needs[1].then_some(db)]
    }
}

/// Repeats a single-channel `[N,1,H,W]` tensor across `channels`.
#[derive(Clone, Copy, Debug)]
pub struct BroadcastChannels {
    pub channels: usize,
}

impl Function for BroadcastChannels {
    fn name(&self) -> &str {
        "broadcast_channels"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let x = inputs[0];
        let [n, c, h, w] = nchw("broadcast_channels", x)?;
        if c != 1 {
            return Err(Error::dim(format!("broadcast_channels needs one channel, got {c}")));
        }
        let plane = h * w;
        let data = x
            .data()
            .chunks(plane)
            .flat_map(|p| std::iter::repeat_n(p, self.channels).flatten().copied())
            .collect();
        Tensor::new(vec![n, self.channels, h, w], data)
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let [_, _, h, w] = nchw("broadcast_channels", inputs[0]).unwrap();
        let plane = h * w;
        let mut d = vec![0.0; inputs[0].numel()];
        for (i, chunk) in g.chunks(plane).enumerate() {
            let dst = &mut d[(i / self.channels) * plane..(i / self.channels + 1) * plane];
            dst.iter_mut().zip(chunk).for_each(|(d, g)| *d += g);
        }
        vec![Some(d)]
    }
}

/// Forward difference `x[.., i+1, ..] - x[.., i, ..]` along `axis`.
#[derive(Clone, Copy, Debug)]
pub struct Diff {
    pub axis: usize,
}

impl Diff {
    fn split(&self, shape: &[usize]) -> (usize, usize, usize) {
        let outer = shape[..self.axis].iter().product();
        let inner = shape[self.axis + 1..].iter().product();
        (outer, shape[self.axis], inner)
    }
}

impl Function for Diff {
    fn name(&self) -> &str {
        "diff"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let x = inputs[0];
        if self.axis >= x.shape().len() || x.shape()[self.axis] < 2 {
            return Err(Error::dim(format!("diff along axis {} of {:?}", self.axis, x.shape())));
        }
        let (outer, len, inner) = self.split(x.shape());
        let mut out = Vec::with_capacity(outer * (len - 1) * inner);
        for o in 0..outer {
            let base = o * len * inner;
            for i in 0..len - 1 {
                for j in 0..inner {
                    out.push(x.data()[base + (i + 1) * inner + j] - x.data()[base + i * inner + j]);
                }
            }
        }
        let mut shape = x.shape().to_vec();
        shape[self.axis] -= 1;
        Tensor::new(shape, out)
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &[f64], _: &[bool]) -> Vec<Option<Vec<f64>>> {
        let (outer, len, inner) = self.split(inputs[0].shape());
        let mut d = vec![0.0; inputs[0].numel()];
        let mut k = 0;
        for o in 0..outer {
            let base = o * len * inner;
            for i in 0..len - 1 {
                for j in 0..inner {
                    d[base + (i + 1) * inner + j] += g[k];
                    d[base + i * inner + j] -= g[k];
                    k += 1;
                }
            }
        }
        vec![Some(d)]
    }
}

impl Tape {
    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.apply(Relu, &[x])
    }

    pub fn leaky_relu(&mut self, x: Var) -> Result<Var> {
        self.apply(LeakyRelu, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.apply(Sigmoid, &[x])
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.apply(Square, &[x])
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.apply(Abs, &[x])
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.apply(Sqrt, &[x])
    }

    /// Logarithm clamped at [`LOG_FLOOR`].
    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.apply(Log { floor: LOG_FLOOR }, &[x])
    }

    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        self.apply(Affine { scale, shift }, &[x])
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Result<Var> {
        self.affine(x, scale, 0.0)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Binary::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Binary::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Binary::Mul, &[a, b])
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Binary::Div, &[a, b])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.apply(Sum, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.apply(Mean, &[x])
    }

    pub fn abs_sum(&mut self, x: Var) -> Result<Var> {
        self.apply(AbsSum, &[x])
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.apply(Softmax, &[x])
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: Vec<usize>) -> Result<Var> {
        self.apply(SoftmaxCrossEntropy { labels }, &[logits])
    }

    pub fn select(&mut self, x: Var, index: usize) -> Result<Var> {
        self.apply(Select { index }, &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        self.apply(
            Reshape {
                shape: shape.into(),
            },
            &[x],
        )
    }

    pub fn conv2d(&mut self, x: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        self.apply(Conv2d { stride, padding }, &[x, kernel])
    }

    pub fn bias_add(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.apply(BiasAdd, &[x, bias])
    }

    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        self.apply(AvgPool2, &[x])
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.apply(GlobalAvgPool, &[x])
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        self.apply(Linear, &[x, w, b])
    }

    pub fn upsample_nearest2x(&mut self, x: Var) -> Result<Var> {
        self.apply(UpsampleNearest2x, &[x])
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(ConcatChannels, &[a, b])
    }

    pub fn broadcast_channels(&mut self, x: Var, channels: usize) -> Result<Var> {
        self.apply(BroadcastChannels { channels }, &[x])
    }

    pub fn diff(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.apply(Diff { axis }, &[x])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eval(f: impl Function, inputs: &[&Tensor]) -> Tensor {
        f.forward(inputs).unwrap()
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let x = Tensor::zeros(vec![2]);
        assert_eq!(eval(Softmax, &[&x]).data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_matches_exp_normalize() {
        // exp(k - 3) / (e^-2 + e^-1 + 1), evaluated with 30-digit arithmetic.
        let expected = [
            0.090_030_573_170_380_458_f64,
            0.244_728_471_054_797_652,
            0.665_240_955_774_821_890,
        ];
        let x = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let y = eval(Softmax, &[&x]);
        for (a, b) in y.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn relu_definition() {
        let x = Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(eval(Relu, &[&x]).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn leaky_relu_keeps_a_negative_slope() {
        let x = Tensor::new(vec![3], vec![-2.0, 0.0, 3.0]).unwrap();
        assert_eq!(eval(LeakyRelu, &[&x]).data(), &[-2.0 * LEAKY_SLOPE, 0.0, 3.0]);
    }

    #[test]
    fn upsample_single_pixel() {
        let x = Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let y = eval(UpsampleNearest2x, &[&x]);
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[1.0; 4]);
    }

    #[test]
    fn upsample_block_replication() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = eval(UpsampleNearest2x, &[&x]);
        #[rustfmt::skip]
        let expected = [
            1.0, 1.0, 2.0, 2.0,
            1.0, 1.0, 2.0, 2.0,
            3.0, 3.0, 4.0, 4.0,
            3.0, 3.0, 4.0, 4.0,
        ];
        assert_eq!(y.data(), &expected);
    }

    #[test]
    fn upsample_gradient_of_sum_is_four() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(vec![1, 2, 3, 3], 0.3).with_grad());
        let y = tape.upsample_nearest2x(x).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(x).unwrap().iter().all(|&g| g == 4.0));
    }

    #[test]
    fn log_is_clamped() {
        let x = Tensor::new(vec![2], vec![0.0, 1.0]).unwrap();
        let y = eval(Log { floor: LOG_FLOOR }, &[&x]);
        assert_eq!(y.data()[0], LOG_FLOOR.ln());
        assert_eq!(y.data()[1], 0.0);
    }

    #[test]
    fn diff_along_columns() {
        let x = Tensor::new(vec![2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        assert_eq!(eval(Diff { axis: 1 }, &[&x]).data(), &[1.0, 1.0]);
        assert_eq!(eval(Diff { axis: 0 }, &[&x]).data(), &[0.0, 0.0]);
    }

    #[test]
    fn division_by_zero_is_numeric_error() {
        let a = Tensor::full(vec![1], 1.0);
        let b = Tensor::full(vec![1], 0.0);
        assert!(matches!(Binary::Div.forward(&[&a, &b]), Err(Error::Numeric { .. })));
    }

    #[test]
    fn broadcast_then_reduce() {
        let x = Tensor::new(vec![1, 1, 1, 2], vec![1.0, 2.0]).unwrap();
        let y = eval(BroadcastChannels { channels: 3 }, &[&x]);
        assert_eq!(y.shape(), &[1, 3, 1, 2]);
        assert_eq!(y.data(), &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
    }
}
