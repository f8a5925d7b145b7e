use super::tape::Function;
use super::Tensor;
use crate::error::{Error, Result};

/// `c = a · b + beta · c` for row-major operands with explicit strides.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    // SAFETY: extents checked above; strides describe dense m×k, k×n and m×n
    // views inside those slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn new(input: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (&[n, c, h, w], &[k, kc, kh, kw]) = (input, kernel) else {
            return Err(Error::dim(format!(
                "conv2d expects 4-d input and kernel, got {input:?} and {kernel:?}"
            )));
        };
        if kc != c {
            return Err(Error::dim(format!(
                "conv2d kernel has {kc} input channels, input has {c}"
            )));
        }
        if stride == 0 {
            return Err(Error::dim("conv2d stride must be positive"));
        }
        if kh > h + 2 * pad || kw > w + 2 * pad {
            return Err(Error::dim(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        Ok(Self {
            n,
            c,
            h,
            w,
            k,
            kh,
            kw,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
            stride,
            pad,
        })
    }

    fn patch_len(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn out_pixels(&self) -> usize {
        self.oh * self.ow
    }

    /// Output columns `ox` whose source `ox·stride + j − pad` lies inside the
    /// input row, as a half-open range.
    #[inline]
    fn valid_cols(&self, j: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(j).div_ceil(self.stride);
        // largest ox with ox·stride + j − pad ≤ w − 1
        let hi = if self.w + self.pad > j {
            ((self.w + self.pad - j - 1) / self.stride + 1).min(self.ow)
        } else {
            0
        };
        (lo.min(hi), hi)
    }

    /// Visits every `(row segment, source segment)` pair of the unfolded
    /// matrix; rows are `(c, i, j)` taps, columns output pixels.
    #[inline]
    fn for_each_segment(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let (taps, pixels, plane) = (self.kh * self.kw, self.out_pixels(), self.h * self.w);
        for c in 0..self.c {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = (c * taps + i * self.kw + j) * pixels;
                    let (lo, hi) = self.valid_cols(j);
                    for oy in 0..self.oh {
                        let Some(y) = (oy * self.stride + i).checked_sub(self.pad).filter(|&y| y < self.h) else {
                            continue;
                        };
                        if lo < hi {
                            let src = c * plane + y * self.w + lo * self.stride + j - self.pad;
                            f(row + oy * self.ow + lo, src, hi - lo, self.stride);
                        }
                    }
                }
            }
        }
    }

    fn im2col(&self, image: &[f64], cols: &mut [f64]) {
        cols.fill(0.0);
        self.for_each_segment(|dst, src, len, stride| {
            let out = &mut cols[dst..dst + len];
            if stride == 1 {
                out.copy_from_slice(&image[src..src + len]);
            } else {
                out.iter_mut().enumerate().for_each(|(k, v)| *v = image[src + k * stride]);
            }
        });
    }

    fn col2im(&self, cols: &[f64], image: &mut [f64]) {
        self.for_each_segment(|dst, src, len, stride| {
            let seg = &cols[dst..dst + len];
            if stride == 1 {
                image[src..src + len].iter_mut().zip(seg).for_each(|(a, b)| *a += b);
            } else {
                seg.iter().enumerate().for_each(|(k, v)| image[src + k * stride] += v);
            }
        });
    }
}

/// 2-d cross-correlation of `[N,C,H,W]` input with `[K,C,kh,kw]` kernel.
#[derive(Clone, Copy, Debug)]
pub struct Conv2d {
    pub stride: usize,
    pub padding: usize,
}

impl Function for Conv2d {
    fn name(&self) -> &str {
        "conv2d"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (x, w) = (inputs[0], inputs[1]);
        let g = Geometry::new(x.shape(), w.shape(), self.stride, self.padding)?;
        let (patch, pixels) = (g.patch_len(), g.out_pixels());
        let mut cols = vec![0.0; patch * pixels];
        let mut out = vec![0.0; g.n * g.k * pixels];
        let in_stride = g.c * g.h * g.w;
        for n in 0..g.n {
            g.im2col(&x.data()[n * in_stride..(n + 1) * in_stride], &mut cols);
            gemm(
                g.k,
                patch,
                pixels,
                w.data(),
                (patch as isize, 1),
                &cols,
                (pixels as isize, 1),
                0.0,
                &mut out[n * g.k * pixels..(n + 1) * g.k * pixels],
            );
        }
        Tensor::new(vec![g.n, g.k, g.oh, g.ow], out)
    }

    fn backward(
        &self,
        inputs: &[&Tensor],
        _output: &Tensor,
        grad_out: &[f64],
        needs: &[bool],
    ) -> Vec<Option<Vec<f64>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let g = Geometry::new(x.shape(), w.shape(), self.stride, self.padding)
            .expect("geometry validated in forward");
        let (patch, pixels) = (g.patch_len(), g.out_pixels());
        let in_stride = g.c * g.h * g.w;
        let mut cols = vec![0.0; patch * pixels];
        let mut dx = needs[0].then(|| vec![0.0; x.numel()]);
        let mut dw = needs[1].then(|| vec![0.0; w.numel()]);
        for n in 0..g.n {
            let gout = &grad_out[n * g.k * pixels..(n + 1) * g.k * pixels];
            if let Some(dw) = &mut dw {
                g.im2col(&x.data()[n * in_stride..(n + 1) * in_stride], &mut cols);
                // dW[K, patch] += gout[K, pixels] · colsᵀ
                gemm(
                    g.k,
                    pixels,
                    patch,
                    gout,
                    (pixels as isize, 1),
                    &cols,
                    (1, pixels as isize),
                    1.0,
                    dw,
                );
            }
            if let Some(dx) = &mut dx {
                // dcols[patch, pixels] = Wᵀ · gout
                gemm(
                    patch,
                    g.k,
                    pixels,
                    w.data(),
                    (1, patch as isize),
                    gout,
                    (pixels as isize, 1),
                    0.0,
                    &mut cols,
                );
                g.col2im(&cols, &mut dx[n * in_stride..(n + 1) * in_stride]);
            }
        }
        vec![dx, dw]
    }
}

/// Direct loop implementation used as an independent oracle.
pub fn conv2d_reference(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let g = Geometry::new(x.shape(), w.shape(), stride, pad)?;
    let mut out = Tensor::zeros(vec![g.n, g.k, g.oh, g.ow]);
    let (xd, wd) = (x.data(), w.data());
    let od = out.data_mut();
    for n in 0..g.n {
        for k in 0..g.k {
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let mut acc = 0.0;
                    for c in 0..g.c {
                        for i in 0..g.kh {
                            for j in 0..g.kw {
                                let y = (oy * stride + i) as isize - pad as isize;
                                let xx = (ox * stride + j) as isize - pad as isize;
                                if y < 0 || xx < 0 || y >= g.h as isize || xx >= g.w as isize {
                                    continue;
                                }
                                let xi = ((n * g.c + c) * g.h + y as usize) * g.w + xx as usize;
                                let wi = ((k * g.c + c) * g.kh + i) * g.kw + j;
                                acc += xd[xi] * wd[wi];
                            }
                        }
                    }
                    od[((n * g.k + k) * g.oh + oy) * g.ow + ox] = acc;
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn run(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
        Conv2d {
            stride,
            padding: pad,
        }
        .forward(&[x, w])
        .unwrap()
    }

    #[test]
    fn identity_kernel() {
        let x = Tensor::new(vec![1, 1, 1, 1], vec![5.0]).unwrap();
        let w = Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        assert_eq!(run(&x, &w, 1, 0).data(), &[5.0]);
    }

    #[test]
    fn sum_of_ones() {
        let x = Tensor::full(vec![1, 1, 3, 3], 1.0);
        let w = Tensor::full(vec![1, 1, 3, 3], 1.0);
        let y = run(&x, &w, 1, 0);
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn strided_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::from_fn(vec![1, 1, 4, 4], |_| rng.random_range(-1.0..1.0));
        let w = Tensor::from_fn(vec![1, 1, 2, 2], |_| rng.random_range(-1.0..1.0));
        let fast = run(&x, &w, 2, 0);
        let slow = conv2d_reference(&x, &w, 2, 0).unwrap();
        assert_eq!(fast.shape(), &[1, 1, 2, 2]);
        for (a, b) in fast.data().iter().zip(slow.data()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn channel_mismatch_is_dimension_error() {
        let x = Tensor::zeros(vec![1, 2, 4, 4]);
        let w = Tensor::zeros(vec![1, 3, 3, 3]);
        let err = Conv2d {
            stride: 1,
            padding: 0,
        }
        .forward(&[&x, &w]);
        assert!(matches!(err, Err(Error::Dimension(_))));
    }

    #[test]
    fn oversized_kernel_rejected() {
        let x = Tensor::zeros(vec![1, 1, 2, 2]);
        let w = Tensor::zeros(vec![1, 1, 5, 5]);
        assert!(Geometry::new(x.shape(), w.shape(), 1, 1).is_err());
        assert!(Geometry::new(x.shape(), w.shape(), 1, 2).is_ok());
    }
}
