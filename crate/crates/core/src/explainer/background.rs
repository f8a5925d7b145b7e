//! Replacement content for the pixels outside a mask.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum BackgroundKind {
    /// i.i.d. `U[0,1]` per channel value.
    #[default]
    UniformNoise,
    /// `clamp(0.5 + 0.25·N(0,1), 0, 1)`.
    GaussianNoise,
    /// Another image drawn uniformly from a pool.
    CorpusShuffle,
}

impl BackgroundKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::UniformNoise => "uniform",
            Self::GaussianNoise => "gaussian",
            Self::CorpusShuffle => "corpus",
        }
    }
}

impl std::fmt::Display for BackgroundKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for BackgroundKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" | "uniform_noise" => Ok(Self::UniformNoise),
            "gaussian" | "gaussian_noise" => Ok(Self::GaussianNoise),
            "corpus" | "corpus_shuffle" => Ok(Self::CorpusShuffle),
            _ => Err(Error::Parameter(format!(
                "unknown background `{s}` (uniform, gaussian, corpus)"
            ))),
        }
    }
}

/// Images available to [`BackgroundKind::CorpusShuffle`]. `exclude` is the
/// pool index of the image being explained, which is never drawn.
#[derive(Clone, Copy, Debug, Default)]
pub struct BackgroundPool<'a> {
    pub images: &'a [Tensor],
    pub exclude: Option<usize>,
}

impl<'a> BackgroundPool<'a> {
    pub fn new(images: &'a [Tensor], exclude: Option<usize>) -> Self {
        Self { images, exclude }
    }

    fn candidates(&self) -> usize {
        let excluded = matches!(self.exclude, Some(i) if i < self.images.len());
        self.images.len() - usize::from(excluded)
    }
}

pub fn sample_background<R: Rng + ?Sized>(
    shape: &[usize],
    kind: BackgroundKind,
    rng: &mut R,
    pool: Option<&BackgroundPool<'_>>,
) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    match kind {
        BackgroundKind::UniformNoise => Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random::<f64>()).collect()),
        BackgroundKind::GaussianNoise => Tensor::new(
            shape.to_vec(),
            (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    (0.5 + 0.25 * z).clamp(0.0, 1.0)
                })
                .collect(),
        ),
        BackgroundKind::CorpusShuffle => {
            let pool = pool.filter(|p| p.candidates() > 0).ok_or_else(|| {
                Error::Data("corpus background needs at least one other image in the pool".into())
            })?;
            let mut pick = rng.random_range(0..pool.candidates());
            if let Some(ex) = pool.exclude {
                if pick >= ex {
                    pick += 1;
                }
            }
            let img = &pool.images[pick];
            if img.shape() != shape {
                return Err(Error::dim(format!(
                    "pool image {pick} has shape {:?}, expected {shape:?}",
                    img.shape()
                )));
            }
            Ok(img.clone())
        }
    }
}
