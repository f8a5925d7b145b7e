//! Procedural "lesion" corpus with pixel-exact ground-truth evidence.
//!
//! Four classes share one background model (multi-octave value noise in a
//! tissue-like tint, plus label-independent distractor shapes and
//! black/noise acquisition artifacts):
//!
//! * 0 — background only,
//! * 1 — one bright circular blob,
//! * 2 — a dark ring,
//! * 3 — a cluster of thin parallel streaks.
//!
//! `truth_mask` marks exactly the pixels painted by the class-defining shape.

pub mod netpbm;

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use netpbm::GrayImage;

pub const NUM_CLASSES: usize = 4;
pub const MIN_IMAGE_SIZE: usize = 32;
pub const DEFAULT_IMAGE_SIZE: usize = 64;
const MAX_ARTIFACTS: usize = 3;
pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["normal", "blob", "ring", "streaks"];

/// The class-defining shape placed by the generator.
#[derive(Clone, Debug, PartialEq)]
pub enum Evidence {
    None,
    Blob { cx: f64, cy: f64, radius: f64 },
    Ring { cx: f64, cy: f64, outer: f64, inner: f64 },
    Streaks { cx: f64, cy: f64, angle: f64, length: f64, count: usize },
}

#[derive(Clone, Debug)]
pub struct SynthImage {
    /// `[3, H, W]`, values in `[0, 1]`.
    pub pixels: Tensor,
    pub label: usize,
    /// Row-major `H×W`.
    pub truth_mask: Vec<bool>,
    pub seed: u64,
    pub evidence: Evidence,
    pub distractors: usize,
    /// Black or noise rectangles painted over the background.
    pub artifacts: usize,
}

impl SynthImage {
    pub fn size(&self) -> usize {
        self.pixels.shape()[1]
    }

    /// Pixels as a `[1, 3, H, W]` batch of one.
    pub fn batch(&self) -> Tensor {
        let s = self.pixels.shape();
        self.pixels.clone().reshaped(vec![1, s[0], s[1], s[2]]).unwrap()
    }

    pub fn truth_area(&self) -> usize {
        self.truth_mask.iter().filter(|&&b| b).count()
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the `index`-th image of a corpus generated from `corpus_seed`.
pub fn image_seed(corpus_seed: u64, index: usize) -> u64 {
    splitmix64(corpus_seed ^ splitmix64(index as u64))
}

/// Corpus seed of the held-out split that accompanies `seed`.
pub fn held_out_seed(seed: u64) -> u64 {
    splitmix64(seed ^ 0x7E57_5E7D)
}

struct ValueNoise {
    cells: usize,
    lattice: Vec<f64>,
}

impl ValueNoise {
    fn new(rng: &mut ChaCha8Rng, cells: usize) -> Self {
        let n = (cells + 1) * (cells + 1);
        Self {
            cells,
            lattice: (0..n).map(|_| rng.random::<f64>()).collect(),
        }
    }

    fn at(&self, u: f64, v: f64) -> f64 {
        let (x, y) = (u * self.cells as f64, v * self.cells as f64);
        let (x0, y0) = ((x.floor() as usize).min(self.cells - 1), (y.floor() as usize).min(self.cells - 1));
        let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
        let (tx, ty) = (smooth(x - x0 as f64), smooth(y - y0 as f64));
        let stride = self.cells + 1;
        let l = |i: usize, j: usize| self.lattice[j * stride + i];
        let top = l(x0, y0) * (1.0 - tx) + l(x0 + 1, y0) * tx;
        let bottom = l(x0, y0 + 1) * (1.0 - tx) + l(x0 + 1, y0 + 1) * tx;
        top * (1.0 - ty) + bottom * ty
    }
}

struct Canvas {
    size: usize,
    rgb: Vec<[f64; 3]>,
}

impl Canvas {
    fn paint(&mut self, color: [f64; 3], mut inside: impl FnMut(f64, f64) -> bool, mut mark: impl FnMut(usize)) {
        for y in 0..self.size {
            for x in 0..self.size {
                if inside(x as f64 + 0.5, y as f64 + 0.5) {
                    let i = y * self.size + x;
                    self.rgb[i] = color;
                    mark(i);
                }
            }
        }
    }
}

fn jitter(rng: &mut ChaCha8Rng, base: [f64; 3], amount: f64) -> [f64; 3] {
    base.map(|c| (c + rng.random_range(-amount..=amount)).clamp(0.0, 1.0))
}

fn background(rng: &mut ChaCha8Rng, size: usize) -> Canvas {
    let octaves = [(4, 0.5), (8, 0.3), (16, 0.2)];
    let layers: Vec<(ValueNoise, f64)> = octaves
        .iter()
        .map(|&(cells, amp)| (ValueNoise::new(rng, cells), amp))
        .collect();
    let tint = jitter(rng, [0.86, 0.62, 0.72], 0.06);
    let mut rgb = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (u, v) = ((x as f64 + 0.5) / size as f64, (y as f64 + 0.5) / size as f64);
            let n: f64 = layers.iter().map(|(l, a)| a * l.at(u, v)).sum();
            let shade = 0.6 + 0.4 * n;
            let grain = rng.random_range(-0.03..0.03);
            rgb.push(tint.map(|c| (c * shade + grain).clamp(0.0, 1.0)));
        }
    }
    Canvas { size, rgb }
}

fn distractors(rng: &mut ChaCha8Rng, canvas: &mut Canvas) -> usize {
    let count = rng.random_range(0..=3);
    let scale = canvas.size as f64 / DEFAULT_IMAGE_SIZE as f64;
    for _ in 0..count {
        let color = jitter(rng, [0.38, 0.46, 0.78], 0.08);
        let side = rng.random_range(4.0..8.0) * scale;
        let x0 = rng.random_range(0.0..canvas.size as f64 - side);
        let y0 = rng.random_range(0.0..canvas.size as f64 - side);
        if rng.random_bool(0.5) {
            canvas.paint(color, |x, y| x >= x0 && x < x0 + side && y >= y0 && y < y0 + side, |_| {});
        } else {
            // right triangle with the hypotenuse facing down-right
            canvas.paint(
                color,
                |x, y| x >= x0 && y >= y0 && (x - x0) + (y - y0) < side,
                |_| {},
            );
        }
    }
    count
}

fn segment_distance(px: f64, py: f64, ax: f64, ay: f64, bx: f64, by: f64) -> f64 {
    let (dx, dy) = (bx - ax, by - ay);
    let t = (((px - ax) * dx + (py - ay) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
    ((px - ax - t * dx).powi(2) + (py - ay - t * dy).powi(2)).sqrt()
}

/// Geometry and colour of the class-defining shape, drawn before anything
/// is painted so that artifacts can keep clear of it.
fn plan_evidence(rng: &mut ChaCha8Rng, size: usize, label: usize) -> (Evidence, [f64; 3]) {
    let size = size as f64;
    match label {
        1 => {
            let radius = rng.random_range(0.09..0.15) * size;
            let (cx, cy) = (
                rng.random_range(radius + 2.0..size - radius - 2.0),
                rng.random_range(radius + 2.0..size - radius - 2.0),
            );
            (Evidence::Blob { cx, cy, radius }, jitter(rng, [0.98, 0.93, 0.70], 0.02))
        }
        2 => {
            let outer = rng.random_range(0.13..0.2) * size;
            let inner = outer - rng.random_range(0.04..0.06) * size;
            let (cx, cy) = (
                rng.random_range(outer + 2.0..size - outer - 2.0),
                rng.random_range(outer + 2.0..size - outer - 2.0),
            );
            (Evidence::Ring { cx, cy, outer, inner }, jitter(rng, [0.22, 0.08, 0.30], 0.03))
        }
        3 => {
            let length = rng.random_range(0.3..0.4) * size;
            let count = rng.random_range(4..=5);
            let angle = rng.random_range(0.0..std::f64::consts::PI);
            let half_extent = streak_extent(size, length, count);
            let (cx, cy) = (
                rng.random_range(half_extent..size - half_extent),
                rng.random_range(half_extent..size - half_extent),
            );
            let streaks = Evidence::Streaks { cx, cy, angle, length, count };
            (streaks, jitter(rng, [0.10, 0.40, 0.15], 0.03))
        }
        _ => (Evidence::None, [0.0; 3]),
    }
}

fn streak_spacing(size: f64) -> f64 {
    3.0 * size / DEFAULT_IMAGE_SIZE as f64
}

fn streak_extent(size: f64, length: f64, count: usize) -> f64 {
    length / 2.0 + streak_spacing(size) * count as f64 / 2.0 + 2.0
}

fn paint_evidence(canvas: &mut Canvas, evidence: &Evidence, color: [f64; 3], truth: &mut [bool]) {
    let size = canvas.size as f64;
    let mut mark = |i: usize| truth[i] = true;
    match *evidence {
        Evidence::None => {}
        Evidence::Blob { cx, cy, radius } => {
            canvas.paint(color, |x, y| (x - cx).powi(2) + (y - cy).powi(2) <= radius * radius, &mut mark);
        }
        Evidence::Ring { cx, cy, outer, inner } => {
            canvas.paint(
                color,
                |x, y| {
                    let d2 = (x - cx).powi(2) + (y - cy).powi(2);
                    d2 <= outer * outer && d2 >= inner * inner
                },
                &mut mark,
            );
        }
        Evidence::Streaks { cx, cy, angle, length, count } => {
            let spacing = streak_spacing(size);
            let (ux, uy) = (angle.cos(), angle.sin());
            let (nx, ny) = (-uy, ux);
            let segments: Vec<[f64; 4]> = (0..count)
                .map(|k| {
                    let off = (k as f64 - (count as f64 - 1.0) / 2.0) * spacing;
                    let (mx, my) = (cx + nx * off, cy + ny * off);
                    let h = length / 2.0;
                    [mx - ux * h, my - uy * h, mx + ux * h, my + uy * h]
                })
                .collect();
            canvas.paint(
                color,
                |x, y| segments.iter().any(|s| segment_distance(x, y, s[0], s[1], s[2], s[3]) <= 0.7),
                &mut mark,
            );
        }
    }
}

/// Label-independent acquisition artifacts: rectangles of sensor dropout
/// (black) or saturated noise (i.i.d. uniform). They may cover evidence
/// locations; evidence is painted over them afterwards.
fn artifacts(rng: &mut ChaCha8Rng, canvas: &mut Canvas) -> usize {
    let count = rng.random_range(0..=MAX_ARTIFACTS);
    let size = canvas.size as f64;
    let scale = size / DEFAULT_IMAGE_SIZE as f64;
    for _ in 0..count {
        let noise = rng.random_bool(0.5);
        let (w, h) = (rng.random_range(8.0..40.0) * scale, rng.random_range(8.0..40.0) * scale);
        let x0 = rng.random_range(0.0..size - w);
        let y0 = rng.random_range(0.0..size - h);
        let n = canvas.size;
        for y in 0..n {
            for x in 0..n {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                if px >= x0 && px < x0 + w && py >= y0 && py < y0 + h {
                    canvas.rgb[y * n + x] = if noise {
                        [rng.random(), rng.random(), rng.random()]
                    } else {
                        [0.0; 3]
                    };
                }
            }
        }
    }
    count
}

fn check_size(image_size: usize) -> Result<()> {
    if image_size < MIN_IMAGE_SIZE {
        return Err(Error::Parameter(format!(
            "image size {image_size} is below the minimum {MIN_IMAGE_SIZE}"
        )));
    }
    Ok(())
}

/// One image of class `label`, fully determined by `(label, image_size, seed)`.
pub fn generate_image(label: usize, image_size: usize, seed: u64) -> Result<SynthImage> {
    check_size(image_size)?;
    if label >= NUM_CLASSES {
        return Err(Error::Parameter(format!("label {label} out of range")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut canvas = background(&mut rng, image_size);
    let distractors = distractors(&mut rng, &mut canvas);
    let (evidence, color) = plan_evidence(&mut rng, image_size, label);
    let artifacts = artifacts(&mut rng, &mut canvas);
    let mut truth = vec![false; image_size * image_size];
    paint_evidence(&mut canvas, &evidence, color, &mut truth);

    // Stored at 8 bits, exactly as the PPM on disk: in-memory and file
    // corpora are the same data.
    let plane = image_size * image_size;
    let mut data = vec![0.0; 3 * plane];
    for (i, px) in canvas.rgb.iter().enumerate() {
        for c in 0..3 {
            data[c * plane + i] = f64::from(netpbm::quantize(px[c])) / 255.0;
        }
    }
    Ok(SynthImage {
        pixels: Tensor::new(vec![3, image_size, image_size], data)?,
        label,
        truth_mask: truth,
        seed,
        evidence,
        distractors,
        artifacts,
    })
}

/// `n_per_class` images of each class, interleaved so that image `i` has
/// label `i % 4`.
pub fn generate_corpus(n_per_class: usize, image_size: usize, seed: u64) -> Result<Vec<SynthImage>> {
    check_size(image_size)?;
    if n_per_class == 0 {
        return Err(Error::Parameter("n_per_class must be at least 1".into()));
    }
    (0..n_per_class * NUM_CLASSES)
        .map(|i| generate_image(i % NUM_CLASSES, image_size, image_seed(seed, i)))
        .collect()
}

/// Deterministic 80/20 split: every fifth image of each class is held out.
pub fn is_held_out(index: usize) -> bool {
    (index / NUM_CLASSES) % 5 == 4
}

/// Train and test halves of a corpus by [`is_held_out`].
pub fn split(corpus: Vec<SynthImage>) -> (Vec<SynthImage>, Vec<SynthImage>) {
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (i, img) in corpus.into_iter().enumerate() {
        if is_held_out(i) {
            test.push(img);
        } else {
            train.push(img);
        }
    }
    (train, test)
}

/// Row of `manifest.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRow {
    pub filename: String,
    pub label: usize,
    pub seed: u64,
    pub truth_mask_filename: String,
}

pub const MANIFEST: &str = "manifest.csv";

/// Writes images, truth masks and `manifest.csv` under `dir`.
pub fn write_corpus(dir: impl AsRef<Path>, corpus: &[SynthImage]) -> Result<Vec<ManifestRow>> {
    let dir = dir.as_ref();
    for sub in ["images", "masks"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut rows = Vec::with_capacity(corpus.len());
    for (i, img) in corpus.iter().enumerate() {
        let row = ManifestRow {
            filename: format!("images/img_{i:05}.ppm"),
            label: img.label,
            seed: img.seed,
            truth_mask_filename: format!("masks/mask_{i:05}.pgm"),
        };
        netpbm::write_ppm(dir.join(&row.filename), &img.pixels)?;
        let size = img.size();
        netpbm::write_pgm(
            dir.join(&row.truth_mask_filename),
            &GrayImage::from_bools(size, size, &img.truth_mask)?,
        )?;
        rows.push(row);
    }
    let path = dir.join(MANIFEST);
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["filename", "label", "seed", "truth_mask_filename"])?;
    for r in &rows {
        w.write_record([
            r.filename.clone(),
            r.label.to_string(),
            r.seed.to_string(),
            r.truth_mask_filename.clone(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    Ok(rows)
}

/// A corpus image loaded back from disk.
#[derive(Clone, Debug)]
pub struct LoadedImage {
    pub id: String,
    pub path: PathBuf,
    pub pixels: Tensor,
    pub label: usize,
    pub seed: u64,
    pub truth_mask: Vec<bool>,
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Vec<ManifestRow>> {
    let path = dir.as_ref().join(MANIFEST);
    let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut rdr = csv::Reader::from_reader(file);
    let mut rows = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let bad = |what: &str| Error::Data(format!("{}: row {}: bad {what}", path.display(), line + 1));
        if rec.len() != 4 {
            return Err(bad("column count"));
        }
        rows.push(ManifestRow {
            filename: rec[0].to_string(),
            label: rec[1].parse().map_err(|_| bad("label"))?,
            seed: rec[2].parse().map_err(|_| bad("seed"))?,
            truth_mask_filename: rec[3].to_string(),
        });
    }
    Ok(rows)
}

pub fn load_corpus(dir: impl AsRef<Path>) -> Result<Vec<LoadedImage>> {
    let dir = dir.as_ref();
    read_manifest(dir)?
        .into_iter()
        .map(|row| {
            let path = dir.join(&row.filename);
            let pixels = netpbm::read_ppm(&path)?;
            let truth = netpbm::read_pgm(dir.join(&row.truth_mask_filename))?;
            let id = Path::new(&row.filename)
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| row.filename.clone());
            Ok(LoadedImage {
                id,
                path,
                pixels,
                label: row.label,
                seed: row.seed,
                truth_mask: truth.values.iter().map(|&v| v >= 0.5).collect(),
            })
        })
        .collect()
}
