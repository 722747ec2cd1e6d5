//! Built-in synthetic datasets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use tgate::{Dataset, Error, Result, Targets, Tensor};

/// Pairs `(x, sin x)` with `x` uniform over `x_range`.
pub fn gen_sine_dataset(n: usize, x_range: (f64, f64), seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Argument("sine dataset needs at least one sample".into()));
    }
    let (lo, hi) = x_range;
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::Argument(format!("empty x range [{lo}, {hi}]")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let xs: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    let ys = xs.iter().map(|x| x.sin()).collect();
    Dataset::new(
        Tensor::new(vec![n, 1], xs)?,
        Targets::Values(Tensor::new(vec![n, 1], ys)?),
    )
}

/// Regression data whose target is the sum of a hidden subset of features.
#[derive(Debug, Clone)]
pub struct PlantedDataset {
    pub data: Dataset,
    /// Ground-truth relevant feature indices, ascending.
    pub relevant: Vec<usize>,
}

pub const MAX_PLANTED_FEATURES: usize = 12;

/// `y = Σ_{j ∈ relevant} x_j + σ·ε` with standard-normal features and noise.
pub fn gen_planted_dataset(
    n_features: usize,
    k_relevant: usize,
    n: usize,
    noise: f64,
    seed: u64,
) -> Result<PlantedDataset> {
    if !(1..=n_features).contains(&k_relevant) || n_features > MAX_PLANTED_FEATURES {
        return Err(Error::Argument(format!(
            "need 1 <= k_relevant <= n_features <= {MAX_PLANTED_FEATURES}, got k={k_relevant}, n_features={n_features}"
        )));
    }
    if n == 0 || !(noise >= 0.0) {
        return Err(Error::Argument("planted dataset needs n >= 1 and noise >= 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..n_features).collect();
    for i in 0..k_relevant {
        let j = rng.random_range(i..n_features);
        idx.swap(i, j);
    }
    let mut relevant = idx[..k_relevant].to_vec();
    relevant.sort_unstable();
    let mut xs = Vec::with_capacity(n * n_features);
    let mut ys = Vec::with_capacity(n);
    for _ in 0..n {
        let row: Vec<f64> = (0..n_features).map(|_| StandardNormal.sample(&mut rng)).collect();
        let eps: f64 = StandardNormal.sample(&mut rng);
        ys.push(relevant.iter().map(|&j| row[j]).sum::<f64>() + noise * eps);
        xs.extend(row);
    }
    Ok(PlantedDataset {
        data: Dataset::new(
            Tensor::new(vec![n, n_features], xs)?,
            Targets::Values(Tensor::new(vec![n, 1], ys)?),
        )?,
        relevant,
    })
}

pub const GLYPH_SIDE: usize = 28;

/// Synthetic 28×28 grayscale glyphs, one stroke pattern per class, with
/// random translation, contrast and pixel noise. Pixels are quantized to
/// bytes so the set round-trips through IDX files exactly.
#[derive(Debug, Clone)]
pub struct GlyphSet {
    pub images: Vec<u8>,
    pub labels: Vec<u8>,
    pub count: usize,
}

fn draw_segment(canvas: &mut [f64], (x0, y0): (f64, f64), (x1, y1): (f64, f64), width: f64) {
    for py in 0..GLYPH_SIDE {
        for px in 0..GLYPH_SIDE {
            let (x, y) = (px as f64 + 0.5, py as f64 + 0.5);
            let (dx, dy) = (x1 - x0, y1 - y0);
            let len2 = dx * dx + dy * dy;
            let t = if len2 > 0.0 {
                (((x - x0) * dx + (y - y0) * dy) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let (cx, cy) = (x0 + t * dx, y0 + t * dy);
            let d = ((x - cx).powi(2) + (y - cy).powi(2)).sqrt();
            let v = (1.0 - (d - width / 2.0).max(0.0)).clamp(0.0, 1.0);
            let cell = &mut canvas[py * GLYPH_SIDE + px];
            *cell = cell.max(v);
        }
    }
}

/// A stroke from one point to another, in pixel coordinates.
type Stroke = ((f64, f64), (f64, f64));

pub fn gen_glyphs(n: usize, classes: usize, noise: f64, seed: u64) -> Result<GlyphSet> {
    if n == 0 || !(2..=256).contains(&classes) {
        return Err(Error::Argument(format!("glyphs need n >= 1 and 2..=256 classes, got n={n}, classes={classes}")));
    }
    // Prototypes depend only on the class count so train and test sets agree.
    let mut proto_rng = ChaCha8Rng::seed_from_u64(0x61_7970_6867 ^ classes as u64);
    let prototypes: Vec<Vec<Stroke>> = (0..classes)
        .map(|_| {
            (0..3)
                .map(|_| {
                    let p = |r: &mut ChaCha8Rng| (r.random_range(6.0..22.0), r.random_range(6.0..22.0));
                    (p(&mut proto_rng), p(&mut proto_rng))
                })
                .collect()
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(n * GLYPH_SIDE * GLYPH_SIDE);
    let mut labels = Vec::with_capacity(n);
    let mut canvas = vec![0.0; GLYPH_SIDE * GLYPH_SIDE];
    for _ in 0..n {
        let class = rng.random_range(0..classes);
        let (sx, sy) = (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0));
        let contrast = rng.random_range(0.6..1.0);
        let width = rng.random_range(1.0..2.5);
        canvas.iter_mut().for_each(|c| *c = 0.0);
        for &((x0, y0), (x1, y1)) in &prototypes[class] {
            let jitter = |r: &mut ChaCha8Rng| r.random_range(-1.5..1.5);
            let a = (x0 + sx + jitter(&mut rng), y0 + sy + jitter(&mut rng));
            let b = (x1 + sx + jitter(&mut rng), y1 + sy + jitter(&mut rng));
            draw_segment(&mut canvas, a, b, width);
        }
        for c in &canvas {
            let z: f64 = StandardNormal.sample(&mut rng);
            let v = (c * contrast + noise * z).clamp(0.0, 1.0);
            images.push((v * 255.0).round() as u8);
        }
        labels.push(class as u8);
    }
    Ok(GlyphSet { images, labels, count: n })
}

/// Converts byte images and labels to a `[N, 1, rows, cols]` dataset in `[0, 1]`.
pub fn bytes_to_dataset(images: &[u8], labels: &[u8], rows: usize, cols: usize, classes: usize) -> Result<Dataset> {
    let n = labels.len();
    let inputs = Tensor::new(
        vec![n, 1, rows, cols],
        images.iter().map(|&b| f64::from(b) / 255.0).collect(),
    )?;
    Dataset::new(
        inputs,
        Targets::Classes {
            labels: labels.iter().map(|&l| l as usize).collect(),
            classes,
        },
    )
}

impl GlyphSet {
    pub fn to_dataset(&self, classes: usize) -> Result<Dataset> {
        bytes_to_dataset(&self.images, &self.labels, GLYPH_SIDE, GLYPH_SIDE, classes)
    }
}
