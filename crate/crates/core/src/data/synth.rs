use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{Dataset, ImageClass, IMAGE_SIDE};
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::rng::stream;

#[derive(Debug, Clone, PartialEq)]
pub struct GlyphGenConfig {
    pub num_classes: usize,
    pub images_per_class: usize,
    /// Inclusive range of polyline vertex counts per class skeleton.
    pub strokes: (usize, usize),
    /// Scales per-image vertex noise (pixels) and global shift/rotation.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for GlyphGenConfig {
    fn default() -> Self {
        Self {
            num_classes: 100,
            images_per_class: 20,
            strokes: (3, 6),
            jitter: 1.5,
            seed: 0,
        }
    }
}

type Pt = (f64, f64);

const STROKE_HALF_WIDTH: f64 = 0.9;
const MARGIN: f64 = 5.0;

fn skeleton(rng: &mut ChaCha8Rng, strokes: (usize, usize)) -> Vec<Pt> {
    let n = rng.gen_range(strokes.0..=strokes.1).max(2);
    let hi = IMAGE_SIDE as f64 - MARGIN;
    (0..n).map(|_| (rng.gen_range(MARGIN..hi), rng.gen_range(MARGIN..hi))).collect()
}

fn seg_dist(p: Pt, a: Pt, b: Pt) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (a.0 + t * dx - p.0, a.1 + t * dy - p.1);
    (cx * cx + cy * cy).sqrt()
}

/// Anti-aliased polyline raster: full ink within the stroke half-width,
/// linear falloff over the next pixel.
fn rasterize(pts: &[Pt]) -> Tensor<f32> {
    Tensor::from_fn(&[1, IMAGE_SIDE, IMAGE_SIDE], |i| {
        let p = ((i % IMAGE_SIDE) as f64 + 0.5, (i / IMAGE_SIDE) as f64 + 0.5);
        let d = pts.windows(2).map(|w| seg_dist(p, w[0], w[1])).fold(f64::INFINITY, f64::min);
        (1.0 - (d - STROKE_HALF_WIDTH)).clamp(0.0, 1.0) as f32
    })
}

fn jittered(base: &[Pt], jitter: f64, rng: &mut ChaCha8Rng) -> Vec<Pt> {
    if jitter == 0.0 {
        return base.to_vec();
    }
    let mut g = || rng.sample::<f64, _>(StandardNormal);
    let angle = 0.08 * jitter * g();
    let (shift_x, shift_y) = (0.8 * jitter * g(), 0.8 * jitter * g());
    let scale = 1.0 + 0.05 * jitter * g();
    let c = IMAGE_SIDE as f64 / 2.0;
    let (sin, cos) = angle.sin_cos();
    base.iter()
        .map(|&(x, y)| {
            let (x, y) = (x + 0.7 * jitter * g(), y + 0.7 * jitter * g());
            let (u, v) = ((x - c) * scale, (y - c) * scale);
            (c + cos * u - sin * v + shift_x, c + sin * u + cos * v + shift_y)
        })
        .collect()
}

/// Each class is a random polyline skeleton; each image is a jittered
/// rendering of it. Fully determined by `cfg`.
pub fn synth_glyphs(cfg: &GlyphGenConfig) -> Result<Dataset> {
    if cfg.num_classes == 0 || cfg.images_per_class == 0 {
        return Err(Error::config("synthetic dataset needs at least one class and one image"));
    }
    if cfg.strokes.0 > cfg.strokes.1 || cfg.strokes.1 < 2 {
        return Err(Error::config(format!("invalid stroke range {:?}", cfg.strokes)));
    }
    if !(cfg.jitter >= 0.0 && cfg.jitter.is_finite()) {
        return Err(Error::config(format!("invalid jitter {}", cfg.jitter)));
    }
    let classes = (0..cfg.num_classes)
        .map(|c| {
            let mut rng = stream(cfg.seed, &[0x6C79, c as u64]);
            let base = skeleton(&mut rng, cfg.strokes);
            let images = (0..cfg.images_per_class)
                .map(|_| rasterize(&jittered(&base, cfg.jitter, &mut rng)))
                .collect();
            ImageClass {
                id: format!("synth/{c:04}"),
                images,
            }
        })
        .collect();
    Dataset::new(classes)
}
