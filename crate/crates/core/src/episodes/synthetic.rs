//! Procedural glyph dataset used as a small stand-in for handwritten
//! character collections.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::dataset::{ClassRecord, Dataset, Image, Split};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const STROKES: usize = 3;
const NOISE_STD: f64 = 0.08;

#[derive(Clone, Copy, Debug)]
struct Segment {
    a: (f64, f64),
    b: (f64, f64),
}

impl Segment {
    fn distance(&self, p: (f64, f64)) -> f64 {
        let (dx, dy) = (self.b.0 - self.a.0, self.b.1 - self.a.1);
        let len2 = dx * dx + dy * dy;
        let t = if len2 == 0.0 {
            0.0
        } else {
            (((p.0 - self.a.0) * dx + (p.1 - self.a.1) * dy) / len2).clamp(0.0, 1.0)
        };
        let (cx, cy) = (self.a.0 + t * dx, self.a.1 + t * dy);
        ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()
    }
}

fn class_glyph(rng: &mut ChaCha8Rng, size: f64) -> Vec<Segment> {
    let lo = 0.2 * size;
    let hi = 0.8 * size;
    let point = |rng: &mut ChaCha8Rng| (rng.random_range(lo..hi), rng.random_range(lo..hi));
    let mut strokes = Vec::with_capacity(STROKES);
    // Consecutive strokes share an endpoint so glyphs read as connected pen
    // paths rather than scattered bars.
    let mut start = point(rng);
    while strokes.len() < STROKES {
        let end = point(rng);
        if (end.0 - start.0).hypot(end.1 - start.1) >= 0.25 * size {
            strokes.push(Segment { a: start, b: end });
            start = end;
        }
    }
    strokes
}

fn render(strokes: &[Segment], size: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let scale = size as f64 / 16.0;
    let shift = (rng.random_range(-1.0..=1.0) * scale, rng.random_range(-1.0..=1.0) * scale);
    let wobble = 0.5 * scale;
    let jittered: Vec<Segment> = strokes
        .iter()
        .map(|s| {
            let mut j = |p: (f64, f64)| {
                (
                    p.0 + shift.0 + rng.random_range(-wobble..=wobble),
                    p.1 + shift.1 + rng.random_range(-wobble..=wobble),
                )
            };
            Segment { a: j(s.a), b: j(s.b) }
        })
        .collect();
    let width = 0.6 * scale;
    let ink = rng.random_range(0.8..=1.0);
    let noise = Normal::new(0.0, NOISE_STD).expect("valid normal");
    let mut data = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let p = (x as f64 + 0.5, y as f64 + 0.5);
            let dist = jittered
                .iter()
                .map(|s| s.distance(p))
                .fold(f64::INFINITY, f64::min);
            let stroke = (width + 0.5 - dist).clamp(0.0, 1.0) * ink;
            data.push((stroke + noise.sample(rng)).clamp(0.0, 1.0));
        }
    }
    Tensor::new(&[size, size, 1], data).expect("consistent shape")
}

/// `n_classes` distinct stroke glyphs, each drawn `images_per_class` times
/// with jittered placement and additive Gaussian noise. Every class starts in
/// the training split; see [`Dataset::assign_splits`].
pub fn generate_synthetic(
    n_classes: usize,
    images_per_class: usize,
    size: usize,
    seed: u64,
) -> Result<Dataset> {
    if size < 16 {
        return Err(Error::Config(format!("synthetic images need size ≥ 16, got {size}")));
    }
    if n_classes == 0 || images_per_class == 0 {
        return Err(Error::Config("synthetic dataset needs at least one class and image".into()));
    }
    let width = (n_classes - 1).to_string().len().max(2);
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let classes = (0..n_classes)
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(master.random());
            let glyph = class_glyph(&mut rng, size as f64);
            let name = format!("glyph_{c:0width$}");
            let images = (0..images_per_class)
                .map(|i| Image {
                    id: (c * images_per_class + i) as u64,
                    source: format!("{name}/{i:03}"),
                    pixels: Arc::new(render(&glyph, size, &mut rng)),
                })
                .collect();
            ClassRecord {
                name,
                split: Split::Train,
                images,
            }
        })
        .collect();
    Dataset::new(classes)
}
