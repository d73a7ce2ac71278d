//! Procedurally rendered handwritten-style digits at 28x28, used as the
//! desk-scale stand-in when the real IDX digit files are not on disk. Each
//! digit is a seven-segment-style stroke set rasterized under a random
//! affine jitter with soft edges and background noise, so the task has
//! MNIST's shape (10 classes, 28x28x1, mostly-dark corners) while remaining
//! fully reproducible from a seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::LabeledImages;
use crate::error::Result;
use crate::tensor::Tensor;

const DIM: usize = 28;

/// Segment endpoints in a unit box (x right, y down).
type Seg = ((f64, f64), (f64, f64));

fn glyph_segments(digit: usize) -> Vec<Seg> {
    // seven-segment corners
    let a: Seg = ((0.25, 0.16), (0.75, 0.16));
    let b: Seg = ((0.75, 0.16), (0.75, 0.5));
    let c: Seg = ((0.75, 0.5), (0.75, 0.84));
    let d: Seg = ((0.25, 0.84), (0.75, 0.84));
    let e: Seg = ((0.25, 0.5), (0.25, 0.84));
    let f: Seg = ((0.25, 0.16), (0.25, 0.5));
    let g: Seg = ((0.25, 0.5), (0.75, 0.5));
    match digit {
        0 => vec![a, b, c, d, e, f],
        1 => vec![b, c],
        2 => vec![a, b, g, e, d],
        3 => vec![a, b, g, c, d],
        4 => vec![f, g, b, c],
        5 => vec![a, f, g, c, d],
        6 => vec![a, f, g, e, c, d],
        7 => vec![a, b, c],
        8 => vec![a, b, c, d, e, f, g],
        9 => vec![a, b, c, d, f, g],
        _ => unreachable!("ten digit glyphs"),
    }
}

fn dist_to_segment(px: f64, py: f64, seg: &Seg) -> f64 {
    let ((x1, y1), (x2, y2)) = *seg;
    let (dx, dy) = (x2 - x1, y2 - y1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - x1) * dx + (py - y1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (x1 + t * dx, y1 + t * dy);
    ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
}

/// Render `size` digit samples, classes cycling 0..10.
pub fn digits_dataset(size: usize, seed: u64) -> Result<LabeledImages> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(size * DIM * DIM);
    let mut labels = Vec::with_capacity(size);
    for i in 0..size {
        let digit = i % 10;
        let segs = glyph_segments(digit);
        let ink: f64 = rng.random_range(0.75..1.0);
        let thickness: f64 = rng.random_range(0.045..0.075);
        let angle: f64 = rng.random_range(-0.18..0.18);
        let scale: f64 = rng.random_range(0.85..1.1);
        let (tx, ty): (f64, f64) = (rng.random_range(-0.07..0.07), rng.random_range(-0.07..0.07));
        let (cos_a, sin_a) = (angle.cos(), angle.sin());
        let edge = 0.03;
        for row in 0..DIM {
            for col in 0..DIM {
                // pixel center in unit coordinates, then the inverse affine
                let ux = (col as f64 + 0.5) / DIM as f64 - 0.5 - tx;
                let uy = (row as f64 + 0.5) / DIM as f64 - 0.5 - ty;
                let gx = (cos_a * ux + sin_a * uy) / scale + 0.5;
                let gy = (-sin_a * ux + cos_a * uy) / scale + 0.5;
                let dist = segs
                    .iter()
                    .map(|s| dist_to_segment(gx, gy, s))
                    .fold(f64::INFINITY, f64::min);
                let coverage = ((thickness + edge - dist) / edge).clamp(0.0, 1.0);
                let noise: f64 = rng.random_range(0.0..0.05);
                data.push((ink * coverage + noise).min(1.0));
            }
        }
        labels.push(digit);
    }
    LabeledImages::new(Tensor::new(vec![size, DIM, DIM, 1], data)?, labels, 10)
}

/// Warp every image with a smooth random displacement field (a coarse grid
/// of offsets bilinearly upsampled, then bilinear resampling). Produces the
/// "similar distribution" calibration material.
pub fn elastic_deform(data: &LabeledImages, magnitude: f64, seed: u64) -> Result<LabeledImages> {
    let (h, w, c) = data.image_dims();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = 4usize;
    let mut out = Vec::with_capacity(data.images.len());
    for i in 0..data.len() {
        let img = data.image(i);
        let mut field_x = vec![0.0; grid * grid];
        let mut field_y = vec![0.0; grid * grid];
        for v in field_x.iter_mut().chain(field_y.iter_mut()) {
            *v = rng.random_range(-magnitude..magnitude);
        }
        let sample_field = |field: &[f64], row: f64, col: f64| -> f64 {
            let gr = row / (h - 1) as f64 * (grid - 1) as f64;
            let gc = col / (w - 1) as f64 * (grid - 1) as f64;
            let (r0, c0) = (gr.floor() as usize, gc.floor() as usize);
            let (r1, c1) = ((r0 + 1).min(grid - 1), (c0 + 1).min(grid - 1));
            let (fr, fc) = (gr - r0 as f64, gc - c0 as f64);
            field[r0 * grid + c0] * (1.0 - fr) * (1.0 - fc)
                + field[r1 * grid + c0] * fr * (1.0 - fc)
                + field[r0 * grid + c1] * (1.0 - fr) * fc
                + field[r1 * grid + c1] * fr * fc
        };
        for row in 0..h {
            for col in 0..w {
                let sr = row as f64 + sample_field(&field_y, row as f64, col as f64);
                let sc = col as f64 + sample_field(&field_x, row as f64, col as f64);
                for ch in 0..c {
                    out.push(bilinear(&img, h, w, c, sr, sc, ch));
                }
            }
        }
    }
    LabeledImages::new(
        Tensor::new(vec![data.len(), h, w, c], out)?,
        data.labels.clone(),
        data.num_classes,
    )
}

fn bilinear(img: &Tensor, h: usize, w: usize, c: usize, row: f64, col: f64, ch: usize) -> f64 {
    let row = row.clamp(0.0, (h - 1) as f64);
    let col = col.clamp(0.0, (w - 1) as f64);
    let (r0, c0) = (row.floor() as usize, col.floor() as usize);
    let (r1, c1) = ((r0 + 1).min(h - 1), (c0 + 1).min(w - 1));
    let (fr, fc) = (row - r0 as f64, col - c0 as f64);
    let at = |r: usize, cl: usize| img.data()[(r * w + cl) * c + ch];
    at(r0, c0) * (1.0 - fr) * (1.0 - fc)
        + at(r1, c0) * fr * (1.0 - fc)
        + at(r0, c1) * (1.0 - fr) * fc
        + at(r1, c1) * fr * fc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_by_seed() {
        let a = digits_dataset(40, 11).unwrap();
        let b = digits_dataset(40, 11).unwrap();
        assert_eq!(a.images, b.images);
    }

    #[test]
    fn ten_classes_cycle() {
        let d = digits_dataset(50, 1).unwrap();
        assert_eq!(d.num_classes, 10);
        for k in 0..10 {
            assert_eq!(d.labels.iter().filter(|&&l| l == k).count(), 5);
        }
    }

    #[test]
    fn pixels_stay_in_unit_range() {
        let d = digits_dataset(30, 2).unwrap();
        assert!(d.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn trigger_corner_is_mostly_dark() {
        // glyphs sit in the center; the stamp region should read far below ink level
        let d = digits_dataset(100, 3).unwrap();
        let mut corner_sum = 0.0;
        let mut n = 0.0;
        for i in 0..d.len() {
            let img = d.image(i);
            for row in 22..28 {
                for col in 22..28 {
                    corner_sum += img.data()[row * 28 + col];
                    n += 1.0;
                }
            }
        }
        assert!(corner_sum / n < 0.15, "corner mean {}", corner_sum / n);
    }

    #[test]
    fn elastic_deform_keeps_shape_and_labels() {
        let d = digits_dataset(10, 4).unwrap();
        let e = elastic_deform(&d, 2.0, 5).unwrap();
        assert_eq!(e.images.shape(), d.images.shape());
        assert_eq!(e.labels, d.labels);
        assert_ne!(e.images, d.images);
    }

    #[test]
    fn cnn_separates_digits() {
        use crate::nn::{train_clean, Model, Optimizer};
        use crate::tensor::Precision;
        let train = digits_dataset(800, 21).unwrap();
        let test = digits_dataset(200, 22).unwrap();
        let mut model = Model::mini_cnn(&[28, 28, 1], 10, Precision::F32, 1).unwrap();
        let mut opt = Optimizer::adam(5e-4);
        let log = train_clean(&mut model, &train, 4, 32, &mut opt, Some(&test), 0).unwrap();
        let cda = *log.epoch_cda.last().unwrap();
        assert!(cda >= 0.95, "digits cda {cda}");
    }
}
