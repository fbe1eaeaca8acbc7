//! Localization fixtures: one bright shape in one quadrant, class given by the shape.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::image::{scale_and_normalize, RawImage, IMAGENET_MEAN, IMAGENET_STD};
use crate::scalar::Scalar;

/// Class index to shape.
pub const QUADRANT_SHAPES: [&str; 3] = ["horizontal_bar", "vertical_bar", "disk"];

#[derive(Debug, Clone, PartialEq)]
pub struct QuadrantImage {
    pub raw: RawImage,
    pub label: usize,
    /// 0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right.
    pub quadrant: usize,
}

impl QuadrantImage {
    pub fn tensor<T: Scalar>(&self) -> Tensor<T> {
        scale_and_normalize::<T>(&self.raw, IMAGENET_MEAN, IMAGENET_STD).tensor
    }
}

fn inside_shape(label: usize, dy: f64, dx: f64, half: f64) -> bool {
    let (long, short) = (0.4 * half, 0.12 * half);
    match label {
        0 => dx.abs() <= long && dy.abs() <= short,
        1 => dy.abs() <= long && dx.abs() <= short,
        _ => dy * dy + dx * dx <= (0.3 * half).powi(2),
    }
}

/// `n` images of side `size` (even, at least 16) with balanced labels.
pub fn quadrant_images(n: usize, size: usize, seed: u64) -> Result<Vec<QuadrantImage>> {
    if size < 16 || size % 2 != 0 {
        return Err(Error::InvalidArgument(format!("quadrant image size {size} must be even and at least 16")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 12.0).expect("positive sd");
    let half = size / 2;
    (0..n)
        .map(|i| {
            let label = i % 3;
            let quadrant = rng.gen_range(0..4);
            let (oy, ox) = ((quadrant / 2) * half, (quadrant % 2) * half);
            let jitter = half as f64 * 0.1;
            let cy = oy as f64 + half as f64 / 2.0 + rng.gen_range(-jitter..=jitter);
            let cx = ox as f64 + half as f64 / 2.0 + rng.gen_range(-jitter..=jitter);
            let pixels = (0..size * size)
                .map(|k| {
                    let (r, c) = ((k / size) as f64 + 0.5, (k % size) as f64 + 0.5);
                    let base: f64 = if inside_shape(label, r - cy, c - cx, half as f64) { 210.0 } else { 70.0 };
                    (base + noise.sample(&mut rng)).round().clamp(0.0, 255.0) as u8
                })
                .collect();
            Ok(QuadrantImage {
                raw: RawImage::new(size, size, pixels)?,
                label,
                quadrant,
            })
        })
        .collect()
}

/// Fraction of the total heatmap mass inside `quadrant` (0 for an all-zero map).
pub fn quadrant_mass(heatmap: &[f64], size: usize, quadrant: usize) -> f64 {
    assert_eq!(heatmap.len(), size * size, "heatmap must be size x size");
    let total: f64 = heatmap.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    let half = size / 2;
    let (r0, c0) = ((quadrant / 2) * half, (quadrant % 2) * half);
    let (r1, c1) = (if r0 == 0 { half } else { size }, if c0 == 0 { half } else { size });
    let inside: f64 = (r0..r1).flat_map(|r| (c0..c1).map(move |c| r * size + c)).map(|k| heatmap[k]).sum();
    inside / total
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_sits_in_its_quadrant() {
        for img in quadrant_images(12, 32, 3).unwrap() {
            let bright: Vec<f64> = img.raw.pixels().iter().map(|&p| if p > 150 { 1.0 } else { 0.0 }).collect();
            assert!(quadrant_mass(&bright, 32, img.quadrant) > 0.9);
        }
    }

    #[test]
    fn mass_of_uniform_map_is_a_quarter() {
        let m = vec![1.0; 36];
        for q in 0..4 {
            assert!((quadrant_mass(&m, 6, q) - 0.25).abs() < 1e-12);
        }
        assert_eq!(quadrant_mass(&[0.0; 36], 6, 2), 0.0);
    }

    #[test]
    fn deterministic_and_balanced() {
        let a = quadrant_images(30, 16, 1).unwrap();
        assert_eq!(a, quadrant_images(30, 16, 1).unwrap());
        assert_eq!(a.iter().filter(|x| x.label == 2).count(), 10);
        assert!(quadrant_images(3, 15, 1).is_err());
    }
}
