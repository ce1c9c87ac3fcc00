//! Single-channel image warps with zero fill.

use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    /// Integer shift bound in pixels, both axes.
    pub max_shift: i32,
    /// Rotation bound in degrees.
    pub max_rotation: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            max_shift: 2,
            max_rotation: 10.0,
        }
    }
}

impl AugmentConfig {
    pub fn identity() -> Self {
        Self {
            max_shift: 0,
            max_rotation: 0.0,
        }
    }
}

fn pixel(image: &[f32], h: usize, w: usize, y: isize, x: isize) -> f32 {
    if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
        0.0
    } else {
        image[y as usize * w + x as usize]
    }
}

/// Integer translation: output `(y, x)` takes input `(y - dy, x - dx)`.
pub fn shift(image: &[f32], h: usize, w: usize, dx: i32, dy: i32) -> Vec<f32> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = pixel(image, h, w, y as isize - dy as isize, x as isize - dx as isize);
        }
    }
    out
}

/// Rotation by `degrees` (counter-clockwise on screen) about the image
/// centre, then translation by `(dx, dy)`, with bilinear sampling.
pub fn rotate_shift(image: &[f32], h: usize, w: usize, degrees: f64, dx: f64, dy: f64) -> Vec<f32> {
    if degrees == 0.0 && dx.fract() == 0.0 && dy.fract() == 0.0 {
        return shift(image, h, w, dx as i32, dy as i32);
    }
    let (sin, cos) = (-degrees.to_radians()).sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            // inverse map: undo the shift, then rotate back about the centre
            let px = x as f64 - dx - cx;
            let py = y as f64 - dy - cy;
            let sx = cos * px + sin * py + cx;
            let sy = -sin * px + cos * py + cy;
            let x0 = sx.floor();
            let y0 = sy.floor();
            let fx = (sx - x0) as f32;
            let fy = (sy - y0) as f32;
            let (x0, y0) = (x0 as isize, y0 as isize);
            let v = pixel(image, h, w, y0, x0) * (1.0 - fx) * (1.0 - fy)
                + pixel(image, h, w, y0, x0 + 1) * fx * (1.0 - fy)
                + pixel(image, h, w, y0 + 1, x0) * (1.0 - fx) * fy
                + pixel(image, h, w, y0 + 1, x0 + 1) * fx * fy;
            out[y * w + x] = v.clamp(0.0, 1.0);
        }
    }
    out
}

pub fn rotate(image: &[f32], h: usize, w: usize, degrees: f64) -> Vec<f32> {
    rotate_shift(image, h, w, degrees, 0.0, 0.0)
}

/// Random integer shift in `[-t, t]` on both axes plus a random rotation in
/// `[-theta, theta]` degrees.
pub fn augment<R: Rng + ?Sized>(image: &[f32], h: usize, w: usize, cfg: &AugmentConfig, rng: &mut R) -> Vec<f32> {
    let t = cfg.max_shift.max(0);
    let dx = rng.random_range(-t..=t);
    let dy = rng.random_range(-t..=t);
    let angle = if cfg.max_rotation > 0.0 {
        rng.random_range(-cfg.max_rotation..=cfg.max_rotation)
    } else {
        0.0
    };
    rotate_shift(image, h, w, angle, dx as f64, dy as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn blob() -> Vec<f32> {
        let mut img = vec![0.0; 28 * 28];
        for y in 10..18 {
            for x in 12..16 {
                img[y * 28 + x] = 0.5 + (x as f32) / 100.0;
            }
        }
        img
    }

    #[test]
    fn zero_bounds_are_identity() {
        let img = blob();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(augment(&img, 28, 28, &AugmentConfig::identity(), &mut rng), img);
        assert_eq!(rotate(&img, 28, 28, 0.0), img);
    }

    #[test]
    fn shift_moves_columns_and_zero_fills() {
        let img: Vec<f32> = (0..16).map(|v| v as f32 / 16.0).collect();
        let out = shift(&img, 4, 4, 2, 0);
        for y in 0..4 {
            assert_eq!(out[y * 4], 0.0);
            assert_eq!(out[y * 4 + 1], 0.0);
            assert_eq!(out[y * 4 + 2], img[y * 4]);
            assert_eq!(out[y * 4 + 3], img[y * 4 + 1]);
        }
    }

    #[test]
    fn quarter_turn_is_exact_permutation() {
        let img: Vec<f32> = (0..9).map(|v| v as f32 / 9.0).collect();
        let out = rotate(&img, 3, 3, 90.0);
        // counter-clockwise: the top-right corner moves to the top-left
        assert!((out[0] - img[2]).abs() < 1e-6);
        assert!((out[4] - img[4]).abs() < 1e-6);
    }

    #[test]
    fn rotation_preserves_range_and_roughly_mass() {
        let img = blob();
        let out = rotate(&img, 28, 28, 7.5);
        assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
        let (a, b): (f32, f32) = (img.iter().sum(), out.iter().sum());
        assert!((a - b).abs() / a < 0.05);
    }

    #[test]
    fn seeded_stream_is_reproducible() {
        let img = blob();
        let cfg = AugmentConfig::default();
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..5).map(|_| augment(&img, 28, 28, &cfg, &mut rng)).collect::<Vec<_>>()
        };
        assert_eq!(run(3), run(3));
        assert_ne!(run(3), run(4));
    }
}
