//! Two-digit overlays on a padded canvas.

use rand::Rng;

use crate::data::augment::shift;
use crate::error::{Error, Result};

pub const DIGIT_SIDE: usize = 28;
pub const CANVAS_SIDE: usize = 36;
pub const MAX_SHIFT: i32 = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct MultiSample {
    /// Merged canvas, `CANVAS_SIDE^2` values in `[0, 1]`.
    pub image: Vec<f32>,
    pub classes: [usize; 2],
    /// Each digit alone on the canvas at its final position.
    pub aux: [Vec<f32>; 2],
    /// `(dx, dy)` per digit.
    pub shifts: [(i32, i32); 2],
}

/// Centres a `DIGIT_SIDE` square digit on the canvas.
pub fn pad_digit(digit: &[f32]) -> Vec<f32> {
    let off = (CANVAS_SIDE - DIGIT_SIDE) / 2;
    let mut out = vec![0.0; CANVAS_SIDE * CANVAS_SIDE];
    for y in 0..DIGIT_SIDE {
        let row = (y + off) * CANVAS_SIDE + off;
        out[row..row + DIGIT_SIDE].copy_from_slice(&digit[y * DIGIT_SIDE..(y + 1) * DIGIT_SIDE]);
    }
    out
}

/// Deterministic overlay with explicit shifts.
pub fn compose(
    digit_a: &[f32],
    class_a: usize,
    digit_b: &[f32],
    class_b: usize,
    shifts: [(i32, i32); 2],
) -> Result<MultiSample> {
    if class_a == class_b {
        return Err(Error::Argument(format!("both digits have class {class_a}")));
    }
    let expected = DIGIT_SIDE * DIGIT_SIDE;
    if digit_a.len() != expected || digit_b.len() != expected {
        return Err(Error::Argument(format!("digits must hold {expected} pixels")));
    }
    if shifts.iter().any(|(x, y)| x.abs() > MAX_SHIFT || y.abs() > MAX_SHIFT) {
        return Err(Error::Argument(format!("shifts {shifts:?} exceed {MAX_SHIFT}")));
    }
    let place = |digit: &[f32], (dx, dy): (i32, i32)| shift(&pad_digit(digit), CANVAS_SIDE, CANVAS_SIDE, dx, dy);
    let a = place(digit_a, shifts[0]);
    let b = place(digit_b, shifts[1]);
    let image = a.iter().zip(&b).map(|(x, y)| x.max(*y).clamp(0.0, 1.0)).collect();
    Ok(MultiSample {
        image,
        classes: [class_a, class_b],
        aux: [a, b],
        shifts,
    })
}

pub fn random_shift<R: Rng + ?Sized>(rng: &mut R) -> (i32, i32) {
    (
        rng.random_range(-MAX_SHIFT..=MAX_SHIFT),
        rng.random_range(-MAX_SHIFT..=MAX_SHIFT),
    )
}

/// Overlay with independent uniform shifts in `[-MAX_SHIFT, MAX_SHIFT]`.
pub fn make_multimnist<R: Rng + ?Sized>(
    digit_a: &[f32],
    class_a: usize,
    digit_b: &[f32],
    class_b: usize,
    rng: &mut R,
) -> Result<MultiSample> {
    let shifts = [random_shift(rng), random_shift(rng)];
    compose(digit_a, class_a, digit_b, class_b, shifts)
}

/// Fraction of a digit frame covered by the other one.
pub fn frame_overlap(a: (i32, i32), b: (i32, i32)) -> f64 {
    let side = DIGIT_SIDE as i32;
    let ox = (side - (a.0 - b.0).abs()).max(0);
    let oy = (side - (a.1 - b.1).abs()).max(0);
    (ox * oy) as f64 / (side * side) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn digit(seed: u64) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..DIGIT_SIDE * DIGIT_SIDE).map(|_| rng.random::<f32>()).collect()
    }

    #[test]
    fn blank_partner_gives_padded_digit() {
        let a = digit(1);
        let s = compose(&a, 3, &vec![0.0; 784], 5, [(0, 0), (0, 0)]).unwrap();
        assert_eq!(s.image, pad_digit(&a));
        assert_eq!(s.image.len(), CANVAS_SIDE * CANVAS_SIDE);
        assert_eq!(s.aux[0], s.image);
    }

    #[test]
    fn merge_is_pixelwise_max() {
        let (a, b) = (digit(1), digit(2));
        let s = compose(&a, 0, &b, 1, [(1, -2), (-3, 4)]).unwrap();
        for i in 0..s.image.len() {
            assert_eq!(s.image[i], s.aux[0][i].max(s.aux[1][i]));
        }
    }

    #[test]
    fn same_class_rejected() {
        let a = digit(1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(make_multimnist(&a, 4, &a, 4, &mut rng), Err(Error::Argument(_))));
    }

    #[test]
    fn overlap_of_frames() {
        assert_eq!(frame_overlap((0, 0), (0, 0)), 1.0);
        assert!((frame_overlap((4, 0), (-4, 0)) - 20.0 / 28.0).abs() < 1e-12);
        assert!((frame_overlap((2, 1), (0, 0)) - 26.0 * 27.0 / 784.0).abs() < 1e-12);
    }
}
