//! Image and table output for analysis results.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

/// Binary greyscale PGM (P5) from values in `[0, 1]`; out-of-range values
/// are clamped.
pub fn encode_pgm(pixels: &[f32], h: usize, w: usize) -> Result<Vec<u8>> {
    if pixels.len() != h * w {
        return Err(Error::Argument(format!("{} pixels for a {h}x{w} image", pixels.len())));
    }
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn write_pgm(path: &Path, pixels: &[f32], h: usize, w: usize) -> Result<()> {
    let bytes = encode_pgm(pixels, h, w)?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Tiles `images` (each `h x w`) left to right into rows of `cols`, with a
/// one-pixel gap. Returns the canvas and its height and width.
pub fn tile(images: &[&[f32]], h: usize, w: usize, cols: usize) -> Result<(Vec<f32>, usize, usize)> {
    if images.is_empty() || cols == 0 {
        return Err(Error::Argument("nothing to tile".into()));
    }
    if let Some(bad) = images.iter().find(|im| im.len() != h * w) {
        return Err(Error::Argument(format!("tile of {} pixels, expected {h}x{w}", bad.len())));
    }
    let cols = cols.min(images.len());
    let rows = images.len().div_ceil(cols);
    let (ch, cw) = (rows * (h + 1) - 1, cols * (w + 1) - 1);
    let mut canvas = vec![0.0; ch * cw];
    for (n, im) in images.iter().enumerate() {
        let (r0, c0) = ((n / cols) * (h + 1), (n % cols) * (w + 1));
        for y in 0..h {
            let at = (r0 + y) * cw + c0;
            canvas[at..at + w].copy_from_slice(&im[y * w..(y + 1) * w]);
        }
    }
    Ok((canvas, ch, cw))
}

pub fn write_csv<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    let fail = |e: csv::Error| Error::Format(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(fail)?;
    for r in rows {
        w.serialize(r).map_err(fail)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_header_and_clamp() {
        let b = encode_pgm(&[0.0, 0.5, 1.0, 2.0, -1.0, 1.0], 2, 3).unwrap();
        let header = b"P5\n3 2\n255\n";
        assert_eq!(&b[..header.len()], header);
        assert_eq!(&b[header.len()..], &[0, 128, 255, 255, 0, 255]);
        assert!(encode_pgm(&[0.0; 5], 2, 3).is_err());
    }

    #[test]
    fn tile_places_images() {
        let a = [1.0; 4];
        let b = [0.5; 4];
        let c = [0.25; 4];
        let (canvas, h, w) = tile(&[&a, &b, &c], 2, 2, 2).unwrap();
        assert_eq!((h, w), (5, 5));
        assert_eq!(canvas[0], 1.0);
        assert_eq!(canvas[2], 0.0);
        assert_eq!(canvas[3], 0.5);
        assert_eq!(canvas[3 * 5], 0.25);
        assert_eq!(canvas[3 * 5 + 3], 0.0);
    }
}
