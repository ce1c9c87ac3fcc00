//! IDX container: big-endian magic `00 00 <type> <rank>`, `rank` big-endian
//! u32 extents, then raw values. Only the unsigned-byte type (`0x08`) is
//! supported. Gzip-compressed files are inflated transparently.

use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;
const UBYTE: u8 = 0x08;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

impl IdxArray {
    pub fn magic(&self) -> u32 {
        ((UBYTE as u32) << 8) | self.dims.len() as u32
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::Format(format!("{}: bad gzip stream: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    if bytes.len() < 4 {
        return Err(Error::Format("IDX header truncated".into()));
    }
    if bytes[0] != 0 || bytes[1] != 0 || bytes[2] != UBYTE {
        return Err(Error::Format(format!("bad IDX magic {:02x?}", &bytes[..4])));
    }
    let rank = bytes[3] as usize;
    if rank == 0 {
        return Err(Error::Format("IDX rank 0".into()));
    }
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(Error::Format("IDX extents truncated".into()));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let count = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Format(format!("IDX extents {dims:?} overflow")))?;
    let body = &bytes[header..];
    if body.len() < count {
        return Err(Error::Format(format!(
            "IDX body truncated: {} of {count} bytes",
            body.len()
        )));
    }
    if body.len() > count {
        return Err(Error::Format(format!(
            "IDX body has {} trailing bytes",
            body.len() - count
        )));
    }
    Ok(IdxArray {
        dims,
        data: body.to_vec(),
    })
}

pub fn read_idx(path: &Path) -> Result<IdxArray> {
    parse_idx(&read_bytes(path)?).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn encode_idx(array: &IdxArray) -> Result<Vec<u8>> {
    let count: usize = array.dims.iter().product();
    if array.dims.is_empty() || array.dims.len() > 255 || count != array.data.len() {
        return Err(Error::Argument(format!(
            "cannot encode {} bytes with extents {:?}",
            array.data.len(),
            array.dims
        )));
    }
    let mut out = array.magic().to_be_bytes().to_vec();
    for &d in &array.dims {
        let d = u32::try_from(d).map_err(|_| Error::Argument(format!("extent {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_be_bytes());
    }
    out.extend_from_slice(&array.data);
    Ok(out)
}

pub fn write_idx(path: &Path, array: &IdxArray) -> Result<()> {
    fs::write(path, encode_idx(array)?).map_err(|e| Error::io(path, e))
}

/// `[N, H, W]` unsigned bytes as `[N, H, W, 1]` in `[0, 1]`.
pub fn images_to_tensor(array: &IdxArray) -> Result<Tensor<f32>> {
    if array.magic() != IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "expected image magic {IMAGES_MAGIC:#010x}, got {:#010x}",
            array.magic()
        )));
    }
    let shape = [array.dims[0], array.dims[1], array.dims[2], 1];
    Tensor::new(&shape, array.data.iter().map(|&b| b as f32 / 255.0).collect())
        .map_err(|e| Error::Format(e.to_string()))
}

/// Inverse of [`images_to_tensor`], rounding to the nearest byte.
pub fn tensor_to_images(images: &Tensor<f32>) -> Result<IdxArray> {
    if images.rank() != 4 || images.dim(3) != 1 {
        return Err(Error::Argument(format!("expected [N, H, W, 1], got {:?}", images.shape())));
    }
    Ok(IdxArray {
        dims: images.shape()[..3].to_vec(),
        data: images
            .data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect(),
    })
}

pub fn load_images(path: &Path) -> Result<Tensor<f32>> {
    images_to_tensor(&read_idx(path)?).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn load_labels(path: &Path) -> Result<Vec<u8>> {
    let array = read_idx(path)?;
    if array.magic() != LABELS_MAGIC {
        return Err(Error::Format(format!(
            "{}: expected label magic {LABELS_MAGIC:#010x}, got {:#010x}",
            path.display(),
            array.magic()
        )));
    }
    Ok(array.data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn sample_images() -> IdxArray {
        IdxArray {
            dims: vec![2, 2, 3],
            data: vec![0, 255, 128, 1, 2, 3, 4, 5, 6, 7, 8, 9],
        }
    }

    #[test]
    fn magic_bytes() {
        let bytes = encode_idx(&sample_images()).unwrap();
        assert_eq!(&bytes[..4], &[0, 0, 8, 3]);
        let labels = IdxArray {
            dims: vec![3],
            data: vec![1, 2, 3],
        };
        assert_eq!(&encode_idx(&labels).unwrap()[..4], &[0, 0, 8, 1]);
    }

    #[test]
    fn pixel_scaling_endpoints() {
        let t = images_to_tensor(&sample_images()).unwrap();
        assert_eq!(t.shape(), &[2, 2, 3, 1]);
        assert_eq!(t.data()[0], 0.0);
        assert_eq!(t.data()[1], 1.0);
    }

    #[test]
    fn malformed_inputs_are_format_errors() {
        let good = encode_idx(&sample_images()).unwrap();
        let mut bad_magic = good.clone();
        bad_magic[2] = 0x0d;
        let cases: Vec<Vec<u8>> = vec![
            vec![0, 0],
            bad_magic,
            good[..good.len() - 1].to_vec(),
            good[..6].to_vec(),
            vec![0, 0, 8, 4, 255, 255, 255, 255, 255, 255, 255, 255, 255, 255, 255, 255, 255, 255, 255, 255],
        ];
        for bytes in cases {
            assert!(matches!(parse_idx(&bytes), Err(Error::Format(_))), "{bytes:?}");
        }
    }

    #[test]
    fn file_round_trip_plain_and_gzip() {
        let dir = tempfile::tempdir().unwrap();
        let plain = dir.path().join("x-idx3-ubyte");
        write_idx(&plain, &sample_images()).unwrap();
        assert_eq!(read_idx(&plain).unwrap(), sample_images());

        let gz = dir.path().join("x-idx3-ubyte.gz");
        let mut enc = flate2::write::GzEncoder::new(Vec::new(), flate2::Compression::default());
        enc.write_all(&encode_idx(&sample_images()).unwrap()).unwrap();
        fs::write(&gz, enc.finish().unwrap()).unwrap();
        assert_eq!(read_idx(&gz).unwrap(), sample_images());
    }

    #[test]
    fn wrong_kind_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("labels");
        write_idx(
            &p,
            &IdxArray {
                dims: vec![2],
                data: vec![1, 2],
            },
        )
        .unwrap();
        assert!(load_images(&p).is_err());
        assert_eq!(load_labels(&p).unwrap(), vec![1, 2]);
        assert!(matches!(read_idx(&dir.path().join("missing")), Err(Error::Io { .. })));
    }
}
