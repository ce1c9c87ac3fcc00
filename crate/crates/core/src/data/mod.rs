//! Dataset ingestion, augmentation, MultiMNIST synthesis and batching.

pub mod augment;
pub mod idx;
pub mod multimnist;
pub mod stream;

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use augment::AugmentConfig;
pub use multimnist::{make_multimnist, MultiSample};
pub use stream::{epoch_stream, EpochStream, StreamMode};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn stem(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "t10k",
        }
    }
}

/// Labelled single-channel images, `[N, H, W, 1]` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Tensor<f32>,
    labels: Vec<u8>,
}

fn find_file(dir: &Path, name: &str) -> Result<PathBuf> {
    for candidate in [dir.join(name), dir.join(format!("{name}.gz"))] {
        if candidate.is_file() {
            return Ok(candidate);
        }
    }
    Err(Error::io(
        dir.join(name),
        std::io::Error::new(std::io::ErrorKind::NotFound, "dataset file not found (plain or .gz)"),
    ))
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<u8>) -> Result<Self> {
        if images.rank() != 4 || images.dim(3) != 1 {
            return Err(Error::Argument(format!("expected [N, H, W, 1] images, got {:?}", images.shape())));
        }
        if images.dim(0) != labels.len() {
            return Err(Error::Argument(format!(
                "{} images but {} labels",
                images.dim(0),
                labels.len()
            )));
        }
        Ok(Self { images, labels })
    }

    /// Reads `train-*` or `t10k-*` IDX files (optionally gzipped) from `dir`.
    pub fn load(dir: &Path, split: Split) -> Result<Self> {
        let stem = split.stem();
        let images = idx::load_images(&find_file(dir, &format!("{stem}-images-idx3-ubyte"))?)?;
        let labels = idx::load_labels(&find_file(dir, &format!("{stem}-labels-idx1-ubyte"))?)?;
        Self::new(images, labels)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn height(&self) -> usize {
        self.images.dim(1)
    }

    pub fn width(&self) -> usize {
        self.images.dim(2)
    }

    pub fn images(&self) -> &Tensor<f32> {
        &self.images
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let per = self.height() * self.width();
        &self.images.data()[i * per..(i + 1) * per]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    /// The first `n` items (all of them if `n` exceeds the length).
    pub fn head(&self, n: usize) -> Self {
        self.select(&(0..n.min(self.len())).collect::<Vec<_>>())
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        let per = self.height() * self.width();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        Self {
            images: Tensor::new(&[indices.len(), self.height(), self.width(), 1], data)
                .expect("extents follow the source"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// Item indices grouped by label.
    pub fn by_class(&self, classes: usize) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); classes];
        for (i, &l) in self.labels.iter().enumerate() {
            if (l as usize) < classes {
                groups[l as usize].push(i);
            }
        }
        groups
    }
}

/// One training example before batching.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Vec<f32>,
    /// Distinct classes present, in placement order.
    pub classes: Vec<usize>,
    /// Per-digit reconstruction targets of an overlay.
    pub aux: Option<[Vec<f32>; 2]>,
}

impl Sample {
    pub fn label(&self, classes: usize) -> Vec<f32> {
        let mut hot = vec![0.0; classes];
        for &c in &self.classes {
            hot[c] = 1.0;
        }
        hot
    }
}

/// Reconstruction target: decode class `classes[i]` of item `i` towards row `i` of `image`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReconTarget<T = f32> {
    pub classes: Vec<usize>,
    /// `[N, H*W]`.
    pub image: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T = f32> {
    /// `[N, H, W, 1]`.
    pub images: Tensor<T>,
    /// Multi-hot `[N, classes]`.
    pub targets: Tensor<T>,
    pub labels: Vec<Vec<usize>>,
    pub recon: Vec<ReconTarget<T>>,
}

impl<T: Scalar> Batch<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn cast<U: Scalar>(&self) -> Batch<U> {
        Batch {
            images: self.images.cast(),
            targets: self.targets.cast(),
            labels: self.labels.clone(),
            recon: self
                .recon
                .iter()
                .map(|r| ReconTarget {
                    classes: r.classes.clone(),
                    image: r.image.cast(),
                })
                .collect(),
        }
    }
}

impl Batch<f32> {
    /// Stacks square samples. Overlays get one reconstruction per digit,
    /// plain samples reconstruct their own image.
    pub fn from_samples(samples: &[Sample], side: usize, classes: usize) -> Result<Self> {
        let n = samples.len();
        if n == 0 {
            return Err(Error::Argument("empty batch".into()));
        }
        let pixels = side * side;
        let mut images = Vec::with_capacity(n * pixels);
        let mut targets = Vec::with_capacity(n * classes);
        for s in samples {
            if s.image.len() != pixels {
                return Err(Error::Argument(format!("sample has {} pixels, expected {pixels}", s.image.len())));
            }
            if s.classes.is_empty() || s.classes.iter().any(|&c| c >= classes) {
                return Err(Error::Argument(format!("invalid classes {:?}", s.classes)));
            }
            images.extend_from_slice(&s.image);
            targets.extend(s.label(classes));
        }
        let overlays = samples.iter().all(|s| s.aux.is_some());
        let recon = if overlays {
            (0..2)
                .map(|k| {
                    let mut img = Vec::with_capacity(n * pixels);
                    for s in samples {
                        img.extend_from_slice(&s.aux.as_ref().expect("checked")[k]);
                    }
                    Ok(ReconTarget {
                        classes: samples.iter().map(|s| s.classes[k]).collect(),
                        image: Tensor::new(&[n, pixels], img)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            vec![ReconTarget {
                classes: samples.iter().map(|s| s.classes[0]).collect(),
                image: Tensor::new(&[n, pixels], images.clone())?,
            }]
        };
        Ok(Self {
            images: Tensor::new(&[n, side, side, 1], images)?,
            targets: Tensor::new(&[n, classes], targets)?,
            labels: samples.iter().map(|s| s.classes.clone()).collect(),
            recon,
        })
    }
}

/// Generator keyed by `(seed, epoch, index)` and a stream tag, independent
/// of the order in which items are requested.
pub fn keyed_rng(seed: u64, epoch: u64, index: u64, tag: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    for (chunk, v) in key.chunks_exact_mut(8).zip([seed, epoch, index, tag]) {
        chunk.copy_from_slice(&v.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        let images = Tensor::from_fn(&[4, 2, 2, 1], |i| i as f32 / 16.0);
        Dataset::new(images, vec![0, 1, 1, 2]).unwrap()
    }

    #[test]
    fn dataset_accessors() {
        let d = tiny();
        assert_eq!(d.len(), 4);
        assert_eq!(d.image(1), &[4.0 / 16.0, 5.0 / 16.0, 6.0 / 16.0, 7.0 / 16.0]);
        assert_eq!(d.by_class(3), vec![vec![0], vec![1, 2], vec![3]]);
        let s = d.select(&[3, 0]);
        assert_eq!(s.labels(), &[2, 0]);
        assert_eq!(s.image(0), d.image(3));
        assert_eq!(d.head(10).len(), 4);
        assert!(Dataset::new(Tensor::zeros(&[2, 2, 2, 1]), vec![0]).is_err());
    }

    #[test]
    fn batch_from_plain_samples() {
        let samples = vec![
            Sample {
                image: vec![0.1, 0.2, 0.3, 0.4],
                classes: vec![2],
                aux: None,
            },
            Sample {
                image: vec![0.5, 0.6, 0.7, 0.8],
                classes: vec![0],
                aux: None,
            },
        ];
        let b = Batch::from_samples(&samples, 2, 3).unwrap();
        assert_eq!(b.images.shape(), &[2, 2, 2, 1]);
        assert_eq!(b.targets.data(), &[0.0, 0.0, 1.0, 1.0, 0.0, 0.0]);
        assert_eq!(b.recon.len(), 1);
        assert_eq!(b.recon[0].classes, vec![2, 0]);
        assert_eq!(b.recon[0].image.data(), b.images.data());
    }

    #[test]
    fn keyed_rng_depends_on_every_key() {
        use rand::Rng;
        let draw = |s, e, i, t| keyed_rng(s, e, i, t).random::<u64>();
        let base = draw(1, 2, 3, 4);
        assert_eq!(base, draw(1, 2, 3, 4));
        assert_ne!(base, draw(0, 2, 3, 4));
        assert_ne!(base, draw(1, 0, 3, 4));
        assert_ne!(base, draw(1, 2, 0, 4));
        assert_ne!(base, draw(1, 2, 3, 0));
    }
}
