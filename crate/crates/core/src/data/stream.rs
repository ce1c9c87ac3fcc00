//! Deterministic epoch streams. Item `i` of epoch `e` is a pure function of
//! `(seed, e, i)`, so batches can be produced in any order or in parallel.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::augment::{augment, AugmentConfig};
use crate::data::multimnist::{self, make_multimnist, CANVAS_SIDE};
use crate::data::{keyed_rng, Batch, Dataset, Sample};
use crate::error::{Error, Result};

const TAG_ORDER: u64 = 1;
const TAG_SAMPLE: u64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode")]
pub enum StreamMode {
    /// Single digits, optionally augmented.
    Mnist { augment: AugmentConfig },
    /// `per_digit` overlays per base digit, partner drawn uniformly from the
    /// items of other classes.
    Multimnist { per_digit: usize },
}

impl StreamMode {
    pub fn side(&self, data: &Dataset) -> usize {
        match self {
            StreamMode::Mnist { .. } => data.height(),
            StreamMode::Multimnist { .. } => CANVAS_SIDE,
        }
    }
}

pub struct EpochStream<'a> {
    data: &'a Dataset,
    mode: StreamMode,
    seed: u64,
    epoch: u64,
    batch_size: usize,
    classes: usize,
    order: Vec<usize>,
    pos: usize,
}

/// Stream over one epoch. With `shuffle` off, items come in dataset order.
pub fn epoch_stream<'a>(
    data: &'a Dataset,
    mode: StreamMode,
    classes: usize,
    seed: u64,
    epoch: u64,
    batch_size: usize,
    shuffle: bool,
) -> Result<EpochStream<'a>> {
    if batch_size == 0 {
        return Err(Error::Argument("batch size must be at least 1".into()));
    }
    if data.is_empty() {
        return Err(Error::Argument("empty dataset".into()));
    }
    if let Some(&bad) = data.labels().iter().find(|&&l| l as usize >= classes) {
        return Err(Error::Argument(format!("label {bad} outside {classes} classes")));
    }
    if data.height() != data.width() {
        return Err(Error::Argument("images must be square".into()));
    }
    let len = match &mode {
        StreamMode::Mnist { .. } => data.len(),
        StreamMode::Multimnist { per_digit } => {
            let first = data.labels()[0];
            if data.labels().iter().all(|&l| l == first) {
                return Err(Error::Argument("overlays need at least two classes".into()));
            }
            if data.height() != multimnist::DIGIT_SIDE {
                return Err(Error::Argument(format!(
                    "overlays need {0}x{0} digits",
                    multimnist::DIGIT_SIDE
                )));
            }
            data.len() * per_digit
        }
    };
    let mut order: Vec<usize> = (0..len).collect();
    if shuffle {
        order.shuffle(&mut keyed_rng(seed, epoch, u64::MAX, TAG_ORDER));
    }
    Ok(EpochStream {
        data,
        mode,
        seed,
        epoch,
        batch_size,
        classes,
        order,
        pos: 0,
    })
}

impl EpochStream<'_> {
    /// Items in the epoch.
    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn batch_count(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }

    pub fn side(&self) -> usize {
        self.mode.side(self.data)
    }

    /// Item at `position` of the epoch.
    pub fn sample(&self, position: usize) -> Sample {
        let mut rng = keyed_rng(self.seed, self.epoch, position as u64, TAG_SAMPLE);
        let item = self.order[position];
        let (h, w) = (self.data.height(), self.data.width());
        match &self.mode {
            StreamMode::Mnist { augment: cfg } => Sample {
                image: augment(self.data.image(item), h, w, cfg, &mut rng),
                classes: vec![self.data.label(item)],
                aux: None,
            },
            StreamMode::Multimnist { per_digit } => {
                let base = item / per_digit;
                let class_a = self.data.label(base);
                let partner = loop {
                    let j = rng.random_range(0..self.data.len());
                    if self.data.label(j) != class_a {
                        break j;
                    }
                };
                let class_b = self.data.label(partner);
                let s = make_multimnist(self.data.image(base), class_a, self.data.image(partner), class_b, &mut rng)
                    .expect("distinct classes and digit extents were checked");
                Sample {
                    image: s.image,
                    classes: vec![class_a, class_b],
                    aux: Some(s.aux),
                }
            }
        }
    }
}

impl Iterator for EpochStream<'_> {
    type Item = Batch<f32>;

    fn next(&mut self) -> Option<Batch<f32>> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let samples: Vec<Sample> = (self.pos..end).map(|p| self.sample(p)).collect();
        self.pos = end;
        Some(Batch::from_samples(&samples, self.side(), self.classes).expect("samples were validated"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn digits(n: usize) -> Dataset {
        let images = Tensor::from_fn(&[n, 28, 28, 1], |i| ((i * 7919) % 255) as f32 / 255.0);
        Dataset::new(images, (0..n).map(|i| (i % 10) as u8).collect()).unwrap()
    }

    #[test]
    fn same_seed_same_batches() {
        let d = digits(20);
        let mode = StreamMode::Mnist {
            augment: AugmentConfig::default(),
        };
        let a: Vec<_> = epoch_stream(&d, mode.clone(), 10, 5, 0, 6, true).unwrap().collect();
        let b: Vec<_> = epoch_stream(&d, mode.clone(), 10, 5, 0, 6, true).unwrap().collect();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        assert_eq!(a[3].len(), 2);
        let c: Vec<_> = epoch_stream(&d, mode, 10, 5, 1, 6, true).unwrap().collect();
        assert_ne!(a, c);
    }

    #[test]
    fn unshuffled_identity_stream_reproduces_dataset() {
        let d = digits(5);
        let mode = StreamMode::Mnist {
            augment: AugmentConfig::identity(),
        };
        let b = epoch_stream(&d, mode, 10, 0, 0, 5, false).unwrap().next().unwrap();
        assert_eq!(b.images.data(), d.images().data());
        assert_eq!(b.labels, vec![vec![0], vec![1], vec![2], vec![3], vec![4]]);
    }

    #[test]
    fn multimnist_epoch_size_and_labels() {
        let d = digits(12);
        let s = epoch_stream(&d, StreamMode::Multimnist { per_digit: 10 }, 10, 3, 0, 16, true).unwrap();
        assert_eq!(s.len(), 120);
        assert_eq!(s.side(), 36);
        for b in s {
            assert_eq!(b.recon.len(), 2);
            for (row, labels) in b.labels.iter().enumerate() {
                assert_eq!(labels.len(), 2);
                assert_ne!(labels[0], labels[1]);
                let hot = &b.targets.data()[row * 10..(row + 1) * 10];
                assert_eq!(hot.iter().sum::<f32>(), 2.0);
            }
        }
    }

    #[test]
    fn invalid_streams_rejected() {
        let d = digits(3);
        let mode = StreamMode::Multimnist { per_digit: 1 };
        assert!(epoch_stream(&d, mode.clone(), 10, 0, 0, 0, true).is_err());
        assert!(epoch_stream(&d, mode.clone(), 2, 0, 0, 1, true).is_err());
        let single = d.select(&[0, 0]);
        assert!(epoch_stream(&single, mode, 10, 0, 0, 1, true).is_err());
    }
}
