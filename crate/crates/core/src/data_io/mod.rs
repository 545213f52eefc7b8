//! Dataset ingestion and checkpoint persistence.

mod checkpoint;
mod cifar;
mod synthetic;

pub use checkpoint::{
    config_fingerprint, load_checkpoint, save_checkpoint, Checkpoint, StoredTensor, TensorData,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use cifar::{load_cifar10, parse_cifar_records, CIFAR_RECORD_LEN};
pub use synthetic::{synthetic_dataset, synthetic_split, SyntheticSpec};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;
use crate::{Error, Real, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Labelled images `[N × C × H × W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    images: Tensor,
    labels: Vec<usize>,
    num_classes: usize,
    split: Split,
}

/// Per-channel mean and standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<Real>,
    pub std: Vec<Real>,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::dim(format!(
                "images must be [N, C, H, W], got {:?}",
                images.shape()
            )));
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::dim(format!(
                "{} images but {} labels",
                images.shape()[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Input(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn images(&self) -> &Tensor {
        &self.images
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn split(&self) -> Split {
        self.split
    }

    /// `[C, H, W]` of one sample.
    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    /// Images and labels at `indices`.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let images = self.images.gather_rows(indices)?;
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((images, labels))
    }

    /// The first `n` samples.
    pub fn take(&self, n: usize) -> Result<Self> {
        let n = n.min(self.len());
        let idx: Vec<usize> = (0..n).collect();
        let (images, labels) = self.batch(&idx)?;
        Dataset::new(images, labels, self.num_classes, self.split)
    }

    /// A seeded random subset of `n` samples, in shuffled order.
    pub fn subset(&self, n: usize, seed: u64) -> Result<Self> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        idx.truncate(n.min(self.len()));
        let (images, labels) = self.batch(&idx)?;
        Dataset::new(images, labels, self.num_classes, self.split)
    }

    pub fn channel_stats(&self) -> ChannelStats {
        let s = self.images.shape();
        let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
        let d = self.images.data();
        let count = (n * plane) as Real;
        let mut mean = vec![0.0; c];
        let mut sq = vec![0.0; c];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * plane;
                mean[ch] += d[off..off + plane].iter().sum::<Real>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count);
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * plane;
                sq[ch] += d[off..off + plane]
                    .iter()
                    .map(|v| (v - mean[ch]) * (v - mean[ch]))
                    .sum::<Real>();
            }
        }
        let std = sq.iter().map(|v| (v / count).sqrt().max(1e-12)).collect();
        ChannelStats { mean, std }
    }

    /// Standardizes every channel with `stats` (computed on the train split).
    pub fn normalize(&mut self, stats: &ChannelStats) -> Result<()> {
        let s = self.images.shape().to_vec();
        let (c, plane) = (s[1], s[2] * s[3]);
        if stats.mean.len() != c || stats.std.len() != c {
            return Err(Error::dim(format!(
                "statistics for {} channels applied to {c} channels",
                stats.mean.len()
            )));
        }
        for (i, v) in self.images.data_mut().iter_mut().enumerate() {
            let ch = (i / plane) % c;
            *v = (*v - stats.mean[ch]) / stats.std[ch];
        }
        Ok(())
    }

    /// Random 4-pixel-padded crop and horizontal flip of a batch, per sample.
    pub fn augment(images: &Tensor, rng: &mut impl rand::Rng) -> Tensor {
        const PAD: isize = 4;
        let s = images.shape();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let src = images.data();
        let mut out = vec![0.0; src.len()];
        for b in 0..n {
            let dy = rng.gen_range(-PAD..=PAD);
            let dx = rng.gen_range(-PAD..=PAD);
            let flip = rng.gen_bool(0.5);
            for ch in 0..c {
                let base = (b * c + ch) * h * w;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for x in 0..w {
                        let xx = if flip { w - 1 - x } else { x };
                        let sx = xx as isize + dx;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        out[base + y * w + x] = src[base + sy as usize * w + sx as usize];
                    }
                }
            }
        }
        Tensor::new(s.to_vec(), out).expect("same shape")
    }
}

/// Normalizes a train/test pair with statistics taken from the train split.
pub fn normalize_pair(train: &mut Dataset, test: &mut Dataset) -> Result<ChannelStats> {
    let stats = train.channel_stats();
    train.normalize(&stats)?;
    test.normalize(&stats)?;
    Ok(stats)
}
