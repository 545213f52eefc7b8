//! Gaussian class-cluster images for desk-scale runs.
//!
//! Each class has a fixed random prototype image; a sample is
//! `margin · prototype + noise` with unit Gaussian noise per pixel. Larger
//! margins separate the classes further.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{normalize_pair, Dataset, Split};
use crate::tensor::Tensor;
use crate::{Error, Real, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub classes: usize,
    /// `[C, H, W]`.
    pub shape: Vec<usize>,
    pub margin: Real,
}

impl SyntheticSpec {
    fn prototypes(&self) -> Vec<Vec<Real>> {
        let len: usize = self.shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.classes)
            .map(|_| {
                (0..len)
                    .map(|_| {
                        let v: f64 = StandardNormal.sample(&mut rng);
                        v as Real
                    })
                    .collect()
            })
            .collect()
    }

    /// `n` samples with balanced labels (counts differ by at most one).
    pub fn generate(&self, n: usize, stream: u64, split: Split) -> Result<Dataset> {
        if self.classes < 2 || n < self.classes {
            return Err(Error::usage(format!(
                "synthetic data needs at least 2 classes and n >= classes (n={n}, classes={})",
                self.classes
            )));
        }
        let protos = self.prototypes();
        let len: usize = self.shape.iter().product();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream + 1);
        let mut labels: Vec<usize> = (0..n).map(|i| i % self.classes).collect();
        labels.shuffle(&mut rng);
        let mut data = Vec::with_capacity(n * len);
        for &l in &labels {
            for &p in &protos[l] {
                let noise: f64 = StandardNormal.sample(&mut rng);
                data.push(self.margin * p + noise as Real);
            }
        }
        let mut shape = vec![n];
        shape.extend_from_slice(&self.shape);
        Dataset::new(Tensor::new(shape, data)?, labels, self.classes, split)
    }
}

/// One unnormalized split drawn from class prototypes seeded by `seed`.
pub fn synthetic_dataset(seed: u64, classes: usize, n: usize, shape: &[usize]) -> Result<Dataset> {
    SyntheticSpec {
        seed,
        classes,
        shape: shape.to_vec(),
        margin: 1.0,
    }
    .generate(n, 0, Split::Train)
}

/// Train and test splits sharing prototypes, standardized with train statistics.
pub fn synthetic_split(spec: &SyntheticSpec, n_train: usize, n_test: usize) -> Result<(Dataset, Dataset)> {
    let mut train = spec.generate(n_train, 0, Split::Train)?;
    let mut test = spec.generate(n_test, 1, Split::Test)?;
    normalize_pair(&mut train, &mut test)?;
    Ok((train, test))
}
