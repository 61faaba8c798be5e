//! Synthetic Gaussian-cluster classification data.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Batch;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSpec {
    #[serde(default = "DataSpec::default_n")]
    pub n: usize,
    #[serde(default = "DataSpec::default_dim")]
    pub dim: usize,
    #[serde(default = "DataSpec::default_classes")]
    pub classes: usize,
    /// Distance of each class centre from the origin.
    #[serde(default = "DataSpec::default_separation")]
    pub separation: f32,
    /// Standard deviation of the isotropic noise around each centre.
    #[serde(default = "DataSpec::default_noise")]
    pub noise: f32,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self {
            n: Self::default_n(),
            dim: Self::default_dim(),
            classes: Self::default_classes(),
            separation: Self::default_separation(),
            noise: Self::default_noise(),
        }
    }
}

impl DataSpec {
    fn default_n() -> usize {
        4000
    }
    fn default_dim() -> usize {
        16
    }
    fn default_classes() -> usize {
        4
    }
    fn default_separation() -> f32 {
        3.0
    }
    fn default_noise() -> f32 {
        1.0
    }

    pub fn new(n: usize, dim: usize, classes: usize) -> Self {
        Self {
            n,
            dim,
            classes,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config("data.classes", "need at least 2 classes"));
        }
        if self.dim == 0 {
            return Err(Error::config("data.dim", "must be positive"));
        }
        if self.n < self.classes {
            return Err(Error::config("data.n", "must be at least the number of classes"));
        }
        if !(self.separation.is_finite() && self.separation >= 0.0) {
            return Err(Error::config("data.separation", "must be finite and non-negative"));
        }
        if !(self.noise.is_finite() && self.noise >= 0.0) {
            return Err(Error::config("data.noise", "must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Generates `n` rows of labelled Gaussian clusters and splits them 80/20
/// into train and test. Classes are balanced before shuffling.
pub fn gen_synthetic(seed: u64, spec: &DataSpec) -> Result<(Batch, Batch)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centres: Vec<Vec<f32>> = (0..spec.classes)
        .map(|_| {
            let dir: Vec<f32> = (0..spec.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f32>().sqrt().max(f32::MIN_POSITIVE);
            dir.into_iter().map(|v| v / norm * spec.separation).collect()
        })
        .collect();

    let mut order: Vec<usize> = (0..spec.n).collect();
    order.shuffle(&mut rng);

    let mut inputs = Vec::with_capacity(spec.n * spec.dim);
    let mut labels = Vec::with_capacity(spec.n);
    for &i in &order {
        let class = i % spec.classes;
        for &c in &centres[class] {
            let e: f32 = StandardNormal.sample(&mut rng);
            inputs.push(c + spec.noise * e);
        }
        labels.push(class);
    }

    let n_train = spec.n * 4 / 5;
    let test_inputs = inputs.split_off(n_train * spec.dim);
    let test_labels = labels.split_off(n_train);
    Ok((
        Batch::new(inputs, labels, spec.dim)?,
        Batch::new(test_inputs, test_labels, spec.dim)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_for_fixed_seed() {
        let spec = DataSpec::new(100, 5, 3);
        let a = gen_synthetic(42, &spec).unwrap();
        let b = gen_synthetic(42, &spec).unwrap();
        assert_eq!(a, b);
        let bits = |x: &Batch| x.inputs().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.0), bits(&b.0));
        assert_ne!(a, gen_synthetic(43, &spec).unwrap());
    }

    #[test]
    fn split_is_80_20() {
        let (train, test) = gen_synthetic(1, &DataSpec::new(10, 2, 2)).unwrap();
        assert_eq!(train.len(), 8);
        assert_eq!(test.len(), 2);
    }

    #[test]
    fn too_few_classes_rejected() {
        assert!(gen_synthetic(1, &DataSpec::new(10, 2, 1)).is_err());
        assert!(gen_synthetic(1, &DataSpec::new(2, 2, 3)).is_err());
    }

    #[test]
    fn labels_balanced() {
        let (train, test) = gen_synthetic(3, &DataSpec::new(400, 4, 4)).unwrap();
        let mut counts = [0usize; 4];
        for &l in train.labels().iter().chain(test.labels()) {
            counts[l] += 1;
        }
        assert_eq!(counts, [100; 4]);
    }
}
