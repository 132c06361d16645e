//! Seeded isotropic Gaussian blobs small enough to train and query on a
//! laptop, plus an out-of-range box for OOD queries.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::backend::{BackendError, Dataset, Matrix};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeskConfig {
    pub classes: usize,
    pub dim: usize,
    pub train_per_class: usize,
    /// Held-out in-distribution rows per class.
    pub pool_per_class: usize,
    /// Distance between any two class means, in noise standard deviations.
    pub separation: f64,
    /// OOD box width relative to the training data range.
    pub ood_scale: f64,
    pub seed: u64,
}

impl Default for DeskConfig {
    fn default() -> Self {
        DeskConfig::ten_class()
    }
}

impl DeskConfig {
    pub fn two_class() -> Self {
        DeskConfig {
            classes: 2,
            dim: 2,
            train_per_class: 250,
            pool_per_class: 1000,
            separation: 6.0,
            ood_scale: 3.0,
            seed: 0,
        }
    }

    pub fn ten_class() -> Self {
        DeskConfig {
            classes: 10,
            dim: 50,
            train_per_class: 250,
            pool_per_class: 200,
            separation: 8.0,
            ood_scale: 3.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        let bad = |why: String| Err(BackendError::Shape(why));
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.dim < self.classes {
            return bad(format!("dim {} must be at least the class count {}", self.dim, self.classes));
        }
        if self.train_per_class == 0 || self.pool_per_class == 0 {
            return bad("empty class blocks".into());
        }
        if !(self.separation > 0.0 && self.ood_scale > 0.0) {
            return bad("separation and ood_scale must be positive".into());
        }
        Ok(())
    }
}

/// Training set, held-out pool, and OOD box of one generated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DeskData {
    pub train: Dataset,
    pub pool: Dataset,
    pub ood_lo: Vec<f64>,
    pub ood_hi: Vec<f64>,
}

impl DeskData {
    /// Class `c` has mean `separation / sqrt(2) * e_c`, so all pairs of
    /// means sit exactly `separation` apart; noise is unit normal.
    pub fn generate(config: &DeskConfig) -> Result<Self, BackendError> {
        config.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
        let offset = config.separation / std::f64::consts::SQRT_2;
        let mut blob = |per_class: usize| {
            let mut data = Vec::with_capacity(per_class * config.classes * config.dim);
            let mut labels = Vec::with_capacity(per_class * config.classes);
            for c in 0..config.classes {
                for _ in 0..per_class {
                    for j in 0..config.dim {
                        let noise: f64 = rng.sample(StandardNormal);
                        data.push(if j == c { offset + noise } else { noise });
                    }
                    labels.push(c);
                }
            }
            Dataset::new(Matrix::new(data, config.dim)?, labels, config.classes)
        };
        let train = blob(config.train_per_class)?;
        let pool = blob(config.pool_per_class)?;

        let mut lo = vec![f64::INFINITY; config.dim];
        let mut hi = vec![f64::NEG_INFINITY; config.dim];
        for row in train.features().iter_rows() {
            for (j, &v) in row.iter().enumerate() {
                lo[j] = lo[j].min(v);
                hi[j] = hi[j].max(v);
            }
        }
        let (ood_lo, ood_hi) = lo
            .iter()
            .zip(&hi)
            .map(|(&l, &h)| {
                let centre = 0.5 * (l + h);
                let half = 0.5 * (h - l) * config.ood_scale;
                (centre - half, centre + half)
            })
            .unzip();
        Ok(DeskData { train, pool, ood_lo, ood_hi })
    }

    /// Uniform draws from the OOD box.
    pub fn sample_ood<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Matrix {
        let mut data = Vec::with_capacity(n * self.ood_lo.len());
        for _ in 0..n {
            for (&l, &h) in self.ood_lo.iter().zip(&self.ood_hi) {
                data.push(rng.random_range(l..h));
            }
        }
        Matrix::new(data, self.ood_lo.len()).expect("box has positive width")
    }
}
