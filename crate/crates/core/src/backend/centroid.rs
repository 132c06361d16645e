use super::{BackendError, Dataset, Matrix};
use crate::accountant::squared_distance;

/// Per-class means of a subset of training rows.
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidModel {
    centroids: Matrix,
    class_present: Vec<bool>,
}

impl CentroidModel {
    pub fn train(dataset: &Dataset, indices: &[usize]) -> Result<Self, BackendError> {
        if indices.is_empty() {
            return Err(BackendError::EmptyPartition);
        }
        let classes = dataset.class_count();
        let mut centroids = Matrix::zeros(classes, dataset.width());
        let mut counts = vec![0usize; classes];
        for &i in indices {
            let label = dataset.labels()[i];
            counts[label] += 1;
            for (acc, v) in centroids.row_mut(label).iter_mut().zip(dataset.features().row(i)) {
                *acc += v;
            }
        }
        for (c, &n) in counts.iter().enumerate() {
            if n > 0 {
                centroids.row_mut(c).iter_mut().for_each(|v| *v /= n as f64);
            }
        }
        Ok(CentroidModel {
            centroids,
            class_present: counts.iter().map(|&n| n > 0).collect(),
        })
    }

    pub fn centroids(&self) -> &Matrix {
        &self.centroids
    }

    pub fn class_present(&self) -> &[bool] {
        &self.class_present
    }

    fn present_distances<'a>(&'a self, query: &'a [f64]) -> impl Iterator<Item = (usize, f64)> + 'a {
        self.class_present
            .iter()
            .enumerate()
            .filter(|(_, &p)| p)
            .map(move |(c, _)| (c, squared_distance(query, self.centroids.row(c))))
    }

    /// Nearest present centroid; equal distances go to the lower class.
    pub fn nearest(&self, query: &[f64]) -> usize {
        let mut best = (usize::MAX, f64::INFINITY);
        for (c, d) in self.present_distances(query) {
            if best.0 == usize::MAX || d < best.1 {
                best = (c, d);
            }
        }
        best.0
    }

    /// Softmax over negative Euclidean distances; absent classes get zero.
    pub fn probabilities(&self, query: &[f64]) -> Vec<f64> {
        let mut logits = vec![f64::NEG_INFINITY; self.class_present.len()];
        for (c, d) in self.present_distances(query) {
            logits[c] = -d.sqrt();
        }
        let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut probs: Vec<f64> = logits.iter().map(|&l| (l - top).exp()).collect();
        let total: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= total);
        probs
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dataset(rows: &[(f64, usize)], classes: usize) -> Dataset {
        let features = Matrix::new(rows.iter().map(|r| r.0).collect(), 1).unwrap();
        Dataset::new(features, rows.iter().map(|r| r.1).collect(), classes).unwrap()
    }

    #[test]
    fn centroids_are_means() {
        let d = dataset(&[(-1.0, 0), (-1.0, 0), (1.0, 1), (1.0, 1)], 2);
        let m = CentroidModel::train(&d, &[0, 1, 2, 3]).unwrap();
        assert_eq!(m.centroids().row(0), &[-1.0]);
        assert_eq!(m.centroids().row(1), &[1.0]);
        assert_eq!(m.class_present(), &[true, true]);
    }

    #[test]
    fn missing_class_never_voted() {
        let d = dataset(&[(0.0, 0), (5.0, 1), (10.0, 2)], 3);
        let m = CentroidModel::train(&d, &[0, 1]).unwrap();
        assert_eq!(m.class_present(), &[true, true, false]);
        assert_eq!(m.nearest(&[10.0]), 1);
        assert_eq!(m.probabilities(&[10.0])[2], 0.0);
    }

    #[test]
    fn single_row() {
        let d = dataset(&[(3.5, 1), (0.0, 0)], 2);
        let m = CentroidModel::train(&d, &[0]).unwrap();
        assert_eq!(m.class_present(), &[false, true]);
        assert_eq!(m.centroids().row(1), &[3.5]);
        assert_eq!(m.nearest(&[-100.0]), 1);
        assert_eq!(CentroidModel::train(&d, &[]), Err(BackendError::EmptyPartition));
    }

    #[test]
    fn tie_goes_to_lower_class() {
        let d = dataset(&[(-1.0, 0), (1.0, 1)], 2);
        let m = CentroidModel::train(&d, &[0, 1]).unwrap();
        assert_eq!(m.nearest(&[0.0]), 0);
        let p = m.probabilities(&[0.0]);
        assert_eq!(p, vec![0.5, 0.5]);
    }
}
