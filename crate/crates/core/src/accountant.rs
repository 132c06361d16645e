//! Per-query information-leakage costs.
//!
//! All metrics follow the same direction: higher means the answer reveals
//! more about the protected model. The consensus cost `q` is the default
//! calibration signal; the Gaussian RDP value is data independent and acts
//! as a per-query upper bound.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AccountantError {
    #[error("vote histogram needs at least two classes, got {0}")]
    TooFewClasses(usize),
    #[error("vote histogram is empty (no teacher voted)")]
    NoVotes,
    #[error("probabilities must lie in [0, 1] and sum to 1: {0}")]
    InvalidProbabilities(String),
    #[error("invalid accountant configuration: {0}")]
    InvalidConfig(String),
    #[error("k = {k} exceeds the {rows} available training rows")]
    TooFewNeighbours { k: usize, rows: usize },
    #[error("embedding width mismatch: query has {query}, training rows have {train}")]
    WidthMismatch { query: usize, train: usize },
    #[error("label {label} outside [0, {classes})")]
    LabelOutOfRange { label: usize, classes: usize },
}

/// Teacher vote counts, one entry per class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoteHistogram {
    counts: Vec<u32>,
    n_teachers: u32,
}

impl VoteHistogram {
    pub fn new(counts: Vec<u32>) -> Result<Self, AccountantError> {
        if counts.len() < 2 {
            return Err(AccountantError::TooFewClasses(counts.len()));
        }
        let n_teachers: u32 = counts.iter().sum();
        if n_teachers == 0 {
            return Err(AccountantError::NoVotes);
        }
        Ok(VoteHistogram { counts, n_teachers })
    }

    /// Histogram of `votes`, each a class index below `classes`.
    pub fn from_votes(
        votes: impl IntoIterator<Item = usize>,
        classes: usize,
    ) -> Result<Self, AccountantError> {
        let mut counts = vec![0u32; classes];
        for v in votes {
            *counts
                .get_mut(v)
                .ok_or(AccountantError::LabelOutOfRange { label: v, classes })? += 1;
        }
        Self::new(counts)
    }

    pub fn counts(&self) -> &[u32] {
        &self.counts
    }

    pub fn n_teachers(&self) -> u32 {
        self.n_teachers
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    /// Plurality class; ties go to the smallest index.
    pub fn argmax(&self) -> usize {
        argmax_first(self.counts.iter().copied())
    }

    pub fn max_count(&self) -> u32 {
        self.counts[self.argmax()]
    }
}

/// Index of the maximum; the first one wins ties.
pub(crate) fn argmax_first<T: PartialOrd>(values: impl IntoIterator<Item = T>) -> usize {
    let mut best: Option<(usize, T)> = None;
    for (i, v) in values.into_iter().enumerate() {
        match &best {
            Some((_, b)) if !(v > *b) => {}
            _ => best = Some((i, v)),
        }
    }
    best.map_or(0, |(i, _)| i)
}

/// A categorical distribution over classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub const SUM_TOLERANCE: f64 = 1e-6;

    pub fn new(probs: Vec<f64>) -> Result<Self, AccountantError> {
        if probs.is_empty() {
            return Err(AccountantError::InvalidProbabilities("empty".into()));
        }
        if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(AccountantError::InvalidProbabilities(format!(
                "entry {p} outside [0, 1]"
            )));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > Self::SUM_TOLERANCE {
            return Err(AccountantError::InvalidProbabilities(format!("sum is {sum}")));
        }
        Ok(ProbVector(probs))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn argmax(&self) -> usize {
        argmax_first(self.0.iter().copied())
    }
}

/// Rényi DP cost at a fixed order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RdpCost {
    pub order: f64,
    pub epsilon: f64,
}

/// Which per-query cost drives calibration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    #[default]
    PateQ,
    Rdp,
    Entropy,
    Gap,
    PknnQ,
}

impl MetricKind {
    pub const ALL: [MetricKind; 5] = [
        MetricKind::PateQ,
        MetricKind::Rdp,
        MetricKind::Entropy,
        MetricKind::Gap,
        MetricKind::PknnQ,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MetricKind::PateQ => "pate_q",
            MetricKind::Rdp => "rdp",
            MetricKind::Entropy => "entropy",
            MetricKind::Gap => "gap",
            MetricKind::PknnQ => "pknn_q",
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MetricKind {
    type Err = AccountantError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MetricKind::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| AccountantError::InvalidConfig(format!("unknown metric kind {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AccountantConfig {
    /// Aggregation noise of the consensus cost.
    pub sigma: f64,
    /// Noise of the noisy-argmax release.
    pub sigma_g: f64,
    /// RDP order.
    pub lambda: f64,
    /// Squared l2 sensitivity of the vote histogram.
    pub delta2_sq: f64,
    pub metric_kind: MetricKind,
    /// Neighbours consulted by the pkNN metric.
    pub pknn_k: usize,
}

impl Default for AccountantConfig {
    fn default() -> Self {
        AccountantConfig {
            sigma: 10.0,
            sigma_g: 10.0,
            lambda: 2.0,
            delta2_sq: 2.0,
            metric_kind: MetricKind::PateQ,
            pknn_k: 50,
        }
    }
}

impl AccountantConfig {
    pub fn validate(&self) -> Result<(), AccountantError> {
        let bad = |what: String| Err(AccountantError::InvalidConfig(what));
        if !(self.sigma > 0.0) {
            return bad(format!("sigma must be positive, got {}", self.sigma));
        }
        if !(self.sigma_g >= 0.0) {
            return bad(format!("sigma_g must be non-negative, got {}", self.sigma_g));
        }
        if !(self.lambda > 1.0) {
            return bad(format!("lambda must exceed 1, got {}", self.lambda));
        }
        if !(self.delta2_sq > 0.0) {
            return bad(format!("delta2_sq must be positive, got {}", self.delta2_sq));
        }
        if self.metric_kind == MetricKind::PknnQ && self.pknn_k == 0 {
            return bad("pknn_k must be at least 1".into());
        }
        Ok(())
    }
}

/// Probability that noisy aggregation flips the plurality vote:
/// `q = 1/2 * sum_{i != i*} erfc((n_{i*} - n_i) / (2 sigma))`.
///
/// Panics if `sigma` is not positive.
pub fn consensus_cost(hist: &VoteHistogram, sigma: f64) -> f64 {
    assert!(sigma > 0.0, "sigma must be positive");
    let top = hist.argmax();
    let n_top = f64::from(hist.counts[top]);
    let tail: f64 = hist
        .counts
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != top)
        .map(|(_, &n)| libm::erfc((n_top - f64::from(n)) / (2.0 * sigma)))
        .sum();
    0.5 * tail
}

/// Gaussian mechanism: `eps(lambda) = lambda * delta2^2 / (2 sigma^2)`.
pub fn gaussian_rdp(lambda: f64, delta2_sq: f64, sigma: f64) -> RdpCost {
    RdpCost {
        order: lambda,
        epsilon: lambda * delta2_sq / (2.0 * sigma * sigma),
    }
}

pub fn gaussian_rdp_for(config: &AccountantConfig) -> RdpCost {
    gaussian_rdp(config.lambda, config.delta2_sq, config.sigma)
}

/// Additive composition of per-query costs (compensated summation, so the
/// total does not depend on order beyond the last ulp).
pub fn compose(costs: &[f64]) -> f64 {
    costs.iter().fold(CostSum::default(), |acc, &c| acc.add(c)).total()
}

/// Neumaier running sum.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CostSum {
    sum: f64,
    compensation: f64,
}

impl CostSum {
    #[must_use]
    pub fn add(mut self, x: f64) -> Self {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.compensation += (self.sum - t) + x;
        } else {
            self.compensation += (x - t) + self.sum;
        }
        self.sum = t;
        self
    }

    pub fn total(&self) -> f64 {
        self.sum + self.compensation
    }
}

/// Shannon entropy in nats, with `0 log 0 = 0`.
pub fn entropy_cost(p: &ProbVector) -> f64 {
    let h: f64 = p.0.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum();
    h.max(0.0)
}

/// Difference between the two largest probabilities.
pub fn raw_gap(p: &ProbVector) -> f64 {
    let (mut first, mut second) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &x in &p.0 {
        if x > first {
            second = first;
            first = x;
        } else if x > second {
            second = x;
        }
    }
    if second == f64::NEG_INFINITY {
        return first;
    }
    first - second
}

/// `1 - gap`, so that low-confidence answers score high.
pub fn gap_cost(p: &ProbVector) -> f64 {
    (1.0 - raw_gap(p)).clamp(0.0, 1.0)
}

/// `argmax_i { n_i + N(0, sigma_g^2) }`; ties (including all of them when
/// `sigma_g = 0`) go to the smallest index.
pub fn noisy_argmax<R: Rng + ?Sized>(hist: &VoteHistogram, sigma_g: f64, rng: &mut R) -> usize {
    if sigma_g == 0.0 {
        return hist.argmax();
    }
    let noise = Normal::new(0.0, sigma_g).expect("sigma_g must be finite and non-negative");
    argmax_first(
        hist.counts
            .iter()
            .map(|&n| f64::from(n) + noise.sample(rng)),
    )
}

/// Row-major matrix view used for embeddings.
#[derive(Debug, Clone, Copy)]
pub struct RowsRef<'a> {
    pub data: &'a [f64],
    pub width: usize,
}

impl<'a> RowsRef<'a> {
    pub fn len(&self) -> usize {
        if self.width == 0 {
            0
        } else {
            self.data.len() / self.width
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, i: usize) -> &'a [f64] {
        &self.data[i * self.width..(i + 1) * self.width]
    }
}

pub(crate) fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Votes of the `k` training rows nearest to `query` (Euclidean; equal
/// distances go to the lower row index), each voting its own label.
pub fn pknn_histogram(
    query: &[f64],
    train: RowsRef<'_>,
    labels: &[usize],
    classes: usize,
    k: usize,
) -> Result<VoteHistogram, AccountantError> {
    let rows = train.len();
    if k == 0 || k > rows {
        return Err(AccountantError::TooFewNeighbours { k, rows });
    }
    if query.len() != train.width {
        return Err(AccountantError::WidthMismatch {
            query: query.len(),
            train: train.width,
        });
    }
    let mut order: Vec<(f64, usize)> = (0..rows)
        .map(|i| (squared_distance(query, train.row(i)), i))
        .collect();
    let by_distance = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < rows {
        order.select_nth_unstable_by(k - 1, by_distance);
    }
    VoteHistogram::from_votes(order[..k].iter().map(|&(_, i)| labels[i]), classes)
}
