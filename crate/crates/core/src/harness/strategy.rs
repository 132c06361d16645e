use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::accountant::{squared_distance, ProbVector};

/// How a simulated user picks its next batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    /// Random held-out in-distribution queries: the legitimate user.
    Standard,
    /// Uniform draws from a box well outside the data range.
    OodRandom,
    /// Highest substitute entropy first.
    EntropyAl,
    /// Smallest substitute top-two margin first.
    GapAl,
    /// Lowest substitute entropy first, to keep the leakage cost down.
    EntropyRev,
    /// Cheapest queries under the gateway's own cost function.
    WorstCase,
    /// Mostly out-of-range batches with periodic in-distribution ones.
    InOut,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 7] = [
        StrategyKind::Standard,
        StrategyKind::OodRandom,
        StrategyKind::EntropyAl,
        StrategyKind::GapAl,
        StrategyKind::EntropyRev,
        StrategyKind::WorstCase,
        StrategyKind::InOut,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::Standard => "standard",
            StrategyKind::OodRandom => "ood_random",
            StrategyKind::EntropyAl => "entropy_al",
            StrategyKind::GapAl => "gap_al",
            StrategyKind::EntropyRev => "entropy_rev",
            StrategyKind::WorstCase => "worst_case",
            StrategyKind::InOut => "in_out",
        }
    }

    pub(super) fn uses_substitute(self) -> bool {
        matches!(
            self,
            StrategyKind::EntropyAl | StrategyKind::GapAl | StrategyKind::EntropyRev
        )
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StrategyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown strategy {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Strategy {
    pub kind: StrategyKind,
    /// Fraction of in-distribution batches for `in_out`.
    pub in_out_p: f64,
}

pub const DEFAULT_IN_OUT_P: f64 = 0.1;

impl Strategy {
    pub fn new(kind: StrategyKind) -> Self {
        Strategy {
            kind,
            in_out_p: DEFAULT_IN_OUT_P,
        }
    }

    pub fn with_in_out_p(mut self, p: f64) -> Self {
        self.in_out_p = p;
        self
    }

    /// Whether batch `b` of an `in_out` run is in-distribution. Spreads the
    /// fraction `p` evenly: with `p = 0.1` that is every 10th batch.
    pub fn in_out_is_ind(&self, b: usize) -> bool {
        ((b + 1) as f64 * self.in_out_p).floor() > (b as f64 * self.in_out_p).floor()
    }
}

impl From<StrategyKind> for Strategy {
    fn from(kind: StrategyKind) -> Self {
        Strategy::new(kind)
    }
}

/// Attacker-side model built only from answers already received: per-class
/// centroids of answered queries weighted by the returned probabilities.
#[derive(Debug, Clone)]
pub(super) struct Substitute {
    sums: Vec<Vec<f64>>,
    weights: Vec<f64>,
}

impl Substitute {
    pub fn new(classes: usize, width: usize) -> Self {
        Substitute {
            sums: vec![vec![0.0; width]; classes],
            weights: vec![0.0; classes],
        }
    }

    pub fn observe(&mut self, query: &[f64], probs: &[f64]) {
        for (c, &p) in probs.iter().enumerate() {
            if p > 0.0 {
                self.weights[c] += p;
                for (s, &v) in self.sums[c].iter_mut().zip(query) {
                    *s += p * v;
                }
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        self.weights.iter().all(|&w| w == 0.0)
    }

    /// Softmax over negative distances to the observed class centroids.
    pub fn probs(&self, query: &[f64]) -> ProbVector {
        let mut logits = vec![f64::NEG_INFINITY; self.weights.len()];
        let mut centroid = vec![0.0; query.len()];
        for (c, &w) in self.weights.iter().enumerate() {
            if w > 0.0 {
                for (m, &s) in centroid.iter_mut().zip(&self.sums[c]) {
                    *m = s / w;
                }
                logits[c] = -squared_distance(query, &centroid).sqrt();
            }
        }
        let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut p: Vec<f64> = logits.iter().map(|&l| (l - top).exp()).collect();
        let total: f64 = p.iter().sum();
        p.iter_mut().for_each(|x| *x /= total);
        ProbVector::new(p).expect("softmax is normalized")
    }
}
