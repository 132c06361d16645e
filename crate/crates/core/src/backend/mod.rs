//! Prediction providers: a victim that answers queries and a teacher
//! ensemble whose vote histograms drive cost estimation.

mod centroid;
mod dataset;
mod table;

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::accountant::{pknn_histogram, AccountantError, MetricKind, ProbVector, VoteHistogram};

pub use centroid::CentroidModel;
pub use dataset::{partition, read_queries, Dataset, Matrix};
pub use table::TableBackend;

#[derive(Debug, Error, PartialEq)]
pub enum BackendError {
    #[error("line {line}: {reason}")]
    Parse { line: u64, reason: String },
    #[error("shape: {0}")]
    Shape(String),
    #[error("io: {0}")]
    Io(String),
    #[error("cannot split {n} rows among {n_teachers} teachers")]
    Partition { n: usize, n_teachers: usize },
    #[error("teacher partition is empty")]
    EmptyPartition,
    #[error("query width {got}, expected {expected}")]
    Width { expected: usize, got: usize },
    #[error("unknown query {0}")]
    UnknownQuery(String),
    #[error("backend does not support metric {0}")]
    Unsupported(MetricKind),
    #[error(transparent)]
    Accountant(#[from] AccountantError),
}

/// Everything the gateway needs from a model. Implementations must be pure
/// per query and safe to call from many threads.
pub trait Backend: Send + Sync {
    fn input_width(&self) -> usize;

    fn class_count(&self) -> usize;

    fn teacher_votes(&self, query: &[f64]) -> Result<VoteHistogram, BackendError>;

    fn victim_predict(&self, query: &[f64]) -> Result<ProbVector, BackendError>;

    fn pknn_votes(&self, query: &[f64], k: usize) -> Result<VoteHistogram, BackendError>;

    fn supports(&self, metric: MetricKind) -> bool;

    fn check_width(&self, query: &[f64]) -> Result<(), BackendError> {
        if query.len() == self.input_width() {
            Ok(())
        } else {
            Err(BackendError::Width {
                expected: self.input_width(),
                got: query.len(),
            })
        }
    }

    /// Whether the backend can answer `query` at all. Metrics that never
    /// look at the model (RDP) still call this, so an unanswerable query is
    /// refused at issuance instead of failing at release.
    fn check_query(&self, query: &[f64]) -> Result<(), BackendError> {
        self.check_width(query)
    }
}

impl<B: Backend + ?Sized> Backend for Arc<B> {
    fn input_width(&self) -> usize {
        (**self).input_width()
    }
    fn class_count(&self) -> usize {
        (**self).class_count()
    }
    fn teacher_votes(&self, query: &[f64]) -> Result<VoteHistogram, BackendError> {
        (**self).teacher_votes(query)
    }
    fn victim_predict(&self, query: &[f64]) -> Result<ProbVector, BackendError> {
        (**self).victim_predict(query)
    }
    fn pknn_votes(&self, query: &[f64], k: usize) -> Result<VoteHistogram, BackendError> {
        (**self).pknn_votes(query, k)
    }
    fn supports(&self, metric: MetricKind) -> bool {
        (**self).supports(metric)
    }
    fn check_query(&self, query: &[f64]) -> Result<(), BackendError> {
        (**self).check_query(query)
    }
}

/// Maps a raw query to the space pkNN neighbours are searched in.
pub type Embedder = Arc<dyn Fn(&[f64]) -> Vec<f64> + Send + Sync>;

/// Centroid victim trained on the whole dataset plus one centroid teacher
/// per disjoint partition.
#[derive(Clone)]
pub struct BackendBundle {
    train: Dataset,
    victim: CentroidModel,
    teachers: Vec<CentroidModel>,
    embedder: Option<Embedder>,
    train_embeddings: Matrix,
}

impl fmt::Debug for BackendBundle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BackendBundle")
            .field("rows", &self.train.len())
            .field("width", &self.train.width())
            .field("classes", &self.train.class_count())
            .field("teachers", &self.teachers.len())
            .field("embedder", &self.embedder.as_ref().map(|_| "custom"))
            .finish()
    }
}

impl BackendBundle {
    pub fn train(dataset: Dataset, n_teachers: usize, seed: u64) -> Result<Self, BackendError> {
        let all: Vec<usize> = (0..dataset.len()).collect();
        let victim = CentroidModel::train(&dataset, &all)?;
        let teachers = partition(dataset.len(), n_teachers, seed)?
            .iter()
            .map(|part| CentroidModel::train(&dataset, part))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(BackendBundle {
            train_embeddings: dataset.features().clone(),
            train: dataset,
            victim,
            teachers,
            embedder: None,
        })
    }

    /// Replaces the identity embedder used for pkNN.
    pub fn with_embedder(mut self, embedder: Embedder) -> Result<Self, BackendError> {
        let rows: Vec<Vec<f64>> = self.train.features().iter_rows().map(|r| embedder(r)).collect();
        self.train_embeddings = Matrix::from_rows(&rows)?;
        self.embedder = Some(embedder);
        Ok(self)
    }

    pub fn dataset(&self) -> &Dataset {
        &self.train
    }

    pub fn victim(&self) -> &CentroidModel {
        &self.victim
    }

    pub fn teachers(&self) -> &[CentroidModel] {
        &self.teachers
    }
}

impl Backend for BackendBundle {
    fn input_width(&self) -> usize {
        self.train.width()
    }

    fn class_count(&self) -> usize {
        self.train.class_count()
    }

    fn teacher_votes(&self, query: &[f64]) -> Result<VoteHistogram, BackendError> {
        self.check_width(query)?;
        let votes = self.teachers.iter().map(|t| t.nearest(query));
        Ok(VoteHistogram::from_votes(votes, self.class_count())?)
    }

    fn victim_predict(&self, query: &[f64]) -> Result<ProbVector, BackendError> {
        self.check_width(query)?;
        Ok(ProbVector::new(self.victim.probabilities(query))?)
    }

    fn pknn_votes(&self, query: &[f64], k: usize) -> Result<VoteHistogram, BackendError> {
        self.check_width(query)?;
        let hist = match &self.embedder {
            Some(embed) => pknn_histogram(
                &embed(query),
                self.train_embeddings.as_rows_ref(),
                self.train.labels(),
                self.class_count(),
                k,
            ),
            None => pknn_histogram(
                query,
                self.train_embeddings.as_rows_ref(),
                self.train.labels(),
                self.class_count(),
                k,
            ),
        };
        Ok(hist?)
    }

    fn supports(&self, _metric: MetricKind) -> bool {
        true
    }
}
