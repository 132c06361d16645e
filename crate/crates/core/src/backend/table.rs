use std::collections::HashMap;
use std::io;
use std::path::Path;

use super::{Backend, BackendError};
use crate::accountant::{MetricKind, ProbVector, VoteHistogram};

/// Replays fixed histograms keyed by query id. A query is the one-element
/// vector `[query_id]`; the victim answers with the normalized histogram.
#[derive(Debug, Clone, PartialEq)]
pub struct TableBackend {
    rows: HashMap<u64, VoteHistogram>,
    classes: usize,
}

impl TableBackend {
    pub fn new(rows: impl IntoIterator<Item = (u64, VoteHistogram)>) -> Result<Self, BackendError> {
        let mut map = HashMap::new();
        let mut classes = None;
        for (id, hist) in rows {
            if *classes.get_or_insert(hist.classes()) != hist.classes() {
                return Err(BackendError::Shape(format!(
                    "query {id} has {} classes, expected {}",
                    hist.classes(),
                    classes.unwrap_or_default()
                )));
            }
            if map.insert(id, hist).is_some() {
                return Err(BackendError::Shape(format!("duplicate query id {id}")));
            }
        }
        let classes = classes.ok_or_else(|| BackendError::Shape("empty table".into()))?;
        Ok(TableBackend { rows: map, classes })
    }

    /// Reads `query_id,count_0,...,count_{C-1}` rows after a header.
    pub fn read_csv<R: io::Read>(reader: R) -> Result<Self, BackendError> {
        let mut r = csv::Reader::from_reader(reader);
        let width = r
            .headers()
            .map_err(|e| BackendError::Parse { line: 1, reason: e.to_string() })?
            .len();
        let mut rows = Vec::new();
        for record in r.records() {
            let record = record.map_err(|e| BackendError::Parse {
                line: e.position().map_or(0, |p| p.line()),
                reason: e.to_string(),
            })?;
            let line = record.position().map_or(0, |p| p.line());
            let fail = |reason: String| BackendError::Parse { line, reason };
            if record.len() != width {
                return Err(fail(format!("{} fields, expected {width}", record.len())));
            }
            let id: u64 = record[0].trim().parse().map_err(|_| fail(format!("bad query id {:?}", &record[0])))?;
            let counts = record
                .iter()
                .skip(1)
                .map(|c| c.trim().parse::<u32>().map_err(|_| fail(format!("bad count {c:?}"))))
                .collect::<Result<Vec<_>, _>>()?;
            rows.push((id, VoteHistogram::new(counts).map_err(|e| fail(e.to_string()))?));
        }
        TableBackend::new(rows)
    }

    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let file = std::fs::File::open(path).map_err(|e| BackendError::Io(format!("{}: {e}", path.display())))?;
        Self::read_csv(file)
    }

    fn lookup(&self, query: &[f64]) -> Result<&VoteHistogram, BackendError> {
        self.check_width(query)?;
        let raw = query[0];
        let unknown = || BackendError::UnknownQuery(raw.to_string());
        if !(raw >= 0.0 && raw.fract() == 0.0 && raw <= 9_007_199_254_740_992.0) {
            return Err(unknown());
        }
        self.rows.get(&(raw as u64)).ok_or_else(unknown)
    }
}

impl Backend for TableBackend {
    fn input_width(&self) -> usize {
        1
    }

    fn class_count(&self) -> usize {
        self.classes
    }

    fn teacher_votes(&self, query: &[f64]) -> Result<VoteHistogram, BackendError> {
        self.lookup(query).cloned()
    }

    fn victim_predict(&self, query: &[f64]) -> Result<ProbVector, BackendError> {
        let hist = self.lookup(query)?;
        let n = f64::from(hist.n_teachers());
        Ok(ProbVector::new(hist.counts().iter().map(|&c| f64::from(c) / n).collect())?)
    }

    fn pknn_votes(&self, _query: &[f64], _k: usize) -> Result<VoteHistogram, BackendError> {
        Err(BackendError::Unsupported(MetricKind::PknnQ))
    }

    fn supports(&self, metric: MetricKind) -> bool {
        metric != MetricKind::PknnQ
    }

    fn check_query(&self, query: &[f64]) -> Result<(), BackendError> {
        self.lookup(query).map(|_| ())
    }
}
