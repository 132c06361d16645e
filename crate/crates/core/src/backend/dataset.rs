use std::io;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::BackendError;
use crate::accountant::RowsRef;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Matrix {
    data: Vec<f64>,
    cols: usize,
}

impl Matrix {
    pub fn new(data: Vec<f64>, cols: usize) -> Result<Self, BackendError> {
        if cols == 0 || data.len() % cols != 0 {
            return Err(BackendError::Shape(format!(
                "{} values do not fill rows of width {cols}",
                data.len()
            )));
        }
        Ok(Matrix { data, cols })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self, BackendError> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.as_ref().len() != cols {
                return Err(BackendError::Shape(format!(
                    "row {i} has width {}, expected {cols}",
                    r.as_ref().len()
                )));
            }
            data.extend_from_slice(r.as_ref());
        }
        Matrix::new(data, cols)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            data: vec![0.0; rows * cols],
            cols,
        }
    }

    pub fn rows(&self) -> usize {
        if self.cols == 0 {
            0
        } else {
            self.data.len() / self.cols
        }
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.cols.max(1))
    }

    pub fn as_rows_ref(&self) -> RowsRef<'_> {
        RowsRef {
            data: &self.data,
            width: self.cols,
        }
    }

    pub fn select(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            data,
            cols: self.cols,
        }
    }
}

/// Labelled feature rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    features: Matrix,
    labels: Vec<usize>,
    class_count: usize,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>, class_count: usize) -> Result<Self, BackendError> {
        if features.rows() != labels.len() {
            return Err(BackendError::Shape(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if class_count < 2 {
            return Err(BackendError::Shape(format!("need at least 2 classes, got {class_count}")));
        }
        if labels.len() < class_count {
            return Err(BackendError::Shape(format!(
                "{} rows cannot cover {class_count} classes",
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= class_count) {
            return Err(BackendError::Shape(format!("label {l} outside [0, {class_count})")));
        }
        if features.data.iter().any(|v| !v.is_finite()) {
            return Err(BackendError::Shape("non-finite feature".into()));
        }
        Ok(Dataset {
            features,
            labels,
            class_count,
        })
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn width(&self) -> usize {
        self.features.cols()
    }

    /// Parses `x_0,...,x_{D-1},label` rows after a header. Without an explicit
    /// `class_count` the count is one past the largest label.
    pub fn read_csv<R: io::Read>(reader: R, class_count: Option<usize>) -> Result<Self, BackendError> {
        let mut r = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
        let header_width = r
            .headers()
            .map_err(|e| BackendError::Parse { line: 1, reason: e.to_string() })?
            .len();
        if header_width < 2 {
            return Err(BackendError::Parse {
                line: 1,
                reason: "header needs at least one feature column and a label".into(),
            });
        }
        let width = header_width - 1;
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for record in r.records() {
            let record = record.map_err(|e| BackendError::Parse {
                line: e.position().map_or(0, |p| p.line()),
                reason: e.to_string(),
            })?;
            let line = record.position().map_or(0, |p| p.line());
            let fail = |reason: String| BackendError::Parse { line, reason };
            if record.len() != header_width {
                return Err(fail(format!("{} fields, expected {header_width}", record.len())));
            }
            for cell in record.iter().take(width) {
                let v: f64 = cell.trim().parse().map_err(|_| fail(format!("non-numeric cell {cell:?}")))?;
                if !v.is_finite() {
                    return Err(fail(format!("non-finite cell {cell:?}")));
                }
                data.push(v);
            }
            let cell = &record[width];
            let label: usize = cell.trim().parse().map_err(|_| fail(format!("bad label {cell:?}")))?;
            if let Some(c) = class_count {
                if label >= c {
                    return Err(fail(format!("label {label} outside [0, {c})")));
                }
            }
            labels.push(label);
        }
        if labels.is_empty() {
            return Err(BackendError::Parse { line: 1, reason: "no data rows".into() });
        }
        let classes = class_count.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
        Dataset::new(Matrix::new(data, width)?, labels, classes)
    }

    pub fn write_csv<W: io::Write>(&self, writer: W) -> Result<(), BackendError> {
        let err = |e: csv::Error| BackendError::Io(e.to_string());
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = (0..self.width()).map(|j| format!("x{j}")).collect();
        header.push("label".into());
        w.write_record(&header).map_err(err)?;
        let mut buf: Vec<String> = Vec::with_capacity(self.width() + 1);
        for (row, &label) in self.features.iter_rows().zip(&self.labels) {
            buf.clear();
            buf.extend(row.iter().map(|v| v.to_string()));
            buf.push(label.to_string());
            w.write_record(&buf).map_err(err)?;
        }
        w.flush().map_err(|e| BackendError::Io(e.to_string()))
    }

    pub fn load(path: &Path, class_count: Option<usize>) -> Result<Self, BackendError> {
        let file = std::fs::File::open(path).map_err(|e| BackendError::Io(format!("{}: {e}", path.display())))?;
        Self::read_csv(file, class_count)
    }

    pub fn save(&self, path: &Path) -> Result<(), BackendError> {
        let file =
            std::fs::File::create(path).map_err(|e| BackendError::Io(format!("{}: {e}", path.display())))?;
        self.write_csv(io::BufWriter::new(file))
    }
}

/// Reads query rows (features only, header required).
pub fn read_queries<R: io::Read>(reader: R) -> Result<Matrix, BackendError> {
    let mut r = csv::Reader::from_reader(reader);
    let width = r
        .headers()
        .map_err(|e| BackendError::Parse { line: 1, reason: e.to_string() })?
        .len();
    let mut data = Vec::new();
    for record in r.records() {
        let record = record.map_err(|e| BackendError::Parse {
            line: e.position().map_or(0, |p| p.line()),
            reason: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        for cell in record.iter() {
            let v: f64 = cell.trim().parse().map_err(|_| BackendError::Parse {
                line,
                reason: format!("non-numeric cell {cell:?}"),
            })?;
            data.push(v);
        }
    }
    Matrix::new(data, width)
}

/// Seeded random split of `0..n` into `n_teachers` disjoint, covering chunks.
/// The first `n % n_teachers` chunks get one extra index.
pub fn partition(n: usize, n_teachers: usize, seed: u64) -> Result<Vec<Vec<usize>>, BackendError> {
    if n_teachers == 0 || n_teachers > n {
        return Err(BackendError::Partition { n, n_teachers });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha20Rng::seed_from_u64(seed));
    let (base, extra) = (n / n_teachers, n % n_teachers);
    let mut parts = Vec::with_capacity(n_teachers);
    let mut start = 0;
    for t in 0..n_teachers {
        let size = base + usize::from(t < extra);
        parts.push(order[start..start + size].to_vec());
        start += size;
    }
    Ok(parts)
}
