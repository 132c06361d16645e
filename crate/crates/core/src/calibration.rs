//! Maps a user's accumulated leakage to a puzzle difficulty.
//!
//! Two least-squares lines do the work: query count to the cumulative cost
//! a legitimate user is expected to accrue, and `ln(seconds)` to leading
//! zero bits. The excess `x` over the legitimate baseline becomes a target
//! solve time `time_unit * a^x`, which the second line turns into bits.

use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hashcash::BenchTable;

#[derive(Debug, Error, PartialEq)]
pub enum CalibrationError {
    #[error("regression needs at least two distinct abscissae, got {0}")]
    FitDegenerate(usize),
    #[error("fitted bits model has non-positive slope {0}")]
    NonIncreasingBits(f64),
    #[error("invalid calibrator: {0}")]
    Invalid(String),
    #[error("trace file: {0}")]
    Trace(String),
    #[error("calibrator file {path}: {reason}")]
    File { path: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub slope: f64,
    pub intercept: f64,
}

impl LinearModel {
    pub fn predict(&self, x: f64) -> f64 {
        self.slope * x + self.intercept
    }

    /// Ordinary least squares, computed on centered data.
    pub fn fit(points: &[(f64, f64)]) -> Result<Self, CalibrationError> {
        let mut xs: Vec<f64> = points.iter().map(|p| p.0).collect();
        xs.sort_by(f64::total_cmp);
        xs.dedup();
        if xs.len() < 2 {
            return Err(CalibrationError::FitDegenerate(xs.len()));
        }
        let n = points.len() as f64;
        let mean_x = points.iter().map(|p| p.0).sum::<f64>() / n;
        let mean_y = points.iter().map(|p| p.1).sum::<f64>() / n;
        let (sxy, sxx) = points.iter().fold((0.0, 0.0), |(sxy, sxx), &(x, y)| {
            let dx = x - mean_x;
            (sxy + dx * (y - mean_y), sxx + dx * dx)
        });
        let slope = sxy / sxx;
        let model = LinearModel {
            slope,
            intercept: mean_y - slope * mean_x,
        };
        if !(model.slope.is_finite() && model.intercept.is_finite()) {
            return Err(CalibrationError::FitDegenerate(xs.len()));
        }
        Ok(model)
    }
}

/// One batch boundary of a legitimate user's history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub query_count: u64,
    pub cumulative_cost: f64,
}

/// A legitimate user's cost history, one point per answered batch.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LegitTrace {
    pub points: Vec<TracePoint>,
}

impl LegitTrace {
    pub fn write_csv<W: io::Write>(&self, writer: W) -> Result<(), CalibrationError> {
        let err = |e: csv::Error| CalibrationError::Trace(e.to_string());
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
        w.write_record(["query_count", "cumulative_cost"]).map_err(err)?;
        for p in &self.points {
            w.serialize(p).map_err(err)?;
        }
        w.flush().map_err(|e| CalibrationError::Trace(e.to_string()))
    }

    /// Reads the `query_count` and `cumulative_cost` columns by name, so
    /// full simulation trace CSVs load as well.
    pub fn read_csv<R: io::Read>(reader: R) -> Result<Self, CalibrationError> {
        let err = |e: csv::Error| CalibrationError::Trace(e.to_string());
        let mut r = csv::Reader::from_reader(reader);
        let headers = r.headers().map_err(err)?.clone();
        let column = |name: &str| {
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| CalibrationError::Trace(format!("missing column {name:?} in header {headers:?}")))
        };
        let (qi, ci) = (column("query_count")?, column("cumulative_cost")?);
        let mut points = Vec::new();
        for (line, record) in r.records().enumerate() {
            let record = record.map_err(err)?;
            let field = |i: usize| record.get(i).unwrap_or("").trim();
            let bad = |what: &str| CalibrationError::Trace(format!("row {}: bad {what}", line + 1));
            points.push(TracePoint {
                query_count: field(qi).parse().map_err(|_| bad("query_count"))?,
                cumulative_cost: field(ci).parse().map_err(|_| bad("cumulative_cost"))?,
            });
        }
        Ok(LegitTrace { points })
    }

    pub fn save(&self, path: &Path) -> Result<(), CalibrationError> {
        let file = std::fs::File::create(path)
            .map_err(|e| CalibrationError::Trace(format!("{}: {e}", path.display())))?;
        self.write_csv(file)
    }

    pub fn load(path: &Path) -> Result<Self, CalibrationError> {
        let file = std::fs::File::open(path)
            .map_err(|e| CalibrationError::Trace(format!("{}: {e}", path.display())))?;
        Self::read_csv(file).map_err(|e| CalibrationError::Trace(format!("{}: {e}", path.display())))
    }
}

/// Query count to expected cumulative cost, pooled over all traces.
pub fn fit_legit_model(traces: &[LegitTrace]) -> Result<LinearModel, CalibrationError> {
    let points: Vec<(f64, f64)> = traces
        .iter()
        .flat_map(|t| &t.points)
        .map(|p| (p.query_count as f64, p.cumulative_cost))
        .collect();
    LinearModel::fit(&points)
}

/// `ln(mean solve seconds)` to bits.
pub fn fit_bits_model(bench: &BenchTable) -> Result<LinearModel, CalibrationError> {
    let points: Vec<(f64, f64)> = bench
        .rows()
        .iter()
        .map(|r| (r.mean_solve_seconds.ln(), f64::from(r.bits)))
        .collect();
    let model = LinearModel::fit(&points)?;
    if model.slope <= 0.0 {
        return Err(CalibrationError::NonIncreasingBits(model.slope));
    }
    Ok(model)
}

/// Per-user state kept by the gateway.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserLedger {
    pub user_id: String,
    pub query_count: u64,
    pub cumulative_cost: f64,
}

impl UserLedger {
    pub fn new(user_id: impl Into<String>) -> Self {
        UserLedger {
            user_id: user_id.into(),
            query_count: 0,
            cumulative_cost: 0.0,
        }
    }

    /// Adds one answered batch. Negative costs are treated as zero so the
    /// ledger never decreases.
    pub fn record(&mut self, queries: u64, cost: f64) {
        self.query_count += queries;
        self.cumulative_cost += cost.max(0.0);
    }
}

/// `|actual - max(0, predicted)|`.
pub fn cost_difference(ledger: &UserLedger, legit: &LinearModel) -> f64 {
    let predicted = legit.predict(ledger.query_count as f64).max(0.0);
    (ledger.cumulative_cost - predicted).abs()
}

/// Tolerance band around the legitimate line; users inside it have `x = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostBand {
    pub lower_offset: f64,
    pub upper_offset: f64,
}

impl CostBand {
    /// Band spanning the given residual quantiles of the legitimate traces.
    pub fn fit(
        traces: &[LegitTrace],
        legit: &LinearModel,
        lower_quantile: f64,
        upper_quantile: f64,
    ) -> Result<Self, CalibrationError> {
        if !(0.0..=1.0).contains(&lower_quantile)
            || !(0.0..=1.0).contains(&upper_quantile)
            || lower_quantile > upper_quantile
        {
            return Err(CalibrationError::Invalid(format!(
                "band quantiles {lower_quantile}..{upper_quantile}"
            )));
        }
        let mut residuals: Vec<f64> = traces
            .iter()
            .flat_map(|t| &t.points)
            .map(|p| p.cumulative_cost - legit.predict(p.query_count as f64).max(0.0))
            .collect();
        if residuals.is_empty() {
            return Err(CalibrationError::FitDegenerate(0));
        }
        residuals.sort_by(f64::total_cmp);
        let at = |q: f64| residuals[((residuals.len() - 1) as f64 * q).round() as usize];
        Ok(CostBand {
            lower_offset: at(lower_quantile).min(0.0),
            upper_offset: at(upper_quantile).max(0.0),
        })
    }

    pub fn distance(&self, ledger: &UserLedger, legit: &LinearModel) -> f64 {
        let predicted = legit.predict(ledger.query_count as f64).max(0.0);
        let lo = (predicted + self.lower_offset).max(0.0);
        let hi = predicted + self.upper_offset;
        if ledger.cumulative_cost < lo {
            lo - ledger.cumulative_cost
        } else if ledger.cumulative_cost > hi {
            ledger.cumulative_cost - hi
        } else {
            0.0
        }
    }
}

pub const DEFAULT_A: f64 = 1.0075;
pub const DEFAULT_K_MIN: u32 = 0;
pub const DEFAULT_K_MAX: u32 = 50;

/// Fitted difficulty policy. Immutable once built; share freely.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CalibratorFile", into = "CalibratorFile")]
pub struct Calibrator {
    pub legit_model: LinearModel,
    pub bits_model: LinearModel,
    /// Base of the stateful excess-to-time map.
    pub a: f64,
    /// Base of the stateless per-query map.
    pub a_q: f64,
    pub time_unit_seconds: f64,
    pub k_min: u32,
    pub k_max: u32,
    pub band: Option<CostBand>,
}

#[derive(Serialize, Deserialize)]
struct CalibratorFile {
    legit_slope: f64,
    legit_intercept: f64,
    bits_slope: f64,
    bits_intercept: f64,
    a: f64,
    a_q: f64,
    time_unit_seconds: f64,
    k_min: u32,
    k_max: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    band_lower_offset: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    band_upper_offset: Option<f64>,
}

impl TryFrom<CalibratorFile> for Calibrator {
    type Error = CalibrationError;

    fn try_from(f: CalibratorFile) -> Result<Self, Self::Error> {
        let band = match (f.band_lower_offset, f.band_upper_offset) {
            (Some(lower_offset), Some(upper_offset)) => Some(CostBand {
                lower_offset,
                upper_offset,
            }),
            (None, None) => None,
            _ => {
                return Err(CalibrationError::Invalid(
                    "band needs both lower and upper offsets".into(),
                ))
            }
        };
        let c = Calibrator {
            legit_model: LinearModel {
                slope: f.legit_slope,
                intercept: f.legit_intercept,
            },
            bits_model: LinearModel {
                slope: f.bits_slope,
                intercept: f.bits_intercept,
            },
            a: f.a,
            a_q: f.a_q,
            time_unit_seconds: f.time_unit_seconds,
            k_min: f.k_min,
            k_max: f.k_max,
            band,
        };
        c.validate()?;
        Ok(c)
    }
}

impl From<Calibrator> for CalibratorFile {
    fn from(c: Calibrator) -> Self {
        CalibratorFile {
            legit_slope: c.legit_model.slope,
            legit_intercept: c.legit_model.intercept,
            bits_slope: c.bits_model.slope,
            bits_intercept: c.bits_model.intercept,
            a: c.a,
            a_q: c.a_q,
            time_unit_seconds: c.time_unit_seconds,
            k_min: c.k_min,
            k_max: c.k_max,
            band_lower_offset: c.band.map(|b| b.lower_offset),
            band_upper_offset: c.band.map(|b| b.upper_offset),
        }
    }
}

impl Calibrator {
    /// Calibrator with default base, clamp range, and `a_q = a`.
    pub fn new(
        legit_model: LinearModel,
        bits_model: LinearModel,
        time_unit_seconds: f64,
    ) -> Result<Self, CalibrationError> {
        let c = Calibrator {
            legit_model,
            bits_model,
            a: DEFAULT_A,
            a_q: DEFAULT_A,
            time_unit_seconds,
            k_min: DEFAULT_K_MIN,
            k_max: DEFAULT_K_MAX,
            band: None,
        };
        c.validate()?;
        Ok(c)
    }

    /// Always zero bits. Used to record traces before any calibration exists.
    pub fn uncalibrated() -> Self {
        Calibrator {
            legit_model: LinearModel { slope: 0.0, intercept: 0.0 },
            bits_model: LinearModel { slope: 1.0, intercept: 0.0 },
            a: DEFAULT_A,
            a_q: DEFAULT_A,
            time_unit_seconds: 1.0,
            k_min: 0,
            k_max: 0,
            band: None,
        }
    }

    pub fn validate(&self) -> Result<(), CalibrationError> {
        let bad = |why: String| Err(CalibrationError::Invalid(why));
        let coefs = [
            self.legit_model.slope,
            self.legit_model.intercept,
            self.bits_model.slope,
            self.bits_model.intercept,
        ];
        if coefs.iter().any(|c| !c.is_finite()) {
            return bad("non-finite model coefficient".into());
        }
        if self.bits_model.slope <= 0.0 {
            return bad(format!("bits slope {} must be positive", self.bits_model.slope));
        }
        if !(self.a > 1.0 && self.a.is_finite()) {
            return bad(format!("a = {} must exceed 1", self.a));
        }
        if !(self.a_q > 1.0 && self.a_q.is_finite()) {
            return bad(format!("a_q = {} must exceed 1", self.a_q));
        }
        if !(self.time_unit_seconds > 0.0 && self.time_unit_seconds.is_finite()) {
            return bad(format!("time unit {} must be positive", self.time_unit_seconds));
        }
        if self.k_min > self.k_max {
            return bad(format!("k_min {} > k_max {}", self.k_min, self.k_max));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CalibrationError> {
        let file_err = |reason: String| CalibrationError::File {
            path: path.display().to_string(),
            reason,
        };
        let text = std::fs::read_to_string(path).map_err(|e| file_err(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| file_err(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<(), CalibrationError> {
        let text = serde_json::to_string_pretty(self).expect("calibrator serializes");
        std::fs::write(path, text + "\n").map_err(|e| CalibrationError::File {
            path: path.display().to_string(),
            reason: e.to_string(),
        })
    }

    /// Excess cost `x` of a user over the legitimate baseline.
    pub fn excess(&self, ledger: &UserLedger) -> f64 {
        match &self.band {
            Some(band) => band.distance(ledger, &self.legit_model),
            None => cost_difference(ledger, &self.legit_model),
        }
    }

    /// `ln` of the solve time at which the bits line reaches `k_max`.
    fn log_time_cap(&self) -> f64 {
        (f64::from(self.k_max) - self.bits_model.intercept) / self.bits_model.slope
    }

    /// `time_unit * a^x`, saturating at the time that maps to `k_max`.
    pub fn target_time(&self, x: f64) -> f64 {
        let log_t = self.time_unit_seconds.ln() + x * self.a.ln();
        let cap = self.log_time_cap();
        if log_t.is_nan() || log_t > cap {
            cap.exp()
        } else {
            log_t.exp()
        }
    }

    /// Rounded bits for a target `ln(seconds)`, clamped to `[k_min, k_max]`.
    pub fn bits_for_log_time(&self, log_t: f64) -> u32 {
        let raw = self.bits_model.predict(log_t);
        if raw.is_nan() || raw >= f64::from(self.k_max) {
            return self.k_max;
        }
        if raw <= f64::from(self.k_min) {
            return self.k_min;
        }
        (raw.round() as u32).clamp(self.k_min, self.k_max)
    }

    /// Stateful difficulty for a ledger that already includes the batch.
    pub fn difficulty(&self, ledger: &UserLedger) -> u32 {
        let x = self.excess(ledger);
        self.bits_for_log_time(self.time_unit_seconds.ln() + x * self.a.ln())
    }

    /// Per-query difficulty from that query's own cost.
    pub fn stateless_difficulty(&self, per_query_cost: f64) -> u32 {
        let cost = per_query_cost.max(0.0);
        self.bits_for_log_time(self.time_unit_seconds.ln() + cost * self.a_q.ln())
    }

    /// One difficulty carrying the expected work of several:
    /// `2^k ~ sum_j 2^{k_j}`, rounded to the nearest bit and clamped.
    pub fn combine_bits(&self, bits: &[u32]) -> u32 {
        if bits.is_empty() {
            return self.k_min;
        }
        let work: f64 = bits.iter().map(|&k| 2f64.powi(k as i32)).sum();
        let k = work.log2().round();
        if k >= f64::from(self.k_max) {
            self.k_max
        } else {
            (k as u32).clamp(self.k_min, self.k_max)
        }
    }

    /// Expected overhead factor `1 + pow / baseline` of replaying `trace`
    /// against this calibrator, one puzzle per trace point.
    pub fn trace_overhead(&self, trace: &LegitTrace, t_hash: f64, baseline_batch_seconds: f64) -> f64 {
        if trace.points.is_empty() {
            return 1.0;
        }
        let pow: f64 = trace
            .points
            .iter()
            .map(|p| {
                let ledger = UserLedger {
                    user_id: String::new(),
                    query_count: p.query_count,
                    cumulative_cost: p.cumulative_cost,
                };
                2f64.powi(self.difficulty(&ledger) as i32) * t_hash
            })
            .sum();
        1.0 + pow / (trace.points.len() as f64 * baseline_batch_seconds)
    }

    /// Lowers `time_unit_seconds` (never raises it) until every legitimate
    /// trace replays within `ceiling` times its baseline serving time.
    /// Returns the worst legitimate overhead after adjustment; if even the
    /// smallest unit cannot meet the ceiling, that overhead exceeds it.
    pub fn enforce_legit_ceiling(
        &mut self,
        traces: &[LegitTrace],
        t_hash: f64,
        baseline_batch_seconds: f64,
        ceiling: f64,
    ) -> f64 {
        let worst = |c: &Calibrator| {
            traces
                .iter()
                .map(|t| c.trace_overhead(t, t_hash, baseline_batch_seconds))
                .fold(1.0, f64::max)
        };
        let current = worst(self);
        if current <= ceiling {
            return current;
        }
        // Overhead is a non-decreasing step function of ln(time_unit).
        let mut hi = self.time_unit_seconds.ln();
        let mut lo = hi - (f64::from(self.k_max) + 2.0) / self.bits_model.slope;
        let at = |c: &Calibrator, log_unit: f64| {
            let mut probe = c.clone();
            probe.time_unit_seconds = log_unit.exp();
            worst(&probe)
        };
        if at(self, lo) > ceiling {
            self.time_unit_seconds = lo.exp();
            return worst(self);
        }
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if at(self, mid) <= ceiling {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        self.time_unit_seconds = lo.exp();
        worst(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hashcash::BenchRow;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn bench(rows: impl IntoIterator<Item = (u32, f64)>) -> BenchTable {
        BenchTable::new(
            rows.into_iter()
                .map(|(bits, t)| BenchRow {
                    bits,
                    mean_solve_seconds: t,
                    mean_trials: 2f64.powi(bits as i32),
                    repetitions: 1,
                })
                .collect(),
        )
        .unwrap()
    }

    fn trace(points: &[(u64, f64)]) -> LegitTrace {
        LegitTrace {
            points: points
                .iter()
                .map(|&(query_count, cumulative_cost)| TracePoint {
                    query_count,
                    cumulative_cost,
                })
                .collect(),
        }
    }

    /// Ideal bench: t = 2^k * 1e-6.
    fn ideal_bits() -> LinearModel {
        fit_bits_model(&bench((4..=12).map(|k| (k, 2f64.powi(k as i32) * 1e-6)))).unwrap()
    }

    fn ledger(n: u64, c: f64) -> UserLedger {
        UserLedger {
            user_id: "u".into(),
            query_count: n,
            cumulative_cost: c,
        }
    }

    /// Closed-form OLS via the normal equations on raw sums.
    fn ols_oracle(points: &[(f64, f64)]) -> (f64, f64) {
        let n = points.len() as f64;
        let sx: f64 = points.iter().map(|p| p.0).sum();
        let sy: f64 = points.iter().map(|p| p.1).sum();
        let sxx: f64 = points.iter().map(|p| p.0 * p.0).sum();
        let sxy: f64 = points.iter().map(|p| p.0 * p.1).sum();
        let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
        (slope, (sy - slope * sx) / n)
    }

    #[test]
    fn legit_fit_two_points() {
        let m = fit_legit_model(&[trace(&[(0, 0.0), (100, 5.0)])]).unwrap();
        assert_abs_diff_eq!(m.slope, 0.05, epsilon = 1e-15);
        assert_abs_diff_eq!(m.intercept, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn legit_fit_noisy_line() {
        let pts: Vec<(u64, f64)> = (0..50)
            .map(|i| {
                let x = i * 10;
                let noise = if i % 2 == 0 { 0.1 } else { -0.1 };
                (x, 0.05 * x as f64 + 1.0 + noise)
            })
            .collect();
        let m = fit_legit_model(&[trace(&pts)]).unwrap();
        let (slope, _) = ols_oracle(&pts.iter().map(|&(x, y)| (x as f64, y)).collect::<Vec<_>>());
        assert_abs_diff_eq!(m.slope, slope, epsilon = 1e-12);
        assert!((m.slope - 0.05).abs() < 0.005);
    }

    #[test]
    fn legit_fit_degenerate() {
        assert_eq!(
            fit_legit_model(&[trace(&[(10, 1.0), (10, 2.0)])]),
            Err(CalibrationError::FitDegenerate(1))
        );
    }

    #[test]
    fn bits_fit_exact() {
        let m = ideal_bits();
        assert_abs_diff_eq!(m.slope, 1.0 / std::f64::consts::LN_2, epsilon = 1e-9);
        assert_abs_diff_eq!(m.intercept, -(1e-6f64).ln() / std::f64::consts::LN_2, epsilon = 1e-6);
    }

    #[test]
    fn bits_fit_noisy() {
        let noise = [1.1, 0.9, 1.05, 0.95, 1.0, 1.1, 0.9, 1.08, 0.92];
        let rows: Vec<(u32, f64)> = (4..=12)
            .zip(noise)
            .map(|(k, n)| (k, 2f64.powi(k as i32) * 1e-6 * n))
            .collect();
        let m = fit_bits_model(&bench(rows.clone())).unwrap();
        let (slope, intercept) =
            ols_oracle(&rows.iter().map(|&(k, t)| (t.ln(), f64::from(k))).collect::<Vec<_>>());
        assert_abs_diff_eq!(m.slope, slope, epsilon = 1e-9);
        assert_abs_diff_eq!(m.intercept, intercept, epsilon = 1e-9);
        assert!((m.slope - std::f64::consts::LOG2_E).abs() < 0.15);
    }

    #[test]
    fn bits_fit_one_row() {
        assert_eq!(fit_bits_model(&bench([(3, 1e-5)])), Err(CalibrationError::FitDegenerate(1)));
    }

    #[test]
    fn cost_difference_examples() {
        let legit = LinearModel { slope: 0.05, intercept: 0.0 };
        assert_eq!(cost_difference(&ledger(100, 5.0), &legit), 0.0);
        assert_abs_diff_eq!(cost_difference(&ledger(100, 12.0), &legit), 7.0, epsilon = 1e-12);
        assert_abs_diff_eq!(cost_difference(&ledger(100, 2.0), &legit), 3.0, epsilon = 1e-12);
        // Negative predictions clamp to zero.
        let below = LinearModel { slope: 0.0, intercept: -4.0 };
        assert_eq!(cost_difference(&ledger(10, 1.0), &below), 1.0);
    }

    fn calibrator(k_max: u32) -> Calibrator {
        let mut c = Calibrator::new(LinearModel { slope: 0.05, intercept: 0.0 }, ideal_bits(), 1.0).unwrap();
        c.k_max = k_max;
        c
    }

    #[test]
    fn target_time_examples() {
        let c = calibrator(50);
        assert_abs_diff_eq!(c.target_time(0.0), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c.target_time(92.75), 2.0, epsilon = 1e-3);
        let small = calibrator(20);
        let t_kmax = 2f64.powi(20) * 1e-6;
        assert_abs_diff_eq!(small.target_time(1000.0), t_kmax, epsilon = 1e-9);
        assert_abs_diff_eq!(small.target_time(f64::INFINITY), t_kmax, epsilon = 1e-9);
    }

    #[test]
    fn difficulty_examples() {
        // time unit 2^10 * 1e-6 s maps to exactly 10 bits on the ideal bench.
        let mut c = calibrator(50);
        c.time_unit_seconds = 2f64.powi(10) * 1e-6;
        assert_eq!(c.difficulty(&ledger(100, 5.0)), 10);
        assert_eq!(c.difficulty(&ledger(100, f64::INFINITY)), 50);
        assert_eq!(c.difficulty(&ledger(100, 1e300)), 50);
        c.k_min = 5;
        c.k_max = 5;
        assert_eq!(c.difficulty(&ledger(100, 5.0)), 5);
        assert_eq!(c.difficulty(&ledger(100, 1e6)), 5);
    }

    #[test]
    fn stateless_examples() {
        let mut c = calibrator(50);
        c.time_unit_seconds = 2f64.powi(10) * 1e-6;
        c.a_q = 4.0;
        assert_eq!(c.stateless_difficulty(0.0), c.difficulty(&ledger(100, 5.0)));
        assert!(c.stateless_difficulty(0.5) > c.stateless_difficulty(0.0));
        let mut doubled = c.clone();
        doubled.a_q *= 2.0;
        for cost in [0.1, 0.5, 2.0, 4.5] {
            assert!(doubled.stateless_difficulty(cost) >= c.stateless_difficulty(cost));
        }
    }

    #[test]
    fn combine_preserves_work() {
        let c = calibrator(50);
        assert_eq!(c.combine_bits(&[10]), 10);
        assert_eq!(c.combine_bits(&[10, 10]), 11);
        assert_eq!(c.combine_bits(&[10, 10, 10, 10]), 12);
        assert_eq!(c.combine_bits(&[]), 0);
        assert_eq!(c.combine_bits(&[50, 50]), 50);
    }

    #[test]
    fn band_mode() {
        let legit = LinearModel { slope: 0.05, intercept: 0.0 };
        let band = CostBand { lower_offset: -1.0, upper_offset: 2.0 };
        assert_eq!(band.distance(&ledger(100, 5.5), &legit), 0.0);
        assert_abs_diff_eq!(band.distance(&ledger(100, 10.0), &legit), 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(band.distance(&ledger(100, 3.0), &legit), 1.0, epsilon = 1e-12);
        let fitted = CostBand::fit(&[trace(&[(0, 0.0), (100, 6.0), (200, 9.0)])], &legit, 0.0, 1.0).unwrap();
        assert!(fitted.lower_offset <= 0.0 && fitted.upper_offset >= 1.0);
    }

    #[test]
    fn json_round_trip_and_field_names() {
        let c = calibrator(30);
        let text = serde_json::to_string(&c).unwrap();
        for field in [
            "legit_slope", "legit_intercept", "bits_slope", "bits_intercept", "a", "a_q",
            "time_unit_seconds", "k_min", "k_max",
        ] {
            assert!(text.contains(&format!("\"{field}\"")), "{field} missing in {text}");
        }
        assert!(!text.contains("band"));
        let back: Calibrator = serde_json::from_str(&text).unwrap();
        assert_eq!(back, c);
        let bad = text.replace("\"a\":1.0075", "\"a\":0.5");
        assert!(serde_json::from_str::<Calibrator>(&bad).is_err());
    }

    #[test]
    fn trace_csv_round_trip() {
        let t = trace(&[(10, 0.5), (20, 1.25)]);
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).starts_with("query_count,cumulative_cost\n"));
        assert_eq!(LegitTrace::read_csv(buf.as_slice()).unwrap(), t);
    }

    #[test]
    fn trace_csv_picks_columns_by_name() {
        let text = "query_count,batch_cost,cumulative_cost,bits\n100,0.5,0.5,3\n200,0.25,0.75,2\n";
        assert_eq!(LegitTrace::read_csv(text.as_bytes()).unwrap(), trace(&[(100, 0.5), (200, 0.75)]));
        assert!(LegitTrace::read_csv("query_count,cost\n1,2\n".as_bytes()).is_err());
        assert!(LegitTrace::read_csv("query_count,cumulative_cost\n1,x\n".as_bytes()).is_err());
    }

    #[test]
    fn ceiling_lowers_time_unit() {
        // Legit users sit exactly on the line; x = 0 for every batch.
        let legit = trace(&(1..=20).map(|b| (b * 10, 0.05 * (b * 10) as f64)).collect::<Vec<_>>());
        let mut c = calibrator(50);
        c.legit_model = fit_legit_model(std::slice::from_ref(&legit)).unwrap();
        let t_hash = 1e-6;
        let baseline = 2f64.powi(12) * 1e-6 * 1.2;
        c.time_unit_seconds = 8.0 * baseline;
        assert!(c.trace_overhead(&legit, t_hash, baseline) > 2.0);
        let after = c.enforce_legit_ceiling(std::slice::from_ref(&legit), t_hash, baseline, 2.0);
        assert!(after <= 2.0, "{after}");
        // Largest feasible difficulty: 2^12 * 1e-6 <= baseline.
        assert_eq!(c.difficulty(&ledger(100, 5.0)), 12);
        assert!(c.time_unit_seconds <= 8.0 * baseline);
    }

    proptest! {
        #[test]
        fn difficulty_monotone_and_clamped(
            n in 0u64..100_000,
            c1 in 0.0f64..5000.0,
            dc in 0.0f64..5000.0,
            k_min in 0u32..10,
            span in 0u32..40,
            unit in 1e-6f64..10.0,
        ) {
            let mut c = calibrator(50);
            c.k_min = k_min;
            c.k_max = k_min + span;
            c.time_unit_seconds = unit;
            let lo = c.difficulty(&ledger(n, c1));
            let hi = c.difficulty(&ledger(n, c1 + dc));
            prop_assert!((c.k_min..=c.k_max).contains(&lo));
            // Above the legit line the excess grows with cost.
            let predicted = c.legit_model.predict(n as f64).max(0.0);
            if c1 >= predicted {
                prop_assert!(hi >= lo);
            }
        }

        #[test]
        fn ols_matches_oracle(seed in any::<u64>(), n in 3usize..60) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<(f64, f64)> = (0..n)
                .map(|i| (i as f64 + rng.random::<f64>(), rng.random_range(-10.0..10.0)))
                .collect();
            let m = LinearModel::fit(&pts).unwrap();
            let (slope, intercept) = ols_oracle(&pts);
            prop_assert!((m.slope - slope).abs() < 1e-9);
            prop_assert!((m.intercept - intercept).abs() < 1e-9);
        }

        #[test]
        fn stateless_split_identity(costs in proptest::collection::vec(0.0f64..4.5, 1..200), accounts in 1usize..10) {
            let mut c = calibrator(50);
            c.time_unit_seconds = 1e-3;
            c.a_q = 2.0;
            let t_hash = 1e-6;
            let work = |cs: &[f64]| cs.iter().map(|&q| 2f64.powi(c.stateless_difficulty(q) as i32) * t_hash).sum::<f64>();
            let whole = work(&costs);
            let split: f64 = (0..accounts)
                .map(|a| work(&costs.iter().skip(a).step_by(accounts).copied().collect::<Vec<_>>()))
                .sum();
            prop_assert!((whole - split).abs() <= 1e-9 * whole);
        }
    }
}
