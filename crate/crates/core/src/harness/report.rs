use std::io;
use std::path::{Path, PathBuf};

use plotters::prelude::*;
use serde::{Deserialize, Serialize};

use super::{HarnessError, StrategyKind};

const COLUMNS: [&str; 5] = ["query_count", "batch_cost", "cumulative_cost", "bits", "expected_pow_seconds"];

/// One answered batch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub query_count: u64,
    pub batch_cost: f64,
    pub cumulative_cost: f64,
    pub bits: u32,
    pub expected_pow_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceReport {
    pub strategy: StrategyKind,
    pub rows: Vec<TraceRow>,
    /// Serving time without any puzzle.
    pub baseline_seconds: f64,
    /// Expected solve time, `sum 2^bits * t_hash`.
    pub pow_seconds: f64,
    /// `(baseline + pow) / baseline`.
    pub overhead_factor: f64,
    pub t_hash_seconds: f64,
    /// Wall time of puzzles actually solved, when any were.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub measured_pow_seconds: Option<f64>,
    /// Set when the query pool ran out before the requested count.
    pub truncated: bool,
}

impl TraceReport {
    pub fn total_queries(&self) -> u64 {
        self.rows.last().map_or(0, |r| r.query_count)
    }

    pub fn cumulative_cost(&self) -> f64 {
        self.rows.last().map_or(0.0, |r| r.cumulative_cost)
    }

    /// Cumulative cost after the last batch ending at or before `queries`.
    pub fn cost_at(&self, queries: u64) -> f64 {
        self.rows
            .iter()
            .take_while(|r| r.query_count <= queries)
            .last()
            .map_or(0.0, |r| r.cumulative_cost)
    }

    pub fn write_csv<W: io::Write>(&self, writer: W) -> Result<(), HarnessError> {
        write_rows(&self.rows, writer)
    }

    pub fn read_rows<R: io::Read>(reader: R) -> Result<Vec<TraceRow>, HarnessError> {
        let mut r = csv::Reader::from_reader(reader);
        let headers = r.headers().map_err(|e| HarnessError::Io(e.to_string()))?;
        if headers != COLUMNS.to_vec() {
            return Err(HarnessError::Io(format!("unexpected trace header {headers:?}")));
        }
        r.deserialize()
            .collect::<Result<Vec<TraceRow>, _>>()
            .map_err(|e| HarnessError::Io(e.to_string()))
    }
}

fn write_rows<W: io::Write>(rows: &[TraceRow], writer: W) -> Result<(), HarnessError> {
    let err = |e: csv::Error| HarnessError::Io(e.to_string());
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    w.write_record(COLUMNS).map_err(err)?;
    for row in rows {
        w.serialize(row).map_err(err)?;
    }
    w.flush().map_err(|e| HarnessError::Io(e.to_string()))
}

/// Writes `<strategy>.csv` per report, `summary.json` with all totals, and
/// one SVG overlaying cost and bits against queries. Returns written paths.
pub fn export(reports: &[TraceReport], dir: &Path, plot: bool) -> Result<Vec<PathBuf>, HarnessError> {
    let io_err = |p: &Path, e: &dyn std::fmt::Display| HarnessError::Io(format!("{}: {e}", p.display()));
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, &e))?;
    let mut written = Vec::new();
    for report in reports {
        let path = dir.join(format!("{}.csv", report.strategy));
        let file = std::fs::File::create(&path).map_err(|e| io_err(&path, &e))?;
        report.write_csv(io::BufWriter::new(file))?;
        written.push(path);
    }
    let summary = dir.join("summary.json");
    let text = serde_json::to_string_pretty(reports).expect("reports serialize");
    std::fs::write(&summary, text + "\n").map_err(|e| io_err(&summary, &e))?;
    written.push(summary);
    if plot && !reports.is_empty() {
        let path = dir.join("cost_and_bits.svg");
        plot_overlay(reports, &path).map_err(|e| io_err(&path, &e))?;
        written.push(path);
    }
    Ok(written)
}

fn plot_overlay(reports: &[TraceReport], path: &Path) -> Result<(), Box<dyn std::error::Error>> {
    let root = SVGBackend::new(path, (900, 900)).into_drawing_area();
    root.fill(&WHITE)?;
    let (top, bottom) = root.split_vertically(450);
    let max_q = reports.iter().map(|r| r.total_queries()).max().unwrap_or(1).max(1) as f64;
    let max_cost = reports.iter().map(|r| r.cumulative_cost()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let max_bits = reports
        .iter()
        .flat_map(|r| r.rows.iter().map(|row| row.bits))
        .max()
        .unwrap_or(1)
        .max(1) as f64;

    let panels: [(&_, &str, f64, fn(&TraceRow) -> f64); 2] = [
        (&top, "Privacy cost", max_cost * 1.05, |r| r.cumulative_cost),
        (&bottom, "Puzzle bits", max_bits + 1.0, |r| f64::from(r.bits)),
    ];
    for (area, label, y_max, y_of) in panels {
        let mut chart = ChartBuilder::on(area)
            .caption(format!("{label} vs number of queries"), ("sans-serif", 20))
            .margin(10)
            .x_label_area_size(35)
            .y_label_area_size(60)
            .build_cartesian_2d(0.0..max_q, 0.0..y_max)?;
        chart.configure_mesh().x_desc("queries").y_desc(label).draw()?;
        for (i, report) in reports.iter().enumerate() {
            let color = Palette99::pick(i).to_rgba();
            let points: Vec<(f64, f64)> =
                report.rows.iter().map(|r| (r.query_count as f64, y_of(r))).collect();
            chart
                .draw_series(LineSeries::new(points, color.stroke_width(2)))?
                .label(report.strategy.as_str())
                .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color));
        }
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()?;
    }
    root.present()?;
    Ok(())
}
