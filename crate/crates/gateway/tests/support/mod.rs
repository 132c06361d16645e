#![allow(dead_code)]

use std::collections::VecDeque;
use std::sync::{Arc, Mutex};

use powgate_core::accountant::{AccountantConfig, MetricKind, VoteHistogram};
use powgate_core::backend::TableBackend;
use powgate_core::calibration::{Calibrator, LinearModel};
use powgate_core::estimator::LeakageEstimator;
use powgate_core::server::{Clock, Gateway, GatewayConfig};

/// `n` three-class vote rows of 50 teachers with varying agreement.
pub fn table_backend(n: u64) -> Arc<TableBackend> {
    let rows = (0..n).map(|id| {
        let top = 20 + (id % 31) as u32;
        let second = (50 - top) / 2 + (id % 3) as u32;
        let counts = vec![top, second.min(50 - top), 50 - top - second.min(50 - top)];
        (id, VoteHistogram::new(counts).expect("valid histogram"))
    });
    Arc::new(TableBackend::new(rows).expect("valid table"))
}

pub fn estimator(metric_kind: MetricKind, sigma: f64) -> LeakageEstimator {
    let config = AccountantConfig {
        sigma,
        metric_kind,
        ..AccountantConfig::default()
    };
    LeakageEstimator::new(table_backend(1000), config).expect("table supports the metric")
}

/// Flat legit line at zero, one bit per doubling of a one-second time
/// unit, base 2: a user with cumulative cost `c` gets `round(c)` bits.
pub fn cost_equals_bits(k_max: u32) -> Calibrator {
    let mut c = Calibrator::new(
        LinearModel { slope: 0.0, intercept: 0.0 },
        LinearModel { slope: 1.0 / std::f64::consts::LN_2, intercept: 0.0 },
        1.0,
    )
    .expect("valid calibrator");
    c.a = 2.0;
    c.a_q = 2.0;
    c.k_max = k_max;
    c
}

pub fn gateway(estimator: LeakageEstimator, calibrator: Calibrator, config: GatewayConfig) -> Gateway {
    Gateway::new(estimator, Arc::new(calibrator), config).expect("valid gateway")
}

/// Table queries are one-element vectors holding the row id.
pub fn table_queries(ids: impl IntoIterator<Item = u64>) -> Vec<Vec<f64>> {
    ids.into_iter().map(|id| vec![id as f64]).collect()
}

/// Returns the queued times in order, then repeats the last one.
pub struct ScriptedClock {
    times: Mutex<VecDeque<u64>>,
    last: Mutex<u64>,
}

impl ScriptedClock {
    pub fn new(times: impl IntoIterator<Item = u64>) -> Self {
        ScriptedClock {
            times: Mutex::new(times.into_iter().collect()),
            last: Mutex::new(0),
        }
    }
}

impl Clock for ScriptedClock {
    fn now(&self) -> u64 {
        let mut last = self.last.lock().unwrap();
        if let Some(t) = self.times.lock().unwrap().pop_front() {
            *last = t;
        }
        *last
    }
}
