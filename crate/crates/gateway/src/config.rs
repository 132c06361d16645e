//! Server configuration: a TOML file overlaid with `POWGATE_<KEY>`
//! environment variables.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use powgate_core::accountant::{AccountantConfig, MetricKind};
use powgate_core::backend::{Backend, BackendBundle, BackendError, Dataset, TableBackend};
use powgate_core::calibration::{CalibrationError, Calibrator};
use powgate_core::estimator::LeakageEstimator;
use powgate_core::hashcash::HashAlg;
use powgate_core::server::{Gateway, GatewayConfig, GatewayError, LedgerStore, Mode, ResponseKind};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const ENV_PREFIX: &str = "POWGATE_";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {reason}")]
    Read { path: String, reason: String },
    #[error("config: {0}")]
    Parse(String),
    #[error("config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Calibration(#[from] CalibrationError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    pub bind: String,
    /// Labelled training CSV (`x0,..,label`); teachers and victim are
    /// trained on it at startup.
    pub dataset: Option<PathBuf>,
    /// Class count when the dataset might not contain the last label.
    pub class_count: Option<usize>,
    /// Precomputed vote table (`query_id,count_0,..`), instead of `dataset`.
    pub table: Option<PathBuf>,
    pub n_teachers: usize,
    pub teacher_seed: u64,
    pub metric_kind: MetricKind,
    pub sigma: f64,
    pub sigma_g: f64,
    pub lambda: f64,
    pub delta2_sq: f64,
    pub pknn_k: usize,
    /// Calibrator JSON; without one every puzzle has `k_min` bits.
    pub calibrator: Option<PathBuf>,
    pub a: Option<f64>,
    pub a_q: Option<f64>,
    pub k_min: Option<u32>,
    pub k_max: Option<u32>,
    pub puzzle_ttl_seconds: u64,
    pub hash_alg: HashAlg,
    pub mode: Mode,
    #[serde(rename = "return")]
    pub response: ResponseKind,
    pub max_batch: usize,
    /// Ledger snapshot file, restored at startup when present.
    pub snapshot: Option<PathBuf>,
    /// Zero snapshots only at shutdown.
    pub snapshot_interval_seconds: u64,
}

impl Default for ServerConfig {
    fn default() -> Self {
        let acc = AccountantConfig::default();
        let gw = GatewayConfig::default();
        ServerConfig {
            bind: "127.0.0.1:8080".into(),
            dataset: None,
            class_count: None,
            table: None,
            n_teachers: 50,
            teacher_seed: 0,
            metric_kind: acc.metric_kind,
            sigma: acc.sigma,
            sigma_g: acc.sigma_g,
            lambda: acc.lambda,
            delta2_sq: acc.delta2_sq,
            pknn_k: acc.pknn_k,
            calibrator: None,
            a: None,
            a_q: None,
            k_min: None,
            k_max: None,
            puzzle_ttl_seconds: gw.puzzle_ttl_seconds,
            hash_alg: gw.hash_alg,
            mode: gw.mode,
            response: gw.response,
            max_batch: gw.max_batch,
            snapshot: None,
            snapshot_interval_seconds: 60,
        }
    }
}

impl ServerConfig {
    /// Reads `path` (if any) and applies `POWGATE_*` overrides from the
    /// process environment.
    pub fn load(path: Option<&Path>) -> Result<Self, ConfigError> {
        Self::load_with_env(path, std::env::vars())
    }

    pub fn load_with_env(
        path: Option<&Path>,
        env: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self, ConfigError> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| ConfigError::Read {
                    path: p.display().to_string(),
                    reason: e.to_string(),
                })?;
                text.parse::<toml::Table>()
                    .map_err(|e| ConfigError::Parse(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for (key, raw) in env {
            let Some(name) = key.strip_prefix(ENV_PREFIX) else {
                continue;
            };
            table.insert(name.to_ascii_lowercase(), env_value(&raw));
        }
        let config: ServerConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.message().to_string()))?;
        Ok(config)
    }

    pub fn accountant(&self) -> AccountantConfig {
        AccountantConfig {
            sigma: self.sigma,
            sigma_g: self.sigma_g,
            lambda: self.lambda,
            delta2_sq: self.delta2_sq,
            metric_kind: self.metric_kind,
            pknn_k: self.pknn_k,
        }
    }

    pub fn gateway_config(&self) -> GatewayConfig {
        GatewayConfig {
            mode: self.mode,
            response: self.response,
            max_batch: self.max_batch,
            puzzle_ttl_seconds: self.puzzle_ttl_seconds,
            hash_alg: self.hash_alg,
        }
    }

    pub fn backend(&self) -> Result<Arc<dyn Backend>, ConfigError> {
        match (&self.dataset, &self.table) {
            (Some(path), None) => {
                let dataset = Dataset::load(path, self.class_count)?;
                Ok(Arc::new(BackendBundle::train(dataset, self.n_teachers, self.teacher_seed)?))
            }
            (None, Some(path)) => Ok(Arc::new(TableBackend::load(path)?)),
            (Some(_), Some(_)) => Err(ConfigError::Invalid("set only one of `dataset` and `table`".into())),
            (None, None) => Err(ConfigError::Invalid("one of `dataset` or `table` is required".into())),
        }
    }

    /// The calibrator file (or the flat uncalibrated one) with the
    /// per-field overrides applied.
    pub fn calibrator_model(&self) -> Result<Calibrator, ConfigError> {
        let mut cal = match &self.calibrator {
            Some(path) => Calibrator::load(path)?,
            None => {
                tracing::warn!("no calibrator configured; every puzzle gets k_min bits");
                Calibrator::uncalibrated()
            }
        };
        if let Some(a) = self.a {
            cal.a = a;
        }
        if let Some(a_q) = self.a_q {
            cal.a_q = a_q;
        }
        if let Some(k) = self.k_min {
            cal.k_min = k;
        }
        if let Some(k) = self.k_max {
            cal.k_max = k;
        }
        cal.validate()?;
        Ok(cal)
    }

    /// Restored ledgers, or an empty store when no snapshot exists yet.
    pub fn ledgers(&self) -> Result<LedgerStore, ConfigError> {
        match &self.snapshot {
            Some(path) => Ok(LedgerStore::restore(path, true)?),
            None => Ok(LedgerStore::new()),
        }
    }

    /// Builds the whole gateway. Fails on a metric the backend cannot
    /// compute, an unreadable file, or an invalid calibrator.
    pub fn build_gateway(&self) -> Result<Gateway, ConfigError> {
        let estimator = LeakageEstimator::new(self.backend()?, self.accountant())?;
        let gateway = Gateway::new(estimator, Arc::new(self.calibrator_model()?), self.gateway_config())?
            .with_ledgers(self.ledgers()?);
        Ok(gateway)
    }
}

/// Environment values are TOML literals when they parse as one (`2`,
/// `true`, `"x"`) and plain strings otherwise (`stateless`, `/data/x.csv`).
fn env_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
