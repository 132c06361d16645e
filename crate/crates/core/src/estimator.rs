//! Per-query leakage cost under the configured metric.

use std::sync::Arc;

use crate::accountant::{
    consensus_cost, entropy_cost, gap_cost, gaussian_rdp_for, AccountantConfig, MetricKind,
};
use crate::backend::{Backend, BackendError};
use crate::exec::Exec;

#[derive(Clone)]
pub struct LeakageEstimator {
    backend: Arc<dyn Backend>,
    config: AccountantConfig,
}

impl std::fmt::Debug for LeakageEstimator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LeakageEstimator").field("config", &self.config).finish_non_exhaustive()
    }
}

impl LeakageEstimator {
    /// Fails when the config is invalid or the backend cannot serve the
    /// metric, so misconfiguration surfaces at startup.
    pub fn new(backend: Arc<dyn Backend>, config: AccountantConfig) -> Result<Self, BackendError> {
        config.validate()?;
        if !backend.supports(config.metric_kind) {
            return Err(BackendError::Unsupported(config.metric_kind));
        }
        Ok(LeakageEstimator { backend, config })
    }

    pub fn config(&self) -> &AccountantConfig {
        &self.config
    }

    pub fn backend(&self) -> &Arc<dyn Backend> {
        &self.backend
    }

    pub fn query_cost(&self, query: &[f64]) -> Result<f64, BackendError> {
        let b = &self.backend;
        Ok(match self.config.metric_kind {
            MetricKind::PateQ => consensus_cost(&b.teacher_votes(query)?, self.config.sigma),
            MetricKind::PknnQ => consensus_cost(&b.pknn_votes(query, self.config.pknn_k)?, self.config.sigma),
            MetricKind::Entropy => entropy_cost(&b.victim_predict(query)?),
            MetricKind::Gap => gap_cost(&b.victim_predict(query)?),
            // Data-independent: every answered query pays the same.
            MetricKind::Rdp => {
                b.check_query(query)?;
                gaussian_rdp_for(&self.config).epsilon
            }
        })
    }

    pub fn batch_costs<Q>(&self, queries: &[Q], exec: Exec) -> Result<Vec<f64>, BackendError>
    where
        Q: AsRef<[f64]> + Sync,
    {
        exec.try_map(queries, |q| self.query_cost(q.as_ref()))
    }
}
