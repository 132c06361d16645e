//! Simulated users and attackers driven against the full gateway, producing
//! cost-vs-queries traces and expected proof-of-work overhead.

mod report;
mod strategy;

use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::accountant::{entropy_cost, raw_gap, AccountantConfig, ProbVector};
use crate::backend::{Backend, BackendBundle, BackendError};
use crate::calibration::{Calibrator, LegitTrace, TracePoint};
use crate::desk::{DeskConfig, DeskData};
use crate::estimator::LeakageEstimator;
use crate::exec::Exec;
use crate::hashcash::{solve, Challenge, HashAlg, PowHasher};
use crate::server::{Gateway, GatewayConfig, GatewayError, ResponseKind};

pub use report::{export, TraceReport, TraceRow};
pub use strategy::{Strategy, StrategyKind, DEFAULT_IN_OUT_P};
use strategy::Substitute;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PowMode {
    /// Expected work only; deterministic.
    #[default]
    Analytic,
    /// Really solve puzzles up to `real_solve_max_bits`, expected work above.
    Hybrid,
}

/// Everything a simulation run needs besides the strategy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub desk: DeskConfig,
    pub n_teachers: usize,
    pub teacher_seed: u64,
    pub accountant: AccountantConfig,
    pub gateway: GatewayConfig,
    pub pow: PowMode,
    pub real_solve_max_bits: u32,
    /// Measured at stack build when absent.
    pub t_hash_seconds: Option<f64>,
    /// Measured at stack build when absent.
    pub baseline_query_seconds: Option<f64>,
    pub in_out_p: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            desk: DeskConfig::default(),
            n_teachers: 50,
            teacher_seed: 0,
            accountant: AccountantConfig::default(),
            gateway: GatewayConfig {
                max_batch: 100_000,
                ..GatewayConfig::default()
            },
            pow: PowMode::Analytic,
            real_solve_max_bits: 20,
            t_hash_seconds: None,
            baseline_query_seconds: None,
            in_out_p: DEFAULT_IN_OUT_P,
        }
    }
}

/// Mean seconds per hash of a fixed 64-byte input, over `iterations` hashes.
pub fn measure_t_hash(alg: HashAlg, iterations: u32) -> f64 {
    let input = [0x5au8; 64];
    let iterations = iterations.max(1);
    let start = Instant::now();
    for _ in 0..iterations {
        std::hint::black_box(alg.hash(std::hint::black_box(&input)));
    }
    (start.elapsed().as_secs_f64() / f64::from(iterations)).max(1e-12)
}

pub const T_HASH_ITERATIONS: u32 = 1_000_000;

/// `sum 2^k * t_hash`.
pub fn expected_pow_seconds(bits: &[u32], t_hash: f64) -> f64 {
    bits.iter().map(|&k| 2f64.powi(k as i32) * t_hash).sum()
}

/// A trained backend plus everything needed to spin up fresh gateways.
#[derive(Clone)]
pub struct SimStack {
    pub data: Arc<DeskData>,
    pub backend: Arc<BackendBundle>,
    pub estimator: LeakageEstimator,
    pub calibrator: Arc<Calibrator>,
    pub config: SimConfig,
    pub t_hash_seconds: f64,
    /// Puzzle-free serving time per query.
    pub baseline_query_seconds: f64,
    pub exec: Exec,
}

impl std::fmt::Debug for SimStack {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SimStack")
            .field("config", &self.config)
            .field("t_hash_seconds", &self.t_hash_seconds)
            .field("baseline_query_seconds", &self.baseline_query_seconds)
            .finish_non_exhaustive()
    }
}

impl SimStack {
    pub fn build(config: SimConfig, calibrator: Calibrator) -> Result<Self, HarnessError> {
        if !(0.0..=1.0).contains(&config.in_out_p) {
            return Err(HarnessError::Config(format!("in_out_p {} outside [0, 1]", config.in_out_p)));
        }
        calibrator.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        let data = DeskData::generate(&config.desk)?;
        let backend = Arc::new(BackendBundle::train(data.train.clone(), config.n_teachers, config.teacher_seed)?);
        let estimator = LeakageEstimator::new(backend.clone(), config.accountant)?;
        let t_hash_seconds = match config.t_hash_seconds {
            Some(t) if t > 0.0 => t,
            Some(t) => return Err(HarnessError::Config(format!("t_hash_seconds {t} must be positive"))),
            None => measure_t_hash(config.gateway.hash_alg, T_HASH_ITERATIONS),
        };
        let mut stack = SimStack {
            data: Arc::new(data),
            backend,
            estimator,
            calibrator: Arc::new(calibrator),
            config,
            t_hash_seconds,
            baseline_query_seconds: 0.0,
            exec: Exec::default(),
        };
        stack.baseline_query_seconds = match stack.config.baseline_query_seconds {
            Some(t) if t > 0.0 => t,
            Some(t) => return Err(HarnessError::Config(format!("baseline_query_seconds {t} must be positive"))),
            None => stack.measure_baseline_query_seconds(100, 7)?,
        };
        Ok(stack)
    }

    /// Same backend and timings, different calibrator.
    pub fn with_calibrator(&self, calibrator: Calibrator) -> Self {
        SimStack {
            calibrator: Arc::new(calibrator),
            ..self.clone()
        }
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    /// Median puzzle-free serving time (cost estimation plus prediction) of a
    /// pool batch, divided by its size.
    pub fn measure_baseline_query_seconds(&self, batch: usize, reps: usize) -> Result<f64, HarnessError> {
        let pool = self.data.pool.features();
        let queries: Vec<Vec<f64>> = pool.iter_rows().take(batch.max(1)).map(<[f64]>::to_vec).collect();
        let mut times = Vec::with_capacity(reps.max(1));
        for _ in 0..reps.max(1) {
            let start = Instant::now();
            std::hint::black_box(self.estimator.batch_costs(&queries, self.exec)?);
            for q in &queries {
                std::hint::black_box(self.backend.victim_predict(q)?);
            }
            times.push(start.elapsed().as_secs_f64());
        }
        times.sort_by(f64::total_cmp);
        Ok((times[times.len() / 2] / queries.len() as f64).max(1e-12))
    }

    pub fn baseline_batch_seconds(&self, batch_size: usize) -> f64 {
        self.baseline_query_seconds * batch_size as f64
    }

    fn gateway(&self, seed: u64) -> Result<Gateway, HarnessError> {
        Ok(Gateway::new(self.estimator.clone(), self.calibrator.clone(), self.config.gateway.clone())?
            .with_seed(seed)
            .with_exec(self.exec))
    }
}

/// Runs one user end to end; see [`simulate_accounts`].
pub fn simulate(
    stack: &SimStack,
    strategy: impl Into<Strategy>,
    n_queries: usize,
    batch_size: usize,
    seed: u64,
) -> Result<TraceReport, HarnessError> {
    simulate_accounts(stack, strategy, n_queries, batch_size, seed, 1)
}

/// Runs one strategy, dealing whole batches round-robin over `accounts`
/// user ids. Rows follow the global batch order; `query_count` and
/// `cumulative_cost` are totals over all accounts.
pub fn simulate_accounts(
    stack: &SimStack,
    strategy: impl Into<Strategy>,
    n_queries: usize,
    batch_size: usize,
    seed: u64,
    accounts: usize,
) -> Result<TraceReport, HarnessError> {
    let strategy = strategy.into();
    if batch_size == 0 || accounts == 0 {
        return Err(HarnessError::Config("batch size and account count must be positive".into()));
    }
    if !(0.0..=1.0).contains(&strategy.in_out_p) {
        return Err(HarnessError::Config(format!("in_out_p {} outside [0, 1]", strategy.in_out_p)));
    }
    let gateway = stack.gateway(seed)?;
    let mut picker = Picker::new(stack, strategy, seed);
    let users: Vec<String> = (0..accounts).map(|a| format!("sim-{}-{a}", strategy.kind)).collect();
    let labels_only = stack.config.gateway.response == ResponseKind::Labels;

    let mut rows = Vec::new();
    let mut truncated = false;
    let mut measured = (stack.config.pow == PowMode::Hybrid).then_some(0.0f64);
    let (mut sent, mut cumulative) = (0usize, 0.0f64);
    let mut b = 0;
    while sent < n_queries {
        let want = batch_size.min(n_queries - sent);
        let queries = picker.next_batch(b, want)?;
        if queries.len() < want {
            truncated = true;
        }
        if queries.is_empty() {
            break;
        }
        let issued = gateway.issue(&users[b % accounts], queries.clone())?;
        let bits = issued.offer.bits;

        let answers: Vec<ProbVector> = if stack.config.pow == PowMode::Hybrid && bits <= stack.config.real_solve_max_bits {
            let challenge: Challenge = issued
                .offer
                .challenge
                .parse()
                .map_err(|e| HarnessError::Config(format!("gateway issued {e}")))?;
            let start = Instant::now();
            let solved = solve(&challenge, stack.config.gateway.hash_alg, None)
                .map_err(|e| HarnessError::Config(e.to_string()))?;
            if let Some(m) = measured.as_mut() {
                *m += start.elapsed().as_secs_f64();
            }
            let released = gateway.handle_solution(&issued.offer.puzzle_id, &solved.solution.to_string())?;
            match released.probs {
                Some(probs) => probs.into_iter().map(ProbVector::new).collect::<Result<_, _>>().map_err(BackendError::from)?,
                None => released.labels.iter().map(|&l| one_hot(l, stack.backend.class_count())).collect(),
            }
        } else {
            // Expected-time accounting: the puzzle is not solved, so the
            // answers come straight from the victim.
            if let Some(m) = measured.as_mut() {
                *m += expected_pow_seconds(&[bits], stack.t_hash_seconds);
            }
            queries
                .iter()
                .map(|q| {
                    let p = stack.backend.victim_predict(q)?;
                    Ok(if labels_only { one_hot(p.argmax(), stack.backend.class_count()) } else { p })
                })
                .collect::<Result<_, BackendError>>()?
        };
        picker.observe(&queries, &answers);

        let batch_cost: f64 = crate::accountant::compose(&issued.costs);
        sent += queries.len();
        cumulative += batch_cost;
        rows.push(TraceRow {
            query_count: sent as u64,
            batch_cost,
            cumulative_cost: if accounts == 1 { issued.ledger.cumulative_cost } else { cumulative },
            bits,
            expected_pow_seconds: expected_pow_seconds(&[bits], stack.t_hash_seconds),
        });
        b += 1;
        if truncated {
            break;
        }
    }

    let baseline_seconds = stack.baseline_query_seconds * sent as f64;
    let pow_seconds: f64 = rows.iter().map(|r| r.expected_pow_seconds).sum();
    Ok(TraceReport {
        strategy: strategy.kind,
        rows,
        baseline_seconds,
        pow_seconds,
        overhead_factor: if baseline_seconds > 0.0 { (baseline_seconds + pow_seconds) / baseline_seconds } else { 1.0 },
        t_hash_seconds: stack.t_hash_seconds,
        measured_pow_seconds: measured,
        truncated,
    })
}

/// Converts a trace into the `(query_count, cumulative_cost)` points the
/// legit model is fitted on.
pub fn legit_trace(report: &TraceReport) -> LegitTrace {
    LegitTrace {
        points: report
            .rows
            .iter()
            .map(|r| TracePoint {
                query_count: r.query_count,
                cumulative_cost: r.cumulative_cost,
            })
            .collect(),
    }
}

fn one_hot(label: usize, classes: usize) -> ProbVector {
    let mut p = vec![0.0; classes];
    p[label] = 1.0;
    ProbVector::new(p).expect("one-hot is normalized")
}

/// Chooses queries for one run. Pool strategies never repeat a pool row.
struct Picker<'a> {
    stack: &'a SimStack,
    strategy: Strategy,
    rng: ChaCha20Rng,
    /// Unused pool rows in random order.
    remaining: Vec<usize>,
    substitute: Substitute,
    /// Exact per-row cost, for `worst_case`.
    pool_costs: Option<Vec<f64>>,
}

impl<'a> Picker<'a> {
    fn new(stack: &'a SimStack, strategy: Strategy, seed: u64) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut remaining: Vec<usize> = (0..stack.data.pool.len()).collect();
        remaining.shuffle(&mut rng);
        Picker {
            stack,
            strategy,
            rng,
            remaining,
            substitute: Substitute::new(stack.backend.class_count(), stack.backend.input_width()),
            pool_costs: None,
        }
    }

    fn pool_row(&self, i: usize) -> Vec<f64> {
        self.stack.data.pool.features().row(i).to_vec()
    }

    fn take_random(&mut self, n: usize) -> Vec<Vec<f64>> {
        let n = n.min(self.remaining.len());
        let taken: Vec<usize> = self.remaining.drain(..n).collect();
        taken.into_iter().map(|i| self.pool_row(i)).collect()
    }

    /// Takes the `n` remaining rows with the lowest score; ties keep the
    /// shuffled order.
    fn take_lowest(&mut self, n: usize, scores: &[f64]) -> Vec<Vec<f64>> {
        let mut order: Vec<usize> = (0..self.remaining.len()).collect();
        order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
        let mut chosen: Vec<usize> = order.into_iter().take(n).collect();
        let rows = chosen.iter().map(|&pos| self.pool_row(self.remaining[pos])).collect();
        chosen.sort_unstable_by(|a, b| b.cmp(a));
        for pos in chosen {
            self.remaining.remove(pos);
        }
        rows
    }

    fn next_batch(&mut self, b: usize, n: usize) -> Result<Vec<Vec<f64>>, HarnessError> {
        let ood = |picker: &mut Self| {
            let m = picker.stack.data.sample_ood(n, &mut picker.rng);
            m.iter_rows().map(<[f64]>::to_vec).collect::<Vec<_>>()
        };
        Ok(match self.strategy.kind {
            StrategyKind::Standard => self.take_random(n),
            StrategyKind::OodRandom => ood(self),
            StrategyKind::InOut if self.strategy.in_out_is_ind(b) => self.take_random(n),
            StrategyKind::InOut => ood(self),
            StrategyKind::WorstCase => {
                if self.pool_costs.is_none() {
                    let pool = self.stack.data.pool.features();
                    let rows: Vec<&[f64]> = pool.iter_rows().collect();
                    self.pool_costs = Some(self.stack.estimator.batch_costs(&rows, self.stack.exec)?);
                }
                let costs = self.pool_costs.as_ref().expect("filled above");
                let scores: Vec<f64> = self.remaining.iter().map(|&i| costs[i]).collect();
                self.take_lowest(n, &scores)
            }
            kind @ (StrategyKind::EntropyAl | StrategyKind::GapAl | StrategyKind::EntropyRev) => {
                if self.substitute.is_empty() {
                    return Ok(self.take_random(n));
                }
                let score: fn(&ProbVector) -> f64 = match kind {
                    // Most uncertain first.
                    StrategyKind::EntropyAl => |p| -entropy_cost(p),
                    StrategyKind::GapAl => raw_gap,
                    // Most confident first.
                    _ => entropy_cost,
                };
                let pool = self.stack.data.pool.features();
                let substitute = &self.substitute;
                let scores = self.stack.exec.map(&self.remaining, |&i| score(&substitute.probs(pool.row(i))));
                self.take_lowest(n, &scores)
            }
        })
    }

    fn observe(&mut self, queries: &[Vec<f64>], answers: &[ProbVector]) {
        if self.strategy.kind.uses_substitute() {
            for (q, p) in queries.iter().zip(answers) {
                self.substitute.observe(q, p.as_slice());
            }
        }
    }
}
