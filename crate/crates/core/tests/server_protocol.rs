use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use powgate_core::accountant::{AccountantConfig, MetricKind, ProbVector, VoteHistogram};
use powgate_core::backend::{Backend, BackendError, TableBackend};
use powgate_core::calibration::{Calibrator, LinearModel};
use powgate_core::estimator::LeakageEstimator;
use powgate_core::hashcash::{solve, Challenge, HashAlg};
use powgate_core::server::{Gateway, GatewayConfig, GatewayError, ManualClock, Mode, ResponseKind};

/// Table backend that counts every prediction it hands out.
struct Counting {
    inner: TableBackend,
    predictions: AtomicUsize,
}

impl Backend for Counting {
    fn input_width(&self) -> usize {
        self.inner.input_width()
    }
    fn class_count(&self) -> usize {
        self.inner.class_count()
    }
    fn teacher_votes(&self, q: &[f64]) -> Result<VoteHistogram, BackendError> {
        self.inner.teacher_votes(q)
    }
    fn victim_predict(&self, q: &[f64]) -> Result<ProbVector, BackendError> {
        self.predictions.fetch_add(1, Ordering::SeqCst);
        self.inner.victim_predict(q)
    }
    fn pknn_votes(&self, q: &[f64], k: usize) -> Result<VoteHistogram, BackendError> {
        self.inner.pknn_votes(q, k)
    }
    fn supports(&self, m: MetricKind) -> bool {
        self.inner.supports(m)
    }
}

const TABLE: &str = "query_id,count_0,count_1,count_2\n0,250,0,0\n1,125,125,0\n2,10,30,210\n3,90,100,60\n";

/// Ideal bench (t = 2^k us), legit baseline at zero cost, x = 0 maps to 4 bits.
fn calibrator() -> Calibrator {
    let bits = LinearModel {
        slope: 1.0 / std::f64::consts::LN_2,
        intercept: -(1e-6f64).ln() / std::f64::consts::LN_2,
    };
    Calibrator::new(LinearModel { slope: 0.0, intercept: 0.0 }, bits, 16e-6).unwrap()
}

struct Stack {
    gateway: Arc<Gateway>,
    backend: Arc<Counting>,
    clock: Arc<ManualClock>,
}

fn stack(config: GatewayConfig) -> Stack {
    let backend = Arc::new(Counting {
        inner: TableBackend::read_csv(TABLE.as_bytes()).unwrap(),
        predictions: AtomicUsize::new(0),
    });
    let estimator = LeakageEstimator::new(
        backend.clone(),
        AccountantConfig { metric_kind: MetricKind::PateQ, ..Default::default() },
    )
    .unwrap();
    let clock = Arc::new(ManualClock::new(1_700_000_000));
    let gateway = Gateway::new(estimator, Arc::new(calibrator()), config)
        .unwrap()
        .with_clock(clock.clone())
        .with_seed(42);
    Stack { gateway: Arc::new(gateway), backend, clock }
}

fn batch(ids: &[u64]) -> Vec<Vec<f64>> {
    ids.iter().map(|&i| vec![i as f64]).collect()
}

fn solve_offer(challenge: &str) -> String {
    let c: Challenge = challenge.parse().unwrap();
    solve(&c, HashAlg::Sha1, None).unwrap().solution.to_string()
}

#[test]
fn round_trip_releases_argmax_labels() {
    let s = stack(GatewayConfig::default());
    let offer = s.gateway.handle_query("alice", batch(&[0, 1, 2, 3])).unwrap();
    assert_eq!(s.backend.predictions.load(Ordering::SeqCst), 0);
    assert_eq!(offer.puzzle_id.len(), 32);
    assert!(offer.challenge.starts_with(&format!("1:{}:1700000000:alice:", offer.bits)));
    let p = s.gateway.handle_solution(&offer.puzzle_id, &solve_offer(&offer.challenge)).unwrap();
    assert_eq!(p.labels, vec![0, 0, 2, 1]);
    assert_eq!(p.probs, None);
    assert_eq!(s.backend.predictions.load(Ordering::SeqCst), 4);
}

#[test]
fn logits_mode_returns_probabilities() {
    let s = stack(GatewayConfig { response: ResponseKind::Logits, ..Default::default() });
    let offer = s.gateway.handle_query("alice", batch(&[2])).unwrap();
    let p = s.gateway.handle_solution(&offer.puzzle_id, &solve_offer(&offer.challenge)).unwrap();
    let probs = p.probs.unwrap();
    assert_eq!(probs.len(), 1);
    assert!((probs[0][2] - 210.0 / 250.0).abs() < 1e-15);
}

#[test]
fn replay_expiry_and_unknown() {
    let s = stack(GatewayConfig::default());
    let offer = s.gateway.handle_query("alice", batch(&[1])).unwrap();
    let sol = solve_offer(&offer.challenge);
    s.gateway.handle_solution(&offer.puzzle_id, &sol).unwrap();
    let replay = s.gateway.handle_solution(&offer.puzzle_id, &sol).unwrap_err();
    assert_eq!((replay.clone(), replay.status()), (GatewayError::Replay, 409));

    let cost_before = s.gateway.ledgers().get("alice").unwrap().cumulative_cost;
    let late = s.gateway.handle_query("alice", batch(&[1])).unwrap();
    let after_issue = s.gateway.ledgers().get("alice").unwrap().cumulative_cost;
    assert!((after_issue - cost_before - 0.5).abs() < 1e-12, "cost accrues at issuance");
    s.clock.advance(600);
    let expired = s.gateway.handle_solution(&late.puzzle_id, &solve_offer(&late.challenge)).unwrap_err();
    assert_eq!((expired.clone(), expired.status()), (GatewayError::Expired, 410));
    assert_eq!(s.gateway.ledgers().get("alice").unwrap().cumulative_cost, after_issue);

    let unknown = s.gateway.handle_solution("00000000000000000000000000000000", "1").unwrap_err();
    assert_eq!((unknown.clone(), unknown.status()), (GatewayError::UnknownPuzzle, 404));
    assert_eq!(s.backend.predictions.load(Ordering::SeqCst), 1);
}

#[test]
fn invalid_solution_keeps_puzzle_open() {
    let s = stack(GatewayConfig::default());
    // The solver returns the smallest valid counter, so when that is not 0,
    // counter 0 is invalid.
    let offer = (0..)
        .map(|_| s.gateway.handle_query("bob", batch(&[0])).unwrap())
        .find(|o| solve_offer(&o.challenge) != "0")
        .unwrap();
    let err = s.gateway.handle_solution(&offer.puzzle_id, "0").unwrap_err();
    assert_eq!((err.clone(), err.status()), (GatewayError::InvalidSolution, 422));
    assert_eq!(s.backend.predictions.load(Ordering::SeqCst), 0);
    assert!(s.gateway.handle_solution(&offer.puzzle_id, &solve_offer(&offer.challenge)).is_ok());
    assert!(matches!(
        s.gateway.handle_solution(&offer.puzzle_id, "01"),
        Err(GatewayError::BadRequest(_))
    ));
}

#[test]
fn rejected_requests() {
    let s = stack(GatewayConfig { max_batch: 3, ..Default::default() });
    let err = |r: Result<_, GatewayError>| r.unwrap_err().status();
    assert_eq!(err(s.gateway.handle_query("a", vec![])), 400);
    assert_eq!(err(s.gateway.handle_query("a", batch(&[0, 0, 0, 0]))), 413);
    assert_eq!(err(s.gateway.handle_query("a", vec![vec![0.0, 1.0]])), 400);
    assert_eq!(err(s.gateway.handle_query("a", batch(&[9]))), 400);
    assert_eq!(err(s.gateway.handle_query("a:b", batch(&[0]))), 400);
    assert_eq!(err(s.gateway.handle_query("", batch(&[0]))), 400);
    assert!(s.gateway.ledgers().is_empty(), "rejected batches accrue nothing");
}

#[test]
fn repeated_costly_batches_raise_difficulty() {
    let s = stack(GatewayConfig::default());
    let first = s.gateway.handle_query("mallory", batch(&[1; 10])).unwrap();
    assert_eq!(first.bits, 4);
    let mut last = first.bits;
    for _ in 0..49 {
        last = s.gateway.handle_query("mallory", batch(&[1; 10])).unwrap().bits;
    }
    assert!(last > first.bits, "{last}");
    let ledger = s.gateway.ledgers().get("mallory").unwrap();
    assert_eq!(ledger.query_count, 500);
    assert!((ledger.cumulative_cost - 250.0).abs() < 1e-9);
}

#[test]
fn identical_sequences_identical_ledgers() {
    let s = stack(GatewayConfig::default());
    for ids in [&[0, 1][..], &[2, 3, 3], &[1]] {
        s.gateway.handle_query("u1", batch(ids)).unwrap();
        s.gateway.handle_query("u2", batch(ids)).unwrap();
    }
    let (a, b) = (s.gateway.ledgers().get("u1").unwrap(), s.gateway.ledgers().get("u2").unwrap());
    assert_eq!((a.query_count, a.cumulative_cost), (b.query_count, b.cumulative_cost));
}

#[test]
fn concurrent_batches_sum_serially() {
    let s = stack(GatewayConfig::default());
    std::thread::scope(|scope| {
        for t in 0..8 {
            let g = &s.gateway;
            scope.spawn(move || {
                for i in 0..50 {
                    g.handle_query("eve", batch(&[((t + i) % 4) as u64])).unwrap();
                }
            });
        }
    });
    let serial: f64 = (0..8)
        .flat_map(|t| (0..50).map(move |i| (t + i) % 4))
        .map(|id| s.gateway.estimator().query_cost(&[id as f64]).unwrap())
        .sum();
    let ledger = s.gateway.ledgers().get("eve").unwrap();
    assert_eq!(ledger.query_count, 400);
    assert!((ledger.cumulative_cost - serial).abs() < 1e-9);
}

#[test]
fn racing_submissions_release_once() {
    let s = stack(GatewayConfig::default());
    let offer = s.gateway.handle_query("alice", batch(&[0, 1])).unwrap();
    let sol = solve_offer(&offer.challenge);
    let outcomes: Vec<bool> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..16)
            .map(|_| scope.spawn(|| s.gateway.handle_solution(&offer.puzzle_id, &sol).is_ok()))
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    assert_eq!(outcomes.iter().filter(|&&ok| ok).count(), 1);
    assert_eq!(s.backend.predictions.load(Ordering::SeqCst), 2);
}

#[test]
fn stateless_bits_carry_summed_work() {
    let s = stack(GatewayConfig { mode: Mode::Stateless, ..Default::default() });
    let cal = s.gateway.calibrator();
    let costs: Vec<f64> = [0u64, 1, 1, 3]
        .iter()
        .map(|&id| s.gateway.estimator().query_cost(&[id as f64]).unwrap())
        .collect();
    let work: f64 = costs.iter().map(|&c| 2f64.powi(cal.stateless_difficulty(c) as i32)).sum();
    let offer = s.gateway.handle_query("sybil", batch(&[0, 1, 1, 3])).unwrap();
    assert_eq!(offer.bits, work.log2().round() as u32);
}
