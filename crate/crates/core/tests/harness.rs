use std::time::Instant;

use powgate_core::accountant::{AccountantConfig, MetricKind};
use powgate_core::calibration::{Calibrator, LinearModel};
use powgate_core::desk::DeskConfig;
use powgate_core::harness::{
    expected_pow_seconds, export, measure_t_hash, simulate, simulate_accounts, PowMode, SimConfig, SimStack,
    StrategyKind, TraceReport,
};
use powgate_core::hashcash::{generate_challenge, solve, HashAlg};
use powgate_core::server::{GatewayConfig, Mode, ResponseKind};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn config(desk: DeskConfig, metric_kind: MetricKind, sigma: f64) -> SimConfig {
    SimConfig {
        desk,
        accountant: AccountantConfig { metric_kind, sigma, ..Default::default() },
        t_hash_seconds: Some(1e-7),
        baseline_query_seconds: Some(1e-5),
        ..Default::default()
    }
}

fn stack(cfg: SimConfig) -> SimStack {
    SimStack::build(cfg, Calibrator::uncalibrated()).unwrap()
}

/// Ideal bench line (t = 2^k us) with x = 0 at 4 bits and a zero legit line.
fn steep_calibrator() -> Calibrator {
    let bits = LinearModel {
        slope: 1.0 / std::f64::consts::LN_2,
        intercept: -(1e-6f64).ln() / std::f64::consts::LN_2,
    };
    let mut c = Calibrator::new(LinearModel { slope: 0.0, intercept: 0.0 }, bits, 16e-6).unwrap();
    c.a = 1.5;
    c.a_q = 1.5;
    c.k_max = 30;
    c
}

#[test]
fn legit_cost_grows_linearly() {
    // Smooth per-query metrics only: consensus costs are heavy-tailed, and a
    // single borderline query can outweigh a whole batch of confident ones.
    let cases = [
        (DeskConfig::ten_class(), MetricKind::Entropy, 10),
        (DeskConfig::ten_class(), MetricKind::Gap, 10),
        (DeskConfig::two_class(), MetricKind::Entropy, 50),
    ];
    for (desk, metric, batch) in cases {
        let s = stack(config(desk.clone(), metric, 2.0));
        for seed in 0..3 {
            let r = simulate(&s, StrategyKind::Standard, 1000, batch, seed).unwrap();
            let tail: Vec<f64> = r.rows.iter().skip(10).map(|r| r.batch_cost).collect();
            let mut sorted = tail.clone();
            sorted.sort_by(f64::total_cmp);
            let median = sorted[sorted.len() / 2];
            for c in tail {
                assert!((c / median - 1.0).abs() <= 0.5, "{} classes, {metric}: {c} vs median {median}", desk.classes);
            }
        }
    }
}

#[test]
fn cost_ordering_at_checkpoints() {
    let s = stack(config(DeskConfig::ten_class(), MetricKind::PateQ, 2.0));
    for seed in 0..3 {
        let standard = simulate(&s, StrategyKind::Standard, 1000, 100, seed).unwrap();
        let ood = simulate(&s, StrategyKind::OodRandom, 1000, 100, seed).unwrap();
        let worst = simulate(&s, StrategyKind::WorstCase, 1000, 100, seed).unwrap();
        for q in (100..=1000).step_by(100) {
            let (o, st, w) = (ood.cost_at(q), standard.cost_at(q), worst.cost_at(q));
            assert!(o >= 2.0 * st, "seed {seed} at {q}: ood {o} standard {st}");
            assert!(st >= w, "seed {seed} at {q}: standard {st} worst {w}");
        }
    }
}

#[test]
fn adaptive_attackers_order() {
    let s = stack(config(DeskConfig::ten_class(), MetricKind::PateQ, 10.0));
    let cost = |k| simulate(&s, k, 1000, 100, 3).unwrap().cumulative_cost();
    let (standard, al, rev, worst) = (
        cost(StrategyKind::Standard),
        cost(StrategyKind::EntropyAl),
        cost(StrategyKind::EntropyRev),
        cost(StrategyKind::WorstCase),
    );
    assert!(al > standard, "entropy_al {al} standard {standard}");
    assert!(rev < al, "entropy_rev {rev} entropy_al {al}");
    assert!(worst <= standard && worst <= rev, "worst {worst}");
    let in_out = simulate(&s, StrategyKind::InOut, 1000, 100, 3).unwrap();
    let ood = simulate(&s, StrategyKind::OodRandom, 1000, 100, 3).unwrap();
    // Batch 10 is the only in-distribution one.
    assert_eq!(in_out.rows[..9], ood.rows[..9]);
    assert!(in_out.rows[9].batch_cost < ood.rows[9].batch_cost);
}

#[test]
fn deterministic_reports() {
    let s = stack(config(DeskConfig::two_class(), MetricKind::PateQ, 10.0)).with_calibrator(steep_calibrator());
    for kind in StrategyKind::ALL {
        let a = simulate(&s, kind, 300, 30, 9).unwrap();
        assert_eq!(a, simulate(&s, kind, 300, 30, 9).unwrap(), "{kind}");
        assert!(a.rows.windows(2).all(|w| w[1].cumulative_cost >= w[0].cumulative_cost));
        assert_eq!(a.total_queries(), 300);
        assert!(!a.truncated);
    }
}

#[test]
fn pool_exhaustion_truncates() {
    let desk = DeskConfig { pool_per_class: 30, ..DeskConfig::two_class() };
    let s = stack(config(desk, MetricKind::PateQ, 2.0));
    for kind in [StrategyKind::Standard, StrategyKind::EntropyAl, StrategyKind::WorstCase] {
        let r = simulate(&s, kind, 100, 25, 0).unwrap();
        assert!(r.truncated, "{kind}");
        assert_eq!(r.total_queries(), 60);
    }
    assert!(!simulate(&s, StrategyKind::OodRandom, 100, 25, 0).unwrap().truncated);
}

#[test]
fn expected_pow_examples() {
    assert!((expected_pow_seconds(&[0, 0, 0], 1e-6) - 3e-6).abs() < 1e-18);
    assert_eq!(expected_pow_seconds(&[], 1e-6), 0.0);
    assert!((expected_pow_seconds(&[10, 1], 1e-6) - 1026e-6).abs() < 1e-15);
}

#[test]
fn real_solving_matches_expectation() {
    let t_hash = measure_t_hash(HashAlg::Sha1, 1_000_000);
    let mut rng = ChaCha20Rng::seed_from_u64(5);
    let reps = 200;
    let (mut seconds, mut trials) = (0.0, 0u64);
    for _ in 0..reps {
        let c = generate_challenge("harness", 10, 0, &mut rng).unwrap();
        let start = Instant::now();
        trials += solve(&c, HashAlg::Sha1, None).unwrap().trials;
        seconds += start.elapsed().as_secs_f64();
    }
    let analytic = expected_pow_seconds(&[10], t_hash);
    let measured = seconds / f64::from(reps);
    let ratio = measured / analytic;
    assert!((0.5..=2.0).contains(&ratio), "measured {measured:.3e}s analytic {analytic:.3e}s");
    let trial_ratio = trials as f64 / f64::from(reps) / 1024.0;
    assert!((0.5..=2.0).contains(&trial_ratio), "{trial_ratio}");
}

#[test]
fn hybrid_mode_solves_small_puzzles() {
    let mut cfg = config(DeskConfig::two_class(), MetricKind::PateQ, 10.0);
    cfg.gateway = GatewayConfig { response: ResponseKind::Logits, max_batch: 1000, ..Default::default() };
    let analytic_stack = SimStack::build(cfg.clone(), steep_calibrator()).unwrap();
    let analytic = simulate(&analytic_stack, StrategyKind::EntropyAl, 200, 20, 4).unwrap();
    cfg.pow = PowMode::Hybrid;
    cfg.real_solve_max_bits = 8;
    let s = SimStack::build(cfg, steep_calibrator()).unwrap();
    let r = simulate(&s, StrategyKind::EntropyAl, 200, 20, 4).unwrap();
    assert!(r.measured_pow_seconds.unwrap() > 0.0);
    assert!(r.rows.iter().any(|row| row.bits <= 8));
    // Same answers reach the attacker either way, so the queries match.
    let costs = |t: &TraceReport| t.rows.iter().map(|r| r.batch_cost).collect::<Vec<_>>();
    assert_eq!(costs(&r), costs(&analytic));
}

#[test]
fn stateless_split_preserves_work() {
    let mut cfg = config(DeskConfig::ten_class(), MetricKind::PateQ, 10.0);
    cfg.gateway.mode = Mode::Stateless;
    let s = SimStack::build(cfg.clone(), steep_calibrator()).unwrap();
    for kind in [StrategyKind::OodRandom, StrategyKind::Standard] {
        let one = simulate(&s, kind, 1000, 50, 2).unwrap();
        let ten = simulate_accounts(&s, kind, 1000, 50, 2, 10).unwrap();
        assert!(one.pow_seconds > 0.0);
        assert!((ten.pow_seconds / one.pow_seconds - 1.0).abs() <= 0.01, "{kind}");
    }
    // The stateful ledger is what splitting defeats.
    cfg.gateway.mode = Mode::Stateful;
    let mut calibrator = steep_calibrator();
    calibrator.a = 1.0075;
    let s = SimStack::build(cfg, calibrator).unwrap();
    let one = simulate(&s, StrategyKind::OodRandom, 1000, 50, 2).unwrap();
    let ten = simulate_accounts(&s, StrategyKind::OodRandom, 1000, 50, 2, 10).unwrap();
    assert!(ten.pow_seconds < 0.5 * one.pow_seconds);
}

#[test]
fn export_writes_csvs_and_plot() {
    let s = stack(config(DeskConfig::two_class(), MetricKind::PateQ, 10.0));
    let reports = vec![
        simulate(&s, StrategyKind::Standard, 200, 20, 0).unwrap(),
        simulate(&s, StrategyKind::OodRandom, 200, 20, 0).unwrap(),
    ];
    let dir = tempfile::tempdir().unwrap();
    let written = export(&reports, dir.path(), true).unwrap();
    let names: Vec<String> = written.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
    assert_eq!(names, ["standard.csv", "ood_random.csv", "summary.json", "cost_and_bits.svg"]);
    for report in &reports {
        let file = std::fs::File::open(dir.path().join(format!("{}.csv", report.strategy))).unwrap();
        assert_eq!(TraceReport::read_rows(file).unwrap(), report.rows);
    }
    let svg = std::fs::read_to_string(dir.path().join("cost_and_bits.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.contains("ood_random"));
    let summary: Vec<TraceReport> =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary, reports);
}

#[test]
fn single_row_csv() {
    let s = stack(config(DeskConfig::two_class(), MetricKind::PateQ, 10.0));
    let r = simulate(&s, StrategyKind::Standard, 5, 10, 0).unwrap();
    assert_eq!(r.rows.len(), 1);
    let mut buf = Vec::new();
    r.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert_eq!(text.lines().count(), 2);
    assert!(text.starts_with("query_count,batch_cost,cumulative_cost,bits,expected_pow_seconds\n"));
    assert_eq!(TraceReport::read_rows(buf.as_slice()).unwrap(), r.rows);
}
