//! Acceptance suite: one PASS/FAIL line per criterion, then a single
//! assertion that all of them passed. Run with `--nocapture` to see the
//! lines.

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::Rng as _;
use sfdqn::experiment::{preset, presets, run, ExperimentConfig, RunSummary};
use sfdqn::mlp::{NetShape, NetworkParams};
use sfdqn::rng::from_seed;
use sfdqn::theory::{rate_fit_theta, TheoryConstants};
use sfdqn::trainer::KappaSchedule;
use sfdqn::transfer::{thm3_bound, thm4_bound};
use sfdqn::{EnvConfig, SyntheticMDP};

struct Outcome {
    id: usize,
    name: &'static str,
    passed: bool,
    detail: String,
}

struct Ledger(Vec<Outcome>);

impl Ledger {
    fn record(&mut self, id: usize, name: &'static str, passed: bool, elapsed: Duration, budget: Duration, detail: String) {
        let in_time = elapsed <= budget;
        let passed = passed && in_time;
        let detail = format!("{detail}; {:.1} s of {} s{}", elapsed.as_secs_f64(), budget.as_secs(), if in_time { "" } else { " OVER BUDGET" });
        println!("criterion {id} {name}: {} ({detail})", if passed { "PASS" } else { "FAIL" });
        self.0.push(Outcome { id, name, passed, detail });
    }
}

fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

fn run_preset(name: &str, dir: &Path) -> (RunSummary, Duration) {
    let src = preset(name).unwrap().toml;
    let cfg = ExperimentConfig::parse(src).unwrap();
    let t0 = Instant::now();
    let summary = run(&cfg, src, dir).unwrap_or_else(|e| panic!("{name}: {e}"));
    (summary, t0.elapsed())
}

/// Bytes of every CSV after its comment lines.
fn csv_bodies(summary: &RunSummary) -> Vec<Vec<u8>> {
    summary
        .csv_files
        .iter()
        .map(|f| {
            let text = fs::read_to_string(summary.out_dir.join(f)).unwrap();
            text.lines().filter(|l| !l.starts_with('#')).collect::<Vec<_>>().join("\n").into_bytes()
        })
        .collect()
}

fn planted_realizability(ledger: &mut Ledger) {
    // The budget applies per generated instance.
    let mut worst: f64 = 0.0;
    let mut slowest = Duration::ZERO;
    for seed in 0..10 {
        let t0 = Instant::now();
        let mdp = SyntheticMDP::generate(&EnvConfig::desk(seed)).unwrap();
        worst = worst.max(mdp.sf_bellman_residual(&mdp.planted_sf_table(), &mdp.planted_policy()));
        slowest = slowest.max(t0.elapsed());
    }
    ledger.record(
        1,
        "planted realizability",
        worst < 1e-10,
        slowest,
        secs(1),
        format!("max residual {worst:e} over 10 desk MDPs, time is the slowest instance"),
    );
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale = a.iter().chain(b).map(|x| x * x).sum::<f64>().sqrt().max(1e-8);
    diff / scale
}

/// Central differences of `f` at every coordinate of `net`.
fn fd_grad(net: &NetworkParams, f: impl Fn(&NetworkParams) -> f64) -> Vec<f64> {
    let h = 1e-6;
    (0..net.len())
        .map(|i| {
            let (mut up, mut down) = (net.clone(), net.clone());
            up.as_mut_slice()[i] += h;
            down.as_mut_slice()[i] -= h;
            (f(&up) - f(&down)) / (2.0 * h)
        })
        .collect()
}

fn gradient_oracle(ledger: &mut Ledger) {
    let t0 = Instant::now();
    let mut rng = from_seed(2024);
    let (mut pairs, mut worst): (usize, f64) = (0, 0.0);
    while pairs < 100 {
        let input_dim = rng.gen_range(1..=5);
        let widths: Vec<usize> = (0..rng.gen_range(1..=3)).map(|_| rng.gen_range(1..=6)).collect();
        let head_dim = rng.gen_range(1..=3);
        let net = NetworkParams::random(NetShape::new(input_dim, widths).unwrap(), head_dim, &mut rng);
        let x: Vec<f64> = (0..input_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        if net.min_abs_preactivation(&x) < 1e-3 {
            continue;
        }
        let err = if head_dim == 1 {
            let g = net.grad_scalar(&x).unwrap();
            rel_err(g.as_slice(), &fd_grad(&net, |n| n.forward_scalar(&x).unwrap()))
        } else {
            let up: Vec<f64> = (0..head_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let g = net.grad_sf(&x, &up).unwrap();
            let f = |n: &NetworkParams| n.forward_sf(&x).unwrap().iter().zip(&up).map(|(a, b)| a * b).sum::<f64>();
            rel_err(g.as_slice(), &fd_grad(&net, f))
        };
        worst = worst.max(err);
        pairs += 1;
    }
    ledger.record(2, "gradient oracle", worst < 1e-4, t0.elapsed(), secs(5), format!("max relative error {worst:e} over {pairs} pairs"));
}

fn w_linear_rate(ledger: &mut Ledger) {
    let t0 = Instant::now();
    let mdp = SyntheticMDP::generate(&EnvConfig::desk(0)).unwrap();
    let c = TheoryConstants::compute(&mdp, None, &KappaSchedule::PhiMaxNormalized { scale: 1.0 }).unwrap();
    let (ratio, r2) = (c.full_batch_w_ratio.unwrap_or(f64::NAN), c.full_batch_w_r2.unwrap_or(f64::NAN));
    let ok = ratio < 1.0 && r2 > 0.95 && (ratio - c.w_spectral_factor).abs() <= 0.05;
    ledger.record(
        3,
        "reward-mapping linear rate",
        ok,
        t0.elapsed(),
        secs(30),
        format!("fitted ratio {ratio:.4}, spectral factor {:.4}, R² {r2:.4}", c.w_spectral_factor),
    );
}

fn theta_rate(ledger: &mut Ledger, s: &RunSummary, elapsed: Duration) {
    let slope = s.median_over_seeds(|sd| rate_fit_theta(&sd.logs[0]).map_or(f64::NAN, |f| f.loglog_slope));
    let ratio = s.median_over_seeds(|sd| sd.theory.theta_error_ratio.unwrap_or(f64::NAN));
    let ok = (-1.4..=-0.5).contains(&slope) && ratio < 0.25 && s.seeds.len() == 5;
    ledger.record(4, "network sublinear rate", ok, elapsed, secs(180), format!("median tail slope {slope:.3}, median e(T)/e(T/10) {ratio:.3}"));
}

fn gpi_ordering(ledger: &mut Ledger, s: &RunSummary, elapsed: Duration) {
    let distances: Vec<f64> = s.gpi.iter().map(|r| r.distance).collect();
    let ordered = s.gpi.iter().all(|r| r.with_gpi_mean >= r.without_gpi_mean);
    let (first, last) = (s.gpi.first().unwrap(), s.gpi.last().unwrap());
    let ok = distances == [0.01, 0.1, 1.0, 10.0] && ordered && first.gap() > last.gap() && first.seeds == 5;
    let table: Vec<String> =
        s.gpi.iter().map(|r| format!("{}: {:.3} vs {:.3}", r.distance, r.with_gpi_mean, r.without_gpi_mean)).collect();
    ledger.record(5, "GPI effect ordering", ok, elapsed, secs(300), format!("with vs without GPI {}", table.join(", ")));
}

fn bound_soundness(ledger: &mut Ledger, dir: &Path) {
    let src = preset("fig_transfer_sf_vs_dqn")
        .unwrap()
        .toml
        .replace("seeds = [0, 1, 2, 3, 4]", "seeds = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9]")
        .replace("[dqn]\neta = { kind = \"inverse_time\", eta0 = 10.0 }\n", "");
    let cfg = ExperimentConfig::parse(&src).unwrap();
    assert!(cfg.dqn.is_none());
    let t0 = Instant::now();
    let s = run(&cfg, &src, dir).unwrap();
    let rows: Vec<_> = s.seeds.iter().flat_map(|sd| sd.transfer.iter()).collect();
    let violations = rows.iter().filter(|r| r.sf_transfer_error > r.thm3_bound).count();
    let tightest = rows.iter().map(|r| r.sf_transfer_error / r.thm3_bound).fold(0.0, f64::max);
    ledger.record(
        6,
        "transfer bound soundness",
        rows.len() == 10 && violations == 0,
        t0.elapsed(),
        secs(120),
        format!("{violations} violations on {} instances, largest error/bound {tightest:.4}", rows.len()),
    );
}

fn sf_beats_dqn(ledger: &mut Ledger, s: &RunSummary, elapsed: Duration) {
    let sf = s.median_over_seeds(|sd| sd.transfer[0].sf_transfer_error);
    let dqn = s.median_over_seeds(|sd| sd.transfer[0].dqn_transfer_error.unwrap_or(f64::NAN));
    let mdp = SyntheticMDP::generate(&EnvConfig::desk(0)).unwrap();
    let (a, b) = ([0.6, 0.8, 0.0, 0.0], [0.0, 0.6, 0.8, 0.0]);
    let first_ratio = thm3_bound(&mdp, &[&a], &b, 0.0).unwrap() / thm4_bound(&mdp, &[&a], &b, 0.0).unwrap();
    let gamma = mdp.gamma();
    let ok = sf <= dqn && (first_ratio - gamma).abs() <= 1e-12 && gamma == 0.9 && s.seeds.len() == 5;
    ledger.record(
        7,
        "SF beats DQN in transfer",
        ok,
        elapsed,
        secs(300),
        format!("median error SF {sf:.4} vs DQN {dqn:.4}; first-term bound ratio {first_ratio} at gamma {gamma}"),
    );
}

fn local_convexity(ledger: &mut Ledger, s: &RunSummary, elapsed: Duration) {
    let all: Vec<f64> = s.seeds.iter().flat_map(|sd| sd.convexity.iter().map(|h| h.min_eig)).collect();
    let min = all.iter().copied().fold(f64::INFINITY, f64::min);
    let ok = !all.is_empty() && min > 0.0 && s.seeds.iter().all(|sd| sd.convexity.len() == 1);
    ledger.record(8, "local convexity", ok, elapsed, secs(60), format!("smallest Hessian eigenvalue {min:e} over {} instances", all.len()));
}

#[test]
fn acceptance() {
    let root = tempfile::tempdir().unwrap();
    let mut ledger = Ledger(Vec::new());
    planted_realizability(&mut ledger);
    gradient_oracle(&mut ledger);
    w_linear_rate(&mut ledger);

    let mut first = Vec::new();
    let mut identical = Vec::new();
    let mut slowest = Duration::ZERO;
    for p in presets() {
        let (a, ta) = run_preset(p.name, &root.path().join(format!("{}_a", p.name)));
        let (b, tb) = run_preset(p.name, &root.path().join(format!("{}_b", p.name)));
        slowest = slowest.max(ta + tb);
        identical.push((p.name, a.csv_files == b.csv_files && csv_bodies(&a) == csv_bodies(&b)));
        first.push((p.name, a, ta));
    }
    let get = |name: &str| first.iter().find(|(n, _, _)| *n == name).map(|(_, s, t)| (s, *t)).unwrap();

    let (s, t) = get("thm1_rates");
    theta_rate(&mut ledger, s, t);
    let (s, t) = get("table2_desk");
    gpi_ordering(&mut ledger, s, t);
    bound_soundness(&mut ledger, &root.path().join("bounds"));
    let (s, t) = get("fig_transfer_sf_vs_dqn");
    sf_beats_dqn(&mut ledger, s, t);
    let (s, t) = get("lemma_convexity");
    local_convexity(&mut ledger, s, t);

    let differing: Vec<&str> = identical.iter().filter(|(_, same)| !same).map(|(n, _)| *n).collect();
    ledger.record(
        9,
        "determinism",
        differing.is_empty(),
        slowest,
        secs(600),
        format!("{} presets run twice, differing: {differing:?}", identical.len()),
    );

    let failed: Vec<String> =
        ledger.0.iter().filter(|o| !o.passed).map(|o| format!("{} {} ({})", o.id, o.name, o.detail)).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
