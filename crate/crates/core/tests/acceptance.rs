//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Experiments use the default reference task.

mod common;

use std::collections::{BTreeMap, VecDeque};
use std::time::{Duration, Instant};

use adacons::consistency::{akc_term, arc_select, arc_term, ArcBuffers, Bandwidth, DivergenceMode, GatedBatch, ReplayBuffer};
use adacons::numerics::{entropy_rows, mmd2, softmax_rows};
use adacons::pipeline::{fine_tune, prepare_data, pretrain_source, run_pipeline, SourceModel, TaskData};
use adacons::training::{cosine_lr, sgd_step, OptimState};
use adacons::{ExperimentConfig, HeadInit, MetricsLog, RunOutput, Tensor2, METRICS_HEADER};
use common::{random_matrix, Coords};
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn secs(d: Duration) -> String {
    format!("{:.1} s", d.as_secs_f64())
}

// ---------------------------------------------------------------- c1

fn mmd_oracle(v: &Tensor2, u: &Tensor2, sigmas: &[f64]) -> f64 {
    let mut total = 0.0;
    for &s in sigmas {
        let k = |a: &[f64], b: &[f64]| {
            let mut d2 = 0.0;
            for t in 0..a.len() {
                d2 += (a[t] - b[t]) * (a[t] - b[t]);
            }
            (-d2 / (2.0 * s * s)).exp()
        };
        let mean = |x: &Tensor2, y: &Tensor2| {
            let mut acc = 0.0;
            for i in 0..x.rows() {
                for j in 0..y.rows() {
                    acc += k(x.row(i), y.row(j));
                }
            }
            acc / (x.rows() * y.rows()) as f64
        };
        total += mean(v, v) + mean(u, u) - 2.0 * mean(v, u);
    }
    total
}

fn c1_mmd_oracle() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let (m, n, d) = (rng.random_range(1..=16), rng.random_range(1..=16), rng.random_range(1..=8));
        let v = random_matrix(m, d, 2.0, &mut rng);
        let u = random_matrix(n, d, 2.0, &mut rng);
        let sigmas: Vec<f64> = (0..rng.random_range(1..=3)).map(|_| rng.random_range(0.2..3.0)).collect();
        worst = worst.max((mmd2(&v, &u, &sigmas).unwrap() - mmd_oracle(&v, &u, &sigmas)).abs());
    }
    let t = start.elapsed();
    verdict(
        worst <= 1e-10 && t < Duration::from_secs(5),
        format!("200 instances, max |Δ| {worst:.1e} (tol 1e-10), {} (limit 5 s)", secs(t)),
    )
}

// ---------------------------------------------------------------- c2

fn c2_gradients() -> Verdict {
    let start = Instant::now();
    let cases = common::suite::all_cases(Coords::Sample(200, 202));
    let t = start.elapsed();
    let checked: usize = cases.iter().map(|(_, r)| r.checked).sum();
    let worst = cases.iter().map(|(_, r)| r.worst).fold(0.0, f64::max);
    let failed: Vec<&str> = cases.iter().filter(|(_, r)| !r.ok()).map(|(n, _)| n.as_str()).collect();
    verdict(
        failed.is_empty() && t < Duration::from_secs(60),
        format!(
            "{} cases, {checked} entries at h=1e-5, worst rel err {worst:.1e} (tol 1e-4), failing {failed:?}, {} (limit 60 s)",
            cases.len(),
            secs(t)
        ),
    )
}

// ---------------------------------------------------------------- c3

fn probs_strategy() -> impl Strategy<Value = (Tensor2, usize)> {
    (1usize..24, 2usize..11).prop_flat_map(|(rows, classes)| {
        proptest::collection::vec(-6.0f64..6.0, rows * classes).prop_map(move |logits| {
            let t = Tensor2::from_vec(rows, classes, logits).unwrap();
            (softmax_rows(&t).unwrap(), classes)
        })
    })
}

fn c3_gates() -> Verdict {
    let mut runner = TestRunner::new(PropConfig { cases: 100, failure_persistence: None, ..PropConfig::default() });
    let eps_grid = proptest::collection::vec(0.0f64..1.0, 2..6);
    let result = runner.run(&(probs_strategy(), eps_grid), |((probs, classes), mut ratios)| {
        let ln_c = (classes as f64).ln();
        let n = probs.rows();
        // ARC gate on target predictions
        prop_assert!(arc_select(&probs, 0.0).is_empty());
        prop_assert_eq!(arc_select(&probs, ln_c).len(), n);
        ratios.sort_by(f64::total_cmp);
        for w in ratios.windows(2) {
            let lo = arc_select(&probs, w[0] * ln_c);
            let hi = arc_select(&probs, w[1] * ln_c);
            prop_assert!(lo.iter().all(|i| hi.contains(i)));
        }
        let feats = Tensor2::filled(n, 3, 1.0);
        let mut bufs = ArcBuffers::new(64, 64).unwrap();
        let t = arc_term(&feats, &probs, &feats.scale(2.0), &probs, 0.0, &mut bufs, 0, &Bandwidth::Median).unwrap();
        prop_assert_eq!(t.value, 0.0);
        prop_assert_eq!(t.labeled_fraction, 0.0);
        prop_assert!(t.grad_labeled.data().iter().chain(t.grad_unlabeled.data()).all(|g| *g == 0.0));
        // AKC gate on source predictions
        let entropies = entropy_rows(&probs);
        let target = Tensor2::filled(n, 3, 0.5);
        for mode in [DivergenceMode::Mse, DivergenceMode::Kl] {
            let closed = GatedBatch::new(target.clone(), feats.clone(), entropies.clone(), 0.0, 0).unwrap();
            let term = akc_term(&closed, mode).unwrap();
            prop_assert_eq!(term.value, 0.0);
            prop_assert_eq!(term.selected_fraction, 0.0);
            prop_assert!(term.grad_features.data().iter().all(|g| *g == 0.0));
            let open = GatedBatch::new(target.clone(), feats.clone(), entropies.clone(), ln_c, 0).unwrap();
            prop_assert_eq!(akc_term(&open, mode).unwrap().selected_fraction, 1.0);
        }
        Ok(())
    });
    verdict(
        result.is_ok(),
        match result {
            Ok(()) => "100 random batches: ε=0 selects nothing and zeroes both terms, ε=ln C selects all, selections nested in ε".into(),
            Err(e) => format!("{e}"),
        },
    )
}

// ---------------------------------------------------------------- c4

fn buffer_interleaving(seed: u64) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let capacity = rng.random_range(1..=8);
    let k = rng.random_range(1..=8);
    let dim = rng.random_range(1..=3);
    let mut buf = ReplayBuffer::new(capacity, k).unwrap();
    let mut reference: VecDeque<Vec<f64>> = VecDeque::new();
    for step in 0..rng.random_range(1..=30u64) {
        if rng.random_bool(0.6) {
            let rows = random_matrix(rng.random_range(0..=5), dim, 1.0, &mut rng);
            for r in rows.iter_rows() {
                reference.push_back(r.to_vec());
                if reference.len() > capacity {
                    reference.pop_front();
                }
            }
            if rng.random_bool(0.5) {
                buf.update(&rows, step).unwrap();
            } else {
                let fetched = buf.update_and_fetch(&rows, step).unwrap();
                for (i, cur) in fetched.current.iter().enumerate() {
                    if let Some(c) = cur {
                        if fetched.rows.row(i) != rows.row(*c) {
                            return Err(format!("seed {seed}: current-row index mismatch"));
                        }
                    }
                }
                let fresh = fetched.current.iter().filter(|c| c.is_some()).count();
                if fresh != rows.rows().min(capacity).min(fetched.rows.rows()) {
                    return Err(format!("seed {seed}: {fresh} current rows flagged"));
                }
            }
        }
        if buf.len() > capacity || buf.len() != reference.len() {
            return Err(format!("seed {seed}: len {} vs reference {}", buf.len(), reference.len()));
        }
        let got = buf.get_last_k();
        let want: Vec<&Vec<f64>> = reference.iter().skip(reference.len() - k.min(reference.len())).collect();
        if got.rows() != want.len() || want.iter().enumerate().any(|(i, w)| got.row(i) != w.as_slice()) {
            return Err(format!("seed {seed}: get_last_k differs from the reference queue"));
        }
    }
    Ok(())
}

fn c4_buffers() -> Verdict {
    let failures: Vec<String> = (0..1000).filter_map(|s| buffer_interleaving(s).err()).collect();
    let stale = common::suite::populated_buffers(40, 5);
    let ln_t = (common::suite::TARGET_CLASSES as f64).ln();
    let reports: Vec<_> = [(ln_t, false), (ln_t, true), (1.0, false), (1.0, true)]
        .iter()
        .map(|&(eps, median)| common::suite::arc(4, &stale, eps, 5, median, Coords::All))
        .collect();
    let grads_ok = reports.iter().all(|r| r.ok());
    let checked: usize = reports.iter().map(|r| r.checked).sum();
    verdict(
        failures.is_empty() && grads_ok,
        format!(
            "1000 interleavings vs reference queue ({} mismatches{}); buffered ARC gradient check over {checked} entries {}",
            failures.len(),
            failures.first().map(|f| format!(", first: {f}")).unwrap_or_default(),
            if grads_ok { "passes" } else { "FAILS" }
        ),
    )
}

// ---------------------------------------------------------------- c5

fn c5_schedule() -> Verdict {
    let (eta0, total) = (0.001, 1000);
    let at0 = cosine_lr(0, total, eta0).unwrap();
    let at_t = cosine_lr(total, total, eta0).unwrap();
    let closed = eta0 * (7.0 * std::f64::consts::PI / 16.0).cos();
    let mut p = Tensor2::from_vec(1, 3, vec![1.0, -2.0, 0.5]).unwrap();
    let g1 = Tensor2::from_vec(1, 3, vec![0.3, 0.1, -0.2]).unwrap();
    let g2 = Tensor2::from_vec(1, 3, vec![-0.4, 0.25, 0.05]).unwrap();
    let mut opt = OptimState::new(&[&p], 0.9, 4, 0.1);
    sgd_step(vec![&mut p], std::slice::from_ref(&g1), &mut opt).unwrap();
    sgd_step(vec![&mut p], std::slice::from_ref(&g2), &mut opt).unwrap();
    let lr1 = 0.1 * (7.0 * std::f64::consts::PI / 64.0).cos();
    let mut momentum_err: f64 = 0.0;
    for (i, start) in [1.0, -2.0, 0.5].into_iter().enumerate() {
        let v1 = g1.data()[i];
        let v2 = 0.9 * v1 + g2.data()[i];
        let want = start - 0.1 * v1 - lr1 * v2;
        momentum_err = momentum_err.max((p.data()[i] - want).abs());
    }
    let pass = at0 == eta0 && (at_t - closed).abs() <= 1e-12 && momentum_err <= 1e-12;
    verdict(
        pass,
        format!(
            "lr(0) = η0 {}, |lr(T) − η0·cos(7π/16)| {:.1e}, two-step momentum error {momentum_err:.1e} (tol 1e-12)",
            if at0 == eta0 { "exactly" } else { "NOT exactly" },
            (at_t - closed).abs()
        ),
    )
}

// ---------------------------------------------------------------- experiments

/// Fine-tunes on the reference task, pre-training each seed's source once.
struct Lab {
    base: ExperimentConfig,
    seeds: Vec<u64>,
    prepared: BTreeMap<u64, (TaskData, SourceModel)>,
    runs: BTreeMap<String, Vec<RunOutput>>,
}

impl Lab {
    fn new() -> Self {
        let base = ExperimentConfig::default();
        let seeds = base.seeds();
        let prepared = seeds
            .par_iter()
            .map(|&s| {
                let data = prepare_data(&base, s, base.n_labeled).unwrap();
                let source = pretrain_source(&base, &data.source, s).unwrap();
                (s, (data, source))
            })
            .collect();
        Self { base, seeds, prepared, runs: BTreeMap::new() }
    }

    /// Runs of `cfg` over every seed, memoised on the serialized config.
    fn runs(&mut self, cfg: &ExperimentConfig) -> &[RunOutput] {
        let key = cfg.to_json_pretty();
        if !self.runs.contains_key(&key) {
            let out: Vec<RunOutput> = self
                .seeds
                .par_iter()
                .map(|&s| {
                    let mut c = cfg.clone();
                    c.seed = s;
                    let (data, source) = &self.prepared[&s];
                    fine_tune(&c, source, &data.target, s).unwrap()
                })
                .collect();
            self.runs.insert(key.clone(), out);
        }
        &self.runs[&key]
    }

    fn variant(&self, akc: bool, arc: bool) -> ExperimentConfig {
        let mut c = self.base.clone();
        c.methods.akc = akc;
        c.methods.arc = arc;
        c
    }
}

fn mean_final(runs: &[RunOutput]) -> f64 {
    runs.iter().map(|r| r.summary.final_test_acc).sum::<f64>() / runs.len() as f64
}

fn c6_ablation(lab: &mut Lab) -> Verdict {
    let start = Instant::now();
    let mut acc = Vec::new();
    for (akc, arc) in [(false, false), (true, false), (false, true), (true, true)] {
        let cfg = lab.variant(akc, arc);
        acc.push(100.0 * mean_final(lab.runs(&cfg)));
    }
    // pre-training happened in Lab::new; add it to the budget
    let t = start.elapsed() + lab_setup_time();
    let [sup, akc, arc, both] = [acc[0], acc[1], acc[2], acc[3]];
    verdict(
        both - sup >= 2.0 && akc >= sup && arc >= sup && t < Duration::from_secs(600),
        format!(
            "n=40/1960, 5 seeds: supervised {sup:.2}%, AKC {akc:.2}%, ARC {arc:.2}%, AKC+ARC {both:.2}% (+{:.2} pts, need ≥ 2), {} (limit 600 s)",
            both - sup,
            secs(t)
        ),
    )
}

static SETUP: std::sync::OnceLock<Duration> = std::sync::OnceLock::new();

fn lab_setup_time() -> Duration {
    *SETUP.get().unwrap_or(&Duration::ZERO)
}

fn c7_sweeps(lab: &mut Lab) -> Verdict {
    let grid = [0.0, 0.3, 0.5, 0.7, 1.0];
    let mut lines = Vec::new();
    let mut pass = true;
    for akc in [true, false] {
        let mut accs = Vec::new();
        for &ratio in &grid {
            let mut cfg = lab.variant(akc, !akc);
            if akc {
                cfg.gates.eps_k_ratio = ratio;
            } else {
                cfg.gates.eps_r_ratio = ratio;
            }
            accs.push(100.0 * mean_final(lab.runs(&cfg)));
        }
        pass &= accs[2] >= accs[0] && accs[3] >= accs[0];
        lines.push(format!(
            "{} [{}]",
            if akc { "AKC ε_K/ln C_s" } else { "ARC ε_R/ln C_t" },
            grid.iter().zip(&accs).map(|(g, a)| format!("{g}: {a:.2}")).collect::<Vec<_>>().join(", ")
        ));
    }
    verdict(pass, format!("{}; need 0.5 and 0.7 ≥ 0", lines.join("; ")))
}

fn c8_imprinting(lab: &mut Lab) -> Verdict {
    let chance3 = 3.0 / lab.base.task.target_classes as f64;
    let imprinted = lab.runs(&lab.variant(false, false)).to_vec();
    let mut random_cfg = lab.variant(false, false);
    random_cfg.head_init = HeadInit::Random;
    let random = lab.runs(&random_cfg).to_vec();
    let init: Vec<f64> = imprinted.iter().map(|r| r.summary.initial_test_acc).collect();
    let mut reached = 0;
    for (imp, rnd) in imprinted.iter().zip(&random) {
        let target = rnd.log.record(5).unwrap().test_acc;
        if (0..=2).any(|e| imp.log.record(e).unwrap().test_acc >= target) {
            reached += 1;
        }
    }
    let min_init = init.iter().cloned().fold(f64::INFINITY, f64::min);
    let rnd5 = random.iter().map(|r| r.log.record(5).unwrap().test_acc).sum::<f64>() / random.len() as f64;
    verdict(
        min_init > chance3 && reached == imprinted.len(),
        format!(
            "post-imprint accuracy min {min_init:.3} over seeds (need > {chance3:.2}); imprinted reaches the random-head epoch-5 accuracy (mean {rnd5:.3}) within 2 epochs on {reached}/{} seeds",
            imprinted.len()
        ),
    )
}

fn c9_gap(lab: &mut Lab) -> Verdict {
    let off = lab.runs(&lab.variant(false, false)).to_vec();
    let on = lab.runs(&lab.variant(false, true)).to_vec();
    let pairs: Vec<(f64, f64)> = off
        .iter()
        .zip(&on)
        .map(|(a, b)| (a.summary.final_rep_gap.unwrap(), b.summary.final_rep_gap.unwrap()))
        .collect();
    let wins = pairs.iter().filter(|(a, b)| b < a).count();
    verdict(
        wins == pairs.len(),
        format!(
            "full-set MMD² labeled vs unlabeled, ARC off → on: {} ({wins}/{} seeds lower)",
            pairs.iter().map(|(a, b)| format!("{a:.4}→{b:.4}")).collect::<Vec<_>>().join(", "),
            pairs.len()
        ),
    )
}

fn c10_determinism() -> Verdict {
    let mut cfg = ExperimentConfig::default();
    cfg.methods.akc = true;
    cfg.methods.arc = true;
    let dir = tempfile::tempdir().unwrap();
    let mut bytes = Vec::new();
    for i in 0..2 {
        let out = run_pipeline(&cfg).unwrap();
        let p = dir.path().join(format!("metrics-{i}.csv"));
        out.log.write_csv(&p).unwrap();
        bytes.push(std::fs::read(&p).unwrap());
    }
    verdict(
        bytes[0] == bytes[1],
        format!("AKC+ARC seed {} run twice: metrics.csv {} ({} bytes)", cfg.seed, if bytes[0] == bytes[1] { "byte-identical" } else { "DIFFERS" }, bytes[0].len()),
    )
}

fn c11_selection_logging(lab: &mut Lab) -> Verdict {
    let akc_runs = lab.runs(&lab.variant(true, true)).to_vec();
    let constant = akc_runs.iter().all(|r| {
        let first = r.log.records[0].akc_selected;
        r.log.records.iter().all(|e| e.akc_selected == first)
    });
    let logged = METRICS_HEADER.contains(&"arc_selected_labeled") && METRICS_HEADER.contains(&"arc_selected_unlabeled");
    let in_range = akc_runs.iter().all(|r| {
        r.log.records.iter().all(|e| {
            (0.0..=1.0).contains(&e.arc_selected_labeled) && (0.0..=1.0).contains(&e.arc_selected_unlabeled)
        })
    });
    let csv = akc_runs[0].log.to_csv_string().unwrap();
    let round_trip = MetricsLog::from_csv_reader(csv.as_bytes()).unwrap() == akc_runs[0].log;
    let r0 = &akc_runs[0].log;
    let curve = [0, 1, 5, 20, r0.records.len() - 1]
        .iter()
        .map(|&e| format!("{e}:{:.2}", r0.records[e].arc_selected_unlabeled))
        .collect::<Vec<_>>()
        .join(" ");
    verdict(
        constant && logged && in_range && round_trip,
        format!(
            "AKC fraction constant across epochs on {}; ARC fractions logged every epoch (seed 0 unlabeled, epoch:fraction {curve})",
            if constant { "all seeds" } else { "NOT all seeds" }
        ),
    )
}

fn main() {
    let criteria: Vec<(&str, Box<dyn Fn(&mut Option<Lab>) -> Verdict>)> = vec![
        ("1 MMD oracle", Box::new(|_| c1_mmd_oracle())),
        ("2 gradient suite", Box::new(|_| c2_gradients())),
        ("3 gate boundaries", Box::new(|_| c3_gates())),
        ("4 replay buffer", Box::new(|_| c4_buffers())),
        ("5 schedule and optimizer", Box::new(|_| c5_schedule())),
        ("6 directional ablation", Box::new(|lab| c6_ablation(lab_mut(lab)))),
        ("7 threshold sweeps", Box::new(|lab| c7_sweeps(lab_mut(lab)))),
        ("8 imprinting", Box::new(|lab| c8_imprinting(lab_mut(lab)))),
        ("9 representation gap", Box::new(|lab| c9_gap(lab_mut(lab)))),
        ("10 determinism", Box::new(|_| c10_determinism())),
        ("11 selection-ratio logging", Box::new(|lab| c11_selection_logging(lab_mut(lab)))),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut lab = None;
    let mut failed = 0;
    for (name, check) in &criteria {
        let number = name.split(' ').next().unwrap();
        if !filter.is_empty() && !filter.iter().any(|f| f == number) {
            continue;
        }
        let v = check(&mut lab);
        if !v.pass {
            failed += 1;
        }
        println!("{} criterion {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
    }
    if failed > 0 {
        println!("{failed} criterion/criteria failed");
        std::process::exit(1);
    }
}

fn lab_mut(lab: &mut Option<Lab>) -> &mut Lab {
    if lab.is_none() {
        let start = Instant::now();
        *lab = Some(Lab::new());
        let _ = SETUP.set(start.elapsed());
    }
    lab.as_mut().unwrap()
}
