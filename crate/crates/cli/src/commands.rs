use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use adacons::metrics::mean_std;
use adacons::pipeline::{fine_tune, prepare_data, pretrain_source, SourceModel};
use adacons::{apply_override, ExperimentConfig, MethodFlags, MetricsLog, SslMethod};
use rayon::prelude::*;

use crate::output::{write_run, write_summary_csv};
use crate::{Axis, Common};

#[derive(Debug)]
pub enum CliError {
    /// Unreadable or invalid configuration; exit code 2.
    Config(String),
    /// Anything that failed after the config was accepted; exit code 1.
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<adacons::Error> for CliError {
    fn from(e: adacons::Error) -> Self {
        match e {
            adacons::Error::Config(issues) => CliError::Config(
                issues
                    .iter()
                    .map(|i| format!("\n  {}: {}", i.path, i.message))
                    .collect(),
            ),
            other => CliError::Runtime(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

/// Reads the config, applies `--set` and `--seed`, validates, and resolves
/// the output root.
pub fn load(c: &Common) -> CliResult<(ExperimentConfig, PathBuf)> {
    let text = match &c.config {
        Some(p) => std::fs::read_to_string(p)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?,
        None => "{}".to_owned(),
    };
    let mut doc: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("malformed JSON: {e}")))?;
    for o in &c.overrides {
        let (key, value) = o
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("--set expects KEY=VALUE, got `{o}`")))?;
        apply_override(&mut doc, key.trim(), value)?;
    }
    if let Some(seed) = c.seed {
        apply_override(&mut doc, "seed", &seed.to_string())?;
    }
    let cfg = ExperimentConfig::from_value(doc)?;
    let root = c.out.clone().unwrap_or_else(|| cfg.out_dir.clone());
    Ok((cfg, root))
}

pub fn with_jobs<T>(jobs: usize, f: impl FnOnce() -> CliResult<T> + Send) -> CliResult<T>
where
    T: Send,
{
    if jobs == 0 {
        return f();
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::Runtime(e.to_string()))?
        .install(f)
}

/// Fine-tunes `cfg` from a pre-trained source and writes the run directory.
fn execute(cfg: &ExperimentConfig, source: &SourceModel, dir: &Path) -> CliResult<MetricsLog> {
    cfg.validate()?;
    let data = prepare_data(cfg, cfg.seed, cfg.n_labeled)?;
    let out = fine_tune(cfg, source, &data.target, cfg.seed)?;
    write_run(dir, cfg, &out, data.target_label_map.as_deref())?;
    Ok(out.log)
}

fn pretrain(cfg: &ExperimentConfig) -> CliResult<SourceModel> {
    let data = prepare_data(cfg, cfg.seed, cfg.n_labeled)?;
    Ok(pretrain_source(cfg, &data.source, cfg.seed)?)
}

pub fn run(cfg: &ExperimentConfig, root: &Path) -> CliResult<()> {
    let dir = root.join(cfg.methods.label()).join(format!("seed-{}", cfg.seed));
    let source = pretrain(cfg)?;
    let log = execute(cfg, &source, &dir)?;
    let last = log.last().expect("epoch 0 is always logged");
    let (best_epoch, best) = log.best().expect("non-empty log");
    println!("final test accuracy {:.4} (epoch {})", last.test_acc, last.epoch);
    println!("best test accuracy  {best:.4} (epoch {best_epoch})");
    println!("wrote {}", dir.display());
    Ok(())
}

struct Job {
    group: String,
    cfg: ExperimentConfig,
    dir: PathBuf,
}

/// Pre-trains one source model per seed. None of the swept or compared
/// settings touch pre-training, so every sub-run of a seed shares it.
fn sources_for(base: &ExperimentConfig) -> CliResult<BTreeMap<u64, SourceModel>> {
    base.seeds()
        .into_par_iter()
        .map(|seed| {
            let mut cfg = base.clone();
            cfg.seed = seed;
            pretrain(&cfg).map(|s| (seed, s))
        })
        .collect()
}

struct GroupStats {
    group: String,
    finals: Vec<f64>,
    bests: Vec<f64>,
    last: Vec<adacons::EpochRecord>,
}

/// Runs every job, then aggregates from the metrics files on disk.
/// Returns the per-group statistics and the failed jobs.
fn run_jobs(jobs: Vec<Job>, sources: &BTreeMap<u64, SourceModel>) -> (Vec<GroupStats>, Vec<String>) {
    let results: Vec<CliResult<()>> = jobs
        .par_iter()
        .map(|job| execute(&job.cfg, &sources[&job.cfg.seed], &job.dir).map(|_| ()))
        .collect();
    let mut failures = Vec::new();
    let mut groups: Vec<GroupStats> = Vec::new();
    for (job, res) in jobs.iter().zip(results) {
        let log = res.and_then(|_| Ok(MetricsLog::read_csv(&job.dir.join("metrics.csv"))?));
        let log = match log {
            Ok(l) => l,
            Err(e) => {
                failures.push(format!("{}: {e}", job.dir.display()));
                continue;
            }
        };
        let idx = match groups.iter().position(|g| g.group == job.group) {
            Some(i) => i,
            None => {
                groups.push(GroupStats {
                    group: job.group.clone(),
                    finals: Vec::new(),
                    bests: Vec::new(),
                    last: Vec::new(),
                });
                groups.len() - 1
            }
        };
        let g = &mut groups[idx];
        g.finals.push(log.final_test_acc().expect("non-empty log"));
        g.bests.push(log.best().expect("non-empty log").1);
        g.last.push(log.last().expect("non-empty log").clone());
    }
    (groups, failures)
}

fn report_failures(failures: &[String]) -> CliResult<()> {
    if failures.is_empty() {
        return Ok(());
    }
    for f in failures {
        eprintln!("sub-run failed: {f}");
    }
    Err(CliError::Runtime(format!("{} sub-run(s) failed", failures.len())))
}

fn axis_name(axis: Axis) -> &'static str {
    match axis {
        Axis::EpsK => "eps_k",
        Axis::EpsR => "eps_r",
        Axis::NLabeled => "n_labeled",
        Axis::LambdaR => "lambda_r",
    }
}

fn apply_axis(cfg: &mut ExperimentConfig, axis: Axis, value: f64) -> CliResult<()> {
    match axis {
        Axis::EpsK => cfg.gates.eps_k_ratio = value,
        Axis::EpsR => cfg.gates.eps_r_ratio = value,
        Axis::LambdaR => cfg.weights.lambda_r = value,
        Axis::NLabeled => {
            if value < 0.0 || value.fract() != 0.0 {
                return Err(CliError::Config(format!("n_labeled sweep value {value} is not a count")));
            }
            cfg.n_labeled = value as usize;
        }
    }
    Ok(())
}

pub fn sweep(base: &ExperimentConfig, root: &Path, axis: Axis, values: &[f64]) -> CliResult<()> {
    let name = axis_name(axis);
    let inactive = match axis {
        Axis::EpsK => !base.methods.akc,
        Axis::EpsR | Axis::LambdaR => !base.methods.arc,
        Axis::NLabeled => false,
    };
    if inactive {
        eprintln!("warning: sweeping {name} with the corresponding regularizer disabled");
    }
    let sweep_dir = root.join(format!("sweep-{name}"));
    let mut jobs = Vec::new();
    for &v in values {
        for seed in base.seeds() {
            let mut cfg = base.clone();
            cfg.seed = seed;
            apply_axis(&mut cfg, axis, v)?;
            jobs.push(Job {
                group: v.to_string(),
                dir: sweep_dir.join(format!("{name}-{v}")).join(format!("seed-{seed}")),
                cfg,
            });
        }
    }
    let sources = sources_for(base)?;
    let (groups, failures) = run_jobs(jobs, &sources);

    let header = [
        "axis",
        "value",
        "runs",
        "final_mean",
        "final_std",
        "best_mean",
        "best_std",
        "akc_selected",
        "arc_selected_labeled",
        "arc_selected_unlabeled",
    ];
    let mut rows = Vec::new();
    println!("{name:>10}  runs  final acc        best acc         akc sel  arc sel (l/u)");
    for g in &groups {
        let (fm, fs) = mean_std(&g.finals);
        let (bm, bs) = mean_std(&g.bests);
        let avg = |f: fn(&adacons::EpochRecord) -> f64| g.last.iter().map(f).sum::<f64>() / g.last.len() as f64;
        let (k, rl, ru) = (
            avg(|r| r.akc_selected),
            avg(|r| r.arc_selected_labeled),
            avg(|r| r.arc_selected_unlabeled),
        );
        println!(
            "{:>10}  {:>4}  {fm:.4} ± {fs:.4}  {bm:.4} ± {bs:.4}  {k:.3}    {rl:.3}/{ru:.3}",
            g.group,
            g.finals.len()
        );
        rows.push(vec![
            name.to_owned(),
            g.group.clone(),
            g.finals.len().to_string(),
            fm.to_string(),
            fs.to_string(),
            bm.to_string(),
            bs.to_string(),
            k.to_string(),
            rl.to_string(),
            ru.to_string(),
        ]);
    }
    write_summary_csv(&sweep_dir.join("summary.csv"), &header, &rows)?;
    println!("wrote {}", sweep_dir.join("summary.csv").display());
    report_failures(&failures)
}

/// The method rows of the comparison table.
pub fn compared_methods() -> Vec<MethodFlags> {
    let m = |ssl, akc, arc| MethodFlags { akc, arc, ssl };
    vec![
        MethodFlags::SUPERVISED,
        m(SslMethod::PseudoLabel, false, false),
        m(SslMethod::MeanTeacher, false, false),
        m(SslMethod::None, true, false),
        m(SslMethod::None, false, true),
        m(SslMethod::None, true, true),
        m(SslMethod::PseudoLabel, true, true),
    ]
}

pub fn compare(base: &ExperimentConfig, root: &Path) -> CliResult<()> {
    let dir = root.join("compare");
    let grid = base.n_labeled_grid.clone();
    let mut jobs = Vec::new();
    for methods in compared_methods() {
        for &n in &grid {
            for seed in base.seeds() {
                let mut cfg = base.clone();
                cfg.methods = methods;
                cfg.n_labeled = n;
                cfg.seed = seed;
                jobs.push(Job {
                    group: format!("{}@{n}", methods.label()),
                    dir: dir.join(methods.label()).join(format!("n-{n}")).join(format!("seed-{seed}")),
                    cfg,
                });
            }
        }
    }
    let sources = sources_for(base)?;
    let (groups, failures) = run_jobs(jobs, &sources);

    let mut header = vec!["method".to_owned()];
    for n in &grid {
        header.push(format!("n{n}_mean"));
        header.push(format!("n{n}_std"));
    }
    let mut rows = Vec::new();
    print!("{:<24}", "method");
    for n in &grid {
        print!("  {:>17}", format!("n={n}"));
    }
    println!();
    for methods in compared_methods() {
        let label = methods.label();
        let mut row = vec![label.clone()];
        print!("{label:<24}");
        for n in &grid {
            let key = format!("{label}@{n}");
            match groups.iter().find(|g| g.group == key) {
                Some(g) => {
                    let (m, s) = mean_std(&g.finals);
                    print!("  {:>8.2} ± {:<6.2}", 100.0 * m, 100.0 * s);
                    row.push(m.to_string());
                    row.push(s.to_string());
                }
                None => {
                    print!("  {:>17}", "failed");
                    row.push(String::new());
                    row.push(String::new());
                }
            }
        }
        println!();
        rows.push(row);
    }
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    write_summary_csv(&dir.join("summary.csv"), &header, &rows)?;
    println!("final-epoch test accuracy (%), mean ± std over {} seeds", base.num_seeds);
    println!("wrote {}", dir.join("summary.csv").display());
    report_failures(&failures)
}
