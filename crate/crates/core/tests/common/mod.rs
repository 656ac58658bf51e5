#![allow(dead_code)]

use adacons::{Classifier, Gradients, Tensor2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub mod suite;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Default)]
pub struct FdReport {
    pub checked: usize,
    pub skipped: usize,
    pub worst: f64,
    pub failures: Vec<String>,
}

impl FdReport {
    pub fn ok(&self) -> bool {
        self.failures.is_empty() && self.checked > 0
    }
}

/// `|a − n| / max(|a|, |n|, floor)`. The floor keeps near-zero gradients
/// from dividing by round-off. The difference quotient cannot resolve less
/// than about `ε·S/h`, where `S` is the magnitude of the summands of the
/// loss: at least `|L|`, and for kernel sums many times more. So the floor
/// grows with the loss and with the largest gradient entry `g_max`.
pub fn rel_err(a: f64, n: f64, loss: f64, g_max: f64) -> f64 {
    let floor = (1e-6 * loss.abs().max(1.0)).max(1e-3 * g_max);
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Which parameter entries a finite-difference check visits.
#[derive(Debug, Clone, Copy)]
pub enum Coords {
    All,
    /// This many entries drawn uniformly with the given seed.
    Sample(usize, u64),
}

fn coordinates(analytic: &Gradients, coords: Coords) -> Vec<(usize, usize)> {
    let all: Vec<(usize, usize)> = analytic
        .tensors()
        .iter()
        .enumerate()
        .flat_map(|(pi, g)| (0..g.len()).map(move |k| (pi, k)))
        .collect();
    match coords {
        Coords::All => all,
        Coords::Sample(n, seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..n).map(|_| all[rng.random_range(0..all.len())]).collect()
        }
    }
}

/// Central differences on the chosen parameters of `model`. `eval` returns
/// the loss and a signature of every discrete decision (ReLU patterns,
/// gates); parameters whose perturbation flips the signature are skipped.
pub fn fd_check<F>(model: &Classifier, analytic: &Gradients, coords: Coords, eval: F) -> FdReport
where
    F: Fn(&Classifier) -> (f64, Vec<bool>),
{
    let (base_loss, base_sig) = eval(model);
    let mut report = FdReport::default();
    let g_max = analytic
        .tensors()
        .iter()
        .flat_map(|t| t.data().iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    for (pi, k) in coordinates(analytic, coords) {
        let g = &analytic.tensors()[pi];
        let mut plus = model.clone();
        plus.params_mut()[pi].data_mut()[k] += FD_STEP;
        let mut minus = model.clone();
        minus.params_mut()[pi].data_mut()[k] -= FD_STEP;
        let (lp, sp) = eval(&plus);
        let (lm, sm) = eval(&minus);
        if sp != base_sig || sm != base_sig {
            report.skipped += 1;
            continue;
        }
        let num = (lp - lm) / (2.0 * FD_STEP);
        let ana = g.data()[k];
        let rel = rel_err(ana, num, base_loss, g_max);
        report.checked += 1;
        report.worst = report.worst.max(rel);
        if rel > FD_TOLERANCE {
            report.failures.push(format!("param {pi}[{k}]: analytic {ana:e} numeric {num:e}"));
        }
    }
    report
}

/// Activation patterns of `model` on each input.
pub fn relu_signature(model: &Classifier, inputs: &[&Tensor2]) -> Vec<bool> {
    inputs
        .iter()
        .flat_map(|x| model.forward(x).unwrap().activation_pattern())
        .collect()
}

pub fn random_matrix(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> Tensor2 {
    let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor2::from_vec(rows, cols, data).unwrap()
}
