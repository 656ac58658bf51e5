//! Gradient checks for every loss term on the default architecture with
//! six-example micro-batches. Shared by the gradient tests (every
//! parameter) and the acceptance run (a seeded sample of parameters).

use adacons::consistency::{akc_loss, arc_loss, arc_select, ArcBuffers, Bandwidth, DivergenceMode};
use adacons::numerics::{median_heuristic, softmax_rows};
use adacons::ssl::{cross_entropy_loss, mean_teacher_loss, pseudo_label_loss, SslConfig, SslMethod};
use adacons::training::{total_loss, LossSetup, StepInputs};
use adacons::{Architecture, Classifier, LinearHead, LossWeights, ModelPair, Tensor2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{fd_check, random_matrix, relu_signature, Coords, FdReport};

pub const INPUT_DIM: usize = 16;
pub const SOURCE_CLASSES: usize = 10;
pub const TARGET_CLASSES: usize = 4;

pub struct Fixture {
    pub pair: ModelPair,
    pub teacher: Classifier,
    pub x_l: Tensor2,
    pub y_l: Vec<usize>,
    pub x_u: Tensor2,
    pub noise_s: Tensor2,
    pub noise_t: Tensor2,
}

pub fn fixture(seed: u64) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let arch = Architecture::default();
    let source = Classifier::new(INPUT_DIM, &arch, SOURCE_CLASSES, &mut rng).unwrap();
    let random = LinearHead::random(arch.feature_dim, TARGET_CLASSES, &mut rng).unwrap();
    // a sharper head so that entropy and confidence gates split the batch
    let head = LinearHead::new(random.w.scale(6.0), random.b.clone()).unwrap();
    let mut pair = ModelPair::from_source(source, head).unwrap();
    // move the target away from the source so AKC is non-trivial
    for p in pair.target.params_mut() {
        let noise = random_matrix(p.rows(), p.cols(), 0.05, &mut rng);
        p.add_assign(&noise).unwrap();
    }
    let mut teacher = pair.target.clone();
    for p in teacher.params_mut() {
        let noise = random_matrix(p.rows(), p.cols(), 0.05, &mut rng);
        p.add_assign(&noise).unwrap();
    }
    Fixture {
        x_l: random_matrix(6, INPUT_DIM, 1.0, &mut rng),
        y_l: vec![0, 1, 2, 3, 1, 0],
        x_u: random_matrix(6, INPUT_DIM, 1.0, &mut rng),
        noise_s: random_matrix(6, INPUT_DIM, 0.1, &mut rng),
        noise_t: random_matrix(6, INPUT_DIM, 0.1, &mut rng),
        pair,
        teacher,
    }
}

/// Buffers holding a few stale rows from earlier "steps".
pub fn populated_buffers(seed: u64, batches: u64) -> ArcBuffers {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buffers = ArcBuffers::new(256, 64).unwrap();
    for step in 0..batches {
        buffers.labeled.update(&random_matrix(4, 32, 1.0, &mut rng), step).unwrap();
        buffers.unlabeled.update(&random_matrix(5, 32, 1.0, &mut rng), step).unwrap();
    }
    buffers
}

pub fn cross_entropy(coords: Coords) -> FdReport {
    let f = fixture(1);
    let m = &f.pair.target;
    let g = cross_entropy_loss(m, &f.x_l, &f.y_l).unwrap().grads;
    fd_check(m, &g, coords, |c| {
        (cross_entropy_loss(c, &f.x_l, &f.y_l).unwrap().value, relu_signature(c, &[&f.x_l]))
    })
}

/// AKC over `L ∪ U`. Also records a failure if the head receives gradient.
pub fn akc(mode: DivergenceMode, eps: f64, coords: Coords) -> FdReport {
    let f = fixture(2);
    let x = f.x_l.vstack(&f.x_u).unwrap();
    let l = akc_loss(&f.pair, &x, 6, eps, mode).unwrap();
    let mut r = fd_check(&f.pair.target, &l.grads, coords, |c| {
        let mut p = f.pair.clone();
        p.target = c.clone();
        (akc_loss(&p, &x, 6, eps, mode).unwrap().value, relu_signature(c, &[&x]))
    });
    if l.value <= 0.0 {
        r.failures.push("AKC term is zero at the check point".into());
    }
    let n = l.grads.tensors().len();
    if !l.grads.tensors()[n - 2..].iter().all(|t| t.data().iter().all(|v| *v == 0.0)) {
        r.failures.push("AKC sent gradient into the head".into());
    }
    r
}

fn arc_signature(c: &Classifier, x_l: &Tensor2, x_u: &Tensor2, eps: f64) -> Vec<bool> {
    let mut sig = relu_signature(c, &[x_l, x_u]);
    for x in [x_l, x_u] {
        let probs = softmax_rows(c.forward(x).unwrap().logits()).unwrap();
        let sel = arc_select(&probs, eps);
        sig.extend((0..x.rows()).map(|i| sel.contains(&i)));
    }
    sig
}

/// Which pairs set the median bandwidth on the rows ARC would compare.
fn median_pairs(c: &Classifier, f: &Fixture, buffers: &ArcBuffers, eps: f64, step: u64) -> Vec<bool> {
    let mut b = buffers.clone();
    let mut sets = Vec::new();
    for (x, buf) in [(&f.x_l, &mut b.labeled), (&f.x_u, &mut b.unlabeled)] {
        let fwd = c.forward(x).unwrap();
        let sel = arc_select(&softmax_rows(fwd.logits()).unwrap(), eps);
        sets.push(buf.update_and_fetch(&fwd.features().select_rows(&sel), step).unwrap().rows);
    }
    let bw = median_heuristic(&sets[0], &sets[1]);
    let total = sets[0].rows() + sets[1].rows();
    let mut sig = vec![false; total * total];
    for (i, j, _) in bw.pairs {
        sig[i * total + j] = true;
    }
    sig
}

/// ARC with the median bandwidth (differentiated) or with those same
/// bandwidths held fixed. Buffered rows enter the loss as constants.
pub fn arc(seed: u64, buffers: &ArcBuffers, eps: f64, step: u64, median: bool, coords: Coords) -> FdReport {
    let f = fixture(seed);
    let m = &f.pair.target;
    let bw = if median {
        Bandwidth::Median
    } else {
        let fl = m.extractor.forward_features(&f.x_l).unwrap();
        let fu = m.extractor.forward_features(&f.x_u).unwrap();
        Bandwidth::Fixed(median_heuristic(&fl, &fu).sigmas)
    };
    let l = arc_loss(m, &f.x_l, &f.x_u, eps, &mut buffers.clone(), step, &bw).unwrap();
    let mut r = fd_check(m, &l.grads, coords, |c| {
        let v = arc_loss(c, &f.x_l, &f.x_u, eps, &mut buffers.clone(), step, &bw).unwrap().value;
        let mut sig = arc_signature(c, &f.x_l, &f.x_u, eps);
        if median {
            sig.extend(median_pairs(c, &f, buffers, eps, step));
        }
        (v, sig)
    });
    if l.value <= 0.0 {
        r.failures.push("ARC term is zero at the check point".into());
    }
    r
}

pub fn pseudo_label(coords: Coords) -> FdReport {
    let f = fixture(5);
    let m = &f.pair.target;
    let conf = 0.5;
    let l = pseudo_label_loss(m, &f.x_u, conf).unwrap();
    let sig = |c: &Classifier| {
        let mut s = relu_signature(c, &[&f.x_u]);
        let probs = softmax_rows(c.forward(&f.x_u).unwrap().logits()).unwrap();
        s.extend(probs.iter_rows().map(|p| p.iter().cloned().fold(0.0, f64::max) >= conf));
        s
    };
    let mut r = fd_check(m, &l.grads, coords, |c| (pseudo_label_loss(c, &f.x_u, conf).unwrap().value, sig(c)));
    if l.value <= 0.0 {
        r.failures.push("pseudo-label term is zero at the check point".into());
    }
    r
}

pub fn mean_teacher(coords: Coords) -> FdReport {
    let f = fixture(6);
    let m = &f.pair.target;
    let l = mean_teacher_loss(m, &f.teacher, &f.x_u, &f.noise_s, &f.noise_t).unwrap();
    let xs = f.x_u.add(&f.noise_s).unwrap();
    let mut r = fd_check(m, &l.grads, coords, |c| {
        (
            mean_teacher_loss(c, &f.teacher, &f.x_u, &f.noise_s, &f.noise_t).unwrap().value,
            relu_signature(c, &[&xs]),
        )
    });
    if l.value <= 0.0 {
        r.failures.push("mean-teacher term is zero at the check point".into());
    }
    r
}

/// `L_CE + λ_S·L_S + λ_K·R_K + λ_R·R_R` with every term non-zero.
pub fn composite(seed: u64, method: SslMethod, coords: Coords) -> FdReport {
    let f = fixture(seed);
    let eps_k = (SOURCE_CLASSES as f64).ln();
    let eps_r = 1.2;
    let mut inputs = StepInputs::from_pair(&f.pair, f.x_l.clone(), f.y_l.clone(), f.x_u.clone(), eps_k).unwrap();
    inputs.noise_student = Some(f.noise_s.clone());
    inputs.noise_teacher = Some(f.noise_t.clone());
    let m = &f.pair.target;
    let setup = LossSetup {
        weights: LossWeights { lambda_k: 1.0, lambda_r: 30.0, lambda_s: 0.7 },
        akc: true,
        arc: true,
        akc_mode: DivergenceMode::Mse,
        eps_r,
        bandwidth: Bandwidth::Median,
        ssl: SslConfig { method, pl_confidence: 0.5, ..SslConfig::default() },
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut buffers = ArcBuffers::new(256, 64).unwrap();
    buffers.labeled.update(&random_matrix(3, 32, 1.0, &mut rng), 0).unwrap();
    buffers.unlabeled.update(&random_matrix(3, 32, 1.0, &mut rng), 0).unwrap();
    let teacher = Some(&f.teacher);
    let l = total_loss(m, teacher, &inputs, &setup, &mut buffers.clone(), 1).unwrap();
    let b = &l.breakdown;
    let xs = f.x_u.add(&f.noise_s).unwrap();
    let sig = |c: &Classifier| {
        let mut s = arc_signature(c, &f.x_l, &f.x_u, eps_r);
        s.extend(median_pairs(c, &f, &buffers, eps_r, 1));
        s.extend(relu_signature(c, &[&xs]));
        let probs = softmax_rows(c.forward(&xs).unwrap().logits()).unwrap();
        s.extend(probs.iter_rows().map(|p| p.iter().cloned().fold(0.0, f64::max) >= 0.5));
        s
    };
    let mut r = fd_check(m, &l.grads, coords, |c| {
        let v = total_loss(c, teacher, &inputs, &setup, &mut buffers.clone(), 1).unwrap().value;
        (v, sig(c))
    });
    if !(b.ce > 0.0 && b.akc > 0.0 && b.arc > 0.0 && b.ssl > 0.0) {
        r.failures.push(format!("inactive term in {b:?}"));
    }
    r
}

/// Every case of the suite, named.
pub fn all_cases(coords: Coords) -> Vec<(String, FdReport)> {
    let ln_s = (SOURCE_CLASSES as f64).ln();
    let ln_t = (TARGET_CLASSES as f64).ln();
    let mut out = vec![("cross entropy".to_owned(), cross_entropy(coords))];
    for (mode, eps) in [
        (DivergenceMode::Mse, ln_s),
        (DivergenceMode::Kl, ln_s),
        (DivergenceMode::Mse, 2.27),
        (DivergenceMode::Kl, 2.27),
    ] {
        out.push((format!("akc {mode:?} eps {eps:.3}"), akc(mode, eps, coords)));
    }
    let empty = ArcBuffers::new(256, 64).unwrap();
    let stale = populated_buffers(40, 5);
    for median in [false, true] {
        out.push((format!("arc current batch median={median}"), arc(3, &empty, ln_t, 0, median, coords)));
        for eps in [ln_t, 1.0] {
            out.push((
                format!("arc buffered eps {eps:.3} median={median}"),
                arc(4, &stale, eps, 5, median, coords),
            ));
        }
    }
    out.push(("pseudo label".to_owned(), pseudo_label(coords)));
    out.push(("mean teacher".to_owned(), mean_teacher(coords)));
    out.push(("composite mean teacher".to_owned(), composite(7, SslMethod::MeanTeacher, coords)));
    out.push(("composite pseudo label".to_owned(), composite(8, SslMethod::PseudoLabel, coords)));
    out
}
