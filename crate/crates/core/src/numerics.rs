//! Probability primitives, the RBF kernel and the squared MMD estimator.
//!
//! Every function that feeds a loss has a `*_grad` / `*_backward` companion
//! returning the analytic gradient with respect to its trainable argument.

use crate::error::{Error, Result};
use crate::tensor::{sq_dist, Tensor2};

/// Lower clamp applied to every argument of `ln`.
pub const LOG_CLAMP: f64 = 1e-12;

const PROB_SUM_TOL: f64 = 1e-9;

#[inline]
pub(crate) fn clamped_ln(x: f64) -> f64 {
    x.max(LOG_CLAMP).ln()
}

/// A categorical distribution stored as a single-row tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVec(Tensor2);

impl ProbVec {
    pub fn new(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyInput("probability vector"));
        }
        if values
            .iter()
            .any(|&p| !p.is_finite() || !(0.0..=1.0).contains(&p))
        {
            return Err(Error::InvalidInput(
                "probability entries must lie in [0, 1]".into(),
            ));
        }
        let total: f64 = values.iter().sum();
        if (total - 1.0).abs() > PROB_SUM_TOL {
            return Err(Error::InvalidInput(format!(
                "probabilities sum to {total}, expected 1"
            )));
        }
        Ok(Self(Tensor2::row_vector(values)))
    }

    pub fn uniform(classes: usize) -> Self {
        Self(Tensor2::filled(1, classes, 1.0 / classes as f64))
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.data()
    }

    pub fn len(&self) -> usize {
        self.0.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.0.cols() == 0
    }

    pub fn as_tensor(&self) -> &Tensor2 {
        &self.0
    }
}

/// Max-subtracted softmax of a single row.
pub fn softmax(logits: &[f64]) -> Result<ProbVec> {
    if logits.is_empty() {
        return Err(Error::EmptyInput("softmax logits"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("softmax: non-finite logit".into()));
    }
    let mut out = vec![0.0; logits.len()];
    softmax_into(logits, &mut out);
    Ok(ProbVec(Tensor2::row_vector(&out)))
}

pub(crate) fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = (z - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Row-wise softmax of a `B × C` tensor.
pub fn softmax_rows(logits: &Tensor2) -> Result<Tensor2> {
    logits.ensure_finite("softmax_rows")?;
    let mut out = Tensor2::zeros(logits.rows(), logits.cols());
    for r in 0..logits.rows() {
        softmax_into(logits.row(r), out.row_mut(r));
    }
    Ok(out)
}

/// Pulls a gradient on softmax outputs back onto the logits of one row:
/// `dz_k = p_k (g_k − Σ_j g_j p_j)`.
pub fn softmax_backward(probs: &[f64], grad_probs: &[f64], out: &mut [f64]) {
    let inner: f64 = probs.iter().zip(grad_probs).map(|(p, g)| p * g).sum();
    for ((o, &p), &g) in out.iter_mut().zip(probs).zip(grad_probs) {
        *o = p * (g - inner);
    }
}

/// Shannon entropy in nats, `0·ln 0 := 0`, clamped into `[0, ln C]`.
pub fn entropy(p: &ProbVec) -> f64 {
    entropy_raw(p.as_slice())
}

pub(crate) fn entropy_raw(p: &[f64]) -> f64 {
    let h: f64 = p
        .iter()
        .filter(|&&pi| pi > 0.0)
        .map(|&pi| -pi * clamped_ln(pi))
        .sum();
    h.clamp(0.0, (p.len() as f64).ln())
}

/// Entropy of `softmax(row)` for every row of a logit tensor.
pub fn entropy_rows(probs: &Tensor2) -> Vec<f64> {
    probs.iter_rows().map(entropy_raw).collect()
}

/// `KL(p ‖ q)` with `q` clamped to at least [`LOG_CLAMP`] inside the log.
pub fn kl_div(p: &ProbVec, q: &ProbVec) -> Result<f64> {
    kl_raw(p.as_slice(), q.as_slice())
}

pub(crate) fn kl_raw(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::shape(
            "kl_div",
            format!("{} vs {} entries", p.len(), q.len()),
        ));
    }
    Ok(p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (clamped_ln(pi) - clamped_ln(qi)))
        .sum())
}

/// `∂ KL(p ‖ q) / ∂ q`, honouring the clamp.
pub(crate) fn kl_grad_q(p: &[f64], q: &[f64], out: &mut [f64]) {
    for ((o, &pi), &qi) in out.iter_mut().zip(p).zip(q) {
        *o = if pi > 0.0 && qi > LOG_CLAMP { -pi / qi } else { 0.0 };
    }
}

/// Mean of squared differences over all entries.
pub fn mse(a: &Tensor2, b: &Tensor2) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "mse",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    if a.is_empty() {
        return Err(Error::EmptyInput("mse"));
    }
    Ok(sq_dist(a.data(), b.data()) / a.len() as f64)
}

/// Gradient of [`mse`] with respect to `b`.
pub fn mse_grad_b(a: &Tensor2, b: &Tensor2) -> Result<Tensor2> {
    let n = a.len() as f64;
    Ok(b.sub(a)?.scale(2.0 / n))
}

/// Gaussian RBF `exp(−‖x−y‖² / 2σ²)`.
pub fn rbf_kernel(x: &[f64], y: &[f64], sigma: f64) -> Result<f64> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "rbf bandwidth must be positive, got {sigma}"
        )));
    }
    if x.len() != y.len() {
        return Err(Error::shape(
            "rbf_kernel",
            format!("{} vs {} dims", x.len(), y.len()),
        ));
    }
    Ok((-sq_dist(x, y) / (2.0 * sigma * sigma)).exp())
}

/// Bandwidth multipliers applied to the median pairwise distance.
pub const MEDIAN_MULTIPLIERS: [f64; 3] = [0.5, 1.0, 2.0];

/// Median-heuristic bandwidths and the row pairs that determine them.
#[derive(Debug, Clone, PartialEq)]
pub struct MedianBandwidth {
    pub sigmas: Vec<f64>,
    /// Median distance before the multipliers.
    pub base: f64,
    /// `(i, j, weight)` over rows of `V ∪ U` (V first): `base` is the
    /// weighted sum of those pair distances. Empty when the fallback is used.
    pub pairs: Vec<(usize, usize, f64)>,
}

/// Median Euclidean distance over all distinct row pairs of `V ∪ U`, times
/// [`MEDIAN_MULTIPLIERS`]. Falls back to a base of 1 when the median is zero
/// or there is only one row.
pub fn median_heuristic(v: &Tensor2, u: &Tensor2) -> MedianBandwidth {
    let rows: Vec<&[f64]> = v.iter_rows().chain(u.iter_rows()).collect();
    let mut dists = Vec::with_capacity(rows.len() * rows.len().saturating_sub(1) / 2);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            dists.push((sq_dist(rows[i], rows[j]).sqrt(), i, j));
        }
    }
    let (base, pairs) = match median(&mut dists) {
        Some((m, pairs)) if m > 0.0 => (m, pairs),
        _ => (1.0, Vec::new()),
    };
    MedianBandwidth {
        sigmas: MEDIAN_MULTIPLIERS.iter().map(|m| m * base).collect(),
        base,
        pairs,
    }
}

pub fn median_heuristic_sigmas(v: &Tensor2, u: &Tensor2) -> Vec<f64> {
    median_heuristic(v, u).sigmas
}

type PairDist = (f64, usize, usize);

fn median(values: &mut [PairDist]) -> Option<(f64, Vec<(usize, usize, f64)>)> {
    let n = values.len();
    if n == 0 {
        return None;
    }
    let mid = n / 2;
    let by_dist = |a: &PairDist, b: &PairDist| a.0.total_cmp(&b.0);
    let (lower_half, upper, _) = values.select_nth_unstable_by(mid, by_dist);
    let upper = *upper;
    if n % 2 == 1 {
        Some((upper.0, vec![(upper.1, upper.2, 1.0)]))
    } else {
        let lower = *lower_half.iter().max_by(|a, b| by_dist(a, b)).expect("n >= 2");
        Some((
            0.5 * (lower.0 + upper.0),
            vec![(lower.1, lower.2, 0.5), (upper.1, upper.2, 0.5)],
        ))
    }
}

fn check_mmd_inputs(v: &Tensor2, u: &Tensor2, sigmas: &[f64]) -> Result<()> {
    if v.rows() == 0 || u.rows() == 0 {
        return Err(Error::EmptyInput("mmd2 sample set"));
    }
    if v.cols() != u.cols() {
        return Err(Error::shape(
            "mmd2",
            format!("{} vs {} dims", v.cols(), u.cols()),
        ));
    }
    if sigmas.is_empty() {
        return Err(Error::EmptyInput("mmd2 bandwidth list"));
    }
    if let Some(s) = sigmas.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
        return Err(Error::InvalidInput(format!(
            "rbf bandwidth must be positive, got {s}"
        )));
    }
    Ok(())
}

fn pairwise_sq(a: &Tensor2, b: &Tensor2) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.rows() * b.rows());
    for ra in a.iter_rows() {
        for rb in b.iter_rows() {
            out.push(sq_dist(ra, rb));
        }
    }
    out
}

/// Kernel sum `Σ_σ k_σ(d²)` for a squared distance.
#[inline]
fn multi_kernel(d2: f64, inv_two_s2: &[f64]) -> f64 {
    inv_two_s2.iter().map(|c| (-d2 * c).exp()).sum()
}

/// Biased (V-statistic) squared MMD summed over the bandwidth list:
/// `Σ_σ [ mean k(v,v') + mean k(u,u') − 2 mean k(v,u) ]`.
pub fn mmd2(v: &Tensor2, u: &Tensor2, sigmas: &[f64]) -> Result<f64> {
    check_mmd_inputs(v, u, sigmas)?;
    let c: Vec<f64> = sigmas.iter().map(|s| 1.0 / (2.0 * s * s)).collect();
    let mean_k = |a: &Tensor2, b: &Tensor2| -> f64 {
        let total: f64 = pairwise_sq(a, b).iter().map(|&d2| multi_kernel(d2, &c)).sum();
        total / (a.rows() * b.rows()) as f64
    };
    let value = mean_k(v, v) + mean_k(u, u) - 2.0 * mean_k(v, u);
    Ok(value.max(0.0))
}

/// [`mmd2`] together with its gradients with respect to every row of `V`
/// and `U`, bandwidths held fixed.
pub fn mmd2_with_grad(v: &Tensor2, u: &Tensor2, sigmas: &[f64]) -> Result<(f64, Tensor2, Tensor2)> {
    let g = mmd2_grads(v, u, sigmas)?;
    Ok((g.value, g.grad_v, g.grad_u))
}

#[derive(Debug, Clone)]
pub struct MmdGrad {
    pub value: f64,
    pub grad_v: Tensor2,
    pub grad_u: Tensor2,
    /// Partial derivative with respect to each bandwidth.
    pub grad_sigmas: Vec<f64>,
}

/// [`mmd2`] with gradients on both sample sets and on the bandwidths.
pub fn mmd2_grads(v: &Tensor2, u: &Tensor2, sigmas: &[f64]) -> Result<MmdGrad> {
    check_mmd_inputs(v, u, sigmas)?;
    let c: Vec<f64> = sigmas.iter().map(|s| 1.0 / (2.0 * s * s)).collect();
    let (m, n) = (v.rows(), u.rows());
    let dim = v.cols();
    let mut grad_v = Tensor2::zeros(m, dim);
    let mut grad_u = Tensor2::zeros(n, dim);

    // dk/da for k(a,b) = Σ_σ exp(-c‖a-b‖²) is -2 Σ_σ c·exp(..) (a-b),
    // and d exp(-‖a-b‖²/2σ²)/dσ = exp(..)·‖a-b‖²/σ³
    let mut grad_sigmas = vec![0.0; sigmas.len()];
    let mut kernel_and_slope = |a: &[f64], b: &[f64], weight: f64| -> (f64, f64) {
        let d2 = sq_dist(a, b);
        let mut k = 0.0;
        let mut slope = 0.0;
        for ((ci, s), gs) in c.iter().zip(sigmas).zip(grad_sigmas.iter_mut()) {
            let e = (-d2 * ci).exp();
            k += e;
            slope -= 2.0 * ci * e;
            *gs += weight * e * d2 / (s * s * s);
        }
        (k, slope)
    };

    let mut vv = 0.0;
    for i in 0..m {
        for j in 0..m {
            let (k, slope) = kernel_and_slope(v.row(i), v.row(j), 1.0 / (m * m) as f64);
            vv += k;
            if i != j {
                // both arguments of k(v_i, v_j) depend on v_i; the symmetric pair doubles it
                let w = 2.0 * slope / (m * m) as f64;
                let (vi, vj) = (v.row(i).to_vec(), v.row(j));
                for (g, (a, b)) in grad_v.row_mut(i).iter_mut().zip(vi.iter().zip(vj)) {
                    *g += w * (a - b);
                }
            }
        }
    }
    let mut uu = 0.0;
    for i in 0..n {
        for j in 0..n {
            let (k, slope) = kernel_and_slope(u.row(i), u.row(j), 1.0 / (n * n) as f64);
            uu += k;
            if i != j {
                let w = 2.0 * slope / (n * n) as f64;
                let (ui, uj) = (u.row(i).to_vec(), u.row(j));
                for (g, (a, b)) in grad_u.row_mut(i).iter_mut().zip(ui.iter().zip(uj)) {
                    *g += w * (a - b);
                }
            }
        }
    }
    let mut vu = 0.0;
    for i in 0..m {
        for j in 0..n {
            let (k, slope) = kernel_and_slope(v.row(i), u.row(j), -2.0 / (m * n) as f64);
            vu += k;
            let w = -2.0 * slope / (m * n) as f64;
            for d in 0..dim {
                let diff = v[(i, d)] - u[(j, d)];
                grad_v[(i, d)] += w * diff;
                grad_u[(j, d)] -= w * diff;
            }
        }
    }
    let value = vv / (m * m) as f64 + uu / (n * n) as f64 - 2.0 * vu / (m * n) as f64;
    Ok(MmdGrad {
        value: value.max(0.0),
        grad_v,
        grad_u,
        grad_sigmas,
    })
}

/// [`mmd2`] with median-heuristic bandwidths, differentiated through the
/// bandwidth as well: the median pair distance is a function of the rows
/// that realise it. This makes the gradient blind to a uniform rescaling of
/// all rows, which the value is invariant to.
pub fn mmd2_median_grads(v: &Tensor2, u: &Tensor2) -> Result<(MmdGrad, MedianBandwidth)> {
    let bw = median_heuristic(v, u);
    let mut g = mmd2_grads(v, u, &bw.sigmas)?;
    let d_base: f64 = g
        .grad_sigmas
        .iter()
        .zip(MEDIAN_MULTIPLIERS)
        .map(|(gs, mult)| gs * mult)
        .sum();
    let m = v.rows();
    for &(i, j, w) in &bw.pairs {
        let (a, b) = (row_of(v, u, i).to_vec(), row_of(v, u, j).to_vec());
        let dist = sq_dist(&a, &b).sqrt();
        let scale = d_base * w / dist;
        for (idx, sign) in [(i, 1.0), (j, -1.0)] {
            let out = if idx < m { g.grad_v.row_mut(idx) } else { g.grad_u.row_mut(idx - m) };
            for (o, (x, y)) in out.iter_mut().zip(a.iter().zip(&b)) {
                *o += sign * scale * (x - y);
            }
        }
    }
    Ok((g, bw))
}

fn row_of<'a>(v: &'a Tensor2, u: &'a Tensor2, i: usize) -> &'a [f64] {
    if i < v.rows() {
        v.row(i)
    } else {
        u.row(i - v.rows())
    }
}
