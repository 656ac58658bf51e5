//! Adaptive knowledge consistency (AKC) and adaptive representation
//! consistency (ARC).
//!
//! Both regularizers admit a sample only when a prediction entropy is at or
//! below a threshold. AKC gates on the frozen source model's predictions and
//! penalises drift of target features away from source features. ARC gates on
//! the current target model and penalises the MMD between confident labeled
//! and unlabeled representations, smoothed by per-stream replay buffers.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Classifier, Gradients, ModelPair};
use crate::numerics::{
    self, entropy, entropy_rows, kl_grad_q, kl_raw, median_heuristic_sigmas, mmd2_grads, mmd2_median_grads,
    softmax_backward, softmax_rows, ProbVec,
};
use crate::tensor::Tensor2;

/// Entropy thresholds in nats.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GateConfig {
    pub eps_k: f64,
    pub eps_r: f64,
}

/// Default thresholds are this fraction of the maximum entropy `ln C`.
pub const DEFAULT_GATE_RATIO: f64 = 0.7;

impl GateConfig {
    pub fn from_ratios(k_ratio: f64, r_ratio: f64, source_classes: usize, target_classes: usize) -> Self {
        Self {
            eps_k: k_ratio * (source_classes as f64).ln(),
            eps_r: r_ratio * (target_classes as f64).ln(),
        }
    }

    pub fn defaults(source_classes: usize, target_classes: usize) -> Self {
        Self::from_ratios(DEFAULT_GATE_RATIO, DEFAULT_GATE_RATIO, source_classes, target_classes)
    }
}

/// Hard entropy gate, inclusive at the boundary.
#[inline]
pub fn entropy_gate(entropy: f64, eps: f64) -> bool {
    entropy <= eps
}

/// AKC sample weight for one source prediction: 1 iff `H(p) ≤ ε_K`.
pub fn akc_gate(p_source: &ProbVec, eps_k: f64) -> f64 {
    if entropy_gate(entropy(p_source), eps_k) {
        1.0
    } else {
        0.0
    }
}

/// Divergence between source and target features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DivergenceMode {
    /// KL between softmax-normalized source and target features.
    Kl,
    /// Mean squared error between raw features.
    #[default]
    Mse,
}

/// A mini-batch `L ∪ U` annotated with source entropies and gate weights.
#[derive(Debug, Clone)]
pub struct GatedBatch {
    pub features_target: Tensor2,
    pub features_source: Tensor2,
    pub entropies: Vec<f64>,
    pub weights: Vec<f64>,
    pub labeled: usize,
    pub unlabeled: usize,
}

impl GatedBatch {
    pub fn new(
        features_target: Tensor2,
        features_source: Tensor2,
        entropies: Vec<f64>,
        eps_k: f64,
        labeled: usize,
    ) -> Result<Self> {
        let weights = entropies
            .iter()
            .map(|&h| if entropy_gate(h, eps_k) { 1.0 } else { 0.0 })
            .collect();
        Self::with_weights(features_target, features_source, entropies, weights, labeled)
    }

    pub fn with_weights(
        features_target: Tensor2,
        features_source: Tensor2,
        entropies: Vec<f64>,
        weights: Vec<f64>,
        labeled: usize,
    ) -> Result<Self> {
        let n = features_target.rows();
        if n == 0 {
            return Err(Error::EmptyInput("akc batch"));
        }
        if features_source.shape() != features_target.shape() {
            return Err(Error::shape(
                "akc batch",
                format!("source {:?} vs target {:?}", features_source.shape(), features_target.shape()),
            ));
        }
        if entropies.len() != n || weights.len() != n || labeled > n {
            return Err(Error::shape(
                "akc batch",
                format!("{n} rows, {} entropies, {} weights, {labeled} labeled", entropies.len(), weights.len()),
            ));
        }
        Ok(Self {
            features_target,
            features_source,
            entropies,
            weights,
            labeled,
            unlabeled: n - labeled,
        })
    }

    pub fn len(&self) -> usize {
        self.labeled + self.unlabeled
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn selected_fraction(&self) -> f64 {
        self.weights.iter().sum::<f64>() / self.len() as f64
    }
}

#[derive(Debug, Clone)]
pub struct AkcTerm {
    pub value: f64,
    /// Gradient with respect to `features_target`.
    pub grad_features: Tensor2,
    pub selected_fraction: f64,
}

/// `R_K = 1/(B_l+B_u) Σ_i w_i · D(F_θ⁰(x_i), F_θ(x_i))` and its gradient on
/// the target features.
pub fn akc_term(batch: &GatedBatch, mode: DivergenceMode) -> Result<AkcTerm> {
    let n = batch.len();
    let h = batch.features_target.cols();
    let mut grad = Tensor2::zeros(n, h);
    let mut total = 0.0;
    let (src_p, tgt_p) = match mode {
        DivergenceMode::Kl => (
            Some(softmax_rows(&batch.features_source)?),
            Some(softmax_rows(&batch.features_target)?),
        ),
        DivergenceMode::Mse => (None, None),
    };
    let scale = 1.0 / n as f64;
    for i in 0..n {
        let w = batch.weights[i];
        if w == 0.0 {
            continue;
        }
        let (s, t) = (batch.features_source.row(i), batch.features_target.row(i));
        match (&src_p, &tgt_p) {
            (Some(sp), Some(tp)) => {
                let (p, q) = (sp.row(i), tp.row(i));
                total += w * kl_raw(p, q)?;
                let mut gq = vec![0.0; h];
                kl_grad_q(p, q, &mut gq);
                softmax_backward(q, &gq, grad.row_mut(i));
            }
            _ => {
                let mut d = 0.0;
                for (gj, (&sj, &tj)) in grad.row_mut(i).iter_mut().zip(s.iter().zip(t)) {
                    d += (tj - sj) * (tj - sj);
                    *gj = 2.0 * (tj - sj) / h as f64;
                }
                total += w * d / h as f64;
            }
        }
        for g in grad.row_mut(i) {
            *g *= w * scale;
        }
    }
    Ok(AkcTerm {
        value: total * scale,
        grad_features: grad,
        selected_fraction: batch.selected_fraction(),
    })
}

/// Model-level output of a loss: value plus parameter gradients.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub value: f64,
    pub grads: Gradients,
}

#[derive(Debug, Clone)]
pub struct AkcLoss {
    pub value: f64,
    pub grads: Gradients,
    pub selected_fraction: f64,
}

/// AKC on a stacked batch (`labeled` leading rows, then unlabeled rows),
/// running both models forward. Gradients reach the target extractor only.
pub fn akc_loss(
    pair: &ModelPair,
    x: &Tensor2,
    labeled: usize,
    eps_k: f64,
    mode: DivergenceMode,
) -> Result<AkcLoss> {
    if x.rows() == 0 {
        return Err(Error::EmptyInput("akc batch"));
    }
    let src = pair.source().forward(x)?;
    let entropies = entropy_rows(&softmax_rows(src.logits())?);
    let fwd = pair.target.forward(x)?;
    let batch = GatedBatch::new(fwd.features().clone(), src.features().clone(), entropies, eps_k, labeled)?;
    let term = akc_term(&batch, mode)?;
    let grads = pair.target.backward(&fwd, Some(&term.grad_features), None)?;
    Ok(AkcLoss {
        value: term.value,
        grads,
        selected_fraction: term.selected_fraction,
    })
}

/// Indices of rows whose prediction entropy is at most `eps_r`, in order.
pub fn arc_select(probs: &Tensor2, eps_r: f64) -> Vec<usize> {
    entropy_rows(probs)
        .into_iter()
        .enumerate()
        .filter(|(_, h)| entropy_gate(*h, eps_r))
        .map(|(i, _)| i)
        .collect()
}

/// Default replay capacity per stream.
pub const DEFAULT_BUFFER_CAPACITY: usize = 256;
/// Default number of most recent rows fetched per step.
pub const DEFAULT_BUFFER_K: usize = 64;
/// Default minimum size of each fetched set before ARC applies. On a handful
/// of rows the V-statistic is dominated by its `1/m` diagonal bias, and
/// chasing it early in training, when few predictions pass the gate,
/// scrambles the representation.
pub const DEFAULT_ARC_MIN_ROWS: usize = 16;

/// Bounded FIFO of detached representation rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    capacity: usize,
    k: usize,
    dim: Option<usize>,
    entries: VecDeque<(Vec<f64>, u64)>,
}

/// Result of [`ReplayBuffer::update_and_fetch`].
#[derive(Debug, Clone)]
pub struct Fetched {
    pub rows: Tensor2,
    /// For each fetched row, its index in the rows just pushed, if it came
    /// from the current update.
    pub current: Vec<Option<usize>>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, k: usize) -> Result<Self> {
        if capacity == 0 || k == 0 {
            return Err(Error::InvalidInput(
                "replay buffer capacity and k must be positive".into(),
            ));
        }
        Ok(Self {
            capacity,
            k,
            dim: None,
            entries: VecDeque::with_capacity(capacity),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn steps(&self) -> impl Iterator<Item = u64> + '_ {
        self.entries.iter().map(|(_, s)| *s)
    }

    /// Appends copies of `rows`, evicting oldest entries beyond capacity.
    pub fn update(&mut self, rows: &Tensor2, step: u64) -> Result<()> {
        if rows.rows() == 0 {
            return Ok(());
        }
        match self.dim {
            Some(d) if d != rows.cols() => {
                return Err(Error::shape(
                    "replay buffer",
                    format!("rows of width {} for a buffer of width {d}", rows.cols()),
                ))
            }
            _ => self.dim = Some(rows.cols()),
        }
        for r in rows.iter_rows() {
            if self.entries.len() == self.capacity {
                self.entries.pop_front();
            }
            self.entries.push_back((r.to_vec(), step));
        }
        Ok(())
    }

    /// The most recent `min(k, len)` rows, oldest first.
    pub fn get_last_k(&self) -> Tensor2 {
        let take = self.k.min(self.entries.len());
        let mut out = Tensor2::zeros(0, self.dim.unwrap_or(0));
        for (row, _) in self.entries.iter().skip(self.entries.len() - take) {
            out.push_row(row).expect("uniform width");
        }
        out
    }

    pub fn update_and_fetch(&mut self, rows: &Tensor2, step: u64) -> Result<Fetched> {
        self.update(rows, step)?;
        let fetched = self.get_last_k();
        let len = self.entries.len();
        let pushed = rows.rows().min(self.capacity);
        // the last `pushed` entries are rows[rows.rows()-pushed ..]
        let offset = rows.rows() - pushed;
        let first = len - fetched.rows();
        let current = (first..len)
            .map(|e| {
                let from_end = len - e;
                (from_end <= pushed).then(|| offset + pushed - from_end)
            })
            .collect();
        Ok(Fetched {
            rows: fetched,
            current,
        })
    }
}

/// One buffer per stream.
#[derive(Debug, Clone, PartialEq)]
pub struct ArcBuffers {
    pub labeled: ReplayBuffer,
    pub unlabeled: ReplayBuffer,
    /// ARC is skipped while either fetched set has fewer rows than this.
    pub min_rows: usize,
}

impl ArcBuffers {
    /// Buffers that run ARC as soon as both sets have two rows, the
    /// smallest sets MMD is defined on.
    pub fn new(capacity: usize, k: usize) -> Result<Self> {
        Ok(Self {
            labeled: ReplayBuffer::new(capacity, k)?,
            unlabeled: ReplayBuffer::new(capacity, k)?,
            min_rows: 2,
        })
    }

    pub fn with_min_rows(mut self, min_rows: usize) -> Self {
        self.min_rows = min_rows.max(2);
        self
    }
}

impl Default for ArcBuffers {
    fn default() -> Self {
        Self::new(DEFAULT_BUFFER_CAPACITY, DEFAULT_BUFFER_K).expect("positive defaults")
    }
}

/// Kernel bandwidth policy for the ARC MMD.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum Bandwidth {
    /// Median pairwise distance of the current inputs times {0.5, 1, 2},
    /// differentiated through the rows that set the median.
    #[default]
    Median,
    Fixed(Vec<f64>),
}

#[derive(Debug, Clone)]
pub struct ArcTerm {
    pub value: f64,
    pub grad_labeled: Tensor2,
    pub grad_unlabeled: Tensor2,
    pub labeled_fraction: f64,
    pub unlabeled_fraction: f64,
    /// Bandwidths used, empty when the term was skipped.
    pub sigmas: Vec<f64>,
    pub skipped: bool,
}

fn fraction(selected: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        selected as f64 / total as f64
    }
}

/// `R_R = MMD²(F_l*, F_u*)` over the confident rows of the current batch plus
/// recently buffered confident rows. Only current-batch rows carry gradient.
/// While either side has fewer than `buffers.min_rows` rows the term is 0
/// with zero gradient.
#[allow(clippy::too_many_arguments)]
pub fn arc_term(
    features_labeled: &Tensor2,
    probs_labeled: &Tensor2,
    features_unlabeled: &Tensor2,
    probs_unlabeled: &Tensor2,
    eps_r: f64,
    buffers: &mut ArcBuffers,
    step: u64,
    bandwidth: &Bandwidth,
) -> Result<ArcTerm> {
    for (f, p) in [(features_labeled, probs_labeled), (features_unlabeled, probs_unlabeled)] {
        if f.rows() != p.rows() {
            return Err(Error::shape(
                "arc",
                format!("{} feature rows for {} predictions", f.rows(), p.rows()),
            ));
        }
    }
    let sel_l = arc_select(probs_labeled, eps_r);
    let sel_u = arc_select(probs_unlabeled, eps_r);
    let fetched_l = buffers
        .labeled
        .update_and_fetch(&features_labeled.select_rows(&sel_l), step)?;
    let fetched_u = buffers
        .unlabeled
        .update_and_fetch(&features_unlabeled.select_rows(&sel_u), step)?;

    let mut grad_l = Tensor2::zeros(features_labeled.rows(), features_labeled.cols());
    let mut grad_u = Tensor2::zeros(features_unlabeled.rows(), features_unlabeled.cols());
    let labeled_fraction = fraction(sel_l.len(), features_labeled.rows());
    let unlabeled_fraction = fraction(sel_u.len(), features_unlabeled.rows());

    if fetched_l.rows.rows() < buffers.min_rows || fetched_u.rows.rows() < buffers.min_rows {
        return Ok(ArcTerm {
            value: 0.0,
            grad_labeled: grad_l,
            grad_unlabeled: grad_u,
            labeled_fraction,
            unlabeled_fraction,
            sigmas: Vec::new(),
            skipped: true,
        });
    }

    let (g, sigmas) = match bandwidth {
        Bandwidth::Median => {
            let (g, bw) = mmd2_median_grads(&fetched_l.rows, &fetched_u.rows)?;
            (g, bw.sigmas)
        }
        Bandwidth::Fixed(s) => (mmd2_grads(&fetched_l.rows, &fetched_u.rows, s)?, s.clone()),
    };
    scatter(&g.grad_v, &fetched_l.current, &sel_l, &mut grad_l);
    scatter(&g.grad_u, &fetched_u.current, &sel_u, &mut grad_u);
    Ok(ArcTerm {
        value: g.value,
        grad_labeled: grad_l,
        grad_unlabeled: grad_u,
        labeled_fraction,
        unlabeled_fraction,
        sigmas,
        skipped: false,
    })
}

/// Routes gradients of fetched rows back to the batch rows they came from.
/// Rows that were only buffered are dropped: they are detached.
fn scatter(grad: &Tensor2, current: &[Option<usize>], selected: &[usize], out: &mut Tensor2) {
    for (r, src) in current.iter().enumerate() {
        if let Some(j) = src {
            let row = selected[*j];
            for (o, g) in out.row_mut(row).iter_mut().zip(grad.row(r)) {
                *o += g;
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct ArcLoss {
    pub value: f64,
    pub grads: Gradients,
    pub term: ArcTerm,
}

/// ARC on the target model: forward both batches, gate on current
/// predictions, update the buffers and backpropagate into the extractor.
pub fn arc_loss(
    target: &Classifier,
    x_labeled: &Tensor2,
    x_unlabeled: &Tensor2,
    eps_r: f64,
    buffers: &mut ArcBuffers,
    step: u64,
    bandwidth: &Bandwidth,
) -> Result<ArcLoss> {
    let fl = target.forward(x_labeled)?;
    let fu = target.forward(x_unlabeled)?;
    let term = arc_term(
        fl.features(),
        &softmax_rows(fl.logits())?,
        fu.features(),
        &softmax_rows(fu.logits())?,
        eps_r,
        buffers,
        step,
        bandwidth,
    )?;
    let mut grads = target.backward(&fl, Some(&term.grad_labeled), None)?;
    grads.add_scaled(1.0, &target.backward(&fu, Some(&term.grad_unlabeled), None)?)?;
    Ok(ArcLoss {
        value: term.value,
        grads,
        term,
    })
}

/// Full-set MMD² between two representation sets with median bandwidths; a
/// diagnostic of how far apart labeled and unlabeled features are.
pub fn representation_gap(labeled: &Tensor2, unlabeled: &Tensor2) -> Result<f64> {
    let sigmas = median_heuristic_sigmas(labeled, unlabeled);
    numerics::mmd2(labeled, unlabeled, &sigmas)
}
