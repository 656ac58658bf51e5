//! Loss assembly, SGD with momentum, the cosine schedule and batch sampling.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::config::LossWeights;
use crate::consistency::{akc_term, arc_term, ArcBuffers, Bandwidth, DivergenceMode, GatedBatch};
use crate::error::{Error, Result};
use crate::model::{Classifier, Gradients, ModelPair};
use crate::numerics::{entropy_rows, softmax_rows};
use crate::ssl::{cross_entropy, mean_teacher_term, pseudo_label_term, SslConfig, SslMethod};
use crate::tensor::Tensor2;

/// `η_t = η_0 · cos(7πt / 16T)`.
pub fn cosine_lr(t: usize, total: usize, eta0: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::InvalidInput("schedule needs at least one step".into()));
    }
    if t > total {
        return Err(Error::InvalidInput(format!("step {t} beyond schedule length {total}")));
    }
    Ok(eta0 * (7.0 * std::f64::consts::PI * t as f64 / (16.0 * total as f64)).cos())
}

pub const DEFAULT_MOMENTUM: f64 = 0.9;

/// Momentum buffers plus schedule position.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    velocity: Vec<Tensor2>,
    pub momentum: f64,
    pub step: usize,
    pub total_steps: usize,
    pub eta0: f64,
}

impl OptimState {
    pub fn new(params: &[&Tensor2], momentum: f64, total_steps: usize, eta0: f64) -> Self {
        Self {
            velocity: params.iter().map(|p| Tensor2::zeros(p.rows(), p.cols())).collect(),
            momentum,
            step: 0,
            total_steps,
            eta0,
        }
    }

    pub fn for_model(model: &Classifier, momentum: f64, total_steps: usize, eta0: f64) -> Self {
        Self::new(&model.params(), momentum, total_steps, eta0)
    }

    pub fn velocity(&self) -> &[Tensor2] {
        &self.velocity
    }

    pub fn current_lr(&self) -> Result<f64> {
        cosine_lr(self.step, self.total_steps, self.eta0)
    }
}

/// `v ← μ·v + g; p ← p − η_t·v`, then advance the schedule. Returns `η_t`.
pub fn sgd_step(params: Vec<&mut Tensor2>, grads: &[Tensor2], opt: &mut OptimState) -> Result<f64> {
    if params.len() != grads.len() || params.len() != opt.velocity.len() {
        return Err(Error::shape(
            "sgd_step",
            format!("{} params, {} grads, {} buffers", params.len(), grads.len(), opt.velocity.len()),
        ));
    }
    if opt.step >= opt.total_steps {
        return Err(Error::State(format!("schedule of {} steps exhausted", opt.total_steps)));
    }
    let lr = opt.current_lr()?;
    for ((p, g), v) in params.into_iter().zip(grads).zip(opt.velocity.iter_mut()) {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(Error::shape(
                "sgd_step",
                format!("param {:?}, grad {:?}, buffer {:?}", p.shape(), g.shape(), v.shape()),
            ));
        }
        for ((pi, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vi = opt.momentum * *vi + gi;
            *pi -= lr * *vi;
        }
    }
    opt.step += 1;
    Ok(lr)
}

/// Endless stream of index batches: a fresh permutation per pass, continuing
/// into the next permutation when a batch straddles the boundary.
#[derive(Debug, Clone)]
pub struct BatchSampler {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(len: usize, batch: usize, mut rng: ChaCha8Rng) -> Result<Self> {
        if len == 0 {
            return Err(Error::EmptyInput("sampling pool"));
        }
        if batch == 0 {
            return Err(Error::InvalidInput("batch size must be positive".into()));
        }
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        Ok(Self { order, pos: 0, batch, rng })
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.batch);
        while out.len() < self.batch {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            let take = (self.batch - out.len()).min(self.order.len() - self.pos);
            out.extend_from_slice(&self.order[self.pos..self.pos + take]);
            self.pos += take;
        }
        out
    }
}

/// Draws the next labeled and unlabeled index batches.
pub fn sample_batches(labeled: &mut BatchSampler, unlabeled: &mut BatchSampler) -> (Vec<usize>, Vec<usize>) {
    (labeled.next_batch(), unlabeled.next_batch())
}

/// Which regularizers run and how.
#[derive(Debug, Clone, PartialEq)]
pub struct LossSetup {
    pub weights: LossWeights,
    pub akc: bool,
    pub arc: bool,
    pub akc_mode: DivergenceMode,
    pub eps_r: f64,
    pub bandwidth: Bandwidth,
    pub ssl: SslConfig,
}

/// Everything one optimisation step consumes besides the models.
#[derive(Debug, Clone)]
pub struct StepInputs {
    pub x_labeled: Tensor2,
    pub y_labeled: Vec<usize>,
    pub x_unlabeled: Tensor2,
    /// Frozen-source features of the labeled and unlabeled rows.
    pub source_features_labeled: Tensor2,
    pub source_features_unlabeled: Tensor2,
    pub akc_weights_labeled: Vec<f64>,
    pub akc_weights_unlabeled: Vec<f64>,
    /// Perturbation of the student input (pseudo-label and mean teacher).
    pub noise_student: Option<Tensor2>,
    /// Perturbation of the teacher input (mean teacher).
    pub noise_teacher: Option<Tensor2>,
}

impl StepInputs {
    /// Runs the frozen source model to produce features and AKC weights.
    pub fn from_pair(
        pair: &ModelPair,
        x_labeled: Tensor2,
        y_labeled: Vec<usize>,
        x_unlabeled: Tensor2,
        eps_k: f64,
    ) -> Result<Self> {
        let src_l = pair.source().forward(&x_labeled)?;
        let src_u = pair.source().forward(&x_unlabeled)?;
        let gate = |logits: &Tensor2| -> Result<Vec<f64>> {
            Ok(entropy_rows(&softmax_rows(logits)?)
                .into_iter()
                .map(|h| if h <= eps_k { 1.0 } else { 0.0 })
                .collect())
        };
        Ok(Self {
            akc_weights_labeled: gate(src_l.logits())?,
            akc_weights_unlabeled: gate(src_u.logits())?,
            source_features_labeled: src_l.features().clone(),
            source_features_unlabeled: src_u.features().clone(),
            x_labeled,
            y_labeled,
            x_unlabeled,
            noise_student: None,
            noise_teacher: None,
        })
    }
}

/// Raw term values, their weighted contributions and gate statistics.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossBreakdown {
    pub ce: f64,
    pub ssl: f64,
    pub akc: f64,
    pub arc: f64,
    pub weighted_ssl: f64,
    pub weighted_akc: f64,
    pub weighted_arc: f64,
    pub akc_selected: f64,
    pub arc_selected_labeled: f64,
    pub arc_selected_unlabeled: f64,
    pub arc_skipped: bool,
    pub arc_sigmas: Vec<f64>,
}

impl LossBreakdown {
    pub fn sum(&self) -> f64 {
        self.ce + self.weighted_ssl + self.weighted_akc + self.weighted_arc
    }
}

#[derive(Debug, Clone)]
pub struct TotalLoss {
    pub value: f64,
    pub grads: Gradients,
    pub breakdown: LossBreakdown,
}

/// `L = L_CE + λ_S·L_S + λ_K·R_K + λ_R·R_R` and its gradient on the target
/// model. ARC updates `buffers` as a side effect.
pub fn total_loss(
    target: &Classifier,
    teacher: Option<&Classifier>,
    inputs: &StepInputs,
    setup: &LossSetup,
    buffers: &mut ArcBuffers,
    step: u64,
) -> Result<TotalLoss> {
    let b_l = inputs.x_labeled.rows();
    let b_u = inputs.x_unlabeled.rows();
    if b_l == 0 {
        return Err(Error::EmptyInput("labeled batch"));
    }
    let w = &setup.weights;
    let mut bd = LossBreakdown::default();

    let fwd_l = target.forward(&inputs.x_labeled)?;
    let (ce, d_logits_l) = cross_entropy(fwd_l.logits(), &inputs.y_labeled)?;
    bd.ce = ce;
    let h = fwd_l.features().cols();
    let mut d_feat_l = Tensor2::zeros(b_l, h);
    let mut d_feat_u = Tensor2::zeros(b_u, h);

    let needs_unlabeled = (setup.akc || setup.arc) && b_u > 0;
    let fwd_u = if needs_unlabeled {
        Some(target.forward(&inputs.x_unlabeled)?)
    } else {
        None
    };

    if setup.akc {
        let tgt = match &fwd_u {
            Some(fu) => fwd_l.features().vstack(fu.features())?,
            None => fwd_l.features().clone(),
        };
        let (src, weights) = if fwd_u.is_some() {
            (
                inputs.source_features_labeled.vstack(&inputs.source_features_unlabeled)?,
                [inputs.akc_weights_labeled.as_slice(), inputs.akc_weights_unlabeled.as_slice()].concat(),
            )
        } else {
            (inputs.source_features_labeled.clone(), inputs.akc_weights_labeled.clone())
        };
        let n = tgt.rows();
        let batch = GatedBatch::with_weights(tgt, src, vec![f64::NAN; n], weights, b_l)?;
        let term = akc_term(&batch, setup.akc_mode)?;
        bd.akc = term.value;
        bd.weighted_akc = w.lambda_k * term.value;
        bd.akc_selected = term.selected_fraction;
        d_feat_l.axpy(w.lambda_k, &term.grad_features.row_slice(0, b_l))?;
        if b_u > 0 {
            d_feat_u.axpy(w.lambda_k, &term.grad_features.row_slice(b_l, b_l + b_u))?;
        }
    }

    if setup.arc {
        if let Some(fu) = &fwd_u {
            let term = arc_term(
                fwd_l.features(),
                &softmax_rows(fwd_l.logits())?,
                fu.features(),
                &softmax_rows(fu.logits())?,
                setup.eps_r,
                buffers,
                step,
                &setup.bandwidth,
            )?;
            bd.arc = term.value;
            bd.weighted_arc = w.lambda_r * term.value;
            bd.arc_selected_labeled = term.labeled_fraction;
            bd.arc_selected_unlabeled = term.unlabeled_fraction;
            bd.arc_skipped = term.skipped;
            bd.arc_sigmas = term.sigmas;
            d_feat_l.axpy(w.lambda_r, &term.grad_labeled)?;
            d_feat_u.axpy(w.lambda_r, &term.grad_unlabeled)?;
        } else {
            bd.arc_skipped = true;
        }
    }

    let mut grads = target.backward(&fwd_l, Some(&d_feat_l), Some(&d_logits_l))?;
    if let Some(fu) = &fwd_u {
        grads.add_scaled(1.0, &target.backward(fu, Some(&d_feat_u), None)?)?;
    }

    if setup.ssl.method != SslMethod::None && b_u > 0 {
        let perturbed = |noise: &Option<Tensor2>| -> Result<Tensor2> {
            match noise {
                Some(n) => inputs.x_unlabeled.add(n),
                None => Ok(inputs.x_unlabeled.clone()),
            }
        };
        let fwd_s = target.forward(&perturbed(&inputs.noise_student)?)?;
        let (value, d_logits) = match setup.ssl.method {
            SslMethod::PseudoLabel => {
                let t = pseudo_label_term(fwd_s.logits(), setup.ssl.pl_confidence)?;
                (t.value, t.grad_logits)
            }
            SslMethod::MeanTeacher => {
                let teacher = teacher.ok_or_else(|| Error::State("mean teacher needs a teacher model".into()))?;
                let ft = teacher.forward(&perturbed(&inputs.noise_teacher)?)?;
                mean_teacher_term(fwd_s.logits(), ft.logits())?
            }
            SslMethod::None => unreachable!("guarded above"),
        };
        bd.ssl = value;
        bd.weighted_ssl = setup.ssl.lambda_s * value;
        grads.add_scaled(setup.ssl.lambda_s, &target.backward(&fwd_s, None, Some(&d_logits))?)?;
    }

    Ok(TotalLoss {
        value: bd.sum(),
        grads,
        breakdown: bd,
    })
}
