//! Supervised cross-entropy and the two semi-supervised baselines that plug
//! into the `λ_S · L_S` slot: pseudo-labeling and mean teacher.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::consistency::LossGrad;
use crate::error::{Error, Result};
use crate::model::Classifier;
use crate::numerics::{clamped_ln, softmax_backward, softmax_rows, LOG_CLAMP};
use crate::tensor::Tensor2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SslMethod {
    #[default]
    None,
    PseudoLabel,
    MeanTeacher,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SslConfig {
    pub method: SslMethod,
    pub lambda_s: f64,
    /// Minimum max-probability for a pseudo-label to be accepted.
    pub pl_confidence: f64,
    pub ema_alpha: f64,
    /// Perturbation std as a fraction of each input feature's std.
    pub noise_std: f64,
}

impl Default for SslConfig {
    fn default() -> Self {
        Self {
            method: SslMethod::None,
            lambda_s: 1.0,
            pl_confidence: 0.95,
            ema_alpha: 0.999,
            noise_std: 0.1,
        }
    }
}

/// Mean `−ln p_y` over the batch, and its gradient on the logits.
pub fn cross_entropy(logits: &Tensor2, labels: &[usize]) -> Result<(f64, Tensor2)> {
    if logits.rows() != labels.len() {
        return Err(Error::shape(
            "cross_entropy",
            format!("{} logit rows for {} labels", logits.rows(), labels.len()),
        ));
    }
    if labels.is_empty() {
        return Err(Error::EmptyInput("cross_entropy batch"));
    }
    let classes = logits.cols();
    if let Some(&label) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::InvalidLabel { label, classes });
    }
    let probs = softmax_rows(logits)?;
    let n = labels.len() as f64;
    let mut grad = probs.clone();
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let py = probs[(i, y)];
        total -= clamped_ln(py);
        let row = grad.row_mut(i);
        if py > LOG_CLAMP {
            row[y] -= 1.0;
            for g in row.iter_mut() {
                *g /= n;
            }
        } else {
            row.fill(0.0);
        }
    }
    Ok((total / n, grad))
}

pub fn cross_entropy_loss(model: &Classifier, x: &Tensor2, labels: &[usize]) -> Result<LossGrad> {
    let fwd = model.forward(x)?;
    let (value, dlogits) = cross_entropy(fwd.logits(), labels)?;
    Ok(LossGrad {
        value,
        grads: model.backward(&fwd, None, Some(&dlogits))?,
    })
}

#[derive(Debug, Clone)]
pub struct PseudoLabelTerm {
    pub value: f64,
    pub grad_logits: Tensor2,
    pub accepted: usize,
}

/// Cross-entropy against the argmax label of every row whose top
/// probability reaches `confidence`, averaged over accepted rows.
pub fn pseudo_label_term(logits: &Tensor2, confidence: f64) -> Result<PseudoLabelTerm> {
    if logits.rows() == 0 {
        return Err(Error::EmptyInput("pseudo-label batch"));
    }
    let probs = softmax_rows(logits)?;
    let labels = probs.argmax_rows();
    let accepted: Vec<usize> = (0..probs.rows())
        .filter(|&i| probs[(i, labels[i])] >= confidence)
        .collect();
    let mut grad = Tensor2::zeros(logits.rows(), logits.cols());
    if accepted.is_empty() {
        return Ok(PseudoLabelTerm {
            value: 0.0,
            grad_logits: grad,
            accepted: 0,
        });
    }
    let sub_labels: Vec<usize> = accepted.iter().map(|&i| labels[i]).collect();
    let (value, sub_grad) = cross_entropy(&logits.select_rows(&accepted), &sub_labels)?;
    for (r, &i) in accepted.iter().enumerate() {
        grad.row_mut(i).copy_from_slice(sub_grad.row(r));
    }
    Ok(PseudoLabelTerm {
        value,
        grad_logits: grad,
        accepted: accepted.len(),
    })
}

pub fn pseudo_label_loss(model: &Classifier, x_unlabeled: &Tensor2, confidence: f64) -> Result<LossGrad> {
    let fwd = model.forward(x_unlabeled)?;
    let term = pseudo_label_term(fwd.logits(), confidence)?;
    Ok(LossGrad {
        value: term.value,
        grads: model.backward(&fwd, None, Some(&term.grad_logits))?,
    })
}

/// Mean over all entries of `(softmax(student) − softmax(teacher))²`, with
/// the gradient on the student logits only.
pub fn mean_teacher_term(student_logits: &Tensor2, teacher_logits: &Tensor2) -> Result<(f64, Tensor2)> {
    if student_logits.shape() != teacher_logits.shape() {
        return Err(Error::shape(
            "mean_teacher",
            format!("{:?} vs {:?}", student_logits.shape(), teacher_logits.shape()),
        ));
    }
    if student_logits.is_empty() {
        return Err(Error::EmptyInput("mean-teacher batch"));
    }
    let ps = softmax_rows(student_logits)?;
    let pt = softmax_rows(teacher_logits)?;
    let n = ps.len() as f64;
    let diff = ps.sub(&pt)?;
    let value = diff.frobenius_sq() / n;
    let mut grad = Tensor2::zeros(ps.rows(), ps.cols());
    for i in 0..ps.rows() {
        let gp: Vec<f64> = diff.row(i).iter().map(|d| 2.0 * d / n).collect();
        softmax_backward(ps.row(i), &gp, grad.row_mut(i));
    }
    Ok((value, grad))
}

/// Mean-teacher consistency on `x + noise_student` (student) versus
/// `x + noise_teacher` (teacher). The teacher is read-only.
pub fn mean_teacher_loss(
    student: &Classifier,
    teacher: &Classifier,
    x_unlabeled: &Tensor2,
    noise_student: &Tensor2,
    noise_teacher: &Tensor2,
) -> Result<LossGrad> {
    let fs = student.forward(&x_unlabeled.add(noise_student)?)?;
    let ft = teacher.forward(&x_unlabeled.add(noise_teacher)?)?;
    let (value, dlogits) = mean_teacher_term(fs.logits(), ft.logits())?;
    Ok(LossGrad {
        value,
        grads: student.backward(&fs, None, Some(&dlogits))?,
    })
}

/// Per-column standard deviation (population form).
pub fn feature_std(x: &Tensor2) -> Vec<f64> {
    let n = x.rows().max(1) as f64;
    let mean: Vec<f64> = x.col_sums().data().iter().map(|s| s / n).collect();
    let mut var = vec![0.0; x.cols()];
    for r in x.iter_rows() {
        for ((v, &xi), &m) in var.iter_mut().zip(r).zip(&mean) {
            *v += (xi - m) * (xi - m);
        }
    }
    var.into_iter().map(|v| (v / n).sqrt()).collect()
}

/// Additive Gaussian noise with column `j` drawn at `relative · std[j]`.
pub fn gaussian_noise(rows: usize, std: &[f64], relative: f64, rng: &mut impl Rng) -> Tensor2 {
    let mut out = Tensor2::zeros(rows, std.len());
    if relative == 0.0 {
        return out;
    }
    let unit = Normal::new(0.0, 1.0).expect("valid normal");
    for r in 0..rows {
        for (o, s) in out.row_mut(r).iter_mut().zip(std) {
            *o = unit.sample(rng) * relative * s;
        }
    }
    out
}
