//! Source pre-training, head initialization and target fine-tuning.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, HeadInit};
use crate::consistency::{arc_select, representation_gap, ArcBuffers};
use crate::data::{generate_task, load_csv, split_labeled, SplitSet};
use crate::error::{Error, Result};
use crate::metrics::{EpochRecord, MetricsLog};
use crate::model::{ema_update, imprint, Classifier, LinearHead, ModelPair};
use crate::numerics::{entropy_rows, softmax_rows};
use crate::ssl::{cross_entropy, feature_std, gaussian_noise, SslMethod};
use crate::tensor::Tensor2;
use crate::training::{cosine_lr, sgd_step, total_loss, BatchSampler, LossBreakdown, LossSetup, OptimState, StepInputs};

// One independent ChaCha stream per purpose, so toggling a feature that
// draws random numbers never shifts the draws of another.
const STREAM_SOURCE_INIT: u64 = 1;
const STREAM_SOURCE_BATCHES: u64 = 2;
const STREAM_HEAD_INIT: u64 = 3;
const STREAM_LABELED_BATCHES: u64 = 4;
const STREAM_UNLABELED_BATCHES: u64 = 5;
const STREAM_NOISE: u64 = 6;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Source task and target split for one seed.
#[derive(Debug, Clone)]
pub struct TaskData {
    pub source: SplitSet,
    pub target: SplitSet,
    /// Original target labels when read from CSV.
    pub target_label_map: Option<Vec<i64>>,
}

/// Builds the source task and the labeled/unlabeled target split. CSV
/// targets keep the split stored in the file and ignore `n_labeled`.
pub fn prepare_data(cfg: &ExperimentConfig, seed: u64, n_labeled: usize) -> Result<TaskData> {
    match &cfg.csv {
        Some(files) => {
            let source = load_csv(&files.source, &files.schema)?;
            let target = load_csv(&files.target, &files.schema)?;
            if source.split.input_dim() != target.split.input_dim() {
                return Err(Error::shape(
                    "csv datasets",
                    format!(
                        "source has {} features, target {}",
                        source.split.input_dim(),
                        target.split.input_dim()
                    ),
                ));
            }
            Ok(TaskData {
                source: source.split,
                target: target.split,
                target_label_map: Some(target.label_map),
            })
        }
        None => {
            let (source, target) = generate_task(&cfg.task, seed)?;
            Ok(TaskData {
                source,
                target: split_labeled(&target, n_labeled, seed)?,
                target_label_map: None,
            })
        }
    }
}

#[derive(Debug, Clone)]
pub struct SourceModel {
    pub model: Classifier,
    pub test_acc: Option<f64>,
}

/// Plain cross-entropy training on the source task with the same optimizer
/// family as fine-tuning.
pub fn pretrain_source(cfg: &ExperimentConfig, source: &SplitSet, seed: u64) -> Result<SourceModel> {
    let train = &source.labeled;
    if train.is_empty() {
        return Err(Error::EmptyInput("source training set"));
    }
    let mut model = Classifier::new(train.x.cols(), &cfg.model, train.classes, &mut stream(seed, STREAM_SOURCE_INIT))?;
    let p = &cfg.pretrain;
    if p.epochs > 0 {
        let steps = train.len().div_ceil(p.batch_size);
        let mut opt = OptimState::for_model(&model, cfg.optim.momentum, p.epochs * steps, p.lr);
        let mut sampler = BatchSampler::new(train.len(), p.batch_size, stream(seed, STREAM_SOURCE_BATCHES))?;
        for _ in 0..p.epochs * steps {
            let idx = sampler.next_batch();
            let x = train.x.select_rows(&idx);
            let y: Vec<usize> = idx.iter().map(|&i| train.y[i]).collect();
            let fwd = model.forward(&x)?;
            let (_, d_logits) = cross_entropy(fwd.logits(), &y)?;
            let grads = model.backward(&fwd, None, Some(&d_logits))?;
            sgd_step(model.params_mut(), grads.tensors(), &mut opt)?;
        }
    }
    let test_acc = if source.test.is_empty() {
        None
    } else {
        Some(model.accuracy(&source.test.x, &source.test.y)?)
    };
    Ok(SourceModel { model, test_acc })
}

/// Scalar outcome of one fine-tuning run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: String,
    pub seed: u64,
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub eps_k: f64,
    pub eps_r: f64,
    pub steps: usize,
    pub source_test_acc: Option<f64>,
    /// Test accuracy right after head initialization.
    pub initial_test_acc: f64,
    pub final_test_acc: f64,
    pub best_test_acc: f64,
    pub best_epoch: usize,
    /// Full-set MMD² between labeled and unlabeled target features at the end
    /// of training, median-heuristic bandwidths.
    pub final_rep_gap: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub log: MetricsLog,
    pub summary: RunSummary,
    pub pair: ModelPair,
}

#[derive(Default)]
struct EpochAccumulator {
    ce: f64,
    ssl: f64,
    akc: f64,
    arc: f64,
    steps: usize,
}

impl EpochAccumulator {
    fn add(&mut self, b: &LossBreakdown) {
        self.ce += b.ce;
        self.ssl += b.ssl;
        self.akc += b.akc;
        self.arc += b.arc;
        self.steps += 1;
    }

    fn means(&self) -> [f64; 4] {
        let n = self.steps.max(1) as f64;
        [self.ce / n, self.ssl / n, self.akc / n, self.arc / n]
    }
}

fn fraction_selected(model: &Classifier, x: &Tensor2, eps: f64) -> Result<f64> {
    if x.rows() == 0 {
        return Ok(0.0);
    }
    let probs = softmax_rows(model.forward(x)?.logits())?;
    Ok(arc_select(&probs, eps).len() as f64 / x.rows() as f64)
}

/// Copies the source extractor, initializes the head and optimizes the
/// composite loss on the target split.
pub fn fine_tune(cfg: &ExperimentConfig, source: &SourceModel, target: &SplitSet, seed: u64) -> Result<RunOutput> {
    let labeled = &target.labeled;
    if labeled.is_empty() {
        return Err(Error::EmptyInput("labeled target set"));
    }
    let src = &source.model;
    let classes_t = target.classes();
    let gates = cfg.gate_config(src.classes(), classes_t);
    let h = src.extractor.feature_dim();

    let head = match cfg.head_init {
        HeadInit::Imprint => {
            let feats = src.extractor.forward_features(&labeled.x)?;
            imprint(&LinearHead::zeros(h, classes_t)?, &feats, &labeled.y)?
        }
        HeadInit::Random => LinearHead::random(h, classes_t, &mut stream(seed, STREAM_HEAD_INIT))?,
    };
    let mut pair = ModelPair::from_source(src.clone(), head)?;

    // D_t with labeled rows first; the frozen source is evaluated once.
    let pool = target.training_pool()?;
    let n_l = labeled.len();
    let src_fwd = src.forward(&pool)?;
    let src_features = src_fwd.features().clone();
    let akc_weights: Vec<f64> = entropy_rows(&softmax_rows(src_fwd.logits())?)
        .into_iter()
        .map(|h| if h <= gates.eps_k { 1.0 } else { 0.0 })
        .collect();
    let akc_selected = akc_weights.iter().sum::<f64>() / akc_weights.len() as f64;

    let o = &cfg.optim;
    let steps_per_epoch = pool.rows().div_ceil(o.batch_unlabeled);
    let total_steps = o.epochs * steps_per_epoch;
    let mut opt = OptimState::for_model(&pair.target, o.momentum, total_steps, o.lr);
    let mut sampler_l = BatchSampler::new(n_l, o.batch_labeled, stream(seed, STREAM_LABELED_BATCHES))?;
    let mut sampler_u = BatchSampler::new(pool.rows(), o.batch_unlabeled, stream(seed, STREAM_UNLABELED_BATCHES))?;
    let mut noise_rng = stream(seed, STREAM_NOISE);
    let pool_std = feature_std(&pool);
    let mut buffers = ArcBuffers::new(cfg.arc.buffer_capacity, cfg.arc.k)?.with_min_rows(cfg.arc.min_rows);
    let setup = LossSetup {
        weights: cfg.weights,
        akc: cfg.methods.akc,
        arc: cfg.methods.arc,
        akc_mode: cfg.akc.mode,
        eps_r: gates.eps_r,
        bandwidth: cfg.arc.bandwidth(),
        ssl: cfg.ssl_config(),
    };
    let ssl_on = setup.ssl.method != SslMethod::None;
    let mut teacher = (setup.ssl.method == SslMethod::MeanTeacher).then(|| pair.target.clone());

    let mut log = MetricsLog::default();
    let record = |model: &Classifier, epoch: usize, lr: f64, means: [f64; 4]| -> Result<EpochRecord> {
        Ok(EpochRecord {
            epoch,
            lr,
            loss_ce: means[0],
            loss_s: means[1],
            reg_k: means[2],
            reg_r: means[3],
            akc_selected,
            arc_selected_labeled: fraction_selected(model, &labeled.x, gates.eps_r)?,
            arc_selected_unlabeled: fraction_selected(model, &pool, gates.eps_r)?,
            train_acc: model.accuracy(&labeled.x, &labeled.y)?,
            test_acc: model.accuracy(&target.test.x, &target.test.y)?,
        })
    };
    log.push(record(&pair.target, 0, o.lr, [0.0; 4])?);

    for epoch in 1..=o.epochs {
        let mut acc = EpochAccumulator::default();
        for _ in 0..steps_per_epoch {
            let (idx_l, idx_u) = (sampler_l.next_batch(), sampler_u.next_batch());
            let b_u = idx_u.len();
            let inputs = StepInputs {
                x_labeled: labeled.x.select_rows(&idx_l),
                y_labeled: idx_l.iter().map(|&i| labeled.y[i]).collect(),
                x_unlabeled: pool.select_rows(&idx_u),
                source_features_labeled: src_features.select_rows(&idx_l),
                source_features_unlabeled: src_features.select_rows(&idx_u),
                akc_weights_labeled: idx_l.iter().map(|&i| akc_weights[i]).collect(),
                akc_weights_unlabeled: idx_u.iter().map(|&i| akc_weights[i]).collect(),
                noise_student: ssl_on.then(|| gaussian_noise(b_u, &pool_std, setup.ssl.noise_std, &mut noise_rng)),
                noise_teacher: teacher
                    .is_some()
                    .then(|| gaussian_noise(b_u, &pool_std, setup.ssl.noise_std, &mut noise_rng)),
            };
            let step = opt.step as u64;
            let loss = total_loss(&pair.target, teacher.as_ref(), &inputs, &setup, &mut buffers, step)?;
            if !loss.value.is_finite() {
                return Err(Error::State(format!("non-finite loss at step {step}")));
            }
            sgd_step(pair.target.params_mut(), loss.grads.tensors(), &mut opt)?;
            if let Some(t) = teacher.as_mut() {
                ema_update(t, &pair.target, setup.ssl.ema_alpha)?;
            }
            acc.add(&loss.breakdown);
        }
        let lr = cosine_lr(epoch * steps_per_epoch, total_steps, o.lr)?;
        log.push(record(&pair.target, epoch, lr, acc.means())?);
    }

    let final_rep_gap = if target.unlabeled.is_empty() {
        None
    } else {
        let fl = pair.target.extractor.forward_features(&labeled.x)?;
        let fu = pair.target.extractor.forward_features(&target.unlabeled.x)?;
        Some(representation_gap(&fl, &fu)?)
    };
    let (best_epoch, best_test_acc) = log.best().expect("epoch 0 is always logged");
    let summary = RunSummary {
        method: cfg.methods.label(),
        seed,
        n_labeled: n_l,
        n_unlabeled: target.unlabeled.len(),
        eps_k: gates.eps_k,
        eps_r: gates.eps_r,
        steps: total_steps,
        source_test_acc: source.test_acc,
        initial_test_acc: log.records[0].test_acc,
        final_test_acc: log.final_test_acc().expect("non-empty log"),
        best_test_acc,
        best_epoch,
        final_rep_gap,
    };
    Ok(RunOutput { log, summary, pair })
}

/// Validates `cfg`, then pre-trains, initializes and fine-tunes with
/// `cfg.seed`.
pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let data = prepare_data(cfg, cfg.seed, cfg.n_labeled)?;
    let source = pretrain_source(cfg, &data.source, cfg.seed)?;
    fine_tune(cfg, &source, &data.target, cfg.seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.task.source_train = 300;
        cfg.task.source_test = 100;
        cfg.task.target_train = 200;
        cfg.task.target_test = 100;
        cfg.n_labeled = 12;
        cfg.n_labeled_grid = vec![12];
        cfg.model.hidden = vec![16];
        cfg.model.feature_dim = 8;
        cfg.pretrain.epochs = 3;
        cfg.optim.epochs = 2;
        cfg.optim.batch_labeled = 8;
        cfg.optim.batch_unlabeled = 32;
        cfg
    }

    #[test]
    fn zero_epochs_reports_initial_accuracy_only() {
        let mut cfg = tiny();
        cfg.optim.epochs = 0;
        let out = run_pipeline(&cfg).unwrap();
        assert_eq!(out.log.records.len(), 1);
        let r = &out.log.records[0];
        assert_eq!(r.epoch, 0);
        assert_eq!(out.summary.final_test_acc, r.test_acc);
        assert_eq!(out.summary.initial_test_acc, r.test_acc);
        assert_eq!(out.summary.steps, 0);
    }

    #[test]
    fn one_record_per_epoch_and_frozen_source() {
        let mut cfg = tiny();
        cfg.methods.akc = true;
        cfg.methods.arc = true;
        let data = prepare_data(&cfg, 3, cfg.n_labeled).unwrap();
        let source = pretrain_source(&cfg, &data.source, 3).unwrap();
        let before = source.model.fingerprint();
        let out = fine_tune(&cfg, &source, &data.target, 3).unwrap();
        assert_eq!(out.log.records.len(), 3);
        assert_eq!(out.pair.source().fingerprint(), before);
        assert_ne!(out.pair.target.fingerprint(), out.pair.source().fingerprint());
        let k: Vec<f64> = out.log.records.iter().map(|r| r.akc_selected).collect();
        assert!(k.iter().all(|v| *v == k[0]));
    }

    #[test]
    fn same_seed_same_log() {
        let mut cfg = tiny();
        cfg.methods.arc = true;
        cfg.methods.ssl = SslMethod::MeanTeacher;
        let a = run_pipeline(&cfg).unwrap();
        let b = run_pipeline(&cfg).unwrap();
        assert_eq!(a.log.to_csv_string().unwrap(), b.log.to_csv_string().unwrap());
        assert_eq!(a.pair.target.fingerprint(), b.pair.target.fingerprint());
    }

    #[test]
    fn invalid_config_is_reported() {
        let mut cfg = tiny();
        cfg.optim.lr = -1.0;
        assert!(run_pipeline(&cfg).unwrap_err().is_config());
    }
}
