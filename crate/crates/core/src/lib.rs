//! Semi-supervised transfer learning with adaptive knowledge consistency
//! (AKC) and adaptive representation consistency (ARC).
//!
//! A source model is pre-trained, its extractor copied into a target model
//! whose head is imprinted from the few labeled target examples, and the
//! target is then fine-tuned on
//! `L_CE + λ_S·L_S + λ_K·R_K + λ_R·R_R`:
//!
//! * `R_K` pulls target features towards the frozen source features on
//!   examples the source is confident about.
//! * `R_R` is an MMD penalty between confidently predicted labeled and
//!   unlabeled target features, backed by small replay buffers.
//! * `L_S` is an optional pseudo-label or mean-teacher term.
//!
//! Everything runs on `f64` dense matrices with hand-written backward passes.

pub mod config;
pub mod consistency;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod ssl;
pub mod tensor;
pub mod training;

pub use config::{apply_override, ExperimentConfig, HeadInit, LossWeights, MethodFlags};
pub use consistency::{
    akc_loss, akc_term, arc_loss, arc_select, arc_term, representation_gap, ArcBuffers, Bandwidth, DivergenceMode,
    GateConfig, GatedBatch, ReplayBuffer,
};
pub use data::{generate_task, load_csv, split_labeled, CsvSchema, SplitSet, SyntheticTaskSpec};
pub use error::{ConfigIssue, Error, Result};
pub use metrics::{EpochRecord, MetricsLog, METRICS_HEADER, METRICS_SCHEMA_VERSION};
pub use model::{Architecture, Classifier, Gradients, LinearHead, ModelPair};
pub use numerics::{entropy, kl_div, mmd2, mse, rbf_kernel, softmax, ProbVec};
pub use pipeline::{fine_tune, prepare_data, pretrain_source, run_pipeline, RunOutput, RunSummary, SourceModel, TaskData};
pub use ssl::{SslConfig, SslMethod};
pub use tensor::Tensor2;
pub use training::{cosine_lr, sgd_step, total_loss, BatchSampler, LossSetup, OptimState, StepInputs};
