//! The two-part network `f = G ∘ F`: a ReLU MLP feature extractor followed by
//! a linear classifier head, with reverse-mode gradients, imprinting, EMA
//! copies and a binary checkpoint format.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor2;

/// Layer widths of the extractor. All layers, including the last, use ReLU.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Architecture {
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            feature_dim: 32,
        }
    }
}

/// Affine layer `x·W + b` with `W: in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub w: Tensor2,
    pub b: Tensor2,
}

impl Dense {
    fn glorot(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        Self {
            w: glorot_uniform(fan_in, fan_out, fan_in, fan_out, rng),
            b: Tensor2::zeros(1, fan_out),
        }
    }
}

/// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
fn glorot_uniform(
    rows: usize,
    cols: usize,
    fan_in: usize,
    fan_out: usize,
    rng: &mut impl Rng,
) -> Tensor2 {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-limit..=limit))
        .collect();
    Tensor2::from_vec(rows, cols, data).expect("length matches")
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpExtractor {
    layers: Vec<Dense>,
}

impl MlpExtractor {
    pub fn new(input_dim: usize, arch: &Architecture, rng: &mut impl Rng) -> Result<Self> {
        if input_dim == 0 || arch.feature_dim == 0 || arch.hidden.contains(&0) {
            return Err(Error::InvalidInput("layer widths must be positive".into()));
        }
        let mut dims = vec![input_dim];
        dims.extend(&arch.hidden);
        dims.push(arch.feature_dim);
        let layers = dims
            .windows(2)
            .map(|w| Dense::glorot(w[0], w[1], rng))
            .collect();
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidInput("extractor needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.b.shape() != (1, l.w.cols()) {
                return Err(Error::shape(
                    "extractor",
                    format!("layer {i} bias {:?} for weight {:?}", l.b.shape(), l.w.shape()),
                ));
            }
            if i > 0 && layers[i - 1].w.cols() != l.w.rows() {
                return Err(Error::shape(
                    "extractor",
                    format!("layer {i} takes {} inputs, previous emits {}", l.w.rows(), layers[i - 1].w.cols()),
                ));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.layers.last().expect("non-empty").w.cols()
    }

    pub fn same_architecture(&self, other: &Self) -> bool {
        self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.w.shape() == b.w.shape())
    }

    pub fn forward_features(&self, x: &Tensor2) -> Result<Tensor2> {
        Ok(self.forward_cached(x)?.acts.pop().expect("non-empty"))
    }

    fn forward_cached(&self, x: &Tensor2) -> Result<ExtractorCache> {
        if x.cols() != self.input_dim() {
            return Err(Error::shape(
                "forward_features",
                format!("input has {} columns, extractor expects {}", x.cols(), self.input_dim()),
            ));
        }
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut acts: Vec<Tensor2> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let input = acts.last().unwrap_or(x);
            let z = input.matmul(&layer.w)?.add_row(&layer.b)?;
            acts.push(z.relu());
            pre.push(z);
        }
        Ok(ExtractorCache { pre, acts })
    }
}

#[derive(Debug, Clone)]
struct ExtractorCache {
    pre: Vec<Tensor2>,
    acts: Vec<Tensor2>,
}

/// Linear classifier `logits = F·Wᵀ + b` with `W: C × h`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    pub w: Tensor2,
    pub b: Tensor2,
}

impl LinearHead {
    pub fn new(w: Tensor2, b: Tensor2) -> Result<Self> {
        if w.rows() < 2 {
            return Err(Error::InvalidInput(format!(
                "a head needs at least 2 classes, got {}",
                w.rows()
            )));
        }
        if b.shape() != (1, w.rows()) {
            return Err(Error::shape(
                "head",
                format!("bias {:?} for weight {:?}", b.shape(), w.shape()),
            ));
        }
        Ok(Self { w, b })
    }

    pub fn random(feature_dim: usize, classes: usize, rng: &mut impl Rng) -> Result<Self> {
        Self::new(
            glorot_uniform(classes, feature_dim, feature_dim, classes, rng),
            Tensor2::zeros(1, classes),
        )
    }

    pub fn zeros(feature_dim: usize, classes: usize) -> Result<Self> {
        Self::new(Tensor2::zeros(classes, feature_dim), Tensor2::zeros(1, classes))
    }

    pub fn classes(&self) -> usize {
        self.w.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.w.cols()
    }

    pub fn forward_logits(&self, features: &Tensor2) -> Result<Tensor2> {
        if features.cols() != self.feature_dim() {
            return Err(Error::shape(
                "forward_logits",
                format!("features have {} columns, head expects {}", features.cols(), self.feature_dim()),
            ));
        }
        features.matmul_t(&self.w)?.add_row(&self.b)
    }
}

fn l2_normalized(row: &[f64]) -> Vec<f64> {
    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        row.iter().map(|v| v / norm).collect()
    } else {
        row.to_vec()
    }
}

/// Weight imprinting: row `c` becomes the normalized mean of the normalized
/// features of class `c`; the bias is zeroed.
pub fn imprint(head: &LinearHead, features: &Tensor2, labels: &[usize]) -> Result<LinearHead> {
    if features.rows() != labels.len() {
        return Err(Error::shape(
            "imprint",
            format!("{} feature rows for {} labels", features.rows(), labels.len()),
        ));
    }
    if features.cols() != head.feature_dim() {
        return Err(Error::shape(
            "imprint",
            format!("features have {} columns, head expects {}", features.cols(), head.feature_dim()),
        ));
    }
    let classes = head.classes();
    let mut sums = Tensor2::zeros(classes, head.feature_dim());
    let mut counts = vec![0usize; classes];
    for (row, &y) in features.iter_rows().zip(labels) {
        if y >= classes {
            return Err(Error::InvalidLabel { label: y, classes });
        }
        counts[y] += 1;
        for (s, v) in sums.row_mut(y).iter_mut().zip(l2_normalized(row)) {
            *s += v;
        }
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::MissingClass(c));
    }
    let mut w = Tensor2::zeros(classes, head.feature_dim());
    for c in 0..classes {
        let mean: Vec<f64> = sums.row(c).iter().map(|s| s / counts[c] as f64).collect();
        w.row_mut(c).copy_from_slice(&l2_normalized(&mean));
    }
    LinearHead::new(w, Tensor2::zeros(1, classes))
}

/// Extractor plus head.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub extractor: MlpExtractor,
    pub head: LinearHead,
}

/// Intermediates of one forward pass, consumed by [`Classifier::backward`].
#[derive(Debug, Clone)]
pub struct Forward {
    input: Tensor2,
    cache: ExtractorCache,
    logits: Tensor2,
    layout: Vec<(usize, usize)>,
}

impl Forward {
    pub fn features(&self) -> &Tensor2 {
        self.cache.acts.last().expect("non-empty")
    }

    pub fn logits(&self) -> &Tensor2 {
        &self.logits
    }

    pub fn input(&self) -> &Tensor2 {
        &self.input
    }

    pub fn batch_size(&self) -> usize {
        self.input.rows()
    }

    /// ReLU on/off pattern of every hidden unit.
    pub fn activation_pattern(&self) -> Vec<bool> {
        self.cache
            .pre
            .iter()
            .flat_map(|z| z.data().iter().map(|v| *v > 0.0))
            .collect()
    }
}

/// Gradients laid out like [`Classifier::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<Tensor2>);

impl Gradients {
    pub fn zeros_like(model: &Classifier) -> Self {
        Self(
            model
                .params()
                .into_iter()
                .map(|p| Tensor2::zeros(p.rows(), p.cols()))
                .collect(),
        )
    }

    pub fn add_scaled(&mut self, alpha: f64, other: &Gradients) -> Result<()> {
        if self.0.len() != other.0.len() {
            return Err(Error::shape("gradients", "different parameter counts"));
        }
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            a.axpy(alpha, b)?;
        }
        Ok(())
    }

    pub fn tensors(&self) -> &[Tensor2] {
        &self.0
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|t| t.data().iter().all(|v| *v == 0.0))
    }

    pub fn flat(&self) -> Vec<f64> {
        self.0.iter().flat_map(|t| t.data().iter().copied()).collect()
    }
}

impl Classifier {
    pub fn new(input_dim: usize, arch: &Architecture, classes: usize, rng: &mut impl Rng) -> Result<Self> {
        let extractor = MlpExtractor::new(input_dim, arch, rng)?;
        let head = LinearHead::random(arch.feature_dim, classes, rng)?;
        Self::from_parts(extractor, head)
    }

    pub fn from_parts(extractor: MlpExtractor, head: LinearHead) -> Result<Self> {
        if extractor.feature_dim() != head.feature_dim() {
            return Err(Error::shape(
                "classifier",
                format!("extractor emits {} features, head expects {}", extractor.feature_dim(), head.feature_dim()),
            ));
        }
        Ok(Self { extractor, head })
    }

    pub fn classes(&self) -> usize {
        self.head.classes()
    }

    /// Parameters in a fixed order: `W_1, b_1, …, W_L, b_L, W_head, b_head`.
    pub fn params(&self) -> Vec<&Tensor2> {
        let mut out: Vec<&Tensor2> = self
            .extractor
            .layers
            .iter()
            .flat_map(|l| [&l.w, &l.b])
            .collect();
        out.push(&self.head.w);
        out.push(&self.head.b);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor2> {
        let mut out: Vec<&mut Tensor2> = self
            .extractor
            .layers
            .iter_mut()
            .flat_map(|l| [&mut l.w, &mut l.b])
            .collect();
        out.push(&mut self.head.w);
        out.push(&mut self.head.b);
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    fn layout(&self) -> Vec<(usize, usize)> {
        self.params().iter().map(|p| p.shape()).collect()
    }

    /// Order-sensitive hash of every parameter bit pattern.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for p in self.params() {
            p.shape().hash(&mut h);
            for v in p.data() {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    pub fn forward(&self, x: &Tensor2) -> Result<Forward> {
        let cache = self.extractor.forward_cached(x)?;
        let logits = self
            .head
            .forward_logits(cache.acts.last().expect("non-empty"))?;
        Ok(Forward {
            input: x.clone(),
            cache,
            logits,
            layout: self.layout(),
        })
    }

    pub fn predict(&self, x: &Tensor2) -> Result<Vec<usize>> {
        let f = self.extractor.forward_features(x)?;
        Ok(self.head.forward_logits(&f)?.argmax_rows())
    }

    pub fn accuracy(&self, x: &Tensor2, y: &[usize]) -> Result<f64> {
        if y.is_empty() {
            return Ok(0.0);
        }
        let pred = self.predict(x)?;
        let hits = pred.iter().zip(y).filter(|(p, t)| p == t).count();
        Ok(hits as f64 / y.len() as f64)
    }

    /// Reverse pass. `d_features` is an extra gradient arriving directly on
    /// the extractor output; `d_logits` is the gradient on the head output.
    pub fn backward(
        &self,
        fwd: &Forward,
        d_features: Option<&Tensor2>,
        d_logits: Option<&Tensor2>,
    ) -> Result<Gradients> {
        if fwd.layout != self.layout() {
            return Err(Error::State(
                "forward cache was produced by a model with a different layout".into(),
            ));
        }
        let batch = fwd.batch_size();
        let features = fwd.features();
        let n_layers = self.extractor.layers.len();
        let mut grads = Vec::with_capacity(2 * n_layers + 2);

        let mut d_act = match d_features {
            Some(d) if d.shape() != features.shape() => {
                return Err(Error::shape(
                    "backward",
                    format!("feature gradient {:?} for features {:?}", d.shape(), features.shape()),
                ))
            }
            Some(d) => d.clone(),
            None => Tensor2::zeros(batch, features.cols()),
        };
        let (head_w, head_b) = match d_logits {
            Some(dl) => {
                if dl.shape() != fwd.logits.shape() {
                    return Err(Error::shape(
                        "backward",
                        format!("logit gradient {:?} for logits {:?}", dl.shape(), fwd.logits.shape()),
                    ));
                }
                d_act.add_assign(&dl.matmul(&self.head.w)?)?;
                (dl.t_matmul(features)?, dl.col_sums())
            }
            None => (
                Tensor2::zeros(self.head.w.rows(), self.head.w.cols()),
                Tensor2::zeros(1, self.head.b.cols()),
            ),
        };

        let mut layer_grads = Vec::with_capacity(n_layers);
        for i in (0..n_layers).rev() {
            let dz = d_act.hadamard(&fwd.cache.pre[i].relu_grad())?;
            let input = if i == 0 { &fwd.input } else { &fwd.cache.acts[i - 1] };
            let dw = input.t_matmul(&dz)?;
            let db = dz.col_sums();
            if i > 0 {
                d_act = dz.matmul_t(&self.extractor.layers[i].w)?;
            }
            layer_grads.push((dw, db));
        }
        for (dw, db) in layer_grads.into_iter().rev() {
            grads.push(dw);
            grads.push(db);
        }
        grads.push(head_w);
        grads.push(head_b);
        Ok(Gradients(grads))
    }

    /// Zero out the head part of a gradient (used when a term must only reach θ).
    pub fn extractor_only(&self, mut g: Gradients) -> Gradients {
        let n = g.0.len();
        for t in &mut g.0[n - 2..] {
            t.data_mut().fill(0.0);
        }
        g
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_bytes())?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        Self::from_checkpoint_bytes(&std::fs::read(path)?)
    }

    /// Binary dump: magic, format version, layer count, then every parameter
    /// as `rows: u64, cols: u64, data: [f64]`, all little-endian.
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.extractor.layers.len() as u32).to_le_bytes());
        for p in self.params() {
            out.extend_from_slice(&(p.rows() as u64).to_le_bytes());
            out.extend_from_slice(&(p.cols() as u64).to_le_bytes());
            for v in p.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(CHECKPOINT_MAGIC.len())? != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = u32::from_le_bytes(r.array()?);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let n_layers = u32::from_le_bytes(r.array()?) as usize;
        let mut tensors = Vec::with_capacity(2 * n_layers + 2);
        for _ in 0..2 * n_layers + 2 {
            let rows = u64::from_le_bytes(r.array()?) as usize;
            let cols = u64::from_le_bytes(r.array()?) as usize;
            let count = rows
                .checked_mul(cols)
                .ok_or_else(|| Error::Checkpoint("tensor size overflow".into()))?;
            if count > (bytes.len() - r.pos) / 8 {
                return Err(Error::Checkpoint("truncated tensor data".into()));
            }
            let data = (0..count)
                .map(|_| r.array().map(f64::from_le_bytes))
                .collect::<Result<Vec<_>>>()?;
            tensors.push(Tensor2::from_vec(rows, cols, data)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        let mut it = tensors.into_iter();
        let layers = (0..n_layers)
            .map(|_| Dense {
                w: it.next().expect("counted"),
                b: it.next().expect("counted"),
            })
            .collect();
        let head = LinearHead::new(it.next().expect("counted"), it.next().expect("counted"))?;
        Self::from_parts(MlpExtractor::from_layers(layers)?, head)
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"ADACKPT\0";
const CHECKPOINT_VERSION: u32 = 1;

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        let s = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::Checkpoint("unexpected end of file".into()))?;
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}

/// `teacher ← α·teacher + (1−α)·student`, elementwise over every parameter.
pub fn ema_update(teacher: &mut Classifier, student: &Classifier, alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidInput(format!("ema alpha {alpha} outside [0, 1]")));
    }
    if teacher.layout() != student.layout() {
        return Err(Error::shape("ema_update", "teacher and student layouts differ"));
    }
    for (t, s) in teacher.params_mut().into_iter().zip(student.params()) {
        for (tv, sv) in t.data_mut().iter_mut().zip(s.data()) {
            *tv = alpha * *tv + (1.0 - alpha) * sv;
        }
    }
    Ok(())
}

/// Frozen source model and trainable target model sharing an extractor layout.
#[derive(Debug, Clone)]
pub struct ModelPair {
    source: Classifier,
    pub target: Classifier,
}

impl ModelPair {
    pub fn new(source: Classifier, target: Classifier) -> Result<Self> {
        if !source.extractor.same_architecture(&target.extractor) {
            return Err(Error::shape(
                "model pair",
                "source and target extractors differ in architecture",
            ));
        }
        Ok(Self { source, target })
    }

    /// Target initialised from the source extractor with the given head.
    pub fn from_source(source: Classifier, head: LinearHead) -> Result<Self> {
        let target = Classifier::from_parts(source.extractor.clone(), head)?;
        Self::new(source, target)
    }

    pub fn source(&self) -> &Classifier {
        &self.source
    }
}
