//! Mean-pooling token classifier with hand-written forward and backward passes.
//!
//! `f`: token embeddings are mean-pooled (concatenated with the target token's
//! embedding for type inference), then `hidden = act(W1·input + b1)`.
//! Three linear heads read `hidden`: the classifier `g`, the partitioning
//! head `h` used by BPR, and the bias head used by gradient reversal.

use crate::corpus::{Sample, Task};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeSet, HashMap};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("target index {index} out of range for {len} tokens")]
    Index { index: usize, len: usize },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum Activation {
    #[default]
    Tanh,
    /// Linear probe: the encoder is affine in its input.
    Identity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub head_dim: usize,
    pub num_classes: usize,
    pub task: Task,
    /// Output width of the bias head (size of the bias vocabulary known to the model).
    pub bias_dim: usize,
    #[serde(default)]
    pub activation: Activation,
}

impl ModelConfig {
    pub fn new(task: Task, vocab_size: usize, bias_dim: usize) -> Self {
        ModelConfig {
            vocab_size,
            embed_dim: 32,
            hidden_dim: 64,
            head_dim: 32,
            num_classes: task.num_classes(),
            task,
            bias_dim,
            activation: Activation::Tanh,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self.task {
            Task::TypeInf => 2 * self.embed_dim,
            Task::VulnDet => self.embed_dim,
        }
    }

    fn validate(&self) -> Result<(), ModelError> {
        if self.vocab_size == 0
            || self.embed_dim == 0
            || self.hidden_dim == 0
            || self.head_dim == 0
            || self.bias_dim == 0
        {
            return Err(ModelError::InvalidArgument("all dimensions must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(ModelError::InvalidArgument("num_classes must be >= 2".into()));
        }
        Ok(())
    }
}

/// Row-major dense matrix; vectors are `n × 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    fn glorot(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Self {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        Tensor {
            rows,
            cols,
            data: (0..rows * cols).map(|_| rng.gen_range(-a..=a)).collect(),
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `self · x` (+ `bias`).
    fn matvec(&self, x: &[f64], bias: &Tensor) -> Vec<f64> {
        (0..self.rows)
            .map(|r| bias.data[r] + dot(self.row(r), x))
            .collect()
    }

    /// `selfᵀ · y`.
    fn matvec_t(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (r, &yr) in y.iter().enumerate() {
            if yr != 0.0 {
                axpy(&mut out, yr, self.row(r));
            }
        }
        out
    }

    /// `self += scale · y xᵀ`.
    fn add_outer(&mut self, y: &[f64], x: &[f64], scale: f64) {
        for (r, &yr) in y.iter().enumerate() {
            if yr != 0.0 {
                axpy(self.row_mut(r), scale * yr, x);
            }
        }
    }

    fn add_vec(&mut self, y: &[f64], scale: f64) {
        axpy(&mut self.data, scale, y);
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[2]) + (acc[1] + acc[3]) + tail
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// All learnable tensors. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub embedding: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w_g: Tensor,
    pub b_g: Tensor,
    pub w_h: Tensor,
    pub b_h: Tensor,
    pub w_bias: Tensor,
    pub b_bias: Tensor,
}

pub type Grads = ModelParams;

pub const TENSOR_NAMES: [&str; 9] = [
    "embedding", "w1", "b1", "w_g", "b_g", "w_h", "b_h", "w_bias", "b_bias",
];

impl ModelParams {
    pub fn zeros(config: &ModelConfig) -> Self {
        let c = config;
        ModelParams {
            config: c.clone(),
            embedding: Tensor::zeros(c.vocab_size, c.embed_dim),
            w1: Tensor::zeros(c.hidden_dim, c.input_dim()),
            b1: Tensor::zeros(c.hidden_dim, 1),
            w_g: Tensor::zeros(c.num_classes, c.hidden_dim),
            b_g: Tensor::zeros(c.num_classes, 1),
            w_h: Tensor::zeros(c.head_dim, c.hidden_dim),
            b_h: Tensor::zeros(c.head_dim, 1),
            w_bias: Tensor::zeros(c.bias_dim, c.hidden_dim),
            b_bias: Tensor::zeros(c.bias_dim, 1),
        }
    }

    pub fn tensors(&self) -> [&Tensor; 9] {
        [
            &self.embedding,
            &self.w1,
            &self.b1,
            &self.w_g,
            &self.b_g,
            &self.w_h,
            &self.b_h,
            &self.w_bias,
            &self.b_bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 9] {
        [
            &mut self.embedding,
            &mut self.w1,
            &mut self.b1,
            &mut self.w_g,
            &mut self.b_g,
            &mut self.w_h,
            &mut self.b_h,
            &mut self.w_bias,
            &mut self.b_bias,
        ]
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    fn check_finite(&self, what: &str) -> Result<(), ModelError> {
        for (name, t) in TENSOR_NAMES.iter().zip(self.tensors()) {
            if t.data.iter().any(|v| !v.is_finite()) {
                return Err(ModelError::NonFinite(format!("{what}.{name}")));
            }
        }
        Ok(())
    }
}

/// Glorot-uniform weights, zero biases.
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<ModelParams, ModelError> {
    config.validate()?;
    let c = config;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(ModelParams {
        config: c.clone(),
        embedding: Tensor::glorot(c.vocab_size, c.embed_dim, &mut rng),
        w1: Tensor::glorot(c.hidden_dim, c.input_dim(), &mut rng),
        b1: Tensor::zeros(c.hidden_dim, 1),
        w_g: Tensor::glorot(c.num_classes, c.hidden_dim, &mut rng),
        b_g: Tensor::zeros(c.num_classes, 1),
        w_h: Tensor::glorot(c.head_dim, c.hidden_dim, &mut rng),
        b_h: Tensor::zeros(c.head_dim, 1),
        w_bias: Tensor::glorot(c.bias_dim, c.hidden_dim, &mut rng),
        b_bias: Tensor::zeros(c.bias_dim, 1),
    })
}

pub const UNK: usize = 0;
pub const MASK: usize = 1;

/// Token-text vocabulary built from training samples. Unseen text maps to `UNK`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
    /// Bias-head slot of each token id, if the token is in the bias vocabulary.
    bias_slot: Vec<Option<usize>>,
    bias_words: Vec<String>,
}

impl Vocab {
    pub fn build<'a>(
        samples: impl IntoIterator<Item = &'a Sample>,
        bias_vocab: &BTreeSet<String>,
    ) -> Self {
        let mut seen = BTreeSet::new();
        for s in samples {
            for t in &s.tokens {
                seen.insert(t.text.clone());
            }
        }
        let tokens: Vec<String> = ["<unk>".to_string(), "<mask>".to_string()]
            .into_iter()
            .chain(seen)
            .collect();
        Self::from_tokens(tokens, bias_vocab)
    }

    pub fn from_tokens(tokens: Vec<String>, bias_vocab: &BTreeSet<String>) -> Self {
        let mut bias_words = Vec::new();
        let bias_slot = tokens
            .iter()
            .map(|t| {
                bias_vocab.contains(t).then(|| {
                    bias_words.push(t.clone());
                    bias_words.len() - 1
                })
            })
            .collect();
        let mut v = Vocab {
            tokens,
            index: HashMap::new(),
            bias_slot,
            bias_words,
        };
        v.reindex();
        v
    }

    fn reindex(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn bias_dim(&self) -> usize {
        self.bias_words.len().max(1)
    }

    pub fn id(&self, text: &str) -> usize {
        self.index.get(text).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, sample: &Sample, target: Option<usize>) -> Encoded {
        Encoded {
            ids: sample.tokens.iter().map(|t| self.id(&t.text)).collect(),
            target,
        }
    }

    /// Bias-head slots present in the input (the multi-hot target).
    pub fn bias_targets(&self, input: &Encoded) -> Vec<usize> {
        let set: BTreeSet<usize> = input
            .ids
            .iter()
            .filter_map(|&id| self.bias_slot.get(id).copied().flatten())
            .collect();
        set.into_iter().collect()
    }
}

impl<'de> Vocab {
    pub fn from_json(s: &'de str) -> serde_json::Result<Self> {
        let mut v: Vocab = serde_json::from_str(s)?;
        v.reindex();
        Ok(v)
    }
}

/// Token ids plus the optional target position (type inference).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Encoded {
    pub ids: Vec<usize>,
    pub target: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// `T × d` input embeddings, row-major.
    pub embeddings: Vec<f64>,
    pub len: usize,
    pub target: Option<usize>,
    pub pooled: Vec<f64>,
    pub input: Vec<f64>,
    pub pre: Vec<f64>,
    /// Encoder representation `r = f(x)`.
    pub hidden: Vec<f64>,
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
}

pub fn gather(params: &ModelParams, ids: &[usize]) -> Vec<f64> {
    let d = params.config.embed_dim;
    let mut x = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        x.extend_from_slice(params.embedding.row(id));
    }
    x
}

fn check_input(params: &ModelParams, len: usize, target: Option<usize>) -> Result<(), ModelError> {
    match (params.config.task, target) {
        (Task::TypeInf, Some(t)) if t < len => Ok(()),
        (Task::TypeInf, Some(t)) => Err(ModelError::Index { index: t, len }),
        (Task::TypeInf, None) => Err(ModelError::InvalidArgument(
            "type inference needs a target token".into(),
        )),
        (Task::VulnDet, None) if len > 0 => Ok(()),
        (Task::VulnDet, None) => Err(ModelError::InvalidArgument("empty sample".into())),
        (Task::VulnDet, Some(_)) => Err(ModelError::InvalidArgument(
            "vulnerability detection takes no target".into(),
        )),
    }
}

/// Forward pass from an explicit `T × d` embedding matrix.
pub fn forward_embedded(
    params: &ModelParams,
    embeddings: Vec<f64>,
    target: Option<usize>,
) -> Result<ForwardTrace, ModelError> {
    let d = params.config.embed_dim;
    let len = embeddings.len() / d;
    check_input(params, len, target)?;
    let mut pooled = vec![0.0; d];
    for t in 0..len {
        axpy(&mut pooled, 1.0, &embeddings[t * d..(t + 1) * d]);
    }
    pooled.iter_mut().for_each(|v| *v /= len as f64);
    let input = match target {
        Some(t) => [&embeddings[t * d..(t + 1) * d], &pooled[..]].concat(),
        None => pooled.clone(),
    };
    let pre = params.w1.matvec(&input, &params.b1);
    let hidden: Vec<f64> = match params.config.activation {
        Activation::Tanh => pre.iter().map(|v| v.tanh()).collect(),
        Activation::Identity => pre.clone(),
    };
    let logits = params.w_g.matvec(&hidden, &params.b_g);
    let probs = softmax(&logits);
    Ok(ForwardTrace {
        embeddings,
        len,
        target,
        pooled,
        input,
        pre,
        hidden,
        logits,
        probs,
    })
}

/// Class probabilities from an already pooled encoder input.
pub fn probs_from_input(params: &ModelParams, input: &[f64]) -> Vec<f64> {
    let mut h = params.w1.matvec(input, &params.b1);
    if params.config.activation == Activation::Tanh {
        h.iter_mut().for_each(|v| *v = v.tanh());
    }
    softmax(&params.w_g.matvec(&h, &params.b_g))
}

pub fn forward(params: &ModelParams, input: &Encoded) -> Result<ForwardTrace, ModelError> {
    if let Some(&bad) = input.ids.iter().find(|&&id| id >= params.config.vocab_size) {
        return Err(ModelError::Index {
            index: bad,
            len: params.config.vocab_size,
        });
    }
    forward_embedded(params, gather(params, &input.ids), input.target)
}

pub fn predict(params: &ModelParams, input: &Encoded) -> Result<usize, ModelError> {
    let tr = forward(params, input)?;
    Ok(argmax(&tr.probs))
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn cross_entropy(probs: &[f64], label: usize) -> f64 {
    -probs[label].max(1e-300).ln()
}

/// Backpropagates `d_hidden` through the encoder. Accumulates `W1`, `b1` and
/// (when `ids` is given) embedding gradients; returns `∂/∂x` (`T × d`) when asked.
fn encoder_backward(
    params: &ModelParams,
    tr: &ForwardTrace,
    d_hidden: &[f64],
    grads: Option<&mut Grads>,
    ids: Option<&[usize]>,
    want_dx: bool,
) -> Option<Vec<f64>> {
    let d = params.config.embed_dim;
    let d_pre: Vec<f64> = match params.config.activation {
        Activation::Tanh => d_hidden
            .iter()
            .zip(&tr.hidden)
            .map(|(g, h)| g * (1.0 - h * h))
            .collect(),
        Activation::Identity => d_hidden.to_vec(),
    };
    let d_input = params.w1.matvec_t(&d_pre);
    let (d_target, d_pooled) = match tr.target {
        Some(_) => (Some(&d_input[..d]), &d_input[d..]),
        None => (None, &d_input[..]),
    };
    let inv = 1.0 / tr.len as f64;
    if let Some(g) = grads {
        g.w1.add_outer(&d_pre, &tr.input, 1.0);
        g.b1.add_vec(&d_pre, 1.0);
        if let Some(ids) = ids {
            for &id in ids {
                axpy(g.embedding.row_mut(id), inv, d_pooled);
            }
            if let (Some(t), Some(dt)) = (tr.target, d_target) {
                axpy(g.embedding.row_mut(ids[t]), 1.0, dt);
            }
        }
    }
    want_dx.then(|| {
        let mut dx = vec![0.0; tr.len * d];
        for t in 0..tr.len {
            axpy(&mut dx[t * d..(t + 1) * d], inv, d_pooled);
        }
        if let (Some(t), Some(dt)) = (tr.target, d_target) {
            axpy(&mut dx[t * d..(t + 1) * d], 1.0, dt);
        }
        dx
    })
}

/// Gradient of `Σ_k d_logits[k] · logit_k` with respect to the input embeddings.
pub fn input_gradient(params: &ModelParams, tr: &ForwardTrace, d_logits: &[f64]) -> Vec<f64> {
    let d_hidden = params.w_g.matvec_t(d_logits);
    encoder_backward(params, tr, &d_hidden, None, None, true).expect("requested dx")
}

/// One training example inside a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchItem {
    pub input: Encoded,
    pub label: usize,
    /// Per-sample loss weight (1 for plain training; `1 − p_b` when reweighting).
    pub weight: f64,
    /// Bias-only distribution for product-of-experts training.
    pub bias_probs: Option<Vec<f64>>,
    /// Multi-hot bias-vocabulary target for gradient reversal.
    pub bias_targets: Vec<usize>,
    /// Adversarial counterparts add loss but do not count toward the normalizer.
    pub adversarial: bool,
}

impl BatchItem {
    pub fn plain(input: Encoded, label: usize) -> Self {
        BatchItem {
            input,
            label,
            weight: 1.0,
            bias_probs: None,
            bias_targets: Vec::new(),
            adversarial: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BprSpec {
    /// `γ_p` for the current step.
    pub gamma: f64,
    /// Row-major `n × n` pair weights `λ` over the batch items.
    pub pair_weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossSpec {
    pub bpr: Option<BprSpec>,
    /// Gradient-reversal coefficient `μ`.
    pub reversal: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub bpr: f64,
    pub bias: f64,
    /// Objective whose gradient the encoder receives: `ce + γ·bpr − μ·bias`.
    pub objective: f64,
}

pub const PROB_FLOOR: f64 = 1e-12;

/// Cross-entropy of `softmax(log p_d + log p_b)` with both logs floored at
/// `ln 1e-12`; returns the loss and `∂loss/∂logits`.
pub fn poe_terms(logits: &[f64], bias_probs: &[f64], label: usize) -> (f64, Vec<f64>) {
    let floor = PROB_FLOOR.ln();
    let log_pd = log_softmax(logits);
    let pd: Vec<f64> = log_pd.iter().map(|l| l.exp()).collect();
    let active: Vec<bool> = log_pd.iter().map(|&l| l > floor).collect();
    let combined: Vec<f64> = log_pd
        .iter()
        .zip(bias_probs)
        .map(|(&lp, &pb)| lp.max(floor) + pb.max(PROB_FLOOR).ln())
        .collect();
    let q = softmax(&combined);
    let loss = -log_softmax(&combined)[label];
    let mut dq: Vec<f64> = q.clone();
    dq[label] -= 1.0;
    let masked: f64 = dq
        .iter()
        .zip(&active)
        .filter(|(_, &a)| a)
        .map(|(g, _)| g)
        .sum();
    let d_logits = (0..logits.len())
        .map(|j| if active[j] { dq[j] } else { 0.0 } - pd[j] * masked)
        .collect();
    (loss, d_logits)
}

struct Evaluated {
    traces: Vec<ForwardTrace>,
    reprs: Vec<Vec<f64>>,
    bias_scores: Vec<Vec<f64>>,
    breakdown: LossBreakdown,
    norm: f64,
}

fn evaluate_batch(
    params: &ModelParams,
    batch: &[BatchItem],
    spec: &LossSpec,
) -> Result<Evaluated, ModelError> {
    let traces = batch
        .iter()
        .map(|b| forward(params, &b.input))
        .collect::<Result<Vec<_>, _>>()?;
    let norm = batch.iter().filter(|b| !b.adversarial).count().max(1) as f64;
    let mut ce = 0.0;
    for (b, tr) in batch.iter().zip(&traces) {
        let l = match &b.bias_probs {
            Some(pb) => poe_terms(&tr.logits, pb, b.label).0,
            None => -log_softmax(&tr.logits)[b.label],
        };
        ce += b.weight * l;
    }
    ce /= norm;
    let reprs: Vec<Vec<f64>> = if spec.bpr.is_some() {
        traces
            .iter()
            .map(|tr| params.w_h.matvec(&tr.hidden, &params.b_h))
            .collect()
    } else {
        Vec::new()
    };
    let bpr = match &spec.bpr {
        Some(s) => {
            let labels: Vec<usize> = batch.iter().map(|b| b.label).collect();
            crate::simbpr::bpr_loss(&reprs, &labels, &s.pair_weights)
        }
        None => 0.0,
    };
    let mut bias = 0.0;
    let bias_scores: Vec<Vec<f64>> = if spec.reversal.is_some() {
        traces
            .iter()
            .map(|tr| params.w_bias.matvec(&tr.hidden, &params.b_bias))
            .collect()
    } else {
        Vec::new()
    };
    for (b, s) in batch.iter().zip(&bias_scores) {
        let mut l = s.iter().map(|&x| softplus(x)).sum::<f64>();
        for &k in &b.bias_targets {
            l -= s[k];
        }
        bias += l / s.len() as f64;
    }
    bias /= norm;
    let gamma = spec.bpr.as_ref().map_or(0.0, |s| s.gamma);
    let mu = spec.reversal.unwrap_or(0.0);
    Ok(Evaluated {
        traces,
        reprs,
        bias_scores,
        breakdown: LossBreakdown {
            ce,
            bpr,
            bias,
            objective: ce + gamma * bpr - mu * bias,
        },
        norm,
    })
}

/// Loss values without gradients.
pub fn evaluate_loss(
    params: &ModelParams,
    batch: &[BatchItem],
    spec: &LossSpec,
) -> Result<LossBreakdown, ModelError> {
    Ok(evaluate_batch(params, batch, spec)?.breakdown)
}

/// Composite batch loss and exact gradients.
///
/// The classifier, partitioning head and encoder receive the gradient of
/// `ce + γ·bpr − μ·bias`; the bias head receives the gradient of `bias` alone
/// (the reversal sits between encoder and bias head).
pub fn loss_and_backward(
    params: &ModelParams,
    batch: &[BatchItem],
    spec: &LossSpec,
) -> Result<(LossBreakdown, Grads), ModelError> {
    if batch.is_empty() {
        return Err(ModelError::InvalidArgument("empty batch".into()));
    }
    let ev = evaluate_batch(params, batch, spec)?;
    let mut grads = ModelParams::zeros(&params.config);
    let n = batch.len();
    let mut d_hidden: Vec<Vec<f64>> = vec![vec![0.0; params.config.hidden_dim]; n];

    for (i, (b, tr)) in batch.iter().zip(&ev.traces).enumerate() {
        let mut d_logits = match &b.bias_probs {
            Some(pb) => poe_terms(&tr.logits, pb, b.label).1,
            None => {
                let mut g = tr.probs.clone();
                g[b.label] -= 1.0;
                g
            }
        };
        let scale = b.weight / ev.norm;
        d_logits.iter_mut().for_each(|g| *g *= scale);
        grads.w_g.add_outer(&d_logits, &tr.hidden, 1.0);
        grads.b_g.add_vec(&d_logits, 1.0);
        axpy(&mut d_hidden[i], 1.0, &params.w_g.matvec_t(&d_logits));
    }

    if let Some(s) = &spec.bpr {
        let labels: Vec<usize> = batch.iter().map(|b| b.label).collect();
        let d_reprs =
            crate::simbpr::bpr_loss_grad(&ev.reprs, &labels, &s.pair_weights);
        for (i, dr) in d_reprs.iter().enumerate() {
            let dr: Vec<f64> = dr.iter().map(|g| g * s.gamma).collect();
            grads.w_h.add_outer(&dr, &ev.traces[i].hidden, 1.0);
            grads.b_h.add_vec(&dr, 1.0);
            axpy(&mut d_hidden[i], 1.0, &params.w_h.matvec_t(&dr));
        }
    }

    if let Some(mu) = spec.reversal {
        for (i, (b, s)) in batch.iter().zip(&ev.bias_scores).enumerate() {
            let k = s.len() as f64;
            let mut ds: Vec<f64> = s.iter().map(|&x| sigmoid(x) / (k * ev.norm)).collect();
            for &slot in &b.bias_targets {
                ds[slot] -= 1.0 / (k * ev.norm);
            }
            grads.w_bias.add_outer(&ds, &ev.traces[i].hidden, 1.0);
            grads.b_bias.add_vec(&ds, 1.0);
            axpy(&mut d_hidden[i], -mu, &params.w_bias.matvec_t(&ds));
        }
    }

    for ((b, tr), dh) in batch.iter().zip(&ev.traces).zip(&d_hidden) {
        encoder_backward(params, tr, dh, Some(&mut grads), Some(&b.input.ids), false);
    }

    if !ev.breakdown.objective.is_finite() {
        return Err(ModelError::NonFinite("loss".into()));
    }
    grads.check_finite("grad")?;
    Ok((ev.breakdown, grads))
}

/// Central finite differences over a random 5% subset of coordinates (at
/// least one per tensor). Returns the maximum relative error with denominator
/// `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check(
    params: &ModelParams,
    batch: &[BatchItem],
    spec: &LossSpec,
    eps: f64,
    seed: u64,
) -> Result<f64, ModelError> {
    if eps <= 0.0 || !eps.is_finite() {
        return Err(ModelError::InvalidArgument("eps must be positive".into()));
    }
    let (_, grads) = loss_and_backward(params, batch, spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    for ti in 0..TENSOR_NAMES.len() {
        // The bias head is checked against its own loss; everything else against the objective.
        let bias_head = TENSOR_NAMES[ti].ends_with("bias");
        let objective = |p: &ModelParams| -> Result<f64, ModelError> {
            let b = evaluate_loss(p, batch, spec)?;
            Ok(if bias_head { b.bias } else { b.objective })
        };
        if bias_head && spec.reversal.is_none() {
            continue;
        }
        let len = params.tensors()[ti].data.len();
        let count = ((len as f64) * 0.05).ceil() as usize;
        for _ in 0..count.max(1) {
            let k = rng.gen_range(0..len);
            let orig = params.tensors()[ti].data[k];
            probe.tensors_mut()[ti].data[k] = orig + eps;
            let plus = objective(&probe)?;
            probe.tensors_mut()[ti].data[k] = orig - eps;
            let minus = objective(&probe)?;
            probe.tensors_mut()[ti].data[k] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let analytic = grads.tensors()[ti].data[k];
            let denom = analytic.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((analytic - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: ModelParams,
    pub v: ModelParams,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        AdamState {
            m: ModelParams::zeros(&params.config),
            v: ModelParams::zeros(&params.config),
            step: 0,
        }
    }
}

/// Bias-corrected Adam update.
pub fn optimizer_step(
    params: &mut ModelParams,
    grads: &Grads,
    state: &mut AdamState,
    hyper: &AdamHyper,
) -> Result<(), ModelError> {
    if state.m.config != params.config || grads.config != params.config {
        return Err(ModelError::InvalidArgument("optimizer state shape mismatch".into()));
    }
    grads.check_finite("grad")?;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hyper.beta1.powi(t);
    let c2 = 1.0 - hyper.beta2.powi(t);
    let ps = params.tensors_mut();
    let ms = state.m.tensors_mut();
    let vs = state.v.tensors_mut();
    for (((p, g), m), v) in ps.into_iter().zip(grads.tensors()).zip(ms).zip(vs) {
        for k in 0..p.data.len() {
            let gk = g.data[k];
            m.data[k] = hyper.beta1 * m.data[k] + (1.0 - hyper.beta1) * gk;
            v.data[k] = hyper.beta2 * v.data[k] + (1.0 - hyper.beta2) * gk * gk;
            let mh = m.data[k] / c1;
            let vh = v.data[k] / c2;
            p.data[k] -= hyper.lr * mh / (vh.sqrt() + hyper.eps);
        }
    }
    params.check_finite("params")?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamHyper,
    pub seed: u64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            epochs: 10,
            batch_size: 32,
            adam: AdamHyper::default(),
            seed: 0,
        }
    }
}

/// Plain minibatch training with a fresh shuffle every epoch. Returns the
/// mean objective of each epoch.
pub fn fit(
    params: &mut ModelParams,
    items: &[BatchItem],
    spec: &LossSpec,
    cfg: &FitConfig,
) -> Result<Vec<f64>, ModelError> {
    use rand::seq::SliceRandom;
    if cfg.batch_size == 0 {
        return Err(ModelError::InvalidArgument("batch size must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = AdamState::new(params);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<BatchItem> = chunk.iter().map(|&i| items[i].clone()).collect();
            let (l, g) = loss_and_backward(params, &batch, spec)?;
            optimizer_step(params, &g, &mut state, &cfg.adam)?;
            total += l.objective;
            batches += 1;
        }
        history.push(total / batches.max(1) as f64);
    }
    Ok(history)
}

pub const CHECKPOINT_FORMAT: &str = "codebias-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub params: ModelParams,
    pub vocab: Vocab,
}

impl Checkpoint {
    pub fn new(params: ModelParams, vocab: Vocab) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            params,
            vocab,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, ModelError> {
        let mut c: Checkpoint =
            serde_json::from_str(s).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        if c.format != CHECKPOINT_FORMAT || c.version != CHECKPOINT_VERSION {
            return Err(ModelError::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                c.format, c.version
            )));
        }
        c.vocab.reindex();
        let p = &c.params;
        let shapes_ok = p.embedding.rows == p.config.vocab_size
            && p.embedding.rows == c.vocab.len()
            && p.w1.cols == p.config.input_dim()
            && p.tensors().iter().all(|t| t.data.len() == t.rows * t.cols);
        if !shapes_ok {
            return Err(ModelError::Checkpoint("tensor shapes disagree with config".into()));
        }
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(task: Task) -> ModelConfig {
        ModelConfig {
            vocab_size: 12,
            embed_dim: 4,
            hidden_dim: 5,
            head_dim: 3,
            num_classes: task.num_classes(),
            task,
            bias_dim: 4,
            activation: Activation::Tanh,
        }
    }

    fn item(ids: &[usize], target: Option<usize>, label: usize) -> BatchItem {
        BatchItem::plain(
            Encoded {
                ids: ids.to_vec(),
                target,
            },
            label,
        )
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let c = cfg(Task::VulnDet);
        let a = init_params(&c, 1).unwrap();
        assert_eq!(a, init_params(&c, 1).unwrap());
        for t in [&a.b1, &a.b_g, &a.b_h, &a.b_bias] {
            assert!(t.data.iter().all(|&v| v == 0.0));
        }
        let b = init_params(&c, 2).unwrap();
        let weights = |p: &ModelParams| -> Vec<f64> {
            [&p.embedding, &p.w1, &p.w_g, &p.w_h, &p.w_bias]
                .iter()
                .flat_map(|t| t.data.clone())
                .collect()
        };
        let (wa, wb) = (weights(&a), weights(&b));
        let differ = wa.iter().zip(&wb).filter(|(x, y)| x != y).count();
        assert!(differ as f64 >= 0.99 * wa.len() as f64);
        let bound = (6.0f64 / (12 + 4) as f64).sqrt();
        assert!(a.embedding.data.iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn invalid_config_rejected() {
        let mut c = cfg(Task::VulnDet);
        c.num_classes = 1;
        assert!(init_params(&c, 0).is_err());
    }

    #[test]
    fn zero_embeddings_give_softmax_of_bias() {
        let c = cfg(Task::VulnDet);
        let mut p = init_params(&c, 3).unwrap();
        p.embedding.data.iter_mut().for_each(|v| *v = 0.0);
        p.b_g.data = vec![0.3, -0.2];
        let tr = forward(&p, &Encoded { ids: vec![1, 2, 3], target: None }).unwrap();
        assert!(tr.pooled.iter().all(|&v| v == 0.0));
        // hidden = tanh(0) = 0, so logits are exactly b_g
        assert_eq!(tr.logits, vec![0.3, -0.2]);
        assert_eq!(tr.probs, softmax(&[0.3, -0.2]));
    }

    #[test]
    fn single_token_pooling_and_normalization() {
        let p = init_params(&cfg(Task::VulnDet), 4).unwrap();
        let tr = forward(&p, &Encoded { ids: vec![5], target: None }).unwrap();
        assert_eq!(tr.pooled, p.embedding.row(5).to_vec());
        assert!((tr.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn bad_target_is_an_error() {
        let p = init_params(&cfg(Task::TypeInf), 4).unwrap();
        let e = forward(&p, &Encoded { ids: vec![1, 2], target: Some(2) });
        assert_eq!(e.unwrap_err(), ModelError::Index { index: 2, len: 2 });
        assert!(forward(&p, &Encoded { ids: vec![1, 2], target: None }).is_err());
        let tr = forward(&p, &Encoded { ids: vec![1, 2], target: Some(1) }).unwrap();
        assert_eq!(tr.input.len(), 8);
    }

    #[test]
    fn pooling_is_order_free() {
        let p = init_params(&cfg(Task::VulnDet), 5).unwrap();
        let a = forward(&p, &Encoded { ids: vec![2, 3, 4, 5, 6], target: None }).unwrap();
        let b = forward(&p, &Encoded { ids: vec![6, 4, 2, 5, 3], target: None }).unwrap();
        for (x, y) in a.logits.iter().zip(&b.logits) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn init_loss_near_ln2_and_zero_model_grad() {
        let c = ModelConfig::new(Task::VulnDet, 40, 8);
        let p = init_params(&c, 9).unwrap();
        let batch: Vec<BatchItem> = (0..8)
            .map(|i| item(&[2 + i, 10 + i, 20 + i], None, i % 2))
            .collect();
        let (l, _) = loss_and_backward(&p, &batch, &LossSpec::default()).unwrap();
        assert!((l.ce - 2f64.ln()).abs() < 0.2, "{}", l.ce);

        let mut z = ModelParams::zeros(&c);
        z.b_g.data = vec![0.1, -0.4];
        let (_, g) = loss_and_backward(&z, &[item(&[3, 4], None, 1)], &LossSpec::default()).unwrap();
        let mut pm = softmax(&[0.1, -0.4]);
        pm[1] -= 1.0;
        assert_eq!(g.b_g.data, pm);
    }

    #[test]
    fn weights_scale_loss_linearly() {
        let p = init_params(&cfg(Task::VulnDet), 6).unwrap();
        let mut batch = vec![item(&[1, 2], None, 0), item(&[3, 4, 5], None, 1)];
        let l1 = evaluate_loss(&p, &batch, &LossSpec::default()).unwrap().ce;
        batch.iter_mut().for_each(|b| b.weight *= 2.0);
        let l2 = evaluate_loss(&p, &batch, &LossSpec::default()).unwrap().ce;
        assert!((l2 - 2.0 * l1).abs() < 1e-12);
    }

    #[test]
    fn poe_with_uniform_prior_is_plain_ce() {
        let logits = [0.4, -1.0, 0.2];
        let (l, d) = poe_terms(&logits, &[1.0 / 3.0; 3], 2);
        assert!((l + log_softmax(&logits)[2]).abs() < 1e-12);
        let mut expect = softmax(&logits);
        expect[2] -= 1.0;
        for (a, b) in d.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn grad_check_full_model_all_compositions() {
        for task in [Task::VulnDet, Task::TypeInf] {
            let c = cfg(task);
            let p = init_params(&c, 10).unwrap();
            let tgt = |t| (task == Task::TypeInf).then_some(t);
            let mut batch = vec![
                item(&[1, 2, 3], tgt(1), 0),
                item(&[4, 5, 6, 7], tgt(0), 1),
                item(&[8, 2, 9], tgt(2), 1),
            ];
            batch[0].weight = 0.3;
            batch[1].bias_probs = Some(vec![0.7; c.num_classes]);
            batch[1].bias_targets = vec![0, 2];
            batch[2].adversarial = true;
            let n = batch.len();
            let specs = [
                LossSpec::default(),
                LossSpec {
                    bpr: Some(BprSpec {
                        gamma: 0.8,
                        pair_weights: vec![0.6; n * n],
                    }),
                    reversal: None,
                },
                LossSpec {
                    bpr: None,
                    reversal: Some(0.1),
                },
            ];
            for spec in &specs {
                let err = grad_check(&p, &batch, spec, 1e-4, 1).unwrap();
                assert!(err < 1e-4, "{task:?} {spec:?}: {err}");
            }
        }
    }

    #[test]
    fn grad_check_linear_probe() {
        let mut c = cfg(Task::VulnDet);
        c.activation = Activation::Identity;
        let p = init_params(&c, 11).unwrap();
        let batch = vec![item(&[1, 2, 3], None, 0), item(&[4, 5], None, 1)];
        let err = grad_check(&p, &batch, &LossSpec::default(), 1e-4, 2).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn grad_check_rejects_zero_eps() {
        let p = init_params(&cfg(Task::VulnDet), 1).unwrap();
        let b = vec![item(&[1], None, 0)];
        assert!(matches!(
            grad_check(&p, &b, &LossSpec::default(), 0.0, 0),
            Err(ModelError::InvalidArgument(_))
        ));
    }

    #[test]
    fn adam_zero_grads_and_first_step() {
        let c = cfg(Task::VulnDet);
        let mut p = init_params(&c, 12).unwrap();
        let before = p.clone();
        let mut st = AdamState::new(&p);
        let zero = ModelParams::zeros(&c);
        optimizer_step(&mut p, &zero, &mut st, &AdamHyper::default()).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.step, 1);

        let mut p = before.clone();
        let mut st = AdamState::new(&p);
        let mut g = ModelParams::zeros(&c);
        g.w1.data.iter_mut().enumerate().for_each(|(i, v)| *v = (i as f64 - 7.5) * 0.01);
        let hyper = AdamHyper::default();
        optimizer_step(&mut p, &g, &mut st, &hyper).unwrap();
        for k in 0..g.w1.data.len() {
            let step = before.w1.data[k] - p.w1.data[k];
            let gk = g.w1.data[k];
            assert!((step - hyper.lr * gk.signum()).abs() < 1e-6, "{k}: {step}");
        }

        let mut p2 = before.clone();
        let mut st2 = AdamState::new(&p2);
        optimizer_step(&mut p2, &g, &mut st2, &hyper).unwrap();
        assert_eq!(p, p2);
    }

    #[test]
    fn adam_rejects_non_finite() {
        let c = cfg(Task::VulnDet);
        let mut p = init_params(&c, 1).unwrap();
        let mut st = AdamState::new(&p);
        let mut g = ModelParams::zeros(&c);
        g.b1.data[0] = f64::NAN;
        assert!(matches!(
            optimizer_step(&mut p, &g, &mut st, &AdamHyper::default()),
            Err(ModelError::NonFinite(_))
        ));
    }

    #[test]
    fn checkpoint_round_trip() {
        let c = cfg(Task::TypeInf);
        let p = init_params(&c, 13).unwrap();
        let toks: Vec<String> = (0..12).map(|i| format!("t{i}")).collect();
        let bias: BTreeSet<String> = ["t3".to_string()].into();
        let ck = Checkpoint::new(p, Vocab::from_tokens(toks, &bias));
        let back = Checkpoint::from_json(&ck.to_json()).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.vocab.id("t3"), 3);
        assert!(Checkpoint::from_json("{}").is_err());
    }
}
