//! Experiment orchestration: data preparation, training with every loss
//! composition, evaluation on the three settings and attribution diagnostics.

mod report;

pub use report::{emit_report, render_case_html, render_distribution_svg, render_sweep_svg, tables_csv};

use crate::attribution::{integrated_gradients, AttributionVector, DEFAULT_STEPS};
use crate::biasmetrics::{self, RatioMode};
use crate::corpus::{
    self, fresh_words, generate_corpus, project_name_pools, split_projects, Corpus, GenConfig,
    Partition, Sample, SplitSpec, Task,
};
use crate::debias::{self, BiasOnlyModel, DEFAULT_ATTACK_K, DEFAULT_REVERSAL, FRESH_CANDIDATES};
use crate::model::{
    self, init_params, loss_and_backward, optimizer_step, Activation, AdamHyper, AdamState,
    BatchItem, BprSpec, Encoded, FitConfig, LossSpec, ModelConfig, ModelParams, Vocab,
};
use crate::simbpr::{self, Mode, SimilarityMatrix};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mitigation {
    None,
    Reweight,
    Poe,
    AdvTrain,
    GradRev,
}

impl Mitigation {
    pub const ALL: [Mitigation; 5] = [
        Mitigation::None,
        Mitigation::Reweight,
        Mitigation::Poe,
        Mitigation::AdvTrain,
        Mitigation::GradRev,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mitigation::None => "none",
            Mitigation::Reweight => "reweight",
            Mitigation::Poe => "poe",
            Mitigation::AdvTrain => "advtrain",
            Mitigation::GradRev => "gradrev",
        }
    }
}

impl std::str::FromStr for Mitigation {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Mitigation::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown mitigation {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSettings {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub head_dim: usize,
    pub activation: Activation,
}

impl Default for ModelSettings {
    fn default() -> Self {
        ModelSettings {
            embed_dim: 32,
            hidden_dim: 64,
            head_dim: 32,
            activation: Activation::Tanh,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            epochs: 10,
            batch_size: 32,
            lr: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub task: Task,
    pub generator: GenConfig,
    /// Load this corpus instead of generating one.
    pub corpus_path: Option<String>,
    pub split_seed: u64,
    pub model: ModelSettings,
    pub train: TrainSettings,
    pub mitigation: Mitigation,
    pub bpr: bool,
    /// Defaults to AstBow for type inference and CfgPaths for vulnerability detection.
    pub bpr_mode: Option<Mode>,
    pub reversal_mu: f64,
    pub attack_k: usize,
    pub ig_steps: usize,
    pub seeds: Vec<u64>,
    pub out_dir: Option<String>,
    /// Cap on bars in the distribution plot.
    pub plot_limit: usize,
    /// Attribution overlays emitted per report.
    pub case_pages: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            task: Task::VulnDet,
            generator: GenConfig::default(),
            corpus_path: None,
            split_seed: 11,
            model: ModelSettings::default(),
            train: TrainSettings::default(),
            mitigation: Mitigation::None,
            bpr: false,
            bpr_mode: None,
            reversal_mu: DEFAULT_REVERSAL,
            attack_k: DEFAULT_ATTACK_K,
            ig_steps: DEFAULT_STEPS,
            seeds: vec![1, 2, 3, 4, 5],
            out_dir: None,
            plot_limit: 60,
            case_pages: 4,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] crate::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

macro_rules! core_err {
    ($($t:ty),*) => {$(
        impl From<$t> for HarnessError {
            fn from(e: $t) -> Self {
                HarnessError::Core(e.into())
            }
        }
    )*};
}
core_err!(
    crate::model::ModelError,
    crate::debias::DebiasError,
    crate::simbpr::SimError,
    crate::biasmetrics::MetricsError,
    crate::corpus::CorpusError
);

impl ExperimentConfig {
    pub fn for_task(task: Task) -> Self {
        ExperimentConfig {
            task,
            generator: GenConfig {
                task,
                ..GenConfig::default()
            },
            ..ExperimentConfig::default()
        }
    }

    pub fn bpr_mode(&self) -> Mode {
        self.bpr_mode.unwrap_or(match self.task {
            Task::TypeInf => Mode::AstBow,
            Task::VulnDet => Mode::CfgPaths,
        })
    }

    /// BPR without a debiasing partner is an ablation rather than a method from the study.
    pub fn nonstandard(&self) -> bool {
        self.bpr && self.mitigation == Mitigation::None
    }

    pub fn setting_name(&self) -> String {
        let base = self.mitigation.name();
        if self.bpr {
            format!("{base}+bpr")
        } else {
            base.to_string()
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::Config(m.to_string()));
        if self.generator.task != self.task {
            return bad("generator.task must equal task");
        }
        if self.bpr && matches!(self.mitigation, Mitigation::Reweight | Mitigation::Poe) {
            return bad("bpr combines only with advtrain, gradrev or none");
        }
        if self.bpr && self.train.batch_size < 2 {
            return bad("bpr needs batch_size >= 2");
        }
        if self.train.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.train.lr > 0.0 && self.train.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.ig_steps == 0 || self.attack_k == 0 {
            return bad("ig_steps and attack_k must be >= 1");
        }
        let expect = match self.task {
            Task::TypeInf => Mode::AstBow,
            Task::VulnDet => Mode::CfgPaths,
        };
        if self.bpr_mode() != expect {
            return bad("bpr_mode must be AstBow for TypeInf and CfgPaths for VulnDet");
        }
        Ok(())
    }
}

/// One classification instance of a sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub sample: usize,
    pub target: Option<usize>,
    pub label: usize,
    pub input: Encoded,
}

/// Everything shared by the seeds of one configuration.
pub struct Prepared {
    pub corpus: Corpus,
    pub split: SplitSpec,
    pub partition: Partition,
    pub vocab: Vocab,
    pub train: Vec<Instance>,
    pub iid: Vec<Instance>,
    pub ood: Vec<Instance>,
    pub pools: BTreeMap<String, Vec<String>>,
    pub fresh: Vec<String>,
    pub similarity: Option<SimilarityMatrix>,
    /// Unshuffled training order; batches are cut at train time.
    pub bpr_order: Option<Vec<usize>>,
}

fn instances(corpus: &Corpus, vocab: &Vocab, idx: &[usize]) -> Vec<Instance> {
    idx.iter()
        .flat_map(|&i| {
            let s = &corpus.samples[i];
            s.instances().into_iter().map(move |(target, label)| Instance {
                sample: i,
                target,
                label,
                input: vocab.encode(s, target),
            })
        })
        .collect()
}

pub fn load_or_generate(cfg: &ExperimentConfig) -> Result<Corpus, HarnessError> {
    Ok(match &cfg.corpus_path {
        Some(p) => corpus::load_corpus(std::path::Path::new(p))?,
        None => generate_corpus(&cfg.generator)?,
    })
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared, HarnessError> {
    cfg.validate()?;
    let corpus = load_or_generate(cfg)?;
    prepare_corpus(cfg, corpus)
}

pub fn prepare_corpus(cfg: &ExperimentConfig, corpus: Corpus) -> Result<Prepared, HarnessError> {
    if corpus.task != cfg.task {
        return Err(HarnessError::Config("corpus task differs from config task".into()));
    }
    let split = split_projects(&corpus, cfg.split_seed)?;
    let partition = split.partition(&corpus);
    let vocab = Vocab::build(
        partition.train.iter().map(|&i| &corpus.samples[i]),
        &corpus.bias_vocab,
    );
    let train = instances(&corpus, &vocab, &partition.train);
    let iid = instances(&corpus, &vocab, &partition.iid_test);
    let ood = instances(&corpus, &vocab, &partition.ood_test);
    let pools = project_name_pools(&corpus);
    let mut taken: BTreeSet<String> = pools.values().flatten().cloned().collect();
    taken.extend(corpus.bias_vocab.iter().cloned());
    let fresh = fresh_words(
        &mut ChaCha8Rng::seed_from_u64(cfg.split_seed ^ 0xf2e5),
        FRESH_CANDIDATES,
        &mut taken,
    );
    let (similarity, bpr_order) = if cfg.bpr {
        let emb = train
            .iter()
            .map(|t| simbpr::embed_instance(&corpus.samples[t.sample], t.target))
            .collect::<crate::Result<Vec<_>>>()?;
        let m = simbpr::similarity_matrix(&emb)?;
        let order = simbpr::unshuffle(&m);
        (Some(m), Some(order))
    } else {
        (None, None)
    };
    Ok(Prepared {
        corpus,
        split,
        partition,
        vocab,
        train,
        iid,
        ood,
        pools,
        fresh,
        similarity,
        bpr_order,
    })
}

impl Prepared {
    pub fn sample(&self, inst: &Instance) -> &Sample {
        &self.corpus.samples[inst.sample]
    }

    pub fn model_config(&self, cfg: &ExperimentConfig) -> ModelConfig {
        ModelConfig {
            vocab_size: self.vocab.len(),
            embed_dim: cfg.model.embed_dim,
            hidden_dim: cfg.model.hidden_dim,
            head_dim: cfg.model.head_dim,
            num_classes: cfg.task.num_classes(),
            task: cfg.task,
            bias_dim: self.vocab.bias_dim(),
            activation: cfg.model.activation,
        }
    }

    pub fn attack_instances(&self, set: &[Instance]) -> Vec<(&Sample, Option<usize>, usize)> {
        set.iter()
            .map(|i| (self.sample(i), i.target, i.label))
            .collect()
    }
}

/// Trains one model under the configured loss composition.
pub fn train_model(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    seed: u64,
) -> Result<(ModelParams, Vec<f64>), HarnessError> {
    let mcfg = prep.model_config(cfg);
    let mut params = init_params(&mcfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7a11);
    let n = prep.train.len();

    let bias_only: Option<BiasOnlyModel> = match cfg.mitigation {
        Mitigation::Reweight | Mitigation::Poe => {
            let data: Vec<(&Sample, Encoded, usize)> = prep
                .train
                .iter()
                .map(|t| (prep.sample(t), t.input.clone(), t.label))
                .collect();
            let fit_cfg = FitConfig {
                epochs: cfg.train.epochs,
                batch_size: cfg.train.batch_size,
                adam: AdamHyper {
                    lr: cfg.train.lr,
                    ..AdamHyper::default()
                },
                seed: seed ^ 0xb1a5,
            };
            Some(debias::train_bias_only(
                init_params(&mcfg, seed ^ 0xb1a5)?,
                &data,
                &fit_cfg,
            )?)
        }
        _ => None,
    };
    let mut base: Vec<BatchItem> = Vec::with_capacity(n);
    for t in &prep.train {
        let mut item = BatchItem::plain(t.input.clone(), t.label);
        if let Some(b) = &bias_only {
            let pb = b.probs(prep.sample(t), &t.input)?;
            match cfg.mitigation {
                Mitigation::Reweight => item.weight = 1.0 - pb[t.label],
                _ => item.bias_probs = Some(pb),
            }
        }
        if cfg.mitigation == Mitigation::GradRev {
            item.bias_targets = prep.vocab.bias_targets(&t.input);
        }
        base.push(item);
    }

    let mut batches: Vec<Vec<usize>> = match &prep.bpr_order {
        Some(o) => simbpr::batchify(o, cfg.train.batch_size)?,
        None => Vec::new(),
    };
    let steps_per_epoch = match &prep.bpr_order {
        Some(_) => batches.len(),
        None => n.div_ceil(cfg.train.batch_size),
    };
    let total_steps = (steps_per_epoch * cfg.train.epochs).max(1);
    let hyper = AdamHyper {
        lr: cfg.train.lr,
        ..AdamHyper::default()
    };
    let mut state = AdamState::new(&params);
    let mut history = Vec::with_capacity(cfg.train.epochs);
    let mut step = 0usize;
    let mut order: Vec<usize> = (0..n).collect();

    for _ in 0..cfg.train.epochs {
        // Counterparts come from the current parameters; only renames that raise the loss are kept.
        let adversarial: Vec<Option<Encoded>> = if cfg.mitigation == Mitigation::AdvTrain {
            let set = debias::build_adversarial_set(
                &params,
                &prep.vocab,
                &prep.attack_instances(&prep.train),
                &prep.pools,
                &prep.fresh,
                cfg.attack_k,
            )?;
            set.into_iter()
                .map(|a| {
                    a.increased_loss()
                        .then(|| prep.vocab.encode(&a.sample, a.target))
                })
                .collect()
        } else {
            vec![None; n]
        };
        if prep.bpr_order.is_some() {
            batches.shuffle(&mut rng);
        } else {
            order.shuffle(&mut rng);
            batches = order
                .chunks(cfg.train.batch_size)
                .map(<[usize]>::to_vec)
                .collect();
        }
        let mut total = 0.0;
        for batch in &batches {
            let mut items: Vec<BatchItem> = batch.iter().map(|&i| base[i].clone()).collect();
            let mut origin: Vec<usize> = batch.clone();
            for &i in batch {
                if let Some(adv) = &adversarial[i] {
                    let mut it = base[i].clone();
                    it.input = adv.clone();
                    it.adversarial = true;
                    if cfg.mitigation == Mitigation::GradRev {
                        it.bias_targets = prep.vocab.bias_targets(adv);
                    }
                    items.push(it);
                    origin.push(i);
                }
            }
            let progress = step as f64 / total_steps as f64;
            let spec = LossSpec {
                bpr: prep.similarity.as_ref().map(|m| {
                    let k = origin.len();
                    let mut w = vec![0.0; k * k];
                    for a in 0..k {
                        for b in 0..k {
                            w[a * k + b] = m.get(origin[a], origin[b]);
                        }
                    }
                    BprSpec {
                        gamma: simbpr::gamma_p(progress).expect("progress in [0,1)"),
                        pair_weights: w,
                    }
                }),
                reversal: (cfg.mitigation == Mitigation::GradRev).then_some(cfg.reversal_mu),
            };
            let (loss, grads) = loss_and_backward(&params, &items, &spec)?;
            optimizer_step(&mut params, &grads, &mut state, &hyper)?;
            total += loss.objective;
            step += 1;
        }
        history.push(total / batches.len().max(1) as f64);
    }
    Ok((params, history))
}

pub fn accuracy(params: &ModelParams, set: &[Instance]) -> Result<f64, HarnessError> {
    if set.is_empty() {
        return Ok(0.0);
    }
    let mut hit = 0usize;
    for i in set {
        hit += (model::predict(params, &i.input)? == i.label) as usize;
    }
    Ok(hit as f64 / set.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvEval {
    pub accuracy: f64,
    /// Fraction of perturbed samples whose prediction flipped.
    pub attack_success: f64,
    pub perturbed: usize,
}

/// White-box attack of `set` against `params`, then accuracy on the result.
pub fn adversarial_eval(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    params: &ModelParams,
    set: &[Instance],
) -> Result<(AdvEval, Vec<debias::AdvSample>), HarnessError> {
    let advs = debias::build_adversarial_set(
        params,
        &prep.vocab,
        &prep.attack_instances(set),
        &prep.pools,
        &prep.fresh,
        cfg.attack_k,
    )?;
    let mut hit = 0usize;
    let mut flips = 0usize;
    let mut perturbed = 0usize;
    for (a, inst) in advs.iter().zip(set) {
        let pred = model::predict(params, &prep.vocab.encode(&a.sample, a.target))?;
        hit += (pred == inst.label) as usize;
        if a.perturbation.is_some() {
            perturbed += 1;
            flips += (pred != model::predict(params, &inst.input)?) as usize;
        }
    }
    let n = set.len().max(1) as f64;
    Ok((
        AdvEval {
            accuracy: hit as f64 / n,
            attack_success: if perturbed == 0 { 0.0 } else { flips as f64 / perturbed as f64 },
            perturbed,
        },
        advs,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Keys like `top3_contains`.
    pub bias_ratio: BTreeMap<String, f64>,
    /// Mean of the per-label correlations that could be computed.
    pub alignment_r: Option<f64>,
    pub per_label_r: BTreeMap<String, Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionPlot {
    pub label: String,
    pub words: Vec<String>,
    pub categories: Vec<String>,
    pub mean_ig: Vec<f64>,
    pub cond_idf: Vec<f64>,
    pub fitted: Vec<f64>,
    pub pearson_r: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub sample_id: String,
    pub tokens: Vec<String>,
    pub per_token: Vec<f64>,
    pub biased: Vec<bool>,
    pub label: String,
    pub predicted: String,
    pub target: Option<usize>,
}

/// IG over the IID test set (attributing the predicted class), top-n bias
/// ratios against the corpus bias vocabulary, and per-label Cond-Idf alignment.
pub fn diagnostics(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    params: &ModelParams,
) -> Result<(Diagnostics, Option<DistributionPlot>, Vec<CaseRecord>), HarnessError> {
    let mut attrs: Vec<AttributionVector> = Vec::with_capacity(prep.iid.len());
    let mut preds = Vec::with_capacity(prep.iid.len());
    for inst in &prep.iid {
        let pred = model::predict(params, &inst.input)?;
        attrs.push(integrated_gradients(params, &inst.input, pred, cfg.ig_steps)?);
        preds.push(pred);
    }
    let samples: Vec<&Sample> = prep.iid.iter().map(|i| prep.sample(i)).collect();
    let bias = &prep.corpus.bias_vocab;
    let mut ratio = BTreeMap::new();
    for n in 1..=3 {
        for (mode, name) in [(RatioMode::Contains, "contains"), (RatioMode::Only, "only")] {
            ratio.insert(
                format!("top{n}_{name}"),
                biasmetrics::topn_bias_ratio(&attrs, &samples, bias, n, mode),
            );
        }
    }

    let train_samples: Vec<&Sample> = prep.train.iter().map(|i| prep.sample(i)).collect();
    let mut per_label = BTreeMap::new();
    let mut plot = None;
    for l in 0..cfg.task.num_classes() {
        let idx: Vec<usize> = (0..prep.iid.len()).filter(|&k| prep.iid[k].label == l).collect();
        let la: Vec<AttributionVector> = idx.iter().map(|&k| attrs[k].clone()).collect();
        let ls: Vec<&Sample> = idx.iter().map(|&k| samples[k]).collect();
        let table = biasmetrics::cond_idf(&train_samples, cfg.task, l)?;
        let dist = biasmetrics::mean_ig_distribution(&la, &ls)?;
        let r = match biasmetrics::alignment(&dist, &table, 10) {
            Ok(a) => {
                if plot.is_none() {
                    plot = Some(DistributionPlot {
                        label: cfg.task.class_name(l).to_string(),
                        words: dist.entries.iter().map(|e| e.word.clone()).collect(),
                        categories: dist.entries.iter().map(|e| e.category.clone()).collect(),
                        mean_ig: a.mean_ig.clone(),
                        cond_idf: a.cond_idf.clone(),
                        fitted: a.fitted_curve.clone(),
                        pearson_r: a.pearson_r,
                    });
                }
                Some(a.pearson_r)
            }
            Err(_) => None,
        };
        per_label.insert(cfg.task.class_name(l).to_string(), r);
    }
    let rs: Vec<f64> = per_label.values().flatten().copied().collect();
    let alignment_r = (!rs.is_empty()).then(|| rs.iter().sum::<f64>() / rs.len() as f64);

    let cases = prep
        .iid
        .iter()
        .zip(&attrs)
        .zip(&preds)
        .take(cfg.case_pages)
        .map(|((inst, a), &p)| {
            let s = prep.sample(inst);
            CaseRecord {
                sample_id: s.sample_id.clone(),
                tokens: s.tokens.iter().map(|t| t.text.clone()).collect(),
                per_token: a.per_token.clone(),
                biased: s.tokens.iter().map(|t| bias.contains(&t.text)).collect(),
                label: cfg.task.class_name(inst.label).to_string(),
                predicted: cfg.task.class_name(p).to_string(),
                target: inst.target,
            }
        })
        .collect();
    Ok((
        Diagnostics {
            bias_ratio: ratio,
            alignment_r,
            per_label_r: per_label,
        },
        plot,
        cases,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub intra: f64,
    pub inter: f64,
    pub adv: f64,
    pub attack_success: f64,
    pub perturbed: usize,
    pub diagnostics: Diagnostics,
    pub train_loss: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Stat {
        if xs.is_empty() {
            return Stat::default();
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Stat {
            mean,
            std: var.sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Aggregate {
    pub intra: Stat,
    pub inter: Stat,
    pub adv: Stat,
    pub attack_success: Stat,
    pub bias_ratio: BTreeMap<String, Stat>,
    pub alignment_r: Stat,
}

impl Aggregate {
    pub fn of(results: &[SeedResult]) -> Aggregate {
        let col = |f: &dyn Fn(&SeedResult) -> f64| Stat::of(&results.iter().map(f).collect::<Vec<_>>());
        let keys: BTreeSet<&String> = results
            .iter()
            .flat_map(|r| r.diagnostics.bias_ratio.keys())
            .collect();
        let rs: Vec<f64> = results
            .iter()
            .filter_map(|r| r.diagnostics.alignment_r)
            .collect();
        Aggregate {
            intra: col(&|r| r.intra),
            inter: col(&|r| r.inter),
            adv: col(&|r| r.adv),
            attack_success: col(&|r| r.attack_success),
            bias_ratio: keys
                .into_iter()
                .map(|k| (k.clone(), col(&|r| r.diagnostics.bias_ratio.get(k).copied().unwrap_or(0.0))))
                .collect(),
            alignment_r: Stat::of(&rs),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub setting: String,
    pub task: Task,
    pub nonstandard: bool,
    pub valid: bool,
    pub error: Option<String>,
    pub config: ExperimentConfig,
    pub results: Vec<SeedResult>,
    pub aggregate: Aggregate,
    /// `ADV(this) − ADV(unmitigated)`, filled in by suite runs.
    pub delta_adv: Option<f64>,
    pub distribution: Option<DistributionPlot>,
    pub cases: Vec<CaseRecord>,
}

pub fn run_seed(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    seed: u64,
) -> Result<(SeedResult, Option<DistributionPlot>, Vec<CaseRecord>), HarnessError> {
    let (params, train_loss) = train_model(cfg, prep, seed)?;
    let intra = accuracy(&params, &prep.iid)?;
    let inter = accuracy(&params, &prep.ood)?;
    let (adv, _) = adversarial_eval(cfg, prep, &params, &prep.ood)?;
    let (diag, plot, cases) = diagnostics(cfg, prep, &params)?;
    Ok((
        SeedResult {
            seed,
            intra,
            inter,
            adv: adv.accuracy,
            attack_success: adv.attack_success,
            perturbed: adv.perturbed,
            diagnostics: diag,
            train_loss,
        },
        plot,
        cases,
    ))
}

type SeedOutcome = Result<(SeedResult, Option<DistributionPlot>, Vec<CaseRecord>), HarnessError>;

/// Seeds are independent; they run on scoped threads when more than one core is available.
fn run_seeds(cfg: &ExperimentConfig, prep: &Prepared) -> Vec<SeedOutcome> {
    #[cfg(not(target_arch = "wasm32"))]
    {
        let workers = std::thread::available_parallelism().map_or(1, |n| n.get());
        if workers > 1 && cfg.seeds.len() > 1 {
            let mut out = Vec::with_capacity(cfg.seeds.len());
            for chunk in cfg.seeds.chunks(workers) {
                std::thread::scope(|scope| {
                    let handles: Vec<_> = chunk
                        .iter()
                        .map(|&seed| scope.spawn(move || run_seed(cfg, prep, seed)))
                        .collect();
                    out.extend(handles.into_iter().map(|h| h.join().expect("seed worker panicked")));
                });
            }
            return out;
        }
    }
    cfg.seeds.iter().map(|&seed| run_seed(cfg, prep, seed)).collect()
}

pub fn run_prepared(cfg: &ExperimentConfig, prep: &Prepared) -> ExperimentReport {
    let mut report = ExperimentReport {
        setting: cfg.setting_name(),
        task: cfg.task,
        nonstandard: cfg.nonstandard(),
        valid: true,
        error: None,
        config: cfg.clone(),
        results: Vec::new(),
        aggregate: Aggregate::default(),
        delta_adv: None,
        distribution: None,
        cases: Vec::new(),
    };
    for (seed, outcome) in cfg.seeds.iter().zip(run_seeds(cfg, prep)) {
        match outcome {
            Ok((r, plot, cases)) => {
                if report.results.is_empty() {
                    report.distribution = plot;
                    report.cases = cases;
                }
                report.results.push(r);
            }
            Err(e) => {
                report.valid = false;
                report.error = Some(format!("seed {seed}: {e}"));
                break;
            }
        }
    }
    report.aggregate = Aggregate::of(&report.results);
    report
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport, HarnessError> {
    let prep = prepare(cfg)?;
    Ok(run_prepared(cfg, &prep))
}

/// Settings of the comparison table: the unmitigated model, the four
/// baselines, and BPR on top of adversarial training and gradient reversal.
pub fn standard_settings() -> Vec<(Mitigation, bool)> {
    vec![
        (Mitigation::None, false),
        (Mitigation::Reweight, false),
        (Mitigation::Poe, false),
        (Mitigation::AdvTrain, false),
        (Mitigation::GradRev, false),
        (Mitigation::AdvTrain, true),
        (Mitigation::GradRev, true),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub batch_size: usize,
    pub bpr: bool,
    pub intra: f64,
    pub inter: f64,
    pub adv: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    pub base: ExperimentConfig,
    pub reports: Vec<ExperimentReport>,
    /// Batch-size sweep of BPR with adversarial training, first seed, per task.
    pub sweep: BTreeMap<String, Vec<SweepPoint>>,
}

pub const SWEEP_BATCH_SIZES: [usize; 4] = [4, 8, 16, 32];

/// All standard settings for every task in `tasks`, sharing corpus and split per task.
pub fn run_suite(
    base: &ExperimentConfig,
    tasks: &[Task],
    sweep: bool,
) -> Result<SuiteReport, HarnessError> {
    let mut reports = Vec::new();
    let mut sweeps = BTreeMap::new();
    for &task in tasks {
        let mut tcfg = base.clone();
        tcfg.task = task;
        tcfg.generator.task = task;
        tcfg.bpr_mode = None;
        tcfg.validate()?;
        let corpus = load_or_generate(&tcfg)?;
        let mut plain_cfg = tcfg.clone();
        plain_cfg.bpr = false;
        let plain = prepare_corpus(&plain_cfg, corpus.clone())?;
        let mut bpr_cfg = tcfg.clone();
        bpr_cfg.bpr = true;
        let with_bpr = prepare_corpus(&bpr_cfg, corpus.clone())?;
        let mut task_reports = Vec::new();
        for (m, b) in standard_settings() {
            let mut c = tcfg.clone();
            c.mitigation = m;
            c.bpr = b;
            task_reports.push(run_prepared(&c, if b { &with_bpr } else { &plain }));
        }
        let base_adv = task_reports[0].aggregate.adv.mean;
        for r in &mut task_reports {
            r.delta_adv = Some(r.aggregate.adv.mean - base_adv);
        }
        reports.extend(task_reports);
        if sweep {
            let mut points = Vec::new();
            for bpr in [false, true] {
                let prep = if bpr { &with_bpr } else { &plain };
                for &bs in &SWEEP_BATCH_SIZES {
                    let mut c = tcfg.clone();
                    c.mitigation = Mitigation::AdvTrain;
                    c.bpr = bpr;
                    c.train.batch_size = bs;
                    let Some(&seed) = tcfg.seeds.first() else { break };
                    // the main run already covers the configured batch size
                    let done = (bs == tcfg.train.batch_size)
                        .then(|| {
                            reports
                                .iter()
                                .rev()
                                .find(|r: &&ExperimentReport| r.task == task && r.setting == c.setting_name())
                                .and_then(|r| r.results.first())
                        })
                        .flatten();
                    let point = match done {
                        Some(r) => SweepPoint {
                            batch_size: bs,
                            bpr,
                            intra: r.intra,
                            inter: r.inter,
                            adv: r.adv,
                        },
                        None => {
                            let (params, _) = train_model(&c, prep, seed)?;
                            let (adv, _) = adversarial_eval(&c, prep, &params, &prep.ood)?;
                            SweepPoint {
                                batch_size: bs,
                                bpr,
                                intra: accuracy(&params, &prep.iid)?,
                                inter: accuracy(&params, &prep.ood)?,
                                adv: adv.accuracy,
                            }
                        }
                    };
                    points.push(point);
                }
            }
            sweeps.insert(format!("{task:?}"), points);
        }
    }
    Ok(SuiteReport {
        base: base.clone(),
        reports,
        sweep: sweeps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(task: Task) -> ExperimentConfig {
        let mut c = ExperimentConfig::for_task(task);
        c.generator.num_projects = 6;
        c.generator.samples_per_project = 30;
        c.train.epochs = 2;
        c.seeds = vec![1];
        c.ig_steps = 4;
        c
    }

    #[test]
    fn config_validation() {
        let mut c = ExperimentConfig::default();
        assert!(c.validate().is_ok());
        c.bpr = true;
        c.mitigation = Mitigation::Poe;
        assert!(c.validate().is_err());
        c.mitigation = Mitigation::None;
        assert!(c.validate().is_ok());
        assert!(c.nonstandard());
        c.bpr_mode = Some(Mode::AstBow);
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::default();
        c.task = Task::TypeInf;
        assert!(c.validate().is_err());
    }

    #[test]
    fn config_json_round_trip_with_defaults() {
        let c = ExperimentConfig::for_task(Task::TypeInf);
        let back: ExperimentConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        let partial: ExperimentConfig = serde_json::from_str(r#"{"mitigation":"gradrev"}"#).unwrap();
        assert_eq!(partial.mitigation, Mitigation::GradRev);
        assert_eq!(partial.train.epochs, 10);
    }

    #[test]
    fn every_composition_runs() {
        for task in [Task::VulnDet, Task::TypeInf] {
            for (m, b) in standard_settings() {
                let mut c = small(task);
                c.mitigation = m;
                c.bpr = b;
                let r = run_experiment(&c).unwrap();
                assert!(r.valid, "{:?}", r.error);
                let s = &r.results[0];
                for v in [s.intra, s.inter, s.adv] {
                    assert!((0.0..=1.0).contains(&v));
                }
            }
        }
    }

    #[test]
    fn zero_epochs_is_near_chance() {
        let mut c = ExperimentConfig::for_task(Task::VulnDet);
        c.ig_steps = 4;
        c.train.epochs = 0;
        c.seeds = vec![1, 2, 3];
        let r = run_experiment(&c).unwrap();
        for s in &r.results {
            assert!(s.train_loss.is_empty());
            assert!((s.intra - 0.5).abs() <= 0.05, "intra {}", s.intra);
            assert!((s.inter - 0.5).abs() <= 0.05, "inter {}", s.inter);
        }
    }
}
