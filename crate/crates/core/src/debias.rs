//! Baseline mitigations (reweighting, product of experts, adversarial
//! training, gradient reversal) and the single-step rename attack.

use crate::corpus::{Sample, Task};
use crate::lang::{self, declared_name_tokens, identifier_runs, lexical_categories, IdentRun};
use crate::model::{
    self, cross_entropy, fit, BatchItem, Encoded, FitConfig, LossSpec, ModelError, ModelParams,
    Vocab, MASK,
};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeSet, HashMap};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DebiasError {
    #[error("sample {0} has no renameable identifier")]
    NoRenameable(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

pub const DEFAULT_REVERSAL: f64 = 0.1;
pub const DEFAULT_ATTACK_K: usize = 8;
pub const FRESH_CANDIDATES: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskRule {
    /// Keep user-defined function, variable and macro-like names.
    UserDefinedNames,
    /// Keep only the declared variable names.
    DeclarationNames,
}

impl MaskRule {
    pub fn for_task(task: Task) -> Self {
        match task {
            Task::VulnDet => MaskRule::UserDefinedNames,
            Task::TypeInf => MaskRule::DeclarationNames,
        }
    }

    /// Token positions the bias-only model may see.
    pub fn kept(self, sample: &Sample) -> BTreeSet<usize> {
        match self {
            MaskRule::UserDefinedNames => lexical_categories(&sample.tokens)
                .into_iter()
                .enumerate()
                .filter(|(_, c)| c.is_user_defined())
                .map(|(i, _)| i)
                .collect(),
            MaskRule::DeclarationNames => declared_name_tokens(&sample.tokens),
        }
    }

    pub fn apply(self, sample: &Sample, encoded: &Encoded) -> Encoded {
        let keep = self.kept(sample);
        Encoded {
            ids: encoded
                .ids
                .iter()
                .enumerate()
                .map(|(i, &id)| if keep.contains(&i) { id } else { MASK })
                .collect(),
            target: encoded.target,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiasOnlyModel {
    pub params: ModelParams,
    pub rule: MaskRule,
}

impl BiasOnlyModel {
    pub fn probs(&self, sample: &Sample, encoded: &Encoded) -> Result<Vec<f64>, ModelError> {
        Ok(model::forward(&self.params, &self.rule.apply(sample, encoded))?.probs)
    }
}

/// Trains the standard architecture on masked inputs.
pub fn train_bias_only(
    params: ModelParams,
    instances: &[(&Sample, Encoded, usize)],
    fit_cfg: &FitConfig,
) -> Result<BiasOnlyModel, DebiasError> {
    let task = params.config.task;
    let rule = MaskRule::for_task(task);
    let items: Vec<BatchItem> = instances
        .iter()
        .map(|(s, e, y)| BatchItem::plain(rule.apply(s, e), *y))
        .collect();
    if items.iter().all(|b| b.input.ids.iter().all(|&id| id == MASK)) {
        return Err(DebiasError::Config("masking removes every token".into()));
    }
    let mut params = params;
    fit(&mut params, &items, &LossSpec::default(), fit_cfg)?;
    Ok(BiasOnlyModel { params, rule })
}

/// `(1 − p_b_true) · CE(p_d, y)`.
pub fn reweight_loss(p_b_true: f64, p_d: &[f64], y: usize) -> f64 {
    (1.0 - p_b_true) * cross_entropy(p_d, y)
}

/// Cross-entropy of the renormalized product `p_d · p_b`, both floored at 1e-12.
pub fn poe_loss(p_b: &[f64], p_d: &[f64], y: usize) -> f64 {
    let logs: Vec<f64> = p_d
        .iter()
        .zip(p_b)
        .map(|(d, b)| d.max(model::PROB_FLOOR).ln() + b.max(model::PROB_FLOOR).ln())
        .collect();
    -model::log_softmax(&logs)[y]
}

/// `CE(x) + CE(x′)`.
pub fn adv_train_loss(
    params: &ModelParams,
    original: &Encoded,
    adversarial: &Encoded,
    y: usize,
) -> Result<f64, ModelError> {
    let a = model::forward(params, original)?;
    let b = model::forward(params, adversarial)?;
    Ok(cross_entropy(&a.probs, y) + cross_entropy(&b.probs, y))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReversalLoss {
    pub task_ce: f64,
    pub bias_loss: f64,
}

pub fn grad_reversal_loss(
    params: &ModelParams,
    input: &Encoded,
    y: usize,
    bias_targets: &[usize],
    mu: f64,
) -> Result<ReversalLoss, ModelError> {
    let mut item = BatchItem::plain(input.clone(), y);
    item.bias_targets = bias_targets.to_vec();
    let spec = LossSpec {
        bpr: None,
        reversal: Some(mu),
    };
    let l = model::evaluate_loss(params, &[item], &spec)?;
    Ok(ReversalLoss {
        task_ce: l.ce,
        bias_loss: l.bias,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub old_name: String,
    pub new_name: String,
    pub loss_before: f64,
    pub loss_after: f64,
}

/// A sample after the attack, in corpus layout plus the applied rename.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvSample {
    #[serde(flatten)]
    pub sample: Sample,
    pub original_id: String,
    /// Target token in the perturbed sample (type inference).
    pub target: Option<usize>,
    pub perturbation: Option<Perturbation>,
}

impl AdvSample {
    pub fn increased_loss(&self) -> bool {
        self.perturbation
            .as_ref()
            .is_some_and(|p| p.loss_after > p.loss_before)
    }
}

/// Replacement-name pool for one sample: names used in other projects plus
/// fresh names, minus anything already present in the sample.
pub fn candidate_pool(
    sample: &Sample,
    pools: &std::collections::BTreeMap<String, Vec<String>>,
    fresh: &[String],
) -> Vec<String> {
    let present: BTreeSet<String> = identifier_runs(&sample.tokens)
        .into_iter()
        .map(|r| r.name)
        .collect();
    let mut seen = BTreeSet::new();
    pools
        .iter()
        .filter(|(p, _)| **p != sample.project_id)
        .flat_map(|(_, names)| names.iter())
        .chain(fresh)
        .filter(|n| !present.contains(*n) && seen.insert((*n).clone()))
        .cloned()
        .collect()
}

fn pieces(name: &str) -> Option<Vec<lang::Token>> {
    let toks = lang::tokenize(name).ok()?;
    let contiguous = toks.windows(2).all(|w| w[0].byte_span.1 == w[1].byte_span.0);
    let ok = !toks.is_empty()
        && contiguous
        && toks.iter().all(|t| t.kind.is_name_piece())
        && (toks.len() == 1 || toks.iter().all(|t| t.kind == lang::TokenKind::SubwordIdentifierPiece));
    ok.then_some(toks)
}

/// Positions remapped by replacing every run in `runs` (ascending) with `new_len` pieces.
fn remap_index(i: usize, runs: &[&IdentRun], new_len: usize) -> usize {
    let mut shift: isize = 0;
    for r in runs {
        if i >= r.end {
            shift += new_len as isize - (r.end - r.start) as isize;
        } else if i >= r.start {
            // last piece maps to last piece; others clamp into the new run
            let off = (i - r.start).min(new_len - 1);
            let off = if i == r.end - 1 { new_len - 1 } else { off };
            return (r.start as isize + shift) as usize + off;
        }
    }
    (i as isize + shift) as usize
}

/// Applies a consistent rename and rebuilds token spans and index fields.
pub fn rename_identifier(
    sample: &Sample,
    old_name: &str,
    new_name: &str,
    target: Option<usize>,
) -> Option<(Sample, Option<usize>)> {
    let new_pieces = pieces(new_name)?;
    let runs_all = identifier_runs(&sample.tokens);
    let runs: Vec<&IdentRun> = runs_all.iter().filter(|r| r.name == old_name).collect();
    if runs.is_empty() {
        return None;
    }
    let n = new_pieces.len();
    let mut tokens = Vec::with_capacity(sample.tokens.len() + runs.len() * n);
    let mut delta: isize = 0;
    let mut i = 0;
    let mut ri = 0;
    while i < sample.tokens.len() {
        if ri < runs.len() && runs[ri].start == i {
            let r = runs[ri];
            let base = (sample.tokens[r.start].byte_span.0 as isize + delta) as usize;
            for p in &new_pieces {
                tokens.push(lang::Token::new(
                    p.text.clone(),
                    p.kind,
                    (base + p.byte_span.0, base + p.byte_span.1),
                ));
            }
            delta += new_name.len() as isize - old_name.len() as isize;
            i = r.end;
            ri += 1;
        } else {
            let t = &sample.tokens[i];
            let s = ((t.byte_span.0 as isize) + delta) as usize;
            let e = ((t.byte_span.1 as isize) + delta) as usize;
            tokens.push(lang::Token::new(t.text.clone(), t.kind, (s, e)));
            i += 1;
        }
    }
    let in_runs = |i: usize| runs.iter().any(|r| (r.start..r.end).contains(&i));
    let remap = |i: usize| remap_index(i, &runs, n);
    let mut out = sample.clone();
    out.tokens = tokens;
    out.evidence_indices = sample.evidence_indices.iter().map(|&i| remap(i)).collect();
    out.bias_token_indices = sample
        .bias_token_indices
        .iter()
        .filter(|&&i| !in_runs(i))
        .map(|&i| remap(i))
        .collect();
    if let crate::corpus::Label::Types(ts) = &mut out.label {
        for t in ts.iter_mut() {
            t.target = remap(t.target);
        }
    }
    Some((out, target.map(remap)))
}

/// One breadth-first expansion: every identifier × every candidate name is
/// scored to first order, the best `k` per identifier are evaluated exactly,
/// and the rename with the highest true-label loss wins.
#[allow(clippy::too_many_arguments)]
struct Candidate {
    ids: Vec<usize>,
    embed_sum: Vec<f64>,
}

fn prepare_candidate(params: &ModelParams, vocab: &Vocab, name: &str) -> Option<Candidate> {
    let ids: Vec<usize> = pieces(name)?.iter().map(|t| vocab.id(&t.text)).collect();
    let mut embed_sum = vec![0.0; params.config.embed_dim];
    for &id in &ids {
        for (a, b) in embed_sum.iter_mut().zip(params.embedding.row(id)) {
            *a += b;
        }
    }
    Some(Candidate { ids, embed_sum })
}

pub fn bfs_attack(
    params: &ModelParams,
    vocab: &Vocab,
    sample: &Sample,
    target: Option<usize>,
    label: usize,
    candidates: &[String],
    k: usize,
) -> Result<AdvSample, DebiasError> {
    // candidates with the same piece ids are interchangeable; the first stands in
    let mut seen: BTreeSet<Vec<usize>> = BTreeSet::new();
    let cand: Vec<(&String, Candidate)> = candidates
        .iter()
        .filter_map(|c| prepare_candidate(params, vocab, c).map(|p| (c, p)))
        .filter(|(_, p)| seen.insert(p.ids.clone()))
        .collect();
    let refs: Vec<(&String, &Candidate)> = cand.iter().map(|(n, c)| (*n, c)).collect();
    attack_prepared(params, vocab, sample, target, label, &refs, k)
}

fn attack_prepared(
    params: &ModelParams,
    vocab: &Vocab,
    sample: &Sample,
    target: Option<usize>,
    label: usize,
    cand: &[(&String, &Candidate)],
    k: usize,
) -> Result<AdvSample, DebiasError> {
    let enc = vocab.encode(sample, target);
    let tr = model::forward(params, &enc)?;
    let loss_before = cross_entropy(&tr.probs, label);
    let mut d_logits = tr.probs.clone();
    d_logits[label] -= 1.0;
    let grad = model::input_gradient(params, &tr, &d_logits);
    let d = params.config.embed_dim;

    let runs = identifier_runs(&sample.tokens);
    let mut names: Vec<&str> = Vec::new();
    for r in &runs {
        if !names.contains(&r.name.as_str()) {
            names.push(&r.name);
        }
    }
    if names.is_empty() {
        return Err(DebiasError::NoRenameable(sample.sample_id.clone()));
    }

    let t_len = tr.len;
    let sum_all: Vec<f64> = tr.pooled.iter().map(|v| v * t_len as f64).collect();
    let mut best: Option<(f64, &str, &String)> = None;
    for name in &names {
        let occ: Vec<&IdentRun> = runs.iter().filter(|r| r.name == *name).collect();
        // summed per-occurrence mean gradient and current first-order term
        let mut gsum = vec![0.0; d];
        let mut current = 0.0;
        let mut rest = sum_all.clone();
        let mut old_len = 0;
        for r in &occ {
            old_len += r.end - r.start;
            for t in r.start..r.end {
                let gt = &grad[t * d..(t + 1) * d];
                let et = &tr.embeddings[t * d..(t + 1) * d];
                current += model::dot(gt, et);
                for (a, b) in gsum.iter_mut().zip(gt) {
                    *a += b / (r.end - r.start) as f64;
                }
                for (a, e) in rest.iter_mut().zip(et) {
                    *a -= e;
                }
            }
        }
        let target_run = target.and_then(|t| occ.iter().find(|r| (r.start..r.end).contains(&t)));
        let mut scored: Vec<(f64, usize)> = cand
            .iter()
            .enumerate()
            .map(|(ci, (_, c))| (model::dot(&gsum, &c.embed_sum) - current, ci))
            .collect();
        let k = k.max(1).min(scored.len());
        if k == 0 {
            continue;
        }
        let cmp = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
        scored.select_nth_unstable_by(k - 1, cmp);
        scored.truncate(k);
        scored.sort_by(cmp);
        for &(_, ci) in &scored {
            let (cname, c) = cand[ci];
            let new_len = t_len - old_len + occ.len() * c.ids.len();
            let mut pooled = rest.clone();
            for (a, e) in pooled.iter_mut().zip(&c.embed_sum) {
                *a += occ.len() as f64 * e;
            }
            pooled.iter_mut().for_each(|v| *v /= new_len as f64);
            let input = match target {
                None => pooled,
                Some(t) => {
                    let row = match target_run {
                        Some(r) => {
                            let off = if t == r.end - 1 {
                                c.ids.len() - 1
                            } else {
                                (t - r.start).min(c.ids.len() - 1)
                            };
                            params.embedding.row(c.ids[off])
                        }
                        None => &tr.embeddings[t * d..(t + 1) * d],
                    };
                    [row, &pooled[..]].concat()
                }
            };
            let loss = cross_entropy(&model::probs_from_input(params, &input), label);
            if best.is_none_or(|(bl, _, _)| loss > bl) {
                best = Some((loss, name, cname));
            }
        }
    }
    let Some((scored_loss, old, new)) = best else {
        return Ok(AdvSample {
            sample: sample.clone(),
            original_id: sample.sample_id.clone(),
            target,
            perturbation: None,
        });
    };
    let (mut perturbed, new_target) =
        rename_identifier(sample, old, new, target).expect("candidate validated");
    let loss_after = cross_entropy(
        &model::forward(params, &vocab.encode(&perturbed, new_target))?.probs,
        label,
    );
    debug_assert!((scored_loss - loss_after).abs() <= 1e-9 * loss_after.abs().max(1.0));
    perturbed.sample_id = format!("{}~adv", sample.sample_id);
    Ok(AdvSample {
        sample: perturbed,
        original_id: sample.sample_id.clone(),
        target: new_target,
        perturbation: Some(Perturbation {
            old_name: old.to_string(),
            new_name: new.clone(),
            loss_before,
            loss_after,
        }),
    })
}

/// Attacks every instance; samples without identifiers pass through unperturbed.
pub fn build_adversarial_set(
    params: &ModelParams,
    vocab: &Vocab,
    instances: &[(&Sample, Option<usize>, usize)],
    pools: &std::collections::BTreeMap<String, Vec<String>>,
    fresh: &[String],
    k: usize,
) -> Result<Vec<AdvSample>, DebiasError> {
    // Names are grouped by piece ids: members of a group score identically, so
    // each sample only needs the first member it may use.
    let proj_index: HashMap<&str, u32> =
        pools.keys().enumerate().map(|(i, p)| (p.as_str(), i as u32)).collect();
    let mut index: HashMap<&str, usize> = HashMap::new();
    let mut order: Vec<&String> = Vec::new();
    let mut owners: Vec<Vec<u32>> = Vec::new();
    let mut is_fresh: Vec<bool> = Vec::new();
    let named = pools
        .values()
        .enumerate()
        .flat_map(|(p, ns)| ns.iter().map(move |n| (Some(p as u32), n)));
    for (proj, n) in named.chain(fresh.iter().map(|n| (None, n))) {
        let i = *index.entry(n).or_insert_with(|| {
            order.push(n);
            owners.push(Vec::new());
            is_fresh.push(false);
            order.len() - 1
        });
        match proj {
            Some(p) => owners[i].push(p),
            None => is_fresh[i] = true,
        }
    }
    let mut group_of: HashMap<Vec<usize>, usize> = HashMap::new();
    let mut groups: Vec<(Candidate, Vec<usize>)> = Vec::new();
    for (i, n) in order.iter().enumerate() {
        if let Some(c) = prepare_candidate(params, vocab, n) {
            let g = *group_of.entry(c.ids.clone()).or_insert_with(|| {
                groups.push((c, Vec::new()));
                groups.len() - 1
            });
            groups[g].1.push(i);
        }
    }

    instances
        .iter()
        .map(|&(s, target, y)| {
            let own = proj_index.get(s.project_id.as_str()).copied();
            let present: Vec<usize> = identifier_runs(&s.tokens)
                .iter()
                .filter_map(|r| index.get(r.name.as_str()).copied())
                .collect();
            let usable = |i: usize| {
                !present.contains(&i) && (is_fresh[i] || owners[i].iter().any(|&p| Some(p) != own))
            };
            let mut picks: Vec<(usize, &Candidate)> = groups
                .iter()
                .filter_map(|(c, members)| members.iter().find(|&&i| usable(i)).map(|&i| (i, c)))
                .collect();
            picks.sort_unstable_by_key(|p| p.0);
            let cands: Vec<(&String, &Candidate)> = picks.iter().map(|&(i, c)| (order[i], c)).collect();
            match attack_prepared(params, vocab, s, target, y, &cands, k) {
                Err(DebiasError::NoRenameable(_)) => Ok(AdvSample {
                    sample: s.clone(),
                    original_id: s.sample_id.clone(),
                    target,
                    perturbation: None,
                }),
                other => other,
            }
        })
        .collect()
}

pub fn write_adversarial_set<W: std::io::Write>(set: &[AdvSample], mut w: W) -> std::io::Result<()> {
    for a in set {
        serde_json::to_writer(&mut w, a)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, GenConfig, Label};
    use crate::model::{init_params, ModelConfig};

    fn vuln(src: &str) -> Sample {
        Sample {
            sample_id: "p0-0".into(),
            project_id: "p0".into(),
            tokens: lang::tokenize(src).unwrap(),
            task: Task::VulnDet,
            label: Label::Vulnerable(true),
            evidence_indices: vec![],
            bias_token_indices: vec![],
        }
    }

    #[test]
    fn reweight_examples() {
        let p = [0.5, 0.5];
        assert_eq!(reweight_loss(1.0, &p, 0), 0.0);
        assert!((reweight_loss(0.0, &p, 0) - 2f64.ln()).abs() < 1e-12);
        assert!((reweight_loss(0.8, &p, 0) - 0.2 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn poe_examples() {
        assert!((poe_loss(&[0.5, 0.5], &[0.7, 0.3], 0) + 0.7f64.ln()).abs() < 1e-12);
        assert!((poe_loss(&[0.2, 0.2], &[0.7, 0.3], 0) + 0.7f64.ln()).abs() < 1e-12);
        assert!(poe_loss(&[1.0, 0.0], &[0.4, 0.6], 0) < 1e-9);
        // matches the logit-space form used during training
        let logits = [0.3, -0.5, 1.1];
        let pd = model::softmax(&logits);
        let pb = [0.2, 0.5, 0.3];
        assert!((poe_loss(&pb, &pd, 2) - model::poe_terms(&logits, &pb, 2).0).abs() < 1e-12);
    }

    #[test]
    fn rename_is_consistent_and_remaps_indices() {
        let mut s = vuln("fn f ( ) { var itemNofat = 8 ; free ( itemNofat ) ; }");
        s.evidence_indices = vec![11]; // free
        s.bias_token_indices = vec![6, 14];
        let (r, _) = rename_identifier(&s, "itemNofat", "q", None).unwrap();
        assert_eq!(r.source(), "fn f ( ) { var q = 8 ; free ( q ) ; }");
        assert_eq!(r.tokens[r.evidence_indices[0]].text, "free");
        assert!(r.bias_token_indices.is_empty());
        let (r2, _) = rename_identifier(&s, "f", "openPortLoop", None).unwrap();
        assert_eq!(r2.tokens.len(), s.tokens.len() + 2);
        assert_eq!(r2.tokens[r2.evidence_indices[0]].text, "free");
        assert_eq!(r2.bias_token_indices.len(), 2);
        assert_eq!(lang::tokenize(&r2.source()).unwrap(), r2.tokens);
        assert!(rename_identifier(&s, "zzz", "q", None).is_none());
        assert!(rename_identifier(&s, "f", "while", None).is_none());
    }

    #[test]
    fn zero_first_layer_makes_attack_neutral() {
        let s = vuln("fn f ( a ) { var b = a ; return b ; }");
        let toks: Vec<String> = ["<unk>", "<mask>", "fn", "f", "(", "a", ")", "{", "var", "b", "=", ";", "return", "}", "x", "y"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let v = Vocab::from_tokens(toks, &BTreeSet::new());
        let mut p2 = init_params(&ModelConfig::new(Task::VulnDet, v.len(), 1), 1).unwrap();
        p2.w1.data.iter_mut().for_each(|x| *x = 0.0);
        let adv = bfs_attack(&p2, &v, &s, None, 1, &["x".into(), "y".into()], 8).unwrap();
        let pert = adv.perturbation.unwrap();
        assert!((pert.loss_after - pert.loss_before).abs() < 1e-12);
    }

    #[test]
    fn full_pool_equals_exhaustive_search() {
        let toks: Vec<String> = ["<unk>", "<mask>", "fn", "f", "(", "a", ")", "{", "return", ";", "}", "x", "y", "z"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let v = Vocab::from_tokens(toks, &BTreeSet::new());
        let p = init_params(&ModelConfig::new(Task::VulnDet, v.len(), 1), 5).unwrap();
        let s = vuln("fn f ( a ) { return a ; }");
        let cands: Vec<String> = ["x", "y", "z"].iter().map(|s| s.to_string()).collect();
        let adv = bfs_attack(&p, &v, &s, None, 0, &cands, 3).unwrap();
        let mut best = f64::NEG_INFINITY;
        for old in ["f", "a"] {
            for c in &cands {
                let (r, _) = rename_identifier(&s, old, c, None).unwrap();
                let l = cross_entropy(&model::forward(&p, &v.encode(&r, None)).unwrap().probs, 0);
                best = best.max(l);
            }
        }
        assert!((adv.perturbation.unwrap().loss_after - best).abs() < 1e-12);
    }

    #[test]
    fn no_identifiers_is_reported() {
        let s = vuln("1 + 2");
        let v = Vocab::from_tokens(vec!["<unk>".into(), "<mask>".into()], &BTreeSet::new());
        let p = init_params(&ModelConfig::new(Task::VulnDet, v.len(), 1), 5).unwrap();
        assert!(matches!(
            bfs_attack(&p, &v, &s, None, 0, &["x".into()], 8),
            Err(DebiasError::NoRenameable(_))
        ));
        let set = build_adversarial_set(&p, &v, &[(&s, None, 0)], &Default::default(), &[], 8).unwrap();
        assert!(set[0].perturbation.is_none());
        assert!(build_adversarial_set(&p, &v, &[], &Default::default(), &[], 8).unwrap().is_empty());
    }

    #[test]
    fn typeinf_attack_keeps_target_on_a_name() {
        let corpus = generate_corpus(&GenConfig {
            num_projects: 4,
            samples_per_project: 6,
            task: Task::TypeInf,
            ..GenConfig::default()
        })
        .unwrap();
        let v = Vocab::build(&corpus.samples, &corpus.bias_vocab);
        let p = init_params(&ModelConfig::new(Task::TypeInf, v.len(), v.bias_dim()), 2).unwrap();
        let pools = crate::corpus::project_name_pools(&corpus);
        let fresh = vec!["zulTam".to_string()];
        for s in &corpus.samples {
            let (t, y) = s.instances()[0];
            let adv = bfs_attack(&p, &v, s, t, y, &candidate_pool(s, &pools, &fresh), 8).unwrap();
            let nt = adv.target.unwrap();
            assert!(adv.sample.tokens[nt].kind.is_name_piece());
            assert_eq!(adv.sample.instances()[0].0, Some(nt));
            for (&a, &b) in s.evidence_indices.iter().zip(&adv.sample.evidence_indices) {
                assert_eq!(s.tokens[a].text, adv.sample.tokens[b].text);
            }
            let p = adv.perturbation.unwrap();
            let (r, _) = rename_identifier(s, &p.old_name, &p.new_name, t).unwrap();
            assert_eq!(r.tokens, adv.sample.tokens);
        }
    }

    #[test]
    fn masking_keeps_only_bias_positions() {
        let s = vuln("fn getX ( a ) { var b = malloc ( 4 ) ; return b ; }");
        let e = Encoded {
            ids: (10..10 + s.tokens.len()).collect(),
            target: None,
        };
        let m = MaskRule::UserDefinedNames.apply(&s, &e);
        for (i, (&a, &b)) in e.ids.iter().zip(&m.ids).enumerate() {
            let user = matches!(s.tokens[i].text.as_str(), "get" | "X" | "a" | "b");
            assert_eq!(a == b, user, "{}", s.tokens[i].text);
        }
    }

    #[test]
    fn adv_loss_of_identical_pair_is_twice_ce() {
        let p = init_params(&ModelConfig::new(Task::VulnDet, 8, 1), 3).unwrap();
        let e = Encoded { ids: vec![2, 3, 4], target: None };
        let ce = cross_entropy(&model::forward(&p, &e).unwrap().probs, 1);
        assert!((adv_train_loss(&p, &e, &e, 1).unwrap() - 2.0 * ce).abs() < 1e-12);
    }

    #[test]
    fn reversal_components_at_zero_head() {
        let mut p = init_params(&ModelConfig::new(Task::VulnDet, 8, 3), 3).unwrap();
        p.w_bias.data.iter_mut().for_each(|v| *v = 0.0);
        let e = Encoded { ids: vec![2, 3], target: None };
        let l = grad_reversal_loss(&p, &e, 0, &[], 0.1).unwrap();
        assert!((l.bias_loss - 2f64.ln()).abs() < 1e-12);
    }
}
