//! WebAssembly bindings for the demo page in `www/`.
//!
//! Every export returns a JSON string; the `*_json` functions hold the logic so
//! they can be exercised natively.

use codebias::attribution::integrated_gradients;
use codebias::biasmetrics::{self, RatioMode};
use codebias::corpus::{self, Task};
use codebias::harness::{self, ExperimentConfig};
use codebias::lang;
use codebias::model;
use codebias::simbpr;
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Serialize)]
struct TokenView {
    text: String,
    kind: String,
    category: &'static str,
}

#[derive(Serialize)]
struct PathView {
    from: usize,
    to: usize,
    blocks: Vec<usize>,
}

#[derive(Serialize)]
struct SourceView {
    tokens: Vec<TokenView>,
    declarations: Vec<String>,
    blocks: Vec<Vec<String>>,
    edges: Vec<(usize, usize)>,
    entry: usize,
    exit: usize,
    dist: Vec<Vec<Option<usize>>>,
    paths: Vec<PathView>,
}

fn parse_task(task: &str) -> Result<Task, String> {
    task.parse()
}

pub fn analyze_source_json(source: &str) -> Result<String, String> {
    let tokens = lang::tokenize(source).map_err(|e| e.to_string())?;
    let ast = lang::parse(&tokens).map_err(|e| e.to_string())?;
    let cats = lang::lexical_categories(&tokens);
    let cfg = lang::build_cfg(&ast);
    let apsp = simbpr::floyd_warshall(&cfg);
    let n = cfg.blocks.len();
    let mut paths = Vec::new();
    for u in 0..n {
        for v in 0..n {
            if u != v {
                if let Some(p) = apsp.path(u, v) {
                    paths.push(PathView { from: u, to: v, blocks: p });
                }
            }
        }
    }
    let view = SourceView {
        tokens: tokens
            .iter()
            .zip(&cats)
            .map(|(t, c)| TokenView {
                text: t.text.clone(),
                kind: format!("{:?}", t.kind),
                category: c.label(),
            })
            .collect(),
        declarations: ast.declaration_targets().into_iter().map(|d| ast.text_of(d)).collect(),
        blocks: cfg
            .blocks
            .iter()
            .map(|b| b.iter().map(|s| format!("{:?}", s.stmt_kind)).collect())
            .collect(),
        edges: cfg.edges.clone(),
        entry: cfg.entry,
        exit: cfg.exit,
        dist: apsp.dist,
        paths,
    };
    serde_json::to_string(&view).map_err(|e| e.to_string())
}

fn demo_config(task: Task, bias_strength: f64, seed: u32) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::for_task(task);
    cfg.generator.num_projects = 10;
    cfg.generator.samples_per_project = 40;
    cfg.generator.bias_strength = bias_strength;
    cfg.generator.seed = seed as u64;
    cfg.generator.task = task;
    cfg.seeds = vec![seed as u64];
    cfg
}

#[derive(Serialize)]
struct ProfileRow {
    word: String,
    count: u64,
    count_label: u64,
    df: u64,
    cond_p: f64,
    idf: f64,
    cond_idf: f64,
    bias: bool,
}

pub fn cond_idf_profile_json(
    task: &str,
    bias_strength: f64,
    seed: u32,
    label: u32,
    limit: u32,
) -> Result<String, String> {
    let task = parse_task(task)?;
    let cfg = demo_config(task, bias_strength, seed);
    let corpus = corpus::generate_corpus(&cfg.generator).map_err(|e| e.to_string())?;
    let split = corpus::split_projects(&corpus, cfg.split_seed).map_err(|e| e.to_string())?;
    let part = split.partition(&corpus);
    let train: Vec<&corpus::Sample> = part.train.iter().map(|&i| &corpus.samples[i]).collect();
    let table = biasmetrics::cond_idf(&train, task, label as usize).map_err(|e| e.to_string())?;
    let mut rows: Vec<ProfileRow> = table
        .rows
        .iter()
        .map(|r| ProfileRow {
            word: r.word.clone(),
            count: r.count,
            count_label: r.count_label,
            df: r.df,
            cond_p: r.cond_p,
            idf: r.idf,
            cond_idf: r.cond_idf,
            bias: corpus.bias_vocab.contains(&r.word),
        })
        .collect();
    rows.sort_by(|a, b| b.cond_idf.total_cmp(&a.cond_idf).then_with(|| a.word.cmp(&b.word)));
    rows.truncate(limit as usize);
    serde_json::to_string(&serde_json::json!({
        "label": task.class_name(label as usize),
        "num_projects": table.num_projects,
        "rows": rows,
    }))
    .map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct Overlay {
    tokens: Vec<String>,
    weights: Vec<f64>,
    biased: Vec<bool>,
    target: Option<usize>,
    label: &'static str,
    predicted: &'static str,
}

pub fn train_and_attribute_json(
    task: &str,
    bias_strength: f64,
    epochs: u32,
    seed: u32,
) -> Result<String, String> {
    let task = parse_task(task)?;
    let mut cfg = demo_config(task, bias_strength, seed);
    cfg.train.epochs = epochs as usize;
    let prep = harness::prepare(&cfg).map_err(|e| e.to_string())?;
    let (params, history) = harness::train_model(&cfg, &prep, seed as u64).map_err(|e| e.to_string())?;
    let intra = harness::accuracy(&params, &prep.iid).map_err(|e| e.to_string())?;
    let inter = harness::accuracy(&params, &prep.ood).map_err(|e| e.to_string())?;

    let mut attrs = Vec::new();
    let mut overlays = Vec::new();
    for inst in &prep.iid {
        let pred = model::predict(&params, &inst.input).map_err(|e| e.to_string())?;
        let a = integrated_gradients(&params, &inst.input, pred, 20).map_err(|e| e.to_string())?;
        if overlays.len() < 6 {
            let s = prep.sample(inst);
            overlays.push(Overlay {
                tokens: s.tokens.iter().map(|t| t.text.clone()).collect(),
                weights: a.per_token.clone(),
                biased: s.tokens.iter().map(|t| prep.corpus.bias_vocab.contains(&t.text)).collect(),
                target: inst.target,
                label: task.class_name(inst.label),
                predicted: task.class_name(pred),
            });
        }
        attrs.push(a);
    }
    let samples: Vec<&corpus::Sample> = prep.iid.iter().map(|i| prep.sample(i)).collect();
    let top3 = biasmetrics::topn_bias_ratio(&attrs, &samples, &prep.corpus.bias_vocab, 3, RatioMode::Contains);
    serde_json::to_string(&serde_json::json!({
        "intra": intra,
        "inter": inter,
        "train_loss": history,
        "top3_contains": top3,
        "samples": overlays,
    }))
    .map_err(|e| e.to_string())
}

/// Tokens, basic blocks, edges and all-pairs shortest paths of one function.
#[wasm_bindgen]
pub fn analyze_source(source: &str) -> Result<String, JsError> {
    analyze_source_json(source).map_err(|e| JsError::new(&e))
}

/// The highest-scoring Cond-Idf rows of a freshly generated corpus.
#[wasm_bindgen]
pub fn cond_idf_profile(
    task: &str,
    bias_strength: f64,
    seed: u32,
    label: u32,
    limit: u32,
) -> Result<String, JsError> {
    cond_idf_profile_json(task, bias_strength, seed, label, limit).map_err(|e| JsError::new(&e))
}

/// Trains an unmitigated model and returns accuracies plus attribution overlays.
#[wasm_bindgen]
pub fn train_and_attribute(task: &str, bias_strength: f64, epochs: u32, seed: u32) -> Result<String, JsError> {
    train_and_attribute_json(task, bias_strength, epochs, seed).map_err(|e| JsError::new(&e))
}
