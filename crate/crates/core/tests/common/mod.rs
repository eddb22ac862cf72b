#![allow(dead_code)]

use codebias::biasmetrics::CondIdfRow;
use codebias::corpus::{Label, Sample, Task, TypeClass, TypeTarget};
use codebias::lang::{Cfg, Token, TokenKind};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::VecDeque;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A graph-only CFG: `n` empty blocks and random directed edges.
pub fn random_cfg(rng: &mut ChaCha8Rng, max_blocks: usize) -> Cfg {
    let n = rng.gen_range(1..=max_blocks);
    let density = rng.gen_range(0.05..0.5);
    let mut edges = Vec::new();
    for u in 0..n {
        for v in 0..n {
            if rng.gen_bool(density) {
                edges.push((u, v));
            }
        }
    }
    Cfg {
        blocks: vec![Vec::new(); n],
        edges,
        entry: 0,
        exit: n - 1,
    }
}

/// Queue-based BFS from every source over an adjacency matrix.
pub fn bfs_oracle(n: usize, edges: &[(usize, usize)]) -> Vec<Vec<Option<usize>>> {
    let mut adj = vec![vec![false; n]; n];
    for &(u, v) in edges {
        adj[u][v] = true;
    }
    let mut out = Vec::with_capacity(n);
    for s in 0..n {
        let mut d: Vec<Option<usize>> = vec![None; n];
        d[s] = Some(0);
        let mut q = VecDeque::new();
        q.push_back(s);
        while let Some(u) = q.pop_front() {
            for v in 0..n {
                if adj[u][v] && d[v].is_none() {
                    d[v] = Some(d[u].unwrap() + 1);
                    q.push_back(v);
                }
            }
        }
        out.push(d);
    }
    out
}

/// Random samples over a small word pool; several projects, random labels.
pub fn random_samples(rng: &mut ChaCha8Rng, task: Task, max_tokens: usize) -> Vec<Sample> {
    let words = rng.gen_range(1..40);
    let projects = rng.gen_range(1..8);
    let mut samples = Vec::new();
    let mut total = 0;
    let budget = rng.gen_range(1..=max_tokens);
    while total < budget {
        let len = rng.gen_range(1..=60).min(budget - total);
        let tokens: Vec<Token> = (0..len)
            .map(|i| Token::new(format!("w{}", rng.gen_range(0..words)), TokenKind::Identifier, (i, i + 1)))
            .collect();
        let label = match task {
            Task::VulnDet => Label::Vulnerable(rng.gen_bool(0.5)),
            Task::TypeInf => Label::Types(vec![TypeTarget {
                target: 0,
                ty: TypeClass::ALL[rng.gen_range(0..3)],
            }]),
        };
        samples.push(Sample {
            sample_id: format!("s{}", samples.len()),
            project_id: format!("p{}", rng.gen_range(0..projects)),
            tokens,
            task,
            label,
            evidence_indices: vec![0],
            bias_token_indices: vec![],
        });
        total += len;
    }
    samples
}

fn class_of(s: &Sample) -> usize {
    match &s.label {
        Label::Vulnerable(v) => *v as usize,
        Label::Types(ts) => ts[0].ty.index(),
    }
}

/// Per-word rescans of the whole sample list.
pub fn cond_idf_oracle(samples: &[Sample], label: usize) -> Vec<CondIdfRow> {
    let mut words: Vec<String> = samples.iter().flat_map(|s| s.tokens.iter().map(|t| t.text.clone())).collect();
    words.sort();
    words.dedup();
    let mut all_projects: Vec<&str> = samples.iter().map(|s| s.project_id.as_str()).collect();
    all_projects.sort();
    all_projects.dedup();
    let n = all_projects.len();
    words
        .into_iter()
        .map(|w| {
            let mut count = 0u64;
            let mut count_label = 0u64;
            let mut seen_in: Vec<&str> = Vec::new();
            for s in samples {
                let k = s.tokens.iter().filter(|t| t.text == w).count() as u64;
                count += k;
                if class_of(s) == label {
                    count_label += k;
                }
                if k > 0 {
                    seen_in.push(&s.project_id);
                }
            }
            seen_in.sort();
            seen_in.dedup();
            let df = seen_in.len() as u64;
            let cond_p = count_label as f64 / count as f64;
            let idf = (n as f64 / df as f64).ln();
            CondIdfRow {
                word: w,
                count,
                count_label,
                df,
                cond_p,
                idf,
                cond_idf: cond_p * idf,
            }
        })
        .collect()
}
