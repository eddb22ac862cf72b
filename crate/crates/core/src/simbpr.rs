//! Logic-closeness embeddings, the similarity matrix, training-set
//! unshuffling into similarity-ordered batches, and the BPR penalty.

use crate::corpus::Sample;
use crate::lang::{self, Ast, Cfg, NodeKind, StmtKind, TokenKind};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap, VecDeque};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("embedding modes differ")]
    ModeMismatch,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("matrix format: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    AstBow,
    CfgPaths,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LogicEmbedding {
    /// Counts of normalized one-hop neighbor tokens of a declaration target.
    AstBow(BTreeMap<String, u32>),
    /// One unit vector over statement kinds per shortest CFG path.
    CfgPaths(Vec<Vec<f64>>),
}

impl LogicEmbedding {
    pub fn mode(&self) -> Mode {
        match self {
            LogicEmbedding::AstBow(_) => Mode::AstBow,
            LogicEmbedding::CfgPaths(_) => Mode::CfgPaths,
        }
    }

    pub fn is_empty(&self) -> bool {
        match self {
            LogicEmbedding::AstBow(m) => m.values().all(|&c| c == 0),
            LogicEmbedding::CfgPaths(p) => p.is_empty(),
        }
    }

    fn cache_key(&self) -> String {
        match self {
            LogicEmbedding::AstBow(m) => format!("A{m:?}"),
            LogicEmbedding::CfgPaths(p) => {
                let bits: Vec<Vec<u64>> = p
                    .iter()
                    .map(|v| v.iter().map(|x| x.to_bits()).collect())
                    .collect();
                format!("C{bits:?}")
            }
        }
    }
}

/// Names are dropped so that α-renaming leaves the embedding unchanged.
fn neighbor_feature(tok: &lang::Token) -> String {
    match tok.kind {
        TokenKind::NumberLit => "NumberLit".into(),
        TokenKind::StringLit => "StringLit".into(),
        TokenKind::BoolLit => "BoolLit".into(),
        TokenKind::Identifier | TokenKind::SubwordIdentifierPiece => "<ident>".into(),
        _ => tok.text.clone(),
    }
}

/// AstBow embedding of the declaration whose target name covers `target_token`.
pub fn mu_ast(ast: &Ast, target_token: usize) -> Result<LogicEmbedding, lang::NotADeclaration> {
    let node = ast
        .declaration_target_at(target_token)
        .ok_or(lang::NotADeclaration(target_token))?;
    let decl = ast.nodes[node].parent.ok_or(lang::NotADeclaration(target_token))?;
    debug_assert_eq!(ast.nodes[decl].kind, NodeKind::VarDecl);
    let (a, b) = ast.nodes[decl].token_span;
    let (na, nb) = ast.nodes[node].token_span;
    let mut counts = BTreeMap::new();
    for i in (a..b).filter(|i| !(na..nb).contains(i)) {
        *counts.entry(neighbor_feature(&ast.tokens[i])).or_insert(0) += 1;
    }
    Ok(LogicEmbedding::AstBow(counts))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Apsp {
    /// Hop counts; `None` is unreachable.
    pub dist: Vec<Vec<Option<usize>>>,
    /// First hop on the chosen shortest path.
    pub next: Vec<Vec<Option<usize>>>,
}

impl Apsp {
    pub fn path(&self, u: usize, v: usize) -> Option<Vec<usize>> {
        self.dist[u][v]?;
        let mut path = vec![u];
        let mut cur = u;
        while cur != v {
            cur = self.next[cur][v]?;
            path.push(cur);
        }
        Some(path)
    }
}

/// All-pairs shortest paths with unit weights. Among equally short paths the
/// lowest-index successor is taken at every hop.
pub fn floyd_warshall(cfg: &Cfg) -> Apsp {
    let n = cfg.blocks.len();
    let mut dist = vec![vec![None; n]; n];
    for (v, row) in dist.iter_mut().enumerate() {
        row[v] = Some(0);
    }
    for &(u, v) in &cfg.edges {
        if u != v {
            dist[u][v] = Some(1);
        }
    }
    for k in 0..n {
        for i in 0..n {
            let Some(ik) = dist[i][k] else { continue };
            for j in 0..n {
                if let Some(kj) = dist[k][j] {
                    if dist[i][j].is_none_or(|d| ik + kj < d) {
                        dist[i][j] = Some(ik + kj);
                    }
                }
            }
        }
    }
    let mut succ: Vec<Vec<usize>> = vec![Vec::new(); n];
    for &(u, v) in &cfg.edges {
        succ[u].push(v);
    }
    for s in &mut succ {
        s.sort_unstable();
        s.dedup();
    }
    let mut next = vec![vec![None; n]; n];
    for u in 0..n {
        for v in 0..n {
            match dist[u][v] {
                Some(0) => next[u][v] = Some(v),
                Some(d) => {
                    next[u][v] = succ[u]
                        .iter()
                        .copied()
                        .find(|&s| dist[s][v] == Some(d - 1));
                }
                None => {}
            }
        }
    }
    Apsp { dist, next }
}

/// CfgPaths embedding of a function.
pub fn mu_cfg(cfg: &Cfg) -> LogicEmbedding {
    let apsp = floyd_warshall(cfg);
    let n = cfg.blocks.len();
    let mut paths = Vec::new();
    for u in 0..n {
        for v in 0..n {
            if u == v {
                continue;
            }
            let Some(path) = apsp.path(u, v) else { continue };
            let mut counts = vec![0.0; StmtKind::ALL.len()];
            for b in path {
                for s in &cfg.blocks[b] {
                    counts[s.stmt_kind.index()] += 1.0;
                }
            }
            let norm = crate::model::dot(&counts, &counts).sqrt();
            if norm > 0.0 {
                counts.iter_mut().for_each(|c| *c /= norm);
                paths.push(counts);
            }
        }
    }
    LogicEmbedding::CfgPaths(paths)
}

/// Embedding of one training instance: AstBow for a type-inference target,
/// CfgPaths for a whole function otherwise.
pub fn embed_instance(sample: &Sample, target: Option<usize>) -> crate::Result<LogicEmbedding> {
    let ast = lang::parse(&sample.tokens)?;
    Ok(match target {
        Some(t) => mu_ast(&ast, t)?,
        None => mu_cfg(&lang::build_cfg(&ast)),
    })
}

pub fn kappa(a: &LogicEmbedding, b: &LogicEmbedding) -> Result<f64, SimError> {
    let v = match (a, b) {
        (LogicEmbedding::AstBow(x), LogicEmbedding::AstBow(y)) => {
            let nx: f64 = x.values().map(|&c| (c as f64).powi(2)).sum::<f64>().sqrt();
            let ny: f64 = y.values().map(|&c| (c as f64).powi(2)).sum::<f64>().sqrt();
            if nx == 0.0 || ny == 0.0 {
                return Ok(0.0);
            }
            let d: f64 = x
                .iter()
                .filter_map(|(k, &c)| y.get(k).map(|&e| c as f64 * e as f64))
                .sum();
            d / (nx * ny)
        }
        (LogicEmbedding::CfgPaths(x), LogicEmbedding::CfgPaths(y)) => {
            if x.is_empty() || y.is_empty() {
                return Ok(0.0);
            }
            let u: f64 = x
                .iter()
                .map(|p| {
                    y.iter()
                        .map(|q| crate::model::dot(p, q))
                        .fold(f64::NEG_INFINITY, f64::max)
                })
                .sum();
            u / x.len() as f64
        }
        _ => return Err(SimError::ModeMismatch),
    };
    Ok(v.clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    pub mode: Mode,
    pub n: usize,
    /// Row-major `n × n`.
    pub values: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }
}

/// Pairwise κ over all embeddings. Identical embeddings share one row of κ
/// evaluations; CfgPaths scores are symmetrized with `max(λ_ij, λ_ji)`.
pub fn similarity_matrix(embeddings: &[LogicEmbedding]) -> Result<SimilarityMatrix, SimError> {
    let n = embeddings.len();
    if n < 2 {
        return Err(SimError::InvalidArgument("need at least 2 samples".into()));
    }
    let mode = embeddings[0].mode();
    if embeddings.iter().any(|e| e.mode() != mode) {
        return Err(SimError::ModeMismatch);
    }
    let mut uniq: Vec<&LogicEmbedding> = Vec::new();
    let mut seen: HashMap<String, usize> = HashMap::new();
    let class: Vec<usize> = embeddings
        .iter()
        .map(|e| {
            *seen.entry(e.cache_key()).or_insert_with(|| {
                uniq.push(e);
                uniq.len() - 1
            })
        })
        .collect();
    let u = uniq.len();
    let mut k = vec![0.0; u * u];
    for i in 0..u {
        for j in i..u {
            let mut v = kappa(uniq[i], uniq[j])?;
            if mode == Mode::CfgPaths && i != j {
                v = v.max(kappa(uniq[j], uniq[i])?);
            }
            k[i * u + j] = v;
            k[j * u + i] = v;
        }
    }
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            values[i * n + j] = if i == j {
                if embeddings[i].is_empty() { 0.0 } else { 1.0 }
            } else {
                k[class[i] * u + class[j]]
            };
        }
    }
    Ok(SimilarityMatrix { mode, n, values })
}

/// Walks off-diagonal pairs by descending similarity (ties lexicographic)
/// and appends each unseen endpoint.
pub fn unshuffle(m: &SimilarityMatrix) -> Vec<usize> {
    let n = m.n;
    let mut pairs: Vec<(f64, u32, u32)> = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let v = m.get(i, j);
            if v > 0.0 {
                pairs.push((v, i as u32, j as u32));
            }
        }
    }
    pairs.sort_unstable_by(|a, b| {
        b.0.total_cmp(&a.0)
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let mut placed = vec![false; n];
    let mut order = Vec::with_capacity(n);
    for (_, i, j) in pairs {
        for x in [i as usize, j as usize] {
            if !placed[x] {
                placed[x] = true;
                order.push(x);
            }
        }
        if order.len() == n {
            return order;
        }
    }
    order.extend((0..n).filter(|&x| !placed[x]));
    order
}

pub fn batchify(ordering: &[usize], batch_size: usize) -> Result<Vec<Vec<usize>>, SimError> {
    if batch_size < 2 {
        return Err(SimError::InvalidArgument("batch size must be >= 2".into()));
    }
    Ok(ordering.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

fn same_label_pairs(labels: &[usize], weights: &[f64]) -> (Vec<(usize, usize, f64)>, usize) {
    let n = labels.len();
    let mut out = Vec::new();
    let mut count = 0;
    for i in 0..n {
        for j in i + 1..n {
            if labels[i] == labels[j] {
                count += 1;
                let w = weights[i * n + j];
                if w != 0.0 {
                    out.push((i, j, w));
                }
            }
        }
    }
    (out, count)
}

fn cos_parts(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let na = crate::model::dot(a, a).sqrt().max(1e-12);
    let nb = crate::model::dot(b, b).sqrt().max(1e-12);
    (crate::model::dot(a, b) / (na * nb), na, nb)
}

/// Mean over same-label pairs of `λ_ij · (1 − cos(r_i, r_j))`.
pub fn bpr_loss(reprs: &[Vec<f64>], labels: &[usize], weights: &[f64]) -> f64 {
    let (pairs, count) = same_label_pairs(labels, weights);
    if count == 0 {
        return 0.0;
    }
    pairs
        .iter()
        .map(|&(i, j, w)| w * (1.0 - cos_parts(&reprs[i], &reprs[j]).0))
        .sum::<f64>()
        / count as f64
}

/// `∂ bpr_loss / ∂ r_i` for every repr.
pub fn bpr_loss_grad(reprs: &[Vec<f64>], labels: &[usize], weights: &[f64]) -> Vec<Vec<f64>> {
    let mut grads: Vec<Vec<f64>> = reprs.iter().map(|r| vec![0.0; r.len()]).collect();
    let (pairs, count) = same_label_pairs(labels, weights);
    if count == 0 {
        return grads;
    }
    for (i, j, w) in pairs {
        let (a, b) = (&reprs[i], &reprs[j]);
        let (c, na, nb) = cos_parts(a, b);
        let s = -w / count as f64;
        for k in 0..a.len() {
            grads[i][k] += s * (b[k] / (na * nb) - c * a[k] / (na * na));
            grads[j][k] += s * (a[k] / (na * nb) - c * b[k] / (nb * nb));
        }
    }
    grads
}

/// Delayed-update coefficient `2/(1+e^{−10p}) − 1`.
pub fn gamma_p(progress: f64) -> Result<f64, SimError> {
    if !(0.0..=1.0).contains(&progress) {
        return Err(SimError::InvalidArgument(format!("progress {progress} outside [0,1]")));
    }
    Ok(2.0 / (1.0 + (-10.0 * progress).exp()) - 1.0)
}

/// FNV-1a, 64-bit.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

#[derive(Debug, Serialize, Deserialize)]
struct MatrixHeader {
    mode: Mode,
    n: usize,
    checksum: String,
}

/// One JSON header line, then the upper triangle (diagonal included) as
/// little-endian f64.
pub fn encode_matrix(m: &SimilarityMatrix) -> Vec<u8> {
    let mut body = Vec::with_capacity(m.n * (m.n + 1) * 4);
    for i in 0..m.n {
        for j in i..m.n {
            body.extend_from_slice(&m.get(i, j).to_le_bytes());
        }
    }
    let header = MatrixHeader {
        mode: m.mode,
        n: m.n,
        checksum: format!("{:016x}", fnv1a(&body)),
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    out.extend(body);
    out
}

pub fn decode_matrix(bytes: &[u8]) -> Result<SimilarityMatrix, SimError> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| SimError::Format("missing header".into()))?;
    let header: MatrixHeader =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| SimError::Format(e.to_string()))?;
    let body = &bytes[nl + 1..];
    let n = header.n;
    if body.len() != n * (n + 1) / 2 * 8 {
        return Err(SimError::Format("body length does not match n".into()));
    }
    if format!("{:016x}", fnv1a(body)) != header.checksum {
        return Err(SimError::Format("checksum mismatch".into()));
    }
    let mut values = vec![0.0; n * n];
    let mut chunks = body.chunks_exact(8);
    for i in 0..n {
        for j in i..n {
            let v = f64::from_le_bytes(chunks.next().expect("length checked").try_into().unwrap());
            values[i * n + j] = v;
            values[j * n + i] = v;
        }
    }
    Ok(SimilarityMatrix {
        mode: header.mode,
        n,
        values,
    })
}

/// Per-source BFS distances; used to cross-check [`floyd_warshall`].
pub fn bfs_distances(cfg: &Cfg) -> Vec<Vec<Option<usize>>> {
    let n = cfg.blocks.len();
    (0..n)
        .map(|s| {
            let mut d = vec![None; n];
            d[s] = Some(0);
            let mut q = VecDeque::from([s]);
            while let Some(u) = q.pop_front() {
                for v in cfg.successors(u) {
                    if d[v].is_none() {
                        d[v] = Some(d[u].unwrap() + 1);
                        q.push_back(v);
                    }
                }
            }
            d
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lang::{build_cfg, parse_source};

    fn bow(pairs: &[(&str, u32)]) -> LogicEmbedding {
        LogicEmbedding::AstBow(pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect())
    }

    fn matrix3(l01: f64, l02: f64, l12: f64) -> SimilarityMatrix {
        SimilarityMatrix {
            mode: Mode::AstBow,
            n: 3,
            values: vec![1.0, l01, l02, l01, 1.0, l12, l02, l12, 1.0],
        }
    }

    #[test]
    fn mu_ast_hand_rule() {
        let ast = parse_source("fn f ( ) { var x = 0 ; }").unwrap();
        let target = ast.tokens.iter().position(|t| t.text == "x").unwrap();
        let e = mu_ast(&ast, target).unwrap();
        assert_eq!(e, bow(&[("var", 1), ("=", 1), ("NumberLit", 1), (";", 1)]));
        assert!(mu_ast(&ast, 0).is_err());
    }

    #[test]
    fn mu_ast_ignores_names_but_not_literal_kinds() {
        let e = |src: &str, name: &str| {
            let ast = parse_source(src).unwrap();
            let t = ast.tokens.iter().position(|t| t.text == name).unwrap();
            mu_ast(&ast, t).unwrap()
        };
        assert_eq!(
            e("fn f ( a ) { var fooBar = a + 1 ; }", "Bar"),
            e("fn g ( q ) { var zed = q + 7 ; }", "zed")
        );
        assert_ne!(
            e("fn f ( ) { var s = \"a\" ; }", "s"),
            e("fn f ( ) { var n = 0 ; }", "n")
        );
    }

    #[test]
    fn floyd_warshall_chain_with_shortcut() {
        let cfg = Cfg {
            blocks: vec![vec![]; 3],
            edges: vec![(0, 1), (1, 2), (0, 2)],
            entry: 0,
            exit: 2,
        };
        let a = floyd_warshall(&cfg);
        assert_eq!(a.dist[0][2], Some(1));
        assert_eq!(a.dist[2][0], None);
        assert_eq!(a.path(0, 2), Some(vec![0, 2]));
        assert_eq!(a.dist, bfs_distances(&cfg));
    }

    #[test]
    fn tie_break_prefers_lower_block() {
        let cfg = Cfg {
            blocks: vec![vec![]; 4],
            edges: vec![(0, 2), (0, 1), (1, 3), (2, 3)],
            entry: 0,
            exit: 3,
        };
        assert_eq!(floyd_warshall(&cfg).path(0, 3), Some(vec![0, 1, 3]));
    }

    #[test]
    fn mu_cfg_single_block_is_empty() {
        let ast = parse_source("fn f ( ) { var x = 0 ; return x ; }").unwrap();
        assert_eq!(mu_cfg(&build_cfg(&ast)), LogicEmbedding::CfgPaths(vec![]));
    }

    #[test]
    fn mu_cfg_diamond() {
        let ast = parse_source(
            "fn f ( a ) { var p = malloc ( 4 ) ; if ( a ) { free ( p ) ; } else { a = 1 ; } return a ; }",
        )
        .unwrap();
        let cfg = build_cfg(&ast);
        assert_eq!(cfg.blocks.len(), 4);
        let LogicEmbedding::CfgPaths(paths) = mu_cfg(&cfg) else { panic!() };
        // (0,1) (0,2) (0,3) (1,3) (2,3)
        assert_eq!(paths.len(), 5);
        for p in &paths {
            assert!((crate::model::dot(p, p) - 1.0).abs() < 1e-12);
        }
        // path 0 → 1: {Alloc, Branch, Free}
        let mut expect = vec![0.0; 10];
        for k in [StmtKind::Alloc, StmtKind::Branch, StmtKind::Free] {
            expect[k.index()] = 1.0 / 3f64.sqrt();
        }
        assert!(paths[0].iter().zip(&expect).all(|(a, b)| (a - b).abs() < 1e-12));

        let renamed = parse_source(
            "fn g ( b ) { var q = malloc ( 4 ) ; if ( b ) { free ( q ) ; } else { b = 1 ; } return b ; }",
        )
        .unwrap();
        assert_eq!(mu_cfg(&build_cfg(&renamed)), LogicEmbedding::CfgPaths(paths));
    }

    #[test]
    fn kappa_examples() {
        let a = bow(&[("a", 1), ("b", 1)]);
        let c = bow(&[("a", 1), ("c", 1)]);
        assert!((kappa(&a, &c).unwrap() - 0.5).abs() < 1e-12);
        assert!((kappa(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(kappa(&a, &bow(&[])).unwrap(), 0.0);
        let p = LogicEmbedding::CfgPaths(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let q = LogicEmbedding::CfgPaths(vec![vec![0.0, 1.0], vec![0.6, 0.8], vec![1.0, 0.0]]);
        assert!((kappa(&p, &q).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(kappa(&a, &p), Err(SimError::ModeMismatch));
    }

    #[test]
    fn cfg_matrix_is_symmetrized_with_max() {
        let p = LogicEmbedding::CfgPaths(vec![vec![1.0, 0.0]]);
        let q = LogicEmbedding::CfgPaths(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        // κ(p,q) = 1, κ(q,p) = 0.5
        let m = similarity_matrix(&[p, q]).unwrap();
        assert_eq!(m.get(0, 1), 1.0);
        assert_eq!(m.get(1, 0), 1.0);
    }

    #[test]
    fn identical_samples_matrix() {
        let a = bow(&[("x", 2)]);
        let m = similarity_matrix(&[a.clone(), a]).unwrap();
        for v in &m.values {
            assert!((v - 1.0).abs() < 1e-12);
        }
        assert!(similarity_matrix(&[bow(&[])]).is_err());
    }

    #[test]
    fn unshuffle_hand_simulations() {
        assert_eq!(unshuffle(&matrix3(0.9, 0.5, 0.2)), vec![0, 1, 2]);
        assert_eq!(unshuffle(&matrix3(0.5, 0.2, 0.9)), vec![1, 2, 0]);
        assert_eq!(unshuffle(&matrix3(0.0, 0.0, 0.0)), vec![0, 1, 2]);
    }

    #[test]
    fn batchify_chunks() {
        let order: Vec<usize> = (0..10).collect();
        let b = batchify(&order, 4).unwrap();
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        assert_eq!(b.concat(), order);
        assert_eq!(batchify(&order, 20).unwrap().len(), 1);
        assert!(batchify(&order, 1).is_err());
    }

    #[test]
    fn bpr_loss_examples() {
        let w = vec![1.0; 4];
        assert!(bpr_loss(&[vec![1.0, 2.0], vec![1.0, 2.0]], &[0, 0], &w).abs() < 1e-12);
        assert!((bpr_loss(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[1, 1], &w) - 1.0).abs() < 1e-12);
        // pairs: (0,1) same label cos 0, (0,2) cross label, (1,2) cross label
        let r = vec![vec![1.0, 0.0], vec![0.0, 3.0], vec![-1.0, 0.0]];
        let lam = vec![1.0, 0.5, 0.7, 0.5, 1.0, 0.3, 0.7, 0.3, 1.0];
        assert!((bpr_loss(&r, &[0, 0, 1], &lam) - 0.5).abs() < 1e-12);
        // (0,1) 0.5·1, (0,2) 0.7·2, (1,2) 0.3·1 over 3 pairs
        assert!((bpr_loss(&r, &[0, 0, 0], &lam) - 2.2 / 3.0).abs() < 1e-12);
        assert_eq!(bpr_loss(&r, &[0, 1, 2], &lam), 0.0);
    }

    #[test]
    fn bpr_grad_matches_finite_differences() {
        let r = vec![vec![0.3, -1.0, 0.2], vec![0.5, 0.1, 0.9], vec![-0.4, 0.8, 0.1]];
        let lam = vec![1.0, 0.4, 0.9, 0.4, 1.0, 0.6, 0.9, 0.6, 1.0];
        let labels = [0, 0, 0];
        let g = bpr_loss_grad(&r, &labels, &lam);
        for i in 0..3 {
            for k in 0..3 {
                let mut p = r.clone();
                p[i][k] += 1e-6;
                let mut m = r.clone();
                m[i][k] -= 1e-6;
                let fd = (bpr_loss(&p, &labels, &lam) - bpr_loss(&m, &labels, &lam)) / 2e-6;
                assert!((fd - g[i][k]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn gamma_schedule() {
        assert_eq!(gamma_p(0.0).unwrap(), 0.0);
        assert!((gamma_p(1.0).unwrap() - 5f64.tanh()).abs() < 1e-12);
        assert!((gamma_p(0.5).unwrap() - 2.5f64.tanh()).abs() < 1e-12);
        assert!(gamma_p(1.5).is_err());
        assert!(gamma_p(-0.1).is_err());
    }

    #[test]
    fn matrix_codec_round_trip_and_checksum() {
        let m = matrix3(0.9, 0.25, 0.125);
        let bytes = encode_matrix(&m);
        assert_eq!(decode_matrix(&bytes).unwrap(), m);
        let mut bad = bytes.clone();
        *bad.last_mut().unwrap() ^= 1;
        assert!(matches!(decode_matrix(&bad), Err(SimError::Format(_))));
    }
}
