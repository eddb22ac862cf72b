//! Synthetic project-partitioned corpus with a controllable project-specific
//! shortcut, plus the intra/inter-project split protocol and JSON-lines I/O.

use crate::lang::{self, identifier_runs, Token, TokenKind};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Task {
    TypeInf,
    VulnDet,
}

impl Task {
    pub fn num_classes(self) -> usize {
        match self {
            Task::TypeInf => 3,
            Task::VulnDet => 2,
        }
    }

    pub fn class_name(self, class: usize) -> &'static str {
        match (self, class) {
            (Task::TypeInf, 0) => "number",
            (Task::TypeInf, 1) => "string",
            (Task::TypeInf, _) => "boolean",
            (Task::VulnDet, 0) => "safe",
            (Task::VulnDet, _) => "vulnerable",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "typeinf" | "type" => Ok(Task::TypeInf),
            "vulndet" | "vuln" => Ok(Task::VulnDet),
            _ => Err(format!("unknown task {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TypeClass {
    Number,
    String,
    Boolean,
}

impl TypeClass {
    pub const ALL: [TypeClass; 3] = [TypeClass::Number, TypeClass::String, TypeClass::Boolean];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TypeTarget {
    pub target: usize,
    #[serde(rename = "type")]
    pub ty: TypeClass,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Label {
    Vulnerable(bool),
    Types(Vec<TypeTarget>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub sample_id: String,
    pub project_id: String,
    pub tokens: Vec<Token>,
    pub task: Task,
    pub label: Label,
    pub evidence_indices: Vec<usize>,
    pub bias_token_indices: Vec<usize>,
}

impl Sample {
    /// Classification instances: `(target token, class)`; one per sample for
    /// vulnerability detection.
    pub fn instances(&self) -> Vec<(Option<usize>, usize)> {
        match &self.label {
            Label::Vulnerable(v) => vec![(None, *v as usize)],
            Label::Types(ts) => ts.iter().map(|t| (Some(t.target), t.ty.index())).collect(),
        }
    }

    /// Sample-level class: the vulnerability bit, or the type of the first target.
    pub fn primary_class(&self) -> usize {
        self.instances().first().map(|i| i.1).unwrap_or(0)
    }

    pub fn source(&self) -> String {
        lang::render_tokens(&self.tokens)
    }

    fn check(&self) -> Result<(), String> {
        let n = self.tokens.len();
        let bad = |v: &[usize]| v.iter().any(|&i| i >= n);
        if bad(&self.evidence_indices) || bad(&self.bias_token_indices) {
            return Err(format!("{}: index out of range", self.sample_id));
        }
        if self.evidence_indices.is_empty() {
            return Err(format!("{}: empty evidence", self.sample_id));
        }
        match (&self.label, self.task) {
            (Label::Vulnerable(_), Task::VulnDet) => Ok(()),
            (Label::Types(ts), Task::TypeInf) => {
                if ts.iter().any(|t| {
                    t.target >= n || !self.tokens[t.target].kind.is_name_piece()
                }) {
                    Err(format!("{}: bad type target", self.sample_id))
                } else {
                    Ok(())
                }
            }
            _ => Err(format!("{}: label does not match task", self.sample_id)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    pub samples: Vec<Sample>,
    pub projects: Vec<String>,
    pub task: Task,
    pub bias_vocab: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub num_projects: usize,
    pub samples_per_project: usize,
    pub bias_strength: f64,
    pub task: Task,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            num_projects: 20,
            samples_per_project: 120,
            bias_strength: 0.9,
            task: Task::VulnDet,
            seed: 7,
        }
    }
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("format error at line {line}: {message}")]
    Format { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

const GENERIC_LOWER: &[&str] = &[
    "buf", "len", "count", "data", "ptr", "tmp", "idx", "val", "size", "node", "item", "res",
    "cur", "key", "src", "dst",
];
const GENERIC_CAP: &[&str] = &[
    "Count", "Size", "Len", "Data", "Ptr", "Idx", "Val", "Node", "Item", "Key", "Info", "State",
];
const VERBS: &[&str] = &[
    "get", "set", "read", "write", "init", "load", "parse", "handle", "update", "check",
];
const MACRO_SUFFIX: &[&str] = &["_MAX", "_SIZE", "_LIMIT"];
const STRINGS: &[&str] = &[
    "\"ok\"", "\"id\"", "\"name\"", "\"tmp\"", "\"err\"", "\"path\"", "\"key\"", "\"msg\"",
];
const CONSONANTS: &[char] = &[
    'b', 'd', 'f', 'g', 'k', 'l', 'm', 'n', 'p', 'r', 's', 't', 'v', 'z', 'q', 'x',
];
const VOWELS: &[char] = &['a', 'e', 'i', 'o', 'u'];
/// Project-specific words per project; the first `num_classes` double as
/// the label-correlated shortcut words.
const WORDS_PER_PROJECT: usize = 10;

fn pseudo_word(rng: &mut ChaCha8Rng) -> String {
    let syllables = rng.gen_range(1..=2);
    let mut w = String::new();
    for _ in 0..syllables {
        w.push(*CONSONANTS.choose(rng).unwrap());
        w.push(*VOWELS.choose(rng).unwrap());
    }
    w.push(*CONSONANTS.choose(rng).unwrap());
    let mut c = w.chars();
    let first = c.next().unwrap().to_ascii_uppercase();
    std::iter::once(first).chain(c).collect()
}

/// Fresh capitalized words disjoint from `taken` and from the generic pools.
pub fn fresh_words(rng: &mut ChaCha8Rng, count: usize, taken: &mut BTreeSet<String>) -> Vec<String> {
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let w = pseudo_word(rng);
        let lower = w.to_ascii_lowercase();
        if GENERIC_CAP.contains(&w.as_str())
            || GENERIC_LOWER.contains(&lower.as_str())
            || VERBS.contains(&lower.as_str())
            || lang::KEYWORDS.contains(&lower.as_str())
            || lang::API_NAMES.contains(&lower.as_str())
            || lower == "true"
            || lower == "false"
        {
            continue;
        }
        if taken.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

struct ProjectNames {
    words: Vec<String>,
    bias_words: Vec<String>,
}

impl ProjectNames {
    fn plain_word<'a>(&'a self, rng: &mut ChaCha8Rng) -> &'a str {
        &self.words[rng.gen_range(0..self.words.len())]
    }

    fn var_name(&self, rng: &mut ChaCha8Rng) -> String {
        let head = GENERIC_LOWER.choose(rng).unwrap();
        if rng.gen_bool(0.6) {
            format!("{head}{}", self.plain_word(rng))
        } else {
            format!("{head}{}", GENERIC_CAP.choose(rng).unwrap())
        }
    }

    fn fn_name(&self, rng: &mut ChaCha8Rng) -> String {
        format!("{}{}", VERBS.choose(rng).unwrap(), self.plain_word(rng))
    }

    fn macro_name(&self, rng: &mut ChaCha8Rng) -> String {
        format!(
            "{}{}",
            self.plain_word(rng).to_ascii_uppercase(),
            MACRO_SUFFIX.choose(rng).unwrap()
        )
    }
}

/// Distinct names, none equal to a name already in `used`.
fn unique_name(
    rng: &mut ChaCha8Rng,
    used: &mut BTreeSet<String>,
    mut make: impl FnMut(&mut ChaCha8Rng) -> String,
) -> String {
    for _ in 0..64 {
        let n = make(rng);
        if used.insert(n.clone()) {
            return n;
        }
    }
    let base = make(rng);
    let mut k = 2;
    loop {
        let n = format!("{base}{k}");
        if used.insert(n.clone()) {
            return n;
        }
        k += 1;
    }
}

/// Source text with role tags on byte ranges, used to recover evidence,
/// target and shortcut token indices after tokenizing.
#[derive(Default)]
struct Emitter {
    src: String,
    tags: Vec<(usize, usize, Role)>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Role {
    Evidence,
    Target,
    Bias,
}

impl Emitter {
    fn append(&mut self, s: &str) -> usize {
        if !self.src.is_empty() {
            self.src.push(' ');
        }
        let start = self.src.len();
        self.src.push_str(s);
        start
    }

    fn plain(&mut self, s: &str) {
        self.append(s);
    }

    fn with(&mut self, s: &str, role: Role) {
        let start = self.append(s);
        self.tags.push((start, self.src.len(), role));
    }

    /// Appends an identifier whose trailing `word` is tagged with `role`.
    fn ident(&mut self, name: &str, word: &str, role: Role) {
        self.append(name);
        let end = self.src.len();
        if name.ends_with(word) {
            self.tags.push((end - word.len(), end, role));
        }
    }

    fn finish(self) -> (Vec<Token>, Vec<usize>, Vec<usize>, Vec<usize>) {
        let tokens = lang::tokenize(&self.src).expect("generator emits valid MiniLang");
        let (mut ev, mut tgt, mut bias) = (Vec::new(), Vec::new(), Vec::new());
        for (i, t) in tokens.iter().enumerate() {
            let role = self
                .tags
                .iter()
                .find(|(a, b, _)| t.byte_span.0 >= *a && t.byte_span.1 <= *b)
                .map(|r| r.2);
            match role {
                Some(Role::Evidence) => ev.push(i),
                Some(Role::Target) => tgt.push(i),
                Some(Role::Bias) => bias.push(i),
                None => {}
            }
        }
        (tokens, ev, tgt, bias)
    }
}

fn small_number(rng: &mut ChaCha8Rng) -> String {
    rng.gen_range(0..=20).to_string()
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Resource {
    MemBalanced,
    LockBalanced,
    Leak,
    LockOnly,
}

fn gen_vuln_sample(
    rng: &mut ChaCha8Rng,
    names: &ProjectNames,
    vulnerable: bool,
    bias_word: &str,
) -> (Vec<Token>, Vec<usize>, Vec<usize>) {
    let mut used = BTreeSet::new();
    let fname = unique_name(rng, &mut used, |r| names.fn_name(r));
    let helper = unique_name(rng, &mut used, |r| names.fn_name(r));
    let p1 = unique_name(rng, &mut used, |r| names.var_name(r));
    let p2 = unique_name(rng, &mut used, |r| names.var_name(r));
    let bias_var = unique_name(rng, &mut used, |r| {
        format!("{}{bias_word}", GENERIC_LOWER.choose(r).unwrap())
    });
    let locals: Vec<String> = (0..2)
        .map(|_| unique_name(rng, &mut used, |r| names.var_name(r)))
        .collect();
    let mac = names.macro_name(rng);

    let balanced = |rng: &mut ChaCha8Rng| {
        if rng.gen_bool(0.5) {
            Resource::MemBalanced
        } else {
            Resource::LockBalanced
        }
    };
    let mut resources: Vec<Resource> = (0..rng.gen_range(1..=2)).map(|_| balanced(rng)).collect();
    if vulnerable {
        let bad = if rng.gen_bool(0.5) {
            Resource::Leak
        } else {
            Resource::LockOnly
        };
        resources.insert(rng.gen_range(0..=resources.len()), bad);
    }

    // Statement skeleton: fillers with resource acquire/release slots spliced in.
    #[derive(Clone)]
    enum Slot {
        Filler(u8),
        Acquire(Resource, String),
        Release(Resource, String),
    }
    let mut slots: Vec<Slot> = (0..rng.gen_range(2..=4))
        .map(|_| Slot::Filler(rng.gen_range(0..6)))
        .collect();
    for r in resources {
        let handle = match r {
            Resource::MemBalanced | Resource::Leak => {
                unique_name(rng, &mut used, |rr| names.var_name(rr))
            }
            _ => {
                if rng.gen_bool(0.5) {
                    p2.clone()
                } else {
                    mac.clone()
                }
            }
        };
        let first = rng.gen_range(0..=slots.len());
        match r {
            Resource::MemBalanced | Resource::LockBalanced => {
                slots.insert(first, Slot::Acquire(r, handle.clone()));
                let second = rng.gen_range(first + 1..=slots.len());
                slots.insert(second, Slot::Release(r, handle));
            }
            Resource::Leak | Resource::LockOnly => slots.insert(first, Slot::Acquire(r, handle)),
        }
    }

    let mut e = Emitter::default();
    e.plain("fn");
    e.plain(&fname);
    e.plain("(");
    e.plain(&p1);
    e.plain(",");
    e.plain(&p2);
    e.plain(") {");
    e.plain("var");
    e.ident(&bias_var, bias_word, Role::Bias);
    e.plain(&format!("= {} ;", small_number(rng)));
    for l in &locals {
        e.plain(&format!("var {l} = {} ;", small_number(rng)));
    }
    let pick = |rng: &mut ChaCha8Rng| -> String {
        let i = rng.gen_range(0..locals.len() + 1);
        if i == locals.len() {
            bias_var.clone()
        } else {
            locals[i].clone()
        }
    };
    for slot in slots {
        match slot {
            Slot::Filler(k) => {
                let v = pick(rng);
                let w = pick(rng);
                let n = small_number(rng);
                let src = match k {
                    0 => format!("{v} = {w} + {n} ;"),
                    1 => format!("{helper} ( {v} , {w} ) ;"),
                    2 => format!("if ( {v} < {n} ) {{ {v} = {w} - {n} ; }} else {{ {v} = {n} ; }}"),
                    3 => format!("if ( {v} == {n} ) {{ {helper} ( {w} ) ; }}"),
                    4 => format!("while ( {v} > {n} ) {{ {v} = {v} - 1 ; }}"),
                    _ => format!("{v} = {w} * {mac} ;"),
                };
                push_with_bias(&mut e, &src, &bias_var, bias_word);
            }
            Slot::Acquire(r, h) => match r {
                Resource::MemBalanced | Resource::Leak => {
                    e.plain(&format!("var {h} ="));
                    e.with("malloc", Role::Evidence);
                    e.plain(&format!("( {} ) ;", small_number(rng)));
                    let w = pick(rng);
                    push_with_bias(&mut e, &format!("{helper} ( {h} , {w} ) ;"), &bias_var, bias_word);
                }
                _ => {
                    e.with("lock", Role::Evidence);
                    e.plain(&format!("( {h} ) ;"));
                }
            },
            Slot::Release(r, h) => match r {
                Resource::MemBalanced => {
                    e.with("free", Role::Evidence);
                    e.plain(&format!("( {h} ) ;"));
                }
                _ => {
                    e.with("unlock", Role::Evidence);
                    e.plain(&format!("( {h} ) ;"));
                }
            },
        }
    }
    let v = pick(rng);
    push_with_bias(&mut e, &format!("return {v} ;"), &bias_var, bias_word);
    e.plain("}");
    let (tokens, ev, _, bias) = e.finish();
    (tokens, ev, bias)
}

/// Pushes whitespace-separated source, tagging occurrences of the shortcut variable.
fn push_with_bias(e: &mut Emitter, src: &str, bias_var: &str, bias_word: &str) {
    for part in src.split(' ') {
        if part == bias_var {
            e.ident(part, bias_word, Role::Bias);
        } else {
            e.plain(part);
        }
    }
}

/// Initializer forms per type class; `I` marks an identifier slot, `N`, `S`, `B` literals.
const NUMBER_FORMS: &[&str] = &["N", "N + N", "N * N", "N - I", "I * N", "I / N"];
const STRING_FORMS: &[&str] = &["S", "S + N", "N + S", "S + I", "I + S", "S + S"];
const BOOL_FORMS: &[&str] = &["B", "N < I", "I == S", "N == N", "B && I", "I > N", "I != N"];

fn gen_type_sample(
    rng: &mut ChaCha8Rng,
    names: &ProjectNames,
    ty: TypeClass,
    bias_word: &str,
) -> (Vec<Token>, Vec<usize>, Vec<usize>, usize) {
    let mut used = BTreeSet::new();
    let fname = unique_name(rng, &mut used, |r| names.fn_name(r));
    let helper = unique_name(rng, &mut used, |r| names.fn_name(r));
    let p1 = unique_name(rng, &mut used, |r| names.var_name(r));
    let p2 = unique_name(rng, &mut used, |r| names.var_name(r));
    let target = unique_name(rng, &mut used, |r| {
        format!("{}{bias_word}", GENERIC_LOWER.choose(r).unwrap())
    });
    let local = unique_name(rng, &mut used, |r| names.var_name(r));
    let params = [p1.clone(), p2.clone()];
    let form = match ty {
        TypeClass::Number => NUMBER_FORMS,
        TypeClass::String => STRING_FORMS,
        TypeClass::Boolean => BOOL_FORMS,
    }
    .choose(rng)
    .unwrap();

    let mut e = Emitter::default();
    e.plain(&format!("fn {fname} ( {p1} , {p2} ) {{"));
    let filler = |rng: &mut ChaCha8Rng, e: &mut Emitter| {
        let a = params.choose(rng).unwrap();
        let b = params.choose(rng).unwrap();
        match rng.gen_range(0..3) {
            0 => e.plain(&format!("{helper} ( {a} , {b} ) ;")),
            1 => e.plain(&format!("{a} = {b} ;")),
            _ => e.plain(&format!("if ( {a} ) {{ {helper} ( {b} ) ; }}")),
        }
    };
    for _ in 0..rng.gen_range(0..=2) {
        filler(rng, &mut e);
    }
    e.plain(&format!("var {local} = {p1} ;"));
    e.plain("var");
    e.ident(&target, bias_word, Role::Target);
    e.plain("=");
    for sym in form.split(' ') {
        match sym {
            "N" => e.with(&small_number(rng), Role::Evidence),
            "S" => e.with(STRINGS.choose(rng).unwrap(), Role::Evidence),
            "B" => e.with(if rng.gen_bool(0.5) { "true" } else { "false" }, Role::Evidence),
            "I" => e.plain(&local),
            op => e.with(op, Role::Evidence),
        }
    }
    e.plain(";");
    for _ in 0..rng.gen_range(1..=2) {
        filler(rng, &mut e);
    }
    e.plain(&format!("{helper} ("));
    e.ident(&target, bias_word, Role::Bias);
    e.plain(&format!(", {local} ) ;"));
    e.plain("return");
    e.ident(&target, bias_word, Role::Bias);
    e.plain("; }");
    let (tokens, ev, tgt, mut bias) = e.finish();
    // The declared name's last piece is both the prediction target and the shortcut word.
    let target_idx = *tgt.last().expect("target emitted");
    bias.push(target_idx);
    bias.sort_unstable();
    (tokens, ev, bias, target_idx)
}

/// Shortcut placement: with probability `bias_strength` a sample carries the
/// shortcut word of its own label; otherwise the word's label is assigned
/// round-robin so that uncorrelated samples spread evenly over the words.
fn bias_labels(rng: &mut ChaCha8Rng, labels: &[usize], classes: usize, strength: f64) -> Vec<usize> {
    let mut out = vec![0; labels.len()];
    let mut uncorrelated: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &l) in labels.iter().enumerate() {
        if rng.gen_bool(strength) {
            out[i] = l;
        } else {
            uncorrelated[l].push(i);
        }
    }
    for group in uncorrelated {
        let mut cycle: Vec<usize> = (0..group.len()).map(|k| k % classes).collect();
        cycle.shuffle(rng);
        for (i, b) in group.into_iter().zip(cycle) {
            out[i] = b;
        }
    }
    out
}

pub fn generate_corpus(cfg: &GenConfig) -> Result<Corpus, CorpusError> {
    if cfg.num_projects < 4 {
        return Err(CorpusError::Config("num_projects must be at least 4".into()));
    }
    if !(0.0..=1.0).contains(&cfg.bias_strength) {
        return Err(CorpusError::Config("bias_strength must lie in [0, 1]".into()));
    }
    let classes = cfg.task.num_classes();
    if cfg.samples_per_project < classes {
        return Err(CorpusError::Config(format!(
            "samples_per_project must be at least {classes}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut taken = BTreeSet::new();
    let mut bias_vocab = BTreeSet::new();
    let mut projects = Vec::new();
    let mut samples = Vec::new();
    for p in 0..cfg.num_projects {
        let project_id = format!("proj{p:03}");
        let words = fresh_words(&mut rng, WORDS_PER_PROJECT, &mut taken);
        for w in &words {
            bias_vocab.insert(w.clone());
            bias_vocab.insert(w.to_ascii_uppercase());
        }
        let names = ProjectNames {
            bias_words: words[..classes].to_vec(),
            words: words[classes..].to_vec(),
        };
        let mut labels: Vec<usize> = (0..cfg.samples_per_project).map(|i| i % classes).collect();
        labels.shuffle(&mut rng);
        let shortcut = bias_labels(&mut rng, &labels, classes, cfg.bias_strength);
        for (i, (&label, &b)) in labels.iter().zip(&shortcut).enumerate() {
            let bias_word = &names.bias_words[b];
            let sample_id = format!("{project_id}-{i:04}");
            let sample = match cfg.task {
                Task::VulnDet => {
                    let (tokens, ev, bias) = gen_vuln_sample(&mut rng, &names, label == 1, bias_word);
                    Sample {
                        sample_id,
                        project_id: project_id.clone(),
                        tokens,
                        task: Task::VulnDet,
                        label: Label::Vulnerable(label == 1),
                        evidence_indices: ev,
                        bias_token_indices: bias,
                    }
                }
                Task::TypeInf => {
                    let ty = TypeClass::ALL[label];
                    let (tokens, ev, bias, target) = gen_type_sample(&mut rng, &names, ty, bias_word);
                    Sample {
                        sample_id,
                        project_id: project_id.clone(),
                        tokens,
                        task: Task::TypeInf,
                        label: Label::Types(vec![TypeTarget { target, ty }]),
                        evidence_indices: ev,
                        bias_token_indices: bias,
                    }
                }
            };
            samples.push(sample);
        }
        projects.push(project_id);
    }
    Ok(Corpus {
        samples,
        projects,
        task: cfg.task,
        bias_vocab,
    })
}

/// Label read off the evidence tokens alone.
pub fn evidence_oracle(sample: &Sample) -> usize {
    let ev: Vec<&Token> = sample.evidence_indices.iter().map(|&i| &sample.tokens[i]).collect();
    match sample.task {
        Task::VulnDet => {
            let count = |name: &str| ev.iter().filter(|t| t.text == name).count();
            let leaks = count("malloc") > count("free") || count("lock") > count("unlock");
            leaks as usize
        }
        Task::TypeInf => {
            let has_op = |ops: &[&str]| {
                ev.iter()
                    .any(|t| t.kind == TokenKind::Operator && ops.contains(&t.text.as_str()))
            };
            let has_kind = |k: TokenKind| ev.iter().any(|t| t.kind == k);
            if has_op(&["<", ">", "<=", ">=", "==", "!=", "&&", "||"]) || has_kind(TokenKind::BoolLit)
            {
                TypeClass::Boolean.index()
            } else if has_kind(TokenKind::StringLit) && (has_op(&["+"]) || ev.len() == 1) {
                TypeClass::String.index()
            } else {
                TypeClass::Number.index()
            }
        }
    }
}

/// Full identifier names used by each project, in first-seen order.
pub fn project_name_pools(corpus: &Corpus) -> BTreeMap<String, Vec<String>> {
    let mut pools: BTreeMap<String, Vec<String>> = BTreeMap::new();
    let mut seen: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for s in &corpus.samples {
        let pool = pools.entry(s.project_id.clone()).or_default();
        let set = seen.entry(s.project_id.clone()).or_default();
        for run in identifier_runs(&s.tokens) {
            if set.insert(run.name.clone()) {
                pool.push(run.name);
            }
        }
    }
    pools
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_projects: Vec<String>,
    pub iid_test_fraction: f64,
    pub ood_val_projects: Vec<String>,
    pub ood_test_projects: Vec<String>,
    pub seed: u64,
}

/// Sample indices of each evaluation partition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub train: Vec<usize>,
    pub iid_test: Vec<usize>,
    pub ood_val: Vec<usize>,
    pub ood_test: Vec<usize>,
}

pub fn split_projects(corpus: &Corpus, seed: u64) -> Result<SplitSpec, CorpusError> {
    let n = corpus.projects.len();
    if n < 4 {
        return Err(CorpusError::Config("need at least 4 projects to split".into()));
    }
    let mut order = corpus.projects.clone();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = ((n as f64) * 0.1).round().max(1.0) as usize;
    let n_test = ((n as f64) * 0.2).round().max(1.0) as usize;
    let n_train = n.checked_sub(n_val + n_test).filter(|&k| k > 0).ok_or_else(|| {
        CorpusError::Config("split leaves no training projects".into())
    })?;
    Ok(SplitSpec {
        train_projects: order[..n_train].to_vec(),
        iid_test_fraction: 0.2,
        ood_val_projects: order[n_train..n_train + n_val].to_vec(),
        ood_test_projects: order[n_train + n_val..].to_vec(),
        seed,
    })
}

impl SplitSpec {
    /// Assigns samples to partitions; inside every training project a seeded
    /// shuffle holds out `iid_test_fraction` of its samples.
    pub fn partition(&self, corpus: &Corpus) -> Partition {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed_1d00);
        let mut part = Partition {
            train: vec![],
            iid_test: vec![],
            ood_val: vec![],
            ood_test: vec![],
        };
        for p in &self.train_projects {
            let mut idx: Vec<usize> = corpus
                .samples
                .iter()
                .enumerate()
                .filter(|(_, s)| &s.project_id == p)
                .map(|(i, _)| i)
                .collect();
            idx.shuffle(&mut rng);
            let n_test = ((idx.len() as f64) * self.iid_test_fraction).round() as usize;
            part.iid_test.extend_from_slice(&idx[..n_test]);
            part.train.extend_from_slice(&idx[n_test..]);
        }
        for (i, s) in corpus.samples.iter().enumerate() {
            if self.ood_val_projects.contains(&s.project_id) {
                part.ood_val.push(i);
            } else if self.ood_test_projects.contains(&s.project_id) {
                part.ood_test.push(i);
            }
        }
        part.train.sort_unstable();
        part.iid_test.sort_unstable();
        part
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    task: Task,
    projects: Vec<String>,
    bias_vocab: Vec<String>,
}

pub fn write_corpus<W: Write>(corpus: &Corpus, mut w: W) -> Result<(), CorpusError> {
    let header = Header {
        task: corpus.task,
        projects: corpus.projects.clone(),
        bias_vocab: corpus.bias_vocab.iter().cloned().collect(),
    };
    serde_json::to_writer(&mut w, &header).map_err(std::io::Error::from)?;
    writeln!(w)?;
    for s in &corpus.samples {
        serde_json::to_writer(&mut w, s).map_err(std::io::Error::from)?;
        writeln!(w)?;
    }
    Ok(())
}

pub fn read_corpus<R: BufRead>(r: R) -> Result<Corpus, CorpusError> {
    let mut lines = r.lines().enumerate();
    let header: Header = match lines.next() {
        Some((_, line)) => serde_json::from_str(&line?).map_err(|e| CorpusError::Format {
            line: 1,
            message: format!("bad header: {e}"),
        })?,
        None => {
            return Err(CorpusError::Format {
                line: 1,
                message: "empty file; a corpus must start with a task header".into(),
            })
        }
    };
    let mut samples = Vec::new();
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fmt_err = |message: String| CorpusError::Format {
            line: i + 1,
            message,
        };
        let s: Sample = serde_json::from_str(&line).map_err(|e| fmt_err(e.to_string()))?;
        s.check().map_err(fmt_err)?;
        if !header.projects.contains(&s.project_id) {
            return Err(fmt_err(format!("unknown project {}", s.project_id)));
        }
        samples.push(s);
    }
    Ok(Corpus {
        samples,
        projects: header.projects,
        task: header.task,
        bias_vocab: header.bias_vocab.into_iter().collect(),
    })
}

pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<(), CorpusError> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_corpus(corpus, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_corpus(path: &Path) -> Result<Corpus, CorpusError> {
    let f = std::fs::File::open(path)?;
    read_corpus(std::io::BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(task: Task, bias: f64) -> Corpus {
        generate_corpus(&GenConfig {
            num_projects: 6,
            samples_per_project: 60,
            bias_strength: bias,
            task,
            seed: 11,
        })
        .unwrap()
    }

    #[test]
    fn deterministic() {
        assert_eq!(small(Task::VulnDet, 0.5), small(Task::VulnDet, 0.5));
        assert_eq!(small(Task::TypeInf, 0.5), small(Task::TypeInf, 0.5));
    }

    #[test]
    fn rejects_bad_config() {
        let mut cfg = GenConfig {
            num_projects: 3,
            ..GenConfig::default()
        };
        assert!(matches!(generate_corpus(&cfg), Err(CorpusError::Config(_))));
        cfg.num_projects = 4;
        cfg.bias_strength = 1.5;
        assert!(generate_corpus(&cfg).is_err());
    }

    #[test]
    fn samples_parse_and_satisfy_invariants() {
        for task in [Task::VulnDet, Task::TypeInf] {
            let c = small(task, 0.7);
            for s in &c.samples {
                s.check().unwrap();
                let ast = lang::parse(&s.tokens).unwrap();
                assert_eq!(ast.node(ast.root).token_span, (0, s.tokens.len()));
                assert_eq!(evidence_oracle(s), s.primary_class(), "{}", s.source());
                assert!(!s.bias_token_indices.is_empty());
                for &b in &s.bias_token_indices {
                    assert!(c.bias_vocab.contains(&s.tokens[b].text));
                }
                if let Label::Types(ts) = &s.label {
                    for t in ts {
                        assert!(ast.declaration_target_at(t.target).is_some());
                    }
                }
            }
        }
    }

    #[test]
    fn bias_vocab_disjoint_from_fixed_vocab() {
        let c = small(Task::VulnDet, 0.9);
        for s in &c.samples {
            for t in &s.tokens {
                if !t.kind.is_name_piece() {
                    assert!(!c.bias_vocab.contains(&t.text));
                }
            }
        }
    }

    #[test]
    fn classes_balanced_per_project() {
        let c = small(Task::TypeInf, 0.9);
        for p in &c.projects {
            let mut counts = [0usize; 3];
            for s in c.samples.iter().filter(|s| &s.project_id == p) {
                counts[s.primary_class()] += 1;
            }
            assert_eq!(counts, [20, 20, 20]);
        }
    }

    #[test]
    fn full_bias_marks_every_vulnerable_sample() {
        let c = small(Task::VulnDet, 1.0);
        for p in &c.projects {
            let mut words: BTreeMap<usize, BTreeSet<String>> = BTreeMap::new();
            for s in c.samples.iter().filter(|s| &s.project_id == p) {
                let w = s.tokens[s.bias_token_indices[0]].text.clone();
                words.entry(s.primary_class()).or_default().insert(w);
            }
            assert_eq!(words[&1].len(), 1, "one shortcut word for vulnerable samples");
            assert!(words[&0].is_disjoint(&words[&1]));
        }
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let c = generate_corpus(&GenConfig {
            num_projects: 10,
            samples_per_project: 10,
            ..GenConfig::default()
        })
        .unwrap();
        let s = split_projects(&c, 3).unwrap();
        assert_eq!(
            (s.train_projects.len(), s.ood_val_projects.len(), s.ood_test_projects.len()),
            (7, 1, 2)
        );
        let part = s.partition(&c);
        assert_eq!(part.train.len(), 56);
        assert_eq!(part.iid_test.len(), 14);
        for &i in &part.ood_test {
            assert!(!part.train.contains(&i));
            assert!(s.ood_test_projects.contains(&c.samples[i].project_id));
        }
    }

    #[test]
    fn split_seeds_permute() {
        let c = generate_corpus(&GenConfig {
            num_projects: 10,
            samples_per_project: 2,
            ..GenConfig::default()
        })
        .unwrap();
        let distinct: BTreeSet<Vec<String>> = (0..20)
            .map(|seed| {
                let s = split_projects(&c, seed).unwrap();
                [s.train_projects, s.ood_val_projects, s.ood_test_projects].concat()
            })
            .collect();
        assert!(distinct.len() >= 19);
    }

    #[test]
    fn round_trip_and_format_errors() {
        let c = small(Task::TypeInf, 0.5);
        let mut buf = Vec::new();
        write_corpus(&c, &mut buf).unwrap();
        assert_eq!(read_corpus(&buf[..]).unwrap(), c);

        let text = String::from_utf8(buf).unwrap();
        let truncated = &text[..text.len() - 20];
        let lines = truncated.lines().count();
        match read_corpus(truncated.as_bytes()) {
            Err(CorpusError::Format { line, .. }) => assert_eq!(line, lines),
            other => panic!("expected format error, got {other:?}"),
        }
        match read_corpus(&b""[..]) {
            Err(CorpusError::Format { line: 1, .. }) => {}
            other => panic!("expected format error, got {other:?}"),
        }
    }
}
