//! MiniLang: the small C-like language every corpus program is written in.
//!
//! Grammar (one function per source):
//!
//! ```text
//! function := "fn" ident "(" [ident ("," ident)*] ")" block
//! block    := "{" stmt* "}"
//! stmt     := "var" ident "=" expr ";" | ident "=" expr ";"
//!           | "if" "(" expr ")" block ["else" block]
//!           | "while" "(" expr ")" block
//!           | "return" [expr] ";" | call ";"
//! expr     := binary expression over || && == != < > <= >= + - * /
//! primary  := literal | ident | call | "(" expr ")"
//! ```
//!
//! Identifiers are emitted as subword pieces split at camelCase and
//! snake_case boundaries.

use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use thiserror::Error;

pub const KEYWORDS: &[&str] = &["fn", "var", "if", "else", "while", "return"];
pub const API_NAMES: &[&str] = &["malloc", "free", "lock", "unlock"];
const OPERATORS: &[&str] = &[
    "==", "!=", "<=", ">=", "&&", "||", "=", "<", ">", "+", "-", "*", "/",
];
const DELIMITERS: &[char] = &['(', ')', '{', '}', ',', ';'];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TokenKind {
    Keyword,
    Identifier,
    SubwordIdentifierPiece,
    NumberLit,
    StringLit,
    BoolLit,
    Operator,
    Delimiter,
    ApiName,
}

impl TokenKind {
    pub fn is_name_piece(self) -> bool {
        matches!(self, TokenKind::Identifier | TokenKind::SubwordIdentifierPiece)
    }

    pub fn is_literal(self) -> bool {
        matches!(
            self,
            TokenKind::NumberLit | TokenKind::StringLit | TokenKind::BoolLit
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Token {
    pub text: String,
    pub kind: TokenKind,
    pub byte_span: (usize, usize),
}

impl Token {
    pub fn new(text: impl Into<String>, kind: TokenKind, byte_span: (usize, usize)) -> Self {
        Token {
            text: text.into(),
            kind,
            byte_span,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unexpected character {ch:?} at byte {offset}")]
pub struct LexError {
    pub offset: usize,
    pub ch: char,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("parse error at token {token_index}: expected one of {expected:?}")]
pub struct ParseError {
    pub token_index: usize,
    pub expected: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("node {0} is not a declaration target")]
pub struct NotADeclaration(pub usize);

/// Splits an identifier into subword pieces at case and underscore boundaries.
///
/// An underscore starts a new piece and stays attached to it, so rejoining
/// the pieces always reproduces the identifier.
pub fn split_identifier(ident: &str) -> Vec<&str> {
    let chars: Vec<(usize, char)> = ident.char_indices().collect();
    let mut cuts = vec![0];
    for w in 1..chars.len() {
        let prev = chars[w - 1].1;
        let cur = chars[w].1;
        let next = chars.get(w + 1).map(|c| c.1);
        let boundary = if cur == '_' {
            prev != '_'
        } else if cur.is_ascii_uppercase() {
            prev.is_ascii_lowercase()
                || prev.is_ascii_digit()
                || (prev.is_ascii_uppercase() && next.is_some_and(|n| n.is_ascii_lowercase()))
        } else {
            false
        };
        if boundary {
            cuts.push(chars[w].0);
        }
    }
    cuts.push(ident.len());
    cuts.windows(2)
        .map(|w| &ident[w[0]..w[1]])
        .filter(|p| !p.is_empty())
        .collect()
}

pub fn tokenize(source: &str) -> Result<Vec<Token>, LexError> {
    let bytes = source.as_bytes();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        if !c.is_ascii() {
            let ch = source[i..].chars().next().unwrap_or('\u{fffd}');
            return Err(LexError { offset: i, ch });
        }
        if c.is_ascii_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        if c.is_ascii_alphabetic() || c == '_' {
            while i < bytes.len() && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_') {
                i += 1;
            }
            let word = &source[start..i];
            if KEYWORDS.contains(&word) {
                tokens.push(Token::new(word, TokenKind::Keyword, (start, i)));
            } else if word == "true" || word == "false" {
                tokens.push(Token::new(word, TokenKind::BoolLit, (start, i)));
            } else if API_NAMES.contains(&word) {
                tokens.push(Token::new(word, TokenKind::ApiName, (start, i)));
            } else {
                let pieces = split_identifier(word);
                let kind = if pieces.len() == 1 {
                    TokenKind::Identifier
                } else {
                    TokenKind::SubwordIdentifierPiece
                };
                let mut at = start;
                for p in pieces {
                    tokens.push(Token::new(p, kind, (at, at + p.len())));
                    at += p.len();
                }
            }
        } else if c.is_ascii_digit() {
            while i < bytes.len() && bytes[i].is_ascii_digit() {
                i += 1;
            }
            tokens.push(Token::new(&source[start..i], TokenKind::NumberLit, (start, i)));
        } else if c == '"' {
            i += 1;
            while i < bytes.len() && bytes[i] != b'"' && bytes[i] != b'\n' {
                i += 1;
            }
            if i >= bytes.len() || bytes[i] != b'"' {
                return Err(LexError { offset: start, ch: '"' });
            }
            i += 1;
            tokens.push(Token::new(&source[start..i], TokenKind::StringLit, (start, i)));
        } else if DELIMITERS.contains(&c) {
            i += 1;
            tokens.push(Token::new(&source[start..i], TokenKind::Delimiter, (start, i)));
        } else if let Some(op) = OPERATORS.iter().find(|op| source[i..].starts_with(**op)) {
            i += op.len();
            tokens.push(Token::new(*op, TokenKind::Operator, (start, i)));
        } else {
            return Err(LexError { offset: i, ch: c });
        }
    }
    Ok(tokens)
}

/// Lays tokens back out at their byte offsets, padding gaps with spaces.
pub fn render_tokens(tokens: &[Token]) -> String {
    let mut out = String::new();
    for t in tokens {
        while out.len() < t.byte_span.0 {
            out.push(' ');
        }
        out.push_str(&t.text);
    }
    out
}

/// A maximal identifier: the contiguous run of name pieces it was split into.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdentRun {
    pub start: usize,
    pub end: usize,
    pub name: String,
}

/// Groups name pieces back into identifiers using byte-span contiguity.
pub fn identifier_runs(tokens: &[Token]) -> Vec<IdentRun> {
    let mut runs: Vec<IdentRun> = Vec::new();
    for (i, t) in tokens.iter().enumerate() {
        if !t.kind.is_name_piece() {
            continue;
        }
        match runs.last_mut() {
            Some(run)
                if run.end == i
                    && t.kind == TokenKind::SubwordIdentifierPiece
                    && tokens[i - 1].kind == TokenKind::SubwordIdentifierPiece
                    && tokens[i - 1].byte_span.1 == t.byte_span.0 =>
            {
                run.end = i + 1;
                run.name.push_str(&t.text);
            }
            _ => runs.push(IdentRun {
                start: i,
                end: i + 1,
                name: t.text.clone(),
            }),
        }
    }
    runs
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NodeKind {
    Function,
    Block,
    VarDecl,
    Assign,
    If,
    While,
    Call,
    Return,
    BinaryOp,
    Literal,
    Name,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Node {
    pub kind: NodeKind,
    pub children: Vec<usize>,
    /// Half-open token index range.
    pub token_span: (usize, usize),
    pub parent: Option<usize>,
}

/// Arena AST. `Function` children are the function name, the parameters and
/// then the body statements; `If`/`While` bodies are `Block` nodes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ast {
    pub nodes: Vec<Node>,
    pub root: usize,
    pub tokens: Vec<Token>,
}

impl Ast {
    pub fn node(&self, id: usize) -> &Node {
        &self.nodes[id]
    }

    pub fn text_of(&self, id: usize) -> String {
        let (a, b) = self.nodes[id].token_span;
        self.tokens[a..b].iter().map(|t| t.text.as_str()).collect()
    }

    /// Number of leading `Function` children that are the name and parameters.
    pub fn header_len(&self) -> usize {
        self.nodes[self.root]
            .children
            .iter()
            .take_while(|&&c| self.nodes[c].kind == NodeKind::Name)
            .count()
    }

    pub fn body_statements(&self) -> &[usize] {
        &self.nodes[self.root].children[self.header_len()..]
    }

    /// `Name` nodes that are the declared variable of a `VarDecl`.
    pub fn declaration_targets(&self) -> Vec<usize> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.kind == NodeKind::VarDecl)
            .map(|(_, n)| n.children[0])
            .collect()
    }

    /// The declaration target whose token span contains `token_index`.
    pub fn declaration_target_at(&self, token_index: usize) -> Option<usize> {
        self.declaration_targets().into_iter().find(|&n| {
            let (a, b) = self.nodes[n].token_span;
            (a..b).contains(&token_index)
        })
    }
}

struct Parser<'a> {
    tokens: &'a [Token],
    pos: usize,
    nodes: Vec<Node>,
}

type PResult<T> = Result<T, ParseError>;

impl<'a> Parser<'a> {
    fn peek(&self) -> Option<&'a Token> {
        self.tokens.get(self.pos)
    }

    fn peek_text(&self) -> Option<&'a str> {
        self.peek().map(|t| t.text.as_str())
    }

    fn fail<T>(&self, expected: &[&str]) -> PResult<T> {
        Err(ParseError {
            token_index: self.pos,
            expected: expected.iter().map(|s| s.to_string()).collect(),
        })
    }

    fn expect(&mut self, text: &str) -> PResult<()> {
        match self.peek() {
            Some(t) if t.text == text && t.kind != TokenKind::StringLit => {
                self.pos += 1;
                Ok(())
            }
            _ => self.fail(&[text]),
        }
    }

    fn push(&mut self, kind: NodeKind, children: Vec<usize>, span: (usize, usize)) -> usize {
        let id = self.nodes.len();
        for &c in &children {
            self.nodes[c].parent = Some(id);
        }
        self.nodes.push(Node {
            kind,
            children,
            token_span: span,
            parent: None,
        });
        id
    }

    fn at_name(&self) -> bool {
        self.peek().is_some_and(|t| t.kind.is_name_piece())
    }

    fn name(&mut self) -> PResult<usize> {
        if !self.at_name() {
            return self.fail(&["identifier"]);
        }
        let start = self.pos;
        let first = &self.tokens[self.pos];
        self.pos += 1;
        if first.kind == TokenKind::SubwordIdentifierPiece {
            while let Some(t) = self.peek() {
                let prev = &self.tokens[self.pos - 1];
                if t.kind == TokenKind::SubwordIdentifierPiece && prev.byte_span.1 == t.byte_span.0
                {
                    self.pos += 1;
                } else {
                    break;
                }
            }
        }
        Ok(self.push(NodeKind::Name, vec![], (start, self.pos)))
    }

    fn function(&mut self) -> PResult<usize> {
        let start = self.pos;
        self.expect("fn")?;
        let mut children = vec![self.name()?];
        self.expect("(")?;
        if self.peek_text() != Some(")") {
            children.push(self.name()?);
            while self.peek_text() == Some(",") {
                self.pos += 1;
                children.push(self.name()?);
            }
        }
        self.expect(")")?;
        self.expect("{")?;
        while self.peek_text() != Some("}") {
            if self.peek().is_none() {
                return self.fail(&["}"]);
            }
            children.push(self.statement()?);
        }
        self.expect("}")?;
        if self.peek().is_some() {
            return Err(ParseError {
                token_index: self.pos,
                expected: vec!["end of input".into()],
            });
        }
        Ok(self.push(NodeKind::Function, children, (start, self.pos)))
    }

    fn block(&mut self) -> PResult<usize> {
        let start = self.pos;
        self.expect("{")?;
        let mut children = Vec::new();
        while self.peek_text() != Some("}") {
            if self.peek().is_none() {
                return self.fail(&["}"]);
            }
            children.push(self.statement()?);
        }
        self.expect("}")?;
        Ok(self.push(NodeKind::Block, children, (start, self.pos)))
    }

    fn statement(&mut self) -> PResult<usize> {
        let start = self.pos;
        let tok = match self.peek() {
            Some(t) => t,
            None => return self.fail(&["statement"]),
        };
        match (tok.kind, tok.text.as_str()) {
            (TokenKind::Keyword, "var") => {
                self.pos += 1;
                let target = self.name()?;
                self.expect("=")?;
                let init = self.expr()?;
                self.expect(";")?;
                Ok(self.push(NodeKind::VarDecl, vec![target, init], (start, self.pos)))
            }
            (TokenKind::Keyword, "if") => {
                self.pos += 1;
                self.expect("(")?;
                let cond = self.expr()?;
                self.expect(")")?;
                let mut children = vec![cond, self.block()?];
                if self.peek_text() == Some("else") {
                    self.pos += 1;
                    children.push(self.block()?);
                }
                Ok(self.push(NodeKind::If, children, (start, self.pos)))
            }
            (TokenKind::Keyword, "while") => {
                self.pos += 1;
                self.expect("(")?;
                let cond = self.expr()?;
                self.expect(")")?;
                let body = self.block()?;
                Ok(self.push(NodeKind::While, vec![cond, body], (start, self.pos)))
            }
            (TokenKind::Keyword, "return") => {
                self.pos += 1;
                let mut children = Vec::new();
                if self.peek_text() != Some(";") {
                    children.push(self.expr()?);
                }
                self.expect(";")?;
                Ok(self.push(NodeKind::Return, children, (start, self.pos)))
            }
            (TokenKind::ApiName, _) => {
                let call = self.call_from(start)?;
                self.expect(";")?;
                Ok(call)
            }
            (k, _) if k.is_name_piece() => {
                let name = self.name()?;
                if self.peek_text() == Some("(") {
                    let call = self.call_args(start, name)?;
                    self.expect(";")?;
                    Ok(call)
                } else {
                    self.expect("=")?;
                    let value = self.expr()?;
                    self.expect(";")?;
                    Ok(self.push(NodeKind::Assign, vec![name, value], (start, self.pos)))
                }
            }
            _ => self.fail(&["var", "if", "while", "return", "identifier"]),
        }
    }

    fn call_from(&mut self, start: usize) -> PResult<usize> {
        let callee = if self.peek().is_some_and(|t| t.kind == TokenKind::ApiName) {
            self.pos += 1;
            self.push(NodeKind::Name, vec![], (start, self.pos))
        } else {
            self.name()?
        };
        self.call_args(start, callee)
    }

    fn call_args(&mut self, start: usize, callee: usize) -> PResult<usize> {
        self.expect("(")?;
        let mut children = vec![callee];
        if self.peek_text() != Some(")") {
            children.push(self.expr()?);
            while self.peek_text() == Some(",") {
                self.pos += 1;
                children.push(self.expr()?);
            }
        }
        self.expect(")")?;
        Ok(self.push(NodeKind::Call, children, (start, self.pos)))
    }

    fn expr(&mut self) -> PResult<usize> {
        self.binary(0)
    }

    fn binary(&mut self, level: usize) -> PResult<usize> {
        const LEVELS: &[&[&str]] = &[
            &["||"],
            &["&&"],
            &["==", "!="],
            &["<", ">", "<=", ">="],
            &["+", "-"],
            &["*", "/"],
        ];
        if level == LEVELS.len() {
            return self.primary();
        }
        let start = self.pos;
        let mut lhs = self.binary(level + 1)?;
        while let Some(t) = self.peek() {
            if t.kind == TokenKind::Operator && LEVELS[level].contains(&t.text.as_str()) {
                self.pos += 1;
                let rhs = self.binary(level + 1)?;
                lhs = self.push(NodeKind::BinaryOp, vec![lhs, rhs], (start, self.pos));
            } else {
                break;
            }
        }
        Ok(lhs)
    }

    fn primary(&mut self) -> PResult<usize> {
        let start = self.pos;
        let tok = match self.peek() {
            Some(t) => t,
            None => return self.fail(&["expression"]),
        };
        if tok.kind.is_literal() {
            self.pos += 1;
            return Ok(self.push(NodeKind::Literal, vec![], (start, self.pos)));
        }
        if tok.kind == TokenKind::ApiName {
            return self.call_from(start);
        }
        if tok.kind.is_name_piece() {
            let name = self.name()?;
            if self.peek_text() == Some("(") {
                return self.call_args(start, name);
            }
            return Ok(name);
        }
        if tok.text == "(" && tok.kind == TokenKind::Delimiter {
            self.pos += 1;
            let inner = self.expr()?;
            self.expect(")")?;
            self.nodes[inner].token_span = (start, self.pos);
            return Ok(inner);
        }
        self.fail(&["literal", "identifier", "("])
    }
}

pub fn parse(tokens: &[Token]) -> Result<Ast, ParseError> {
    let mut p = Parser {
        tokens,
        pos: 0,
        nodes: Vec::new(),
    };
    let root = p.function()?;
    Ok(Ast {
        nodes: p.nodes,
        root,
        tokens: tokens.to_vec(),
    })
}

pub fn parse_source(source: &str) -> Result<Ast, crate::Error> {
    let tokens = tokenize(source)?;
    Ok(parse(&tokens)?)
}

/// One-hop AST neighbourhood of a declaration target: the token texts of
/// its `VarDecl` parent and of its siblings, minus the declared name.
pub fn ast_one_hop(ast: &Ast, node: usize) -> Result<Vec<String>, NotADeclaration> {
    let parent = ast
        .nodes
        .get(node)
        .and_then(|n| n.parent)
        .filter(|&p| ast.nodes[p].kind == NodeKind::VarDecl && ast.nodes[p].children[0] == node)
        .ok_or(NotADeclaration(node))?;
    let (a, b) = ast.nodes[parent].token_span;
    let (na, nb) = ast.nodes[node].token_span;
    Ok((a..b)
        .filter(|i| !(na..nb).contains(i))
        .map(|i| ast.tokens[i].text.clone())
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StmtKind {
    Decl,
    Assign,
    Call,
    Return,
    Branch,
    Loop,
    Alloc,
    Free,
    Lock,
    Unlock,
}

impl StmtKind {
    pub const ALL: [StmtKind; 10] = [
        StmtKind::Decl,
        StmtKind::Assign,
        StmtKind::Call,
        StmtKind::Return,
        StmtKind::Branch,
        StmtKind::Loop,
        StmtKind::Alloc,
        StmtKind::Free,
        StmtKind::Lock,
        StmtKind::Unlock,
    ];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StmtDescriptor {
    pub stmt_kind: StmtKind,
    /// AST node the descriptor was taken from.
    pub node: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cfg {
    pub blocks: Vec<Vec<StmtDescriptor>>,
    pub edges: Vec<(usize, usize)>,
    pub entry: usize,
    pub exit: usize,
}

impl Cfg {
    pub fn successors(&self, b: usize) -> impl Iterator<Item = usize> + '_ {
        self.edges.iter().filter(move |e| e.0 == b).map(|e| e.1)
    }
}

/// Classifies a straight-line statement; API calls anywhere inside it win.
fn classify(ast: &Ast, node: usize) -> StmtKind {
    let (a, b) = ast.nodes[node].token_span;
    for t in &ast.tokens[a..b] {
        if t.kind == TokenKind::ApiName {
            return match t.text.as_str() {
                "malloc" => StmtKind::Alloc,
                "free" => StmtKind::Free,
                "lock" => StmtKind::Lock,
                _ => StmtKind::Unlock,
            };
        }
    }
    match ast.nodes[node].kind {
        NodeKind::VarDecl => StmtKind::Decl,
        NodeKind::Assign => StmtKind::Assign,
        NodeKind::Return => StmtKind::Return,
        _ => StmtKind::Call,
    }
}

struct CfgBuilder<'a> {
    ast: &'a Ast,
    blocks: Vec<Vec<StmtDescriptor>>,
    edges: Vec<(usize, usize)>,
}

impl CfgBuilder<'_> {
    fn new_block(&mut self) -> usize {
        self.blocks.push(Vec::new());
        self.blocks.len() - 1
    }

    fn stmts(&mut self, stmts: &[usize], mut cur: usize) -> usize {
        for &s in stmts {
            cur = self.stmt(s, cur);
        }
        cur
    }

    fn stmt(&mut self, s: usize, cur: usize) -> usize {
        let node = &self.ast.nodes[s];
        match node.kind {
            NodeKind::If => {
                self.blocks[cur].push(StmtDescriptor {
                    stmt_kind: StmtKind::Branch,
                    node: s,
                });
                let then_b = self.new_block();
                self.edges.push((cur, then_b));
                let then_stmts = self.ast.nodes[node.children[1]].children.clone();
                let then_end = self.stmts(&then_stmts, then_b);
                let else_end = node.children.get(2).map(|&eb| {
                    let else_b = self.new_block();
                    self.edges.push((cur, else_b));
                    let else_stmts = self.ast.nodes[eb].children.clone();
                    self.stmts(&else_stmts, else_b)
                });
                let join = self.new_block();
                self.edges.push((then_end, join));
                self.edges.push((else_end.unwrap_or(cur), join));
                join
            }
            NodeKind::While => {
                let cond = self.new_block();
                self.edges.push((cur, cond));
                self.blocks[cond].push(StmtDescriptor {
                    stmt_kind: StmtKind::Loop,
                    node: s,
                });
                let body = self.new_block();
                self.edges.push((cond, body));
                let body_stmts = self.ast.nodes[node.children[1]].children.clone();
                let body_end = self.stmts(&body_stmts, body);
                self.edges.push((body_end, cond));
                let post = self.new_block();
                self.edges.push((cond, post));
                post
            }
            _ => {
                self.blocks[cur].push(StmtDescriptor {
                    stmt_kind: classify(self.ast, s),
                    node: s,
                });
                cur
            }
        }
    }
}

/// Builds the control-flow graph of the function body. `return` is treated
/// as an ordinary statement (the generator only emits it last).
pub fn build_cfg(ast: &Ast) -> Cfg {
    let mut b = CfgBuilder {
        ast,
        blocks: vec![Vec::new()],
        edges: Vec::new(),
    };
    let body = ast.body_statements().to_vec();
    let exit = b.stmts(&body, 0);
    Cfg {
        blocks: b.blocks,
        edges: b.edges,
        entry: 0,
        exit,
    }
}

/// Per-token lexical role, used for bias categories and the bias-only mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LexCategory {
    FunctionName,
    Identifier,
    MacroLike,
    Api,
    Keyword,
    Literal,
    Operator,
    Delimiter,
}

impl LexCategory {
    pub fn is_user_defined(self) -> bool {
        matches!(
            self,
            LexCategory::FunctionName | LexCategory::Identifier | LexCategory::MacroLike
        )
    }

    pub fn label(self) -> &'static str {
        match self {
            LexCategory::FunctionName => "function name",
            LexCategory::Identifier => "identifier",
            LexCategory::MacroLike => "macro-like",
            LexCategory::Api => "API",
            LexCategory::Keyword => "keyword",
            LexCategory::Literal => "literal",
            LexCategory::Operator => "operator",
            LexCategory::Delimiter => "delimiter",
        }
    }
}

pub fn lexical_categories(tokens: &[Token]) -> Vec<LexCategory> {
    let mut cats: Vec<LexCategory> = tokens
        .iter()
        .map(|t| match t.kind {
            TokenKind::Keyword => LexCategory::Keyword,
            TokenKind::ApiName => LexCategory::Api,
            TokenKind::NumberLit | TokenKind::StringLit | TokenKind::BoolLit => {
                LexCategory::Literal
            }
            TokenKind::Operator => LexCategory::Operator,
            TokenKind::Delimiter => LexCategory::Delimiter,
            TokenKind::Identifier | TokenKind::SubwordIdentifierPiece => LexCategory::Identifier,
        })
        .collect();
    let runs = identifier_runs(tokens);
    let fn_names: BTreeSet<&str> = runs
        .iter()
        .filter(|r| r.start > 0 && tokens[r.start - 1].text == "fn")
        .map(|r| r.name.as_str())
        .collect();
    for r in &runs {
        let macro_like = r.name.chars().any(|c| c.is_ascii_uppercase())
            && !r.name.chars().any(|c| c.is_ascii_lowercase());
        let cat = if fn_names.contains(r.name.as_str()) {
            LexCategory::FunctionName
        } else if macro_like {
            LexCategory::MacroLike
        } else {
            LexCategory::Identifier
        };
        cats[r.start..r.end].iter_mut().for_each(|c| *c = cat);
    }
    cats
}

/// Token indices belonging to declared names: the function name, parameters
/// and `var` targets, including later uses of those names.
pub fn declared_name_tokens(tokens: &[Token]) -> BTreeSet<usize> {
    let runs = identifier_runs(tokens);
    let mut declared = BTreeSet::new();
    let mut in_header = false;
    for r in &runs {
        let prev = r.start.checked_sub(1).map(|p| tokens[p].text.as_str());
        if prev == Some("fn") {
            in_header = true;
            declared.insert(r.name.clone());
        } else if prev == Some("var") || (in_header && matches!(prev, Some("(") | Some(","))) {
            declared.insert(r.name.clone());
        }
        if in_header && tokens.get(r.end).is_some_and(|t| t.text == ")") {
            in_header = false;
        }
    }
    runs.iter()
        .filter(|r| declared.contains(&r.name))
        .flat_map(|r| r.start..r.end)
        .collect()
}
