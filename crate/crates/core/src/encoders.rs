//! Text, molecular-graph and fusion encoders built on the tensor tape.
//!
//! Parameters live in a [`ParamStore`] under fixed names (`text.*`,
//! `graph.*`, `fusion.*`); the forward functions here only read them.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, RngExt};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labeler::tokenize;
use crate::molecule::IndexedGraph;
use crate::tensor::{ParamStore, Tape, Tensor, TensorError, Var};

pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";
pub const MARKER: &str = "*";

const SPECIALS: [&str; 5] = [UNK, CLS, SEP, MASK, MARKER];
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },
}

pub type Result<T> = std::result::Result<T, ModelError>;

fn contract<T>(msg: impl Into<String>) -> Result<T> {
    Err(ModelError::Contract(msg.into()))
}

/// Lowercased word vocabulary with the special tokens at fixed indices.
#[derive(Debug, Clone, PartialEq)]
pub struct TextVocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for TextVocab {
    fn default() -> Self {
        Self::new()
    }
}

impl TextVocab {
    pub fn new() -> Self {
        let mut v = Self {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for s in SPECIALS {
            v.push(s.to_string());
        }
        v
    }

    fn push(&mut self, tok: String) -> usize {
        if let Some(&i) = self.index.get(&tok) {
            return i;
        }
        self.index.insert(tok.clone(), self.tokens.len());
        self.tokens.push(tok);
        self.tokens.len() - 1
    }

    pub fn insert(&mut self, token: &str) -> usize {
        self.push(token.to_lowercase())
    }

    /// Adds every token of `text` under the shared tokenizer.
    pub fn add_text(&mut self, text: &str) {
        for t in tokenize(text) {
            self.insert(&t.text);
        }
    }

    pub fn id(&self, token: &str) -> usize {
        self.index
            .get(&token.to_lowercase())
            .copied()
            .unwrap_or(0)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn unk(&self) -> usize {
        0
    }
    pub fn cls(&self) -> usize {
        1
    }
    pub fn sep(&self) -> usize {
        2
    }
    pub fn mask(&self) -> usize {
        3
    }
    pub fn marker(&self) -> usize {
        4
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        fs::write(path, s).map_err(|source| ModelError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Reads one token per line; the first lines must be the special tokens.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| ModelError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err(ModelError::Format {
                path: path.to_path_buf(),
                detail: format!("vocabulary must start with {SPECIALS:?}"),
            });
        }
        let mut v = Self::new();
        for t in tokens.into_iter().skip(SPECIALS.len()) {
            if v.index.contains_key(&t) {
                return Err(ModelError::Format {
                    path: path.to_path_buf(),
                    detail: format!("duplicate token {t:?}"),
                });
            }
            v.push(t);
        }
        Ok(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub d: usize,
    pub text_layers: usize,
    pub heads: usize,
    /// Feed-forward width as a multiple of `d`.
    pub ffn_mult: usize,
    pub gin_layers: usize,
    pub epsilon: f64,
    pub max_len: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d: 64,
            text_layers: 2,
            heads: 4,
            ffn_mult: 4,
            gin_layers: 3,
            epsilon: 0.0,
            max_len: 128,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || self.d % self.heads != 0 {
            return contract(format!(
                "d = {} must be positive and divisible by heads = {}",
                self.d, self.heads
            ));
        }
        if self.ffn_mult == 0 {
            return contract("ffn_mult must be positive");
        }
        if self.gin_layers == 0 {
            return contract("at least one GIN layer is required");
        }
        if self.max_len < 3 {
            return contract("max_len must leave room for [CLS], one token and [SEP]");
        }
        if !self.epsilon.is_finite() {
            return contract("epsilon must be finite");
        }
        Ok(())
    }
}

/// Token ids of one encoder input plus the position whose output is read
/// off (opening marker, [MASK], or [CLS]).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedText {
    pub ids: Vec<usize>,
    pub focus: usize,
}

impl TokenizedText {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

fn wrap(vocab: &TextVocab, mut body: Vec<usize>, keep: usize, focus: usize, max_len: usize) -> Result<TokenizedText> {
    let room = max_len - 2;
    if body.len() > room {
        if keep > room {
            return contract(format!(
                "mention ends at position {keep} but only {room} tokens fit in max_len {max_len}"
            ));
        }
        body.truncate(room);
    }
    let mut ids = Vec::with_capacity(body.len() + 2);
    ids.push(vocab.cls());
    ids.extend(body);
    ids.push(vocab.sep());
    Ok(TokenizedText { ids, focus: focus + 1 })
}

fn check_span(tokens: &[String], start: usize, end: usize) -> Result<()> {
    if start >= end || end > tokens.len() {
        return contract(format!(
            "mention span {start}..{end} invalid for {} tokens",
            tokens.len()
        ));
    }
    Ok(())
}

/// `[CLS] … * mention * … [SEP]`; focus is the opening marker.
pub fn marked_sequence(
    vocab: &TextVocab,
    tokens: &[String],
    start: usize,
    end: usize,
    max_len: usize,
) -> Result<TokenizedText> {
    check_span(tokens, start, end)?;
    let mut body: Vec<usize> = tokens[..start].iter().map(|t| vocab.id(t)).collect();
    body.push(vocab.marker());
    body.extend(tokens[start..end].iter().map(|t| vocab.id(t)));
    body.push(vocab.marker());
    let keep = body.len();
    body.extend(tokens[end..].iter().map(|t| vocab.id(t)));
    wrap(vocab, body, keep, start, max_len)
}

/// `[CLS] … [MASK] … [SEP]` with the whole mention replaced by one mask.
pub fn masked_sequence(
    vocab: &TextVocab,
    tokens: &[String],
    start: usize,
    end: usize,
    max_len: usize,
) -> Result<TokenizedText> {
    check_span(tokens, start, end)?;
    let mut body: Vec<usize> = tokens[..start].iter().map(|t| vocab.id(t)).collect();
    body.push(vocab.mask());
    let keep = body.len();
    body.extend(tokens[end..].iter().map(|t| vocab.id(t)));
    wrap(vocab, body, keep, start, max_len)
}

/// Description tokens wrapped in `[CLS]`/`[SEP]`; focus is `[CLS]`.
pub fn description_sequence(vocab: &TextVocab, text: &str, max_len: usize) -> TokenizedText {
    let mut ids = vec![vocab.cls()];
    ids.extend(
        tokenize(text)
            .iter()
            .take(max_len - 2)
            .map(|t| vocab.id(&t.text)),
    );
    ids.push(vocab.sep());
    TokenizedText { ids, focus: 0 }
}

/// `PE[p, 2i] = sin(p / 10000^(2i/d))`, `PE[p, 2i+1] = cos(…)`.
pub fn sinusoidal_positions(len: usize, d: usize) -> Tensor {
    let mut data = Vec::with_capacity(len * d);
    for p in 0..len {
        for j in 0..d {
            let i2 = (j / 2 * 2) as f64;
            let angle = p as f64 / 10000f64.powf(i2 / d as f64);
            data.push(if j % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::matrix(len, d, data).expect("positive dims")
}

fn uniform(rng: &mut impl Rng, shape: &[usize], bound: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("positive dims")
}

fn xavier(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    uniform(rng, &[rows, cols], (6.0 / (rows + cols) as f64).sqrt())
}

fn zeros(n: usize) -> Tensor {
    Tensor::vector(vec![0.0; n]).expect("positive dims")
}

fn ones(n: usize) -> Tensor {
    Tensor::vector(vec![1.0; n]).expect("positive dims")
}

/// Registers one post-LN transformer layer under `prefix`.
pub fn register_transformer_layer(
    store: &mut ParamStore,
    prefix: &str,
    d: usize,
    ffn: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    for w in ["wq", "wk", "wv", "wo"] {
        store.register(format!("{prefix}.{w}"), xavier(rng, d, d))?;
    }
    for b in ["bq", "bk", "bv", "bo"] {
        store.register(format!("{prefix}.{b}"), zeros(d))?;
    }
    store.register(format!("{prefix}.ln1_g"), ones(d))?;
    store.register(format!("{prefix}.ln1_b"), zeros(d))?;
    store.register(format!("{prefix}.ff_w1"), xavier(rng, d, ffn))?;
    store.register(format!("{prefix}.ff_b1"), zeros(ffn))?;
    store.register(format!("{prefix}.ff_w2"), xavier(rng, ffn, d))?;
    store.register(format!("{prefix}.ff_b2"), zeros(d))?;
    store.register(format!("{prefix}.ln2_g"), ones(d))?;
    store.register(format!("{prefix}.ln2_b"), zeros(d))?;
    Ok(())
}

pub fn register_text_params(
    store: &mut ParamStore,
    cfg: &EncoderConfig,
    vocab_size: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    store.register("text.tok_emb", uniform(rng, &[vocab_size, cfg.d], 1.0))?;
    for l in 0..cfg.text_layers {
        register_transformer_layer(store, &format!("text.layer{l}"), cfg.d, cfg.ffn_mult * cfg.d, rng)?;
    }
    Ok(())
}

pub fn register_graph_params(
    store: &mut ParamStore,
    cfg: &EncoderConfig,
    atom_types: usize,
    bond_types: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    let d = cfg.d;
    store.register("graph.atom_emb", uniform(rng, &[atom_types, d], 1.0))?;
    store.register("graph.bond_emb", uniform(rng, &[bond_types, d], 1.0))?;
    for l in 0..cfg.gin_layers {
        store.register(format!("graph.gin{l}.w1"), xavier(rng, d, 2 * d))?;
        store.register(format!("graph.gin{l}.b1"), zeros(2 * d))?;
        store.register(format!("graph.gin{l}.w2"), xavier(rng, 2 * d, d))?;
        store.register(format!("graph.gin{l}.b2"), zeros(d))?;
    }
    Ok(())
}

pub fn register_fusion_params(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut impl Rng) -> Result<()> {
    register_transformer_layer(store, "fusion", cfg.d, cfg.ffn_mult * cfg.d, rng)
}

/// Overwrites rows of `text.tok_emb` from a whitespace-separated
/// `token v1 … vd` file. Returns how many vocabulary rows were set.
pub fn load_pretrained_embeddings(path: &Path, vocab: &TextVocab, store: &mut ParamStore) -> Result<usize> {
    let text = fs::read_to_string(path).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let table = store
        .get_mut("text.tok_emb")
        .ok_or_else(|| ModelError::Contract("text.tok_emb is not registered".into()))?;
    let d = table.cols();
    let mut set = 0;
    for (n, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        let Some(tok) = parts.next() else { continue };
        let values: std::result::Result<Vec<f64>, _> = parts.map(str::parse::<f64>).collect();
        let values = values.map_err(|e| ModelError::Format {
            path: path.to_path_buf(),
            detail: format!("line {}: {e}", n + 1),
        })?;
        if values.len() != d {
            return Err(ModelError::Format {
                path: path.to_path_buf(),
                detail: format!("line {}: expected {d} values, found {}", n + 1, values.len()),
            });
        }
        let id = vocab.id(tok);
        if id == vocab.unk() && tok != UNK {
            continue;
        }
        table.data_mut()[id * d..(id + 1) * d].copy_from_slice(&values);
        set += 1;
    }
    Ok(set)
}

fn p(tape: &Tape, store: &ParamStore, name: &str) -> Result<Var> {
    Ok(tape.param(store, name)?)
}

fn affine(tape: &Tape, store: &ParamStore, x: Var, w: &str, b: &str) -> Result<Var> {
    let y = tape.matmul(x, p(tape, store, w)?)?;
    Ok(tape.add(y, p(tape, store, b)?)?)
}

/// Multi-head self-attention, residual + LN, GELU feed-forward, residual + LN.
pub fn transformer_layer(tape: &Tape, store: &ParamStore, prefix: &str, x: Var, heads: usize) -> Result<Var> {
    let d = tape.shape(x)[1];
    if d % heads != 0 {
        return contract(format!("width {d} not divisible by {heads} heads"));
    }
    let dh = d / heads;
    let q = affine(tape, store, x, &format!("{prefix}.wq"), &format!("{prefix}.bq"))?;
    let k = affine(tape, store, x, &format!("{prefix}.wk"), &format!("{prefix}.bk"))?;
    let v = affine(tape, store, x, &format!("{prefix}.wv"), &format!("{prefix}.bv"))?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let scores = tape.scale(tape.matmul(qh, tape.transpose(kh)?)?, scale);
        outs.push(tape.matmul(tape.softmax_rows(scores), vh)?);
    }
    let attn = if heads == 1 { outs[0] } else { tape.concat(&outs)? };
    let attn = affine(tape, store, attn, &format!("{prefix}.wo"), &format!("{prefix}.bo"))?;
    let x1 = tape.layer_norm(
        tape.add(x, attn)?,
        p(tape, store, &format!("{prefix}.ln1_g"))?,
        p(tape, store, &format!("{prefix}.ln1_b"))?,
        LN_EPS,
    )?;
    let hidden = tape.gelu(affine(tape, store, x1, &format!("{prefix}.ff_w1"), &format!("{prefix}.ff_b1"))?);
    let ff = affine(tape, store, hidden, &format!("{prefix}.ff_w2"), &format!("{prefix}.ff_b2"))?;
    Ok(tape.layer_norm(
        tape.add(x1, ff)?,
        p(tape, store, &format!("{prefix}.ln2_g"))?,
        p(tape, store, &format!("{prefix}.ln2_b"))?,
        LN_EPS,
    )?)
}

/// Token embedding + sinusoidal positions + the text transformer stack.
/// Returns the `z × d` output matrix.
pub fn encode_tokens(tape: &Tape, store: &ParamStore, cfg: &EncoderConfig, text: &TokenizedText) -> Result<Var> {
    if text.is_empty() || text.len() > cfg.max_len {
        return contract(format!("token sequence length {} outside 1..={}", text.len(), cfg.max_len));
    }
    let emb = tape.embedding(p(tape, store, "text.tok_emb")?, &text.ids)?;
    let pos = tape.constant(sinusoidal_positions(text.len(), cfg.d));
    let mut x = tape.add(emb, pos)?;
    for l in 0..cfg.text_layers {
        x = transformer_layer(tape, store, &format!("text.layer{l}"), x, cfg.heads)?;
    }
    Ok(x)
}

/// Output row at the sequence's focus position.
pub fn encode_focus(tape: &Tape, store: &ParamStore, cfg: &EncoderConfig, text: &TokenizedText) -> Result<Var> {
    let out = encode_tokens(tape, store, cfg, text)?;
    Ok(tape.row(out, text.focus)?)
}

#[derive(Debug, Clone, Copy)]
pub struct EncodedMention {
    pub m: Var,
    pub m_mask: Var,
    pub m_l: Var,
}

pub fn encode_context(
    tape: &Tape,
    store: &ParamStore,
    cfg: &EncoderConfig,
    marked: &TokenizedText,
    masked: &TokenizedText,
) -> Result<EncodedMention> {
    let m = encode_focus(tape, store, cfg, marked)?;
    let m_mask = encode_focus(tape, store, cfg, masked)?;
    let m_l = tape.concat(&[m, m_mask])?;
    Ok(EncodedMention { m, m_mask, m_l })
}

#[derive(Debug, Clone, Copy)]
pub struct EncodedDescription {
    /// `b × d` token outputs.
    pub rows: Var,
    pub d_cls: Var,
}

pub fn encode_description(
    tape: &Tape,
    store: &ParamStore,
    cfg: &EncoderConfig,
    text: &TokenizedText,
) -> Result<EncodedDescription> {
    let rows = encode_tokens(tape, store, cfg, text)?;
    let d_cls = tape.row(rows, text.focus)?;
    Ok(EncodedDescription { rows, d_cls })
}

#[derive(Debug, Clone)]
pub struct GraphEncoding {
    /// `a × d` final node states.
    pub nodes: Var,
    /// Node states after each layer, input embeddings first.
    pub layers: Vec<Var>,
    /// `bonds × d` edge embeddings, absent for a bond-free graph.
    pub edges: Option<Var>,
    pub epsilon: f64,
}

/// GIN with edge features. Each layer forms
/// `(1+ε)·n_i + Σ_{j∈N(i)} (n_j + e_ji)` as `(1+ε)N + A·N + M·E` with the
/// adjacency `A` and node-bond incidence `M` held as constants, then applies
/// a two-layer tanh feed-forward block.
pub fn encode_graph(tape: &Tape, store: &ParamStore, cfg: &EncoderConfig, graph: &IndexedGraph) -> Result<GraphEncoding> {
    let a = graph.atom_count();
    if a == 0 {
        return contract("cannot encode an empty graph");
    }
    let nb = graph.bond_endpoints.len();
    if graph.bond_types.len() != nb {
        return contract("bond type and endpoint counts differ");
    }
    let mut adj = vec![0.0; a * a];
    let mut inc = vec![0.0; a * nb.max(1)];
    for (b, &(i, j)) in graph.bond_endpoints.iter().enumerate() {
        if i >= a || j >= a {
            return contract(format!("bond {b} references atom outside 0..{a}"));
        }
        adj[i * a + j] += 1.0;
        adj[j * a + i] += 1.0;
        inc[i * nb + b] += 1.0;
        inc[j * nb + b] += 1.0;
    }
    let adj = tape.constant(Tensor::matrix(a, a, adj)?);
    let mut n = tape.embedding(p(tape, store, "graph.atom_emb")?, &graph.atom_types)?;
    let edges = if nb > 0 {
        Some(tape.embedding(p(tape, store, "graph.bond_emb")?, &graph.bond_types)?)
    } else {
        None
    };
    let edge_sum = match edges {
        Some(e) => Some(tape.matmul(tape.constant(Tensor::matrix(a, nb, inc)?), e)?),
        None => None,
    };
    let mut layers = vec![n];
    for l in 0..cfg.gin_layers {
        let mut agg = tape.add(tape.scale(n, 1.0 + cfg.epsilon), tape.matmul(adj, n)?)?;
        if let Some(es) = edge_sum {
            agg = tape.add(agg, es)?;
        }
        let h = tape.tanh(affine(tape, store, agg, &format!("graph.gin{l}.w1"), &format!("graph.gin{l}.b1"))?);
        n = affine(tape, store, h, &format!("graph.gin{l}.w2"), &format!("graph.gin{l}.b2"))?;
        layers.push(n);
    }
    Ok(GraphEncoding {
        nodes: n,
        layers,
        edges,
        epsilon: cfg.epsilon,
    })
}

/// Mean of the node rows.
pub fn graph_pool(tape: &Tape, graph: &GraphEncoding) -> Result<Var> {
    Ok(tape.mean(graph.nodes, 0)?)
}

#[derive(Debug, Clone, Copy)]
pub struct DefinitionFeatures {
    pub f_cm: Var,
    pub f_g: Var,
    pub d_cls: Var,
    pub f: Var,
}

/// One self-attention layer over `vstack(N, D)` without positional terms;
/// `f_cm` is the mean of its output rows.
pub fn fuse_cross_modal(
    tape: &Tape,
    store: &ParamStore,
    cfg: &EncoderConfig,
    nodes: Var,
    desc: &EncodedDescription,
) -> Result<DefinitionFeatures> {
    let dn = tape.shape(nodes);
    let dd = tape.shape(desc.rows);
    if dn.len() != 2 || dd.len() != 2 || dn[1] != dd[1] || dn[1] != cfg.d {
        return contract(format!(
            "modality widths differ: nodes {dn:?}, description {dd:?}, d = {}",
            cfg.d
        ));
    }
    let x = tape.vstack(&[nodes, desc.rows])?;
    let out = transformer_layer(tape, store, "fusion", x, cfg.heads)?;
    let f_cm = tape.mean(out, 0)?;
    let f_g = tape.mean(nodes, 0)?;
    let f = tape.concat(&[f_cm, f_g, desc.d_cls])?;
    Ok(DefinitionFeatures {
        f_cm,
        f_g,
        d_cls: desc.d_cls,
        f,
    })
}
