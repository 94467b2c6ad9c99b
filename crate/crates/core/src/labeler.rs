//! Distant supervision by dictionary matching.
//!
//! Text is split into sentences (newline, or a period followed by
//! whitespace), tokenized with chemistry-aware punctuation handling, and
//! tagged by greedy left-to-right longest match against a
//! [`TypedEntityDictionary`]. Offsets are in characters, not bytes.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ontology::{FineGrainedType, LabelSpace, TypedEntityDictionary};

/// Recorded alongside labeled output so fixtures stay comparable.
pub const SENTENCE_SPLITTER: &str = "newline-or-period-whitespace/v1";

#[derive(Debug, Error)]
pub enum LabelError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("format error in {path} line {line}: {detail}")]
    Format {
        path: String,
        line: usize,
        detail: String,
    },
    #[error("passes cover different documents: only in first {only_a:?}, only in second {only_b:?}")]
    Alignment {
        only_a: Vec<String>,
        only_b: Vec<String>,
    },
    #[error("invalid sentence: {0}")]
    Invalid(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> LabelError + '_ {
    move |source| LabelError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "(String, usize, usize)", into = "(String, usize, usize)")]
pub struct Token {
    pub text: String,
    /// Character offset of the first character.
    pub start: usize,
    /// Character offset one past the last character.
    pub end: usize,
}

impl From<(String, usize, usize)> for Token {
    fn from((text, start, end): (String, usize, usize)) -> Self {
        Token { text, start, end }
    }
}

impl From<Token> for (String, usize, usize) {
    fn from(t: Token) -> Self {
        (t.text, t.start, t.end)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MentionSpan {
    #[serde(rename = "start_tok")]
    pub token_start: usize,
    /// Exclusive.
    #[serde(rename = "end_tok")]
    pub token_end: usize,
    pub surface: String,
    #[serde(default)]
    pub labels: BTreeSet<FineGrainedType>,
}

impl MentionSpan {
    /// Label indices in `space`; labels outside it are dropped.
    pub fn label_indices(&self, space: &LabelSpace) -> Vec<usize> {
        self.labels.iter().filter_map(|t| space.index_of(t)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedSentence {
    pub doc_id: String,
    pub text: String,
    pub tokens: Vec<Token>,
    #[serde(default)]
    pub mentions: Vec<MentionSpan>,
}

/// Substring by character offsets.
pub fn char_slice(text: &str, start: usize, end: usize) -> &str {
    let mut idx = text.char_indices().map(|(i, _)| i).chain(std::iter::once(text.len()));
    let b0 = idx.nth(start).unwrap_or(text.len());
    let b1 = if end > start {
        idx.nth(end - start - 1).unwrap_or(text.len())
    } else {
        b0
    };
    &text[b0..b1]
}

impl AnnotatedSentence {
    pub fn token_texts(&self) -> Vec<&str> {
        self.tokens.iter().map(|t| t.text.as_str()).collect()
    }

    /// Text covered by tokens `start..end`.
    pub fn span_text(&self, start: usize, end: usize) -> &str {
        char_slice(&self.text, self.tokens[start].start, self.tokens[end - 1].end)
    }

    /// Checks offsets, span bounds and mention non-overlap.
    pub fn validate(&self) -> Result<(), LabelError> {
        let n_chars = self.text.chars().count();
        let mut last_end = 0;
        for (i, t) in self.tokens.iter().enumerate() {
            if t.start >= t.end || t.end > n_chars || t.start < last_end {
                return Err(LabelError::Invalid(format!(
                    "token {i} `{}` has bad offsets {}..{}",
                    t.text, t.start, t.end
                )));
            }
            last_end = t.end;
        }
        let mut spans: Vec<_> = self.mentions.iter().map(|m| (m.token_start, m.token_end)).collect();
        spans.sort();
        for (i, &(s, e)) in spans.iter().enumerate() {
            if s >= e || e > self.tokens.len() {
                return Err(LabelError::Invalid(format!(
                    "mention span {s}..{e} outside {} tokens",
                    self.tokens.len()
                )));
            }
            if i > 0 && spans[i - 1].1 > s {
                return Err(LabelError::Invalid(format!("overlapping mentions at token {s}")));
            }
        }
        Ok(())
    }
}

fn closer_for(c: char) -> Option<char> {
    match c {
        '(' => Some(')'),
        '[' => Some(']'),
        '{' => Some('}'),
        _ => None,
    }
}

fn is_closer(c: char) -> bool {
    matches!(c, ')' | ']' | '}')
}

/// Punctuation split from a token's edges when it is not a bracket.
fn is_edge_punct(c: char) -> bool {
    matches!(c, '.' | ',' | ';' | ':' | '!' | '?' | '"' | '\'' | '`')
}

/// Index of the bracket closing the opener at `lo`, searching `lo..hi`.
fn matching_close(chars: &[char], lo: usize, hi: usize) -> Option<usize> {
    let open = chars[lo];
    let close = closer_for(open)?;
    let mut depth = 0usize;
    for (i, &c) in chars.iter().enumerate().take(hi).skip(lo) {
        if c == open {
            depth += 1;
        } else if c == close {
            depth -= 1;
            if depth == 0 {
                return Some(i);
            }
        }
    }
    None
}

/// Whether the closer at `at` has a matching opener in `lo..at`.
fn has_matching_open(chars: &[char], lo: usize, at: usize) -> bool {
    let close = chars[at];
    let open = match close {
        ')' => '(',
        ']' => '[',
        '}' => '{',
        _ => return false,
    };
    let mut depth = 0usize;
    for i in (lo..at).rev() {
        if chars[i] == close {
            depth += 1;
        } else if chars[i] == open {
            if depth == 0 {
                return true;
            }
            depth -= 1;
        }
    }
    false
}

fn split_run(chars: &[char], base: usize, out: &mut Vec<Token>) {
    let (mut lo, mut hi) = (0, chars.len());
    let mut trailing = Vec::new();
    let single = |i: usize| Token {
        text: chars[i].to_string(),
        start: base + i,
        end: base + i + 1,
    };
    while hi > lo && is_edge_punct(chars[hi - 1]) {
        trailing.push(single(hi - 1));
        hi -= 1;
    }
    while lo < hi {
        let c = chars[lo];
        if closer_for(c).is_some() {
            match matching_close(chars, lo, hi) {
                Some(m) if m == hi - 1 => {
                    // Fully wrapped: "(water)".
                    out.push(single(lo));
                    trailing.push(single(hi - 1));
                    lo += 1;
                    hi -= 1;
                }
                Some(_) => break,
                None => {
                    out.push(single(lo));
                    lo += 1;
                }
            }
        } else if is_edge_punct(c) || is_closer(c) {
            out.push(single(lo));
            lo += 1;
        } else {
            break;
        }
    }
    while hi > lo {
        let c = chars[hi - 1];
        if (is_closer(c) && !has_matching_open(chars, lo, hi - 1))
            || is_edge_punct(c)
            || (closer_for(c).is_some())
        {
            trailing.push(single(hi - 1));
            hi -= 1;
        } else {
            break;
        }
    }
    if lo < hi {
        out.push(Token {
            text: chars[lo..hi].iter().collect(),
            start: base + lo,
            end: base + hi,
        });
    }
    out.extend(trailing.into_iter().rev());
}

/// Whitespace split, then surrounding punctuation split off. Brackets and
/// punctuation inside a run stay attached, so systematic names survive as one
/// token.
pub fn tokenize(text: &str) -> Vec<Token> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        if chars[i].is_whitespace() {
            i += 1;
            continue;
        }
        let start = i;
        while i < chars.len() && !chars[i].is_whitespace() {
            i += 1;
        }
        split_run(&chars[start..i], start, &mut out);
    }
    out
}

/// Sentence boundaries as character ranges, trimmed, empty ones dropped.
pub fn split_sentences(text: &str) -> Vec<(usize, usize)> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut start = 0;
    let push = |s: usize, e: usize, out: &mut Vec<(usize, usize)>| {
        let mut s = s;
        let mut e = e;
        while s < e && chars[s].is_whitespace() {
            s += 1;
        }
        while e > s && chars[e - 1].is_whitespace() {
            e -= 1;
        }
        if s < e {
            out.push((s, e));
        }
    };
    for i in 0..chars.len() {
        if chars[i] == '\n' {
            push(start, i, &mut out);
            start = i + 1;
        } else if chars[i] == '.' && chars.get(i + 1).is_some_and(|c| c.is_whitespace()) {
            push(start, i + 1, &mut out);
            start = i + 1;
        }
    }
    push(start, chars.len(), &mut out);
    out
}

/// Greedy longest match over lowercase token n-grams.
pub fn tag(doc_id: &str, text: &str, tokens: Vec<Token>, dict: &TypedEntityDictionary) -> AnnotatedSentence {
    let max_n = dict.max_key_words();
    let lowered: Vec<String> = tokens.iter().map(|t| t.text.to_lowercase()).collect();
    let mut mentions = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        let mut matched = None;
        for n in (1..=max_n.min(tokens.len() - i)).rev() {
            let key = lowered[i..i + n].join(" ");
            if let Some(types) = dict.get_normalized(&key) {
                matched = Some((n, types.clone()));
                break;
            }
        }
        match matched {
            Some((n, labels)) => {
                mentions.push(MentionSpan {
                    token_start: i,
                    token_end: i + n,
                    surface: char_slice(text, tokens[i].start, tokens[i + n - 1].end).to_string(),
                    labels,
                });
                i += n;
            }
            None => i += 1,
        }
    }
    AnnotatedSentence {
        doc_id: doc_id.to_string(),
        text: text.to_string(),
        tokens,
        mentions,
    }
}

/// Tokenize and tag one sentence.
pub fn tag_text(doc_id: &str, text: &str, dict: &TypedEntityDictionary) -> AnnotatedSentence {
    tag(doc_id, text, tokenize(text), dict)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub text: String,
}

/// Splits each document into sentences and tags them.
pub fn label_documents(docs: &[Document], dict: &TypedEntityDictionary) -> Vec<AnnotatedSentence> {
    let mut out = Vec::new();
    for d in docs {
        for (s, e) in split_sentences(&d.text) {
            out.push(tag_text(&d.doc_id, char_slice(&d.text, s, e), dict));
        }
    }
    out
}

/// A directory of text files (one document each, id = file stem, sorted), or
/// a JSONL file of `{doc_id, text}`.
pub fn read_corpus(path: &Path) -> Result<Vec<Document>, LabelError> {
    if path.is_dir() {
        let mut files: Vec<_> = fs::read_dir(path)
            .map_err(io_err(path))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file())
            .collect();
        files.sort();
        files
            .into_iter()
            .map(|p| {
                let text = fs::read_to_string(&p).map_err(io_err(&p))?;
                let doc_id = p
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default();
                Ok(Document { doc_id, text })
            })
            .collect()
    } else {
        read_jsonl(path)
    }
}

pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, LabelError> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| LabelError::Format {
            path: path.display().to_string(),
            line: i + 1,
            detail: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), LabelError> {
    let mut f = std::io::BufWriter::new(fs::File::create(path).map_err(io_err(path))?);
    for r in rows {
        let line = serde_json::to_string(r).expect("serializable rows");
        writeln!(f, "{line}").map_err(io_err(path))?;
    }
    f.flush().map_err(io_err(path))
}

/// Reads labeled sentences and validates each one.
pub fn read_sentences(path: &Path) -> Result<Vec<AnnotatedSentence>, LabelError> {
    let rows: Vec<AnnotatedSentence> = read_jsonl(path)?;
    for s in &rows {
        s.validate()?;
    }
    Ok(rows)
}

/// Micro F1 of `pass_a` against `pass_b` as gold. Mentions match when the
/// document, sentence position, token span and full label set agree.
pub fn pass_agreement_f1(pass_a: &[AnnotatedSentence], pass_b: &[AnnotatedSentence]) -> Result<f64, LabelError> {
    let docs = |p: &[AnnotatedSentence]| -> BTreeSet<String> { p.iter().map(|s| s.doc_id.clone()).collect() };
    let (da, db) = (docs(pass_a), docs(pass_b));
    if da != db {
        return Err(LabelError::Alignment {
            only_a: da.difference(&db).cloned().collect(),
            only_b: db.difference(&da).cloned().collect(),
        });
    }
    type Key = (String, usize, usize, usize, BTreeSet<FineGrainedType>);
    let keys = |p: &[AnnotatedSentence]| -> BTreeSet<Key> {
        let mut ordinal: HashMap<&str, usize> = HashMap::new();
        let mut out = BTreeSet::new();
        for s in p {
            let k = ordinal.entry(&s.doc_id).or_insert(0);
            for m in &s.mentions {
                out.insert((s.doc_id.clone(), *k, m.token_start, m.token_end, m.labels.clone()));
            }
            *k += 1;
        }
        out
    };
    let (ka, kb) = (keys(pass_a), keys(pass_b));
    let tp = ka.intersection(&kb).count() as f64;
    let denom = ka.len() as f64 + kb.len() as f64;
    Ok(if denom == 0.0 { 0.0 } else { 2.0 * tp / denom })
}

/// Per-split counts written next to labeled output.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelSummary {
    pub splitter: String,
    pub documents: usize,
    pub sentences: usize,
    pub mentions: usize,
    pub mentions_per_type: BTreeMap<String, usize>,
}

pub fn summarize(docs: usize, sentences: &[AnnotatedSentence]) -> LabelSummary {
    let mut per_type = BTreeMap::new();
    for m in sentences.iter().flat_map(|s| &s.mentions) {
        for l in &m.labels {
            *per_type.entry(l.to_string()).or_insert(0) += 1;
        }
    }
    LabelSummary {
        splitter: SENTENCE_SPLITTER.to_string(),
        documents: docs,
        sentences: sentences.len(),
        mentions: sentences.iter().map(|s| s.mentions.len()).sum(),
        mentions_per_type: per_type,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn texts(s: &str) -> Vec<String> {
        tokenize(s).into_iter().map(|t| t.text).collect()
    }

    fn ty(s: &str) -> FineGrainedType {
        s.parse().unwrap()
    }

    #[test]
    fn tokenizer_examples() {
        assert_eq!(texts("water (20 mL)"), ["water", "(", "20", "mL", ")"]);
        assert_eq!(texts("2-bromo-5-(trifluoromethyl)"), ["2-bromo-5-(trifluoromethyl)"]);
        assert!(texts("").is_empty());
        assert_eq!(texts("(water),"), ["(", "water", ")", ","]);
        assert_eq!(texts("refluxed for 8 h."), ["refluxed", "for", "8", "h", "."]);
        assert_eq!(texts("(5.00 g, 18.58 mol)"), ["(", "5.00", "g", ",", "18.58", "mol", ")"]);
        assert_eq!(
            texts("(E)-3-(3,4-dihydroxyphenyl)prop-2-enoic acid"),
            ["(E)-3-(3,4-dihydroxyphenyl)prop-2-enoic", "acid"]
        );
    }

    #[test]
    fn token_offsets_are_characters() {
        let toks = tokenize("α-pinene (x)");
        assert_eq!(toks[0].text, "α-pinene");
        assert_eq!((toks[0].start, toks[0].end), (0, 8));
        assert_eq!(char_slice("α-pinene (x)", 9, 10), "(");
    }

    #[test]
    fn longest_match_wins() {
        let mut d = TypedEntityDictionary::default();
        d.insert("ethyl acetate", ty("R/T1"));
        d.insert("acetate", ty("R/T2"));
        let s = tag_text("d", "Add ethyl acetate now", &d);
        assert_eq!(s.mentions.len(), 1);
        assert_eq!(s.mentions[0].surface, "ethyl acetate");
        assert_eq!(s.mentions[0].labels, [ty("R/T1")].into());
    }

    #[test]
    fn empty_dictionary_tags_nothing() {
        let s = tag_text("d", "benzoic acid in methanol", &TypedEntityDictionary::default());
        assert!(s.mentions.is_empty());
        assert_eq!(s.tokens.len(), 4);
    }

    #[test]
    fn sentence_splitting() {
        let text = "Add 5.00 g of X. Stir for 2 h.\nFilter";
        let parts: Vec<&str> = split_sentences(text)
            .into_iter()
            .map(|(s, e)| char_slice(text, s, e))
            .collect();
        assert_eq!(parts, ["Add 5.00 g of X.", "Stir for 2 h.", "Filter"]);
    }

    fn sent(doc: &str, spans: &[(usize, usize, &str)]) -> AnnotatedSentence {
        AnnotatedSentence {
            doc_id: doc.into(),
            text: "a b c d".into(),
            tokens: tokenize("a b c d"),
            mentions: spans
                .iter()
                .map(|&(s, e, l)| MentionSpan {
                    token_start: s,
                    token_end: e,
                    surface: String::new(),
                    labels: [ty(l)].into(),
                })
                .collect(),
        }
    }

    #[test]
    fn agreement_examples() {
        let a = vec![sent("x", &[(0, 1, "R/T1"), (1, 2, "R/T1")])];
        let b = vec![sent("x", &[(0, 1, "R/T1"), (2, 3, "R/T1")])];
        assert_eq!(pass_agreement_f1(&a, &b).unwrap(), 0.5);
        assert_eq!(pass_agreement_f1(&a, &a).unwrap(), 1.0);
        let empty = vec![sent("x", &[])];
        assert_eq!(pass_agreement_f1(&empty, &b).unwrap(), 0.0);
        let other = vec![sent("y", &[])];
        assert!(matches!(pass_agreement_f1(&a, &other), Err(LabelError::Alignment { .. })));
        // Same span, different labels: not a match.
        let c = vec![sent("x", &[(0, 1, "R/T2"), (1, 2, "R/T1")])];
        assert_eq!(pass_agreement_f1(&c, &a).unwrap(), 0.5);
    }

    #[test]
    fn jsonl_shape() {
        let mut d = TypedEntityDictionary::default();
        d.insert("methanol", ty("Chem/Other Functional Groups"));
        let s = tag_text("doc1", "in methanol (20 mL)", &d);
        let v = serde_json::to_value(&s).unwrap();
        assert_eq!(v["tokens"][1], serde_json::json!(["methanol", 3, 11]));
        assert_eq!(
            v["mentions"][0],
            serde_json::json!({
                "start_tok": 1, "end_tok": 2, "surface": "methanol",
                "labels": ["Chem/Other Functional Groups"]
            })
        );
        let back: AnnotatedSentence = serde_json::from_value(v).unwrap();
        assert_eq!(back, s);
    }
}
