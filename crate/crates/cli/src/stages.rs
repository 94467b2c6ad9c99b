use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use chemtyper::encoders::load_pretrained_embeddings;
use chemtyper::labeler::{self, read_corpus, read_sentences, summarize, tokenize, write_jsonl, AnnotatedSentence, MentionSpan, Token};
use chemtyper::metrics::{evaluate, render_table, AccuracyMode, EvalReport};
use chemtyper::ontology::{self, BuildParams, CategoryGraph, FineGrainedType, LabelSpace, SynonymTable, TermDictionary, TypedEntityDictionary};
use chemtyper::resolver::{ingest_fixtures, LinkReport, Resolver, ResolveResult};
use chemtyper::typer::{train, TrainConfig, TrainingExample, TypingModel, Vocabularies};
use serde::{Deserialize, Serialize};
use tracing::info;

use crate::config::{ResolverMode, RunConfig};
use crate::error::CliError;

const TREE_FILE: &str = "tree.json";
const LABELS_FILE: &str = "labels.json";
const DICTIONARY_FILE: &str = "dictionary.json";
const SUMMARY_FILE: &str = "summary.json";
const CONFIG_ECHO: &str = "config.json";
const MODEL_FILE: &str = "model.json";
const TRAIN_LOG: &str = "train_log.csv";
const RESOLVER_REPORT: &str = "resolver_report.json";

/// Stage directory with the resolved config echoed into it. A `fresh`
/// directory is emptied first.
fn stage_dir(cfg: &RunConfig, name: &str, fresh: bool) -> Result<PathBuf, CliError> {
    let dir = cfg.stage_dir(name);
    if fresh && dir.exists() {
        fs::remove_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    }
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    write_json(&dir.join(CONFIG_ECHO), cfg)?;
    Ok(dir)
}

fn stage(cfg: &RunConfig, name: &str) -> Result<PathBuf, CliError> {
    stage_dir(cfg, name, true)
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    fs::write(path, s).map_err(|e| CliError::io(path, e))
}

fn require(path: PathBuf) -> Result<PathBuf, CliError> {
    if path.exists() {
        Ok(path)
    } else {
        Err(CliError::missing(&path))
    }
}

#[derive(Debug, Serialize)]
struct OntologySummary {
    nodes: usize,
    leaves: usize,
    entities: usize,
    depth: usize,
}

pub fn build_ontology(cfg: &RunConfig) -> Result<(), CliError> {
    let graph = CategoryGraph::load(&cfg.paths.categories)?;
    let terms = TermDictionary::load(&cfg.paths.terms)?;
    let synonyms = match &cfg.paths.synonyms {
        Some(p) => SynonymTable::load(p)?,
        None => SynonymTable::default(),
    };
    let params = BuildParams {
        max_depth: cfg.ontology.max_depth,
        coverage_threshold: cfg.ontology.coverage_threshold,
    };
    let (tree, labels, dict) = ontology::build_ontology(&graph, &cfg.ontology.root, &terms, &synonyms, params)?;
    let dir = stage(cfg, "ontology")?;
    write_json(&dir.join(TREE_FILE), &tree)?;
    write_json(&dir.join(LABELS_FILE), &labels)?;
    write_json(&dir.join(DICTIONARY_FILE), &dict)?;
    let summary = OntologySummary {
        nodes: tree.node_count(),
        leaves: tree.leaf_count(),
        entities: dict.len(),
        depth: tree.depth(),
    };
    write_json(&dir.join(SUMMARY_FILE), &summary)?;
    println!(
        "ontology: {} nodes, {} leaves, {} entities, depth {}",
        summary.nodes, summary.leaves, summary.entities, summary.depth
    );
    Ok(())
}

pub fn distant_label(cfg: &RunConfig) -> Result<(), CliError> {
    let dict = TypedEntityDictionary::load(&require(cfg.stage_dir("ontology").join(DICTIONARY_FILE))?)?;
    let mut docs = BTreeMap::new();
    for (split, path) in &cfg.paths.corpus {
        docs.insert(split.clone(), read_corpus(path)?);
    }
    let dir = stage(cfg, "labeled")?;
    let mut summaries = BTreeMap::new();
    for (split, docs) in &docs {
        let sentences = labeler::label_documents(docs, &dict);
        write_jsonl(&dir.join(format!("{split}.jsonl")), &sentences)?;
        let s = summarize(docs.len(), &sentences);
        println!("{split}: {} documents, {} sentences, {} mentions", s.documents, s.sentences, s.mentions);
        summaries.insert(split.clone(), s);
    }
    write_json(&dir.join(SUMMARY_FILE), &summaries)
}

fn make_resolver(cfg: &RunConfig) -> Result<Resolver, CliError> {
    let (store, report) = ingest_fixtures(&cfg.paths.fixtures)?;
    info!(loaded = report.loaded, skipped = report.skipped.len(), "fixtures ingested");
    let resolver = match cfg.resolver.mode {
        ResolverMode::Fixture => Resolver::fixture(store),
        ResolverMode::Live => Resolver::live(store, cfg.resolver.live.clone()),
    };
    Ok(match &cfg.resolver.cache {
        Some(p) => resolver.with_disk_cache(p.clone())?,
        None => resolver,
    })
}

fn labeled_split(cfg: &RunConfig, split: &str) -> Result<Vec<AnnotatedSentence>, CliError> {
    Ok(read_sentences(&require(cfg.stage_dir("labeled").join(format!("{split}.jsonl")))?)?)
}

fn examples(sentences: &[AnnotatedSentence], labels: &LabelSpace, resolver: &Resolver) -> Vec<TrainingExample> {
    sentences
        .iter()
        .flat_map(|s| s.mentions.iter().map(move |m| TrainingExample::from_mention(s, m, labels, resolver)))
        .collect()
}

fn link_report(resolver: &Resolver, sentences: &[AnnotatedSentence]) -> LinkReport {
    resolver.report(sentences.iter().flat_map(|s| &s.mentions).map(|m| m.surface.as_str()))
}

pub fn train_model(cfg: &RunConfig) -> Result<(), CliError> {
    let labels = LabelSpace::load(&require(cfg.stage_dir("ontology").join(LABELS_FILE))?)?;
    let train_sents = labeled_split(cfg, "train")?;
    let dev_sents = if cfg.paths.corpus.contains_key("dev") {
        labeled_split(cfg, "dev")?
    } else {
        Vec::new()
    };
    let resolver = make_resolver(cfg)?;
    let records = resolver.store().records();
    let texts = train_sents
        .iter()
        .map(|s| s.text.as_str())
        .chain(records.iter().map(|r| r.description.as_str()));
    let vocabs = Vocabularies::build(texts, records.iter().map(|r| r.smiles.as_str()));
    let mut model = TypingModel::new(cfg.model.clone(), cfg.ablation.config(), labels.len(), vocabs, cfg.seed)?;
    if let Some(p) = &cfg.paths.embeddings {
        let vocab = model.vocabs().text.clone();
        let n = load_pretrained_embeddings(p, &vocab, model.store_mut())?;
        info!(loaded = n, "pretrained vectors");
    }
    let train_ex = model.prepare_all(&examples(&train_sents, &labels, &resolver))?;
    let dev_ex = model.prepare_all(&examples(&dev_sents, &labels, &resolver))?;
    let mut reports = BTreeMap::new();
    reports.insert("train", link_report(&resolver, &train_sents));
    reports.insert("dev", link_report(&resolver, &dev_sents));

    let dir = stage(cfg, "model")?;
    let ckpt = dir.join("checkpoints");
    fs::create_dir_all(&ckpt).map_err(|e| CliError::io(&ckpt, e))?;
    let tcfg = TrainConfig {
        checkpoint_dir: Some(ckpt),
        ..cfg.train.clone()
    };
    let log = train(&mut model, &train_ex, &dev_ex, &tcfg)?;
    let log_path = dir.join(TRAIN_LOG);
    let mut w = csv::Writer::from_path(&log_path).map_err(|e| CliError::Input(format!("{}: {e}", log_path.display())))?;
    for rec in &log {
        w.serialize(rec).map_err(|e| CliError::Input(format!("{}: {e}", log_path.display())))?;
    }
    w.flush().map_err(|e| CliError::io(&log_path, e))?;
    model.save(&dir.join(MODEL_FILE))?;
    model.vocabs().save(&dir)?;
    write_json(&dir.join(LABELS_FILE), &labels)?;
    write_json(&dir.join(RESOLVER_REPORT), &reports)?;
    resolver.save_cache()?;
    for (split, r) in &reports {
        println!("{split}: {} mentions, {} linked, {} unlinkable", r.mentions, r.linked, r.unlinkable);
    }
    if let Some(last) = log.last() {
        println!(
            "epoch {}: train loss {:.6}, dev micro-F1 {:.4}, dev accuracy {:.4}",
            last.epoch, last.train_loss, last.dev_micro_f1, last.dev_accuracy
        );
    }
    Ok(())
}

fn load_model(cfg: &RunConfig) -> Result<(TypingModel, LabelSpace), CliError> {
    let dir = cfg.stage_dir("model");
    let model_path = require(dir.join(MODEL_FILE))?;
    let labels = LabelSpace::load(&require(dir.join(LABELS_FILE))?)?;
    for f in ["vocab.txt", "atoms.txt", "bonds.txt"] {
        require(dir.join(f))?;
    }
    let vocabs = Vocabularies::load(&dir)?;
    Ok((TypingModel::load(&model_path, vocabs)?, labels))
}

fn type_names(labels: &LabelSpace, set: &BTreeSet<usize>) -> BTreeSet<FineGrainedType> {
    set.iter().filter_map(|&i| labels.get(i).cloned()).collect()
}

/// The same sentences with every mention's labels replaced by the model's.
fn predict_sentences(
    model: &TypingModel,
    labels: &LabelSpace,
    resolver: &Resolver,
    sentences: &[AnnotatedSentence],
    threshold: f64,
) -> Result<Vec<AnnotatedSentence>, CliError> {
    let mut out = sentences.to_vec();
    for s in &mut out {
        let snapshot = s.clone();
        for m in &mut s.mentions {
            let ex = model.prepare(&TrainingExample::from_mention(&snapshot, m, labels, resolver))?;
            m.labels = type_names(labels, &model.predict(&ex, threshold)?.predicted);
        }
    }
    Ok(out)
}

fn mention_sets(sentences: &[AnnotatedSentence]) -> Vec<BTreeSet<String>> {
    sentences
        .iter()
        .flat_map(|s| &s.mentions)
        .map(|m| m.labels.iter().map(|t| t.to_string()).collect())
        .collect()
}

#[derive(Debug, Serialize)]
struct MetricsRow<'a> {
    split: &'a str,
    mentions: usize,
    micro_f1: f64,
    sample_accuracy: f64,
    tp: usize,
    fp: usize,
    #[serde(rename = "fn")]
    fn_: usize,
}

pub fn evaluate_model(cfg: &RunConfig) -> Result<(), CliError> {
    let (model, labels) = load_model(cfg)?;
    let mut splits = BTreeMap::new();
    for split in cfg.eval_splits() {
        splits.insert(split.to_string(), labeled_split(cfg, split)?);
    }
    let resolver = make_resolver(cfg)?;
    let dir = stage(cfg, "eval")?;
    let mut reports: BTreeMap<String, EvalReport> = BTreeMap::new();
    let mut links = BTreeMap::new();
    for (split, gold) in &splits {
        let pred = predict_sentences(&model, &labels, &resolver, gold, cfg.train.threshold)?;
        write_jsonl(&dir.join(format!("predictions_{split}.jsonl")), &pred)?;
        reports.insert(split.clone(), evaluate(&mention_sets(&pred), &mention_sets(gold), AccuracyMode::ExactMatch)?);
        links.insert(split.clone(), link_report(&resolver, gold));
    }
    let path = dir.join("metrics.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    for (split, r) in &reports {
        w.serialize(MetricsRow {
            split,
            mentions: r.samples,
            micro_f1: r.micro_f1,
            sample_accuracy: r.sample_accuracy,
            tp: r.counts.tp,
            fp: r.counts.fp,
            fn_: r.counts.fn_,
        })
        .map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;
    write_json(&dir.join("report.json"), &reports)?;
    write_json(&dir.join(RESOLVER_REPORT), &links)?;
    let rows: Vec<(&str, &EvalReport)> = reports.iter().map(|(k, v)| (k.as_str(), v)).collect();
    print!("{}", render_table(&rows));
    Ok(())
}

/// Scores a predictions file against a gold file. Both hold labeled
/// sentences with the same mentions in the same order.
pub fn compare(predictions: &Path, gold: &Path) -> Result<(), CliError> {
    let pred = read_sentences(&require(predictions.to_path_buf())?)?;
    let gold_s = read_sentences(&require(gold.to_path_buf())?)?;
    let spans = |s: &[AnnotatedSentence]| -> Vec<(String, usize, usize)> {
        s.iter()
            .flat_map(|x| x.mentions.iter().map(|m| (x.doc_id.clone(), m.token_start, m.token_end)))
            .collect()
    };
    if spans(&pred) != spans(&gold_s) {
        return Err(CliError::Input(format!(
            "{} and {} do not list the same mentions",
            predictions.display(),
            gold.display()
        )));
    }
    let report = evaluate(&mention_sets(&pred), &mention_sets(&gold_s), AccuracyMode::ExactMatch)?;
    print!("{}", render_table(&[("compare", &report)]));
    Ok(())
}

/// One line of predict input: either `{"text": ...}` with mentions wrapped
/// in `*` markers, or a labeled sentence.
#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum PredictInput {
    Labeled(AnnotatedSentence),
    Marked {
        #[serde(default)]
        id: Option<String>,
        text: String,
    },
}

/// Strips `*` markers and returns the unmarked sentence plus one mention per
/// marker pair.
pub fn parse_marked(id: &str, text: &str) -> Result<AnnotatedSentence, CliError> {
    let spaced = text.replace('*', " * ");
    let mut tokens = Vec::new();
    let mut mentions = Vec::new();
    let mut open: Option<usize> = None;
    for t in tokenize(&spaced) {
        if t.text == "*" {
            match open.take() {
                None => open = Some(tokens.len()),
                Some(start) if start == tokens.len() => {
                    return Err(CliError::Input(format!("empty mention in {text:?}")));
                }
                Some(start) => mentions.push((start, tokens.len())),
            }
        } else {
            tokens.push(t.text);
        }
    }
    if open.is_some() {
        return Err(CliError::Input(format!("unbalanced `*` markers in {text:?}")));
    }
    let mut plain = String::new();
    let mut toks = Vec::with_capacity(tokens.len());
    for t in &tokens {
        if !plain.is_empty() {
            plain.push(' ');
        }
        let start = plain.chars().count();
        plain.push_str(t);
        toks.push(Token {
            text: t.clone(),
            start,
            end: start + t.chars().count(),
        });
    }
    let mentions = mentions
        .into_iter()
        .map(|(s, e)| MentionSpan {
            token_start: s,
            token_end: e,
            surface: tokens[s..e].join(" "),
            labels: BTreeSet::new(),
        })
        .collect();
    Ok(AnnotatedSentence {
        doc_id: id.to_string(),
        text: plain,
        tokens: toks,
        mentions,
    })
}

#[derive(Debug, Serialize)]
struct MentionPrediction {
    start_tok: usize,
    end_tok: usize,
    surface: String,
    linked: bool,
    labels: Vec<String>,
    probs: BTreeMap<String, f64>,
}

#[derive(Debug, Serialize)]
struct SentencePrediction {
    id: String,
    text: String,
    mentions: Vec<MentionPrediction>,
}

pub fn predict(cfg: &RunConfig, input: &Path) -> Result<(), CliError> {
    let (model, labels) = load_model(cfg)?;
    let rows: Vec<PredictInput> = labeler::read_jsonl(&require(input.to_path_buf())?)?;
    let mut sentences = Vec::with_capacity(rows.len());
    for (i, row) in rows.into_iter().enumerate() {
        sentences.push(match row {
            PredictInput::Labeled(s) => {
                s.validate()?;
                s
            }
            PredictInput::Marked { id, text } => parse_marked(&id.unwrap_or_else(|| format!("line{}", i + 1)), &text)?,
        });
    }
    let resolver = make_resolver(cfg)?;
    let dir = stage(cfg, "predict")?;
    let mut out = Vec::with_capacity(sentences.len());
    for s in &sentences {
        let mut mentions = Vec::new();
        for m in &s.mentions {
            let ex = TrainingExample::from_mention(s, m, &labels, &resolver);
            let linked = matches!(ex.definition, ResolveResult::Linked(_));
            let prepared = model.prepare(&ex)?;
            let p = model.predict(&prepared, cfg.train.threshold)?;
            mentions.push(MentionPrediction {
                start_tok: m.token_start,
                end_tok: m.token_end,
                surface: m.surface.clone(),
                linked,
                labels: type_names(&labels, &p.predicted).iter().map(|t| t.to_string()).collect(),
                probs: labels.types().iter().map(|t| t.to_string()).zip(p.probs).collect(),
            });
        }
        out.push(SentencePrediction {
            id: s.doc_id.clone(),
            text: s.text.clone(),
            mentions,
        });
    }
    write_jsonl(&dir.join("predictions.jsonl"), &out)?;
    let report = link_report(&resolver, &sentences);
    write_json(&dir.join(RESOLVER_REPORT), &report)?;
    println!(
        "{} sentences, {} mentions ({} linked, {} unlinkable)",
        out.len(),
        report.mentions,
        report.linked,
        report.unlinkable
    );
    Ok(())
}

pub fn resolver_ingest(cfg: &RunConfig) -> Result<(), CliError> {
    let (_, report) = ingest_fixtures(&cfg.paths.fixtures)?;
    let dir = stage_dir(cfg, "resolver", false)?;
    write_json(&dir.join("ingest_report.json"), &report)?;
    println!(
        "{} records loaded; {} invalid SMILES, {} empty descriptions, {} duplicates",
        report.loaded, report.invalid_smiles, report.empty_description, report.duplicates
    );
    Ok(())
}

pub fn resolver_resolve(cfg: &RunConfig, mentions: &[String]) -> Result<(), CliError> {
    let resolver = make_resolver(cfg)?;
    for m in mentions {
        #[derive(Serialize)]
        struct Line<'a> {
            mention: &'a str,
            #[serde(flatten)]
            result: ResolveResult,
        }
        let line = Line {
            mention: m,
            result: resolver.resolve(m),
        };
        println!("{}", serde_json::to_string(&line).expect("serializable"));
    }
    resolver.save_cache()?;
    Ok(())
}

/// Linked/unlinkable counts over every labeled split.
pub fn resolver_report(cfg: &RunConfig) -> Result<(), CliError> {
    let mut splits = BTreeMap::new();
    for split in cfg.paths.corpus.keys() {
        splits.insert(split.clone(), labeled_split(cfg, split)?);
    }
    let resolver = make_resolver(cfg)?;
    let mut reports = BTreeMap::new();
    for (split, s) in &splits {
        let r = link_report(&resolver, s);
        println!(
            "{split}: {} mentions, {} linked, {} unlinkable ({:.1}%)",
            r.mentions,
            r.linked,
            r.unlinkable,
            100.0 * r.unlinkable_rate
        );
        reports.insert(split.clone(), r);
    }
    let dir = stage_dir(cfg, "resolver", false)?;
    write_json(&dir.join("link_report.json"), &reports)?;
    resolver.save_cache()?;
    Ok(())
}
