//! Writes a small synthetic project: category graph, term list, corpus
//! splits, resolver fixtures and a config that ties them together.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use chemtyper::encoders::EncoderConfig;
use chemtyper::labeler::{write_jsonl, Document};
use chemtyper::synthetic::{category_graph, chemicals, sentence, term_list, SyntheticChemical, ROOT};
use chemtyper::typer::{Ablation, TrainConfig};

use crate::config::{OntologySection, Paths, ResolverSection, RunConfig};
use crate::error::CliError;

/// Sentences per document.
const DOC_SENTENCES: usize = 5;
/// Every `UNLINKED_EVERY`-th chemical is left out of the fixtures.
const UNLINKED_EVERY: usize = 3;

#[derive(Debug, Clone)]
pub struct DemoOptions {
    pub size: usize,
    pub seed: u64,
    pub epochs: usize,
}

fn documents(split: &str, chems: &[SyntheticChemical]) -> Vec<Document> {
    chems
        .chunks(DOC_SENTENCES)
        .enumerate()
        .map(|(i, group)| Document {
            doc_id: format!("{split}-{i:03}"),
            text: group.iter().map(|c| sentence(&c.name)).collect::<Vec<_>>().join(" "),
        })
        .collect()
}

pub fn write_demo(dir: &Path, opts: &DemoOptions) -> Result<RunConfig, CliError> {
    if opts.size < 10 {
        return Err(CliError::Input(format!("demo size {} is too small; use at least 10", opts.size)));
    }
    fs::create_dir_all(dir.join("corpus")).map_err(|e| CliError::io(dir, e))?;
    let chems = chemicals(opts.size, opts.seed);
    let graph = category_graph(&chems);
    let write = |name: &str, text: String| -> Result<(), CliError> {
        let p = dir.join(name);
        fs::write(&p, text).map_err(|e| CliError::io(&p, e))
    };
    write(
        "categories.json",
        serde_json::to_string_pretty(&graph_sorted(&graph)).expect("serializable") + "\n",
    )?;
    write("terms.txt", term_list().join("\n") + "\n")?;

    let n_train = opts.size * 3 / 5;
    let n_dev = opts.size / 5;
    let splits = [
        ("train", &chems[..n_train]),
        ("dev", &chems[n_train..n_train + n_dev]),
        ("test", &chems[n_train + n_dev..]),
    ];
    let mut corpus = BTreeMap::new();
    for (split, part) in splits {
        let rel = PathBuf::from("corpus").join(format!("{split}.jsonl"));
        write_jsonl(&dir.join(&rel), &documents(split, part))?;
        corpus.insert(split.to_string(), rel);
    }
    let fixtures: Vec<_> = chems
        .iter()
        .enumerate()
        .filter(|(i, _)| i % UNLINKED_EVERY != UNLINKED_EVERY - 1)
        .map(|(_, c)| c.record())
        .collect();
    write_jsonl(&dir.join("fixtures.jsonl"), &fixtures)?;

    let cfg = RunConfig {
        seed: opts.seed,
        out: Some(PathBuf::from("run")),
        paths: Paths {
            categories: "categories.json".into(),
            terms: "terms.txt".into(),
            synonyms: None,
            corpus,
            fixtures: "fixtures.jsonl".into(),
            embeddings: None,
        },
        ontology: OntologySection {
            root: ROOT.to_string(),
            max_depth: 3,
            coverage_threshold: 0.2,
        },
        model: EncoderConfig {
            d: 16,
            text_layers: 1,
            heads: 2,
            gin_layers: 2,
            max_len: 32,
            ..Default::default()
        },
        train: TrainConfig {
            lr: 3e-3,
            batch_size: 16,
            epochs: opts.epochs,
            seed: opts.seed,
            ..Default::default()
        },
        ablation: Ablation::Full,
        resolver: ResolverSection::default(),
    };
    write("config.json", serde_json::to_string_pretty(&cfg).expect("serializable") + "\n")?;
    Ok(cfg)
}

/// The page map as a sorted object so the file is stable across runs.
fn graph_sorted(g: &chemtyper::ontology::CategoryGraph) -> serde_json::Value {
    let pages: BTreeMap<_, _> = g.pages.iter().collect();
    serde_json::json!({ "edges": g.edges, "pages": pages })
}
