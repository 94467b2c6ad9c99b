use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use chemtyper::encoders::EncoderConfig;
use chemtyper::resolver::LiveConfig;
use chemtyper::typer::{Ablation, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum ResolverMode {
    #[default]
    Fixture,
    Live,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// Category graph JSON (`edges` plus `pages`).
    pub categories: PathBuf,
    /// Term dictionary, one term per line.
    pub terms: PathBuf,
    /// Optional `canonical<TAB>synonym…` table.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synonyms: Option<PathBuf>,
    /// Split name -> document corpus (JSONL or directory of text files).
    /// `train` is required; `dev` and `test` are used when present.
    pub corpus: BTreeMap<String, PathBuf>,
    /// Resolver fixture JSONL.
    pub fixtures: PathBuf,
    /// Optional `token v1 … vd` word vectors.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OntologySection {
    pub root: String,
    #[serde(default = "default_max_depth")]
    pub max_depth: usize,
    #[serde(default = "default_coverage")]
    pub coverage_threshold: f64,
}

fn default_max_depth() -> usize {
    3
}

fn default_coverage() -> f64 {
    0.2
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResolverSection {
    #[serde(default)]
    pub mode: ResolverMode,
    #[serde(default)]
    pub live: LiveConfig,
    /// Disk cache for live lookups.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache: Option<PathBuf>,
}

/// One run's full configuration. Relative paths are resolved against the
/// directory holding the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub paths: Paths,
    pub ontology: OntologySection,
    #[serde(default)]
    pub model: EncoderConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub ablation: Ablation,
    #[serde(default)]
    pub resolver: ResolverSection,
}

/// Flag values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub ablation: Option<Ablation>,
    pub threshold: Option<f64>,
    pub resolver: Option<ResolverMode>,
    pub out: Option<PathBuf>,
}

pub const FIXTURES_ENV: &str = "CHEMTYPER_FIXTURES";

impl RunConfig {
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Input(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Input(format!("invalid config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        if let Ok(f) = std::env::var(FIXTURES_ENV) {
            cfg.paths.fixtures = PathBuf::from(f);
        }
        cfg.apply(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| *p = base.join(&*p);
        let p = &mut self.paths;
        fix(&mut p.categories);
        fix(&mut p.terms);
        p.synonyms.as_mut().map(fix);
        p.corpus.values_mut().for_each(fix);
        fix(&mut p.fixtures);
        p.embeddings.as_mut().map(fix);
        self.resolver.cache.as_mut().map(fix);
        self.out.as_mut().map(fix);
    }

    fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(a) = o.ablation {
            self.ablation = a;
        }
        if let Some(t) = o.threshold {
            self.train.threshold = t;
        }
        if let Some(r) = o.resolver {
            self.resolver.mode = r;
        }
        if let Some(out) = &o.out {
            self.out = Some(out.clone());
        }
        self.train.seed = self.seed;
    }

    fn validate(&self) -> Result<(), CliError> {
        let p = &self.paths;
        let mut inputs = vec![&p.categories, &p.terms, &p.fixtures];
        inputs.extend(p.synonyms.as_ref());
        inputs.extend(p.embeddings.as_ref());
        inputs.extend(p.corpus.values());
        for path in inputs {
            if !path.exists() {
                return Err(CliError::Input(format!("missing input file {}", path.display())));
            }
        }
        if !p.corpus.contains_key("train") {
            return Err(CliError::Input("paths.corpus must name a `train` split".into()));
        }
        if self.out.is_none() {
            return Err(CliError::Input("no output directory: set `out` in the config or pass --out".into()));
        }
        if !(0.0..=1.0).contains(&self.train.threshold) {
            return Err(CliError::Input(format!("threshold {} outside [0, 1]", self.train.threshold)));
        }
        Ok(())
    }

    pub fn out(&self) -> &Path {
        self.out.as_deref().expect("validated")
    }

    pub fn stage_dir(&self, stage: &str) -> PathBuf {
        self.out().join(stage)
    }

    /// Splits other than `train`, in name order.
    pub fn eval_splits(&self) -> impl Iterator<Item = &str> {
        self.paths.corpus.keys().map(String::as_str).filter(|s| *s != "train")
    }
}
