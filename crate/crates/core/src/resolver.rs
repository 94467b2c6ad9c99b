//! Mention -> external chemical definition (structure + description).
//!
//! Lookup order: normalized canonical name in the fixture store, then the
//! store's synonym index, then (when configured) a live PUG-REST style HTTP
//! backend. Anything else is [`ResolveResult::Unlinkable`]. Results are cached
//! per normalized mention, so repeated calls return identical content.
//!
//! # Live backend response mapping
//!
//! Two GET requests per uncached mention, both against `base_url`:
//!
//! 1. `{base}/compound/name/{mention}/property/CanonicalSMILES,Title/JSON`
//!    (mention percent-encoded). The first entry of
//!    `PropertyTable.Properties` supplies `CID`, `Title` (canonical name) and
//!    the SMILES, read from the first present of `CanonicalSMILES`,
//!    `ConnectivitySMILES`, `SMILES`, `IsomericSMILES`.
//! 2. `{base}/compound/cid/{CID}/description/JSON`. The first
//!    `InformationList.Information[*].Description` is the description.
//!
//! HTTP 404 is a plain miss. Timeouts, connection failures and other error
//! statuses are retried `retries` times and then logged and treated as a
//! miss. Records whose SMILES does not parse or that lack a description are
//! also misses.

use std::collections::HashMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, RwLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

use crate::molecule::parse_smiles;
use crate::ontology::normalize;

#[derive(Debug, Error)]
pub enum ResolveError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed fixture {path} line {line}: {detail}")]
    Format {
        path: String,
        line: usize,
        detail: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChemRecord {
    pub canonical_name: String,
    #[serde(default)]
    pub synonyms: Vec<String>,
    pub smiles: String,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", content = "record", rename_all = "snake_case")]
pub enum ResolveResult {
    Linked(Arc<ChemRecord>),
    Unlinkable,
}

impl ResolveResult {
    pub fn is_linked(&self) -> bool {
        matches!(self, ResolveResult::Linked(_))
    }

    pub fn record(&self) -> Option<&ChemRecord> {
        match self {
            ResolveResult::Linked(r) => Some(r),
            ResolveResult::Unlinkable => None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub loaded: usize,
    pub invalid_smiles: usize,
    pub empty_description: usize,
    pub duplicates: usize,
    /// One line per skipped record.
    pub skipped: Vec<String>,
}

/// Validated records. Immutable after ingest.
#[derive(Debug, Clone, Default)]
pub struct FixtureStore {
    records: Vec<Arc<ChemRecord>>,
    by_name: HashMap<String, usize>,
    by_synonym: HashMap<String, usize>,
}

impl FixtureStore {
    /// Adds validated records in order. A repeated canonical name replaces the
    /// earlier record in place. Synonym lookups resolve to the first record
    /// (store order) that lists the synonym.
    pub fn from_records(records: impl IntoIterator<Item = ChemRecord>) -> (Self, IngestReport) {
        let mut store = FixtureStore::default();
        let mut report = IngestReport::default();
        for rec in records {
            if rec.description.trim().is_empty() {
                report.empty_description += 1;
                report.skipped.push(format!("{}: empty description", rec.canonical_name));
                continue;
            }
            if let Err(e) = parse_smiles(&rec.smiles) {
                report.invalid_smiles += 1;
                report.skipped.push(format!("{}: {e}", rec.canonical_name));
                continue;
            }
            let key = normalize(&rec.canonical_name);
            match store.by_name.get(&key) {
                Some(&i) => {
                    report.duplicates += 1;
                    store.records[i] = Arc::new(rec);
                }
                None => {
                    store.by_name.insert(key, store.records.len());
                    store.records.push(Arc::new(rec));
                }
            }
        }
        for (i, rec) in store.records.iter().enumerate() {
            for syn in &rec.synonyms {
                store.by_synonym.entry(normalize(syn)).or_insert(i);
            }
        }
        report.loaded = store.records.len();
        (store, report)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[Arc<ChemRecord>] {
        &self.records
    }

    pub fn lookup(&self, mention: &str) -> Option<Arc<ChemRecord>> {
        let key = normalize(mention);
        self.by_name
            .get(&key)
            .or_else(|| self.by_synonym.get(&key))
            .map(|&i| Arc::clone(&self.records[i]))
    }
}

/// Reads a JSONL fixture file of [`ChemRecord`]s.
pub fn ingest_fixtures(path: &Path) -> Result<(FixtureStore, IngestReport), ResolveError> {
    let f = fs::File::open(path).map_err(|source| ResolveError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|source| ResolveError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ChemRecord = serde_json::from_str(&line).map_err(|e| ResolveError::Format {
            path: path.display().to_string(),
            line: i + 1,
            detail: e.to_string(),
        })?;
        records.push(rec);
    }
    Ok(FixtureStore::from_records(records))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiveConfig {
    pub base_url: String,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_retries")]
    pub retries: u32,
}

fn default_timeout_ms() -> u64 {
    5000
}

fn default_retries() -> u32 {
    2
}

impl Default for LiveConfig {
    fn default() -> Self {
        Self {
            base_url: "https://pubchem.ncbi.nlm.nih.gov/rest/pug".into(),
            timeout_ms: default_timeout_ms(),
            retries: default_retries(),
        }
    }
}

#[derive(Debug)]
enum Fetch {
    Found(String),
    NotFound,
    Failed(String),
}

/// HTTP backend. Never returns errors; failures become misses.
#[derive(Debug)]
pub struct LiveClient {
    config: LiveConfig,
    agent: ureq::Agent,
}

impl LiveClient {
    pub fn new(config: LiveConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        Self { config, agent }
    }

    fn get(&self, url: &str) -> Fetch {
        let mut last = String::new();
        for _ in 0..=self.config.retries {
            match self.agent.get(url).call() {
                Ok(mut resp) => {
                    let status = resp.status().as_u16();
                    if status == 404 {
                        return Fetch::NotFound;
                    }
                    if (200..300).contains(&status) {
                        match resp.body_mut().read_to_string() {
                            Ok(body) => return Fetch::Found(body),
                            Err(e) => last = e.to_string(),
                        }
                    } else {
                        last = format!("HTTP {status}");
                    }
                }
                Err(e) => last = e.to_string(),
            }
        }
        Fetch::Failed(last)
    }

    pub fn fetch(&self, mention: &str) -> Option<ChemRecord> {
        let base = self.config.base_url.trim_end_matches('/');
        let name = percent_encoding::utf8_percent_encode(mention, percent_encoding::NON_ALPHANUMERIC);
        let url = format!("{base}/compound/name/{name}/property/CanonicalSMILES,Title/JSON");
        let body = self.expect_body(mention, &url)?;
        let props: serde_json::Value = serde_json::from_str(&body)
            .map_err(|e| warn!(mention, error = %e, "unparseable property response"))
            .ok()?;
        let first = props.pointer("/PropertyTable/Properties/0")?;
        let cid = first.get("CID")?.as_u64()?;
        let smiles = ["CanonicalSMILES", "ConnectivitySMILES", "SMILES", "IsomericSMILES"]
            .iter()
            .find_map(|k| first.get(*k).and_then(|v| v.as_str()))?
            .to_string();
        let title = first
            .get("Title")
            .and_then(|v| v.as_str())
            .unwrap_or(mention)
            .to_string();

        let url = format!("{base}/compound/cid/{cid}/description/JSON");
        let body = self.expect_body(mention, &url)?;
        let info: serde_json::Value = serde_json::from_str(&body)
            .map_err(|e| warn!(mention, error = %e, "unparseable description response"))
            .ok()?;
        let description = info
            .pointer("/InformationList/Information")?
            .as_array()?
            .iter()
            .find_map(|i| i.get("Description").and_then(|d| d.as_str()))?
            .to_string();
        if let Err(e) = parse_smiles(&smiles) {
            warn!(mention, %smiles, error = %e, "live record has unsupported SMILES");
            return None;
        }
        Some(ChemRecord {
            canonical_name: title,
            synonyms: Vec::new(),
            smiles,
            description,
        })
    }

    fn expect_body(&self, mention: &str, url: &str) -> Option<String> {
        match self.get(url) {
            Fetch::Found(b) => Some(b),
            Fetch::NotFound => None,
            Fetch::Failed(e) => {
                warn!(mention, url, error = %e, "live resolver request failed; treating as unlinkable");
                None
            }
        }
    }
}

/// Linked/unlinkable counts over a list of mentions.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LinkReport {
    pub mentions: usize,
    pub linked: usize,
    pub unlinkable: usize,
    pub unlinkable_rate: f64,
}

#[derive(Debug)]
pub struct Resolver {
    store: FixtureStore,
    live: Option<LiveClient>,
    cache: RwLock<HashMap<String, ResolveResult>>,
    disk_cache: Option<PathBuf>,
    linked: AtomicUsize,
    unlinkable: AtomicUsize,
}

impl Resolver {
    pub fn fixture(store: FixtureStore) -> Self {
        Self {
            store,
            live: None,
            cache: RwLock::new(HashMap::new()),
            disk_cache: None,
            linked: AtomicUsize::new(0),
            unlinkable: AtomicUsize::new(0),
        }
    }

    /// Fixture lookup first, then the HTTP backend.
    pub fn live(store: FixtureStore, config: LiveConfig) -> Self {
        Self {
            live: Some(LiveClient::new(config)),
            ..Self::fixture(store)
        }
    }

    /// Loads (if present) and later persists a JSON cache keyed by normalized
    /// mention.
    pub fn with_disk_cache(mut self, path: PathBuf) -> Result<Self, ResolveError> {
        if path.exists() {
            let text = fs::read_to_string(&path).map_err(|source| ResolveError::Io {
                path: path.display().to_string(),
                source,
            })?;
            let entries: HashMap<String, ResolveResult> =
                serde_json::from_str(&text).map_err(|e| ResolveError::Format {
                    path: path.display().to_string(),
                    line: e.line(),
                    detail: e.to_string(),
                })?;
            self.cache.write().expect("cache lock").extend(entries);
        }
        self.disk_cache = Some(path);
        Ok(self)
    }

    pub fn store(&self) -> &FixtureStore {
        &self.store
    }

    pub fn resolve(&self, mention: &str) -> ResolveResult {
        let key = normalize(mention);
        let cached = self.cache.read().expect("cache lock").get(&key).cloned();
        let result = match cached {
            Some(r) => r,
            None => {
                let found = self
                    .store
                    .lookup(&key)
                    .or_else(|| self.live.as_ref().and_then(|l| l.fetch(mention)).map(Arc::new));
                let r = match found {
                    Some(rec) => ResolveResult::Linked(rec),
                    None => ResolveResult::Unlinkable,
                };
                // A concurrent writer may have won; keep whichever landed first.
                self.cache
                    .write()
                    .expect("cache lock")
                    .entry(key)
                    .or_insert(r)
                    .clone()
            }
        };
        let counter = if result.is_linked() {
            &self.linked
        } else {
            &self.unlinkable
        };
        counter.fetch_add(1, Ordering::Relaxed);
        result
    }

    /// Counts of every `resolve` call so far.
    pub fn counts(&self) -> (usize, usize) {
        (
            self.linked.load(Ordering::Relaxed),
            self.unlinkable.load(Ordering::Relaxed),
        )
    }

    pub fn report<'a>(&self, mentions: impl IntoIterator<Item = &'a str>) -> LinkReport {
        let mut r = LinkReport::default();
        for m in mentions {
            r.mentions += 1;
            if self.resolve(m).is_linked() {
                r.linked += 1;
            } else {
                r.unlinkable += 1;
            }
        }
        r.unlinkable_rate = if r.mentions == 0 {
            0.0
        } else {
            r.unlinkable as f64 / r.mentions as f64
        };
        r
    }

    pub fn save_cache(&self) -> Result<(), ResolveError> {
        let Some(path) = &self.disk_cache else {
            return Ok(());
        };
        let cache = self.cache.read().expect("cache lock");
        let sorted: std::collections::BTreeMap<_, _> = cache.iter().collect();
        fs::write(path, serde_json::to_string_pretty(&sorted).expect("serializable"))
            .map_err(|source| ResolveError::Io {
                path: path.display().to_string(),
                source,
            })
    }
}
