//! Type ontology built from a category graph.
//!
//! A depth-capped DFS from a root category keeps sub-categories whose names
//! (and the names of their direct children) are sufficiently covered by a
//! domain term dictionary. Each kept node collects the page titles found in
//! its subtree, expanded with synonyms; `Other ...` nodes receive whatever
//! their parent holds that no named sibling does. Root-to-leaf paths are the
//! fine-grained types.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OntologyError {
    #[error("root category `{0}` is not in the category graph")]
    MissingRoot(String),
    #[error("`Other` node `{other}` derived before its parent `{parent}` was populated")]
    Ordering { parent: String, other: String },
    #[error("category `{parent}` has more than one `Other` child (`{first}`, `{second}`)")]
    DuplicateOther {
        parent: String,
        first: String,
        second: String,
    },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("type path `{0}` is empty or malformed")]
    BadTypePath(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("format error in {path}: {detail}")]
    Format { path: String, detail: String },
}

/// Lowercase and collapse internal whitespace.
pub fn normalize(s: &str) -> String {
    s.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Unique lowercase alphabetic tokens of a name.
pub fn unigrams(name: &str) -> BTreeSet<String> {
    name.split(|c: char| !c.is_alphabetic())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn is_other_name(name: &str) -> bool {
    name.starts_with("Other")
}

/// Directed category graph with page titles per category.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CategoryGraph {
    pub edges: Vec<(String, String)>,
    #[serde(default)]
    pub pages: HashMap<String, Vec<String>>,
}

impl CategoryGraph {
    pub fn load(path: &Path) -> Result<Self, OntologyError> {
        let text = read(path)?;
        serde_json::from_str(&text).map_err(|e| OntologyError::Format {
            path: path.display().to_string(),
            detail: e.to_string(),
        })
    }

    /// Children in edge-list order, duplicates removed.
    pub fn children(&self) -> HashMap<&str, Vec<&str>> {
        let mut out: HashMap<&str, Vec<&str>> = HashMap::new();
        for (p, c) in &self.edges {
            let list = out.entry(p.as_str()).or_default();
            if !list.contains(&c.as_str()) {
                list.push(c.as_str());
            }
        }
        out
    }

    pub fn contains(&self, name: &str) -> bool {
        self.pages.contains_key(name) || self.edges.iter().any(|(p, c)| p == name || c == name)
    }
}

fn read(path: &Path) -> Result<String, OntologyError> {
    fs::read_to_string(path).map_err(|source| OntologyError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Set of lowercase 1-grams from a term list. Multi-word terms contribute
/// each of their words.
#[derive(Debug, Clone, Default)]
pub struct TermDictionary {
    words: HashSet<String>,
}

impl TermDictionary {
    pub fn from_terms<'a>(terms: impl IntoIterator<Item = &'a str>) -> Self {
        Self {
            words: terms.into_iter().flat_map(unigrams).collect(),
        }
    }

    /// Plain text, one term per line.
    pub fn load(path: &Path) -> Result<Self, OntologyError> {
        let text = read(path)?;
        Ok(Self::from_terms(text.lines()))
    }

    pub fn contains(&self, word: &str) -> bool {
        self.words.contains(word)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

/// Canonical name -> synonyms, keyed by normalized canonical name.
#[derive(Debug, Clone, Default)]
pub struct SynonymTable {
    map: HashMap<String, Vec<String>>,
}

impl SynonymTable {
    pub fn insert(&mut self, canonical: &str, synonyms: impl IntoIterator<Item = impl Into<String>>) {
        self.map
            .entry(normalize(canonical))
            .or_default()
            .extend(synonyms.into_iter().map(Into::into));
    }

    pub fn get(&self, canonical: &str) -> &[String] {
        self.map.get(&normalize(canonical)).map(Vec::as_slice).unwrap_or(&[])
    }

    /// TSV: canonical name, then one synonym per tab-separated field.
    pub fn parse_tsv(text: &str) -> Self {
        let mut t = Self::default();
        for line in text.lines() {
            let mut fields = line.split('\t');
            let Some(canonical) = fields.next().filter(|c| !c.trim().is_empty()) else {
                continue;
            };
            t.insert(canonical, fields.filter(|f| !f.trim().is_empty()).map(str::to_string));
        }
        t
    }

    pub fn load(path: &Path) -> Result<Self, OntologyError> {
        Ok(Self::parse_tsv(&read(path)?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryNode {
    pub name: String,
    pub is_other: bool,
    pub entities: BTreeSet<String>,
    #[serde(default)]
    pub populated: bool,
    pub children: Vec<CategoryNode>,
}

impl CategoryNode {
    pub fn new(name: impl Into<String>) -> Self {
        let name = name.into();
        Self {
            is_other: is_other_name(&name),
            name,
            entities: BTreeSet::new(),
            populated: false,
            children: Vec::new(),
        }
    }

    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }

    pub fn node_count(&self) -> usize {
        1 + self.children.iter().map(Self::node_count).sum::<usize>()
    }

    pub fn leaf_count(&self) -> usize {
        if self.is_leaf() {
            1
        } else {
            self.children.iter().map(Self::leaf_count).sum()
        }
    }

    pub fn depth(&self) -> usize {
        self.children.iter().map(|c| 1 + c.depth()).max().unwrap_or(0)
    }

    pub fn find(&self, name: &str) -> Option<&CategoryNode> {
        if self.name == name {
            return Some(self);
        }
        self.children.iter().find_map(|c| c.find(name))
    }

    /// Nested `(name, children)` outline, handy for comparing shapes.
    pub fn outline(&self) -> String {
        if self.children.is_empty() {
            self.name.clone()
        } else {
            let kids: Vec<String> = self.children.iter().map(Self::outline).collect();
            format!("{}({})", self.name, kids.join(", "))
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct BuildParams {
    pub max_depth: usize,
    pub coverage_threshold: f64,
}

impl Default for BuildParams {
    fn default() -> Self {
        Self {
            max_depth: 3,
            coverage_threshold: 0.2,
        }
    }
}

/// Fraction of the unique 1-grams of `name` and its direct children's names
/// that appear in `dict`. A name set with no alphabetic tokens scores 0.
pub fn coverage(name: &str, children: &[&str], dict: &TermDictionary) -> f64 {
    let mut grams = unigrams(name);
    for c in children {
        grams.extend(unigrams(c));
    }
    if grams.is_empty() {
        return 0.0;
    }
    grams.iter().filter(|g| dict.contains(g)).count() as f64 / grams.len() as f64
}

/// Depth-capped DFS over `graph` from `root` (depth 0). Nodes deeper than
/// `max_depth` are not kept. A category whose coverage is below the threshold
/// is dropped with its whole subtree; `Other` categories are synthetic and
/// bypass the coverage test. The first DFS encounter of a category claims it,
/// which breaks both cycles and diamonds.
pub fn build_tree(
    graph: &CategoryGraph,
    root: &str,
    dict: &TermDictionary,
    params: BuildParams,
) -> Result<CategoryNode, OntologyError> {
    if params.max_depth == 0 {
        return Err(OntologyError::InvalidParameter("max_depth must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&params.coverage_threshold) {
        return Err(OntologyError::InvalidParameter(format!(
            "coverage threshold {} outside [0, 1]",
            params.coverage_threshold
        )));
    }
    if !graph.contains(root) {
        return Err(OntologyError::MissingRoot(root.to_string()));
    }
    let children = graph.children();
    let mut claimed: HashSet<&str> = HashSet::from([root]);
    expand(root, 0, &children, dict, params, &mut claimed)
}

fn expand<'g>(
    name: &'g str,
    depth: usize,
    children: &HashMap<&'g str, Vec<&'g str>>,
    dict: &TermDictionary,
    params: BuildParams,
    claimed: &mut HashSet<&'g str>,
) -> Result<CategoryNode, OntologyError> {
    let mut node = CategoryNode::new(name);
    if depth == params.max_depth {
        return Ok(node);
    }
    let mut other_child: Option<&str> = None;
    for &child in children.get(name).map(Vec::as_slice).unwrap_or(&[]) {
        if claimed.contains(child) {
            continue;
        }
        if is_other_name(child) {
            if let Some(first) = other_child {
                return Err(OntologyError::DuplicateOther {
                    parent: name.to_string(),
                    first: first.to_string(),
                    second: child.to_string(),
                });
            }
            other_child = Some(child);
        } else {
            let grand = children.get(child).map(Vec::as_slice).unwrap_or(&[]);
            if coverage(child, grand, dict) < params.coverage_threshold {
                continue;
            }
        }
        claimed.insert(child);
        node.children.push(expand(child, depth + 1, children, dict, params, claimed)?);
    }
    Ok(node)
}

/// Fills every node's entity bag with the normalized page titles of the node
/// and all its tree descendants, each expanded with its synonyms.
pub fn populate_entities(tree: &mut CategoryNode, graph: &CategoryGraph, synonyms: &SynonymTable) {
    let mut bag = BTreeSet::new();
    for title in graph.pages.get(&tree.name).into_iter().flatten() {
        bag.insert(normalize(title));
        bag.extend(synonyms.get(title).iter().map(|s| normalize(s)));
    }
    for child in &mut tree.children {
        populate_entities(child, graph, synonyms);
        bag.extend(child.entities.iter().cloned());
    }
    bag.remove("");
    tree.entities = bag;
    tree.populated = true;
}

/// Sets each `Other` node's bag to its parent's bag minus the union of its
/// named siblings' bags.
pub fn derive_other_nodes(tree: &mut CategoryNode) -> Result<(), OntologyError> {
    if let Some(pos) = tree.children.iter().position(|c| c.is_other) {
        if !tree.populated {
            return Err(OntologyError::Ordering {
                parent: tree.name.clone(),
                other: tree.children[pos].name.clone(),
            });
        }
        let covered: BTreeSet<&String> = tree
            .children
            .iter()
            .filter(|c| !c.is_other)
            .flat_map(|c| c.entities.iter())
            .collect();
        let rest: BTreeSet<String> = tree
            .entities
            .iter()
            .filter(|e| !covered.contains(e))
            .cloned()
            .collect();
        let other = &mut tree.children[pos];
        other.entities = rest;
        other.populated = true;
    }
    for child in &mut tree.children {
        derive_other_nodes(child)?;
    }
    Ok(())
}

/// A root-to-leaf path of node names.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct FineGrainedType {
    path: Vec<String>,
}

pub const PATH_SEPARATOR: char = '/';

impl FineGrainedType {
    pub fn new(path: Vec<String>) -> Result<Self, OntologyError> {
        if path.is_empty() || path.iter().any(|p| p.is_empty() || p.contains(PATH_SEPARATOR)) {
            return Err(OntologyError::BadTypePath(path.join("/")));
        }
        Ok(Self { path })
    }

    pub fn path(&self) -> &[String] {
        &self.path
    }

    pub fn leaf(&self) -> &str {
        self.path.last().expect("non-empty path")
    }
}

impl fmt::Display for FineGrainedType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sep = PATH_SEPARATOR.to_string();
        f.write_str(&self.path.join(&sep))
    }
}

impl FromStr for FineGrainedType {
    type Err = OntologyError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::new(s.split(PATH_SEPARATOR).map(str::to_string).collect())
    }
}

impl From<FineGrainedType> for String {
    fn from(t: FineGrainedType) -> String {
        t.to_string()
    }
}

impl TryFrom<String> for FineGrainedType {
    type Error = OntologyError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

/// Ordered set of types; positions are class indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<FineGrainedType>", into = "Vec<FineGrainedType>")]
pub struct LabelSpace {
    types: Vec<FineGrainedType>,
    index: HashMap<FineGrainedType, usize>,
}

impl LabelSpace {
    pub fn new(types: Vec<FineGrainedType>) -> Self {
        let mut unique = Vec::with_capacity(types.len());
        let mut index = HashMap::new();
        for t in types {
            if !index.contains_key(&t) {
                index.insert(t.clone(), unique.len());
                unique.push(t);
            }
        }
        Self {
            types: unique,
            index,
        }
    }

    pub fn len(&self) -> usize {
        self.types.len()
    }

    pub fn is_empty(&self) -> bool {
        self.types.is_empty()
    }

    pub fn types(&self) -> &[FineGrainedType] {
        &self.types
    }

    pub fn index_of(&self, t: &FineGrainedType) -> Option<usize> {
        self.index.get(t).copied()
    }

    pub fn get(&self, i: usize) -> Option<&FineGrainedType> {
        self.types.get(i)
    }

    pub fn load(path: &Path) -> Result<Self, OntologyError> {
        serde_json::from_str(&read(path)?).map_err(|e| OntologyError::Format {
            path: path.display().to_string(),
            detail: e.to_string(),
        })
    }
}

impl From<Vec<FineGrainedType>> for LabelSpace {
    fn from(v: Vec<FineGrainedType>) -> Self {
        Self::new(v)
    }
}

impl From<LabelSpace> for Vec<FineGrainedType> {
    fn from(l: LabelSpace) -> Self {
        l.types
    }
}

/// Normalized entity string -> the leaf types whose bags contain it.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TypedEntityDictionary {
    map: BTreeMap<String, BTreeSet<FineGrainedType>>,
}

impl TypedEntityDictionary {
    pub fn insert(&mut self, entity: &str, t: FineGrainedType) {
        let key = normalize(entity);
        if !key.is_empty() {
            self.map.entry(key).or_default().insert(t);
        }
    }

    pub fn get(&self, entity: &str) -> Option<&BTreeSet<FineGrainedType>> {
        self.map.get(&normalize(entity))
    }

    pub fn get_normalized(&self, key: &str) -> Option<&BTreeSet<FineGrainedType>> {
        self.map.get(key)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &BTreeSet<FineGrainedType>)> {
        self.map.iter()
    }

    /// Word count of the longest key.
    pub fn max_key_words(&self) -> usize {
        self.map.keys().map(|k| k.split(' ').count()).max().unwrap_or(0)
    }

    pub fn load(path: &Path) -> Result<Self, OntologyError> {
        let parsed: BTreeMap<String, BTreeSet<FineGrainedType>> =
            serde_json::from_str(&read(path)?).map_err(|e| OntologyError::Format {
                path: path.display().to_string(),
                detail: e.to_string(),
            })?;
        let mut d = Self::default();
        for (k, types) in parsed {
            for t in types {
                d.insert(&k, t);
            }
        }
        Ok(d)
    }
}

/// Leaf paths in depth-first order plus the entity dictionary over leaves.
pub fn flatten(tree: &CategoryNode) -> (LabelSpace, TypedEntityDictionary) {
    let mut types = Vec::new();
    let mut dict = TypedEntityDictionary::default();
    let mut path = Vec::new();
    walk_leaves(tree, &mut path, &mut |path, leaf| {
        let t = FineGrainedType::new(path.to_vec()).expect("tree names are non-empty");
        for e in &leaf.entities {
            dict.insert(e, t.clone());
        }
        types.push(t);
    });
    (LabelSpace::new(types), dict)
}

fn walk_leaves(node: &CategoryNode, path: &mut Vec<String>, f: &mut impl FnMut(&[String], &CategoryNode)) {
    path.push(node.name.clone());
    if node.is_leaf() {
        f(path, node);
    }
    for c in &node.children {
        walk_leaves(c, path, f);
    }
    path.pop();
}

/// Every step of the build, in order.
pub fn build_ontology(
    graph: &CategoryGraph,
    root: &str,
    dict: &TermDictionary,
    synonyms: &SynonymTable,
    params: BuildParams,
) -> Result<(CategoryNode, LabelSpace, TypedEntityDictionary), OntologyError> {
    let mut tree = build_tree(graph, root, dict, params)?;
    populate_entities(&mut tree, graph, synonyms);
    derive_other_nodes(&mut tree)?;
    let (labels, entities) = flatten(&tree);
    Ok((tree, labels, entities))
}
