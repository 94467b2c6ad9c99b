//! Generated toy corpora with a known labeling rule, for smoke tests,
//! demos and learnability checks.
//!
//! Every chemical gets a made-up single-word name, a random small molecule
//! and a short description. Its types are a fixed function of two facts:
//! whether the molecule contains a carbonyl group (`C=O`) and whether the
//! description contains the word `flammable`. Chemicals with neither fall
//! into the `Other` type. The sentence around each mention is the same
//! template for every chemical, so context alone carries no signal.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use rand::seq::IndexedRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ontology::CategoryGraph;
use crate::resolver::ChemRecord;

pub const ROOT: &str = "Chemical compounds";
pub const CARBONYL: &str = "Carbonyl compounds";
pub const FLAMMABLE: &str = "Flammable compounds";
pub const OTHER: &str = "Other chemical compounds";
pub const KEYWORD: &str = "flammable";

const SYLLABLES: &[&str] = &[
    "bra", "dor", "fen", "gal", "hex", "ir", "jov", "kel", "lum", "mor", "nax", "orb", "pel", "quin", "ros",
    "sul", "tav", "ul", "vex", "wyr", "xan", "yl", "zor",
];
const SUFFIXES: &[&str] = &["ine", "ol", "ate", "ide", "ane", "ium", "ene", "ose"];
const FILLER: &[&str] = &[
    "colorless", "white", "yellow", "solid", "liquid", "powder", "compound", "used", "in", "organic", "synthesis",
    "soluble", "insoluble", "water", "stable", "odorless", "crystalline", "reagent", "volatile", "dense", "sweet",
    "smelling", "a", "an", "industrial", "solvent",
];
const PLAIN_FRAGMENTS: &[&str] = &["C", "CC", "N", "O", "C=C", "CO", "CN", "c1ccccc1", "C(C)C", "OC"];
const CARBONYL_FRAGMENTS: &[&str] = &["C(=O)", "C(=O)O", "C(=O)N", "C(C)=O"];

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticChemical {
    pub name: String,
    pub smiles: String,
    pub description: String,
    pub carbonyl: bool,
    pub keyword: bool,
}

impl SyntheticChemical {
    /// Leaf category names this chemical belongs to.
    pub fn categories(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if self.carbonyl {
            out.push(CARBONYL);
        }
        if self.keyword {
            out.push(FLAMMABLE);
        }
        if out.is_empty() {
            out.push(OTHER);
        }
        out
    }

    /// Full type paths, as produced by the ontology builder.
    pub fn type_paths(&self) -> Vec<String> {
        self.categories().iter().map(|c| format!("{ROOT}/{c}")).collect()
    }

    pub fn record(&self) -> ChemRecord {
        ChemRecord {
            canonical_name: self.name.clone(),
            synonyms: Vec::new(),
            smiles: self.smiles.clone(),
            description: self.description.clone(),
        }
    }
}

/// The leaf type paths in label order.
pub fn label_paths() -> Vec<String> {
    [CARBONYL, FLAMMABLE, OTHER]
        .iter()
        .map(|c| format!("{ROOT}/{c}"))
        .collect()
}

/// Template sentence around a mention; the name is always token 4.
pub fn sentence(name: &str) -> String {
    format!("A sample of the {name} was stirred overnight under nitrogen.")
}

/// Token index of the mention inside [`sentence`].
pub const MENTION_TOKEN: usize = 4;

fn name(rng: &mut ChaCha8Rng, used: &mut HashSet<String>) -> String {
    loop {
        let n = rng.random_range(2..4);
        let mut s: String = (0..n).map(|_| *SYLLABLES.choose(rng).expect("non-empty")).collect();
        s.push_str(SUFFIXES.choose(rng).expect("non-empty"));
        if used.insert(s.clone()) {
            return s;
        }
    }
}

fn molecule(rng: &mut ChaCha8Rng, carbonyl: bool) -> String {
    let n = rng.random_range(2..5);
    let mut parts: Vec<&str> = (0..n)
        .map(|_| *PLAIN_FRAGMENTS.choose(rng).expect("non-empty"))
        .collect();
    if carbonyl {
        let at = rng.random_range(0..=parts.len());
        parts.insert(at, CARBONYL_FRAGMENTS.choose(rng).expect("non-empty"));
    }
    // Fragments ending in a branch need something after them to bond to.
    let mut s = parts.concat();
    if s.ends_with(')') {
        s.push('C');
    }
    s
}

fn description(rng: &mut ChaCha8Rng, keyword: bool) -> String {
    let n = rng.random_range(5..9);
    let mut words: Vec<&str> = (0..n).map(|_| *FILLER.choose(rng).expect("non-empty")).collect();
    if keyword {
        let at = rng.random_range(0..=words.len());
        words.insert(at, KEYWORD);
    }
    words.join(" ")
}

/// `n` chemicals cycling through the four label combinations, in a
/// seed-determined order.
pub fn chemicals(n: usize, seed: u64) -> Vec<SyntheticChemical> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut used = HashSet::new();
    let mut out: Vec<SyntheticChemical> = (0..n)
        .map(|i| {
            let carbonyl = i % 2 == 0;
            let keyword = (i / 2) % 2 == 0;
            SyntheticChemical {
                name: name(&mut rng, &mut used),
                smiles: molecule(&mut rng, carbonyl),
                description: description(&mut rng, keyword),
                carbonyl,
                keyword,
            }
        })
        .collect();
    rand::seq::SliceRandom::shuffle(out.as_mut_slice(), &mut rng);
    out
}

/// Category graph whose leaves are the three types above; every chemical
/// is a page of the root and of each named category it belongs to.
pub fn category_graph(chems: &[SyntheticChemical]) -> CategoryGraph {
    let edges = [CARBONYL, FLAMMABLE, OTHER]
        .iter()
        .map(|c| (ROOT.to_string(), c.to_string()))
        .collect();
    let mut pages: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    for c in chems {
        pages.entry(ROOT).or_default().push(c.name.clone());
        for cat in c.categories() {
            if cat != OTHER {
                pages.entry(cat).or_default().push(c.name.clone());
            }
        }
    }
    CategoryGraph {
        edges,
        pages: pages
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect::<HashMap<_, _>>(),
    }
}

/// Every unigram of the category names, so coverage is complete.
pub fn term_list() -> Vec<String> {
    let words: BTreeSet<String> = [ROOT, CARBONYL, FLAMMABLE, OTHER]
        .iter()
        .flat_map(|c| c.split_whitespace())
        .map(str::to_lowercase)
        .collect();
    words.into_iter().collect()
}
