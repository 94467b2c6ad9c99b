#![allow(dead_code)]

use std::sync::Arc;

use chemtyper::encoders::{EncoderConfig, TextVocab};
use chemtyper::labeler::tokenize;
use chemtyper::molecule::{base_atom_vocab, base_bond_vocab};
use chemtyper::resolver::{ChemRecord, ResolveResult};
use chemtyper::synthetic::{sentence, SyntheticChemical, CARBONYL, FLAMMABLE, MENTION_TOKEN, OTHER};
use chemtyper::tensor::{ParamStore, Tape, Tensor, Var};
use chemtyper::typer::{PreparedExample, TrainingExample, TypingModel, Vocabularies};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
pub const ABS_FLOOR: f64 = 1e-6;

/// Worst disagreement between analytic and numeric derivatives.
#[derive(Debug, Clone, Default)]
pub struct GradReport {
    pub checked: usize,
    pub max_abs: f64,
    /// Largest relative error among entries above `ABS_FLOOR`.
    pub max_rel: f64,
    pub failures: Vec<String>,
}

impl GradReport {
    pub fn record(&mut self, what: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        self.checked += 1;
        let diff = (analytic - numeric).abs();
        self.max_abs = self.max_abs.max(diff);
        if diff <= ABS_FLOOR {
            return;
        }
        let rel = diff / analytic.abs().max(numeric.abs());
        self.max_rel = self.max_rel.max(rel);
        if rel >= REL_TOL {
            self.failures
                .push(format!("{}: analytic {analytic:e} numeric {numeric:e}", what()));
        }
    }

    pub fn ok(&self) -> bool {
        self.failures.is_empty()
    }
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Checks `build` (inputs → any-shaped output) by reducing its output to a
/// scalar with fixed random weights and differencing every input entry.
pub fn check_op(inputs: &[Tensor], build: impl Fn(&Tape, &[Var]) -> Var) -> GradReport {
    let eval = |ins: &[Tensor], weights: Option<&Tensor>| -> (Tape, Vec<Var>, Var, Tensor) {
        let tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = build(&tape, &vars);
        let shape = tape.shape(out);
        let w = match weights {
            Some(w) => w.clone(),
            None => random_tensor(&mut ChaCha8Rng::seed_from_u64(7), &shape),
        };
        let wv = tape.constant(w.clone());
        let loss = tape.sum(tape.mul(out, wv).unwrap());
        (tape, vars, loss, w)
    };
    let (tape, vars, loss, weights) = eval(inputs, None);
    let grads = tape.gradients(loss).unwrap();
    let mut report = GradReport::default();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; inputs[k].len()]);
        for i in 0..inputs[k].len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_STEP;
            let (tp, _, lp, _) = eval(&plus, Some(&weights));
            let (tm, _, lm, _) = eval(&minus, Some(&weights));
            let numeric = (tp.item(lp) - tm.item(lm)) / (2.0 * FD_STEP);
            report.record(|| format!("input {k}[{i}]"), analytic[i], numeric);
        }
    }
    report
}

/// Central differences of `loss` over every parameter entry reachable
/// through `store_of`, compared against the gradients already accumulated
/// there.
pub fn check_params<T>(
    obj: &mut T,
    store_of: impl Fn(&mut T) -> &mut ParamStore,
    loss: impl Fn(&T) -> f64,
) -> GradReport {
    let names: Vec<String> = store_of(obj).names().map(str::to_string).collect();
    let mut report = GradReport::default();
    for name in names {
        let analytic = store_of(obj).get(&name).unwrap().grad.clone().expect("backward ran");
        for i in 0..analytic.len() {
            let orig = store_of(obj).get(&name).unwrap().data()[i];
            store_of(obj).get_mut(&name).unwrap().data_mut()[i] = orig + FD_STEP;
            let lp = loss(obj);
            store_of(obj).get_mut(&name).unwrap().data_mut()[i] = orig - FD_STEP;
            let lm = loss(obj);
            store_of(obj).get_mut(&name).unwrap().data_mut()[i] = orig;
            report.record(|| format!("{name}[{i}]"), analytic[i], (lp - lm) / (2.0 * FD_STEP));
        }
    }
    report
}

pub fn gold_vector(c: &SyntheticChemical) -> Vec<f64> {
    let cats = c.categories();
    [CARBONYL, FLAMMABLE, OTHER]
        .iter()
        .map(|t| if cats.contains(t) { 1.0 } else { 0.0 })
        .collect()
}

pub fn synthetic_example(c: &SyntheticChemical, linked: bool) -> TrainingExample {
    TrainingExample {
        tokens: tokenize(&sentence(&c.name)).into_iter().map(|t| t.text).collect(),
        start: MENTION_TOKEN,
        end: MENTION_TOKEN + 1,
        surface: c.name.clone(),
        definition: if linked {
            ResolveResult::Linked(Arc::new(c.record()))
        } else {
            ResolveResult::Unlinkable
        },
        gold: gold_vector(c),
    }
}

pub fn synthetic_vocabs(chems: &[SyntheticChemical]) -> Vocabularies {
    let mut text = TextVocab::new();
    for c in chems {
        text.add_text(&sentence(&c.name));
        text.add_text(&c.description);
    }
    Vocabularies {
        text,
        atoms: base_atom_vocab(),
        bonds: base_bond_vocab(),
    }
}

pub fn record(name: &str, smiles: &str, description: &str) -> ChemRecord {
    ChemRecord {
        canonical_name: name.into(),
        synonyms: vec![],
        smiles: smiles.into(),
        description: description.into(),
    }
}

/// The gradient-check configuration: d=8, two text layers, two GIN layers.
pub fn gradcheck_encoder() -> EncoderConfig {
    EncoderConfig {
        d: 8,
        text_layers: 2,
        heads: 2,
        ffn_mult: 4,
        gin_layers: 2,
        epsilon: 0.1,
        max_len: 24,
    }
}

fn summed_loss(model: &TypingModel, prepared: &[PreparedExample]) -> f64 {
    let tape = Tape::new();
    prepared
        .iter()
        .map(|ex| {
            let l = model.loss(&tape, ex).unwrap();
            tape.item(l)
        })
        .sum()
}

/// Backpropagates the summed loss of `examples` and finite-differences
/// every model parameter against it.
pub fn check_model(model: &mut TypingModel, examples: &[TrainingExample]) -> GradReport {
    let prepared = model.prepare_all(examples).unwrap();
    model.store_mut().zero_grad();
    let tape = Tape::new();
    let losses: Vec<Var> = prepared.iter().map(|ex| model.loss(&tape, ex).unwrap()).collect();
    let sum = tape.sum(tape.concat(&losses).unwrap());
    tape.backward(sum, model.store_mut()).unwrap();
    check_params(model, |m| m.store_mut(), |m| summed_loss(m, &prepared))
}

pub const ONTOLOGY_ROOT: &str = "Chemical compounds";

/// The 30-category fixture graph and its 40-term dictionary.
pub fn ontology_fixture() -> (chemtyper::ontology::CategoryGraph, chemtyper::ontology::TermDictionary) {
    let graph = serde_json::from_str(include_str!("../data/category_graph_30.json")).unwrap();
    let terms = include_str!("../data/terms_40.txt");
    (graph, chemtyper::ontology::TermDictionary::from_terms(terms.lines()))
}

/// The fixture tree at depth cap 3 and threshold 0.2, traced by hand:
/// - "Quantum flavor studies" covers 1 of 6 grams (only `strange`) and is cut.
/// - "Organic dyes" covers exactly 1 of 5 (`organic`) and stays; both its
///   children cover nothing.
/// - "Oxides" covers 0 of 2 and is cut with "Metal oxides".
/// - "Sulfates" covers 0 of 1.
/// - "Carboxylic acids" is claimed under "Organic compounds" first; the
///   later parents skip it.
/// - "Alcohols -> Chemical compounds" closes a cycle and is skipped.
/// - Depth-3 nodes are leaves, so "Cycloalkanes" and "Essential amino
///   acids" are cut.
/// - "Nitric acid derivatives" covers 1 of 3 (`acid`, from the term "amino acid").
/// - `Other` nodes bypass coverage.
pub const EXPECTED_OUTLINE: &str = "Chemical compounds(\
Organic compounds(Hydrocarbons(Alkanes, Alkenes, Alkynes, Other hydrocarbons), Alcohols(Diols), \
Carboxylic acids(Fatty acids, Amino acids), Organic dyes), \
Inorganic compounds(Salts(Chlorides)), \
Acids(Mineral acids(Nitric acid derivatives)), \
Other chemical compounds)";

/// Label sets for `samples` samples over labels `0..labels`, decoded from a
/// bitmask with bit `s * labels + l` set when sample `s` carries label `l`.
pub fn decode_sets(mask: u32, samples: usize, labels: usize) -> Vec<std::collections::BTreeSet<usize>> {
    (0..samples)
        .map(|s| (0..labels).filter(|l| mask >> (s * labels + l) & 1 == 1).collect())
        .collect()
}

/// Cell-by-cell count over the (sample, label) grid: `(tp, fp, fn, f1, accuracy)`.
pub fn grid_oracle(pred: u32, gold: u32, samples: usize, labels: usize) -> (usize, usize, usize, f64, f64) {
    let (mut tp, mut fp, mut fn_, mut exact) = (0, 0, 0, 0);
    for s in 0..samples {
        let mut same = true;
        for l in 0..labels {
            let bit = s * labels + l;
            match (pred >> bit & 1, gold >> bit & 1) {
                (1, 1) => tp += 1,
                (1, 0) => {
                    fp += 1;
                    same = false
                }
                (0, 1) => {
                    fn_ += 1;
                    same = false
                }
                _ => {}
            }
        }
        exact += usize::from(same);
    }
    let f1 = if tp + fp + fn_ == 0 {
        0.0
    } else {
        2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
    };
    let acc = if samples == 0 { 1.0 } else { exact as f64 / samples as f64 };
    (tp, fp, fn_, f1, acc)
}

/// Every pred/gold assignment on a `samples` x `labels` grid checked against
/// [`grid_oracle`]. Returns the number of cases and the mismatches found.
pub fn brute_force_metrics(samples: usize, labels: usize) -> (usize, Vec<String>) {
    use chemtyper::metrics::{micro_f1, sample_accuracy};
    let cells = samples * labels;
    let mut bad = Vec::new();
    let mut cases = 0;
    for pred in 0u32..1 << cells {
        let p = decode_sets(pred, samples, labels);
        for gold in 0u32..1 << cells {
            let g = decode_sets(gold, samples, labels);
            cases += 1;
            let (tp, fp, fn_, f1, acc) = grid_oracle(pred, gold, samples, labels);
            let (got_f1, c) = micro_f1(&p, &g).unwrap();
            let got_acc = sample_accuracy(&p, &g).unwrap();
            if (c.tp, c.fp, c.fn_) != (tp, fp, fn_) || got_f1 != f1 || got_acc != acc {
                bad.push(format!("pred {pred:#b} gold {gold:#b}"));
            }
        }
    }
    (cases, bad)
}
