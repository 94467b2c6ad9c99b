//! The entity typer: feature assembly, multi-label head, loss, training and
//! decoding.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tracing::{debug, warn};

use crate::encoders::{
    description_sequence, encode_context, encode_description, encode_focus, encode_graph,
    fuse_cross_modal, graph_pool, marked_sequence, masked_sequence, register_fusion_params,
    register_graph_params, register_text_params, EncoderConfig, ModelError, Result, TextVocab,
    TokenizedText,
};
use crate::labeler::{AnnotatedSentence, MentionSpan};
use crate::metrics::{micro_f1, sample_accuracy};
use crate::molecule::{
    base_atom_vocab, base_bond_vocab, extend_atom_vocab, parse_smiles, vocab_index, AtomVocab, BondOrder, BondVocab,
    IndexedGraph,
};
use crate::ontology::LabelSpace;
use crate::resolver::{ResolveResult, Resolver};
use crate::tensor::{load_checkpoint, read_checkpoint_header, save_checkpoint, Optimizer, ParamStore, Tape, Tensor, Var};

fn contract<T>(msg: impl Into<String>) -> Result<T> {
    Err(ModelError::Contract(msg.into()))
}

/// Which feature groups feed the classification head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub use_graph: bool,
    pub use_description: bool,
    pub use_cross_modal: bool,
    /// Include the masked-context embedding next to the marker embedding.
    pub use_context_only: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Ablation::Full.config()
    }
}

impl AblationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.use_cross_modal && !(self.use_graph && self.use_description) {
            return contract("cross-modal fusion needs both the graph and the description");
        }
        Ok(())
    }

    /// Head input width for embedding size `d`.
    pub fn head_width(&self, d: usize) -> usize {
        let mention = if self.use_context_only { 2 * d } else { d };
        mention + d * (usize::from(self.use_cross_modal) + usize::from(self.use_graph) + usize::from(self.use_description))
    }
}

/// The named model variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Ablation {
    #[default]
    Full,
    NoGraph,
    NoDescription,
    NoCrossModal,
    NoContextOnly,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [
        Ablation::Full,
        Ablation::NoGraph,
        Ablation::NoDescription,
        Ablation::NoCrossModal,
        Ablation::NoContextOnly,
    ];

    pub fn config(self) -> AblationConfig {
        let all = AblationConfig {
            use_graph: true,
            use_description: true,
            use_cross_modal: true,
            use_context_only: true,
        };
        match self {
            Ablation::Full => all,
            Ablation::NoGraph => AblationConfig {
                use_graph: false,
                use_cross_modal: false,
                ..all
            },
            Ablation::NoDescription => AblationConfig {
                use_description: false,
                use_cross_modal: false,
                ..all
            },
            Ablation::NoCrossModal => AblationConfig {
                use_cross_modal: false,
                ..all
            },
            Ablation::NoContextOnly => AblationConfig {
                use_context_only: false,
                ..all
            },
        }
    }

    /// Head width in multiples of `d`.
    pub fn width_multiple(self) -> usize {
        match self {
            Ablation::Full => 5,
            Ablation::NoGraph | Ablation::NoDescription => 3,
            Ablation::NoCrossModal | Ablation::NoContextOnly => 4,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoGraph => "no-graph",
            Ablation::NoDescription => "no-desc",
            Ablation::NoCrossModal => "no-xmodal",
            Ablation::NoContextOnly => "no-context-only",
        }
    }

    pub fn from_config(cfg: &AblationConfig) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.config() == *cfg)
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl From<Ablation> for String {
    fn from(a: Ablation) -> String {
        a.name().to_string()
    }
}

impl TryFrom<String> for Ablation {
    type Error = String;
    fn try_from(s: String) -> std::result::Result<Self, Self::Error> {
        s.parse()
    }
}

impl FromStr for Ablation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| format!("unknown ablation {s:?}; expected one of full, no-graph, no-desc, no-xmodal, no-context-only"))
    }
}

/// Everything needed to rebuild the parameter layout; stored as the
/// checkpoint header.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub ablation: AblationConfig,
    pub num_classes: usize,
    pub text_vocab_size: usize,
    pub atom_vocab_size: usize,
    pub bond_vocab_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabularies {
    pub text: TextVocab,
    pub atoms: AtomVocab,
    pub bonds: BondVocab,
}

const TEXT_VOCAB_FILE: &str = "vocab.txt";
const ATOM_VOCAB_FILE: &str = "atoms.txt";
const BOND_VOCAB_FILE: &str = "bonds.txt";

impl Vocabularies {
    /// Text vocabulary from the given texts, atom vocabulary from the
    /// frozen base list plus every atom type in `smiles`. Unparseable
    /// SMILES are skipped.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, smiles: impl IntoIterator<Item = &'a str>) -> Self {
        let mut text = TextVocab::new();
        for t in texts {
            text.add_text(t);
        }
        let graphs: Vec<_> = smiles.into_iter().filter_map(|s| parse_smiles(s).ok()).collect();
        let mut atoms = base_atom_vocab();
        extend_atom_vocab(&mut atoms, &graphs);
        Self {
            text,
            atoms,
            bonds: base_bond_vocab(),
        }
    }

    /// Writes `vocab.txt`, `atoms.txt` and `bonds.txt` into `dir`, one
    /// entry per line. Aromatic atom types are written in lowercase.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.text.save(&dir.join(TEXT_VOCAB_FILE))?;
        let atoms: Vec<String> = self
            .atoms
            .entries()
            .iter()
            .map(|(el, aromatic)| if *aromatic { el.to_lowercase() } else { el.clone() })
            .collect();
        write_lines(&dir.join(ATOM_VOCAB_FILE), &atoms)?;
        let bonds: Vec<String> = self.bonds.entries().iter().map(|b| b.name().to_string()).collect();
        write_lines(&dir.join(BOND_VOCAB_FILE), &bonds)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = TextVocab::load(&dir.join(TEXT_VOCAB_FILE))?;
        let atom_path = dir.join(ATOM_VOCAB_FILE);
        let atoms = AtomVocab::from_entries(
            read_lines(&atom_path)?
                .into_iter()
                .map(|l| {
                    let aromatic = l.starts_with(|c: char| c.is_ascii_lowercase());
                    let mut chars = l.chars();
                    let el = chars
                        .next()
                        .map(|f| f.to_ascii_uppercase().to_string() + chars.as_str())
                        .unwrap_or_default();
                    (el, aromatic)
                })
                .collect(),
        );
        let bond_path = dir.join(BOND_VOCAB_FILE);
        let mut bonds = Vec::new();
        for l in read_lines(&bond_path)? {
            match BondOrder::from_name(&l) {
                Some(b) => bonds.push(b),
                None => {
                    return Err(ModelError::Format {
                        path: bond_path,
                        detail: format!("unknown bond type {l:?}"),
                    })
                }
            }
        }
        Ok(Self {
            text,
            atoms,
            bonds: BondVocab::from_entries(bonds),
        })
    }
}

fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut s = lines.join("\n");
    s.push('\n');
    std::fs::write(path, s).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(text.lines().filter(|l| !l.is_empty()).map(str::to_string).collect())
}

/// One mention with its context, linked definition and gold labels.
#[derive(Debug, Clone)]
pub struct TrainingExample {
    pub tokens: Vec<String>,
    pub start: usize,
    pub end: usize,
    pub surface: String,
    pub definition: ResolveResult,
    /// Binary gold vector over the label space.
    pub gold: Vec<f64>,
}

impl TrainingExample {
    pub fn from_mention(
        sentence: &AnnotatedSentence,
        mention: &MentionSpan,
        labels: &LabelSpace,
        resolver: &Resolver,
    ) -> Self {
        let mut gold = vec![0.0; labels.len()];
        for i in mention.label_indices(labels) {
            gold[i] = 1.0;
        }
        Self {
            tokens: sentence.token_texts().into_iter().map(String::from).collect(),
            start: mention.token_start,
            end: mention.token_end,
            surface: mention.surface.clone(),
            definition: resolver.resolve(&mention.surface),
            gold,
        }
    }

    pub fn gold_set(&self) -> BTreeSet<usize> {
        gold_indices(&self.gold)
    }
}

pub fn gold_indices(y: &[f64]) -> BTreeSet<usize> {
    y.iter()
        .enumerate()
        .filter(|(_, &v)| v == 1.0)
        .map(|(i, _)| i)
        .collect()
}

/// Model inputs with tokenization and graph parsing already done.
#[derive(Debug, Clone)]
pub struct PreparedExample {
    pub marked: TokenizedText,
    pub masked: TokenizedText,
    pub graph: Option<IndexedGraph>,
    pub description: Option<TokenizedText>,
    pub gold: Vec<f64>,
}

impl PreparedExample {
    pub fn is_linked(&self) -> bool {
        self.graph.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub probs: Vec<f64>,
    pub predicted: BTreeSet<usize>,
}

/// `{i : p_i > threshold}`, falling back to the first argmax when empty.
pub fn decide(probs: &[f64], threshold: f64) -> BTreeSet<usize> {
    let mut out: BTreeSet<usize> = probs
        .iter()
        .enumerate()
        .filter(|(_, &p)| p > threshold)
        .map(|(i, _)| i)
        .collect();
    if out.is_empty() && !probs.is_empty() {
        let mut best = 0;
        for (i, &p) in probs.iter().enumerate() {
            if p > probs[best] {
                best = i;
            }
        }
        out.insert(best);
    }
    out
}

fn check_targets(targets: &[f64]) -> Result<()> {
    if let Some(v) = targets.iter().find(|&&v| v != 0.0 && v != 1.0) {
        return contract(format!("gold labels must be 0 or 1, found {v}"));
    }
    Ok(())
}

/// Multi-label soft margin loss on the tape.
pub fn soft_margin_loss(tape: &Tape, logits: Var, targets: &[f64]) -> Result<Var> {
    check_targets(targets)?;
    Ok(tape.soft_margin_loss(logits, targets)?)
}

/// `-(1/C) Σ [y log σ(x) + (1-y) log(1-σ(x))]`, evaluated stably.
pub fn soft_margin_loss_value(logits: &[f64], targets: &[f64]) -> Result<f64> {
    check_targets(targets)?;
    if logits.len() != targets.len() || logits.is_empty() {
        return contract(format!("{} logits vs {} targets", logits.len(), targets.len()));
    }
    let softplus = |x: f64| x.max(0.0) + (-x.abs()).exp().ln_1p();
    let total: f64 = logits
        .iter()
        .zip(targets)
        .map(|(&x, &y)| y * softplus(-x) + (1.0 - y) * softplus(x))
        .sum();
    Ok(total / logits.len() as f64)
}

#[derive(Debug)]
pub struct TypingModel {
    config: ModelConfig,
    vocabs: Vocabularies,
    store: ParamStore,
}

impl TypingModel {
    /// Registers freshly initialised parameters. Every shape is fixed here,
    /// including the head width, so configuration errors surface once.
    pub fn new(encoder: EncoderConfig, ablation: AblationConfig, num_classes: usize, vocabs: Vocabularies, seed: u64) -> Result<Self> {
        encoder.validate()?;
        ablation.validate()?;
        if num_classes == 0 {
            return contract("label space is empty");
        }
        let config = ModelConfig {
            num_classes,
            text_vocab_size: vocabs.text.len(),
            atom_vocab_size: vocabs.atoms.table_size(),
            bond_vocab_size: vocabs.bonds.table_size(),
            encoder,
            ablation,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let store = build_store(&config, &mut rng)?;
        let model = Self { config, vocabs, store };
        model.check_widths()?;
        Ok(model)
    }

    fn check_widths(&self) -> Result<()> {
        let d = self.config.encoder.d;
        let width = self.config.ablation.head_width(d);
        if let Some(named) = Ablation::from_config(&self.config.ablation) {
            if width != named.width_multiple() * d {
                return contract(format!(
                    "{named} head width {width} differs from the expected {}d",
                    named.width_multiple()
                ));
            }
        }
        let head = self
            .store
            .get("head.w")
            .ok_or_else(|| ModelError::Contract("head.w is not registered".into()))?;
        if head.shape() != [width, self.config.num_classes] {
            return contract(format!(
                "head.w has shape {:?}, expected [{width}, {}]",
                head.shape(),
                self.config.num_classes
            ));
        }
        Ok(())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn vocabs(&self) -> &Vocabularies {
        &self.vocabs
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn head_width(&self) -> usize {
        self.store.get("head.w").map_or(0, Tensor::rows)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(save_checkpoint(path, &self.config, &self.store)?)
    }

    /// Rebuilds the layout from the checkpoint header and loads values.
    pub fn load(path: &Path, vocabs: Vocabularies) -> Result<Self> {
        let header: ModelConfig = read_checkpoint_header(path)?;
        let mut model = Self::new(header.encoder.clone(), header.ablation, header.num_classes, vocabs, 0)?;
        if model.config != header {
            return contract(format!(
                "vocabulary sizes ({}, {}, {}) do not match the checkpoint ({}, {}, {})",
                model.config.text_vocab_size,
                model.config.atom_vocab_size,
                model.config.bond_vocab_size,
                header.text_vocab_size,
                header.atom_vocab_size,
                header.bond_vocab_size
            ));
        }
        let _: ModelConfig = load_checkpoint(path, &mut model.store)?;
        Ok(model)
    }

    /// Tokenizes the context and parses the linked structure. A record
    /// whose SMILES fails to parse is treated as unlinkable.
    pub fn prepare(&self, ex: &TrainingExample) -> Result<PreparedExample> {
        if ex.gold.len() != self.config.num_classes {
            return contract(format!(
                "gold vector has {} entries, label space has {}",
                ex.gold.len(),
                self.config.num_classes
            ));
        }
        check_targets(&ex.gold)?;
        let max_len = self.config.encoder.max_len;
        let marked = marked_sequence(&self.vocabs.text, &ex.tokens, ex.start, ex.end, max_len)?;
        let masked = masked_sequence(&self.vocabs.text, &ex.tokens, ex.start, ex.end, max_len)?;
        let (graph, description) = match &ex.definition {
            ResolveResult::Linked(rec) => match parse_smiles(&rec.smiles) {
                Ok(g) if g.atom_count() > 0 => (
                    Some(vocab_index(&g, &self.vocabs.atoms, &self.vocabs.bonds)),
                    Some(description_sequence(&self.vocabs.text, &rec.description, max_len)),
                ),
                Ok(_) | Err(_) => {
                    warn!(record = %rec.canonical_name, "unusable structure; treating mention as unlinkable");
                    (None, None)
                }
            },
            ResolveResult::Unlinkable => (None, None),
        };
        Ok(PreparedExample {
            marked,
            masked,
            graph,
            description,
            gold: ex.gold.clone(),
        })
    }

    pub fn prepare_all(&self, examples: &[TrainingExample]) -> Result<Vec<PreparedExample>> {
        examples.iter().map(|e| self.prepare(e)).collect()
    }

    /// Concatenated head input `[m_L; f_cm; f_g; d_cls]`, minus whatever the
    /// ablation drops.
    pub fn features(&self, tape: &Tape, ex: &PreparedExample) -> Result<Var> {
        let cfg = &self.config.encoder;
        let ab = &self.config.ablation;
        let store = &self.store;
        let mut parts = Vec::with_capacity(4);
        if ab.use_context_only {
            parts.push(encode_context(tape, store, cfg, &ex.marked, &ex.masked)?.m_l);
        } else {
            parts.push(encode_focus(tape, store, cfg, &ex.marked)?);
        }
        match (&ex.graph, &ex.description) {
            (Some(graph), Some(desc)) => {
                let nodes = if ab.use_graph {
                    Some(encode_graph(tape, store, cfg, graph)?)
                } else {
                    None
                };
                let description = if ab.use_description {
                    Some(encode_description(tape, store, cfg, desc)?)
                } else {
                    None
                };
                match (&nodes, &description) {
                    (Some(n), Some(dsc)) if ab.use_cross_modal => {
                        let f = fuse_cross_modal(tape, store, cfg, n.nodes, dsc)?;
                        parts.extend([f.f_cm, f.f_g, f.d_cls]);
                    }
                    _ => {
                        if let Some(n) = &nodes {
                            parts.push(graph_pool(tape, n)?);
                        }
                        if let Some(dsc) = &description {
                            parts.push(dsc.d_cls);
                        }
                    }
                }
            }
            (None, None) => {
                if ab.use_cross_modal {
                    parts.push(tape.param(store, "missing.f_cm")?);
                }
                if ab.use_graph {
                    parts.push(tape.param(store, "missing.f_g")?);
                }
                if ab.use_description {
                    parts.push(tape.param(store, "missing.d_cls")?);
                }
            }
            _ => return contract("graph and description must be both present or both absent"),
        }
        Ok(if parts.len() == 1 { parts[0] } else { tape.concat(&parts)? })
    }

    /// Pre-sigmoid class scores.
    pub fn logits(&self, tape: &Tape, ex: &PreparedExample) -> Result<Var> {
        let h = self.features(tape, ex)?;
        let y = tape.matmul(h, tape.param(&self.store, "head.w")?)?;
        Ok(tape.add(y, tape.param(&self.store, "head.b")?)?)
    }

    pub fn loss(&self, tape: &Tape, ex: &PreparedExample) -> Result<Var> {
        let logits = self.logits(tape, ex)?;
        soft_margin_loss(tape, logits, &ex.gold)
    }

    pub fn probs(&self, ex: &PreparedExample) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let logits = self.logits(&tape, ex)?;
        Ok(tape.data(tape.sigmoid(logits)))
    }

    pub fn predict(&self, ex: &PreparedExample, threshold: f64) -> Result<Prediction> {
        let probs = self.probs(ex)?;
        let predicted = decide(&probs, threshold);
        Ok(Prediction { probs, predicted })
    }

    pub fn predict_all(&self, examples: &[PreparedExample], threshold: f64) -> Result<Vec<Prediction>> {
        examples.iter().map(|e| self.predict(e, threshold)).collect()
    }

    /// Mean loss over `examples` without touching gradients.
    pub fn mean_loss(&self, examples: &[PreparedExample]) -> Result<f64> {
        if examples.is_empty() {
            return contract("mean loss over zero examples");
        }
        let mut total = 0.0;
        for ex in examples {
            let tape = Tape::new();
            let l = self.loss(&tape, ex)?;
            total += tape.item(l);
        }
        Ok(total / examples.len() as f64)
    }

    /// Micro F1 and exact-match accuracy of thresholded predictions.
    pub fn score(&self, examples: &[PreparedExample], threshold: f64) -> Result<(f64, f64)> {
        let pred: Vec<BTreeSet<usize>> = self
            .predict_all(examples, threshold)?
            .into_iter()
            .map(|p| p.predicted)
            .collect();
        let gold: Vec<BTreeSet<usize>> = examples.iter().map(|e| gold_indices(&e.gold)).collect();
        let (f1, _) = micro_f1(&pred, &gold).expect("equal lengths");
        let acc = sample_accuracy(&pred, &gold).expect("equal lengths");
        Ok((f1, acc))
    }
}

/// Output-layer weights start small so the first updates do not overshoot.
const HEAD_INIT: f64 = 0.05;

fn build_store(config: &ModelConfig, rng: &mut impl Rng) -> Result<ParamStore> {
    let enc = &config.encoder;
    let ab = &config.ablation;
    let d = enc.d;
    let mut store = ParamStore::default();
    register_text_params(&mut store, enc, config.text_vocab_size, rng)?;
    if ab.use_graph {
        register_graph_params(&mut store, enc, config.atom_vocab_size, config.bond_vocab_size, rng)?;
    }
    if ab.use_cross_modal {
        register_fusion_params(&mut store, enc, rng)?;
    }
    let missing = [
        ("missing.f_cm", ab.use_cross_modal),
        ("missing.f_g", ab.use_graph),
        ("missing.d_cls", ab.use_description),
    ];
    for (name, used) in missing {
        if used {
            let data = (0..d).map(|_| rng.random_range(-0.1..0.1)).collect();
            store.register(name, Tensor::vector(data)?)?;
        }
    }
    let width = ab.head_width(d);
    let bound = HEAD_INIT;
    let data = (0..width * config.num_classes)
        .map(|_| rng.random_range(-bound..bound))
        .collect();
    store.register("head.w", Tensor::matrix(width, config.num_classes, data)?)?;
    store.register("head.b", Tensor::vector(vec![0.0; config.num_classes])?)?;
    Ok(store)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub threshold: f64,
    pub optimizer: Optimizer,
    /// When set, `epoch_NNN.json` checkpoints are written here.
    #[serde(skip)]
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 16,
            epochs: 50,
            seed: 13,
            threshold: 0.5,
            optimizer: Optimizer::default(),
            checkpoint_dir: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_micro_f1: f64,
    pub dev_accuracy: f64,
}

/// Epoch-at-a-time training with a seeded shuffle.
#[derive(Debug)]
pub struct Trainer {
    cfg: TrainConfig,
    rng: ChaCha8Rng,
    epoch: usize,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        if cfg.batch_size == 0 {
            return contract("batch size must be positive");
        }
        if !(cfg.lr >= 0.0 && cfg.lr.is_finite()) {
            return contract(format!("learning rate {} must be finite and non-negative", cfg.lr));
        }
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Self { cfg, rng, epoch: 0 })
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    /// One pass over `train` in shuffled mini-batches. Each batch's loss is
    /// the mean over its examples.
    pub fn run_epoch(&mut self, model: &mut TypingModel, train: &[PreparedExample], dev: &[PreparedExample]) -> Result<EpochRecord> {
        if train.is_empty() {
            return contract("training set is empty");
        }
        if model.store.optimizer() != self.cfg.optimizer {
            model.store.set_optimizer(self.cfg.optimizer);
        }
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        let mut total = 0.0;
        for batch in order.chunks(self.cfg.batch_size) {
            model.store.zero_grad();
            let tape = Tape::new();
            let mut losses = Vec::with_capacity(batch.len());
            for &i in batch {
                losses.push(model.loss(&tape, &train[i])?);
            }
            let sum = if losses.len() == 1 {
                losses[0]
            } else {
                tape.sum(tape.concat(&losses)?)
            };
            let mean = tape.scale(sum, 1.0 / batch.len() as f64);
            total += tape.item(sum);
            tape.backward(mean, &mut model.store)?;
            model.store.step(self.cfg.lr)?;
        }
        self.epoch += 1;
        let (dev_micro_f1, dev_accuracy) = if dev.is_empty() {
            (0.0, 0.0)
        } else {
            model.score(dev, self.cfg.threshold)?
        };
        let rec = EpochRecord {
            epoch: self.epoch,
            train_loss: total / train.len() as f64,
            dev_micro_f1,
            dev_accuracy,
        };
        debug!(?rec, "epoch finished");
        if let Some(dir) = &self.cfg.checkpoint_dir {
            model.save(&dir.join(format!("epoch_{:03}.json", self.epoch)))?;
        }
        Ok(rec)
    }
}

/// Runs `cfg.epochs` epochs and returns the per-epoch log.
pub fn train(model: &mut TypingModel, train: &[PreparedExample], dev: &[PreparedExample], cfg: &TrainConfig) -> Result<Vec<EpochRecord>> {
    let mut trainer = Trainer::new(cfg.clone())?;
    (0..cfg.epochs)
        .map(|_| trainer.run_epoch(model, train, dev))
        .collect()
}
