//! Encoders and the typer checked against a plain nested-loop
//! re-implementation of the same forward pass.

mod common;

use chemtyper::encoders::{
    description_sequence, encode_context, encode_description, encode_graph, fuse_cross_modal, marked_sequence,
    masked_sequence, register_fusion_params, register_graph_params, register_text_params, EncodedDescription,
    EncoderConfig, TextVocab,
};
use chemtyper::molecule::{base_atom_vocab, base_bond_vocab, parse_smiles, vocab_index, IndexedGraph};
use chemtyper::tensor::{ParamStore, Tape, Tensor};
use chemtyper::typer::{Ablation, TrainingExample, TypingModel, Vocabularies};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

type M = Vec<Vec<f64>>;

mod oracle {
    use super::*;

    pub fn mat(store: &ParamStore, name: &str) -> M {
        let t = store.get(name).unwrap();
        (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
    }

    pub fn vec(store: &ParamStore, name: &str) -> Vec<f64> {
        store.get(name).unwrap().data().to_vec()
    }

    pub fn mm(a: &M, b: &M) -> M {
        let n = b[0].len();
        a.iter()
            .map(|row| {
                (0..n)
                    .map(|j| row.iter().enumerate().map(|(k, x)| x * b[k][j]).sum())
                    .collect()
            })
            .collect()
    }

    pub fn affine(x: &M, w: &M, b: &[f64]) -> M {
        mm(x, w)
            .into_iter()
            .map(|r| r.iter().zip(b).map(|(a, c)| a + c).collect())
            .collect()
    }

    fn add(a: &M, b: &M) -> M {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
            .collect()
    }

    fn layer_norm(x: &M, g: &[f64], b: &[f64]) -> M {
        x.iter()
            .map(|row| {
                let n = row.len() as f64;
                let mu = row.iter().sum::<f64>() / n;
                let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
                row.iter()
                    .enumerate()
                    .map(|(j, v)| (v - mu) / (var + 1e-5).sqrt() * g[j] + b[j])
                    .collect()
            })
            .collect()
    }

    fn gelu(x: f64) -> f64 {
        0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
    }

    pub fn transformer(store: &ParamStore, p: &str, x: &M, heads: usize) -> M {
        let d = x[0].len();
        let dh = d / heads;
        let q = affine(x, &mat(store, &format!("{p}.wq")), &vec(store, &format!("{p}.bq")));
        let k = affine(x, &mat(store, &format!("{p}.wk")), &vec(store, &format!("{p}.bk")));
        let v = affine(x, &mat(store, &format!("{p}.wv")), &vec(store, &format!("{p}.bv")));
        let z = x.len();
        let mut attn = vec![vec![0.0; d]; z];
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..z {
                let scores: Vec<f64> = (0..z)
                    .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                let tot: f64 = e.iter().sum();
                for c in cols.clone() {
                    attn[i][c] = (0..z).map(|j| e[j] / tot * v[j][c]).sum();
                }
            }
        }
        let o = affine(&attn, &mat(store, &format!("{p}.wo")), &vec(store, &format!("{p}.bo")));
        let x1 = layer_norm(&add(x, &o), &vec(store, &format!("{p}.ln1_g")), &vec(store, &format!("{p}.ln1_b")));
        let h: M = affine(&x1, &mat(store, &format!("{p}.ff_w1")), &vec(store, &format!("{p}.ff_b1")))
            .into_iter()
            .map(|r| r.into_iter().map(gelu).collect())
            .collect();
        let f = affine(&h, &mat(store, &format!("{p}.ff_w2")), &vec(store, &format!("{p}.ff_b2")));
        layer_norm(&add(&x1, &f), &vec(store, &format!("{p}.ln2_g")), &vec(store, &format!("{p}.ln2_b")))
    }

    pub fn text(store: &ParamStore, cfg: &EncoderConfig, ids: &[usize]) -> M {
        let emb = mat(store, "text.tok_emb");
        let d = cfg.d;
        let mut x: M = ids
            .iter()
            .enumerate()
            .map(|(pos, &id)| {
                (0..d)
                    .map(|j| {
                        let even = j - j % 2;
                        let angle = pos as f64 / 10000f64.powf(even as f64 / d as f64);
                        emb[id][j] + if j % 2 == 0 { angle.sin() } else { angle.cos() }
                    })
                    .collect()
            })
            .collect();
        for l in 0..cfg.text_layers {
            x = transformer(store, &format!("text.layer{l}"), &x, cfg.heads);
        }
        x
    }

    pub fn graph(store: &ParamStore, cfg: &EncoderConfig, g: &IndexedGraph) -> M {
        let atom = mat(store, "graph.atom_emb");
        let bond = mat(store, "graph.bond_emb");
        let mut n: M = g.atom_types.iter().map(|&t| atom[t].clone()).collect();
        for l in 0..cfg.gin_layers {
            let mut agg: M = n
                .iter()
                .map(|r| r.iter().map(|v| (1.0 + cfg.epsilon) * v).collect())
                .collect();
            for (b, &(i, j)) in g.bond_endpoints.iter().enumerate() {
                let e = &bond[g.bond_types[b]];
                for c in 0..cfg.d {
                    agg[i][c] += n[j][c] + e[c];
                    agg[j][c] += n[i][c] + e[c];
                }
            }
            let h: M = affine(&agg, &mat(store, &format!("graph.gin{l}.w1")), &vec(store, &format!("graph.gin{l}.b1")))
                .into_iter()
                .map(|r| r.into_iter().map(f64::tanh).collect())
                .collect();
            n = affine(&h, &mat(store, &format!("graph.gin{l}.w2")), &vec(store, &format!("graph.gin{l}.b2")));
        }
        n
    }

    pub fn mean_rows(x: &M) -> Vec<f64> {
        let n = x.len() as f64;
        (0..x[0].len()).map(|c| x.iter().map(|r| r[c]).sum::<f64>() / n).collect()
    }

    pub fn fuse(store: &ParamStore, cfg: &EncoderConfig, nodes: &M, desc: &M) -> Vec<f64> {
        let mut x = nodes.clone();
        x.extend(desc.iter().cloned());
        mean_rows(&transformer(store, "fusion", &x, cfg.heads))
    }
}

/// Replaces every parameter with fresh uniform noise so biases and
/// layer-norm affine terms are exercised too.
fn randomize(store: &mut ParamStore, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for n in names {
        for v in store.get_mut(&n).unwrap().data_mut() {
            *v = rng.random_range(-0.8..0.8);
        }
    }
}

fn tiny_cfg() -> EncoderConfig {
    EncoderConfig {
        d: 4,
        text_layers: 1,
        heads: 2,
        ffn_mult: 4,
        gin_layers: 1,
        epsilon: 0.25,
        max_len: 16,
    }
}

fn tiny_vocab() -> TextVocab {
    let mut v = TextVocab::new();
    v.add_text("we add benzoic acid to the flask . a white solid");
    v
}

fn store_for(cfg: &EncoderConfig, vocab: &TextVocab, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::default();
    register_text_params(&mut store, cfg, vocab.len(), &mut rng).unwrap();
    register_graph_params(&mut store, cfg, base_atom_vocab().table_size(), base_bond_vocab().table_size(), &mut rng)
        .unwrap();
    register_fusion_params(&mut store, cfg, &mut rng).unwrap();
    randomize(&mut store, seed + 1);
    store
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() < tol, "{a:?} vs {b:?}");
    }
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

#[test]
fn mention_embedding_matches_oracle() {
    let cfg = tiny_cfg();
    let vocab = tiny_vocab();
    let store = store_for(&cfg, &vocab, 3);
    let toks = words("we add benzoic acid to the flask");
    let marked = marked_sequence(&vocab, &toks, 2, 4, cfg.max_len).unwrap();
    let masked = masked_sequence(&vocab, &toks, 2, 4, cfg.max_len).unwrap();
    let tape = Tape::new();
    let em = encode_context(&tape, &store, &cfg, &marked, &masked).unwrap();
    let want_m = oracle::text(&store, &cfg, &marked.ids)[marked.focus].clone();
    let want_mask = oracle::text(&store, &cfg, &masked.ids)[masked.focus].clone();
    assert_close(&tape.data(em.m), &want_m, 1e-12);
    assert_close(&tape.data(em.m_mask), &want_mask, 1e-12);
    let mut cat = want_m.clone();
    cat.extend(want_mask);
    assert_close(&tape.data(em.m_l), &cat, 1e-12);
}

#[test]
fn two_node_gin_by_hand() {
    let cfg = EncoderConfig {
        d: 2,
        heads: 1,
        gin_layers: 1,
        epsilon: 0.5,
        ..tiny_cfg()
    };
    let mut store = ParamStore::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    register_graph_params(&mut store, &cfg, 3, 2, &mut rng).unwrap();
    let set = |s: &mut ParamStore, n: &str, v: &[f64]| s.get_mut(n).unwrap().data_mut().copy_from_slice(v);
    set(&mut store, "graph.atom_emb", &[0.1, 0.2, 0.0, 0.0, 0.3, -0.1]);
    set(&mut store, "graph.bond_emb", &[0.05, 0.05, 9.0, 9.0]);
    set(&mut store, "graph.gin0.w1", &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, -1.0]);
    set(&mut store, "graph.gin0.b1", &[0.0; 4]);
    set(&mut store, "graph.gin0.w2", &[1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    set(&mut store, "graph.gin0.b2", &[0.0, 0.0]);
    let g = IndexedGraph {
        atom_types: vec![0, 2],
        bond_types: vec![0],
        bond_endpoints: vec![(0, 1)],
    };
    let tape = Tape::new();
    let ge = encode_graph(&tape, &store, &cfg, &g).unwrap();
    // (1 + 0.5)·[0.1, 0.2] + [0.3, -0.1] + [0.05, 0.05] = [0.5, 0.25]; the
    // first layer copies both coordinates into tanh and the second keeps them.
    let n = tape.data(ge.nodes);
    assert!((n[0] - 0.5f64.tanh()).abs() < 1e-15);
    assert!((n[1] - 0.25f64.tanh()).abs() < 1e-15);
    assert!((n[0] - 0.462_117_157_260_009_8).abs() < 1e-12);
    assert!((n[1] - 0.244_918_662_403_709_1).abs() < 1e-12);
}

#[test]
fn graph_encoder_matches_oracle() {
    let cfg = EncoderConfig {
        gin_layers: 3,
        ..tiny_cfg()
    };
    let store = store_for(&cfg, &tiny_vocab(), 5);
    let g = vocab_index(&parse_smiles("OC(=O)c1ccccc1").unwrap(), &base_atom_vocab(), &base_bond_vocab());
    let tape = Tape::new();
    let got = encode_graph(&tape, &store, &cfg, &g).unwrap();
    let want: Vec<f64> = oracle::graph(&store, &cfg, &g).concat();
    assert_close(&tape.data(got.nodes), &want, 1e-12);
}

#[test]
fn fusion_matches_oracle() {
    let cfg = tiny_cfg();
    let store = store_for(&cfg, &tiny_vocab(), 8);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let nodes: M = (0..2).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let desc: M = (0..2).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let tape = Tape::new();
    let n = tape.constant(Tensor::from_rows(&nodes).unwrap());
    let rows = tape.constant(Tensor::from_rows(&desc).unwrap());
    let ed = EncodedDescription {
        rows,
        d_cls: tape.row(rows, 0).unwrap(),
    };
    let f = fuse_cross_modal(&tape, &store, &cfg, n, &ed).unwrap();
    assert_close(&tape.data(f.f_cm), &oracle::fuse(&store, &cfg, &nodes, &desc), 1e-12);
    assert_close(&tape.data(f.f_g), &oracle::mean_rows(&nodes), 1e-15);
    assert_eq!(tape.data(f.d_cls), desc[0]);
    assert_eq!(tape.shape(f.f), vec![12]);
}

#[test]
fn fusion_rejects_width_mismatch() {
    let cfg = tiny_cfg();
    let store = store_for(&cfg, &tiny_vocab(), 8);
    let tape = Tape::new();
    let n = tape.constant(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
    let rows = tape.constant(Tensor::matrix(2, 4, vec![0.0; 8]).unwrap());
    let ed = EncodedDescription {
        rows,
        d_cls: tape.row(rows, 0).unwrap(),
    };
    assert!(fuse_cross_modal(&tape, &store, &cfg, n, &ed).is_err());
}

#[test]
fn identical_single_rows_fuse_to_shared_row() {
    let cfg = tiny_cfg();
    let store = store_for(&cfg, &tiny_vocab(), 12);
    let r = vec![0.3, -0.2, 0.9, 0.1];
    let tape = Tape::new();
    let n = tape.constant(Tensor::from_rows(&[r.clone()]).unwrap());
    let rows = tape.constant(Tensor::from_rows(&[r.clone()]).unwrap());
    let ed = EncodedDescription {
        rows,
        d_cls: tape.row(rows, 0).unwrap(),
    };
    let f = fuse_cross_modal(&tape, &store, &cfg, n, &ed).unwrap();
    let out = oracle::transformer(&store, "fusion", &vec![r.clone(), r], cfg.heads);
    assert_close(&out[0], &out[1], 1e-15);
    assert_close(&tape.data(f.f_cm), &out[0], 1e-12);
}

#[test]
fn masked_embedding_ignores_mention_surface() {
    let cfg = tiny_cfg();
    let mut vocab = tiny_vocab();
    vocab.insert("xyzchem-42");
    let store = store_for(&cfg, &vocab, 2);
    let a = words("we add benzoic acid to the flask");
    let b = words("we add XyzChem-42 to the flask");
    let tape = Tape::new();
    let ea = encode_context(
        &tape,
        &store,
        &cfg,
        &marked_sequence(&vocab, &a, 2, 4, 16).unwrap(),
        &masked_sequence(&vocab, &a, 2, 4, 16).unwrap(),
    )
    .unwrap();
    let eb = encode_context(
        &tape,
        &store,
        &cfg,
        &marked_sequence(&vocab, &b, 2, 3, 16).unwrap(),
        &masked_sequence(&vocab, &b, 2, 3, 16).unwrap(),
    )
    .unwrap();
    let bits = |v: Vec<f64>| v.into_iter().map(f64::to_bits).collect::<Vec<_>>();
    assert_eq!(bits(tape.data(ea.m_mask)), bits(tape.data(eb.m_mask)));
    assert_ne!(tape.data(ea.m), tape.data(eb.m));
}

#[test]
fn full_typer_logits_match_oracle() {
    let cfg = tiny_cfg();
    let vocabs = Vocabularies {
        text: tiny_vocab(),
        atoms: base_atom_vocab(),
        bonds: base_bond_vocab(),
    };
    let mut model = TypingModel::new(cfg.clone(), Ablation::Full.config(), 3, vocabs.clone(), 6).unwrap();
    randomize(model.store_mut(), 77);
    let ex = TrainingExample {
        tokens: words("we add benzoic acid to the flask"),
        start: 2,
        end: 4,
        surface: "benzoic acid".into(),
        definition: chemtyper::resolver::ResolveResult::Linked(Arc::new(common::record(
            "benzoic acid",
            "OC(=O)c1ccccc1",
            "a white solid",
        ))),
        gold: vec![1.0, 0.0, 0.0],
    };
    let prepared = model.prepare(&ex).unwrap();
    let tape = Tape::new();
    let logits = model.logits(&tape, &prepared).unwrap();

    let store = model.store();
    let marked = marked_sequence(&vocabs.text, &ex.tokens, 2, 4, cfg.max_len).unwrap();
    let masked = masked_sequence(&vocabs.text, &ex.tokens, 2, 4, cfg.max_len).unwrap();
    let desc = description_sequence(&vocabs.text, "a white solid", cfg.max_len);
    let graph = vocab_index(&parse_smiles("OC(=O)c1ccccc1").unwrap(), &vocabs.atoms, &vocabs.bonds);
    let m = oracle::text(store, &cfg, &marked.ids)[marked.focus].clone();
    let m_mask = oracle::text(store, &cfg, &masked.ids)[masked.focus].clone();
    let d_rows = oracle::text(store, &cfg, &desc.ids);
    let nodes = oracle::graph(store, &cfg, &graph);
    let f_cm = oracle::fuse(store, &cfg, &nodes, &d_rows);
    let f_g = oracle::mean_rows(&nodes);
    let h = [m, m_mask, f_cm, f_g, d_rows[0].clone()].concat();
    assert_eq!(h.len(), 20);
    let want = oracle::affine(&vec![h], &oracle::mat(store, "head.w"), &oracle::vec(store, "head.b"));
    assert_close(&tape.data(logits), &want[0], 1e-11);
}

#[test]
fn unlinkable_uses_missing_vectors() {
    let cfg = tiny_cfg();
    let vocabs = Vocabularies {
        text: tiny_vocab(),
        atoms: base_atom_vocab(),
        bonds: base_bond_vocab(),
    };
    let model = TypingModel::new(cfg.clone(), Ablation::Full.config(), 3, vocabs.clone(), 6).unwrap();
    let ex = TrainingExample {
        tokens: words("we add benzoic acid"),
        start: 2,
        end: 4,
        surface: "benzoic acid".into(),
        definition: chemtyper::resolver::ResolveResult::Unlinkable,
        gold: vec![0.0, 1.0, 0.0],
    };
    let prepared = model.prepare(&ex).unwrap();
    let tape = Tape::new();
    let h = tape.data(model.features(&tape, &prepared).unwrap());
    let store = model.store();
    assert_eq!(&h[8..12], store.get("missing.f_cm").unwrap().data());
    assert_eq!(&h[12..16], store.get("missing.f_g").unwrap().data());
    assert_eq!(&h[16..20], store.get("missing.d_cls").unwrap().data());
}

fn random_smiles(rng: &mut ChaCha8Rng) -> String {
    const PARTS: &[&str] = &["C", "N", "O", "C(=O)", "c1ccccc1", "C=C", "C#N", "Cl", "S", "C(C)"];
    let n = rng.random_range(1..6);
    let mut s: String = (0..n).map(|_| PARTS[rng.random_range(0..PARTS.len())]).collect();
    if s.ends_with(')') {
        s.push('C');
    }
    s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn graph_pool_is_permutation_invariant(seed in 0u64..10_000) {
        let cfg = tiny_cfg();
        let store = store_for(&cfg, &tiny_vocab(), 9);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = parse_smiles(&random_smiles(&mut rng)).unwrap();
        let mut perm: Vec<usize> = (0..g.atom_count()).collect();
        perm.shuffle(&mut rng);
        let (av, bv) = (base_atom_vocab(), base_bond_vocab());
        let tape = Tape::new();
        let a = encode_graph(&tape, &store, &cfg, &vocab_index(&g, &av, &bv)).unwrap();
        let b = encode_graph(&tape, &store, &cfg, &vocab_index(&g.permuted(&perm), &av, &bv)).unwrap();
        let pa = tape.data(tape.mean(a.nodes, 0).unwrap());
        let pb = tape.data(tape.mean(b.nodes, 0).unwrap());
        for (x, y) in pa.iter().zip(&pb) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn cross_modal_ignores_node_order(seed in 0u64..10_000, a in 1usize..6) {
        let cfg = tiny_cfg();
        let store = store_for(&cfg, &tiny_vocab(), 10);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let nodes: M = (0..a).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let mut shuffled = nodes.clone();
        shuffled.shuffle(&mut rng);
        let desc = description_sequence(&tiny_vocab(), "a white solid", 16);
        let tape = Tape::new();
        let ed = encode_description(&tape, &store, &cfg, &desc).unwrap();
        let f1 = fuse_cross_modal(&tape, &store, &cfg, tape.constant(Tensor::from_rows(&nodes).unwrap()), &ed).unwrap();
        let f2 = fuse_cross_modal(&tape, &store, &cfg, tape.constant(Tensor::from_rows(&shuffled).unwrap()), &ed).unwrap();
        for (x, y) in tape.data(f1.f_cm).iter().zip(&tape.data(f2.f_cm)) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }
}
