//! SMILES-subset parsing into molecular graphs.
//!
//! Supported: organic-subset atoms, aromatic lowercase atoms, bracket atoms
//! with hydrogen count and charge, bond symbols `- = # :`, branches, ring
//! closures (`1`-`9`, `%nn`) and `.` component separators. Stereo marks,
//! isotopes and wildcards are rejected.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SmilesError {
    #[error("empty SMILES string")]
    Empty,
    #[error("ring closure error at {pos}: {detail}")]
    RingClosure { pos: usize, detail: String },
    #[error("branch error at {pos}: {detail}")]
    Branch { pos: usize, detail: String },
    #[error("unknown element `{symbol}` at {pos}")]
    Element { pos: usize, symbol: String },
    #[error("dangling bond symbol at {pos}")]
    DanglingBond { pos: usize },
    #[error("unsupported or malformed SMILES at {pos}: {detail}")]
    Syntax { pos: usize, detail: String },
}

const ELEMENTS: [&str; 118] = [
    "H", "He", "Li", "Be", "B", "C", "N", "O", "F", "Ne", "Na", "Mg", "Al", "Si", "P", "S", "Cl",
    "Ar", "K", "Ca", "Sc", "Ti", "V", "Cr", "Mn", "Fe", "Co", "Ni", "Cu", "Zn", "Ga", "Ge", "As",
    "Se", "Br", "Kr", "Rb", "Sr", "Y", "Zr", "Nb", "Mo", "Tc", "Ru", "Rh", "Pd", "Ag", "Cd", "In",
    "Sn", "Sb", "Te", "I", "Xe", "Cs", "Ba", "La", "Ce", "Pr", "Nd", "Pm", "Sm", "Eu", "Gd", "Tb",
    "Dy", "Ho", "Er", "Tm", "Yb", "Lu", "Hf", "Ta", "W", "Re", "Os", "Ir", "Pt", "Au", "Hg", "Tl",
    "Pb", "Bi", "Po", "At", "Rn", "Fr", "Ra", "Ac", "Th", "Pa", "U", "Np", "Pu", "Am", "Cm", "Bk",
    "Cf", "Es", "Fm", "Md", "No", "Lr", "Rf", "Db", "Sg", "Bh", "Hs", "Mt", "Ds", "Rg", "Cn", "Nh",
    "Fl", "Mc", "Lv", "Ts", "Og",
];

/// The ten elements writable without brackets.
pub const ORGANIC_SUBSET: [&str; 10] = ["B", "C", "N", "O", "P", "S", "F", "Cl", "Br", "I"];

const AROMATIC_ORGANIC: [&str; 6] = ["b", "c", "n", "o", "p", "s"];
const AROMATIC_BRACKET: [&str; 9] = ["b", "c", "n", "o", "p", "s", "se", "as", "te"];

fn is_element(sym: &str) -> bool {
    ELEMENTS.contains(&sym)
}

fn capitalize(sym: &str) -> String {
    let mut c = sym.chars();
    match c.next() {
        Some(f) => f.to_ascii_uppercase().to_string() + c.as_str(),
        None => String::new(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BondOrder {
    Single,
    Double,
    Triple,
    Aromatic,
}

impl BondOrder {
    pub const ALL: [BondOrder; 4] = [
        BondOrder::Single,
        BondOrder::Double,
        BondOrder::Triple,
        BondOrder::Aromatic,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BondOrder::Single => "single",
            BondOrder::Double => "double",
            BondOrder::Triple => "triple",
            BondOrder::Aromatic => "aromatic",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|b| b.name() == name)
    }

    fn from_symbol(c: char) -> Option<Self> {
        match c {
            '-' => Some(BondOrder::Single),
            '=' => Some(BondOrder::Double),
            '#' => Some(BondOrder::Triple),
            ':' => Some(BondOrder::Aromatic),
            _ => None,
        }
    }

    fn symbol(self) -> char {
        match self {
            BondOrder::Single => '-',
            BondOrder::Double => '=',
            BondOrder::Triple => '#',
            BondOrder::Aromatic => ':',
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Atom {
    /// Capitalized element symbol, e.g. `C`, `Cl`, `Se`.
    pub element: String,
    pub aromatic: bool,
    #[serde(rename = "charge")]
    pub formal_charge: i8,
    #[serde(skip)]
    pub explicit_h: Option<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Bond {
    pub endpoints: (usize, usize),
    pub order: BondOrder,
}

impl Bond {
    pub fn other(&self, atom: usize) -> usize {
        if self.endpoints.0 == atom {
            self.endpoints.1
        } else {
            self.endpoints.0
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoleculeGraph {
    atoms: Vec<Atom>,
    bonds: Vec<Bond>,
    /// Per atom: `(neighbor, bond index)`.
    adjacency: Vec<Vec<(usize, usize)>>,
}

/// Per-atom isomorphism-invariant signature: element, aromatic flag, degree
/// and sorted incident bond orders.
pub type AtomSignature = (String, bool, usize, Vec<BondOrder>);

impl MoleculeGraph {
    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn bonds(&self) -> &[Bond] {
        &self.bonds
    }

    pub fn neighbors(&self, atom: usize) -> &[(usize, usize)] {
        &self.adjacency[atom]
    }

    pub fn atom_count(&self) -> usize {
        self.atoms.len()
    }

    pub fn bond_count(&self) -> usize {
        self.bonds.len()
    }

    pub fn component_count(&self) -> usize {
        let mut seen = vec![false; self.atoms.len()];
        let mut count = 0;
        for start in 0..self.atoms.len() {
            if seen[start] {
                continue;
            }
            count += 1;
            let mut stack = vec![start];
            seen[start] = true;
            while let Some(a) = stack.pop() {
                for &(n, _) in &self.adjacency[a] {
                    if !seen[n] {
                        seen[n] = true;
                        stack.push(n);
                    }
                }
            }
        }
        count
    }

    /// Builds a graph from parts, checking the bond invariants.
    pub fn from_parts(atoms: Vec<Atom>, bonds: Vec<Bond>) -> Result<Self, SmilesError> {
        let mut g = MoleculeGraph {
            adjacency: vec![Vec::new(); atoms.len()],
            atoms,
            bonds: Vec::new(),
        };
        if g.atoms.is_empty() {
            return Err(SmilesError::Empty);
        }
        for b in bonds {
            g.add_bond(b.endpoints.0, b.endpoints.1, b.order)
                .map_err(|detail| SmilesError::Syntax { pos: 0, detail })?;
        }
        Ok(g)
    }

    fn add_bond(&mut self, a: usize, b: usize, order: BondOrder) -> Result<(), String> {
        if a == b {
            return Err(format!("atom {a} bonded to itself"));
        }
        if a >= self.atoms.len() || b >= self.atoms.len() {
            return Err(format!("bond {a}-{b} outside {} atoms", self.atoms.len()));
        }
        if self.adjacency[a].iter().any(|&(n, _)| n == b) {
            return Err(format!("duplicate bond between atoms {a} and {b}"));
        }
        let idx = self.bonds.len();
        self.bonds.push(Bond {
            endpoints: (a, b),
            order,
        });
        self.adjacency[a].push((b, idx));
        self.adjacency[b].push((a, idx));
        Ok(())
    }

    pub fn signatures(&self) -> Vec<AtomSignature> {
        let mut sigs: Vec<AtomSignature> = self
            .atoms
            .iter()
            .enumerate()
            .map(|(i, a)| {
                let mut orders: Vec<BondOrder> =
                    self.adjacency[i].iter().map(|&(_, b)| self.bonds[b].order).collect();
                orders.sort();
                (a.element.clone(), a.aromatic, self.adjacency[i].len(), orders)
            })
            .collect();
        sigs.sort();
        sigs
    }

    /// Relabels atoms so that old atom `i` becomes `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> MoleculeGraph {
        assert_eq!(perm.len(), self.atoms.len(), "permutation length");
        let mut atoms = vec![self.atoms[0].clone(); self.atoms.len()];
        for (old, &new) in perm.iter().enumerate() {
            atoms[new] = self.atoms[old].clone();
        }
        let bonds = self
            .bonds
            .iter()
            .map(|b| Bond {
                endpoints: (perm[b.endpoints.0], perm[b.endpoints.1]),
                order: b.order,
            })
            .collect();
        MoleculeGraph::from_parts(atoms, bonds).expect("permutation keeps invariants")
    }

    /// Deterministic depth-first SMILES writer. Atoms are visited from the
    /// lowest unvisited index, neighbors in adjacency order.
    pub fn to_smiles(&self) -> String {
        let n = self.atoms.len();
        // Classify edges: tree edges by DFS, the rest are ring closures.
        let mut visited = vec![false; n];
        let mut order = Vec::with_capacity(n);
        let mut tree_children: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n];
        let mut is_tree_bond = vec![false; self.bonds.len()];
        for root in 0..n {
            if visited[root] {
                continue;
            }
            self.classify(root, &mut visited, &mut order, &mut tree_children, &mut is_tree_bond);
        }
        let mut rank = vec![0; n];
        for (r, &a) in order.iter().enumerate() {
            rank[a] = r;
        }
        // Ring bonds opened at the earlier atom, closed at the later one.
        let mut ring_at: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (bi, b) in self.bonds.iter().enumerate() {
            if !is_tree_bond[bi] {
                ring_at[b.endpoints.0].push(bi);
                ring_at[b.endpoints.1].push(bi);
            }
        }

        let mut out = String::new();
        let mut emitted = vec![false; n];
        let mut open: HashMap<usize, u32> = HashMap::new();
        let mut free: Vec<u32> = Vec::new();
        let mut next_label = 1;
        let mut first = true;
        for root in 0..n {
            if emitted[root] {
                continue;
            }
            if !first {
                out.push('.');
            }
            first = false;
            self.emit(
                root,
                &tree_children,
                &ring_at,
                &mut emitted,
                &mut open,
                &mut free,
                &mut next_label,
                &mut out,
            );
        }
        out
    }

    fn classify(
        &self,
        atom: usize,
        visited: &mut [bool],
        order: &mut Vec<usize>,
        children: &mut [Vec<(usize, usize)>],
        is_tree: &mut [bool],
    ) {
        visited[atom] = true;
        order.push(atom);
        for &(nb, bi) in &self.adjacency[atom] {
            if !visited[nb] {
                is_tree[bi] = true;
                children[atom].push((nb, bi));
                self.classify(nb, visited, order, children, is_tree);
            }
        }
    }

    fn bond_text(&self, bi: usize) -> String {
        let b = &self.bonds[bi];
        let (x, y) = (&self.atoms[b.endpoints.0], &self.atoms[b.endpoints.1]);
        let both_aromatic = x.aromatic && y.aromatic;
        match b.order {
            BondOrder::Single if both_aromatic => "-".into(),
            BondOrder::Single => String::new(),
            BondOrder::Aromatic if both_aromatic => String::new(),
            o => o.symbol().to_string(),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn emit(
        &self,
        atom: usize,
        children: &[Vec<(usize, usize)>],
        ring_at: &[Vec<usize>],
        emitted: &mut [bool],
        open: &mut HashMap<usize, u32>,
        free: &mut Vec<u32>,
        next_label: &mut u32,
        out: &mut String,
    ) {
        emitted[atom] = true;
        out.push_str(&atom_text(&self.atoms[atom]));
        for &bi in &ring_at[atom] {
            if let Some(label) = open.remove(&bi) {
                out.push_str(&self.bond_text(bi));
                push_ring_label(out, label);
                free.push(label);
                free.sort_unstable_by(|a, b| b.cmp(a));
            } else {
                let label = free.pop().unwrap_or_else(|| {
                    let l = *next_label;
                    *next_label += 1;
                    l
                });
                push_ring_label(out, label);
                open.insert(bi, label);
            }
        }
        let kids = &children[atom];
        for (k, &(nb, bi)) in kids.iter().enumerate() {
            let last = k + 1 == kids.len();
            if !last {
                out.push('(');
            }
            out.push_str(&self.bond_text(bi));
            self.emit(nb, children, ring_at, emitted, open, free, next_label, out);
            if !last {
                out.push(')');
            }
        }
    }
}

fn push_ring_label(out: &mut String, label: u32) {
    if label < 10 {
        out.push_str(&label.to_string());
    } else {
        out.push_str(&format!("%{label:02}"));
    }
}

fn atom_text(a: &Atom) -> String {
    let bare = a.formal_charge == 0
        && a.explicit_h.unwrap_or(0) == 0
        && ORGANIC_SUBSET.contains(&a.element.as_str())
        && (!a.aromatic || AROMATIC_ORGANIC.contains(&a.element.to_lowercase().as_str()));
    let sym = if a.aromatic {
        a.element.to_lowercase()
    } else {
        a.element.clone()
    };
    if bare {
        return sym;
    }
    let mut s = format!("[{sym}");
    match a.explicit_h.unwrap_or(0) {
        0 => {}
        1 => s.push('H'),
        h => s.push_str(&format!("H{h}")),
    }
    match a.formal_charge {
        0 => {}
        1 => s.push('+'),
        -1 => s.push('-'),
        c if c > 0 => s.push_str(&format!("+{c}")),
        c => s.push_str(&format!("-{}", -c)),
    }
    s.push(']');
    s
}

impl fmt::Display for MoleculeGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_smiles())
    }
}

struct Parser<'a> {
    chars: Vec<(usize, char)>,
    pos: usize,
    src: &'a str,
}

#[derive(Clone, Copy)]
struct RingOpen {
    atom: usize,
    order: Option<BondOrder>,
    pos: usize,
}

/// Parses a SMILES-subset string. Atom order follows the string.
pub fn parse_smiles(input: &str) -> Result<MoleculeGraph, SmilesError> {
    let trimmed = input.trim();
    if trimmed.is_empty() {
        return Err(SmilesError::Empty);
    }
    Parser {
        chars: trimmed.char_indices().collect(),
        pos: 0,
        src: trimmed,
    }
    .run()
}

impl Parser<'_> {
    fn peek(&self) -> Option<char> {
        self.chars.get(self.pos).map(|&(_, c)| c)
    }

    fn peek_at(&self, off: usize) -> Option<char> {
        self.chars.get(self.pos + off).map(|&(_, c)| c)
    }

    fn offset(&self) -> usize {
        self.chars.get(self.pos).map(|&(i, _)| i).unwrap_or(self.src.len())
    }

    fn run(mut self) -> Result<MoleculeGraph, SmilesError> {
        let mut g = MoleculeGraph {
            atoms: Vec::new(),
            bonds: Vec::new(),
            adjacency: Vec::new(),
        };
        let mut prev: Option<usize> = None;
        let mut pending: Option<(BondOrder, usize)> = None;
        // (branch point, atom count when the branch opened, position)
        let mut branches: Vec<(usize, usize, usize)> = Vec::new();
        let mut rings: HashMap<u32, RingOpen> = HashMap::new();

        while let Some(c) = self.peek() {
            let here = self.offset();
            if let Some(order) = BondOrder::from_symbol(c) {
                if pending.is_some() {
                    return Err(SmilesError::Syntax {
                        pos: here,
                        detail: "two consecutive bond symbols".into(),
                    });
                }
                if prev.is_none() {
                    return Err(SmilesError::DanglingBond { pos: here });
                }
                pending = Some((order, here));
                self.pos += 1;
                continue;
            }
            match c {
                '(' => {
                    let Some(p) = prev else {
                        return Err(SmilesError::Branch {
                            pos: here,
                            detail: "branch opened before any atom".into(),
                        });
                    };
                    if let Some((_, bpos)) = pending {
                        return Err(SmilesError::DanglingBond { pos: bpos });
                    }
                    branches.push((p, g.atoms.len(), here));
                    self.pos += 1;
                }
                ')' => {
                    if let Some((_, bpos)) = pending {
                        return Err(SmilesError::DanglingBond { pos: bpos });
                    }
                    let Some((p, count, _)) = branches.pop() else {
                        return Err(SmilesError::Branch {
                            pos: here,
                            detail: "unmatched ')'".into(),
                        });
                    };
                    if g.atoms.len() == count {
                        return Err(SmilesError::Branch {
                            pos: here,
                            detail: "empty branch".into(),
                        });
                    }
                    prev = Some(p);
                    self.pos += 1;
                }
                '.' => {
                    if let Some((_, bpos)) = pending {
                        return Err(SmilesError::DanglingBond { pos: bpos });
                    }
                    if prev.is_none() {
                        return Err(SmilesError::Syntax {
                            pos: here,
                            detail: "'.' must separate two components".into(),
                        });
                    }
                    prev = None;
                    self.pos += 1;
                }
                '0'..='9' | '%' => {
                    let label = self.ring_label()?;
                    let Some(p) = prev else {
                        return Err(SmilesError::RingClosure {
                            pos: here,
                            detail: "ring-closure digit before any atom".into(),
                        });
                    };
                    let order = pending.take().map(|(o, _)| o);
                    if let Some(open) = rings.remove(&label) {
                        let order = match (open.order, order) {
                            (Some(a), Some(b)) if a != b => {
                                return Err(SmilesError::RingClosure {
                                    pos: here,
                                    detail: format!("ring {label} has conflicting bond symbols"),
                                })
                            }
                            (Some(a), _) | (None, Some(a)) => a,
                            (None, None) => default_order(&g.atoms[open.atom], &g.atoms[p]),
                        };
                        g.add_bond(open.atom, p, order)
                            .map_err(|detail| SmilesError::RingClosure { pos: here, detail })?;
                    } else {
                        rings.insert(
                            label,
                            RingOpen {
                                atom: p,
                                order,
                                pos: here,
                            },
                        );
                    }
                }
                '[' => {
                    let atom = self.bracket_atom()?;
                    self.attach(&mut g, atom, &mut prev, &mut pending)?;
                }
                c if c.is_ascii_alphabetic() => {
                    let atom = self.organic_atom()?;
                    self.attach(&mut g, atom, &mut prev, &mut pending)?;
                }
                c if c.is_whitespace() => {
                    return Err(SmilesError::Syntax {
                        pos: here,
                        detail: "whitespace inside SMILES".into(),
                    })
                }
                other => {
                    return Err(SmilesError::Syntax {
                        pos: here,
                        detail: format!("unsupported character `{other}`"),
                    })
                }
            }
        }
        if let Some((_, bpos)) = pending {
            return Err(SmilesError::DanglingBond { pos: bpos });
        }
        if let Some(&(_, _, bpos)) = branches.last() {
            return Err(SmilesError::Branch {
                pos: bpos,
                detail: "unclosed '('".into(),
            });
        }
        if let Some((label, open)) = rings.iter().min_by_key(|(_, o)| o.pos) {
            return Err(SmilesError::RingClosure {
                pos: open.pos,
                detail: format!("ring {label} never closed"),
            });
        }
        Ok(g)
    }

    fn attach(
        &self,
        g: &mut MoleculeGraph,
        atom: Atom,
        prev: &mut Option<usize>,
        pending: &mut Option<(BondOrder, usize)>,
    ) -> Result<(), SmilesError> {
        let idx = g.atoms.len();
        g.atoms.push(atom);
        g.adjacency.push(Vec::new());
        if let Some(p) = *prev {
            let order = match pending.take() {
                Some((o, _)) => o,
                None => default_order(&g.atoms[p], &g.atoms[idx]),
            };
            g.add_bond(p, idx, order).map_err(|detail| SmilesError::Syntax {
                pos: self.offset(),
                detail,
            })?;
        }
        *prev = Some(idx);
        Ok(())
    }

    fn ring_label(&mut self) -> Result<u32, SmilesError> {
        let here = self.offset();
        match self.peek() {
            Some('%') => {
                let d1 = self.peek_at(1).and_then(|c| c.to_digit(10));
                let d2 = self.peek_at(2).and_then(|c| c.to_digit(10));
                match (d1, d2) {
                    (Some(a), Some(b)) => {
                        self.pos += 3;
                        Ok(a * 10 + b)
                    }
                    _ => Err(SmilesError::RingClosure {
                        pos: here,
                        detail: "'%' must be followed by two digits".into(),
                    }),
                }
            }
            Some(c) => {
                self.pos += 1;
                let d = c.to_digit(10).expect("digit");
                if d == 0 {
                    return Err(SmilesError::RingClosure {
                        pos: here,
                        detail: "ring label 0 is not supported".into(),
                    });
                }
                Ok(d)
            }
            None => unreachable!("caller saw a character"),
        }
    }

    fn organic_atom(&mut self) -> Result<Atom, SmilesError> {
        let here = self.offset();
        let c = self.peek().expect("caller saw a character");
        let two: String = [Some(c), self.peek_at(1)].iter().flatten().collect();
        let (sym, len) = if two == "Cl" || two == "Br" {
            (two, 2)
        } else {
            (c.to_string(), 1)
        };
        let aromatic = AROMATIC_ORGANIC.contains(&sym.as_str());
        if !aromatic && !ORGANIC_SUBSET.contains(&sym.as_str()) {
            return Err(SmilesError::Element { pos: here, symbol: sym });
        }
        self.pos += len;
        Ok(Atom {
            element: capitalize(&sym),
            aromatic,
            formal_charge: 0,
            explicit_h: None,
        })
    }

    fn bracket_atom(&mut self) -> Result<Atom, SmilesError> {
        let open = self.offset();
        self.pos += 1;
        let here = self.offset();
        match self.peek() {
            Some(c) if c.is_ascii_digit() => {
                return Err(SmilesError::Syntax {
                    pos: here,
                    detail: "isotopes are not supported".into(),
                })
            }
            Some(c) if c.is_ascii_alphabetic() => {}
            Some('*') => {
                return Err(SmilesError::Syntax {
                    pos: here,
                    detail: "wildcard atoms are not supported".into(),
                })
            }
            _ => {
                return Err(SmilesError::Element {
                    pos: here,
                    symbol: String::new(),
                })
            }
        }
        let c0 = self.peek().expect("checked");
        let c1 = self.peek_at(1).filter(|c| c.is_ascii_lowercase());
        let (element, aromatic) = if c0.is_ascii_uppercase() {
            match c1.map(|c1| format!("{c0}{c1}")).filter(|s| is_element(s)) {
                Some(s) => {
                    self.pos += 2;
                    (s, false)
                }
                None if is_element(&c0.to_string()) => {
                    self.pos += 1;
                    (c0.to_string(), false)
                }
                None => {
                    return Err(SmilesError::Element {
                        pos: here,
                        symbol: [Some(c0), c1].iter().flatten().collect(),
                    })
                }
            }
        } else {
            match c1.map(|c1| format!("{c0}{c1}")).filter(|s| AROMATIC_BRACKET.contains(&s.as_str()))
            {
                Some(s) => {
                    self.pos += 2;
                    (capitalize(&s), true)
                }
                None if AROMATIC_BRACKET.contains(&c0.to_string().as_str()) => {
                    self.pos += 1;
                    (capitalize(&c0.to_string()), true)
                }
                None => {
                    return Err(SmilesError::Element {
                        pos: here,
                        symbol: [Some(c0), c1].iter().flatten().collect(),
                    })
                }
            }
        };
        if self.peek() == Some('@') {
            return Err(SmilesError::Syntax {
                pos: self.offset(),
                detail: "stereochemistry is not supported".into(),
            });
        }
        let mut hcount = 0u8;
        if self.peek() == Some('H') {
            self.pos += 1;
            hcount = 1;
            if let Some(d) = self.peek().and_then(|c| c.to_digit(10)) {
                self.pos += 1;
                hcount = d as u8;
            }
        }
        let mut charge: i8 = 0;
        if let Some(sign @ ('+' | '-')) = self.peek() {
            let unit: i8 = if sign == '+' { 1 } else { -1 };
            self.pos += 1;
            if let Some(d) = self.peek().and_then(|c| c.to_digit(10)) {
                self.pos += 1;
                charge = unit * d as i8;
            } else {
                charge = unit;
                while self.peek() == Some(sign) {
                    self.pos += 1;
                    charge += unit;
                }
            }
        }
        match self.peek() {
            Some(']') => self.pos += 1,
            Some(other) => {
                return Err(SmilesError::Syntax {
                    pos: self.offset(),
                    detail: format!("unexpected `{other}` inside bracket atom"),
                })
            }
            None => {
                return Err(SmilesError::Syntax {
                    pos: open,
                    detail: "unterminated bracket atom".into(),
                })
            }
        }
        Ok(Atom {
            element,
            aromatic,
            formal_charge: charge,
            explicit_h: Some(hcount),
        })
    }
}

fn default_order(a: &Atom, b: &Atom) -> BondOrder {
    if a.aromatic && b.aromatic {
        BondOrder::Aromatic
    } else {
        BondOrder::Single
    }
}

/// Index lookup with a reserved unknown slot at `len()`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocab<K: std::hash::Hash + Eq> {
    entries: Vec<K>,
    #[serde(skip)]
    index: HashMap<K, usize>,
}

impl<K: std::hash::Hash + Eq + Clone> Vocab<K> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn from_entries(entries: Vec<K>) -> Self {
        let mut v = Self::new();
        for e in entries {
            v.insert(e);
        }
        v
    }

    pub fn insert(&mut self, key: K) -> usize {
        if let Some(&i) = self.index.get(&key) {
            return i;
        }
        self.entries.push(key.clone());
        self.index.insert(key, self.entries.len() - 1);
        self.entries.len() - 1
    }

    pub fn get(&self, key: &K) -> usize {
        self.index.get(key).copied().unwrap_or(self.unknown_index())
    }

    pub fn unknown_index(&self) -> usize {
        self.entries.len()
    }

    /// Number of rows an embedding table needs, unknown included.
    pub fn table_size(&self) -> usize {
        self.entries.len() + 1
    }

    pub fn entries(&self) -> &[K] {
        &self.entries
    }

    /// Rebuilds the lookup after deserialization.
    pub fn reindex(&mut self) {
        self.index = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, k)| (k.clone(), i))
            .collect();
    }
}

impl<K: std::hash::Hash + Eq + Clone> Default for Vocab<K> {
    fn default() -> Self {
        Self::new()
    }
}

/// Atom types keyed by (element symbol, aromatic).
pub type AtomVocab = Vocab<(String, bool)>;
pub type BondVocab = Vocab<BondOrder>;

/// Frozen base vocabulary: the organic subset plus its aromatic forms.
pub fn base_atom_vocab() -> AtomVocab {
    let mut v = AtomVocab::new();
    for e in ORGANIC_SUBSET {
        v.insert((e.to_string(), false));
    }
    for e in AROMATIC_ORGANIC {
        v.insert((capitalize(e), true));
    }
    v
}

pub fn base_bond_vocab() -> BondVocab {
    BondVocab::from_entries(BondOrder::ALL.to_vec())
}

/// Extends `vocab` with every atom type in `graphs`.
pub fn extend_atom_vocab<'a>(vocab: &mut AtomVocab, graphs: impl IntoIterator<Item = &'a MoleculeGraph>) {
    for g in graphs {
        for a in &g.atoms {
            vocab.insert((a.element.clone(), a.aromatic));
        }
    }
}

/// A graph with atoms and bonds replaced by vocabulary indices.
#[derive(Debug, Clone, PartialEq)]
pub struct IndexedGraph {
    pub atom_types: Vec<usize>,
    pub bond_types: Vec<usize>,
    pub bond_endpoints: Vec<(usize, usize)>,
}

impl IndexedGraph {
    pub fn atom_count(&self) -> usize {
        self.atom_types.len()
    }
}

pub fn vocab_index(graph: &MoleculeGraph, atoms: &AtomVocab, bonds: &BondVocab) -> IndexedGraph {
    IndexedGraph {
        atom_types: graph
            .atoms
            .iter()
            .map(|a| atoms.get(&(a.element.clone(), a.aromatic)))
            .collect(),
        bond_types: graph.bonds.iter().map(|b| bonds.get(&b.order)).collect(),
        bond_endpoints: graph.bonds.iter().map(|b| b.endpoints).collect(),
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct GraphDump {
    pub atoms: Vec<Atom>,
    pub bonds: Vec<(usize, usize, BondOrder)>,
}

impl From<&MoleculeGraph> for GraphDump {
    fn from(g: &MoleculeGraph) -> Self {
        GraphDump {
            atoms: g.atoms.clone(),
            bonds: g
                .bonds
                .iter()
                .map(|b| (b.endpoints.0, b.endpoints.1, b.order))
                .collect(),
        }
    }
}
