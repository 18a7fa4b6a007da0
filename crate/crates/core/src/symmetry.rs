//! Atom labels and enumeration of label-preserving graph automorphisms.
//!
//! Two atoms may be exchanged by a symmetry only when they carry the same
//! label (element, formal charge, and the multiset of incident bond orders)
//! and the exchange maps bonds onto bonds of the same order. The search is an
//! exact backtracking enumeration over candidate sets partitioned by colour,
//! where colours come from iterated neighbourhood refinement of the labels.
//! Refinement only ever splits classes that no automorphism can mix, so it
//! prunes without losing solutions.

use crate::molio::{BondOrder, Conformation, Element, MolecularGraph};
use std::collections::BTreeMap;
use thiserror::Error;

/// Default upper bound on the number of enumerated permutations.
pub const DEFAULT_CAP: usize = 10_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SymmetryError {
    #[error("symmetry group has more than {cap} permutations")]
    CapExceeded { cap: usize },
    #[error("permutation cap must be at least 1")]
    ZeroCap,
    #[error("permutation length {perm} does not match {rows} coordinate rows")]
    LengthMismatch { perm: usize, rows: usize },
    #[error("not a permutation: {0:?}")]
    NotAPermutation(Vec<usize>),
    #[error("permutation does not preserve the selected atom subset")]
    SubsetNotPreserved,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct AtomLabel {
    pub element: Element,
    pub formal_charge: i32,
    /// Sorted orders of all incident bonds.
    pub bond_multiset: Vec<BondOrder>,
}

impl std::fmt::Display for AtomLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.element)?;
        if self.formal_charge != 0 {
            write!(f, "({:+})", self.formal_charge)?;
        }
        let mut counts: BTreeMap<BondOrder, usize> = BTreeMap::new();
        for o in &self.bond_multiset {
            *counts.entry(*o).or_default() += 1;
        }
        for (o, c) in counts {
            let name = o.as_str();
            write!(f, "-{c}{}{}", name[..1].to_uppercase(), &name[1..])?;
        }
        Ok(())
    }
}

pub fn atom_labels(graph: &MolecularGraph) -> Vec<AtomLabel> {
    let mut multisets = vec![Vec::new(); graph.num_atoms()];
    for b in graph.bonds() {
        multisets[b.i].push(b.order);
        multisets[b.j].push(b.order);
    }
    graph
        .atoms()
        .iter()
        .zip(multisets)
        .map(|(a, mut bond_multiset)| {
            bond_multiset.sort_unstable();
            AtomLabel { element: a.element, formal_charge: a.formal_charge, bond_multiset }
        })
        .collect()
}

/// A set of atom permutations; each is a full index array.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SymmetryGroup {
    perms: Vec<Vec<usize>>,
}

impl SymmetryGroup {
    pub fn identity(n: usize) -> Self {
        SymmetryGroup { perms: vec![(0..n).collect()] }
    }

    /// Wraps precomputed permutations (for example from a prep cache), checking
    /// each is a permutation of the same length. Output is sorted and deduplicated.
    pub fn from_perms(mut perms: Vec<Vec<usize>>) -> Result<Self, SymmetryError> {
        let n = perms.first().map_or(0, Vec::len);
        for p in &perms {
            if p.len() != n || !is_permutation(p) {
                return Err(SymmetryError::NotAPermutation(p.clone()));
            }
        }
        perms.sort();
        perms.dedup();
        Ok(SymmetryGroup { perms })
    }

    pub fn perms(&self) -> &[Vec<usize>] {
        &self.perms
    }

    pub fn len(&self) -> usize {
        self.perms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.perms.is_empty()
    }

    pub fn num_atoms(&self) -> usize {
        self.perms.first().map_or(0, Vec::len)
    }

    /// Permutations induced on the sub-list `rows`. Every permutation must map
    /// the subset onto itself.
    pub fn restrict(&self, rows: &[usize]) -> Result<SymmetryGroup, SymmetryError> {
        let n = self.num_atoms();
        let mut pos = vec![usize::MAX; n];
        for (k, &r) in rows.iter().enumerate() {
            pos[r] = k;
        }
        let mut perms = Vec::with_capacity(self.perms.len());
        for p in &self.perms {
            let induced: Vec<usize> = rows.iter().map(|&r| pos[p[r]]).collect();
            if induced.contains(&usize::MAX) {
                return Err(SymmetryError::SubsetNotPreserved);
            }
            perms.push(induced);
        }
        perms.sort();
        perms.dedup();
        Ok(SymmetryGroup { perms })
    }
}

pub fn is_permutation(p: &[usize]) -> bool {
    let mut seen = vec![false; p.len()];
    p.iter().all(|&i| i < p.len() && !std::mem::replace(&mut seen[i], true))
}

pub fn invert(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Reorders rows so that `output[i] = conf[perm[i]]`.
pub fn apply_permutation(conf: &Conformation, perm: &[usize]) -> Result<Conformation, SymmetryError> {
    if perm.len() != conf.num_atoms() {
        return Err(SymmetryError::LengthMismatch { perm: perm.len(), rows: conf.num_atoms() });
    }
    if !is_permutation(perm) {
        return Err(SymmetryError::NotAPermutation(perm.to_vec()));
    }
    Ok(conf.select(perm))
}

fn refine_colors(graph: &MolecularGraph, labels: &[AtomLabel]) -> Vec<usize> {
    let ids: BTreeMap<&AtomLabel, usize> =
        labels.iter().collect::<std::collections::BTreeSet<_>>().into_iter().zip(0..).collect();
    let mut colors: Vec<usize> = labels.iter().map(|l| ids[l]).collect();
    let mut classes = ids.len();
    loop {
        let signatures: Vec<(usize, Vec<(BondOrder, usize)>)> = (0..graph.num_atoms())
            .map(|i| {
                let mut around: Vec<(BondOrder, usize)> = graph
                    .neighbors(i)
                    .expect("index in range")
                    .iter()
                    .map(|&j| (graph.bond_order(i, j).expect("bonded"), colors[j]))
                    .collect();
                around.sort_unstable();
                (colors[i], around)
            })
            .collect();
        let ids: BTreeMap<&(usize, Vec<(BondOrder, usize)>), usize> = signatures
            .iter()
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .zip(0..)
            .collect();
        let next: Vec<usize> = signatures.iter().map(|s| ids[s]).collect();
        colors = next;
        if ids.len() == classes {
            return colors;
        }
        classes = ids.len();
    }
}

struct Search<'a> {
    adj: Vec<Vec<u8>>,
    colors: Vec<usize>,
    graph: &'a MolecularGraph,
    order: Vec<usize>,
    parent: Vec<Option<usize>>,
    map: Vec<usize>,
    used: Vec<bool>,
    found: Vec<Vec<usize>>,
    cap: usize,
}

impl Search<'_> {
    fn consistent(&self, v: usize, w: usize, depth: usize) -> bool {
        self.order[..depth].iter().all(|&u| self.adj[v][u] == self.adj[w][self.map[u]])
    }

    fn extend(&mut self, depth: usize) -> Result<(), SymmetryError> {
        if depth == self.order.len() {
            if self.found.len() == self.cap {
                return Err(SymmetryError::CapExceeded { cap: self.cap });
            }
            self.found.push(self.map.clone());
            return Ok(());
        }
        let v = self.order[depth];
        let candidates: Vec<usize> = match self.parent[v] {
            Some(u) => self.graph.neighbors(self.map[u]).expect("in range").to_vec(),
            None => (0..self.colors.len()).collect(),
        };
        for w in candidates {
            if self.used[w] || self.colors[w] != self.colors[v] || !self.consistent(v, w, depth) {
                continue;
            }
            self.used[w] = true;
            self.map[v] = w;
            self.extend(depth + 1)?;
            self.used[w] = false;
        }
        Ok(())
    }
}

/// Enumerates every label- and bond-preserving permutation of the atoms,
/// identity included, sorted lexicographically. Fails rather than truncating
/// when more than `cap` permutations exist.
pub fn enumerate_automorphisms(
    graph: &MolecularGraph,
    cap: usize,
) -> Result<SymmetryGroup, SymmetryError> {
    if cap == 0 {
        return Err(SymmetryError::ZeroCap);
    }
    let n = graph.num_atoms();
    let labels = atom_labels(graph);
    let colors = refine_colors(graph, &labels);

    let mut adj = vec![vec![0u8; n]; n];
    for b in graph.bonds() {
        adj[b.i][b.j] = b.order.index() as u8 + 1;
        adj[b.j][b.i] = b.order.index() as u8 + 1;
    }

    // BFS order from atom 0; every later atom has an already-placed parent.
    let mut order = Vec::with_capacity(n);
    let mut parent = vec![None; n];
    let mut seen = vec![false; n];
    seen[0] = true;
    order.push(0);
    let mut head = 0;
    while head < order.len() {
        let u = order[head];
        head += 1;
        for &v in graph.neighbors(u).expect("in range") {
            if !seen[v] {
                seen[v] = true;
                parent[v] = Some(u);
                order.push(v);
            }
        }
    }

    let mut search = Search {
        adj,
        colors,
        graph,
        order,
        parent,
        map: vec![usize::MAX; n],
        used: vec![false; n],
        found: Vec::new(),
        cap,
    };
    search.extend(0)?;
    let mut perms = search.found;
    perms.sort();
    Ok(SymmetryGroup { perms })
}

/// Checks that `perm` maps each atom onto one with the same label and bonds
/// onto bonds of equal order.
pub fn preserves_structure(graph: &MolecularGraph, labels: &[AtomLabel], perm: &[usize]) -> bool {
    if perm.len() != graph.num_atoms() || !is_permutation(perm) {
        return false;
    }
    if (0..perm.len()).any(|i| labels[i] != labels[perm[i]]) {
        return false;
    }
    let n = perm.len();
    (0..n).all(|i| (0..n).all(|j| graph.bond_order(i, j) == graph.bond_order(perm[i], perm[j])))
}
