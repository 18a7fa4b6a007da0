#![allow(dead_code)]

use confgen::molio::{BondOrder, Conformation, Element, MolecularGraph};
use confgen::symmetry::{enumerate_automorphisms, DEFAULT_CAP};
use confgen::train::TrainItem;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn el(s: &str) -> Element {
    Element::from_symbol(s).unwrap()
}

fn ring(n: usize, side: f64) -> Vec<[f64; 3]> {
    let r = side / (2.0 * (std::f64::consts::PI / n as f64).sin());
    (0..n)
        .map(|k| {
            let a = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
            [r * a.cos(), r * a.sin(), 0.0]
        })
        .collect()
}

fn ring_bonds(n: usize, order: BondOrder) -> Vec<(usize, usize, BondOrder)> {
    (0..n).map(|k| (k.min((k + 1) % n), k.max((k + 1) % n), order)).collect()
}

fn item(name: &str, atoms: Vec<(Element, i32)>, bonds: Vec<(usize, usize, BondOrder)>, coords: Vec<[f64; 3]>) -> TrainItem {
    let graph = MolecularGraph::new(Some(name.into()), atoms, bonds).unwrap();
    let sym = enumerate_automorphisms(&graph, DEFAULT_CAP).unwrap();
    TrainItem { graph, sym, conformers: vec![Conformation::new(coords).unwrap().centered()] }
}

/// Five small rigid molecules with one conformer each.
pub fn rigid_set() -> Vec<TrainItem> {
    let benzene = item("benzene", vec![(el("C"), 0); 6], ring_bonds(6, BondOrder::Aromatic), ring(6, 1.39));
    let mut pyr_atoms = vec![(el("C"), 0); 6];
    pyr_atoms[0] = (el("N"), 0);
    let pyridine = item("pyridine", pyr_atoms, ring_bonds(6, BondOrder::Aromatic), ring(6, 1.38));
    let mut fur_atoms = vec![(el("C"), 0); 5];
    fur_atoms[0] = (el("O"), 0);
    let furan = item("furan", fur_atoms, ring_bonds(5, BondOrder::Aromatic), ring(5, 1.40));
    let formaldehyde = item(
        "formaldehyde",
        vec![(el("C"), 0), (el("O"), 0), (el("H"), 0), (el("H"), 0)],
        vec![(0, 1, BondOrder::Double), (0, 2, BondOrder::Single), (0, 3, BondOrder::Single)],
        vec![[0.0, 0.0, 0.0], [1.21, 0.0, 0.0], [-0.55, 0.94, 0.0], [-0.55, -0.94, 0.0]],
    );
    // planar C3 ring with a carbonyl-like exocyclic oxygen and a methyl
    let cp = ring(3, 1.51);
    let out = |p: [f64; 3], d: f64| {
        let n = (p[0] * p[0] + p[1] * p[1]).sqrt();
        [p[0] * (1.0 + d / n), p[1] * (1.0 + d / n), 0.0]
    };
    let mut coords = cp.clone();
    coords.push(out(cp[0], 1.21));
    coords.push(out(cp[1], 1.50));
    let cyclo = item(
        "methylcyclopropanone",
        vec![(el("C"), 0), (el("C"), 0), (el("C"), 0), (el("O"), 0), (el("C"), 0)],
        vec![
            (0, 1, BondOrder::Single),
            (1, 2, BondOrder::Single),
            (0, 2, BondOrder::Single),
            (0, 3, BondOrder::Double),
            (1, 4, BondOrder::Single),
        ],
        coords,
    );
    vec![benzene, pyridine, furan, formaldehyde, cyclo]
}

/// Random connected labeled graph on `n` atoms.
pub fn random_graph(rng: &mut ChaCha8Rng, n: usize, extra_edges: usize) -> MolecularGraph {
    let elements = [el("C"), el("N"), el("O")];
    let orders = [BondOrder::Single, BondOrder::Double];
    let atoms: Vec<(Element, i32)> = (0..n).map(|_| (elements[rng.random_range(0..elements.len())], 0)).collect();
    let mut bonds: Vec<(usize, usize, BondOrder)> = Vec::new();
    let has = |b: &Vec<(usize, usize, BondOrder)>, i: usize, j: usize| b.iter().any(|&(x, y, _)| (x, y) == (i.min(j), i.max(j)));
    for k in 1..n {
        let p = rng.random_range(0..k);
        bonds.push((p, k, orders[rng.random_range(0..2)]));
    }
    for _ in 0..extra_edges {
        let (i, j) = (rng.random_range(0..n), rng.random_range(0..n));
        if i != j && !has(&bonds, i, j) {
            bonds.push((i.min(j), i.max(j), orders[rng.random_range(0..2)]));
        }
    }
    MolecularGraph::new(None, atoms, bonds).unwrap()
}

pub fn random_conf(rng: &mut ChaCha8Rng, n: usize) -> Conformation {
    Conformation::new((0..n).map(|_| std::array::from_fn(|_| rng.random_range(-3.0..3.0))).collect()).unwrap()
}

/// Uniformly random proper rotation (via a normalised Gaussian quaternion)
/// and a translation in [−5, 5]³.
pub fn random_motion(rng: &mut ChaCha8Rng) -> ([[f64; 3]; 3], [f64; 3]) {
    use rand_distr::{Distribution, StandardNormal};
    let mut q: [f64; 4] = std::array::from_fn(|_| StandardNormal.sample(rng));
    let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
    q.iter_mut().for_each(|x| *x /= n);
    let r = confgen::geomalign::quaternion_to_rotation(&q);
    (r, std::array::from_fn(|_| rng.random_range(-5.0..5.0)))
}

pub fn apply(conf: &Conformation, rt: &([[f64; 3]; 3], [f64; 3])) -> Conformation {
    let (r, t) = rt;
    Conformation::new(
        conf.coords()
            .iter()
            .map(|p| std::array::from_fn(|a| r[a][0] * p[0] + r[a][1] * p[1] + r[a][2] * p[2] + t[a]))
            .collect(),
    )
    .unwrap()
}
