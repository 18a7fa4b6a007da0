//! Molecular graphs, conformations and dataset ingestion.
//!
//! Two input formats are supported: a native JSON-lines format (one record
//! per line) and a read-only subset of MDL V2000 SDF. Every record is fully
//! validated on the way in: bond endpoints, duplicate bonds, connectivity and
//! conformer shapes. Invalid input never yields a partial record.

use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

const SYMBOLS: [&str; 118] = [
    "H", "He", "Li", "Be", "B", "C", "N", "O", "F", "Ne", "Na", "Mg", "Al", "Si", "P", "S", "Cl",
    "Ar", "K", "Ca", "Sc", "Ti", "V", "Cr", "Mn", "Fe", "Co", "Ni", "Cu", "Zn", "Ga", "Ge", "As",
    "Se", "Br", "Kr", "Rb", "Sr", "Y", "Zr", "Nb", "Mo", "Tc", "Ru", "Rh", "Pd", "Ag", "Cd", "In",
    "Sn", "Sb", "Te", "I", "Xe", "Cs", "Ba", "La", "Ce", "Pr", "Nd", "Pm", "Sm", "Eu", "Gd", "Tb",
    "Dy", "Ho", "Er", "Tm", "Yb", "Lu", "Hf", "Ta", "W", "Re", "Os", "Ir", "Pt", "Au", "Hg", "Tl",
    "Pb", "Bi", "Po", "At", "Rn", "Fr", "Ra", "Ac", "Th", "Pa", "U", "Np", "Pu", "Am", "Cm", "Bk",
    "Cf", "Es", "Fm", "Md", "No", "Lr", "Rf", "Db", "Sg", "Bh", "Hs", "Mt", "Ds", "Rg", "Cn", "Nh",
    "Fl", "Mc", "Lv", "Ts", "Og",
];

/// Number of distinct elements known to the parser.
pub const NUM_ELEMENTS: usize = SYMBOLS.len();

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MolError {
    #[error("malformed JSON record: {0}")]
    Json(String),
    #[error("atom {atom}: unknown element symbol {symbol:?}")]
    UnknownElement { atom: usize, symbol: String },
    #[error("bond {bond}: unknown bond order {order:?}")]
    UnknownBondOrder { bond: usize, order: String },
    #[error("bond {bond}: atom index {index} out of range for {n_atoms} atoms")]
    AtomIndexOutOfRange { bond: usize, index: usize, n_atoms: usize },
    #[error("bond {bond}: self-bond on atom {atom}")]
    SelfBond { bond: usize, atom: usize },
    #[error("bond {bond}: duplicate bond between atoms {i} and {j}")]
    DuplicateBond { bond: usize, i: usize, j: usize },
    #[error("graph is disconnected: atom {atom} is unreachable from atom 0")]
    Disconnected { atom: usize },
    #[error("molecule has no atoms")]
    EmptyMolecule,
    #[error("record has no conformers")]
    NoConformers,
    #[error("conformer {conformer}: expected {expected} coordinate rows, found {found}")]
    ConformerShape { conformer: usize, expected: usize, found: usize },
    #[error("conformer {conformer}: non-finite coordinate at atom {atom}")]
    NonFiniteCoordinate { conformer: usize, atom: usize },
    #[error("atom index {index} out of range for {n_atoms} atoms")]
    IndexOutOfRange { index: usize, n_atoms: usize },
    #[error("sdf record {record}, line {line}: malformed counts line")]
    SdfCountsLine { record: usize, line: usize },
    #[error("sdf record {record}: counts line declares {declared} {block} entries but more follow")]
    SdfCountsMismatch { record: usize, block: &'static str, declared: usize },
    #[error("sdf record {record}, line {line}: unknown bond type code {code}")]
    SdfBondCode { record: usize, line: usize, code: i64 },
    #[error("sdf record {record}: truncated {block} block, expected {expected} lines, found {found}")]
    SdfTruncated { record: usize, block: &'static str, expected: usize, found: usize },
    #[error("sdf record {record}, line {line}: {message}")]
    SdfLine { record: usize, line: usize, message: String },
    #[error("sdf record {record}: {source}")]
    SdfRecord { record: usize, source: Box<MolError> },
}

/// A chemical element, stored by atomic number.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Element(u8);

impl Element {
    pub fn from_symbol(symbol: &str) -> Option<Element> {
        SYMBOLS
            .iter()
            .position(|s| *s == symbol)
            .map(|p| Element(p as u8 + 1))
    }

    pub fn from_atomic_number(z: u8) -> Option<Element> {
        (1..=NUM_ELEMENTS as u8).contains(&z).then_some(Element(z))
    }

    pub fn atomic_number(self) -> u8 {
        self.0
    }

    pub fn symbol(self) -> &'static str {
        SYMBOLS[self.0 as usize - 1]
    }

    pub fn is_hydrogen(self) -> bool {
        self.0 == 1
    }
}

impl fmt::Display for Element {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
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

    pub fn as_str(self) -> &'static str {
        match self {
            BondOrder::Single => "single",
            BondOrder::Double => "double",
            BondOrder::Triple => "triple",
            BondOrder::Aromatic => "aromatic",
        }
    }

    pub fn parse(s: &str) -> Option<BondOrder> {
        BondOrder::ALL.into_iter().find(|o| o.as_str() == s)
    }

    /// Categorical index used by the bond embedding.
    pub fn index(self) -> usize {
        self as usize
    }

    fn from_sdf_code(code: i64) -> Option<BondOrder> {
        match code {
            1 => Some(BondOrder::Single),
            2 => Some(BondOrder::Double),
            3 => Some(BondOrder::Triple),
            4 => Some(BondOrder::Aromatic),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Atom {
    pub element: Element,
    pub formal_charge: i32,
    pub index: usize,
}

/// An undirected bond, stored with `i < j`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Bond {
    pub i: usize,
    pub j: usize,
    pub order: BondOrder,
}

/// A validated, connected molecular graph. Immutable after construction.
#[derive(Clone, Debug, PartialEq)]
pub struct MolecularGraph {
    name: Option<String>,
    atoms: Vec<Atom>,
    bonds: Vec<Bond>,
    adjacency: Vec<Vec<usize>>,
}

impl MolecularGraph {
    /// Builds and validates a graph. Bonds are canonicalized to `i < j` but
    /// keep their input order.
    pub fn new(
        name: Option<String>,
        atoms: Vec<(Element, i32)>,
        bonds: Vec<(usize, usize, BondOrder)>,
    ) -> Result<Self, MolError> {
        let n = atoms.len();
        if n == 0 {
            return Err(MolError::EmptyMolecule);
        }
        let atoms: Vec<Atom> = atoms
            .into_iter()
            .enumerate()
            .map(|(index, (element, formal_charge))| Atom {
                element,
                formal_charge,
                index,
            })
            .collect();
        let mut adjacency = vec![Vec::new(); n];
        let mut canon = Vec::with_capacity(bonds.len());
        for (b, &(i, j, order)) in bonds.iter().enumerate() {
            for index in [i, j] {
                if index >= n {
                    return Err(MolError::AtomIndexOutOfRange { bond: b, index, n_atoms: n });
                }
            }
            if i == j {
                return Err(MolError::SelfBond { bond: b, atom: i });
            }
            let (i, j) = (i.min(j), i.max(j));
            if adjacency[i].contains(&j) {
                return Err(MolError::DuplicateBond { bond: b, i, j });
            }
            adjacency[i].push(j);
            adjacency[j].push(i);
            canon.push(Bond { i, j, order });
        }
        for list in &mut adjacency {
            list.sort_unstable();
        }

        let mut seen = vec![false; n];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(u) = stack.pop() {
            for &v in &adjacency[u] {
                if !seen[v] {
                    seen[v] = true;
                    stack.push(v);
                }
            }
        }
        if let Some(atom) = seen.iter().position(|s| !s) {
            return Err(MolError::Disconnected { atom });
        }

        Ok(MolecularGraph {
            name,
            atoms,
            bonds: canon,
            adjacency,
        })
    }

    pub fn name(&self) -> Option<&str> {
        self.name.as_deref()
    }

    pub fn atoms(&self) -> &[Atom] {
        &self.atoms
    }

    pub fn bonds(&self) -> &[Bond] {
        &self.bonds
    }

    pub fn num_atoms(&self) -> usize {
        self.atoms.len()
    }

    pub fn num_bonds(&self) -> usize {
        self.bonds.len()
    }

    pub fn degree(&self, i: usize) -> usize {
        self.adjacency[i].len()
    }

    /// Sorted, duplicate-free neighbors of atom `i`.
    pub fn neighbors(&self, i: usize) -> Result<&[usize], MolError> {
        self.adjacency
            .get(i)
            .map(Vec::as_slice)
            .ok_or(MolError::IndexOutOfRange { index: i, n_atoms: self.atoms.len() })
    }

    /// Order of the bond between `i` and `j`, if any.
    pub fn bond_order(&self, i: usize, j: usize) -> Option<BondOrder> {
        let (a, b) = (i.min(j), i.max(j));
        self.bonds
            .iter()
            .find(|bond| bond.i == a && bond.j == b)
            .map(|bond| bond.order)
    }

    pub fn heavy_atom_indices(&self) -> Vec<usize> {
        self.atoms
            .iter()
            .filter(|a| !a.element.is_hydrogen())
            .map(|a| a.index)
            .collect()
    }
}

/// Free function form of [`MolecularGraph::neighbors`].
pub fn neighbors(graph: &MolecularGraph, i: usize) -> Result<Vec<usize>, MolError> {
    graph.neighbors(i).map(<[usize]>::to_vec)
}

/// Atomic coordinates in Å, one row per atom.
#[derive(Clone, Debug, PartialEq)]
pub struct Conformation {
    coords: Vec<[f64; 3]>,
}

impl Conformation {
    pub fn new(coords: Vec<[f64; 3]>) -> Result<Self, MolError> {
        if let Some(atom) = coords.iter().position(|r| r.iter().any(|x| !x.is_finite())) {
            return Err(MolError::NonFiniteCoordinate { conformer: 0, atom });
        }
        Ok(Conformation { coords })
    }

    pub fn coords(&self) -> &[[f64; 3]] {
        &self.coords
    }

    pub fn num_atoms(&self) -> usize {
        self.coords.len()
    }

    pub fn into_coords(self) -> Vec<[f64; 3]> {
        self.coords
    }

    pub fn centroid(&self) -> [f64; 3] {
        let mut c = [0.0; 3];
        for r in &self.coords {
            for k in 0..3 {
                c[k] += r[k];
            }
        }
        let n = self.coords.len().max(1) as f64;
        c.map(|x| x / n)
    }

    pub fn centered(&self) -> Conformation {
        let c = self.centroid();
        Conformation {
            coords: self
                .coords
                .iter()
                .map(|r| [r[0] - c[0], r[1] - c[1], r[2] - c[2]])
                .collect(),
        }
    }

    /// Rows selected by `rows`, in that order.
    pub fn select(&self, rows: &[usize]) -> Conformation {
        Conformation {
            coords: rows.iter().map(|&i| self.coords[i]).collect(),
        }
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        let (a, b) = (self.coords[i], self.coords[j]);
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
    }
}

/// A molecule together with one or more reference conformations.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetRecord {
    pub graph: MolecularGraph,
    pub conformers: Vec<Conformation>,
}

impl DatasetRecord {
    pub fn new(graph: MolecularGraph, conformers: Vec<Conformation>) -> Result<Self, MolError> {
        if conformers.is_empty() {
            return Err(MolError::NoConformers);
        }
        for (k, c) in conformers.iter().enumerate() {
            if c.num_atoms() != graph.num_atoms() {
                return Err(MolError::ConformerShape {
                    conformer: k,
                    expected: graph.num_atoms(),
                    found: c.num_atoms(),
                });
            }
        }
        Ok(DatasetRecord { graph, conformers })
    }

    pub fn name(&self) -> Option<&str> {
        self.graph.name()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonAtom {
    el: String,
    #[serde(default, skip_serializing_if = "is_zero")]
    chg: i32,
}

fn is_zero(x: &i32) -> bool {
    *x == 0
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct JsonRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    name: Option<String>,
    atoms: Vec<JsonAtom>,
    bonds: Vec<(usize, usize, String)>,
    conformers: Vec<Vec<[f64; 3]>>,
}

/// Parses one JSON-lines record.
pub fn parse_json_record(text: &str) -> Result<DatasetRecord, MolError> {
    let raw: JsonRecord = serde_json::from_str(text).map_err(|e| MolError::Json(e.to_string()))?;
    let atoms = raw
        .atoms
        .iter()
        .enumerate()
        .map(|(k, a)| {
            Element::from_symbol(&a.el)
                .map(|el| (el, a.chg))
                .ok_or_else(|| MolError::UnknownElement { atom: k, symbol: a.el.clone() })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let bonds = raw
        .bonds
        .iter()
        .enumerate()
        .map(|(k, (i, j, order))| {
            BondOrder::parse(order)
                .map(|o| (*i, *j, o))
                .ok_or_else(|| MolError::UnknownBondOrder { bond: k, order: order.clone() })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let graph = MolecularGraph::new(raw.name, atoms, bonds)?;
    let conformers = raw
        .conformers
        .into_iter()
        .enumerate()
        .map(|(k, rows)| {
            Conformation::new(rows).map_err(|e| match e {
                MolError::NonFiniteCoordinate { atom, .. } => {
                    MolError::NonFiniteCoordinate { conformer: k, atom }
                }
                other => other,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    DatasetRecord::new(graph, conformers)
}

/// Serializes a record as a single JSON line (no trailing newline).
pub fn to_json_line(record: &DatasetRecord) -> String {
    let g = &record.graph;
    let raw = JsonRecord {
        name: g.name.clone(),
        atoms: g
            .atoms
            .iter()
            .map(|a| JsonAtom { el: a.element.symbol().to_string(), chg: a.formal_charge })
            .collect(),
        bonds: g
            .bonds
            .iter()
            .map(|b| (b.i, b.j, b.order.as_str().to_string()))
            .collect(),
        conformers: record.conformers.iter().map(|c| c.coords.clone()).collect(),
    };
    serde_json::to_string(&raw).expect("record serialization is infallible")
}

/// Parses a JSON-lines document. Blank lines are skipped; each result carries
/// its 1-based line number.
pub fn parse_json_lines(text: &str) -> Vec<(usize, Result<DatasetRecord, MolError>)> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(k, l)| (k + 1, parse_json_record(l)))
        .collect()
}

/// Parses concatenated V2000 molfiles separated by `$$$$`.
pub fn parse_sdf(text: &str) -> Result<Vec<DatasetRecord>, MolError> {
    let lines: Vec<&str> = text.lines().collect();
    let mut records = Vec::new();
    let mut start = 0;
    while start < lines.len() {
        let end = lines[start..]
            .iter()
            .position(|l| l.trim_end() == "$$$$")
            .map_or(lines.len(), |p| start + p);
        let block = &lines[start..end];
        if block.iter().any(|l| !l.trim().is_empty()) {
            let record = records.len();
            records.push(parse_molfile(block, record, start)?);
        }
        start = end + 1;
    }
    Ok(records)
}

fn fixed_field(line: &str, from: usize, to: usize) -> Option<&str> {
    line.get(from..to.min(line.len())).map(str::trim)
}

fn parse_counts(line: &str) -> Option<(usize, usize)> {
    let fixed = fixed_field(line, 0, 3)
        .and_then(|a| a.parse().ok())
        .zip(fixed_field(line, 3, 6).and_then(|b| b.parse().ok()));
    fixed.or_else(|| {
        let mut it = line.split_whitespace();
        Some((it.next()?.parse().ok()?, it.next()?.parse().ok()?))
    })
}

fn parse_atom_line(line: &str) -> Option<([f64; 3], &str)> {
    let mut it = line.split_whitespace();
    let x = it.next()?.parse().ok()?;
    let y = it.next()?.parse().ok()?;
    let z = it.next()?.parse().ok()?;
    let sym = it.next()?;
    sym.starts_with(|c: char| c.is_ascii_alphabetic()).then_some(([x, y, z], sym))
}

fn parse_bond_line(line: &str) -> Option<(usize, usize, i64)> {
    let fixed = (|| {
        Some((
            fixed_field(line, 0, 3)?.parse().ok()?,
            fixed_field(line, 3, 6)?.parse().ok()?,
            fixed_field(line, 6, 9)?.parse().ok()?,
        ))
    })();
    fixed.or_else(|| {
        let mut it = line.split_whitespace();
        Some((it.next()?.parse().ok()?, it.next()?.parse().ok()?, it.next()?.parse().ok()?))
    })
}

fn parse_molfile(block: &[&str], record: usize, offset: usize) -> Result<DatasetRecord, MolError> {
    // 1-based line number in the whole file
    let line_no = |k: usize| offset + k + 1;
    if block.len() < 4 {
        return Err(MolError::SdfTruncated { record, block: "header", expected: 4, found: block.len() });
    }
    let name = Some(block[0].trim().to_string()).filter(|s| !s.is_empty());
    let counts = block[3];
    if counts.contains("V3000") {
        return Err(MolError::SdfLine {
            record,
            line: line_no(3),
            message: "V3000 molfiles are not supported".into(),
        });
    }
    let (n_atoms, n_bonds) =
        parse_counts(counts).ok_or(MolError::SdfCountsLine { record, line: line_no(3) })?;

    let mut atoms = Vec::with_capacity(n_atoms);
    let mut coords = Vec::with_capacity(n_atoms);
    for k in 0..n_atoms {
        let idx = 4 + k;
        let parsed = block.get(idx).and_then(|l| parse_atom_line(l));
        let Some((xyz, sym)) = parsed else {
            return Err(MolError::SdfTruncated { record, block: "atom", expected: n_atoms, found: k });
        };
        let el = Element::from_symbol(sym).ok_or_else(|| MolError::SdfLine {
            record,
            line: line_no(idx),
            message: format!("unknown element symbol {sym:?}"),
        })?;
        atoms.push((el, 0));
        coords.push(xyz);
    }

    let bond_start = 4 + n_atoms;
    let mut bonds = Vec::with_capacity(n_bonds);
    for k in 0..n_bonds {
        let idx = bond_start + k;
        let parsed = block
            .get(idx)
            .filter(|l| !l.starts_with("M "))
            .and_then(|l| parse_bond_line(l));
        let Some((a, b, code)) = parsed else {
            return Err(MolError::SdfTruncated { record, block: "bond", expected: n_bonds, found: k });
        };
        let order = BondOrder::from_sdf_code(code)
            .ok_or(MolError::SdfBondCode { record, line: line_no(idx), code })?;
        if a == 0 || b == 0 {
            return Err(MolError::SdfLine {
                record,
                line: line_no(idx),
                message: "atom numbers in the bond block are 1-based".into(),
            });
        }
        bonds.push((a - 1, b - 1, order));
    }

    let mut k = bond_start + n_bonds;
    if let Some(next) = block.get(k) {
        if !next.starts_with("M ") && parse_bond_line(next).is_some() {
            return Err(MolError::SdfCountsMismatch { record, block: "bond", declared: n_bonds });
        }
    }
    while let Some(line) = block.get(k) {
        if line.starts_with("M  END") {
            break;
        }
        if let Some(rest) = line.strip_prefix("M  CHG") {
            let fields: Vec<i64> = rest
                .split_whitespace()
                .map(str::parse)
                .collect::<Result<_, _>>()
                .map_err(|_| MolError::SdfLine {
                    record,
                    line: line_no(k),
                    message: "malformed M  CHG line".into(),
                })?;
            let Some((&count, pairs)) = fields.split_first() else {
                return Err(MolError::SdfLine {
                    record,
                    line: line_no(k),
                    message: "empty M  CHG line".into(),
                });
            };
            if pairs.len() != 2 * count as usize {
                return Err(MolError::SdfLine {
                    record,
                    line: line_no(k),
                    message: format!("M  CHG declares {count} entries, found {}", pairs.len() / 2),
                });
            }
            for pair in pairs.chunks(2) {
                let atom = pair[0] as usize;
                if atom == 0 || atom > n_atoms {
                    return Err(MolError::SdfLine {
                        record,
                        line: line_no(k),
                        message: format!("M  CHG atom {atom} out of range"),
                    });
                }
                atoms[atom - 1].1 = pair[1] as i32;
            }
        }
        k += 1;
    }

    let wrap = |e: MolError| MolError::SdfRecord { record, source: Box::new(e) };
    let graph = MolecularGraph::new(name, atoms, bonds).map_err(wrap)?;
    let conf = Conformation::new(coords).map_err(wrap)?;
    DatasetRecord::new(graph, vec![conf]).map_err(wrap)
}
