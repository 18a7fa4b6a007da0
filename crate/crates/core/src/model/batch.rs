use super::ModelError;
use crate::molio::MolecularGraph;

/// Formal charges with an embedding row.
pub const CHARGE_RANGE: std::ops::RangeInclusive<i32> = -4..=4;
/// Degrees above this share the last embedding row.
pub const MAX_DEGREE: usize = 6;
pub const NUM_ELEMENT_ROWS: usize = crate::molio::NUM_ELEMENTS + 1;

/// Several molecules laid out as one disjoint graph. Atom and bond rows of
/// molecule `b` are contiguous.
#[derive(Clone, Debug)]
pub struct GraphBatch {
    pub num_molecules: usize,
    pub atom_offset: Vec<usize>,
    pub atom_count: Vec<usize>,
    pub atom_mol: Vec<usize>,
    pub element: Vec<usize>,
    pub charge: Vec<usize>,
    pub degree: Vec<usize>,
    /// Undirected bonds as global atom pairs.
    pub bond_pairs: Vec<(usize, usize)>,
    pub bond_i: Vec<usize>,
    pub bond_j: Vec<usize>,
    pub bond_order: Vec<usize>,
    pub bond_mol: Vec<usize>,
    pub bond_offset: Vec<usize>,
    pub bond_count: Vec<usize>,
    /// Directed uses of each bond: receiving atom, sending atom, bond row.
    pub edge_center: Vec<usize>,
    pub edge_neighbor: Vec<usize>,
    pub edge_bond: Vec<usize>,
}

impl GraphBatch {
    pub fn new(graphs: &[&MolecularGraph]) -> Result<Self, ModelError> {
        let mut b = GraphBatch {
            num_molecules: graphs.len(),
            atom_offset: Vec::new(),
            atom_count: Vec::new(),
            atom_mol: Vec::new(),
            element: Vec::new(),
            charge: Vec::new(),
            degree: Vec::new(),
            bond_pairs: Vec::new(),
            bond_i: Vec::new(),
            bond_j: Vec::new(),
            bond_order: Vec::new(),
            bond_mol: Vec::new(),
            bond_offset: Vec::new(),
            bond_count: Vec::new(),
            edge_center: Vec::new(),
            edge_neighbor: Vec::new(),
            edge_bond: Vec::new(),
        };
        for (m, g) in graphs.iter().enumerate() {
            let off = b.atom_mol.len();
            b.atom_offset.push(off);
            b.atom_count.push(g.num_atoms());
            b.bond_offset.push(b.bond_pairs.len());
            b.bond_count.push(g.num_bonds());
            for (i, a) in g.atoms().iter().enumerate() {
                if !CHARGE_RANGE.contains(&a.formal_charge) {
                    return Err(ModelError::UnknownCategory { what: "formal charge", value: a.formal_charge as i64 });
                }
                b.atom_mol.push(m);
                b.element.push(a.element.atomic_number() as usize);
                b.charge.push((a.formal_charge - CHARGE_RANGE.start()) as usize);
                b.degree.push(g.degree(i).min(MAX_DEGREE));
            }
            for bond in g.bonds() {
                let row = b.bond_pairs.len();
                let (i, j) = (off + bond.i, off + bond.j);
                b.bond_pairs.push((i, j));
                b.bond_i.push(i);
                b.bond_j.push(j);
                b.bond_order.push(bond.order.index());
                b.bond_mol.push(m);
                for (c, n) in [(i, j), (j, i)] {
                    b.edge_center.push(c);
                    b.edge_neighbor.push(n);
                    b.edge_bond.push(row);
                }
            }
        }
        Ok(b)
    }

    pub fn num_atoms(&self) -> usize {
        self.atom_mol.len()
    }

    pub fn num_bonds(&self) -> usize {
        self.bond_pairs.len()
    }

    pub fn atom_range(&self, m: usize) -> std::ops::Range<usize> {
        self.atom_offset[m]..self.atom_offset[m] + self.atom_count[m]
    }

    /// `B × cols` matrix whose row `b` is `1/count[b]`, or 0 for empty
    /// segments.
    pub(crate) fn inverse_counts(counts: &[usize], cols: usize) -> Vec<f64> {
        counts
            .iter()
            .flat_map(|&c| std::iter::repeat_n(if c == 0 { 0.0 } else { 1.0 / c as f64 }, cols))
            .collect()
    }
}
