//! Optimal superposition of two conformations and the invariant losses built
//! on it.
//!
//! The rotation minimising `‖ρ(source) − target‖²_F` is found as the
//! eigenvector of the smallest eigenvalue of the symmetric 4×4 Kearsley
//! matrix; that eigenvalue is the residual itself. Symmetry-aware variants
//! take the minimum over a [`SymmetryGroup`].

use crate::molio::{Conformation, MolecularGraph};
use crate::symmetry::{SymmetryError, SymmetryGroup};
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AlignError {
    #[error("shape mismatch: target has {target} atoms, moving has {moving} atoms")]
    ShapeMismatch { target: usize, moving: usize },
    #[error("cannot align empty conformations")]
    Empty,
    #[error("non-finite coordinate in input")]
    NonFinite,
    #[error("symmetry group is empty")]
    EmptyGroup,
    #[error("no atoms selected for RMSD")]
    NoAtomsSelected,
    #[error(transparent)]
    Symmetry(#[from] SymmetryError),
}

pub type Mat3 = [[f64; 3]; 3];

/// A proper rotation followed by a translation, acting on row vectors as
/// `x ↦ R·x + t`.
#[derive(Clone, Debug, PartialEq)]
pub struct RigidMotion {
    pub rotation: Mat3,
    pub translation: [f64; 3],
}

impl RigidMotion {
    pub fn identity() -> Self {
        RigidMotion {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            translation: [0.0; 3],
        }
    }

    pub fn apply_point(&self, p: &[f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        std::array::from_fn(|a| r[a][0] * p[0] + r[a][1] * p[1] + r[a][2] * p[2] + self.translation[a])
    }

    pub fn apply(&self, conf: &Conformation) -> Conformation {
        Conformation::new(conf.coords().iter().map(|p| self.apply_point(p)).collect())
            .expect("rigid motion of finite coordinates is finite")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentResult {
    pub motion: RigidMotion,
    /// Minimal `‖ρ(source) − target‖²_F` in Å².
    pub sq_residual: f64,
    /// Unit quaternion (q0, q1, q2, q3), q0 the scalar part.
    pub quaternion: [f64; 4],
}

/// Rotation matrix of a unit quaternion.
pub fn quaternion_to_rotation(q: &[f64; 4]) -> Mat3 {
    let [q0, q1, q2, q3] = *q;
    [
        [
            q0 * q0 + q1 * q1 - q2 * q2 - q3 * q3,
            2.0 * (q1 * q2 - q0 * q3),
            2.0 * (q1 * q3 + q0 * q2),
        ],
        [
            2.0 * (q1 * q2 + q0 * q3),
            q0 * q0 - q1 * q1 + q2 * q2 - q3 * q3,
            2.0 * (q2 * q3 - q0 * q1),
        ],
        [
            2.0 * (q1 * q3 - q0 * q2),
            2.0 * (q2 * q3 + q0 * q1),
            q0 * q0 - q1 * q1 - q2 * q2 + q3 * q3,
        ],
    ]
}

/// Eigen-decomposition of a symmetric 4×4 matrix by cyclic Jacobi rotations.
/// Returns eigenvalues and the matching eigenvectors (as rows).
pub fn symmetric_eigen4(m: &[[f64; 4]; 4]) -> ([f64; 4], [[f64; 4]; 4]) {
    let mut a = *m;
    let mut v = [[0.0; 4]; 4];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    let scale = a.iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
    let tol = 1e-13 * scale.max(1.0);
    for _sweep in 0..64 {
        let off: f64 = (0..4)
            .flat_map(|p| (0..4).filter(move |&q| q != p).map(move |q| (p, q)))
            .map(|(p, q)| a[p][q] * a[p][q])
            .sum::<f64>()
            .sqrt();
        if off < tol {
            break;
        }
        for p in 0..3 {
            for q in p + 1..4 {
                if a[p][q] == 0.0 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..4 {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..4 {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                a[p][q] = 0.0;
                a[q][p] = 0.0;
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    let values = std::array::from_fn(|i| a[i][i]);
    let vectors = std::array::from_fn(|i| std::array::from_fn(|k| v[k][i]));
    (values, vectors)
}

/// Kearsley matrix of centred coordinates; `qᵀKq` is the residual of
/// rotating `source` by `q` onto `target`.
pub fn kearsley_matrix(target: &[[f64; 3]], source: &[[f64; 3]]) -> [[f64; 4]; 4] {
    let mut k = [[0.0; 4]; 4];
    for (y, x) in target.iter().zip(source) {
        let m = [x[0] - y[0], x[1] - y[1], x[2] - y[2]];
        let p = [x[0] + y[0], x[1] + y[1], x[2] + y[2]];
        k[0][0] += m[0] * m[0] + m[1] * m[1] + m[2] * m[2];
        k[0][1] += p[1] * m[2] - m[1] * p[2];
        k[0][2] += m[0] * p[2] - p[0] * m[2];
        k[0][3] += p[0] * m[1] - m[0] * p[1];
        k[1][1] += m[0] * m[0] + p[1] * p[1] + p[2] * p[2];
        k[1][2] += m[0] * m[1] - p[0] * p[1];
        k[1][3] += m[0] * m[2] - p[0] * p[2];
        k[2][2] += p[0] * p[0] + m[1] * m[1] + p[2] * p[2];
        k[2][3] += m[1] * m[2] - p[1] * p[2];
        k[3][3] += p[0] * p[0] + p[1] * p[1] + m[2] * m[2];
    }
    for i in 0..4 {
        for j in 0..i {
            k[i][j] = k[j][i];
        }
    }
    k
}

fn centroid(rows: &[[f64; 3]]) -> [f64; 3] {
    let n = rows.len() as f64;
    let mut c = [0.0; 3];
    for r in rows {
        for a in 0..3 {
            c[a] += r[a];
        }
    }
    c.map(|x| x / n)
}

fn centered(rows: &[[f64; 3]]) -> (Vec<[f64; 3]>, [f64; 3]) {
    let c = centroid(rows);
    (rows.iter().map(|r| [r[0] - c[0], r[1] - c[1], r[2] - c[2]]).collect(), c)
}

fn check_pair(target: &Conformation, source: &Conformation) -> Result<(), AlignError> {
    if target.num_atoms() != source.num_atoms() {
        return Err(AlignError::ShapeMismatch { target: target.num_atoms(), moving: source.num_atoms() });
    }
    if target.num_atoms() == 0 {
        return Err(AlignError::Empty);
    }
    let finite = |c: &Conformation| c.coords().iter().flatten().all(|x| x.is_finite());
    if !finite(target) || !finite(source) {
        return Err(AlignError::NonFinite);
    }
    Ok(())
}

/// Minimal eigenpair of the Kearsley matrix of two centred row sets.
fn min_eigenpair(target_c: &[[f64; 3]], source_c: &[[f64; 3]]) -> (f64, [f64; 4]) {
    let k = kearsley_matrix(target_c, source_c);
    let (values, vectors) = symmetric_eigen4(&k);
    let best = (0..4)
        .min_by(|&a, &b| values[a].total_cmp(&values[b]))
        .expect("four eigenvalues");
    let mut q = vectors[best];
    let norm = q.iter().map(|x| x * x).sum::<f64>().sqrt();
    q = q.map(|x| x / norm);
    // fix the sign so the scalar part is non-negative
    if q[0] < 0.0 {
        q = q.map(|x| -x);
    }
    (values[best], q)
}

fn align_rows(target: &[[f64; 3]], source: &[[f64; 3]]) -> AlignmentResult {
    let (tc, t_mean) = centered(target);
    let (sc, s_mean) = centered(source);
    let (lambda, q) = min_eigenpair(&tc, &sc);
    let rotation = quaternion_to_rotation(&q);
    let rs: [f64; 3] = std::array::from_fn(|a| {
        rotation[a][0] * s_mean[0] + rotation[a][1] * s_mean[1] + rotation[a][2] * s_mean[2]
    });
    AlignmentResult {
        motion: RigidMotion { rotation, translation: std::array::from_fn(|a| t_mean[a] - rs[a]) },
        sq_residual: lambda.max(0.0),
        quaternion: q,
    }
}

/// Rigid motion minimising `‖ρ(source) − target‖²_F`.
pub fn align(target: &Conformation, source: &Conformation) -> Result<AlignmentResult, AlignError> {
    check_pair(target, source)?;
    Ok(align_rows(target.coords(), source.coords()))
}

/// Roto-translation invariant loss in Å².
pub fn loss_rt(target: &Conformation, source: &Conformation) -> Result<f64, AlignError> {
    align(target, source).map(|a| a.sq_residual)
}

/// Result of the joint minimisation over rigid motions and symmetries.
#[derive(Clone, Debug, PartialEq)]
pub struct RtpResult {
    pub loss: f64,
    /// Index into the group's permutation list.
    pub perm_index: usize,
    pub alignment: AlignmentResult,
}

/// `min over σ ∈ sym, ρ of ‖ρ(σ(source)) − target‖²_F`.
pub fn loss_rtp(
    target: &Conformation,
    source: &Conformation,
    sym: &SymmetryGroup,
) -> Result<RtpResult, AlignError> {
    check_pair(target, source)?;
    if sym.is_empty() {
        return Err(AlignError::EmptyGroup);
    }
    if sym.num_atoms() != source.num_atoms() {
        return Err(SymmetryError::LengthMismatch { perm: sym.num_atoms(), rows: source.num_atoms() }.into());
    }
    Ok(rtp_rows(target.coords(), source.coords(), sym.perms()))
}

fn rtp_rows(target: &[[f64; 3]], source: &[[f64; 3]], perms: &[Vec<usize>]) -> RtpResult {
    let (tc, _) = centered(target);
    let (sc, _) = centered(source);
    let eval = |(k, p): (usize, &Vec<usize>)| {
        let permuted: Vec<[f64; 3]> = p.iter().map(|&i| sc[i]).collect();
        (min_eigenpair(&tc, &permuted).0.max(0.0), k)
    };
    let pick = |a: (f64, usize), b: (f64, usize)| {
        if b.0 < a.0 || (b.0 == a.0 && b.1 < a.1) {
            b
        } else {
            a
        }
    };
    let (_, best) = if perms.len() > 64 {
        perms.par_iter().enumerate().map(eval).reduce(|| (f64::INFINITY, usize::MAX), pick)
    } else {
        perms.iter().enumerate().map(eval).fold((f64::INFINITY, usize::MAX), pick)
    };
    let permuted: Vec<[f64; 3]> = perms[best].iter().map(|&i| source[i]).collect();
    let alignment = align_rows(target, &permuted);
    RtpResult { loss: alignment.sq_residual, perm_index: best, alignment }
}

/// Symmetry-aware RMSD with a fixed atom selection, precomputed once per
/// molecule so that many conformer pairs can be compared cheaply.
#[derive(Clone, Debug)]
pub struct RmsdContext {
    rows: Vec<usize>,
    group: SymmetryGroup,
    num_atoms: usize,
}

impl RmsdContext {
    pub fn new(graph: &MolecularGraph, sym: &SymmetryGroup, heavy_only: bool) -> Result<Self, AlignError> {
        if sym.is_empty() {
            return Err(AlignError::EmptyGroup);
        }
        if sym.num_atoms() != graph.num_atoms() {
            return Err(SymmetryError::LengthMismatch { perm: sym.num_atoms(), rows: graph.num_atoms() }.into());
        }
        let rows: Vec<usize> = if heavy_only {
            graph.heavy_atom_indices()
        } else {
            (0..graph.num_atoms()).collect()
        };
        if rows.is_empty() {
            return Err(AlignError::NoAtomsSelected);
        }
        let group = sym.restrict(&rows)?;
        Ok(RmsdContext { rows, group, num_atoms: graph.num_atoms() })
    }

    pub fn selected_atoms(&self) -> &[usize] {
        &self.rows
    }

    pub fn rmsd(&self, reference: &Conformation, generated: &Conformation) -> Result<f64, AlignError> {
        check_pair(reference, generated)?;
        if reference.num_atoms() != self.num_atoms {
            return Err(AlignError::ShapeMismatch { target: self.num_atoms, moving: reference.num_atoms() });
        }
        let r: Vec<[f64; 3]> = self.rows.iter().map(|&i| reference.coords()[i]).collect();
        let g: Vec<[f64; 3]> = self.rows.iter().map(|&i| generated.coords()[i]).collect();
        let best = rtp_rows(&r, &g, self.group.perms());
        Ok((best.loss.max(0.0) / self.rows.len() as f64).sqrt())
    }
}

/// Best RMSD in Å over rigid motions and symmetric relabelings, optionally
/// restricted to heavy atoms.
pub fn best_rmsd(
    reference: &Conformation,
    generated: &Conformation,
    sym: &SymmetryGroup,
    heavy_only: bool,
    graph: &MolecularGraph,
) -> Result<f64, AlignError> {
    RmsdContext::new(graph, sym, heavy_only)?.rmsd(reference, generated)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_conf(rng: &mut ChaCha8Rng, n: usize) -> Conformation {
        Conformation::new((0..n).map(|_| std::array::from_fn(|_| rng.random_range(-2.0..2.0))).collect())
            .unwrap()
    }

    fn random_motion(rng: &mut ChaCha8Rng) -> RigidMotion {
        let mut q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
        q = q.map(|x| x / n);
        RigidMotion {
            rotation: quaternion_to_rotation(&q),
            translation: std::array::from_fn(|_| rng.random_range(-5.0..5.0)),
        }
    }

    fn sq_dist(a: &Conformation, b: &Conformation) -> f64 {
        a.coords()
            .iter()
            .zip(b.coords())
            .map(|(x, y)| (0..3).map(|k| (x[k] - y[k]).powi(2)).sum::<f64>())
            .sum()
    }

    #[test]
    fn self_alignment_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = random_conf(&mut rng, 7);
        let a = align(&c, &c).unwrap();
        assert!(a.sq_residual < 1e-12);
        for i in 0..3 {
            for j in 0..3 {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((a.motion.rotation[i][j] - e).abs() < 1e-7);
            }
            assert!(a.motion.translation[i].abs() < 1e-7);
        }
    }

    #[test]
    fn rigid_copy_is_removed() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let c = random_conf(&mut rng, 6);
            let moved = random_motion(&mut rng).apply(&c);
            let a = align(&c, &moved).unwrap();
            assert!(a.sq_residual < 1e-8, "{}", a.sq_residual);
            assert!(sq_dist(&a.motion.apply(&moved), &c) < 1e-8);
        }
    }

    #[test]
    fn motion_reproduces_residual_and_is_proper() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let t = random_conf(&mut rng, 5);
            let s = random_conf(&mut rng, 5);
            let a = align(&t, &s).unwrap();
            let direct = sq_dist(&a.motion.apply(&s), &t);
            assert!((direct - a.sq_residual).abs() <= 1e-8 * direct.max(1.0));
            let r = a.motion.rotation;
            let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
                - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
                + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
            assert!((det - 1.0).abs() < 1e-10);
            for i in 0..3 {
                for j in 0..3 {
                    let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                    let e = if i == j { 1.0 } else { 0.0 };
                    assert!((dot - e).abs() < 1e-10);
                }
            }
            let qn: f64 = a.quaternion.iter().map(|x| x * x).sum();
            assert!((qn - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn eigenpair_residual_is_tiny() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let t = random_conf(&mut rng, 6).centered();
            let s = random_conf(&mut rng, 6).centered();
            let k = kearsley_matrix(t.coords(), s.coords());
            let (lambda, q) = min_eigenpair(t.coords(), s.coords());
            let res: f64 = (0..4)
                .map(|i| ((0..4).map(|j| k[i][j] * q[j]).sum::<f64>() - lambda * q[i]).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!(res <= 1e-10, "{res}");
        }
    }

    #[test]
    fn single_atom_and_collinear() {
        let a = Conformation::new(vec![[1.0, 2.0, 3.0]]).unwrap();
        let b = Conformation::new(vec![[-4.0, 0.5, 9.0]]).unwrap();
        assert_eq!(loss_rt(&a, &b).unwrap(), 0.0);

        let line = Conformation::new(vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.5, 0.0, 0.0]]).unwrap();
        let spun = RigidMotion {
            rotation: [[1.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]],
            translation: [0.0; 3],
        }
        .apply(&line);
        assert!(loss_rt(&line, &spun).unwrap() < 1e-12);
    }

    #[test]
    fn errors() {
        let a = Conformation::new(vec![[0.0; 3]; 2]).unwrap();
        let b = Conformation::new(vec![[0.0; 3]; 3]).unwrap();
        assert!(matches!(align(&a, &b), Err(AlignError::ShapeMismatch { target: 2, moving: 3 })));
        let e = Conformation::new(vec![]).unwrap();
        assert!(matches!(align(&e, &e), Err(AlignError::Empty)));
        let g = SymmetryGroup::from_perms(vec![]).unwrap();
        assert!(matches!(loss_rtp(&a, &a, &g), Err(AlignError::EmptyGroup)));
    }

    #[test]
    fn rtp_with_identity_equals_rt() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let t = random_conf(&mut rng, 5);
        let s = random_conf(&mut rng, 5);
        let r = loss_rtp(&t, &s, &SymmetryGroup::identity(5)).unwrap();
        assert_eq!(r.perm_index, 0);
        assert!((r.loss - loss_rt(&t, &s).unwrap()).abs() < 1e-12);
    }
}
