//! Loss terms recorded on a tape: the invariant alignment loss with a frozen
//! assignment, bond-length and bond-angle auxiliaries, and the Gaussian KL.

use super::ModelError;
use crate::autodiff::{Matrix, Tape, Var};
use crate::geomalign::RigidMotion;
use serde::{Deserialize, Serialize};

/// The selected relabeling and rigid motion for one (molecule, level) pair:
/// the prediction is compared as `motion(σ(R̂))` against the target, where
/// `σ(R̂)[i] = R̂[perm[i]]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub perm: Vec<usize>,
    pub rotation: [[f64; 3]; 3],
    pub translation: [f64; 3],
}

impl Assignment {
    pub fn motion(&self) -> RigidMotion {
        RigidMotion { rotation: self.rotation, translation: self.translation }
    }
}

/// Handles created by [`rtp_term`], kept so callers can inspect which tape
/// nodes carry the frozen alignment.
pub struct RtpTerm {
    pub loss: Var,
    /// Rotation and translation leaves (absent when differentiating through
    /// the eigenvalue).
    pub motion_leaves: Option<(Var, Var)>,
}

/// `(v, flat, sign)`: entry `flat` of the row-major 4×4 block of one atom is
/// `sign · v`-th component of `[x − y, x + y]`.
const KEARSLEY_PATTERN: [(usize, usize, f64); 12] = [
    (0, 1, -1.0),
    (1, 2, -1.0),
    (2, 3, -1.0),
    (0, 4, 1.0),
    (5, 6, 1.0),
    (4, 7, -1.0),
    (1, 8, 1.0),
    (5, 9, -1.0),
    (3, 11, 1.0),
    (2, 12, 1.0),
    (4, 13, 1.0),
    (3, 14, -1.0),
];

fn kearsley_pattern() -> Matrix {
    let mut p = Matrix::zeros(6, 16);
    for (v, f, s) in KEARSLEY_PATTERN {
        p.set(v, f, s);
    }
    p
}

/// Squared alignment residual of rows `offset..offset+n` of `r_hat` against
/// `target` with `σ` frozen. With `through_rho` off the rigid motion is a
/// constant behind a stop-gradient; with it on, the residual is the smallest
/// eigenvalue of the Kearsley matrix built on the tape, so the gradient also
/// flows through the optimal rotation.
pub fn rtp_term(
    tape: &mut Tape,
    r_hat: Var,
    offset: usize,
    target: &[[f64; 3]],
    assignment: &Assignment,
    through_rho: bool,
) -> Result<RtpTerm, ModelError> {
    let index: Vec<usize> = assignment.perm.iter().map(|&p| offset + p).collect();
    let permuted = tape.gather_rows(r_hat, &index)?;
    if !through_rho {
        let rot_t = Matrix::new(3, 3, (0..9).map(|k| assignment.rotation[k % 3][k / 3]).collect())?;
        let rot_leaf = tape.leaf(rot_t);
        let t_leaf = tape.leaf(Matrix::row_vector(assignment.translation.to_vec()));
        let rot = tape.stop_gradient(rot_leaf)?;
        let t = tape.stop_gradient(t_leaf)?;
        let rotated = tape.matmul(permuted, rot)?;
        let moved = tape.add_row(rotated, t)?;
        let y = tape.leaf(Matrix::from_rows(target));
        let diff = tape.sub(moved, y)?;
        let sq = tape.mul(diff, diff)?;
        let loss = tape.sum(sq)?;
        return Ok(RtpTerm { loss, motion_leaves: Some((rot_leaf, t_leaf)) });
    }
    let mean = tape.row_mean(permuted)?;
    let neg_mean = tape.scale(mean, -1.0)?;
    let x = tape.add_row(permuted, neg_mean)?;
    let n = target.len() as f64;
    let c: [f64; 3] = std::array::from_fn(|a| target.iter().map(|p| p[a]).sum::<f64>() / n);
    let yc: Vec<[f64; 3]> = target.iter().map(|p| [p[0] - c[0], p[1] - c[1], p[2] - c[2]]).collect();
    let y = tape.leaf(Matrix::from_rows(&yc));
    let m = tape.sub(x, y)?;
    let p = tape.add(x, y)?;
    let mp = tape.concat_cols(&[m, p])?;
    let pattern = tape.leaf(kearsley_pattern());
    let blocks = tape.matmul(mp, pattern)?;
    let a = tape.reshape(blocks, 4 * target.len(), 4)?;
    let at = tape.transpose(a)?;
    let k = tape.matmul(at, a)?;
    let loss = tape.min_eigenvalue4(k)?;
    Ok(RtpTerm { loss, motion_leaves: None })
}

/// Sum over `pairs` of squared differences between predicted and target
/// distances, divided by the number of pairs.
pub fn bond_term(tape: &mut Tape, r_hat: Var, pairs: &[(usize, usize)], target: &[f64]) -> Result<Var, ModelError> {
    let d = tape.row_norm_diff(r_hat, pairs)?;
    let t = tape.leaf(Matrix::column(target.to_vec()));
    let diff = tape.sub(d, t)?;
    let sq = tape.mul(diff, diff)?;
    let s = tape.sum(sq)?;
    Ok(tape.scale(s, 1.0 / pairs.len() as f64)?)
}

/// Mean over triples `(i, j, k)` of the squared difference between the
/// predicted and target cosines of the angle j–i–k.
pub fn angle_term(
    tape: &mut Tape,
    r_hat: Var,
    triples: &[(usize, usize, usize)],
    target_cos: &[f64],
) -> Result<Var, ModelError> {
    let value = tape.value(r_hat);
    for &(i, j, k) in triples {
        let len = |a: usize, b: usize| {
            (0..3).map(|c| (value.get(a, c) - value.get(b, c)).powi(2)).sum::<f64>().sqrt()
        };
        if len(i, j) == 0.0 || len(i, k) == 0.0 {
            return Err(ModelError::DegenerateAngle { i, j, k });
        }
    }
    let is: Vec<usize> = triples.iter().map(|t| t.0).collect();
    let js: Vec<usize> = triples.iter().map(|t| t.1).collect();
    let ks: Vec<usize> = triples.iter().map(|t| t.2).collect();
    let ri = tape.gather_rows(r_hat, &is)?;
    let rj = tape.gather_rows(r_hat, &js)?;
    let rk = tape.gather_rows(r_hat, &ks)?;
    let u = tape.sub(rj, ri)?;
    let v = tape.sub(rk, ri)?;
    let uv = tape.mul(u, v)?;
    let ones = tape.leaf(Matrix::filled(3, 1, 1.0));
    let dot = tape.matmul(uv, ones)?;
    let ij: Vec<(usize, usize)> = triples.iter().map(|t| (t.0, t.1)).collect();
    let ik: Vec<(usize, usize)> = triples.iter().map(|t| (t.0, t.2)).collect();
    let nu = tape.row_norm_diff(r_hat, &ij)?;
    let nv = tape.row_norm_diff(r_hat, &ik)?;
    let denom = tape.mul(nu, nv)?;
    let cos = tape.div(dot, denom)?;
    let t = tape.leaf(Matrix::column(target_cos.to_vec()));
    let diff = tape.sub(cos, t)?;
    let sq = tape.mul(diff, diff)?;
    let s = tape.sum(sq)?;
    Ok(tape.scale(s, 1.0 / triples.len() as f64)?)
}

/// Cosine of the angle j–i–k in a coordinate list, or an error when either
/// arm has zero length.
pub fn cosine(coords: &[[f64; 3]], i: usize, j: usize, k: usize) -> Result<f64, ModelError> {
    let u: [f64; 3] = std::array::from_fn(|a| coords[j][a] - coords[i][a]);
    let v: [f64; 3] = std::array::from_fn(|a| coords[k][a] - coords[i][a]);
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Err(ModelError::DegenerateAngle { i, j, k });
    }
    Ok((u[0] * v[0] + u[1] * v[1] + u[2] * v[2]) / (nu * nv))
}

/// KL(N(μ, diag exp(logvar)) ‖ N(0, I)) summed over all rows and columns.
pub fn kl_term(tape: &mut Tape, mu: Var, logvar: Var) -> Result<Var, ModelError> {
    let (r, c) = tape.shape(mu);
    let mu2 = tape.mul(mu, mu)?;
    let var = tape.exp(logvar)?;
    let a = tape.add(mu2, var)?;
    let b = tape.sub(a, logvar)?;
    let ones = tape.leaf(Matrix::filled(r, c, 1.0));
    let e = tape.sub(b, ones)?;
    let s = tape.sum(e)?;
    Ok(tape.scale(s, 0.5)?)
}
