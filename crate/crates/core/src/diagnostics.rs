//! Distance-matrix validity checks.
//!
//! A matrix of pairwise distances between points in ℝ³ obeys the triangle
//! inequality and its element-wise square has rank at most 5. Methods that
//! predict distances directly can break both; coordinates produced directly
//! cannot.

use crate::molio::Conformation;
use thiserror::Error;

pub const TRIANGLE_TOL: f64 = 1e-9;
pub const DEFAULT_RANK_TOL: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiagnosticsError {
    #[error("distance matrix data of length {len} is not square")]
    NotSquare { len: usize },
    #[error("d[{i}][{j}] = {dij} but d[{j}][{i}] = {dji}")]
    Asymmetric { i: usize, j: usize, dij: f64, dji: f64 },
    #[error("diagonal entry {i} is {value}, expected 0")]
    NonZeroDiagonal { i: usize, value: f64 },
    #[error("entry ({i}, {j}) is negative or not finite")]
    InvalidEntry { i: usize, j: usize },
    #[error("triangle check needs at least 3 points, got {0}")]
    TooFewPoints(usize),
}

/// Symmetric non-negative matrix with zero diagonal, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    d: Vec<f64>,
}

impl DistanceMatrix {
    pub fn new(n: usize, d: Vec<f64>) -> Result<Self, DiagnosticsError> {
        if d.len() != n * n {
            return Err(DiagnosticsError::NotSquare { len: d.len() });
        }
        for i in 0..n {
            if d[i * n + i] != 0.0 {
                return Err(DiagnosticsError::NonZeroDiagonal { i, value: d[i * n + i] });
            }
            for j in 0..n {
                let v = d[i * n + j];
                if !v.is_finite() || v < 0.0 {
                    return Err(DiagnosticsError::InvalidEntry { i, j });
                }
                if j > i && (v - d[j * n + i]).abs() > 1e-12 {
                    return Err(DiagnosticsError::Asymmetric { i, j, dij: v, dji: d[j * n + i] });
                }
            }
        }
        Ok(DistanceMatrix { n, d })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, DiagnosticsError> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(DiagnosticsError::NotSquare { len: rows.iter().map(Vec::len).sum() });
        }
        Self::new(n, rows.concat())
    }

    pub fn from_conformation(conf: &Conformation) -> Self {
        let n = conf.num_atoms();
        let mut d = vec![0.0; n * n];
        for i in 0..n {
            for j in i + 1..n {
                let v = conf.distance(i, j);
                d[i * n + j] = v;
                d[j * n + i] = v;
            }
        }
        DistanceMatrix { n, d }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.n + j]
    }
}

/// Fraction of unordered triples breaking any triangle inequality by more
/// than [`TRIANGLE_TOL`].
pub fn triangle_violation_rate(d: &DistanceMatrix) -> Result<f64, DiagnosticsError> {
    let n = d.len();
    if n < 3 {
        return Err(DiagnosticsError::TooFewPoints(n));
    }
    let mut bad = 0u64;
    let mut total = 0u64;
    for i in 0..n {
        for j in i + 1..n {
            let dij = d.get(i, j);
            for k in j + 1..n {
                let (dik, djk) = (d.get(i, k), d.get(j, k));
                total += 1;
                if dij > dik + djk + TRIANGLE_TOL || dik > dij + djk + TRIANGLE_TOL || djk > dij + dik + TRIANGLE_TOL {
                    bad += 1;
                }
            }
        }
    }
    Ok(bad as f64 / total as f64)
}

/// Singular values of a dense row-major `rows × cols` matrix, descending,
/// by one-sided Jacobi rotations on the columns.
pub fn singular_values(rows: usize, cols: usize, data: &[f64]) -> Vec<f64> {
    assert_eq!(data.len(), rows * cols);
    // work on columns of the matrix with fewer columns
    let (m, n, mut a) = if cols <= rows {
        (rows, cols, data.to_vec())
    } else {
        let mut t = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                t[c * rows + r] = data[r * cols + c];
            }
        }
        (cols, rows, t)
    };
    let at = |a: &[f64], r: usize, c: usize| a[r * n + c];
    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in p + 1..n {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for r in 0..m {
                    let (x, y) = (at(&a, r, p), at(&a, r, q));
                    alpha += x * x;
                    beta += y * y;
                    gamma += x * y;
                }
                if gamma == 0.0 || gamma.abs() <= 1e-15 * (alpha * beta).sqrt() {
                    continue;
                }
                off = off.max(gamma.abs() / (alpha * beta).sqrt());
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for r in 0..m {
                    let (x, y) = (at(&a, r, p), at(&a, r, q));
                    a[r * n + p] = c * x - s * y;
                    a[r * n + q] = s * x + c * y;
                }
            }
        }
        if off <= 1e-15 {
            break;
        }
    }
    let mut sv: Vec<f64> = (0..n).map(|c| (0..m).map(|r| at(&a, r, c).powi(2)).sum::<f64>().sqrt()).collect();
    sv.sort_by(|x, y| y.total_cmp(x));
    sv
}

/// Numerical rank of the element-wise squared distance matrix: the number of
/// singular values above `rel_tol · σ_max`.
pub fn squared_distance_rank(d: &DistanceMatrix, rel_tol: f64) -> usize {
    let sq: Vec<f64> = d.d.iter().map(|x| x * x).collect();
    let sv = singular_values(d.n, d.n, &sq);
    let Some(&max) = sv.first() else { return 0 };
    if max == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * max).count()
}

/// Both diagnostics for one conformation.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct ConformerDiagnostics {
    pub triangle_violation_rate: f64,
    pub squared_distance_rank: usize,
}

pub fn diagnose(conf: &Conformation) -> Result<ConformerDiagnostics, DiagnosticsError> {
    let d = DistanceMatrix::from_conformation(conf);
    Ok(ConformerDiagnostics {
        triangle_violation_rate: triangle_violation_rate(&d)?,
        squared_distance_rank: squared_distance_rank(&d, DEFAULT_RANK_TOL),
    })
}
