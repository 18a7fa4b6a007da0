//! Coverage (COV) and matching (MAT) scores between a reference and a
//! generated conformer set.
//!
//! Recall scores ask how well the generated set covers the references;
//! precision scores swap the two roles. All distances are
//! [`best_rmsd`](crate::geomalign::best_rmsd) values.

use crate::geomalign::{AlignError, RmsdContext};
use crate::model::{Model, ModelError};
use crate::molio::{Conformation, MolecularGraph};
use crate::symmetry::SymmetryGroup;
use crate::train::TrainItem;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use thiserror::Error;

/// Threshold used for small molecules, Å.
pub const DELTA_SMALL: f64 = 0.5;
/// Threshold used for drug-like molecules, Å.
pub const DELTA_DRUGS: f64 = 1.25;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("{0} conformer set is empty")]
    EmptySet(&'static str),
    #[error("delta list must be strictly increasing")]
    UnsortedDeltas,
    #[error(transparent)]
    Align(#[from] AlignError),
}

/// `d[r][g]` = best RMSD between reference `r` and generated `g`.
pub fn rmsd_matrix(
    ctx: &RmsdContext,
    references: &[Conformation],
    generated: &[Conformation],
) -> Result<Vec<Vec<f64>>, MetricsError> {
    if references.is_empty() {
        return Err(MetricsError::EmptySet("reference"));
    }
    if generated.is_empty() {
        return Err(MetricsError::EmptySet("generated"));
    }
    references
        .par_iter()
        .map(|r| generated.iter().map(|g| ctx.rmsd(r, g).map_err(MetricsError::from)).collect())
        .collect()
}

/// COV (percent) and MAT (Å) with the rows of `d` as the set to be covered.
pub fn cov_mat_from_rows(d: &[Vec<f64>], delta: f64) -> (f64, f64) {
    let n = d.len() as f64;
    let mins: Vec<f64> = d.iter().map(|row| row.iter().copied().fold(f64::INFINITY, f64::min)).collect();
    let covered = mins.iter().filter(|&&m| m < delta).count() as f64;
    (100.0 * covered / n, mins.iter().sum::<f64>() / n)
}

fn transpose(d: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let cols = d.first().map_or(0, Vec::len);
    (0..cols).map(|c| d.iter().map(|row| row[c]).collect()).collect()
}

/// Recall COV/MAT: fraction of references within `delta` of some generated
/// conformer, and the mean over references of the closest distance.
pub fn cov_mat_recall(
    references: &[Conformation],
    generated: &[Conformation],
    delta: f64,
    sym: &SymmetryGroup,
    graph: &MolecularGraph,
    heavy_only: bool,
) -> Result<(f64, f64), MetricsError> {
    let ctx = RmsdContext::new(graph, sym, heavy_only)?;
    Ok(cov_mat_from_rows(&rmsd_matrix(&ctx, references, generated)?, delta))
}

/// Precision COV/MAT: recall with the two sets exchanged.
pub fn cov_mat_precision(
    references: &[Conformation],
    generated: &[Conformation],
    delta: f64,
    sym: &SymmetryGroup,
    graph: &MolecularGraph,
    heavy_only: bool,
) -> Result<(f64, f64), MetricsError> {
    let ctx = RmsdContext::new(graph, sym, heavy_only)?;
    Ok(cov_mat_from_rows(&transpose(&rmsd_matrix(&ctx, references, generated)?), delta))
}

/// Recall COV at each threshold of a strictly increasing list.
pub fn cov_delta_sweep(
    references: &[Conformation],
    generated: &[Conformation],
    deltas: &[f64],
    sym: &SymmetryGroup,
    graph: &MolecularGraph,
    heavy_only: bool,
) -> Result<Vec<(f64, f64)>, MetricsError> {
    if deltas.windows(2).any(|w| w[0] >= w[1]) {
        return Err(MetricsError::UnsortedDeltas);
    }
    let ctx = RmsdContext::new(graph, sym, heavy_only)?;
    let d = rmsd_matrix(&ctx, references, generated)?;
    Ok(deltas.iter().map(|&delta| (delta, cov_mat_from_rows(&d, delta).0)).collect())
}

/// Scores for a single molecule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoleculeScores {
    pub name: Option<String>,
    pub num_references: usize,
    pub num_generated: usize,
    pub cov: f64,
    pub mat: f64,
    pub cov_precision: f64,
    pub mat_precision: f64,
}

impl MoleculeScores {
    pub fn compute(
        name: Option<String>,
        ctx: &RmsdContext,
        references: &[Conformation],
        generated: &[Conformation],
        delta: f64,
    ) -> Result<Self, MetricsError> {
        let d = rmsd_matrix(ctx, references, generated)?;
        let (cov, mat) = cov_mat_from_rows(&d, delta);
        let (cov_precision, mat_precision) = cov_mat_from_rows(&transpose(&d), delta);
        Ok(MoleculeScores {
            name,
            num_references: references.len(),
            num_generated: generated.len(),
            cov,
            mat,
            cov_precision,
            mat_precision,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub median: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Summary {
        if values.is_empty() {
            return Summary { mean: f64::NAN, median: f64::NAN };
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let median = if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) };
        Summary { mean: v.iter().sum::<f64>() / n as f64, median }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub delta: f64,
    pub molecules: Vec<MoleculeScores>,
    pub cov: Summary,
    pub mat: Summary,
    pub cov_precision: Summary,
    pub mat_precision: Summary,
}

impl EvalReport {
    pub fn new(delta: f64, molecules: Vec<MoleculeScores>) -> Self {
        let col = |f: fn(&MoleculeScores) -> f64| Summary::of(&molecules.iter().map(f).collect::<Vec<_>>());
        EvalReport {
            delta,
            cov: col(|m| m.cov),
            mat: col(|m| m.mat),
            cov_precision: col(|m| m.cov_precision),
            mat_precision: col(|m| m.mat_precision),
            molecules,
        }
    }

    /// Aligned text table, one row per molecule plus mean and median rows.
    /// Precision columns are included when `precision` is set.
    pub fn to_table(&self, precision: bool) -> String {
        let mut out = String::new();
        let _ = write!(out, "{:<20} {:>5} {:>5} {:>8} {:>8}", "molecule", "n_ref", "n_gen", "COV%", "MAT");
        if precision {
            let _ = write!(out, " {:>8} {:>8}", "COV-P%", "MAT-P");
        }
        out.push('\n');
        for (i, m) in self.molecules.iter().enumerate() {
            let name = m.name.clone().unwrap_or_else(|| format!("#{i}"));
            let _ = write!(out, "{:<20} {:>5} {:>5} {:>8.2} {:>8.4}", name, m.num_references, m.num_generated, m.cov, m.mat);
            if precision {
                let _ = write!(out, " {:>8.2} {:>8.4}", m.cov_precision, m.mat_precision);
            }
            out.push('\n');
        }
        for (label, pick) in [("mean", 0), ("median", 1)] {
            let get = |s: &Summary| if pick == 0 { s.mean } else { s.median };
            let _ = write!(out, "{:<20} {:>5} {:>5} {:>8.2} {:>8.4}", label, "", "", get(&self.cov), get(&self.mat));
            if precision {
                let _ = write!(out, " {:>8.2} {:>8.4}", get(&self.cov_precision), get(&self.mat_precision));
            }
            out.push('\n');
        }
        let _ = writeln!(out, "delta = {} Å", self.delta);
        out
    }
}

/// Generated conformers and scores for every molecule: for a molecule with
/// `N` references, `multiplier · N` conformers are sampled with `z ~ N(0, I)`
/// and scored against the references.
pub fn sample_and_eval(
    model: &Model,
    items: &[TrainItem],
    delta: f64,
    multiplier: usize,
    heavy_only: bool,
    rng: &mut impl Rng,
) -> Result<(EvalReport, Vec<Vec<Conformation>>), EvalError> {
    let mut scores = Vec::with_capacity(items.len());
    let mut generated = Vec::with_capacity(items.len());
    for it in items {
        let n = multiplier * it.conformers.len();
        let graphs = vec![&it.graph; n];
        let gen = model.sample(&graphs, rng)?;
        let ctx = RmsdContext::new(&it.graph, &it.sym, heavy_only).map_err(MetricsError::from)?;
        scores.push(MoleculeScores::compute(it.graph.name().map(str::to_string), &ctx, &it.conformers, &gen, delta)?);
        generated.push(gen);
    }
    Ok((EvalReport::new(delta, scores), generated))
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Model(#[from] ModelError),
}
