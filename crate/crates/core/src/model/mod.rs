//! The conformation generator.
//!
//! Three stacks of graph-network blocks share one block design: a 2D encoder
//! that turns the molecular graph into initial representations and a first
//! conformation, a 3D encoder that reads a ground-truth conformation and
//! outputs a diagonal Gaussian over the latent `z`, and a decoder that
//! refines coordinates block by block given `z`. Each block updates bond,
//! atom (by attention over neighbours) and global representations, then
//! (except in the 3D encoder) moves every atom by a predicted offset and
//! re-centres the molecule.
//!
//! Several molecules are processed together as one disjoint graph; see
//! [`GraphBatch`].

pub mod batch;
pub mod loss;
pub mod params;

pub use batch::GraphBatch;
pub use loss::Assignment;
pub use params::ParamStore;

use crate::autodiff::{AutodiffError, BatchNormMode, BatchStats, Matrix, ParamId, Tape, Var};
use crate::geomalign::{loss_rtp, AlignError};
use crate::molio::{Conformation, MolecularGraph};
use crate::symmetry::SymmetryGroup;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

pub const LEAKY_SLOPE: f64 = 0.2;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Align(#[from] AlignError),
    #[error("unknown {what} category {value}")]
    UnknownCategory { what: &'static str, value: i64 },
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("zero-length bond in angle ({j})-({i})-({k})")]
    DegenerateAngle { i: usize, j: usize, k: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// Which alignment loss and auxiliaries the objective uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossVariant {
    /// Rigid-motion invariant loss only.
    L1,
    /// Rigid-motion invariant loss plus bond and angle terms.
    L2,
    /// Rigid-motion and permutation invariant loss plus bond and angle terms.
    L3,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_blocks: usize,
    pub dim: usize,
    pub mlp_hidden: usize,
    pub dropout: f64,
    /// Weight of the intermediate-block alignment losses.
    pub lambda_aux: f64,
    pub beta_min: f64,
    pub beta_max: f64,
    /// Weight of the bond-length and bond-angle losses.
    pub lambda1: f64,
    pub use_aux_losses: bool,
    /// Minimise over symmetric relabelings as well as rigid motions.
    pub use_symmetry: bool,
    pub grad_through_rho: bool,
    /// Seed for parameter initialisation.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_blocks: 6,
            dim: 64,
            mlp_hidden: 256,
            dropout: 0.1,
            lambda_aux: 0.2,
            beta_min: 1e-4,
            beta_max: 1e-3,
            lambda1: 0.1,
            use_aux_losses: false,
            use_symmetry: true,
            grad_through_rho: false,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.into()));
        if self.num_blocks == 0 {
            return bad("num_blocks must be at least 1");
        }
        if self.dim == 0 || self.mlp_hidden == 0 {
            return bad("dim and mlp_hidden must be at least 1");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        for (name, v) in [
            ("lambda_aux", self.lambda_aux),
            ("beta_min", self.beta_min),
            ("beta_max", self.beta_max),
            ("lambda1", self.lambda1),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(&format!("{name} must be a finite non-negative number"));
            }
        }
        if self.beta_min > self.beta_max {
            return bad("beta_min exceeds beta_max");
        }
        Ok(())
    }

    pub fn with_variant(mut self, v: LossVariant) -> Self {
        self.use_symmetry = v == LossVariant::L3;
        self.use_aux_losses = v != LossVariant::L1;
        self
    }
}

/// Diagonal Gaussian posterior over the latent.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPosterior {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl GaussianPosterior {
    pub fn from_logvar(mu: Vec<f64>, logvar: &[f64]) -> Self {
        GaussianPosterior { mu, sigma: logvar.iter().map(|l| (0.5 * l).exp()).collect() }
    }

    /// KL divergence to the standard normal.
    pub fn kl_divergence(&self) -> f64 {
        0.5 * self
            .mu
            .iter()
            .zip(&self.sigma)
            .map(|(m, s)| m * m + s * s - 2.0 * s.ln() - 1.0)
            .sum::<f64>()
    }

    /// `z = μ + σ ⊙ ε`.
    pub fn reparameterize(&self, eps: &[f64]) -> Result<Vec<f64>, ModelError> {
        if eps.len() != self.mu.len() {
            return Err(ModelError::ShapeMismatch(format!("eps has {} entries, expected {}", eps.len(), self.mu.len())));
        }
        Ok(self.mu.iter().zip(&self.sigma).zip(eps).map(|((m, s), e)| m + s * e).collect())
    }
}

/// Representations and coordinates of one molecule between blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub h_v: Matrix,
    pub h_e: Matrix,
    pub u: Matrix,
    pub r_hat: Matrix,
}

#[derive(Clone, Debug)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

#[derive(Clone, Debug)]
struct Mlp {
    l1: Linear,
    gamma: ParamId,
    beta: ParamId,
    running_mean: usize,
    running_var: usize,
    l2: Linear,
}

#[derive(Clone, Debug)]
struct Block {
    coord_embed: Mlp,
    dist_embed: Mlp,
    bond_update: Mlp,
    w_q: ParamId,
    w_k: ParamId,
    w_v: ParamId,
    attn: ParamId,
    atom_update: Mlp,
    global_update: Mlp,
    coord_update: Option<Mlp>,
}

#[derive(Clone, Debug)]
struct Embeddings {
    element: ParamId,
    charge: ParamId,
    degree: ParamId,
    bond: ParamId,
    global: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockMode {
    Encoder2d,
    Encoder3d,
    Decoder,
}

struct Builder<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
    hidden: usize,
}

impl Builder<'_> {
    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        Linear {
            w: self.store.add_glorot(format!("{name}.w"), fan_in, fan_out, &mut self.rng),
            b: self.store.add(format!("{name}.b"), Matrix::zeros(1, fan_out)),
        }
    }

    fn mlp(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Mlp {
        let h = self.hidden;
        Mlp {
            l1: self.linear(&format!("{name}.l1"), fan_in, h),
            gamma: self.store.add(format!("{name}.bn.gamma"), Matrix::filled(1, h, 1.0)),
            beta: self.store.add(format!("{name}.bn.beta"), Matrix::zeros(1, h)),
            running_mean: self.store.add_buffer(format!("{name}.bn.running_mean"), vec![0.0; h]),
            running_var: self.store.add_buffer(format!("{name}.bn.running_var"), vec![1.0; h]),
            l2: self.linear(&format!("{name}.l2"), h, fan_out),
        }
    }

    fn block(&mut self, name: &str, d: usize, mode: BlockMode) -> Block {
        Block {
            coord_embed: self.mlp(&format!("{name}.coord_embed"), 3, d),
            dist_embed: self.mlp(&format!("{name}.dist_embed"), 1, d),
            bond_update: self.mlp(&format!("{name}.bond_update"), 4 * d, d),
            w_q: self.store.add_glorot(format!("{name}.attn.w_q"), d, d, &mut self.rng),
            w_k: self.store.add_glorot(format!("{name}.attn.w_k"), 2 * d, d, &mut self.rng),
            w_v: self.store.add_glorot(format!("{name}.attn.w_v"), 2 * d, d, &mut self.rng),
            attn: self.store.add_glorot(format!("{name}.attn.a"), d, 1, &mut self.rng),
            atom_update: self.mlp(&format!("{name}.atom_update"), 3 * d, d),
            global_update: self.mlp(&format!("{name}.global_update"), 3 * d, d),
            coord_update: (mode != BlockMode::Encoder3d).then(|| self.mlp(&format!("{name}.coord_update"), d, 3)),
        }
    }

    fn embeddings(&mut self, name: &str, d: usize) -> Embeddings {
        let table = |s: &mut Self, what: &str, rows: usize| s.store.add_glorot(format!("{name}.embed.{what}"), rows, d, &mut s.rng);
        Embeddings {
            element: table(self, "element", batch::NUM_ELEMENT_ROWS),
            charge: table(self, "charge", batch::CHARGE_RANGE.count()),
            degree: table(self, "degree", batch::MAX_DEGREE + 1),
            bond: table(self, "bond", crate::molio::BondOrder::ALL.len()),
            global: table(self, "global", 1),
        }
    }
}

/// A training example: graph, its symmetry group and one target conformer.
pub type Example<'a> = (&'a MolecularGraph, &'a SymmetryGroup, &'a Conformation);

/// Random inputs of one forward pass, drawn up front so that a pass can be
/// replayed exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct Noise {
    /// Initial coordinates, uniform in [−1, 1]³ per atom, before centring.
    pub init: Vec<[f64; 3]>,
    /// Standard normal draws, one row of `dim` per molecule.
    pub eps: Matrix,
    pub dropout_seed: u64,
}

impl Noise {
    pub fn sample(batch: &GraphBatch, dim: usize, rng: &mut impl Rng) -> Self {
        let init = (0..batch.num_atoms()).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..=1.0))).collect();
        let eps = (0..batch.num_molecules * dim).map(|_| StandardNormal.sample(rng)).collect();
        Noise {
            init,
            eps: Matrix::new(batch.num_molecules, dim, eps).expect("sized"),
            dropout_seed: rng.random(),
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct ForwardOptions {
    /// Training mode: batch statistics in batch norm, dropout active.
    pub train: bool,
    pub beta: f64,
    /// Reuse these `[molecule][level]` assignments instead of searching.
    pub frozen: Option<Vec<Vec<Assignment>>>,
    pub compute_grads: bool,
}

/// Batch means of the objective and its parts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct LossComponents {
    pub total: f64,
    /// Alignment loss of the final conformation.
    pub rtp_final: f64,
    /// Unweighted sum of alignment losses of the earlier conformations.
    pub rtp_aux: f64,
    pub kl: f64,
    pub l_angle: f64,
    pub l_bond: f64,
}

pub struct ForwardOutput {
    pub loss: LossComponents,
    /// Per molecule, per-molecule objective values (same weighting as `total`).
    pub per_molecule: Vec<f64>,
    pub assignments: Vec<Vec<Assignment>>,
    /// Coordinates of every level `R̂⁽⁰⁾..R̂⁽ᴸ⁾` over the whole batch.
    pub levels: Vec<Matrix>,
    /// Attention weights of every block, one column vector over directed edges.
    pub attention: Vec<Matrix>,
    pub mu: Matrix,
    pub logvar: Matrix,
    pub grads: Option<Vec<(ParamId, Matrix)>>,
    pub bn_stats: Vec<(usize, usize, BatchStats)>,
    /// Whether any gradient reached the frozen rigid-motion leaves.
    pub motion_gradient_reached: bool,
}

#[derive(Clone, Copy)]
struct State {
    hv: Var,
    he: Var,
    u: Var,
    r: Var,
}

struct Consts {
    inv_atoms_d: Var,
    inv_bonds_d: Var,
    inv_atoms_3: Var,
    ones_row: Var,
}

struct Fwd<'a> {
    tape: Tape,
    store: &'a ParamStore,
    vars: Vec<Option<Var>>,
    train: bool,
    dropout: f64,
    rng: ChaCha8Rng,
    bn_stats: Vec<(usize, usize, BatchStats)>,
    attention: Vec<Var>,
}

impl<'a> Fwd<'a> {
    fn new(store: &'a ParamStore, train: bool, dropout: f64, seed: u64) -> Self {
        Fwd {
            tape: Tape::new(),
            store,
            vars: vec![None; store.len()],
            train,
            dropout,
            rng: ChaCha8Rng::seed_from_u64(seed),
            bn_stats: Vec::new(),
            attention: Vec::new(),
        }
    }

    fn p(&mut self, id: ParamId) -> Var {
        *self.vars[id].get_or_insert_with(|| self.tape.param(id, self.store.get(id).clone()))
    }

    fn consts(&mut self, g: &GraphBatch, d: usize) -> Consts {
        let b = g.num_molecules;
        let mut leaf = |data: Vec<f64>, cols: usize| self.tape.leaf(Matrix::new(b, cols, data).expect("sized"));
        Consts {
            inv_atoms_d: leaf(GraphBatch::inverse_counts(&g.atom_count, d), d),
            inv_bonds_d: leaf(GraphBatch::inverse_counts(&g.bond_count, d), d),
            inv_atoms_3: leaf(GraphBatch::inverse_counts(&g.atom_count, 3), 3),
            ones_row: self.tape.leaf(Matrix::filled(1, d, 1.0)),
        }
    }

    fn linear(&mut self, x: Var, l: &Linear) -> Result<Var, ModelError> {
        let (w, b) = (self.p(l.w), self.p(l.b));
        let xw = self.tape.matmul(x, w)?;
        Ok(self.tape.add_row(xw, b)?)
    }

    fn mlp(&mut self, inputs: &[Var], m: &Mlp) -> Result<Var, ModelError> {
        let x = if inputs.len() == 1 { inputs[0] } else { self.tape.concat_cols(inputs)? };
        let h = self.linear(x, &m.l1)?;
        let (gamma, beta) = (self.p(m.gamma), self.p(m.beta));
        let store = self.store;
        let mode = if self.train {
            BatchNormMode::Train
        } else {
            BatchNormMode::Eval { mean: store.buffer(m.running_mean), var: store.buffer(m.running_var) }
        };
        let (h, stats) = self.tape.batch_norm(h, gamma, beta, mode)?;
        if let Some(s) = stats {
            self.bn_stats.push((m.running_mean, m.running_var, s));
        }
        let h = self.tape.relu(h)?;
        let h = self.tape.dropout(h, self.dropout, self.train, &mut self.rng)?;
        self.linear(h, &m.l2)
    }

    fn segment_mean(&mut self, x: Var, seg: &[usize], n: usize, inv: Var) -> Result<Var, ModelError> {
        let s = self.tape.segment_sum(x, seg, n)?;
        Ok(self.tape.mul(s, inv)?)
    }

    fn embed(&mut self, e: &Embeddings, g: &GraphBatch) -> Result<(Var, Var, Var), ModelError> {
        let el = self.p(e.element);
        let el = self.tape.gather_rows(el, &g.element)?;
        let ch = self.p(e.charge);
        let ch = self.tape.gather_rows(ch, &g.charge)?;
        let dg = self.p(e.degree);
        let dg = self.tape.gather_rows(dg, &g.degree)?;
        let hv = self.tape.add(el, ch)?;
        let hv = self.tape.add(hv, dg)?;
        let bt = self.p(e.bond);
        let he = self.tape.gather_rows(bt, &g.bond_order)?;
        let u0 = self.p(e.global);
        let u = self.tape.gather_rows(u0, &vec![0; g.num_molecules])?;
        Ok((hv, he, u))
    }

    fn block(
        &mut self,
        blk: &Block,
        g: &GraphBatch,
        st: State,
        z_atoms: Option<Var>,
        c: &Consts,
    ) -> Result<State, ModelError> {
        let (n, b) = (g.num_atoms(), g.num_molecules);

        // (1) fold coordinates (and z) into the representations
        let ce = self.mlp(&[st.r], &blk.coord_embed)?;
        let mut hbar_v = self.tape.add(st.hv, ce)?;
        if let Some(z) = z_atoms {
            hbar_v = self.tape.add(hbar_v, z)?;
        }
        let dist = self.tape.row_norm_diff(st.r, &g.bond_pairs)?;
        let de = self.mlp(&[dist], &blk.dist_embed)?;
        let hbar_e = self.tape.add(st.he, de)?;

        // (2) bonds; the update is averaged over both endpoint orders so that
        // an automorphism flipping a bond leaves its representation unchanged
        let ne = g.num_bonds();
        let first: Vec<usize> = g.bond_i.iter().chain(&g.bond_j).copied().collect();
        let second: Vec<usize> = g.bond_j.iter().chain(&g.bond_i).copied().collect();
        let twice: Vec<usize> = (0..ne).chain(0..ne).collect();
        let mol_twice: Vec<usize> = g.bond_mol.iter().chain(&g.bond_mol).copied().collect();
        let hi = self.tape.gather_rows(hbar_v, &first)?;
        let hj = self.tape.gather_rows(hbar_v, &second)?;
        let eb = self.tape.gather_rows(hbar_e, &twice)?;
        let ub = self.tape.gather_rows(st.u, &mol_twice)?;
        let both = self.mlp(&[hi, hj, eb, ub], &blk.bond_update)?;
        let summed = self.tape.segment_sum(both, &twice, ne)?;
        let de = self.tape.scale(summed, 0.5)?;
        let he = self.tape.add(st.he, de)?;

        // (3) atoms: attention over neighbours
        let (wq, wk, wv, a) = (self.p(blk.w_q), self.p(blk.w_k), self.p(blk.w_v), self.p(blk.attn));
        let q = self.tape.matmul(hbar_v, wq)?;
        let q_e = self.tape.gather_rows(q, &g.edge_center)?;
        let hn = self.tape.gather_rows(hbar_v, &g.edge_neighbor)?;
        let hb = self.tape.gather_rows(hbar_e, &g.edge_bond)?;
        let key_in = self.tape.concat_cols(&[hn, hb])?;
        let k_e = self.tape.matmul(key_in, wk)?;
        let pre = self.tape.add(q_e, k_e)?;
        let act = self.tape.leaky_relu(pre, LEAKY_SLOPE)?;
        let score = self.tape.matmul(act, a)?;
        let alpha = self.tape.segment_softmax(score, &g.edge_center)?;
        self.attention.push(alpha);
        let val_in = self.tape.concat_cols(&[hb, hn])?;
        let val = self.tape.matmul(val_in, wv)?;
        let alpha_d = self.tape.matmul(alpha, c.ones_row)?;
        let weighted = self.tape.mul(val, alpha_d)?;
        let htilde = self.tape.segment_sum(weighted, &g.edge_center, n)?;
        let ua = self.tape.gather_rows(st.u, &g.atom_mol)?;
        let dv = self.mlp(&[hbar_v, htilde, ua], &blk.atom_update)?;
        let hv = self.tape.add(st.hv, dv)?;

        // (4) global
        let mean_v = self.segment_mean(hv, &g.atom_mol, b, c.inv_atoms_d)?;
        let mean_e = self.segment_mean(he, &g.bond_mol, b, c.inv_bonds_d)?;
        let du = self.mlp(&[mean_v, mean_e, st.u], &blk.global_update)?;
        let u = self.tape.add(st.u, du)?;

        // (5) coordinates, re-centred per molecule
        let r = match &blk.coord_update {
            None => st.r,
            Some(m) => {
                let rbar = self.mlp(&[hv], m)?;
                let centre = self.segment_mean(rbar, &g.atom_mol, b, c.inv_atoms_3)?;
                let centre = self.tape.gather_rows(centre, &g.atom_mol)?;
                let shift = self.tape.sub(rbar, centre)?;
                self.tape.add(st.r, shift)?
            }
        };
        Ok(State { hv, he, u, r })
    }
}

fn centred_per_molecule(g: &GraphBatch, rows: &[[f64; 3]]) -> Matrix {
    let mut out = Matrix::from_rows(rows);
    for m in 0..g.num_molecules {
        let range = g.atom_range(m);
        let n = range.len() as f64;
        for c in 0..3 {
            let mean = range.clone().map(|i| out.get(i, c)).sum::<f64>() / n;
            for i in range.clone() {
                out.set(i, c, out.get(i, c) - mean);
            }
        }
    }
    out
}

fn rows_of(m: &Matrix, range: std::ops::Range<usize>) -> Vec<[f64; 3]> {
    range.map(|i| [m.get(i, 0), m.get(i, 1), m.get(i, 2)]).collect()
}

/// Parameters and structure of the whole generator.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    enc2d_embed: Embeddings,
    enc2d: Vec<Block>,
    enc3d_embed: Embeddings,
    enc3d: Vec<Block>,
    head_mu: Linear,
    head_logvar: Linear,
    dec: Vec<Block>,
}

impl Model {
    /// Builds a freshly initialised model from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let mut params = ParamStore::new();
        let d = config.dim;
        let mut bld = Builder { store: &mut params, rng: ChaCha8Rng::seed_from_u64(config.seed), hidden: config.mlp_hidden };
        let enc2d_embed = bld.embeddings("enc2d", d);
        let enc2d = (0..config.num_blocks).map(|l| bld.block(&format!("enc2d.block{l}"), d, BlockMode::Encoder2d)).collect();
        let enc3d_embed = bld.embeddings("enc3d", d);
        let enc3d = (0..config.num_blocks).map(|l| bld.block(&format!("enc3d.block{l}"), d, BlockMode::Encoder3d)).collect();
        let head_mu = bld.linear("enc3d.head_mu", d, d);
        let head_logvar = bld.linear("enc3d.head_logvar", d, d);
        let dec = (0..config.num_blocks).map(|l| bld.block(&format!("dec.block{l}"), d, BlockMode::Decoder)).collect();
        Ok(Model { config, params, enc2d_embed, enc2d, enc3d_embed, enc3d, head_mu, head_logvar, dec })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Folds training-mode batch statistics into the running estimates.
    pub fn update_running_stats(&mut self, stats: &[(usize, usize, BatchStats)]) {
        for (mean_id, var_id, s) in stats {
            for (r, b) in self.params.buffer_mut(*mean_id).iter_mut().zip(&s.mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
            for (r, b) in self.params.buffer_mut(*var_id).iter_mut().zip(&s.var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
        }
    }

    fn run_encoder2d(&self, f: &mut Fwd, g: &GraphBatch, init: &[[f64; 3]], c: &Consts) -> Result<State, ModelError> {
        let (hv, he, u) = f.embed(&self.enc2d_embed, g)?;
        let r = f.tape.leaf(centred_per_molecule(g, init));
        let mut st = State { hv, he, u, r };
        for blk in &self.enc2d {
            st = f.block(blk, g, st, None, c)?;
        }
        Ok(st)
    }

    fn run_encoder3d(&self, f: &mut Fwd, g: &GraphBatch, coords: &[[f64; 3]], c: &Consts) -> Result<(Var, Var), ModelError> {
        let (hv, he, u) = f.embed(&self.enc3d_embed, g)?;
        let r = f.tape.leaf(centred_per_molecule(g, coords));
        let mut st = State { hv, he, u, r };
        for blk in &self.enc3d {
            st = f.block(blk, g, st, None, c)?;
        }
        let pooled = f.segment_mean(st.hv, &g.atom_mol, g.num_molecules, c.inv_atoms_d)?;
        Ok((f.linear(pooled, &self.head_mu)?, f.linear(pooled, &self.head_logvar)?))
    }

    fn run_decoder(&self, f: &mut Fwd, g: &GraphBatch, st: State, z: Var, c: &Consts) -> Result<Vec<Var>, ModelError> {
        let z_atoms = f.tape.gather_rows(z, &g.atom_mol)?;
        let mut st = st;
        let mut out = Vec::with_capacity(self.dec.len());
        for blk in &self.dec {
            st = f.block(blk, g, st, Some(z_atoms), c)?;
            out.push(st.r);
        }
        Ok(out)
    }

    /// The full training objective for a batch, averaged over molecules.
    pub fn forward(&self, examples: &[Example<'_>], noise: &Noise, opts: &ForwardOptions) -> Result<ForwardOutput, ModelError> {
        let cfg = &self.config;
        let graphs: Vec<&MolecularGraph> = examples.iter().map(|e| e.0).collect();
        let g = GraphBatch::new(&graphs)?;
        let bsz = g.num_molecules;
        if noise.init.len() != g.num_atoms() || noise.eps.shape() != (bsz, cfg.dim) {
            return Err(ModelError::ShapeMismatch("noise does not match the batch".into()));
        }
        for (m, (graph, sym, target)) in examples.iter().enumerate() {
            if target.num_atoms() != graph.num_atoms() || sym.num_atoms() != graph.num_atoms() {
                return Err(ModelError::ShapeMismatch(format!("example {m}: graph, symmetry and target sizes differ")));
            }
        }
        let mut f = Fwd::new(&self.params, opts.train, cfg.dropout, noise.dropout_seed);
        let c = f.consts(&g, cfg.dim);

        let s2d = self.run_encoder2d(&mut f, &g, &noise.init, &c)?;
        let all_targets: Vec<[f64; 3]> = examples.iter().flat_map(|e| e.2.coords().iter().copied()).collect();
        let (mu, logvar) = self.run_encoder3d(&mut f, &g, &all_targets, &c)?;
        let half = f.tape.scale(logvar, 0.5)?;
        let sigma = f.tape.exp(half)?;
        let eps = f.tape.leaf(noise.eps.clone());
        let noise_term = f.tape.mul(sigma, eps)?;
        let z = f.tape.add(mu, noise_term)?;
        let mut levels = vec![s2d.r];
        levels.extend(self.run_decoder(&mut f, &g, s2d, z, &c)?);
        let num_levels = levels.len();
        let level_values: Vec<Matrix> = levels.iter().map(|&v| f.tape.value(v).clone()).collect();

        let assignments = match &opts.frozen {
            Some(a) => {
                if a.len() != bsz || a.iter().any(|l| l.len() != num_levels) {
                    return Err(ModelError::ShapeMismatch("frozen assignments do not match the batch".into()));
                }
                a.clone()
            }
            None => self.assign(examples, &g, &level_values)?,
        };

        // per-molecule weighted terms
        let mut totals: Vec<Var> = Vec::with_capacity(bsz);
        let mut comps = LossComponents::default();
        let mut motion_leaves = Vec::new();
        let klm = loss::kl_term(&mut f.tape, mu, logvar)?;
        let beta_kl = f.tape.scale(klm, opts.beta)?;
        for (m, (graph, _, target)) in examples.iter().enumerate() {
            let off = g.atom_offset[m];
            let mut acc: Option<Var> = None;
            for (l, &level) in levels.iter().enumerate() {
                let term = loss::rtp_term(&mut f.tape, level, off, target.coords(), &assignments[m][l], cfg.grad_through_rho)?;
                motion_leaves.extend(term.motion_leaves);
                let v = f.tape.value(term.loss).get(0, 0);
                let weighted = if l + 1 == num_levels {
                    comps.rtp_final += v;
                    term.loss
                } else {
                    comps.rtp_aux += v;
                    f.tape.scale(term.loss, cfg.lambda_aux)?
                };
                acc = Some(match acc {
                    Some(a) => f.tape.add(a, weighted)?,
                    None => weighted,
                });
            }
            let mut total = acc.expect("at least one level");
            if cfg.use_aux_losses {
                let last = *levels.last().expect("levels");
                let (angle, bond) = aux_terms(&mut f.tape, last, off, graph, target.coords())?;
                for (term, slot) in [(angle, &mut comps.l_angle), (bond, &mut comps.l_bond)] {
                    if let Some(t) = term {
                        *slot += f.tape.value(t).get(0, 0);
                        let w = f.tape.scale(t, cfg.lambda1)?;
                        total = f.tape.add(total, w)?;
                    }
                }
            }
            totals.push(total);
        }
        let per_molecule_kl: Vec<f64> = {
            let (mu_v, lv_v) = (f.tape.value(mu), f.tape.value(logvar));
            (0..bsz)
                .map(|m| {
                    0.5 * (0..cfg.dim)
                        .map(|k| {
                            let (a, l) = (mu_v.get(m, k), lv_v.get(m, k));
                            a * a + l.exp() - l - 1.0
                        })
                        .sum::<f64>()
                })
                .collect()
        };
        let mut per_molecule: Vec<f64> = totals.iter().map(|&t| f.tape.value(t).get(0, 0)).collect();
        for (p, k) in per_molecule.iter_mut().zip(&per_molecule_kl) {
            *p += opts.beta * k;
        }
        let mut sum = beta_kl;
        for t in totals {
            sum = f.tape.add(sum, t)?;
        }
        let loss = f.tape.scale(sum, 1.0 / bsz as f64)?;
        let inv = 1.0 / bsz as f64;
        comps.total = f.tape.value(loss).get(0, 0);
        comps.rtp_final *= inv;
        comps.rtp_aux *= inv;
        comps.kl = f.tape.value(klm).get(0, 0) * inv;
        comps.l_angle *= inv;
        comps.l_bond *= inv;

        let mu_v = f.tape.value(mu).clone();
        let logvar_v = f.tape.value(logvar).clone();
        let attention = f.attention.iter().map(|&a| f.tape.value(a).clone()).collect();
        let (grads, motion_gradient_reached) = if opts.compute_grads {
            let gr = f.tape.backward(loss)?;
            let reached = motion_leaves.iter().any(|&(r, t)| gr.reached(r) || gr.reached(t));
            (Some(gr.params()), reached)
        } else {
            (None, false)
        };
        Ok(ForwardOutput {
            loss: comps,
            per_molecule,
            assignments,
            levels: level_values,
            attention,
            mu: mu_v,
            logvar: logvar_v,
            grads,
            bn_stats: f.bn_stats,
            motion_gradient_reached,
        })
    }

    /// Best relabeling and rigid motion for every molecule and level, on
    /// detached coordinates.
    fn assign(&self, examples: &[Example<'_>], g: &GraphBatch, levels: &[Matrix]) -> Result<Vec<Vec<Assignment>>, ModelError> {
        examples
            .par_iter()
            .enumerate()
            .map(|(m, (graph, sym, target))| {
                let identity;
                let group: &SymmetryGroup = if self.config.use_symmetry {
                    sym
                } else {
                    identity = SymmetryGroup::identity(graph.num_atoms());
                    &identity
                };
                levels
                    .iter()
                    .map(|lv| {
                        let pred = Conformation::new(rows_of(lv, g.atom_range(m))).map_err(|_| AlignError::NonFinite)?;
                        let best = loss_rtp(target, &pred, group)?;
                        Ok(Assignment {
                            perm: group.perms()[best.perm_index].clone(),
                            rotation: best.alignment.motion.rotation,
                            translation: best.alignment.motion.translation,
                        })
                    })
                    .collect()
            })
            .collect()
    }

    /// Final conformations for a batch of graphs with `z ~ N(0, I)`, in
    /// evaluation mode.
    pub fn sample(&self, graphs: &[&MolecularGraph], rng: &mut impl Rng) -> Result<Vec<Conformation>, ModelError> {
        let g = GraphBatch::new(graphs)?;
        let noise = Noise::sample(&g, self.config.dim, rng);
        let levels = self.generate(&g, &noise.init, &noise.eps)?;
        let last = levels.last().expect("at least one block");
        (0..g.num_molecules)
            .map(|m| Conformation::new(rows_of(last, g.atom_range(m))).map_err(|_| ModelError::Autodiff(AutodiffError::NonFinite { op: "sample" })))
            .collect()
    }

    /// Every level `R̂⁽⁰⁾..R̂⁽ᴸ⁾` for given initial coordinates and latents
    /// (`B × dim`), in evaluation mode.
    pub fn generate(&self, g: &GraphBatch, init: &[[f64; 3]], z: &Matrix) -> Result<Vec<Matrix>, ModelError> {
        if init.len() != g.num_atoms() || z.shape() != (g.num_molecules, self.config.dim) {
            return Err(ModelError::ShapeMismatch("initial coordinates or latents do not match the batch".into()));
        }
        let mut f = Fwd::new(&self.params, false, 0.0, 0);
        let c = f.consts(g, self.config.dim);
        let s2d = self.run_encoder2d(&mut f, g, init, &c)?;
        let zv = f.tape.leaf(z.clone());
        let mut levels = vec![s2d.r];
        levels.extend(self.run_decoder(&mut f, g, s2d, zv, &c)?);
        Ok(levels.iter().map(|&v| f.tape.value(v).clone()).collect())
    }

    /// Output of the 2D encoder for one graph, in evaluation mode.
    pub fn encode_2d(&self, graph: &MolecularGraph, rng: &mut impl Rng) -> Result<ModelState, ModelError> {
        let g = GraphBatch::new(&[graph])?;
        let init: Vec<[f64; 3]> = (0..g.num_atoms()).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..=1.0))).collect();
        let mut f = Fwd::new(&self.params, false, 0.0, 0);
        let c = f.consts(&g, self.config.dim);
        let st = self.run_encoder2d(&mut f, &g, &init, &c)?;
        Ok(ModelState {
            h_v: f.tape.value(st.hv).clone(),
            h_e: f.tape.value(st.he).clone(),
            u: f.tape.value(st.u).clone(),
            r_hat: f.tape.value(st.r).clone(),
        })
    }

    /// Posterior over `z` given a conformation, in evaluation mode.
    pub fn encode_3d(&self, graph: &MolecularGraph, conf: &Conformation) -> Result<GaussianPosterior, ModelError> {
        if conf.num_atoms() != graph.num_atoms() {
            return Err(ModelError::ShapeMismatch("conformation does not match graph".into()));
        }
        let g = GraphBatch::new(&[graph])?;
        let mut f = Fwd::new(&self.params, false, 0.0, 0);
        let c = f.consts(&g, self.config.dim);
        let (mu, lv) = self.run_encoder3d(&mut f, &g, conf.coords(), &c)?;
        Ok(GaussianPosterior::from_logvar(f.tape.value(mu).data().to_vec(), f.tape.value(lv).data()))
    }

    /// Decoder conformations `R̂⁽¹⁾..R̂⁽ᴸ⁾` from a 2D-encoder state and a
    /// latent, in evaluation mode.
    pub fn decode(&self, graph: &MolecularGraph, init: &ModelState, z: &[f64]) -> Result<Vec<Conformation>, ModelError> {
        let d = self.config.dim;
        if z.len() != d
            || init.h_v.shape() != (graph.num_atoms(), d)
            || init.h_e.shape() != (graph.num_bonds(), d)
            || init.u.shape() != (1, d)
            || init.r_hat.shape() != (graph.num_atoms(), 3)
        {
            return Err(ModelError::ShapeMismatch("decoder inputs do not match the graph".into()));
        }
        let g = GraphBatch::new(&[graph])?;
        let mut f = Fwd::new(&self.params, false, 0.0, 0);
        let c = f.consts(&g, d);
        let st = State {
            hv: f.tape.leaf(init.h_v.clone()),
            he: f.tape.leaf(init.h_e.clone()),
            u: f.tape.leaf(init.u.clone()),
            r: f.tape.leaf(init.r_hat.clone()),
        };
        let zv = f.tape.leaf(Matrix::row_vector(z.to_vec()));
        let out = self.run_decoder(&mut f, &g, st, zv, &c)?;
        out.iter()
            .map(|&v| {
                Conformation::new(f.tape.value(v).to_points())
                    .map_err(|_| ModelError::Autodiff(AutodiffError::NonFinite { op: "decode" }))
            })
            .collect()
    }

    pub fn save(&self, path: &Path, meta: serde_json::Value) -> Result<(), ModelError> {
        params::save_to_path(path, &self.config, &self.params, meta)
    }

    pub fn to_bytes(&self, meta: serde_json::Value) -> Result<Vec<u8>, ModelError> {
        let mut out = Vec::new();
        params::write_checkpoint(&mut out, &self.config, &self.params, meta)?;
        Ok(out)
    }

    /// Rebuilds the model described by a checkpoint and loads its tensors.
    pub fn from_reader(input: &mut impl std::io::Read) -> Result<(Self, serde_json::Value), ModelError> {
        let (header, tensors) = params::read_checkpoint(input)?;
        let mut model = Model::new(header.config)?;
        params::load_into(&mut model.params, tensors)?;
        Ok((model, header.meta))
    }

    pub fn load(path: &Path) -> Result<(Self, serde_json::Value), ModelError> {
        let file = std::fs::File::open(path).map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))?;
        Self::from_reader(&mut std::io::BufReader::new(file))
    }
}

/// Angle and bond terms for one molecule whose atoms start at `offset` in
/// `r_hat`; `None` where the molecule has no bonds or no angles.
fn aux_terms(
    tape: &mut Tape,
    r_hat: Var,
    offset: usize,
    graph: &MolecularGraph,
    target: &[[f64; 3]],
) -> Result<(Option<Var>, Option<Var>), ModelError> {
    let bond = if graph.num_bonds() == 0 {
        None
    } else {
        let pairs: Vec<(usize, usize)> = graph.bonds().iter().map(|b| (offset + b.i, offset + b.j)).collect();
        let dist: Vec<f64> = graph
            .bonds()
            .iter()
            .map(|b| (0..3).map(|c| (target[b.i][c] - target[b.j][c]).powi(2)).sum::<f64>().sqrt())
            .collect();
        Some(loss::bond_term(tape, r_hat, &pairs, &dist)?)
    };
    let mut triples = Vec::new();
    let mut cosines = Vec::new();
    for i in 0..graph.num_atoms() {
        let nb = graph.neighbors(i).expect("index in range");
        for &j in nb {
            for &k in nb {
                if j != k {
                    cosines.push(loss::cosine(target, i, j, k)?);
                    triples.push((offset + i, offset + j, offset + k));
                }
            }
        }
    }
    let angle = if triples.is_empty() {
        None
    } else {
        Some(loss::angle_term(tape, r_hat, &triples, &cosines).map_err(|e| match e {
            ModelError::DegenerateAngle { i, j, k } => ModelError::DegenerateAngle { i: i - offset, j: j - offset, k: k - offset },
            e => e,
        })?)
    };
    Ok((angle, bond))
}

/// `(ℓ_angle, ℓ_bond)` between a target conformation and a prediction of the
/// same graph.
pub fn aux_losses(graph: &MolecularGraph, target: &Conformation, pred: &Conformation) -> Result<(f64, f64), ModelError> {
    if target.num_atoms() != graph.num_atoms() || pred.num_atoms() != graph.num_atoms() {
        return Err(ModelError::ShapeMismatch("conformations do not match graph".into()));
    }
    let mut tape = Tape::new();
    let r = tape.leaf(Matrix::from_rows(pred.coords()));
    let (angle, bond) = aux_terms(&mut tape, r, 0, graph, target.coords())?;
    let v = |t: Option<Var>| t.map_or(0.0, |t| tape.value(t).get(0, 0));
    Ok((v(angle), v(bond)))
}
