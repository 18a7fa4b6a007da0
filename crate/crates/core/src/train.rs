//! AdamW, learning-rate and KL-weight schedules, and the training loop.

use crate::autodiff::{Matrix, ParamId};
use crate::model::{Example, ForwardOptions, GraphBatch, Model, ModelError, Noise, ParamStore};
use crate::molio::{Conformation, MolecularGraph};
use crate::symmetry::SymmetryGroup;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

/// Learning rate at the first warmup iteration.
pub const LR_START: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("training set is empty")]
    EmptyDataset,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("gradient for parameter {id} has shape {found:?}, expected {expected:?}")]
    GradientShape { id: ParamId, expected: (usize, usize), found: (usize, usize) },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_peak: f64,
    pub warmup_iters: usize,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many iterations even if epochs remain.
    pub max_iters: Option<usize>,
    /// Half period `T` of the cosine schedules in iterations; defaults to the
    /// length of 10 epochs.
    pub cosine_half_period: Option<usize>,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; off when absent.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_peak: 2e-4,
            warmup_iters: 4000,
            weight_decay: 0.01,
            batch_size: 8,
            epochs: 100,
            max_iters: None,
            cosine_half_period: None,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if !(self.lr_peak > 0.0 && self.lr_peak.is_finite()) {
            return bad("lr_peak must be positive");
        }
        if self.warmup_iters == 0 {
            return bad("warmup_iters must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if self.cosine_half_period == Some(0) {
            return bad("cosine_half_period must be at least 1");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return bad("adam betas must lie in [0, 1) and eps must be positive");
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return bad("clip_norm must be positive");
        }
        Ok(())
    }
}

/// Linear warmup from [`LR_START`] to `lr_peak`, then
/// `lr_peak·(1 + cos(π t'/T))/2` with `t' = t − warmup`.
pub fn lr_at(t: usize, cfg: &TrainConfig, half_period: usize) -> f64 {
    lr_at_time(t as f64, cfg, half_period)
}

/// [`lr_at`] extended to real-valued time.
pub fn lr_at_time(t: f64, cfg: &TrainConfig, half_period: usize) -> f64 {
    let w = cfg.warmup_iters as f64;
    if t < w {
        LR_START + (cfg.lr_peak - LR_START) * t / w
    } else {
        cfg.lr_peak * (1.0 + (PI * (t - w) / half_period as f64).cos()) / 2.0
    }
}

/// KL weight: starts at `beta_min`, reaches `beta_max` after one half period
/// and keeps oscillating with period `2T`.
pub fn beta_at(t: usize, beta_min: f64, beta_max: f64, half_period: usize) -> f64 {
    beta_min + (beta_max - beta_min) * (1.0 - (PI * t as f64 / half_period as f64).cos()) / 2.0
}

/// Adam moments with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    step: u64,
}

impl AdamW {
    pub fn new(params: &ParamStore, beta1: f64, beta2: f64, eps: f64, weight_decay: f64) -> Self {
        let zeros = || params.iter().map(|(_, _, p)| Matrix::zeros(p.rows(), p.cols())).collect();
        AdamW { beta1, beta2, eps, weight_decay, m: zeros(), v: zeros(), step: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update. Parameters without an entry in `grads` are treated as
    /// having zero gradient.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[(ParamId, Matrix)], lr: f64) -> Result<(), TrainError> {
        let mut dense: Vec<Option<&Matrix>> = vec![None; params.len()];
        for (id, g) in grads {
            let expected = params.get(*id).shape();
            if g.shape() != expected {
                return Err(TrainError::GradientShape { id: *id, expected, found: g.shape() });
            }
            dense[*id] = Some(g);
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let decay = 1.0 - lr * self.weight_decay;
        for (id, g) in dense.into_iter().enumerate() {
            let p = params.get_mut(id).data_mut();
            let m = self.m[id].data_mut();
            let v = self.v[id].data_mut();
            for k in 0..p.len() {
                let gk = g.map_or(0.0, |g| g.data()[k]);
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let update = (m[k] / bc1) / ((v[k] / bc2).sqrt() + self.eps);
                p[k] = p[k] * decay - lr * update;
            }
        }
        Ok(())
    }
}

/// Scales gradients so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut [(ParamId, Matrix)], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|(_, g)| g.data()).map(|x| x * x).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

/// A molecule ready for training: graph, symmetry group, conformers.
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub graph: MolecularGraph,
    pub sym: SymmetryGroup,
    pub conformers: Vec<Conformation>,
}

pub const CSV_HEADER: &str = "iter,lr,beta,loss_total,loss_rtp_final,loss_rtp_aux,kl,l_angle,l_bond";

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LogRow {
    pub iter: usize,
    pub lr: f64,
    pub beta: f64,
    pub loss_total: f64,
    pub loss_rtp_final: f64,
    pub loss_rtp_aux: f64,
    pub kl: f64,
    pub l_angle: f64,
    pub l_bond: f64,
}

impl LogRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{:e},{:e},{:e},{:e},{:e},{:e},{:e},{:e}",
            self.iter, self.lr, self.beta, self.loss_total, self.loss_rtp_final, self.loss_rtp_aux, self.kl, self.l_angle, self.l_bond
        )
    }
}

pub struct TrainReport {
    pub rows: Vec<LogRow>,
    pub iterations: usize,
    /// Epoch and mean validation loss of the best snapshot, if validation
    /// data was given.
    pub best_validation: Option<(usize, f64)>,
    pub best_params: Option<ParamStore>,
    pub optimizer: AdamW,
}

fn examples<'a>(items: &'a [TrainItem], pairs: &[(usize, usize)]) -> Vec<Example<'a>> {
    pairs.iter().map(|&(m, c)| (&items[m].graph, &items[m].sym, &items[m].conformers[c])).collect()
}

/// Mean objective over every (molecule, conformer) pair in evaluation mode,
/// with noise from a fixed seed.
pub fn evaluate_loss(model: &Model, items: &[TrainItem], beta: f64, batch_size: usize, seed: u64) -> Result<f64, TrainError> {
    let pairs: Vec<(usize, usize)> =
        items.iter().enumerate().flat_map(|(m, it)| (0..it.conformers.len()).map(move |c| (m, c))).collect();
    if pairs.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = 0.0;
    for chunk in pairs.chunks(batch_size.max(1)) {
        let ex = examples(items, chunk);
        let graphs: Vec<&MolecularGraph> = ex.iter().map(|e| e.0).collect();
        let noise = Noise::sample(&GraphBatch::new(&graphs)?, model.config().dim, &mut rng);
        let out = model.forward(&ex, &noise, &ForwardOptions { train: false, beta, frozen: None, compute_grads: false })?;
        sum += out.per_molecule.iter().sum::<f64>();
    }
    Ok(sum / pairs.len() as f64)
}

/// Trains `model` in place. Each epoch visits every (molecule, conformer)
/// pair once in shuffled order; `on_row` sees every log row as it is
/// produced. With validation items, the parameters with the lowest mean
/// validation loss at the end of an epoch are returned in the report.
pub fn train(
    model: &mut Model,
    items: &[TrainItem],
    validation: &[TrainItem],
    cfg: &TrainConfig,
    mut on_row: impl FnMut(&LogRow),
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    let mut pairs: Vec<(usize, usize)> =
        items.iter().enumerate().flat_map(|(m, it)| (0..it.conformers.len()).map(move |c| (m, c))).collect();
    if pairs.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let per_epoch = pairs.len().div_ceil(cfg.batch_size);
    let half_period = cfg.cosine_half_period.unwrap_or(10 * per_epoch);
    let max_iters = cfg.max_iters.unwrap_or(usize::MAX);
    let (beta_min, beta_max) = (model.config().beta_min, model.config().beta_max);
    let mut opt = AdamW::new(model.params(), cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut rows = Vec::new();
    let mut best: Option<(usize, f64, ParamStore)> = None;
    let mut t = 0;
    'epochs: for epoch in 0..cfg.epochs {
        pairs.shuffle(&mut rng);
        for chunk in pairs.chunks(cfg.batch_size) {
            if t >= max_iters {
                break 'epochs;
            }
            let lr = lr_at(t, cfg, half_period);
            let beta = beta_at(t, beta_min, beta_max, half_period);
            let ex = examples(items, chunk);
            let graphs: Vec<&MolecularGraph> = ex.iter().map(|e| e.0).collect();
            let noise = Noise::sample(&GraphBatch::new(&graphs)?, model.config().dim, &mut rng);
            let out = model.forward(&ex, &noise, &ForwardOptions { train: true, beta, frozen: None, compute_grads: true })?;
            let mut grads = out.grads.expect("requested");
            if let Some(c) = cfg.clip_norm {
                clip_global_norm(&mut grads, c);
            }
            opt.step(model.params_mut(), &grads, lr)?;
            model.update_running_stats(&out.bn_stats);
            let l = out.loss;
            let row = LogRow {
                iter: t,
                lr,
                beta,
                loss_total: l.total,
                loss_rtp_final: l.rtp_final,
                loss_rtp_aux: l.rtp_aux,
                kl: l.kl,
                l_angle: l.l_angle,
                l_bond: l.l_bond,
            };
            on_row(&row);
            rows.push(row);
            t += 1;
        }
        if !validation.is_empty() {
            let beta = beta_at(t, beta_min, beta_max, half_period);
            let v = evaluate_loss(model, validation, beta, cfg.batch_size, cfg.seed ^ 0x5eed)?;
            if best.as_ref().is_none_or(|b| v < b.1) {
                best = Some((epoch, v, model.params().clone()));
            }
        }
    }
    let (best_validation, best_params) = match best {
        Some((e, v, p)) => (Some((e, v)), Some(p)),
        None => (None, None),
    };
    Ok(TrainReport { rows, iterations: t, best_validation, best_params, optimizer: opt })
}
