//! `confgen`: dataset preparation, training, sampling and evaluation of the
//! conformation generator, plus small geometry utilities.
//!
//! Exit codes: 0 success, 1 invalid input or inconsistent artifacts,
//! 2 runtime failure.

mod data;

use anyhow::anyhow;
use clap::{Args, Parser, Subcommand};
use confgen::diagnostics::diagnose;
use confgen::evalmetrics::{sample_and_eval, EvalReport, MoleculeScores, DELTA_SMALL};
use confgen::geomalign::{best_rmsd, RmsdContext};
use confgen::model::{LossVariant, Model, ModelConfig, ModelError};
use confgen::molio::{to_json_line, DatasetRecord, MolecularGraph};
use confgen::symmetry::{enumerate_automorphisms, DEFAULT_CAP};
use confgen::train::{train, TrainConfig, CSV_HEADER};
use data::{check_output, load_prepared, write_file, Format};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

/// Why a command stopped.
#[derive(Debug)]
pub enum Failure {
    /// Bad input, bad configuration or artifacts that do not belong together.
    Validation(anyhow::Error),
    /// Anything that went wrong while doing valid work.
    Runtime(anyhow::Error),
}

pub fn invalid(e: anyhow::Error) -> Failure {
    Failure::Validation(e)
}

pub fn runtime(e: anyhow::Error) -> Failure {
    Failure::Runtime(e)
}

/// Model errors caused by the input (unsupported atoms, shape mismatches,
/// bad configs) are validation failures; the rest are runtime failures.
fn model_failure(e: ModelError) -> Failure {
    match e {
        ModelError::UnknownCategory { .. } | ModelError::InvalidConfig(_) | ModelError::ShapeMismatch(_) | ModelError::Checkpoint(_) => {
            invalid(e.into())
        }
        e => runtime(e.into()),
    }
}

type Outcome = Result<(), Failure>;

#[derive(Parser)]
#[command(name = "confgen", version, about = "Direct molecular conformation generation")]
struct Cli {
    /// Worker threads; falls back to CONFGEN_THREADS, then to all cores.
    #[arg(long, global = true, env = "CONFGEN_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a dataset, enumerate symmetry groups and write a prepared
    /// dataset directory.
    Prep(PrepArgs),
    /// Train a model on a prepared dataset.
    Train(TrainArgs),
    /// Generate conformations with a trained model.
    Sample(SampleArgs),
    /// Score generated conformations against references (COV/MAT).
    Eval(EvalArgs),
    /// Symmetry-aware best RMSD between the first conformers of two files.
    Align(AlignArgs),
    /// Triangle-inequality and squared-distance-rank diagnostics.
    Diagnose(DiagnoseArgs),
    /// Enumerate the automorphism group of every molecule in a file.
    Automorphisms(AutomorphismArgs),
}

#[derive(Args)]
struct PrepArgs {
    /// Dataset as JSON lines or SDF.
    input: PathBuf,
    /// Output directory, created if missing.
    #[arg(long, short)]
    out: PathBuf,
    #[arg(long, value_enum)]
    format: Option<Format>,
    /// Maximum symmetry-group size; larger groups fail the record.
    #[arg(long, default_value_t = DEFAULT_CAP)]
    cap: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// Prepared dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Prepared validation directory; the best epoch is saved as best.ckpt.
    #[arg(long)]
    val: Option<PathBuf>,
    /// Output directory for checkpoints and the CSV log.
    #[arg(long, short)]
    out: PathBuf,
    /// JSON file with optional "model" and "train" sections.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Continue from this checkpoint; its model config must match.
    #[arg(long)]
    init: Option<PathBuf>,
    #[command(flatten)]
    model: ModelOverrides,
    #[command(flatten)]
    train: TrainOverrides,
    /// Seed for both initialisation and training.
    #[arg(long)]
    seed: Option<u64>,
    /// Print a progress line every this many iterations (0: never).
    #[arg(long, default_value_t = 100)]
    log_every: usize,
}

#[derive(Args, Default)]
struct ModelOverrides {
    /// Number of GN blocks (L).
    #[arg(long)]
    blocks: Option<usize>,
    /// Feature width.
    #[arg(long)]
    dim: Option<usize>,
    /// Hidden width of every MLP.
    #[arg(long)]
    mlp_hidden: Option<usize>,
    /// Dropout rate inside the MLPs.
    #[arg(long)]
    dropout: Option<f64>,
    /// Weight of the per-block alignment losses.
    #[arg(long)]
    lambda_aux: Option<f64>,
    /// Lower end of the KL weight schedule.
    #[arg(long)]
    beta_min: Option<f64>,
    /// Upper end of the KL weight schedule.
    #[arg(long)]
    beta_max: Option<f64>,
    /// Weight of the bond and angle losses.
    #[arg(long)]
    lambda1: Option<f64>,
    /// Loss variant: l1 (rigid motions), l2 (+ bond/angle), l3 (+ symmetry).
    #[arg(long, value_parser = parse_variant)]
    variant: Option<LossVariant>,
    /// Differentiate through the optimal rotation instead of freezing it.
    #[arg(long)]
    grad_through_rho: bool,
}

#[derive(Args, Default)]
struct TrainOverrides {
    /// Peak learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Linear warmup length in iterations.
    #[arg(long)]
    warmup: Option<usize>,
    /// AdamW decoupled weight decay.
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Conformations per minibatch.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Passes over every (molecule, conformer) pair.
    #[arg(long)]
    epochs: Option<usize>,
    /// Stop after this many iterations.
    #[arg(long)]
    max_iters: Option<usize>,
    /// Half period of the cosine schedules (default: 10 epochs).
    #[arg(long)]
    half_period: Option<usize>,
    /// Global gradient-norm clip.
    #[arg(long)]
    clip: Option<f64>,
}

fn parse_variant(s: &str) -> Result<LossVariant, String> {
    match s.to_ascii_lowercase().as_str() {
        "l1" => Ok(LossVariant::L1),
        "l2" => Ok(LossVariant::L2),
        "l3" => Ok(LossVariant::L3),
        _ => Err(format!("unknown loss variant {s:?} (expected l1, l2 or l3)")),
    }
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Prepared dataset directory whose graphs are sampled.
    #[arg(long)]
    data: PathBuf,
    /// Conformations per molecule (default: twice its reference count).
    #[arg(long)]
    n: Option<usize>,
    /// Output JSON-lines file, one record per molecule.
    #[arg(long, short)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Model config file; must agree with the checkpoint.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Prepared directory with the reference conformers.
    #[arg(long)]
    data: PathBuf,
    /// Previously generated conformers (as written by `sample`).
    #[arg(long, conflicts_with = "checkpoint", required_unless_present = "checkpoint")]
    generated: Option<PathBuf>,
    /// Sample from this checkpoint instead of reading --generated.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Samples per reference when sampling from a checkpoint.
    #[arg(long, default_value_t = 2)]
    multiplier: usize,
    /// Coverage threshold in Å.
    #[arg(long, default_value_t = DELTA_SMALL)]
    delta: f64,
    /// Also report precision COV/MAT.
    #[arg(long)]
    precision: bool,
    /// Compare heavy atoms only (default).
    #[arg(long, conflicts_with = "all_atom")]
    heavy_only: bool,
    /// Compare all atoms, hydrogens included.
    #[arg(long)]
    all_atom: bool,
    /// Write the report as JSON here.
    #[arg(long, short)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct AlignArgs {
    a: PathBuf,
    b: PathBuf,
    #[arg(long, conflicts_with = "all_atom")]
    heavy_only: bool,
    #[arg(long)]
    all_atom: bool,
    #[arg(long, value_enum)]
    format: Option<Format>,
    #[arg(long, default_value_t = DEFAULT_CAP)]
    cap: usize,
}

#[derive(Args)]
struct DiagnoseArgs {
    input: PathBuf,
    #[arg(long, value_enum)]
    format: Option<Format>,
    /// One JSON object per conformer instead of a table.
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct AutomorphismArgs {
    input: PathBuf,
    #[arg(long, value_enum)]
    format: Option<Format>,
    #[arg(long, default_value_t = DEFAULT_CAP)]
    cap: usize,
    /// Print the permutations, not just the group sizes.
    #[arg(long)]
    perms: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Some(t) = cli.threads {
        if t == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(1);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            eprintln!("error: cannot configure thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    let result = match cli.command {
        Command::Prep(a) => prep(a),
        Command::Train(a) => train_cmd(a),
        Command::Sample(a) => sample(a),
        Command::Eval(a) => eval(a),
        Command::Align(a) => align(a),
        Command::Diagnose(a) => diagnose_cmd(a),
        Command::Automorphisms(a) => automorphisms(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn name_of(g: &MolecularGraph, k: usize) -> String {
    g.name().map_or_else(|| format!("#{}", k + 1), str::to_string)
}

/// Bucket label for a group size: 1, 2, 3–4, 5–8, …
fn size_bucket(n: usize) -> String {
    if n <= 2 {
        return n.to_string();
    }
    let hi = n.next_power_of_two();
    format!("{}-{}", hi / 2 + 1, hi)
}

fn prep(a: PrepArgs) -> Outcome {
    if a.cap == 0 {
        return Err(invalid(anyhow!("--cap must be at least 1")));
    }
    let parsed = data::parse_records(&a.input, a.format)?;
    let results: Vec<_> = parsed
        .into_par_iter()
        .map(|(line, r)| {
            let r = r.map_err(|e| e.to_string()).and_then(|rec| match enumerate_automorphisms(&rec.graph, a.cap) {
                Ok(sym) => Ok((rec, sym)),
                Err(e) => Err(e.to_string()),
            });
            (line, r)
        })
        .collect();
    let mut records = Vec::new();
    let mut entries = Vec::new();
    let mut failures = Vec::new();
    let mut histogram: BTreeMap<usize, (String, usize)> = BTreeMap::new();
    for (line, r) in results {
        match r {
            Ok((rec, sym)) => {
                let slot = histogram.entry(sym.len().next_power_of_two()).or_insert_with(|| (size_bucket(sym.len()), 0));
                slot.1 += 1;
                entries.push(data::CacheEntry { name: rec.name().map(str::to_string), perms: sym.perms().to_vec() });
                records.push(rec);
            }
            Err(e) => failures.push(format!("{}:{line}: {e}", a.input.display())),
        }
    }
    std::fs::create_dir_all(&a.out).map_err(|e| runtime(anyhow!("cannot create {}: {e}", a.out.display())))?;
    let data_path = a.out.join(data::DATASET_FILE);
    let cache_path = a.out.join(data::CACHE_FILE);
    check_output(&data_path, &[&a.input])?;
    check_output(&cache_path, &[&a.input])?;
    let text = data::dataset_text(&records);
    let header = data::CacheHeader {
        format: data::CACHE_FORMAT.into(),
        version: data::CACHE_VERSION,
        dataset_sha256: data::sha256_hex(text.as_bytes()),
        cap: a.cap,
        count: records.len(),
    };
    write_file(&data_path, &text)?;
    write_file(&cache_path, data::cache_text(&header, &entries))?;
    println!("prepared {} molecule(s) into {}", records.len(), a.out.display());
    println!("|S| histogram:");
    for (label, count) in histogram.values() {
        println!("  {label:>9} {count}");
    }
    for f in &failures {
        eprintln!("skipped {f}");
    }
    if failures.is_empty() {
        Ok(())
    } else {
        Err(invalid(anyhow!("{} record(s) failed", failures.len())))
    }
}

#[derive(Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    #[serde(default)]
    model: Option<serde_json::Value>,
    #[serde(default)]
    train: Option<serde_json::Value>,
}

fn read_config_file(path: Option<&Path>) -> Result<(ModelConfig, TrainConfig), Failure> {
    let Some(path) = path else {
        return Ok((ModelConfig::default(), TrainConfig::default()));
    };
    let text = data::read_text(path)?;
    let file: ConfigFile = serde_json::from_str(&text).map_err(|e| invalid(anyhow!("{}: {e}", path.display())))?;
    let model = match file.model {
        Some(v) => serde_json::from_value(v).map_err(|e| invalid(anyhow!("{}: model: {e}", path.display())))?,
        None => ModelConfig::default(),
    };
    let train = match file.train {
        Some(v) => serde_json::from_value(v).map_err(|e| invalid(anyhow!("{}: train: {e}", path.display())))?,
        None => TrainConfig::default(),
    };
    Ok((model, train))
}

fn apply_overrides(m: &mut ModelConfig, t: &mut TrainConfig, mo: &ModelOverrides, to: &TrainOverrides, seed: Option<u64>) {
    fn set<T: Copy>(slot: &mut T, v: Option<T>) {
        if let Some(v) = v {
            *slot = v;
        }
    }
    set(&mut m.num_blocks, mo.blocks);
    set(&mut m.dim, mo.dim);
    set(&mut m.mlp_hidden, mo.mlp_hidden);
    set(&mut m.dropout, mo.dropout);
    set(&mut m.lambda_aux, mo.lambda_aux);
    set(&mut m.beta_min, mo.beta_min);
    set(&mut m.beta_max, mo.beta_max);
    set(&mut m.lambda1, mo.lambda1);
    if let Some(v) = mo.variant {
        *m = m.clone().with_variant(v);
    }
    if mo.grad_through_rho {
        m.grad_through_rho = true;
    }
    set(&mut t.lr_peak, to.lr);
    set(&mut t.warmup_iters, to.warmup);
    set(&mut t.weight_decay, to.weight_decay);
    set(&mut t.batch_size, to.batch_size);
    set(&mut t.epochs, to.epochs);
    if to.max_iters.is_some() {
        t.max_iters = to.max_iters;
    }
    if to.half_period.is_some() {
        t.cosine_half_period = to.half_period;
    }
    if to.clip.is_some() {
        t.clip_norm = to.clip;
    }
    if let Some(s) = seed {
        m.seed = s;
        t.seed = s;
    }
}

fn load_checkpoint(path: &Path) -> Result<(Model, serde_json::Value), Failure> {
    if !path.is_file() {
        return Err(invalid(anyhow!("checkpoint {} not found", path.display())));
    }
    Model::load(path).map_err(|e| invalid(anyhow!("{}: {e}", path.display())))
}

/// A config file given next to a checkpoint must describe the same model.
fn check_config_matches(model: &Model, config: Option<&Path>) -> Outcome {
    if let Some(p) = config {
        let (m, _) = read_config_file(Some(p))?;
        if &m != model.config() {
            return Err(invalid(anyhow!("model config in {} does not match the checkpoint", p.display())));
        }
    }
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Outcome {
    let (mut mcfg, mut tcfg) = read_config_file(a.config.as_deref())?;
    apply_overrides(&mut mcfg, &mut tcfg, &a.model, &a.train, a.seed);
    mcfg.validate().map_err(model_failure)?;
    tcfg.validate().map_err(|e| invalid(e.into()))?;
    let items = load_prepared(&a.data)?;
    let val = match &a.val {
        Some(v) => load_prepared(v)?,
        None => Vec::new(),
    };
    let mut model = match &a.init {
        Some(p) => {
            let (m, _) = load_checkpoint(p)?;
            if (ModelConfig { seed: mcfg.seed, ..m.config().clone() }) != mcfg {
                return Err(invalid(anyhow!("checkpoint {} was trained with a different model config", p.display())));
            }
            m
        }
        None => Model::new(mcfg.clone()).map_err(model_failure)?,
    };
    std::fs::create_dir_all(&a.out).map_err(|e| runtime(anyhow!("cannot create {}: {e}", a.out.display())))?;
    let log_path = a.out.join("log.csv");
    let mut log = std::io::BufWriter::new(
        std::fs::File::create(&log_path).map_err(|e| runtime(anyhow!("cannot create {}: {e}", log_path.display())))?,
    );
    let _ = writeln!(log, "{CSV_HEADER}");
    let mut write_error = None;
    let report = train(&mut model, &items, &val, &tcfg, |row| {
        if let Err(e) = writeln!(log, "{}", row.to_csv()) {
            write_error.get_or_insert(e);
        }
        if a.log_every > 0 && row.iter % a.log_every == 0 {
            eprintln!(
                "iter {:>6}  lr {:.2e}  loss {:.4}  rtp {:.4}  kl {:.4}",
                row.iter, row.lr, row.loss_total, row.loss_rtp_final, row.kl
            );
        }
    })
    .map_err(|e| match e {
        confgen::train::TrainError::Model(m) => model_failure(m),
        e @ (confgen::train::TrainError::EmptyDataset | confgen::train::TrainError::InvalidConfig(_)) => invalid(e.into()),
        e => runtime(e.into()),
    })?;
    if let Some(e) = write_error {
        return Err(runtime(anyhow!("cannot write {}: {e}", log_path.display())));
    }
    log.flush().map_err(|e| runtime(anyhow!("cannot write {}: {e}", log_path.display())))?;
    let meta = serde_json::json!({ "iterations": report.iterations, "train": tcfg });
    let last = a.out.join("last.ckpt");
    model.save(&last, meta.clone()).map_err(|e| runtime(e.into()))?;
    println!("trained {} iterations; wrote {} and {}", report.iterations, last.display(), log_path.display());
    if let (Some((epoch, v)), Some(params)) = (report.best_validation, report.best_params) {
        *model.params_mut() = params;
        let best = a.out.join("best.ckpt");
        let meta = serde_json::json!({ "iterations": report.iterations, "best_epoch": epoch, "validation_loss": v, "train": tcfg });
        model.save(&best, meta).map_err(|e| runtime(e.into()))?;
        println!("best validation loss {v:.4} after epoch {}; wrote {}", epoch + 1, best.display());
    }
    Ok(())
}

fn sample(a: SampleArgs) -> Outcome {
    let (model, _) = load_checkpoint(&a.checkpoint)?;
    check_config_matches(&model, a.config.as_deref())?;
    if a.n == Some(0) {
        return Err(invalid(anyhow!("--n must be at least 1")));
    }
    let items = load_prepared(&a.data)?;
    check_output(&a.out, &[&a.checkpoint, &a.data.join(data::DATASET_FILE)])?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut out = String::new();
    let mut total = 0;
    for it in &items {
        let n = a.n.unwrap_or(2 * it.conformers.len());
        let confs = model.sample(&vec![&it.graph; n], &mut rng).map_err(model_failure)?;
        total += confs.len();
        let rec = DatasetRecord::new(it.graph.clone(), confs).map_err(|e| runtime(e.into()))?;
        out += &(to_json_line(&rec) + "\n");
    }
    write_file(&a.out, out)?;
    println!("wrote {total} conformation(s) for {} molecule(s) to {}", items.len(), a.out.display());
    Ok(())
}

fn same_graph(a: &MolecularGraph, b: &MolecularGraph) -> bool {
    a.atoms() == b.atoms() && a.bonds() == b.bonds()
}

fn eval(a: EvalArgs) -> Outcome {
    if !(a.delta > 0.0) {
        return Err(invalid(anyhow!("--delta must be positive")));
    }
    let heavy_only = !a.all_atom;
    let items = load_prepared(&a.data)?;
    let report = if let Some(ckpt) = &a.checkpoint {
        if a.multiplier == 0 {
            return Err(invalid(anyhow!("--multiplier must be at least 1")));
        }
        let (model, _) = load_checkpoint(ckpt)?;
        let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
        sample_and_eval(&model, &items, a.delta, a.multiplier, heavy_only, &mut rng)
            .map_err(|e| match e {
                confgen::evalmetrics::EvalError::Model(m) => model_failure(m),
                e => invalid(e.into()),
            })?
            .0
    } else {
        let path = a.generated.as_ref().expect("clap enforces one source");
        let generated = data::read_records(path, Some(Format::Json))?;
        if generated.len() != items.len() {
            return Err(invalid(anyhow!("{} has {} molecules, the references {}", path.display(), generated.len(), items.len())));
        }
        let scores = items
            .par_iter()
            .zip(&generated)
            .enumerate()
            .map(|(k, (it, gen))| {
                if !same_graph(&it.graph, &gen.graph) {
                    return Err(invalid(anyhow!("molecule {} differs between references and {}", k + 1, path.display())));
                }
                let ctx = RmsdContext::new(&it.graph, &it.sym, heavy_only).map_err(|e| invalid(e.into()))?;
                MoleculeScores::compute(it.graph.name().map(str::to_string), &ctx, &it.conformers, &gen.conformers, a.delta)
                    .map_err(|e| invalid(e.into()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        EvalReport::new(a.delta, scores)
    };
    print!("{}", report.to_table(a.precision));
    if let Some(out) = &a.out {
        let mut inputs: Vec<&Path> = vec![];
        if let Some(g) = &a.generated {
            inputs.push(g);
        }
        check_output(out, &inputs)?;
        write_file(out, serde_json::to_string_pretty(&report).expect("serializable") + "\n")?;
    }
    Ok(())
}

fn first_record(path: &Path, format: Option<Format>) -> Result<DatasetRecord, Failure> {
    data::read_records(path, format)?.into_iter().next().ok_or_else(|| invalid(anyhow!("{} contains no molecule", path.display())))
}

fn align(a: AlignArgs) -> Outcome {
    let ra = first_record(&a.a, a.format)?;
    let rb = first_record(&a.b, a.format)?;
    if !same_graph(&ra.graph, &rb.graph) {
        return Err(invalid(anyhow!("{} and {} describe different molecules", a.a.display(), a.b.display())));
    }
    let sym = enumerate_automorphisms(&ra.graph, a.cap).map_err(|e| invalid(e.into()))?;
    let rmsd = best_rmsd(&ra.conformers[0], &rb.conformers[0], &sym, !a.all_atom, &ra.graph).map_err(|e| invalid(e.into()))?;
    println!("{rmsd:.6}");
    Ok(())
}

fn diagnose_cmd(a: DiagnoseArgs) -> Outcome {
    let records = data::read_records(&a.input, a.format)?;
    let mut out = std::io::stdout().lock();
    if !a.json {
        let _ = writeln!(out, "{:<20} {:>9} {:>18} {:>5}", "molecule", "conformer", "triangle_violation", "rank");
    }
    for (k, rec) in records.iter().enumerate() {
        for (c, conf) in rec.conformers.iter().enumerate() {
            let d = diagnose(conf).map_err(|e| runtime(e.into()))?;
            let name = name_of(&rec.graph, k);
            let _ = if a.json {
                writeln!(
                    out,
                    "{}",
                    serde_json::json!({
                        "molecule": name,
                        "conformer": c,
                        "triangle_violation_rate": d.triangle_violation_rate,
                        "squared_distance_rank": d.squared_distance_rank,
                    })
                )
            } else {
                writeln!(out, "{name:<20} {c:>9} {:>18.6} {:>5}", d.triangle_violation_rate, d.squared_distance_rank)
            };
        }
    }
    Ok(())
}

fn automorphisms(a: AutomorphismArgs) -> Outcome {
    if a.cap == 0 {
        return Err(invalid(anyhow!("--cap must be at least 1")));
    }
    let parsed = data::parse_records(&a.input, a.format)?;
    let mut failed = 0;
    let mut out = std::io::stdout().lock();
    for (k, (line, r)) in parsed.into_iter().enumerate() {
        let result = r.map_err(|e| e.to_string()).and_then(|rec| {
            enumerate_automorphisms(&rec.graph, a.cap).map(|s| (name_of(&rec.graph, k), s)).map_err(|e| e.to_string())
        });
        match result {
            Ok((name, sym)) => {
                let line = if a.perms {
                    serde_json::json!({ "name": name, "size": sym.len(), "perms": sym.perms() })
                } else {
                    serde_json::json!({ "name": name, "size": sym.len() })
                };
                let _ = writeln!(out, "{line}");
            }
            Err(e) => {
                failed += 1;
                eprintln!("{}:{line}: {e}", a.input.display());
            }
        }
    }
    if failed > 0 {
        return Err(invalid(anyhow!("{failed} record(s) failed")));
    }
    Ok(())
}
