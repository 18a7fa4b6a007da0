//! Dataset files, the symmetry cache written by `prep`, and the checks that
//! tie them together.

use crate::{invalid, runtime, Failure};
use anyhow::anyhow;
use confgen::molio::{parse_json_lines, parse_sdf, to_json_line, DatasetRecord, MolError};
use confgen::symmetry::SymmetryGroup;
use confgen::train::TrainItem;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};

pub const DATASET_FILE: &str = "dataset.jsonl";
pub const CACHE_FILE: &str = "symmetry.jsonl";
pub const CACHE_FORMAT: &str = "confgen-symmetry-cache";
pub const CACHE_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    /// One JSON record per line.
    Json,
    /// Concatenated V2000 molfiles.
    Sdf,
}

impl Format {
    /// Explicit choice, else by extension, else JSON lines.
    pub fn resolve(explicit: Option<Format>, path: &Path) -> Format {
        explicit.unwrap_or_else(|| match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
            Some("sdf" | "mol" | "sd") => Format::Sdf,
            _ => Format::Json,
        })
    }
}

/// A parsed record or its error, tagged with the line it starts on.
pub type Parsed = (usize, Result<DatasetRecord, MolError>);

pub fn read_text(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| invalid(anyhow!("cannot read {}: {e}", path.display())))
}

/// Parses every record of a file, isolating failures per record.
pub fn parse_records(path: &Path, format: Option<Format>) -> Result<Vec<Parsed>, Failure> {
    let text = read_text(path)?;
    Ok(match Format::resolve(format, path) {
        Format::Json => parse_json_lines(&text),
        Format::Sdf => split_sdf(&text),
    })
}

/// Splits an SDF document at `$$$$` so that one bad molfile does not hide the
/// others; each chunk is reported with its 1-based starting line.
fn split_sdf(text: &str) -> Vec<Parsed> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut chunk = String::new();
    for (k, line) in text.lines().enumerate() {
        chunk.push_str(line);
        chunk.push('\n');
        if line.trim_end() == "$$$$" {
            if !chunk.trim().trim_end_matches("$$$$").trim().is_empty() {
                out.push((start + 1, parse_sdf(&chunk).map(|mut v| v.remove(0))));
            }
            chunk.clear();
            start = k + 1;
        }
    }
    if !chunk.trim().is_empty() {
        out.push((start + 1, parse_sdf(&chunk).and_then(|mut v| v.pop().ok_or(MolError::EmptyMolecule))));
    }
    out
}

/// All records of a file, failing on the first bad one.
pub fn read_records(path: &Path, format: Option<Format>) -> Result<Vec<DatasetRecord>, Failure> {
    parse_records(path, format)?
        .into_iter()
        .map(|(line, r)| r.map_err(|e| invalid(anyhow!("{}:{line}: {e}", path.display()))))
        .collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn dataset_text(records: &[DatasetRecord]) -> String {
    records.iter().map(|r| to_json_line(r) + "\n").collect()
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CacheHeader {
    pub format: String,
    pub version: u32,
    pub dataset_sha256: String,
    pub cap: usize,
    pub count: usize,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CacheEntry {
    pub name: Option<String>,
    pub perms: Vec<Vec<usize>>,
}

pub fn cache_text(header: &CacheHeader, entries: &[CacheEntry]) -> String {
    let mut out = serde_json::to_string(header).expect("serializable") + "\n";
    for e in entries {
        out += &(serde_json::to_string(e).expect("serializable") + "\n");
    }
    out
}

/// A prepared dataset directory: records plus their cached symmetry groups,
/// verified against the hash stored by `prep`.
pub fn load_prepared(dir: &Path) -> Result<Vec<TrainItem>, Failure> {
    let data_path = dir.join(DATASET_FILE);
    let cache_path = dir.join(CACHE_FILE);
    if !data_path.is_file() {
        return Err(invalid(anyhow!("{} not found; run `confgen prep` to create a prepared dataset directory", data_path.display())));
    }
    if !cache_path.is_file() {
        return Err(invalid(anyhow!("symmetry cache {} not found; run `confgen prep` first", cache_path.display())));
    }
    let data = std::fs::read(&data_path).map_err(|e| runtime(anyhow!("cannot read {}: {e}", data_path.display())))?;
    let cache = read_text(&cache_path)?;
    let mut lines = cache.lines();
    let header: CacheHeader = lines
        .next()
        .ok_or_else(|| invalid(anyhow!("{} is empty", cache_path.display())))
        .and_then(|l| serde_json::from_str(l).map_err(|e| invalid(anyhow!("{}: bad header: {e}", cache_path.display()))))?;
    if header.format != CACHE_FORMAT || header.version != CACHE_VERSION {
        return Err(invalid(anyhow!("{}: unsupported cache format {} v{}", cache_path.display(), header.format, header.version)));
    }
    let hash = sha256_hex(&data);
    if hash != header.dataset_sha256 {
        return Err(invalid(anyhow!(
            "{} does not match its symmetry cache (hash {hash}, cache expects {}); re-run `confgen prep`",
            data_path.display(),
            header.dataset_sha256
        )));
    }
    let text = String::from_utf8(data).map_err(|e| invalid(anyhow!("{}: {e}", data_path.display())))?;
    let records = parse_json_lines(&text)
        .into_iter()
        .map(|(line, r)| r.map_err(|e| invalid(anyhow!("{}:{line}: {e}", data_path.display()))))
        .collect::<Result<Vec<_>, _>>()?;
    let entries = lines
        .enumerate()
        .map(|(k, l)| serde_json::from_str::<CacheEntry>(l).map_err(|e| invalid(anyhow!("{}:{}: {e}", cache_path.display(), k + 2))))
        .collect::<Result<Vec<_>, _>>()?;
    if entries.len() != records.len() || header.count != records.len() {
        return Err(invalid(anyhow!("cache lists {} molecules but the dataset has {}", entries.len(), records.len())));
    }
    records
        .into_iter()
        .zip(entries)
        .enumerate()
        .map(|(k, (rec, entry))| {
            let sym = SymmetryGroup::from_perms(entry.perms).map_err(|e| invalid(anyhow!("cache entry {}: {e}", k + 1)))?;
            if sym.num_atoms() != rec.graph.num_atoms() || entry.name.as_deref() != rec.name() {
                return Err(invalid(anyhow!("cache entry {} does not describe dataset record {}", k + 1, k + 1)));
            }
            Ok(TrainItem { graph: rec.graph, sym, conformers: rec.conformers })
        })
        .collect()
}

/// Refuses to write over any of the given inputs.
pub fn check_output(out: &Path, inputs: &[&Path]) -> Result<(), Failure> {
    let canon = |p: &Path| -> Option<PathBuf> { p.canonicalize().ok() };
    if let Some(o) = canon(out) {
        for i in inputs {
            if canon(i).is_some_and(|c| c == o) {
                return Err(invalid(anyhow!("output {} would overwrite input {}", out.display(), i.display())));
            }
        }
    }
    Ok(())
}

pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), Failure> {
    std::fs::write(path, contents).map_err(|e| runtime(anyhow!("cannot write {}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    const WATER: &str = "water\n\n\n  3  2  0  0  0  0  0  0  0  0999 V2000\n    0.0000    0.0000    0.0000 O   0  0\n    0.9600    0.0000    0.0000 H   0  0\n   -0.2400    0.9300    0.0000 H   0  0\n  1  2  1  0\n  1  3  1  0\nM  END\n$$$$\n";

    #[test]
    fn format_follows_extension_unless_given() {
        assert_eq!(Format::resolve(None, Path::new("a.SDF")), Format::Sdf);
        assert_eq!(Format::resolve(None, Path::new("a.jsonl")), Format::Json);
        assert_eq!(Format::resolve(Some(Format::Json), Path::new("a.sdf")), Format::Json);
    }

    #[test]
    fn sdf_records_fail_independently() {
        let broken = WATER.replace("  3  2", "  3  9");
        let text = format!("{WATER}{broken}{WATER}");
        let parsed = split_sdf(&text);
        let lines: Vec<usize> = parsed.iter().map(|p| p.0).collect();
        assert_eq!(lines, [1, 12, 23]);
        assert!(parsed[0].1.is_ok() && parsed[1].1.is_err() && parsed[2].1.is_ok());
        // a final record without the terminator still counts
        assert_eq!(split_sdf(WATER.trim_end_matches("$$$$\n")).len(), 1);
    }

    #[test]
    fn sha256_of_empty_input() {
        assert_eq!(sha256_hex(b""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    }
}
