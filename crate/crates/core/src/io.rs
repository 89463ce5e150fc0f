//! CSV tables, run manifests and the on-disk kernel cache.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::action::BvpOptions;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::kernel::{build_kernels, kernel_hash, model_hash, KernelMatrix, KernelSet};
use crate::model::ModelParams;

/// A CSV table held in memory. Floats use the shortest representation that
/// reads back to the same value.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: AsRef<str>>(header: &[S]) -> Self {
        Self {
            header: header.iter().map(|h| h.as_ref().to_string()).collect(),
            rows: vec![],
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        assert_eq!(row.len(), self.header.len(), "row width");
        self.rows.push(row);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = csv::Writer::from_writer(vec![]);
        w.write_record(&self.header).expect("in-memory write");
        for r in &self.rows {
            w.write_record(r).expect("in-memory write");
        }
        w.into_inner().expect("in-memory flush")
    }
}

/// Formats a float for a table cell: the shortest decimal that parses back
/// to the same value, in exponent form for very large or small magnitudes.
pub fn num(x: f64) -> String {
    format!("{x:?}")
}

/// Joins coordinates into one cell.
pub fn coords(xs: &[f64]) -> String {
    xs.iter().map(|x| num(*x)).collect::<Vec<_>>().join(" ")
}

/// A named output file.
#[derive(Debug, Clone, PartialEq)]
pub struct Artifact {
    pub name: String,
    pub body: Vec<u8>,
}

impl Artifact {
    pub fn csv(name: &str, table: &Table) -> Self {
        Self {
            name: name.to_string(),
            body: table.to_bytes(),
        }
    }

    pub fn json<T: Serialize>(name: &str, value: &T) -> Result<Self> {
        let mut body = serde_json::to_vec_pretty(value)?;
        body.push(b'\n');
        Ok(Self {
            name: name.to_string(),
            body,
        })
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileEntry {
    pub name: String,
    pub sha256: String,
    pub bytes: usize,
}

/// Kernel cache traffic of one run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub hits: usize,
    pub built: usize,
}

/// Sidecar written next to the artifacts of every command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub scenario: String,
    pub scenario_hash: String,
    pub seed: u64,
    pub files: Vec<FileEntry>,
    pub residuals: BTreeMap<String, f64>,
    pub flags: Vec<String>,
    pub cache: CacheStats,
    pub workers: usize,
    /// Seconds since the Unix epoch.
    pub created: u64,
}

/// Writes each artifact into `dir`, creating it if needed, and returns the
/// file entries for the manifest.
pub fn write_artifacts(dir: &Path, artifacts: &[Artifact]) -> Result<Vec<FileEntry>> {
    std::fs::create_dir_all(dir)?;
    let mut out = vec![];
    for a in artifacts {
        write_file(&dir.join(&a.name), &a.body)?;
        out.push(FileEntry {
            name: a.name.clone(),
            sha256: sha256_hex(&a.body),
            bytes: a.body.len(),
        });
    }
    Ok(out)
}

/// Writes through a temporary sibling so readers never see a partial file.
pub fn write_file(path: &Path, body: &[u8]) -> Result<()> {
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, body)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Kernel matrices keyed by content hash, held in memory for the run and
/// optionally persisted under a directory.
#[derive(Debug, Default)]
pub struct KernelCache {
    dir: Option<PathBuf>,
    memory: HashMap<String, KernelMatrix>,
    pub stats: CacheStats,
}

impl KernelCache {
    /// Memory-only cache; every kernel is built once per run.
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn on_disk(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: Some(dir.into()),
            ..Self::default()
        }
    }

    fn file(&self, hash: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("{hash}.json")))
    }

    fn load(&self, hash: &str, grid: &Grid, c: f64) -> Option<KernelMatrix> {
        let bytes = std::fs::read(self.file(hash)?).ok()?;
        let k: KernelMatrix = serde_json::from_slice(&bytes).ok()?;
        let fits = k.spec == grid.spec() && k.c.to_bits() == c.to_bits() && k.values.len() == grid.len() * grid.len();
        fits.then_some(k)
    }

    /// Kernels for every `c` in `cs`, building the missing ones together.
    pub fn kernels(
        &mut self,
        grid: &Grid,
        params: &ModelParams,
        cs: &[f64],
        opts: &BvpOptions,
    ) -> Result<KernelSet> {
        let spec = grid.spec();
        let hashes: Vec<String> = cs.iter().map(|&c| kernel_hash(params, &spec, c, opts)).collect();
        let mut missing: Vec<f64> = vec![];
        for (&c, h) in cs.iter().zip(&hashes) {
            if self.memory.contains_key(h) || missing.iter().any(|m| m.to_bits() == c.to_bits()) {
                continue;
            }
            match self.load(h, grid, c) {
                Some(k) => {
                    self.stats.hits += 1;
                    self.memory.insert(h.clone(), k);
                }
                None => missing.push(c),
            }
        }
        if !missing.is_empty() {
            let built = build_kernels(grid, params, &missing, opts)?;
            for k in built.kernels {
                let h = kernel_hash(params, &spec, k.c, opts);
                if let Some(path) = self.file(&h) {
                    std::fs::create_dir_all(path.parent().expect("cache file has a parent"))?;
                    write_file(&path, &serde_json::to_vec(&k)?)?;
                }
                self.stats.built += 1;
                self.memory.insert(h, k);
            }
        }
        let kernels = hashes
            .iter()
            .map(|h| {
                self.memory
                    .get(h)
                    .cloned()
                    .ok_or_else(|| Error::Validation("kernel missing after build".into()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(KernelSet {
            model_hash: model_hash(params),
            kernels,
        })
    }

    /// One kernel at `c`.
    pub fn kernel(&mut self, grid: &Grid, params: &ModelParams, c: f64, opts: &BvpOptions) -> Result<KernelMatrix> {
        Ok(self.kernels(grid, params, &[c], opts)?.kernels.remove(0))
    }
}

/// Sizes the global worker pool from `MFKAM_WORKERS`, falling back to the
/// number of cores. Returns the pool size in effect.
pub fn configure_workers() -> Result<usize> {
    let requested = match std::env::var("MFKAM_WORKERS") {
        Ok(v) => Some(
            v.trim()
                .parse::<usize>()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| Error::Config(format!("MFKAM_WORKERS must be a positive integer, got {v:?}")))?,
        ),
        Err(_) => None,
    };
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = requested {
        b = b.num_threads(n);
    }
    // a pool installed earlier in the process stays in effect
    let _ = b.build_global();
    Ok(rayon::current_num_threads())
}
