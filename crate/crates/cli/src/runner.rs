//! `run`, `sweep` and `verify`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use dekrr_core::dataset::{load_table, normalize};
use dekrr_core::experiment::{run_seed, FeatureBudget};
use dekrr_core::{BaselineKind, Dataset, ExperimentConfig, MethodResult};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::config_hash;

/// First line of every CSV the runner writes.
pub const HASH_PREFIX: &str = "# config_hash: ";

#[derive(Debug)]
pub enum RunError {
    Output(String),
    Io { path: PathBuf, message: String },
    Core(String),
    Seed { dbar: usize, seed: u64, message: String },
    Verify(Vec<String>),
}

impl std::fmt::Display for RunError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RunError::Output(m) | RunError::Core(m) => f.write_str(m),
            RunError::Io { path, message } => write!(f, "{}: {message}", path.display()),
            RunError::Seed { dbar, seed, message } => write!(f, "Dbar {dbar}, seed {seed}: {message}"),
            RunError::Verify(problems) => write!(f, "{} verification problem(s): {}", problems.len(), problems.join("; ")),
        }
    }
}

impl std::error::Error for RunError {}

fn io(path: &Path) -> impl Fn(std::io::Error) -> RunError + '_ {
    move |e| RunError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FileEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub command: String,
    pub config: ExperimentConfig,
    pub dataset_sha256: String,
    pub dbars: Vec<usize>,
    pub files: Vec<FileEntry>,
}

/// Refuses to write into a non-empty directory unless `force` is set.
pub fn prepare_output(dir: &Path, force: bool) -> Result<(), RunError> {
    if dir.exists() {
        let occupied = fs::read_dir(dir).map_err(io(dir))?.next().is_some();
        if occupied && !force {
            return Err(RunError::Output(format!(
                "output directory {} is not empty; pass --force to overwrite",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(dir.join("rounds")).map_err(io(dir))
}

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<(Dataset, String), RunError> {
    let bytes = fs::read(&cfg.dataset).map_err(io(&cfg.dataset))?;
    let raw = load_table(&cfg.dataset, &cfg.format).map_err(|e| RunError::Core(e.to_string()))?;
    Ok((normalize(&raw), hex::encode(Sha256::digest(&bytes))))
}

/// Runs every `(D̄, seed)` pair, seeds in parallel, and returns results
/// ordered by `(D̄, method, seed)`.
pub fn execute(ds: &Dataset, cfg: &ExperimentConfig, dbars: &[usize]) -> Result<Vec<MethodResult>, RunError> {
    let topology = cfg.topology.build(cfg.nodes).map_err(|e| RunError::Core(e.to_string()))?;
    let jobs: Vec<(usize, u64)> = dbars.iter().flat_map(|&d| cfg.seeds.iter().map(move |&s| (d, s))).collect();
    let outcomes: Vec<Result<Vec<MethodResult>, RunError>> = jobs
        .par_iter()
        .map(|&(dbar, seed)| {
            let mut local = cfg.clone();
            if !matches!(local.features, FeatureBudget::Explicit(_)) {
                local.features = FeatureBudget::Mean(dbar);
            }
            run_seed(ds, &topology, &local, seed).map_err(|e| RunError::Seed {
                dbar,
                seed,
                message: e.to_string(),
            })
        })
        .collect();
    let mut rows = Vec::new();
    for o in outcomes {
        rows.extend(o?);
    }
    rows.sort_by_key(|r| (r.dbar, method_rank(cfg, r.method), r.seed));
    Ok(rows)
}

fn method_rank(cfg: &ExperimentConfig, m: BaselineKind) -> usize {
    cfg.methods.iter().position(|&k| k == m).unwrap_or(usize::MAX)
}

struct Writer {
    dir: PathBuf,
    hash: String,
    files: Vec<FileEntry>,
}

impl Writer {
    fn csv(&mut self, rel: &str, body: &str) -> Result<(), RunError> {
        let text = format!("{HASH_PREFIX}{}\n{body}", self.hash);
        let path = self.dir.join(rel);
        fs::write(&path, &text).map_err(io(&path))?;
        self.files.push(FileEntry {
            path: rel.to_string(),
            sha256: hex::encode(Sha256::digest(text.as_bytes())),
        });
        Ok(())
    }
}

pub fn results_csv(rows: &[MethodResult]) -> String {
    let mut s = String::from("dataset,method,Dbar,seed,rse,comm_scalars,rounds\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{:.10},{},{}", r.dataset, r.method, r.dbar, r.seed, r.rse, r.comm_scalars, r.rounds);
    }
    s
}

pub fn round_csv(r: &MethodResult) -> String {
    let mut s = String::from("round,objective,max_dtheta,disagreement,cum_scalars\n");
    for l in &r.log {
        let dis = l.disagreement.map(|v| format!("{v:.12e}")).unwrap_or_default();
        let _ = writeln!(s, "{},{:.12e},{:.12e},{},{}", l.round, l.objective, l.max_dtheta, dis, l.cum_scalars);
    }
    s
}

/// One row per `(D̄, method)`: mean and sample standard deviation of the RSE
/// over seeds (0 for a single seed) and the per-round cost.
pub fn sweep_csv(rows: &[MethodResult]) -> String {
    let mut s = String::from("Dbar,method,mean_rse,std_rse,comm_per_round\n");
    let mut i = 0;
    while i < rows.len() {
        let key = (rows[i].dbar, rows[i].method);
        let group: Vec<&MethodResult> = rows[i..].iter().take_while(|r| (r.dbar, r.method) == key).collect();
        let n = group.len() as f64;
        let mean = group.iter().map(|r| r.rse).sum::<f64>() / n;
        let std = if group.len() > 1 {
            (group.iter().map(|r| (r.rse - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        let _ = writeln!(s, "{},{},{:.10},{:.10},{}", key.0, key.1, mean, std, group[0].comm_per_round);
        i += group.len();
    }
    s
}

/// Writes results, round logs, the optional sweep table and the manifest.
pub fn write_outputs(
    dir: &Path,
    command: &str,
    cfg: &ExperimentConfig,
    dataset_sha256: String,
    dbars: Vec<usize>,
    rows: &[MethodResult],
    sweep: bool,
) -> Result<Manifest, RunError> {
    let mut w = Writer {
        dir: dir.to_path_buf(),
        hash: config_hash(cfg, &dbars),
        files: Vec::new(),
    };
    w.csv("results.csv", &results_csv(rows))?;
    for r in rows {
        w.csv(&format!("rounds/{}_dbar{}_seed{}.csv", r.method, r.dbar, r.seed), &round_csv(r))?;
    }
    if sweep {
        w.csv("sweep.csv", &sweep_csv(rows))?;
    }
    let manifest = Manifest {
        config_hash: w.hash.clone(),
        command: command.into(),
        config: cfg.clone(),
        dataset_sha256,
        dbars,
        files: w.files,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| RunError::Core(e.to_string()))?;
    fs::write(&path, text + "\n").map_err(io(&path))?;
    Ok(manifest)
}

/// Recomputes the config hash from the manifest and checks every listed
/// file's hash line and digest.
pub fn verify(dir: &Path) -> Result<Manifest, RunError> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(io(&path))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| RunError::Core(format!("manifest: {e}")))?;
    let mut problems = Vec::new();
    let recomputed = config_hash(&manifest.config, &manifest.dbars);
    if recomputed != manifest.config_hash {
        problems.push(format!("manifest hash {} does not match its config ({recomputed})", manifest.config_hash));
    }
    for f in &manifest.files {
        let p = dir.join(&f.path);
        match fs::read(&p) {
            Err(e) => problems.push(format!("{}: {e}", f.path)),
            Ok(bytes) => {
                let first = bytes.split(|&b| b == b'\n').next().unwrap_or_default();
                let expected = format!("{HASH_PREFIX}{recomputed}");
                if first != expected.as_bytes() {
                    problems.push(format!("{}: hash line does not match", f.path));
                }
                if hex::encode(Sha256::digest(&bytes)) != f.sha256 {
                    problems.push(format!("{}: contents changed", f.path));
                }
            }
        }
    }
    if problems.is_empty() {
        Ok(manifest)
    } else {
        Err(RunError::Verify(problems))
    }
}
