//! Dataset, report and log files.
//!
//! Datasets are stored as episode specs, not observations: `graphs.json`
//! holds the worlds and each split is a JSON-lines file whose first line is
//! a [`Meta`] header. Expert trajectories are replayed on load.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use waypoint_core::env::{expert_trajectory, Dataset, EpisodeSpec, NavGraph, Split};

use crate::config::{hex, ExperimentConfig, CODE_VERSION};
use crate::error::{Error, Result};

/// Provenance stamped into every artifact.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Meta {
    pub kind: String,
    pub config_hash: String,
    pub data_hash: String,
    pub seed: u64,
    pub version: String,
}

impl Meta {
    pub fn new(kind: &str, cfg: &ExperimentConfig) -> Self {
        Self {
            kind: kind.into(),
            config_hash: hex(cfg.hash()),
            data_hash: hex(cfg.data_hash()),
            seed: cfg.seed,
            version: CODE_VERSION.into(),
        }
    }
}

/// Refuse to start a stage whose outputs already exist, unless forced.
pub fn claim_outputs(paths: &[PathBuf], force: bool) -> Result<()> {
    if !force {
        if let Some(p) = paths.iter().find(|p| p.exists()) {
            return Err(Error::WouldOverwrite(p.clone()));
        }
    }
    Ok(())
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    // Write-then-rename so an interrupted run never leaves a torn file.
    let tmp = path.with_extension("partial");
    fs::write(&tmp, bytes).map_err(Error::io(&tmp))?;
    fs::rename(&tmp, path).map_err(Error::io(path))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).expect("value serializes");
    s.push('\n');
    write_bytes(path, s.as_bytes())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    serde_json::from_str(&text).map_err(|e| Error::MissingInput { path: path.into(), reason: format!("malformed: {}", e) })
}

/// A header line followed by one record per line.
pub fn write_jsonl<T: Serialize>(path: &Path, meta: &Meta, items: &[T]) -> Result<()> {
    let mut s = serde_json::to_string(meta).expect("meta serializes");
    s.push('\n');
    for it in items {
        s.push_str(&serde_json::to_string(it).expect("record serializes"));
        s.push('\n');
    }
    write_bytes(path, s.as_bytes())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<(Meta, Vec<T>)> {
    let f = File::open(path).map_err(Error::io(path))?;
    let malformed = |line: usize, e: &dyn std::fmt::Display| Error::MissingInput {
        path: path.into(),
        reason: format!("malformed line {}: {}", line + 1, e),
    };
    let mut lines = BufReader::new(f).lines();
    let head = lines.next().ok_or_else(|| malformed(0, &"empty file"))?.map_err(Error::io(path))?;
    let meta: Meta = serde_json::from_str(&head).map_err(|e| malformed(0, &e))?;
    let mut out = Vec::new();
    for (i, l) in lines.enumerate() {
        let l = l.map_err(Error::io(path))?;
        if l.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&l).map_err(|e| malformed(i + 1, &e))?);
    }
    Ok((meta, out))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GraphFile {
    meta: Meta,
    graphs: Vec<NavGraph>,
}

pub fn graphs_path(dir: &Path) -> PathBuf {
    dir.join("graphs.json")
}

pub fn split_path(dir: &Path, s: Split) -> PathBuf {
    dir.join(format!("{}.jsonl", s.name()))
}

pub fn dataset_files(dir: &Path) -> Vec<PathBuf> {
    let mut v = vec![graphs_path(dir)];
    v.extend(Split::ALL.iter().map(|s| split_path(dir, *s)));
    v
}

pub fn save_dataset(dir: &Path, ds: &Dataset, cfg: &ExperimentConfig) -> Result<()> {
    write_json(&graphs_path(dir), &GraphFile { meta: Meta::new("graphs", cfg), graphs: ds.graphs.clone() })?;
    for s in Split::ALL {
        let eps: Vec<&EpisodeSpec> = ds.split(s).iter().map(|t| &t.episode).collect();
        write_jsonl(&split_path(dir, s), &Meta::new(s.name(), cfg), &eps)?;
    }
    Ok(())
}

/// Load a dataset and replay its expert trajectories. The files must have
/// been generated with the same world, env and dataset settings as `cfg`.
pub fn load_dataset(dir: &Path, cfg: &ExperimentConfig) -> Result<Dataset> {
    let want = hex(cfg.data_hash());
    let check = |meta: &Meta, path: &Path| {
        if meta.data_hash != want {
            Err(Error::Config(format!(
                "{} was generated from a different env/dataset config (data hash {} != {})",
                path.display(),
                meta.data_hash,
                want
            )))
        } else {
            Ok(())
        }
    };
    let gp = graphs_path(dir);
    let gf: GraphFile = read_json(&gp)?;
    check(&gf.meta, &gp)?;
    let mut ds = Dataset { graphs: gf.graphs, train: Vec::new(), val_seen: Vec::new(), val_unseen: Vec::new() };
    for s in Split::ALL {
        let p = split_path(dir, s);
        let (meta, eps): (Meta, Vec<EpisodeSpec>) = read_jsonl(&p)?;
        check(&meta, &p)?;
        let trajs = eps
            .iter()
            .map(|e| expert_trajectory(ds.graph(e.graph_id)?, &cfg.env, e))
            .collect::<waypoint_core::Result<Vec<_>>>()?;
        match s {
            Split::Train => ds.train = trajs,
            Split::ValSeen => ds.val_seen = trajs,
            Split::ValUnseen => ds.val_unseen = trajs,
        }
    }
    Ok(ds)
}

/// Line-oriented `key=value` log to stdout and, optionally, a file.
pub struct Logger {
    file: Option<File>,
    start: Instant,
    quiet: bool,
}

impl Logger {
    pub fn new(path: Option<&Path>, quiet: bool) -> Result<Self> {
        let file = match path {
            Some(p) => {
                if let Some(dir) = p.parent() {
                    fs::create_dir_all(dir).map_err(Error::io(dir))?;
                }
                Some(OpenOptions::new().create(true).append(true).open(p).map_err(Error::io(p))?)
            }
            None => None,
        };
        Ok(Self { file, start: Instant::now(), quiet })
    }

    pub fn stdout() -> Self {
        Self { file: None, start: Instant::now(), quiet: false }
    }

    pub fn silent() -> Self {
        Self { file: None, start: Instant::now(), quiet: true }
    }

    pub fn log(&mut self, event: &str, fields: &[(&str, String)]) {
        let mut line = format!("elapsed={:.1} event={}", self.start.elapsed().as_secs_f64(), event);
        for (k, v) in fields {
            line.push(' ');
            line.push_str(k);
            line.push('=');
            if v.contains(char::is_whitespace) {
                line.push_str(&format!("{:?}", v));
            } else {
                line.push_str(v);
            }
        }
        if !self.quiet {
            println!("{}", line);
        }
        if let Some(f) = &mut self.file {
            // Logging must never abort a training run.
            let _ = writeln!(f, "{}", line);
        }
    }
}
