//! Checkpoint container and trajectory CSV.
//!
//! A checkpoint is `S2HCKPT\0`, a little-endian `u64` header length, a JSON
//! header, then the raw little-endian `f64` payload of every tensor listed in
//! the header, in header order.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::graph::{CompactModel, ModelGraph, ModelSpec, Provenance};
use crate::pruner::{OptimizerState, PruneRunConfig, Trainer, TrajectoryRecord};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"S2HCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

pub const TRAJECTORY_HEADER: [&str; 9] = [
    "epoch",
    "soft_top1",
    "hard_top1",
    "flops_hard",
    "flops_soft",
    "js_gap",
    "l2_gap",
    "resource_penalty",
    "lr",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckpointKind {
    /// Mid-run state: weights, mask logits and momentum buffers.
    Train,
    /// Exported compact network; weights only.
    Compact,
}

/// Randomness is derived from `(seed, epoch)`, so this pair is the whole
/// generator state of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub seed: u64,
    pub next_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub kind: CheckpointKind,
    pub model_hash: String,
    pub model: ModelSpec,
    pub epoch: usize,
    pub config: Option<PruneRunConfig>,
    pub rng: Option<RngState>,
    #[serde(default)]
    pub trajectory: Vec<TrajectoryRecord>,
    #[serde(default)]
    pub epoch_losses: Vec<f64>,
    pub provenance: Option<Provenance>,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub tensors: Vec<Tensor>,
}

fn group_names(g: &ModelGraph) -> Vec<String> {
    g.prunable_groups().into_iter().map(|i| g.groups()[i].id.clone()).collect()
}

impl Checkpoint {
    /// Snapshot of a run between epochs.
    pub fn from_trainer(t: &Trainer) -> Self {
        let g = t.graph();
        let names = g.theta_names();
        let groups = group_names(g);
        let mut entries = Vec::new();
        let mut tensors = Vec::new();
        for (n, w) in names.iter().zip(g.theta()) {
            entries.push(TensorEntry {
                name: format!("theta/{n}"),
                shape: w.shape().to_vec(),
            });
            tensors.push(w.clone());
        }
        for (n, u) in groups.iter().zip(g.logits()) {
            entries.push(TensorEntry {
                name: format!("u/{n}"),
                shape: vec![u.len()],
            });
            tensors.push(Tensor::vector(u.to_vec()));
        }
        let opt = t.optimizer();
        for (n, v) in names.iter().zip(&opt.theta_velocity) {
            entries.push(TensorEntry {
                name: format!("momentum/theta/{n}"),
                shape: v.shape().to_vec(),
            });
            tensors.push(v.clone());
        }
        for (n, v) in groups.iter().zip(&opt.mask_velocity) {
            entries.push(TensorEntry {
                name: format!("momentum/u/{n}"),
                shape: vec![v.len()],
            });
            tensors.push(Tensor::vector(v.clone()));
        }
        let cfg = t.config().clone();
        Checkpoint {
            header: CheckpointHeader {
                format_version: CHECKPOINT_VERSION,
                kind: CheckpointKind::Train,
                model_hash: g.spec().hash(),
                model: g.spec().clone(),
                epoch: t.epoch(),
                rng: Some(RngState {
                    seed: cfg.seed,
                    next_epoch: t.epoch(),
                }),
                config: Some(cfg),
                trajectory: t.trajectory().to_vec(),
                epoch_losses: t.epoch_losses().to_vec(),
                provenance: None,
                tensors: entries,
            },
            tensors,
        }
    }

    /// A compact network, optionally with the training history that
    /// produced it.
    pub fn from_compact(m: &CompactModel, cfg: Option<&PruneRunConfig>, epoch: usize, trajectory: &[TrajectoryRecord]) -> Self {
        let g = &m.graph;
        let (entries, tensors) = g
            .theta_names()
            .into_iter()
            .zip(g.theta())
            .map(|(n, w)| {
                (
                    TensorEntry {
                        name: format!("theta/{n}"),
                        shape: w.shape().to_vec(),
                    },
                    w.clone(),
                )
            })
            .unzip();
        Checkpoint {
            header: CheckpointHeader {
                format_version: CHECKPOINT_VERSION,
                kind: CheckpointKind::Compact,
                model_hash: g.spec().hash(),
                model: g.spec().clone(),
                epoch,
                config: cfg.cloned(),
                rng: None,
                trajectory: trajectory.to_vec(),
                epoch_losses: Vec::new(),
                provenance: Some(m.provenance.clone()),
                tensors: entries,
            },
            tensors,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let payload: usize = self.tensors.iter().map(Tensor::len).sum();
        let mut out = Vec::with_capacity(16 + header.len() + 8 * payload);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in &self.tensors {
            for v in t.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parses a container; `path` is only used in error messages.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let truncated = |detail: String| Error::Truncated {
            path: path.to_path_buf(),
            detail,
        };
        if bytes.len() < 8 || &bytes[..8] != CHECKPOINT_MAGIC {
            if bytes.len() < 8 && CHECKPOINT_MAGIC.starts_with(bytes) {
                return Err(truncated(format!("{} bytes, shorter than the magic", bytes.len())));
            }
            return Err(Error::Checkpoint(format!("{} is not a checkpoint (bad magic)", path.display())));
        }
        let len_bytes: [u8; 8] = bytes
            .get(8..16)
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| truncated("missing header length".into()))?;
        let hlen = u64::from_le_bytes(len_bytes);
        let body = &bytes[16..];
        if hlen > body.len() as u64 {
            return Err(truncated(format!("header declares {hlen} bytes, {} remain", body.len())));
        }
        let (hbytes, payload) = body.split_at(hlen as usize);
        let version: VersionProbe = serde_json::from_slice(hbytes)
            .map_err(|e| Error::Checkpoint(format!("{}: unreadable header: {e}", path.display())))?;
        if version.format_version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion {
                found: version.format_version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let header: CheckpointHeader = serde_json::from_slice(hbytes)
            .map_err(|e| Error::Checkpoint(format!("{}: invalid header: {e}", path.display())))?;
        if header.model.hash() != header.model_hash {
            return Err(Error::Checkpoint(format!(
                "{}: header hash {} does not match its own model spec ({})",
                path.display(),
                header.model_hash,
                header.model.hash()
            )));
        }
        let need: usize = header.tensors.iter().map(|e| e.shape.iter().product::<usize>()).sum();
        if payload.len() < need * 8 {
            return Err(truncated(format!("payload has {} bytes, header declares {}", payload.len(), need * 8)));
        }
        if payload.len() > need * 8 {
            return Err(Error::Checkpoint(format!(
                "{}: {} trailing bytes after the declared payload",
                path.display(),
                payload.len() - need * 8
            )));
        }
        let mut tensors = Vec::with_capacity(header.tensors.len());
        let mut chunks = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
        for e in &header.tensors {
            let n = e.shape.iter().product();
            tensors.push(Tensor::new(e.shape.clone(), chunks.by_ref().take(n).collect())?);
        }
        Ok(Checkpoint { header, tensors })
    }

    /// Writes atomically: temp file in the same directory, then rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Checkpoint::from_bytes(&bytes, path)
    }

    /// Refuses a checkpoint written for a different model spec.
    pub fn check_model(&self, spec: &ModelSpec) -> Result<()> {
        let live = spec.hash();
        if live != self.header.model_hash {
            return Err(Error::HashMismatch {
                checkpoint: self.header.model_hash.clone(),
                expected: live,
            });
        }
        Ok(())
    }

    fn take(&self, prefix: &str, names: &[String]) -> Result<Vec<Tensor>> {
        names
            .iter()
            .map(|n| {
                let key = format!("{prefix}{n}");
                self.header
                    .tensors
                    .iter()
                    .position(|e| e.name == key)
                    .map(|i| self.tensors[i].clone())
                    .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{key}`")))
            })
            .collect()
    }

    /// Rebuilds the stored network (mask logits included for train
    /// checkpoints).
    pub fn graph(&self) -> Result<ModelGraph> {
        let skeleton = ModelGraph::new(self.header.model.clone(), 0)?;
        let theta = self.take("theta/", &skeleton.theta_names())?;
        let logits = match self.header.kind {
            CheckpointKind::Train => self
                .take("u/", &group_names(&skeleton))?
                .into_iter()
                .map(Tensor::into_values)
                .collect(),
            CheckpointKind::Compact => skeleton.logits().iter().map(|u| u.to_vec()).collect(),
        };
        ModelGraph::from_parts(self.header.model.clone(), theta, logits)
    }

    pub fn compact(&self) -> Result<CompactModel> {
        if self.header.kind != CheckpointKind::Compact {
            return Err(Error::Checkpoint("expected a compact checkpoint, found a train checkpoint".into()));
        }
        let provenance = self
            .header
            .provenance
            .clone()
            .ok_or_else(|| Error::Checkpoint("compact checkpoint without provenance".into()))?;
        Ok(CompactModel {
            graph: self.graph()?,
            provenance,
        })
    }

    /// Restores the run exactly where the snapshot was taken.
    pub fn into_trainer(self) -> Result<Trainer> {
        let h = &self.header;
        if h.kind != CheckpointKind::Train {
            return Err(Error::Checkpoint("cannot resume from a compact checkpoint".into()));
        }
        let cfg = h
            .config
            .clone()
            .ok_or_else(|| Error::Checkpoint("train checkpoint without config".into()))?;
        match h.rng {
            Some(r) if r.seed == cfg.seed && r.next_epoch == h.epoch => {}
            other => {
                return Err(Error::Checkpoint(format!(
                    "rng state {other:?} inconsistent with seed {} at epoch {}",
                    cfg.seed, h.epoch
                )))
            }
        }
        let graph = self.graph()?;
        let names = graph.theta_names();
        let opt = OptimizerState {
            theta_velocity: self.take("momentum/theta/", &names)?,
            mask_velocity: self
                .take("momentum/u/", &group_names(&graph))?
                .into_iter()
                .map(Tensor::into_values)
                .collect(),
        };
        Trainer::resume(cfg, graph, opt, h.epoch, h.trajectory.clone(), h.epoch_losses.clone())
    }
}

#[derive(Deserialize)]
struct VersionProbe {
    format_version: u32,
}

fn temp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(format!(".tmp{}", std::process::id()));
    path.with_file_name(name)
}

/// Write-temp-then-rename, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = temp_path(path);
    let res = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if res.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(res?)
}

fn sci(v: f64) -> String {
    format!("{v:.16e}")
}

/// Renders records as CSV with 17 significant digits per value.
pub fn trajectory_csv(records: &[TrajectoryRecord]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(TRAJECTORY_HEADER)?;
    for r in records {
        w.write_record([
            r.epoch.to_string(),
            sci(r.soft_top1),
            sci(r.hard_top1),
            sci(r.flops_hard),
            sci(r.flops_soft),
            sci(r.js_gap),
            sci(r.l2_gap),
            sci(r.resource_penalty),
            sci(r.lr),
        ])?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

pub fn log_trajectory(records: &[TrajectoryRecord], path: &Path) -> Result<()> {
    write_atomic(path, &trajectory_csv(records)?)
}

pub fn read_trajectory(path: &Path) -> Result<Vec<TrajectoryRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != TRAJECTORY_HEADER {
        return Err(Error::format(path, format!("unexpected header {header:?}")));
    }
    let mut out = Vec::new();
    for (i, row) in r.records().enumerate() {
        let row = row?;
        let f = |k: usize| -> Result<f64> {
            row[k]
                .parse()
                .map_err(|e| Error::format(path, format!("row {}, column {}: {e}", i + 1, TRAJECTORY_HEADER[k])))
        };
        out.push(TrajectoryRecord {
            epoch: row[0]
                .parse()
                .map_err(|e| Error::format(path, format!("row {}, column epoch: {e}", i + 1)))?,
            soft_top1: f(1)?,
            hard_top1: f(2)?,
            flops_hard: f(3)?,
            flops_soft: f(4)?,
            js_gap: f(5)?,
            l2_gap: f(6)?,
            resource_penalty: f(7)?,
            lr: f(8)?,
        });
    }
    Ok(out)
}
