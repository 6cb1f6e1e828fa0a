//! The four subcommands. Each returns a JSON summary that `main` prints.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

use s2h_core::metrics::top1_accuracy;
use s2h_core::persist::{log_trajectory, write_atomic, Checkpoint, CheckpointKind};
use s2h_core::pruner::{check_feasible, evaluate, predict, train_supervised, RunMode, Trainer};
use s2h_core::{CompactModel, Error, ForwardMode, ModelGraph};

use crate::config::RunConfigFile;
use crate::error::CliError;

pub const TRAJECTORY_FILE: &str = "trajectory.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const REPORT_FILE: &str = "report.json";
pub const COMPACT_CHECKPOINT: &str = "compact.ckpt";
pub const EVAL_FILE: &str = "eval.json";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const RANDOM_MASKS_FILE: &str = "random_masks.json";
pub const RANDOM_REPORT_FILE: &str = "random_baseline.json";
pub const RANDOM_CHECKPOINT: &str = "random_compact.ckpt";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    Prune,
    Eval,
    Export,
    RandomBaseline,
}

/// Path of the periodic checkpoint written after `epoch`.
pub fn epoch_checkpoint(out: &Path, epoch: usize) -> PathBuf {
    out.join(CHECKPOINT_DIR).join(format!("epoch_{epoch:04}.ckpt"))
}

fn mkdir(p: &Path) -> Result<(), CliError> {
    fs::create_dir_all(p).map_err(|e| CliError::Io {
        path: p.to_path_buf(),
        source: e,
    })
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<(), CliError> {
    let mut bytes = serde_json::to_vec_pretty(v).map_err(Error::from)?;
    bytes.push(b'\n');
    Ok(write_atomic(path, &bytes)?)
}

/// Loads a checkpoint, reporting a missing or unreadable file as a
/// checkpoint error.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    Checkpoint::load(path).map_err(|e| match e {
        Error::Io(io) => Error::Checkpoint(format!("cannot read {}: {io}", path.display())).into(),
        other => other.into(),
    })
}

pub fn dispatch(cmd: Command, cfg: &RunConfigFile, resume: Option<&Path>) -> Result<Value, CliError> {
    match cmd {
        Command::Prune => prune(cfg, resume),
        Command::Eval => eval(cfg, resume),
        Command::Export => export(cfg, resume),
        Command::RandomBaseline => {
            if resume.is_some() {
                return Err(CliError::Usage("random-baseline does not take --resume".into()));
            }
            random_baseline(cfg)
        }
    }
}

fn start_trainer(cfg: &RunConfigFile, resume: Option<&Path>) -> Result<Trainer, CliError> {
    if let Some(p) = resume {
        let ck = load_checkpoint(p)?;
        ck.check_model(&cfg.model)?;
        if ck.header.config.as_ref() != Some(&cfg.prune) {
            return Err(CliError::Config {
                path: "$.prune".into(),
                message: format!("differs from the run configuration stored in {}", p.display()),
            });
        }
        return Ok(ck.into_trainer()?);
    }
    if cfg.prune.mode == RunMode::Finetune {
        let src = cfg.source_checkpoint.as_ref().ok_or_else(|| CliError::Config {
            path: "$.source_checkpoint".into(),
            message: "finetune mode needs a source checkpoint".into(),
        })?;
        let ck = load_checkpoint(src)?;
        ck.check_model(&cfg.model)?;
        return Ok(Trainer::finetune(cfg.prune.clone(), ck.graph()?)?);
    }
    Ok(Trainer::new(cfg.prune.clone(), ModelGraph::new(cfg.model.clone(), cfg.seed)?)?)
}

/// Trains, writing periodic checkpoints, the trajectory CSV, the final
/// checkpoint and the final gap report.
pub fn prune(cfg: &RunConfigFile, resume: Option<&Path>) -> Result<Value, CliError> {
    let out = &cfg.output_dir;
    let splits = cfg.load_data()?;
    let mut trainer = start_trainer(cfg, resume)?;
    mkdir(&out.join(CHECKPOINT_DIR))?;
    let every = cfg.checkpoint_every;
    trainer.run(&splits.train, &splits.val, |t| {
        if t.epoch() % every == 0 {
            Checkpoint::from_trainer(t).save(&epoch_checkpoint(out, t.epoch()))?;
            log_trajectory(t.trajectory(), &out.join(TRAJECTORY_FILE))?;
        }
        Ok(())
    })?;
    Checkpoint::from_trainer(&trainer).save(&out.join(FINAL_CHECKPOINT))?;
    log_trajectory(trainer.trajectory(), &out.join(TRAJECTORY_FILE))?;
    let ev = evaluate(trainer.graph(), &splits.val, trainer.config())?;
    let report = json!({
        "mode": trainer.config().mode,
        "T": trainer.config().target,
        "epochs": trainer.epoch(),
        "seed": cfg.seed,
        "evaluation": ev,
        "kept": kept_map(trainer.graph()),
    });
    write_json(&out.join(REPORT_FILE), &report)?;
    Ok(report)
}

fn kept_map(g: &ModelGraph) -> Value {
    g.groups().iter().map(|m| (m.id.clone(), json!(m.kept()))).collect::<serde_json::Map<_, _>>().into()
}

fn full_flops(cfg: &RunConfigFile) -> Result<f64, CliError> {
    Ok(ModelGraph::new(cfg.model.clone(), 0)?.compute_flops(ForwardMode::Full))
}

/// Metrics of a train or compact checkpoint on the validation split.
pub fn eval(cfg: &RunConfigFile, ckpt: Option<&Path>) -> Result<Value, CliError> {
    let path = ckpt.map_or_else(|| cfg.output_dir.join(FINAL_CHECKPOINT), Path::to_path_buf);
    let ck = load_checkpoint(&path)?;
    let splits = cfg.load_data()?;
    let val = &splits.val;
    let summary = match ck.header.kind {
        CheckpointKind::Train => {
            ck.check_model(&cfg.model)?;
            let run_cfg = ck.header.config.clone().unwrap_or_else(|| cfg.prune.clone());
            let ev = evaluate(&ck.graph()?, val, &run_cfg)?;
            json!({
                "checkpoint": path.display().to_string(),
                "kind": ck.header.kind,
                "epoch": ck.header.epoch,
                "evaluation": ev,
            })
        }
        CheckpointKind::Compact => {
            let m = ck.compact()?;
            check_source(&m, cfg)?;
            let logits = m.logits_for(&val.features)?;
            json!({
                "checkpoint": path.display().to_string(),
                "kind": ck.header.kind,
                "epoch": ck.header.epoch,
                "top1": top1_accuracy(&logits, &val.labels)?,
                "flops_ratio": m.flops() / full_flops(cfg)?,
            })
        }
    };
    write_json(&cfg.output_dir.join(EVAL_FILE), &summary)?;
    Ok(summary)
}

fn check_source(m: &CompactModel, cfg: &RunConfigFile) -> Result<(), CliError> {
    let live = cfg.model.hash();
    if m.provenance.source_hash != live {
        return Err(Error::HashMismatch {
            checkpoint: m.provenance.source_hash.clone(),
            expected: live,
        }
        .into());
    }
    Ok(())
}

/// Slices the hard network out of a train checkpoint.
pub fn export(cfg: &RunConfigFile, ckpt: Option<&Path>) -> Result<Value, CliError> {
    let path = ckpt.map_or_else(|| cfg.output_dir.join(FINAL_CHECKPOINT), Path::to_path_buf);
    let ck = load_checkpoint(&path)?;
    if ck.header.kind != CheckpointKind::Train {
        return Err(Error::Checkpoint(format!("{} is already compact", path.display())).into());
    }
    ck.check_model(&cfg.model)?;
    let graph = ck.graph()?;
    let m = graph.export_compact()?;
    mkdir(&cfg.output_dir)?;
    let dest = cfg.output_dir.join(COMPACT_CHECKPOINT);
    Checkpoint::from_compact(&m, ck.header.config.as_ref(), ck.header.epoch, &ck.header.trajectory).save(&dest)?;
    Ok(json!({
        "checkpoint": dest.display().to_string(),
        "flops_ratio": m.flops() / graph.compute_flops(ForwardMode::Full),
        "hard_flops_ratio": graph.flops_ratio(ForwardMode::Hard),
        "kept": m.provenance.kept,
    }))
}

/// Samples prefix masks near `T`, then trains the sliced network from a
/// fresh initialization with plain supervised SGD.
pub fn random_baseline(cfg: &RunConfigFile) -> Result<Value, CliError> {
    let out = &cfg.output_dir;
    let rb = cfg.random_baseline;
    let source = ModelGraph::new(cfg.model.clone(), cfg.seed)?;
    check_feasible(&source, cfg.prune.target)?;
    let kept = source.random_prefix_masks(cfg.prune.target, rb.tolerance, cfg.seed, rb.max_attempts)?;
    let mut masked = source.clone();
    masked.apply_prefix_assignment(&kept)?;
    let ratio = masked.flops_ratio(ForwardMode::Hard);
    mkdir(out)?;
    let masks = json!({ "seed": cfg.seed, "T": cfg.prune.target, "kept": kept, "flops_ratio": ratio });
    write_json(&out.join(RANDOM_MASKS_FILE), &masks)?;

    let sliced = masked.export_compact()?;
    let mut fresh = ModelGraph::new(sliced.graph.spec().clone(), cfg.seed)?;
    let splits = cfg.load_data()?;
    let losses = train_supervised(&mut fresh, &splits.train, &cfg.prune)?;
    let top1 = top1_accuracy(&predict(&fresh, &splits.val, ForwardMode::Full)?, &splits.val.labels)?;
    let model = CompactModel {
        graph: fresh,
        provenance: sliced.provenance,
    };
    Checkpoint::from_compact(&model, Some(&cfg.prune), cfg.prune.epochs, &[]).save(&out.join(RANDOM_CHECKPOINT))?;
    let report = json!({
        "seed": cfg.seed,
        "T": cfg.prune.target,
        "kept": kept,
        "flops_ratio": ratio,
        "top1": top1,
        "final_loss": losses.last().copied(),
    });
    write_json(&out.join(RANDOM_REPORT_FILE), &report)?;
    Ok(report)
}
