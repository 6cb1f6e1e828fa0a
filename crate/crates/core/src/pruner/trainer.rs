use serde::{Deserialize, Serialize};

use crate::autodiff::{kernels, Tape, Tensor};
use crate::data::{batch_iter, Dataset};
use crate::error::{Error, Result};
use crate::graph::{CompactModel, ForwardMode, ModelGraph, ModelSpec};
use crate::metrics::{GapReference, GapReport};
use crate::nn::{cross_entropy, smoothed_targets};

use super::config::{PruneRunConfig, RunMode};
use super::optim::{lr_schedule, sgd_momentum_step, OptimizerState};
use super::step::prune_step;

/// Rows per forward pass during evaluation.
const EVAL_CHUNK: usize = 1024;

/// One row of the per-epoch log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub epoch: usize,
    pub soft_top1: f64,
    pub hard_top1: f64,
    pub flops_hard: f64,
    pub flops_soft: f64,
    pub js_gap: f64,
    pub l2_gap: f64,
    pub resource_penalty: f64,
    pub lr: f64,
}

/// Validation metrics of a graph in its current state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub report: GapReport,
    pub flops_hard: f64,
    pub flops_soft: f64,
    pub resource_penalty: f64,
}

/// Logits for every row of `ds`, evaluated in fixed-size chunks in order.
pub fn predict(g: &ModelGraph, ds: &Dataset, mode: ForwardMode) -> Result<Tensor> {
    let mut out = Vec::with_capacity(ds.len() * g.num_classes());
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let b = ds.select(chunk);
        out.extend(g.logits_for(&b.x, mode)?.into_values());
    }
    Tensor::new(vec![ds.len(), g.num_classes()], out)
}

/// Gap and accuracy on `val`. The hard network is compared with its direct
/// supervision: the soft network in coupled modes, the smoothed labels in
/// `alt1`, the original network in `alt2`.
pub fn evaluate(g: &ModelGraph, val: &Dataset, cfg: &PruneRunConfig) -> Result<Evaluation> {
    let soft = predict(g, val, ForwardMode::Soft)?;
    let hard = predict(g, val, ForwardMode::Hard)?;
    let report = match cfg.mode {
        RunMode::S2h | RunMode::Finetune | RunMode::SoftOnly => {
            GapReport::compute(&soft, &hard, GapReference::Logits(&soft), &val.labels)?
        }
        RunMode::Alt1 => {
            let q = smoothed_targets(&val.labels, g.num_classes(), cfg.alt1_smoothing)?;
            GapReport::compute(&soft, &hard, GapReference::Probs(&q), &val.labels)?
        }
        RunMode::Alt2 => {
            let full = predict(g, val, ForwardMode::Full)?;
            GapReport::compute(&soft, &hard, GapReference::Logits(&full), &val.labels)?
        }
    };
    let flops_soft = g.flops_ratio(ForwardMode::Soft);
    Ok(Evaluation {
        report,
        flops_hard: g.flops_ratio(ForwardMode::Hard),
        flops_soft,
        resource_penalty: (flops_soft - cfg.target).powi(2),
    })
}

fn mean(xs: &[f64]) -> f64 {
    kernels::sum(xs) / xs.len() as f64
}

fn diverged(epoch: usize, step: usize, err: Error) -> Error {
    match err {
        Error::NonFinite { .. } => Error::Diverged {
            epoch,
            step,
            message: err.to_string(),
        },
        other => other,
    }
}

/// Epoch loop over [`prune_step`], with per-epoch validation.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainer {
    cfg: PruneRunConfig,
    graph: ModelGraph,
    opt: OptimizerState,
    epoch: usize,
    trajectory: Vec<TrajectoryRecord>,
    epoch_losses: Vec<f64>,
}

impl Trainer {
    /// Fresh run. `finetune` must go through [`Trainer::finetune`].
    pub fn new(cfg: PruneRunConfig, graph: ModelGraph) -> Result<Self> {
        if cfg.mode == RunMode::Finetune {
            return Err(Error::config("mode", "finetune needs a source model; use Trainer::finetune"));
        }
        Trainer::start(cfg, graph)
    }

    /// Continues training `source` (typically a soft-only result) in
    /// `finetune` mode with fresh optimizer state.
    pub fn finetune(cfg: PruneRunConfig, source: ModelGraph) -> Result<Self> {
        if cfg.mode != RunMode::Finetune {
            return Err(Error::config("mode", format!("expected finetune, got {:?}", cfg.mode)));
        }
        Trainer::start(cfg, source)
    }

    fn start(cfg: PruneRunConfig, graph: ModelGraph) -> Result<Self> {
        cfg.validate()?;
        check_feasible(&graph, cfg.target)?;
        let opt = OptimizerState::zeros(&graph.theta(), &graph.logits());
        let mut t = Trainer {
            cfg,
            graph,
            opt,
            epoch: 0,
            trajectory: Vec::new(),
            epoch_losses: Vec::new(),
        };
        t.graph.refresh_masks();
        Ok(t)
    }

    /// Restores a run after `epoch` completed epochs.
    pub fn resume(
        cfg: PruneRunConfig,
        graph: ModelGraph,
        opt: OptimizerState,
        epoch: usize,
        trajectory: Vec<TrajectoryRecord>,
        epoch_losses: Vec<f64>,
    ) -> Result<Self> {
        cfg.validate()?;
        if epoch > cfg.epochs || trajectory.len() != epoch || epoch_losses.len() != epoch {
            return Err(Error::Checkpoint(format!(
                "inconsistent resume state: epoch {epoch} of {}, {} records, {} losses",
                cfg.epochs,
                trajectory.len(),
                epoch_losses.len()
            )));
        }
        let shapes_ok = opt.theta_velocity.len() == graph.theta().len()
            && opt.theta_velocity.iter().zip(graph.theta()).all(|(v, t)| v.shape() == t.shape())
            && opt.mask_velocity.len() == graph.logits().len()
            && opt.mask_velocity.iter().zip(graph.logits()).all(|(v, u)| v.len() == u.len());
        if !shapes_ok {
            return Err(Error::Checkpoint("optimizer state does not match the model".into()));
        }
        let mut t = Trainer {
            cfg,
            graph,
            opt,
            epoch,
            trajectory,
            epoch_losses,
        };
        t.graph.refresh_masks();
        Ok(t)
    }

    pub fn config(&self) -> &PruneRunConfig {
        &self.cfg
    }

    pub fn graph(&self) -> &ModelGraph {
        &self.graph
    }

    pub fn graph_mut(&mut self) -> &mut ModelGraph {
        &mut self.graph
    }

    pub fn optimizer(&self) -> &OptimizerState {
        &self.opt
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.cfg.epochs
    }

    pub fn trajectory(&self) -> &[TrajectoryRecord] {
        &self.trajectory
    }

    /// Mean soft task loss of every completed epoch.
    pub fn epoch_losses(&self) -> &[f64] {
        &self.epoch_losses
    }

    pub fn base_lr(&self) -> f64 {
        let lr = self.cfg.optimizer.lr;
        if self.cfg.mode == RunMode::Finetune {
            lr * self.cfg.finetune_lr_scale
        } else {
            lr
        }
    }

    /// Trains one epoch and appends its trajectory record.
    pub fn run_epoch(&mut self, train: &Dataset, val: &Dataset) -> Result<TrajectoryRecord> {
        if self.is_done() {
            return Err(Error::Contract(format!("all {} epochs already ran", self.cfg.epochs)));
        }
        let e = self.epoch;
        let lr = lr_schedule(&self.cfg.schedule, e, self.cfg.epochs, self.base_lr())?;
        let batches = batch_iter(train, self.cfg.batch_size, self.cfg.seed, e)?;
        let mut losses = Vec::with_capacity(batches.len());
        for (i, b) in batches.iter().enumerate() {
            let out = prune_step(&mut self.graph, b, &self.cfg, &mut self.opt, lr).map_err(|err| diverged(e + 1, i, err))?;
            if !out.losses.task.is_finite() {
                return Err(Error::Diverged {
                    epoch: e + 1,
                    step: i,
                    message: "task loss is not finite".into(),
                });
            }
            losses.push(out.losses.task);
        }
        let ev = evaluate(&self.graph, val, &self.cfg)?;
        let rec = TrajectoryRecord {
            epoch: e + 1,
            soft_top1: ev.report.soft_top1,
            hard_top1: ev.report.hard_top1,
            flops_hard: ev.flops_hard,
            flops_soft: ev.flops_soft,
            js_gap: ev.report.js,
            l2_gap: ev.report.l2,
            resource_penalty: ev.resource_penalty,
            lr,
        };
        self.epoch = e + 1;
        self.epoch_losses.push(mean(&losses));
        self.trajectory.push(rec);
        Ok(rec)
    }

    /// Runs the remaining epochs, calling `after_epoch` after each one.
    pub fn run(&mut self, train: &Dataset, val: &Dataset, mut after_epoch: impl FnMut(&Trainer) -> Result<()>) -> Result<()> {
        while !self.is_done() {
            self.run_epoch(train, val)?;
            after_epoch(self)?;
        }
        Ok(())
    }

    pub fn into_graph(self) -> ModelGraph {
        self.graph
    }
}

/// Fails when even one channel per prunable group exceeds the target.
pub fn check_feasible(g: &ModelGraph, target: f64) -> Result<()> {
    let min = g.min_flops_ratio();
    if min > target {
        return Err(Error::Infeasible(format!(
            "T={target} is below the smallest reachable FLOPs ratio {min} (one channel per prunable group)"
        )));
    }
    Ok(())
}

/// Outcome of [`run_experiment`].
#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub graph: ModelGraph,
    pub compact: CompactModel,
    pub trajectory: Vec<TrajectoryRecord>,
    pub evaluation: Evaluation,
}

/// Initializes `spec` from `cfg.seed`, trains for `cfg.epochs`, evaluates
/// on `val`, and exports the compact network.
pub fn run_experiment(cfg: &PruneRunConfig, spec: &ModelSpec, train: &Dataset, val: &Dataset) -> Result<ExperimentResult> {
    let graph = ModelGraph::new(spec.clone(), cfg.seed)?;
    let mut t = Trainer::new(cfg.clone(), graph)?;
    t.run(train, val, |_| Ok(()))?;
    let evaluation = evaluate(&t.graph, val, cfg)?;
    let trajectory = t.trajectory.clone();
    let graph = t.into_graph();
    let compact = graph.export_compact()?;
    Ok(ExperimentResult {
        graph,
        compact,
        trajectory,
        evaluation,
    })
}

/// Plain supervised training of the full network: cross-entropy on
/// `Full`-mode logits, SGD with the configured optimizer and schedule, same
/// batch order as [`Trainer`]. Returns the mean loss of each epoch.
pub fn train_supervised(g: &mut ModelGraph, train: &Dataset, cfg: &PruneRunConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let o = cfg.optimizer;
    let mut velocity: Vec<Tensor> = g.theta().iter().map(|t| Tensor::zeros(t.shape())).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for e in 0..cfg.epochs {
        let lr = lr_schedule(&cfg.schedule, e, cfg.epochs, o.lr)?;
        let mut losses = Vec::new();
        for (i, b) in batch_iter(train, cfg.batch_size, cfg.seed, e)?.iter().enumerate() {
            let mut tape = Tape::new();
            let bound = g.bind(&mut tape);
            let x = tape.constant(b.x.clone());
            let step = (|| {
                let y = g.forward(&mut tape, &bound, x, ForwardMode::Full)?;
                cross_entropy(&mut tape, y, &b.labels, cfg.label_smoothing)
            })();
            let l = step.map_err(|err| diverged(e + 1, i, err))?;
            let grads = tape.backward(l, &bound.theta)?;
            losses.push(tape.value(l).item());
            for ((p, &leaf), v) in g.theta_mut().into_iter().zip(&bound.theta).zip(&mut velocity) {
                let gr = grads.get(leaf).map_or_else(|| vec![0.0; p.len()], |t| t.values().to_vec());
                sgd_momentum_step(p.values_mut(), &gr, v.values_mut(), lr, o.momentum, o.weight_decay);
            }
        }
        epoch_losses.push(mean(&losses));
    }
    Ok(epoch_losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SyntheticKind};

    fn small_cfg() -> PruneRunConfig {
        PruneRunConfig {
            target: 0.5,
            epochs: 3,
            batch_size: 16,
            seed: 4,
            ..Default::default()
        }
    }

    #[test]
    fn infeasible_target_is_rejected_before_training() {
        let g = ModelGraph::new(ModelSpec::mlp(2, &[8, 8], 3), 0).unwrap();
        // One channel per hidden group: 2 + 1 + 3 = 6 of 2*8 + 64 + 24 = 104.
        assert!((g.min_flops_ratio() - 6.0 / 104.0).abs() < 1e-15);
        let cfg = PruneRunConfig {
            target: 0.05,
            ..small_cfg()
        };
        assert!(matches!(Trainer::new(cfg, g), Err(Error::Infeasible(_))));
    }

    #[test]
    fn runs_are_deterministic() {
        let s = gen_synthetic(SyntheticKind::Blobs, 120, 3, 0.3, 1).unwrap();
        let spec = ModelSpec::mlp(2, &[8, 8], 3);
        let a = run_experiment(&small_cfg(), &spec, &s.train, &s.val).unwrap();
        let b = run_experiment(&small_cfg(), &spec, &s.train, &s.val).unwrap();
        assert_eq!(a.trajectory, b.trajectory);
        assert_eq!(a.graph, b.graph);
        assert_eq!(a.trajectory.len(), 3);
        assert_eq!(a.trajectory.iter().map(|r| r.epoch).collect::<Vec<_>>(), vec![1, 2, 3]);
    }

    #[test]
    fn soft_only_ignores_hard_network() {
        let s = gen_synthetic(SyntheticKind::Blobs, 60, 3, 0.3, 1).unwrap();
        let cfg = PruneRunConfig {
            mode: RunMode::SoftOnly,
            ..small_cfg()
        };
        let b = s.train.as_batch();
        let mut g = ModelGraph::new(ModelSpec::mlp(2, &[8, 8], 3), 0).unwrap();
        g.refresh_masks();
        let out = super::super::step::compute_bundle(&g, &b, &cfg, Default::default()).unwrap();
        assert!(out.bundle.g_g_hard_theta.iter().all(|t| t.values().iter().all(|&v| v == 0.0)));
        assert!(out.bundle.g_g_u.iter().flatten().all(|&v| v == 0.0));
        let gt = super::super::step::theta_update_gradient(&out.bundle, &cfg);
        for (k, t) in out.bundle.g_l_theta.iter().enumerate() {
            let expect: Vec<f64> = t.values().iter().map(|v| 0.5 * v).collect();
            assert_eq!(gt[k], expect);
        }
        // Finetune needs the explicit entry point.
        let cfg = PruneRunConfig {
            mode: RunMode::Finetune,
            ..small_cfg()
        };
        assert!(Trainer::new(cfg.clone(), g.clone()).is_err());
        assert!(Trainer::finetune(cfg, g).is_ok());
    }
}
