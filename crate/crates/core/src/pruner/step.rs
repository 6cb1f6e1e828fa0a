//! One optimization step.
//!
//! The soft and hard networks are evaluated on the same batch with separate
//! weight leaves (same values), so the tape keeps every gradient path apart
//! and each bundle term is exactly the derivative of its own scalar.

use crate::autodiff::{GradientMap, Tape, Tensor, Var};
use crate::data::Batch;
use crate::error::Result;
use crate::graph::{Bound, ForwardMode, ModelGraph};
use crate::nn::cross_entropy;

use super::balance::balance_mask_gradients;
use super::config::{PruneRunConfig, RunMode};
use super::optim::{sgd_momentum_step, OptimizerState};

/// The separately kept gradient terms of one step. Disabled or unused terms
/// are exact zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    /// Task loss through the soft network, into the weights.
    pub g_l_theta: Vec<Tensor>,
    /// Gap (hard network as student) into the weights.
    pub g_g_hard_theta: Vec<Tensor>,
    /// Gap through the soft network into the weights.
    pub g_g_soft_theta: Vec<Tensor>,
    /// Weight gradient of the `alt1` / `alt2` objectives.
    pub g_alt_theta: Vec<Tensor>,
    pub g_l_u: Vec<Vec<f64>>,
    pub g_r_u: Vec<Vec<f64>>,
    pub g_g_u: Vec<Vec<f64>>,
}

/// Evidence that the two distillation terms stay decoupled.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DecouplingAudit {
    /// Mask-logit entries in the `d1` gradient map.
    pub d1_u_keys: usize,
    /// Largest `|d d1 / d u|` entry (0 when absent).
    pub d1_u_max_abs: f64,
    /// Weight entries in the `d2` gradient map.
    pub d2_theta_keys: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepLosses {
    /// Soft-network task loss.
    pub task: f64,
    pub resource: f64,
    /// Weight-side objective: `d1` in coupled modes, the hard loss in
    /// `alt1`, the original loss plus gap in `alt2`.
    pub d1: f64,
    /// Mask-side gap `d2` (0 when not computed).
    pub d2: f64,
    pub soft_ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub losses: StepLosses,
    pub bundle: GradientBundle,
    pub audit: DecouplingAudit,
}

/// How `d1` treats the soft logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum D1Graph {
    /// `G(y_h, detach(y_s))`
    #[default]
    Detached,
    /// `G(y_h, y_s)` with the soft branch kept on the tape; only the hard
    /// path is read into `g_g_hard_theta`.
    Retained,
}

fn theta_grads(map: &GradientMap, leaves: &[Var], like: &[&Tensor]) -> Vec<Tensor> {
    leaves
        .iter()
        .zip(like)
        .map(|(&v, t)| map.get(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect()
}

fn u_grads(map: &GradientMap, leaves: &[Var], like: &[&[f64]]) -> Vec<Vec<f64>> {
    leaves
        .iter()
        .zip(like)
        .map(|(&v, u)| map.get(v).map_or_else(|| vec![0.0; u.len()], |t| t.values().to_vec()))
        .collect()
}

fn concat(a: &[Var], b: &[Var]) -> Vec<Var> {
    a.iter().chain(b).copied().collect()
}

fn fresh_theta(g: &ModelGraph, tape: &mut Tape, soft: &Bound) -> Bound {
    Bound {
        theta: g.theta().into_iter().map(|t| tape.leaf(t.clone())).collect(),
        logits: soft.logits.clone(),
    }
}

/// Resource penalty `(soft_ratio - T)^2` on the tape.
pub fn resource_penalty(g: &ModelGraph, tape: &mut Tape, bound: &Bound, target: f64) -> Result<Var> {
    let ratio = g.soft_flops_ratio(tape, bound)?;
    let t = tape.constant(Tensor::scalar(target));
    let dev = tape.sub(ratio, t)?;
    tape.square(dev)
}

/// Runs the forwards and backward passes of one step without touching the
/// graph. Masks must already be refreshed.
pub fn compute_bundle(g: &ModelGraph, batch: &Batch, cfg: &PruneRunConfig, d1_graph: D1Graph) -> Result<StepOutput> {
    let tog = cfg.toggles;
    let gap = cfg.gap_measure();
    let theta_like = g.theta();
    let u_like = g.logits();
    let zeros_theta = || theta_like.iter().map(|t| Tensor::zeros(t.shape())).collect::<Vec<_>>();
    let zeros_u = || u_like.iter().map(|u| vec![0.0; u.len()]).collect::<Vec<_>>();

    let mut tape = Tape::new();
    let soft = g.bind(&mut tape);
    let x = tape.constant(batch.x.clone());
    let u = soft.logits.clone();

    let y_s = g.forward(&mut tape, &soft, x, ForwardMode::Soft)?;
    let l = cross_entropy(&mut tape, y_s, &batch.labels, cfg.label_smoothing)?;
    let ratio = g.soft_flops_ratio(&mut tape, &soft)?;
    let t = tape.constant(Tensor::scalar(cfg.target));
    let dev = tape.sub(ratio, t)?;
    let r = tape.square(dev)?;

    let mut losses = StepLosses {
        task: tape.value(l).item(),
        resource: tape.value(r).item(),
        soft_ratio: tape.value(ratio).item(),
        ..Default::default()
    };
    let mut bundle = GradientBundle {
        g_l_theta: zeros_theta(),
        g_g_hard_theta: zeros_theta(),
        g_g_soft_theta: zeros_theta(),
        g_alt_theta: zeros_theta(),
        g_l_u: zeros_u(),
        g_r_u: zeros_u(),
        g_g_u: zeros_u(),
    };
    let mut audit = DecouplingAudit::default();

    let coupled = matches!(cfg.mode, RunMode::S2h | RunMode::Finetune);
    let want_l_theta = match cfg.mode {
        RunMode::S2h | RunMode::Finetune => tog.g_l_theta,
        RunMode::SoftOnly => true,
        RunMode::Alt1 | RunMode::Alt2 => false,
    };

    // (l + r).backward(), kept as two maps.
    let mut l_targets = Vec::new();
    if want_l_theta {
        l_targets.extend(&soft.theta);
    }
    if tog.g_l_u {
        l_targets.extend(&u);
    }
    if !l_targets.is_empty() {
        let gl = tape.backward(l, &l_targets)?;
        if want_l_theta {
            bundle.g_l_theta = theta_grads(&gl, &soft.theta, &theta_like);
        }
        if tog.g_l_u {
            bundle.g_l_u = u_grads(&gl, &u, &u_like);
        }
    }
    if tog.g_r_u {
        bundle.g_r_u = u_grads(&tape.backward(r, &u)?, &u, &u_like);
    }

    match cfg.mode {
        RunMode::S2h | RunMode::Finetune => {
            debug_assert!(coupled);
            let hard = fresh_theta(g, &mut tape, &soft);
            let y_h = g.forward(&mut tape, &hard, x, ForwardMode::Hard)?;
            let y_s_const = tape.detach(y_s);
            let y_h_const = tape.detach(y_h);
            let d1 = match d1_graph {
                D1Graph::Detached => gap.eval(&mut tape, y_h, y_s_const)?,
                D1Graph::Retained => gap.eval(&mut tape, y_h, y_s)?,
            };
            let d2 = gap.eval(&mut tape, y_h_const, y_s)?;
            losses.d1 = tape.value(d1).item();
            losses.d2 = tape.value(d2).item();

            // d1.backward()
            let all_d1 = concat(&concat(&hard.theta, &soft.theta), &u);
            let g1 = tape.backward(d1, &all_d1)?;
            if tog.g_g_hard_theta {
                bundle.g_g_hard_theta = theta_grads(&g1, &hard.theta, &theta_like);
            }
            for &leaf in &u {
                if let Some(gu) = g1.get(leaf) {
                    audit.d1_u_keys += 1;
                    for &v in gu.values() {
                        audit.d1_u_max_abs = audit.d1_u_max_abs.max(v.abs());
                    }
                }
            }

            // d2.backward(inputs=u), widened to the soft weights only when
            // that ablation term is switched on.
            let soft_theta_via_d2 = tog.g_g_soft_theta && d1_graph == D1Graph::Detached;
            if tog.g_g_soft_theta && d1_graph == D1Graph::Retained {
                bundle.g_g_soft_theta = theta_grads(&g1, &soft.theta, &theta_like);
            }
            let mut d2_targets = Vec::new();
            if tog.g_g_u {
                d2_targets.extend(&u);
            }
            if soft_theta_via_d2 {
                d2_targets.extend(&soft.theta);
            }
            if !d2_targets.is_empty() {
                let g2 = tape.backward(d2, &d2_targets)?;
                audit.d2_theta_keys = soft.theta.iter().chain(&hard.theta).filter(|&&v| g2.contains(v)).count();
                if tog.g_g_u {
                    bundle.g_g_u = u_grads(&g2, &u, &u_like);
                }
                if soft_theta_via_d2 {
                    bundle.g_g_soft_theta = theta_grads(&g2, &soft.theta, &theta_like);
                }
            }
        }
        RunMode::Alt1 => {
            let hard = fresh_theta(g, &mut tape, &soft);
            let y_h = g.forward(&mut tape, &hard, x, ForwardMode::Hard)?;
            let lh = cross_entropy(&mut tape, y_h, &batch.labels, cfg.alt1_smoothing)?;
            losses.d1 = tape.value(lh).item();
            bundle.g_alt_theta = theta_grads(&tape.backward(lh, &hard.theta)?, &hard.theta, &theta_like);
        }
        RunMode::Alt2 => {
            let orig = fresh_theta(g, &mut tape, &soft);
            let hard = fresh_theta(g, &mut tape, &soft);
            let y_f = g.forward(&mut tape, &orig, x, ForwardMode::Full)?;
            let y_h = g.forward(&mut tape, &hard, x, ForwardMode::Hard)?;
            let lf = cross_entropy(&mut tape, y_f, &batch.labels, cfg.label_smoothing)?;
            let y_f_const = tape.detach(y_f);
            let gh = gap.eval(&mut tape, y_h, y_f_const)?;
            let total = tape.add(lf, gh)?;
            losses.d1 = tape.value(total).item();
            let gm = tape.backward(total, &concat(&orig.theta, &hard.theta))?;
            let a = theta_grads(&gm, &orig.theta, &theta_like);
            let b = theta_grads(&gm, &hard.theta, &theta_like);
            bundle.g_alt_theta = a
                .into_iter()
                .zip(b)
                .map(|(a, b)| {
                    let v = a.values().iter().zip(b.values()).map(|(x, y)| x + y).collect();
                    Tensor::new(a.shape().to_vec(), v).expect("same shape")
                })
                .collect();
        }
        RunMode::SoftOnly => {}
    }

    Ok(StepOutput { losses, bundle, audit })
}

fn axpy(acc: &mut [f64], k: f64, x: &[f64]) {
    for (a, &b) in acc.iter_mut().zip(x) {
        *a += k * b;
    }
}

/// Combined weight gradient for the active mode.
pub fn theta_update_gradient(bundle: &GradientBundle, cfg: &PruneRunConfig) -> Vec<Vec<f64>> {
    let tog = cfg.toggles;
    let n = bundle.g_l_theta.len();
    (0..n)
        .map(|k| {
            let mut acc = vec![0.0; bundle.g_l_theta[k].len()];
            match cfg.mode {
                RunMode::S2h | RunMode::Finetune => {
                    if tog.g_l_theta {
                        axpy(&mut acc, cfg.beta, bundle.g_l_theta[k].values());
                    }
                    if tog.g_g_hard_theta {
                        axpy(&mut acc, cfg.gamma, bundle.g_g_hard_theta[k].values());
                    }
                    if tog.g_g_soft_theta {
                        axpy(&mut acc, cfg.gamma, bundle.g_g_soft_theta[k].values());
                    }
                }
                RunMode::SoftOnly => axpy(&mut acc, cfg.beta, bundle.g_l_theta[k].values()),
                RunMode::Alt1 | RunMode::Alt2 => acc.copy_from_slice(bundle.g_alt_theta[k].values()),
            }
            acc
        })
        .collect()
}

/// Combined mask-logit gradient for the active mode.
pub fn mask_update_gradient(bundle: &GradientBundle, cfg: &PruneRunConfig) -> Vec<Vec<f64>> {
    let coupled = matches!(cfg.mode, RunMode::S2h | RunMode::Finetune);
    let zero: Vec<Vec<f64>> = bundle.g_g_u.iter().map(|v| vec![0.0; v.len()]).collect();
    let g_g = if coupled { &bundle.g_g_u } else { &zero };
    if cfg.balance.enabled {
        balance_mask_gradients(&bundle.g_l_u, g_g, &bundle.g_r_u, cfg.rho, cfg.balance.reference, cfg.balance.scope)
    } else {
        (0..bundle.g_l_u.len())
            .map(|i| {
                let mut acc = vec![0.0; bundle.g_l_u[i].len()];
                axpy(&mut acc, cfg.beta, &bundle.g_l_u[i]);
                axpy(&mut acc, cfg.alpha * cfg.beta, &bundle.g_r_u[i]);
                axpy(&mut acc, cfg.gamma, &g_g[i]);
                acc
            })
            .collect()
    }
}

/// Applies one optimizer step to weights and mask logits, then refreshes
/// the masks.
pub fn apply_updates(g: &mut ModelGraph, bundle: &GradientBundle, cfg: &PruneRunConfig, opt: &mut OptimizerState, lr: f64) -> Result<()> {
    let o = cfg.optimizer;
    let gt = theta_update_gradient(bundle, cfg);
    let gu = mask_update_gradient(bundle, cfg);
    for ((p, grad), v) in g.theta_mut().into_iter().zip(&gt).zip(&mut opt.theta_velocity) {
        sgd_momentum_step(p.values_mut(), grad, v.values_mut(), lr, o.momentum, o.weight_decay);
    }
    let mask_lr = lr * o.mask_lr_scale;
    for ((u, grad), v) in g.logits_mut().into_iter().zip(&gu).zip(&mut opt.mask_velocity) {
        sgd_momentum_step(u, grad, v, mask_lr, o.momentum, o.mask_weight_decay);
    }
    g.refresh_masks();
    Ok(())
}

/// Refresh masks, compute the bundle, update, refresh again.
pub fn prune_step(g: &mut ModelGraph, batch: &Batch, cfg: &PruneRunConfig, opt: &mut OptimizerState, lr: f64) -> Result<StepOutput> {
    g.refresh_masks();
    let out = compute_bundle(g, batch, cfg, D1Graph::Detached)?;
    apply_updates(g, &out.bundle, cfg, opt, lr)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::ModelSpec;

    fn setup() -> (ModelGraph, Batch) {
        let g = ModelGraph::new(ModelSpec::mlp(3, &[5], 2), 11).unwrap();
        let x = Tensor::new(vec![4, 3], (0..12).map(|i| ((i * 7) % 5) as f64 * 0.3 - 0.6).collect()).unwrap();
        (g, Batch { x, labels: vec![0, 1, 1, 0] })
    }

    #[test]
    fn default_step_is_decoupled() {
        let (mut g, b) = setup();
        g.refresh_masks();
        let out = compute_bundle(&g, &b, &PruneRunConfig::default(), D1Graph::Detached).unwrap();
        assert_eq!(out.audit.d1_u_keys, 0);
        assert_eq!(out.audit.d1_u_max_abs, 0.0);
        assert_eq!(out.audit.d2_theta_keys, 0);
        assert!(out.bundle.g_g_u[0].iter().any(|&v| v != 0.0));
        assert!(out.bundle.g_g_hard_theta[0].values().iter().any(|&v| v != 0.0));
        assert!(out.bundle.g_g_soft_theta.iter().all(|t| t.values().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn hand_checked_theta_update() {
        let (mut g, b) = setup();
        let cfg = PruneRunConfig {
            optimizer: crate::pruner::OptimizerConfig {
                lr: 0.1,
                momentum: 0.0,
                weight_decay: 0.0,
                ..Default::default()
            },
            ..Default::default()
        };
        g.refresh_masks();
        let out = compute_bundle(&g, &b, &cfg, D1Graph::Detached).unwrap();
        let before: Vec<Tensor> = g.theta().into_iter().cloned().collect();
        let mut opt = OptimizerState::zeros(&g.theta(), &g.logits());
        apply_updates(&mut g, &out.bundle, &cfg, &mut opt, 0.1).unwrap();
        for (k, (old, new)) in before.iter().zip(g.theta()).enumerate() {
            for i in 0..old.len() {
                let step = 0.5 * out.bundle.g_l_theta[k].values()[i] + 5.0 * out.bundle.g_g_hard_theta[k].values()[i];
                let expect = old.values()[i] - 0.1 * step;
                assert!((new.values()[i] - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn fixed_groups_have_no_logits() {
        let (mut g, b) = setup();
        let cfg = PruneRunConfig::default();
        let mut opt = OptimizerState::zeros(&g.theta(), &g.logits());
        assert_eq!(g.logits().len(), 1);
        prune_step(&mut g, &b, &cfg, &mut opt, 0.1).unwrap();
        assert_eq!(g.group("in").unwrap().logits(), &[0.0; 3]);
        assert_eq!(g.group("out").unwrap().logits(), &[0.0; 2]);
        assert_ne!(g.group("h1").unwrap().logits(), &[0.0; 5]);
    }
}
