//! Evaluation quantities: accuracy, FLOPs ratio, and soft/hard gap measures.
//!
//! All functions are pure and take logits of shape `[B, K]`; rows are
//! reduced in ascending order so results are reproducible bit for bit.

use serde::{Deserialize, Serialize};

use crate::autodiff::{kernels, Tensor};
use crate::error::{Error, Result};
use crate::graph::{ForwardMode, ModelGraph};

fn rows(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(usize, usize)> {
    if a.shape() != b.shape() || a.rank() != 2 {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok((a.shape()[0], a.shape()[1]))
}

fn probs(logits: &Tensor) -> Tensor {
    kernels::softmax_rows(logits)
}

/// Batch mean of the Jensen-Shannon divergence between row-wise softmaxes,
/// natural log.
pub fn js_divergence(p_logits: &Tensor, q_logits: &Tensor) -> Result<f64> {
    rows("js_divergence", p_logits, q_logits)?;
    js_divergence_probs(&probs(p_logits), &probs(q_logits))
}

/// [`js_divergence`] on probability rows. Zero entries contribute zero.
pub fn js_divergence_probs(p: &Tensor, q: &Tensor) -> Result<f64> {
    let (b, k) = rows("js_divergence", p, q)?;
    let mut per_row = Vec::with_capacity(b);
    for r in 0..b {
        let pr = &p.values()[r * k..(r + 1) * k];
        let qr = &q.values()[r * k..(r + 1) * k];
        let mut terms = Vec::with_capacity(2 * k);
        for (&pi, &qi) in pr.iter().zip(qr) {
            let m = 0.5 * (pi + qi);
            if pi > 0.0 {
                terms.push(0.5 * pi * (pi / m).ln());
            }
            if qi > 0.0 {
                terms.push(0.5 * qi * (qi / m).ln());
            }
        }
        // Rounding can leave a tiny negative for identical rows.
        per_row.push(kernels::sum(&terms).max(0.0));
    }
    Ok(kernels::sum(&per_row) / b as f64)
}

/// Batch mean of the Euclidean distance between row-wise softmaxes.
pub fn l2_gap(p_logits: &Tensor, q_logits: &Tensor) -> Result<f64> {
    rows("l2_gap", p_logits, q_logits)?;
    l2_gap_probs(&probs(p_logits), &probs(q_logits))
}

pub fn l2_gap_probs(p: &Tensor, q: &Tensor) -> Result<f64> {
    let (b, k) = rows("l2_gap", p, q)?;
    let per_row: Vec<f64> = (0..b)
        .map(|r| {
            let sq: Vec<f64> = (r * k..(r + 1) * k)
                .map(|i| {
                    let d = p.values()[i] - q.values()[i];
                    d * d
                })
                .collect();
            kernels::sum(&sq).sqrt()
        })
        .collect();
    Ok(kernels::sum(&per_row) / b as f64)
}

/// Row-wise argmax; ties go to the lowest index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = *logits.shape().last().unwrap_or(&1);
    logits
        .values()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Fraction of rows whose argmax equals the label.
pub fn top1_accuracy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    if logits.rank() != 2 || logits.shape()[0] != labels.len() {
        return Err(Error::shape("top1_accuracy", format!("{:?} logits, {} labels", logits.shape(), labels.len())));
    }
    let correct = argmax_rows(logits).iter().zip(labels).filter(|(a, b)| a == b).count();
    Ok(correct as f64 / labels.len() as f64)
}

/// `compute_flops(mode) / compute_flops(Full)`.
pub fn flops_ratio(g: &ModelGraph, mode: ForwardMode) -> f64 {
    g.flops_ratio(mode)
}

/// Gap and accuracy summary over a validation set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    pub js: f64,
    pub l2: f64,
    pub soft_top1: f64,
    pub hard_top1: f64,
    pub samples: usize,
}

impl GapReport {
    /// Gap between `reference` and hard outputs, plus both accuracies.
    /// `reference` may be given as probabilities (e.g. smoothed labels);
    /// otherwise logits are softmaxed.
    pub fn compute(
        soft_logits: &Tensor,
        hard_logits: &Tensor,
        reference: GapReference<'_>,
        labels: &[usize],
    ) -> Result<GapReport> {
        let hard_p = probs(hard_logits);
        let ref_p = match reference {
            GapReference::Logits(l) => probs(l),
            GapReference::Probs(p) => p.clone(),
        };
        Ok(GapReport {
            js: js_divergence_probs(&ref_p, &hard_p)?,
            l2: l2_gap_probs(&ref_p, &hard_p)?,
            soft_top1: top1_accuracy(soft_logits, labels)?,
            hard_top1: top1_accuracy(hard_logits, labels)?,
            samples: labels.len(),
        })
    }
}

/// What the hard network is compared against.
#[derive(Debug, Clone, Copy)]
pub enum GapReference<'a> {
    Logits(&'a Tensor),
    Probs(&'a Tensor),
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::matrix(rows).unwrap()
    }

    const LN2: f64 = std::f64::consts::LN_2;

    #[test]
    fn js_closed_forms() {
        let a = m(&[&[0.3, -1.0, 2.0]]);
        assert_eq!(js_divergence(&a, &a).unwrap(), 0.0);
        let p = m(&[&[1.0, 0.0]]);
        let q = m(&[&[0.0, 1.0]]);
        assert!((js_divergence_probs(&p, &q).unwrap() - LN2).abs() < 1e-15);
        // Limit logits.
        let js = js_divergence(&m(&[&[60.0, -60.0]]), &m(&[&[-60.0, 60.0]])).unwrap();
        assert!((js - LN2).abs() < 1e-12);
    }

    #[test]
    fn js_and_l2_reference_pair() {
        // Direct summation in python (mpmath, 50 digits) over softmaxed rows of
        // these K=10 logits.
        let a = m(&[&[0.1, -0.4, 1.3, 0.0, 2.2, -1.7, 0.5, 0.9, -0.2, 0.05]]);
        let b = m(&[&[-0.6, 0.8, 0.2, 1.1, -0.3, 0.4, -1.2, 0.7, 1.9, -0.8]]);
        let js = js_divergence(&a, &b).unwrap();
        let l2 = l2_gap(&a, &b).unwrap();
        assert!((js - JS_REF).abs() < 1e-10, "{js}");
        assert!((l2 - L2_REF).abs() < 1e-10, "{l2}");
    }

    const JS_REF: f64 = 0.23917644514388727;
    const L2_REF: f64 = 0.535_310_018_551_522;

    #[test]
    fn l2_closed_forms() {
        let p = m(&[&[1.0, 0.0]]);
        let q = m(&[&[0.0, 1.0]]);
        assert!((l2_gap_probs(&p, &q).unwrap() - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!(l2_gap(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn accuracy_and_ties() {
        let logits = m(&[&[2.0, 1.0], &[0.0, 3.0]]);
        assert_eq!(top1_accuracy(&logits, &[0, 1]).unwrap(), 1.0);
        assert_eq!(top1_accuracy(&logits, &[1, 0]).unwrap(), 0.0);
        assert_eq!(top1_accuracy(&m(&[&[0.0, 0.0]]), &[0]).unwrap(), 1.0);
        assert!(top1_accuracy(&logits, &[0]).is_err());
    }

    #[test]
    fn flops_ratio_of_mlp() {
        let mut g = ModelGraph::new(crate::graph::ModelSpec::mlp(4, &[4], 2), 0).unwrap();
        assert_eq!(flops_ratio(&g, ForwardMode::Full), 1.0);
        g.group_mut("h1").unwrap().force_binary_prefix(2).unwrap();
        assert_eq!(flops_ratio(&g, ForwardMode::Hard), 0.5);
    }

    fn logits_strategy() -> impl Strategy<Value = Tensor> {
        prop::collection::vec(-6.0f64..6.0, 12).prop_map(|v| Tensor::new(vec![3, 4], v).unwrap())
    }

    proptest! {
        #[test]
        fn js_bounded_and_symmetric(a in logits_strategy(), b in logits_strategy()) {
            let ab = js_divergence(&a, &b).unwrap();
            let ba = js_divergence(&b, &a).unwrap();
            prop_assert!((0.0..=LN2 + 1e-15).contains(&ab));
            prop_assert!((ab - ba).abs() < 1e-14);
        }

        #[test]
        fn l2_triangle_inequality(a in logits_strategy(), b in logits_strategy(), c in logits_strategy()) {
            let ab = l2_gap(&a, &b).unwrap();
            let bc = l2_gap(&b, &c).unwrap();
            let ac = l2_gap(&a, &c).unwrap();
            prop_assert!(ac <= ab + bc + 1e-12);
        }
    }
}
