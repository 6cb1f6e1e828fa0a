//! Channel-mask parameterization.
//!
//! Each prunable dependency group owns logits `u` of length `C`. After a
//! softmax, `p_k` is the probability of keeping exactly the first `k`
//! channels, so channel `i` survives with probability `w_i = sum_{k>=i} p_k`.
//! The threshold is `t = mean(w)` and the binary mask keeps every channel
//! with `w_i >= t`. Because `w` is non-increasing with `w_1 = 1`, the binary
//! mask is always a non-empty prefix.

use serde::{Deserialize, Serialize};

use crate::autodiff::{kernels, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// `w = suffix_sum(softmax(u))`, recorded on the tape.
pub fn relax_mask(tape: &mut Tape, u: Var) -> Result<Var> {
    let p = tape.softmax(u)?;
    tape.suffix_sum(p)
}

/// Plain-value version of [`relax_mask`]. `w[0]` is exactly 1 and every
/// entry is clamped to at most 1.
pub fn relax_mask_values(u: &[f64]) -> Vec<f64> {
    let mut p = vec![0.0; u.len()];
    kernels::softmax_slice(u, &mut p);
    let mut w = kernels::suffix_sum(&p);
    for v in w.iter_mut() {
        *v = v.min(1.0);
    }
    if let Some(first) = w.first_mut() {
        *first = 1.0;
    }
    w
}

/// Threshold and binary mask derived from a relaxed mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Binarized {
    pub threshold: f64,
    pub mask: Vec<bool>,
}

impl Binarized {
    /// Number of retained channels.
    pub fn kept(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// `t = mean(w)`, `m_i = [w_i >= t]`.
pub fn binarize_mask(w: &[f64]) -> Binarized {
    let threshold = kernels::sum(w) / w.len() as f64;
    Binarized {
        threshold,
        mask: w.iter().map(|&v| v >= threshold).collect(),
    }
}

/// `sum_k softmax(u)_k * k` (1-based `k`), recorded on the tape.
pub fn soft_channel_count(tape: &mut Tape, u: Var) -> Result<Var> {
    let c = tape.shape(u).iter().product::<usize>();
    let p = tape.softmax(u)?;
    let ranks = tape.constant(Tensor::vector((1..=c).map(|k| k as f64).collect()));
    let weighted = tape.mul(p, ranks)?;
    tape.sum(weighted)
}

pub fn soft_channel_count_value(u: &[f64]) -> f64 {
    let mut p = vec![0.0; u.len()];
    kernels::softmax_slice(u, &mut p);
    let weighted: Vec<f64> = p.iter().enumerate().map(|(k, &pk)| pk * (k + 1) as f64).collect();
    kernels::sum(&weighted)
}

/// Mask state of one dependency group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMask {
    pub id: String,
    channels: usize,
    fixed: bool,
    logits: Vec<f64>,
    #[serde(skip)]
    cache: MaskCache,
}

#[derive(Debug, Clone, PartialEq, Default)]
struct MaskCache {
    w: Vec<f64>,
    threshold: f64,
    kept: usize,
    forced: bool,
}

impl GroupMask {
    /// A group with zero logits (uniform prefix distribution), refreshed.
    pub fn new(id: impl Into<String>, channels: usize, fixed: bool) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Contract("a group needs at least one channel".into()));
        }
        let mut g = GroupMask {
            id: id.into(),
            channels,
            fixed,
            logits: vec![0.0; channels],
            cache: MaskCache::default(),
        };
        g.refresh();
        Ok(g)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn is_fixed(&self) -> bool {
        self.fixed
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    /// Replaces the logits and refreshes the cached mask.
    pub fn set_logits(&mut self, logits: Vec<f64>) -> Result<()> {
        if logits.len() != self.channels {
            return Err(Error::shape(
                "group_mask",
                format!("{} logits for {} channels", logits.len(), self.channels),
            ));
        }
        self.logits = logits;
        self.cache.forced = false;
        self.refresh();
        Ok(())
    }

    pub(crate) fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    /// Recomputes `w`, `t` and the binary mask from the current logits.
    /// Has no effect on fixed groups or while a forced mask is active.
    pub fn refresh(&mut self) {
        if self.cache.forced {
            return;
        }
        if self.fixed {
            self.cache = MaskCache {
                w: vec![1.0; self.channels],
                threshold: 1.0,
                kept: self.channels,
                forced: false,
            };
            return;
        }
        let w = relax_mask_values(&self.logits);
        let b = binarize_mask(&w);
        self.cache = MaskCache {
            kept: b.kept(),
            threshold: b.threshold,
            w,
            forced: false,
        };
    }

    /// Pins `w` to the binary prefix `[1; kept] ++ [0; C - kept]` until the
    /// logits are next replaced or [`GroupMask::release`] is called.
    pub fn force_binary_prefix(&mut self, kept: usize) -> Result<()> {
        if kept == 0 || kept > self.channels {
            return Err(Error::Contract(format!(
                "prefix length {kept} outside 1..={}",
                self.channels
            )));
        }
        let w: Vec<f64> = (0..self.channels).map(|i| if i < kept { 1.0 } else { 0.0 }).collect();
        self.cache = MaskCache {
            threshold: binarize_mask(&w).threshold,
            w,
            kept,
            forced: true,
        };
        Ok(())
    }

    pub fn release(&mut self) {
        self.cache.forced = false;
        self.refresh();
    }

    pub fn is_forced(&self) -> bool {
        self.cache.forced
    }

    /// Cached relaxed mask `w`.
    pub fn w(&self) -> &[f64] {
        &self.cache.w
    }

    pub fn threshold(&self) -> f64 {
        self.cache.threshold
    }

    /// Number of channels retained by the binary mask.
    pub fn kept(&self) -> usize {
        self.cache.kept
    }

    pub fn binary_mask(&self) -> Vec<bool> {
        (0..self.channels).map(|i| i < self.cache.kept).collect()
    }

    /// Differentiable channel count; the constant `C` for fixed groups.
    pub fn soft_count_value(&self) -> f64 {
        if self.fixed {
            self.channels as f64
        } else if self.cache.forced {
            self.cache.kept as f64
        } else {
            soft_channel_count_value(&self.logits)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use proptest::prelude::*;

    // Reference values for u = [1.0, 0.5, 0.0, -0.5], evaluated at 40 digits
    // with mpmath (softmax, suffix sums, mean, sum_k k p_k).
    const REF_U: [f64; 4] = [1.0, 0.5, 0.0, -0.5];
    const REF_W: [f64; 4] = [1.0, 0.5449457660765887, 0.2689414213699951, 0.1015363240915518];
    const REF_T: f64 = 0.47885587788453393;
    const REF_SOFT_COUNT: f64 = 1.9154235115381357;

    #[test]
    fn uniform_logits() {
        assert_eq!(relax_mask_values(&[0.0; 4]), vec![1.0, 0.75, 0.5, 0.25]);
        let b = binarize_mask(&[1.0, 0.75, 0.5, 0.25]);
        assert_eq!(b.threshold, 0.625);
        assert_eq!(b.mask, vec![true, true, false, false]);
        assert_eq!(soft_channel_count_value(&[0.0; 4]), 2.5);
    }

    #[test]
    fn near_one_hot_logits() {
        let w = relax_mask_values(&[20.0, 0.0, 0.0, 0.0]);
        for (a, b) in w.iter().zip([1.0, 0.0, 0.0, 0.0]) {
            assert!((a - b).abs() < 1e-6);
        }
        let b = binarize_mask(&[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(b.threshold, 0.25);
        assert_eq!(b.mask, vec![true, false, false, false]);

        let one_hot_3 = soft_channel_count_value(&[0.0, 0.0, 60.0, 0.0]);
        assert!((one_hot_3 - 3.0).abs() < 1e-12);
    }

    #[test]
    fn reference_logits() {
        let w = relax_mask_values(&REF_U);
        for (a, b) in w.iter().zip(REF_W) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
        let b = binarize_mask(&w);
        assert!((b.threshold - REF_T).abs() < 1e-15);
        assert_eq!(b.kept(), 2);
        assert!((soft_channel_count_value(&REF_U) - REF_SOFT_COUNT).abs() < 1e-14);

        let mut tape = Tape::new();
        let u = tape.leaf(Tensor::vector(REF_U.to_vec()));
        let wv = relax_mask(&mut tape, u).unwrap();
        for (a, b) in tape.value(wv).values().iter().zip(REF_W) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn soft_count_and_relaxation_gradients_match_fd() {
        let u = Tensor::vector(vec![0.3, -1.2, 0.8, 0.05, 2.0]);
        let r = grad_check(soft_channel_count, &u, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-6, "{}", r.max_rel_error);

        let weights = Tensor::vector(vec![0.7, -0.4, 1.3, 2.2, -0.9]);
        let f = |t: &mut Tape, u: Var| {
            let w = relax_mask(t, u)?;
            let c = t.constant(weights.clone());
            let y = t.mul(w, c)?;
            t.sum(y)
        };
        let r = grad_check(f, &u, 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-6, "{}", r.max_rel_error);
    }

    #[test]
    fn fixed_group_is_full() {
        let g = GroupMask::new("in", 3, true).unwrap();
        assert_eq!(g.w(), &[1.0; 3]);
        assert_eq!(g.kept(), 3);
        assert_eq!(g.soft_count_value(), 3.0);
    }

    #[test]
    fn forced_prefix_survives_refresh() {
        let mut g = GroupMask::new("h", 4, false).unwrap();
        g.force_binary_prefix(3).unwrap();
        g.refresh();
        assert_eq!(g.w(), &[1.0, 1.0, 1.0, 0.0]);
        assert_eq!(g.kept(), 3);
        assert!(g.force_binary_prefix(0).is_err());
        g.release();
        assert_eq!(g.kept(), 2);
    }

    #[test]
    fn soft_and_hard_counts_converge_on_sharp_logits() {
        for k in 1..=6 {
            let mut u = vec![0.0; 6];
            u[k - 1] = 40.0;
            let w = relax_mask_values(&u);
            assert_eq!(binarize_mask(&w).kept(), k);
            assert!((soft_channel_count_value(&u) - k as f64).abs() < 1e-12);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn relaxed_mask_structure(u in prop::collection::vec(-8.0f64..8.0, 1..24)) {
            let w = relax_mask_values(&u);
            prop_assert_eq!(w[0], 1.0);
            for pair in w.windows(2) {
                prop_assert!(pair[1] <= pair[0]);
            }
            for &v in &w {
                prop_assert!(v > 0.0 && v <= 1.0);
            }
            let b = binarize_mask(&w);
            prop_assert!(b.threshold > 0.0 && b.threshold <= 1.0);
            let kept = b.kept();
            prop_assert!(kept >= 1);
            prop_assert!(b.mask[..kept].iter().all(|&m| m));
            prop_assert!(b.mask[kept..].iter().all(|&m| !m));
            let soft = soft_channel_count_value(&u);
            prop_assert!(soft >= 1.0 - 1e-12 && soft <= u.len() as f64 + 1e-12);
        }
    }
}
