//! Norm-based balancing of the mask-logit gradients.
//!
//! The two performance gradients (task loss and gap) are each normalized to
//! unit length, summed, and the sum is rescaled to the length of the
//! resource gradient; `rho * g_R` is then added. This keeps the resource
//! term in charge of how far the masks move while the performance terms
//! decide the direction among budget-neutral moves.

use crate::autodiff::kernels;

use super::config::{BalanceReference, NormScope};

fn view(v: &[Vec<f64>]) -> Vec<&[f64]> {
    v.iter().map(Vec::as_slice).collect()
}

fn norm(groups: &[&[f64]]) -> f64 {
    let sq: Vec<f64> = groups.iter().flat_map(|g| g.iter().map(|v| v * v)).collect();
    kernels::sum(&sq).sqrt()
}

fn combine(g_l: &[&[f64]], g_g: &[&[f64]], g_r: &[&[f64]], rho: f64, reference: BalanceReference) -> Vec<Vec<f64>> {
    let (nl, ng, nr) = (norm(g_l), norm(g_g), norm(g_r));
    let inv = |n: f64| if n > 0.0 { 1.0 / n } else { 0.0 };
    let (sl, sg) = (inv(nl), inv(ng));
    let target = match reference {
        BalanceReference::Raw => nr,
        BalanceReference::Scaled => rho * nr,
    };
    let mut perf: Vec<Vec<f64>> = g_l
        .iter()
        .zip(g_g)
        .map(|(l, g)| l.iter().zip(g.iter()).map(|(&a, &b)| a * sl + b * sg).collect())
        .collect();
    if target > 0.0 {
        let refs: Vec<&[f64]> = perf.iter().map(Vec::as_slice).collect();
        let np = norm(&refs);
        if np > 0.0 {
            let k = target / np;
            perf.iter_mut().flatten().for_each(|v| *v *= k);
        }
    }
    perf.iter_mut()
        .zip(g_r)
        .for_each(|(p, r)| p.iter_mut().zip(r.iter()).for_each(|(a, &b)| *a += rho * b));
    perf
}

/// Balanced mask gradient, one vector per prunable group.
///
/// A zero-norm performance term contributes nothing; when `g_R` has zero
/// norm the normalized performance sum is used as is.
pub fn balance_mask_gradients(
    g_l: &[Vec<f64>],
    g_g: &[Vec<f64>],
    g_r: &[Vec<f64>],
    rho: f64,
    reference: BalanceReference,
    scope: NormScope,
) -> Vec<Vec<f64>> {
    assert!(g_l.len() == g_g.len() && g_l.len() == g_r.len(), "balance: group count mismatch");
    match scope {
        NormScope::Global => combine(&view(g_l), &view(g_g), &view(g_r), rho, reference),
        NormScope::PerGroup => (0..g_l.len())
            .flat_map(|i| combine(&[&g_l[i]], &[&g_g[i]], &[&g_r[i]], rho, reference))
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bal(l: &[f64], g: &[f64], r: &[f64]) -> Vec<f64> {
        balance_mask_gradients(
            &[l.to_vec()],
            &[g.to_vec()],
            &[r.to_vec()],
            5.0,
            BalanceReference::Raw,
            NormScope::Global,
        )
        .remove(0)
    }

    #[test]
    fn hand_example() {
        // (unit(3,0) + unit(0,4)) = (1,1), scaled to |g_R| = 1 gives
        // (1/sqrt2, 1/sqrt2); plus 5 * (0.6, 0.8) = (3, 4).
        let out = bal(&[3.0, 0.0], &[0.0, 4.0], &[0.6, 0.8]);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!((out[0] - (h + 3.0)).abs() < 1e-15);
        assert!((out[1] - (h + 4.0)).abs() < 1e-15);
        assert!((out[0] - 3.7071).abs() < 1e-4 && (out[1] - 4.7071).abs() < 1e-4);
    }

    #[test]
    fn degenerate_norms() {
        // Zero gap gradient: |g_R| * unit(g_L) + 5 g_R.
        let out = bal(&[0.0, 2.0], &[0.0, 0.0], &[0.0, 0.5]);
        assert_eq!(out, vec![0.0, 0.5 + 2.5]);
        // Zero resource gradient: unscaled normalized sum.
        let out = bal(&[3.0, 0.0], &[0.0, 4.0], &[0.0, 0.0]);
        assert_eq!(out, vec![1.0, 1.0]);
        // Everything zero.
        assert_eq!(bal(&[0.0], &[0.0], &[0.0]), vec![0.0]);
    }

    #[test]
    fn scaled_reference_and_per_group() {
        let out = balance_mask_gradients(
            &[vec![3.0, 0.0]],
            &[vec![0.0, 4.0]],
            &[vec![0.6, 0.8]],
            5.0,
            BalanceReference::Scaled,
            NormScope::Global,
        );
        let h = 5.0 * std::f64::consts::FRAC_1_SQRT_2;
        assert!((out[0][0] - (h + 3.0)).abs() < 1e-14);

        let l = vec![vec![1.0], vec![0.0, 2.0]];
        let g = vec![vec![0.0], vec![0.0, 0.0]];
        let r = vec![vec![0.1], vec![0.0, 3.0]];
        let out = balance_mask_gradients(&l, &g, &r, 1.0, BalanceReference::Raw, NormScope::PerGroup);
        assert_eq!(out, vec![vec![0.1 + 0.1], vec![0.0, 3.0 + 3.0]]);
    }

    proptest! {
        #[test]
        fn performance_part_has_resource_norm(
            l in prop::collection::vec(-3.0f64..3.0, 6),
            g in prop::collection::vec(-3.0f64..3.0, 6),
            r in prop::collection::vec(-3.0f64..3.0, 6),
        ) {
            let (nl, ng, nr) = (norm(&[&l]), norm(&[&g]), norm(&[&r]));
            prop_assume!(nl > 1e-3 && ng > 1e-3 && nr > 1e-3);
            // Skip near-cancelling unit vectors.
            let sum: Vec<f64> = l.iter().zip(&g).map(|(a, b)| a / nl + b / ng).collect();
            prop_assume!(norm(&[&sum]) > 1e-6);
            let out = bal(&l, &g, &r);
            let perf: Vec<f64> = out.iter().zip(&r).map(|(o, r)| o - 5.0 * r).collect();
            prop_assert!((norm(&[&perf]) - nr).abs() < 1e-12 * nr.max(1.0));
        }
    }
}
