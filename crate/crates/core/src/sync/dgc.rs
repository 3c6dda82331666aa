use std::cmp::Ordering;

use super::{check_grad_len, NodeState, SparseUpdate};
use crate::error::Result;
use crate::scalar::Scalar;

pub const SPARSITY_STAGES: [f64; 5] = [0.75, 0.9375, 0.984375, 0.996, 0.999];

/// Warm-up sparsity for a 1-based epoch.
pub fn dgc_sparsity(epoch: usize, e_warm: usize) -> f64 {
    let stage = (epoch.max(1) - 1) / e_warm.max(1);
    SPARSITY_STAGES[stage.min(SPARSITY_STAGES.len() - 1)]
}

/// Entries sent at sparsity `s`: `ceil((1 - s) * m)`, at least one.
pub fn top_k_count(s: f64, m: usize) -> usize {
    let k = ((1.0 - s) * m as f64 - 1e-9).ceil().max(1.0) as usize;
    k.min(m)
}

/// Ascending indices of the `k` largest `|v|`, ties to the lower index.
pub fn select_top_k<T: Scalar>(v: &[T], k: usize) -> Vec<u32> {
    let k = k.min(v.len());
    if k == 0 {
        return Vec::new();
    }
    let mut idx: Vec<u32> = (0..v.len() as u32).collect();
    let order = |a: &u32, b: &u32| -> Ordering {
        let (x, y) = (v[*a as usize].abs(), v[*b as usize].abs());
        y.partial_cmp(&x).unwrap_or(Ordering::Equal).then(a.cmp(b))
    };
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, order);
        idx.truncate(k);
    }
    idx.sort_unstable();
    idx
}

/// Clips the raw gradient to `clip_norm`, then `u <- m*u - eta*g`, `v += u`.
pub fn dgc_local_update<T: Scalar>(node: &mut NodeState<T>, grad: &[T], clip_norm: Option<f64>) -> Result<()> {
    check_grad_len(node, grad)?;
    let norm = grad.iter().map(|g| g.as_f64().powi(2)).sum::<f64>().sqrt();
    match clip_norm {
        Some(c) if norm > c => {
            let scale = T::from_f64_lossy(c / norm);
            let clipped: Vec<T> = grad.iter().map(|&g| g * scale).collect();
            node.opt.sgd_momentum_step(&clipped)?;
        }
        _ => {
            node.opt.sgd_momentum_step(grad)?;
        }
    }
    let NodeState { opt, v, .. } = node;
    v.iter_mut().zip(&opt.u).for_each(|(v, &u)| *v = *v + u);
    Ok(())
}

/// Sends the top `ceil((1 - s) * M)` entries of `v` and clears them in
/// both `v` and the momentum buffer.
pub fn dgc_step<T: Scalar>(node: &mut NodeState<T>, s: f64) -> SparseUpdate<T> {
    let indices = select_top_k(&node.v, top_k_count(s, node.v.len()));
    let values = indices.iter().map(|&i| node.v[i as usize]).collect();
    for &i in &indices {
        node.v[i as usize] = T::zero();
        node.opt.u[i as usize] = T::zero();
    }
    SparseUpdate { indices, values }
}

/// Adds the sum of all sends, in ascending node order, to every replica.
pub fn dgc_apply<T: Scalar>(nodes: &mut [NodeState<T>], sends: &[SparseUpdate<T>]) {
    let Some(m) = nodes.first().map(|n| n.num_params()) else { return };
    let mut aggregate = vec![T::zero(); m];
    for s in sends {
        s.add_to(&mut aggregate);
    }
    let recipients = nodes.len().saturating_sub(1) as u64;
    let received: u64 = sends.iter().map(|s| s.wire_values()).sum();
    for (node, s) in nodes.iter_mut().zip(sends) {
        node.w_mut().iter_mut().zip(&aggregate).for_each(|(w, &a)| *w = *w + a);
        node.ledger.values_sent += s.wire_values() * recipients;
        node.ledger.values_received += received - s.wire_values();
        node.ledger.rounds += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sync::test_util::tiny;
    use proptest::prelude::*;

    #[test]
    fn sparsity_schedule() {
        assert_eq!(dgc_sparsity(1, 4), 0.75);
        assert_eq!(dgc_sparsity(4, 4), 0.75);
        assert_eq!(dgc_sparsity(5, 4), 0.9375);
        assert_eq!(dgc_sparsity(100, 4), 0.999);
    }

    #[test]
    fn counts() {
        assert_eq!(top_k_count(0.75, 4), 1);
        assert_eq!(top_k_count(0.999, 4), 1);
        assert_eq!(top_k_count(0.0, 4), 4);
        assert_eq!(top_k_count(0.75, 1000), 250);
        assert_eq!(top_k_count(0.9375, 1000), 63);
    }

    #[test]
    fn sends_largest_and_clears_u() {
        let mut nodes = tiny(1, &[0.0; 4], 0.9, 0.1);
        nodes[0].v = vec![0.1, -0.5, 0.2, 0.05];
        nodes[0].opt.u = vec![1.0; 4];
        let s = dgc_step(&mut nodes[0], 0.75);
        assert_eq!(s.indices, vec![1]);
        assert_eq!(s.values, vec![-0.5]);
        assert_eq!(nodes[0].v, vec![0.1, 0.0, 0.2, 0.05]);
        assert_eq!(nodes[0].opt.u, vec![1.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn ties_go_to_lower_index() {
        assert_eq!(select_top_k(&[1.0f64, -2.0, 2.0, 2.0], 2), vec![1, 2]);
    }

    #[test]
    fn clipping_bounds_the_step() {
        let mut nodes = tiny(1, &[0.0, 0.0], 0.0, 1.0);
        dgc_local_update(&mut nodes[0], &[30.0, 40.0], Some(5.0)).unwrap();
        assert!((nodes[0].v[0] + 3.0).abs() < 1e-12 && (nodes[0].v[1] + 4.0).abs() < 1e-12);
    }

    #[test]
    fn apply_updates_all_replicas_and_ledger() {
        let mut nodes = tiny(3, &[0.0; 4], 0.0, 1.0);
        let sends = vec![
            SparseUpdate { indices: vec![0], values: vec![1.0] },
            SparseUpdate { indices: vec![0, 3], values: vec![1.0, -1.0] },
            SparseUpdate::default(),
        ];
        dgc_apply(&mut nodes, &sends);
        for n in &nodes {
            assert_eq!(n.w(), &[2.0, 0.0, 0.0, -1.0]);
        }
        assert_eq!(nodes[1].ledger.values_sent, 2 * 2 * 2);
        assert_eq!(nodes[2].ledger.values_received, 6);
    }

    proptest! {
        #[test]
        fn conservation_with_u_clearing(seed in 0u64..300, s in 0.0f64..0.99) {
            let mut nodes = tiny(1, &[0.0; 6], 0.9, 0.1);
            let mut accumulated = vec![0.0; 6];
            let mut sent = vec![0.0; 6];
            for step in 0..25u64 {
                let g: Vec<f64> = (0..6).map(|j| ((seed * 3 + step * 7 + j) as f64).sin()).collect();
                dgc_local_update(&mut nodes[0], &g, None).unwrap();
                accumulated.iter_mut().zip(&nodes[0].opt.u).for_each(|(a, &u)| *a += u);
                let out = dgc_step(&mut nodes[0], s);
                out.add_to(&mut sent);
                for j in 0..6 {
                    let rhs = sent[j] + nodes[0].v[j];
                    prop_assert!((accumulated[j] - rhs).abs() <= 1e-12 * accumulated[j].abs().max(1.0));
                }
            }
        }
    }
}
