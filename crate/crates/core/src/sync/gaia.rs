use super::{check_grad_len, NodeState, SparseUpdate};
use crate::error::Result;
use crate::scalar::Scalar;

/// Threshold proportional to the learning rate, floored at `t_min`.
pub fn gaia_threshold(t0: f64, eta_t: f64, eta0: f64, t_min: f64) -> f64 {
    let scaled = if eta0 > 0.0 { t0 * (eta_t / eta0) } else { t0 };
    scaled.max(t_min)
}

/// Local momentum step: `w += u`, `v += u`.
pub fn gaia_local_update<T: Scalar>(node: &mut NodeState<T>, grad: &[T]) -> Result<()> {
    check_grad_len(node, grad)?;
    node.opt.sgd_momentum_step(grad)?;
    let NodeState { model, opt, v, .. } = node;
    for ((w, vj), &u) in model.params.as_mut_slice().iter_mut().zip(v.iter_mut()).zip(&opt.u) {
        *w = *w + u;
        *vj = *vj + u;
    }
    Ok(())
}

/// Extracts entries with `|v_j / w_j| > threshold` (zero weights always
/// qualify when `v_j != 0`) and clears them from `v`.
pub fn gaia_step<T: Scalar>(node: &mut NodeState<T>, threshold: f64) -> SparseUpdate<T> {
    let mut out = SparseUpdate::default();
    let t = T::from_f64_lossy(threshold);
    let NodeState { model, v, .. } = node;
    for (j, (vj, &w)) in v.iter_mut().zip(model.params.as_slice()).enumerate() {
        if *vj == T::zero() {
            continue;
        }
        let significant = w == T::zero() || (*vj / w).abs() > t;
        if significant {
            out.indices.push(j as u32);
            out.values.push(*vj);
            *vj = T::zero();
        }
    }
    out
}

/// Exchange phase. `base` is the shared sum of every update sent so far;
/// each replica is rebuilt as `base + v_k`, which equals its weights plus
/// all other nodes' sends. Sends are accumulated in ascending node order.
pub fn gaia_apply<T: Scalar>(nodes: &mut [NodeState<T>], base: &mut [T], sends: &[SparseUpdate<T>]) {
    let recipients = nodes.len().saturating_sub(1) as u64;
    for s in sends {
        s.add_to(base);
    }
    let received: u64 = sends.iter().map(|s| s.wire_values()).sum();
    for (node, s) in nodes.iter_mut().zip(sends) {
        let NodeState { model, v, ledger, .. } = node;
        for ((w, &b), &vj) in model.params.as_mut_slice().iter_mut().zip(base.iter()).zip(v.iter()) {
            *w = b + vj;
        }
        ledger.values_sent += s.wire_values() * recipients;
        ledger.values_received += received - s.wire_values();
        ledger.rounds += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sync::test_util::tiny;
    use crate::sync::{bsp_round, Aggregation};
    use proptest::prelude::*;

    #[test]
    fn threshold_examples() {
        assert!((gaia_threshold(0.10, 0.01, 0.1, 0.001) - 0.01).abs() < 1e-15);
        assert_eq!(gaia_threshold(0.10, 0.1, 0.1, 0.01), 0.10);
        assert_eq!(gaia_threshold(0.10, 0.001, 0.1, 0.01), 0.01);
    }

    #[test]
    fn selects_significant_entries() {
        let mut nodes = tiny(1, &[1.0, -2.0], 0.0, 0.1);
        nodes[0].v = vec![0.05, 0.5];
        let s = gaia_step(&mut nodes[0], 0.10);
        assert_eq!(s.indices, vec![1]);
        assert_eq!(s.values, vec![0.5]);
        assert_eq!(nodes[0].v, vec![0.05, 0.0]);
    }

    #[test]
    fn zero_weight_is_always_significant() {
        let mut nodes = tiny(1, &[0.0, 5.0], 0.0, 0.1);
        nodes[0].v = vec![1e-12, 1e-12];
        let s = gaia_step(&mut nodes[0], 0.5);
        assert_eq!(s.indices, vec![0]);
    }

    #[test]
    fn zero_threshold_matches_bsp_sum() {
        let w0 = [0.3, -0.2, 0.7];
        let mut gaia = tiny(3, &w0, 0.9, 0.05);
        let mut bsp = gaia.clone();
        let mut base = w0.to_vec();
        for step in 0..50 {
            let grads: Vec<Vec<f64>> =
                (0..3).map(|k| (0..3).map(|j| ((step * 7 + k * 3 + j) as f64).sin()).collect()).collect();
            bsp_round(&mut bsp, &grads, Aggregation::Sum).unwrap();
            for (n, g) in gaia.iter_mut().zip(&grads) {
                gaia_local_update(n, g).unwrap();
            }
            let sends: Vec<_> = gaia.iter_mut().map(|n| gaia_step(n, 0.0)).collect();
            gaia_apply(&mut gaia, &mut base, &sends);
            for n in &gaia {
                assert_eq!(n.w(), gaia[0].w());
                for j in 0..3 {
                    assert!((n.w()[j] - bsp[0].w()[j]).abs() <= 1e-9 * bsp[0].w()[j].abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn ledger_counts_index_and_value_per_recipient() {
        let mut nodes = tiny(3, &[1.0, 1.0], 0.0, 1.0);
        let mut base = vec![1.0, 1.0];
        nodes[0].v = vec![0.5, 0.0];
        nodes[1].v = vec![0.5, 0.5];
        let sends: Vec<_> = nodes.iter_mut().map(|n| gaia_step(n, 0.1)).collect();
        gaia_apply(&mut nodes, &mut base, &sends);
        assert_eq!(nodes[0].ledger.values_sent, 2 * 1 * 2);
        assert_eq!(nodes[1].ledger.values_sent, 2 * 2 * 2);
        assert_eq!(nodes[2].ledger.values_received, 6);
        assert_eq!(nodes[2].w(), &[2.0, 1.5]);
    }

    proptest! {
        #[test]
        fn conservation(seed in 0u64..500, t in 0.0f64..0.5) {
            let mut nodes = tiny(2, &[0.4, -0.3, 0.0, 1.0], 0.5, 0.1);
            let mut base = nodes[0].w().to_vec();
            let mut generated = vec![vec![0.0; 4]; 2];
            let mut sent = vec![vec![0.0; 4]; 2];
            for step in 0..30u64 {
                for (k, node) in nodes.iter_mut().enumerate() {
                    let g: Vec<f64> = (0..4).map(|j| ((seed + step * 13 + k as u64 * 5 + j) as f64 * 0.7).cos()).collect();
                    gaia_local_update(node, &g).unwrap();
                    generated[k].iter_mut().zip(&node.opt.u).for_each(|(a, &u)| *a += u);
                }
                let sends: Vec<_> = nodes.iter_mut().map(|n| gaia_step(n, t)).collect();
                for (k, s) in sends.iter().enumerate() {
                    s.add_to(&mut sent[k]);
                }
                gaia_apply(&mut nodes, &mut base, &sends);
                for k in 0..2 {
                    for j in 0..4 {
                        let lhs = generated[k][j];
                        let rhs = sent[k][j] + nodes[k].v[j];
                        prop_assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0));
                    }
                }
            }
        }
    }
}
