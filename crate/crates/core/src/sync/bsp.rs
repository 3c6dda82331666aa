use super::{check_grad_len, Aggregation, NodeState};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Errors when any replica's distance from node 0 exceeds `1e-5 * ||w||`.
pub fn check_replicas<T: Scalar>(nodes: &[NodeState<T>]) -> Result<()> {
    let Some(first) = nodes.first() else { return Ok(()) };
    let w0 = first.w();
    let norm = w0.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt();
    for node in &nodes[1..] {
        let d = node.w().iter().zip(w0).map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2)).sum::<f64>().sqrt();
        if d > 1e-5 * norm {
            return Err(Error::ReplicaDivergence(format!("node {} is {d:.3e} from node 0 (|w| = {norm:.3e})", node.id)));
        }
    }
    Ok(())
}

/// Every node takes a momentum step on its gradient; the sum (or mean) of
/// the resulting updates is added to every replica.
pub fn bsp_round<T: Scalar>(nodes: &mut [NodeState<T>], grads: &[Vec<T>], aggregation: Aggregation) -> Result<()> {
    if grads.len() != nodes.len() {
        return Err(Error::Shape(format!("{} gradients for {} nodes", grads.len(), nodes.len())));
    }
    check_replicas(nodes)?;
    let m = nodes.first().map_or(0, |n| n.num_params());
    let mut aggregate = vec![T::zero(); m];
    for (node, g) in nodes.iter_mut().zip(grads) {
        check_grad_len(node, g)?;
        let u = node.opt.sgd_momentum_step(g)?;
        aggregate.iter_mut().zip(u).for_each(|(a, &u)| *a = *a + u);
    }
    if aggregation == Aggregation::Mean {
        let inv = T::one() / T::of_usize(nodes.len());
        aggregate.iter_mut().for_each(|a| *a = *a * inv);
    }
    let k = nodes.len() as u64;
    for node in nodes.iter_mut() {
        node.w_mut().iter_mut().zip(&aggregate).for_each(|(w, &a)| *w = *w + a);
        node.ledger.values_sent += m as u64;
        node.ledger.values_received += if k > 1 { m as u64 } else { 0 };
        node.ledger.rounds += 1;
    }
    check_replicas(nodes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sync::test_util::tiny;

    #[test]
    fn mean_mode_adds_average() {
        let mut nodes = tiny(2, &[0.0, 0.0], 0.0, 1.0);
        bsp_round(&mut nodes, &[vec![-1.0, -3.0], vec![-3.0, -1.0]], Aggregation::Mean).unwrap();
        for n in &nodes {
            assert_eq!(n.w(), &[2.0, 2.0]);
            assert_eq!(n.ledger.values_sent, 2);
        }
    }

    #[test]
    fn sum_is_k_times_mean() {
        let g = vec![vec![0.5, -0.25], vec![1.0, 2.0], vec![-0.75, 0.125]];
        let mut a = tiny(3, &[0.0, 0.0], 0.9, 0.1);
        let mut b = a.clone();
        bsp_round(&mut a, &g, Aggregation::Sum).unwrap();
        bsp_round(&mut b, &g, Aggregation::Mean).unwrap();
        for j in 0..2 {
            assert!((a[0].w()[j] - 3.0 * b[0].w()[j]).abs() < 1e-15);
        }
    }

    #[test]
    fn single_node_is_plain_sgd() {
        let mut nodes = tiny(1, &[1.0, 1.0], 0.5, 0.1);
        bsp_round(&mut nodes, &[vec![1.0, -1.0]], Aggregation::Sum).unwrap();
        bsp_round(&mut nodes, &[vec![1.0, -1.0]], Aggregation::Sum).unwrap();
        // u1 = -0.1, u2 = 0.5 * -0.1 - 0.1 = -0.15
        assert!((nodes[0].w()[0] - 0.75).abs() < 1e-12);
        assert!((nodes[0].w()[1] - 1.25).abs() < 1e-12);
    }

    #[test]
    fn diverged_replicas_are_rejected() {
        let mut nodes = tiny(2, &[1.0, 1.0], 0.0, 0.1);
        nodes[1].w_mut()[0] = 1.1;
        let err = bsp_round(&mut nodes, &[vec![0.0; 2], vec![0.0; 2]], Aggregation::Sum).unwrap_err();
        assert!(matches!(err, Error::ReplicaDivergence(_)));
    }
}
