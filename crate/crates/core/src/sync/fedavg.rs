use super::{check_grad_len, NodeState};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// One local momentum-SGD step: `w += u`. The buffer persists across rounds.
pub fn fedavg_local_step<T: Scalar>(node: &mut NodeState<T>, grad: &[T]) -> Result<()> {
    check_grad_len(node, grad)?;
    let u = node.opt.sgd_momentum_step(grad)?.to_vec();
    node.w_mut().iter_mut().zip(&u).for_each(|(w, &u)| *w = *w + u);
    Ok(())
}

/// Server step: averages weights (and batch-norm running statistics) over
/// all nodes and broadcasts the result. `weights` switches to a weighted
/// mean, e.g. by partition size.
pub fn fedavg_average<T: Scalar>(nodes: &mut [NodeState<T>], weights: Option<&[f64]>) -> Result<()> {
    let k = nodes.len();
    if k == 0 {
        return Ok(());
    }
    let coef: Vec<T> = match weights {
        None => vec![T::one() / T::of_usize(k); k],
        Some(ws) => {
            let total: f64 = ws.iter().sum();
            if ws.len() != k || !(total > 0.0) {
                return Err(Error::Config(format!("{} averaging weights for {k} nodes", ws.len())));
            }
            ws.iter().map(|w| T::from_f64_lossy(w / total)).collect()
        }
    };
    let uniform = weights.is_none();
    let combine = |vals: &mut dyn Iterator<Item = T>| -> T {
        if uniform {
            let s = vals.fold(T::zero(), |a, v| a + v);
            s * coef[0]
        } else {
            vals.zip(&coef).fold(T::zero(), |a, (v, &c)| a + c * v)
        }
    };
    let m = nodes[0].num_params();
    let avg: Vec<T> = (0..m).map(|j| combine(&mut nodes.iter().map(|n| n.w()[j]))).collect();
    let mut running = nodes[0].model.running.clone();
    for (slot, rs) in running.iter_mut().enumerate() {
        for c in 0..rs.mean.len() {
            rs.mean[c] = combine(&mut nodes.iter().map(|n| n.model.running[slot].mean[c]));
            rs.var[c] = combine(&mut nodes.iter().map(|n| n.model.running[slot].var[c]));
        }
    }
    for node in nodes.iter_mut() {
        node.w_mut().copy_from_slice(&avg);
        node.model.running.clone_from(&running);
        node.ledger.values_sent += m as u64;
        node.ledger.values_received += m as u64;
        node.ledger.rounds += 1;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sync::test_util::tiny;
    use crate::sync::{bsp_round, Aggregation};

    #[test]
    fn averages_two_nodes() {
        let mut nodes = tiny(2, &[0.0, 0.0], 0.0, 1.0);
        nodes[0].w_mut().copy_from_slice(&[1.0, 3.0]);
        nodes[1].w_mut().copy_from_slice(&[3.0, 1.0]);
        fedavg_average(&mut nodes, None).unwrap();
        assert_eq!(nodes[0].w(), &[2.0, 2.0]);
        assert_eq!(nodes[1].w(), &[2.0, 2.0]);
        assert_eq!(nodes[0].ledger.values_sent, 2);
        assert_eq!(nodes[0].ledger.values_received, 2);
    }

    #[test]
    fn weighted_mean() {
        let mut nodes = tiny(2, &[0.0, 0.0], 0.0, 1.0);
        nodes[0].w_mut().copy_from_slice(&[4.0, 0.0]);
        fedavg_average(&mut nodes, Some(&[3.0, 1.0])).unwrap();
        assert_eq!(nodes[1].w(), &[3.0, 0.0]);
        assert!(fedavg_average(&mut nodes, Some(&[1.0])).is_err());
    }

    #[test]
    fn one_local_step_matches_bsp_mean() {
        let w0 = [0.1, 0.2, -0.3];
        let mut fed = tiny(4, &w0, 0.9, 0.1);
        let mut bsp = fed.clone();
        for step in 0..100 {
            let grads: Vec<Vec<f64>> =
                (0..4).map(|k| (0..3).map(|j| ((step * 11 + k * 2 + j) as f64 * 0.3).sin()).collect()).collect();
            bsp_round(&mut bsp, &grads, Aggregation::Mean).unwrap();
            for (n, g) in fed.iter_mut().zip(&grads) {
                fedavg_local_step(n, g).unwrap();
            }
            fedavg_average(&mut fed, None).unwrap();
            for j in 0..3 {
                let (a, b) = (fed[0].w()[j], bsp[0].w()[j]);
                assert!((a - b).abs() <= 1e-9 * b.abs().max(1e-3));
            }
        }
    }
}
