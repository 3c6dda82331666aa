//! Synchronization strategies over flat parameter vectors, with exact
//! communication accounting.

mod bsp;
mod dgc;
mod fedavg;
mod gaia;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::nn::{Model, OptState};
use crate::scalar::Scalar;

pub use bsp::{bsp_round, check_replicas};
pub use dgc::{dgc_apply, dgc_local_update, dgc_sparsity, dgc_step, select_top_k, top_k_count, SPARSITY_STAGES};
pub use fedavg::{fedavg_average, fedavg_local_step};
pub use gaia::{gaia_apply, gaia_local_update, gaia_step, gaia_threshold};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algo {
    #[default]
    Bsp,
    Gaia,
    Fedavg,
    Dgc,
}

impl Algo {
    pub fn name(self) -> &'static str {
        match self {
            Algo::Bsp => "bsp",
            Algo::Gaia => "gaia",
            Algo::Fedavg => "fedavg",
            Algo::Dgc => "dgc",
        }
    }
}

impl std::str::FromStr for Algo {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bsp" => Ok(Algo::Bsp),
            "gaia" => Ok(Algo::Gaia),
            "fedavg" => Ok(Algo::Fedavg),
            "dgc" => Ok(Algo::Dgc),
            other => Err(Error::Config(format!("unknown algorithm {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Sum,
    Mean,
}

/// Algorithm selector and its knobs. Only the selected algorithm's fields
/// are read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyncConfig {
    pub algo: Algo,
    pub bsp_aggregation: Aggregation,
    pub t0: f64,
    pub t_min: f64,
    pub iter_local: usize,
    /// Weight the FedAvg mean by partition sample counts.
    pub fedavg_weighted: bool,
    pub e_warm: usize,
    /// `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Overrides the warm-up schedule with a constant sparsity.
    pub fixed_sparsity: Option<f64>,
}

impl Default for SyncConfig {
    fn default() -> Self {
        SyncConfig {
            algo: Algo::Bsp,
            bsp_aggregation: Aggregation::Sum,
            t0: 0.10,
            t_min: 0.01,
            iter_local: 20,
            fedavg_weighted: false,
            e_warm: 4,
            clip_norm: Some(5.0),
            fixed_sparsity: None,
        }
    }
}

impl SyncConfig {
    pub fn bsp() -> Self {
        SyncConfig::default()
    }

    pub fn gaia(t0: f64) -> Self {
        SyncConfig { algo: Algo::Gaia, t0, ..Default::default() }
    }

    pub fn fedavg(iter_local: usize) -> Self {
        SyncConfig { algo: Algo::Fedavg, iter_local, ..Default::default() }
    }

    pub fn dgc(e_warm: usize) -> Self {
        SyncConfig { algo: Algo::Dgc, e_warm, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        match self.algo {
            Algo::Bsp => {}
            Algo::Gaia => {
                if !(0.0..=1.0).contains(&self.t0) {
                    return Err(Error::Config(format!("T0 {} outside [0, 1]", self.t0)));
                }
                if !(self.t_min >= 0.0) {
                    return Err(Error::Config(format!("T_min {} must be non-negative", self.t_min)));
                }
            }
            Algo::Fedavg => {
                if self.iter_local == 0 {
                    return Err(Error::Config("Iter_Local must be at least 1".into()));
                }
            }
            Algo::Dgc => {
                if self.e_warm == 0 {
                    return Err(Error::Config("E_warm must be at least 1".into()));
                }
                if let Some(c) = self.clip_norm {
                    if !(c > 0.0) {
                        return Err(Error::Config(format!("clip norm {c} must be positive")));
                    }
                }
                if let Some(s) = self.fixed_sparsity {
                    if !(0.0..1.0).contains(&s) {
                        return Err(Error::Config(format!("sparsity {s} outside [0, 1)")));
                    }
                }
            }
        }
        Ok(())
    }

    /// The knob SkewScout tunes for this algorithm.
    pub fn theta(&self) -> f64 {
        match self.algo {
            Algo::Bsp => 0.0,
            Algo::Gaia => self.t0,
            Algo::Fedavg => self.iter_local as f64,
            Algo::Dgc => self.e_warm as f64,
        }
    }

    pub fn set_theta(&mut self, theta: f64) {
        match self.algo {
            Algo::Bsp => {}
            Algo::Gaia => self.t0 = theta,
            Algo::Fedavg => self.iter_local = theta.round().max(1.0) as usize,
            Algo::Dgc => self.e_warm = theta.round().max(1.0) as usize,
        }
    }
}

/// Scalar values moved over the simulated network.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommLedger {
    pub values_sent: u64,
    pub values_received: u64,
    pub rounds: u64,
}

impl CommLedger {
    /// Four bytes per value; sparse sends already count index and value.
    pub fn bytes_sent(&self) -> u64 {
        4 * self.values_sent
    }

    pub fn add(&mut self, other: &CommLedger) {
        self.values_sent += other.values_sent;
        self.values_received += other.values_received;
        self.rounds += other.rounds;
    }
}

/// Sparse update: ascending indices and their values.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseUpdate<T> {
    pub indices: Vec<u32>,
    pub values: Vec<T>,
}

impl<T: Scalar> SparseUpdate<T> {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Values charged to the sender per recipient: index plus value.
    pub fn wire_values(&self) -> u64 {
        2 * self.indices.len() as u64
    }

    pub fn add_to(&self, dst: &mut [T]) {
        for (&i, &v) in self.indices.iter().zip(&self.values) {
            dst[i as usize] = dst[i as usize] + v;
        }
    }

    /// Little-endian `u32` count, then `(u32 index, f32 value)` pairs.
    pub fn to_wire(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u32(self.indices.len() as u32);
        for (&i, &v) in self.indices.iter().zip(&self.values) {
            w.u32(i);
            w.f32(v.as_f64() as f32);
        }
        w.into_bytes()
    }

    pub fn from_wire(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "sparse update");
        let n = r.u32()? as usize;
        let mut out = SparseUpdate { indices: Vec::with_capacity(n), values: Vec::with_capacity(n) };
        for _ in 0..n {
            out.indices.push(r.u32()?);
            out.values.push(T::from_f64_lossy(r.f32()? as f64));
        }
        if !r.is_empty() {
            return Err(Error::Format("trailing bytes after sparse update".into()));
        }
        Ok(out)
    }
}

/// One partition's replica.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeState<T> {
    pub id: usize,
    pub model: Model<T>,
    pub opt: OptState<T>,
    /// Residual accumulator (Gaia, DGC); zero otherwise.
    pub v: Vec<T>,
    pub ledger: CommLedger,
    pub rng: ChaCha8Rng,
}

impl<T: Scalar> NodeState<T> {
    pub fn new(id: usize, model: Model<T>, momentum: f64, eta: f64, weight_decay: f64, rng_seed: u64) -> Self {
        let m = model.num_params();
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        rng.set_stream(id as u64);
        NodeState { id, model, opt: OptState::new(m, momentum, eta, weight_decay), v: vec![T::zero(); m], ledger: CommLedger::default(), rng }
    }

    pub fn w(&self) -> &[T] {
        self.model.params.as_slice()
    }

    pub fn w_mut(&mut self) -> &mut [T] {
        self.model.params.as_mut_slice()
    }

    pub fn num_params(&self) -> usize {
        self.model.num_params()
    }
}

pub(crate) fn check_grad_len<T>(node: &NodeState<T>, grad: &[T]) -> Result<()>
where
    T: Scalar,
{
    if grad.len() != node.num_params() {
        return Err(Error::Layout(format!("gradient has {} values, model {}", grad.len(), node.num_params())));
    }
    Ok(())
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wire_round_trip() {
        let s = SparseUpdate { indices: vec![1, 7, 9], values: vec![0.5f32, -1.25, 3.0] };
        let bytes = s.to_wire();
        assert_eq!(bytes.len(), 4 + 3 * 8);
        assert_eq!(&bytes[..4], &3u32.to_le_bytes());
        assert_eq!(SparseUpdate::<f32>::from_wire(&bytes).unwrap(), s);
        assert!(SparseUpdate::<f32>::from_wire(&bytes[..10]).is_err());
    }

    #[test]
    fn theta_maps_to_the_selected_knob() {
        let mut c = SyncConfig::fedavg(5);
        c.set_theta(12.4);
        assert_eq!(c.iter_local, 12);
        assert!(SyncConfig { iter_local: 0, ..SyncConfig::fedavg(1) }.validate().is_err());
        assert!(SyncConfig { t0: 1.5, ..SyncConfig::gaia(0.1) }.validate().is_err());
        assert!(SyncConfig { e_warm: 0, ..SyncConfig::dgc(1) }.validate().is_err());
        // Fields of other algorithms are ignored.
        assert!(SyncConfig { e_warm: 0, ..SyncConfig::gaia(0.1) }.validate().is_ok());
    }
}
