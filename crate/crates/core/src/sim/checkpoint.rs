use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::cluster::Cluster;
use super::config::ExperimentConfig;
use super::log::MetricsLog;
use crate::codec::{Reader, Writer};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::checkpoint::{read_header, read_model, write_header, write_model};
use crate::scalar::Scalar;
use crate::sync::{CommLedger, SyncConfig};

const SECTION: &str = "cluster";

fn write_ledger(w: &mut Writer, l: &CommLedger) {
    w.u64(l.values_sent);
    w.u64(l.values_received);
    w.u64(l.rounds);
}

fn read_ledger(r: &mut Reader<'_>) -> Result<CommLedger> {
    Ok(CommLedger { values_sent: r.u64()?, values_received: r.u64()?, rounds: r.u64()? })
}

fn write_f64s(w: &mut Writer, vs: &[f64]) {
    w.u32(vs.len() as u32);
    vs.iter().for_each(|&v| w.f64(v));
}

fn read_f64s(r: &mut Reader<'_>) -> Result<Vec<f64>> {
    let n = r.u32()? as usize;
    (0..n).map(|_| r.f64()).collect()
}

fn write_rng(w: &mut Writer, rng: &ChaCha8Rng) {
    w.bytes(&rng.get_seed());
    w.u64(rng.get_stream());
    w.u128(rng.get_word_pos());
}

fn read_rng(r: &mut Reader<'_>) -> Result<ChaCha8Rng> {
    let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(r.u64()?);
    rng.set_word_pos(r.u128()?);
    Ok(rng)
}

impl<T: Scalar> Cluster<T> {
    /// Serializes the complete cluster state: every node's model, momentum,
    /// residual, ledger, RNG and sampler position, plus the metrics so far.
    /// Values are stored as 32-bit floats, so resuming is bit-exact for
    /// 32-bit runs.
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        write_header(&mut w);
        w.str(SECTION);
        w.str(T::NAME);
        w.str(&serde_json::to_string(&self.cfg).expect("config serializes"));
        w.str(&serde_json::to_string(&self.sync).expect("sync config serializes"));
        w.u64(self.step as u64);
        w.u64(self.streak as u64);
        w.u8(self.diverged as u8);
        w.u64(self.last_eval_step.map_or(u64::MAX, |s| s as u64));
        w.u32(self.gaia_base.len() as u32);
        w.f32s(&self.gaia_base);
        write_ledger(&mut w, &self.travel_ledger);
        w.u32(self.nodes.len() as u32);
        for (node, aux) in self.nodes.iter().zip(&self.aux) {
            write_model(&mut w, &node.model);
            w.f64(node.opt.eta);
            w.f32s(&node.opt.u);
            w.f32s(&node.v);
            write_ledger(&mut w, &node.ledger);
            write_rng(&mut w, &node.rng);
            let order: Vec<u32> = aux.sampler.order.iter().map(|&i| i as u32).collect();
            w.u32s(&order);
            w.u64(aux.sampler.pos as u64);
            w.u64(aux.epoch_correct);
            w.u64(aux.epoch_seen);
            w.f64(aux.epoch_loss);
            w.u64(aux.event_correct);
            w.u64(aux.event_seen);
        }
        match &self.moments {
            Some(m) => {
                let (a, b, count) = m.state();
                w.u8(1);
                write_f64s(&mut w, a);
                write_f64s(&mut w, b);
                w.u64(count as u64);
            }
            None => w.u8(0),
        }
        write_f64s(&mut w, &self.per_node_val);
        w.f64(self.final_val.unwrap_or(f64::NAN));
        w.str(&self.log.to_csv());
        w.into_bytes()
    }

    /// Restores a cluster. The dataset is reloaded from the stored config
    /// unless one is supplied.
    pub fn from_checkpoint_bytes(bytes: &[u8], dataset: Option<Arc<Dataset>>) -> Result<Self> {
        let mut r = Reader::new(bytes, "cluster checkpoint");
        read_header(&mut r)?;
        if r.str()? != SECTION {
            return Err(Error::Format("not a cluster checkpoint".into()));
        }
        let precision = r.str()?;
        if precision != T::NAME {
            return Err(Error::Format(format!("checkpoint holds {precision} values, expected {}", T::NAME)));
        }
        let cfg: ExperimentConfig = serde_json::from_str(&r.str()?)?;
        let sync: SyncConfig = serde_json::from_str(&r.str()?)?;
        let dataset = match dataset {
            Some(d) => d,
            None => Arc::new(cfg.load_dataset()?),
        };
        let mut c = Cluster::<T>::new(&cfg, dataset)?;
        c.sync = sync;
        c.step = r.u64()? as usize;
        c.streak = r.u64()? as usize;
        c.diverged = r.u8()? != 0;
        c.last_eval_step = match r.u64()? {
            u64::MAX => None,
            s => Some(s as usize),
        };
        let n = r.u32()? as usize;
        c.gaia_base = r.f32s(n)?;
        c.travel_ledger = read_ledger(&mut r)?;
        let k = r.u32()? as usize;
        if k != c.nodes.len() {
            return Err(Error::Format(format!("checkpoint has {k} nodes, config {}", c.nodes.len())));
        }
        for (node, aux) in c.nodes.iter_mut().zip(c.aux.iter_mut()) {
            let model = read_model::<T>(&mut r)?;
            if model.spec() != node.model.spec() {
                return Err(Error::Format("checkpoint model does not match its config".into()));
            }
            node.model = model;
            let m = node.model.num_params();
            node.opt.eta = r.f64()?;
            node.opt.u = r.f32s(m)?;
            node.v = r.f32s(m)?;
            node.ledger = read_ledger(&mut r)?;
            node.rng = read_rng(&mut r)?;
            aux.sampler.order = r.u32s()?.into_iter().map(|i| i as usize).collect();
            aux.sampler.pos = r.u64()? as usize;
            aux.epoch_correct = r.u64()?;
            aux.epoch_seen = r.u64()?;
            aux.epoch_loss = r.f64()?;
            aux.event_correct = r.u64()?;
            aux.event_seen = r.u64()?;
        }
        if r.u8()? == 1 {
            let a = read_f64s(&mut r)?;
            let b = read_f64s(&mut r)?;
            let count = r.u64()? as usize;
            match c.moments.as_mut() {
                Some(m) => m.restore(a, b, count),
                None => return Err(Error::Format("unexpected moment window".into())),
            }
        }
        c.per_node_val = read_f64s(&mut r)?;
        let fv = r.f64()?;
        c.final_val = (!fv.is_nan()).then_some(fv);
        c.log = MetricsLog::from_csv(&r.str()?)?;
        if !r.is_empty() {
            return Err(Error::Format("trailing bytes after cluster checkpoint".into()));
        }
        Ok(c)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load_checkpoint(path: &Path, dataset: Option<Arc<Dataset>>) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_bytes(&bytes, dataset)
    }
}
