//! `SKSM` model container.
//!
//! Layout: magic `SKSM`, version (u32 LE), architecture id string, segment
//! table (name, shape), all parameter values as f32 LE in segment order, then
//! batch-norm running statistics. Strings are a u32 LE length followed by
//! UTF-8 bytes.

use std::path::Path;

use super::layers::RunningStats;
use super::model::{Model, ModelSpec};
use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 4] = b"SKSM";
pub const VERSION: u32 = 1;

pub fn write_model<T: Scalar>(w: &mut Writer, model: &Model<T>) {
    w.str(&model.spec().id());
    let segs = model.layout().segments();
    w.u32(segs.len() as u32);
    for s in segs {
        w.str(&format!("{}.{}", s.layer, s.name));
        w.u32(s.shape.len() as u32);
        s.shape.iter().for_each(|&d| w.u32(d as u32));
    }
    w.f32s(model.params.as_slice());
    w.u32(model.running.len() as u32);
    for r in &model.running {
        w.u32(r.mean.len() as u32);
        w.f32s(&r.mean);
        w.f32s(&r.var);
    }
}

pub fn read_model<T: Scalar>(r: &mut Reader<'_>) -> Result<Model<T>> {
    let spec = ModelSpec::from_id(&r.str()?)?;
    let mut model = Model::<T>::zeroed(spec)?;
    let nseg = r.u32()? as usize;
    let expected = model.layout().segments().to_vec();
    if nseg != expected.len() {
        return Err(Error::Format(format!("segment table has {nseg} entries, architecture needs {}", expected.len())));
    }
    for s in &expected {
        let name = r.str()?;
        let nd = r.u32()? as usize;
        let shape = (0..nd).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if name != format!("{}.{}", s.layer, s.name) || shape != s.shape {
            return Err(Error::Format(format!("segment {name} {shape:?} does not match architecture")));
        }
    }
    let values = r.f32s::<T>(model.num_params())?;
    model.params.as_mut_slice().copy_from_slice(&values);
    let nrun = r.u32()? as usize;
    if nrun != model.running.len() {
        return Err(Error::Format("running statistics count mismatch".into()));
    }
    for i in 0..nrun {
        let c = r.u32()? as usize;
        if c != model.running[i].mean.len() {
            return Err(Error::Format("running statistics width mismatch".into()));
        }
        model.running[i] = RunningStats { mean: r.f32s(c)?, var: r.f32s(c)? };
    }
    Ok(model)
}

pub fn write_header(w: &mut Writer) {
    w.bytes(MAGIC);
    w.u32(VERSION);
}

pub fn read_header(r: &mut Reader<'_>) -> Result<()> {
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad magic, expected SKSM".into()));
    }
    let v = r.u32()?;
    if v != VERSION {
        return Err(Error::Version { found: v, expected: VERSION });
    }
    Ok(())
}

pub fn model_to_bytes<T: Scalar>(model: &Model<T>) -> Vec<u8> {
    let mut w = Writer::new();
    write_header(&mut w);
    write_model(&mut w, model);
    w.into_bytes()
}

pub fn model_from_bytes<T: Scalar>(bytes: &[u8]) -> Result<Model<T>> {
    let mut r = Reader::new(bytes, "model checkpoint");
    read_header(&mut r)?;
    read_model(&mut r)
}

pub fn save_model<T: Scalar>(model: &Model<T>, path: &Path) -> Result<()> {
    std::fs::write(path, model_to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load_model<T: Scalar>(path: &Path) -> Result<Model<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    model_from_bytes(&bytes)
}
