//! Versioned binary checkpoint.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "EXCCKPT\0" | version u32 | dtype (u8 len + ascii)
//! network config (u32 len + JSON) | step u64
//! student params | teacher params | adam state
//! ```
//!
//! A parameter set is `count u32` followed by, per entry, the name (u16 len +
//! utf8), kind u8, rank u8, dims u32 each, and `len u64` raw scalars. The
//! Adam state is `t u64`, four f64 hyper-parameters, then `count u32` first
//! and second moment slots (`len u64` + scalars each). Encoding is a pure
//! function of the contents, so save -> load -> save is byte-identical.

use std::path::Path;

use crate::error::{Error, Result};
use crate::optim::{Adam, AdamConfig};
use crate::scalar::Scalar;

use super::{NetworkConfig, ParamKind, ParamSet, SegNetwork};

const MAGIC: &[u8; 8] = b"EXCCKPT\0";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub config: NetworkConfig,
    pub step: u64,
    pub student: ParamSet<T>,
    pub teacher: ParamSet<T>,
    pub optimizer: Adam<T>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn student_network(&self) -> Result<SegNetwork<T>> {
        self.network(&self.student)
    }

    pub fn teacher_network(&self) -> Result<SegNetwork<T>> {
        self.network(&self.teacher)
    }

    fn network(&self, params: &ParamSet<T>) -> Result<SegNetwork<T>> {
        let mut net = SegNetwork::build(&self.config, 0)?;
        net.set_params(params.clone())
            .map_err(|e| Error::Checkpoint(format!("checkpoint does not match its config: {e}")))?;
        Ok(net)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}
fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_slot<T: Scalar>(out: &mut Vec<u8>, data: &[T]) {
    put_u64(out, data.len() as u64);
    for &v in data {
        v.write_le(out);
    }
}

fn put_params<T: Scalar>(out: &mut Vec<u8>, params: &ParamSet<T>) {
    put_u32(out, params.len() as u32);
    for p in params.iter() {
        out.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(match p.kind {
            ParamKind::Weight => 0,
            ParamKind::Buffer => 1,
        });
        out.push(p.shape.len() as u8);
        for &d in &p.shape {
            put_u32(out, d as u32);
        }
        put_slot(out, &p.data);
    }
}

pub fn write_checkpoint_bytes<T: Scalar>(ck: &Checkpoint<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    out.push(T::DTYPE.len() as u8);
    out.extend_from_slice(T::DTYPE.as_bytes());
    let cfg = serde_json::to_vec(&ck.config)?;
    put_u32(&mut out, cfg.len() as u32);
    out.extend_from_slice(&cfg);
    put_u64(&mut out, ck.step);
    put_params(&mut out, &ck.student);
    put_params(&mut out, &ck.teacher);
    let a = &ck.optimizer;
    put_u64(&mut out, a.t);
    for v in [a.config.learning_rate, a.config.beta1, a.config.beta2, a.config.eps] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    put_u32(&mut out, a.m.len() as u32);
    for (m, v) in a.m.iter().zip(&a.v) {
        put_slot(&mut out, m);
        put_slot(&mut out, v);
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn slot<T: Scalar>(&mut self) -> Result<Vec<T>> {
        let len = self.u64()? as usize;
        let raw = self.take(len.checked_mul(T::BYTES).ok_or_else(|| Error::Checkpoint("slot too large".into()))?)?;
        Ok(raw.chunks_exact(T::BYTES).map(T::read_le).collect())
    }
    fn params<T: Scalar>(&mut self) -> Result<ParamSet<T>> {
        let count = self.u32()?;
        let mut set = ParamSet::new();
        for _ in 0..count {
            let name_len = self.u16()? as usize;
            let name = String::from_utf8(self.take(name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("parameter name is not utf-8".into()))?;
            let kind = match self.u8()? {
                0 => ParamKind::Weight,
                1 => ParamKind::Buffer,
                k => return Err(Error::Checkpoint(format!("unknown parameter kind {k}"))),
            };
            let rank = self.u8()? as usize;
            let shape = (0..rank).map(|_| self.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let data = self.slot::<T>()?;
            if shape.iter().product::<usize>() != data.len() {
                return Err(Error::Checkpoint(format!("parameter `{name}` has inconsistent size")));
            }
            set.push(name, shape, kind, data);
        }
        Ok(set)
    }
}

pub fn read_checkpoint_bytes<T: Scalar>(buf: &[u8]) -> Result<Checkpoint<T>> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let dlen = r.u8()? as usize;
    let dtype = r.take(dlen)?;
    if dtype != T::DTYPE.as_bytes() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} values, expected {}",
            String::from_utf8_lossy(dtype),
            T::DTYPE
        )));
    }
    let clen = r.u32()? as usize;
    let config: NetworkConfig = serde_json::from_slice(r.take(clen)?)?;
    let step = r.u64()?;
    let student = r.params::<T>()?;
    let teacher = r.params::<T>()?;
    student
        .check_compatible(&teacher)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let t = r.u64()?;
    let config_adam = AdamConfig {
        learning_rate: r.f64()?,
        beta1: r.f64()?,
        beta2: r.f64()?,
        eps: r.f64()?,
    };
    let slots = r.u32()? as usize;
    let mut m = Vec::with_capacity(slots);
    let mut v = Vec::with_capacity(slots);
    for _ in 0..slots {
        m.push(r.slot::<T>()?);
        v.push(r.slot::<T>()?);
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint("trailing bytes after checkpoint".into()));
    }
    Ok(Checkpoint {
        config,
        step,
        student,
        teacher,
        optimizer: Adam::from_parts(config_adam, t, m, v),
    })
}

pub fn save_checkpoint<T: Scalar>(path: &Path, ck: &Checkpoint<T>) -> Result<()> {
    let bytes = write_checkpoint_bytes(ck)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<Checkpoint<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint_bytes(&bytes)
}
