//! Checkpoint container: all weights with their freeze flags, the
//! prototype bank, optimizer state, step counter, and a hash of the run
//! config. Reload is bit-exact.

use std::collections::BTreeMap;
use std::path::Path;

use crate::data::raster::atomic_write;
use crate::error::{Error, Result};
use crate::numerics::NdArray;
use crate::params::ParamStore;
use crate::spmm::{PrototypeBank, PROTO_DIM};

use super::AdamW;

const MAGIC: &[u8; 8] = b"MSEGCKP1";

pub struct Checkpoint {
    pub store: ParamStore,
    pub bank: PrototypeBank,
    pub opt: AdamW,
    pub step: u64,
    pub config_hash: u64,
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn name(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }
    fn array(&mut self, a: &NdArray) {
        self.buf.push(a.shape().len() as u8);
        for &d in a.shape() {
            self.u32(d as u32);
        }
        for &v in a.data() {
            self.f64(v);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Parse("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
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
    fn name(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Parse("bad name in checkpoint".into()))
    }
    fn array(&mut self) -> Result<NdArray> {
        let ndim = self.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u32()? as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(self.f64()?);
        }
        NdArray::from_vec(&shape, data)
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(MAGIC);
    w.u64(ckpt.config_hash);
    w.u64(ckpt.step);

    let c = ckpt.bank.num_classes();
    w.u32(c as u32);
    w.f64(ckpt.bank.mu);
    for &v in ckpt.bank.global.data() {
        w.f64(v);
    }
    for &s in &ckpt.bank.seen {
        w.buf.push(s as u8);
    }

    w.u64(ckpt.opt.t);
    w.u32(ckpt.opt.m.len() as u32);
    for (name, m) in &ckpt.opt.m {
        w.name(name);
        w.array(m);
        w.array(&ckpt.opt.v[name]);
    }

    w.u32(ckpt.store.iter().count() as u32);
    for (name, entry) in ckpt.store.iter() {
        w.name(name);
        w.buf.push(entry.frozen as u8);
        w.array(&entry.value);
    }
    atomic_write(path, &w.buf)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 || &bytes[..8] != MAGIC {
        return Err(Error::Parse(format!(
            "{}: not a checkpoint file",
            path.display()
        )));
    }
    let mut r = Reader {
        buf: &bytes,
        pos: 8,
    };
    let config_hash = r.u64()?;
    let step = r.u64()?;

    let c = r.u32()? as usize;
    let mu = r.f64()?;
    let mut bank = PrototypeBank::new(c, mu)?;
    for i in 0..c * PROTO_DIM {
        bank.global.data_mut()[i] = r.f64()?;
    }
    for i in 0..c {
        bank.seen[i] = r.u8()? != 0;
    }

    let t = r.u64()?;
    let nopt = r.u32()? as usize;
    let mut m = BTreeMap::new();
    let mut v = BTreeMap::new();
    for _ in 0..nopt {
        let name = r.name()?;
        m.insert(name.clone(), r.array()?);
        v.insert(name, r.array()?);
    }

    let nparams = r.u32()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..nparams {
        let name = r.name()?;
        let frozen = r.u8()? != 0;
        store.insert(&name, r.array()?);
        if frozen {
            store.freeze_matching(|n| n == name);
        }
    }
    let mut opt = AdamW::default();
    opt.t = t;
    opt.m = m;
    opt.v = v;
    Ok(Checkpoint {
        store,
        bank,
        opt,
        step,
        config_hash,
    })
}
