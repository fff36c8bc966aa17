//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "AVCK" u32:version
//! str:fingerprint str:target u64:seed
//! u32:stage u32:epoch u8:done f64:lr u64:adam_step
//! u32:n f64×n                                   validation history
//! u32:n (str:stage u32:epoch f64:loss f64:train_cr f64:val_cr)×n
//! table:params u8:has_best [table:best] table:adam_m table:adam_v
//!
//! str   = u32:len bytes
//! table = u32:n (str:name u8:kind u32:rank u32×rank f32×numel)×n
//! ```
//!
//! Wall-clock times are not stored, so identical runs give identical files.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use avsr_tensor::{numel, Tensor};

use crate::error::{AvsrError, Result};
use crate::params::{ParamKind, ParamStore};
use crate::training::{AdamState, MetricsRow, RunState};

pub const MAGIC: &[u8; 4] = b"AVCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub fingerprint: String,
    pub target: String,
    pub seed: u64,
    pub params: ParamStore<f32>,
    pub state: RunState,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn len(&mut self, n: usize) {
        self.u32(u32::try_from(n).expect("checkpoint field longer than u32"));
    }
    fn str(&mut self, s: &str) {
        self.len(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }
    fn table<'a>(&mut self, entries: impl ExactSizeIterator<Item = (&'a str, ParamKind, &'a Tensor<f32>)>) {
        self.len(entries.len());
        for (name, kind, t) in entries {
            self.str(name);
            self.u8(match kind {
                ParamKind::Weight => 0,
                ParamKind::Buffer => 1,
            });
            self.len(t.shape().len());
            for &d in t.shape() {
                self.len(d);
            }
            for &v in t.data() {
                self.0.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    fn store(&mut self, s: &ParamStore<f32>) {
        let entries: Vec<_> = s.iter().map(|(n, p)| (n, p.kind, &p.tensor)).collect();
        self.table(entries.into_iter());
    }
    fn moments(&mut self, m: &BTreeMap<String, Vec<f32>>) -> Result<()> {
        let tensors: Vec<(&str, Tensor<f32>)> =
            m.iter().map(|(n, v)| Ok((n.as_str(), Tensor::new(vec![v.len()], v.clone())?))).collect::<Result<_>>()?;
        self.table(tensors.iter().map(|(n, t)| (*n, ParamKind::Weight, t)));
        Ok(())
    }
}

pub fn encode(ck: &Checkpoint) -> Result<Vec<u8>> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.str(&ck.fingerprint);
    w.str(&ck.target);
    w.u64(ck.seed);
    let s = &ck.state;
    w.len(s.stage);
    w.len(s.epoch);
    w.u8(s.done as u8);
    w.f64(s.adam.lr);
    w.u64(s.adam.step);
    w.len(s.history.len());
    for &h in &s.history {
        w.f64(h);
    }
    w.len(s.metrics.len());
    for r in &s.metrics {
        w.str(&r.stage);
        w.len(r.epoch);
        w.f64(r.train_loss);
        w.f64(r.train_cr);
        w.f64(r.val_cr);
    }
    w.store(&ck.params);
    match &s.best {
        Some(b) => {
            w.u8(1);
            w.store(b);
        }
        None => w.u8(0),
    }
    w.moments(&s.adam.m)?;
    w.moments(&s.adam.v)?;
    Ok(w.0)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, offset: usize, detail: impl Into<String>) -> AvsrError {
        AvsrError::Format { path: self.path.to_path_buf(), offset: offset as u64, detail: detail.into() }
    }
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let avail = self.bytes.len() - self.pos;
        if n > avail {
            return Err(self.err(self.pos, format!("truncated {what}: need {n} bytes, {avail} left")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
    fn count(&mut self, what: &str, elem: usize) -> Result<usize> {
        let at = self.pos;
        let n = self.u32(what)? as usize;
        if n.saturating_mul(elem) > self.bytes.len() - self.pos {
            return Err(self.err(at, format!("{what} count {n} exceeds remaining {} bytes", self.bytes.len() - self.pos)));
        }
        Ok(n)
    }
    fn str(&mut self, what: &str) -> Result<String> {
        let n = self.count(what, 1)?;
        let at = self.pos;
        let b = self.take(n, what)?;
        String::from_utf8(b.to_vec()).map_err(|_| self.err(at, format!("{what} is not UTF-8")))
    }
    fn bool(&mut self, what: &str) -> Result<bool> {
        let at = self.pos;
        match self.u8(what)? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(self.err(at, format!("{what} flag {v} is not 0 or 1"))),
        }
    }
    fn table(&mut self, what: &str) -> Result<Vec<(String, ParamKind, Tensor<f32>)>> {
        let n = self.count(what, 9)?;
        let mut out: Vec<(String, ParamKind, Tensor<f32>)> = Vec::with_capacity(n);
        for _ in 0..n {
            let at = self.pos;
            let name = self.str("tensor name")?;
            if out.last().is_some_and(|(prev, ..)| *prev >= name) {
                return Err(self.err(at, format!("{what}: name '{name}' out of order or duplicated")));
            }
            let kat = self.pos;
            let kind = match self.u8("kind")? {
                0 => ParamKind::Weight,
                1 => ParamKind::Buffer,
                k => return Err(self.err(kat, format!("unknown parameter kind {k}"))),
            };
            let rat = self.pos;
            let rank = self.u32("rank")? as usize;
            if rank > 8 {
                return Err(self.err(rat, format!("{name}: rank {rank} exceeds 8")));
            }
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let dat = self.pos;
                let d = self.u32("dimension")? as usize;
                if d == 0 {
                    return Err(self.err(dat, format!("{name}: zero dimension")));
                }
                shape.push(d);
            }
            let dat = self.pos;
            let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).filter(|&l| l <= (self.bytes.len() - self.pos) / 4);
            let Some(len) = len else {
                return Err(self.err(dat, format!("{name}: shape {shape:?} needs more data than the file holds")));
            };
            debug_assert_eq!(len, numel(&shape));
            let raw = self.take(4 * len, "tensor data")?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect();
            out.push((name, kind, Tensor::new(shape, data)?));
        }
        Ok(out)
    }
    fn store(&mut self, what: &str) -> Result<ParamStore<f32>> {
        let mut s = ParamStore::new();
        for (n, k, t) in self.table(what)? {
            s.insert(n, t, k)?;
        }
        Ok(s)
    }
    fn moments(&mut self, what: &str) -> Result<BTreeMap<String, Vec<f32>>> {
        Ok(self.table(what)?.into_iter().map(|(n, _, t)| (n, t.into_data())).collect())
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0, path };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(r.err(0, format!("bad magic {:?}, expected \"AVCK\"", String::from_utf8_lossy(magic))));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(r.err(4, format!("unsupported version {version}, expected {VERSION}")));
    }
    let fingerprint = r.str("fingerprint")?;
    let target = r.str("target")?;
    let seed = r.u64("seed")?;
    let stage = r.u32("stage")? as usize;
    let epoch = r.u32("epoch")? as usize;
    let done = r.bool("done")?;
    let lr = r.f64("learning rate")?;
    let step = r.u64("adam step")?;
    let nh = r.count("history", 8)?;
    let history = (0..nh).map(|_| r.f64("history")).collect::<Result<Vec<_>>>()?;
    let nm = r.count("metrics", 32)?;
    let mut metrics = Vec::with_capacity(nm);
    for _ in 0..nm {
        metrics.push(MetricsRow {
            stage: r.str("metrics stage")?,
            epoch: r.u32("metrics epoch")? as usize,
            train_loss: r.f64("train loss")?,
            train_cr: r.f64("train cr")?,
            val_cr: r.f64("val cr")?,
            wall_seconds: 0.0,
        });
    }
    let params = r.store("params")?;
    let best = if r.bool("best flag")? { Some(r.store("best params")?) } else { None };
    let m = r.moments("adam m")?;
    let v = r.moments("adam v")?;
    if r.pos != bytes.len() {
        return Err(r.err(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Checkpoint {
        fingerprint,
        target,
        seed,
        params,
        state: RunState { stage, epoch, history, best, adam: AdamState { lr, step, m, v }, metrics, done },
    })
}

pub fn save(ck: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = encode(ck)?;
    let tmp = PathBuf::from(format!("{}.tmp", path.display()));
    fs::write(&tmp, bytes).map_err(|e| AvsrError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| AvsrError::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| AvsrError::io(path, e))?;
    decode(&bytes, path)
}
