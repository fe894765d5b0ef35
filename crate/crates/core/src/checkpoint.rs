//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "CMIRCKPT" | u32 version
//! str model config | str train config | u64 seed | u64 step
//! u32 n | f64 x n                      recent step losses
//! u32 n | n x (str name, u64 rows, u64 cols, u8 kind, f64 x rows*cols)
//! u32 n | n x (str name, u64 len, f64 x len)      optimizer moments
//! ```
//!
//! Strings are a u32 byte length followed by UTF-8. Floats are stored as raw
//! bits, so a round trip is exact.

use std::io::{Read, Write};
use std::path::Path;

use crate::config::{parse_config, ModelConfig};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::tape::{ParamKind, ParamStore};
use crate::trainer::Trainer;

pub const MAGIC: &[u8; 8] = b"CMIRCKPT";
pub const VERSION: u32 = 1;

fn kind_tag(k: ParamKind) -> u8 {
    match k {
        ParamKind::Dense => 0,
        ParamKind::Sparse => 1,
        ParamKind::Frozen => 2,
    }
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
    fn f64s(&mut self, v: &[f64]) {
        for x in v {
            self.0.extend_from_slice(&x.to_bits().to_le_bytes());
        }
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| Error::Checkpoint("truncated file".into()))?;
        let s = &self.buf[self.at..end];
        self.at = end;
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
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("length overflow".into()))?)?;
        Ok(bytes.chunks_exact(8).map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().unwrap()))).collect())
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid utf-8 string".into()))
    }
}

pub fn to_bytes(t: &Trainer) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION);
    w.str(&t.model.cfg.to_kv());
    w.str(&t.cfg.to_kv());
    w.u64(t.seed);
    w.u64(t.opt.step);
    w.u32(t.recent.len() as u32);
    w.f64s(&t.recent.iter().copied().collect::<Vec<_>>());
    w.u32(t.model.store.len() as u32);
    for (_, p) in t.model.store.iter() {
        w.str(&p.name);
        w.u64(p.rows as u64);
        w.u64(p.cols as u64);
        w.u8(kind_tag(p.kind));
        w.f64s(&p.data);
    }
    let state = t.opt.export_state();
    w.u32(state.len() as u32);
    for (name, data) in &state {
        w.str(name);
        w.u64(data.len() as u64);
        w.f64s(data);
    }
    w.0
}

pub fn from_bytes(buf: &[u8]) -> Result<Trainer> {
    let mut r = Reader { buf, at: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let model_cfg = ModelConfig::from_kv(&r.str()?)?;
    let (_, train_cfg) = parse_config(&r.str()?)?;
    let seed = r.u64()?;
    let step = r.u64()?;
    let n = r.u32()? as usize;
    let recent = r.f64s(n)?;

    // Rebuild the parameter layout from the config, then overwrite every tensor.
    let blank = vec![vec![vec![0.0; model_cfg.code_dim]; model_cfg.codebook_size]; model_cfg.levels];
    let mut model = Model::new(&model_cfg, &blank)?;
    let count = r.u32()? as usize;
    if count != model.store.len() {
        return Err(Error::Checkpoint(format!("expected {} tensors, found {count}", model.store.len())));
    }
    for _ in 0..count {
        let name = r.str()?;
        let rows = r.u64()? as usize;
        let cols = r.u64()? as usize;
        let kind = r.u8()?;
        let data = r.f64s(rows * cols)?;
        let id = model.store.id(&name).ok_or_else(|| Error::Checkpoint(format!("unknown tensor `{name}`")))?;
        let p = model.store.get_mut(id);
        if (p.rows, p.cols, kind_tag(p.kind)) != (rows, cols, kind) {
            return Err(Error::Checkpoint(format!("tensor `{name}` has the wrong shape or kind")));
        }
        p.data = data;
    }
    let n = r.u32()? as usize;
    let mut state = Vec::with_capacity(n);
    for _ in 0..n {
        let name = r.str()?;
        let len = r.u64()? as usize;
        state.push((name, r.f64s(len)?));
    }
    if r.at != buf.len() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    let mut t = Trainer::new(model, train_cfg, seed)?;
    t.opt.import_state(step, &state).map_err(Error::Checkpoint)?;
    t.recent = recent.into();
    Ok(t)
}

pub fn save(t: &Trainer, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&to_bytes(t))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Trainer> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    from_bytes(&buf)
}

/// True when two stores hold the same tensors bit for bit.
pub fn stores_identical(a: &ParamStore, b: &ParamStore) -> bool {
    a.len() == b.len()
        && a.iter().zip(b.iter()).all(|((_, p), (_, q))| {
            p.name == q.name
                && p.rows == q.rows
                && p.cols == q.cols
                && p.kind == q.kind
                && p.data.iter().zip(&q.data).all(|(x, y)| x.to_bits() == y.to_bits())
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{TrainConfig, Variant};
    use crate::representation::tests::{code_vectors, tiny_catalog, tiny_cfg};
    use crate::trainer::split_examples;

    fn trainer(variant: Variant) -> (Trainer, crate::catalog::Catalog, Vec<crate::trainer::Example>) {
        let cfg = crate::config::ModelConfig { variant, ..tiny_cfg() };
        let catalog = tiny_catalog(&cfg);
        let model = Model::new(&cfg, &code_vectors(&cfg)).unwrap();
        let (train, _) = split_examples(&[vec![0, 1, 2, 3, 4], vec![5, 4, 3, 2]], 10);
        let tc = TrainConfig { batch: 2, ..Default::default() };
        (Trainer::new(model, tc, 11).unwrap(), catalog, train)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (mut t, catalog, train) = trainer(Variant::Nezha);
        t.train_step(&catalog, &train).unwrap();
        let bytes = to_bytes(&t);
        let back = from_bytes(&bytes).unwrap();
        assert!(stores_identical(&t.model.store, &back.model.store));
        assert_eq!(back.opt, t.opt);
        assert_eq!(back.model.cfg, t.model.cfg);
        assert_eq!(back.cfg, t.cfg);
        assert_eq!(to_bytes(&back), bytes);
    }

    #[test]
    fn restored_run_continues_identically() {
        let (mut t, catalog, train) = trainer(Variant::Normal);
        for _ in 0..2 {
            t.train_step(&catalog, &train).unwrap();
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save(&t, &path).unwrap();
        let mut r = load(&path).unwrap();
        for _ in 0..2 {
            let a = t.train_step(&catalog, &train).unwrap();
            let b = r.train_step(&catalog, &train).unwrap();
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert!(stores_identical(&t.model.store, &r.model.store));
        assert_eq!(t.smoothed_loss().to_bits(), r.smoothed_loss().to_bits());
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let (t, _, _) = trainer(Variant::Normal);
        let bytes = to_bytes(&t);
        assert!(matches!(from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Checkpoint(_))));
        assert!(matches!(from_bytes(b"NOTACKPTxxxx"), Err(Error::Checkpoint(_))));
        let mut v = bytes.clone();
        v[8] = 9;
        assert!(matches!(from_bytes(&v), Err(Error::Checkpoint(_))));
        let mut extra = bytes;
        extra.push(0);
        assert!(from_bytes(&extra).is_err());
    }
}
