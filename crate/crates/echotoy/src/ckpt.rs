//! Binary serialization: byte-level reader/writer plus the checkpoint
//! container used by every trained model.
//!
//! All integers and floats are little-endian. Readers track their byte
//! offset so a corrupt file reports where decoding failed, and they demand
//! the buffer is consumed exactly — trailing bytes are as much a format
//! error as missing ones.

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};
use std::path::Path;

// ───────────────────────── byte-level plumbing ─────────────────────────

pub struct ByteWriter {
    buf: Vec<u8>,
}

impl ByteWriter {
    pub fn new() -> Self {
        ByteWriter { buf: Vec::new() }
    }

    pub fn bytes(&mut self, b: &[u8]) {
        self.buf.extend_from_slice(b);
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32(&mut self, v: f32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn f32_slice(&mut self, vs: &[f32]) {
        self.buf.reserve(vs.len() * 4);
        for &v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    /// Length-prefixed (u16) UTF-8 string for short names.
    pub fn short_str(&mut self, s: &str) {
        assert!(s.len() <= u16::MAX as usize, "string too long for short_str");
        self.u16(s.len() as u16);
        self.bytes(s.as_bytes());
    }

    /// Length-prefixed (u32) UTF-8 string.
    pub fn long_str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }

    pub fn write_file(self, path: &Path) -> Result<()> {
        std::fs::write(path, self.buf).map_err(|e| Error::io(path, e))
    }
}

impl Default for ByteWriter {
    fn default() -> Self {
        Self::new()
    }
}

pub struct ByteReader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(data: &'a [u8]) -> Self {
        ByteReader { data, pos: 0 }
    }

    pub fn offset(&self) -> u64 {
        self.pos as u64
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Format {
                offset: self.pos as u64,
                detail: format!("unexpected end of data reading {what} ({n} bytes)"),
            });
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn magic(&mut self, expect: &[u8; 4]) -> Result<()> {
        let at = self.pos as u64;
        let got = self.take(4, "magic")?;
        if got != expect {
            return Err(Error::Format {
                offset: at,
                detail: format!(
                    "bad magic: expected {:?}, got {:?}",
                    String::from_utf8_lossy(expect),
                    String::from_utf8_lossy(got)
                ),
            });
        }
        Ok(())
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1, "u8")?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, "u16")?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, "u32")?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, "u64")?.try_into().unwrap()))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, "f32")?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, "f64")?.try_into().unwrap()))
    }

    pub fn f32_vec(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n * 4, "f32 array")?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub fn u8_vec(&mut self, n: usize) -> Result<Vec<u8>> {
        Ok(self.take(n, "u8 array")?.to_vec())
    }

    pub fn short_str(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        let at = self.pos as u64;
        let raw = self.take(n, "string")?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Format {
            offset: at,
            detail: "invalid utf-8 in string".into(),
        })
    }

    pub fn long_str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let at = self.pos as u64;
        let raw = self.take(n, "string")?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Format {
            offset: at,
            detail: "invalid utf-8 in string".into(),
        })
    }

    /// Assert the whole buffer was consumed.
    pub fn done(&self) -> Result<()> {
        if self.pos != self.data.len() {
            return Err(Error::Format {
                offset: self.pos as u64,
                detail: format!("{} trailing bytes", self.data.len() - self.pos),
            });
        }
        Ok(())
    }
}

pub fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

// ───────────────────────── checkpoints ─────────────────────────

const CKPT_MAGIC: &[u8; 4] = b"ECK1";

/// On-disk snapshot of one trained network.
///
/// `manifest` is the layer-by-layer architecture description; loaders must
/// verify it against the architecture the current code would build and
/// refuse to load on any difference. `config_hash` ties the checkpoint to
/// the configuration of the run that produced it, and `meta` carries the
/// scalar hyperparameters needed to rebuild the model shell before the
/// parameters are poured back in.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub kind: String,
    pub config_hash: u64,
    pub manifest: String,
    pub meta: Vec<(String, f64)>,
    pub params: Vec<(String, Vec<usize>, Vec<f32>)>,
    pub extra: Vec<(String, Vec<f32>)>,
}

impl Checkpoint {
    pub fn new(kind: &str, config_hash: u64, manifest: String) -> Self {
        Checkpoint {
            kind: kind.to_string(),
            config_hash,
            manifest,
            meta: Vec::new(),
            params: Vec::new(),
            extra: Vec::new(),
        }
    }

    pub fn push_meta(&mut self, key: &str, value: f64) {
        self.meta.push((key.to_string(), value));
    }

    pub fn meta_value(&self, key: &str) -> Result<f64> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::Format {
                offset: 0,
                detail: format!("checkpoint missing meta key `{key}`"),
            })
    }

    /// Append every parameter of a store, prefixing names with `scope` so
    /// several networks can share one checkpoint.
    pub fn push_store(&mut self, scope: &str, store: &ParamStore) {
        for id in store.ids() {
            let t = store.get(id);
            self.params.push((
                format!("{scope}.{}", store.name(id)),
                t.shape().to_vec(),
                t.data().to_vec(),
            ));
        }
    }

    /// Pour parameters back into a freshly built store. Every parameter in
    /// the store must be present under `scope` with an identical shape.
    pub fn restore_store(&self, scope: &str, store: &mut ParamStore) -> Result<()> {
        for id in store.ids().collect::<Vec<_>>() {
            let name = format!("{scope}.{}", store.name(id));
            let (_, shape, data) = self
                .params
                .iter()
                .find(|(n, _, _)| *n == name)
                .ok_or_else(|| Error::Format {
                    offset: 0,
                    detail: format!("checkpoint missing parameter `{name}`"),
                })?;
            if shape != store.get(id).shape() {
                return Err(Error::Format {
                    offset: 0,
                    detail: format!(
                        "parameter `{name}` shape {:?} does not match model {:?}",
                        shape,
                        store.get(id).shape()
                    ),
                });
            }
            *store.get_mut(id) = Tensor::new(shape.clone(), data.clone())?;
        }
        Ok(())
    }

    pub fn push_extra(&mut self, key: &str, values: Vec<f32>) {
        self.extra.push((key.to_string(), values));
    }

    pub fn extra_values(&self, key: &str) -> Result<&[f32]> {
        self.extra
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_slice())
            .ok_or_else(|| Error::Format {
                offset: 0,
                detail: format!("checkpoint missing extra block `{key}`"),
            })
    }

    /// Check architecture and kind before restoring parameters.
    pub fn verify(&self, kind: &str, manifest: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Format {
                offset: 0,
                detail: format!("checkpoint kind `{}` where `{kind}` expected", self.kind),
            });
        }
        if self.manifest != manifest {
            return Err(Error::Format {
                offset: 0,
                detail: format!(
                    "architecture manifest mismatch\n-- checkpoint --\n{}\n-- model --\n{manifest}",
                    self.manifest
                ),
            });
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = ByteWriter::new();
        w.bytes(CKPT_MAGIC);
        w.u16(1); // version
        w.short_str(&self.kind);
        w.u64(self.config_hash);
        w.long_str(&self.manifest);
        w.u32(self.meta.len() as u32);
        for (k, v) in &self.meta {
            w.short_str(k);
            w.f64(*v);
        }
        w.u32(self.params.len() as u32);
        for (name, shape, data) in &self.params {
            w.short_str(name);
            w.u8(shape.len() as u8);
            for &d in shape {
                w.u32(d as u32);
            }
            w.f32_slice(data);
        }
        w.u32(self.extra.len() as u32);
        for (k, v) in &self.extra {
            w.short_str(k);
            w.u32(v.len() as u32);
            w.f32_slice(v);
        }
        w.write_file(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let data = read_file(path)?;
        let mut r = ByteReader::new(&data);
        r.magic(CKPT_MAGIC)?;
        let version = r.u16()?;
        if version != 1 {
            return Err(Error::Format {
                offset: r.offset() - 2,
                detail: format!("unsupported checkpoint version {version}"),
            });
        }
        let kind = r.short_str()?;
        let config_hash = r.u64()?;
        let manifest = r.long_str()?;
        let n_meta = r.u32()? as usize;
        let mut meta = Vec::with_capacity(n_meta);
        for _ in 0..n_meta {
            let k = r.short_str()?;
            let v = r.f64()?;
            meta.push((k, v));
        }
        let n_params = r.u32()? as usize;
        let mut params = Vec::with_capacity(n_params);
        for _ in 0..n_params {
            let name = r.short_str()?;
            let ndim = r.u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            let numel: usize = shape.iter().product();
            let data = r.f32_vec(numel)?;
            params.push((name, shape, data));
        }
        let n_extra = r.u32()? as usize;
        let mut extra = Vec::with_capacity(n_extra);
        for _ in 0..n_extra {
            let k = r.short_str()?;
            let n = r.u32()? as usize;
            extra.push((k, r.f32_vec(n)?));
        }
        r.done()?;
        Ok(Checkpoint {
            kind,
            config_hash,
            manifest,
            meta,
            params,
            extra,
        })
    }
}

/// FNV-1a over bytes; used for configuration hashes so artifacts can detect
/// they were produced under different settings. Stable across platforms and
/// builds, unlike the std hasher.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}
