//! Binary checkpoint format.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! "IWN1"  u32 version
//! header:       u32 blocks, u32 message_channels, u32 hidden, u32 kernel, f64 clamp, f64 leaky_slope, u64 step
//! config:       u32 length, UTF-8 JSON (empty when absent)
//! parameters:   u32 count, then per tensor: u32 name length, name, u32 rank, u32 dims…, f32 values…
//! optimizer:    u8 present; if 1: u64 step, then m and v for every tensor as f32 values
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::inn::{Architecture, CouplingStack};
use crate::optim::AdamState;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"IWN1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub arch: Architecture,
    pub step: u64,
    /// Snapshot of the training configuration as JSON.
    pub config: Option<String>,
    pub params: ParamStore<f32>,
    pub optimizer: Option<AdamState<f32>>,
}

impl Checkpoint {
    pub fn new(stack: &CouplingStack<f32>, step: u64) -> Self {
        Self {
            arch: *stack.architecture(),
            step,
            config: None,
            params: stack.params().clone(),
            optimizer: None,
        }
    }

    pub fn stack(&self) -> Result<CouplingStack<f32>> {
        CouplingStack::from_params(self.arch, self.params.clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        let a = &self.arch;
        for v in [a.blocks, a.message_channels, a.hidden, a.kernel] {
            put_u32(&mut out, v as u32);
        }
        out.extend_from_slice(&a.clamp.to_le_bytes());
        out.extend_from_slice(&a.leaky_slope.to_le_bytes());
        out.extend_from_slice(&self.step.to_le_bytes());
        let cfg = self.config.as_deref().unwrap_or("");
        put_u32(&mut out, cfg.len() as u32);
        out.extend_from_slice(cfg.as_bytes());
        put_u32(&mut out, self.params.len() as u32);
        for (_, name, t) in self.params.iter() {
            put_u32(&mut out, name.len() as u32);
            out.extend_from_slice(name.as_bytes());
            put_u32(&mut out, t.shape().len() as u32);
            for &d in t.shape() {
                put_u32(&mut out, d as u32);
            }
            put_f32s(&mut out, t.data());
        }
        match &self.optimizer {
            None => out.push(0),
            Some(st) => {
                out.push(1);
                out.extend_from_slice(&st.step.to_le_bytes());
                for t in st.m.iter().chain(&st.v) {
                    put_f32s(&mut out, t.data());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Version { found: version, expected: VERSION });
        }
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = r.u32("header")? as usize;
        }
        let arch = Architecture {
            blocks: dims[0],
            message_channels: dims[1],
            hidden: dims[2],
            kernel: dims[3],
            clamp: r.f64("header")?,
            leaky_slope: r.f64("header")?,
        };
        arch.validate().map_err(|e| Error::Checkpoint(format!("invalid architecture: {e}")))?;
        let step = r.u64("header")?;
        let len = r.u32("config")? as usize;
        let cfg = r.take(len, "config")?;
        let config = if cfg.is_empty() {
            None
        } else {
            Some(String::from_utf8(cfg.to_vec()).map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?)
        };
        let count = r.u32("parameters")? as usize;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let n = r.u32("parameters")? as usize;
            let name = String::from_utf8(r.take(n, "parameters")?.to_vec())
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
            let rank = r.u32("parameters")? as usize;
            let shape = (0..rank).map(|_| r.u32("parameters").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let values = r.f32s(shape.iter().product(), "parameters")?;
            params.insert(name, Tensor::from_vec(&shape, values)?);
        }
        let optimizer = match r.take(1, "optimizer")?[0] {
            0 => None,
            1 => {
                let step = r.u64("optimizer")?;
                let mut read_all = || -> Result<Vec<Tensor<f32>>> {
                    params
                        .iter()
                        .map(|(_, _, t)| Tensor::from_vec(t.shape(), r.f32s(t.len(), "optimizer")?))
                        .collect()
                };
                let m = read_all()?;
                let v = read_all()?;
                Some(AdamState { step, m, v })
            }
            flag => return Err(Error::Checkpoint(format!("bad optimizer flag {flag}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let ckpt = Self { arch, step, config, params, optimizer };
        ckpt.stack()?;
        Ok(ckpt)
    }

    /// Writes to a temporary sibling file, then renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
        tmp.write_all(&self.to_bytes()).map_err(|e| Error::io(tmp.path(), e))?;
        tmp.as_file().sync_all().map_err(|e| Error::io(tmp.path(), e))?;
        tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f32s(out: &mut Vec<u8>, values: &[f32]) {
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, section: &'static str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Truncated { section });
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, section: &'static str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, section)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, section: &'static str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, section)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self, section: &'static str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, section)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, n: usize, section: &'static str) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or(Error::Truncated { section })?, section)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }
}
