//! Binary checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! "PBEU" | version u32 | sha256(config json) [32] | config_len u32 | config json
//! | iteration u64 | array_count u32
//! | per array: name_len u32 | name | kind u8 | rank u8 | dims u32×rank | f32×numel
//! ```
//!
//! `kind` is 0 for learnable parameters, 1 for buffers (BN running
//! statistics) and 2 for momentum velocity.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::nn::ModuleParams;
use crate::pbe::PbeNet;
use crate::tensor::Tensor;
use crate::train::Velocity;

pub const MAGIC: &[u8; 4] = b"PBEU";
pub const VERSION: u32 = 1;

const KIND_PARAM: u8 = 0;
const KIND_BUFFER: u8 = 1;
const KIND_VELOCITY: u8 = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub iteration: u64,
    pub params: ModuleParams<f32>,
    pub velocity: Option<Velocity<f32>>,
}

fn put_array(out: &mut Vec<u8>, name: &str, kind: u8, t: &Tensor<f32>) {
    out.extend((name.len() as u32).to_le_bytes());
    out.extend(name.as_bytes());
    out.push(kind);
    out.push(t.shape().len() as u8);
    for &d in t.shape() {
        out.extend((d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend(v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: self.pos,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!("truncated: need {n} more bytes")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

impl Checkpoint {
    pub fn new(config: RunConfig, iteration: u64, params: ModuleParams<f32>, velocity: Option<Velocity<f32>>) -> Self {
        Self {
            config,
            iteration,
            params,
            velocity,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let json = self.config.to_json();
        let mut out = Vec::new();
        out.extend(MAGIC);
        out.extend(VERSION.to_le_bytes());
        out.extend(Sha256::digest(json.as_bytes()));
        out.extend((json.len() as u32).to_le_bytes());
        out.extend(json.as_bytes());
        out.extend(self.iteration.to_le_bytes());
        let vel = self.velocity.as_ref().map_or(&[][..], |v| &v.entries[..]);
        out.extend(((self.params.len() + vel.len()) as u32).to_le_bytes());
        for e in self.params.entries() {
            let kind = if e.learnable { KIND_PARAM } else { KIND_BUFFER };
            put_array(&mut out, &e.name, kind, &e.tensor);
        }
        for (name, t) in vel {
            put_array(&mut out, name, KIND_VELOCITY, t);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(4)? != MAGIC {
            r.pos = 0;
            return Err(r.err("bad magic, expected PBEU"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.err(format!("unsupported version {version}")));
        }
        let digest = r.take(32)?.to_vec();
        let len = r.u32()? as usize;
        let json_at = r.pos;
        let json = r.take(len)?;
        if Sha256::digest(json)[..] != digest[..] {
            r.pos = json_at;
            return Err(r.err("config digest mismatch"));
        }
        let text = std::str::from_utf8(json).map_err(|_| r.err("config is not UTF-8"))?;
        let config: RunConfig = serde_json::from_str(text)?;
        let iteration = r.u64()?;
        let count = r.u32()? as usize;
        let mut params = ModuleParams::new();
        let mut velocity = Vec::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| r.err("array name is not UTF-8"))?
                .to_string();
            let kind = r.u8()?;
            let rank = r.u8()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * 4)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::from_vec(&shape, data).map_err(|e| r.err(format!("array `{name}`: {e}")))?;
            match kind {
                KIND_PARAM | KIND_BUFFER => params
                    .insert(name, t, kind == KIND_PARAM)
                    .map_err(|e| r.err(e.to_string()))?,
                KIND_VELOCITY => velocity.push((name, t)),
                k => return Err(r.err(format!("unknown array kind {k}"))),
            }
        }
        if r.pos != bytes.len() {
            return Err(r.err("trailing bytes"));
        }
        Ok(Self {
            config,
            iteration,
            params,
            velocity: (!velocity.is_empty()).then_some(Velocity { entries: velocity }),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Rebuilds the network and checks that every stored array matches the
    /// name, shape and kind the configuration expects.
    pub fn network(&self) -> Result<PbeNet> {
        let net = PbeNet::new(self.config.model.clone())?;
        let expected: ModuleParams<f32> = net.init_params(0)?;
        let mismatch = |msg: String| Error::Config(format!("checkpoint does not match its model config: {msg}"));
        if expected.len() != self.params.len() {
            return Err(mismatch(format!(
                "{} arrays, expected {}",
                self.params.len(),
                expected.len()
            )));
        }
        for (a, b) in expected.entries().iter().zip(self.params.entries()) {
            if a.name != b.name || a.tensor.shape() != b.tensor.shape() || a.learnable != b.learnable {
                return Err(mismatch(format!("`{}` vs `{}`", a.name, b.name)));
            }
        }
        Ok(net)
    }
}
