//! Checkpoint files: `FTVPCKPT`, a `u32` version, the SHA-256 digest of the
//! network config, the config itself as JSON, then named tensor records.

use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ftvp_core::network::NetConfig;
use ftvp_core::params::ParamStore;
use sha2::{Digest, Sha256};

use crate::error::{AppError, IoContext, Result};
use crate::tensor_io::{read_tensor, read_u32, write_tensor};

pub const MAGIC: &[u8; 8] = b"FTVPCKPT";
pub const VERSION: u32 = 1;
const MAX_NAME: usize = 1 << 12;
const MAX_CONFIG: usize = 1 << 20;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub net: NetConfig,
    pub params: ParamStore<f32>,
}

/// SHA-256 of the canonical JSON form of `net`.
pub fn config_digest(net: &NetConfig) -> [u8; 32] {
    let json = serde_json::to_vec(net).expect("config serializes");
    Sha256::digest(json).into()
}

fn bad(msg: String) -> AppError {
    AppError::Data(format!("checkpoint: {msg}"))
}

impl Checkpoint {
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let io = |e: std::io::Error| bad(e.to_string());
        let json = serde_json::to_vec(&self.net).map_err(|e| bad(e.to_string()))?;
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&VERSION.to_le_bytes()).map_err(io)?;
        w.write_all(&config_digest(&self.net)).map_err(io)?;
        w.write_all(&(json.len() as u32).to_le_bytes()).map_err(io)?;
        w.write_all(&json).map_err(io)?;
        w.write_all(&(self.params.len() as u32).to_le_bytes()).map_err(io)?;
        for (name, t) in self.params.iter() {
            w.write_all(&(name.len() as u32).to_le_bytes()).map_err(io)?;
            w.write_all(name.as_bytes()).map_err(io)?;
            write_tensor(w, t)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let io = |e: std::io::Error| bad(e.to_string());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)".into()));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}, expected {VERSION}")));
        }
        let mut digest = [0u8; 32];
        r.read_exact(&mut digest).map_err(io)?;
        let json_len = read_u32(r)? as usize;
        if json_len > MAX_CONFIG {
            return Err(bad(format!("config block of {json_len} bytes")));
        }
        let mut json = vec![0u8; json_len];
        r.read_exact(&mut json).map_err(io)?;
        let net: NetConfig = serde_json::from_slice(&json).map_err(|e| bad(format!("config: {e}")))?;
        if config_digest(&net) != digest {
            return Err(bad("config digest mismatch".into()));
        }
        let count = read_u32(r)? as usize;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let n = read_u32(r)? as usize;
            if n > MAX_NAME {
                return Err(bad(format!("tensor name of {n} bytes")));
            }
            let mut name = vec![0u8; n];
            r.read_exact(&mut name).map_err(io)?;
            let name = String::from_utf8(name).map_err(|_| bad("tensor name is not UTF-8".into()))?;
            let t = read_tensor(r).map_err(|e| bad(format!("`{name}`: {e}")))?;
            params.insert(name, t);
        }
        let expected = ftvp_core::network::init_params::<f32>(&net, 0)?;
        for (name, t) in expected.iter() {
            let got = params.get(name).map_err(|_| bad(format!("missing tensor `{name}`")))?;
            if got.shape() != t.shape() {
                return Err(bad(format!("`{name}` has shape {:?}, config expects {:?}", got.shape(), t.shape())));
            }
        }
        if params.len() != expected.len() {
            return Err(bad(format!("{} tensors, config expects {}", params.len(), expected.len())));
        }
        Ok(Self { net, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(path).at(path)?);
        self.write_to(&mut w)?;
        w.flush().at(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(fs::File::open(path).at(path)?);
        Self::read_from(&mut r).map_err(|e| match e {
            AppError::Data(m) => AppError::Data(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}
