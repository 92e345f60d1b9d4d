//! Binary checkpoints: `HS3C`, version, a JSON header with the network and
//! fusion layout, then every parameter as name, shape and little-endian f64s.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::net::{Network, NetworkConfig};
use super::params::ParamStore;
use crate::error::{Error, Result};
use crate::ocrfuse::FusePlan;
use crate::synthdata::ByteReader;

const MAGIC: &[u8; 4] = b"HS3C";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    network: NetworkConfig,
    fuse: Option<FusePlan>,
}

pub fn checkpoint_bytes(net: &Network) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&Header {
        network: net.config().clone(),
        fuse: net.fuse_plan().cloned(),
    })?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(net.params().len() as u32).to_le_bytes());
    for p in net.params().params() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
        for &d in &p.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &p.value {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn network_from_bytes(bytes: &[u8]) -> Result<Network> {
    let mut r = ByteReader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic at byte 0)".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version} at byte 4")));
    }
    let len = r.u32("header length")? as usize;
    let header: Header = serde_json::from_slice(r.take(len, "header")?)?;
    let count = r.u32("parameter count")? as usize;
    let mut params = ParamStore::new();
    for i in 0..count {
        let at = r.pos;
        let name_len = r.u32("parameter name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "parameter name")?)
            .map_err(|_| Error::Format(format!("parameter {i} name at byte {at} is not UTF-8")))?
            .to_string();
        let ndim = r.u32("shape rank")? as usize;
        if ndim > 4 {
            return Err(Error::Format(format!("parameter `{name}` has rank {ndim}")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64("shape")? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * 8, &format!("values of `{name}`"))?;
        let value = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        params.push(name, &shape, value)?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after byte {}", bytes.len() - r.pos, r.pos)));
    }
    Network::from_parts(header.network, header.fuse, params)
}

pub fn save_checkpoint(net: &Network, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(net)?).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Network> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    network_from_bytes(&bytes)
}
