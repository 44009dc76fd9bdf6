//! Named-tensor checkpoint format.
//!
//! ```text
//! "QGSC" | version u8 | count u32
//! per tensor: name_len u16 | name | rank u8 | dims u32[rank] | f32[prod(dims)]
//! ```
//! Tensors are written in parameter-store order, so save, load and save
//! again reproduces the same bytes.

use std::fs;
use std::path::Path;

use crate::binfmt::{put_f32s, put_u32s, Reader};
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

const MAGIC: &[u8; 4] = b"QGSC";
const VERSION: u8 = 1;

pub fn encode_tensors<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a Tensor<f32>)>) -> Result<Vec<u8>> {
    let tensors: Vec<_> = tensors.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        let nb = name.as_bytes();
        if nb.len() > u16::MAX as usize || t.rank() > u8::MAX as usize {
            return Err(Error::Checkpoint(format!("tensor {name:?} cannot be encoded")));
        }
        out.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        out.extend_from_slice(nb);
        out.push(t.rank() as u8);
        put_u32s(&mut out, &t.shape().iter().map(|&d| d as u32).collect::<Vec<_>>());
        put_f32s(&mut out, t.data());
    }
    Ok(out)
}

pub fn decode_tensors(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    let ck = |e: Error| Error::Checkpoint(e.to_string());
    let mut r = Reader::new(bytes);
    if r.take(4, "magic").map_err(ck)? != MAGIC {
        return Err(Error::Checkpoint("bad magic, expected QGSC".into()));
    }
    let version = r.u8("version").map_err(ck)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32("tensor count").map_err(ck)? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 12));
    for i in 0..count {
        let len = r.u16(&format!("tensor {i} name length")).map_err(ck)? as usize;
        let name = String::from_utf8(r.take(len, &format!("tensor {i} name")).map_err(ck)?.to_vec())
            .map_err(|_| Error::Checkpoint(format!("tensor {i}: name is not UTF-8")))?;
        let rank = r.u8(&format!("{name} rank")).map_err(ck)? as usize;
        let dims: Vec<usize> = r
            .u32s(rank, &format!("{name} dims"))
            .map_err(ck)?
            .into_iter()
            .map(|d| d as usize)
            .collect();
        let numel = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("{name}: size overflow")))?;
        let data = r.f32s(numel, &format!("{name} values")).map_err(ck)?;
        out.push((name, Tensor::new(dims, data)?));
    }
    if r.remaining() != 0 {
        return Err(Error::Checkpoint(format!("{} trailing bytes", r.remaining())));
    }
    Ok(out)
}

pub fn save_params(path: impl AsRef<Path>, store: &ParamStore<f32>) -> Result<()> {
    let bytes = encode_tensors(store.iter().map(|(_, n, t)| (n, t)))?;
    fs::write(path, bytes)?;
    Ok(())
}

/// Replaces every parameter of `store` from the file. The file must hold
/// exactly the store's names with matching shapes.
pub fn load_params_into(bytes: &[u8], store: &mut ParamStore<f32>) -> Result<()> {
    let tensors = decode_tensors(bytes)?;
    let mut seen = vec![false; store.len()];
    for (name, t) in tensors {
        let id = store
            .id(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown tensor {name:?}")))?;
        if seen[id.index()] {
            return Err(Error::Checkpoint(format!("duplicate tensor {name:?}")));
        }
        if store.get(id).shape() != t.shape() {
            return Err(Error::Checkpoint(format!(
                "{name}: shape {:?}, model expects {:?}",
                t.shape(),
                store.get(id).shape()
            )));
        }
        seen[id.index()] = true;
        store.set(id, t)?;
    }
    if let Some(missing) = store.ids().find(|id| !seen[id.index()]) {
        return Err(Error::Checkpoint(format!("missing tensor {:?}", store.name(missing))));
    }
    Ok(())
}

pub fn load_params(path: impl AsRef<Path>, store: &mut ParamStore<f32>) -> Result<()> {
    load_params_into(&fs::read(path)?, store)
}
