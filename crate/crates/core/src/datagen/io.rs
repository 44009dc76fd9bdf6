//! Dataset file format.
//!
//! ```text
//! "QGSD" | version u8 | count u32
//! per record: body_len u32 | L u32 | valid_len u32 | d_f u32
//!             | topics u32[L] | texts u32[L] | items u32[L]
//!             | timestamps u64[L] | labels u8[L] | features f32[L*d_f]
//! ```
//! All integers little-endian. A zero-byte file is an empty dataset.

use std::fs;
use std::path::Path;

use super::Session;
use crate::binfmt::{put_f32s, put_u32s, put_u64s, Reader};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"QGSD";
const VERSION: u8 = 1;

pub fn encode_dataset(sessions: &[Session]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(sessions.len() as u32).to_le_bytes());
    for s in sessions {
        let mut body = Vec::new();
        put_u32s(&mut body, &[s.len() as u32, s.valid_len as u32, s.feature_dim as u32]);
        put_u32s(&mut body, &s.query_topic_ids);
        put_u32s(&mut body, &s.query_text_ids);
        put_u32s(&mut body, &s.item_ids);
        put_u64s(&mut body, &s.timestamps);
        body.extend_from_slice(&s.click_labels);
        put_f32s(&mut body, &s.features);
        out.extend_from_slice(&(body.len() as u32).to_le_bytes());
        out.extend_from_slice(&body);
    }
    out
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Vec<Session>> {
    if bytes.is_empty() {
        return Ok(Vec::new());
    }
    let mut r = Reader::new(bytes);
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Parse {
            offset: 0,
            msg: "bad magic, expected QGSD".into(),
        });
    }
    let version = r.u8("version")?;
    if version != VERSION {
        return Err(Error::Parse {
            offset: 4,
            msg: format!("unsupported version {version}"),
        });
    }
    let count = r.u32("record count")? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let start = r.offset();
        let body_len = r.u32(&format!("record {i} length"))? as usize;
        let body_start = r.offset();
        let sec = |name: &str| format!("record {i} {name}");
        let l = r.u32(&sec("session length"))? as usize;
        let valid_len = r.u32(&sec("valid_len"))? as usize;
        let d = r.u32(&sec("feature_dim"))? as usize;
        if valid_len > l {
            return Err(Error::Parse {
                offset: start,
                msg: format!("record {i}: valid_len {valid_len} exceeds length {l}"),
            });
        }
        let query_topic_ids = r.u32s(l, &sec("query_topic_ids"))?;
        let query_text_ids = r.u32s(l, &sec("query_text_ids"))?;
        let item_ids = r.u32s(l, &sec("item_ids"))?;
        let timestamps = r.u64s(l, &sec("timestamps"))?;
        let click_labels = r.take(l, &sec("click_labels"))?.to_vec();
        let n_feat = l.checked_mul(d).ok_or_else(|| Error::Parse {
            offset: start,
            msg: format!("record {i}: feature size overflow"),
        })?;
        let features = r.f32s(n_feat, &sec("features"))?;
        if r.offset() - body_start != body_len {
            return Err(Error::Parse {
                offset: start,
                msg: format!(
                    "record {i}: declared length {body_len}, decoded {}",
                    r.offset() - body_start
                ),
            });
        }
        out.push(Session {
            query_topic_ids,
            query_text_ids,
            item_ids,
            timestamps,
            click_labels,
            features,
            feature_dim: d,
            valid_len,
        });
    }
    if r.remaining() != 0 {
        return Err(Error::Parse {
            offset: r.offset(),
            msg: format!("{} trailing bytes after last record", r.remaining()),
        });
    }
    Ok(out)
}

pub fn write_dataset(path: impl AsRef<Path>, sessions: &[Session]) -> Result<()> {
    fs::write(path, encode_dataset(sessions))?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<Session>> {
    decode_dataset(&fs::read(path)?)
}
