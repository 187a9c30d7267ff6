//! Binary checkpoints with a JSON sidecar.
//!
//! Layout (little-endian): magic `TAM1`, `u32` tensor count, then per tensor
//! `u16` name length, UTF-8 name, `u8` rank, `rank × u32` extents and the
//! row-major `f32` payload. Optimizer moments, when saved, are stored as
//! extra tensors under the `adam.m.` and `adam.v.` prefixes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::RankingReport;
use crate::model::{ModelConfig, TransAm};
use crate::optim::AdamState;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"TAM1";
const FIRST_MOMENT: &str = "adam.m.";
const SECOND_MOMENT: &str = "adam.v.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub entity_count: usize,
    pub relation_count: usize,
    pub step: u64,
    /// Metrics recorded at save time.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metrics: Option<RankingReport>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: TransAm,
    pub store: ParamStore,
    pub meta: CheckpointMeta,
    pub adam: Option<AdamState>,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Serializes named tensors, narrowing values to `f32`.
pub fn encode_tensors<'a>(tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<Vec<u8>> {
    let tensors: Vec<_> = tensors.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        let bytes = name.as_bytes();
        let len = u16::try_from(bytes.len()).map_err(|_| Error::Config(format!("tensor name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(bytes);
        let rank = u8::try_from(t.shape().len()).map_err(|_| Error::Config(format!("rank too high: {name}")))?;
        out.push(rank);
        for &e in t.shape() {
            let e = u32::try_from(e).map_err(|_| Error::Config(format!("extent too large: {name}")))?;
            out.extend_from_slice(&e.to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(Error::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Parses the binary layout back into named tensors, in file order.
pub fn decode_tensors(buf: &[u8]) -> Result<Vec<(String, Tensor)>> {
    if buf.len() < 4 || &buf[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    let mut r = Reader { buf, pos: 4 };
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Config("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u8()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .ok_or(Error::Truncated)?;
        let payload = r.take(numel.checked_mul(4).ok_or(Error::Truncated)?)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != buf.len() {
        return Err(Error::Config(format!(
            "{} trailing bytes after checkpoint",
            buf.len() - r.pos
        )));
    }
    Ok(out)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Writes parameters (and optionally Adam moments) to `path` and the
/// metadata to `<path>.json`. Both files are replaced atomically.
pub fn save_checkpoint(
    path: impl AsRef<Path>,
    store: &ParamStore,
    meta: &CheckpointMeta,
    adam: Option<&AdamState>,
) -> Result<()> {
    let path = path.as_ref();
    let mut moments = Vec::new();
    if let Some(a) = adam {
        for (prefix, table) in [(FIRST_MOMENT, &a.first_moment), (SECOND_MOMENT, &a.second_moment)] {
            for ((name, t), m) in store.iter().zip(table) {
                moments.push((format!("{prefix}{name}"), Tensor::new(t.shape().to_vec(), m.clone())?));
            }
        }
    }
    let all = store.iter().chain(moments.iter().map(|(n, t)| (n.as_str(), t)));
    write_atomic(path, &encode_tensors(all)?)?;
    let mut sidecar = meta.clone();
    if let Some(a) = adam {
        sidecar.step = a.step;
    }
    write_atomic(&sidecar_path(path), serde_json::to_string_pretty(&sidecar)?.as_bytes())
}

pub fn load_meta(path: impl AsRef<Path>) -> Result<CheckpointMeta> {
    let text = fs::read_to_string(sidecar_path(path.as_ref()))?;
    Ok(serde_json::from_str(&text)?)
}

/// Reads a checkpoint and checks every tensor against the stored config.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let tensors = decode_tensors(&bytes)?;
    let meta = load_meta(path)?;
    let mut store = ParamStore::new();
    let mut first = Vec::new();
    let mut second = Vec::new();
    for (name, t) in tensors {
        if let Some(n) = name.strip_prefix(FIRST_MOMENT) {
            first.push((n.to_string(), t));
        } else if let Some(n) = name.strip_prefix(SECOND_MOMENT) {
            second.push((n.to_string(), t));
        } else {
            store.insert(name, t);
        }
    }
    let model = TransAm::resolve(meta.model.clone(), meta.entity_count, meta.relation_count, &store)?;
    let adam = if first.is_empty() && second.is_empty() {
        None
    } else {
        let mut state = AdamState::new(&store);
        state.step = meta.step;
        for (moments, table) in [(first, &mut state.first_moment), (second, &mut state.second_moment)] {
            for (name, t) in moments {
                let id = store.id(&name)?;
                let expected = store.get(id).shape();
                if t.shape() != expected {
                    return Err(Error::CheckpointShape {
                        name,
                        expected: expected.to_vec(),
                        found: t.shape().to_vec(),
                    });
                }
                table[id.index()] = t.into_data();
            }
        }
        Some(state)
    };
    Ok(Checkpoint {
        model,
        store,
        meta,
        adam,
    })
}
