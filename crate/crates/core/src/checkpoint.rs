//! Versioned binary checkpoints.
//!
//! Layout, little-endian: magic `MOMKDCKPT`, version `u16`, `u32` length and
//! the config JSON, the shuffling RNG state (`u64` seed, `u64` stream, `u128`
//! word position), `u32` d_in, `u32` g_dim, `u32` best epoch, `u8` group
//! count, then per group a `u8` code, `u32` tensor count and per tensor a
//! `u16`-prefixed name, `u32` rows, `u32` cols and `f64` values. A SHA-256 of
//! everything before it closes the file.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::MomkdModel;
use crate::params::{GroupKind, ParamGroups};
use crate::tensor::Tensor;
use crate::train::RngState;

pub const CHECKPOINT_MAGIC: &[u8; 9] = b"MOMKDCKPT";
pub const CHECKPOINT_VERSION: u16 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub rng: RngState,
    pub best_epoch: usize,
    pub model: MomkdModel,
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let json = self.config.to_json();
        put_u32(&mut out, json.len())?;
        out.extend_from_slice(json.as_bytes());
        out.extend_from_slice(&self.rng.seed.to_le_bytes());
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        let dims = self.model.layout.dims;
        put_u32(&mut out, dims.d_in)?;
        put_u32(&mut out, dims.g_dim)?;
        put_u32(&mut out, self.best_epoch)?;
        let groups: Vec<_> = self.model.params.iter().collect();
        out.push(groups.len() as u8);
        for (kind, group) in groups {
            out.push(kind.code());
            put_u32(&mut out, group.tensors().len())?;
            for (name, t) in group.iter() {
                let len = u16::try_from(name.len()).map_err(|_| Error::Data(format!("parameter name too long: {name}")))?;
                out.extend_from_slice(&len.to_le_bytes());
                out.extend_from_slice(name.as_bytes());
                let (r, c) = t.dims2();
                put_u32(&mut out, r)?;
                put_u32(&mut out, c)?;
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::format(path, reason);
        if bytes.len() < CHECKPOINT_MAGIC.len() + 2 + DIGEST_LEN || &bytes[..CHECKPOINT_MAGIC.len()] != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint (bad magic)".into()));
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        let mut r = Reader { buf: body, pos: CHECKPOINT_MAGIC.len(), path };
        let version = u16::from_le_bytes(r.take()?);
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("checksum mismatch".into()));
        }
        let json_len = r.u32()?;
        let json = std::str::from_utf8(r.bytes(json_len)?).map_err(|_| bad("config is not UTF-8".into()))?;
        let config = RunConfig::from_json(json)?;
        let rng = RngState {
            seed: u64::from_le_bytes(r.take()?),
            stream: u64::from_le_bytes(r.take()?),
            word_pos: u128::from_le_bytes(r.take()?),
        };
        let d_in = r.u32()?;
        let g_dim = r.u32()?;
        let best_epoch = r.u32()?;
        let n_groups = r.take::<1>()?[0];
        let mut params = ParamGroups::new();
        for _ in 0..n_groups {
            let code = r.take::<1>()?[0];
            let kind = GroupKind::from_code(code).ok_or_else(|| bad(format!("unknown parameter group code {code}")))?;
            for _ in 0..r.u32()? {
                let len = u16::from_le_bytes(r.take()?) as usize;
                let name = std::str::from_utf8(r.bytes(len)?)
                    .map_err(|_| bad("parameter name is not UTF-8".into()))?
                    .to_string();
                let rows = r.u32()?;
                let cols = r.u32()?;
                let count = rows.checked_mul(cols).ok_or_else(|| bad("tensor size overflows".into()))?;
                let raw = r.bytes(count.checked_mul(8).ok_or_else(|| bad("tensor size overflows".into()))?)?;
                let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                params.insert(kind, name, Tensor::new(vec![rows, cols], data)?);
            }
        }
        if r.pos != body.len() {
            return Err(bad(format!("{} trailing bytes", body.len() - r.pos)));
        }
        let mut model = MomkdModel::init(config.dims(d_in, g_dim), config.seed)?;
        model.load_params(params)?;
        Ok(Self { config, rng, best_epoch, model })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        std::fs::write(path, bytes).map_err(|e| Error::io(format!("cannot write {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Data(format!("cannot read checkpoint {}: {e}", path.display())))?;
        Self::decode(&bytes, path)
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Data(format!("value {v} does not fit the checkpoint format")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::format(self.path, format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.bytes(N)?.try_into().unwrap())
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take()?) as usize)
    }
}
