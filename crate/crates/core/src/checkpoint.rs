//! Self-describing checkpoint files.
//!
//! Layout (little-endian): magic `MCK1`, u32 version, u64 header length,
//! JSON header, u32 tensor count, then per tensor a u32-length-prefixed name,
//! a dtype tag (0 = f32, 1 = f64), u32 rank, u64 dims and the raw values.
//! A SHA-256 digest of everything before it closes the file.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{ChannelPanel, NormStats};
use crate::error::{Error, Result};
use crate::network::{Denoiser, NetworkConfig, ParamStore};
use crate::schedule::NoiseSchedule;

const MAGIC: &[u8; 4] = b"MCK1";
const VERSION: u32 = 1;
const PARAM_PREFIX: &str = "param.";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub network: NetworkConfig,
    pub schedule: NoiseSchedule,
    pub normalization: Option<NormStats>,
    pub panel: Option<ChannelPanel>,
    pub seed: u64,
    pub step: u64,
    /// Training configuration, RNG state and similar resume data.
    #[serde(default)]
    pub training: Option<serde_json::Value>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    /// Network parameters under `param.<name>`, plus any auxiliary tensors
    /// such as optimizer moments.
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new(header: CheckpointHeader, params: &ParamStore) -> Self {
        let tensors = params
            .iter()
            .map(|(n, v)| (format!("{PARAM_PREFIX}{n}"), v.as_tensor().detach()))
            .collect();
        Self { header, tensors }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t.detach());
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    /// Fresh parameter store holding copies of the saved weights.
    pub fn param_store(&self) -> Result<ParamStore> {
        let dtype = self
            .tensors
            .iter()
            .find(|(n, _)| n.starts_with(PARAM_PREFIX))
            .map(|(_, t)| t.dtype())
            .unwrap_or(DType::F32);
        let mut store = ParamStore::new(dtype);
        for (name, t) in &self.tensors {
            if let Some(short) = name.strip_prefix(PARAM_PREFIX) {
                store.insert(short, candle_core::Var::from_tensor(&t.copy()?)?);
            }
        }
        Ok(store)
    }

    pub fn denoiser(&self) -> Result<Denoiser> {
        Denoiser::from_store(self.header.network.clone(), self.param_store()?)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let dims = t.dims();
            let tag: u8 = match t.dtype() {
                DType::F32 => 0,
                DType::F64 => 1,
                other => return Err(Error::InvalidConfig(format!("cannot store dtype {other:?}"))),
            };
            out.push(tag);
            out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
            for &d in dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            let flat = t.flatten_all()?;
            if tag == 0 {
                for v in flat.to_vec1::<f32>()? {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            } else {
                for v in flat.to_vec1::<f64>()? {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != MAGIC {
            return Err(Error::BadMagic(origin.to_path_buf()));
        }
        if bytes.len() < 4 + 4 + 8 + 32 {
            return Err(Error::TruncatedFile(format!("{}: {} bytes", origin.display(), bytes.len())));
        }
        let mut r = Reader { buf: bytes, pos: 4, origin };
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::VersionUnsupported(version));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(Error::TruncatedFile(format!("{}: checksum mismatch", origin.display())));
        }
        r.buf = body;
        let hlen = r.u64()? as usize;
        let header: CheckpointHeader = serde_json::from_slice(r.take(hlen)?)?;
        let count = r.u32()? as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec())
                .map_err(|_| Error::TruncatedFile(format!("{}: bad tensor name", origin.display())))?;
            let tag = r.take(1)?[0];
            let rank = r.u32()? as usize;
            let dims: Vec<usize> = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<_>>()?;
            let n: usize = dims.iter().product();
            let t = match tag {
                0 => {
                    let raw = r.take(n * 4)?;
                    let v: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
                    Tensor::from_vec(v, dims, &Device::Cpu)?
                }
                1 => {
                    let raw = r.take(n * 8)?;
                    let v: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
                    Tensor::from_vec(v, dims, &Device::Cpu)?
                }
                t => return Err(Error::TruncatedFile(format!("{}: unknown dtype tag {t}", origin.display()))),
            };
            tensors.insert(name, t);
        }
        if r.pos != body.len() {
            return Err(Error::TruncatedFile(format!("{}: trailing bytes", origin.display())));
        }
        Ok(Self { header, tensors })
    }

    /// Writes atomically (temporary file then rename).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let write = || -> std::io::Result<()> {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
            std::fs::rename(&tmp, path)
        };
        write().map_err(|e| Error::disk(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::disk(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// Hex SHA-256 of a file, used to tie outputs to the checkpoint that made them.
pub fn file_digest(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::disk(path, e))?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

/// Hex SHA-256 of the JSON encoding of `value`.
pub fn json_digest(value: &impl Serialize) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    Ok(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::TruncatedFile(format!(
                "{}: needed {n} bytes at offset {}",
                self.origin.display(),
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ChannelStats;
    use crate::schedule::ScheduleKind;

    fn header() -> CheckpointHeader {
        let network = NetworkConfig {
            channels: 3,
            height: 4,
            width: 4,
            timesteps: 30,
            base_width: 8,
            attention_dim: 4,
            time_dim: 8,
            ..NetworkConfig::default()
        };
        CheckpointHeader {
            network,
            schedule: NoiseSchedule::new(ScheduleKind::Cosine, 30).unwrap(),
            normalization: Some(NormStats {
                clip_percentile: 0.99,
                channels: vec![
                    ChannelStats { clip: 0.1 + 0.2, min: -1.0e-38, max: 3.4e38, degenerate: false },
                    ChannelStats { clip: 1.0 / 3.0, min: 0.0, max: 1.0, degenerate: true },
                    ChannelStats { clip: 7.0, min: -0.0, max: 9.999_999, degenerate: false },
                ],
            }),
            panel: Some(ChannelPanel::new(["a", "b", "c"]).unwrap()),
            seed: 17,
            step: 250,
            training: Some(serde_json::json!({"lr": 2e-4})),
        }
    }

    fn bits(t: &Tensor) -> Vec<u64> {
        match t.dtype() {
            DType::F32 => t.flatten_all().unwrap().to_vec1::<f32>().unwrap().iter().map(|v| v.to_bits() as u64).collect(),
            _ => t.flatten_all().unwrap().to_vec1::<f64>().unwrap().iter().map(|v| v.to_bits()).collect(),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let h = header();
        let net = Denoiser::new(h.network.clone(), 5, DType::F32).unwrap();
        let mut ck = Checkpoint::new(h.clone(), net.params());
        ck.insert("adam.m.x", Tensor::new(&[1.5f64, -0.0, f64::MIN_POSITIVE / 4.0], &Device::Cpu).unwrap());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.header, h);
        assert_eq!(back.tensors.len(), ck.tensors.len());
        for (name, t) in &ck.tensors {
            let u = back.tensor(name).unwrap();
            assert_eq!(t.dims(), u.dims());
            assert_eq!(bits(t), bits(u), "{name}");
        }
        let restored = back.denoiser().unwrap();
        assert_eq!(restored.num_params(), net.num_params());
        assert_eq!(Checkpoint::load(&path).unwrap().to_bytes().unwrap(), std::fs::read(&path).unwrap());
    }

    #[test]
    fn detects_corruption() {
        let h = header();
        let net = Denoiser::new(h.network.clone(), 5, DType::F32).unwrap();
        let bytes = Checkpoint::new(h, net.params()).to_bytes().unwrap();
        let p = Path::new("mem");
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bad, p), Err(Error::BadMagic(_))));
        let mut flipped = bytes.clone();
        let mid = bytes.len() / 2;
        flipped[mid] ^= 1;
        assert!(matches!(Checkpoint::from_bytes(&flipped, p), Err(Error::TruncatedFile(_))));
        assert!(matches!(Checkpoint::from_bytes(&bytes[..bytes.len() - 40], p), Err(Error::TruncatedFile(_))));
        let mut v2 = bytes;
        v2[4] = 2;
        assert!(matches!(Checkpoint::from_bytes(&v2, p), Err(Error::VersionUnsupported(2))));
    }
}
