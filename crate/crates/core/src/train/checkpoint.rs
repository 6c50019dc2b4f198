//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "MIMCSPT\0"
//! version    u32
//! meta_len   u32, then meta_len bytes of UTF-8 JSON (CheckpointMeta)
//! count      u32 tensors, each:
//!     name_len u32, name bytes (UTF-8)
//!     dtype    u8   (1 = f32)
//!     ndim     u32, then ndim × u64 dims
//!     payload  numel × 4 bytes
//! crc32      u32 over every preceding byte
//! ```
//!
//! Parameters are stored under their own names; optimizer moments under
//! `optim.m/<name>` and `optim.v/<name>`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::optim::AdamState;
use crate::error::{Error, Result};
use crate::tensor::{RngState, Tensor};
use crate::vit::{HeadSpec, ParamTable, VitConfig};

pub const MAGIC: &[u8; 8] = b"MIMCSPT\0";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 1;
const MOMENT_M: &str = "optim.m/";
const MOMENT_V: &str = "optim.v/";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: VitConfig,
    pub head: Option<HeadSpec>,
    /// Echo of the stage configuration that produced the checkpoint.
    pub stage: Option<serde_json::Value>,
    /// Learning-rate schedule position at save time.
    pub schedule_step: u64,
    pub optimizer_step: u64,
    pub rng: Option<RngState>,
    /// Ids of every completed stage, oldest first.
    pub provenance: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint {
    pub meta: CheckpointMeta,
    pub params: ParamTable<f32>,
    pub optimizer: Option<AdamState<f32>>,
}

impl ModelCheckpoint {
    pub fn new(model: VitConfig, params: ParamTable<f32>) -> Self {
        Self {
            meta: CheckpointMeta {
                model,
                head: None,
                stage: None,
                schedule_step: 0,
                optimizer_step: 0,
                rng: None,
                provenance: Vec::new(),
            },
            params,
            optimizer: None,
        }
    }

    pub fn has_encoder(&self) -> bool {
        self.params.names().any(|n| n.starts_with(crate::vit::ENCODER_PREFIX))
    }

    pub fn has_decoder(&self) -> bool {
        self.params.names().any(|n| n.starts_with(crate::vit::DECODER_PREFIX))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta)?;
        put_len(&mut out, meta.len())?;
        out.extend_from_slice(&meta);

        let mut tensors: Vec<(String, &Tensor<f32>)> =
            self.params.iter().map(|(n, t)| (n.to_string(), t)).collect();
        if let Some(opt) = &self.optimizer {
            tensors.extend(opt.m.iter().map(|(n, t)| (format!("{MOMENT_M}{n}"), t)));
            tensors.extend(opt.v.iter().map(|(n, t)| (format!("{MOMENT_V}{n}"), t)));
        }
        put_len(&mut out, tensors.len())?;
        for (name, t) in tensors {
            put_len(&mut out, name.len())?;
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F32);
            put_len(&mut out, t.ndim())?;
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    /// `path` is only used to label errors.
    pub fn from_bytes(raw: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::format(path, reason);
        if raw.len() < MAGIC.len() + 8 || &raw[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)".into()));
        }
        let (body, footer) = raw.split_at(raw.len() - 4);
        let stored = u32::from_le_bytes(footer.try_into().unwrap());
        if crc32fast::hash(body) != stored {
            return Err(bad("CRC32 mismatch".into()));
        }
        let mut r = Reader { buf: body, pos: 8 };
        let version = r.u32().map_err(&bad)?;
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let meta_len = r.u32().map_err(&bad)? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len).map_err(&bad)?)
            .map_err(|e| bad(format!("meta: {e}")))?;

        let mut params = ParamTable::new();
        let mut m = ParamTable::new();
        let mut v = ParamTable::new();
        let count = r.u32().map_err(&bad)?;
        for _ in 0..count {
            let name_len = r.u32().map_err(&bad)? as usize;
            let name = std::str::from_utf8(r.take(name_len).map_err(&bad)?)
                .map_err(|e| bad(format!("tensor name: {e}")))?
                .to_string();
            let dtype = r.take(1).map_err(&bad)?[0];
            if dtype != DTYPE_F32 {
                return Err(bad(format!("{name}: unsupported dtype tag {dtype}")));
            }
            let ndim = r.u32().map_err(&bad)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64().map_err(&bad)? as usize);
            }
            let numel: usize = shape.iter().product();
            let payload = r.take(numel * 4).map_err(&bad)?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(shape, data)?;
            if let Some(n) = name.strip_prefix(MOMENT_M) {
                m.insert(n, t);
            } else if let Some(n) = name.strip_prefix(MOMENT_V) {
                v.insert(n, t);
            } else {
                params.insert(name, t);
            }
        }
        if r.pos != body.len() {
            return Err(bad(format!("{} trailing bytes", body.len() - r.pos)));
        }
        let optimizer = (!m.is_empty() || !v.is_empty()).then(|| AdamState {
            step: meta.optimizer_step,
            m,
            v,
        });
        Ok(Self {
            meta,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&raw, path)
    }
}

fn put_len(out: &mut Vec<u8>, n: usize) -> Result<()> {
    let n = u32::try_from(n).map_err(|_| Error::invalid(format!("length {n} exceeds u32")))?;
    out.extend_from_slice(&n.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Verifies that `params` holds exactly the expected tensors with the
/// expected shapes; the error lists every offending tensor.
pub fn check_shapes(params: &ParamTable<f32>, expected: &[(String, Vec<usize>)]) -> Result<()> {
    let mut problems = Vec::new();
    for (name, shape) in expected {
        match params.get(name) {
            Ok(t) if t.shape() == shape.as_slice() => {}
            Ok(t) => problems.push(format!("{name}: checkpoint {:?}, config {shape:?}", t.shape())),
            Err(_) => problems.push(format!("{name}: missing")),
        }
    }
    for name in params.names() {
        if !expected.iter().any(|(n, _)| n == name) {
            problems.push(format!("{name}: unexpected"));
        }
    }
    if problems.is_empty() {
        Ok(())
    } else {
        Err(Error::Incompatible(problems.join("; ")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Rng;

    fn sample() -> ModelCheckpoint {
        let cfg = VitConfig::nano();
        let params = cfg.init_pretrain(&Rng::new(1)).unwrap();
        let mut ck = ModelCheckpoint::new(cfg, params.clone());
        ck.meta.provenance = vec!["A".into(), "B_train".into()];
        ck.meta.rng = Some(Rng::new(5).substream("x").state());
        ck.meta.stage = Some(serde_json::json!({"id": "B_train", "epochs": 3}));
        ck.meta.schedule_step = 17;
        ck.meta.optimizer_step = 17;
        let mut m = params.clone();
        m.iter_mut().for_each(|(_, t)| t.data_mut().iter_mut().for_each(|v| *v *= 0.5));
        ck.optimizer = Some(AdamState { step: 17, m, v: params });
        ck
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let tmp = tempfile::tempdir().unwrap();
        let a = tmp.path().join("a.ckpt");
        let b = tmp.path().join("b.ckpt");
        let ck = sample();
        ck.save(&a).unwrap();
        let loaded = ModelCheckpoint::load(&a).unwrap();
        assert_eq!(loaded, ck);
        loaded.save(&b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn header_layout() {
        let bytes = sample().to_bytes().unwrap();
        assert_eq!(&bytes[..8], b"MIMCSPT\0");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), FORMAT_VERSION);
        let meta_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let meta: serde_json::Value = serde_json::from_slice(&bytes[16..16 + meta_len]).unwrap();
        assert_eq!(meta["provenance"], serde_json::json!(["A", "B_train"]));
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = sample().to_bytes().unwrap();
        let p = Path::new("x.ckpt");
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        let err = ModelCheckpoint::from_bytes(&bytes, p).unwrap_err();
        assert!(err.to_string().contains("CRC32"), "{err}");
        assert!(ModelCheckpoint::from_bytes(b"MIMCSPT\0", p).is_err());
        assert!(ModelCheckpoint::from_bytes(b"garbage garbage garbage", p).is_err());
    }

    #[test]
    fn shape_check_lists_offenders() {
        let cfg = VitConfig::nano();
        let mut params = cfg.init_pretrain(&Rng::new(0)).unwrap();
        params.insert("encoder.norm.weight", Tensor::zeros(vec![3]));
        params.remove("decoder.mask_token");
        let err = check_shapes(&params, &cfg.pretrain_shapes()).unwrap_err().to_string();
        assert!(err.contains("encoder.norm.weight") && err.contains("decoder.mask_token"), "{err}");
    }
}
