//! Binary checkpoint container. The byte layout is documented in
//! `docs/formats.md`; all integers are little-endian.

use std::path::Path;

use crate::autograd::Mat;
use crate::data::io::write_atomic;
use crate::error::{Result, VdtError};
use crate::model::config::VdtConfig;
use crate::model::params::{Param, ParamGroup, ParamStore};
use crate::model::Vdt;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VDTC";
pub const CHECKPOINT_VERSION: u8 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| VdtError::Format(format!("{v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// Serialise the config and every parameter as 32-bit floats.
pub fn checkpoint_bytes(model: &Vdt) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.push(CHECKPOINT_VERSION);
    let json = serde_json::to_vec(&model.config)?;
    put_u32(&mut out, json.len())?;
    out.extend_from_slice(&json);
    put_u32(&mut out, model.params.len())?;
    for p in model.params.iter() {
        put_u32(&mut out, p.name.len())?;
        out.extend_from_slice(p.name.as_bytes());
        let shape = p.shape();
        out.push(shape.len() as u8);
        for d in shape {
            put_u32(&mut out, d)?;
        }
        for v in p.value.iter() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                VdtError::Format(format!("truncated checkpoint at byte {}", self.pos))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Vdt> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(VdtError::Format("bad checkpoint magic".into()));
    }
    let version = r.u8()?;
    if version != CHECKPOINT_VERSION {
        return Err(VdtError::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let json_len = r.u32()?;
    let config: VdtConfig = serde_json::from_slice(r.take(json_len)?)?;
    let count = r.u32()?;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()?;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| VdtError::Format("parameter name is not UTF-8".into()))?;
        let ndim = r.u8()? as usize;
        let dims = (0..ndim).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let (rows, cols) = match dims[..] {
            [d] => (1, d),
            [a, b] => (a, b),
            _ => return Err(VdtError::Format(format!("`{name}` has {ndim} dims"))),
        };
        let n = rows * cols;
        let data = r.take(n * 4)?;
        let vals = data
            .chunks_exact(4)
            .map(|b| f64::from(f32::from_le_bytes(b.try_into().expect("4 bytes"))))
            .collect();
        let group =
            ParamGroup::from_name(&name).ok_or_else(|| VdtError::UntaggedParam(name.clone()))?;
        params.push(Param {
            name,
            group,
            trainable: true,
            value: Mat::from_shape_vec((rows, cols), vals).expect("sized"),
        });
    }
    if r.pos != bytes.len() {
        return Err(VdtError::Format(format!(
            "{} trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Vdt::from_parts(config, ParamStore::from_params(params)?)
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &Vdt) -> Result<()> {
    write_atomic(path.as_ref(), &checkpoint_bytes(model)?)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Vdt> {
    checkpoint_from_bytes(&std::fs::read(path)?)
}
