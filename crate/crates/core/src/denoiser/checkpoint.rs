//! Self-describing checkpoint: header, normalization block, sorted tensor
//! directory, `f32` payload, trailing CRC32 of everything before it.

use std::collections::BTreeMap;
use std::path::Path;

use super::params::{ArchConfig, ConditioningMode, Weights};
use super::{DenoiserError, DenoiserParams};
use crate::datagen::NormStats;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"IKDN";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_params(params: &DenoiserParams, path: &Path) -> Result<(), DenoiserError> {
    std::fs::write(path, encode(params))?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<DenoiserParams, DenoiserError> {
    decode(&std::fs::read(path)?)
}

/// Serialized checkpoint, as written by [`save_params`].
pub fn checkpoint_bytes(params: &DenoiserParams) -> Vec<u8> {
    encode(params)
}

pub(crate) fn encode(params: &DenoiserParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    let a = &params.arch;
    let mode = match a.conditioning {
        ConditioningMode::Tokens => 0u32,
        ConditioningMode::Flat => 1,
    };
    let mut tensors = params.weights.tensors();
    tensors.sort_by(|x, y| x.0.cmp(&y.0));
    for v in [
        CHECKPOINT_VERSION,
        a.n_blocks as u32,
        a.n_heads as u32,
        a.d_model as u32,
        a.d_ff as u32,
        mode,
        a.timesteps as u32,
        params.dof as u32,
        params.n_ee as u32,
        tensors.len() as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let s = &params.stats;
    for v in s.q_lo.iter().chain(&s.q_hi).chain([&s.pos_scale]).chain(&s.pos_center) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let mut offset = 0u64;
    for (name, data, shape) in &tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for d in shape {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        out.extend_from_slice(&offset.to_le_bytes());
        offset += data.len() as u64 * 4;
    }
    for (_, data, _) in &tensors {
        for v in data.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], DenoiserError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| DenoiserError::Corrupt("unexpected end of file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, DenoiserError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, DenoiserError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, DenoiserError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub(crate) fn decode(bytes: &[u8]) -> Result<DenoiserParams, DenoiserError> {
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(DenoiserError::BadMagic);
    }
    if bytes.len() < 12 {
        return Err(DenoiserError::Corrupt("file too short".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(DenoiserError::Version(version));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().unwrap()) {
        return Err(DenoiserError::Corrupt("checksum mismatch".into()));
    }
    let mut r = Reader { bytes: body, pos: 8 };
    let n_blocks = r.u32()? as usize;
    let n_heads = r.u32()? as usize;
    let d_model = r.u32()? as usize;
    let d_ff = r.u32()? as usize;
    let conditioning = match r.u32()? {
        0 => ConditioningMode::Tokens,
        1 => ConditioningMode::Flat,
        m => return Err(DenoiserError::Corrupt(format!("unknown conditioning mode {m}"))),
    };
    let timesteps = r.u32()? as usize;
    let dof = r.u32()? as usize;
    let n_ee = r.u32()? as usize;
    let n_tensors = r.u32()? as usize;
    let arch = ArchConfig {
        n_blocks,
        n_heads,
        d_model,
        d_ff,
        conditioning,
        timesteps,
    };
    arch.validate()?;

    let q_lo = (0..dof).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
    let q_hi = (0..dof).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
    let pos_scale = r.f64()?;
    let pos_center = [r.f64()?, r.f64()?, r.f64()?];

    let mut dir: BTreeMap<String, (Vec<usize>, u64)> = BTreeMap::new();
    let mut prev: Option<String> = None;
    for _ in 0..n_tensors {
        let len = r.u32()? as usize;
        let name = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|_| DenoiserError::Corrupt("tensor name is not utf-8".into()))?;
        if prev.as_ref().is_some_and(|p| *p >= name) {
            return Err(DenoiserError::Corrupt("tensor directory is not sorted".into()));
        }
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|v| v as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let offset = r.u64()?;
        prev = Some(name.clone());
        dir.insert(name, (shape, offset));
    }
    let payload = &body[r.pos..];

    let mut weights = Weights::<f32>::zeros(&arch, dof, n_ee);
    let shapes: BTreeMap<String, Vec<usize>> = weights.tensors().into_iter().map(|(n, _, s)| (n, s)).collect();
    if shapes.len() != dir.len() || shapes.keys().ne(dir.keys()) {
        return Err(DenoiserError::ShapeMismatch(
            "tensor names do not match the architecture".into(),
        ));
    }
    for (name, data) in weights.tensors_mut() {
        let (shape, offset) = &dir[&name];
        if *shape != shapes[&name] {
            return Err(DenoiserError::ShapeMismatch(format!(
                "tensor {name}: stored {shape:?}, expected {:?}",
                shapes[&name]
            )));
        }
        let start = *offset as usize;
        let end = start + data.len() * 4;
        let src = payload
            .get(start..end)
            .ok_or_else(|| DenoiserError::Corrupt(format!("tensor {name} exceeds payload")))?;
        for (d, c) in data.iter_mut().zip(src.chunks_exact(4)) {
            *d = f32::from_le_bytes(c.try_into().unwrap());
        }
    }
    Ok(DenoiserParams {
        arch,
        dof,
        n_ee,
        stats: NormStats {
            q_lo,
            q_hi,
            pos_scale,
            pos_center,
        },
        weights,
    })
}
