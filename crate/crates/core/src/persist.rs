//! Model files and atomic file output.
//!
//! Model file layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes   "MMFUSION"
//! version      u32       1
//! kind         u8        0 concat, 1 co-attention, 2 cross-attention
//! gate_input   u8        0 raw, 1 projected
//! dims         5 × u64   image, clinical, proj, hidden, num_classes
//! n_params     u32
//! per param    u64 length, then length × f64 (IEEE-754 bits)
//! digest       32 bytes  SHA-256 of everything above
//! ```

use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fusion::{FusionKind, FusionModel, FusionVariant, GateInput};

const MAGIC: &[u8; 8] = b"MMFUSION";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

/// Writes through a temporary file in the destination directory, then renames.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn kind_tag(kind: FusionKind) -> u8 {
    match kind {
        FusionKind::Concat => 0,
        FusionKind::CoAttention => 1,
        FusionKind::CrossAttention => 2,
    }
}

pub fn model_to_bytes(model: &FusionModel) -> Vec<u8> {
    let v = model.variant();
    let mut out = Vec::with_capacity(64 + model.num_parameters() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(kind_tag(v.kind));
    out.push(match v.gate_input {
        GateInput::Raw => 0,
        GateInput::Projected => 1,
    });
    for d in [v.image_dim, v.clinical_dim, v.proj_dim, v.hidden_dim, v.num_classes] {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    let params = model.parameters();
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params {
        out.extend_from_slice(&(p.values.len() as u64).to_le_bytes());
        for x in p.values {
            out.extend_from_slice(&x.to_bits().to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Persistence("truncated model file".into())),
        }
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn dim(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Persistence("dimension overflows usize".into()))
    }
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<FusionModel> {
    if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Persistence("not a model file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Persistence(format!(
            "unsupported format version {version} (supported: {FORMAT_VERSION})"
        )));
    }
    if bytes.len() < 12 + DIGEST_LEN {
        return Err(Error::Persistence("truncated model file".into()));
    }
    let mut c = Cursor { bytes, pos: 12 };
    let kind = match c.u8()? {
        0 => FusionKind::Concat,
        1 => FusionKind::CoAttention,
        2 => FusionKind::CrossAttention,
        t => return Err(Error::Persistence(format!("unknown variant tag {t}"))),
    };
    let gate_input = match c.u8()? {
        0 => GateInput::Raw,
        1 => GateInput::Projected,
        t => return Err(Error::Persistence(format!("unknown gate input tag {t}"))),
    };
    let variant = FusionVariant {
        kind,
        gate_input,
        image_dim: c.dim()?,
        clinical_dim: c.dim()?,
        proj_dim: c.dim()?,
        hidden_dim: c.dim()?,
        num_classes: c.dim()?,
    };
    variant
        .validate()
        .map_err(|e| Error::Persistence(format!("invalid architecture: {e}")))?;
    let mut model = FusionModel::zeros(variant)?;
    let n_params = c.u32()? as usize;
    let mut slots = model.parameters_mut();
    if n_params != slots.len() {
        return Err(Error::Persistence(format!(
            "{n_params} parameter arrays, {kind} expects {}",
            slots.len()
        )));
    }
    for (name, slot) in slots.iter_mut() {
        let len = c.dim()?;
        if len != slot.len() {
            return Err(Error::Persistence(format!(
                "{name}: {len} values, architecture expects {}",
                slot.len()
            )));
        }
        let raw = c.take(len.checked_mul(8).ok_or_else(|| Error::Persistence("length overflow".into()))?)?;
        for (dst, chunk) in slot.iter_mut().zip(raw.chunks_exact(8)) {
            *dst = f64::from_bits(u64::from_le_bytes(chunk.try_into().unwrap()));
        }
    }
    let body_end = c.pos;
    let digest = c.take(DIGEST_LEN)?;
    if c.pos != bytes.len() {
        return Err(Error::Persistence(format!(
            "{} unexpected trailing bytes",
            bytes.len() - c.pos
        )));
    }
    if Sha256::digest(&bytes[..body_end]).as_slice() != digest {
        return Err(Error::Persistence("checksum mismatch (corrupted file)".into()));
    }
    Ok(model)
}

pub fn save_model(model: &FusionModel, path: &Path) -> Result<()> {
    write_atomic(path, &model_to_bytes(model))
}

pub fn load_model(path: &Path) -> Result<FusionModel> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    model_from_bytes(&bytes)
}

/// Loads a model and checks it is of the expected variant.
pub fn load_model_as(path: &Path, expected: FusionKind) -> Result<FusionModel> {
    let model = load_model(path)?;
    if model.kind() != expected {
        return Err(Error::VariantMismatch {
            expected: expected.to_string(),
            found: model.kind().to_string(),
        });
    }
    Ok(model)
}
