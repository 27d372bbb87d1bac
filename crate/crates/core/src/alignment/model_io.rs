//! Binary alignment-model files.
//!
//! Little-endian layout:
//!
//! ```text
//! "CVAM" | version u16 | d u32 | D u32
//! mu_D (D f64) | P_D (D*d f64, column-major)
//! mu_S (D f64) | P_S (D*d f64, column-major)
//! R (d*d f64, column-major)
//! eigenvalues_D (d f64) | eigenvalues_S (d f64)
//! pairing u8 | flags u8 | name_len u32 | dataset name (UTF-8)
//! crc32 of every preceding byte (u32)
//! fitted-on descriptor-set hash (u64)
//! ```

use std::path::Path;

use nalgebra::{DMatrix, DVector};

use super::{AlignmentModel, DomainStats, PairingStrategy};
use crate::error::{Error, Result};
use crate::io_util;

pub const MODEL_MAGIC: [u8; 4] = *b"CVAM";
pub const MODEL_VERSION: u16 = 1;

const FLAG_NON_UNIQUE: u8 = 1;
const FLAG_DEGENERATE_PAIRS: u8 = 1 << 1;
const FLAG_STRICT_ROTATION: u8 = 1 << 2;

fn put_f64s(out: &mut Vec<u8>, xs: &[f64]) {
    for x in xs {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

pub fn encode_model(m: &AlignmentModel) -> Vec<u8> {
    let d = m.dim();
    let dim = m.input_dim();
    let mut out = Vec::new();
    out.extend_from_slice(&MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    for s in [&m.drone, &m.satellite] {
        put_f64s(&mut out, s.mean.as_slice());
        put_f64s(&mut out, s.projection.as_slice());
    }
    put_f64s(&mut out, m.rotation.as_slice());
    put_f64s(&mut out, &m.drone.eigenvalues);
    put_f64s(&mut out, &m.satellite.eigenvalues);
    out.push(m.pairing.code());
    let mut flags = 0;
    if m.non_unique {
        flags |= FLAG_NON_UNIQUE;
    }
    if m.degenerate_pairs {
        flags |= FLAG_DEGENERATE_PAIRS;
    }
    if m.strict_rotation {
        flags |= FLAG_STRICT_ROTATION;
    }
    out.push(flags);
    out.extend_from_slice(&(m.dataset_name.len() as u32).to_le_bytes());
    out.extend_from_slice(m.dataset_name.as_bytes());
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out.extend_from_slice(&m.fitted_on.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::TruncatedModel)?;
        if end > self.bytes.len() {
            return Err(Error::TruncatedModel);
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or(Error::TruncatedModel)?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn decode_model(bytes: &[u8]) -> Result<AlignmentModel> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)
        .map_err(|_| Error::UnrecognizedFormat("file too short".into()))?
        != MODEL_MAGIC
    {
        return Err(Error::UnrecognizedFormat("bad model magic".into()));
    }
    let version = r.u16()?;
    if version != MODEL_VERSION {
        return Err(Error::UnrecognizedFormat(format!(
            "unsupported model version {version}"
        )));
    }
    let d = r.u32()? as usize;
    let dim = r.u32()? as usize;
    if d == 0 || dim == 0 || d > dim {
        return Err(Error::invalid(format!(
            "bad model dimensions d = {d}, D = {dim}"
        )));
    }
    // bound the allocation by what the file can actually hold
    let needed = (2 * dim + 2 * dim * d + d * d + 2 * d) as u128 * 8;
    if needed > bytes.len() as u128 {
        return Err(Error::TruncatedModel);
    }
    let mut stats = Vec::with_capacity(2);
    for _ in 0..2 {
        let mean = DVector::from_vec(r.f64s(dim)?);
        let projection = DMatrix::from_vec(dim, d, r.f64s(dim * d)?);
        stats.push((mean, projection));
    }
    let rotation = DMatrix::from_vec(d, d, r.f64s(d * d)?);
    let eig_d = r.f64s(d)?;
    let eig_s = r.f64s(d)?;
    let pairing = PairingStrategy::from_code(r.u8()?)
        .ok_or_else(|| Error::invalid("unknown pairing code in model"))?;
    let flags = r.u8()?;
    let name_len = r.u32()? as usize;
    let name = String::from_utf8(r.take(name_len)?.to_vec())
        .map_err(|_| Error::invalid("model dataset name is not UTF-8"))?;
    let body_end = r.pos;
    let stored = r.u32()?;
    let fitted_on = r.u64()?;
    if r.pos != bytes.len() {
        return Err(Error::invalid(format!(
            "{} trailing bytes in model file",
            bytes.len() - r.pos
        )));
    }
    let computed = crc32fast::hash(&bytes[..body_end]);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }

    let (sat_mean, sat_proj) = stats.pop().unwrap();
    let (drone_mean, drone_proj) = stats.pop().unwrap();
    Ok(AlignmentModel {
        drone: DomainStats {
            mean: drone_mean,
            projection: drone_proj,
            eigenvalues: eig_d,
        },
        satellite: DomainStats {
            mean: sat_mean,
            projection: sat_proj,
            eigenvalues: eig_s,
        },
        rotation,
        pairing,
        strict_rotation: flags & FLAG_STRICT_ROTATION != 0,
        non_unique: flags & FLAG_NON_UNIQUE != 0,
        degenerate_pairs: flags & FLAG_DEGENERATE_PAIRS != 0,
        dataset_name: name,
        fitted_on,
    })
}

pub fn save_model(model: &AlignmentModel, path: &Path) -> Result<()> {
    io_util::write_atomic(path, &encode_model(model))
}

pub fn load_model(path: &Path) -> Result<AlignmentModel> {
    decode_model(&io_util::read_file(path)?)
}
