//! Binary dataset container.
//!
//! Little-endian: magic `JDS1`, `u32` sample count `S`, `u32` vertex count `N`,
//! `u32` joint count `J`, then `S*N*3` f32 vertices, `S*J*3` f32 joints,
//! `S` u32 subject ids and `S` u32 pose ids.

use std::path::Path;

use super::{BodySample, GeometryError};

pub const PACK_MAGIC: &[u8; 4] = b"JDS1";

fn format_err(msg: impl Into<String>) -> GeometryError {
    GeometryError::Format(msg.into())
}

pub fn write_pack(samples: &[BodySample]) -> Result<Vec<u8>, GeometryError> {
    let first = samples.first().ok_or_else(|| format_err("a dataset needs at least one sample"))?;
    let (n, j) = (first.vertices.len(), first.joints.len());
    if samples.iter().any(|s| s.vertices.len() != n || s.joints.len() != j) {
        return Err(format_err("all samples must share vertex and joint counts"));
    }
    let s = samples.len();
    let mut out = Vec::with_capacity(16 + s * (n + j) * 12 + s * 8);
    out.extend_from_slice(PACK_MAGIC);
    for v in [s, n, j] {
        out.extend_from_slice(&u32::try_from(v).map_err(|_| format_err("count exceeds u32"))?.to_le_bytes());
    }
    for sample in samples {
        for x in sample.vertices.iter().flatten() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    for sample in samples {
        for x in sample.joints.iter().flatten() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    for sample in samples {
        out.extend_from_slice(&sample.subject_id.to_le_bytes());
    }
    for sample in samples {
        out.extend_from_slice(&sample.pose_id.to_le_bytes());
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], GeometryError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| format_err("truncated dataset"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, GeometryError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32s(&mut self, count: usize) -> Result<Vec<f32>, GeometryError> {
        let raw = self.take(count.checked_mul(4).ok_or_else(|| format_err("size overflow"))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
    }
}

pub fn read_pack(bytes: &[u8]) -> Result<Vec<BodySample>, GeometryError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).map_err(|_| format_err("missing magic"))? != PACK_MAGIC {
        return Err(format_err("magic mismatch (expected JDS1)"));
    }
    let (s, n, j) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    if s == 0 {
        return Err(format_err("a dataset needs at least one sample"));
    }
    let expected = (s * n * 3 + s * j * 3 + 2 * s) * 4;
    if bytes.len() - r.pos != expected {
        return Err(format_err(format!("payload is {} bytes, header implies {expected}", bytes.len() - r.pos)));
    }
    let verts = r.f32s(s * n * 3)?;
    let joints = r.f32s(s * j * 3)?;
    let subjects: Vec<u32> = (0..s).map(|_| r.u32()).collect::<Result<_, _>>()?;
    let poses: Vec<u32> = (0..s).map(|_| r.u32()).collect::<Result<_, _>>()?;
    let triples = |flat: &[f32]| flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect::<Vec<_>>();
    Ok((0..s)
        .map(|i| BodySample {
            vertices: triples(&verts[i * n * 3..(i + 1) * n * 3]),
            joints: triples(&joints[i * j * 3..(i + 1) * j * 3]),
            subject_id: subjects[i],
            pose_id: poses[i],
        })
        .collect())
}

pub fn pack_dataset(samples: &[BodySample], path: impl AsRef<Path>) -> Result<(), GeometryError> {
    std::fs::write(path, write_pack(samples)?)?;
    Ok(())
}

pub fn unpack_dataset(path: impl AsRef<Path>) -> Result<Vec<BodySample>, GeometryError> {
    read_pack(&std::fs::read(path)?)
}
