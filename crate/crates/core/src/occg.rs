//! OCCG binary grid format.
//!
//! Layout, all little-endian: magic `OCCG`, u16 version (=1), u16 payload
//! kind (0 = category u8, 1 = density f32, 2 = feature f32xD), u32 X, u32 Y,
//! u32 Z, f32 resolution, 3x f32 origin; kind 2 adds a u16 feature dim D
//! before the payload. Payload is row-major with x fastest.

use crate::error::{Error, Result};
use crate::grid::{GridGeometry, SemanticGrid};
use std::fs;
use std::io::Write;
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"OCCG";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum GridPayload {
    /// Per-voxel semantic category IDs.
    Categories(Vec<u8>),
    /// Per-voxel scalar density.
    Density(Vec<f32>),
    /// Per-voxel feature vectors, D values per voxel, feature index fastest
    /// within a voxel.
    Features { dim: u16, data: Vec<f32> },
}

impl GridPayload {
    fn kind(&self) -> u16 {
        match self {
            GridPayload::Categories(_) => 0,
            GridPayload::Density(_) => 1,
            GridPayload::Features { .. } => 2,
        }
    }
}

pub fn encode(geometry: &GridGeometry, payload: &GridPayload) -> Vec<u8> {
    let voxels = geometry.voxel_count();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&payload.kind().to_le_bytes());
    for d in geometry.dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.extend_from_slice(&geometry.resolution.to_le_bytes());
    for o in geometry.origin {
        out.extend_from_slice(&o.to_le_bytes());
    }
    match payload {
        GridPayload::Categories(cats) => {
            assert_eq!(cats.len(), voxels, "category payload size");
            out.extend_from_slice(cats);
        }
        GridPayload::Density(d) => {
            assert_eq!(d.len(), voxels, "density payload size");
            for v in d {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        GridPayload::Features { dim, data } => {
            assert_eq!(data.len(), voxels * *dim as usize, "feature payload size");
            out.extend_from_slice(&dim.to_le_bytes());
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<(GridGeometry, GridPayload)> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4)?;
    if magic != MAGIC {
        return Err(Error::Format(format!(
            "bad OCCG magic {:?}, expected {:?}",
            &magic[..4.min(magic.len())],
            MAGIC
        )));
    }
    let version = cur.u16()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported OCCG version {version}, expected {VERSION}"
        )));
    }
    let kind = cur.u16()?;
    let dims = [cur.u32()?, cur.u32()?, cur.u32()?];
    let resolution = cur.f32()?;
    let origin = [cur.f32()?, cur.f32()?, cur.f32()?];
    if dims.iter().any(|&d| d == 0) || resolution <= 0.0 {
        return Err(Error::Format(format!(
            "invalid OCCG geometry: dims {dims:?}, resolution {resolution}"
        )));
    }
    let geometry = GridGeometry::new(dims, resolution, origin);
    let voxels = geometry.voxel_count();
    let payload = match kind {
        0 => GridPayload::Categories(cur.take(voxels)?.to_vec()),
        1 => GridPayload::Density(cur.f32_vec(voxels)?),
        2 => {
            let dim = cur.u16()?;
            if dim == 0 {
                return Err(Error::Format("feature dim must be >= 1".into()));
            }
            GridPayload::Features {
                dim,
                data: cur.f32_vec(voxels * dim as usize)?,
            }
        }
        other => {
            return Err(Error::Format(format!("unknown OCCG payload kind {other}")));
        }
    };
    if cur.pos != bytes.len() {
        return Err(Error::Format(format!(
            "trailing bytes in OCCG stream: {} consumed, {} present",
            cur.pos,
            bytes.len()
        )));
    }
    Ok((geometry, payload))
}

pub fn save(path: &Path, geometry: &GridGeometry, payload: &GridPayload) -> Result<()> {
    let bytes = encode(geometry, payload);
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(GridGeometry, GridPayload)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn save_semantic(path: &Path, grid: &SemanticGrid, num_categories: usize) -> Result<()> {
    assert_eq!(grid.num_categories, num_categories);
    save(
        path,
        &grid.geometry,
        &GridPayload::Categories(grid.raw().to_vec()),
    )
}

pub fn load_semantic(path: &Path, num_categories: usize) -> Result<SemanticGrid> {
    let (geometry, payload) = load(path)?;
    match payload {
        GridPayload::Categories(cats) => {
            if cats.iter().any(|&c| c as usize >= num_categories) {
                return Err(Error::Data(format!(
                    "{}: category id exceeds taxonomy size {num_categories}",
                    path.display()
                )));
            }
            Ok(SemanticGrid::from_raw(geometry, num_categories, cats))
        }
        other => Err(Error::Format(format!(
            "{}: expected category payload, found kind {}",
            path.display(),
            other.kind()
        ))),
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format(format!(
                "truncated OCCG stream: need {} bytes at offset {}, have {}",
                n,
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32_vec(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n * 4)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn semantic_round_trip_bit_exact() {
        let g = GridGeometry::new([3, 2, 2], 0.5, [-1.0, 0.0, 2.5]);
        let mut grid = SemanticGrid::new_free(g, 9);
        grid.set(0, 1, 1, 4);
        grid.set(2, 0, 0, 7);
        let bytes = encode(&g, &GridPayload::Categories(grid.raw().to_vec()));
        let (g2, payload) = decode(&bytes).unwrap();
        assert_eq!(g, g2);
        let bytes2 = encode(&g2, &payload);
        assert_eq!(bytes, bytes2);
        match payload {
            GridPayload::Categories(cats) => assert_eq!(cats, grid.raw()),
            _ => panic!("wrong payload kind"),
        }
    }

    #[test]
    fn bad_magic_is_named() {
        let g = GridGeometry::new([1, 1, 1], 1.0, [0.0; 3]);
        let mut bytes = encode(&g, &GridPayload::Density(vec![0.5]));
        bytes[0] = b'X';
        let err = decode(&bytes).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn version_mismatch_is_explicit() {
        let g = GridGeometry::new([1, 1, 1], 1.0, [0.0; 3]);
        let mut bytes = encode(&g, &GridPayload::Density(vec![0.5]));
        bytes[4] = 9;
        let err = decode(&bytes).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }

    #[test]
    fn truncation_detected() {
        let g = GridGeometry::new([2, 2, 2], 1.0, [0.0; 3]);
        let bytes = encode(&g, &GridPayload::Density(vec![0.0; 8]));
        let err = decode(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    proptest! {
        #[test]
        fn any_payload_round_trips(
            dims in (1u32..5, 1u32..5, 1u32..5),
            kind in 0u16..3,
            dim in 1u16..4,
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let g = GridGeometry::new([dims.0, dims.1, dims.2], 0.25, [1.0, -2.0, 0.5]);
            let v = g.voxel_count();
            let payload = match kind {
                0 => GridPayload::Categories((0..v).map(|_| rng.gen_range(0..9u8)).collect()),
                1 => GridPayload::Density((0..v).map(|_| rng.gen::<f32>()).collect()),
                _ => GridPayload::Features {
                    dim,
                    data: (0..v * dim as usize).map(|_| rng.gen::<f32>() - 0.5).collect(),
                },
            };
            let bytes = encode(&g, &payload);
            let (g2, p2) = decode(&bytes).unwrap();
            prop_assert_eq!(g, g2);
            prop_assert_eq!(&encode(&g2, &p2), &bytes);
            prop_assert_eq!(p2, payload);
        }
    }
}
