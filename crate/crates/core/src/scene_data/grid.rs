//! Dense voxel label grids and the `OCC4` binary format.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::classes::NUM_CLASSES;
use crate::error::{Error, Result};
use crate::geometry::Vec3;

/// Voxel lattice: counts, edge length and min corner in the ego frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub dims: [usize; 3],
    pub voxel_size: f64,
    pub origin: Vec3,
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(Error::config(
                "grid.dims",
                "every dimension must be positive",
            ));
        }
        if !(self.voxel_size > 0.0 && self.voxel_size.is_finite()) {
            return Err(Error::config("grid.voxel_size", "must be positive"));
        }
        if !self.origin.iter().all(|v| v.is_finite()) {
            return Err(Error::config("grid.origin", "must be finite"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row-major index with x varying fastest.
    pub fn index(&self, [x, y, z]: [usize; 3]) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let x = idx % self.dims[0];
        let y = (idx / self.dims[0]) % self.dims[1];
        let z = idx / (self.dims[0] * self.dims[1]);
        [x, y, z]
    }

    pub fn center(&self, [x, y, z]: [usize; 3]) -> Vec3 {
        let s = self.voxel_size;
        [
            self.origin[0] + (x as f64 + 0.5) * s,
            self.origin[1] + (y as f64 + 0.5) * s,
            self.origin[2] + (z as f64 + 0.5) * s,
        ]
    }

    /// Voxel containing `p`, or `None` outside the grid.
    pub fn voxel_of(&self, p: &Vec3) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let f = ((p[a] - self.origin[a]) / self.voxel_size).floor();
            if !(f >= 0.0 && f < self.dims[a] as f64) {
                return None;
            }
            out[a] = f as usize;
        }
        Some(out)
    }

    /// The spec as stored in an `OCC4` header, which keeps `f32` precision.
    pub fn quantized(&self) -> GridSpec {
        GridSpec {
            voxel_size: self.voxel_size as f32 as f64,
            origin: self.origin.map(|v| v as f32 as f64),
            ..*self
        }
    }

    /// Max corner of the grid.
    pub fn upper(&self) -> Vec3 {
        [
            self.origin[0] + self.dims[0] as f64 * self.voxel_size,
            self.origin[1] + self.dims[1] as f64 * self.voxel_size,
            self.origin[2] + self.dims[2] as f64 * self.voxel_size,
        ]
    }
}

/// Dense semantic occupancy. Labels run over `0..=class_count`, with
/// `class_count` itself meaning free space.
#[derive(Clone, Debug, PartialEq)]
pub struct OccupancyGrid {
    pub spec: GridSpec,
    pub class_count: u8,
    pub labels: Vec<u8>,
    pub visibility: Option<Vec<bool>>,
}

impl OccupancyGrid {
    /// All-free grid with the standard class table.
    pub fn empty(spec: GridSpec) -> Self {
        Self {
            spec,
            class_count: NUM_CLASSES as u8,
            labels: vec![NUM_CLASSES as u8; spec.len()],
            visibility: None,
        }
    }

    pub fn free(&self) -> u8 {
        self.class_count
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        if self.labels.len() != self.spec.len() {
            return Err(Error::Shape(format!(
                "grid has {} labels for dims {:?}",
                self.labels.len(),
                self.spec.dims
            )));
        }
        if let Some(bad) = self.labels.iter().find(|&&l| l > self.class_count) {
            return Err(Error::Shape(format!(
                "label {bad} exceeds free id {}",
                self.class_count
            )));
        }
        if let Some(m) = &self.visibility {
            if m.len() != self.labels.len() {
                return Err(Error::Shape(format!(
                    "visibility mask has {} entries, expected {}",
                    m.len(),
                    self.labels.len()
                )));
            }
        }
        Ok(())
    }

    pub fn get(&self, c: [usize; 3]) -> u8 {
        self.labels[self.spec.index(c)]
    }

    pub fn set(&mut self, c: [usize; 3], label: u8) {
        let i = self.spec.index(c);
        self.labels[i] = label;
    }

    pub fn is_occupied(&self, idx: usize) -> bool {
        self.labels[idx] != self.class_count
    }

    pub fn occupied_count(&self) -> usize {
        self.labels
            .iter()
            .filter(|&&l| l != self.class_count)
            .count()
    }

    /// Whether voxel `idx` takes part when masking is requested.
    pub fn visible(&self, idx: usize, use_mask: bool) -> bool {
        !use_mask || self.visibility.as_ref().is_none_or(|m| m[idx])
    }

    /// Writes the `OCC4` layout.
    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(OCC4_MAGIC)?;
        w.write_all(&OCC4_VERSION.to_le_bytes())?;
        for d in self.spec.dims {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        w.write_all(&(self.spec.voxel_size as f32).to_le_bytes())?;
        for o in self.spec.origin {
            w.write_all(&(o as f32).to_le_bytes())?;
        }
        w.write_all(&[self.class_count, u8::from(self.visibility.is_some())])?;
        w.write_all(&self.labels)?;
        if let Some(m) = &self.visibility {
            let bytes: Vec<u8> = m.iter().map(|&v| u8::from(v)).collect();
            w.write_all(&bytes)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(OCC4_HEADER_LEN + self.labels.len());
        self.write_to(&mut out)
            .expect("writing to a Vec cannot fail");
        out
    }

    /// Parses an `OCC4` buffer. `path` only labels errors.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::format(path, reason);
        if bytes.len() < OCC4_HEADER_LEN {
            return Err(bad(format!("truncated header ({} bytes)", bytes.len())));
        }
        if &bytes[0..4] != OCC4_MAGIC {
            return Err(bad("missing OCC4 magic".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        let f32_at = |o: usize| f32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        let version = u32_at(4);
        if version != OCC4_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let dims = [u32_at(8) as usize, u32_at(12) as usize, u32_at(16) as usize];
        let spec = GridSpec {
            dims,
            voxel_size: f32_at(20) as f64,
            origin: [f32_at(24) as f64, f32_at(28) as f64, f32_at(32) as f64],
        };
        spec.validate().map_err(|e| bad(e.to_string()))?;
        let class_count = bytes[36];
        let has_mask = match bytes[37] {
            0 => false,
            1 => true,
            f => return Err(bad(format!("unknown flags byte {f}"))),
        };
        let n = spec.len();
        let want = OCC4_HEADER_LEN + n * (1 + usize::from(has_mask));
        if bytes.len() != want {
            return Err(bad(format!(
                "dims {dims:?} need {want} bytes, file has {}",
                bytes.len()
            )));
        }
        let labels = bytes[OCC4_HEADER_LEN..OCC4_HEADER_LEN + n].to_vec();
        let visibility = has_mask.then(|| {
            bytes[OCC4_HEADER_LEN + n..]
                .iter()
                .map(|&b| b != 0)
                .collect()
        });
        let grid = Self {
            spec,
            class_count,
            labels,
            visibility,
        };
        grid.validate().map_err(|e| bad(e.to_string()))?;
        Ok(grid)
    }

    pub fn write_file(&self, path: &Path) -> Result<()> {
        let mut f =
            std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
        self.write_to(&mut f)
            .and_then(|_| f.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn read_file(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

pub const OCC4_MAGIC: &[u8; 4] = b"OCC4";
pub const OCC4_VERSION: u32 = 1;
/// magic, version, dims, voxel size, origin, class count, flags.
pub const OCC4_HEADER_LEN: usize = 4 + 4 + 12 + 4 + 12 + 1 + 1;

/// Target point set of a grid: one point per non-free voxel at its center.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointSet {
    pub points: Vec<Vec3>,
    pub labels: Vec<u8>,
}

impl PointSet {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Voxel centers and labels of every occupied voxel, skipping masked voxels
/// when `use_mask` is set and the grid carries a mask.
pub fn grid_to_points(grid: &OccupancyGrid, use_mask: bool) -> PointSet {
    let mut out = PointSet::default();
    for (i, &l) in grid.labels.iter().enumerate() {
        if l != grid.class_count && grid.visible(i, use_mask) {
            out.points.push(grid.spec.center(grid.spec.coords(i)));
            out.labels.push(l);
        }
    }
    out
}

/// Inverse of [`grid_to_points`]: bins labelled points into `spec`, later
/// points overwriting earlier ones.
pub fn points_to_grid(spec: GridSpec, points: &PointSet) -> OccupancyGrid {
    let mut g = OccupancyGrid::empty(spec);
    for (p, &l) in points.points.iter().zip(&points.labels) {
        if let Some(c) = spec.voxel_of(p) {
            g.set(c, l);
        }
    }
    g
}
