//! Scenes, sensor frames and occupancy targets.

pub mod classes;
mod grid;
mod manifest;
pub mod synthetic;

pub use grid::{
    grid_to_points, points_to_grid, GridSpec, OccupancyGrid, PointSet, OCC4_HEADER_LEN, OCC4_MAGIC,
    OCC4_VERSION,
};
pub use manifest::{
    load_dataset, load_occ3d_sample, load_png, save_png, write_dataset, write_sample, DatasetIndex,
    SequenceManifest,
};
pub use synthetic::{generate_synthetic_sequence, SyntheticWorldSpec};

use crate::geometry::{CameraCalib, Pose};
use crate::trajectory::TrajectoryWaypoint;

/// 8-bit RGB image, rows top to bottom.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            rgb: vec![0; width * height * 3],
        }
    }

    pub fn pixel(&self, u: usize, v: usize) -> [u8; 3] {
        let i = 3 * (v * self.width + u);
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    pub fn set(&mut self, u: usize, v: usize, c: [u8; 3]) {
        let i = 3 * (v * self.width + u);
        self.rgb[i..i + 3].copy_from_slice(&c);
    }

    /// Channel value scaled to `[0, 1]`.
    pub fn intensity(&self, u: usize, v: usize, c: usize) -> f64 {
        f64::from(self.rgb[3 * (v * self.width + u) + c]) / 255.0
    }
}

/// Synchronized images from every camera at one instant.
#[derive(Clone, Debug, PartialEq)]
pub struct SensorFrame {
    pub images: Vec<Image>,
    pub calibs: Vec<CameraCalib>,
    /// Ego to world.
    pub ego_pose: Pose,
    /// Seconds relative to the current frame.
    pub timestamp: f64,
}

/// Observations up to the current frame plus future supervision.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceSample {
    pub id: String,
    /// Oldest first; the last entry is the current frame.
    pub past: Vec<SensorFrame>,
    /// Grid `t` lives in the ego frame of future step `t + 1`.
    pub future_grids: Vec<OccupancyGrid>,
    pub trajectory: Vec<TrajectoryWaypoint>,
    /// Current-frame grid, when available, for reconstruction scoring.
    pub current_grid: Option<OccupancyGrid>,
}

impl SequenceSample {
    pub fn validate(&self) -> crate::error::Result<()> {
        use crate::error::Error;
        if self.past.is_empty() {
            return Err(Error::Shape(format!("{}: no past frames", self.id)));
        }
        if self.trajectory.len() != self.future_grids.len() {
            return Err(Error::TrajectoryLength {
                trajectory: self.trajectory.len(),
                horizon: self.future_grids.len(),
            });
        }
        if !self
            .past
            .windows(2)
            .all(|w| w[0].timestamp < w[1].timestamp)
        {
            return Err(Error::Shape(format!(
                "{}: timestamps must increase",
                self.id
            )));
        }
        for f in &self.past {
            if f.images.len() != f.calibs.len() || f.images.is_empty() {
                return Err(Error::Shape(format!("{}: camera count mismatch", self.id)));
            }
            for (img, c) in f.images.iter().zip(&f.calibs) {
                if img.width != c.width || img.height != c.height {
                    return Err(Error::Shape(format!(
                        "{}: image size differs from calibration",
                        self.id
                    )));
                }
            }
        }
        for g in &self.future_grids {
            g.validate()?;
        }
        Ok(())
    }

    /// Ego pose of the current frame.
    pub fn current_pose(&self) -> Pose {
        self.past
            .last()
            .expect("validated sample has frames")
            .ego_pose
    }
}
