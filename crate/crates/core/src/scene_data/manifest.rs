//! On-disk sequence layout: a JSON manifest next to PNG images and `OCC4`
//! grids, plus a dataset index listing sequence directories per split.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::grid::{GridSpec, OccupancyGrid};
use super::{Image, SensorFrame, SequenceSample};
use crate::error::{Error, Result};
use crate::geometry::{CameraCalib, Pose};
use crate::trajectory::TrajectoryWaypoint;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const DATASET_FILE: &str = "dataset.json";
const SEQUENCE_FORMAT: &str = "trajocc-sequence";
const DATASET_FORMAT: &str = "trajocc-dataset";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridHeader {
    pub dims: [usize; 3],
    pub voxel_size: f64,
    pub origin: [f64; 3],
    pub class_count: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraEntry {
    pub image: String,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Row-major homogeneous camera-to-ego matrix.
    pub cam_to_ego: [[f64; 4]; 4],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub timestamp: f64,
    /// Row-major homogeneous ego-to-world matrix.
    pub ego_pose: [[f64; 4]; 4],
    pub cameras: Vec<CameraEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FutureEntry {
    pub grid: String,
    pub waypoint: TrajectoryWaypoint,
}

/// Contents of `manifest.json` inside a sequence directory. Paths are
/// relative to that directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceManifest {
    pub format: String,
    pub version: u32,
    pub id: String,
    pub grid: GridHeader,
    pub past: Vec<FrameEntry>,
    pub future: Vec<FutureEntry>,
    #[serde(default)]
    pub current_grid: Option<String>,
}

/// Contents of `dataset.json`: sequence directories per split.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub format: String,
    pub train: Vec<String>,
    pub val: Vec<String>,
    /// Free-form provenance, e.g. the generator config.
    #[serde(default)]
    pub generator: Option<serde_json::Value>,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("manifest types serialize");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn save_png(img: &Image, path: &Path) -> Result<()> {
    image::save_buffer(
        path,
        &img.rgb,
        img.width as u32,
        img.height as u32,
        image::ExtendedColorType::Rgb8,
    )
    .map_err(|e| Error::format(path, e.to_string()))
}

pub fn load_png(path: &Path) -> Result<Image> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "image not found"),
        ));
    }
    let img = image::open(path)
        .map_err(|e| Error::format(path, e.to_string()))?
        .to_rgb8();
    Ok(Image {
        width: img.width() as usize,
        height: img.height() as usize,
        rgb: img.into_raw(),
    })
}

/// Writes one sequence directory and returns its manifest.
pub fn write_sample(sample: &SequenceSample, dir: &Path) -> Result<SequenceManifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let first = sample.future_grids.first().or(sample.current_grid.as_ref());
    let grid = first.map_or(
        GridHeader {
            dims: [0; 3],
            voxel_size: 0.0,
            origin: [0.0; 3],
            class_count: super::classes::NUM_CLASSES as u8,
        },
        |g| GridHeader {
            dims: g.spec.dims,
            voxel_size: g.spec.voxel_size,
            origin: g.spec.origin,
            class_count: g.class_count,
        },
    );
    let mut past = Vec::with_capacity(sample.past.len());
    for (k, frame) in sample.past.iter().enumerate() {
        let mut cameras = Vec::with_capacity(frame.images.len());
        for (c, (img, calib)) in frame.images.iter().zip(&frame.calibs).enumerate() {
            let name = format!("frame{k}_cam{c}.png");
            save_png(img, &dir.join(&name))?;
            cameras.push(CameraEntry {
                image: name,
                fx: calib.fx,
                fy: calib.fy,
                cx: calib.cx,
                cy: calib.cy,
                width: calib.width,
                height: calib.height,
                cam_to_ego: calib.cam_to_ego.to_matrix(),
            });
        }
        past.push(FrameEntry {
            timestamp: frame.timestamp,
            ego_pose: frame.ego_pose.to_matrix(),
            cameras,
        });
    }
    let mut future = Vec::with_capacity(sample.future_grids.len());
    for (t, (g, w)) in sample
        .future_grids
        .iter()
        .zip(&sample.trajectory)
        .enumerate()
    {
        let name = format!("future{}.occ", t + 1);
        g.write_file(&dir.join(&name))?;
        future.push(FutureEntry {
            grid: name,
            waypoint: *w,
        });
    }
    let current_grid = match &sample.current_grid {
        Some(g) => {
            g.write_file(&dir.join("current.occ"))?;
            Some("current.occ".to_string())
        }
        None => None,
    };
    let manifest = SequenceManifest {
        format: SEQUENCE_FORMAT.into(),
        version: 1,
        id: sample.id.clone(),
        grid,
        past,
        future,
        current_grid,
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

fn load_grid(path: &Path, header: &GridHeader) -> Result<OccupancyGrid> {
    let mut g = OccupancyGrid::read_file(path)?;
    let want = GridSpec {
        dims: header.dims,
        voxel_size: header.voxel_size,
        origin: header.origin,
    };
    if g.spec != want.quantized() || g.class_count != header.class_count {
        return Err(Error::format(
            path,
            format!(
                "grid {:?} @ {} does not match manifest header {:?} @ {}",
                g.spec.dims, g.spec.voxel_size, want.dims, want.voxel_size
            ),
        ));
    }
    // the manifest keeps full precision
    g.spec = want;
    Ok(g)
}

/// Loads a sequence from its manifest. Grid visibility masks are kept when
/// present; whether they are applied is the caller's choice.
pub fn load_occ3d_sample(manifest_path: &Path) -> Result<SequenceSample> {
    let manifest_path = if manifest_path.is_dir() {
        manifest_path.join(MANIFEST_FILE)
    } else {
        manifest_path.to_path_buf()
    };
    let m: SequenceManifest = read_json(&manifest_path)?;
    if m.format != SEQUENCE_FORMAT {
        return Err(Error::format(
            &manifest_path,
            format!("unknown format `{}`", m.format),
        ));
    }
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let pose = |mat: &[[f64; 4]; 4]| {
        Pose::from_matrix(mat).map_err(|e| Error::format(&manifest_path, e.to_string()))
    };
    let mut past = Vec::with_capacity(m.past.len());
    for f in &m.past {
        let mut images = Vec::new();
        let mut calibs = Vec::new();
        for c in &f.cameras {
            let path = dir.join(&c.image);
            let img = load_png(&path)?;
            if img.width != c.width || img.height != c.height {
                return Err(Error::format(
                    &path,
                    format!(
                        "image is {}x{}, calibration says {}x{}",
                        img.width, img.height, c.width, c.height
                    ),
                ));
            }
            let calib = CameraCalib {
                fx: c.fx,
                fy: c.fy,
                cx: c.cx,
                cy: c.cy,
                width: c.width,
                height: c.height,
                cam_to_ego: pose(&c.cam_to_ego)?,
            };
            calib
                .validate()
                .map_err(|e| Error::format(&manifest_path, e.to_string()))?;
            images.push(img);
            calibs.push(calib);
        }
        past.push(SensorFrame {
            images,
            calibs,
            ego_pose: pose(&f.ego_pose)?,
            timestamp: f.timestamp,
        });
    }
    let mut future_grids = Vec::with_capacity(m.future.len());
    let mut trajectory = Vec::with_capacity(m.future.len());
    for e in &m.future {
        future_grids.push(load_grid(&dir.join(&e.grid), &m.grid)?);
        trajectory.push(e.waypoint);
    }
    let current_grid = m
        .current_grid
        .as_ref()
        .map(|p| load_grid(&dir.join(p), &m.grid))
        .transpose()?;
    let sample = SequenceSample {
        id: m.id,
        past,
        future_grids,
        trajectory,
        current_grid,
    };
    sample
        .validate()
        .map_err(|e| Error::format(&manifest_path, e.to_string()))?;
    Ok(sample)
}

/// Writes every sample under `root/<split>/<id>` and the index file.
pub fn write_dataset(
    root: &Path,
    train: &[SequenceSample],
    val: &[SequenceSample],
    generator: Option<serde_json::Value>,
) -> Result<DatasetIndex> {
    let mut index = DatasetIndex {
        format: DATASET_FORMAT.into(),
        generator,
        ..Default::default()
    };
    for (split, samples, names) in [
        ("train", train, &mut index.train),
        ("val", val, &mut index.val),
    ] {
        for s in samples {
            let rel = format!("{split}/{}", s.id);
            write_sample(s, &root.join(&rel))?;
            names.push(rel);
        }
    }
    write_json(&root.join(DATASET_FILE), &index)?;
    Ok(index)
}

/// Loads one split of a dataset directory.
pub fn load_dataset(root: &Path, split: &str) -> Result<Vec<SequenceSample>> {
    let index_path: PathBuf = root.join(DATASET_FILE);
    let index: DatasetIndex = read_json(&index_path)?;
    let names = match split {
        "train" => &index.train,
        "val" => &index.val,
        other => {
            return Err(Error::config(
                "split",
                format!("unknown split `{other}`, expected train or val"),
            ))
        }
    };
    names
        .iter()
        .map(|n| load_occ3d_sample(&root.join(n)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene_data::synthetic::{ring_rig, SyntheticWorldSpec};
    use crate::scene_data::{generate_synthetic_sequence, GridSpec};

    fn spec() -> SyntheticWorldSpec {
        SyntheticWorldSpec {
            grid: GridSpec {
                dims: [16, 16, 4],
                voxel_size: 1.0,
                origin: [-8.0, -8.0, -1.0],
            },
            cameras: ring_rig(2, 90.0, 16, 8, 1.6),
            current_grid: true,
            ..SyntheticWorldSpec::default()
        }
    }

    #[test]
    fn synthetic_sequence_survives_export_and_import() {
        let dir = tempfile::tempdir().unwrap();
        let s = generate_synthetic_sequence(&spec(), 4).unwrap();
        write_sample(&s, dir.path()).unwrap();
        assert_eq!(load_occ3d_sample(dir.path()).unwrap(), s);
    }

    #[test]
    fn header_mismatch_names_the_grid_file() {
        let dir = tempfile::tempdir().unwrap();
        let s = generate_synthetic_sequence(&spec(), 4).unwrap();
        write_sample(&s, dir.path()).unwrap();
        let other = OccupancyGrid::empty(GridSpec {
            dims: [8, 8, 4],
            voxel_size: 1.0,
            origin: [-4.0, -4.0, -1.0],
        });
        other.write_file(&dir.path().join("future2.occ")).unwrap();
        let err = load_occ3d_sample(dir.path()).unwrap_err().to_string();
        assert!(err.contains("future2.occ"), "{err}");
    }

    #[test]
    fn missing_image_names_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let s = generate_synthetic_sequence(&spec(), 4).unwrap();
        write_sample(&s, dir.path()).unwrap();
        std::fs::remove_file(dir.path().join("frame1_cam0.png")).unwrap();
        let err = load_occ3d_sample(dir.path()).unwrap_err().to_string();
        assert!(err.contains("frame1_cam0.png"), "{err}");
    }

    #[test]
    fn dataset_splits_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let train: Vec<_> = (0..2)
            .map(|i| generate_synthetic_sequence(&spec(), i).unwrap())
            .collect();
        let val = vec![generate_synthetic_sequence(&spec(), 100).unwrap()];
        write_dataset(dir.path(), &train, &val, None).unwrap();
        assert_eq!(load_dataset(dir.path(), "train").unwrap(), train);
        assert_eq!(load_dataset(dir.path(), "val").unwrap(), val);
        assert!(load_dataset(dir.path(), "test").is_err());
    }
}
