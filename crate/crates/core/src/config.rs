//! Experiment configuration: presets, TOML overlays and dataset synthesis.
//!
//! A config file only lists the fields it changes; everything else comes
//! from the chosen preset.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::anchors::AnchorConfig;
use crate::error::{Error, Result};
use crate::evaluator::{EvalOptions, TrajectorySource, RAY_ORIGIN};
use crate::fusion::{TemporalMode, WorldModelConfig};
use crate::losses::{FocalConfig, LossConfig};
use crate::scene_data::classes::{DRIVEABLE_SURFACE, NUM_CLASSES, TERRAIN};
use crate::scene_data::synthetic::{
    generate_synthetic_sequence, ring_rig, GroundStyle, PathFamily, SyntheticWorldSpec,
};
use crate::scene_data::{GridSpec, SequenceSample};
use crate::sensor::{BackboneConfig, SamplerConfig};
use crate::trainer::{HorizonPolicy, TrainConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Desk-scale model on a handful of sequences; minutes on a laptop.
    Smoke,
    /// The configuration used by the acceptance suite.
    #[default]
    Desk,
    /// Paper-scale model and data sizes; not practical on a CPU.
    Full,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "smoke" => Ok(Self::Smoke),
            "desk" => Ok(Self::Desk),
            "full" => Ok(Self::Full),
            _ => Err(Error::config(
                "preset",
                format!("unknown preset `{s}`, expected smoke, desk or full"),
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset directory; when unset, sequences are generated in memory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub root: Option<PathBuf>,
    pub train_sequences: usize,
    pub val_sequences: usize,
    /// Base seed of the generator. Train sequence `i` uses `seed + i`,
    /// validation sequence `i` uses `seed + VAL_SEED_OFFSET + i`.
    pub seed: u64,
    pub world: SyntheticWorldSpec,
}

pub const VAL_SEED_OFFSET: u64 = 1_000_000;

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        if self.train_sequences == 0 {
            return Err(Error::config("data.train_sequences", "must be at least 1"));
        }
        Ok(())
    }

    /// Generates the train and validation splits.
    pub fn generate(&self) -> Result<(Vec<SequenceSample>, Vec<SequenceSample>)> {
        let gen = |offset: u64, n: usize| -> Result<Vec<SequenceSample>> {
            (0..n as u64)
                .map(|i| generate_synthetic_sequence(&self.world, self.seed + offset + i))
                .collect()
        };
        Ok((
            gen(0, self.train_sequences)?,
            gen(VAL_SEED_OFFSET, self.val_sequences)?,
        ))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Empty means `1..=T_max`.
    #[serde(default)]
    pub horizons: Vec<usize>,
    pub use_mask: bool,
    /// Voxelization confidence threshold.
    pub threshold: f64,
    pub traj_source: TrajectorySource,
    pub ray_iou: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            horizons: Vec::new(),
            use_mask: false,
            threshold: 0.0,
            traj_source: TrajectorySource::Gt,
            ray_iou: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: WorldModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Desk => desk(),
            Preset::Smoke => {
                let mut c = desk();
                c.data.train_sequences = 8;
                c.data.val_sequences = 2;
                c.train.epochs = 10;
                c
            }
            Preset::Full => full(),
        }
    }

    /// Overlays a TOML document on a preset. Unknown keys are errors.
    pub fn from_toml(base: Preset, text: &str, origin: &Path) -> Result<Self> {
        let mut value = toml::Value::try_from(Self::preset(base)).expect("preset serializes");
        let overlay: toml::Table = toml::from_str(text)
            .map_err(|e| Error::config(origin.display().to_string(), e.to_string()))?;
        merge(&mut value, toml::Value::Table(overlay));
        let cfg: Self = value.try_into().map_err(|e: toml::de::Error| {
            Error::config(origin.display().to_string(), e.to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(base: Preset, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(base, &text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.model.validate()?;
        self.train.validate(&self.model)?;
        if self.data.world.past_frames != self.model.past_frames {
            return Err(Error::config(
                "data.world.past_frames",
                format!(
                    "generator emits {} past frames, model expects {}",
                    self.data.world.past_frames, self.model.past_frames
                ),
            ));
        }
        if self.data.world.future_frames < self.model.t_max {
            return Err(Error::config(
                "data.world.future_frames",
                format!(
                    "{} future frames cannot supervise t_max = {}",
                    self.data.world.future_frames, self.model.t_max
                ),
            ));
        }
        if let Some(&h) = self
            .eval
            .horizons
            .iter()
            .find(|&&h| h == 0 || h > self.model.t_max)
        {
            return Err(Error::config(
                "eval.horizons",
                format!("horizon {h} outside [1, {}]", self.model.t_max),
            ));
        }
        Ok(())
    }

    pub fn eval_options(&self, seed: u64) -> EvalOptions {
        let horizons = if self.eval.horizons.is_empty() {
            (1..=self.model.t_max).collect()
        } else {
            self.eval.horizons.clone()
        };
        EvalOptions {
            horizons,
            use_mask: self.eval.use_mask,
            threshold: self.eval.threshold,
            traj_source: self.eval.traj_source,
            seed,
            ray_iou: self.eval.ray_iou,
            ray_origin: RAY_ORIGIN,
        }
    }

    /// Flattened `path = value` lines of every field, for help output.
    pub fn field_listing(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        flatten(
            "",
            &toml::Value::try_from(self).expect("config serializes"),
            &mut out,
        );
        out
    }
}

fn merge(base: &mut toml::Value, overlay: toml::Value) {
    match (base, overlay) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn flatten(prefix: &str, v: &toml::Value, out: &mut Vec<(String, String)>) {
    match v {
        toml::Value::Table(t) if !t.is_empty() => {
            for (k, v) in t {
                let p = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&p, v, out);
            }
        }
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

fn desk_world() -> SyntheticWorldSpec {
    SyntheticWorldSpec {
        grid: GridSpec {
            dims: [16, 16, 4],
            voxel_size: 1.0,
            origin: [-8.0, -8.0, -1.0],
        },
        bounds: [[-8.0, -10.0], [16.0, 10.0]],
        static_boxes: 4,
        dynamic_boxes: 2,
        ground: GroundStyle::Road {
            half_width: 2.5,
            sidewalk: 1.5,
        },
        path: PathFamily::Mixed,
        cameras: ring_rig(4, 100.0, 64, 32, 1.6),
        past_frames: 2,
        future_frames: 4,
        current_grid: true,
        ..SyntheticWorldSpec::default()
    }
}

fn desk() -> ExperimentConfig {
    let world = desk_world();
    let model = WorldModelConfig {
        anchors: AnchorConfig {
            n: 64,
            m: 16,
            d: 64,
            sigma: 0.5,
            bounds: [[-8.0, -8.0, -1.0], [8.0, 8.0, 3.0]],
            classes: 17,
        },
        heads: 4,
        blocks: 2,
        t_max: 4,
        past_frames: 2,
        backbone: BackboneConfig::default(),
        sampler: SamplerConfig::default(),
        dropout: 0.0,
        temporal: TemporalMode::Joint,
        resample_each_block: true,
        anchor_seed: 0,
        distance_bias_init: 0.1,
        trajectory_scale: 0.25,
    };
    // Ground classes cover most occupied voxels at this grid size; without
    // the extra weight the few object voxels are labelled as ground.
    let class_alpha = (0..NUM_CLASSES as u8)
        .map(|c| {
            if (DRIVEABLE_SURFACE..=TERRAIN).contains(&c) {
                1.0
            } else {
                8.0
            }
        })
        .collect();
    let train = TrainConfig {
        epochs: 36,
        batch_size: 4,
        lr: 2e-3,
        horizon_policy: HorizonPolicy::RandomEnsemble,
        loss: LossConfig {
            focal: FocalConfig {
                gamma: 2.0,
                alpha: 1.0,
                class_alpha: Some(class_alpha),
            },
            ..LossConfig::default()
        },
        ..TrainConfig::default()
    };
    ExperimentConfig {
        data: DataConfig {
            root: None,
            train_sequences: 224,
            val_sequences: 32,
            seed: 0,
            world,
        },
        model,
        train,
        eval: EvalConfig::default(),
    }
}

fn full() -> ExperimentConfig {
    let world = SyntheticWorldSpec {
        cameras: ring_rig(6, 70.0, 256, 128, 1.6),
        past_frames: 4,
        future_frames: 6,
        current_grid: true,
        ground: GroundStyle::Road {
            half_width: 3.0,
            sidewalk: 2.0,
        },
        bounds: [[-16.0, -24.0], [40.0, 24.0]],
        ..SyntheticWorldSpec::default()
    };
    let model = WorldModelConfig {
        anchors: AnchorConfig {
            n: 600,
            m: 128,
            d: 256,
            sigma: 0.5,
            bounds: [[-16.0, -16.0, -1.0], [16.0, 16.0, 3.0]],
            classes: 17,
        },
        heads: 8,
        blocks: 6,
        t_max: 6,
        past_frames: 4,
        backbone: BackboneConfig {
            channels: vec![64, 128, 256, 256],
            patch: 4,
        },
        sampler: SamplerConfig::default(),
        dropout: 0.1,
        temporal: TemporalMode::Joint,
        resample_each_block: true,
        anchor_seed: 0,
        distance_bias_init: 0.1,
        trajectory_scale: 0.25,
    };
    let train = TrainConfig {
        epochs: 70,
        batch_size: 8,
        lr: 2e-4,
        ..TrainConfig::default()
    };
    ExperimentConfig {
        data: DataConfig {
            root: None,
            train_sequences: 700,
            val_sequences: 150,
            seed: 0,
            world,
        },
        model,
        train,
        eval: EvalConfig::default(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for p in [Preset::Smoke, Preset::Desk, Preset::Full] {
            let c = ExperimentConfig::preset(p);
            c.validate().unwrap();
            let back = ExperimentConfig::from_toml(p, &c.to_toml(), Path::new("x.toml")).unwrap();
            assert_eq!(back, c);
        }
        let d = ExperimentConfig::preset(Preset::Desk);
        let a = &d.model.anchors;
        assert_eq!(
            (
                a.n,
                a.m,
                a.d,
                d.model.blocks,
                d.model.t_max,
                d.model.past_frames
            ),
            (64, 16, 64, 2, 4, 2)
        );
        assert_eq!(d.data.train_sequences + d.data.val_sequences, 256);
    }

    #[test]
    fn overlay_changes_only_listed_fields() {
        let text = "[train]\nlr = 0.001\n[eval]\ntraj_source = \"noisy:0.5:0.1\"\n";
        let c = ExperimentConfig::from_toml(Preset::Desk, text, Path::new("x.toml")).unwrap();
        let mut expect = ExperimentConfig::preset(Preset::Desk);
        expect.train.lr = 1e-3;
        expect.eval.traj_source = TrajectorySource::Noisy {
            sigma_xy: 0.5,
            sigma_theta: 0.1,
        };
        assert_eq!(c, expect);
    }

    #[test]
    fn schema_errors_name_the_field() {
        let err = ExperimentConfig::from_toml(
            Preset::Desk,
            "[train]\nlearning_rate = 1.0\n",
            Path::new("bad.toml"),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config { .. }));
        assert!(err.to_string().contains("learning_rate"), "{err}");
        let err = ExperimentConfig::from_toml(
            Preset::Desk,
            "[model]\nt_max = 9\n",
            Path::new("bad.toml"),
        )
        .unwrap_err();
        assert!(err.to_string().contains("future_frames"), "{err}");
        let err = ExperimentConfig::from_toml(
            Preset::Desk,
            "[train]\nbatch_size = 0\n",
            Path::new("bad.toml"),
        )
        .unwrap_err();
        assert!(err.to_string().contains("train.batch_size"), "{err}");
    }

    #[test]
    fn listing_covers_every_train_field() {
        let c = ExperimentConfig::preset(Preset::Desk);
        let keys: Vec<String> = c.field_listing().into_iter().map(|(k, _)| k).collect();
        for f in [
            "train.epochs",
            "train.lr",
            "train.horizon_policy",
            "train.loss.focal.gamma",
            "model.anchors.n",
            "data.world.grid.dims",
        ] {
            assert!(keys.iter().any(|k| k == f), "{f} missing");
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let mut c = ExperimentConfig::preset(Preset::Smoke);
        c.data.train_sequences = 2;
        c.data.val_sequences = 1;
        let (a, va) = c.data.generate().unwrap();
        let (b, vb) = c.data.generate().unwrap();
        assert_eq!(a.len(), 2);
        assert_eq!(va.len(), 1);
        assert_eq!(a[1].future_grids, b[1].future_grids);
        assert_eq!(va[0].trajectory, vb[0].trajectory);
        assert_ne!(a[0].future_grids, a[1].future_grids);
    }
}
