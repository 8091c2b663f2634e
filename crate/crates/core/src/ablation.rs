//! Ablation studies: trajectory source at evaluation time, and horizon
//! policy at training time. Each study trains one model per seed and
//! reports per-seed and mean scores.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::evaluator::{evaluate, ModelPredictor, TrajectorySource};
use crate::scene_data::SequenceSample;
use crate::trainer::{HorizonPolicy, Trainer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Study {
    /// Evaluate one trained model with gt, noisy and zero trajectories.
    Trajectory,
    /// Train with random-ensemble and fixed horizons, evaluate both.
    Ensemble,
}

impl std::str::FromStr for Study {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "trajectory" => Ok(Self::Trajectory),
            "ensemble" => Ok(Self::Ensemble),
            _ => Err(Error::config(
                "study",
                format!("unknown study `{s}`, expected trajectory or ensemble"),
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    /// `(seed, avg mIoU, avg IoU)` per seed.
    pub runs: Vec<(u64, f64, f64)>,
    pub mean_miou: f64,
    pub mean_iou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub study: Study,
    pub horizons: Vec<usize>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, variant: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<24} {:>9} {:>9}  per-seed mIoU",
            "variant", "mIoU", "IoU"
        );
        for r in &self.rows {
            let seeds: Vec<String> = r
                .runs
                .iter()
                .map(|(seed, m, _)| format!("{seed}:{m:.2}"))
                .collect();
            let _ = writeln!(
                s,
                "{:<24} {:>9.2} {:>9.2}  {}",
                r.variant,
                r.mean_miou,
                r.mean_iou,
                seeds.join(" ")
            );
        }
        s
    }
}

/// Noise used by the noisy-trajectory variant.
pub const NOISY_TRAJECTORY: TrajectorySource = TrajectorySource::Noisy {
    sigma_xy: 0.5,
    sigma_theta: 0.1,
};

fn finish(
    study: Study,
    horizons: Vec<usize>,
    names: &[String],
    runs: Vec<Vec<(u64, f64, f64)>>,
) -> AblationTable {
    let rows = names
        .iter()
        .zip(runs)
        .map(|(variant, runs)| {
            let n = runs.len().max(1) as f64;
            AblationRow {
                variant: variant.clone(),
                mean_miou: runs.iter().map(|r| r.1).sum::<f64>() / n,
                mean_iou: runs.iter().map(|r| r.2).sum::<f64>() / n,
                runs,
            }
        })
        .collect();
    AblationTable {
        study,
        horizons,
        rows,
    }
}

/// Trains `cfg` once per seed, writing checkpoints under `out/<tag>-seed<k>`
/// when `out` is given.
fn train_one(
    cfg: &ExperimentConfig,
    seed: u64,
    train: &[SequenceSample],
    out: Option<&Path>,
    tag: &str,
) -> Result<Trainer> {
    let mut tc = cfg.train.clone();
    tc.seed = seed;
    tc.validate_every = 0;
    let mut trainer = Trainer::new(cfg.model.clone(), tc)?;
    let dir = out.map(|o| o.join(format!("{tag}-seed{seed}")));
    log::info!("training {tag} seed {seed}");
    trainer.fit(train, None, dir.as_deref())?;
    Ok(trainer)
}

/// Trajectory-source ablation on the validation split.
pub fn trajectory_ablation(
    cfg: &ExperimentConfig,
    seeds: &[u64],
    train: &[SequenceSample],
    val: &[SequenceSample],
    out: Option<&Path>,
) -> Result<AblationTable> {
    let sources = [
        TrajectorySource::Gt,
        NOISY_TRAJECTORY,
        TrajectorySource::Zero,
    ];
    let mut runs = vec![Vec::new(); sources.len()];
    let mut horizons = Vec::new();
    for &seed in seeds {
        let trainer = train_one(cfg, seed, train, out, "traj")?;
        let predictor = ModelPredictor {
            model: &trainer.model,
            store: &trainer.store,
            threshold: cfg.eval.threshold,
        };
        for (k, &src) in sources.iter().enumerate() {
            let mut opts = cfg.eval_options(seed);
            opts.traj_source = src;
            opts.ray_iou = false;
            horizons.clone_from(&opts.horizons);
            let r = evaluate(&predictor, val, &opts)?;
            log::info!(
                "seed {seed} {src}: mIoU {:.2} IoU {:.2}",
                r.avg_miou,
                r.avg_iou
            );
            runs[k].push((seed, r.avg_miou, r.avg_iou));
        }
    }
    let names: Vec<String> = sources.iter().map(ToString::to_string).collect();
    Ok(finish(Study::Trajectory, horizons, &names, runs))
}

/// Horizon-policy ablation: random ensemble against a fixed horizon, both
/// scored on every horizon `1..=T_max` of the validation split.
pub fn ensemble_ablation(
    cfg: &ExperimentConfig,
    fixed_horizon: usize,
    seeds: &[u64],
    train: &[SequenceSample],
    val: &[SequenceSample],
    out: Option<&Path>,
) -> Result<AblationTable> {
    let mut ensemble = cfg.clone();
    ensemble.train.horizon_policy = HorizonPolicy::RandomEnsemble;
    let mut fixed = cfg.clone();
    fixed.train.horizon_policy = HorizonPolicy::Fixed;
    fixed.train.fixed_horizon = Some(fixed_horizon);
    fixed.validate()?;
    let variants = [
        ("random_ensemble".to_string(), ensemble),
        (format!("fixed_{fixed_horizon}"), fixed),
    ];
    let horizons: Vec<usize> = (1..=cfg.model.t_max).collect();
    let mut runs = vec![Vec::new(); variants.len()];
    for &seed in seeds {
        for (k, (name, c)) in variants.iter().enumerate() {
            let trainer = train_one(c, seed, train, out, name)?;
            let mut opts = c.eval_options(seed);
            opts.horizons.clone_from(&horizons);
            opts.traj_source = TrajectorySource::Gt;
            opts.ray_iou = false;
            let predictor = ModelPredictor {
                model: &trainer.model,
                store: &trainer.store,
                threshold: c.eval.threshold,
            };
            let r = evaluate(&predictor, val, &opts)?;
            log::info!("seed {seed} {name}: avg mIoU {:.2}", r.avg_miou);
            runs[k].push((seed, r.avg_miou, r.avg_iou));
        }
    }
    let names: Vec<String> = variants.iter().map(|v| v.0.clone()).collect();
    Ok(finish(Study::Ensemble, horizons, &names, runs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Preset;

    fn micro() -> ExperimentConfig {
        let mut c = ExperimentConfig::preset(Preset::Smoke);
        c.model.anchors.n = 4;
        c.model.anchors.m = 4;
        c.model.anchors.d = 8;
        c.model.heads = 2;
        c.model.backbone.channels = vec![4, 6];
        c.data.train_sequences = 2;
        c.data.val_sequences = 1;
        c.train.epochs = 1;
        c.train.batch_size = 2;
        c
    }

    #[test]
    fn trajectory_study_has_three_rows() {
        let c = micro();
        let (train, val) = c.data.generate().unwrap();
        let t = trajectory_ablation(&c, &[1, 2], &train, &val, None).unwrap();
        assert_eq!(t.rows.len(), 3);
        assert!(t.rows.iter().all(|r| r.runs.len() == 2));
        assert!(t.row("noisy:0.5:0.1").is_some());
        assert!(t.to_table().contains("zero"));
    }

    #[test]
    fn ensemble_study_rejects_bad_fixed_horizon() {
        let c = micro();
        let (train, val) = c.data.generate().unwrap();
        assert!(ensemble_ablation(&c, 9, &[1], &train, &val, None).is_err());
        let t = ensemble_ablation(&c, 3, &[1], &train, &val, None).unwrap();
        assert_eq!(t.horizons, vec![1, 2, 3, 4]);
        assert_eq!(t.rows[1].variant, "fixed_3");
    }
}
