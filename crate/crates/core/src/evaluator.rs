//! Voxelization of point forecasts and the metric suite: geometric IoU,
//! semantic mIoU, per-class tables and ray-level IoU.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::anchors::DecodedFrame;
use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::fusion::{ForecastOutput, WorldModel};
use crate::geometry::{wrap_angle, Vec3};
use crate::scene_data::classes::class_name;
use crate::scene_data::{GridSpec, OccupancyGrid, SequenceSample};
use crate::trajectory::TrajectoryWaypoint;

/// Bins points into `spec`. Each voxel sums the softmax probabilities of its
/// points; it is occupied when it holds a point and its best summed score is
/// at least `threshold`, labelled with the arg-max class.
pub fn voxelize_prediction(frame: &DecodedFrame, spec: &GridSpec, threshold: f64) -> OccupancyGrid {
    let classes = frame.logits.cols();
    let mut grid = OccupancyGrid::empty(*spec);
    grid.class_count = classes as u8;
    grid.labels.fill(classes as u8);
    let mut scores = vec![0.0; spec.len() * classes];
    let mut hit = vec![false; spec.len()];
    for (k, p) in frame.points.data().chunks(3).enumerate() {
        let Some(v) = spec.voxel_of(&[p[0], p[1], p[2]]) else {
            continue;
        };
        let idx = spec.index(v);
        hit[idx] = true;
        let row = frame.logits.row(k);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
        for (c, x) in row.iter().enumerate() {
            scores[idx * classes + c] += (x - m).exp() / z;
        }
    }
    for idx in 0..spec.len() {
        if !hit[idx] {
            continue;
        }
        let s = &scores[idx * classes..(idx + 1) * classes];
        let (best, score) =
            s.iter().enumerate().fold(
                (0, f64::NEG_INFINITY),
                |acc, (c, &v)| if v > acc.1 { (c, v) } else { acc },
            );
        if score >= threshold {
            grid.labels[idx] = best as u8;
        }
    }
    grid
}

fn check_pair(pred: &OccupancyGrid, gt: &OccupancyGrid) -> Result<()> {
    if pred.spec != gt.spec || pred.class_count != gt.class_count {
        return Err(Error::Incompatible(format!(
            "prediction grid {:?} with {} classes vs ground truth {:?} with {} classes",
            pred.spec, pred.class_count, gt.spec, gt.class_count
        )));
    }
    Ok(())
}

/// Voxels that take part in scoring: the ground-truth mask when requested.
fn scored(pred: &OccupancyGrid, gt: &OccupancyGrid, idx: usize, use_mask: bool) -> bool {
    gt.visible(idx, use_mask) && pred.visible(idx, use_mask)
}

/// Class-agnostic occupancy IoU in percent; 100 when both sets are empty.
pub fn geometric_iou(pred: &OccupancyGrid, gt: &OccupancyGrid, use_mask: bool) -> Result<f64> {
    check_pair(pred, gt)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for idx in 0..gt.labels.len() {
        if !scored(pred, gt, idx, use_mask) {
            continue;
        }
        let (a, b) = (pred.is_occupied(idx), gt.is_occupied(idx));
        inter += usize::from(a && b);
        union += usize::from(a || b);
    }
    Ok(if union == 0 {
        100.0
    } else {
        100.0 * inter as f64 / union as f64
    })
}

/// Per-class IoU (percent) over semantic classes; `None` for classes absent
/// from both grids. The mIoU averages the defined entries.
pub fn semantic_miou(
    pred: &OccupancyGrid,
    gt: &OccupancyGrid,
    use_mask: bool,
) -> Result<(f64, Vec<Option<f64>>)> {
    check_pair(pred, gt)?;
    let c = usize::from(gt.class_count);
    let (mut tp, mut fp, mut fneg) = (vec![0usize; c], vec![0usize; c], vec![0usize; c]);
    for idx in 0..gt.labels.len() {
        if !scored(pred, gt, idx, use_mask) {
            continue;
        }
        let (p, g) = (usize::from(pred.labels[idx]), usize::from(gt.labels[idx]));
        if p == g {
            if p < c {
                tp[p] += 1;
            }
        } else {
            if p < c {
                fp[p] += 1;
            }
            if g < c {
                fneg[g] += 1;
            }
        }
    }
    let per: Vec<Option<f64>> = (0..c)
        .map(|k| {
            let denom = tp[k] + fp[k] + fneg[k];
            (denom > 0).then(|| 100.0 * tp[k] as f64 / denom as f64)
        })
        .collect();
    let defined: Vec<f64> = per.iter().flatten().copied().collect();
    let miou = if defined.is_empty() {
        100.0
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    };
    Ok((miou, per))
}

/// Default ray origin: ego origin lifted to camera height.
pub const RAY_ORIGIN: Vec3 = [0.0, 0.0, 1.6];

/// Default depth thresholds, meters.
pub const RAY_THRESHOLDS: [f64; 3] = [1.0, 2.0, 4.0];

/// First occupied voxel along a ray: `(distance to voxel entry, label)`.
pub fn first_hit(grid: &OccupancyGrid, origin: &Vec3, dir: &Vec3) -> Option<(f64, u8)> {
    let spec = &grid.spec;
    let (lo, hi) = (spec.origin, spec.upper());
    let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
    for a in 0..3 {
        if dir[a].abs() < 1e-15 {
            if origin[a] < lo[a] || origin[a] >= hi[a] {
                return None;
            }
            continue;
        }
        let (ta, tb) = ((lo[a] - origin[a]) / dir[a], (hi[a] - origin[a]) / dir[a]);
        t0 = t0.max(ta.min(tb));
        t1 = t1.min(ta.max(tb));
    }
    if t0 >= t1 {
        return None;
    }
    let h = spec.voxel_size;
    let start: Vec3 = std::array::from_fn(|a| origin[a] + dir[a] * t0);
    // A start on a cell face belongs to the cell the ray moves into.
    let mut cell: [i64; 3] = std::array::from_fn(|a| {
        let u = (start[a] - lo[a]) / h;
        let c = if dir[a] < 0.0 {
            u.ceil() - 1.0
        } else {
            u.floor()
        };
        (c as i64).clamp(0, spec.dims[a] as i64 - 1)
    });
    let step: [i64; 3] = std::array::from_fn(|a| if dir[a] > 0.0 { 1 } else { -1 });
    let mut t_max: [f64; 3] = [f64::INFINITY; 3];
    let mut t_delta: [f64; 3] = [f64::INFINITY; 3];
    for a in 0..3 {
        if dir[a].abs() >= 1e-15 {
            let next = lo[a] + (cell[a] + i64::from(dir[a] > 0.0)) as f64 * h;
            t_max[a] = (next - origin[a]) / dir[a];
            t_delta[a] = h / dir[a].abs();
        }
    }
    let mut t_enter = t0;
    loop {
        let idx = spec.index([cell[0] as usize, cell[1] as usize, cell[2] as usize]);
        if grid.is_occupied(idx) {
            return Some((t_enter, grid.labels[idx]));
        }
        t_enter = t_max.iter().copied().fold(f64::INFINITY, f64::min);
        if t_enter >= t1 {
            return None;
        }
        // Crossing an edge or corner steps every tied axis at once, so cells
        // the ray only grazes are never entered.
        for a in 0..3 {
            if t_max[a] <= t_enter + TIE_EPS {
                cell[a] += step[a];
                if cell[a] < 0 || cell[a] >= spec.dims[a] as i64 {
                    return None;
                }
                t_max[a] += t_delta[a];
            }
        }
    }
}

/// Ray parameters closer than this count as the same crossing, meters.
pub const TIE_EPS: f64 = 1e-9;

/// Occupied ground-truth voxels with at least one free face neighbour.
pub fn surface_voxels(grid: &OccupancyGrid) -> Vec<usize> {
    let d = grid.spec.dims;
    (0..grid.labels.len())
        .filter(|&idx| {
            if !grid.is_occupied(idx) {
                return false;
            }
            let c = grid.spec.coords(idx);
            (0..3).any(|a| {
                [-1i64, 1].iter().any(|&s| {
                    let v = c[a] as i64 + s;
                    if v < 0 || v >= d[a] as i64 {
                        return false;
                    }
                    let mut n = c;
                    n[a] = v as usize;
                    !grid.is_occupied(grid.spec.index(n))
                })
            })
        })
        .collect()
}

/// Unit directions from `origin` through every ground-truth surface voxel.
pub fn surface_rays(gt: &OccupancyGrid, origin: &Vec3) -> Vec<Vec3> {
    surface_voxels(gt)
        .into_iter()
        .filter_map(|idx| {
            let c = gt.spec.center(gt.spec.coords(idx));
            let d: Vec3 = std::array::from_fn(|a| c[a] - origin[a]);
            let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            (n > 1e-9).then(|| [d[0] / n, d[1] / n, d[2] / n])
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RayIou {
    pub thresholds: Vec<f64>,
    /// mIoU (percent) per threshold.
    pub per_threshold: Vec<f64>,
    pub mean: f64,
}

/// Ray-level mIoU over `rays` cast from `origin`.
pub fn ray_iou(
    pred: &OccupancyGrid,
    gt: &OccupancyGrid,
    origin: &Vec3,
    rays: &[Vec3],
    thresholds: &[f64],
) -> Result<RayIou> {
    check_pair(pred, gt)?;
    if rays.is_empty() {
        return Err(Error::Shape("ray_iou: empty ray set".into()));
    }
    let c = usize::from(gt.class_count);
    let hits: Vec<(Option<(f64, u8)>, Option<(f64, u8)>)> = rays
        .iter()
        .map(|d| (first_hit(pred, origin, d), first_hit(gt, origin, d)))
        .collect();
    let per_threshold: Vec<f64> = thresholds
        .iter()
        .map(|&tau| {
            let (mut tp, mut fp, mut fneg) = (vec![0usize; c], vec![0usize; c], vec![0usize; c]);
            for (p, g) in &hits {
                let matched = matches!((p, g), (Some((dp, lp)), Some((dg, lg))) if lp == lg && (dp - dg).abs() <= tau);
                if matched {
                    tp[usize::from(g.expect("matched").1)] += 1;
                    continue;
                }
                if let Some((_, l)) = p {
                    fp[usize::from(*l)] += 1;
                }
                if let Some((_, l)) = g {
                    fneg[usize::from(*l)] += 1;
                }
            }
            let ious: Vec<f64> = (0..c)
                .filter_map(|k| {
                    let denom = tp[k] + fp[k] + fneg[k];
                    (denom > 0).then(|| 100.0 * tp[k] as f64 / denom as f64)
                })
                .collect();
            if ious.is_empty() {
                100.0
            } else {
                ious.iter().sum::<f64>() / ious.len() as f64
            }
        })
        .collect();
    let mean = per_threshold.iter().sum::<f64>() / per_threshold.len().max(1) as f64;
    Ok(RayIou {
        thresholds: thresholds.to_vec(),
        per_threshold,
        mean,
    })
}

/// Where forecast waypoints come from at evaluation time.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum TrajectorySource {
    Gt,
    /// Ground truth plus Gaussian noise on x, y (meters) and heading (rad).
    Noisy {
        sigma_xy: f64,
        sigma_theta: f64,
    },
    /// Every waypoint at the current pose.
    Zero,
}

impl std::str::FromStr for TrajectorySource {
    type Err = Error;

    /// `gt`, `zero` or `noisy:<sigma_xy>:<sigma_theta>`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || {
            Error::config(
                "traj_source",
                format!("expected gt, zero or noisy:<sigma_xy>:<sigma_theta>, got `{s}`"),
            )
        };
        match s {
            "gt" => Ok(Self::Gt),
            "zero" => Ok(Self::Zero),
            _ => {
                let parts: Vec<&str> = s.split(':').collect();
                if parts.len() != 3 || parts[0] != "noisy" {
                    return Err(bad());
                }
                let sigma_xy: f64 = parts[1].parse().map_err(|_| bad())?;
                let sigma_theta: f64 = parts[2].parse().map_err(|_| bad())?;
                if !(sigma_xy >= 0.0 && sigma_theta >= 0.0) {
                    return Err(bad());
                }
                Ok(Self::Noisy {
                    sigma_xy,
                    sigma_theta,
                })
            }
        }
    }
}

impl TryFrom<String> for TrajectorySource {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<TrajectorySource> for String {
    fn from(s: TrajectorySource) -> String {
        s.to_string()
    }
}

impl std::fmt::Display for TrajectorySource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Gt => write!(f, "gt"),
            Self::Zero => write!(f, "zero"),
            Self::Noisy {
                sigma_xy,
                sigma_theta,
            } => write!(f, "noisy:{sigma_xy}:{sigma_theta}"),
        }
    }
}

/// Stable 64-bit key of a string, used to seed per-sample randomness.
pub fn stable_hash(s: &str) -> u64 {
    let d = Sha256::digest(s.as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
}

/// Applies a trajectory source. Noise depends only on `seed` and the sample
/// id, so results do not depend on dataset order.
pub fn apply_trajectory_source(
    traj: &[TrajectoryWaypoint],
    source: TrajectorySource,
    sample_id: &str,
    seed: u64,
) -> Vec<TrajectoryWaypoint> {
    match source {
        TrajectorySource::Gt => traj.to_vec(),
        TrajectorySource::Zero => traj
            .iter()
            .map(|w| TrajectoryWaypoint::new(0.0, 0.0, 0.0, w.t))
            .collect(),
        TrajectorySource::Noisy {
            sigma_xy,
            sigma_theta,
        } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ stable_hash(sample_id));
            let nx = Normal::new(0.0, sigma_xy).expect("validated sigma");
            let nt = Normal::new(0.0, sigma_theta).expect("validated sigma");
            traj.iter()
                .map(|w| {
                    let (dx, dy, dt) = (
                        nx.sample(&mut rng),
                        nx.sample(&mut rng),
                        nt.sample(&mut rng),
                    );
                    TrajectoryWaypoint::new(w.x + dx, w.y + dy, wrap_angle(w.theta + dt), w.t)
                })
                .collect()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub horizons: Vec<usize>,
    pub use_mask: bool,
    pub threshold: f64,
    pub traj_source: TrajectorySource,
    /// Seed of the trajectory noise.
    pub seed: u64,
    /// Compute ray-level IoU (slower).
    pub ray_iou: bool,
    pub ray_origin: Vec3,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            horizons: vec![1, 2, 3],
            use_mask: false,
            threshold: 0.0,
            traj_source: TrajectorySource::Gt,
            seed: 0,
            ray_iou: true,
            ray_origin: RAY_ORIGIN,
        }
    }
}

/// Anything that turns a sample into voxel forecasts.
pub trait Predictor {
    /// Grids for future frames `1..=horizon`.
    fn predict(
        &self,
        sample: &SequenceSample,
        trajectory: &[TrajectoryWaypoint],
        horizon: usize,
    ) -> Result<Vec<OccupancyGrid>>;

    /// Current-frame grid, when the predictor produces one.
    fn reconstruct(&self, _sample: &SequenceSample) -> Result<Option<OccupancyGrid>> {
        Ok(None)
    }
}

/// Feeds ground truth back as the prediction.
pub struct OraclePredictor;

impl Predictor for OraclePredictor {
    fn predict(
        &self,
        sample: &SequenceSample,
        _trajectory: &[TrajectoryWaypoint],
        horizon: usize,
    ) -> Result<Vec<OccupancyGrid>> {
        if horizon > sample.future_grids.len() {
            return Err(Error::Horizon {
                requested: horizon,
                max: sample.future_grids.len(),
            });
        }
        Ok(sample.future_grids[..horizon].to_vec())
    }

    fn reconstruct(&self, sample: &SequenceSample) -> Result<Option<OccupancyGrid>> {
        Ok(sample.current_grid.clone())
    }
}

/// A trained model with voxelization settings.
pub struct ModelPredictor<'a> {
    pub model: &'a WorldModel,
    pub store: &'a ParamStore,
    pub threshold: f64,
}

impl ModelPredictor<'_> {
    pub fn forecast(
        &self,
        sample: &SequenceSample,
        trajectory: &[TrajectoryWaypoint],
    ) -> Result<ForecastOutput> {
        let obs = self.model.observe(self.store, &sample.past)?;
        self.model.forecast(self.store, &obs, trajectory)
    }
}

impl Predictor for ModelPredictor<'_> {
    fn predict(
        &self,
        sample: &SequenceSample,
        trajectory: &[TrajectoryWaypoint],
        horizon: usize,
    ) -> Result<Vec<OccupancyGrid>> {
        let out = self.forecast(sample, &trajectory[..horizon])?;
        let spec = sample
            .future_grids
            .first()
            .map(|g| g.spec)
            .ok_or_else(|| Error::Shape(format!("{}: no future grids", sample.id)))?;
        Ok(out
            .frames
            .iter()
            .map(|f| voxelize_prediction(f, &spec, self.threshold))
            .collect())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SliceMetrics {
    /// Future frame index, 0 for the reconstruction slice.
    pub horizon: usize,
    pub iou: f64,
    pub miou: f64,
    /// Mean per-class IoU over samples where the class is defined.
    pub per_class: Vec<Option<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ray_iou: Option<RayIou>,
    pub samples: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub horizons: Vec<SliceMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reconstruction: Option<SliceMetrics>,
    /// Means over the requested horizons.
    pub avg_iou: f64,
    pub avg_miou: f64,
    pub samples: usize,
    pub skipped: Vec<String>,
    pub options: Option<EvalOptions>,
    pub ray_family: String,
}

#[derive(Default)]
struct SliceAccumulator {
    iou: Vec<f64>,
    miou: Vec<f64>,
    per_class: Vec<Vec<f64>>,
    ray: Vec<RayIou>,
}

impl SliceAccumulator {
    fn push(&mut self, pred: &OccupancyGrid, gt: &OccupancyGrid, opts: &EvalOptions) -> Result<()> {
        self.iou.push(geometric_iou(pred, gt, opts.use_mask)?);
        let (miou, per) = semantic_miou(pred, gt, opts.use_mask)?;
        self.miou.push(miou);
        if self.per_class.is_empty() {
            self.per_class = vec![Vec::new(); per.len()];
        }
        for (acc, v) in self.per_class.iter_mut().zip(per) {
            acc.extend(v);
        }
        if opts.ray_iou {
            let rays = surface_rays(gt, &opts.ray_origin);
            if !rays.is_empty() {
                self.ray
                    .push(ray_iou(pred, gt, &opts.ray_origin, &rays, &RAY_THRESHOLDS)?);
            }
        }
        Ok(())
    }

    fn finish(self, horizon: usize) -> SliceMetrics {
        let mean = |v: &[f64]| {
            if v.is_empty() {
                0.0
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        };
        let ray_iou = (!self.ray.is_empty()).then(|| {
            let per: Vec<f64> = (0..RAY_THRESHOLDS.len())
                .map(|k| {
                    mean(
                        &self
                            .ray
                            .iter()
                            .map(|r| r.per_threshold[k])
                            .collect::<Vec<_>>(),
                    )
                })
                .collect();
            RayIou {
                thresholds: RAY_THRESHOLDS.to_vec(),
                mean: mean(&per),
                per_threshold: per,
            }
        });
        SliceMetrics {
            horizon,
            iou: mean(&self.iou),
            miou: mean(&self.miou),
            per_class: self
                .per_class
                .iter()
                .map(|v| (!v.is_empty()).then(|| mean(v)))
                .collect(),
            ray_iou,
            samples: self.iou.len(),
        }
    }
}

/// Forecasts each sample once at the longest requested horizon and scores
/// every requested slice. Aggregates are per-sample means, accumulated in
/// sample-id order so the report does not depend on dataset order.
pub fn evaluate(
    predictor: &dyn Predictor,
    dataset: &[SequenceSample],
    opts: &EvalOptions,
) -> Result<MetricReport> {
    let max_h = *opts
        .horizons
        .iter()
        .max()
        .ok_or_else(|| Error::config("eval.horizons", "no horizons requested"))?;
    if opts.horizons.contains(&0) {
        return Err(Error::config("eval.horizons", "horizons start at 1"));
    }
    let mut order: Vec<&SequenceSample> = dataset.iter().collect();
    order.sort_by(|a, b| a.id.cmp(&b.id));
    let mut slices: Vec<SliceAccumulator> = opts
        .horizons
        .iter()
        .map(|_| SliceAccumulator::default())
        .collect();
    let mut recon = SliceAccumulator::default();
    let mut skipped = Vec::new();
    let mut scored = 0;
    for sample in order {
        if sample.future_grids.len() < max_h || sample.trajectory.len() < max_h {
            log::warn!(
                "{}: ground truth covers {} frames, {max_h} requested; skipped",
                sample.id,
                sample.future_grids.len()
            );
            skipped.push(sample.id.clone());
            continue;
        }
        let traj =
            apply_trajectory_source(&sample.trajectory, opts.traj_source, &sample.id, opts.seed);
        let preds = predictor.predict(sample, &traj, max_h)?;
        for (acc, &h) in slices.iter_mut().zip(&opts.horizons) {
            acc.push(&preds[h - 1], &sample.future_grids[h - 1], opts)?;
        }
        if let (Some(gt), Some(pred)) = (&sample.current_grid, predictor.reconstruct(sample)?) {
            recon.push(&pred, gt, opts)?;
        }
        scored += 1;
    }
    let horizons: Vec<SliceMetrics> = slices
        .into_iter()
        .zip(&opts.horizons)
        .map(|(a, &h)| a.finish(h))
        .collect();
    let n = horizons.len() as f64;
    Ok(MetricReport {
        avg_iou: horizons.iter().map(|h| h.iou).sum::<f64>() / n,
        avg_miou: horizons.iter().map(|h| h.miou).sum::<f64>() / n,
        reconstruction: (!recon.iou.is_empty()).then(|| recon.finish(0)),
        horizons,
        samples: scored,
        skipped,
        options: Some(opts.clone()),
        ray_family: format!(
            "rays from ({}, {}, {}) through every ground-truth surface voxel centre",
            opts.ray_origin[0], opts.ray_origin[1], opts.ray_origin[2]
        ),
    })
}

/// Scores one model at several voxelization thresholds.
pub fn threshold_sweep(
    model: &WorldModel,
    store: &ParamStore,
    dataset: &[SequenceSample],
    opts: &EvalOptions,
    thresholds: &[f64],
) -> Result<Vec<(f64, MetricReport)>> {
    if let Some(t) = thresholds.iter().find(|t| !t.is_finite()) {
        return Err(Error::config(
            "eval.threshold",
            format!("threshold {t} is not finite"),
        ));
    }
    thresholds
        .iter()
        .map(|&threshold| {
            let opts = EvalOptions {
                threshold,
                ..opts.clone()
            };
            Ok((
                threshold,
                evaluate(
                    &ModelPredictor {
                        model,
                        store,
                        threshold,
                    },
                    dataset,
                    &opts,
                )?,
            ))
        })
        .collect()
}

/// Text table of a sweep: one row per threshold.
pub fn sweep_table(rows: &[(f64, MetricReport)]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:>10} {:>8} {:>8}", "threshold", "IoU", "mIoU");
    for (t, r) in rows {
        let _ = writeln!(s, "{t:>10.3} {:>8.2} {:>8.2}", r.avg_iou, r.avg_miou);
    }
    s
}

impl MetricReport {
    /// Aligned text table: one row per horizon, then per-class IoUs.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<10} {:>8} {:>8} {:>8}",
            "horizon", "IoU", "mIoU", "RayIoU"
        );
        let fmt_ray = |m: &SliceMetrics| {
            m.ray_iou
                .as_ref()
                .map_or("-".to_string(), |r| format!("{:.2}", r.mean))
        };
        if let Some(r) = &self.reconstruction {
            let _ = writeln!(
                s,
                "{:<10} {:>8.2} {:>8.2} {:>8}",
                "recon",
                r.iou,
                r.miou,
                fmt_ray(r)
            );
        }
        for h in &self.horizons {
            let _ = writeln!(
                s,
                "{:<10} {:>8.2} {:>8.2} {:>8}",
                format!("t+{}", h.horizon),
                h.iou,
                h.miou,
                fmt_ray(h)
            );
        }
        let _ = writeln!(
            s,
            "{:<10} {:>8.2} {:>8.2}",
            "avg", self.avg_iou, self.avg_miou
        );
        let _ = writeln!(s);
        let classes = self.horizons.first().map_or(0, |h| h.per_class.len());
        let _ = write!(s, "{:<20}", "class");
        for h in &self.horizons {
            let _ = write!(s, " {:>8}", format!("t+{}", h.horizon));
        }
        let _ = writeln!(s);
        for c in 0..classes {
            if self.horizons.iter().all(|h| h.per_class[c].is_none()) {
                continue;
            }
            let _ = write!(s, "{:<20}", class_name(c as u8));
            for h in &self.horizons {
                match h.per_class[c] {
                    Some(v) => {
                        let _ = write!(s, " {v:>8.2}");
                    }
                    None => {
                        let _ = write!(s, " {:>8}", "-");
                    }
                }
            }
            let _ = writeln!(s);
        }
        let _ = writeln!(
            s,
            "\nsamples: {}  skipped: {}",
            self.samples,
            self.skipped.len()
        );
        s
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use rand::Rng;

    use super::*;
    use crate::autodiff::Tensor;
    use crate::scene_data::grid_to_points;

    pub(crate) fn random_grid(
        rng: &mut ChaCha8Rng,
        dims: [usize; 3],
        classes: u8,
        fill: f64,
    ) -> OccupancyGrid {
        let spec = GridSpec {
            dims,
            voxel_size: 1.0,
            origin: [-(dims[0] as f64) / 2.0, -(dims[1] as f64) / 2.0, -1.0],
        };
        let mut g = OccupancyGrid::empty(spec);
        for l in g.labels.iter_mut() {
            if rng.random_bool(fill) {
                *l = rng.random_range(0..classes);
            }
        }
        g
    }

    fn one_hot(points: &[Vec3], labels: &[u8], classes: usize) -> DecodedFrame {
        DecodedFrame {
            points: Tensor::new(&[points.len(), 3], points.concat()),
            logits: Tensor::from_fn(&[points.len(), classes], |i| {
                if i % classes == usize::from(labels[i / classes]) {
                    50.0
                } else {
                    0.0
                }
            }),
            features: Tensor::zeros(&[1, 1]),
        }
    }

    #[test]
    fn voxelize_examples() {
        let spec = GridSpec {
            dims: [4, 4, 2],
            voxel_size: 0.5,
            origin: [0.0, 0.0, 0.0],
        };
        let empty = one_hot(&[[-5.0, 0.0, 0.0]], &[3], 17);
        assert_eq!(voxelize_prediction(&empty, &spec, 0.0).occupied_count(), 0);
        let c = spec.center([1, 2, 1]);
        let g = voxelize_prediction(&one_hot(&[c], &[5], 17), &spec, 0.0);
        assert_eq!(g.occupied_count(), 1);
        assert_eq!(g.get([1, 2, 1]), 5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let gt = random_grid(&mut rng, [6, 5, 3], 17, 0.3);
            let ps = grid_to_points(&gt, false);
            assert_eq!(
                voxelize_prediction(&one_hot(&ps.points, &ps.labels, 17), &gt.spec, 0.0),
                gt
            );
        }
    }

    #[test]
    fn voxelize_matches_binning_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let spec = GridSpec {
            dims: [5, 5, 3],
            voxel_size: 0.5,
            origin: [-1.0, -1.0, 0.0],
        };
        let n = 60;
        let pts: Vec<Vec3> = (0..n)
            .map(|_| {
                [
                    rng.random_range(-1.5..2.0),
                    rng.random_range(-1.5..2.0),
                    rng.random_range(-0.2..1.7),
                ]
            })
            .collect();
        let frame = DecodedFrame {
            points: Tensor::new(&[n, 3], pts.concat()),
            logits: Tensor::from_fn(&[n, 4], |_| rng.random_range(-2.0..2.0)),
            features: Tensor::zeros(&[1, 1]),
        };
        let got = voxelize_prediction(&frame, &spec, 0.9);
        let mut sums = std::collections::BTreeMap::<[i64; 3], Vec<f64>>::new();
        for (k, p) in pts.iter().enumerate() {
            let v: [i64; 3] =
                std::array::from_fn(|a| ((p[a] - spec.origin[a]) / 0.5).floor() as i64);
            if (0..3).any(|a| v[a] < 0 || v[a] >= spec.dims[a] as i64) {
                continue;
            }
            let row = frame.logits.row(k);
            let z: f64 = row.iter().map(|x| x.exp()).sum();
            let e = sums.entry(v).or_insert(vec![0.0; 4]);
            for c in 0..4 {
                e[c] += row[c].exp() / z;
            }
        }
        let mut expect = std::collections::BTreeSet::new();
        for (v, s) in &sums {
            if s.iter().cloned().fold(f64::MIN, f64::max) >= 0.9 {
                expect.insert(*v);
            }
        }
        let occupied: std::collections::BTreeSet<[i64; 3]> = (0..spec.len())
            .filter(|&i| got.is_occupied(i))
            .map(|i| {
                let c = spec.coords(i);
                [c[0] as i64, c[1] as i64, c[2] as i64]
            })
            .collect();
        assert_eq!(occupied, expect);
    }

    #[test]
    fn iou_closed_forms() {
        let spec = GridSpec {
            dims: [4, 1, 1],
            voxel_size: 1.0,
            origin: [0.0; 3],
        };
        let mut a = OccupancyGrid::empty(spec);
        let mut b = OccupancyGrid::empty(spec);
        assert_eq!(geometric_iou(&a, &b, false).unwrap(), 100.0);
        a.labels[..2].fill(1);
        b.labels[2..].fill(1);
        assert_eq!(geometric_iou(&a, &b, false).unwrap(), 0.0);
        b.labels = vec![17, 1, 1, 17];
        assert!((geometric_iou(&a, &b, false).unwrap() - 100.0 / 3.0).abs() < 1e-12);
        assert_eq!(
            geometric_iou(&a, &b, false).unwrap(),
            geometric_iou(&b, &a, false).unwrap()
        );
        let other = OccupancyGrid::empty(GridSpec {
            dims: [2, 2, 1],
            ..spec
        });
        assert!(geometric_iou(&a, &other, false).is_err());
    }

    #[test]
    fn miou_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = random_grid(&mut rng, [6, 6, 2], 5, 0.5);
        let (m, per) = semantic_miou(&g, &g, false).unwrap();
        assert_eq!(m, 100.0);
        let present: std::collections::BTreeSet<u8> =
            g.labels.iter().copied().filter(|&l| l != 17).collect();
        assert_eq!(per.iter().flatten().count(), present.len());
        let free = OccupancyGrid::empty(g.spec);
        assert_eq!(semantic_miou(&free, &g, false).unwrap().0, 0.0);
    }

    #[test]
    fn masked_scoring_uses_visible_voxels() {
        let spec = GridSpec {
            dims: [4, 1, 1],
            voxel_size: 1.0,
            origin: [0.0; 3],
        };
        let mut gt = OccupancyGrid::empty(spec);
        gt.labels = vec![1, 1, 17, 17];
        gt.visibility = Some(vec![true, false, true, true]);
        let mut pred = OccupancyGrid::empty(spec);
        pred.labels = vec![1, 17, 17, 17];
        assert_eq!(geometric_iou(&pred, &gt, true).unwrap(), 100.0);
        assert_eq!(geometric_iou(&pred, &gt, false).unwrap(), 50.0);
    }

    /// Fine fixed-step marcher used as the ray oracle.
    fn march_oracle(grid: &OccupancyGrid, o: &Vec3, d: &Vec3) -> Option<u8> {
        let mut t = 0.0;
        while t < 100.0 {
            let p: Vec3 = std::array::from_fn(|a| o[a] + d[a] * t);
            if let Some(v) = grid.spec.voxel_of(&p) {
                let idx = grid.spec.index(v);
                if grid.is_occupied(idx) {
                    return Some(grid.labels[idx]);
                }
            }
            t += 1e-3;
        }
        None
    }

    #[test]
    fn dda_matches_fine_marcher() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let g = random_grid(&mut rng, [8, 8, 4], 5, 0.1);
            for _ in 0..30 {
                let d: Vec3 = [
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-1.0..1.0),
                    rng.random_range(-0.6..0.2),
                ];
                let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                let d = [d[0] / n, d[1] / n, d[2] / n];
                let o = [0.13, -0.27, 1.6];
                assert_eq!(first_hit(&g, &o, &d).map(|h| h.1), march_oracle(&g, &o, &d));
            }
        }
    }

    #[test]
    fn dda_on_cell_faces_and_edges() {
        let spec = GridSpec {
            dims: [8, 8, 4],
            voxel_size: 1.0,
            origin: [-4.0, -4.0, -1.0],
        };
        let mut g = OccupancyGrid::empty(spec);
        // the cell x in [0, 1] next to an origin on the x = 0 face
        g.set([4, 4, 2], 3);
        assert_eq!(first_hit(&g, &RAY_ORIGIN, &[-1.0, 0.0, 0.0]), None);
        assert_eq!(first_hit(&g, &RAY_ORIGIN, &[1.0, 0.0, 0.0]), Some((0.0, 3)));
        // a diagonal through the edge x = y = -1 skips both side cells
        let mut g = OccupancyGrid::empty(spec);
        g.set([2, 3, 2], 5);
        g.set([3, 2, 2], 5);
        let d = [
            -std::f64::consts::FRAC_1_SQRT_2,
            -std::f64::consts::FRAC_1_SQRT_2,
            0.0,
        ];
        assert_eq!(first_hit(&g, &RAY_ORIGIN, &d), None);
        g.set([2, 2, 2], 6);
        let (t, l) = first_hit(&g, &RAY_ORIGIN, &d).unwrap();
        assert_eq!(l, 6);
        assert!((t - std::f64::consts::SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn ray_iou_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = random_grid(&mut rng, [8, 8, 4], 5, 0.15);
        let rays = surface_rays(&g, &RAY_ORIGIN);
        let same = ray_iou(&g, &g, &RAY_ORIGIN, &rays, &RAY_THRESHOLDS).unwrap();
        assert!(same.per_threshold.iter().all(|&v| v == 100.0));
        let free = OccupancyGrid::empty(g.spec);
        let none = ray_iou(&free, &g, &RAY_ORIGIN, &rays, &RAY_THRESHOLDS).unwrap();
        assert!(none.per_threshold.iter().all(|&v| v == 0.0));
        assert!(ray_iou(&g, &g, &RAY_ORIGIN, &[], &RAY_THRESHOLDS).is_err());
    }

    #[test]
    fn trajectory_sources() {
        let traj: Vec<_> = (1..=3)
            .map(|t| TrajectoryWaypoint::new(t as f64, 0.1, 0.05, t as f64))
            .collect();
        assert_eq!(
            apply_trajectory_source(&traj, TrajectorySource::Gt, "a", 0),
            traj
        );
        let z = apply_trajectory_source(&traj, TrajectorySource::Zero, "a", 0);
        assert!(z.iter().all(|w| w.x == 0.0 && w.y == 0.0 && w.theta == 0.0));
        let src: TrajectorySource = "noisy:0.5:0.1".parse().unwrap();
        let a = apply_trajectory_source(&traj, src, "a", 3);
        assert_eq!(a, apply_trajectory_source(&traj, src, "a", 3));
        assert_ne!(a, apply_trajectory_source(&traj, src, "b", 3));
        assert_ne!(a, traj);
        assert!("noisy:1".parse::<TrajectorySource>().is_err());
        assert_eq!(src.to_string().parse::<TrajectorySource>().unwrap(), src);
    }

    pub(crate) fn oracle_dataset(n: usize) -> Vec<SequenceSample> {
        use crate::scene_data::synthetic::{
            generate_synthetic_sequence, ring_rig, SyntheticWorldSpec,
        };
        let spec = SyntheticWorldSpec {
            grid: GridSpec {
                dims: [16, 16, 4],
                voxel_size: 1.0,
                origin: [-8.0, -8.0, -1.0],
            },
            bounds: [[-8.0, -8.0], [12.0, 8.0]],
            static_boxes: 3,
            dynamic_boxes: 1,
            cameras: ring_rig(2, 120.0, 32, 32, 1.6),
            past_frames: 1,
            future_frames: 3,
            current_grid: true,
            ..SyntheticWorldSpec::default()
        };
        (0..n)
            .map(|s| generate_synthetic_sequence(&spec, 100 + s as u64).unwrap())
            .collect()
    }

    #[test]
    fn oracle_scores_perfectly_and_order_does_not_matter() {
        let data = oracle_dataset(3);
        let opts = EvalOptions::default();
        let r = evaluate(&OraclePredictor, &data, &opts).unwrap();
        for h in r.horizons.iter().chain(r.reconstruction.as_ref()) {
            assert_eq!((h.iou, h.miou), (100.0, 100.0));
            assert!(h
                .ray_iou
                .as_ref()
                .unwrap()
                .per_threshold
                .iter()
                .all(|&v| v == 100.0));
        }
        let mut rev = data.clone();
        rev.reverse();
        assert_eq!(evaluate(&OraclePredictor, &rev, &opts).unwrap(), r);
        assert!(r.to_table().contains("t+3"));
    }

    #[test]
    fn sweep_prunes_monotonically() {
        use crate::fusion::tests::{tiny_config, tiny_sample};
        let (model, store) = WorldModel::new(tiny_config(), 3).unwrap();
        let data = [tiny_sample(1), tiny_sample(2)];
        let opts = EvalOptions {
            ray_iou: false,
            ..EvalOptions::default()
        };
        let rows = threshold_sweep(&model, &store, &data, &opts, &[0.0, 0.5, 1e9]).unwrap();
        let direct = evaluate(
            &ModelPredictor {
                model: &model,
                store: &store,
                threshold: 0.0,
            },
            &data,
            &opts,
        )
        .unwrap();
        assert_eq!(rows[0].1, direct);
        // an unreachable threshold leaves every grid empty
        assert!(rows[2].1.horizons.iter().all(|h| h.iou == 0.0));
        assert!(sweep_table(&rows).lines().count() == 4);
        assert!(threshold_sweep(&model, &store, &data, &opts, &[f64::NAN]).is_err());
    }

    /// Returns all-free grids for one sample and ground truth for the other.
    struct HalfOracle(String);

    impl Predictor for HalfOracle {
        fn predict(
            &self,
            s: &SequenceSample,
            _t: &[TrajectoryWaypoint],
            h: usize,
        ) -> Result<Vec<OccupancyGrid>> {
            Ok(s.future_grids[..h]
                .iter()
                .map(|g| {
                    if s.id == self.0 {
                        OccupancyGrid::empty(g.spec)
                    } else {
                        g.clone()
                    }
                })
                .collect())
        }
    }

    #[test]
    fn report_means_are_per_sample_averages() {
        let data = oracle_dataset(2);
        let opts = EvalOptions {
            horizons: vec![1, 2],
            ray_iou: false,
            ..EvalOptions::default()
        };
        let r = evaluate(&HalfOracle(data[0].id.clone()), &data, &opts).unwrap();
        for h in &r.horizons {
            assert_eq!(h.iou, 50.0);
            assert_eq!(h.miou, 50.0);
        }
        assert_eq!(r.avg_iou, 50.0);
    }
}
