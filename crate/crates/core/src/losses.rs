//! Chamfer-L1 geometry loss, nearest-point label matching, focal loss and
//! an optional free-space penalty.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::anchors::DecodedVars;
use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::fusion::ForecastVars;
use crate::geometry::Vec3;
use crate::scene_data::{grid_to_points, OccupancyGrid, PointSet};

fn l1(a: &Vec3, b: &Vec3) -> f64 {
    (a[0] - b[0]).abs() + (a[1] - b[1]).abs() + (a[2] - b[2]).abs()
}

/// Distance slack under which two candidates count as tied, meters.
pub const TIE_TOL: f64 = 1e-9;

/// Uniform bucket grid over a point set for exact L1 nearest-neighbour
/// queries.
pub struct NeighborIndex<'a> {
    points: &'a [Vec3],
    origin: Vec3,
    cell: f64,
    dims: [i64; 3],
    /// Cell start offsets into `order`, length `cells + 1`.
    starts: Vec<usize>,
    order: Vec<usize>,
}

impl<'a> NeighborIndex<'a> {
    pub fn new(points: &'a [Vec3]) -> Self {
        assert!(!points.is_empty(), "index over an empty set");
        let mut lo = points[0];
        let mut hi = points[0];
        for p in points {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        let extent: Vec<f64> = (0..3).map(|a| hi[a] - lo[a]).collect();
        let volume: f64 = extent.iter().map(|e| e.max(1e-9)).product();
        // about two points per cell
        let mut cell = (2.0 * volume / points.len() as f64).cbrt();
        let longest = extent.iter().cloned().fold(0.0, f64::max);
        if !(cell.is_finite() && cell > 0.0) || cell < longest / 64.0 {
            cell = (longest / 64.0).max(1e-3);
        }
        let dims: [i64; 3] = std::array::from_fn(|a| (extent[a] / cell).floor() as i64 + 1);
        let ncell = (dims[0] * dims[1] * dims[2]) as usize;
        let mut counts = vec![0usize; ncell + 1];
        let mut cell_of = Vec::with_capacity(points.len());
        for p in points {
            let c: [i64; 3] = std::array::from_fn(|a| {
                (((p[a] - lo[a]) / cell).floor() as i64).clamp(0, dims[a] - 1)
            });
            let id = ((c[2] * dims[1] + c[1]) * dims[0] + c[0]) as usize;
            counts[id + 1] += 1;
            cell_of.push(id);
        }
        for i in 0..ncell {
            counts[i + 1] += counts[i];
        }
        let mut fill = counts.clone();
        let mut order = vec![0; points.len()];
        for (i, &c) in cell_of.iter().enumerate() {
            order[fill[c]] = i;
            fill[c] += 1;
        }
        Self {
            points,
            origin: lo,
            cell,
            dims,
            starts: counts,
            order,
        }
    }

    /// Nearest point under L1 as `(distance, index)`. L1 distances within
    /// [`TIE_TOL`] count as equal and are settled by Euclidean distance, then
    /// by the lower index, so round-off cannot flip the match.
    pub fn nearest(&self, q: &Vec3) -> (f64, usize) {
        let qc: [i64; 3] =
            std::array::from_fn(|a| ((q[a] - self.origin[a]) / self.cell).floor() as i64);
        let max_r = (0..3)
            .map(|a| qc[a].abs().max((qc[a] - (self.dims[a] - 1)).abs()))
            .max()
            .unwrap_or(0);
        // rings closer than the grid box are empty
        let first = (0..3)
            .map(|a| (-qc[a]).max(qc[a] - (self.dims[a] - 1)).max(0))
            .max()
            .unwrap_or(0);
        let mut best = (f64::INFINITY, usize::MAX);
        let mut best_l2 = f64::INFINITY;
        for r in first..=max_r {
            let lo: [i64; 3] = std::array::from_fn(|a| (qc[a] - r).max(0));
            let hi: [i64; 3] = std::array::from_fn(|a| (qc[a] + r).min(self.dims[a] - 1));
            for z in lo[2]..=hi[2] {
                for y in lo[1]..=hi[1] {
                    for x in lo[0]..=hi[0] {
                        let cheb = (x - qc[0])
                            .abs()
                            .max((y - qc[1]).abs())
                            .max((z - qc[2]).abs());
                        if cheb != r {
                            continue;
                        }
                        let id = ((z * self.dims[1] + y) * self.dims[0] + x) as usize;
                        for &i in &self.order[self.starts[id]..self.starts[id + 1]] {
                            let p = &self.points[i];
                            let d = l1(q, p);
                            if d > best.0 + TIE_TOL {
                                continue;
                            }
                            let d2 = (0..3).map(|a| (q[a] - p[a]).powi(2)).sum::<f64>();
                            let better = d < best.0 - TIE_TOL
                                || d2 < best_l2 - TIE_TOL
                                || ((d2 - best_l2).abs() <= TIE_TOL && i < best.1);
                            if better {
                                best = (d, i);
                                best_l2 = d2;
                            }
                        }
                    }
                }
            }
            // anything in ring r + 1 is at least r whole cells away
            if best.0 + TIE_TOL < r as f64 * self.cell {
                break;
            }
        }
        best
    }
}

/// Nearest target for every query point.
pub fn nearest_l1(queries: &[Vec3], targets: &[Vec3]) -> Vec<(f64, usize)> {
    let index = NeighborIndex::new(targets);
    queries.iter().map(|q| index.nearest(q)).collect()
}

/// Symmetric Chamfer distance with the L1 point norm. Both sets must be
/// non-empty.
pub fn chamfer_l1(pred: &[Vec3], target: &[Vec3]) -> f64 {
    assert!(
        !pred.is_empty() && !target.is_empty(),
        "chamfer_l1 needs two non-empty sets"
    );
    let a: f64 = nearest_l1(pred, target).iter().map(|x| x.0).sum();
    let b: f64 = nearest_l1(target, pred).iter().map(|x| x.0).sum();
    a / pred.len() as f64 + b / target.len() as f64
}

/// Label of each prediction's L1-nearest target point.
pub fn match_labels(pred: &[Vec3], targets: &PointSet) -> Result<Vec<u8>> {
    if targets.is_empty() {
        return Err(Error::Shape("match_labels: empty target set".into()));
    }
    Ok(nearest_l1(pred, &targets.points)
        .into_iter()
        .map(|(_, i)| targets.labels[i])
        .collect())
}

fn rows3(t: &Tensor) -> Vec<Vec3> {
    t.data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect()
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Differentiable Chamfer-L1 of `pred [k, 3]` against fixed targets.
/// Also returns each prediction's nearest target index.
pub fn chamfer_l1_op(g: &Graph, pred: Var, target: Rc<Vec<Vec3>>) -> (Var, Vec<usize>) {
    let pv = g.value(pred);
    let p = rows3(&pv);
    let fwd = nearest_l1(&p, &target);
    let bwd = nearest_l1(&target, &p);
    let (k, n) = (p.len() as f64, target.len() as f64);
    let value = fwd.iter().map(|x| x.0).sum::<f64>() / k + bwd.iter().map(|x| x.0).sum::<f64>() / n;
    let idx: Vec<usize> = fwd.iter().map(|x| x.1).collect();
    let fwd_idx = idx.clone();
    let bwd_idx: Vec<usize> = bwd.iter().map(|x| x.1).collect();
    let var = g.custom(&[pred], Tensor::scalar(value), move |grad, sink| {
        let s = grad.data()[0];
        sink.add_with(pred, pv.shape(), |gp| {
            for (i, &j) in fwd_idx.iter().enumerate() {
                for a in 0..3 {
                    gp[3 * i + a] += s * sign(p[i][a] - target[j][a]) / k;
                }
            }
            for (j, &i) in bwd_idx.iter().enumerate() {
                for a in 0..3 {
                    gp[3 * i + a] += s * sign(p[i][a] - target[j][a]) / n;
                }
            }
        });
    });
    (var, idx)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FocalConfig {
    pub gamma: f64,
    pub alpha: f64,
    /// Per-class weights replacing `alpha` when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_alpha: Option<Vec<f64>>,
}

impl Default for FocalConfig {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            alpha: 0.25,
            class_alpha: None,
        }
    }
}

impl FocalConfig {
    fn alpha_for(&self, class: usize) -> f64 {
        self.class_alpha.as_ref().map_or(self.alpha, |a| a[class])
    }
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    row.iter().map(|x| x - lse).collect()
}

fn check_targets(classes: usize, targets: &[usize], cfg: &FocalConfig) -> Result<()> {
    if let Some(&t) = targets.iter().find(|&&t| t >= classes) {
        return Err(Error::Shape(format!(
            "focal target {t} outside [0, {classes})"
        )));
    }
    if let Some(a) = &cfg.class_alpha {
        if a.len() != classes {
            return Err(Error::config(
                "loss.focal.class_alpha",
                format!("expected {classes} weights, got {}", a.len()),
            ));
        }
    }
    Ok(())
}

/// Mean of `−α_t (1 − p_t)^γ log p_t` over rows of `logits [k, c]`.
pub fn focal_loss(logits: &Tensor, targets: &[usize], cfg: &FocalConfig) -> Result<f64> {
    let c = logits.cols();
    check_targets(c, targets, cfg)?;
    let total: f64 = targets
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let lp = log_softmax(logits.row(i))[t];
            -cfg.alpha_for(t) * (1.0 - lp.exp()).powf(cfg.gamma) * lp
        })
        .sum();
    Ok(total / targets.len().max(1) as f64)
}

/// Differentiable [`focal_loss`].
pub fn focal_loss_op(
    g: &Graph,
    logits: Var,
    targets: Vec<usize>,
    cfg: &FocalConfig,
) -> Result<Var> {
    let lv = g.value(logits);
    let (k, c) = (lv.rows(), lv.cols());
    if targets.len() != k {
        return Err(Error::Shape(format!(
            "focal: {} targets for {k} rows",
            targets.len()
        )));
    }
    let value = focal_loss(&lv, &targets, cfg)?;
    let cfg = cfg.clone();
    Ok(
        g.custom(&[logits], Tensor::scalar(value), move |grad, sink| {
            let s = grad.data()[0] / k.max(1) as f64;
            sink.add_with(logits, &[k, c], |gl| {
                for (i, &t) in targets.iter().enumerate() {
                    let lsm = log_softmax(lv.row(i));
                    let lp = lsm[t];
                    let p = lp.exp();
                    let q = 1.0 - p;
                    let gm = cfg.gamma;
                    // dL/dz_c = −α [ (1 − p)^γ − γ (1 − p)^(γ−1) p log p ] (δ_ct − p_c)
                    let pow_m1 = if q > 0.0 { q.powf(gm - 1.0) } else { 0.0 };
                    let coeff = -cfg.alpha_for(t) * (q.powf(gm) - gm * pow_m1 * p * lp);
                    for (cc, &l) in lsm.iter().enumerate() {
                        let delta = if cc == t { 1.0 } else { 0.0 };
                        gl[i * c + cc] += s * coeff * (delta - l.exp());
                    }
                }
            });
        }),
    )
}

/// Mean over `rows` of the cross-entropy between the softmax of `logits`
/// and the uniform distribution, `−(1/C) Σ_c log p_c`.
pub fn uniform_ce_op(g: &Graph, logits: Var, rows: Vec<usize>) -> Var {
    let lv = g.value(logits);
    let (k, c) = (lv.rows(), lv.cols());
    let n = rows.len().max(1) as f64;
    let value = rows
        .iter()
        .map(|&i| -log_softmax(lv.row(i)).iter().sum::<f64>() / c as f64)
        .sum::<f64>()
        / n;
    g.custom(&[logits], Tensor::scalar(value), move |grad, sink| {
        let s = grad.data()[0] / n;
        sink.add_with(logits, &[k, c], |gl| {
            for &i in &rows {
                for (cc, l) in log_softmax(lv.row(i)).into_iter().enumerate() {
                    gl[i * c + cc] += s * (l.exp() - 1.0 / c as f64);
                }
            }
        });
    })
}

/// What to do with a frame whose ground truth has no occupied voxel.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmptyTargetPolicy {
    /// Drop the frame from the average and log a warning.
    #[default]
    Skip,
    Error,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub focal: FocalConfig,
    pub empty_target: EmptyTargetPolicy,
    /// Restrict targets to camera-visible voxels.
    pub use_mask: bool,
    #[serde(default)]
    pub free_space: FreeSpaceConfig,
}

/// Experimental negative supervision, off by default: points farther than
/// `margin` (L1, meters) from every target are pushed towards a uniform
/// class distribution, so a voxelization threshold can drop them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FreeSpaceConfig {
    pub weight: f64,
    pub margin: f64,
}

impl Default for FreeSpaceConfig {
    fn default() -> Self {
        Self {
            weight: 0.0,
            margin: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FrameLoss {
    pub chamfer: f64,
    pub focal: f64,
    /// Weighted free-space term; zero unless enabled.
    #[serde(default)]
    pub free_space: f64,
    pub total: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub chamfer: f64,
    pub focal: f64,
    #[serde(default)]
    pub free_space: f64,
    pub total: f64,
    pub per_frame: Vec<FrameLoss>,
}

/// Graph-side loss with its scalar breakdown.
pub struct LossVars {
    pub total: Var,
    pub breakdown: LossBreakdown,
}

/// Ground-truth point sets per frame, ready for repeated use.
pub fn target_points(grids: &[OccupancyGrid], use_mask: bool) -> Vec<Rc<PointSet>> {
    grids
        .iter()
        .map(|g| Rc::new(grid_to_points(g, use_mask)))
        .collect()
}

/// Chamfer plus focal per frame, averaged over frames with targets.
pub fn total_loss(
    g: &Graph,
    frames: &[DecodedVars],
    targets: &[Rc<PointSet>],
    cfg: &LossConfig,
) -> Result<LossVars> {
    if frames.len() > targets.len() {
        return Err(Error::TrajectoryLength {
            trajectory: frames.len(),
            horizon: targets.len(),
        });
    }
    let mut terms = Vec::new();
    let mut per_frame = Vec::with_capacity(frames.len());
    for (t, (f, tp)) in frames.iter().zip(targets).enumerate() {
        if tp.is_empty() {
            match cfg.empty_target {
                EmptyTargetPolicy::Skip => {
                    log::warn!("frame {t}: empty target, skipped");
                    per_frame.push(FrameLoss::default());
                    continue;
                }
                EmptyTargetPolicy::Error => {
                    return Err(Error::Shape(format!("frame {t}: empty target set")))
                }
            }
        }
        let pts = Rc::new(tp.points.clone());
        let (cd, nn) = chamfer_l1_op(g, f.points, pts);
        let labels: Vec<usize> = nn.iter().map(|&j| usize::from(tp.labels[j])).collect();
        let fl = focal_loss_op(g, f.logits, labels, &cfg.focal)?;
        let (cdv, flv) = (g.value(cd).data()[0], g.value(fl).data()[0]);
        let mut term = g.add(cd, fl);
        let mut fsv = 0.0;
        if cfg.free_space.weight > 0.0 {
            let pv = g.value(f.points);
            let far: Vec<usize> = nn
                .iter()
                .enumerate()
                .filter(|&(i, &j)| {
                    let p = pv.row(i);
                    l1(&[p[0], p[1], p[2]], &tp.points[j]) > cfg.free_space.margin
                })
                .map(|(i, _)| i)
                .collect();
            if !far.is_empty() {
                let fs = g.scale(uniform_ce_op(g, f.logits, far), cfg.free_space.weight);
                fsv = g.value(fs).data()[0];
                term = g.add(term, fs);
            }
        }
        per_frame.push(FrameLoss {
            chamfer: cdv,
            focal: flv,
            free_space: fsv,
            total: cdv + flv + fsv,
        });
        terms.push(term);
    }
    let used = terms.len();
    if used == 0 {
        return Ok(LossVars {
            total: g.constant(Tensor::scalar(0.0)),
            breakdown: LossBreakdown {
                per_frame,
                ..LossBreakdown::default()
            },
        });
    }
    let total = g.scale(g.add_n(&terms), 1.0 / used as f64);
    let mean = |f: fn(&FrameLoss) -> f64| per_frame.iter().map(f).sum::<f64>() / used as f64;
    let (chamfer, focal, free_space) = (
        mean(|f| f.chamfer),
        mean(|f| f.focal),
        mean(|f| f.free_space),
    );
    Ok(LossVars {
        total,
        breakdown: LossBreakdown {
            chamfer,
            focal,
            free_space,
            total: chamfer + focal + free_space,
            per_frame,
        },
    })
}

/// [`total_loss`] averaged over every block's decoded output.
pub fn forecast_loss(
    g: &Graph,
    vars: &ForecastVars,
    targets: &[Rc<PointSet>],
    cfg: &LossConfig,
) -> Result<LossVars> {
    let per_block = vars
        .blocks
        .iter()
        .map(|b| total_loss(g, b, targets, cfg))
        .collect::<Result<Vec<_>>>()?;
    let nb = per_block.len() as f64;
    let total = g.scale(
        g.add_n(&per_block.iter().map(|l| l.total).collect::<Vec<_>>()),
        1.0 / nb,
    );
    let frames = per_block[0].breakdown.per_frame.len();
    let per_frame: Vec<FrameLoss> = (0..frames)
        .map(|t| {
            let avg = |f: fn(&FrameLoss) -> f64| {
                per_block
                    .iter()
                    .map(|b| f(&b.breakdown.per_frame[t]))
                    .sum::<f64>()
                    / nb
            };
            let (c, f, s) = (avg(|x| x.chamfer), avg(|x| x.focal), avg(|x| x.free_space));
            FrameLoss {
                chamfer: c,
                focal: f,
                free_space: s,
                total: c + f + s,
            }
        })
        .collect();
    let avg =
        |f: fn(&LossBreakdown) -> f64| per_block.iter().map(|b| f(&b.breakdown)).sum::<f64>() / nb;
    let (chamfer, focal, free_space) =
        (avg(|b| b.chamfer), avg(|b| b.focal), avg(|b| b.free_space));
    Ok(LossVars {
        total,
        breakdown: LossBreakdown {
            chamfer,
            focal,
            free_space,
            total: chamfer + focal + free_space,
            per_frame,
        },
    })
}
