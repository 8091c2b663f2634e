//! Planned ego trajectories and their embeddings.

use serde::{Deserialize, Serialize};

use crate::geometry::{wrap_angle, Pose};

/// Planar ego state relative to the current frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryWaypoint {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
    /// Frame offset from the current frame.
    pub t: f64,
}

impl TrajectoryWaypoint {
    pub fn new(x: f64, y: f64, theta: f64, t: f64) -> Self {
        Self {
            x,
            y,
            theta: wrap_angle(theta),
            t,
        }
    }

    pub fn from_pose(p: &Pose, t: f64) -> Self {
        Self::new(p.translation[0], p.translation[1], p.yaw(), t)
    }

    /// Pose mapping this frame's ego coordinates into the reference frame.
    pub fn pose(&self) -> Pose {
        Pose::planar(self.x, self.y, self.theta)
    }
}

use std::rc::Rc;

use rand::Rng;

use crate::autodiff::{Graph, Init, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::relative_pose;
use crate::nn::{Linear, Mlp};

/// Sinusoidal encoding: columns `2k` and `2k + 1` hold `sin` and `cos` of
/// `offset / 10000^(2k / d)`.
pub fn time_embedding(offsets: &[f64], d: usize) -> Result<Tensor> {
    if d == 0 || !d.is_multiple_of(2) {
        return Err(Error::config(
            "time_embedding.d",
            format!("width must be even and positive, got {d}"),
        ));
    }
    let mut out = Tensor::zeros(&[offsets.len(), d]);
    for (r, &o) in offsets.iter().enumerate() {
        for k in 0..d / 2 {
            let freq = 10000f64.powf(2.0 * k as f64 / d as f64);
            let (s, c) = (o / freq).sin_cos();
            out.data_mut()[r * d + 2 * k] = s;
            out.data_mut()[r * d + 2 * k + 1] = c;
        }
    }
    Ok(out)
}

/// Width of the per-waypoint geometric input: relative xyz followed by the
/// row-major 4×4 relative transform.
pub const POSE_FEATURES: usize = 3 + 16;

/// Differentiable map from waypoint rows `[t, 3]` of `(x, y, theta)` to
/// their pose relative to `reference`, as `[t, 19]`. Translations are
/// multiplied by `scale`.
pub fn relative_pose_features(g: &Graph, waypoints: Var, reference: &Pose, scale: f64) -> Var {
    let wv = g.value(waypoints);
    let t = wv.rows();
    let inv = reference.inverse();
    let rt = inv.rotation;
    let mut out = vec![0.0; t * POSE_FEATURES];
    let mut drot = Vec::with_capacity(t);
    for i in 0..t {
        let w = wv.row(i);
        let rel = relative_pose(&Pose::planar(w[0], w[1], w[2]), reference);
        let row = &mut out[i * POSE_FEATURES..(i + 1) * POSE_FEATURES];
        for a in 0..3 {
            row[a] = rel.translation[a] * scale;
        }
        let m = rel.to_matrix();
        for r in 0..4 {
            for c in 0..4 {
                row[3 + r * 4 + c] = if c == 3 && r < 3 {
                    m[r][c] * scale
                } else {
                    m[r][c]
                };
            }
        }
        // d(rel.R)/dθ = Rrefᵀ · dRz/dθ
        let (s, c) = w[2].sin_cos();
        let dz = [[-s, -c, 0.0], [c, -s, 0.0], [0.0, 0.0, 0.0]];
        let mut d = [[0.0; 3]; 3];
        for r in 0..3 {
            for cc in 0..3 {
                d[r][cc] = (0..3).map(|k| rt[r][k] * dz[k][cc]).sum();
            }
        }
        drot.push(d);
    }
    g.custom(
        &[waypoints],
        Tensor::new(&[t, POSE_FEATURES], out),
        move |grad, sink| {
            let mut gw = vec![0.0; t * 3];
            for i in 0..t {
                let gr = &grad.data()[i * POSE_FEATURES..(i + 1) * POSE_FEATURES];
                // translation entries appear twice: xyz block and matrix column 3
                let gt: [f64; 3] = std::array::from_fn(|a| (gr[a] + gr[3 + a * 4 + 3]) * scale);
                for a in 0..3 {
                    gw[i * 3] += gt[a] * rt[a][0];
                    gw[i * 3 + 1] += gt[a] * rt[a][1];
                }
                for r in 0..3 {
                    for c in 0..3 {
                        gw[i * 3 + 2] += gr[3 + r * 4 + c] * drot[i][r][c];
                    }
                }
            }
            sink.add(waypoints, Tensor::new(&[t, 3], gw));
        },
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryEmbedConfig {
    pub d: usize,
    pub t_max: usize,
    /// Multiplier applied to translations before the position MLPs.
    pub position_scale: f64,
}

/// Parameters of the trajectory token pipeline.
#[derive(Clone, Debug)]
pub struct TrajectoryEmbedder {
    pub config: TrajectoryEmbedConfig,
    pub coord_mlp: Mlp,
    pub pose_mlp: Mlp,
    pub gamma: Linear,
    pub beta: Linear,
    /// Learned per-frame base tokens `[t_max, d]`.
    pub base: ParamId,
}

impl TrajectoryEmbedder {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        config: TrajectoryEmbedConfig,
        rng: &mut impl Rng,
    ) -> Self {
        let d = config.d;
        let coord_mlp = Mlp::new(store, &format!("{name}.coord_mlp"), [3, d, d], rng);
        let pose_mlp = Mlp::new(store, &format!("{name}.pose_mlp"), [16, d, d], rng);
        // identity modulation at start: gamma = 1, beta = 0
        let gamma = Linear::with_init(
            store,
            &format!("{name}.gamma"),
            2 * d,
            d,
            Init::Zeros,
            Some(Init::Constant(1.0)),
            rng,
        );
        let beta = Linear::with_init(
            store,
            &format!("{name}.beta"),
            2 * d,
            d,
            Init::Zeros,
            Some(Init::Zeros),
            rng,
        );
        let base = store.add(
            format!("{name}.base"),
            Init::Normal(1.0).tensor(&[config.t_max, d], rng),
        );
        Self {
            config,
            coord_mlp,
            pose_mlp,
            gamma,
            beta,
            base,
        }
    }

    /// `MLP_a(xyz) + MLP_b(vec(T))` per waypoint, relative to `reference`.
    pub fn position_embedding(&self, g: &Graph, waypoints: Var, reference: &Pose) -> Var {
        let feats = relative_pose_features(g, waypoints, reference, self.config.position_scale);
        let xyz = g.slice_cols(feats, 0, 3);
        let mat = g.slice_cols(feats, 3, 16);
        let a = self.coord_mlp.forward(g, xyz);
        let b = self.pose_mlp.forward(g, mat);
        g.add(a, b)
    }

    /// `γ(cond) ⊙ LN(x) + β(cond)` row by row, `cond = [pos, time]`.
    pub fn modulate_rows(&self, g: &Graph, x: Var, pos: Var, time: Var) -> Var {
        let cond = g.concat_cols(&[pos, time]);
        let gm = self.gamma.forward(g, cond);
        let bt = self.beta.forward(g, cond);
        let xn = g.layer_norm(x, None, None, crate::nn::LayerNorm::EPS);
        let scaled = g.mul(xn, gm);
        g.add(scaled, bt)
    }

    /// Modulates `k` query rows with a single conditioning pair `[1, d]`.
    pub fn spatiotemporal_modulate(&self, g: &Graph, queries: Var, pos: Var, time: Var) -> Var {
        let k = g.shape(queries)[0];
        let idx = Rc::new(vec![0usize; k]);
        let pos = g.gather_rows(pos, idx.clone());
        let time = g.gather_rows(time, idx);
        self.modulate_rows(g, queries, pos, time)
    }

    /// Trajectory tokens `[len, d]`, one per waypoint. Waypoint `t` uses base
    /// token `t - 1`.
    pub fn embed(
        &self,
        g: &Graph,
        waypoints: &[TrajectoryWaypoint],
        reference: &Pose,
    ) -> Result<Var> {
        let l = waypoints.len();
        if l == 0 || l > self.config.t_max {
            return Err(Error::Horizon {
                requested: l,
                max: self.config.t_max,
            });
        }
        let wp = g.constant(Tensor::new(
            &[l, 3],
            waypoints.iter().flat_map(|w| [w.x, w.y, w.theta]).collect(),
        ));
        let pos = self.position_embedding(g, wp, reference);
        let offsets: Vec<f64> = waypoints.iter().map(|w| w.t).collect();
        let time = g.constant(time_embedding(&offsets, self.config.d)?);
        let base = g.param(self.base);
        let base = g.slice_rows(base, 0, l);
        Ok(self.modulate_rows(g, base, pos, time))
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::geometry::compose;

    fn embedder(d: usize, seed: u64) -> (ParamStore, TrajectoryEmbedder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = TrajectoryEmbedder::new(
            &mut store,
            "traj",
            TrajectoryEmbedConfig {
                d,
                t_max: 6,
                position_scale: 0.25,
            },
            &mut rng,
        );
        (store, e)
    }

    #[test]
    fn time_embedding_values() {
        let e = time_embedding(&[0.0, 3.5], 8).unwrap();
        for k in 0..4 {
            assert_eq!(e.data()[2 * k], 0.0);
            assert_eq!(e.data()[2 * k + 1], 1.0);
        }
        assert!(e.max_abs() <= 1.0);
        assert!(time_embedding(&[1.0], 7).is_err());
        let offsets: Vec<f64> = (1..=16).map(f64::from).collect();
        let e = time_embedding(&offsets, 32).unwrap();
        let mut min = f64::INFINITY;
        for i in 0..16 {
            for j in i + 1..16 {
                let d: f64 = e
                    .row(i)
                    .iter()
                    .zip(e.row(j))
                    .map(|(a, b)| (a - b).powi(2))
                    .sum::<f64>()
                    .sqrt();
                min = min.min(d);
            }
        }
        assert!(min > 0.0, "{min}");
        let twice = time_embedding(&[2.0, 2.0], 8).unwrap();
        assert_eq!(twice.row(0), twice.row(1));
    }

    #[test]
    fn zero_position_network_gives_zero() {
        let (mut store, e) = embedder(8, 0);
        store.zero_all();
        let g = Graph::with_params(&store);
        let reference = Pose::planar(1.0, 2.0, 0.3);
        let wp = g.constant(Tensor::new(&[1, 3], vec![1.0, 2.0, 0.3]));
        let out = g.value(e.position_embedding(&g, wp, &reference));
        assert_eq!(out.shape(), &[1, 8]);
        assert_eq!(out.max_abs(), 0.0);
    }

    #[test]
    fn position_embedding_gradient_wrt_waypoint() {
        let (store, e) = embedder(6, 1);
        let reference = Pose::planar(0.5, -0.2, 0.4);
        let wps = Tensor::new(&[2, 3], vec![1.0, 0.5, 0.2, 2.0, 1.2, 0.5]);
        let eval = |w: &Tensor| {
            let g = Graph::with_params(&store);
            let wv = g.leaf(w.clone(), true);
            let out = e.position_embedding(&g, wv, &reference);
            let weights = g.constant(Tensor::from_fn(&[2, 6], |i| (i as f64 * 0.37).sin()));
            let prod = g.mul(out, weights);
            let total = g.sum(prod);
            let v = g.value(total).data()[0];
            (v, g.backward(total).get(wv).unwrap().clone())
        };
        let (_, grad) = eval(&wps);
        for k in 0..wps.len() {
            let mut p = wps.clone();
            p.data_mut()[k] += 1e-6;
            let mut m = wps.clone();
            m.data_mut()[k] -= 1e-6;
            let num = (eval(&p).0 - eval(&m).0) / 2e-6;
            let a = grad.data()[k];
            assert!(
                (a - num).abs() / a.abs().max(num.abs()).max(1e-7) < 1e-4,
                "entry {k}: {a} vs {num}"
            );
        }
    }

    #[test]
    fn position_embedding_ignores_shared_rigid_motion() {
        let (store, e) = embedder(8, 2);
        let reference = Pose::planar(0.3, 0.1, -0.2);
        let wps = [(1.0, 0.4, 0.1), (2.5, 1.0, 0.35)];
        let motion = Pose::planar(-4.0, 7.0, 1.1);
        let run = |reference: &Pose, wps: &[(f64, f64, f64)]| {
            let g = Graph::with_params(&store);
            let w = g.constant(Tensor::new(
                &[wps.len(), 3],
                wps.iter().flat_map(|w| [w.0, w.1, w.2]).collect(),
            ));
            (*g.value(e.position_embedding(&g, w, reference))).clone()
        };
        let moved: Vec<(f64, f64, f64)> = wps
            .iter()
            .map(|w| {
                let p = compose(&motion, &Pose::planar(w.0, w.1, w.2));
                (p.translation[0], p.translation[1], p.yaw())
            })
            .collect();
        let a = run(&reference, &wps);
        let b = run(&compose(&motion, &reference), &moved);
        assert!(a
            .data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| (x - y).abs() < 1e-5));
    }

    #[test]
    fn identity_modulation_is_normalization() {
        let (store, e) = embedder(4, 3);
        let g = Graph::with_params(&store);
        let q = Tensor::new(&[2, 4], vec![1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 5.0, 2.0]);
        let qv = g.constant(q.clone());
        let pos = g.constant(Tensor::full(&[1, 4], 0.7));
        let time = g.constant(Tensor::full(&[1, 4], -0.3));
        let out = g.value(e.spatiotemporal_modulate(&g, qv, pos, time));
        assert_eq!(out.shape(), &[2, 4]);
        let norm = g.value(g.layer_norm(qv, None, None, crate::nn::LayerNorm::EPS));
        assert!(out
            .data()
            .iter()
            .zip(norm.data())
            .all(|(a, b)| (a - b).abs() < 1e-6));
    }

    #[test]
    fn modulation_gradient_wrt_condition() {
        let (mut store, e) = embedder(4, 4);
        // move the modulation layers off their identity start
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for id in [e.gamma.weight, e.beta.weight] {
            *store.get_mut(id) = Init::Normal(0.5).tensor(&[8, 4], &mut rng);
        }
        let q = Init::Normal(1.0).tensor(&[3, 4], &mut rng);
        let cond = Init::Normal(1.0).tensor(&[1, 8], &mut rng);
        let eval = |c: &Tensor| {
            let g = Graph::with_params(&store);
            let cv = g.leaf(c.clone(), true);
            let pos = g.slice_cols(cv, 0, 4);
            let time = g.slice_cols(cv, 4, 4);
            let out = e.spatiotemporal_modulate(&g, g.constant(q.clone()), pos, time);
            let w = g.constant(Tensor::from_fn(&[3, 4], |i| (i as f64 * 0.7).cos()));
            let prod = g.mul(out, w);
            let total = g.sum(prod);
            let v = g.value(total).data()[0];
            (v, g.backward(total).get(cv).unwrap().clone())
        };
        let (_, grad) = eval(&cond);
        for k in 0..8 {
            let mut p = cond.clone();
            p.data_mut()[k] += 1e-6;
            let mut m = cond.clone();
            m.data_mut()[k] -= 1e-6;
            let num = (eval(&p).0 - eval(&m).0) / 2e-6;
            let a = grad.data()[k];
            assert!(
                (a - num).abs() / a.abs().max(num.abs()).max(1e-7) < 1e-4,
                "{a} vs {num}"
            );
        }
    }

    #[test]
    fn embed_shapes_and_horizon_bounds() {
        let (store, e) = embedder(8, 5);
        let g = Graph::with_params(&store);
        let wps: Vec<_> = (1..=3)
            .map(|t| TrajectoryWaypoint::new(t as f64, 0.0, 0.0, t as f64))
            .collect();
        let v = e.embed(&g, &wps, &Pose::identity()).unwrap();
        assert_eq!(g.shape(v), vec![3, 8]);
        assert!(e.embed(&g, &[], &Pose::identity()).is_err());
        let long: Vec<_> = (1..=7)
            .map(|t| TrajectoryWaypoint::new(0.0, 0.0, 0.0, t as f64))
            .collect();
        assert!(e.embed(&g, &long, &Pose::identity()).is_err());
    }
}
