//! Sparse anchor sets: initialization, statistics and decoding heads.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::Vec3;
use crate::nn::Mlp;

/// Floor applied to per-axis anchor spread, meters.
pub const STD_FLOOR: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorConfig {
    /// Anchor count.
    pub n: usize,
    /// Points per anchor.
    pub m: usize,
    /// Feature width.
    pub d: usize,
    /// Initial point scatter around each center, meters.
    pub sigma: f64,
    /// `[min, max]` corners of the sampling box, meters.
    pub bounds: [Vec3; 2],
    /// Semantic class count.
    pub classes: usize,
}

impl AnchorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.m == 0 || self.d == 0 || self.classes == 0 {
            return Err(Error::config(
                "anchors",
                "n, m, d and classes must be at least 1",
            ));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::config("anchors.sigma", "must be positive"));
        }
        if !(0..3).all(|a| self.bounds[0][a] < self.bounds[1][a]) {
            return Err(Error::config("anchors.bounds", "bounds are degenerate"));
        }
        Ok(())
    }
}

/// One frame's occupancy hypothesis: `n · m` points (row `i · m + j` is
/// point `j` of anchor `i`) and `n` feature vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorState {
    pub points: Tensor,
    pub features: Tensor,
}

/// Uniform centers in the bounds, isotropic Gaussian scatter, zero features.
pub fn init_anchor_state(config: &AnchorConfig, seed: u64) -> AnchorState {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, config.sigma).expect("validated sigma");
    let [lo, hi] = config.bounds;
    let mut points = Vec::with_capacity(config.n * config.m * 3);
    for _ in 0..config.n {
        let c: Vec3 = std::array::from_fn(|a| rng.random_range(lo[a]..hi[a]));
        for _ in 0..config.m {
            for ca in c {
                points.push(ca + normal.sample(&mut rng));
            }
        }
    }
    AnchorState {
        points: Tensor::new(&[config.n * config.m, 3], points),
        features: Tensor::zeros(&[config.n, config.d]),
    }
}

/// Per-anchor means and population standard deviations (floored at
/// [`STD_FLOOR`]) of an `[n·m, 3]` point tensor.
pub fn anchor_statistics(points: &Tensor, m: usize) -> (Tensor, Tensor) {
    let n = points.rows() / m;
    let p = points.data();
    let mut centers = vec![0.0; n * 3];
    let mut stds = vec![0.0; n * 3];
    for i in 0..n {
        for a in 0..3 {
            let mean = (0..m).map(|j| p[(i * m + j) * 3 + a]).sum::<f64>() / m as f64;
            let var = (0..m)
                .map(|j| (p[(i * m + j) * 3 + a] - mean).powi(2))
                .sum::<f64>()
                / m as f64;
            centers[i * 3 + a] = mean;
            stds[i * 3 + a] = var.sqrt().max(STD_FLOOR);
        }
    }
    (Tensor::new(&[n, 3], centers), Tensor::new(&[n, 3], stds))
}

/// Differentiable [`anchor_statistics`]. Floored entries pass no gradient.
pub fn anchor_statistics_op(g: &Graph, points: Var, m: usize) -> (Var, Var) {
    let pv = g.value(points);
    let (centers, stds) = anchor_statistics(&pv, m);
    let n = centers.rows();
    let cv = g.custom(&[points], centers.clone(), move |grad, s| {
        s.add_with(points, &[n * m, 3], |gp| {
            for i in 0..n {
                for j in 0..m {
                    for a in 0..3 {
                        gp[(i * m + j) * 3 + a] += grad.data()[i * 3 + a] / m as f64;
                    }
                }
            }
        });
    });
    let stds_raw = Rc::new(stds.clone());
    let centers = Rc::new(centers);
    let sv = g.custom(&[points], stds, move |grad, s| {
        let p = pv.data();
        s.add_with(points, &[n * m, 3], |gp| {
            for i in 0..n {
                for a in 0..3 {
                    let sd = stds_raw.data()[i * 3 + a];
                    let gs = grad.data()[i * 3 + a];
                    // floored or degenerate spreads are constant locally
                    let raw = (0..m)
                        .map(|j| (p[(i * m + j) * 3 + a] - centers.data()[i * 3 + a]).powi(2))
                        .sum::<f64>()
                        / m as f64;
                    if raw.sqrt() < STD_FLOOR || gs == 0.0 {
                        continue;
                    }
                    for j in 0..m {
                        let k = (i * m + j) * 3 + a;
                        gp[k] += gs * (p[k] - centers.data()[i * 3 + a]) / (m as f64 * sd);
                    }
                }
            }
        });
    });
    (cv, sv)
}

/// Offset and semantic heads shared by every refinement block.
#[derive(Clone, Debug)]
pub struct DecoderHeads {
    pub offset: Mlp,
    pub semantic: Mlp,
    pub m: usize,
    pub classes: usize,
}

impl DecoderHeads {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        config: &AnchorConfig,
        rng: &mut impl Rng,
    ) -> Self {
        let d = config.d;
        Self {
            offset: Mlp::new(store, &format!("{name}.offset"), [d, d, config.m * 3], rng),
            semantic: Mlp::new(
                store,
                &format!("{name}.semantic"),
                [d, d, config.m * config.classes],
                rng,
            ),
            m: config.m,
            classes: config.classes,
        }
    }
}

/// Graph-side decoding result.
#[derive(Clone, Copy, Debug)]
pub struct DecodedVars {
    pub points: Var,
    pub logits: Var,
    pub features: Var,
}

/// Refined points and per-point logits of one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodedFrame {
    /// `[n·m, 3]`.
    pub points: Tensor,
    /// `[n·m, classes]`.
    pub logits: Tensor,
    /// `[n, d]`.
    pub features: Tensor,
}

impl DecodedVars {
    pub fn materialize(&self, g: &Graph) -> DecodedFrame {
        DecodedFrame {
            points: (*g.value(self.points)).clone(),
            logits: (*g.value(self.logits)).clone(),
            features: (*g.value(self.features)).clone(),
        }
    }
}

/// Applies both heads: `points + Δp` and per-point logits.
pub fn decode_anchors(
    g: &Graph,
    heads: &DecoderHeads,
    features: Var,
    points: Var,
) -> Result<DecodedVars> {
    let (fs, ps) = (g.shape(features), g.shape(points));
    let n = fs[0];
    if ps != [n * heads.m, 3] {
        return Err(Error::Shape(format!(
            "decode: {n} anchors of {} points need [{}, 3] points, got {ps:?}",
            heads.m,
            n * heads.m
        )));
    }
    let off = heads.offset.forward(g, features);
    let off = g.reshape(off, &[n * heads.m, 3]);
    let logits = heads.semantic.forward(g, features);
    let logits = g.reshape(logits, &[n * heads.m, heads.classes]);
    Ok(DecodedVars {
        points: g.add(points, off),
        logits,
        features,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Init;

    fn config(n: usize, m: usize, d: usize, sigma: f64) -> AnchorConfig {
        AnchorConfig {
            n,
            m,
            d,
            sigma,
            bounds: [[-8.0, -8.0, -1.0], [8.0, 8.0, 3.0]],
            classes: 3,
        }
    }

    #[test]
    fn init_has_zero_features_and_is_reproducible() {
        let c = config(10, 4, 6, 0.3);
        let a = init_anchor_state(&c, 7);
        assert!(a.features.data().iter().all(|&v| v == 0.0));
        assert_eq!(a, init_anchor_state(&c, 7));
        assert_ne!(a.points, init_anchor_state(&c, 8).points);
    }

    #[test]
    fn tiny_sigma_collapses_points_onto_centers() {
        let c = config(5, 8, 2, 1e-9);
        let a = init_anchor_state(&c, 1);
        let (centers, _) = anchor_statistics(&a.points, 8);
        for i in 0..5 {
            for j in 0..8 {
                for k in 0..3 {
                    assert!(
                        (a.points.data()[(i * 8 + j) * 3 + k] - centers.data()[i * 3 + k]).abs()
                            < 1e-6
                    );
                }
            }
        }
    }

    #[test]
    fn scatter_matches_configured_sigma() {
        let c = config(1000, 64, 1, 1.0);
        let a = init_anchor_state(&c, 3);
        let (centers, _) = anchor_statistics(&a.points, 64);
        for axis in 0..3 {
            let mut s2 = 0.0;
            for i in 0..1000 {
                for j in 0..64 {
                    s2 += (a.points.data()[(i * 64 + j) * 3 + axis] - centers.data()[i * 3 + axis])
                        .powi(2);
                }
            }
            // sample-mean centering removes one degree of freedom per anchor
            let std = (s2 / (1000.0 * 63.0)).sqrt();
            assert!((0.95..=1.05).contains(&std), "axis {axis}: {std}");
        }
        for i in 0..1000 {
            for k in 0..3 {
                let v = centers.data()[i * 3 + k];
                assert!(v >= c.bounds[0][k] - 4.0 && v <= c.bounds[1][k] + 4.0);
            }
        }
    }

    #[test]
    fn statistics_closed_forms() {
        let same = Tensor::new(&[3, 3], vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let (c, s) = anchor_statistics(&same, 3);
        assert_eq!(c.data(), &[1.0, 2.0, 3.0]);
        assert_eq!(s.data(), &[STD_FLOOR; 3]);
        let pair = Tensor::new(&[2, 3], vec![-1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let (c, s) = anchor_statistics(&pair, 2);
        assert_eq!(c.data(), &[0.0, 0.0, 0.0]);
        assert_eq!(s.data()[0], 1.0);
    }

    #[test]
    fn statistics_match_two_pass_oracle() {
        let a = init_anchor_state(&config(20, 7, 1, 0.8), 9);
        let (c, s) = anchor_statistics(&a.points, 7);
        for i in 0..20 {
            for k in 0..3 {
                let xs: Vec<f64> = (0..7)
                    .map(|j| a.points.data()[(i * 7 + j) * 3 + k])
                    .collect();
                let mut mean = 0.0;
                for x in &xs {
                    mean += x;
                }
                mean /= 7.0;
                let mut var = 0.0;
                for x in &xs {
                    var += (x - mean) * (x - mean);
                }
                var /= 7.0;
                assert!((c.data()[i * 3 + k] - mean).abs() < 1e-6);
                assert!((s.data()[i * 3 + k] - var.sqrt().max(STD_FLOOR)).abs() < 1e-6);
            }
        }
    }

    fn heads(cfg: &AnchorConfig, seed: u64) -> (ParamStore, DecoderHeads) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = DecoderHeads::new(&mut store, "dec", cfg, &mut rng);
        (store, h)
    }

    #[test]
    fn zero_heads_leave_points_and_zero_logits() {
        let cfg = config(3, 4, 5, 0.5);
        let (mut store, h) = heads(&cfg, 0);
        store.zero_all();
        let st = init_anchor_state(&cfg, 0);
        let g = Graph::with_params(&store);
        let f = g.constant(Tensor::from_fn(&[3, 5], |i| i as f64 * 0.1));
        let p = g.constant(st.points.clone());
        let out = decode_anchors(&g, &h, f, p).unwrap().materialize(&g);
        assert_eq!(out.points, st.points);
        assert_eq!(out.logits.shape(), &[12, 3]);
        assert!(out.logits.data().iter().all(|&v| v == 0.0));
        let bad = g.constant(Tensor::zeros(&[5, 3]));
        assert!(decode_anchors(&g, &h, f, bad).is_err());
    }

    #[test]
    fn decode_gradient_matches_finite_differences() {
        let cfg = AnchorConfig {
            n: 2,
            m: 3,
            d: 4,
            classes: 2,
            ..config(2, 3, 4, 0.5)
        };
        let (store, h) = heads(&cfg, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let feats = Init::Normal(1.0).tensor(&[2, 4], &mut rng);
        let pts = init_anchor_state(&cfg, 1).points;
        let eval = |f: &Tensor| {
            let g = Graph::with_params(&store);
            let fv = g.leaf(f.clone(), true);
            let d = decode_anchors(&g, &h, fv, g.constant(pts.clone())).unwrap();
            let a = g.sum(d.points);
            let b = g.sum(d.logits);
            let out = g.add(a, b);
            let v = g.value(out).data()[0];
            (v, g.backward(out).get(fv).unwrap().clone())
        };
        let (_, grad) = eval(&feats);
        for e in 0..feats.len() {
            let mut p = feats.clone();
            p.data_mut()[e] += 1e-6;
            let mut m = feats.clone();
            m.data_mut()[e] -= 1e-6;
            let num = (eval(&p).0 - eval(&m).0) / 2e-6;
            let a = grad.data()[e];
            assert!(
                (a - num).abs() / a.abs().max(num.abs()).max(1e-7) < 1e-4,
                "{a} vs {num}"
            );
        }
    }

    #[test]
    fn decode_is_permutation_equivariant() {
        let cfg = config(4, 2, 3, 0.5);
        let (store, h) = heads(&cfg, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let feats = Init::Normal(1.0).tensor(&[4, 3], &mut rng);
        let pts = init_anchor_state(&cfg, 4).points;
        let perm = [2usize, 0, 3, 1];
        let permute = |t: &Tensor, rows_per: usize| {
            let w = t.cols();
            let mut out = Vec::new();
            for &p in &perm {
                out.extend_from_slice(&t.data()[p * rows_per * w..(p + 1) * rows_per * w]);
            }
            Tensor::new(t.shape(), out)
        };
        let run = |f: &Tensor, p: &Tensor| {
            let g = Graph::with_params(&store);
            decode_anchors(&g, &h, g.constant(f.clone()), g.constant(p.clone()))
                .unwrap()
                .materialize(&g)
        };
        let a = run(&feats, &pts);
        let b = run(&permute(&feats, 1), &permute(&pts, 2));
        let close = |x: &Tensor, y: &Tensor| {
            x.data()
                .iter()
                .zip(y.data())
                .all(|(u, v)| (u - v).abs() < 1e-9)
        };
        assert!(close(&permute(&a.points, 2), &b.points));
        assert!(close(&permute(&a.logits, 2), &b.logits));
    }

    #[test]
    fn statistics_op_gradient() {
        let pts = init_anchor_state(&config(2, 5, 1, 0.7), 2).points;
        let eval = |p: &Tensor| {
            let g = Graph::new();
            let pv = g.leaf(p.clone(), true);
            let (c, s) = anchor_statistics_op(&g, pv, 5);
            let w = g.constant(Tensor::from_fn(&[2, 3], |i| 0.3 + i as f64));
            let cw = g.mul(c, w);
            let sw = g.mul(s, s);
            let a = g.sum(cw);
            let b = g.sum(sw);
            let out = g.add(a, b);
            let v = g.value(out).data()[0];
            (v, g.backward(out).get(pv).unwrap().clone())
        };
        let (_, grad) = eval(&pts);
        for e in 0..pts.len() {
            let mut p = pts.clone();
            p.data_mut()[e] += 1e-6;
            let mut m = pts.clone();
            m.data_mut()[e] -= 1e-6;
            let num = (eval(&p).0 - eval(&m).0) / 2e-6;
            assert!(
                (grad.data()[e] - num).abs() < 1e-6,
                "{} vs {num}",
                grad.data()[e]
            );
        }
    }
}
