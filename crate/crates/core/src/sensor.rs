//! Image backbone and deformable multi-view sampling.
//!
//! The backbone is a frozen convolutional encoder whose raw pyramid is
//! cached per sample. Level projections are bias-free, so projecting after
//! bilinear sampling is the same as projecting the maps first; the sampler
//! works on raw channels and projects the aggregated vectors.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::gemm::matmul;
use crate::autodiff::{Graph, Init, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{compose, target_to_camera, CameraCalib, Pose};
use crate::nn::Linear;
use crate::scene_data::{Image, SensorFrame};
use crate::trajectory::time_embedding;

/// Backbone layout: a stride-4 patchify stage followed by 2×2 stride-2
/// stages, each with ReLU.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub channels: Vec<usize>,
    pub patch: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            channels: vec![16, 32, 64, 64],
            patch: 4,
        }
    }
}

impl BackboneConfig {
    pub fn strides(&self) -> Vec<usize> {
        (0..self.channels.len()).map(|l| self.patch << l).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::config(
                "backbone.channels",
                "need at least one non-empty level",
            ));
        }
        if self.patch == 0 {
            return Err(Error::config("backbone.patch", "must be positive"));
        }
        Ok(())
    }
}

/// One feature map, channels last: `data[(y * width + x) * channels + c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureLevel {
    pub stride: usize,
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FeatureLevel {
    pub fn at(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    /// Bilinear lookup at continuous cell coordinates, clamped to the border.
    pub fn sample(&self, x: f64, y: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.channels];
        let (bx, by) = (axis(x, self.width), axis(y, self.height));
        self.blend(&bx, &by, 1.0, &mut out);
        out
    }

    fn blend(&self, bx: &Axis, by: &Axis, scale: f64, out: &mut [f64]) {
        let corners = [
            (bx.i0, by.i0, (1.0 - bx.a) * (1.0 - by.a)),
            (bx.i1, by.i0, bx.a * (1.0 - by.a)),
            (bx.i0, by.i1, (1.0 - bx.a) * by.a),
            (bx.i1, by.i1, bx.a * by.a),
        ];
        for (x, y, w) in corners {
            let w = w * scale;
            if w != 0.0 {
                for (o, f) in out.iter_mut().zip(self.at(x, y)) {
                    *o += w * f;
                }
            }
        }
    }

    /// `Σ_c g_c ∂F_c/∂x` and `Σ_c g_c ∂F_c/∂y` at the sample.
    fn blend_grad(&self, bx: &Axis, by: &Axis, g: &[f64]) -> (f64, f64) {
        let dot =
            |x: usize, y: usize| -> f64 { self.at(x, y).iter().zip(g).map(|(a, b)| a * b).sum() };
        let (f00, f10, f01, f11) = (
            dot(bx.i0, by.i0),
            dot(bx.i1, by.i0),
            dot(bx.i0, by.i1),
            dot(bx.i1, by.i1),
        );
        let dx = ((1.0 - by.a) * (f10 - f00) + by.a * (f11 - f01)) * bx.da;
        let dy = ((1.0 - bx.a) * (f01 - f00) + bx.a * (f11 - f10)) * by.da;
        (dx, dy)
    }
}

/// Interpolation support along one axis.
struct Axis {
    i0: usize,
    i1: usize,
    a: f64,
    /// d a / d coordinate: zero when clamped.
    da: f64,
}

fn axis(x: f64, n: usize) -> Axis {
    if n == 1 {
        return Axis {
            i0: 0,
            i1: 0,
            a: 0.0,
            da: 0.0,
        };
    }
    let hi = (n - 1) as f64;
    let (xc, da) = if x <= 0.0 {
        (0.0, 0.0)
    } else if x >= hi {
        (hi, 0.0)
    } else {
        (x, 1.0)
    };
    let i0 = (xc.floor() as usize).min(n - 2);
    Axis {
        i0,
        i1: i0 + 1,
        a: xc - i0 as f64,
        da,
    }
}

/// Multi-camera feature pyramid of one observed frame.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageFeaturePyramid {
    /// `levels[camera][level]`.
    pub levels: Vec<Vec<FeatureLevel>>,
    pub calibs: Vec<CameraCalib>,
    pub ego_pose: Pose,
    /// Index relative to the current frame, in `[-T', 0]`.
    pub frame_offset: i32,
}

impl ImageFeaturePyramid {
    pub fn level_channels(&self) -> Vec<usize> {
        self.levels[0].iter().map(|l| l.channels).collect()
    }
}

/// Frozen random convolutional encoder.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub stages: Vec<ParamId>,
}

impl Backbone {
    /// Registers He-normal stage weights as frozen parameters.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        config: BackboneConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let mut stages = Vec::new();
        let mut c_in = 3;
        for (l, &c) in config.channels.iter().enumerate() {
            let k = if l == 0 { config.patch } else { 2 };
            let fan_in = k * k * c_in;
            let w = Init::Normal((2.0 / fan_in as f64).sqrt()).tensor(&[fan_in, c], rng);
            let id = store.add(format!("{name}.stage{l}.weight"), w);
            store.set_trainable(id, false);
            stages.push(id);
            c_in = c;
        }
        Ok(Self { config, stages })
    }

    /// Raw pyramid of an image given as channels-last intensities.
    pub fn forward(
        &self,
        store: &ParamStore,
        width: usize,
        height: usize,
        pixels: &[f64],
    ) -> Result<Vec<FeatureLevel>> {
        let top = *self.config.strides().last().expect("validated");
        if width < top || height < top {
            return Err(Error::Shape(format!(
                "image {width}x{height} is smaller than the coarsest stride {top}"
            )));
        }
        let mut levels: Vec<FeatureLevel> = Vec::with_capacity(self.stages.len());
        let (mut w, mut h, mut c, mut cur) = (width, height, 3, pixels.to_vec());
        for (l, &id) in self.stages.iter().enumerate() {
            let k = if l == 0 { self.config.patch } else { 2 };
            let (ow, oh) = (w / k, h / k);
            let cols = k * k * c;
            let mut patches = vec![0.0; ow * oh * cols];
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = &mut patches[(oy * ow + ox) * cols..][..cols];
                    for ky in 0..k {
                        let src = ((oy * k + ky) * w + ox * k) * c;
                        row[ky * k * c..(ky + 1) * k * c].copy_from_slice(&cur[src..src + k * c]);
                    }
                }
            }
            let weight = store.get(id);
            let out_c = weight.cols();
            let mut out = matmul(&patches, weight.data(), ow * oh, cols, out_c);
            out.iter_mut().for_each(|v| *v = v.max(0.0));
            levels.push(FeatureLevel {
                stride: self.config.strides()[l],
                width: ow,
                height: oh,
                channels: out_c,
                data: out.clone(),
            });
            (w, h, c, cur) = (ow, oh, out_c, out);
        }
        Ok(levels)
    }

    pub fn image_features(&self, store: &ParamStore, image: &Image) -> Result<Vec<FeatureLevel>> {
        let pixels: Vec<f64> = image.rgb.iter().map(|&v| f64::from(v) / 255.0).collect();
        self.forward(store, image.width, image.height, &pixels)
    }
}

/// One pyramid per observed frame, oldest first; the last frame is current.
pub fn extract_features(
    backbone: &Backbone,
    store: &ParamStore,
    frames: &[SensorFrame],
) -> Result<Vec<ImageFeaturePyramid>> {
    if frames.is_empty() {
        return Err(Error::Shape("no frames to encode".into()));
    }
    let cams = frames[0].images.len();
    let n = frames.len() as i32;
    frames
        .iter()
        .enumerate()
        .map(|(k, f)| {
            if f.images.len() != cams {
                return Err(Error::Shape(format!(
                    "frame {k} has {} cameras, expected {cams}",
                    f.images.len()
                )));
            }
            for (c, img) in f.images.iter().enumerate() {
                let first = &frames[0].images[c];
                if img.width != first.width || img.height != first.height {
                    return Err(Error::Shape(format!(
                        "camera {c}: frame {k} is {}x{}, frame 0 is {}x{}",
                        img.width, img.height, first.width, first.height
                    )));
                }
            }
            let levels = f
                .images
                .iter()
                .map(|img| backbone.image_features(store, img))
                .collect::<Result<Vec<_>>>()?;
            Ok(ImageFeaturePyramid {
                levels,
                calibs: f.calibs.clone(),
                ego_pose: f.ego_pose,
                frame_offset: k as i32 - (n - 1),
            })
        })
        .collect()
}

/// Maps from query-frame coordinates into every camera of every frame.
/// `query_to_current` places the query frame inside the current ego frame.
pub fn query_to_camera(
    pyramids: &[ImageFeaturePyramid],
    current_pose: &Pose,
    query_to_current: &Pose,
) -> Vec<Vec<Pose>> {
    pyramids
        .iter()
        .map(|p| {
            p.calibs
                .iter()
                .map(|c| {
                    compose(
                        &target_to_camera(c, current_pose, &p.ego_pose),
                        query_to_current,
                    )
                })
                .collect()
        })
        .collect()
}

/// Fused sampling node: inputs, camera geometry and cached pyramids.
struct SampleKernel {
    pyramids: Rc<Vec<ImageFeaturePyramid>>,
    transforms: Vec<Vec<Pose>>,
    n: usize,
    offsets_per_level: usize,
    near: f64,
    /// Column offset of each level in the output row.
    col0: Vec<usize>,
    width: usize,
}

struct SampleValues<'a> {
    centers: &'a [f64],
    stds: &'a [f64],
    offsets: &'a [f64],
    weights: &'a [f64],
}

#[derive(Default)]
struct SampleGrads {
    centers: Vec<f64>,
    stds: Vec<f64>,
    offsets: Vec<f64>,
    weights: Vec<f64>,
}

impl SampleKernel {
    fn levels(&self) -> usize {
        self.col0.len()
    }

    /// Forward when `grad` is `None`; otherwise accumulates input gradients.
    fn run(
        &self,
        x: &SampleValues,
        out: &mut [f64],
        valid: &mut [bool],
        grad: Option<(&[f64], &mut SampleGrads)>,
    ) {
        let (nl, no) = (self.levels(), self.offsets_per_level);
        let mut grad = grad;
        let mut tmp = Vec::new();
        for (k, pyr) in self.pyramids.iter().enumerate() {
            for i in 0..self.n {
                let row = k * self.n + i;
                let c = &x.centers[3 * i..3 * i + 3];
                let s = &x.stds[3 * i..3 * i + 3];
                for l in 0..nl {
                    for o in 0..no {
                        let lo = l * no + o;
                        let u = &x.offsets[3 * (i * nl * no + lo)..][..3];
                        let p = [c[0] + u[0] * s[0], c[1] + u[1] * s[1], c[2] + u[2] * s[2]];
                        let w = x.weights[i * nl * no + lo];
                        let ch = pyr.levels[0][l].channels;
                        // visible views and their interpolation supports
                        let mut views = Vec::new();
                        for (cam, calib) in pyr.calibs.iter().enumerate() {
                            let t = &self.transforms[k][cam];
                            let pc = t.transform_point(&p);
                            if pc[2] <= self.near {
                                continue;
                            }
                            let px = [
                                calib.fx * pc[0] / pc[2] + calib.cx,
                                calib.fy * pc[1] / pc[2] + calib.cy,
                            ];
                            if !calib.in_image(&px) {
                                continue;
                            }
                            let lvl = &pyr.levels[cam][l];
                            let st = lvl.stride as f64;
                            let bx = axis(px[0] / st - 0.5, lvl.width);
                            let by = axis(px[1] / st - 0.5, lvl.height);
                            views.push((cam, pc, bx, by));
                        }
                        if views.is_empty() {
                            continue;
                        }
                        valid[row] = true;
                        let inv_v = 1.0 / views.len() as f64;
                        tmp.clear();
                        tmp.resize(ch, 0.0);
                        for (cam, _, bx, by) in &views {
                            pyr.levels[*cam][l].blend(bx, by, inv_v, &mut tmp);
                        }
                        let dst = row * self.width + self.col0[l];
                        match grad.as_mut() {
                            None => {
                                for (o_, t_) in out[dst..dst + ch].iter_mut().zip(&tmp) {
                                    *o_ += w * t_;
                                }
                            }
                            Some((gout, gr)) => {
                                let go = &gout[dst..dst + ch];
                                gr.weights[i * nl * no + lo] +=
                                    go.iter().zip(&tmp).map(|(a, b)| a * b).sum::<f64>();
                                let mut dp = [0.0; 3];
                                for (cam, pc, bx, by) in &views {
                                    let lvl = &pyr.levels[*cam][l];
                                    let calib = &pyr.calibs[*cam];
                                    let (gx, gy) = lvl.blend_grad(bx, by, go);
                                    let sc = w * inv_v / lvl.stride as f64;
                                    let (gu, gv) = (gx * sc, gy * sc);
                                    let z = pc[2];
                                    let dpc = [
                                        gu * calib.fx / z,
                                        gv * calib.fy / z,
                                        -(gu * calib.fx * pc[0] + gv * calib.fy * pc[1]) / (z * z),
                                    ];
                                    let r = &self.transforms[k][*cam].rotation;
                                    for a in 0..3 {
                                        dp[a] += (0..3).map(|b| r[b][a] * dpc[b]).sum::<f64>();
                                    }
                                }
                                for a in 0..3 {
                                    gr.centers[3 * i + a] += dp[a];
                                    gr.stds[3 * i + a] += dp[a] * u[a];
                                    gr.offsets[3 * (i * nl * no + lo) + a] += dp[a] * s[a];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Raw deformable sampling.
///
/// For query `i` and frame `k`, each (level, offset) pair places a sample at
/// `center + u ⊙ std`, averages the bilinear features over the cameras that
/// see it, and accumulates them with the pair's weight. Output rows are
/// frame-major (`k * n + i`); columns concatenate the raw level channels.
/// Offsets are `[n, levels * offsets_per_level * 3]`, weights
/// `[n, levels * offsets_per_level]`. Rows with no visible sample are zero
/// and flagged invalid.
#[allow(clippy::too_many_arguments)]
pub fn deformable_sample_raw(
    g: &Graph,
    pyramids: Rc<Vec<ImageFeaturePyramid>>,
    transforms: Vec<Vec<Pose>>,
    centers: Var,
    stds: Var,
    offsets: Var,
    weights: Var,
    offsets_per_level: usize,
    near: f64,
) -> Result<(Var, Vec<bool>)> {
    let n = g.shape(centers)[0];
    let channels = pyramids
        .first()
        .ok_or_else(|| Error::Shape("no pyramids".into()))?
        .level_channels();
    let nl = channels.len();
    let no = offsets_per_level;
    if g.shape(stds) != [n, 3]
        || g.shape(offsets) != [n, nl * no * 3]
        || g.shape(weights) != [n, nl * no]
    {
        return Err(Error::Shape(format!(
            "sampler inputs for {n} queries: stds {:?}, offsets {:?}, weights {:?} with {nl} levels x {no} offsets",
            g.shape(stds),
            g.shape(offsets),
            g.shape(weights)
        )));
    }
    if transforms.len() != pyramids.len()
        || transforms
            .iter()
            .zip(pyramids.iter())
            .any(|(t, p)| t.len() != p.calibs.len())
    {
        return Err(Error::Shape(
            "one transform per frame and camera required".into(),
        ));
    }
    let mut col0 = Vec::with_capacity(nl);
    let mut width = 0;
    for c in &channels {
        col0.push(width);
        width += c;
    }
    let kernel = SampleKernel {
        transforms,
        n,
        offsets_per_level: no,
        near,
        col0,
        width,
        pyramids,
    };
    let rows = kernel.pyramids.len() * n;
    let (cv, sv, ov, wv) = (
        g.value(centers),
        g.value(stds),
        g.value(offsets),
        g.value(weights),
    );
    let mut out = vec![0.0; rows * width];
    let mut valid = vec![false; rows];
    let inputs = SampleValues {
        centers: cv.data(),
        stds: sv.data(),
        offsets: ov.data(),
        weights: wv.data(),
    };
    kernel.run(&inputs, &mut out, &mut valid, None);
    let var = g.custom(
        &[centers, stds, offsets, weights],
        Tensor::new(&[rows, width], out),
        move |grad, sink| {
            let mut gr = SampleGrads {
                centers: vec![0.0; n * 3],
                stds: vec![0.0; n * 3],
                offsets: vec![0.0; ov.len()],
                weights: vec![0.0; wv.len()],
            };
            let inputs = SampleValues {
                centers: cv.data(),
                stds: sv.data(),
                offsets: ov.data(),
                weights: wv.data(),
            };
            let mut scratch = vec![false; rows];
            kernel.run(&inputs, &mut [], &mut scratch, Some((grad.data(), &mut gr)));
            sink.add(centers, Tensor::new(&[n, 3], gr.centers));
            sink.add(stds, Tensor::new(&[n, 3], gr.stds));
            sink.add(offsets, Tensor::new(ov.shape(), gr.offsets));
            sink.add(weights, Tensor::new(wv.shape(), gr.weights));
        },
    );
    Ok((var, valid))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub offsets_per_level: usize,
    /// Initial learned unit offsets are uniform in `±offset_init`.
    pub offset_init: f64,
    pub near: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            offsets_per_level: 4,
            offset_init: 2.0,
            near: 0.1,
        }
    }
}

/// Sampled sensor vectors `[frames * n, d]`, frame-major, with validity.
#[derive(Clone, Debug)]
pub struct SensorEmbedding {
    pub vectors: Var,
    pub valid: Vec<bool>,
    pub frames: usize,
    pub n: usize,
}

/// Learned parts of the sampler.
#[derive(Clone, Debug)]
pub struct DeformableSampler {
    pub config: SamplerConfig,
    pub levels: usize,
    pub offset: Linear,
    pub weight: Linear,
    pub projections: Vec<Linear>,
    pub time_fc: Linear,
}

impl DeformableSampler {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        config: SamplerConfig,
        level_channels: &[usize],
        d: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let lo = level_channels.len() * config.offsets_per_level;
        let offset = Linear::with_init(
            store,
            &format!("{name}.offset"),
            d,
            3 * lo,
            Init::Zeros,
            Some(Init::Uniform(config.offset_init)),
            rng,
        );
        let weight = Linear::with_init(
            store,
            &format!("{name}.weight"),
            d,
            lo,
            Init::Zeros,
            Some(Init::Zeros),
            rng,
        );
        let projections = level_channels
            .iter()
            .enumerate()
            .map(|(l, &c)| Linear::new(store, &format!("{name}.proj{l}"), c, d, false, rng))
            .collect();
        let time_fc = Linear::new(store, &format!("{name}.time_fc"), d, d, true, rng);
        Self {
            config,
            levels: level_channels.len(),
            offset,
            weight,
            projections,
            time_fc,
        }
    }

    /// Samples every pyramid for each query and projects to width `d`.
    pub fn sample(
        &self,
        g: &Graph,
        queries: Var,
        centers: Var,
        stds: Var,
        pyramids: Rc<Vec<ImageFeaturePyramid>>,
        transforms: Vec<Vec<Pose>>,
    ) -> Result<SensorEmbedding> {
        let n = g.shape(queries)[0];
        let frames = pyramids.len();
        let offsets = self.offset.forward(g, queries);
        let logits = self.weight.forward(g, queries);
        let weights = g.softmax_rows(logits);
        let (raw, valid) = deformable_sample_raw(
            g,
            pyramids,
            transforms,
            centers,
            stds,
            offsets,
            weights,
            self.config.offsets_per_level,
            self.config.near,
        )?;
        let mut col = 0;
        let parts: Vec<Var> = self
            .projections
            .iter()
            .map(|p| {
                let s = g.slice_cols(raw, col, p.in_dim);
                col += p.in_dim;
                p.forward(g, s)
            })
            .collect();
        Ok(SensorEmbedding {
            vectors: g.add_n(&parts),
            valid,
            frames,
            n,
        })
    }

    /// Adds `FC(time_embedding(frames ago))` to the valid rows.
    pub fn add_temporal_encoding(
        &self,
        g: &Graph,
        emb: SensorEmbedding,
        frame_offsets: &[i32],
    ) -> Result<SensorEmbedding> {
        if frame_offsets.len() != emb.frames {
            return Err(Error::Shape(format!(
                "{} frame offsets for {} frames",
                frame_offsets.len(),
                emb.frames
            )));
        }
        let d = self.time_fc.in_dim;
        let ago: Vec<f64> = frame_offsets.iter().map(|&o| -f64::from(o)).collect();
        let te = g.constant(time_embedding(&ago, d)?);
        let te = self.time_fc.forward(g, te);
        let idx: Vec<usize> = (0..emb.frames)
            .flat_map(|k| std::iter::repeat_n(k, emb.n))
            .collect();
        let rows = g.gather_rows(te, Rc::new(idx));
        let mask: Vec<f64> = emb
            .valid
            .iter()
            .map(|&v| if v { 1.0 } else { 0.0 })
            .collect();
        let rows = g.scale_rows(rows, Rc::new(mask));
        Ok(SensorEmbedding {
            vectors: g.add(emb.vectors, rows),
            ..emb
        })
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::geometry::{project_points, ProjectionConfig};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_level(
        stride: usize,
        w: usize,
        h: usize,
        c: usize,
        r: &mut ChaCha8Rng,
    ) -> FeatureLevel {
        FeatureLevel {
            stride,
            width: w,
            height: h,
            channels: c,
            data: (0..w * h * c).map(|_| r.random_range(-1.0..1.0)).collect(),
        }
    }

    /// Two cameras, two frames, two levels of random features.
    fn random_rig(seed: u64) -> (Vec<ImageFeaturePyramid>, Pose) {
        let mut r = rng(seed);
        let calibs = vec![
            CameraCalib::looking_at_yaw(32, 16, 100f64.to_radians(), [0.5, 0.0, 1.5], 0.2),
            CameraCalib::looking_at_yaw(32, 16, 100f64.to_radians(), [0.0, 0.3, 1.5], 1.3),
        ];
        let current = Pose::planar(3.0, -1.0, 0.4);
        let poses = [Pose::planar(1.8, -1.5, 0.3), current];
        let pyramids = poses
            .iter()
            .enumerate()
            .map(|(k, pose)| ImageFeaturePyramid {
                levels: (0..2)
                    .map(|_| {
                        vec![
                            random_level(4, 8, 4, 3, &mut r),
                            random_level(8, 4, 2, 2, &mut r),
                        ]
                    })
                    .collect(),
                calibs: calibs.clone(),
                ego_pose: *pose,
                frame_offset: k as i32 - 1,
            })
            .collect();
        (pyramids, current)
    }

    struct Inputs {
        centers: Tensor,
        stds: Tensor,
        offsets: Tensor,
        weights: Tensor,
    }

    fn random_inputs(n: usize, levels: usize, no: usize, seed: u64) -> Inputs {
        let mut r = rng(seed);
        let mut t =
            |shape: &[usize], lo: f64, hi: f64| Tensor::from_fn(shape, |_| r.random_range(lo..hi));
        let centers = Tensor::from_fn(&[n, 3], |i| [4.0, 0.0, 0.8][i % 3]);
        let jitter = t(&[n, 3], -2.0, 2.0);
        let mut centers = centers;
        centers.add_assign(&jitter);
        Inputs {
            centers,
            stds: t(&[n, 3], 0.1, 0.6),
            offsets: t(&[n, levels * no * 3], -2.0, 2.0),
            weights: t(&[n, levels * no], 0.0, 1.0),
        }
    }

    fn run_raw(
        pyr: &Rc<Vec<ImageFeaturePyramid>>,
        current: &Pose,
        x: &Inputs,
        no: usize,
    ) -> (Tensor, Vec<bool>) {
        let g = Graph::new();
        let v = |t: &Tensor| g.constant(t.clone());
        let tr = query_to_camera(pyr, current, &Pose::identity());
        let (out, valid) = deformable_sample_raw(
            &g,
            pyr.clone(),
            tr,
            v(&x.centers),
            v(&x.stds),
            v(&x.offsets),
            v(&x.weights),
            no,
            0.1,
        )
        .unwrap();
        ((*g.value(out)).clone(), valid)
    }

    /// Explicit four-corner interpolation with clamped cell coordinates.
    fn oracle_bilinear(l: &FeatureLevel, x: f64, y: f64) -> Vec<f64> {
        let x = x.clamp(0.0, (l.width - 1) as f64);
        let y = y.clamp(0.0, (l.height - 1) as f64);
        let mut out = vec![0.0; l.channels];
        for yy in 0..l.height {
            for xx in 0..l.width {
                let wx = (1.0 - (x - xx as f64).abs()).max(0.0);
                let wy = (1.0 - (y - yy as f64).abs()).max(0.0);
                for c in 0..l.channels {
                    out[c] += wx * wy * l.at(xx, yy)[c];
                }
            }
        }
        out
    }

    #[test]
    fn matches_exhaustive_oracle() {
        let (pyr, current) = random_rig(1);
        let no = 3;
        let x = random_inputs(12, 2, no, 2);
        let pyr = Rc::new(pyr);
        let (out, valid) = run_raw(&pyr, &current, &x, no);
        let width = 5;
        let mut any_valid = 0;
        for (k, p) in pyr.iter().enumerate() {
            for i in 0..12 {
                let mut expect = vec![0.0; width];
                let mut seen = false;
                for l in 0..2 {
                    for o in 0..no {
                        let lo = l * no + o;
                        let pt: [f64; 3] = std::array::from_fn(|a| {
                            x.centers.data()[3 * i + a]
                                + x.offsets.data()[3 * (i * 2 * no + lo) + a]
                                    * x.stds.data()[3 * i + a]
                        });
                        let mut acc = vec![0.0; p.levels[0][l].channels];
                        let mut views = 0;
                        for (cam, calib) in p.calibs.iter().enumerate() {
                            let proj = project_points(
                                &[pt],
                                calib,
                                &current,
                                &p.ego_pose,
                                &ProjectionConfig { near: 0.1 },
                            );
                            if !proj.valid[0] {
                                continue;
                            }
                            views += 1;
                            let lvl = &p.levels[cam][l];
                            let s = lvl.stride as f64;
                            let f = oracle_bilinear(
                                lvl,
                                proj.pixels[0][0] / s - 0.5,
                                proj.pixels[0][1] / s - 0.5,
                            );
                            acc.iter_mut().zip(f).for_each(|(a, b)| *a += b);
                        }
                        if views > 0 {
                            seen = true;
                            let w = x.weights.data()[i * 2 * no + lo];
                            let off = if l == 0 { 0 } else { 3 };
                            for (c, a) in acc.iter().enumerate() {
                                expect[off + c] += w * a / views as f64;
                            }
                        }
                    }
                }
                let row = k * 12 + i;
                assert_eq!(valid[row], seen, "row {row}");
                any_valid += usize::from(seen);
                for c in 0..width {
                    let got = out.data()[row * width + c];
                    assert!(
                        (got - expect[c]).abs() < 1e-5,
                        "row {row} col {c}: {got} vs {}",
                        expect[c]
                    );
                }
            }
        }
        assert!(
            any_valid > 6,
            "rig should see most queries, saw {any_valid}"
        );
    }

    #[test]
    fn center_behind_every_camera_is_invalid() {
        let (pyr, current) = random_rig(3);
        let pyr = Rc::new(pyr);
        let mut x = random_inputs(1, 2, 2, 4);
        // far behind and below the ground: no camera looks there
        x.centers = Tensor::new(&[1, 3], vec![-30.0, 0.0, -5.0]);
        x.stds = Tensor::full(&[1, 3], 0.05);
        let (out, valid) = run_raw(&pyr, &current, &x, 2);
        assert_eq!(valid, vec![false, false]);
        assert_eq!(out.max_abs(), 0.0);
    }

    fn constant_pyramid(cams: usize, v: &[f64]) -> ImageFeaturePyramid {
        let calibs: Vec<_> = (0..cams)
            .map(|c| {
                CameraCalib::looking_at_yaw(
                    32,
                    16,
                    120f64.to_radians(),
                    [0.0, 0.0, 1.5],
                    0.3 * c as f64,
                )
            })
            .collect();
        let lvl = FeatureLevel {
            stride: 4,
            width: 8,
            height: 4,
            channels: v.len(),
            data: v.repeat(32),
        };
        ImageFeaturePyramid {
            levels: vec![vec![lvl]; cams],
            calibs,
            ego_pose: Pose::identity(),
            frame_offset: 0,
        }
    }

    #[test]
    fn constant_field_returns_weight_sum_times_value() {
        let v = [0.3, -1.2, 2.0];
        for cams in [1, 2, 3] {
            let pyr = Rc::new(vec![constant_pyramid(cams, &v)]);
            let x = Inputs {
                centers: Tensor::new(&[1, 3], vec![6.0, 0.5, 1.0]),
                stds: Tensor::full(&[1, 3], 0.2),
                offsets: Tensor::from_fn(&[1, 12], |i| (i as f64 * 0.3).sin()),
                weights: Tensor::new(&[1, 4], vec![0.1, 0.2, 0.3, 0.4]),
            };
            let (out, valid) = run_raw(&pyr, &Pose::identity(), &x, 4);
            assert!(valid[0]);
            for c in 0..3 {
                assert!((out.data()[c] - v[c]).abs() < 1e-12, "{cams} cameras");
            }
        }
    }

    #[test]
    fn integer_cell_lookup_is_exact() {
        let mut r = rng(5);
        let lvl = random_level(4, 5, 3, 4, &mut r);
        for y in 0..3 {
            for x in 0..5 {
                let s = lvl.sample(x as f64, y as f64);
                assert!(s
                    .iter()
                    .zip(lvl.at(x, y))
                    .all(|(a, b)| (a - b).abs() < 1e-12));
            }
        }
    }

    #[test]
    fn permuting_queries_permutes_rows() {
        let (pyr, current) = random_rig(6);
        let pyr = Rc::new(pyr);
        let x = random_inputs(5, 2, 2, 7);
        let perm = [3usize, 0, 4, 1, 2];
        let gather = |t: &Tensor| {
            let c = t.cols();
            Tensor::new(
                t.shape(),
                perm.iter()
                    .flat_map(|&p| t.row(p).to_vec())
                    .collect::<Vec<_>>()
                    .into_iter()
                    .take(5 * c)
                    .collect(),
            )
        };
        let y = Inputs {
            centers: gather(&x.centers),
            stds: gather(&x.stds),
            offsets: gather(&x.offsets),
            weights: gather(&x.weights),
        };
        let (a, _) = run_raw(&pyr, &current, &x, 2);
        let (b, _) = run_raw(&pyr, &current, &y, 2);
        for k in 0..2 {
            for (j, &p) in perm.iter().enumerate() {
                assert_eq!(b.row(k * 5 + j), a.row(k * 5 + p));
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (pyr, current) = random_rig(8);
        let pyr = Rc::new(pyr);
        let no = 2;
        let x = random_inputs(4, 2, no, 9);
        let probe = Tensor::from_fn(&[8, 5], |i| (i as f64 * 0.61).cos());
        let eval = |x: &Inputs| {
            let g = Graph::new();
            let vars =
                [&x.centers, &x.stds, &x.offsets, &x.weights].map(|t| g.leaf(t.clone(), true));
            let tr = query_to_camera(&pyr, &current, &Pose::identity());
            let (out, _) = deformable_sample_raw(
                &g,
                pyr.clone(),
                tr,
                vars[0],
                vars[1],
                vars[2],
                vars[3],
                no,
                0.1,
            )
            .unwrap();
            let prod = g.mul(out, g.constant(probe.clone()));
            let total = g.sum(prod);
            let grads = g.backward(total);
            (
                g.value(total).data()[0],
                vars.map(|v| grads.get(v).unwrap().clone()),
            )
        };
        let (_, grads) = eval(&x);
        let mut checked = 0;
        for which in 0..4 {
            let len = grads[which].len();
            for e in 0..len {
                let bump = |d: f64| {
                    let mut y = Inputs {
                        centers: x.centers.clone(),
                        stds: x.stds.clone(),
                        offsets: x.offsets.clone(),
                        weights: x.weights.clone(),
                    };
                    [&mut y.centers, &mut y.stds, &mut y.offsets, &mut y.weights][which]
                        .data_mut()[e] += d;
                    eval(&y).0
                };
                let h = 1e-6;
                let num = (bump(h) - bump(-h)) / (2.0 * h);
                let a = grads[which].data()[e];
                if a.abs().max(num.abs()) < 1e-8 {
                    continue;
                }
                checked += 1;
                assert!(
                    (a - num).abs() / a.abs().max(num.abs()).max(1e-6) < 1e-4,
                    "input {which} entry {e}: {a} vs {num}"
                );
            }
        }
        assert!(checked > 20, "only {checked} nonzero entries");
    }

    #[test]
    fn backbone_levels_follow_strides() {
        let mut store = ParamStore::new();
        let bb = Backbone::new(
            &mut store,
            "backbone",
            BackboneConfig::default(),
            &mut rng(10),
        )
        .unwrap();
        let mut img = Image::new(64, 32);
        let mut r = rng(11);
        img.rgb
            .iter_mut()
            .for_each(|v| *v = r.random_range(0..=127));
        let levels = bb.image_features(&store, &img).unwrap();
        let dims: Vec<_> = levels
            .iter()
            .map(|l| (l.stride, l.width, l.height, l.channels))
            .collect();
        assert_eq!(
            dims,
            vec![
                (4, 16, 8, 16),
                (8, 8, 4, 32),
                (16, 4, 2, 64),
                (32, 2, 1, 64)
            ]
        );
        assert!(!store.is_trainable(bb.stages[0]));

        let zero = bb.image_features(&store, &Image::new(64, 32)).unwrap();
        assert!(zero.iter().all(|l| l.data.iter().all(|&v| v == 0.0)));

        let mut doubled = img.clone();
        doubled.rgb.iter_mut().for_each(|v| *v *= 2);
        let twice = bb.image_features(&store, &doubled).unwrap();
        for (a, b) in levels[0].data.iter().zip(&twice[0].data) {
            assert!((2.0 * a - b).abs() < 1e-5);
        }
        assert!(bb.image_features(&store, &Image::new(16, 16)).is_err());
    }

    #[test]
    fn extract_features_checks_sizes() {
        let mut store = ParamStore::new();
        let bb = Backbone::new(
            &mut store,
            "backbone",
            BackboneConfig::default(),
            &mut rng(12),
        )
        .unwrap();
        let calib = CameraCalib::looking_at_yaw(64, 32, 1.5, [0.0; 3], 0.0);
        let frame = |w| SensorFrame {
            images: vec![Image::new(w, 32)],
            calibs: vec![calib],
            ego_pose: Pose::identity(),
            timestamp: 0.0,
        };
        let pyr = extract_features(&bb, &store, &[frame(64), frame(64)]).unwrap();
        assert_eq!(
            pyr.iter().map(|p| p.frame_offset).collect::<Vec<_>>(),
            vec![-1, 0]
        );
        assert!(extract_features(&bb, &store, &[frame(64), frame(96)]).is_err());
        assert!(extract_features(&bb, &store, &[]).is_err());
    }

    fn sampler_setup(seed: u64) -> (ParamStore, DeformableSampler) {
        let mut store = ParamStore::new();
        let s = DeformableSampler::new(
            &mut store,
            "sampler",
            SamplerConfig::default(),
            &[3, 2],
            4,
            &mut rng(seed),
        );
        (store, s)
    }

    fn embedding(g: &Graph, frames: usize, n: usize, valid: Vec<bool>) -> SensorEmbedding {
        let vectors = g.constant(Tensor::from_fn(&[frames * n, 4], |i| i as f64 * 0.1));
        SensorEmbedding {
            vectors,
            valid,
            frames,
            n,
        }
    }

    #[test]
    fn temporal_encoding_zero_network_and_equal_offsets() {
        let (mut store, s) = sampler_setup(13);
        {
            let g = Graph::with_params(&store);
            let e = embedding(&g, 2, 3, vec![true; 6]);
            let base = (*g.value(e.vectors)).clone();
            let out = s.add_temporal_encoding(&g, e, &[-1, -1]).unwrap();
            let v = g.value(out.vectors);
            let delta: Vec<f64> = v
                .data()
                .iter()
                .zip(base.data())
                .map(|(a, b)| a - b)
                .collect();
            assert!(delta[0..4]
                .iter()
                .zip(&delta[12..16])
                .all(|(a, b)| (a - b).abs() < 1e-12));
        }
        store.get_mut(s.time_fc.weight).data_mut().fill(0.0);
        store.get_mut(s.time_fc.bias.unwrap()).data_mut().fill(0.0);
        let g = Graph::with_params(&store);
        let e = embedding(&g, 2, 3, vec![true; 6]);
        let base = (*g.value(e.vectors)).clone();
        let out = s.add_temporal_encoding(&g, e, &[-1, 0]).unwrap();
        assert_eq!(*g.value(out.vectors), base);
    }

    #[test]
    fn temporal_encoding_skips_invalid_rows() {
        let (store, s) = sampler_setup(14);
        let g = Graph::with_params(&store);
        let e = embedding(&g, 2, 2, vec![true, false, false, true]);
        let base = (*g.value(e.vectors)).clone();
        let out = s.add_temporal_encoding(&g, e, &[-1, 0]).unwrap();
        let v = g.value(out.vectors);
        assert_eq!(v.row(1), base.row(1));
        assert_eq!(v.row(2), base.row(2));
        assert_ne!(v.row(0), base.row(0));
    }

    #[test]
    fn temporal_encoding_gradient() {
        let (store, s) = sampler_setup(15);
        let id = s.time_fc.weight;
        let eval = |store: &ParamStore| {
            let g = Graph::with_params(store);
            let e = embedding(&g, 2, 2, vec![true; 4]);
            let out = s.add_temporal_encoding(&g, e, &[-2, 0]).unwrap();
            let probe = g.constant(Tensor::from_fn(&[4, 4], |i| (i as f64).sin()));
            let prod = g.mul(out.vectors, probe);
            let total = g.sum(prod);
            (
                g.value(total).data()[0],
                g.backward(total).param(id).cloned(),
            )
        };
        let grad = eval(&store).1.unwrap();
        for e in 0..grad.len() {
            let mut p = store.clone();
            p.get_mut(id).data_mut()[e] += 1e-6;
            let mut m = store.clone();
            m.get_mut(id).data_mut()[e] -= 1e-6;
            let num = (eval(&p).0 - eval(&m).0) / 2e-6;
            let a = grad.data()[e];
            assert!(
                (a - num).abs() / a.abs().max(num.abs()).max(1e-7) < 1e-4,
                "{a} vs {num}"
            );
        }
    }

    #[test]
    fn sampler_projects_to_model_width() {
        let (store, s) = sampler_setup(16);
        let (pyr, current) = random_rig(17);
        let pyr = Rc::new(pyr);
        let g = Graph::with_params(&store);
        let n = 5;
        let q = g.constant(Tensor::from_fn(&[n, 4], |i| (i as f64).cos()));
        let x = random_inputs(n, 2, 4, 18);
        let tr = query_to_camera(&pyr, &current, &Pose::identity());
        let emb = s
            .sample(&g, q, g.constant(x.centers), g.constant(x.stds), pyr, tr)
            .unwrap();
        assert_eq!(g.shape(emb.vectors), vec![2 * n, 4]);
        let v = g.value(emb.vectors);
        for (r, &ok) in emb.valid.iter().enumerate() {
            if !ok {
                assert!(v.row(r).iter().all(|&a| a == 0.0));
            }
        }
    }
}
