//! The attention world model: anchors refined against past sensor
//! embeddings and the planned trajectory, one block at a time.
//!
//! Anchors for future frame `t` live in that frame's ego coordinates. The
//! waypoint pose of frame `t` carries them into the current ego frame before
//! projection into past cameras, so the trajectory also steers where each
//! frame looks.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anchors::{
    anchor_statistics_op, decode_anchors, init_anchor_state, AnchorConfig, AnchorState,
    DecodedFrame, DecodedVars, DecoderHeads,
};
use crate::autodiff::{AttnMask, Graph, Init, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::nn::{LayerNorm, Linear, Mlp};
use crate::scene_data::SensorFrame;
use crate::sensor::{
    extract_features, query_to_camera, Backbone, BackboneConfig, DeformableSampler,
    ImageFeaturePyramid, SamplerConfig, SensorEmbedding,
};
use crate::trajectory::{TrajectoryEmbedConfig, TrajectoryEmbedder, TrajectoryWaypoint};

/// How temporal attention groups the `n · L` occupancy tokens.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemporalMode {
    /// Every token attends to every token of every frame.
    #[default]
    Joint,
    /// Token `i` of frame `t` attends only to token `i` of each frame.
    Factorized,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldModelConfig {
    pub anchors: AnchorConfig,
    pub heads: usize,
    pub blocks: usize,
    /// Longest forecast horizon, frames.
    pub t_max: usize,
    /// Observed frames before the current one.
    pub past_frames: usize,
    pub backbone: BackboneConfig,
    pub sampler: SamplerConfig,
    pub dropout: f64,
    pub temporal: TemporalMode,
    /// Re-sample sensor features in every block from the refined anchors.
    pub resample_each_block: bool,
    /// Seed of the fixed initial anchor set.
    pub anchor_seed: u64,
    /// Starting value of the per-head distance-bias slope.
    pub distance_bias_init: f64,
    /// Multiplier on waypoint translations before the position MLPs.
    pub trajectory_scale: f64,
}

impl WorldModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.anchors.validate()?;
        self.backbone.validate()?;
        let d = self.anchors.d;
        if self.heads == 0 || !d.is_multiple_of(self.heads) {
            return Err(Error::config(
                "model.heads",
                format!("width {d} is not divisible by {} heads", self.heads),
            ));
        }
        if !d.is_multiple_of(2) {
            return Err(Error::config(
                "model.anchors.d",
                "width must be even for the sinusoidal encodings",
            ));
        }
        if self.blocks == 0 {
            return Err(Error::config("model.blocks", "need at least one block"));
        }
        if self.t_max == 0 {
            return Err(Error::config("model.t_max", "must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("model.dropout", "must lie in [0, 1)"));
        }
        if self.sampler.offsets_per_level == 0 {
            return Err(Error::config(
                "model.sampler.offsets_per_level",
                "must be at least 1",
            ));
        }
        Ok(())
    }
}

/// Multi-head attention projections; the output projection has no bias so
/// a query without admissible keys contributes nothing.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut impl Rng) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), d, d, true, rng),
            k: Linear::new(store, &format!("{name}.k"), d, d, true, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, true, rng),
            o: Linear::new(store, &format!("{name}.o"), d, d, false, rng),
            heads,
        }
    }

    pub fn forward(
        &self,
        g: &Graph,
        query: Var,
        key: Var,
        value: Var,
        bias: Option<Var>,
        mask: Option<AttnMask>,
    ) -> Var {
        let q = self.q.forward(g, query);
        let k = self.k.forward(g, key);
        let v = self.v.forward(g, value);
        let a = g.attention(q, k, v, self.heads, bias, mask);
        self.o.forward(g, a)
    }
}

/// One refinement block.
#[derive(Clone, Debug)]
pub struct FusionBlock {
    pub cross_norm: LayerNorm,
    pub cross: Attention,
    pub self_norm: LayerNorm,
    pub self_attn: Attention,
    /// Per-head slope of the `−τ · L1` distance bias.
    pub tau: ParamId,
    pub ffn_norm: LayerNorm,
    pub ffn: Mlp,
    pub temporal_norm: LayerNorm,
    pub temporal: Attention,
    pub temporal_ffn_norm: LayerNorm,
    pub temporal_ffn: Mlp,
}

/// Randomness for training-time dropout.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut ChaCha8Rng,
}

fn dropout(g: &Graph, x: Var, drop: &mut Option<Dropout<'_>>) -> Var {
    let Some(d) = drop.as_mut() else { return x };
    if d.rate <= 0.0 {
        return x;
    }
    let keep = 1.0 - d.rate;
    let shape = g.shape(x);
    let mask = Tensor::from_fn(&shape, |_| {
        if d.rng.random_bool(keep) {
            1.0 / keep
        } else {
            0.0
        }
    });
    g.mul(x, g.constant(mask))
}

impl FusionBlock {
    fn new(
        store: &mut ParamStore,
        name: &str,
        config: &WorldModelConfig,
        rng: &mut impl Rng,
    ) -> Self {
        let (d, h) = (config.anchors.d, config.heads);
        Self {
            cross_norm: LayerNorm::new(store, &format!("{name}.cross_norm"), d),
            cross: Attention::new(store, &format!("{name}.cross"), d, h, rng),
            self_norm: LayerNorm::new(store, &format!("{name}.self_norm"), d),
            self_attn: Attention::new(store, &format!("{name}.self_attn"), d, h, rng),
            tau: store.add(
                format!("{name}.tau"),
                Tensor::full(&[h], config.distance_bias_init),
            ),
            ffn_norm: LayerNorm::new(store, &format!("{name}.ffn_norm"), d),
            ffn: Mlp::new(store, &format!("{name}.ffn"), [d, 2 * d, d], rng),
            temporal_norm: LayerNorm::new(store, &format!("{name}.temporal_norm"), d),
            temporal: Attention::new(store, &format!("{name}.temporal"), d, h, rng),
            temporal_ffn_norm: LayerNorm::new(store, &format!("{name}.temporal_ffn_norm"), d),
            temporal_ffn: Mlp::new(store, &format!("{name}.temporal_ffn"), [d, 2 * d, d], rng),
        }
    }

    /// Occupancy queries attend to the frame's valid sensor vectors.
    pub fn frame_cross_attention(
        &self,
        g: &Graph,
        x: Var,
        pos: Var,
        sensor: &SensorEmbedding,
        drop: &mut Option<Dropout<'_>>,
    ) -> Var {
        let xn = self.cross_norm.forward(g, x);
        let q = g.add(xn, pos);
        let mask = AttnMask::Keys(Rc::new(sensor.valid.clone()));
        let a = self
            .cross
            .forward(g, q, sensor.vectors, sensor.vectors, None, Some(mask));
        let a = dropout(g, a, drop);
        g.add(x, a)
    }

    /// Self-attention over the occupancy tokens plus the frame's trajectory
    /// token, followed by a feed-forward layer. `centers` drive the distance
    /// bias between occupancy tokens.
    pub fn frame_self_attention_with_traj(
        &self,
        g: &Graph,
        x: Var,
        traj: Var,
        pos: Var,
        centers: Var,
        drop: &mut Option<Dropout<'_>>,
    ) -> (Var, Var) {
        let n = g.shape(x)[0];
        let d = g.shape(x)[1];
        let tokens = g.concat_rows(&[x, traj]);
        let zero = g.constant(Tensor::zeros(&[1, d]));
        let pos = g.concat_rows(&[pos, zero]);
        let tn = self.self_norm.forward(g, tokens);
        let q = g.add(tn, pos);
        let dist = g.pairwise_l1(centers, centers);
        let bias = g.distance_bias(dist, g.param(self.tau), 1, 1);
        let a = self.self_attn.forward(g, q, q, tn, Some(bias), None);
        let a = dropout(g, a, drop);
        let tokens = g.add(tokens, a);
        let f = self.ffn.forward(g, self.ffn_norm.forward(g, tokens));
        let f = dropout(g, f, drop);
        let tokens = g.add(tokens, f);
        (g.slice_rows(tokens, 0, n), g.slice_rows(tokens, n, 1))
    }

    /// Attention across the `n · L` tokens of all frames (frame-major rows),
    /// with the frame-index encoding already added by the caller.
    pub fn temporal_self_attention(
        &self,
        g: &Graph,
        all: Var,
        frame_pos: Var,
        n: usize,
        mode: TemporalMode,
        drop: &mut Option<Dropout<'_>>,
    ) -> Var {
        let rows = g.shape(all)[0];
        let xn = self.temporal_norm.forward(g, all);
        let q = g.add(xn, frame_pos);
        let mask = match mode {
            TemporalMode::Joint => None,
            TemporalMode::Factorized => Some(AttnMask::Full(Rc::new(
                (0..rows * rows)
                    .map(|ij| (ij / rows) % n == (ij % rows) % n)
                    .collect(),
            ))),
        };
        let a = self.temporal.forward(g, q, q, xn, None, mask);
        let a = dropout(g, a, drop);
        let all = g.add(all, a);
        let f = self
            .temporal_ffn
            .forward(g, self.temporal_ffn_norm.forward(g, all));
        let f = dropout(g, f, drop);
        g.add(all, f)
    }
}

/// Forecast of `L` future frames.
#[derive(Clone, Debug, PartialEq)]
pub struct ForecastOutput {
    pub frames: Vec<DecodedFrame>,
}

/// Graph-side forecast: decoded frames of every block, last block last.
#[derive(Clone, Debug)]
pub struct ForecastVars {
    pub blocks: Vec<Vec<DecodedVars>>,
    /// Mean point displacement per block.
    pub displacement: Vec<f64>,
}

impl ForecastVars {
    pub fn last(&self) -> &[DecodedVars] {
        self.blocks.last().expect("at least one block")
    }

    pub fn materialize(&self, g: &Graph) -> ForecastOutput {
        ForecastOutput {
            frames: self.last().iter().map(|f| f.materialize(g)).collect(),
        }
    }
}

/// Observations prepared for a forecast.
#[derive(Clone, Debug)]
pub struct Observation {
    /// One pyramid per observed frame, oldest first.
    pub pyramids: Rc<Vec<ImageFeaturePyramid>>,
    /// Ego-to-world pose of the current frame.
    pub current_pose: Pose,
}

/// All model components; parameters live in a separate [`ParamStore`].
#[derive(Clone, Debug)]
pub struct WorldModel {
    pub config: WorldModelConfig,
    pub backbone: Backbone,
    pub sampler: DeformableSampler,
    pub trajectory: TrajectoryEmbedder,
    pub position: Mlp,
    pub frame_embed: ParamId,
    pub blocks: Vec<FusionBlock>,
    pub heads: DecoderHeads,
    pub initial: AnchorState,
}

impl WorldModel {
    /// Builds the model and its freshly initialized parameters.
    pub fn new(config: WorldModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.anchors.d;
        let backbone = Backbone::new(&mut store, "backbone", config.backbone.clone(), &mut rng)?;
        let sampler = DeformableSampler::new(
            &mut store,
            "sampler",
            config.sampler,
            &config.backbone.channels,
            d,
            &mut rng,
        );
        let traj_cfg = TrajectoryEmbedConfig {
            d,
            t_max: config.t_max,
            position_scale: config.trajectory_scale,
        };
        let trajectory = TrajectoryEmbedder::new(&mut store, "traj", traj_cfg, &mut rng);
        let position = Mlp::new(&mut store, "position", [6, d, d], &mut rng);
        let frame_embed = store.add(
            "frame_embed",
            Init::Normal(0.02).tensor(&[config.t_max, d], &mut rng),
        );
        let blocks = (0..config.blocks)
            .map(|b| FusionBlock::new(&mut store, &format!("blocks.{b}"), &config, &mut rng))
            .collect();
        let heads = DecoderHeads::new(&mut store, "heads", &config.anchors, &mut rng);
        let initial = init_anchor_state(&config.anchors, config.anchor_seed);
        Ok((
            Self {
                config,
                backbone,
                sampler,
                trajectory,
                position,
                frame_embed,
                blocks,
                heads,
                initial,
            },
            store,
        ))
    }

    /// Encodes the observed frames of a sample.
    pub fn observe(&self, store: &ParamStore, frames: &[SensorFrame]) -> Result<Observation> {
        if frames.len() != self.config.past_frames + 1 {
            return Err(Error::Shape(format!(
                "expected {} observed frames, got {}",
                self.config.past_frames + 1,
                frames.len()
            )));
        }
        let pyramids = extract_features(&self.backbone, store, frames)?;
        let current_pose = frames.last().expect("non-empty").ego_pose;
        Ok(Observation {
            pyramids: Rc::new(pyramids),
            current_pose,
        })
    }

    /// Anchor positional encoding from normalized centers and spreads.
    fn position_encoding(&self, g: &Graph, centers: Var, stds: Var) -> Var {
        let [lo, hi] = self.config.anchors.bounds;
        let scale: Vec<f64> = (0..3).map(|a| 2.0 / (hi[a] - lo[a])).collect();
        let shift: Vec<f64> = (0..3)
            .map(|a| -1.0 - 2.0 * lo[a] / (hi[a] - lo[a]))
            .collect();
        let c = g.mul_row(centers, g.constant(Tensor::new(&[3], scale)));
        let c = g.add_row(c, g.constant(Tensor::new(&[3], shift)));
        self.position.forward(g, g.concat_cols(&[c, stds]))
    }

    /// Records a forecast of `trajectory.len()` frames on `g`.
    pub fn forecast_graph(
        &self,
        g: &Graph,
        obs: &Observation,
        trajectory: &[TrajectoryWaypoint],
        mut drop: Option<Dropout<'_>>,
    ) -> Result<ForecastVars> {
        let l = trajectory.len();
        if l == 0 || l > self.config.t_max {
            return Err(Error::Horizon {
                requested: l,
                max: self.config.t_max,
            });
        }
        let cfg = &self.config;
        let (n, m) = (cfg.anchors.n, cfg.anchors.m);
        let traj_tokens = self.trajectory.embed(g, trajectory, &Pose::identity())?;
        let mut traj: Vec<Var> = (0..l).map(|t| g.slice_rows(traj_tokens, t, 1)).collect();
        let mut points: Vec<Var> = (0..l)
            .map(|_| g.constant(self.initial.points.clone()))
            .collect();
        let mut feats: Vec<Var> = (0..l)
            .map(|_| g.constant(self.initial.features.clone()))
            .collect();
        let frame_offsets: Vec<i32> = obs.pyramids.iter().map(|p| p.frame_offset).collect();
        let transforms: Vec<Vec<Vec<Pose>>> = trajectory
            .iter()
            .map(|w| query_to_camera(&obs.pyramids, &obs.current_pose, &w.pose()))
            .collect();
        let frame_idx: Vec<usize> = (0..l).flat_map(|t| std::iter::repeat_n(t, n)).collect();
        let frame_pos = g.gather_rows(g.param(self.frame_embed), Rc::new(frame_idx));
        let mut cached: Vec<Option<SensorEmbedding>> = vec![None; l];
        let mut out = ForecastVars {
            blocks: Vec::with_capacity(cfg.blocks),
            displacement: Vec::with_capacity(cfg.blocks),
        };
        for block in &self.blocks {
            let mut positions = Vec::with_capacity(l);
            for t in 0..l {
                let (centers, stds) = anchor_statistics_op(g, points[t], m);
                let pos = self.position_encoding(g, centers, stds);
                let sensor = match (&cached[t], cfg.resample_each_block) {
                    (Some(s), false) => s.clone(),
                    _ => {
                        let q = g.add(feats[t], pos);
                        let s = self.sampler.sample(
                            g,
                            q,
                            centers,
                            stds,
                            obs.pyramids.clone(),
                            transforms[t].clone(),
                        )?;
                        let s = self.sampler.add_temporal_encoding(g, s, &frame_offsets)?;
                        cached[t] = Some(s.clone());
                        s
                    }
                };
                let x = block.frame_cross_attention(g, feats[t], pos, &sensor, &mut drop);
                let (x, tr) =
                    block.frame_self_attention_with_traj(g, x, traj[t], pos, centers, &mut drop);
                feats[t] = x;
                traj[t] = tr;
                positions.push(pos);
            }
            let all = g.concat_rows(&feats);
            let all = block.temporal_self_attention(g, all, frame_pos, n, cfg.temporal, &mut drop);
            let mut decoded = Vec::with_capacity(l);
            let mut moved = 0.0;
            for t in 0..l {
                feats[t] = g.slice_rows(all, t * n, n);
                let dec = decode_anchors(g, &self.heads, feats[t], points[t])?;
                let (before, after) = (g.value(points[t]), g.value(dec.points));
                moved += before
                    .data()
                    .chunks(3)
                    .zip(after.data().chunks(3))
                    .map(|(a, b)| {
                        a.iter()
                            .zip(b)
                            .map(|(x, y)| (x - y).powi(2))
                            .sum::<f64>()
                            .sqrt()
                    })
                    .sum::<f64>();
                points[t] = dec.points;
                decoded.push(dec);
            }
            let disp = moved / (l * n * m) as f64;
            if !disp.is_finite() {
                return Err(Error::NonFinite {
                    sample_id: "forecast".into(),
                });
            }
            log::trace!("block displacement {disp:.4}");
            out.displacement.push(disp);
            out.blocks.push(decoded);
        }
        Ok(out)
    }

    /// Inference forecast with the final block's output.
    pub fn forecast(
        &self,
        store: &ParamStore,
        obs: &Observation,
        trajectory: &[TrajectoryWaypoint],
    ) -> Result<ForecastOutput> {
        let g = Graph::with_params(store);
        let vars = self.forecast_graph(&g, obs, trajectory, None)?;
        Ok(vars.materialize(&g))
    }
}
