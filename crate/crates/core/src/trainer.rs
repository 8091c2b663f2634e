//! Optimization loop: horizon sampling, AdamW with a cosine schedule,
//! checkpoints and exact resume.
//!
//! All step randomness (shuffling, horizon draws, dropout) is derived from
//! the seed and the global step index, so a run restored from a checkpoint
//! replays the uninterrupted run step for step.

use std::fs;
use std::io::{BufRead, Write as _};
use std::path::{Path, PathBuf};
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::evaluator::{evaluate, EvalOptions, MetricReport, ModelPredictor};
use crate::fusion::{Dropout, Observation, WorldModel, WorldModelConfig};
use crate::losses::{forecast_loss, target_points, LossBreakdown, LossConfig};
use crate::optim::{clip_grad_norm, cosine_lr, AdamW, AdamWConfig};
use crate::scene_data::{PointSet, SequenceSample};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HorizonPolicy {
    /// Supervise a fixed number of frames every step.
    Fixed,
    /// Draw the supervised length uniformly from `{2, ..., T_max}` per batch.
    #[default]
    RandomEnsemble,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Base learning rate of the cosine schedule.
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Global gradient-norm ceiling.
    pub grad_clip: f64,
    pub horizon_policy: HorizonPolicy,
    /// Frames supervised under the fixed policy; `T_max` when unset.
    pub fixed_horizon: Option<usize>,
    pub seed: u64,
    /// Stop after this many steps; the schedule length is unchanged.
    pub max_steps: Option<usize>,
    /// Validate every this many epochs (0 disables).
    pub validate_every: usize,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 70,
            batch_size: 4,
            lr: 2e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            grad_clip: 25.0,
            horizon_policy: HorizonPolicy::RandomEnsemble,
            fixed_horizon: None,
            seed: 0,
            max_steps: None,
            validate_every: 1,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &WorldModelConfig) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("train.lr", "must be finite and non-negative"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("train.weight_decay", "must be non-negative"));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::config("train.grad_clip", "must be positive"));
        }
        for (field, b) in [("train.beta1", self.beta1), ("train.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(field, "must lie in [0, 1)"));
            }
        }
        match self.horizon_policy {
            HorizonPolicy::RandomEnsemble if model.t_max < 2 => Err(Error::config(
                "model.t_max",
                "random-ensemble training needs t_max >= 2",
            )),
            HorizonPolicy::Fixed => {
                let h = self.fixed_horizon.unwrap_or(model.t_max);
                if h == 0 || h > model.t_max {
                    return Err(Error::config(
                        "train.fixed_horizon",
                        format!("{h} outside [1, {}]", model.t_max),
                    ));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// Uniform draw from `{2, ..., t_max}`.
pub fn sample_horizon(t_max: usize, rng: &mut impl Rng) -> Result<usize> {
    if t_max < 2 {
        return Err(Error::config(
            "model.t_max",
            format!("random-ensemble sampling needs t_max >= 2, got {t_max}"),
        ));
    }
    Ok(rng.random_range(2..=t_max))
}

/// Generator for one purpose (`stream`) at one step.
fn step_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(index);
    rng
}

const SHUFFLE_STREAM: u64 = 1;
const STEP_STREAM: u64 = 2;

/// A sample with its encoded observations and target point sets.
pub struct Prepared<'a> {
    pub sample: &'a SequenceSample,
    pub obs: Observation,
    pub targets: Vec<Rc<PointSet>>,
}

pub fn prepare<'a>(
    model: &WorldModel,
    store: &ParamStore,
    sample: &'a SequenceSample,
    use_mask: bool,
) -> Result<Prepared<'a>> {
    Ok(Prepared {
        sample,
        obs: model.observe(store, &sample.past)?,
        targets: target_points(&sample.future_grids, use_mask),
    })
}

/// One line of `metrics.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub horizon: usize,
    pub lr: f64,
    pub grad_norm: f64,
    pub loss: LossBreakdown,
    pub samples: Vec<String>,
}

/// Everything needed to continue a run: written as `state.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub step: usize,
    pub epoch: usize,
    pub config_hash: String,
    pub best_metric: Option<f64>,
    pub best_step: Option<usize>,
}

/// Model and training configuration persisted as `config.toml`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: WorldModelConfig,
    pub train: TrainConfig,
}

/// Hex SHA-256 of the model configuration; checkpoints built from a
/// different architecture are rejected on load.
pub fn model_hash(model: &WorldModelConfig) -> String {
    let text = toml::to_string(model).expect("model config serializes");
    Sha256::digest(text.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub struct Trainer {
    pub model: WorldModel,
    pub store: ParamStore,
    pub opt: AdamW,
    pub config: TrainConfig,
    pub state: TrainState,
}

impl Trainer {
    /// Fresh model, parameters and optimizer state. Initialization is seeded
    /// from `train.seed`.
    pub fn new(model: WorldModelConfig, config: TrainConfig) -> Result<Self> {
        config.validate(&model)?;
        let (model, store) = WorldModel::new(model, config.seed)?;
        let opt = AdamW::new(config.adamw(), &store);
        let state = TrainState {
            step: 0,
            epoch: 0,
            config_hash: model_hash(&model.config),
            best_metric: None,
            best_step: None,
        };
        Ok(Self {
            model,
            store,
            opt,
            config,
            state,
        })
    }

    pub fn steps_per_epoch(&self, dataset_len: usize) -> usize {
        dataset_len.div_ceil(self.config.batch_size)
    }

    /// Schedule length for a dataset.
    pub fn total_steps(&self, dataset_len: usize) -> usize {
        self.config.epochs * self.steps_per_epoch(dataset_len)
    }

    /// Dataset indices of the batch at global step `step`.
    pub fn batch_indices(&self, dataset_len: usize, step: usize) -> Vec<usize> {
        let per = self.steps_per_epoch(dataset_len);
        let (epoch, k) = (step / per, step % per);
        let mut order: Vec<usize> = (0..dataset_len).collect();
        order.shuffle(&mut step_rng(
            self.config.seed,
            SHUFFLE_STREAM,
            epoch as u64,
        ));
        let b = self.config.batch_size;
        order[k * b..((k + 1) * b).min(dataset_len)].to_vec()
    }

    /// Supervised horizon and the dropout generator of a step.
    fn step_setup(&self, step: usize) -> Result<(usize, ChaCha8Rng)> {
        let mut rng = step_rng(self.config.seed, STEP_STREAM, step as u64);
        let horizon = match self.config.horizon_policy {
            HorizonPolicy::Fixed => self.config.fixed_horizon.unwrap_or(self.model.config.t_max),
            HorizonPolicy::RandomEnsemble => sample_horizon(self.model.config.t_max, &mut rng)?,
        };
        Ok((horizon, rng))
    }

    /// One optimizer step on `batch` with learning rate `lr`. Gradients are
    /// averaged over the batch, clipped, then applied.
    pub fn train_step(&mut self, batch: &[&Prepared<'_>], lr: f64) -> Result<StepRecord> {
        let step = self.state.step;
        let (horizon, mut rng) = self.step_setup(step)?;
        let mut grads: Vec<Tensor> = self
            .store
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        let mut loss = LossBreakdown::default();
        let scale = 1.0 / batch.len() as f64;
        for p in batch {
            let s = p.sample;
            if s.future_grids.len() < horizon || s.trajectory.len() < horizon {
                return Err(Error::Horizon {
                    requested: horizon,
                    max: s.future_grids.len().min(s.trajectory.len()),
                });
            }
            let g = Graph::with_params(&self.store);
            let drop = Some(Dropout {
                rate: self.model.config.dropout,
                rng: &mut rng,
            });
            let vars = self
                .model
                .forecast_graph(&g, &p.obs, &s.trajectory[..horizon], drop)
                .map_err(|e| match e {
                    Error::NonFinite { .. } => Error::NonFinite {
                        sample_id: s.id.clone(),
                    },
                    other => other,
                })?;
            let lv = forecast_loss(&g, &vars, &p.targets[..horizon], &self.config.loss)?;
            if !lv.breakdown.total.is_finite() {
                return Err(Error::NonFinite {
                    sample_id: s.id.clone(),
                });
            }
            let sample_grads = g.backward(lv.total).param_grads(&self.store);
            if sample_grads.iter().any(|t| !t.all_finite()) {
                return Err(Error::NonFinite {
                    sample_id: s.id.clone(),
                });
            }
            for (acc, gr) in grads.iter_mut().zip(&sample_grads) {
                acc.add_assign(gr);
            }
            loss.chamfer += scale * lv.breakdown.chamfer;
            loss.focal += scale * lv.breakdown.focal;
            loss.total += scale * lv.breakdown.total;
            if loss.per_frame.is_empty() {
                loss.per_frame = vec![Default::default(); lv.breakdown.per_frame.len()];
            }
            for (a, f) in loss.per_frame.iter_mut().zip(&lv.breakdown.per_frame) {
                a.chamfer += scale * f.chamfer;
                a.focal += scale * f.focal;
                a.total += scale * f.total;
            }
        }
        grads.iter_mut().for_each(|t| t.scale_in_place(scale));
        let grad_norm = clip_grad_norm(&mut grads, self.config.grad_clip);
        self.opt.update(&mut self.store, &grads, lr);
        self.state.step += 1;
        Ok(StepRecord {
            step,
            epoch: self.state.epoch,
            horizon,
            lr,
            grad_norm,
            loss,
            samples: batch.iter().map(|p| p.sample.id.clone()).collect(),
        })
    }

    /// Encodes every sample once; the frozen backbone makes this reusable.
    pub fn prepare_all<'a>(&self, data: &'a [SequenceSample]) -> Result<Vec<Prepared<'a>>> {
        data.iter()
            .map(|s| prepare(&self.model, &self.store, s, self.config.loss.use_mask))
            .collect()
    }

    /// Runs the configured epochs from the current step. Checkpoints go to
    /// `out/last` after every epoch and to `out/best` when validation
    /// improves; step records are appended to `out/last/metrics.jsonl`.
    pub fn fit(
        &mut self,
        train: &[SequenceSample],
        val: Option<&[SequenceSample]>,
        out: Option<&Path>,
    ) -> Result<FitSummary> {
        if train.is_empty() {
            return Err(Error::config("data", "training set is empty"));
        }
        let total = self.total_steps(train.len());
        let stop = self.config.max_steps.map_or(total, |m| m.min(total));
        let per_epoch = self.steps_per_epoch(train.len());
        let mut summary = FitSummary::default();
        let last = out.map(|o| o.join("last"));
        if let Some(dir) = &last {
            self.save(dir)?;
        }
        if self.state.step >= stop {
            return Ok(summary);
        }
        let prepared = self.prepare_all(train)?;
        let mut log = match &last {
            Some(dir) => Some(open_append(&dir.join(METRICS_FILE))?),
            None => None,
        };
        while self.state.step < stop {
            let step = self.state.step;
            self.state.epoch = step / per_epoch;
            let batch: Vec<&Prepared<'_>> = self
                .batch_indices(train.len(), step)
                .into_iter()
                .map(|i| &prepared[i])
                .collect();
            let lr = cosine_lr(self.config.lr, step, total);
            let record = self.train_step(&batch, lr)?;
            if step.is_multiple_of(50) {
                log::info!(
                    "step {step}/{stop} L={} loss {:.4} (chamfer {:.4}, focal {:.4}) |g| {:.2} lr {:.2e}",
                    record.horizon, record.loss.total, record.loss.chamfer, record.loss.focal, record.grad_norm, lr
                );
            }
            if let (Some(f), Some(dir)) = (log.as_mut(), &last) {
                let line = serde_json::to_string(&record).expect("record serializes");
                writeln!(f, "{line}").map_err(|e| Error::io(dir.join(METRICS_FILE), e))?;
            }
            summary.records.push(record);
            let epoch_done = self.state.step.is_multiple_of(per_epoch) || self.state.step == stop;
            if epoch_done {
                let epoch = (self.state.step - 1) / per_epoch;
                let due = self.config.validate_every > 0
                    && (epoch + 1).is_multiple_of(self.config.validate_every);
                if let (Some(val), true) = (val, due || self.state.step == stop) {
                    let report = self.validate(val)?;
                    log::info!(
                        "epoch {epoch} validation mIoU {:.2} IoU {:.2}",
                        report.avg_miou,
                        report.avg_iou
                    );
                    let better = self.state.best_metric.is_none_or(|b| report.avg_miou > b);
                    if better {
                        self.state.best_metric = Some(report.avg_miou);
                        self.state.best_step = Some(self.state.step);
                        if let Some(o) = out {
                            self.save(&o.join("best"))?;
                        }
                    }
                    summary.validation.push((self.state.step, report));
                }
                self.state.epoch = self.state.step / per_epoch;
                if let Some(dir) = &last {
                    self.save(dir)?;
                }
            }
        }
        Ok(summary)
    }

    /// Voxel metrics of the current parameters over horizons `1..=T_max`.
    pub fn validate(&self, data: &[SequenceSample]) -> Result<MetricReport> {
        let horizons = (1..=self.model.config.t_max).collect();
        let opts = EvalOptions {
            horizons,
            use_mask: self.config.loss.use_mask,
            ray_iou: false,
            ..EvalOptions::default()
        };
        evaluate(
            &ModelPredictor {
                model: &self.model,
                store: &self.store,
                threshold: 0.0,
            },
            data,
            &opts,
        )
    }

    /// Writes `config.toml`, `params.bin`, `optimizer.bin` and `state.json`
    /// into `dir`. The metrics log is left in place.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let run = RunConfig {
            model: self.model.config.clone(),
            train: self.config.clone(),
        };
        let text = toml::to_string(&run)
            .map_err(|e| Error::format(dir.join(CONFIG_FILE), e.to_string()))?;
        write_atomic(&dir.join(CONFIG_FILE), text.as_bytes())?;
        write_atomic(
            &dir.join(PARAMS_FILE),
            &encode_tensors(PARAMS_MAGIC, 0, self.store.names(), self.store.tensors()),
        )?;
        let mut moments = self.opt.m.clone();
        moments.extend(self.opt.v.iter().cloned());
        let names: Vec<String> = self
            .store
            .names()
            .iter()
            .map(|n| format!("m.{n}"))
            .chain(self.store.names().iter().map(|n| format!("v.{n}")))
            .collect();
        write_atomic(
            &dir.join(OPTIMIZER_FILE),
            &encode_tensors(OPTIMIZER_MAGIC, self.opt.step, &names, &moments),
        )?;
        let state = serde_json::to_vec_pretty(&self.state).expect("state serializes");
        write_atomic(&dir.join(STATE_FILE), &state)
    }

    /// Restores a checkpoint written by [`Trainer::save`].
    pub fn load(dir: &Path) -> Result<Self> {
        let run = load_run_config(dir)?;
        let mut t = Self::new(run.model, run.train)?;
        let state: TrainState = serde_json::from_slice(&read(&dir.join(STATE_FILE))?)
            .map_err(|e| Error::format(dir.join(STATE_FILE), e.to_string()))?;
        if state.config_hash != t.state.config_hash {
            return Err(Error::Incompatible(format!(
                "{}: model hash {} does not match its config",
                dir.display(),
                state.config_hash
            )));
        }
        load_params(dir, &mut t.store)?;
        let path = dir.join(OPTIMIZER_FILE);
        let (step, names, mut tensors) =
            decode_tensors(OPTIMIZER_MAGIC, &read(&path)?).map_err(|r| Error::format(&path, r))?;
        let n = t.store.len();
        if names.len() != 2 * n {
            return Err(Error::format(
                &path,
                format!("expected {} moment tensors, found {}", 2 * n, names.len()),
            ));
        }
        let v = tensors.split_off(n);
        for (i, (a, b)) in tensors.iter().zip(&v).enumerate() {
            if a.shape() != t.store.get(crate::autodiff::ParamId(i)).shape()
                || a.shape() != b.shape()
            {
                return Err(Error::format(
                    &path,
                    format!("moment shape mismatch for {}", t.store.names()[i]),
                ));
            }
        }
        t.opt.m = tensors;
        t.opt.v = v;
        t.opt.step = step;
        t.state = state;
        Ok(t)
    }
}

#[derive(Clone, Debug, Default)]
pub struct FitSummary {
    pub records: Vec<StepRecord>,
    /// `(step, report)` per validation pass.
    pub validation: Vec<(usize, MetricReport)>,
}

pub const CONFIG_FILE: &str = "config.toml";
pub const PARAMS_FILE: &str = "params.bin";
pub const OPTIMIZER_FILE: &str = "optimizer.bin";
pub const STATE_FILE: &str = "state.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
const PARAMS_MAGIC: &[u8; 4] = b"PRM1";
const OPTIMIZER_MAGIC: &[u8; 4] = b"OPT1";

pub fn load_run_config(dir: &Path) -> Result<RunConfig> {
    let path = dir.join(CONFIG_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    toml::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))
}

/// Loads `params.bin` into a store with the same layout.
pub fn load_params(dir: &Path, store: &mut ParamStore) -> Result<()> {
    let path = dir.join(PARAMS_FILE);
    let (_, names, tensors) =
        decode_tensors(PARAMS_MAGIC, &read(&path)?).map_err(|r| Error::format(&path, r))?;
    store
        .load_values(&names, tensors)
        .map_err(|r| Error::Incompatible(format!("{}: {r}", path.display())))
}

/// Model and parameters of a checkpoint directory, for inference.
pub fn load_model(dir: &Path) -> Result<(WorldModel, ParamStore)> {
    let run = load_run_config(dir)?;
    let (model, mut store) = WorldModel::new(run.model, run.train.seed)?;
    load_params(dir, &mut store)?;
    Ok((model, store))
}

/// Reads the step records of a run.
pub fn read_metrics(dir: &Path) -> Result<Vec<StepRecord>> {
    let path = dir.join(METRICS_FILE);
    let f = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    std::io::BufReader::new(f)
        .lines()
        .map(|l| {
            let l = l.map_err(|e| Error::io(&path, e))?;
            serde_json::from_str(&l).map_err(|e| Error::format(&path, e.to_string()))
        })
        .collect()
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn open_append(path: &Path) -> Result<fs::File> {
    fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))
}

/// Writes through a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp: PathBuf = path.to_path_buf();
    tmp.as_mut_os_string().push(".tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Layout: magic, u64 counter, u32 tensor count, then per tensor a
/// length-prefixed name, u32 rank, u64 dims and little-endian f64 values.
fn encode_tensors(magic: &[u8; 4], counter: u64, names: &[String], tensors: &[Tensor]) -> Vec<u8> {
    let mut b = Vec::new();
    b.extend_from_slice(magic);
    b.extend_from_slice(&counter.to_le_bytes());
    b.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in names.iter().zip(tensors) {
        b.extend_from_slice(&(name.len() as u32).to_le_bytes());
        b.extend_from_slice(name.as_bytes());
        b.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            b.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            b.extend_from_slice(&v.to_le_bytes());
        }
    }
    b
}

type Decoded = (u64, Vec<String>, Vec<Tensor>);

fn decode_tensors(magic: &[u8; 4], bytes: &[u8]) -> std::result::Result<Decoded, String> {
    struct Cursor<'a>(&'a [u8]);
    impl Cursor<'_> {
        fn take(&mut self, n: usize) -> std::result::Result<&[u8], String> {
            if self.0.len() < n {
                return Err("truncated file".into());
            }
            let (a, b) = self.0.split_at(n);
            self.0 = b;
            Ok(a)
        }
        fn u32(&mut self) -> std::result::Result<u32, String> {
            Ok(u32::from_le_bytes(
                self.take(4)?.try_into().expect("4 bytes"),
            ))
        }
        fn u64(&mut self) -> std::result::Result<u64, String> {
            Ok(u64::from_le_bytes(
                self.take(8)?.try_into().expect("8 bytes"),
            ))
        }
    }
    let mut c = Cursor(bytes);
    if c.take(4)? != magic {
        return Err(format!(
            "bad magic, expected {}",
            String::from_utf8_lossy(magic)
        ));
    }
    let counter = c.u64()?;
    let count = c.u32()? as usize;
    let (mut names, mut tensors) = (Vec::with_capacity(count), Vec::with_capacity(count));
    for _ in 0..count {
        let len = c.u32()? as usize;
        names.push(
            String::from_utf8(c.take(len)?.to_vec())
                .map_err(|_| "parameter name is not UTF-8".to_string())?,
        );
        let rank = c.u32()? as usize;
        let shape = (0..rank)
            .map(|_| c.u64().map(|d| d as usize))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let data = c.take(n.checked_mul(8).ok_or("tensor too large")?)?;
        tensors.push(Tensor::new(
            &shape,
            data.chunks(8)
                .map(|x| f64::from_le_bytes(x.try_into().expect("8 bytes")))
                .collect(),
        ));
    }
    if !c.0.is_empty() {
        return Err(format!("{} trailing bytes", c.0.len()));
    }
    Ok((counter, names, tensors))
}
