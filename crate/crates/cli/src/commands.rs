use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use trajocc::ablation::{ensemble_ablation, trajectory_ablation, Study};
use trajocc::config::{ExperimentConfig, Preset};
use trajocc::error::{Error, Result};
use trajocc::evaluator::{
    apply_trajectory_source, evaluate, sweep_table, threshold_sweep, voxelize_prediction,
    MetricReport, ModelPredictor, OraclePredictor, Predictor,
};
use trajocc::render::{metric_curves_svg, render_rows};
use trajocc::scene_data::{
    load_dataset, load_occ3d_sample, save_png, write_dataset, OccupancyGrid, SequenceSample,
};
use trajocc::trainer::{load_model, load_run_config, model_hash, write_atomic, Trainer};

use crate::run::RunManifest;
use crate::{Cli, Command};

/// Help epilogue listing every configuration field with its desk default.
pub fn config_help() -> String {
    let mut s = String::from(
        "Configuration fields (desk preset defaults; set with --config or --set KEY=VALUE):\n",
    );
    for (k, v) in ExperimentConfig::preset(Preset::Desk).field_listing() {
        let _ = writeln!(s, "  {k} = {v}");
    }
    s.push_str(
        "\nExit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.\n",
    );
    s
}

pub fn dispatch(cli: &Cli) -> Result<()> {
    let g = &cli.global;
    let (name, default_out) = match &cli.command {
        Command::MakeSynthetic { .. } => ("make-synthetic", "data"),
        Command::Train { .. } => ("train", "runs/train"),
        Command::Eval { .. } => ("eval", "runs/eval"),
        Command::Forecast { .. } => ("forecast", "runs/forecast"),
        Command::Ablate { .. } => ("ablate", "runs/ablate"),
        Command::Plot { .. } => ("plot", "runs/plot"),
    };
    let out = g.out.clone().unwrap_or_else(|| PathBuf::from(default_out));
    let cfg = g.resolve()?;
    let manifest = RunManifest::start(name, cfg.to_toml(), cfg.train.seed, &out)?;
    let result = run(cli, cfg, &out);
    let mut manifest = manifest;
    if let Ok(paths) = &result {
        manifest.artifacts.clone_from(paths);
    }
    manifest.finish(&out, &result)?;
    result.map(|_| ())
}

fn run(cli: &Cli, mut cfg: ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>> {
    match &cli.command {
        Command::MakeSynthetic { train, val } => {
            if let Some(n) = train {
                cfg.data.train_sequences = *n;
            }
            if let Some(n) = val {
                cfg.data.val_sequences = *n;
            }
            cfg.validate()?;
            make_synthetic(&cfg, out)
        }
        Command::Train {
            data,
            epochs,
            max_steps,
            resume,
        } => {
            if let Some(e) = epochs {
                cfg.train.epochs = *e;
            }
            if max_steps.is_some() {
                cfg.train.max_steps = *max_steps;
            }
            train(
                &cfg,
                data.as_deref().or(cfg.data.root.as_deref()),
                *resume,
                out,
                *epochs,
                *max_steps,
            )
        }
        Command::Eval {
            checkpoint,
            data,
            split,
            oracle,
            dump,
            sweep,
        } => {
            let req = EvalRequest {
                checkpoint: checkpoint.as_deref(),
                data: data.as_deref(),
                split,
                oracle: *oracle,
                dump: *dump,
                sweep,
            };
            eval(&cfg, cli.global.config.is_some(), &req, out)
        }
        Command::Forecast {
            checkpoint,
            sequence,
        } => forecast(&cfg, checkpoint, sequence, out),
        Command::Ablate {
            study,
            seeds,
            fixed_horizon,
            t_max,
            data,
        } => {
            if let Some(t) = t_max {
                cfg.model.t_max = *t;
                cfg.data.world.future_frames = cfg.data.world.future_frames.max(*t);
                cfg.validate()?;
            }
            ablate(&cfg, *study, seeds, *fixed_horizon, data.as_deref(), out)
        }
        Command::Plot { input, scale } => {
            plot(&cfg, cli.global.horizons.as_deref(), input, *scale, out)
        }
    }
}

fn load_splits(
    cfg: &ExperimentConfig,
    data: Option<&Path>,
) -> Result<(Vec<SequenceSample>, Vec<SequenceSample>)> {
    match data {
        Some(root) => {
            if !root.exists() {
                return Err(Error::io(
                    root,
                    std::io::Error::new(
                        std::io::ErrorKind::NotFound,
                        "dataset directory not found",
                    ),
                ));
            }
            Ok((load_dataset(root, "train")?, load_dataset(root, "val")?))
        }
        None => cfg.data.generate(),
    }
}

fn make_synthetic(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let (train, val) = cfg.data.generate()?;
    let generator = serde_json::to_value(&cfg.data).expect("data config serializes");
    let index = write_dataset(out, &train, &val, Some(generator))?;
    let occupied: Vec<usize> = train
        .iter()
        .chain(&val)
        .flat_map(|s| s.future_grids.iter().map(OccupancyGrid::occupied_count))
        .collect();
    let mean = occupied.iter().sum::<usize>() as f64 / occupied.len().max(1) as f64;
    println!(
        "wrote {} train and {} val sequences to {} ({} future frames each, {:.1} occupied voxels per frame)",
        index.train.len(),
        index.val.len(),
        out.display(),
        cfg.data.world.future_frames,
        mean
    );
    Ok(index
        .train
        .iter()
        .chain(&index.val)
        .map(|p| out.join(p))
        .collect())
}

fn train(
    cfg: &ExperimentConfig,
    data: Option<&Path>,
    resume: bool,
    out: &Path,
    epochs: Option<usize>,
    max_steps: Option<usize>,
) -> Result<Vec<PathBuf>> {
    let (train, val) = load_splits(cfg, data)?;
    let last = out.join("last");
    let mut trainer = if resume {
        let t = Trainer::load(&last)?;
        if t.state.config_hash != model_hash(&cfg.model) {
            return Err(Error::Incompatible(format!(
                "{}: checkpoint model differs from the resolved config",
                last.display()
            )));
        }
        t
    } else {
        Trainer::new(cfg.model.clone(), cfg.train.clone())?
    };
    if resume {
        if let Some(e) = epochs {
            trainer.config.epochs = e;
        }
        // A step cap belongs to one invocation; resuming runs to the end unless capped again.
        trainer.config.max_steps = max_steps;
    }
    log::info!(
        "training on {} sequences ({} validation), {} parameters, {} steps",
        train.len(),
        val.len(),
        trainer.store.scalar_count(),
        trainer.total_steps(train.len())
    );
    let val_ref = (!val.is_empty()).then_some(&val[..]);
    let summary = trainer.fit(&train, val_ref, Some(out))?;
    if let Some(r) = summary.records.last() {
        println!(
            "finished at step {} with loss {:.4} (chamfer {:.4}, focal {:.4})",
            trainer.state.step, r.loss.total, r.loss.chamfer, r.loss.focal
        );
    } else {
        println!("no steps run; checkpoint at {}", last.display());
    }
    if let Some((step, rep)) = summary.validation.last() {
        println!(
            "validation at step {step}: IoU {:.2} mIoU {:.2}",
            rep.avg_iou, rep.avg_miou
        );
    }
    let mut paths = vec![last];
    if out.join("best").exists() {
        paths.push(out.join("best"));
    }
    Ok(paths)
}

fn write_report(report: &MetricReport, out: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let json = out.join("report.json");
    let txt = out.join("report.txt");
    write_atomic(
        &json,
        &serde_json::to_vec_pretty(report).expect("report serializes"),
    )?;
    write_atomic(&txt, report.to_table().as_bytes())?;
    Ok(vec![json, txt])
}

/// Raw forecast of one frame, kept for threshold re-sweeps.
#[derive(Serialize, Deserialize)]
struct PointDump {
    points: Vec<[f64; 3]>,
    labels: Vec<u8>,
    probabilities: Vec<Vec<f64>>,
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Writes `<out>/<id>/gt_t<h>.occ4`, `pred_t<h>.occ4` and `points_t<h>.json`.
fn dump_sample(
    model: &ModelPredictor<'_>,
    sample: &SequenceSample,
    traj: &[trajocc::trajectory::TrajectoryWaypoint],
    horizon: usize,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    let dir = out.join(&sample.id);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let forecast = model.forecast(sample, &traj[..horizon])?;
    let mut paths = Vec::new();
    for (k, frame) in forecast.frames.iter().enumerate() {
        let h = k + 1;
        let gt = &sample.future_grids[k];
        let pred = voxelize_prediction(frame, &gt.spec, model.threshold);
        let (gp, pp, jp) = (
            dir.join(format!("gt_t{h}.occ4")),
            dir.join(format!("pred_t{h}.occ4")),
            dir.join(format!("points_t{h}.json")),
        );
        gt.write_file(&gp)?;
        pred.write_file(&pp)?;
        let probabilities: Vec<Vec<f64>> = (0..frame.logits.rows())
            .map(|i| softmax(frame.logits.row(i)))
            .collect();
        let labels = probabilities
            .iter()
            .map(|p| {
                p.iter()
                    .enumerate()
                    .fold((0, f64::MIN), |a, (c, &v)| if v > a.1 { (c, v) } else { a })
                    .0 as u8
            })
            .collect();
        let points = frame
            .points
            .data()
            .chunks(3)
            .map(|p| [p[0], p[1], p[2]])
            .collect();
        let blob = serde_json::to_vec(&PointDump {
            points,
            labels,
            probabilities,
        })
        .expect("dump serializes");
        write_atomic(&jp, &blob)?;
        paths.extend([gp, pp, jp]);
    }
    Ok(paths)
}

struct EvalRequest<'a> {
    checkpoint: Option<&'a Path>,
    data: Option<&'a Path>,
    split: &'a str,
    oracle: bool,
    dump: bool,
    sweep: &'a [f64],
}

fn eval(
    cfg: &ExperimentConfig,
    explicit_config: bool,
    req: &EvalRequest<'_>,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    let EvalRequest {
        checkpoint,
        data,
        split,
        oracle,
        dump,
        sweep,
    } = *req;
    let mut cfg = cfg.clone();
    let loaded = match checkpoint {
        Some(dir) if !oracle => {
            let run = load_run_config(dir)?;
            if explicit_config && model_hash(&run.model) != model_hash(&cfg.model) {
                return Err(Error::Incompatible(format!(
                    "{}: checkpoint model hash {} differs from the configured model {}",
                    dir.display(),
                    model_hash(&run.model),
                    model_hash(&cfg.model)
                )));
            }
            cfg.model = run.model;
            cfg.validate()?;
            Some(load_model(dir)?)
        }
        _ => None,
    };
    let (train, val) = load_splits(&cfg, data.or(cfg.data.root.as_deref()))?;
    let samples = match split {
        "train" => train,
        "val" => val,
        other => {
            return Err(Error::config(
                "split",
                format!("unknown split `{other}`, expected train or val"),
            ))
        }
    };
    let opts = cfg.eval_options(cfg.train.seed);
    let report = match &loaded {
        Some((model, store)) => {
            let p = ModelPredictor {
                model,
                store,
                threshold: cfg.eval.threshold,
            };
            evaluate(&p, &samples, &opts)?
        }
        None => evaluate(&OraclePredictor as &dyn Predictor, &samples, &opts)?,
    };
    print!("{}", report.to_table());
    let mut paths = write_report(&report, out)?;
    if !sweep.is_empty() {
        let Some((model, store)) = &loaded else {
            return Err(Error::config(
                "sweep",
                "threshold sweeps need a model checkpoint",
            ));
        };
        let rows = threshold_sweep(model, store, &samples, &opts, sweep)?;
        let table = sweep_table(&rows);
        print!("{table}");
        let (json, txt) = (out.join("sweep.json"), out.join("sweep.txt"));
        write_atomic(
            &json,
            &serde_json::to_vec_pretty(&rows).expect("sweep serializes"),
        )?;
        write_atomic(&txt, table.as_bytes())?;
        paths.extend([json, txt]);
    }
    if dump {
        let Some((model, store)) = &loaded else {
            return Err(Error::config(
                "dump",
                "prediction dumps need a model checkpoint",
            ));
        };
        let p = ModelPredictor {
            model,
            store,
            threshold: cfg.eval.threshold,
        };
        let h = *opts.horizons.iter().max().expect("validated horizons");
        for s in &samples {
            let traj = apply_trajectory_source(&s.trajectory, opts.traj_source, &s.id, opts.seed);
            paths.extend(dump_sample(&p, s, &traj, h, &out.join("dump"))?);
        }
    }
    Ok(paths)
}

fn forecast(
    cfg: &ExperimentConfig,
    checkpoint: &Path,
    sequence: &Path,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    let (model, store) = load_model(checkpoint)?;
    let manifest = if sequence.is_dir() {
        sequence.join("manifest.json")
    } else {
        sequence.to_path_buf()
    };
    let sample = load_occ3d_sample(&manifest)?;
    let h = cfg
        .eval
        .horizons
        .iter()
        .copied()
        .max()
        .unwrap_or(model.config.t_max)
        .min(model.config.t_max);
    if sample.trajectory.len() < h {
        return Err(Error::TrajectoryLength {
            trajectory: sample.trajectory.len(),
            horizon: h,
        });
    }
    let traj = apply_trajectory_source(
        &sample.trajectory,
        cfg.eval.traj_source,
        &sample.id,
        cfg.train.seed,
    );
    let p = ModelPredictor {
        model: &model,
        store: &store,
        threshold: cfg.eval.threshold,
    };
    let paths = dump_sample(&p, &sample, &traj, h, out)?;
    println!(
        "wrote {h} forecast frames for {} to {}",
        sample.id,
        out.join(&sample.id).display()
    );
    Ok(paths)
}

fn ablate(
    cfg: &ExperimentConfig,
    study: Study,
    seeds: &[u64],
    fixed: usize,
    data: Option<&Path>,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    let (train, val) = load_splits(cfg, data.or(cfg.data.root.as_deref()))?;
    if val.is_empty() {
        return Err(Error::config(
            "data.val_sequences",
            "ablations score the validation split, which is empty",
        ));
    }
    let table = match study {
        Study::Trajectory => trajectory_ablation(cfg, seeds, &train, &val, Some(out))?,
        Study::Ensemble => ensemble_ablation(cfg, fixed, seeds, &train, &val, Some(out))?,
    };
    print!("{}", table.to_table());
    let (json, txt) = (out.join("ablation.json"), out.join("ablation.txt"));
    write_atomic(
        &json,
        &serde_json::to_vec_pretty(&table).expect("table serializes"),
    )?;
    write_atomic(&txt, table.to_table().as_bytes())?;
    Ok(vec![json, txt])
}

fn read_grid(path: &Path) -> Result<OccupancyGrid> {
    if !path.exists() {
        return Err(Error::format(
            path,
            "missing dump field: grid file not found",
        ));
    }
    OccupancyGrid::read_file(path)
}

/// Horizons present in a sample dump directory.
fn dump_horizons(dir: &Path) -> Result<Vec<usize>> {
    let mut hs = Vec::new();
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let name = entry
            .map_err(|e| Error::io(dir, e))?
            .file_name()
            .to_string_lossy()
            .into_owned();
        if let Some(h) = name
            .strip_prefix("pred_t")
            .and_then(|r| r.strip_suffix(".occ4"))
            .and_then(|h| h.parse().ok())
        {
            hs.push(h);
        }
    }
    hs.sort_unstable();
    Ok(hs)
}

fn plot(
    cfg: &ExperimentConfig,
    horizons: Option<&[usize]>,
    inputs: &[PathBuf],
    scale: usize,
    out: &Path,
) -> Result<Vec<PathBuf>> {
    let _ = cfg;
    if scale == 0 {
        return Err(Error::config("scale", "must be at least 1"));
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut paths = Vec::new();
    let mut reports = Vec::new();
    for input in inputs {
        if !input.exists() {
            return Err(Error::io(
                input,
                std::io::Error::new(std::io::ErrorKind::NotFound, "plot input not found"),
            ));
        }
        if input.is_file() {
            let bytes = std::fs::read(input).map_err(|e| Error::io(input, e))?;
            let report: MetricReport =
                serde_json::from_slice(&bytes).map_err(|e| Error::format(input, e.to_string()))?;
            let name = input.parent().and_then(|p| p.file_name()).map_or_else(
                || "report".to_string(),
                |n| n.to_string_lossy().into_owned(),
            );
            reports.push((name, report));
            continue;
        }
        let sample_dirs: Vec<PathBuf> = if dump_horizons(input)?.is_empty() {
            let mut d: Vec<PathBuf> = std::fs::read_dir(input)
                .map_err(|e| Error::io(input, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_dir())
                .collect();
            d.sort();
            d
        } else {
            vec![input.clone()]
        };
        for dir in sample_dirs {
            let id = dir
                .file_name()
                .map_or_else(|| "sample".into(), |n| n.to_string_lossy().into_owned());
            let available = dump_horizons(&dir)?;
            let wanted: Vec<usize> = horizons.map_or_else(|| available.clone(), <[usize]>::to_vec);
            for h in wanted {
                let gt = read_grid(&dir.join(format!("gt_t{h}.occ4")))?;
                let pred = read_grid(&dir.join(format!("pred_t{h}.occ4")))?;
                let img = render_rows(&[vec![gt], vec![pred]], scale);
                let path = out.join(format!("{id}_t{h}.png"));
                save_png(&img, &path)?;
                paths.push(path);
            }
        }
    }
    if !reports.is_empty() {
        let path = out.join("curves.svg");
        write_atomic(&path, metric_curves_svg(&reports).as_bytes())?;
        paths.push(path);
    }
    println!("wrote {} files to {}", paths.len(), out.display());
    Ok(paths)
}
