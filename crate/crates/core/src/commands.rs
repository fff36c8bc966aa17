//! The four top-level commands, shared by the binary and the acceptance tests.

use std::fs;
use std::path::{Path, PathBuf};

use crate::checkpoint::{self, Checkpoint};
use crate::config::RunConfig;
use crate::data::{generate_dataset, load_dataset, read_manifest, Dataset, Split};
use crate::error::{invalid, AvsrError, Result};
use crate::model::{Head, Model, Target, VIDEO_MEAN};
use crate::params::ParamStore;
use crate::pipeline::{evaluate, Condition, EvalReport};
use crate::training::{fit_normalizers, metrics_csv, run_schedule, schedule, MetricsRow, RunState, StageReport};

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| AvsrError::io(p, e))
}

fn write(p: &Path, s: &str) -> Result<()> {
    fs::write(p, s).map_err(|e| AvsrError::io(p, e))
}

/// Generates the synthetic dataset; returns the manifest path and fingerprint.
pub fn gen_data(cfg: &RunConfig) -> Result<(PathBuf, String)> {
    cfg.synth.validate()?;
    mkdir(&cfg.data_dir)?;
    generate_dataset(&cfg.synth, &cfg.data_dir)
}

pub fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    let (manifest, warnings) = read_manifest(&cfg.manifest_path())?;
    for w in warnings {
        eprintln!("{w}");
    }
    let ds = load_dataset(&manifest)?;
    if ds.classes.len() != cfg.model.n_classes {
        return Err(invalid(
            "dataset",
            format!("manifest has {} labels but n_classes = {}", ds.classes.len(), cfg.model.n_classes),
        ));
    }
    Ok(ds)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub stages: Vec<StageReport>,
    pub store: ParamStore<f32>,
}

pub fn metrics_path(cfg: &RunConfig, target: Target) -> PathBuf {
    cfg.out_dir.join(format!("{target}_metrics.csv"))
}

/// Reads a finished checkpoint for `target` and checks it matches the config.
pub fn load_trained(cfg: &RunConfig, target: Target, path: &Path) -> Result<Checkpoint> {
    if !path.is_file() {
        return Err(AvsrError::Missing(format!("{target} checkpoint {}", path.display())));
    }
    let ck = checkpoint::load(path)?;
    if ck.target != target.as_str() {
        return Err(invalid("checkpoint", format!("{} holds a '{}' model, expected '{target}'", path.display(), ck.target)));
    }
    if ck.fingerprint != cfg.model.fingerprint(target) {
        return Err(invalid("checkpoint", format!("{}: config fingerprint mismatch", path.display())));
    }
    Ok(ck)
}

/// Wall times survive a resume through the metrics CSV already on disk.
fn recover_wall_times(rows: &mut [MetricsRow], csv: &Path) {
    let Ok(text) = fs::read_to_string(csv) else { return };
    for line in text.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            continue;
        }
        if let Some(r) = rows.iter_mut().find(|r| r.stage == f[0] && r.epoch.to_string() == f[1]) {
            r.wall_seconds = f[5].parse().unwrap_or(0.0);
        }
    }
}

/// Runs the staged schedule for `target`, resuming from `resume` if given.
pub fn train(cfg: &RunConfig, target: Target, resume: Option<&Path>) -> Result<TrainOutcome> {
    let model = Model::new(target, &cfg.model)?;
    let fingerprint = cfg.model.fingerprint(target);
    let ck_path = cfg.checkpoint_for(target);
    let metrics = metrics_path(cfg, target);
    // Stream checkpoints are checked before any data is touched.
    let streams = if target == Target::Av {
        let missing: Vec<String> = [Target::Audio, Target::Video]
            .into_iter()
            .filter(|t| !cfg.checkpoint_for(*t).is_file())
            .map(|t| format!("{t} ({})", cfg.checkpoint_for(t).display()))
            .collect();
        if !missing.is_empty() {
            return Err(AvsrError::Missing(format!(
                "stream checkpoints needed to initialise the audiovisual model: {}; run `train --target audio` and `train --target video` first",
                missing.join(", ")
            )));
        }
        Some((load_trained(cfg, Target::Audio, &cfg.checkpoint_for(Target::Audio))?, load_trained(cfg, Target::Video, &cfg.checkpoint_for(Target::Video))?))
    } else {
        None
    };
    let data = load_data(cfg)?;
    mkdir(&cfg.out_dir)?;
    let (mut store, mut state) = match resume {
        Some(p) => {
            let ck = checkpoint::load(p)?;
            if ck.target != target.as_str() || ck.fingerprint != fingerprint {
                return Err(invalid("checkpoint", format!("{} does not match target '{target}' and this config", p.display())));
            }
            if ck.seed != cfg.seed {
                return Err(invalid("checkpoint", format!("{} was trained with seed {}, config says {}", p.display(), ck.seed, cfg.seed)));
            }
            let mut state = ck.state;
            recover_wall_times(&mut state.metrics, &metrics);
            (ck.params, state)
        }
        None => {
            let mut store = model.init(cfg.seed)?;
            fit_normalizers(&model, &mut store, &data.train)?;
            if let Some((a, v)) = &streams {
                let sa = model.audio.as_ref().expect("av has audio").embedding_groups();
                let mut sv = model.visual.as_ref().expect("av has video").embedding_groups();
                sv.push(crate::params::group_of(VIDEO_MEAN).to_string());
                store.copy_groups_from(&a.params, &sa.iter().map(String::as_str).collect::<Vec<_>>())?;
                store.copy_groups_from(&v.params, &sv.iter().map(String::as_str).collect::<Vec<_>>())?;
            }
            (store, RunState::fresh())
        }
    };
    let stages = schedule(&model, &cfg.train);
    let mut save = |store: &ParamStore<f32>, state: &RunState| -> Result<()> {
        let ck = Checkpoint { fingerprint: fingerprint.clone(), target: target.to_string(), seed: cfg.seed, params: store.clone(), state: state.clone() };
        checkpoint::save(&ck, &ck_path)?;
        write(&metrics, &metrics_csv(&state.metrics))?;
        if let Some(r) = state.metrics.last() {
            eprintln!("{} epoch {}: loss {:.4} train_cr {:.4} val_cr {:.4} ({:.1}s)", r.stage, r.epoch, r.train_loss, r.train_cr, r.val_cr, r.wall_seconds);
        }
        Ok(())
    };
    let reports = if state.done { Vec::new() } else { run_schedule(&model, &mut store, &data, &stages, &cfg.train, &mut state, &mut save)? };
    Ok(TrainOutcome { checkpoint: ck_path, metrics, stages: reports, store })
}

fn snr_tag(snr: Option<f64>) -> String {
    snr.map_or("clean".to_string(), |s| format!("{s}"))
}

/// Evaluates a finished checkpoint on `split`, writing a predictions CSV.
pub fn eval(cfg: &RunConfig, target: Target, ck_path: &Path, split: Split, snr: Option<f64>) -> Result<(EvalReport, PathBuf)> {
    let ck = load_trained(cfg, target, ck_path)?;
    let data = load_data(cfg)?;
    let model = Model::new(target, &cfg.model)?;
    let report = eval_loaded(cfg, &model, &ck.params, &data, split, snr)?;
    mkdir(&cfg.out_dir)?;
    let path = cfg.out_dir.join(format!("predictions_{target}_{}_{}.csv", split.as_str(), snr_tag(snr)));
    let mut s = String::from("id,true,predicted,confidence\n");
    for p in &report.predictions {
        s += &format!("{},{},{},{:.6}\n", p.id, data.classes[p.truth], data.classes[p.predicted], p.confidence);
    }
    write(&path, &s)?;
    Ok((report, path))
}

pub fn eval_loaded(cfg: &RunConfig, model: &Model, store: &ParamStore<f32>, data: &Dataset, split: Split, snr: Option<f64>) -> Result<EvalReport> {
    let cond = Condition::Eval { snr, noise_seed: cfg.noise_seed, voices: cfg.train.babble_voices };
    evaluate(model, store, data.split(split), Head::Recurrent, &cond, cfg.train.eval_batch)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub snr: Option<f64>,
    pub model: Target,
    pub cr: f64,
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("snr_db,model,cr\n");
    for r in rows {
        s += &format!("{},{},{:.6}\n", snr_tag(r.snr), r.model, r.cr);
    }
    s
}

/// Test-split CR of each model at clean and every grid SNR, with paired noise.
pub fn sweep_snr(cfg: &RunConfig, models: &[(Target, PathBuf)]) -> Result<(Vec<SweepRow>, PathBuf)> {
    if models.is_empty() {
        return Err(invalid("sweep", "no models given"));
    }
    let loaded = models.iter().map(|(t, p)| Ok((*t, load_trained(cfg, *t, p)?))).collect::<Result<Vec<_>>>()?;
    let data = load_data(cfg)?;
    let mut grid: Vec<Option<f64>> = cfg.train.snr_grid.iter().copied().map(Some).collect();
    grid.push(None);
    let mut rows = Vec::new();
    for (target, ck) in &loaded {
        let model = Model::new(*target, &cfg.model)?;
        for &snr in &grid {
            let cr = eval_loaded(cfg, &model, &ck.params, &data, Split::Test, snr)?.cr;
            eprintln!("sweep {target} snr {}: cr {cr:.4}", snr_tag(snr));
            rows.push(SweepRow { snr, model: *target, cr });
        }
    }
    mkdir(&cfg.out_dir)?;
    let path = cfg.out_dir.join("sweep.csv");
    write(&path, &sweep_csv(&rows))?;
    Ok((rows, path))
}
