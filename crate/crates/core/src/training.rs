//! Adam, early stopping and the staged schedules.

use std::collections::BTreeMap;
use std::time::Instant;

use avsr_tensor::Tensor;

use crate::audio::NoiseConfig;
use crate::data::{iterate_split, Dataset, Sample};
use crate::error::{invalid, AvsrError, Result};
use crate::model::{predictions, sequence_loss, Head, Model, Target, MFCC_MEAN, MFCC_STD, VIDEO_MEAN, VIDEO_STD};
use crate::nn::{update_running_stats, Ctx};
use crate::params::{group_of, ParamKind, ParamStore, Trainable};
use crate::pipeline::{evaluate, mfcc_stats, prepare_batch, Condition};
use crate::video::compute_norm_stats;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub step: u64,
    pub m: BTreeMap<String, Vec<f32>>,
    pub v: BTreeMap<String, Vec<f32>>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        AdamState { lr, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }
}

/// One bias-corrected Adam update. Parameters without a gradient entry are untouched.
pub fn adam_step(store: &mut ParamStore<f32>, grads: &BTreeMap<String, Vec<f32>>, state: &mut AdamState) -> Result<()> {
    for (name, g) in grads {
        if let Some(bad) = g.iter().position(|v| !v.is_finite()) {
            return Err(invalid("gradient", format!("non-finite gradient for {name} at element {bad}")));
        }
        let p = store.get(name).ok_or_else(|| AvsrError::Missing(format!("parameter {name}")))?;
        if p.tensor.len() != g.len() {
            return Err(invalid("gradient", format!("{name}: {} values for {} parameters", g.len(), p.tensor.len())));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    for (name, g) in grads {
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        let p = store.get_mut(name).expect("checked above");
        for (((w, &g), m), v) in p.tensor.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
            let g = g as f64;
            let mn = BETA1 * *m as f64 + (1.0 - BETA1) * g;
            let vn = BETA2 * *v as f64 + (1.0 - BETA2) * g * g;
            *m = mn as f32;
            *v = vn as f32;
            let step = state.lr * (mn / c1) / ((vn / c2).sqrt() + ADAM_EPS);
            *w = (*w as f64 - step) as f32;
        }
    }
    Ok(())
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`; returns the norm before scaling.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Vec<f32>>, max_norm: f64) -> f64 {
    let norm = grads.values().flatten().map(|&g| (g as f64) * (g as f64)).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        grads.values_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Continue,
    Stop,
}

/// Stop once the best CR has not strictly improved during the last `delay` epochs.
pub fn early_stop_check(history: &[f64], delay: usize) -> Decision {
    let delay = delay.max(1);
    let Some(best_at) = best_epoch(history) else { return Decision::Continue };
    if history.len() - 1 - best_at >= delay {
        Decision::Stop
    } else {
        Decision::Continue
    }
}

/// Index of the first occurrence of the maximum.
pub fn best_epoch(history: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in history.iter().enumerate() {
        if best.is_none_or(|b| v > history[b]) {
            best = Some(i);
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stop {
    Fixed(usize),
    /// Early stopping with a hard cap on epochs.
    Early { delay: usize, max_epochs: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageSpec {
    pub name: String,
    pub head: Head,
    pub trainable: Vec<String>,
    pub batch: usize,
    pub lr: f64,
    pub stop: Stop,
}

impl StageSpec {
    pub fn mask(&self) -> Trainable {
        Trainable::groups(self.trainable.iter().cloned())
    }
}

/// Knobs shared by all schedules.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub seed: u64,
    pub batch: usize,
    pub fusion_batch: usize,
    pub pretrain_lr: f64,
    pub stream_lr: f64,
    pub fusion_head_lr: f64,
    pub joint_lr: f64,
    pub fixed_epochs: usize,
    pub delay: usize,
    pub max_epochs: usize,
    pub clip_norm: f64,
    pub babble_voices: usize,
    pub snr_grid: Vec<f64>,
    pub augment: bool,
    pub eval_batch: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            seed: 1,
            batch: 36,
            fusion_batch: 18,
            pretrain_lr: 3e-4,
            stream_lr: 3e-4,
            fusion_head_lr: 3e-4,
            joint_lr: 1e-4,
            fixed_epochs: 5,
            delay: 5,
            max_epochs: 100,
            clip_norm: 5.0,
            babble_voices: 6,
            snr_grid: crate::audio::PAPER_SNR_GRID.to_vec(),
            augment: true,
            eval_batch: 36,
        }
    }
}

impl TrainSettings {
    fn early(&self) -> Stop {
        Stop::Early { delay: self.delay, max_epochs: self.max_epochs }
    }

    pub fn noise(&self) -> Result<NoiseConfig> {
        NoiseConfig::new(self.snr_grid.clone(), self.babble_voices, self.seed)
    }
}

/// Stages for `target`:
/// audio/video: temporal-conv pretraining, BGRU head with frozen features, joint fine-tuning;
/// av: fusion BGRU with frozen streams, then everything jointly;
/// mfcc: a single stage.
pub fn schedule(model: &Model, s: &TrainSettings) -> Vec<StageSpec> {
    let stage = |name: &str, head, trainable: Vec<String>, batch, lr, stop| StageSpec {
        name: name.to_string(),
        head,
        trainable,
        batch,
        lr,
        stop,
    };
    match model.target {
        Target::Audio | Target::Video => {
            let st = model.single_stream().expect("single stream");
            let mut pre = st.feature_groups();
            pre.push(st.tcn_group());
            let mut all = st.embedding_groups();
            all.push(st.head_group());
            vec![
                stage("pretrain", Head::TemporalConv, pre, s.batch, s.pretrain_lr, s.early()),
                stage("backend", Head::Recurrent, vec![format!("{}.bgru", st.kind.prefix()), st.head_group()], s.batch, s.stream_lr, Stop::Fixed(s.fixed_epochs)),
                stage("end_to_end", Head::Recurrent, all, s.batch, s.stream_lr, s.early()),
            ]
        }
        Target::Av => {
            let fusion = vec!["fusion.bgru".to_string(), "fusion.head".to_string()];
            let mut all = fusion.clone();
            for st in [&model.audio, &model.visual].into_iter().flatten() {
                all.extend(st.embedding_groups());
            }
            vec![
                stage("fusion", Head::Recurrent, fusion, s.batch, s.fusion_head_lr, Stop::Fixed(s.fixed_epochs)),
                stage("joint", Head::Recurrent, all, s.fusion_batch, s.joint_lr, s.early()),
            ]
        }
        Target::Mfcc => vec![stage(
            "mfcc",
            Head::Recurrent,
            vec!["mfcc.bgru".to_string(), "mfcc.head".to_string()],
            s.batch,
            s.stream_lr,
            s.early(),
        )],
    }
}

/// Fills the normalisation buffers from the training split.
pub fn fit_normalizers(model: &Model, store: &mut ParamStore<f32>, train: &[Sample]) -> Result<()> {
    if model.visual.is_some() {
        let stats = compute_norm_stats(train.iter().map(|s| &s.video))?;
        store.set(VIDEO_MEAN, Tensor::scalar(stats.mean as f32))?;
        store.set(VIDEO_STD, Tensor::scalar(stats.std as f32))?;
    }
    if model.mfcc_bgru.is_some() {
        let (mean, std) = mfcc_stats(model, train)?;
        let n = mean.len();
        store.set(MFCC_MEAN, Tensor::new(vec![n], mean)?)?;
        store.set(MFCC_STD, Tensor::new(vec![n], std)?)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub stage: String,
    pub epoch: usize,
    pub train_loss: f64,
    pub train_cr: f64,
    pub val_cr: f64,
    pub wall_seconds: f64,
}

pub const METRICS_HEADER: &str = "stage,epoch,train_loss,train_cr,val_cr,wall_seconds";

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in rows {
        s += &format!("{},{},{:.6},{:.6},{:.6},{:.3}\n", r.stage, r.epoch, r.train_loss, r.train_cr, r.val_cr, r.wall_seconds);
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub loss: f64,
    pub train_cr: f64,
    pub samples: usize,
    /// Batches whose gradient norm exceeded the clip threshold.
    pub clipped: usize,
}

/// One pass over the shuffled training split.
pub fn train_epoch(
    model: &Model,
    store: &mut ParamStore<f32>,
    train: &[Sample],
    stage: &StageSpec,
    stage_index: usize,
    epoch: usize,
    settings: &TrainSettings,
    adam: &mut AdamState,
) -> Result<EpochStats> {
    if train.is_empty() {
        return Err(invalid("train split", "empty"));
    }
    let seed = settings.seed;
    let batches = iterate_split(train.len(), stage.batch, Some(crate::data::derive_seed(seed, &[1, stage_index as u64, epoch as u64])))?;
    let mask = stage.mask();
    let noise = settings.noise()?;
    let (mut loss_sum, mut correct, mut clipped) = (0.0, 0usize, 0usize);
    for idx in &batches {
        let refs: Vec<&Sample> = idx.iter().map(|&i| &train[i]).collect();
        let labels: Vec<usize> = refs.iter().map(|s| s.class).collect();
        let cond = if settings.augment {
            Condition::Train { seed, path: vec![2, stage_index as u64, epoch as u64], noise: noise.clone() }
        } else {
            Condition::clean()
        };
        let inputs = prepare_batch(model, store, &refs, idx, &cond)?;
        let mut ctx = Ctx::new(store, true, &mask);
        let logits = model.forward(&mut ctx, &inputs, stage.head)?;
        let (loss, probs) = sequence_loss(&mut ctx, logits, &labels)?;
        let lv = ctx.tape.value(loss).item() as f64;
        if !lv.is_finite() {
            return Err(AvsrError::Divergence { stage: stage.name.clone(), epoch, detail: format!("loss is {lv}") });
        }
        ctx.tape.backward(loss)?;
        let rec = ctx.finish();
        let mut grads = BTreeMap::new();
        for (name, &v) in &rec.leaves {
            if let Some(g) = rec.tape.grad(v) {
                grads.insert(name.clone(), g.to_vec());
            }
        }
        if clip_global_norm(&mut grads, settings.clip_norm) > settings.clip_norm {
            clipped += 1;
        }
        adam_step(store, &grads, adam).map_err(|e| AvsrError::Divergence {
            stage: stage.name.clone(),
            epoch,
            detail: e.to_string(),
        })?;
        for (prefix, st) in &rec.bn_stats {
            update_running_stats(store, prefix, &st.mean, &st.var, st.count)?;
        }
        loss_sum += lv * refs.len() as f64;
        correct += predictions(&probs, refs.len()).iter().zip(&labels).filter(|((p, _), &l)| *p == l).count();
    }
    Ok(EpochStats {
        loss: loss_sum / train.len() as f64,
        train_cr: correct as f64 / train.len() as f64,
        samples: train.len(),
        clipped,
    })
}

/// Progress through a schedule; everything needed to resume bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct RunState {
    pub stage: usize,
    /// Epochs completed in the current stage.
    pub epoch: usize,
    pub history: Vec<f64>,
    pub best: Option<ParamStore<f32>>,
    pub adam: AdamState,
    pub metrics: Vec<MetricsRow>,
    pub done: bool,
}

impl RunState {
    pub fn fresh() -> Self {
        RunState { stage: 0, epoch: 0, history: Vec::new(), best: None, adam: AdamState::new(0.0), metrics: Vec::new(), done: false }
    }
}

/// Hashes taken around each stage, for checking freeze masks.
#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub name: String,
    pub epochs: usize,
    pub frozen_before: String,
    pub frozen_after: String,
}

fn frozen_hash(store: &ParamStore<f32>, stage: &StageSpec) -> String {
    store.hash_where(|g| !stage.trainable.iter().any(|t| t == g))
}

/// Runs (or resumes) a schedule. `on_epoch` sees the store and state after every epoch.
pub fn run_schedule(
    model: &Model,
    store: &mut ParamStore<f32>,
    data: &Dataset,
    stages: &[StageSpec],
    settings: &TrainSettings,
    state: &mut RunState,
    on_epoch: &mut dyn FnMut(&ParamStore<f32>, &RunState) -> Result<()>,
) -> Result<Vec<StageReport>> {
    if stages.is_empty() {
        return Err(invalid("schedule", "no stages"));
    }
    for st in stages {
        if let Some(g) = st.trainable.iter().find(|g| !store.iter().any(|(n, p)| p.kind == ParamKind::Weight && group_of(n) == g.as_str())) {
            return Err(invalid("schedule", format!("stage '{}' trains unknown group '{g}'", st.name)));
        }
    }
    let mut reports = Vec::new();
    while !state.done {
        let si = state.stage;
        let stage = &stages[si];
        if state.epoch == 0 {
            state.adam = AdamState::new(stage.lr);
            state.history.clear();
            state.best = None;
        }
        let before = frozen_hash(store, stage);
        let start_epoch = state.epoch;
        loop {
            let epoch = state.epoch + 1;
            let t0 = Instant::now();
            let stats = train_epoch(model, store, &data.train, stage, si, epoch, settings, &mut state.adam)?;
            let val = evaluate(model, store, &data.val, stage.head, &Condition::clean(), settings.eval_batch)?.cr;
            if stats.clipped > 0 {
                eprintln!("[{}] epoch {epoch}: gradient clipping active in {} batches", stage.name, stats.clipped);
            }
            state.epoch = epoch;
            state.history.push(val);
            if best_epoch(&state.history) == Some(state.history.len() - 1) {
                state.best = Some(store.clone());
            }
            state.metrics.push(MetricsRow {
                stage: format!("{}.{}", model.target, stage.name),
                epoch,
                train_loss: stats.loss,
                train_cr: stats.train_cr,
                val_cr: val,
                wall_seconds: t0.elapsed().as_secs_f64(),
            });
            let finished = match stage.stop {
                Stop::Fixed(n) => epoch >= n,
                Stop::Early { delay, max_epochs } => epoch >= max_epochs || early_stop_check(&state.history, delay) == Decision::Stop,
            };
            if finished {
                if matches!(stage.stop, Stop::Early { .. }) {
                    if let Some(best) = state.best.take() {
                        *store = best;
                    }
                }
                reports.push(StageReport {
                    name: stage.name.clone(),
                    epochs: epoch - start_epoch,
                    frozen_before: before.clone(),
                    frozen_after: frozen_hash(store, stage),
                });
                state.best = None;
                state.history.clear();
                state.epoch = 0;
                state.stage += 1;
                state.done = state.stage == stages.len();
                on_epoch(store, state)?;
                break;
            }
            on_epoch(store, state)?;
        }
    }
    Ok(reports)
}
