//! Pre-training, fine-tuning with early stopping, and ten-fold evaluation.

use std::fmt::{self, Write as _};
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::autodiff::{adam_step, clip_global_norm, AdamConfig, AdamState, Mode, Tape};
use crate::dataset::{make_folds, DatasetError, FoldSplit, GraphDataset};
use crate::model::{
    argmax, classification_loss, forward_batch, predict, prepare_dataset, reconstruction_loss,
    structure_loss, Bound, ModelConfig, ModelError, ModelParams, PreparedGraph, ResidualMode,
};
use crate::unify::{Strategy, UnifyPlan};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("fold {fold}: {source}")]
    Fold {
        fold: usize,
        source: Box<TrainError>,
    },
    #[error("writing {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("worker pool: {0}")]
    Pool(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PretrainTask {
    Reconstruction,
    Structure,
}

impl fmt::Display for PretrainTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PretrainTask::Reconstruction => "reconstruction",
            PretrainTask::Structure => "structure",
        })
    }
}

impl FromStr for PretrainTask {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "reconstruction" => Ok(PretrainTask::Reconstruction),
            "structure" => Ok(PretrainTask::Structure),
            other => Err(format!(
                "unknown pretrain task {other:?} (expected structure or reconstruction)"
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub pretrain_tasks: Vec<PretrainTask>,
    pub pretrain_epochs: usize,
    /// Global gradient-norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Continue training on train + validation for the chosen epoch count.
    pub refit: bool,
    pub wl_iterations: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            weight_decay: 5e-4,
            epochs: 500,
            patience: 50,
            batch_size: 32,
            seed: 0,
            pretrain_tasks: Vec::new(),
            pretrain_epochs: 100,
            clip_norm: None,
            refit: true,
            wl_iterations: crate::features::DEFAULT_WL_ITERATIONS,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.patience == 0 {
            return bad("patience must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight decay {} must be non-negative", self.weight_decay));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return bad(format!("clip norm {c} must be positive"));
            }
        }
        if self.wl_iterations == 0 {
            return bad("WL iterations must be at least 1".into());
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

/// 5e-4 for the PTC family, 1e-4 otherwise.
pub fn default_learning_rate(dataset: &str) -> f64 {
    if dataset.to_ascii_uppercase().starts_with("PTC") {
        5e-4
    } else {
        1e-4
    }
}

/// Independent seed per (purpose, index) pair.
fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(stream);
    rng.set_word_pos(u128::from(index) * 16);
    rand::RngCore::next_u64(&mut rng)
}

const STREAM_INIT: u64 = 1;
const STREAM_TRAIN: u64 = 2;
const STREAM_PRETRAIN: u64 = 3;
const STREAM_FOLDS: u64 = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub test_acc: f64,
}

#[derive(Clone, Debug)]
pub struct FoldReport {
    pub fold_index: usize,
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch with the best validation accuracy (earliest on ties).
    pub chosen_epoch: usize,
    /// Test accuracy at `chosen_epoch`.
    pub test_accuracy: f64,
    /// Test accuracy after the train + validation refit, when enabled.
    pub refit_test_accuracy: Option<f64>,
    pub wall_seconds: f64,
    pub params: ModelParams,
}

impl PartialEq for FoldReport {
    /// Ignores wall time.
    fn eq(&self, other: &Self) -> bool {
        self.fold_index == other.fold_index
            && self.epochs == other.epochs
            && self.chosen_epoch == other.chosen_epoch
            && self.test_accuracy == other.test_accuracy
            && self.refit_test_accuracy == other.refit_test_accuracy
            && self.params.tensors() == other.params.tensors()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub dataset: String,
    pub strategy: Strategy,
    pub k: usize,
    pub residual: ResidualMode,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub mean_fold_seconds: f64,
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn accuracy(params: &ModelParams, graphs: &[&PreparedGraph]) -> Result<f64, ModelError> {
    if graphs.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for chunk in graphs.chunks(256) {
        let pred = predict(params, chunk)?;
        correct += pred.iter().zip(chunk).filter(|(p, g)| **p == g.label).count();
    }
    Ok(correct as f64 / graphs.len() as f64)
}

struct EpochStats {
    loss: f64,
    accuracy: f64,
}

/// One pass of mini-batch classification training over `indices`.
fn train_epoch(
    params: &mut ModelParams,
    adam: &mut AdamState,
    graphs: &[PreparedGraph],
    indices: &mut [usize],
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
    tape: &mut Tape,
) -> Result<EpochStats, TrainError> {
    indices.shuffle(rng);
    let mut loss_sum = 0.0;
    let mut correct = 0usize;
    for chunk in indices.chunks(config.batch_size) {
        let batch: Vec<&PreparedGraph> = chunk.iter().map(|&i| &graphs[i]).collect();
        tape.reset();
        let bound = Bound::new(tape, params)?;
        let out = forward_batch(tape, params, &bound, &batch, rng)?;
        let loss = classification_loss(tape, &out, &batch).map_err(ModelError::from)?;
        loss_sum += tape.value(loss).item();
        let logits = tape.value(out.logits);
        correct += batch
            .iter()
            .enumerate()
            .filter(|(r, g)| argmax(logits.row(*r)) == g.label)
            .count();
        tape.backward(loss).map_err(ModelError::from)?;
        let mut grads = bound.grads(tape, params);
        if let Some(c) = config.clip_norm {
            clip_global_norm(&mut grads, c);
        }
        adam_step(params.tensors_mut(), &grads, adam).map_err(ModelError::from)?;
    }
    let n = indices.len().max(1) as f64;
    Ok(EpochStats {
        loss: loss_sum / n,
        accuracy: correct as f64 / n,
    })
}

/// Minimizes the enabled pre-training losses over `graphs`. Returns the
/// trained parameters and the mean per-graph loss of each epoch.
pub fn pretrain(
    graphs: &[PreparedGraph],
    model: &ModelConfig,
    config: &TrainConfig,
) -> Result<(ModelParams, Vec<f64>), TrainError> {
    config.validate()?;
    let mut tasks = config.pretrain_tasks.clone();
    tasks.sort_unstable();
    tasks.dedup();
    if model.attr_dim == 0 && tasks.contains(&PretrainTask::Reconstruction) {
        log::warn!("no node attributes: dropping the reconstruction pre-training task");
        tasks.retain(|t| *t != PretrainTask::Reconstruction);
    }
    if tasks.is_empty() {
        return Err(TrainError::Config("pre-training needs at least one task".into()));
    }
    let mut params = ModelParams::init(model, derive_seed(config.seed, STREAM_INIT, u64::MAX))?;
    let mut adam = AdamState::new(config.adam(), params.tensors());
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, STREAM_PRETRAIN, 0));
    let mut order: Vec<usize> = (0..graphs.len()).collect();
    let mut tape = Tape::new(Mode::Train);
    let mut history = Vec::with_capacity(config.pretrain_epochs);
    for _ in 0..config.pretrain_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&PreparedGraph> = chunk.iter().map(|&i| &graphs[i]).collect();
            tape.reset();
            let bound = Bound::new(&mut tape, &params)?;
            let out = forward_batch(&mut tape, &params, &bound, &batch, &mut rng)?;
            let mut loss = None;
            if tasks.contains(&PretrainTask::Reconstruction) {
                loss = Some(reconstruction_loss(&mut tape, &params, &bound, &out, &batch).map_err(ModelError::from)?);
            }
            if tasks.contains(&PretrainTask::Structure) {
                if let Some(s) = structure_loss(&mut tape, &out, &batch).map_err(ModelError::from)? {
                    loss = Some(match loss {
                        Some(l) => tape.add(l, s).map_err(ModelError::from)?,
                        None => s,
                    });
                }
            }
            let Some(loss) = loss else { continue };
            total += tape.value(loss).item();
            tape.backward(loss).map_err(ModelError::from)?;
            let mut grads = bound.grads(&tape, &params);
            if let Some(c) = config.clip_norm {
                clip_global_norm(&mut grads, c);
            }
            adam_step(params.tensors_mut(), &grads, &mut adam).map_err(ModelError::from)?;
        }
        history.push(total / graphs.len().max(1) as f64);
    }
    Ok((params, history))
}

/// Trains on one split with validation-based early stopping.
pub fn finetune_fold(
    graphs: &[PreparedGraph],
    split: &FoldSplit,
    model: &ModelConfig,
    config: &TrainConfig,
    init: Option<&ModelParams>,
) -> Result<FoldReport, TrainError> {
    config.validate()?;
    let started = Instant::now();
    let fold = split.fold_index as u64;
    let mut params = match init {
        Some(p) => p.clone(),
        None => ModelParams::init(model, derive_seed(config.seed, STREAM_INIT, fold))?,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, STREAM_TRAIN, fold));

    let mut present = vec![false; model.classes];
    for &i in &split.train {
        present[graphs[i].label] = true;
    }
    if let Some(c) = present.iter().position(|p| !p) {
        log::warn!("fold {}: class {c} absent from the training split", split.fold_index);
    }

    let val: Vec<&PreparedGraph> = split.validation.iter().map(|&i| &graphs[i]).collect();
    let test: Vec<&PreparedGraph> = split.test.iter().map(|&i| &graphs[i]).collect();
    let mut train_idx = split.train.clone();
    let mut adam = AdamState::new(config.adam(), params.tensors());
    let mut tape = Tape::new(Mode::Train);

    let mut epochs = Vec::new();
    let mut best: Option<(f64, usize, ModelParams)> = None;
    for epoch in 1..=config.epochs {
        let stats = train_epoch(&mut params, &mut adam, graphs, &mut train_idx, config, &mut rng, &mut tape)?;
        let record = EpochRecord {
            epoch,
            train_loss: stats.loss,
            train_acc: stats.accuracy,
            val_acc: accuracy(&params, &val)?,
            test_acc: accuracy(&params, &test)?,
        };
        if best.as_ref().is_none_or(|(v, _, _)| record.val_acc > *v) {
            best = Some((record.val_acc, epoch, params.clone()));
        }
        epochs.push(record);
        let chosen = best.as_ref().map_or(epoch, |b| b.1);
        if epoch - chosen >= config.patience {
            break;
        }
    }
    let (_, chosen_epoch, snapshot) = best.expect("at least one epoch ran");
    let test_accuracy = epochs[chosen_epoch - 1].test_acc;

    let (final_params, refit_test_accuracy) = if config.refit {
        let mut refit = snapshot;
        let mut idx: Vec<usize> = split.train.iter().chain(&split.validation).copied().collect();
        let mut adam = AdamState::new(config.adam(), refit.tensors());
        for _ in 0..chosen_epoch {
            train_epoch(&mut refit, &mut adam, graphs, &mut idx, config, &mut rng, &mut tape)?;
        }
        let acc = accuracy(&refit, &test)?;
        (refit, Some(acc))
    } else {
        (snapshot, None)
    };

    Ok(FoldReport {
        fold_index: split.fold_index,
        epochs,
        chosen_epoch,
        test_accuracy,
        refit_test_accuracy,
        wall_seconds: started.elapsed().as_secs_f64(),
        params: final_params,
    })
}

#[derive(Clone, Debug)]
pub struct CvResult {
    pub summary: RunSummary,
    pub folds: Vec<FoldReport>,
    pub pretrain_losses: Vec<f64>,
}

/// Ten-fold cross-validation with `jobs` parallel fold workers.
pub fn run_cv(
    ds: &GraphDataset,
    plan: &UnifyPlan,
    model: &ModelConfig,
    config: &TrainConfig,
    jobs: usize,
) -> Result<CvResult, TrainError> {
    config.validate()?;
    model.validate()?;
    let graphs = prepare_dataset(ds, plan, model, config.wl_iterations)?;
    let splits = make_folds(ds, derive_seed(config.seed, STREAM_FOLDS, 0))?;

    let (init, pretrain_losses) = if config.pretrain_tasks.is_empty() {
        (None, Vec::new())
    } else {
        let (p, losses) = pretrain(&graphs, model, config)?;
        (Some(p), losses)
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| TrainError::Pool(e.to_string()))?;
    let folds: Vec<FoldReport> = pool.install(|| {
        splits
            .par_iter()
            .map(|split| {
                let r = finetune_fold(&graphs, split, model, config, init.as_ref());
                if let Ok(rep) = &r {
                    log::info!(
                        "fold {}: test {:.4} at epoch {} ({:.1}s)",
                        rep.fold_index,
                        rep.test_accuracy,
                        rep.chosen_epoch,
                        rep.wall_seconds
                    );
                }
                r.map_err(|e| TrainError::Fold {
                    fold: split.fold_index,
                    source: Box::new(e),
                })
            })
            .collect::<Result<_, _>>()
    })?;

    let accs: Vec<f64> = folds.iter().map(|f| f.test_accuracy).collect();
    let (mean_accuracy, std_accuracy) = mean_std(&accs);
    let mean_fold_seconds = folds.iter().map(|f| f.wall_seconds).sum::<f64>() / folds.len() as f64;
    Ok(CvResult {
        summary: RunSummary {
            dataset: ds.name.clone(),
            strategy: plan.strategy,
            k: plan.k,
            residual: model.residual,
            mean_accuracy,
            std_accuracy,
            mean_fold_seconds,
        },
        folds,
        pretrain_losses,
    })
}

fn write_file(path: &Path, body: &str) -> Result<(), TrainError> {
    fs::write(path, body).map_err(|source| TrainError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// `epoch,train_loss,train_acc,val_acc,test_acc`, one row per epoch.
pub fn fold_csv(report: &FoldReport) -> String {
    let mut s = String::from("epoch,train_loss,train_acc,val_acc,test_acc\n");
    for e in &report.epochs {
        let _ = writeln!(
            s,
            "{},{:.6},{:.6},{:.6},{:.6}",
            e.epoch, e.train_loss, e.train_acc, e.val_acc, e.test_acc
        );
    }
    s
}

/// Ten fold rows followed by `mean` and `std` rows. Contains no timing, so
/// identical runs give identical bytes. The refit column is empty when the
/// refit is disabled.
pub fn summary_csv(summary: &RunSummary, folds: &[FoldReport]) -> String {
    let mut s =
        String::from("dataset,strategy,k,residual,row,test_accuracy,refit_test_accuracy,chosen_epoch\n");
    let prefix = format!("{},{},{},{}", summary.dataset, summary.strategy, summary.k, summary.residual);
    let fmt = |v: Option<f64>| v.map_or_else(String::new, |v| format!("{v:.6}"));
    for f in folds {
        let _ = writeln!(
            s,
            "{prefix},fold_{},{:.6},{},{}",
            f.fold_index,
            f.test_accuracy,
            fmt(f.refit_test_accuracy),
            f.chosen_epoch
        );
    }
    let refit: Option<Vec<f64>> = folds.iter().map(|f| f.refit_test_accuracy).collect();
    let refit_stats = refit.map(|r| mean_std(&r));
    let _ = writeln!(s, "{prefix},mean,{:.6},{},", summary.mean_accuracy, fmt(refit_stats.map(|r| r.0)));
    let _ = writeln!(s, "{prefix},std,{:.6},{},", summary.std_accuracy, fmt(refit_stats.map(|r| r.1)));
    s
}

/// Wall time per fold and its mean.
pub fn timing_csv(summary: &RunSummary, folds: &[FoldReport]) -> String {
    let mut s = String::from("row,wall_seconds\n");
    for f in folds {
        let _ = writeln!(s, "fold_{},{:.3}", f.fold_index, f.wall_seconds);
    }
    let _ = writeln!(s, "mean,{:.3}", summary.mean_fold_seconds);
    s
}

/// Writes `fold_<i>.csv`, `summary.csv` and `timing.csv` into `dir`.
pub fn write_reports(result: &CvResult, dir: &Path) -> Result<(), TrainError> {
    fs::create_dir_all(dir).map_err(|source| TrainError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    for f in &result.folds {
        write_file(&dir.join(format!("fold_{}.csv", f.fold_index)), &fold_csv(f))?;
    }
    write_file(&dir.join("summary.csv"), &summary_csv(&result.summary, &result.folds))?;
    write_file(&dir.join("timing.csv"), &timing_csv(&result.summary, &result.folds))?;
    if !result.pretrain_losses.is_empty() {
        let mut s = String::from("epoch,loss\n");
        for (i, l) in result.pretrain_losses.iter().enumerate() {
            let _ = writeln!(s, "{},{l:.6}", i + 1);
        }
        write_file(&dir.join("pretrain.csv"), &s)?;
    }
    Ok(())
}
