use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use super::{derive_seed, save_checkpoint, ModelState, OptimConfig, STREAM_SHUFFLE};
use crate::data::{assemble_batch, shuffled_indices, Dataset, SkeletonSequence};
use crate::error::{Error, Result};
use crate::hypergraph::Adjacency;
use crate::losses::{Betas, LossBundle};
use crate::numerics::Tensor;

pub const METRICS_HEADER: &str = "epoch,ce,rec1,rec2,quant,total,train_acc,val_acc,lr";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOptions {
    pub optim: OptimConfig,
    pub betas: Betas,
    pub batch_size: usize,
    /// Save a checkpoint every this many epochs; 0 keeps only the final one.
    pub checkpoint_every: usize,
    /// Stop once training accuracy reaches this value.
    pub target_train_accuracy: Option<f64>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            optim: OptimConfig::default(),
            betas: Betas::default(),
            batch_size: 64,
            checkpoint_every: 10,
            target_train_accuracy: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    /// 1-based count of completed epochs.
    pub epoch: usize,
    pub losses: LossBundle,
    pub train_acc: f64,
    pub val_acc: Option<f64>,
    pub lr: f64,
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        let l = &self.losses;
        let val = self.val_acc.map_or(String::new(), |v| v.to_string());
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.epoch, l.ce, l.rec1, l.rec2, l.quant, l.total, self.train_acc, val, self.lr
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalMetrics {
    pub top1: f64,
    /// `None` for classes absent from the evaluated set.
    pub per_class: Vec<Option<f64>>,
    pub class_counts: Vec<usize>,
    /// Sample-weighted mean of every loss component.
    pub losses: LossBundle,
    pub predictions: Vec<usize>,
    pub probs: Vec<Vec<f64>>,
    pub embeddings: Vec<Vec<f64>>,
}

/// Top-1 and per-class accuracy of `predictions` against `labels`.
pub fn accuracy(predictions: &[usize], labels: &[usize], classes: usize) -> (f64, Vec<Option<f64>>, Vec<usize>) {
    let mut counts = vec![0usize; classes];
    let mut hits = vec![0usize; classes];
    for (&p, &l) in predictions.iter().zip(labels) {
        counts[l] += 1;
        hits[l] += usize::from(p == l);
    }
    let correct: usize = hits.iter().sum();
    let per_class = counts
        .iter()
        .zip(&hits)
        .map(|(&c, &h)| (c > 0).then(|| h as f64 / c as f64))
        .collect();
    (correct as f64 / labels.len().max(1) as f64, per_class, counts)
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |best, (i, &v)| if v > best.1 { (i, v) } else { best },
        )
        .0
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let w = t.shape()[1];
    t.data().chunks(w).map(<[f64]>::to_vec).collect()
}

/// Batched inference over `samples` with argmax-of-softmax predictions.
pub fn evaluate(
    state: &ModelState,
    samples: &[SkeletonSequence],
    adjacency: &Adjacency,
    batch_size: usize,
    betas: Betas,
) -> Result<EvalMetrics> {
    if samples.is_empty() {
        return Err(Error::Argument("cannot evaluate an empty dataset".into()));
    }
    if batch_size == 0 {
        return Err(Error::Argument("batch_size must be >= 1".into()));
    }
    let chunks: Vec<&[SkeletonSequence]> = samples.chunks(batch_size).collect();
    let run = |chunk: &&[SkeletonSequence]| -> Result<(Tensor, Tensor, LossBundle)> {
        let refs: Vec<&SkeletonSequence> = chunk.iter().collect();
        state.predict(&assemble_batch(&refs, adjacency)?, betas)
    };
    #[cfg(feature = "parallel")]
    let results: Vec<Result<_>> = chunks.par_iter().map(run).collect();
    #[cfg(not(feature = "parallel"))]
    let results: Vec<Result<_>> = chunks.iter().map(run).collect();

    let mut probs = Vec::with_capacity(samples.len());
    let mut embeddings = Vec::with_capacity(samples.len());
    let mut sums = [0.0; 4];
    for (chunk, r) in chunks.iter().zip(results) {
        let (p, e, l) = r?;
        let w = chunk.len() as f64;
        for (s, v) in sums.iter_mut().zip([l.ce, l.rec1, l.rec2, l.quant]) {
            *s += w * v;
        }
        probs.extend(rows(&p));
        embeddings.extend(rows(&e));
    }
    let n = samples.len() as f64;
    let losses = LossBundle::new(sums[0] / n, sums[1] / n, sums[2] / n, sums[3] / n, betas)?;
    let predictions: Vec<usize> = probs.iter().map(|r| argmax(r)).collect();
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let (top1, per_class, class_counts) = accuracy(&predictions, &labels, state.config.classes);
    Ok(EvalMetrics {
        top1,
        per_class,
        class_counts,
        losses,
        predictions,
        probs,
        embeddings,
    })
}

/// One shuffled pass over `train`; returns sample-weighted mean losses and
/// the learning rate used.
pub fn train_epoch(
    state: &mut ModelState,
    train: &[SkeletonSequence],
    adjacency: &Adjacency,
    opts: &TrainOptions,
) -> Result<(LossBundle, f64)> {
    if train.is_empty() || opts.batch_size == 0 {
        return Err(Error::Argument("training needs samples and batch_size >= 1".into()));
    }
    let lr = opts.optim.lr_at(state.epoch);
    let order = shuffled_indices(train.len(), derive_seed(state.seed, STREAM_SHUFFLE, state.epoch as u64));
    let mut sums = [0.0; 4];
    for idx in order.chunks(opts.batch_size) {
        let refs: Vec<&SkeletonSequence> = idx.iter().map(|&i| &train[i]).collect();
        let batch = assemble_batch(&refs, adjacency)?;
        let l = state.train_step(&batch, lr, &opts.optim, opts.betas)?;
        let w = idx.len() as f64;
        for (s, v) in sums.iter_mut().zip([l.ce, l.rec1, l.rec2, l.quant]) {
            *s += w * v;
        }
    }
    state.end_epoch();
    let n = train.len() as f64;
    Ok((
        LossBundle::new(sums[0] / n, sums[1] / n, sums[2] / n, sums[3] / n, opts.betas)?,
        lr,
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub epochs: Vec<EpochMetrics>,
    pub reached_target: bool,
}

/// Trains from `state.epoch` up to `opts.optim.epochs`. With `out_dir`,
/// appends to `metrics.csv` and writes checkpoints carrying `run_config`.
pub fn run_training(
    state: &mut ModelState,
    data: &Dataset,
    opts: &TrainOptions,
    out_dir: Option<&Path>,
    run_config: &serde_json::Value,
) -> Result<TrainSummary> {
    opts.optim.validate()?;
    opts.betas.validate()?;
    if data.layout != state.config.layout {
        return Err(Error::Argument(format!(
            "dataset layout {} differs from model layout {}",
            data.layout, state.config.layout
        )));
    }
    let adjacency = data.layout.adjacency();
    let mut metrics_file = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let path = dir.join("metrics.csv");
            let fresh = state.epoch == 0 || !path.exists();
            let mut f = OpenOptions::new()
                .create(true)
                .write(true)
                .append(!fresh)
                .truncate(fresh)
                .open(&path)?;
            if fresh {
                writeln!(f, "{METRICS_HEADER}")?;
            }
            Some(f)
        }
        None => None,
    };
    let mut summary = TrainSummary {
        epochs: Vec::new(),
        reached_target: false,
    };
    while state.epoch < opts.optim.epochs {
        let (losses, lr) = train_epoch(state, &data.train, &adjacency, opts)?;
        let train_acc = evaluate(state, &data.train, &adjacency, opts.batch_size, opts.betas)?.top1;
        let val_acc = if data.val.is_empty() {
            None
        } else {
            Some(evaluate(state, &data.val, &adjacency, opts.batch_size, opts.betas)?.top1)
        };
        let row = EpochMetrics {
            epoch: state.epoch,
            losses,
            train_acc,
            val_acc,
            lr,
        };
        log::info!(
            "epoch {} loss {:.5} ce {:.5} train_acc {:.4}{}",
            row.epoch,
            losses.total,
            losses.ce,
            train_acc,
            val_acc.map_or(String::new(), |v| format!(" val_acc {v:.4}"))
        );
        if let Some(f) = metrics_file.as_mut() {
            writeln!(f, "{}", row.csv_row())?;
            f.flush()?;
        }
        summary.epochs.push(row);
        if let (Some(dir), true) = (
            out_dir,
            opts.checkpoint_every > 0 && state.epoch.is_multiple_of(opts.checkpoint_every),
        ) {
            save_checkpoint(
                state,
                run_config,
                &dir.join(format!("checkpoint_epoch{:04}.bin", state.epoch)),
            )?;
        }
        if opts.target_train_accuracy.is_some_and(|t| train_acc >= t) {
            summary.reached_target = true;
            break;
        }
    }
    if let Some(dir) = out_dir {
        save_checkpoint(state, run_config, &dir.join("final.bin"))?;
    }
    Ok(summary)
}
