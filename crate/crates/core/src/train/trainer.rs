use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::eval::{evaluate_embedded, DecodePath, EmbeddedSet, CAPTION_MAX_WORDS};
use super::optim::StageOptimizer;
use crate::data::{checksum_of, Dataset};
use crate::error::{Error, Result};
use crate::model::{classify_graph, greedy_caption, pool_tokens, save_checkpoint, Graph, ModelParams, ParamGroup};
use crate::objectives::batch_loss;
use crate::rng::{derive, rng};

const SHUFFLE_STREAM: u64 = 0x5348_0000;

/// Mean loss terms over the batches of one epoch, plus the validation
/// accuracy used to pick the best checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub total: f64,
    pub class: f64,
    pub sim: Option<f64>,
    pub llm: Option<f64>,
    pub val_accuracy: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Where `epoch_<k>.lbck` and the `best.lbck` link go; nothing is written when `None`.
    pub checkpoint_dir: Option<PathBuf>,
    /// Echoed into every checkpoint.
    pub run_config: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRun {
    pub epochs: Vec<EpochLoss>,
    /// 1-based epoch with the highest validation accuracy (earliest on ties).
    pub best_epoch: usize,
}

pub(crate) fn check_vocab(params: &ModelParams, dataset: &Dataset, what: &str) -> Result<()> {
    let want = checksum_of(params.vocab_hash());
    if dataset.vocab_checksum != want {
        return Err(Error::Mismatch(format!(
            "{what} vocabulary checksum {:04x} differs from the model's {want:04x}",
            dataset.vocab_checksum
        )));
    }
    Ok(())
}

fn epoch_order(seed: u64, epoch: usize, len: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng(derive(seed, SHUFFLE_STREAM + epoch as u64)));
    order
}

fn write_epoch_checkpoint(dir: &Path, epoch: usize, best: usize, params: &ModelParams, run_config: &str) -> Result<()> {
    save_checkpoint(&dir.join(format!("epoch_{epoch}.lbck")), params, run_config)?;
    let link = dir.join("best.lbck");
    let target = format!("epoch_{best}.lbck");
    if link.symlink_metadata().is_ok() {
        std::fs::remove_file(&link).map_err(|e| Error::io(&link, e))?;
    }
    #[cfg(unix)]
    std::os::unix::fs::symlink(&target, &link).map_err(|e| Error::io(&link, e))?;
    #[cfg(not(unix))]
    std::fs::copy(dir.join(&target), &link).map_err(|e| Error::io(&link, e))?;
    Ok(())
}

/// Trains the soft prompt and the head on frozen-backbone embeddings.
///
/// `train_set`/`val_set` are the encoder outputs of the datasets, which are
/// fixed because the encoder is frozen.
pub fn train_embedded(
    params: &mut ModelParams,
    cfg: &TrainConfig,
    train_set: &EmbeddedSet,
    val_set: &EmbeddedSet,
    opts: &TrainOptions,
) -> Result<TrainRun> {
    cfg.validate()?;
    if !params.is_backbone_frozen() {
        return Err(Error::Argument("bottleneck training needs a frozen backbone".into()));
    }
    if train_set.is_empty() {
        return Err(Error::Argument("training set is empty".into()));
    }
    let groups = [ParamGroup::Prompt, ParamGroup::Head];
    let mut opt = StageOptimizer::new(cfg.optimizer, cfg.lr_prompt, cfg.lr_head, params);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best = (0, f64::NEG_INFINITY);
    for epoch in 1..=cfg.epochs {
        let order = epoch_order(cfg.seed, epoch, train_set.len());
        let (mut total, mut class, mut sim, mut llm, mut batches) = (0.0, 0.0, 0.0, 0.0, 0usize);
        for idx in order.chunks(cfg.batch_size) {
            let labels: Vec<usize> = idx.iter().map(|&i| train_set.labels[i]).collect();
            let emb = train_set.gather(idx);
            let mut g = Graph::new(params, &groups);
            let loss = batch_loss(&mut g, &emb, &labels, cfg.weights, None)?;
            let value = g.tape.value(loss.total).item();
            if !value.is_finite() {
                return Err(Error::Numerical(format!("loss {value} at epoch {epoch}, batch {}", batches + 1)));
            }
            total += value;
            class += g.tape.value(loss.class).item();
            sim += loss.sim.map_or(0.0, |v| g.tape.value(v).item());
            llm += loss.llm.map_or(0.0, |v| g.tape.value(v).item());
            batches += 1;
            g.tape.backward(loss.total)?;
            let grads: Vec<_> = groups.iter().flat_map(|&gr| g.grads(gr)).collect();
            drop(g);
            opt.step(params, &grads);
        }
        let n = batches as f64;
        let val_accuracy = evaluate_embedded(params, val_set, DecodePath::Hard)?.accuracy;
        if val_accuracy > best.1 {
            best = (epoch, val_accuracy);
        }
        epochs.push(EpochLoss {
            epoch,
            total: total / n,
            class: class / n,
            sim: (cfg.weights.lambda_sim > 0.0).then_some(sim / n),
            llm: (cfg.weights.lambda_llm > 0.0).then_some(llm / n),
            val_accuracy,
        });
        if let Some(dir) = &opts.checkpoint_dir {
            write_epoch_checkpoint(dir, epoch, best.0, params, &opts.run_config)?;
        }
    }
    Ok(TrainRun { epochs, best_epoch: best.0 })
}

/// Checks vocabularies, encodes both datasets, then trains.
pub fn train(
    params: &mut ModelParams,
    cfg: &TrainConfig,
    train_data: &Dataset,
    val_data: &Dataset,
    opts: &TrainOptions,
) -> Result<TrainRun> {
    check_vocab(params, train_data, "training set")?;
    check_vocab(params, val_data, "validation set")?;
    let train_set = super::eval::embed_dataset(params, train_data, None)?;
    let val_set = super::eval::embed_dataset(params, val_data, None)?;
    train_embedded(params, cfg, &train_set, &val_set, opts)
}

/// Greedy captions of every embedded image, in index order.
pub fn caption_set(params: &ModelParams, set: &EmbeddedSet) -> Result<Vec<Vec<usize>>> {
    use rayon::prelude::*;
    let indices: Vec<usize> = (0..set.len()).collect();
    let chunks: Vec<Result<Vec<Vec<usize>>>> = indices
        .par_chunks(super::eval::EVAL_CHUNK)
        .map(|idx| greedy_caption(params, &set.gather(idx), CAPTION_MAX_WORDS))
        .collect();
    let mut out = Vec::with_capacity(set.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

/// Caption baseline: only the head trains, on the mean embedding of each
/// image's greedy caption. The soft prompt is unused.
pub fn train_caption_head(
    params: &mut ModelParams,
    cfg: &TrainConfig,
    train_set: &EmbeddedSet,
    val_set: &EmbeddedSet,
    opts: &TrainOptions,
) -> Result<TrainRun> {
    cfg.validate()?;
    let pooled = pool_tokens(params, &caption_set(params, train_set)?)?;
    let d = pooled.cols();
    let mut opt = StageOptimizer::new(cfg.optimizer, 0.0, cfg.lr_head, params);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best = (0, f64::NEG_INFINITY);
    for epoch in 1..=cfg.epochs {
        let order = epoch_order(cfg.seed, epoch, train_set.len());
        let (mut total, mut batches) = (0.0, 0usize);
        for idx in order.chunks(cfg.batch_size) {
            let labels: Vec<usize> = idx.iter().map(|&i| train_set.labels[i]).collect();
            let rows: Vec<f64> = idx.iter().flat_map(|&i| pooled.row(i).iter().copied()).collect();
            let mut g = Graph::new(params, &[ParamGroup::Head]);
            let x = g.tape.constant(crate::tensor::Tensor::new(vec![idx.len(), d], rows)?);
            let logits = classify_graph(&mut g, x)?;
            let loss = g.tape.cross_entropy(logits, &labels)?;
            let value = g.tape.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Numerical(format!("loss {value} at epoch {epoch}")));
            }
            total += value;
            batches += 1;
            g.tape.backward(loss)?;
            let grads = g.grads(ParamGroup::Head);
            drop(g);
            opt.step(params, &grads);
        }
        let val_accuracy = evaluate_embedded(params, val_set, DecodePath::Caption)?.accuracy;
        if val_accuracy > best.1 {
            best = (epoch, val_accuracy);
        }
        let mean = total / batches as f64;
        epochs.push(EpochLoss { epoch, total: mean, class: mean, sim: None, llm: None, val_accuracy });
        if let Some(dir) = &opts.checkpoint_dir {
            write_epoch_checkpoint(dir, epoch, best.0, params, &opts.run_config)?;
        }
    }
    Ok(TrainRun { epochs, best_epoch: best.0 })
}
