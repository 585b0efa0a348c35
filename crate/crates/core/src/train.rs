//! End-to-end optimisation of fusion + head, and evaluation.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::activation::softmax;
use crate::data::{
    align_bags, AlignedBag, Bag, BagLabel, DatasetManifest, FeatureTable, Split, TaskKind,
};
use crate::embedding::{pool_table, sample_mask, CompoundEmbedding, MaskMatrix};
use crate::error::{Error, Result};
use crate::heads::DEFAULT_ATTN_WIDTH;
use crate::metrics::{accuracy, auc_macro, auc_per_class, pcc, MetricReport};
use crate::model::{FusionModel, ModelSpec, Variant};
use crate::optim::{adam_step, AdamState};
use crate::params::Parameters;
use crate::rng::{self, derive_key, purpose};
use crate::tuner::argmax;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub variant: Variant,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Bags per step (classification) or tiles per step (regression).
    pub batch: usize,
    pub rho: f64,
    pub seed: u64,
    /// Unified pooled dimension.
    pub d: usize,
    /// Tuner hidden width; `None` means `N * d / 2`.
    pub tuner_hidden: Option<usize>,
    pub attn_width: usize,
}

impl TrainConfig {
    pub fn classification(variant: Variant) -> Self {
        Self {
            variant,
            learning_rate: 2e-4,
            weight_decay: 1e-5,
            epochs: 50,
            batch: 1,
            rho: 0.2,
            seed: 0,
            d: 64,
            tuner_hidden: None,
            attn_width: DEFAULT_ATTN_WIDTH,
        }
    }

    pub fn regression(variant: Variant) -> Self {
        Self {
            epochs: 20,
            batch: 256,
            ..Self::classification(variant)
        }
    }

    pub fn for_task(task: TaskKind, variant: Variant) -> Self {
        match task {
            TaskKind::Classification => Self::classification(variant),
            TaskKind::Regression => Self::regression(variant),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::ConfigInvalid(format!(
                "learning rate {} must be > 0",
                self.learning_rate
            )));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::RhoOutOfRange(self.rho));
        }
        if self.weight_decay < 0.0 || self.batch == 0 || self.d == 0 {
            return Err(Error::ConfigInvalid(
                "weight decay >= 0, batch >= 1 and d >= 1 required".to_string(),
            ));
        }
        Ok(())
    }

    pub fn model_spec(&self, data: &FusedDataset) -> ModelSpec {
        let mut spec = ModelSpec::new(
            self.variant.clone(),
            data.task,
            data.source_ids.clone(),
            data.dim,
            data.outputs,
        );
        if let Some(h) = self.tuner_hidden {
            spec.tuner_hidden = h;
        }
        spec.attn_width = self.attn_width;
        spec
    }
}

/// A bag whose tiles are already pooled and composed.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedBag {
    pub bag: Bag,
    pub split: Split,
    pub tiles: Vec<CompoundEmbedding>,
}

impl FusedBag {
    pub fn class(&self) -> Option<usize> {
        match self.bag.label {
            BagLabel::Class(c) => Some(c),
            BagLabel::Targets(_) => None,
        }
    }

    pub fn targets(&self) -> Option<&[Vec<f64>]> {
        match &self.bag.label {
            BagLabel::Targets(t) => Some(t),
            BagLabel::Class(_) => None,
        }
    }
}

/// Pooled compound embeddings for every aligned bag.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedDataset {
    pub task: TaskKind,
    pub source_ids: Vec<String>,
    pub dim: usize,
    /// Class count or target count.
    pub outputs: usize,
    pub bags: Vec<FusedBag>,
}

impl FusedDataset {
    /// Builds compounds from tables already pooled to a common dimension,
    /// using the alignment computed against those same tables.
    pub fn assemble(
        manifest: &DatasetManifest,
        pooled: &[FeatureTable],
        aligned: Vec<AlignedBag>,
    ) -> Result<Self> {
        let dim = pooled.first().map(|t| t.dim).ok_or(Error::EmptyInput)?;
        if let Some(t) = pooled.iter().find(|t| t.dim != dim) {
            return Err(Error::ShapeMismatch {
                expected: (1, dim),
                actual: (1, t.dim),
            });
        }
        let n = manifest.sources.len();
        let bags = aligned
            .into_iter()
            .map(|ab| {
                let tiles = (0..ab.bag.tiles.len())
                    .map(|k| {
                        let mut flat = Vec::with_capacity(n * dim);
                        for src_rows in &ab.rows {
                            let r = src_rows[k];
                            flat.extend(pooled[r.table].row(r.row).iter().map(|&v| v as f64));
                        }
                        CompoundEmbedding::from_flat(n, dim, flat)
                    })
                    .collect();
                FusedBag {
                    bag: ab.bag,
                    split: ab.split,
                    tiles,
                }
            })
            .collect();
        let outputs = match manifest.task_kind {
            TaskKind::Classification => manifest.class_count(),
            TaskKind::Regression => manifest.target_count(),
        };
        Ok(Self {
            task: manifest.task_kind,
            source_ids: manifest
                .sources
                .iter()
                .map(|s| s.source_id.clone())
                .collect(),
            dim,
            outputs,
            bags,
        })
    }

    /// Pools raw tables to `dim`, aligns them against the manifest and
    /// assembles the compounds.
    pub fn from_raw(manifest: &DatasetManifest, raw: &[FeatureTable], dim: usize) -> Result<Self> {
        let pooled = raw
            .iter()
            .map(|t| pool_table(t, dim))
            .collect::<Result<Vec<_>>>()?;
        let aligned = align_bags(&pooled, manifest)?;
        Self::assemble(manifest, &pooled, aligned)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &FusedBag> {
        self.bags.iter().filter(move |b| b.split == split)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    /// ACC (classification) or mean PCC (regression); `None` if undefined.
    pub metric: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: FusionModel,
    pub adam: AdamState,
    pub curve: Vec<EpochRecord>,
    pub steps: usize,
    pub epochs: usize,
}

fn tile_masks(
    model: &FusionModel,
    cfg: &TrainConfig,
    step: usize,
    count: usize,
    offset: usize,
) -> Result<Option<Vec<MaskMatrix>>> {
    if !model.spec.variant.uses_mask() {
        return Ok(None);
    }
    let shape = (model.spec.sources(), model.spec.dim);
    (0..count)
        .map(|k| {
            sample_mask(
                shape,
                cfg.rho,
                derive_key(cfg.seed, &[step as u64, (offset + k) as u64]),
            )
        })
        .collect::<Result<Vec<_>>>()
        .map(Some)
}

/// Trains a fresh model. Deterministic for a fixed `cfg`.
pub fn train(data: &FusedDataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let model = FusionModel::new(cfg.model_spec(data), cfg.seed)?;
    train_from(data, cfg, model, None, 0)
}

/// Continues training `model` (optionally with existing optimizer state)
/// from `start_epoch` up to `cfg.epochs`.
pub fn train_from(
    data: &FusedDataset,
    cfg: &TrainConfig,
    mut model: FusionModel,
    adam: Option<AdamState>,
    start_epoch: usize,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.bags.is_empty() {
        return Err(Error::EmptyInput);
    }
    if data.dim != model.spec.dim || data.source_ids != model.spec.source_ids {
        return Err(Error::ConfigInvalid(
            "dataset sources or dimension differ from the model".to_string(),
        ));
    }
    let train_idx: Vec<usize> = (0..data.bags.len())
        .filter(|&i| data.bags[i].split == Split::Train)
        .collect();
    if train_idx.is_empty() {
        return Err(Error::ConfigInvalid("no training bags".to_string()));
    }
    let mut adam = adam.unwrap_or_else(|| AdamState::new(&model));
    let mut step = adam.step as usize;
    let mut curve = Vec::new();
    let has_val = data.bags.iter().any(|b| b.split == Split::Val);

    for epoch in start_epoch..cfg.epochs {
        let record = match data.task {
            TaskKind::Classification => classification_epoch(
                data, cfg, &mut model, &mut adam, &train_idx, epoch, &mut step,
            )?,
            TaskKind::Regression => regression_epoch(
                data, cfg, &mut model, &mut adam, &train_idx, epoch, &mut step,
            )?,
        };
        curve.push(record);
        if has_val {
            let r = evaluate(&model, data, Split::Val)?;
            curve.push(EpochRecord {
                epoch,
                split: Split::Val,
                loss: r.loss,
                metric: r.acc.or(r.pcc),
            });
        }
    }
    Ok(TrainOutcome {
        model,
        adam,
        curve,
        steps: step,
        epochs: cfg.epochs,
    })
}

fn classification_epoch(
    data: &FusedDataset,
    cfg: &TrainConfig,
    model: &mut FusionModel,
    adam: &mut AdamState,
    train_idx: &[usize],
    epoch: usize,
    step: &mut usize,
) -> Result<EpochRecord> {
    let mut order = train_idx.to_vec();
    order.shuffle(&mut rng::stream(
        cfg.seed,
        purpose::SHUFFLE,
        &[epoch as u64],
    ));
    let mut loss_sum = 0.0;
    let mut preds = Vec::with_capacity(order.len());
    let mut labels = Vec::with_capacity(order.len());
    for chunk in order.chunks(cfg.batch) {
        let mut grads = model.zeroed();
        let mut batch_loss = 0.0;
        for &bi in chunk {
            let bag = &data.bags[bi];
            let label = bag
                .class()
                .ok_or(Error::ConfigInvalid("bag without class label".to_string()))?;
            let masks = tile_masks(model, cfg, *step, bag.tiles.len(), 0)?;
            let (loss, logits) =
                model.bag_loss_grad(&bag.tiles, masks.as_deref(), label, &mut grads)?;
            batch_loss += loss;
            preds.push(argmax(&logits));
            labels.push(label);
        }
        if !batch_loss.is_finite() {
            return Err(Error::NonFiniteLoss(*step));
        }
        grads.scale(1.0 / chunk.len() as f64);
        adam_step(model, &grads, adam, cfg.learning_rate, cfg.weight_decay)?;
        loss_sum += batch_loss;
        *step += 1;
    }
    Ok(EpochRecord {
        epoch,
        split: Split::Train,
        loss: loss_sum / order.len() as f64,
        metric: accuracy(&preds, &labels).ok(),
    })
}

fn regression_epoch(
    data: &FusedDataset,
    cfg: &TrainConfig,
    model: &mut FusionModel,
    adam: &mut AdamState,
    train_idx: &[usize],
    epoch: usize,
    step: &mut usize,
) -> Result<EpochRecord> {
    let mut tiles: Vec<(usize, usize)> = train_idx
        .iter()
        .flat_map(|&b| (0..data.bags[b].tiles.len()).map(move |k| (b, k)))
        .collect();
    tiles.shuffle(&mut rng::stream(
        cfg.seed,
        purpose::SHUFFLE,
        &[epoch as u64],
    ));
    let mut loss_sum = 0.0;
    let mut preds: Vec<Vec<f64>> = Vec::with_capacity(tiles.len());
    let mut targets: Vec<Vec<f64>> = Vec::with_capacity(tiles.len());
    for chunk in tiles.chunks(cfg.batch) {
        let mut grads = model.zeroed();
        let weight = 1.0 / chunk.len() as f64;
        let masks = tile_masks(model, cfg, *step, chunk.len(), 0)?;
        let mut batch_loss = 0.0;
        for (k, &(b, t)) in chunk.iter().enumerate() {
            let target = &data.bags[b]
                .targets()
                .ok_or(Error::ConfigInvalid("bag without targets".to_string()))?[t];
            let mask = masks.as_ref().map(|m| &m[k]);
            let (loss, out) =
                model.tile_loss_grad(&data.bags[b].tiles[t], mask, target, weight, &mut grads)?;
            batch_loss += loss;
            preds.push(out);
            targets.push(target.clone());
        }
        if !batch_loss.is_finite() {
            return Err(Error::NonFiniteLoss(*step));
        }
        adam_step(model, &grads, adam, cfg.learning_rate, cfg.weight_decay)?;
        loss_sum += batch_loss;
        *step += 1;
    }
    Ok(EpochRecord {
        epoch,
        split: Split::Train,
        loss: loss_sum / tiles.len() as f64,
        metric: mean_pcc(&preds, &targets).0,
    })
}

/// Mean PCC across target columns that have non-zero variance, plus the
/// per-column values.
pub fn mean_pcc(preds: &[Vec<f64>], targets: &[Vec<f64>]) -> (Option<f64>, Vec<Option<f64>>) {
    let g = targets.first().map_or(0, |t| t.len());
    let per: Vec<Option<f64>> = (0..g)
        .map(|j| {
            let p: Vec<f64> = preds.iter().map(|r| r[j]).collect();
            let t: Vec<f64> = targets.iter().map(|r| r[j]).collect();
            pcc(&p, &t).ok()
        })
        .collect();
    let valid: Vec<f64> = per.iter().flatten().copied().collect();
    let mean = if valid.is_empty() {
        None
    } else {
        Some(valid.iter().sum::<f64>() / valid.len() as f64)
    };
    (mean, per)
}

/// Per-bag or per-tile predictions on a split.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitPredictions {
    /// Classification: one logit vector per bag. Regression: one output per tile.
    pub outputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub targets: Vec<Vec<f64>>,
}

pub fn predict_split(
    model: &FusionModel,
    data: &FusedDataset,
    split: Split,
) -> Result<SplitPredictions> {
    let mut out = SplitPredictions {
        outputs: Vec::new(),
        labels: Vec::new(),
        targets: Vec::new(),
    };
    for bag in data.split(split) {
        match data.task {
            TaskKind::Classification => {
                out.outputs.push(model.predict_bag(&bag.tiles)?.outputs);
                out.labels.push(
                    bag.class()
                        .ok_or(Error::ConfigInvalid("bag without class label".to_string()))?,
                );
            }
            TaskKind::Regression => {
                let targets = bag
                    .targets()
                    .ok_or(Error::ConfigInvalid("bag without targets".to_string()))?;
                for (tile, target) in bag.tiles.iter().zip(targets) {
                    out.outputs.push(model.predict_tile(tile)?.outputs);
                    out.targets.push(target.clone());
                }
            }
        }
    }
    Ok(out)
}

/// Metrics from predictions; AUC and PCC are `None` where undefined.
pub fn report(
    method: &str,
    task: TaskKind,
    classes: usize,
    preds: &SplitPredictions,
) -> Result<MetricReport> {
    match task {
        TaskKind::Classification => {
            let n = preds.outputs.len();
            if n == 0 {
                return Err(Error::EmptyInput);
            }
            let mut loss = 0.0;
            let mut probs = Vec::with_capacity(n * classes);
            let mut hard = Vec::with_capacity(n);
            for (logits, &label) in preds.outputs.iter().zip(&preds.labels) {
                loss += crate::loss::cross_entropy(logits, label)?.0;
                probs.extend(softmax(logits));
                hard.push(argmax(logits));
            }
            let per_output = if classes > 2 {
                (0..classes)
                    .map(|c| {
                        let col: Vec<f64> = (0..n).map(|i| probs[i * classes + c]).collect();
                        let pos: Vec<bool> = preds.labels.iter().map(|&l| l == c).collect();
                        crate::metrics::auc_binary(&col, &pos).ok()
                    })
                    .collect()
            } else {
                Vec::new()
            };
            let auc = if classes > 2 {
                auc_per_class(&probs, &preds.labels, classes)
                    .ok()
                    .map(|v| v.iter().sum::<f64>() / v.len() as f64)
            } else {
                auc_macro(&probs, &preds.labels, classes).ok()
            };
            Ok(MetricReport {
                method: method.to_string(),
                n,
                loss: loss / n as f64,
                acc: Some(accuracy(&hard, &preds.labels)?),
                auc,
                pcc: None,
                per_output,
            })
        }
        TaskKind::Regression => {
            let n = preds.outputs.len();
            if n == 0 {
                return Err(Error::EmptyInput);
            }
            let mut loss = 0.0;
            for (p, t) in preds.outputs.iter().zip(&preds.targets) {
                loss += crate::loss::mse(p, t)?.0;
            }
            let (mean, per) = mean_pcc(&preds.outputs, &preds.targets);
            Ok(MetricReport {
                method: method.to_string(),
                n,
                loss: loss / n as f64,
                acc: None,
                auc: None,
                pcc: mean,
                per_output: per,
            })
        }
    }
}

/// Inference-mode metrics of `model` on `split`.
pub fn evaluate(model: &FusionModel, data: &FusedDataset, split: Split) -> Result<MetricReport> {
    if model.spec.task != data.task {
        return Err(Error::VariantTaskMismatch {
            expected: model.spec.task.as_str(),
            actual: data.task.as_str(),
        });
    }
    let preds = predict_split(model, data, split)?;
    report(
        &model.spec.variant.to_string(),
        data.task,
        data.outputs,
        &preds,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::TileRef;
    use alloc::vec;

    fn one_bag_dataset() -> FusedDataset {
        let tiles: Vec<CompoundEmbedding> = (0..3)
            .map(|k| {
                CompoundEmbedding::from_flat(
                    2,
                    4,
                    (0..8).map(|j| ((j + k) as f64 * 0.3).cos()).collect(),
                )
            })
            .collect();
        FusedDataset {
            task: TaskKind::Classification,
            source_ids: vec!["a".into(), "b".into()],
            dim: 4,
            outputs: 2,
            bags: vec![FusedBag {
                bag: Bag {
                    slide_id: "s".into(),
                    tiles: (0..3)
                        .map(|k| TileRef {
                            tile_id: k,
                            slide_id: "s".into(),
                            grid_x: k as i64,
                            grid_y: 0,
                        })
                        .collect(),
                    label: BagLabel::Class(1),
                },
                split: Split::Train,
                tiles,
            }],
        }
    }

    #[test]
    fn single_bag_loss_decreases_to_near_zero() {
        let data = one_bag_dataset();
        let mut cfg = TrainConfig::classification(Variant::Fine);
        cfg.d = 4;
        cfg.epochs = 200;
        cfg.learning_rate = 5e-2;
        cfg.rho = 0.0;
        let out = train(&data, &cfg).unwrap();
        let losses: Vec<f64> = out.curve.iter().map(|r| r.loss).collect();
        assert!(
            *losses.last().unwrap() < 1e-3,
            "final loss {}",
            losses.last().unwrap()
        );
        assert!(losses.windows(2).all(|w| w[1] <= w[0]), "{losses:?}");
    }

    #[test]
    fn rejects_bad_config() {
        let data = one_bag_dataset();
        let mut cfg = TrainConfig::classification(Variant::Fine);
        cfg.d = 4;
        cfg.learning_rate = 0.0;
        assert!(matches!(train(&data, &cfg), Err(Error::ConfigInvalid(_))));
        cfg.learning_rate = 1e-3;
        cfg.rho = 1.5;
        assert_eq!(train(&data, &cfg).unwrap_err(), Error::RhoOutOfRange(1.5));
    }

    #[test]
    fn ensemble_trains_head_only() {
        let data = one_bag_dataset();
        let mut cfg = TrainConfig::classification(Variant::Ensemble);
        cfg.d = 4;
        cfg.epochs = 3;
        let out = train(&data, &cfg).unwrap();
        assert!(out.model.tuner().is_none());
        assert!(out
            .model
            .blocks()
            .iter()
            .all(|b| b.name.starts_with("head.")));
    }
}
