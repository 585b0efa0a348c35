//! Central finite-difference verification of the analytic gradients.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::TaskKind;
use crate::embedding::{sample_mask, CompoundEmbedding, MaskMatrix};
use crate::error::{Error, Result};
use crate::model::{Fusion, FusionModel, ModelSpec, Variant};
use crate::params::Parameters;
use crate::rng::{self, derive_key, purpose};

/// Gradients smaller than this are compared on an absolute scale.
pub const GRAD_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, GRAD_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

/// One training example for gradient checking.
#[derive(Debug, Clone)]
pub enum GradSample {
    Bag {
        tiles: Vec<CompoundEmbedding>,
        masks: Option<Vec<MaskMatrix>>,
        label: usize,
    },
    Tiles {
        tiles: Vec<CompoundEmbedding>,
        masks: Option<Vec<MaskMatrix>>,
        targets: Vec<Vec<f64>>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockReport {
    pub name: String,
    pub len: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub blocks: Vec<BlockReport>,
    /// Blocks excluded because no gradient is defined for them.
    pub skipped: Vec<String>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.blocks
            .iter()
            .map(|b| b.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&BlockReport> {
        self.blocks
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// Loss and analytic gradient of `model` on `sample`.
pub fn loss_and_grad(model: &FusionModel, sample: &GradSample) -> Result<(f64, FusionModel)> {
    let mut grads = model.zeroed();
    let loss = sample_loss(model, sample, Some(&mut grads))?;
    Ok((loss, grads))
}

fn sample_loss(
    model: &FusionModel,
    sample: &GradSample,
    grads: Option<&mut FusionModel>,
) -> Result<f64> {
    let mut scratch;
    let grads = match grads {
        Some(g) => g,
        None => {
            scratch = model.zeroed();
            &mut scratch
        }
    };
    match sample {
        GradSample::Bag {
            tiles,
            masks,
            label,
        } => Ok(model
            .bag_loss_grad(tiles, masks.as_deref(), *label, grads)?
            .0),
        GradSample::Tiles {
            tiles,
            masks,
            targets,
        } => {
            let w = 1.0 / tiles.len() as f64;
            let mut total = 0.0;
            for (k, (t, y)) in tiles.iter().zip(targets).enumerate() {
                let m = masks.as_ref().map(|m| &m[k]);
                total += w * model.tile_loss_grad(t, m, y, w, grads)?.0;
            }
            Ok(total)
        }
    }
}

/// Perturbs every scalar parameter by `+-eps` and compares the central
/// difference with the analytic gradient. Top-k routing parameters of the
/// MoE gate carry no gradient and are reported as skipped.
pub fn grad_check(model: &FusionModel, sample: &GradSample, eps: f64) -> Result<GradCheckReport> {
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::StepOutOfRange(eps));
    }
    let (_, analytic) = loss_and_grad(model, sample)?;
    let names: Vec<(String, usize)> = model
        .blocks()
        .iter()
        .map(|b| (b.name.clone(), b.values.len()))
        .collect();
    let analytic_blocks: Vec<Vec<f64>> = analytic
        .blocks()
        .iter()
        .map(|b| b.values.to_vec())
        .collect();
    let mut report = GradCheckReport {
        blocks: Vec::new(),
        skipped: Vec::new(),
    };
    let mut probe = model.clone();
    for (bi, (name, len)) in names.iter().enumerate() {
        if matches!(model.fusion, Fusion::Moe(_)) && name.starts_with("fusion.gate_") {
            report.skipped.push(name.clone());
            continue;
        }
        let mut block = BlockReport {
            name: name.clone(),
            len: *len,
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for k in 0..*len {
            let orig = probe.blocks()[bi].values[k];
            probe.blocks_mut()[bi].values[k] = orig + eps;
            let plus = sample_loss(&probe, sample, None)?;
            probe.blocks_mut()[bi].values[k] = orig - eps;
            let minus = sample_loss(&probe, sample, None)?;
            probe.blocks_mut()[bi].values[k] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic_blocks[bi][k];
            let err = relative_error(a, numeric);
            if err > block.max_rel_error || k == 0 {
                block.max_rel_error = err;
                block.worst_index = k;
                block.analytic = a;
                block.numeric = numeric;
            }
        }
        report.blocks.push(block);
    }
    Ok(report)
}

/// Sizes of the standard tiny instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TinyShape {
    pub sources: usize,
    pub dim: usize,
    pub hidden: usize,
    pub tiles: usize,
    pub classes: usize,
    pub attn_width: usize,
}

impl Default for TinyShape {
    fn default() -> Self {
        Self {
            sources: 3,
            dim: 8,
            hidden: 16,
            tiles: 4,
            classes: 2,
            attn_width: 16,
        }
    }
}

/// Random model and bag of the given shape, with training masks (rho 0.2)
/// for variants that mask.
pub fn tiny_instance(
    variant: Variant,
    shape: TinyShape,
    seed: u64,
) -> Result<(FusionModel, GradSample)> {
    let ids: Vec<String> = (0..shape.sources).map(|i| alloc::format!("s{i}")).collect();
    let mut spec = ModelSpec::new(
        variant,
        TaskKind::Classification,
        ids,
        shape.dim,
        shape.classes,
    );
    spec.tuner_hidden = shape.hidden;
    spec.attn_width = shape.attn_width;
    let model = FusionModel::new(spec, seed)?;
    let mut r = rng::stream(seed, purpose::GRADCHECK, &[]);
    let tiles: Vec<CompoundEmbedding> = (0..shape.tiles)
        .map(|_| {
            let flat = (0..shape.sources * shape.dim)
                .map(|_| r.sample::<f64, _>(StandardNormal))
                .collect();
            CompoundEmbedding::from_flat(shape.sources, shape.dim, flat)
        })
        .collect();
    let masks = if model.spec.variant.uses_mask() {
        Some(
            (0..shape.tiles)
                .map(|k| {
                    sample_mask(
                        (shape.sources, shape.dim),
                        0.2,
                        derive_key(seed, &[k as u64]),
                    )
                })
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };
    let label = r.random_range(0..shape.classes);
    Ok((
        model,
        GradSample::Bag {
            tiles,
            masks,
            label,
        },
    ))
}
