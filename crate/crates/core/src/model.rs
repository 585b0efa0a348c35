//! A fusion method paired with a task head, with per-bag (classification) and
//! per-tile (regression) loss/gradient evaluation.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::baselines::{MoeOutput, MoeParams, SelfAttnCache, SelfAttnParams};
use crate::data::TaskKind;
use crate::embedding::{apply_mask, CompoundEmbedding, MaskMatrix};
use crate::error::{Error, Result};
use crate::heads::{AbmilCache, AbmilParams, Prediction, RegressorParams, DEFAULT_ATTN_WIDTH};
use crate::linalg::Matrix;
use crate::loss::{cross_entropy, mse};
use crate::params::{prefixed, prefixed_mut, Block, BlockMut, Parameters};
use crate::rng::{self, purpose};
use crate::tuner::{apply_gate, default_hidden, GateMatrix, GateVariant, TunerCache, TunerParams};

/// Fusion method selector.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Variant {
    Coarse,
    Fine,
    Ensemble,
    EnsembleMask,
    SelfAttn,
    MoeTop3,
    /// Head on a single source's pooled embedding.
    Single(String),
}

impl Variant {
    /// Whether training draws a fresh input mask per tile and step.
    pub fn uses_mask(&self) -> bool {
        matches!(
            self,
            Variant::Coarse | Variant::Fine | Variant::EnsembleMask
        )
    }

    pub fn has_tuner(&self) -> bool {
        matches!(self, Variant::Coarse | Variant::Fine)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Coarse => f.write_str("coarse"),
            Variant::Fine => f.write_str("fine"),
            Variant::Ensemble => f.write_str("ensemble"),
            Variant::EnsembleMask => f.write_str("ensemble-mask"),
            Variant::SelfAttn => f.write_str("self-attn"),
            Variant::MoeTop3 => f.write_str("moe-top3"),
            Variant::Single(id) => write!(f, "single:{id}"),
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "coarse" => Variant::Coarse,
            "fine" => Variant::Fine,
            "ensemble" => Variant::Ensemble,
            "ensemble-mask" | "ensemble_mask" => Variant::EnsembleMask,
            "self-attn" | "self_attn" => Variant::SelfAttn,
            "moe-top3" | "moe_top3" => Variant::MoeTop3,
            other => match other.strip_prefix("single:") {
                Some(id) if !id.is_empty() => Variant::Single(id.to_string()),
                _ => return Err(Error::ConfigInvalid(format!("unknown variant `{other}`"))),
            },
        })
    }
}

impl From<Variant> for String {
    fn from(v: Variant) -> String {
        v.to_string()
    }
}

impl TryFrom<String> for Variant {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// Shape-level description of a model, enough to rebuild it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub variant: Variant,
    pub task: TaskKind,
    pub source_ids: Vec<String>,
    pub dim: usize,
    /// Class count (classification) or target count (regression).
    pub outputs: usize,
    pub tuner_hidden: usize,
    pub attn_width: usize,
}

impl ModelSpec {
    pub fn new(
        variant: Variant,
        task: TaskKind,
        source_ids: Vec<String>,
        dim: usize,
        outputs: usize,
    ) -> Self {
        let tuner_hidden = default_hidden(source_ids.len(), dim);
        Self {
            variant,
            task,
            source_ids,
            dim,
            outputs,
            tuner_hidden,
            attn_width: DEFAULT_ATTN_WIDTH,
        }
    }

    pub fn sources(&self) -> usize {
        self.source_ids.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Fusion {
    Tuner(TunerParams),
    SelfAttn(SelfAttnParams),
    Moe(MoeParams),
    /// Plain concatenation (optionally masked during training).
    Concat,
    Single(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Head {
    Abmil(AbmilParams),
    Regressor(RegressorParams),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionModel {
    pub spec: ModelSpec,
    pub fusion: Fusion,
    pub head: Head,
}

/// Intermediates of fusing one tile.
#[derive(Debug, Clone)]
pub enum FuseCache {
    Tuner {
        gated_input: CompoundEmbedding,
        gate: GateMatrix,
        cache: TunerCache,
    },
    SelfAttn(SelfAttnCache),
    Moe(MoeOutput),
    Plain,
}

impl FuseCache {
    pub fn gate(&self) -> Option<&GateMatrix> {
        match self {
            FuseCache::Tuner { gate, .. } => Some(gate),
            _ => None,
        }
    }
}

impl FusionModel {
    /// Seeded initialisation; the fusion and head draw from separate streams.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        let (n, d) = (spec.sources(), spec.dim);
        if n == 0 || d == 0 {
            return Err(Error::ConfigInvalid(
                "model needs at least one source and d >= 1".to_string(),
            ));
        }
        let mut fr = rng::stream(seed, purpose::INIT, &[0]);
        let mut hr = rng::stream(seed, purpose::INIT, &[1]);
        let fusion = match &spec.variant {
            Variant::Coarse => Fusion::Tuner(TunerParams::init(
                GateVariant::Coarse,
                n,
                d,
                spec.tuner_hidden,
                &mut fr,
            )),
            Variant::Fine => Fusion::Tuner(TunerParams::init(
                GateVariant::Fine,
                n,
                d,
                spec.tuner_hidden,
                &mut fr,
            )),
            Variant::SelfAttn => Fusion::SelfAttn(SelfAttnParams::init(n, d, &mut fr)?),
            Variant::MoeTop3 => Fusion::Moe(MoeParams::init(n, d, &mut fr)?),
            Variant::Ensemble | Variant::EnsembleMask => Fusion::Concat,
            Variant::Single(id) => Fusion::Single(
                spec.source_ids
                    .iter()
                    .position(|s| s == id)
                    .ok_or_else(|| Error::MissingSource(id.clone()))?,
            ),
        };
        let fused = fused_len(&fusion, n, d);
        let head = match spec.task {
            TaskKind::Classification => Head::Abmil(AbmilParams::init(
                fused,
                spec.attn_width,
                spec.outputs,
                &mut hr,
            )),
            TaskKind::Regression => {
                Head::Regressor(RegressorParams::init(fused, spec.outputs, &mut hr))
            }
        };
        Ok(Self { spec, fusion, head })
    }

    pub fn fused_len(&self) -> usize {
        fused_len(&self.fusion, self.spec.sources(), self.spec.dim)
    }

    pub fn tuner(&self) -> Option<&TunerParams> {
        match &self.fusion {
            Fusion::Tuner(t) => Some(t),
            _ => None,
        }
    }

    /// Fuses one tile. `mask` is applied only by variants that use masking.
    pub fn fuse(
        &self,
        compound: &CompoundEmbedding,
        mask: Option<&MaskMatrix>,
    ) -> Result<(Vec<f64>, FuseCache)> {
        let expected = (self.spec.sources(), self.spec.dim);
        if compound.shape() != expected {
            return Err(Error::ShapeMismatch {
                expected,
                actual: compound.shape(),
            });
        }
        let mask = mask.filter(|_| self.spec.variant.uses_mask());
        match &self.fusion {
            Fusion::Tuner(t) => {
                let input = match mask {
                    Some(m) => apply_mask(compound, m)?,
                    None => compound.clone(),
                };
                let (gate, cache) = t.forward(&input)?;
                let tuned = apply_gate(&input, &gate)?;
                Ok((
                    tuned.0.data,
                    FuseCache::Tuner {
                        gated_input: input,
                        gate,
                        cache,
                    },
                ))
            }
            Fusion::SelfAttn(p) => {
                let (out, cache) = p.forward(compound)?;
                Ok((out, FuseCache::SelfAttn(cache)))
            }
            Fusion::Moe(p) => {
                let out = p.forward(compound)?;
                Ok((out.fused.clone(), FuseCache::Moe(out)))
            }
            Fusion::Concat => {
                let out = match mask {
                    Some(m) => apply_mask(compound, m)?.0.data,
                    None => compound.flat().to_vec(),
                };
                Ok((out, FuseCache::Plain))
            }
            Fusion::Single(i) => Ok((compound.row(*i).to_vec(), FuseCache::Plain)),
        }
    }

    fn fuse_backward(&self, cache: &FuseCache, dout: &[f64], grads: &mut FusionModel) {
        match (&self.fusion, &mut grads.fusion, cache) {
            (
                Fusion::Tuner(t),
                Fusion::Tuner(g),
                FuseCache::Tuner {
                    gated_input, cache, ..
                },
            ) => {
                let (n, d) = gated_input.shape();
                let dgate: Vec<f64> = dout
                    .iter()
                    .zip(gated_input.flat())
                    .map(|(a, b)| a * b)
                    .collect();
                t.backward_into(cache, &Matrix::from_vec(n, d, dgate), g);
            }
            (Fusion::SelfAttn(p), Fusion::SelfAttn(g), FuseCache::SelfAttn(c)) => {
                p.backward_into(c, dout, g);
            }
            (Fusion::Moe(p), Fusion::Moe(g), FuseCache::Moe(out)) => {
                p.backward_into(out, dout, g);
            }
            _ => {}
        }
    }

    /// Inference on a bag (no masking).
    pub fn predict_bag(&self, tiles: &[CompoundEmbedding]) -> Result<Prediction> {
        let abmil = match &self.head {
            Head::Abmil(a) => a,
            Head::Regressor(_) => {
                return Err(Error::VariantTaskMismatch {
                    expected: "regression",
                    actual: "classification",
                })
            }
        };
        let fused = tiles
            .iter()
            .map(|t| self.fuse(t, None).map(|(v, _)| v))
            .collect::<Result<Vec<_>>>()?;
        Ok(abmil.forward(&fused)?.0)
    }

    /// Inference on one tile (regression head).
    pub fn predict_tile(&self, tile: &CompoundEmbedding) -> Result<Prediction> {
        match &self.head {
            Head::Regressor(r) => r.forward(&self.fuse(tile, None)?.0),
            Head::Abmil(_) => Err(Error::VariantTaskMismatch {
                expected: "classification",
                actual: "regression",
            }),
        }
    }

    /// Cross-entropy of one bag; accumulates gradients into `grads` and returns
    /// `(loss, logits)`.
    pub fn bag_loss_grad(
        &self,
        tiles: &[CompoundEmbedding],
        masks: Option<&[MaskMatrix]>,
        label: usize,
        grads: &mut FusionModel,
    ) -> Result<(f64, Vec<f64>)> {
        let abmil = match &self.head {
            Head::Abmil(a) => a,
            Head::Regressor(_) => {
                return Err(Error::VariantTaskMismatch {
                    expected: "regression",
                    actual: "classification",
                })
            }
        };
        let mut fused = Vec::with_capacity(tiles.len());
        let mut caches = Vec::with_capacity(tiles.len());
        for (k, t) in tiles.iter().enumerate() {
            let (v, c) = self.fuse(t, masks.map(|m| &m[k]))?;
            fused.push(v);
            caches.push(c);
        }
        let (pred, head_cache): (Prediction, AbmilCache) = abmil.forward(&fused)?;
        let (loss, dlogits) = cross_entropy(&pred.outputs, label)?;
        let dtiles = match &mut grads.head {
            Head::Abmil(g) => abmil.backward_into(&fused, &head_cache, &dlogits, g),
            Head::Regressor(_) => unreachable!("gradient buffer built from a different model"),
        };
        for (c, dt) in caches.iter().zip(&dtiles) {
            self.fuse_backward(c, dt, grads);
        }
        Ok((loss, pred.outputs))
    }

    /// MSE of one tile; accumulates `weight * gradient` into `grads`.
    pub fn tile_loss_grad(
        &self,
        tile: &CompoundEmbedding,
        mask: Option<&MaskMatrix>,
        target: &[f64],
        weight: f64,
        grads: &mut FusionModel,
    ) -> Result<(f64, Vec<f64>)> {
        let reg = match &self.head {
            Head::Regressor(r) => r,
            Head::Abmil(_) => {
                return Err(Error::VariantTaskMismatch {
                    expected: "classification",
                    actual: "regression",
                })
            }
        };
        let (fused, cache) = self.fuse(tile, mask)?;
        let pred = reg.forward(&fused)?;
        let (loss, mut dout) = mse(&pred.outputs, target)?;
        for g in &mut dout {
            *g *= weight;
        }
        let dfused = match &mut grads.head {
            Head::Regressor(g) => reg.backward_into(&fused, &dout, g),
            Head::Abmil(_) => unreachable!("gradient buffer built from a different model"),
        };
        self.fuse_backward(&cache, &dfused, grads);
        Ok((loss, pred.outputs))
    }
}

fn fused_len(fusion: &Fusion, n: usize, d: usize) -> usize {
    match fusion {
        Fusion::Moe(p) => p.output_len(),
        Fusion::Single(_) => d,
        _ => n * d,
    }
}

impl Parameters for FusionModel {
    fn blocks(&self) -> Vec<Block<'_>> {
        let mut out: Vec<Block<'_>> = match &self.fusion {
            Fusion::Tuner(p) => prefixed("fusion", p.blocks()).collect(),
            Fusion::SelfAttn(p) => prefixed("fusion", p.blocks()).collect(),
            Fusion::Moe(p) => prefixed("fusion", p.blocks()).collect(),
            Fusion::Concat | Fusion::Single(_) => Vec::new(),
        };
        match &self.head {
            Head::Abmil(h) => out.extend(prefixed("head", h.blocks())),
            Head::Regressor(h) => out.extend(prefixed("head", h.blocks())),
        }
        out
    }

    fn blocks_mut(&mut self) -> Vec<BlockMut<'_>> {
        let mut out: Vec<BlockMut<'_>> = match &mut self.fusion {
            Fusion::Tuner(p) => prefixed_mut("fusion", p.blocks_mut()).collect(),
            Fusion::SelfAttn(p) => prefixed_mut("fusion", p.blocks_mut()).collect(),
            Fusion::Moe(p) => prefixed_mut("fusion", p.blocks_mut()).collect(),
            Fusion::Concat | Fusion::Single(_) => Vec::new(),
        };
        match &mut self.head {
            Head::Abmil(h) => out.extend(prefixed_mut("head", h.blocks_mut())),
            Head::Regressor(h) => out.extend(prefixed_mut("head", h.blocks_mut())),
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn variant_names_round_trip() {
        for s in [
            "coarse",
            "fine",
            "ensemble",
            "ensemble-mask",
            "self-attn",
            "moe-top3",
            "single:uni",
        ] {
            let v: Variant = s.parse().unwrap();
            assert_eq!(v.to_string(), s);
        }
        assert_eq!(
            "ensemble_mask".parse::<Variant>().unwrap(),
            Variant::EnsembleMask
        );
        assert!("single:".parse::<Variant>().is_err());
        assert!("bogus".parse::<Variant>().is_err());
    }

    #[test]
    fn ensemble_has_only_head_parameters() {
        let spec = ModelSpec::new(
            Variant::Ensemble,
            TaskKind::Classification,
            vec!["a".into(), "b".into()],
            4,
            2,
        );
        let m = FusionModel::new(spec, 1).unwrap();
        assert!(m.blocks().iter().all(|b| b.name.starts_with("head.")));
    }

    #[test]
    fn moe_needs_three_sources() {
        let spec = ModelSpec::new(
            Variant::MoeTop3,
            TaskKind::Classification,
            vec!["a".into(), "b".into()],
            4,
            2,
        );
        assert_eq!(
            FusionModel::new(spec, 1).unwrap_err(),
            Error::TooFewSources(2)
        );
    }

    #[test]
    fn single_source_must_exist() {
        let spec = ModelSpec::new(
            Variant::Single("z".into()),
            TaskKind::Classification,
            vec!["a".into()],
            4,
            2,
        );
        assert_eq!(
            FusionModel::new(spec, 1).unwrap_err(),
            Error::MissingSource("z".into())
        );
    }
}
