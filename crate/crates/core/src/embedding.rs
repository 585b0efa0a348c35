//! Compression of raw source embeddings, compound composition and the
//! training-time binary mask.

use alloc::string::String;
use alloc::vec::Vec;

use rand::Rng;

use crate::data::FeatureTable;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng::{self, purpose};

/// Segment boundaries `floor(k * native / target)` for `k = 0..=target`.
pub fn segment_bounds(native: usize, target: usize) -> Vec<usize> {
    (0..=target).map(|k| k * native / target).collect()
}

/// Segment-mean pooling of `raw` down to `target` values.
pub fn mean_pool(raw: &[f64], target: usize) -> Result<Vec<f64>> {
    if target == 0 {
        return Err(Error::ZeroTargetDim);
    }
    if target > raw.len() {
        return Err(Error::TargetDimTooLarge {
            target,
            native: raw.len(),
        });
    }
    let bounds = segment_bounds(raw.len(), target);
    Ok(bounds
        .windows(2)
        .map(|w| {
            let seg = &raw[w[0]..w[1]];
            seg.iter().sum::<f64>() / seg.len() as f64
        })
        .collect())
}

/// A source embedding after pooling to the unified dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledEmbedding {
    pub source_id: String,
    pub values: Vec<f64>,
}

impl PooledEmbedding {
    pub fn from_raw(source_id: impl Into<String>, raw: &[f64], target: usize) -> Result<Self> {
        Ok(Self {
            source_id: source_id.into(),
            values: mean_pool(raw, target)?,
        })
    }
}

/// Pools every row of a table; pooled values are stored as `f32` like the
/// raw ones, so pooling in memory and pooling through a file agree bitwise.
pub fn pool_table(table: &FeatureTable, target: usize) -> Result<FeatureTable> {
    if target > table.dim {
        return Err(Error::TargetDimTooLarge {
            target,
            native: table.dim,
        });
    }
    let mut values = Vec::with_capacity(table.len() * target);
    let mut row64 = Vec::with_capacity(table.dim);
    for r in 0..table.len() {
        row64.clear();
        row64.extend(table.row(r).iter().map(|&v| v as f64));
        values.extend(mean_pool(&row64, target)?.into_iter().map(|v| v as f32));
    }
    let mut source = table.source.clone();
    source.native_dim = target;
    FeatureTable::new(source, table.tile_ids.clone(), target, values)
}

/// `N x d` matrix whose row `i` is the pooled embedding of source `i`.
/// The flattened (row-major) form has length `N * d`.
#[derive(Debug, Clone, PartialEq)]
pub struct CompoundEmbedding(pub Matrix);

impl CompoundEmbedding {
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let n = rows.len();
        let d = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(n * d);
        for r in rows {
            assert_eq!(r.len(), d, "ragged compound rows");
            data.extend_from_slice(r);
        }
        Self(Matrix::from_vec(n, d, data))
    }

    pub fn from_flat(n: usize, d: usize, flat: Vec<f64>) -> Self {
        Self(Matrix::from_vec(n, d, flat))
    }

    pub fn sources(&self) -> usize {
        self.0.rows
    }

    pub fn dim(&self) -> usize {
        self.0.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.shape()
    }

    pub fn flat(&self) -> &[f64] {
        &self.0.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.0.row(i)
    }
}

/// Stacks pooled embeddings in the declared source order.
pub fn compose_compound(pooled: &[PooledEmbedding], order: &[String]) -> Result<CompoundEmbedding> {
    for (i, p) in pooled.iter().enumerate() {
        if pooled[..i].iter().any(|q| q.source_id == p.source_id) {
            return Err(Error::DuplicateSource(p.source_id.clone()));
        }
    }
    let d = pooled.first().map_or(0, |p| p.values.len());
    let mut rows = Vec::with_capacity(order.len());
    for id in order {
        let p = pooled
            .iter()
            .find(|p| &p.source_id == id)
            .ok_or_else(|| Error::MissingSource(id.clone()))?;
        if p.values.len() != d {
            return Err(Error::ShapeMismatch {
                expected: (1, d),
                actual: (1, p.values.len()),
            });
        }
        rows.push(p.values.as_slice());
    }
    if let Some(extra) = pooled.iter().find(|p| !order.contains(&p.source_id)) {
        return Err(Error::ConfigInvalid(alloc::format!(
            "pooled embedding for undeclared source `{}`",
            extra.source_id
        )));
    }
    Ok(CompoundEmbedding::from_rows(&rows))
}

/// Binary keep-mask; entry is 1 with probability `1 - rho`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskMatrix {
    pub rows: usize,
    pub cols: usize,
    pub bits: Vec<bool>,
    pub rho: f64,
    pub seed: u64,
}

impl MaskMatrix {
    pub fn ones(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            bits: alloc::vec![true; rows * cols],
            rho: 0.0,
            seed: 0,
        }
    }

    pub fn kept(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn as_f64(&self) -> impl Iterator<Item = f64> + '_ {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 })
    }
}

/// Draws a mask from the stream keyed by `seed`; the same `(seed, shape,
/// rho)` always yields the same bits.
pub fn sample_mask(shape: (usize, usize), rho: f64, seed: u64) -> Result<MaskMatrix> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::RhoOutOfRange(rho));
    }
    let mut rng = rng::stream(seed, purpose::MASK, &[shape.0 as u64, shape.1 as u64]);
    let bits = (0..shape.0 * shape.1)
        .map(|_| rng.random::<f64>() >= rho)
        .collect();
    Ok(MaskMatrix {
        rows: shape.0,
        cols: shape.1,
        bits,
        rho,
        seed,
    })
}

pub fn apply_mask(compound: &CompoundEmbedding, mask: &MaskMatrix) -> Result<CompoundEmbedding> {
    if compound.shape() != (mask.rows, mask.cols) {
        return Err(Error::ShapeMismatch {
            expected: compound.shape(),
            actual: (mask.rows, mask.cols),
        });
    }
    let data = compound
        .flat()
        .iter()
        .zip(&mask.bits)
        .map(|(&v, &keep)| if keep { v } else { 0.0 })
        .collect();
    Ok(CompoundEmbedding::from_flat(mask.rows, mask.cols, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use alloc::vec;

    #[test]
    fn pool_halves() {
        assert_eq!(mean_pool(&[1.0, 2.0, 3.0, 4.0], 2).unwrap(), vec![1.5, 3.5]);
    }

    #[test]
    fn pool_identity_when_dims_match() {
        let raw = [0.3, -7.25, 1e-9, 4.0];
        assert_eq!(mean_pool(&raw, 4).unwrap(), raw.to_vec());
    }

    #[test]
    fn pool_non_divisible_uses_floor_bounds() {
        // Oracle: boundaries floor(k * 6 / 4) = [0, 1, 3, 4, 6].
        assert_eq!(segment_bounds(6, 4), vec![0, 1, 3, 4, 6]);
        let raw = [0.0, 1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(mean_pool(&raw, 4).unwrap(), vec![0.0, 1.5, 3.0, 4.5]);
    }

    #[test]
    fn pool_rejects_growth() {
        assert_eq!(
            mean_pool(&[1.0, 2.0], 3),
            Err(Error::TargetDimTooLarge {
                target: 3,
                native: 2
            })
        );
    }

    #[test]
    fn compose_orders_rows_by_declaration() {
        let e1 = PooledEmbedding {
            source_id: "a".into(),
            values: vec![1.0, 0.0],
        };
        let e2 = PooledEmbedding {
            source_id: "b".into(),
            values: vec![0.0, 1.0],
        };
        let order = vec!["a".to_string(), "b".to_string()];
        let c = compose_compound(&[e2.clone(), e1.clone()], &order).unwrap();
        assert_eq!(c.flat(), &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(
            compose_compound(&[e1.clone()], &order),
            Err(Error::MissingSource("b".into()))
        );
        assert_eq!(
            compose_compound(&[e1.clone(), e1], &order),
            Err(Error::DuplicateSource("a".into()))
        );
    }

    #[test]
    fn six_sources_at_64_flatten_to_384() {
        let order: Vec<String> = (0..6).map(|i| alloc::format!("s{i}")).collect();
        let pooled: Vec<PooledEmbedding> = order
            .iter()
            .map(|id| PooledEmbedding {
                source_id: id.clone(),
                values: vec![0.5; 64],
            })
            .collect();
        assert_eq!(compose_compound(&pooled, &order).unwrap().flat().len(), 384);
    }

    #[test]
    fn mask_extremes() {
        assert!(sample_mask((3, 5), 0.0, 1).unwrap().bits.iter().all(|&b| b));
        assert!(sample_mask((3, 5), 1.0, 1)
            .unwrap()
            .bits
            .iter()
            .all(|&b| !b));
        assert_eq!(sample_mask((1, 1), 1.5, 0), Err(Error::RhoOutOfRange(1.5)));
    }

    #[test]
    fn apply_mask_definition() {
        let c = CompoundEmbedding::from_flat(1, 2, vec![2.0, 4.0]);
        let mut m = MaskMatrix::ones(1, 2);
        m.bits[1] = false;
        assert_eq!(apply_mask(&c, &m).unwrap().flat(), &[2.0, 0.0]);
        let bad = MaskMatrix::ones(2, 1);
        assert!(matches!(
            apply_mask(&c, &bad),
            Err(Error::ShapeMismatch { .. })
        ));
    }
}
