//! Task heads: attention-MIL classifier over a bag of fused tile vectors and
//! a per-tile linear regressor.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::activation::{softmax, softmax_backward, tanh};
use crate::error::{Error, Result};
use crate::linalg::{add_outer, affine, axpy, dot, mat_vec, vec_mat, Matrix};
use crate::params::{Block, BlockMut, Parameters};
use crate::{block, block_mut};

/// Default attention hidden width.
pub const DEFAULT_ATTN_WIDTH: usize = 128;

/// Un-gated attention MIL: `s_k = w . tanh(V^T h_k)`, `a = softmax(s)`,
/// `z = sum_k a_k h_k`, `logits = W^T z + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct AbmilParams {
    pub attn_v: Matrix,
    pub attn_w: Vec<f64>,
    pub classifier_w: Matrix,
    pub classifier_b: Vec<f64>,
}

impl AbmilParams {
    pub fn init<R: Rng + ?Sized>(input: usize, attn: usize, classes: usize, rng: &mut R) -> Self {
        let attn_w = Matrix::glorot(attn, 1, rng).data;
        Self {
            attn_v: Matrix::glorot(input, attn, rng),
            attn_w,
            classifier_w: Matrix::glorot(input, classes, rng),
            classifier_b: vec![0.0; classes],
        }
    }

    pub fn input_len(&self) -> usize {
        self.attn_v.rows
    }

    pub fn classes(&self) -> usize {
        self.classifier_b.len()
    }

    pub fn forward(&self, tiles: &[Vec<f64>]) -> Result<(Prediction, AbmilCache)> {
        if tiles.is_empty() {
            return Err(Error::EmptyBag);
        }
        let input = self.input_len();
        if let Some(t) = tiles.iter().find(|t| t.len() != input) {
            return Err(Error::ShapeMismatch {
                expected: (1, input),
                actual: (1, t.len()),
            });
        }
        let hidden: Vec<Vec<f64>> = tiles
            .iter()
            .map(|h| vec_mat(h, &self.attn_v).into_iter().map(tanh).collect())
            .collect();
        let scores: Vec<f64> = hidden.iter().map(|u| dot(u, &self.attn_w)).collect();
        let attention = softmax(&scores);
        let mut bag = vec![0.0; input];
        for (h, &a) in tiles.iter().zip(&attention) {
            axpy(&mut bag, a, h);
        }
        let logits = affine(&bag, &self.classifier_w, &self.classifier_b);
        Ok((
            Prediction {
                outputs: logits,
                attention: Some(attention.clone()),
            },
            AbmilCache {
                hidden,
                attention,
                bag,
            },
        ))
    }

    /// Returns per-tile input gradients; parameter gradients accumulate into `grads`.
    pub fn backward_into(
        &self,
        tiles: &[Vec<f64>],
        cache: &AbmilCache,
        dlogits: &[f64],
        grads: &mut AbmilParams,
    ) -> Vec<Vec<f64>> {
        add_outer(&mut grads.classifier_w, &cache.bag, dlogits);
        for (a, b) in grads.classifier_b.iter_mut().zip(dlogits) {
            *a += b;
        }
        let dbag = mat_vec(&self.classifier_w, dlogits);
        let dattn: Vec<f64> = tiles.iter().map(|h| dot(&dbag, h)).collect();
        let dscores = softmax_backward(&cache.attention, &dattn);
        let mut dtiles = Vec::with_capacity(tiles.len());
        for (k, h) in tiles.iter().enumerate() {
            let u = &cache.hidden[k];
            let ds = dscores[k];
            let mut dh: Vec<f64> = dbag.iter().map(|g| g * cache.attention[k]).collect();
            if ds != 0.0 {
                axpy(&mut grads.attn_w, ds, u);
                let dpre: Vec<f64> = u
                    .iter()
                    .zip(&self.attn_w)
                    .map(|(&uk, &wk)| ds * wk * (1.0 - uk * uk))
                    .collect();
                add_outer(&mut grads.attn_v, h, &dpre);
                let back = mat_vec(&self.attn_v, &dpre);
                for (a, b) in dh.iter_mut().zip(&back) {
                    *a += b;
                }
            }
            dtiles.push(dh);
        }
        dtiles
    }
}

impl Parameters for AbmilParams {
    fn blocks(&self) -> Vec<Block<'_>> {
        vec![
            block!(
                "attn_v",
                self.attn_v.rows,
                self.attn_v.cols,
                &self.attn_v.data
            ),
            block!("attn_w", 1, self.attn_w.len(), &self.attn_w),
            block!(
                "classifier_w",
                self.classifier_w.rows,
                self.classifier_w.cols,
                &self.classifier_w.data
            ),
            block!(
                "classifier_b",
                1,
                self.classifier_b.len(),
                &self.classifier_b
            ),
        ]
    }

    fn blocks_mut(&mut self) -> Vec<BlockMut<'_>> {
        let (vr, vc) = self.attn_v.shape();
        let (cr, cc) = self.classifier_w.shape();
        let (aw, cb) = (self.attn_w.len(), self.classifier_b.len());
        vec![
            block_mut!("attn_v", vr, vc, &mut self.attn_v.data),
            block_mut!("attn_w", 1, aw, &mut self.attn_w),
            block_mut!("classifier_w", cr, cc, &mut self.classifier_w.data),
            block_mut!("classifier_b", 1, cb, &mut self.classifier_b),
        ]
    }
}

#[derive(Debug, Clone)]
pub struct AbmilCache {
    hidden: Vec<Vec<f64>>,
    attention: Vec<f64>,
    bag: Vec<f64>,
}

impl AbmilCache {
    pub fn bag_embedding(&self) -> &[f64] {
        &self.bag
    }
}

/// Head output: logits (classification) or targets (regression).
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub outputs: Vec<f64>,
    /// Per-tile attention (classification only).
    pub attention: Option<Vec<f64>>,
}

/// `y = W^T x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressorParams {
    pub w: Matrix,
    pub b: Vec<f64>,
}

impl RegressorParams {
    pub fn init<R: Rng + ?Sized>(input: usize, targets: usize, rng: &mut R) -> Self {
        Self {
            w: Matrix::glorot(input, targets, rng),
            b: vec![0.0; targets],
        }
    }

    pub fn input_len(&self) -> usize {
        self.w.rows
    }

    pub fn forward(&self, x: &[f64]) -> Result<Prediction> {
        if x.len() != self.w.rows {
            return Err(Error::ShapeMismatch {
                expected: (1, self.w.rows),
                actual: (1, x.len()),
            });
        }
        Ok(Prediction {
            outputs: affine(x, &self.w, &self.b),
            attention: None,
        })
    }

    pub fn backward_into(&self, x: &[f64], dout: &[f64], grads: &mut RegressorParams) -> Vec<f64> {
        add_outer(&mut grads.w, x, dout);
        for (a, b) in grads.b.iter_mut().zip(dout) {
            *a += b;
        }
        mat_vec(&self.w, dout)
    }
}

impl Parameters for RegressorParams {
    fn blocks(&self) -> Vec<Block<'_>> {
        vec![
            block!("w", self.w.rows, self.w.cols, &self.w.data),
            block!("b", 1, self.b.len(), &self.b),
        ]
    }

    fn blocks_mut(&mut self) -> Vec<BlockMut<'_>> {
        let (r, c) = self.w.shape();
        let l = self.b.len();
        vec![
            block_mut!("w", r, c, &mut self.w.data),
            block_mut!("b", 1, l, &mut self.b),
        ]
    }
}
