//! Top-3 mixture of experts: a GELU gating MLP scores the sources, the three
//! best pooled embeddings are concatenated in score order and remapped by a
//! linear layer. Selection is a hard top-k with no gradient to the gate.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::activation::{gelu, softmax};
use crate::embedding::CompoundEmbedding;
use crate::error::{Error, Result};
use crate::linalg::{add_outer, affine, mat_vec, Matrix};
use crate::params::{Block, BlockMut, Parameters};
use crate::{block, block_mut};

pub const TOP_K: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct MoeParams {
    pub sources: usize,
    pub dim: usize,
    pub gate_w1: Matrix,
    pub gate_b1: Vec<f64>,
    pub gate_w2: Matrix,
    pub gate_b2: Vec<f64>,
    pub proj_w: Matrix,
    pub proj_b: Vec<f64>,
}

impl MoeParams {
    pub fn init<R: Rng + ?Sized>(sources: usize, dim: usize, rng: &mut R) -> Result<Self> {
        if sources < TOP_K {
            return Err(Error::TooFewSources(sources));
        }
        let fused = TOP_K * dim;
        Ok(Self {
            sources,
            dim,
            gate_w1: Matrix::glorot(sources * dim, dim, rng),
            gate_b1: vec![0.0; dim],
            gate_w2: Matrix::glorot(dim, sources, rng),
            gate_b2: vec![0.0; sources],
            proj_w: Matrix::glorot(fused, fused, rng),
            proj_b: vec![0.0; fused],
        })
    }

    pub fn output_len(&self) -> usize {
        TOP_K * self.dim
    }

    /// Softmax relevance of each source.
    pub fn gate_scores(&self, compound: &CompoundEmbedding) -> Vec<f64> {
        let hidden: Vec<f64> = affine(compound.flat(), &self.gate_w1, &self.gate_b1)
            .into_iter()
            .map(gelu)
            .collect();
        softmax(&affine(&hidden, &self.gate_w2, &self.gate_b2))
    }

    pub fn forward(&self, compound: &CompoundEmbedding) -> Result<MoeOutput> {
        if compound.sources() < TOP_K {
            return Err(Error::TooFewSources(compound.sources()));
        }
        if compound.shape() != (self.sources, self.dim) {
            return Err(Error::ShapeMismatch {
                expected: (self.sources, self.dim),
                actual: compound.shape(),
            });
        }
        let scores = self.gate_scores(compound);
        let selected = top_k(&scores);
        Ok(self.forward_selected(compound, selected, scores))
    }

    /// Concatenate-and-project for a fixed selection.
    pub fn forward_selected(
        &self,
        compound: &CompoundEmbedding,
        selected: [usize; TOP_K],
        scores: Vec<f64>,
    ) -> MoeOutput {
        let mut concat = Vec::with_capacity(self.output_len());
        for &s in &selected {
            concat.extend_from_slice(compound.row(s));
        }
        let fused = affine(&concat, &self.proj_w, &self.proj_b);
        MoeOutput {
            fused,
            selected,
            scores,
            concat,
        }
    }

    /// Gradients reach only the projection; the returned input gradient is
    /// non-zero only on the selected rows.
    pub fn backward_into(
        &self,
        out: &MoeOutput,
        dfused: &[f64],
        grads: &mut MoeParams,
    ) -> Vec<f64> {
        add_outer(&mut grads.proj_w, &out.concat, dfused);
        for (a, b) in grads.proj_b.iter_mut().zip(dfused) {
            *a += b;
        }
        let dconcat = mat_vec(&self.proj_w, dfused);
        let d = self.dim;
        let mut dx = vec![0.0; self.sources * d];
        for (slot, &s) in out.selected.iter().enumerate() {
            for c in 0..d {
                dx[s * d + c] += dconcat[slot * d + c];
            }
        }
        dx
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoeOutput {
    pub fused: Vec<f64>,
    /// Selected sources in descending score order.
    pub selected: [usize; TOP_K],
    pub scores: Vec<f64>,
    concat: Vec<f64>,
}

/// Indices of the three largest scores, descending; ties go to the lower index.
pub fn top_k(scores: &[f64]) -> [usize; TOP_K] {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    [idx[0], idx[1], idx[2]]
}

impl Parameters for MoeParams {
    fn blocks(&self) -> Vec<Block<'_>> {
        vec![
            block!(
                "gate_w1",
                self.gate_w1.rows,
                self.gate_w1.cols,
                &self.gate_w1.data
            ),
            block!("gate_b1", 1, self.gate_b1.len(), &self.gate_b1),
            block!(
                "gate_w2",
                self.gate_w2.rows,
                self.gate_w2.cols,
                &self.gate_w2.data
            ),
            block!("gate_b2", 1, self.gate_b2.len(), &self.gate_b2),
            block!(
                "proj_w",
                self.proj_w.rows,
                self.proj_w.cols,
                &self.proj_w.data
            ),
            block!("proj_b", 1, self.proj_b.len(), &self.proj_b),
        ]
    }

    fn blocks_mut(&mut self) -> Vec<BlockMut<'_>> {
        let (a, b) = self.gate_w1.shape();
        let (c, e) = self.gate_w2.shape();
        let (f, g) = self.proj_w.shape();
        let (l1, l2, l3) = (self.gate_b1.len(), self.gate_b2.len(), self.proj_b.len());
        vec![
            block_mut!("gate_w1", a, b, &mut self.gate_w1.data),
            block_mut!("gate_b1", 1, l1, &mut self.gate_b1),
            block_mut!("gate_w2", c, e, &mut self.gate_w2.data),
            block_mut!("gate_b2", 1, l2, &mut self.gate_b2),
            block_mut!("proj_w", f, g, &mut self.proj_w.data),
            block_mut!("proj_b", 1, l3, &mut self.proj_b),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn top_k_orders_by_score() {
        assert_eq!(top_k(&[0.5, 0.3, 0.1, 0.05, 0.03, 0.02]), [0, 1, 2]);
        assert_eq!(top_k(&[0.1, 0.3, 0.05, 0.5, 0.03, 0.02]), [3, 1, 0]);
        assert_eq!(top_k(&[1.0 / 6.0; 6]), [0, 1, 2]);
    }

    #[test]
    fn identity_projection_concatenates() {
        let mut r = rng::stream(1, rng::purpose::INIT, &[]);
        let mut p = MoeParams::init(3, 2, &mut r).unwrap();
        p.proj_w = Matrix::zeros(6, 6);
        for i in 0..6 {
            p.proj_w.row_mut(i)[i] = 1.0;
        }
        let x = CompoundEmbedding::from_flat(3, 2, vec![1.0, 0.0, 0.0, 1.0, 2.0, 2.0]);
        let out = p.forward_selected(&x, [0, 1, 2], vec![]);
        assert_eq!(out.fused, vec![1.0, 0.0, 0.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn needs_three_sources() {
        let mut r = rng::stream(1, rng::purpose::INIT, &[]);
        assert_eq!(
            MoeParams::init(2, 4, &mut r).unwrap_err(),
            Error::TooFewSources(2)
        );
    }
}
