//! The prompt tuner: a normalised two-layer MLP that maps a (masked) compound
//! embedding to a sigmoid gating matrix, plus gate application and
//! per-source contribution scores.
//!
//! Pipeline: flatten -> layer norm over all `N * d` features -> linear(h) ->
//! GELU -> linear(out) -> sigmoid. The coarse variant emits one gate per
//! source (`out = N`) and broadcasts it across that source's `d` features;
//! the fine variant emits all `N * d` gates directly.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::activation::{
    gelu, gelu_grad, layer_norm, layer_norm_backward, sigmoid, LayerNormCache,
};
use crate::embedding::CompoundEmbedding;
use crate::error::{Error, Result};
use crate::linalg::{add_outer, affine, mat_vec, Matrix};
use crate::params::{Block, BlockMut, Parameters};
use crate::{block, block_mut};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateVariant {
    Coarse,
    Fine,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TunerParams {
    pub variant: GateVariant,
    pub sources: usize,
    pub dim: usize,
    pub hidden: usize,
    pub norm_scale: Vec<f64>,
    pub norm_shift: Vec<f64>,
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

/// Default hidden width: half the flattened compound length.
pub fn default_hidden(sources: usize, dim: usize) -> usize {
    (sources * dim / 2).max(1)
}

impl TunerParams {
    pub fn init<R: Rng + ?Sized>(
        variant: GateVariant,
        sources: usize,
        dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let input = sources * dim;
        let out = match variant {
            GateVariant::Coarse => sources,
            GateVariant::Fine => input,
        };
        Self {
            variant,
            sources,
            dim,
            hidden,
            norm_scale: vec![1.0; input],
            norm_shift: vec![0.0; input],
            w1: Matrix::glorot(input, hidden, rng),
            b1: vec![0.0; hidden],
            w2: Matrix::glorot(hidden, out, rng),
            b2: vec![0.0; out],
        }
    }

    pub fn input_len(&self) -> usize {
        self.sources * self.dim
    }

    pub fn out_len(&self) -> usize {
        self.w2.cols
    }

    /// A fine tuner whose output columns repeat each coarse column `d` times,
    /// so every source block shares one pre-activation.
    pub fn fine_from_coarse(&self) -> Self {
        assert_eq!(self.variant, GateVariant::Coarse);
        let (n, d, h) = (self.sources, self.dim, self.hidden);
        let mut w2 = Matrix::zeros(h, n * d);
        for r in 0..h {
            for i in 0..n {
                let v = self.w2.get(r, i);
                w2.row_mut(r)[i * d..(i + 1) * d].fill(v);
            }
        }
        let b2 = (0..n * d).map(|k| self.b2[k / d]).collect();
        Self {
            variant: GateVariant::Fine,
            w2,
            b2,
            ..self.clone()
        }
    }

    pub fn forward(&self, input: &CompoundEmbedding) -> Result<(GateMatrix, TunerCache)> {
        if input.shape() != (self.sources, self.dim) {
            return Err(Error::ShapeMismatch {
                expected: (self.sources, self.dim),
                actual: input.shape(),
            });
        }
        let (normed, ln) = layer_norm(input.flat(), &self.norm_scale, &self.norm_shift);
        let pre1 = affine(&normed, &self.w1, &self.b1);
        let act1: Vec<f64> = pre1.iter().map(|&v| gelu(v)).collect();
        let out: Vec<f64> = affine(&act1, &self.w2, &self.b2)
            .into_iter()
            .map(sigmoid)
            .collect();
        let gate = match self.variant {
            GateVariant::Fine => GateMatrix {
                values: Matrix::from_vec(self.sources, self.dim, out.clone()),
                source_gates: None,
            },
            GateVariant::Coarse => {
                let mut m = Matrix::zeros(self.sources, self.dim);
                for (i, &g) in out.iter().enumerate() {
                    m.row_mut(i).fill(g);
                }
                GateMatrix {
                    values: m,
                    source_gates: Some(out.clone()),
                }
            }
        };
        Ok((
            gate,
            TunerCache {
                ln,
                normed,
                pre1,
                act1,
                out,
            },
        ))
    }

    /// Gradients of the forward pipeline given `d loss / d gate`.
    /// Returns the parameter gradient and the gradient w.r.t. the flattened input.
    pub fn backward(&self, cache: &TunerCache, dgate: &Matrix) -> (TunerParams, Vec<f64>) {
        let mut grads = self.zeroed();
        let dinput = self.backward_into(cache, dgate, &mut grads);
        (grads, dinput)
    }

    /// Like [`backward`](Self::backward) but accumulates into `grads`.
    pub fn backward_into(
        &self,
        cache: &TunerCache,
        dgate: &Matrix,
        grads: &mut TunerParams,
    ) -> Vec<f64> {
        let dout: Vec<f64> = match self.variant {
            GateVariant::Fine => dgate.data.clone(),
            GateVariant::Coarse => (0..self.sources)
                .map(|i| dgate.row(i).iter().sum())
                .collect(),
        };
        let dz: Vec<f64> = dout
            .iter()
            .zip(&cache.out)
            .map(|(g, s)| g * s * (1.0 - s))
            .collect();
        add_outer(&mut grads.w2, &cache.act1, &dz);
        for (a, b) in grads.b2.iter_mut().zip(&dz) {
            *a += b;
        }
        let dact1 = mat_vec(&self.w2, &dz);
        let dpre1: Vec<f64> = dact1
            .iter()
            .zip(&cache.pre1)
            .map(|(g, &x)| g * gelu_grad(x))
            .collect();
        add_outer(&mut grads.w1, &cache.normed, &dpre1);
        for (a, b) in grads.b1.iter_mut().zip(&dpre1) {
            *a += b;
        }
        let dnormed = mat_vec(&self.w1, &dpre1);
        layer_norm_backward(
            &cache.ln,
            &self.norm_scale,
            &dnormed,
            &mut grads.norm_scale,
            &mut grads.norm_shift,
        )
    }
}

impl Parameters for TunerParams {
    fn blocks(&self) -> Vec<Block<'_>> {
        let n = self.input_len();
        vec![
            block!("norm_scale", 1, n, &self.norm_scale),
            block!("norm_shift", 1, n, &self.norm_shift),
            block!("w1", self.w1.rows, self.w1.cols, &self.w1.data),
            block!("b1", 1, self.b1.len(), &self.b1),
            block!("w2", self.w2.rows, self.w2.cols, &self.w2.data),
            block!("b2", 1, self.b2.len(), &self.b2),
        ]
    }

    fn blocks_mut(&mut self) -> Vec<BlockMut<'_>> {
        let n = self.sources * self.dim;
        let (r1, c1, r2, c2) = (self.w1.rows, self.w1.cols, self.w2.rows, self.w2.cols);
        let (l1, l2) = (self.b1.len(), self.b2.len());
        vec![
            block_mut!("norm_scale", 1, n, &mut self.norm_scale),
            block_mut!("norm_shift", 1, n, &mut self.norm_shift),
            block_mut!("w1", r1, c1, &mut self.w1.data),
            block_mut!("b1", 1, l1, &mut self.b1),
            block_mut!("w2", r2, c2, &mut self.w2.data),
            block_mut!("b2", 1, l2, &mut self.b2),
        ]
    }
}

#[derive(Debug, Clone)]
pub struct TunerCache {
    ln: LayerNormCache,
    normed: Vec<f64>,
    pre1: Vec<f64>,
    act1: Vec<f64>,
    out: Vec<f64>,
}

/// `N x d` gates in (0, 1). For the coarse variant `source_gates` holds the
/// pre-broadcast per-source vector.
#[derive(Debug, Clone, PartialEq)]
pub struct GateMatrix {
    pub values: Matrix,
    pub source_gates: Option<Vec<f64>>,
}

impl GateMatrix {
    pub fn from_matrix(values: Matrix) -> Self {
        Self {
            values,
            source_gates: None,
        }
    }
}

/// Gated compound embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct TunedPrompt(pub Matrix);

impl TunedPrompt {
    pub fn flat(&self) -> &[f64] {
        &self.0.data
    }
}

pub fn apply_gate(compound: &CompoundEmbedding, gate: &GateMatrix) -> Result<TunedPrompt> {
    if compound.shape() != gate.values.shape() {
        return Err(Error::ShapeMismatch {
            expected: compound.shape(),
            actual: gate.values.shape(),
        });
    }
    let (n, d) = compound.shape();
    let data = compound
        .flat()
        .iter()
        .zip(&gate.values.data)
        .map(|(x, g)| x * g)
        .collect();
    Ok(TunedPrompt(Matrix::from_vec(n, d, data)))
}

/// Per-source mean gate and the (lowest-index) most contributing source.
#[derive(Debug, Clone, PartialEq)]
pub struct ContributionVector {
    pub scores: Vec<f64>,
    pub argmax_source: usize,
}

pub fn contribution_scores(gate: &GateMatrix) -> ContributionVector {
    let m = &gate.values;
    // Shifted mean: exact for constant rows.
    let scores: Vec<f64> = (0..m.rows)
        .map(|i| {
            let row = m.row(i);
            row[0] + row.iter().map(|v| v - row[0]).sum::<f64>() / m.cols as f64
        })
        .collect();
    let argmax_source = argmax(&scores);
    ContributionVector {
        scores,
        argmax_source,
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn tiny(variant: GateVariant) -> (TunerParams, CompoundEmbedding) {
        let mut r = rng::stream(3, rng::purpose::INIT, &[]);
        let p = TunerParams::init(variant, 3, 4, 6, &mut r);
        let x =
            CompoundEmbedding::from_flat(3, 4, (0..12).map(|k| (k as f64 * 0.37).sin()).collect());
        (p, x)
    }

    #[test]
    fn zero_preactivation_gives_half() {
        let (mut p, x) = tiny(GateVariant::Coarse);
        p.w2.data.fill(0.0);
        let (g, _) = p.forward(&x).unwrap();
        assert!(g.values.data.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn coarse_rows_are_constant() {
        let (p, x) = tiny(GateVariant::Coarse);
        let (g, _) = p.forward(&x).unwrap();
        for i in 0..3 {
            let row = g.values.row(i);
            assert!(row.iter().all(|&v| v == row[0]));
            assert_eq!(g.source_gates.as_ref().unwrap()[i], row[0]);
        }
    }

    #[test]
    fn shape_is_checked() {
        let (p, _) = tiny(GateVariant::Fine);
        let bad = CompoundEmbedding::from_flat(2, 4, vec![0.0; 8]);
        assert!(matches!(p.forward(&bad), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn gate_application() {
        let c = CompoundEmbedding::from_flat(1, 2, vec![2.0, -4.0]);
        let g = GateMatrix::from_matrix(Matrix::from_vec(1, 2, vec![0.5, 0.25]));
        assert_eq!(apply_gate(&c, &g).unwrap().flat(), &[1.0, -1.0]);
    }

    #[test]
    fn contribution_is_row_mean_with_low_tie_break() {
        let g = GateMatrix::from_matrix(Matrix::from_vec(2, 3, vec![0.2, 0.4, 0.6, 0.5, 0.5, 0.5]));
        let c = contribution_scores(&g);
        assert!((c.scores[0] - 0.4).abs() < 1e-15);
        assert_eq!(c.argmax_source, 1);
        let tie = GateMatrix::from_matrix(Matrix::from_vec(2, 2, vec![0.5; 4]));
        assert_eq!(contribution_scores(&tie).argmax_source, 0);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let (p, x) = tiny(GateVariant::Fine);
        let (_, cache) = p.forward(&x).unwrap();
        let (g, dx) = p.backward(&cache, &Matrix::zeros(3, 4));
        assert!(g
            .blocks()
            .iter()
            .all(|b| b.values.iter().all(|&v| v == 0.0)));
        assert!(dx.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn coarse_backward_sums_rows() {
        // With a coarse tuner, an upstream gradient that only differs in how
        // it is spread within a row must produce identical parameter gradients.
        let (p, x) = tiny(GateVariant::Coarse);
        let (_, cache) = p.forward(&x).unwrap();
        let a = Matrix::from_vec(
            3,
            4,
            vec![1.0, 0.0, 0.0, 0.0, 0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0, -2.0],
        );
        let b = Matrix::from_vec(
            3,
            4,
            vec![
                0.25, 0.25, 0.25, 0.25, 0.0, 0.0, 0.0, 1.0, -0.5, -0.5, -0.5, -0.5,
            ],
        );
        let (ga, _) = p.backward(&cache, &a);
        let (gb, _) = p.backward(&cache, &b);
        for (x, y) in ga.b2.iter().zip(&gb.b2) {
            assert!((x - y).abs() < 1e-15);
        }
    }
}
