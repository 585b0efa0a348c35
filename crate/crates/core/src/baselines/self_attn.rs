//! Pre-norm transformer encoder block over the `N` source rows.
//!
//! Each source's pooled embedding is one token of width `d`; there are no
//! positional encodings, so the block is permutation-equivariant over sources.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::activation::{
    gelu, gelu_grad, layer_norm, layer_norm_backward, softmax, softmax_backward, LayerNormCache,
};
use crate::embedding::CompoundEmbedding;
use crate::error::{Error, Result};
use crate::linalg::{add_outer, affine, dot, mat_vec, Matrix};
use crate::params::{Block, BlockMut, Parameters};
use crate::{block, block_mut};

pub const HEADS: usize = 8;
pub const FFN_MULT: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct SelfAttnParams {
    pub sources: usize,
    pub dim: usize,
    pub ln1_scale: Vec<f64>,
    pub ln1_shift: Vec<f64>,
    pub wq: Matrix,
    pub bq: Vec<f64>,
    pub wk: Matrix,
    pub bk: Vec<f64>,
    pub wv: Matrix,
    pub bv: Vec<f64>,
    pub wo: Matrix,
    pub bo: Vec<f64>,
    pub ln2_scale: Vec<f64>,
    pub ln2_shift: Vec<f64>,
    pub ff_w1: Matrix,
    pub ff_b1: Vec<f64>,
    pub ff_w2: Matrix,
    pub ff_b2: Vec<f64>,
}

impl SelfAttnParams {
    pub fn init<R: Rng + ?Sized>(sources: usize, dim: usize, rng: &mut R) -> Result<Self> {
        if dim % HEADS != 0 {
            return Err(Error::ConfigInvalid(alloc::format!(
                "self-attention width {dim} is not divisible by {HEADS} heads"
            )));
        }
        let hidden = FFN_MULT * dim;
        Ok(Self {
            sources,
            dim,
            ln1_scale: vec![1.0; dim],
            ln1_shift: vec![0.0; dim],
            wq: Matrix::glorot(dim, dim, rng),
            bq: vec![0.0; dim],
            wk: Matrix::glorot(dim, dim, rng),
            bk: vec![0.0; dim],
            wv: Matrix::glorot(dim, dim, rng),
            bv: vec![0.0; dim],
            wo: Matrix::glorot(dim, dim, rng),
            bo: vec![0.0; dim],
            ln2_scale: vec![1.0; dim],
            ln2_shift: vec![0.0; dim],
            ff_w1: Matrix::glorot(dim, hidden, rng),
            ff_b1: vec![0.0; hidden],
            ff_w2: Matrix::glorot(hidden, dim, rng),
            ff_b2: vec![0.0; dim],
        })
    }

    fn head_dim(&self) -> usize {
        self.dim / HEADS
    }

    /// Returns the flattened `N * d` block output.
    pub fn forward(&self, compound: &CompoundEmbedding) -> Result<(Vec<f64>, SelfAttnCache)> {
        if compound.shape() != (self.sources, self.dim) {
            return Err(Error::ShapeMismatch {
                expected: (self.sources, self.dim),
                actual: compound.shape(),
            });
        }
        let (n, d, hd) = (self.sources, self.dim, self.head_dim());
        let scale = 1.0 / libm::sqrt(hd as f64);
        let mut x1 = Vec::with_capacity(n);
        let mut ln1 = Vec::with_capacity(n);
        for i in 0..n {
            let (y, c) = layer_norm(compound.row(i), &self.ln1_scale, &self.ln1_shift);
            x1.push(y);
            ln1.push(c);
        }
        let q: Vec<Vec<f64>> = x1.iter().map(|x| affine(x, &self.wq, &self.bq)).collect();
        let k: Vec<Vec<f64>> = x1.iter().map(|x| affine(x, &self.wk, &self.bk)).collect();
        let v: Vec<Vec<f64>> = x1.iter().map(|x| affine(x, &self.wv, &self.bv)).collect();

        // probs[h][i] is the attention row of token i in head h.
        let mut probs = Vec::with_capacity(HEADS);
        let mut o = vec![vec![0.0; d]; n];
        for h in 0..HEADS {
            let span = h * hd..(h + 1) * hd;
            let mut rows = Vec::with_capacity(n);
            for i in 0..n {
                let scores: Vec<f64> = (0..n)
                    .map(|j| dot(&q[i][span.clone()], &k[j][span.clone()]) * scale)
                    .collect();
                let p = softmax(&scores);
                for (j, &pj) in p.iter().enumerate() {
                    for c in span.clone() {
                        o[i][c] += pj * v[j][c];
                    }
                }
                rows.push(p);
            }
            probs.push(rows);
        }

        let mut r1 = Vec::with_capacity(n);
        let mut x2 = Vec::with_capacity(n);
        let mut ln2 = Vec::with_capacity(n);
        let mut f1 = Vec::with_capacity(n);
        let mut act = Vec::with_capacity(n);
        let mut out = Vec::with_capacity(n * d);
        for i in 0..n {
            let attn = affine(&o[i], &self.wo, &self.bo);
            let r: Vec<f64> = compound
                .row(i)
                .iter()
                .zip(&attn)
                .map(|(a, b)| a + b)
                .collect();
            let (y, c) = layer_norm(&r, &self.ln2_scale, &self.ln2_shift);
            let pre = affine(&y, &self.ff_w1, &self.ff_b1);
            let g: Vec<f64> = pre.iter().map(|&z| gelu(z)).collect();
            let f2 = affine(&g, &self.ff_w2, &self.ff_b2);
            out.extend(r.iter().zip(&f2).map(|(a, b)| a + b));
            r1.push(r);
            x2.push(y);
            ln2.push(c);
            f1.push(pre);
            act.push(g);
        }
        Ok((
            out,
            SelfAttnCache {
                x1,
                ln1,
                q,
                k,
                v,
                probs,
                o,
                x2,
                ln2,
                f1,
                act,
            },
        ))
    }

    /// Accumulates parameter gradients and returns `d loss / d compound` (flat).
    pub fn backward_into(
        &self,
        cache: &SelfAttnCache,
        dout: &[f64],
        grads: &mut SelfAttnParams,
    ) -> Vec<f64> {
        let (n, d, hd) = (self.sources, self.dim, self.head_dim());
        let scale = 1.0 / libm::sqrt(hd as f64);
        let mut dx = vec![0.0; n * d];
        let mut dr1 = vec![vec![0.0; d]; n];
        for i in 0..n {
            let df2 = &dout[i * d..(i + 1) * d];
            add_outer(&mut grads.ff_w2, &cache.act[i], df2);
            add_into(&mut grads.ff_b2, df2);
            let dg = mat_vec(&self.ff_w2, df2);
            let df1: Vec<f64> = dg
                .iter()
                .zip(&cache.f1[i])
                .map(|(g, &z)| g * gelu_grad(z))
                .collect();
            add_outer(&mut grads.ff_w1, &cache.x2[i], &df1);
            add_into(&mut grads.ff_b1, &df1);
            let dx2 = mat_vec(&self.ff_w1, &df1);
            let dln = layer_norm_backward(
                &cache.ln2[i],
                &self.ln2_scale,
                &dx2,
                &mut grads.ln2_scale,
                &mut grads.ln2_shift,
            );
            for c in 0..d {
                dr1[i][c] = df2[c] + dln[c];
            }
            // Residual path into the block input.
            for c in 0..d {
                dx[i * d + c] += dr1[i][c];
            }
        }

        let mut do_ = Vec::with_capacity(n);
        for i in 0..n {
            add_outer(&mut grads.wo, &cache.o[i], &dr1[i]);
            add_into(&mut grads.bo, &dr1[i]);
            do_.push(mat_vec(&self.wo, &dr1[i]));
        }

        let mut dq = vec![vec![0.0; d]; n];
        let mut dk = vec![vec![0.0; d]; n];
        let mut dv = vec![vec![0.0; d]; n];
        for h in 0..HEADS {
            let span = h * hd..(h + 1) * hd;
            for i in 0..n {
                let p = &cache.probs[h][i];
                let dp: Vec<f64> = (0..n)
                    .map(|j| dot(&do_[i][span.clone()], &cache.v[j][span.clone()]))
                    .collect();
                for j in 0..n {
                    for c in span.clone() {
                        dv[j][c] += p[j] * do_[i][c];
                    }
                }
                let ds = softmax_backward(p, &dp);
                for j in 0..n {
                    let g = ds[j] * scale;
                    if g == 0.0 {
                        continue;
                    }
                    for c in span.clone() {
                        dq[i][c] += g * cache.k[j][c];
                        dk[j][c] += g * cache.q[i][c];
                    }
                }
            }
        }

        for i in 0..n {
            add_outer(&mut grads.wq, &cache.x1[i], &dq[i]);
            add_into(&mut grads.bq, &dq[i]);
            add_outer(&mut grads.wk, &cache.x1[i], &dk[i]);
            add_into(&mut grads.bk, &dk[i]);
            add_outer(&mut grads.wv, &cache.x1[i], &dv[i]);
            add_into(&mut grads.bv, &dv[i]);
            let mut dx1 = mat_vec(&self.wq, &dq[i]);
            add_into(&mut dx1, &mat_vec(&self.wk, &dk[i]));
            add_into(&mut dx1, &mat_vec(&self.wv, &dv[i]));
            let dln = layer_norm_backward(
                &cache.ln1[i],
                &self.ln1_scale,
                &dx1,
                &mut grads.ln1_scale,
                &mut grads.ln1_shift,
            );
            for c in 0..d {
                dx[i * d + c] += dln[c];
            }
        }
        dx
    }
}

fn add_into(acc: &mut [f64], x: &[f64]) {
    for (a, b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}

#[derive(Debug, Clone)]
pub struct SelfAttnCache {
    x1: Vec<Vec<f64>>,
    ln1: Vec<LayerNormCache>,
    q: Vec<Vec<f64>>,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    probs: Vec<Vec<Vec<f64>>>,
    o: Vec<Vec<f64>>,
    x2: Vec<Vec<f64>>,
    ln2: Vec<LayerNormCache>,
    f1: Vec<Vec<f64>>,
    act: Vec<Vec<f64>>,
}

impl SelfAttnCache {
    /// Attention rows, indexed `[head][query token]`.
    pub fn attention(&self) -> &[Vec<Vec<f64>>] {
        &self.probs
    }
}

impl Parameters for SelfAttnParams {
    fn blocks(&self) -> Vec<Block<'_>> {
        let d = self.dim;
        let hid = self.ff_b1.len();
        vec![
            block!("ln1_scale", 1, d, &self.ln1_scale),
            block!("ln1_shift", 1, d, &self.ln1_shift),
            block!("wq", d, d, &self.wq.data),
            block!("bq", 1, d, &self.bq),
            block!("wk", d, d, &self.wk.data),
            block!("bk", 1, d, &self.bk),
            block!("wv", d, d, &self.wv.data),
            block!("bv", 1, d, &self.bv),
            block!("wo", d, d, &self.wo.data),
            block!("bo", 1, d, &self.bo),
            block!("ln2_scale", 1, d, &self.ln2_scale),
            block!("ln2_shift", 1, d, &self.ln2_shift),
            block!("ff_w1", d, hid, &self.ff_w1.data),
            block!("ff_b1", 1, hid, &self.ff_b1),
            block!("ff_w2", hid, d, &self.ff_w2.data),
            block!("ff_b2", 1, d, &self.ff_b2),
        ]
    }

    fn blocks_mut(&mut self) -> Vec<BlockMut<'_>> {
        let d = self.dim;
        let hid = self.ff_b1.len();
        vec![
            block_mut!("ln1_scale", 1, d, &mut self.ln1_scale),
            block_mut!("ln1_shift", 1, d, &mut self.ln1_shift),
            block_mut!("wq", d, d, &mut self.wq.data),
            block_mut!("bq", 1, d, &mut self.bq),
            block_mut!("wk", d, d, &mut self.wk.data),
            block_mut!("bk", 1, d, &mut self.bk),
            block_mut!("wv", d, d, &mut self.wv.data),
            block_mut!("bv", 1, d, &mut self.bv),
            block_mut!("wo", d, d, &mut self.wo.data),
            block_mut!("bo", 1, d, &mut self.bo),
            block_mut!("ln2_scale", 1, d, &mut self.ln2_scale),
            block_mut!("ln2_shift", 1, d, &mut self.ln2_shift),
            block_mut!("ff_w1", d, hid, &mut self.ff_w1.data),
            block_mut!("ff_b1", 1, hid, &mut self.ff_b1),
            block_mut!("ff_w2", hid, d, &mut self.ff_w2.data),
            block_mut!("ff_b2", 1, d, &mut self.ff_b2),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn setup(n: usize) -> (SelfAttnParams, CompoundEmbedding) {
        let mut r = rng::stream(21, rng::purpose::INIT, &[]);
        let p = SelfAttnParams::init(n, 16, &mut r).unwrap();
        let x = CompoundEmbedding::from_flat(
            n,
            16,
            (0..n * 16)
                .map(|k| ((k * 7 % 11) as f64 - 5.0) / 3.0)
                .collect(),
        );
        (p, x)
    }

    #[test]
    fn attention_rows_are_distributions() {
        let (p, x) = setup(4);
        let (_, cache) = p.forward(&x).unwrap();
        for head in cache.attention() {
            for row in head {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn equivariant_under_source_permutation() {
        let (p, x) = setup(4);
        let perm = [2usize, 0, 3, 1];
        let rows: Vec<&[f64]> = perm.iter().map(|&i| x.row(i)).collect();
        let xp = CompoundEmbedding::from_rows(&rows);
        let (y, _) = p.forward(&x).unwrap();
        let (yp, _) = p.forward(&xp).unwrap();
        for (out_row, &src) in perm.iter().enumerate() {
            for c in 0..16 {
                assert!((yp[out_row * 16 + c] - y[src * 16 + c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_source_attends_to_itself() {
        let (p, x) = setup(1);
        let (_, cache) = p.forward(&x).unwrap();
        for head in cache.attention() {
            assert_eq!(head[0], vec![1.0]);
        }
    }

    #[test]
    fn width_must_split_into_heads() {
        let mut r = rng::stream(0, 0, &[]);
        assert!(SelfAttnParams::init(2, 12, &mut r).is_err());
    }
}
