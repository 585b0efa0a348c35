//! Uniform view over trainable tensors, used by the optimizer, the gradient
//! checker and checkpoint serialisation.

use alloc::string::String;
use alloc::vec::Vec;

pub struct Block<'a> {
    pub name: String,
    pub shape: (usize, usize),
    pub values: &'a [f64],
}

pub struct BlockMut<'a> {
    pub name: String,
    pub shape: (usize, usize),
    pub values: &'a mut [f64],
}

/// A set of named parameter blocks. Gradients use the same type as the
/// parameters they belong to, so block order and shapes always line up.
pub trait Parameters: Clone {
    fn blocks(&self) -> Vec<Block<'_>>;
    fn blocks_mut(&mut self) -> Vec<BlockMut<'_>>;

    fn zeroed(&self) -> Self {
        let mut z = self.clone();
        for b in z.blocks_mut() {
            b.values.fill(0.0);
        }
        z
    }

    fn param_count(&self) -> usize {
        self.blocks().iter().map(|b| b.values.len()).sum()
    }

    fn is_finite(&self) -> bool {
        self.blocks()
            .iter()
            .all(|b| b.values.iter().all(|v| v.is_finite()))
    }

    /// `self += other`, blockwise.
    fn accumulate(&mut self, other: &Self) {
        let src = other.blocks();
        for (dst, src) in self.blocks_mut().into_iter().zip(src) {
            for (a, b) in dst.values.iter_mut().zip(src.values) {
                *a += b;
            }
        }
    }

    fn scale(&mut self, k: f64) {
        for b in self.blocks_mut() {
            for v in b.values.iter_mut() {
                *v *= k;
            }
        }
    }
}

/// Builds a [`Block`] from a named field.
#[macro_export]
#[doc(hidden)]
macro_rules! block {
    ($name:expr, $rows:expr, $cols:expr, $values:expr) => {
        $crate::params::Block {
            name: alloc::string::String::from($name),
            shape: ($rows, $cols),
            values: $values,
        }
    };
}

#[macro_export]
#[doc(hidden)]
macro_rules! block_mut {
    ($name:expr, $rows:expr, $cols:expr, $values:expr) => {
        $crate::params::BlockMut {
            name: alloc::string::String::from($name),
            shape: ($rows, $cols),
            values: $values,
        }
    };
}

/// Prefixes every block name, for composite models.
pub fn prefixed<'a, 'p>(
    prefix: &'p str,
    blocks: Vec<Block<'a>>,
) -> impl Iterator<Item = Block<'a>> + use<'a, 'p> {
    blocks.into_iter().map(move |mut b| {
        b.name = alloc::format!("{prefix}.{}", b.name);
        b
    })
}

pub fn prefixed_mut<'a, 'p>(
    prefix: &'p str,
    blocks: Vec<BlockMut<'a>>,
) -> impl Iterator<Item = BlockMut<'a>> + use<'a, 'p> {
    blocks.into_iter().map(move |mut b| {
        b.name = alloc::format!("{prefix}.{}", b.name);
        b
    })
}
