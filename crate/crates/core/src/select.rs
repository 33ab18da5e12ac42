//! Dimension-wise selection: one comprehensive vector per feature set.
//!
//! `Max` keeps, per dimension, the largest value over the set (ties to the
//! lowest row); `Mean` averages instead and exists for ablation. The result
//! is L2-normalized. Cosine similarity is invariant under positive rescaling,
//! so normalization changes no similarity, only the geometry seen by mixup.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{normalize, normalize_backward, Matrix, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMode {
    #[default]
    Max,
    Mean,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    /// Unit-norm output.
    pub values: Vector,
    /// Pre-normalization output.
    pub raw: Vector,
    pub mode: SelectionMode,
    /// Winning row per dimension (empty for `Mean`).
    pub winners: Vec<usize>,
    pub count: usize,
}

impl EmbeddingVector {
    pub fn dim(&self) -> usize {
        self.values.dim()
    }
}

pub fn select(features: &Matrix, mode: SelectionMode) -> Result<EmbeddingVector> {
    let (n, d) = features.shape();
    if n == 0 {
        return Err(Error::EmptySet);
    }
    let (raw, winners) = match mode {
        SelectionMode::Max => {
            let mut raw = features.row(0).to_vec();
            let mut winners = alloc::vec![0usize; d];
            for r in 1..n {
                for (j, &x) in features.row(r).iter().enumerate() {
                    if x > raw[j] {
                        raw[j] = x;
                        winners[j] = r;
                    }
                }
            }
            (raw, winners)
        }
        SelectionMode::Mean => {
            let mut raw = alloc::vec![0.0; d];
            for r in features.iter_rows() {
                for (o, x) in raw.iter_mut().zip(r) {
                    *o += x;
                }
            }
            raw.iter_mut().for_each(|o| *o /= n as f64);
            (raw, Vec::new())
        }
    };
    let values = normalize(&raw)?;
    Ok(EmbeddingVector { values: values.into(), raw: raw.into(), mode, winners, count: n })
}

/// Gradient w.r.t. the set, given a gradient w.r.t. the normalized output.
pub fn select_backward(ev: &EmbeddingVector, upstream: &[f64]) -> Result<Matrix> {
    if upstream.len() != ev.dim() {
        return Err(Error::ShapeMismatch("upstream length differs from embedding dimension"));
    }
    let g_raw = normalize_backward(&ev.raw, upstream)?;
    let mut grad = Matrix::zeros(ev.count, ev.dim());
    match ev.mode {
        SelectionMode::Max => {
            for (j, (&w, g)) in ev.winners.iter().zip(&g_raw).enumerate() {
                grad.set(w, j, *g);
            }
        }
        SelectionMode::Mean => {
            let w = 1.0 / ev.count as f64;
            for r in 0..ev.count {
                for (o, g) in grad.row_mut(r).iter_mut().zip(&g_raw) {
                    *o = w * g;
                }
            }
        }
    }
    Ok(grad)
}
