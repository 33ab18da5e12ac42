//! Adaptive feature aggregation by Top-k bipartite merging.
//!
//! 1. shuffle the `N` vectors;
//! 2. the first `ceil(N/2)` shuffled vectors form `src`, the rest `dst`;
//! 3. every `src` vector is matched to its most cosine-similar `dst` vector
//!    (several `src` may pick the same `dst`);
//! 4. matches are sorted by similarity, descending, ties to the lower `src`
//!    index, and the first `k` are kept;
//! 5. each `dst` hit by `m >= 1` kept matches is merged with those `m` `src`
//!    vectors into their element-wise mean;
//! 6. output = merged vectors (by `dst` position) ++ untouched `src` ++
//!    untouched `dst`, both in shuffled order.
//!
//! Every kept match removes exactly one vector, so the output has `N - k`
//! rows. Pair selection is a routing decision: backward distributes gradients
//! along the recorded groups and does not differentiate the similarities.

use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{cosine_or_zero, Matrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AggregationConfig {
    pub k: usize,
    pub rng_seed: u64,
}

/// Largest admissible `k` for a set of `count` vectors.
pub fn max_k(count: usize) -> usize {
    count / 2
}

/// A `src` vector and its best `dst` partner, as positions within the
/// shuffled halves.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub src: usize,
    pub dst: usize,
    pub similarity: f64,
}

/// Everything needed to replay an aggregation or route gradients through it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeTrace {
    pub input_count: usize,
    /// `permutation[p]` is the input row at shuffled position `p`.
    pub permutation: Vec<usize>,
    pub src_len: usize,
    /// One match per `src` position, in `src` order.
    pub matches: Vec<MatchedPair>,
    /// The kept Top-k, in selection order.
    pub kept: Vec<MatchedPair>,
    /// Input rows averaged into each output row.
    pub groups: Vec<Vec<usize>>,
}

impl MergeTrace {
    pub fn output_count(&self) -> usize {
        self.groups.len()
    }

    /// Re-applies the recorded routing to `features`: same groups, no
    /// re-shuffle, no re-matching.
    pub fn replay(&self, features: &Matrix) -> Result<Matrix> {
        if features.rows() != self.input_count {
            return Err(Error::TraceMismatch);
        }
        Ok(merge_groups(features, &self.groups))
    }
}

fn merge_groups(features: &Matrix, groups: &[Vec<usize>]) -> Matrix {
    let mut out = Matrix::zeros(groups.len(), features.cols());
    for (g, members) in groups.iter().enumerate() {
        let row = out.row_mut(g);
        let w = 1.0 / members.len() as f64;
        for &m in members {
            for (o, x) in row.iter_mut().zip(features.row(m)) {
                *o += x;
            }
        }
        row.iter_mut().for_each(|o| *o *= w);
    }
    out
}

fn check_k(count: usize, k: usize) -> Result<()> {
    if count < 2 {
        return Err(Error::DegenerateSet { count });
    }
    if k == 0 || k > max_k(count) {
        return Err(Error::InvalidK { k, max: max_k(count) });
    }
    Ok(())
}

/// Sorts matches by similarity, descending; ties go to the lower `src`.
pub fn rank_matches(matches: &[MatchedPair]) -> Vec<MatchedPair> {
    let mut sorted = matches.to_vec();
    sorted.sort_by(|a, b| match b.similarity.partial_cmp(&a.similarity) {
        Some(Ordering::Equal) | None => a.src.cmp(&b.src),
        Some(o) => o,
    });
    sorted
}

/// Shuffles with `rng`, then merges.
pub fn aggregate(features: &Matrix, k: usize, rng: &mut Rng) -> Result<(Matrix, MergeTrace)> {
    check_k(features.rows(), k)?;
    let permutation = rng.permutation(features.rows());
    aggregate_with_permutation(features, k, &permutation)
}

/// Steps 2-6 for an explicit shuffle.
pub fn aggregate_with_permutation(features: &Matrix, k: usize, permutation: &[usize]) -> Result<(Matrix, MergeTrace)> {
    let n = features.rows();
    check_k(n, k)?;
    if permutation.len() != n {
        return Err(Error::ShapeMismatch("permutation length differs from set size"));
    }
    let src_len = n.div_ceil(2);
    let (src, dst) = permutation.split_at(src_len);

    let matches: Vec<MatchedPair> = src
        .iter()
        .enumerate()
        .map(|(s, &si)| {
            let a = features.row(si);
            let mut best = MatchedPair { src: s, dst: 0, similarity: f64::NEG_INFINITY };
            for (d, &di) in dst.iter().enumerate() {
                let sim = cosine_or_zero(a, features.row(di));
                if sim > best.similarity {
                    best = MatchedPair { src: s, dst: d, similarity: sim };
                }
            }
            best
        })
        .collect();

    let kept: Vec<MatchedPair> = rank_matches(&matches).into_iter().take(k).collect();

    let mut src_used = vec![false; src.len()];
    let mut by_dst: Vec<Vec<usize>> = vec![Vec::new(); dst.len()];
    for m in &kept {
        src_used[m.src] = true;
        by_dst[m.dst].push(m.src);
    }
    let mut groups = Vec::with_capacity(n - k);
    for (d, srcs) in by_dst.iter_mut().enumerate() {
        if !srcs.is_empty() {
            srcs.sort_unstable();
            let mut g: Vec<usize> = srcs.iter().map(|&s| src[s]).collect();
            g.push(dst[d]);
            groups.push(g);
        }
    }
    groups.extend(src.iter().zip(&src_used).filter(|(_, &u)| !u).map(|(&i, _)| vec![i]));
    groups.extend(dst.iter().zip(&by_dst).filter(|(_, g)| g.is_empty()).map(|(&i, _)| vec![i]));
    debug_assert_eq!(groups.len(), n - k);

    let out = merge_groups(features, &groups);
    let trace = MergeTrace { input_count: n, permutation: permutation.to_vec(), src_len, matches, kept, groups };
    Ok((out, trace))
}

/// Routes gradients on the reduced set back to the input rows: each member
/// of a merge group receives `1/|group|` of the group's gradient.
pub fn aggregate_backward(trace: &MergeTrace, upstream: &Matrix) -> Result<Matrix> {
    if upstream.rows() != trace.groups.len() {
        return Err(Error::TraceMismatch);
    }
    let mut grad = Matrix::zeros(trace.input_count, upstream.cols());
    for (g, members) in trace.groups.iter().enumerate() {
        let w = 1.0 / members.len() as f64;
        let up = upstream.row(g);
        for &m in members {
            if m >= trace.input_count {
                return Err(Error::TraceMismatch);
            }
            for (o, u) in grad.row_mut(m).iter_mut().zip(up) {
                *o += w * u;
            }
        }
    }
    Ok(grad)
}
