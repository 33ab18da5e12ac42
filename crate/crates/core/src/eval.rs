//! Recall@K retrieval evaluation.
//!
//! Similarity matrices are `images x captions`. Image-to-text queries are
//! rows and succeed when any of the image's captions ranks within the top
//! K; text-to-image queries are columns. Ties rank the lower candidate index
//! first.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{cosine, Matrix};

pub const RECALL_KS: [usize; 3] = [1, 5, 10];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    ImageToText,
    TextToImage,
}

/// Caption → image relation over `num_images` images.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruth {
    pub num_images: usize,
    pub caption_image: Vec<usize>,
}

impl GroundTruth {
    pub fn new(num_images: usize, caption_image: Vec<usize>) -> Result<Self> {
        if caption_image.iter().any(|&i| i >= num_images) {
            return Err(Error::Validation("caption references an image out of range".into()));
        }
        let mut covered = alloc::vec![false; num_images];
        caption_image.iter().for_each(|&i| covered[i] = true);
        if covered.iter().any(|c| !c) {
            return Err(Error::Validation("ground truth is not total: an image has no caption".into()));
        }
        Ok(GroundTruth { num_images, caption_image })
    }

    /// Each image matched by captions `c * i .. c * (i + 1)`.
    pub fn uniform(num_images: usize, captions_per_image: usize) -> Self {
        GroundTruth {
            num_images,
            caption_image: (0..num_images * captions_per_image).map(|j| j / captions_per_image).collect(),
        }
    }

    pub fn num_captions(&self) -> usize {
        self.caption_image.len()
    }
}

/// Cosine similarity of every image against every caption.
pub fn rank_all<V: AsRef<[f64]>, T: AsRef<[f64]>>(vis: &[V], txt: &[T]) -> Result<Matrix> {
    if vis.is_empty() || txt.is_empty() {
        return Err(Error::EmptySet);
    }
    let mut sim = Matrix::zeros(vis.len(), txt.len());
    for (i, v) in vis.iter().enumerate() {
        for (j, t) in txt.iter().enumerate() {
            sim.set(i, j, cosine(v.as_ref(), t.as_ref())?);
        }
    }
    Ok(sim)
}

/// 0-based rank of `target` among `scores`.
fn rank_of(scores: impl Iterator<Item = f64> + Clone, target: usize) -> usize {
    let t = scores.clone().nth(target).expect("target in range");
    scores.enumerate().filter(|&(j, s)| s > t || (s == t && j < target)).count()
}

/// Best (0-based) rank of a true match for every query.
pub fn query_ranks(sim: &Matrix, gt: &GroundTruth, direction: Direction) -> Result<Vec<usize>> {
    if sim.shape() != (gt.num_images, gt.num_captions()) {
        return Err(Error::ShapeMismatch("similarity matrix is not images x captions"));
    }
    let ranks = match direction {
        Direction::ImageToText => {
            let mut positives: Vec<Vec<usize>> = alloc::vec![Vec::new(); gt.num_images];
            for (j, &i) in gt.caption_image.iter().enumerate() {
                positives[i].push(j);
            }
            (0..gt.num_images)
                .map(|i| {
                    let row = sim.row(i);
                    positives[i].iter().map(|&p| rank_of(row.iter().copied(), p)).min().unwrap_or(usize::MAX)
                })
                .collect()
        }
        Direction::TextToImage => gt
            .caption_image
            .iter()
            .enumerate()
            .map(|(j, &i)| rank_of((0..gt.num_images).map(|r| sim.get(r, j)), i))
            .collect(),
    };
    Ok(ranks)
}

/// Fraction of queries with a true match in the top `k`.
pub fn recall_at_k(sim: &Matrix, gt: &GroundTruth, k: usize, direction: Direction) -> Result<f64> {
    if k == 0 {
        return Err(Error::InvalidK { k, max: usize::MAX });
    }
    let ranks = query_ranks(sim, gt, direction)?;
    Ok(ranks.iter().filter(|&&r| r < k).count() as f64 / ranks.len() as f64)
}

/// R@1, R@5, R@10 per direction, as fractions in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub i2t: [f64; 3],
    pub t2i: [f64; 3],
    pub fold_count: usize,
}

impl RetrievalReport {
    /// Sum of all six recalls in percentage points (600 is perfect).
    pub fn rsum(&self) -> f64 {
        100.0 * (self.i2t.iter().sum::<f64>() + self.t2i.iter().sum::<f64>())
    }

    pub fn get(&self, direction: Direction) -> [f64; 3] {
        match direction {
            Direction::ImageToText => self.i2t,
            Direction::TextToImage => self.t2i,
        }
    }

    /// Component-wise mean.
    pub fn average(reports: &[RetrievalReport]) -> Option<RetrievalReport> {
        if reports.is_empty() {
            return None;
        }
        let n = reports.len() as f64;
        let mut out = RetrievalReport { i2t: [0.0; 3], t2i: [0.0; 3], fold_count: reports.len() };
        for r in reports {
            for k in 0..3 {
                out.i2t[k] += r.i2t[k] / n;
                out.t2i[k] += r.t2i[k] / n;
            }
        }
        Some(out)
    }
}

pub fn evaluate(sim: &Matrix, gt: &GroundTruth) -> Result<RetrievalReport> {
    let recalls = |direction| -> Result<[f64; 3]> {
        let ranks = query_ranks(sim, gt, direction)?;
        let n = ranks.len() as f64;
        Ok(RECALL_KS.map(|k| ranks.iter().filter(|&&r| r < k).count() as f64 / n))
    };
    Ok(RetrievalReport { i2t: recalls(Direction::ImageToText)?, t2i: recalls(Direction::TextToImage)?, fold_count: 1 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldedReport {
    pub folds: Vec<RetrievalReport>,
    pub averaged: RetrievalReport,
    pub full: RetrievalReport,
}

/// Contiguous-fold protocol: images split into `folds` equal blocks by
/// index, each evaluated against its own captions, recalls averaged. Images
/// beyond `folds * floor(n / folds)` are dropped from the folds but kept in
/// the full-set report.
pub fn five_fold_eval(sim: &Matrix, gt: &GroundTruth, folds: usize) -> Result<FoldedReport> {
    let n = gt.num_images;
    if folds == 0 || n < folds {
        return Err(Error::InsufficientData { images: n, folds });
    }
    let full = evaluate(sim, gt)?;
    let per = n / folds;
    let mut reports = Vec::with_capacity(folds);
    for f in 0..folds {
        let (lo, hi) = (f * per, (f + 1) * per);
        let caps: Vec<usize> = (0..gt.num_captions()).filter(|&j| (lo..hi).contains(&gt.caption_image[j])).collect();
        let mut sub = Matrix::zeros(per, caps.len());
        for i in 0..per {
            for (c, &j) in caps.iter().enumerate() {
                sub.set(i, c, sim.get(lo + i, j));
            }
        }
        let sub_gt = GroundTruth::new(per, caps.iter().map(|&j| gt.caption_image[j] - lo).collect())?;
        reports.push(evaluate(&sub, &sub_gt)?);
    }
    let averaged = RetrievalReport::average(&reports).expect("at least one fold");
    Ok(FoldedReport { folds: reports, averaged, full })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    fn random_sim(rng: &mut Rng, images: usize, caps: usize, levels: Option<u64>) -> Matrix {
        let mut m = Matrix::zeros(images, caps);
        for x in m.as_mut_slice() {
            *x = match levels {
                // coarse grid to force ties
                Some(l) => (rng.below(l as usize)) as f64 / l as f64,
                None => rng.uniform(-1.0, 1.0),
            };
        }
        m
    }

    /// Sort-and-scan oracle: full stable sort of candidates by score desc.
    fn oracle_recall(sim: &Matrix, gt: &GroundTruth, k: usize, direction: Direction) -> f64 {
        let queries = match direction {
            Direction::ImageToText => gt.num_images,
            Direction::TextToImage => gt.num_captions(),
        };
        let mut hits = 0;
        for q in 0..queries {
            let (scores, is_match): (Vec<f64>, Vec<bool>) = match direction {
                Direction::ImageToText => (0..gt.num_captions()).map(|j| (sim.get(q, j), gt.caption_image[j] == q)).unzip(),
                Direction::TextToImage => (0..gt.num_images).map(|i| (sim.get(i, q), gt.caption_image[q] == i)).unzip(),
            };
            let mut order: Vec<usize> = (0..scores.len()).collect();
            order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
            if order.iter().take(k).any(|&c| is_match[c]) {
                hits += 1;
            }
        }
        hits as f64 / queries as f64
    }

    #[test]
    fn rank_all_examples() {
        let one = rank_all(&[vec![0.3, 0.4]], &[vec![0.3, 0.4]]).unwrap();
        assert!((one.get(0, 0) - 1.0).abs() < 1e-15);
        let basis = [vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
        let id = rank_all(&basis, &basis).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(id.get(i, j), if i == j { 1.0 } else { 0.0 });
            }
        }
        assert!(rank_all(&[vec![1.0]], &[vec![1.0, 0.0]]).is_err());

        let mut rng = Rng::new(10);
        let v: Vec<Vec<f64>> = (0..10).map(|_| (0..8).map(|_| rng.normal()).collect()).collect();
        let t: Vec<Vec<f64>> = (0..50).map(|_| (0..8).map(|_| rng.normal()).collect()).collect();
        let sim = rank_all(&v, &t).unwrap();
        for i in 0..10 {
            for j in 0..50 {
                let direct = crate::numerics::dot(&v[i], &t[j]) / (crate::numerics::norm(&v[i]) * crate::numerics::norm(&t[j]));
                assert!((sim.get(i, j) - direct).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn recall_examples() {
        let gt = GroundTruth::uniform(3, 1);
        let diag = Matrix::from_rows(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        assert_eq!(recall_at_k(&diag, &gt, 1, Direction::ImageToText).unwrap(), 1.0);
        // anti-diagonal best matches: each query's top candidate is wrong
        let anti = Matrix::from_rows(&[[0.1, 0.2, 0.9], [0.2, 0.1, 0.9], [0.9, 0.2, 0.1]]).unwrap();
        assert_eq!(recall_at_k(&anti, &gt, 1, Direction::ImageToText).unwrap(), 0.0);
        assert_eq!(recall_at_k(&anti, &gt, 1, Direction::TextToImage).unwrap(), 0.0);
        assert_eq!(recall_at_k(&anti, &gt, 3, Direction::TextToImage).unwrap(), 1.0);
        assert_eq!(recall_at_k(&anti, &gt, 10, Direction::ImageToText).unwrap(), 1.0);
        assert!(matches!(recall_at_k(&anti, &gt, 0, Direction::ImageToText), Err(Error::InvalidK { .. })));
    }

    #[test]
    fn ties_rank_lower_index_first() {
        let gt = GroundTruth::uniform(2, 1);
        let flat = Matrix::from_rows(&[[0.5, 0.5], [0.5, 0.5]]).unwrap();
        let r = evaluate(&flat, &gt).unwrap();
        assert_eq!(r.i2t[0], 0.5);
        assert_eq!(r.t2i[0], 0.5);
    }

    #[test]
    fn any_caption_counts_for_image_queries() {
        let gt = GroundTruth::uniform(2, 2);
        let sim = Matrix::from_rows(&[[0.1, 0.9, 0.5, 0.2], [0.3, 0.2, 0.9, 0.1]]).unwrap();
        assert_eq!(recall_at_k(&sim, &gt, 1, Direction::ImageToText).unwrap(), 1.0);
    }

    #[test]
    fn oracle_equivalence_on_random_matrices() {
        let mut rng = Rng::new(31);
        for case in 0..200 {
            let images = 2 + rng.below(20);
            let cpi = 1 + rng.below(5);
            let gt = GroundTruth::uniform(images, cpi);
            let sim = random_sim(&mut rng, images, images * cpi, if case % 2 == 0 { Some(4) } else { None });
            for k in [1, 5, 10] {
                for d in [Direction::ImageToText, Direction::TextToImage] {
                    assert_eq!(recall_at_k(&sim, &gt, k, d).unwrap(), oracle_recall(&sim, &gt, k, d), "case {case} k {k} {d:?}");
                }
            }
        }
    }

    #[test]
    fn perfect_retriever_scores_600() {
        let gt = GroundTruth::uniform(50, 5);
        let mut sim = Matrix::zeros(50, 250);
        for (j, &i) in gt.caption_image.iter().enumerate() {
            sim.set(i, j, 1.0);
        }
        let folded = five_fold_eval(&sim, &gt, 5).unwrap();
        assert_eq!(folded.full.rsum(), 600.0);
        assert_eq!(folded.averaged.rsum(), 600.0);
        assert_eq!(folded.folds.len(), 5);
        assert_eq!(folded.averaged.fold_count, 5);
    }

    #[test]
    fn identical_folds_average_to_one_fold() {
        let mut rng = Rng::new(3);
        let block = random_sim(&mut rng, 4, 8, None);
        let gt = GroundTruth::uniform(20, 2);
        let mut sim = Matrix::from_vec(20, 40, alloc::vec![-5.0; 800]).unwrap();
        for f in 0..5 {
            for i in 0..4 {
                for j in 0..8 {
                    sim.set(f * 4 + i, f * 8 + j, block.get(i, j));
                }
            }
        }
        let folded = five_fold_eval(&sim, &gt, 5).unwrap();
        let single = evaluate(&block, &GroundTruth::uniform(4, 2)).unwrap();
        for k in 0..3 {
            assert!((folded.averaged.i2t[k] - single.i2t[k]).abs() < 1e-12);
            assert!((folded.averaged.t2i[k] - single.t2i[k]).abs() < 1e-12);
        }
        assert!(matches!(five_fold_eval(&block, &GroundTruth::uniform(4, 2), 5), Err(Error::InsufficientData { .. })));
    }

    #[test]
    fn chance_level_recall() {
        // 100 images x 5 captions, random embeddings: t2i R@1 ~ 1/100.
        // Over 50 seeds the mean of 500-query recalls has std
        // sqrt(p(1-p)/(500*50)) ~ 6.3e-4.
        let mut total = 0.0;
        for seed in 0..50 {
            let mut rng = Rng::new(1000 + seed);
            let v: Vec<Vec<f64>> = (0..100).map(|_| (0..16).map(|_| rng.normal()).collect()).collect();
            let t: Vec<Vec<f64>> = (0..500).map(|_| (0..16).map(|_| rng.normal()).collect()).collect();
            let sim = rank_all(&v, &t).unwrap();
            total += recall_at_k(&sim, &GroundTruth::uniform(100, 5), 1, Direction::TextToImage).unwrap();
        }
        let mean = total / 50.0;
        let sigma = (0.01f64 * 0.99 / 25_000.0).sqrt();
        assert!((mean - 0.01).abs() < 3.0 * sigma, "{mean}");
    }

    proptest! {
        #[test]
        fn monotone_transform_invariance(seed in any::<u64>(), images in 2usize..10) {
            let mut rng = Rng::new(seed);
            let gt = GroundTruth::uniform(images, 3);
            let sim = random_sim(&mut rng, images, images * 3, Some(5));
            let mut warped = sim.clone();
            warped.as_mut_slice().iter_mut().for_each(|x| *x = (3.0 * *x).exp() - 7.0);
            prop_assert_eq!(evaluate(&sim, &gt).unwrap(), evaluate(&warped, &gt).unwrap());
            let r = evaluate(&sim, &gt).unwrap();
            prop_assert!(r.i2t[0] <= r.i2t[1] && r.i2t[1] <= r.i2t[2]);
            prop_assert!(r.t2i[0] <= r.t2i[1] && r.t2i[1] <= r.t2i[2]);
        }
    }
}
