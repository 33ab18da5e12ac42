//! Triplet ranking loss with in-batch hard negatives and mixup-generated
//! harder negatives.
//!
//! For a batch of `B` aligned pairs `(v_i, t_i)` with cosine similarity `s`,
//! each pair contributes
//!
//! ```text
//! [a1 - s(v_i, t_i) + s(v_i, t_hard)]+      + [a1 - s(v_i, t_i) + s(v_hard, t_i)]+
//! [a2 - s(v_i, t_i) + s(gv_i, gt_harder)]+  + [a2 - s(v_i, t_i) + s(gv_harder, gt_i)]+
//! ```
//!
//! where `gv_i = l1 v_i + (1 - l1) t_i` and `gt_i = l2 t_i + (1 - l2) v_i`
//! are mixed on unit-normalized embeddings and `l1, l2 ~ Beta(t, t)`. Hard
//! negatives are off-diagonal argmaxes (ties to the lowest index). With the
//! harder terms disabled this is the classic max-violation hinge loss.
//! Argmax selections are constants for differentiation.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{cosine_or_zero, cosine_with_grad, dot, normalize, normalize_backward, sample_beta, Matrix, Rng};

/// Where harder negatives are mined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HarderMining {
    /// `gt_harder = argmax_{j != i} s(gv_i, gt_j)`, and symmetrically.
    #[default]
    Mixed,
    /// `gt_harder = argmax_{j != i} s(v_i, gt_j)`, and symmetrically.
    Original,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub alpha1: f64,
    pub alpha2: f64,
    pub beta_t: f64,
    pub enable_harder_terms: bool,
    /// Re-normalize mixed embeddings. Cosine similarity makes this invisible
    /// to the loss value; it only affects the mixed vectors a batch exposes.
    pub renormalize_mixed: bool,
    /// Treat mixed embeddings as constants during backward.
    pub detach_mixed: bool,
    pub harder_mining: HarderMining,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha1: 0.2,
            alpha2: 0.1,
            beta_t: 1.0,
            enable_harder_terms: true,
            renormalize_mixed: true,
            detach_mixed: false,
            harder_mining: HarderMining::Mixed,
        }
    }
}

impl LossConfig {
    /// The two-term baseline.
    pub fn baseline(alpha1: f64) -> Self {
        LossConfig { alpha1, enable_harder_terms: false, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, value) in [("alpha1", self.alpha1), ("alpha2", self.alpha2), ("beta_t", self.beta_t)] {
            if !(value > 0.0) || !value.is_finite() {
                return Err(Error::InvalidHyperparameter { name, value });
            }
        }
        Ok(())
    }
}

/// Mixup of one positive pair. Inputs are used as given; callers wanting the
/// loss's convention pass unit vectors.
pub fn make_harder(h_vis: &[f64], h_txt: &[f64], lambda1: f64, lambda2: f64, renormalize: bool) -> Result<(Vec<f64>, Vec<f64>)> {
    if h_vis.len() != h_txt.len() {
        return Err(Error::DimensionMismatch { expected: h_vis.len(), found: h_txt.len() });
    }
    for (name, value) in [("lambda1", lambda1), ("lambda2", lambda2)] {
        if !(0.0..=1.0).contains(&value) {
            return Err(Error::InvalidHyperparameter { name, value });
        }
    }
    let gv: Vec<f64> = h_vis.iter().zip(h_txt).map(|(v, t)| lambda1 * v + (1.0 - lambda1) * t).collect();
    let gt: Vec<f64> = h_txt.iter().zip(h_vis).map(|(t, v)| lambda2 * t + (1.0 - lambda2) * v).collect();
    if renormalize {
        // a pair mixed into the zero vector stays zero and scores 0 in the loss
        let renorm = |x: Vec<f64>| normalize(&x).unwrap_or(x);
        Ok((renorm(gv), renorm(gt)))
    } else {
        Ok((gv, gt))
    }
}

/// `B` aligned pairs, optionally with mixup coefficients and the mixed
/// embeddings they produce.
#[derive(Debug, Clone, PartialEq)]
pub struct MiniBatch {
    pub h_vis: Matrix,
    pub h_txt: Matrix,
    pub lambdas: Option<Vec<(f64, f64)>>,
    pub h_g_vis: Option<Matrix>,
    pub h_g_txt: Option<Matrix>,
}

impl MiniBatch {
    pub fn new(h_vis: Matrix, h_txt: Matrix) -> Result<Self> {
        if h_vis.shape() != h_txt.shape() {
            return Err(Error::ShapeMismatch("visual and textual embeddings differ in shape"));
        }
        Ok(MiniBatch { h_vis, h_txt, lambdas: None, h_g_vis: None, h_g_txt: None })
    }

    pub fn len(&self) -> usize {
        self.h_vis.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Attaches one `(l1, l2)` per pair and builds the mixed embeddings from
    /// the unit-normalized pairs.
    pub fn with_lambdas(mut self, lambdas: Vec<(f64, f64)>, renormalize: bool) -> Result<Self> {
        if lambdas.len() != self.len() {
            return Err(Error::ShapeMismatch("one lambda pair per positive pair"));
        }
        let d = self.h_vis.cols();
        let mut gv = Matrix::zeros(self.len(), d);
        let mut gt = Matrix::zeros(self.len(), d);
        for (i, &(l1, l2)) in lambdas.iter().enumerate() {
            let u = normalize(self.h_vis.row(i))?;
            let w = normalize(self.h_txt.row(i))?;
            let (a, b) = make_harder(&u, &w, l1, l2, renormalize)?;
            gv.row_mut(i).copy_from_slice(&a);
            gt.row_mut(i).copy_from_slice(&b);
        }
        self.lambdas = Some(lambdas);
        self.h_g_vis = Some(gv);
        self.h_g_txt = Some(gt);
        Ok(self)
    }

    /// One independent `(l1, l2)` pair per positive pair.
    pub fn sample_lambdas(len: usize, beta_t: f64, rng: &mut Rng) -> Result<Vec<(f64, f64)>> {
        (0..len).map(|_| Ok((sample_beta(beta_t, rng)?, sample_beta(beta_t, rng)?))).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Scan the anchor's row: text negatives for a visual anchor.
    Row,
    /// Scan the anchor's column: visual negatives for a text anchor.
    Col,
}

/// Off-diagonal argmax of `sim` along the anchor's row or column.
pub fn mine_hard(sim: &Matrix, anchor: usize, axis: Axis) -> Result<usize> {
    let b = sim.rows();
    if b < 2 {
        return Err(Error::BatchTooSmall { size: b });
    }
    if sim.cols() != b || anchor >= b {
        return Err(Error::ShapeMismatch("similarity matrix must be square and contain the anchor"));
    }
    let score = |j: usize| match axis {
        Axis::Row => sim.get(anchor, j),
        Axis::Col => sim.get(j, anchor),
    };
    let mut best = if anchor == 0 { 1 } else { 0 };
    for j in best + 1..b {
        if j != anchor && score(j) > score(best) {
            best = j;
        }
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct HardNegativeSelection {
    pub hard_txt: Vec<usize>,
    pub hard_vis: Vec<usize>,
    /// Empty when the harder terms are disabled.
    pub harder_txt: Vec<usize>,
    pub harder_vis: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    /// Summed hinge values of the four terms, in formula order.
    pub terms: [f64; 4],
    pub grad_vis: Matrix,
    pub grad_txt: Matrix,
    pub selection: HardNegativeSelection,
}

pub fn harder_triplet_loss(batch: &MiniBatch, cfg: &LossConfig) -> Result<LossOutput> {
    loss_impl(batch, cfg, None)
}

/// Same loss with the negative selection fixed, e.g. for finite differences.
pub fn harder_triplet_loss_with_selection(batch: &MiniBatch, cfg: &LossConfig, selection: &HardNegativeSelection) -> Result<LossOutput> {
    loss_impl(batch, cfg, Some(selection))
}

fn square_from(b: usize, f: impl Fn(usize, usize) -> f64) -> Matrix {
    let mut m = Matrix::zeros(b, b);
    for i in 0..b {
        for j in 0..b {
            m.set(i, j, f(i, j));
        }
    }
    m
}

fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn mine_all(sim: &Matrix, axis: Axis) -> Result<Vec<usize>> {
    (0..sim.rows()).map(|i| mine_hard(sim, i, axis)).collect()
}

fn loss_impl(batch: &MiniBatch, cfg: &LossConfig, frozen: Option<&HardNegativeSelection>) -> Result<LossOutput> {
    cfg.validate()?;
    let b = batch.len();
    if b < 2 {
        return Err(Error::BatchTooSmall { size: b });
    }
    let d = batch.h_vis.cols();
    let unit_rows = |m: &Matrix| -> Result<Matrix> {
        let rows = m.iter_rows().map(normalize).collect::<Result<Vec<_>>>()?;
        Matrix::from_rows(&rows)
    };
    let u = unit_rows(&batch.h_vis)?;
    let w = unit_rows(&batch.h_txt)?;
    let sim = square_from(b, |i, j| dot(u.row(i), w.row(j)));

    let check = |sel: &[usize]| sel.len() == b && sel.iter().enumerate().all(|(i, &j)| j < b && j != i);
    let (hard_txt, hard_vis) = match frozen {
        Some(s) if check(&s.hard_txt) && check(&s.hard_vis) => (s.hard_txt.clone(), s.hard_vis.clone()),
        Some(_) => return Err(Error::ShapeMismatch("frozen selection does not fit the batch")),
        None => (mine_all(&sim, Axis::Row)?, mine_all(&sim, Axis::Col)?),
    };

    let mut gu = Matrix::zeros(b, d);
    let mut gw = Matrix::zeros(b, d);
    let mut terms = [0.0; 4];

    for i in 0..b {
        let pos = sim.get(i, i);
        let j = hard_txt[i];
        let h = cfg.alpha1 - pos + sim.get(i, j);
        if h > 0.0 {
            terms[0] += h;
            let (wj, wi, ui) = (w.row(j).to_vec(), w.row(i).to_vec(), u.row(i).to_vec());
            axpy(gu.row_mut(i), 1.0, &wj);
            axpy(gu.row_mut(i), -1.0, &wi);
            axpy(gw.row_mut(j), 1.0, &ui);
            axpy(gw.row_mut(i), -1.0, &ui);
        }
        let j = hard_vis[i];
        let h = cfg.alpha1 - pos + sim.get(j, i);
        if h > 0.0 {
            terms[1] += h;
            let (uj, ui, wi) = (u.row(j).to_vec(), u.row(i).to_vec(), w.row(i).to_vec());
            axpy(gw.row_mut(i), 1.0, &uj);
            axpy(gw.row_mut(i), -1.0, &ui);
            axpy(gu.row_mut(j), 1.0, &wi);
            axpy(gu.row_mut(i), -1.0, &wi);
        }
    }

    let mut selection = HardNegativeSelection { hard_txt, hard_vis, ..Default::default() };

    if cfg.enable_harder_terms {
        let lambdas = batch.lambdas.as_ref().ok_or(Error::MissingMixedEmbeddings)?;
        if lambdas.len() != b {
            return Err(Error::ShapeMismatch("one lambda pair per positive pair"));
        }
        let mut gv = Matrix::zeros(b, d);
        let mut gt = Matrix::zeros(b, d);
        for (i, &(l1, l2)) in lambdas.iter().enumerate() {
            let (a, c) = make_harder(u.row(i), w.row(i), l1, l2, false)?;
            gv.row_mut(i).copy_from_slice(&a);
            gt.row_mut(i).copy_from_slice(&c);
        }
        let mixed = square_from(b, |i, j| cosine_or_zero(gv.row(i), gt.row(j)));
        let (harder_txt, harder_vis) = match frozen {
            Some(s) if check(&s.harder_txt) && check(&s.harder_vis) => (s.harder_txt.clone(), s.harder_vis.clone()),
            Some(_) => return Err(Error::ShapeMismatch("frozen selection does not fit the batch")),
            None => match cfg.harder_mining {
                HarderMining::Mixed => (mine_all(&mixed, Axis::Row)?, mine_all(&mixed, Axis::Col)?),
                HarderMining::Original => {
                    let txt_scores = square_from(b, |i, j| cosine_or_zero(u.row(i), gt.row(j)));
                    let vis_scores = square_from(b, |i, j| cosine_or_zero(gv.row(i), w.row(j)));
                    (mine_all(&txt_scores, Axis::Row)?, mine_all(&vis_scores, Axis::Col)?)
                }
            },
        };

        let mut ggv = Matrix::zeros(b, d);
        let mut ggt = Matrix::zeros(b, d);
        for i in 0..b {
            let pos = sim.get(i, i);
            for (slot, (a, c)) in [(2, (i, harder_txt[i])), (3, (harder_vis[i], i))] {
                let h = cfg.alpha2 - pos + mixed.get(a, c);
                if h > 0.0 {
                    terms[slot] += h;
                    let (_, da, dc) = cosine_with_grad(gv.row(a), gt.row(c));
                    axpy(ggv.row_mut(a), 1.0, &da);
                    axpy(ggt.row_mut(c), 1.0, &dc);
                    let (ui, wi) = (u.row(i).to_vec(), w.row(i).to_vec());
                    axpy(gu.row_mut(i), -1.0, &wi);
                    axpy(gw.row_mut(i), -1.0, &ui);
                }
            }
        }
        if !cfg.detach_mixed {
            for (i, &(l1, l2)) in lambdas.iter().enumerate() {
                let (dv, dt) = (ggv.row(i).to_vec(), ggt.row(i).to_vec());
                axpy(gu.row_mut(i), l1, &dv);
                axpy(gu.row_mut(i), 1.0 - l2, &dt);
                axpy(gw.row_mut(i), 1.0 - l1, &dv);
                axpy(gw.row_mut(i), l2, &dt);
            }
        }
        selection.harder_txt = harder_txt;
        selection.harder_vis = harder_vis;
    }

    let back = |h: &Matrix, g: &Matrix| -> Result<Matrix> {
        let rows = (0..b).map(|i| normalize_backward(h.row(i), g.row(i))).collect::<Result<Vec<_>>>()?;
        Matrix::from_rows(&rows)
    };
    let grad_vis = back(&batch.h_vis, &gu)?;
    let grad_txt = back(&batch.h_txt, &gw)?;
    Ok(LossOutput { loss: terms.iter().sum(), terms, grad_vis, grad_txt, selection })
}

pub fn batch_from_rows(h_vis: &[Vec<f64>], h_txt: &[Vec<f64>]) -> Result<MiniBatch> {
    MiniBatch::new(Matrix::from_rows(h_vis)?, Matrix::from_rows(h_txt)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{cosine, fd_grad_check};
    use proptest::prelude::*;
    use crate::numerics::Rng;

    fn random_batch(rng: &mut Rng, b: usize, d: usize) -> MiniBatch {
        let gen = |rng: &mut Rng| Matrix::from_vec(b, d, (0..b * d).map(|_| rng.normal()).collect()).unwrap();
        let v = gen(rng);
        let t = gen(rng);
        let lambdas = MiniBatch::sample_lambdas(b, 1.0, rng).unwrap();
        MiniBatch::new(v, t).unwrap().with_lambdas(lambdas, true).unwrap()
    }

    /// Direct transcription of the two max-violation hinge terms.
    fn baseline_oracle(v: &Matrix, t: &Matrix, alpha: f64) -> f64 {
        let b = v.rows();
        let s = |i: usize, j: usize| cosine(v.row(i), t.row(j)).unwrap();
        let mut total = 0.0;
        for i in 0..b {
            let mut worst_t = f64::NEG_INFINITY;
            let mut worst_v = f64::NEG_INFINITY;
            for j in (0..b).filter(|&j| j != i) {
                worst_t = worst_t.max(s(i, j));
                worst_v = worst_v.max(s(j, i));
            }
            total += (alpha - s(i, i) + worst_t).max(0.0) + (alpha - s(i, i) + worst_v).max(0.0);
        }
        total
    }

    #[test]
    fn mixup_endpoints_and_midpoint() {
        let v = [0.6, 0.8];
        let t = [1.0, 0.0];
        let (gv, gt) = make_harder(&v, &t, 1.0, 0.0, false).unwrap();
        assert_eq!(gv, v);
        assert_eq!(gt, v);
        let (gv, gt) = make_harder(&v, &t, 0.0, 1.0, false).unwrap();
        assert_eq!(gv, t);
        assert_eq!(gt, t);
        let (gv, _) = make_harder(&[1.0, 0.0], &[0.0, 1.0], 0.5, 0.5, false).unwrap();
        assert_eq!(gv, [0.5, 0.5]);
        let (gv, _) = make_harder(&[1.0, 0.0], &[0.0, 1.0], 0.5, 0.5, true).unwrap();
        assert!((gv[0] - core::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert!(make_harder(&[1.0], &[1.0, 0.0], 0.5, 0.5, false).is_err());
        assert!(make_harder(&[1.0], &[1.0], 1.5, 0.5, false).is_err());
    }

    #[test]
    fn mine_hard_examples() {
        let sim = Matrix::from_rows(&[[0.9, 0.2], [0.1, 0.8]]).unwrap();
        assert_eq!(mine_hard(&sim, 0, Axis::Row).unwrap(), 1);
        assert_eq!(mine_hard(&sim, 1, Axis::Col).unwrap(), 0);
        let sim3 = Matrix::from_rows(&[[0.9, 0.7, 0.3], [0.95, 0.1, 0.4], [0.2, 0.7, 0.5]]).unwrap();
        // exhaustive off-diagonal argmax
        for axis in [Axis::Row, Axis::Col] {
            for a in 0..3 {
                let score = |j: usize| if axis == Axis::Row { sim3.get(a, j) } else { sim3.get(j, a) };
                let expected = (0..3).filter(|&j| j != a).fold(None, |best: Option<usize>, j| match best {
                    Some(b) if score(b) >= score(j) => Some(b),
                    _ => Some(j),
                });
                assert_eq!(mine_hard(&sim3, a, axis).unwrap(), expected.unwrap());
            }
        }
        assert_eq!(mine_hard(&sim3, 0, Axis::Row).unwrap(), 1);
        let tie = Matrix::from_rows(&[[0.0, 0.5, 0.5], [0.0; 3], [0.0; 3]]).unwrap();
        assert_eq!(mine_hard(&tie, 0, Axis::Row).unwrap(), 1);
        assert_eq!(mine_hard(&Matrix::zeros(1, 1), 0, Axis::Row), Err(Error::BatchTooSmall { size: 1 }));
    }

    #[test]
    fn separated_batch_has_zero_loss() {
        let v = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let batch = batch_from_rows(&v, &v).unwrap().with_lambdas(vec![(1.0, 1.0); 2], true).unwrap();
        let out = harder_triplet_loss(&batch, &LossConfig::default()).unwrap();
        assert_eq!(out.loss, 0.0);
        assert_eq!(out.terms, [0.0; 4]);
        assert!(out.grad_vis.as_slice().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn hand_evaluated_two_pair_batch() {
        // s(v0, t1) = cos((1,0),(0.6,0.8)) = 0.6, so term 1 for pair 0 is
        // 0.2 - 1 + 0.6 < 0; shrink the margin gap to activate it
        let v = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let t = vec![vec![0.8, 0.6], vec![0.6, 0.8]];
        let cfg = LossConfig { enable_harder_terms: false, ..Default::default() };
        let out = harder_triplet_loss(&batch_from_rows(&v, &t).unwrap(), &cfg).unwrap();
        // pair 0: pos 0.8; hard txt s(v0,t1)=0.6 -> 0.2-0.8+0.6 = 0.0 (inactive)
        //         hard vis s(v1,t0)=0.6 -> 0.0
        // pair 1: pos 0.8; s(v1,t0)=0.6 -> 0.0; s(v0,t1)=0.6 -> 0.0
        assert!(out.loss.abs() < 1e-12);
        let cfg = LossConfig { alpha1: 0.3, ..cfg };
        let out = harder_triplet_loss(&batch_from_rows(&v, &t).unwrap(), &cfg).unwrap();
        assert!((out.loss - 4.0 * 0.1).abs() < 1e-12, "{}", out.loss);
    }

    #[test]
    fn missing_lambdas_and_small_batches() {
        let v = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let batch = batch_from_rows(&v, &v).unwrap();
        assert_eq!(harder_triplet_loss(&batch, &LossConfig::default()), Err(Error::MissingMixedEmbeddings));
        let one = batch_from_rows(&v[..1], &v[..1]).unwrap();
        assert_eq!(harder_triplet_loss(&one, &LossConfig::baseline(0.2)), Err(Error::BatchTooSmall { size: 1 }));
        let bad = LossConfig { alpha2: 0.0, ..Default::default() };
        assert!(matches!(harder_triplet_loss(&batch, &bad), Err(Error::InvalidHyperparameter { .. })));
    }

    #[test]
    fn baseline_matches_independent_transcription() {
        let mut rng = Rng::new(5);
        for _ in 0..200 {
            let b = 2 + rng.below(10);
            let d = 1 + rng.below(12);
            let batch = random_batch(&mut rng, b, d);
            let out = harder_triplet_loss(&batch, &LossConfig::baseline(0.2)).unwrap();
            let oracle = baseline_oracle(&batch.h_vis, &batch.h_txt, 0.2);
            assert!((out.loss - oracle).abs() < 1e-12, "{} vs {}", out.loss, oracle);
            assert!(out.selection.harder_txt.is_empty());
        }
    }

    #[test]
    fn gradients_match_differences() {
        let mut rng = Rng::new(11);
        let mut checked = 0;
        for case in 0..40 {
            let b = 2 + rng.below(6);
            let d = 2 + rng.below(6);
            let batch = random_batch(&mut rng, b, d);
            let cfg = LossConfig {
                alpha1: 0.5,
                alpha2: 0.4,
                enable_harder_terms: case % 3 != 0,
                harder_mining: if case % 2 == 0 { HarderMining::Mixed } else { HarderMining::Original },
                ..Default::default()
            };
            let out = harder_triplet_loss(&batch, &cfg).unwrap();
            if out.loss == 0.0 {
                continue;
            }
            checked += 1;
            let lambdas = batch.lambdas.clone().unwrap();
            let sel = out.selection.clone();
            let with = |v: Matrix, t: Matrix| {
                let mb = MiniBatch::new(v, t).unwrap().with_lambdas(lambdas.clone(), true).unwrap();
                harder_triplet_loss_with_selection(&mb, &cfg, &sel).unwrap().loss
            };
            let ev = fd_grad_check(
                |x| with(Matrix::from_vec(b, d, x.to_vec()).unwrap(), batch.h_txt.clone()),
                batch.h_vis.as_slice(),
                out.grad_vis.as_slice(),
                1e-6,
            )
            .unwrap();
            let et = fd_grad_check(
                |x| with(batch.h_vis.clone(), Matrix::from_vec(b, d, x.to_vec()).unwrap()),
                batch.h_txt.as_slice(),
                out.grad_txt.as_slice(),
                1e-6,
            )
            .unwrap();
            assert!(ev < 1e-4 && et < 1e-4, "case {case}: {ev} {et}");
        }
        assert!(checked > 20);
    }

    #[test]
    fn detach_only_cuts_the_mixing_path() {
        let mut rng = Rng::new(21);
        let batch = random_batch(&mut rng, 6, 5);
        let cfg = LossConfig { alpha1: 0.5, alpha2: 2.0, ..Default::default() };
        let attached = harder_triplet_loss(&batch, &cfg).unwrap();
        let detached = harder_triplet_loss(&batch, &LossConfig { detach_mixed: true, ..cfg }).unwrap();
        assert_eq!(attached.loss, detached.loss);
        assert_ne!(attached.grad_vis, detached.grad_vis);
        let base = LossConfig { enable_harder_terms: false, ..cfg };
        let a = harder_triplet_loss(&batch, &base).unwrap();
        let d = harder_triplet_loss(&batch, &LossConfig { detach_mixed: true, ..base }).unwrap();
        assert_eq!(a, d);
    }

    #[test]
    fn harder_terms_vanish_at_unit_lambdas() {
        let v = vec![vec![1.0, 0.1, 0.0], vec![0.0, 1.0, 0.1], vec![0.1, 0.0, 1.0]];
        let batch = batch_from_rows(&v, &v).unwrap().with_lambdas(vec![(1.0, 1.0); 3], true).unwrap();
        let out = harder_triplet_loss(&batch, &LossConfig::default()).unwrap();
        assert_eq!(out.selection.harder_txt, out.selection.hard_txt);
        assert_eq!(out.selection.harder_vis, out.selection.hard_vis);
        assert_eq!(out.terms, [0.0; 4]);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn non_negative_and_monotone_in_margin(seed in any::<u64>(), b in 2usize..8, delta in 0.0f64..0.5) {
            let mut rng = Rng::new(seed);
            let batch = random_batch(&mut rng, b, 4);
            let cfg = LossConfig::default();
            let lo = harder_triplet_loss(&batch, &cfg).unwrap().loss;
            let hi = harder_triplet_loss(&batch, &LossConfig { alpha1: cfg.alpha1 + delta, ..cfg }).unwrap().loss;
            prop_assert!(lo >= 0.0);
            prop_assert!(hi >= lo);
        }

        #[test]
        fn scale_invariant(seed in any::<u64>(), b in 2usize..8, c in 0.01f64..100.0, which in 0usize..16) {
            let mut rng = Rng::new(seed);
            let batch = random_batch(&mut rng, b, 4);
            let lambdas = batch.lambdas.clone().unwrap();
            let mut v = batch.h_vis.clone();
            let mut t = batch.h_txt.clone();
            let row = which % b;
            let target = if which % 2 == 0 { &mut v } else { &mut t };
            target.row_mut(row).iter_mut().for_each(|x| *x *= c);
            let scaled = MiniBatch::new(v, t).unwrap().with_lambdas(lambdas, true).unwrap();
            let cfg = LossConfig::default();
            let a = harder_triplet_loss(&batch, &cfg).unwrap().loss;
            let s = harder_triplet_loss(&scaled, &cfg).unwrap().loss;
            prop_assert!((a - s).abs() < 1e-9);
        }
    }
}
