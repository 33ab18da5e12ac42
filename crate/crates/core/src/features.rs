//! Local-feature sets, paired datasets and the synthetic generator.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{norm, round_to_f32, Matrix, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Visual,
    Textual,
}

impl Modality {
    /// Stream id used when deriving per-item RNGs.
    pub(crate) fn stream(self) -> u64 {
        match self {
            Modality::Visual => 0,
            Modality::Textual => 1,
        }
    }
}

/// The `N x D` local features of one item (image regions or caption tokens).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub item_id: String,
    pub modality: Modality,
    pub features: Matrix,
}

impl FeatureSet {
    pub fn new(item_id: impl Into<String>, modality: Modality, features: Matrix) -> Result<Self> {
        let fs = FeatureSet { item_id: item_id.into(), modality, features };
        fs.validate()?;
        Ok(fs)
    }

    pub fn count(&self) -> usize {
        self.features.rows()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.count() < 2 {
            return Err(Error::Validation(format!(
                "item '{}' has {} local features, need at least 2",
                self.item_id,
                self.count()
            )));
        }
        if self.dim() == 0 {
            return Err(Error::Validation(format!("item '{}' has dimension 0", self.item_id)));
        }
        if !self.features.is_finite() {
            return Err(Error::Validation(format!("item '{}' has non-finite entries", self.item_id)));
        }
        Ok(())
    }
}

/// A caption and the index of the image it describes.
#[derive(Debug, Clone, PartialEq)]
pub struct Caption {
    pub features: FeatureSet,
    pub image: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Image indices per split.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    pub fn get(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Images, their captions, and split membership.
///
/// Ground truth is the caption → image relation; every image has at least
/// one caption.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedDataset {
    pub dim: usize,
    pub images: Vec<FeatureSet>,
    pub captions: Vec<Caption>,
    pub splits: Splits,
}

impl PairedDataset {
    pub fn new(dim: usize, images: Vec<FeatureSet>, captions: Vec<Caption>, splits: Splits) -> Result<Self> {
        let ds = PairedDataset { dim, images, captions, splits };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.images.is_empty() || self.captions.is_empty() {
            return Err(Error::Validation("dataset has no image-caption pairs".into()));
        }
        let mut ids = BTreeSet::new();
        for img in &self.images {
            img.validate()?;
            if img.modality != Modality::Visual {
                return Err(Error::Validation(format!("image '{}' is not visual", img.item_id)));
            }
            if img.dim() != self.dim {
                return Err(Error::DimensionMismatch { expected: self.dim, found: img.dim() });
            }
            if !ids.insert(img.item_id.as_str()) {
                return Err(Error::Validation(format!("duplicate item id '{}'", img.item_id)));
            }
        }
        let mut covered = alloc::vec![false; self.images.len()];
        for cap in &self.captions {
            let fs = &cap.features;
            fs.validate()?;
            if fs.modality != Modality::Textual {
                return Err(Error::Validation(format!("caption '{}' is not textual", fs.item_id)));
            }
            if fs.dim() != self.dim {
                return Err(Error::DimensionMismatch { expected: self.dim, found: fs.dim() });
            }
            if !ids.insert(fs.item_id.as_str()) {
                return Err(Error::Validation(format!("duplicate item id '{}'", fs.item_id)));
            }
            match covered.get_mut(cap.image) {
                Some(c) => *c = true,
                None => {
                    return Err(Error::Validation(format!(
                        "caption '{}' references missing image {}",
                        fs.item_id, cap.image
                    )))
                }
            }
        }
        if let Some(i) = covered.iter().position(|c| !c) {
            return Err(Error::Validation(format!("image '{}' has no caption", self.images[i].item_id)));
        }
        let mut seen = BTreeSet::new();
        for split in [Split::Train, Split::Val, Split::Test] {
            for &i in self.splits.get(split) {
                if i >= self.images.len() {
                    return Err(Error::Validation(format!("split {} references image {i}", split.name())));
                }
                if !seen.insert(i) {
                    return Err(Error::Validation(format!("image {i} is in more than one split")));
                }
            }
        }
        Ok(())
    }

    /// Caption count shared by every image, if uniform.
    pub fn captions_per_image(&self) -> Option<usize> {
        let mut counts = alloc::vec![0usize; self.images.len()];
        for c in &self.captions {
            counts[c.image] += 1;
        }
        let first = *counts.first()?;
        counts.iter().all(|&c| c == first).then_some(first)
    }

    /// Indices of the captions describing `image`, in dataset order.
    pub fn captions_of(&self, image: usize) -> impl Iterator<Item = usize> + '_ {
        self.captions.iter().enumerate().filter(move |(_, c)| c.image == image).map(|(j, _)| j)
    }

    /// Smallest local-feature count of the given modality (`L_seq`).
    pub fn min_count(&self, modality: Modality) -> usize {
        match modality {
            Modality::Visual => self.images.iter().map(FeatureSet::count).min().unwrap_or(0),
            Modality::Textual => self.captions.iter().map(|c| c.features.count()).min().unwrap_or(0),
        }
    }
}

/// Parameters of the synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_images: usize,
    pub captions_per_image: usize,
    pub dim: usize,
    /// Inclusive range of region counts per image.
    pub visual_count_range: (usize, usize),
    /// Inclusive range of token counts per caption.
    pub textual_count_range: (usize, usize),
    pub cluster_noise: f64,
    /// Size of the shared pool of background directions.
    pub distractors: usize,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_images: 64,
            captions_per_image: 5,
            dim: 32,
            visual_count_range: (8, 36),
            textual_count_range: (6, 16),
            cluster_noise: 0.1,
            distractors: 8,
            val_fraction: 0.125,
            test_fraction: 0.125,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(m.into()));
        if self.num_images == 0 || self.captions_per_image == 0 || self.dim == 0 {
            return bad("num_images, captions_per_image and dim must be positive");
        }
        for (name, (lo, hi)) in [("visual", self.visual_count_range), ("textual", self.textual_count_range)] {
            if lo < 2 || hi < lo {
                return Err(Error::InvalidSpec(format!("{name} count range [{lo}, {hi}] invalid")));
            }
        }
        if !(self.cluster_noise >= 0.0) || !self.cluster_noise.is_finite() {
            return bad("cluster_noise must be finite and non-negative");
        }
        let fractions_ok = (0.0..=1.0).contains(&self.val_fraction)
            && (0.0..=1.0).contains(&self.test_fraction)
            && self.val_fraction + self.test_fraction <= 1.0;
        if !fractions_ok {
            return bad("split fractions must lie in [0, 1] and sum to at most 1");
        }
        Ok(())
    }

    /// Image counts `(train, val, test)`; splits are contiguous in that order.
    pub fn split_sizes(&self) -> (usize, usize, usize) {
        let n = self.num_images;
        let val = libm::round(n as f64 * self.val_fraction) as usize;
        let test = (libm::round(n as f64 * self.test_fraction) as usize).min(n - val.min(n));
        let val = val.min(n);
        (n - val - test, val, test)
    }
}

fn random_unit(rng: &mut Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let n = norm(&v);
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Isotropic noise with expected squared norm 1.
fn noise_vec(rng: &mut Rng, dim: usize) -> Vec<f64> {
    let s = 1.0 / libm::sqrt(dim as f64);
    (0..dim).map(|_| s * rng.normal()).collect()
}

fn count_in(rng: &mut Rng, (lo, hi): (usize, usize)) -> usize {
    lo + rng.below(hi - lo + 1)
}

/// Builds a dataset from latent image anchors.
///
/// Image `i` gets a unit anchor `a_i`. Its regions are, for the first half
/// (at least two), `s * a_i + noise * e` and otherwise `s * d + noise * e`
/// with `d` drawn from a pool of shared background directions; region order
/// is then shuffled. Each caption draws a variation `c`, and its tokens are
/// `s * a_i + noise * (c + e)`. Scales `s` are uniform in `[0.5, 1.5]` and
/// `e`, `c` are isotropic Gaussians of unit expected norm. Values are rounded
/// to `f32` so a save/load round trip is exact.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<PairedDataset> {
    generate_with_anchors(spec).map(|(ds, _)| ds)
}

pub(crate) fn generate_with_anchors(spec: &SyntheticSpec) -> Result<(PairedDataset, Vec<Vec<f64>>)> {
    spec.validate()?;
    let d = spec.dim;
    let noise = spec.cluster_noise;
    let mut rng = Rng::new(spec.seed);
    let anchors: Vec<Vec<f64>> = (0..spec.num_images).map(|_| random_unit(&mut rng, d)).collect();
    let pool: Vec<Vec<f64>> = (0..spec.distractors).map(|_| random_unit(&mut rng, d)).collect();

    let mut images = Vec::with_capacity(spec.num_images);
    let mut captions = Vec::with_capacity(spec.num_images * spec.captions_per_image);
    for (i, anchor) in anchors.iter().enumerate() {
        let n = count_in(&mut rng, spec.visual_count_range);
        let n_anchor = if pool.is_empty() { n } else { (n / 2).max(2) };
        let mut regions = Vec::with_capacity(n);
        for r in 0..n {
            let s = rng.uniform(0.5, 1.5);
            let base = if r < n_anchor { anchor } else { &pool[rng.below(pool.len())] };
            let e = noise_vec(&mut rng, d);
            regions.push(base.iter().zip(&e).map(|(b, e)| round_to_f32(s * b + noise * e)).collect::<Vec<_>>());
        }
        rng.shuffle(&mut regions);
        images.push(FeatureSet {
            item_id: format!("img{i:05}"),
            modality: Modality::Visual,
            features: Matrix::from_rows(&regions)?,
        });

        for c in 0..spec.captions_per_image {
            let variation = noise_vec(&mut rng, d);
            let n = count_in(&mut rng, spec.textual_count_range);
            let mut tokens = Vec::with_capacity(n);
            for _ in 0..n {
                let s = rng.uniform(0.5, 1.5);
                let e = noise_vec(&mut rng, d);
                tokens.push(
                    (0..d).map(|k| round_to_f32(s * anchor[k] + noise * (variation[k] + e[k]))).collect::<Vec<_>>(),
                );
            }
            captions.push(Caption {
                features: FeatureSet {
                    item_id: format!("img{i:05}_cap{c}"),
                    modality: Modality::Textual,
                    features: Matrix::from_rows(&tokens)?,
                },
                image: i,
            });
        }
    }

    let (n_train, n_val, _) = spec.split_sizes();
    let splits = Splits {
        train: (0..n_train).collect(),
        val: (n_train..n_train + n_val).collect(),
        test: (n_train + n_val..spec.num_images).collect(),
    };
    Ok((PairedDataset::new(d, images, captions, splits)?, anchors))
}
