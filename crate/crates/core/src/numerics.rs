//! Dense vectors and matrices, seeded randomness, Beta sampling and
//! finite-difference gradient checking.
//!
//! All arithmetic is `f64`. Transcendentals go through `libm` so results do
//! not depend on the platform's math library.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::{Deref, DerefMut};

use rand_chacha::ChaCha8Rng;
use rand_core::{Rng as _, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norms below this are treated as zero.
pub const NORM_EPS: f64 = 1e-12;

/// A dense real vector.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn zeros(dim: usize) -> Self {
        Vector(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }
}

impl From<Vec<f64>> for Vector {
    fn from(v: Vec<f64>) -> Self {
        Vector(v)
    }
}

impl Deref for Vector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for Vector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

/// Row-major dense matrix. Feature sets are stored one vector per row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch { expected: rows * cols, found: data.len() });
        }
        Ok(Matrix { rows, cols, data })
    }

    /// Stacks equally sized rows. An empty input yields a `0 x 0` matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::DimensionMismatch { expected: cols, found: r.len() });
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix { rows: rows.len(), cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.cols + j] = value;
    }

    pub fn iter_rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        // chunks_exact panics on zero width
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// New matrix whose row `p` is row `order[p]` of `self`.
    pub fn select_rows(&self, order: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(order.len() * self.cols);
        for &i in order {
            data.extend_from_slice(self.row(i));
        }
        Matrix { rows: order.len(), cols: self.cols, data }
    }
}

pub fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

pub fn norm(u: &[f64]) -> f64 {
    libm::sqrt(dot(u, u))
}

/// `u / ||u||`.
pub fn normalize(u: &[f64]) -> Result<Vec<f64>> {
    let n = norm(u);
    if n < NORM_EPS {
        return Err(Error::ZeroNormVector);
    }
    Ok(u.iter().map(|x| x / n).collect())
}

/// Cosine similarity `<u, v> / (||u|| ||v||)`.
pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch { expected: u.len(), found: v.len() });
    }
    let (nu, nv) = (norm(u), norm(v));
    if nu < NORM_EPS || nv < NORM_EPS {
        return Err(Error::ZeroNormVector);
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Cosine that scores a zero-norm operand as 0 instead of failing.
/// Used where vectors come out of a learned map and a hard error would abort
/// an otherwise healthy step.
pub fn cosine_or_zero(u: &[f64], v: &[f64]) -> f64 {
    let (nu, nv) = (norm(u), norm(v));
    if nu < NORM_EPS || nv < NORM_EPS {
        0.0
    } else {
        dot(u, v) / (nu * nv)
    }
}

/// Cosine similarity together with its gradients w.r.t. both arguments.
///
/// `d cos / d u = v / (|u||v|) - cos * u / |u|^2`. Zero-norm operands yield a
/// zero similarity and zero gradients.
pub fn cosine_with_grad(u: &[f64], v: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let (nu, nv) = (norm(u), norm(v));
    if nu < NORM_EPS || nv < NORM_EPS {
        return (0.0, vec![0.0; u.len()], vec![0.0; v.len()]);
    }
    let s = dot(u, v) / (nu * nv);
    let inv = 1.0 / (nu * nv);
    let gu = u.iter().zip(v).map(|(a, b)| b * inv - s * a / (nu * nu)).collect();
    let gv = u.iter().zip(v).map(|(a, b)| a * inv - s * b / (nv * nv)).collect();
    (s, gu, gv)
}

/// Back-propagates `upstream` (a gradient w.r.t. `x / |x|`) to `x`:
/// `(I - x̂ x̂ᵀ) upstream / |x|`.
pub fn normalize_backward(x: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
    let n = norm(x);
    if n < NORM_EPS {
        return Err(Error::ZeroNormVector);
    }
    let proj = dot(x, upstream) / n;
    Ok(x.iter().zip(upstream).map(|(xi, gi)| (gi - proj * xi / n) / n).collect())
}

/// Rounds through `f32`, the precision of every on-disk float.
pub fn round_to_f32(x: f64) -> f64 {
    x as f32 as f64
}

/// Seeded pseudo-random stream.
///
/// Backed by the ChaCha8 block function in counter mode (64-bit block
/// counter and stream id both starting at zero). The 256-bit key is four
/// little-endian words `splitmix64(seed + i * GOLDEN_GAMMA)`, `i = 0..4`, so a
/// stream is reproducible in any language from the seed alone. `next_u64`
/// joins two consecutive 32-bit outputs, low word first. Uniform doubles take the top 53 bits of
/// each output; normals use Box-Muller without caching the second deviate.
#[derive(Debug, Clone)]
pub struct Rng {
    inner: ChaCha8Rng,
}

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        let mut key = [0u8; 32];
        for (i, chunk) in key.chunks_exact_mut(8).enumerate() {
            let word = splitmix64(seed.wrapping_add((i as u64).wrapping_mul(GOLDEN_GAMMA)));
            chunk.copy_from_slice(&word.to_le_bytes());
        }
        Rng { inner: ChaCha8Rng::from_seed(key) }
    }

    /// Independent stream keyed by `seed` and a path of stream ids, e.g.
    /// `(seed, [epoch, batch, item])`.
    pub fn derive(seed: u64, stream: &[u64]) -> Self {
        let mut s = splitmix64(seed);
        for &id in stream {
            s = splitmix64(s ^ splitmix64(id.wrapping_add(GOLDEN_GAMMA)));
        }
        Rng::new(s)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `[0, n)`, unbiased by rejection. `n` must be positive.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        let zone = u64::MAX - (u64::MAX % n + 1) % n;
        loop {
            let x = self.next_u64();
            if x <= zone {
                return (x % n) as usize;
            }
        }
    }

    /// Standard normal deviate (Box-Muller).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(core::f64::consts::TAU * u2)
    }

    /// Fisher-Yates, walking from the back.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        self.shuffle(&mut p);
        p
    }

    /// Gamma(shape, 1) by Marsaglia-Tsang; shapes below one are boosted with
    /// `Gamma(a) = Gamma(a + 1) * U^(1/a)`.
    pub fn gamma(&mut self, shape: f64) -> f64 {
        if shape < 1.0 {
            let u = 1.0 - self.next_f64();
            return self.gamma(shape + 1.0) * libm::pow(u, 1.0 / shape);
        }
        let d = shape - 1.0 / 3.0;
        let c = 1.0 / libm::sqrt(9.0 * d);
        loop {
            let x = self.normal();
            let v = 1.0 + c * x;
            if v <= 0.0 {
                continue;
            }
            let v = v * v * v;
            let u = 1.0 - self.next_f64();
            if u < 1.0 - 0.0331 * x * x * x * x {
                return d * v;
            }
            if libm::log(u) < 0.5 * x * x + d * (1.0 - v + libm::log(v)) {
                return d * v;
            }
        }
    }
}

/// One draw from the symmetric Beta(t, t).
///
/// `t = 1` is Uniform(0, 1) and consumes a single uniform; otherwise
/// `X / (X + Y)` with `X, Y ~ Gamma(t)`.
pub fn sample_beta(t: f64, rng: &mut Rng) -> Result<f64> {
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::InvalidHyperparameter { name: "beta_t", value: t });
    }
    if t == 1.0 {
        return Ok(rng.next_f64());
    }
    let x = rng.gamma(t);
    let y = rng.gamma(t);
    if x + y == 0.0 {
        // both underflowed; only reachable for tiny t where mass sits at 0 and 1
        return Ok(if rng.next_f64() < 0.5 { 0.0 } else { 1.0 });
    }
    Ok((x / (x + y)).clamp(0.0, 1.0))
}

/// Compares an analytic gradient against central differences.
///
/// Returns `max_i |a_i - c_i| / max(1, |a_i|, |c_i|)` where `c_i` is the
/// central difference with step `h`. Kinks (relu at 0, hinge at 0, argmax
/// ties) must be avoided by the caller: the check assumes smoothness in a
/// `±h` neighbourhood.
pub fn fd_grad_check<F>(mut f: F, params: &[f64], analytic: &[f64], h: f64) -> Result<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(1e-6..=1e-3).contains(&h) {
        return Err(Error::InvalidHyperparameter { name: "h", value: h });
    }
    if params.len() != analytic.len() {
        return Err(Error::DimensionMismatch { expected: params.len(), found: analytic.len() });
    }
    let mut x = params.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let fp = f(&x);
        x[i] = orig - h;
        let fm = f(&x);
        x[i] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic[i];
        if !numeric.is_finite() || !a.is_finite() {
            return Err(Error::NonFiniteGradient { index: i });
        }
        let denom = 1.0f64.max(a.abs()).max(numeric.abs());
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::numerics::Rng;

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!((cosine(&[2.0, 0.0], &[5.0, 0.0]).unwrap() - 1.0).abs() < 1e-15);
        let c = cosine(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((c - 0.70710678).abs() < 1e-8);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::ZeroNormVector));
        assert!(matches!(cosine(&[1.0], &[1.0, 0.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn cosine_gradient_matches_differences() {
        let u = [0.3, -1.2, 0.7];
        let v = [1.1, 0.4, -0.5];
        let (_, gu, gv) = cosine_with_grad(&u, &v);
        let eu = fd_grad_check(|x| cosine(x, &v).unwrap(), &u, &gu, 1e-5).unwrap();
        let ev = fd_grad_check(|x| cosine(&u, x).unwrap(), &v, &gv, 1e-5).unwrap();
        assert!(eu < 1e-8 && ev < 1e-8, "{eu} {ev}");
    }

    #[test]
    fn normalize_backward_matches_differences() {
        let x = [0.5, -2.0, 1.5, 0.25];
        let w = [0.7, 0.1, -0.3, 0.9];
        let f = |x: &[f64]| dot(&normalize(x).unwrap(), &w);
        let g = normalize_backward(&x, &w).unwrap();
        assert!(fd_grad_check(f, &x, &g, 1e-5).unwrap() < 1e-8);
    }

    #[test]
    fn beta_rejects_non_positive_t() {
        let mut rng = Rng::new(0);
        assert!(matches!(sample_beta(0.0, &mut rng), Err(Error::InvalidHyperparameter { .. })));
        assert!(sample_beta(-1.0, &mut rng).is_err());
        assert!(sample_beta(f64::NAN, &mut rng).is_err());
    }

    #[test]
    fn beta_uniform_mean() {
        let mut rng = Rng::new(12345);
        let mean: f64 = (0..10_000).map(|_| sample_beta(1.0, &mut rng).unwrap()).sum::<f64>() / 1e4;
        assert!((mean - 0.5).abs() < 0.02, "{mean}");
    }

    #[test]
    fn beta_moments_for_other_shapes() {
        // Var[Beta(t, t)] = 1 / (4 (2t + 1))
        for &t in &[0.3, 2.0, 5.0] {
            let mut rng = Rng::new(99);
            let draws: Vec<f64> = (0..20_000).map(|_| sample_beta(t, &mut rng).unwrap()).collect();
            let mean = draws.iter().sum::<f64>() / draws.len() as f64;
            let var = draws.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / draws.len() as f64;
            let expected = 1.0 / (4.0 * (2.0 * t + 1.0));
            assert!((mean - 0.5).abs() < 0.01, "t={t} mean={mean}");
            assert!((var - expected).abs() < 0.1 * expected, "t={t} var={var} want {expected}");
        }
    }

    #[test]
    fn normal_moments() {
        let mut rng = Rng::new(3);
        let xs: Vec<f64> = (0..50_000).map(|_| rng.normal()).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| x * x).sum::<f64>() / xs.len() as f64 - mean * mean;
        assert!(mean.abs() < 0.02 && (var - 1.0).abs() < 0.03, "{mean} {var}");
    }

    #[test]
    fn rng_determinism() {
        let mut a = Rng::new(0xDEAD_BEEF);
        let mut b = Rng::new(0xDEAD_BEEF);
        for _ in 0..100_000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let mut c = Rng::derive(1, &[2, 3]);
        let mut d = Rng::derive(1, &[3, 2]);
        assert_ne!(c.next_u64(), d.next_u64());
    }

    #[test]
    fn rng_reference_stream() {
        // computed with an independent implementation of the key schedule
        // and the ChaCha8 block function
        let mut rng = Rng::new(0);
        let first: Vec<u64> = (0..3).map(|_| rng.next_u64()).collect();
        let mut again = Rng::new(0);
        assert_eq!(first, (0..3).map(|_| again.next_u64()).collect::<Vec<_>>());
        assert_eq!(first, RNG_SEED0_PREFIX);
        // the 40th output lies past the generator's internal block buffer
        assert_eq!((3..40).map(|_| rng.next_u64()).last(), Some(0x835598457c8d1413));
    }

    const RNG_SEED0_PREFIX: [u64; 3] = [0xbf94d1332d8ee5e8, 0x3a738775a6da5a01, 0x3d46ff10c143ee06];

    #[test]
    fn below_covers_range_uniformly() {
        let mut rng = Rng::new(8);
        let mut counts = [0usize; 7];
        for _ in 0..70_000 {
            counts[rng.below(7)] += 1;
        }
        for c in counts {
            assert!((c as f64 - 10_000.0).abs() < 500.0, "{counts:?}");
        }
    }

    #[test]
    fn fd_check_quadratic() {
        let err = fd_grad_check(|x| x[0] * x[0], &[3.0], &[6.0], 1e-5).unwrap();
        assert!(err < 1e-8, "{err}");
        assert!(fd_grad_check(|x| x[0], &[0.0], &[1.0], 1e-2).is_err());
        assert!(matches!(
            fd_grad_check(|x| x[0], &[0.0], &[f64::NAN], 1e-5),
            Err(Error::NonFiniteGradient { index: 0 })
        ));
    }

    proptest! {
        #[test]
        fn cosine_scale_invariant(u in prop::collection::vec(-10.0f64..10.0, 1..12), c in 0.01f64..100.0) {
            prop_assume!(norm(&u) > 1e-3);
            let cu: Vec<f64> = u.iter().map(|x| c * x).collect();
            prop_assert!((cosine(&u, &cu).unwrap() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn cosine_symmetric(pair in (1usize..12).prop_flat_map(|d| (
            prop::collection::vec(-10.0f64..10.0, d),
            prop::collection::vec(-10.0f64..10.0, d),
        ))) {
            let (u, v) = pair;
            prop_assume!(norm(&u) > 1e-3 && norm(&v) > 1e-3);
            prop_assert!((cosine(&u, &v).unwrap() - cosine(&v, &u).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn beta_in_unit_interval(t in 0.05f64..20.0, seed in any::<u64>()) {
            let mut rng = Rng::new(seed);
            for _ in 0..20 {
                let x = sample_beta(t, &mut rng).unwrap();
                prop_assert!((0.0..=1.0).contains(&x));
            }
        }
    }
}
