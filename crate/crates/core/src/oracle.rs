//! Closed-form noise prediction for diagonal Gaussian mixtures, plus the
//! synthetic two-domain scene generator and the edge-map condition.

use ndarray::{Array1, Array2, ArrayView1, Axis, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sts_nn::{par, Tensor};

use crate::ddim::{Condition, DomainToken, NoisePredictor};
use crate::error::{Result, StsError};
use crate::schedule::DiffusionSchedule;

/// Mixture of `K` axis-aligned Gaussians in `D` dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture {
    weights: Vec<f64>,
    /// `[K, D]`
    means: Array2<f64>,
    /// `[K, D]`, strictly positive.
    variances: Array2<f64>,
}

impl GaussianMixture {
    pub fn new(weights: Vec<f64>, means: Array2<f64>, variances: Array2<f64>) -> Result<Self> {
        let k = weights.len();
        if k == 0 {
            return Err(StsError::invalid("mixture needs at least one component"));
        }
        if means.nrows() != k || variances.dim() != means.dim() {
            return Err(StsError::ShapeMismatch {
                expected: vec![k, means.ncols()],
                found: variances.shape().to_vec(),
            });
        }
        if means.ncols() == 0 {
            return Err(StsError::invalid("mixture dimension must be positive"));
        }
        if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(StsError::invalid("mixture weights must be non-negative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(StsError::invalid(format!("mixture weights sum to {total}, not 1")));
        }
        if variances.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(StsError::invalid("mixture variances must be positive"));
        }
        if means.iter().any(|m| !m.is_finite()) {
            return Err(StsError::NonFinite("mixture means".into()));
        }
        Ok(Self {
            weights,
            means,
            variances,
        })
    }

    /// Single Gaussian `N(mean, variance * I)`.
    pub fn isotropic(mean: &[f64], variance: f64) -> Result<Self> {
        let d = mean.len();
        Self::new(
            vec![1.0],
            Array2::from_shape_vec((1, d), mean.to_vec()).map_err(|e| StsError::invalid(e.to_string()))?,
            Array2::from_elem((1, d), variance),
        )
    }

    /// Equal-weight mixture of isotropic components.
    pub fn isotropic_mixture(means: &[Vec<f64>], variance: f64) -> Result<Self> {
        let k = means.len();
        let d = means.first().map_or(0, Vec::len);
        let flat: Vec<f64> = means.iter().flatten().copied().collect();
        if flat.len() != k * d {
            return Err(StsError::invalid("component means differ in length"));
        }
        Self::new(
            vec![1.0 / k as f64; k],
            Array2::from_shape_vec((k, d), flat).map_err(|e| StsError::invalid(e.to_string()))?,
            Array2::from_elem((k, d), variance),
        )
    }

    /// Mixture of two mixtures with weights `p` and `1 - p`.
    pub fn blend(a: &Self, b: &Self, p: f64) -> Result<Self> {
        if a.dim() != b.dim() {
            return Err(StsError::invalid("cannot blend mixtures of different dimension"));
        }
        let weights = a
            .weights
            .iter()
            .map(|w| w * p)
            .chain(b.weights.iter().map(|w| w * (1.0 - p)))
            .collect::<Vec<_>>();
        let total: f64 = weights.iter().sum();
        let weights = weights.into_iter().map(|w| w / total).collect();
        let cat = |x: &Array2<f64>, y: &Array2<f64>| {
            ndarray::concatenate(Axis(0), &[x.view(), y.view()]).expect("same width")
        };
        Self::new(weights, cat(&a.means, &b.means), cat(&a.variances, &b.variances))
    }

    pub fn dim(&self) -> usize {
        self.means.ncols()
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &Array2<f64> {
        &self.means
    }

    pub fn variances(&self) -> &Array2<f64> {
        &self.variances
    }

    /// Overall mixture mean.
    pub fn mean(&self) -> Array1<f64> {
        let mut m = Array1::zeros(self.dim());
        for (w, row) in self.weights.iter().zip(self.means.rows()) {
            m.scaled_add(*w, &row);
        }
        m
    }
}

fn check_point(gmm: &GaussianMixture, x: ArrayView1<f64>, abar: f64) -> Result<()> {
    if !(abar > 0.0 && abar <= 1.0) {
        return Err(StsError::invalid(format!("abar_t = {abar} outside (0, 1]")));
    }
    if x.len() != gmm.dim() {
        return Err(StsError::ShapeMismatch {
            expected: vec![gmm.dim()],
            found: vec![x.len()],
        });
    }
    Ok(())
}

/// `E[x_0 | x_t = x]` when `x_0` follows `gmm` and
/// `x_t = sqrt(abar) x_0 + sqrt(1 - abar) n`.
pub fn gmm_posterior_mean(gmm: &GaussianMixture, x: ArrayView1<f64>, abar_t: f64) -> Result<Array1<f64>> {
    check_point(gmm, x, abar_t)?;
    let d = gmm.dim();
    let sa = abar_t.sqrt();
    let k = gmm.components();
    let mut logr = vec![f64::NEG_INFINITY; k];
    let mut cond_means = Array2::<f64>::zeros((k, d));
    for c in 0..k {
        let w = gmm.weights[c];
        let mut lp = if w > 0.0 { w.ln() } else { f64::NEG_INFINITY };
        for j in 0..d {
            let var = gmm.variances[[c, j]];
            let mu = gmm.means[[c, j]];
            let s = abar_t * var + (1.0 - abar_t);
            if !(s > 0.0) || !s.is_finite() {
                return Err(StsError::invalid("degenerate marginal covariance"));
            }
            let r = x[j] - sa * mu;
            lp -= 0.5 * (r * r / s + s.ln());
            cond_means[[c, j]] = mu + var * sa / s * r;
        }
        logr[c] = lp;
    }
    let mx = logr.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = Array1::zeros(d);
    let mut z = 0.0;
    for c in 0..k {
        let r = (logr[c] - mx).exp();
        if r > 0.0 {
            z += r;
            out.scaled_add(r, &cond_means.row(c));
        }
    }
    out.mapv_inplace(|v| v / z);
    Ok(out)
}

/// Exact minimizer of the ε-prediction objective at noise level `abar_t`.
pub fn gmm_optimal_eps(gmm: &GaussianMixture, x: ArrayView1<f64>, abar_t: f64) -> Result<Array1<f64>> {
    if abar_t >= 1.0 {
        return Err(StsError::invalid("optimal eps is undefined at abar_t = 1"));
    }
    let m = gmm_posterior_mean(gmm, x, abar_t)?;
    let (sa, sb) = (abar_t.sqrt(), (1.0 - abar_t).sqrt());
    Ok(Array1::from_shape_fn(x.len(), |j| (x[j] - sa * m[j]) / sb))
}

/// `n` reproducible draws, `[n, D]`.
pub fn sample_gmm(gmm: &GaussianMixture, n: usize, rng_seed: u64) -> Result<Array2<f64>> {
    if n == 0 {
        return Err(StsError::invalid("sample count must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let d = gmm.dim();
    let mut out = Array2::zeros((n, d));
    for mut row in out.rows_mut() {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut comp = gmm.components() - 1;
        for (c, w) in gmm.weights.iter().enumerate() {
            acc += w;
            if u < acc && *w > 0.0 {
                comp = c;
                break;
            }
        }
        while gmm.weights[comp] == 0.0 {
            comp -= 1;
        }
        for j in 0..d {
            let z: f64 = rng.sample(StandardNormal);
            row[j] = gmm.means[[comp, j]] + gmm.variances[[comp, j]].sqrt() * z;
        }
    }
    Ok(out)
}

/// Analytic [`NoisePredictor`]: one mixture per domain token. States of any
/// rank are flattened per batch row.
#[derive(Debug, Clone)]
pub struct GmmPredictor {
    schedule: DiffusionSchedule,
    source: GaussianMixture,
    target: GaussianMixture,
    null: GaussianMixture,
}

impl GmmPredictor {
    /// The unconditional branch uses the equal-weight blend of both domains.
    pub fn new(schedule: DiffusionSchedule, source: GaussianMixture, target: GaussianMixture) -> Result<Self> {
        let null = GaussianMixture::blend(&source, &target, 0.5)?;
        Ok(Self {
            schedule,
            source,
            target,
            null,
        })
    }

    /// Same distribution for every token.
    pub fn single(schedule: DiffusionSchedule, gmm: GaussianMixture) -> Self {
        Self {
            schedule,
            source: gmm.clone(),
            target: gmm.clone(),
            null: gmm,
        }
    }

    pub fn mixture(&self, token: DomainToken) -> &GaussianMixture {
        match token {
            DomainToken::Source => &self.source,
            DomainToken::Target => &self.target,
            DomainToken::Null => &self.null,
        }
    }
}

impl NoisePredictor for GmmPredictor {
    fn predict(&self, x: &Tensor, t: usize, cond: &Condition) -> Result<Tensor> {
        if t > self.schedule.total_steps() {
            return Err(StsError::invalid(format!("timestep {t} beyond schedule")));
        }
        let abar = self.schedule.alpha_bar(t);
        if abar >= 1.0 {
            return Ok(Tensor::zeros(x.raw_dim()));
        }
        let gmm = self.mixture(cond.token);
        let n = x.shape().first().copied().unwrap_or(0);
        let d = if n == 0 { 0 } else { x.len() / n };
        let flat = x
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((n, d))
            .map_err(|e| StsError::invalid(e.to_string()))?;
        let rows = par::map_range(n, |i| gmm_optimal_eps(gmm, flat.row(i), abar));
        let mut out = Vec::with_capacity(n * d);
        for r in rows {
            out.extend(r?);
        }
        Tensor::from_shape_vec(x.raw_dim(), out).map_err(|e| StsError::invalid(e.to_string()))
    }
}

/// Appearance transform applied to the second domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainTransform {
    /// Domain A is bright daylight; domain B is dark with lit lamps.
    BrightenDarken,
}

/// Parameters for [`make_two_domain_dataset`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoDomainDatasetSpec {
    pub image_size: usize,
    pub num_samples: usize,
    pub num_eval: usize,
    pub domain_transform: DomainTransform,
    pub max_blocks: usize,
    pub max_lamps: usize,
    pub rng_seed: u64,
    /// Index of the first evaluation scene. Disjoint offsets give disjoint
    /// evaluation sets over the same training sets.
    #[serde(default)]
    pub eval_offset: u64,
}

impl Default for TwoDomainDatasetSpec {
    fn default() -> Self {
        Self {
            image_size: 8,
            num_samples: 512,
            num_eval: 256,
            domain_transform: DomainTransform::BrightenDarken,
            max_blocks: 2,
            max_lamps: 2,
            rng_seed: 0,
            eval_offset: 0,
        }
    }
}

/// Two unpaired training sets plus a structure-paired evaluation set, all
/// `[N, 3, H, W]` with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoDomainDataset {
    pub spec: TwoDomainDatasetSpec,
    pub train_a: Tensor,
    pub train_b: Tensor,
    pub eval_a: Tensor,
    pub eval_b: Tensor,
}

const LEVELS: [f64; 5] = [0.3, 0.45, 0.6, 0.75, 0.9];
const WARM: [f64; 3] = [0.08, 0.0, -0.08];

#[derive(Debug, Clone)]
struct Region {
    /// `(row0, col0, height, width)`; the background covers the whole image.
    rect: (usize, usize, usize, usize),
    level: f64,
    chroma: [f64; 3],
    lamp: bool,
}

/// Scene layout: painted back to front.
#[derive(Debug, Clone)]
struct Scene {
    size: usize,
    regions: Vec<Region>,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent stream per `(seed, stream, index)`.
pub(crate) fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ stream) ^ index)
}

fn zero_sum_chroma(rng: &mut impl Rng, magnitude: f64) -> [f64; 3] {
    let a = rng.random_range(-magnitude..=magnitude);
    let b = rng.random_range(-magnitude..=magnitude);
    let c = -(a + b);
    if c.abs() > magnitude {
        let k = magnitude / c.abs();
        [a * k, b * k, c * k]
    } else {
        [a, b, c]
    }
}

impl Scene {
    fn random(size: usize, max_blocks: usize, max_lamps: usize, rng: &mut impl Rng) -> Self {
        let scale = size as f64 / 8.0;
        let n_blocks = rng.random_range(1..=max_blocks.max(1));
        let n_lamps = rng.random_range(0..=max_lamps);
        let mut levels: Vec<f64> = LEVELS.to_vec();
        // distinct levels: background, blocks, lamps
        for i in (1..levels.len()).rev() {
            let j = rng.random_range(0..=i);
            levels.swap(i, j);
        }
        let mut next_level = {
            let mut it = levels.into_iter().cycle();
            move || it.next().expect("cycle")
        };
        let mut regions = vec![Region {
            rect: (0, 0, size, size),
            level: next_level(),
            chroma: zero_sum_chroma(rng, 0.08),
            lamp: false,
        }];
        let extent = |rng: &mut dyn rand::RngCore, lo: f64, hi: f64| -> usize {
            let lo = (lo * scale).round().max(1.0) as usize;
            let hi = ((hi * scale).round() as usize).max(lo);
            rng.random_range(lo..=hi).min(size)
        };
        for _ in 0..n_blocks {
            let h = extent(rng, 3.0, 5.0);
            let w = extent(rng, 3.0, 5.0);
            let r0 = rng.random_range(0..=size - h);
            let c0 = rng.random_range(0..=size - w);
            regions.push(Region {
                rect: (r0, c0, h, w),
                level: next_level(),
                chroma: zero_sum_chroma(rng, 0.08),
                lamp: false,
            });
        }
        for _ in 0..n_lamps {
            let h = extent(rng, 1.0, 2.0);
            let w = extent(rng, 1.0, 2.0);
            let r0 = rng.random_range(0..=size - h);
            let c0 = rng.random_range(0..=size - w);
            regions.push(Region {
                rect: (r0, c0, h, w),
                level: next_level(),
                chroma: WARM,
                lamp: true,
            });
        }
        Self { size, regions }
    }

    /// Region index owning each pixel (last painted wins).
    fn label_map(&self) -> Vec<usize> {
        let s = self.size;
        let mut labels = vec![0usize; s * s];
        for (idx, reg) in self.regions.iter().enumerate() {
            let (r0, c0, h, w) = reg.rect;
            for r in r0..r0 + h {
                for c in c0..c0 + w {
                    labels[r * s + c] = idx;
                }
            }
        }
        labels
    }

    /// Renders with distinct colors for distinct luminance levels. Levels are
    /// drawn without replacement while fewer than five regions exist; beyond
    /// that, repeated levels are allowed.
    fn render(&self, dark: bool, gain: f64) -> Vec<f64> {
        let s = self.size;
        let labels = self.label_map();
        let colors: Vec<[f64; 3]> = self
            .regions
            .iter()
            .map(|reg| {
                let base = if dark && reg.lamp { 0.5 + 0.45 * reg.level } else { gain * reg.level };
                [0, 1, 2].map(|ch| (base + reg.chroma[ch]).clamp(0.0, 1.0))
            })
            .collect();
        let mut out = vec![0.0; 3 * s * s];
        for (p, &lab) in labels.iter().enumerate() {
            for ch in 0..3 {
                out[ch * s * s + p] = colors[lab][ch];
            }
        }
        out
    }
}

fn gain_for(dark: bool, rng: &mut impl Rng) -> f64 {
    if dark {
        rng.random_range(0.3..=0.4)
    } else {
        rng.random_range(0.85..=1.0)
    }
}

fn stack(images: Vec<Vec<f64>>, size: usize) -> Tensor {
    let n = images.len();
    let flat: Vec<f64> = images.into_iter().flatten().collect();
    Tensor::from_shape_vec(IxDyn(&[n, 3, size, size]), flat).expect("image buffer matches shape")
}

const STREAM_TRAIN_A: u64 = 1;
const STREAM_TRAIN_B: u64 = 2;
const STREAM_EVAL: u64 = 3;

/// Builds the synthetic bright/dark scene pair.
pub fn make_two_domain_dataset(spec: &TwoDomainDatasetSpec) -> Result<TwoDomainDataset> {
    if spec.image_size < 8 {
        return Err(StsError::invalid(format!("image_size {} below 8", spec.image_size)));
    }
    if spec.max_blocks == 0 {
        return Err(StsError::invalid("max_blocks must be positive"));
    }
    let size = spec.image_size;
    let DomainTransform::BrightenDarken = spec.domain_transform;
    let unpaired = |stream: u64, dark: bool| {
        let imgs = par::map_range(spec.num_samples, |i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.rng_seed, stream, i as u64));
            let scene = Scene::random(size, spec.max_blocks, spec.max_lamps, &mut rng);
            let gain = gain_for(dark, &mut rng);
            scene.render(dark, gain)
        });
        stack(imgs, size)
    };
    let train_a = unpaired(STREAM_TRAIN_A, false);
    let train_b = unpaired(STREAM_TRAIN_B, true);
    let pairs = par::map_range(spec.num_eval, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.rng_seed, STREAM_EVAL, spec.eval_offset + i as u64));
        let scene = Scene::random(size, spec.max_blocks, spec.max_lamps, &mut rng);
        let ga = gain_for(false, &mut rng);
        let gb = gain_for(true, &mut rng);
        (scene.render(false, ga), scene.render(true, gb))
    });
    let (ea, eb): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    Ok(TwoDomainDataset {
        spec: spec.clone(),
        train_a,
        train_b,
        eval_a: stack(ea, size),
        eval_b: stack(eb, size),
    })
}

/// Default threshold for [`edge_map`] on the scene datasets.
pub const EDGE_THRESHOLD: f64 = 0.03;

/// Binary edge map of one image `[C, H, W]`, returned as `[H, W]` of 0/1.
///
/// Luminance is the channel mean; the gradient uses forward differences
/// (zero past the last row/column), so a step between two columns marks
/// exactly one column.
pub fn edge_map(image: &Tensor, threshold: f64) -> Result<Array2<f64>> {
    if image.ndim() != 3 {
        return Err(StsError::invalid("edge_map expects a [C, H, W] image"));
    }
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    if c == 0 {
        return Err(StsError::invalid("edge_map needs at least one channel"));
    }
    let lum = image.mean_axis(Axis(0)).expect("non-empty channel axis");
    let mut out = Array2::zeros((h, w));
    for r in 0..h {
        for col in 0..w {
            let here = lum[[r, col]];
            let gx = if col + 1 < w { lum[[r, col + 1]] - here } else { 0.0 };
            let gy = if r + 1 < h { lum[[r + 1, col]] - here } else { 0.0 };
            if (gx * gx + gy * gy).sqrt() > threshold {
                out[[r, col]] = 1.0;
            }
        }
    }
    Ok(out)
}

/// Edge maps of a batch `[N, C, H, W]` as `[N, 1, H, W]`.
pub fn edge_maps(images: &Tensor, threshold: f64) -> Result<Tensor> {
    if images.ndim() != 4 {
        return Err(StsError::invalid("edge_maps expects [N, C, H, W]"));
    }
    let (n, h, w) = (images.shape()[0], images.shape()[2], images.shape()[3]);
    let maps = par::map_range(n, |i| edge_map(&images.index_axis(Axis(0), i).to_owned(), threshold));
    let mut flat = Vec::with_capacity(n * h * w);
    for m in maps {
        flat.extend(m?.iter().copied());
    }
    Ok(Tensor::from_shape_vec(IxDyn(&[n, 1, h, w]), flat).expect("edge buffer matches shape"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, array, Array3};
    use proptest::prelude::*;

    fn std_normal(d: usize) -> GaussianMixture {
        GaussianMixture::isotropic(&vec![0.0; d], 1.0).unwrap()
    }

    #[test]
    fn validation() {
        assert!(GaussianMixture::new(vec![0.5, 0.4], Array2::zeros((2, 1)), Array2::ones((2, 1))).is_err());
        assert!(GaussianMixture::new(vec![1.0], Array2::zeros((1, 1)), Array2::zeros((1, 1))).is_err());
        assert!(GaussianMixture::new(vec![-0.5, 1.5], Array2::zeros((2, 1)), Array2::ones((2, 1))).is_err());
        assert!(GaussianMixture::new(vec![1.0], Array2::zeros((1, 2)), Array2::ones((2, 2))).is_err());
    }

    #[test]
    fn standard_normal_posterior_is_scaled_input() {
        let g = std_normal(3);
        let x = arr1(&[0.4, -1.3, 2.2]);
        for a in [0.01, 0.3, 0.77] {
            let m = gmm_posterior_mean(&g, x.view(), a).unwrap();
            let e = gmm_optimal_eps(&g, x.view(), a).unwrap();
            for j in 0..3 {
                assert!((m[j] - a.sqrt() * x[j]).abs() < 1e-14);
                assert!((e[j] - (1.0 - a).sqrt() * x[j]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn noiseless_posterior_is_identity_and_eps_rejects() {
        let g = GaussianMixture::isotropic_mixture(&[vec![1.0, 2.0], vec![-3.0, 0.5]], 0.2).unwrap();
        let x = arr1(&[0.3, 0.9]);
        let m = gmm_posterior_mean(&g, x.view(), 1.0).unwrap();
        for j in 0..2 {
            assert!((m[j] - x[j]).abs() < 1e-15);
        }
        assert!(gmm_optimal_eps(&g, x.view(), 1.0).is_err());
        assert!(gmm_posterior_mean(&g, x.view(), 0.0).is_err());
        assert!(gmm_posterior_mean(&g, arr1(&[1.0]).view(), 0.5).is_err());
    }

    #[test]
    fn symmetric_mixture() {
        let g = GaussianMixture::isotropic_mixture(&[vec![2.0, -1.0], vec![-2.0, 1.0]], 0.3).unwrap();
        let m = gmm_posterior_mean(&g, arr1(&[0.0, 0.0]).view(), 0.4).unwrap();
        assert!(m.iter().all(|v| v.abs() < 1e-15));
        // x on the symmetry axis through both means
        let x = arr1(&[1.2, -0.6]);
        let e = gmm_optimal_eps(&g, x.view(), 0.4).unwrap();
        let cross = e[0] * x[1] - e[1] * x[0];
        assert!(cross.abs() < 1e-12);
    }

    #[test]
    fn sampling_moments_and_reproducibility() {
        let g = std_normal(1);
        let n = 10_000;
        let s = sample_gmm(&g, n, 5).unwrap();
        assert!(s.mean().unwrap().abs() < 4.0 / (n as f64).sqrt());
        assert_eq!(s, sample_gmm(&g, n, 5).unwrap());
        let two = GaussianMixture::new(
            vec![1.0, 0.0],
            array![[10.0], [-10.0]],
            array![[0.01], [0.01]],
        )
        .unwrap();
        let d = sample_gmm(&two, 500, 1).unwrap();
        assert!(d.iter().all(|v| *v > 5.0));
        assert!(sample_gmm(&g, 0, 1).is_err());
    }

    #[test]
    fn gmm_predictor_returns_zero_at_clean_end() {
        let sched = DiffusionSchedule::linear(10, 0.1, 0.2).unwrap();
        let p = GmmPredictor::single(sched, std_normal(2));
        let x = Tensor::ones(IxDyn(&[3, 2]));
        assert!(p.predict(&x, 0, &Condition::null()).unwrap().iter().all(|v| *v == 0.0));
        let e = p.predict(&x, 5, &Condition::null()).unwrap();
        assert_eq!(e.shape(), &[3, 2]);
    }

    #[test]
    fn dataset_contract() {
        let spec = TwoDomainDatasetSpec {
            num_samples: 64,
            num_eval: 32,
            rng_seed: 11,
            ..Default::default()
        };
        let ds = make_two_domain_dataset(&spec).unwrap();
        assert_eq!(ds.train_a.shape(), &[64, 3, 8, 8]);
        assert_eq!(ds.eval_b.shape(), &[32, 3, 8, 8]);
        for t in [&ds.train_a, &ds.train_b, &ds.eval_a, &ds.eval_b] {
            assert!(t.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        let gap = ds.train_a.mean().unwrap() - ds.train_b.mean().unwrap();
        assert!(gap > 0.2, "mean gap {gap}");
        assert_eq!(ds, make_two_domain_dataset(&spec).unwrap());
        for i in 0..32 {
            let a = edge_map(&ds.eval_a.index_axis(Axis(0), i).to_owned(), EDGE_THRESHOLD).unwrap();
            let b = edge_map(&ds.eval_b.index_axis(Axis(0), i).to_owned(), EDGE_THRESHOLD).unwrap();
            assert_eq!(a, b, "pair {i}");
            assert!(a.sum() > 0.0);
        }
        assert!(make_two_domain_dataset(&TwoDomainDatasetSpec {
            image_size: 7,
            ..spec
        })
        .is_err());
    }

    #[test]
    fn larger_images_are_supported() {
        let spec = TwoDomainDatasetSpec {
            image_size: 16,
            num_samples: 4,
            num_eval: 4,
            ..Default::default()
        };
        let ds = make_two_domain_dataset(&spec).unwrap();
        assert_eq!(ds.train_a.shape(), &[4, 3, 16, 16]);
    }

    #[test]
    fn edge_map_examples() {
        let flat = Tensor::from_elem(IxDyn(&[3, 6, 6]), 0.4);
        assert_eq!(edge_map(&flat, 0.03).unwrap().sum(), 0.0);

        let step = Array3::from_shape_fn((3, 6, 6), |(_, _, c)| if c < 3 { 0.2 } else { 0.8 }).into_dyn();
        let e = edge_map(&step, 0.03).unwrap();
        for r in 0..6 {
            for c in 0..6 {
                assert_eq!(e[[r, c]], if c == 2 { 1.0 } else { 0.0 });
            }
        }
    }

    proptest! {
        #[test]
        fn eps_consistency(
            mu in proptest::collection::vec(-3.0f64..3.0, 6),
            var in proptest::collection::vec(0.05f64..2.0, 6),
            x in proptest::collection::vec(-4.0f64..4.0, 3),
            w in 0.05f64..0.95,
            a in 0.001f64..0.999,
        ) {
            let g = GaussianMixture::new(
                vec![w, 1.0 - w],
                Array2::from_shape_vec((2, 3), mu).unwrap(),
                Array2::from_shape_vec((2, 3), var).unwrap(),
            ).unwrap();
            let xv = Array1::from(x);
            let m = gmm_posterior_mean(&g, xv.view(), a).unwrap();
            let e = gmm_optimal_eps(&g, xv.view(), a).unwrap();
            let x0 = crate::ddim::predict_x0(&xv.clone().into_dyn(), &e.into_dyn(), a).unwrap();
            for j in 0..3 {
                prop_assert!((x0[j] - m[j]).abs() < 1e-10 * (1.0 + m[j].abs()));
            }
        }

        #[test]
        fn posterior_limits(
            mu in proptest::collection::vec(-1.0f64..1.0, 4),
            x in proptest::collection::vec(-0.25f64..0.25, 2),
        ) {
            let g = GaussianMixture::new(
                vec![0.3, 0.7],
                Array2::from_shape_vec((2, 2), mu).unwrap(),
                Array2::from_elem((2, 2), 0.5),
            ).unwrap();
            let xv = Array1::from(x);
            let near_clean = gmm_posterior_mean(&g, xv.view(), 1.0 - 1e-9).unwrap();
            let near_noise = gmm_posterior_mean(&g, xv.view(), 1e-6).unwrap();
            let global = g.mean();
            for j in 0..2 {
                prop_assert!((near_clean[j] - xv[j]).abs() < 1e-6);
                prop_assert!((near_noise[j] - global[j]).abs() < 1e-3);
            }
        }

        #[test]
        fn edge_map_invariant_to_intensity_inversion(vals in proptest::collection::vec(0.0f64..1.0, 3 * 25)) {
            let img = Tensor::from_shape_vec(IxDyn(&[3, 5, 5]), vals).unwrap();
            let inv = img.mapv(|v| 1.0 - v);
            let a = edge_map(&img, 0.1).unwrap();
            let b = edge_map(&inv, 0.1).unwrap();
            let diff = a.iter().zip(b.iter()).filter(|(p, q)| p != q).count();
            // rounding can only matter for gradients within an ulp of the threshold
            prop_assert!(diff == 0);
        }
    }
}
