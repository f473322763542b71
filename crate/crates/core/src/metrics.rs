//! Image-quality and two-sample metrics: SSIM, multi-bandwidth RBF MMD, and
//! KID over subsets.
//!
//! Kernel sums are accumulated in sorted order so that every estimator is
//! exactly symmetric in its two arguments.

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sts_nn::{par, Tensor};

use crate::error::{ensure_shape, Result, StsError};

/// Maps a batch of images `[N, C, H, W]` to feature rows `[N, F]`.
pub trait FeatureExtractor: Sync {
    fn features(&self, images: &Tensor) -> Result<Array2<f64>>;
    /// Identifies the frozen weights that produced the features.
    fn id(&self) -> String;
}

/// Flattened pixels; useful as a reference embedding.
#[derive(Debug, Clone, Copy, Default)]
pub struct PixelFeatures;

impl FeatureExtractor for PixelFeatures {
    fn features(&self, images: &Tensor) -> Result<Array2<f64>> {
        let n = images.shape().first().copied().unwrap_or(0);
        let d = if n == 0 { 0 } else { images.len() / n };
        images
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((n, d))
            .map_err(|e| StsError::invalid(e.to_string()))
    }

    fn id(&self) -> String {
        "pixels".into()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub data_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            data_range: 1.0,
        }
    }
}

/// Mean SSIM of two `[C, H, W]` images, averaged over pixels and channels.
///
/// The Gaussian window is truncated at the image border and renormalized
/// over the pixels it still covers, so images smaller than the window are
/// handled without padding.
pub fn ssim(x: &Tensor, y: &Tensor, params: &SsimParams) -> Result<f64> {
    ensure_shape(x.shape(), y.shape())?;
    if x.ndim() != 3 {
        return Err(StsError::invalid("ssim expects [C, H, W] images"));
    }
    if params.window == 0 || params.window % 2 == 0 {
        return Err(StsError::invalid("ssim window must be odd"));
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let half = (params.window / 2) as isize;
    let g: Vec<f64> = (-half..=half)
        .map(|d| (-((d * d) as f64) / (2.0 * params.sigma * params.sigma)).exp())
        .collect();
    let c1 = (params.k1 * params.data_range).powi(2);
    let c2 = (params.k2 * params.data_range).powi(2);
    let mut total = 0.0;
    for ch in 0..c {
        let xs = x.index_axis(Axis(0), ch);
        let ys = y.index_axis(Axis(0), ch);
        for r in 0..h as isize {
            for col in 0..w as isize {
                let mut norm = 0.0;
                let (mut mx, mut my) = (0.0, 0.0);
                for dr in -half..=half {
                    for dc in -half..=half {
                        let (rr, cc) = (r + dr, col + dc);
                        if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                            continue;
                        }
                        let wt = g[(dr + half) as usize] * g[(dc + half) as usize];
                        norm += wt;
                        mx += wt * xs[[rr as usize, cc as usize]];
                        my += wt * ys[[rr as usize, cc as usize]];
                    }
                }
                mx /= norm;
                my /= norm;
                let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
                for dr in -half..=half {
                    for dc in -half..=half {
                        let (rr, cc) = (r + dr, col + dc);
                        if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                            continue;
                        }
                        let wt = g[(dr + half) as usize] * g[(dc + half) as usize] / norm;
                        let a = xs[[rr as usize, cc as usize]] - mx;
                        let b = ys[[rr as usize, cc as usize]] - my;
                        vx += wt * (a * a);
                        vy += wt * (b * b);
                        cxy += wt * (a * b);
                    }
                }
                let num = (2.0 * mx * my + c1) * (2.0 * cxy + c2);
                let den = (mx * mx + my * my + c1) * (vx + vy + c2);
                total += num / den;
            }
        }
    }
    Ok(total / (c * h * w) as f64)
}

/// Mean SSIM over corresponding images of two batches `[N, C, H, W]`.
pub fn mean_ssim(xs: &Tensor, ys: &Tensor, params: &SsimParams) -> Result<f64> {
    ensure_shape(xs.shape(), ys.shape())?;
    let n = xs.shape().first().copied().unwrap_or(0);
    if n == 0 {
        return Err(StsError::invalid("mean_ssim needs at least one image pair"));
    }
    let vals = par::map_range(n, |i| {
        ssim(
            &xs.index_axis(Axis(0), i).to_owned(),
            &ys.index_axis(Axis(0), i).to_owned(),
            params,
        )
    });
    let mut s = 0.0;
    for v in vals {
        s += v?;
    }
    Ok(s / n as f64)
}

fn sq_dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(p, q)| (p - q) * (p - q)).sum()
}

fn sorted_sum(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v.into_iter().sum()
}

/// All kernel values `k(a_i, b_j)`, optionally skipping `i == j`.
fn kernel_values<K>(a: ArrayView2<f64>, b: ArrayView2<f64>, skip_diag: bool, k: K) -> Vec<f64>
where
    K: Fn(ndarray::ArrayView1<f64>, ndarray::ArrayView1<f64>) -> f64 + Sync + Send,
{
    let rows = par::map_range(a.nrows(), |i| {
        (0..b.nrows())
            .filter(|&j| !(skip_diag && i == j))
            .map(|j| k(a.row(i), b.row(j)))
            .collect::<Vec<_>>()
    });
    rows.into_iter().flatten().collect()
}

fn check_sets(x: ArrayView2<f64>, y: ArrayView2<f64>, min: usize) -> Result<()> {
    if x.nrows() < min || y.nrows() < min {
        return Err(StsError::invalid(format!(
            "need at least {min} samples per set, got {} and {}",
            x.nrows(),
            y.nrows()
        )));
    }
    if x.ncols() != y.ncols() {
        return Err(StsError::ShapeMismatch {
            expected: vec![x.nrows(), x.ncols()],
            found: vec![y.nrows(), y.ncols()],
        });
    }
    Ok(())
}

/// Biased squared MMD with an RBF kernel `exp(-|a-b|^2 / (2 s^2))`,
/// averaged over `bandwidths`.
pub fn mmd_rbf(x: ArrayView2<f64>, y: ArrayView2<f64>, bandwidths: &[f64]) -> Result<f64> {
    check_sets(x, y, 2)?;
    if bandwidths.is_empty() || bandwidths.iter().any(|s| !(*s > 0.0)) {
        return Err(StsError::invalid("bandwidths must be positive and non-empty"));
    }
    let dxx = kernel_values(x, x, false, sq_dist);
    let dyy = kernel_values(y, y, false, sq_dist);
    let dxy = kernel_values(x, y, false, sq_dist);
    let (n, m) = (x.nrows() as f64, y.nrows() as f64);
    let mut acc = 0.0;
    for s in bandwidths {
        let k = |d: &Vec<f64>| sorted_sum(d.iter().map(|v| (-v / (2.0 * s * s)).exp()).collect());
        acc += k(&dxx) / (n * n) + k(&dyy) / (m * m) - 2.0 * k(&dxy) / (n * m);
    }
    Ok((acc / bandwidths.len() as f64).max(0.0))
}

/// Median pairwise distance of `reference` times each multiplier.
pub fn median_heuristic_bandwidths(reference: ArrayView2<f64>, multipliers: &[f64]) -> Result<Vec<f64>> {
    if reference.nrows() < 2 {
        return Err(StsError::invalid("median heuristic needs at least two samples"));
    }
    let mut d: Vec<f64> = (0..reference.nrows())
        .flat_map(|i| (i + 1..reference.nrows()).map(move |j| (i, j)))
        .map(|(i, j)| sq_dist(reference.row(i), reference.row(j)).sqrt())
        .collect();
    d.sort_by(f64::total_cmp);
    let med = if d.len() % 2 == 1 {
        d[d.len() / 2]
    } else {
        0.5 * (d[d.len() / 2 - 1] + d[d.len() / 2])
    };
    let med = if med > 0.0 { med } else { 1.0 };
    Ok(multipliers.iter().map(|m| m * med).collect())
}

/// Multipliers applied to the median distance.
pub const MMD_BANDWIDTH_MULTIPLIERS: [f64; 3] = [0.5, 1.0, 2.0];

fn poly_kernel(d: usize) -> impl Fn(ndarray::ArrayView1<f64>, ndarray::ArrayView1<f64>) -> f64 + Sync + Send {
    move |a, b| (a.dot(&b) / d as f64 + 1.0).powi(3)
}

/// Unbiased squared MMD with the cubic polynomial kernel on two equally
/// sized sets; the cross term also excludes `i == j`, so identical sets
/// give exactly zero.
pub fn unbiased_poly_mmd(x: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<f64> {
    check_sets(x, y, 2)?;
    if x.nrows() != y.nrows() {
        return Err(StsError::invalid("unbiased estimate needs equally sized sets"));
    }
    let m = x.nrows() as f64;
    let k = poly_kernel(x.ncols());
    let kxx = sorted_sum(kernel_values(x, x, true, &k));
    let kyy = sorted_sum(kernel_values(y, y, true, &k));
    let kxy = sorted_sum(kernel_values(x, y, true, &k));
    Ok((kxx + kyy - 2.0 * kxy) / (m * (m - 1.0)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KidEstimate {
    pub mean: f64,
    pub std: f64,
}

/// KID on explicit subset index pairs.
pub fn kid_on_subsets(
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    subsets: &[(Vec<usize>, Vec<usize>)],
) -> Result<KidEstimate> {
    if subsets.is_empty() {
        return Err(StsError::invalid("KID needs at least one subset"));
    }
    let vals = par::map_slice(subsets, |(ix, iy)| {
        unbiased_poly_mmd(x.select(Axis(0), ix).view(), y.select(Axis(0), iy).view())
    });
    let vals = vals.into_iter().collect::<Result<Vec<_>>>()?;
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = if vals.len() > 1 {
        vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    Ok(KidEstimate { mean, std: var.sqrt() })
}

/// KID averaged over `num_subsets` random subsets of size `subset_size`
/// drawn without replacement. When `subset_size` equals a set's size the
/// whole set is used in order.
pub fn kid(
    x: ArrayView2<f64>,
    y: ArrayView2<f64>,
    subset_size: usize,
    num_subsets: usize,
    rng_seed: u64,
) -> Result<KidEstimate> {
    if subset_size < 2 || x.nrows() < subset_size || y.nrows() < subset_size {
        return Err(StsError::invalid(format!(
            "KID subset size {subset_size} needs 2 <= size <= {} and {}",
            x.nrows(),
            y.nrows()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut draw = |n: usize| -> Vec<usize> {
        if n == subset_size {
            (0..n).collect()
        } else {
            sample_indices(&mut rng, n, subset_size).into_vec()
        }
    };
    let subsets: Vec<_> = (0..num_subsets).map(|_| (draw(x.nrows()), draw(y.nrows()))).collect();
    kid_on_subsets(x, y, &subsets)
}
