//! Deterministic DDIM sampling and inversion with classifier-free guidance.
//!
//! The engine is generic over [`NoisePredictor`], which receives a batch
//! `[N, ...]` of states at a common timestep. Flat oracle states use shape
//! `[N, D]`; image states use `[N, C, H, W]`.

use ndarray::{Axis, Zip};
use serde::{Deserialize, Serialize};
use sts_nn::{par, Tensor};

use crate::error::{ensure_shape, Result, StsError};
use crate::schedule::{DiffusionSchedule, TimestepPlan};

/// Discrete domain label standing in for a text prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainToken {
    Source,
    Target,
    Null,
}

impl DomainToken {
    pub const COUNT: usize = 3;

    pub fn index(self) -> usize {
        match self {
            Self::Source => 0,
            Self::Target => 1,
            Self::Null => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(Self::Source),
            1 => Some(Self::Target),
            2 => Some(Self::Null),
            _ => None,
        }
    }

    /// The other domain; `Null` maps to itself.
    pub fn flip(self) -> Self {
        match self {
            Self::Source => Self::Target,
            Self::Target => Self::Source,
            Self::Null => Self::Null,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Source => "source",
            Self::Target => "target",
            Self::Null => "null",
        }
    }
}

impl std::str::FromStr for DomainToken {
    type Err = StsError;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "source" | "a" => Ok(Self::Source),
            "target" | "b" => Ok(Self::Target),
            "null" => Ok(Self::Null),
            other => Err(StsError::invalid(format!("unknown domain token {other:?}"))),
        }
    }
}

/// Token plus an optional spatial map `[N, 1, H, W]` (one map per batch row).
#[derive(Debug, Clone, PartialEq)]
pub struct Condition {
    pub token: DomainToken,
    pub spatial: Option<Tensor>,
}

impl Condition {
    pub fn token(token: DomainToken) -> Self {
        Self { token, spatial: None }
    }

    pub fn null() -> Self {
        Self::token(DomainToken::Null)
    }

    pub fn with_spatial(token: DomainToken, spatial: Tensor) -> Self {
        Self {
            token,
            spatial: Some(spatial),
        }
    }

    /// The same condition restricted to batch rows `range`.
    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        Self {
            token: self.token,
            spatial: self
                .spatial
                .as_ref()
                .map(|s| s.slice_axis(Axis(0), (start..end).into()).to_owned()),
        }
    }

    pub fn validate(&self, x_shape: &[usize]) -> Result<()> {
        if let Some(s) = &self.spatial {
            if x_shape.len() != 4 {
                return Err(StsError::invalid("spatial map requires [N, C, H, W] states"));
            }
            ensure_shape(&[x_shape[0], 1, x_shape[2], x_shape[3]], s.shape())?;
        }
        Ok(())
    }
}

/// Guidance scale with the conditional and unconditional branches.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceConfig {
    pub omega: f64,
    pub cond: Condition,
    pub uncond: Condition,
}

impl GuidanceConfig {
    /// Conditional branch only.
    pub fn unguided(cond: Condition) -> Self {
        let uncond = Condition {
            token: DomainToken::Null,
            spatial: cond.spatial.clone(),
        };
        Self {
            omega: 1.0,
            cond,
            uncond,
        }
    }

    /// CFG with the unconditional branch sharing the spatial map of `cond`.
    pub fn new(omega: f64, cond: Condition) -> Self {
        Self {
            omega,
            ..Self::unguided(cond)
        }
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Self {
        Self {
            omega: self.omega,
            cond: self.cond.slice_rows(start, end),
            uncond: self.uncond.slice_rows(start, end),
        }
    }
}

/// ε-prediction model. Implementations must be deterministic and return an
/// array with the same shape as `x`.
pub trait NoisePredictor: Sync {
    fn predict(&self, x: &Tensor, t: usize, cond: &Condition) -> Result<Tensor>;
}

impl<P: NoisePredictor + ?Sized> NoisePredictor for &P {
    fn predict(&self, x: &Tensor, t: usize, cond: &Condition) -> Result<Tensor> {
        (**self).predict(x, t, cond)
    }
}

impl<P: NoisePredictor + ?Sized> NoisePredictor for Box<P> {
    fn predict(&self, x: &Tensor, t: usize, cond: &Condition) -> Result<Tensor> {
        (**self).predict(x, t, cond)
    }
}

/// Predicts ε ≡ 0 everywhere.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroPredictor;

impl NoisePredictor for ZeroPredictor {
    fn predict(&self, x: &Tensor, _t: usize, _cond: &Condition) -> Result<Tensor> {
        Ok(Tensor::zeros(x.raw_dim()))
    }
}

/// A batch of states sharing one timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub values: Tensor,
    pub timestep: usize,
}

impl LatentState {
    pub fn new(values: Tensor, timestep: usize) -> Result<Self> {
        check_finite(&values, "latent state")?;
        Ok(Self { values, timestep })
    }

    pub fn batch_len(&self) -> usize {
        self.values.shape().first().copied().unwrap_or(0)
    }
}

/// Output of [`sample`] / [`invert`].
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub end: LatentState,
    /// Every visited state including the start, in visiting order. Empty
    /// unless requested.
    pub states: Vec<LatentState>,
}

pub(crate) fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    if t.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(StsError::NonFinite(what.to_string()))
    }
}

fn check_abar(a: f64, name: &str) -> Result<()> {
    if a > 0.0 && a <= 1.0 {
        Ok(())
    } else {
        Err(StsError::invalid(format!("{name} = {a} outside (0, 1]")))
    }
}

/// `(x_t - sqrt(1 - abar_t) eps) / sqrt(abar_t)`.
pub fn predict_x0(x_t: &Tensor, eps: &Tensor, abar_t: f64) -> Result<Tensor> {
    check_abar(abar_t, "abar_t")?;
    ensure_shape(x_t.shape(), eps.shape())?;
    let (sa, sb) = (abar_t.sqrt(), (1.0 - abar_t).sqrt());
    let mut out = x_t.clone();
    Zip::from(&mut out).and(eps).for_each(|o, &e| *o = (*o - sb * e) / sa);
    Ok(out)
}

fn reproject(x_t: &Tensor, eps: &Tensor, abar_t: f64, abar_to: f64) -> Result<Tensor> {
    let mut x0 = predict_x0(x_t, eps, abar_t)?;
    let (sa, sb) = (abar_to.sqrt(), (1.0 - abar_to).sqrt());
    Zip::from(&mut x0).and(eps).for_each(|o, &e| *o = sa * *o + sb * e);
    Ok(x0)
}

/// One denoising step from `abar_t` to the less noisy `abar_prev`.
pub fn ddim_step(x_t: &Tensor, eps: &Tensor, abar_t: f64, abar_prev: f64) -> Result<Tensor> {
    check_abar(abar_prev, "abar_prev")?;
    if abar_prev < abar_t {
        return Err(StsError::invalid(format!(
            "ddim_step needs abar_prev >= abar_t, got {abar_prev} < {abar_t}"
        )));
    }
    reproject(x_t, eps, abar_t, abar_prev)
}

/// One inversion step from `abar_t` to the noisier `abar_next`.
pub fn ddim_invert_step(x_t: &Tensor, eps: &Tensor, abar_t: f64, abar_next: f64) -> Result<Tensor> {
    check_abar(abar_next, "abar_next")?;
    if abar_next > abar_t {
        return Err(StsError::invalid(format!(
            "ddim_invert_step needs abar_next <= abar_t, got {abar_next} > {abar_t}"
        )));
    }
    reproject(x_t, eps, abar_t, abar_next)
}

/// `(1 - omega) u + omega c`, equal to `u + omega (c - u)` and exact at
/// `omega = 0` and `omega = 1`.
pub fn cfg_combine(eps_uncond: &Tensor, eps_cond: &Tensor, omega: f64) -> Result<Tensor> {
    ensure_shape(eps_uncond.shape(), eps_cond.shape())?;
    if omega == 1.0 {
        return Ok(eps_cond.clone());
    }
    if omega == 0.0 {
        return Ok(eps_uncond.clone());
    }
    let mut out = eps_cond.clone();
    Zip::from(&mut out)
        .and(eps_uncond)
        .for_each(|c, &u| *c = u + omega * (*c - u));
    Ok(out)
}

fn guided_eps<P: NoisePredictor + ?Sized>(
    predictor: &P,
    x: &Tensor,
    t: usize,
    guidance: &GuidanceConfig,
) -> Result<Tensor> {
    let c = predictor.predict(x, t, &guidance.cond)?;
    ensure_shape(x.shape(), c.shape())?;
    if guidance.omega == 1.0 {
        check_finite(&c, "noise prediction")?;
        return Ok(c);
    }
    let u = predictor.predict(x, t, &guidance.uncond)?;
    let e = cfg_combine(&u, &c, guidance.omega)?;
    check_finite(&e, "noise prediction")?;
    Ok(e)
}

/// Runs the guided DDIM sampler from `seed` (at `T`) down to `t = 0`.
pub fn sample<P: NoisePredictor + ?Sized>(
    seed: &LatentState,
    predictor: &P,
    plan: &TimestepPlan,
    guidance: &GuidanceConfig,
    schedule: &DiffusionSchedule,
    keep_trajectory: bool,
) -> Result<Trajectory> {
    if seed.timestep != plan.last() {
        return Err(StsError::invalid(format!(
            "seed timestep {} does not match plan end {}",
            seed.timestep,
            plan.last()
        )));
    }
    guidance.cond.validate(seed.values.shape())?;
    guidance.uncond.validate(seed.values.shape())?;
    let mut x = seed.values.clone();
    let mut states = Vec::new();
    if keep_trajectory {
        states.push(seed.clone());
    }
    for (t, t_prev) in plan.sampling_pairs() {
        let eps = guided_eps(predictor, &x, t, guidance)?;
        x = ddim_step(&x, &eps, schedule.alpha_bar(t), schedule.alpha_bar(t_prev))?;
        if keep_trajectory {
            states.push(LatentState {
                values: x.clone(),
                timestep: t_prev,
            });
        }
    }
    check_finite(&x, "sampled state")?;
    Ok(Trajectory {
        end: LatentState { values: x, timestep: 0 },
        states,
    })
}

/// Runs DDIM inversion from `x0` (at `t = 0`) up to `T`, conditional branch only.
pub fn invert<P: NoisePredictor + ?Sized>(
    x0: &LatentState,
    predictor: &P,
    plan: &TimestepPlan,
    condition: &Condition,
    schedule: &DiffusionSchedule,
    keep_trajectory: bool,
) -> Result<Trajectory> {
    if x0.timestep != 0 {
        return Err(StsError::invalid(format!(
            "inversion starts at timestep 0, got {}",
            x0.timestep
        )));
    }
    condition.validate(x0.values.shape())?;
    let mut x = x0.values.clone();
    let mut states = Vec::new();
    if keep_trajectory {
        states.push(x0.clone());
    }
    for (t, t_next) in plan.inversion_pairs() {
        let eps = predictor.predict(&x, t, condition)?;
        ensure_shape(x.shape(), eps.shape())?;
        check_finite(&eps, "noise prediction")?;
        x = ddim_invert_step(&x, &eps, schedule.alpha_bar(t), schedule.alpha_bar(t_next))?;
        if keep_trajectory {
            states.push(LatentState {
                values: x.clone(),
                timestep: t_next,
            });
        }
    }
    check_finite(&x, "inverted state")?;
    Ok(Trajectory {
        end: LatentState {
            values: x,
            timestep: plan.last(),
        },
        states,
    })
}

fn concat_rows(parts: Vec<Tensor>) -> Tensor {
    let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
    ndarray::concatenate(Axis(0), &views).expect("chunks share trailing shape")
}

fn chunk_bounds(n: usize, chunk: usize) -> Vec<(usize, usize)> {
    let chunk = chunk.max(1);
    (0..n.div_ceil(chunk))
        .map(|i| (i * chunk, ((i + 1) * chunk).min(n)))
        .collect()
}

/// [`sample`] over a large batch, split into row chunks processed in
/// parallel. Row results do not depend on the chunk size as long as the
/// predictor treats rows independently.
pub fn sample_batched<P: NoisePredictor + ?Sized>(
    seeds: &LatentState,
    predictor: &P,
    plan: &TimestepPlan,
    guidance: &GuidanceConfig,
    schedule: &DiffusionSchedule,
    chunk: usize,
) -> Result<LatentState> {
    let bounds = chunk_bounds(seeds.batch_len(), chunk);
    let parts = par::map_slice(&bounds, |&(a, b)| {
        let s = LatentState {
            values: seeds.values.slice_axis(Axis(0), (a..b).into()).to_owned(),
            timestep: seeds.timestep,
        };
        sample(&s, predictor, plan, &guidance.slice_rows(a, b), schedule, false)
            .map(|t| t.end.values)
    });
    let parts = parts.into_iter().collect::<Result<Vec<_>>>()?;
    if parts.is_empty() {
        return Ok(LatentState {
            values: seeds.values.clone(),
            timestep: 0,
        });
    }
    Ok(LatentState {
        values: concat_rows(parts),
        timestep: 0,
    })
}

/// [`invert`] over a large batch in parallel row chunks.
pub fn invert_batched<P: NoisePredictor + ?Sized>(
    x0: &LatentState,
    predictor: &P,
    plan: &TimestepPlan,
    condition: &Condition,
    schedule: &DiffusionSchedule,
    chunk: usize,
) -> Result<LatentState> {
    let bounds = chunk_bounds(x0.batch_len(), chunk);
    let parts = par::map_slice(&bounds, |&(a, b)| {
        let s = LatentState {
            values: x0.values.slice_axis(Axis(0), (a..b).into()).to_owned(),
            timestep: x0.timestep,
        };
        invert(&s, predictor, plan, &condition.slice_rows(a, b), schedule, false)
            .map(|t| t.end.values)
    });
    let parts = parts.into_iter().collect::<Result<Vec<_>>>()?;
    if parts.is_empty() {
        return Ok(LatentState {
            values: x0.values.clone(),
            timestep: plan.last(),
        });
    }
    Ok(LatentState {
        values: concat_rows(parts),
        timestep: plan.last(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, ArrayD, IxDyn};
    use proptest::prelude::*;

    fn t1(v: &[f64]) -> Tensor {
        arr1(v).into_dyn()
    }

    #[test]
    fn predict_x0_examples() {
        let x = t1(&[0.3, -1.2]);
        assert_eq!(predict_x0(&x, &Tensor::zeros(x.raw_dim()), 1.0).unwrap(), x);
        let r = predict_x0(&t1(&[1.0]), &t1(&[1.0]), 0.25).unwrap();
        assert!((r[0] - 0.267_949_192_431_122_7).abs() < 1e-15);
        assert!(predict_x0(&x, &x, 0.0).is_err());
        assert!(predict_x0(&x, &x, 1.5).is_err());
        assert!(predict_x0(&x, &t1(&[1.0]), 0.5).is_err());
    }

    #[test]
    fn forward_noising_is_inverted_exactly() {
        let (x0, n, a) = (t1(&[0.7, -0.2, 1.5]), t1(&[-0.4, 1.1, 0.05]), 0.37f64);
        let xt = x0.mapv(|v| a.sqrt() * v) + n.mapv(|v| (1.0 - a).sqrt() * v);
        let r = predict_x0(&xt, &n, a).unwrap();
        for (p, q) in r.iter().zip(x0.iter()) {
            assert!((p - q).abs() < 1e-14);
        }
    }

    #[test]
    fn ddim_step_examples() {
        let x = t1(&[2.0, -1.0]);
        let z = Tensor::zeros(x.raw_dim());
        let r = ddim_step(&x, &z, 0.3, 0.8).unwrap();
        let k = (0.8f64 / 0.3).sqrt();
        assert!((r[0] - 2.0 * k).abs() < 1e-14 && (r[1] + k).abs() < 1e-14);

        let e = t1(&[0.5, 0.25]);
        assert_eq!(ddim_step(&x, &e, 0.4, 1.0).unwrap(), predict_x0(&x, &e, 0.4).unwrap());

        let r = ddim_step(&t1(&[1.0]), &t1(&[0.5]), 0.25, 0.5).unwrap();
        let h = 0.5f64.sqrt();
        let expected = h * (1.0 - 0.75f64.sqrt() * 0.5) / 0.5 + h * 0.5;
        assert!((r[0] - expected).abs() < 1e-15);

        assert!(ddim_step(&x, &z, 0.8, 0.3).is_err());
        assert!(ddim_invert_step(&x, &z, 0.3, 0.8).is_err());
    }

    #[test]
    fn invert_step_with_zero_eps_scales() {
        let x = t1(&[1.0, 4.0]);
        let r = ddim_invert_step(&x, &Tensor::zeros(x.raw_dim()), 0.9, 0.1).unwrap();
        let k = (0.1f64 / 0.9).sqrt();
        assert!((r[0] - k).abs() < 1e-15 && (r[1] - 4.0 * k).abs() < 1e-14);
    }

    #[test]
    fn cfg_examples() {
        let u = t1(&[0.1, -2.0, 3.3]);
        let c = t1(&[1.7, 0.4, -0.9]);
        assert_eq!(cfg_combine(&u, &c, 1.0).unwrap(), c);
        assert_eq!(cfg_combine(&u, &c, 0.0).unwrap(), u);
        assert_eq!(cfg_combine(&t1(&[0.0]), &t1(&[1.0]), 5.0).unwrap(), t1(&[5.0]));
        assert!(cfg_combine(&u, &t1(&[1.0]), 2.0).is_err());
    }

    fn setup() -> (DiffusionSchedule, TimestepPlan) {
        let s = DiffusionSchedule::linear(1000, 1e-4, 0.02).unwrap();
        let p = s.plan(20).unwrap();
        (s, p)
    }

    #[test]
    fn zero_predictor_sampling_and_inversion_telescopes() {
        let (s, p) = setup();
        let x = ArrayD::from_shape_fn(IxDyn(&[3, 2]), |i| (i[0] as f64) - 0.5 * i[1] as f64);
        let seed = LatentState::new(x.clone(), 1000).unwrap();
        let g = GuidanceConfig::unguided(Condition::token(DomainToken::Target));
        let out = sample(&seed, &ZeroPredictor, &p, &g, &s, false).unwrap();
        let k = s.alpha_bar(1000).sqrt();
        for (o, v) in out.end.values.iter().zip(x.iter()) {
            assert!((o - v / k).abs() < 1e-10 * (1.0 + (v / k).abs()));
        }
        assert_eq!(out.end.timestep, 0);

        let x0 = LatentState::new(x.clone(), 0).unwrap();
        let inv = invert(&x0, &ZeroPredictor, &p, &Condition::null(), &s, true).unwrap();
        for (o, v) in inv.end.values.iter().zip(x.iter()) {
            assert!((o - v * k).abs() < 1e-12);
        }
        assert_eq!(inv.states.len(), 21);
        assert_eq!(inv.states.last().unwrap().timestep, 1000);
    }

    #[test]
    fn sample_rejects_wrong_timestep() {
        let (s, p) = setup();
        let seed = LatentState::new(Tensor::zeros(IxDyn(&[1, 2])), 999).unwrap();
        let g = GuidanceConfig::unguided(Condition::null());
        assert!(sample(&seed, &ZeroPredictor, &p, &g, &s, false).is_err());
        let x0 = LatentState::new(Tensor::zeros(IxDyn(&[1, 2])), 5).unwrap();
        assert!(invert(&x0, &ZeroPredictor, &p, &Condition::null(), &s, false).is_err());
    }

    #[test]
    fn spatial_map_shape_is_checked() {
        let (s, p) = setup();
        let seed = LatentState::new(Tensor::zeros(IxDyn(&[2, 3, 4, 4])), 1000).unwrap();
        let bad = Condition::with_spatial(DomainToken::Target, Tensor::zeros(IxDyn(&[2, 1, 3, 4])));
        let g = GuidanceConfig::new(2.0, bad);
        assert!(matches!(
            sample(&seed, &ZeroPredictor, &p, &g, &s, false),
            Err(StsError::ShapeMismatch { .. })
        ));
    }

    struct Failing;
    impl NoisePredictor for Failing {
        fn predict(&self, _x: &Tensor, _t: usize, _c: &Condition) -> Result<Tensor> {
            Err(StsError::invalid("boom"))
        }
    }

    struct NanPredictor;
    impl NoisePredictor for NanPredictor {
        fn predict(&self, x: &Tensor, _t: usize, _c: &Condition) -> Result<Tensor> {
            Ok(x.mapv(|_| f64::NAN))
        }
    }

    #[test]
    fn predictor_failures_propagate() {
        let (s, p) = setup();
        let x0 = LatentState::new(Tensor::zeros(IxDyn(&[1, 2])), 0).unwrap();
        assert!(invert(&x0, &Failing, &p, &Condition::null(), &s, false).is_err());
        assert!(matches!(
            invert(&x0, &NanPredictor, &p, &Condition::null(), &s, false),
            Err(StsError::NonFinite(_))
        ));
    }

    proptest! {
        #[test]
        fn step_inverse_with_frozen_eps(
            xs in proptest::collection::vec(-3.0f64..3.0, 1..16),
            a_hi in 0.01f64..1.0,
            frac in 0.01f64..1.0,
            seed in any::<u64>(),
        ) {
            let a_lo = a_hi * frac;
            let x = Tensor::from_shape_vec(IxDyn(&[xs.len()]), xs.clone()).unwrap();
            let eps = x.mapv(|v| ((v * 12.9898 + seed as f64 * 1e-9).sin() * 43758.5453).fract());
            let up = ddim_invert_step(&x, &eps, a_hi, a_lo).unwrap();
            let back = ddim_step(&up, &eps, a_lo, a_hi).unwrap();
            let num: f64 = back.iter().zip(x.iter()).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
            let den: f64 = x.iter().map(|q| q * q).sum::<f64>().sqrt().max(1e-12);
            prop_assert!(num / den < 1e-9 || num < 1e-12);
            prop_assert_eq!(up.shape(), x.shape());
        }

        #[test]
        fn cfg_unit_scale_is_exact(
            u in proptest::collection::vec(-1e3f64..1e3, 1..32),
            c in proptest::collection::vec(-1e3f64..1e3, 1..32),
        ) {
            let n = u.len().min(c.len());
            let ut = Tensor::from_shape_vec(IxDyn(&[n]), u[..n].to_vec()).unwrap();
            let ct = Tensor::from_shape_vec(IxDyn(&[n]), c[..n].to_vec()).unwrap();
            prop_assert_eq!(cfg_combine(&ut, &ct, 1.0).unwrap(), ct);
        }
    }
}
