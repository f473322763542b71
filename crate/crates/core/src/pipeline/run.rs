//! End-to-end translation, the four-row ablation and the guidance sweep.

use ndarray::{Array2, Axis, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use sts_nn::Tensor;

use crate::ddim::{invert_batched, sample_batched, Condition, GuidanceConfig, LatentState};
use crate::denoiser::Denoiser;
use crate::error::{Result, StageContext, StsError};
use crate::metrics::{kid, mean_ssim, median_heuristic_bandwidths, mmd_rbf, FeatureExtractor, SsimParams, MMD_BANDWIDTH_MULTIPLIERS};
use crate::oracle::{edge_maps, EDGE_THRESHOLD};
use crate::probe::Classifier;
use crate::schedule::{DiffusionSchedule, TimestepPlan};
use crate::translator::{translate_seed, Direction, SeedTranslator};

use super::arrays::quantize;

/// Maps images to the space the diffusion model works in and back.
pub trait LatentCodec: Send + Sync {
    fn name(&self) -> &str;
    fn encode(&self, images: &Tensor) -> Result<Tensor>;
    fn decode(&self, latents: &Tensor) -> Result<Tensor>;
}

/// Pixel space is the latent space.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityCodec;

impl LatentCodec for IdentityCodec {
    fn name(&self) -> &str {
        "identity"
    }

    fn encode(&self, images: &Tensor) -> Result<Tensor> {
        Ok(images.clone())
    }

    fn decode(&self, latents: &Tensor) -> Result<Tensor> {
        Ok(latents.clone())
    }
}

/// Everything a translation needs.
pub struct StsModels {
    /// Denoiser with its spatial adapter attached.
    pub denoiser: Denoiser,
    pub translator: SeedTranslator,
    pub schedule: DiffusionSchedule,
    pub plan: TimestepPlan,
    pub omega_fwd: f64,
    pub codec: Box<dyn LatentCodec>,
    /// Rows per parallel work item.
    pub chunk: usize,
}

impl StsModels {
    /// Checks that the pieces fit together.
    pub fn check(&self) -> Result<()> {
        if !self.denoiser.has_adapter() {
            return Err(StsError::Provenance("the denoiser has no spatial adapter".into()));
        }
        if self.plan.last() > self.schedule.total_steps() {
            return Err(StsError::Provenance("plan exceeds the schedule".into()));
        }
        let shape = self.denoiser.config().state_shape();
        if shape[0] != self.translator.config().channels {
            return Err(StsError::Provenance(format!(
                "translator expects {} channels, denoiser works on {}",
                self.translator.config().channels,
                shape[0]
            )));
        }
        if let Some(p) = &self.translator.trained_on {
            if p.plan != self.plan.steps() {
                return Err(StsError::Provenance("translator was trained on seeds from another plan".into()));
            }
        }
        if !self.omega_fwd.is_finite() || self.chunk == 0 {
            return Err(StsError::invalid("omega_fwd must be finite and chunk positive"));
        }
        Ok(())
    }

    fn latent_state(&self, values: Tensor, t: usize) -> Result<LatentState> {
        LatentState::new(values, t)
    }

    /// Inverts encoded sources with their own token and edge maps.
    pub fn invert(&self, latents: &Tensor, edges: &Tensor, source: crate::ddim::DomainToken) -> Result<Tensor> {
        let x0 = self.latent_state(latents.clone(), 0)?;
        let cond = Condition::with_spatial(source, edges.clone());
        let z = invert_batched(&x0, &self.denoiser, &self.plan, &cond, &self.schedule, self.chunk)?;
        Ok(quantize(&z.values))
    }

    /// Samples from seeds at the last plan timestep.
    pub fn sample(&self, seeds: &Tensor, edges: &Tensor, target: crate::ddim::DomainToken, omega: f64) -> Result<Tensor> {
        let z = self.latent_state(seeds.clone(), self.plan.last())?;
        let guidance = GuidanceConfig::new(omega, Condition::with_spatial(target, edges.clone()));
        let x = sample_batched(&z, &self.denoiser, &self.plan, &guidance, &self.schedule, self.chunk)?;
        Ok(x.values)
    }

    pub fn translate_seeds(&self, seeds: &Tensor, dir: Direction) -> Result<Tensor> {
        let z = self.latent_state(seeds.clone(), self.plan.last())?;
        Ok(quantize(&translate_seed(&self.translator, &z, dir)?.values))
    }
}

/// Source edge maps `[N, 1, H, W]`.
pub fn spatial_maps(images: &Tensor) -> Result<Tensor> {
    edge_maps(images, EDGE_THRESHOLD)
}

/// Output of [`sts_translate`] with its intermediates.
#[derive(Debug, Clone, PartialEq)]
pub struct Translation {
    pub edges: Tensor,
    /// Inverted source seeds.
    pub z_source: Tensor,
    /// Seeds after translation.
    pub z_target: Tensor,
    pub output: Tensor,
}

/// Encode, invert with the source token, translate the seed, sample with
/// the target token under the source edge map, decode. Seeds are rounded
/// to `f32` at every stage boundary, so resuming from persisted
/// intermediates reproduces the output exactly.
pub fn sts_translate(images: &Tensor, models: &StsModels, dir: Direction) -> Result<Translation> {
    models.check().stage("check")?;
    let edges = spatial_maps(images).stage("edges")?;
    let latents = models.codec.encode(images).stage("encode")?;
    let z_source = models.invert(&latents, &edges, dir.source()).stage("invert")?;
    let z_target = models.translate_seeds(&z_source, dir).stage("translate")?;
    let output = finish_from_target_seeds(&z_target, &edges, models, dir)?;
    Ok(Translation {
        edges,
        z_source,
        z_target,
        output,
    })
}

/// The sampling and decoding half of [`sts_translate`].
pub fn finish_from_target_seeds(z_target: &Tensor, edges: &Tensor, models: &StsModels, dir: Direction) -> Result<Tensor> {
    let latents = models
        .sample(z_target, edges, dir.target(), models.omega_fwd)
        .stage("sample")?;
    let out = models.codec.decode(&latents).stage("decode")?;
    Ok(quantize(&out))
}

/// Which parts of the full method a configuration uses. The spatial
/// adapter is always on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct AblationConfig {
    pub use_inversion: bool,
    pub use_seed_translation: bool,
}

impl AblationConfig {
    pub const ROWS: [AblationConfig; 4] = [
        AblationConfig {
            use_inversion: false,
            use_seed_translation: false,
        },
        AblationConfig {
            use_inversion: true,
            use_seed_translation: false,
        },
        AblationConfig {
            use_inversion: false,
            use_seed_translation: true,
        },
        AblationConfig {
            use_inversion: true,
            use_seed_translation: true,
        },
    ];

    pub const FULL: AblationConfig = Self::ROWS[3];

    pub fn name(&self) -> &'static str {
        match (self.use_inversion, self.use_seed_translation) {
            (false, false) => "controlnet",
            (true, false) => "controlnet+inv",
            (false, true) => "controlnet+st",
            (true, true) => "sts",
        }
    }
}

/// Standard-normal seeds for rows without inversion.
pub fn random_seeds(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    quantize(&Tensor::from_shape_fn(IxDyn(shape), |_| rng.sample::<f64, _>(StandardNormal)))
}

/// Translates `sources` under one ablation configuration.
pub fn run_configuration(
    sources: &Tensor,
    models: &StsModels,
    row: AblationConfig,
    omega: f64,
    rng_seed: u64,
    dir: Direction,
) -> Result<Tensor> {
    models.check().stage("check")?;
    let edges = spatial_maps(sources).stage("edges")?;
    let latents = models.codec.encode(sources).stage("encode")?;
    let mut z = if row.use_inversion {
        models.invert(&latents, &edges, dir.source()).stage("invert")?
    } else {
        random_seeds(latents.shape(), rng_seed)
    };
    if row.use_seed_translation {
        z = models.translate_seeds(&z, dir).stage("translate")?;
    }
    let x = models.sample(&z, &edges, dir.target(), omega).stage("sample")?;
    Ok(quantize(&models.codec.decode(&x).stage("decode")?))
}

/// One row of a metrics table. KID and MMD are reported times 1e3.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub run_id: String,
    pub config_name: String,
    pub omega: f64,
    pub kid: f64,
    pub mmd: f64,
    pub ssim: f64,
    pub probe_acc: f64,
}

pub const METRICS_HEADER: &str = "run_id,config_name,omega,KID,MMD,SSIM,probe_acc";

impl MetricsRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{:.6},{:.6},{:.6},{:.6}",
            self.run_id, self.config_name, self.omega, self.kid, self.mmd, self.ssim, self.probe_acc
        )
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// Parses a table written by [`metrics_csv`].
pub fn parse_metrics_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(METRICS_HEADER) {
        return Err(StsError::invalid("metrics table has an unexpected header"));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 7 {
                return Err(StsError::invalid(format!("metrics row has {} fields", f.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| StsError::invalid(format!("bad number {s:?}: {e}")));
            Ok(MetricsRow {
                run_id: f[0].into(),
                config_name: f[1].into(),
                omega: num(f[2])?,
                kid: num(f[3])?,
                mmd: num(f[4])?,
                ssim: num(f[5])?,
                probe_acc: num(f[6])?,
            })
        })
        .collect()
}

/// Scores translated images against a reference set of the target domain.
pub struct Evaluator<'a> {
    features: &'a dyn FeatureExtractor,
    probe: &'a Classifier,
    target_label: usize,
    reference: Array2<f64>,
    bandwidths: Vec<f64>,
    kid_subset: usize,
    kid_subsets: usize,
    ssim: SsimParams,
}

impl<'a> Evaluator<'a> {
    pub fn new(
        features: &'a dyn FeatureExtractor,
        probe: &'a Classifier,
        target_label: usize,
        target_images: &Tensor,
        kid_subset: usize,
        kid_subsets: usize,
    ) -> Result<Self> {
        let reference = features.features(target_images)?;
        let bandwidths = median_heuristic_bandwidths(reference.view(), &MMD_BANDWIDTH_MULTIPLIERS)?;
        Ok(Self {
            features,
            probe,
            target_label,
            reference,
            bandwidths,
            kid_subset,
            kid_subsets,
            ssim: SsimParams::default(),
        })
    }

    pub fn score(&self, run_id: &str, name: &str, omega: f64, sources: &Tensor, outputs: &Tensor, seed: u64) -> Result<MetricsRow> {
        let f = self.features.features(outputs)?;
        let m = self.kid_subset.min(f.nrows()).min(self.reference.nrows());
        let kid = kid(f.view(), self.reference.view(), m, self.kid_subsets, seed)?;
        let mmd = mmd_rbf(f.view(), self.reference.view(), &self.bandwidths)?;
        let ssim = mean_ssim(sources, outputs, &self.ssim)?;
        let pred = self.probe.predict(outputs)?;
        let hits = pred.iter().filter(|&&p| p == self.target_label).count();
        Ok(MetricsRow {
            run_id: run_id.into(),
            config_name: name.into(),
            omega,
            kid: kid.mean * 1e3,
            mmd: mmd * 1e3,
            ssim,
            probe_acc: hits as f64 / pred.len().max(1) as f64,
        })
    }
}

/// Output images of one table row.
#[derive(Debug, Clone, PartialEq)]
pub struct RowOutput {
    pub name: String,
    pub omega: f64,
    pub images: Tensor,
}

/// The four ablation rows at the forward guidance scale.
pub fn run_ablation(
    run_id: &str,
    sources: &Tensor,
    models: &StsModels,
    eval: &Evaluator,
    rng_seed: u64,
) -> Result<(Vec<MetricsRow>, Vec<RowOutput>)> {
    let mut rows = Vec::new();
    let mut outs = Vec::new();
    for cfg in AblationConfig::ROWS {
        let images = run_configuration(sources, models, cfg, models.omega_fwd, rng_seed, Direction::AtoB)?;
        rows.push(eval.score(run_id, cfg.name(), models.omega_fwd, sources, &images, rng_seed)?);
        outs.push(RowOutput {
            name: cfg.name().into(),
            omega: models.omega_fwd,
            images,
        });
    }
    Ok((rows, outs))
}

/// The full method at each guidance scale.
pub fn run_cfg_sweep(
    run_id: &str,
    sources: &Tensor,
    models: &StsModels,
    eval: &Evaluator,
    omegas: &[f64],
    rng_seed: u64,
) -> Result<(Vec<MetricsRow>, Vec<RowOutput>)> {
    let mut rows = Vec::new();
    let mut outs = Vec::new();
    let edges = spatial_maps(sources).stage("edges")?;
    let latents = models.codec.encode(sources).stage("encode")?;
    let z = models
        .invert(&latents, &edges, Direction::AtoB.source())
        .stage("invert")?;
    let z = models.translate_seeds(&z, Direction::AtoB).stage("translate")?;
    for &omega in omegas {
        let x = models
            .sample(&z, &edges, Direction::AtoB.target(), omega)
            .stage("sample")?;
        let images = quantize(&models.codec.decode(&x).stage("decode")?);
        rows.push(eval.score(run_id, AblationConfig::FULL.name(), omega, sources, &images, rng_seed)?);
        outs.push(RowOutput {
            name: AblationConfig::FULL.name().into(),
            omega,
            images,
        });
    }
    Ok((rows, outs))
}

/// Rows per batch dimension, used to cut large sets into slices.
pub fn take_rows(t: &Tensor, n: usize) -> Tensor {
    t.slice_axis(Axis(0), (0..n.min(t.shape()[0])).into()).to_owned()
}
