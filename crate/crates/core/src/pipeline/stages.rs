//! Workspace-backed pipeline stages. Every stage reads its inputs from the
//! workspace and writes its outputs back, so stages can run in separate
//! processes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sts_nn::Tensor;

use crate::ddim::DomainToken;
use crate::denoiser::{train_denoiser, write_loss_csv, Denoiser, DenoiserData, TrainState};
use crate::error::{Result, StageContext, StsError};
use crate::metrics::{FeatureExtractor, PixelFeatures};
use crate::oracle::make_two_domain_dataset;
use crate::probe::{compare_seed_vs_image_probe, hex_digest, Classifier, ProbeFeatures, ProbeReport};
use crate::translator::{build_seed_dataset, train_sts_gan, Direction, SeedDataset, SeedProvenance, SeedTranslator};

use super::arrays::{read_array, read_array_as, write_array};
use super::config::{ExperimentConfig, FeatureSpace};
use super::run::{
    metrics_csv, run_ablation, run_cfg_sweep, spatial_maps, sts_translate, Evaluator, IdentityCodec, MetricsRow,
    RowOutput, StsModels,
};

/// Directory layout of a workspace.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn data(&self, name: &str) -> PathBuf {
        self.root.join("data").join(name)
    }

    pub fn model(&self, name: &str) -> PathBuf {
        self.root.join("models").join(name)
    }

    pub fn seeds(&self, name: &str) -> PathBuf {
        self.root.join("seeds").join(name)
    }

    pub fn run_dir(&self, run_id: &str) -> PathBuf {
        self.root.join("runs").join(run_id)
    }

    pub fn probe_csv(&self) -> PathBuf {
        self.root.join("probe.csv")
    }

    pub const DENOISER: &'static str = "denoiser.ckpt";
    pub const ADAPTER: &'static str = "adapter.ckpt";
    pub const TRANSLATOR: &'static str = "translator.ckpt";
    pub const IMAGE_PROBE: &'static str = "probe_images.ckpt";
    pub const SEED_PROBE: &'static str = "probe_seeds.ckpt";
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| StsError::io(parent, e))?;
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, text).map_err(|e| StsError::io(path, e))
}

/// Hex SHA-256 of a file.
pub fn file_digest(path: &Path) -> Result<String> {
    Ok(hex_digest(&fs::read(path).map_err(|e| StsError::io(path, e))?))
}

fn eval_names(cfg: &ExperimentConfig) -> (String, String) {
    (format!("eval_a_s{}", cfg.run.seed), format!("eval_b_s{}", cfg.run.seed))
}

/// Generates the training sets and the evaluation split of `run.seed`.
pub fn gen_data(cfg: &ExperimentConfig) -> Result<()> {
    let ws = Workspace::new(cfg.workspace());
    let ds = make_two_domain_dataset(&cfg.dataset_spec()).stage("gen-data")?;
    let (ea, eb) = eval_names(cfg);
    write_array(ws.data("train_a"), &ds.train_a, "train_a")?;
    write_array(ws.data("train_b"), &ds.train_b, "train_b")?;
    write_array(ws.data(&ea), &ds.eval_a, "eval_a")?;
    write_array(ws.data(&eb), &ds.eval_b, "eval_b")
}

/// Training images of both domains.
pub fn load_train(ws: &Workspace) -> Result<(Tensor, Tensor)> {
    Ok((
        read_array_as(ws.data("train_a"), "train_a")?,
        read_array_as(ws.data("train_b"), "train_b")?,
    ))
}

/// The evaluation split of `run.seed`, generated on first use.
pub fn load_eval(cfg: &ExperimentConfig) -> Result<(Tensor, Tensor)> {
    let ws = Workspace::new(cfg.workspace());
    let (ea, eb) = eval_names(cfg);
    if !ws.data(&ea).with_extension("hdr").exists() || !ws.data(&eb).with_extension("hdr").exists() {
        let ds = make_two_domain_dataset(&cfg.dataset_spec())?;
        write_array(ws.data(&ea), &ds.eval_a, "eval_a")?;
        write_array(ws.data(&eb), &ds.eval_b, "eval_b")?;
    }
    Ok((read_array_as(ws.data(&ea), "eval_a")?, read_array_as(ws.data(&eb), "eval_b")?))
}

pub fn train_denoiser_stage(cfg: &ExperimentConfig) -> Result<()> {
    let ws = Workspace::new(cfg.workspace());
    let (a, b) = load_train(&ws).stage("train-denoiser")?;
    let schedule = cfg.schedule()?;
    let d = &cfg.denoiser;
    let model = Denoiser::new(cfg.denoiser_config())?;
    let data = DenoiserData::pooled(&a, &b)?;
    let mut state = TrainState::new(model, d.lr, d.seed);
    train_denoiser(&mut state, &data, &schedule, d.steps, d.batch_size).stage("train-denoiser")?;
    state.model.save(ws.model(Workspace::DENOISER))?;
    write_loss_csv(ws.model("denoiser_loss.csv"), &state.losses)
}

pub fn train_adapter_stage(cfg: &ExperimentConfig) -> Result<()> {
    let ws = Workspace::new(cfg.workspace());
    let (a, b) = load_train(&ws).stage("train-adapter")?;
    let schedule = cfg.schedule()?;
    let ad = &cfg.adapter;
    let mut model = Denoiser::load(ws.model(Workspace::DENOISER)).stage("train-adapter")?;
    model.attach_spatial_adapter(ad.seed)?;
    let mut data = DenoiserData::pooled(&a, &b)?;
    data.spatial = Some(spatial_maps(&data.x0)?);
    let mut state = TrainState::new(model, ad.lr, ad.seed);
    train_denoiser(&mut state, &data, &schedule, ad.steps, ad.batch_size).stage("train-adapter")?;
    state.model.save(ws.model(Workspace::ADAPTER))?;
    write_loss_csv(ws.model("adapter_loss.csv"), &state.losses)
}

/// Short identifier of the adapter checkpoint, recorded in seed
/// provenance.
pub fn predictor_id(ws: &Workspace) -> Result<String> {
    Ok(file_digest(&ws.model(Workspace::ADAPTER))?[..16].to_string())
}

/// Inverts both training sets into seed collections: `seeds_*` through the
/// edge-conditioned predictor for the translator, and `probe_seeds_*`
/// through the base denoiser alone for the seed probe.
pub fn invert_stage(cfg: &ExperimentConfig) -> Result<()> {
    let ws = Workspace::new(cfg.workspace());
    let (a, b) = load_train(&ws).stage("invert")?;
    let schedule = cfg.schedule()?;
    let plan = schedule.plan(cfg.schedule.sample_steps)?;
    let conditioned = Denoiser::load(ws.model(Workspace::ADAPTER)).stage("invert")?;
    let base = Denoiser::load(ws.model(Workspace::DENOISER)).stage("invert")?;
    let id = predictor_id(&ws)?;
    let base_id = file_digest(&ws.model(Workspace::DENOISER))?[..16].to_string();
    for (x, tok, suffix) in [(&a, DomainToken::Source, "a"), (&b, DomainToken::Target, "b")] {
        let edges = spatial_maps(x)?;
        let ds = build_seed_dataset(x, &conditioned, &id, &plan, tok, Some(&edges), &schedule).stage("invert")?;
        save_seed_dataset(&ws, &format!("seeds_{suffix}"), &ds)?;
        let ds = build_seed_dataset(x, &base, &base_id, &plan, tok, None, &schedule).stage("invert")?;
        save_seed_dataset(&ws, &format!("probe_seeds_{suffix}"), &ds)?;
    }
    Ok(())
}

/// Seeds are stored at `f32`; the recorded source digest refers to the
/// images as stored in the workspace.
fn save_seed_dataset(ws: &Workspace, name: &str, ds: &SeedDataset) -> Result<()> {
    write_array(ws.seeds(name), &ds.seeds, name)?;
    let json = serde_json::to_string_pretty(&ds.provenance).map_err(|e| StsError::invalid(e.to_string()))?;
    write_text(&ws.seeds(&format!("{name}.json")), &json)
}

pub fn load_seed_dataset(ws: &Workspace, name: &str) -> Result<SeedDataset> {
    let seeds = read_array_as(ws.seeds(name), name)?;
    let path = ws.seeds(&format!("{name}.json"));
    let text = fs::read_to_string(&path).map_err(|e| StsError::io(&path, e))?;
    let provenance: SeedProvenance = serde_json::from_str(&text).map_err(|e| StsError::Config(format!("{}: {e}", path.display())))?;
    Ok(SeedDataset { seeds, provenance })
}

pub fn train_sts_stage(cfg: &ExperimentConfig) -> Result<()> {
    let ws = Workspace::new(cfg.workspace());
    let a = load_seed_dataset(&ws, "seeds_a").stage("train-sts")?;
    let b = load_seed_dataset(&ws, "seeds_b").stage("train-sts")?;
    let current = predictor_id(&ws)?;
    if a.provenance.predictor_id != current {
        return Err(StsError::Provenance("seeds were inverted with a different adapter checkpoint".into()))
            .stage("train-sts");
    }
    let translator = SeedTranslator::new(cfg.translator_config())?;
    let out = train_sts_gan(translator, &a, &b, &cfg.gan_config()).stage("train-sts")?;
    out.translator.save(ws.model(Workspace::TRANSLATOR))?;
    out.write_loss_csv(ws.model("translator_loss.csv"))
}

/// Trains the image and seed probes and writes `probe.csv`.
pub fn probe_stage(cfg: &ExperimentConfig) -> Result<ProbeReport> {
    let ws = Workspace::new(cfg.workspace());
    let (a, b) = load_train(&ws).stage("probe")?;
    let sa = load_seed_dataset(&ws, "probe_seeds_a").stage("probe")?;
    let sb = load_seed_dataset(&ws, "probe_seeds_b").stage("probe")?;
    let (report, img, seed) =
        compare_seed_vs_image_probe("bright/dark", &a, &b, &sa, &sb, &cfg.probe_config(a.shape()[1])).stage("probe")?;
    img.classifier.save(ws.model(Workspace::IMAGE_PROBE))?;
    seed.classifier.save(ws.model(Workspace::SEED_PROBE))?;
    report.write_csv(ws.probe_csv())?;
    Ok(report)
}

/// Loads the models a translation needs.
pub fn load_models(cfg: &ExperimentConfig) -> Result<StsModels> {
    let ws = Workspace::new(cfg.workspace());
    let schedule = cfg.schedule()?;
    let plan = schedule.plan(cfg.schedule.sample_steps)?;
    let models = StsModels {
        denoiser: Denoiser::load(ws.model(Workspace::ADAPTER))?,
        translator: SeedTranslator::load(ws.model(Workspace::TRANSLATOR))?,
        schedule,
        plan,
        omega_fwd: cfg.eval.omega_fwd,
        codec: Box::new(IdentityCodec),
        chunk: cfg.eval.chunk,
    };
    models.check()?;
    Ok(models)
}

/// Run identifier: config name, evaluation seed and a digest of the
/// resolved config.
pub fn run_id(cfg: &ExperimentConfig) -> String {
    let digest = hex_digest(cfg.to_toml().as_bytes());
    format!("{}-s{}-{}", cfg.run.name, cfg.run.seed, &digest[..8])
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    pub rng_seeds: BTreeMap<String, u64>,
    pub checkpoints: BTreeMap<String, String>,
}

fn manifest(cfg: &ExperimentConfig, ws: &Workspace) -> Result<RunManifest> {
    let mut checkpoints = BTreeMap::new();
    for name in [Workspace::DENOISER, Workspace::ADAPTER, Workspace::TRANSLATOR, Workspace::IMAGE_PROBE] {
        let p = ws.model(name);
        if p.exists() {
            checkpoints.insert(name.to_string(), file_digest(&p)?);
        }
    }
    let rng_seeds = BTreeMap::from([
        ("run".to_string(), cfg.run.seed),
        ("data".to_string(), cfg.data.seed),
        ("denoiser".to_string(), cfg.denoiser.seed),
        ("adapter".to_string(), cfg.adapter.seed),
        ("translator".to_string(), cfg.translator.seed),
        ("probe".to_string(), cfg.probe.seed),
    ]);
    Ok(RunManifest {
        run_id: run_id(cfg),
        rng_seeds,
        checkpoints,
    })
}

fn feature_extractor(cfg: &ExperimentConfig, probe: &Classifier) -> Box<dyn FeatureExtractor> {
    match cfg.eval.features {
        FeatureSpace::Probe => Box::new(ProbeFeatures::new(probe.clone())),
        FeatureSpace::Pixel => Box::new(PixelFeatures),
    }
}

/// Result of an evaluation stage.
#[derive(Debug, Clone)]
pub struct TableRun {
    pub run_dir: PathBuf,
    pub csv: PathBuf,
    pub rows: Vec<MetricsRow>,
}

fn output_name(r: &RowOutput) -> String {
    format!("{}_w{}", r.name.replace('+', "_"), r.omega)
}

fn run_table(cfg: &ExperimentConfig, file: &str, stage: &'static str, sweep: bool) -> Result<TableRun> {
    let ws = Workspace::new(cfg.workspace());
    let (eval_a, eval_b) = load_eval(cfg).stage(stage)?;
    let models = load_models(cfg).stage(stage)?;
    let probe = Classifier::load(ws.model(Workspace::IMAGE_PROBE)).stage(stage)?;
    let features = feature_extractor(cfg, &probe);
    let evaluator = Evaluator::new(
        features.as_ref(),
        &probe,
        1,
        &eval_b,
        cfg.eval.kid_subset,
        cfg.eval.kid_subsets,
    )
    .stage(stage)?;
    let id = run_id(cfg);
    let (rows, outs) = if sweep {
        run_cfg_sweep(&id, &eval_a, &models, &evaluator, &cfg.eval.omegas, cfg.run.seed)
    } else {
        run_ablation(&id, &eval_a, &models, &evaluator, cfg.run.seed)
    }
    .stage(stage)?;
    let dir = ws.run_dir(&id);
    write_text(&dir.join("config.toml"), &cfg.to_toml())?;
    let m = serde_json::to_string_pretty(&manifest(cfg, &ws)?).map_err(|e| StsError::invalid(e.to_string()))?;
    write_text(&dir.join("manifest.json"), &m)?;
    write_array(dir.join("outputs").join("sources"), &eval_a, "sources")?;
    for o in &outs {
        write_array(dir.join("outputs").join(output_name(o)), &o.images, &o.name)?;
    }
    let csv = dir.join(file);
    write_text(&csv, &metrics_csv(&rows))?;
    Ok(TableRun { run_dir: dir, csv, rows })
}

/// Runs the four ablation rows and writes `ablation.csv`.
pub fn ablate_stage(cfg: &ExperimentConfig) -> Result<TableRun> {
    run_table(cfg, "ablation.csv", "ablate", false)
}

/// Runs the guidance sweep and writes `cfg_sweep.csv`.
pub fn cfg_sweep_stage(cfg: &ExperimentConfig) -> Result<TableRun> {
    run_table(cfg, "cfg_sweep.csv", "cfg-sweep", true)
}

/// Translates an array file and writes the output with its intermediates
/// into `out_dir`.
pub fn translate_stage(cfg: &ExperimentConfig, input: &Path, out_dir: &Path, dir: Direction) -> Result<Vec<PathBuf>> {
    let (images, _) = read_array(input).stage("translate")?;
    let images = if images.ndim() == 3 {
        images.insert_axis(ndarray::Axis(0))
    } else {
        images
    };
    let models = load_models(cfg).stage("translate")?;
    let t = sts_translate(&images, &models, dir)?;
    let mut written = Vec::new();
    for (name, arr) in [
        ("edges", &t.edges),
        ("z_source", &t.z_source),
        ("z_target", &t.z_target),
        ("output", &t.output),
    ] {
        let p = out_dir.join(name);
        write_array(&p, arr, name)?;
        written.push(p.with_extension("bin"));
    }
    Ok(written)
}
