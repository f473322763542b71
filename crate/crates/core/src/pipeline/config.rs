//! Experiment configuration: a sectioned TOML file with `section.key=value`
//! overrides layered on top.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::denoiser::DenoiserConfig;
use crate::error::{Result, StsError};
use crate::oracle::TwoDomainDatasetSpec;
use crate::probe::ProbeConfig;
use crate::schedule::DiffusionSchedule;
use crate::translator::{CycleLossWeights, GanTrainConfig, TranslatorConfig};

pub const WORKSPACE_ENV: &str = "STS_WORKSPACE";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub name: String,
    /// Seed for evaluation randomness: the evaluation split and the random
    /// seeds of rows without inversion.
    pub seed: u64,
    pub workspace: Option<PathBuf>,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            name: "toy".into(),
            seed: 0,
            workspace: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub image_size: usize,
    pub num_train: usize,
    pub num_eval: usize,
    pub max_blocks: usize,
    pub max_lamps: usize,
    pub seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            image_size: 8,
            num_train: 1024,
            num_eval: 256,
            max_blocks: 2,
            max_lamps: 2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleSection {
    pub train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub sample_steps: usize,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        Self {
            train_steps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
            sample_steps: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserSection {
    pub base_channels: usize,
    pub depth: usize,
    pub time_dim: usize,
    pub token_drop: f64,
    pub token_fidelity: f64,
    pub lr: f64,
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for DenoiserSection {
    fn default() -> Self {
        Self {
            base_channels: 16,
            depth: 2,
            time_dim: 32,
            token_drop: 0.1,
            token_fidelity: 0.55,
            lr: 1e-3,
            steps: 3000,
            batch_size: 32,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterSection {
    pub lr: f64,
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for AdapterSection {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            steps: 1500,
            batch_size: 32,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TranslatorSection {
    pub filters: usize,
    pub res_blocks: usize,
    pub disc_filters: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub lambda_adv: f64,
    pub lambda_cyc: f64,
    pub lambda_id: f64,
    pub buffer_size: usize,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for TranslatorSection {
    fn default() -> Self {
        let w = CycleLossWeights::default();
        let g = GanTrainConfig::default();
        Self {
            filters: 16,
            res_blocks: 3,
            disc_filters: 16,
            epochs: g.epochs,
            batch_size: g.batch_size,
            lr: g.lr,
            beta1: g.beta1,
            lambda_adv: w.adv,
            lambda_cyc: w.cyc,
            lambda_id: w.id,
            buffer_size: g.buffer_size,
            val_fraction: g.val_fraction,
            seed: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeSection {
    pub width: usize,
    pub blocks: usize,
    pub max_epochs: usize,
    /// Early-stopping patience in epochs; 0 trains for all `max_epochs`.
    pub patience: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for ProbeSection {
    fn default() -> Self {
        let p = ProbeConfig::default();
        Self {
            width: p.width,
            blocks: p.blocks,
            max_epochs: p.max_epochs,
            patience: p.patience.unwrap_or(0),
            lr: p.lr,
            batch_size: p.batch_size,
            val_fraction: p.val_fraction,
            seed: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureSpace {
    /// Pooled trunk activations of the frozen image probe.
    Probe,
    /// Raw flattened pixels.
    Pixel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub omega_fwd: f64,
    pub omegas: Vec<f64>,
    pub features: FeatureSpace,
    pub kid_subset: usize,
    pub kid_subsets: usize,
    pub codec: String,
    pub chunk: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            omega_fwd: 5.0,
            omegas: vec![1.0, 3.0, 5.0],
            features: FeatureSpace::Probe,
            kid_subset: 100,
            kid_subsets: 50,
            codec: "identity".into(),
            chunk: 32,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run: RunSection,
    pub data: DataSection,
    pub schedule: ScheduleSection,
    pub denoiser: DenoiserSection,
    pub adapter: AdapterSection,
    pub translator: TranslatorSection,
    pub probe: ProbeSection,
    pub eval: EvalSection,
}

fn parse_value(raw: &str) -> Value {
    match toml::from_str::<Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.into())),
        Err(_) => Value::String(raw.into()),
    }
}

/// Applies `section.key=value` assignments to a parsed table.
pub fn apply_overrides(table: &mut Table, overrides: &[String]) -> Result<()> {
    for ov in overrides {
        let (key, raw) = ov
            .split_once('=')
            .ok_or_else(|| StsError::Config(format!("override {ov:?} is not key=value")))?;
        let parts: Vec<&str> = key.trim().split('.').collect();
        if parts.len() != 2 || parts.iter().any(|p| p.is_empty()) {
            return Err(StsError::Config(format!("override key {key:?} must be section.key")));
        }
        let section = table
            .entry(parts[0].to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        let Value::Table(section) = section else {
            return Err(StsError::Config(format!("{} is not a section", parts[0])));
        };
        section.insert(parts[1].to_string(), parse_value(raw.trim()));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: Table = toml::from_str(text).map_err(|e| StsError::Config(e.message().to_string()))?;
        apply_overrides(&mut table, overrides)?;
        let cfg: Self = Table::try_into(table).map_err(|e| StsError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file, or the defaults when `path` is `None`.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| StsError::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Workspace root: an explicit `run.workspace` wins, then
    /// `STS_WORKSPACE`, then `./sts-workspace`.
    pub fn workspace(&self) -> PathBuf {
        if let Some(w) = &self.run.workspace {
            return w.clone();
        }
        match std::env::var_os(WORKSPACE_ENV) {
            Some(w) if !w.is_empty() => PathBuf::from(w),
            _ => PathBuf::from("sts-workspace"),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule()?;
        self.denoiser_config().validate()?;
        self.weights().validate()?;
        if self.schedule.sample_steps == 0 || self.schedule.sample_steps > self.schedule.train_steps {
            return Err(StsError::Config("schedule.sample_steps must lie in 1..=train_steps".into()));
        }
        if self.eval.omegas.is_empty() {
            return Err(StsError::Config("eval.omegas must not be empty".into()));
        }
        if self.eval.codec != "identity" {
            return Err(StsError::Config(format!("unknown codec {:?}", self.eval.codec)));
        }
        if self.eval.chunk == 0 {
            return Err(StsError::Config("eval.chunk must be positive".into()));
        }
        Ok(())
    }

    pub fn dataset_spec(&self) -> TwoDomainDatasetSpec {
        TwoDomainDatasetSpec {
            image_size: self.data.image_size,
            num_samples: self.data.num_train,
            num_eval: self.data.num_eval,
            max_blocks: self.data.max_blocks,
            max_lamps: self.data.max_lamps,
            rng_seed: self.data.seed,
            eval_offset: self.run.seed * self.data.num_eval as u64,
            ..Default::default()
        }
    }

    pub fn schedule(&self) -> Result<DiffusionSchedule> {
        let s = &self.schedule;
        DiffusionSchedule::linear(s.train_steps, s.beta_start, s.beta_end)
    }

    pub fn denoiser_config(&self) -> DenoiserConfig {
        let d = &self.denoiser;
        let mut c = DenoiserConfig::unet(3, self.data.image_size, d.base_channels, d.depth);
        c.time_dim = d.time_dim;
        c.token_drop = d.token_drop;
        c.token_fidelity = d.token_fidelity;
        c.init_seed = d.seed;
        c
    }

    pub fn weights(&self) -> CycleLossWeights {
        CycleLossWeights {
            adv: self.translator.lambda_adv,
            cyc: self.translator.lambda_cyc,
            id: self.translator.lambda_id,
        }
    }

    pub fn translator_config(&self) -> TranslatorConfig {
        let t = &self.translator;
        TranslatorConfig {
            channels: 3,
            filters: t.filters,
            res_blocks: t.res_blocks,
            disc_filters: t.disc_filters,
            init_seed: t.seed,
        }
    }

    pub fn gan_config(&self) -> GanTrainConfig {
        let t = &self.translator;
        GanTrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            beta1: t.beta1,
            weights: self.weights(),
            buffer_size: t.buffer_size,
            val_fraction: t.val_fraction,
            seed: t.seed,
        }
    }

    pub fn probe_config(&self, in_channels: usize) -> ProbeConfig {
        let p = &self.probe;
        ProbeConfig {
            in_channels,
            width: p.width,
            blocks: p.blocks,
            classes: 2,
            val_fraction: p.val_fraction,
            max_epochs: p.max_epochs,
            patience: (p.patience > 0).then_some(p.patience),
            batch_size: p.batch_size,
            lr: p.lr,
            seed: p.seed,
        }
    }
}
