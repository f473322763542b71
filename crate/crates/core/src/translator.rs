//! Cycle-consistent translation between collections of inverted seeds.
//!
//! Two residual encoder-decoder generators map seeds of one domain onto the
//! seeds of the other, trained against patch discriminators with a
//! least-squares adversarial loss plus cycle and identity L1 terms.

use std::path::Path;

use ndarray::Axis;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sts_nn::{par, Adam, Checkpoint, Conv2d, Graph, GroupNorm, ParamId, ParamStore, Tensor, Var};

use crate::ddim::{check_finite, invert_batched, Condition, DomainToken, LatentState, NoisePredictor};
use crate::error::{Result, StsError};
use crate::metrics::{median_heuristic_bandwidths, mmd_rbf, MMD_BANDWIDTH_MULTIPLIERS};
use crate::probe::tensor_digest;
use crate::schedule::{DiffusionSchedule, TimestepPlan};

pub const TRANSLATOR_KIND: &str = "sts-translator";

/// How a seed collection was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedProvenance {
    pub predictor_id: String,
    pub plan: Vec<usize>,
    pub token: DomainToken,
    pub omega: f64,
    pub spatial: bool,
    pub source_digest: String,
}

impl SeedProvenance {
    /// Two collections are compatible when the same predictor and plan
    /// produced them.
    pub fn compatible(&self, other: &Self) -> bool {
        self.predictor_id == other.predictor_id && self.plan == other.plan && self.spatial == other.spatial
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedDataset {
    /// `[N, C, H, W]` seeds at the last plan timestep.
    pub seeds: Tensor,
    pub provenance: SeedProvenance,
}

impl SeedDataset {
    pub fn len(&self) -> usize {
        self.seeds.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn timestep(&self) -> usize {
        self.provenance.plan.last().copied().unwrap_or(0)
    }

    pub fn digest(&self) -> String {
        tensor_digest(&self.seeds)
    }
}

/// Inverts every image with its own domain token at unit guidance.
///
/// `spatial` holds one `[1, H, W]` map per image and is forwarded to the
/// predictor when present.
pub fn build_seed_dataset<P: NoisePredictor + ?Sized>(
    images: &Tensor,
    predictor: &P,
    predictor_id: &str,
    plan: &TimestepPlan,
    token: DomainToken,
    spatial: Option<&Tensor>,
    schedule: &DiffusionSchedule,
) -> Result<SeedDataset> {
    if token == DomainToken::Null {
        return Err(StsError::invalid("seed datasets are inverted with a domain token, not null"));
    }
    if images.ndim() != 4 {
        return Err(StsError::invalid(format!("images must be [N, C, H, W], got {:?}", images.shape())));
    }
    let provenance = SeedProvenance {
        predictor_id: predictor_id.to_string(),
        plan: plan.steps().to_vec(),
        token,
        omega: 1.0,
        spatial: spatial.is_some(),
        source_digest: tensor_digest(images),
    };
    if images.shape()[0] == 0 {
        return Ok(SeedDataset {
            seeds: images.clone(),
            provenance,
        });
    }
    let cond = match spatial {
        Some(s) => Condition::with_spatial(token, s.clone()),
        None => Condition::token(token),
    };
    cond.validate(images.shape())?;
    let x0 = LatentState::new(images.clone(), 0)?;
    let seeds = invert_batched(&x0, predictor, plan, &cond, schedule, 16)?;
    Ok(SeedDataset {
        seeds: seeds.values,
        provenance,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CycleLossWeights {
    pub adv: f64,
    pub cyc: f64,
    pub id: f64,
}

impl Default for CycleLossWeights {
    fn default() -> Self {
        Self {
            adv: 1.0,
            cyc: 10.0,
            id: 5.0,
        }
    }
}

impl CycleLossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.adv, self.cyc, self.id].iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(StsError::invalid("loss weights must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranslatorConfig {
    pub channels: usize,
    pub filters: usize,
    pub res_blocks: usize,
    pub disc_filters: usize,
    pub init_seed: u64,
}

impl TranslatorConfig {
    pub fn new(channels: usize) -> Self {
        Self {
            channels,
            filters: 16,
            res_blocks: 3,
            disc_filters: 16,
            init_seed: 0,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.filters == 0 || self.disc_filters == 0 {
            return Err(StsError::invalid("translator sizes must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "a2b")]
    AtoB,
    #[serde(rename = "b2a")]
    BtoA,
}

impl std::str::FromStr for Direction {
    type Err = StsError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a2b" | "ab" => Ok(Self::AtoB),
            "b2a" | "ba" => Ok(Self::BtoA),
            _ => Err(StsError::invalid(format!("unknown direction {s:?}, expected a2b or b2a"))),
        }
    }
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::AtoB => "a2b",
            Self::BtoA => "b2a",
        }
    }

    pub fn source(self) -> DomainToken {
        match self {
            Self::AtoB => DomainToken::Source,
            Self::BtoA => DomainToken::Target,
        }
    }

    pub fn target(self) -> DomainToken {
        self.source().flip()
    }
}

/// Instance normalization as group norm with one channel per group.
fn inorm(store: &mut ParamStore, name: &str, ch: usize) -> GroupNorm {
    GroupNorm::new(store, name, ch, ch)
}

#[derive(Debug, Clone)]
struct ResBlock {
    c1: Conv2d,
    n1: GroupNorm,
    c2: Conv2d,
    n2: GroupNorm,
}

/// Residual encoder-decoder. The output layer carries no normalization and
/// is added to the input.
#[derive(Debug, Clone)]
pub struct Generator {
    conv_in: Conv2d,
    n_in: GroupNorm,
    down: Conv2d,
    n_down: GroupNorm,
    blocks: Vec<ResBlock>,
    up: Conv2d,
    n_up: GroupNorm,
    pub conv_out: Conv2d,
}

impl Generator {
    fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, c: usize, f: usize, blocks: usize) -> Self {
        let f2 = 2 * f;
        Self {
            conv_in: Conv2d::new(store, rng, &format!("{name}.conv_in"), c, f, 3, 1),
            n_in: inorm(store, &format!("{name}.n_in"), f),
            down: Conv2d::new(store, rng, &format!("{name}.down"), f, f2, 3, 2),
            n_down: inorm(store, &format!("{name}.n_down"), f2),
            blocks: (0..blocks)
                .map(|i| ResBlock {
                    c1: Conv2d::new(store, rng, &format!("{name}.res{i}.c1"), f2, f2, 3, 1),
                    n1: inorm(store, &format!("{name}.res{i}.n1"), f2),
                    c2: Conv2d::new(store, rng, &format!("{name}.res{i}.c2"), f2, f2, 3, 1),
                    n2: inorm(store, &format!("{name}.res{i}.n2"), f2),
                })
                .collect(),
            up: Conv2d::new(store, rng, &format!("{name}.up"), f2, f, 3, 1),
            n_up: inorm(store, &format!("{name}.n_up"), f),
            conv_out: Conv2d::new(store, rng, &format!("{name}.conv_out"), f, c, 3, 1),
        }
    }

    pub fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var) -> Var {
        let h = self.conv_in.forward(g, s, x);
        let h = self.n_in.forward(g, s, h);
        let h = g.relu(h);
        let h = self.down.forward(g, s, h);
        let h = self.n_down.forward(g, s, h);
        let mut h = g.relu(h);
        for b in &self.blocks {
            let r = b.c1.forward(g, s, h);
            let r = b.n1.forward(g, s, r);
            let r = g.relu(r);
            let r = b.c2.forward(g, s, r);
            let r = b.n2.forward(g, s, r);
            h = g.add(h, r);
        }
        let h = g.upsample2(h);
        let h = self.up.forward(g, s, h);
        let h = self.n_up.forward(g, s, h);
        let h = g.relu(h);
        let out = self.conv_out.forward(g, s, h);
        g.add(x, out)
    }
}

/// Patch discriminator producing a grid of real/fake scores.
#[derive(Debug, Clone)]
pub struct Discriminator {
    c1: Conv2d,
    c2: Conv2d,
    n2: GroupNorm,
    c3: Conv2d,
}

impl Discriminator {
    fn new(store: &mut ParamStore, rng: &mut impl Rng, name: &str, c: usize, f: usize) -> Self {
        Self {
            c1: Conv2d::new(store, rng, &format!("{name}.c1"), c, f, 3, 2),
            c2: Conv2d::new(store, rng, &format!("{name}.c2"), f, 2 * f, 3, 1),
            n2: inorm(store, &format!("{name}.n2"), 2 * f),
            c3: Conv2d::new(store, rng, &format!("{name}.c3"), 2 * f, 1, 3, 1),
        }
    }

    pub fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var) -> Var {
        let h = self.c1.forward(g, s, x);
        let h = g.leaky_relu(h, 0.2);
        let h = self.c2.forward(g, s, h);
        let h = self.n2.forward(g, s, h);
        let h = g.leaky_relu(h, 0.2);
        self.c3.forward(g, s, h)
    }
}

#[derive(Debug, Clone)]
pub struct SeedTranslator {
    config: TranslatorConfig,
    pub g_ab: Generator,
    pub g_ba: Generator,
    pub d_a: Discriminator,
    pub d_b: Discriminator,
    store: ParamStore,
    /// Provenance of the seeds the translator was trained on.
    pub trained_on: Option<SeedProvenance>,
}

impl SeedTranslator {
    pub fn new(config: TranslatorConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut store = ParamStore::new();
        let (c, f) = (config.channels, config.filters);
        let g_ab = Generator::new(&mut store, &mut rng, "g_ab", c, f, config.res_blocks);
        let g_ba = Generator::new(&mut store, &mut rng, "g_ba", c, f, config.res_blocks);
        let d_a = Discriminator::new(&mut store, &mut rng, "d_a", c, config.disc_filters);
        let d_b = Discriminator::new(&mut store, &mut rng, "d_b", c, config.disc_filters);
        Ok(Self {
            config,
            g_ab,
            g_ba,
            d_a,
            d_b,
            store,
            trained_on: None,
        })
    }

    pub fn config(&self) -> &TranslatorConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    fn generator(&self, dir: Direction) -> &Generator {
        match dir {
            Direction::AtoB => &self.g_ab,
            Direction::BtoA => &self.g_ba,
        }
    }

    /// Applies one generator to a `[N, C, H, W]` batch.
    pub fn translate(&self, x: &Tensor, dir: Direction) -> Result<Tensor> {
        if x.ndim() != 4 || x.shape()[1] != self.config.channels || x.shape()[2] % 2 != 0 || x.shape()[3] % 2 != 0 {
            return Err(StsError::ShapeMismatch {
                expected: vec![x.shape().first().copied().unwrap_or(0), self.config.channels],
                found: x.shape().to_vec(),
            });
        }
        let n = x.shape()[0];
        if n == 0 {
            return Ok(x.clone());
        }
        let bounds: Vec<(usize, usize)> = (0..n).step_by(32).map(|a| (a, (a + 32).min(n))).collect();
        let gen = self.generator(dir);
        let parts = par::map_slice(&bounds, |&(a, b)| {
            let mut g = Graph::new();
            let xi = g.input(x.slice_axis(Axis(0), (a..b).into()).to_owned());
            let y = gen.forward(&mut g, &self.store, xi);
            g.value(y).clone()
        });
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).map_err(|e| StsError::invalid(e.to_string()))?;
        check_finite(&out, "translated seeds")?;
        Ok(out)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(
            TRANSLATOR_KIND,
            serde_json::json!({ "config": self.config, "trained_on": self.trained_on }),
        );
        ck.push_store(&self.store, "");
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(TRANSLATOR_KIND)?;
        let config: TranslatorConfig = serde_json::from_value(ck.meta["config"].clone())
            .map_err(|e| StsError::Config(format!("translator config: {e}")))?;
        let trained_on: Option<SeedProvenance> = serde_json::from_value(ck.meta["trained_on"].clone())
            .map_err(|e| StsError::Config(format!("translator provenance: {e}")))?;
        let mut t = Self::new(config)?;
        ck.load_into(&mut t.store, "")?;
        t.trained_on = trained_on;
        Ok(t)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(self.to_checkpoint().save(path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    fn ids_with_prefix(&self, prefixes: &[&str]) -> Vec<ParamId> {
        self.store
            .iter()
            .filter(|(_, name, _)| prefixes.iter().any(|p| name.starts_with(p)))
            .map(|(id, _, _)| id)
            .collect()
    }

    pub fn generator_ids(&self) -> Vec<ParamId> {
        self.ids_with_prefix(&["g_ab.", "g_ba."])
    }

    pub fn discriminator_ids(&self) -> Vec<ParamId> {
        self.ids_with_prefix(&["d_a.", "d_b."])
    }
}

/// Translates a seed state. The timestep must be the one the translator was
/// trained at, when that is known.
pub fn translate_seed(translator: &SeedTranslator, z: &LatentState, dir: Direction) -> Result<LatentState> {
    if let Some(p) = &translator.trained_on {
        let t = p.plan.last().copied().unwrap_or(0);
        if z.timestep != t {
            return Err(StsError::invalid(format!(
                "seed timestep {} differs from the translator's {t}",
                z.timestep
            )));
        }
    }
    Ok(LatentState {
        values: translator.translate(&z.values, dir)?,
        timestep: z.timestep,
    })
}

/// Generator-side loss components.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct CycleLosses {
    /// Least-squares loss of `D_A` on `G_BA(b)` against the real label.
    pub adv_a: f64,
    /// Least-squares loss of `D_B` on `G_AB(a)` against the real label.
    pub adv_b: f64,
    pub cyc_a: f64,
    pub cyc_b: f64,
    pub id_a: f64,
    pub id_b: f64,
    pub total: f64,
}

struct GenGraph {
    total: Var,
    fake_a: Var,
    fake_b: Var,
    parts: [Var; 6],
}

fn generator_graph(g: &mut Graph, t: &SeedTranslator, s: &ParamStore, a: &Tensor, b: &Tensor, w: &CycleLossWeights) -> GenGraph {
    let a = g.input(a.clone());
    let b = g.input(b.clone());
    let fake_b = t.g_ab.forward(g, s, a);
    let fake_a = t.g_ba.forward(g, s, b);
    let rec_a = t.g_ba.forward(g, s, fake_b);
    let rec_b = t.g_ab.forward(g, s, fake_a);
    let id_a = t.g_ba.forward(g, s, a);
    let id_b = t.g_ab.forward(g, s, b);
    let da = t.d_a.forward(g, s, fake_a);
    let db = t.d_b.forward(g, s, fake_b);
    let adv_a = g.mse_to(da, 1.0);
    let adv_b = g.mse_to(db, 1.0);
    let cyc_a = g.l1(rec_a, a);
    let cyc_b = g.l1(rec_b, b);
    let id_a = g.l1(id_a, a);
    let id_b = g.l1(id_b, b);
    let adv = g.add(adv_a, adv_b);
    let adv = g.scale(adv, w.adv);
    let cyc = g.add(cyc_a, cyc_b);
    let cyc = g.scale(cyc, w.cyc);
    let idt = g.add(id_a, id_b);
    let idt = g.scale(idt, w.id);
    let total = g.add(adv, cyc);
    let total = g.add(total, idt);
    GenGraph {
        total,
        fake_a,
        fake_b,
        parts: [adv_a, adv_b, cyc_a, cyc_b, id_a, id_b],
    }
}

fn check_batches(t: &SeedTranslator, a: &Tensor, b: &Tensor) -> Result<()> {
    for (x, side) in [(a, "A"), (b, "B")] {
        if x.ndim() != 4 || x.shape()[0] == 0 || x.shape()[1] != t.config.channels {
            return Err(StsError::invalid(format!(
                "batch {side} must be a non-empty [N, {}, H, W] array, got {:?}",
                t.config.channels,
                x.shape()
            )));
        }
    }
    Ok(())
}

/// Evaluates the weighted generator objective on one pair of batches.
pub fn cycle_losses(a: &Tensor, b: &Tensor, translator: &SeedTranslator, weights: &CycleLossWeights) -> Result<CycleLosses> {
    check_batches(translator, a, b)?;
    weights.validate()?;
    let mut g = Graph::new();
    let gg = generator_graph(&mut g, translator, &translator.store, a, b, weights);
    let v = gg.parts.map(|p| g.scalar(p));
    let out = CycleLosses {
        adv_a: v[0],
        adv_b: v[1],
        cyc_a: v[2],
        cyc_b: v[3],
        id_a: v[4],
        id_b: v[5],
        total: g.scalar(gg.total),
    };
    if !out.total.is_finite() {
        return Err(StsError::NonFinite("cycle loss".into()));
    }
    Ok(out)
}

/// Gradient of the weighted generator objective with respect to all
/// parameters that receive one.
pub fn cycle_loss_grads(
    a: &Tensor,
    b: &Tensor,
    translator: &SeedTranslator,
    store: &ParamStore,
    weights: &CycleLossWeights,
) -> (f64, Vec<(ParamId, Tensor)>) {
    let mut g = Graph::new();
    let gg = generator_graph(&mut g, translator, store, a, b, weights);
    (g.scalar(gg.total), g.backward(gg.total).params())
}

fn discriminator_loss(g: &mut Graph, d: &Discriminator, s: &ParamStore, real: &Tensor, fake: &Tensor) -> Var {
    let r = g.input(real.clone());
    let f = g.input(fake.clone());
    let dr = d.forward(g, s, r);
    let df = d.forward(g, s, f);
    let lr = g.mse_to(dr, 1.0);
    let lf = g.mse_to(df, 0.0);
    let l = g.add(lr, lf);
    g.scale(l, 0.5)
}

/// History of generated samples shown to the discriminators.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Tensor>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            items: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Returns the batch to feed the discriminator, swapping stored samples
    /// in with probability one half once the buffer is full.
    pub fn query(&mut self, fakes: &Tensor, rng: &mut impl Rng) -> Tensor {
        if self.capacity == 0 {
            return fakes.clone();
        }
        let mut out = fakes.clone();
        for i in 0..fakes.shape()[0] {
            let item = fakes.index_axis(Axis(0), i).to_owned();
            if self.items.len() < self.capacity {
                self.items.push(item);
            } else if rng.random_bool(0.5) {
                let k = rng.random_range(0..self.capacity);
                let old = std::mem::replace(&mut self.items[k], item);
                out.index_axis_mut(Axis(0), i).assign(&old);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GanTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub weights: CycleLossWeights,
    pub buffer_size: usize,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for GanTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 16,
            lr: 2e-4,
            beta1: 0.5,
            weights: CycleLossWeights::default(),
            buffer_size: 50,
            val_fraction: 0.1,
            seed: 0,
        }
    }
}

/// One optimization step of the translator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GanStepLog {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss_g: f64,
    pub loss_d: f64,
    pub cyc: f64,
    pub idt: f64,
}

#[derive(Debug, Clone)]
pub struct GanOutcome {
    pub translator: SeedTranslator,
    pub best_epoch: usize,
    pub best_score: f64,
    /// Validation score per epoch: MMD to held-out target seeds plus cycle
    /// error.
    pub val_scores: Vec<f64>,
    pub log: Vec<GanStepLog>,
}

impl GanOutcome {
    pub fn write_loss_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut s = String::from("step,epoch,lr,loss_g,loss_d,cyc,idt\n");
        for r in &self.log {
            s.push_str(&format!(
                "{},{},{:.6e},{:.6},{:.6},{:.6},{:.6}\n",
                r.step, r.epoch, r.lr, r.loss_g, r.loss_d, r.cyc, r.idt
            ));
        }
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| StsError::io(parent, e))?;
        }
        std::fs::write(path, s).map_err(|e| StsError::io(path, e))
    }
}

fn flatten(t: &Tensor) -> ndarray::Array2<f64> {
    let n = t.shape()[0];
    t.as_standard_layout()
        .into_owned()
        .into_shape_with_order((n, t.len() / n.max(1)))
        .expect("contiguous")
}

fn mean_abs(t: &Tensor) -> f64 {
    t.iter().map(|v| v.abs()).sum::<f64>() / t.len().max(1) as f64
}

/// Held-out score: MMD from translated A seeds to real B seeds plus the
/// mean relative cycle error of both directions.
pub fn validation_score(t: &SeedTranslator, val_a: &Tensor, val_b: &Tensor) -> Result<f64> {
    let fake_b = t.translate(val_a, Direction::AtoB)?;
    let rec_a = t.translate(&fake_b, Direction::BtoA)?;
    let fake_a = t.translate(val_b, Direction::BtoA)?;
    let rec_b = t.translate(&fake_a, Direction::AtoB)?;
    let fb = flatten(&fake_b);
    let vb = flatten(val_b);
    let bw = median_heuristic_bandwidths(vb.view(), &MMD_BANDWIDTH_MULTIPLIERS)?;
    let mmd = mmd_rbf(fb.view(), vb.view(), &bw)?;
    let cyc_a = mean_abs(&(&rec_a - val_a)) / mean_abs(val_a).max(1e-12);
    let cyc_b = mean_abs(&(&rec_b - val_b)) / mean_abs(val_b).max(1e-12);
    Ok(mmd + 0.5 * (cyc_a + cyc_b))
}

fn holdout(n: usize, frac: f64, rng: &mut impl Rng) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let k = ((n as f64 * frac).round() as usize).clamp(2, n - 2);
    let val = idx[..k].to_vec();
    let train = idx[k..].to_vec();
    (train, val)
}

/// Trains the translator on two seed collections and returns the
/// checkpoint with the best validation score.
pub fn train_sts_gan(
    mut translator: SeedTranslator,
    seeds_a: &SeedDataset,
    seeds_b: &SeedDataset,
    config: &GanTrainConfig,
) -> Result<GanOutcome> {
    config.weights.validate()?;
    if seeds_a.len() < 4 || seeds_b.len() < 4 {
        return Err(StsError::invalid("each seed collection needs at least four seeds"));
    }
    if !seeds_a.provenance.compatible(&seeds_b.provenance) {
        return Err(StsError::Provenance(
            "seed collections come from different predictors or plans".into(),
        ));
    }
    if config.batch_size == 0 || config.epochs == 0 {
        return Err(StsError::invalid("epochs and batch_size must be positive"));
    }
    if !(0.0..1.0).contains(&config.val_fraction) || config.val_fraction == 0.0 {
        return Err(StsError::invalid("val_fraction must lie in (0, 1)"));
    }
    check_batches(&translator, &seeds_a.seeds, &seeds_b.seeds)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (tr_a, va_a) = holdout(seeds_a.len(), config.val_fraction, &mut rng);
    let (tr_b, va_b) = holdout(seeds_b.len(), config.val_fraction, &mut rng);
    let val_a = seeds_a.seeds.select(Axis(0), &va_a);
    let val_b = seeds_b.seeds.select(Axis(0), &va_b);

    let g_ids = translator.generator_ids();
    let d_ids = translator.discriminator_ids();
    let keep = |grads: Vec<(ParamId, Tensor)>, ids: &[ParamId]| -> Vec<(ParamId, Tensor)> {
        grads.into_iter().filter(|(id, _)| ids.contains(id)).collect()
    };
    let mut opt_g = Adam::with_betas(config.lr, config.beta1, 0.999);
    let mut opt_d = Adam::with_betas(config.lr, config.beta1, 0.999);
    let mut pool_a = ReplayBuffer::new(config.buffer_size);
    let mut pool_b = ReplayBuffer::new(config.buffer_size);

    translator.trained_on = Some(seeds_a.provenance.clone());
    let mut best = (validation_score(&translator, &val_a, &val_b)?, 0usize, translator.store.clone());
    let mut val_scores = Vec::new();
    let mut log = Vec::new();
    let mut over_limit = 0usize;
    let mut step = 0u64;
    let half = config.epochs / 2;
    let steps_per_epoch = tr_a.len().max(tr_b.len()).div_ceil(config.batch_size);

    for epoch in 0..config.epochs {
        let lr = if epoch < half {
            config.lr
        } else {
            config.lr * (config.epochs - epoch) as f64 / (config.epochs - half) as f64
        };
        opt_g.lr = lr;
        opt_d.lr = lr;
        let mut oa = tr_a.clone();
        let mut ob = tr_b.clone();
        oa.shuffle(&mut rng);
        ob.shuffle(&mut rng);
        for k in 0..steps_per_epoch {
            let pick = |order: &[usize]| -> Vec<usize> {
                (0..config.batch_size)
                    .map(|j| order[(k * config.batch_size + j) % order.len()])
                    .collect()
            };
            let a = seeds_a.seeds.select(Axis(0), &pick(&oa));
            let b = seeds_b.seeds.select(Axis(0), &pick(&ob));

            let mut g = Graph::new();
            let gg = generator_graph(&mut g, &translator, &translator.store, &a, &b, &config.weights);
            let loss_g = g.scalar(gg.total);
            let cyc = g.scalar(gg.parts[2]) + g.scalar(gg.parts[3]);
            let idt = g.scalar(gg.parts[4]) + g.scalar(gg.parts[5]);
            if !loss_g.is_finite() {
                return Err(StsError::NonFinite(format!("generator loss at step {step}")));
            }
            let fake_a = g.value(gg.fake_a).clone();
            let fake_b = g.value(gg.fake_b).clone();
            let grads = keep(g.backward(gg.total).params(), &g_ids);
            drop(g);
            opt_g.step(&mut translator.store, &grads);

            let fa = pool_a.query(&fake_a, &mut rng);
            let fb = pool_b.query(&fake_b, &mut rng);
            let mut g = Graph::new();
            let la = discriminator_loss(&mut g, &translator.d_a, &translator.store, &a, &fa);
            let lb = discriminator_loss(&mut g, &translator.d_b, &translator.store, &b, &fb);
            let ld = g.add(la, lb);
            let loss_d = g.scalar(ld);
            if !loss_d.is_finite() {
                return Err(StsError::NonFinite(format!("discriminator loss at step {step}")));
            }
            let grads = keep(g.backward(ld).params(), &d_ids);
            opt_d.step(&mut translator.store, &grads);

            step += 1;
            if loss_g > 1e4 || loss_d > 1e4 {
                over_limit += 1;
                if over_limit >= 100 {
                    return Err(StsError::Diverged(format!("loss above 1e4 for 100 steps ending at step {step}")));
                }
            } else {
                over_limit = 0;
            }
            log.push(GanStepLog {
                step,
                epoch,
                lr,
                loss_g,
                loss_d,
                cyc,
                idt,
            });
        }
        let score = validation_score(&translator, &val_a, &val_b)?;
        val_scores.push(score);
        if score < best.0 {
            best = (score, epoch + 1, translator.store.clone());
        }
    }
    translator.store = best.2;
    Ok(GanOutcome {
        translator,
        best_epoch: best.1,
        best_score: best.0,
        val_scores,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ddim::ZeroPredictor;
    use ndarray::IxDyn;
    use rand_distr::StandardNormal;

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_shape_fn(IxDyn(shape), |_| rng.sample::<f64, _>(StandardNormal))
    }

    fn tiny() -> TranslatorConfig {
        TranslatorConfig {
            channels: 2,
            filters: 4,
            res_blocks: 1,
            disc_filters: 4,
            init_seed: 3,
        }
    }

    fn set_shift(t: &mut SeedTranslator, dir: Direction, c: f64) {
        let conv = t.generator(dir).conv_out.clone();
        t.store_mut().get_mut(conv.weight).fill(0.0);
        t.store_mut().get_mut(conv.bias.unwrap()).fill(c);
    }

    #[test]
    fn output_shape_matches_input() {
        let t = SeedTranslator::new(tiny()).unwrap();
        let x = randn(&[3, 2, 8, 8], 1);
        let y = t.translate(&x, Direction::AtoB).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert_eq!(y, t.translate(&x, Direction::AtoB).unwrap());
        assert!(t.translate(&randn(&[1, 3, 8, 8], 1), Direction::AtoB).is_err());
    }

    #[test]
    fn identity_generators_have_zero_cycle_and_identity_loss() {
        let mut t = SeedTranslator::new(tiny()).unwrap();
        set_shift(&mut t, Direction::AtoB, 0.0);
        set_shift(&mut t, Direction::BtoA, 0.0);
        let l = cycle_losses(&randn(&[4, 2, 8, 8], 2), &randn(&[4, 2, 8, 8], 3), &t, &CycleLossWeights::default()).unwrap();
        assert_eq!((l.cyc_a, l.cyc_b, l.id_a, l.id_b), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn opposite_shifts_cancel_in_the_cycle() {
        let mut t = SeedTranslator::new(tiny()).unwrap();
        set_shift(&mut t, Direction::AtoB, 0.25);
        set_shift(&mut t, Direction::BtoA, -0.25);
        let l = cycle_losses(&randn(&[4, 2, 8, 8], 4), &randn(&[4, 2, 8, 8], 5), &t, &CycleLossWeights::default()).unwrap();
        assert!(l.cyc_a < 1e-15 && l.cyc_b < 1e-15);
        assert!((l.id_a - 0.25).abs() < 1e-12 && (l.id_b - 0.25).abs() < 1e-12);
    }

    #[test]
    fn random_init_losses_are_positive() {
        let t = SeedTranslator::new(tiny()).unwrap();
        let l = cycle_losses(&randn(&[4, 2, 8, 8], 6), &randn(&[4, 2, 8, 8], 7), &t, &CycleLossWeights::default()).unwrap();
        for v in [l.adv_a, l.adv_b, l.cyc_a, l.cyc_b, l.id_a, l.id_b] {
            assert!(v.is_finite() && v > 0.0);
        }
    }

    #[test]
    fn replay_buffer_fills_then_mixes() {
        let mut buf = ReplayBuffer::new(4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = randn(&[4, 1, 2, 2], 8);
        assert_eq!(buf.query(&x, &mut rng), x);
        assert_eq!(buf.len(), 4);
        let y = randn(&[64, 1, 2, 2], 9);
        let out = buf.query(&y, &mut rng);
        assert_ne!(out, y);
        assert_eq!(buf.len(), 4);
    }

    #[test]
    fn null_token_is_rejected_and_empty_set_is_empty() {
        let s = DiffusionSchedule::linear(100, 1e-4, 0.02).unwrap();
        let plan = s.plan(5).unwrap();
        let x = randn(&[0, 2, 4, 4], 0);
        assert!(build_seed_dataset(&x, &ZeroPredictor, "z", &plan, DomainToken::Null, None, &s).is_err());
        let d = build_seed_dataset(&x, &ZeroPredictor, "z", &plan, DomainToken::Source, None, &s).unwrap();
        assert!(d.is_empty());
    }

    #[test]
    fn training_leaves_seeds_untouched_and_round_trips() {
        let s = DiffusionSchedule::linear(100, 1e-4, 0.02).unwrap();
        let plan = s.plan(5).unwrap();
        let a = build_seed_dataset(&randn(&[12, 2, 4, 4], 10), &ZeroPredictor, "z", &plan, DomainToken::Source, None, &s).unwrap();
        let b = build_seed_dataset(&randn(&[12, 2, 4, 4], 11), &ZeroPredictor, "z", &plan, DomainToken::Target, None, &s).unwrap();
        let (ha, hb) = (a.digest(), b.digest());
        let cfg = GanTrainConfig {
            epochs: 2,
            batch_size: 4,
            ..Default::default()
        };
        let out = train_sts_gan(SeedTranslator::new(tiny()).unwrap(), &a, &b, &cfg).unwrap();
        assert_eq!((a.digest(), b.digest()), (ha, hb));
        assert_eq!(out.val_scores.len(), 2);
        assert!(!out.log.is_empty());

        let t = &out.translator;
        let back = SeedTranslator::from_checkpoint(&Checkpoint::from_bytes(&t.to_checkpoint().to_bytes()).unwrap()).unwrap();
        let z = LatentState::new(a.seeds.clone(), plan.last()).unwrap();
        assert_eq!(
            translate_seed(t, &z, Direction::AtoB).unwrap(),
            translate_seed(&back, &z, Direction::AtoB).unwrap()
        );
        let wrong = LatentState::new(a.seeds.clone(), 0).unwrap();
        assert!(translate_seed(t, &wrong, Direction::AtoB).is_err());
    }

    #[test]
    fn mismatched_provenance_is_rejected() {
        let s = DiffusionSchedule::linear(100, 1e-4, 0.02).unwrap();
        let a = build_seed_dataset(&randn(&[4, 2, 4, 4], 12), &ZeroPredictor, "one", &s.plan(5).unwrap(), DomainToken::Source, None, &s).unwrap();
        let b = build_seed_dataset(&randn(&[4, 2, 4, 4], 13), &ZeroPredictor, "two", &s.plan(5).unwrap(), DomainToken::Target, None, &s).unwrap();
        let r = train_sts_gan(SeedTranslator::new(tiny()).unwrap(), &a, &b, &GanTrainConfig::default());
        assert!(matches!(r, Err(StsError::Provenance(_))));
    }
}
