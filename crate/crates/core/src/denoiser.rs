//! Trainable ε-prediction networks and their training loop.
//!
//! Two architectures share one interface: a small U-shaped convolutional
//! network for images and an MLP for flat vectors. Both condition on a
//! sinusoidal timestep embedding plus a learned domain-token embedding. The
//! image network can carry a [`SpatialAdapter`]: a trainable copy of the
//! encoder that reads `[x_t, edge map]` and feeds each encoder level through
//! a zero-initialized 1x1 projection.

use std::path::Path;

use ndarray::Axis;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sts_nn::layers::{one_hot, timestep_embedding};
use sts_nn::{Adam, Checkpoint, Conv2d, Graph, GroupNorm, Linear, ParamStore, Tensor, Var};

use crate::ddim::{check_finite, Condition, DomainToken, NoisePredictor};
use crate::error::{ensure_shape, Result, StsError};
use crate::schedule::DiffusionSchedule;

pub const DENOISER_KIND: &str = "sts-denoiser";
pub const DENOISER_TRAIN_KIND: &str = "sts-denoiser-train";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Architecture {
    /// Image network over `[N, C, H, W]`.
    Unet {
        channels: usize,
        image_size: usize,
        base_channels: usize,
        /// Number of resolution levels; the image side must be divisible
        /// by `2^(depth - 1)`.
        depth: usize,
        groups: usize,
    },
    /// Vector network over `[N, D]`.
    Mlp { dim: usize, hidden: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub arch: Architecture,
    pub time_dim: usize,
    /// Probability that a training example's token is replaced by `Null`.
    pub token_drop: f64,
    /// Probability that a kept token names the example's own domain rather
    /// than the other one. Below 1 the token becomes a weak hint, like a
    /// prompt that only loosely describes the image.
    #[serde(default = "full_fidelity")]
    pub token_fidelity: f64,
    pub init_seed: u64,
}

fn full_fidelity() -> f64 {
    1.0
}

impl DenoiserConfig {
    pub fn unet(channels: usize, image_size: usize, base_channels: usize, depth: usize) -> Self {
        Self {
            arch: Architecture::Unet {
                channels,
                image_size,
                base_channels,
                depth,
                groups: 4,
            },
            time_dim: 32,
            token_drop: 0.1,
            token_fidelity: 1.0,
            init_seed: 0,
        }
    }

    pub fn mlp(dim: usize, hidden: usize) -> Self {
        Self {
            arch: Architecture::Mlp { dim, hidden },
            time_dim: 16,
            token_drop: 0.1,
            token_fidelity: 1.0,
            init_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.token_drop) {
            return Err(StsError::invalid("token_drop must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.token_fidelity) {
            return Err(StsError::invalid("token_fidelity must lie in [0, 1]"));
        }
        if self.time_dim < 2 || self.time_dim % 2 != 0 {
            return Err(StsError::invalid("time_dim must be even and at least 2"));
        }
        match self.arch {
            Architecture::Unet {
                channels,
                image_size,
                base_channels,
                depth,
                groups,
            } => {
                if channels == 0 || depth == 0 || base_channels == 0 {
                    return Err(StsError::invalid("unet sizes must be positive"));
                }
                if image_size % (1 << (depth - 1)) != 0 {
                    return Err(StsError::invalid(format!(
                        "image_size {image_size} not divisible by 2^{}",
                        depth - 1
                    )));
                }
                if groups == 0 || base_channels % groups != 0 {
                    return Err(StsError::invalid("base_channels must be divisible by groups"));
                }
            }
            Architecture::Mlp { dim, hidden } => {
                if dim == 0 || hidden == 0 {
                    return Err(StsError::invalid("mlp sizes must be positive"));
                }
            }
        }
        Ok(())
    }

    /// Shape of one state, without the batch axis.
    pub fn state_shape(&self) -> Vec<usize> {
        match self.arch {
            Architecture::Unet {
                channels, image_size, ..
            } => vec![channels, image_size, image_size],
            Architecture::Mlp { dim, .. } => vec![dim],
        }
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    n1: GroupNorm,
    c1: Conv2d,
    emb: Linear,
    n2: GroupNorm,
    c2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        cin: usize,
        cout: usize,
        emb_dim: usize,
        groups: usize,
    ) -> Self {
        let g_in = groups.min(cin);
        let g_in = if cin % g_in == 0 { g_in } else { 1 };
        Self {
            n1: GroupNorm::new(store, &format!("{name}.n1"), cin, g_in),
            c1: Conv2d::new(store, rng, &format!("{name}.c1"), cin, cout, 3, 1),
            emb: Linear::new(store, rng, &format!("{name}.emb"), emb_dim, cout),
            n2: GroupNorm::new(store, &format!("{name}.n2"), cout, groups),
            c2: Conv2d::new(store, rng, &format!("{name}.c2"), cout, cout, 3, 1),
            skip: (cin != cout).then(|| Conv2d::new(store, rng, &format!("{name}.skip"), cin, cout, 1, 1)),
        }
    }

    fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var, emb: Var) -> Var {
        let h = self.n1.forward(g, s, x);
        let h = g.silu(h);
        let h = self.c1.forward(g, s, h);
        let e = self.emb.forward(g, s, emb);
        let h = g.add_channel(h, e);
        let h = self.n2.forward(g, s, h);
        let h = g.silu(h);
        let h = self.c2.forward(g, s, h);
        let sk = match &self.skip {
            Some(c) => c.forward(g, s, x),
            None => x,
        };
        g.add(h, sk)
    }
}

#[derive(Debug, Clone)]
struct Embedding {
    t1: Linear,
    t2: Linear,
    tok: Linear,
    time_dim: usize,
}

impl Embedding {
    fn new(store: &mut ParamStore, rng: &mut impl Rng, prefix: &str, time_dim: usize, out: usize) -> Self {
        Self {
            t1: Linear::new(store, rng, &format!("{prefix}.t1"), time_dim, out),
            t2: Linear::new(store, rng, &format!("{prefix}.t2"), out, out),
            tok: Linear::no_bias(store, rng, &format!("{prefix}.tok"), DomainToken::COUNT, out),
            time_dim,
        }
    }

    /// SiLU-activated embedding `[N, E]`.
    fn forward(&self, g: &mut Graph, s: &ParamStore, t: &[usize], tokens: &[DomainToken]) -> Var {
        let te = g.input(timestep_embedding(t, self.time_dim, 10_000.0).into_dyn());
        let h = self.t1.forward(g, s, te);
        let h = g.silu(h);
        let h = self.t2.forward(g, s, h);
        let idx: Vec<usize> = tokens.iter().map(|t| t.index()).collect();
        let oh = g.input(one_hot(&idx, DomainToken::COUNT).into_dyn());
        let k = self.tok.forward(g, s, oh);
        let e = g.add(h, k);
        g.silu(e)
    }
}

#[derive(Debug, Clone)]
struct Unet {
    emb: Embedding,
    conv_in: Conv2d,
    down: Vec<ResBlock>,
    mid: ResBlock,
    up: Vec<ResBlock>,
    out_norm: GroupNorm,
    conv_out: Conv2d,
    widths: Vec<usize>,
    groups: usize,
    emb_dim: usize,
}

impl Unet {
    fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        channels: usize,
        base: usize,
        depth: usize,
        groups: usize,
        time_dim: usize,
    ) -> Self {
        let emb_dim = 2 * base;
        let widths: Vec<usize> = (0..depth).map(|i| base * (1 << i.min(1))).collect();
        let emb = Embedding::new(store, rng, "unet.emb", time_dim, emb_dim);
        let conv_in = Conv2d::new(store, rng, "unet.conv_in", channels, base, 3, 1);
        let mut down = Vec::new();
        let mut prev = base;
        for (i, &w) in widths.iter().enumerate() {
            down.push(ResBlock::new(store, rng, &format!("unet.down{i}"), prev, w, emb_dim, groups));
            prev = w;
        }
        let mid = ResBlock::new(store, rng, "unet.mid", prev, prev, emb_dim, groups);
        let mut up = Vec::new();
        for (i, &w) in widths.iter().enumerate().rev() {
            up.push(ResBlock::new(store, rng, &format!("unet.up{i}"), prev + w, w, emb_dim, groups));
            prev = w;
        }
        up.reverse();
        let out_norm = GroupNorm::new(store, "unet.out_norm", base, groups);
        let conv_out = Conv2d::new(store, rng, "unet.conv_out", base, channels, 3, 1);
        Self {
            emb,
            conv_in,
            down,
            mid,
            up,
            out_norm,
            conv_out,
            widths,
            groups,
            emb_dim,
        }
    }

    fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var, emb: Var, residuals: Option<&[Var]>) -> Var {
        let mut h = self.conv_in.forward(g, s, x);
        let mut skips = Vec::with_capacity(self.down.len());
        let last = self.down.len() - 1;
        for (i, blk) in self.down.iter().enumerate() {
            h = blk.forward(g, s, h, emb);
            if let Some(r) = residuals {
                h = g.add(h, r[i]);
            }
            skips.push(h);
            if i < last {
                h = g.avg_pool2(h);
            }
        }
        h = self.mid.forward(g, s, h, emb);
        for i in (0..self.up.len()).rev() {
            if i < last {
                h = g.upsample2(h);
            }
            h = g.concat1(h, skips[i]);
            h = self.up[i].forward(g, s, h, emb);
        }
        let h = self.out_norm.forward(g, s, h);
        let h = g.silu(h);
        self.conv_out.forward(g, s, h)
    }
}

/// Zero-projected encoder copy consuming `[x_t, spatial]`.
#[derive(Debug, Clone)]
pub struct SpatialAdapter {
    emb: Embedding,
    conv_in: Conv2d,
    hint: Conv2d,
    blocks: Vec<ResBlock>,
    zero: Vec<Conv2d>,
}

impl SpatialAdapter {
    fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var, spatial: Var, t: &[usize], tokens: &[DomainToken]) -> Vec<Var> {
        let emb = self.emb.forward(g, s, t, tokens);
        let hx = self.conv_in.forward(g, s, x);
        let hs = self.hint.forward(g, s, spatial);
        let mut h = g.add(hx, hs);
        let last = self.blocks.len() - 1;
        let mut out = Vec::with_capacity(self.blocks.len());
        for (i, blk) in self.blocks.iter().enumerate() {
            h = blk.forward(g, s, h, emb);
            out.push(self.zero[i].forward(g, s, h));
            if i < last {
                h = g.avg_pool2(h);
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
struct Mlp {
    emb_time_dim: usize,
    l1: Linear,
    l2: Linear,
    l3: Linear,
}

impl Mlp {
    fn new(store: &mut ParamStore, rng: &mut impl Rng, dim: usize, hidden: usize, time_dim: usize) -> Self {
        Self {
            emb_time_dim: time_dim,
            l1: Linear::new(store, rng, "mlp.l1", dim + time_dim + DomainToken::COUNT, hidden),
            l2: Linear::new(store, rng, "mlp.l2", hidden, hidden),
            l3: Linear::new(store, rng, "mlp.l3", hidden, dim),
        }
    }

    fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var, t: &[usize], tokens: &[DomainToken]) -> Var {
        let te = g.input(timestep_embedding(t, self.emb_time_dim, 10_000.0).into_dyn());
        let idx: Vec<usize> = tokens.iter().map(|t| t.index()).collect();
        let oh = g.input(one_hot(&idx, DomainToken::COUNT).into_dyn());
        let h = g.concat1(x, te);
        let h = g.concat1(h, oh);
        let h = self.l1.forward(g, s, h);
        let h = g.silu(h);
        let h = self.l2.forward(g, s, h);
        let h = g.silu(h);
        self.l3.forward(g, s, h)
    }
}

#[derive(Debug, Clone)]
enum Net {
    Unet(Unet),
    Mlp(Mlp),
}

/// A trainable noise predictor, optionally with a spatial adapter attached.
#[derive(Debug, Clone)]
pub struct Denoiser {
    config: DenoiserConfig,
    net: Net,
    adapter: Option<SpatialAdapter>,
    store: ParamStore,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut store = ParamStore::new();
        let net = match config.arch {
            Architecture::Unet {
                channels,
                base_channels,
                depth,
                groups,
                ..
            } => Net::Unet(Unet::new(
                &mut store,
                &mut rng,
                channels,
                base_channels,
                depth,
                groups,
                config.time_dim,
            )),
            Architecture::Mlp { dim, hidden } => Net::Mlp(Mlp::new(&mut store, &mut rng, dim, hidden, config.time_dim)),
        };
        Ok(Self {
            config,
            net,
            adapter: None,
            store,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn has_adapter(&self) -> bool {
        self.adapter.is_some()
    }

    /// Attaches a spatial adapter whose encoder starts as a copy of the base
    /// encoder and whose output projections are exactly zero. Base
    /// parameters are frozen.
    pub fn attach_spatial_adapter(&mut self, seed: u64) -> Result<()> {
        let Net::Unet(unet) = &self.net else {
            return Err(StsError::invalid("spatial adapters need the image architecture"));
        };
        if self.adapter.is_some() {
            return Err(StsError::invalid("adapter already attached"));
        }
        let unet = unet.clone();
        let Architecture::Unet { channels, .. } = self.config.arch else {
            unreachable!("net and config agree")
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let store = &mut self.store;
        let base = unet.widths[0];
        let emb = Embedding::new(store, &mut rng, "adapter.emb", self.config.time_dim, unet.emb_dim);
        let conv_in = Conv2d::new(store, &mut rng, "adapter.conv_in", channels, base, 3, 1);
        let hint = Conv2d::new(store, &mut rng, "adapter.hint", 1, base, 3, 1);
        let mut blocks = Vec::new();
        let mut zero = Vec::new();
        let mut prev = base;
        for (i, &w) in unet.widths.iter().enumerate() {
            blocks.push(ResBlock::new(store, &mut rng, &format!("adapter.block{i}"), prev, w, unet.emb_dim, unet.groups));
            zero.push(Conv2d::zeros(store, &format!("adapter.zero{i}"), w, w, 1));
            prev = w;
        }
        // trainable copy of the base encoder
        let copies: Vec<(String, String)> = store
            .iter()
            .filter_map(|(_, name, _)| {
                let rest = name.strip_prefix("unet.")?;
                let mapped = if let Some(r) = rest.strip_prefix("emb.") {
                    format!("adapter.emb.{r}")
                } else if let Some(r) = rest.strip_prefix("conv_in.") {
                    format!("adapter.conv_in.{r}")
                } else if let Some(r) = rest.strip_prefix("down") {
                    format!("adapter.block{r}")
                } else {
                    return None;
                };
                Some((name.to_string(), mapped))
            })
            .collect();
        for (src, dst) in copies {
            let (Some(si), Some(di)) = (store.id_of(&src), store.id_of(&dst)) else {
                continue;
            };
            if store.get(si).shape() == store.get(di).shape() {
                let v = store.get(si).clone();
                *store.get_mut(di) = v;
            }
        }
        store.freeze_prefix("unet.");
        self.adapter = Some(SpatialAdapter {
            emb,
            conv_in,
            hint,
            blocks,
            zero,
        });
        Ok(())
    }

    /// Records the ε prediction on `g` using parameters from `store`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        t: &[usize],
        tokens: &[DomainToken],
        spatial: Option<Var>,
    ) -> Var {
        match &self.net {
            Net::Mlp(m) => m.forward(g, store, x, t, tokens),
            Net::Unet(u) => {
                let residuals = match (&self.adapter, spatial) {
                    (Some(a), Some(sp)) => Some(a.forward(g, store, x, sp, t, tokens)),
                    _ => None,
                };
                let emb = u.emb.forward(g, store, t, tokens);
                u.forward(g, store, x, emb, residuals.as_deref())
            }
        }
    }

    /// Mean squared ε error on a fixed batch, recorded on `g`.
    pub fn eps_loss(&self, g: &mut Graph, store: &ParamStore, batch: &EpsBatch) -> Var {
        let x = g.input(batch.x_t.clone());
        let sp = batch.spatial.as_ref().map(|s| g.input(s.clone()));
        let pred = self.forward(g, store, x, &batch.t, &batch.tokens, sp);
        let target = g.input(batch.eps.clone());
        g.mse(pred, target)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let want = self.config.state_shape();
        if x.ndim() != want.len() + 1 || x.shape()[1..] != want[..] {
            let mut expected = vec![x.shape().first().copied().unwrap_or(0)];
            expected.extend(want);
            return Err(StsError::ShapeMismatch {
                expected,
                found: x.shape().to_vec(),
            });
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = serde_json::json!({
            "config": self.config,
            "adapter": self.has_adapter(),
        });
        let mut ck = Checkpoint::new(DENOISER_KIND, meta);
        ck.push_store(&self.store, "");
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(DENOISER_KIND)?;
        Self::from_meta_and_tensors(&ck.meta, ck)
    }

    fn from_meta_and_tensors(meta: &serde_json::Value, ck: &Checkpoint) -> Result<Self> {
        let config: DenoiserConfig = serde_json::from_value(meta["config"].clone())
            .map_err(|e| StsError::Config(format!("denoiser config: {e}")))?;
        let mut d = Self::new(config)?;
        if meta["adapter"].as_bool().unwrap_or(false) {
            d.attach_spatial_adapter(0)?;
        }
        ck.load_into(&mut d.store, "")?;
        Ok(d)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(self.to_checkpoint().save(path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

impl NoisePredictor for Denoiser {
    fn predict(&self, x: &Tensor, t: usize, cond: &Condition) -> Result<Tensor> {
        self.check_input(x)?;
        let n = x.shape()[0];
        if n == 0 {
            return Ok(x.clone());
        }
        if let Some(sp) = &cond.spatial {
            ensure_shape(&[n, 1, x.shape()[2], x.shape()[3]], sp.shape())?;
        }
        let mut g = Graph::new();
        let xi = g.input(x.clone());
        let sp = cond.spatial.as_ref().map(|s| g.input(s.clone()));
        let out = self.forward(&mut g, &self.store, xi, &vec![t; n], &vec![cond.token; n], sp);
        let v = g.value(out).clone();
        check_finite(&v, "denoiser output")?;
        Ok(v)
    }
}

/// Noisy inputs and targets for one ε-objective evaluation.
#[derive(Debug, Clone)]
pub struct EpsBatch {
    pub x_t: Tensor,
    pub eps: Tensor,
    pub t: Vec<usize>,
    pub tokens: Vec<DomainToken>,
    pub spatial: Option<Tensor>,
}

/// Training examples: clean states with their domain tokens and optional
/// spatial maps.
#[derive(Debug, Clone)]
pub struct DenoiserData {
    pub x0: Tensor,
    pub tokens: Vec<DomainToken>,
    pub spatial: Option<Tensor>,
}

impl DenoiserData {
    /// Pools two domains, tagging them `Source` and `Target`.
    pub fn pooled(a: &Tensor, b: &Tensor) -> Result<Self> {
        ensure_shape(&a.shape()[1..], &b.shape()[1..])?;
        let x0 = ndarray::concatenate(Axis(0), &[a.view(), b.view()]).map_err(|e| StsError::invalid(e.to_string()))?;
        let mut tokens = vec![DomainToken::Source; a.shape()[0]];
        tokens.extend(vec![DomainToken::Target; b.shape()[0]]);
        Ok(Self {
            x0,
            tokens,
            spatial: None,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Draws a noised batch.
    pub fn draw_batch(
        &self,
        schedule: &DiffusionSchedule,
        batch_size: usize,
        token_drop: f64,
        token_fidelity: f64,
        rng: &mut impl Rng,
    ) -> EpsBatch {
        let n = self.len();
        let idx: Vec<usize> = (0..batch_size).map(|_| rng.random_range(0..n)).collect();
        let x0 = self.x0.select(Axis(0), &idx);
        let t: Vec<usize> = (0..batch_size)
            .map(|_| rng.random_range(1..=schedule.total_steps()))
            .collect();
        let eps = Tensor::from_shape_fn(x0.raw_dim(), |_| rng.sample::<f64, _>(StandardNormal));
        let mut x_t = x0;
        for (i, mut row) in x_t.axis_iter_mut(Axis(0)).enumerate() {
            let a = schedule.alpha_bar(t[i]);
            let (sa, sb) = (a.sqrt(), (1.0 - a).sqrt());
            let e = eps.index_axis(Axis(0), i);
            ndarray::Zip::from(&mut row).and(&e).for_each(|x, &e| *x = sa * *x + sb * e);
        }
        let tokens = idx
            .iter()
            .map(|&i| {
                if rng.random::<f64>() < token_drop {
                    DomainToken::Null
                } else if token_fidelity < 1.0 && rng.random::<f64>() >= token_fidelity {
                    self.tokens[i].flip()
                } else {
                    self.tokens[i]
                }
            })
            .collect();
        let spatial = self.spatial.as_ref().map(|s| s.select(Axis(0), &idx));
        EpsBatch {
            x_t,
            eps,
            t,
            tokens,
            spatial,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 32,
            lr: 1e-4,
            seed: 0,
        }
    }
}

/// Model, optimizer moments, step counter, loss history and rng position.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Denoiser,
    pub opt: Adam,
    pub losses: Vec<(u64, f64)>,
    rng_seed: u64,
    rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(model: Denoiser, lr: f64, rng_seed: u64) -> Self {
        Self {
            model,
            opt: Adam::new(lr),
            losses: Vec::new(),
            rng_seed,
            rng: ChaCha8Rng::seed_from_u64(rng_seed),
        }
    }

    pub fn step(&self) -> u64 {
        self.opt.steps_taken()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = serde_json::json!({
            "config": self.model.config,
            "adapter": self.model.has_adapter(),
            "step": self.step(),
            "lr": self.opt.lr,
            "rng_seed": self.rng_seed,
            "rng_word_pos": self.rng.get_word_pos().to_string(),
        });
        let mut ck = Checkpoint::new(DENOISER_TRAIN_KIND, meta);
        ck.push_store(&self.model.store, "");
        ck.push(LOSS_TENSOR, losses_to_tensor(&self.losses));
        for (name, t) in self.opt.export(&self.model.store) {
            ck.push(name, t);
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(DENOISER_TRAIN_KIND)?;
        let model = Denoiser::from_meta_and_tensors(&ck.meta, ck)?;
        let bad = |f: &str| StsError::Config(format!("train state: bad field {f}"));
        let step = ck.meta["step"].as_u64().ok_or_else(|| bad("step"))?;
        let lr = ck.meta["lr"].as_f64().ok_or_else(|| bad("lr"))?;
        let rng_seed = ck.meta["rng_seed"].as_u64().ok_or_else(|| bad("rng_seed"))?;
        let word_pos: u128 = ck.meta["rng_word_pos"]
            .as_str()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("rng_word_pos"))?;
        let losses = ck.get(LOSS_TENSOR).map(tensor_to_losses).unwrap_or_default();
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        rng.set_word_pos(word_pos);
        let mut opt = Adam::new(lr);
        let moments: Vec<(String, Tensor)> = ck
            .tensors
            .iter()
            .filter(|(n, _)| n.starts_with("adam."))
            .cloned()
            .collect();
        opt.import(&model.store, step, &moments);
        Ok(Self {
            model,
            opt,
            losses,
            rng_seed,
            rng,
        })
    }

    /// Writes `step,loss` rows.
    pub fn write_loss_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_loss_csv(path, &self.losses)
    }
}

const LOSS_TENSOR: &str = "train.losses";

pub(crate) fn losses_to_tensor(losses: &[(u64, f64)]) -> Tensor {
    let flat: Vec<f64> = losses.iter().flat_map(|&(s, l)| [s as f64, l]).collect();
    Tensor::from_shape_vec(ndarray::IxDyn(&[losses.len(), 2]), flat).expect("two columns")
}

pub(crate) fn tensor_to_losses(t: &Tensor) -> Vec<(u64, f64)> {
    t.rows().into_iter().map(|r| (r[0] as u64, r[1])).collect()
}

pub(crate) fn write_loss_csv(path: impl AsRef<Path>, losses: &[(u64, f64)]) -> Result<()> {
    let path = path.as_ref();
    let mut s = String::from("step,loss\n");
    for (step, l) in losses {
        s.push_str(&format!("{step},{l}\n"));
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| StsError::io(parent, e))?;
    }
    std::fs::write(path, s).map_err(|e| StsError::io(path, e))
}

/// Runs `steps` optimizer updates of the ε-objective. Frozen parameters
/// (the base network once an adapter is attached) are left untouched.
pub fn train_denoiser(
    state: &mut TrainState,
    data: &DenoiserData,
    schedule: &DiffusionSchedule,
    steps: u64,
    batch_size: usize,
) -> Result<()> {
    if steps == 0 {
        return Ok(());
    }
    if data.is_empty() {
        return Err(StsError::invalid("training data is empty"));
    }
    if batch_size == 0 {
        return Err(StsError::invalid("batch_size must be positive"));
    }
    if state.model.has_adapter() && data.spatial.is_none() {
        return Err(StsError::invalid("adapter training needs spatial maps"));
    }
    let shape = state.model.config.state_shape();
    ensure_shape(&shape, &data.x0.shape()[1..])?;
    let (drop, fidelity) = (state.model.config.token_drop, state.model.config.token_fidelity);
    for _ in 0..steps {
        let batch = data.draw_batch(schedule, batch_size, drop, fidelity, &mut state.rng);
        let mut g = Graph::new();
        let loss = state.model.eps_loss(&mut g, &state.model.store, &batch);
        let l = g.scalar(loss);
        if !l.is_finite() {
            return Err(StsError::NonFinite(format!(
                "denoiser loss at step {}",
                state.opt.steps_taken() + 1
            )));
        }
        let grads = g.backward(loss).params();
        state.opt.step(&mut state.model.store, &grads);
        state.losses.push((state.opt.steps_taken(), l));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::edge_maps;
    use ndarray::IxDyn;

    fn small_unet() -> Denoiser {
        let mut c = DenoiserConfig::unet(3, 8, 8, 2);
        c.time_dim = 8;
        Denoiser::new(c).unwrap()
    }

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_shape_fn(IxDyn(shape), |_| rng.random::<f64>())
    }

    #[test]
    fn prediction_shape_and_determinism() {
        let d = small_unet();
        let x = rand_tensor(&[2, 3, 8, 8], 1);
        let c = Condition::token(DomainToken::Source);
        let a = d.predict(&x, 500, &c).unwrap();
        assert_eq!(a.shape(), x.shape());
        assert_eq!(a, d.predict(&x, 500, &c).unwrap());
        assert!(d.predict(&rand_tensor(&[2, 3, 4, 4], 1), 5, &c).is_err());
    }

    #[test]
    fn adapter_starts_transparent() {
        let base = small_unet();
        let mut comp = base.clone();
        comp.attach_spatial_adapter(3).unwrap();
        let x = rand_tensor(&[4, 3, 8, 8], 2);
        let sp = edge_maps(&x, 0.03).unwrap();
        for (t, tok) in [(1, DomainToken::Source), (999, DomainToken::Null)] {
            let b = base.predict(&x, t, &Condition::token(tok)).unwrap();
            let c = comp.predict(&x, t, &Condition::with_spatial(tok, sp.clone())).unwrap();
            assert_eq!(b, c);
        }
        let zeros = Tensor::zeros(IxDyn(&[4, 1, 8, 8]));
        let out = comp.predict(&x, 10, &Condition::with_spatial(DomainToken::Target, zeros)).unwrap();
        assert!(out.iter().all(|v| v.is_finite()));
        let bad = Tensor::zeros(IxDyn(&[4, 1, 4, 8]));
        assert!(comp.predict(&x, 10, &Condition::with_spatial(DomainToken::Target, bad)).is_err());
    }

    #[test]
    fn adapter_training_leaves_base_untouched() {
        let mut d = small_unet();
        d.attach_spatial_adapter(0).unwrap();
        let before: Vec<Tensor> = d
            .store()
            .iter()
            .filter(|(_, n, _)| n.starts_with("unet."))
            .map(|(_, _, t)| t.clone())
            .collect();
        let x0 = rand_tensor(&[6, 3, 8, 8], 4);
        let data = DenoiserData {
            spatial: Some(edge_maps(&x0, 0.03).unwrap()),
            x0,
            tokens: vec![DomainToken::Source; 6],
        };
        let sched = DiffusionSchedule::linear(100, 1e-3, 0.05).unwrap();
        let mut st = TrainState::new(d, 1e-3, 0);
        train_denoiser(&mut st, &data, &sched, 3, 4).unwrap();
        let after: Vec<Tensor> = st
            .model
            .store()
            .iter()
            .filter(|(_, n, _)| n.starts_with("unet."))
            .map(|(_, _, t)| t.clone())
            .collect();
        assert_eq!(before, after);
        let zero_moved = st
            .model
            .store()
            .iter()
            .any(|(_, n, t)| n.starts_with("adapter.zero") && t.iter().any(|v| *v != 0.0));
        assert!(zero_moved);
    }

    #[test]
    fn zero_budget_returns_untrained_model() {
        let d = small_unet();
        let data = DenoiserData::pooled(&rand_tensor(&[2, 3, 8, 8], 5), &rand_tensor(&[2, 3, 8, 8], 6)).unwrap();
        let sched = DiffusionSchedule::linear(100, 1e-3, 0.05).unwrap();
        let mut st = TrainState::new(d.clone(), 1e-3, 0);
        train_denoiser(&mut st, &data, &sched, 0, 4).unwrap();
        assert!(st.losses.is_empty());
        assert_eq!(st.model.store().iter().map(|(_, _, t)| t.clone()).collect::<Vec<_>>(),
                   d.store().iter().map(|(_, _, t)| t.clone()).collect::<Vec<_>>());
    }

    #[test]
    fn full_token_drop_ignores_token() {
        let mut c = DenoiserConfig::mlp(2, 16);
        c.token_drop = 1.0;
        let data = DenoiserData::pooled(&rand_tensor(&[8, 2], 7), &rand_tensor(&[8, 2], 8)).unwrap();
        let sched = DiffusionSchedule::linear(100, 1e-3, 0.05).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = data.draw_batch(&sched, 64, c.token_drop, 1.0, &mut rng);
        assert!(batch.tokens.iter().all(|t| *t == DomainToken::Null));
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let mut d = small_unet();
        d.attach_spatial_adapter(1).unwrap();
        let x = rand_tensor(&[2, 3, 8, 8], 9);
        let sp = edge_maps(&x, 0.03).unwrap();
        let cond = Condition::with_spatial(DomainToken::Target, sp);
        let before = d.predict(&x, 321, &cond).unwrap();
        let bytes = d.to_checkpoint().to_bytes();
        let back = Denoiser::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(before, back.predict(&x, 321, &cond).unwrap());
    }

    #[test]
    fn train_state_resume_matches_uninterrupted_run() {
        let data = DenoiserData::pooled(&rand_tensor(&[4, 2], 10), &rand_tensor(&[4, 2], 11)).unwrap();
        let sched = DiffusionSchedule::linear(100, 1e-3, 0.05).unwrap();
        let model = Denoiser::new(DenoiserConfig::mlp(2, 8)).unwrap();
        let mut full = TrainState::new(model.clone(), 1e-2, 3);
        train_denoiser(&mut full, &data, &sched, 6, 4).unwrap();

        let mut part = TrainState::new(model, 1e-2, 3);
        train_denoiser(&mut part, &data, &sched, 3, 4).unwrap();
        let bytes = part.to_checkpoint().to_bytes();
        let mut resumed = TrainState::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        train_denoiser(&mut resumed, &data, &sched, 3, 4).unwrap();
        assert_eq!(resumed.losses, full.losses);
        let x = rand_tensor(&[3, 2], 12);
        let c = Condition::token(DomainToken::Source);
        assert_eq!(resumed.model.predict(&x, 50, &c).unwrap(), full.model.predict(&x, 50, &c).unwrap());
    }
}
