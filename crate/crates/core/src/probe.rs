//! Residual CNN classifiers used to test whether inverted seeds still carry
//! the domain of their source images, and whose trunk doubles as the
//! feature extractor for KID and MMD.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use sts_nn::{Adam, Checkpoint, Conv2d, Graph, GroupNorm, Linear, ParamStore, Tensor, Var};

use crate::error::{Result, StsError};
use crate::metrics::FeatureExtractor;
use crate::translator::SeedDataset;

pub const PROBE_KIND: &str = "sts-probe";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub in_channels: usize,
    pub width: usize,
    pub blocks: usize,
    pub classes: usize,
    pub val_fraction: f64,
    pub max_epochs: usize,
    /// Stop after this many epochs without a new best validation accuracy.
    pub patience: Option<usize>,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            width: 16,
            blocks: 4,
            classes: 2,
            val_fraction: 0.2,
            max_epochs: 80,
            patience: None,
            batch_size: 32,
            lr: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
struct Block {
    n1: GroupNorm,
    c1: Conv2d,
    n2: GroupNorm,
    c2: Conv2d,
}

/// Residual convolutional classifier.
#[derive(Debug, Clone)]
pub struct Classifier {
    config: ProbeConfig,
    conv_in: Conv2d,
    blocks: Vec<Block>,
    head: Linear,
    store: ParamStore,
}

fn groups_for(width: usize) -> usize {
    [4, 2, 1].into_iter().find(|g| width % g == 0).unwrap_or(1)
}

impl Classifier {
    pub fn new(config: ProbeConfig) -> Result<Self> {
        if config.classes < 2 || config.width == 0 || config.in_channels == 0 {
            return Err(StsError::invalid("probe needs >= 2 classes and positive sizes"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed);
        let mut store = ParamStore::new();
        let w = config.width;
        let gr = groups_for(w);
        let conv_in = Conv2d::new(&mut store, &mut rng, "probe.conv_in", config.in_channels, w, 3, 1);
        let blocks = (0..config.blocks)
            .map(|i| Block {
                n1: GroupNorm::new(&mut store, &format!("probe.b{i}.n1"), w, gr),
                c1: Conv2d::new(&mut store, &mut rng, &format!("probe.b{i}.c1"), w, w, 3, 1),
                n2: GroupNorm::new(&mut store, &format!("probe.b{i}.n2"), w, gr),
                c2: Conv2d::new(&mut store, &mut rng, &format!("probe.b{i}.c2"), w, w, 3, 1),
            })
            .collect();
        let head = Linear::new(&mut store, &mut rng, "probe.head", w, config.classes);
        Ok(Self {
            config,
            conv_in,
            blocks,
            head,
            store,
        })
    }

    pub fn config(&self) -> &ProbeConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    fn trunk(&self, g: &mut Graph, s: &ParamStore, x: Var) -> Var {
        let mut h = self.conv_in.forward(g, s, x);
        for b in &self.blocks {
            let r = b.n1.forward(g, s, h);
            let r = g.relu(r);
            let r = b.c1.forward(g, s, r);
            let r = b.n2.forward(g, s, r);
            let r = g.relu(r);
            let r = b.c2.forward(g, s, r);
            h = g.add(h, r);
        }
        let h = g.relu(h);
        g.spatial_mean(h)
    }

    pub fn logits_on(&self, g: &mut Graph, s: &ParamStore, x: Var) -> Var {
        let f = self.trunk(g, s, x);
        self.head.forward(g, s, f)
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        if x.ndim() != 4 || x.shape()[1] != self.config.in_channels {
            return Err(StsError::ShapeMismatch {
                expected: vec![x.shape().first().copied().unwrap_or(0), self.config.in_channels, 0, 0],
                found: x.shape().to_vec(),
            });
        }
        Ok(())
    }

    /// Class logits `[N, classes]`, evaluated in chunks.
    pub fn logits(&self, x: &Tensor) -> Result<Array2<f64>> {
        self.check(x)?;
        self.chunked(x, |g, s, xi| self.logits_on(g, s, xi))
    }

    /// Pooled trunk activations `[N, width]`.
    pub fn penultimate(&self, x: &Tensor) -> Result<Array2<f64>> {
        self.check(x)?;
        self.chunked(x, |g, s, xi| self.trunk(g, s, xi))
    }

    fn chunked(&self, x: &Tensor, f: impl Fn(&mut Graph, &ParamStore, Var) -> Var) -> Result<Array2<f64>> {
        let n = x.shape()[0];
        let mut rows = Vec::new();
        for start in (0..n).step_by(256) {
            let end = (start + 256).min(n);
            let mut g = Graph::new();
            let xi = g.input(x.slice_axis(Axis(0), (start..end).into()).to_owned());
            let out = f(&mut g, &self.store, xi);
            rows.push(
                g.value(out)
                    .clone()
                    .into_dimensionality::<ndarray::Ix2>()
                    .map_err(|e| StsError::invalid(e.to_string()))?,
            );
        }
        if rows.is_empty() {
            return Ok(Array2::zeros((0, self.config.classes)));
        }
        let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
        ndarray::concatenate(Axis(0), &views).map_err(|e| StsError::invalid(e.to_string()))
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let l = self.logits(x)?;
        Ok(l.rows()
            .into_iter()
            .map(|r| {
                r.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc })
                    .0
            })
            .collect())
    }

    pub fn accuracy(&self, x: &Tensor, labels: &[usize]) -> Result<f64> {
        if labels.is_empty() {
            return Err(StsError::invalid("accuracy of an empty set"));
        }
        let p = self.predict(x)?;
        Ok(p.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len() as f64)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(PROBE_KIND, serde_json::json!({ "config": self.config }));
        ck.push_store(&self.store, "");
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(PROBE_KIND)?;
        let config: ProbeConfig = serde_json::from_value(ck.meta["config"].clone())
            .map_err(|e| StsError::Config(format!("probe config: {e}")))?;
        let mut c = Self::new(config)?;
        ck.load_into(&mut c.store, "")?;
        Ok(c)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        Ok(self.to_checkpoint().save(path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Hex digest of the parameters, identifying a frozen network.
    pub fn weights_id(&self) -> String {
        hex_digest(&self.to_checkpoint().to_bytes())[..16].to_string()
    }
}

/// The frozen trunk of a trained classifier as a feature extractor.
#[derive(Debug, Clone)]
pub struct ProbeFeatures {
    classifier: Classifier,
    id: String,
}

impl ProbeFeatures {
    pub fn new(classifier: Classifier) -> Self {
        let id = classifier.weights_id();
        Self { classifier, id }
    }

    pub fn classifier(&self) -> &Classifier {
        &self.classifier
    }
}

impl FeatureExtractor for ProbeFeatures {
    fn features(&self, images: &Tensor) -> Result<Array2<f64>> {
        self.classifier.penultimate(images)
    }

    fn id(&self) -> String {
        self.id.clone()
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub(crate) fn tensor_digest(t: &Tensor) -> String {
    let mut h = Sha256::new();
    for d in t.shape() {
        h.update((*d as u64).to_le_bytes());
    }
    for v in t.iter() {
        h.update(v.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn sample_hash(x: ndarray::ArrayViewD<f64>, label: usize) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update((label as u64).to_le_bytes());
    for v in x.iter() {
        h.update(v.to_le_bytes());
    }
    h.finalize().into()
}

/// Deduplicated, hash-stratified train/validation split.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// Removes exact duplicates, then within each class orders samples by
/// content hash and assigns the first `val_fraction` to validation. The
/// result depends only on the set of distinct samples.
pub fn hash_split(x: &Tensor, labels: &[usize], val_fraction: f64) -> Result<Split> {
    if x.shape().first() != Some(&labels.len()) {
        return Err(StsError::invalid("labels and inputs differ in length"));
    }
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(StsError::invalid("val_fraction must lie in [0, 1)"));
    }
    let mut seen = HashSet::new();
    let mut by_class: BTreeMap<usize, Vec<([u8; 32], usize)>> = BTreeMap::new();
    for (i, &lab) in labels.iter().enumerate() {
        let h = sample_hash(x.index_axis(Axis(0), i), lab);
        if seen.insert(h) {
            by_class.entry(lab).or_default().push((h, i));
        }
    }
    let mut split = Split {
        train: Vec::new(),
        val: Vec::new(),
    };
    for (_, mut items) in by_class {
        items.sort();
        let n_val = (items.len() as f64 * val_fraction).round() as usize;
        for (k, (_, i)) in items.into_iter().enumerate() {
            if k < n_val {
                split.val.push(i);
            } else {
                split.train.push(i);
            }
        }
    }
    // canonical order independent of input ordering
    let key = |i: &usize| sample_hash(x.index_axis(Axis(0), *i), labels[*i]);
    split.train.sort_by_key(key);
    split.val.sort_by_key(key);
    Ok(split)
}

#[derive(Debug, Clone)]
pub struct ProbeOutcome {
    pub classifier: Classifier,
    pub best_val_accuracy: f64,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub num_train: usize,
    pub num_val: usize,
    pub losses: Vec<(u64, f64)>,
}

/// Trains a classifier and returns the weights with the best validation
/// accuracy.
pub fn train_probe(x: &Tensor, labels: &[usize], config: &ProbeConfig) -> Result<ProbeOutcome> {
    let classes = config.classes;
    if labels.iter().any(|&l| l >= classes) {
        return Err(StsError::invalid("label outside class range"));
    }
    for c in 0..classes {
        let n = labels.iter().filter(|&&l| l == c).count();
        if n < 20 {
            return Err(StsError::invalid(format!("class {c} has {n} samples, need >= 20")));
        }
    }
    if config.batch_size == 0 {
        return Err(StsError::invalid("batch_size must be positive"));
    }
    let split = hash_split(x, labels, config.val_fraction)?;
    if split.val.is_empty() {
        return Err(StsError::invalid("validation split is empty"));
    }
    let val_x = x.select(Axis(0), &split.val);
    let val_y: Vec<usize> = split.val.iter().map(|&i| labels[i]).collect();
    let mut model = Classifier::new(config.clone())?;
    let mut opt = Adam::new(config.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut best = (f64::NEG_INFINITY, 0usize, model.store.clone());
    let mut losses = Vec::new();
    let mut order = split.train.clone();
    let mut epochs_run = 0;
    for epoch in 0..config.max_epochs {
        epochs_run = epoch + 1;
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let bx = x.select(Axis(0), chunk);
            let by: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let mut g = Graph::new();
            let xi = g.input(bx);
            let logits = model.logits_on(&mut g, &model.store, xi);
            let loss = g.softmax_ce(logits, &by);
            let l = g.scalar(loss);
            if !l.is_finite() {
                return Err(StsError::NonFinite(format!("probe loss in epoch {epoch}")));
            }
            let grads = g.backward(loss).params();
            opt.step(&mut model.store, &grads);
            losses.push((opt.steps_taken(), l));
        }
        let acc = model.accuracy(&val_x, &val_y)?;
        if acc > best.0 {
            best = (acc, epoch, model.store.clone());
        }
        if let Some(p) = config.patience {
            if epoch >= best.1 + p {
                break;
            }
        }
    }
    model.store = best.2;
    Ok(ProbeOutcome {
        classifier: model,
        best_val_accuracy: best.0,
        best_epoch: best.1,
        epochs_run,
        num_train: split.train.len(),
        num_val: split.val.len(),
        losses,
    })
}

/// Two-class inputs: domain A gets label 0, domain B label 1.
pub fn two_class(a: &Tensor, b: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let x = ndarray::concatenate(Axis(0), &[a.view(), b.view()]).map_err(|e| StsError::invalid(e.to_string()))?;
    let mut y = vec![0; a.shape()[0]];
    y.extend(vec![1; b.shape()[0]]);
    Ok((x, y))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub task: String,
    pub acc_images: f64,
    pub acc_seeds: f64,
    pub num_train: usize,
    pub num_val: usize,
    pub rng_seed: u64,
}

impl ProbeReport {
    pub const CSV_HEADER: &'static str = "task,acc_images,acc_seeds,num_train,num_val,rng_seed";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{},{},{}",
            self.task, self.acc_images, self.acc_seeds, self.num_train, self.num_val, self.rng_seed
        )
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| StsError::io(parent, e))?;
        }
        std::fs::write(path, format!("{}\n{}\n", Self::CSV_HEADER, self.csv_row())).map_err(|e| StsError::io(path, e))
    }
}

/// Trains twin probes on images and on their inverted seeds.
pub fn compare_seed_vs_image_probe(
    task: &str,
    images_a: &Tensor,
    images_b: &Tensor,
    seeds_a: &SeedDataset,
    seeds_b: &SeedDataset,
    config: &ProbeConfig,
) -> Result<(ProbeReport, ProbeOutcome, ProbeOutcome)> {
    for (imgs, seeds, side) in [(images_a, seeds_a, "A"), (images_b, seeds_b, "B")] {
        let digest = tensor_digest(imgs);
        if seeds.provenance.source_digest != digest {
            return Err(StsError::Provenance(format!(
                "domain {side} seeds were not inverted from the supplied images"
            )));
        }
    }
    let (xi, yi) = two_class(images_a, images_b)?;
    let (xs, ys) = two_class(&seeds_a.seeds, &seeds_b.seeds)?;
    let img_cfg = ProbeConfig {
        in_channels: xi.shape()[1],
        ..config.clone()
    };
    let seed_cfg = ProbeConfig {
        in_channels: xs.shape()[1],
        ..config.clone()
    };
    let img = train_probe(&xi, &yi, &img_cfg)?;
    let seed = train_probe(&xs, &ys, &seed_cfg)?;
    let report = ProbeReport {
        task: task.to_string(),
        acc_images: img.best_val_accuracy,
        acc_seeds: seed.best_val_accuracy,
        num_train: img.num_train,
        num_val: img.num_val,
        rng_seed: config.seed,
    };
    Ok((report, img, seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn blobs(n: usize, shift: f64, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_shape_fn(IxDyn(&[n, 2, 4, 4]), |_| rng.sample::<f64, _>(StandardNormal) * 0.3 + shift)
    }

    fn quick() -> ProbeConfig {
        ProbeConfig {
            in_channels: 2,
            width: 4,
            blocks: 1,
            max_epochs: 30,
            patience: Some(10),
            batch_size: 16,
            lr: 1e-2,
            ..Default::default()
        }
    }

    #[test]
    fn split_is_disjoint_exhaustive_and_dedups() {
        let x = blobs(50, 0.0, 1);
        let y: Vec<usize> = (0..50).map(|i| i % 2).collect();
        let s = hash_split(&x, &y, 0.2).unwrap();
        assert_eq!(s.train.len() + s.val.len(), 50);
        assert_eq!(s.val.len(), 10);
        let all: HashSet<_> = s.train.iter().chain(&s.val).collect();
        assert_eq!(all.len(), 50);

        let (xx, _) = two_class(&x, &x).unwrap();
        let yy: Vec<usize> = y.iter().chain(&y).copied().collect();
        let d = hash_split(&xx, &yy, 0.2).unwrap();
        assert_eq!(d.train.len() + d.val.len(), 50);
    }

    #[test]
    fn separable_inputs_are_learned() {
        let (x, y) = two_class(&blobs(40, -1.0, 2), &blobs(40, 1.0, 3)).unwrap();
        let out = train_probe(&x, &y, &quick()).unwrap();
        assert!(out.best_val_accuracy >= 0.99, "{}", out.best_val_accuracy);
        assert!((0.0..=1.0).contains(&out.best_val_accuracy));
    }

    #[test]
    fn duplicated_data_gives_identical_accuracy() {
        let a = blobs(30, -0.2, 4);
        let b = blobs(30, 0.2, 5);
        let (x, y) = two_class(&a, &b).unwrap();
        let once = train_probe(&x, &y, &quick()).unwrap();
        let (x2, _) = two_class(&x, &x).unwrap();
        let y2: Vec<usize> = y.iter().chain(&y).copied().collect();
        let twice = train_probe(&x2, &y2, &quick()).unwrap();
        assert_eq!(once.best_val_accuracy, twice.best_val_accuracy);
    }

    #[test]
    fn rejects_small_classes() {
        let (x, y) = two_class(&blobs(10, 0.0, 6), &blobs(30, 1.0, 7)).unwrap();
        assert!(train_probe(&x, &y, &quick()).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let c = Classifier::new(quick()).unwrap();
        let x = blobs(5, 0.0, 8);
        let back = Classifier::from_checkpoint(&Checkpoint::from_bytes(&c.to_checkpoint().to_bytes()).unwrap()).unwrap();
        assert_eq!(c.logits(&x).unwrap(), back.logits(&x).unwrap());
        assert_eq!(c.penultimate(&x).unwrap().ncols(), 4);
    }
}
