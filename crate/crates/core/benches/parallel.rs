use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use ndarray::IxDyn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sts_core::ddim::{invert_batched, Condition, DomainToken, LatentState};
use sts_core::denoiser::{Denoiser, DenoiserConfig};
use sts_core::metrics::{mean_ssim, SsimParams};
use sts_core::oracle::{make_two_domain_dataset, TwoDomainDatasetSpec};
use sts_core::schedule::DiffusionSchedule;
use sts_core::translator::{Direction, SeedTranslator, TranslatorConfig};
use sts_nn::{par, Tensor};

fn randn(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_shape_fn(IxDyn(shape), |_| rng.sample::<f64, _>(StandardNormal))
}

const MODES: [(&str, bool); 2] = [("sequential", false), ("parallel", true)];

fn inversion(c: &mut Criterion) {
    let schedule = DiffusionSchedule::linear(1000, 1e-4, 0.02).unwrap();
    let plan = schedule.plan(10).unwrap();
    let model = Denoiser::new(DenoiserConfig::unet(3, 8, 16, 2)).unwrap();
    let x0 = LatentState::new(randn(&[128, 3, 8, 8], 1), 0).unwrap();
    let cond = Condition::token(DomainToken::Source);
    let mut group = c.benchmark_group("ddim_invert_128");
    group.sample_size(10);
    for (name, on) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| par::with_enabled(on, || invert_batched(&x0, &model, &plan, &cond, &schedule, 16).unwrap()))
        });
    }
    group.finish();
}

fn ssim(c: &mut Criterion) {
    let ds = make_two_domain_dataset(&TwoDomainDatasetSpec {
        num_samples: 8,
        num_eval: 256,
        ..Default::default()
    })
    .unwrap();
    let params = SsimParams::default();
    let mut group = c.benchmark_group("mean_ssim_256");
    for (name, on) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| par::with_enabled(on, || mean_ssim(&ds.eval_a, &ds.eval_b, &params).unwrap()))
        });
    }
    group.finish();
}

fn translation(c: &mut Criterion) {
    let t = SeedTranslator::new(TranslatorConfig::new(3)).unwrap();
    let z = randn(&[256, 3, 8, 8], 2);
    let mut group = c.benchmark_group("translate_seeds_256");
    group.sample_size(20);
    for (name, on) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| par::with_enabled(on, || t.translate(&z, Direction::AtoB).unwrap()))
        });
    }
    group.finish();
}

criterion_group!(benches, inversion, ssim, translation);
criterion_main!(benches);
