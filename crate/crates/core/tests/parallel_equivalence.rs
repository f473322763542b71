use ndarray::IxDyn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sts_core::ddim::{invert_batched, sample_batched, Condition, DomainToken, GuidanceConfig, LatentState};
use sts_core::denoiser::{Denoiser, DenoiserConfig};
use sts_core::metrics::{kid, mean_ssim, mmd_rbf, SsimParams};
use sts_core::schedule::DiffusionSchedule;
use sts_core::translator::{Direction, SeedTranslator, TranslatorConfig};
use sts_nn::{par, Tensor};

fn randn(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_shape_fn(IxDyn(shape), |_| rng.sample::<f64, _>(StandardNormal))
}

fn both<T>(f: impl Fn() -> T) -> (T, T) {
    (par::with_enabled(false, &f), par::with_enabled(true, &f))
}

fn bitwise(a: &Tensor, b: &Tensor) -> bool {
    a.shape() == b.shape() && a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
}

#[test]
fn ddim_paths_agree_bitwise() {
    let schedule = DiffusionSchedule::linear(1000, 1e-4, 0.02).unwrap();
    let plan = schedule.plan(5).unwrap();
    let model = Denoiser::new(DenoiserConfig::unet(3, 8, 8, 2)).unwrap();
    let x0 = LatentState::new(randn(&[20, 3, 8, 8], 1), 0).unwrap();
    let cond = Condition::token(DomainToken::Source);
    let (s, p) = both(|| invert_batched(&x0, &model, &plan, &cond, &schedule, 6).unwrap().values);
    assert!(bitwise(&s, &p));

    let seeds = LatentState::new(s, plan.last()).unwrap();
    let guidance = GuidanceConfig::new(3.0, Condition::token(DomainToken::Target));
    let (s, p) = both(|| sample_batched(&seeds, &model, &plan, &guidance, &schedule, 7).unwrap().values);
    assert!(bitwise(&s, &p));
}

#[test]
fn metrics_agree_bitwise() {
    let x = randn(&[24, 3, 8, 8], 2).mapv(|v| v.abs().min(1.0));
    let y = randn(&[24, 3, 8, 8], 3).mapv(|v| v.abs().min(1.0));
    let params = SsimParams::default();
    let (s, p) = both(|| mean_ssim(&x, &y, &params).unwrap());
    assert_eq!(s.to_bits(), p.to_bits());

    let fx = randn(&[40, 6], 4).into_dimensionality().unwrap();
    let fy = randn(&[40, 6], 5).into_dimensionality().unwrap();
    let (s, p) = both(|| mmd_rbf(fx.view(), fy.view(), &[0.5, 1.0]).unwrap());
    assert_eq!(s.to_bits(), p.to_bits());
    let (s, p) = both(|| kid(fx.view(), fy.view(), 10, 8, 6).unwrap());
    assert_eq!((s.mean.to_bits(), s.std.to_bits()), (p.mean.to_bits(), p.std.to_bits()));
}

#[test]
fn translation_agrees_bitwise() {
    let t = SeedTranslator::new(TranslatorConfig {
        channels: 3,
        filters: 4,
        res_blocks: 1,
        disc_filters: 4,
        init_seed: 7,
    })
    .unwrap();
    let z = randn(&[70, 3, 8, 8], 8);
    let (s, p) = both(|| t.translate(&z, Direction::AtoB).unwrap());
    assert!(bitwise(&s, &p));
}
