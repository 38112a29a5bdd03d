use ccgan_core::masking::{Mask, MaskSampler, MaskScheme};
use ccgan_core::models::{DiscriminatorSpec, GeneratorSpec};
use ccgan_core::objectives::{ClassTargets, ObjectiveConfig, Variant};
use ccgan_core::optim::AdamConfig;
use ccgan_core::train::{generator_gradients, train_step, Batch, GanState};
use ccgan_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn state(g_lr: f64, seed: u64) -> GanState<f32> {
    let g = AdamConfig { lr: g_lr, ..AdamConfig::default() };
    GanState::new(Some(GeneratorSpec::context(3, 8, &[4, 8])), DiscriminatorSpec::vgg(3, &[&[4], &[8]], 3), g, AdamConfig::default(), seed).unwrap()
}

fn batch(seed: u64) -> Batch<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sampler = MaskSampler::new(MaskScheme::SingleSquare, (8, 8), (4, 4)).unwrap();
    Batch {
        images: Tensor::from_fn(&[4, 3, 8, 8], |_| rng.random_range(-1.0..1.0)),
        targets: ClassTargets::Single(vec![Some(1), None, None, Some(2)]),
        masks: Some((0..4).map(|_| sampler.sample(&mut rng).unwrap()).collect()),
        lowres: None,
    }
}

#[test]
fn repeated_runs_are_bitwise_identical() {
    let cfg = ObjectiveConfig { variant: Variant::CcGan2, ..ObjectiveConfig::default() };
    let (mut a, mut b) = (state(2e-4, 11), state(2e-4, 11));
    for i in 0..3 {
        let ra = train_step(&mut a, &batch(i), &cfg).unwrap();
        let rb = train_step(&mut b, &batch(i), &cfg).unwrap();
        assert_eq!(ra, rb);
    }
    assert_eq!(a, b);
}

#[test]
fn generator_update_leaves_the_discriminator_alone() {
    let cfg = ObjectiveConfig::default();
    let (mut frozen_g, mut live_g) = (state(0.0, 12), state(2e-4, 12));
    let before = live_g.generator.clone().unwrap();
    train_step(&mut frozen_g, &batch(1), &cfg).unwrap();
    train_step(&mut live_g, &batch(1), &cfg).unwrap();
    assert_eq!(frozen_g.discriminator, live_g.discriminator);
    assert_eq!(frozen_g.generator.unwrap().params(), before.params());
    assert_ne!(live_g.generator.unwrap().params(), before.params());
}

#[test]
fn no_hole_means_no_generator_gradient() {
    let s = state(2e-4, 13);
    let mut b = batch(2);
    b.masks = Some(vec![Mask::all_ones(8, 8); 4]);
    let cfg = ObjectiveConfig::default();
    for g in generator_gradients(&s, &b, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap() {
        assert!(g.data().iter().all(|&v| v == 0.0));
    }
    let b = batch(2);
    let grads = generator_gradients(&s, &b, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    assert!(grads.iter().any(|g| g.data().iter().any(|&v| v != 0.0)));
}

#[test]
fn reports_satisfy_their_sums() {
    for v in [Variant::SslGan, Variant::CcGan, Variant::CcGan2] {
        let cfg = ObjectiveConfig { variant: v, lambda_c: 0.7, ..ObjectiveConfig::default() };
        let mut s = if v == Variant::SslGan {
            GanState::new(Some(GeneratorSpec::noise(3, 8, 6, &[8, 4])), DiscriminatorSpec::vgg(3, &[&[4], &[8]], 3), AdamConfig::default(), AdamConfig::default(), 1).unwrap()
        } else {
            state(2e-4, 1)
        };
        let mut b = batch(3);
        if v == Variant::SslGan {
            b.masks = None;
        }
        for _ in 0..3 {
            let r = train_step(&mut s, &b, &cfg).unwrap();
            assert!(r.is_consistent(&cfg, 1e-5), "{v:?} {r:?}");
        }
        assert_eq!(s.step, 3);
    }
}
