use ccgan_core::models::{Discriminator, DiscriminatorSpec, Generator, GeneratorSpec};
use ccgan_core::{Mode, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn generate(gen: &Generator<f64>, masked: Option<&Tensor<f64>>, noise: &Tensor<f64>) -> Tensor<f64> {
    let mut tape = Tape::new();
    let params = gen.bind(&mut tape, false);
    let masked = masked.map(|m| tape.constant(m.clone()));
    let z = tape.constant(noise.clone());
    let out = gen.forward_frozen(&mut tape, &params, masked, None, Some(z), Mode::Infer).unwrap();
    tape.value(out).clone()
}

#[test]
fn different_noise_draws_give_different_images() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut context = GeneratorSpec::context(3, 16, &[4, 8]);
    context.noise_dim = 5;
    let specs = [context, GeneratorSpec::noise(3, 16, 6, &[8, 4])];
    for spec in specs {
        let dim = spec.noise_dim;
        let context = !spec.encoder.is_empty();
        let gen = Generator::<f64>::build(spec, &mut rng).unwrap();
        let masked = context.then(|| uniform(&[2, 3, 16, 16], &mut rng));
        for _ in 0..20 {
            let a = generate(&gen, masked.as_ref(), &uniform(&[2, dim], &mut rng));
            let b = generate(&gen, masked.as_ref(), &uniform(&[2, dim], &mut rng));
            assert_eq!(a.shape(), [2, 3, 16, 16]);
            assert!(a.data().iter().zip(b.data()).any(|(x, y)| x != y));
        }
    }
}

#[test]
fn trunk_is_the_same_for_joint_and_separate_heads() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let spec = DiscriminatorSpec::vgg(3, &[&[4], &[6, 6]], 5);
    let disc = Discriminator::<f64>::build(spec, &mut rng).unwrap();
    let x = uniform(&[3, 3, 12, 12], &mut rng);

    let mut joint = Tape::new();
    let params = disc.bind(&mut joint, false);
    let xv = joint.constant(x.clone());
    let out = disc.forward_frozen(&mut joint, &params, xv, Mode::Infer, &mut rng).unwrap();

    let mut sep = Tape::new();
    let params = disc.bind(&mut sep, false);
    let xv = sep.constant(x.clone());
    let features = disc.trunk_features(&mut sep, &params, xv, Mode::Infer).unwrap();
    let prob = disc.real_fake_head(&mut sep, &params, features).unwrap();
    let features_again = disc.trunk_features(&mut sep, &params, xv, Mode::Infer).unwrap();
    let logits = disc.class_head(&mut sep, &params, features_again).unwrap();

    assert_eq!(joint.value(out.features), sep.value(features));
    assert_eq!(sep.value(features), sep.value(features_again));
    assert_eq!(joint.value(out.prob), sep.value(prob));
    assert_eq!(joint.value(out.logits), sep.value(logits));
}

#[test]
fn heads_have_fixed_shapes_at_any_resolution() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let disc = Discriminator::<f64>::build(DiscriminatorSpec::vgg(3, &[&[4], &[4]], 3), &mut rng).unwrap();
    for size in [8, 12, 16, 32, 48] {
        let x = uniform(&[2, 3, size, size], &mut rng);
        let mut tape = Tape::new();
        let params = disc.bind(&mut tape, false);
        let xv = tape.constant(x);
        let out = disc.forward_frozen(&mut tape, &params, xv, Mode::Infer, &mut rng).unwrap();
        assert_eq!(tape.value(out.prob).shape(), [2]);
        assert_eq!(tape.value(out.logits).shape(), [2, 3]);
        assert!(tape.value(out.prob).data().iter().all(|&p| p > 0.0 && p < 1.0));
    }
    assert!(disc.spec().check_resolution(6).is_err());
}
