//! Invariants of composition, the objectives, the optimizer, metrics and sampling,
//! each checked against an independent computation.

use ccgan_core::masking::{apply_mask, compose_inpaint, compose_inpaint_on, Mask, MaskSampler, MaskScheme};
use ccgan_core::metrics::average_precision;
use ccgan_core::models::{Discriminator, DiscriminatorSpec, Generator, GeneratorSpec};
use ccgan_core::objectives::{assemble_losses, ClassTargets, GeneratorLoss, HeadOutputs, ObjectiveConfig, Variant};
use ccgan_core::optim::{adam_step, AdamConfig, AdamState};
use ccgan_core::{Mode, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::LN_2;

fn any_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Mask {
    let scheme = match rng.random_range(0..3) {
        0 => MaskScheme::SingleSquare,
        1 => MaskScheme::MultiSquare { count: 2 },
        _ => MaskScheme::RandomBlocks { percent: 40 },
    };
    MaskSampler::new(scheme, (h, w), (h / 4, w / 4)).unwrap().sample(rng).unwrap()
}

#[test]
fn composition_partitions_pixels_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..1000 {
        let x = Tensor::<f32>::from_fn(&[1, 3, 16, 16], |_| rng.random_range(-1.0..1.0));
        let g = Tensor::<f32>::from_fn(&[1, 3, 16, 16], |_| rng.random_range(-1.0..1.0));
        let m = any_mask(&mut rng, 16, 16);
        let xi = compose_inpaint(&x, &g, std::slice::from_ref(&m)).unwrap();
        for c in 0..3 {
            for (p, &keep) in m.keep().iter().enumerate() {
                let i = c * 256 + p;
                let want = if keep { x.data()[i] } else { g.data()[i] };
                assert_eq!(xi.data()[i].to_bits(), want.to_bits());
            }
        }
        let same = compose_inpaint(&x, &x, std::slice::from_ref(&m)).unwrap();
        assert!(same.data().iter().zip(x.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        let mut tape = Tape::new();
        let (xv, gv) = (tape.constant(x.clone()), tape.constant(g.clone()));
        let on_tape = compose_inpaint_on(&mut tape, xv, gv, std::slice::from_ref(&m)).unwrap();
        assert_eq!(tape.value(on_tape), &xi);
    }
}

#[test]
fn masked_input_zeroes_exactly_the_hole() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::<f32>::from_fn(&[2, 3, 8, 8], |_| rng.random_range(0.1..1.0));
    let masks = vec![any_mask(&mut rng, 8, 8), any_mask(&mut rng, 8, 8)];
    let mx = apply_mask(&x, &masks).unwrap();
    for n in 0..2 {
        for c in 0..3 {
            for p in 0..64 {
                let i = (n * 3 + c) * 64 + p;
                assert_eq!(mx.data()[i], if masks[n].keep()[p] { x.data()[i] } else { 0.0 });
            }
        }
    }
}

#[test]
fn generator_output_gradient_is_confined_to_the_hole() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let disc = Discriminator::<f64>::build(DiscriminatorSpec::vgg(3, &[&[4], &[4]], 2), &mut rng).unwrap();
    let cfg = ObjectiveConfig::default();
    for trial in 0..100 {
        let x = Tensor::from_fn(&[2, 3, 8, 8], |_| rng.random_range(-1.0..1.0));
        let g = Tensor::from_fn(&[2, 3, 8, 8], |_| rng.random_range(-1.0..1.0));
        let masks = vec![any_mask(&mut rng, 8, 8), any_mask(&mut rng, 8, 8)];
        let mut tape = Tape::new();
        let params = disc.bind(&mut tape, false);
        let xv = tape.constant(x);
        let gv = tape.leaf(g, true);
        let xi = compose_inpaint_on(&mut tape, xv, gv, &masks).unwrap();
        let p = disc.forward_frozen(&mut tape, &params, xi, Mode::Train, &mut rng).unwrap().prob;
        let terms = assemble_losses(&mut tape, &cfg, &HeadOutputs { g_fake_inpaint: Some(p), ..Default::default() }).unwrap();
        let grads = tape.backward(terms.total_g.unwrap()).unwrap();
        let dg = grads.get(gv).unwrap();
        let mut hole_nonzero = false;
        for n in 0..2 {
            for c in 0..3 {
                for (q, &keep) in masks[n].keep().iter().enumerate() {
                    let v = dg.data()[(n * 3 + c) * 64 + q];
                    if keep {
                        assert_eq!(v, 0.0, "trial {trial}: context pixel has gradient {v}");
                    } else {
                        hole_nonzero |= v != 0.0;
                    }
                }
            }
        }
        assert!(hole_nonzero, "trial {trial}: no gradient reached the hole");
    }
}

fn half_probs(tape: &mut Tape<f64>, n: usize) -> ccgan_core::Var {
    tape.constant(Tensor::full(&[n], 0.5))
}

fn d_total(variant: Variant, lambda_c: f64) -> (f64, f64, f64) {
    let mut tape = Tape::new();
    let cfg = ObjectiveConfig { variant, lambda_c, ..ObjectiveConfig::default() };
    let real = half_probs(&mut tape, 4);
    let fake = half_probs(&mut tape, 4);
    let full = (variant == Variant::CcGan2).then(|| half_probs(&mut tape, 4));
    let logits = tape.constant(Tensor::new(&[4, 3], vec![0.3, -0.2, 1.1, 0.0, 0.5, -0.7, 2.0, 1.0, 0.1, -1.0, 0.2, 0.4]).unwrap());
    let targets = ClassTargets::Single(vec![Some(2), None, Some(0), Some(1)]);
    let out = HeadOutputs { d_real: Some(real), d_fake_inpaint: Some(fake), d_fake_full: full, logits: Some(logits), targets: Some(&targets), ..Default::default() };
    let r = assemble_losses(&mut tape, &cfg, &out).unwrap().report(&tape);
    (r.d_real + r.d_fake_inpaint + r.d_fake_full, r.classification, r.total_d)
}

#[test]
fn adversarial_losses_at_chance() {
    let (adv, _, _) = d_total(Variant::CcGan, 1.0);
    assert!((adv - 2.0 * LN_2).abs() <= 1e-12, "{adv}");
    let (adv2, _, _) = d_total(Variant::CcGan2, 1.0);
    assert!((adv2 - 3.0 * LN_2).abs() <= 1e-12, "{adv2}");
    let (adv_ssl, _, _) = d_total(Variant::SslGan, 1.0);
    assert!((adv_ssl - 2.0 * LN_2).abs() <= 1e-12);
}

#[test]
fn classification_weight_enters_linearly() {
    for v in [Variant::SslGan, Variant::CcGan, Variant::CcGan2] {
        let (adv0, cls, total0) = d_total(v, 0.0);
        assert_eq!(total0, adv0);
        for lambda in [0.25, 0.5, 1.0, 2.0, 10.0] {
            let (adv, cls_l, total) = d_total(v, lambda);
            assert_eq!(cls_l, cls);
            assert_eq!(adv, adv0);
            assert_eq!(total, adv + lambda * cls, "{v:?} lambda {lambda}");
        }
    }
}

#[test]
fn generator_loss_forms_at_chance() {
    for (form, want) in [(GeneratorLoss::NonSaturating, LN_2), (GeneratorLoss::Saturating, -LN_2)] {
        let mut tape = Tape::new();
        let cfg = ObjectiveConfig { generator_loss: form, ..ObjectiveConfig::default() };
        let p = half_probs(&mut tape, 3);
        let r = assemble_losses(&mut tape, &cfg, &HeadOutputs { g_fake_inpaint: Some(p), ..Default::default() }).unwrap().report(&tape);
        assert!((r.total_g - want).abs() <= 1e-12);
    }
}

#[test]
fn adam_matches_hand_rolled_recurrence() {
    let cfg = AdamConfig::default();
    assert_eq!((cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay), (0.0002, 0.5, 0.999, 1e-8, 0.0));
    // f(theta) = 1.5 * (theta - 0.3)^2
    let grad = |t: f64| 3.0 * (t - 0.3);
    let mut params = vec![Tensor::scalar(2.0f64)];
    let mut state = AdamState::new(cfg, &params);
    let (mut theta, mut m, mut v) = (2.0f64, 0.0f64, 0.0f64);
    for t in 1..=10 {
        let g = grad(theta);
        m = 0.5 * m + 0.5 * g;
        v = 0.999 * v + 0.001 * g * g;
        let mh = m / (1.0 - 0.5f64.powi(t));
        let vh = v / (1.0 - 0.999f64.powi(t));
        theta -= 0.0002 * mh / (vh.sqrt() + 1e-8);

        let g_t = Tensor::scalar(grad(params[0].data()[0]));
        adam_step(&mut params, &[g_t], &mut state).unwrap();
        assert!((params[0].data()[0] - theta).abs() <= 1e-12, "step {t}");
    }
    assert_eq!(state.step, 10);
}

/// Precision at each positive, computed by counting over the ranked prefix.
fn brute_force_ap(ranking: &[usize], positives: &[bool]) -> f64 {
    let total = positives.iter().filter(|&&p| p).count() as f64;
    let mut sum = 0.0;
    for k in 0..ranking.len() {
        if positives[ranking[k]] {
            let hits = ranking[..=k].iter().filter(|&&i| positives[i]).count();
            sum += hits as f64 / (k + 1) as f64;
        }
    }
    sum / total
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

#[test]
fn average_precision_matches_exhaustive_oracle() {
    for n in 1..=7 {
        let perms = permutations(n);
        for bits in 1u32..(1 << n) {
            let positives: Vec<bool> = (0..n).map(|i| bits >> i & 1 == 1).collect();
            let p = positives.iter().filter(|&&b| b).count();
            let mut lowest = f64::INFINITY;
            for ranking in &perms {
                // Score by rank so that `ranking` is the descending order.
                let mut scores = vec![0.0; n];
                for (r, &i) in ranking.iter().enumerate() {
                    scores[i] = (n - r) as f64;
                }
                let ap = average_precision(&scores, &positives).unwrap();
                let want = brute_force_ap(ranking, &positives);
                assert!((ap - want).abs() < 1e-12, "n {n} bits {bits:b} ranking {ranking:?}");
                lowest = lowest.min(ap);
            }
            // The minimum is attained with every positive ranked last.
            let worst: f64 = (1..=p).map(|k| k as f64 / (n - p + k) as f64).sum::<f64>() / p as f64;
            assert!((lowest - worst).abs() < 1e-12);
        }
    }
}

#[test]
fn average_precision_is_invariant_under_monotone_maps() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..100 {
        let n = rng.random_range(2..40);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mut positives: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
        positives[0] = true;
        let base = average_precision(&scores, &positives).unwrap();
        let maps: [fn(f64) -> f64; 4] = [|s| s.exp(), |s| s * s * s, |s| 2.0 * s + 5.0, |s| s.atan()];
        for f in maps {
            let mapped: Vec<f64> = scores.iter().map(|&s| f(s)).collect();
            assert_eq!(average_precision(&mapped, &positives).unwrap(), base);
        }
    }
}

#[test]
fn dropout_zeroes_the_configured_fraction() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::ones(&[200_000]));
    let y = tape.dropout(x, 0.5, true, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let vals = tape.value(y).data();
    let zeros = vals.iter().filter(|&&v| v == 0.0).count() as f64 / vals.len() as f64;
    assert!((zeros - 0.5).abs() <= 0.01, "{zeros}");
    assert!(vals.iter().all(|&v| v == 0.0 || v == 2.0));
    let off = tape.dropout(x, 0.5, false, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    assert_eq!(tape.value(off), tape.value(x));
}

#[test]
fn single_square_position_is_uniform() {
    // 5 x 5 = 25 possible offsets for a 4x4 hole in 8x8.
    let sampler = MaskSampler::new(MaskScheme::SingleSquare, (8, 8), (4, 4)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let draws = 25_000;
    let mut counts = [0usize; 25];
    for _ in 0..draws {
        let h = sampler.sample(&mut rng).unwrap().holes()[0];
        counts[h.top * 5 + h.left] += 1;
    }
    let expected = draws as f64 / 25.0;
    let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // Upper 0.1% point of chi-square with 24 degrees of freedom.
    assert!(chi2 < 51.18, "chi2 {chi2}");
}

#[test]
fn parameter_counts_match_hand_arithmetic() {
    let small = GeneratorSpec::context(3, 8, &[4]);
    // conv 3->4 (4x4) + bn(4), transposed conv 4->3 (4x4) + bias(3)
    assert_eq!(small.parameter_count().unwrap(), 3 * 4 * 16 + 8 + 4 * 3 * 16 + 3);
    let enc = 3 * 64 * 16 + 128 + 64 * 128 * 16 + 256 + 128 * 256 * 16 + 512 + 256 * 512 * 16 + 1024;
    let dec = 512 * 256 * 16 + 512 + 256 * 128 * 16 + 256 + 128 * 64 * 16 + 128 + 64 * 3 * 16 + 3;
    assert_eq!(GeneratorSpec::default_64().parameter_count().unwrap(), enc + dec);

    let trunk = 3 * 64 * 9 + 128 + 64 * 128 * 9 + 256 + 128 * 256 * 9 + 512 + 256 * 256 * 9 + 512 + 256 * 512 * 9 + 1024 + 3 * (512 * 512 * 9 + 1024);
    assert_eq!(DiscriminatorSpec::vgg_a(3, 10).parameter_count(), trunk + 513 + 5130);

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for spec in [small, GeneratorSpec::noise(3, 16, 8, &[8, 4]), GeneratorSpec::context(1, 16, &[4, 8, 8])] {
        let built: usize = Generator::<f32>::build(spec.clone(), &mut rng).unwrap().params().tensors.iter().map(Tensor::len).sum();
        assert_eq!(built, spec.parameter_count().unwrap());
    }
    let d = DiscriminatorSpec::vgg(3, &[&[8], &[16, 16]], 4);
    let built: usize = Discriminator::<f32>::build(d.clone(), &mut rng).unwrap().params().tensors.iter().map(Tensor::len).sum();
    assert_eq!(built, d.parameter_count());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn generator_emits_images_of_the_input_size(
        depth in 1usize..4,
        widths in proptest::collection::vec(1usize..6, 3),
        scale in 1usize..3,
        channels in 1usize..4,
        batch in 2usize..4,
        seed in any::<u64>(),
    ) {
        let res = scale << depth;
        let spec = GeneratorSpec::context(channels, res, &widths[..depth]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Generator::<f32>::build(spec, &mut rng).unwrap();
        let mut tape = Tape::new();
        let params = g.bind(&mut tape, false);
        let x = tape.constant(Tensor::from_fn(&[batch, channels, res, res], |_| rng.random_range(-1.0..1.0)));
        let y = g.forward(&mut tape, &params, Some(x), None, None, Mode::Train).unwrap();
        prop_assert_eq!(tape.shape(y), &[batch, channels, res, res]);
        prop_assert!(tape.value(y).data().iter().all(|v| v.abs() < 1.0));
    }
}
