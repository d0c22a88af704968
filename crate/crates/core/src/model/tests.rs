use ndarray::Array3;
use rand::Rng;

use super::*;
use crate::exec::ExecMode;
use crate::volume::{Spacing, Volume};

fn small() -> ModelConfig {
    ModelConfig {
        depth: 2,
        base_channels: 2,
        n_categories: 3,
        patch_size: [8, 8, 8],
        ..Default::default()
    }
}

fn random_sample(rng: &mut crate::seed::Rng, dims: [usize; 3], category: Option<usize>) -> Sample {
    let (a, b, c) = (dims[0], dims[1], dims[2]);
    Sample {
        image: Array3::from_shape_fn((a, b, c), |_| rng.random_range(-2.0..2.0)),
        point: Array3::from_shape_fn((a, b, c), |_| rng.random_range(0.0..1.0)),
        boxes: Array3::from_shape_fn((a, b, c), |_| f64::from(u8::from(rng.random_bool(0.3)))),
        category,
    }
}

fn batch_loss(model: &Model, batch: &[Sample], targets: &[Array3<f64>], mix: Option<&MixPlan>) -> f64 {
    let (z, _) = model.forward_batch(batch, mix, false).unwrap();
    z.iter().zip(targets).map(|(z, t)| dice_ce(z, t, 1.0, None)).sum()
}

fn grads_of(model: &Model, batch: &[Sample], targets: &[Array3<f64>], mix: Option<&MixPlan>) -> Grads {
    let (z, cache) = model.forward_batch(batch, mix, true).unwrap();
    let dz: Vec<Array3<f64>> = z
        .iter()
        .zip(targets)
        .map(|(z, t)| {
            let mut g = Array3::zeros(z.dim());
            dice_ce(z, t, 1.0, Some(&mut g));
            g
        })
        .collect();
    let mut grads = model.zero_grads();
    model.backward(&cache.unwrap(), &dz, &mut grads).unwrap();
    grads
}

fn fd_check(mix: Option<&MixPlan>, seed: u64) {
    let mut rng = crate::seed::rng(seed);
    let model = Model::new(small(), seed).unwrap();
    let batch = vec![
        random_sample(&mut rng, [8, 8, 8], Some(1)),
        random_sample(&mut rng, [8, 8, 8], Some(2)),
    ];
    let targets: Vec<Array3<f64>> = (0..2)
        .map(|_| Array3::from_shape_fn((8, 8, 8), |_| f64::from(u8::from(rng.random_bool(0.3)))))
        .collect();
    let grads = grads_of(&model, &batch, &targets, mix);
    let numeric = |bi: usize, pi: usize, j: usize, h: f64| {
        let mut plus = model.clone();
        plus.blocks_mut()[bi].params[pi].data[j] += h;
        let mut minus = model.clone();
        minus.blocks_mut()[bi].params[pi].data[j] -= h;
        (batch_loss(&plus, &batch, &targets, mix) - batch_loss(&minus, &batch, &targets, mix)) / (2.0 * h)
    };
    let (mut checked, mut kinks) = (0, 0);
    for (bi, block) in model.blocks().iter().enumerate() {
        let mut informative = 0;
        for (pi, param) in block.params.iter().enumerate() {
            for _ in 0..3 {
                let j = rng.random_range(0..param.data.len());
                let (num, fine) = (numeric(bi, pi, j, 1e-6), numeric(bi, pi, j, 1e-7));
                let ana = grads[bi][pi][j];
                let scale = num.abs().max(ana.abs());
                if scale < 1e-8 {
                    continue;
                }
                // a LeakyReLU kink inside the stencil makes the two step sizes disagree
                if (num - fine).abs() / scale > 1e-4 {
                    kinks += 1;
                    continue;
                }
                assert!(
                    (num - ana).abs() / scale < 1e-3,
                    "{}.{}[{j}]: analytic {ana} vs numeric {num}",
                    block.name,
                    param.name
                );
                informative += 1;
            }
        }
        assert!(
            informative >= 3,
            "block {} had {informative} informative probes",
            block.name
        );
        checked += informative;
    }
    assert!(kinks * 10 <= checked, "{kinks} kinked probes of {checked}");
}

#[test]
fn gradients_match_finite_differences_on_every_block() {
    fd_check(None, 11);
}

#[test]
fn gradients_with_mixstyle_match_detached_statistics_rule() {
    // with statistics held constant, mixing is an affine map per channel, so
    // the network gradient equals the plain gradient with the encoder
    // activations rescaled; check this end to end against a model whose
    // mixing plan is the identity
    let mut rng = crate::seed::rng(12);
    let model = Model::new(small(), 12).unwrap();
    let batch = vec![
        random_sample(&mut rng, [8, 8, 8], Some(0)),
        random_sample(&mut rng, [8, 8, 8], None),
    ];
    let targets: Vec<Array3<f64>> = (0..2)
        .map(|_| Array3::from_shape_fn((8, 8, 8), |_| f64::from(u8::from(rng.random_bool(0.3)))))
        .collect();
    let identity = MixPlan {
        perm: vec![0, 1],
        lambda: vec![0.5, 0.5],
    };
    let plain = grads_of(&model, &batch, &targets, None);
    let mixed = grads_of(&model, &batch, &targets, Some(&identity));
    for (a, b) in plain.iter().flatten().flatten().zip(mixed.iter().flatten().flatten()) {
        assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()));
    }
    let swap = MixPlan {
        perm: vec![1, 0],
        lambda: vec![0.2, 0.7],
    };
    let (z, _) = model.forward_batch(&batch, Some(&swap), false).unwrap();
    let (z0, _) = model.forward_batch(&batch, None, false).unwrap();
    assert_ne!(z, z0);
    let g = grads_of(&model, &batch, &targets, Some(&swap));
    assert!(g.iter().flatten().flatten().all(|v| v.is_finite()));
}

#[test]
fn output_shape_and_category_effect() {
    let mut rng = crate::seed::rng(3);
    let model = Model::new(small(), 3).unwrap();
    let s = random_sample(&mut rng, [8, 16, 8], Some(0));
    let z0 = model.forward(&s).unwrap();
    assert_eq!(z0.dim(), (8, 16, 8));
    let z1 = model
        .forward(&Sample {
            category: Some(1),
            ..s.clone()
        })
        .unwrap();
    assert_ne!(z0, z1);
    let bad = random_sample(&mut rng, [8, 6, 8], None);
    assert!(model.forward(&bad).is_err());
    let mut mismatch = s.clone();
    mismatch.point = Array3::zeros((8, 8, 8));
    assert!(model.forward(&mismatch).is_err());
    assert!(model.forward(&Sample { category: Some(3), ..s }).is_err());
}

#[test]
fn zero_prompts_reproduce_unprompted_forward() {
    let model = Model::new(small(), 4).unwrap();
    let img = Array3::from_shape_fn((8, 8, 8), |(x, y, z)| ((x * 7 + y * 3 + z) % 5) as f64 - 2.0);
    let s = Spacing::default();
    let encoded = encode_prompts(&PromptSet::default(), [8, 8, 8], s).unwrap();
    let a = model.forward(&Sample::new(img.clone(), encoded, None)).unwrap();
    let b = model
        .forward(&Sample::new(img, PromptChannels::zeros([8, 8, 8]), None))
        .unwrap();
    assert_eq!(a, b);
}

#[test]
fn config_validation() {
    assert!(ModelConfig::default().validate().is_ok());
    let bad = ModelConfig {
        patch_size: [12, 16, 16],
        ..Default::default()
    };
    assert!(bad.validate().is_err());
    let bad = ModelConfig {
        in_channels: 4,
        ..Default::default()
    };
    assert!(bad.validate().is_err());
    assert_eq!(
        ModelConfig::default().block_names(),
        [
            "encoder_1",
            "encoder_2",
            "encoder_3",
            "bottleneck",
            "decoder_3",
            "decoder_2",
            "decoder_1",
            "head"
        ]
    );
}

#[test]
fn trainable_block_counts() {
    let mut m = Model::new(small(), 5).unwrap();
    let total = m.blocks().len();
    assert_eq!(m.set_trainable_blocks(total).unwrap(), m.n_params());
    assert_eq!(m.set_trainable_blocks(1).unwrap(), m.blocks()[total - 1].n_params());
    let counts: Vec<usize> = (1..=total).map(|k| m.set_trainable_blocks(k).unwrap()).collect();
    assert!(counts.windows(2).all(|w| w[0] < w[1]));
    assert!(matches!(
        m.set_trainable_blocks(0),
        Err(crate::Error::BlockRange { .. })
    ));
    assert!(m.set_trainable_blocks(total + 1).is_err());
}

#[test]
fn frozen_blocks_are_bitwise_stable() {
    let mut rng = crate::seed::rng(6);
    for k in [1, 2, 4] {
        let mut m = Model::new(small(), 6).unwrap();
        m.set_trainable_blocks(k).unwrap();
        let before = m.clone();
        let batch = vec![random_sample(&mut rng, [8, 8, 8], Some(0))];
        let t = vec![Array3::from_shape_fn((8, 8, 8), |(x, _, _)| f64::from(u8::from(x > 3)))];
        let g = grads_of(&m, &batch, &t, None);
        let mut opt = Adam::new(&m, AdamConfig::with_lr(1e-2));
        opt.step(&mut m, &g);
        let from = m.trainable_from();
        for (i, (a, b)) in before.blocks().iter().zip(m.blocks()).enumerate() {
            if i < from {
                assert_eq!(a, b, "block {} moved", a.name);
                assert!(g[i].iter().flatten().all(|v| *v == 0.0));
            } else {
                assert_ne!(a, b, "block {} did not train", a.name);
            }
        }
    }
}

#[test]
fn partial_backward_matches_full_backward_on_trainable_blocks() {
    let mut rng = crate::seed::rng(7);
    let full = Model::new(small(), 7).unwrap();
    let mut part = full.clone();
    part.set_trainable_blocks(3).unwrap();
    let batch = vec![random_sample(&mut rng, [8, 8, 8], None)];
    let t = vec![Array3::from_shape_fn((8, 8, 8), |(_, y, _)| f64::from(u8::from(y < 4)))];
    let gf = grads_of(&full, &batch, &t, None);
    let gp = grads_of(&part, &batch, &t, None);
    for i in part.trainable_from()..part.blocks().len() {
        assert_eq!(gf[i], gp[i]);
    }
}

fn filled(model: &Model, v: f64) -> Model {
    let mut m = model.clone();
    for b in m.blocks_mut() {
        for p in &mut b.params {
            p.data.fill(v);
        }
    }
    m
}

#[test]
fn ema_arithmetic_and_closed_form() {
    let base = Model::new(small(), 8).unwrap();
    let mut t = filled(&base, 0.0);
    let s = filled(&base, 1.0);
    ema_update(&mut t, &s, 0.9).unwrap();
    assert!(t.flat_params().iter().all(|v| (v - 0.1).abs() < 1e-15));
    let mut t = Model::new(small(), 9).unwrap();
    ema_update(&mut t, &s, 0.0).unwrap();
    assert_eq!(t.flat_params(), s.flat_params());

    let student = Model::new(small(), 10).unwrap();
    let t0 = Model::new(small(), 11).unwrap();
    let norm = |a: &Model| -> f64 {
        a.flat_params()
            .iter()
            .zip(student.flat_params())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt()
    };
    let d0 = norm(&t0);
    let mut t = t0.clone();
    for n in 1..=20 {
        ema_update(&mut t, &student, 0.8).unwrap();
        let want = 0.8f64.powi(n) * d0;
        assert!((norm(&t) - want).abs() <= 1e-9 * d0, "step {n}");
    }
    let other = Model::new(
        ModelConfig {
            base_channels: 3,
            ..small()
        },
        0,
    )
    .unwrap();
    assert!(ema_update(&mut t, &other, 0.5).is_err());
    assert!(ema_update(&mut t, &student, 1.0).is_err());
}

#[test]
fn ema_is_order_independent() {
    // updating block-by-block in reverse order equals the whole-model update
    let s = Model::new(small(), 12).unwrap();
    let mut a = Model::new(small(), 13).unwrap();
    let mut b = a.clone();
    ema_update(&mut a, &s, 0.7).unwrap();
    for bi in (0..b.blocks().len()).rev() {
        for pi in (0..b.blocks()[bi].params.len()).rev() {
            let src = s.blocks()[bi].params[pi].data.clone();
            for (j, v) in b.blocks_mut()[bi].params[pi].data.iter_mut().enumerate().rev() {
                *v = 0.7 * *v + (1.0 - 0.7) * src[j];
            }
        }
    }
    assert_eq!(a.flat_params(), b.flat_params());
}

fn volume(shape: (usize, usize, usize), seed: u64) -> Volume {
    let mut rng = crate::seed::rng(seed);
    let d = Array3::from_shape_fn(shape, |_| rng.random_range(-2.0..2.0));
    Volume::new(d, Spacing::default(), "v").unwrap()
}

#[test]
fn single_window_prediction_equals_forward() {
    let m = Model::new(small(), 14).unwrap();
    let v = volume((8, 8, 8), 1);
    let p = PromptSet {
        points: vec![[3, 3, 3]],
        boxes: vec![],
        category_id: Some(2),
    };
    let mask = predict_mask(&m, &v, &p, 0.5, ExecMode::Sequential).unwrap();
    let ch = encode_prompts(&p, [8, 8, 8], v.spacing()).unwrap();
    let z = m.forward(&Sample::new(v.data().clone(), ch, Some(2))).unwrap();
    let want = z.mapv(|z| u8::from(sigmoid(z) > 0.5));
    assert_eq!(mask.data(), &want);
}

#[test]
fn zero_logit_model_predicts_empty() {
    let m = filled(&Model::new(small(), 15).unwrap(), 0.0);
    let v = volume((12, 20, 9), 2);
    let mask = predict_mask(&m, &v, &PromptSet::default(), 0.5, ExecMode::Parallel).unwrap();
    assert!(mask.is_empty());
    assert_eq!(mask.shape(), [12, 20, 9]);
}

/// A network computing a pointwise function of the image voxel only: every
/// path except the centre taps of the first-level convolutions is zero.
fn pointwise_model() -> Model {
    let mut m = filled(&Model::new(small(), 16).unwrap(), 0.0);
    let d = m.config().depth;
    let centre = 13;
    {
        let enc = &mut m.blocks_mut()[0];
        // conv1: input channel 0 -> output 0; conv2: 0 -> 0
        enc.params[0].data[centre] = 1.5;
        enc.params[2].data[centre] = 0.8;
    }
    {
        let dec = &mut m.blocks_mut()[2 * d];
        let up = m_width(d);
        // conv1 reads skip channel 0, which sits after the upsampled channels
        dec.params[0].data[up * 27 + centre] = 1.2;
        dec.params[2].data[centre] = 0.9;
    }
    let head = &mut m.blocks_mut()[2 * d + 1];
    head.params[0].data[0] = 2.0;
    head.params[1].data[0] = -0.3;
    m
}

fn m_width(_: usize) -> usize {
    small().width(2)
}

#[test]
fn agreeing_windows_blend_to_the_same_result() {
    let m = pointwise_model();
    let lrelu = |v: f64| if v < 0.0 { 0.01 * v } else { v };
    let f = |x: f64| sigmoid(2.0 * lrelu(0.9 * lrelu(1.2 * lrelu(0.8 * lrelu(1.5 * x)))) - 0.3);
    let v = volume((20, 13, 8), 3);
    let prob = predict_probabilities(&m, &v, &PromptSet::default(), ExecMode::Sequential).unwrap();
    for (p, x) in prob.iter().zip(v.data()) {
        assert!((p - f(*x)).abs() < 1e-12);
    }
    let mask = predict_mask(&m, &v, &PromptSet::default(), 0.5, ExecMode::Sequential).unwrap();
    let want = v.data().mapv(|x| u8::from(f(x) > 0.5));
    assert_eq!(mask.data(), &want);
    // a volume smaller than the patch goes through one padded window
    let tiny = volume((5, 8, 3), 4);
    let prob = predict_probabilities(&m, &tiny, &PromptSet::default(), ExecMode::Sequential).unwrap();
    assert_eq!(prob.dim(), (5, 8, 3));
    for (p, x) in prob.iter().zip(tiny.data()) {
        assert!((p - f(*x)).abs() < 1e-12);
    }
}

#[test]
fn window_layout() {
    assert_eq!(window_starts(16, 16), vec![0]);
    assert_eq!(window_starts(32, 16), vec![0, 8, 16]);
    assert_eq!(window_starts(20, 16), vec![0, 4]);
    assert_eq!(window_starts(5, 16), vec![0]);
    let w = gaussian_weights([8, 8, 8]);
    assert!(w.iter().all(|v| *v > 0.0));
}

#[test]
fn checkpoint_round_trip_and_tamper_detection() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = Model::new(small(), 17).unwrap();
    m.set_trainable_blocks(2).unwrap();
    let mut rng = crate::seed::rng(5);
    let _: u64 = rng.random();
    let prov = Provenance {
        kind: CheckpointKind::Pretrained,
        seed: 17,
        epoch: 3,
        step: 30,
        notes: vec![("variant".into(), "test".into())],
    };
    let ck = Checkpoint::new(&m, prov, Some(&rng));
    let path = dir.path().join("ck.json");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ck);
    let m2 = back.model().unwrap();
    assert_eq!(m2, m);
    let mut restored = back.rng.unwrap().restore().unwrap();
    assert_eq!(restored.random::<u64>(), rng.random::<u64>());

    let mut bad = ck.clone();
    bad.blocks[0].params[0].data[0] += 1e-12;
    assert!(bad.model().is_err());
    bad.save(&path).unwrap();
    assert!(Checkpoint::load(&path).is_err());
}
