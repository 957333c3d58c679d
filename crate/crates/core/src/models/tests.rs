use super::*;

fn mlp(variant: Variant, pb: usize, pr: usize, d: usize) -> ModelConfig {
    ModelConfig {
        backbone: Backbone::Mlp { hidden: 6 },
        ..ModelConfig::new(variant, pb, pr, d, 4)
    }
}

fn random_images(n: usize, cfg: &ModelConfig, seed: u64) -> Tensor {
    let e = cfg.image_extent;
    RandomSource::new(seed).uniform_tensor(&[n, cfg.channels, e, e], 0.0, 1.0)
}

/// Encoder output built from fixed tensors, for exercising the samplers.
fn fixed_output(g: &mut Graph, alpha_logits: &[f32], w_mu: Tensor, w_logvar: Tensor, pb: usize) -> EncoderOutput {
    let (b, d) = (w_mu.shape()[0], w_mu.shape()[1]);
    let logits = g.variable(Tensor::new(&[b, d], alpha_logits.to_vec()).unwrap());
    let c = CategoricalPosterior::from_logits(g, logits).unwrap();
    let zm = g.variable(Tensor::zeros(&[b, pb]));
    let zl = g.variable(Tensor::zeros(&[b, pb]));
    let wm = g.variable(w_mu);
    let wl = g.variable(w_logvar);
    EncoderOutput {
        z: DiagonalGaussian::new(g, zm, zl).unwrap(),
        w: Some(DiagonalGaussian::new(g, wm, wl).unwrap()),
        c,
    }
}

#[test]
fn zero_images_give_finite_outputs_of_declared_shape() {
    for variant in [Variant::Exact, Variant::Approx, Variant::Joint] {
        let pr = if variant == Variant::Joint { 0 } else { 3 };
        let cfg = ModelConfig::new(variant, 5, pr, 2, 32);
        let model = Model::new(cfg.clone(), &mut RandomSource::new(1)).unwrap();
        let mut g = Graph::new();
        let out = model.encode(&mut g, &Tensor::zeros(&[3, 1, 32, 32])).unwrap();
        assert_eq!(g.shape(out.z.mu), [3, 5]);
        assert_eq!(g.shape(out.c.probs), [3, 2]);
        match out.w {
            Some(w) => assert_eq!(g.shape(w.logvar), [3, 2, 3]),
            None => assert_eq!(variant, Variant::Joint),
        }
        let noise = LatentNoise::sample(&cfg, 3, &mut RandomSource::new(2));
        let sample = model.reparameterize(&mut g, &out, &noise).unwrap();
        let logits = model.decode(&mut g, &sample).unwrap();
        assert_eq!(g.shape(logits), [3, 1, 32, 32]);
        assert!(g.value(logits).is_finite());
    }
}

#[test]
fn conv_trunk_feeds_sixty_four_by_four_by_four_features() {
    for extent in [32, 64] {
        let model = Model::new(
            ModelConfig::new(Variant::Exact, 5, 3, 2, extent),
            &mut RandomSource::new(0),
        )
        .unwrap();
        assert_eq!(model.params().value("enc.fc.w").unwrap().shape(), [256, 64 * 4 * 4]);
        assert!(!model.params().get("enc.conv1b").is_some());
        assert_eq!(model.params().get("enc.conv1b.w").is_some(), extent == 64);
        assert_eq!(model.params().value("dec.priv.w").unwrap().shape(), [128, 2 * 3 + 2]);
        assert_eq!(model.params().value("dec.pub.w").unwrap().shape(), [128, 5]);
        assert_eq!(model.params().value("enc.w_mu.w").unwrap().shape(), [2 * 3, 256 + 2]);
    }
}

#[test]
fn approx_and_joint_decoder_input_widths() {
    let approx = Model::new(
        ModelConfig::new(Variant::Approx, 10, 3, 2, 32),
        &mut RandomSource::new(0),
    )
    .unwrap();
    assert_eq!(approx.params().value("dec.in.w").unwrap().shape(), [256, 10 + 3 + 2]);
    let joint = Model::new(
        ModelConfig::new(Variant::Joint, 10, 0, 10, 32),
        &mut RandomSource::new(0),
    )
    .unwrap();
    assert_eq!(joint.params().value("dec.in.w").unwrap().shape(), [256, 10 + 10]);
    assert!(joint.params().get("enc.w_mu.w").is_none());
}

#[test]
fn invalid_configs_are_rejected() {
    let mut rng = RandomSource::new(0);
    assert!(Model::new(ModelConfig::new(Variant::Exact, 5, 3, 1, 32), &mut rng).is_err());
    assert!(Model::new(ModelConfig::new(Variant::Joint, 5, 3, 2, 32), &mut rng).is_err());
    assert!(Model::new(ModelConfig::new(Variant::Approx, 5, 0, 2, 32), &mut rng).is_err());
    assert!(Model::new(ModelConfig::new(Variant::Exact, 5, 3, 2, 28), &mut rng).is_err());
    let model = Model::new(ModelConfig::new(Variant::Exact, 5, 3, 2, 32), &mut rng).unwrap();
    let err = model
        .encode(&mut Graph::new(), &Tensor::zeros(&[1, 1, 28, 28]))
        .unwrap_err();
    assert!(err.to_string().contains("28"), "{err}");
}

fn relu_linear(w: &Tensor, b: &Tensor, x: &[f64], relu: bool) -> Vec<f64> {
    let (out, inp) = (w.shape()[0], w.shape()[1]);
    (0..out)
        .map(|o| {
            let s = b.data()[o] as f64 + (0..inp).map(|i| w.data()[o * inp + i] as f64 * x[i]).sum::<f64>();
            if relu {
                s.max(0.0)
            } else {
                s
            }
        })
        .collect()
}

#[test]
fn exact_encoder_pass_i_conditions_on_e_i_and_keeps_block_i() {
    let (pb, pr, d) = (2, 2, 3);
    let model = Model::new(mlp(Variant::Exact, pb, pr, d), &mut RandomSource::new(4)).unwrap();
    let x = random_images(2, model.config(), 5);
    let mut g = Graph::new();
    let out = model.encode(&mut g, &x).unwrap();
    let got = g.value(out.w.unwrap().mu);
    let p = |n: &str| model.params().value(n).unwrap();
    for n in 0..2 {
        let xi: Vec<f64> = x.row(n).iter().map(|&v| v as f64).collect();
        let h = relu_linear(p("enc.fc.w"), p("enc.fc.b"), &xi, true);
        for i in 0..d {
            let mut inp = h.clone();
            inp.extend((0..d).map(|k| if k == i { 1.0 } else { 0.0 }));
            let all = relu_linear(p("enc.w_mu.w"), p("enc.w_mu.b"), &inp, false);
            for k in 0..pr {
                let want = all[i * pr + k];
                let have = got.data()[(n * d + i) * pr + k] as f64;
                assert!((want - have).abs() < 1e-5, "example {n} mode {i}: {have} vs {want}");
            }
        }
    }
}

#[test]
fn exact_selects_most_likely_mode_with_low_index_ties() {
    let mut g = Graph::new();
    let w_mu = Tensor::new(&[3, 2, 1], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let logits = [0.9f32.ln(), 0.1f32.ln(), 0.0, 0.0, -1.0, 1.0];
    let out = fixed_output(&mut g, &logits, w_mu, Tensor::zeros(&[3, 2, 1]), 1);
    let model = Model::new(mlp(Variant::Exact, 1, 1, 2), &mut RandomSource::new(0)).unwrap();
    let noise = LatentNoise::zeros(model.config(), 3);
    let s = model.reparam_exact(&mut g, &out, &noise).unwrap();
    assert_eq!(s.selected.as_deref(), Some(&[0, 0, 1][..]));
    assert_eq!(g.value(s.w.unwrap()).data(), &[1.0, 3.0, 6.0]);
    assert_eq!(g.value(s.discrete).data(), &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0]);
}

#[test]
fn exact_sample_has_zero_gradient_for_unselected_modes() {
    let mut g = Graph::new();
    let mut rng = RandomSource::new(9);
    let (b, d, p) = (4, 3, 2);
    let logits: Vec<f32> = (0..b * d).map(|_| rng.normal() as f32).collect();
    let out = fixed_output(
        &mut g,
        &logits,
        rng.normal_tensor(&[b, d, p]),
        rng.normal_tensor(&[b, d, p]),
        1,
    );
    let model = Model::new(mlp(Variant::Exact, 1, p, d), &mut RandomSource::new(0)).unwrap();
    let noise = LatentNoise::sample(model.config(), b, &mut rng);
    let s = model.reparam_exact(&mut g, &out, &noise).unwrap();
    let sq = g.square(s.w.unwrap()).unwrap();
    let loss = g.sum(sq).unwrap();
    let grads = g.backward(loss).unwrap();
    let q = out.w.unwrap();
    let selected = s.selected.unwrap();
    for var in [q.mu, q.logvar] {
        let grad = grads.get(var).unwrap();
        for n in 0..b {
            for i in 0..d {
                let block = &grad.data()[(n * d + i) * p..(n * d + i + 1) * p];
                if i == selected[n] {
                    assert!(block.iter().any(|&v| v != 0.0));
                } else {
                    assert!(block.iter().all(|&v| v == 0.0), "mode {i} of example {n}: {block:?}");
                }
            }
        }
    }
}

#[test]
fn mixing_matches_loop_oracle() {
    let mut rng = RandomSource::new(21);
    let (b, d, p) = (3, 4, 3);
    let mut g = Graph::new();
    let modes = rng.normal_tensor(&[b, d, p]);
    let weights = Tensor::from_fn(&[b, d], |_| rng.uniform() as f32);
    let mv = g.constant(modes.clone());
    let wv = g.constant(weights.clone());
    let mixed = mix_modes(&mut g, mv, wv).unwrap();
    for n in 0..b {
        for k in 0..p {
            let want: f64 = (0..d)
                .map(|i| weights.data()[n * d + i] as f64 * modes.data()[(n * d + i) * p + k] as f64)
                .sum();
            assert!((g.value(mixed).data()[n * p + k] as f64 - want).abs() < 1e-6);
        }
    }
}

#[test]
fn approx_mixture_matches_loop_oracle_and_one_hot_picks_a_mode() {
    let mut rng = RandomSource::new(3);
    let (b, d, p) = (2, 3, 2);
    let mu = rng.normal_tensor(&[b, d, p]);
    let lv = rng.normal_tensor(&[b, d, p]);
    let model = Model::new(mlp(Variant::Approx, 1, p, d), &mut RandomSource::new(0)).unwrap();
    let noise = LatentNoise::sample(model.config(), b, &mut rng);
    let eps = noise.w.clone().unwrap();

    let mut g = Graph::new();
    let logits: Vec<f32> = (0..b * d).map(|_| rng.normal() as f32).collect();
    let out = fixed_output(&mut g, &logits, mu.clone(), lv.clone(), 1);
    let s = model.reparam_approx(&mut g, &out, &noise).unwrap();
    let pi = g.value(s.discrete).clone();
    for n in 0..b {
        assert!((pi.row(n).iter().sum::<f32>() - 1.0).abs() < 1e-6);
        for k in 0..p {
            let want: f64 = (0..d)
                .map(|i| {
                    let at = (n * d + i) * p + k;
                    let sample = mu.data()[at] as f64 + (0.5 * lv.data()[at] as f64).exp() * eps.data()[at] as f64;
                    pi.data()[n * d + i] as f64 * sample
                })
                .sum();
            assert!((g.value(s.w.unwrap()).data()[n * p + k] as f64 - want).abs() < 1e-5);
        }
    }

    let one_hot_pi = g.constant(one_hot(&[2, 1], d));
    let s = model.reparam_with_weights(&mut g, &out, one_hot_pi, &noise).unwrap();
    for (n, j) in [(0, 2), (1, 1)] {
        for k in 0..p {
            let at = (n * d + j) * p + k;
            let want = mu.data()[at] + (0.5 * lv.data()[at]).exp() * eps.data()[at];
            assert_eq!(g.value(s.w.unwrap()).data()[n * p + k], want);
        }
    }
}

#[test]
fn identical_modes_with_shared_noise_make_w_independent_of_pi() {
    let (b, d, p) = (1, 3, 2);
    let mu = Tensor::new(&[b, d, p], [0.5, -1.0].repeat(d)).unwrap();
    let lv = Tensor::new(&[b, d, p], [0.2, -0.3].repeat(d)).unwrap();
    let eps = Tensor::new(&[b, d, p], [1.5, 0.25].repeat(d)).unwrap();
    let model = Model::new(mlp(Variant::Approx, 1, p, d), &mut RandomSource::new(0)).unwrap();
    let noise = LatentNoise {
        w: Some(eps),
        ..LatentNoise::zeros(model.config(), b)
    };
    let mut values = Vec::new();
    for logits in [[0.0, 0.0, 0.0], [3.0, -1.0, 0.5], [-2.0, 4.0, 0.0]] {
        let mut g = Graph::new();
        let out = fixed_output(&mut g, &logits, mu.clone(), lv.clone(), 1);
        let s = model.reparam_approx(&mut g, &out, &noise).unwrap();
        values.push(g.value(s.w.unwrap()).data().to_vec());
    }
    for v in &values[1..] {
        for (a, b) in v.iter().zip(&values[0]) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}

#[test]
fn exact_private_decoder_input_layout() {
    let mut g = Graph::new();
    let w = g.constant(Tensor::new(&[1, 2], vec![7.0, -3.0]).unwrap());
    let disc = g.constant(one_hot(&[1], 2));
    let layout = block_layout(&mut g, w, disc).unwrap();
    assert_eq!(g.value(layout).data(), &[0.0, 0.0, 7.0, -3.0, 0.0, 1.0]);
}

#[test]
fn approx_with_one_hot_pi_matches_exact_forward() {
    let mut rng = RandomSource::new(77);
    for variant in [Variant::Exact, Variant::Approx] {
        let cfg = ModelConfig::new(variant, 3, 2, 3, 32);
        let model = Model::new(cfg.clone(), &mut rng).unwrap();
        let x = random_images(4, &cfg, 8);
        let noise = LatentNoise::sample(&cfg, 4, &mut rng);

        let mut g = Graph::new();
        let out = model.encode(&mut g, &x).unwrap();
        let exact = model.reparam_exact(&mut g, &out, &noise).unwrap();
        let exact_logits = model.decode(&mut g, &exact).unwrap();
        let forced = g.constant(one_hot(exact.selected.as_ref().unwrap(), 3));
        let approx = model.reparam_with_weights(&mut g, &out, forced, &noise).unwrap();
        let approx_logits = model.decode(&mut g, &approx).unwrap();
        for (a, b) in g.value(exact_logits).data().iter().zip(g.value(approx_logits).data()) {
            assert!((a - b).abs() <= 1e-5);
        }
    }
}

#[test]
fn classify_is_argmax_with_low_ties_and_shift_invariant() {
    let mut model = Model::new(mlp(Variant::Joint, 2, 0, 10), &mut RandomSource::new(0)).unwrap();
    let x = random_images(2, model.config(), 1);
    let set_logits = |model: &mut Model, bias: Vec<f32>| {
        let p = model.params_mut();
        p.get_mut("enc.logits.w").unwrap().value.data_mut().fill(0.0);
        p.get_mut("enc.logits.b").unwrap().value = Tensor::new(&[10], bias).unwrap();
    };
    let mut bias = vec![0.0; 10];
    bias[3] = 50.0;
    set_logits(&mut model, bias.clone());
    assert_eq!(model.classify(&x).unwrap(), vec![3, 3]);
    set_logits(&mut model, vec![0.0; 10]);
    assert_eq!(model.classify(&x).unwrap(), vec![0, 0]);
    let mut rng = RandomSource::new(5);
    let random: Vec<f32> = (0..10).map(|_| rng.normal() as f32).collect();
    set_logits(&mut model, random.clone());
    let before = model.classify(&x).unwrap();
    set_logits(&mut model, random.iter().map(|v| v + 7.0).collect());
    assert_eq!(model.classify(&x).unwrap(), before);
}

/// Every (Pb, Pr, d) column of the published hyperparameter tables.
fn table_configs() -> Vec<ModelConfig> {
    let mut out = Vec::new();
    let discond = [
        (10, 3, 2),
        (8, 2, 2),
        (5, 3, 2),
        (3, 2, 2),
        (6, 2, 3),
        (4, 2, 3),
        (2, 2, 3),
        (10, 3, 10),
        (8, 2, 10),
        (4, 3, 10),
        (2, 2, 10),
    ];
    for (pb, pr, d) in discond {
        out.push(ModelConfig::new(Variant::Exact, pb, pr, d, 32));
        out.push(ModelConfig::new(Variant::Approx, pb, pr, d, 32));
    }
    for (pb, d) in [(10, 2), (5, 2), (6, 3), (4, 3), (10, 10), (4, 10)] {
        out.push(ModelConfig::new(Variant::Joint, pb, 0, d, 32));
    }
    out
}

#[test]
fn round_trip_shapes_for_every_table_configuration() {
    for cfg in table_configs() {
        let model = Model::new(cfg.clone(), &mut RandomSource::new(0)).unwrap();
        let mut g = Graph::new();
        let out = model.encode(&mut g, &random_images(2, &cfg, 1)).unwrap();
        let noise = LatentNoise::sample(&cfg, 2, &mut RandomSource::new(1));
        let s = model.reparameterize(&mut g, &out, &noise).unwrap();
        assert_eq!(g.shape(s.z), [2, cfg.public_dim]);
        if let Some(w) = s.w {
            assert_eq!(g.shape(w), [2, cfg.private_dim]);
        }
        let logits = model.decode(&mut g, &s).unwrap();
        assert_eq!(g.shape(logits), [2, 1, 32, 32], "{cfg:?}");
    }
}

#[test]
fn traversal_shapes_and_single_step_reconstruction() {
    let cfg = ModelConfig::new(Variant::Exact, 3, 2, 10, 32);
    let model = Model::new(cfg.clone(), &mut RandomSource::new(2)).unwrap();
    let x = random_images(2, &cfg, 3);
    let grid = model.traverse(&x, TraversalAxis::Public(1), 2.0, 7).unwrap();
    assert_eq!(grid.shape(), [2, 7, 1, 32, 32]);
    let grid = model.traverse(&x, TraversalAxis::Discrete, 2.0, 7).unwrap();
    assert_eq!(grid.shape(), [2, 10, 1, 32, 32]);

    let one = model.traverse(&x, TraversalAxis::Private(0), 2.0, 1).unwrap();
    let codes = model.encode_means(&x).unwrap();
    let classes = codes.classes();
    let w: Vec<f32> = (0..2)
        .flat_map(|n| codes.private_mode(n, classes[n]).unwrap().to_vec())
        .collect();
    let recon = model
        .decode_codes(
            codes.z_mu.clone(),
            Some(Tensor::new(&[2, 2], w).unwrap()),
            one_hot(&classes, 10),
        )
        .unwrap();
    for (a, &b) in one.data().iter().zip(recon.data()) {
        assert_eq!(*a, crate::tensor::sigmoid(b));
    }

    assert!(model.traverse(&x, TraversalAxis::Public(3), 2.0, 5).is_err());
    assert!(model.traverse(&x, TraversalAxis::Private(2), 2.0, 5).is_err());
    assert!(model.traverse(&x, TraversalAxis::Public(0), 2.0, 0).is_err());
}

#[test]
fn batched_means_match_single_pass() {
    let cfg = mlp(Variant::Approx, 2, 2, 3);
    let model = Model::new(cfg.clone(), &mut RandomSource::new(2)).unwrap();
    let x = random_images(7, &cfg, 3);
    let whole = model.encode_means(&x).unwrap();
    let batched = model.encode_means_batched(&x, 3).unwrap();
    assert_eq!(whole, batched);
}
