//! Degeneracy identities between the normalization layers and the
//! composed-layer contract.

use cnorm::{region_moments, FeatureMap, Mode, NormLayer, Pattern, SeededRng};

fn random_map(shape: [usize; 4], seed: u64, offset: f64, scale: f64) -> FeatureMap {
    let mut rng = SeededRng::new(seed);
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| offset + scale * rng.gen_symmetric(1.0))
        .collect();
    FeatureMap::new(shape, data).unwrap()
}

fn random_affine(layer: &mut NormLayer, seed: u64) {
    let mut rng = SeededRng::new(seed);
    layer
        .affine
        .gamma
        .iter_mut()
        .for_each(|g| *g = 1.0 + 0.5 * rng.gen_symmetric(1.0));
    layer
        .affine
        .beta
        .iter_mut()
        .for_each(|b| *b = 0.5 * rng.gen_symmetric(1.0));
}

fn assert_elementwise(a: &FeatureMap, b: &FeatureMap, tol: f64, what: &str) {
    assert_eq!(a.shape(), b.shape());
    for (i, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
        assert!(
            (x - y).abs() < tol,
            "{what}: element {i} differs: {x} vs {y}"
        );
    }
}

#[test]
fn group_norm_with_one_group_is_layer_norm() {
    for (seed, shape) in [(1u64, [3, 6, 2, 2]), (2, [2, 4, 1, 1]), (3, [5, 8, 3, 1])] {
        let x = random_map(shape, seed, 0.3, 1.2);
        let mut gn = NormLayer::group(shape[1], 1).unwrap();
        let mut ln = NormLayer::layer_norm(shape[1]);
        random_affine(&mut gn, seed + 100);
        random_affine(&mut ln, seed + 100);
        let a = gn.forward(&x, Mode::Train).unwrap();
        let b = ln.forward(&x, Mode::Train).unwrap();
        assert_elementwise(&a, &b, 1e-12, "GN(G=1) vs LN");
    }
}

#[test]
fn group_norm_with_channel_groups_is_instance_norm() {
    for (seed, shape) in [(4u64, [3, 6, 2, 2]), (5, [2, 4, 3, 3]), (6, [4, 8, 2, 1])] {
        let x = random_map(shape, seed, -0.2, 0.9);
        let mut gn = NormLayer::group(shape[1], shape[1]).unwrap();
        let mut inn = NormLayer::instance(shape[1]);
        random_affine(&mut gn, seed + 100);
        random_affine(&mut inn, seed + 100);
        let a = gn.forward(&x, Mode::Train).unwrap();
        let b = inn.forward(&x, Mode::Train).unwrap();
        assert_elementwise(&a, &b, 1e-12, "GN(G=C) vs IN");
    }
}

#[test]
fn renorm_with_degenerate_clipping_matches_batch_norm_form() {
    // r_max=1, d_max=0 force r=1, d=0; the documented convention keeps
    // (sigma + eps) in the denominator rather than sqrt(var + eps).
    let shape = [6, 3, 2, 2];
    let x = random_map(shape, 7, 0.1, 1.5);
    let mut brn = NormLayer::batch_renorm(3, 1.0, 0.0);
    random_affine(&mut brn, 77);
    let y = brn.forward(&x, Mode::Train).unwrap();

    let (mu, var) = region_moments(&x, Pattern::PerChannel).unwrap();
    let eps = brn.eps();
    for b in 0..shape[0] {
        for c in 0..shape[1] {
            for h in 0..shape[2] {
                for w in 0..shape[3] {
                    let want = brn.affine.gamma[c] * (x.at(b, c, h, w) - mu[c])
                        / (var[c].sqrt() + eps)
                        + brn.affine.beta[c];
                    assert!((y.at(b, c, h, w) - want).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn switch_with_one_hot_blend_matches_each_constituent() {
    let shape = [4, 6, 2, 2];
    let x = random_map(shape, 8, 0.4, 1.1);
    // logits of 60 give softmax weights within 1e-20 of one-hot
    let cases: [(usize, fn(usize) -> NormLayer); 3] = [
        (0, |c| NormLayer::batch(c)),
        (1, |c| NormLayer::layer_norm(c)),
        (2, |c| NormLayer::instance(c)),
    ];
    for (hot, make) in cases {
        let mut sn = NormLayer::switch(shape[1]);
        let mut reference = make(shape[1]);
        random_affine(&mut sn, 88);
        random_affine(&mut reference, 88);
        if let Some((m, v)) = sn.blend_logits_mut() {
            *m = [0.0; 3];
            *v = [0.0; 3];
            m[hot] = 60.0;
            v[hot] = 60.0;
        }
        let a = sn.forward(&x, Mode::Train).unwrap();
        let b = reference.forward(&x, Mode::Train).unwrap();
        assert_elementwise(&a, &b, 1e-10, "one-hot SN vs constituent");
        let ae = sn.forward(&x, Mode::Eval).unwrap();
        let be = reference.forward(&x, Mode::Eval).unwrap();
        assert_elementwise(&ae, &be, 1e-10, "one-hot SN vs constituent (eval)");
    }
}

#[test]
fn composed_layer_train_output_is_channel_standardized() {
    // identity affine, batch variance well above 0.1
    let shape = [8, 6, 3, 3];
    let x = random_map(shape, 9, 0.5, 2.0);
    let mut cn = NormLayer::continual(6, 3).unwrap();
    let y = cn.forward(&x, Mode::Train).unwrap();
    let (mu, var) = region_moments(&y, Pattern::PerChannel).unwrap();
    let (_, var_in) = region_moments(&x, Pattern::PerChannel).unwrap();
    assert!(
        var_in.iter().all(|&v| v > 0.1),
        "precondition: batch variance"
    );
    for c in 0..6 {
        assert!(mu[c].abs() < 1e-6, "channel {c} mean {}", mu[c]);
        assert!((var[c] - 1.0).abs() < 1e-3, "channel {c} var {}", var[c]);
    }
}

#[test]
fn composed_layer_eval_is_bitwise_per_sample() {
    let shape = [5, 6, 2, 2];
    let x = random_map(shape, 10, 0.0, 1.0);
    let mut cn = NormLayer::continual(6, 2).unwrap();
    random_affine(&mut cn, 11);
    // a few training steps to move the running stats somewhere nontrivial
    for step in 0..3 {
        let b = random_map(shape, 20 + step, 0.1, 1.3);
        cn.forward(&b, Mode::Train).unwrap();
    }
    let full = cn.forward(&x, Mode::Eval).unwrap();
    for b in 0..shape[0] {
        let one = FeatureMap::new(
            [1, shape[1], shape[2], shape[3]],
            x.data()[b * 6 * 4..(b + 1) * 6 * 4].to_vec(),
        )
        .unwrap();
        let solo = cn.forward(&one, Mode::Eval).unwrap();
        // bitwise: the per-sample computation must be identical
        assert_eq!(solo.data(), &full.data()[b * 6 * 4..(b + 1) * 6 * 4]);
    }
}

#[test]
fn composed_layer_parameter_count_equals_batch_norm() {
    for c in [8usize, 32, 100] {
        let bn = NormLayer::batch(c);
        let cn = NormLayer::continual(c, if c % 32 == 0 { 32 } else { 4 }).unwrap();
        assert_eq!(cn.param_count(), bn.param_count());
        assert_eq!(cn.param_count(), 2 * c);
    }
}

#[test]
fn eval_mode_outputs_are_finite_and_stable() {
    let shape = [3, 4, 2, 2];
    let x = random_map(shape, 12, 0.0, 1.0);
    let layers: Vec<NormLayer> = vec![
        NormLayer::batch(4),
        NormLayer::batch_renorm(4, 3.0, 5.0),
        NormLayer::group(4, 2).unwrap(),
        NormLayer::layer_norm(4),
        NormLayer::instance(4),
        NormLayer::switch(4),
        NormLayer::continual(4, 2).unwrap(),
    ];
    for mut layer in layers {
        layer.forward(&x, Mode::Train).unwrap();
        let a = layer.forward(&x, Mode::Eval).unwrap();
        let b = layer.forward(&x, Mode::Eval).unwrap();
        assert!(a.all_finite());
        assert_eq!(a.data(), b.data());
    }
}
