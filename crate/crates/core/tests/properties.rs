//! Property tests for the numeric invariants.

use cnorm::{
    acc, fm, la, reduce_mean_var, AccuracyMatrix, Average, Axis, FeatureMap, Mode, NormLayer,
    RunningStats,
};
use proptest::prelude::*;

fn small_map() -> impl Strategy<Value = FeatureMap> {
    (1usize..4, 1usize..5, 1usize..4, 1usize..4).prop_flat_map(|(b, c, h, w)| {
        let n = b * c * h * w;
        proptest::collection::vec(-3.0f64..3.0, n)
            .prop_map(move |data| FeatureMap::new([b, c, h, w], data).unwrap())
    })
}

proptest! {
    #[test]
    fn variance_equals_second_moment_identity(x in small_map()) {
        // var = mean(x^2) - mean(x)^2 within 1e-10, and var >= 0
        let axes = [Axis::Batch, Axis::Channel, Axis::Height, Axis::Width];
        let m = reduce_mean_var(&x, &axes).unwrap();
        let squared = FeatureMap::new(
            x.shape(),
            x.data().iter().map(|v| v * v).collect(),
        ).unwrap();
        let m2 = reduce_mean_var(&squared, &axes).unwrap();
        let alt = m2.mean[0] - m.mean[0] * m.mean[0];
        prop_assert!(m.var[0] >= 0.0);
        prop_assert!((m.var[0] - alt).abs() < 1e-10);
    }

    #[test]
    fn per_channel_reduction_matches_whole_for_single_channel(x in small_map()) {
        // reducing all axes equals reducing (B,H,W) then (C): consistency
        // between two algebraic routes at 1e-9
        let m_all = reduce_mean_var(&x, &[Axis::Batch, Axis::Channel, Axis::Height, Axis::Width]).unwrap();
        let m_bhw = reduce_mean_var(&x, &[Axis::Batch, Axis::Height, Axis::Width]).unwrap();
        let c = x.shape()[1] as f64;
        let mean_of_means = m_bhw.mean.iter().sum::<f64>() / c;
        prop_assert!((m_all.mean[0] - mean_of_means).abs() < 1e-9);
    }

    #[test]
    fn ema_update_is_a_contraction(
        mu0 in -5.0f64..5.0,
        mu_b in -5.0f64..5.0,
        eta in 0.01f64..1.0,
    ) {
        let mut stats = RunningStats::new(1, eta, Average::Ema);
        stats.mu[0] = mu0;
        stats.update(&[mu_b], &[1.0]);
        let before = (mu0 - mu_b).abs();
        let after = (stats.mu[0] - mu_b).abs();
        prop_assert!((after - (1.0 - eta) * before).abs() < 1e-12);
    }

    #[test]
    fn per_sample_layers_ignore_co_batched_samples(x in small_map(), extra in -3.0f64..3.0) {
        let [b, c, h, w] = x.shape();
        prop_assume!(b >= 2);
        let groups = if c % 2 == 0 { 2 } else { 1 };
        let layers: Vec<NormLayer> = vec![
            NormLayer::group(c, groups).unwrap(),
            NormLayer::layer_norm(c),
            NormLayer::instance(c),
        ];
        for mut layer in layers {
            let full = layer.forward(&x, Mode::Train).unwrap();
            // replace the last sample with something else entirely
            let mut other = x.clone();
            let per = c * h * w;
            let len = other.len();
            other.data_mut()[len - per..].iter_mut().for_each(|v| *v = extra);
            let altered = layer.forward(&other, Mode::Train).unwrap();
            // sample 0 unchanged
            prop_assert_eq!(&full.data()[..per], &altered.data()[..per]);
        }
    }

    #[test]
    fn forward_outputs_stay_finite(x in small_map()) {
        let c = x.shape()[1];
        let mut layers: Vec<NormLayer> = vec![
            NormLayer::batch(c),
            NormLayer::batch_renorm(c, 3.0, 5.0),
            NormLayer::layer_norm(c),
            NormLayer::instance(c),
            NormLayer::switch(c),
        ];
        if c % 2 == 0 {
            layers.push(NormLayer::group(c, 2).unwrap());
            layers.push(NormLayer::continual(c, 2).unwrap());
        }
        for mut layer in layers {
            let y = layer.forward(&x, Mode::Train).unwrap();
            prop_assert!(y.all_finite());
            let e = layer.forward(&x, Mode::Eval).unwrap();
            prop_assert!(e.all_finite());
        }
    }

    #[test]
    fn acc_decomposes_into_la_and_fm_for_diagonal_peaked_matrices(
        t in 2usize..6,
        raw in proptest::collection::vec(0.0f64..1.0, 36),
    ) {
        // build a matrix whose columns peak at the diagonal: entries below
        // the diagonal shrink toward zero monotonically
        let mut rows = Vec::new();
        let mut k = 0;
        for i in 0..t {
            let mut row = Vec::new();
            for j in 0..=i {
                let peak = raw[j * 6 + j % 6];
                let decay = 1.0 - 0.5 * ((i - j) as f64 / t as f64);
                row.push((peak * decay).clamp(0.0, 1.0));
                k += 1;
            }
            rows.push(row);
        }
        let _ = k;
        let m = AccuracyMatrix::from_rows(rows).unwrap();
        let acc_v = acc(&m);
        let la_v = la(&m);
        if let Some(fm_v) = fm(&m) {
            let reconstructed = la_v - fm_v * (t as f64 - 1.0) / t as f64;
            prop_assert!((acc_v - reconstructed).abs() < 1e-12,
                "acc {} vs la - fm (T-1)/T {}", acc_v, reconstructed);
        }
    }

    #[test]
    fn fm_is_non_positive_when_columns_never_degrade(
        t in 2usize..6,
        raw in proptest::collection::vec(0.0f64..0.2, 36),
    ) {
        // columns built non-decreasing
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for i in 0..t {
            let mut row = Vec::new();
            for j in 0..=i {
                let below = if i == j { 0.0 } else { rows[i - 1][j] };
                row.push((below + raw[i * 6 + j]).min(1.0));
            }
            rows.push(row);
        }
        let m = AccuracyMatrix::from_rows(rows).unwrap();
        prop_assert!(fm(&m).unwrap() <= 1e-12);
    }
}
