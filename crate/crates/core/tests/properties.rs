use numkit::Rng;
use proptest::prelude::*;
use totokit::data::{
    generate_synthetic, preprocess_batch, BatchConfig, FreqUnit, Frequency, MultivariateSeries, ShuffleConfig,
    ShuffleMode, SynthConfig,
};
use totokit::scaler::{compute_causal_statistics, normalize_patches, ScalerConfig};
use totokit::smm::{robust_loss, MixtureParams};

fn series_strategy(max_len: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1..=max_len).prop_flat_map(|l| {
        (
            prop::collection::vec(-100.0f64..100.0, l),
            prop::collection::vec(prop::bool::weighted(0.8).prop_map(|b| if b { 1.0 } else { 0.0 }), l),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn statistics_ignore_the_future((x, w) in series_strategy(64), at in 0usize..64, bump in -50.0f64..50.0) {
        let t = at % x.len();
        let mut y = x.clone();
        y[t] += bump;
        let (m1, s1) = compute_causal_statistics(&[x], &[w.clone()], 0.1).unwrap();
        let (m2, s2) = compute_causal_statistics(&[y], &[w], 0.1).unwrap();
        prop_assert_eq!(&m1[0][..t], &m2[0][..t]);
        prop_assert_eq!(&s1[0][..t], &s2[0][..t]);
    }

    #[test]
    fn shifting_data_shifts_means((x, w) in series_strategy(64), c in -1e3f64..1e3) {
        let y: Vec<f64> = x.iter().map(|v| v + c).collect();
        let (m1, s1) = compute_causal_statistics(&[x], &[w.clone()], 0.1).unwrap();
        let (m2, s2) = compute_causal_statistics(&[y], &[w.clone()], 0.1).unwrap();
        let mut seen = false;
        for t in 0..w.len() {
            seen |= w[t] == 1.0;
            // Before the first observation the mean is pinned at 0.
            let expect = if seen { m1[0][t] + c } else { 0.0 };
            prop_assert!((m2[0][t] - expect).abs() <= 1e-9 * (1.0 + c.abs() + m1[0][t].abs()));
            prop_assert!((s2[0][t] - s1[0][t]).abs() <= 1e-7 * (1.0 + s1[0][t]));
        }
    }

    #[test]
    fn unfloored_scales_are_equivariant(
        x in prop::collection::vec(-10.0f64..10.0, 16),
        c in 0.01f64..100.0,
    ) {
        let cfg = ScalerConfig { minimum_scale: 0.0, kappa: f64::INFINITY, patch_size: 4, ..Default::default() };
        let w = vec![vec![1.0; 16]];
        let y: Vec<f64> = x.iter().map(|v| v * c).collect();
        let (n1, st1) = normalize_patches(&[x], &w, &cfg).unwrap();
        let (n2, st2) = normalize_patches(&[y], &w, &cfg).unwrap();
        for t in 0..16 {
            prop_assert!((st2.scales[0][t] - c * st1.scales[0][t]).abs() <= 1e-9 * c * (1.0 + st1.scales[0][t]));
            prop_assert!((n2[0][t] - n1[0][t]).abs() <= 1e-7 * (1.0 + n1[0][t].abs()));
        }
    }

    #[test]
    fn robust_loss_grows_with_the_residual(
        alpha in prop_oneof![Just(f64::NEG_INFINITY), Just(0.0), Just(2.0), -10.0f64..2.0],
        a in 0.0f64..50.0,
        b in 0.0f64..50.0,
        delta in 0.01f64..5.0,
    ) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let l_lo = robust_loss(lo, 0.0, alpha, delta).unwrap();
        let l_hi = robust_loss(-hi, 0.0, alpha, delta).unwrap();
        prop_assert!(l_lo <= l_hi + 1e-12 * l_hi.abs(), "alpha {alpha}: {l_lo} > {l_hi}");
    }

    #[test]
    fn synthetic_values_stay_in_range(seed in 0u64..1000, lo in -5.0f64..5.0, width in 0.1f64..20.0) {
        let cfg = SynthConfig {
            num_series: 2,
            num_variates: 2,
            length: 96,
            rescale_range: (lo, lo + width),
            seed,
            ..Default::default()
        };
        for s in generate_synthetic(&cfg).unwrap() {
            for v in s.values.iter().flatten() {
                prop_assert!(v.is_finite() && *v >= lo - 1e-9 && *v <= lo + width + 1e-9, "{v}");
            }
        }
    }

    #[test]
    fn packing_keeps_real_values_and_weight_mass(
        lens in prop::collection::vec((1usize..40, 1usize..4), 1..6),
        max_variates in 1usize..6,
        seed in 0u64..100,
    ) {
        let mut rng = Rng::new(seed);
        let series: Vec<MultivariateSeries> = lens
            .iter()
            .enumerate()
            .map(|(i, &(l, m))| {
                let values = (0..m).map(|_| (0..l).map(|_| rng.normal()).collect()).collect();
                MultivariateSeries::new(format!("s{i}"), Frequency::new(FreqUnit::Hour, 1), values).unwrap()
            })
            .collect();
        let cfg = BatchConfig {
            patch_size: 4,
            max_variates,
            random_offset: false,
            shuffle: ShuffleConfig { mode: ShuffleMode::Random, probability: 1.0 },
        };
        let items = preprocess_batch(&series, &cfg, None, &mut Rng::new(seed + 1)).unwrap();
        let rows_in: Vec<&Vec<f64>> = series.iter().flat_map(|s| s.values.iter()).collect();
        let mass_in: f64 = series.iter().flat_map(|s| s.weights.iter().flatten()).sum();
        let mut mass_out = 0.0;
        let mut matched = vec![false; rows_in.len()];
        for item in &items {
            prop_assert_eq!(item.len() % 4, 0);
            let n = item.num_variates();
            for i in 0..n {
                prop_assert!(item.id_mask.allowed(i, i));
                for j in 0..n {
                    prop_assert_eq!(item.id_mask.allowed(i, j), item.id_mask.allowed(j, i));
                    for k in 0..n {
                        if item.id_mask.allowed(i, j) && item.id_mask.allowed(j, k) {
                            prop_assert!(item.id_mask.allowed(i, k));
                        }
                    }
                }
            }
            for (row, w) in item.values.iter().zip(&item.weights) {
                mass_out += w.iter().sum::<f64>();
                let first = w.iter().position(|x| *x == 1.0).unwrap();
                prop_assert!(row[..first].iter().all(|x| *x == 0.0));
                let real = &row[first..];
                let hit = rows_in.iter().enumerate().position(|(k, r)| !matched[k] && r.as_slice() == real);
                prop_assert!(hit.is_some(), "a packed row matches no input variate");
                matched[hit.unwrap()] = true;
            }
        }
        prop_assert_eq!(mass_in, mass_out);
        prop_assert!(matched.iter().all(|m| *m));
    }
}

#[test]
fn log_density_is_finite_far_in_the_tails() {
    let mix = MixtureParams {
        pi: vec![0.5, 0.5],
        mu: vec![0.0, 3.0],
        tau: vec![f64::EPSILON, 1.0],
        nu: vec![2.0 + 1e-9, 50.0],
    };
    for x in [1e8, -1e8, 0.0, 3.0] {
        assert!(mix.log_prob(x).unwrap().is_finite(), "log_prob({x})");
    }
}
