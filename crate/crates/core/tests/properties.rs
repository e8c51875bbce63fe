use ndarray::Array2;
use noisylab_core::labels::{ClassWeights, NoiseProfile};
use noisylab_core::losses::{noise_regularized_loss, weighted_bce, correlation_regularized_loss, CorrelationPrior};
use noisylab_core::synth::{inject_noise, NoiseTarget};
use proptest::prelude::*;

fn matrices(f: usize, d: usize) -> impl Strategy<Value = (Array2<f64>, Array2<u8>, Array2<bool>)> {
    (
        proptest::collection::vec(0.0f64..=1.0, f * d),
        proptest::collection::vec(0u8..2, f * d),
        proptest::collection::vec(any::<bool>(), f * d),
    )
        .prop_map(move |(p, y, m)| {
            (
                Array2::from_shape_vec((f, d), p).unwrap(),
                Array2::from_shape_vec((f, d), y).unwrap(),
                Array2::from_shape_vec((f, d), m).unwrap(),
            )
        })
}

fn weights(d: usize) -> ClassWeights {
    ClassWeights::from_counts((1..=d).collect(), (1..=d).rev().collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn losses_are_finite_and_non_negative((p, y, m) in matrices(6, 4), lambda in 0.0f64..2.0) {
        let w = weights(4);
        let noise = NoiseProfile::from_rates(
            (0..4).map(|n| format!("c{n}")).collect(), vec![0.3; 4], vec![0.95; 4], lambda).unwrap();
        let prior = CorrelationPrior::new(Array2::from_elem((4, 4), 0.2)).unwrap();
        for l in [
            weighted_bce(p.view(), y.view(), &w, m.view()).unwrap(),
            noise_regularized_loss(p.view(), y.view(), &w, &noise, m.view()).unwrap(),
            correlation_regularized_loss(p.view(), y.view(), &w, &prior, m.view()).unwrap(),
        ] {
            prop_assert!(l.value.is_finite() && l.value >= 0.0);
            let g = l.grad_abnormality.unwrap();
            prop_assert!(g.iter().all(|v| v.is_finite()));
            for ((i, n), &owned) in m.indexed_iter() {
                if !owned {
                    prop_assert_eq!(g[[i, n]], 0.0);
                }
            }
        }
    }

    #[test]
    fn noise_prior_is_linear_in_lambda((p, y, m) in matrices(5, 3), lambda in 0.01f64..3.0) {
        let w = weights(3);
        let names: Vec<String> = (0..3).map(|n| format!("c{n}")).collect();
        let profile = |l| NoiseProfile::from_rates(names.clone(), vec![0.2, 0.5, 0.8], vec![0.9, 0.95, 0.99], l).unwrap();
        let base = weighted_bce(p.view(), y.view(), &w, m.view()).unwrap().value;
        let one = noise_regularized_loss(p.view(), y.view(), &w, &profile(1.0), m.view()).unwrap().value - base;
        let scaled = noise_regularized_loss(p.view(), y.view(), &w, &profile(lambda), m.view()).unwrap().value - base;
        prop_assert!((scaled - lambda * one).abs() <= 1e-9 * (1.0 + scaled.abs()));
    }

    #[test]
    fn noise_injection_preserves_shape_and_extremes(
        bits in proptest::collection::vec(0u8..2, 12),
        seed in any::<u64>(),
    ) {
        let labels = Array2::from_shape_vec((4, 3), bits).unwrap();
        let keep = vec![NoiseTarget { sensitivity: 1.0, specificity: 1.0 }; 3];
        prop_assert_eq!(&inject_noise(&labels, &keep, seed).unwrap(), &labels);
        let flip = vec![NoiseTarget { sensitivity: 0.0, specificity: 0.0 }; 3];
        let flipped = inject_noise(&labels, &flip, seed).unwrap();
        prop_assert!(flipped.iter().zip(labels.iter()).all(|(a, b)| a + b == 1));
    }

    #[test]
    fn noise_only_flips_toward_the_channel(
        bits in proptest::collection::vec(0u8..2, 40),
        seed in any::<u64>(),
    ) {
        // perfect specificity: a true negative can never become positive
        let labels = Array2::from_shape_vec((20, 2), bits).unwrap();
        let targets = vec![NoiseTarget { sensitivity: 0.4, specificity: 1.0 }; 2];
        let noisy = inject_noise(&labels, &targets, seed).unwrap();
        prop_assert!(noisy.iter().zip(labels.iter()).all(|(n, t)| *n <= *t));
        prop_assert_eq!(inject_noise(&labels, &targets, seed).unwrap(), noisy);
    }
}
