use proptest::prelude::*;
use salb_core::distributions::{cross_modal_dist, disentangle_negatives, mix_targets, one_hot_targets, RowDistributions};
use salb_core::gradcheck::{backward, evaluate, LossSelector, RawInputs};
use salb_core::harness::spearman;
use salb_core::numkit::{gaussian_matrix, stable_row_softmax};
use salb_core::objectives::{softclip_total, LossConfig};
use salb_core::{EmbeddingBatch, Seed, Temperature, Temperatures};

fn unit(n: usize, d: usize, seed: Seed) -> EmbeddingBatch {
    EmbeddingBatch::normalize(&gaussian_matrix(n, d, seed)).unwrap()
}

fn row_sums_one<D: RowDistributions>(m: &D, tol: f64) -> bool {
    m.as_matrix().row_iter().all(|r| (r.iter().sum::<f64>() - 1.0).abs() <= tol && r.iter().all(|&x| x >= 0.0))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn distributions_stay_stochastic(seed in any::<u64>(), n in 2usize..24, d in 1usize..12, tau in 0.01f64..1.0, beta in 0.0f64..=1.0) {
        let s = Seed(seed);
        let p = cross_modal_dist(&unit(n, d, s.derive(0)), &unit(n, d, s.derive(1)), Temperature::from_tau(tau)).unwrap();
        prop_assert!(row_sums_one(&p, 1e-12));
        let m = mix_targets(&one_hot_targets(n).unwrap(), &p, beta).unwrap();
        prop_assert!(row_sums_one(&m, 1e-12));
        let soft = stable_row_softmax(&gaussian_matrix(n, n, s.derive(2)));
        prop_assert!(row_sums_one(&disentangle_negatives(&soft).unwrap(), 1e-12));
    }

    #[test]
    fn losses_are_finite_and_nonnegative(seed in any::<u64>(), n in 2usize..12, d in 2usize..10) {
        let s = Seed(seed);
        let [v, t, r, a] = [0, 1, 2, 3].map(|i| unit(n, d, s.derive(i)));
        let b = softclip_total(&v, &t, &r, &a, &Temperatures::shared(Temperature::from_tau(0.07)), &LossConfig::default()).unwrap();
        for x in [b.clip, b.soft, b.soft_re, b.total] {
            prop_assert!(x.is_finite() && x >= -1e-9);
        }
    }

    #[test]
    fn backward_value_matches_forward(seed in any::<u64>(), n in 2usize..8, d in 2usize..8, pick in 0usize..5) {
        let selector = LossSelector::ALL[pick];
        let inputs = RawInputs::random(n, d, Seed(seed));
        let temps = Temperatures::shared(Temperature::from_tau(0.07));
        let cfg = LossConfig { gamma: 0.5, ..LossConfig::default() };
        let (value, _) = backward(selector, &inputs, &temps, &cfg).unwrap();
        let forward = evaluate(selector, &inputs, &temps, &cfg).unwrap();
        prop_assert!((value - forward).abs() <= 1e-12 * (1.0 + forward.abs()));
    }

    #[test]
    fn spearman_is_bounded_and_rank_invariant(xs in prop::collection::vec(-1e3f64..1e3, 3..40)) {
        let ys: Vec<f64> = xs.iter().map(|x| x * x * x + 2.0).collect();
        let rho = spearman(&xs, &ys);
        prop_assert!((-1.0..=1.0).contains(&rho));
        let distinct = xs.iter().enumerate().all(|(i, a)| xs[..i].iter().all(|b| a != b));
        if distinct {
            prop_assert!((rho - 1.0).abs() < 1e-12);
        }
    }
}
