use feddes::datagen::{exdir_partition, generate_gaussian_mixture, ExDirConfig, GaussianMixture};
use feddes::ensemble::{decide, effective_ensemble_size, vote};
use feddes::graphbuild::{gain_scores, top_classifiers, weighted_neighborhood, DecisionSpace, STABILITY_EPSILON};
use feddes::numkernel::{softmax, Matrix};
use proptest::prelude::*;

fn simplex_rows(n: usize, m: usize, c: usize) -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<usize>)> {
    (
        prop::collection::vec(prop::collection::vec(0.01f64..1.0, m * c), n),
        prop::collection::vec(0..c, n),
    )
        .prop_map(move |(raw, labels)| {
            let rows = raw
                .into_iter()
                .map(|r| {
                    r.chunks(c)
                        .flat_map(|b| {
                            let s: f64 = b.iter().sum();
                            b.iter().map(move |v| v / s).collect::<Vec<_>>()
                        })
                        .collect()
                })
                .collect();
            (rows, labels)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_is_a_distribution(v in prop::collection::vec(-50.0f64..50.0, 1..12)) {
        let p = softmax(&v);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
        let shifted: Vec<f64> = v.iter().map(|x| x + 7.5).collect();
        let q = softmax(&shifted);
        prop_assert!(p.iter().zip(&q).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn neighbor_weights_sum_to_one_and_gains_cancel((rows, labels) in simplex_rows(14, 4, 3), target in 0usize..14) {
        let space = DecisionSpace::new(Matrix::from_rows(&rows).unwrap(), labels, 3).unwrap();
        let candidates: Vec<usize> = (0..14).collect();
        let hood = weighted_neighborhood(&space, &candidates, space.probs.row(target), Some(target), 5, STABILITY_EPSILON);
        let flat = hood.flat();
        prop_assert!(flat.iter().all(|&(i, w)| i != target && w >= 0.0));
        prop_assert!((flat.iter().map(|p| p.1).sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!((hood.class_mass.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let (gain, loss) = gain_scores(&space, &flat);
        prop_assert!(gain.iter().sum::<f64>().abs() < 1e-12);
        prop_assert!(loss.iter().all(|&l| l >= 0.0));
        let top = top_classifiers(&gain, &loss, 3);
        prop_assert_eq!(top.len(), 3);
        prop_assert!((top.iter().map(|p| p.1).sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(top.iter().all(|p| p.1 > 0.0));
    }

    #[test]
    fn selection_weights_and_ess(logits in prop::collection::vec(-6.0f64..6.0, 1..10), preds_seed in 0usize..1000) {
        let s = decide(&logits);
        prop_assert!((s.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let ess = effective_ensemble_size(&s.weights);
        prop_assert!(ess <= s.size() as f64 + 1e-9);
        prop_assert!(ess >= 1.0 - 1e-9);
        if !s.fallback {
            prop_assert!(s.weights.iter().zip(&s.selected).all(|(&w, &sel)| sel == (w > 0.0)));
        }
        let preds: Vec<usize> = (0..logits.len()).map(|m| (preds_seed + 7 * m) % 3).collect();
        let (label, mass) = vote(&s.weights, &preds, 3);
        prop_assert!((mass.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(mass.iter().all(|&m| m <= mass[label]));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn partition_covers_every_row_once(seed in 0u64..1000, alpha in 0.3f64..10.0, cpc in 1usize..=3) {
        let data = generate_gaussian_mixture(
            &GaussianMixture { classes: 3, features: 2, per_class: 60, separation: 1.0 },
            seed,
        ).unwrap();
        let cfg = ExDirConfig { classes_per_client: cpc, alpha, seed };
        let Ok(p) = exdir_partition(&data, &cfg, 4) else {
            // a rejected draw is allowed; it must be reproducible
            prop_assert!(exdir_partition(&data, &cfg, 4).is_err());
            return Ok(());
        };
        let mut seen = vec![0usize; data.len()];
        for split in &p.splits {
            for i in split.all() {
                seen[i] += 1;
            }
        }
        prop_assert!(seen.iter().all(|&n| n == 1));
        for (k, split) in p.splits.iter().enumerate() {
            let mut idx = p.client_indices(k);
            idx.sort_unstable();
            prop_assert_eq!(split.all(), idx);
            prop_assert!(split.all().iter().all(|&i| p.client_classes[k].contains(&data.labels()[i])));
        }
        for a in &p.allocations {
            prop_assert!((a.proportions.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(a.proportions.iter().all(|&v| v >= 0.0));
        }
        prop_assert_eq!(exdir_partition(&data, &cfg, 4).unwrap(), p);
    }
}
