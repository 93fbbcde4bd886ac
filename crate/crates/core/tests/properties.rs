mod common;

use std::collections::HashSet;

use ndarray::Array2;
use proptest::prelude::*;

use hybridsolar::data::{balance_by_oversampling, stratified_split, verify_no_leakage, Partition, SampleRecord, SplitSpec};
use hybridsolar::evaluation::{binary_curves, roc_pr_auc};
use hybridsolar::optimization::{cross_entropy, focal_loss, FocalLossSpec, Reduction};
use hybridsolar::training::{assign_folds, mean_std};

use common::*;

fn logits_and_targets() -> impl Strategy<Value = (Array2<f64>, Vec<usize>)> {
    (1usize..10, 2usize..8).prop_flat_map(|(n, k)| {
        (
            prop::collection::vec(-20.0f64..20.0, n * k),
            prop::collection::vec(0..k, n),
        )
            .prop_map(move |(v, t)| (Array2::from_shape_vec((n, k), v).unwrap(), t))
    })
}

fn split_case() -> impl Strategy<Value = (Vec<usize>, usize, usize, u64)> {
    (
        prop::collection::vec(3usize..80, 2..7),
        50usize..=80,
        0usize..=20,
        any::<u64>(),
    )
        .prop_filter("test share positive", |(_, tr, va, _)| tr + va < 100)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn focal_gamma_zero_is_cross_entropy((z, t) in logits_and_targets()) {
        let spec = FocalLossSpec { gamma: 0.0, alpha: 1.0, reduction: Reduction::Mean };
        let f = focal_loss(&z, &t, &spec).unwrap();
        let oracle = ce_per_sample(&z, &t).iter().sum::<f64>() / t.len() as f64;
        prop_assert!((f - cross_entropy(&z, &t).unwrap()).abs() <= 1e-12);
        prop_assert!((f - oracle).abs() <= 1e-10 * oracle.abs().max(1.0));
    }

    #[test]
    fn focal_is_bounded_by_scaled_cross_entropy((z, t) in logits_and_targets(), gamma in 0.0f64..5.0, alpha in 0.01f64..1.0) {
        let spec = FocalLossSpec { gamma, alpha, reduction: Reduction::Sum };
        let f = focal_loss(&z, &t, &spec).unwrap();
        let ce: f64 = ce_per_sample(&z, &t).iter().sum();
        prop_assert!(f >= 0.0);
        prop_assert!(f <= alpha * ce + 1e-9);
    }

    #[test]
    fn loss_invariant_to_batch_and_class_permutation((z, t) in logits_and_targets(), seed in any::<u64>()) {
        use rand::{seq::SliceRandom, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let (n, k) = z.dim();
        let mut rows: Vec<usize> = (0..n).collect();
        let mut cols: Vec<usize> = (0..k).collect();
        rows.shuffle(&mut rng);
        cols.shuffle(&mut rng);
        // Column j of the permuted logits is old column cols[j].
        let zp = Array2::from_shape_fn((n, k), |(i, j)| z[[rows[i], cols[j]]]);
        let tp: Vec<usize> = rows.iter().map(|&r| cols.iter().position(|&c| c == t[r]).unwrap()).collect();
        let spec = FocalLossSpec::default();
        let a = focal_loss(&z, &t, &spec).unwrap();
        let b = focal_loss(&zp, &tp, &spec).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }

    #[test]
    fn auc_equals_mann_whitney(
        pairs in prop::collection::vec((0u8..16, any::<bool>()), 2..60),
    ) {
        let scores: Vec<f64> = pairs.iter().map(|(s, _)| *s as f64 / 15.0).collect();
        let positive: Vec<bool> = pairs.iter().map(|(_, p)| *p).collect();
        let p = positive.iter().filter(|&&b| b).count();
        let c = binary_curves(&scores, &positive, 0);
        if p == 0 || p == positive.len() {
            prop_assert!(c.auc.is_none());
        } else {
            let auc = c.auc.unwrap();
            prop_assert!((auc - mann_whitney_auc(&scores, &positive)).abs() <= 1e-9);
        }
    }

    #[test]
    fn per_class_auc_is_one_vs_rest(
        rows in prop::collection::vec((prop::collection::vec(0.0f64..1.0, 3), 0usize..3), 4..40),
    ) {
        let scores: Vec<Vec<f64>> = rows.iter().map(|(s, _)| s.clone()).collect();
        let labels: Vec<usize> = rows.iter().map(|(_, l)| *l).collect();
        let set = roc_pr_auc(&scores, &labels, 3).unwrap();
        for k in 0..3 {
            let s: Vec<f64> = scores.iter().map(|r| r[k]).collect();
            let y: Vec<bool> = labels.iter().map(|&l| l == k).collect();
            let defined = y.iter().any(|&b| b) && y.iter().any(|&b| !b);
            match set.per_class[k].auc {
                Some(a) => prop_assert!(defined && (a - mann_whitney_auc(&s, &y)).abs() <= 1e-9),
                None => prop_assert!(!defined),
            }
        }
    }

    #[test]
    fn split_is_exact_and_leak_free((counts, tr, va, seed) in split_case()) {
        let manifest = memory_manifest(&counts);
        let te = 100 - tr - va;
        let spec = SplitSpec::new(tr as f64 / 100.0, va as f64 / 100.0, te as f64 / 100.0, seed).unwrap();
        let splits = stratified_split(&manifest, &spec).unwrap();
        let ids: Vec<&str> = splits.train.iter().chain(&splits.val).chain(&splits.test)
            .map(|r| r.provenance_id.as_str()).collect();
        prop_assert_eq!(ids.len(), manifest.len());
        prop_assert_eq!(ids.iter().collect::<HashSet<_>>().len(), manifest.len());
        for (c, &n) in counts.iter().enumerate() {
            let got = (
                splits.class_counts(Partition::Train)[c],
                splits.class_counts(Partition::Val)[c],
                splits.class_counts(Partition::Test)[c],
            );
            prop_assert_eq!(got, split_sizes_pct(n, tr, va));
        }
        prop_assert_eq!(&stratified_split(&manifest, &spec).unwrap(), &splits);

        let target = counts.iter().max().unwrap() + 5;
        let balanced = balance_by_oversampling(&splits.train, target, seed).unwrap();
        let train_counts: Vec<usize> = (0..counts.len())
            .map(|c| balanced.iter().filter(|r| r.class_label == format!("class{c}")).count())
            .collect();
        prop_assert!(train_counts.iter().all(|&n| n == target));
        let derived: Vec<SampleRecord> = balanced.into_iter().filter(|r| r.is_derivative()).collect();
        let train_ids: HashSet<&str> = splits.train.iter().map(|r| r.provenance_id.as_str()).collect();
        prop_assert!(derived.iter().all(|d| train_ids.contains(d.origin_id.as_str())));
        prop_assert!(verify_no_leakage(&splits, &derived).pass);
    }

    #[test]
    fn folds_partition_and_balance(counts in prop::collection::vec(5usize..40, 2..6), k in 2usize..6, seed in any::<u64>()) {
        let manifest = memory_manifest(&counts);
        let folds = assign_folds(&manifest, k, seed).unwrap();
        prop_assert_eq!(folds.len(), k);
        let total: usize = folds.iter().map(|f| f.len()).sum();
        prop_assert_eq!(total, manifest.len());
        let sizes: Vec<usize> = folds.iter().map(|f| f.len()).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        for c in 0..counts.len() {
            let label = format!("class{c}");
            let per: Vec<usize> = folds.iter().map(|f| f.iter().filter(|r| r.class_label == label).count()).collect();
            prop_assert!(per.iter().max().unwrap() - per.iter().min().unwrap() <= 1);
        }
    }

    #[test]
    fn mean_std_is_population(xs in prop::collection::vec(-1.0f64..1.0, 1..20)) {
        let (m, s) = mean_std(&xs);
        let (om, os) = population_mean_std(&xs);
        prop_assert!((m - om).abs() <= 1e-12 && (s - os).abs() <= 1e-12);
    }
}

#[test]
fn fold_precondition_names_the_class() {
    let manifest = memory_manifest(&[10, 3]);
    let err = assign_folds(&manifest, 5, 0).unwrap_err().to_string();
    assert!(err.contains("class1"), "{err}");
}
