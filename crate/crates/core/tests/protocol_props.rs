use std::collections::BTreeSet;

use gapbench::protocol::{
    apply_split, make_splits, subsample_training_set, CategoryOrdering, SplitPhase, SplitSpec,
    SubsampleMode, SubsampleSpec,
};
use gapbench::{
    AnnotationId, BoundingBox, CategoryId, CategoryRecord, Dataset, ImageId, ImageRecord,
    InstanceAnnotation,
};
use proptest::prelude::*;

fn categories(ids: &[u64]) -> Vec<CategoryRecord> {
    ids.iter()
        .map(|&id| CategoryRecord {
            id: CategoryId(id),
            name: format!("c{id}"),
        })
        .collect()
}

#[test]
fn published_split_sizes_are_exact() {
    for (n, train) in [(20u64, 15usize), (80, 60), (365, 274), (1203, 902)] {
        let splits = make_splits(
            &categories(&(1..=n).collect::<Vec<_>>()),
            &SplitSpec::default(),
        )
        .unwrap();
        for s in &splits {
            let expected = n as usize - (n as usize + 3 - s.split_index) / 4;
            assert_eq!(
                s.train_category_ids.len(),
                expected,
                "n={n} split {}",
                s.split_index
            );
        }
        assert!(splits
            .iter()
            .all(|s| s.train_category_ids.len().abs_diff(train) <= 1));
        let at_published = splits
            .iter()
            .filter(|s| s.train_category_ids.len() == train)
            .count();
        assert!(
            at_published >= 3,
            "n={n}: most splits train on {train} categories"
        );
    }
}

/// Dataset over `n_cat` categories; image `i` holds `1 + (i * 7 + c) % 4`
/// instances of a few categories.
fn dataset(n_img: u64, n_cat: u64) -> Dataset {
    let images = (1..=n_img)
        .map(|i| ImageRecord {
            id: ImageId(i),
            width: 100,
            height: 100,
            file_name: None,
            pixels: None,
        })
        .collect();
    let mut annotations = Vec::new();
    for i in 1..=n_img {
        for c in [i % n_cat, (i * 3 + 1) % n_cat] {
            for k in 0..1 + (i * 7 + c) % 4 {
                annotations.push(InstanceAnnotation {
                    id: AnnotationId(annotations.len() as u64 + 1),
                    image_id: ImageId(i),
                    category_id: CategoryId(c + 1),
                    bbox: BoundingBox::new(k as f64 * 10.0, 0.0, 8.0, 8.0),
                    is_crowd: false,
                });
            }
        }
    }
    Dataset::new(
        images,
        annotations,
        categories(&(1..=n_cat).collect::<Vec<_>>()),
    )
    .unwrap()
}

proptest! {
    #[test]
    fn held_out_sets_partition_the_universe(
        ids in prop::collection::btree_set(1u64..10_000, 2..150),
        n_splits in 2usize..6,
        list_order in any::<bool>(),
    ) {
        let ids: Vec<u64> = ids.into_iter().collect();
        prop_assume!(ids.len() >= n_splits);
        let spec = SplitSpec {
            n_splits,
            ordering: if list_order { CategoryOrdering::ListOrder } else { CategoryOrdering::AscendingId },
        };
        let cats = categories(&ids);
        let splits = make_splits(&cats, &spec).unwrap();
        let universe: BTreeSet<CategoryId> = ids.iter().map(|&i| CategoryId(i)).collect();
        let mut seen = BTreeSet::new();
        for s in &splits {
            prop_assert!(s.heldout_category_ids.is_disjoint(&s.train_category_ids));
            prop_assert_eq!(s.universe(), universe.clone());
            for c in &s.heldout_category_ids {
                prop_assert!(seen.insert(*c), "category held out twice");
            }
        }
        prop_assert_eq!(seen, universe);
        let sizes: Vec<usize> = splits.iter().map(|s| s.heldout_category_ids.len()).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn training_phase_drops_every_heldout_annotation(n_img in 5u64..40, n_cat in 4u64..12, which in 0usize..4) {
        let ds = dataset(n_img, n_cat);
        let split = &make_splits(&ds.categories, &SplitSpec::default()).unwrap()[which];
        let train = apply_split(&ds, split, SplitPhase::Train).unwrap().dataset;
        prop_assert!(train.annotations.iter().all(|a| !split.is_heldout(a.category_id)));
        let annotated: BTreeSet<ImageId> = train.annotations.iter().map(|a| a.image_id).collect();
        prop_assert!(train.images.iter().all(|im| annotated.contains(&im.id)));
        let eval = apply_split(&ds, split, SplitPhase::Eval).unwrap().dataset;
        prop_assert_eq!(eval, ds);
    }

    #[test]
    fn instance_matched_sets_share_the_budget(
        n_img in 10u64..60,
        n_cat in 6u64..16,
        fraction in 0.1..1.0f64,
        seed in any::<u64>(),
        quota in any::<bool>(),
    ) {
        let ds = dataset(n_img, n_cat);
        let train_cats = ds.category_ids();
        let spec = |mode| SubsampleSpec { mode, fraction, seed, per_category_quota: quota };
        let cf = subsample_training_set(&ds, &train_cats, &spec(SubsampleMode::CategoryFraction)).unwrap();
        let sub = subsample_training_set(&ds, &train_cats, &spec(SubsampleMode::InstanceMatchedSubset)).unwrap();
        let all = subsample_training_set(&ds, &train_cats, &spec(SubsampleMode::InstanceMatchedAll)).unwrap();

        prop_assert_eq!(&cf.kept_categories, &sub.kept_categories);
        prop_assert_eq!(&cf.dataset, &sub.dataset);
        let expected = ((fraction * n_cat as f64) - 1e-9).ceil() as usize;
        prop_assert_eq!(sub.kept_categories.len(), expected);
        prop_assert_eq!(sub.dataset.annotations.len(), sub.instance_budget);
        prop_assert_eq!(all.dataset.annotations.len(), sub.instance_budget);
        prop_assert_eq!(all.instance_budget, sub.instance_budget);
        for d in [&sub.dataset, &all.dataset] {
            prop_assert!(d.annotations.iter().all(|a| ds.annotations.contains(a)));
            let annotated: BTreeSet<ImageId> = d.annotations.iter().map(|a| a.image_id).collect();
            prop_assert!(d.images.iter().all(|im| annotated.contains(&im.id)));
        }
        let again = subsample_training_set(&ds, &train_cats, &spec(SubsampleMode::InstanceMatchedAll)).unwrap();
        prop_assert_eq!(again.dataset, all.dataset);
    }
}

#[test]
fn quota_spreads_the_budget_over_categories() {
    let ds = dataset(60, 12);
    let spec = SubsampleSpec {
        mode: SubsampleMode::InstanceMatchedAll,
        fraction: 0.25,
        seed: 5,
        per_category_quota: true,
    };
    let all = subsample_training_set(&ds, &ds.category_ids(), &spec).unwrap();
    let mut counts = std::collections::BTreeMap::new();
    for a in &all.dataset.annotations {
        *counts.entry(a.category_id).or_insert(0usize) += 1;
    }
    let available = |c: CategoryId| ds.annotations.iter().filter(|a| a.category_id == c).count();
    let max = *counts.values().max().unwrap();
    for c in ds.category_ids() {
        let n = counts.get(&c).copied().unwrap_or(0);
        assert!(
            n == available(c) || n + 1 >= max,
            "category {c} got {n} of max {max}"
        );
    }
}
