mod common;

use std::sync::Arc;
use std::thread;

use common::{populated_store, tiny_png};
use wastesort::dataset::{
    largest_remainder, DatasetManifest, DatasetStore, ItemFilter, Source, Split, DATASET_MAGIC,
};
use wastesort::WasteCategory;
use proptest::prelude::*;

#[test]
fn reference_fixture_stats() {
    let dir = tempfile::tempdir().unwrap();
    let store = populated_store(dir.path(), [395, 427, 396]);
    let s = store.stats();
    assert_eq!(s.count("compost"), 396);
    assert_eq!(s.count("recycle"), 427);
    assert_eq!(s.count("trash"), 395);
    assert_eq!(s.total, 1218);
    assert_eq!(s.counts.iter().map(|(_, n)| n).sum::<usize>(), s.total);
}

#[test]
fn stratified_split_at_80_10_10() {
    let dir = tempfile::tempdir().unwrap();
    let store = populated_store(dir.path(), [100, 100, 100]);
    let m = store.assign_splits((0.8, 0.1, 0.1), 42).unwrap();
    for class in WasteCategory::ALL {
        let count = |split| m.items.iter().filter(|i| i.label == class && i.split == split).count();
        assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), (80, 10, 10));
    }
    assert_eq!(m.split_seed, Some(42));

    // persisted, deterministic, seed-sensitive
    let reopened = DatasetStore::open(dir.path()).unwrap();
    assert_eq!(*reopened.snapshot(), *m);
    let again = m.assign_splits((0.8, 0.1, 0.1), 42).unwrap();
    assert_eq!(again.items, m.items);
    let other = m.assign_splits((0.8, 0.1, 0.1), 43).unwrap();
    assert_ne!(other.items, m.items);
}

#[test]
fn contributions_stay_unassigned_until_resplit() {
    let dir = tempfile::tempdir().unwrap();
    let store = populated_store(dir.path(), [5, 5, 5]);
    store.assign_splits((0.6, 0.2, 0.2), 1).unwrap();
    let item = store.add_item(&tiny_png(10_000), "compost", "kitchen, dim", Source::UserContributed).unwrap();
    assert_eq!(item.split, Split::Unassigned);
    let f = ItemFilter { source: Some(Source::UserContributed), ..Default::default() };
    assert_eq!(store.list_items(&f), vec![item.clone()]);
    store.assign_splits((0.6, 0.2, 0.2), 1).unwrap();
    assert_ne!(store.get(&item.id).unwrap().split, Split::Unassigned);
}

#[test]
fn manifest_file_format() {
    let dir = tempfile::tempdir().unwrap();
    let store = populated_store(dir.path(), [1, 1, 1]);
    let text = std::fs::read_to_string(dir.path().join("manifest.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["magic"], DATASET_MAGIC);
    assert_eq!(v["format_version"], 1);
    assert_eq!(v["labels"], serde_json::json!(["trash", "recycle", "compost"]));
    assert_eq!(v["items"][0]["source"], "bundled");
    assert_eq!(v["items"][0]["split"], "unassigned");
    // content addressing: images/<2 hex>/<sha256>.png
    let item = &store.snapshot().items[0];
    assert_eq!(item.image, format!("images/{}/{}.png", &item.id[..2], item.id));
    assert_eq!(item.id.len(), 64);

    std::fs::write(dir.path().join("manifest.json"), text.replace("DWDATA", "NOPE")).unwrap();
    assert!(DatasetStore::open(dir.path()).is_err());
}

#[test]
fn readers_see_consistent_snapshots_during_writes() {
    let dir = tempfile::tempdir().unwrap();
    let store = Arc::new(DatasetStore::open(dir.path()).unwrap());
    let writers: Vec<_> = (0..4)
        .map(|w| {
            let store = Arc::clone(&store);
            thread::spawn(move || {
                for i in 0..25u32 {
                    // writers 0 and 1 share content to exercise idempotence
                    let index = if w < 2 { i } else { 1000 * w + i };
                    store.add_item(&tiny_png(index), "recycle", "", Source::UserContributed).unwrap();
                }
            })
        })
        .collect();
    let readers: Vec<_> = (0..4)
        .map(|_| {
            let store = Arc::clone(&store);
            thread::spawn(move || {
                let mut last = 0;
                for _ in 0..200 {
                    let snap = store.snapshot();
                    snap.validate().unwrap();
                    assert!(snap.items.len() >= last, "snapshot went backwards");
                    last = snap.items.len();
                    for item in &snap.items {
                        assert!(store.image_path(item).exists());
                    }
                }
            })
        })
        .collect();
    for h in writers.into_iter().chain(readers) {
        h.join().unwrap();
    }
    assert_eq!(store.stats().total, 25 + 50);
    let on_disk = DatasetStore::open(dir.path()).unwrap();
    assert_eq!(on_disk.stats().total, 75);
}

#[test]
fn listing_filters_intersect() {
    let dir = tempfile::tempdir().unwrap();
    let store = populated_store(dir.path(), [10, 10, 10]);
    let m = store.assign_splits((0.5, 0.2, 0.3), 9).unwrap();
    let f = ItemFilter::from_pairs([("split", "test"), ("label", "compost")]).unwrap();
    let got = m.list_items(&f);
    assert_eq!(got.len(), 3);
    assert!(got.iter().all(|i| i.split == Split::Test && i.label == WasteCategory::Compost));
    assert_eq!(m.list_items(&ItemFilter::default()).len(), 30);
    assert!(ItemFilter::from_pairs([("lighting", "dim")]).is_err());
}

fn synthetic_manifest(counts: [usize; 3]) -> DatasetManifest {
    let mut m = DatasetManifest::default();
    let mut n = 0;
    for (class, &count) in WasteCategory::ALL.iter().zip(&counts) {
        for _ in 0..count {
            let id = format!("{n:064x}");
            m.items.push(wastesort::dataset::DatasetItem {
                image: format!("images/{id}.png"),
                id,
                label: *class,
                metadata: String::new(),
                source: Source::Bundled,
                split: Split::Unassigned,
                created_at: chrono::DateTime::from_timestamp(n as i64, 0).unwrap(),
            });
            n += 1;
        }
    }
    m
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn split_is_a_stratified_partition(
        counts in prop::array::uniform3(3usize..60),
        a in 1u32..10, b in 1u32..10, c in 1u32..10,
        seed in any::<u64>(),
    ) {
        let total = (a + b + c) as f64;
        let ratios = (a as f64 / total, b as f64 / total, 1.0 - a as f64 / total - b as f64 / total);
        let m = synthetic_manifest(counts).assign_splits(ratios, seed).unwrap();
        prop_assert!(m.items.iter().all(|i| i.split != Split::Unassigned));
        for (class, &n) in WasteCategory::ALL.iter().zip(&counts) {
            let r = [ratios.0, ratios.1, ratios.2];
            for (split, ratio) in [Split::Train, Split::Val, Split::Test].iter().zip(r) {
                let got = m.items.iter().filter(|i| i.label == *class && i.split == *split).count();
                prop_assert!((got as f64 - ratio * n as f64).abs() <= 1.0);
            }
        }
    }

    #[test]
    fn largest_remainder_conserves(n in 0usize..1000, a in 0u32..10, b in 0u32..10, c in 1u32..10) {
        let t = (a + b + c) as f64;
        let sizes = largest_remainder(n, &[a as f64 / t, b as f64 / t, c as f64 / t]);
        prop_assert_eq!(sizes.iter().sum::<usize>(), n);
    }
}
