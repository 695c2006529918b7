use std::collections::BTreeSet;
use std::fs;

use super::*;

fn synthetic(n: usize, per: usize) -> Dataset {
    generate_synthetic(n, per, 16, 7).unwrap()
}

#[test]
fn five_way_one_shot_with_fifteen_queries() {
    let ds = synthetic(10, 20);
    let ep = sample_episode(&ds, 5, 1, 15, 1).unwrap();
    assert_eq!(ep.support.len(), 5);
    assert_eq!(ep.query.len(), 75);
    assert_eq!(ep.class_names.len(), 5);
    for label in 0..5 {
        assert_eq!(ep.shots(label).len(), 1);
        assert_eq!(ep.query.iter().filter(|q| q.label == label).count(), 15);
    }
}

#[test]
fn exhaustive_way_uses_every_class_once() {
    let ds = synthetic(6, 4);
    let ep = sample_episode(&ds, 6, 2, 1, 3).unwrap();
    let names: BTreeSet<&str> = ep.class_names.iter().map(String::as_str).collect();
    assert_eq!(names.len(), 6);
    assert_eq!(names, ds.class_names(Split::Train));
}

#[test]
fn seeds_reproduce_and_differ() {
    let ds = synthetic(10, 20);
    let ids = |seed| {
        let ep = sample_episode(&ds, 5, 1, 3, seed).unwrap();
        ep.support
            .iter()
            .chain(&ep.query)
            .map(|i| i.image_id)
            .collect::<Vec<_>>()
    };
    assert_eq!(ids(42), ids(42));
    let base = ids(0);
    let differing = (1..=100).filter(|&s| ids(s) != base).count();
    assert!(differing >= 99, "only {differing} of 100 seeds changed the episode");
}

#[test]
fn support_and_query_never_share_images() {
    let ds = synthetic(8, 10);
    for seed in 0..50 {
        let ep = sample_episode(&ds, 4, 3, 5, seed).unwrap();
        let s: BTreeSet<u64> = ep.support.iter().map(|i| i.image_id).collect();
        let q: BTreeSet<u64> = ep.query.iter().map(|i| i.image_id).collect();
        assert_eq!(s.len(), ep.support.len());
        assert_eq!(q.len(), ep.query.len());
        assert!(s.is_disjoint(&q));
        let labels: BTreeSet<usize> = ep.support.iter().map(|i| i.label).collect();
        assert_eq!(labels, (0..4).collect());
        let names: BTreeSet<&String> = ep.class_names.iter().collect();
        assert_eq!(names.len(), 4);
    }
}

#[test]
fn insufficient_data_reports_counts() {
    let ds = synthetic(3, 4);
    let err = sample_episode(&ds, 5, 1, 1, 0).unwrap_err().to_string();
    assert!(err.contains("need 5 classes") && err.contains("has 3"), "{err}");
    let err = sample_episode(&ds, 2, 2, 3, 0).unwrap_err().to_string();
    assert!(err.contains("has 4 images") && err.contains("need 5"), "{err}");
}

#[test]
fn synthetic_counts_and_determinism() {
    let a = synthetic(10, 20);
    assert_eq!(a.len(), 10);
    assert_eq!(a.image_count(), 200);
    assert_eq!(a.class_names(Split::Train).len(), 10);
    let b = synthetic(10, 20);
    for (ca, cb) in a.classes().iter().zip(b.classes()) {
        assert_eq!(ca.name, cb.name);
        for (ia, ib) in ca.images.iter().zip(&cb.images) {
            assert!(ia.pixels.bit_eq(&ib.pixels));
        }
    }
    assert!(generate_synthetic(2, 2, 8, 0).is_err());
}

#[test]
fn raw_pixel_nearest_neighbour_beats_chance() {
    let ds = synthetic(10, 20);
    let mut correct = 0;
    let mut total = 0;
    for seed in 0..100 {
        let ep = sample_episode(&ds, 5, 1, 3, seed).unwrap();
        for q in &ep.query {
            let dist = |s: &EpisodeItem| {
                s.image
                    .data()
                    .iter()
                    .zip(q.image.data())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
            };
            let best = ep
                .support
                .iter()
                .min_by(|a, b| dist(a).total_cmp(&dist(b)))
                .unwrap();
            correct += usize::from(best.label == q.label);
            total += 1;
        }
    }
    let acc = correct as f64 / total as f64;
    assert!(acc > 0.3, "pixel 1-NN accuracy {acc}");
}

#[test]
fn split_assignment_and_rotation_classes() {
    let ds = synthetic(10, 5).assign_splits(6, 2, 2).unwrap();
    let counts = ds.split_counts();
    assert_eq!(counts[&Split::Train], 6);
    assert_eq!(counts[&Split::Val], 2);
    assert_eq!(counts[&Split::Test], 2);
    ds.check_disjoint().unwrap();
    assert!(synthetic(10, 5).assign_splits(6, 2, 1).is_err());

    let rotated = ds.with_rotation_classes(&Rotation::ALL).unwrap();
    assert_eq!(rotated.len(), 40);
    assert_eq!(rotated.split(Split::Test).len(), 8);
    let train = rotated.class_names(Split::Train);
    let test = rotated.class_names(Split::Test);
    assert!(train.is_disjoint(&test));
    let base = &rotated.classes()[0];
    let quarter = &rotated.classes()[1];
    assert_eq!(quarter.name, format!("{}@90", ds.classes()[0].name));
    assert!(rotate(&base.images[0].pixels, Rotation::R90)
        .unwrap()
        .bit_eq(&quarter.images[0].pixels));
}

#[test]
fn training_stats_standardize_training_split() {
    let ds = synthetic(6, 5).assign_splits(4, 1, 1).unwrap();
    let stats = ds.training_stats().unwrap();
    let std = ds.standardized(&stats).unwrap();
    let train = std.split(Split::Train);
    let values: Vec<f64> = train
        .classes()
        .iter()
        .flat_map(|c| &c.images)
        .flat_map(|i| i.pixels.data().to_vec())
        .collect();
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / values.len() as f64;
    assert!(mean.abs() < 1e-9);
    assert!((var - 1.0).abs() < 1e-9);
}

#[test]
fn manifest_parsing() {
    let m = parse_manifest("a\ttrain\n# note\n\nb\tval\nc\ttest\n").unwrap();
    assert_eq!(m.len(), 3);
    assert_eq!(m["b"], Split::Val);
    assert!(parse_manifest("a\ttrain\na\ttest\n").is_err());
    assert!(parse_manifest("a train\n").is_err());
    assert!(parse_manifest("a\tholdout\n").is_err());
}

#[test]
fn directory_round_trip_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().join("data");
    let ds = synthetic(10, 3).assign_splits(6, 2, 2).unwrap();
    assert_eq!(write_dataset(&ds, &root).unwrap(), 30);
    let manifest = root.join(MANIFEST_NAME);
    let loaded = load_dataset(&root, &manifest, 16, 1).unwrap();
    assert_eq!(loaded.len(), 10);
    assert_eq!(loaded.split(Split::Train).len(), 6);
    assert_eq!(loaded.split(Split::Val).len(), 2);
    assert_eq!(loaded.split(Split::Test).len(), 2);
    let a = &ds.classes()[0].images[0].pixels;
    let b = &loaded.classes()[0].images[0].pixels;
    assert!(a.max_abs_diff(b) <= 0.5 / 255.0 + 1e-12);

    let resized = load_dataset(&root, &manifest, 20, 1).unwrap();
    assert_eq!(resized.image_shape().unwrap(), &[20, 20, 1]);
    let rgb = load_dataset(&root, &manifest, 16, 3).unwrap();
    assert_eq!(rgb.image_shape().unwrap(), &[16, 16, 3]);

    let both = root.join("both.tsv");
    let mut text = format_manifest(&ds);
    text.push_str("glyph_00\ttest\n");
    fs::write(&both, text).unwrap();
    assert!(load_dataset(&root, &both, 16, 1).unwrap_err().to_string().contains("both"));

    let unknown = root.join("unknown.tsv");
    fs::write(&unknown, format_manifest(&ds) + "ghost\ttrain\n").unwrap();
    assert!(load_dataset(&root, &unknown, 16, 1).unwrap_err().to_string().contains("ghost"));

    let bad = root.join("glyph_01").join("9999.png");
    fs::write(&bad, b"not a png").unwrap();
    let err = load_dataset(&root, &manifest, 16, 1).unwrap_err();
    assert!(matches!(&err, crate::Error::Image { path, .. } if path.ends_with("9999.png")), "{err}");
}
