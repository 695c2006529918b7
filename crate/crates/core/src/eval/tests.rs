use super::*;
use crate::episodes::generate_synthetic;
use crate::model::ModelConfig;

fn desk_model(seed: u64) -> Model {
    Model::init(ModelConfig::desk(16, 2, 8).unwrap(), seed).unwrap()
}

#[test]
fn argmax_examples() {
    assert_eq!(argmax(&[0.1, 0.9, 0.3]), Some(1));
    assert_eq!(argmax(&[0.5, 0.5]), Some(0));
    assert_eq!(argmax(&[f64::NAN, 0.2]), Some(1));
    assert_eq!(argmax(&[]), None);
}

#[test]
fn ties_go_to_lowest_class_not_lowest_position() {
    let p = predict_from_scores(&[3, 1, 2], vec![0.4, 0.4, 0.1]).unwrap();
    assert_eq!(p.class, 1);
    assert!(predict_from_scores(&[], vec![]).is_err());
}

#[test]
fn interval_examples() {
    let ci = confidence_interval(&[0.5, 0.5, 0.5]).unwrap();
    assert_eq!((ci.mean, ci.halfwidth, ci.degenerate), (0.5, 0.0, false));
    let ci = confidence_interval(&[0.0, 1.0]).unwrap();
    assert_eq!(ci.mean, 0.5);
    assert!((ci.halfwidth - 1.96 * 0.5f64.sqrt() / 2f64.sqrt()).abs() < 1e-15);
    assert!((ci.halfwidth - 0.98).abs() < 1e-12);
    let ci = confidence_interval(&[0.7]).unwrap();
    assert_eq!((ci.mean, ci.halfwidth, ci.degenerate), (0.7, 0.0, true));
    let ci = confidence_interval(&[1.0; 40]).unwrap();
    assert_eq!((ci.mean, ci.halfwidth), (1.0, 0.0));
    assert!(confidence_interval(&[]).is_err());
}

#[test]
fn constant_classifier_scores_chance_exactly() {
    let ds = generate_synthetic(8, 6, 16, 3).unwrap();
    let settings = EvalSettings {
        episodes: 50,
        q_queries: 2,
        ..EvalSettings::default()
    };
    let report = evaluate(&ds, &ConstantClassifier { label: 2 }, &settings).unwrap();
    assert_eq!(report.episode_count, 50);
    assert!(report.per_episode_accuracy.iter().all(|&a| a == 0.2));
    assert!((report.mean_accuracy - 0.2).abs() < 1e-15);
    assert!(report.ci95_halfwidth < 1e-15);
    assert_eq!(report.summary(), "acc=0.200000 ci95=0.000000 episodes=50");
    assert_eq!(report.to_csv().lines().count(), 51);
}

#[test]
fn single_episode_is_flagged_degenerate() {
    let ds = generate_synthetic(5, 3, 16, 3).unwrap();
    let settings = EvalSettings {
        episodes: 1,
        q_queries: 1,
        ..EvalSettings::default()
    };
    let report = evaluate(&ds, &ConstantClassifier::default(), &settings).unwrap();
    assert!(report.ci_degenerate);
    assert_eq!(report.ci95_halfwidth, 0.0);
}

#[test]
fn evaluation_is_deterministic_across_thread_counts_and_read_only() {
    let ds = generate_synthetic(6, 5, 16, 1).unwrap();
    let model = desk_model(4);
    let before = model.params().checksum();
    let settings = EvalSettings {
        n_way: 3,
        q_queries: 2,
        episodes: 12,
        seed: 9,
        ..EvalSettings::default()
    };
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| evaluate(&ds, &model, &settings).unwrap())
    };
    let one = run(1);
    let four = run(4);
    assert_eq!(one.per_episode_accuracy, four.per_episode_accuracy);
    assert_eq!(one.to_csv(), four.to_csv());
    assert_eq!(model.params().checksum(), before);
}

#[test]
fn mean_score_matches_mean_representation_for_one_shot() {
    let ds = generate_synthetic(6, 4, 16, 2).unwrap();
    let model = desk_model(5);
    let ep = sample_episode(&ds, 4, 1, 2, 0).unwrap();
    let a = model
        .classify_episode(&ep, ShotAggregation::MeanRepresentation)
        .unwrap();
    let b = model.classify_episode(&ep, ShotAggregation::MeanScore).unwrap();
    assert_eq!(a, b);
}

#[test]
fn classify_query_is_label_equivariant_and_monotone_invariant() {
    let ds = generate_synthetic(5, 3, 16, 8).unwrap();
    let model = desk_model(6);
    let mut scorer = model.scorer().unwrap();
    let grids: Vec<ObjectGrid> = ds
        .classes()
        .iter()
        .map(|c| scorer.embed(&c.images[0].pixels).unwrap())
        .collect();
    let query = scorer.embed(&ds.classes()[2].images[1].pixels).unwrap();
    let reps: Vec<(usize, ObjectGrid)> = grids.iter().cloned().enumerate().collect();
    let base = classify_query(&mut scorer, &reps, &query).unwrap();
    assert_eq!(base.scores.len(), 5);
    assert!(base.scores.iter().all(|&s| s > 0.0 && s < 1.0));

    let relabel = [3, 0, 4, 1, 2];
    let permuted: Vec<(usize, ObjectGrid)> = reps
        .iter()
        .rev()
        .map(|(c, g)| (relabel[*c], g.clone()))
        .collect();
    let moved = classify_query(&mut scorer, &permuted, &query).unwrap();
    assert_eq!(moved.class, relabel[base.class]);

    let classes: Vec<usize> = (0..5).collect();
    for f in [|s: f64| s.ln(), |s: f64| 3.0 * s - 7.0, |s: f64| s.powi(3)] {
        let mapped = base.scores.iter().map(|&s| f(s)).collect();
        assert_eq!(predict_from_scores(&classes, mapped).unwrap().class, base.class);
    }
}

#[test]
fn aggregation_names_round_trip() {
    for a in [ShotAggregation::MeanRepresentation, ShotAggregation::MeanScore] {
        assert_eq!(a.to_string().parse::<ShotAggregation>().unwrap(), a);
    }
    assert!("mode".parse::<ShotAggregation>().is_err());
}
