use deta::episodes::{
    corrupt_labels, episode_from_json, episode_to_json, generate_synthetic_episode, load_episode_file,
    resample_regions, save_episode_file, EpisodeShape, NoiseTag, SyntheticNoiseConfig,
};
use deta::{DetaError, TaskEpisode};
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn clean(seed: u64) -> TaskEpisode {
    generate_synthetic_episode(&EpisodeShape::default(), &SyntheticNoiseConfig::default(), seed).unwrap()
}

#[test]
fn corrupted_labels_are_uniform_over_wrong_classes() {
    // Offsets (wrong - truth) mod 5 should be uniform over {1, 2, 3, 4}.
    let mut counts = [0u64; 4];
    let base = clean(1);
    for trial in 0..10_000u64 {
        let ep = corrupt_labels(base.clone(), 0.3, trial).unwrap();
        for s in ep.support.iter().filter(|s| s.noise_tag == NoiseTag::LabelNoisy) {
            assert_ne!(s.label, s.ground_truth_label);
            counts[(s.label + 5 - s.ground_truth_label) % 5 - 1] += 1;
        }
    }
    let total: u64 = counts.iter().sum();
    assert_eq!(total, 10_000 * 15);
    let expected = total as f64 / 4.0;
    let stat: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let p = 1.0 - ChiSquared::new(3.0).unwrap().cdf(stat);
    assert!(p > 0.01, "chi-square {stat}, p = {p}, counts {counts:?}");
}

#[test]
fn corruption_preserves_everything_but_labels() {
    let base = clean(2);
    for ratio in [0.0, 0.1, 0.3, 0.5, 0.7, 1.0] {
        let ep = corrupt_labels(base.clone(), ratio, 9).unwrap();
        assert_eq!(ep.support.len(), base.support.len());
        assert_eq!(ep.queries, base.queries);
        for (a, b) in ep.support.iter().zip(&base.support) {
            assert_eq!(a.image_feature, b.image_feature);
            assert_eq!(a.region_features, b.region_features);
        }
        let noisy = ep.support.iter().filter(|s| s.noise_tag == NoiseTag::LabelNoisy).count();
        assert_eq!(noisy, (ratio * 50.0f64).round() as usize);
    }
}

#[test]
fn same_class_regions_are_more_similar() {
    let cos = |a: &[f64], b: &[f64]| deta::numerics::cosine_similarity(a, b).unwrap();
    let (mut same, mut ns, mut cross, mut nc) = (0.0, 0, 0.0, 0);
    for seed in 0..3 {
        let ep = clean(seed);
        let regions: Vec<(usize, usize, &Vec<f64>)> = ep
            .support
            .iter()
            .enumerate()
            .flat_map(|(i, s)| s.region_features.iter().map(move |r| (i, s.label, r)))
            .collect();
        for (a, &(ia, ca, ra)) in regions.iter().enumerate() {
            for &(ib, cb, rb) in &regions[a + 1..] {
                if ia == ib {
                    continue;
                }
                if ca == cb {
                    same += cos(ra, rb);
                    ns += 1;
                } else {
                    cross += cos(ra, rb);
                    nc += 1;
                }
            }
        }
    }
    assert!(ns >= 1000 && nc >= 1000);
    let (same, cross) = (same / ns as f64, cross / nc as f64);
    assert!(same > cross, "same-class {same} vs cross-class {cross}");
}

#[test]
fn generation_is_byte_reproducible() {
    let a = episode_to_json(&clean(17)).unwrap();
    let b = episode_to_json(&clean(17)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, episode_to_json(&clean(18)).unwrap());
}

#[test]
fn minimal_file_loads() {
    let text = r#"{"version":1,"feature_dim":2,"way":1,
        "support":[{"id":5,"label":0,"image_feature":[1.0,0.0],"regions":[[0.5,0.5]]}],
        "queries":[]}"#;
    let ep: TaskEpisode = episode_from_json(text).unwrap();
    assert_eq!(ep.num_support(), 1);
    assert_eq!(ep.support[0].sample_id, 5);
    assert_eq!(ep.support[0].noise_tag, NoiseTag::Clean);
}

#[test]
fn wrong_region_dimension_names_the_sample() {
    let text = r#"{"version":1,"feature_dim":2,"way":2,
        "support":[{"id":1,"label":0,"image_feature":[1.0,0.0],"regions":[[1.0,0.0]]},
                   {"id":42,"label":1,"image_feature":[0.0,1.0],"regions":[[0.0,1.0],[1.0,2.0,3.0]]}],
        "queries":[]}"#;
    match episode_from_json::<f64>(text) {
        Err(DetaError::SchemaError(msg)) => assert!(msg.contains("42"), "{msg}"),
        other => panic!("expected schema error, got {other:?}"),
    }
}

#[test]
fn schema_and_parse_errors() {
    let unknown_key = r#"{"version":1,"feature_dim":1,"way":1,"colour":"red",
        "support":[{"id":0,"label":0,"image_feature":[1.0],"regions":[[1.0]]}],"queries":[]}"#;
    assert!(matches!(episode_from_json::<f64>(unknown_key), Err(DetaError::SchemaError(_))));
    let bad_class = r#"{"version":1,"feature_dim":1,"way":1,
        "support":[{"id":0,"label":3,"image_feature":[1.0],"regions":[[1.0]]}],"queries":[]}"#;
    assert!(matches!(episode_from_json::<f64>(bad_class), Err(DetaError::SchemaError(_))));
    let bad_version = r#"{"version":2,"feature_dim":1,"way":1,"support":[],"queries":[]}"#;
    assert!(matches!(episode_from_json::<f64>(bad_version), Err(DetaError::SchemaError(_))));
    assert!(matches!(episode_from_json::<f64>("{not json"), Err(DetaError::ParseError(_))));
}

#[test]
fn save_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ep.json");
    let noise = SyntheticNoiseConfig {
        label_noise_ratio: 0.3,
        image_noise_ratio: 0.2,
        ..Default::default()
    };
    let ep: TaskEpisode = generate_synthetic_episode(&EpisodeShape::default(), &noise, 3).unwrap();
    save_episode_file(&ep, &path).unwrap();
    let back: TaskEpisode = load_episode_file(&path).unwrap();
    assert_eq!(back, ep.with_stored_regions());
}

#[test]
fn stored_resampling_varies_across_iterations() {
    let shape = EpisodeShape {
        k_regions: 12,
        ..Default::default()
    };
    let ep: TaskEpisode = generate_synthetic_episode(&shape, &SyntheticNoiseConfig::default(), 4)
        .unwrap()
        .with_stored_regions();
    let mut same = 0;
    let trials = 200;
    for seed in 0..trials {
        let a = resample_regions(&ep, 2, 0.0, seed, 0).unwrap();
        let b = resample_regions(&ep, 2, 0.0, seed, 1).unwrap();
        if a == b {
            same += 1;
        }
        assert!(a.iter().all(|rs| rs.len() == 2));
    }
    // 50 samples each drawing 2 of 12: identical draws are astronomically rare.
    assert_eq!(same, 0);
    let too_many = resample_regions(&ep, 13, 0.0, 0, 0);
    assert!(matches!(too_many, Err(DetaError::InvalidParameter(_))));
    let one = resample_regions(&ep, 1, 0.0, 0, 0).unwrap();
    assert!(one.iter().all(|rs| rs.len() == 1));
}

#[test]
fn f32_episodes_are_supported() {
    let ep: deta::TaskEpisodeF32 =
        generate_synthetic_episode(&EpisodeShape::default(), &SyntheticNoiseConfig::default(), 1).unwrap();
    let text = episode_to_json(&ep).unwrap();
    let back: deta::TaskEpisodeF32 = episode_from_json(&text).unwrap();
    assert_eq!(back, ep.with_stored_regions());
}
