use std::collections::HashSet;

use atha_core::data::{container, gen_synthetic_domains, sample_episode, DataSpec, Dataset, Domain};
use atha_core::{Error, Tensor};
use proptest::prelude::*;

fn small(sigma: f64) -> DataSpec {
    DataSpec { n_classes: 6, images_per_class: 20, image_size: 16, sigma_shift: sigma, ..DataSpec::default() }
}

#[test]
fn same_seed_gives_bit_identical_datasets() {
    let (s1, t1) = gen_synthetic_domains(&small(0.8), 3).unwrap();
    let (s2, t2) = gen_synthetic_domains(&small(0.8), 3).unwrap();
    assert_eq!(s1, s2);
    assert_eq!(t1, t2);
    let (s3, _) = gen_synthetic_domains(&small(0.8), 4).unwrap();
    assert_ne!(s1.images, s3.images);
}

#[test]
fn zero_shift_target_equals_source() {
    let (s, t) = gen_synthetic_domains(&small(0.0), 1).unwrap();
    assert_eq!(s.images, t.images);
    assert_eq!(s.labels, t.labels);
    assert_eq!((s.domain, t.domain), (Domain::Source, Domain::Target));
}

#[test]
fn shift_outside_unit_interval_is_rejected() {
    for sigma in [-0.1, 1.5, f64::NAN] {
        assert!(matches!(gen_synthetic_domains(&small(sigma), 0), Err(Error::Config(_))));
    }
}

#[test]
fn five_way_one_shot_counts() {
    let (_, t) = gen_synthetic_domains(&small(0.5), 0).unwrap();
    let ep = sample_episode(&t, 5, 1, 15, 9).unwrap();
    assert_eq!(ep.support.samples.len(), 5);
    assert_eq!(ep.query.len(), 75);
    assert_eq!(ep, sample_episode(&t, 5, 1, 15, 9).unwrap());
}

#[test]
fn thousand_episodes_have_exact_per_class_counts_and_disjoint_sets() {
    let (_, t) = gen_synthetic_domains(&small(0.5), 2).unwrap();
    let (n, k, m) = (5, 3, 7);
    for seed in 0..1000 {
        let ep = sample_episode(&t, n, k, m, seed).unwrap();
        assert_eq!(ep.class_ids().len(), n);
        assert_eq!(ep.class_ids().iter().collect::<HashSet<_>>().len(), n);
        for label in 0..n {
            assert_eq!(ep.support.samples.iter().filter(|s| s.label == label).count(), k);
            assert_eq!(ep.query.iter().filter(|s| s.label == label).count(), m);
        }
        let support: HashSet<usize> = ep.support.samples.iter().map(|s| s.source_index).collect();
        let query: HashSet<usize> = ep.query.iter().map(|s| s.source_index).collect();
        assert_eq!(support.len(), n * k);
        assert_eq!(query.len(), n * m);
        assert!(support.is_disjoint(&query), "episode {seed}");
        for s in ep.support.samples.iter().chain(&ep.query) {
            assert_eq!(t.class_names[t.labels[s.source_index]], ep.class_ids()[s.label]);
            assert_eq!(&t.images[s.source_index], &s.image);
        }
    }
}

#[test]
fn insufficient_images_name_the_class() {
    let (_, t) = gen_synthetic_domains(&small(0.5), 0).unwrap();
    match sample_episode(&t, 5, 10, 15, 0) {
        Err(Error::Sampling { class, needed, available }) => {
            assert_eq!((class, needed, available), (0, 25, 20));
        }
        other => panic!("expected sampling error, got {other:?}"),
    }
}

#[test]
fn dataset_directory_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let (_, t) = gen_synthetic_domains(&small(0.3), 5).unwrap();
    t.save(dir.path()).unwrap();
    let back = Dataset::load(dir.path()).unwrap();
    assert_eq!(back, t);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["classes"].as_array().unwrap().len(), 6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn container_round_trip_is_bit_exact(
        dims in proptest::collection::vec(0usize..5, 0..4),
        seed in any::<u64>(),
    ) {
        let len: usize = dims.iter().product();
        let mut x = seed;
        let data: Vec<f64> = (0..len)
            .map(|_| {
                x = x.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                f64::from_bits(x)
            })
            .collect();
        let t = Tensor::new(dims, data).unwrap();
        let back = container::decode(&container::encode(&t).unwrap()).unwrap();
        prop_assert_eq!(back.shape(), t.shape());
        let bits = |v: &Tensor| v.data().iter().map(|f| f.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&back), bits(&t));
    }

    #[test]
    fn any_truncation_is_a_format_error(cut in 0usize..60) {
        let t = Tensor::new(vec![2, 3], vec![1.5; 6]).unwrap();
        let bytes = container::encode(&t).unwrap();
        let cut = cut.min(bytes.len() - 1);
        let is_format_error = matches!(container::decode(&bytes[..cut]), Err(Error::Format { .. }));
        prop_assert!(is_format_error);
    }
}
