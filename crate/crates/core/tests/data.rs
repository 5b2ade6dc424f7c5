mod common;

use common::{balanced_labels, max_tv_to_uniform, mean_top_share, rng, top_share};
use fedsparse::data::{dirichlet_partition, generate, split_train_val, PartitionSpec, SyntheticSpec};
use fedsparse::Error;
use fedsparse_tensor::{Adam, AdamConfig, Tape, Tensor};
use proptest::prelude::*;

#[test]
fn generation_is_deterministic_and_balanced() {
    let spec = SyntheticSpec::default();
    let a = generate(&spec, 3).unwrap();
    let b = generate(&spec, 3).unwrap();
    assert_eq!(a.images.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.images.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(a.labels, b.labels);
    assert_eq!(a.class_prompts, b.class_prompts);
    assert_eq!(a.len(), 1000);
    let all: Vec<usize> = (0..a.len()).collect();
    assert_eq!(a.class_counts(&all), vec![100; 10]);
    assert_ne!(generate(&spec, 4).unwrap().images, a.images);
}

#[test]
fn too_few_classes_is_an_error() {
    let spec = SyntheticSpec { num_classes: 1, ..Default::default() };
    assert!(matches!(generate(&spec, 0), Err(Error::Config { .. })));
    let spec = SyntheticSpec { num_classes: 10, per_class: 19, ..Default::default() };
    assert!(generate(&spec, 0).is_err());
}

#[test]
fn raw_pixels_are_linearly_separable() {
    let spec = SyntheticSpec::default();
    let data = generate(&spec, 0).unwrap();
    let d = spec.pixels_per_image();
    let k = spec.num_classes;
    let (train, test): (Vec<usize>, Vec<usize>) = (0..data.len()).partition(|i| i % 5 != 0);
    let mut w = Tensor::zeros(&[k, d]).with_requires_grad(true);
    let mut b = Tensor::zeros(&[k]).with_requires_grad(true);
    let mut opt = Adam::new(AdamConfig { learning_rate: 1e-2, weight_decay: 0.0, ..AdamConfig::default() });
    let (x, y) = data.gather(&train);
    let x = Tensor::new(vec![train.len(), d], x).unwrap();
    for _ in 0..100 {
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.leaf(&x), tape.leaf(&w), tape.leaf(&b));
        let logits = tape.linear(xv, wv, Some(bv)).unwrap();
        let loss = tape.cross_entropy(logits, &y).unwrap();
        let grads = tape.backward(loss).unwrap();
        w.zero_grad();
        b.zero_grad();
        grads.accumulate_into(&mut w).unwrap();
        grads.accumulate_into(&mut b).unwrap();
        opt.step([("w", &mut w), ("b", &mut b)]).unwrap();
    }
    let (xt, yt) = data.gather(&test);
    let mut tape = Tape::new();
    let xv = tape.leaf(&Tensor::new(vec![test.len(), d], xt).unwrap());
    let (wv, bv) = (tape.leaf(&w), tape.leaf(&b));
    let logits = tape.linear(xv, wv, Some(bv)).unwrap();
    let correct = tape
        .value(logits)
        .chunks(k)
        .zip(&yt)
        .filter(|(row, &label)| row.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0 == label)
        .count();
    let acc = correct as f64 / test.len() as f64;
    assert!(acc > 0.8, "held-out probe accuracy {acc}");
}

fn check_partition(parts: &[Vec<usize>], n: usize) {
    let mut seen = vec![false; n];
    for p in parts {
        assert!(!p.is_empty());
        for &i in p {
            assert!(!seen[i], "index {i} assigned twice");
            seen[i] = true;
        }
    }
    assert!(seen.iter().all(|&s| s), "some index unassigned");
}

#[test]
fn partitions_cover_the_dataset_disjointly() {
    let labels = balanced_labels(10, 100);
    for alpha in [0.1, 1.0, 10.0] {
        let parts = dirichlet_partition(&labels, 10, &PartitionSpec::new(10, alpha, 7)).unwrap();
        assert_eq!(parts.len(), 10);
        check_partition(&parts, labels.len());
    }
}

#[test]
fn huge_alpha_is_nearly_uniform() {
    let labels = balanced_labels(10, 100);
    for seed in 0..20 {
        let parts = dirichlet_partition(&labels, 10, &PartitionSpec::new(10, 1e6, seed)).unwrap();
        let tv = max_tv_to_uniform(&parts, &labels, 10);
        assert!(tv < 0.1, "seed {seed}: tv {tv}");
    }
}

#[test]
fn small_alpha_makes_some_client_dominated_by_one_class() {
    let labels = balanced_labels(10, 100);
    let hits = (0..20)
        .filter(|&seed| {
            let parts = dirichlet_partition(&labels, 10, &PartitionSpec::new(10, 0.1, seed)).unwrap();
            parts.iter().any(|p| top_share(p, &labels, 10) > 0.5)
        })
        .count();
    assert!(hits >= 18, "{hits}/20");
}

#[test]
fn skew_shrinks_as_alpha_grows() {
    let labels = balanced_labels(10, 100);
    let avg = |alpha: f64| -> f64 {
        (0..20)
            .map(|seed| mean_top_share(&dirichlet_partition(&labels, 10, &PartitionSpec::new(10, alpha, seed)).unwrap(), &labels, 10))
            .sum::<f64>()
            / 20.0
    };
    let (low, high) = (avg(0.1), avg(10.0));
    assert!(low > high, "α=0.1: {low}, α=10: {high}");
}

#[test]
fn non_positive_alpha_is_rejected() {
    let labels = balanced_labels(2, 10);
    for alpha in [0.0, -1.0, f64::NAN] {
        assert!(matches!(dirichlet_partition(&labels, 2, &PartitionSpec::new(2, alpha, 0)), Err(Error::Config { .. })));
    }
}

#[test]
fn validation_split_is_stratified_and_nonempty() {
    let labels = balanced_labels(3, 10);
    let idx: Vec<usize> = (0..30).collect();
    let (train, val) = split_train_val(&idx, &labels, 0.2, &mut rng(0));
    assert_eq!(val.len(), 6);
    assert_eq!(train.len(), 24);
    for c in 0..3 {
        assert_eq!(val.iter().filter(|&&i| labels[i] == c).count(), 2);
    }
    let (train, val) = split_train_val(&[0, 1], &labels, 0.2, &mut rng(0));
    assert_eq!((train.len(), val.len()), (1, 1));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn every_partition_is_complete_disjoint_and_conserves_mass(
        alpha in 0.05f64..100.0,
        n in 1usize..12,
        seed in 0u64..10_000,
        k in 2usize..6,
        per_class in 12usize..40,
    ) {
        let labels = balanced_labels(k, per_class);
        let parts = dirichlet_partition(&labels, k, &PartitionSpec::new(n, alpha, seed)).unwrap();
        prop_assert_eq!(parts.len(), n);
        check_partition(&parts, labels.len());
        for class in 0..k {
            let mean = parts.iter().map(|p| p.iter().filter(|&&i| labels[i] == class).count() as f64).sum::<f64>() / n as f64;
            prop_assert!((mean - per_class as f64 / n as f64).abs() < 1e-9);
        }
    }
}

#[test]
fn desk_model_learns_the_classes_centrally_within_200_steps() {
    use fedsparse::config::Method;
    use fedsparse::federation::{evaluate, initial_model, optimizer_config, train_classifier};

    for method in [Method::Fedms, Method::Ft] {
        let cfg = common::desk_config(method, 0);
        let data = generate(&cfg.synthetic_spec(), 0).unwrap();
        let (train, val) = split_train_val(&(0..data.len()).collect::<Vec<_>>(), &data.labels, 0.2, &mut rng(1));
        let mut model = initial_model(&cfg).unwrap();
        let mut opt_cfg = optimizer_config(&cfg);
        if method == Method::Ft {
            opt_cfg.learning_rate = 1e-3;
        }
        let mut opt = Adam::new(opt_cfg);
        let batch = cfg.federation.batch_size;
        let epochs = 200 / train.len().div_ceil(batch);
        assert!(epochs * train.len().div_ceil(batch) <= 200);
        train_classifier(&mut model, &mut opt, &mut rng(2), &data, &train, epochs, batch).unwrap();
        let acc = evaluate(&mut model, &data, &val).unwrap();
        assert!(acc > 0.85, "{method:?}: {acc}");
    }
}
