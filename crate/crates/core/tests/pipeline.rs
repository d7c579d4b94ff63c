use grasp_core::dataset::{load_dataset, GraspExample};
use grasp_core::geometry::angle_distance;
use grasp_core::heads::{decode_direct, direct_vector, sample_loss, train, HeadSpec, TrainJob};
use grasp_core::metrics::{rectangle_metric, MetricConfig};
use grasp_core::nn::{encode_checkpoint, Network, NetworkConfig, TrainConfig};
use grasp_core::preprocess::{augment_one, preprocess_test, source_image, AugmentConfig};
use grasp_core::synth::{generate_dataset, write_cornell_format, ShapeKind, SYNTH_VOCABULARY};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn desk_augment() -> AugmentConfig {
    AugmentConfig { crop_size: 80, max_translation: 8, output_size: 40, count_per_image: 4, ..Default::default() }
}

fn desk_train(epochs: usize) -> TrainConfig {
    TrainConfig { learning_rate: 0.01, batch_size: 16, epochs, seed: 1, ..Default::default() }
}

fn job<'a>(train_set: &'a [&'a GraspExample], cfg: TrainConfig, vocab: &'a [String]) -> TrainJob<'a> {
    let augment = desk_augment();
    TrainJob {
        network: NetworkConfig::tiny(augment.output_size, HeadSpec::Direct, cfg.dropout_keep),
        train: train_set,
        held_out: &[],
        vocabulary: vocab,
        train_config: cfg,
        augment,
        metric: MetricConfig::default(),
        fold: None,
    }
}

#[test]
fn synthetic_scenes_survive_the_file_format() {
    let scenes =
        generate_dataset(10, &[(ShapeKind::Bar, 1), (ShapeKind::Disc, 1), (ShapeKind::Ell, 1)], 128, 128, 21).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_cornell_format(&scenes, dir.path()).unwrap();
    let loaded = load_dataset(dir.path(), Some(&dir.path().join("labels.csv"))).unwrap();
    assert_eq!(loaded.summary.images, 10);
    assert_eq!(loaded.summary.objects, 10);
    assert_eq!(loaded.labels.as_ref().unwrap().vocabulary, SYNTH_VOCABULARY);

    let metric = MetricConfig::default();
    let cfg = desk_augment();
    for (orig, back) in scenes.iter().zip(&loaded.examples) {
        assert_eq!(orig.example_id, back.example_id);
        assert_eq!(orig.object_id, back.object_id);
        assert_eq!(orig.category, back.category);
        assert_eq!(orig.rgb, back.rgb);
        assert_eq!(orig.positive_grasps.len(), back.positive_grasps.len());
        for (a, b) in orig.positive_grasps.iter().zip(&back.positive_grasps) {
            assert!((a.x - b.x).abs() < 1e-3 && (a.y - b.y).abs() < 1e-3);
            assert!((a.h - b.h).abs() < 1e-3 && (a.w - b.w).abs() < 1e-3);
            assert!(angle_distance(a.theta, b.theta) < 1e-3);
        }
        for (i, d) in orig.depth.values.iter().enumerate() {
            if orig.depth.present[i] {
                assert!((back.depth.values[i] - d).abs() <= 1e-3 * d.abs().max(1.0));
            }
        }

        // encode every visible grasp for the network, decode, map back: all succeed
        let sample = preprocess_test(back, &source_image(back).unwrap(), &cfg);
        let size = cfg.output_size as f64;
        let inverse = sample.transform.inverse();
        assert!(!sample.grasps.is_empty());
        for g in &sample.grasps {
            let decoded = inverse.apply_rect(&decode_direct(&direct_vector(g, size), size));
            assert!(rectangle_metric(&back.example_id, &decoded, &back.positive_grasps, &metric).unwrap().success);
        }
    }
}

#[test]
fn training_is_deterministic() {
    let scenes = generate_dataset(8, &[(ShapeKind::Bar, 1)], 128, 128, 2).unwrap();
    let refs: Vec<&GraspExample> = scenes.iter().collect();
    let (a, ha) = train(&job(&refs, desk_train(2), &[])).unwrap();
    let (b, hb) = train(&job(&refs, desk_train(2), &[])).unwrap();
    assert_eq!(ha, hb);
    let bytes = |m: &grasp_core::heads::TrainedModel| encode_checkpoint(&m.network, &m.meta);
    assert_eq!(bytes(&a), bytes(&b));

    let other = TrainConfig { seed: 2, ..desk_train(2) };
    let (c, _) = train(&job(&refs, other, &[])).unwrap();
    assert_ne!(bytes(&a), bytes(&c));
}

#[test]
fn zero_epochs_returns_the_initial_network() {
    let scenes = generate_dataset(3, &[(ShapeKind::Disc, 1)], 128, 128, 2).unwrap();
    let refs: Vec<&GraspExample> = scenes.iter().collect();
    let j = job(&refs, desk_train(0), &[]);
    let (model, history) = train(&j).unwrap();
    assert!(history.is_empty());
    let fresh = Network::new(j.network.clone(), 1).unwrap();
    assert_eq!(model.network.params(), fresh.params());
}

/// Mean eval-mode direct-head loss over the augmented training samples, with
/// targets drawn from a fixed stream so two networks see identical targets.
fn training_set_loss(net: &Network, examples: &[&GraspExample], augment: &AugmentConfig, seed: u64) -> f64 {
    let size = augment.output_size as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let (mut total, mut n) = (0.0, 0);
    for ex in examples {
        let src = source_image(ex).unwrap();
        for k in 0..augment.count_per_image as u64 {
            let Ok(sample) = augment_one(ex, &src, augment, seed, k) else { continue };
            let out = net.forward_eval(&sample.image.to_chw()).unwrap().output;
            total += sample_loss(HeadSpec::Direct, &out, &sample.grasps, None, size, 1.0, &mut rng).unwrap().0;
            n += 1;
        }
    }
    total / n as f64
}

#[test]
fn desk_net_loss_drops_tenfold() {
    let scenes = generate_dataset(50, &[(ShapeKind::Bar, 1)], 128, 128, 6).unwrap();
    let refs: Vec<&GraspExample> = scenes.iter().collect();
    let j = job(&refs, desk_train(25), &[]);
    let initial = training_set_loss(&Network::new(j.network.clone(), 1).unwrap(), &refs, &j.augment, 1);
    let (model, history) = train(&j).unwrap();
    assert_eq!(history.iter().filter(|h| h.loss.is_some()).count(), 25);
    let last = training_set_loss(&model.network, &refs, &j.augment, 1);
    eprintln!("training-set loss {initial:.5} -> {last:.5} (ratio {:.2})", initial / last);
    assert!(last < initial / 10.0, "loss {initial} -> {last}");
}
