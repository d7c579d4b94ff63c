use grasp_core::geometry::{angle_distance, GraspRect};
use grasp_core::grid::{decode_predictions, encode_targets, multigrasp_loss, CHANNELS};
use grasp_core::heads::{decode_direct, decode_output, direct_vector, HeadSpec};
use grasp_core::nn::{LayerSpec, Mode, Network, NetworkConfig};
use grasp_core::preprocess::{augment_one, mean_center, sample_seed, source_image, AugmentConfig, RgdImage};
use grasp_core::synth::{generate_dataset, ShapeKind};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

fn same_grasp(a: &GraspRect, b: &GraspRect, tol: f64) -> bool {
    (a.x - b.x).abs() < tol
        && (a.y - b.y).abs() < tol
        && (a.h - b.h).abs() < tol
        && (a.w - b.w).abs() < tol
        && angle_distance(a.theta, b.theta) < tol
}

/// Up to five grasps in distinct cells of an `n`-grid over `size` pixels.
fn grid_case(rng: &mut ChaCha8Rng, n: usize, size: f64) -> Vec<GraspRect> {
    let cell = size / n as f64;
    let count = rng.gen_range(1..=5.min(n * n));
    let mut cells: Vec<usize> = (0..n * n).collect();
    let mut out = Vec::new();
    for _ in 0..count {
        let c = cells.swap_remove(rng.gen_range(0..cells.len()));
        let (row, col) = ((c / n) as f64, (c % n) as f64);
        let x = (col + rng.gen_range(0.01..0.99)) * cell;
        let y = (row + rng.gen_range(0.01..0.99)) * cell;
        out.push(GraspRect::new(x, y, rng.gen_range(0.0..180.0), rng.gen_range(2.0..60.0), rng.gen_range(2.0..90.0)).unwrap());
    }
    out
}

#[test]
fn grid_round_trip_recovers_sets() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..200 {
        let n = [1, 2, 3, 5, 7][case % 5];
        let grasps = grid_case(&mut rng, n, 224.0);
        let t = encode_targets(&grasps, n, 224.0, &mut rng).unwrap();
        let decoded = decode_predictions(&t.values, n, 224.0).unwrap();
        let hot: Vec<GraspRect> = decoded.iter().filter(|r| r.confidence == 1.0).map(|r| r.grasp).collect();
        assert_eq!(hot.len(), grasps.len(), "case {case}");
        for g in &grasps {
            assert!(hot.iter().any(|d| same_grasp(d, g, 1e-6)), "case {case}: {g:?} lost");
        }
    }
}

#[test]
fn one_cell_grid_matches_direct_head() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..50 {
        let g = grid_case(&mut rng, 1, 224.0)[0];
        let t = encode_targets(&[g], 1, 224.0, &mut rng).unwrap();
        let d = direct_vector(&g, 224.0);
        // grid channels: heat, x, y, sin, cos, h, w; direct: x, y, h, w, sin, cos
        let v = &t.values;
        let regrouped = [v[1], v[2], v[5], v[6], v[3], v[4]];
        for (a, b) in regrouped.iter().zip(&d) {
            assert!((a - b).abs() < 1e-12);
        }
        let via_grid = decode_predictions(v, 1, 224.0).unwrap()[0].grasp;
        let via_direct = decode_direct(&d, 224.0);
        assert!(same_grasp(&via_grid, &via_direct, 1e-9));
        assert!(same_grasp(&via_grid, &g, 1e-6));
    }
}

#[test]
fn direct_encode_decode_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..500 {
        let g = GraspRect::new(
            rng.gen_range(0.0..224.0),
            rng.gen_range(0.0..224.0),
            rng.gen_range(0.0..180.0),
            rng.gen_range(1.0..100.0),
            rng.gen_range(1.0..150.0),
        )
        .unwrap();
        let v = direct_vector(&g, 224.0);
        assert!(same_grasp(&decode_direct(&v, 224.0), &g, 1e-6));
        let p = decode_output(HeadSpec::Direct, &v, 224.0).unwrap();
        assert!(same_grasp(&p.top(), &g, 1e-6));
    }
}

proptest! {
    #[test]
    fn masked_entries_do_not_move_the_loss(seed in any::<u64>(), bump in -1e6f64..1e6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grasps = grid_case(&mut rng, 4, 96.0);
        let t = encode_targets(&grasps, 4, 96.0, &mut rng).unwrap();
        let pred: Vec<f64> = (0..t.values.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (base, _) = multigrasp_loss(&pred, &t).unwrap();
        let masked_out: Vec<usize> = (0..t.mask.len()).filter(|&i| !t.mask[i]).collect();
        prop_assume!(!masked_out.is_empty());
        let i = masked_out[rng.gen_range(0..masked_out.len())];
        let mut moved = pred.clone();
        moved[i] += bump;
        prop_assert_eq!(multigrasp_loss(&moved, &t).unwrap().0, base);
        prop_assert_eq!(t.values.len(), 16 * CHANNELS);
    }

    #[test]
    fn inverted_dropout_keeps_expectation(keep in 0.5f64..0.95, x in 0.5f64..5.0, seed in any::<u64>()) {
        // 1e5 unit draws: 2% is at least six standard errors for keep >= 0.5
        let mean = dropout_mean(keep, x, 1000, seed);
        prop_assert!((mean - x).abs() / x < 0.02, "mean {mean} vs {x}");
    }
}

/// Mean output of `Dropout -> sum / width` over `forwards` passes of a
/// 100-wide constant input.
fn dropout_mean(keep: f64, x: f64, forwards: usize, seed: u64) -> f64 {
    const WIDTH: usize = 100;
    let cfg = NetworkConfig {
        input: [WIDTH, 1, 1],
        layers: vec![LayerSpec::Dropout { keep_prob: keep }, LayerSpec::Linear { out_features: 6 }],
        head: HeadSpec::Direct,
        input_scale: 1.0,
    };
    let mut net = Network::new(cfg, 0).unwrap();
    for t in net.params_mut() {
        let w = if t.shape().len() == 2 { 1.0 / WIDTH as f64 } else { 0.0 };
        t.data_mut().iter_mut().for_each(|v| *v = w);
    }
    let input = vec![x; WIDTH];
    assert!((net.forward_eval(&input).unwrap().output[0] - x).abs() < 1e-12);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sum: f64 = (0..forwards).map(|_| net.forward(&input, Mode::Train, &mut rng).unwrap().output[0]).sum();
    sum / forwards as f64
}

#[test]
fn dropout_mean_over_ten_thousand_draws() {
    let mean = dropout_mean(0.5, 2.0, 100, 0);
    assert!((mean - 2.0).abs() / 2.0 < 0.02, "mean {mean}");
}

#[test]
fn mean_center_maps_offset_to_zero() {
    let img = RgdImage::filled(3, 2, 144.0);
    assert!(mean_center(&img).data.iter().all(|&v| v == 0.0));
}

#[test]
fn augmentation_is_schedule_independent() {
    let examples = generate_dataset(6, &[(ShapeKind::Bar, 1), (ShapeKind::Disc, 1)], 128, 128, 4).unwrap();
    let cfg = AugmentConfig { crop_size: 80, max_translation: 8, output_size: 40, count_per_image: 8, ..Default::default() };
    let jobs: Vec<(usize, u64)> = (0..examples.len()).flat_map(|e| (0..8u64).map(move |k| (e, k))).collect();
    let sources: Vec<RgdImage> = examples.iter().map(|e| source_image(e).unwrap()).collect();
    let serial: Vec<_> = jobs.iter().map(|&(e, k)| augment_one(&examples[e], &sources[e], &cfg, 77, k).unwrap()).collect();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
    let parallel: Vec<_> = pool.install(|| {
        jobs.par_iter().rev().map(|&(e, k)| augment_one(&examples[e], &sources[e], &cfg, 77, k).unwrap()).collect()
    });
    for (a, b) in serial.iter().zip(parallel.iter().rev()) {
        assert_eq!(a, b);
        let bits = |s: &grasp_core::preprocess::Sample| s.image.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b));
    }
}

#[test]
fn different_ids_draw_different_transforms() {
    let examples = generate_dataset(20, &[(ShapeKind::Bar, 1)], 128, 128, 1).unwrap();
    let cfg = AugmentConfig { crop_size: 80, max_translation: 8, output_size: 40, count_per_image: 1, ..Default::default() };
    let mut seen = std::collections::HashSet::new();
    for e in &examples {
        let s = augment_one(e, &source_image(e).unwrap(), &cfg, 3, 0).unwrap();
        assert!(seen.insert(format!("{:?}", s.transform)), "transform repeated for {}", e.example_id);
        assert_ne!(sample_seed(3, &e.example_id, 0), sample_seed(3, &e.example_id, 1));
    }
}
