use bootplace_autograd::{Graph, Tensor};
use bootplace_core::checkpoint::{load_checkpoint, save_checkpoint, Moments, TrainingState};
use bootplace_core::data::{generate_scene, SyntheticSceneConfig};
use bootplace_core::geometry::BBox;
use bootplace_core::model::{
    anchor_centers, association_probabilities, association_scores, patch_tensor, rank_placements,
    LocationMode, ModelConfig, ModelError, PlacementModel, ScoreSign,
};
use image::{Rgb, RgbImage, Rgba, RgbaImage};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(size: u32, seed: u64) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    RgbImage::from_fn(size, size, |_, _| {
        Rgb([rng.random(), rng.random(), rng.random()])
    })
}

fn random_patch(w: u32, h: u32, seed: u64) -> RgbaImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    RgbaImage::from_fn(w, h, |_, _| {
        Rgba([rng.random(), rng.random(), rng.random(), rng.random()])
    })
}

fn toy_boxes() -> Vec<BBox> {
    vec![
        BBox::new(0.3, 0.7, 0.2, 0.1).unwrap(),
        BBox::new(0.8, 0.4, 0.1, 0.3).unwrap(),
    ]
}

#[test]
fn detect_emits_one_proposal_per_query() {
    for mode in [LocationMode::Tokens, LocationMode::Gating] {
        let model = PlacementModel::<f64>::new(ModelConfig {
            location_mode: mode,
            ..ModelConfig::toy()
        })
        .unwrap();
        for boxes in [vec![], toy_boxes()] {
            let props = model.detect(&random_image(16, 1), &boxes).unwrap();
            assert_eq!(props.len(), model.config.num_queries);
            for p in &props {
                assert_eq!(p.class_probs.len(), model.config.num_classes + 1);
                assert!((p.class_probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(p.class_probs.iter().all(|&v| (0.0..=1.0).contains(&v)));
                let n: f64 = p.feature.iter().map(|v| v * v).sum();
                assert!((n - 1.0).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn detect_rejects_bad_inputs() {
    let model = PlacementModel::<f64>::new(ModelConfig::toy()).unwrap();
    assert!(matches!(
        model.detect(&random_image(8, 1), &[]),
        Err(ModelError::Input(_))
    ));
    let many = vec![BBox::new(0.5, 0.5, 0.1, 0.1).unwrap(); model.config.max_scene_objects + 1];
    assert!(matches!(
        model.detect(&random_image(16, 1), &many),
        Err(ModelError::TooManySceneObjects { given: 5, max: 4 })
    ));
}

#[test]
fn object_embeddings_are_unit_norm() {
    let model = PlacementModel::<f64>::new(ModelConfig::toy()).unwrap();
    for (w, h) in [(3, 7), (8, 8), (20, 5), (1, 1)] {
        let e = model.encode_object(&random_patch(w, h, w as u64)).unwrap();
        assert_eq!(e.vector.len(), model.config.feature_dim);
        let n: f64 = e.vector.iter().map(|v| v * v).sum();
        assert!((n - 1.0).abs() < 1e-9);
    }
    assert!(model.encode_objects(&[]).is_err());
}

#[test]
fn transparent_pixels_do_not_contribute_color() {
    let mut a = random_patch(5, 5, 3);
    let mut b = a.clone();
    for (pa, pb) in a.pixels_mut().zip(b.pixels_mut()) {
        if pa[3] < 128 {
            pa.0 = [0, 0, 0, 0];
            pb.0 = [255, 17, 99, 0];
        }
    }
    let ta = patch_tensor::<f64>(&a, 8);
    let tb = patch_tensor::<f64>(&b, 8);
    assert_eq!(ta.shape(), [4, 8, 8]);
    assert_eq!(ta.data(), tb.data());
}

#[test]
fn graph_association_matches_reference() {
    for sign in [ScoreSign::Negative, ScoreSign::Positive] {
        let model = PlacementModel::<f64>::new(ModelConfig {
            score_sign: sign,
            ..ModelConfig::toy()
        })
        .unwrap();
        let image = random_image(16, 4);
        let patches = [random_patch(4, 6, 1), random_patch(7, 3, 2)];
        let (props, assoc) = model.associate(&image, &toy_boxes(), &patches).unwrap();
        assert_eq!(assoc.num_proposals(), props.len());

        let mut g = Graph::inference();
        let p = g.bind(&model.params);
        let det = model
            .forward_detect(
                &mut g,
                &p,
                &bootplace_core::model::image_tensor(&image),
                &toy_boxes(),
            )
            .unwrap();
        let tensors: Vec<Tensor<f64>> = patches
            .iter()
            .map(|x| patch_tensor(x, model.config.patch_size))
            .collect();
        let q = model.forward_objects(&mut g, &p, &tensors).unwrap();
        let (scores, probs) = model.forward_association(&mut g, q, det.features).unwrap();
        for k in 0..2 {
            for (a, b) in g.value(scores).row(k).iter().zip(&assoc.scores[k]) {
                assert!((a - b).abs() < 1e-9);
            }
            for (a, b) in g.value(probs).row(k).iter().zip(&assoc.probabilities[k]) {
                assert!((a - b).abs() < 1e-12);
            }
            assert_eq!(*assoc.scores[k].last().unwrap(), 0.0);
            assert!((assoc.probabilities[k].iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_maps_are_distributions_over_the_grid() {
    let model = PlacementModel::<f64>::new(ModelConfig::toy()).unwrap();
    let maps = model
        .decoder_attention(&random_image(16, 5), &toy_boxes())
        .unwrap();
    assert_eq!(maps.len(), model.config.num_queries);
    let grid = model.config.feature_grid();
    for m in &maps {
        assert_eq!((m.rows, m.cols, m.weights.len()), (grid, grid, grid * grid));
        assert!((m.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn anchors_cover_the_unit_square() {
    let a = anchor_centers(16);
    assert_eq!(a.len(), 16);
    assert_eq!(a[0], (0.125, 0.125));
    assert_eq!(a[15], (0.875, 0.875));
    let b = anchor_centers(5);
    assert!(b
        .iter()
        .all(|&(x, y)| x > 0.0 && x < 1.0 && y > 0.0 && y < 1.0));
}

#[test]
fn presets_have_expected_sizes() {
    let desk = ModelConfig::preset("desk").unwrap();
    assert_eq!(
        (desk.image_size, desk.d_model, desk.num_queries, desk.heads),
        (64, 64, 16, 4)
    );
    assert_eq!(
        (desk.encoder_blocks, desk.decoder_blocks, desk.ffn_dim),
        (2, 2, 256)
    );
    let paper = ModelConfig::preset("paper").unwrap();
    assert_eq!(
        (
            paper.d_model,
            paper.num_queries,
            paper.max_scene_objects,
            paper.heads
        ),
        (256, 100, 120, 8)
    );
    assert_eq!(
        (paper.encoder_blocks, paper.decoder_blocks, paper.ffn_dim),
        (6, 6, 2048)
    );
    assert_eq!(paper.dropout, 0.1);
    assert!(ModelConfig::preset("huge").is_none());
}

#[test]
fn checkpoint_round_trip_is_byte_exact() {
    let dir = tempfile::tempdir().unwrap();
    let model = PlacementModel::<f32>::new(ModelConfig::toy()).unwrap();
    let n = model.params.len();
    let moments = Moments {
        first: model
            .params
            .iter()
            .map(|p| vec![0.25; p.tensor.len()])
            .collect(),
        second: model
            .params
            .iter()
            .map(|p| vec![0.5; p.tensor.len()])
            .collect(),
    };
    let state = TrainingState {
        step: 7,
        config: serde_json::json!({"lr": 0.001}),
    };
    let a = dir.path().join("a");
    save_checkpoint(&a, &model, Some((&state, &moments))).unwrap();
    let (loaded, training) = load_checkpoint(&a).unwrap();
    let (s2, m2) = training.unwrap();
    assert_eq!(s2, state);
    assert_eq!(m2, moments);
    assert_eq!(loaded.params.len(), n);
    let b = dir.path().join("b");
    save_checkpoint(&b, &loaded, Some((&s2, &m2))).unwrap();
    for f in ["manifest.json", "weights.bin", "optimizer.bin"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    let image = random_image(16, 9);
    assert_eq!(
        model.detect(&image, &[]).unwrap(),
        loaded.detect(&image, &[]).unwrap()
    );
}

#[test]
fn incompatible_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let model = PlacementModel::<f32>::new(ModelConfig::toy()).unwrap();
    save_checkpoint(dir.path(), &model, None).unwrap();
    let manifest_path = dir.path().join("manifest.json");
    let original = std::fs::read_to_string(&manifest_path).unwrap();

    let bumped = original.replace("\"format_version\": 1", "\"format_version\": 9");
    std::fs::write(&manifest_path, bumped).unwrap();
    let err = load_checkpoint(dir.path()).unwrap_err();
    assert!(matches!(err, ModelError::Incompatible { .. }), "{err}");
    assert!(err.to_string().contains("format_version 9"));

    let mut v: serde_json::Value = serde_json::from_str(&original).unwrap();
    v["parameters"][0]["shape"] = serde_json::json!([1, 2, 3]);
    std::fs::write(&manifest_path, serde_json::to_string(&v).unwrap()).unwrap();
    assert!(matches!(
        load_checkpoint(dir.path()),
        Err(ModelError::Incompatible { .. })
    ));

    std::fs::write(&manifest_path, &original).unwrap();
    let weights = dir.path().join("weights.bin");
    let mut bytes = std::fs::read(&weights).unwrap();
    bytes.pop();
    std::fs::write(&weights, bytes).unwrap();
    assert!(matches!(
        load_checkpoint(dir.path()),
        Err(ModelError::Incompatible { .. })
    ));
}

#[test]
fn trained_scene_shapes_flow_through_detection() {
    let cfg = SyntheticSceneConfig::default();
    let scene = generate_scene(&cfg, 3).unwrap();
    let model = PlacementModel::<f32>::new(ModelConfig::desk()).unwrap();
    let boxes: Vec<BBox> = scene.scene_objects.iter().map(|o| o.bbox).collect();
    let patches: Vec<RgbaImage> = scene.targets.iter().map(|t| t.patch.clone()).collect();
    let (props, assoc) = model
        .associate(&scene.background, &boxes, &patches)
        .unwrap();
    assert_eq!(props.len(), 16);
    assert_eq!(assoc.probabilities.len(), scene.targets.len());
}

proptest! {
    #[test]
    fn temperature_rescaling_preserves_ranking(
        seed in 0u64..10_000,
        t1 in 0.01f64..2.0,
        t2 in 0.01f64..2.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut unit = |d: usize| {
            let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
            v.into_iter().map(|x| x / n).collect::<Vec<f64>>()
        };
        let q = vec![unit(6)];
        let f: Vec<Vec<f64>> = (0..9).map(|_| unit(6)).collect();
        let rank = |t| {
            let a = association_probabilities(&association_scores(&q, &f, t, ScoreSign::Negative).unwrap());
            rank_placements(&a.probabilities[0], 9).unwrap()
        };
        prop_assert_eq!(rank(t1), rank(t2));
    }
}
