use bootplace_core::data::{SceneObject, Target, TrainingSample};
use bootplace_core::geometry::BBox;
use bootplace_core::model::{ModelConfig, PlacementModel};
use image::{Rgb, RgbImage, Rgba, RgbaImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// 16x16 noise image with two targets of different classes and one scene
/// object.
pub fn toy_sample(seed: u64) -> TrainingSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let image = RgbImage::from_fn(16, 16, |_, _| {
        Rgb([rng.random(), rng.random(), rng.random()])
    });
    let mut patch = |w, h| {
        RgbaImage::from_fn(w, h, |_, _| {
            Rgba([rng.random(), rng.random(), rng.random(), 255])
        })
    };
    let targets = vec![
        Target {
            patch: patch(4, 3),
            bbox: BBox::new(0.3, 0.4, 0.25, 0.2).unwrap(),
            class: 0,
        },
        Target {
            patch: patch(2, 5),
            bbox: BBox::new(0.7, 0.6, 0.15, 0.3).unwrap(),
            class: 1,
        },
    ];
    TrainingSample {
        image,
        scene_objects: vec![SceneObject {
            bbox: BBox::new(0.5, 0.85, 0.3, 0.2).unwrap(),
            class: 0,
        }],
        targets,
        recomposed: vec![],
    }
}

/// Toy model moved off the zero-bias initialization, where padded patch
/// regions sit exactly on ReLU kinks.
pub fn toy_model(seed: u64) -> PlacementModel<f64> {
    let mut model = PlacementModel::<f64>::new(ModelConfig::toy()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in model.params.iter_mut() {
        for v in p.tensor.data_mut() {
            *v += rng.random_range(-0.05..0.05);
        }
    }
    model
}
