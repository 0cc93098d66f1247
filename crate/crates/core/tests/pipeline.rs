use mstr_core::evaluation::{detections, evaluate};
use mstr_core::model::{Model, ModelConfig};
use mstr_core::numerics::ParamStore;
use mstr_core::synth::{generate_dataset, Preset, SceneConfig};
use mstr_core::train::{evaluate_model, train, TrainConfig};

fn tiny() -> ModelConfig {
    ModelConfig {
        image_size: 32,
        channels: 8,
        ffn_hidden: 16,
        queries: 4,
        ..ModelConfig::default()
    }
}

#[test]
fn generate_train_evaluate() {
    let scenes = generate_dataset(
        4,
        21,
        &SceneConfig {
            image_size: 32,
            preset: Preset::MultiscaleStress,
            ..SceneConfig::default()
        },
    )
    .unwrap();
    let mut model = Model::new(tiny(), 21).unwrap();
    let cfg = TrainConfig {
        steps: 20,
        batch_size: 2,
        eval_every: 10,
        target_map: None,
        ..TrainConfig::default()
    };
    let report = train(&mut model, &scenes, &cfg, |_, _| true).unwrap();
    assert_eq!(report.steps_run, 20);
    assert_eq!(report.curve.iter().map(|p| p.step).collect::<Vec<_>>(), [0, 10, 20]);
    assert!(report.log.iter().all(|l| l.total.is_finite()));

    // The training-time measurement agrees with scoring detections directly.
    let (dets, ap) = evaluate_model(&model, &scenes, None).unwrap();
    let direct: Vec<_> = scenes
        .iter()
        .enumerate()
        .flat_map(|(i, s)| detections(i, &model.predict(&s.image).unwrap()))
        .collect();
    assert_eq!(dets, direct);
    let gts: Vec<_> = scenes.iter().map(|s| s.triplets.clone()).collect();
    assert_eq!(evaluate(&direct, &gts, None).unwrap().map, ap.map);
    assert_eq!(ap.map, report.curve[2].map);
}

#[test]
fn checkpoint_round_trip_reproduces_predictions() {
    let a = Model::new(tiny(), 1).unwrap();
    let mut bytes = Vec::new();
    a.store.write_to(&mut bytes).unwrap();
    let mut b = Model::new(tiny(), 2).unwrap();
    b.store.load_values_from(&ParamStore::read_from(&bytes[..]).unwrap()).unwrap();
    let scene = &generate_dataset(
        1,
        3,
        &SceneConfig {
            image_size: 32,
            ..SceneConfig::default()
        },
    )
    .unwrap()[0];
    assert_eq!(a.predict(&scene.image).unwrap(), b.predict(&scene.image).unwrap());
}
