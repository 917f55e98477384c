use rigsynth::audio2rig::{infer, read_weights, write_weights, Audio2RigModel, InferenceConfig, ModelConfig};
use rigsynth::blink::{inject_blinks, sample_blink_times, BlinkFrequencyModel};
use rigsynth::evalkit::{lr_correlation, mae_report};
use rigsynth::featio::{read_feature_file, write_feature_file, FeatureSequence};
use rigsynth::gaze::{inject_gaze, sample_gaze_track, GazeConfig};
use rigsynth::postfx::{postprocess, SmoothConfig};
use rigsynth::rig::{ControllerMap, EmotionTimeline, EyeRole, RigSequence};
use rigsynth::trainer::{evaluate, gen_synthetic, train, TrainConfig};

#[test]
fn train_save_infer_postprocess_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_synthetic(1, 8, 30..=50, 8);
    let mut model = Audio2RigModel::new(ModelConfig::desk(8, 16, 2, 1), 2).unwrap();
    let before = evaluate(&model, &data.items).unwrap();
    let cfg = TrainConfig { lr0: 3e-3, epochs: 60, batch: 4, seed: 1, ..TrainConfig::default() };
    train(&mut model, &data.items, &cfg, |_| {}).unwrap();
    assert!(evaluate(&model, &data.items).unwrap() < before);

    let weights = dir.path().join("model.emow");
    write_weights(&model, &weights).unwrap();
    let model = read_weights(&weights).unwrap();

    let item = &data.items[0];
    let feats = dir.path().join("clip.emof");
    write_feature_file(&FeatureSequence::new(item.features.clone(), 60.0).unwrap(), &feats).unwrap();
    let feats = read_feature_file(&feats).unwrap();
    let timeline = EmotionTimeline::new(item.labels.clone());
    let raw = infer(&feats, &timeline, &model, &InferenceConfig::default()).unwrap();

    let map = ControllerMap::default_map();
    let smoothed = postprocess(&raw, &map, Some(SmoothConfig::default())).unwrap();
    let bounds = map.bounds();
    for row in smoothed.values().rows() {
        for (v, (lo, hi)) in row.iter().zip(&bounds) {
            assert!(v >= lo && v <= hi);
        }
    }

    let starts = sample_blink_times(&BlinkFrequencyModel::default(), smoothed.len() as f64 / 60.0, 60.0, 3).unwrap();
    let blinked = inject_blinks(&smoothed, &starts, &map).unwrap();
    let track = sample_gaze_track(&GazeConfig::default(), blinked.len(), 3).unwrap();
    let animated = inject_gaze(&blinked, &track, &map).unwrap();
    let mut eye_roles = map.role_indices(EyeRole::LidClosure);
    eye_roles.extend(map.role_indices(EyeRole::GazeHorizontal));
    eye_roles.extend(map.role_indices(EyeRole::GazeVertical));
    for c in (0..map.len()).filter(|c| !eye_roles.contains(c)) {
        assert_eq!(animated.channel(c), smoothed.channel(c));
    }

    let truth = RigSequence::new(item.target.clone()).unwrap();
    let report = mae_report(&smoothed, &truth, &map).unwrap();
    assert!(report.full.is_finite() && report.mouth.is_finite() && report.eye.is_finite());
    let corr = lr_correlation(&animated, &map).unwrap();
    assert!(corr.values.iter().all(|v| (-1.0..=1.0).contains(v)));
}
