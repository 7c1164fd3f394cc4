use countnet::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Dtype};
use countnet::data::{generate_synthetic, prepare_samples, ResizePolicy, SyntheticSceneSpec};
use countnet::train_eval::{predict_samples, train, TrainConfig};
use countnet::{Model, ModelConfig};

fn policy() -> ResizePolicy {
    ResizePolicy {
        min_side: 64,
        max_side: 64,
        ..Default::default()
    }
}

#[test]
fn tiny_model_loss_decreases_on_synthetic_scenes() {
    let spec = SyntheticSceneSpec {
        seed: 21,
        ..Default::default()
    };
    let samples = prepare_samples(&generate_synthetic(&spec, 64).unwrap(), &policy()).unwrap();
    let mut model = Model::new(ModelConfig::tiny()).unwrap();
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        max_steps: 500,
        eval_interval: 0,
        ..Default::default()
    };
    let out = train(&mut model, &samples, None, &cfg).unwrap();
    assert_eq!(out.loss_curve.len(), 500);
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let first = mean(&out.loss_curve[..20]);
    let last = mean(&out.loss_curve[480..]);
    assert!(last < first, "loss went from {first} to {last}");
    assert!(out.loss_curve.iter().all(|l| l.is_finite()));
}

#[test]
fn checkpoint_reproduces_predictions() {
    let spec = SyntheticSceneSpec {
        seed: 5,
        ..Default::default()
    };
    let samples = prepare_samples(&generate_synthetic(&spec, 8).unwrap(), &policy()).unwrap();
    let mut model = Model::new(ModelConfig::tiny()).unwrap();
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        max_steps: 5,
        batch_size: 4,
        eval_interval: 0,
        ..Default::default()
    };
    let out = train(&mut model, &samples, None, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    save_checkpoint(&path, &Checkpoint::from_model(&model, Some(out.optimizer.clone()), 5), Dtype::F64).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded.step, 5);
    assert_eq!(loaded.optimizer.as_ref(), Some(&out.optimizer));
    let restored = loaded.into_model().unwrap();
    assert_eq!(predict_samples(&model, &samples).unwrap(), predict_samples(&restored, &samples).unwrap());
}
