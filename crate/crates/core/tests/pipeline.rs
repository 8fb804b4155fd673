use dgk_core::checkpoint::{Checkpoint, CheckpointError};
use dgk_core::codec::ActionVocabulary;
use dgk_core::dataset::{read_dataset, IndexedDataset, SceneSource};
use dgk_core::evaluation::{evaluate_model, EvalConfig};
use dgk_core::exec::ExecMode;
use dgk_core::inference::{plan, PlanConfig};
use dgk_core::model::{Model, ModelConfig};
use dgk_core::simulator::{generate_dataset, write_dataset_dir, WorldConfig, TRAIN_FILE, VAL_FILE};
use dgk_core::training::{prepare_all, train, TrainConfig, Trainer};

fn small_world() -> WorldConfig {
    WorldConfig { horizon: 12, ..WorldConfig::default() }
}

fn small_model(horizon: usize) -> Model {
    Model::new(ModelConfig::symmetric(16, 1, 2, 169, horizon), ActionVocabulary::default(), 0).unwrap()
}

#[test]
fn generate_train_checkpoint_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_dataset(&small_world(), 40, 0.75, 5, ExecMode::default()).unwrap();
    write_dataset_dir(dir.path(), &ds, false).unwrap();
    let source = IndexedDataset::open(&dir.path().join(TRAIN_FILE)).unwrap();
    let val_scenes = read_dataset(&dir.path().join(VAL_FILE)).unwrap();
    assert_eq!((source.len(), val_scenes.len()), (30, 10));

    let model = small_model(12);
    let cfg = TrainConfig { batch_size: 5, epochs: 4, eval_every: 6, ..TrainConfig::default() }.with_lr(3e-3);
    let val = prepare_all(&val_scenes, &model.vocab, cfg.target_prefix, 12, cfg.exec).unwrap();
    let mut trainer = Trainer::new(model, cfg, source.len()).unwrap();
    let out = train(&mut trainer, &source, &val, None, |_| {}).unwrap();
    assert_eq!(out.curve.len(), 24);
    assert!(out.final_val_loss.unwrap() < out.init_val_loss.unwrap());

    let path = dir.path().join("ck.dgkc");
    let state = trainer.state();
    Checkpoint { model: trainer.model.clone(), train: Some(state) }.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.train.as_ref().unwrap().step, 24);

    let cfg = EvalConfig { plan: PlanConfig { samples: 8, modes: 3, ..PlanConfig::default() }, ..EvalConfig::default() };
    let seq = evaluate_model(&loaded.model, &val_scenes, &EvalConfig { exec: ExecMode::Sequential, ..cfg.clone() }).unwrap();
    let par = evaluate_model(&loaded.model, &val_scenes, &EvalConfig { exec: ExecMode::Parallel, ..cfg }).unwrap();
    assert_eq!(seq, par);
    assert_eq!((seq.num_scenes, seq.num_trajectories, seq.horizon), (10, 30, 12));
    assert!(seq.min_ade.is_finite() && seq.min_ade <= seq.min_fde * 2.0 + 10.0);
}

#[test]
fn plans_are_in_scene_frame() {
    let scene = dgk_core::simulator::generate_scene(&small_world(), 9).unwrap();
    let model = small_model(12);
    let set = plan(&model, &scene, &PlanConfig { samples: 6, modes: 2, ..PlanConfig::default() }).unwrap();
    let cur = scene.current().position;
    // Twelve ticks at road speeds stay within ~60 m of the current position.
    assert!(set.samples.iter().flatten().all(|p| p.dist(cur) < 60.0));
    assert_eq!(set.modes.len(), 2);
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let ck = Checkpoint { model: small_model(4), train: None };
    let bytes = ck.to_bytes();
    assert!(matches!(Checkpoint::from_bytes(&bytes[..5]), Err(CheckpointError::Truncated(_))));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(CheckpointError::BadMagic)));
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
}
