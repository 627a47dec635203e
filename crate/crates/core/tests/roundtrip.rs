use gvtnet::data::{gen_synthetic, read_store, tiled_inference, write_store, SyntheticConfig, Task};
use gvtnet::model::{presets, Model, ModelSpec, NetworkSpec};
use gvtnet::train::{checkpoint_load, checkpoint_save, train_loop, LossKind, TrainConfig};
use gvtnet::Error;

fn small() -> ModelSpec {
    NetworkSpec { initial_features: 2, ..presets::denoise_gvtnet() }.into()
}

#[test]
fn generate_train_save_load_predict() {
    let dir = tempfile::tempdir().unwrap();
    let store = gen_synthetic(&SyntheticConfig::new(Task::Denoise, [8, 16, 16]), 2).unwrap();
    write_store(&store, dir.path().join("data")).unwrap();
    let store = read_store(dir.path().join("data")).unwrap();
    assert_eq!(store.len(), 2);

    let cfg = TrainConfig::new(LossKind::Mae, 1e-3, 1, [8, 8, 8], 2);
    let out = train_loop(Model::<f32>::build(small(), 1).unwrap(), &cfg, &store, |_| Ok(())).unwrap();
    assert_eq!(out.losses.len(), 2);

    let path = dir.path().join("m.ckpt");
    checkpoint_save(&out.model, &serde_json::json!({"note": "test"}), 2, &path).unwrap();
    let ck = checkpoint_load::<f32>(&path, Some(&small())).unwrap();
    assert_eq!(ck.iteration, 2);
    assert_eq!(ck.config["note"], "test");

    let (_, x, _) = store.iter().next().unwrap();
    let a = out.model.forward(x).unwrap();
    let b = tiled_inference(&ck.model, x, [8, 16, 16], [0; 3]).unwrap();
    assert_eq!(a.shape(), b.shape());
    assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));

    let other: ModelSpec = NetworkSpec { initial_features: 4, ..presets::denoise_gvtnet() }.into();
    assert!(matches!(checkpoint_load::<f32>(&path, Some(&other)), Err(Error::SpecMismatch(_))));
}
