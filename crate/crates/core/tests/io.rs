//! File round trips and typed failures for datasets and checkpoints.

use std::fs;

use anyseg::encoder::EncoderConfig;
use anyseg::synth::{read_dataset, write_dataset, Dataset, SceneSpec};
use anyseg::train::{check_modalities, load_checkpoint, load_model, save_checkpoint, ModelSection, TrainConfig};
use anyseg::{Error, Model, Trainer};

fn spec() -> SceneSpec {
    SceneSpec {
        height: 32,
        width: 32,
        classes: 4,
        ..SceneSpec::default()
    }
}

fn config() -> TrainConfig {
    TrainConfig {
        epochs: 1,
        model: ModelSection {
            encoder: EncoderConfig {
                stage_channels: [4, 4, 8, 8],
                ..EncoderConfig::default()
            },
            embed_dim: 8,
            ..ModelSection::default()
        },
        ..TrainConfig::default()
    }
}

#[test]
fn dataset_file_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.mmss");
    let ds = Dataset::generate(21, 0, 4, &spec()).unwrap();
    write_dataset(&path, &ds).unwrap();
    let back = read_dataset(&path).unwrap();
    assert_eq!(back, ds);
    for (a, b) in back.scenes.iter().zip(&ds.scenes) {
        for (x, y) in a.images.iter().flatten().zip(b.images.iter().flatten()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}

#[test]
fn checkpoint_file_round_trip_preserves_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let data = Dataset::generate(5, 0, 4, &spec()).unwrap();
    let mut t = Trainer::new(config(), &data.modalities, data.classes).unwrap();
    t.fit(&data, |_| {}).unwrap();
    save_checkpoint(&path, &t).unwrap();

    let model: Model = load_model(&path).unwrap();
    let scene = &data.scenes[0];
    let before = t.model.decode_subset(&[&t.model.encode_scene(scene).unwrap()[1]], 32, 32).unwrap();
    let after = model.decode_subset(&[&model.encode_scene(scene).unwrap()[1]], 32, 32).unwrap();
    assert!(before.data().iter().zip(after.data()).all(|(a, b)| a.to_bits() == b.to_bits()));

    let resumed: Trainer = load_checkpoint(&path).unwrap();
    assert_eq!(resumed.epoch, 1);
    assert_eq!(resumed.step(), t.step());
}

#[test]
fn wrong_or_damaged_files_give_typed_errors() {
    let dir = tempfile::tempdir().unwrap();
    let data_path = dir.path().join("d.mmss");
    let ckpt_path = dir.path().join("m.ckpt");
    let data = Dataset::generate(2, 0, 2, &spec()).unwrap();
    write_dataset(&data_path, &data).unwrap();
    let t = Trainer::new(config(), &data.modalities, data.classes).unwrap();
    save_checkpoint(&ckpt_path, &t).unwrap();

    assert!(matches!(read_dataset(&ckpt_path), Err(Error::BadMagic { .. })));
    assert!(matches!(load_model::<f64>(&data_path), Err(Error::BadMagic { .. })));
    assert!(matches!(read_dataset(dir.path().join("missing")), Err(Error::Io(_))));

    let bytes = fs::read(&data_path).unwrap();
    let mut more = bytes.clone();
    more[8..12].copy_from_slice(&3u32.to_le_bytes());
    fs::write(&data_path, &more).unwrap();
    assert!(matches!(read_dataset(&data_path), Err(Error::Truncated { .. })));

    let ck = fs::read(&ckpt_path).unwrap();
    fs::write(&ckpt_path, &ck[..ck.len() / 2]).unwrap();
    assert!(matches!(load_model::<f64>(&ckpt_path), Err(Error::Truncated { .. })));
    fs::write(&ckpt_path, b"").unwrap();
    assert!(matches!(load_model::<f64>(&ckpt_path), Err(Error::Truncated { .. })));
}

#[test]
fn modality_order_is_enforced() {
    let data = Dataset::generate(2, 0, 2, &spec()).unwrap();
    let t = Trainer::new(config(), &data.modalities, data.classes).unwrap();
    let mut swapped = data.modalities.clone();
    swapped.swap(0, 2);
    assert!(matches!(
        check_modalities(&t.model.config.modalities, &swapped),
        Err(Error::ModalityMismatch { .. })
    ));
    assert!(matches!(
        check_modalities(&t.model.config.modalities, &swapped[..3]),
        Err(Error::ConfigMismatch(_))
    ));
    let mut relabelled = data.clone();
    relabelled.modalities = swapped;
    let mut t2 = t.clone();
    assert!(matches!(t2.train_epoch(&relabelled), Err(Error::ModalityMismatch { .. })));
}
