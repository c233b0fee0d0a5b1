mod common;

use std::path::Path;

use cbcn::checkpoint::{
    decode_checkpoint, decode_export, encode_checkpoint, encode_export, load_checkpoint, load_export, peek_kind,
    save_checkpoint, save_export, KIND_CHECKPOINT, KIND_EXPORT,
};
use cbcn::Error;
use cbcn_core::inference::PackedModel;
use cbcn_core::layers::Mode;
use cbcn_core::model::Network;
use cbcn_core::train::{TrainConfig, Trainer};
use rand_chacha::ChaCha8Rng;

fn trained(config: TrainConfig, epochs: usize) -> (Trainer, cbcn_core::data::LabeledImageSet) {
    let set = common::synthetic(120, 5);
    let mut t = Trainer::new(config, &set).unwrap();
    for _ in 0..epochs {
        t.run_epoch(&set).unwrap();
    }
    (t, set)
}

#[test]
fn checkpoint_resumes_bit_identically() {
    let config = TrainConfig {
        center_epochs: 1,
        epochs: 1,
        dropout: 0.2,
        ..common::tiny_config()
    };
    let (mut original, set) = trained(config, 1);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.cbcn");
    save_checkpoint(&path, &original).unwrap();
    assert_eq!(peek_kind(&path).unwrap(), KIND_CHECKPOINT);
    let mut restored = load_checkpoint(&path).unwrap();
    assert_eq!(restored.config(), original.config());
    assert_eq!(restored.state.epoch, 1);
    let bytes = encode_checkpoint(original.config(), &original.state);
    assert_eq!(encode_checkpoint(restored.config(), &restored.state), bytes);

    // the next epoch runs the center-loss phase with dropout
    let a = original.run_epoch(&set).unwrap();
    let b = restored.run_epoch(&set).unwrap();
    assert_eq!(a, b);
    assert_eq!(
        encode_checkpoint(original.config(), &original.state),
        encode_checkpoint(restored.config(), &restored.state)
    );
}

#[test]
fn truncation_and_corruption_report_offsets() {
    let (t, _) = trained(common::tiny_config(), 0);
    let bytes = encode_checkpoint(t.config(), &t.state);
    let p = Path::new("mem.cbcn");
    for cut in [0, 3, 11, 20, bytes.len() / 2, bytes.len() - 1] {
        match decode_checkpoint(&bytes[..cut], p) {
            Err(Error::Format { offset, .. }) => assert!(offset <= cut, "cut {cut}, offset {offset}"),
            other => panic!("cut {cut}: {other:?}"),
        }
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode_checkpoint(&bad, p), Err(Error::Format { offset: 0, .. })));
    let mut bad = bytes.clone();
    bad[4] = 9;
    assert!(matches!(decode_checkpoint(&bad, p), Err(Error::Format { offset: 4, .. })));
    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(decode_checkpoint(&trailing, p).is_err());
    // an export is not a checkpoint and vice versa
    let (t1, _) = trained(common::tiny_config(), 1);
    let export = encode_export(&PackedModel::from_network(t1.network()).unwrap());
    assert!(decode_checkpoint(&export, p).is_err());
    assert!(decode_export(&bytes, p).is_err());
}

#[test]
fn export_predictions_match_float_eval() {
    let (t, set) = trained(common::tiny_config(), 2);
    let model = PackedModel::from_network(t.network()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.cbcx");
    save_export(&path, &model).unwrap();
    assert_eq!(peek_kind(&path).unwrap(), KIND_EXPORT);
    let bytes = std::fs::read(&path).unwrap();
    assert_eq!(encode_export(&load_export(&path).unwrap()), bytes);

    let mut loaded = load_export(&path).unwrap();
    let mut net = t.network().clone();
    let idx: Vec<usize> = (0..set.len()).collect();
    let (images, _) = set.batch(&idx).unwrap();
    let float = net.forward(&images, Mode::Eval, None::<&mut ChaCha8Rng>).unwrap();
    assert_eq!(loaded.logits(&images).unwrap().data(), float.logits.data());
    assert_eq!(loaded.predict(&images).unwrap(), Network::argmax(&float.logits));
}

#[test]
fn export_size_counts_only_sign_bits() {
    let (t, _) = trained(common::tiny_config(), 1);
    let model = PackedModel::from_network(t.network()).unwrap();
    // stages 4 and 8 with 3x3 filters: 4*1*9 + 8*4*9 weights
    assert_eq!(model.conv_weight_count(), 36 + 288);
    assert_eq!(model.conv_payload_bytes(), 5 + 36);
    let checkpoint = encode_checkpoint(t.config(), &t.state).len();
    assert!(encode_export(&model).len() < checkpoint);
}
