use std::path::Path;

use cbcn::config::{load, render, KEYS};
use cbcn::Error;
use cbcn_core::train::{GradientMode, TrainConfig};

fn configs_dir() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs"))
}

#[test]
fn shipped_configs_load() {
    let full = load(&configs_dir().join("lenet_k4.cfg")).unwrap();
    assert_eq!((full.k, full.stages.clone(), full.epochs), (4, vec![5, 10, 20, 40], 50));
    assert_eq!(full.gradient_mode, GradientMode::Gaussian);
    let fast = load(&configs_dir().join("lenet_k4_fast.cfg")).unwrap();
    assert_eq!((fast.k, fast.epochs), (4, 10));
    let k1 = load(&configs_dir().join("lenet_k1.cfg")).unwrap();
    assert_eq!(TrainConfig { k: 4, ..k1 }, full);
}

#[test]
fn rendered_file_loads_back() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.cfg");
    let c = TrainConfig {
        k: 8,
        stages: vec![3, 6, 9],
        lr0: 0.1 + 0.2,
        dropout: 0.25,
        pad_to_32: true,
        center_epochs: 3,
        ..TrainConfig::default()
    };
    let text = render(&c);
    assert_eq!(text.lines().count(), KEYS.len());
    std::fs::write(&path, text).unwrap();
    assert_eq!(load(&path).unwrap(), c);
}

#[test]
fn file_errors_name_the_key_and_line() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.cfg");
    std::fs::write(&path, "k = 4\n\n# comment\nlr = 0.1\n").unwrap();
    let e = load(&path).unwrap_err();
    assert!(matches!(&e, Error::UnknownKey { key, line: 4 } if key == "lr"), "{e}");
    assert_eq!(e.exit_code(), 2);
    assert!(e.to_string().contains("`lr`"));

    let e = load(&dir.path().join("missing.cfg")).unwrap_err();
    assert!(matches!(e, Error::Io { .. }));
    assert_eq!(e.exit_code(), 1);
}

#[test]
fn constant_rate_config_uses_library_defaults() {
    let constant = load(&configs_dir().join("lenet_k4_const.cfg")).unwrap();
    assert_eq!(constant, TrainConfig::default());
}
