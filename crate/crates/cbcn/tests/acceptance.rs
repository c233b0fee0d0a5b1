//! Acceptance criteria, one `PASS`/`FAIL`/`SKIP` line each.
//!
//! Runs without the libtest harness so the lines are always printed. The
//! 50-epoch reproduction only runs with `-- --ignored` (or
//! `--include-ignored`). Criteria that need MNIST are skipped when the
//! files are missing; see `CBCN_MNIST_DIR`.

mod common;

use std::fmt;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use cbcn::checkpoint::{decode_export, encode_export};
use cbcn::config;
use cbcn::dataset::Mnist;
use cbcn::metrics::without_timing;
use cbcn_core::binarize::{xnor_popcount_conv, ConvGeometry, PackedBitTensor};
use cbcn_core::circulant::SUPPORTED_ORIENTATIONS;
use cbcn_core::data::LabeledImageSet;
use cbcn_core::gradcheck::{adjointness_check, NetworkCheck};
use cbcn_core::inference::PackedModel;
use cbcn_core::model::Network;
use cbcn_core::tensor::conv2d;
use cbcn_core::train::{evaluate, TrainConfig, Trainer};
use cbcn_core::{CirculantSpec, Shape4, SignFn, Tensor4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Copy, PartialEq, Eq)]
enum Status {
    Pass,
    Fail,
    Skip,
}

struct Outcome {
    id: &'static str,
    title: &'static str,
    status: Status,
    detail: String,
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self.status {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Skip => "SKIP",
        };
        write!(f, "{s} [{}] {}: {}", self.id, self.title, self.detail)
    }
}

fn outcome(id: &'static str, title: &'static str, ok: bool, detail: String) -> Outcome {
    Outcome {
        id,
        title,
        status: if ok { Status::Pass } else { Status::Fail },
        detail,
    }
}

fn skipped(id: &'static str, title: &'static str, why: &str) -> Outcome {
    Outcome {
        id,
        title,
        status: Status::Skip,
        detail: why.to_string(),
    }
}

fn configs_dir() -> &'static Path {
    Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs"))
}

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let check = NetworkCheck::small(4);
    let params = check.parameter_count().unwrap();
    let r = check.run().expect("finite-difference check");
    let secs = start.elapsed().as_secs_f64();
    outcome(
        "1",
        "gradient correctness",
        r.passed() && params <= 5000 && r.max_rel_error < 1e-4 && secs < 120.0,
        format!(
            "K=4, {params} parameters, {} coordinates, max rel error {:.2e} (< 1e-4), {secs:.1} s (< 120 s)",
            r.checked, r.max_rel_error
        ),
    )
}

fn adjointness() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut trials = 0;
    for k in SUPPORTED_ORIENTATIONS {
        let r = adjointness_check(&CirculantSpec::new(k, 3).unwrap(), 1000, 100 + k as u64).unwrap();
        worst = worst.max(r.max_rel_error);
        trials += r.checked;
    }
    outcome(
        "2",
        "adjointness",
        worst < 1e-12 && trials == 4000,
        format!("{trials} trials over K in {{1,2,4,8}}, max rel error {worst:.2e} (< 1e-12)"),
    )
}

fn circulant_structure() -> Outcome {
    let mut failures = Vec::new();
    for k in SUPPORTED_ORIENTATIONS {
        let spec = CirculantSpec::new(k, 3).unwrap();
        let m = spec.transfer_matrix();
        for r in 0..k {
            for c in 0..k {
                if m[r][c] != (r + k - c) % k {
                    failures.push(format!("K={k} M[{r}][{c}]={}", m[r][c]));
                }
            }
        }
        let w: Vec<usize> = (0..9).collect();
        for a in 0..k {
            let fa = spec.forward_perm(a);
            let pa = spec.inverse_perm(a);
            let undone: Vec<usize> = (0..9).map(|s| fa[pa[s]]).collect();
            if undone != w {
                failures.push(format!("K={k} p_{a} does not invert m_{a}"));
            }
            for b in 0..k {
                let fb = spec.forward_perm(b);
                let fab = spec.forward_perm((a + b) % k);
                let composed: Vec<usize> = (0..9).map(|p| fa[fb[p]]).collect();
                if composed != fab {
                    failures.push(format!("K={k} m_{a} m_{b} != m_{}", (a + b) % k));
                }
            }
            if fa[4] != 4 {
                failures.push(format!("K={k} m_{a} moves the center"));
            }
        }
    }
    outcome(
        "3",
        "circulant structure",
        failures.is_empty(),
        if failures.is_empty() {
            "M[r][c] = (r-c) mod K, m_a m_b = m_(a+b mod K), p_j m_j = id, all K in {1,2,4,8}".into()
        } else {
            failures.join("; ")
        },
    )
}

fn random_signs(shape: Shape4, rng: &mut ChaCha8Rng) -> Tensor4 {
    Tensor4::from_vec(shape, (0..shape.len()).map(|_| if rng.gen() { 1.0 } else { -1.0 }).collect()).unwrap()
}

fn popcount_exactness() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut mismatches = 0;
    let mut trials = 0;
    while trials < 200 {
        let side = [1, 3, 5][rng.gen_range(0..3)];
        let stride = rng.gen_range(1..=2);
        let pad = rng.gen_range(0..=side / 2);
        let c = [1, 2, 7, 63, 64, 65, 130][rng.gen_range(0..7)];
        let (h, w) = (rng.gen_range(1..10), rng.gen_range(1..10));
        if h + 2 * pad < side || w + 2 * pad < side {
            continue;
        }
        let input = random_signs(Shape4::new(rng.gen_range(1..3), c, h, w).unwrap(), &mut rng);
        let kernel = random_signs(Shape4::new(rng.gen_range(1..5), c, side, side).unwrap(), &mut rng);
        let float = conv2d(&input, &kernel, stride, pad, -1.0).unwrap();
        let packed = xnor_popcount_conv(
            &PackedBitTensor::pack(&input).unwrap(),
            &PackedBitTensor::pack(&kernel).unwrap(),
            ConvGeometry { stride, pad },
        )
        .unwrap();
        if packed.shape() != float.shape() || packed.data() != float.data() {
            mismatches += 1;
        }
        trials += 1;
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        "4",
        "popcount exactness",
        mismatches == 0 && secs < 60.0,
        format!("{trials} random shapes, {mismatches} mismatches, {secs:.1} s (< 60 s)"),
    )
}

fn train_config(name: &str) -> TrainConfig {
    config::load(&configs_dir().join(name)).expect("shipped config")
}

fn fit(config: TrainConfig, train: &LabeledImageSet, sign: Option<SignFn>) -> Trainer {
    let mut t = Trainer::new(config, train).unwrap();
    if let Some(s) = sign {
        t.network_mut().set_sign_fn(s);
    }
    while !t.is_finished() {
        let m = t.run_epoch(train).unwrap();
        eprintln!("    epoch {} loss {:.4} train acc {:.4}", m.epoch + 1, m.loss, m.accuracy);
    }
    t
}

fn mnist_reproduction(
    id: &'static str,
    data: &Mnist,
    cfg_name: &str,
    gate: f64,
    budget: Duration,
) -> (Outcome, Trainer) {
    let start = Instant::now();
    let cfg = train_config(cfg_name);
    let epochs = cfg.epochs;
    let mut t = fit(cfg, &data.train, None);
    let e = t.evaluate(&data.test).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let o = outcome(
        id,
        "MNIST reproduction",
        e.error_rate() <= gate && start.elapsed() <= budget,
        format!(
            "{cfg_name}: {epochs} epochs on {} samples, test error {:.2}% (<= {gate}%), {:.1} min (<= {} min)",
            data.train.len(),
            e.error_rate(),
            secs / 60.0,
            budget.as_secs() / 60
        ),
    );
    (o, t)
}

/// First 20000 training samples, full test split.
fn subset(data: &Mnist) -> Mnist {
    Mnist {
        train: data.train.truncated(20_000).unwrap(),
        test: data.test.clone(),
    }
}

fn rotation_robustness(data: &Mnist) -> Outcome {
    let rot = subset(data).rotated(0).unwrap();
    let mut errors = Vec::new();
    for k in [4, 1] {
        let cfg = TrainConfig {
            k,
            epochs: 5,
            lr_decay_period: 2,
            ..train_config("lenet_k4_fast.cfg")
        };
        let mut t = fit(cfg, &rot.train, None);
        errors.push(t.evaluate(&rot.test).unwrap().error_rate());
    }
    let gap = errors[1] - errors[0];
    outcome(
        "6",
        "rotation robustness",
        gap >= 3.0,
        format!(
            "MNIST-rot, 20000 train samples, 5 epochs: K=4 error {:.2}%, K=1 error {:.2}%, gap {gap:.2} points (>= 3)",
            errors[0], errors[1]
        ),
    )
}

fn compression(net: &Network, test: &LabeledImageSet) -> Outcome {
    let model = PackedModel::from_network(net).unwrap();
    let bytes = encode_export(&model);
    let mut loaded = decode_export(&bytes, Path::new("<memory>")).unwrap();
    let n = test.len().min(1000);
    let subset = test.truncated(n).unwrap();
    let idx: Vec<usize> = (0..n).collect();
    let (images, _) = subset.batch(&idx).unwrap();
    let packed = loaded.predict(&images).unwrap();
    let float = evaluate(&mut net.clone(), &subset, 250).unwrap().predictions;
    let agree = packed.iter().zip(&float).filter(|(a, b)| a == b).count();
    let ratio = loaded.compression_ratio();
    outcome(
        "7",
        "compression",
        ratio >= 31.0 && agree == n,
        format!(
            "{} weights in {} bytes vs {} float32 bytes, {ratio:.2}x (>= 31x); {agree}/{n} predictions equal",
            loaded.conv_weight_count(),
            loaded.conv_payload_bytes(),
            4 * loaded.conv_weight_count()
        ),
    )
}

fn clip_derivative(x: f64) -> f64 {
    if x.abs() <= 1.0 {
        1.0
    } else {
        0.0
    }
}

fn gradient_ablation(data: &Mnist) -> Outcome {
    let sub = subset(data);
    let cfg = TrainConfig {
        epochs: 5,
        lr_decay_period: 2,
        ..train_config("lenet_k4_fast.cfg")
    };
    let mut accuracy = Vec::new();
    for sign in [None, Some(SignFn::Custom(clip_derivative))] {
        let mut t = fit(cfg.clone(), &sub.train, sign);
        accuracy.push(100.0 * t.evaluate(&sub.test).unwrap().accuracy());
    }
    let diff = accuracy[0] - accuracy[1];
    outcome(
        "8",
        "gradient ablation",
        diff >= -0.5,
        format!(
            "5 epochs, 20000 train samples: Gaussian {:.2}%, clip {:.2}%, difference {diff:+.2} points (>= -0.5)",
            accuracy[0], accuracy[1]
        ),
    )
}

fn determinism(mnist: Option<&Path>) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let (data, source) = match mnist {
        Some(d) => (d.to_path_buf(), "MNIST --limit 1000"),
        None => {
            let d = dir.path().join("data");
            std::fs::create_dir(&d).unwrap();
            common::write_dataset(&d, 1000, 200);
            (d, "synthetic data")
        }
    };
    let cfg = dir.path().join("det.cfg");
    std::fs::write(&cfg, "epochs = 2\ndropout = 0.1\ncenter_epochs = 1\nbn_recalibration = 500\n").unwrap();
    let mut csvs = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let status = Command::new(env!("CARGO_BIN_EXE_cbcn"))
            .args(["train", "--limit", "1000", "--config"])
            .arg(&cfg)
            .arg("--data")
            .arg(&data)
            .arg("--out")
            .arg(&out)
            .output()
            .unwrap();
        assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
        csvs.push(std::fs::read_to_string(out.join("metrics.csv")).unwrap());
    }
    let rows = csvs[0].lines().count() - 1;
    outcome(
        "9",
        "determinism",
        rows == 6 && without_timing(&csvs[0]) == without_timing(&csvs[1]),
        format!("two CLI runs on {source}, {rows} metric rows, identical apart from `seconds`"),
    )
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let full = args.iter().any(|a| a == "--ignored" || a == "--include-ignored");
    let mnist_dir = common::mnist_dir();
    let data = mnist_dir.as_deref().map(|d| Mnist::load(d).expect("MNIST files"));
    let missing = "MNIST not found (set CBCN_MNIST_DIR or place the IDX files in data/mnist)";

    let mut outcomes = Vec::new();
    let mut report = |o: Outcome| {
        println!("{o}");
        outcomes.push(o);
    };
    report(gradient_correctness());
    report(adjointness());
    report(circulant_structure());
    report(popcount_exactness());
    match &data {
        Some(d) => {
            let (o, t) = mnist_reproduction("5", d, "lenet_k4_fast.cfg", 6.0, Duration::from_secs(45 * 60));
            report(o);
            report(rotation_robustness(d));
            report(compression(t.network(), &d.test));
            report(gradient_ablation(d));
        }
        None => {
            report(skipped("5", "MNIST reproduction", missing));
            report(skipped("6", "rotation robustness", missing));
            let set = common::synthetic(400, 3);
            let t = fit(common::tiny_config(), &set, None);
            let mut o = compression(t.network(), &set);
            o.detail.push_str(" (synthetic data, stages 4-8)");
            report(o);
            report(skipped("8", "gradient ablation", missing));
        }
    }
    report(determinism(mnist_dir.as_deref()));
    match (&data, full) {
        (Some(d), true) => {
            report(mnist_reproduction("5-full", d, "lenet_k4.cfg", 4.0, Duration::from_secs(24 * 3600)).0)
        }
        (None, true) => report(skipped("5-full", "MNIST reproduction, 50 epochs", missing)),
        (_, false) => report(skipped("5-full", "MNIST reproduction, 50 epochs", "ignored; run with -- --ignored")),
    }

    let failed = outcomes.iter().filter(|o| o.status == Status::Fail).count();
    let passed = outcomes.iter().filter(|o| o.status == Status::Pass).count();
    println!("acceptance: {passed} passed, {failed} failed, {} skipped", outcomes.len() - passed - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
