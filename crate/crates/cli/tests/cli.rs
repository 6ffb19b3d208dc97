use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lesion_core::infer::read_predictions;
use lesion_core::weights::load_weights;
use lesion_core::RunConfig;

const TINY: &str = "\
seed = 3
coarse_size = 16
fine_resize = 32
crop_size = 16
hidden_units = 8
blocks = 4,6,8
batch_size = 6
stage1_updates = 3
stage2_updates = 3
unfreeze_blocks = 1
";

fn lesion(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lesion")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(args: &[&str]) -> String {
    let o = lesion(args);
    assert!(o.status.success(), "{args:?} failed: {}", stderr(&o));
    stdout(&o)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Synthetic data (2 train / 1 test per class), the tiny config and a trained model.
struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_owned();
        ok(&[
            "synth",
            "--out",
            s(&root.join("data")),
            "--train",
            "2",
            "--test",
            "1",
            "--seed",
            "5",
        ]);
        fs::write(root.join("tiny.cfg"), TINY).unwrap();
        ok(&[
            "train",
            "--config",
            s(&root.join("tiny.cfg")),
            "--data",
            s(&root.join("data/train.csv")),
            "--out",
            s(&root.join("model.mscw")),
        ]);
        Self { _dir: dir, root }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn p(&self, rel: &str) -> String {
        s(&self.path(rel)).to_owned()
    }
}

#[test]
fn synth_writes_images_and_manifests_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let msg = ok(&["synth", "--out", s(out), "--train", "2", "--test", "1", "--seed", "9"]);
        assert!(msg.contains("6 training and 3 test images"), "{msg}");
    }
    let files = |root: &Path| {
        let mut v: Vec<PathBuf> = ["train", "test"]
            .iter()
            .flat_map(|d| fs::read_dir(root.join(d)).unwrap().map(|e| e.unwrap().path()))
            .collect();
        v.sort();
        v
    };
    assert_eq!(files(&a).len(), 9);
    for name in ["train.csv", "test.csv"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap());
    }
    for (x, y) in files(&a).iter().zip(files(&b)) {
        assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap());
    }
}

#[test]
fn usage_errors_exit_with_1() {
    assert_eq!(
        lesion(&["synth", "--train", "2", "--test", "1", "--seed", "1"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(lesion(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(lesion(&["ensemble", "--out", "x.csv"]).status.code(), Some(1));
    assert_eq!(
        lesion(&["train", "--config", "a", "--data", "b", "--out", "c", "--fold", "5"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(lesion(&["--help"]).status.code(), Some(0));
}

#[test]
fn train_writes_weights_log_and_effective_config() {
    let fx = Fixture::new();
    let model = load_weights(fx.path("model.mscw")).unwrap();
    assert_eq!(model.config().backbone.widths, vec![4, 6, 8]);
    let log = fs::read_to_string(fx.path("model.mscw.log.csv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "update,stage,loss");
    assert_eq!(lines.len(), 7);
    let dumped = RunConfig::parse(&fs::read_to_string(fx.path("model.mscw.cfg")).unwrap()).unwrap();
    assert_eq!(dumped, RunConfig::parse(TINY).unwrap());

    // Training again from the dumped config reproduces the weights.
    ok(&[
        "train",
        "--config",
        &fx.p("model.mscw.cfg"),
        "--data",
        &fx.p("data/train.csv"),
        "--out",
        &fx.p("again.mscw"),
    ]);
    assert_eq!(
        fs::read(fx.path("model.mscw")).unwrap(),
        fs::read(fx.path("again.mscw")).unwrap()
    );

    let out = ok(&[
        "train",
        "--config",
        &fx.p("tiny.cfg"),
        "--data",
        &fx.p("data/train.csv"),
        "--out",
        &fx.p("fold.mscw"),
        "--fold",
        "3/0",
    ]);
    assert!(out.contains("fold 0 of 3: training on 4 images"), "{out}");
    assert!(out.contains("final loss"), "{out}");
}

#[test]
fn bad_configs_fail_before_training() {
    let fx = Fixture::new();
    for (text, needle) in [
        (
            "crop_size = 64\nfine_resize = 32\n",
            "crop_size 64 exceeds fine_resize 32",
        ),
        ("seed = 1\nhidden_units = many\n", "line 2"),
    ] {
        fs::write(fx.path("bad.cfg"), text).unwrap();
        let o = lesion(&[
            "train",
            "--config",
            &fx.p("bad.cfg"),
            "--data",
            &fx.p("data/train.csv"),
            "--out",
            &fx.p("bad.mscw"),
        ]);
        assert_eq!(o.status.code(), Some(2));
        assert!(stderr(&o).contains(needle), "{}", stderr(&o));
        assert!(!fx.path("bad.mscw").exists());
    }
}

#[test]
fn predict_counts_passes_and_round_trips() {
    let fx = Fixture::new();
    let model = fx.p("model.mscw");
    let data = fx.p("data/test.csv");
    let tta = ok(&["predict", "--model", &model, "--data", &data, "--out", &fx.p("tta.csv")]);
    let plain = ok(&[
        "predict",
        "--model",
        &model,
        "--data",
        &data,
        "--out",
        &fx.p("plain.csv"),
        "--no-tta",
    ]);
    assert!(tta.contains("3 predictions, 24 forward passes"), "{tta}");
    assert!(plain.contains("3 predictions, 3 forward passes"), "{plain}");
    let records = read_predictions(fx.path("tta.csv")).unwrap();
    assert_eq!(records.len(), 3);
    assert!(records.iter().all(|r| (r.probs.iter().sum::<f64>() - 1.0).abs() < 1e-8));

    let mut bytes = fs::read(fx.path("model.mscw")).unwrap();
    // Header, "block1.weight" entry header, then three bytes into its payload.
    bytes[12 + 2 + 13 + 1 + 16 + 3] ^= 0x40;
    fs::write(fx.path("broken.mscw"), bytes).unwrap();
    let o = lesion(&[
        "predict",
        "--model",
        &fx.p("broken.mscw"),
        "--data",
        &data,
        "--out",
        &fx.p("x.csv"),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("checksum mismatch"), "{}", stderr(&o));
}

#[test]
fn ensemble_and_evaluate() {
    let fx = Fixture::new();
    let preds = fx.p("p.csv");
    ok(&[
        "predict",
        "--model",
        &fx.p("model.mscw"),
        "--data",
        &fx.p("data/test.csv"),
        "--out",
        &preds,
    ]);
    ok(&["ensemble", "--out", &fx.p("one.csv"), &preds]);
    ok(&["ensemble", "--out", &fx.p("three.csv"), &preds, &preds, &preds]);
    let base = read_predictions(&preds).unwrap();
    for merged in ["one.csv", "three.csv"] {
        for (a, b) in base.iter().zip(read_predictions(fx.path(merged)).unwrap()) {
            assert_eq!(a.image_id, b.image_id);
            for (x, y) in a.probs.iter().zip(b.probs) {
                assert!((x - y).abs() <= 1e-8);
            }
        }
    }

    let table = ok(&["evaluate", "--preds", &preds, "--labels", &fx.p("data/test.csv")]);
    let rows: Vec<&str> = table.lines().map(|l| l.split_whitespace().next().unwrap()).collect();
    assert_eq!(rows, ["task", "melanoma", "seborrheic_keratosis", "average"]);

    let short: String = fs::read_to_string(&preds)
        .unwrap()
        .lines()
        .take(3)
        .map(|l| format!("{l}\n"))
        .collect();
    fs::write(fx.path("short.csv"), short).unwrap();
    let o = lesion(&["ensemble", "--out", &fx.p("bad.csv"), &preds, &fx.p("short.csv")]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("missing"), "{}", stderr(&o));
    let o = lesion(&[
        "evaluate",
        "--preds",
        &fx.p("short.csv"),
        "--labels",
        &fx.p("data/test.csv"),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn shipped_presets_are_valid() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let desk = RunConfig::parse(&fs::read_to_string(dir.join("desk.cfg")).unwrap()).unwrap();
    assert_eq!(desk, RunConfig::default());
    let full = RunConfig::parse(&fs::read_to_string(dir.join("full-scale.cfg")).unwrap()).unwrap();
    assert_eq!((full.coarse_size, full.fine_resize, full.crop_size), (224, 448, 224));
    assert_eq!((full.hidden_units, full.stage2_updates), (1024, 3500));
}
