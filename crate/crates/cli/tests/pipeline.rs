use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use steervec_core::model::init_params;
use steervec_core::steering::{VectorContent, VectorFile};
use steervec_core::train::load_checkpoint;

const SMALL: &str = r#"
seed = 3

[data]
n_train = 600
n_val = 200
n_test = 400

[model]
n_layers = 2
d_model = 8
n_heads = 2
d_ff = 16

[train]
epochs = 2
batch_size = 32
learning_rate = 0.003
"#;

fn steervec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_steervec"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = steervec(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn code(args: &[&str]) -> i32 {
    steervec(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Workspace {
    _tmp: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

impl Workspace {
    fn new(extra: &str) -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let root = tmp.path().to_path_buf();
        let config = root.join("run.toml");
        fs::write(&config, format!("{SMALL}\n{extra}")).unwrap();
        Self {
            _tmp: tmp,
            root,
            config,
        }
    }

    fn dir(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn cfg(&self) -> &str {
        s(&self.config)
    }

    /// gen-data then train, into `data/` and `model/`.
    fn prepare(&self) {
        ok(&[
            "gen-data",
            "--config",
            self.cfg(),
            "--out",
            s(&self.dir("data")),
        ]);
        ok(&[
            "train",
            "--config",
            self.cfg(),
            "--data",
            s(&self.dir("data")),
            "--out",
            s(&self.dir("model")),
        ]);
    }

    fn checkpoint(&self) -> PathBuf {
        self.dir("model").join("checkpoint.stvp")
    }
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn full_chain() {
    let ws = Workspace::new("");
    ws.prepare();
    let (data, ckpt) = (ws.dir("data"), ws.checkpoint());

    let manifest = json(&data.join("manifest.json"));
    assert_eq!(
        manifest["train"]["group_counts"].as_array().unwrap().len(),
        4
    );
    let minority = manifest["minority_fraction"].as_f64().unwrap();
    assert!((minority - 0.05).abs() < 0.03, "{minority}");

    ok(&[
        "extract",
        "--config",
        ws.cfg(),
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&data),
        "--out",
        s(&ws.dir("vec")),
    ]);
    let cands = VectorFile::load(ws.dir("vec").join("candidates.stvc")).unwrap();
    assert_eq!(cands.content.candidates().unwrap().len(), 2);

    ok(&[
        "sweep",
        "--config",
        ws.cfg(),
        "--checkpoint",
        s(&ckpt),
        "--vector",
        s(&ws.dir("vec").join("candidates.stvc")),
        "--data",
        s(&data),
        "--out",
        s(&ws.dir("sweep")),
    ]);
    let sweep = json(&ws.dir("sweep").join("sweep.json"));

    // without a vector: the ERM row
    ok(&[
        "eval",
        "--config",
        ws.cfg(),
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&data),
        "--out",
        s(&ws.dir("base")),
    ]);
    let base = json(&ws.dir("base").join("eval_report.json"));
    assert_eq!(base["report"]["intervention"], "none");
    assert!(base["baseline"].is_null());
    let text = fs::read_to_string(ws.dir("base").join("eval_report.txt")).unwrap();
    assert!(text.contains("ERM"));

    // swept vector on validation data reproduces the sweep's numbers
    let chosen = ws.dir("sweep").join("chosen.stvc");
    ok(&[
        "eval",
        "--config",
        ws.cfg(),
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&data),
        "--vector",
        s(&chosen),
        "--split",
        "val",
        "--out",
        s(&ws.dir("steer-val")),
    ]);
    let val = json(&ws.dir("steer-val").join("eval_report.json"));
    assert_eq!(val["report"]["wga"], sweep["chosen_wga"]);
    assert_eq!(val["report"]["aga"], sweep["chosen_aga"]);
    assert_eq!(val["layer"], sweep["chosen_layer"]);

    // full field and subtract modes run on test data
    ok(&[
        "eval",
        "--config",
        ws.cfg(),
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&data),
        "--mode",
        "full",
        "--vector",
        s(&ws.dir("vec").join("field.stvc")),
        "--out",
        s(&ws.dir("full")),
    ]);
    assert_eq!(
        json(&ws.dir("full").join("eval_report.json"))["report"]["intervention"],
        "full"
    );
    ok(&[
        "eval",
        "--config",
        ws.cfg(),
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&data),
        "--mode",
        "subtract",
        "--alpha",
        "0.5",
        "--vector",
        s(&chosen),
        "--out",
        s(&ws.dir("sub")),
    ]);

    ok(&[
        "profile",
        "--config",
        ws.cfg(),
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&data),
        "--candidates",
        s(&ws.dir("vec").join("candidates.stvc")),
        "--out",
        s(&ws.dir("profile")),
    ]);
    let profile = json(&ws.dir("profile").join("profile.json"));
    let layers: Vec<u64> = profile["entries"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| e["layer"].as_u64().unwrap())
        .collect();
    assert!(layers.windows(2).all(|w| w[0] < w[1]));
    assert!(fs::read_to_string(ws.dir("profile").join("profile.txt"))
        .unwrap()
        .contains("layer"));

    // checkpoint reloads and re-evaluates to the same report
    ok(&[
        "eval",
        "--config",
        ws.cfg(),
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&data),
        "--out",
        s(&ws.dir("base2")),
    ]);
    assert_eq!(
        fs::read(ws.dir("base").join("eval_report.json")).unwrap(),
        fs::read(ws.dir("base2").join("eval_report.json")).unwrap()
    );
}

#[test]
fn commands_are_byte_reproducible() {
    let ws = Workspace::new("");
    ws.prepare();
    let ckpt = ws.checkpoint();
    ok(&[
        "gen-data",
        "--config",
        ws.cfg(),
        "--out",
        s(&ws.dir("data2")),
    ]);
    for f in ["train.txt", "val.txt", "test.txt", "manifest.json"] {
        assert_eq!(
            fs::read(ws.dir("data").join(f)).unwrap(),
            fs::read(ws.dir("data2").join(f)).unwrap(),
            "{f}"
        );
    }
    ok(&[
        "train",
        "--config",
        ws.cfg(),
        "--data",
        s(&ws.dir("data")),
        "--out",
        s(&ws.dir("model2")),
    ]);
    for f in ["checkpoint.stvp", "train_report.json"] {
        assert_eq!(
            fs::read(ws.dir("model").join(f)).unwrap(),
            fs::read(ws.dir("model2").join(f)).unwrap(),
            "{f}"
        );
    }
    for out in ["v1", "v2"] {
        ok(&[
            "extract",
            "--config",
            ws.cfg(),
            "--checkpoint",
            s(&ckpt),
            "--data",
            s(&ws.dir("data")),
            "--out",
            s(&ws.dir(out)),
        ]);
    }
    for f in ["candidates.stvc", "field.stvc"] {
        assert_eq!(
            fs::read(ws.dir("v1").join(f)).unwrap(),
            fs::read(ws.dir("v2").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn swapped_orientation_negates_and_evaluates_identically() {
    let ws = Workspace::new("");
    ws.prepare();
    let (data, ckpt) = (ws.dir("data"), ws.checkpoint());
    for (orient, out) in [
        ("majority-minus-minority", "a"),
        ("minority-minus-majority", "b"),
    ] {
        ok(&[
            "extract",
            "--config",
            ws.cfg(),
            "--checkpoint",
            s(&ckpt),
            "--data",
            s(&data),
            "--orientation",
            orient,
            "--out",
            s(&ws.dir(out)),
        ]);
    }
    let load = |d: &str| VectorFile::load(ws.dir(d).join("candidates.stvc")).unwrap();
    let (a, b) = (load("a"), load("b"));
    let (VectorContent::Candidates(ca), VectorContent::Candidates(cb)) = (&a.content, &b.content)
    else {
        panic!("candidate files expected");
    };
    for (x, y) in ca.iter().zip(cb) {
        assert!(x.raw.iter().zip(&y.raw).all(|(p, q)| *p == -*q));
    }
    for (d, out) in [("a", "ea"), ("b", "eb")] {
        ok(&[
            "eval",
            "--config",
            ws.cfg(),
            "--checkpoint",
            s(&ckpt),
            "--data",
            s(&data),
            "--layer",
            "2",
            "--vector",
            s(&ws.dir(d).join("candidates.stvc")),
            "--out",
            s(&ws.dir(out)),
        ]);
    }
    assert_eq!(
        json(&ws.dir("ea").join("eval_report.json"))["report"],
        json(&ws.dir("eb").join("eval_report.json"))["report"]
    );
}

#[test]
fn zero_learning_rate_keeps_initialization() {
    let ws = Workspace::new("");
    fs::write(
        &ws.config,
        SMALL.replace("learning_rate = 0.003", "learning_rate = 0.0"),
    )
    .unwrap();
    ws.prepare();
    let trained = load_checkpoint(ws.checkpoint()).unwrap();
    assert_eq!(trained, init_params(&trained.config).unwrap());
}

#[test]
fn different_seeds_give_different_checkpoints() {
    let ws = Workspace::new("");
    ws.prepare();
    ok(&[
        "train",
        "--config",
        ws.cfg(),
        "--seed",
        "4",
        "--data",
        s(&ws.dir("data")),
        "--out",
        s(&ws.dir("other")),
    ]);
    assert_ne!(
        fs::read(ws.checkpoint()).unwrap(),
        fs::read(ws.dir("other").join("checkpoint.stvp")).unwrap()
    );
}

#[test]
fn exit_codes() {
    let ws = Workspace::new("");
    ws.prepare();
    let (data, ckpt) = (ws.dir("data"), ws.checkpoint());

    // invalid config
    let bad = ws.dir("bad.toml");
    fs::write(&bad, "[data]\nrho = 0.4\n").unwrap();
    assert_eq!(
        code(&["gen-data", "--config", s(&bad), "--out", s(&ws.dir("x"))]),
        2
    );
    fs::write(&bad, "this is = = not toml").unwrap();
    assert_eq!(
        code(&["gen-data", "--config", s(&bad), "--out", s(&ws.dir("x"))]),
        2
    );

    // unwritable output directory
    let file = ws.dir("plain-file");
    fs::write(&file, "x").unwrap();
    assert_eq!(
        code(&[
            "gen-data",
            "--config",
            ws.cfg(),
            "--out",
            s(&file.join("sub"))
        ]),
        2
    );

    // divergence
    let wild = ws.dir("wild.toml");
    fs::write(
        &wild,
        SMALL.replace("learning_rate = 0.003", "learning_rate = 1e30"),
    )
    .unwrap();
    assert_eq!(
        code(&[
            "train",
            "--config",
            s(&wild),
            "--data",
            s(&data),
            "--out",
            s(&ws.dir("w"))
        ]),
        3
    );

    // vectors from another model
    ok(&[
        "train",
        "--config",
        ws.cfg(),
        "--seed",
        "9",
        "--data",
        s(&data),
        "--out",
        s(&ws.dir("m9")),
    ]);
    ok(&[
        "extract",
        "--config",
        ws.cfg(),
        "--checkpoint",
        s(&ws.dir("m9").join("checkpoint.stvp")),
        "--data",
        s(&data),
        "--out",
        s(&ws.dir("v9")),
    ]);
    let foreign = ws.dir("v9").join("candidates.stvc");
    assert_eq!(
        code(&[
            "sweep",
            "--config",
            ws.cfg(),
            "--checkpoint",
            s(&ckpt),
            "--vector",
            s(&foreign),
            "--data",
            s(&data),
            "--out",
            s(&ws.dir("y"))
        ]),
        4
    );
    assert_eq!(
        code(&[
            "eval",
            "--config",
            ws.cfg(),
            "--checkpoint",
            s(&ckpt),
            "--vector",
            s(&foreign),
            "--layer",
            "2",
            "--data",
            s(&data),
            "--out",
            s(&ws.dir("y"))
        ]),
        4
    );

    // tampered dataset file
    let tampered = ws.dir("tampered");
    fs::create_dir_all(&tampered).unwrap();
    for f in ["train.txt", "val.txt", "test.txt", "manifest.json"] {
        fs::copy(data.join(f), tampered.join(f)).unwrap();
    }
    let val = fs::read_to_string(tampered.join("val.txt")).unwrap();
    fs::write(
        tampered.join("val.txt"),
        val.lines().skip(1).collect::<Vec<_>>().join("\n"),
    )
    .unwrap();
    assert_eq!(
        code(&[
            "train",
            "--config",
            ws.cfg(),
            "--data",
            s(&tampered),
            "--out",
            s(&ws.dir("t"))
        ]),
        4
    );

    // corrupt checkpoint and missing files
    let broken = ws.dir("broken.stvp");
    fs::write(&broken, b"STVX not a checkpoint").unwrap();
    assert_eq!(
        code(&[
            "eval",
            "--checkpoint",
            s(&broken),
            "--data",
            s(&data),
            "--out",
            s(&ws.dir("z"))
        ]),
        5
    );
    assert_eq!(
        code(&[
            "eval",
            "--checkpoint",
            s(&ws.dir("nope.stvp")),
            "--data",
            s(&data),
            "--out",
            s(&ws.dir("z"))
        ]),
        5
    );

    // bad flag values
    assert_eq!(code(&["eval", "--mode", "sideways"]), 2);
}

#[test]
fn dump_export_and_import_agree_with_direct_extraction() {
    let ws = Workspace::new("");
    ws.prepare();
    let (data, ckpt) = (ws.dir("data"), ws.checkpoint());
    let dump = ws.dir("train.stvd");
    ok(&[
        "extract",
        "--config",
        ws.cfg(),
        "--checkpoint",
        s(&ckpt),
        "--data",
        s(&data),
        "--export-dump",
        s(&dump),
        "--out",
        s(&ws.dir("direct")),
    ]);
    ok(&[
        "import-dump",
        "--config",
        ws.cfg(),
        "--checkpoint",
        s(&ckpt),
        "--dump",
        s(&dump),
        "--out",
        s(&ws.dir("imported")),
    ]);
    let load = |d: &str, f: &str| VectorFile::load(ws.dir(d).join(f)).unwrap();
    for f in ["candidates.stvc", "field.stvc"] {
        let (a, b) = (load("direct", f), load("imported", f));
        assert_eq!(a.config_digest, b.config_digest);
        let (ra, rb): (Vec<f32>, Vec<f32>) = match (&a.content, &b.content) {
            (VectorContent::Candidates(x), VectorContent::Candidates(y)) => (
                x.iter().flat_map(|c| c.raw.clone()).collect(),
                y.iter().flat_map(|c| c.raw.clone()).collect(),
            ),
            (VectorContent::Field { raw: x, .. }, VectorContent::Field { raw: y, .. }) => {
                (x.clone(), y.clone())
            }
            _ => panic!("content kinds differ"),
        };
        assert!(
            ra.iter().zip(&rb).all(|(p, q)| (p - q).abs() <= 1e-5),
            "{f}"
        );
    }
}
