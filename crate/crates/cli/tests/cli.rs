use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use slimdet::{data, netcfg, zoo};

fn slimdet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_slimdet"))
        .args(args)
        .env_remove("SLIMDET_THREADS")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = slimdet(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    slimdet(args).status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Short toy training run; returns the weights path.
fn trained(dir: &Path) -> std::path::PathBuf {
    let w = dir.join("toy.weights");
    ok(&[
        "--seed",
        "3",
        "train-toy",
        "--samples",
        "8",
        "--epochs",
        "2",
        "--out-weights",
        p(&w),
    ]);
    w
}

#[test]
fn inspect_lists_layers() {
    let out = ok(&["inspect", "--cfg", "toy"]);
    let total = slimdet::graph::count_parameters(&zoo::toy()).unwrap().total;
    assert!(out.contains(&format!("total parameters: {total}")), "{out}");
    assert!(out.lines().count() > zoo::toy().layers.len());
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.cfg");
    fs::write(&bad, "[net]\nwidth=32\nheight=32\nchannels=3\n[bogus]\n").unwrap();
    assert_eq!(code(&["validate", "--cfg", p(&bad)]), 2);
    assert_eq!(code(&["validate", "--cfg", p(&dir.path().join("missing.cfg"))]), 4);
    assert_eq!(code(&["inspect", "--cfg", "toy", "--no-such-flag"]), 2);
    assert_eq!(code(&["--threads", "0", "inspect", "--cfg", "toy"]), 2);

    let short = dir.path().join("short.weights");
    let net = zoo::toy();
    let bytes = netcfg::save_weights(&netcfg::WeightStore::zeros(&net).unwrap(), &net).unwrap();
    fs::write(&short, &bytes[..bytes.len() - 40]).unwrap();
    let out = slimdet(&["validate", "--cfg", "toy", "--weights", p(&short)]);
    assert_eq!(out.status.code(), Some(3));
    let err = String::from_utf8_lossy(&out.stderr);
    let floats = (bytes.len() - 20) / 4;
    assert!(
        err.contains(&format!("expected {floats} floats, found {}", floats - 10)),
        "{err}"
    );
}

#[test]
fn train_infer_prune_round() {
    let dir = tempfile::tempdir().unwrap();
    let w = trained(dir.path());
    // same flags, same bytes
    let w2 = dir.path().join("again.weights");
    ok(&[
        "--seed",
        "3",
        "train-toy",
        "--samples",
        "8",
        "--epochs",
        "2",
        "--out-weights",
        p(&w2),
    ]);
    assert_eq!(fs::read(&w).unwrap(), fs::read(&w2).unwrap());

    let images = dir.path().join("imgs");
    fs::create_dir_all(&images).unwrap();
    for (k, s) in data::synthetic_shapes(3, 48, 5, 0).iter().enumerate() {
        data::save_png(&s.image, &images.join(format!("img{}.png", 2 - k))).unwrap();
    }
    let ann = dir.path().join("ann");
    let run = || {
        ok(&[
            "infer",
            "--cfg",
            "toy",
            "--weights",
            p(&w),
            "--input",
            p(&images),
            "--conf",
            "0.01",
            "--annotate",
            p(&ann),
        ])
    };
    let a = run();
    assert_eq!(a, run());
    let ids: Vec<&str> = a.lines().map(|l| l.split(' ').next().unwrap()).collect();
    let mut sorted = ids.clone();
    sorted.sort();
    assert_eq!(ids, sorted, "records follow sorted path order");
    for k in 0..3 {
        assert!(ann.join(format!("img{k}.png")).is_file());
    }

    let (pc, pw) = (dir.path().join("p.cfg"), dir.path().join("p.weights"));
    let report = ok(&[
        "prune",
        "--cfg",
        "toy",
        "--weights",
        p(&w),
        "--ratio",
        "0.5",
        "--out-cfg",
        p(&pc),
        "--out-weights",
        p(&pw),
    ]);
    assert!(!report.is_empty());
    assert!(ok(&["validate", "--cfg", p(&pc), "--weights", p(&pw)]).starts_with("ok"));
    let ft = dir.path().join("ft.weights");
    ok(&[
        "fine-tune",
        "--cfg",
        p(&pc),
        "--weights",
        p(&pw),
        "--samples",
        "8",
        "--epochs",
        "1",
        "--out-weights",
        p(&ft),
    ]);
    assert!(ok(&["validate", "--cfg", p(&pc), "--weights", p(&ft)]).starts_with("ok"));
}

#[test]
fn sweep_table() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&["sweep", "--cfg", "toy", "--ratios", ""]), 2);
    let w = trained(dir.path());
    let out = ok(&[
        "sweep",
        "--cfg",
        "toy",
        "--weights",
        p(&w),
        "--ratios",
        "0.2,0.5",
        "--samples",
        "8",
        "--n",
        "2",
    ]);
    let params: Vec<usize> = out
        .lines()
        .filter(|l| l.trim_start().starts_with(|c: char| c.is_ascii_digit()))
        .map(|l| l.split_whitespace().nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(params.len(), 2, "{out}");
    assert!(params[0] > params[1]);

    let ranged = ok(&["prune", "--cfg", "toy", "--weights", p(&w), "--sweep", "0.1:0.3:0.1"]);
    assert_eq!(ranged.lines().filter(|l| l.contains('%')).count(), 3, "{ranged}");
}

#[test]
fn eval_and_bench_on_disk_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let w = trained(dir.path());
    let split = dir.path().join("set");
    ok(&[
        "--seed",
        "2",
        "make-synthetic",
        "--out",
        p(&split),
        "--train",
        "4",
        "--test",
        "6",
        "--val",
        "2",
    ]);
    let list = split.join("test.txt");
    let report = dir.path().join("eval.txt");
    let out = ok(&[
        "eval",
        "--cfg",
        "toy",
        "--weights",
        p(&w),
        "--list",
        p(&list),
        "--report",
        p(&report),
    ]);
    assert_eq!(out, fs::read_to_string(&report).unwrap());
    assert!(out.contains("mAP"), "{out}");
    assert!(ok(&[
        "eval",
        "--cfg",
        "toy",
        "--weights",
        p(&w),
        "--list",
        p(&list),
        "--ap-interp",
        "voc11"
    ])
    .contains("mAP"));
    assert_eq!(
        code(&["eval", "--cfg", "toy", "--list", p(&list), "--ap-interp", "nope"]),
        2
    );

    let bench = ok(&[
        "--threads",
        "1",
        "bench",
        "--cfg",
        "toy",
        "--weights",
        p(&w),
        "--n",
        "3",
        "--warmup",
        "1",
    ]);
    assert!(bench.contains("FPS"), "{bench}");
}

#[test]
fn augment_preview_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        ok(&[
            "--seed",
            "4",
            "augment-preview",
            "--samples",
            "6",
            "--size",
            "64",
            "--basic",
            "--out",
            p(&out),
        ]);
        (
            fs::read(&out).unwrap(),
            fs::read_to_string(out.with_extension("txt")).unwrap(),
        )
    };
    let (a, b) = (run("a.png"), run("b.png"));
    assert_eq!(a, b);
    let img = image::load_from_memory(&a.0).unwrap();
    assert_eq!((img.width(), img.height()), (64, 64));
}

#[test]
fn config_file_with_flag_override() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("train.cfg");
    fs::write(&cfg, "epochs=3\nlr=0.02\nseed=9\n").unwrap();
    let hist = dir.path().join("h.jsonl");
    let w = dir.path().join("w.weights");
    ok(&[
        "--config",
        p(&cfg),
        "train-toy",
        "--samples",
        "4",
        "--epochs",
        "1",
        "--history",
        p(&hist),
        "--out-weights",
        p(&w),
    ]);
    assert_eq!(fs::read_to_string(&hist).unwrap().lines().count(), 1);
    fs::write(&cfg, "epochs=3\nwat=1\n").unwrap();
    assert_eq!(code(&["--config", p(&cfg), "train-toy", "--out-weights", p(&w)]), 2);
}
