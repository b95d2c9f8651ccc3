use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use infinet::volume::{read_labels, read_volume, write_labels, write_volume, Axis, LabelVolume, LabeledVolume};
use infinet_cli::pgm::decode_pgm;

fn infinet(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_infinet"))
        .args(args)
        .current_dir(cwd)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn phantom(dir: &Path, name: &str, seed: u64) {
    let o = infinet(
        &[
            "gen-phantom",
            "--seed",
            &seed.to_string(),
            "--dims",
            "16",
            "--out",
            name,
        ],
        dir,
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

const TINY: &[&str] = &["--base-channels", "4", "--max-epochs", "2", "--seed", "3"];

fn train(dir: &Path, data: &str, out: &str, view: &str) -> Output {
    let mut args = vec!["train", "--data-dir", data, "--out", out, "--view", view];
    args.extend_from_slice(TINY);
    infinet(&args, dir)
}

#[test]
fn gen_phantom_is_readable_and_reproducible() {
    let d = tempfile::tempdir().unwrap();
    phantom(d.path(), "a.ivol", 1);
    phantom(d.path(), "b.ivol", 1);
    let a = fs::read(d.path().join("a.ivol")).unwrap();
    assert_eq!(a, fs::read(d.path().join("b.ivol")).unwrap());
    let v = read_volume(d.path().join("a.ivol")).unwrap();
    assert_eq!(v.dims, [16, 16, 16]);
    assert_eq!(v.seed, 1);

    let o = infinet(&["gen-phantom", "--dims", "30", "--out", "c.ivol"], d.path());
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("multiples of 8"));
    assert!(!d.path().join("c.ivol").exists());
}

#[test]
fn gen_phantom_reads_spec_file() {
    let d = tempfile::tempdir().unwrap();
    fs::write(d.path().join("s.txt"), "dims = 8, 16, 24\nnoise_std = 0.01 # quiet\n").unwrap();
    let o = infinet(&["gen-phantom", "--spec", "s.txt", "--out", "p.ivol"], d.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(read_volume(d.path().join("p.ivol")).unwrap().dims, [8, 16, 24]);
    fs::write(d.path().join("bad.txt"), "colour = red\n").unwrap();
    assert_eq!(
        code(&infinet(
            &["gen-phantom", "--spec", "bad.txt", "--out", "q.ivol"],
            d.path()
        )),
        2
    );
}

#[test]
fn usage_errors_exit_one() {
    let d = tempfile::tempdir().unwrap();
    assert_eq!(code(&infinet(&["gen-phantom"], d.path())), 1);
    assert_eq!(code(&infinet(&["frobnicate"], d.path())), 1);
    assert_eq!(code(&infinet(&["grad-check", "--op", "nope"], d.path())), 1);
    assert_eq!(
        code(&infinet(
            &["export-slices", "--volume", "x", "--axis", "up", "--out-dir", "o"],
            d.path()
        )),
        1
    );
    assert_eq!(code(&infinet(&["--help"], d.path())), 0);
}

#[test]
fn train_all_views_then_infer_and_evaluate() {
    let d = tempfile::tempdir().unwrap();
    fs::create_dir(d.path().join("data")).unwrap();
    phantom(d.path(), "data/a.ivol", 1);
    let o = train(d.path(), "data", "run", "all");
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for axis in Axis::ALL {
        assert!(d.path().join(format!("run/{axis}.ckpt")).exists());
        let json: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(d.path().join(format!("run/{axis}.report.json"))).unwrap())
                .unwrap();
        assert_eq!(json["epoch_losses"].as_array().unwrap().len(), 2);
    }
    assert!(stdout(&o).contains("view=sagittal epochs=2"));
    assert!(fs::read_to_string(d.path().join("run/config.txt"))
        .unwrap()
        .contains("seed = 3"));

    let three = [
        "infer",
        "--checkpoints",
        "run/axial.ckpt",
        "run/coronal.ckpt",
        "run/sagittal.ckpt",
        "--volume",
        "data/a.ivol",
        "--prob-dir",
        "probs",
        "--out",
    ];
    let o = infinet(&[&three[..], &["p1.ilbl"]].concat(), d.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(!stderr(&o).contains("single-view"));
    let o = infinet(&[&three[..], &["p2.ilbl"]].concat(), d.path());
    assert_eq!(code(&o), 0);
    let p1 = fs::read(d.path().join("p1.ilbl")).unwrap();
    assert_eq!(p1, fs::read(d.path().join("p2.ilbl")).unwrap());
    for f in ["axial", "coronal", "sagittal", "aggregated"] {
        assert!(d.path().join(format!("probs/{f}.iprob")).exists());
    }
    let labels = read_labels(d.path().join("p1.ilbl")).unwrap();
    assert_eq!(labels.dims, [16, 16, 16]);
    assert!(labels.spec_id.contains("coronal:seed="));

    let o = infinet(
        &[
            "infer",
            "--checkpoints",
            "run/axial.ckpt",
            "--volume",
            "data/a.ivol",
            "--out",
            "one.ilbl",
        ],
        d.path(),
    );
    assert_eq!(code(&o), 0);
    assert!(stderr(&o).contains("single-view mode"));

    let o = infinet(&["evaluate", "--pred", "p1.ilbl", "--truth", "data/a.ivol"], d.path());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("mean_dice"));
}

#[test]
fn train_failures_map_to_exit_codes() {
    let d = tempfile::tempdir().unwrap();
    let o = train(d.path(), "missing", "run", "axial");
    assert_eq!(code(&o), 2);

    fs::create_dir(d.path().join("data")).unwrap();
    phantom(d.path(), "data/a.ivol", 1);
    // Stored volumes cannot hold NaN, so diverge instead.
    let o = infinet(
        &[
            "train",
            "--data-dir",
            "data",
            "--out",
            "run",
            "--base-channels",
            "4",
            "--lr0",
            "1e20",
        ],
        d.path(),
    );
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(
        stderr(&o).contains("non-finite loss at epoch 0, batch 1"),
        "{}",
        stderr(&o)
    );

    let mut v = read_volume(d.path().join("data/a.ivol")).unwrap();
    v.t2[100] = f32::NAN;
    assert!(
        write_volume(&v, d.path().join("data/b.ivol")).is_err() || code(&train(d.path(), "data", "r", "axial")) == 2
    );

    fs::write(d.path().join("bad.cfg"), "lr0 = fast\n").unwrap();
    let o = infinet(
        &["train", "--config", "bad.cfg", "--data-dir", "data", "--out", "r"],
        d.path(),
    );
    assert_eq!(code(&o), 1);
}

#[test]
fn train_resume_continues_to_same_losses() {
    let d = tempfile::tempdir().unwrap();
    fs::create_dir(d.path().join("data")).unwrap();
    phantom(d.path(), "data/a.ivol", 1);
    let run = |out: &str, epochs: &str, extra: &[&str]| {
        let mut args = vec!["train", "--data-dir", "data", "--view", "coronal", "--out", out];
        args.extend_from_slice(&["--base-channels", "4", "--seed", "3", "--max-epochs", epochs]);
        args.extend_from_slice(extra);
        infinet(&args, d.path())
    };
    assert_eq!(code(&run("full", "3", &[])), 0);
    assert_eq!(code(&run("half", "1", &[])), 0);
    let o = run("half", "3", &["--resume", "half/coronal.ckpt"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let full = read_report(&d.path().join("full/coronal.report.json"));
    let resumed = read_report(&d.path().join("half/coronal.report.json"));
    assert_eq!(full.len(), 3);
    assert_eq!(full, resumed);
    assert!(fs::read_to_string(d.path().join("full/config.txt"))
        .unwrap()
        .contains("coronal"));

    let o = run("x", "3", &["--resume", "half/coronal.ckpt", "--view", "all"]);
    assert_eq!(code(&o), 1);
}

fn read_report(path: &Path) -> Vec<f64> {
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    json["epoch_losses"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_f64().unwrap())
        .collect()
}

fn labels(dims: [usize; 3], labels: Vec<u8>) -> LabelVolume {
    LabelVolume {
        dims,
        voxel_size: [1.0; 3],
        labels,
        num_classes: 4,
        seed: 0,
        spec_id: "hand".into(),
    }
}

#[test]
fn evaluate_hand_masks_and_mismatch() {
    let d = tempfile::tempdir().unwrap();
    // CSF: 4 predicted, 6 true, 3 shared -> 2*3/(4+6) = 0.6.
    let pred = labels([1, 2, 5], vec![1, 1, 1, 1, 0, 0, 0, 0, 0, 0]);
    let truth = labels([1, 2, 5], vec![1, 1, 1, 0, 1, 1, 1, 0, 0, 0]);
    write_labels(&pred, d.path().join("p.ilbl")).unwrap();
    write_labels(&truth, d.path().join("t.ilbl")).unwrap();
    let o = infinet(
        &["evaluate", "--pred", "p.ilbl", "--truth", "t.ilbl", "--json", "r.json"],
        d.path(),
    );
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.path().join("r.json")).unwrap()).unwrap();
    assert!((json["classes"][1]["dice"].as_f64().unwrap() - 0.6).abs() < 1e-12);

    let o = infinet(&["evaluate", "--pred", "t.ilbl", "--truth", "t.ilbl"], d.path());
    let json: serde_json::Value = serde_json::from_str(&stdout(&o)[stdout(&o).find('{').unwrap()..]).unwrap();
    assert!(json["classes"].as_array().unwrap().iter().all(|c| c["dice"] == 1.0));

    write_labels(&labels([2, 1, 5], truth.labels.clone()), d.path().join("u.ilbl")).unwrap();
    let o = infinet(&["evaluate", "--pred", "u.ilbl", "--truth", "t.ilbl"], d.path());
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("mismatch"));
}

#[test]
fn grad_check_passes_all_and_reports_each_op() {
    let d = tempfile::tempdir().unwrap();
    let o = infinet(
        &["grad-check", "--op", "all", "--trials", "1", "--json", "g.json"],
        d.path(),
    );
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let out = stdout(&o);
    for op in infinet::gradsuite::OP_NAMES {
        let line = out.lines().find(|l| l.starts_with(op)).unwrap();
        assert!(line.contains("max_rel_error=") && line.ends_with("PASS"), "{line}");
    }
    let json: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.path().join("g.json")).unwrap()).unwrap();
    assert_eq!(json.as_array().unwrap().len(), infinet::gradsuite::OP_NAMES.len());
}

#[test]
fn grad_check_catches_broken_backward() {
    let d = tempfile::tempdir().unwrap();
    let o = infinet(&["grad-check", "--op", infinet::gradsuite::BROKEN_OP], d.path());
    assert_eq!(code(&o), 3, "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).contains("FAIL"));
}

fn ramp_volume() -> LabeledVolume {
    let dims = [8, 8, 16];
    let n = dims.iter().product();
    let mut t1 = vec![0.0f32; n];
    for (i, v) in t1.iter_mut().enumerate() {
        *v = (i % 16) as f32 / 15.0;
    }
    LabeledVolume {
        dims,
        voxel_size: [1.0; 3],
        t1,
        t2: vec![0.5; n],
        labels: (0..n).map(|i| (i % 4) as u8).collect(),
        num_classes: 4,
        seed: 9,
        spec_id: "ramp".into(),
    }
}

#[test]
fn export_slices_counts_levels_and_ordering() {
    let d = tempfile::tempdir().unwrap();
    write_volume(&ramp_volume(), d.path().join("r.ivol")).unwrap();
    for (axis, count) in [("axial", 8), ("coronal", 8), ("sagittal", 16)] {
        let out = format!("out_{axis}");
        let o = infinet(
            &["export-slices", "--volume", "r.ivol", "--axis", axis, "--out-dir", &out],
            d.path(),
        );
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let files: Vec<_> = fs::read_dir(d.path().join(&out)).unwrap().collect();
        assert_eq!(files.len(), 3 * count);
        let text = fs::read_to_string(d.path().join(format!("{out}/labels_{axis}_0000.pgm"))).unwrap();
        assert!(text.contains("seed=9 spec=ramp"));
        let (_, _, px) = decode_pgm(&text).unwrap();
        assert!(px.iter().all(|p| [0, 85, 170, 255].contains(p)));
    }
    // Axial slices are 8 rows by 16 columns of the ramp.
    let text = fs::read_to_string(d.path().join("out_axial/t1_axial_0003.pgm")).unwrap();
    let (w, h, px) = decode_pgm(&text).unwrap();
    assert_eq!((w, h), (16, 8));
    for row in px.chunks(w) {
        assert!(row.windows(2).all(|p| p[0] < p[1]), "{row:?}");
    }

    let mut lv = LabelVolume::from(&ramp_volume());
    lv.spec_id = "only".into();
    write_labels(&lv, d.path().join("l.ilbl")).unwrap();
    let o = infinet(
        &[
            "export-slices",
            "--volume",
            "l.ilbl",
            "--axis",
            "axial",
            "--out-dir",
            "lab",
        ],
        d.path(),
    );
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read_dir(d.path().join("lab")).unwrap().count(), 8);
}
