use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn pdisco(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pdisco"))
        .args(args)
        .env("PDISCO_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn key_values(text: &str) -> BTreeMap<String, String> {
    text.lines()
        .map(|l| {
            let (k, v) = l
                .split_once('=')
                .unwrap_or_else(|| panic!("not key=value: {l}"));
            (k.to_string(), v.to_string())
        })
        .collect()
}

fn small_dataset(dir: &Path) {
    let o = pdisco(&[
        "synth",
        "--out",
        dir.to_str().unwrap(),
        "--classes",
        "2",
        "--parts",
        "2",
        "--images-per-class",
        "12",
        "--image-side",
        "32",
        "--seed",
        "5",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
}

fn tiny_train(data: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "train",
        "--data",
        data.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--k",
        "2",
        "--epochs",
        "1",
        "--batch-size",
        "8",
        "--dim",
        "16",
        "--heads",
        "2",
        "--depth",
        "1",
        "--register-tokens",
        "1",
    ];
    args.extend_from_slice(extra);
    pdisco(&args)
}

fn history_terms(path: &Path) -> Vec<(String, String)> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<_> = l.split(',').collect();
            (f[0].to_string(), f[1].to_string())
        })
        .collect()
}

#[test]
fn synth_prints_counts_and_is_reproducible() {
    let tmp = TempDir::new().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let args = |p: &Path| {
        vec![
            "synth".to_string(),
            "--out".into(),
            p.to_str().unwrap().into(),
            "--classes".into(),
            "3".into(),
            "--images-per-class".into(),
            "4".into(),
            "--image-side".into(),
            "32".into(),
        ]
    };
    let oa = pdisco(&args(&a).iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(code(&oa), 0);
    let kv = key_values(&stdout(&oa));
    assert_eq!(kv["samples"], "12");
    let parts: usize = ["train", "val", "test"]
        .iter()
        .map(|s| kv[*s].parse::<usize>().unwrap())
        .sum();
    assert_eq!(parts, 12);
    pdisco(&args(&b).iter().map(String::as_str).collect::<Vec<_>>());
    for f in [
        "labels.csv",
        "split.csv",
        "keypoints.csv",
        "images/000007.png",
        "masks/000007.png",
    ] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn usage_errors_exit_2() {
    let tmp = TempDir::new().unwrap();
    assert_eq!(code(&pdisco(&["synth"])), 2);
    assert_eq!(code(&pdisco(&["synth", "--out", "x", "--bogus"])), 2);
    assert_eq!(code(&pdisco(&["frobnicate"])), 2);
    let out = tmp.path().join("d");
    let o = pdisco(&[
        "synth",
        "--out",
        out.to_str().unwrap(),
        "--image-side",
        "30",
    ]);
    assert_eq!(code(&o), 2);
    let cfg = tmp.path().join("cfg");
    fs::write(&cfg, "classes = 2\nwings = 4\n").unwrap();
    let o = pdisco(&[
        "synth",
        "--out",
        out.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("wings"));
    let o = pdisco(&["synth", "--out", out.to_str().unwrap(), "--classes", "many"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn config_file_applies_below_flags() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("d");
    let cfg = tmp.path().join("cfg");
    fs::write(
        &cfg,
        format!(
            "out = {}\nclasses = 3\nimages_per_class = 2\nimage_side = 32\n",
            out.display()
        ),
    )
    .unwrap();
    let o = pdisco(&[
        "synth",
        "--config",
        cfg.to_str().unwrap(),
        "--images-per-class",
        "3",
    ]);
    assert_eq!(code(&o), 0);
    assert_eq!(key_values(&stdout(&o))["samples"], "9");
}

#[test]
fn missing_dataset_is_a_runtime_error() {
    let tmp = TempDir::new().unwrap();
    let o = pdisco(&[
        "train",
        "--data",
        tmp.path().join("nope").to_str().unwrap(),
        "--out",
        tmp.path().join("run").to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 1);
}

#[test]
fn train_eval_viz_round_trip() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    let run = tmp.path().join("run");
    small_dataset(&data);

    let o = tiny_train(&data, &run, &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(run.join("best.ckpt").exists());
    let rows = history_terms(&run.join("history.csv"));
    let terms: Vec<_> = rows.iter().map(|(_, t)| t.as_str()).collect();
    for t in [
        "cls",
        "orth",
        "equiv",
        "presence_fg",
        "presence_bg",
        "entropy",
        "tv",
        "total",
    ] {
        assert_eq!(terms.iter().filter(|x| **x == t).count(), 1, "{t}");
    }
    assert!(rows.iter().all(|(e, _)| e == "1"));

    let ckpt = run.join("best.ckpt");
    let report = tmp.path().join("report.txt");
    let o = pdisco(&[
        "eval",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        data.to_str().unwrap(),
        "--report",
        report.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let kv = key_values(&fs::read_to_string(&report).unwrap());
    assert_eq!(
        kv.keys().map(String::as_str).collect::<BTreeSet<_>>(),
        BTreeSet::from(["top1", "nmi", "ari", "kp", "fg_miou", "attention_entropy"])
    );
    for v in kv.values() {
        assert!(v.parse::<f64>().unwrap().is_finite());
    }
    assert_eq!(key_values(&stdout(&o)), kv);

    let image = data.join("images/000000.png");
    let overlay = tmp.path().join("overlay.png");
    let maps = tmp.path().join("maps");
    let viz = |out: &Path| {
        pdisco(&[
            "viz",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--image",
            image.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--soft-maps",
            maps.to_str().unwrap(),
        ])
    };
    assert_eq!(code(&viz(&overlay)), 0);
    let again = tmp.path().join("again.png");
    viz(&again);
    assert_eq!(fs::read(&overlay).unwrap(), fs::read(&again).unwrap());

    let src = image::open(&image).unwrap().to_rgb8();
    let img = image::open(&overlay).unwrap().to_rgb8();
    assert_eq!(img.dimensions(), src.dimensions());
    let tinted: BTreeSet<_> = img
        .pixels()
        .zip(src.pixels())
        .filter(|(a, b)| a != b)
        .map(|(a, b)| {
            // recover the palette color from the 50% blend
            (0..3)
                .map(|c| 2 * a[c] as i32 - b[c] as i32)
                .collect::<Vec<_>>()
        })
        .map(|c| {
            (0..16)
                .min_by_key(|&p| {
                    let q = pdisco_palette(p);
                    (0..3).map(|i| (q[i] - c[i]).abs()).sum::<i32>()
                })
                .unwrap()
        })
        .collect();
    assert!(tinted.len() <= 2, "{tinted:?}");
    let mut names: Vec<_> = fs::read_dir(&maps)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names, ["background.png", "part_1.png", "part_2.png"]);

    let o = pdisco(&[
        "viz",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--image",
        data.join("labels.csv").to_str().unwrap(),
        "--out",
        overlay.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 1);
}

fn pdisco_palette(i: usize) -> [i32; 3] {
    const P: [[i32; 3]; 16] = [
        [230, 25, 75],
        [60, 180, 75],
        [255, 225, 25],
        [0, 130, 200],
        [245, 130, 48],
        [145, 30, 180],
        [70, 240, 240],
        [240, 50, 230],
        [210, 245, 60],
        [250, 190, 212],
        [0, 128, 128],
        [220, 190, 255],
        [170, 110, 40],
        [255, 250, 200],
        [128, 0, 0],
        [170, 255, 195],
    ];
    P[i]
}

#[test]
fn ablation_flags_drop_terms() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    small_dataset(&data);
    let run = tmp.path().join("run");
    let o = tiny_train(
        &data,
        &run,
        &["--no-tv", "--no-equiv", "--no-gumbel", "--no-part-dropout"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let terms: BTreeSet<_> = history_terms(&run.join("history.csv"))
        .into_iter()
        .map(|(_, t)| t)
        .collect();
    assert!(!terms.contains("tv"));
    assert!(!terms.contains("equiv"));
    assert!(terms.contains("entropy"));
    let cfg = fs::read_to_string(run.join("config.txt")).unwrap();
    assert!(cfg.contains("weight_tv=0 # flag"));
    assert!(cfg.contains("gumbel=false # flag"));
}

#[test]
fn eval_respects_available_annotations() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    small_dataset(&data);
    fs::remove_file(data.join("keypoints.csv")).unwrap();

    let o = pdisco(&[
        "eval",
        "--inject-ground-truth",
        "--data",
        data.to_str().unwrap(),
        "--metrics",
        "nmi,ari,fg_miou,top1",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let kv = key_values(&stdout(&o));
    assert!(!kv.contains_key("kp"));
    for m in ["nmi", "ari", "fg_miou", "top1"] {
        assert!(
            (kv[m].parse::<f64>().unwrap() - 1.0).abs() < 1e-12,
            "{m}={}",
            kv[m]
        );
    }

    let o = pdisco(&[
        "eval",
        "--inject-ground-truth",
        "--data",
        data.to_str().unwrap(),
        "--metrics",
        "kp",
    ]);
    assert_eq!(code(&o), 1);
    let o = pdisco(&[
        "eval",
        "--inject-ground-truth",
        "--data",
        data.to_str().unwrap(),
        "--metrics",
        "mystery",
    ]);
    assert_eq!(code(&o), 2);
}
