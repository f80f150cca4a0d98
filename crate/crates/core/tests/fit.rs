use std::fs;
use std::path::Path;

use pdisco::backbone::BackboneConfig;
use pdisco::data::{self, SynthSpec};
use pdisco::head::ModelConfig;
use pdisco::trainer::{self, Configs, FitOptions, TrainConfig};
use pdisco::Error;
use tempfile::TempDir;

fn tiny(epochs: usize, seed: u64) -> Configs {
    Configs {
        model: ModelConfig {
            k: 2,
            classes: 2,
            dim: 16,
            height: 4,
            width: 4,
            ..ModelConfig::default()
        },
        backbone: BackboneConfig {
            depth: 1,
            heads: 2,
            feat_dim: 16,
            register_tokens: 1,
            ..BackboneConfig::default()
        },
        train: TrainConfig {
            epochs,
            batch_size: 8,
            seed,
            ..TrainConfig::default()
        },
    }
}

fn dataset(dir: &Path, per_class: usize) -> data::Dataset {
    let spec = SynthSpec {
        classes: 2,
        parts_per_object: 2,
        images_per_class: per_class,
        image_side: 32,
        seed: 9,
        ..SynthSpec::default()
    };
    data::generate(&spec, dir).unwrap();
    data::load(dir).unwrap()
}

fn opts(dir: &Path) -> FitOptions {
    FitOptions {
        out_dir: dir.to_path_buf(),
        resume: None,
        keep_epoch_checkpoints: true,
    }
}

#[test]
fn one_epoch_smoke() {
    let tmp = TempDir::new().unwrap();
    let ds = dataset(&tmp.path().join("d"), 8);
    let run = tmp.path().join("run");
    let cfgs = tiny(1, 0);
    let out = trainer::fit(&ds, &cfgs, &opts(&run), |_| {}).unwrap();
    for f in ["last.ckpt", "best.ckpt", "epoch_001.ckpt", "history.csv"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let ck = trainer::load_checkpoint(&run.join("last.ckpt")).unwrap();
    assert_eq!(ck.configs, cfgs);
    assert_eq!(ck.state, out.state);
    let hist = trainer::read_history(&run.join("history.csv")).unwrap();
    assert_eq!(hist, out.history);
    assert_eq!(hist.iter().filter(|r| r.term == "val_top1").count(), 1);
}

#[test]
fn resume_matches_an_uninterrupted_run() {
    let tmp = TempDir::new().unwrap();
    let ds = dataset(&tmp.path().join("d"), 8);
    let (straight, split) = (tmp.path().join("a"), tmp.path().join("b"));
    trainer::fit(&ds, &tiny(3, 4), &opts(&straight), |_| {}).unwrap();
    trainer::fit(&ds, &tiny(2, 4), &opts(&split), |_| {}).unwrap();
    let resumed = FitOptions {
        resume: Some(split.join("epoch_002.ckpt")),
        ..opts(&split)
    };
    trainer::fit(&ds, &tiny(3, 4), &resumed, |_| {}).unwrap();
    assert_eq!(
        fs::read(straight.join("last.ckpt")).unwrap(),
        fs::read(split.join("last.ckpt")).unwrap()
    );
    assert_eq!(
        fs::read(straight.join("history.csv")).unwrap(),
        fs::read(split.join("history.csv")).unwrap()
    );

    let mut other = tiny(3, 4);
    other.train.lr_head *= 2.0;
    let bad = FitOptions {
        resume: Some(split.join("epoch_002.ckpt")),
        ..opts(&tmp.path().join("c"))
    };
    assert!(matches!(
        trainer::fit(&ds, &other, &bad, |_| {}),
        Err(Error::Config(_))
    ));
}

#[test]
fn checkpoint_bytes_are_stable_and_corruption_is_detected() {
    let tmp = TempDir::new().unwrap();
    let ds = dataset(&tmp.path().join("d"), 6);
    let run = tmp.path().join("run");
    trainer::fit(&ds, &tiny(1, 2), &opts(&run), |_| {}).unwrap();
    let path = run.join("last.ckpt");
    let bytes = fs::read(&path).unwrap();

    let ck = trainer::load_checkpoint(&path).unwrap();
    let again = tmp.path().join("again.ckpt");
    trainer::save_checkpoint(&again, &ck.configs, &ck.state).unwrap();
    assert_eq!(fs::read(&again).unwrap(), bytes);

    let bad = tmp.path().join("bad.ckpt");
    let mut flipped = bytes.clone();
    flipped[bytes.len() / 2] ^= 0x40;
    fs::write(&bad, &flipped).unwrap();
    assert!(matches!(
        trainer::load_checkpoint(&bad),
        Err(Error::Checksum { .. })
    ));

    let mut versioned = bytes.clone();
    versioned[4..8].copy_from_slice(&7u32.to_le_bytes());
    fs::write(&bad, &versioned).unwrap();
    match trainer::load_checkpoint(&bad) {
        Err(e @ Error::Version { found: 7, .. }) => assert!(e.to_string().contains("version 7")),
        other => panic!("expected a version error, got {other:?}"),
    }

    fs::write(&bad, &bytes[..bytes.len() - 9]).unwrap();
    assert!(trainer::load_checkpoint(&bad).is_err());
    fs::write(&bad, b"PDS").unwrap();
    assert!(matches!(
        trainer::load_checkpoint(&bad),
        Err(Error::Format { .. })
    ));
}

#[test]
fn training_loss_trends_down() {
    let tmp = TempDir::new().unwrap();
    let ds = dataset(&tmp.path().join("d"), 16);
    let run = tmp.path().join("run");
    let out = trainer::fit(
        &ds,
        &tiny(6, 1),
        &FitOptions {
            keep_epoch_checkpoints: false,
            ..opts(&run)
        },
        |_| {},
    )
    .unwrap();
    let totals: Vec<f64> = out
        .history
        .iter()
        .filter(|r| r.term == "total")
        .map(|r| r.value)
        .collect();
    let median = |v: &[f64]| {
        let mut v = v.to_vec();
        v.sort_by(f64::total_cmp);
        v[1]
    };
    assert!(median(&totals[3..]) < median(&totals[..3]), "{totals:?}");
}
