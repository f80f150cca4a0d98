mod settings;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use ndarray::{Array1, Array2, Array3};

use pdisco::backbone::{BackboneConfig, TrainMode};
use pdisco::data::{self, Dataset, Split, SynthSpec};
use pdisco::head::{AttentionMaps, ModelConfig};
use pdisco::losses::{LossWeights, Term};
use pdisco::metrics::upsample_nearest;
use pdisco::trainer::{self, Configs, FitOptions, Metric, Prediction, TrainConfig};
use pdisco::warp::AffineRanges;

use settings::{key, usage, Key, Settings, UsageError};

#[derive(Parser)]
#[command(
    name = "pdisco",
    version,
    about = "Unsupervised part discovery with a prototype attention head"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic part-annotated dataset
    Synth(SynthArgs),
    /// Train a model on a dataset directory
    Train(TrainArgs),
    /// Compute metrics for a checkpoint on a dataset split
    Eval(EvalArgs),
    /// Draw part assignments over an image
    Viz(VizArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Flat key=value file; flags take precedence
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<String>,
    #[arg(long)]
    classes: Option<String>,
    #[arg(long)]
    parts: Option<String>,
    #[arg(long)]
    images_per_class: Option<String>,
    #[arg(long)]
    image_side: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    /// 2-3 objects per image
    #[arg(long)]
    multi_instance: bool,
    /// Curved, elongated parts
    #[arg(long)]
    irregular: bool,
}

const SYNTH_KEYS: &[Key] = &[
    key("out", ""),
    key("classes", "8"),
    key("parts", "4"),
    key("images_per_class", "250"),
    key("image_side", "64"),
    key("seed", "42"),
    key("multi_instance", "false"),
    key("irregular", "false"),
];

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<String>,
    #[arg(long)]
    out: Option<String>,
    /// Continue from a checkpoint written into --out
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    k: Option<String>,
    /// Defaults to the number of classes in the dataset
    #[arg(long)]
    classes: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    lr_tokens: Option<String>,
    #[arg(long)]
    lr_backbone: Option<String>,
    #[arg(long)]
    lr_prototypes: Option<String>,
    #[arg(long)]
    lr_head: Option<String>,
    #[arg(long)]
    lr_decay_factor: Option<String>,
    #[arg(long)]
    lr_decay_every: Option<String>,
    /// 0 disables clipping
    #[arg(long)]
    grad_clip_norm: Option<String>,
    #[arg(long)]
    part_dropout: Option<String>,
    #[arg(long)]
    gumbel_temperature: Option<String>,
    #[arg(long)]
    layernorm_epsilon: Option<String>,
    #[arg(long)]
    patch_size: Option<String>,
    #[arg(long)]
    depth: Option<String>,
    #[arg(long)]
    heads: Option<String>,
    #[arg(long)]
    dim: Option<String>,
    #[arg(long)]
    register_tokens: Option<String>,
    /// full, tokens_only or frozen
    #[arg(long)]
    train_mode: Option<String>,
    #[arg(long)]
    weight_cls: Option<String>,
    #[arg(long)]
    weight_orth: Option<String>,
    #[arg(long)]
    weight_equiv: Option<String>,
    #[arg(long)]
    weight_presence_fg: Option<String>,
    #[arg(long)]
    weight_presence_bg: Option<String>,
    #[arg(long)]
    weight_entropy: Option<String>,
    #[arg(long)]
    weight_tv: Option<String>,
    /// Maximum absolute rotation of the equivariance transform, degrees
    #[arg(long)]
    rotation_deg: Option<String>,
    #[arg(long)]
    scale_min: Option<String>,
    #[arg(long)]
    scale_max: Option<String>,
    /// Maximum absolute translation, fraction of the image size
    #[arg(long)]
    translate: Option<String>,
    #[arg(long)]
    keep_epoch_checkpoints: Option<String>,
    #[arg(long)]
    no_tv: bool,
    #[arg(long)]
    no_entropy: bool,
    #[arg(long)]
    no_equiv: bool,
    #[arg(long)]
    no_orth: bool,
    #[arg(long)]
    no_presence_fg: bool,
    #[arg(long)]
    no_presence_bg: bool,
    #[arg(long)]
    no_gumbel: bool,
    #[arg(long)]
    no_part_dropout: bool,
    #[arg(long)]
    no_modulation: bool,
}

const TRAIN_KEYS: &[Key] = &[
    key("data", ""),
    key("out", ""),
    key("k", "4"),
    key("classes", ""),
    key("epochs", "28"),
    key("batch_size", "16"),
    key("seed", "0"),
    key("lr_tokens", "1e-6"),
    key("lr_backbone", "5e-5"),
    key("lr_prototypes", "1e-3"),
    key("lr_head", "1e-2"),
    key("lr_decay_factor", "0.5"),
    key("lr_decay_every", "4"),
    key("grad_clip_norm", "2"),
    key("part_dropout", "0.3"),
    key("gumbel", "true"),
    key("gumbel_temperature", "1"),
    key("modulation", "true"),
    key("layernorm_epsilon", "1e-5"),
    key("patch_size", "8"),
    key("depth", "2"),
    key("heads", "4"),
    key("dim", "64"),
    key("register_tokens", "4"),
    key("train_mode", "full"),
    key("weight_cls", "1"),
    key("weight_orth", "1"),
    key("weight_equiv", "1"),
    key("weight_presence_fg", "1"),
    key("weight_presence_bg", "2"),
    key("weight_entropy", "1"),
    key("weight_tv", "1"),
    key("rotation_deg", "30"),
    key("scale_min", "0.8"),
    key("scale_max", "1.2"),
    key("translate", "0.1"),
    key("keep_epoch_checkpoints", "true"),
];

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<String>,
    #[arg(long)]
    data: Option<String>,
    /// train, val or test
    #[arg(long)]
    split: Option<String>,
    /// Comma-separated subset of top1,nmi,ari,kp,fg_miou,attention_entropy,attention_tv,background_activation
    #[arg(long)]
    metrics: Option<String>,
    /// Report path; defaults to eval_<split>.txt next to the checkpoint
    #[arg(long)]
    report: Option<String>,
    /// Score the ground-truth annotations as if they were predictions
    #[arg(long)]
    inject_ground_truth: bool,
}

const EVAL_KEYS: &[Key] = &[
    key("checkpoint", ""),
    key("data", ""),
    key("split", "test"),
    key("metrics", ""),
    key("report", ""),
    key("inject_ground_truth", "false"),
];

#[derive(Args)]
struct VizArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<String>,
    /// RGB PNG of the size the model was trained on
    #[arg(long)]
    image: Option<String>,
    /// Overlay PNG to write
    #[arg(long)]
    out: Option<String>,
    /// Also write one grayscale PNG per attention channel into this directory
    #[arg(long)]
    soft_maps: Option<String>,
}

const VIZ_KEYS: &[Key] = &[
    key("checkpoint", ""),
    key("image", ""),
    key("out", ""),
    key("soft_maps", ""),
];

/// Overlay colors, one per part (wrapping after 16).
pub const PALETTE: [[u8; 3]; 16] = [
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

fn settings(
    schema: &[Key],
    config: &Option<PathBuf>,
    flags: Vec<(&str, Option<String>)>,
) -> Result<Settings> {
    let mut s = Settings::new(schema);
    if let Some(p) = config {
        s.apply_file(p)?;
    }
    for (k, v) in flags {
        s.apply_flag(k, v)?;
    }
    Ok(s)
}

fn required(s: &Settings, name: &str) -> Result<PathBuf> {
    match s.raw(name) {
        "" => Err(usage(format!("--{} is required", name.replace('_', "-")))),
        v => Ok(PathBuf::from(v)),
    }
}

fn on(v: bool) -> Option<String> {
    v.then(|| "true".to_string())
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let s = settings(
        SYNTH_KEYS,
        &a.config,
        vec![
            ("out", a.out),
            ("classes", a.classes),
            ("parts", a.parts),
            ("images_per_class", a.images_per_class),
            ("image_side", a.image_side),
            ("seed", a.seed),
            ("multi_instance", on(a.multi_instance)),
            ("irregular", on(a.irregular)),
        ],
    )?;
    let out = required(&s, "out")?;
    let spec = SynthSpec {
        classes: s.get("classes")?,
        parts_per_object: s.get("parts")?,
        images_per_class: s.get("images_per_class")?,
        image_side: s.get("image_side")?,
        seed: s.get("seed")?,
        multi_instance: s.flag("multi_instance")?,
        irregular_parts: s.flag("irregular")?,
    };
    spec.validate(BackboneConfig::default().patch_size)
        .map_err(|e| usage(e.to_string()))?;
    let counts = data::generate(&spec, &out)
        .with_context(|| format!("writing dataset to {}", out.display()))?;
    println!("samples={}", counts.total());
    println!("train={}", counts.train);
    println!("val={}", counts.val);
    println!("test={}", counts.test);
    Ok(())
}

fn train_configs(s: &Settings, dataset: &Dataset) -> Result<Configs> {
    let first = dataset.samples.first().context("dataset is empty")?;
    let patch: usize = s.get("patch_size")?;
    if patch == 0 || first.image.height() % patch != 0 || first.image.width() % patch != 0 {
        return Err(usage(format!(
            "images are {}x{}, not divisible by patch size {patch}",
            first.image.height(),
            first.image.width()
        )));
    }
    let dim: usize = s.get("dim")?;
    let model = ModelConfig {
        k: s.get("k")?,
        classes: s.optional("classes")?.unwrap_or_else(|| dataset.classes()),
        dim,
        height: first.image.height() / patch,
        width: first.image.width() / patch,
        gumbel_enabled: s.flag("gumbel")?,
        gumbel_temperature: s.get("gumbel_temperature")?,
        part_dropout_rate: s.get("part_dropout")?,
        layernorm_epsilon: s.get("layernorm_epsilon")?,
        modulation_enabled: s.flag("modulation")?,
    };
    let backbone = BackboneConfig {
        patch_size: patch,
        depth: s.get("depth")?,
        heads: s.get("heads")?,
        feat_dim: dim,
        register_tokens: s.get("register_tokens")?,
        train_mode: TrainMode::parse(s.raw("train_mode")).map_err(|e| usage(e.to_string()))?,
    };
    let mut loss_weights = LossWeights::default();
    for t in Term::ALL {
        loss_weights.set(t, s.get(&format!("weight_{}", t.name()))?);
    }
    let rot = s.get::<f64>("rotation_deg")?.to_radians();
    let tr: f64 = s.get("translate")?;
    let train = TrainConfig {
        epochs: s.get("epochs")?,
        batch_size: s.get("batch_size")?,
        lr_tokens: s.get("lr_tokens")?,
        lr_backbone: s.get("lr_backbone")?,
        lr_prototypes: s.get("lr_prototypes")?,
        lr_head: s.get("lr_head")?,
        lr_decay_factor: s.get("lr_decay_factor")?,
        lr_decay_every: s.get("lr_decay_every")?,
        grad_clip_norm: s.get("grad_clip_norm")?,
        loss_weights,
        affine: AffineRanges {
            rotation: (-rot, rot),
            scale: (s.get("scale_min")?, s.get("scale_max")?),
            translate: (-tr, tr),
        },
        seed: s.get("seed")?,
    };
    let cfgs = Configs {
        model,
        backbone,
        train,
    };
    cfgs.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfgs)
}

fn train_settings(a: TrainArgs) -> Result<(Settings, Option<PathBuf>)> {
    let zero = |b: bool| b.then(|| "0".to_string());
    let off = |b: bool| b.then(|| "false".to_string());
    let s = settings(
        TRAIN_KEYS,
        &a.config,
        vec![
            ("data", a.data),
            ("out", a.out),
            ("k", a.k),
            ("classes", a.classes),
            ("epochs", a.epochs),
            ("batch_size", a.batch_size),
            ("seed", a.seed),
            ("lr_tokens", a.lr_tokens),
            ("lr_backbone", a.lr_backbone),
            ("lr_prototypes", a.lr_prototypes),
            ("lr_head", a.lr_head),
            ("lr_decay_factor", a.lr_decay_factor),
            ("lr_decay_every", a.lr_decay_every),
            ("grad_clip_norm", a.grad_clip_norm),
            ("part_dropout", a.part_dropout),
            ("gumbel_temperature", a.gumbel_temperature),
            ("layernorm_epsilon", a.layernorm_epsilon),
            ("patch_size", a.patch_size),
            ("depth", a.depth),
            ("heads", a.heads),
            ("dim", a.dim),
            ("register_tokens", a.register_tokens),
            ("train_mode", a.train_mode),
            ("weight_cls", a.weight_cls),
            ("weight_orth", a.weight_orth),
            ("weight_equiv", a.weight_equiv),
            ("weight_presence_fg", a.weight_presence_fg),
            ("weight_presence_bg", a.weight_presence_bg),
            ("weight_entropy", a.weight_entropy),
            ("weight_tv", a.weight_tv),
            ("rotation_deg", a.rotation_deg),
            ("scale_min", a.scale_min),
            ("scale_max", a.scale_max),
            ("translate", a.translate),
            ("keep_epoch_checkpoints", a.keep_epoch_checkpoints),
            ("weight_tv", zero(a.no_tv)),
            ("weight_entropy", zero(a.no_entropy)),
            ("weight_equiv", zero(a.no_equiv)),
            ("weight_orth", zero(a.no_orth)),
            ("weight_presence_fg", zero(a.no_presence_fg)),
            ("weight_presence_bg", zero(a.no_presence_bg)),
            ("gumbel", off(a.no_gumbel)),
            ("part_dropout", zero(a.no_part_dropout)),
            ("modulation", off(a.no_modulation)),
        ],
    )?;
    Ok((s, a.resume))
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let (s, resume) = train_settings(a)?;
    let data_dir = required(&s, "data")?;
    let out = required(&s, "out")?;
    let dataset =
        data::load(&data_dir).with_context(|| format!("loading dataset {}", data_dir.display()))?;
    let cfgs = train_configs(&s, &dataset)?;
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("config.txt"), s.dump())
        .with_context(|| format!("writing {}", out.display()))?;
    let opts = FitOptions {
        out_dir: out.clone(),
        resume,
        keep_epoch_checkpoints: s.flag("keep_epoch_checkpoints")?,
    };
    let epochs = cfgs.train.epochs;
    let outcome = trainer::fit(&dataset, &cfgs, &opts, |e| {
        let terms: Vec<String> = e
            .terms
            .iter()
            .map(|(t, v)| format!("{}={v:.4}", t.name()))
            .collect();
        eprintln!(
            "epoch {}/{epochs} total={:.4} {} val_top1={:.4}",
            e.epoch,
            e.total,
            terms.join(" "),
            e.val_top1
        );
    })?;
    println!("best_val_top1={}", outcome.state.best_val_top1);
    println!("checkpoint={}", out.join("best.ckpt").display());
    Ok(())
}

/// Predictions built from the annotations: one-hot class scores and one-hot
/// attention at mask resolution (part `p` in channel `p-1`, background last).
fn ground_truth_predictions(dataset: &Dataset, split: Split) -> Result<Vec<Prediction>> {
    let k = dataset
        .samples
        .iter()
        .filter_map(|s| s.part_mask.as_ref())
        .flat_map(|m| m.iter().copied())
        .max()
        .context("ground-truth injection needs part masks")? as usize;
    let classes = dataset.classes();
    dataset
        .split(split)
        .iter()
        .map(|s| {
            let mask = s
                .part_mask
                .as_ref()
                .context("ground-truth injection needs part masks")?;
            let (h, w) = mask.dim();
            let mut a = Array3::zeros((k + 1, h, w));
            for ((i, j), &v) in mask.indexed_iter() {
                let ch = if v == 0 { k } else { v as usize - 1 };
                a[[ch, i, j]] = 1.0;
            }
            let mut scores = Array1::zeros(classes);
            scores[s.class_id] = 1.0;
            Ok(Prediction {
                scores,
                attention: AttentionMaps(a),
            })
        })
        .collect()
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let s = settings(
        EVAL_KEYS,
        &a.config,
        vec![
            ("checkpoint", a.checkpoint),
            ("data", a.data),
            ("split", a.split),
            ("metrics", a.metrics),
            ("report", a.report),
            ("inject_ground_truth", on(a.inject_ground_truth)),
        ],
    )?;
    let inject = s.flag("inject_ground_truth")?;
    let data_dir = required(&s, "data")?;
    let split = Split::parse(s.raw("split")).ok_or_else(|| {
        usage(format!(
            "unknown split '{}' (expected train, val or test)",
            s.raw("split")
        ))
    })?;
    let explicit: Option<Vec<Metric>> = match s.raw("metrics") {
        "" => None,
        list => Some(
            list.split(',')
                .map(|m| {
                    Metric::parse(m.trim())
                        .ok_or_else(|| usage(format!("unknown metric '{}'", m.trim())))
                })
                .collect::<Result<_>>()?,
        ),
    };
    let checkpoint = if inject {
        None
    } else {
        Some(required(&s, "checkpoint")?)
    };
    let report_path = match s.raw("report") {
        "" => match &checkpoint {
            Some(c) => c.with_file_name(format!("eval_{}.txt", split.name())),
            None => data_dir.join(format!("eval_{}_ground_truth.txt", split.name())),
        },
        p => PathBuf::from(p),
    };

    let dataset =
        data::load(&data_dir).with_context(|| format!("loading dataset {}", data_dir.display()))?;
    let requested = explicit.unwrap_or_else(|| {
        Metric::STANDARD
            .into_iter()
            .filter(|m| match m {
                Metric::Nmi | Metric::Ari | Metric::FgMiou => dataset.has_masks,
                Metric::Kp => dataset.has_masks && dataset.has_keypoints,
                _ => true,
            })
            .collect()
    });
    let report = if inject {
        let eval_preds = ground_truth_predictions(&dataset, split)?;
        let train_preds = if requested.contains(&Metric::Kp) {
            ground_truth_predictions(&dataset, Split::Train)?
        } else {
            Vec::new()
        };
        let eval: Vec<_> = dataset
            .split(split)
            .into_iter()
            .zip(eval_preds.iter())
            .collect();
        let train: Vec<_> = dataset
            .split(Split::Train)
            .into_iter()
            .zip(train_preds.iter())
            .collect();
        trainer::evaluate_predictions(&eval, &train, &requested)?
    } else {
        let ckpt_path = checkpoint.expect("set unless injecting");
        let ck = trainer::load_checkpoint(&ckpt_path)
            .with_context(|| format!("loading checkpoint {}", ckpt_path.display()))?;
        trainer::evaluate(&ck.state.model, &ck.configs, &dataset, split, &requested)?
    };
    let text = report.to_lines();
    print!("{text}");
    fs::write(&report_path, &text).with_context(|| format!("writing {}", report_path.display()))?;
    if report.skipped_images > 0 {
        eprintln!(
            "{} images without foreground were skipped",
            report.skipped_images
        );
    }
    Ok(())
}

/// Blends palette colors at 50% over every pixel whose label is a part.
pub fn overlay(image: &Array3<u8>, labels: &Array2<u32>) -> Array3<u8> {
    let mut out = image.clone();
    for ((i, j), &l) in labels.indexed_iter() {
        if l == 0 {
            continue;
        }
        let color = PALETTE[(l as usize - 1) % PALETTE.len()];
        for c in 0..3 {
            let v = (image[[c, i, j]] as u16 + color[c] as u16 + 1) / 2;
            out[[c, i, j]] = v as u8;
        }
    }
    out
}

fn cmd_viz(a: VizArgs) -> Result<()> {
    let s = settings(
        VIZ_KEYS,
        &a.config,
        vec![
            ("checkpoint", a.checkpoint),
            ("image", a.image),
            ("out", a.out),
            ("soft_maps", a.soft_maps),
        ],
    )?;
    let ckpt_path = required(&s, "checkpoint")?;
    let image_path = required(&s, "image")?;
    let out = required(&s, "out")?;
    let ck = trainer::load_checkpoint(&ckpt_path)
        .with_context(|| format!("loading checkpoint {}", ckpt_path.display()))?;
    let image = data::read_image(&image_path)
        .with_context(|| format!("reading image {}", image_path.display()))?;
    let pred = trainer::predict(&ck.state.model, &ck.configs, &[&image])?
        .pop()
        .expect("one prediction per image");
    let (h, w) = (image.height(), image.width());
    let labels = upsample_nearest(&pred.attention.assignment(), h, w);
    let pixels = image.0.mapv(|v| (v * 255.0).round() as u8);
    write_png(&out, &data::rgb_png(&overlay(&pixels, &labels))?)?;
    if let Some(dir) = s.optional::<PathBuf>("soft_maps")? {
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let a = &pred.attention;
        for ch in 0..a.channels() {
            let grid = a.0.index_axis(ndarray::Axis(0), ch);
            let (gh, gw) = grid.dim();
            let img = Array2::from_shape_fn((h, w), |(i, j)| {
                (grid[[i * gh / h, j * gw / w]] * 255.0).round() as u8
            });
            let name = if ch == a.k() {
                "background.png".to_string()
            } else {
                format!("part_{}.png", ch + 1)
            };
            write_png(&dir.join(name), &data::gray_png(&img)?)?;
        }
    }
    println!("overlay={}", out.display());
    Ok(())
}

fn write_png(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("PDISCO_THREADS") {
        let n: usize = v.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
            usage(format!(
                "PDISCO_THREADS must be a positive integer, got '{v}'"
            ))
        })?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    match cli.cmd {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Viz(a) => cmd_viz(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
