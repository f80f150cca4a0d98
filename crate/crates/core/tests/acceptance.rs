//! Acceptance checks, one `PASS`/`FAIL` line per criterion.
//!
//! Runs without the libtest harness so the slow training checks can share a
//! generated dataset and print progress as they go.

use std::collections::HashMap;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use ndarray::{Array1, Array2, Array3, Axis};
use pdisco::backbone::{BackboneConfig, ImageSample};
use pdisco::data::{self, Dataset, Split, SynthSpec};
use pdisco::head::{AttentionMaps, ModelConfig};
use pdisco::losses::*;
use pdisco::metrics::{ari, nmi};
use pdisco::trainer::{self, Configs, FitOptions, Metric, TrainConfig};
use pdisco::warp::{sample_affine, warp, AffineRanges, AffineTransform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

const FD_STEP: f64 = 1e-6;
const FD_TOL: f64 = 1e-4;
const SEEDS: u64 = 20;

struct Outcome {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
    diff / na.max(nn).max(1e-12)
}

/// Central differences of `f` over every entry of `x`.
fn numeric_grad<D: ndarray::Dimension>(
    x: &ndarray::Array<f64, D>,
    f: impl Fn(&ndarray::Array<f64, D>) -> f64,
) -> Vec<f64> {
    let mut probe = x.clone();
    (0..x.len())
        .map(|i| {
            let orig = probe.as_slice().unwrap()[i];
            probe.as_slice_mut().unwrap()[i] = orig + FD_STEP;
            let up = f(&probe);
            probe.as_slice_mut().unwrap()[i] = orig - FD_STEP;
            let down = f(&probe);
            probe.as_slice_mut().unwrap()[i] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

fn softmax_maps(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Array3<f64> {
    let mut a = Array3::from_shape_fn((c, h, w), |_| rng.gen_range(-2.0..2.0f64).exp());
    let sum = a.sum_axis(Axis(0));
    for mut ch in a.outer_iter_mut() {
        ch /= &sum;
    }
    a
}

fn pooled_channels(a: &Array3<f64>, channels: std::ops::Range<usize>) -> Array3<f64> {
    let (_, h, w) = a.dim();
    let mut out = Array3::zeros((channels.len(), h, w));
    for (o, ch) in channels.enumerate() {
        out.index_axis_mut(Axis(0), o)
            .assign(&pool_presence(a.index_axis(Axis(0), ch)));
    }
    out
}

fn loss_gradients() -> Outcome {
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let mut record = |name: &'static str, e: f64| match worst.iter_mut().find(|(n, _)| *n == name) {
        Some(slot) => slot.1 = slot.1.max(e),
        None => worst.push((name, e)),
    };
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);

        let scores = Array1::from_shape_fn(5, |_| rng.gen_range(-3.0..3.0));
        let label = rng.gen_range(0..5);
        let (_, g) = classification_loss_grad(&scores, label).unwrap();
        let n = numeric_grad(&scores, |s| classification_loss_grad(s, label).unwrap().0);
        record("cls", rel_err(g.as_slice().unwrap(), &n));

        let v = Array2::from_shape_fn((4, 6), |_| rng.gen_range(-1.0..1.0));
        let (_, g) = orthogonality_loss_grad(v.view());
        let n = numeric_grad(&v, |x| orthogonality_loss_grad(x.view()).0);
        record("orth", rel_err(g.as_slice().unwrap(), &n));

        let t = sample_affine(&mut rng, &AffineRanges::default()).unwrap();
        let a = softmax_maps(&mut rng, 3, 6, 6);
        let b = softmax_maps(&mut rng, 3, 6, 6);
        let (_, g) = equivariance_loss_grad(a.view(), b.view(), &t).unwrap();
        let na = numeric_grad(&a, |x| {
            equivariance_loss_grad(x.view(), b.view(), &t).unwrap().0
        });
        let nb = numeric_grad(&b, |x| {
            equivariance_loss_grad(a.view(), x.view(), &t).unwrap().0
        });
        let analytic: Vec<f64> = g
            .original
            .iter()
            .chain(g.transformed.iter())
            .copied()
            .collect();
        record("equiv", rel_err(&analytic, &[na, nb].concat()));

        // presence terms include the pooling so its adjoint is covered too
        let maps: Vec<Array3<f64>> = (0..2).map(|_| softmax_maps(&mut rng, 3, 5, 5)).collect();
        let fg = |ms: &[Array3<f64>]| {
            let pooled: Vec<_> = ms.iter().map(|m| pooled_channels(m, 0..2)).collect();
            presence_loss_fg_grad(&pooled)
        };
        let (_, gp) = fg(&maps);
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for (i, m) in maps.iter().enumerate() {
            let mut full = Array3::zeros(m.dim());
            for ch in 0..2 {
                full.index_axis_mut(Axis(0), ch)
                    .assign(&pool_presence_adjoint(gp[i].index_axis(Axis(0), ch)));
            }
            analytic.extend(full.iter().copied());
            numeric.extend(numeric_grad(m, |x| {
                let mut ms = maps.clone();
                ms[i] = x.clone();
                fg(&ms).0
            }));
        }
        record("presence_fg", rel_err(&analytic, &numeric));

        let mask = center_mask(5, 5);
        let bg = |ms: &[Array3<f64>]| {
            let pooled: Vec<Array2<f64>> = ms
                .iter()
                .map(|m| pool_presence(m.index_axis(Axis(0), 2)))
                .collect();
            presence_loss_bg_grad(&pooled, &mask).unwrap()
        };
        let (_, gp) = bg(&maps);
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for (i, m) in maps.iter().enumerate() {
            let mut full = Array3::zeros(m.dim());
            full.index_axis_mut(Axis(0), 2)
                .assign(&pool_presence_adjoint(gp[i].view()));
            analytic.extend(full.iter().copied());
            numeric.extend(numeric_grad(m, |x| {
                let mut ms = maps.clone();
                ms[i] = x.clone();
                bg(&ms).0
            }));
        }
        record("presence_bg", rel_err(&analytic, &numeric));

        let a = softmax_maps(&mut rng, 3, 5, 5);
        let (_, g) = entropy_loss_grad(a.view());
        let n = numeric_grad(&a, |x| entropy_loss_grad(x.view()).0);
        record("entropy", rel_err(g.as_slice().unwrap(), &n));

        let (_, g) = total_variation_loss_grad(a.view());
        let n = numeric_grad(&a, |x| total_variation_loss_grad(x.view()).0);
        record("tv", rel_err(g.as_slice().unwrap(), &n));
    }
    let pass = worst.iter().all(|(_, e)| *e <= FD_TOL);
    let detail = worst
        .iter()
        .map(|(n, e)| format!("{n}={e:.1e}"))
        .collect::<Vec<_>>()
        .join(" ");
    check(pass, format!("{SEEDS} seeds, max relative error {detail}"))
}

fn tiny_configs() -> Configs {
    Configs {
        model: ModelConfig {
            k: 2,
            classes: 3,
            dim: 8,
            height: 4,
            width: 4,
            ..ModelConfig::default()
        },
        backbone: BackboneConfig {
            patch_size: 4,
            depth: 1,
            heads: 2,
            feat_dim: 8,
            register_tokens: 1,
            ..BackboneConfig::default()
        },
        train: TrainConfig::default(),
    }
}

/// Every trainable tensor of the full model, probed at a few coordinates.
fn forward_gradients() -> Outcome {
    let cfgs = tiny_configs();
    let mut worst: f64 = 0.0;
    let mut probed = 0;
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let mut state = trainer::TrainState::new(&Configs {
            train: TrainConfig {
                seed,
                ..cfgs.train.clone()
            },
            ..cfgs.clone()
        });
        let images: Vec<Array3<f64>> = (0..2)
            .map(|_| Array3::from_shape_fn((3, 16, 16), |_| rng.gen()))
            .collect();
        let refs: Vec<&Array3<f64>> = images.iter().collect();
        let labels = [rng.gen_range(0..3), rng.gen_range(0..3)];
        let noise = trainer::sample_step_noise(&mut rng, 2, &cfgs).unwrap();
        let base = trainer::loss_and_grads(&state.model, &cfgs, &refs, &labels, &noise).unwrap();

        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        let shapes: Vec<(usize, usize)> =
            state.model.named().iter().map(|(_, t)| t.dim()).collect();
        for (ti, &(r, c)) in shapes.iter().enumerate() {
            let Some(grad) = &base.grads[ti] else {
                continue;
            };
            for _ in 0..3 {
                let idx = (rng.gen_range(0..r), rng.gen_range(0..c));
                let mut eval = |delta: f64| {
                    state.model.named_mut()[ti].1[idx] += delta;
                    let out = trainer::loss_and_grads(&state.model, &cfgs, &refs, &labels, &noise)
                        .unwrap()
                        .total;
                    state.model.named_mut()[ti].1[idx] -= delta;
                    out
                };
                let up = eval(FD_STEP);
                let down = eval(-FD_STEP);
                numeric.push((up - down) / (2.0 * FD_STEP));
                analytic.push(grad[idx]);
                probed += 1;
            }
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    check(
        worst <= FD_TOL,
        format!("{SEEDS} seeds, {probed} coordinates, max relative error {worst:.1e}"),
    )
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let losses = loss_gradients();
    let forward = forward_gradients();
    let elapsed = start.elapsed();
    check(
        losses.pass && forward.pass && elapsed < Duration::from_secs(60),
        format!(
            "losses: {}; full forward: {}; {:.1}s",
            losses.detail,
            forward.detail,
            elapsed.as_secs_f64()
        ),
    )
}

fn closed_forms() -> Outcome {
    let mut notes = Vec::new();
    let mut pass = true;
    for (k, h, w) in [(1, 3, 3), (4, 8, 8), (7, 5, 9)] {
        let c = k + 1;
        let a = AttentionMaps(Array3::from_elem((c, h, w), 1.0 / c as f64));
        let expect = (h * w) as f64 * (c as f64).ln() / c as f64;
        let err = (entropy_loss(&a) - expect).abs();
        pass &= err <= 1e-9;
        notes.push(format!("entropy(K={k},{h}x{w}) err {err:.1e}"));
    }
    let tv = total_variation_loss(&AttentionMaps(ndarray::array![[[1.0, 0.0], [0.0, 0.0]]]));
    pass &= (tv - 0.5).abs() <= 1e-12;
    notes.push(format!("tv={tv}"));
    for n in [3, 5, 7, 9] {
        let m = center_mask(n, n);
        pass &= m[[0, 0]] == 1.0
            && m[[0, n - 1]] == 1.0
            && m[[n - 1, 0]] == 1.0
            && m[[n - 1, n - 1]] == 1.0;
        pass &= m[[n / 2, n / 2]] == 0.0;
    }
    notes.push("center mask corners 1 and center 0 for 3..9".into());
    for c in [2, 8, 200] {
        let (l, _) = classification_loss_grad(&Array1::from_elem(c, 0.37), 1).unwrap();
        let err = (l - (c as f64).ln()).abs();
        pass &= err <= 1e-9;
        notes.push(format!("cls(C={c}) err {err:.1e}"));
    }
    check(pass, notes.join(", "))
}

/// Labelings of `n` items over `{0, 1, 2}`, either all `3^n` of them or only
/// the first-occurrence canonical ones.
fn labelings(n: usize, canonical: bool) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    for code in 0..3usize.pow(n as u32) {
        let mut c = code;
        let v: Vec<u32> = (0..n)
            .map(|_| {
                let d = (c % 3) as u32;
                c /= 3;
                d
            })
            .collect();
        let ok = !canonical || {
            let mut next = 0;
            v.iter().all(|&x| {
                if x == next {
                    next += 1;
                    true
                } else {
                    x < next
                }
            })
        };
        if ok {
            out.push(v);
        }
    }
    out
}

fn oracle_nmi(a: &[u32], b: &[u32]) -> f64 {
    let n = a.len() as f64;
    let mut pa = HashMap::new();
    let mut pb = HashMap::new();
    let mut pab = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *pa.entry(x).or_insert(0.0) += 1.0 / n;
        *pb.entry(y).or_insert(0.0) += 1.0 / n;
        *pab.entry((x, y)).or_insert(0.0) += 1.0 / n;
    }
    let h = |m: &HashMap<u32, f64>| -m.values().map(|p| p * p.ln()).sum::<f64>();
    let (ha, hb) = (h(&pa), h(&pb));
    if pa.len() == 1 && pb.len() == 1 {
        return 1.0;
    }
    if pa.len() == 1 || pb.len() == 1 {
        return 0.0;
    }
    let mi: f64 = pab
        .iter()
        .map(|(&(x, y), &p)| p * (p / (pa[&x] * pb[&y])).ln())
        .sum();
    mi / (ha * hb).sqrt()
}

/// Pair counting straight from the definition.
fn oracle_ari(a: &[u32], b: &[u32]) -> f64 {
    let n = a.len();
    let (mut both, mut in_a, mut in_b, mut pairs) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..n {
        for j in i + 1..n {
            let sa = a[i] == a[j];
            let sb = b[i] == b[j];
            both += (sa && sb) as u8 as f64;
            in_a += sa as u8 as f64;
            in_b += sb as u8 as f64;
            pairs += 1.0;
        }
    }
    let expected = in_a * in_b / pairs;
    let max = (in_a + in_b) / 2.0;
    if max == expected {
        1.0
    } else {
        (both - expected) / (max - expected)
    }
}

fn metric_oracle() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let mut pairs = 0usize;
    for n in 1..=8 {
        // both metrics ignore block names, so canonical labelings cover every
        // pair; small n also runs the raw labelings as a cross-check
        let canonical = labelings(n, true);
        let raw = if n <= 5 {
            labelings(n, false)
        } else {
            Vec::new()
        };
        for (left, right) in [(&canonical, &canonical), (&raw, &raw)] {
            for (a, b) in left.iter().flat_map(|a| right.iter().map(move |b| (a, b))) {
                worst = worst.max((nmi(a, b).unwrap() - oracle_nmi(a, b)).abs());
                if n >= 2 {
                    worst = worst.max((ari(a, b).unwrap() - oracle_ari(a, b)).abs());
                }
                pairs += 1;
            }
        }
    }
    let half = ari(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap();
    let elapsed = start.elapsed();
    check(
        worst <= 1e-9 && half == -0.5 && elapsed < Duration::from_secs(60),
        format!(
            "{pairs} labeling pairs, max deviation {worst:.1e}, ARI([0,0,1,1],[0,1,0,1])={half}, {:.1}s",
            elapsed.as_secs_f64()
        ),
    )
}

fn equivariance_machinery() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    for (h, w) in [(8, 8), (9, 13), (32, 32)] {
        let x = Array3::from_shape_fn((3, h, w), |_| rng.gen::<f64>());
        let interior = |y: &Array3<f64>| {
            let mut e: f64 = 0.0;
            for c in 0..3 {
                for i in 1..h - 1 {
                    for j in 1..w - 1 {
                        e = e.max((y[[c, i, j]] - x[[c, i, j]]).abs());
                    }
                }
            }
            e
        };
        let id = AffineTransform::IDENTITY;
        worst = worst.max(interior(&warp(x.view(), &id, false)));
        worst = worst.max(interior(&warp(
            warp(x.view(), &id, false).view(),
            &id,
            true,
        )));
        let half = AffineTransform::rotation(std::f64::consts::PI);
        worst = worst.max(interior(&warp(
            warp(x.view(), &half, false).view(),
            &half,
            false,
        )));
        worst = worst.max(interior(&warp(
            warp(x.view(), &half, false).view(),
            &half,
            true,
        )));
    }
    let a = AttentionMaps(softmax_maps(&mut rng, 5, 8, 8));
    let l = equivariance_loss(&a, &a, &AffineTransform::IDENTITY).unwrap();
    check(
        worst <= 1e-5 && l.abs() <= 1e-9,
        format!("round-trip error {worst:.1e}, identity loss {l:.1e}"),
    )
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn quiet_fit(ds: &Dataset, cfgs: &Configs, out: &Path) -> trainer::FitOutcome {
    let opts = FitOptions {
        out_dir: out.to_path_buf(),
        resume: None,
        keep_epoch_checkpoints: false,
    };
    trainer::fit(ds, cfgs, &opts, |_| {}).expect("training succeeds")
}

fn end_to_end(root: &Path) -> Outcome {
    let ds = default_dataset(root);
    let cfgs = Configs::default();
    let run = root.join("e2e");
    let start = Instant::now();
    let opts = FitOptions {
        out_dir: run.clone(),
        resume: None,
        keep_epoch_checkpoints: false,
    };
    trainer::fit(&ds, &cfgs, &opts, |e| {
        eprintln!(
            "  end-to-end epoch {}/{} val_top1={:.3}",
            e.epoch, cfgs.train.epochs, e.val_top1
        )
    })
    .expect("training succeeds");
    let elapsed = start.elapsed();
    let best = trainer::load_checkpoint(&run.join("best.ckpt")).unwrap();
    let report = trainer::evaluate(
        &best.state.model,
        &best.configs,
        &ds,
        Split::Test,
        &[Metric::Top1, Metric::Nmi],
    )
    .unwrap();
    let top1 = report.get(Metric::Top1).unwrap();
    let part_nmi = report.get(Metric::Nmi).unwrap();
    check(
        top1 >= 0.95 && part_nmi >= 0.60 && elapsed <= Duration::from_secs(30 * 60),
        format!(
            "test top1={top1:.4} (>= 0.95), part nmi={part_nmi:.4} (>= 0.60), {:.0}s training",
            elapsed.as_secs_f64()
        ),
    )
}

/// The default dataset, generated on first use.
fn default_dataset(root: &Path) -> Dataset {
    let dir = root.join("default");
    if !dir.exists() {
        data::generate(&SynthSpec::default(), &dir).unwrap();
    }
    data::load(&dir).unwrap()
}

/// Fewer epochs than the end-to-end run so the fifteen ablation runs fit in
/// a test budget.
const ABLATION_EPOCHS: usize = 4;

fn ablations(root: &Path) -> Outcome {
    let ds = default_dataset(root);
    let metrics = [
        Metric::AttentionTv,
        Metric::AttentionEntropy,
        Metric::BackgroundActivation,
    ];

    let variants: [(&str, fn(&mut Configs)); 5] = [
        ("baseline", |_| {}),
        ("no_tv", |c| c.train.loss_weights.set(Term::Tv, 0.0)),
        ("no_entropy", |c| {
            c.train.loss_weights.set(Term::Entropy, 0.0)
        }),
        ("no_gumbel", |c| c.model.gumbel_enabled = false),
        ("no_presence_bg", |c| {
            c.train.loss_weights.set(Term::PresenceBg, 0.0)
        }),
    ];
    let mut med: HashMap<&str, Vec<f64>> = HashMap::new();
    for (name, tweak) in variants {
        let mut per_seed: Vec<Vec<f64>> = vec![Vec::new(); metrics.len()];
        for seed in 0..3 {
            let mut cfgs = Configs::default();
            cfgs.train.epochs = ABLATION_EPOCHS;
            cfgs.train.seed = seed;
            tweak(&mut cfgs);
            let run = root.join(format!("abl_{name}_{seed}"));
            let out = quiet_fit(&ds, &cfgs, &run);
            let report =
                trainer::evaluate(&out.state.model, &cfgs, &ds, Split::Test, &metrics).unwrap();
            for (i, m) in metrics.iter().enumerate() {
                per_seed[i].push(report.get(*m).unwrap());
            }
            std::fs::remove_dir_all(&run).ok();
        }
        let m: Vec<f64> = per_seed.into_iter().map(median).collect();
        eprintln!(
            "  ablation {name}: tv={:.4} entropy={:.4} bg={:.4}",
            m[0], m[1], m[2]
        );
        med.insert(name, m);
    }
    let base = &med["baseline"];
    let checks = [
        (
            "tv up without tv loss",
            med["no_tv"][0] > base[0],
            med["no_tv"][0],
            base[0],
        ),
        (
            "entropy up without entropy loss",
            med["no_entropy"][1] > base[1],
            med["no_entropy"][1],
            base[1],
        ),
        (
            "entropy up without gumbel",
            med["no_gumbel"][1] > base[1],
            med["no_gumbel"][1],
            base[1],
        ),
        (
            "background down without bg presence",
            med["no_presence_bg"][2] < base[2],
            med["no_presence_bg"][2],
            base[2],
        ),
    ];
    let pass = checks.iter().all(|c| c.1);
    let detail = checks
        .iter()
        .map(|(n, ok, a, b)| {
            format!(
                "{n}: {a:.4} vs {b:.4} {}",
                if *ok { "ok" } else { "violated" }
            )
        })
        .collect::<Vec<_>>()
        .join("; ");
    check(pass, format!("3 seeds, {ABLATION_EPOCHS} epochs; {detail}"))
}

fn determinism(root: &Path) -> Outcome {
    let ds = default_dataset(root);
    let mut cfgs = Configs::default();
    cfgs.train.epochs = 2;
    cfgs.train.seed = 5;
    let (a, b) = (root.join("det_a"), root.join("det_b"));
    quiet_fit(&ds, &cfgs, &a);
    quiet_fit(&ds, &cfgs, &b);
    let same = ["last.ckpt", "best.ckpt", "history.csv"]
        .iter()
        .all(|f| std::fs::read(a.join(f)).unwrap() == std::fs::read(b.join(f)).unwrap());
    let test = ds.split(Split::Test);
    let img = &test[0].image;
    let model = trainer::load_checkpoint(&a.join("last.ckpt")).unwrap();
    let p1 = trainer::predict(&model.state.model, &model.configs, &[img as &ImageSample]).unwrap();
    let p2 = trainer::predict(&model.state.model, &model.configs, &[img as &ImageSample]).unwrap();
    check(
        same && p1 == p2,
        format!(
            "2 epochs on {} images, checkpoints and history byte-identical: {same}",
            ds.samples.len()
        ),
    )
}

fn main() -> ExitCode {
    let tmp = TempDir::new().expect("temp dir");
    let criteria: [(&str, Box<dyn Fn() -> Outcome>); 7] = [
        ("gradient suite", Box::new(gradient_suite)),
        ("closed-form values", Box::new(closed_forms)),
        ("metric oracle equivalence", Box::new(metric_oracle)),
        ("equivariance machinery", Box::new(equivariance_machinery)),
        ("synthetic end-to-end", Box::new(|| end_to_end(tmp.path()))),
        ("ablation directions", Box::new(|| ablations(tmp.path()))),
        ("determinism", Box::new(|| determinism(tmp.path()))),
    ];
    // like libtest, the first non-flag argument filters by name
    let filter = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let mut failed = 0;
    for (name, run) in criteria {
        if filter.as_ref().is_some_and(|f| !name.contains(f.as_str())) {
            continue;
        }
        let o = run();
        println!(
            "{} {name}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        failed += !o.pass as usize;
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
