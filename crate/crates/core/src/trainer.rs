//! Optimization loop, evaluation and checkpoints.
//!
//! Every step runs the backbone and head on the batch and, when the
//! equivariance term is active, on an affine-warped copy of each image in the
//! same batched graph. Loss gradients are seeded into the graph at the
//! attention maps, the modulated embeddings and the class scores.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array1, Array2, Array3, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::backbone::{
    build_backbone, patchify, trainable_parameter_set, BackboneConfig, BackboneParams,
    BackboneVars, ImageSample, TrainMode, TOKEN_PARAMS,
};
use crate::container::{self, Tensor};
use crate::data::{sample_hash, AnnotatedSample, Dataset, Split};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::head::{
    build_head, dropout_multipliers, gumbel_noise, AttentionMaps, HeadParams, HeadVars, ModelConfig,
};
use crate::losses::{
    center_mask, classification_loss_grad, entropy_loss_grad, equivariance_loss_grad,
    orthogonality_loss_grad, pool_presence, pool_presence_adjoint, presence_loss_bg_grad,
    presence_loss_fg_grad, total_loss, total_variation_loss, total_variation_loss_grad, LossTerms,
    LossWeights, Term,
};
use crate::metrics;
use crate::warp::{sample_affine, AffineRanges, AffineTransform, WarpPlan};

/// Batch size the base learning rates refer to.
pub const REFERENCE_BATCH: usize = 16;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
/// Images per chunk at inference.
const EVAL_CHUNK: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Position embeddings, class token and register tokens.
    pub lr_tokens: f64,
    /// Remaining backbone tensors; only used with [`TrainMode::Full`].
    pub lr_backbone: f64,
    pub lr_prototypes: f64,
    /// Modulation and classifier.
    pub lr_head: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    /// 0 disables clipping.
    pub grad_clip_norm: f64,
    pub loss_weights: LossWeights,
    pub affine: AffineRanges,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 28,
            batch_size: 16,
            lr_tokens: 1e-6,
            lr_backbone: 5e-5,
            lr_prototypes: 1e-3,
            lr_head: 1e-2,
            lr_decay_factor: 0.5,
            lr_decay_every: 4,
            grad_clip_norm: 2.0,
            loss_weights: LossWeights::default(),
            affine: AffineRanges::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        for (name, lr) in [
            ("lr_tokens", self.lr_tokens),
            ("lr_backbone", self.lr_backbone),
            ("lr_prototypes", self.lr_prototypes),
            ("lr_head", self.lr_head),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {lr}")));
            }
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) || self.lr_decay_every < 1 {
            return Err(Error::Config(
                "learning rate decay must be in (0, 1] every ≥ 1 epochs".into(),
            ));
        }
        if !(self.grad_clip_norm >= 0.0) {
            return Err(Error::Config(
                "gradient clip norm must be non-negative".into(),
            ));
        }
        self.loss_weights.validate()?;
        self.affine.validate()
    }
}

/// All configuration a run needs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Configs {
    pub model: ModelConfig,
    pub backbone: BackboneConfig,
    pub train: TrainConfig,
}

impl Configs {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.backbone.validate()?;
        self.train.validate()?;
        if self.model.dim != self.backbone.feat_dim {
            return Err(Error::Config(format!(
                "head dimension {} differs from backbone feature dimension {}",
                self.model.dim, self.backbone.feat_dim
            )));
        }
        Ok(())
    }

    /// Image size implied by the patch grid.
    pub fn image_size(&self) -> (usize, usize) {
        (
            self.model.height * self.backbone.patch_size,
            self.model.width * self.backbone.patch_size,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Group {
    Tokens,
    Backbone,
    Prototypes,
    Head,
}

pub fn group_of(name: &str) -> Group {
    if TOKEN_PARAMS.contains(&name) {
        Group::Tokens
    } else if name.starts_with("backbone.") {
        Group::Backbone
    } else if name == "head.prototypes" {
        Group::Prototypes
    } else {
        Group::Head
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupLrs {
    pub tokens: f64,
    pub backbone: f64,
    pub prototypes: f64,
    pub head: f64,
}

impl GroupLrs {
    pub fn get(&self, g: Group) -> f64 {
        match g {
            Group::Tokens => self.tokens,
            Group::Backbone => self.backbone,
            Group::Prototypes => self.prototypes,
            Group::Head => self.head,
        }
    }
}

/// Step schedule: base rate times `factor^floor(epoch / every)`, zero-based epoch.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> GroupLrs {
    let f = cfg
        .lr_decay_factor
        .powi((epoch / cfg.lr_decay_every) as i32);
    GroupLrs {
        tokens: cfg.lr_tokens * f,
        backbone: cfg.lr_backbone * f,
        prototypes: cfg.lr_prototypes * f,
        head: cfg.lr_head * f,
    }
}

/// Square-root scaling relative to a batch of 16.
pub fn scale_lr_for_batch(base_lr: f64, batch_size: usize) -> f64 {
    base_lr * (batch_size as f64 / REFERENCE_BATCH as f64).sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub backbone: BackboneParams,
    pub head: HeadParams,
}

const HEAD_NAMES: [&str; 4] = [
    "head.prototypes",
    "head.modulation.w",
    "head.modulation.b",
    "head.classifier",
];

impl Model {
    pub fn init(cfgs: &Configs, rng: &mut ChaCha8Rng) -> Self {
        let backbone =
            BackboneParams::init(&cfgs.backbone, (cfgs.model.height, cfgs.model.width), rng);
        let head = HeadParams::init(&cfgs.model, rng);
        Self { backbone, head }
    }

    /// Backbone tensors followed by the head tensors.
    pub fn named(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out = self.backbone.named();
        let h = &self.head;
        for (n, t) in HEAD_NAMES.iter().zip([
            &h.prototypes.0,
            &h.modulation.weights,
            &h.modulation.biases,
            &h.classifier.0,
        ]) {
            out.push((n.to_string(), t));
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Array2<f64>)> {
        let mut out = self.backbone.named_mut();
        let h = &mut self.head;
        for (n, t) in HEAD_NAMES.iter().zip([
            &mut h.prototypes.0,
            &mut h.modulation.weights,
            &mut h.modulation.biases,
            &mut h.classifier.0,
        ]) {
            out.push((n.to_string(), t));
        }
        out
    }
}

/// First and second moment estimates, aligned with [`Model::named`].
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub step: u64,
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(model: &Model) -> Self {
        let zeros: Vec<Array2<f64>> = model
            .named()
            .iter()
            .map(|(_, t)| Array2::zeros(t.dim()))
            .collect();
        Self {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// Everything that evolves during training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub adam: Adam,
    pub rng: ChaCha8Rng,
    /// Completed epochs.
    pub epoch: usize,
    pub best_val_top1: f64,
}

impl TrainState {
    pub fn new(cfgs: &Configs) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfgs.train.seed);
        let model = Model::init(cfgs, &mut rng);
        let adam = Adam::new(&model);
        Self {
            model,
            adam,
            rng,
            epoch: 0,
            best_val_top1: f64::NEG_INFINITY,
        }
    }
}

/// Training images whose patch features seed the prototypes.
pub const PROTOTYPE_INIT_IMAGES: usize = 64;
const KMEANS_ITERS: usize = 15;

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's k-means over the rows of `points`, seeded by farthest-point
/// sampling from the point nearest the mean. The cluster with the largest
/// total `border` weight is returned last; the others keep their seed order.
pub fn kmeans_prototypes(
    points: &Array2<f64>,
    border: &[f64],
    clusters: usize,
) -> Result<Array2<f64>> {
    let n = points.nrows();
    if n < clusters || border.len() != n {
        return Err(Error::Input(format!(
            "k-means needs at least {clusters} points with border weights, got {n} points and {} weights",
            border.len()
        )));
    }
    let mean = points.mean_axis(Axis(0)).expect("nonempty");
    let nearest = |c: ArrayView1<f64>| {
        (0..n)
            .min_by(|&a, &b| sq_dist(points.row(a), c).total_cmp(&sq_dist(points.row(b), c)))
            .expect("nonempty")
    };
    let mut seeds = vec![nearest(mean.view())];
    let mut gap: Vec<f64> = (0..n)
        .map(|i| sq_dist(points.row(i), points.row(seeds[0])))
        .collect();
    while seeds.len() < clusters {
        let far = (0..n)
            .max_by(|&a, &b| gap[a].total_cmp(&gap[b]))
            .expect("nonempty");
        seeds.push(far);
        for (i, g) in gap.iter_mut().enumerate() {
            *g = g.min(sq_dist(points.row(i), points.row(far)));
        }
    }
    let mut centers = points.select(Axis(0), &seeds);
    let mut assign = vec![0usize; n];
    for _ in 0..KMEANS_ITERS {
        for (i, a) in assign.iter_mut().enumerate() {
            *a = (0..clusters)
                .min_by(|&x, &y| {
                    sq_dist(points.row(i), centers.row(x))
                        .total_cmp(&sq_dist(points.row(i), centers.row(y)))
                })
                .expect("clusters > 0");
        }
        let mut sums = Array2::<f64>::zeros(centers.dim());
        let mut counts = vec![0usize; clusters];
        for (i, &a) in assign.iter().enumerate() {
            sums.row_mut(a).scaled_add(1.0, &points.row(i));
            counts[a] += 1;
        }
        for (k, &c) in counts.iter().enumerate() {
            if c > 0 {
                centers.row_mut(k).assign(&(&sums.row(k) / c as f64));
            }
        }
    }
    let mut mass = vec![0.0; clusters];
    for (&a, &b) in assign.iter().zip(border) {
        mass[a] += b;
    }
    let bg = (0..clusters)
        .max_by(|&a, &b| mass[a].total_cmp(&mass[b]))
        .expect("clusters > 0");
    let mut order: Vec<usize> = (0..clusters).filter(|&k| k != bg).collect();
    order.push(bg);
    Ok(centers.select(Axis(0), &order))
}

/// Replaces the prototypes with k-means centers of the patch features of
/// `images` under the current backbone, background cluster last. Border
/// weights come from the center mask, so the cluster that dominates the image
/// borders becomes the background prototype.
pub fn init_prototypes(model: &mut Model, cfgs: &Configs, images: &[&ImageSample]) -> Result<()> {
    let mc = &cfgs.model;
    let hw = mc.locations();
    let mask = center_mask(mc.height, mc.width);
    let blocks: Vec<Array2<f64>> = images
        .iter()
        .map(|x| patchify(&x.0, cfgs.backbone.patch_size))
        .collect();
    let views: Vec<_> = blocks.iter().map(|x| x.view()).collect();
    let patches = ndarray::concatenate(Axis(0), &views).map_err(|e| Error::Input(e.to_string()))?;
    let mut g = Graph::new();
    let pv = g.leaf(patches, false);
    let bvars = BackboneVars::bind(&mut g, &model.backbone, &[]);
    let feats = build_backbone(&mut g, pv, &bvars, &cfgs.backbone, images.len());
    let flat: Vec<f64> = mask.iter().copied().collect();
    let border: Vec<f64> = (0..images.len() * hw).map(|r| flat[r % hw]).collect();
    model.head.prototypes.0 = kmeans_prototypes(g.value(feats), &border, mc.channels())?;
    Ok(())
}

/// Randomness consumed by one training step.
#[derive(Debug, Clone)]
pub struct StepNoise {
    pub transforms: Vec<AffineTransform>,
    /// `(n·HW)×(K+1)` for the `n` images in the graph.
    pub gumbel: Option<Array2<f64>>,
    /// One multiplier per embedding row.
    pub dropout: Option<Vec<f64>>,
}

fn twin_pass(cfgs: &Configs) -> bool {
    cfgs.train.loss_weights.get(Term::Equiv) > 0.0
}

/// Draws affine transforms, then Gumbel noise, then dropout multipliers.
pub fn sample_step_noise(rng: &mut ChaCha8Rng, batch: usize, cfgs: &Configs) -> Result<StepNoise> {
    let m = &cfgs.model;
    let n = if twin_pass(cfgs) { 2 * batch } else { batch };
    let transforms = if twin_pass(cfgs) {
        (0..batch)
            .map(|_| sample_affine(rng, &cfgs.train.affine))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let gumbel = m
        .gumbel_enabled
        .then(|| gumbel_noise(rng, n * m.locations(), m.channels()));
    let dropout = (m.part_dropout_rate > 0.0).then(|| {
        (0..n)
            .flat_map(|_| dropout_multipliers(rng, m.k, m.part_dropout_rate))
            .collect()
    });
    Ok(StepNoise {
        transforms,
        gumbel,
        dropout,
    })
}

/// Loss terms, weighted total and per-tensor gradients of one batch.
#[derive(Debug, Clone)]
pub struct BatchGradients {
    pub terms: LossTerms,
    pub total: f64,
    /// Aligned with [`Model::named`]; `None` for frozen or unused tensors.
    pub grads: Vec<Option<Array2<f64>>>,
}

fn maps_to_rows(g: &Array3<f64>) -> Array2<f64> {
    AttentionMaps(g.clone()).to_rows()
}

/// Forward and backward pass over `images` with fixed randomness.
pub fn loss_and_grads(
    model: &Model,
    cfgs: &Configs,
    images: &[&Array3<f64>],
    labels: &[usize],
    noise: &StepNoise,
) -> Result<BatchGradients> {
    let b = images.len();
    if b == 0 || labels.len() != b {
        return Err(Error::Input(format!(
            "batch has {b} images and {} labels",
            labels.len()
        )));
    }
    let mc = &cfgs.model;
    let w = &cfgs.train.loss_weights;
    let (h, wd) = (mc.height, mc.width);
    let hw = h * wd;
    let c = mc.channels();
    let twin = twin_pass(cfgs);
    let n = if twin { 2 * b } else { b };

    let mut warped = Vec::new();
    if twin {
        for (img, t) in images.iter().zip(&noise.transforms) {
            let (_, ih, iw) = img.dim();
            warped.push(WarpPlan::new(t, ih, iw, false).apply(img.view()));
        }
    }
    let p = cfgs.backbone.patch_size;
    let blocks: Vec<Array2<f64>> = images
        .iter()
        .map(|x| patchify(x, p))
        .chain(warped.iter().map(|x| patchify(x, p)))
        .collect();
    for blk in &blocks {
        if blk.nrows() != hw {
            return Err(Error::dim("patches per image", hw, blk.nrows()));
        }
    }
    let views: Vec<_> = blocks.iter().map(|x| x.view()).collect();
    let patches = ndarray::concatenate(Axis(0), &views).expect("equal widths");

    let mut g = Graph::new();
    let pv = g.leaf(patches, false);
    let trainable = trainable_parameter_set(&model.backbone, &cfgs.backbone);
    let bvars = BackboneVars::bind(&mut g, &model.backbone, &trainable);
    let feats = build_backbone(&mut g, pv, &bvars, &cfgs.backbone, n);
    let hvars = HeadVars::bind(&mut g, &model.head, true);
    let gumbel = if mc.gumbel_enabled {
        noise.gumbel.as_ref()
    } else {
        None
    };
    let dropout = if mc.part_dropout_rate > 0.0 {
        noise.dropout.as_deref()
    } else {
        None
    };
    let nodes = build_head(&mut g, feats, &hvars, mc, n, gumbel, dropout);

    let attn_rows = g.value(nodes.attention);
    let maps: Vec<AttentionMaps> = (0..n)
        .map(|i| {
            AttentionMaps::from_rows(
                &attn_rows.slice(s![i * hw..(i + 1) * hw, ..]).to_owned(),
                h,
                wd,
            )
        })
        .collect();
    let mut g_attn: Vec<Array3<f64>> = (0..n).map(|_| Array3::zeros((c, h, wd))).collect();
    let mut g_mod = Array2::<f64>::zeros(g.value(nodes.modulated).dim());
    let mut g_scores = Array2::<f64>::zeros(g.value(nodes.scores).dim());
    let mut terms = LossTerms::default();
    let inv_b = 1.0 / b as f64;

    for term in w.active() {
        let wt = w.get(term);
        let value = match term {
            Term::Cls => {
                let scores = g.value(nodes.scores);
                let mut sum = 0.0;
                for (i, &label) in labels.iter().enumerate() {
                    let (l, gr) = classification_loss_grad(&scores.row(i).to_owned(), label)?;
                    sum += l;
                    g_scores.row_mut(i).scaled_add(wt * inv_b, &gr);
                }
                sum * inv_b
            }
            Term::Orth => {
                let v = g.value(nodes.modulated);
                let mut sum = 0.0;
                for i in 0..b {
                    let (l, gr) = orthogonality_loss_grad(v.slice(s![i * c..(i + 1) * c, ..]));
                    sum += l;
                    g_mod
                        .slice_mut(s![i * c..(i + 1) * c, ..])
                        .scaled_add(wt * inv_b, &gr);
                }
                sum * inv_b
            }
            Term::Equiv => {
                let mut sum = 0.0;
                for i in 0..b {
                    let (l, gr) = equivariance_loss_grad(
                        maps[i].0.view(),
                        maps[b + i].0.view(),
                        &noise.transforms[i],
                    )?;
                    sum += l;
                    g_attn[i].scaled_add(wt * inv_b, &gr.original);
                    g_attn[b + i].scaled_add(wt * inv_b, &gr.transformed);
                }
                sum * inv_b
            }
            Term::PresenceFg => {
                let k = mc.k;
                let pooled: Vec<Array3<f64>> = maps[..b]
                    .iter()
                    .map(|a| {
                        let mut out = Array3::zeros((k, h, wd));
                        for ch in 0..k {
                            out.index_axis_mut(Axis(0), ch)
                                .assign(&pool_presence(a.0.index_axis(Axis(0), ch)));
                        }
                        out
                    })
                    .collect();
                let (l, grads) = presence_loss_fg_grad(&pooled);
                for (i, gr) in grads.iter().enumerate() {
                    for ch in 0..k {
                        let back = pool_presence_adjoint(gr.index_axis(Axis(0), ch));
                        g_attn[i].index_axis_mut(Axis(0), ch).scaled_add(wt, &back);
                    }
                }
                l
            }
            Term::PresenceBg => {
                let bg = mc.k;
                let pooled: Vec<Array2<f64>> = maps[..b]
                    .iter()
                    .map(|a| pool_presence(a.0.index_axis(Axis(0), bg)))
                    .collect();
                let (l, grads) = presence_loss_bg_grad(&pooled, &center_mask(h, wd))?;
                for (i, gr) in grads.iter().enumerate() {
                    let back = pool_presence_adjoint(gr.view());
                    g_attn[i].index_axis_mut(Axis(0), bg).scaled_add(wt, &back);
                }
                l
            }
            Term::Entropy => {
                let mut sum = 0.0;
                for i in 0..b {
                    let (l, gr) = entropy_loss_grad(maps[i].0.view());
                    sum += l;
                    g_attn[i].scaled_add(wt * inv_b, &gr);
                }
                sum * inv_b
            }
            Term::Tv => {
                let mut sum = 0.0;
                for i in 0..b {
                    let (l, gr) = total_variation_loss_grad(maps[i].0.view());
                    sum += l;
                    g_attn[i].scaled_add(wt * inv_b, &gr);
                }
                sum * inv_b
            }
        };
        terms.insert(term, value);
    }
    let total = total_loss(&terms, w)?;

    let attn_seed = {
        let rows: Vec<Array2<f64>> = g_attn.iter().map(maps_to_rows).collect();
        let views: Vec<_> = rows.iter().map(|r| r.view()).collect();
        ndarray::concatenate(Axis(0), &views).expect("equal widths")
    };
    let seeds = vec![
        (nodes.attention, attn_seed),
        (nodes.modulated, g_mod),
        (nodes.scores, g_scores),
    ];
    let mut grads = g.backward(seeds);
    let mut out: Vec<Option<Array2<f64>>> =
        bvars.vars.iter().map(|(_, v)| grads.take(*v)).collect();
    for v in [
        hvars.prototypes,
        hvars.mod_weights,
        hvars.mod_biases,
        hvars.classifier,
    ] {
        out.push(grads.take(v));
    }
    Ok(BatchGradients {
        terms,
        total,
        grads: out,
    })
}

#[derive(Debug, Clone)]
pub struct StepReport {
    pub terms: LossTerms,
    pub total: f64,
    pub grad_norm: f64,
    /// Norm of the gradient actually used for the update.
    pub applied_norm: f64,
}

fn global_norm(grads: &[Option<Array2<f64>>]) -> f64 {
    grads
        .iter()
        .flatten()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Scales the gradients to `max_norm` when their global norm exceeds it.
/// Returns the pre-clip norm.
pub fn clip_gradients(grads: &mut [Option<Array2<f64>>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            g.mapv_inplace(|v| v * scale);
        }
    }
    norm
}

/// Adam update of every tensor that received a gradient.
pub fn apply_update(
    model: &mut Model,
    adam: &mut Adam,
    grads: &[Option<Array2<f64>>],
    lrs: &GroupLrs,
) {
    adam.step += 1;
    let t = adam.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    for (i, (name, p)) in model.named_mut().into_iter().enumerate() {
        let Some(g) = &grads[i] else { continue };
        let lr = lrs.get(group_of(&name));
        let m = &mut adam.m[i];
        let v = &mut adam.v[i];
        ndarray::Zip::from(p)
            .and(m)
            .and(v)
            .and(g)
            .for_each(|p, m, v, &g| {
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + ADAM_EPS);
            });
    }
}

/// One optimization step. `epoch` is zero-based; `batch_index` is only used
/// in error messages.
pub fn train_step(
    state: &mut TrainState,
    cfgs: &Configs,
    images: &[&Array3<f64>],
    labels: &[usize],
    epoch: usize,
    batch_index: usize,
) -> Result<StepReport> {
    if images.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let noise = sample_step_noise(&mut state.rng, images.len(), cfgs)?;
    let mut bg =
        loss_and_grads(&state.model, cfgs, images, labels, &noise).map_err(|e| match e {
            Error::Numeric { term, detail } => Error::Numeric {
                term,
                detail: format!("{detail} in batch {batch_index} of epoch {}", epoch + 1),
            },
            other => other,
        })?;
    let grad_norm = clip_gradients(&mut bg.grads, cfgs.train.grad_clip_norm);
    let applied_norm = global_norm(&bg.grads);
    let base = lr_at(epoch, &cfgs.train);
    let scale = scale_lr_for_batch(1.0, cfgs.train.batch_size);
    let lrs = GroupLrs {
        tokens: base.tokens * scale,
        backbone: base.backbone * scale,
        prototypes: base.prototypes * scale,
        head: base.head * scale,
    };
    apply_update(&mut state.model, &mut state.adam, &bg.grads, &lrs);
    Ok(StepReport {
        terms: bg.terms,
        total: bg.total,
        grad_norm,
        applied_norm,
    })
}

/// Deterministic inference output for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub scores: Array1<f64>,
    pub attention: AttentionMaps,
}

impl Prediction {
    pub fn class(&self) -> usize {
        self.scores
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
                if v > best.1 {
                    (i, v)
                } else {
                    best
                }
            })
            .0
    }
}

/// Runs the model without Gumbel noise or part dropout.
pub fn predict(model: &Model, cfgs: &Configs, images: &[&ImageSample]) -> Result<Vec<Prediction>> {
    cfgs.validate()?;
    let expect = cfgs.image_size();
    for img in images {
        if (img.height(), img.width()) != expect {
            return Err(Error::Input(format!(
                "image is {}x{} but the model expects {}x{}",
                img.height(),
                img.width(),
                expect.0,
                expect.1
            )));
        }
    }
    let mc = &cfgs.model;
    let hw = mc.locations();
    let chunks: Vec<Vec<Prediction>> = images
        .par_chunks(EVAL_CHUNK)
        .map(|chunk| {
            let blocks: Vec<Array2<f64>> = chunk
                .iter()
                .map(|x| patchify(&x.0, cfgs.backbone.patch_size))
                .collect();
            let views: Vec<_> = blocks.iter().map(|x| x.view()).collect();
            let patches = ndarray::concatenate(Axis(0), &views).expect("equal widths");
            let mut g = Graph::new();
            let pv = g.leaf(patches, false);
            let bvars = BackboneVars::bind(&mut g, &model.backbone, &[]);
            let feats = build_backbone(&mut g, pv, &bvars, &cfgs.backbone, chunk.len());
            let hvars = HeadVars::bind(&mut g, &model.head, false);
            let nodes = build_head(&mut g, feats, &hvars, mc, chunk.len(), None, None);
            let attn = g.value(nodes.attention);
            let scores = g.value(nodes.scores);
            (0..chunk.len())
                .map(|i| Prediction {
                    scores: scores.row(i).to_owned(),
                    attention: AttentionMaps::from_rows(
                        &attn.slice(s![i * hw..(i + 1) * hw, ..]).to_owned(),
                        mc.height,
                        mc.width,
                    ),
                })
                .collect()
        })
        .collect();
    Ok(chunks.into_iter().flatten().collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Metric {
    Top1,
    Nmi,
    Ari,
    Kp,
    FgMiou,
    AttentionEntropy,
    /// Mean total variation of the attention maps.
    AttentionTv,
    /// Mean background-channel attention.
    BackgroundActivation,
}

impl Metric {
    /// The report printed by default.
    pub const STANDARD: [Metric; 6] = [
        Metric::Top1,
        Metric::Nmi,
        Metric::Ari,
        Metric::Kp,
        Metric::FgMiou,
        Metric::AttentionEntropy,
    ];
    pub const ALL: [Metric; 8] = [
        Metric::Top1,
        Metric::Nmi,
        Metric::Ari,
        Metric::Kp,
        Metric::FgMiou,
        Metric::AttentionEntropy,
        Metric::AttentionTv,
        Metric::BackgroundActivation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Top1 => "top1",
            Metric::Nmi => "nmi",
            Metric::Ari => "ari",
            Metric::Kp => "kp",
            Metric::FgMiou => "fg_miou",
            Metric::AttentionEntropy => "attention_entropy",
            Metric::AttentionTv => "attention_tv",
            Metric::BackgroundActivation => "background_activation",
        }
    }

    pub fn parse(s: &str) -> Option<Metric> {
        Metric::ALL.into_iter().find(|m| m.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub values: Vec<(Metric, f64)>,
    /// Images without foreground pixels, left out of NMI/ARI.
    pub skipped_images: usize,
}

impl EvalReport {
    pub fn get(&self, m: Metric) -> Option<f64> {
        self.values.iter().find(|(k, _)| *k == m).map(|(_, v)| *v)
    }

    /// `key=value` lines.
    pub fn to_lines(&self) -> String {
        self.values
            .iter()
            .map(|(m, v)| format!("{}={v}\n", m.name()))
            .collect()
    }
}

/// Metrics over `eval` predictions. `train` supplies the fitting set for the
/// keypoint regressor and is only needed for [`Metric::Kp`].
pub fn evaluate_predictions(
    eval: &[(&AnnotatedSample, &Prediction)],
    train: &[(&AnnotatedSample, &Prediction)],
    requested: &[Metric],
) -> Result<EvalReport> {
    if eval.is_empty() {
        return Err(Error::Input("no samples to evaluate".into()));
    }
    let n = eval.len() as f64;
    let mut values = Vec::new();
    let mut skipped = 0;
    let missing = |what: &str, m: Metric| {
        Error::Input(format!(
            "metric '{}' needs {what}, which the dataset does not provide",
            m.name()
        ))
    };
    for &m in requested {
        let v = match m {
            Metric::Top1 => {
                let pred: Vec<usize> = eval.iter().map(|(_, p)| p.class()).collect();
                let truth: Vec<usize> = eval.iter().map(|(s, _)| s.class_id).collect();
                metrics::top1_accuracy(&pred, &truth)
            }
            Metric::Nmi | Metric::Ari => {
                let mut pred = Vec::new();
                let mut gt = Vec::new();
                skipped = 0;
                for (s, p) in eval {
                    let mask = s
                        .part_mask
                        .as_ref()
                        .ok_or_else(|| missing("part masks", m))?;
                    match metrics::part_clustering_labels(&p.attention.assignment(), mask) {
                        Some((a, b)) => {
                            pred.extend(a);
                            gt.extend(b);
                        }
                        None => skipped += 1,
                    }
                }
                if gt.is_empty() {
                    return Err(Error::Input(
                        "no foreground pixels in the evaluation split".into(),
                    ));
                }
                if m == Metric::Nmi {
                    metrics::nmi(&pred, &gt)?
                } else {
                    metrics::ari(&pred, &gt)?
                }
            }
            Metric::FgMiou => {
                let mut sum = 0.0;
                for (s, p) in eval {
                    let fg = s.fg_mask.as_ref().ok_or_else(|| missing("part masks", m))?;
                    sum += metrics::foreground_iou(&p.attention.assignment(), fg);
                }
                sum / n
            }
            Metric::Kp => {
                let rows = |set: &[(&AnnotatedSample, &Prediction)]| -> Result<Vec<_>> {
                    set.iter()
                        .map(|(s, p)| {
                            let kp = s.keypoints.clone().ok_or_else(|| missing("keypoints", m))?;
                            Ok((metrics::centroids(&p.attention), kp))
                        })
                        .collect()
                };
                metrics::keypoint_regression_error(&rows(train)?, &rows(eval)?)?
            }
            Metric::AttentionEntropy => {
                metrics::attention_entropy_report(eval.iter().map(|(_, p)| &p.attention))
            }
            Metric::AttentionTv => {
                eval.iter()
                    .map(|(_, p)| total_variation_loss(&p.attention))
                    .sum::<f64>()
                    / n
            }
            Metric::BackgroundActivation => {
                eval.iter()
                    .map(|(_, p)| {
                        let a = &p.attention;
                        a.0.index_axis(Axis(0), a.k()).mean().unwrap_or(0.0)
                    })
                    .sum::<f64>()
                    / n
            }
        };
        values.push((m, v));
    }
    Ok(EvalReport {
        values,
        skipped_images: skipped,
    })
}

/// Predicts `split` (and the train split when keypoints are requested) and
/// computes the requested metrics.
pub fn evaluate(
    model: &Model,
    cfgs: &Configs,
    dataset: &Dataset,
    split: Split,
    requested: &[Metric],
) -> Result<EvalReport> {
    let eval = dataset.split(split);
    let preds = predict(
        model,
        cfgs,
        &eval.iter().map(|s| &s.image).collect::<Vec<_>>(),
    )?;
    let eval_pairs: Vec<_> = eval.iter().copied().zip(preds.iter()).collect();
    let (train, train_preds) = if requested.contains(&Metric::Kp) {
        let t = dataset.split(Split::Train);
        let p = predict(model, cfgs, &t.iter().map(|s| &s.image).collect::<Vec<_>>())?;
        (t, p)
    } else {
        (Vec::new(), Vec::new())
    };
    let train_pairs: Vec<_> = train.iter().copied().zip(train_preds.iter()).collect();
    evaluate_predictions(&eval_pairs, &train_pairs, requested)
}

// ---------------------------------------------------------------------------
// checkpoints

fn configs_entries(c: &Configs) -> Vec<(String, Tensor)> {
    let f = |k: &str, v: f64| (format!("config.{k}"), Tensor::scalar_f64(v));
    let i = |k: &str, v: i64| (format!("config.{k}"), Tensor::scalar_i64(v));
    let m = &c.model;
    let b = &c.backbone;
    let t = &c.train;
    let mut out = vec![
        i("model.k", m.k as i64),
        i("model.classes", m.classes as i64),
        i("model.dim", m.dim as i64),
        i("model.height", m.height as i64),
        i("model.width", m.width as i64),
        i("model.gumbel_enabled", m.gumbel_enabled as i64),
        f("model.gumbel_temperature", m.gumbel_temperature),
        f("model.part_dropout_rate", m.part_dropout_rate),
        f("model.layernorm_epsilon", m.layernorm_epsilon),
        i("model.modulation_enabled", m.modulation_enabled as i64),
        i("backbone.patch_size", b.patch_size as i64),
        i("backbone.depth", b.depth as i64),
        i("backbone.heads", b.heads as i64),
        i("backbone.feat_dim", b.feat_dim as i64),
        i("backbone.register_tokens", b.register_tokens as i64),
        i(
            "backbone.train_mode",
            match b.train_mode {
                TrainMode::TokensOnly => 0,
                TrainMode::Full => 1,
                TrainMode::Frozen => 2,
            },
        ),
        i("train.epochs", t.epochs as i64),
        i("train.batch_size", t.batch_size as i64),
        f("train.lr_tokens", t.lr_tokens),
        f("train.lr_backbone", t.lr_backbone),
        f("train.lr_prototypes", t.lr_prototypes),
        f("train.lr_head", t.lr_head),
        f("train.lr_decay_factor", t.lr_decay_factor),
        i("train.lr_decay_every", t.lr_decay_every as i64),
        f("train.grad_clip_norm", t.grad_clip_norm),
        f("train.affine.rotation_min", t.affine.rotation.0),
        f("train.affine.rotation_max", t.affine.rotation.1),
        f("train.affine.scale_min", t.affine.scale.0),
        f("train.affine.scale_max", t.affine.scale.1),
        f("train.affine.translate_min", t.affine.translate.0),
        f("train.affine.translate_max", t.affine.translate.1),
        i("train.seed", t.seed as i64),
    ];
    for term in Term::ALL {
        out.push(f(
            &format!("train.weight.{}", term.name()),
            t.loss_weights.get(term),
        ));
    }
    out
}

struct Entries<'a> {
    map: HashMap<&'a str, &'a Tensor>,
    path: &'a Path,
}

impl<'a> Entries<'a> {
    fn get(&self, name: &str) -> Result<&'a Tensor> {
        self.map.get(name).copied().ok_or_else(|| Error::Format {
            path: self.path.to_path_buf(),
            offset: 0,
            detail: format!("checkpoint has no entry '{name}'"),
        })
    }

    fn bad(&self, name: &str, what: &str) -> Error {
        Error::Format {
            path: self.path.to_path_buf(),
            offset: 0,
            detail: format!("entry '{name}' is not {what}"),
        }
    }

    fn f64(&self, name: &str) -> Result<f64> {
        let t = self
            .get(&format!("config.{name}"))
            .or_else(|_| self.get(name))?;
        match t.as_f64() {
            Some([v]) => Ok(*v),
            _ => Err(self.bad(name, "an f64 scalar")),
        }
    }

    fn i64(&self, name: &str) -> Result<i64> {
        let t = self
            .get(&format!("config.{name}"))
            .or_else(|_| self.get(name))?;
        match t.as_i64() {
            Some([v]) => Ok(*v),
            _ => Err(self.bad(name, "an i64 scalar")),
        }
    }

    fn usize(&self, name: &str) -> Result<usize> {
        usize::try_from(self.i64(name)?).map_err(|_| self.bad(name, "a non-negative count"))
    }

    fn i64s(&self, name: &str, len: usize) -> Result<&'a [i64]> {
        match self.get(name)?.as_i64() {
            Some(v) if v.len() == len => Ok(v),
            _ => Err(self.bad(name, &format!("{len} i64 values"))),
        }
    }

    fn array(&self, name: &str, dim: (usize, usize)) -> Result<Array2<f64>> {
        let t = self.get(name)?;
        let a = t.to_f64_array();
        if a.shape() != [dim.0, dim.1] {
            return Err(Error::Format {
                path: self.path.to_path_buf(),
                offset: 0,
                detail: format!(
                    "entry '{name}' has shape {:?}, expected {:?}",
                    a.shape(),
                    [dim.0, dim.1]
                ),
            });
        }
        Ok(a.into_dimensionality().expect("rank checked"))
    }
}

fn configs_from(e: &Entries) -> Result<Configs> {
    let model = ModelConfig {
        k: e.usize("model.k")?,
        classes: e.usize("model.classes")?,
        dim: e.usize("model.dim")?,
        height: e.usize("model.height")?,
        width: e.usize("model.width")?,
        gumbel_enabled: e.i64("model.gumbel_enabled")? != 0,
        gumbel_temperature: e.f64("model.gumbel_temperature")?,
        part_dropout_rate: e.f64("model.part_dropout_rate")?,
        layernorm_epsilon: e.f64("model.layernorm_epsilon")?,
        modulation_enabled: e.i64("model.modulation_enabled")? != 0,
    };
    let backbone = BackboneConfig {
        patch_size: e.usize("backbone.patch_size")?,
        depth: e.usize("backbone.depth")?,
        heads: e.usize("backbone.heads")?,
        feat_dim: e.usize("backbone.feat_dim")?,
        register_tokens: e.usize("backbone.register_tokens")?,
        train_mode: match e.i64("backbone.train_mode")? {
            0 => TrainMode::TokensOnly,
            1 => TrainMode::Full,
            2 => TrainMode::Frozen,
            _ => return Err(e.bad("config.backbone.train_mode", "a known train mode")),
        },
    };
    let mut loss_weights = LossWeights::default();
    for term in Term::ALL {
        loss_weights.set(term, e.f64(&format!("train.weight.{}", term.name()))?);
    }
    let train = TrainConfig {
        epochs: e.usize("train.epochs")?,
        batch_size: e.usize("train.batch_size")?,
        lr_tokens: e.f64("train.lr_tokens")?,
        lr_backbone: e.f64("train.lr_backbone")?,
        lr_prototypes: e.f64("train.lr_prototypes")?,
        lr_head: e.f64("train.lr_head")?,
        lr_decay_factor: e.f64("train.lr_decay_factor")?,
        lr_decay_every: e.usize("train.lr_decay_every")?,
        grad_clip_norm: e.f64("train.grad_clip_norm")?,
        loss_weights,
        affine: AffineRanges {
            rotation: (
                e.f64("train.affine.rotation_min")?,
                e.f64("train.affine.rotation_max")?,
            ),
            scale: (
                e.f64("train.affine.scale_min")?,
                e.f64("train.affine.scale_max")?,
            ),
            translate: (
                e.f64("train.affine.translate_min")?,
                e.f64("train.affine.translate_max")?,
            ),
        },
        seed: e.i64("train.seed")? as u64,
    };
    Ok(Configs {
        model,
        backbone,
        train,
    })
}

/// Configuration plus training state, as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub configs: Configs,
    pub state: TrainState,
}

pub fn checkpoint_entries(cfgs: &Configs, state: &TrainState) -> Vec<(String, Tensor)> {
    let mut out = configs_entries(cfgs);
    let seed = state.rng.get_seed();
    let seed_words: Vec<i64> = seed
        .chunks_exact(8)
        .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let pos = state.rng.get_word_pos();
    out.push(("state.epoch".into(), Tensor::scalar_i64(state.epoch as i64)));
    out.push((
        "state.best_val_top1".into(),
        Tensor::scalar_f64(state.best_val_top1),
    ));
    out.push(("state.rng.seed".into(), Tensor::i64s(seed_words)));
    out.push((
        "state.rng.word_pos".into(),
        Tensor::i64s(vec![pos as u64 as i64, (pos >> 64) as u64 as i64]),
    ));
    out.push((
        "state.rng.stream".into(),
        Tensor::scalar_i64(state.rng.get_stream() as i64),
    ));
    out.push((
        "adam.step".into(),
        Tensor::scalar_i64(state.adam.step as i64),
    ));
    for (i, (name, t)) in state.model.named().into_iter().enumerate() {
        out.push((
            format!("param.{name}"),
            Tensor::from_f64(t.clone().into_dyn()),
        ));
        out.push((
            format!("adam.m.{name}"),
            Tensor::from_f64(state.adam.m[i].clone().into_dyn()),
        ));
        out.push((
            format!("adam.v.{name}"),
            Tensor::from_f64(state.adam.v[i].clone().into_dyn()),
        ));
    }
    out
}

pub fn save_checkpoint(path: &Path, cfgs: &Configs, state: &TrainState) -> Result<()> {
    container::write_file(path, &checkpoint_entries(cfgs, state))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let raw = container::read_file(path)?;
    let e = Entries {
        map: raw.iter().map(|(n, t)| (n.as_str(), t)).collect(),
        path,
    };
    let configs = configs_from(&e)?;
    configs.validate().map_err(|err| Error::Format {
        path: path.to_path_buf(),
        offset: 0,
        detail: format!("stored configuration is invalid: {err}"),
    })?;

    // shapes come from a freshly initialized model of the same configuration
    let mut model = Model::init(&configs, &mut ChaCha8Rng::seed_from_u64(0));
    let mut adam = Adam::new(&model);
    for (i, (name, t)) in model.named_mut().into_iter().enumerate() {
        let dim = t.dim();
        *t = e.array(&format!("param.{name}"), dim)?;
        adam.m[i] = e.array(&format!("adam.m.{name}"), dim)?;
        adam.v[i] = e.array(&format!("adam.v.{name}"), dim)?;
    }
    adam.step = e.i64("adam.step")? as u64;
    let words = e.i64s("state.rng.seed", 4)?;
    let mut seed = [0u8; 32];
    for (chunk, w) in seed.chunks_exact_mut(8).zip(words) {
        chunk.copy_from_slice(&w.to_le_bytes());
    }
    let pos = e.i64s("state.rng.word_pos", 2)?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(e.i64("state.rng.stream")? as u64);
    rng.set_word_pos(pos[0] as u64 as u128 | ((pos[1] as u64 as u128) << 64));
    let state = TrainState {
        model,
        adam,
        rng,
        epoch: e.usize("state.epoch")?,
        best_val_top1: e.f64("state.best_val_top1")?,
    };
    Ok(Checkpoint { configs, state })
}

// ---------------------------------------------------------------------------
// fit

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRow {
    /// One-based.
    pub epoch: usize,
    pub term: String,
    pub value: f64,
}

pub fn write_history(path: &Path, rows: &[HistoryRow]) -> Result<()> {
    let mut text = String::from("epoch,term,value\n");
    for r in rows {
        text.push_str(&format!("{},{},{}\n", r.epoch, r.term, r.value));
    }
    container::write_atomic(path, text.as_bytes())
}

pub fn read_history(path: &Path) -> Result<Vec<HistoryRow>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        offset: 0,
        detail: e.to_string(),
    })?;
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Format {
            path: path.to_path_buf(),
            offset: e.position().map_or(0, |p| p.byte()),
            detail: e.to_string(),
        })?;
        let bad = || Error::Format {
            path: path.to_path_buf(),
            offset: rec.position().map_or(0, |p| p.byte()),
            detail: format!("malformed history row {:?}", rec),
        };
        rows.push(HistoryRow {
            epoch: rec.get(0).and_then(|v| v.parse().ok()).ok_or_else(bad)?,
            term: rec.get(1).ok_or_else(bad)?.to_string(),
            value: rec.get(2).and_then(|v| v.parse().ok()).ok_or_else(bad)?,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone)]
pub struct EpochSummary {
    /// One-based.
    pub epoch: usize,
    pub terms: Vec<(Term, f64)>,
    pub total: f64,
    pub val_top1: f64,
}

#[derive(Debug, Clone, Default)]
pub struct FitOptions {
    pub out_dir: PathBuf,
    /// Continue from this checkpoint; history rows after its epoch are dropped.
    pub resume: Option<PathBuf>,
    /// Write `epoch_NNN.ckpt` after every epoch (`last.ckpt` and `best.ckpt`
    /// are always written).
    pub keep_epoch_checkpoints: bool,
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub state: TrainState,
    pub history: Vec<HistoryRow>,
}

/// Trains on the train split, validating after each epoch.
pub fn fit(
    dataset: &Dataset,
    cfgs: &Configs,
    opts: &FitOptions,
    mut on_epoch: impl FnMut(&EpochSummary),
) -> Result<FitOutcome> {
    cfgs.validate()?;
    let train = dataset.split(Split::Train);
    let val = dataset.split(Split::Val);
    if train.is_empty() || val.is_empty() {
        return Err(Error::Input(format!(
            "dataset {} needs non-empty train and val splits (found {} and {})",
            dataset.root.display(),
            train.len(),
            val.len()
        )));
    }
    if let Some(s) = train.iter().find(|s| s.class_id >= cfgs.model.classes) {
        return Err(Error::Config(format!(
            "sample {} has class {} but the model has {} classes",
            s.id, s.class_id, cfgs.model.classes
        )));
    }
    fs::create_dir_all(&opts.out_dir).map_err(|e| Error::io(&opts.out_dir, e))?;
    let history_path = opts.out_dir.join("history.csv");

    let (mut state, mut history) = match &opts.resume {
        Some(path) => {
            let ck = load_checkpoint(path)?;
            let mut stored = ck.configs.clone();
            stored.train.epochs = cfgs.train.epochs;
            if &stored != cfgs {
                return Err(Error::Config(format!(
                    "checkpoint {} was written with a different configuration",
                    path.display()
                )));
            }
            let history = if history_path.exists() {
                read_history(&history_path)?
                    .into_iter()
                    .filter(|r| r.epoch <= ck.state.epoch)
                    .collect()
            } else {
                Vec::new()
            };
            (ck.state, history)
        }
        None => {
            let mut state = TrainState::new(cfgs);
            let seed_images: Vec<&ImageSample> = train
                .iter()
                .take(PROTOTYPE_INIT_IMAGES)
                .map(|s| &s.image)
                .collect();
            init_prototypes(&mut state.model, cfgs, &seed_images)?;
            (state, Vec::new())
        }
    };

    let images: Vec<&Array3<f64>> = train.iter().map(|s| &s.image.0).collect();
    let labels: Vec<usize> = train.iter().map(|s| s.class_id).collect();
    let val_images: Vec<&ImageSample> = val.iter().map(|s| &s.image).collect();

    while state.epoch < cfgs.train.epochs {
        let epoch = state.epoch;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(sample_hash(
            cfgs.train.seed,
            epoch as u64,
            2,
        )));
        let mut sums: Vec<(Term, f64)> = Vec::new();
        let mut total = 0.0;
        let mut steps = 0usize;
        for (bi, idx) in order.chunks(cfgs.train.batch_size).enumerate() {
            let imgs: Vec<&Array3<f64>> = idx.iter().map(|&i| images[i]).collect();
            let lbls: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let report = train_step(&mut state, cfgs, &imgs, &lbls, epoch, bi)?;
            for (t, v) in &report.terms.values {
                match sums.iter_mut().find(|(k, _)| k == t) {
                    Some(slot) => slot.1 += v,
                    None => sums.push((*t, *v)),
                }
            }
            total += report.total;
            steps += 1;
        }
        let preds = predict(&state.model, cfgs, &val_images)?;
        let hits = preds
            .iter()
            .zip(&val)
            .filter(|(p, s)| p.class() == s.class_id)
            .count();
        let val_top1 = hits as f64 / val.len() as f64;
        state.epoch += 1;

        let summary = EpochSummary {
            epoch: state.epoch,
            terms: sums.iter().map(|(t, v)| (*t, v / steps as f64)).collect(),
            total: total / steps as f64,
            val_top1,
        };
        for (t, v) in &summary.terms {
            history.push(HistoryRow {
                epoch: state.epoch,
                term: t.name().into(),
                value: *v,
            });
        }
        history.push(HistoryRow {
            epoch: state.epoch,
            term: "total".into(),
            value: summary.total,
        });
        history.push(HistoryRow {
            epoch: state.epoch,
            term: "val_top1".into(),
            value: val_top1,
        });

        let improved = val_top1 > state.best_val_top1;
        if improved {
            state.best_val_top1 = val_top1;
        }
        save_checkpoint(&opts.out_dir.join("last.ckpt"), cfgs, &state)?;
        if opts.keep_epoch_checkpoints {
            save_checkpoint(
                &opts.out_dir.join(format!("epoch_{:03}.ckpt", state.epoch)),
                cfgs,
                &state,
            )?;
        }
        if improved {
            save_checkpoint(&opts.out_dir.join("best.ckpt"), cfgs, &state)?;
        }
        write_history(&history_path, &history)?;
        on_epoch(&summary);
    }
    Ok(FitOutcome { state, history })
}
