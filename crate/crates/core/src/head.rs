//! The part-discovery head.
//!
//! Patch features are compared against a bank of `K+1` prototypes (the last
//! one is background), turned into soft part assignments with a
//! Gumbel-Softmax, pooled into one embedding per part, modulated with a joint
//! layer norm plus per-part affine, and classified with a single linear layer
//! shared by all foreground parts.
//!
//! The free functions here work on single images and are what inference and
//! tests call. [`build_head`] records the same computation on a [`Graph`] for
//! batched training.

use ndarray::{s, Array1, Array2, Array3, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{self, Graph, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Number of foreground parts.
    pub k: usize,
    pub classes: usize,
    pub dim: usize,
    pub height: usize,
    pub width: usize,
    pub gumbel_enabled: bool,
    pub gumbel_temperature: f64,
    pub part_dropout_rate: f64,
    pub layernorm_epsilon: f64,
    /// When false the pooled embeddings skip the per-part modulation.
    pub modulation_enabled: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            k: 4,
            classes: 8,
            dim: 64,
            height: 8,
            width: 8,
            gumbel_enabled: true,
            gumbel_temperature: 1.0,
            part_dropout_rate: 0.3,
            layernorm_epsilon: 1e-5,
            modulation_enabled: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.k < 1 {
            return bad("k must be at least 1");
        }
        if self.classes < 2 {
            return bad("classes must be at least 2");
        }
        if self.dim < 1 {
            return bad("feature dimension must be at least 1");
        }
        if self.height < 2 || self.width < 2 {
            return bad("patch grid must be at least 2x2");
        }
        if !(self.gumbel_temperature > 0.0) || !self.gumbel_temperature.is_finite() {
            return bad("gumbel temperature must be positive");
        }
        if !(0.0..1.0).contains(&self.part_dropout_rate) {
            return bad("part dropout rate must lie in [0, 1)");
        }
        if !(self.layernorm_epsilon >= 0.0) {
            return bad("layer norm epsilon must be non-negative");
        }
        Ok(())
    }

    /// Number of attention channels, background included.
    pub fn channels(&self) -> usize {
        self.k + 1
    }

    pub fn locations(&self) -> usize {
        self.height * self.width
    }
}

/// Patch-token features laid out as `D×H×W`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap(pub Array3<f64>);

impl FeatureMap {
    pub fn new(values: Array3<f64>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                term: "feature map".into(),
                detail: "non-finite entry".into(),
            });
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }

    /// Row-per-location view, `HW×D`, locations in row-major order.
    pub fn tokens(&self) -> Array2<f64> {
        let (d, h, w) = self.0.dim();
        self.0
            .to_shape((d, h * w))
            .expect("contiguous reshape")
            .t()
            .to_owned()
    }

    pub fn from_tokens(tokens: &Array2<f64>, height: usize, width: usize) -> Self {
        let d = tokens.ncols();
        let t = tokens.t().as_standard_layout().to_owned();
        Self(
            t.into_shape_with_order((d, height, width))
                .expect("token count matches grid"),
        )
    }
}

/// `(K+1)×D` prototypes, background last.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank(pub Array2<f64>);

/// Soft part assignments `(K+1)×H×W`, background last.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMaps(pub Array3<f64>);

impl AttentionMaps {
    pub fn channels(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn k(&self) -> usize {
        self.channels() - 1
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }

    /// Builds maps from an `HW×(K+1)` row-per-location matrix.
    pub fn from_rows(rows: &Array2<f64>, height: usize, width: usize) -> Self {
        let c = rows.ncols();
        let t = rows.t().as_standard_layout().to_owned();
        Self(
            t.into_shape_with_order((c, height, width))
                .expect("row count matches grid"),
        )
    }

    /// Inverse of [`AttentionMaps::from_rows`].
    pub fn to_rows(&self) -> Array2<f64> {
        let (c, h, w) = self.0.dim();
        self.0
            .to_shape((c, h * w))
            .expect("contiguous reshape")
            .t()
            .to_owned()
    }

    /// Largest deviation of a per-location channel sum from 1.
    pub fn max_normalization_error(&self) -> f64 {
        self.0
            .sum_axis(Axis(0))
            .iter()
            .fold(0.0f64, |m, &v| m.max((v - 1.0).abs()))
    }

    /// Hard assignment: 0 for background, `k+1` for foreground channel `k`.
    /// Ties go to the lowest channel index.
    pub fn assignment(&self) -> Array2<u32> {
        let (c, h, w) = self.0.dim();
        Array2::from_shape_fn((h, w), |(i, j)| {
            let mut best = 0;
            for k in 1..c {
                if self.0[[k, i, j]] > self.0[[best, i, j]] {
                    best = k;
                }
            }
            if best == c - 1 {
                0
            } else {
                best as u32 + 1
            }
        })
    }
}

/// Pooled part vectors `(K+1)×D`.
#[derive(Debug, Clone, PartialEq)]
pub struct PartEmbeddings(pub Array2<f64>);

/// Part vectors after modulation (and possibly dropout), `(K+1)×D`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModulatedEmbeddings(pub Array2<f64>);

#[derive(Debug, Clone, PartialEq)]
pub struct ModulationParams {
    pub weights: Array2<f64>,
    pub biases: Array2<f64>,
}

/// Shared classifier, `C×D`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierWeights(pub Array2<f64>);

#[derive(Debug, Clone, PartialEq)]
pub struct ClassScores {
    /// `K×C`, one row per foreground part.
    pub per_part: Array2<f64>,
    pub mean: Array1<f64>,
}

const PROTOTYPE_INIT: f64 = 0.1;

/// All learnable head tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub prototypes: PrototypeBank,
    pub modulation: ModulationParams,
    pub classifier: ClassifierWeights,
}

impl HeadParams {
    /// Prototypes from `U(-0.1, 0.1)`, classifier from `U(-1/√D, 1/√D)`;
    /// modulation starts at the identity affine.
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let c = cfg.channels();
        let bound = 1.0 / (cfg.dim as f64).sqrt();
        let prototypes = Array2::from_shape_fn((c, cfg.dim), |_| {
            rng.gen_range(-PROTOTYPE_INIT..PROTOTYPE_INIT)
        });
        let classifier =
            Array2::from_shape_fn((cfg.classes, cfg.dim), |_| rng.gen_range(-bound..bound));
        Self {
            prototypes: PrototypeBank(prototypes),
            modulation: ModulationParams {
                weights: Array2::ones((c, cfg.dim)),
                biases: Array2::zeros((c, cfg.dim)),
            },
            classifier: ClassifierWeights(classifier),
        }
    }

    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        let c = cfg.channels();
        let expect = |what: &str, a: &Array2<f64>, rows: usize, cols: usize| -> Result<()> {
            if a.nrows() != rows {
                return Err(Error::dim(format!("{what} rows"), rows, a.nrows()));
            }
            if a.ncols() != cols {
                return Err(Error::dim(format!("{what} columns"), cols, a.ncols()));
            }
            Ok(())
        };
        expect("prototypes", &self.prototypes.0, c, cfg.dim)?;
        expect("modulation weights", &self.modulation.weights, c, cfg.dim)?;
        expect("modulation biases", &self.modulation.biases, c, cfg.dim)?;
        expect("classifier", &self.classifier.0, cfg.classes, cfg.dim)
    }
}

/// Fresh Gumbel(0,1) samples, drawn row by row.
pub fn gumbel_noise<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Array2<f64> {
    let mut out = Array2::zeros((rows, cols));
    for v in out.iter_mut() {
        let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        *v = -(-u.ln()).ln();
    }
    out
}

/// Per-row multipliers for part dropout: each of the first `k` rows is 0 with
/// probability `rate` and `1/(1-rate)` otherwise; the background row stays 1.
pub fn dropout_multipliers<R: Rng + ?Sized>(rng: &mut R, k: usize, rate: f64) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    let mut out: Vec<f64> = (0..k)
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
        .collect();
    out.push(1.0);
    out
}

/// `logits[k, i, j] = -‖z_ij − p_k‖²`
pub fn compute_part_logits(z: &FeatureMap, p: &PrototypeBank) -> Result<Array3<f64>> {
    if z.dim() != p.0.ncols() {
        return Err(Error::dim("prototype dimension", z.dim(), p.0.ncols()));
    }
    let rows = graph::neg_sq_dist(z.tokens().view(), p.0.view());
    Ok(AttentionMaps::from_rows(&rows, z.height(), z.width()).0)
}

/// Softmax across channels of `(logits + γ)/τ`, with `γ` fresh Gumbel noise
/// per channel and location when enabled.
pub fn gumbel_softmax_attention<R: Rng + ?Sized>(
    logits: &Array3<f64>,
    cfg: &ModelConfig,
    rng: &mut R,
) -> Result<AttentionMaps> {
    if !(cfg.gumbel_temperature > 0.0) {
        return Err(Error::Config("gumbel temperature must be positive".into()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric {
            term: "part logits".into(),
            detail: "non-finite logit".into(),
        });
    }
    let (_, h, w) = logits.dim();
    let rows = AttentionMaps(logits.clone()).to_rows();
    let mut g = Graph::new();
    let x = g.leaf(rows, false);
    let noise = cfg
        .gumbel_enabled
        .then(|| gumbel_noise(rng, h * w, logits.shape()[0]));
    let a = g.softmax(x, noise.as_ref(), cfg.gumbel_temperature);
    Ok(AttentionMaps::from_rows(g.value(a), h, w))
}

/// `v_k = Σ_ij a^k_ij z_ij / (HW)` for every channel, background included.
pub fn pool_part_embeddings(a: &AttentionMaps, z: &FeatureMap) -> Result<PartEmbeddings> {
    if a.height() != z.height() {
        return Err(Error::dim("grid height", z.height(), a.height()));
    }
    if a.width() != z.width() {
        return Err(Error::dim("grid width", z.width(), a.width()));
    }
    Ok(PartEmbeddings(graph::part_pool(
        a.to_rows().view(),
        z.tokens().view(),
        1,
    )))
}

/// Joint standardization over all `(K+1)·D` entries, then per-part affine.
pub fn modulate(v: &PartEmbeddings, m: &ModulationParams, eps: f64) -> Result<ModulatedEmbeddings> {
    for (what, t) in [
        ("modulation weights", &m.weights),
        ("modulation biases", &m.biases),
    ] {
        if t.dim() != v.0.dim() {
            return Err(Error::dim(format!("{what} rows"), v.0.nrows(), t.nrows()));
        }
    }
    let (xhat, _) = graph::standardize_blocks(v.0.view(), v.0.nrows(), eps);
    Ok(ModulatedEmbeddings(xhat * &m.weights + &m.biases))
}

/// Drops whole foreground rows during training (inverted dropout).
pub fn part_dropout<R: Rng + ?Sized>(
    v_m: &ModulatedEmbeddings,
    rate: f64,
    rng: &mut R,
    training: bool,
) -> ModulatedEmbeddings {
    if !training || rate == 0.0 {
        return v_m.clone();
    }
    let k = v_m.0.nrows() - 1;
    let mult = dropout_multipliers(rng, k, rate);
    let mut out = v_m.0.clone();
    for (mut row, m) in out.rows_mut().into_iter().zip(mult) {
        row *= m;
    }
    ModulatedEmbeddings(out)
}

/// Scores each foreground part with the shared classifier and averages them.
/// The background row is ignored.
pub fn classify(v_m: &ModulatedEmbeddings, wc: &ClassifierWeights) -> Result<ClassScores> {
    if v_m.0.ncols() != wc.0.ncols() {
        return Err(Error::dim(
            "classifier input dimension",
            v_m.0.ncols(),
            wc.0.ncols(),
        ));
    }
    let k = v_m.0.nrows() - 1;
    let per_part = v_m.0.slice(s![..k, ..]).dot(&wc.0.t());
    let mean = per_part.sum_axis(Axis(0)) / k as f64;
    Ok(ClassScores { per_part, mean })
}

/// Everything the loss functions need from one forward pass.
#[derive(Debug, Clone)]
pub struct HeadOutput {
    pub scores: ClassScores,
    pub attention: AttentionMaps,
    pub embeddings: ModulatedEmbeddings,
}

/// Logits, attention, pooling, modulation, dropout and classification.
pub fn forward<R: Rng + ?Sized>(
    z: &FeatureMap,
    params: &HeadParams,
    cfg: &ModelConfig,
    rng: &mut R,
    training: bool,
) -> Result<HeadOutput> {
    cfg.validate()?;
    params.check(cfg)?;
    if z.dim() != cfg.dim {
        return Err(Error::dim("feature dimension", cfg.dim, z.dim()));
    }
    let logits = compute_part_logits(z, &params.prototypes)?;
    let attention = gumbel_softmax_attention(&logits, cfg, rng)?;
    let pooled = pool_part_embeddings(&attention, z)?;
    let modulated = if cfg.modulation_enabled {
        modulate(&pooled, &params.modulation, cfg.layernorm_epsilon)?
    } else {
        ModulatedEmbeddings(pooled.0)
    };
    let dropped = part_dropout(&modulated, cfg.part_dropout_rate, rng, training);
    let scores = classify(&dropped, &params.classifier)?;
    Ok(HeadOutput {
        scores,
        attention,
        embeddings: dropped,
    })
}

/// Graph handles for the head's learnable tensors.
#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub prototypes: Var,
    pub mod_weights: Var,
    pub mod_biases: Var,
    pub classifier: Var,
}

impl HeadVars {
    pub fn bind(g: &mut Graph, params: &HeadParams, trainable: bool) -> Self {
        Self {
            prototypes: g.leaf(params.prototypes.0.clone(), trainable),
            mod_weights: g.leaf(params.modulation.weights.clone(), trainable),
            mod_biases: g.leaf(params.modulation.biases.clone(), trainable),
            classifier: g.leaf(params.classifier.0.clone(), trainable),
        }
    }
}

/// Graph outputs of the batched head.
#[derive(Debug, Clone, Copy)]
pub struct HeadNodes {
    /// `(B·HW)×(K+1)`
    pub attention: Var,
    /// Modulated embeddings before part dropout, `(B·(K+1))×D`.
    pub modulated: Var,
    /// `(B·(K+1))×D`
    pub embeddings: Var,
    /// `B×C`
    pub scores: Var,
}

/// Records the head on `g` for a batch of `batch` images whose patch
/// features are stacked in `feats` (`(B·HW)×D`).
///
/// `noise` must be `(B·HW)×(K+1)` when supplied; `dropout` holds one
/// multiplier per embedding row (`B·(K+1)` entries).
pub fn build_head(
    g: &mut Graph,
    feats: Var,
    vars: &HeadVars,
    cfg: &ModelConfig,
    batch: usize,
    noise: Option<&Array2<f64>>,
    dropout: Option<&[f64]>,
) -> HeadNodes {
    let c = cfg.channels();
    let logits = g.neg_sq_dist(feats, vars.prototypes);
    let attention = g.softmax(logits, noise, cfg.gumbel_temperature);
    let pooled = g.part_pool(attention, feats, batch);
    let modulated = if cfg.modulation_enabled {
        let st = g.standardize_blocks(pooled, c, cfg.layernorm_epsilon);
        g.block_affine(st, vars.mod_weights, vars.mod_biases)
    } else {
        pooled
    };
    let embeddings = match dropout {
        Some(mult) => {
            let mut mask = Array2::zeros((batch * c, cfg.dim));
            for (mut row, &m) in mask.rows_mut().into_iter().zip(mult) {
                row.fill(m);
            }
            g.mul_const(modulated, mask)
        }
        None => modulated,
    };
    let per_part = g.matmul_t(embeddings, vars.classifier);
    let scores = g.mean_rows(per_part, c, cfg.k);
    HeadNodes {
        attention,
        modulated,
        embeddings,
        scores,
    }
}
