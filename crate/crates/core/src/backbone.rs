//! Patch-token vision transformer producing the feature map for the head.
//!
//! Images are cut into `p×p` patches, linearly embedded, offset by learned
//! position embeddings, and prefixed with one class token and `R` register
//! tokens. After `depth` pre-norm blocks and a final layer norm the prefix
//! tokens are dropped and the patch tokens are reshaped to `D×H×W`.

use std::path::Path;

use ndarray::{s, Array2, Array3};
use rand::Rng;

use crate::container::{self, Tensor};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::head::FeatureMap;

const MLP_RATIO: usize = 4;
const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// Only position embeddings, class token and register tokens learn.
    TokensOnly,
    Full,
    Frozen,
}

impl TrainMode {
    pub fn name(self) -> &'static str {
        match self {
            TrainMode::TokensOnly => "tokens_only",
            TrainMode::Full => "full",
            TrainMode::Frozen => "frozen",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tokens_only" => Ok(TrainMode::TokensOnly),
            "full" => Ok(TrainMode::Full),
            "frozen" => Ok(TrainMode::Frozen),
            other => Err(Error::Config(format!(
                "unknown backbone train mode '{other}' (expected tokens_only, full or frozen)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub patch_size: usize,
    pub depth: usize,
    pub heads: usize,
    pub feat_dim: usize,
    pub register_tokens: usize,
    pub train_mode: TrainMode,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            patch_size: 8,
            depth: 2,
            heads: 4,
            feat_dim: 64,
            register_tokens: 4,
            train_mode: TrainMode::Full,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.heads == 0 || self.feat_dim == 0 {
            return Err(Error::Config(
                "patch size, heads and feature dimension must be positive".into(),
            ));
        }
        if self.feat_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "feature dimension {} is not divisible by {} heads",
                self.feat_dim, self.heads
            )));
        }
        Ok(())
    }

    /// Patch grid for an `m×n` image.
    pub fn grid(&self, m: usize, n: usize) -> Result<(usize, usize)> {
        if m % self.patch_size != 0 || n % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image {m}x{n} is not divisible by patch size {}",
                self.patch_size
            )));
        }
        Ok((m / self.patch_size, n / self.patch_size))
    }
}

/// RGB image `3×M×N` with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample(pub Array3<f64>);

impl ImageSample {
    pub fn new(pixels: Array3<f64>) -> Result<Self> {
        if pixels.shape()[0] != 3 {
            return Err(Error::dim("image channels", 3, pixels.shape()[0]));
        }
        if pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Input("pixel values must lie in [0, 1]".into()));
        }
        Ok(Self(pixels))
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }
}

/// One row per patch (row-major), columns ordered channel, row, column.
pub fn patchify(x: &Array3<f64>, patch: usize) -> Array2<f64> {
    let (c, m, n) = x.dim();
    let (gh, gw) = (m / patch, n / patch);
    let mut out = Array2::zeros((gh * gw, c * patch * patch));
    for gi in 0..gh {
        for gj in 0..gw {
            let mut row = out.row_mut(gi * gw + gj);
            let block = x.slice(s![
                ..,
                gi * patch..(gi + 1) * patch,
                gj * patch..(gj + 1) * patch
            ]);
            for (dst, &v) in row.iter_mut().zip(block.iter()) {
                *dst = v;
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln1_g: Array2<f64>,
    pub ln1_b: Array2<f64>,
    pub qkv_w: Array2<f64>,
    pub qkv_b: Array2<f64>,
    pub proj_w: Array2<f64>,
    pub proj_b: Array2<f64>,
    pub ln2_g: Array2<f64>,
    pub ln2_b: Array2<f64>,
    pub fc1_w: Array2<f64>,
    pub fc1_b: Array2<f64>,
    pub fc2_w: Array2<f64>,
    pub fc2_b: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneParams {
    pub patch_w: Array2<f64>,
    pub patch_b: Array2<f64>,
    pub pos: Array2<f64>,
    pub cls: Array2<f64>,
    pub reg: Array2<f64>,
    pub blocks: Vec<BlockParams>,
    pub norm_g: Array2<f64>,
    pub norm_b: Array2<f64>,
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize, bound: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound))
}

fn xavier<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Array2<f64> {
    uniform(
        rng,
        fan_in,
        fan_out,
        (6.0 / (fan_in + fan_out) as f64).sqrt(),
    )
}

/// Tokens are initialized with standard deviation 0.02.
const TOKEN_BOUND: f64 = 0.02 * 1.732_050_807_568_877_2;

impl BackboneParams {
    pub fn init<R: Rng + ?Sized>(cfg: &BackboneConfig, grid: (usize, usize), rng: &mut R) -> Self {
        let d = cfg.feat_dim;
        let patch_in = 3 * cfg.patch_size * cfg.patch_size;
        let n = grid.0 * grid.1;
        let patch_w = xavier(rng, patch_in, d);
        let pos = uniform(rng, n, d, TOKEN_BOUND);
        let cls = uniform(rng, 1, d, TOKEN_BOUND);
        let reg = uniform(rng, cfg.register_tokens, d, TOKEN_BOUND);
        let blocks = (0..cfg.depth)
            .map(|_| BlockParams {
                ln1_g: Array2::ones((1, d)),
                ln1_b: Array2::zeros((1, d)),
                qkv_w: xavier(rng, d, 3 * d),
                qkv_b: Array2::zeros((1, 3 * d)),
                proj_w: xavier(rng, d, d),
                proj_b: Array2::zeros((1, d)),
                ln2_g: Array2::ones((1, d)),
                ln2_b: Array2::zeros((1, d)),
                fc1_w: xavier(rng, d, MLP_RATIO * d),
                fc1_b: Array2::zeros((1, MLP_RATIO * d)),
                fc2_w: xavier(rng, MLP_RATIO * d, d),
                fc2_b: Array2::zeros((1, d)),
            })
            .collect();
        Self {
            patch_w,
            patch_b: Array2::zeros((1, d)),
            pos,
            cls,
            reg,
            blocks,
            norm_g: Array2::ones((1, d)),
            norm_b: Array2::zeros((1, d)),
        }
    }

    /// Every tensor with its qualified name, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out = vec![
            ("backbone.patch.w".to_string(), &self.patch_w),
            ("backbone.patch.b".to_string(), &self.patch_b),
            ("backbone.pos".to_string(), &self.pos),
            ("backbone.cls".to_string(), &self.cls),
            ("backbone.reg".to_string(), &self.reg),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (n, t) in b.fields() {
                out.push((format!("backbone.block{i}.{n}"), t));
            }
        }
        out.push(("backbone.norm.g".into(), &self.norm_g));
        out.push(("backbone.norm.b".into(), &self.norm_b));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Array2<f64>)> {
        let mut out = vec![
            ("backbone.patch.w".to_string(), &mut self.patch_w),
            ("backbone.patch.b".to_string(), &mut self.patch_b),
            ("backbone.pos".to_string(), &mut self.pos),
            ("backbone.cls".to_string(), &mut self.cls),
            ("backbone.reg".to_string(), &mut self.reg),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (n, t) in b.fields_mut() {
                out.push((format!("backbone.block{i}.{n}"), t));
            }
        }
        out.push(("backbone.norm.g".into(), &mut self.norm_g));
        out.push(("backbone.norm.b".into(), &mut self.norm_b));
        out
    }
}

impl BlockParams {
    fn fields(&self) -> [(&'static str, &Array2<f64>); 12] {
        [
            ("ln1.g", &self.ln1_g),
            ("ln1.b", &self.ln1_b),
            ("qkv.w", &self.qkv_w),
            ("qkv.b", &self.qkv_b),
            ("proj.w", &self.proj_w),
            ("proj.b", &self.proj_b),
            ("ln2.g", &self.ln2_g),
            ("ln2.b", &self.ln2_b),
            ("fc1.w", &self.fc1_w),
            ("fc1.b", &self.fc1_b),
            ("fc2.w", &self.fc2_w),
            ("fc2.b", &self.fc2_b),
        ]
    }

    fn fields_mut(&mut self) -> [(&'static str, &mut Array2<f64>); 12] {
        [
            ("ln1.g", &mut self.ln1_g),
            ("ln1.b", &mut self.ln1_b),
            ("qkv.w", &mut self.qkv_w),
            ("qkv.b", &mut self.qkv_b),
            ("proj.w", &mut self.proj_w),
            ("proj.b", &mut self.proj_b),
            ("ln2.g", &mut self.ln2_g),
            ("ln2.b", &mut self.ln2_b),
            ("fc1.w", &mut self.fc1_w),
            ("fc1.b", &mut self.fc1_b),
            ("fc2.w", &mut self.fc2_w),
            ("fc2.b", &mut self.fc2_b),
        ]
    }
}

/// Names of the token tensors that stay trainable in `tokens_only` mode.
pub const TOKEN_PARAMS: [&str; 3] = ["backbone.pos", "backbone.cls", "backbone.reg"];

/// Backbone tensors that receive updates under `cfg.train_mode`.
pub fn trainable_parameter_set(params: &BackboneParams, cfg: &BackboneConfig) -> Vec<String> {
    params
        .named()
        .into_iter()
        .map(|(n, _)| n)
        .filter(|n| match cfg.train_mode {
            TrainMode::Full => true,
            TrainMode::Frozen => false,
            TrainMode::TokensOnly => TOKEN_PARAMS.contains(&n.as_str()),
        })
        .collect()
}

/// Graph handles for the backbone, one per tensor in [`BackboneParams::named`] order.
#[derive(Debug, Clone)]
pub struct BackboneVars {
    pub vars: Vec<(String, Var)>,
}

impl BackboneVars {
    pub fn bind(g: &mut Graph, params: &BackboneParams, trainable: &[String]) -> Self {
        let vars = params
            .named()
            .into_iter()
            .map(|(n, t)| {
                let v = g.leaf(t.clone(), trainable.contains(&n));
                (n, v)
            })
            .collect();
        Self { vars }
    }

    fn get(&self, i: usize) -> Var {
        self.vars[i].1
    }
}

/// Records the backbone for `batch` images whose patches are stacked in
/// `patches` (`(B·HW)×3p²`), returning patch features `(B·HW)×D`.
pub fn build_backbone(
    g: &mut Graph,
    patches: Var,
    vars: &BackboneVars,
    cfg: &BackboneConfig,
    batch: usize,
) -> Var {
    let emb = g.linear(patches, vars.get(0), vars.get(1));
    let tokens = g.assemble_tokens(emb, vars.get(2), vars.get(3), vars.get(4), batch);
    let n = g.value(vars.get(2)).nrows();
    let prefix = 1 + cfg.register_tokens;
    let seq = prefix + n;
    let mut x = tokens;
    for bi in 0..cfg.depth {
        let p = |j: usize| vars.get(5 + bi * 12 + j);
        let h = g.layer_norm(x, p(0), p(1), LN_EPS);
        let qkv = g.linear(h, p(2), p(3));
        let att = g.attention(qkv, seq, cfg.heads);
        let proj = g.linear(att, p(4), p(5));
        x = g.add(x, proj);
        let h = g.layer_norm(x, p(6), p(7), LN_EPS);
        let f1 = g.linear(h, p(8), p(9));
        let act = g.gelu(f1);
        let f2 = g.linear(act, p(10), p(11));
        x = g.add(x, f2);
    }
    let last = 5 + cfg.depth * 12;
    let x = g.layer_norm(x, vars.get(last), vars.get(last + 1), LN_EPS);
    g.select_rows(x, seq, prefix, n)
}

/// Feature map of a single image.
pub fn embed(x: &ImageSample, params: &BackboneParams, cfg: &BackboneConfig) -> Result<FeatureMap> {
    cfg.validate()?;
    let (gh, gw) = cfg.grid(x.height(), x.width())?;
    if params.pos.nrows() != gh * gw {
        return Err(Error::dim(
            "position embeddings",
            gh * gw,
            params.pos.nrows(),
        ));
    }
    let mut g = Graph::new();
    let patches = g.leaf(patchify(&x.0, cfg.patch_size), false);
    let vars = BackboneVars::bind(&mut g, params, &[]);
    let feats = build_backbone(&mut g, patches, &vars, cfg, 1);
    Ok(FeatureMap::from_tokens(g.value(feats), gh, gw))
}

/// Reads every `feat/<sample_id>` array from a container file.
pub fn load_precomputed_features(
    path: &Path,
    expected_dim: Option<usize>,
) -> Result<Vec<(String, FeatureMap)>> {
    let entries = container::read_file(path)?;
    let mut out = Vec::new();
    for (name, tensor) in entries {
        let Some(id) = name.strip_prefix("feat/") else {
            continue;
        };
        let arr = tensor.to_f64_array();
        if arr.ndim() != 3 {
            return Err(Error::Input(format!(
                "feature '{name}' has rank {}, expected 3 (D×H×W)",
                arr.ndim()
            )));
        }
        let arr = arr
            .into_dimensionality::<ndarray::Ix3>()
            .expect("rank checked");
        if let Some(d) = expected_dim {
            if arr.shape()[0] != d {
                return Err(Error::dim(
                    format!("feature dimension of '{id}'"),
                    d,
                    arr.shape()[0],
                ));
            }
        }
        out.push((id.to_string(), FeatureMap::new(arr)?));
    }
    Ok(out)
}

/// Writes feature maps as `feat/<sample_id>` f64 arrays.
pub fn save_precomputed_features(path: &Path, feats: &[(String, FeatureMap)]) -> Result<()> {
    let entries: Vec<(String, Tensor)> = feats
        .iter()
        .map(|(id, f)| {
            (
                format!("feat/{id}"),
                Tensor::from_f64(f.0.clone().into_dyn()),
            )
        })
        .collect();
    container::write_file(path, &entries)
}
