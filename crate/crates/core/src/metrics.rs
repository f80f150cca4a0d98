//! Part-discovery evaluation: clustering agreement (NMI, ARI), keypoint
//! regression from part centroids, foreground IoU, accuracy, and attention
//! entropy.

use std::collections::HashMap;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::head::AttentionMaps;

/// Centroid of one part in normalized `(row, col)` grid units, where the
/// first cell has coordinate `1/H` (resp. `1/W`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Centroid {
    pub row: f64,
    pub col: f64,
}

/// Annotated keypoint, coordinates normalized to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub part_id: u32,
    pub x: f64,
    pub y: f64,
    pub visible: bool,
}

pub type Keypoints = Vec<Keypoint>;

/// Mass threshold below which a part is considered absent.
pub const CENTROID_MIN_MASS: f64 = 1e-6;

/// Attention-weighted centroid of every foreground channel.
pub fn centroids(a: &AttentionMaps) -> Vec<Option<Centroid>> {
    let (h, w) = (a.height(), a.width());
    (0..a.k())
        .map(|k| {
            let ch = a.0.index_axis(ndarray::Axis(0), k);
            let mass = ch.sum();
            if mass < CENTROID_MIN_MASS {
                return None;
            }
            let mut r = 0.0;
            let mut c = 0.0;
            for ((i, j), &v) in ch.indexed_iter() {
                r += v * (i + 1) as f64;
                c += v * (j + 1) as f64;
            }
            Some(Centroid {
                row: r / mass / h as f64,
                col: c / mass / w as f64,
            })
        })
        .collect()
}

/// Solves `(XᵀX + λI) β = Xᵀy` by Gaussian elimination with partial pivoting.
/// Returns `None` when the system is numerically singular.
fn solve(mut a: Array2<f64>, mut b: Array1<f64>) -> Option<Array1<f64>> {
    let n = b.len();
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[[i, col]].abs().total_cmp(&a[[j, col]].abs()))?;
        if a[[piv, col]].abs() < 1e-12 * scale {
            return None;
        }
        if piv != col {
            for k in 0..n {
                a.swap([piv, k], [col, k]);
            }
            b.swap(piv, col);
        }
        for r in col + 1..n {
            let f = a[[r, col]] / a[[col, col]];
            if f != 0.0 {
                for k in col..n {
                    a[[r, k]] -= f * a[[col, k]];
                }
                b[r] -= f * b[col];
            }
        }
    }
    let mut x = Array1::zeros(n);
    for r in (0..n).rev() {
        let mut acc = b[r];
        for k in r + 1..n {
            acc -= a[[r, k]] * x[k];
        }
        x[r] = acc / a[[r, r]];
    }
    Some(x)
}

/// Least squares with intercept; falls back to ridge with `λ = 1e-6` when
/// the design matrix is rank deficient.
fn fit_linear(rows: &[Vec<f64>], targets: &[f64]) -> Array1<f64> {
    let p = rows[0].len() + 1;
    let mut xtx = Array2::<f64>::zeros((p, p));
    let mut xty = Array1::<f64>::zeros(p);
    for (row, &t) in rows.iter().zip(targets) {
        let feat: Vec<f64> = std::iter::once(1.0).chain(row.iter().copied()).collect();
        for i in 0..p {
            xty[i] += feat[i] * t;
            for j in 0..p {
                xtx[[i, j]] += feat[i] * feat[j];
            }
        }
    }
    if let Some(beta) = solve(xtx.clone(), xty.clone()) {
        return beta;
    }
    for i in 0..p {
        xtx[[i, i]] += 1e-6;
    }
    solve(xtx, xty).expect("ridge system is positive definite")
}

fn predict(beta: &Array1<f64>, row: &[f64]) -> f64 {
    beta[0]
        + row
            .iter()
            .zip(beta.iter().skip(1))
            .map(|(a, b)| a * b)
            .sum::<f64>()
}

fn flatten(c: &[Option<Centroid>]) -> Option<Vec<f64>> {
    c.iter()
        .map(|c| c.map(|c| [c.row, c.col]))
        .collect::<Option<Vec<_>>>()
        .map(|v| v.into_iter().flatten().collect())
}

/// Keypoint regression error in percent of normalized image size.
///
/// One linear regressor (with intercept) per keypoint coordinate maps the
/// `2K` centroid coordinates to the keypoint; it is fit on training samples
/// where every centroid is present and the keypoint is visible, and scored as
/// the mean Euclidean distance over visible test keypoints. Test samples with
/// an absent centroid are skipped.
pub fn keypoint_regression_error(
    train: &[(Vec<Option<Centroid>>, Keypoints)],
    test: &[(Vec<Option<Centroid>>, Keypoints)],
) -> Result<f64> {
    let usable: Vec<(Vec<f64>, &Keypoints)> = train
        .iter()
        .filter_map(|(c, kp)| flatten(c).map(|f| (f, kp)))
        .collect();
    let k = train.first().map(|(c, _)| c.len()).unwrap_or(0);
    if usable.len() < 2 * k + 1 {
        return Err(Error::Input(format!(
            "keypoint regression needs at least {} training samples with all centroids, got {}",
            2 * k + 1,
            usable.len()
        )));
    }
    let mut part_ids: Vec<u32> = usable
        .iter()
        .flat_map(|(_, kp)| kp.iter().map(|p| p.part_id))
        .collect();
    part_ids.sort_unstable();
    part_ids.dedup();

    let mut models = HashMap::new();
    for &pid in &part_ids {
        let mut rows = Vec::new();
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for (f, kp) in &usable {
            if let Some(p) = kp.iter().find(|p| p.part_id == pid && p.visible) {
                rows.push(f.clone());
                xs.push(p.x);
                ys.push(p.y);
            }
        }
        if rows.is_empty() {
            continue;
        }
        models.insert(pid, (fit_linear(&rows, &xs), fit_linear(&rows, &ys)));
    }

    let mut total = 0.0;
    let mut count = 0usize;
    for (c, kp) in test {
        let Some(f) = flatten(c) else { continue };
        for p in kp.iter().filter(|p| p.visible) {
            let Some((bx, by)) = models.get(&p.part_id) else {
                continue;
            };
            let dx = predict(bx, &f) - p.x;
            let dy = predict(by, &f) - p.y;
            total += (dx * dx + dy * dy).sqrt();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Input("no visible test keypoints to score".into()));
    }
    Ok(100.0 * total / count as f64)
}

/// Dense contingency table between two labelings.
pub struct Contingency {
    pub table: Vec<Vec<u64>>,
    pub n: u64,
}

impl Contingency {
    pub fn new(a: &[u32], b: &[u32]) -> Result<Self> {
        if a.len() != b.len() {
            return Err(Error::Input(format!(
                "labelings have different lengths ({} vs {})",
                a.len(),
                b.len()
            )));
        }
        let index = |xs: &[u32]| {
            let mut map = HashMap::new();
            let ids: Vec<usize> = xs
                .iter()
                .map(|x| {
                    let next = map.len();
                    *map.entry(*x).or_insert(next)
                })
                .collect();
            (ids, map.len())
        };
        let (ia, na) = index(a);
        let (ib, nb) = index(b);
        let mut table = vec![vec![0u64; nb]; na];
        for (&i, &j) in ia.iter().zip(&ib) {
            table[i][j] += 1;
        }
        Ok(Self {
            table,
            n: a.len() as u64,
        })
    }

    fn row_sums(&self) -> Vec<u64> {
        self.table.iter().map(|r| r.iter().sum()).collect()
    }

    fn col_sums(&self) -> Vec<u64> {
        let cols = self.table.first().map_or(0, |r| r.len());
        (0..cols)
            .map(|j| self.table.iter().map(|r| r[j]).sum())
            .collect()
    }
}

fn entropy_of(counts: &[u64], n: f64) -> f64 {
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Normalized mutual information with geometric-mean normalization.
///
/// Two single-block labelings score 1; a single-block labeling against one
/// with several blocks scores 0.
pub fn nmi(a: &[u32], b: &[u32]) -> Result<f64> {
    let c = Contingency::new(a, b)?;
    if c.n == 0 {
        return Err(Error::Input("labelings are empty".into()));
    }
    let n = c.n as f64;
    let ra = c.row_sums();
    let cb = c.col_sums();
    let ha = entropy_of(&ra, n);
    let hb = entropy_of(&cb, n);
    if ra.len() == 1 && cb.len() == 1 {
        return Ok(1.0);
    }
    if ha == 0.0 || hb == 0.0 {
        return Ok(0.0);
    }
    let mut mi = 0.0;
    for (i, row) in c.table.iter().enumerate() {
        for (j, &nij) in row.iter().enumerate() {
            if nij == 0 {
                continue;
            }
            let nij = nij as f64;
            mi += nij / n * (n * nij / (ra[i] as f64 * cb[j] as f64)).ln();
        }
    }
    Ok((mi / (ha * hb).sqrt()).clamp(0.0, 1.0))
}

fn comb2(x: u64) -> f64 {
    let x = x as f64;
    x * (x - 1.0) / 2.0
}

/// Adjusted Rand index. Returns 1 when the chance-corrected denominator is 0.
pub fn ari(a: &[u32], b: &[u32]) -> Result<f64> {
    let c = Contingency::new(a, b)?;
    if c.n < 2 {
        return Err(Error::Input("ARI needs at least two items".into()));
    }
    let index: f64 = c.table.iter().flatten().map(|&v| comb2(v)).sum();
    let sa: f64 = c.row_sums().into_iter().map(comb2).sum();
    let sb: f64 = c.col_sums().into_iter().map(comb2).sum();
    // scaled by the pair count so integer inputs stay exact
    let pairs = comb2(c.n);
    let num = index * pairs - sa * sb;
    let den = (sa + sb) / 2.0 * pairs - sa * sb;
    if den == 0.0 {
        return Ok(1.0);
    }
    Ok(num / den)
}

/// Nearest-neighbor upsampling of a label grid to `m×n`.
pub fn upsample_nearest(labels: &Array2<u32>, m: usize, n: usize) -> Array2<u32> {
    let (h, w) = labels.dim();
    Array2::from_shape_fn((m, n), |(y, x)| labels[[y * h / m, x * w / n]])
}

/// Predicted and ground-truth part labels over ground-truth foreground
/// pixels, or `None` when the image has no foreground.
pub fn part_clustering_labels(
    assignment: &Array2<u32>,
    gt_mask: &Array2<u32>,
) -> Option<(Vec<u32>, Vec<u32>)> {
    let (m, n) = gt_mask.dim();
    let up = upsample_nearest(assignment, m, n);
    let mut pred = Vec::new();
    let mut gt = Vec::new();
    for (&p, &g) in up.iter().zip(gt_mask.iter()) {
        if g > 0 {
            pred.push(p);
            gt.push(g);
        }
    }
    (!gt.is_empty()).then_some((pred, gt))
}

/// IoU between predicted foreground (label > 0) and the mask; 1 when both
/// are empty.
pub fn foreground_iou(assignment: &Array2<u32>, fg_mask: &Array2<bool>) -> f64 {
    let (m, n) = fg_mask.dim();
    let up = upsample_nearest(assignment, m, n);
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&p, &g) in up.iter().zip(fg_mask.iter()) {
        let p = p > 0;
        inter += (p && g) as usize;
        union += (p || g) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

pub fn top1_accuracy(predicted: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predicted.iter().zip(labels).filter(|(a, b)| a == b).count();
    hits as f64 / labels.len() as f64
}

/// Mean over images and locations of `−Σ_k a ln a`.
pub fn attention_entropy_report<'a>(maps: impl IntoIterator<Item = &'a AttentionMaps>) -> f64 {
    let mut total = 0.0;
    let mut count = 0usize;
    for a in maps {
        let (_, h, w) = a.0.dim();
        for i in 0..h {
            for j in 0..w {
                total +=
                    a.0.slice(ndarray::s![.., i, j])
                        .iter()
                        .filter(|&&v| v > 0.0)
                        .map(|&v| -v * v.ln())
                        .sum::<f64>();
            }
        }
        count += h * w;
    }
    if count == 0 {
        0.0
    } else {
        total / count as f64
    }
}
