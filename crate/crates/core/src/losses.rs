//! Training objectives for part discovery.
//!
//! Each loss comes with its exact gradient with respect to its tensor inputs.
//! Batch-level reductions (mean over images, max over the batch) are done by
//! the callers in [`crate::trainer`], which feed the gradients back into the
//! graph.

use std::fmt;

use ndarray::{s, Array1, Array2, Array3, ArrayView2, ArrayView3, Axis};

use crate::error::{Error, Result};
use crate::head::{AttentionMaps, ClassScores};
use crate::warp::{AffineTransform, WarpPlan};

/// Guard inside `log` for the background presence term.
pub const LOG_EPS: f64 = 1e-8;
/// Guard added to squared norms before normalizing vectors.
pub const NORM_EPS: f64 = 1e-12;
/// Presence pooling kernel side.
pub const PRESENCE_KERNEL: usize = 3;

/// The seven weighted terms of the training objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Term {
    Cls,
    Orth,
    Equiv,
    PresenceFg,
    PresenceBg,
    Entropy,
    Tv,
}

impl Term {
    pub const ALL: [Term; 7] = [
        Term::Cls,
        Term::Orth,
        Term::Equiv,
        Term::PresenceFg,
        Term::PresenceBg,
        Term::Entropy,
        Term::Tv,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Term::Cls => "cls",
            Term::Orth => "orth",
            Term::Equiv => "equiv",
            Term::PresenceFg => "presence_fg",
            Term::PresenceBg => "presence_bg",
            Term::Entropy => "entropy",
            Term::Tv => "tv",
        }
    }

    pub fn from_name(name: &str) -> Option<Term> {
        Term::ALL.into_iter().find(|t| t.name() == name)
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub cls: f64,
    pub orth: f64,
    pub equiv: f64,
    pub presence_fg: f64,
    pub presence_bg: f64,
    pub entropy: f64,
    pub tv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cls: 1.0,
            orth: 1.0,
            equiv: 1.0,
            presence_fg: 1.0,
            presence_bg: 2.0,
            entropy: 1.0,
            tv: 1.0,
        }
    }
}

impl LossWeights {
    pub fn get(&self, t: Term) -> f64 {
        match t {
            Term::Cls => self.cls,
            Term::Orth => self.orth,
            Term::Equiv => self.equiv,
            Term::PresenceFg => self.presence_fg,
            Term::PresenceBg => self.presence_bg,
            Term::Entropy => self.entropy,
            Term::Tv => self.tv,
        }
    }

    pub fn set(&mut self, t: Term, w: f64) {
        *match t {
            Term::Cls => &mut self.cls,
            Term::Orth => &mut self.orth,
            Term::Equiv => &mut self.equiv,
            Term::PresenceFg => &mut self.presence_fg,
            Term::PresenceBg => &mut self.presence_bg,
            Term::Entropy => &mut self.entropy,
            Term::Tv => &mut self.tv,
        } = w;
    }

    pub fn validate(&self) -> Result<()> {
        for t in Term::ALL {
            let w = self.get(t);
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::Config(format!(
                    "loss weight for {t} must be a non-negative number"
                )));
            }
        }
        Ok(())
    }

    /// Terms with a non-zero weight, in canonical order.
    pub fn active(&self) -> Vec<Term> {
        Term::ALL
            .into_iter()
            .filter(|&t| self.get(t) != 0.0)
            .collect()
    }
}

/// Per-term loss values; disabled terms are absent.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LossTerms {
    pub values: Vec<(Term, f64)>,
}

impl LossTerms {
    pub fn get(&self, t: Term) -> Option<f64> {
        self.values.iter().find(|(k, _)| *k == t).map(|&(_, v)| v)
    }

    pub fn insert(&mut self, t: Term, v: f64) {
        match self.values.iter_mut().find(|(k, _)| *k == t) {
            Some(slot) => slot.1 = v,
            None => self.values.push((t, v)),
        }
    }
}

/// Weighted sum of the supplied terms. Terms whose weight is zero are skipped
/// entirely, so they contribute neither value nor gradient.
pub fn total_loss(terms: &LossTerms, w: &LossWeights) -> Result<f64> {
    let mut total = 0.0;
    for &(t, v) in &terms.values {
        let wt = w.get(t);
        if wt == 0.0 {
            continue;
        }
        if !v.is_finite() {
            return Err(Error::Numeric {
                term: t.name().into(),
                detail: format!("loss value {v}"),
            });
        }
        total += wt * v;
    }
    Ok(total)
}

/// Cross-entropy of the mean class scores; returns the loss and its gradient
/// with respect to the scores. `label` is zero-based.
pub fn classification_loss_grad(scores: &Array1<f64>, label: usize) -> Result<(f64, Array1<f64>)> {
    if label >= scores.len() {
        return Err(Error::Input(format!(
            "label {label} out of range for {} classes",
            scores.len()
        )));
    }
    let max = scores.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let exp = scores.mapv(|v| (v - max).exp());
    let sum = exp.sum();
    let loss = sum.ln() + max - scores[label];
    let mut grad = exp / sum;
    grad[label] -= 1.0;
    Ok((loss.max(0.0), grad))
}

pub fn classification_loss(scores: &ClassScores, label: usize) -> Result<f64> {
    classification_loss_grad(&scores.mean, label).map(|(l, _)| l)
}

/// Rows scaled to unit length with a guarded norm `sqrt(‖v‖² + ε)`.
fn normalize_rows(v: ArrayView2<f64>) -> (Array2<f64>, Vec<f64>) {
    let mut out = v.to_owned();
    let mut norms = Vec::with_capacity(v.nrows());
    for mut row in out.rows_mut() {
        let r = (row.dot(&row) + NORM_EPS).sqrt();
        row /= r;
        norms.push(r);
    }
    (out, norms)
}

/// Pulls a gradient w.r.t. normalized rows back to the raw rows.
fn normalize_rows_backward(unit: &Array2<f64>, norms: &[f64], g: &Array2<f64>) -> Array2<f64> {
    let mut out = g.clone();
    for ((mut o, u), &r) in out.rows_mut().into_iter().zip(unit.rows()).zip(norms) {
        // Jacobian of v/r is (I − u uᵀ)/r, with or without the ε in r
        let dot = o.dot(&u);
        o.scaled_add(-dot, &u);
        o /= r;
    }
    out
}

/// Sum over ordered pairs `k ≠ l` of the cosine similarity between rows.
pub fn orthogonality_loss_grad(v: ArrayView2<f64>) -> (f64, Array2<f64>) {
    let (unit, norms) = normalize_rows(v);
    let total = unit.sum_axis(Axis(0));
    let self_sq: f64 = unit.rows().into_iter().map(|r| r.dot(&r)).sum();
    let loss = total.dot(&total) - self_sq;
    // dL/du_k = 2 (S − u_k)
    let mut g = Array2::zeros(unit.dim());
    for (mut row, u) in g.rows_mut().into_iter().zip(unit.rows()) {
        row.assign(&((&total - &u) * 2.0));
    }
    (loss, normalize_rows_backward(&unit, &norms, &g))
}

pub fn orthogonality_loss(v: ArrayView2<f64>) -> f64 {
    orthogonality_loss_grad(v).0
}

/// Gradients of the equivariance loss.
#[derive(Debug, Clone)]
pub struct EquivarianceGrad {
    pub original: Array3<f64>,
    pub transformed: Array3<f64>,
}

/// One minus the mean cosine similarity, over foreground channels, between
/// the original maps and the inverse-warped maps of the transformed input.
pub fn equivariance_loss_grad(
    original: ArrayView3<f64>,
    transformed: ArrayView3<f64>,
    t: &AffineTransform,
) -> Result<(f64, EquivarianceGrad)> {
    if original.dim() != transformed.dim() {
        return Err(Error::Input(format!(
            "attention shapes differ: {:?} vs {:?}",
            original.dim(),
            transformed.dim()
        )));
    }
    let (c, h, w) = original.dim();
    let k = c - 1;
    let plan = WarpPlan::new(t, h, w, true);
    let back = plan.apply(transformed.slice(s![..k, .., ..]));
    let x = original
        .slice(s![..k, .., ..])
        .to_shape((k, h * w))
        .unwrap()
        .to_owned();
    let y = back.to_shape((k, h * w)).unwrap().to_owned();
    let (xu, xn) = normalize_rows(x.view());
    let (yu, yn) = normalize_rows(y.view());
    let mut cos_sum = 0.0;
    for (a, b) in xu.rows().into_iter().zip(yu.rows()) {
        cos_sum += a.dot(&b);
    }
    let loss = 1.0 - cos_sum / k as f64;
    let gx = normalize_rows_backward(&xu, &xn, &(&yu * (-1.0 / k as f64)));
    let gy = normalize_rows_backward(&yu, &yn, &(&xu * (-1.0 / k as f64)));
    let mut g_orig = Array3::zeros((c, h, w));
    g_orig
        .slice_mut(s![..k, .., ..])
        .assign(&gx.into_shape_with_order((k, h, w)).unwrap());
    let gy = gy.into_shape_with_order((k, h, w)).unwrap();
    let mut g_t = Array3::zeros((c, h, w));
    g_t.slice_mut(s![..k, .., ..])
        .assign(&plan.adjoint(gy.view()));
    Ok((
        loss,
        EquivarianceGrad {
            original: g_orig,
            transformed: g_t,
        },
    ))
}

pub fn equivariance_loss(
    a_orig: &AttentionMaps,
    a_transformed: &AttentionMaps,
    t: &AffineTransform,
) -> Result<f64> {
    equivariance_loss_grad(a_orig.0.view(), a_transformed.0.view(), t).map(|(l, _)| l)
}

/// Window `[lo, hi)` of the pooling kernel around `i` on an axis of size `n`.
fn window(i: usize, n: usize) -> (usize, usize) {
    let r = PRESENCE_KERNEL / 2;
    (i.saturating_sub(r), (i + r + 1).min(n))
}

/// 3×3 mean filter, stride 1, same-size output; each output divides by the
/// number of taps that fall inside the map. Maps smaller than the kernel in
/// either direction are replaced by their global mean.
pub fn pool_presence(map: ArrayView2<f64>) -> Array2<f64> {
    let (h, w) = map.dim();
    if h < PRESENCE_KERNEL || w < PRESENCE_KERNEL {
        let mean = map.sum() / (h * w) as f64;
        return Array2::from_elem((h, w), mean);
    }
    Array2::from_shape_fn((h, w), |(i, j)| {
        let (i0, i1) = window(i, h);
        let (j0, j1) = window(j, w);
        let win = map.slice(s![i0..i1, j0..j1]);
        win.sum() / win.len() as f64
    })
}

/// Transpose of [`pool_presence`].
pub fn pool_presence_adjoint(g: ArrayView2<f64>) -> Array2<f64> {
    let (h, w) = g.dim();
    if h < PRESENCE_KERNEL || w < PRESENCE_KERNEL {
        let share = g.sum() / (h * w) as f64;
        return Array2::from_elem((h, w), share);
    }
    let mut out = Array2::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let (i0, i1) = window(i, h);
            let (j0, j1) = window(j, w);
            let n = ((i1 - i0) * (j1 - j0)) as f64;
            out.slice_mut(s![i0..i1, j0..j1])
                .mapv_inplace(|v| v + g[[i, j]] / n);
        }
    }
    out
}

/// `1 − (1/K) Σ_k max_{b,i,j} pooled[b,k,i,j]` over a `B×K×H×W` batch of
/// pooled foreground maps. The gradient goes to the first maximizer.
pub fn presence_loss_fg_grad(pooled: &[Array3<f64>]) -> (f64, Vec<Array3<f64>>) {
    let k = pooled[0].shape()[0];
    let mut grads: Vec<Array3<f64>> = pooled.iter().map(|p| Array3::zeros(p.dim())).collect();
    let mut sum = 0.0;
    for ch in 0..k {
        let mut best = (f64::NEG_INFINITY, 0, (0, 0));
        for (b, p) in pooled.iter().enumerate() {
            for ((i, j), &v) in p.index_axis(Axis(0), ch).indexed_iter() {
                if v > best.0 {
                    best = (v, b, (i, j));
                }
            }
        }
        sum += best.0;
        let (_, b, (i, j)) = best;
        grads[b][[ch, i, j]] = -1.0 / k as f64;
    }
    (1.0 - sum / k as f64, grads)
}

pub fn presence_loss_fg(pooled: &[Array3<f64>]) -> f64 {
    presence_loss_fg_grad(pooled).0
}

/// `m_ij = 2((i)/(H−1) − ½)² + 2((j)/(W−1) − ½)²` with zero-based `i, j`.
pub fn center_mask(h: usize, w: usize) -> Array2<f64> {
    Array2::from_shape_fn((h, w), |(i, j)| {
        let a = i as f64 / (h as f64 - 1.0) - 0.5;
        let b = j as f64 / (w as f64 - 1.0) - 0.5;
        2.0 * a * a + 2.0 * b * b
    })
}

/// `−(1/B) Σ_b log(max_ij m_ij · pooled_bg[b,i,j] + ε)` with its gradient
/// w.r.t. each pooled background map.
pub fn presence_loss_bg_grad(
    pooled_bg: &[Array2<f64>],
    mask: &Array2<f64>,
) -> Result<(f64, Vec<Array2<f64>>)> {
    let b = pooled_bg.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(pooled_bg.len());
    for p in pooled_bg {
        if p.dim() != mask.dim() {
            return Err(Error::Input(format!(
                "background map {:?} does not match mask {:?}",
                p.dim(),
                mask.dim()
            )));
        }
        let mut best = (f64::NEG_INFINITY, (0, 0));
        for ((idx, &v), &m) in p.indexed_iter().zip(mask.iter()) {
            let prod = v * m;
            if prod > best.0 {
                best = (prod, idx);
            }
        }
        let denom = best.0 + LOG_EPS;
        loss -= denom.ln() / b;
        let mut g = Array2::zeros(p.dim());
        g[best.1] = -mask[best.1] / denom / b;
        grads.push(g);
    }
    Ok((loss, grads))
}

pub fn presence_loss_bg(pooled_bg: &[Array2<f64>], mask: &Array2<f64>) -> Result<f64> {
    presence_loss_bg_grad(pooled_bg, mask).map(|(l, _)| l)
}

/// `−1/(K+1) Σ_k Σ_ij a ln a` with `0 ln 0 = 0`.
pub fn entropy_loss_grad(a: ArrayView3<f64>) -> (f64, Array3<f64>) {
    let c = a.shape()[0] as f64;
    let mut loss = 0.0;
    let grad = a.mapv(|v| {
        if v > 0.0 {
            loss -= v * v.ln() / c;
        }
        -(v.max(1e-300).ln() + 1.0) / c
    });
    (loss, grad)
}

pub fn entropy_loss(a: &AttentionMaps) -> f64 {
    entropy_loss_grad(a.0.view()).0
}

/// Anisotropic total variation with forward differences, normalized by `HW`.
/// Differences past the last row or column are zero.
pub fn total_variation_loss_grad(a: ArrayView3<f64>) -> (f64, Array3<f64>) {
    let (c, h, w) = a.dim();
    let norm = 1.0 / (h * w) as f64;
    let mut loss = 0.0;
    let mut grad = Array3::zeros((c, h, w));
    for k in 0..c {
        for i in 0..h {
            for j in 0..w {
                let v = a[[k, i, j]];
                if i + 1 < h {
                    let d = a[[k, i + 1, j]] - v;
                    loss += d.abs();
                    let sg = d.signum() * (d != 0.0) as u8 as f64 * norm;
                    grad[[k, i + 1, j]] += sg;
                    grad[[k, i, j]] -= sg;
                }
                if j + 1 < w {
                    let d = a[[k, i, j + 1]] - v;
                    loss += d.abs();
                    let sg = d.signum() * (d != 0.0) as u8 as f64 * norm;
                    grad[[k, i, j + 1]] += sg;
                    grad[[k, i, j]] -= sg;
                }
            }
        }
    }
    (loss * norm, grad)
}

pub fn total_variation_loss(a: &AttentionMaps) -> f64 {
    total_variation_loss_grad(a.0.view()).0
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn classification_examples() {
        let (l, _) = classification_loss_grad(&Array1::zeros(4), 2).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        let (l, _) = classification_loss_grad(&array![2.0, 0.0, 0.0], 0).unwrap();
        assert!((l - ((2f64.exp() + 2.0).ln() - 2.0)).abs() < 1e-12);
        assert!((l - 0.2395).abs() < 5e-5);
        let (l, _) = classification_loss_grad(&array![800.0, 0.0, 0.0], 0).unwrap();
        assert!(l < 1e-12);
        assert!(matches!(
            classification_loss_grad(&array![0.0, 0.0], 2),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn orthogonality_examples() {
        assert!(orthogonality_loss(array![[1.0, 0.0], [0.0, 3.0]].view()).abs() < 1e-12);
        assert!((orthogonality_loss(array![[1.0, 2.0], [1.0, 2.0]].view()) - 2.0).abs() < 1e-12);
        let l = orthogonality_loss(array![[1.0, 0.0], [1.0, 1.0], [0.0, 1.0]].view());
        assert!((l - 2.0 * 2f64.sqrt()).abs() < 1e-10);
        // zero rows stay finite
        let (l, g) = orthogonality_loss_grad(array![[0.0, 0.0], [1.0, 0.0]].view());
        assert!(l.is_finite() && g.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn equivariance_examples() {
        let mut a = Array3::zeros((2, 3, 3));
        a[[0, 0, 0]] = 0.6;
        a[[0, 1, 1]] = 0.8;
        a[[1, 2, 2]] = 1.0;
        let id = AffineTransform::IDENTITY;
        let (l, _) = equivariance_loss_grad(a.view(), a.view(), &id).unwrap();
        assert!(l.abs() < 1e-9);

        // cosine 0.8 between (0.6, 0.8) and (0, 1): loss 0.2
        let mut b = Array3::zeros((2, 3, 3));
        b[[0, 1, 1]] = 1.0;
        let (l, _) = equivariance_loss_grad(a.view(), b.view(), &id).unwrap();
        assert!((l - 0.2).abs() < 1e-9);

        let mut c = Array3::zeros((2, 3, 3));
        c[[0, 2, 0]] = 1.0;
        let (l, _) = equivariance_loss_grad(a.view(), c.view(), &id).unwrap();
        assert!((l - 1.0).abs() < 1e-9);
    }

    #[test]
    fn presence_pooling_examples() {
        let p = pool_presence(Array2::from_elem((4, 5), 0.3).view());
        assert!(p.iter().all(|&v| (v - 0.3).abs() < 1e-15));
        let mut m = Array2::zeros((3, 3));
        m[[1, 1]] = 1.0;
        assert!((pool_presence(m.view())[[1, 1]] - 1.0 / 9.0).abs() < 1e-15);
        let mut m = Array2::zeros((3, 3));
        m[[0, 0]] = 1.0;
        assert!((pool_presence(m.view())[[0, 0]] - 0.25).abs() < 1e-15);
        let small = array![[1.0, 0.0], [0.0, 0.0]];
        assert!(pool_presence(small.view()).iter().all(|&v| v == 0.25));
    }

    #[test]
    fn presence_fg_examples() {
        let mut a = Array3::zeros((2, 2, 2));
        a[[0, 0, 1]] = 1.0;
        let mut b = Array3::zeros((2, 2, 2));
        b[[1, 1, 0]] = 1.0;
        assert_eq!(presence_loss_fg(&[a.clone(), b]), 0.0);
        assert_eq!(presence_loss_fg(&[a]), 0.5);
        let mut c = Array3::zeros((1, 2, 2));
        c[[0, 1, 1]] = 0.75;
        assert!((presence_loss_fg(&[c]) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn center_mask_examples() {
        let m = center_mask(3, 3);
        assert_eq!(m[[0, 0]], 1.0);
        assert_eq!(m[[2, 2]], 1.0);
        assert_eq!(m[[0, 2]], 1.0);
        assert_eq!(m[[1, 1]], 0.0);
        assert_eq!(m[[0, 1]], 0.5);
        let m = center_mask(5, 7);
        assert!(m.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(m[[2, 3]], 0.0);
    }

    #[test]
    fn presence_bg_examples() {
        let mask = center_mask(3, 3);
        let mut p = Array2::zeros((3, 3));
        p[[0, 0]] = 1.0;
        let l = presence_loss_bg(&[p], &mask).unwrap();
        assert!(l.abs() < 1e-7);
        let l = presence_loss_bg(&[Array2::zeros((3, 3))], &mask).unwrap();
        assert!((l + LOG_EPS.ln()).abs() < 1e-12);
        let mut p = Array2::zeros((3, 3));
        p[[0, 1]] = 1.0; // mask 0.5
        let l = presence_loss_bg(&[p], &mask).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-7);
    }

    #[test]
    fn entropy_examples() {
        let mut a = Array3::zeros((3, 2, 2));
        a.slice_mut(s![1, .., ..]).fill(1.0);
        assert_eq!(entropy_loss_grad(a.view()).0, 0.0);
        let u = Array3::from_elem((4, 2, 2), 0.25);
        assert!((entropy_loss_grad(u.view()).0 - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn tv_examples() {
        let a = array![[[1.0, 0.0], [0.0, 0.0]]];
        assert_eq!(total_variation_loss_grad(a.view()).0, 0.5);
        let b = array![[[1.0, 0.0], [0.0, 0.0]], [[0.0, 1.0], [1.0, 1.0]]];
        assert_eq!(total_variation_loss_grad(b.view()).0, 1.0);
        let c = Array3::from_elem((3, 4, 4), 0.2);
        assert_eq!(total_variation_loss_grad(c.view()).0, 0.0);
    }

    #[test]
    fn total_loss_examples() {
        let mut terms = LossTerms::default();
        for t in Term::ALL {
            terms.insert(t, 1.0);
        }
        assert_eq!(total_loss(&terms, &LossWeights::default()).unwrap(), 8.0);
        let zero = LossWeights {
            cls: 0.0,
            orth: 0.0,
            equiv: 0.0,
            presence_fg: 0.0,
            presence_bg: 0.0,
            entropy: 0.0,
            tv: 0.0,
        };
        assert_eq!(total_loss(&terms, &zero).unwrap(), 0.0);
        let mut only_cls = zero;
        only_cls.cls = 1.0;
        terms.insert(Term::Cls, 0.7);
        assert_eq!(total_loss(&terms, &only_cls).unwrap(), 0.7);

        terms.insert(Term::Tv, f64::NAN);
        match total_loss(&terms, &LossWeights::default()) {
            Err(Error::Numeric { term, .. }) => assert_eq!(term, "tv"),
            other => panic!("expected numeric error, got {other:?}"),
        }
        assert!(total_loss(&terms, &only_cls).is_ok());
    }

    #[test]
    fn term_names_round_trip() {
        for t in Term::ALL {
            assert_eq!(Term::from_name(t.name()), Some(t));
        }
        assert_eq!(LossWeights::default().active().len(), 7);
    }
}
