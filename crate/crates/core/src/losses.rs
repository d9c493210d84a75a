//! Training objectives: similarity (NCC), soft Dice, Jacobian folding penalty
//! and increment smoothness, plus the symmetric weighted total.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volgrid::{voxel_count, Shape};
use crate::warp::{
    integrate_backward, integrate_spatial_gradients, jacobian_backward, jacobian_determinant_map,
    raw_activation_backward, warp_backward, warp_channels, DeformationGrid, GradientField,
};

/// Guard added to correlation and Dice denominators.
pub const EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Smoothness weight.
    pub alpha: f64,
    /// Jacobian weight; 0 drops the term entirely.
    pub beta: f64,
    /// Odd local window side, or 0 for global correlation.
    pub ncc_window: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 1.0,
            ncc_window: 0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return Err(Error::InvalidInput("loss weights must be non-negative".into()));
        }
        if self.ncc_window != 0 && self.ncc_window.is_multiple_of(2) {
            return Err(Error::InvalidInput("ncc_window must be odd or 0".into()));
        }
        Ok(())
    }
}

fn same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::shape(a.len(), b.len()));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// NCC
// ---------------------------------------------------------------------------

struct GlobalStats {
    ca: Vec<f64>,
    cb: Vec<f64>,
    sab: f64,
    saa: f64,
    sbb: f64,
}

fn global_stats(a: &[f64], b: &[f64]) -> GlobalStats {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let ca: Vec<f64> = a.iter().map(|v| v - ma).collect();
    let cb: Vec<f64> = b.iter().map(|v| v - mb).collect();
    let sab = ca.iter().zip(&cb).map(|(x, y)| x * y).sum();
    let saa = ca.iter().map(|x| x * x).sum();
    let sbb = cb.iter().map(|x| x * x).sum();
    GlobalStats { ca, cb, sab, saa, sbb }
}

/// Sum over the cropped cubic window of radius `r` around every voxel.
fn box_sum(field: &[f64], shape: Shape, r: usize) -> Vec<f64> {
    let mut cur = field.to_vec();
    let strides = [shape[1] * shape[2], shape[2], 1];
    for axis in 0..3 {
        let len = shape[axis];
        let stride = strides[axis];
        let mut out = vec![0.0; cur.len()];
        let mut prefix = vec![0.0; len + 1];
        for start in 0..cur.len() {
            if !(start / stride).is_multiple_of(len) {
                continue;
            }
            for t in 0..len {
                prefix[t + 1] = prefix[t] + cur[start + t * stride];
            }
            for t in 0..len {
                let lo = t.saturating_sub(r);
                let hi = (t + r + 1).min(len);
                out[start + t * stride] = prefix[hi] - prefix[lo];
            }
        }
        cur = out;
    }
    cur
}

fn window_counts(shape: Shape, r: usize) -> Vec<f64> {
    box_sum(&vec![1.0; voxel_count(shape)], shape, r)
}

struct LocalStats {
    sa: Vec<f64>,
    sb: Vec<f64>,
    cnt: Vec<f64>,
    cross: Vec<f64>,
    va: Vec<f64>,
    vb: Vec<f64>,
}

fn local_stats(a: &[f64], b: &[f64], shape: Shape, window: usize) -> LocalStats {
    let r = window / 2;
    let sq = |x: &[f64], y: &[f64]| -> Vec<f64> { x.iter().zip(y).map(|(p, q)| p * q).collect() };
    let sa = box_sum(a, shape, r);
    let sb = box_sum(b, shape, r);
    let saa = box_sum(&sq(a, a), shape, r);
    let sbb = box_sum(&sq(b, b), shape, r);
    let sab = box_sum(&sq(a, b), shape, r);
    let cnt = window_counts(shape, r);
    let n = cnt.len();
    let mut cross = vec![0.0; n];
    let mut va = vec![0.0; n];
    let mut vb = vec![0.0; n];
    for i in 0..n {
        cross[i] = sab[i] - sa[i] * sb[i] / cnt[i];
        va[i] = (saa[i] - sa[i] * sa[i] / cnt[i]).max(0.0);
        vb[i] = (sbb[i] - sb[i] * sb[i] / cnt[i]).max(0.0);
        // cancellation residue in a constant window
        if va[i] <= 1e-12 * saa[i] || vb[i] <= 1e-12 * sbb[i] {
            cross[i] = 0.0;
        }
    }
    LocalStats {
        sa,
        sb,
        cnt,
        cross,
        va,
        vb,
    }
}

/// Zero-normalized cross-correlation; `window = 0` is global, otherwise the
/// mean of local correlations over odd cubic windows. Constant signals (or
/// windows) correlate as 0.
pub fn ncc(a: &[f64], b: &[f64], shape: Shape, window: usize) -> Result<f64> {
    same_len(a, b)?;
    if a.len() != voxel_count(shape) {
        return Err(Error::shape(voxel_count(shape), a.len()));
    }
    if window == 0 {
        let s = global_stats(a, b);
        return Ok(s.sab / (s.saa * s.sbb + EPS).sqrt());
    }
    if window.is_multiple_of(2) {
        return Err(Error::InvalidInput("ncc window must be odd".into()));
    }
    let s = local_stats(a, b, shape, window);
    let n = s.cnt.len() as f64;
    Ok((0..s.cnt.len())
        .map(|i| s.cross[i] / (s.va[i] * s.vb[i] + EPS).sqrt())
        .sum::<f64>()
        / n)
}

/// `1 - NCC`, in `[0, 2]`.
pub fn ncc_loss(a: &[f64], b: &[f64], shape: Shape, window: usize) -> Result<f64> {
    Ok(1.0 - ncc(a, b, shape, window)?)
}

/// Loss value with gradients with respect to `a` and `b`.
pub fn ncc_loss_grad(a: &[f64], b: &[f64], shape: Shape, window: usize) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let loss = ncc_loss(a, b, shape, window)?;
    if window == 0 {
        let s = global_stats(a, b);
        let d = s.saa * s.sbb + EPS;
        let inv = 1.0 / d.sqrt();
        let k = s.sab / (d * d.sqrt());
        let ga =
            s.ca.iter()
                .zip(&s.cb)
                .map(|(x, y)| -(y * inv - k * s.sbb * x))
                .collect();
        let gb =
            s.ca.iter()
                .zip(&s.cb)
                .map(|(x, y)| -(x * inv - k * s.saa * y))
                .collect();
        return Ok((loss, ga, gb));
    }
    let r = window / 2;
    let s = local_stats(a, b, shape, window);
    let n = s.cnt.len();
    let scale = -1.0 / n as f64;
    // d cc(v) / d b_p = A(v) (a_p - mean_a(v)) + B(v) (b_p - mean_b(v)), and
    // symmetrically for a; windows are symmetric so the adjoint is a box sum.
    let mut coef_a = vec![0.0; n];
    let mut coef_b_on_a = vec![0.0; n];
    let mut coef_b = vec![0.0; n];
    let mut coef_a_on_b = vec![0.0; n];
    for i in 0..n {
        let d = s.va[i] * s.vb[i] + EPS;
        let inv = 1.0 / d.sqrt();
        let k = s.cross[i] / (d * d.sqrt());
        // gradient w.r.t. b: A = inv (times a-part), B = -k * va (times b-part)
        coef_a[i] = inv;
        coef_b[i] = -k * s.va[i];
        // gradient w.r.t. a: inv on the b-part, -k * vb on the a-part
        coef_b_on_a[i] = inv;
        coef_a_on_b[i] = -k * s.vb[i];
    }
    let weighted = |c: &[f64], m: &[f64]| -> Vec<f64> { (0..n).map(|i| c[i] * m[i] / s.cnt[i]).collect() };
    let box_a = box_sum(&coef_a, shape, r);
    let box_a_m = box_sum(&weighted(&coef_a, &s.sa), shape, r);
    let box_b = box_sum(&coef_b, shape, r);
    let box_b_m = box_sum(&weighted(&coef_b, &s.sb), shape, r);
    let gb = (0..n)
        .map(|p| scale * (a[p] * box_a[p] - box_a_m[p] + b[p] * box_b[p] - box_b_m[p]))
        .collect();
    let box_ba = box_sum(&coef_b_on_a, shape, r);
    let box_ba_m = box_sum(&weighted(&coef_b_on_a, &s.sb), shape, r);
    let box_ab = box_sum(&coef_a_on_b, shape, r);
    let box_ab_m = box_sum(&weighted(&coef_a_on_b, &s.sa), shape, r);
    let ga = (0..n)
        .map(|p| scale * (b[p] * box_ba[p] - box_ba_m[p] + a[p] * box_ab[p] - box_ab_m[p]))
        .collect();
    Ok((loss, ga, gb))
}

// ---------------------------------------------------------------------------
// Dice
// ---------------------------------------------------------------------------

fn dice_parts(pred: &[f64], target: &[f64], labels: usize) -> Result<Vec<(f64, f64)>> {
    same_len(pred, target)?;
    if labels == 0 || !pred.len().is_multiple_of(labels) {
        return Err(Error::InvalidInput(format!(
            "{} values do not split into {labels} label channels",
            pred.len()
        )));
    }
    let n = pred.len() / labels;
    Ok((0..labels)
        .map(|l| {
            let p = &pred[l * n..(l + 1) * n];
            let t = &target[l * n..(l + 1) * n];
            let inter: f64 = p.iter().zip(t).map(|(x, y)| x * y).sum();
            let denom = p.iter().sum::<f64>() + t.iter().sum::<f64>() + EPS;
            (inter, denom)
        })
        .collect())
}

/// Soft Dice loss over foreground channels (background is not a channel).
pub fn dice_loss(pred: &[f64], target: &[f64], labels: usize) -> Result<f64> {
    let parts = dice_parts(pred, target, labels)?;
    Ok(1.0 - parts.iter().map(|(i, d)| 2.0 * i / d).sum::<f64>() / labels as f64)
}

pub fn dice_loss_grad(pred: &[f64], target: &[f64], labels: usize) -> Result<(f64, Vec<f64>)> {
    let parts = dice_parts(pred, target, labels)?;
    let n = pred.len() / labels;
    let loss = 1.0 - parts.iter().map(|(i, d)| 2.0 * i / d).sum::<f64>() / labels as f64;
    let mut grad = vec![0.0; pred.len()];
    for (l, &(inter, denom)) in parts.iter().enumerate() {
        for v in 0..n {
            let t = target[l * n + v];
            grad[l * n + v] = -(2.0 * t / denom - 2.0 * inter / (denom * denom)) / labels as f64;
        }
    }
    Ok((loss, grad))
}

// ---------------------------------------------------------------------------
// Regularisers
// ---------------------------------------------------------------------------

/// Mean of `max(0, -det)` over interior voxels.
pub fn jacobian_loss(grid: &DeformationGrid) -> Result<f64> {
    let jac = jacobian_determinant_map(grid)?;
    let vals = jac.interior_values();
    Ok(vals.iter().map(|d| (-d).max(0.0)).sum::<f64>() / vals.len() as f64)
}

pub fn jacobian_loss_grad(grid: &DeformationGrid) -> Result<(f64, Vec<f64>)> {
    let jac = jacobian_determinant_map(grid)?;
    let shape = grid.shape();
    let interior: usize = shape.iter().map(|s| s - 2).product();
    let mut grad_det = vec![0.0; voxel_count(shape)];
    let mut total = 0.0;
    for i in 1..shape[0] - 1 {
        for j in 1..shape[1] - 1 {
            for k in 1..shape[2] - 1 {
                let idx = crate::volgrid::flat_index(shape, i, j, k);
                let d = jac.det[idx];
                if d < 0.0 {
                    total -= d;
                    grad_det[idx] = -1.0 / interior as f64;
                }
            }
        }
    }
    Ok((total / interior as f64, jacobian_backward(grid, &grad_det)?))
}

fn smoothness_pairs(shape: Shape) -> usize {
    let n = voxel_count(shape);
    3 * (0..3).map(|a| n / shape[a] * (shape[a] - 1)).sum::<usize>()
}

/// Mean squared forward difference of the increments along every axis.
pub fn smoothness_loss(g: &GradientField) -> f64 {
    smoothness_raw(g.shape(), g.inc(), None)
}

pub fn smoothness_loss_grad(g: &GradientField) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; g.inc().len()];
    let v = smoothness_raw(g.shape(), g.inc(), Some(&mut grad));
    (v, grad)
}

fn smoothness_raw(shape: Shape, inc: &[f64], mut grad: Option<&mut Vec<f64>>) -> f64 {
    let count = smoothness_pairs(shape);
    if count == 0 {
        return 0.0;
    }
    let n = voxel_count(shape);
    let strides = [shape[1] * shape[2], shape[2], 1];
    let mut total = 0.0;
    for c in 0..3 {
        let ch = &inc[c * n..(c + 1) * n];
        for a in 0..3 {
            let (stride, len) = (strides[a], shape[a]);
            for idx in 0..n {
                if (idx / stride) % len + 1 >= len {
                    continue;
                }
                let d = ch[idx + stride] - ch[idx];
                total += d * d;
                if let Some(g) = grad.as_deref_mut() {
                    let s = 2.0 * d / count as f64;
                    g[c * n + idx + stride] += s;
                    g[c * n + idx] -= s;
                }
            }
        }
    }
    total / count as f64
}

// ---------------------------------------------------------------------------
// Combined objective
// ---------------------------------------------------------------------------

/// Per-direction loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DirectionTerms {
    pub sim: f64,
    pub seg: f64,
    pub smooth: f64,
    pub jac: f64,
}

impl DirectionTerms {
    pub fn weighted(&self, w: &LossWeights) -> f64 {
        let jac = if w.beta > 0.0 { w.beta * self.jac } else { 0.0 };
        self.sim + self.seg + w.alpha * self.smooth + jac
    }
}

/// Terms of both directions and the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub forward: DirectionTerms,
    pub backward: DirectionTerms,
}

pub const LOSS_CSV_HEADER: &str =
    "epoch,step,L_total,L_sim_f,L_seg_f,L_smooth_f,L_jac_f,L_sim_b,L_seg_b,L_smooth_b,L_jac_b";

impl LossTerms {
    pub fn combine(forward: DirectionTerms, backward: DirectionTerms, w: &LossWeights) -> Self {
        Self {
            total: forward.weighted(w) + backward.weighted(w),
            forward,
            backward,
        }
    }

    pub fn csv_row(&self, epoch: usize, step: usize) -> String {
        let (f, b) = (&self.forward, &self.backward);
        format!(
            "{epoch},{step},{},{},{},{},{},{},{},{},{}",
            self.total, f.sim, f.seg, f.smooth, f.jac, b.sim, b.seg, b.smooth, b.jac
        )
    }

    /// Average of several term sets (batch reduction).
    pub fn mean(items: &[LossTerms]) -> LossTerms {
        let k = items.len().max(1) as f64;
        let avg = |f: &dyn Fn(&LossTerms) -> f64| items.iter().map(f).sum::<f64>() / k;
        let dir = |sel: &dyn Fn(&LossTerms) -> DirectionTerms| DirectionTerms {
            sim: avg(&|t| sel(t).sim),
            seg: avg(&|t| sel(t).seg),
            smooth: avg(&|t| sel(t).smooth),
            jac: avg(&|t| sel(t).jac),
        };
        LossTerms {
            total: avg(&|t| t.total),
            forward: dir(&|t| t.forward),
            backward: dir(&|t| t.backward),
        }
    }
}

/// Inputs of one registration direction: the source is warped onto the target.
pub struct DirectionInputs<'a> {
    pub shape: Shape,
    pub source: &'a [f64],
    pub source_seg: &'a [f64],
    pub target: &'a [f64],
    pub target_seg: &'a [f64],
    pub labels: usize,
}

/// Everything computed for one direction from the raw decoder output.
pub struct DirectionResult {
    pub increments: GradientField,
    pub grid: DeformationGrid,
    pub warped: Vec<f64>,
    pub warped_seg: Vec<f64>,
    pub terms: DirectionTerms,
}

fn stack(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut v = Vec::with_capacity(a.len() + b.len());
    v.extend_from_slice(a);
    v.extend_from_slice(b);
    v
}

/// Evaluates one direction's loss terms from raw decoder output `raw`
/// (`3 x D x H x W`). When `want_grad` is set also returns dL/draw for the
/// weighted direction loss.
pub fn direction_loss(
    inputs: &DirectionInputs<'_>,
    raw: &[f64],
    w: &LossWeights,
    want_grad: bool,
) -> Result<(DirectionResult, Option<Vec<f64>>)> {
    let shape = inputs.shape;
    let n = voxel_count(shape);
    let increments = GradientField::from_raw(shape, raw)?;
    let grid = integrate_spatial_gradients(&increments);
    let src = stack(inputs.source, inputs.source_seg);
    let channels = 1 + inputs.labels;
    let warped_all = warp_channels(&src, channels, &grid)?;
    let (warped, warped_seg) = warped_all.split_at(n);

    let (sim, g_img, _) = ncc_loss_grad(warped, inputs.target, shape, w.ncc_window)?;
    let (seg, g_seg) = dice_loss_grad(warped_seg, inputs.target_seg, inputs.labels)?;
    let (smooth, g_smooth) = smoothness_loss_grad(&increments);
    let (jac, g_jac) = if w.beta > 0.0 {
        let (v, g) = jacobian_loss_grad(&grid)?;
        (v, Some(g))
    } else {
        (0.0, None)
    };
    let terms = DirectionTerms { sim, seg, smooth, jac };

    let grad = if want_grad {
        let g_out = stack(&g_img, &g_seg);
        let (_, mut g_phi) = warp_backward(&src, channels, &grid, &g_out)?;
        if let Some(gj) = g_jac {
            for (a, b) in g_phi.iter_mut().zip(gj) {
                *a += w.beta * b;
            }
        }
        let mut g_inc = integrate_backward(shape, &g_phi);
        for (a, b) in g_inc.iter_mut().zip(g_smooth) {
            *a += w.alpha * b;
        }
        Some(raw_activation_backward(raw, &g_inc))
    } else {
        None
    };
    let result = DirectionResult {
        warped: warped.to_vec(),
        warped_seg: warped_seg.to_vec(),
        increments,
        grid,
        terms,
    };
    Ok((result, grad))
}
