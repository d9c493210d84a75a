//! Deformation-field maths: integrating per-axis increments into sampling
//! grids, trilinear warping and Jacobian determinants, each with its adjoint
//! for backpropagation.

use crate::error::{Error, Result};
use crate::volgrid::{flat_index, voxel_count, SegMap, Shape, Volume};

fn check_len(shape: Shape, channels: usize, len: usize) -> Result<()> {
    let expected = channels * voxel_count(shape);
    if len != expected {
        return Err(Error::shape(expected, len));
    }
    Ok(())
}

fn check_finite(data: &[f64]) -> Result<()> {
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("field contains non-finite values".into()));
    }
    Ok(())
}

/// Per-axis increments `(3, D, H, W)`; channel `c` is the spacing of the
/// sampling grid along axis `c`.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientField {
    shape: Shape,
    inc: Vec<f64>,
}

impl GradientField {
    pub fn new(shape: Shape, inc: Vec<f64>) -> Result<Self> {
        check_len(shape, 3, inc.len())?;
        check_finite(&inc)?;
        Ok(Self { shape, inc })
    }

    /// Maps raw network output through `max(0, 1 + r)`.
    pub fn from_raw(shape: Shape, raw: &[f64]) -> Result<Self> {
        Self::new(shape, raw.iter().map(|&r| (1.0 + r).max(0.0)).collect())
    }

    pub fn uniform(shape: Shape, value: f64) -> Self {
        Self {
            shape,
            inc: vec![value; 3 * voxel_count(shape)],
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn inc(&self) -> &[f64] {
        &self.inc
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = voxel_count(self.shape);
        &self.inc[c * n..(c + 1) * n]
    }

    pub fn scaled(&self, a: f64) -> Self {
        Self {
            shape: self.shape,
            inc: self.inc.iter().map(|v| v * a).collect(),
        }
    }
}

/// Backward of the `max(0, 1 + r)` increment activation.
pub fn raw_activation_backward(raw: &[f64], grad_inc: &[f64]) -> Vec<f64> {
    raw.iter()
        .zip(grad_inc)
        .map(|(&r, &g)| if 1.0 + r > 0.0 { g } else { 0.0 })
        .collect()
}

/// Sampling grid `(3, D, H, W)` in voxel coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformationGrid {
    shape: Shape,
    phi: Vec<f64>,
}

impl DeformationGrid {
    pub fn new(shape: Shape, phi: Vec<f64>) -> Result<Self> {
        check_len(shape, 3, phi.len())?;
        check_finite(&phi)?;
        Ok(Self { shape, phi })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn phi(&self) -> &[f64] {
        &self.phi
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = voxel_count(self.shape);
        &self.phi[c * n..(c + 1) * n]
    }

    pub fn at(&self, idx: usize) -> [f64; 3] {
        let n = voxel_count(self.shape);
        [self.phi[idx], self.phi[n + idx], self.phi[2 * n + idx]]
    }
}

/// Per-voxel Jacobian determinant of a grid.
#[derive(Clone, Debug, PartialEq)]
pub struct JacobianMap {
    pub shape: Shape,
    pub det: Vec<f64>,
}

impl JacobianMap {
    /// Whether `(i, j, k)` is at least one voxel away from every face.
    pub fn is_interior(&self, i: usize, j: usize, k: usize) -> bool {
        interior(self.shape, [i, j, k])
    }

    pub fn interior_values(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for i in 1..self.shape[0].saturating_sub(1) {
            for j in 1..self.shape[1].saturating_sub(1) {
                for k in 1..self.shape[2].saturating_sub(1) {
                    out.push(self.det[flat_index(self.shape, i, j, k)]);
                }
            }
        }
        out
    }

    pub fn min_det(&self) -> f64 {
        self.det.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// Share of interior voxels with a non-positive determinant.
    pub fn fold_fraction(&self) -> f64 {
        let vals = self.interior_values();
        if vals.is_empty() {
            return 0.0;
        }
        vals.iter().filter(|&&d| d <= 0.0).count() as f64 / vals.len() as f64
    }
}

fn interior(shape: Shape, p: [usize; 3]) -> bool {
    (0..3).all(|a| p[a] >= 1 && p[a] + 1 < shape[a])
}

fn axis_stride(shape: Shape, axis: usize) -> usize {
    match axis {
        0 => shape[1] * shape[2],
        1 => shape[2],
        _ => 1,
    }
}

/// Exclusive prefix sum of each increment channel along its own axis, so the
/// grid is zero on the first plane and a field of ones gives the identity.
pub fn integrate_spatial_gradients(g: &GradientField) -> DeformationGrid {
    DeformationGrid {
        shape: g.shape,
        phi: integrate_raw(g.shape, &g.inc),
    }
}

fn integrate_raw(shape: Shape, inc: &[f64]) -> Vec<f64> {
    let n = voxel_count(shape);
    let mut phi = vec![0.0; 3 * n];
    for c in 0..3 {
        let stride = axis_stride(shape, c);
        let len = shape[c];
        let src = &inc[c * n..(c + 1) * n];
        let dst = &mut phi[c * n..(c + 1) * n];
        for idx in 0..n {
            // position along axis c
            let pos = (idx / stride) % len;
            if pos > 0 {
                dst[idx] = dst[idx - stride] + src[idx - stride];
            }
        }
    }
    phi
}

/// Adjoint of [`integrate_spatial_gradients`]: exclusive suffix sum.
pub fn integrate_backward(shape: Shape, grad_phi: &[f64]) -> Vec<f64> {
    let n = voxel_count(shape);
    let mut grad_inc = vec![0.0; 3 * n];
    for c in 0..3 {
        let stride = axis_stride(shape, c);
        let len = shape[c];
        let src = &grad_phi[c * n..(c + 1) * n];
        let dst = &mut grad_inc[c * n..(c + 1) * n];
        for idx in (0..n).rev() {
            let pos = (idx / stride) % len;
            if pos + 1 < len {
                dst[idx] = dst[idx + stride] + src[idx + stride];
            }
        }
    }
    grad_inc
}

/// Clamped cell lookup for one axis: lower index, fraction, and whether the
/// coordinate was inside the open range (zero derivative otherwise).
#[inline]
fn cell(p: f64, size: usize) -> (usize, f64, bool) {
    if size == 1 {
        return (0, 0.0, false);
    }
    let hi = (size - 1) as f64;
    let inside = p > 0.0 && p < hi;
    let c = p.clamp(0.0, hi);
    let f = c.floor().min(hi - 1.0);
    (f as usize, c - f, inside)
}

/// Trilinear warp of `channels` stacked fields in `src` through `grid`.
pub fn warp_channels(src: &[f64], channels: usize, grid: &DeformationGrid) -> Result<Vec<f64>> {
    let shape = grid.shape;
    check_len(shape, channels, src.len())?;
    let n = voxel_count(shape);
    let mut out = vec![0.0; channels * n];
    for idx in 0..n {
        let p = grid.at(idx);
        let (i0, fz, _) = cell(p[0], shape[0]);
        let (j0, fy, _) = cell(p[1], shape[1]);
        let (k0, fx, _) = cell(p[2], shape[2]);
        let corners = corner_weights(shape, [i0, j0, k0], [fz, fy, fx]);
        for c in 0..channels {
            let s = &src[c * n..(c + 1) * n];
            let mut acc = 0.0;
            for &(w, off) in corners.iter().flatten() {
                acc += w * s[off];
            }
            out[c * n + idx] = acc;
        }
    }
    Ok(out)
}

/// Up to eight (weight, flat offset) pairs; zero-weight corners are skipped so
/// integer coordinates reproduce the source exactly.
#[inline]
fn corner_weights(shape: Shape, base: [usize; 3], frac: [f64; 3]) -> [Option<(f64, usize)>; 8] {
    let mut out = [None; 8];
    for (corner, slot) in out.iter_mut().enumerate() {
        let mut w = 1.0;
        let mut idx = base;
        for a in 0..3 {
            if (corner >> (2 - a)) & 1 == 1 {
                w *= frac[a];
                idx[a] += 1;
            } else {
                w *= 1.0 - frac[a];
            }
        }
        if w != 0.0 {
            *slot = Some((w, flat_index(shape, idx[0], idx[1], idx[2])));
        }
    }
    out
}

/// Gradients of a warp with respect to the source fields and the grid.
pub fn warp_backward(
    src: &[f64],
    channels: usize,
    grid: &DeformationGrid,
    grad_out: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    let shape = grid.shape;
    check_len(shape, channels, src.len())?;
    check_len(shape, channels, grad_out.len())?;
    let n = voxel_count(shape);
    let mut grad_src = vec![0.0; channels * n];
    let mut grad_phi = vec![0.0; 3 * n];
    for idx in 0..n {
        let p = grid.at(idx);
        let cells = [cell(p[0], shape[0]), cell(p[1], shape[1]), cell(p[2], shape[2])];
        let base = [cells[0].0, cells[1].0, cells[2].0];
        let frac = [cells[0].1, cells[1].1, cells[2].1];
        for c in 0..channels {
            let g = grad_out[c * n + idx];
            if g == 0.0 {
                continue;
            }
            let s = &src[c * n..(c + 1) * n];
            let gs = &mut grad_src[c * n..(c + 1) * n];
            for corner in 0..8 {
                let mut w = 1.0;
                let mut dw = [1.0f64; 3];
                let mut at = base;
                let mut valid = true;
                for a in 0..3 {
                    let hi = (corner >> (2 - a)) & 1 == 1;
                    if hi {
                        at[a] += 1;
                        if at[a] >= shape[a] {
                            valid = false;
                            break;
                        }
                    }
                    let (wa, da) = if hi { (frac[a], 1.0) } else { (1.0 - frac[a], -1.0) };
                    for (b, d) in dw.iter_mut().enumerate() {
                        *d *= if b == a { da } else { wa };
                    }
                    w *= wa;
                }
                if !valid {
                    continue;
                }
                let off = flat_index(shape, at[0], at[1], at[2]);
                gs[off] += g * w;
                let v = s[off];
                for a in 0..3 {
                    if cells[a].2 {
                        grad_phi[a * n + idx] += g * v * dw[a];
                    }
                }
            }
        }
    }
    Ok((grad_src, grad_phi))
}

pub fn warp_trilinear(v: &Volume, grid: &DeformationGrid) -> Result<Volume> {
    if v.shape() != grid.shape {
        return Err(Error::shape(grid.shape, v.shape()));
    }
    let out = warp_channels(&v.to_f64(), 1, grid)?;
    Volume::from_f64(v.shape(), &out)
}

/// Warps each foreground one-hot channel independently; the result is a soft
/// label map with `num_labels` channels.
pub fn warp_segmentation(s: &SegMap, grid: &DeformationGrid) -> Result<Vec<f64>> {
    if s.shape() != grid.shape {
        return Err(Error::shape(grid.shape, s.shape()));
    }
    warp_channels(&s.one_hot(), s.num_labels() as usize, grid)
}

/// Derivative of `phi` along `axis` at `p`: central inside, one-sided at faces.
#[inline]
fn diff_along(ch: &[f64], shape: Shape, p: [usize; 3], axis: usize) -> f64 {
    let stride = axis_stride(shape, axis);
    let idx = flat_index(shape, p[0], p[1], p[2]);
    let len = shape[axis];
    if p[axis] == 0 {
        ch[idx + stride] - ch[idx]
    } else if p[axis] + 1 == len {
        ch[idx] - ch[idx - stride]
    } else {
        0.5 * (ch[idx + stride] - ch[idx - stride])
    }
}

/// Adjoint of [`diff_along`]: scatter `g` into `out`.
#[inline]
fn diff_along_adjoint(out: &mut [f64], shape: Shape, p: [usize; 3], axis: usize, g: f64) {
    let stride = axis_stride(shape, axis);
    let idx = flat_index(shape, p[0], p[1], p[2]);
    let len = shape[axis];
    if p[axis] == 0 {
        out[idx + stride] += g;
        out[idx] -= g;
    } else if p[axis] + 1 == len {
        out[idx] += g;
        out[idx - stride] -= g;
    } else {
        out[idx + stride] += 0.5 * g;
        out[idx - stride] -= 0.5 * g;
    }
}

fn jacobian_at(grid: &DeformationGrid, p: [usize; 3]) -> [[f64; 3]; 3] {
    let mut j = [[0.0; 3]; 3];
    for (c, row) in j.iter_mut().enumerate() {
        let ch = grid.channel(c);
        for (a, v) in row.iter_mut().enumerate() {
            *v = diff_along(ch, grid.shape, p, a);
        }
    }
    j
}

fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// d det / d m[r][c] (the cofactor matrix).
fn cofactors(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for (r, row) in out.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            let (r1, r2) = ((r + 1) % 3, (r + 2) % 3);
            let (c1, c2) = ((c + 1) % 3, (c + 2) % 3);
            *v = m[r1][c1] * m[r2][c2] - m[r1][c2] * m[r2][c1];
        }
    }
    out
}

fn check_jacobian_shape(shape: Shape) -> Result<()> {
    if shape.iter().any(|&s| s < 3) {
        return Err(Error::InvalidInput(format!(
            "Jacobian needs at least 3 voxels per axis, got {shape:?}"
        )));
    }
    Ok(())
}

pub fn jacobian_determinant_map(grid: &DeformationGrid) -> Result<JacobianMap> {
    let shape = grid.shape;
    check_jacobian_shape(shape)?;
    let mut det = vec![0.0; voxel_count(shape)];
    for i in 0..shape[0] {
        for j in 0..shape[1] {
            for k in 0..shape[2] {
                det[flat_index(shape, i, j, k)] = det3(&jacobian_at(grid, [i, j, k]));
            }
        }
    }
    Ok(JacobianMap { shape, det })
}

/// Backpropagates `grad_det` (one value per voxel) into the grid.
pub fn jacobian_backward(grid: &DeformationGrid, grad_det: &[f64]) -> Result<Vec<f64>> {
    let shape = grid.shape;
    check_jacobian_shape(shape)?;
    check_len(shape, 1, grad_det.len())?;
    let n = voxel_count(shape);
    let mut grad_phi = vec![0.0; 3 * n];
    for i in 0..shape[0] {
        for j in 0..shape[1] {
            for k in 0..shape[2] {
                let p = [i, j, k];
                let g = grad_det[flat_index(shape, i, j, k)];
                if g == 0.0 {
                    continue;
                }
                let cof = cofactors(&jacobian_at(grid, p));
                for (c, row) in cof.iter().enumerate() {
                    let out = &mut grad_phi[c * n..(c + 1) * n];
                    for (a, &cv) in row.iter().enumerate() {
                        diff_along_adjoint(out, shape, p, a, g * cv);
                    }
                }
            }
        }
    }
    Ok(grad_phi)
}
