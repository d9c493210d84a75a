//! Reverse-mode kernels for the 3D convolutional network: same-padding and
//! strided convolutions, transposed convolutions, instance normalization and
//! leaky ReLU. Everything runs in f64 over channel-major `(C, D, H, W)` maps.

use crate::volgrid::{voxel_count, Shape};

pub const NORM_EPS: f64 = 1e-5;

/// Channel-major activation tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub shape: Shape,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, shape: Shape) -> Self {
        Self {
            channels,
            shape,
            data: vec![0.0; channels * voxel_count(shape)],
        }
    }

    pub fn from_vec(channels: usize, shape: Shape, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), channels * voxel_count(shape), "feature map length");
        Self { channels, shape, data }
    }

    pub fn voxels(&self) -> usize {
        voxel_count(self.shape)
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.voxels();
        &self.data[c * n..(c + 1) * n]
    }

    /// Stacks channels of `self` followed by `other`.
    pub fn concat(&self, other: &FeatureMap) -> FeatureMap {
        assert_eq!(self.shape, other.shape);
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        FeatureMap::from_vec(self.channels + other.channels, self.shape, data)
    }

    /// Splits off the first `channels` channels.
    pub fn split(&self, channels: usize) -> (FeatureMap, FeatureMap) {
        let n = self.voxels();
        let (a, b) = self.data.split_at(channels * n);
        (
            FeatureMap::from_vec(channels, self.shape, a.to_vec()),
            FeatureMap::from_vec(self.channels - channels, self.shape, b.to_vec()),
        )
    }
}

/// Valid output range along one axis for a tap at offset `d`.
#[inline]
fn tap_range(len: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (len as isize - d.max(0)).max(0) as usize;
    (lo, hi.max(lo))
}

/// 3x3x3 convolution, stride 1, zero padding 1. Weights `[cout][cin][3][3][3]`.
///
/// Works one output row at a time so the rows it touches stay in cache.
pub fn conv3_forward(x: &FeatureMap, w: &[f64], b: Option<&[f64]>, cout: usize) -> FeatureMap {
    let [d, h, wd] = x.shape;
    let n = x.voxels();
    let cin = x.channels;
    debug_assert_eq!(w.len(), cout * cin * 27);
    let mut out = vec![0.0; cout * n];
    if let Some(b) = b {
        for co in 0..cout {
            out[co * n..(co + 1) * n].fill(b[co]);
        }
    }
    let xr = [tap_range(wd, -1), tap_range(wd, 0), tap_range(wd, 1)];
    for z in 0..d {
        for y in 0..h {
            let orow = (z * h + y) * wd;
            for ci in 0..cin {
                let xin = &x.data[ci * n..(ci + 1) * n];
                for kz in 0..3 {
                    let zz = z as isize + kz as isize - 1;
                    if zz < 0 || zz >= d as isize {
                        continue;
                    }
                    for ky in 0..3 {
                        let yy = y as isize + ky as isize - 1;
                        if yy < 0 || yy >= h as isize {
                            continue;
                        }
                        let irow = &xin[(zz as usize * h + yy as usize) * wd..][..wd];
                        for (kx, &(x0, x1)) in xr.iter().enumerate() {
                            let src = &irow[x0 + kx - 1..x1 + kx - 1];
                            let tap = kz * 9 + ky * 3 + kx;
                            for co in 0..cout {
                                let wv = w[(co * cin + ci) * 27 + tap];
                                if wv == 0.0 {
                                    continue;
                                }
                                let o = &mut out[co * n + orow + x0..co * n + orow + x1];
                                for (acc, &v) in o.iter_mut().zip(src) {
                                    *acc += wv * v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    FeatureMap::from_vec(cout, x.shape, out)
}

/// Dot product with four independent accumulators so the reduction
/// vectorizes; summation order is fixed, so results stay deterministic.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Returns the input gradient and accumulates weight/bias gradients.
pub fn conv3_backward(
    x: &FeatureMap,
    w: &[f64],
    gy: &FeatureMap,
    gw: &mut [f64],
    gb: Option<&mut [f64]>,
) -> FeatureMap {
    let [d, h, wd] = x.shape;
    let n = x.voxels();
    let cin = x.channels;
    let cout = gy.channels;
    let mut gx = vec![0.0; cin * n];
    if let Some(gb) = gb {
        for co in 0..cout {
            gb[co] += gy.channel(co).iter().sum::<f64>();
        }
    }
    let xr = [tap_range(wd, -1), tap_range(wd, 0), tap_range(wd, 1)];
    let mut gw_acc = vec![0.0; gw.len()];
    for z in 0..d {
        for y in 0..h {
            let orow = (z * h + y) * wd;
            for co in 0..cout {
                let grow = &gy.data[co * n + orow..][..wd];
                for ci in 0..cin {
                    let base = (co * cin + ci) * 27;
                    for kz in 0..3 {
                        let zz = z as isize + kz as isize - 1;
                        if zz < 0 || zz >= d as isize {
                            continue;
                        }
                        for ky in 0..3 {
                            let yy = y as isize + ky as isize - 1;
                            if yy < 0 || yy >= h as isize {
                                continue;
                            }
                            let ioff = ci * n + (zz as usize * h + yy as usize) * wd;
                            for (kx, &(x0, x1)) in xr.iter().enumerate() {
                                let tap = base + kz * 9 + ky * 3 + kx;
                                let gs = &grow[x0..x1];
                                let (s0, s1) = (ioff + x0 + kx - 1, ioff + x1 + kx - 1);
                                gw_acc[tap] += dot(gs, &x.data[s0..s1]);
                                let wv = w[tap];
                                for (t, &a) in gx[s0..s1].iter_mut().zip(gs) {
                                    *t += wv * a;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    for (g, a) in gw.iter_mut().zip(gw_acc) {
        *g += a;
    }
    FeatureMap::from_vec(cin, x.shape, gx)
}

fn half(shape: Shape) -> Shape {
    shape.map(|s| s / 2)
}

fn double(shape: Shape) -> Shape {
    shape.map(|s| s * 2)
}

/// 2x2x2 convolution with stride 2 (halves every axis). Weights `[cout][cin][2][2][2]`.
pub fn down_forward(x: &FeatureMap, w: &[f64], b: Option<&[f64]>, cout: usize) -> FeatureMap {
    let [_, h, wd] = x.shape;
    let os = half(x.shape);
    let n = x.voxels();
    let on = voxel_count(os);
    let cin = x.channels;
    let mut out = vec![0.0; cout * on];
    for co in 0..cout {
        let o = &mut out[co * on..(co + 1) * on];
        if let Some(b) = b {
            o.fill(b[co]);
        }
        for ci in 0..cin {
            let xin = &x.data[ci * n..(ci + 1) * n];
            let wk = &w[(co * cin + ci) * 8..(co * cin + ci + 1) * 8];
            for z in 0..os[0] {
                for y in 0..os[1] {
                    for xx in 0..os[2] {
                        let mut acc = 0.0;
                        for t in 0..8 {
                            let (kz, ky, kx) = (t >> 2, (t >> 1) & 1, t & 1);
                            acc += wk[t] * xin[((2 * z + kz) * h + 2 * y + ky) * wd + 2 * xx + kx];
                        }
                        o[(z * os[1] + y) * os[2] + xx] += acc;
                    }
                }
            }
        }
    }
    FeatureMap::from_vec(cout, os, out)
}

pub fn down_backward(x: &FeatureMap, w: &[f64], gy: &FeatureMap, gw: &mut [f64], gb: Option<&mut [f64]>) -> FeatureMap {
    let [_, h, wd] = x.shape;
    let os = gy.shape;
    let n = x.voxels();
    let on = voxel_count(os);
    let cin = x.channels;
    let cout = gy.channels;
    let mut gx = vec![0.0; cin * n];
    if let Some(gb) = gb {
        for co in 0..cout {
            gb[co] += gy.channel(co).iter().sum::<f64>();
        }
    }
    for co in 0..cout {
        let g = &gy.data[co * on..(co + 1) * on];
        for ci in 0..cin {
            let xin = &x.data[ci * n..(ci + 1) * n];
            let base = (co * cin + ci) * 8;
            for z in 0..os[0] {
                for y in 0..os[1] {
                    for xx in 0..os[2] {
                        let gv = g[(z * os[1] + y) * os[2] + xx];
                        for t in 0..8 {
                            let (kz, ky, kx) = (t >> 2, (t >> 1) & 1, t & 1);
                            let idx = ((2 * z + kz) * h + 2 * y + ky) * wd + 2 * xx + kx;
                            gw[base + t] += gv * xin[idx];
                            gx[ci * n + idx] += gv * w[base + t];
                        }
                    }
                }
            }
        }
    }
    FeatureMap::from_vec(cin, x.shape, gx)
}

/// 2x2x2 transposed convolution with stride 2 (doubles every axis). Weights
/// `[cin][cout][2][2][2]`.
pub fn up_forward(x: &FeatureMap, w: &[f64], b: Option<&[f64]>, cout: usize) -> FeatureMap {
    let s = x.shape;
    let os = double(s);
    let n = x.voxels();
    let on = voxel_count(os);
    let cin = x.channels;
    let mut out = vec![0.0; cout * on];
    for co in 0..cout {
        let o = &mut out[co * on..(co + 1) * on];
        if let Some(b) = b {
            o.fill(b[co]);
        }
        for ci in 0..cin {
            let xin = &x.data[ci * n..(ci + 1) * n];
            let wk = &w[(ci * cout + co) * 8..(ci * cout + co + 1) * 8];
            for z in 0..s[0] {
                for y in 0..s[1] {
                    for xx in 0..s[2] {
                        let v = xin[(z * s[1] + y) * s[2] + xx];
                        for t in 0..8 {
                            let (kz, ky, kx) = (t >> 2, (t >> 1) & 1, t & 1);
                            o[((2 * z + kz) * os[1] + 2 * y + ky) * os[2] + 2 * xx + kx] += wk[t] * v;
                        }
                    }
                }
            }
        }
    }
    FeatureMap::from_vec(cout, os, out)
}

pub fn up_backward(x: &FeatureMap, w: &[f64], gy: &FeatureMap, gw: &mut [f64], gb: Option<&mut [f64]>) -> FeatureMap {
    let s = x.shape;
    let os = gy.shape;
    let n = x.voxels();
    let on = voxel_count(os);
    let cin = x.channels;
    let cout = gy.channels;
    let mut gx = vec![0.0; cin * n];
    if let Some(gb) = gb {
        for co in 0..cout {
            gb[co] += gy.channel(co).iter().sum::<f64>();
        }
    }
    for ci in 0..cin {
        let xin = &x.data[ci * n..(ci + 1) * n];
        for co in 0..cout {
            let g = &gy.data[co * on..(co + 1) * on];
            let base = (ci * cout + co) * 8;
            for z in 0..s[0] {
                for y in 0..s[1] {
                    for xx in 0..s[2] {
                        let idx = (z * s[1] + y) * s[2] + xx;
                        let v = xin[idx];
                        let mut acc = 0.0;
                        for t in 0..8 {
                            let (kz, ky, kx) = (t >> 2, (t >> 1) & 1, t & 1);
                            let gv = g[((2 * z + kz) * os[1] + 2 * y + ky) * os[2] + 2 * xx + kx];
                            gw[base + t] += gv * v;
                            acc += gv * w[base + t];
                        }
                        gx[ci * n + idx] += acc;
                    }
                }
            }
        }
    }
    FeatureMap::from_vec(cin, x.shape, gx)
}

/// Per-channel instance normalization without affine parameters. Returns the
/// output and the per-channel inverse standard deviations.
pub fn instance_norm_forward(x: &FeatureMap) -> (FeatureMap, Vec<f64>) {
    let n = x.voxels();
    let mut out = vec![0.0; x.data.len()];
    let mut inv_std = Vec::with_capacity(x.channels);
    for c in 0..x.channels {
        let ch = x.channel(c);
        let mean = ch.iter().sum::<f64>() / n as f64;
        let var = ch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let is = 1.0 / (var + NORM_EPS).sqrt();
        for (o, &v) in out[c * n..(c + 1) * n].iter_mut().zip(ch) {
            *o = (v - mean) * is;
        }
        inv_std.push(is);
    }
    (FeatureMap::from_vec(x.channels, x.shape, out), inv_std)
}

/// Backward given the normalized output `y`.
pub fn instance_norm_backward(y: &FeatureMap, inv_std: &[f64], gy: &FeatureMap) -> FeatureMap {
    let n = y.voxels();
    let nf = n as f64;
    let mut gx = vec![0.0; y.data.len()];
    for c in 0..y.channels {
        let yc = y.channel(c);
        let gc = gy.channel(c);
        let mean_g = gc.iter().sum::<f64>() / nf;
        let mean_gy = gc.iter().zip(yc).map(|(g, y)| g * y).sum::<f64>() / nf;
        for ((o, &g), &yv) in gx[c * n..(c + 1) * n].iter_mut().zip(gc).zip(yc) {
            *o = inv_std[c] * (g - mean_g - yv * mean_gy);
        }
    }
    FeatureMap::from_vec(y.channels, y.shape, gx)
}

pub fn leaky_relu(x: &FeatureMap, slope: f64) -> FeatureMap {
    let data = x.data.iter().map(|&v| if v > 0.0 { v } else { slope * v }).collect();
    FeatureMap::from_vec(x.channels, x.shape, data)
}

pub fn leaky_relu_backward(x: &FeatureMap, gy: &FeatureMap, slope: f64) -> FeatureMap {
    let data = x
        .data
        .iter()
        .zip(&gy.data)
        .map(|(&v, &g)| if v > 0.0 { g } else { slope * g })
        .collect();
    FeatureMap::from_vec(x.channels, x.shape, data)
}

/// A layer of a sequential stage. Parameter locations are offsets into a
/// flat parameter buffer.
#[derive(Clone, Debug, PartialEq)]
pub enum Layer {
    Conv3 {
        cin: usize,
        cout: usize,
        w: usize,
        b: Option<usize>,
    },
    Down {
        cin: usize,
        cout: usize,
        w: usize,
        b: Option<usize>,
    },
    Up {
        cin: usize,
        cout: usize,
        w: usize,
        b: Option<usize>,
    },
    Norm,
    LeakyRelu(f64),
}

impl Layer {
    pub fn weight_len(&self) -> usize {
        match *self {
            Layer::Conv3 { cin, cout, .. } => cin * cout * 27,
            Layer::Down { cin, cout, .. } | Layer::Up { cin, cout, .. } => cin * cout * 8,
            _ => 0,
        }
    }
}

enum Cache {
    Input(FeatureMap),
    Norm(FeatureMap, Vec<f64>),
}

/// Intermediate values recorded by [`run_stage`] for [`backprop_stage`].
#[derive(Default)]
pub struct Tape {
    caches: Vec<Cache>,
}

fn slice(params: &[f64], off: usize, len: usize) -> &[f64] {
    &params[off..off + len]
}

pub fn run_stage(layers: &[Layer], params: &[f64], x: FeatureMap, mut tape: Option<&mut Tape>) -> FeatureMap {
    let mut cur = x;
    for layer in layers {
        let next = match *layer {
            Layer::Conv3 { cout, w, b, .. } => {
                let wl = layer.weight_len();
                conv3_forward(&cur, slice(params, w, wl), b.map(|o| slice(params, o, cout)), cout)
            }
            Layer::Down { cout, w, b, .. } => {
                let wl = layer.weight_len();
                down_forward(&cur, slice(params, w, wl), b.map(|o| slice(params, o, cout)), cout)
            }
            Layer::Up { cout, w, b, .. } => {
                let wl = layer.weight_len();
                up_forward(&cur, slice(params, w, wl), b.map(|o| slice(params, o, cout)), cout)
            }
            Layer::Norm => {
                let (y, inv) = instance_norm_forward(&cur);
                if let Some(t) = tape.as_deref_mut() {
                    t.caches.push(Cache::Norm(y.clone(), inv));
                }
                cur = y;
                continue;
            }
            Layer::LeakyRelu(slope) => leaky_relu(&cur, slope),
        };
        if let Some(t) = tape.as_deref_mut() {
            t.caches.push(Cache::Input(cur));
        }
        cur = next;
    }
    cur
}

/// Consumes the tape; accumulates parameter gradients into `grads` and
/// returns the gradient with respect to the stage input.
pub fn backprop_stage(layers: &[Layer], params: &[f64], tape: Tape, gy: FeatureMap, grads: &mut [f64]) -> FeatureMap {
    let mut g = gy;
    for (layer, cache) in layers.iter().zip(tape.caches).rev() {
        g = match (layer, cache) {
            (&Layer::Conv3 { cout, w, b, .. }, Cache::Input(x)) => {
                let wl = layer.weight_len();
                let (gw, gb) = split_grads(grads, w, wl, b, cout);
                conv3_backward(&x, slice(params, w, wl), &g, gw, gb)
            }
            (&Layer::Down { cout, w, b, .. }, Cache::Input(x)) => {
                let wl = layer.weight_len();
                let (gw, gb) = split_grads(grads, w, wl, b, cout);
                down_backward(&x, slice(params, w, wl), &g, gw, gb)
            }
            (&Layer::Up { cout, w, b, .. }, Cache::Input(x)) => {
                let wl = layer.weight_len();
                let (gw, gb) = split_grads(grads, w, wl, b, cout);
                up_backward(&x, slice(params, w, wl), &g, gw, gb)
            }
            (Layer::Norm, Cache::Norm(y, inv)) => instance_norm_backward(&y, &inv, &g),
            (&Layer::LeakyRelu(slope), Cache::Input(x)) => leaky_relu_backward(&x, &g, slope),
            _ => unreachable!("tape does not match stage layout"),
        };
    }
    g
}

/// Disjoint mutable views of a weight block and an optional bias block.
/// Weights always precede their bias in the buffer.
fn split_grads(
    grads: &mut [f64],
    w: usize,
    wl: usize,
    b: Option<usize>,
    cout: usize,
) -> (&mut [f64], Option<&mut [f64]>) {
    match b {
        Some(bo) => {
            debug_assert!(bo >= w + wl);
            let (head, tail) = grads.split_at_mut(bo);
            (&mut head[w..w + wl], Some(&mut tail[..cout]))
        }
        None => (&mut grads[w..w + wl], None),
    }
}
