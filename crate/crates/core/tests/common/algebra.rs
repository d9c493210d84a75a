//! Deformation-algebra checks with test-side oracles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use reglat::volgrid::{flat_index, make_identity_grid, voxel_count, SegMap, Shape, Volume};
use reglat::warp::{
    integrate_spatial_gradients, jacobian_determinant_map, warp_segmentation, warp_trilinear, DeformationGrid,
    GradientField,
};

pub fn random_volume(seed: u64, shape: Shape) -> Volume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Volume::from_fn(shape, |_, _, _| rng.random::<f32>()).unwrap()
}

pub fn random_seg(seed: u64, shape: Shape, labels: u8) -> SegMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..voxel_count(shape)).map(|_| rng.random_range(0..=labels)).collect();
    SegMap::new(shape, data, labels).unwrap()
}

/// Largest deviation of identity-warped volume and one-hot labels from the
/// inputs (expected to be exactly 0).
pub fn identity_warp_error() -> f64 {
    let shape = [7, 6, 5];
    let v = random_volume(3, shape);
    let s = random_seg(4, shape, 3);
    let id = make_identity_grid(shape).unwrap();
    let w = warp_trilinear(&v, &id).unwrap();
    let mut err = v
        .data()
        .iter()
        .zip(w.data())
        .map(|(a, b)| (a - b).abs() as f64)
        .fold(0.0, f64::max);
    let soft = warp_segmentation(&s, &id).unwrap();
    err = s
        .one_hot()
        .iter()
        .zip(&soft)
        .map(|(a, b)| (a - b).abs())
        .fold(err, f64::max);
    err
}

/// Largest deviation of the integrated all-ones increment field from the
/// identity grid (expected to be exactly 0).
pub fn ones_cumsum_error() -> f64 {
    let shape = [6, 5, 7];
    let g = integrate_spatial_gradients(&GradientField::uniform(shape, 1.0));
    let id = make_identity_grid(shape).unwrap();
    g.phi()
        .iter()
        .zip(id.phi())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

/// Largest interior deviation of det J from `s^3` for a uniform stretch.
pub fn stretch_jacobian_error(s: f64) -> f64 {
    let shape = [6, 7, 8];
    let g = integrate_spatial_gradients(&GradientField::uniform(shape, s));
    let j = jacobian_determinant_map(&g).unwrap();
    let vals = j.interior_values();
    assert!(!vals.is_empty());
    vals.iter().map(|d| (d - s.powi(3)).abs()).fold(0.0, f64::max)
}

/// Determinant by the rule of Sarrus.
fn sarrus(m: [[f64; 3]; 3]) -> f64 {
    m[0][0] * m[1][1] * m[2][2] + m[0][1] * m[1][2] * m[2][0] + m[0][2] * m[1][0] * m[2][1]
        - m[0][2] * m[1][1] * m[2][0]
        - m[0][0] * m[1][2] * m[2][1]
        - m[0][1] * m[1][0] * m[2][2]
}

/// Central-difference Jacobian determinant at an interior voxel.
fn oracle_det(g: &DeformationGrid, p: [usize; 3]) -> f64 {
    let shape = g.shape();
    let mut m = [[0.0; 3]; 3];
    for (c, row) in m.iter_mut().enumerate() {
        let ch = g.channel(c);
        for (a, v) in row.iter_mut().enumerate() {
            let mut lo = p;
            let mut hi = p;
            lo[a] -= 1;
            hi[a] += 1;
            *v = (ch[flat_index(shape, hi[0], hi[1], hi[2])] - ch[flat_index(shape, lo[0], lo[1], lo[2])]) / 2.0;
        }
    }
    sarrus(m)
}

fn grid_from(shape: Shape, f: impl Fn([f64; 3]) -> [f64; 3]) -> DeformationGrid {
    let n = voxel_count(shape);
    let mut phi = vec![0.0; 3 * n];
    for i in 0..shape[0] {
        for j in 0..shape[1] {
            for k in 0..shape[2] {
                let idx = flat_index(shape, i, j, k);
                let v = f([i as f64, j as f64, k as f64]);
                for c in 0..3 {
                    phi[c * n + idx] = v[c];
                }
            }
        }
    }
    DeformationGrid::new(shape, phi).unwrap()
}

#[derive(Debug)]
pub struct FoldReport {
    /// Max interior |det - oracle| over a smooth folded field.
    pub max_err: f64,
    /// Most negative determinant found (must be < 0).
    pub min_det: f64,
    /// |det - det(A)| for a linear orientation-reversing map `A x`.
    pub linear_err: f64,
}

/// A field with a local fold compared voxel-by-voxel against the explicit
/// 3x3 oracle, plus a linear reflection with a known determinant.
pub fn folded_field() -> FoldReport {
    let shape = [9, 9, 9];
    let c = 4.0;
    let g = grid_from(shape, |p| {
        let r2 = (p[0] - c).powi(2) + (p[1] - c).powi(2) + (p[2] - c).powi(2);
        let bump = 3.0 * (-r2 / 4.0).exp();
        [
            p[0] - bump * (p[0] - c),
            p[1] + 0.3 * p[0],
            p[2] + 0.1 * p[1] * p[0] / 8.0,
        ]
    });
    let j = jacobian_determinant_map(&g).unwrap();
    let mut max_err: f64 = 0.0;
    let mut min_det = f64::INFINITY;
    for i in 1..8 {
        for jj in 1..8 {
            for k in 1..8 {
                let d = j.det[flat_index(shape, i, jj, k)];
                max_err = max_err.max((d - oracle_det(&g, [i, jj, k])).abs());
                min_det = min_det.min(d);
            }
        }
    }

    let a = [[-1.0, 0.2, 0.0], [0.3, 1.0, 0.5], [0.0, -0.4, 2.0]];
    let lin = grid_from([5, 5, 5], |p| {
        [0, 1, 2].map(|r| a[r][0] * p[0] + a[r][1] * p[1] + a[r][2] * p[2])
    });
    let expected = sarrus(a);
    let linear_err = jacobian_determinant_map(&lin)
        .unwrap()
        .interior_values()
        .iter()
        .map(|d| (d - expected).abs())
        .fold(0.0, f64::max);
    FoldReport {
        max_err,
        min_det,
        linear_err,
    }
}
