//! 2-D slices, marching-squares contours and PGM export.
//!
//! Slice coordinates are `[row, col]` with pixel centres at integer
//! positions, so contours around border pixels reach `-0.5` and `n - 0.5`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volgrid::{flat_index, SegMap, Shape, Volume};

/// Plane names for slices taken perpendicular to axis 0, 1, 2.
pub const PLANES: [&str; 3] = ["axial", "coronal", "sagittal"];

/// Row-major 2-D image.
#[derive(Clone, Debug, PartialEq)]
pub struct Slice2<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Copy> Slice2<T> {
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }
}

fn slice_dims(shape: Shape, axis: usize, index: usize) -> Result<(usize, usize, usize, usize)> {
    if axis > 2 {
        return Err(Error::InvalidInput(format!("axis {axis} out of range")));
    }
    if index >= shape[axis] {
        return Err(Error::InvalidInput(format!(
            "slice {index} out of range for axis {axis} of length {}",
            shape[axis]
        )));
    }
    let (ra, ca) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    Ok((ra, ca, shape[ra], shape[ca]))
}

fn take<T: Copy>(data: &[T], shape: Shape, axis: usize, index: usize) -> Result<Slice2<T>> {
    let (ra, ca, rows, cols) = slice_dims(shape, axis, index)?;
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let mut p = [0; 3];
            p[axis] = index;
            p[ra] = r;
            p[ca] = c;
            out.push(data[flat_index(shape, p[0], p[1], p[2])]);
        }
    }
    Ok(Slice2 { rows, cols, data: out })
}

pub fn volume_slice(v: &Volume, axis: usize, index: usize) -> Result<Slice2<f32>> {
    take(v.data(), v.shape(), axis, index)
}

/// Binary mask of `label` on one slice.
pub fn label_slice(seg: &SegMap, label: u8, axis: usize, index: usize) -> Result<Slice2<bool>> {
    let s = take(seg.labels(), seg.shape(), axis, index)?;
    Ok(Slice2 {
        rows: s.rows,
        cols: s.cols,
        data: s.data.into_iter().map(|l| l == label).collect(),
    })
}

/// Binary 8-bit PGM; intensities are clamped to `[0, 1]` and mapped to
/// `round(v * 255)`.
pub fn to_pgm(s: &Slice2<f32>) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", s.cols, s.rows).into_bytes();
    out.extend(s.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

/// Parses a binary PGM written by [`to_pgm`] back into `[0, 1]` values.
pub fn from_pgm(bytes: &[u8]) -> Result<Slice2<f32>> {
    let bad = |r: &str| Error::InvalidInput(format!("bad PGM: {r}"));
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(
            std::str::from_utf8(&bytes[start..pos])
                .map_err(|_| bad("header"))?
                .to_string(),
        );
    }
    pos += 1;
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad("expected P5 with maxval 255"));
    }
    let cols: usize = fields[1].parse().map_err(|_| bad("width"))?;
    let rows: usize = fields[2].parse().map_err(|_| bad("height"))?;
    let body = bytes.get(pos..).ok_or_else(|| bad("missing pixels"))?;
    if body.len() != rows * cols {
        return Err(bad("pixel count"));
    }
    Ok(Slice2 {
        rows,
        cols,
        data: body.iter().map(|&b| b as f32 / 255.0).collect(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Original,
    Deformed,
}

/// One closed polygon (the first point is not repeated).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Contour {
    pub slice: usize,
    pub axis: usize,
    pub label: u8,
    pub role: Role,
    pub points: Vec<[f64; 2]>,
}

/// Closed iso-lines at level 0.5 of a binary mask.
///
/// Segments are oriented so that every crossing point starts exactly one
/// segment, which makes loop assembly unambiguous; saddle cells keep the
/// two foreground corners apart.
pub fn marching_squares(mask: &Slice2<bool>) -> Vec<Vec<[f64; 2]>> {
    let (rows, cols) = (mask.rows as i64, mask.cols as i64);
    // padded lookup so every loop closes inside the frame
    let at = |r: i64, c: i64| r >= 0 && c >= 0 && r < rows && c < cols && mask.data[(r * cols + c) as usize];
    // points are stored doubled so that midpoints are integral
    let mut next: BTreeMap<(i64, i64), (i64, i64)> = BTreeMap::new();
    for r in -1..rows {
        for c in -1..cols {
            // clockwise corners: TL, TR, BR, BL
            let corner = [(r, c), (r, c + 1), (r + 1, c + 1), (r + 1, c)];
            let v = corner.map(|(a, b)| at(a, b));
            let mid = |e: usize| {
                let (a, b) = (corner[e], corner[(e + 1) % 4]);
                (a.0 + b.0, a.1 + b.1)
            };
            for k in 0..4 {
                if !v[k] && v[(k + 1) % 4] {
                    let mut m = (k + 1) % 4;
                    while !(v[m] && !v[(m + 1) % 4]) {
                        m = (m + 1) % 4;
                    }
                    next.insert(mid(k), mid(m));
                }
            }
        }
    }
    let mut loops = Vec::new();
    while let Some((&start, _)) = next.iter().next() {
        let mut pts = Vec::new();
        let mut p = start;
        while let Some(q) = next.remove(&p) {
            pts.push([p.0 as f64 / 2.0, p.1 as f64 / 2.0]);
            p = q;
        }
        loops.push(pts);
    }
    loops
}

/// Even-odd fill evaluated at pixel centres.
pub fn rasterize(polygons: &[Vec<[f64; 2]>], rows: usize, cols: usize) -> Slice2<bool> {
    let mut data = vec![false; rows * cols];
    for poly in polygons {
        let n = poly.len();
        for r in 0..rows {
            let y = r as f64;
            let mut xs = Vec::new();
            for i in 0..n {
                let [r1, c1] = poly[i];
                let [r2, c2] = poly[(i + 1) % n];
                if (r1 > y) != (r2 > y) {
                    xs.push(c1 + (y - r1) * (c2 - c1) / (r2 - r1));
                }
            }
            for c in 0..cols {
                let x = c as f64;
                if xs.iter().filter(|&&xi| xi > x).count() % 2 == 1 {
                    data[r * cols + c] ^= true;
                }
            }
        }
    }
    Slice2 { rows, cols, data }
}

/// Contours of every foreground label on one slice.
pub fn slice_contours(seg: &SegMap, axis: usize, index: usize, role: Role) -> Result<Vec<Contour>> {
    let mut out = Vec::new();
    for label in 1..=seg.num_labels() {
        let mask = label_slice(seg, label, axis, index)?;
        for points in marching_squares(&mask) {
            out.push(Contour {
                slice: index,
                axis,
                label,
                role,
                points,
            });
        }
    }
    Ok(out)
}
