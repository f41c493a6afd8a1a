//! Lifting frozen 2D positional embeddings to 3D token positions.
//!
//! Token centers in `[−1, 1]³` are projected orthographically onto faces of
//! the normalization cube. Each face indexes the encoder's own `G×G` patch
//! embedding grid, and the per-face embeddings are averaged into a single
//! positional vector per token.
//!
//! World axes inside the cube: `x` right, `y` up, `z` depth. Every face basis
//! is right-handed with `u × v` equal to the outward normal:
//!
//! | face   | normal | u   | v   |
//! |--------|--------|-----|-----|
//! | front  | −z     | +x  | −y  |
//! | back   | +z     | +x  | +y  |
//! | right  | +x     | +y  | +z  |
//! | left   | −x     | +y  | −z  |
//! | top    | +y     | +x  | −z  |
//! | bottom | −y     | +x  | +z  |
//!
//! `u` indexes grid rows and `v` grid columns.

use serde::{Deserialize, Serialize};

use crate::autodiff::Mat;
use crate::error::{Error, Result};
use crate::geometry::Point3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Face {
    Front,
    Back,
    Left,
    Right,
    Top,
    Bottom,
}

impl Face {
    pub const ALL: [Face; 6] = [Face::Top, Face::Bottom, Face::Left, Face::Right, Face::Front, Face::Back];

    /// `(u_axis, v_axis)` spanning the face.
    pub const fn basis(self) -> (Point3, Point3) {
        match self {
            Face::Front => ([1.0, 0.0, 0.0], [0.0, -1.0, 0.0]),
            Face::Back => ([1.0, 0.0, 0.0], [0.0, 1.0, 0.0]),
            Face::Right => ([0.0, 1.0, 0.0], [0.0, 0.0, 1.0]),
            Face::Left => ([0.0, 1.0, 0.0], [0.0, 0.0, -1.0]),
            Face::Top => ([1.0, 0.0, 0.0], [0.0, 0.0, -1.0]),
            Face::Bottom => ([1.0, 0.0, 0.0], [0.0, 0.0, 1.0]),
        }
    }

    pub const fn normal(self) -> Point3 {
        match self {
            Face::Front => [0.0, 0.0, -1.0],
            Face::Back => [0.0, 0.0, 1.0],
            Face::Right => [1.0, 0.0, 0.0],
            Face::Left => [-1.0, 0.0, 0.0],
            Face::Top => [0.0, 1.0, 0.0],
            Face::Bottom => [0.0, -1.0, 0.0],
        }
    }
}

/// Ordered set of distinct cube faces.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VirtualPlaneSet {
    faces: Vec<Face>,
}

impl VirtualPlaneSet {
    /// Standard layouts: 1 = front; 2 = front, back; 4 = front, back, left, right; 6 = all faces.
    pub fn standard(n: usize) -> Result<Self> {
        let faces = match n {
            1 => vec![Face::Front],
            2 => vec![Face::Front, Face::Back],
            4 => vec![Face::Front, Face::Back, Face::Left, Face::Right],
            6 => Face::ALL.to_vec(),
            _ => return Err(Error::InvalidArgument(format!("plane count {n} not in {{1, 2, 4, 6}}"))),
        };
        Ok(Self { faces })
    }

    pub fn from_faces(faces: Vec<Face>) -> Result<Self> {
        if faces.is_empty() {
            return Err(Error::InvalidArgument("plane set is empty".into()));
        }
        for (i, f) in faces.iter().enumerate() {
            if faces[..i].contains(f) {
                return Err(Error::InvalidArgument(format!("face {f:?} listed twice")));
            }
        }
        Ok(Self { faces })
    }

    pub fn faces(&self) -> &[Face] {
        &self.faces
    }

    pub fn len(&self) -> usize {
        self.faces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }
}

/// `G×G×D` grid of frozen patch positional embeddings (no class token).
#[derive(Clone, Debug, PartialEq)]
pub struct PeGrid {
    side: usize,
    dim: usize,
    data: Vec<f64>,
}

impl PeGrid {
    pub fn new(side: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if side == 0 || dim == 0 {
            return Err(Error::InvalidArgument("grid side and width must be positive".into()));
        }
        if data.len() != side * side * dim {
            return Err(Error::Shape(format!("{side}x{side}x{dim} grid with {} values", data.len())));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("positional embedding grid".into()));
        }
        Ok(Self { side, dim, data })
    }

    /// Rows in row-major `(row, col)` patch order, as stored by the encoder.
    pub fn from_mat(side: usize, m: &Mat) -> Result<Self> {
        if m.rows != side * side {
            return Err(Error::Shape(format!("{} rows for a {side}x{side} grid", m.rows)));
        }
        Self::new(side, m.cols, m.data.clone())
    }

    pub fn to_mat(&self) -> Mat {
        Mat::from_vec(self.side * self.side, self.dim, self.data.clone())
    }

    /// Fixed 2D sine-cosine embeddings: first half of the channels encodes
    /// the row, second half the column.
    pub fn sincos(side: usize, dim: usize) -> Self {
        assert!(dim % 4 == 0, "sincos embedding width must be divisible by 4");
        let quarter = dim / 4;
        let mut data = vec![0.0; side * side * dim];
        for r in 0..side {
            for c in 0..side {
                let base = (r * side + c) * dim;
                for (half, pos) in [(0, r as f64), (1, c as f64)] {
                    for i in 0..quarter {
                        let omega = 1.0 / 10000f64.powf(i as f64 / quarter as f64);
                        data[base + half * 2 * quarter + i] = (pos * omega).sin();
                        data[base + half * 2 * quarter + quarter + i] = (pos * omega).cos();
                    }
                }
            }
        }
        Self { side, dim, data }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn node(&self, row: usize, col: usize) -> &[f64] {
        let base = (row * self.side + col) * self.dim;
        &self.data[base..base + self.dim]
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
    }
}

/// Continuous `(u, v)` grid coordinates per token and plane.
#[derive(Clone, Debug, PartialEq)]
pub struct PlanarCoords {
    pub side: usize,
    /// `coords[token][plane] = [u, v]`, each in `[0, G−1]`.
    pub coords: Vec<Vec<[f64; 2]>>,
}

/// Orthographic projection of cube coordinates onto every face in `planes`.
pub fn project_to_planes(coords: &[Point3], planes: &VirtualPlaneSet, side: usize) -> PlanarCoords {
    let span = side.saturating_sub(1) as f64;
    let to_grid = |s: f64| ((s.clamp(-1.0, 1.0) + 1.0) * 0.5 * span).clamp(0.0, span);
    let coords = coords
        .iter()
        .map(|p| {
            let p = p.map(|x| x.clamp(-1.0, 1.0));
            planes
                .faces()
                .iter()
                .map(|f| {
                    let (ua, va) = f.basis();
                    let u = ua[0] * p[0] + ua[1] * p[1] + ua[2] * p[2];
                    let v = va[0] * p[0] + va[1] * p[1] + va[2] * p[2];
                    [to_grid(u), to_grid(v)]
                })
                .collect()
        })
        .collect();
    PlanarCoords { side, coords }
}

/// Bilinear interpolation of the grid at continuous `(u, v)`.
pub fn lookup_pe_at(grid: &PeGrid, uv: [f64; 2]) -> Vec<f64> {
    let g = grid.side;
    let (r0, fr) = split(uv[0], g);
    let (c0, fc) = split(uv[1], g);
    let r1 = (r0 + 1).min(g - 1);
    let c1 = (c0 + 1).min(g - 1);
    let w00 = (1.0 - fr) * (1.0 - fc);
    let w01 = (1.0 - fr) * fc;
    let w10 = fr * (1.0 - fc);
    let w11 = fr * fc;
    let (a, b, c, d) = (grid.node(r0, c0), grid.node(r0, c1), grid.node(r1, c0), grid.node(r1, c1));
    (0..grid.dim).map(|i| w00 * a[i] + w01 * b[i] + w10 * c[i] + w11 * d[i]).collect()
}

fn split(x: f64, side: usize) -> (usize, f64) {
    if side == 1 {
        return (0, 0.0);
    }
    let x = x.clamp(0.0, (side - 1) as f64);
    let i = (x.floor() as usize).min(side - 2);
    (i, x - i as f64)
}

/// One embedding per `(token, plane)`: `out[token][plane]`.
pub fn lookup_pe(grid: &PeGrid, uv: &PlanarCoords) -> Vec<Vec<Vec<f64>>> {
    uv.coords.iter().map(|planes| planes.iter().map(|&c| lookup_pe_at(grid, c)).collect()).collect()
}

/// `k×D` matrix of plane-averaged positional embeddings.
pub fn lift_positional_embedding(coords: &[Point3], planes: &VirtualPlaneSet, grid: &PeGrid) -> Mat {
    let uv = project_to_planes(coords, planes, grid.side);
    let n = planes.len() as f64;
    let mut out = Mat::zeros(coords.len(), grid.dim);
    for (t, per_plane) in uv.coords.iter().enumerate() {
        let row = out.row_mut(t);
        for &c in per_plane {
            for (o, x) in row.iter_mut().zip(lookup_pe_at(grid, c)) {
                *o += x;
            }
        }
        for o in row.iter_mut() {
            *o /= n;
        }
    }
    out
}
