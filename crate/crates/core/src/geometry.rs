//! Geometric kernels: RGBD back-projection, unit-cube normalization,
//! farthest-point sampling and k-nearest-neighbour grouping.
//!
//! Everything here is a pure function of its inputs. Ties in FPS and kNN
//! always resolve to the smallest index so results are bitwise stable.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Execution;

pub type Point3 = [f64; 3];

/// Smallest admissible cube scale; degenerate clouds clamp to it.
pub const CUBE_EPS: f64 = 1e-12;

pub const DEFAULT_VALID_MIN: f64 = 0.01;
pub const DEFAULT_VALID_MAX: f64 = 10.0;

/// XYZ + RGB points. Coordinates in metres, colors in `[0, 1]`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<Point3>,
    pub colors: Vec<Point3>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>, colors: Vec<Point3>) -> Result<Self> {
        let pc = Self { points, colors };
        pc.validate()?;
        Ok(pc)
    }

    /// A cloud with all colors zero.
    pub fn uncolored(points: Vec<Point3>) -> Self {
        let colors = vec![[0.0; 3]; points.len()];
        Self { points, colors }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(Error::EmptyCloud("cloud has no points".into()));
        }
        if self.points.len() != self.colors.len() {
            return Err(Error::Shape(format!("{} points but {} colors", self.points.len(), self.colors.len())));
        }
        if let Some(i) = self.points.iter().position(|p| p.iter().any(|x| !x.is_finite())) {
            return Err(Error::NonFinite(format!("point {i}")));
        }
        if let Some(i) = self.colors.iter().position(|c| c.iter().any(|x| !(0.0..=1.0).contains(x))) {
            return Err(Error::InvalidArgument(format!("color {i} outside [0,1]")));
        }
        Ok(())
    }

    pub fn select(&self, indices: &[usize]) -> PointCloud {
        PointCloud {
            points: indices.iter().map(|&i| self.points[i]).collect(),
            colors: indices.iter().map(|&i| self.colors[i]).collect(),
        }
    }
}

/// Row-major image; pixel `(u, v)` lives at `v * width + u`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image<T> {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<T>,
}

pub type RgbImage = Image<[f64; 3]>;
pub type DepthMap = Image<f64>;

impl<T: Clone> Image<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Self { width, height, pixels: vec![value; width * height] }
    }
}

impl<T> Image<T> {
    pub fn from_pixels(width: usize, height: usize, pixels: Vec<T>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::Shape(format!("{}x{} image with {} pixels", width, height, pixels.len())));
        }
        Ok(Self { width, height, pixels })
    }

    #[inline]
    pub fn at(&self, u: usize, v: usize) -> &T {
        &self.pixels[v * self.width + u]
    }

    #[inline]
    pub fn at_mut(&mut self, u: usize, v: usize) -> &mut T {
        &mut self.pixels[v * self.width + u]
    }
}

/// Pinhole camera. `extrinsic` maps camera coordinates (x right, y down,
/// z forward) to world coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub extrinsic: [[f64; 4]; 4],
    pub width: usize,
    pub height: usize,
}

pub const IDENTITY4: [[f64; 4]; 4] =
    [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]];

impl CameraModel {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, extrinsic: [[f64; 4]; 4], width: usize, height: usize) -> Result<Self> {
        let cam = Self { fx, fy, cx, cy, extrinsic, width, height };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `eye` looking at `target`, with `up` resolving roll.
    pub fn look_at(eye: Point3, target: Point3, up: Point3, fx: f64, width: usize, height: usize) -> Result<Self> {
        let z = normalize(sub(target, eye));
        let x = normalize(cross(z, up));
        let y = cross(z, x);
        let extrinsic = [
            [x[0], y[0], z[0], eye[0]],
            [x[1], y[1], z[1], eye[1]],
            [x[2], y[2], z[2], eye[2]],
            [0.0, 0.0, 0.0, 1.0],
        ];
        let cx = (width as f64 - 1.0) / 2.0;
        let cy = (height as f64 - 1.0) / 2.0;
        Self::new(fx, fx, cx, cy, extrinsic, width, height)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidArgument("focal lengths must be positive".into()));
        }
        let r = self.rotation();
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > 1e-6 {
                    return Err(Error::InvalidArgument("extrinsic rotation is not orthonormal".into()));
                }
            }
        }
        let det = r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1]) - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0]);
        if (det - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidArgument(format!("extrinsic rotation has determinant {det}")));
        }
        Ok(())
    }

    fn rotation(&self) -> [[f64; 3]; 3] {
        let e = &self.extrinsic;
        [[e[0][0], e[0][1], e[0][2]], [e[1][0], e[1][1], e[1][2]], [e[2][0], e[2][1], e[2][2]]]
    }

    pub fn camera_to_world(&self, p: Point3) -> Point3 {
        let e = &self.extrinsic;
        let mut out = [0.0; 3];
        for (i, o) in out.iter_mut().enumerate() {
            *o = e[i][0] * p[0] + e[i][1] * p[1] + e[i][2] * p[2] + e[i][3];
        }
        out
    }

    pub fn world_to_camera(&self, p: Point3) -> Point3 {
        let e = &self.extrinsic;
        let d = [p[0] - e[0][3], p[1] - e[1][3], p[2] - e[2][3]];
        let mut out = [0.0; 3];
        for (j, o) in out.iter_mut().enumerate() {
            *o = e[0][j] * d[0] + e[1][j] * d[1] + e[2][j] * d[2];
        }
        out
    }

    /// Pixel `(u, v)` at depth `d` to world coordinates.
    pub fn unproject(&self, u: f64, v: f64, d: f64) -> Point3 {
        self.camera_to_world([(u - self.cx) * d / self.fx, (v - self.cy) * d / self.fy, d])
    }

    /// World point to continuous pixel coordinates and depth.
    pub fn project(&self, p: Point3) -> (f64, f64, f64) {
        let c = self.world_to_camera(p);
        (self.fx * c[0] / c[2] + self.cx, self.fy * c[1] / c[2] + self.cy, c[2])
    }

    /// Ray through pixel `(u, v)`: origin and a world direction with unit camera depth.
    pub fn ray(&self, u: f64, v: f64) -> (Point3, Point3) {
        let origin = [self.extrinsic[0][3], self.extrinsic[1][3], self.extrinsic[2][3]];
        let p = self.unproject(u, v, 1.0);
        (origin, sub(p, origin))
    }
}

/// One point per pixel whose depth lies in `[valid_min, valid_max]`.
pub fn backproject_rgbd(
    image: &RgbImage,
    depth: &DepthMap,
    camera: &CameraModel,
    valid_min: f64,
    valid_max: f64,
) -> Result<PointCloud> {
    if image.width != depth.width || image.height != depth.height {
        return Err(Error::Shape(format!(
            "image {}x{} vs depth {}x{}",
            image.width, image.height, depth.width, depth.height
        )));
    }
    if !(valid_min < valid_max) {
        return Err(Error::InvalidArgument(format!("valid range [{valid_min}, {valid_max}] is empty")));
    }
    let mut points = Vec::new();
    let mut colors = Vec::new();
    for v in 0..depth.height {
        for u in 0..depth.width {
            let d = *depth.at(u, v);
            if !d.is_finite() || d < valid_min || d > valid_max {
                continue;
            }
            points.push(camera.unproject(u as f64, v as f64, d));
            colors.push(*image.at(u, v));
        }
    }
    if points.is_empty() {
        return Err(Error::EmptyCloud("no pixel has a valid depth".into()));
    }
    Ok(PointCloud { points, colors })
}

/// Isotropic normalization frame: `(p − center) / scale`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CubeFrame {
    pub center: Point3,
    pub scale: f64,
}

impl CubeFrame {
    /// Fixed frame for an axis-aligned cubic workspace.
    pub fn workspace(center: Point3, half_extent: f64) -> Self {
        Self { center, scale: half_extent.max(CUBE_EPS) }
    }

    pub fn apply(&self, p: Point3) -> Point3 {
        [(p[0] - self.center[0]) / self.scale, (p[1] - self.center[1]) / self.scale, (p[2] - self.center[2]) / self.scale]
    }

    pub fn invert(&self, q: Point3) -> Point3 {
        [q[0] * self.scale + self.center[0], q[1] * self.scale + self.center[1], q[2] * self.scale + self.center[2]]
    }

    /// Applies the frame and clamps into `[−1, 1]³`.
    pub fn apply_clamped(&self, p: Point3) -> Point3 {
        self.apply(p).map(|x| x.clamp(-1.0, 1.0))
    }

    pub fn apply_cloud(&self, pc: &PointCloud) -> PointCloud {
        PointCloud { points: pc.points.iter().map(|&p| self.apply_clamped(p)).collect(), colors: pc.colors.clone() }
    }
}

/// Centers on the centroid and scales by the largest per-axis deviation.
pub fn normalize_to_cube(pc: &PointCloud) -> Result<(PointCloud, CubeFrame)> {
    if pc.is_empty() {
        return Err(Error::EmptyCloud("cannot normalize an empty cloud".into()));
    }
    let n = pc.len() as f64;
    let mut center = [0.0; 3];
    for p in &pc.points {
        for k in 0..3 {
            center[k] += p[k];
        }
    }
    for c in center.iter_mut() {
        *c /= n;
    }
    let mut scale: f64 = 0.0;
    for p in &pc.points {
        for k in 0..3 {
            scale = scale.max((p[k] - center[k]).abs());
        }
    }
    let frame = CubeFrame { center, scale: scale.max(CUBE_EPS) };
    let points = pc.points.iter().map(|&p| frame.apply(p)).collect();
    Ok((PointCloud { points, colors: pc.colors.clone() }, frame))
}

#[inline]
pub fn dist2(a: &Point3, b: &Point3) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Greedy farthest-point sampling starting from `seed mod N`.
pub fn farthest_point_sample(points: &[Point3], m: usize, seed: u64) -> Result<Vec<usize>> {
    let n = points.len();
    if m == 0 {
        return Err(Error::InvalidArgument("cannot sample zero points".into()));
    }
    if m > n {
        return Err(Error::InvalidArgument(format!("cannot sample {m} of {n} points")));
    }
    let first = (seed % n as u64) as usize;
    let mut selected = Vec::with_capacity(m);
    let mut taken = vec![false; n];
    let mut min_d: Vec<f64> = points.iter().map(|p| dist2(p, &points[first])).collect();
    selected.push(first);
    taken[first] = true;
    while selected.len() < m {
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for (i, &d) in min_d.iter().enumerate() {
            if !taken[i] && d > best_d {
                best = i;
                best_d = d;
            }
        }
        selected.push(best);
        taken[best] = true;
        let pb = points[best];
        for (d, p) in min_d.iter_mut().zip(points) {
            let nd = dist2(p, &pb);
            if nd < *d {
                *d = nd;
            }
        }
    }
    Ok(selected)
}

/// Row `i` holds the `k` nearest points to `centers[i]`, ascending by distance.
pub fn knn_group(centers: &[Point3], points: &[Point3], k: usize) -> Result<Vec<Vec<usize>>> {
    knn_group_with(Execution::Sequential, centers, points, k)
}

pub fn knn_group_with(exec: Execution, centers: &[Point3], points: &[Point3], k: usize) -> Result<Vec<Vec<usize>>> {
    if k == 0 || k > points.len() {
        return Err(Error::InvalidArgument(format!("k = {k} with {} points", points.len())));
    }
    Ok(exec.map(centers, |c| knn_row(c, points, k)))
}

fn knn_row(center: &Point3, points: &[Point3], k: usize) -> Vec<usize> {
    let mut cand: Vec<(f64, usize)> = points.iter().enumerate().map(|(i, p)| (dist2(p, center), i)).collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < cand.len() {
        cand.select_nth_unstable_by(k - 1, cmp);
        cand.truncate(k);
    }
    cand.sort_unstable_by(cmp);
    cand.into_iter().map(|(_, i)| i).collect()
}

/// Exactly `n` points: FPS when the cloud is large enough, round-robin padding otherwise.
pub fn downsample_to(pc: &PointCloud, n: usize, seed: u64) -> Result<PointCloud> {
    if pc.is_empty() {
        return Err(Error::EmptyCloud("cannot downsample an empty cloud".into()));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("target count must be at least 1".into()));
    }
    let idx: Vec<usize> =
        if pc.len() >= n { farthest_point_sample(&pc.points, n, seed)? } else { (0..n).map(|i| i % pc.len()).collect() };
    Ok(pc.select(&idx))
}

pub(crate) fn sub(a: Point3, b: Point3) -> Point3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn cross(a: Point3, b: Point3) -> Point3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

pub(crate) fn norm(a: Point3) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

pub(crate) fn normalize(a: Point3) -> Point3 {
    let n = norm(a);
    [a[0] / n, a[1] / n, a[2] / n]
}
