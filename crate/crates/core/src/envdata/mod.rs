//! Procedural reach environment, scripted demonstrations and pretraining renders.

pub mod dataset;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{cross, downsample_to, norm, normalize, sub, DepthMap, Image, Point3, PointCloud, RgbImage};
use crate::nn::to_f32_exact;
use crate::policy::{Pose7DoF, RobotState};

pub use dataset::{read_dataset, write_dataset, Records};

pub const WORKSPACE_HALF: f64 = 0.5;
pub const TARGET_COLOR: Point3 = [0.85, 0.1, 0.1];
const DISTRACTOR_COLORS: [Point3; 4] = [[0.1, 0.7, 0.2], [0.15, 0.3, 0.85], [0.85, 0.8, 0.15], [0.9, 0.9, 0.9]];
const LIGHT: Point3 = [0.25, -0.45, 0.86];
pub const REACH_TASK: &str = "reach";
pub const REACH_TEXT: &str = "reach the red ball";
pub const JOINTS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    /// Side of the square render used for point-cloud observations.
    pub obs_resolution: usize,
    /// Side of the square render stored in pretraining records.
    pub pretrain_resolution: usize,
    /// Width of the orthographic view in meters.
    pub view_extent: f64,
    pub obs_points: usize,
    pub blur_radius: usize,
    pub max_steps: usize,
    pub success_radius: f64,
    pub home: Point3,
    pub min_clusters: usize,
    pub max_clusters: usize,
    pub radius_range: [f64; 2],
    pub centroid_range: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            obs_resolution: 128,
            pretrain_resolution: 112,
            view_extent: 1.0,
            obs_points: 256,
            blur_radius: 2,
            max_steps: 4,
            success_radius: 0.02,
            home: [0.0, 0.0, 0.4],
            min_clusters: 2,
            max_clusters: 4,
            radius_range: [0.04, 0.07],
            centroid_range: 0.3,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.obs_resolution < 8 || self.pretrain_resolution < 8 {
            return bad("render resolutions must be at least 8");
        }
        if self.obs_points == 0 {
            return bad("obs_points must be positive");
        }
        if self.max_steps < 2 {
            return bad("max_steps must allow the two-step demonstration");
        }
        if !(self.success_radius > 0.0) || !(self.view_extent > 0.0) {
            return bad("success_radius and view_extent must be positive");
        }
        if self.min_clusters < 1 || self.min_clusters > self.max_clusters || self.max_clusters > 1 + DISTRACTOR_COLORS.len() {
            return bad("cluster count range must lie in 1..=5");
        }
        let [r0, r1] = self.radius_range;
        if !(r0 > 0.0 && r0 <= r1) || self.centroid_range + r1 > WORKSPACE_HALF {
            return bad("cluster radii and centroid range must fit the workspace");
        }
        if self.home.iter().any(|x| x.abs() > WORKSPACE_HALF) {
            return bad("home position outside the workspace");
        }
        Ok(())
    }
}

/// Sphere resting on the table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub centroid: Point3,
    pub radius: f64,
    pub color: Point3,
    /// Pixels of this cluster in the observation render.
    pub points: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub clusters: Vec<Cluster>,
    pub target: usize,
    /// Half side of the square table at `z = 0`.
    pub table_extent: f64,
    pub seed: u64,
}

impl SyntheticScene {
    pub fn new(clusters: Vec<Cluster>, target: usize, seed: u64) -> Result<Self> {
        let s = Self { clusters, target, table_extent: WORKSPACE_HALF, seed };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.target >= self.clusters.len() {
            return Err(Error::InvalidArgument(format!("target {} of {} clusters", self.target, self.clusters.len())));
        }
        for (i, c) in self.clusters.iter().enumerate() {
            if !(c.radius > 0.0) || c.centroid.iter().any(|x| !(x.abs() <= WORKSPACE_HALF)) {
                return Err(Error::InvalidArgument(format!("cluster {i} outside the workspace or with radius {}", c.radius)));
            }
        }
        Ok(())
    }

    pub fn target_centroid(&self) -> Point3 {
        self.clusters[self.target].centroid
    }
}

/// Orthographic camera: parallel rays along `forward` from an image plane.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrthoCamera {
    pub plane_center: Point3,
    pub right: Point3,
    pub down: Point3,
    pub forward: Point3,
    pub pixel_size: f64,
    pub width: usize,
    pub height: usize,
}

impl OrthoCamera {
    /// Oblique view of the table from the `−y` side.
    pub fn desk(resolution: usize, extent: f64) -> Self {
        let look = [0.0, 0.0, 0.05];
        let forward = normalize([0.0, 0.7, -1.0]);
        let right = [1.0, 0.0, 0.0];
        let down = cross(forward, right);
        let plane_center = sub(look, forward.map(|x| 1.2 * x));
        Self { plane_center, right, down, forward, pixel_size: extent / resolution as f64, width: resolution, height: resolution }
    }

    fn offsets(&self, u: f64, v: f64) -> (f64, f64) {
        let cu = (self.width as f64 - 1.0) / 2.0;
        let cv = (self.height as f64 - 1.0) / 2.0;
        ((u - cu) * self.pixel_size, (v - cv) * self.pixel_size)
    }

    pub fn ray_origin(&self, u: f64, v: f64) -> Point3 {
        let (a, b) = self.offsets(u, v);
        std::array::from_fn(|i| self.plane_center[i] + a * self.right[i] + b * self.down[i])
    }

    /// Pixel `(u, v)` at depth `d` along the view direction.
    pub fn unproject(&self, u: f64, v: f64, d: f64) -> Point3 {
        let o = self.ray_origin(u, v);
        std::array::from_fn(|i| o[i] + d * self.forward[i])
    }

    /// World point to continuous pixel coordinates and depth.
    pub fn project(&self, p: Point3) -> (f64, f64, f64) {
        let q = sub(p, self.plane_center);
        let dot = |a: Point3| a[0] * q[0] + a[1] * q[1] + a[2] * q[2];
        let cu = (self.width as f64 - 1.0) / 2.0;
        let cv = (self.height as f64 - 1.0) / 2.0;
        (dot(self.right) / self.pixel_size + cu, dot(self.down) / self.pixel_size + cv, dot(self.forward))
    }

    /// One point per pixel with positive depth.
    pub fn backproject(&self, image: &RgbImage, depth: &DepthMap) -> Result<PointCloud> {
        if (image.width, image.height) != (depth.width, depth.height) || (depth.width, depth.height) != (self.width, self.height) {
            return Err(Error::Shape("image, depth and camera sizes differ".into()));
        }
        let mut points = Vec::new();
        let mut colors = Vec::new();
        for v in 0..self.height {
            for u in 0..self.width {
                let d = *depth.at(u, v);
                if d > 0.0 {
                    points.push(self.unproject(u as f64, v as f64, d));
                    colors.push(*image.at(u, v));
                }
            }
        }
        if points.is_empty() {
            return Err(Error::EmptyCloud("render has no valid depth".into()));
        }
        PointCloud::new(points, colors)
    }
}

/// Ray-cast RGB, depth (0 where nothing is hit) and the per-pixel cluster id.
pub struct Render {
    pub image: RgbImage,
    pub depth: DepthMap,
    pub hit: Image<Option<usize>>,
}

pub fn render(scene: &SyntheticScene, cam: &OrthoCamera) -> Render {
    let (w, h) = (cam.width, cam.height);
    let mut image = RgbImage::filled(w, h, [0.0; 3]);
    let mut depth = DepthMap::filled(w, h, 0.0);
    let mut hit = Image::filled(w, h, None);
    let f = cam.forward;
    for v in 0..h {
        for u in 0..w {
            let o = cam.ray_origin(u as f64, v as f64);
            let mut best: Option<(f64, Option<usize>)> = None;
            for (i, c) in scene.clusters.iter().enumerate() {
                let oc = sub(o, c.centroid);
                let b = f[0] * oc[0] + f[1] * oc[1] + f[2] * oc[2];
                let disc = b * b - (oc[0] * oc[0] + oc[1] * oc[1] + oc[2] * oc[2] - c.radius * c.radius);
                if disc < 0.0 {
                    continue;
                }
                let t = -b - disc.sqrt();
                if t > 0.0 && best.map_or(true, |(bt, _)| t < bt) {
                    best = Some((t, Some(i)));
                }
            }
            if f[2] < 0.0 {
                let t = -o[2] / f[2];
                let p = [o[0] + t * f[0], o[1] + t * f[1], 0.0];
                let on_table = p[0].abs() <= scene.table_extent && p[1].abs() <= scene.table_extent;
                if t > 0.0 && on_table && best.map_or(true, |(bt, _)| t < bt) {
                    best = Some((t, None));
                }
            }
            let Some((t, id)) = best else { continue };
            let p: Point3 = std::array::from_fn(|k| o[k] + t * f[k]);
            let color = match id {
                Some(i) => {
                    let c = &scene.clusters[i];
                    let n = normalize(sub(p, c.centroid));
                    let shade = 0.55 + 0.45 * (n[0] * LIGHT[0] + n[1] * LIGHT[1] + n[2] * LIGHT[2]).max(0.0);
                    c.color.map(|x| x * shade)
                }
                None => {
                    let checker = ((p[0] / 0.1).floor() as i64 + (p[1] / 0.1).floor() as i64).rem_euclid(2);
                    [if checker == 0 { 0.45 } else { 0.55 }; 3]
                }
            };
            *image.at_mut(u, v) = color.map(to_f32_exact);
            *depth.at_mut(u, v) = to_f32_exact(t);
            *hit.at_mut(u, v) = id;
        }
    }
    Render { image, depth, hit }
}

/// Box-blurred binary mask of the target cluster.
pub fn target_attention(hit: &Image<Option<usize>>, target: usize, radius: usize) -> Image<f64> {
    let (w, h) = (hit.width, hit.height);
    let r = radius as isize;
    let area = ((2 * r + 1) * (2 * r + 1)) as f64;
    let mut out = Image::filled(w, h, 0.0);
    for v in 0..h as isize {
        for u in 0..w as isize {
            let mut count = 0usize;
            for dv in -r..=r {
                for du in -r..=r {
                    let (x, y) = (u + du, v + dv);
                    if x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h && *hit.at(x as usize, y as usize) == Some(target) {
                        count += 1;
                    }
                }
            }
            *out.at_mut(u as usize, v as usize) = to_f32_exact(count as f64 / area);
        }
    }
    out
}

/// Image, depth and attention for masked depth pretraining.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainRecord {
    pub image: RgbImage,
    /// Meters along the view direction, 0 where invalid.
    pub depth: DepthMap,
    pub attention: Image<f64>,
    pub text: String,
    pub seed: u64,
}

impl PretrainRecord {
    pub fn validate(&self) -> Result<()> {
        let (w, h) = (self.image.width, self.image.height);
        if (self.depth.width, self.depth.height) != (w, h) || (self.attention.width, self.attention.height) != (w, h) {
            return Err(Error::Shape("pretrain record image, depth and attention sizes differ".into()));
        }
        if self.depth.pixels.iter().any(|d| !(*d >= 0.0) || !d.is_finite()) {
            return Err(Error::InvalidArgument("depth must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Step {
    pub cloud: PointCloud,
    pub state: RobotState,
    pub action: Pose7DoF,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeRecord {
    pub steps: Vec<Step>,
    pub task: String,
    pub seed: u64,
}

impl EpisodeRecord {
    pub fn validate(&self) -> Result<()> {
        if self.steps.is_empty() {
            return Err(Error::InvalidArgument("episode has no steps".into()));
        }
        for (i, s) in self.steps.iter().enumerate() {
            s.cloud.validate()?;
            s.action.validate()?;
            if s.action.translation.iter().any(|x| x.abs() > WORKSPACE_HALF) {
                return Err(Error::InvalidArgument(format!("step {i} action outside the workspace")));
            }
            if s.state.to_vec().iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("step {i} robot state")));
            }
        }
        Ok(())
    }
}

/// Rotation label: unit direction from `home` to `target`, scaled by π/4.
pub fn demo_rotation(home: Point3, target: Point3) -> Point3 {
    let d = sub(target, home);
    let n = norm(d);
    if n == 0.0 {
        return [0.0, 0.0, std::f64::consts::FRAC_PI_4];
    }
    d.map(|x| to_f32_exact(x / n * std::f64::consts::FRAC_PI_4))
}

pub fn home_state(cfg: &EnvConfig) -> RobotState {
    let home = cfg.home.map(to_f32_exact);
    RobotState {
        ee: Pose7DoF::new(home, [0.0; 3], 0.0),
        joint_positions: home.to_vec(),
        joint_velocities: vec![0.0; JOINTS],
    }
}

/// Scene with non-overlapping silhouettes in the desk view, fully determined by `seed`.
pub fn sample_scene(seed: u64, cfg: &EnvConfig) -> SyntheticScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cam = OrthoCamera::desk(cfg.obs_resolution, cfg.view_extent);
    let n = rng.gen_range(cfg.min_clusters..=cfg.max_clusters);
    let target = rng.gen_range(0..n);
    let mut palette = DISTRACTOR_COLORS.to_vec();
    palette.shuffle(&mut rng);
    let mut clusters: Vec<Cluster> = Vec::with_capacity(n);
    while clusters.len() < n {
        let radius = to_f32_exact(rng.gen_range(cfg.radius_range[0]..=cfg.radius_range[1]));
        let r = cfg.centroid_range;
        let centroid = [to_f32_exact(rng.gen_range(-r..=r)), to_f32_exact(rng.gen_range(-r..=r)), radius];
        let (u, v, _) = cam.project(centroid);
        let clear = clusters.iter().all(|c| {
            let (cu, cv, _) = cam.project(c.centroid);
            let gap = ((u - cu).powi(2) + (v - cv).powi(2)).sqrt() * cam.pixel_size;
            gap > radius + c.radius + 0.02
        });
        if clear {
            let color = if clusters.len() == target { TARGET_COLOR } else { palette.pop().expect("palette covers max_clusters") };
            clusters.push(Cluster { centroid, radius, color, points: 0 });
        }
    }
    SyntheticScene { clusters, target, table_extent: WORKSPACE_HALF, seed }
}

/// Table-cropped, downsampled observation cloud and per-cluster pixel counts.
pub fn observe(scene: &SyntheticScene, cfg: &EnvConfig) -> Result<(PointCloud, Vec<usize>)> {
    let cam = OrthoCamera::desk(cfg.obs_resolution, cfg.view_extent);
    let r = render(scene, &cam);
    let mut counts = vec![0; scene.clusters.len()];
    for id in r.hit.pixels.iter().flatten() {
        counts[*id] += 1;
    }
    let full = cam.backproject(&r.image, &r.depth)?;
    let keep: Vec<usize> = (0..full.len())
        .filter(|&i| full.points[i][2] > 0.004 && full.points[i].iter().all(|x| x.abs() <= WORKSPACE_HALF))
        .collect();
    if keep.is_empty() {
        return Err(Error::EmptyCloud("no object points above the table".into()));
    }
    let mut cloud = downsample_to(&full.select(&keep), cfg.obs_points, scene.seed)?;
    for p in cloud.points.iter_mut().chain(cloud.colors.iter_mut()) {
        *p = p.map(to_f32_exact);
    }
    Ok((cloud, counts))
}

/// Two-step scripted demonstration: move to the target, then close.
pub fn demonstrate(scene: &SyntheticScene, cloud: &PointCloud, cfg: &EnvConfig) -> EpisodeRecord {
    let c = scene.target_centroid();
    let rot = demo_rotation(cfg.home, c);
    let s0 = home_state(cfg);
    let g0 = if norm(sub(cfg.home, c)) <= cfg.success_radius { 1.0 } else { 0.0 };
    let a0 = Pose7DoF::new(c, rot, g0);
    let s1 = next_state(&s0, &a0);
    let a1 = Pose7DoF::new(c, rot, 1.0);
    EpisodeRecord {
        steps: vec![
            Step { cloud: cloud.clone(), state: s0, action: a0 },
            Step { cloud: cloud.clone(), state: s1, action: a1 },
        ],
        task: REACH_TASK.to_string(),
        seed: scene.seed,
    }
}

fn next_state(prev: &RobotState, action: &Pose7DoF) -> RobotState {
    let t = action.translation;
    let p = prev.ee.translation;
    RobotState {
        ee: Pose7DoF::new(t, action.rotation, action.gripper),
        joint_positions: t.to_vec(),
        joint_velocities: (0..JOINTS).map(|i| to_f32_exact(t[i] - p[i])).collect(),
    }
}

pub fn pretrain_render(scene: &SyntheticScene, cfg: &EnvConfig) -> PretrainRecord {
    let cam = OrthoCamera::desk(cfg.pretrain_resolution, cfg.view_extent);
    let r = render(scene, &cam);
    let attention = target_attention(&r.hit, scene.target, cfg.blur_radius);
    PretrainRecord { image: r.image, depth: r.depth, attention, text: REACH_TEXT.to_string(), seed: scene.seed }
}

/// Scene, its demonstration and a pretraining render, all pure functions of `seed`.
pub fn gen_reach_task(seed: u64, cfg: &EnvConfig) -> Result<(SyntheticScene, EpisodeRecord, PretrainRecord)> {
    cfg.validate()?;
    let mut scene = sample_scene(seed, cfg);
    let (cloud, counts) = observe(&scene, cfg)?;
    for (c, n) in scene.clusters.iter_mut().zip(counts) {
        c.points = n;
    }
    let episode = demonstrate(&scene, &cloud, cfg);
    let record = pretrain_render(&scene, cfg);
    Ok((scene, episode, record))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Observation {
    pub cloud: PointCloud,
    pub state: RobotState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub observation: Observation,
    pub done: bool,
    pub success: bool,
    pub clipped: bool,
}

/// Teleporting reach environment around one scene.
pub struct ReachEnv {
    pub scene: SyntheticScene,
    pub cfg: EnvConfig,
    cloud: PointCloud,
    state: RobotState,
    steps: usize,
    /// Actions whose translation had to be clipped into the workspace.
    pub clip_events: usize,
}

impl ReachEnv {
    pub fn new(mut scene: SyntheticScene, cfg: EnvConfig) -> Result<Self> {
        cfg.validate()?;
        scene.validate()?;
        let (cloud, counts) = observe(&scene, &cfg)?;
        for (c, n) in scene.clusters.iter_mut().zip(counts) {
            c.points = n;
        }
        let state = home_state(&cfg);
        Ok(Self { scene, cfg, cloud, state, steps: 0, clip_events: 0 })
    }

    pub fn from_seed(seed: u64, cfg: &EnvConfig) -> Result<Self> {
        Self::new(sample_scene(seed, cfg), cfg.clone())
    }

    pub fn observation(&self) -> Observation {
        Observation { cloud: self.cloud.clone(), state: self.state.clone() }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Gripper state that the demonstration ends with (closed).
    pub fn terminal_gripper(&self) -> bool {
        true
    }

    pub fn is_success(&self, action: &Pose7DoF) -> bool {
        let d = norm(sub(action.translation, self.scene.target_centroid()));
        d <= self.cfg.success_radius && (action.gripper >= 0.5) == self.terminal_gripper()
    }

    pub fn step(&mut self, action: &Pose7DoF) -> Result<StepOutcome> {
        action.validate()?;
        if self.steps >= self.cfg.max_steps {
            return Err(Error::InvalidArgument("episode already finished".into()));
        }
        let mut a = *action;
        let mut clipped = false;
        for x in a.translation.iter_mut() {
            let c = x.clamp(-WORKSPACE_HALF, WORKSPACE_HALF);
            clipped |= c != *x;
            *x = c;
        }
        if clipped {
            self.clip_events += 1;
        }
        a.gripper = a.gripper.clamp(0.0, 1.0);
        self.steps += 1;
        let success = self.is_success(&a);
        self.state = next_state(&self.state, &a);
        let done = success || self.steps >= self.cfg.max_steps;
        Ok(StepOutcome { observation: self.observation(), done, success, clipped })
    }
}

pub fn env_step(env: &mut ReachEnv, action: &Pose7DoF) -> Result<StepOutcome> {
    env.step(action)
}

/// Maps observations to actions during rollouts. `scene` is privileged
/// information that only scripted controllers may read.
pub trait Controller: Sync {
    fn act(&self, scene: &SyntheticScene, obs: &Observation) -> Result<Pose7DoF>;
}

/// Replays the scripted demonstration policy.
pub struct OracleController {
    pub cfg: EnvConfig,
}

impl Controller for OracleController {
    fn act(&self, scene: &SyntheticScene, obs: &Observation) -> Result<Pose7DoF> {
        let c = scene.target_centroid();
        let near = norm(sub(obs.state.ee.translation, c)) <= self.cfg.success_radius;
        Ok(Pose7DoF::new(c, demo_rotation(self.cfg.home, c), if near { 1.0 } else { 0.0 }))
    }
}

/// Uniform actions over the workspace, seeded by the observation contents.
pub struct RandomController {
    pub seed: u64,
}

impl Controller for RandomController {
    fn act(&self, scene: &SyntheticScene, obs: &Observation) -> Result<Pose7DoF> {
        let salt = obs.state.ee.translation.iter().fold(scene.seed, |h, x| h.rotate_left(13) ^ x.to_bits());
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ salt);
        let h = WORKSPACE_HALF;
        let t = [rng.gen_range(-h..=h), rng.gen_range(-h..=h), rng.gen_range(-h..=h)];
        let r = [rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0), rng.gen_range(-1.0..=1.0)];
        Ok(Pose7DoF::new(t, r, rng.gen_range(0.0..=1.0)))
    }
}
