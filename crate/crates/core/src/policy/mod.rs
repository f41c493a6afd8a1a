//! Stage 2: 3D tokens with lifted positional embeddings through the frozen
//! encoder, fused with robot state, regressed to a 7-DoF pose.

mod pose;

pub use pose::{canonicalize_axis_angle, Pose7DoF, RobotState};

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, Var};
use crate::checkpoint::Checkpoint;
use crate::encoder::{init_adapters, init_encoder, is_adapter, is_base, pe_grid, Encoder2D, EncoderConfig, FOUNDATION_SEED};
use crate::envdata::{Controller, EnvConfig, EpisodeRecord, Observation, ReachEnv, SyntheticScene, JOINTS};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::geometry::{CubeFrame, Point3, PointCloud};
use crate::nn::{init_linear, normal_mat, GradBuffer, Graph, ParamStore, TrainMask};
use crate::optim::{Adam, OptimConfig, Schedule};
use crate::pe_lifting::{lift_positional_embedding, PeGrid, VirtualPlaneSet};
use crate::tokenizer3d::{self, init_tokenizer, TokenizerConfig, TokenizerPlan};
use crate::train::{batch_mean, mix_seed, Shuffler};

pub const HEAD_PREFIX: &str = "head.";
pub const STATE_PREFIX: &str = "state_embed.";
/// Trainable `k×D` token embedding table used instead of lifted embeddings.
pub const PE_TABLE: &str = "pe_table";
const BCE_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UpdateStrategy {
    /// Tokenizer, adapters, state embedding and head train; the base is frozen.
    Adapters,
    /// No adapters at all; the base stays frozen.
    None,
    /// Everything trains, base included.
    Full,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PeMode {
    /// Plane-averaged lookups into the frozen 2D grid.
    Lifted,
    /// Randomly initialized trainable `k×D` table indexed by token slot.
    Learnable,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ActionLossWeights {
    pub translation: f64,
    pub rotation: f64,
    pub gripper: f64,
}

impl Default for ActionLossWeights {
    fn default() -> Self {
        Self { translation: 1.0, rotation: 1.0, gripper: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyConfig {
    pub tokenizer: TokenizerConfig,
    pub planes: usize,
    pub pe_mode: PeMode,
    pub update: UpdateStrategy,
    pub head_hidden: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub weights: ActionLossWeights,
    pub optim: OptimConfig,
    /// Fixed normalization cube for point clouds and translations.
    pub workspace_center: Point3,
    pub workspace_half: f64,
    /// Half-width (meters) of the random horizontal world shift applied to
    /// each training sample; 0 disables it.
    pub augment_shift: f64,
    /// Largest random rotation (radians) about the vertical axis through
    /// the workspace center applied to each training sample; 0 disables it.
    pub augment_yaw: f64,
    /// Standard deviation (meters) of Gaussian noise added to the
    /// end-effector position in the training state, with the label kept.
    pub augment_state_noise: f64,
    pub execution: Execution,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            tokenizer: TokenizerConfig { point_xyz: true, ..TokenizerConfig::with_depth(2, 256, 64, 16, 32, &[32, 64]) },
            planes: 6,
            pe_mode: PeMode::Lifted,
            update: UpdateStrategy::Adapters,
            head_hidden: 256,
            steps: 3000,
            batch_size: 16,
            weights: ActionLossWeights { translation: 100.0, ..ActionLossWeights::default() },
            optim: OptimConfig { lr: 3e-3, schedule: Schedule::CosineWarmup, ..OptimConfig::default() },
            workspace_center: [0.0, 0.0, 0.0],
            workspace_half: 0.5,
            augment_shift: 0.1,
            augment_yaw: std::f64::consts::PI,
            augment_state_noise: 0.02,
            execution: Execution::default(),
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self, enc: &EncoderConfig) -> Result<()> {
        enc.validate()?;
        self.tokenizer.validate()?;
        VirtualPlaneSet::standard(self.planes).map_err(|e| Error::Config(e.to_string()))?;
        let bad = |m: String| Err(Error::Config(m));
        if self.tokenizer.output_dim != enc.width {
            return bad(format!("tokenizer output {} must equal encoder width {}", self.tokenizer.output_dim, enc.width));
        }
        if self.head_hidden == 0 || self.steps == 0 || self.batch_size == 0 {
            return bad("head_hidden, steps and batch_size must be positive".into());
        }
        if !(self.workspace_half > 0.0) {
            return bad("workspace_half must be positive".into());
        }
        if !(0.0..self.workspace_half).contains(&self.augment_shift) {
            return bad(format!("augment_shift must lie in [0, {})", self.workspace_half));
        }
        if !(0.0..self.workspace_half).contains(&self.augment_state_noise) {
            return bad(format!("augment_state_noise must lie in [0, {})", self.workspace_half));
        }
        if !(0.0..=std::f64::consts::PI).contains(&self.augment_yaw) {
            return bad("augment_yaw must lie in [0, π]".into());
        }
        if !(self.optim.lr > 0.0) {
            return bad("learning rate must be positive".into());
        }
        Ok(())
    }

    pub fn augments(&self) -> bool {
        self.augment_shift > 0.0 || self.augment_yaw > 0.0 || self.augment_state_noise > 0.0
    }

    pub fn frame(&self) -> CubeFrame {
        CubeFrame::workspace(self.workspace_center, self.workspace_half)
    }

    pub fn state_dim(&self) -> usize {
        7 + 2 * JOINTS
    }

    /// Names that receive updates under the configured strategy.
    pub fn is_trainable(&self, name: &str) -> bool {
        let always = name.starts_with(tokenizer3d::PREFIX)
            || name.starts_with(HEAD_PREFIX)
            || name.starts_with(STATE_PREFIX)
            || name == PE_TABLE;
        always
            || match self.update {
                UpdateStrategy::Adapters => is_adapter(name),
                UpdateStrategy::None => false,
                UpdateStrategy::Full => is_adapter(name) || (is_base(name) && name != "encoder.pos_embed"),
            }
    }
}

/// Fresh stage-2 parameters; base and adapters optionally restored from a stage-1 checkpoint.
pub fn init_policy_params(enc: &EncoderConfig, cfg: &PolicyConfig, seed: u64, stage1: Option<&Checkpoint>) -> Result<ParamStore> {
    cfg.validate(enc)?;
    let mut store = ParamStore::new();
    init_encoder(&mut store, enc, FOUNDATION_SEED);
    init_adapters(&mut store, enc, seed);
    if let Some(ck) = stage1 {
        ck.restore_into(&mut store, crate::encoder::BASE_PREFIX)?;
        ck.restore_into(&mut store, crate::encoder::ADAPTER_PREFIX)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x9011c7));
    init_tokenizer(&mut store, &cfg.tokenizer, &mut rng);
    let d = enc.width;
    init_linear(&mut store, &mut rng, "state_embed", cfg.state_dim(), d);
    init_linear(&mut store, &mut rng, "head.l0", 2 * d, cfg.head_hidden);
    init_linear(&mut store, &mut rng, "head.l1", cfg.head_hidden, cfg.head_hidden);
    init_linear(&mut store, &mut rng, "head.l2", cfg.head_hidden, 7);
    if cfg.pe_mode == PeMode::Learnable {
        store.insert(PE_TABLE, normal_mat(&mut rng, cfg.tokenizer.tokens(), d, 0.02));
    }
    Ok(store)
}

/// Geometry-only preprocessing of one observation: normalized cloud,
/// tokenizer grouping plan and (in lifted mode) positional embeddings.
#[derive(Clone, Debug)]
pub struct PreparedObs {
    pub plan: TokenizerPlan,
    pub colors: Vec<Point3>,
    pub pe: Option<Mat>,
    pub state: Mat,
}

pub fn prepare_observation(cloud: &PointCloud, state: &RobotState, cfg: &PolicyConfig, grid: &PeGrid) -> Result<PreparedObs> {
    cloud.validate()?;
    let mut sv = state.to_vec();
    if sv.len() != cfg.state_dim() {
        return Err(Error::Shape(format!("robot state has {} values, expected {}", sv.len(), cfg.state_dim())));
    }
    if sv.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("robot state".into()));
    }
    // The rotation loss is scale-free, so only the direction of a commanded
    // rotation is meaningful; the state sees it as a unit vector.
    let n = sv[3..6].iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        sv[3..6].iter_mut().for_each(|x| *x /= n);
    }
    let normalized = cfg.frame().apply_cloud(cloud);
    let points: Vec<Point3> = normalized.points.iter().map(|p| p.map(|x| x.clamp(-1.0, 1.0))).collect();
    let plan = TokenizerPlan::build(&points, &cfg.tokenizer, 0)?;
    let pe = match cfg.pe_mode {
        PeMode::Lifted => Some(lift_positional_embedding(&plan.centers, &VirtualPlaneSet::standard(cfg.planes)?, grid)),
        PeMode::Learnable => None,
    };
    Ok(PreparedObs { plan, colors: normalized.colors, pe, state: Mat::from_vec(1, sv.len(), sv) })
}

/// Horizontal rigid motion of the whole world, robot included: rotation by
/// `yaw` about the vertical axis through the workspace center, then a shift
/// by `delta` meters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WorldMotion {
    pub yaw: f64,
    pub delta: Point3,
    /// Extra displacement of the end effector alone, after the motion.
    pub ee_offset: Point3,
}

impl WorldMotion {
    /// Draws a motion with `|yaw| ≤ cfg.augment_yaw` and horizontal shift
    /// components within `±cfg.augment_shift`.
    pub fn sample(rng: &mut ChaCha8Rng, cfg: &PolicyConfig) -> Self {
        let (y, s) = (cfg.augment_yaw, cfg.augment_shift);
        let yaw = if y > 0.0 { rng.gen_range(-y..=y) } else { 0.0 };
        let delta = if s > 0.0 { [rng.gen_range(-s..=s), rng.gen_range(-s..=s), 0.0] } else { [0.0; 3] };
        let ee_offset = match Normal::new(0.0, cfg.augment_state_noise) {
            Ok(n) if cfg.augment_state_noise > 0.0 => [0; 3].map(|_| n.sample(rng)),
            _ => [0.0; 3],
        };
        Self { yaw, delta, ee_offset }
    }

    fn rotate(&self, v: Point3) -> Point3 {
        let (s, c) = self.yaw.sin_cos();
        [c * v[0] - s * v[1], s * v[0] + c * v[1], v[2]]
    }

    /// Moves a world-frame position.
    pub fn apply(&self, p: Point3, center: Point3) -> Point3 {
        let r = self.rotate([p[0] - center[0], p[1] - center[1], p[2] - center[2]]);
        [0, 1, 2].map(|a| r[a] + center[a] + self.delta[a])
    }

    /// Moves a pose label: translation as a position, rotation vector as a direction.
    pub fn apply_pose(&self, pose: &Pose7DoF, center: Point3) -> Pose7DoF {
        Pose7DoF { translation: self.apply(pose.translation, center), rotation: self.rotate(pose.rotation), gripper: pose.gripper }
    }
}

impl PreparedObs {
    /// The same observation after `motion`. Joint positions and velocities
    /// are Cartesian in the reach environment and move with the end
    /// effector. Grouping is invariant under rigid motions and is reused.
    pub fn moved(&self, motion: &WorldMotion, cfg: &PolicyConfig, grid: &PeGrid) -> Result<Self> {
        let h = cfg.workspace_half;
        let unit = WorldMotion { yaw: motion.yaw, delta: motion.delta.map(|x| x / h), ee_offset: [0.0; 3] };
        let mv = |p: &Point3| unit.apply(*p, [0.0; 3]).map(|x| x.clamp(-1.0, 1.0));
        let plan = self.plan.map_points(mv);
        let pe = match cfg.pe_mode {
            PeMode::Lifted => Some(lift_positional_embedding(&plan.centers, &VirtualPlaneSet::standard(cfg.planes)?, grid)),
            PeMode::Learnable => None,
        };
        let mut state = self.state.clone();
        let c = cfg.workspace_center;
        let block = |s: &Mat, at: usize| [s.data[at], s.data[at + 1], s.data[at + 2]];
        let mut put = |at: usize, v: Point3| state.data[at..at + 3].copy_from_slice(&v);
        let nudge = |p: Point3| [0, 1, 2].map(|a| p[a] + motion.ee_offset[a]);
        put(0, nudge(motion.apply(block(&self.state, 0), c)));
        put(3, motion.rotate(block(&self.state, 3)));
        if JOINTS == 3 {
            put(7, nudge(motion.apply(block(&self.state, 7), c)));
            put(10, nudge(motion.rotate(block(&self.state, 10))));
        }
        Ok(Self { plan, colors: self.colors.clone(), pe, state })
    }
}

/// Adds lifted (or learned) positional embeddings to the tokens and runs the encoder.
pub fn encode_pointcloud(g: &mut Graph, enc: &Encoder2D, cfg: &PolicyConfig, obs: &PreparedObs) -> Result<Var> {
    let feats = tokenizer3d::forward(g, &cfg.tokenizer, &obs.plan, &obs.colors);
    let pe = match (&obs.pe, cfg.pe_mode) {
        (Some(pe), PeMode::Lifted) => g.constant(pe.clone()),
        (_, PeMode::Learnable) => g.param(PE_TABLE),
        (None, PeMode::Lifted) => return Err(Error::InvalidArgument("observation prepared without lifted embeddings".into())),
    };
    enc.encode_point_tokens(g, feats, pe)
}

/// Head output on the tape: translation (world meters, 1×3), rotation (1×3)
/// and gripper probability (1×1).
pub struct ActionVars {
    pub translation: Var,
    pub rotation: Var,
    pub gripper: Var,
}

/// Mean-pools token features, appends the embedded state and applies the three-layer head.
pub fn predict_action(g: &mut Graph, cfg: &PolicyConfig, feats: Var, state: &Mat) -> ActionVars {
    let pooled = g.tape.mean_rows(feats);
    let s = g.constant(state.clone());
    let s = g.linear("state_embed", s);
    let x = g.tape.concat_cols(&[pooled, s]);
    let h = g.linear("head.l0", x);
    let h = g.tape.gelu(h);
    let h = g.linear("head.l1", h);
    let h = g.tape.gelu(h);
    let out = g.linear("head.l2", h);
    let frame = cfg.frame();
    let t = g.tape.slice_cols(out, 0, 3);
    let t = g.tape.scale(t, frame.scale);
    let center = g.constant(Mat::from_vec(1, 3, frame.center.to_vec()));
    let translation = g.tape.add(t, center);
    let rotation = g.tape.slice_cols(out, 3, 3);
    let z = g.tape.slice_cols(out, 6, 1);
    let gripper = g.tape.sigmoid(z);
    ActionVars { translation, rotation, gripper }
}

pub fn action_value(g: &Graph, a: &ActionVars) -> Pose7DoF {
    let t = g.value(a.translation);
    let r = g.value(a.rotation);
    Pose7DoF::new([t.data[0], t.data[1], t.data[2]], [r.data[0], r.data[1], r.data[2]], g.value(a.gripper).item())
}

pub struct ActionLoss {
    pub translation: Var,
    pub rotation: Var,
    pub gripper: Var,
    pub total: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionTerms {
    pub translation: f64,
    pub rotation: f64,
    pub gripper: f64,
    pub total: f64,
}

/// `MSE(T) + (1 − cos(R_pred, R_gt)) + BCE(G)`. The rotation term is
/// skipped (zero) when `R_gt = 0`; the gripper probability is clamped to `[ε, 1−ε]`.
pub fn explicit_loss(g: &mut Graph, pred: &ActionVars, gt: &Pose7DoF, w: ActionLossWeights) -> Result<ActionLoss> {
    gt.validate()?;
    let tg = g.constant(Mat::from_vec(1, 3, gt.translation.to_vec()));
    let d = g.tape.sub(pred.translation, tg);
    let d2 = g.tape.mul(d, d);
    let translation = g.tape.mean(d2);

    let ng2: f64 = gt.rotation.iter().map(|x| x * x).sum();
    let rotation = if ng2 > 0.0 {
        let rg = g.constant(Mat::from_vec(1, 3, gt.rotation.to_vec()));
        let dot = g.tape.mul(pred.rotation, rg);
        let dot = g.tape.sum(dot);
        let rp2 = g.tape.mul(pred.rotation, pred.rotation);
        let np2 = g.tape.sum(rp2);
        let prod = g.tape.scale(np2, ng2);
        let prod = g.tape.clamp(prod, 1e-300, f64::INFINITY);
        let den = g.tape.sqrt(prod);
        let cos = g.tape.div(dot, den);
        let neg = g.tape.scale(cos, -1.0);
        g.tape.add_scalar(neg, 1.0)
    } else {
        g.constant(Mat::scalar(0.0))
    };

    let p = g.tape.clamp(pred.gripper, BCE_EPS, 1.0 - BCE_EPS);
    let y = gt.gripper;
    let lp = g.tape.log(p);
    let omp = g.tape.scale(p, -1.0);
    let omp = g.tape.add_scalar(omp, 1.0);
    let lq = g.tape.log(omp);
    let a = g.tape.scale(lp, -y);
    let b = g.tape.scale(lq, -(1.0 - y));
    let gripper = g.tape.add(a, b);
    let gripper = g.tape.sum(gripper);

    let parts = [g.tape.scale(translation, w.translation), g.tape.scale(rotation, w.rotation), g.tape.scale(gripper, w.gripper)];
    let total = g.tape.add(parts[0], parts[1]);
    let total = g.tape.add(total, parts[2]);
    Ok(ActionLoss { translation, rotation, gripper, total })
}

/// [`explicit_loss`] on plain poses.
pub fn explicit_loss_values(pred: &Pose7DoF, gt: &Pose7DoF) -> Result<ActionTerms> {
    pred.validate()?;
    let store = ParamStore::new();
    let mask = TrainMask::none(&store);
    let mut g = Graph::new(&store, &mask);
    let a = ActionVars {
        translation: g.constant(Mat::from_vec(1, 3, pred.translation.to_vec())),
        rotation: g.constant(Mat::from_vec(1, 3, pred.rotation.to_vec())),
        gripper: g.constant(Mat::scalar(pred.gripper)),
    };
    let l = explicit_loss(&mut g, &a, gt, ActionLossWeights::default())?;
    Ok(terms_of(&g, &l))
}

fn terms_of(g: &Graph, l: &ActionLoss) -> ActionTerms {
    ActionTerms {
        translation: g.value(l.translation).item(),
        rotation: g.value(l.rotation).item(),
        gripper: g.value(l.gripper).item(),
        total: g.value(l.total).item(),
    }
}

/// Frozen-structure view of a policy: configs plus weights.
#[derive(Clone, Debug)]
pub struct PolicyModel {
    pub enc: Encoder2D,
    pub cfg: PolicyConfig,
    pub store: ParamStore,
    pub grid: PeGrid,
}

impl PolicyModel {
    pub fn new(enc_cfg: EncoderConfig, cfg: PolicyConfig, store: ParamStore) -> Result<Self> {
        cfg.validate(&enc_cfg)?;
        let grid = pe_grid(&store, &enc_cfg)?;
        let adapters = cfg.update != UpdateStrategy::None;
        Ok(Self { enc: Encoder2D::new(enc_cfg, adapters), cfg, store, grid })
    }

    pub fn prepare(&self, cloud: &PointCloud, state: &RobotState) -> Result<PreparedObs> {
        prepare_observation(cloud, state, &self.cfg, &self.grid)
    }

    fn sample(&self, store: &ParamStore, mask: &TrainMask, obs: &PreparedObs, gt: &Pose7DoF, grads: bool) -> Result<(GradBuffer, Vec<f64>)> {
        let mut g = Graph::new(store, mask);
        let feats = encode_pointcloud(&mut g, &self.enc, &self.cfg, obs)?;
        let a = predict_action(&mut g, &self.cfg, feats, &obs.state);
        let l = explicit_loss(&mut g, &a, gt, self.cfg.weights)?;
        let t = terms_of(&g, &l);
        let gb = if grads { g.param_grads(l.total) } else { GradBuffer::empty(store.len()) };
        Ok((gb, vec![t.translation, t.rotation, t.gripper, t.total]))
    }

    pub fn act_prepared(&self, obs: &PreparedObs) -> Result<Pose7DoF> {
        let mask = TrainMask::none(&self.store);
        let mut g = Graph::new(&self.store, &mask);
        let feats = encode_pointcloud(&mut g, &self.enc, &self.cfg, obs)?;
        let a = predict_action(&mut g, &self.cfg, feats, &obs.state);
        let pose = action_value(&g, &a);
        pose.validate()?;
        Ok(pose)
    }

    /// Mean loss terms over `samples` with the current weights.
    pub fn evaluate_loss(&self, samples: &[(PreparedObs, Pose7DoF)]) -> Result<ActionTerms> {
        let mask = TrainMask::none(&self.store);
        let (_, t) = batch_mean(self.cfg.execution, self.store.len(), samples.len(), |i| {
            self.sample(&self.store, &mask, &samples[i].0, &samples[i].1, false)
        })?;
        Ok(ActionTerms { translation: t[0], rotation: t[1], gripper: t[2], total: t[3] })
    }
}

impl Controller for PolicyModel {
    fn act(&self, _scene: &SyntheticScene, obs: &Observation) -> Result<Pose7DoF> {
        self.act_prepared(&self.prepare(&obs.cloud, &obs.state)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyMetrics {
    pub step: usize,
    pub translation: f64,
    pub rotation: f64,
    pub gripper: f64,
    pub total: f64,
    pub lr: f64,
}

pub struct PolicyOutcome {
    pub model: PolicyModel,
    pub log: Vec<PolicyMetrics>,
}

/// Flattens episodes into prepared `(observation, action)` pairs.
pub fn prepare_episodes(model: &PolicyModel, episodes: &[EpisodeRecord]) -> Result<Vec<(PreparedObs, Pose7DoF)>> {
    let steps: Vec<(&PointCloud, &RobotState, Pose7DoF)> =
        episodes.iter().flat_map(|e| e.steps.iter().map(|s| (&s.cloud, &s.state, s.action))).collect();
    model
        .cfg
        .execution
        .map(&steps, |(c, s, a)| model.prepare(c, s).map(|p| (p, *a)))
        .into_iter()
        .collect()
}

/// Imitation learning on demonstration steps.
pub fn train_policy(
    episodes: &[EpisodeRecord],
    enc_cfg: &EncoderConfig,
    cfg: &PolicyConfig,
    seed: u64,
    stage1: Option<&Checkpoint>,
) -> Result<PolicyOutcome> {
    train_policy_with(episodes, enc_cfg, cfg, seed, stage1, |_| {})
}

/// [`train_policy`] reporting every step's metrics to `on_step` as it completes.
pub fn train_policy_with(
    episodes: &[EpisodeRecord],
    enc_cfg: &EncoderConfig,
    cfg: &PolicyConfig,
    seed: u64,
    stage1: Option<&Checkpoint>,
    mut on_step: impl FnMut(&PolicyMetrics),
) -> Result<PolicyOutcome> {
    let store = init_policy_params(enc_cfg, cfg, seed, stage1)?;
    let mut model = PolicyModel::new(enc_cfg.clone(), cfg.clone(), store)?;
    let samples = prepare_episodes(&model, episodes)?;
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no demonstration steps".into()));
    }
    let mask = TrainMask::new(&model.store, |n| cfg.is_trainable(n));
    let mut adam = Adam::new(cfg.optim.clone(), &model.store);
    let mut shuffler = Shuffler::new(samples.len(), seed);
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = shuffler.next_batch(cfg.batch_size);
        let m = &model;
        let (grads, t) = batch_mean(cfg.execution, m.store.len(), batch.len(), |j| {
            let (obs, gt) = &samples[batch[j]];
            if cfg.augments() {
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(mix_seed(seed, step as u64), j as u64));
                let motion = WorldMotion::sample(&mut rng, cfg);
                let obs = obs.moved(&motion, cfg, &m.grid)?;
                let gt = motion.apply_pose(gt, cfg.workspace_center);
                m.sample(&m.store, &mask, &obs, &gt, true)
            } else {
                m.sample(&m.store, &mask, obs, gt, true)
            }
        })?;
        if t.iter().any(|x| !x.is_finite()) || !grads.is_finite() {
            return Err(Error::NonFinite(format!(
                "policy step {step}: translation {}, rotation {}, gripper {}",
                t[0], t[1], t[2]
            )));
        }
        let lr = cfg.optim.lr_at(step, cfg.steps);
        let metrics = PolicyMetrics { step, translation: t[0], rotation: t[1], gripper: t[2], total: t[3], lr };
        on_step(&metrics);
        log.push(metrics);
        adam.step(&mut model.store, &grads, lr);
    }
    Ok(PolicyOutcome { model, log })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeLog {
    pub seed: u64,
    pub success: bool,
    pub steps: usize,
    /// Distance from the last commanded translation to the target centroid.
    pub final_distance: Option<f64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub success_rate: f64,
    pub episodes: Vec<EpisodeLog>,
}

/// Seed of the `i`-th evaluation episode.
pub fn episode_seed(seed: u64, i: usize) -> u64 {
    mix_seed(seed ^ 0xe7a1, i as u64)
}

fn rollout(ctl: &dyn Controller, env_cfg: &EnvConfig, seed: u64) -> EpisodeLog {
    let mut log = EpisodeLog { seed, success: false, steps: 0, final_distance: None, error: None };
    let mut env = match ReachEnv::from_seed(seed, env_cfg) {
        Ok(e) => e,
        Err(e) => {
            log.error = Some(e.to_string());
            return log;
        }
    };
    let target = env.scene.target_centroid();
    loop {
        let step = ctl.act(&env.scene, &env.observation()).and_then(|a| env.step(&a).map(|o| (a, o)));
        match step {
            Ok((a, out)) => {
                log.steps = env.steps();
                let d = crate::geometry::dist2(&a.translation, &target).sqrt();
                log.final_distance = Some(d);
                if out.done {
                    log.success = out.success;
                    return log;
                }
            }
            Err(e) => {
                log.error = Some(e.to_string());
                return log;
            }
        }
    }
}

/// Closed-loop rollouts on freshly sampled scenes; faults count as failures.
pub fn evaluate_policy(ctl: &dyn Controller, env_cfg: &EnvConfig, episodes: usize, seed: u64, exec: Execution) -> Result<EvalReport> {
    if episodes == 0 {
        return Err(Error::InvalidArgument("evaluation needs at least one episode".into()));
    }
    env_cfg.validate()?;
    let logs = exec.map_range(episodes, |i| rollout(ctl, env_cfg, episode_seed(seed, i)));
    let wins = logs.iter().filter(|l| l.success).count();
    Ok(EvalReport { success_rate: wins as f64 / episodes as f64, episodes: logs })
}
