//! Stage 1: masked depth reconstruction with feature distillation against a
//! frozen copy of the encoder. Only adapters and the decoder train.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, Var};
use crate::encoder::{init_adapters, init_encoder, is_adapter, Encoder2D, EncoderConfig, FOUNDATION_SEED};
use crate::envdata::PretrainRecord;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::geometry::RgbImage;
use crate::masking::{patch_scores, plan_mask, AttentionMap, MaskPlan, DEFAULT_RATIO, DEFAULT_THETA};
use crate::nn::{init_layer_norm, init_linear, normal_mat, Graph, ParamStore, TrainMask};
use crate::optim::{Adam, OptimConfig};
use crate::pe_lifting::PeGrid;
use crate::train::{batch_mean, mix_seed, Shuffler};

pub const DECODER_PREFIX: &str = "decoder.";
const DECODER_POS: &str = "decoder.pos_embed";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReconTarget {
    Depth,
    Rgb,
    Both,
}

impl ReconTarget {
    pub fn channels(self) -> usize {
        match self {
            ReconTarget::Depth => 1,
            ReconTarget::Rgb => 3,
            ReconTarget::Both => 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskStrategy {
    /// Attention-guided: affordance patches first.
    Affordance,
    Random,
}

/// Light decoder at half the encoder width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self { layers: 1, heads: 2, mlp_ratio: 4 }
    }
}

pub fn decoder_width(enc: &EncoderConfig) -> usize {
    enc.width / 2
}

pub fn is_decoder_trainable(name: &str) -> bool {
    name.starts_with(DECODER_PREFIX) && name != DECODER_POS
}

pub fn init_decoder(store: &mut ParamStore, enc: &EncoderConfig, cfg: &DecoderConfig, target: ReconTarget, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xdec0));
    let d = decoder_width(enc);
    init_linear(store, &mut rng, "decoder.embed", enc.width, d);
    store.insert("decoder.mask_token", normal_mat(&mut rng, 1, d, 0.02));
    store.insert(DECODER_POS, PeGrid::sincos(enc.grid, d).to_mat());
    for i in 0..cfg.layers {
        let p = format!("decoder.blocks.{i}");
        init_layer_norm(store, &format!("{p}.ln1"), d);
        for t in ["q", "k", "v", "o"] {
            init_linear(store, &mut rng, &format!("{p}.attn.{t}"), d, d);
        }
        init_layer_norm(store, &format!("{p}.ln2"), d);
        init_linear(store, &mut rng, &format!("{p}.mlp.fc1"), d, d * cfg.mlp_ratio);
        init_linear(store, &mut rng, &format!("{p}.mlp.fc2"), d * cfg.mlp_ratio, d);
    }
    init_layer_norm(store, "decoder.norm", d);
    init_linear(store, &mut rng, "decoder.pred", d, enc.patch * enc.patch * target.channels());
}

/// Pre-norm transformer block without adapters.
fn plain_block(g: &mut Graph, prefix: &str, x: Var, heads: usize) -> Var {
    let h = g.layer_norm(&format!("{prefix}.ln1"), x);
    let q = g.linear(&format!("{prefix}.attn.q"), h);
    let k = g.linear(&format!("{prefix}.attn.k"), h);
    let v = g.linear(&format!("{prefix}.attn.v"), h);
    let d = g.tape.shape(q).1;
    let dh = d / heads;
    let mut outs = Vec::with_capacity(heads);
    for i in 0..heads {
        let qh = g.tape.slice_cols(q, i * dh, dh);
        let kh = g.tape.slice_cols(k, i * dh, dh);
        let vh = g.tape.slice_cols(v, i * dh, dh);
        let s = g.tape.matmul_t(qh, kh);
        let s = g.tape.scale(s, 1.0 / (dh as f64).sqrt());
        let a = g.tape.softmax_rows(s);
        outs.push(g.tape.matmul(a, vh));
    }
    let cat = if heads == 1 { outs[0] } else { g.tape.concat_cols(&outs) };
    let a = g.linear(&format!("{prefix}.attn.o"), cat);
    let x = g.tape.add(x, a);
    let h = g.layer_norm(&format!("{prefix}.ln2"), x);
    let h = g.linear(&format!("{prefix}.mlp.fc1"), h);
    let h = g.tape.gelu(h);
    let h = g.linear(&format!("{prefix}.mlp.fc2"), h);
    g.tape.add(x, h)
}

#[derive(Clone, Debug)]
pub struct MaeDecoder {
    pub enc: EncoderConfig,
    pub cfg: DecoderConfig,
    pub target: ReconTarget,
}

impl MaeDecoder {
    /// Predictions for the masked tokens, in ascending token order.
    pub fn decode(&self, g: &mut Graph, visible_feats: Var, plan: &MaskPlan) -> Result<Var> {
        let (rows, cols) = g.tape.shape(visible_feats);
        if rows != plan.visible.len() || cols != self.enc.width {
            return Err(Error::Shape(format!(
                "visible features {rows}x{cols} for {} visible tokens of width {}",
                plan.visible.len(),
                self.enc.width
            )));
        }
        if plan.n != self.enc.tokens() {
            return Err(Error::Shape(format!("plan over {} tokens, decoder grid has {}", plan.n, self.enc.tokens())));
        }
        let emb = g.linear("decoder.embed", visible_feats);
        let token = g.param("decoder.mask_token");
        let stack = g.tape.concat_rows(&[emb, token]);
        let slot: Vec<usize> =
            (0..plan.n).map(|t| plan.visible.binary_search(&t).unwrap_or(plan.visible.len())).collect();
        let full = g.tape.gather_rows(stack, &slot);
        let pos = g.param(DECODER_POS);
        let mut x = g.tape.add(full, pos);
        for i in 0..self.cfg.layers {
            x = plain_block(g, &format!("decoder.blocks.{i}"), x, self.cfg.heads);
        }
        let x = g.layer_norm("decoder.norm", x);
        let xm = g.tape.gather_rows(x, &plan.masked());
        Ok(g.linear("decoder.pred", xm))
    }
}

/// Per-masked-token reconstruction targets with a validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthTarget {
    /// `|masked| × patch²·channels`, depth normalized to `[0, 1]`.
    pub values: Mat,
    /// 1 where the value is supervised, 0 for missing depth.
    pub valid: Mat,
    pub tokens: Vec<usize>,
}

impl DepthTarget {
    /// Depth is min-max normalized per image over its valid (positive) pixels.
    pub fn build(record: &PretrainRecord, plan: &MaskPlan, enc: &EncoderConfig, target: ReconTarget) -> Result<Self> {
        let (side, p) = (enc.image_side(), enc.patch);
        if record.image.width != side || record.image.height != side || record.depth.width != side || record.depth.height != side {
            return Err(Error::Shape(format!("record is {}x{}, encoder expects {side}x{side}", record.image.width, record.image.height)));
        }
        let (lo, hi) = record
            .depth
            .pixels
            .iter()
            .filter(|&&d| d > 0.0)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &d| (lo.min(d), hi.max(d)));
        let range = hi - lo;
        let norm = |d: f64| if range > 0.0 { (d - lo) / range } else { 0.0 };
        let tokens = plan.masked();
        let c = target.channels();
        let width = p * p * c;
        let mut values = Mat::zeros(tokens.len(), width);
        let mut valid = Mat::zeros(tokens.len(), width);
        for (r, &t) in tokens.iter().enumerate() {
            let (pr, pc) = (t / enc.grid, t % enc.grid);
            let mut o = 0;
            for v in pr * p..(pr + 1) * p {
                for u in pc * p..(pc + 1) * p {
                    if matches!(target, ReconTarget::Depth | ReconTarget::Both) {
                        let d = *record.depth.at(u, v);
                        if d > 0.0 {
                            *values.at_mut(r, o) = norm(d);
                            *valid.at_mut(r, o) = 1.0;
                        }
                        o += 1;
                    }
                    if matches!(target, ReconTarget::Rgb | ReconTarget::Both) {
                        for ch in record.image.at(u, v) {
                            *values.at_mut(r, o) = *ch;
                            *valid.at_mut(r, o) = 1.0;
                            o += 1;
                        }
                    }
                }
            }
        }
        Ok(Self { values, valid, tokens })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub distill: f64,
    pub recon: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { distill: 1.0, recon: 1.0 }
    }
}

pub struct ImplicitLoss {
    pub distill: Var,
    pub recon: Var,
    pub total: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub distill: f64,
    pub recon: f64,
    pub total: f64,
}

/// Mean absolute feature drift plus mean absolute error over valid masked values.
pub fn implicit_loss(
    g: &mut Graph,
    enc_out: Var,
    ref_out: &Mat,
    pred: Var,
    target: &DepthTarget,
    weights: LossWeights,
) -> Result<ImplicitLoss> {
    if target.tokens.is_empty() {
        return Err(Error::InvalidArgument("empty masked set".into()));
    }
    let count = target.valid.sum();
    if count == 0.0 {
        return Err(Error::InvalidArgument("masked set has no valid target values".into()));
    }
    if g.tape.shape(enc_out) != ref_out.shape() {
        return Err(Error::Shape(format!("features {:?} vs reference {:?}", g.tape.shape(enc_out), ref_out.shape())));
    }
    if g.tape.shape(pred) != target.values.shape() {
        return Err(Error::Shape(format!("prediction {:?} vs target {:?}", g.tape.shape(pred), target.values.shape())));
    }
    let r = g.constant(ref_out.clone());
    let diff = g.tape.sub(enc_out, r);
    let diff = g.tape.abs(diff);
    let distill = g.tape.mean(diff);
    let t = g.constant(target.values.clone());
    let m = g.constant(target.valid.clone());
    let err = g.tape.sub(pred, t);
    let err = g.tape.abs(err);
    let err = g.tape.mul(err, m);
    let err = g.tape.sum(err);
    let recon = g.tape.scale(err, 1.0 / count);
    let a = g.tape.scale(distill, weights.distill);
    let b = g.tape.scale(recon, weights.recon);
    let total = g.tape.add(a, b);
    Ok(ImplicitLoss { distill, recon, total })
}

/// [`implicit_loss`] on plain matrices.
pub fn implicit_loss_values(enc_out: &Mat, ref_out: &Mat, pred: &Mat, target: &DepthTarget, weights: LossWeights) -> Result<LossTerms> {
    let store = ParamStore::new();
    let mask = TrainMask::none(&store);
    let mut g = Graph::new(&store, &mask);
    let e = g.constant(enc_out.clone());
    let p = g.constant(pred.clone());
    let l = implicit_loss(&mut g, e, ref_out, p, target, weights)?;
    Ok(LossTerms { distill: g.value(l.distill).item(), recon: g.value(l.recon).item(), total: g.value(l.total).item() })
}

/// Runs the adapted encoder on the visible patches of `image`.
pub fn encode_visible(enc: &Encoder2D, g: &mut Graph, image: &RgbImage, plan: &MaskPlan) -> Result<Var> {
    if plan.n != enc.cfg.tokens() {
        return Err(Error::Shape(format!("plan over {} tokens, encoder grid has {}", plan.n, enc.cfg.tokens())));
    }
    if plan.visible.is_empty() {
        return Err(Error::InvalidArgument("mask plan leaves no visible token".into()));
    }
    enc.encode_patches(g, image, &plan.visible)
}

/// Frozen reference features: same base weights, adapters off, no gradients.
pub fn reference_features(enc: &Encoder2D, store: &ParamStore, image: &RgbImage, plan: &MaskPlan) -> Result<Mat> {
    let mask = TrainMask::none(store);
    let mut g = Graph::new(store, &mask);
    let v = encode_visible(&enc.reference(), &mut g, image, plan)?;
    Ok(g.value(v).clone())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub theta: f64,
    pub ratio: f64,
    pub mask: MaskStrategy,
    pub target: ReconTarget,
    pub weights: LossWeights,
    pub decoder: DecoderConfig,
    pub optim: OptimConfig,
    /// When false only the decoder trains.
    pub train_adapters: bool,
    pub execution: Execution,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            theta: DEFAULT_THETA,
            ratio: DEFAULT_RATIO,
            mask: MaskStrategy::Affordance,
            target: ReconTarget::Depth,
            weights: LossWeights::default(),
            decoder: DecoderConfig::default(),
            optim: OptimConfig::default(),
            train_adapters: true,
            execution: Execution::default(),
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self, enc: &EncoderConfig) -> Result<()> {
        enc.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.steps == 0 || self.batch_size == 0 {
            return bad("steps and batch_size must be positive".into());
        }
        if !(self.ratio > 0.0 && self.ratio < 1.0) || !(0.0..=1.0).contains(&self.theta) {
            return bad(format!("mask ratio {} / theta {} out of range", self.ratio, self.theta));
        }
        let d = decoder_width(enc);
        if self.decoder.layers == 0 || self.decoder.heads == 0 || d % 4 != 0 || d % self.decoder.heads != 0 {
            return bad(format!("decoder width {d} must be divisible by 4 and by {} heads", self.decoder.heads));
        }
        if self.weights.distill < 0.0 || self.weights.recon <= 0.0 {
            return bad("loss weights must be non-negative with a positive recon weight".into());
        }
        if !(self.optim.lr > 0.0) {
            return bad("learning rate must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainMetrics {
    pub step: usize,
    pub distill: f64,
    pub recon: f64,
    pub total: f64,
    pub lr: f64,
}

pub struct PretrainOutcome {
    pub store: ParamStore,
    pub log: Vec<PretrainMetrics>,
}

/// Fresh stage-1 parameters: frozen base, zero adapters, decoder.
pub fn init_pretrain_params(enc: &EncoderConfig, cfg: &PretrainConfig, seed: u64) -> ParamStore {
    let mut store = ParamStore::new();
    init_encoder(&mut store, enc, FOUNDATION_SEED);
    init_adapters(&mut store, enc, seed);
    init_decoder(&mut store, enc, &cfg.decoder, cfg.target, seed);
    store
}

/// Patch scores per record under the configured masking strategy.
pub fn record_scores(records: &[PretrainRecord], enc: &EncoderConfig, strategy: MaskStrategy) -> Result<Vec<Vec<f64>>> {
    records
        .iter()
        .map(|r| match strategy {
            MaskStrategy::Random => Ok(vec![0.0; enc.tokens()]),
            MaskStrategy::Affordance => {
                let attn = AttentionMap::new(r.attention.clone(), r.text.clone())?;
                patch_scores(&attn, enc.patch)
            }
        })
        .collect()
}

fn sample_terms(
    store: &ParamStore,
    mask: &TrainMask,
    enc: &Encoder2D,
    dec: &MaeDecoder,
    record: &PretrainRecord,
    plan: &MaskPlan,
    weights: LossWeights,
    want_grads: bool,
) -> Result<(crate::nn::GradBuffer, Vec<f64>)> {
    let target = DepthTarget::build(record, plan, &enc.cfg, dec.target)?;
    let reference = reference_features(enc, store, &record.image, plan)?;
    let mut g = Graph::new(store, mask);
    let feats = encode_visible(enc, &mut g, &record.image, plan)?;
    let pred = dec.decode(&mut g, feats, plan)?;
    let l = implicit_loss(&mut g, feats, &reference, pred, &target, weights)?;
    let terms = vec![g.value(l.distill).item(), g.value(l.recon).item(), g.value(l.total).item()];
    let grads = if want_grads { g.param_grads(l.total) } else { crate::nn::GradBuffer::empty(store.len()) };
    Ok((grads, terms))
}

/// Trains adapters (unless disabled) and decoder on `records`.
pub fn pretrain_run(records: &[PretrainRecord], enc_cfg: &EncoderConfig, cfg: &PretrainConfig, seed: u64) -> Result<PretrainOutcome> {
    pretrain_run_with(records, enc_cfg, cfg, seed, |_| {})
}

/// [`pretrain_run`] reporting every step's metrics to `on_step` as it completes.
pub fn pretrain_run_with(
    records: &[PretrainRecord],
    enc_cfg: &EncoderConfig,
    cfg: &PretrainConfig,
    seed: u64,
    mut on_step: impl FnMut(&PretrainMetrics),
) -> Result<PretrainOutcome> {
    cfg.validate(enc_cfg)?;
    if records.is_empty() {
        return Err(Error::InvalidArgument("no pretraining records".into()));
    }
    let mut store = init_pretrain_params(enc_cfg, cfg, seed);
    let train_adapters = cfg.train_adapters;
    let mask = TrainMask::new(&store, |n| is_decoder_trainable(n) || (train_adapters && is_adapter(n)));
    let enc = Encoder2D::new(enc_cfg.clone(), true);
    let dec = MaeDecoder { enc: enc_cfg.clone(), cfg: cfg.decoder.clone(), target: cfg.target };
    let scores = record_scores(records, enc_cfg, cfg.mask)?;
    let mut adam = Adam::new(cfg.optim.clone(), &store);
    let mut shuffler = Shuffler::new(records.len(), seed);
    let mut log = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let batch = shuffler.next_batch(cfg.batch_size);
        let plans: Vec<MaskPlan> = batch
            .iter()
            .enumerate()
            .map(|(slot, &i)| plan_mask(&scores[i], cfg.theta, cfg.ratio, mix_seed(mix_seed(seed, step as u64), slot as u64)))
            .collect::<Result<_>>()?;
        let snapshot = &store;
        let (grads, terms) = batch_mean(cfg.execution, store.len(), batch.len(), |j| {
            sample_terms(snapshot, &mask, &enc, &dec, &records[batch[j]], &plans[j], cfg.weights, true)
        })?;
        if terms.iter().any(|t| !t.is_finite()) || !grads.is_finite() {
            return Err(Error::NonFinite(format!(
                "pretraining step {step}: distill {}, recon {}, total {}",
                terms[0], terms[1], terms[2]
            )));
        }
        let lr = cfg.optim.lr_at(step, cfg.steps);
        let m = PretrainMetrics { step, distill: terms[0], recon: terms[1], total: terms[2], lr };
        on_step(&m);
        log.push(m);
        adam.step(&mut store, &grads, lr);
    }
    Ok(PretrainOutcome { store, log })
}

/// Mean loss terms over all records with fixed per-record masks.
pub fn evaluate_pretrain(
    store: &ParamStore,
    records: &[PretrainRecord],
    enc_cfg: &EncoderConfig,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<LossTerms> {
    let enc = Encoder2D::new(enc_cfg.clone(), true);
    let dec = MaeDecoder { enc: enc_cfg.clone(), cfg: cfg.decoder.clone(), target: cfg.target };
    let scores = record_scores(records, enc_cfg, cfg.mask)?;
    let mask = TrainMask::none(store);
    let (_, t) = batch_mean(cfg.execution, store.len(), records.len(), |i| {
        let plan = plan_mask(&scores[i], cfg.theta, cfg.ratio, mix_seed(seed, i as u64))?;
        sample_terms(store, &mask, &enc, &dec, &records[i], &plan, cfg.weights, false)
    })?;
    Ok(LossTerms { distill: t[0], recon: t[1], total: t[2] })
}
