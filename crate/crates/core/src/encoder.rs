//! Toy ViT-style encoder standing in for a frozen 2D foundation model,
//! with zero-initialized low-rank adapters on selected linear layers.
//!
//! Base weights live under `encoder.*`, adapters under `adapter.*`. The
//! patch positional-embedding grid (`encoder.pos_embed`, `G²×D`, row-major
//! over patches) is shared by image mode and by lifted point-cloud mode.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, Var};
use crate::error::{Error, Result};
use crate::geometry::RgbImage;
use crate::nn::{init_layer_norm, init_linear, normal_mat, Graph, ParamStore};
use crate::pe_lifting::PeGrid;

pub const BASE_PREFIX: &str = "encoder.";
pub const ADAPTER_PREFIX: &str = "adapter.";
/// Seed of the frozen base weights, which stand in for a pretrained model
/// and are therefore the same in every run.
pub const FOUNDATION_SEED: u64 = 0x5eed;

pub fn is_base(name: &str) -> bool {
    name.starts_with(BASE_PREFIX)
}

pub fn is_adapter(name: &str) -> bool {
    name.starts_with(ADAPTER_PREFIX)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub layers: usize,
    pub width: usize,
    pub heads: usize,
    /// Patch grid side `G`.
    pub grid: usize,
    /// Patch side in pixels.
    pub patch: usize,
    pub mlp_ratio: usize,
    pub adapter_rank: usize,
    pub adapter_scale: f64,
    /// Linear layers carrying adapters: any of `q`, `k`, `v`, `o`, `fc1`, `fc2`.
    pub adapter_targets: Vec<String>,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            width: 32,
            heads: 4,
            grid: 14,
            patch: 8,
            mlp_ratio: 4,
            adapter_rank: 4,
            adapter_scale: 1.0,
            adapter_targets: vec!["q".into(), "v".into()],
        }
    }
}

const TARGETS: [&str; 6] = ["q", "k", "v", "o", "fc1", "fc2"];

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.layers == 0 || self.width == 0 || self.heads == 0 || self.grid == 0 || self.patch == 0 {
            return bad("encoder dimensions must be positive".into());
        }
        if self.width % self.heads != 0 {
            return bad(format!("width {} not divisible by {} heads", self.width, self.heads));
        }
        if self.width % 4 != 0 {
            return bad(format!("width {} must be divisible by 4 for sine-cosine embeddings", self.width));
        }
        if self.adapter_rank == 0 {
            return bad("adapter rank must be positive".into());
        }
        for t in &self.adapter_targets {
            if !TARGETS.contains(&t.as_str()) {
                return bad(format!("unknown adapter target `{t}`"));
            }
        }
        Ok(())
    }

    pub fn image_side(&self) -> usize {
        self.grid * self.patch
    }

    pub fn tokens(&self) -> usize {
        self.grid * self.grid
    }

    fn dims(&self, target: &str) -> (usize, usize) {
        let d = self.width;
        let h = d * self.mlp_ratio;
        match target {
            "fc1" => (d, h),
            "fc2" => (h, d),
            _ => (d, d),
        }
    }

    fn linear_name(i: usize, target: &str) -> String {
        match target {
            "fc1" | "fc2" => format!("encoder.blocks.{i}.mlp.{target}"),
            _ => format!("encoder.blocks.{i}.attn.{target}"),
        }
    }
}

/// Registers base weights. Deterministic in `seed`.
pub fn init_encoder(store: &mut ParamStore, cfg: &EncoderConfig, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.width;
    init_linear(store, &mut rng, "encoder.patch_embed", cfg.patch * cfg.patch * 3, d);
    store.insert("encoder.pos_embed", PeGrid::sincos(cfg.grid, d).to_mat());
    for i in 0..cfg.layers {
        init_layer_norm(store, &format!("encoder.blocks.{i}.ln1"), d);
        for t in ["q", "k", "v", "o", "fc1", "fc2"] {
            let (fi, fo) = cfg.dims(t);
            init_linear(store, &mut rng, &EncoderConfig::linear_name(i, t), fi, fo);
        }
        init_layer_norm(store, &format!("encoder.blocks.{i}.ln2"), d);
    }
    init_layer_norm(store, "encoder.norm", d);
}

/// Registers adapters: random down-projections, zero up-projections.
pub fn init_adapters(store: &mut ParamStore, cfg: &EncoderConfig, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xada9_7e55);
    for i in 0..cfg.layers {
        for t in &cfg.adapter_targets {
            let (fi, fo) = cfg.dims(t);
            store.insert(format!("adapter.blocks.{i}.{t}.down"), normal_mat(&mut rng, fi, cfg.adapter_rank, (1.0 / fi as f64).sqrt()));
            store.insert(format!("adapter.blocks.{i}.{t}.up"), Mat::zeros(cfg.adapter_rank, fo));
        }
    }
}

pub fn pe_grid(store: &ParamStore, cfg: &EncoderConfig) -> Result<PeGrid> {
    let m = store.get("encoder.pos_embed").ok_or_else(|| Error::CheckpointMismatch("missing encoder.pos_embed".into()))?;
    PeGrid::from_mat(cfg.grid, m)
}

/// Forward-pass helper bound to one configuration.
#[derive(Clone, Debug)]
pub struct Encoder2D {
    pub cfg: EncoderConfig,
    /// Whether adapters participate in the forward pass.
    pub adapters: bool,
}

impl Encoder2D {
    pub fn new(cfg: EncoderConfig, adapters: bool) -> Self {
        Self { cfg, adapters }
    }

    /// The frozen reference: same base weights, adapters off.
    pub fn reference(&self) -> Self {
        Self { cfg: self.cfg.clone(), adapters: false }
    }

    fn adapted_linear(&self, g: &mut Graph, i: usize, target: &str, x: Var) -> Var {
        let y = g.linear(&EncoderConfig::linear_name(i, target), x);
        if !self.adapters || !self.cfg.adapter_targets.iter().any(|t| t == target) {
            return y;
        }
        let down = g.param(&format!("adapter.blocks.{i}.{target}.down"));
        let up = g.param(&format!("adapter.blocks.{i}.{target}.up"));
        let h = g.tape.matmul(x, down);
        let delta = g.tape.matmul(h, up);
        let delta = g.tape.scale(delta, self.cfg.adapter_scale);
        g.tape.add(y, delta)
    }

    fn attention(&self, g: &mut Graph, i: usize, x: Var) -> Var {
        let q = self.adapted_linear(g, i, "q", x);
        let k = self.adapted_linear(g, i, "k", x);
        let v = self.adapted_linear(g, i, "v", x);
        let dh = self.cfg.width / self.cfg.heads;
        let inv = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.cfg.heads);
        for h in 0..self.cfg.heads {
            let qh = g.tape.slice_cols(q, h * dh, dh);
            let kh = g.tape.slice_cols(k, h * dh, dh);
            let vh = g.tape.slice_cols(v, h * dh, dh);
            let s = g.tape.matmul_t(qh, kh);
            let s = g.tape.scale(s, inv);
            let a = g.tape.softmax_rows(s);
            heads.push(g.tape.matmul(a, vh));
        }
        let cat = if heads.len() == 1 { heads[0] } else { g.tape.concat_cols(&heads) };
        self.adapted_linear(g, i, "o", cat)
    }

    /// Pre-norm transformer blocks plus final norm over `n×D` tokens.
    pub fn forward_tokens(&self, g: &mut Graph, mut x: Var) -> Var {
        for i in 0..self.cfg.layers {
            let h = g.layer_norm(&format!("encoder.blocks.{i}.ln1"), x);
            let a = self.attention(g, i, h);
            x = g.tape.add(x, a);
            let h = g.layer_norm(&format!("encoder.blocks.{i}.ln2"), x);
            let h = self.adapted_linear(g, i, "fc1", h);
            let h = g.tape.gelu(h);
            let h = self.adapted_linear(g, i, "fc2", h);
            x = g.tape.add(x, h);
        }
        g.layer_norm("encoder.norm", x)
    }

    /// Flattened RGB pixels of the selected patches, one row per patch.
    pub fn patch_matrix(&self, image: &RgbImage, indices: &[usize]) -> Result<Mat> {
        let (g, p) = (self.cfg.grid, self.cfg.patch);
        if image.width != g * p || image.height != g * p {
            return Err(Error::Shape(format!(
                "image {}x{} does not match a {g}x{g} grid of {p}-pixel patches",
                image.width, image.height
            )));
        }
        let mut m = Mat::zeros(indices.len(), p * p * 3);
        for (r, &t) in indices.iter().enumerate() {
            if t >= g * g {
                return Err(Error::Shape(format!("patch index {t} out of range")));
            }
            let (pr, pc) = (t / g, t % g);
            let row = m.row_mut(r);
            let mut o = 0;
            for v in pr * p..(pr + 1) * p {
                for u in pc * p..(pc + 1) * p {
                    row[o..o + 3].copy_from_slice(image.at(u, v));
                    o += 3;
                }
            }
        }
        Ok(m)
    }

    /// Patch-embeds the selected patches and adds their 2D positional embeddings.
    pub fn embed_patches(&self, g: &mut Graph, image: &RgbImage, indices: &[usize]) -> Result<Var> {
        let pm = self.patch_matrix(image, indices)?;
        let x = g.constant(pm);
        let e = g.linear("encoder.patch_embed", x);
        let pos = g.param("encoder.pos_embed");
        let pos = g.tape.gather_rows(pos, indices);
        Ok(g.tape.add(e, pos))
    }

    /// Image mode: embed the listed patches and run the blocks.
    pub fn encode_patches(&self, g: &mut Graph, image: &RgbImage, indices: &[usize]) -> Result<Var> {
        let x = self.embed_patches(g, image, indices)?;
        Ok(self.forward_tokens(g, x))
    }

    /// Point mode: token features plus lifted positional embeddings.
    pub fn encode_point_tokens(&self, g: &mut Graph, features: Var, pe: Var) -> Result<Var> {
        let (fs, ps) = (g.tape.shape(features), g.tape.shape(pe));
        if fs != ps || fs.1 != self.cfg.width {
            return Err(Error::Shape(format!("token features {fs:?}, positional embeddings {ps:?}, width {}", self.cfg.width)));
        }
        let x = g.tape.add(features, pe);
        Ok(self.forward_tokens(g, x))
    }
}
