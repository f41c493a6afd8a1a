//! One-factor-at-a-time sweeps over the pipeline's design axes.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::checkpoint::{Checkpoint, Stage};
use crate::config::RunConfig;
use crate::encoder::is_adapter;
use crate::envdata::{gen_reach_task, EpisodeRecord, PretrainRecord};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::policy::{evaluate_policy, train_policy, PeMode, UpdateStrategy};
use crate::pretrain::{evaluate_pretrain, pretrain_run, MaskStrategy, ReconTarget};
use crate::tokenizer3d::{tokenizer_param_count, TokenizerConfig, PREFIX as TOKENIZER_PREFIX};
use crate::train::mix_seed;

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const MAX_CONFIGS: usize = 24;
/// Per-layer widths for the tokenizer-depth axis.
pub const DESK_LAYER_DIMS: [usize; 4] = [16, 32, 64, 128];

/// Values to try per axis; each alternative is run against the baseline with
/// everything else held fixed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Axes {
    pub planes: Vec<usize>,
    pub update: Vec<UpdateStrategy>,
    pub tokenizer_layers: Vec<usize>,
    pub pe: Vec<PeMode>,
    pub mask: Vec<MaskStrategy>,
    pub target: Vec<ReconTarget>,
    pub distill: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridData {
    pub demos: usize,
    pub pretrain_records: usize,
    pub seed: u64,
}

impl Default for GridData {
    fn default() -> Self {
        Self { demos: 16, pretrain_records: 16, seed: 0 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationGrid {
    /// Overrides applied to the default run config to form the baseline.
    pub base: Value,
    pub axes: Axes,
    pub data: GridData,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfigVariant {
    pub name: String,
    pub config: RunConfig,
}

fn tokenizer_for_depth(cfg: &RunConfig, depth: usize) -> TokenizerConfig {
    let t = &cfg.policy.tokenizer;
    if depth == t.layers.len() {
        return t.clone();
    }
    // Point counts halve per layer, so deep variants keep fewer final tokens.
    let tokens = t.tokens().min(cfg.env.obs_points >> (depth - 1));
    TokenizerConfig {
        activation: t.activation,
        norm: t.norm,
        point_xyz: t.point_xyz,
        ..TokenizerConfig::with_depth(depth, cfg.env.obs_points, tokens, t.k_nn, cfg.encoder.width, &DESK_LAYER_DIMS)
    }
}

impl AblationGrid {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("grid: {e}")))
    }

    pub fn baseline(&self) -> Result<RunConfig> {
        let base = if self.base.is_null() { json!({}) } else { self.base.clone() };
        RunConfig::default().with_overrides(&base)
    }

    /// Baseline first, then one row per axis value that differs from it.
    pub fn expand(&self) -> Result<Vec<ConfigVariant>> {
        if self.data.demos == 0 || self.data.pretrain_records == 0 {
            return Err(Error::Config("grid data counts must be positive".into()));
        }
        let base = self.baseline()?;
        let mut out = vec![ConfigVariant { name: "baseline".into(), config: base.clone() }];
        let mut push = |name: String, cfg: RunConfig| -> Result<()> {
            cfg.validate().map_err(|e| Error::Config(format!("{name}: {e}")))?;
            if !out.iter().any(|v| v.config == cfg) {
                out.push(ConfigVariant { name, config: cfg });
            }
            Ok(())
        };
        let a = &self.axes;
        for &p in &a.planes {
            let mut c = base.clone();
            c.policy.planes = p;
            push(format!("planes={p}"), c)?;
        }
        for &u in &a.update {
            let mut c = base.clone();
            c.policy.update = u;
            push(format!("update={}", enum_name(&u)), c)?;
        }
        for &d in &a.tokenizer_layers {
            let mut c = base.clone();
            c.policy.tokenizer = tokenizer_for_depth(&base, d);
            push(format!("tokenizer_layers={d}"), c)?;
        }
        for &m in &a.pe {
            let mut c = base.clone();
            c.policy.pe_mode = m;
            push(format!("pe={}", enum_name(&m)), c)?;
        }
        for &m in &a.mask {
            let mut c = base.clone();
            c.pretrain.mask = m;
            push(format!("mask={}", enum_name(&m)), c)?;
        }
        for &t in &a.target {
            let mut c = base.clone();
            c.pretrain.target = t;
            push(format!("target={}", enum_name(&t)), c)?;
        }
        for &d in &a.distill {
            let mut c = base.clone();
            c.pretrain.weights.distill = if d { 1.0 } else { 0.0 };
            push(format!("distill={d}"), c)?;
        }
        if out.len() > MAX_CONFIGS {
            return Err(Error::Config(format!("grid expands to {} configs (limit {MAX_CONFIGS})", out.len())));
        }
        Ok(out)
    }
}

fn enum_name<T: Serialize>(v: &T) -> String {
    match serde_json::to_value(v) {
        Ok(Value::String(s)) => s,
        other => format!("{other:?}"),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub tokenizer: usize,
    pub adapters: usize,
    /// Scalars updated during stage 2.
    pub trainable: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub planes: usize,
    pub update: UpdateStrategy,
    pub tokenizer_layers: usize,
    pub pe: PeMode,
    pub mask: MaskStrategy,
    pub target: ReconTarget,
    pub distill: bool,
    pub params: ParamCounts,
    pub pretrain_distill: Option<f64>,
    pub pretrain_recon: Option<f64>,
    pub policy_translation: Option<f64>,
    pub policy_rotation: Option<f64>,
    pub policy_gripper: Option<f64>,
    pub success_rate: Option<f64>,
    pub wall_seconds: f64,
    pub error: Option<String>,
    pub config: RunConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub schema_version: u32,
    pub rows: Vec<AblationRow>,
}

/// Shared data for every config in a sweep.
pub struct GridDataset {
    pub episodes: Vec<EpisodeRecord>,
    pub pretrain: Vec<PretrainRecord>,
}

pub fn grid_dataset(grid: &AblationGrid, base: &RunConfig) -> Result<GridDataset> {
    let n = grid.data.demos.max(grid.data.pretrain_records);
    let mut episodes = Vec::new();
    let mut pretrain = Vec::new();
    for i in 0..n {
        let (_, ep, rec) = gen_reach_task(mix_seed(grid.data.seed, i as u64), &base.env)?;
        if i < grid.data.demos {
            episodes.push(ep);
        }
        if i < grid.data.pretrain_records {
            pretrain.push(rec);
        }
    }
    Ok(GridDataset { episodes, pretrain })
}

fn blank_row(v: &ConfigVariant) -> AblationRow {
    let c = &v.config;
    AblationRow {
        name: v.name.clone(),
        planes: c.policy.planes,
        update: c.policy.update,
        tokenizer_layers: c.policy.tokenizer.layers.len(),
        pe: c.policy.pe_mode,
        mask: c.pretrain.mask,
        target: c.pretrain.target,
        distill: c.pretrain.weights.distill != 0.0,
        params: ParamCounts { tokenizer: tokenizer_param_count(&c.policy.tokenizer).unwrap_or(0), adapters: 0, trainable: 0 },
        pretrain_distill: None,
        pretrain_recon: None,
        policy_translation: None,
        policy_rotation: None,
        policy_gripper: None,
        success_rate: None,
        wall_seconds: 0.0,
        error: None,
        config: c.clone(),
    }
}

fn run_variant(row: &mut AblationRow, cfg: &RunConfig, data: &GridDataset) -> Result<()> {
    let stage1 = pretrain_run(&data.pretrain, &cfg.encoder, &cfg.pretrain, cfg.seed)?;
    let probe = evaluate_pretrain(&stage1.store, &data.pretrain, &cfg.encoder, &cfg.pretrain, cfg.seed)?;
    row.pretrain_distill = Some(probe.distill);
    row.pretrain_recon = Some(probe.recon);
    let ck = Checkpoint { stage: Stage::Pretrain, config: serde_json::to_value(cfg)?, params: stage1.store };
    let out = train_policy(&data.episodes, &cfg.encoder, &cfg.policy, cfg.seed, Some(&ck))?;
    let store = &out.model.store;
    row.params.tokenizer = store.count_where(|n| n.starts_with(TOKENIZER_PREFIX));
    row.params.adapters = store.count_where(is_adapter);
    row.params.trainable = store.count_where(|n| cfg.policy.is_trainable(n));
    let samples = crate::policy::prepare_episodes(&out.model, &data.episodes)?;
    let t = out.model.evaluate_loss(&samples)?;
    row.policy_translation = Some(t.translation);
    row.policy_rotation = Some(t.rotation);
    row.policy_gripper = Some(t.gripper);
    let eval = evaluate_policy(&out.model, &cfg.env, cfg.eval.episodes, cfg.eval.seed, cfg.policy.execution)?;
    row.success_rate = Some(eval.success_rate);
    Ok(())
}

/// Runs every variant; a failing variant is recorded and the sweep continues.
pub fn run_ablation(grid: &AblationGrid, exec: Execution, mut progress: impl FnMut(&AblationRow) + Send) -> Result<AblationReport> {
    let variants = grid.expand()?;
    let data = grid_dataset(grid, &variants[0].config)?;
    let run = |v: &ConfigVariant| {
        let start = Instant::now();
        let mut row = blank_row(v);
        if let Err(e) = run_variant(&mut row, &v.config, &data) {
            row.error = Some(e.to_string());
        }
        row.wall_seconds = start.elapsed().as_secs_f64();
        row
    };
    let rows = match exec {
        Execution::Sequential => variants
            .iter()
            .map(|v| {
                let r = run(v);
                progress(&r);
                r
            })
            .collect(),
        Execution::Parallel => {
            let rows = exec.map(&variants, run);
            rows.iter().for_each(&mut progress);
            rows
        }
    };
    Ok(AblationReport { schema_version: REPORT_SCHEMA_VERSION, rows })
}

fn opt(v: Option<f64>, digits: usize) -> String {
    v.map_or("-".into(), |x| format!("{x:.digits$}"))
}

impl AblationReport {
    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned-column text rendering, one line per config.
    pub fn to_table(&self) -> String {
        let header = [
            "config", "planes", "update", "tok", "pe", "mask", "target", "distill", "tok_params", "s1_distill", "s1_recon", "t_mse",
            "rot", "grip", "success", "secs", "status",
        ];
        let mut cells: Vec<Vec<String>> = vec![header.iter().map(|s| s.to_string()).collect()];
        for r in &self.rows {
            cells.push(vec![
                r.name.clone(),
                r.planes.to_string(),
                enum_name(&r.update),
                r.tokenizer_layers.to_string(),
                enum_name(&r.pe),
                enum_name(&r.mask),
                enum_name(&r.target),
                r.distill.to_string(),
                r.params.tokenizer.to_string(),
                opt(r.pretrain_distill, 4),
                opt(r.pretrain_recon, 4),
                opt(r.policy_translation, 6),
                opt(r.policy_rotation, 4),
                opt(r.policy_gripper, 4),
                opt(r.success_rate, 3),
                format!("{:.1}", r.wall_seconds),
                r.error.as_ref().map_or("ok".into(), |e| format!("failed: {e}")),
            ]);
        }
        let widths: Vec<usize> = (0..header.len()).map(|c| cells.iter().map(|r| r[c].chars().count()).max().unwrap_or(0)).collect();
        let mut out = String::new();
        for row in &cells {
            let line: Vec<String> = row.iter().zip(&widths).map(|(s, w)| format!("{s:<w$}")).collect();
            let _ = writeln!(out, "{}", line.join("  ").trim_end());
        }
        out
    }
}

/// Structural check of a serialized report.
pub fn validate_report(v: &Value) -> Result<()> {
    let bad = |m: String| Err(Error::format("ablation report", m));
    if v.get("schema_version").and_then(Value::as_u64) != Some(REPORT_SCHEMA_VERSION as u64) {
        return bad(format!("schema_version must be {REPORT_SCHEMA_VERSION}"));
    }
    let Some(rows) = v.get("rows").and_then(Value::as_array) else {
        return bad("rows must be an array".into());
    };
    let numbers = ["planes", "tokenizer_layers", "wall_seconds"];
    let strings = ["name", "update", "pe", "mask", "target"];
    let nullable = ["pretrain_distill", "pretrain_recon", "policy_translation", "policy_rotation", "policy_gripper", "success_rate"];
    for (i, r) in rows.iter().enumerate() {
        let Some(o) = r.as_object() else {
            return bad(format!("row {i} is not an object"));
        };
        for k in numbers {
            if !o.get(k).is_some_and(Value::is_number) {
                return bad(format!("row {i}: `{k}` must be a number"));
            }
        }
        for k in strings {
            if !o.get(k).is_some_and(Value::is_string) {
                return bad(format!("row {i}: `{k}` must be a string"));
            }
        }
        for k in nullable {
            if !o.get(k).is_some_and(|x| x.is_number() || x.is_null()) {
                return bad(format!("row {i}: `{k}` must be a number or null"));
            }
        }
        if !o.get("distill").is_some_and(Value::is_boolean) {
            return bad(format!("row {i}: `distill` must be a boolean"));
        }
        if !o.get("error").is_some_and(|x| x.is_string() || x.is_null()) {
            return bad(format!("row {i}: `error` must be a string or null"));
        }
        let p = o.get("params").and_then(Value::as_object);
        if !p.is_some_and(|p| ["tokenizer", "adapters", "trainable"].iter().all(|k| p.get(*k).is_some_and(Value::is_u64))) {
            return bad(format!("row {i}: `params` needs integer tokenizer/adapters/trainable"));
        }
        if let Some(rate) = o.get("success_rate").and_then(Value::as_f64) {
            if !(0.0..=1.0).contains(&rate) {
                return bad(format!("row {i}: success_rate {rate} outside [0, 1]"));
            }
        }
        if !o.get("config").is_some_and(Value::is_object) {
            return bad(format!("row {i}: `config` must be an object"));
        }
    }
    Ok(())
}
