use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use serde_json::json;

use lift3d::ablation::{run_ablation, AblationGrid};
use lift3d::checkpoint::{Checkpoint, Stage};
use lift3d::config::RunConfig;
use lift3d::envdata::dataset::{read_dataset, write_dataset, Records};
use lift3d::envdata::{gen_reach_task, OracleController, REACH_TASK};
use lift3d::policy::{evaluate_policy, train_policy_with, PolicyModel};
use lift3d::pretrain::pretrain_run_with;
use lift3d::{Error, Execution};

#[derive(Parser)]
#[command(name = "lift3d", version, about = "Two-stage 3D policy learning on a frozen 2D encoder")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate demonstration and pretraining datasets.
    GenData {
        #[arg(long, default_value = REACH_TASK)]
        task: String,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Run config supplying environment settings.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Stage 1: masked depth pretraining of the adapters.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage 2: imitation learning of the policy.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Stage-1 checkpoint initializing encoder and adapters.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Closed-loop rollouts of a policy checkpoint.
    Eval {
        #[arg(long, required_unless_present = "oracle")]
        checkpoint: Option<PathBuf>,
        /// Roll out the scripted demonstrator instead of a checkpoint.
        #[arg(long, conflicts_with = "checkpoint")]
        oracle: bool,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Per-episode log as JSON.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Sweep design axes and emit a report.
    Ablate {
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Run configs concurrently.
        #[arg(long)]
        parallel: bool,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_) | Error::InvalidArgument(_) | Error::Json(_) => 2,
                Error::Io { .. } | Error::Format { .. } => 3,
                Error::NonFinite(_) => 4,
                Error::CheckpointMismatch(_) => 5,
                _ => 1,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenData { task, count, seed, out, config } => gen_data(&task, count, seed, &out, config.as_deref()),
        Cmd::Pretrain { config, out } => pretrain(&config, &out),
        Cmd::Train { config, init, out } => train(&config, init.as_deref(), &out),
        Cmd::Eval { checkpoint, oracle, config, episodes, seed, log } => {
            eval(checkpoint.as_deref(), oracle, config.as_deref(), episodes, seed, log.as_deref())
        }
        Cmd::Ablate { grid, out, parallel } => ablate(&grid, &out, parallel),
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

/// Runs `fill` against a fresh staging directory and moves it to `out` on success.
fn with_staged_dir(out: &Path, fill: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let name = out.file_name().context("output path has no final component")?;
    let parent = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    let mut staged = name.to_owned();
    staged.push(format!(".staging-{}", std::process::id()));
    let staged = parent.join(staged);
    if staged.exists() {
        fs::remove_dir_all(&staged).map_err(|e| Error::io(&staged, e))?;
    }
    fs::create_dir(&staged).map_err(|e| Error::io(&staged, e))?;
    if let Err(e) = fill(&staged) {
        let _ = fs::remove_dir_all(&staged);
        return Err(e);
    }
    if out.exists() {
        fs::remove_dir_all(out).map_err(|e| Error::io(out, e))?;
    }
    fs::rename(&staged, out).map_err(|e| Error::io(out, e))?;
    Ok(())
}

fn write_config_echo(dir: &Path, cfg: &RunConfig) -> Result<()> {
    let path = dir.join("config.json");
    fs::write(&path, cfg.to_json_pretty() + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(())
}

fn gen_data(task: &str, count: usize, seed: u64, out: &Path, config: Option<&Path>) -> Result<()> {
    if task != REACH_TASK {
        bail!(Error::Config(format!("unknown task `{task}` (available: {REACH_TASK})")));
    }
    if count == 0 {
        bail!(Error::Config("--count must be at least 1".into()));
    }
    let cfg = load_config(config)?;
    let mut episodes = Vec::with_capacity(count);
    let mut pretrain = Vec::with_capacity(count);
    for i in 0..count as u64 {
        let (_, ep, rec) = gen_reach_task(seed.wrapping_add(i), &cfg.env)?;
        episodes.push(ep);
        pretrain.push(rec);
    }
    with_staged_dir(out, |dir| {
        write_dataset(&Records::Episodes(episodes), &dir.join("episodes"))?;
        write_dataset(&Records::Pretrain(pretrain), &dir.join("pretrain"))?;
        write_config_echo(dir, &cfg)
    })?;
    println!("wrote {count} {task} episodes and pretraining records to {}", out.display());
    Ok(())
}

fn data_path<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    match p {
        Some(p) => Ok(p),
        None => bail!(Error::Config(format!("config needs data.{key}"))),
    }
}

struct MetricsSink {
    file: BufWriter<File>,
    every: usize,
    last: usize,
}

impl MetricsSink {
    fn new(dir: &Path, every: usize, steps: usize) -> Result<Self> {
        let path = dir.join("metrics.jsonl");
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(Self { file: BufWriter::new(file), every, last: steps.saturating_sub(1) })
    }

    fn emit(&mut self, step: usize, line: serde_json::Value) {
        if step % self.every != 0 && step != self.last {
            return;
        }
        let line = line.to_string();
        println!("{line}");
        // Write errors surface when the sink is flushed.
        let _ = writeln!(self.file, "{line}");
    }

    fn finish(mut self, dir: &Path) -> Result<()> {
        self.file.flush().map_err(|e| Error::io(dir.join("metrics.jsonl"), e))?;
        Ok(())
    }
}

fn pretrain(config: &Path, out: &Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let dir = data_path(&cfg.data.pretrain, "pretrain")?;
    let Records::Pretrain(records) = read_dataset(dir)? else {
        bail!(Error::Config(format!("{} does not hold pretraining records", dir.display())));
    };
    with_staged_dir(out, |stage| {
        write_config_echo(stage, &cfg)?;
        let mut sink = MetricsSink::new(stage, cfg.log_every, cfg.pretrain.steps)?;
        let outcome = pretrain_run_with(&records, &cfg.encoder, &cfg.pretrain, cfg.seed, |m| {
            let mut v = serde_json::to_value(m).expect("metrics serialize");
            v["stage"] = json!("pretrain");
            sink.emit(m.step, v);
        })?;
        sink.finish(stage)?;
        let ck = Checkpoint { stage: Stage::Pretrain, config: serde_json::to_value(&cfg)?, params: outcome.store };
        ck.save(&stage.join("checkpoint.bin"))?;
        Ok(())
    })
}

fn train(config: &Path, init: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let dir = data_path(&cfg.data.episodes, "episodes")?;
    let Records::Episodes(episodes) = read_dataset(dir)? else {
        bail!(Error::Config(format!("{} does not hold demonstrations", dir.display())));
    };
    let stage1 = init.map(Checkpoint::load).transpose()?;
    if let (Some(ck), Some(path)) = (&stage1, init) {
        if ck.stage != Stage::Pretrain {
            bail!(Error::CheckpointMismatch(format!("{} is not a stage-1 checkpoint", path.display())));
        }
    }
    with_staged_dir(out, |stage| {
        write_config_echo(stage, &cfg)?;
        let mut sink = MetricsSink::new(stage, cfg.log_every, cfg.policy.steps)?;
        let outcome = train_policy_with(&episodes, &cfg.encoder, &cfg.policy, cfg.seed, stage1.as_ref(), |m| {
            let mut v = serde_json::to_value(m).expect("metrics serialize");
            v["stage"] = json!("policy");
            sink.emit(m.step, v);
        })?;
        sink.finish(stage)?;
        let ck = Checkpoint { stage: Stage::Policy, config: serde_json::to_value(&cfg)?, params: outcome.model.store };
        ck.save(&stage.join("checkpoint.bin"))?;
        Ok(())
    })
}

fn eval(
    checkpoint: Option<&Path>,
    oracle: bool,
    config: Option<&Path>,
    episodes: Option<usize>,
    seed: Option<u64>,
    log: Option<&Path>,
) -> Result<()> {
    let (cfg, model) = match checkpoint {
        Some(path) if !oracle => {
            let ck = Checkpoint::load(path)?;
            if ck.stage != Stage::Policy {
                bail!(Error::CheckpointMismatch(format!("{} is a stage-1 checkpoint, eval needs a policy", path.display())));
            }
            let mut cfg: RunConfig =
                serde_json::from_value(ck.config.clone()).map_err(|e| Error::CheckpointMismatch(format!("embedded config: {e}")))?;
            if let Some(c) = config {
                cfg.env = RunConfig::load(c)?.env;
            }
            let model = PolicyModel::new(cfg.encoder.clone(), cfg.policy.clone(), ck.params)?;
            (cfg, Some(model))
        }
        _ => (load_config(config)?, None),
    };
    let episodes = episodes.unwrap_or(cfg.eval.episodes);
    let seed = seed.unwrap_or(cfg.eval.seed);
    let report = match &model {
        Some(m) => evaluate_policy(m, &cfg.env, episodes, seed, Execution::default())?,
        None => evaluate_policy(&OracleController { cfg: cfg.env.clone() }, &cfg.env, episodes, seed, Execution::default())?,
    };
    if let Some(path) = log {
        let text = serde_json::to_string_pretty(&report)?;
        lift3d::checkpoint::write_atomic(path, text.as_bytes())?;
    }
    println!("{:.3}", report.success_rate);
    Ok(())
}

fn ablate(grid: &Path, out: &Path, parallel: bool) -> Result<()> {
    let text = fs::read_to_string(grid).map_err(|e| Error::io(grid, e))?;
    let grid = AblationGrid::from_json(&text)?;
    let exec = if parallel { Execution::Parallel } else { Execution::Sequential };
    let report = run_ablation(&grid, exec, |row| {
        let status = row.error.as_deref().unwrap_or("ok");
        eprintln!("{}: success {:?} in {:.1}s ({status})", row.name, row.success_rate, row.wall_seconds);
    })?;
    with_staged_dir(out, |dir| {
        for (name, body) in [("report.json", report.to_json_pretty() + "\n"), ("report.txt", report.to_table())] {
            let path = dir.join(name);
            fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    })?;
    print!("{}", report.to_table());
    Ok(())
}
