//! End-to-end acceptance checks, one line per criterion.
//!
//! Runs as a plain binary so the report is always printed. Pass criterion
//! numbers to run a subset: `cargo test -p lift3d --test acceptance -- 2 3`.

use std::collections::BTreeSet;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use lift3d::ablation::{run_ablation, validate_report, AblationGrid, Axes, GridData};
use lift3d::autodiff::Mat;
use lift3d::checkpoint::{Checkpoint, Stage};
use lift3d::config::RunConfig;
use lift3d::encoder::{is_base, Encoder2D, EncoderConfig};
use lift3d::envdata::dataset::{read_dataset, read_manifest, write_dataset, Records};
use lift3d::envdata::{gen_reach_task, EnvConfig, EpisodeRecord, PretrainRecord};
use lift3d::geometry::{farthest_point_sample, knn_group, Image, Point3, RgbImage};
use lift3d::masking::{plan_mask, MaskPlan};
use lift3d::nn::{Graph, ParamStore, TrainMask};
use lift3d::pe_lifting::{lift_positional_embedding, Face, PeGrid, VirtualPlaneSet};
use lift3d::policy::{
    encode_pointcloud, evaluate_policy, explicit_loss, init_policy_params, predict_action, train_policy, ActionLossWeights,
    ActionVars, PeMode, PolicyConfig, PolicyModel, Pose7DoF, UpdateStrategy,
};
use lift3d::pretrain::{
    evaluate_pretrain, implicit_loss, init_pretrain_params, pretrain_run, pretrain_run_with, DepthTarget, LossWeights,
    MaeDecoder, MaskStrategy, PretrainConfig, ReconTarget,
};
use lift3d::tokenizer3d::{TokenizerConfig, TokenizerLayer};
use lift3d::Execution;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(limit: Duration, t: Instant, what: &str) -> Result<(), String> {
    let e = t.elapsed();
    ensure(e < limit, || format!("{what} took {e:.1?} (limit {limit:?})"))
}

fn sq(a: &Point3, b: &Point3) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

fn fps_oracle(points: &[Point3], m: usize, seed: u64) -> Vec<usize> {
    let mut sel = vec![(seed % points.len() as u64) as usize];
    while sel.len() < m {
        let mut best: Option<(f64, usize)> = None;
        for i in 0..points.len() {
            if sel.contains(&i) {
                continue;
            }
            let d = sel.iter().map(|&s| sq(&points[i], &points[s])).fold(f64::INFINITY, f64::min);
            if best.is_none_or(|(bd, _)| d > bd) {
                best = Some((d, i));
            }
        }
        sel.push(best.expect("unselected point remains").1);
    }
    sel
}

fn knn_oracle(center: &Point3, points: &[Point3], k: usize) -> Vec<usize> {
    let mut all: Vec<(f64, usize)> = points.iter().enumerate().map(|(i, p)| (sq(p, center), i)).collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    all.into_iter().take(k).map(|(_, i)| i).collect()
}

fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point3> {
    match rng.gen_range(0..3) {
        // Integer lattice: many exact distance ties.
        0 => (0..n).map(|_| [0, 1, 2].map(|_| rng.gen_range(-3..=3) as f64)).collect(),
        // Few distinct points, many duplicates.
        1 => {
            let base: Vec<Point3> = (0..rng.gen_range(1..=8)).map(|_| [0, 1, 2].map(|_| rng.gen_range(-1.0..1.0))).collect();
            (0..n).map(|_| *base.choose(rng).unwrap()).collect()
        }
        _ => (0..n).map(|_| [0, 1, 2].map(|_| rng.gen_range(-1.0..1.0))).collect(),
    }
}

fn c1_geometry() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut checks = 0;
    for case in 0..200 {
        let n = rng.gen_range(1..=512);
        let pts = random_cloud(&mut rng, n);
        let m = rng.gen_range(1..=n.min(96));
        let seed = rng.gen();
        let got = farthest_point_sample(&pts, m, seed).map_err(|e| e.to_string())?;
        ensure(got == fps_oracle(&pts, m, seed), || format!("cloud {case}: FPS differs (n={n}, m={m})"))?;
        let k = rng.gen_range(1..=n.min(48));
        let centers: Vec<Point3> = if rng.gen_bool(0.5) { got.iter().map(|&i| pts[i]).collect() } else { random_cloud(&mut rng, 16) };
        let groups = knn_group(&centers, &pts, k).map_err(|e| e.to_string())?;
        for (c, g) in centers.iter().zip(&groups) {
            ensure(*g == knn_oracle(c, &pts, k), || format!("cloud {case}: kNN differs (n={n}, k={k})"))?;
        }
        checks += 1 + centers.len();
    }
    within(Duration::from_secs(60), t, "oracle comparison")?;
    Ok(format!("200 clouds, {checks} index lists identical, {:.1?}", t.elapsed()))
}

fn c2_pe_lifting() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for side in 2..=14 {
        let dim = 8;
        let grid = PeGrid::new(side, dim, (0..side * side * dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        for face in Face::ALL {
            let planes = VirtualPlaneSet::from_faces(vec![face]).unwrap();
            let (ua, va) = face.basis();
            let nrm = face.normal();
            let span = (side - 1) as f64;
            for r in 0..side {
                for c in 0..side {
                    let (su, sv) = (2.0 * r as f64 / span - 1.0, 2.0 * c as f64 / span - 1.0);
                    let h = rng.gen_range(-1.0..1.0);
                    let p: Point3 = [0, 1, 2].map(|a| ua[a] * su + va[a] * sv + nrm[a] * h);
                    let lifted = lift_positional_embedding(&[p], &planes, &grid);
                    for (x, y) in lifted.data.iter().zip(grid.node(r, c)) {
                        worst = worst.max((x - y).abs());
                    }
                }
            }
        }
    }
    ensure(worst <= 1e-6, || format!("node lookup error {worst:e}"))?;
    let mut worst_const: f64 = 0.0;
    for n in [1, 2, 4, 6] {
        let planes = VirtualPlaneSet::standard(n).unwrap();
        for side in [1, 2, 7, 14] {
            let value: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let grid = PeGrid::new(side, 6, value.iter().cycle().take(side * side * 6).copied().collect()).unwrap();
            let coords: Vec<Point3> = (0..64).map(|_| [0, 1, 2].map(|_| rng.gen_range(-1.5..1.5))).collect();
            let out = lift_positional_embedding(&coords, &planes, &grid);
            for row in out.data.chunks(6) {
                for (x, y) in row.iter().zip(&value) {
                    worst_const = worst_const.max((x - y).abs());
                }
            }
        }
    }
    ensure(worst_const <= 1e-6, || format!("constant grid error {worst_const:e}"))?;
    Ok(format!("node lookup max error {worst:.1e}, constant grid max error {worst_const:.1e}"))
}

fn c3_masking() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for case in 0..1000 {
        let n = *[49usize, 196, 256].choose(&mut rng).unwrap();
        let high = rng.gen_range(0.0..1.0);
        let scores: Vec<f64> = (0..n)
            .map(|_| match rng.gen_range(0.0..1.0) {
                // Exactly at the threshold counts as affordance.
                u if u < 0.05 => 0.5,
                u if u < high => rng.gen_range(0.5..=1.0),
                _ => rng.gen_range(0.0..0.5),
            })
            .collect();
        let seed = rng.gen();
        let plan = plan_mask(&scores, 0.5, 0.75, seed).map_err(|e| e.to_string())?;
        let expected = (3 * n).div_ceil(4);
        let masked = plan.masked();
        ensure(masked.len() == expected, || format!("case {case}: {} masked of {n}, expected {expected}", masked.len()))?;
        ensure(plan.masked_affordance.iter().all(|&i| scores[i] >= 0.5), || format!("case {case}: low-score token in affordance set"))?;
        let all: BTreeSet<usize> = masked.iter().chain(&plan.visible).copied().collect();
        ensure(all.len() == n && masked.len() + plan.visible.len() == n, || format!("case {case}: not a partition"))?;
        let again = plan_mask(&scores, 0.5, 0.75, seed).unwrap();
        ensure(bitwise_plan(&plan) == bitwise_plan(&again), || format!("case {case}: plan not reproducible"))?;
    }
    Ok("1000 plans: exact counts, affordance subset, bitwise reproducible".into())
}

fn bitwise_plan(p: &MaskPlan) -> (Vec<usize>, Vec<usize>, Vec<usize>, u64, u64) {
    (p.visible.clone(), p.masked_affordance.clone(), p.masked_background.clone(), p.theta.to_bits(), p.ratio.to_bits())
}

fn random_image(rng: &mut ChaCha8Rng, side: usize) -> RgbImage {
    Image::from_pixels(side, side, (0..side * side).map(|_| [0, 1, 2].map(|_| rng.gen_range(0.0..1.0))).collect()).unwrap()
}

fn c4_adapter_identity() -> Outcome {
    let enc_cfg = EncoderConfig::default();
    let cfg = PretrainConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let store = init_pretrain_params(&enc_cfg, &cfg, 9);
    let adapted = Encoder2D::new(enc_cfg.clone(), true);
    let frozen = adapted.reference();
    let mask = TrainMask::none(&store);
    for case in 0..50 {
        let image = random_image(&mut rng, enc_cfg.image_side());
        let mut idx: Vec<usize> = (0..enc_cfg.tokens()).collect();
        idx.shuffle(&mut rng);
        idx.truncate(rng.gen_range(1..=enc_cfg.tokens()));
        let run = |e: &Encoder2D| {
            let mut g = Graph::new(&store, &mask);
            let v = e.encode_patches(&mut g, &image, &idx).unwrap();
            g.value(v).data.iter().map(|x| x.to_bits()).collect::<Vec<u64>>()
        };
        ensure(run(&adapted) == run(&frozen), || format!("input {case}: adapted output differs from frozen"))?;
    }
    let records = toy_pretrain_records(16, &enc_cfg);
    let out = pretrain_run(&records, &enc_cfg, &PretrainConfig { steps: 1, ..cfg }, 9).map_err(|e| e.to_string())?;
    let d = out.log[0].distill;
    ensure(d.to_bits() == 0.0f64.to_bits(), || format!("step-0 distillation {d:e}"))?;
    Ok("50 inputs bitwise identical; step-0 distillation exactly 0".into())
}

fn toy_pretrain_records(n: u64, enc: &EncoderConfig) -> Vec<PretrainRecord> {
    let env = EnvConfig { pretrain_resolution: enc.image_side(), ..EnvConfig::default() };
    (0..n).map(|s| gen_reach_task(s, &env).unwrap().2).collect()
}

/// Central difference check of `analytic` against `f` at `x`.
struct FdCheck {
    worst: f64,
    count: usize,
}

impl FdCheck {
    const H: f64 = 1e-6;

    fn new() -> Self {
        Self { worst: 0.0, count: 0 }
    }

    fn compare(&mut self, what: &str, analytic: f64, plus: f64, minus: f64) -> Result<(), String> {
        let numeric = (plus - minus) / (2.0 * Self::H);
        let abs = (analytic - numeric).abs();
        let rel = abs / analytic.abs().max(numeric.abs()).max(1e-8);
        self.count += 1;
        // Both near zero: the relative error is dominated by roundoff.
        if abs > 1e-10 {
            self.worst = self.worst.max(rel);
        }
        ensure(rel < 1e-4 || abs <= 1e-10, || format!("{what}: analytic {analytic:e} numeric {numeric:e}"))
    }
}

fn c5_gradients() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut fd = FdCheck::new();
    let h = FdCheck::H;

    // implicit_loss with respect to its encoder-feature and prediction inputs.
    let (rows, d, cols) = (6, 8, 12);
    let rand_mat = |rng: &mut ChaCha8Rng, r: usize, c: usize| Mat::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect());
    let enc_out = rand_mat(&mut rng, rows, d);
    let reference = rand_mat(&mut rng, rows, d);
    let pred = rand_mat(&mut rng, 4, cols);
    let target = DepthTarget {
        values: rand_mat(&mut rng, 4, cols).map(|x| x.abs()),
        valid: Mat::from_vec(4, cols, (0..4 * cols).map(|_| if rng.gen_bool(0.8) { 1.0 } else { 0.0 }).collect()),
        tokens: vec![0, 3, 5, 7],
    };
    let w = LossWeights { distill: 0.7, recon: 1.3 };
    let empty = ParamStore::new();
    let none = TrainMask::none(&empty);
    let implicit = |e: &Mat, p: &Mat| {
        let mut g = Graph::new(&empty, &none);
        let (ev, pv) = (g.constant(e.clone()), g.constant(p.clone()));
        let l = implicit_loss(&mut g, ev, &reference, pv, &target, w).unwrap();
        g.value(l.total).item()
    };
    let mut g = Graph::new(&empty, &none);
    let ev = g.tape.variable(enc_out.clone());
    let pv = g.tape.variable(pred.clone());
    let l = implicit_loss(&mut g, ev, &reference, pv, &target, w).map_err(|e| e.to_string())?;
    let grads = g.tape.backward(l.total);
    let (ge, gp) = (grads.get(ev).unwrap().clone(), grads.get(pv).unwrap().clone());
    for i in 0..enc_out.data.len() {
        let (mut a, mut b) = (enc_out.clone(), enc_out.clone());
        a.data[i] += h;
        b.data[i] -= h;
        fd.compare(&format!("implicit d/enc[{i}]"), ge.data[i], implicit(&a, &pred), implicit(&b, &pred))?;
    }
    for i in 0..pred.data.len() {
        let (mut a, mut b) = (pred.clone(), pred.clone());
        a.data[i] += h;
        b.data[i] -= h;
        fd.compare(&format!("implicit d/pred[{i}]"), gp.data[i], implicit(&enc_out, &a), implicit(&enc_out, &b))?;
    }

    // explicit_loss with respect to the predicted pose.
    let gt = Pose7DoF::new([0.1, -0.2, 0.05], [0.3, -0.4, 0.5], 1.0);
    let aw = ActionLossWeights { translation: 2.0, rotation: 0.5, gripper: 1.5 };
    let pose = [rand_mat(&mut rng, 1, 3), rand_mat(&mut rng, 1, 3), Mat::from_vec(1, 1, vec![0.3])];
    let explicit = |p: &[Mat; 3]| {
        let mut g = Graph::new(&empty, &none);
        let a = ActionVars { translation: g.constant(p[0].clone()), rotation: g.constant(p[1].clone()), gripper: g.constant(p[2].clone()) };
        let l = explicit_loss(&mut g, &a, &gt, aw).unwrap();
        g.value(l.total).item()
    };
    let mut g = Graph::new(&empty, &none);
    let vars = pose.clone().map(|m| g.tape.variable(m));
    let a = ActionVars { translation: vars[0], rotation: vars[1], gripper: vars[2] };
    let l = explicit_loss(&mut g, &a, &gt, aw).map_err(|e| e.to_string())?;
    let grads = g.tape.backward(l.total);
    for (j, v) in vars.iter().enumerate() {
        let an = grads.get(*v).unwrap();
        for i in 0..pose[j].data.len() {
            let (mut p, mut m) = (pose.clone(), pose.clone());
            p[j].data[i] += h;
            m[j].data[i] -= h;
            fd.compare(&format!("explicit d/pose{j}[{i}]"), an.data[i], explicit(&p), explicit(&m))?;
        }
    }

    // Stage-1 chain: adapters and decoder through encoder, decoder and implicit_loss.
    let enc_cfg = EncoderConfig { grid: 4, patch: 2, width: 8, heads: 2, mlp_ratio: 2, ..Default::default() };
    let pcfg = PretrainConfig::default();
    let mut store = init_pretrain_params(&enc_cfg, &pcfg, 3);
    for p in store.params_mut() {
        if p.name.ends_with(".up") {
            p.value = p.value.map(|_| rng.gen_range(-0.3..0.3));
        }
    }
    let record = &toy_pretrain_records(1, &enc_cfg)[0];
    let plan = plan_mask(&vec![0.0; enc_cfg.tokens()], 0.5, 0.75, 1).unwrap();
    let enc = Encoder2D::new(enc_cfg.clone(), true);
    let dec = MaeDecoder { enc: enc_cfg.clone(), cfg: pcfg.decoder.clone(), target: ReconTarget::Depth };
    let target = DepthTarget::build(record, &plan, &enc_cfg, ReconTarget::Depth).unwrap();
    let reference = lift3d::pretrain::reference_features(&enc, &store, &record.image, &plan).unwrap();
    let stage1 = |s: &ParamStore, m: &TrainMask| {
        let mut g = Graph::new(s, m);
        let f = lift3d::pretrain::encode_visible(&enc, &mut g, &record.image, &plan).unwrap();
        let p = dec.decode(&mut g, f, &plan).unwrap();
        let l = implicit_loss(&mut g, f, &reference, p, &target, LossWeights::default()).unwrap();
        (g.value(l.total).item(), g.param_grads(l.total))
    };
    let all = TrainMask::new(&store, |n| !is_base(n));
    let (_, grads) = stage1(&store, &all);
    let none_s = TrainMask::none(&store);
    let names: Vec<String> = store.iter().filter(|p| !is_base(&p.name)).map(|p| p.name.clone()).collect();
    for name in names.iter().step_by(3) {
        let idx = store.index_of(name).unwrap();
        let an = grads.grads[idx].as_ref().ok_or(format!("no gradient for {name}"))?;
        for k in (0..an.data.len()).step_by(7).take(3) {
            let (mut a, mut b) = (store.clone(), store.clone());
            a.params_mut()[idx].value.data[k] += h;
            b.params_mut()[idx].value.data[k] -= h;
            fd.compare(&format!("{name}[{k}]"), an.data[k], stage1(&a, &none_s).0, stage1(&b, &none_s).0)?;
        }
    }

    // Stage-2 chain at D=8, k=8: tokenizer, adapters, state embedding, head.
    let cfg = PolicyConfig {
        tokenizer: TokenizerConfig {
            layers: vec![TokenizerLayer { points: 8, dim: 8 }],
            k_nn: 4,
            output_dim: 8,
            point_xyz: true,
            ..Default::default()
        },
        head_hidden: 8,
        ..Default::default()
    };
    let mut store = init_policy_params(&enc_cfg, &cfg, 5, None).map_err(|e| e.to_string())?;
    for p in store.params_mut() {
        if p.name.ends_with(".up") {
            p.value = p.value.map(|_| rng.gen_range(-0.3..0.3));
        }
    }
    let model = PolicyModel::new(enc_cfg.clone(), cfg.clone(), store.clone()).map_err(|e| e.to_string())?;
    let env = EnvConfig { obs_points: 64, ..EnvConfig::default() };
    let ep = gen_reach_task(0, &env).unwrap().1;
    let obs = model.prepare(&ep.steps[1].cloud, &ep.steps[1].state).map_err(|e| e.to_string())?;
    let gt = ep.steps[1].action;
    let chain = |s: &ParamStore, m: &TrainMask| {
        let mut g = Graph::new(s, m);
        let f = encode_pointcloud(&mut g, &model.enc, &cfg, &obs).unwrap();
        let a = predict_action(&mut g, &cfg, f, &obs.state);
        let l = explicit_loss(&mut g, &a, &gt, cfg.weights).unwrap();
        (g.value(l.total).item(), g.param_grads(l.total))
    };
    let train = TrainMask::new(&store, |n| cfg.is_trainable(n));
    let (_, grads) = chain(&store, &train);
    let none_s = TrainMask::none(&store);
    let names: Vec<String> = store.iter().filter(|p| cfg.is_trainable(&p.name)).map(|p| p.name.clone()).collect();
    for name in &names {
        let idx = store.index_of(name).unwrap();
        let an = grads.grads[idx].as_ref().ok_or(format!("no gradient for {name}"))?;
        for k in (0..an.data.len()).step_by(5).take(3) {
            let (mut a, mut b) = (store.clone(), store.clone());
            a.params_mut()[idx].value.data[k] += h;
            b.params_mut()[idx].value.data[k] -= h;
            fd.compare(&format!("{name}[{k}]"), an.data[k], chain(&a, &none_s).0, chain(&b, &none_s).0)?;
        }
    }
    within(Duration::from_secs(300), t, "gradient checks")?;
    Ok(format!("{} derivatives, worst relative error {:.1e}, {:.1?}", fd.count, fd.worst, t.elapsed()))
}

fn c6_stage1_overfit() -> Outcome {
    let t = Instant::now();
    let enc = EncoderConfig::default();
    let cfg = PretrainConfig::default();
    ensure(enc.layers == 2 && enc.width == 32 && cfg.steps <= 2000, || "toy encoder or step budget changed".into())?;
    let records = toy_pretrain_records(16, &enc);
    let mut log = Vec::new();
    let out = pretrain_run_with(&records, &enc, &cfg, 6, |m| log.push(m.distill)).map_err(|e| e.to_string())?;
    let eval = evaluate_pretrain(&out.store, &records, &enc, &cfg, 6).map_err(|e| e.to_string())?;
    within(Duration::from_secs(300), t, "stage-1 overfit")?;
    ensure(eval.recon < 0.05, || format!("masked depth L1 {:.4} after {} steps", eval.recon, cfg.steps))?;
    let at100 = log[100];
    let after = log[101..].iter().copied().fold(0.0, f64::max);
    ensure(after < at100, || format!("distillation reached {after:.5} after step 100 (step 100: {at100:.5})"))?;
    Ok(format!(
        "masked depth L1 {:.4} after {} steps; distillation step 100 {at100:.5}, later max {after:.5}; {:.1?}",
        eval.recon,
        cfg.steps,
        t.elapsed()
    ))
}

fn reach_data(n: u64, env: &EnvConfig) -> (Vec<EpisodeRecord>, Vec<PretrainRecord>) {
    (0..n).map(|s| gen_reach_task(s, env).unwrap()).map(|(_, e, p)| (e, p)).unzip()
}

fn c7_stage2_rollout() -> Outcome {
    let run = RunConfig::default();
    let (enc, cfg, env) = (&run.encoder, &run.policy, &run.env);
    ensure(cfg.steps <= 3000, || format!("{} policy steps exceed the budget", cfg.steps))?;
    let (episodes, records) = reach_data(64, env);

    let t = Instant::now();
    let random = train_policy(&episodes, enc, cfg, run.seed, None).map_err(|e| e.to_string())?;
    let mse = random.model.evaluate_loss(&lift3d::policy::prepare_episodes(&random.model, &episodes).unwrap()).unwrap();
    let translation_mse = mse.translation;
    let report = evaluate_policy(&random.model, env, 100, 777, cfg.execution).map_err(|e| e.to_string())?;
    let elapsed = t.elapsed();

    let s1 = pretrain_run(&records, enc, &run.pretrain, run.seed).map_err(|e| e.to_string())?;
    let ckpt = Checkpoint { stage: Stage::Pretrain, config: json!({}), params: s1.store };
    let lifted = train_policy(&episodes, enc, cfg, run.seed, Some(&ckpt)).map_err(|e| e.to_string())?;
    let report1 = evaluate_policy(&lifted.model, env, 100, 777, cfg.execution).map_err(|e| e.to_string())?;

    let detail = format!(
        "translation MSE {translation_mse:.2e} m², success {:.2} random init / {:.2} stage-1 init, {elapsed:.1?}",
        report.success_rate, report1.success_rate
    );
    ensure(translation_mse < 1e-3, || format!("{detail}: translation MSE too high"))?;
    ensure(elapsed < Duration::from_secs(600), || format!("{detail}: over 10 min"))?;
    ensure(report.success_rate >= 0.90, || format!("{detail}: success below 0.90"))?;
    ensure(report1.success_rate >= report.success_rate, || format!("{detail}: stage-1 init regressed"))?;
    Ok(detail)
}

fn c8_freeze() -> Outcome {
    let enc = EncoderConfig::default();
    let env = EnvConfig::default();
    let (episodes, _) = reach_data(4, &env);
    let mut parts = Vec::new();
    for (update, frozen) in [(UpdateStrategy::Adapters, true), (UpdateStrategy::None, true), (UpdateStrategy::Full, false)] {
        let cfg = PolicyConfig { update, steps: 20, batch_size: 4, ..PolicyConfig::default() };
        let before = init_policy_params(&enc, &cfg, 8, None).map_err(|e| e.to_string())?.hash_where(is_base);
        let out = train_policy(&episodes, &enc, &cfg, 8, None).map_err(|e| e.to_string())?;
        let same = out.model.store.hash_where(is_base) == before;
        ensure(same == frozen, || format!("{update:?}: base hash unchanged = {same}"))?;
        parts.push(format!("{update:?} {}", if same { "unchanged" } else { "changed" }));
    }
    Ok(format!("base encoder hash: {}", parts.join(", ")))
}

fn c9_ablation() -> Outcome {
    let t = Instant::now();
    let grid = AblationGrid {
        base: json!({
            "pretrain": {"steps": 150},
            "policy": {"steps": 300},
            "eval": {"episodes": 20},
        }),
        axes: Axes {
            planes: vec![1, 2, 4, 6],
            update: vec![UpdateStrategy::Adapters, UpdateStrategy::None, UpdateStrategy::Full],
            tokenizer_layers: vec![1, 2, 3, 4],
            pe: vec![PeMode::Lifted, PeMode::Learnable],
            mask: vec![MaskStrategy::Affordance, MaskStrategy::Random],
            target: vec![ReconTarget::Depth, ReconTarget::Rgb, ReconTarget::Both],
            distill: vec![true, false],
        },
        data: GridData { demos: 16, pretrain_records: 16, seed: 9 },
    };
    let n = grid.expand().map_err(|e| e.to_string())?.len();
    ensure(n <= 24, || format!("{n} configs"))?;
    let report = run_ablation(&grid, Execution::default(), |_| {}).map_err(|e| e.to_string())?;
    let value = serde_json::to_value(&report).map_err(|e| e.to_string())?;
    validate_report(&value).map_err(|e| e.to_string())?;
    let failed: Vec<&str> = report.rows.iter().filter(|r| r.error.is_some()).map(|r| r.name.as_str()).collect();
    ensure(failed.is_empty(), || format!("configs failed: {failed:?}"))?;
    let mut by_depth: Vec<(usize, usize)> = report.rows.iter().map(|r| (r.tokenizer_layers, r.params.tokenizer)).collect();
    by_depth.sort_unstable();
    by_depth.dedup();
    let depths: Vec<usize> = by_depth.iter().map(|d| d.0).collect();
    ensure(depths == [1, 2, 3, 4], || format!("tokenizer depths {by_depth:?}"))?;
    ensure(by_depth.windows(2).all(|w| w[1].1 > w[0].1), || format!("tokenizer params by depth {by_depth:?}"))?;
    within(Duration::from_secs(3600), t, "ablation grid")?;
    let counts: Vec<String> = by_depth.iter().map(|(d, p)| format!("{d}:{p}")).collect();
    Ok(format!("{n} configs, schema valid, tokenizer params by depth {}; {:.1?}", counts.join(" < "), t.elapsed()))
}

fn c10_formats() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let env = EnvConfig::default();
    let (episodes, records) = reach_data(5, &env);
    let mut described = Vec::new();
    for (name, data) in [("episodes", Records::Episodes(episodes)), ("pretrain", Records::Pretrain(records))] {
        let a = dir.path().join(format!("{name}_a"));
        let b = dir.path().join(format!("{name}_b"));
        let manifest = write_dataset(&data, &a).map_err(|e| e.to_string())?;
        let back = read_dataset(&a).map_err(|e| e.to_string())?;
        ensure(back == data, || format!("{name}: records differ after round trip"))?;
        write_dataset(&back, &b).map_err(|e| e.to_string())?;
        for f in manifest.records.iter().map(|r| r.file.clone()).chain([lift3d::envdata::dataset::MANIFEST.to_string()]) {
            let (x, y) = (std::fs::read(a.join(&f)).unwrap(), std::fs::read(b.join(&f)).unwrap());
            ensure(x == y, || format!("{name}: {f} not byte-identical on rewrite"))?;
        }
        let victim = &manifest.records[2].file;
        let path = a.join(victim);
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        std::fs::write(&path, &bytes).unwrap();
        let err = read_dataset(&a).err().ok_or(format!("{name}: flipped byte in {victim} not detected"))?.to_string();
        ensure(err.contains(victim.as_str()), || format!("{name}: diagnostic does not name the record: {err}"))?;
        bytes.truncate(mid);
        std::fs::write(&path, &bytes).unwrap();
        let err2 = read_dataset(&a).err().ok_or(format!("{name}: truncated {victim} not detected"))?.to_string();
        ensure(err2.contains(victim.as_str()), || format!("{name}: diagnostic does not name the record: {err2}"))?;
        ensure(read_manifest(&a).is_ok(), || format!("{name}: manifest unreadable"))?;
        described.push(format!("{name} [{err}]"));
    }

    let enc = EncoderConfig::default();
    let cfg = PolicyConfig::default();
    let store = init_policy_params(&enc, &cfg, 10, None).map_err(|e| e.to_string())?;
    let mut exact = store.clone();
    for p in exact.params_mut() {
        p.value = p.value.map(|x| x as f32 as f64);
    }
    let ckpt = Checkpoint { stage: Stage::Policy, config: json!({"seed": 10}), params: exact };
    let bytes = ckpt.to_bytes().map_err(|e| e.to_string())?;
    let back = Checkpoint::from_bytes(&bytes, "memory").map_err(|e| e.to_string())?;
    ensure(back == ckpt, || "checkpoint differs after round trip".into())?;
    ensure(back.to_bytes().unwrap() == bytes, || "checkpoint bytes differ on rewrite".into())?;
    let path = dir.path().join("policy.ckpt");
    ckpt.save(&path).map_err(|e| e.to_string())?;
    let mut raw = std::fs::read(&path).unwrap();
    let last = raw.len() - 3;
    raw[last] ^= 0x01;
    std::fs::write(&path, &raw).unwrap();
    let err = Checkpoint::load(&path).err().ok_or("corrupted checkpoint not detected")?.to_string();
    ensure(err.contains("policy.ckpt"), || format!("checkpoint diagnostic lacks the file: {err}"))?;
    described.push(format!("checkpoint [{err}]"));
    Ok(format!("lossless round trips; corruption reported as {}", described.join("; ")))
}

const CRITERIA: [(&str, fn() -> Outcome); 10] = [
    ("geometric oracle equivalence", c1_geometry),
    ("lifted positional embedding degenerate cases", c2_pe_lifting),
    ("mask plan exactness", c3_masking),
    ("zero-adapter identity", c4_adapter_identity),
    ("gradient checks", c5_gradients),
    ("stage-1 overfit", c6_stage1_overfit),
    ("stage-2 overfit and rollout", c7_stage2_rollout),
    ("freeze contract", c8_freeze),
    ("ablation harness", c9_ablation),
    ("format round trips", c10_formats),
];

fn main() -> ExitCode {
    let only: BTreeSet<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, check)) in CRITERIA.iter().enumerate() {
        let n = i + 1;
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or(p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        match outcome {
            Ok(detail) => println!("criterion {n:>2} PASS  {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name}: {why}");
            }
        }
    }
    if failed > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
