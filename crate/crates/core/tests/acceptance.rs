//! Acceptance suite: one PASS/FAIL line per criterion, then a non-zero exit
//! if any failed. Runs sequentially so the timing limits are meaningful.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use wedepth_core::decoder::DepthRange;
use wedepth_core::enhancer::{Enhancer, EnhancerConfig};
use wedepth_core::loss::{compute_metrics, si_loss, EvalWindow, MetricsReport, THRESHOLDS};
use wedepth_core::nn::{Ctx, ParamStore};
use wedepth_core::pei::{build_mask, Toggles};
use wedepth_core::scenegen::{generate, SceneConfig};
use wedepth_core::substrate::{rng, GradReport, Tape, Tensor};
use wedepth_core::train::{ablate, evaluate, Prepared, RunConfig, Trainer};
use wedepth_core::{Model, ModelConfig};

const GRADCHECK_TOL: f64 = 1e-6;
const GRADCHECK_EPS: f64 = 1e-5;
const GRADCHECK_LIMIT: Duration = Duration::from_secs(120);
const ISOLATION_TOL: f64 = 1e-12;
const SCALE_TOL: f64 = 1e-10;
const OVERFIT_DELTA1: f64 = 0.95;
const OVERFIT_LOSS_RATIO: f64 = 0.10;
const OVERFIT_LIMIT: Duration = Duration::from_secs(15 * 60);
const ORACLE_TOL: f64 = 1e-6;
const RESIZE_TOL: f64 = 1e-6;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: String) -> Outcome {
    if ok {
        Ok(msg)
    } else {
        Err(msg)
    }
}

fn scenes(n: usize, size: usize, seed: u64) -> Vec<Prepared> {
    let cfg = SceneConfig {
        height: size,
        width: size,
        ..SceneConfig::default()
    };
    (0..n)
        .map(|i| generate(seed + i as u64, &cfg).expect("scene").into())
        .collect()
}

/// 64×64 model with every component, cheap enough for many steps.
fn small_run(dir: &Path, steps: u64) -> RunConfig {
    RunConfig {
        seed: 3,
        model: ModelConfig {
            resolution: [64, 64],
            channels: [8, 16, 24, 32],
            enhancer: EnhancerConfig {
                patch: 8,
                width: 32,
                heads: 4,
                layers: 4,
            },
            enhancer_weights: None,
            patterns: 4,
            toggles: Toggles::ALL,
            decoder_hidden: 8,
            depth: DepthRange::default(),
        },
        schedule: wedepth_core::train::ScheduleConfig {
            epochs: 1000,
            warmup_epochs: 1,
            batch_size: 2,
            max_steps: Some(steps),
            checkpoint_every: 0,
        },
        data: dir.join("unused"),
        output: dir.to_path_buf(),
        deterministic: true,
        ..RunConfig::default()
    }
}

fn full_stack_gradcheck() -> Outcome {
    let cfg = ModelConfig::toy();
    let mut model = Model::<f64>::new(&cfg, 7).map_err(|e| e.to_string())?;
    let [h, w] = cfg.resolution;
    let mut r = rng::stream(7, 99);
    let image = rng::uniform(&mut r, &[3, h, w], 0.0, 1.0);
    let gt = rng::uniform(&mut r, &[1, h, w], 0.5, 8.0);
    let valid: Vec<bool> = (0..h * w).map(|i| i % 7 != 3).collect();
    let t0 = Instant::now();
    let reports = model
        .grad_check(&image, &gt, &valid, 0.5, GRADCHECK_EPS)
        .map_err(|e| e.to_string())?;
    let took = t0.elapsed();
    let n = model.store.num_trainable_elements();
    let overall = GradReport::combine(reports.iter().map(|(_, r)| r)).ok_or("no trainable parameters")?;
    let (name, own) = reports
        .iter()
        .max_by(|a, b| a.1.max_rel_err.total_cmp(&b.1.max_rel_err))
        .ok_or("no trainable parameters")?;
    ensure(
        overall.max_rel_err <= GRADCHECK_TOL && took < GRADCHECK_LIMIT,
        format!(
            "{} tensors / {n} scalars, rel {:.2e} (tol {GRADCHECK_TOL:.0e}), max abs {:.1e} against gradient scale {:.1e}; \
             largest per-tensor ratio {:.1e} at {name} whose gradient scale is {:.1e}; {:.1}s",
            reports.len(),
            overall.max_rel_err,
            overall.max_abs_err,
            overall.scale,
            own.max_rel_err,
            own.scale,
            took.as_secs_f64()
        ),
    )
}

fn frozen_enhancer() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = small_run(dir.path(), 50);
    let reference = Model::<f32>::new(&cfg.model, cfg.seed)
        .map_err(|e| e.to_string())?
        .store
        .frozen_checksum();
    let mut t = Trainer::new(cfg, scenes(8, 64, 500)).map_err(|e| e.to_string())?;
    let summary = t.run().map_err(|e| e.to_string())?;
    let after = t.model.store.frozen_checksum();
    let manifest = wedepth_core::train::checkpoint::read_manifest(&summary.checkpoint).map_err(|e| e.to_string())?;
    let recorded = manifest.frozen_checksum;
    ensure(
        summary.steps == 50 && after == reference && recorded == format!("{reference:016x}"),
        format!("{} steps, checksum {reference:016x} -> {after:016x}, manifest {recorded}", summary.steps),
    )
}

fn mask_isolation() -> Outcome {
    let cfg = EnhancerConfig {
        patch: 14,
        width: 32,
        heads: 4,
        layers: 4,
    };
    let mut store = ParamStore::<f64>::new();
    let enh = Enhancer::new(&mut store, &mut rng::stream(1, 0), cfg, (28, 28)).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    let mut cases = 0;
    for &n in &[2usize, 8, 50] {
        for &m in &[4usize, 64, 256] {
            let mask = build_mask(n, m).map_err(|e| e.to_string())?;
            let mut r = rng::stream(n as u64, m as u64);
            let x = rng::normal::<f64>(&mut r, &[n + m, 32], 1.0);
            let k = (n * 7 + m) % n;
            let mut y = x.clone();
            for c in 0..32 {
                y.data_mut()[k * 32 + c] += 0.5 + c as f64 * 0.1;
            }
            for layer_only in [true, false] {
                let run = |input: &Tensor<f64>| {
                    let tape = Tape::new();
                    let ctx = Ctx::new(&tape, &store);
                    let v = tape.constant(input.clone());
                    let out = if layer_only {
                        enh.run_attention(&ctx, 0, v, &mask)
                    } else {
                        enh.run_layer(&ctx, 0, v, &mask)
                    };
                    out.map(|o| (*tape.value(o)).clone())
                };
                let a = run(&x).map_err(|e| e.to_string())?;
                let b = run(&y).map_err(|e| e.to_string())?;
                for j in (0..n).filter(|&j| j != k) {
                    for c in 0..32 {
                        worst = worst.max((a.data()[j * 32 + c] - b.data()[j * 32 + c]).abs());
                    }
                }
                // The perturbation must actually reach the image rows.
                let image_moved = (n * 32..(n + m) * 32).any(|i| a.data()[i] != b.data()[i]);
                if !image_moved {
                    return Err(format!("image rows ignored pattern {k} at N={n}, M={m}"));
                }
                cases += 1;
            }
        }
    }
    ensure(
        worst <= ISOLATION_TOL,
        format!("{cases} cases, max change in other pattern rows {worst:.1e} (tol {ISOLATION_TOL:.0e})"),
    )
}

fn scale_invariance() -> Outcome {
    let gt = rng::uniform::<f64>(&mut rng::stream(4, 0), &[1, 16, 16], 0.2, 9.0);
    let valid: Vec<bool> = (0..256).map(|i| i % 5 != 0).collect();
    let mut worst = 0.0f64;
    for c in [0.5, 2.0, 10.0] {
        let tape = Tape::new();
        let pred = tape.constant(gt.map(|g| c * g));
        let l = si_loss(&tape, pred, &gt, &valid, 1.0).map_err(|e| e.to_string())?;
        worst = worst.max(tape.value(l).item().abs());
    }
    ensure(worst <= SCALE_TOL, format!("max |loss| over c in {{0.5, 2, 10}}: {worst:.1e} (tol {SCALE_TOL:.0e})"))
}

fn overfit() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let samples = scenes(16, 224, 100);
    let mut cfg = RunConfig::default();
    cfg.schedule.epochs = 125;
    cfg.schedule.max_steps = Some(500);
    cfg.output = dir.path().to_path_buf();
    let t0 = Instant::now();
    let mut t = Trainer::new(cfg.clone(), samples.clone()).map_err(|e| e.to_string())?;
    let before = t.mean_loss(&samples).map_err(|e| e.to_string())?;
    let summary = t.run().map_err(|e| e.to_string())?;
    let after = t.mean_loss(&samples).map_err(|e| e.to_string())?;
    let window = EvalWindow {
        min: cfg.model.depth.min,
        cap: cfg.eval_cap,
    };
    let m = evaluate(&t.model, &samples, window).map_err(|e| e.to_string())?;
    let took = t0.elapsed();
    let ratio = after / before;
    ensure(
        summary.steps == 500 && m.delta1 >= OVERFIT_DELTA1 && ratio <= OVERFIT_LOSS_RATIO && took < OVERFIT_LIMIT,
        format!(
            "{} steps, delta1 {:.4} (>= {OVERFIT_DELTA1}), SI loss {before:.4} -> {after:.5} = {:.1}% (<= {:.0}%), AbsRel {:.4}, {:.0}s",
            summary.steps,
            m.delta1,
            100.0 * ratio,
            100.0 * OVERFIT_LOSS_RATIO,
            m.abs_rel,
            took.as_secs_f64()
        ),
    )
}

fn ablation() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = small_run(dir.path(), 100);
    let train = scenes(8, 64, 700);
    let test = scenes(2, 64, 900);
    let report = ablate(&cfg, &train, &test).map_err(|e| e.to_string())?;
    let order: Vec<Toggles> = report.rows.iter().map(|r| r.toggles).collect();
    let finite = report
        .rows
        .iter()
        .all(|r| r.final_loss.is_finite() && r.metrics.abs_rel.is_finite() && r.metrics.rmse.is_finite());
    let steps = report.rows.iter().all(|r| r.steps == 100);
    for line in report.table().lines() {
        println!("      {line}");
    }
    ensure(
        order == Toggles::ABLATION_ROWS && finite && steps,
        format!("8 rows in table order: {}, finite: {finite}, 100 steps each: {steps}", order == Toggles::ABLATION_ROWS),
    )
}

/// Straightforward per-pixel reimplementation.
fn oracle(pred: &[f64], gt: &[f64], valid: &[bool], w: EvalWindow) -> Option<MetricsReport> {
    let mut idx = Vec::new();
    for i in 0..gt.len() {
        if valid[i] && gt[i] > 0.0 && gt[i] <= w.cap {
            idx.push(i);
        }
    }
    if idx.is_empty() {
        return None;
    }
    let p = |i: usize| pred[i].max(w.min).min(w.cap);
    let n = idx.len() as f64;
    let mean = |f: &dyn Fn(usize) -> f64| idx.iter().map(|&i| f(i)).sum::<f64>() / n;
    let d = |i: usize| p(i).ln() - gt[i].ln();
    let md = mean(&d);
    let frac = |t: f64| mean(&|i| if (p(i) / gt[i]).max(gt[i] / p(i)) < t { 1.0 } else { 0.0 });
    Some(MetricsReport {
        abs_rel: mean(&|i| (p(i) - gt[i]).abs() / gt[i]),
        sq_rel: mean(&|i| (p(i) - gt[i]).powi(2) / gt[i]),
        rmse: mean(&|i| (p(i) - gt[i]).powi(2)).sqrt(),
        rmse_log: mean(&|i| d(i).powi(2)).sqrt(),
        log10: mean(&|i| (p(i).log10() - gt[i].log10()).abs()),
        silog: (mean(&|i| d(i).powi(2)) - md * md).max(0.0).sqrt(),
        delta1: frac(THRESHOLDS[0]),
        delta2: frac(THRESHOLDS[1]),
        delta3: frac(THRESHOLDS[2]),
        valid_pixel_count: idx.len() as u64,
    })
}

fn metric_oracle() -> Outcome {
    use rand::Rng;
    let hand = compute_metrics(&[1.0, 2.0, 4.0], &[2.0; 3], &[true; 3], EvalWindow { min: 0.1, cap: 10.0 })
        .map_err(|e| e.to_string())?;
    if hand.abs_rel != 0.5 || hand.delta1 != 1.0 / 3.0 {
        return Err(format!("hand case gave AbsRel {} delta1 {}", hand.abs_rel, hand.delta1));
    }
    let mut r = rng::stream(2024, 7);
    let mut worst = 0.0f64;
    let mut compared = 0;
    for _ in 0..100 {
        let gt: Vec<f64> = (0..16).map(|_| r.random_range(0.2..12.0)).collect();
        let pred: Vec<f64> = (0..16).map(|_| r.random_range(0.05..14.0)).collect();
        let valid: Vec<bool> = (0..16).map(|_| r.random_bool(0.8)).collect();
        let w = EvalWindow {
            min: 0.1,
            cap: r.random_range(4.0..12.0),
        };
        match (compute_metrics(&pred, &gt, &valid, w), oracle(&pred, &gt, &valid, w)) {
            (Ok(a), Some(b)) => {
                if a.valid_pixel_count != b.valid_pixel_count {
                    return Err("valid pixel counts differ".into());
                }
                for (x, y) in [
                    (a.abs_rel, b.abs_rel),
                    (a.sq_rel, b.sq_rel),
                    (a.rmse, b.rmse),
                    (a.rmse_log, b.rmse_log),
                    (a.log10, b.log10),
                    (a.silog, b.silog),
                    (a.delta1, b.delta1),
                    (a.delta2, b.delta2),
                    (a.delta3, b.delta3),
                ] {
                    worst = worst.max((x - y).abs());
                }
                compared += 1;
            }
            (Err(_), None) => {}
            _ => return Err("implementation and oracle disagree on validity".into()),
        }
    }
    ensure(
        worst <= ORACLE_TOL && compared >= 90,
        format!("hand case exact; {compared} random instances, max deviation {worst:.1e} (tol {ORACLE_TOL:.0e})"),
    )
}

fn shape_contract() -> Outcome {
    let cfg = ModelConfig::default();
    let model = Model::<f32>::new(&cfg, 0).map_err(|e| e.to_string())?;
    let tape = Tape::new();
    let ctx = Ctx::new(&tape, &model.store);
    let img = tape.constant(Tensor::full(&[3, 224, 224], 0.5f32));
    let pyr = model.encoder.encode(&ctx, img).map_err(|e| e.to_string())?;
    let shapes = pyr.shapes(&tape);
    let tokens = model.enhancer.patch_embed(&ctx, img).map_err(|e| e.to_string())?;
    let spatial: Vec<[usize; 2]> = shapes.iter().map(|s| [s[1], s[2]]).collect();
    let enhanced = model.features(&ctx, img).map_err(|e| e.to_string())?.shapes(&tape);
    ensure(
        spatial == [[56, 56], [28, 28], [14, 14], [7, 7]] && tokens.grid == (16, 16) && enhanced == shapes,
        format!("pyramid {spatial:?}, token grid {:?}, enhanced shapes preserved: {}", tokens.grid, enhanced == shapes),
    )
}

fn bilinear_exactness() -> Outcome {
    use rand::Rng;
    let mut r = rng::stream(31, 0);
    let (c, h, w) = (3, 7, 9);
    let coef: Vec<[f64; 4]> = (0..c)
        .map(|_| std::array::from_fn(|_| r.random_range(-2.0..2.0)))
        .collect();
    let f = |ch: usize, y: f64, x: f64| {
        let k = coef[ch];
        k[0] + k[1] * y + k[2] * x + k[3] * x * y
    };
    let mut data = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                data.push(f(ch, i as f64 / (h - 1) as f64, j as f64 / (w - 1) as f64));
            }
        }
    }
    let x = Tensor::<f64>::new(&[c, h, w], data).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    let mut sizes = Vec::new();
    for _ in 0..5 {
        let (oh, ow) = (r.random_range(2..40usize), r.random_range(2..40usize));
        sizes.push((oh, ow));
        let tape = Tape::new();
        let v = tape.constant(x.clone());
        let y = tape.value(tape.resize(v, oh, ow).map_err(|e| e.to_string())?);
        for ch in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let want = f(ch, i as f64 / (oh - 1) as f64, j as f64 / (ow - 1) as f64);
                    worst = worst.max((y.data()[(ch * oh + i) * ow + j] - want).abs());
                }
            }
        }
    }
    ensure(worst <= RESIZE_TOL, format!("targets {sizes:?}, max abs error {worst:.1e} (tol {RESIZE_TOL:.0e})"))
}

fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).expect("readable checkpoint") {
            let p = e.expect("entry").path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).expect("inside").display().to_string();
                out.insert(rel, fs::read(&p).expect("readable file"));
            }
        }
    }
    out
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let samples = scenes(6, 64, 300);
    let mut runs = Vec::new();
    for _ in 0..2 {
        let cfg = small_run(dir.path(), 10);
        let mut t = Trainer::new(cfg, samples.clone()).map_err(|e| e.to_string())?;
        let s = t.run().map_err(|e| e.to_string())?;
        runs.push(snapshot(&s.checkpoint));
        fs::remove_dir_all(&s.checkpoint).map_err(|e| e.to_string())?;
    }
    let files = runs[0].len();
    let bytes: usize = runs[0].values().map(Vec::len).sum();
    ensure(
        runs[0] == runs[1] && files > 0,
        format!("{files} files / {bytes} bytes after 10 steps, identical: {}", runs[0] == runs[1]),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("1 full-stack gradient check", full_stack_gradcheck),
        ("2 frozen enhancer checksum", frozen_enhancer),
        ("3 mask isolation", mask_isolation),
        ("4 scale invariance", scale_invariance),
        ("5 overfit sanity", overfit),
        ("6 ablation structure", ablation),
        ("7 metric oracle", metric_oracle),
        ("8 shape contract", shape_contract),
        ("9 bilinear exactness", bilinear_exactness),
        ("10 determinism", determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, run) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let t0 = Instant::now();
        let outcome = run();
        let secs = t0.elapsed().as_secs_f64();
        match outcome {
            Ok(msg) => println!("PASS  criterion {name}: {msg} [{secs:.1}s]"),
            Err(msg) => {
                failed += 1;
                println!("FAIL  criterion {name}: {msg} [{secs:.1}s]");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
