use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use wedepth_core::decoder::DepthRange;
use wedepth_core::scenegen::{Dataset, SceneConfig, Split};
use wedepth_core::substrate::{rng, wtns, GradReport, Tensor};
use wedepth_core::train::{self, checkpoint, export, RunConfig, Trainer};
use wedepth_core::{Error, Model, ModelConfig};

#[derive(Parser)]
#[command(name = "wedepth", version, about = "Dual-branch monocular depth estimation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic RGB-D dataset.
    GenData(GenData),
    /// Write a complete default run configuration.
    InitConfig {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train from a run configuration.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Train and evaluate all eight component combinations.
    Ablate(TrainArgs),
    /// Predict depth for one image.
    Infer(InferArgs),
    /// Compare analytic and numeric gradients of the whole model.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 16)]
    train: usize,
    #[arg(long, default_value_t = 4)]
    test: usize,
    #[arg(long, default_value_t = 224)]
    height: usize,
    #[arg(long, default_value_t = 224)]
    width: usize,
    #[arg(long, default_value_t = 4)]
    objects: usize,
}

#[derive(Args, Clone, Copy)]
struct ToggleFlags {
    #[arg(long)]
    no_partition: bool,
    #[arg(long)]
    no_enhance: bool,
    #[arg(long)]
    no_inject_patterns: bool,
    #[arg(long)]
    no_inject_image: bool,
}

impl ToggleFlags {
    fn apply(&self, cfg: &mut ModelConfig) {
        let t = &mut cfg.toggles;
        t.partition &= !self.no_partition;
        t.enhance &= !self.no_enhance;
        t.inject_patterns &= !self.no_inject_patterns;
        t.inject_image &= !self.no_inject_image;
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long)]
    deterministic: bool,
    /// Continue from this checkpoint directory.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    toggles: ToggleFlags,
}

impl TrainArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(&self.config)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.output = o.clone();
        }
        if let Some(m) = self.max_steps {
            cfg.schedule.max_steps = Some(m);
        }
        cfg.deterministic |= self.deterministic;
        self.toggles.apply(&mut cfg.model);
        cfg.validate()?;
        cfg.check_paths()?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset root; defaults to the one recorded in the checkpoint.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Depth cap in meters; defaults to the configured one.
    #[arg(long)]
    cap: Option<f64>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// WTNS1 tensor (3×H×W in [0, 1]) or a PNG/PNM image.
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Model configuration JSON; the small built-in one when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    #[command(flatten)]
    toggles: ToggleFlags,
}

fn gen_data(a: &GenData) -> Result<()> {
    let cfg = SceneConfig {
        height: a.height,
        width: a.width,
        depth: DepthRange::default(),
        n_objects: a.objects,
    };
    let ds = Dataset::generate(&a.out, &cfg, a.seed, a.train, a.test)?;
    println!("wrote {} samples to {}", ds.index.samples.len(), a.out.display());
    Ok(())
}

fn run_train(a: &TrainArgs) -> Result<()> {
    let cfg = a.resolve()?;
    let samples = train::load_split(&cfg.data, Split::Train)?;
    let mut trainer = match &a.resume {
        Some(dir) => Trainer::resume(cfg, samples, dir)?,
        None => Trainer::new(cfg, samples)?,
    };
    let summary = trainer.run()?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn run_eval(a: &EvalArgs) -> Result<()> {
    let report = train::evaluate_checkpoint(&a.checkpoint, a.data.as_deref(), a.split.into(), a.cap)?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        print!("{}", report.table());
    }
    Ok(())
}

fn run_ablate(a: &TrainArgs) -> Result<()> {
    let cfg = a.resolve()?;
    let ds = Dataset::open(&cfg.data)?;
    let train_set: Vec<_> = ds.load(Split::Train)?.into_iter().map(Into::into).collect();
    let test_set: Vec<_> = ds.load(Split::Test)?.into_iter().map(Into::into).collect();
    let report = train::ablate(&cfg, &train_set, &test_set)?;
    let path = cfg.output.join("ablation.json");
    std::fs::write(&path, serde_json::to_string_pretty(&report)?)
        .with_context(|| format!("writing {}", path.display()))?;
    print!("{}", report.table());
    Ok(())
}

fn load_image(path: &Path) -> Result<Tensor<f32>> {
    if path.extension().is_some_and(|e| e == "wtns") {
        return Ok(wtns::read_as::<f32>(path)?);
    }
    let img = image::open(path)
        .map_err(|e| Error::Format {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?
        .to_rgb32f();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = p[c];
        }
    }
    Ok(Tensor::new(&[3, h, w], data)?)
}

fn run_infer(a: &InferArgs) -> Result<()> {
    let loaded = checkpoint::load(&a.checkpoint)?;
    let image = load_image(&a.image)?;
    let [h, w] = loaded.model.config().resolution;
    if image.shape() != [3, h, w] {
        return Err(Error::Config(format!(
            "image is {:?}, checkpoint expects [3, {h}, {w}]",
            image.shape()
        ))
        .into());
    }
    let depth = loaded.model.predict(&image)?;
    export::write_depth(&a.out, &depth, loaded.model.config().depth)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

fn run_gradcheck(a: &GradcheckArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str::<ModelConfig>(&text).map_err(|e| Error::Json {
                path: p.clone(),
                source: e,
            })?
        }
        None => ModelConfig::toy(),
    };
    a.toggles.apply(&mut cfg);
    let mut model = Model::<f64>::new(&cfg, a.seed)?;
    let [h, w] = cfg.resolution;
    let mut r = rng::stream(a.seed, rng::label("gradcheck"));
    let image = rng::uniform(&mut r, &[3, h, w], 0.0, 1.0);
    let gt = rng::uniform(&mut r, &[1, h, w], cfg.depth.min, cfg.depth.max);
    let valid = vec![true; h * w];
    let reports = model.grad_check(&image, &gt, &valid, wedepth_core::loss::TRAIN_LAMBDA, a.eps)?;
    for (name, rep) in &reports {
        println!("{name:<48} abs {:.3e} scale {:.3e}", rep.max_abs_err, rep.scale);
    }
    let overall = GradReport::combine(reports.iter().map(|(_, r)| r)).context("model has no trainable parameters")?;
    println!(
        "rel {:.3e} (abs {:.3e} / scale {:.3e}) over {} tensors",
        overall.max_rel_err,
        overall.max_abs_err,
        overall.scale,
        reports.len()
    );
    if overall.max_rel_err > a.tol {
        return Err(Error::Harness(format!(
            "gradient mismatch exceeds tolerance: {:.3e} > {:.1e}",
            overall.max_rel_err, a.tol
        ))
        .into());
    }
    Ok(())
}

fn category(e: &anyhow::Error) -> &'static str {
    if let Some(core) = e.downcast_ref::<Error>() {
        return core.category();
    }
    if e.downcast_ref::<std::io::Error>().is_some() {
        return "io";
    }
    if e.downcast_ref::<serde_json::Error>().is_some() {
        return "format";
    }
    "internal"
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            let first = e.to_string();
            let first = first.lines().next().unwrap_or_default();
            eprintln!("error: usage: {}", first.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
    };
    let result = match &cli.cmd {
        Cmd::GenData(a) => gen_data(a),
        Cmd::InitConfig { out } => RunConfig::default().save(out).map_err(Into::into),
        Cmd::Train(a) => run_train(a),
        Cmd::Eval(a) => run_eval(a),
        Cmd::Ablate(a) => run_ablate(a),
        Cmd::Infer(a) => run_infer(a),
        Cmd::Gradcheck(a) => run_gradcheck(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {}: {msg}", category(&e));
            ExitCode::FAILURE
        }
    }
}

