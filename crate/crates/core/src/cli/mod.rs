//! The `mv2mae` command line. Exit codes: 0 success, 2 usage or config
//! error, 1 runtime failure.

pub mod config;
pub mod viz;

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::{Error, Result};
use crate::gradcheck::{run_gradcheck, Precision, PRIMITIVE_TOL};
use crate::masking::MaskStrategy;
use crate::numerics::Primitive;
use crate::synthdata::{generate_dataset, Dataset, GenConfig};
use crate::training::{evaluate, finetune, pretrain, THREADS_ENV};

pub use config::{RunConfig, Stage, WeightKind, KEYS};
pub use viz::{Canvas, PairSpec, QuerySpec, XattnRow};

#[derive(Debug, Parser)]
#[command(
    name = "mv2mae",
    version,
    about = "Multi-view masked autoencoder on synthetic multi-view video"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic multi-view dataset.
    GenData(GenArgs),
    /// Masked multi-view pre-training.
    Pretrain(RunArgs),
    /// Supervised fine-tuning, optionally from a pre-trained checkpoint.
    Finetune(RunArgs),
    /// Classify a dataset with a fine-tuned checkpoint.
    Eval(RunArgs),
    /// Write PPM figures.
    Viz(VizArgs),
    /// Finite-difference check of every primitive and the full model.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 200)]
    pub samples: usize,
    #[arg(long, default_value_t = 2)]
    pub views: usize,
    #[arg(long, default_value_t = 8)]
    pub classes: usize,
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 8)]
    pub frames: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Flat `key = value` file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub eval_dataset: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Single worker thread.
    #[arg(long)]
    pub deterministic: bool,
    /// Print the resolved configuration and exit.
    #[arg(long)]
    pub dump_config: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VizKind {
    MotionWeights,
    Recon,
    Xattn,
}

#[derive(Debug, Args)]
pub struct VizArgs {
    pub kind: VizKind,
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, default_value_t = 0)]
    pub sample: usize,
    /// View shown by motion-weights and used as source by recon and xattn.
    #[arg(long, default_value_t = 0)]
    pub view: usize,
    #[arg(long, default_value_t = 1)]
    pub target_view: usize,
    #[arg(long, value_delimiter = ',', default_value = "1,60,240")]
    pub temperatures: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    pub layer: usize,
    #[arg(long, default_value_t = 0)]
    pub head: usize,
    /// Target token whose attention row is drawn; default the first masked one.
    #[arg(long)]
    pub query: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Run the model check in float32 with the relaxed tolerance.
    #[arg(long)]
    pub f32: bool,
    /// Random draws per primitive.
    #[arg(long, default_value_t = 3)]
    pub seeds: u64,
    /// Corrupt one backward rule; for testing the checker.
    #[arg(long, hide = true)]
    pub inject_fault: Option<String>,
    /// Skip the full-model check.
    #[arg(long, hide = true)]
    pub primitives_only: bool,
}

/// Parses `args` (program name first), runs the command, prints to stdout
/// and stderr and returns the exit code.
pub fn run_from_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli.command) {
        Ok(out) => {
            print!("{out}");
            0
        }
        Err(Failure::Gradcheck(out)) => {
            print!("{out}");
            1
        }
        Err(Failure::Error(e)) => {
            eprintln!("error: {e}");
            if e.is_config() {
                2
            } else {
                1
            }
        }
    }
}

enum Failure {
    Error(Error),
    /// The report is printed before the nonzero exit.
    Gradcheck(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Error(e)
    }
}

fn run(cmd: Command) -> std::result::Result<String, Failure> {
    Ok(match cmd {
        Command::GenData(a) => gen_data(&a)?,
        Command::Pretrain(a) => match resolve(&a, Stage::Pretrain)? {
            Resolved::Dump(s) => s,
            Resolved::Run(c) => cmd_pretrain(&c)?,
        },
        Command::Finetune(a) => match resolve(&a, Stage::Finetune)? {
            Resolved::Dump(s) => s,
            Resolved::Run(c) => cmd_finetune(&c)?,
        },
        Command::Eval(a) => match resolve(&a, Stage::Finetune)? {
            Resolved::Dump(s) => s,
            Resolved::Run(c) => cmd_eval(&c)?,
        },
        Command::Viz(a) => match resolve(&a.run, Stage::Pretrain)? {
            Resolved::Dump(s) => s,
            Resolved::Run(c) => cmd_viz(&a, &c)?,
        },
        Command::Gradcheck(a) => return cmd_gradcheck(&a),
    })
}

enum Resolved {
    Dump(String),
    Run(Box<RunConfig>),
}

/// Defaults, then the config file, then `--set`, then named flags.
pub fn resolve_config(a: &RunArgs, stage: Stage) -> Result<RunConfig> {
    let mut c = RunConfig::defaults(stage);
    if let Some(p) = &a.config {
        c.apply_file(p)?;
    }
    for kv in &a.set {
        c.apply_assignment(kv)?;
    }
    let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
    for (key, value) in [
        ("dataset", path(&a.dataset)),
        ("eval_dataset", path(&a.eval_dataset)),
        ("checkpoint", path(&a.checkpoint)),
        ("out_dir", path(&a.out_dir)),
        ("seed", a.seed.map(|v| v.to_string())),
        ("epochs", a.epochs.map(|v| v.to_string())),
    ] {
        if let Some(v) = value {
            c.set(key, &v)?;
        }
    }
    Ok(c)
}

fn resolve(a: &RunArgs, stage: Stage) -> Result<Resolved> {
    let c = resolve_config(a, stage)?;
    if a.dump_config {
        return Ok(Resolved::Dump(c.dump()));
    }
    if a.deterministic {
        std::env::set_var(THREADS_ENV, "1");
    }
    Ok(Resolved::Run(Box::new(c)))
}

fn load_dataset(c: &RunConfig, key: &str) -> Result<Dataset> {
    Dataset::read(c.existing_path(key)?)
}

fn gen_data(a: &GenArgs) -> Result<String> {
    let cfg = GenConfig::uniform(a.seed, a.samples, a.views, a.classes, a.frames, a.size);
    cfg.validate()?;
    if a.samples == 0 {
        return Err(Error::config("samples", "must be positive"));
    }
    let ds = generate_dataset(&cfg)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let bytes = ds.write(&a.out)?;
    Ok(format!(
        "wrote {} samples={} views={} classes={} dims={}x{}x{}x{} bytes={}\n",
        a.out.display(),
        ds.samples.len(),
        ds.n_views,
        a.classes,
        ds.channels,
        ds.frames,
        ds.height,
        ds.width,
        bytes
    ))
}

fn cmd_pretrain(c: &RunConfig) -> Result<String> {
    let ds = load_dataset(c, "dataset")?;
    let cfg = c.pretrain_config(&ds)?;
    let out = c.out_dir()?;
    let resume = if c.resume {
        Some(c.existing_path("checkpoint")?)
    } else {
        None
    };
    let run = pretrain(&ds, &cfg, Some(out), resume)?;
    let mut s = String::new();
    for (e, m) in run.epoch_means.iter().enumerate() {
        let _ = writeln!(s, "epoch={} loss={m:?}", e + 1);
    }
    let _ = writeln!(s, "checkpoint={}", out.join("checkpoint.mv2c").display());
    Ok(s)
}

fn cmd_finetune(c: &RunConfig) -> Result<String> {
    let ds = load_dataset(c, "dataset")?;
    let test = match c.eval_dataset {
        Some(_) => Some(load_dataset(c, "eval_dataset")?),
        None => None,
    };
    let cfg = c.finetune_config(&ds)?;
    let out = c.out_dir()?;
    let pretrained = match c.checkpoint {
        Some(_) => Some(viz::load_model(c.existing_path("checkpoint")?)?.1),
        None => None,
    };
    let run = finetune(&ds, pretrained.as_ref(), &cfg, Some(out))?;
    let mut s = String::new();
    if let Some(m) = run.metrics.last() {
        let _ = writeln!(s, "final_ce={:?}", m.ce);
    }
    let _ = writeln!(s, "checkpoint={}", out.join("checkpoint.mv2c").display());
    if let Some(test) = test {
        let r = evaluate(&test, &run.params, &cfg.model, &c.eval_config())?;
        let _ = writeln!(s, "accuracy={:?}", r.accuracy);
    }
    Ok(s)
}

/// Per-view and fused logits as `sample, label, view, logits...`; the fused
/// row uses view `fused`.
pub fn logits_tsv(r: &crate::training::EvalResult, views: &[usize]) -> String {
    let mut s = String::from("sample\tlabel\tview\tlogits\n");
    for (i, y) in r.labels.iter().enumerate() {
        let row = |s: &mut String, v: &str, l: &[f64]| {
            let l: Vec<String> = l.iter().map(|x| format!("{x:?}")).collect();
            let _ = writeln!(s, "{i}\t{y}\t{v}\t{}", l.join(","));
        };
        for (j, v) in views.iter().enumerate() {
            row(&mut s, &v.to_string(), &r.per_view[i][j]);
        }
        row(&mut s, "fused", &r.fused[i]);
    }
    s
}

fn cmd_eval(c: &RunConfig) -> Result<String> {
    let ds = load_dataset(c, "dataset")?;
    let (model, params) = viz::load_model(c.existing_path("checkpoint")?)?;
    if model.n_classes == 0 {
        return Err(Error::config("checkpoint", "has no classifier head"));
    }
    let ecfg = c.eval_config();
    let r = evaluate(&ds, &params, &model, &ecfg)?;
    if let Some(out) = &c.out_dir {
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let p = out.join("logits.tsv");
        std::fs::write(&p, logits_tsv(&r, &ecfg.views)).map_err(|e| Error::io(&p, e))?;
    }
    let mut s = String::new();
    for (v, a) in ecfg.views.iter().zip(&r.view_accuracy) {
        let _ = writeln!(s, "view={v} accuracy={a:?}");
    }
    let _ = writeln!(s, "accuracy={:?}", r.accuracy);
    Ok(s)
}

fn cmd_viz(a: &VizArgs, c: &RunConfig) -> Result<String> {
    let ds = load_dataset(c, "dataset")?;
    let out = c.out_dir()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let spec = |mask: MaskStrategy| PairSpec {
        sample: a.sample,
        source_view: a.view,
        target_view: a.target_view,
        rho: c.rho,
        mask,
        seed: c.seed,
    };
    match a.kind {
        VizKind::MotionWeights => {
            let patch = c.model_config(&ds)?.patch;
            viz::motion_weights_figure(&ds, &patch, a.sample, a.view, &a.temperatures, out)?;
        }
        VizKind::Recon => {
            let (model, params) = viz::load_model(c.existing_path("checkpoint")?)?;
            viz::recon_figure(&ds, &model, &params, &spec(c.mask), out)?;
        }
        VizKind::Xattn => {
            let (model, params) = viz::load_model(c.existing_path("checkpoint")?)?;
            let q = QuerySpec {
                layer: a.layer,
                head: a.head,
                query: a.query,
            };
            let row = viz::xattn_figure(&ds, &model, &params, &spec(c.mask), &q, out)?;
            return Ok(format!(
                "query={} keys={}\n{}",
                row.query,
                row.weights.len(),
                list(out, a)
            ));
        }
    }
    Ok(list(out, a))
}

fn list(out: &Path, a: &VizArgs) -> String {
    let kind = match a.kind {
        VizKind::MotionWeights => "motion-weights",
        VizKind::Recon => "recon",
        VizKind::Xattn => "xattn",
    };
    viz::figure_files(kind, &a.temperatures)
        .iter()
        .map(|f| format!("wrote {}\n", out.join(f).display()))
        .collect()
}

fn cmd_gradcheck(a: &GradcheckArgs) -> std::result::Result<String, Failure> {
    let fault = match &a.inject_fault {
        Some(name) => Some(
            Primitive::from_name(name)
                .ok_or_else(|| Error::config("inject-fault", format!("unknown primitive {name:?}")))?,
        ),
        None => None,
    };
    let precision = if a.f32 { Precision::F32 } else { Precision::F64 };
    let r = run_gradcheck(precision, a.seeds, fault, !a.primitives_only)?;
    let mut s = String::new();
    for p in &r.primitives {
        let _ = writeln!(s, "primitive\t{}\t{:.3e}", p.primitive.name(), p.rel_error);
    }
    for (g, e) in &r.groups {
        let _ = writeln!(s, "group\t{g}\t{e:.3e}");
    }
    let failed: Vec<&str> = r.failed_primitives().iter().map(|p| p.name()).collect();
    if !failed.is_empty() {
        let _ = writeln!(s, "FAIL primitives above {PRIMITIVE_TOL:e}: {}", failed.join(","));
    }
    let groups = r.failed_groups();
    if !groups.is_empty() {
        let _ = writeln!(s, "FAIL groups above {:e}: {}", r.model_tol, groups.join(","));
    }
    if r.passed() {
        let _ = writeln!(s, "PASS");
        Ok(s)
    } else {
        Err(Failure::Gradcheck(s))
    }
}
