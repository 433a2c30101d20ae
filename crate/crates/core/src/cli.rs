//! `ressenet` command line: `train`, `eval`, `params` and `gradcheck`.
//!
//! Every failure prints one line `ressenet:error:<code>: <message>` on
//! stderr. Exit status is 0 on success, 2 for usage errors, 3 for a
//! numeric fault during training and 1 otherwise.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::arch::{
    count_params, reduction_report, ArchConfig, ArchVariant, Checkpoint, Model, DEFAULT_REDUCTION,
};
use crate::checks;
use crate::data::synth::{self, SynthSpec};
use crate::data::{self, AugmentPlan, Dataset, DatasetKind, NormStats, Pipeline, Splits, NORM_CACHE_FILE};
use crate::error::{Error, Result};
use crate::train::{
    emit_curves, evaluate, lr_at, train_loop, CurveRecord, MetricReport, SgdConfig, TrainConfig, TrainData,
    TrainState,
};

/// Dataset root used when neither `--data` nor the config file names one.
pub const DATA_ENV: &str = "RESSENET_DATA";

pub const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "-g", env!("RESSENET_GIT_REV"));

const FAMILY_HELP: &str = "\
Variants: baseline, no-bridge, se-resnet, res-se-net, res-se-net-pre-down, se-all-skips
Depths:   6n+2 with n >= 1 blocks per group (8, 14, 20, 32, 44, 56, 110, ...)";

/// Largest number of training samples scored for the final train metrics.
const TRAIN_EVAL_CAP: usize = 10_000;

#[derive(Debug, Parser)]
#[command(name = "ressenet", version = VERSION, about = "CIFAR ResNets with squeeze-and-excitation bridges")]
#[command(after_help = FAMILY_HELP)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a network and write run.json, curve.csv and ckpt-*.bin.
    #[command(after_help = FAMILY_HELP)]
    Train(TrainArgs),
    /// Top-1/top-5 accuracy of a checkpoint or a freshly initialized network.
    #[command(after_help = FAMILY_HELP)]
    Eval(EvalArgs),
    /// Layer table and parameter counts, or the reduction between two networks.
    #[command(after_help = FAMILY_HELP)]
    Params(ParamsArgs),
    /// Finite-difference gradient checks in double precision.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Clone, Default, Args)]
pub struct ArchArgs {
    /// Network variant.
    #[arg(long)]
    pub variant: Option<String>,
    /// Total depth, 6n+2.
    #[arg(long)]
    pub depth: Option<usize>,
    /// Output classes; defaults to the dataset's.
    #[arg(long)]
    pub classes: Option<usize>,
    /// SE reduction ratio.
    #[arg(long)]
    pub r: Option<usize>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct DataArgs {
    /// cifar10 or cifar100.
    #[arg(long)]
    pub dataset: Option<String>,
    /// Directory holding the binary archives (falls back to $RESSENET_DATA).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Use generated stand-in data with the real split sizes.
    #[arg(long)]
    pub synthetic: bool,
    /// Keep only the first N samples of the split being used.
    #[arg(long)]
    pub subset: Option<usize>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub arch: ArchArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// TOML file with any of the flag values; flags win.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Iteration budget (at most max-iters).
    #[arg(long)]
    pub iters: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Comma-separated iterations where the learning rate drops tenfold.
    #[arg(long, value_delimiter = ',')]
    pub milestones: Option<Vec<u64>>,
    #[arg(long)]
    pub max_iters: Option<u64>,
    /// Test evaluation cadence in iterations (0: only at the end).
    #[arg(long)]
    pub eval_every: Option<u64>,
    /// Progress line cadence on stderr (0: silent).
    #[arg(long, default_value_t = 100)]
    pub log_every: u64,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub arch: ArchArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, conflicts_with = "fresh", required_unless_present = "fresh")]
    pub checkpoint: Option<PathBuf>,
    /// Evaluate an untrained network built from --seed.
    #[arg(long)]
    pub fresh: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 500)]
    pub batch_size: usize,
    /// Print the report as JSON.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Clone, Default, Args)]
pub struct ParamsArgs {
    #[command(flatten)]
    pub arch: ArchArgs,
    /// Two networks as variant:depth; prints the reduction of the first
    /// relative to the second.
    #[arg(long, num_args = 2, value_names = ["A", "B"])]
    pub compare: Option<Vec<String>>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct GradcheckArgs {
    /// Run one case by name.
    #[arg(long)]
    pub op: Option<String>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// List case names and exit.
    #[arg(long)]
    pub list: bool,
}

/// Optional values read from `--config`.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub variant: Option<String>,
    pub depth: Option<usize>,
    pub classes: Option<usize>,
    pub r: Option<usize>,
    pub dataset: Option<String>,
    pub data: Option<PathBuf>,
    pub synthetic: Option<bool>,
    pub subset: Option<usize>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub iters: Option<u64>,
    pub lr: Option<f64>,
    pub momentum: Option<f64>,
    pub weight_decay: Option<f64>,
    pub batch_size: Option<usize>,
    pub milestones: Option<Vec<u64>>,
    pub max_iters: Option<u64>,
    pub eval_every: Option<u64>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            msg: e.message().to_string(),
        })
    }
}

/// Fully resolved `train` settings.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub arch: ArchConfig,
    pub sgd: SgdConfig,
    pub dataset: DatasetKind,
    pub data: Option<PathBuf>,
    pub synthetic: bool,
    pub subset: Option<usize>,
    pub seed: u64,
    pub out: PathBuf,
    pub budget: u64,
    pub eval_every: u64,
}

fn arch_config(
    variant: Option<&str>,
    depth: Option<usize>,
    classes: usize,
    r: Option<usize>,
) -> Result<ArchConfig> {
    let variant: ArchVariant = variant.unwrap_or("res-se-net").parse()?;
    let cfg =
        ArchConfig::new(variant, depth.unwrap_or(20), classes).with_reduction(r.unwrap_or(DEFAULT_REDUCTION));
    cfg.validate()?;
    Ok(cfg)
}

fn dataset_kind(s: Option<&str>) -> Result<DatasetKind> {
    s.unwrap_or("cifar10").parse()
}

fn check_classes(classes: Option<usize>, kind: DatasetKind) -> Result<usize> {
    match classes {
        Some(c) if c != kind.num_classes() => Err(Error::config(
            "classes",
            format!("{c} does not match {kind}, which has {}", kind.num_classes()),
        )),
        _ => Ok(kind.num_classes()),
    }
}

/// Dataset root: flag or config value, then the environment.
fn data_root(given: Option<PathBuf>) -> Option<PathBuf> {
    given.or_else(|| {
        std::env::var_os(DATA_ENV)
            .filter(|v| !v.is_empty())
            .map(PathBuf::from)
    })
}

impl RunConfig {
    /// Flags over config file over defaults.
    pub fn resolve(a: &TrainArgs, file: FileConfig) -> Result<Self> {
        let f = file;
        let dataset = dataset_kind(a.data.dataset.as_deref().or(f.dataset.as_deref()))?;
        let classes = check_classes(a.arch.classes.or(f.classes), dataset)?;
        let arch = arch_config(
            a.arch.variant.as_deref().or(f.variant.as_deref()),
            a.arch.depth.or(f.depth),
            classes,
            a.arch.r.or(f.r),
        )?;
        let d = SgdConfig::default();
        let sgd = SgdConfig {
            lr0: a.lr.or(f.lr).unwrap_or(d.lr0),
            momentum: a.momentum.or(f.momentum).unwrap_or(d.momentum),
            weight_decay: a.weight_decay.or(f.weight_decay).unwrap_or(d.weight_decay),
            batch_size: a.batch_size.or(f.batch_size).unwrap_or(d.batch_size),
            milestones: a.milestones.clone().or(f.milestones).unwrap_or(d.milestones),
            max_iters: a.max_iters.or(f.max_iters).unwrap_or(d.max_iters),
        };
        sgd.validate()?;
        let budget = a.iters.or(f.iters).unwrap_or(sgd.max_iters);
        if budget > sgd.max_iters {
            return Err(Error::config(
                "iters",
                format!("{budget} exceeds max-iters {}", sgd.max_iters),
            ));
        }
        let seed = a.seed.or(f.seed).unwrap_or(0);
        let subset = a.data.subset.or(f.subset);
        if subset == Some(0) {
            return Err(Error::config("subset", "must be at least 1"));
        }
        Ok(RunConfig {
            out: a
                .out
                .clone()
                .or(f.out)
                .unwrap_or_else(|| PathBuf::from(format!("runs/{}-{dataset}-s{seed}", arch.label()))),
            data: data_root(a.data.data.clone().or(f.data)),
            synthetic: a.data.synthetic || f.synthetic.unwrap_or(false),
            arch,
            sgd,
            dataset,
            subset,
            seed,
            budget,
            eval_every: a.eval_every.or(f.eval_every).unwrap_or(2000),
        })
    }
}

/// Splits plus the normalization statistics of the full training split.
fn load_data(kind: DatasetKind, root: Option<&Path>, synthetic: bool) -> Result<(Splits, NormStats)> {
    if synthetic {
        let splits = synth::generate(&SynthSpec::full(kind, 0));
        let stats = NormStats::compute(&splits.train);
        return Ok((splits, stats));
    }
    let root = root.ok_or_else(|| {
        let files = match kind {
            DatasetKind::Cifar10 => data::CIFAR10_FILES.join(", "),
            DatasetKind::Cifar100 => data::CIFAR100_FILES.join(", "),
        };
        Error::MissingDataset(format!(
            "no dataset directory; pass --data or set {DATA_ENV} to a folder with {files} (or its {} parent)",
            kind.archive_dir()
        ))
    })?;
    let dir = data::resolve_dir(kind, root)?;
    let splits = data::load(kind, &dir)?;
    let stats = NormStats::load_or_compute(&dir.join(NORM_CACHE_FILE), &splits.train)?;
    Ok((splits, stats))
}

#[derive(Debug, Serialize)]
struct RunSummary<'a> {
    version: &'static str,
    status: &'a str,
    config: &'a RunConfig,
    params: usize,
    iterations: u64,
    wall_time_s: f64,
    final_test: Option<MetricReport>,
    best_test: Option<MetricReport>,
    final_train: Option<MetricReport>,
    final_train_loss: Option<f64>,
    checkpoints: Vec<PathBuf>,
}

fn report_line(label: &str, r: &MetricReport) -> String {
    format!(
        "{label}: iter {} top1 {:.2}% top5 {:.2}% loss {:.4} ({} samples)",
        r.iter, r.top1, r.top5, r.loss, r.samples
    )
}

fn cmd_train(a: &TrainArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let file = match &a.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let cfg = RunConfig::resolve(a, file)?;
    let start = Instant::now();
    let (splits, stats) = load_data(cfg.dataset, cfg.data.as_deref(), cfg.synthetic)?;
    let train: Dataset = match cfg.subset {
        Some(n) => splits.train.take(n),
        None => splits.train,
    };
    let pipeline = Pipeline::new(stats, AugmentPlan::with_seed(cfg.seed))?;
    fs::create_dir_all(&cfg.out)?;

    let mut state = match &a.resume {
        Some(p) => {
            let s = TrainState::<f32>::from_checkpoint(&Checkpoint::load(p)?)?;
            if s.model.config != cfg.arch {
                return Err(Error::Checkpoint(format!(
                    "{} holds {} with {} classes, not the requested {}",
                    p.display(),
                    s.model.config.label(),
                    s.model.config.num_classes,
                    cfg.arch.label()
                )));
            }
            s
        }
        None => TrainState::new(Model::build_seeded(cfg.arch.clone(), cfg.seed)?),
    };
    let params = state.model.param_count();
    writeln!(
        out,
        "training {} on {} ({} samples, {params} params) for {} iterations",
        cfg.arch.label(),
        cfg.dataset,
        train.len(),
        cfg.budget
    )?;

    let tcfg = TrainConfig {
        sgd: cfg.sgd.clone(),
        budget: cfg.budget,
        seed: cfg.seed,
        eval_every: cfg.eval_every,
        checkpoint_dir: Some(cfg.out.clone()),
    };
    let data = TrainData {
        train: &train,
        test: Some(&splits.test),
        pipeline: &pipeline,
    };
    let mut seen: Vec<CurveRecord> = Vec::new();
    let log_every = a.log_every;
    let result = train_loop(&mut state, &tcfg, &data, &mut |r| {
        if log_every > 0 && (r.iter % log_every == 0 || r.top1.is_some()) {
            let _ = write!(
                err,
                "iter {:>6} loss {:.4} lr {}",
                r.iter,
                r.loss,
                lr_at(r.iter, &tcfg.sgd)
            );
            if let (Some(t1), Some(t5)) = (r.top1, r.top5) {
                let _ = write!(err, " test top1 {t1:.2}% top5 {t5:.2}%");
            }
            let _ = writeln!(err);
        }
        seen.push(*r);
    });
    emit_curves(&seen, &cfg.out.join("curve.csv"))?;

    let (status, outcome) = match result {
        Ok(o) => ("ok", Some(o)),
        Err(e @ Error::NumericFault { .. }) => {
            write_summary(
                &cfg,
                "numeric-fault",
                params,
                state.iter,
                start,
                None,
                &seen,
                None,
            )?;
            return Err(e);
        }
        Err(e) => return Err(e),
    };
    let outcome = outcome.expect("ok");
    let probe = train.take(TRAIN_EVAL_CAP);
    let train_report = evaluate(&mut state.model, &probe, &pipeline, 500, state.iter)?;
    let final_test = outcome.evals.last().copied();
    if let Some(r) = &final_test {
        writeln!(out, "{}", report_line("test", r))?;
    }
    if let Some(r) = outcome.best() {
        writeln!(out, "{}", report_line("best test", r))?;
    }
    writeln!(out, "{}", report_line("train", &train_report))?;
    write_summary(
        &cfg,
        status,
        params,
        state.iter,
        start,
        Some((&outcome.evals, outcome.best().copied())),
        &seen,
        Some(train_report),
    )?;
    writeln!(out, "wrote {}", cfg.out.display())?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn write_summary(
    cfg: &RunConfig,
    status: &str,
    params: usize,
    iterations: u64,
    start: Instant,
    evals: Option<(&[MetricReport], Option<MetricReport>)>,
    curve: &[CurveRecord],
    final_train: Option<MetricReport>,
) -> Result<()> {
    let mut checkpoints: Vec<PathBuf> = fs::read_dir(&cfg.out)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("ckpt-") && n.ends_with(".bin"))
        })
        .collect();
    checkpoints.sort();
    let summary = RunSummary {
        version: VERSION,
        status,
        config: cfg,
        params,
        iterations,
        wall_time_s: start.elapsed().as_secs_f64(),
        final_test: evals.and_then(|(e, _)| e.last().copied()),
        best_test: evals.and_then(|(_, b)| b),
        final_train,
        final_train_loss: curve.last().map(|r| r.loss),
        checkpoints,
    };
    let json = serde_json::to_string_pretty(&summary).map_err(|e| Error::Io(e.into()))?;
    fs::write(cfg.out.join("run.json"), json + "\n")?;
    Ok(())
}

fn cmd_eval(a: &EvalArgs, out: &mut dyn Write) -> Result<()> {
    let kind = dataset_kind(a.data.dataset.as_deref())?;
    let mut model: Model<f32> = match &a.checkpoint {
        Some(p) => {
            let ckpt = Checkpoint::load(p)?;
            if ckpt.manifest.classes != kind.num_classes() {
                return Err(Error::config(
                    "classes",
                    format!(
                        "checkpoint {} has {} classes but {kind} has {}",
                        p.display(),
                        ckpt.manifest.classes,
                        kind.num_classes()
                    ),
                ));
            }
            Model::from_checkpoint(&ckpt)?
        }
        None => {
            let classes = check_classes(a.arch.classes, kind)?;
            let arch = arch_config(a.arch.variant.as_deref(), a.arch.depth, classes, a.arch.r)?;
            Model::build_seeded(arch, a.seed)?
        }
    };
    let (splits, stats) = load_data(kind, data_root(a.data.data.clone()).as_deref(), a.data.synthetic)?;
    let test = match a.data.subset {
        Some(n) => splits.test.take(n),
        None => splits.test,
    };
    let pipeline = Pipeline::new(stats, AugmentPlan::default())?;
    let iter = a
        .checkpoint
        .as_ref()
        .map(|p| Checkpoint::load(p).map(|c| c.manifest.iteration))
        .transpose()?
        .unwrap_or(0);
    let report = evaluate(&mut model, &test, &pipeline, a.batch_size, iter)?;
    if a.json {
        let json = serde_json::to_string(&report).map_err(|e| Error::Io(e.into()))?;
        writeln!(out, "{json}")?;
    } else {
        writeln!(
            out,
            "{}",
            report_line(&format!("{} on {kind}", model.config.label()), &report)
        )?;
    }
    Ok(())
}

/// `variant:depth`.
pub fn parse_net(s: &str, classes: usize, r: usize) -> Result<ArchConfig> {
    let (v, d) = s
        .split_once(':')
        .ok_or_else(|| Error::config("compare", format!("`{s}` is not variant:depth")))?;
    let depth = d
        .parse()
        .map_err(|_| Error::config("compare", format!("`{d}` is not a depth")))?;
    let cfg = ArchConfig::new(v.parse()?, depth, classes).with_reduction(r);
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_params(a: &ParamsArgs, out: &mut dyn Write) -> Result<()> {
    let classes = a.arch.classes.unwrap_or(10);
    let r = a.arch.r.unwrap_or(DEFAULT_REDUCTION);
    if let Some(pair) = &a.compare {
        let x = parse_net(&pair[0], classes, r)?;
        let y = parse_net(&pair[1], classes, r)?;
        writeln!(out, "{:<24} {:>12}", x.label(), count_params(&x)?)?;
        writeln!(out, "{:<24} {:>12}", y.label(), count_params(&y)?)?;
        writeln!(out, "reduction: {:.3}%", reduction_report(&x, &y)?)?;
        return Ok(());
    }
    let cfg = arch_config(a.arch.variant.as_deref(), a.arch.depth, classes, a.arch.r)?;
    let model: Model<f32> = Model::build_seeded(cfg, 0)?;
    write!(out, "{}", model.summary())?;
    Ok(())
}

fn cmd_gradcheck(a: &GradcheckArgs, out: &mut dyn Write) -> Result<()> {
    if a.list {
        for name in checks::case_names() {
            writeln!(out, "{name}")?;
        }
        return Ok(());
    }
    let cases: Vec<&checks::GradCase> = match &a.op {
        Some(op) => vec![checks::find(op).ok_or_else(|| {
            let names: Vec<_> = checks::case_names().collect();
            Error::config("op", format!("unknown case `{op}`; known: {}", names.join(", ")))
        })?],
        None => checks::suite().collect(),
    };
    let mut failing = Vec::new();
    for case in cases {
        let o = case.run(a.seed)?;
        writeln!(
            out,
            "{:<28} max_rel_err {:.3e}  tol {:.0e}  checked {:>5}  kinks {:>3}  {}  {:>7.1} ms",
            o.name,
            o.report.max_rel_error,
            o.tolerance,
            o.report.checked,
            o.report.skipped_kinks,
            if o.passed() { "PASS" } else { "FAIL" },
            o.elapsed.as_secs_f64() * 1e3
        )?;
        if !o.passed() {
            failing.push(o.name);
        }
    }
    if failing.is_empty() {
        Ok(())
    } else {
        Err(Error::GradCheck(format!("failing cases: {}", failing.join(", "))))
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NumericFault { .. } => 3,
        _ => 1,
    }
}

/// Runs one command line, writing normal output to `out` and progress and
/// errors to `err`; returns the exit status.
pub fn run<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = write!(out, "{e}");
            return 0;
        }
        Err(e) => {
            let text = e.to_string();
            let mut lines = text.lines();
            let first = lines.next().unwrap_or_default().trim_start_matches("error: ");
            let _ = writeln!(err, "ressenet:error:usage: {first}");
            for l in lines {
                let _ = writeln!(err, "{l}");
            }
            return 2;
        }
    };
    let result = match &cli.command {
        Command::Train(a) => cmd_train(a, out, err),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Params(a) => cmd_params(a, out),
        Command::Gradcheck(a) => cmd_gradcheck(a, out),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            let _ = writeln!(err, "ressenet:error:{}: {msg}", e.code());
            exit_code(&e)
        }
    }
}

/// Entry point for the binary.
pub fn main() -> i32 {
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run(std::env::args_os(), &mut stdout.lock(), &mut stderr.lock())
}
