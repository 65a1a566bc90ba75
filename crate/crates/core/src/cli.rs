//! The `rfbs` command-line front end.
//!
//! Every flag can also come from a `--config` file of `key = value` lines
//! (`#` starts a comment); flags given on the command line win. Exit codes:
//! 0 success, 1 usage or configuration error, 2 data or format error,
//! 3 numerical failure.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use crate::analysis::{count_flops, count_params};
use crate::bench::{bench_forward, BenchConfig};
use crate::data::{generate_phantoms, load_dataset, read_pgm, save_dataset, split, stack_samples, write_pgm, Split};
use crate::error::{Error, Result};
use crate::metrics::{aggregate, argmax_mask, confusion, ImageScore};
use crate::model::{
    build_by_id, init_params, load_checkpoint, network_grad_check, predict, read_checkpoint, save_checkpoint,
    DESK_ARCH_ID,
};
use crate::ops::gradcheck::{op_suite, GradCheckConfig};
use crate::tensor::{write_rft1_file, Tensor};
use crate::training::{train, TrainConfig, DESK_EPOCHS};

/// Environment variable holding the default worker count.
pub const THREADS_ENV: &str = "RFBS_THREADS";

#[derive(Parser, Debug)]
#[command(name = "rfbs", version, about = "Real-time segmentation engine")]
struct Cli {
    /// Worker threads (default: $RFBS_THREADS, else all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// `key = value` file supplying defaults for any flag.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic ellipse-phantom dataset.
    Generate(GenerateArgs),
    /// Train and save the best-validation checkpoint.
    Train(TrainArgs),
    /// Dice/IoU of model (or precomputed) masks on a dataset split.
    Eval(EvalArgs),
    /// Batch-1 forward latency.
    Bench(BenchArgs),
    /// Per-layer parameters and FLOPs.
    Analyze(AnalyzeArgs),
    /// Segment one PGM image.
    Infer(InferArgs),
    /// Finite-difference checks of every op and the whole network.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    count: Option<usize>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    train_fraction: Option<f64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lr_decay: Option<f64>,
    #[arg(long)]
    decay_every: Option<u64>,
    #[arg(long)]
    dice_eps: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    arch: Option<String>,
    /// Train log path (default: `<out>.log.tsv`).
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// train, val or all.
    #[arg(long)]
    split: Option<String>,
    /// Directory of predicted `mask_<id>.pgm` files to score instead of
    /// running a model.
    #[arg(long)]
    pred: Option<PathBuf>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    tsv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Architecture to benchmark with seeded random weights when no
    /// checkpoint is given.
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    tsv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    size: Option<usize>,
    /// Cross-check the parameter total against this checkpoint.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    tsv: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long = "in")]
    input: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the probability map as an RFT1 tensor.
    #[arg(long)]
    prob: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    /// small (16x16 input) or large (32x32, more coordinates).
    #[arg(long)]
    scale: Option<String>,
    /// Whole-network tolerance.
    #[arg(long)]
    tol: Option<f64>,
    /// Per-op tolerance.
    #[arg(long)]
    op_tol: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Corrupt the analytic conv weight gradients (negative control).
    #[arg(long)]
    perturb: bool,
}

/// File values plus the record of what each command resolved.
struct Settings {
    file: BTreeMap<String, String>,
    used: Vec<String>,
}

impl Settings {
    fn load(path: Option<&Path>) -> Result<Self> {
        let file = match path {
            Some(p) => parse_config(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
            None => BTreeMap::new(),
        };
        Ok(Settings { file, used: Vec::new() })
    }

    fn raw<T: FromStr>(&mut self, key: &str, cli: Option<T>) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        self.used.push(key.to_string());
        if cli.is_some() {
            return Ok(cli);
        }
        match self.file.get(key) {
            Some(v) => v.parse().map(Some).map_err(|e| Error::Config(format!("{key} = {v}: {e}"))),
            None => Ok(None),
        }
    }

    fn get<T: FromStr + Display>(&mut self, key: &str, cli: Option<T>, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        let v = self.raw(key, cli)?.unwrap_or(default);
        eprintln!("# {key} = {v}");
        Ok(v)
    }

    fn path(&mut self, key: &str, cli: Option<PathBuf>) -> Result<Option<PathBuf>> {
        let v = self.raw::<String>(key, cli.map(|p| p.to_string_lossy().into_owned()))?.map(PathBuf::from);
        if let Some(v) = &v {
            eprintln!("# {key} = {}", v.display());
        }
        Ok(v)
    }

    fn required(&mut self, key: &str, cli: Option<PathBuf>) -> Result<PathBuf> {
        self.path(key, cli)?.ok_or_else(|| Error::InvalidArgument(format!("--{} is required", key.replace('_', "-"))))
    }

    /// Rejects file keys that the command never asked for.
    fn finish(&self) -> Result<()> {
        match self.file.keys().find(|k| !self.used.contains(k)) {
            Some(k) => Err(Error::Config(format!("unknown config key {k:?}"))),
            None => Ok(()),
        }
    }
}

/// Parses `key = value` lines. Keys use underscores; `#` starts a comment.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) =
            line.split_once('=').ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
        let (k, v) = (k.trim().replace('-', "_"), v.trim());
        if k.is_empty() || v.is_empty() {
            return Err(Error::Config(format!("line {}: empty key or value", i + 1)));
        }
        if out.insert(k.clone(), v.to_string()).is_some() {
            return Err(Error::Config(format!("line {}: duplicate key {k:?}", i + 1)));
        }
    }
    Ok(out)
}

/// Runs one command line (program name first) and returns the exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn thread_count(cli: Option<usize>, settings: &mut Settings) -> Result<usize> {
    if let Some(n) = settings.raw("threads", cli)? {
        return Ok(n);
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) => v.trim().parse().map_err(|_| Error::Config(format!("{THREADS_ENV}={v:?} is not a count"))),
        Err(_) => Ok(0),
    }
}

fn execute(cli: Cli) -> Result<()> {
    let mut settings = Settings::load(cli.config.as_deref())?;
    let threads = thread_count(cli.threads, &mut settings)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| match cli.command {
        Command::Generate(a) => cmd_generate(a, &mut settings),
        Command::Train(a) => cmd_train(a, &mut settings),
        Command::Eval(a) => cmd_eval(a, &mut settings),
        Command::Bench(a) => cmd_bench(a, &mut settings),
        Command::Analyze(a) => cmd_analyze(a, &mut settings),
        Command::Infer(a) => cmd_infer(a, &mut settings),
        Command::Gradcheck(a) => cmd_gradcheck(a, &mut settings),
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn input_size(size: usize) -> Result<usize> {
    if size == 0 || !size.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("--size must be a positive even number, got {size}")));
    }
    Ok(size)
}

fn cmd_generate(a: GenerateArgs, s: &mut Settings) -> Result<()> {
    let out = s.required("out", a.out)?;
    let count = s.get("count", a.count, 250)?;
    let size = s.get("size", a.size, 256)?;
    let seed = s.get("seed", a.seed, 42)?;
    let fraction = s.get("train_fraction", a.train_fraction, 0.8)?;
    s.finish()?;
    let data = split(generate_phantoms(count, size, seed)?, fraction, seed)?;
    save_dataset(&out, &data)?;
    println!(
        "wrote {} samples ({} train / {} val) at {size}x{size} to {}",
        data.len(),
        data.indices(Split::Train).len(),
        data.indices(Split::Val).len(),
        out.display()
    );
    Ok(())
}

fn cmd_train(a: TrainArgs, s: &mut Settings) -> Result<()> {
    let data_dir = s.required("data", a.data)?;
    let out = s.required("out", a.out)?;
    let defaults = TrainConfig::default();
    let mut cfg = TrainConfig {
        epochs: s.get("epochs", a.epochs, DESK_EPOCHS)?,
        batch_size: s.get("batch", a.batch, defaults.batch_size)?,
        initial_lr: s.get("lr", a.lr, defaults.initial_lr)?,
        lr_decay: s.get("lr_decay", a.lr_decay, defaults.lr_decay)?,
        decay_every: s.get("decay_every", a.decay_every, defaults.decay_every)?,
        dice_eps: s.get("dice_eps", a.dice_eps, defaults.dice_eps)?,
        seed: s.get("seed", a.seed, defaults.seed)?,
        ..defaults
    };
    let arch = s.get("arch", a.arch, DESK_ARCH_ID.to_string())?;
    let log_path = s.path("log", a.log)?.unwrap_or_else(|| {
        let mut p = out.clone().into_os_string();
        p.push(".log.tsv");
        PathBuf::from(p)
    });
    s.finish()?;
    cfg.validate()?;

    let spec = build_by_id(&arch)?;
    let data = load_dataset(&data_dir)?;
    cfg.input_size = data.samples()[0].height();
    eprintln!("# input_size = {} (from data)", cfg.input_size);
    eprintln!("# threads = {}", rayon::current_num_threads());
    let (params, log) = train(&spec, &data, &cfg, |e| {
        let dice = e.val_dice.map_or("-".to_string(), |d| format!("{d:.4}"));
        println!("epoch {:>3}  loss {:.6}  val_dice {dice}  {:.1}s", e.epoch, e.train_loss, e.seconds);
    })?;
    save_checkpoint(&out, &spec, &params)?;
    write_text(&log_path, &log.to_tsv())?;
    let best = log.best_val_dice().map_or("-".to_string(), |d| format!("{d:.6}"));
    println!("best epoch {} val_dice {best}; checkpoint {}; log {}", log.best_epoch, out.display(), log_path.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs, s: &mut Settings) -> Result<()> {
    let data_dir = s.required("data", a.data)?;
    let ckpt = s.path("ckpt", a.ckpt)?;
    let split_name = s.get("split", a.split, "val".to_string())?;
    let pred = s.path("pred", a.pred)?;
    let batch = s.get("batch", a.batch, 8usize)?;
    let tsv = s.path("tsv", a.tsv)?;
    s.finish()?;

    let data = load_dataset(&data_dir)?;
    let indices = match split_name.as_str() {
        "all" => (0..data.len()).collect(),
        name => data.indices(
            name.parse::<Split>()
                .map_err(|_| Error::InvalidArgument(format!("--split must be train, val or all, got {name:?}")))?,
        ),
    };
    if indices.is_empty() {
        return Err(Error::InvalidArgument(format!("split {split_name} is empty")));
    }
    let mut scores = Vec::with_capacity(indices.len());
    match (pred, ckpt) {
        (Some(dir), _) => {
            for &i in &indices {
                let sample = &data.samples()[i];
                let p = read_pgm(&dir.join(format!("mask_{}.pgm", sample.id)))?;
                let p = p.map(|v| if v >= 0.5 { 1.0 } else { 0.0 });
                scores.push(ImageScore::new(sample.id.clone(), confusion(&p, &sample.mask)?));
            }
        }
        (None, Some(ckpt)) => {
            let (spec, params) = load_checkpoint::<f32>(&ckpt)?;
            for chunk in indices.chunks(batch.max(1)) {
                let b = stack_samples(&data, chunk)?;
                let masks = argmax_mask(&predict(&spec, &params, &b.images)?, 1)?;
                let (h, w) = (masks.dims()[1], masks.dims()[2]);
                for (k, id) in b.ids.iter().enumerate() {
                    let range = k * h * w..(k + 1) * h * w;
                    let p = Tensor::from_values(&[h, w], masks.data()[range.clone()].to_vec())?;
                    let r = Tensor::from_values(&[h, w], b.masks.data()[range].to_vec())?;
                    scores.push(ImageScore::new(id.clone(), confusion(&p, &r)?));
                }
            }
        }
        (None, None) => return Err(Error::InvalidArgument("eval needs --ckpt or --pred".into())),
    }
    let report = aggregate(scores)?;
    print!("{}", report.to_tsv());
    println!("{}", report.summary_line());
    if let Some(p) = tsv {
        write_text(&p, &report.to_tsv())?;
    }
    Ok(())
}

fn cmd_bench(a: BenchArgs, s: &mut Settings) -> Result<()> {
    let ckpt = s.path("ckpt", a.ckpt)?;
    let arch = s.get("arch", a.arch, DESK_ARCH_ID.to_string())?;
    let defaults = BenchConfig::default();
    let size = input_size(s.get("size", a.size, defaults.height)?)?;
    let cfg = BenchConfig {
        iters: s.get("iters", a.iters, defaults.iters)?,
        warmup: s.get("warmup", a.warmup, defaults.warmup)?,
        height: size,
        width: size,
        seed: s.get("seed", a.seed, defaults.seed)?,
    };
    let tsv = s.path("tsv", a.tsv)?;
    s.finish()?;
    let (spec, params) = match ckpt {
        Some(p) => load_checkpoint::<f32>(&p)?,
        None => {
            let spec = build_by_id(&arch)?;
            let params = init_params(&spec, cfg.seed);
            (spec, params)
        }
    };
    let (report, _) = bench_forward(&spec, &params, &cfg)?;
    print!("{}", report.to_text());
    if let Some(p) = tsv {
        write_text(&p, &report.to_tsv())?;
    }
    Ok(())
}

fn cmd_analyze(a: AnalyzeArgs, s: &mut Settings) -> Result<()> {
    let arch = s.get("arch", a.arch, DESK_ARCH_ID.to_string())?;
    let size = input_size(s.get("size", a.size, 256usize)?)?;
    let ckpt = s.path("ckpt", a.ckpt)?;
    let tsv = s.path("tsv", a.tsv)?;
    s.finish()?;
    let spec = build_by_id(&arch)?;
    let report = count_flops(&spec, size, size)?;
    print!("{}", report.to_table());
    if let Some(p) = ckpt {
        let elements = read_checkpoint::<f32>(&p)?.params.total_elements() as u64;
        let verdict = if elements == count_params(&spec) { "match" } else { "MISMATCH" };
        println!("checkpoint {}: {elements} elements ({verdict})", p.display());
        if elements != count_params(&spec) {
            return Err(Error::format(format!(
                "checkpoint holds {elements} parameters, {arch} has {}",
                count_params(&spec)
            )));
        }
    }
    if let Some(p) = tsv {
        write_text(&p, &report.to_tsv())?;
    }
    Ok(())
}

fn cmd_infer(a: InferArgs, s: &mut Settings) -> Result<()> {
    let ckpt = s.required("ckpt", a.ckpt)?;
    let input = s.required("in", a.input)?;
    let out = s.required("out", a.out)?;
    let prob_path = s.path("prob", a.prob)?;
    s.finish()?;
    let (spec, params) = load_checkpoint::<f32>(&ckpt)?;
    let img = read_pgm(&input)?;
    let (h, w) = (img.dims()[0], img.dims()[1]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!("{} is {w}x{h}; width and height must both be even", input.display())));
    }
    let prob = predict(&spec, &params, &img.reshape(&[1, 1, h, w])?)?;
    write_pgm(&out, &argmax_mask(&prob, 1)?)?;
    if let Some(p) = prob_path {
        write_rft1_file(&p, &prob)?;
    }
    println!("{w}x{h} -> {}", out.display());
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs, s: &mut Settings) -> Result<()> {
    let scale = s.get("scale", a.scale, "small".to_string())?;
    let tol = s.get("tol", a.tol, 1e-5)?;
    let op_tol = s.get("op_tol", a.op_tol, 1e-6)?;
    let seed = s.get("seed", a.seed, 42)?;
    let perturb = s.get("perturb", a.perturb.then_some(true), false)?;
    s.finish()?;
    let (extent, coords) = match scale.as_str() {
        "small" => (16, 6),
        "large" => (32, 24),
        other => return Err(Error::InvalidArgument(format!("--scale must be small or large, got {other:?}"))),
    };
    let mut failed = Vec::new();
    for r in op_suite(op_tol, perturb)? {
        println!("{r}");
        if !r.pass {
            failed.push(r.op.clone());
        }
    }
    let spec = build_by_id(DESK_ARCH_ID)?;
    let cfg = GradCheckConfig { tolerance: tol, max_coords: Some(coords), ..GradCheckConfig::default() };
    let net = network_grad_check(&spec, &[1, 1, extent, extent], seed, &cfg)?;
    println!("{}", net.to_string().lines().next().unwrap_or_default());
    let worst = net.per_input.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error));
    if let Some(e) = worst {
        println!("    worst tensor {} {:.3e}", e.name, e.max_rel_error);
    }
    if !net.pass {
        failed.push(net.op.clone());
    }
    if failed.is_empty() {
        println!("all gradient checks passed");
        Ok(())
    } else {
        Err(Error::GradCheck(failed.join(", ")))
    }
}
