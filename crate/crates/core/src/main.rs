//! Command-line driver. Exit codes: 0 ok, 2 configuration, 3 I/O,
//! 4 numeric divergence, 5 contract violation.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};

use mabn::config::RunConfig;
use mabn::data::{gen_domains, load_dataset, save_dataset, DomainSet};
use mabn::experiment::{
    init_model, rows, run_arms, summarize, summary_json, summary_table, train_pipeline, write_rows_csv, Arm, ArmResult,
    Assignment, ModelSource, Stage,
};
use mabn::nn::{checkpoint, Model, Scope};
use mabn::training::{derive_seed, meta_train, train_joint, write_telemetry_csv};
use mabn::Error;

#[derive(Parser)]
#[command(name = "mabn", version, about = "Test-time adaptation by meta-learned batch-norm affine parameters")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic multi-domain dataset.
    GenData(Common),
    /// Joint supervised + auxiliary training on the pooled sources.
    TrainJoint(Common),
    /// Meta-auxiliary training of the affine parameters of a checkpoint.
    MetaTrain(Common),
    /// Adapt a checkpoint to each target domain and evaluate it.
    AdaptEval(Common),
    /// Run every arm of the ablation plan across seeds.
    Ablate(Common),
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Replaces the configured seed list with this single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Dataset file; generated from the configuration when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Input checkpoint.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Evaluate without test-time adaptation.
    #[arg(long)]
    no_adapt: bool,
    /// Parameters touched by adaptation.
    #[arg(long, value_enum)]
    scope: Option<ScopeArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    Affine,
    Fullbn,
    All,
}

impl From<ScopeArg> for Scope {
    fn from(s: ScopeArg) -> Self {
        match s {
            ScopeArg::Affine => Scope::AffineOnly,
            ScopeArg::Fullbn => Scope::FullBn,
            ScopeArg::All => Scope::AllParams,
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_)
        | Error::InvalidSpec(_)
        | Error::TooFewDomains { .. }
        | Error::InsufficientSamples { .. }
        | Error::DataExhausted(_)
        | Error::EmptyTestSet
        | Error::EmptySupport
        | Error::EmptyMetaBatch => 2,
        Error::Io(_) | Error::CorruptFile(_) | Error::TruncatedFile(_) => 3,
        Error::DivergenceDetected { .. } | Error::NonFinite { .. } => 4,
        _ => 5,
    }
}

/// Exclusive ownership of an output directory; released on drop.
struct OutDir {
    path: PathBuf,
    log: File,
}

impl OutDir {
    fn acquire(path: &Path) -> mabn::Result<Self> {
        std::fs::create_dir_all(path)?;
        let lock = path.join("mabn.lock");
        OpenOptions::new().write(true).create_new(true).open(&lock).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                std::io::Error::new(e.kind(), format!("{} is locked by another run", path.display()))
            } else {
                e
            }
        })?;
        let log = OpenOptions::new().create(true).append(true).open(path.join("run.log"))?;
        Ok(Self { path: path.to_path_buf(), log })
    }

    fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    /// Timestamps live only in the sidecar log so every other file is reproducible.
    fn log(&mut self, msg: &str) {
        let t = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
        let _ = writeln!(self.log, "{t:.3} {msg}");
    }
}

impl Drop for OutDir {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(self.path.join("mabn.lock"));
    }
}

struct Ctx {
    cfg: RunConfig,
    args: Common,
    out: OutDir,
}

impl Ctx {
    fn new(verb: &str, args: Common) -> mabn::Result<Self> {
        let mut cfg = match &args.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = args.seed {
            cfg.seeds = vec![s];
            cfg.ablation.seeds.clear();
        }
        if let Some(s) = args.scope {
            cfg.meta.scope = s.into();
        }
        cfg.validate()?;
        let dir = args
            .out
            .clone()
            .or_else(|| cfg.output_dir.clone().map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("out"));
        let mut out = OutDir::acquire(&dir)?;
        std::fs::write(out.file("config.resolved.json"), cfg.to_json() + "\n")?;
        out.log(&format!("start {verb}"));
        Ok(Self { cfg, args, out })
    }

    fn seed(&self) -> u64 {
        self.cfg.seeds[0]
    }

    fn dataset(&mut self) -> mabn::Result<DomainSet> {
        let set = match &self.args.data {
            Some(p) => load_dataset(p)?,
            None => gen_domains(&self.cfg.data.spec, self.cfg.data.sources, self.cfg.data.targets)?,
        };
        if set.empty_targets_warning {
            eprintln!("warning: dataset has no target domains");
        }
        Ok(set)
    }

    fn checkpoint(&self) -> mabn::Result<Model> {
        let p = self.args.ckpt.as_ref().ok_or_else(|| Error::Config("--ckpt is required".into()))?;
        checkpoint::load(p)
    }

    fn done(&mut self, verb: &str) {
        self.out.log(&format!("finish {verb}"));
    }
}

fn gen_data(ctx: &mut Ctx) -> mabn::Result<()> {
    let set = gen_domains(&ctx.cfg.data.spec, ctx.cfg.data.sources, ctx.cfg.data.targets)?;
    let path = ctx.out.file("dataset.mabd");
    save_dataset(&set, &path)?;
    println!("wrote {}", path.display());
    for d in set.sources.iter().chain(&set.targets) {
        let role = if (d.id as usize) < set.sources.len() { "source" } else { "target" };
        println!(
            "domain {:>3} {role} n={} train={} rotation={:.2} noise={:.3} background={:.3}",
            d.id,
            d.len(),
            d.train_count,
            d.shift.rotation_deg,
            d.shift.noise_std,
            d.shift.background
        );
    }
    ctx.done("gen-data");
    Ok(())
}

fn train_joint_cmd(ctx: &mut Ctx) -> mabn::Result<()> {
    let set = ctx.dataset()?;
    let seed = ctx.seed();
    let mut model = init_model(&ctx.cfg, &set, seed)?;
    let report =
        train_joint(&mut model, &set.sources, &ctx.cfg.ssl, &ctx.cfg.meta, &ctx.cfg.joint, derive_seed(seed, &[1]))?;
    write_telemetry_csv(&report.telemetry, &ctx.out.file("telemetry_joint.csv"))?;
    checkpoint::save(&model, &ctx.out.file("joint.ckpt"))?;
    if let Some(l) = report.epoch_losses.last() {
        println!("final joint loss {l:.6} lr {:.3e}", report.final_lr);
    }
    println!("theta_hash {}", model.theta_hash());
    ctx.done("train-joint");
    Ok(())
}

fn meta_train_cmd(ctx: &mut Ctx) -> mabn::Result<()> {
    let set = ctx.dataset()?;
    let mut model = ctx.checkpoint()?;
    let (theta_in, stats_in) = (model.theta_hash(), model.stats_hash());
    let report = meta_train(
        &mut model,
        &set.sources,
        &ctx.cfg.meta,
        &ctx.cfg.ssl,
        ctx.cfg.meta_epochs,
        derive_seed(ctx.seed(), &[2]),
    )?;
    write_telemetry_csv(&report.telemetry, &ctx.out.file("telemetry_meta.csv"))?;
    let theta_out = model.theta_hash();
    let equal = theta_in == theta_out && stats_in == model.stats_hash();
    println!("theta_hash in={theta_in} out={theta_out} equal={equal}");
    if !equal {
        return Err(Error::ScopeViolation("weights or running statistics changed during meta-training".into()));
    }
    if let (Some(first), Some(last)) = (report.epoch_query_loss.first(), report.epoch_query_loss.last()) {
        println!("query loss first epoch {first:.6} last epoch {last:.6}");
    }
    checkpoint::save(&model, &ctx.out.file("meta.ckpt"))?;
    ctx.done("meta-train");
    Ok(())
}

fn write_results(ctx: &Ctx, results: &[ArmResult], prefix: &str) -> mabn::Result<()> {
    write_rows_csv(&rows(results), &ctx.out.file(&format!("{prefix}.csv")))?;
    let summary = summarize(results);
    std::fs::write(ctx.out.file(&format!("{prefix}_summary.json")), summary_json(&summary) + "\n")?;
    let table = summary_table(&summary);
    std::fs::write(ctx.out.file(&format!("{prefix}_table.csv")), &table)?;
    print!("{table}");
    Ok(())
}

fn seeds(cfg: &RunConfig) -> Vec<u64> {
    if cfg.ablation.seeds.is_empty() {
        cfg.seeds.clone()
    } else {
        cfg.ablation.seeds.clone()
    }
}

fn adapt_eval_cmd(ctx: &mut Ctx) -> mabn::Result<()> {
    let set = ctx.dataset()?;
    let model = ctx.checkpoint()?;
    let (theta_in, stats_in) = (model.theta_hash(), model.stats_hash());
    let arm = if ctx.args.no_adapt {
        Arm::new("NoAdapt", Stage::Meta, ctx.cfg.meta.scope, Assignment::NoAdapt)
    } else {
        Arm::new("Matched", Stage::Meta, ctx.cfg.meta.scope, Assignment::Matched)
    };
    let mut results = Vec::new();
    for seed in ctx.cfg.seeds.clone() {
        results.extend(run_arms(&ctx.cfg, &set, &ModelSource::Fixed(&model), std::slice::from_ref(&arm), seed)?);
    }
    write_results(ctx, &results, "metrics")?;
    if model.theta_hash() != theta_in || model.stats_hash() != stats_in {
        return Err(Error::ScopeViolation("checkpoint changed during evaluation".into()));
    }
    ctx.done("adapt-eval");
    Ok(())
}

fn ablate_cmd(ctx: &mut Ctx) -> mabn::Result<()> {
    let set = ctx.dataset()?;
    let fixed = ctx.args.ckpt.as_ref().map(|_| ctx.checkpoint()).transpose()?;
    let arms = ctx.cfg.ablation.arms.clone();
    let mut results = Vec::new();
    for seed in seeds(&ctx.cfg) {
        let r = match &fixed {
            Some(m) => run_arms(&ctx.cfg, &set, &ModelSource::Fixed(m), &arms, seed)?,
            None => {
                let trained = train_pipeline(&ctx.cfg, &set, seed)?;
                if trained.meta.theta_hash() != trained.joint.theta_hash() {
                    return Err(Error::ScopeViolation("meta-training changed the weights".into()));
                }
                run_arms(&ctx.cfg, &set, &ModelSource::Trained(&trained), &arms, seed)?
            }
        };
        ctx.out.log(&format!("seed {seed} evaluated"));
        results.extend(r);
    }
    write_results(ctx, &results, "ablation")?;
    ctx.done("ablate");
    Ok(())
}

fn configure_threads() -> mabn::Result<()> {
    if let Ok(v) = std::env::var("MABN_THREADS") {
        let n: usize =
            v.parse().map_err(|_| Error::Config(format!("MABN_THREADS must be a positive integer, got {v:?}")))?;
        if n == 0 {
            return Err(Error::Config("MABN_THREADS must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn run(cli: Cli) -> mabn::Result<()> {
    configure_threads()?;
    type Verb = fn(&mut Ctx) -> mabn::Result<()>;
    let (name, args, verb): (&str, Common, Verb) = match cli.cmd {
        Command::GenData(a) => ("gen-data", a, gen_data),
        Command::TrainJoint(a) => ("train-joint", a, train_joint_cmd),
        Command::MetaTrain(a) => ("meta-train", a, meta_train_cmd),
        Command::AdaptEval(a) => ("adapt-eval", a, adapt_eval_cmd),
        Command::Ablate(a) => ("ablate", a, ablate_cmd),
    };
    let mut ctx = Ctx::new(name, args)?;
    let result = verb(&mut ctx);
    if let Err(e) = &result {
        ctx.out.log(&format!("error {name}: {e}"));
    }
    result
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
