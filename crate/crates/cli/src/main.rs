use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rbnn_core::checkpoint;
use rbnn_core::datagen::{gen_frame, read_dataset, AmcdWriter, Dataset, GenConfig, ModClass};
use rbnn_core::model::{analyze, build, ArchSpec, CountingRules, Model, ModelVariant};
use rbnn_core::training::{
    bag_train, evaluate, train, Ensemble, EvalReport, TrainConfig, TrainLog,
};
use rbnn_core::Error;
use sha2::{Digest, Sha256};

// Training churns through multi-megabyte activation buffers; the system
// allocator hands them back to the kernel and page-faults them in again.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

const EXIT_USAGE: u8 = 1;
const EXIT_IO: u8 = 2;
const EXIT_INVALID: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

#[derive(Parser)]
#[command(
    name = "rbnn",
    version,
    about = "Rotated binary networks for modulation classification",
    args_override_self = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a labelled I/Q dataset (AMCD file).
    GenData(GenDataArgs),
    /// Train a model (or a bagged ensemble) on an AMCD file.
    Train(TrainArgs),
    /// Evaluate one checkpoint, or several as a logit-averaging ensemble.
    Eval(EvalArgs),
    /// Per-layer parameter, operation and memory counts.
    Analyze(AnalyzeArgs),
    /// Re-tag a real checkpoint as a binary variant.
    Convert(ConvertArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Comma-separated class names (OOK, 4ASK, BPSK, QPSK, 8PSK, 16QAM).
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "OOK,4ASK,BPSK,QPSK,8PSK,16QAM"
    )]
    classes: Vec<String>,
    #[arg(long, default_value_t = -20, allow_negative_numbers = true)]
    snr_min: i16,
    #[arg(long, default_value_t = 30, allow_negative_numbers = true)]
    snr_max: i16,
    #[arg(long, default_value_t = 2)]
    snr_step: i16,
    /// Frames per (class, SNR) cell.
    #[arg(long, default_value_t = 100, value_parser = clap::value_parser!(u32).range(1..))]
    frames: u32,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SplitArgs {
    /// Fraction of every (class, SNR) cell used for training; the rest is
    /// held out.
    #[arg(long)]
    train_fraction: Option<f64>,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, value_parser = parse_variant)]
    variant: ModelVariant,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 256)]
    batch: usize,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 0.5)]
    dropout: f64,
    /// Cosine restart period in epochs (default: a single annealing cycle).
    #[arg(long)]
    restart_period: Option<usize>,
    /// Base channel width (32 is the full network).
    #[arg(long, default_value_t = 32)]
    width: usize,
    /// Train this many bootstrap members; files get a `.b<i>` infix.
    #[arg(long, default_value_t = 1)]
    bag: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    split: SplitArgs,
    #[arg(long)]
    out_ckpt: PathBuf,
    /// Per-epoch CSV log.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Args)]
struct EvalArgs {
    /// Repeat to average several checkpoints.
    #[arg(long, required = true)]
    ckpt: Vec<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    /// Evaluate only the held-out part of this split.
    #[command(flatten)]
    split: SplitArgs,
    /// Output file (stdout when omitted).
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long, value_parser = parse_variant)]
    variant: ModelVariant,
    #[arg(long, default_value_t = 24)]
    classes: usize,
    #[arg(long, default_value_t = 32)]
    width: usize,
    #[arg(long)]
    include_bn: bool,
    /// Ensemble size used for the memory total.
    #[arg(long, default_value_t = 1)]
    bag: usize,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Args)]
struct ConvertArgs {
    #[arg(long)]
    in_ckpt: PathBuf,
    #[arg(long, value_parser = parse_variant)]
    to: ModelVariant,
    #[arg(long)]
    out_ckpt: PathBuf,
}

fn parse_variant(s: &str) -> Result<ModelVariant, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// A failure with the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io(_) => EXIT_IO,
            Error::Domain(_) => EXIT_NUMERIC,
            e if e.is_numeric() => EXIT_NUMERIC,
            _ => EXIT_INVALID,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn invalid(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_INVALID,
        message: message.into(),
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure {
        code: EXIT_IO,
        message: format!("{}: {e}", path.display()),
    }
}

type CliResult<T> = Result<T, Failure>;

fn read_file(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|e| io_failure(path, e))
}

fn temp_beside(path: &Path) -> CliResult<tempfile::NamedTempFile> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d,
        _ => Path::new("."),
    };
    tempfile::NamedTempFile::new_in(dir).map_err(|e| io_failure(path, e))
}

/// Writes through a temporary file in the destination directory, then renames.
fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let mut tmp = temp_beside(path)?;
    tmp.write_all(bytes)
        .and_then(|_| tmp.as_file().sync_all())
        .map_err(|e| io_failure(path, e))?;
    tmp.persist(path).map_err(|e| io_failure(path, e.error))?;
    Ok(())
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn load_dataset(path: &Path) -> CliResult<Dataset> {
    let ds = read_dataset(&read_file(path)?).map_err(|e| Failure::from(e).with_context(path))?;
    Ok(ds)
}

impl Failure {
    fn with_context(mut self, path: &Path) -> Self {
        self.message = format!("{}: {}", path.display(), self.message);
        self
    }
}

fn load_model(path: &Path) -> CliResult<Model> {
    let ckpt =
        checkpoint::load(&read_file(path)?).map_err(|e| Failure::from(e).with_context(path))?;
    Ok(ckpt.model)
}

/// Serializes, re-loads to validate, then writes atomically.
fn save_model(model: &Model, log: &TrainLog, path: &Path) -> CliResult<String> {
    let bytes = checkpoint::save(model, &checkpoint::log_digest(&log.to_csv()))?;
    checkpoint::load(&bytes)?;
    write_atomic(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

/// `dir/name.ext` → `dir/name.b<member>.ext`.
fn member_path(path: &Path, member: usize) -> PathBuf {
    let stem = path.file_stem().unwrap_or_default().to_string_lossy();
    let name = match path.extension() {
        Some(ext) => format!("{stem}.b{member}.{}", ext.to_string_lossy()),
        None => format!("{stem}.b{member}"),
    };
    path.with_file_name(name)
}

fn split(ds: Dataset, args: &SplitArgs) -> CliResult<(Dataset, Option<Dataset>)> {
    match args.train_fraction {
        None => Ok((ds, None)),
        Some(f) => {
            let (train, test) = ds.split(f, args.split_seed)?;
            Ok((train, Some(test)))
        }
    }
}

fn gen_data(args: GenDataArgs) -> CliResult<()> {
    let classes = args
        .classes
        .iter()
        .map(|c| c.parse::<ModClass>())
        .collect::<Result<Vec<_>, _>>()?;
    if args.snr_step <= 0 || args.snr_min > args.snr_max {
        return Err(invalid(
            "SNR grid needs snr-min <= snr-max and a positive step",
        ));
    }
    let snrs: Vec<i16> = (args.snr_min..=args.snr_max)
        .step_by(args.snr_step as usize)
        .collect();
    let cfg = GenConfig {
        classes,
        snrs,
        frames_per_cell: args.frames as usize,
        seed: args.seed,
        ..GenConfig::default()
    };
    cfg.validate()?;

    let tmp = temp_beside(&args.out)?;
    let file = tmp.reopen().map_err(|e| io_failure(&args.out, e))?;
    let names: Vec<String> = cfg.classes.iter().map(|c| c.name().to_string()).collect();
    let mut w = AmcdWriter::new(BufWriter::new(file), &names, &cfg.snrs)?;
    for (label, _) in cfg.classes.iter().enumerate() {
        for &snr in &cfg.snrs {
            for i in 0..cfg.frames_per_cell {
                w.push(&gen_frame(&cfg, label as u16, snr, i))?;
            }
        }
    }
    let mut out = w.finish()?;
    out.flush().map_err(|e| io_failure(&args.out, e))?;
    drop(out);

    let bytes = fs::read(tmp.path()).map_err(|e| io_failure(&args.out, e))?;
    let ds = read_dataset(&bytes)?;
    if ds.len() != cfg.total_frames() {
        return Err(invalid("written dataset failed validation"));
    }
    tmp.persist(&args.out)
        .map_err(|e| io_failure(&args.out, e.error))?;
    println!(
        "wrote {} frames ({} classes x {} SNRs x {}) to {}",
        ds.len(),
        cfg.classes.len(),
        cfg.snrs.len(),
        cfg.frames_per_cell,
        args.out.display()
    );
    println!("sha256 {}", sha256_hex(&bytes));
    Ok(())
}

fn print_epoch(member: Option<usize>, e: &rbnn_core::training::EpochLog) {
    let tag = member.map(|b| format!("[b{b}] ")).unwrap_or_default();
    let test = e
        .test_acc
        .map(|a| format!(" test_acc {a:.4}"))
        .unwrap_or_default();
    let rot = e
        .rotation
        .map(|r| {
            format!(
                " mean_cos_phi {:.4} flip_fraction {:.4}",
                r.mean_cos_phi, r.flip_fraction
            )
        })
        .unwrap_or_default();
    eprintln!(
        "{tag}epoch {} lr {:.5} loss {:.4} train_acc {:.4}{test}{rot}",
        e.epoch, e.lr, e.loss, e.train_acc
    );
}

fn train_cmd(args: TrainArgs) -> CliResult<()> {
    let ds = load_dataset(&args.data)?;
    let (train_set, test_set) = split(ds, &args.split)?;
    if args.width == 0 {
        return Err(invalid("width must be at least 1"));
    }
    if args.bag == 0 {
        return Err(invalid("bag must be at least 1"));
    }
    let arch = ArchSpec::with_base_width(args.width, train_set.num_classes());
    let cfg = TrainConfig {
        lr0: args.lr,
        momentum: args.momentum,
        epochs: args.epochs,
        batch_size: args.batch,
        restart_period: args.restart_period,
        dropout: args.dropout,
        seed: args.seed,
        ..TrainConfig::default()
    };
    cfg.validate()?;

    let (models, logs) = if args.bag == 1 {
        let mut model = build(args.variant, &arch, args.seed)?;
        let log = train(&mut model, &train_set, test_set.as_ref(), &cfg, |e| {
            print_epoch(None, e)
        })?;
        (vec![model], vec![log])
    } else {
        let (ens, logs) = bag_train(
            args.bag,
            args.variant,
            &arch,
            &train_set,
            test_set.as_ref(),
            &cfg,
            |b, e| print_epoch(Some(b), e),
        )?;
        (ens.members, logs)
    };

    for (b, (model, log)) in models.iter().zip(&logs).enumerate() {
        let (ckpt, log_path) = if args.bag == 1 {
            (args.out_ckpt.clone(), args.log.clone())
        } else {
            (
                member_path(&args.out_ckpt, b),
                args.log.as_deref().map(|p| member_path(p, b)),
            )
        };
        if let Some(p) = &log_path {
            write_atomic(p, log.to_csv().as_bytes())?;
        }
        let hash = save_model(model, log, &ckpt)?;
        println!("wrote {} sha256 {hash}", ckpt.display());
    }
    Ok(())
}

fn eval_cmd(args: EvalArgs) -> CliResult<()> {
    let mut members = Vec::with_capacity(args.ckpt.len());
    for path in &args.ckpt {
        let m = load_model(path)?;
        if let Some(first) = members.first() {
            let first: &Model = first;
            if m.arch != first.arch {
                return Err(invalid(format!(
                    "checkpoint {} has a different architecture from {}",
                    path.display(),
                    args.ckpt[0].display()
                )));
            }
        }
        members.push(m);
    }
    let ds = load_dataset(&args.data)?;
    let ds = match split(ds, &args.split)? {
        (_, Some(held_out)) => held_out,
        (all, None) => all,
    };
    if ds.is_empty() {
        return Err(invalid("the evaluation dataset is empty"));
    }
    let report: EvalReport = if members.len() == 1 {
        evaluate(&members[0], &ds)?
    } else {
        Ensemble::new(members)?.evaluate(&ds)?
    };
    let text = match args.format {
        Format::Csv => report.to_csv(),
        Format::Json => to_json(&report)?,
    };
    emit(&text, args.report.as_deref())?;
    eprintln!(
        "accuracy {:.4} over {} frames",
        report.accuracy, report.total
    );
    Ok(())
}

fn to_json<T: serde::Serialize>(value: &T) -> CliResult<String> {
    serde_json::to_string_pretty(value)
        .map(|s| s + "\n")
        .map_err(|e| invalid(e.to_string()))
}

fn emit(text: &str, path: Option<&Path>) -> CliResult<()> {
    match path {
        Some(p) => write_atomic(p, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn analyze_cmd(args: AnalyzeArgs) -> CliResult<()> {
    if args.bag == 0 || args.width == 0 || args.classes == 0 {
        return Err(invalid("bag, width and classes must be at least 1"));
    }
    let arch = ArchSpec::with_base_width(args.width, args.classes);
    let report = analyze(&arch, args.variant, CountingRules::with_bn(args.include_bn))?;
    let text = match args.format {
        Format::Csv => {
            let mut s = report.to_csv();
            s.push_str(&format!(
                "ensemble,bag{},,,,,{}\n",
                args.bag,
                report.ensemble_memory_mb(args.bag) * 1e6
            ));
            s
        }
        Format::Json => {
            let mut v = serde_json::to_value(&report).map_err(|e| invalid(e.to_string()))?;
            v["params"] = report.params().into();
            v["memory_mb"] = report.memory_mb().into();
            v["bag"] = args.bag.into();
            v["ensemble_memory_mb"] = report.ensemble_memory_mb(args.bag).into();
            to_json(&v)?
        }
    };
    print!("{text}");
    Ok(())
}

fn convert_cmd(args: ConvertArgs) -> CliResult<()> {
    let src = checkpoint::load(&read_file(&args.in_ckpt)?)
        .map_err(|e| Failure::from(e).with_context(&args.in_ckpt))?;
    let model = checkpoint::convert(&src.model, args.to)?;
    let bytes = checkpoint::save(&model, &src.log_digest)?;
    checkpoint::load(&bytes)?;
    write_atomic(&args.out_ckpt, &bytes)?;
    println!(
        "wrote {} sha256 {}",
        args.out_ckpt.display(),
        sha256_hex(&bytes)
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Analyze(a) => analyze_cmd(a),
        Command::Convert(a) => convert_cmd(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
