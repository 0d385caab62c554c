//! Command-line entry point.
//!
//! Exit codes: 0 on success, 1 for invalid input or usage, 2 when the run
//! itself fails (I/O, translator, diverging training, failed check).
//!
//! `--config FILE` takes a JSON object whose keys are flag names; its values
//! are inserted before the flags given on the command line, so explicit
//! flags win. Relative input paths are looked up under `POLYEMBED_DATA_DIR`
//! when that variable is set.

use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use crate::bench::{build_benchmark, BenchmarkSuite, BuildOptions, FormattingStyle};
use crate::corpus::{
    parse_languages, read_embeddings, read_instances, read_manifests, read_pairs, read_records, select_training_mixture,
    write_embeddings, write_pairs, write_records, ImageStore, INSTANCES_PER_TASK,
};
use crate::distill::{self, alignment, finite_diff_check, train, LossConfig, PreparedPair};
use crate::encoder::{EmbedItem, Embedder, EncoderConfig, EncoderParams, PrecomputedEmbedder, ReferenceEmbedder};
use crate::error::{Error, Result};
use crate::eval::{aggregate, compare_models, render_language_table, render_table, score_suite, EvalRecord, Similarity};
use crate::rng::Stream;
use crate::translate::{prepare_corpus, CommandTranslator, DictionaryTranslator, IdentityTranslator, Translator};

pub const DATA_DIR_ENV: &str = "POLYEMBED_DATA_DIR";
const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Parser)]
#[command(name = "polyembed", version, about = "Multilingual embedding distillation and retrieval benchmark toolkit")]
struct Cli {
    /// JSON object of default flag values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Worker threads.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "kebab-case")]
enum Command {
    /// Translate training instances into parallel pairs.
    TranslatePrep(TranslatePrepArgs),
    /// Distil a student from a frozen teacher on parallel pairs.
    Train(TrainArgs),
    /// Build candidate-pool suites from dataset manifests.
    BuildBench(BuildBenchArgs),
    /// Export pooled embeddings for every query and candidate of suites.
    Embed(EmbedArgs),
    /// Score suites and report P@1.
    Eval(EvalArgs),
    /// McNemar's test between two record files.
    Compare(CompareArgs),
    /// Check analytic gradients against central differences.
    FdCheck(FdCheckArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::TranslatePrep(_) => "translate-prep",
            Command::Train(_) => "train",
            Command::BuildBench(_) => "build-bench",
            Command::Embed(_) => "embed",
            Command::Eval(_) => "eval",
            Command::Compare(_) => "compare",
            Command::FdCheck(_) => "fd-check",
        }
    }
}

const SUBCOMMANDS: [&str; 7] = ["translate-prep", "train", "build-bench", "embed", "eval", "compare", "fd-check"];

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum TranslatorKind {
    Identity,
    Pseudo,
    Command,
}

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
struct TranslatePrepArgs {
    #[arg(long = "in", value_name = "FILE")]
    input: PathBuf,
    /// Comma-separated target languages.
    #[arg(long, default_value = "fr")]
    langs: String,
    #[arg(long, value_enum, default_value = "identity")]
    translator: TranslatorKind,
    /// Program and arguments for `--translator command`; `{src}` and `{tgt}`
    /// are replaced by language codes.
    #[arg(long = "translator-cmd")]
    translator_cmd: Option<String>,
    /// Instances kept per task.
    #[arg(long, default_value_t = INSTANCES_PER_TASK)]
    limit: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
struct ModelArgs {
    /// Image features (JSONL `{image_ref, features}`); synthetic features otherwise.
    #[arg(long)]
    images: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
struct TrainArgs {
    #[arg(long)]
    pairs: PathBuf,
    /// Teacher checkpoint; a fresh seeded encoder otherwise.
    #[arg(long)]
    teacher: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 4096)]
    vocab: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    #[arg(long = "feature-dim", default_value_t = 32)]
    feature_dim: usize,
    #[arg(long = "init-scale", default_value_t = 0.1)]
    init_scale: f64,
    #[arg(long, default_value_t = 1)]
    epochs: usize,
    #[arg(long, default_value_t = 128)]
    batch: usize,
    #[arg(long, default_value_t = 1e-2)]
    lr: f64,
    /// Add the image alignment term.
    #[arg(long = "image-loss")]
    image_loss: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Also write the teacher checkpoint here.
    #[arg(long = "teacher-out")]
    teacher_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum StyleChoice {
    Plain,
    Punctuation,
    Both,
}

impl StyleChoice {
    fn styles(self) -> Vec<FormattingStyle> {
        match self {
            StyleChoice::Plain => vec![FormattingStyle::Plain],
            StyleChoice::Punctuation => vec![FormattingStyle::Punctuation],
            StyleChoice::Both => vec![FormattingStyle::Plain, FormattingStyle::Punctuation],
        }
    }
}

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
struct BuildBenchArgs {
    #[arg(long)]
    manifests: PathBuf,
    #[arg(long, value_enum, default_value = "both")]
    style: StyleChoice,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Keep only the first N instances per suite.
    #[arg(long = "max-instances")]
    max_instances: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
struct EmbedArgs {
    /// Suite file or directory of suite files; repeatable.
    #[arg(long, required = true)]
    suite: Vec<PathBuf>,
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    images: ModelArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
struct EvalArgs {
    /// Suite file or directory of suite files; repeatable.
    #[arg(long, required = true)]
    suite: Vec<PathBuf>,
    /// Encoder checkpoint.
    #[arg(long, conflicts_with = "embeddings", required_unless_present = "embeddings")]
    model: Option<PathBuf>,
    /// Precomputed embeddings from `embed` or an external model.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[command(flatten)]
    images: ModelArgs,
    /// Only score suites built with this style.
    #[arg(long, value_enum)]
    style: Option<StyleChoice>,
    #[arg(long, value_enum, default_value = "cosine")]
    metric: MetricChoice,
    /// Label for the summary table.
    #[arg(long, default_value = "model")]
    name: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum MetricChoice {
    Cosine,
    Dot,
}

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
struct CompareArgs {
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
#[command(args_override_self = true)]
struct FdCheckArgs {
    #[arg(long)]
    pairs: PathBuf,
    /// Teacher checkpoint; a fresh seeded encoder otherwise.
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// Student checkpoint; the teacher plus seeded noise otherwise.
    #[arg(long)]
    student: Option<PathBuf>,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, default_value_t = 100)]
    count: usize,
    #[arg(long, default_value_t = 1e-6)]
    eps: f64,
    #[arg(long, default_value_t = 1e-4)]
    tolerance: f64,
    /// Noise half-width for the default student.
    #[arg(long, default_value_t = 0.05)]
    perturb: f64,
    #[arg(long = "image-loss")]
    image_loss: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parse `argv` (including the program name), run, and return the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let argv = match expand_config(argv) {
        Ok(a) => a,
        Err(e) => return report_error(&e),
    };
    let matches = match Cli::command().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return 1;
        }
    };
    if cli.jobs == 0 {
        return report_error(&Error::invalid("--jobs", "must be at least 1"));
    }
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(cli.jobs).build() {
        Ok(p) => p,
        Err(e) => return report_error(&Error::invalid("thread pool", e.to_string())),
    };
    match pool.install(|| dispatch(&cli.command)) {
        Ok(()) => 0,
        Err(e) => report_error(&e),
    }
}

fn report_error(e: &Error) -> i32 {
    eprintln!("error: {e}");
    if e.is_validation() {
        1
    } else {
        2
    }
}

/// Splice `--config` values in right after the subcommand name.
fn expand_config(argv: Vec<OsString>) -> Result<Vec<OsString>> {
    let mut config: Option<PathBuf> = None;
    let mut rest = Vec::with_capacity(argv.len());
    let mut it = argv.into_iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            let p = it
                .next()
                .ok_or_else(|| Error::invalid("--config", "missing file name"))?;
            config = Some(PathBuf::from(p));
        } else if let Some(p) = s.strip_prefix("--config=") {
            config = Some(PathBuf::from(p));
        } else {
            rest.push(a);
        }
    }
    let Some(path) = config else {
        return Ok(rest);
    };
    let path = resolve_input(&path);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let value: Value = serde_json::from_str(text.trim()).map_err(|e| Error::Parse {
        path: path.clone(),
        line: e.line(),
        message: e.to_string(),
    })?;
    let Value::Object(map) = value else {
        return Err(Error::invalid("config", "expected a JSON object"));
    };
    let mut injected = Vec::new();
    for (key, v) in map {
        let flag = format!("--{}", key.replace('_', "-"));
        match v {
            Value::Bool(true) => injected.push(flag.into()),
            Value::Bool(false) | Value::Null => {}
            Value::String(s) => injected.extend([flag.into(), s.into()]),
            Value::Number(n) => injected.extend([flag.into(), n.to_string().into()]),
            Value::Array(items) => {
                for item in items {
                    let s = match item {
                        Value::String(s) => s,
                        other => other.to_string(),
                    };
                    injected.extend([OsString::from(&flag), s.into()]);
                }
            }
            Value::Object(_) => return Err(Error::invalid("config", format!("`{key}` must not be an object"))),
        }
    }
    let at = rest
        .iter()
        .position(|a| SUBCOMMANDS.contains(&a.to_string_lossy().as_ref()))
        .ok_or_else(|| Error::invalid("config", "no subcommand given"))?;
    rest.splice(at + 1..at + 1, injected);
    Ok(rest)
}

fn resolve_input(path: &Path) -> PathBuf {
    match std::env::var_os(DATA_DIR_ENV) {
        Some(dir) if path.is_relative() && !path.exists() => Path::new(&dir).join(path),
        _ => path.to_path_buf(),
    }
}

/// `out.jsonl` -> `out.jsonl.<suffix>`.
fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

fn provenance(command: &Command) -> Value {
    json!({
        "tool": "polyembed",
        "version": VERSION,
        "command": command.name(),
        "config": command,
    })
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut w = crate::corpus::create(path)?;
    let text = serde_json::to_string_pretty(value).expect("serializable");
    writeln!(w, "{text}").and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut w = crate::corpus::create(path)?;
    w.write_all(text.as_bytes()).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

fn dispatch(command: &Command) -> Result<()> {
    let prov = provenance(command);
    match command {
        Command::TranslatePrep(a) => translate_prep(a, &prov),
        Command::Train(a) => train_cmd(a, &prov),
        Command::BuildBench(a) => build_bench(a, &prov),
        Command::Embed(a) => embed(a, &prov),
        Command::Eval(a) => eval_cmd(a, &prov),
        Command::Compare(a) => compare(a, &prov),
        Command::FdCheck(a) => fd_check(a, &prov),
    }
}

fn check_distinct(inputs: &[&Path], outputs: &[&Path]) -> Result<()> {
    for o in outputs {
        if inputs.contains(o) {
            return Err(Error::invalid("paths", format!("{} is both input and output", o.display())));
        }
    }
    Ok(())
}

fn translate_prep(a: &TranslatePrepArgs, prov: &Value) -> Result<()> {
    let input = resolve_input(&a.input);
    check_distinct(&[&input], &[&a.out])?;
    let languages = parse_languages(&a.langs)?;
    let translator: Box<dyn Translator> = match a.translator {
        TranslatorKind::Identity => Box::new(IdentityTranslator),
        TranslatorKind::Pseudo => Box::new(DictionaryTranslator::pseudo()),
        TranslatorKind::Command => {
            let cmd = a
                .translator_cmd
                .as_deref()
                .ok_or_else(|| Error::invalid("--translator-cmd", "required with --translator command"))?;
            Box::new(CommandTranslator::parse(cmd)?)
        }
    };
    let instances = select_training_mixture(read_instances(&input)?, a.limit);
    let out = prepare_corpus(&instances, &languages, translator.as_ref())?;
    write_pairs(&a.out, &out.pairs)?;
    write_records(&sidecar(&a.out, "discards.jsonl"), &out.discards)?;
    write_json(&sidecar(&a.out, "provenance.json"), prov)?;
    println!(
        "{} instances, {} pairs, {} discards",
        instances.len(),
        out.pairs.len(),
        out.discards.len()
    );
    Ok(())
}

fn image_store(args: &ModelArgs, feature_dim: usize) -> Result<ImageStore<f64>> {
    match &args.images {
        Some(p) => {
            let store = ImageStore::load(&resolve_input(p))?;
            if store.dim() != feature_dim && store.dim() != 0 {
                return Err(Error::Dimension {
                    id: p.display().to_string(),
                    expected: feature_dim,
                    got: store.dim(),
                });
            }
            Ok(store)
        }
        None => Ok(ImageStore::synthetic(feature_dim)),
    }
}

fn load_model(path: &Path) -> Result<EncoderParams<f64>> {
    EncoderParams::load(&resolve_input(path))
}

fn train_cmd(a: &TrainArgs, prov: &Value) -> Result<()> {
    let pairs_path = resolve_input(&a.pairs);
    check_distinct(&[&pairs_path], &[&a.out])?;
    let teacher = match &a.teacher {
        Some(p) => load_model(p)?,
        None => EncoderParams::init(&EncoderConfig {
            vocab_size: a.vocab,
            dim: a.dim,
            feature_dim: a.feature_dim,
            init_scale: a.init_scale,
            seed: a.seed,
        })?,
    };
    let cfg = LossConfig {
        use_image_loss: a.image_loss,
        learning_rate: a.lr,
        batch_size: a.batch,
        epochs: a.epochs,
        seed: a.seed,
    };
    cfg.validate()?;
    let images = image_store(&a.model, teacher.feature_dim())?;
    let corpus = distill::prepare_corpus(&read_pairs(&pairs_path)?, teacher.vocab_size(), &images)?;
    let frozen = teacher.clone_frozen();
    let checksum_before = frozen.checksum();
    let before = alignment(&corpus, &frozen, &teacher)?;
    let (student, report) = train(&corpus, &frozen, teacher.clone(), &cfg)?;
    let after = alignment(&corpus, &frozen, &student)?;
    student.save(&a.out)?;
    if let Some(t) = &a.teacher_out {
        frozen.save(t)?;
    }
    let summary = json!({
        "train": report,
        "alignment_before": before,
        "alignment_after": after,
        "teacher_checksum_before": format!("{checksum_before:016x}"),
        "teacher_checksum_after": format!("{:016x}", frozen.checksum()),
        "student_checksum": format!("{:016x}", student.checksum()),
    });
    write_json(&sidecar(&a.out, "report.json"), &summary)?;
    write_json(&sidecar(&a.out, "provenance.json"), prov)?;
    println!(
        "{} steps, loss {:.6} -> {:.6}, translated cosine {:.4} -> {:.4}, english cosine {:.4} -> {:.4}",
        report.steps,
        report.initial_mean_total,
        report.final_mean_total,
        before.translated,
        after.translated,
        before.english,
        after.english
    );
    Ok(())
}

fn build_bench(a: &BuildBenchArgs, prov: &Value) -> Result<()> {
    let manifests = read_manifests(&resolve_input(&a.manifests))?;
    fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    let mut index = Vec::new();
    for style in a.style.styles() {
        let suites = build_benchmark(
            &manifests,
            &BuildOptions {
                style,
                seed: a.seed,
                max_instances: a.max_instances,
            },
        )?;
        for mut suite in suites {
            suite.header.provenance = Some(prov.clone());
            let name = suite.file_name();
            suite.write(&a.out.join(&name))?;
            println!(
                "{name}: {} instances, {} irrelevant candidates each",
                suite.instances.len(),
                suite.header.n
            );
            index.push(json!({ "file": name, "dataset": suite.header.dataset, "task": suite.header.task,
                "language": suite.header.language, "style": style, "n": suite.header.n,
                "instances": suite.instances.len() }));
        }
    }
    write_records(&a.out.join("index.jsonl"), &index)?;
    write_json(&a.out.join("provenance.json"), prov)
}

/// Expand directories into their `.jsonl` suite files, sorted by name.
fn suite_files(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        let p = resolve_input(p);
        if p.is_dir() {
            let mut files: Vec<PathBuf> = fs::read_dir(&p)
                .map_err(|e| Error::io(&p, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| {
                    f.extension().is_some_and(|x| x == "jsonl")
                        && f.file_name().is_some_and(|n| n != "index.jsonl")
                })
                .collect();
            files.sort();
            out.extend(files);
        } else {
            out.push(p);
        }
    }
    if out.is_empty() {
        return Err(Error::invalid("--suite", "no suite files found"));
    }
    Ok(out)
}

fn load_suites(paths: &[PathBuf], style: Option<StyleChoice>) -> Result<Vec<BenchmarkSuite>> {
    let wanted = style.map(StyleChoice::styles);
    let mut suites = Vec::new();
    for f in suite_files(paths)? {
        let s = BenchmarkSuite::read(&f)?;
        if wanted.as_ref().is_none_or(|w| w.contains(&s.header.style)) {
            suites.push(s);
        }
    }
    if suites.is_empty() {
        return Err(Error::invalid("--style", "no suite matches the requested style"));
    }
    Ok(suites)
}

fn embed(a: &EmbedArgs, prov: &Value) -> Result<()> {
    let model = load_model(&a.model)?;
    let images = image_store(&a.images, model.feature_dim())?;
    let embedder = ReferenceEmbedder {
        params: &model,
        images: &images,
    };
    let mut rows = Vec::new();
    let suites = load_suites(&a.suite, None)?;
    for suite in &suites {
        let style = suite.header.style;
        for inst in &suite.instances {
            let q = &inst.query;
            rows.push((inst.query_key(style), q.text.as_str(), q.image_ref.as_deref()));
            for (i, c) in inst.candidates.iter().enumerate() {
                rows.push((inst.candidate_key(style, i), c.text.as_str(), c.image_ref.as_deref()));
            }
        }
    }
    let vectors = rows
        .par_iter()
        .map(|(key, text, image_ref)| {
            embedder
                .embed(&EmbedItem { key, text, image_ref: *image_ref })
                .map(|v| (key.clone(), v))
        })
        .collect::<Result<Vec<_>>>()?;
    write_embeddings(&a.out, &vectors)?;
    println!("{} vectors", vectors.len());
    write_json(&sidecar(&a.out, "provenance.json"), prov)
}

fn eval_cmd(a: &EvalArgs, prov: &Value) -> Result<()> {
    let suites = load_suites(&a.suite, a.style)?;
    let metric = match a.metric {
        MetricChoice::Cosine => Similarity::Cosine,
        MetricChoice::Dot => Similarity::Dot,
    };
    let mut records: Vec<EvalRecord> = Vec::new();
    match (&a.model, &a.embeddings) {
        (Some(m), _) => {
            let model = load_model(m)?;
            let images = image_store(&a.images, model.feature_dim())?;
            let embedder = ReferenceEmbedder {
                params: &model,
                images: &images,
            };
            for s in &suites {
                records.extend(score_suite(s, &embedder, metric)?);
            }
        }
        (None, Some(e)) => {
            let embedder = PrecomputedEmbedder {
                table: read_embeddings::<f64>(&resolve_input(e))?,
            };
            for s in &suites {
                records.extend(score_suite(s, &embedder, metric)?);
            }
        }
        (None, None) => return Err(Error::invalid("eval", "need --model or --embeddings")),
    }
    write_records(&a.out, &records)?;
    let report = aggregate(&records)?;
    write_json(&sidecar(&a.out, "report.json"), &report)?;
    let table = format!(
        "{}\n{}",
        render_table(&[(a.name.as_str(), &report.overall)]),
        render_language_table(&report)
    );
    write_text(&sidecar(&a.out, "summary.txt"), &table)?;
    write_json(&sidecar(&a.out, "provenance.json"), prov)?;
    print!("{table}");
    Ok(())
}

fn compare(a: &CompareArgs, prov: &Value) -> Result<()> {
    let ra: Vec<EvalRecord> = read_records(&resolve_input(&a.a))?;
    let rb: Vec<EvalRecord> = read_records(&resolve_input(&a.b))?;
    let cmp = compare_models(&ra, &rb, a.alpha)?;
    if let Some(out) = &a.out {
        write_json(out, &cmp)?;
        write_json(&sidecar(out, "provenance.json"), prov)?;
    }
    print!("{}", cmp.render());
    Ok(())
}

fn fd_check(a: &FdCheckArgs, prov: &Value) -> Result<()> {
    let teacher = match &a.teacher {
        Some(p) => load_model(p)?,
        None => EncoderParams::init(&EncoderConfig {
            seed: a.seed,
            ..EncoderConfig::default()
        })?,
    };
    let student = match &a.student {
        Some(p) => load_model(p)?,
        None => teacher.perturbed(a.perturb, a.seed),
    };
    let images = image_store(&a.model, teacher.feature_dim())?;
    let pairs = read_pairs(&resolve_input(&a.pairs))?;
    if pairs.is_empty() {
        return Err(Error::invalid("--pairs", "no pairs"));
    }
    let picks = Stream::keyed(a.seed, &[b"fd-check"]).sample_indices(pairs.len(), a.count.min(pairs.len()));
    let cfg = LossConfig {
        use_image_loss: a.image_loss,
        ..LossConfig::default()
    };
    let mut worst = distill::FdReport {
        max_relative_error: 0.0,
        max_absolute_error: 0.0,
        parameters_checked: 0,
    };
    for i in picks {
        let p = PreparedPair::new(&pairs[i], teacher.vocab_size(), &images)?;
        let r = finite_diff_check(&p, &student, &teacher, &cfg, a.eps)?;
        worst.max_relative_error = worst.max_relative_error.max(r.max_relative_error);
        worst.max_absolute_error = worst.max_absolute_error.max(r.max_absolute_error);
        worst.parameters_checked += r.parameters_checked;
    }
    if let Some(out) = &a.out {
        write_json(out, &worst)?;
        write_json(&sidecar(out, "provenance.json"), prov)?;
    }
    println!(
        "max relative error {:.3e}, max absolute error {:.3e} over {} parameters",
        worst.max_relative_error, worst.max_absolute_error, worst.parameters_checked
    );
    if worst.max_relative_error >= a.tolerance {
        return Err(Error::CheckFailed(format!(
            "relative error {:.3e} >= {:.1e}",
            worst.max_relative_error, a.tolerance
        )));
    }
    Ok(())
}
