use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use atha_core::adaptation::Adapted;
use atha_core::analysis::{compare_report, comparison_csv, domain_cka, similarity_curve};
use atha_core::atha::{Metric, Variant};
use atha_core::checkpoint;
use atha_core::data::{gen_synthetic_domains, DataSpec, Dataset, Domain};
use atha_core::experiment::{load_run, run_episodes, write_run, RunConfig};
use atha_core::fsio;
use atha_core::pretrain::{pretrain, PretrainConfig};
use atha_core::Error;
use clap::{Parser, Subcommand, ValueEnum};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;

#[derive(Parser)]
#[command(name = "atha", version, about = "Few-shot adaptation experiments with head/tail token alignment")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a paired source/target synthetic dataset.
    GenData {
        /// JSON data spec (classes, images per class, shift strength).
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        seed: u64,
        /// Output directory; receives `source/` and `target/`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the backbone and text projection on a source dataset.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        /// JSON pretraining config; library defaults when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune and evaluate on target-domain episodes.
    FinetuneEval(FinetuneArgs),
    /// Standalone analyses.
    Analyze(AnalyzeArgs),
}

#[derive(clap::Args)]
struct FinetuneArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// JSON run config; flags below override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_variant)]
    variant: Option<Variant>,
    #[arg(long, value_parser = parse_metric)]
    metric: Option<Metric>,
    #[arg(long)]
    ways: Option<usize>,
    #[arg(long)]
    shots: Option<usize>,
    #[arg(long)]
    queries: Option<usize>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    run_tag: Option<String>,
    /// Source dataset for the post-training CKA probe.
    #[arg(long)]
    source: Option<PathBuf>,
    /// Record sorted token–text similarity curves on the query images.
    #[arg(long)]
    curves: bool,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Cka,
    Simcurve,
    Compare,
}

#[derive(clap::Args)]
struct AnalyzeArgs {
    #[arg(long, value_enum)]
    mode: Mode,
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Adapter directory written by a run with `save_adapters`.
    #[arg(long)]
    adapter: Option<PathBuf>,
    #[arg(long)]
    source: Option<PathBuf>,
    #[arg(long)]
    target: Option<PathBuf>,
    /// Class ids for the text side; every class of the target when absent.
    #[arg(long, value_delimiter = ',')]
    classes: Vec<usize>,
    #[arg(long, default_value_t = 100)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Token layer for `simcurve`; the encoder output when absent.
    #[arg(long)]
    layer: Option<usize>,
    #[arg(long, default_value = "model")]
    tag: String,
    /// Run directories for `compare`; the first is the reference.
    #[arg(long, num_args = 1..)]
    runs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    Variant::parse(s).map_err(|e| e.to_string())
}

fn parse_metric(s: &str) -> Result<Metric, String> {
    Metric::parse(s).map_err(|e| e.to_string())
}

/// Command failure with its process exit code.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Failure {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) | Error::Version(_) | Error::Sampling { .. } | Error::Index { .. } => 2,
            Error::Io { .. } | Error::Json { .. } | Error::Format { .. } | Error::Lookup(_) => 3,
            Error::Numeric { .. }
            | Error::Shape { .. }
            | Error::EmptyAxis { .. }
            | Error::DegenerateVector { .. }
            | Error::DegenerateInput { .. }
            | Error::Rank { .. } => 4,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type CmdResult = Result<(), Failure>;

/// Reads a JSON config the user named on the command line. A missing file is
/// a usage error; a malformed one is a config error.
fn read_config<T: DeserializeOwned>(path: &Path, what: &str) -> Result<T, Failure> {
    if !path.is_file() {
        return Err(Failure::usage(format!("{what} file {} does not exist", path.display())));
    }
    fsio::read_json(path).map_err(|e| match e {
        Error::Json { .. } => Failure::usage(format!("invalid {what}: {e}")),
        other => other.into(),
    })
}

fn gen_data(spec: &Path, seed: u64, out: &Path) -> CmdResult {
    let spec: DataSpec = read_config(spec, "data spec")?;
    let (source, target) = gen_synthetic_domains(&spec, seed)?;
    source.save(&out.join("source"))?;
    target.save(&out.join("target"))?;
    println!("wrote {} source and {} target images to {}", source.len(), target.len(), out.display());
    Ok(())
}

fn run_pretrain(data: &Path, config: Option<&Path>, out: &Path) -> CmdResult {
    let cfg: PretrainConfig = match config {
        Some(p) => read_config(p, "pretrain config")?,
        None => PretrainConfig::default(),
    };
    let source = Dataset::load(data)?;
    if source.domain != Domain::Source {
        return Err(Failure::usage(format!("{} is not a source-domain dataset", data.display())));
    }
    let (model, report) = pretrain(&source, &cfg)?;
    checkpoint::save_model(&model, out)?;
    fsio::write_json(&out.join("pretrain_report.json"), &report)?;
    println!(
        "source accuracy: train {:.4}, validation {:.4}",
        report.train_accuracy, report.val_accuracy
    );
    Ok(())
}

fn resolve_run_config(a: &FinetuneArgs) -> Result<RunConfig, Failure> {
    let mut cfg = match &a.config {
        Some(p) => read_config(p, "run config")?,
        None => {
            let mut c = RunConfig::default();
            // 800 episodes for 1-shot, 400 otherwise.
            if a.shots.is_some_and(|k| k > 1) {
                c.protocol.episodes = 400;
            }
            c
        }
    };
    cfg.checkpoint = a.ckpt.clone();
    cfg.target = a.target.clone();
    if let Some(v) = a.variant {
        cfg.atha.variant = v;
    }
    if let Some(m) = a.metric {
        cfg.atha.metric = m;
    }
    if let Some(n) = a.ways {
        cfg.protocol.n_way = n;
    }
    if let Some(k) = a.shots {
        cfg.protocol.k_shot = k;
    }
    if let Some(m) = a.queries {
        cfg.protocol.m_query = m;
    }
    if let Some(e) = a.episodes {
        cfg.protocol.episodes = e;
    }
    if let Some(e) = a.epochs {
        cfg.finetune.epochs = e;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(t) = &a.run_tag {
        cfg.run_tag = t.clone();
    }
    if let Some(s) = &a.source {
        cfg.analysis.source = Some(s.clone());
    }
    if a.curves {
        cfg.analysis.curves = true;
    }
    Ok(cfg)
}

fn finetune_eval(a: &FinetuneArgs) -> CmdResult {
    let cfg = resolve_run_config(a)?;
    let model = checkpoint::load_model(&cfg.checkpoint)?;
    cfg.validate(&model)?;
    let target = Dataset::load(&cfg.target)?;
    if target.domain != Domain::Target {
        return Err(Failure::usage(format!("{} is not a target-domain dataset", cfg.target.display())));
    }
    // The source set is loaded only for the CKA probe, which runs after each
    // episode's fine-tuning has finished.
    let source = cfg.analysis.source.as_deref().map(Dataset::load).transpose()?;
    let outputs = run_episodes(&model, &target, source.as_ref(), &cfg, a.jobs)?;
    let m = write_run(&a.out, &cfg, &outputs)?;
    println!(
        "{} ({}): accuracy {:.4} ± {:.4} over {} episodes",
        m.run_tag,
        m.variant.as_str(),
        m.accuracy_mean,
        m.accuracy_ci95,
        m.episodes
    );
    Ok(())
}

fn require<'a>(p: &'a Option<PathBuf>, flag: &str, mode: &str) -> Result<&'a Path, Failure> {
    p.as_deref()
        .ok_or_else(|| Failure::usage(format!("--mode {mode} requires --{flag}")))
}

fn analyze(a: &AnalyzeArgs) -> CmdResult {
    if let Mode::Compare = a.mode {
        if a.runs.is_empty() {
            return Err(Failure::usage("--mode compare requires at least one --runs directory"));
        }
        let runs = a.runs.iter().map(|d| load_run(d)).collect::<Result<Vec<_>, _>>()?;
        let rows = compare_report(&runs)?;
        fs::write(&a.out, comparison_csv(&rows)).map_err(|e| Failure::from(Error::io(&a.out, e)))?;
        return Ok(());
    }
    let mode = if let Mode::Cka = a.mode { "cka" } else { "simcurve" };
    let model = checkpoint::load_model(require(&a.ckpt, "ckpt", mode)?)?;
    let adapted = match &a.adapter {
        Some(dir) => checkpoint::load_adapted(dir)?,
        None => Adapted::pretrained(model.cfg.depth),
    };
    let target = Dataset::load(require(&a.target, "target", mode)?)?;
    let classes = if a.classes.is_empty() { target.class_names.clone() } else { a.classes.clone() };
    match a.mode {
        Mode::Cka => {
            let source = Dataset::load(require(&a.source, "source", mode)?)?;
            let report = domain_cka(&model, &adapted, &classes, &source, &target, a.samples, a.seed, &a.tag)?;
            fsio::write_json(&a.out, &report)?;
            println!("CKA {:.6}", report.value);
        }
        Mode::Simcurve => {
            let n = a.samples.min(target.len());
            let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
            let images: Vec<_> = sample(&mut rng, target.len(), n)
                .into_iter()
                .map(|i| target.images[i].clone())
                .collect();
            let layer = a.layer.unwrap_or(model.cfg.depth);
            let curve = similarity_curve(&model, &adapted, &images, &classes, layer, &a.tag, "target")?;
            fs::write(&a.out, curve.to_csv()).map_err(|e| Failure::from(Error::io(&a.out, e)))?;
            println!(
                "bottom decile {:.6}, top decile {:.6}",
                curve.bottom_decile_mean(),
                curve.top_decile_mean()
            );
        }
        Mode::Compare => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::GenData { spec, seed, out } => gen_data(spec, *seed, out),
        Command::Pretrain { data, config, out } => run_pretrain(data, config.as_deref(), out),
        Command::FinetuneEval(a) => finetune_eval(a),
        Command::Analyze(a) => analyze(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            if f.code == 2 {
                eprintln!("run `atha --help` for usage");
            }
            ExitCode::from(f.code)
        }
    }
}
