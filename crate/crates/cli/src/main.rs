use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use promptevo::driver::{
    held_out_accuracy, initial_manifest, read_trace, run, LibraryFiles, PromptFile, RunConfig, RunOutcome, RunResult,
    MANIFEST_FILE, RESULT_FILE, TRACE_FILE,
};
use promptevo::scoring::{pcc, Evaluator, Objective, ScoreParams, DEFAULT_ALPHA, DEFAULT_TAU};
use promptevo::store::{save_bundle, Bundle, EmbeddingStore};
use promptevo::synth::{synth_benchmark, SynthSpec};
use promptevo::Error;

const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_PENDING: u8 = 10;

/// Prompt optimization over precomputed image and text embeddings.
///
/// Exit statuses: 0 ok, 2 usage or config error, 3 data error,
/// 10 run stopped waiting for an encoded manifest.
#[derive(Parser)]
#[command(name = "promptevo", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic benchmark with a known best prompt.
    ///
    /// Creates train.bin, test.bin, texts.bin (+ sidecar), library.json,
    /// answer_key.json and a ready-to-run config.json. Exit 2 on an invalid spec.
    Synth(SynthArgs),
    /// Run template and description search from a config file.
    ///
    /// Exit 0 when done, 10 when a two-phase run needs descriptions encoded
    /// (manifest.json is written), 2 on config errors, 3 on data errors.
    Optimize(OptimizeArgs),
    /// Score a prompt file against an image bundle.
    ///
    /// Exit 3 when a prompt text is not found in the text bundles.
    Score(ScoreArgs),
    /// Write the encode manifest a config needs, without optimizing.
    Manifest(ManifestArgs),
    /// Summarize a finished run; with --test-bundle, correlate train fitness
    /// with test accuracy over the logged candidates.
    ///
    /// Exit 3 when run artifacts are missing.
    Report(ReportArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 64)]
    dim: usize,
    /// Training images.
    #[arg(long, default_value_t = 200)]
    train: usize,
    /// Test images.
    #[arg(long, default_value_t = 200)]
    test: usize,
    /// Descriptions per class.
    #[arg(long, default_value_t = 20)]
    descs: usize,
    /// Planted descriptions per class.
    #[arg(long, default_value_t = 4)]
    planted: usize,
    #[arg(long, default_value_t = 8)]
    templates: usize,
    /// Image noise standard deviation.
    #[arg(long, default_value_t = 0.3)]
    sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct OptimizeArgs {
    #[arg(long)]
    config: PathBuf,
    /// Log every scored candidate to candidates.jsonl (needed by report).
    #[arg(long)]
    log_candidates: bool,
}

#[derive(Args)]
struct ScoreArgs {
    /// Prompt file written by optimize.
    #[arg(long)]
    prompt: PathBuf,
    /// Image bundle to score on.
    #[arg(long)]
    bundle: PathBuf,
    /// Text bundles to resolve the prompt against (default: the ones
    /// recorded in the prompt file).
    #[arg(long, num_args = 1..)]
    texts: Vec<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    alpha: f64,
    #[arg(long, default_value_t = DEFAULT_TAU)]
    tau: f64,
    /// JSON report path (default: next to the prompt, `<name>.score.json`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ManifestArgs {
    #[arg(long)]
    config: PathBuf,
    /// Where to write the manifest (default: manifest.json in the run's
    /// output directory).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    /// Run output directory.
    #[arg(long)]
    run: PathBuf,
    /// Held-out image bundle for the fitness/accuracy correlation.
    #[arg(long)]
    test_bundle: Option<PathBuf>,
}

enum Failure {
    Usage(String),
    Data(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_config_error() {
            Failure::Usage(e.to_string())
        } else {
            Failure::Data(e.to_string())
        }
    }
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
    let outcome = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Optimize(a) => optimize(a),
        Command::Score(a) => score(a),
        Command::Manifest(a) => manifest(a),
        Command::Report(a) => report(a),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Data(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(EXIT_DATA)
        }
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Failure::Data(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn synth(a: SynthArgs) -> Result<u8, Failure> {
    let spec = SynthSpec {
        n_classes: a.classes,
        n_img_train: a.train,
        n_img_test: a.test,
        dim: a.dim,
        n_templates: a.templates,
        n_desc_per_class: a.descs,
        n_planted_per_class: a.planted,
        noise_sigma: a.sigma,
        seed: a.seed,
    };
    spec.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let b = synth_benchmark(&spec)?;
    fs::create_dir_all(&a.out).map_err(|e| Failure::Data(format!("{}: {e}", a.out.display())))?;
    save_bundle(&Bundle::Image(b.train.image_bundle()), a.out.join("train.bin"))?;
    save_bundle(&Bundle::Image(b.test.image_bundle()), a.out.join("test.bin"))?;
    let texts = b.train.text_bundle(0).expect("synthetic store has one text bundle");
    save_bundle(&Bundle::Text(texts), a.out.join("texts.bin"))?;
    b.sources.save(&a.out.join("library.json"))?;
    let key = serde_json::to_value(&b.answer_key).map_err(|e| Failure::Data(e.to_string()))?;
    write_json(&a.out.join("answer_key.json"), &key)?;
    let cfg = RunConfig::new(
        "train.bin",
        vec![PathBuf::from("texts.bin")],
        LibraryFiles::combined("library.json"),
    );
    cfg.save(&a.out.join("config.json"))?;
    println!(
        "wrote {} classes, {} train / {} test images, {} texts to {}",
        spec.n_classes,
        spec.n_img_train,
        spec.n_img_test,
        b.train.n_texts(),
        a.out.display()
    );
    Ok(0)
}

fn optimize(a: OptimizeArgs) -> Result<u8, Failure> {
    let mut cfg = RunConfig::load(&a.config)?;
    cfg.log_candidates |= a.log_candidates;
    match run(&cfg)? {
        RunOutcome::Complete(r) => {
            println!(
                "best fitness {:.6} (train accuracy {:.4}), {} evaluations",
                r.best_score.fitness, r.best_score.accuracy, r.evaluations
            );
            println!("results in {}", cfg.output_dir.display());
            Ok(0)
        }
        RunOutcome::ManifestPending { manifest, result } => {
            println!(
                "template search done (fitness {:.6}); encode {} and rerun",
                result.template_score.fitness,
                manifest.display()
            );
            Ok(EXIT_PENDING)
        }
    }
}

fn score(a: ScoreArgs) -> Result<u8, Failure> {
    let params = ScoreParams {
        alpha: a.alpha,
        tau: a.tau,
    };
    params.validate()?;
    let prompt = PromptFile::load(&a.prompt)?;
    let base = a.prompt.parent().unwrap_or(Path::new(""));
    let texts: Vec<PathBuf> = if a.texts.is_empty() {
        prompt.text_bundles.iter().map(|p| base.join(p)).collect()
    } else {
        a.texts.clone()
    };
    let store = EmbeddingStore::open(a.bundle.clone(), &texts)?;
    let (space, candidate) = prompt.resolve(&store)?;
    let s = Evaluator::new(&store, &space, params).evaluate(&candidate)?;
    println!("accuracy          {:.6}", s.accuracy);
    println!("mean_true_logprob {:.6}", s.mean_true_logprob);
    println!("fitness           {:.6}", s.fitness);
    let out = a.out.unwrap_or_else(|| a.prompt.with_extension("score.json"));
    let report = serde_json::json!({
        "prompt": a.prompt,
        "bundle": a.bundle,
        "alpha": params.alpha,
        "tau": params.tau,
        "accuracy": s.accuracy,
        "mean_true_logprob": s.mean_true_logprob,
        "fitness": s.fitness,
        "n_samples": s.n_samples,
        "n_correct": s.n_correct,
    });
    write_json(&out, &report)?;
    Ok(0)
}

fn manifest(a: ManifestArgs) -> Result<u8, Failure> {
    let cfg = RunConfig::load(&a.config)?;
    let m = initial_manifest(&cfg)?;
    let out = match a.out {
        Some(p) => p,
        None => {
            fs::create_dir_all(&cfg.output_dir)
                .map_err(|e| Failure::Data(format!("{}: {e}", cfg.output_dir.display())))?;
            cfg.output_dir.join(MANIFEST_FILE)
        }
    };
    m.save(&out)?;
    println!("{} texts to encode, written to {}", m.len(), out.display());
    Ok(0)
}

fn report(a: ReportArgs) -> Result<u8, Failure> {
    let result = RunResult::load(&a.run.join(RESULT_FILE))?;
    let trace_path = a.run.join(TRACE_FILE);
    if !trace_path.exists() {
        return Err(Failure::Data(format!("missing {}", trace_path.display())));
    }
    let trace = read_trace(&trace_path)?;
    println!("phase completed: {}", result.phase_completed.as_str());
    println!(
        "{:<12} {:>5} {:>4} {:<6} {:>14} {:>8}",
        "phase", "group", "iter", "step", "best_fitness", "evals"
    );
    for (phase, group, iteration, step, best, evals) in &trace {
        let group = group.map_or("-".to_string(), |g| g.to_string());
        println!("{phase:<12} {group:>5} {iteration:>4} {step:<6} {best:>14.6} {evals:>8}");
    }
    println!(
        "best fitness: template phase {:.6}, final {:.6} (train accuracy {:.4})",
        result.template_score.fitness, result.best_score.fitness, result.best_score.accuracy
    );
    if let Some(test) = &a.test_bundle {
        let rows = held_out_accuracy(&a.run, test)?;
        let fit: Vec<f64> = rows.iter().map(|r| r.train_fitness).collect();
        let acc: Vec<f64> = rows.iter().map(|r| r.test_accuracy).collect();
        match pcc(&fit, &acc) {
            Ok(r) => println!(
                "pcc(train fitness, test accuracy) = {r:.6} over {} candidates",
                rows.len()
            ),
            Err(e) => println!("pcc undefined over {} candidates: {e}", rows.len()),
        }
    }
    Ok(0)
}
