use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mgimn_core::episodes::EpisodeSpec;
use mgimn_core::experiment::{self, MetricsRow, Prepared, RunConfig, Setting, CONFIG_FILE, METRICS_FILE, METRICS_HEADER};
use mgimn_core::gradcheck::GradCheckOptions;
use mgimn_core::synth::{gen_synth, SynthConfig};
use mgimn_core::Error;

/// Multi-grained interactive matching network for few-shot text classification.
#[derive(Parser, Debug)]
#[command(name = "mgimn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,
    /// Checkpoint file written by `train`.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Evaluation setting for `eval`: fsl, gfsl or rtc.
    #[arg(long, global = true)]
    setting: Option<String>,
    /// Sets any config key, e.g. `--set hidden=32`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    sets: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Episodic training; writes checkpoint, vocabulary, metrics and split.
    Train,
    /// N-way K-shot accuracy on test classes.
    EvalFsl,
    /// C-way accuracy over all classes.
    EvalGfsl,
    /// Retrieval-then-classify accuracy, recall and timing.
    EvalRtc,
    /// Evaluation in the setting named by --setting.
    Eval,
    /// Trains and tests over split seeds × init seeds.
    Sweep,
    /// Finite-difference gradient check of every architecture.
    GradCheck {
        /// Flips analytic gradients to confirm the check can fail.
        #[arg(long, hide = true)]
        inject_bug: bool,
    },
    /// Writes a synthetic JSON-lines dataset.
    GenSynth,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        Error::Check(_) => 3,
        Error::Data(_)
        | Error::Parse { .. }
        | Error::Sampling(_)
        | Error::Load(_)
        | Error::Io { .. }
        | Error::Shape(_)
        | Error::State(_) => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Defaults, then the config file, then `--set`, then dedicated flags.
fn build_config(common: &Common, base: RunConfig) -> Result<RunConfig, Error> {
    let mut cfg = base;
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        cfg.apply_text(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    }
    for kv in &common.sets {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(d) = &common.dataset {
        cfg.dataset = Some(d.clone());
    }
    if let Some(o) = &common.out {
        cfg.out = Some(o.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Small enough for a finite-difference check of every parameter.
fn tiny_config() -> RunConfig {
    RunConfig {
        hidden: 8,
        layers: 1,
        heads: 2,
        ways: 2,
        shots: 2,
        queries: 1,
        eval_ways: 2,
        dropout: 0.0,
        synth_classes: 6,
        synth_per_class: 6,
        synth_vocab: 80,
        ..RunConfig::default()
    }
}

fn out_dir(cfg: &RunConfig) -> Result<&Path, Error> {
    cfg.out
        .as_deref()
        .ok_or_else(|| Error::Config("no output directory given (--out or `out =`)".into()))
}

fn checkpoint(common: &Common) -> Result<&Path, Error> {
    common
        .checkpoint
        .as_deref()
        .ok_or_else(|| Error::Config("no checkpoint given (--checkpoint)".into()))
}

fn synth_config(cfg: &RunConfig) -> SynthConfig {
    SynthConfig::new(cfg.synth_classes, cfg.synth_per_class, cfg.synth_vocab, cfg.synth_noise, cfg.seed)
}

fn append_metrics(cfg: &RunConfig, row: MetricsRow) -> Result<(), Error> {
    let Some(dir) = &cfg.out else { return Ok(()) };
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    let path = dir.join(METRICS_FILE);
    let fresh = !path.exists();
    let io = |e| Error::Io {
        path: path.clone(),
        source: e,
    };
    let mut f = fs::OpenOptions::new().create(true).append(true).open(&path).map_err(io)?;
    if fresh {
        writeln!(f, "{METRICS_HEADER}").map_err(io)?;
    }
    writeln!(f, "{}", row.to_csv()).map_err(io)
}

fn run(cli: &Cli) -> Result<(), Error> {
    let common = &cli.common;
    match cli.command {
        Command::Train => {
            let cfg = build_config(common, RunConfig::default())?;
            let dir = out_dir(&cfg)?.to_path_buf();
            let prep = Prepared::load(&cfg)?;
            let out = experiment::train(&cfg, &prep)?;
            experiment::write_run(&dir, &cfg, &prep, &out)?;
            match out.best_val {
                Some(v) => println!("best validation accuracy {v:.4}"),
                None => println!("no validation run"),
            }
            println!("wrote {}", dir.display());
            Ok(())
        }
        Command::EvalFsl => evaluate(common, Setting::Fsl),
        Command::EvalGfsl => evaluate(common, Setting::Gfsl),
        Command::EvalRtc => evaluate(common, Setting::Rtc),
        Command::Eval => {
            let name = common
                .setting
                .as_deref()
                .ok_or_else(|| Error::Config("eval needs --setting fsl|gfsl|rtc".into()))?;
            evaluate(common, name.parse()?)
        }
        Command::Sweep => {
            let cfg = build_config(common, RunConfig::default())?;
            let ds = mgimn_core::episodes::load_dataset(cfg.dataset_path()?, cfg.shots + 1)?;
            let report = experiment::sweep(&cfg, &ds)?;
            let csv = report.to_csv();
            print!("{csv}");
            if let Some(dir) = &cfg.out {
                fs::create_dir_all(dir).map_err(|e| Error::Io {
                    path: dir.clone(),
                    source: e,
                })?;
                let path = dir.join("sweep.csv");
                fs::write(&path, csv).map_err(|e| Error::Io { path, source: e })?;
            }
            Ok(())
        }
        Command::GradCheck { inject_bug } => {
            let cfg = build_config(common, tiny_config())?;
            let ds = match &cfg.dataset {
                Some(path) => mgimn_core::episodes::load_dataset(path, cfg.shots + 1)?,
                None => gen_synth(&synth_config(&cfg))?,
            };
            let prep = Prepared::with_new_vocab(ds, &cfg)?;
            let opts = GradCheckOptions {
                parallelism: cfg.parallelism(),
                flip_analytic_sign: inject_bug,
                ..GradCheckOptions::default()
            };
            let mut failed = Vec::new();
            for (arch, report) in experiment::cmd_gradcheck(&cfg, &prep, &opts)? {
                println!("== {arch}\n{report}");
                if !report.passed() {
                    failed.push(arch.to_string());
                }
            }
            if failed.is_empty() {
                Ok(())
            } else {
                Err(Error::Check(format!("gradient check failed for {}", failed.join(", "))))
            }
        }
        Command::GenSynth => {
            let cfg = build_config(common, RunConfig::default())?;
            let dir = out_dir(&cfg)?;
            let ds = gen_synth(&synth_config(&cfg))?;
            fs::create_dir_all(dir).map_err(|e| Error::Io {
                path: dir.to_path_buf(),
                source: e,
            })?;
            let path = dir.join("synth.jsonl");
            ds.save_jsonl(&path)?;
            println!("wrote {} instances of {} classes to {}", ds.len(), ds.num_classes(), path.display());
            Ok(())
        }
    }
}

/// The config saved next to a checkpoint, without its output directory.
fn run_config(checkpoint: &Path) -> Result<RunConfig, Error> {
    let saved = checkpoint.parent().unwrap_or(Path::new(".")).join(CONFIG_FILE);
    if !saved.exists() {
        return Ok(RunConfig::default());
    }
    let mut cfg = RunConfig::from_file(&saved)?;
    cfg.out = None;
    Ok(cfg)
}

fn evaluate(common: &Common, setting: Setting) -> Result<(), Error> {
    let ckpt = checkpoint(common)?;
    let cfg = build_config(common, run_config(ckpt)?)?;
    let (prep, model, params) = experiment::load_run(&cfg, ckpt)?;
    log::info!("{} model with {} parameters", model.arch, params.scalar_count());
    let started = std::time::Instant::now();
    let (accuracy, tag, ms) = match setting {
        Setting::Fsl => {
            let spec = EpisodeSpec {
                ways: cfg.eval_ways.min(prep.split.test.len()),
                ..cfg.eval_spec()
            };
            let acc = experiment::evaluate_fsl(&model, &params, &prep, &prep.split.test, spec, cfg.eval_episodes, cfg.eval_seed, cfg.parallelism())?;
            println!("fsl {}-way {}-shot accuracy {:.4} over {} episodes", spec.ways, spec.shots, acc.accuracy, cfg.eval_episodes);
            let queries = (cfg.eval_episodes * spec.queries) as f64;
            (acc.accuracy, format!("fsl{}", spec.ways), started.elapsed().as_secs_f64() * 1e3 / queries)
        }
        Setting::Gfsl => {
            let acc = experiment::evaluate_gfsl(&model, &params, &prep, &cfg, cfg.eval_episodes, cfg.eval_seed)?;
            let ways = prep.dataset.num_classes();
            println!("gfsl {ways}-way {}-shot accuracy {:.4} over {} episodes", cfg.shots, acc.accuracy, cfg.eval_episodes);
            let queries = (cfg.eval_episodes * cfg.queries) as f64;
            (acc.accuracy, "gfsl".to_string(), started.elapsed().as_secs_f64() * 1e3 / queries)
        }
        Setting::Rtc => {
            let s = experiment::evaluate_rtc(&model, &params, &prep, &cfg, cfg.eval_episodes, cfg.eval_seed)?;
            println!(
                "rtc accuracy {:.4} (full {:.4}, agreement {:.4}), recall@{} {:.4}",
                s.accuracy, s.full_accuracy, s.agreement, cfg.retrieve_n, s.recall
            );
            println!("ms/query: full {:.4}, rtc {:.4}, speedup {:.2}x", s.full_ms, s.rtc_ms, s.speedup());
            if let Some(dir) = &cfg.out {
                s.index.save(dir)?;
                println!("wrote retrieval index to {}", dir.display());
            }
            (s.accuracy, "rtc".to_string(), s.rtc_ms)
        }
    };
    append_metrics(
        &cfg,
        MetricsRow {
            step: 0,
            train_loss: f64::NAN,
            eval_accuracy: accuracy,
            setting: tag,
            ms_per_query: ms,
        },
    )
}
