//! Run configuration, training loop, evaluation settings, sweeps, and the
//! gradient check driver.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::{self, tokenize, EncoderConfig, TokenSeq, Vocabulary};
use crate::episodes::{self, load_dataset, split_classes, ClassSplit, Dataset, Episode, EpisodeSpec};
use crate::error::{Error, Result};
use crate::gradcheck::{self, GradCheckOptions, GradCheckReport};
use crate::matching::AblationFlags;
use crate::model::{Architecture, ModelConfig};
use crate::parallel::{self, Parallelism};
use crate::params::ParamSet;
use crate::predict;
use crate::rtc::{self, RetrievalIndex, RetrievalMode, RtcConfig};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::Mode;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.txt";
pub const SPLIT_FILE: &str = "split.json";
pub const METRICS_HEADER: &str = "step,train_loss,eval_accuracy,setting,ms_per_query";

// RNG stream offsets so sampling, dropout, and evaluation never share draws
const SAMPLE_STREAM: u64 = 0x5a4d_0001;
const DROPOUT_STREAM: u64 = 0x5a4d_0002;
const VAL_STREAM: u64 = 0x5a4d_0003;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Setting {
    Fsl,
    Gfsl,
    Rtc,
}

impl FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fsl" => Ok(Self::Fsl),
            "gfsl" => Ok(Self::Gfsl),
            "rtc" => Ok(Self::Rtc),
            other => Err(Error::Config(format!("unknown setting {other:?} (fsl, gfsl, rtc)"))),
        }
    }
}

/// Every key accepted in a config file, with its meaning.
pub const CONFIG_KEYS: &[(&str, &str)] = &[
    ("model", "mgimn | proto | matching"),
    ("hidden", "encoder width D"),
    ("layers", "encoder layers"),
    ("heads", "attention heads"),
    ("max_seq_len", "positions including CLS"),
    ("dropout", "dropout rate in [0, 1)"),
    ("min_count", "minimum token count for the vocabulary"),
    ("ways", "N for training episodes"),
    ("shots", "K"),
    ("queries", "R per episode"),
    ("eval_ways", "N for standard evaluation"),
    ("lr", "Adam learning rate"),
    ("steps", "training episodes"),
    ("seed", "initialisation and sampling seed"),
    ("split_seed", "class split seed"),
    ("eval_seed", "evaluation episode seed"),
    ("eval_episodes", "episodes per evaluation"),
    ("val_every", "validate every this many steps"),
    ("val_episodes", "episodes per validation"),
    ("use_instance", "instance-level alignment"),
    ("use_class", "class-level alignment"),
    ("use_episode", "episode-level alignment"),
    ("retrieval", "mean-vector | bm25"),
    ("retrieve_n", "classes kept by retrieval"),
    ("rtc_shots", "supports per class in the reduced episode"),
    ("bm25_k1", "BM25 term saturation"),
    ("bm25_b", "BM25 length normalisation"),
    ("timing_queries", "timed queries for ms/query"),
    ("timing_warmup", "untimed warm-up queries"),
    ("parallel", "evaluate episodes on the rayon pool"),
    ("sweep_splits", "split seeds in a sweep"),
    ("sweep_seeds", "init seeds in a sweep"),
    ("synth_classes", "gen-synth C"),
    ("synth_per_class", "gen-synth M"),
    ("synth_vocab", "gen-synth vocabulary size"),
    ("synth_noise", "gen-synth distractor probability"),
    ("dataset", "JSON-lines dataset path"),
    ("out", "output directory"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: Architecture,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
    pub min_count: usize,
    pub ways: usize,
    pub shots: usize,
    pub queries: usize,
    pub eval_ways: usize,
    pub lr: f64,
    pub steps: usize,
    pub seed: u64,
    pub split_seed: u64,
    pub eval_seed: u64,
    pub eval_episodes: usize,
    pub val_every: usize,
    pub val_episodes: usize,
    pub flags: AblationFlags,
    pub retrieval: RetrievalMode,
    pub retrieve_n: usize,
    pub rtc_shots: usize,
    pub bm25_k1: f64,
    pub bm25_b: f64,
    pub timing_queries: usize,
    pub timing_warmup: usize,
    pub parallel: bool,
    pub sweep_splits: usize,
    pub sweep_seeds: usize,
    pub synth_classes: usize,
    pub synth_per_class: usize,
    pub synth_vocab: usize,
    pub synth_noise: f64,
    pub dataset: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: Architecture::Mgimn,
            hidden: 128,
            layers: 2,
            heads: 2,
            max_seq_len: 32,
            dropout: 0.1,
            min_count: 1,
            ways: 5,
            shots: 5,
            queries: 5,
            eval_ways: 5,
            lr: 1e-4,
            steps: 1000,
            seed: 0,
            split_seed: 0,
            eval_seed: 1,
            eval_episodes: 500,
            val_every: 100,
            val_episodes: 100,
            flags: AblationFlags::all(),
            retrieval: RetrievalMode::MeanVector,
            retrieve_n: 10,
            rtc_shots: 5,
            bm25_k1: 1.2,
            bm25_b: 0.75,
            timing_queries: 100,
            timing_warmup: 10,
            parallel: true,
            sweep_splits: 5,
            sweep_seeds: 3,
            synth_classes: 30,
            synth_per_class: 40,
            synth_vocab: 500,
            synth_noise: 0.3,
            dataset: None,
            out: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("bad value {value:?} for {key}: expected true or false"))),
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "model" => self.model = v.parse()?,
            "hidden" => self.hidden = parse(key, v)?,
            "layers" => self.layers = parse(key, v)?,
            "heads" => self.heads = parse(key, v)?,
            "max_seq_len" => self.max_seq_len = parse(key, v)?,
            "dropout" => self.dropout = parse(key, v)?,
            "min_count" => self.min_count = parse(key, v)?,
            "ways" => self.ways = parse(key, v)?,
            "shots" => self.shots = parse(key, v)?,
            "queries" => self.queries = parse(key, v)?,
            "eval_ways" => self.eval_ways = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "steps" => self.steps = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "split_seed" => self.split_seed = parse(key, v)?,
            "eval_seed" => self.eval_seed = parse(key, v)?,
            "eval_episodes" => self.eval_episodes = parse(key, v)?,
            "val_every" => self.val_every = parse(key, v)?,
            "val_episodes" => self.val_episodes = parse(key, v)?,
            "use_instance" => self.flags.use_instance = parse_bool(key, v)?,
            "use_class" => self.flags.use_class = parse_bool(key, v)?,
            "use_episode" => self.flags.use_episode = parse_bool(key, v)?,
            "retrieval" => self.retrieval = v.parse()?,
            "retrieve_n" => self.retrieve_n = parse(key, v)?,
            "rtc_shots" => self.rtc_shots = parse(key, v)?,
            "bm25_k1" => self.bm25_k1 = parse(key, v)?,
            "bm25_b" => self.bm25_b = parse(key, v)?,
            "timing_queries" => self.timing_queries = parse(key, v)?,
            "timing_warmup" => self.timing_warmup = parse(key, v)?,
            "parallel" => self.parallel = parse_bool(key, v)?,
            "sweep_splits" => self.sweep_splits = parse(key, v)?,
            "sweep_seeds" => self.sweep_seeds = parse(key, v)?,
            "synth_classes" => self.synth_classes = parse(key, v)?,
            "synth_per_class" => self.synth_per_class = parse(key, v)?,
            "synth_vocab" => self.synth_vocab = parse(key, v)?,
            "synth_noise" => self.synth_noise = parse(key, v)?,
            "dataset" => self.dataset = Some(PathBuf::from(v)),
            "out" => self.out = Some(PathBuf::from(v)),
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines over the defaults; `#` starts a comment.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    /// Applies `key = value` lines on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value, got {line:?}", i + 1))
            })?;
            self.set(k, v)
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_text(&text)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let opt = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
        let pairs: Vec<(&str, String)> = vec![
            ("model", self.model.to_string()),
            ("hidden", self.hidden.to_string()),
            ("layers", self.layers.to_string()),
            ("heads", self.heads.to_string()),
            ("max_seq_len", self.max_seq_len.to_string()),
            ("dropout", self.dropout.to_string()),
            ("min_count", self.min_count.to_string()),
            ("ways", self.ways.to_string()),
            ("shots", self.shots.to_string()),
            ("queries", self.queries.to_string()),
            ("eval_ways", self.eval_ways.to_string()),
            ("lr", self.lr.to_string()),
            ("steps", self.steps.to_string()),
            ("seed", self.seed.to_string()),
            ("split_seed", self.split_seed.to_string()),
            ("eval_seed", self.eval_seed.to_string()),
            ("eval_episodes", self.eval_episodes.to_string()),
            ("val_every", self.val_every.to_string()),
            ("val_episodes", self.val_episodes.to_string()),
            ("use_instance", self.flags.use_instance.to_string()),
            ("use_class", self.flags.use_class.to_string()),
            ("use_episode", self.flags.use_episode.to_string()),
            (
                "retrieval",
                match self.retrieval {
                    RetrievalMode::MeanVector => "mean-vector".into(),
                    RetrievalMode::Bm25 => "bm25".into(),
                },
            ),
            ("retrieve_n", self.retrieve_n.to_string()),
            ("rtc_shots", self.rtc_shots.to_string()),
            ("bm25_k1", self.bm25_k1.to_string()),
            ("bm25_b", self.bm25_b.to_string()),
            ("timing_queries", self.timing_queries.to_string()),
            ("timing_warmup", self.timing_warmup.to_string()),
            ("parallel", self.parallel.to_string()),
            ("sweep_splits", self.sweep_splits.to_string()),
            ("sweep_seeds", self.sweep_seeds.to_string()),
            ("synth_classes", self.synth_classes.to_string()),
            ("synth_per_class", self.synth_per_class.to_string()),
            ("synth_vocab", self.synth_vocab.to_string()),
            ("synth_noise", self.synth_noise.to_string()),
        ];
        for (k, v) in pairs {
            let _ = writeln!(s, "{k} = {v}");
        }
        for (k, v) in [("dataset", opt(&self.dataset)), ("out", opt(&self.out))] {
            if let Some(v) = v {
                let _ = writeln!(s, "{k} = {v}");
            }
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.train_spec().validate()?;
        EpisodeSpec {
            ways: self.eval_ways,
            shots: self.shots,
            queries: self.queries,
        }
        .validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr {} must be positive", self.lr)));
        }
        if self.eval_episodes == 0 || self.val_episodes == 0 {
            return Err(Error::Config("evaluation episode counts must be at least 1".into()));
        }
        if self.val_every == 0 {
            return Err(Error::Config("val_every must be at least 1".into()));
        }
        if self.retrieve_n == 0 || self.rtc_shots == 0 {
            return Err(Error::Config("retrieve_n and rtc_shots must be at least 1".into()));
        }
        if self.sweep_splits == 0 || self.sweep_seeds == 0 {
            return Err(Error::Config("sweep grid must be non-empty".into()));
        }
        self.model_config(8).validate()
    }

    pub fn train_spec(&self) -> EpisodeSpec {
        EpisodeSpec {
            ways: self.ways,
            shots: self.shots,
            queries: self.queries,
        }
    }

    pub fn eval_spec(&self) -> EpisodeSpec {
        EpisodeSpec {
            ways: self.eval_ways,
            ..self.train_spec()
        }
    }

    pub fn parallelism(&self) -> Parallelism {
        if self.parallel {
            Parallelism::Rayon
        } else {
            Parallelism::Sequential
        }
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            arch: self.model,
            encoder: EncoderConfig {
                layers: self.layers,
                hidden: self.hidden,
                heads: self.heads,
                max_seq_len: self.max_seq_len,
                vocab_size,
            },
            flags: self.flags,
            dropout: self.dropout,
        }
    }

    pub fn rtc_config(&self) -> RtcConfig {
        RtcConfig {
            mode: self.retrieval,
            retrieve_n: self.retrieve_n,
            shots_k: self.rtc_shots,
            k1: self.bm25_k1,
            b: self.bm25_b,
        }
    }

    pub fn dataset_path(&self) -> Result<&Path> {
        self.dataset
            .as_deref()
            .ok_or_else(|| Error::Config("no dataset given (--dataset or `dataset =`)".into()))
    }
}

/// A dataset with its vocabulary, token sequences, and class split.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub dataset: Dataset,
    pub vocab: Vocabulary,
    pub seqs: Vec<TokenSeq>,
    pub split: ClassSplit,
}

impl Prepared {
    pub fn new(dataset: Dataset, vocab: Vocabulary, cfg: &RunConfig) -> Result<Self> {
        dataset.require_min_per_class(cfg.shots + 1)?;
        let seqs = dataset
            .texts
            .iter()
            .map(|t| tokenize(t, &vocab, cfg.max_seq_len))
            .collect();
        let split = split_classes(dataset.num_classes(), cfg.split_seed)?;
        Ok(Self {
            dataset,
            vocab,
            seqs,
            split,
        })
    }

    /// Builds the vocabulary from every text of the dataset.
    pub fn with_new_vocab(dataset: Dataset, cfg: &RunConfig) -> Result<Self> {
        let vocab = Vocabulary::build(&dataset.texts, cfg.min_count)?;
        Self::new(dataset, vocab, cfg)
    }

    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let ds = load_dataset(cfg.dataset_path()?, cfg.shots + 1)?;
        Self::with_new_vocab(ds, cfg)
    }

    fn episode_seqs(&self, ep: &Episode) -> (Vec<Vec<&TokenSeq>>, Vec<&TokenSeq>) {
        let s = ep
            .support
            .iter()
            .map(|class| class.iter().map(|&i| &self.seqs[i]).collect())
            .collect();
        let q = ep.query.iter().map(|&(i, _)| &self.seqs[i]).collect();
        (s, q)
    }

    /// Eval-mode encodings of an episode's supports and queries.
    pub fn encode_episode(&self, model: &ModelConfig, params: &ParamSet, ep: &Episode) -> Result<(Vec<Vec<Tensor>>, Vec<Tensor>)> {
        let (s, q) = self.episode_seqs(ep);
        let flat: Vec<&TokenSeq> = s.iter().flatten().copied().chain(q.iter().copied()).collect();
        let mut enc = encoder::encode_values(&flat, params, &model.encoder)?.into_iter();
        let supports = ep
            .support
            .iter()
            .map(|class| class.iter().map(|_| enc.next().expect("support encoding")).collect())
            .collect();
        Ok((supports, enc.collect()))
    }
}

/// One metrics CSV row.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub train_loss: f64,
    pub eval_accuracy: f64,
    pub setting: String,
    pub ms_per_query: f64,
}

impl MetricsRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{:.4}",
            self.step, self.train_loss, self.eval_accuracy, self.setting, self.ms_per_query
        )
    }
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.to_csv());
        s.push('\n');
    }
    s
}

/// Drops the trailing timing column so runs can be compared byte for byte.
pub fn strip_timing(csv: &str) -> String {
    csv.lines()
        .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head))
        .collect::<Vec<_>>()
        .join("\n")
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: ModelConfig,
    /// Best-by-validation parameters, rounded to checkpoint precision.
    pub params: ParamSet,
    pub metrics: Vec<MetricsRow>,
    pub best_val: Option<f64>,
    pub final_loss: Option<f64>,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Episode-level training with Adam, validated on the val classes.
pub fn train(cfg: &RunConfig, prep: &Prepared) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model = cfg.model_config(prep.vocab.len());
    let mut params = model.init_params(cfg.seed)?;
    log::info!("{} model with {} parameters", model.arch, params.scalar_count());
    let mut sample_rng = stream_rng(cfg.seed, SAMPLE_STREAM);
    let mut drop_rng = stream_rng(cfg.seed, DROPOUT_STREAM);
    let spec = cfg.train_spec();
    let val_spec = EpisodeSpec {
        ways: cfg.eval_ways.min(prep.split.val.len()),
        ..cfg.eval_spec()
    };

    let mut best = params.snapshot();
    best.round_to_f32();
    let mut best_val = None;
    let mut metrics = Vec::new();
    let mut window = Vec::new();
    let mut final_loss = None;

    for step in 1..=cfg.steps {
        let ep = episodes::sample_episode(&prep.dataset, prep.split.seen(), spec, &mut sample_rng)?;
        let (s, q) = prep.episode_seqs(&ep);
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let mut mode = if cfg.dropout > 0.0 {
            Mode::Train {
                rate: cfg.dropout,
                rng: &mut drop_rng,
            }
        } else {
            Mode::Eval
        };
        let log_probs = model.forward(&bound, &s, &q, &mut mode)?;
        let loss = predict::episode_loss(&log_probs, &ep.labels())?;
        let loss_value = loss.item();
        if !loss_value.is_finite() {
            return Err(Error::State(format!("non-finite loss at step {step}")));
        }
        tape.backward(loss)?;
        params.accumulate_grads(&tape, &bound);
        drop(bound);
        params.adam_step(cfg.lr)?;
        window.push(loss_value);
        final_loss = Some(loss_value);

        if step % cfg.val_every == 0 || step == cfg.steps {
            let t0 = Instant::now();
            let acc = evaluate_fsl(
                &model,
                &params,
                prep,
                &prep.split.val,
                val_spec,
                cfg.val_episodes,
                cfg.seed ^ VAL_STREAM,
                cfg.parallelism(),
            )?;
            let queries = (cfg.val_episodes * val_spec.queries) as f64;
            let mean_loss = window.iter().sum::<f64>() / window.len() as f64;
            window.clear();
            metrics.push(MetricsRow {
                step,
                train_loss: mean_loss,
                eval_accuracy: acc.accuracy,
                setting: format!("val-fsl{}", val_spec.ways),
                ms_per_query: t0.elapsed().as_secs_f64() * 1e3 / queries,
            });
            log::info!("step {step}: loss {mean_loss:.4}, val accuracy {:.4}", acc.accuracy);
            if best_val.is_none_or(|b| acc.accuracy > b) {
                best_val = Some(acc.accuracy);
                best = params.snapshot();
                best.round_to_f32();
            }
        }
    }
    Ok(TrainOutcome {
        model,
        params: best,
        metrics,
        best_val,
        final_loss,
    })
}

/// Writes checkpoint, vocabulary, metrics, config, and split manifest.
pub fn write_run(dir: &Path, cfg: &RunConfig, prep: &Prepared, out: &TrainOutcome) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    out.params.save(&dir.join(CHECKPOINT_FILE))?;
    prep.vocab.save(&dir.join(VOCAB_FILE))?;
    let write = |name: &str, text: String| {
        let p = dir.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write(METRICS_FILE, metrics_csv(&out.metrics))?;
    write(CONFIG_FILE, cfg.to_text())?;
    let manifest = serde_json::to_string_pretty(&prep.split.manifest(&prep.dataset)).map_err(|e| Error::State(e.to_string()))?;
    write(SPLIT_FILE, manifest)
}

/// Loads a checkpoint and the vocabulary stored next to it.
pub fn load_run(cfg: &RunConfig, checkpoint: &Path) -> Result<(Prepared, ModelConfig, ParamSet)> {
    let dir = checkpoint.parent().unwrap_or(Path::new("."));
    let vocab = Vocabulary::load(&dir.join(VOCAB_FILE))?;
    let ds = load_dataset(cfg.dataset_path()?, cfg.shots + 1)?;
    let prep = Prepared::new(ds, vocab, cfg)?;
    let model = cfg.model_config(prep.vocab.len());
    let mut params = model.init_params(cfg.seed)?;
    params.load_values(checkpoint)?;
    Ok((prep, model, params))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Accuracy {
    pub accuracy: f64,
    pub per_episode: Vec<f64>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn episode_rng(seed: u64, i: usize) -> ChaCha8Rng {
    stream_rng(seed, i as u64)
}

/// Mean accuracy over `episodes` N-way episodes drawn from `classes`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_fsl(
    model: &ModelConfig,
    params: &ParamSet,
    prep: &Prepared,
    classes: &[usize],
    spec: EpisodeSpec,
    episodes: usize,
    seed: u64,
    par: Parallelism,
) -> Result<Accuracy> {
    let per = parallel::map_indexed(episodes, par, |i| -> Result<f64> {
        let ep = episodes::sample_episode(&prep.dataset, classes, spec, &mut episode_rng(seed, i))?;
        episode_accuracy(model, params, prep, &ep)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(Accuracy {
        accuracy: mean(&per),
        per_episode: per,
    })
}

fn episode_accuracy(model: &ModelConfig, params: &ParamSet, prep: &Prepared, ep: &Episode) -> Result<f64> {
    let (s, q) = prep.encode_episode(model, params, ep)?;
    let preds = classify(model, params, &s, &q)?;
    let correct = preds.iter().zip(ep.labels()).filter(|(p, y)| **p == *y).count();
    Ok(correct as f64 / preds.len() as f64)
}

fn classify(model: &ModelConfig, params: &ParamSet, s: &[Vec<Tensor>], q: &[Tensor]) -> Result<Vec<usize>> {
    let s_refs: Vec<Vec<&Tensor>> = s.iter().map(|c| c.iter().collect()).collect();
    let q_refs: Vec<&Tensor> = q.iter().collect();
    model.classify_encoded(params, &s_refs, &q_refs)
}

/// C-way accuracy over episodes covering every class of the split.
pub fn evaluate_gfsl(
    model: &ModelConfig,
    params: &ParamSet,
    prep: &Prepared,
    cfg: &RunConfig,
    episodes: usize,
    seed: u64,
) -> Result<Accuracy> {
    let per = parallel::map_indexed(episodes, cfg.parallelism(), |i| -> Result<f64> {
        let ep = episodes::sample_gfsl_episode(&prep.dataset, &prep.split, cfg.shots, cfg.queries, &mut episode_rng(seed, i))?;
        episode_accuracy(model, params, prep, &ep)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(Accuracy {
        accuracy: mean(&per),
        per_episode: per,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RtcSummary {
    pub accuracy: f64,
    pub full_accuracy: f64,
    pub recall: f64,
    /// Fraction of queries whose RTC prediction equals the full prediction.
    pub agreement: f64,
    pub full_ms: f64,
    pub rtc_ms: f64,
    pub index: RetrievalIndex,
}

impl RtcSummary {
    pub fn speedup(&self) -> f64 {
        self.full_ms / self.rtc_ms
    }
}

fn build_index(cfg: &RtcConfig, prep: &Prepared, ep: &Episode, supports: &[Vec<Tensor>]) -> Result<RetrievalIndex> {
    match cfg.mode {
        RetrievalMode::MeanVector => RetrievalIndex::from_encodings(&ep.class_map, supports),
        RetrievalMode::Bm25 => {
            let texts: Vec<Vec<&str>> = ep
                .support
                .iter()
                .map(|class| class.iter().map(|&i| prep.dataset.texts[i].as_str()).collect())
                .collect();
            RetrievalIndex::from_texts(&ep.class_map, &texts, cfg.k1, cfg.b)
        }
    }
}

struct RtcEpisode {
    correct: usize,
    full_correct: usize,
    hits: usize,
    agree: usize,
    total: usize,
}

/// Generalised episodes classified both in full and by retrieval first.
/// Episodes are the same as [`evaluate_gfsl`] with the same seed.
pub fn evaluate_rtc(
    model: &ModelConfig,
    params: &ParamSet,
    prep: &Prepared,
    cfg: &RunConfig,
    episodes: usize,
    seed: u64,
) -> Result<RtcSummary> {
    if model.arch != Architecture::Mgimn {
        return Err(Error::Config("retrieval-then-classify runs the MGIMN matcher".into()));
    }
    let rcfg = cfg.rtc_config();
    let sample = |i: usize| episodes::sample_gfsl_episode(&prep.dataset, &prep.split, cfg.shots, cfg.queries, &mut episode_rng(seed, i));
    let results = parallel::map_indexed(episodes, cfg.parallelism(), |i| -> Result<RtcEpisode> {
        let ep = sample(i)?;
        let (s, q) = prep.encode_episode(model, params, &ep)?;
        let index = build_index(&rcfg, prep, &ep, &s)?;
        let full = classify(model, params, &s, &q)?;
        let mut r = RtcEpisode {
            correct: 0,
            full_correct: 0,
            hits: 0,
            agree: 0,
            total: q.len(),
        };
        for (j, &(inst, label)) in ep.query.iter().enumerate() {
            let gold = ep.class_map[label];
            let out = rtc::rtc_classify(model, params, &index, &rcfg, &ep.class_map, &s, &prep.dataset.texts[inst], &q[j])?;
            r.hits += usize::from(out.retrieved.contains(&gold));
            r.correct += usize::from(out.predicted == gold);
            r.full_correct += usize::from(full[j] == label);
            r.agree += usize::from(out.predicted == ep.class_map[full[j]]);
        }
        Ok(r)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let total: usize = results.iter().map(|r| r.total).sum();
    let frac = |f: fn(&RtcEpisode) -> usize| results.iter().map(f).sum::<usize>() as f64 / total as f64;

    let ep = sample(0)?;
    let (s, _) = prep.encode_episode(model, params, &ep)?;
    let index = build_index(&rcfg, prep, &ep, &s)?;
    let (full_ms, rtc_ms) = time_paths(model, params, prep, cfg, &rcfg, seed)?;
    Ok(RtcSummary {
        accuracy: frac(|r| r.correct),
        full_accuracy: frac(|r| r.full_correct),
        recall: frac(|r| r.hits),
        agreement: frac(|r| r.agree),
        full_ms,
        rtc_ms,
        index,
    })
}

/// Single-threaded ms/query of the full C-way forward and of the reduced
/// forward, both from cached encodings, after untimed warm-up queries.
fn time_paths(
    model: &ModelConfig,
    params: &ParamSet,
    prep: &Prepared,
    cfg: &RunConfig,
    rcfg: &RtcConfig,
    seed: u64,
) -> Result<(f64, f64)> {
    let needed = cfg.timing_warmup + cfg.timing_queries.max(1);
    let mut jobs = Vec::new();
    let mut i = 0;
    while jobs.len() < needed {
        let ep = episodes::sample_gfsl_episode(&prep.dataset, &prep.split, cfg.shots, cfg.queries, &mut episode_rng(seed, i))?;
        let (s, q) = prep.encode_episode(model, params, &ep)?;
        let index = build_index(rcfg, prep, &ep, &s)?;
        let s = std::sync::Arc::new(s);
        let index = std::sync::Arc::new(index);
        let ep = std::sync::Arc::new(ep);
        for (j, qe) in q.into_iter().enumerate() {
            jobs.push((s.clone(), index.clone(), ep.clone(), j, qe));
        }
        i += 1;
    }
    jobs.truncate(needed);
    let mut full_ms = 0.0;
    let mut rtc_ms = 0.0;
    for (n, (s, index, ep, j, qe)) in jobs.iter().enumerate() {
        let s_refs: Vec<Vec<&Tensor>> = s.iter().map(|c| c.iter().collect()).collect();
        let t0 = Instant::now();
        let _ = model.classify_encoded(params, &s_refs, &[qe])?;
        let full = t0.elapsed().as_secs_f64();
        let text = &prep.dataset.texts[ep.query[*j].0];
        let t1 = Instant::now();
        let _ = rtc::rtc_classify(model, params, index, rcfg, &ep.class_map, s, text, qe)?;
        let reduced = t1.elapsed().as_secs_f64();
        if n >= cfg.timing_warmup {
            full_ms += full * 1e3;
            rtc_ms += reduced * 1e3;
        }
    }
    let n = (needed - cfg.timing_warmup) as f64;
    Ok((full_ms / n, rtc_ms / n))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepMember {
    pub split_seed: u64,
    pub init_seed: u64,
    pub best_val: f64,
    pub test_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepReport {
    pub members: Vec<SweepMember>,
    pub mean: f64,
    pub std: f64,
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("split_seed,init_seed,best_val_accuracy,test_accuracy\n");
        for m in &self.members {
            let _ = writeln!(s, "{},{},{},{}", m.split_seed, m.init_seed, m.best_val, m.test_accuracy);
        }
        let _ = writeln!(s, "mean,,,{}", self.mean);
        let _ = writeln!(s, "std,,,{}", self.std);
        s
    }
}

/// Sample standard deviation; zero for a single value.
pub fn sample_std(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Trains and tests one model per (split seed, init seed) pair.
pub fn sweep(cfg: &RunConfig, dataset: &Dataset) -> Result<SweepReport> {
    cfg.validate()?;
    let mut members = Vec::new();
    for si in 0..cfg.sweep_splits as u64 {
        for ii in 0..cfg.sweep_seeds as u64 {
            let run = RunConfig {
                split_seed: cfg.split_seed + si,
                seed: cfg.seed + ii,
                ..cfg.clone()
            };
            let prep = Prepared::with_new_vocab(dataset.clone(), &run)?;
            let out = train(&run, &prep)?;
            let spec = EpisodeSpec {
                ways: run.eval_ways.min(prep.split.test.len()),
                ..run.eval_spec()
            };
            let acc = evaluate_fsl(&out.model, &out.params, &prep, &prep.split.test, spec, run.eval_episodes, run.eval_seed, run.parallelism())?;
            log::info!("sweep split {} seed {}: test accuracy {:.4}", run.split_seed, run.seed, acc.accuracy);
            members.push(SweepMember {
                split_seed: run.split_seed,
                init_seed: run.seed,
                best_val: out.best_val.unwrap_or(f64::NAN),
                test_accuracy: acc.accuracy,
            });
        }
    }
    let accs: Vec<f64> = members.iter().map(|m| m.test_accuracy).collect();
    Ok(SweepReport {
        mean: mean(&accs),
        std: sample_std(&accs),
        members,
    })
}

/// Finite-difference check of one architecture on a fixed episode.
pub fn grad_check_model(
    model: &ModelConfig,
    params: &ParamSet,
    prep: &Prepared,
    ep: &Episode,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    if model.dropout > 0.0 {
        return Err(Error::Config("gradient check needs dropout = 0".into()));
    }
    let (s, q) = prep.episode_seqs(ep);
    let labels = ep.labels();
    gradcheck::grad_check(
        |_, bound| {
            let lp = model.forward(bound, &s, &q, &mut Mode::Eval)?;
            predict::episode_loss(&lp, &labels)
        },
        params,
        opts,
    )
}

/// Checks MGIMN and both baselines on one episode sampled from `prep`.
pub fn cmd_gradcheck(cfg: &RunConfig, prep: &Prepared, opts: &GradCheckOptions) -> Result<Vec<(Architecture, GradCheckReport)>> {
    if cfg.dropout > 0.0 {
        return Err(Error::Config("gradient check refuses dropout > 0: set dropout = 0".into()));
    }
    if cfg.hidden > 16 || cfg.ways > 3 || cfg.shots > 2 {
        return Err(Error::Config("gradient check is for tiny configs: hidden ≤ 16, ways ≤ 3, shots ≤ 2".into()));
    }
    let spec = cfg.train_spec();
    let all = prep.split.all();
    let ep = episodes::sample_episode(&prep.dataset, &all, spec, &mut stream_rng(cfg.seed, SAMPLE_STREAM))?;
    let mut out = Vec::new();
    for arch in [Architecture::Mgimn, Architecture::Proto, Architecture::Matching] {
        let model = ModelConfig {
            arch,
            ..cfg.model_config(prep.vocab.len())
        };
        let params = model.init_params(cfg.seed)?;
        out.push((arch, grad_check_model(&model, &params, prep, &ep, opts)?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_config_text() {
        let cfg = RunConfig::parse_text("# comment\nhidden = 16\nuse_episode = false # trailing\nmodel = proto\n").unwrap();
        assert_eq!(cfg.hidden, 16);
        assert!(!cfg.flags.use_episode);
        assert_eq!(cfg.model, Architecture::Proto);
        assert!(matches!(RunConfig::parse_text("nope = 1"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse_text("hidden 16"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse_text("hidden = x"), Err(Error::Config(_))));
    }

    #[test]
    fn config_text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.set("lr", "0.001").unwrap();
        cfg.set("retrieval", "bm25").unwrap();
        cfg.set("dataset", "/tmp/x.jsonl").unwrap();
        assert_eq!(RunConfig::parse_text(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn every_key_is_documented_and_settable() {
        let cfg = RunConfig::default();
        let text = cfg.to_text();
        for line in text.lines() {
            let key = line.split(" = ").next().unwrap();
            assert!(CONFIG_KEYS.iter().any(|(k, _)| *k == key), "{key} undocumented");
        }
        assert_eq!(CONFIG_KEYS.len(), text.lines().count() + 2);
    }

    #[test]
    fn std_and_strip() {
        assert_eq!(sample_std(&[0.5]), 0.0);
        assert!((sample_std(&[1.0, 3.0]) - 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(strip_timing("a,b,c\n1,2,3"), "a,b\n1,2");
    }
}
