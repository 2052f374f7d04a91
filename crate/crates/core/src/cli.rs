//! The `missformer` command line.
//!
//! Every option can also come from a `key = value` file passed with
//! `--config`; an explicit flag wins over the file, the file over the
//! built-in default. Keys are the long flag names (`d-model` or `d_model`).
//! Outputs without an explicit path land in `$MISSFORMER_OUT_DIR` (default:
//! the working directory). The resolved settings are echoed to stderr and
//! into a `<output>.config` file next to the main artifact.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::{Display, Write as _};
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::{self, Meta};
use crate::corrupt::{self, CorruptionConfig, InputMode};
use crate::error::Error;
use crate::eval::{self, EchoObservations, EvalReport, EvalTask, LinearBaseline, Predictor};
use crate::ingest::{self, WindowOptions};
use crate::model::{MissFormer, ModelConfig, PeVariant};
use crate::plot;
use crate::rng;
use crate::training::{self, LrSchedule, SplitRange, Task, TrainConfig};
use crate::trajgen::{self, GeneratorConfig, Trajectory};

pub const OUT_DIR_ENV: &str = "MISSFORMER_OUT_DIR";

/// Salt separating generated evaluation corpora from training corpora
/// drawn with the same `--seed`.
const EVAL_CORPUS_SALT: u64 = 0x6576_616c_6370;

#[derive(Parser, Debug)]
#[command(name = "missformer", version, about = "Trajectory reconstruction, filtering and prediction with missing-token inputs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Seed for every random draw of the command.
    #[arg(long)]
    seed: Option<u64>,
    /// key=value settings file; explicit flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
}

/// Where trajectories come from: a corpus file or the synthetic generator.
#[derive(Args, Debug, Clone)]
struct Source {
    /// Corpus file (`k dt x1 y1 ...` lines).
    #[arg(long, conflicts_with_all = ["regime", "samples"])]
    corpus: Option<PathBuf>,
    /// Synthetic regime: object or pedestrian.
    #[arg(long)]
    regime: Option<String>,
    /// Number of synthetic trajectories.
    #[arg(long)]
    samples: Option<usize>,
    /// per-step or per-trajectory draws of heading change and acceleration.
    #[arg(long, conflicts_with = "corpus")]
    dynamics: Option<String>,
}

#[derive(Args, Debug, Clone)]
struct Corruption {
    /// Per-coordinate Gaussian noise std in meters.
    #[arg(long)]
    noise_std: Option<f64>,
    /// Probability that a step is replaced by a missing token.
    #[arg(long)]
    missing_prob: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic trajectory corpus.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        regime: Option<String>,
        #[arg(long)]
        n: Option<usize>,
        /// Uniform random start offset in [-v, v] meters per axis.
        #[arg(long)]
        spatial_offset: Option<f64>,
        /// per-step or per-trajectory draws of heading change and acceleration.
        #[arg(long)]
        dynamics: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Add noise and missing tokens to a corpus, writing observed lines.
    Corrupt {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        corruption: Corruption,
        /// positions or offsets.
        #[arg(long)]
        mode: Option<String>,
        /// Mask this many trailing steps as the prediction target.
        #[arg(long)]
        pred_len: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a model and write a checkpoint plus a loss log.
    Train(Box<TrainArgs>),
    /// Score a checkpoint or a baseline on a corpus.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, conflicts_with = "baseline")]
        ckpt: Option<PathBuf>,
        /// linear or echo instead of a checkpoint.
        #[arg(long)]
        baseline: Option<String>,
        #[command(flatten)]
        source: Source,
        #[command(flatten)]
        corruption: Corruption,
        #[arg(long)]
        task: Option<String>,
        /// Fixed observed length for prediction (with --pred-len).
        #[arg(long)]
        obs_len: Option<usize>,
        #[arg(long)]
        pred_len: Option<usize>,
        /// Label used in the table.
        #[arg(long)]
        label: Option<String>,
        /// Record file; one `task n ade ade_std fde` line is appended.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a checkpoint on observed lines and write position estimates.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        /// Observed lines (`k mode x1 y1 m1 ...`).
        #[arg(long)]
        input: PathBuf,
        /// Extra steps to predict beyond each input.
        #[arg(long)]
        horizon: Option<usize>,
        /// Time step written into the output corpus lines.
        #[arg(long)]
        dt: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Attention filters of one sample as an SVG heatmap.
    PlotAttn(PlotArgs),
    /// Truth, observations, missing steps and estimate of one sample.
    PlotTraj(PlotArgs),
    /// Collect record files (and optionally the leave-one-out baseline)
    /// into a text table.
    Report {
        #[command(flatten)]
        common: Common,
        /// Record files written by `eval`.
        records: Vec<PathBuf>,
        /// Directory with eth.txt, hotel.txt, univ.txt, zara1.txt, zara2.txt;
        /// adds the leave-one-out linear baseline.
        #[arg(long)]
        loo_data: Option<PathBuf>,
        /// Append the cited reference rows.
        #[arg(long)]
        cited: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    source: Source,
    #[command(flatten)]
    corruption: Corruption,
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// constant or cosine.
    #[arg(long)]
    lr_schedule: Option<String>,
    #[arg(long)]
    warmup_epochs: Option<usize>,
    #[arg(long)]
    grad_clip: Option<f64>,
    /// Epoch from which prediction inputs get their tail masked.
    #[arg(long)]
    curriculum_switch: Option<usize>,
    /// Keep one corruption draw for the whole run.
    #[arg(long)]
    frozen_corruption: bool,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    mode: Option<String>,
    /// literal or paired.
    #[arg(long)]
    pe: Option<String>,
    /// Defaults to the RMS coordinate of the training corpus.
    #[arg(long)]
    input_scale: Option<f64>,
    #[arg(long)]
    output_scale: Option<f64>,
    /// Continue from this checkpoint instead of a fresh model.
    #[arg(long)]
    init: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Loss log; defaults to `<out>.log`.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct PlotArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    ckpt: PathBuf,
    /// Index of the sample to plot.
    #[arg(long)]
    sample: Option<usize>,
    #[command(flatten)]
    source: Source,
    #[command(flatten)]
    corruption: Corruption,
    /// Mask this many trailing steps.
    #[arg(long)]
    pred_len: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Failure of a command: bad invocation or a failed run.
#[derive(Debug)]
enum CliError {
    Usage(String),
    Run(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(msg) => CliError::Usage(msg),
            e => CliError::Run(e),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Run(e.into())
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Flag/config-file/default resolution with a record of every value used.
struct Settings {
    file: BTreeMap<String, (String, usize)>,
    used: Vec<(String, String)>,
    config_path: Option<PathBuf>,
}

fn norm_key(k: &str) -> String {
    k.trim().replace('-', "_")
}

impl Settings {
    fn load(common: &Common) -> CliResult<Self> {
        let mut file = BTreeMap::new();
        if let Some(p) = &common.config {
            let text = fs::read_to_string(p)
                .map_err(|e| CliError::Usage(format!("cannot read config file {}: {e}", p.display())))?;
            for (i, line) in text.lines().enumerate() {
                let t = line.split('#').next().unwrap_or("").trim();
                if t.is_empty() {
                    continue;
                }
                let (k, v) = t
                    .split_once('=')
                    .ok_or_else(|| CliError::Usage(format!("{}:{}: expected key = value", p.display(), i + 1)))?;
                file.insert(norm_key(k), (v.trim().to_string(), i + 1));
            }
        }
        let mut s = Settings {
            file,
            used: Vec::new(),
            config_path: common.config.clone(),
        };
        s.get(common.seed, "seed", 0u64)?;
        Ok(s)
    }

    fn get<T: FromStr + Display>(&mut self, flag: Option<T>, key: &str, default: T) -> CliResult<T> {
        Ok(self.opt(flag, key)?.unwrap_or_else(|| {
            self.used.push((norm_key(key), default.to_string()));
            default
        }))
    }

    fn opt<T: FromStr + Display>(&mut self, flag: Option<T>, key: &str) -> CliResult<Option<T>> {
        let k = norm_key(key);
        let from_file = self.file.remove(&k);
        let v = match (flag, from_file) {
            (Some(v), _) => Some(v),
            (None, Some((raw, line))) => Some(raw.parse::<T>().map_err(|_| {
                CliError::Usage(format!("config line {line}: invalid value `{raw}` for `{k}`"))
            })?),
            (None, None) => None,
        };
        if let Some(v) = &v {
            self.used.push((k, v.to_string()));
        }
        Ok(v)
    }

    fn path(&mut self, flag: Option<PathBuf>, key: &str) -> CliResult<Option<PathBuf>> {
        Ok(self.opt(flag.map(|p| p.display().to_string()), key)?.map(PathBuf::from))
    }

    fn seed(&self) -> u64 {
        self.used
            .iter()
            .find(|(k, _)| k == "seed")
            .and_then(|(_, v)| v.parse().ok())
            .unwrap_or(0)
    }

    /// Rejects config keys the command never looked at.
    fn finish(&self) -> CliResult<()> {
        if let Some((k, (_, line))) = self.file.iter().next() {
            let path = self.config_path.as_deref().map(Path::display);
            return Err(CliError::Usage(format!(
                "{}:{line}: unknown setting `{k}` for this command",
                path.map(|p| p.to_string()).unwrap_or_default()
            )));
        }
        Ok(())
    }

    fn echo(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.used {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Prints the resolved settings and stores them next to `artifact`.
    fn publish(&self, artifact: &Path) -> CliResult<()> {
        let text = self.echo();
        for line in text.lines() {
            eprintln!("# {line}");
        }
        let mut p = artifact.as_os_str().to_owned();
        p.push(".config");
        fs::write(PathBuf::from(p), text)?;
        Ok(())
    }
}

fn out_path(explicit: Option<PathBuf>, default_name: &str) -> PathBuf {
    match explicit {
        Some(p) if p.is_absolute() => p,
        Some(p) => match std::env::var_os(OUT_DIR_ENV) {
            Some(d) if p.parent().is_none_or(|q| q.as_os_str().is_empty()) => PathBuf::from(d).join(p),
            _ => p,
        },
        None => std::env::var_os(OUT_DIR_ENV)
            .map(PathBuf::from)
            .unwrap_or_default()
            .join(default_name),
    }
}

fn ensure_parent(p: &Path) -> CliResult<()> {
    if let Some(d) = p.parent() {
        if !d.as_os_str().is_empty() {
            fs::create_dir_all(d)?;
        }
    }
    Ok(())
}

fn parse_enum<T: FromStr>(v: &str, what: &str) -> CliResult<T> {
    v.parse().map_err(|_| CliError::Usage(format!("unknown {what} `{v}`")))
}

fn regime_config(name: &str) -> CliResult<GeneratorConfig> {
    match name {
        "object" => Ok(GeneratorConfig::object()),
        "pedestrian" => Ok(GeneratorConfig::pedestrian()),
        other => Err(CliError::Usage(format!("unknown regime `{other}` (object, pedestrian)"))),
    }
}

fn read_corpus_file(p: &Path) -> CliResult<Vec<Trajectory>> {
    let f = fs::File::open(p).map_err(|e| CliError::Run(Error::Io(e)))?;
    Ok(trajgen::read_corpus(BufReader::new(f))?)
}

/// Resolves a [`Source`]; generated corpora use `generator_seed`.
fn load_source(s: &mut Settings, src: &Source, default_n: usize, generator_seed: u64) -> CliResult<Vec<Trajectory>> {
    if let Some(p) = s.path(src.corpus.clone(), "corpus")? {
        return read_corpus_file(&p);
    }
    let regime = s.get(src.regime.clone(), "regime", "object".to_string())?;
    let n = s.get(src.samples, "samples", default_n)?;
    let mut cfg = regime_config(&regime)?.with_seed(generator_seed);
    cfg.dynamics = parse_enum(&s.get(src.dynamics.clone(), "dynamics", cfg.dynamics.to_string())?, "dynamics")?;
    Ok(trajgen::generate(&cfg, n)?)
}

fn corruption(s: &mut Settings, c: &Corruption, default_missing: f64, seed: u64) -> CliResult<CorruptionConfig> {
    let cfg = CorruptionConfig::new(
        s.get(c.noise_std, "noise_std", 0.0)?,
        s.get(c.missing_prob, "missing_prob", default_missing)?,
    )
    .with_seed(seed);
    cfg.validate()?;
    Ok(cfg)
}

/// Parses argv (program name first), runs the command and returns the
/// exit code: 0 success, 1 usage error, 2 runtime failure.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(CliError::Run(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn dispatch(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::Generate {
            common,
            regime,
            n,
            spatial_offset,
            dynamics,
            out,
        } => {
            let mut s = Settings::load(&common)?;
            let regime = s.get(regime, "regime", "object".to_string())?;
            let n = s.get(n, "n", 1000usize)?;
            let mut cfg = regime_config(&regime)?.with_seed(s.seed());
            cfg.spatial_offset = s.opt(spatial_offset, "spatial_offset")?;
            cfg.dynamics = parse_enum(&s.get(dynamics, "dynamics", cfg.dynamics.to_string())?, "dynamics")?;
            let out = out_path(s.path(out, "out")?, "corpus.txt");
            s.finish()?;
            let corpus = trajgen::generate(&cfg, n)?;
            ensure_parent(&out)?;
            trajgen::write_corpus(BufWriter::new(fs::File::create(&out)?), &corpus)?;
            s.publish(&out)?;
            eprintln!("wrote {n} trajectories to {}", out.display());
            Ok(())
        }
        Command::Corrupt {
            common,
            input,
            corruption: c,
            mode,
            pred_len,
            out,
        } => {
            let mut s = Settings::load(&common)?;
            let seed = s.seed();
            let ccfg = corruption(&mut s, &c, 0.0, seed)?;
            let mode: InputMode = parse_enum(&s.get(mode, "mode", "positions".to_string())?, "input mode")?;
            let pred_len = s.get(pred_len, "pred_len", 0usize)?;
            let out = out_path(s.path(out, "out")?, "observed.txt");
            s.finish()?;
            let corpus = read_corpus_file(&input)?;
            let mut seqs = Vec::with_capacity(corpus.len());
            for (i, t) in corpus.iter().enumerate() {
                let mut r = rng::stream(ccfg.seed, i as u64);
                let obs = corrupt::corrupt_with(t, &ccfg, &mut r)?;
                seqs.push(training::finish_input(obs, pred_len, mode)?);
            }
            ensure_parent(&out)?;
            corrupt::write_observed(BufWriter::new(fs::File::create(&out)?), &seqs)?;
            s.publish(&out)?;
            Ok(())
        }
        Command::Train(a) => train_cmd(*a),
        Command::Eval {
            common,
            ckpt,
            baseline,
            source,
            corruption: c,
            task,
            obs_len,
            pred_len,
            label,
            out,
        } => {
            let mut s = Settings::load(&common)?;
            let seed = s.seed();
            let ckpt = s.path(ckpt, "ckpt")?;
            let baseline = s.opt(baseline, "baseline")?;
            let predictor: Box<dyn Predictor> = match (&ckpt, baseline.as_deref()) {
                (Some(p), None) => Box::new(checkpoint::load(p)?.0),
                (None, Some("linear")) => Box::new(LinearBaseline),
                (None, Some("echo")) => Box::new(EchoObservations),
                (None, Some(other)) => return Err(CliError::Usage(format!("unknown baseline `{other}` (linear, echo)"))),
                (None, None) => return Err(CliError::Usage("eval needs --ckpt or --baseline".into())),
                (Some(_), Some(_)) => return Err(CliError::Usage("--ckpt and --baseline are mutually exclusive".into())),
            };
            let corpus = load_source(&mut s, &source, 5000, rng::mix(&[seed, EVAL_CORPUS_SALT]))?;
            let ccfg = corruption(&mut s, &c, 0.0, seed)?;
            let task: Task = parse_enum(&s.get(task, "task", "reconstruction".to_string())?, "task")?;
            let split = match (s.opt(obs_len, "obs_len")?, s.opt(pred_len, "pred_len")?) {
                (Some(o), Some(p)) => SplitRange::fixed(o, p),
                (None, None) => SplitRange::default(),
                _ => return Err(CliError::Usage("--obs-len and --pred-len go together".into())),
            };
            let label = s.get(label, "label", ckpt.as_ref().map_or_else(|| baseline.clone().unwrap_or_default(), |p| p.display().to_string()))?;
            let out = out_path(s.path(out, "out")?, "records.txt");
            s.finish()?;
            let report = eval::evaluate(predictor.as_ref(), &corpus, &ccfg, &EvalTask::new(task).with_split(split))?;
            print!("{}", eval::format_table(&[(label, report.clone())]));
            ensure_parent(&out)?;
            let mut f = fs::OpenOptions::new().create(true).append(true).open(&out)?;
            writeln!(f, "{}", report.record_line())?;
            s.publish(&out)?;
            Ok(())
        }
        Command::Predict {
            common,
            ckpt,
            input,
            horizon,
            dt,
            out,
        } => {
            let mut s = Settings::load(&common)?;
            let horizon = s.get(horizon, "horizon", 0usize)?;
            let dt = s.get(dt, "dt", 1.0f64)?;
            let out = out_path(s.path(out, "out")?, "estimates.txt");
            s.finish()?;
            let (model, _) = checkpoint::load(&ckpt)?;
            let seqs = corrupt::read_observed(BufReader::new(fs::File::open(&input)?))?;
            let mut est = Vec::with_capacity(seqs.len());
            for q in &seqs {
                est.push(Trajectory::new(model.predict_full(q, horizon)?, dt)?);
            }
            ensure_parent(&out)?;
            trajgen::write_corpus(BufWriter::new(fs::File::create(&out)?), &est)?;
            s.publish(&out)?;
            Ok(())
        }
        Command::PlotAttn(a) => plot_cmd(a, true),
        Command::PlotTraj(a) => plot_cmd(a, false),
        Command::Report {
            common,
            records,
            loo_data,
            cited,
            out,
        } => {
            let mut s = Settings::load(&common)?;
            let loo_data = s.path(loo_data, "loo_data")?;
            let out = out_path(s.path(out, "out")?, "report.txt");
            s.finish()?;
            let mut rows = Vec::new();
            for p in &records {
                let text = fs::read_to_string(p)?;
                let stem = p.file_stem().map(|x| x.to_string_lossy().into_owned()).unwrap_or_default();
                for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                    let (task, n, ade, ade_std, fde) = EvalReport::parse_record_line(line, i + 1)?;
                    rows.push((
                        stem.clone(),
                        EvalReport {
                            task,
                            n_samples: n,
                            ade,
                            ade_std,
                            fde,
                            per_sample: Vec::new(),
                        },
                    ));
                }
            }
            let mut text = String::new();
            if !rows.is_empty() {
                text.push_str(&eval::format_table(&rows));
            }
            if let Some(dir) = loo_data {
                let sets = ingest::load_splits(&dir, &eval::SPLITS, &WindowOptions::default(), true)?;
                let loo = eval::leave_one_out(&sets, |_, _| Ok(Box::new(LinearBaseline)), SplitRange::fixed(8, 12))?;
                text.push('\n');
                text.push_str(&loo.format_table("Linear (this run)", cited));
            } else if cited {
                text.push('\n');
                text.push_str(&eval::cited_table());
            }
            print!("{text}");
            ensure_parent(&out)?;
            fs::write(&out, &text)?;
            s.publish(&out)?;
            Ok(())
        }
    }
}

fn train_cmd(a: TrainArgs) -> CliResult<()> {
    let mut s = Settings::load(&a.common)?;
    let seed = s.seed();
    let corpus = load_source(&mut s, &a.source, 1000, seed)?;
    let ccfg = corruption(&mut s, &a.corruption, 0.0, seed)?;
    let defaults = TrainConfig::default();
    let task: Task = parse_enum(&s.get(a.task, "task", "reconstruction".to_string())?, "task")?;
    let tcfg = TrainConfig {
        learning_rate: s.get(a.lr, "lr", defaults.learning_rate)?,
        epochs: s.get(a.epochs, "epochs", defaults.epochs)?,
        batch_size: s.get(a.batch_size, "batch_size", defaults.batch_size)?,
        task,
        curriculum_switch_epoch: s.opt(a.curriculum_switch, "curriculum_switch")?,
        weight_decay: s.get(a.weight_decay, "weight_decay", defaults.weight_decay)?,
        lr_schedule: parse_enum::<LrSchedule>(&s.get(a.lr_schedule, "lr_schedule", "constant".to_string())?, "learning-rate schedule")?,
        warmup_epochs: s.get(a.warmup_epochs, "warmup_epochs", 0usize)?,
        grad_clip: s.opt(a.grad_clip, "grad_clip")?,
        fresh_corruption: !s.get(a.frozen_corruption.then_some(true), "frozen_corruption", false)?,
        seed,
        ..defaults
    };
    tcfg.validate()?;
    let init = s.path(a.init, "init")?;
    let mut model = if let Some(p) = &init {
        checkpoint::load(p)?.0
    } else {
        let mode: InputMode = parse_enum(&s.get(a.mode, "mode", "positions".to_string())?, "input mode")?;
        let (auto_in, auto_out) = training::suggest_scales(&corpus, mode);
        let mut mc = ModelConfig::new(
            s.get(a.d_model, "d_model", 64usize)?,
            s.get(a.heads, "heads", 1usize)?,
            s.get(a.layers, "layers", 1usize)?,
        );
        mc.input_mode = mode;
        mc.pe = parse_enum::<PeVariant>(&s.get(a.pe, "pe", "literal".to_string())?, "positional encoding")?;
        mc.input_scale = s.get(a.input_scale, "input_scale", auto_in)?;
        mc.output_scale = s.get(a.output_scale, "output_scale", auto_out)?;
        mc.seed = seed;
        MissFormer::new(mc)?
    };
    let out = out_path(s.path(a.out, "out")?, "model.ckpt");
    let log_default = {
        let mut p = out.as_os_str().to_owned();
        p.push(".log");
        PathBuf::from(p)
    };
    let log_path = s.path(a.log, "log")?.unwrap_or(log_default);
    s.finish()?;
    ensure_parent(&out)?;
    ensure_parent(&log_path)?;
    s.publish(&out)?;

    let mut log = BufWriter::new(fs::File::create(&log_path)?);
    let mut io_err = None;
    let run = training::train_with(&mut model, &corpus, &ccfg, &tcfg, |st| {
        if let Err(e) = writeln!(log, "{} {} {}", st.epoch, st.loss, st.wallclock_ms).and_then(|_| log.flush()) {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e.into());
    }
    let mut meta = Meta::new();
    for (k, v) in &s.used {
        if !v.contains(char::is_whitespace) && !v.is_empty() {
            meta.insert(k.clone(), v.clone());
        }
    }
    meta.insert("final_loss".into(), format!("{:?}", run.final_loss()));
    checkpoint::save(&out, &model, &meta)?;
    eprintln!("final loss {} after {} epochs; checkpoint {}", run.final_loss(), tcfg.epochs, out.display());
    Ok(())
}

fn plot_cmd(a: PlotArgs, attention: bool) -> CliResult<()> {
    let mut s = Settings::load(&a.common)?;
    let seed = s.seed();
    let sample = s.get(a.sample, "sample", 0usize)?;
    let corpus = load_source(&mut s, &a.source, sample + 1, rng::mix(&[seed, EVAL_CORPUS_SALT]))?;
    let ccfg = corruption(&mut s, &a.corruption, 0.1, seed)?;
    let pred_len = s.get(a.pred_len, "pred_len", 0usize)?;
    let out = out_path(s.path(a.out, "out")?, if attention { "attention.svg" } else { "trajectory.svg" });
    s.finish()?;
    let (model, _) = checkpoint::load(&a.ckpt)?;
    let truth = corpus
        .get(sample)
        .ok_or_else(|| CliError::Usage(format!("sample {sample} out of range ({} trajectories)", corpus.len())))?;
    let mut r = rng::stream(ccfg.seed, sample as u64);
    let observed = corrupt::corrupt_with(truth, &ccfg, &mut r)?;
    let observed = training::finish_input(observed, pred_len, InputMode::Positions)?;
    let input = training::finish_input(observed.clone(), 0, model.config().input_mode)?;
    let (estimate, record) = model.encoder_forward(&input)?;
    ensure_parent(&out)?;
    if attention {
        plot::plot_attention(&record, &input.missing, &out)?;
    } else {
        plot::plot_trajectories(&truth.positions, &observed, &estimate, &out)?;
    }
    s.publish(&out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_1() {
        assert_eq!(run(["missformer", "bogus"]), 1);
        assert_eq!(run(["missformer", "generate", "--no-such-flag"]), 1);
        assert_eq!(run(["missformer", "generate", "--regime", "spaceship", "--n", "1", "--out", "/dev/null"]), 1);
    }

    #[test]
    fn runtime_errors_exit_2() {
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("nope.txt");
        let out = dir.path().join("o.txt");
        let code = run([
            "missformer",
            "corrupt",
            "--input",
            missing.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 2);
    }

    #[test]
    fn flag_beats_config_beats_default() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.cfg");
        fs::write(&cfg, "n = 7\nregime = pedestrian\n").unwrap();
        let out = dir.path().join("c.txt");
        let args = |extra: &[&str]| {
            let mut v = vec!["missformer", "generate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
            v.extend_from_slice(extra);
            v.into_iter().map(String::from).collect::<Vec<_>>()
        };
        assert_eq!(run(args(&[])), 0);
        assert_eq!(fs::read_to_string(&out).unwrap().lines().count(), 7);
        assert_eq!(run(args(&["--n", "3"])), 0);
        assert_eq!(fs::read_to_string(&out).unwrap().lines().count(), 3);
        let echo = fs::read_to_string(dir.path().join("c.txt.config")).unwrap();
        assert!(echo.contains("n = 3") && echo.contains("regime = pedestrian"));
    }

    #[test]
    fn unknown_config_key_is_usage_error() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("c.cfg");
        fs::write(&cfg, "colour = blue\n").unwrap();
        let out = dir.path().join("c.txt");
        assert_eq!(
            run(["missformer", "generate", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]),
            1
        );
    }
}
