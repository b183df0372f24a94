//! Subcommands of the `lpo-rec` binary.

use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use thiserror::Error;

use lpo_rec_core::data::{self, build_splits, core_filter, generate_synthetic, parse_interactions, write_interactions};
use lpo_rec_core::eval::{evaluate, prob_diagnostics};
use lpo_rec_core::trainer::{pretrain_reference, train_from, TrainOutcome};
use lpo_rec_core::{
    model, DatasetSplits, LossKind, ModelParams, Preset, Role, RunConfig, SamplerKind, SyntheticSpec, CUTOFFS,
};

pub const THREADS_ENV: &str = "LPO_REC_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "lpo-rec",
    version,
    about = "Tail-aware sequential recommendation with listwise preference optimization"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Run configuration file (flat `key = value` lines).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Random seed; for train and ablate it overrides the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Preset applied before the config file's keys: paper or desk.
    #[arg(long, global = true)]
    pub preset: Option<String>,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic interaction log (TSV: user, item, timestamp).
    Generate(GenerateArgs),
    /// Filter, split and index an interaction log into a directory.
    Prepare(PrepareArgs),
    /// Train a model; writes per-epoch checkpoints, best.ckpt, history.csv,
    /// metrics.json and the resolved config.
    Train,
    /// Evaluate a checkpoint on a prepared split; prints or writes JSON.
    Evaluate(EvalArgs),
    /// Histogram of per-user tail probability shifts.
    Diagnose(DiagnoseArgs),
    /// Train and evaluate every loss, sampler and reweighting variant.
    Ablate,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, default_value_t = 1000)]
    pub users: usize,
    #[arg(long, default_value_t = 500)]
    pub items: usize,
    #[arg(long, default_value_t = 20)]
    pub per_user: usize,
    #[arg(long, default_value_t = 1.1)]
    pub zipf: f64,
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    /// Interaction TSV to read.
    #[arg(long)]
    pub input: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Directory written by `prepare`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub bins: usize,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] lpo_rec_core::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(e) if e.is_validation() => 2,
            _ => 3,
        }
    }

    pub fn class(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "UsageError",
            CliError::Core(e) => e.class(),
            CliError::Io { .. } => "IoError",
        }
    }
}

macro_rules! core_err {
    ($e:expr) => {
        $e.map_err(|e| CliError::Core(e.into()))
    };
}

fn io_at<T>(path: &Path, r: io::Result<T>) -> Result<T, CliError> {
    r.map_err(|source| CliError::Io { path: path.to_path_buf(), source })
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        io_at(parent, fs::create_dir_all(parent))?;
    }
    Ok(BufWriter::new(io_at(path, File::create(path))?))
}

/// Worker count from `LPO_REC_THREADS`; 1 when unset.
pub fn threads_from_env() -> Result<usize, CliError> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        },
    }
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Generate(a) => cmd_generate(a, cli.seed.unwrap_or(0), cli.out.as_deref()),
        Command::Prepare(a) => {
            let out = cli.out.as_deref().ok_or_else(|| CliError::Usage("prepare needs --out DIR".into()))?;
            cmd_prepare(&a.input, out)
        }
        Command::Train => cmd_train(&resolve_config(cli)?).map(|_| ()),
        Command::Evaluate(a) => cmd_evaluate(&a.checkpoint, &a.data, &a.split, cli.out.as_deref()),
        Command::Diagnose(a) => cmd_diagnose(&a.checkpoint, &a.data, a.bins, cli.out.as_deref()),
        Command::Ablate => cmd_ablate(&resolve_config(cli)?, threads_from_env()?).map(|_| ()),
    }
}

/// Config file (if any) with the command-line overrides applied.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let preset = cli.preset.as_deref().map(str::parse::<Preset>).transpose().map_err(|e| CliError::Core(e.into()))?;
    let text = match &cli.config {
        Some(p) => io_at(p, fs::read_to_string(p))?,
        None => String::new(),
    };
    let mut cfg = core_err!(RunConfig::parse(&text, preset))?;
    if let Some(s) = cli.seed {
        cfg.train.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    Ok(cfg)
}

pub fn cmd_generate(a: &GenerateArgs, seed: u64, out: Option<&Path>) -> Result<(), CliError> {
    let spec = SyntheticSpec {
        num_users: a.users,
        num_items: a.items,
        interactions_per_user: a.per_user,
        zipf_exponent: a.zipf,
        seed,
    };
    let records = core_err!(generate_synthetic(&spec))?;
    match out {
        Some(p) => {
            let mut w = create(p)?;
            io_at(p, write_interactions(&records, &mut w).and_then(|_| w.flush()))
        }
        None => {
            let stdout = io::stdout();
            io_at(Path::new("<stdout>"), write_interactions(&records, stdout.lock()))
        }
    }
}

pub fn cmd_prepare(input: &Path, out_dir: &Path) -> Result<(), CliError> {
    let f = io_at(input, File::open(input))?;
    let records = core_err!(parse_interactions(BufReader::new(f)))?;
    let filtered = core_filter(&records, data::MIN_INTERACTIONS);
    if filtered.is_empty() {
        return Err(CliError::Core(data::DataError::EmptyAfterFilter.into()));
    }
    let splits = core_err!(build_splits(&filtered, data::MAX_SEQ_LEN))?;
    core_err!(splits.save(out_dir))
}

fn load_splits(dir: &Path) -> Result<DatasetSplits, CliError> {
    core_err!(DatasetSplits::load(dir))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    let mut w = create(path)?;
    io_at(path, w.write_all(text.as_bytes()).and_then(|_| w.flush()))
}

/// Trains per `cfg`, writing everything into `cfg.out_dir`. Returns the
/// outcome for callers that want to inspect it.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainOutcome, CliError> {
    let splits = load_splits(&cfg.data_dir)?;
    let out = &cfg.out_dir;
    io_at(out, fs::create_dir_all(out))?;
    write_text(&out.join("config.txt"), &cfg.to_text())?;

    let dims = cfg.model_dims(splits.num_items());
    let reference = match cfg.train.loss {
        LossKind::Dpo => {
            let r = core_err!(pretrain_reference(&splits, dims, &cfg.train))?;
            core_err!(r.save(&out.join("reference.ckpt")))?;
            Some(r)
        }
        _ => None,
    };
    let init = core_err!(model::init_params(dims, cfg.train.seed))?;
    let mut save_epoch = |rec: &lpo_rec_core::trainer::EpochRecord, p: &ModelParams| {
        p.save(&out.join(format!("epoch_{:03}.ckpt", rec.epoch))).map_err(Into::into)
    };
    let outcome = core_err!(train_from(&splits, init, &cfg.train, reference.as_ref(), &mut save_epoch))?;
    core_err!(outcome.best_params.save(&out.join("best.ckpt")))?;

    let hist_path = out.join("history.csv");
    let mut w = create(&hist_path)?;
    io_at(&hist_path, outcome.history.write_csv(&mut w).and_then(|_| w.flush()))?;

    let metrics = core_err!(evaluate(&outcome.best_params, &splits.test, &splits.catalog, &CUTOFFS))?;
    write_text(&out.join("metrics.json"), &pretty(&metrics.to_json()))?;
    Ok(outcome)
}

fn pretty(v: &serde_json::Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("json values always serialize");
    s.push('\n');
    s
}

fn load_matching(checkpoint: &Path, data_dir: &Path) -> Result<(ModelParams, DatasetSplits), CliError> {
    if !checkpoint.is_file() {
        return Err(CliError::Io {
            path: checkpoint.to_path_buf(),
            source: io::Error::new(io::ErrorKind::NotFound, "checkpoint not found"),
        });
    }
    let params = core_err!(ModelParams::load(checkpoint))?;
    let splits = load_splits(data_dir)?;
    if params.dims.num_items != splits.num_items() {
        return Err(CliError::Usage(format!(
            "checkpoint covers {} items but the data has {}",
            params.dims.num_items,
            splits.num_items()
        )));
    }
    Ok((params, splits))
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), CliError> {
    match out {
        Some(p) => write_text(p, text),
        None => io_at(Path::new("<stdout>"), io::stdout().lock().write_all(text.as_bytes())),
    }
}

pub fn cmd_evaluate(checkpoint: &Path, data_dir: &Path, split: &str, out: Option<&Path>) -> Result<(), CliError> {
    let role: Role = split.parse().map_err(CliError::Usage)?;
    let (params, splits) = load_matching(checkpoint, data_dir)?;
    let report = core_err!(evaluate(&params, splits.examples(role), &splits.catalog, &CUTOFFS))?;
    emit(out, &pretty(&report.to_json()))
}

pub fn cmd_diagnose(checkpoint: &Path, data_dir: &Path, bins: usize, out: Option<&Path>) -> Result<(), CliError> {
    if bins == 0 {
        return Err(CliError::Usage("--bins must be at least 1".into()));
    }
    let (params, splits) = load_matching(checkpoint, data_dir)?;
    let diag = core_err!(prob_diagnostics(&params, &splits.test, &splits.catalog, bins))?;
    let mut buf = Vec::new();
    diag.write_csv(&mut buf).expect("writing to memory");
    emit(out, &String::from_utf8(buf).expect("csv is utf-8"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub loss: LossKind,
    pub sampler: SamplerKind,
    pub reweight: bool,
    pub hr10: f64,
    pub ndcg10: f64,
    pub tail_hr10: Option<f64>,
    pub tail_ndcg10: Option<f64>,
}

pub const ABLATION_HEADER: &str = "loss,sampler,reweight,hr10,ndcg10,tail_hr10,tail_ndcg10";

impl AblationRow {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("NA".to_string(), |x| x.to_string());
        format!(
            "{},{},{},{},{},{},{}",
            self.loss,
            self.sampler,
            self.reweight,
            self.hr10,
            self.ndcg10,
            opt(self.tail_hr10),
            opt(self.tail_ndcg10)
        )
    }
}

/// The 2 x 3 x 2 grid over {ce, ce_lpo}, samplers and reweighting. The
/// sampler has no effect on cross-entropy-only training, so those runs are
/// trained once per reweighting setting and their rows repeat the result.
pub fn cmd_ablate(cfg: &RunConfig, threads: usize) -> Result<Vec<AblationRow>, CliError> {
    let splits = load_splits(&cfg.data_dir)?;
    let dims = cfg.model_dims(splits.num_items());
    let mut grid = Vec::new();
    for loss in [LossKind::Ce, LossKind::CeLpo] {
        for sampler in SamplerKind::ALL {
            for reweight in [true, false] {
                grid.push((loss, sampler, reweight));
            }
        }
    }
    let jobs: Vec<(LossKind, SamplerKind, bool)> =
        grid.iter().copied().filter(|&(l, s, _)| l != LossKind::Ce || s == SamplerKind::ALL[0]).collect();

    let run_job = |&(loss, sampler, reweight): &(LossKind, SamplerKind, bool)| -> Result<[Option<f64>; 4], CliError> {
        let mut t = cfg.train.clone();
        t.loss = loss;
        t.sampler.kind = sampler;
        t.loss_config.reweight = reweight;
        let init = core_err!(model::init_params(dims, t.seed))?;
        let out = core_err!(train_from(&splits, init, &t, None, &mut |_, _| Ok(())))?;
        let m = core_err!(evaluate(&out.best_params, &splits.test, &splits.catalog, &[10]))?;
        Ok([m.hr(10), m.ndcg(10), m.tail_hr(10), m.tail_ndcg(10)])
    };
    let results = run_parallel(&jobs, threads.max(1), run_job)?;

    let rows: Vec<AblationRow> = grid
        .iter()
        .map(|&(loss, sampler, reweight)| {
            let key =
                if loss == LossKind::Ce { (loss, SamplerKind::ALL[0], reweight) } else { (loss, sampler, reweight) };
            let r = results[jobs.iter().position(|j| *j == key).expect("job for every row")];
            AblationRow {
                loss,
                sampler,
                reweight,
                hr10: r[0].unwrap_or(0.0),
                ndcg10: r[1].unwrap_or(0.0),
                tail_hr10: r[2],
                tail_ndcg10: r[3],
            }
        })
        .collect();

    let out = &cfg.out_dir;
    io_at(out, fs::create_dir_all(out))?;
    write_text(&out.join("config.txt"), &cfg.to_text())?;
    let mut table = format!("{ABLATION_HEADER}\n");
    for r in &rows {
        table.push_str(&r.to_csv());
        table.push('\n');
    }
    write_text(&out.join("ablation.csv"), &table)?;
    Ok(rows)
}

/// Runs `f` over `jobs` on up to `threads` workers; results keep job order,
/// so the output does not depend on the worker count.
fn run_parallel<J: Sync, T: Send, F>(jobs: &[J], threads: usize, f: F) -> Result<Vec<T>, CliError>
where
    F: Fn(&J) -> Result<T, CliError> + Sync,
{
    if threads == 1 {
        return jobs.iter().map(&f).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut slots: Vec<Option<Result<T, CliError>>> = (0..jobs.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        let workers: Vec<_> = (0..threads.min(jobs.len()))
            .map(|_| {
                s.spawn(|| {
                    let mut done = Vec::new();
                    loop {
                        let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                        if i >= jobs.len() {
                            break done;
                        }
                        done.push((i, f(&jobs[i])));
                    }
                })
            })
            .collect();
        for w in workers {
            for (i, r) in w.join().expect("ablation worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots.into_iter().map(|r| r.expect("every job ran")).collect()
}
