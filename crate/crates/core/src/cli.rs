//! Command-line interface.
//!
//! Output files (all under `--out`):
//!
//! | command         | files                                                          |
//! |-----------------|----------------------------------------------------------------|
//! | `generate`      | `pool.jsonl`                                                   |
//! | `split`         | `P-<k>.json` per budget, `test.json`, `protocols.csv`          |
//! | `train`         | `model-<protocol>-<mode>-seed<s>.json`, `history-<protocol>-<mode>-seed<s>.csv`, `experiment-<protocol>-<mode>.json` |
//! | `evaluate`      | `report.json`, `report.csv`                                    |
//! | `ablate-lambda` | `ablation.csv`                                                 |
//!
//! Exit codes: 0 on success, 1 when a run fails, 2 for usage or validation errors.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::data::{
    generate_synthetic, make_protocol_splits, GeneratorConfig, SequencePool, SplitManifest, SplitView, DEFAULT_BUDGETS,
};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalReport};
use crate::train::{load_checkpoint, save_checkpoint, train_with, TrainConfig};

#[derive(Debug, Parser)]
#[command(name = "ssl-mtpp", version, about = "Semi-supervised marked temporal point process experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic sequence pool.
    Generate(GenerateArgs),
    /// Split a pool into protocol manifests.
    Split(SplitArgs),
    /// Train one model per seed on a split.
    Train(TrainArgs),
    /// Evaluate checkpoints on a split's test set.
    Evaluate(EvaluateArgs),
    /// Train and evaluate one model per lambda and seed.
    AblateLambda(AblateArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Ssl,
    Baseline,
}

impl Mode {
    fn name(self) -> &'static str {
        match self {
            Mode::Ssl => "ssl",
            Mode::Baseline => "baseline",
        }
    }
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, default_value_t = 1000)]
    pub sequences: usize,
    /// Number of marker classes; defaults to the number of priors, else 3.
    #[arg(long)]
    pub classes: Option<usize>,
    /// Comma-separated class priors.
    #[arg(long, value_delimiter = ',')]
    pub priors: Option<Vec<f64>>,
    #[arg(long, default_value_t = 50.0)]
    pub mean_length: f64,
    #[arg(long, default_value_t = 1.0)]
    pub base_intensity: f64,
    #[arg(long, default_value_t = 0.5)]
    pub excitation: f64,
    #[arg(long, default_value_t = 1.0)]
    pub decay: f64,
    /// Probability that a marker follows the recent-gap bucket instead of the priors.
    #[arg(long, default_value_t = 0.8)]
    pub coupling: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub pool: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    /// Comma-separated labeled-event budgets.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_BUDGETS.to_vec())]
    pub budgets: Vec<usize>,
    /// Minimum number of events in the held-out test set.
    #[arg(long, default_value_t = 60_000)]
    pub test_events: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Training settings; flags override the `--config` file, which overrides defaults.
#[derive(Debug, Args)]
pub struct TrainingFlags {
    /// TOML file with `TrainConfig` keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated seeds; takes precedence over `--seed`.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Print per-epoch losses to stderr.
    #[arg(long, short)]
    pub verbose: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub pool: PathBuf,
    #[arg(long)]
    pub split: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    #[arg(long, value_enum, default_value_t = Mode::Ssl)]
    pub mode: Mode,
    #[command(flatten)]
    pub training: TrainingFlags,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub pool: PathBuf,
    /// Any manifest of the split; its test list is used.
    #[arg(long)]
    pub split: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    #[arg(long, num_args = 1.., required = true)]
    pub checkpoints: Vec<PathBuf>,
    #[arg(long, default_value_t = 256)]
    pub batch_size: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub pool: PathBuf,
    #[arg(long)]
    pub split: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.001, 0.01, 0.1, 1.0, 10.0])]
    pub lambdas: Vec<f64>,
    #[command(flatten)]
    pub training: TrainingFlags,
    #[arg(long)]
    pub out: PathBuf,
}

/// Everything needed to rerun a training command.
#[derive(Clone, Debug, Serialize)]
pub struct ExperimentManifest {
    pub pool: PathBuf,
    pub split: PathBuf,
    pub mode: Mode,
    pub config: TrainConfig,
    pub out: PathBuf,
    pub seeds: Vec<u64>,
}

/// Parses `args` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                2
            } else {
                1
            }
        }
    }
}

pub fn execute(command: &Command) -> Result<()> {
    match command {
        Command::Generate(a) => cmd_generate(a),
        Command::Split(a) => cmd_split(a),
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::AblateLambda(a) => cmd_ablate_lambda(a),
    }
}

fn require_file(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("no such file: {}", path.display())))
    }
}

fn out_dir(path: &Path) -> Result<&Path> {
    std::fs::create_dir_all(path)?;
    Ok(path)
}

fn load_view(pool: &Path, split: &Path, classes: usize) -> Result<SplitView> {
    require_file(pool)?;
    require_file(split)?;
    let pool = SequencePool::load(pool, classes)?;
    SplitView::new(&pool, &SplitManifest::load(split)?)
}

pub fn cmd_generate(a: &GenerateArgs) -> Result<()> {
    let defaults = GeneratorConfig::default();
    let priors = a.priors.clone().unwrap_or(defaults.priors);
    let sum: f64 = priors.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidConfig(format!("priors sum to {sum}, expected 1")));
    }
    let config = GeneratorConfig {
        sequences: a.sequences,
        num_classes: a.classes.unwrap_or(priors.len()),
        priors,
        base_intensity: a.base_intensity,
        excitation: a.excitation,
        decay: a.decay,
        mean_length: a.mean_length,
        coupling: a.coupling,
        ..defaults
    };
    let pool = generate_synthetic(&config, a.seed)?;
    pool.save(out_dir(&a.out)?.join("pool.jsonl"))?;
    print!("{}", pool_summary(&pool));
    Ok(())
}

pub fn pool_summary(pool: &SequencePool) -> String {
    let events = pool.events();
    let mut s = String::new();
    writeln!(s, "sequences   {}", pool.len()).unwrap();
    writeln!(s, "events      {events}").unwrap();
    writeln!(s, "mean length {:.2}", events as f64 / pool.len() as f64).unwrap();
    let counts = pool.class_counts();
    let labeled: usize = counts.iter().sum();
    for (c, n) in counts.iter().enumerate() {
        writeln!(s, "class {c}     {:.4}", *n as f64 / labeled.max(1) as f64).unwrap();
    }
    s
}

pub fn cmd_split(a: &SplitArgs) -> Result<()> {
    require_file(&a.pool)?;
    let pool = SequencePool::load(&a.pool, a.classes)?;
    let splits = make_protocol_splits(&pool, &a.budgets, a.test_events, a.seed)?;
    let out = out_dir(&a.out)?;
    let mut table = String::from("protocol,budget,labeled_events,unlabeled_events,labeled_sequences,unlabeled_sequences,test_events\n");
    println!("{:<8} {:>14} {:>16}", "protocol", "labeled events", "unlabeled events");
    for s in &splits {
        s.manifest.save(out.join(format!("{}.json", s.name())))?;
        let m = &s.manifest;
        writeln!(
            table,
            "{},{},{},{},{},{},{}",
            s.name(),
            s.budget,
            s.labeled_events,
            s.unlabeled_events,
            m.labeled.len(),
            m.unlabeled.len(),
            s.test_events
        )
        .unwrap();
        println!("{:<8} {:>14} {:>16}", s.name(), s.labeled_events, s.unlabeled_events);
        if m.unlabeled.is_empty() {
            eprintln!("warning: {} uses the whole training pool; its unlabeled set is empty", s.name());
        }
    }
    if let Some(first) = splits.first() {
        let test = SplitManifest {
            protocol: "test".into(),
            labeled: Vec::new(),
            unlabeled: Vec::new(),
            test: first.manifest.test.clone(),
            seed: a.seed,
        };
        test.save(out.join("test.json"))?;
        println!("test set: {} sequences, {} events", test.test.len(), first.test_events);
    }
    std::fs::write(out.join("protocols.csv"), table)?;
    Ok(())
}

fn resolve_training(flags: &TrainingFlags) -> Result<(TrainConfig, Vec<u64>)> {
    let mut config = match &flags.config {
        Some(path) => {
            require_file(path)?;
            TrainConfig::load(path)?
        }
        None => TrainConfig::default(),
    };
    if let Some(v) = flags.epochs {
        config.epochs = v;
    }
    if let Some(v) = flags.lr {
        config.learning_rate = v;
    }
    if let Some(v) = flags.batch_size {
        config.batch_size = v;
    }
    if let Some(v) = flags.lambda {
        config.lambda = v;
    }
    if let Some(v) = flags.seed {
        config.seed = v;
    }
    config.validate()?;
    let seeds = flags.seeds.clone().unwrap_or_else(|| vec![config.seed]);
    if seeds.is_empty() {
        return Err(Error::InvalidConfig("seed list is empty".into()));
    }
    Ok((config, seeds))
}

fn train_one(view: &SplitView, config: &TrainConfig, verbose: bool) -> Result<crate::train::TrainOutcome> {
    let total = config.epochs;
    train_with(view, config, |e| {
        if verbose {
            eprintln!(
                "epoch {}/{total} marker {:.5} time {:.5} recon {} total {:.5}",
                e.epoch,
                e.l_marker,
                e.l_time,
                e.l_recon.map_or("-".into(), |r| format!("{r:.5}")),
                e.l_total
            );
        }
    })
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let view = load_view(&a.pool, &a.split, a.classes)?;
    let (mut config, seeds) = resolve_training(&a.training)?;
    config.baseline = a.mode == Mode::Baseline;
    let out = out_dir(&a.out)?;
    let mode = a.mode.name();
    let manifest = ExperimentManifest {
        pool: a.pool.clone(),
        split: a.split.clone(),
        mode: a.mode,
        config: config.clone(),
        out: a.out.clone(),
        seeds: seeds.clone(),
    };
    std::fs::write(
        out.join(format!("experiment-{}-{mode}.json", view.protocol)),
        serde_json::to_string_pretty(&manifest)? + "\n",
    )?;
    for &seed in &seeds {
        let config = TrainConfig { seed, ..config.clone() };
        let outcome = train_one(&view, &config, a.training.verbose)?;
        let stem = format!("{}-{mode}-seed{seed}", view.protocol);
        save_checkpoint(&outcome.trained, out.join(format!("model-{stem}.json")))?;
        outcome.history.save_csv(out.join(format!("history-{stem}.csv")))?;
        let last = outcome.history.epochs.last().expect("at least one epoch");
        println!("{} {mode} seed {seed}: {} epochs, final total loss {:.6}", view.protocol, last.epoch, last.l_total);
    }
    Ok(())
}

/// One evaluated checkpoint.
#[derive(Clone, Debug, Serialize)]
pub struct RunReport {
    pub checkpoint: String,
    pub protocol: String,
    pub mode: String,
    pub lambda: f64,
    pub seed: u64,
    pub report: EvalReport,
}

/// Median and interquartile range of one metric across seeds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Spread {
    pub median: f64,
    pub iqr: f64,
}

/// Linear-interpolation quantile of sorted values.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn spread(values: &[f64]) -> Spread {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Spread { median: quantile(&v, 0.5), iqr: quantile(&v, 0.75) - quantile(&v, 0.25) }
}

pub fn median(values: &[f64]) -> f64 {
    spread(values).median
}

/// Aggregated row of the protocol table.
#[derive(Clone, Debug, Serialize)]
pub struct TableRow {
    pub protocol: String,
    pub model: String,
    pub lambda: f64,
    pub seeds: usize,
    pub avg_precision: Spread,
    pub macro_f1: Spread,
    pub micro_f1: Spread,
    pub avg_precision_ranked: Spread,
}

impl TableRow {
    pub const CSV_HEADER: &'static str = "protocol,model,lambda,seeds,avg_precision_median,avg_precision_iqr,\
macro_f1_median,macro_f1_iqr,micro_f1_median,micro_f1_iqr,avg_precision_ranked_median,avg_precision_ranked_iqr";

    pub fn csv_row(&self) -> String {
        let cells: Vec<String> = [self.avg_precision, self.macro_f1, self.micro_f1, self.avg_precision_ranked]
            .iter()
            .flat_map(|s| [s.median.to_string(), s.iqr.to_string()])
            .collect();
        format!("{},{},{},{},{}", self.protocol, self.model, self.lambda, self.seeds, cells.join(","))
    }
}

fn protocol_key(name: &str) -> (String, u64, String) {
    let digits: String = name.chars().rev().take_while(char::is_ascii_digit).collect::<Vec<_>>().into_iter().rev().collect();
    let prefix = name[..name.len() - digits.len()].to_string();
    (prefix, digits.parse().unwrap_or(0), name.to_string())
}

/// Protocol sort key, mode rank, λ bits.
type GroupKey = ((String, u64, String), String, u64);

pub fn aggregate(runs: &[RunReport]) -> Vec<TableRow> {
    let mut groups: BTreeMap<GroupKey, Vec<&RunReport>> = BTreeMap::new();
    for r in runs {
        let mode_rank = if r.mode == "baseline" { "0" } else { "1" };
        groups
            .entry((protocol_key(&r.protocol), format!("{mode_rank}{}", r.mode), r.lambda.to_bits()))
            .or_default()
            .push(r);
    }
    groups
        .into_values()
        .map(|g| {
            let pick = |f: fn(&EvalReport) -> f64| spread(&g.iter().map(|r| f(&r.report)).collect::<Vec<_>>());
            TableRow {
                protocol: g[0].protocol.clone(),
                model: g[0].mode.clone(),
                lambda: g[0].lambda,
                seeds: g.len(),
                avg_precision: pick(|r| r.avg_precision),
                macro_f1: pick(|r| r.macro_f1),
                micro_f1: pick(|r| r.micro_f1),
                avg_precision_ranked: pick(|r| r.avg_precision_ranked),
            }
        })
        .collect()
}

#[derive(Serialize)]
struct ReportFile<'a> {
    rows: &'a [TableRow],
    runs: &'a [RunReport],
}

pub fn cmd_evaluate(a: &EvaluateArgs) -> Result<()> {
    let view = load_view(&a.pool, &a.split, a.classes)?;
    let mut runs = Vec::new();
    for path in &a.checkpoints {
        require_file(path)?;
        let trained = load_checkpoint(path)?;
        if trained.model.config().num_classes != view.num_classes {
            return Err(Error::Checkpoint(format!(
                "{} predicts {} classes, pool has {}",
                path.display(),
                trained.model.config().num_classes,
                view.num_classes
            )));
        }
        let report = evaluate(&trained, &view.test, a.batch_size)?;
        runs.push(RunReport {
            checkpoint: path.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default(),
            protocol: trained.protocol.clone(),
            mode: if trained.config.baseline { "baseline" } else { "ssl" }.into(),
            lambda: trained.config.effective_lambda(),
            seed: trained.config.seed,
            report,
        });
    }
    let rows = aggregate(&runs);
    let out = out_dir(&a.out)?;
    let mut csv = format!("{}\n", TableRow::CSV_HEADER);
    for r in &rows {
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    std::fs::write(out.join("report.csv"), csv)?;
    std::fs::write(out.join("report.json"), serde_json::to_string_pretty(&ReportFile { rows: &rows, runs: &runs })? + "\n")?;
    println!("{:<8} {:<9} {:>6} {:>18} {:>18} {:>18}", "protocol", "model", "seeds", "avg precision", "macro-F1", "micro-F1");
    for r in &rows {
        let cell = |s: Spread| format!("{:.2} (iqr {:.2})", s.median, s.iqr);
        println!(
            "{:<8} {:<9} {:>6} {:>18} {:>18} {:>18}",
            r.protocol,
            r.model,
            r.seeds,
            cell(r.avg_precision),
            cell(r.macro_f1),
            cell(r.micro_f1)
        );
    }
    Ok(())
}

/// One trained-and-evaluated point of the lambda sweep.
#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub lambda: f64,
    pub seed: u64,
    pub report: EvalReport,
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("lambda,seed,avg_precision,avg_precision_ranked,macro_f1,micro_f1\n");
    for r in rows {
        let m = &r.report;
        writeln!(s, "{},{},{},{},{},{}", r.lambda, r.seed, m.avg_precision, m.avg_precision_ranked, m.macro_f1, m.micro_f1)
            .unwrap();
    }
    s
}

/// Trains an SSL model for every `(lambda, seed)` pair and evaluates it on
/// the view's test set. Rows are sorted by lambda, then seed.
pub fn run_ablation(view: &SplitView, config: &TrainConfig, lambdas: &[f64], seeds: &[u64], verbose: bool) -> Result<Vec<AblationRow>> {
    let mut lambdas = lambdas.to_vec();
    if lambdas.is_empty() || lambdas.iter().any(|l| !l.is_finite() || *l < 0.0) {
        return Err(Error::InvalidConfig("lambdas must be a non-empty list of non-negative numbers".into()));
    }
    lambdas.sort_by(f64::total_cmp);
    let mut seeds = seeds.to_vec();
    seeds.sort_unstable();
    let mut rows = Vec::new();
    for &lambda in &lambdas {
        for &seed in &seeds {
            let config = TrainConfig { lambda, seed, baseline: false, ..config.clone() };
            let outcome = train_one(view, &config, verbose)?;
            let report = evaluate(&outcome.trained, &view.test, 256)?;
            println!("lambda {lambda} seed {seed}: avg precision {:.2}", report.avg_precision);
            rows.push(AblationRow { lambda, seed, report });
        }
    }
    Ok(rows)
}

pub fn cmd_ablate_lambda(a: &AblateArgs) -> Result<()> {
    let view = load_view(&a.pool, &a.split, a.classes)?;
    let (config, seeds) = resolve_training(&a.training)?;
    let rows = run_ablation(&view, &config, &a.lambdas, &seeds, a.training.verbose)?;
    std::fs::write(out_dir(&a.out)?.join("ablation.csv"), ablation_csv(&rows))?;
    Ok(())
}
